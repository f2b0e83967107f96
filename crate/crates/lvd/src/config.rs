//! Run configuration as flat dotted keys (`backbone.d_model = 64`).

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use lvd_core::codec::CodecConfig;
use lvd_core::diffusion::{
    make_schedule, NoiseSchedule, SampleConfig, ScheduleKind, TrainStepConfig,
};
use lvd_core::transformer::{AdaLnMode, DenoiserConfig};
use sha2::{Digest, Sha256};

use crate::data::ToyDatasetSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CondMode {
    /// One token per sprite class.
    Class,
    /// A color word and a motion word.
    Caption,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub zero_terminal_snr: bool,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(make_schedule(
            ScheduleKind::Linear,
            self.steps,
            self.beta_start,
            self.beta_end,
            self.zero_terminal_snr,
        )?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub step: TrainStepConfig,
    /// Probability that a batch is drawn from image records.
    pub image_mix: f64,
    /// Zero disables the weight average.
    pub ema_decay: f64,
    pub cond_mode: CondMode,
    pub log_every: usize,
    pub ckpt_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuperResConfig {
    pub t_max_noise: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub optim: OptimConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: ToyDatasetSpec,
    pub codec: CodecConfig,
    pub codec_train: OptimConfig,
    pub backbone: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub superres: SuperResConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut backbone = DenoiserConfig::desk();
        backbone.vocab = 16;
        Self {
            data: ToyDatasetSpec::default(),
            codec: CodecConfig::desk(),
            codec_train: OptimConfig {
                steps: 1500,
                batch: 4,
                lr: 3e-3,
                warmup_frac: 0.05,
                weight_decay: 0.0,
                beta1: 0.9,
                beta2: 0.999,
                seed: 1,
            },
            backbone,
            schedule: ScheduleConfig {
                steps: 1000,
                beta_start: 1e-4,
                beta_end: 0.02,
                zero_terminal_snr: true,
            },
            train: TrainConfig {
                optim: OptimConfig {
                    steps: 3000,
                    batch: 8,
                    lr: 1e-3,
                    warmup_frac: 0.05,
                    weight_decay: 0.01,
                    beta1: 0.9,
                    beta2: 0.999,
                    seed: 2,
                },
                step: TrainStepConfig {
                    p_sc: 0.9,
                    cond_drop_prob: 0.1,
                    p_fp: 0.25,
                },
                image_mix: 0.25,
                ema_decay: 0.0,
                cond_mode: CondMode::Class,
                log_every: 100,
                ckpt_every: 0,
            },
            sample: SampleConfig {
                steps: 50,
                guidance: 1.0,
                self_cond: true,
                seed: 0,
            },
            superres: SuperResConfig {
                t_max_noise: 250,
                d_model: 32,
                blocks: 2,
                optim: OptimConfig {
                    steps: 3000,
                    batch: 8,
                    lr: 4e-3,
                    warmup_frac: 0.05,
                    weight_decay: 0.0,
                    beta1: 0.9,
                    beta2: 0.999,
                    seed: 3,
                },
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| anyhow!("{key}: cannot parse {value:?}: {e}"))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .trim_matches(|c| c == '[' || c == ']' || c == '"')
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn fmt_list(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

macro_rules! optim_keys {
    ($pairs:ident, $prefix:literal, $o:expr) => {
        $pairs.push((concat!($prefix, ".steps"), $o.steps.to_string()));
        $pairs.push((concat!($prefix, ".batch"), $o.batch.to_string()));
        $pairs.push((concat!($prefix, ".lr"), $o.lr.to_string()));
        $pairs.push((concat!($prefix, ".warmup_frac"), $o.warmup_frac.to_string()));
        $pairs.push((
            concat!($prefix, ".weight_decay"),
            $o.weight_decay.to_string(),
        ));
        $pairs.push((concat!($prefix, ".beta1"), $o.beta1.to_string()));
        $pairs.push((concat!($prefix, ".beta2"), $o.beta2.to_string()));
        $pairs.push((concat!($prefix, ".seed"), $o.seed.to_string()));
    };
}

fn set_optim(o: &mut OptimConfig, field: &str, key: &str, v: &str) -> Result<bool> {
    match field {
        "steps" => o.steps = parse(key, v)?,
        "batch" => o.batch = parse(key, v)?,
        "lr" => o.lr = parse(key, v)?,
        "warmup_frac" => o.warmup_frac = parse(key, v)?,
        "weight_decay" => o.weight_decay = parse(key, v)?,
        "beta1" => o.beta1 = parse(key, v)?,
        "beta2" => o.beta2 = parse(key, v)?,
        "seed" => o.seed = parse(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    /// Every key with its current value, in a stable order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut p: Vec<(&'static str, String)> = Vec::new();
        let d = &self.data;
        p.push(("data.num_clips", d.num_clips.to_string()));
        p.push(("data.frames", d.frames.to_string()));
        p.push(("data.height", d.height.to_string()));
        p.push(("data.width", d.width.to_string()));
        p.push(("data.sprite", d.sprite.to_string()));
        p.push(("data.images_per_clip", d.images_per_clip.to_string()));
        p.push(("data.seed", d.seed.to_string()));
        let c = &self.codec;
        p.push(("codec.f_s", c.f_s.to_string()));
        p.push(("codec.f_t", c.f_t.to_string()));
        p.push(("codec.base_channels", c.base_channels.to_string()));
        p.push((
            "codec.channel_multipliers",
            fmt_list(&c.channel_multipliers),
        ));
        p.push(("codec.lat_c", c.lat_c.to_string()));
        optim_keys!(p, "codec_train", self.codec_train);
        let b = &self.backbone;
        p.push(("backbone.latent_channels", b.latent_channels.to_string()));
        p.push(("backbone.latent_frames", b.latent_frames.to_string()));
        p.push(("backbone.latent_height", b.latent_height.to_string()));
        p.push(("backbone.latent_width", b.latent_width.to_string()));
        p.push(("backbone.patch", b.patch.to_string()));
        p.push(("backbone.d_model", b.d_model.to_string()));
        p.push(("backbone.heads", b.heads.to_string()));
        p.push(("backbone.blocks", b.num_blocks.to_string()));
        p.push(("backbone.mlp_ratio", b.mlp_ratio.to_string()));
        p.push(("backbone.st_window", fmt_list(&b.st_window)));
        let (mode, rank) = match b.adaln {
            AdaLnMode::Separate => ("separate", 0),
            AdaLnMode::Lora { rank } => ("lora", rank),
        };
        p.push(("backbone.adaln", mode.to_string()));
        p.push(("backbone.lora_rank", rank.to_string()));
        p.push(("backbone.qk_norm", b.qk_norm.to_string()));
        p.push(("backbone.vocab", b.vocab.to_string()));
        p.push(("backbone.cross_attn", b.cross_attn.to_string()));
        p.push(("backbone.joint", b.joint.to_string()));
        p.push(("backbone.self_cond", b.self_cond.to_string()));
        p.push(("backbone.frame_pred", b.frame_pred.to_string()));
        p.push(("backbone.sr_channels", b.sr_channels.to_string()));
        p.push(("backbone.sr_scale", b.sr_scale.to_string()));
        let s = &self.schedule;
        p.push(("schedule.kind", ScheduleKind::Linear.as_str().to_string()));
        p.push(("schedule.steps", s.steps.to_string()));
        p.push(("schedule.beta_start", s.beta_start.to_string()));
        p.push(("schedule.beta_end", s.beta_end.to_string()));
        p.push((
            "schedule.zero_terminal_snr",
            s.zero_terminal_snr.to_string(),
        ));
        let t = &self.train;
        optim_keys!(p, "train", t.optim);
        p.push(("train.p_sc", t.step.p_sc.to_string()));
        p.push(("train.p_fp", t.step.p_fp.to_string()));
        p.push(("train.cond_drop_prob", t.step.cond_drop_prob.to_string()));
        p.push(("train.image_mix", t.image_mix.to_string()));
        p.push(("train.ema_decay", t.ema_decay.to_string()));
        p.push((
            "train.cond_mode",
            match t.cond_mode {
                CondMode::Class => "class",
                CondMode::Caption => "caption",
            }
            .to_string(),
        ));
        p.push(("train.log_every", t.log_every.to_string()));
        p.push(("train.ckpt_every", t.ckpt_every.to_string()));
        p.push(("sample.steps", self.sample.steps.to_string()));
        p.push(("sample.guidance", self.sample.guidance.to_string()));
        p.push(("sample.self_cond", self.sample.self_cond.to_string()));
        p.push(("sample.seed", self.sample.seed.to_string()));
        let r = &self.superres;
        p.push(("superres.t_max_noise", r.t_max_noise.to_string()));
        p.push(("superres.d_model", r.d_model.to_string()));
        p.push(("superres.blocks", r.blocks.to_string()));
        optim_keys!(p, "superres", r.optim);
        p
    }

    pub fn valid_keys() -> Vec<&'static str> {
        Self::default()
            .to_pairs()
            .into_iter()
            .map(|(k, _)| k)
            .collect()
    }

    /// Sets one dotted key; unknown keys list every valid key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim().trim_matches('"');
        let (section, field) = key.split_once('.').unwrap_or(("", key));
        let known = match section {
            "data" => {
                let d = &mut self.data;
                match field {
                    "num_clips" => d.num_clips = parse(key, v)?,
                    "frames" => d.frames = parse(key, v)?,
                    "height" => d.height = parse(key, v)?,
                    "width" => d.width = parse(key, v)?,
                    "sprite" => d.sprite = parse(key, v)?,
                    "images_per_clip" => d.images_per_clip = parse(key, v)?,
                    "seed" => d.seed = parse(key, v)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            "codec" => {
                let c = &mut self.codec;
                match field {
                    "f_s" => c.f_s = parse(key, v)?,
                    "f_t" => c.f_t = parse(key, v)?,
                    "base_channels" => c.base_channels = parse(key, v)?,
                    "channel_multipliers" => c.channel_multipliers = parse_list(key, v)?,
                    "lat_c" => c.lat_c = parse(key, v)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            "codec_train" => set_optim(&mut self.codec_train, field, key, v)?,
            "backbone" => {
                let b = &mut self.backbone;
                match field {
                    "latent_channels" => b.latent_channels = parse(key, v)?,
                    "latent_frames" => b.latent_frames = parse(key, v)?,
                    "latent_height" => b.latent_height = parse(key, v)?,
                    "latent_width" => b.latent_width = parse(key, v)?,
                    "patch" => b.patch = parse(key, v)?,
                    "d_model" => b.d_model = parse(key, v)?,
                    "heads" => b.heads = parse(key, v)?,
                    "blocks" => b.num_blocks = parse(key, v)?,
                    "mlp_ratio" => b.mlp_ratio = parse(key, v)?,
                    "st_window" => {
                        let w = parse_list(key, v)?;
                        if w.len() != 2 {
                            bail!("{key}: expected two values, got {v:?}");
                        }
                        b.st_window = [w[0], w[1]];
                    }
                    "adaln" => {
                        let rank = match b.adaln {
                            AdaLnMode::Lora { rank } => rank,
                            AdaLnMode::Separate => 2,
                        };
                        b.adaln = match v {
                            "separate" => AdaLnMode::Separate,
                            "lora" => AdaLnMode::Lora { rank },
                            _ => bail!("{key}: expected separate or lora, got {v:?}"),
                        };
                    }
                    "lora_rank" => {
                        let r = parse(key, v)?;
                        if let AdaLnMode::Lora { rank } = &mut b.adaln {
                            *rank = r;
                        }
                    }
                    "qk_norm" => b.qk_norm = parse(key, v)?,
                    "vocab" => b.vocab = parse(key, v)?,
                    "cross_attn" => b.cross_attn = parse(key, v)?,
                    "joint" => b.joint = parse(key, v)?,
                    "self_cond" => b.self_cond = parse(key, v)?,
                    "frame_pred" => b.frame_pred = parse(key, v)?,
                    "sr_channels" => b.sr_channels = parse(key, v)?,
                    "sr_scale" => b.sr_scale = parse(key, v)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            "schedule" => {
                let s = &mut self.schedule;
                match field {
                    "kind" if v == "linear" => {}
                    "kind" => bail!("{key}: only the linear schedule is supported, got {v:?}"),
                    "steps" => s.steps = parse(key, v)?,
                    "beta_start" => s.beta_start = parse(key, v)?,
                    "beta_end" => s.beta_end = parse(key, v)?,
                    "zero_terminal_snr" => s.zero_terminal_snr = parse(key, v)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            "train" => {
                if set_optim(&mut self.train.optim, field, key, v)? {
                    true
                } else {
                    let t = &mut self.train;
                    match field {
                        "p_sc" => t.step.p_sc = parse(key, v)?,
                        "p_fp" => t.step.p_fp = parse(key, v)?,
                        "cond_drop_prob" => t.step.cond_drop_prob = parse(key, v)?,
                        "image_mix" => t.image_mix = parse(key, v)?,
                        "ema_decay" => t.ema_decay = parse(key, v)?,
                        "cond_mode" => {
                            t.cond_mode = match v {
                                "class" => CondMode::Class,
                                "caption" => CondMode::Caption,
                                _ => bail!("{key}: expected class or caption, got {v:?}"),
                            }
                        }
                        "log_every" => t.log_every = parse(key, v)?,
                        "ckpt_every" => t.ckpt_every = parse(key, v)?,
                        _ => return Err(unknown(key)),
                    }
                    true
                }
            }
            "sample" => {
                let s = &mut self.sample;
                match field {
                    "steps" => s.steps = parse(key, v)?,
                    "guidance" => s.guidance = parse(key, v)?,
                    "self_cond" => s.self_cond = parse(key, v)?,
                    "seed" => s.seed = parse(key, v)?,
                    _ => return Err(unknown(key)),
                }
                true
            }
            "superres" => {
                let r = &mut self.superres;
                match field {
                    "t_max_noise" => r.t_max_noise = parse(key, v)?,
                    "d_model" => r.d_model = parse(key, v)?,
                    "blocks" => r.blocks = parse(key, v)?,
                    _ => {
                        return set_optim(&mut r.optim, field, key, v)?
                            .then_some(())
                            .ok_or_else(|| unknown(key))
                    }
                }
                true
            }
            _ => false,
        };
        if !known {
            return Err(unknown(key));
        }
        Ok(())
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Reads a TOML file; nested tables and dotted keys both flatten to
    /// dotted paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse_str(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse()?;
        let mut flat = Vec::new();
        flatten("", &toml::Value::Table(table), &mut flat);
        Self::from_pairs(flat.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.backbone.validate()?;
        self.train.step.validate()?;
        self.schedule.build()?;
        if !(0.0..=1.0).contains(&self.train.image_mix) {
            bail!("train.image_mix = {} outside [0, 1]", self.train.image_mix);
        }
        let [f, h, w, c] =
            self.codec
                .latent_shape(self.data.frames, self.data.height, self.data.width)?;
        let b = &self.backbone;
        if [f, h, w, c]
            != [
                b.latent_frames,
                b.latent_height,
                b.latent_width,
                b.latent_channels,
            ]
        {
            bail!(
                "codec latents {f}x{h}x{w}x{c} do not match backbone latents {}x{}x{}x{}",
                b.latent_frames,
                b.latent_height,
                b.latent_width,
                b.latent_channels
            );
        }
        for (name, o) in [
            ("codec_train", &self.codec_train),
            ("train", &self.train.optim),
            ("superres", &self.superres.optim),
        ] {
            if o.batch == 0 || o.lr <= 0.0 || !(0.0..1.0).contains(&o.warmup_frac) {
                bail!("{name}: batch and lr must be positive, warmup_frac in [0, 1)");
            }
        }
        if self.train.cond_mode == CondMode::Caption && b.vocab < crate::data::CAPTION_VOCAB {
            bail!(
                "caption conditioning needs backbone.vocab >= {}",
                crate::data::CAPTION_VOCAB
            );
        }
        if self.train.cond_mode == CondMode::Class
            && b.vocab < crate::data::NUM_CLASSES
            && b.vocab > 0
        {
            bail!(
                "class conditioning needs backbone.vocab >= {}",
                crate::data::NUM_CLASSES
            );
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical key listing.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.to_pairs() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_pairs() {
            let quoted =
                v.contains(',') || v.parse::<f64>().is_err() && v != "true" && v != "false";
            if quoted {
                out.push_str(&format!("{k} = \"{v}\"\n"));
            } else {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    /// Backbone for the 2x super-resolution stage over the base latents.
    pub fn superres_backbone(&self) -> DenoiserConfig {
        let b = &self.backbone;
        let r = &self.superres;
        DenoiserConfig {
            latent_height: b.latent_height * 2,
            latent_width: b.latent_width * 2,
            d_model: r.d_model,
            num_blocks: r.blocks,
            vocab: 0,
            cross_attn: false,
            self_cond: false,
            frame_pred: false,
            sr_channels: b.latent_channels,
            sr_scale: 2,
            ..b.clone()
        }
    }
}

fn unknown(key: &str) -> anyhow::Error {
    anyhow!(
        "unknown config key {key:?}; valid keys:\n  {}",
        RunConfig::valid_keys().join("\n  ")
    )
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        toml::Value::Array(a) => {
            let s = a
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",");
            out.push((prefix.to_string(), s));
        }
        toml::Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let again = RunConfig::parse_str(&c.to_toml()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
    }

    #[test]
    fn nested_tables_and_overrides() {
        let c = RunConfig::parse_str(
            "[backbone]\nd_model = 32\nheads = 2\nadaln = \"separate\"\n[train]\nsteps = 7\n",
        )
        .unwrap();
        assert_eq!(c.backbone.d_model, 32);
        assert_eq!(c.backbone.adaln, AdaLnMode::Separate);
        assert_eq!(c.train.optim.steps, 7);
        let c = RunConfig::parse_str(
            "codec.channel_multipliers = [1, 2]\nbackbone.st_window = \"2,2\"",
        )
        .unwrap();
        assert_eq!(c.codec.channel_multipliers, [1, 2]);
    }

    #[test]
    fn unknown_keys_fail_fast_with_the_valid_list() {
        let e = RunConfig::parse_str("backbone.d_modle = 3")
            .unwrap_err()
            .to_string();
        assert!(
            e.contains("backbone.d_modle") && e.contains("backbone.d_model"),
            "{e}"
        );
        assert!(RunConfig::parse_str("nosection = 1").is_err());
        assert!(RunConfig::parse_str("train.p_sc = 2.0").is_err());
        assert!(RunConfig::parse_str("backbone.latent_height = 8").is_err());
    }
}
