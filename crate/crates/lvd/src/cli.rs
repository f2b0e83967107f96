//! Command-line entry points.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lvd_core::codec::{denormalize_latents, normalize_latents, Codec, LatentKind};
use lvd_core::gradcheck::check_params;
use lvd_core::tasks::{superres_sample, SuperResStage};
use lvd_core::transformer::{
    param_census, AdaLnMode, ConditioningBundle, Denoiser, DenoiserConfig,
};
use lvd_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::{Checkpoint, TrainState};
use crate::config::RunConfig;
use crate::data::{generate_toy_dataset, render_clip, SpriteClass, NUM_CLASSES};
use crate::export::{
    export_frames, hash_export, load_latents, read_clip, save_latents, SampleInfo, DEFAULT_FPS,
};
use crate::generate::{decode_normalized, unbatch, Generator, Mode};
use crate::train::{
    encode_dataset, init_denoiser, moving_average, superres_pair, train_codec, train_denoiser,
    train_superres,
};

static QUIET: AtomicBool = AtomicBool::new(false);

macro_rules! say {
    ($($arg:tt)*) => {
        if !QUIET.load(Ordering::Relaxed) {
            println!($($arg)*);
        }
    };
}

#[derive(Parser, Debug)]
#[command(
    name = "lvd",
    about = "Latent video diffusion on toy sprite clips",
    version
)]
pub struct Cli {
    /// Suppress progress output.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML file of dotted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seeds data, codec, denoiser and super-resolution training.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg)?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| anyhow!("override {o:?} is not key=value"))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(s) = self.seed {
            cfg.data.seed = s;
            cfg.codec_train.seed = s.wrapping_add(1);
            cfg.train.optim.seed = s.wrapping_add(2);
            cfg.superres.optim.seed = s.wrapping_add(3);
        }
        cfg.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    VitGLike,
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AdaLnArg {
    Separate,
    Lora,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the toy dataset to PNG frames.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train codec and denoiser; writes a checkpoint directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint already in `--out`.
        #[arg(long)]
        resume: bool,
        /// Stop after this step; the learning-rate schedule still spans
        /// `train.steps`.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Sample from a checkpoint and export frames.
    Sample(SampleArgs),
    /// Encode a directory of frame PNGs into latents.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Encode every frame as an independent image.
        #[arg(long)]
        images: bool,
    },
    /// Decode latents written by `encode` back to frame PNGs.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of a 2-block denoiser in f64.
    Gradcheck {
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter census of a backbone preset.
    Paramcount {
        #[arg(long, value_enum, default_value = "vit-g-like")]
        preset: Preset,
        #[arg(long, value_enum, default_value = "lora")]
        adaln: AdaLnArg,
        #[arg(long, default_value_t = 2)]
        r: usize,
    },
    /// Fit the 2x super-resolution stage to one clip and upsample it.
    Superres {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        clip: Option<usize>,
        #[arg(long)]
        t_max_noise: Option<usize>,
        /// Refit even when the checkpoint already holds a stage.
        #[arg(long)]
        retrain: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "t2v")]
    pub mode: Mode,
    /// Class id `color·4 + motion`.
    #[arg(long, default_value_t = 0)]
    pub class: usize,
    #[arg(long, default_value_t = 2)]
    pub chunks: usize,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Sprite corner `y,x` of the rendered context clip for i2v and predict.
    #[arg(long, default_value = "4,4")]
    pub start: String,
}

pub fn run<I, T>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    QUIET.store(cli.quiet, Ordering::Relaxed);
    match cli.command {
        Command::GenData { cfg, out } => gen_data(&cfg.resolve()?, &out),
        Command::Train {
            cfg,
            out,
            resume,
            until,
        } => train(&cfg, &out, resume, until).map(|_| ()),
        Command::Sample(a) => sample(&a).map(|h| println!("hash {h}")),
        Command::Encode {
            checkpoint,
            input,
            out,
            images,
        } => encode(&checkpoint, &input, &out, images),
        Command::Decode {
            checkpoint,
            input,
            out,
        } => decode(&checkpoint, &input, &out),
        Command::Gradcheck { samples, tol, seed } => gradcheck(samples, tol, seed),
        Command::Paramcount { preset, adaln, r } => {
            let (adaln_share, total) = paramcount(preset, adaln, r);
            println!("adaln {adaln_share} ({:.1}M)", adaln_share as f64 / 1e6);
            println!("total {total} ({:.1}M)", total as f64 / 1e6);
            Ok(())
        }
        Command::Superres {
            checkpoint,
            out,
            clip,
            t_max_noise,
            retrain,
            seed,
            overrides,
        } => superres(
            &checkpoint,
            &out,
            clip,
            t_max_noise,
            retrain,
            seed,
            &overrides,
        )
        .map(|_| ()),
    }
}

pub fn paramcount(preset: Preset, adaln: AdaLnArg, r: usize) -> (usize, usize) {
    let mode = match adaln {
        AdaLnArg::Separate => AdaLnMode::Separate,
        AdaLnArg::Lora => AdaLnMode::Lora { rank: r },
    };
    let cfg = match preset {
        Preset::VitGLike => DenoiserConfig::vit_g_like(mode),
        Preset::Desk => DenoiserConfig {
            adaln: mode,
            ..DenoiserConfig::desk()
        },
    };
    let c = param_census(&cfg);
    (c.adaln, c.total)
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = generate_toy_dataset(&cfg.data)?;
    let mut index = String::new();
    let info = |prompt: String| SampleInfo {
        mode: "data".into(),
        seed: cfg.data.seed,
        guidance: 0.0,
        prompt,
        config_hash: cfg.hash(),
        fps: DEFAULT_FPS,
    };
    for (i, r) in data.videos.iter().enumerate() {
        export_frames(
            &r.pixels,
            &out.join(format!("clip_{i:04}")),
            &info(r.class.name()),
        )?;
        index.push_str(&format!(
            "clip_{i:04} class={} start={},{}\n",
            r.class.0, r.start[0], r.start[1]
        ));
    }
    for (i, r) in data.images.iter().enumerate() {
        export_frames(
            &r.pixels,
            &out.join(format!("image_{i:04}")),
            &info(r.class.name()),
        )?;
        index.push_str(&format!("image_{i:04} class={}\n", r.class.0));
    }
    let path = out.join("index.txt");
    fs::write(&path, index).with_context(|| format!("writing {}", path.display()))?;
    say!(
        "{} clips and {} images in {}",
        data.videos.len(),
        data.images.len(),
        out.display()
    );
    Ok(())
}

/// Outcome of `train`, also used by the acceptance run.
pub struct TrainSummary {
    pub codec_losses: Vec<f64>,
    pub losses: Vec<f64>,
    pub video_batches: usize,
    pub image_batches: usize,
}

pub fn train(
    args: &ConfigArgs,
    out: &Path,
    resume: bool,
    until: Option<usize>,
) -> Result<TrainSummary> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let probe = out.join(".write-probe");
    fs::write(&probe, b"").with_context(|| format!("{} is not writable", out.display()))?;
    fs::remove_file(&probe).ok();
    let mut codec_losses = Vec::new();
    let (cfg, codec, stats, mut model, mut state) = if resume {
        let mut ck = Checkpoint::load(out)?;
        args.apply(&mut ck.config)?;
        let stats = ck
            .stats
            .ok_or_else(|| anyhow!("checkpoint in {} has no latent statistics", out.display()))?;
        let (model, state) = match (ck.denoiser, ck.state) {
            (Some(m), Some(s)) => (m, s),
            _ => init_denoiser(
                &ck.config.backbone,
                &ck.config.train.optim,
                ck.config.train.ema_decay > 0.0,
            )?,
        };
        say!("resuming at step {}", state.step);
        (ck.config, ck.codec, stats, model, state)
    } else {
        let cfg = args.resolve()?;
        let data = generate_toy_dataset(&cfg.data)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.codec_train.seed);
        let mut codec = Codec::new(cfg.codec.clone(), &mut rng)?;
        codec_losses = train_codec(&mut codec, &data, &cfg.codec_train, &mut |s| say!("{s}"))?;
        let (stats, _) = encode_dataset(&codec, &data, None)?;
        let (model, state) =
            init_denoiser(&cfg.backbone, &cfg.train.optim, cfg.train.ema_decay > 0.0)?;
        (cfg, codec, stats, model, state)
    };
    let data = generate_toy_dataset(&cfg.data)?;
    let (_, set) = encode_dataset(&codec, &data, Some(&stats))?;
    let sched = cfg.schedule.build()?;
    let save = |model: &Denoiser<f32>, state: &TrainState| {
        Checkpoint {
            config: cfg.clone(),
            codec: codec.clone(),
            stats: Some(stats.clone()),
            denoiser: Some(model.clone()),
            state: Some(state.clone()),
            superres: None,
        }
        .save(out)
    };
    let mut losses = Vec::new();
    let log_every = cfg.train.log_every.max(1);
    let result = train_denoiser(
        &cfg,
        &set,
        &sched,
        &mut model,
        &mut state,
        until.unwrap_or(cfg.train.optim.steps),
        &mut |m, s, loss| {
            losses.push(loss);
            if s.step % log_every == 0 {
                let tail = &losses[losses.len().saturating_sub(log_every)..];
                say!(
                    "step {} loss {:.5}",
                    s.step,
                    tail.iter().sum::<f64>() / tail.len() as f64
                );
            }
            if cfg.train.ckpt_every > 0 && s.step % cfg.train.ckpt_every == 0 {
                save(m, s)?;
            }
            Ok(())
        },
    );
    let log = match result {
        Ok(log) => log,
        Err(e) => {
            let dump = out.join("nan_dump.txt");
            fs::write(&dump, format!("{e:#}\nconfig_hash = {}\n", cfg.hash())).ok();
            return Err(e.context(format!("diagnostics written to {}", dump.display())));
        }
    };
    save(&model, &state)?;
    let curve: String = losses.iter().map(|l| format!("{l}\n")).collect();
    fs::write(out.join("loss.txt"), curve)
        .with_context(|| format!("writing loss log in {}", out.display()))?;
    if let Some(ma) = moving_average(&losses, 100).last() {
        say!("final 100-step loss {ma:.5}");
    }
    say!(
        "{} video batches, {} image batches; checkpoint in {}",
        log.counters.video_batches,
        log.counters.image_batches,
        out.display()
    );
    Ok(TrainSummary {
        codec_losses,
        losses: log.losses,
        video_batches: log.counters.video_batches,
        image_batches: log.counters.image_batches,
    })
}

fn parse_start(s: &str) -> Result<[usize; 2]> {
    let (y, x) = s
        .split_once(',')
        .ok_or_else(|| anyhow!("--start expects y,x"))?;
    Ok([y.trim().parse()?, x.trim().parse()?])
}

/// Samples per `--mode`, exports frames into `--out`, returns the export
/// hash.
pub fn sample(a: &SampleArgs) -> Result<String> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let g = Generator::from_checkpoint(&ck)?;
    if a.class >= NUM_CLASSES {
        bail!("class {} outside 0..{NUM_CLASSES}", a.class);
    }
    let class = SpriteClass(a.class);
    let mut sc = ck.config.sample;
    if let Some(s) = a.seed {
        sc.seed = s;
    }
    if let Some(w) = a.guidance {
        sc.guidance = w;
    }
    if let Some(n) = a.steps {
        sc.steps = n;
    }
    let video = match a.mode {
        Mode::T2v => g.sample_videos(&[class], &sc)?.remove(0),
        Mode::I2v | Mode::Predict => {
            let n = if a.mode == Mode::I2v { 1 } else { 2 };
            let ctx = render_clip(&ck.config.data, class, parse_start(&a.start)?)?;
            let ctx = ctx.frame_range(0, g.context_pixels(n))?;
            g.continue_clip(class, &ctx, n, &sc)?.1
        }
        Mode::Long => g.long(class, a.chunks, &sc)?.pixels,
        Mode::Image => g.images(class, &sc)?.frame(0)?,
        Mode::Superres => {
            let model = ck.superres.clone().ok_or_else(|| {
                anyhow!("checkpoint has no super-resolution stage; run `lvd superres` first")
            })?;
            let stage = SuperResStage::new(model, ck.config.superres.t_max_noise, &g.sched)?;
            g.superres(&stage, class, &sc)?.1
        }
    };
    let info = SampleInfo {
        mode: a.mode.as_str().into(),
        seed: sc.seed,
        guidance: sc.guidance,
        prompt: class.name(),
        config_hash: ck.config.hash(),
        fps: DEFAULT_FPS,
    };
    export_frames(&video, &a.out, &info)?;
    hash_export(&a.out)
}

fn encode(checkpoint: &Path, input: &Path, out: &Path, images: bool) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let clip = read_clip(input)?;
    let z = if images {
        ck.codec.encode_images(&clip)?
    } else {
        ck.codec.encode(&clip)?
    };
    let z = match &ck.stats {
        Some(s) => normalize_latents(&z, s)?,
        None => z,
    };
    save_latents(out, &z)?;
    say!(
        "latents {:?} ({}) in {}",
        z.tensor.shape(),
        z.kind.as_str(),
        out.display()
    );
    Ok(())
}

fn decode(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let z = load_latents(input)?;
    let z = if z.normalized {
        denormalize_latents(
            &z,
            ck.stats
                .as_ref()
                .ok_or_else(|| anyhow!("normalized latents need a checkpoint with statistics"))?,
        )?
    } else {
        z
    };
    let video = ck.codec.decode(&z)?;
    let info = SampleInfo {
        mode: "decode".into(),
        seed: 0,
        guidance: 0.0,
        prompt: String::new(),
        config_hash: ck.config.hash(),
        fps: DEFAULT_FPS,
    };
    let n = export_frames(&video, out, &info)?.len();
    say!("{n} frames in {}", out.display());
    Ok(())
}

/// Builds the 2-block f64 model and loss used by `gradcheck`.
pub fn gradcheck_report(
    samples: usize,
    tol: f64,
    seed: u64,
) -> Result<lvd_core::gradcheck::GradCheckReport> {
    let cfg = DenoiserConfig {
        latent_channels: 2,
        latent_frames: 3,
        latent_height: 4,
        latent_width: 4,
        patch: 2,
        d_model: 8,
        heads: 2,
        num_blocks: 2,
        mlp_ratio: 2,
        st_window: [1, 1],
        adaln: AdaLnMode::Lora { rank: 2 },
        qk_norm: true,
        vocab: 5,
        cross_attn: true,
        joint: false,
        self_cond: true,
        frame_pred: true,
        sr_channels: 0,
        sr_scale: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Denoiser::<f64>::new(cfg.clone(), &mut rng)?;
    let ids: Vec<_> = m.params.ids().collect();
    for id in ids {
        for x in m.params.get_mut(id).data_mut() {
            *x = 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let s = [2, cfg.latent_frames, cfg.latent_height, cfg.latent_width];
    let mut randn = |c: usize| -> Result<Tensor<f64>> {
        let n = s.iter().product::<usize>() * c;
        Ok(Tensor::from_vec(
            &[s[0], s[1], s[2], s[3], c],
            (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        )?)
    };
    let z = randn(2)?;
    let target = randn(2)?;
    let mut bundle =
        ConditioningBundle::new(vec![100.0, 400.0]).with_tokens(vec![vec![0, 2], vec![1, 2]]);
    bundle.self_cond = Some(randn(2)?);
    bundle.fp = Some(randn(3)?);
    let mut prng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    Ok(check_params(
        &m.params,
        |tape| {
            let zv = tape.constant(z.clone());
            let tv = tape.constant(target.clone());
            let out = m.forward(tape, zv, LatentKind::Video, &bundle)?;
            Ok(tape.mse(out, tv))
        },
        samples,
        1e-3,
        tol,
        &mut prng,
    )?)
}

fn gradcheck(samples: usize, tol: f64, seed: u64) -> Result<()> {
    let r = gradcheck_report(samples, tol, seed)?;
    println!(
        "checked {} coordinates: {} below {tol:e} ({:.1}%), max relative error {:.3e}",
        r.checked,
        r.passed,
        100.0 * r.pass_fraction(),
        r.max_rel_err
    );
    if r.pass_fraction() < 0.95 {
        bail!("gradient check failed");
    }
    Ok(())
}

/// Result of fitting and applying the super-resolution stage to one clip.
pub struct SuperResSummary {
    pub losses: Vec<f64>,
    /// Mean squared error of the sampled high-resolution latent against the
    /// clip's own, in normalized units.
    pub latent_mse: f64,
    pub high_shape: Vec<usize>,
}

pub fn superres(
    checkpoint: &Path,
    out: &Path,
    clip: Option<usize>,
    t_max_noise: Option<usize>,
    retrain: bool,
    seed: Option<u64>,
    overrides: &[String],
) -> Result<SuperResSummary> {
    let mut ck = Checkpoint::load(checkpoint)?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| anyhow!("override {o:?} is not key=value"))?;
        ck.config.set(k.trim(), v)?;
    }
    if let Some(t) = t_max_noise {
        ck.config.superres.t_max_noise = t;
    }
    if let Some(s) = seed {
        ck.config.superres.optim.seed = s;
    }
    ck.config.validate()?;
    let cfg = ck.config.clone();
    let stats = ck
        .stats
        .clone()
        .ok_or_else(|| anyhow!("checkpoint has no latent statistics"))?;
    let sched = cfg.schedule.build()?;
    let data = generate_toy_dataset(&cfg.data)?;
    let pair = superres_pair(&ck.codec, &stats, &data, clip.unwrap_or(0))?;
    let mut losses = Vec::new();
    let model = match (&ck.superres, retrain) {
        (Some(m), false) => m.clone(),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.superres.optim.seed);
            let mut m = Denoiser::new(cfg.superres_backbone(), &mut rng)?;
            losses = train_superres(&cfg, &pair, &sched, &mut m, &mut |s| say!("{s}"))?;
            m
        }
    };
    let stage = SuperResStage::new(model.clone(), cfg.superres.t_max_noise, &sched)?;
    let low = Tensor::stack(std::slice::from_ref(&pair.low))?;
    let high = superres_sample(
        &stage,
        &low,
        &ConditioningBundle::new(vec![0.0]),
        &sched,
        &cfg.sample,
    )?;
    let high = unbatch(&high)?.remove(0);
    let latent_mse = high.zip_map(&pair.high, |a, b| (a - b) * (a - b))?.mean();
    let video = decode_normalized(&ck.codec, &stats, &high, LatentKind::Video)?;
    let info = SampleInfo {
        mode: "superres".into(),
        seed: cfg.sample.seed,
        guidance: cfg.sample.guidance,
        prompt: pair.class.name(),
        config_hash: cfg.hash(),
        fps: DEFAULT_FPS,
    };
    export_frames(&video, out, &info)?;
    say!(
        "high-resolution latent {:?}, mse vs clip latent {latent_mse:.3e}",
        high.shape()
    );
    ck.superres = Some(model);
    ck.save(checkpoint)?;
    Ok(SuperResSummary {
        losses,
        latent_mse,
        high_shape: high.shape().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paramcount_presets() {
        let (sep, _) = paramcount(Preset::VitGLike, AdaLnArg::Separate, 2);
        let (lora, _) = paramcount(Preset::VitGLike, AdaLnArg::Lora, 2);
        assert!((470_000_000..480_000_000).contains(&sep));
        assert!((11_000_000..14_000_000).contains(&lora));
    }

    #[test]
    fn bad_flags_and_keys_are_rejected() {
        assert!(run(["lvd", "paramcount", "--nope"]).is_err());
        assert!(run(["lvd", "frobnicate"]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let e = run(["lvd", "gen-data", "--out", out, "--set", "data.frame=3"]).unwrap_err();
        assert!(format!("{e:#}").contains("data.frames"));
        assert!(run([
            "lvd",
            "gen-data",
            "--out",
            out,
            "--set",
            "data.sprite=40",
            "--set",
            "data.num_clips=1"
        ])
        .is_err());
    }

    #[test]
    fn gen_data_writes_clips_and_images() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        run([
            "lvd",
            "gen-data",
            "--out",
            out,
            "--set",
            "data.num_clips=2",
            "--seed",
            "4",
        ])
        .unwrap();
        assert_eq!(
            fs::read_dir(dir.path().join("clip_0001")).unwrap().count(),
            10
        );
        assert_eq!(
            fs::read_dir(dir.path().join("image_0000")).unwrap().count(),
            2
        );
        let index = fs::read_to_string(dir.path().join("index.txt")).unwrap();
        assert_eq!(index.lines().count(), 4);
    }
}
