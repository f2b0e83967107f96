//! Checkpoint directories: `manifest.txt` plus one little-endian f32 blob.
//!
//! Manifest lines are `key = value`. Keys containing `/` name tensors and
//! carry `f32 <dims> <byte offset>`; `config.*` keys hold the run config.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use lvd_core::codec::{Codec, LatentStats};
use lvd_core::transformer::Denoiser;
use lvd_core::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::optim::AdamW;

pub const MANIFEST: &str = "manifest.txt";
pub const WEIGHTS: &str = "weights.bin";
const FORMAT: &str = "lvd-checkpoint-1";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub opt: AdamW,
    pub ema: Option<ParamStore<f32>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub codec: Codec<f32>,
    pub stats: Option<LatentStats>,
    pub denoiser: Option<Denoiser<f32>>,
    pub state: Option<TrainState>,
    pub superres: Option<Denoiser<f32>>,
}

struct Writer {
    manifest: String,
    blob: Vec<u8>,
}

impl Writer {
    fn tensor(&mut self, key: &str, t: &Tensor<f32>) {
        let dims = t
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",");
        self.manifest
            .push_str(&format!("{key} = f32 [{dims}] {}\n", self.blob.len()));
        for x in t.data() {
            self.blob.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn store(&mut self, prefix: &str, s: &ParamStore<f32>) {
        for (name, t) in s.iter() {
            self.tensor(&format!("{prefix}/{name}"), t);
        }
    }

    fn moments(&mut self, prefix: &str, names: &ParamStore<f32>, ts: &[Tensor<f32>]) {
        for ((name, _), t) in names.iter().zip(ts) {
            self.tensor(&format!("{prefix}/{name}"), t);
        }
    }
}

fn join_f64(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn split_f64(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|e| anyhow!("bad number {x:?}: {e}"))
        })
        .collect()
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating checkpoint directory {}", dir.display()))?;
        let mut w = Writer {
            manifest: format!("format = {FORMAT}\n"),
            blob: Vec::new(),
        };
        for (k, v) in self.config.to_pairs() {
            w.manifest.push_str(&format!("config.{k} = {v}\n"));
        }
        if let Some(s) = &self.stats {
            w.manifest.push_str(&format!(
                "stats.mean = {}\nstats.std = {}\n",
                join_f64(&s.mean),
                join_f64(&s.std)
            ));
        }
        w.store("codec", &self.codec.params);
        if let Some(d) = &self.denoiser {
            w.store("denoiser", &d.params);
            if let Some(st) = &self.state {
                w.manifest.push_str(&format!(
                    "state.step = {}\nstate.adam_step = {}\n",
                    st.step, st.opt.step
                ));
                w.moments("adam_m", &d.params, &st.opt.m);
                w.moments("adam_v", &d.params, &st.opt.v);
                if let Some(e) = &st.ema {
                    w.store("ema", e);
                }
            }
        }
        if let Some(s) = &self.superres {
            w.store("superres", &s.params);
        }
        let wpath = dir.join(WEIGHTS);
        fs::write(&wpath, &w.blob).with_context(|| format!("writing {}", wpath.display()))?;
        let mpath = dir.join(MANIFEST);
        fs::write(&mpath, &w.manifest).with_context(|| format!("writing {}", mpath.display()))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text =
            fs::read_to_string(&mpath).with_context(|| format!("reading {}", mpath.display()))?;
        let wpath = dir.join(WEIGHTS);
        let blob = fs::read(&wpath).with_context(|| format!("reading {}", wpath.display()))?;
        Self::parse(&text, &blob).with_context(|| format!("loading checkpoint {}", dir.display()))
    }

    fn parse(text: &str, blob: &[u8]) -> Result<Self> {
        let mut scalars = BTreeMap::new();
        let mut config = Vec::new();
        let mut groups: BTreeMap<&str, Vec<(&str, Tensor<f32>)>> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| anyhow!("manifest line {}: {line:?}", n + 1))?;
            if let Some((prefix, name)) = k.split_once('/') {
                groups.entry(prefix).or_default().push((
                    name,
                    read_tensor(v, blob).with_context(|| format!("tensor {k}"))?,
                ));
            } else if let Some(c) = k.strip_prefix("config.") {
                config.push((c, v));
            } else {
                scalars.insert(k, v);
            }
        }
        if scalars.get("format") != Some(&FORMAT) {
            bail!("not an {FORMAT} manifest");
        }
        let config = RunConfig::from_pairs(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut codec = Codec::new(config.codec.clone(), &mut rng)?;
        codec
            .params
            .load_named(groups.remove("codec").unwrap_or_default())?;
        let stats = match (scalars.get("stats.mean"), scalars.get("stats.std")) {
            (Some(m), Some(s)) => Some(LatentStats {
                mean: split_f64(m)?,
                std: split_f64(s)?,
            }),
            _ => None,
        };
        let denoiser = match groups.remove("denoiser") {
            Some(entries) => {
                let mut d = Denoiser::new(config.backbone.clone(), &mut rng)?;
                d.params.load_named(entries)?;
                Some(d)
            }
            None => None,
        };
        let state = match (&denoiser, scalars.get("state.step")) {
            (Some(d), Some(step)) => {
                let moments = |g: Option<Vec<(&str, Tensor<f32>)>>| -> Result<Vec<Tensor<f32>>> {
                    let mut s = d.params.clone();
                    s.load_named(g.ok_or_else(|| anyhow!("optimizer moments missing"))?)?;
                    Ok(s.iter().map(|(_, t)| t.clone()).collect())
                };
                let mut opt = AdamW::new(&d.params, &config.train.optim);
                opt.m = moments(groups.remove("adam_m"))?;
                opt.v = moments(groups.remove("adam_v"))?;
                opt.step = scalars
                    .get("state.adam_step")
                    .ok_or_else(|| anyhow!("state.adam_step missing"))?
                    .parse()?;
                let ema = match groups.remove("ema") {
                    Some(e) => {
                        let mut s = d.params.clone();
                        s.load_named(e)?;
                        Some(s)
                    }
                    None => None,
                };
                Some(TrainState {
                    step: step.parse()?,
                    opt,
                    ema,
                })
            }
            _ => None,
        };
        let superres = match groups.remove("superres") {
            Some(entries) => {
                let mut d = Denoiser::new(config.superres_backbone(), &mut rng)?;
                d.params.load_named(entries)?;
                Some(d)
            }
            None => None,
        };
        if let Some(k) = groups.keys().next() {
            bail!("unexpected tensor group {k:?}");
        }
        Ok(Self {
            config,
            codec,
            stats,
            denoiser,
            state,
            superres,
        })
    }
}

fn read_tensor(spec: &str, blob: &[u8]) -> Result<Tensor<f32>> {
    let mut parts = spec.split_whitespace();
    let (Some("f32"), Some(dims), Some(off), None) =
        (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        bail!("expected `f32 [dims] offset`, got {spec:?}");
    };
    let dims = dims.trim_start_matches('[').trim_end_matches(']');
    let shape: Vec<usize> = if dims.is_empty() {
        Vec::new()
    } else {
        dims.split(',').map(str::parse).collect::<Result<_, _>>()?
    };
    let off: usize = off.parse()?;
    let n: usize = shape.iter().product();
    let bytes = blob.get(off..off + 4 * n).ok_or_else(|| {
        anyhow!(
            "range {off}..{} outside a {}-byte blob",
            off + 4 * n,
            blob.len()
        )
    })?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Tensor::from_vec(&shape, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lvd_core::codec::LatentKind;
    use lvd_core::transformer::ConditioningBundle;
    use rand::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut config = RunConfig::default();
        config.backbone.d_model = 32;
        config.backbone.num_blocks = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let codec = Codec::new(config.codec.clone(), &mut rng).unwrap();
        let mut den = Denoiser::new(config.backbone.clone(), &mut rng).unwrap();
        let ids: Vec<_> = den.params.ids().collect();
        for id in ids {
            for x in den.params.get_mut(id).data_mut() {
                *x = rng.random_range(-0.3..0.3);
            }
        }
        let mut opt = AdamW::new(&den.params, &config.train.optim);
        opt.step = 3;
        opt.m[0].data_mut()[0] = 0.25;
        let ck = Checkpoint {
            config: config.clone(),
            codec,
            stats: Some(LatentStats {
                mean: vec![0.1; 8],
                std: vec![1.0 / 3.0; 8],
            }),
            denoiser: Some(den),
            state: Some(TrainState {
                step: 17,
                opt,
                ema: None,
            }),
            superres: None,
        };
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.config, config);
        assert_eq!(back.stats, ck.stats);
        assert_eq!(back.state, ck.state);
        assert_eq!(
            back.codec.params.cast::<f32>().iter().count(),
            ck.codec.params.len()
        );

        let z = Tensor::from_vec(
            &[1, 5, 4, 4, 8],
            (0..640).map(|i| (i as f32 * 0.37).sin()).collect(),
        )
        .unwrap();
        let bundle = ConditioningBundle::new(vec![500.0]).with_tokens(vec![vec![3]]);
        let a = ck
            .denoiser
            .as_ref()
            .unwrap()
            .predict(&z, LatentKind::Video, &bundle)
            .unwrap();
        let b = back
            .denoiser
            .as_ref()
            .unwrap()
            .predict(&z, LatentKind::Video, &bundle)
            .unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn corrupt_manifests_fail_with_context() {
        let dir = tempfile::tempdir().unwrap();
        assert!(Checkpoint::load(dir.path()).is_err());
        fs::write(
            dir.path().join(MANIFEST),
            "format = lvd-checkpoint-1\ncodec/x = f32 [4] 0\n",
        )
        .unwrap();
        fs::write(dir.path().join(WEIGHTS), [0u8; 8]).unwrap();
        let e = format!("{:#}", Checkpoint::load(dir.path()).unwrap_err());
        assert!(e.contains("outside"), "{e}");
        assert!(read_tensor("f32 [2,2] 0", &[0u8; 16]).is_ok());
        assert!(read_tensor("f16 [2,2] 0", &[0u8; 16]).is_err());
    }
}
