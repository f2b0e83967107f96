use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::noise_at;
use crate::codec::LatentKind;
use crate::diffusion::{sample, NoiseSchedule, SampleConfig};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::transformer::{ConditioningBundle, Denoiser};

/// Share of `t_max_noise` used as the augmentation level when sampling.
pub const INFERENCE_NOISE_FRACTION: f64 = 0.1;

/// A denoiser conditioned on a noise-augmented low-resolution latent that
/// it upsamples internally.
#[derive(Clone, Debug)]
pub struct SuperResStage<T: Real> {
    pub model: Denoiser<T>,
    pub t_max_noise: usize,
}

impl<T: Real> SuperResStage<T> {
    pub fn new(model: Denoiser<T>, t_max_noise: usize, sched: &NoiseSchedule) -> Result<Self> {
        if model.config.sr_channels == 0 {
            return Err(Error::Config(
                "super-resolution stage needs low-resolution channels".into(),
            ));
        }
        if t_max_noise > sched.num_steps {
            return Err(Error::Timestep {
                t: t_max_noise,
                steps: sched.num_steps,
            });
        }
        Ok(Self { model, t_max_noise })
    }

    pub fn scale(&self) -> usize {
        self.model.config.sr_scale
    }

    pub fn inference_t_sr(&self) -> usize {
        Float::round(self.t_max_noise as f64 * INFERENCE_NOISE_FRACTION) as usize
    }
}

/// Per-sample augmentation of a `[B, ...]` low-resolution batch; returns the
/// corrupted batch and each sample's level.
pub fn augment_batch<T: Real, R: Rng + ?Sized>(
    z_lr: &Tensor<T>,
    t_max_noise: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<f64>)> {
    let b = z_lr.shape().first().copied().unwrap_or(0);
    let mut parts = Vec::with_capacity(b);
    let mut levels = Vec::with_capacity(b);
    for i in 0..b {
        let (z, t) = super::noise_augment(&z_lr.slice_outer(i, i + 1)?, t_max_noise, sched, rng)?;
        parts.push(z);
        levels.push(t as f64);
    }
    let stacked = Tensor::concat_outer(&parts)?;
    Ok((stacked.reshape(z_lr.shape())?, levels))
}

/// Samples a high-resolution latent batch for low-resolution latents
/// `[B, F, h, w, c_lr]`, augmenting them at the fixed inference level.
pub fn superres_sample<T: Real>(
    stage: &SuperResStage<T>,
    z_lr: &Tensor<T>,
    bundle: &ConditioningBundle<T>,
    sched: &NoiseSchedule,
    cfg: &SampleConfig,
) -> Result<Tensor<T>> {
    let c = &stage.model.config;
    let s = z_lr.shape();
    let k = stage.scale();
    if s.len() != 5
        || s[1] != c.latent_frames
        || s[2] * k != c.latent_height
        || s[3] * k != c.latent_width
        || s[4] != c.sr_channels
    {
        return Err(Error::Shape(alloc::format!(
            "low-resolution latents {s:?} do not upsample to {}x{}x{} with {} channels",
            c.latent_frames,
            c.latent_height,
            c.latent_width,
            c.sr_channels
        )));
    }
    let t_sr = stage.inference_t_sr();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5e75);
    let mut b = bundle.clone();
    b.low_res = Some(noise_at(z_lr, t_sr, sched, &mut rng)?);
    b.t_sr = Some(alloc::vec![t_sr as f64; s[0]]);
    let shape = [
        s[0],
        c.latent_frames,
        c.latent_height,
        c.latent_width,
        c.latent_channels,
    ];
    sample(&stage.model, &shape, LatentKind::Video, &b, sched, cfg)
}
