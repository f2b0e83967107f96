use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use super::LatentTensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Floor applied to fitted standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

/// Dataset-level per-channel latent statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

pub fn fit_latent_stats<T: Real>(samples: &[LatentTensor<T>]) -> Result<LatentStats> {
    if samples.len() < 2 {
        return Err(Error::Empty("latent statistics need at least two samples"));
    }
    let c = samples[0].channels();
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    let mut n = 0usize;
    for z in samples {
        if z.channels() != c {
            return Err(Error::Channels {
                expected: c,
                got: z.channels(),
            });
        }
        if z.normalized {
            return Err(Error::NormalizationState("already normalized"));
        }
        for px in z.tensor.data().chunks(c) {
            for (j, &v) in px.iter().enumerate() {
                let v = v.as_f64();
                sum[j] += v;
                sq[j] += v * v;
            }
            n += 1;
        }
    }
    let n = n as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| Float::sqrt((s / n - m * m).max(0.0)).max(STD_FLOOR))
        .collect();
    Ok(LatentStats { mean, std })
}

fn check<T: Real>(z: &LatentTensor<T>, stats: &LatentStats) -> Result<()> {
    if z.channels() != stats.channels() {
        return Err(Error::Channels {
            expected: stats.channels(),
            got: z.channels(),
        });
    }
    Ok(())
}

pub fn normalize_latents<T: Real>(
    z: &LatentTensor<T>,
    stats: &LatentStats,
) -> Result<LatentTensor<T>> {
    check(z, stats)?;
    if z.normalized {
        return Err(Error::NormalizationState("already normalized"));
    }
    let c = stats.channels();
    let mut out = z.clone();
    for px in out.tensor.data_mut().chunks_mut(c) {
        for (j, v) in px.iter_mut().enumerate() {
            *v = T::of((v.as_f64() - stats.mean[j]) / stats.std[j]);
        }
    }
    out.normalized = true;
    Ok(out)
}

pub fn denormalize_latents<T: Real>(
    z: &LatentTensor<T>,
    stats: &LatentStats,
) -> Result<LatentTensor<T>> {
    check(z, stats)?;
    if !z.normalized {
        return Err(Error::NormalizationState("not normalized"));
    }
    let c = stats.channels();
    let mut out = z.clone();
    for px in out.tensor.data_mut().chunks_mut(c) {
        for (j, v) in px.iter_mut().enumerate() {
            *v = T::of(v.as_f64() * stats.std[j] + stats.mean[j]);
        }
    }
    out.normalized = false;
    Ok(out)
}
