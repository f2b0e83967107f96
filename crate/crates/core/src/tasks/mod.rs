//! Task-level conditioning: frame prediction, long-video continuation,
//! cascaded super-resolution and position-table resizing.

mod long;
mod superres;

pub use long::{autoregressive_generate, LongVideo, LongVideoConfig};
pub use superres::{augment_batch, superres_sample, SuperResStage, INFERENCE_NOISE_FRACTION};

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::LinearMap;
use crate::diffusion::{q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::layout;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// `[F, H, W, c + 1]`: the first `n` frames of `past` in the data channels
/// and a mask channel of 1 on those frames; everything else 0.
pub fn build_fp_conditioning<T: Real>(
    frames: usize,
    past: &Tensor<T>,
    n: usize,
) -> Result<Tensor<T>> {
    let s = past.shape();
    if s.len() != 4 {
        return Err(Error::Shape(alloc::format!(
            "past latents must be [frames, h, w, c], got {s:?}"
        )));
    }
    if n > frames || n > s[0] {
        return Err(Error::Config(alloc::format!(
            "{n} conditioning frames for {frames} latent frames ({} available)",
            s[0]
        )));
    }
    let (h, w, c) = (s[1], s[2], s[3]);
    let mut out = alloc::vec![T::zero(); frames * h * w * (c + 1)];
    let src = past.data();
    for f in 0..n {
        for p in 0..h * w {
            let i = f * h * w + p;
            out[i * (c + 1)..i * (c + 1) + c].copy_from_slice(&src[i * c..(i + 1) * c]);
            out[i * (c + 1) + c] = T::one();
        }
    }
    Tensor::from_vec(&[frames, h, w, c + 1], out)
}

/// Per-sample frame-prediction conditioning from each sample's own leading
/// frames: `[B, F, H, W, c]` → `[B, F, H, W, c + 1]`.
pub fn build_fp_conditioning_batch<T: Real>(latents: &Tensor<T>, n: &[usize]) -> Result<Tensor<T>> {
    let s = latents.shape();
    if s.len() != 5 || s[0] != n.len() {
        return Err(Error::Shape(alloc::format!(
            "{} frame counts for batch {s:?}",
            n.len()
        )));
    }
    let parts = n
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let z = latents.slice_outer(i, i + 1)?.reshape(&s[1..])?;
            build_fp_conditioning(s[1], &z, k)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&parts)
}

fn check_scale(c: usize, scale: usize) -> Result<()> {
    if scale == 0 || !c.is_multiple_of(scale * scale) {
        return Err(Error::Divisibility {
            axis: "channels",
            size: c,
            factor: scale * scale,
        });
    }
    Ok(())
}

/// Pixel shuffle `[F, h, w, C·s²]` → `[F, h·s, w·s, C]`, channel order
/// `(dy, dx, c)`.
pub fn depth_to_space<T: Real>(z: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let s = z.shape();
    if s.len() != 4 {
        return Err(Error::Shape(alloc::format!(
            "expected [frames, h, w, c], got {s:?}"
        )));
    }
    check_scale(s[3], scale)?;
    let c = s[3] / (scale * scale);
    let (idx, shape) = layout::depth_to_space_index(1, s[0], s[1], s[2], c, 1, scale);
    Tensor::from_vec(&shape[1..], layout::apply(z.data(), &idx))
}

/// Inverse of [`depth_to_space`].
pub fn space_to_depth<T: Real>(z: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let s = z.shape();
    if s.len() != 4 || scale == 0 || !s[1].is_multiple_of(scale) || !s[2].is_multiple_of(scale) {
        return Err(Error::Divisibility {
            axis: "height/width",
            size: s.get(1).copied().unwrap_or(0),
            factor: scale,
        });
    }
    let (idx, _) =
        layout::depth_to_space_index(1, s[0], s[1] / scale, s[2] / scale, s[3], 1, scale);
    let shape = [s[0], s[1] / scale, s[2] / scale, s[3] * scale * scale];
    Tensor::from_vec(&shape, layout::apply(z.data(), &layout::invert(&idx)))
}

/// Learned channel projection followed by depth-to-space.
pub fn upsample<T: Real>(z: &Tensor<T>, scale: usize, pre: &LinearMap<T>) -> Result<Tensor<T>> {
    let s = z.shape();
    if s.len() != 4 || pre.d_in() != s[3] {
        return Err(Error::Channels {
            expected: pre.d_in(),
            got: s.last().copied().unwrap_or(0),
        });
    }
    check_scale(pre.d_out(), scale)?;
    let y = Tensor::from_vec(&[s[0], s[1], s[2], pre.d_out()], pre.apply(z.data())?)?;
    depth_to_space(&y, scale)
}

/// Draws `t_sr ~ U{0..=t_max_noise}` and corrupts `z` to that level.
pub fn noise_augment<T: Real, R: Rng + ?Sized>(
    z: &Tensor<T>,
    t_max_noise: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Tensor<T>, usize)> {
    if t_max_noise > sched.num_steps {
        return Err(Error::Timestep {
            t: t_max_noise,
            steps: sched.num_steps,
        });
    }
    let t = rng.random_range(0..=t_max_noise);
    Ok((noise_at(z, t, sched, rng)?, t))
}

pub(crate) fn noise_at<T: Real, R: Rng + ?Sized>(
    z: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let eps: Vec<T> = (0..z.numel())
        .map(|_| {
            T::of(<StandardNormal as Distribution<f64>>::sample(
                &StandardNormal,
                rng,
            ))
        })
        .collect();
    q_sample(z, t, &Tensor::from_vec(z.shape(), eps)?, sched)
}

/// Bilinear (corner-aligned) resize of a `[h·w, d]` position table to
/// `[h'·w', d]`.
pub fn interpolate_position_embeddings<T: Real>(
    table: &Tensor<T>,
    from: [usize; 2],
    to: [usize; 2],
) -> Result<Tensor<T>> {
    let d = table.last_dim();
    let [h, w] = from;
    if table.numel() != h * w * d || h == 0 || w == 0 {
        return Err(Error::Shape(alloc::format!(
            "table {:?} is not a {h}x{w} grid",
            table.shape()
        )));
    }
    let [h2, w2] = to;
    if h2 == 0 || w2 == 0 {
        return Err(Error::Config("resized grid must be non-empty".into()));
    }
    if from == to {
        return Tensor::from_vec(&[h * w, d], table.data().to_vec());
    }
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (x as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, x - lo as f64)
    };
    let src = table.data();
    let mut out = Vec::with_capacity(h2 * w2 * d);
    for y in 0..h2 {
        let (y0, y1, fy) = coord(y, h2, h);
        for x in 0..w2 {
            let (x0, x1, fx) = coord(x, w2, w);
            let (a, b, c, e) = (
                (y0 * w + x0) * d,
                (y0 * w + x1) * d,
                (y1 * w + x0) * d,
                (y1 * w + x1) * d,
            );
            for k in 0..d {
                let top = src[a + k].as_f64() * (1.0 - fx) + src[b + k].as_f64() * fx;
                let bot = src[c + k].as_f64() * (1.0 - fx) + src[e + k].as_f64() * fx;
                out.push(T::of(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    Tensor::from_vec(&[h2 * w2, d], out)
}
