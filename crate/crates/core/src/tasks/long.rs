use alloc::vec::Vec;

use super::build_fp_conditioning;
use crate::codec::{
    denormalize_latents, normalize_latents, Codec, LatentKind, LatentStats, LatentTensor,
    VideoTensor,
};
use crate::diffusion::{sample, NoiseSchedule, SampleConfig};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::transformer::{ConditioningBundle, Denoiser};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LongVideoConfig {
    pub chunks: usize,
    /// Latent frames carried into the next chunk.
    pub context_latent_frames: usize,
    pub sample: SampleConfig,
}

#[derive(Clone, Debug)]
pub struct LongVideo<T: Real> {
    /// `[frames, H, W, 3]`
    pub pixels: VideoTensor<T>,
    /// Normalized latents of every chunk, overlap included.
    pub chunk_latents: Vec<Tensor<T>>,
    /// Context latents obtained by re-encoding decoded pixel frames, one per
    /// chunk after the first.
    pub reencoded: Vec<Tensor<T>>,
    /// Pixel index of the first frame of each chunk after the first.
    pub seams: Vec<usize>,
}

/// Generates `chunks` clips, each later clip conditioned on latents
/// re-encoded from the last pixel frames of the previous one.
pub fn autoregressive_generate<T: Real>(
    model: &Denoiser<T>,
    codec: &Codec<T>,
    stats: &LatentStats,
    bundle: &ConditioningBundle<T>,
    sched: &NoiseSchedule,
    cfg: &LongVideoConfig,
) -> Result<LongVideo<T>> {
    let mc = &model.config;
    let f_t = codec.config.f_t;
    if cfg.chunks == 0 {
        return Err(Error::Config("at least one chunk is required".into()));
    }
    if mc.latent_channels != codec.config.lat_c || stats.channels() != mc.latent_channels {
        return Err(Error::Channels {
            expected: mc.latent_channels,
            got: codec.config.lat_c,
        });
    }
    let n_ctx = cfg.context_latent_frames;
    if cfg.chunks > 1 && (!mc.frame_pred || n_ctx == 0 || n_ctx >= mc.latent_frames) {
        return Err(Error::Config(alloc::format!(
            "continuation needs a frame-prediction model and 0 < context ({n_ctx}) < {} latent frames",
            mc.latent_frames
        )));
    }
    if bundle.batch() != 1 {
        return Err(Error::Shape(
            "long generation runs one sample at a time".into(),
        ));
    }
    let shape = [
        1,
        mc.latent_frames,
        mc.latent_height,
        mc.latent_width,
        mc.latent_channels,
    ];
    let lat_shape = [
        mc.latent_frames,
        mc.latent_height,
        mc.latent_width,
        mc.latent_channels,
    ];
    let ctx_pixels = 1 + (n_ctx.max(1) - 1) * f_t;

    let mut frames: Vec<Tensor<T>> = Vec::new();
    let mut out = LongVideo {
        pixels: VideoTensor::new(Tensor::zeros(&[1, 1, 1, 3]))?,
        chunk_latents: Vec::new(),
        reencoded: Vec::new(),
        seams: Vec::new(),
    };
    let decode = |z: &Tensor<T>| -> Result<VideoTensor<T>> {
        let mut lt = LatentTensor::new(z.clone().reshape(&lat_shape)?, LatentKind::Video)?;
        lt.normalized = true;
        codec.decode(&denormalize_latents(&lt, stats)?)
    };
    for chunk in 0..cfg.chunks {
        let mut b = bundle.clone();
        let mut sc = cfg.sample;
        sc.seed = cfg.sample.seed.wrapping_add(chunk as u64);
        let ctx = if chunk == 0 {
            None
        } else {
            let total = frames.len();
            if total < ctx_pixels {
                return Err(Error::Shape(alloc::format!(
                    "{total} pixel frames, need {ctx_pixels} for context"
                )));
            }
            let tail = Tensor::stack(&frames[total - ctx_pixels..])?;
            let enc = codec.encode(&VideoTensor::new(tail)?)?;
            let ctx = normalize_latents(&enc, stats)?.tensor;
            out.reencoded.push(ctx.clone());
            b.fp = Some(
                build_fp_conditioning(mc.latent_frames, &ctx, n_ctx)?.reshape(&[
                    1,
                    mc.latent_frames,
                    mc.latent_height,
                    mc.latent_width,
                    mc.latent_channels + 1,
                ])?,
            );
            Some(ctx)
        };
        let mut z = sample(model, &shape, LatentKind::Video, &b, sched, &sc)?;
        if let Some(ctx) = &ctx {
            let n = ctx.numel();
            z.data_mut()[..n].copy_from_slice(ctx.data());
        }
        let px = decode(&z)?;
        let skip = if chunk == 0 { 0 } else { ctx_pixels };
        if chunk > 0 {
            out.seams.push(frames.len());
        }
        for i in skip..px.frames() {
            frames.push(
                px.frame(i)?
                    .into_tensor()
                    .reshape(&[px.height(), px.width(), 3])?,
            );
        }
        out.chunk_latents.push(z);
    }
    out.pixels = VideoTensor::new(Tensor::stack(&frames)?)?;
    Ok(out)
}
