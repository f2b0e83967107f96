//! Sampling modes on top of a checkpoint: text/class to video, image to
//! video, video prediction, long video, images and super-resolution.

use anyhow::{anyhow, bail, Result};
use lvd_core::codec::{
    denormalize_latents, normalize_latents, Codec, LatentKind, LatentStats, LatentTensor,
    VideoTensor,
};
use lvd_core::diffusion::{sample, NoiseSchedule, SampleConfig};
use lvd_core::tasks::{
    autoregressive_generate, build_fp_conditioning, superres_sample, LongVideoConfig, SuperResStage,
};
use lvd_core::transformer::{ConditioningBundle, Denoiser};
use lvd_core::Tensor;

use crate::checkpoint::Checkpoint;
use crate::config::CondMode;
use crate::data::SpriteClass;
use crate::train::tokens_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    T2v,
    I2v,
    Predict,
    Long,
    Superres,
    Image,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::T2v => "t2v",
            Mode::I2v => "i2v",
            Mode::Predict => "predict",
            Mode::Long => "long",
            Mode::Superres => "superres",
            Mode::Image => "image",
        }
    }
}

/// Decodes normalized latents `[F, h, w, c]` of the given kind.
pub fn decode_normalized(
    codec: &Codec<f32>,
    stats: &LatentStats,
    z: &Tensor<f32>,
    kind: LatentKind,
) -> Result<VideoTensor<f32>> {
    let mut lt = LatentTensor::new(z.clone(), kind)?;
    lt.normalized = true;
    Ok(codec.decode(&denormalize_latents(&lt, stats)?)?)
}

pub fn encode_normalized(
    codec: &Codec<f32>,
    stats: &LatentStats,
    x: &VideoTensor<f32>,
) -> Result<Tensor<f32>> {
    Ok(normalize_latents(&codec.encode(x)?, stats)?.tensor)
}

/// Splits `[B, ...]` into `B` tensors without the leading axis.
pub fn unbatch(z: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    let s = z.shape();
    (0..s[0])
        .map(|i| Ok(z.slice_outer(i, i + 1)?.reshape(&s[1..])?))
        .collect()
}

pub fn class_bundle(
    model: &Denoiser<f32>,
    classes: &[SpriteClass],
    mode: CondMode,
) -> ConditioningBundle<f32> {
    let b = ConditioningBundle::new(vec![0.0; classes.len()]);
    if model.config.vocab > 0 {
        b.with_tokens(classes.iter().map(|&c| tokens_for(c, mode)).collect())
    } else {
        b
    }
}

/// Everything a sampling call needs, borrowed from a checkpoint.
pub struct Generator<'a> {
    pub model: &'a Denoiser<f32>,
    pub codec: &'a Codec<f32>,
    pub stats: &'a LatentStats,
    pub sched: NoiseSchedule,
    pub cond_mode: CondMode,
}

impl<'a> Generator<'a> {
    pub fn from_checkpoint(ck: &'a Checkpoint) -> Result<Self> {
        Ok(Self {
            model: ck
                .denoiser
                .as_ref()
                .ok_or_else(|| anyhow!("checkpoint has no trained denoiser"))?,
            codec: &ck.codec,
            stats: ck
                .stats
                .as_ref()
                .ok_or_else(|| anyhow!("checkpoint has no latent statistics"))?,
            sched: ck.config.schedule.build()?,
            cond_mode: ck.config.train.cond_mode,
        })
    }

    fn latent_shape(&self, batch: usize) -> [usize; 5] {
        let c = &self.model.config;
        [
            batch,
            c.latent_frames,
            c.latent_height,
            c.latent_width,
            c.latent_channels,
        ]
    }

    /// Normalized latents `[B, F, h, w, c]` for one class per sample.
    pub fn sample_latents(
        &self,
        classes: &[SpriteClass],
        kind: LatentKind,
        cfg: &SampleConfig,
    ) -> Result<Tensor<f32>> {
        let bundle = class_bundle(self.model, classes, self.cond_mode);
        Ok(sample(
            self.model,
            &self.latent_shape(classes.len()),
            kind,
            &bundle,
            &self.sched,
            cfg,
        )?)
    }

    pub fn sample_videos(
        &self,
        classes: &[SpriteClass],
        cfg: &SampleConfig,
    ) -> Result<Vec<VideoTensor<f32>>> {
        let z = self.sample_latents(classes, LatentKind::Video, cfg)?;
        unbatch(&z)?
            .iter()
            .map(|zi| decode_normalized(self.codec, self.stats, zi, LatentKind::Video))
            .collect()
    }

    /// Continues `context` pixels: its first `n` latent frames condition
    /// the sample and replace the corresponding generated frames.
    pub fn continue_clip(
        &self,
        class: SpriteClass,
        context: &VideoTensor<f32>,
        n: usize,
        cfg: &SampleConfig,
    ) -> Result<(Tensor<f32>, VideoTensor<f32>)> {
        let c = &self.model.config;
        if !c.frame_pred {
            bail!("the checkpoint's backbone was built without frame-prediction conditioning");
        }
        let ctx = encode_normalized(self.codec, self.stats, context)?;
        if ctx.shape()[0] < n {
            bail!(
                "context encodes to {} latent frames, {n} needed",
                ctx.shape()[0]
            );
        }
        let ctx = ctx.slice_outer(0, n)?;
        let mut bundle = class_bundle(self.model, &[class], self.cond_mode);
        let fp = build_fp_conditioning(c.latent_frames, &ctx, n)?;
        let fs = fp.shape().to_vec();
        bundle.fp = Some(fp.reshape(&[1, fs[0], fs[1], fs[2], fs[3]])?);
        let mut z = sample(
            self.model,
            &self.latent_shape(1),
            LatentKind::Video,
            &bundle,
            &self.sched,
            cfg,
        )?;
        z.data_mut()[..ctx.numel()].copy_from_slice(ctx.data());
        let z = unbatch(&z)?.remove(0);
        let video = decode_normalized(self.codec, self.stats, &z, LatentKind::Video)?;
        Ok((z, video))
    }

    /// Pixel frames needed to encode `n` latent frames.
    pub fn context_pixels(&self, n: usize) -> usize {
        1 + n.saturating_sub(1) * self.codec.config.f_t
    }

    pub fn long(
        &self,
        class: SpriteClass,
        chunks: usize,
        cfg: &SampleConfig,
    ) -> Result<lvd_core::tasks::LongVideo<f32>> {
        let bundle = class_bundle(self.model, &[class], self.cond_mode);
        let lc = LongVideoConfig {
            chunks,
            context_latent_frames: 2,
            sample: *cfg,
        };
        Ok(autoregressive_generate(
            self.model,
            self.codec,
            self.stats,
            &bundle,
            &self.sched,
            &lc,
        )?)
    }

    pub fn images(&self, class: SpriteClass, cfg: &SampleConfig) -> Result<VideoTensor<f32>> {
        let z = self.sample_latents(&[class], LatentKind::ImageStack, cfg)?;
        decode_normalized(
            self.codec,
            self.stats,
            &unbatch(&z)?[0],
            LatentKind::ImageStack,
        )
    }

    /// Base sample followed by one 2x super-resolution stage.
    pub fn superres(
        &self,
        stage: &SuperResStage<f32>,
        class: SpriteClass,
        cfg: &SampleConfig,
    ) -> Result<(Tensor<f32>, VideoTensor<f32>)> {
        let low = self.sample_latents(&[class], LatentKind::Video, cfg)?;
        let high = superres_sample(
            stage,
            &low,
            &ConditioningBundle::new(vec![0.0]),
            &self.sched,
            cfg,
        )?;
        let high = unbatch(&high)?.remove(0);
        let video = decode_normalized(self.codec, self.stats, &high, LatentKind::Video)?;
        Ok((high, video))
    }
}
