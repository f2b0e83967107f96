//! Codec reconstruction training, latent statistics, denoiser training and
//! the single-clip super-resolution fit.

use anyhow::{anyhow, bail, Context, Result};
use lvd_core::codec::{
    fit_latent_stats, normalize_latents, Codec, LatentKind, LatentStats, LatentTensor,
};
use lvd_core::diffusion::{training_step, NoiseSchedule, StepOutput, TrainBatch, TrainStepConfig};
use lvd_core::tasks::augment_batch;
use lvd_core::transformer::{Denoiser, DenoiserConfig};
use lvd_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::TrainState;
use crate::config::{CondMode, OptimConfig, RunConfig};
use crate::data::{render_clip_scaled, Record, SpriteClass, ToyDataset, NUM_CLASSES};
use crate::optim::{cosine_lr, ema_update, AdamW};

/// Generator for step `step` of a run seeded with `seed`; independent of
/// every other step so resumed runs replay the same draws.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

pub fn tokens_for(class: SpriteClass, mode: CondMode) -> Vec<u32> {
    match mode {
        CondMode::Class => class.class_token(),
        CondMode::Caption => class.caption(),
    }
}

fn stack(parts: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let owned: Vec<Tensor<f32>> = parts.iter().map(|t| (*t).clone()).collect();
    Ok(Tensor::stack(&owned)?)
}

/// Trains the codec on the L2 reconstruction loss over video clips.
/// Returns the per-step losses.
pub fn train_codec(
    codec: &mut Codec<f32>,
    data: &ToyDataset,
    cfg: &OptimConfig,
    log: &mut dyn FnMut(&str),
) -> Result<Vec<f64>> {
    if data.videos.is_empty() {
        bail!("codec training needs at least one clip");
    }
    let mut opt = AdamW::new(&codec.params, cfg);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = step_rng(cfg.seed, step);
        let picks: Vec<&Tensor<f32>> = (0..cfg.batch)
            .map(|_| {
                data.videos[rng.random_range(0..data.videos.len())]
                    .pixels
                    .tensor()
            })
            .collect();
        let x = stack(&picks)?;
        let mut tape = Tape::with_params(&codec.params);
        let xv = tape.constant(x);
        let loss = codec.reconstruction_loss(&mut tape, xv)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            bail!(
                "codec loss {value} at step {step} (seed {}, stream {step})",
                cfg.seed
            );
        }
        let grads = tape.backward(loss);
        let grads = tape.param_grads(&grads);
        drop(tape);
        opt.update(
            &mut codec.params,
            &grads,
            cosine_lr(cfg.lr, step, cfg.steps, cfg.warmup_frac),
        )?;
        losses.push(value);
        if (step + 1) % 100 == 0 || step + 1 == cfg.steps {
            log(&format!("codec step {} loss {:.5}", step + 1, value));
        }
    }
    Ok(losses)
}

/// Normalized latents of every record, grouped for batch drawing.
#[derive(Clone, Debug)]
pub struct LatentSet {
    /// `[F, h, w, c]` per clip.
    pub videos: Vec<(Tensor<f32>, SpriteClass)>,
    /// `[1, h, w, c]` per image record.
    pub images: Vec<(Tensor<f32>, SpriteClass)>,
    pub images_by_class: Vec<Vec<usize>>,
}

pub fn encode_records(codec: &Codec<f32>, records: &[Record]) -> Result<Vec<LatentTensor<f32>>> {
    records
        .iter()
        .map(|r| Ok(codec.encode(&r.pixels)?))
        .collect()
}

/// Fits per-channel statistics on the video latents and normalizes all
/// records with them.
pub fn encode_dataset(
    codec: &Codec<f32>,
    data: &ToyDataset,
    stats: Option<&LatentStats>,
) -> Result<(LatentStats, LatentSet)> {
    let videos = encode_records(codec, &data.videos)?;
    let images = encode_records(codec, &data.images)?;
    let stats = match stats {
        Some(s) => s.clone(),
        None => fit_latent_stats(&videos)?,
    };
    let norm =
        |zs: Vec<LatentTensor<f32>>, recs: &[Record]| -> Result<Vec<(Tensor<f32>, SpriteClass)>> {
            zs.iter()
                .zip(recs)
                .map(|(z, r)| Ok((normalize_latents(z, &stats)?.tensor, r.class)))
                .collect()
        };
    let videos = norm(videos, &data.videos)?;
    let images = norm(images, &data.images)?;
    let mut images_by_class = vec![Vec::new(); NUM_CLASSES];
    for (i, (_, c)) in images.iter().enumerate() {
        images_by_class[c.0].push(i);
    }
    Ok((
        stats,
        LatentSet {
            videos,
            images,
            images_by_class,
        },
    ))
}

/// Batch counters; every batch is all-video or all-image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchCounters {
    pub video_batches: usize,
    pub image_batches: usize,
    pub forwards: usize,
    pub self_conditioned: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    /// Loss of each step run, in order.
    pub losses: Vec<f64>,
    pub counters: BatchCounters,
}

/// Draws the batch for one step. Image batches stack `latent_frames`
/// independent images of one class per sample.
pub fn draw_batch<R: Rng + ?Sized>(
    set: &LatentSet,
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<(TrainBatch<f32>, Vec<SpriteClass>)> {
    let b = cfg.train.optim.batch;
    let frames = cfg.backbone.latent_frames;
    let image = cfg.train.image_mix > 0.0 && rng.random_bool(cfg.train.image_mix);
    let mut parts = Vec::with_capacity(b);
    let mut classes = Vec::with_capacity(b);
    if image {
        let populated: Vec<usize> = (0..NUM_CLASSES)
            .filter(|&c| !set.images_by_class[c].is_empty())
            .collect();
        if populated.is_empty() {
            bail!("image batches requested but the dataset has no image records");
        }
        for _ in 0..b {
            let class = populated[rng.random_range(0..populated.len())];
            let pool = &set.images_by_class[class];
            let frames: Vec<Tensor<f32>> = (0..frames)
                .map(|_| set.images[pool[rng.random_range(0..pool.len())]].0.clone())
                .collect();
            parts.push(Tensor::concat_outer(&frames)?);
            classes.push(SpriteClass(class));
        }
    } else {
        for _ in 0..b {
            let (z, c) = &set.videos[rng.random_range(0..set.videos.len())];
            if z.shape()[0] != frames {
                bail!(
                    "clip latents have {} frames, backbone expects {frames}",
                    z.shape()[0]
                );
            }
            parts.push(z.clone());
            classes.push(*c);
        }
    }
    let kind = if image {
        LatentKind::ImageStack
    } else {
        LatentKind::Video
    };
    let mut batch = TrainBatch::new(Tensor::stack(&parts)?, kind);
    batch.normalized = true;
    if cfg.backbone.vocab > 0 {
        batch.tokens = Some(
            classes
                .iter()
                .map(|&c| tokens_for(c, cfg.train.cond_mode))
                .collect(),
        );
    }
    Ok((batch, classes))
}

pub fn init_denoiser(
    config: &DenoiserConfig,
    optim: &OptimConfig,
    ema: bool,
) -> Result<(Denoiser<f32>, TrainState)> {
    let mut rng = ChaCha8Rng::seed_from_u64(optim.seed);
    let model = Denoiser::new(config.clone(), &mut rng)?;
    let state = TrainState {
        step: 0,
        opt: AdamW::new(&model.params, optim),
        ema: ema.then(|| model.params.clone()),
    };
    Ok((model, state))
}

/// Runs denoiser steps from `state.step` up to `until`, calling `on_step`
/// after each update.
pub fn train_denoiser(
    cfg: &RunConfig,
    set: &LatentSet,
    sched: &NoiseSchedule,
    model: &mut Denoiser<f32>,
    state: &mut TrainState,
    until: usize,
    on_step: &mut dyn FnMut(&Denoiser<f32>, &TrainState, f64) -> Result<()>,
) -> Result<TrainLog> {
    let o = &cfg.train.optim;
    if cfg.train.image_mix > 0.0 && set.images.is_empty() {
        bail!(
            "train.image_mix = {} but the dataset has no image records",
            cfg.train.image_mix
        );
    }
    if set.videos.is_empty() {
        bail!("no video records to train on");
    }
    let mut log = TrainLog::default();
    while state.step < until.min(o.steps) {
        let step = state.step;
        let mut rng = step_rng(o.seed, step);
        let (batch, _) = draw_batch(set, cfg, &mut rng)?;
        let out: StepOutput<f32> = training_step(&batch, &*model, sched, &cfg.train.step, &mut rng)
            .with_context(|| {
                format!(
                    "training aborted at step {step}: batch seed {} stream {step}, {} batch of {}",
                    o.seed,
                    batch.kind.as_str(),
                    batch.batch()
                )
            })?;
        match batch.kind {
            LatentKind::Video => log.counters.video_batches += 1,
            LatentKind::ImageStack => log.counters.image_batches += 1,
        }
        log.counters.forwards += out.forwards;
        log.counters.self_conditioned += out.self_conditioned as usize;
        let lr = cosine_lr(o.lr, step, o.steps, o.warmup_frac);
        state.opt.update(&mut model.params, &out.grads, lr)?;
        if let Some(ema) = &mut state.ema {
            ema_update(ema, &model.params, cfg.train.ema_decay);
        }
        state.step += 1;
        log.losses.push(out.loss);
        on_step(model, state, out.loss)?;
    }
    Ok(log)
}

/// Mean of a trailing window, used for loss reporting.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    if xs.len() < window || window == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(xs.len() - window + 1);
    let mut sum: f64 = xs[..window].iter().sum();
    out.push(sum / window as f64);
    for i in window..xs.len() {
        sum += xs[i] - xs[i - window];
        out.push(sum / window as f64);
    }
    out
}

/// One clip at base and doubled resolution, both as normalized latents.
#[derive(Clone, Debug)]
pub struct SuperResPair {
    pub class: SpriteClass,
    pub low: Tensor<f32>,
    pub high: Tensor<f32>,
}

pub fn superres_pair(
    codec: &Codec<f32>,
    stats: &LatentStats,
    data: &ToyDataset,
    index: usize,
) -> Result<SuperResPair> {
    let r = data
        .videos
        .get(index)
        .ok_or_else(|| anyhow!("clip {index} out of range"))?;
    let high_px = render_clip_scaled(&data.spec, r.class, r.start, 2)?;
    let low = normalize_latents(&codec.encode(&r.pixels)?, stats)?.tensor;
    let high = normalize_latents(&codec.encode(&high_px)?, stats)?.tensor;
    Ok(SuperResPair {
        class: r.class,
        low,
        high,
    })
}

/// Fits a super-resolution stage to one clip; returns the per-step losses.
pub fn train_superres(
    cfg: &RunConfig,
    pair: &SuperResPair,
    sched: &NoiseSchedule,
    model: &mut Denoiser<f32>,
    log: &mut dyn FnMut(&str),
) -> Result<Vec<f64>> {
    let o = &cfg.superres.optim;
    let step_cfg = TrainStepConfig {
        p_sc: 0.0,
        cond_drop_prob: 0.0,
        p_fp: 0.0,
    };
    let mut opt = AdamW::new(&model.params, o);
    let lows = Tensor::stack(&vec![pair.low.clone(); o.batch])?;
    let highs = Tensor::stack(&vec![pair.high.clone(); o.batch])?;
    let mut losses = Vec::with_capacity(o.steps);
    for step in 0..o.steps {
        let mut rng = step_rng(o.seed, step);
        let (low_res, t_sr) = augment_batch(&lows, cfg.superres.t_max_noise, sched, &mut rng)?;
        let mut batch = TrainBatch::new(highs.clone(), LatentKind::Video);
        batch.normalized = true;
        batch.low_res = Some(low_res);
        batch.t_sr = Some(t_sr);
        let out =
            training_step(&batch, &*model, sched, &step_cfg, &mut rng).with_context(|| {
                format!(
                    "super-resolution step {step} (seed {}, stream {step})",
                    o.seed
                )
            })?;
        opt.update(
            &mut model.params,
            &out.grads,
            cosine_lr(o.lr, step, o.steps, o.warmup_frac),
        )?;
        losses.push(out.loss);
        if (step + 1) % 100 == 0 || step + 1 == o.steps {
            log(&format!("superres step {} loss {:.6}", step + 1, out.loss));
        }
    }
    Ok(losses)
}
