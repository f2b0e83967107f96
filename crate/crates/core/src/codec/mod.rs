//! Causal 3-D convolutional codec mapping images and videos into one shared
//! latent space, plus the token-level plumbing (patchify, position
//! embeddings) the denoiser consumes.
//!
//! Because every convolution is temporally causal and the first frame is
//! exempt from temporal striding, latent frame 0 depends on pixel frame 0
//! only; a still image is just a one-frame video.

mod patch;
mod stats;

pub use patch::{
    add_position_embeddings, patchify, position_index, unpatchify, LinearMap, TokenGrid,
};
pub use stats::{denormalize_latents, fit_latent_stats, normalize_latents, LatentStats, STD_FLOOR};

use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::conv::{conv3d_forward, ConvGeom};
use crate::error::{Error, Result};
use crate::layout;
use crate::nn::{init_param, Init};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LatentKind {
    Video,
    /// Frames encoded independently; attention must not mix them in time.
    ImageStack,
}

impl LatentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LatentKind::Video => "video",
            LatentKind::ImageStack => "image_stack",
        }
    }
}

/// Pixel clip `[frames, height, width, 3]` with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor<T: Real> {
    tensor: Tensor<T>,
}

impl<T: Real> VideoTensor<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::Shape(alloc::format!(
                "video must be [frames, H, W, 3], got {s:?}"
            )));
        }
        if s[0] == 0 {
            return Err(Error::Empty("video has no frames"));
        }
        Ok(Self { tensor })
    }

    pub fn frames(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn is_image(&self) -> bool {
        self.frames() == 1
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn frame(&self, i: usize) -> Result<Self> {
        Self::new(self.tensor.slice_outer(i, i + 1)?)
    }

    pub fn frame_range(&self, start: usize, end: usize) -> Result<Self> {
        Self::new(self.tensor.slice_outer(start, end)?)
    }
}

/// Codec output `[latent_frames, h, w, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor<T: Real> {
    pub tensor: Tensor<T>,
    pub kind: LatentKind,
    pub normalized: bool,
}

impl<T: Real> LatentTensor<T> {
    pub fn new(tensor: Tensor<T>, kind: LatentKind) -> Result<Self> {
        if tensor.shape().len() != 4 {
            return Err(Error::Shape(alloc::format!(
                "latent must be [frames, h, w, c], got {:?}",
                tensor.shape()
            )));
        }
        Ok(Self {
            tensor,
            kind,
            normalized: false,
        })
    }

    pub fn frames(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[3]
    }

    pub fn dims(&self) -> [usize; 4] {
        let s = self.tensor.shape();
        [s[0], s[1], s[2], s[3]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    /// Spatial compression `H / h`.
    pub f_s: usize,
    /// Temporal compression `T / t`.
    pub f_t: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub lat_c: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl CodecConfig {
    /// Small CPU-trainable configuration.
    pub fn desk() -> Self {
        Self {
            f_s: 4,
            f_t: 2,
            base_channels: 32,
            channel_multipliers: vec![1, 2],
            lat_c: 8,
        }
    }

    /// Full-size shape contract (17×128×128 → 5×16×16).
    pub fn large() -> Self {
        Self {
            f_s: 8,
            f_t: 4,
            base_channels: 128,
            channel_multipliers: vec![1, 2, 2, 4],
            lat_c: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.f_s.is_power_of_two() || !self.f_t.is_power_of_two() {
            return Err(Error::Config(alloc::format!(
                "f_s={} and f_t={} must be powers of two",
                self.f_s,
                self.f_t
            )));
        }
        if self.f_t > self.f_s {
            return Err(Error::Config("f_t may not exceed f_s".into()));
        }
        if ![4, 8, 16, 32].contains(&self.lat_c) {
            return Err(Error::Config(alloc::format!(
                "latent channels {} not in {{4, 8, 16, 32}}",
                self.lat_c
            )));
        }
        if self.base_channels == 0
            || self.channel_multipliers.is_empty()
            || self.channel_multipliers.contains(&0)
        {
            return Err(Error::Config(
                "channel plan must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }

    fn spatial_downs(&self) -> usize {
        self.f_s.trailing_zeros() as usize
    }

    fn temporal_downs(&self) -> usize {
        self.f_t.trailing_zeros() as usize
    }

    /// Channels after `i` downsampling stages.
    fn stage_channels(&self, i: usize) -> usize {
        let m = &self.channel_multipliers;
        self.base_channels * m[i.min(m.len() - 1)]
    }

    /// Latent `[frames, h, w, c]` for a pixel clip, or the axis that breaks
    /// divisibility.
    pub fn latent_shape(&self, frames: usize, height: usize, width: usize) -> Result<[usize; 4]> {
        if frames == 0 {
            return Err(Error::Empty("video has no frames"));
        }
        if !(frames - 1).is_multiple_of(self.f_t) {
            return Err(Error::Divisibility {
                axis: "frames - 1",
                size: frames - 1,
                factor: self.f_t,
            });
        }
        if !height.is_multiple_of(self.f_s) {
            return Err(Error::Divisibility {
                axis: "height",
                size: height,
                factor: self.f_s,
            });
        }
        if !width.is_multiple_of(self.f_s) {
            return Err(Error::Divisibility {
                axis: "width",
                size: width,
                factor: self.f_s,
            });
        }
        Ok([
            1 + (frames - 1) / self.f_t,
            height / self.f_s,
            width / self.f_s,
            self.lat_c,
        ])
    }

    /// Inverse of [`latent_shape`](Self::latent_shape): `[frames, H, W, 3]`.
    pub fn pixel_shape(&self, latent_frames: usize, h: usize, w: usize) -> [usize; 4] {
        [
            1 + (latent_frames - 1) * self.f_t,
            h * self.f_s,
            w * self.f_s,
            3,
        ]
    }
}

/// A standalone causal convolution with explicit weights.
#[derive(Clone, Debug)]
pub struct CausalConvSpec<T: Real> {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[kt, kh, kw, in, out]`
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Applies a causal convolution to `[F, H, W, C]` or `[B, F, H, W, C]`.
pub fn causal_conv3d<T: Real>(input: &Tensor<T>, spec: &CausalConvSpec<T>) -> Result<Tensor<T>> {
    let batched;
    let shape: &[usize] = match input.shape().len() {
        4 => {
            batched = [&[1usize][..], input.shape()].concat();
            &batched
        }
        5 => input.shape(),
        _ => {
            return Err(Error::Shape(alloc::format!(
                "conv input rank {:?}",
                input.shape()
            )))
        }
    };
    let cin = shape[4];
    if cin != spec.in_channels {
        return Err(Error::Channels {
            expected: spec.in_channels,
            got: cin,
        });
    }
    let geom = ConvGeom::new(shape, spec.kernel, spec.stride, spec.out_channels)?;
    if spec.weights.numel() != geom.weight_len() || spec.bias.numel() != spec.out_channels {
        return Err(Error::Shape(
            "conv weights do not match kernel and channels".into(),
        ));
    }
    let out = conv3d_forward(&geom, input.data(), spec.weights.data(), spec.bias.data());
    let mut oshape = geom.output_shape();
    if input.shape().len() == 4 {
        oshape.remove(0);
    }
    Tensor::from_vec(&oshape, out)
}

#[derive(Clone, Debug)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    kernel: [usize; 3],
    stride: [usize; 3],
    cout: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel.iter().product::<usize>() * cin;
        let init = Init::Normal(gain / Float::sqrt(fan_in as f64));
        let w = init_param(
            store,
            alloc::format!("{name}.w"),
            &[kernel[0], kernel[1], kernel[2], cin, cout],
            init,
            fan_in,
            rng,
        );
        let b = store.zeros(alloc::format!("{name}.b"), &[cout]);
        Self {
            w,
            b,
            kernel,
            stride,
            cout,
        }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let geom = ConvGeom::new(tape.shape(x), self.kernel, self.stride, self.cout)?;
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        Ok(tape.conv3d(x, w, b, geom))
    }
}

/// The trained encoder/decoder pair. Weights are immutable during
/// inference, so `encode`/`decode` are pure.
#[derive(Clone, Debug)]
pub struct Codec<T: Real> {
    pub config: CodecConfig,
    pub params: ParamStore<T>,
    enc_in: ConvLayer,
    enc_down: Vec<ConvLayer>,
    enc_mid: ConvLayer,
    enc_out: ConvLayer,
    dec_in: ConvLayer,
    dec_mid: ConvLayer,
    dec_up: Vec<(ConvLayer, usize)>,
    dec_out: ConvLayer,
}

const K3: [usize; 3] = [3, 3, 3];
const K1: [usize; 3] = [1, 1, 1];
const S1: [usize; 3] = [1, 1, 1];
const GAIN: f64 = 1.4;

impl<T: Real> Codec<T> {
    pub fn new<R: Rng + ?Sized>(config: CodecConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let nd = config.spatial_downs();
        let nt = config.temporal_downs();
        let c0 = config.stage_channels(0);
        let enc_in = ConvLayer::new(&mut p, "enc.in", 3, c0, K3, S1, GAIN, rng);
        let enc_down = (0..nd)
            .map(|i| {
                let st = if i < nt { 2 } else { 1 };
                ConvLayer::new(
                    &mut p,
                    &alloc::format!("enc.down{i}"),
                    config.stage_channels(i),
                    config.stage_channels(i + 1),
                    K3,
                    [st, 2, 2],
                    GAIN,
                    rng,
                )
            })
            .collect();
        let top = config.stage_channels(nd);
        let enc_mid = ConvLayer::new(&mut p, "enc.mid", top, top, K3, S1, 0.5, rng);
        let enc_out = ConvLayer::new(&mut p, "enc.out", top, config.lat_c, K1, S1, 1.0, rng);
        let dec_in = ConvLayer::new(&mut p, "dec.in", config.lat_c, top, K3, S1, GAIN, rng);
        let dec_mid = ConvLayer::new(&mut p, "dec.mid", top, top, K3, S1, 0.5, rng);
        // Upsampling: causal temporal conv, then depth-to-space over (t, y, x).
        let dec_up = (0..nd)
            .rev()
            .map(|i| {
                let st = if i < nt { 2 } else { 1 };
                let cout = config.stage_channels(i) * st * 4;
                let layer = ConvLayer::new(
                    &mut p,
                    &alloc::format!("dec.up{i}"),
                    config.stage_channels(i + 1),
                    cout,
                    [3, 1, 1],
                    S1,
                    GAIN,
                    rng,
                );
                (layer, st)
            })
            .collect();
        let dec_out = ConvLayer::new(&mut p, "dec.out", c0, 3, K3, S1, 1.0, rng);
        Ok(Self {
            config,
            params: p,
            enc_in,
            enc_down,
            enc_mid,
            enc_out,
            dec_in,
            dec_mid,
            dec_up,
            dec_out,
        })
    }

    /// `[B, F, H, W, 3]` → `[B, f, h, w, c]` on a tape bound to `self.params`.
    pub fn encode_var(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 5 || s[4] != 3 {
            return Err(Error::Shape(alloc::format!(
                "encoder input must be [B, F, H, W, 3], got {s:?}"
            )));
        }
        self.config.latent_shape(s[1], s[2], s[3])?;
        let mut h = self.enc_in.forward(tape, x)?;
        h = tape.silu(h);
        for layer in &self.enc_down {
            h = layer.forward(tape, h)?;
            h = tape.silu(h);
        }
        let r = self.enc_mid.forward(tape, h)?;
        let r = tape.silu(r);
        h = tape.add(h, r);
        self.enc_out.forward(tape, h)
    }

    /// `[B, f, h, w, c]` → `[B, F, H, W, 3]`.
    pub fn decode_var(&self, tape: &mut Tape<'_, T>, z: Var) -> Result<Var> {
        let s = tape.shape(z).to_vec();
        if s.len() != 5 || s[4] != self.config.lat_c {
            return Err(Error::Shape(alloc::format!(
                "decoder input must be [B, f, h, w, {}], got {s:?}",
                self.config.lat_c
            )));
        }
        let mut h = self.dec_in.forward(tape, z)?;
        h = tape.silu(h);
        let r = self.dec_mid.forward(tape, h)?;
        let r = tape.silu(r);
        h = tape.add(h, r);
        for (layer, st) in &self.dec_up {
            h = layer.forward(tape, h)?;
            let hs = tape.shape(h).to_vec();
            let c = hs[4] / (st * 4);
            let (idx, shape) = layout::depth_to_space_index(hs[0], hs[1], hs[2], hs[3], c, *st, 2);
            h = tape.gather(h, idx, &shape);
            h = tape.silu(h);
        }
        self.dec_out.forward(tape, h)
    }

    /// Encodes a batch of equally shaped clips `[B, F, H, W, 3]`.
    pub fn encode_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference(&self.params);
        let v = tape.constant(x.clone());
        let z = self.encode_var(&mut tape, v)?;
        Ok(tape.value(z).clone())
    }

    pub fn decode_batch(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference(&self.params);
        let v = tape.constant(z.clone());
        let x = self.decode_var(&mut tape, v)?;
        Ok(tape.value(x).clone())
    }

    pub fn encode(&self, x: &VideoTensor<T>) -> Result<LatentTensor<T>> {
        let s = x.tensor().shape();
        let batched = x.tensor().clone().reshape(&[1, s[0], s[1], s[2], s[3]])?;
        let z = self.encode_batch(&batched)?;
        let zs = z.shape()[1..].to_vec();
        LatentTensor::new(z.reshape(&zs)?, LatentKind::Video)
    }

    /// Encodes every frame of `frames` independently into an image stack.
    pub fn encode_images(&self, frames: &VideoTensor<T>) -> Result<LatentTensor<T>> {
        let s = frames.tensor().shape();
        let batched = frames
            .tensor()
            .clone()
            .reshape(&[s[0], 1, s[1], s[2], s[3]])?;
        let z = self.encode_batch(&batched)?;
        let zs = z.shape();
        let shape = [zs[0], zs[2], zs[3], zs[4]];
        LatentTensor::new(z.reshape(&shape)?, LatentKind::ImageStack)
    }

    pub fn decode(&self, z: &LatentTensor<T>) -> Result<VideoTensor<T>> {
        if z.normalized {
            return Err(Error::NormalizationState(
                "normalized; denormalize before decoding",
            ));
        }
        if z.channels() != self.config.lat_c {
            return Err(Error::Channels {
                expected: self.config.lat_c,
                got: z.channels(),
            });
        }
        let [f, h, w, c] = z.dims();
        match z.kind {
            LatentKind::Video => {
                let x = self.decode_batch(&z.tensor.clone().reshape(&[1, f, h, w, c])?)?;
                let xs = x.shape()[1..].to_vec();
                VideoTensor::new(x.reshape(&xs)?)
            }
            LatentKind::ImageStack => {
                let x = self.decode_batch(&z.tensor.clone().reshape(&[f, 1, h, w, c])?)?;
                let xs = x.shape();
                let shape = [xs[0], xs[2], xs[3], xs[4]];
                VideoTensor::new(x.reshape(&shape)?)
            }
        }
    }

    /// Per-pixel L2 reconstruction loss for a batch `[B, F, H, W, 3]`.
    pub fn reconstruction_loss(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let z = self.encode_var(tape, x)?;
        let y = self.decode_var(tape, z)?;
        Ok(tape.mse(y, x))
    }
}
