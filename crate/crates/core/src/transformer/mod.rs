//! The denoising backbone: patch embedding, alternating spatial and
//! spatiotemporal window blocks modulated by AdaLN-LoRA, and a linear head.

pub mod adaln;
pub mod attn;
pub mod window;

use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

pub use adaln::{adaln_param_count, AdaLnLora, AdaLnMode, Modulation};
pub use attn::{attention, AttentionOptions, CrossAttention, RelPosBias, SelfAttention};
pub use window::{
    block_diagonal_mask, identity_mask, self_mask, window_partition, window_reverse, WindowConfig,
    WindowKind,
};

use crate::autodiff::{Tape, Var};
use crate::codec::position_index;
use crate::codec::LatentKind;
use crate::error::{Error, Result};
use crate::layout;
use crate::nn::{Init, Linear, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Every hyperparameter needed to rebuild the denoiser's shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    /// Latent grid `(frames, height, width)` before patching.
    pub latent_frames: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Even; blocks alternate spatial, spatiotemporal, starting spatial.
    pub num_blocks: usize,
    pub mlp_ratio: usize,
    /// Spatial extent `(w_h, w_w)` of spatiotemporal windows, in tokens.
    pub st_window: [usize; 2],
    pub adaln: AdaLnMode,
    pub qk_norm: bool,
    /// Conditioning vocabulary size; the id `vocab` is the learned null
    /// token. Zero disables conditioning tokens.
    pub vocab: usize,
    pub cross_attn: bool,
    /// Restricts cross-attention to spatial blocks.
    pub joint: bool,
    pub self_cond: bool,
    pub frame_pred: bool,
    /// Channels of a low-resolution conditioning latent; non-zero also
    /// enables the augmentation-level embedding.
    pub sr_channels: usize,
    /// Upsampling factor applied to the low-resolution latent by a learned
    /// projection to `sr_channels·scale²` channels and depth-to-space.
    pub sr_scale: usize,
}

impl DenoiserConfig {
    /// A small model over the desk codec's latents of 9-frame 16×16 clips.
    pub fn desk() -> Self {
        Self {
            latent_channels: 8,
            latent_frames: 5,
            latent_height: 4,
            latent_width: 4,
            patch: 1,
            d_model: 64,
            heads: 4,
            num_blocks: 4,
            mlp_ratio: 4,
            st_window: [2, 2],
            adaln: AdaLnMode::Lora { rank: 2 },
            qk_norm: true,
            vocab: 16,
            cross_attn: true,
            joint: true,
            self_cond: true,
            frame_pred: true,
            sr_channels: 0,
            sr_scale: 2,
        }
    }

    /// Width, depth and heads of a ViT-g sized backbone.
    pub fn vit_g_like(adaln: AdaLnMode) -> Self {
        Self {
            latent_channels: 8,
            latent_frames: 5,
            latent_height: 32,
            latent_width: 32,
            patch: 2,
            d_model: 1408,
            heads: 16,
            num_blocks: 40,
            mlp_ratio: 4,
            st_window: [8, 8],
            adaln,
            qk_norm: true,
            vocab: 0,
            cross_attn: false,
            joint: false,
            self_cond: true,
            frame_pred: false,
            sr_channels: 0,
            sr_scale: 2,
        }
    }

    pub fn grid(&self) -> [usize; 3] {
        let p = self.patch.max(1);
        [
            self.latent_frames,
            self.latent_height / p,
            self.latent_width / p,
        ]
    }

    /// Channels seen by the patch projection after concatenating every
    /// conditioning signal.
    pub fn input_channels(&self) -> usize {
        let c = self.latent_channels;
        c + if self.self_cond { c } else { 0 }
            + if self.frame_pred { c + 1 } else { 0 }
            + self.sr_channels
    }

    pub fn window(&self, kind: WindowKind) -> WindowConfig {
        let g = self.grid();
        match kind {
            WindowKind::Spatial => WindowConfig::spatial(g),
            WindowKind::Spatiotemporal => {
                WindowConfig::spatiotemporal(g, self.st_window[0], self.st_window[1])
            }
            WindowKind::Full => WindowConfig::full(g),
        }
    }

    pub fn block_kind(&self, i: usize) -> WindowKind {
        if i.is_multiple_of(2) {
            WindowKind::Spatial
        } else {
            WindowKind::Spatiotemporal
        }
    }

    pub fn has_cross_attn(&self, kind: WindowKind) -> bool {
        self.cross_attn && self.vocab > 0 && (!self.joint || kind == WindowKind::Spatial)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.latent_channels == 0 || self.d_model == 0 || self.latent_frames == 0 {
            return bad("latent channels, frames and d_model must be positive");
        }
        if self.num_blocks == 0 || !self.num_blocks.is_multiple_of(2) {
            return bad("block count must be even and positive");
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Divisibility {
                axis: "d_model",
                size: self.d_model,
                factor: self.heads,
            });
        }
        if !self.d_model.is_multiple_of(2) {
            return bad("d_model must be even for sinusoidal embeddings");
        }
        for (axis, size) in [
            ("latent height", self.latent_height),
            ("latent width", self.latent_width),
        ] {
            if self.patch == 0 || size % self.patch != 0 {
                return Err(Error::Divisibility {
                    axis,
                    size,
                    factor: self.patch,
                });
            }
        }
        if self.sr_channels > 0 {
            let s = self.sr_scale;
            if s == 0
                || !self.latent_height.is_multiple_of(s)
                || !self.latent_width.is_multiple_of(s)
            {
                return Err(Error::Divisibility {
                    axis: "latent size by super-resolution scale",
                    size: self.latent_height,
                    factor: s,
                });
            }
        }
        if self.mlp_ratio == 0 {
            return bad("mlp ratio must be positive");
        }
        self.window(WindowKind::Spatiotemporal)
            .validate(self.grid())
    }
}

/// Learned bias clip per axis: the largest offset a window can contain.
fn relpos_clip(win: &WindowConfig) -> [usize; 3] {
    [win.extent[0] - 1, win.extent[1] - 1, win.extent[2] - 1]
}

/// Parameter counts derived from a configuration without building weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCensus {
    pub total: usize,
    /// Modulation maps only.
    pub adaln: usize,
}

pub fn param_census(cfg: &DenoiserConfig) -> ParamCensus {
    let d = cfg.d_model;
    let lin = |i: usize, o: usize| i * o + o;
    let pp = cfg.patch * cfg.patch;
    let [t, hp, wp] = cfg.grid();
    let mut total = lin(pp * cfg.input_channels(), d) + hp * wp * d + t * d;
    total += 2 * lin(d, d);
    if cfg.sr_channels > 0 {
        let up = cfg.sr_channels * cfg.sr_scale * cfg.sr_scale;
        total += 2 * lin(d, d) + lin(cfg.sr_channels, up);
    }
    if cfg.vocab > 0 {
        total += (cfg.vocab + 1) * d;
    }
    let temps = if cfg.qk_norm { cfg.heads } else { 0 };
    for kind in [WindowKind::Spatial, WindowKind::Spatiotemporal] {
        total += cfg.heads * RelPosBias::num_offsets(relpos_clip(&cfg.window(kind)));
    }
    for i in 0..cfg.num_blocks {
        total += lin(d, 3 * d) + lin(d, d) + temps;
        if cfg.has_cross_attn(cfg.block_kind(i)) {
            total += lin(d, d) + lin(d, 2 * d) + lin(d, d) + temps;
        }
        let h = cfg.mlp_ratio * d;
        total += lin(d, h) + lin(h, d);
    }
    total += lin(d, pp * cfg.latent_channels);
    let adaln = adaln_param_count(d, cfg.num_blocks, cfg.adaln);
    ParamCensus {
        total: total + adaln,
        adaln,
    }
}

/// `[B, d]` sinusoidal features of (possibly fractional) timesteps.
pub fn timestep_embedding<T: Real>(t: &[f64], d: usize) -> Tensor<T> {
    let half = d / 2;
    let mut out = Vec::with_capacity(t.len() * d);
    for &tv in t {
        for i in 0..half {
            let f = Float::exp(-Float::ln(10_000.0f64) * i as f64 / half as f64);
            out.push(T::of(Float::cos(tv * f)));
        }
        for i in 0..half {
            let f = Float::exp(-Float::ln(10_000.0f64) * i as f64 / half as f64);
            out.push(T::of(Float::sin(tv * f)));
        }
    }
    Tensor::from_vec(&[t.len(), d], out).expect("embedding shape")
}

/// Per-sample conditioning passed to the denoiser. Absent channel signals
/// are replaced by zeros.
#[derive(Clone, Debug)]
pub struct ConditioningBundle<T: Real> {
    /// Diffusion timestep per sample.
    pub t: Vec<f64>,
    /// Conditioning token ids per sample, all of one length.
    pub tokens: Option<Vec<Vec<u32>>>,
    /// Samples whose tokens are replaced by the null token.
    pub cfg_null: Vec<bool>,
    /// `[B, F, H, W, c]` previous clean-latent estimate.
    pub self_cond: Option<Tensor<T>>,
    /// `[B, F, H, W, c + 1]` masked context latents plus mask.
    pub fp: Option<Tensor<T>>,
    /// Augmentation noise level per sample.
    pub t_sr: Option<Vec<f64>>,
    /// `[B, F, H, W, sr_channels]` upsampled low-resolution latents.
    pub low_res: Option<Tensor<T>>,
}

impl<T: Real> ConditioningBundle<T> {
    pub fn new(t: Vec<f64>) -> Self {
        Self {
            t,
            tokens: None,
            cfg_null: Vec::new(),
            self_cond: None,
            fp: None,
            t_sr: None,
            low_res: None,
        }
    }

    pub fn batch(&self) -> usize {
        self.t.len()
    }

    pub fn with_tokens(mut self, tokens: Vec<Vec<u32>>) -> Self {
        self.tokens = Some(tokens);
        self
    }

    /// Replaces every sample's tokens with the null token.
    pub fn nulled(&self) -> Self {
        let mut out = self.clone();
        out.cfg_null = alloc::vec![true; self.batch()];
        out
    }

    fn is_null(&self, i: usize) -> bool {
        self.cfg_null.get(i).copied().unwrap_or(false)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub kind: WindowKind,
    pub attn: SelfAttention,
    pub cross: Option<CrossAttention>,
    pub mlp: Mlp,
}

/// The denoiser `f_θ(z_t; c, t)` predicting `v` for a latent batch.
#[derive(Clone, Debug)]
pub struct Denoiser<T: Real> {
    pub config: DenoiserConfig,
    pub params: ParamStore<T>,
    pub patch_embed: Linear,
    pub space_pos: ParamId,
    pub time_pos: ParamId,
    pub t_mlp: (Linear, Linear),
    pub t_sr_mlp: Option<(Linear, Linear)>,
    /// Low-resolution pre-projection ahead of depth-to-space.
    pub sr_pre: Option<Linear>,
    pub token_embed: Option<ParamId>,
    pub relpos_s: RelPosBias,
    pub relpos_st: RelPosBias,
    pub adaln: AdaLnLora,
    pub blocks: Vec<Block>,
    pub head: Linear,
}

fn embed_mlp<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    d: usize,
    rng: &mut R,
) -> (Linear, Linear) {
    (
        Linear::new(
            store,
            &alloc::format!("{name}.fc1"),
            d,
            d,
            true,
            Init::FanIn,
            rng,
        ),
        Linear::new(
            store,
            &alloc::format!("{name}.fc2"),
            d,
            d,
            true,
            Init::FanIn,
            rng,
        ),
    )
}

impl<T: Real> Denoiser<T> {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut s = ParamStore::new();
        let d = config.d_model;
        let pp = config.patch * config.patch;
        let [t, hp, wp] = config.grid();
        let patch_embed = Linear::new(
            &mut s,
            "patch_embed",
            pp * config.input_channels(),
            d,
            true,
            Init::FanIn,
            rng,
        );
        let space_pos = s.normal("pos.space", &[hp * wp, d], 0.02, rng);
        let time_pos = s.normal("pos.time", &[t, d], 0.02, rng);
        let t_mlp = embed_mlp(&mut s, "t_embed", d, rng);
        let t_sr_mlp = (config.sr_channels > 0).then(|| embed_mlp(&mut s, "t_sr_embed", d, rng));
        let sr_pre = (config.sr_channels > 0).then(|| {
            let up = config.sr_channels * config.sr_scale * config.sr_scale;
            Linear::new(
                &mut s,
                "sr_pre",
                config.sr_channels,
                up,
                true,
                Init::FanIn,
                rng,
            )
        });
        let token_embed =
            (config.vocab > 0).then(|| s.normal("token_embed", &[config.vocab + 1, d], 0.02, rng));
        let relpos_s = RelPosBias::new(
            &mut s,
            "relpos.spatial",
            config.heads,
            relpos_clip(&config.window(WindowKind::Spatial)),
            rng,
        );
        let relpos_st = RelPosBias::new(
            &mut s,
            "relpos.spatiotemporal",
            config.heads,
            relpos_clip(&config.window(WindowKind::Spatiotemporal)),
            rng,
        );
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for i in 0..config.num_blocks {
            let kind = config.block_kind(i);
            let name = alloc::format!("block{i}");
            let attn = SelfAttention::new(
                &mut s,
                &alloc::format!("{name}.attn"),
                d,
                config.heads,
                config.qk_norm,
                rng,
            );
            let cross = config.has_cross_attn(kind).then(|| {
                CrossAttention::new(
                    &mut s,
                    &alloc::format!("{name}.cross"),
                    d,
                    config.heads,
                    config.qk_norm,
                    rng,
                )
            });
            let mlp = Mlp::new(
                &mut s,
                &alloc::format!("{name}.mlp"),
                d,
                config.mlp_ratio * d,
                rng,
            );
            blocks.push(Block {
                kind,
                attn,
                cross,
                mlp,
            });
        }
        let adaln = AdaLnLora::new(&mut s, "adaln", d, config.num_blocks, config.adaln, rng);
        let head = Linear::new(
            &mut s,
            "head",
            d,
            pp * config.latent_channels,
            true,
            Init::Zeros,
            rng,
        );
        Ok(Self {
            config,
            params: s,
            patch_embed,
            space_pos,
            time_pos,
            t_mlp,
            t_sr_mlp,
            sr_pre,
            token_embed,
            relpos_s,
            relpos_st,
            adaln,
            blocks,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// `[B, d]` combined conditioning vector `c + t (+ t_sr)` and the
    /// optional `[B, Lc, d]` conditioning tokens.
    pub fn conditioning(
        &self,
        tape: &mut Tape<'_, T>,
        bundle: &ConditioningBundle<T>,
    ) -> Result<(Var, Option<Var>)> {
        let d = self.config.d_model;
        let b = bundle.batch();
        let temb = tape.constant(timestep_embedding(&bundle.t, d));
        let mut cond = mlp2(tape, &self.t_mlp, temb);
        match (&self.t_sr_mlp, &bundle.t_sr) {
            (Some(m), Some(tsr)) => {
                if tsr.len() != b {
                    return Err(Error::Shape(alloc::format!(
                        "{} augmentation levels for batch {b}",
                        tsr.len()
                    )));
                }
                let e = tape.constant(timestep_embedding(tsr, d));
                let e = mlp2(tape, m, e);
                cond = tape.add(cond, e);
            }
            (Some(m), None) => {
                let e = tape.constant(timestep_embedding(&alloc::vec![0.0; b], d));
                let e = mlp2(tape, m, e);
                cond = tape.add(cond, e);
            }
            (None, Some(_)) => {
                return Err(Error::Config(
                    "model has no augmentation-level embedding".into(),
                ))
            }
            (None, None) => {}
        }
        let Some(table) = self.token_embed else {
            return Ok((cond, None));
        };
        let null = self.config.vocab as u32;
        let seqs: Vec<Vec<u32>> = match &bundle.tokens {
            Some(t) => {
                if t.len() != b {
                    return Err(Error::Shape(alloc::format!(
                        "{} token sequences for batch {b}",
                        t.len()
                    )));
                }
                t.clone()
            }
            None => alloc::vec![alloc::vec![null]; b],
        };
        let lc = seqs.first().map(Vec::len).unwrap_or(0);
        if lc == 0 || seqs.iter().any(|s| s.len() != lc) {
            return Err(Error::Empty("conditioning sequence"));
        }
        let mut idx = Vec::with_capacity(b * lc * d);
        for (i, seq) in seqs.iter().enumerate() {
            for &tok in seq {
                let tok = if bundle.is_null(i) { null } else { tok };
                if tok > null {
                    return Err(Error::Config(alloc::format!(
                        "token {tok} outside vocabulary {null}"
                    )));
                }
                let base = tok as usize * d;
                idx.extend((base..base + d).map(|x| x as u32));
            }
        }
        let table = tape.param(table);
        let tokens = tape.gather(table, idx.into(), &[b, lc, d]);
        let mut pooled: Option<Var> = None;
        for l in 0..lc {
            let sel: Vec<u32> = (0..b)
                .flat_map(|bi| ((bi * lc + l) * d..(bi * lc + l + 1) * d).map(|x| x as u32))
                .collect();
            let e = tape.gather(tokens, sel.into(), &[b, d]);
            pooled = Some(match pooled {
                Some(p) => tape.add(p, e),
                None => e,
            });
        }
        let c = tape.scale(pooled.expect("non-empty"), T::one() / T::of(lc as f64));
        Ok((tape.add(cond, c), Some(tokens)))
    }

    /// Concatenates the latent with every channel signal the configuration
    /// expects: `[B, F, H, W, input_channels]`.
    fn input(&self, tape: &mut Tape<'_, T>, z: Var, bundle: &ConditioningBundle<T>) -> Result<Var> {
        let cfg = &self.config;
        let s = tape.shape(z).to_vec();
        let expect = [
            bundle.batch(),
            cfg.latent_frames,
            cfg.latent_height,
            cfg.latent_width,
        ];
        if s.len() != 5 || s[..4] != expect {
            return Err(Error::Shape(alloc::format!(
                "latent batch {:?}, model expects {:?}x{}",
                s,
                expect,
                cfg.latent_channels
            )));
        }
        if s[4] != cfg.latent_channels {
            return Err(Error::Channels {
                expected: cfg.latent_channels,
                got: s[4],
            });
        }
        let c = cfg.latent_channels;
        let mut parts = alloc::vec![z];
        let mut signal =
            |tape: &mut Tape<'_, T>, on: bool, t: &Option<Tensor<T>>, ch: usize| -> Result<()> {
                match (on, t) {
                    (false, None) => Ok(()),
                    (false, Some(_)) => Err(Error::Channels {
                        expected: cfg.input_channels(),
                        got: cfg.input_channels() + ch.max(1),
                    }),
                    (true, None) => {
                        let mut shape = s.clone();
                        shape[4] = ch;
                        parts.push(tape.constant(Tensor::zeros(&shape)));
                        Ok(())
                    }
                    (true, Some(t)) => {
                        if t.shape()[..t.shape().len().saturating_sub(1)] != s[..4]
                            || t.last_dim() != ch
                        {
                            return Err(Error::Channels {
                                expected: ch,
                                got: t.last_dim(),
                            });
                        }
                        parts.push(tape.constant(t.clone()));
                        Ok(())
                    }
                }
            };
        signal(tape, cfg.self_cond, &bundle.self_cond, c)?;
        signal(tape, cfg.frame_pred, &bundle.fp, c + 1)?;
        match (&self.sr_pre, &bundle.low_res) {
            (None, None) => {}
            (None, Some(_)) => {
                return Err(Error::Config(
                    "model takes no low-resolution conditioning".into(),
                ));
            }
            (Some(_), None) => {
                let mut shape = s.clone();
                shape[4] = cfg.sr_channels;
                parts.push(tape.constant(Tensor::zeros(&shape)));
            }
            (Some(pre), Some(lr)) => {
                let k = cfg.sr_scale;
                let want = [s[0], s[1], s[2] / k, s[3] / k, cfg.sr_channels];
                if lr.shape() != want {
                    return Err(Error::Shape(alloc::format!(
                        "low-resolution latent {:?}, expected {:?}",
                        lr.shape(),
                        want
                    )));
                }
                let v = tape.constant(lr.clone());
                let up = pre.forward(tape, v);
                let (idx, shape) = layout::depth_to_space_index(
                    s[0],
                    s[1],
                    s[2] / k,
                    s[3] / k,
                    cfg.sr_channels,
                    1,
                    k,
                );
                parts.push(tape.gather(up, idx, &shape));
            }
        }
        Ok(if parts.len() == 1 {
            z
        } else {
            tape.concat(&parts, 4)
        })
    }

    /// v-prediction for `z` (`[B, F, H, W, c]`).
    pub fn forward(
        &self,
        tape: &mut Tape<'_, T>,
        z: Var,
        kind: LatentKind,
        bundle: &ConditioningBundle<T>,
    ) -> Result<Var> {
        self.forward_with(tape, z, kind, bundle, false)
    }

    /// As [`Self::forward`]; `st_value_path` replaces spatiotemporal
    /// self-attention by its per-token value path.
    pub fn forward_with(
        &self,
        tape: &mut Tape<'_, T>,
        z: Var,
        kind: LatentKind,
        bundle: &ConditioningBundle<T>,
        st_value_path: bool,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (d, p, c) = (cfg.d_model, cfg.patch, cfg.latent_channels);
        let b = bundle.batch();
        let x = self.input(tape, z, bundle)?;
        let cin = cfg.input_channels();
        let grid = cfg.grid();
        let n: usize = grid.iter().product();
        let (f, h, w) = (cfg.latent_frames, cfg.latent_height, cfg.latent_width);
        let x = tape.gather(
            x,
            layout::patchify_index(b, f, h, w, cin, p),
            &[b, n, p * p * cin],
        );
        let mut x = self.patch_embed.forward(tape, x);

        let (sidx, tidx) = position_index(grid, d, kind, grid[1] * grid[2], grid[0])?;
        let sp = tape.param(self.space_pos);
        let tp = tape.param(self.time_pos);
        let sp = tape.gather(sp, sidx, &[n * d]);
        let tp = tape.gather(tp, tidx, &[n * d]);
        let pos = tape.add(sp, tp);
        x = tape.add_bcast(x, pos);

        let (cond, tokens) = self.conditioning(tape, bundle)?;
        let win_s = cfg.window(WindowKind::Spatial);
        let win_st = cfg.window(WindowKind::Spatiotemporal);
        let bias_s = self.relpos_s.forward(tape, win_s.extent);
        let bias_st = self.relpos_st.forward(tape, win_st.extent);

        for (i, blk) in self.blocks.iter().enumerate() {
            let m = self.adaln.params(tape, cond, i + 1)?;
            let (win, bias) = match blk.kind {
                WindowKind::Spatial => (&win_s, bias_s),
                _ => (&win_st, bias_st),
            };
            let hn = tape.layer_norm(x);
            let hn = tape.modulate(hn, m.gamma1, m.beta1);
            let a = if st_value_path && blk.kind != WindowKind::Spatial {
                blk.attn.value_path(tape, hn)
            } else {
                blk.attn.forward(tape, hn, grid, win, kind, Some(bias))?
            };
            let a = tape.mul_bcast(a, m.alpha1);
            x = tape.add(x, a);
            if let (Some(cross), Some(tok)) = (&blk.cross, tokens) {
                let hn = tape.layer_norm(x);
                let o = cross.forward(tape, hn, tok, grid, win, kind)?;
                x = tape.add(x, o);
            }
            let hn = tape.layer_norm(x);
            let hn = tape.modulate(hn, m.gamma2, m.beta2);
            let o = blk.mlp.forward(tape, hn);
            let o = tape.mul_bcast(o, m.alpha2);
            x = tape.add(x, o);
        }
        let x = tape.layer_norm(x);
        let out = self.head.forward(tape, x);
        let inv = layout::unpatchify_index(b, f, h, w, c, p);
        Ok(tape.gather(out, inv, &[b, f, h, w, c]))
    }

    /// A copy for latents of `height × width` whose spatial position table is
    /// bilinearly resized; relative-position tables keep their clip range.
    pub fn with_latent_size(&self, height: usize, width: usize) -> Result<Self> {
        let mut config = self.config.clone();
        config.latent_height = height;
        config.latent_width = width;
        config.validate()?;
        let [_, hp, wp] = self.config.grid();
        let [_, hp2, wp2] = config.grid();
        let table = crate::tasks::interpolate_position_embeddings(
            self.params.get(self.space_pos),
            [hp, wp],
            [hp2, wp2],
        )?;
        let mut out = self.clone();
        out.params.replace(self.space_pos, table);
        out.config = config;
        Ok(out)
    }

    /// Gradient-free prediction on plain tensors.
    pub fn predict(
        &self,
        z: &Tensor<T>,
        kind: LatentKind,
        bundle: &ConditioningBundle<T>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::inference(&self.params);
        let zv = tape.constant(z.clone());
        let out = self.forward(&mut tape, zv, kind, bundle)?;
        Ok(tape.value(out).clone())
    }
}

fn mlp2<T: Real>(tape: &mut Tape<'_, T>, m: &(Linear, Linear), x: Var) -> Var {
    let h = m.0.forward(tape, x);
    let h = tape.silu(h);
    m.1.forward(tape, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use crate::test_util::{randn, randomize};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(joint: bool) -> DenoiserConfig {
        DenoiserConfig {
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
            joint,
            self_cond: true,
            frame_pred: true,
            sr_channels: 0,
            sr_scale: 2,
        }
    }

    fn random_model(cfg: DenoiserConfig, seed: u64) -> Denoiser<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Denoiser::new(cfg, &mut rng).unwrap();
        randomize(&mut m.params, 0.3, &mut rng);
        m
    }

    fn bundle(cfg: &DenoiserConfig, b: usize, rng: &mut ChaCha8Rng) -> ConditioningBundle<f64> {
        let c = cfg.latent_channels;
        let s = [b, cfg.latent_frames, cfg.latent_height, cfg.latent_width];
        let mut out = ConditioningBundle::new((0..b).map(|i| 100.0 + 300.0 * i as f64).collect())
            .with_tokens((0..b).map(|i| alloc::vec![i as u32 % 5, 2]).collect());
        out.self_cond = Some(randn(&[s[0], s[1], s[2], s[3], c], rng));
        out.fp = Some(randn(&[s[0], s[1], s[2], s[3], c + 1], rng));
        out
    }

    #[test]
    fn vit_g_adaln_census() {
        let sep = param_census(&DenoiserConfig::vit_g_like(AdaLnMode::Separate));
        assert_eq!(40 * 1408 * 6 * 1408, 475_791_360);
        assert_eq!(sep.adaln, 475_791_360 + 40 * 6 * 1408);
        assert_eq!((sep.adaln as f64 / 1e6).round(), 476.0);
        let lora = param_census(&DenoiserConfig::vit_g_like(AdaLnMode::Lora { rank: 2 }));
        let shared = 6 * 1408 * 1408 + 6 * 1408;
        assert_eq!(lora.adaln, shared + 39 * (1408 * 2 + 2 * 6 * 1408));
        assert_eq!((lora.adaln as f64 / 1e5).round() / 10.0, 12.7);
        let r0 = param_census(&DenoiserConfig::vit_g_like(AdaLnMode::Lora { rank: 0 }));
        assert_eq!(r0.adaln, shared);
        assert_eq!(sep.total - sep.adaln, lora.total - lora.adaln);
    }

    #[test]
    fn census_matches_instantiated_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfgs = alloc::vec![DenoiserConfig::desk(), tiny(true), tiny(false)];
        let mut c = tiny(false);
        c.adaln = AdaLnMode::Separate;
        c.qk_norm = false;
        c.sr_channels = 3;
        c.vocab = 0;
        cfgs.push(c);
        for cfg in cfgs {
            let m = Denoiser::<f32>::new(cfg.clone(), &mut rng).unwrap();
            assert_eq!(m.num_params(), param_census(&cfg).total, "{cfg:?}");
            assert_eq!(m.adaln.num_params(), param_census(&cfg).adaln);
        }
    }

    #[test]
    fn shape_trace_with_all_channel_signals() {
        let cfg = DenoiserConfig {
            latent_channels: 8,
            latent_frames: 5,
            latent_height: 16,
            latent_width: 16,
            patch: 2,
            d_model: 16,
            heads: 2,
            num_blocks: 2,
            st_window: [4, 4],
            vocab: 0,
            ..tiny(true)
        };
        assert_eq!(cfg.input_channels(), 25);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Denoiser::<f32>::new(cfg.clone(), &mut rng).unwrap();
        assert_eq!(m.patch_embed.d_in, 4 * 25);
        let z = randn::<f32, _>(&[1, 5, 16, 16, 8], &mut rng);
        let mut b = ConditioningBundle::new(alloc::vec![10.0]);
        b.self_cond = Some(randn(&[1, 5, 16, 16, 8], &mut rng));
        b.fp = Some(randn(&[1, 5, 16, 16, 9], &mut rng));
        let out = m.predict(&z, LatentKind::Video, &b).unwrap();
        assert_eq!(out.shape(), &[1, 5, 16, 16, 8]);
        // zero-initialised head
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn channel_mismatches_are_rejected() {
        let mut cfg = tiny(true);
        cfg.self_cond = false;
        let m = random_model(cfg.clone(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = randn::<f64, _>(&[1, 3, 4, 4, 2], &mut rng);
        let b = bundle(&cfg, 1, &mut rng);
        assert!(matches!(
            m.predict(&z, LatentKind::Video, &b),
            Err(Error::Channels { .. })
        ));
        let mut b2 = b.clone();
        b2.self_cond = None;
        b2.fp = Some(randn(&[1, 3, 4, 4, 2], &mut rng));
        assert!(matches!(
            m.predict(&z, LatentKind::Video, &b2),
            Err(Error::Channels { .. })
        ));
        b2.fp = None;
        assert!(m.predict(&z, LatentKind::Video, &b2).is_ok());
        let z3 = randn::<f64, _>(&[1, 3, 4, 4, 3], &mut rng);
        assert!(matches!(
            m.predict(&z3, LatentKind::Video, &b2),
            Err(Error::Channels { .. })
        ));
    }

    #[test]
    fn image_stack_matches_value_path_model() {
        for joint in [true, false] {
            let cfg = tiny(joint);
            let m = random_model(cfg.clone(), 4);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let z = randn::<f64, _>(&[2, 3, 4, 4, 2], &mut rng);
            let b = bundle(&cfg, 2, &mut rng);
            let mut tape = Tape::inference(&m.params);
            let zv = tape.constant(z);
            let full = m
                .forward(&mut tape, zv, LatentKind::ImageStack, &b)
                .unwrap();
            let reduced = m
                .forward_with(&mut tape, zv, LatentKind::ImageStack, &b, true)
                .unwrap();
            assert!(tape.value(full).max_abs_diff(tape.value(reduced)) < 1e-10);
            let video = m.forward(&mut tape, zv, LatentKind::Video, &b).unwrap();
            assert!(tape.value(full).max_abs_diff(tape.value(video)) > 1e-4);
        }
    }

    #[test]
    fn joint_mode_skips_cross_attention_in_temporal_blocks() {
        let joint = random_model(tiny(true), 6);
        let kinds: Vec<_> = joint
            .blocks
            .iter()
            .map(|b| (b.kind, b.cross.is_some()))
            .collect();
        assert_eq!(
            kinds,
            [
                (WindowKind::Spatial, true),
                (WindowKind::Spatiotemporal, false)
            ]
        );
        let both = random_model(tiny(false), 6);
        assert!(both.blocks.iter().all(|b| b.cross.is_some()));
    }

    #[test]
    fn forward_is_deterministic_and_null_changes_output() {
        let cfg = tiny(true);
        let m = random_model(cfg.clone(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = randn::<f64, _>(&[2, 3, 4, 4, 2], &mut rng);
        let b = bundle(&cfg, 2, &mut rng);
        let a = m.predict(&z, LatentKind::Video, &b).unwrap();
        let a2 = m.predict(&z, LatentKind::Video, &b).unwrap();
        assert_eq!(a.data(), a2.data());
        let n = m.predict(&z, LatentKind::Video, &b.nulled()).unwrap();
        assert!(a.max_abs_diff(&n) > 1e-4);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(true);
        c.num_blocks = 3;
        assert!(c.validate().is_err());
        let mut c = tiny(true);
        c.st_window = [3, 1];
        assert!(c.validate().is_err());
        let mut c = tiny(true);
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn two_block_gradients_match_finite_differences() {
        let cfg = tiny(false);
        let m = random_model(cfg.clone(), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = randn::<f64, _>(&[2, 3, 4, 4, 2], &mut rng);
        let target = randn::<f64, _>(&[2, 3, 4, 4, 2], &mut rng);
        let b = bundle(&cfg, 2, &mut rng);
        let report = check_params(
            &m.params,
            |tape| {
                let zv = tape.constant(z.clone());
                let tv = tape.constant(target.clone());
                let out = m.forward(tape, zv, LatentKind::Video, &b)?;
                Ok(tape.mse(out, tv))
            },
            200,
            1e-3,
            1e-3,
            &mut rng,
        )
        .unwrap();
        assert!(report.pass_fraction() >= 0.95, "{report:?}");
    }
}
