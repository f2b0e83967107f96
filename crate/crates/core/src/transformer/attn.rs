//! Windowed self- and cross-attention layers.

use alloc::rc::Rc;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use super::window::{identity_mask, self_mask, WindowConfig, WindowKind};
use crate::autodiff::{Tape, Var};
use crate::codec::LatentKind;
use crate::error::{Error, Result};
use crate::layout;
use crate::nn::{Init, Linear};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub struct AttentionOptions<'a, T: Real> {
    pub heads: usize,
    /// `[Lq, Lk]`, `true` = visible.
    pub mask: Option<&'a [bool]>,
    /// `[heads, Lq, Lk]` additive score bias.
    pub bias: Option<&'a Tensor<T>>,
    /// Per-head temperatures; when present, q and k are L2-normalised per
    /// head and scores are `temp · q̂·k̂` instead of `q·k / sqrt(d_head)`.
    pub qk_temperature: Option<&'a [T]>,
}

impl<T: Real> AttentionOptions<'_, T> {
    pub fn heads(heads: usize) -> Self {
        Self {
            heads,
            mask: None,
            bias: None,
            qk_temperature: None,
        }
    }
}

/// Attention over plain `[Lq, D]` / `[Lk, D]` token matrices.
pub fn attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    opts: &AttentionOptions<'_, T>,
) -> Result<Tensor<T>> {
    let (lq, lk, d) = (
        q.numel() / q.last_dim(),
        k.numel() / k.last_dim(),
        q.last_dim(),
    );
    if k.last_dim() != d || v.shape() != k.shape() {
        return Err(Error::Shape(alloc::format!(
            "q {:?}, k {:?}, v {:?} widths disagree",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone().reshape(&[1, lq, d])?);
    let kv = tape.constant(k.clone().reshape(&[1, lk, d])?);
    let vv = tape.constant(v.clone().reshape(&[1, lk, d])?);
    let (qv, kv, scale) = match opts.qk_temperature {
        Some(temps) => {
            let t = tape.constant(Tensor::from_vec(&[temps.len()], temps.to_vec())?);
            let qn = tape.head_l2_norm(qv, opts.heads);
            let qn = tape.head_scale(qn, t, opts.heads);
            (qn, tape.head_l2_norm(kv, opts.heads), T::one())
        }
        None => (
            qv,
            kv,
            T::one() / T::of((d / opts.heads.max(1)) as f64).sqrt(),
        ),
    };
    let bias = opts.bias.map(|b| tape.constant(b.clone()));
    let mask = opts.mask.map(Rc::from);
    let out = tape.attention(qv, kv, vv, bias, mask, opts.heads, scale)?;
    tape.value(out).clone().reshape(&[lq, d])
}

/// `[B, N, width]` → `[B·nW, L, d]` windows taking columns `off..off+d`.
pub(crate) fn windowed_cols(
    b: usize,
    grid: [usize; 3],
    win: [usize; 3],
    width: usize,
    off: usize,
    d: usize,
) -> Rc<[u32]> {
    let base = layout::window_index(b, grid, win, 1);
    let mut idx = Vec::with_capacity(base.len() * d);
    for &tok in base.iter() {
        let start = tok as usize * width + off;
        idx.extend((start..start + d).map(|x| x as u32));
    }
    idx.into()
}

/// `[B, Lc, width]` conditioning rows replicated into each of a sample's
/// `windows` windows: `[B·windows, Lc, d]`.
fn cond_per_window(
    b: usize,
    windows: usize,
    lc: usize,
    width: usize,
    off: usize,
    d: usize,
) -> Rc<[u32]> {
    let mut idx = Vec::with_capacity(b * windows * lc * d);
    for bi in 0..b {
        for _ in 0..windows {
            for l in 0..lc {
                let start = (bi * lc + l) * width + off;
                idx.extend((start..start + d).map(|x| x as u32));
            }
        }
    }
    idx.into()
}

/// Learned bias indexed by the clipped 3-D offset between two tokens of a
/// window.
#[derive(Clone, Debug)]
pub struct RelPosBias {
    pub table: ParamId,
    pub clip: [usize; 3],
    pub heads: usize,
}

impl RelPosBias {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        heads: usize,
        clip: [usize; 3],
        rng: &mut R,
    ) -> Self {
        let table = store.normal(name, &[heads, Self::num_offsets(clip)], 0.02, rng);
        Self { table, clip, heads }
    }

    pub fn num_offsets(clip: [usize; 3]) -> usize {
        clip.iter().map(|c| 2 * c + 1).product()
    }

    /// Flat table index for every `(head, query, key)` of a window.
    pub fn index(&self, extent: [usize; 3]) -> Rc<[u32]> {
        let l: usize = extent.iter().product();
        let n_off = Self::num_offsets(self.clip);
        let coord = |i: usize| {
            [
                (i / (extent[1] * extent[2])) as isize,
                ((i / extent[2]) % extent[1]) as isize,
                (i % extent[2]) as isize,
            ]
        };
        let mut rel = Vec::with_capacity(l * l);
        for i in 0..l {
            let a = coord(i);
            for j in 0..l {
                let b = coord(j);
                let mut o = 0usize;
                for ax in 0..3 {
                    let c = self.clip[ax] as isize;
                    let dlt = (a[ax] - b[ax]).clamp(-c, c);
                    o = o * (2 * self.clip[ax] + 1) + (dlt + c) as usize;
                }
                rel.push(o);
            }
        }
        let mut idx = Vec::with_capacity(self.heads * l * l);
        for h in 0..self.heads {
            idx.extend(rel.iter().map(|&o| (h * n_off + o) as u32));
        }
        idx.into()
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, extent: [usize; 3]) -> Var {
        let l: usize = extent.iter().product();
        let t = tape.param(self.table);
        tape.gather(t, self.index(extent), &[self.heads, l, l])
    }
}

fn qk_prep<T: Real>(
    tape: &mut Tape<'_, T>,
    q: Var,
    k: Var,
    temps: Option<ParamId>,
    heads: usize,
    d: usize,
) -> (Var, Var, T) {
    match temps {
        Some(id) => {
            let t = tape.param(id);
            let qn = tape.head_l2_norm(q, heads);
            let qn = tape.head_scale(qn, t, heads);
            (qn, tape.head_l2_norm(k, heads), T::one())
        }
        None => (q, k, T::one() / T::of((d / heads) as f64).sqrt()),
    }
}

fn temperature<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    heads: usize,
    d: usize,
    qk_norm: bool,
    _rng: &mut R,
) -> Option<ParamId> {
    qk_norm.then(|| {
        let init = T::of(Float::sqrt((d / heads) as f64));
        store.add(
            alloc::format!("{name}.qk_temp"),
            Tensor::full(&[heads], init),
        )
    })
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub temps: Option<ParamId>,
    pub heads: usize,
    pub d: usize,
}

impl SelfAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        qk_norm: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            qkv: Linear::new(
                store,
                &alloc::format!("{name}.qkv"),
                d,
                3 * d,
                true,
                Init::FanIn,
                rng,
            ),
            proj: Linear::new(
                store,
                &alloc::format!("{name}.proj"),
                d,
                d,
                true,
                Init::FanIn,
                rng,
            ),
            temps: temperature(store, name, heads, d, qk_norm, rng),
            heads,
            d,
        }
    }

    /// `h`: `[B, N, d]` grid tokens. Image stacks get the identity mask in
    /// temporal windows.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        h: Var,
        grid: [usize; 3],
        win: &WindowConfig,
        latent: LatentKind,
        bias: Option<Var>,
    ) -> Result<Var> {
        win.validate(grid)?;
        let b = tape.shape(h)[0];
        let d = self.d;
        let l = win.window_len();
        let nw = b * win.num_windows(grid);
        let qkv = self.qkv.forward(tape, h);
        let q = tape.gather(
            qkv,
            windowed_cols(b, grid, win.extent, 3 * d, 0, d),
            &[nw, l, d],
        );
        let k = tape.gather(
            qkv,
            windowed_cols(b, grid, win.extent, 3 * d, d, d),
            &[nw, l, d],
        );
        let v = tape.gather(
            qkv,
            windowed_cols(b, grid, win.extent, 3 * d, 2 * d, d),
            &[nw, l, d],
        );
        let (q, k, scale) = qk_prep(tape, q, k, self.temps, self.heads, d);
        let mask = self_mask(win.kind, latent, l);
        let o = tape.attention(q, k, v, bias, mask, self.heads, scale)?;
        let back = layout::invert(&windowed_cols(b, grid, win.extent, d, 0, d));
        let n: usize = grid.iter().product();
        let o = tape.gather(o, back, &[b, n, d]);
        Ok(self.proj.forward(tape, o))
    }

    /// The per-token value path `proj(v(h))` that identity-masked attention
    /// reduces to.
    pub fn value_path<T: Real>(&self, tape: &mut Tape<'_, T>, h: Var) -> Var {
        let s = tape.shape(h).to_vec();
        let rows = s[0] * s[1];
        let d = self.d;
        let qkv = self.qkv.forward(tape, h);
        let idx: Vec<u32> = (0..rows)
            .flat_map(|r| (r * 3 * d + 2 * d..r * 3 * d + 3 * d).map(|x| x as u32))
            .collect();
        let v = tape.gather(qkv, idx.into(), &s);
        self.proj.forward(tape, v)
    }

    pub fn window_kind_uses_mask(kind: WindowKind) -> bool {
        kind != WindowKind::Spatial
    }
}

/// Cross-attention whose keys/values are the window's own tokens followed by
/// the conditioning tokens.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q: Linear,
    pub kv: Linear,
    pub proj: Linear,
    pub temps: Option<ParamId>,
    pub heads: usize,
    pub d: usize,
}

impl CrossAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        qk_norm: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(
                store,
                &alloc::format!("{name}.q"),
                d,
                d,
                true,
                Init::FanIn,
                rng,
            ),
            kv: Linear::new(
                store,
                &alloc::format!("{name}.kv"),
                d,
                2 * d,
                true,
                Init::FanIn,
                rng,
            ),
            proj: Linear::new(
                store,
                &alloc::format!("{name}.proj"),
                d,
                d,
                true,
                Init::FanIn,
                rng,
            ),
            temps: temperature(store, name, heads, d, qk_norm, rng),
            heads,
            d,
        }
    }

    /// `h`: `[B, N, d]`, `cond`: `[B, Lc, d]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        h: Var,
        cond: Var,
        grid: [usize; 3],
        win: &WindowConfig,
        latent: LatentKind,
    ) -> Result<Var> {
        win.validate(grid)?;
        let cs = tape.shape(cond).to_vec();
        if cs.len() != 3 || cs[1] == 0 {
            return Err(Error::Empty("conditioning sequence"));
        }
        if cs[2] != self.d {
            return Err(Error::Channels {
                expected: self.d,
                got: cs[2],
            });
        }
        let b = tape.shape(h)[0];
        let (d, lc) = (self.d, cs[1]);
        let l = win.window_len();
        let per = win.num_windows(grid);
        let nw = b * per;
        let qh = self.q.forward(tape, h);
        let q = tape.gather(qh, windowed_cols(b, grid, win.extent, d, 0, d), &[nw, l, d]);
        let kvh = self.kv.forward(tape, h);
        let kvc = self.kv.forward(tape, cond);
        let ks = tape.gather(
            kvh,
            windowed_cols(b, grid, win.extent, 2 * d, 0, d),
            &[nw, l, d],
        );
        let vs = tape.gather(
            kvh,
            windowed_cols(b, grid, win.extent, 2 * d, d, d),
            &[nw, l, d],
        );
        let kc = tape.gather(kvc, cond_per_window(b, per, lc, 2 * d, 0, d), &[nw, lc, d]);
        let vc = tape.gather(kvc, cond_per_window(b, per, lc, 2 * d, d, d), &[nw, lc, d]);
        let k = tape.concat(&[ks, kc], 1);
        let v = tape.concat(&[vs, vc], 1);
        let (q, k, scale) = qk_prep(tape, q, k, self.temps, self.heads, d);
        let mask = self_mask(win.kind, latent, l).map(|_| identity_mask(l, lc));
        let o = tape.attention(q, k, v, None, mask, self.heads, scale)?;
        let back = layout::invert(&windowed_cols(b, grid, win.extent, d, 0, d));
        let n: usize = grid.iter().product();
        let o = tape.gather(o, back, &[b, n, d]);
        Ok(self.proj.forward(tape, o))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::window::{block_diagonal_mask, window_partition, window_reverse};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                T::of(<StandardNormal as Distribution<f64>>::sample(
                    &StandardNormal,
                    rng,
                ))
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Dense single-head-at-a-time attention written out directly.
    fn dense_oracle(
        q: &[f64],
        k: &[f64],
        v: &[f64],
        lq: usize,
        lk: usize,
        d: usize,
        heads: usize,
        mask: Option<&[bool]>,
    ) -> Vec<f64> {
        let dh = d / heads;
        let mut out = alloc::vec![0.0; lq * d];
        for h in 0..heads {
            for i in 0..lq {
                let mut s: Vec<f64> = (0..lk)
                    .map(|j| {
                        if mask.is_none_or(|m| m[i * lk + j]) {
                            (0..dh)
                                .map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c])
                                .sum::<f64>()
                                / (dh as f64).sqrt()
                        } else {
                            f64::NEG_INFINITY
                        }
                    })
                    .collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s
                    .iter_mut()
                    .map(|x| {
                        *x = (*x - mx).exp();
                        *x
                    })
                    .sum();
                for j in 0..lk {
                    for c in 0..dh {
                        out[i * d + h * dh + c] += s[j] / z * v[j * d + h * dh + c];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn single_token_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = randn::<f64>(&[1, 8], &mut rng);
        let k = randn::<f64>(&[1, 8], &mut rng);
        let v = randn::<f64>(&[1, 8], &mut rng);
        let out = attention(&q, &k, &v, &AttentionOptions::heads(2)).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn identity_mask_passes_values_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k, v) = (
            randn::<f32>(&[6, 8], &mut rng),
            randn::<f32>(&[6, 8], &mut rng),
            randn::<f32>(&[6, 8], &mut rng),
        );
        let mask = identity_mask(6, 0);
        let temps = [3.0f32, 0.5];
        for qk in [None, Some(&temps[..])] {
            let opts = AttentionOptions {
                heads: 2,
                mask: Some(&mask),
                bias: None,
                qk_temperature: qk,
            };
            assert_eq!(attention(&q, &k, &v, &opts).unwrap().data(), v.data());
        }
    }

    #[test]
    fn all_masked_row_is_an_error() {
        let t = Tensor::<f64>::zeros(&[2, 4]);
        let mask = [true, false, false, false];
        let opts = AttentionOptions {
            mask: Some(&mask),
            ..AttentionOptions::heads(1)
        };
        assert!(matches!(
            attention(&t, &t, &t, &opts),
            Err(Error::AllMasked { row: 1 })
        ));
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, k, v) = (
            randn::<f64>(&[5, 8], &mut rng),
            randn::<f64>(&[7, 8], &mut rng),
            randn::<f64>(&[7, 8], &mut rng),
        );
        let out = attention(&q, &k, &v, &AttentionOptions::heads(2)).unwrap();
        let want = dense_oracle(q.data(), k.data(), v.data(), 5, 7, 8, 2, None);
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn windowed_equals_block_diagonal_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = [5, 4, 4];
        let n = 80;
        let (q, k, v) = (
            randn::<f32>(&[n, 8], &mut rng),
            randn::<f32>(&[n, 8], &mut rng),
            randn::<f32>(&[n, 8], &mut rng),
        );
        for win in [
            WindowConfig::spatiotemporal(grid, 2, 2),
            WindowConfig::spatial(grid),
            WindowConfig::full(grid),
        ] {
            let qs = window_partition(&q, grid, &win).unwrap();
            let ks = window_partition(&k, grid, &win).unwrap();
            let vs = window_partition(&v, grid, &win).unwrap();
            let outs: Vec<_> = (0..qs.len())
                .map(|i| attention(&qs[i], &ks[i], &vs[i], &AttentionOptions::heads(2)).unwrap())
                .collect();
            let windowed = window_reverse(&outs, &win, grid).unwrap();
            let mask = block_diagonal_mask(grid, &win);
            let opts = AttentionOptions {
                mask: Some(&mask),
                ..AttentionOptions::heads(2)
            };
            let dense = attention(&q, &k, &v, &opts).unwrap();
            assert!(windowed.max_abs_diff(&dense) < 1e-5, "{:?}", win.kind);
        }
    }

    #[test]
    fn qk_norm_ignores_query_and_key_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q, k, v) = (
            randn::<f64>(&[4, 8], &mut rng),
            randn::<f64>(&[6, 8], &mut rng),
            randn::<f64>(&[6, 8], &mut rng),
        );
        let temps = [2.0, 2.0];
        let opts = AttentionOptions {
            qk_temperature: Some(&temps),
            ..AttentionOptions::heads(2)
        };
        let a = attention(&q, &k, &v, &opts).unwrap();
        let b = attention(&q.scale(7.0), &k.scale(0.1), &v, &opts).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    fn layer_setup(qk_norm: bool) -> (ParamStore<f64>, SelfAttention, CrossAttention) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::new();
        let sa = SelfAttention::new(&mut s, "sa", 8, 2, qk_norm, &mut rng);
        let ca = CrossAttention::new(&mut s, "ca", 8, 2, qk_norm, &mut rng);
        for id in s.ids().collect::<Vec<_>>() {
            let shape = s.get(id).shape().to_vec();
            s.set(id, randn(&shape, &mut rng).scale(0.4)).unwrap();
        }
        (s, sa, ca)
    }

    fn lin(s: &ParamStore<f64>, l: &Linear, x: &[f64]) -> Vec<f64> {
        let w = s.get(l.w).data();
        let b = s.get(l.b.unwrap()).data();
        let n = x.len() / l.d_in;
        let mut out = crate::tensor::matmul(x, w, n, l.d_in, l.d_out);
        for r in out.chunks_mut(l.d_out) {
            for (o, bb) in r.iter_mut().zip(b) {
                *o += bb;
            }
        }
        out
    }

    fn cols(x: &[f64], width: usize, off: usize, d: usize) -> Vec<f64> {
        x.chunks(width)
            .flat_map(|r| r[off..off + d].to_vec())
            .collect()
    }

    #[test]
    fn self_attention_layer_matches_dense_masked_oracle() {
        let (s, sa, _) = layer_setup(false);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let grid = [3, 4, 4];
        let win = WindowConfig::spatiotemporal(grid, 2, 2);
        let h = randn::<f64>(&[2, 48, 8], &mut rng);
        let mut tape = Tape::inference(&s);
        let hv = tape.constant(h.clone());
        let out = sa
            .forward(&mut tape, hv, grid, &win, LatentKind::Video, None)
            .unwrap();
        let got = tape.value(out).clone();
        let mask = block_diagonal_mask(grid, &win);
        for b in 0..2 {
            let x = &h.data()[b * 48 * 8..(b + 1) * 48 * 8];
            let qkv = lin(&s, &sa.qkv, x);
            let o = dense_oracle(
                &cols(&qkv, 24, 0, 8),
                &cols(&qkv, 24, 8, 8),
                &cols(&qkv, 24, 16, 8),
                48,
                48,
                8,
                2,
                Some(&mask),
            );
            let want = lin(&s, &sa.proj, &o);
            for (a, w) in got.data()[b * 384..(b + 1) * 384].iter().zip(&want) {
                assert!((a - w).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn image_stack_self_attention_is_value_path() {
        let (s, sa, _) = layer_setup(true);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let grid = [3, 2, 2];
        let h = randn::<f64>(&[1, 12, 8], &mut rng);
        let mut tape = Tape::inference(&s);
        let hv = tape.constant(h);
        let win = WindowConfig::spatiotemporal(grid, 2, 2);
        let a = sa
            .forward(&mut tape, hv, grid, &win, LatentKind::ImageStack, None)
            .unwrap();
        let b = sa.value_path(&mut tape, hv);
        assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-12);
        let c = sa
            .forward(&mut tape, hv, grid, &win, LatentKind::Video, None)
            .unwrap();
        assert!(tape.value(a).max_abs_diff(tape.value(c)) > 1e-3);
    }

    #[test]
    fn cross_attention_with_copied_tokens_doubles_keys() {
        let (s, _, ca) = layer_setup(false);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let grid = [1, 2, 2];
        let h = randn::<f64>(&[1, 4, 8], &mut rng);
        let mut tape = Tape::inference(&s);
        let hv = tape.constant(h.clone());
        let out = ca
            .forward(
                &mut tape,
                hv,
                hv,
                grid,
                &WindowConfig::full(grid),
                LatentKind::Video,
            )
            .unwrap();
        let x = h.data();
        let q = lin(&s, &ca.q, x);
        let kv = lin(&s, &ca.kv, x);
        let mut k = cols(&kv, 16, 0, 8);
        k.extend(cols(&kv, 16, 0, 8));
        let mut v = cols(&kv, 16, 8, 8);
        v.extend(cols(&kv, 16, 8, 8));
        let want = lin(&s, &ca.proj, &dense_oracle(&q, &k, &v, 4, 8, 8, 2, None));
        for (a, w) in tape.value(out).data().iter().zip(&want) {
            assert!((a - w).abs() < 1e-10);
        }
    }

    #[test]
    fn single_query_single_condition_is_convex_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = randn::<f64>(&[1, 4], &mut rng);
        let k = randn::<f64>(&[2, 4], &mut rng);
        let v = randn::<f64>(&[2, 4], &mut rng);
        let out = attention(&q, &k, &v, &AttentionOptions::heads(1)).unwrap();
        let s0: f64 = (0..4).map(|c| q.data()[c] * k.data()[c]).sum::<f64>() / 2.0;
        let s1: f64 = (0..4).map(|c| q.data()[c] * k.data()[4 + c]).sum::<f64>() / 2.0;
        let w0 = 1.0 / (1.0 + (s1 - s0).exp());
        for c in 0..4 {
            let want = w0 * v.data()[c] + (1.0 - w0) * v.data()[4 + c];
            assert!((out.data()[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_conditioning_is_rejected() {
        let (s, _, ca) = layer_setup(false);
        let mut tape = Tape::inference(&s);
        let h = tape.constant(Tensor::zeros(&[1, 4, 8]));
        let c = tape.constant(Tensor::zeros(&[1, 0, 8]));
        let grid = [1, 2, 2];
        assert!(matches!(
            ca.forward(
                &mut tape,
                h,
                c,
                grid,
                &WindowConfig::full(grid),
                LatentKind::Video
            ),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn relpos_offsets_are_clipped_and_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut s = ParamStore::<f64>::new();
        let rp = RelPosBias::new(&mut s, "rp", 2, [1, 1, 1], &mut rng);
        assert_eq!(RelPosBias::num_offsets([1, 1, 1]), 27);
        let ext = [1, 3, 3];
        let idx = rp.index(ext);
        let l = 9;
        // (0,0)->(0,1) and (1,1)->(1,2) share an offset; (0,0)->(0,2) clips onto it.
        assert_eq!(idx[1], idx[4 * l + 5]);
        assert_eq!(idx[1], idx[2]);
        assert_ne!(idx[1], idx[3]);
        assert!(idx[l * l..].iter().all(|&i| i >= 27));
    }

    #[test]
    fn permuting_a_window_permutes_the_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l = 6;
        let (q, k, v) = (
            randn::<f64>(&[l, 8], &mut rng),
            randn::<f64>(&[l, 8], &mut rng),
            randn::<f64>(&[l, 8], &mut rng),
        );
        let bias = randn::<f64>(&[2, l, l], &mut rng);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let rows = |t: &Tensor<f64>| {
            Tensor::from_vec(
                &[l, 8],
                perm.iter()
                    .flat_map(|&p| t.data()[p * 8..(p + 1) * 8].to_vec())
                    .collect(),
            )
            .unwrap()
        };
        let mut pb = alloc::vec![0.0; 2 * l * l];
        for h in 0..2 {
            for i in 0..l {
                for j in 0..l {
                    pb[(h * l + i) * l + j] = bias.data()[(h * l + perm[i]) * l + perm[j]];
                }
            }
        }
        let pb = Tensor::from_vec(&[2, l, l], pb).unwrap();
        let a = attention(
            &q,
            &k,
            &v,
            &AttentionOptions {
                bias: Some(&bias),
                ..AttentionOptions::heads(2)
            },
        )
        .unwrap();
        let b = attention(
            &rows(&q),
            &rows(&k),
            &rows(&v),
            &AttentionOptions {
                bias: Some(&pb),
                ..AttentionOptions::heads(2)
            },
        )
        .unwrap();
        assert!(rows(&a).max_abs_diff(&b) < 1e-12);
    }
}
