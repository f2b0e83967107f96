use alloc::rc::Rc;
use alloc::vec::Vec;

use super::{LatentKind, LatentTensor};
use crate::error::{Error, Result};
use crate::layout;
use crate::scalar::Real;
use crate::tensor::{matmul, Tensor};

/// Affine map `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> LinearMap<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 2 || bias.numel() != s[1] {
            return Err(Error::Shape(alloc::format!(
                "linear map needs [in, out] weight and [out] bias, got {:?} and {:?}",
                s,
                bias.shape()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn identity(n: usize) -> Self {
        let mut w = Tensor::zeros(&[n, n]);
        for i in 0..n {
            w.data_mut()[i * n + i] = T::one();
        }
        Self {
            weight: w,
            bias: Tensor::zeros(&[n]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Applies the map to every row of `[N, in]` data.
    pub fn apply(&self, rows: &[T]) -> Result<Vec<T>> {
        let (di, d_out) = (self.d_in(), self.d_out());
        if !rows.len().is_multiple_of(di) {
            return Err(Error::Channels {
                expected: di,
                got: rows.len(),
            });
        }
        let n = rows.len() / di;
        let mut out = matmul(rows, self.weight.data(), n, di, d_out);
        for row in out.chunks_mut(d_out) {
            for (o, &b) in row.iter_mut().zip(self.bias.data()) {
                *o += b;
            }
        }
        Ok(out)
    }
}

/// Latents cut into non-overlapping `p×p` patches per frame and projected to
/// `d_model`-wide tokens, stored in `(t, i, j)` raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<T: Real> {
    pub t_len: usize,
    pub h_p: usize,
    pub w_p: usize,
    pub patch: usize,
    pub kind: LatentKind,
    /// `[t_len · h_p · w_p, d_model]`
    pub tokens: Tensor<T>,
}

impl<T: Real> TokenGrid<T> {
    pub fn d_model(&self) -> usize {
        self.tokens.last_dim()
    }

    pub fn num_tokens(&self) -> usize {
        self.t_len * self.h_p * self.w_p
    }

    pub fn grid(&self) -> [usize; 3] {
        [self.t_len, self.h_p, self.w_p]
    }
}

pub fn patchify<T: Real>(
    z: &LatentTensor<T>,
    p: usize,
    proj: &LinearMap<T>,
) -> Result<TokenGrid<T>> {
    let [f, h, w, c] = z.dims();
    if p == 0 || h % p != 0 {
        return Err(Error::Divisibility {
            axis: "latent height",
            size: h,
            factor: p,
        });
    }
    if w % p != 0 {
        return Err(Error::Divisibility {
            axis: "latent width",
            size: w,
            factor: p,
        });
    }
    if proj.d_in() != p * p * c {
        return Err(Error::Channels {
            expected: p * p * c,
            got: proj.d_in(),
        });
    }
    let idx = layout::patchify_index(1, f, h, w, c, p);
    let patches = layout::apply(z.tensor.data(), &idx);
    let tokens = proj.apply(&patches)?;
    let n = f * (h / p) * (w / p);
    Ok(TokenGrid {
        t_len: f,
        h_p: h / p,
        w_p: w / p,
        patch: p,
        kind: z.kind,
        tokens: Tensor::from_vec(&[n, proj.d_out()], tokens)?,
    })
}

/// Projects tokens back to `p·p·c` features and reassembles the latent.
pub fn unpatchify<T: Real>(g: &TokenGrid<T>, proj_out: &LinearMap<T>) -> Result<LatentTensor<T>> {
    let rows = g.tokens.numel() / g.d_model().max(1);
    if g.tokens.shape().len() != 2 || rows != g.num_tokens() {
        return Err(Error::Shape(alloc::format!(
            "{} tokens do not fill a {}x{}x{} grid",
            rows,
            g.t_len,
            g.h_p,
            g.w_p
        )));
    }
    if proj_out.d_in() != g.d_model() {
        return Err(Error::Channels {
            expected: g.d_model(),
            got: proj_out.d_in(),
        });
    }
    let pp = g.patch * g.patch;
    if !proj_out.d_out().is_multiple_of(pp) {
        return Err(Error::Divisibility {
            axis: "output features",
            size: proj_out.d_out(),
            factor: pp,
        });
    }
    let c = proj_out.d_out() / pp;
    let feats = proj_out.apply(g.tokens.data())?;
    let (h, w) = (g.h_p * g.patch, g.w_p * g.patch);
    let inv = layout::unpatchify_index(1, g.t_len, h, w, c, g.patch);
    let data = layout::apply(&feats, &inv);
    let mut z = LatentTensor::new(Tensor::from_vec(&[g.t_len, h, w, c], data)?, g.kind)?;
    z.normalized = false;
    Ok(z)
}

/// Index maps that broadcast a space table `[h_p·w_p, d]` and a time table
/// `[max_t, d]` onto every token element. Image stacks use time row 0 for
/// all frames.
pub fn position_index(
    grid: [usize; 3],
    d: usize,
    kind: LatentKind,
    space_rows: usize,
    time_rows: usize,
) -> Result<(Rc<[u32]>, Rc<[u32]>)> {
    let [t_len, h_p, w_p] = grid;
    if space_rows < h_p * w_p {
        return Err(Error::Shape(alloc::format!(
            "space table has {space_rows} rows, grid needs {}",
            h_p * w_p
        )));
    }
    let needed_t = match kind {
        LatentKind::Video => t_len,
        LatentKind::ImageStack => 1,
    };
    if time_rows < needed_t {
        return Err(Error::Shape(alloc::format!(
            "time table has {time_rows} rows, grid needs {needed_t}"
        )));
    }
    let n = t_len * h_p * w_p * d;
    let mut sidx = Vec::with_capacity(n);
    let mut tidx = Vec::with_capacity(n);
    for t in 0..t_len {
        let trow = match kind {
            LatentKind::Video => t,
            LatentKind::ImageStack => 0,
        };
        for s in 0..h_p * w_p {
            sidx.extend((s * d..(s + 1) * d).map(|x| x as u32));
            tidx.extend((trow * d..(trow + 1) * d).map(|x| x as u32));
        }
    }
    Ok((sidx.into(), tidx.into()))
}

/// `token(τ, i, j) += space[i, j] + time[τ]`.
pub fn add_position_embeddings<T: Real>(
    g: &TokenGrid<T>,
    space: &Tensor<T>,
    time: &Tensor<T>,
) -> Result<TokenGrid<T>> {
    let d = g.d_model();
    if space.last_dim() != d || time.last_dim() != d {
        return Err(Error::Channels {
            expected: d,
            got: space.last_dim(),
        });
    }
    let (sidx, tidx) = position_index(g.grid(), d, g.kind, space.numel() / d, time.numel() / d)?;
    let mut out = g.clone();
    for ((o, &si), &ti) in out
        .tokens
        .data_mut()
        .iter_mut()
        .zip(sidx.iter())
        .zip(tidx.iter())
    {
        *o += space.data()[si as usize] + time.data()[ti as usize];
    }
    Ok(out)
}
