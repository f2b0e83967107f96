//! Multi-head scaled dot-product attention kernels, batched over windows.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{gemm, Mat};

#[derive(Clone, Debug)]
pub struct AttnShape {
    pub windows: usize,
    pub lq: usize,
    pub lk: usize,
    pub width: usize,
    pub heads: usize,
    /// `[lq, lk]`, `true` where attention is allowed.
    pub mask: Option<Rc<[bool]>>,
}

impl AttnShape {
    fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Shape(alloc::format!(
                "width {} not divisible into {} heads",
                self.width,
                self.heads
            )));
        }
        if let Some(m) = &self.mask {
            if m.len() != self.lq * self.lk {
                return Err(Error::Shape(alloc::format!(
                    "mask has {} entries, expected {}x{}",
                    m.len(),
                    self.lq,
                    self.lk
                )));
            }
            for (row, r) in m.chunks(self.lk).enumerate() {
                if !r.iter().any(|&b| b) {
                    return Err(Error::AllMasked { row });
                }
            }
        }
        Ok(())
    }
}

/// Returns `(output, probabilities)`; probabilities are laid out as
/// `[windows, heads, lq, lk]`.
pub fn attention_forward<T: Real>(
    s: &AttnShape,
    q: &[T],
    k: &[T],
    v: &[T],
    bias: Option<&[T]>,
    scale: T,
) -> Result<(Vec<T>, Vec<T>)> {
    s.validate()?;
    let (d, dh, lq, lk) = (s.width, s.head_dim(), s.lq, s.lk);
    let mut out = vec![T::zero(); s.windows * lq * d];
    let mut probs = vec![T::zero(); s.windows * s.heads * lq * lk];
    for w in 0..s.windows {
        for h in 0..s.heads {
            let qv = Mat::strided(w * lq * d + h * dh, lq, dh, d);
            let kv = Mat::strided(w * lk * d + h * dh, lk, dh, d);
            let pv = Mat::dense((w * s.heads + h) * lq * lk, lq, lk);
            gemm(scale, q, qv, k, kv.t(), T::zero(), &mut probs, pv);
            let p = &mut probs[pv.off..pv.off + lq * lk];
            if let Some(b) = bias {
                for (x, &bb) in p.iter_mut().zip(&b[h * lq * lk..(h + 1) * lq * lk]) {
                    *x += bb;
                }
            }
            softmax_rows(p, lk, s.mask.as_deref());
            let vv = Mat::strided(w * lk * d + h * dh, lk, dh, d);
            let ov = Mat::strided(w * lq * d + h * dh, lq, dh, d);
            gemm(T::one(), &probs, pv, v, vv, T::zero(), &mut out, ov);
        }
    }
    Ok((out, probs))
}

fn softmax_rows<T: Real>(p: &mut [T], lk: usize, mask: Option<&[bool]>) {
    for (r, row) in p.chunks_mut(lk).enumerate() {
        let allowed = |j: usize| mask.is_none_or(|m| m[r * lk + j]);
        let mut mx = T::neg_infinity();
        for (j, &x) in row.iter().enumerate() {
            if allowed(j) && x > mx {
                mx = x;
            }
        }
        let mut sum = T::zero();
        for (j, x) in row.iter_mut().enumerate() {
            if allowed(j) {
                *x = (*x - mx).exp();
                sum += *x;
            } else {
                *x = T::zero();
            }
        }
        let inv = T::one() / sum;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    s: &AttnShape,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    scale: T,
    g: &[T],
    mut gq: Option<&mut [T]>,
    mut gk: Option<&mut [T]>,
    mut gv: Option<&mut [T]>,
    mut gbias: Option<&mut [T]>,
) {
    let (d, dh, lq, lk) = (s.width, s.head_dim(), s.lq, s.lk);
    let mut dp = vec![T::zero(); lq * lk];
    let need_scores = gq.is_some() || gk.is_some() || gbias.is_some();
    for w in 0..s.windows {
        for h in 0..s.heads {
            let pv = Mat::dense((w * s.heads + h) * lq * lk, lq, lk);
            let ov = Mat::strided(w * lq * d + h * dh, lq, dh, d);
            let kv = Mat::strided(w * lk * d + h * dh, lk, dh, d);
            if let Some(gv) = gv.as_deref_mut() {
                gemm(T::one(), probs, pv.t(), g, ov, T::one(), gv, kv);
            }
            if !need_scores {
                continue;
            }
            gemm(
                T::one(),
                g,
                ov,
                v,
                kv.t(),
                T::zero(),
                &mut dp,
                Mat::dense(0, lq, lk),
            );
            let p = &probs[pv.off..pv.off + lq * lk];
            for (prow, drow) in p.chunks(lk).zip(dp.chunks_mut(lk)) {
                let dot = prow
                    .iter()
                    .zip(drow.iter())
                    .map(|(&a, &b)| a * b)
                    .sum::<T>();
                for (dv, &pv) in drow.iter_mut().zip(prow) {
                    *dv = pv * (*dv - dot);
                }
            }
            if let Some(gb) = gbias.as_deref_mut() {
                for (o, &x) in gb[h * lq * lk..(h + 1) * lq * lk].iter_mut().zip(&dp) {
                    *o += x;
                }
            }
            let qv = Mat::strided(w * lq * d + h * dh, lq, dh, d);
            if let Some(gq) = gq.as_deref_mut() {
                gemm(scale, &dp, Mat::dense(0, lq, lk), k, kv, T::one(), gq, qv);
            }
            if let Some(gk) = gk.as_deref_mut() {
                gemm(
                    scale,
                    &dp,
                    Mat::dense(0, lq, lk).t(),
                    q,
                    qv,
                    T::one(),
                    gk,
                    kv,
                );
            }
        }
    }
}
