//! Non-overlapping 3-D windows over a `(t, h_p, w_p)` token grid.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::codec::LatentKind;
use crate::error::{Error, Result};
use crate::layout;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WindowKind {
    /// One latent frame at a time.
    Spatial,
    /// All latent frames, a spatial sub-tile.
    Spatiotemporal,
    /// The whole grid.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowConfig {
    pub kind: WindowKind,
    /// `(w_t, w_h, w_w)` in grid cells.
    pub extent: [usize; 3],
}

impl WindowConfig {
    pub fn spatial(grid: [usize; 3]) -> Self {
        Self {
            kind: WindowKind::Spatial,
            extent: [1, grid[1], grid[2]],
        }
    }

    pub fn spatiotemporal(grid: [usize; 3], wh: usize, ww: usize) -> Self {
        Self {
            kind: WindowKind::Spatiotemporal,
            extent: [grid[0], wh, ww],
        }
    }

    pub fn full(grid: [usize; 3]) -> Self {
        Self {
            kind: WindowKind::Full,
            extent: grid,
        }
    }

    pub fn validate(&self, grid: [usize; 3]) -> Result<()> {
        let [wt, wh, ww] = self.extent;
        let ok = match self.kind {
            WindowKind::Spatial => wt == 1 && wh == grid[1] && ww == grid[2],
            WindowKind::Spatiotemporal => wt == grid[0],
            WindowKind::Full => self.extent == grid,
        };
        if !ok {
            return Err(Error::Config(alloc::format!(
                "{:?} window {:?} inconsistent with grid {:?}",
                self.kind,
                self.extent,
                grid
            )));
        }
        for (axis, (&g, &w)) in ["time", "height", "width"]
            .into_iter()
            .zip(grid.iter().zip(&self.extent))
        {
            if w == 0 || g % w != 0 {
                return Err(Error::Divisibility {
                    axis,
                    size: g,
                    factor: w,
                });
            }
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        self.extent.iter().product()
    }

    pub fn num_windows(&self, grid: [usize; 3]) -> usize {
        (0..3).map(|i| grid[i] / self.extent[i]).product()
    }
}

/// Splits `[N, d]` grid tokens into windows of `[L, d]`, raster order.
pub fn window_partition<T: Real>(
    tokens: &Tensor<T>,
    grid: [usize; 3],
    win: &WindowConfig,
) -> Result<Vec<Tensor<T>>> {
    win.validate(grid)?;
    let d = tokens.last_dim();
    let n: usize = grid.iter().product();
    if tokens.numel() != n * d {
        return Err(Error::Shape(alloc::format!(
            "{} values do not fill grid {:?} of width {d}",
            tokens.numel(),
            grid
        )));
    }
    let idx = layout::window_index(1, grid, win.extent, d);
    let data = layout::apply(tokens.data(), &idx);
    let l = win.window_len();
    data.chunks(l * d)
        .map(|c| Tensor::from_vec(&[l, d], c.to_vec()))
        .collect()
}

/// Inverse of [`window_partition`]: returns grid tokens `[N, d]`.
pub fn window_reverse<T: Real>(
    windows: &[Tensor<T>],
    win: &WindowConfig,
    grid: [usize; 3],
) -> Result<Tensor<T>> {
    win.validate(grid)?;
    if windows.len() != win.num_windows(grid) {
        return Err(Error::Shape(alloc::format!(
            "expected {} windows, got {}",
            win.num_windows(grid),
            windows.len()
        )));
    }
    let l = win.window_len();
    let d = windows.first().map(|w| w.last_dim()).unwrap_or(0);
    let mut flat = Vec::with_capacity(windows.len() * l * d);
    for w in windows {
        if w.shape() != [l, d] {
            return Err(Error::Shape(alloc::format!(
                "window shape {:?}, expected [{l}, {d}]",
                w.shape()
            )));
        }
        flat.extend_from_slice(w.data());
    }
    let inv = layout::invert(&layout::window_index(1, grid, win.extent, d));
    Tensor::from_vec(&[grid.iter().product(), d], layout::apply(&flat, &inv))
}

/// Self-attention mask for one window: identity (each token sees only
/// itself) for image stacks in temporal windows, otherwise unmasked.
pub fn self_mask(kind: WindowKind, latent: LatentKind, len: usize) -> Option<Rc<[bool]>> {
    if kind == WindowKind::Spatial || latent == LatentKind::Video {
        return None;
    }
    Some(identity_mask(len, 0))
}

/// `[len, len + extra]`: identity over the first `len` keys, the trailing
/// `extra` keys always visible.
pub fn identity_mask(len: usize, extra: usize) -> Rc<[bool]> {
    let lk = len + extra;
    let mut m = vec![false; len * lk];
    for i in 0..len {
        m[i * lk + i] = true;
        for j in len..lk {
            m[i * lk + j] = true;
        }
    }
    m.into()
}

/// Block-diagonal dense mask over the whole grid equivalent to `win`.
pub fn block_diagonal_mask(grid: [usize; 3], win: &WindowConfig) -> Vec<bool> {
    let [_, hp, wp] = grid;
    let n: usize = grid.iter().product();
    let win_of = |i: usize| {
        let (t, y, x) = (i / (hp * wp), (i / wp) % hp, i % wp);
        (t / win.extent[0], y / win.extent[1], x / win.extent[2])
    };
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = win_of(i) == win_of(j);
        }
    }
    m
}
