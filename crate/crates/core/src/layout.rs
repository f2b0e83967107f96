//! Index maps for the pure data-movement ops (patchify, windowing,
//! depth-to-space). Each map lists, for every output element, the flat
//! input element it copies; the tape's `gather` turns them into
//! differentiable rearrangements.

use alloc::rc::Rc;
use alloc::vec::Vec;

/// `[B, F, h, w, C]` → `[B, F·(h/p)·(w/p), p·p·C]`, tokens in `(t, i, j)`
/// order and features in `(dy, dx, c)` order.
pub fn patchify_index(b: usize, f: usize, h: usize, w: usize, c: usize, p: usize) -> Rc<[u32]> {
    let (hp, wp) = (h / p, w / p);
    let mut idx = Vec::with_capacity(b * f * h * w * c);
    for bi in 0..b {
        for t in 0..f {
            for i in 0..hp {
                for j in 0..wp {
                    for dy in 0..p {
                        for dx in 0..p {
                            let base = (((bi * f + t) * h + i * p + dy) * w + j * p + dx) * c;
                            idx.extend((base..base + c).map(|x| x as u32));
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

/// Inverse permutation of [`patchify_index`].
pub fn unpatchify_index(b: usize, f: usize, h: usize, w: usize, c: usize, p: usize) -> Rc<[u32]> {
    invert(&patchify_index(b, f, h, w, c, p))
}

/// Window extents `(wt, wh, ww)` over a token grid `(t, hp, wp)` of width
/// `d`: `[B, t·hp·wp, d]` → `[B·nW, wt·wh·ww, d]`, windows in raster order.
pub fn window_index(b: usize, grid: [usize; 3], win: [usize; 3], d: usize) -> Rc<[u32]> {
    let [t, hp, wp] = grid;
    let [wt, wh, ww] = win;
    let mut idx = Vec::with_capacity(b * t * hp * wp * d);
    for bi in 0..b {
        for ti in 0..t / wt {
            for hi in 0..hp / wh {
                for wi in 0..wp / ww {
                    for dt in 0..wt {
                        for dy in 0..wh {
                            for dx in 0..ww {
                                let tok = ((ti * wt + dt) * hp + hi * wh + dy) * wp + wi * ww + dx;
                                let base = (bi * t * hp * wp + tok) * d;
                                idx.extend((base..base + d).map(|x| x as u32));
                            }
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

/// Channels-last depth-to-space over time and space.
///
/// `[B, F, h, w, C·st·s·s]` with channel order `(dt, dy, dx, c)` becomes
/// `[B, 1 + (F-1)·st, h·s, w·s, C]`; the first `st - 1` expanded frames are
/// dropped so frame 0 still maps to exactly one output frame.
pub fn depth_to_space_index(
    b: usize,
    f: usize,
    h: usize,
    w: usize,
    c: usize,
    st: usize,
    s: usize,
) -> (Rc<[u32]>, [usize; 5]) {
    let fo = 1 + (f - 1) * st;
    let (ho, wo) = (h * s, w * s);
    let cin = c * st * s * s;
    let mut idx = Vec::with_capacity(b * fo * ho * wo * c);
    for bi in 0..b {
        for to in 0..fo {
            let full = to + st - 1;
            let (ti, dt) = (full / st, full % st);
            for yo in 0..ho {
                for xo in 0..wo {
                    let (yi, dy, xi, dx) = (yo / s, yo % s, xo / s, xo % s);
                    let base =
                        (((bi * f + ti) * h + yi) * w + xi) * cin + ((dt * s + dy) * s + dx) * c;
                    idx.extend((base..base + c).map(|x| x as u32));
                }
            }
        }
    }
    (idx.into(), [b, fo, ho, wo, c])
}

/// For a permutation index, the index that undoes it.
pub fn invert(idx: &[u32]) -> Rc<[u32]> {
    let mut inv = alloc::vec![0u32; idx.len()];
    for (o, &i) in idx.iter().enumerate() {
        inv[i as usize] = o as u32;
    }
    inv.into()
}

/// Applies an index map to plain data.
pub fn apply<T: Copy>(data: &[T], idx: &[u32]) -> Vec<T> {
    idx.iter().map(|&i| data[i as usize]).collect()
}
