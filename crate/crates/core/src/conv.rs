//! Temporally causal 3-D convolution over channels-last volumes.
//!
//! Input is `[B, F, H, W, Cin]`, weights are `[kt, kh, kw, Cin, Cout]`.
//! The temporal axis is padded with `kt - 1` zero frames on the past side
//! only, so output frame `i` never sees input frames after `i · st`.
//! Spatial axes use symmetric `(k - 1) / 2` zero padding.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{gemm, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub out_frames: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: [usize; 3],
        stride: [usize; 3],
        cout: usize,
    ) -> Result<Self> {
        let [batch, frames, height, width, cin] = <[usize; 5]>::try_from(input)
            .map_err(|_| Error::Shape(alloc::format!("conv input must be 5-D, got {input:?}")))?;
        if kernel.contains(&0) || stride.contains(&0) {
            return Err(Error::Config(alloc::format!(
                "kernel {kernel:?} and stride {stride:?} must be positive"
            )));
        }
        if kernel[1].is_multiple_of(2) || kernel[2].is_multiple_of(2) {
            return Err(Error::Config("spatial kernel sizes must be odd".into()));
        }
        if frames == 0 {
            return Err(Error::Empty("conv input has no frames"));
        }
        let out = |n: usize, k: usize, s: usize| (n + 2 * ((k - 1) / 2) - k) / s + 1;
        if height + 2 * ((kernel[1] - 1) / 2) < kernel[1]
            || width + 2 * ((kernel[2] - 1) / 2) < kernel[2]
        {
            return Err(Error::Shape("spatial extent smaller than kernel".into()));
        }
        Ok(Self {
            batch,
            frames,
            height,
            width,
            cin,
            cout,
            kernel,
            stride,
            out_frames: (frames - 1) / stride[0] + 1,
            out_height: out(height, kernel[1], stride[1]),
            out_width: out(width, kernel[2], stride[2]),
        })
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.frames * self.height * self.width * self.cin
    }

    pub fn weight_len(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.cin * self.cout
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.out_frames,
            self.out_height,
            self.out_width,
            self.cout,
        ]
    }

    fn positions(&self) -> usize {
        self.out_frames * self.out_height * self.out_width
    }

    fn patch_len(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.cin
    }

    fn pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1]
    }

    /// Source element offset (within one batch item) for every column cell,
    /// or `None` for padding. Visits cells in `[positions, patch_len]` order.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let c = self.cin;
        let k = self.patch_len();
        let mut row = 0;
        for ot in 0..self.out_frames {
            for oh in 0..self.out_height {
                for ow in 0..self.out_width {
                    for dt in 0..kt {
                        let it = (ot * st + dt) as isize - (kt as isize - 1);
                        if it < 0 {
                            continue;
                        }
                        for dh in 0..kh {
                            let ih = (oh * sh + dh) as isize - ph as isize;
                            if ih < 0 || ih >= self.height as isize {
                                continue;
                            }
                            for dw in 0..kw {
                                let iw = (ow * sw + dw) as isize - pw as isize;
                                if iw < 0 || iw >= self.width as isize {
                                    continue;
                                }
                                let src = ((it as usize * self.height + ih as usize) * self.width
                                    + iw as usize)
                                    * c;
                                let dst = row * k + ((dt * kh + dh) * kw + dw) * c;
                                f(src, dst, c);
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        cols.fill(T::zero());
        self.for_each_tap(|src, dst, c| cols[dst..dst + c].copy_from_slice(&x[src..src + c]));
    }

    fn col2im<T: Real>(&self, cols: &[T], gx: &mut [T]) {
        self.for_each_tap(|src, dst, c| {
            for (o, &v) in gx[src..src + c].iter_mut().zip(&cols[dst..dst + c]) {
                *o += v;
            }
        });
    }
}

pub fn conv3d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let (p, k, co) = (g.positions(), g.patch_len(), g.cout);
    let in_len = g.frames * g.height * g.width * g.cin;
    let mut out = vec![T::zero(); g.batch * p * co];
    for row in out.chunks_mut(co) {
        row.copy_from_slice(b);
    }
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); p * k]
    };
    for bi in 0..g.batch {
        let xb = &x[bi * in_len..(bi + 1) * in_len];
        let src: &[T] = if g.pointwise() {
            xb
        } else {
            g.im2col(xb, &mut cols);
            &cols
        };
        gemm(
            T::one(),
            src,
            Mat::dense(0, p, k),
            w,
            Mat::dense(0, k, co),
            T::one(),
            &mut out,
            Mat::dense(bi * p * co, p, co),
        );
    }
    out
}

pub fn conv3d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    grad: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let (p, k, co) = (g.positions(), g.patch_len(), g.cout);
    let in_len = g.frames * g.height * g.width * g.cin;
    if let Some(gb) = gb {
        for row in grad.chunks(co) {
            for (o, &v) in gb.iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); p * k]
    };
    let mut dcols = if g.pointwise() || gx.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); p * k]
    };
    for bi in 0..g.batch {
        let gview = Mat::dense(bi * p * co, p, co);
        if let Some(gw) = gw.as_deref_mut() {
            let xb = &x[bi * in_len..(bi + 1) * in_len];
            let src: &[T] = if g.pointwise() {
                xb
            } else {
                g.im2col(xb, &mut cols);
                &cols
            };
            gemm(
                T::one(),
                src,
                Mat::dense(0, p, k).t(),
                grad,
                gview,
                T::one(),
                gw,
                Mat::dense(0, k, co),
            );
        }
        if let Some(gx) = gx.as_deref_mut() {
            let gxb = &mut gx[bi * in_len..(bi + 1) * in_len];
            if g.pointwise() {
                gemm(
                    T::one(),
                    grad,
                    gview,
                    w,
                    Mat::dense(0, k, co).t(),
                    T::one(),
                    gxb,
                    Mat::dense(0, p, k),
                );
            } else {
                gemm(
                    T::one(),
                    grad,
                    gview,
                    w,
                    Mat::dense(0, k, co).t(),
                    T::zero(),
                    &mut dcols,
                    Mat::dense(0, p, k),
                );
                g.col2im(&dcols, gxb);
            }
        }
    }
}
