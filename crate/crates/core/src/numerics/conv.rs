//! 2-D cross-correlation over `[B, C, H, W]` batches.

use std::rc::Rc;

use super::tape::Var;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::shape("conv2d", input, kernel));
        }
        if input[1] != kernel[1] {
            return Err(Error::shape("conv2d", input, kernel));
        }
        let (kh, kw) = (kernel[2], kernel[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::contract(format!("conv2d kernel extents must be odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be positive"));
        }
        let extent = |n: usize, k: usize| -> Result<usize> {
            let span = (n + 2 * pad)
                .checked_sub(k)
                .ok_or_else(|| Error::contract(format!("conv2d kernel {k} exceeds padded extent {}", n + 2 * pad)))?;
            if span % stride != 0 {
                return Err(Error::contract(format!(
                    "conv2d output extent ({n} + 2*{pad} - {k})/{stride} + 1 is not integral"
                )));
            }
            Ok(span / stride + 1)
        };
        Ok(Self {
            batch: input[0],
            c_in: input[1],
            h: input[2],
            w: input[3],
            c_out: kernel[0],
            kh,
            kw,
            oh: extent(input[2], kh)?,
            ow: extent(input[3], kw)?,
            stride,
            pad,
        })
    }

    /// Output columns `[lo, hi)` whose input column `ox*stride + kx - pad` is in bounds.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        range_for(kx, self.pad, self.stride, self.w, self.ow)
    }

    fn row_range(&self, ky: usize) -> (usize, usize) {
        range_for(ky, self.pad, self.stride, self.h, self.oh)
    }
}

fn range_for(k: usize, pad: usize, stride: usize, n: usize, out: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < n
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if n + pad > k {
        ((n + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn forward<T: Real>(g: &Geometry, input: &[T], kernel: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.c_out * g.oh * g.ow];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let out_plane = &mut out[(b * g.c_out + co) * g.oh * g.ow..][..g.oh * g.ow];
            for ci in 0..g.c_in {
                let in_plane = &input[(b * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    let (y0, y1) = g.row_range(ky);
                    for kx in 0..g.kw {
                        let k = kernel[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                        let (x0, x1) = g.col_range(kx);
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let row = &in_plane[iy * g.w..][..g.w];
                            let orow = &mut out_plane[oy * g.ow..][..g.ow];
                            if g.stride == 1 {
                                let shift = kx as isize - g.pad as isize;
                                for ox in x0..x1 {
                                    orow[ox] += k * row[(ox as isize + shift) as usize];
                                }
                            } else {
                                for ox in x0..x1 {
                                    orow[ox] += k * row[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn backward_input<T: Real>(g: &Geometry, grad: &[T], kernel: &[T]) -> Vec<T> {
    let mut gi = vec![T::zero(); g.batch * g.c_in * g.h * g.w];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let gplane = &grad[(b * g.c_out + co) * g.oh * g.ow..][..g.oh * g.ow];
            for ci in 0..g.c_in {
                let iplane = &mut gi[(b * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    let (y0, y1) = g.row_range(ky);
                    for kx in 0..g.kw {
                        let k = kernel[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                        let (x0, x1) = g.col_range(kx);
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &gplane[oy * g.ow..][..g.ow];
                            let irow = &mut iplane[iy * g.w..][..g.w];
                            for ox in x0..x1 {
                                irow[ox * g.stride + kx - g.pad] += k * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    gi
}

fn backward_kernel<T: Real>(g: &Geometry, grad: &[T], input: &[T]) -> Vec<T> {
    let mut gk = vec![T::zero(); g.c_out * g.c_in * g.kh * g.kw];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let gplane = &grad[(b * g.c_out + co) * g.oh * g.ow..][..g.oh * g.ow];
            for ci in 0..g.c_in {
                let in_plane = &input[(b * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    let (y0, y1) = g.row_range(ky);
                    for kx in 0..g.kw {
                        let (x0, x1) = g.col_range(kx);
                        let mut acc = T::zero();
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &gplane[oy * g.ow..][..g.ow];
                            let irow = &in_plane[iy * g.w..][..g.w];
                            for ox in x0..x1 {
                                acc += grow[ox] * irow[ox * g.stride + kx - g.pad];
                            }
                        }
                        gk[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
    gk
}

impl<T: Real> Var<T> {
    /// Cross-correlation of `[B, C_in, H, W]` with `[C_out, C_in, kH, kW]`, zero padding.
    pub fn conv2d(&self, kernel: &Var<T>, stride: usize, padding: usize) -> Result<Var<T>> {
        let geo = Geometry::new(self.shape(), kernel.shape(), stride, padding)?;
        let out = forward(&geo, self.value().data(), kernel.value().data());
        let out = Tensor::new(&[geo.batch, geo.c_out, geo.oh, geo.ow], out)?;
        let input = self.value_rc();
        let weights = kernel.value_rc();
        Ok(Var::record(
            &[self, kernel],
            Rc::new(out),
            Box::new(move |g, need| {
                let gi = need[0].then(|| {
                    Tensor::new(input.shape(), backward_input(&geo, g.data(), weights.data())).unwrap()
                });
                let gk = need[1].then(|| {
                    Tensor::new(weights.shape(), backward_kernel(&geo, g.data(), input.data())).unwrap()
                });
                vec![gi, gk]
            }),
        ))
    }
}
