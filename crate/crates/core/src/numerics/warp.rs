//! Backward bilinear warping: `out(p) = image(p - flow(p))`, clamp-to-edge.

use std::rc::Rc;

use super::tape::Var;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

struct Sample<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    ax: T,
    ay: T,
    // false when the coordinate was clamped, which zeroes its derivative
    free_x: bool,
    free_y: bool,
}

fn locate<T: Real>(pos: T, extent: usize) -> (usize, usize, T, bool) {
    let hi = T::from_usize(extent - 1).unwrap();
    let (p, free) = if pos < T::zero() {
        (T::zero(), false)
    } else if pos > hi {
        (hi, false)
    } else {
        (pos, true)
    };
    let f = p.floor();
    let i0 = f.to_usize().unwrap().min(extent - 1);
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, p - f, free)
}

fn sample<T: Real>(x: usize, y: usize, fx: T, fy: T, h: usize, w: usize) -> Sample<T> {
    let (x0, x1, ax, free_x) = locate(T::from_usize(x).unwrap() - fx, w);
    let (y0, y1, ay, free_y) = locate(T::from_usize(y).unwrap() - fy, h);
    Sample {
        x0,
        x1,
        y0,
        y1,
        ax,
        ay,
        free_x,
        free_y,
    }
}

fn dims(image: &[usize], flow: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let (img, fl) = match (image.len(), flow.len()) {
        (3, 3) => ([1, image[0], image[1], image[2]], [1, flow[0], flow[1], flow[2]]),
        (4, 4) => (
            [image[0], image[1], image[2], image[3]],
            [flow[0], flow[1], flow[2], flow[3]],
        ),
        _ => return Err(Error::shape("bilinear_warp", image, flow)),
    };
    if fl[0] != img[0] || fl[1] != 2 || fl[2] != img[2] || fl[3] != img[3] {
        return Err(Error::shape("bilinear_warp", image, flow));
    }
    Ok((img[0], img[1], img[2], img[3]))
}

impl<T: Real> Var<T> {
    /// Warps `[C,H,W]` (or `[B,C,H,W]`) by a pixel flow `[2,H,W]` (or `[B,2,H,W]`);
    /// flow channel 0 is the x displacement, channel 1 the y displacement.
    pub fn bilinear_warp(&self, flow: &Var<T>) -> Result<Var<T>> {
        let (batch, chans, h, w) = dims(self.shape(), flow.shape())?;
        let img = self.value().data();
        let fl = flow.value().data();
        let plane = h * w;
        let mut out = vec![T::zero(); batch * chans * plane];
        for b in 0..batch {
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let s = sample(x, y, fl[(b * 2) * plane + p], fl[(b * 2 + 1) * plane + p], h, w);
                    for c in 0..chans {
                        let im = &img[(b * chans + c) * plane..][..plane];
                        let top = im[s.y0 * w + s.x0] * (T::one() - s.ax) + im[s.y0 * w + s.x1] * s.ax;
                        let bot = im[s.y1 * w + s.x0] * (T::one() - s.ax) + im[s.y1 * w + s.x1] * s.ax;
                        out[(b * chans + c) * plane + p] = top * (T::one() - s.ay) + bot * s.ay;
                    }
                }
            }
        }
        let out = Tensor::new(self.shape(), out)?;
        let image = self.value_rc();
        let flow_v = flow.value_rc();
        Ok(Var::record(
            &[self, flow],
            Rc::new(out),
            Box::new(move |g, need| {
                let gd = g.data();
                let img = image.data();
                let fl = flow_v.data();
                let mut gi = need[0].then(|| vec![T::zero(); img.len()]);
                let mut gf = need[1].then(|| vec![T::zero(); fl.len()]);
                for b in 0..batch {
                    for y in 0..h {
                        for x in 0..w {
                            let p = y * w + x;
                            let s = sample(x, y, fl[(b * 2) * plane + p], fl[(b * 2 + 1) * plane + p], h, w);
                            let (wx0, wy0) = (T::one() - s.ax, T::one() - s.ay);
                            let mut dfx = T::zero();
                            let mut dfy = T::zero();
                            for c in 0..chans {
                                let base = (b * chans + c) * plane;
                                let go = gd[base + p];
                                if let Some(gi) = gi.as_mut() {
                                    gi[base + s.y0 * w + s.x0] += go * wy0 * wx0;
                                    gi[base + s.y0 * w + s.x1] += go * wy0 * s.ax;
                                    gi[base + s.y1 * w + s.x0] += go * s.ay * wx0;
                                    gi[base + s.y1 * w + s.x1] += go * s.ay * s.ax;
                                }
                                if gf.is_some() {
                                    let im = &img[base..][..plane];
                                    let (i00, i01) = (im[s.y0 * w + s.x0], im[s.y0 * w + s.x1]);
                                    let (i10, i11) = (im[s.y1 * w + s.x0], im[s.y1 * w + s.x1]);
                                    // sample position = p - flow, so d/dflow = -d/dpos
                                    dfx -= go * (wy0 * (i01 - i00) + s.ay * (i11 - i10));
                                    dfy -= go * (wx0 * (i10 - i00) + s.ax * (i11 - i01));
                                }
                            }
                            if let Some(gf) = gf.as_mut() {
                                if s.free_x {
                                    gf[(b * 2) * plane + p] += dfx;
                                }
                                if s.free_y {
                                    gf[(b * 2 + 1) * plane + p] += dfy;
                                }
                            }
                        }
                    }
                }
                vec![
                    gi.map(|d| Tensor::new(image.shape(), d).unwrap()),
                    gf.map(|d| Tensor::new(flow_v.shape(), d).unwrap()),
                ]
            }),
        ))
    }
}
