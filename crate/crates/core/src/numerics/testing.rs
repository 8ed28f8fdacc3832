//! Independent loop oracles for unit tests.

use super::tensor::Tensor;

/// Direct quadruple-loop cross-correlation with zero padding.
pub fn naive_conv2d(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (b, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[b, co, oh, ow]);
    for n in 0..b {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xx * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((n * ci + c) * h + iy as usize) * w + ix as usize;
                                let ki = ((o * ci + c) * kh + dy) * kw + dx;
                                acc += x.data()[xi] * k.data()[ki];
                            }
                        }
                    }
                    out.data_mut()[((n * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}
