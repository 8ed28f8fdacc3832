//! Differentiable elementwise ops, reductions and layout ops on [`Var`].

use std::rc::Rc;

use super::tape::Var;
use super::tensor::{broadcast_zip, reduce_to_shape, Real, Tensor};
use crate::error::{Error, Result};

fn unary<T: Real>(x: &Var<T>, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<T> {
    // df(input, output) is the local derivative.
    let out = Rc::new(x.value().map(f));
    let input = x.value_rc();
    let saved = Rc::clone(&out);
    Var::record(
        &[x],
        out,
        Box::new(move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(input.data().iter().zip(saved.data()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(g.shape(), data).unwrap())]
        }),
    )
}

fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        let out = broadcast_zip("add", self.value(), other.value(), |a, b| a + b)?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Ok(Var::record(
            &[self, other],
            Rc::new(out),
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| reduce_to_shape(g, &sa)),
                    need[1].then(|| reduce_to_shape(g, &sb)),
                ]
            }),
        ))
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        let out = broadcast_zip("sub", self.value(), other.value(), |a, b| a - b)?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Ok(Var::record(
            &[self, other],
            Rc::new(out),
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| reduce_to_shape(g, &sa)),
                    need[1].then(|| reduce_to_shape(&g.map(|v| -v), &sb)),
                ]
            }),
        ))
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        let out = broadcast_zip("mul", self.value(), other.value(), |a, b| a * b)?;
        let a = self.value_rc();
        let b = other.value_rc();
        Ok(Var::record(
            &[self, other],
            Rc::new(out),
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| {
                        let ga = broadcast_zip("mul", g, &b, |g, b| g * b).unwrap();
                        reduce_to_shape(&ga, a.shape())
                    }),
                    need[1].then(|| {
                        let gb = broadcast_zip("mul", g, &a, |g, a| g * a).unwrap();
                        reduce_to_shape(&gb, b.shape())
                    }),
                ]
            }),
        ))
    }

    pub fn div(&self, other: &Var<T>) -> Result<Var<T>> {
        let out = broadcast_zip("div", self.value(), other.value(), |a, b| a / b)?;
        let a = self.value_rc();
        let b = other.value_rc();
        let q = Rc::new(out.clone());
        Ok(Var::record(
            &[self, other],
            Rc::new(out),
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| {
                        let ga = broadcast_zip("div", g, &b, |g, b| g / b).unwrap();
                        reduce_to_shape(&ga, a.shape())
                    }),
                    need[1].then(|| {
                        // d(a/b)/db = -(a/b)/b
                        let gq = broadcast_zip("mul", g, &q, |g, q| -g * q).unwrap();
                        let gb = broadcast_zip("div", &gq, &b, |v, b| v / b).unwrap();
                        reduce_to_shape(&gb, b.shape())
                    }),
                ]
            }),
        ))
    }

    pub fn neg(&self) -> Var<T> {
        unary(self, |x| -x, |_, _| -T::one())
    }

    pub fn exp(&self) -> Var<T> {
        unary(self, |x| x.exp(), |_, y| y)
    }

    pub fn sigmoid(&self) -> Var<T> {
        unary(self, sigmoid_scalar, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&self) -> Var<T> {
        unary(self, |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn relu(&self) -> Var<T> {
        unary(
            self,
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn abs(&self) -> Var<T> {
        unary(self, |x| x.abs(), |x, _| x.signum())
    }

    pub fn square(&self) -> Var<T> {
        unary(self, |x| x * x, |x, _| x + x)
    }

    pub fn add_scalar(&self, s: T) -> Var<T> {
        unary(self, move |x| x + s, |_, _| T::one())
    }

    pub fn mul_scalar(&self, s: T) -> Var<T> {
        unary(self, move |x| x * s, move |_, _| s)
    }

    /// `1 - x`
    pub fn one_minus(&self) -> Var<T> {
        unary(self, |x| T::one() - x, |_, _| -T::one())
    }

    /// Sum over all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Var<T> {
        let out = Tensor::scalar(self.value().sum());
        let shape = self.shape().to_vec();
        Var::record(
            &[self],
            Rc::new(out),
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    /// Mean over all elements, as a rank-0 tensor.
    pub fn mean(&self) -> Var<T> {
        let n = T::from_usize(self.value().len()).unwrap();
        let out = Tensor::scalar(self.value().sum() / n);
        let shape = self.shape().to_vec();
        Var::record(
            &[self],
            Rc::new(out),
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item() / n))]),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let out = self.value().reshape(shape)?;
        let orig = self.shape().to_vec();
        Ok(Var::record(
            &[self],
            Rc::new(out),
            Box::new(move |g, _| vec![Some(g.reshape(&orig).unwrap())]),
        ))
    }

    /// `[start, end)` along `axis`; materializes a copy.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<T>> {
        let out = self.value().slice_axis(axis, start, end)?;
        let shape = self.shape().to_vec();
        Ok(Var::record(
            &[self],
            Rc::new(out),
            Box::new(move |g, _| {
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let span = shape[axis];
                let mut full = Tensor::zeros(&shape);
                let dst = full.data_mut();
                let width = (end - start) * inner;
                for o in 0..outer {
                    let base = o * span * inner + start * inner;
                    dst[base..base + width].copy_from_slice(&g.data()[o * width..(o + 1) * width]);
                }
                vec![Some(full)]
            }),
        ))
    }

    /// Nearest-neighbour 2x spatial upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&self) -> Result<Var<T>> {
        let s = self.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::contract(format!("upsample2x expects [B,C,H,W], got {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.value().data();
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + x] = src[(p * h + y / 2) * w + x / 2];
                }
            }
        }
        let out = Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out)?;
        Ok(Var::record(
            &[self],
            Rc::new(out),
            Box::new(move |g, _| {
                let gd = g.data();
                let mut gi = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            gi[(p * h + y / 2) * w + x / 2] += gd[(p * 2 * h + y) * 2 * w + x];
                        }
                    }
                }
                vec![Some(Tensor::new(&s, gi).unwrap())]
            }),
        ))
    }
}

impl<T: Real> Var<T> {
    /// 2x2 average pooling of `[B, C, H, W]` with even `H`, `W`.
    pub fn avg_pool2x(&self) -> Result<Var<T>> {
        let s = self.shape().to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::contract(format!("avg_pool2x expects [B,C,2h,2w], got {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2] / 2, s[3] / 2);
        let quarter = T::lit(0.25);
        let src = self.value().data();
        let mut out = vec![T::zero(); planes * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[(p * h + y / 2) * w + x / 2] += quarter * src[(p * 2 * h + y) * 2 * w + x];
                }
            }
        }
        let out = Tensor::new(&[s[0], s[1], h, w], out)?;
        Ok(Var::record(
            &[self],
            Rc::new(out),
            Box::new(move |g, _| {
                let gd = g.data();
                let mut gi = vec![T::zero(); planes * 4 * h * w];
                for p in 0..planes {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            gi[(p * 2 * h + y) * 2 * w + x] = quarter * gd[(p * h + y / 2) * w + x / 2];
                        }
                    }
                }
                vec![Some(Tensor::new(&s, gi).unwrap())]
            }),
        ))
    }
}

/// Concatenation along `axis`.
pub fn concat<T: Real>(parts: &[&Var<T>], axis: usize) -> Result<Var<T>> {
    let values: Vec<&Tensor<T>> = parts.iter().map(|v| v.value()).collect();
    let out = Tensor::concat(&values, axis)?;
    let extents: Vec<usize> = parts.iter().map(|v| v.shape()[axis]).collect();
    Ok(Var::record(
        parts,
        Rc::new(out),
        Box::new(move |g, need| {
            let mut start = 0;
            extents
                .iter()
                .zip(need)
                .map(|(&e, &n)| {
                    let piece = n.then(|| g.slice_axis(axis, start, start + e).unwrap());
                    start += e;
                    piece
                })
                .collect()
        }),
    ))
}
