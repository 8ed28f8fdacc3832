use super::{impute_bracketed, Imputer};
use crate::error::Result;
use crate::numerics::{Tensor, Var};
use crate::synthdata::IntermittentSequence;

/// Channel-mean plane of an `[H, W, C]` frame.
fn luminance(f: &Tensor<f32>) -> (Vec<f64>, usize, usize) {
    let s = f.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let plane = (0..h * w)
        .map(|p| f.data()[p * c..(p + 1) * c].iter().map(|&v| v as f64).sum::<f64>() / c as f64)
        .collect();
    (plane, h, w)
}

/// Dense Horn–Schunck flow from `a` to `b`: `b(p + flow(p)) ≈ a(p)`.
/// Returns `(u, v)` = (column, row) displacement planes.
pub fn horn_schunck(a: &[f64], b: &[f64], h: usize, w: usize, alpha: f64, iterations: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |img: &[f64], y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        img[y * w + x]
    };
    let n = h * w;
    let (mut ix, mut iy, mut it) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = y as usize * w + x as usize;
            ix[p] = 0.25 * (at(a, y, x + 1) - at(a, y, x - 1) + at(b, y, x + 1) - at(b, y, x - 1));
            iy[p] = 0.25 * (at(a, y + 1, x) - at(a, y - 1, x) + at(b, y + 1, x) - at(b, y - 1, x));
            it[p] = b[p] - a[p];
        }
    }
    let a2 = alpha * alpha;
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let neighbour_mean = |f: &[f64], y: isize, x: isize| {
        (at(f, y - 1, x) + at(f, y + 1, x) + at(f, y, x - 1) + at(f, y, x + 1)) / 6.0
            + (at(f, y - 1, x - 1) + at(f, y - 1, x + 1) + at(f, y + 1, x - 1) + at(f, y + 1, x + 1)) / 12.0
    };
    for _ in 0..iterations {
        let (mut nu, mut nv) = (vec![0.0; n], vec![0.0; n]);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let p = y as usize * w + x as usize;
                let ub = neighbour_mean(&u, y, x);
                let vb = neighbour_mean(&v, y, x);
                let k = (ix[p] * ub + iy[p] * vb + it[p]) / (a2 + ix[p] * ix[p] + iy[p] * iy[p]);
                nu[p] = ub - ix[p] * k;
                nv[p] = vb - iy[p] * k;
            }
        }
        u = nu;
        v = nv;
    }
    (u, v)
}

/// Interior gaps: warp the previous frame by `tau` times the bracket flow.
#[derive(Clone, Copy, Debug)]
pub struct OpticalFlowImputer {
    pub alpha: f64,
    pub iterations: usize,
    /// Intensities are multiplied by this before estimation, so `alpha`
    /// is expressed on the usual 8-bit scale.
    pub intensity_scale: f64,
}

impl Default for OpticalFlowImputer {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            iterations: 100,
            intensity_scale: 255.0,
        }
    }
}

impl OpticalFlowImputer {
    pub fn between(&self, prev: &Tensor<f32>, next: &Tensor<f32>, tau: f64) -> Result<Tensor<f32>> {
        let (mut a, h, w) = luminance(prev);
        let (mut b, _, _) = luminance(next);
        a.iter_mut().chain(b.iter_mut()).for_each(|x| *x *= self.intensity_scale);
        let (u, v) = horn_schunck(&a, &b, h, w, self.alpha, self.iterations);
        let mut flow = Vec::with_capacity(2 * h * w);
        flow.extend(u.iter().map(|&d| (tau * d) as f32));
        flow.extend(v.iter().map(|&d| (tau * d) as f32));
        let flow = Var::constant(Tensor::new(&[2, h, w], flow)?);
        let img = Var::constant(prev.hwc_to_chw()?);
        img.bilinear_warp(&flow)?.value().chw_to_hwc()
    }
}

impl Imputer for OpticalFlowImputer {
    fn name(&self) -> String {
        "of".into()
    }

    fn impute(&self, seq: &IntermittentSequence) -> Result<Vec<Tensor<f32>>> {
        impute_bracketed(seq, |p, n, tau| self.between(p, n, tau))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn gaussian(h: usize, w: usize, cy: f64, cx: f64, sigma: f64) -> Tensor<f32> {
        Tensor::from_fn(&[h, w, 1], |p| {
            let (y, x) = ((p / w) as f64, (p % w) as f64);
            (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * sigma * sigma)).exp() as f32
        })
    }

    fn centroid(f: &Tensor<f32>) -> [f64; 2] {
        let w = f.shape()[1];
        let (mut m, mut sy, mut sx) = (0.0, 0.0, 0.0);
        for (p, &v) in f.data().iter().enumerate() {
            let v = v as f64;
            m += v;
            sy += v * (p / w) as f64;
            sx += v * (p % w) as f64;
        }
        [sy / m, sx / m]
    }

    #[test]
    fn identical_brackets_give_zero_flow() {
        let f = gaussian(16, 16, 7.0, 8.0, 2.0);
        let (a, h, w) = luminance(&f);
        let (u, v) = horn_schunck(&a, &a, h, w, 1.0, 100);
        assert!(u.iter().chain(&v).all(|&d| d == 0.0));
        assert_eq!(OpticalFlowImputer::default().between(&f, &f, 0.5).unwrap(), f);
    }

    #[test]
    fn tau_zero_keeps_previous_frame() {
        let a = gaussian(16, 16, 7.0, 7.0, 2.0);
        let b = gaussian(16, 16, 7.0, 8.0, 2.0);
        assert_eq!(OpticalFlowImputer::default().between(&a, &b, 0.0).unwrap(), a);
    }

    #[test]
    fn half_way_centroid_for_one_pixel_translation() {
        let a = gaussian(32, 32, 15.0, 15.0, 2.0);
        let b = gaussian(32, 32, 15.0, 16.0, 2.0);
        let mid = OpticalFlowImputer::default().between(&a, &b, 0.5).unwrap();
        let (c0, c1) = (centroid(&a), centroid(&mid));
        assert!((c1[1] - c0[1] - 0.5).abs() <= 0.25, "column shift {}", c1[1] - c0[1]);
        assert!((c1[0] - c0[0]).abs() <= 0.25, "row shift {}", c1[0] - c0[0]);
    }
}
