use super::{impute_bracketed, Imputer};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::synthdata::IntermittentSequence;

/// Entropic coupling on an `h x w` pixel grid with squared-distance cost.
///
/// The Gibbs kernel factorizes over rows and columns, so the plan is stored as
/// scalings `u`, `v` and the two 1-D kernels: `plan(i, j) = u_i K(i, j) v_j`.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub h: usize,
    pub w: usize,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub epsilon: f64,
    pub iterations: usize,
    /// L1 row-marginal residual after the last iteration.
    pub residual: f64,
    kr: Vec<f64>,
    kc: Vec<f64>,
}

/// `out = Kr * X * Kc` for `X` laid out `[h, w]` (both kernels symmetric).
fn kernel_apply(kr: &[f64], kc: &[f64], x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for c in 0..w {
            let row = &x[y * w..(y + 1) * w];
            tmp[y * w + c] = row.iter().zip(&kc[c * w..(c + 1) * w]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for y2 in 0..h {
            let k = kr[y * h + y2];
            if k == 0.0 {
                continue;
            }
            for c in 0..w {
                out[y * w + c] += k * tmp[y2 * w + c];
            }
        }
    }
    out
}

/// Median squared pixel distance over all ordered pixel pairs.
pub fn median_cost(h: usize, w: usize) -> f64 {
    let mut cells = Vec::with_capacity((2 * h - 1) * (2 * w - 1));
    for dy in -(h as isize - 1)..h as isize {
        for dx in -(w as isize - 1)..w as isize {
            let count = (h - dy.unsigned_abs()) * (w - dx.unsigned_abs());
            cells.push(((dy * dy + dx * dx) as f64, count));
        }
    }
    cells.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total = (h * w * h * w) as f64;
    let mut seen = 0usize;
    for (cost, count) in cells {
        seen += count;
        if seen as f64 >= total / 2.0 {
            return cost;
        }
    }
    0.0
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        let kv = kernel_apply(&self.kr, &self.kc, &self.v, self.h, self.w);
        self.u.iter().zip(kv).map(|(a, b)| a * b).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let ku = kernel_apply(&self.kr, &self.kc, &self.u, self.h, self.w);
        self.v.iter().zip(ku).map(|(a, b)| a * b).collect()
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let (yi, xi) = (i / self.w, i % self.w);
        let (yj, xj) = (j / self.w, j % self.w);
        self.u[i] * self.kr[yi * self.h + yj] * self.kc[xi * self.w + xj] * self.v[j]
    }
}

/// Sinkhorn scaling between two distributions on an `h x w` grid.
/// `epsilon` is absolute; pass `reg * median_cost(h, w)` for the relative form.
pub fn sinkhorn(p: &[f64], q: &[f64], h: usize, w: usize, epsilon: f64, max_iter: usize, tol: f64) -> Result<TransportPlan> {
    if p.len() != h * w || q.len() != h * w {
        return Err(Error::shape("sinkhorn", &[p.len(), q.len()], &[h * w]));
    }
    if !(epsilon > 0.0) {
        return Err(Error::config(format!("Sinkhorn regularization must be positive, got {epsilon}")));
    }
    let kernel = |n: usize| -> Vec<f64> {
        (0..n * n)
            .map(|k| {
                let d = (k / n) as f64 - (k % n) as f64;
                (-d * d / epsilon).exp()
            })
            .collect()
    };
    let mut plan = TransportPlan {
        h,
        w,
        p: p.to_vec(),
        q: q.to_vec(),
        u: vec![1.0; h * w],
        v: vec![1.0; h * w],
        epsilon,
        iterations: 0,
        residual: f64::INFINITY,
        kr: kernel(h),
        kc: kernel(w),
    };
    for it in 1..=max_iter {
        let kv = kernel_apply(&plan.kr, &plan.kc, &plan.v, h, w);
        for k in 0..h * w {
            plan.u[k] = p[k] / kv[k];
        }
        let ku = kernel_apply(&plan.kr, &plan.kc, &plan.u, h, w);
        for k in 0..h * w {
            plan.v[k] = q[k] / ku[k];
        }
        plan.iterations = it;
        plan.residual = plan.row_sums().iter().zip(p).map(|(a, b)| (a - b).abs()).sum();
        if !plan.residual.is_finite() {
            break;
        }
        if plan.residual <= tol {
            return Ok(plan);
        }
    }
    Err(Error::SinkhornDivergence {
        iterations: plan.iterations,
        residual: plan.residual,
    })
}

/// Moves every coupled mass `tau` of the way along its transport segment,
/// splitting it bilinearly onto the grid. The result sums to the plan mass.
pub fn displacement_interpolate(plan: &TransportPlan, tau: f64) -> Vec<f64> {
    let (h, w) = (plan.h, plan.w);
    let mut out = vec![0.0; h * w];
    let mut deposit = |y: f64, x: f64, m: f64| {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as usize, x0 as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        out[y0 * w + x0] += m * (1.0 - fy) * (1.0 - fx);
        out[y0 * w + x1] += m * (1.0 - fy) * fx;
        out[y1 * w + x0] += m * fy * (1.0 - fx);
        out[y1 * w + x1] += m * fy * fx;
    };
    for i in 0..h * w {
        if plan.u[i] == 0.0 {
            continue;
        }
        let (yi, xi) = ((i / w) as f64, (i % w) as f64);
        for j in 0..h * w {
            let m = plan.entry(i, j);
            if m == 0.0 {
                continue;
            }
            let (yj, xj) = ((j / w) as f64, (j % w) as f64);
            deposit((1.0 - tau) * yi + tau * yj, (1.0 - tau) * xi + tau * xj, m);
        }
    }
    out
}

/// Interior gaps: entropic displacement interpolation between the brackets.
#[derive(Clone, Copy, Debug)]
pub struct OtImputer {
    /// Regularization relative to the median ground cost.
    pub reg: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for OtImputer {
    fn default() -> Self {
        Self {
            reg: 0.05,
            max_iter: 1000,
            tol: 1e-9,
        }
    }
}

const MASS_FLOOR: f64 = 1e-8;

fn normalized(plane: &[f64]) -> (Vec<f64>, f64) {
    let mass: f64 = plane.iter().sum();
    let shifted: Vec<f64> = plane.iter().map(|&x| x + MASS_FLOOR).collect();
    let total: f64 = shifted.iter().sum();
    (shifted.into_iter().map(|x| x / total).collect(), mass)
}

impl OtImputer {
    pub fn between(&self, prev: &Tensor<f32>, next: &Tensor<f32>, tau: f64) -> Result<Tensor<f32>> {
        let s = prev.shape();
        let (h, w, c) = (s[0], s[1], s[2]);
        let eps = self.reg * median_cost(h, w).max(1.0);
        let mut out = vec![0.0f32; h * w * c];
        for ch in 0..c {
            let plane = |f: &Tensor<f32>| -> Vec<f64> { (0..h * w).map(|p| f.data()[p * c + ch].max(0.0) as f64).collect() };
            let (p, mass_p) = normalized(&plane(prev));
            let (q, mass_q) = normalized(&plane(next));
            let plan = sinkhorn(&p, &q, h, w, eps, self.max_iter, self.tol)?;
            let mass = (1.0 - tau) * mass_p + tau * mass_q;
            for (k, d) in displacement_interpolate(&plan, tau).into_iter().enumerate() {
                out[k * c + ch] = (d * mass) as f32;
            }
        }
        Tensor::new(s, out)
    }
}

impl Imputer for OtImputer {
    fn name(&self) -> String {
        "ot".into()
    }

    fn impute(&self, seq: &IntermittentSequence) -> Result<Vec<Tensor<f32>>> {
        impute_bracketed(seq, |p, n, tau| self.between(p, n, tau))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dirac(h: usize, w: usize, at: usize) -> Vec<f64> {
        let mut v: Vec<f64> = vec![MASS_FLOOR; h * w];
        v[at] += 1.0;
        let s: f64 = v.iter().sum();
        v.iter().map(|x| x / s).collect()
    }

    #[test]
    fn median_cost_matches_brute_force() {
        let (h, w) = (3, 4);
        let mut costs = Vec::new();
        for i in 0..h * w {
            for j in 0..h * w {
                let dy = (i / w) as f64 - (j / w) as f64;
                let dx = (i % w) as f64 - (j % w) as f64;
                costs.push(dy * dy + dx * dx);
            }
        }
        costs.sort_by(f64::total_cmp);
        let m = median_cost(h, w);
        assert!(m == costs[costs.len() / 2 - 1] || m == costs[costs.len() / 2]);
    }

    #[test]
    fn two_point_transport_lands_on_midpoint() {
        let (h, w) = (1, 5);
        let p = dirac(h, w, 0);
        let q = dirac(h, w, 4);
        let plan = sinkhorn(&p, &q, h, w, 0.05 * median_cost(h, w), 1000, 1e-10).unwrap();
        let mid = displacement_interpolate(&plan, 0.5);
        assert!((mid[2] - 1.0).abs() < 1e-4, "{mid:?}");
    }

    #[test]
    fn identical_distributions_keep_mass_and_centroid() {
        let f = Tensor::from_fn(&[6, 6, 1], |p| ((p * 7) % 5) as f32 / 5.0);
        let imp = OtImputer::default();
        for tau in [0.0, 1.0] {
            assert!(imp.between(&f, &f, tau).unwrap().max_abs_diff(&f) < 1e-6);
        }
        // entropic smoothing blurs the midpoint but moves nothing on average
        let mid = imp.between(&f, &f, 0.5).unwrap();
        let moments = |t: &Tensor<f32>| {
            let (mut m, mut sy, mut sx) = (0.0, 0.0, 0.0);
            for (p, &v) in t.data().iter().enumerate() {
                m += v as f64;
                sy += v as f64 * (p / 6) as f64;
                sx += v as f64 * (p % 6) as f64;
            }
            [m, sy / m, sx / m]
        };
        let (a, b) = (moments(&f), moments(&mid));
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-4, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn endpoints_reproduce_brackets() {
        let a = Tensor::from_fn(&[6, 6, 1], |p| if p == 7 { 1.0 } else { 0.0 });
        let b = Tensor::from_fn(&[6, 6, 1], |p| if p == 28 { 0.5 } else { 0.0 });
        let imp = OtImputer::default();
        assert!(imp.between(&a, &b, 0.0).unwrap().max_abs_diff(&a) < 1e-6);
        assert!(imp.between(&a, &b, 1.0).unwrap().max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn non_convergence_reports_residual() {
        let p = dirac(4, 4, 0);
        let q = dirac(4, 4, 15);
        match sinkhorn(&p, &q, 4, 4, 0.05, 2, 1e-12) {
            Err(Error::SinkhornDivergence { iterations, residual }) => {
                assert_eq!(iterations, 2);
                assert!(residual > 1e-12);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn converged_plan_has_exact_marginals(seed in 0u64..1000) {
            let (h, w) = (5, 6);
            let gen = |s: u64| -> Vec<f64> {
                let raw: Vec<f64> = (0..h * w).map(|k| (((k as u64 + 1) * (s + 3) * 2654435761) % 97) as f64 / 97.0).collect();
                normalized(&raw).0
            };
            let (p, q) = (gen(seed), gen(seed + 17));
            let plan = sinkhorn(&p, &q, h, w, 0.05 * median_cost(h, w), 1000, 1e-9).unwrap();
            let rows = plan.row_sums();
            let cols = plan.col_sums();
            for k in 0..h * w {
                prop_assert!((rows[k] - p[k]).abs() <= 1e-6);
                prop_assert!((cols[k] - q[k]).abs() <= 1e-6);
            }
            for i in 0..h * w {
                for j in 0..h * w {
                    prop_assert!(plan.entry(i, j) >= 0.0);
                }
            }
        }
    }
}
