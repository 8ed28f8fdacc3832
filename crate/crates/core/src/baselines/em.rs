use std::f64::consts::PI;

use rand::distributions::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{bracket, require_observed, Bracket, Imputer};
use crate::error::Result;
use crate::numerics::Tensor;
use crate::synthdata::IntermittentSequence;

#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl GmmParams {
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let k = if self.weights.len() == 1 {
            0
        } else {
            WeightedIndex::new(&self.weights).map_or(0, |d| d.sample(rng))
        };
        Normal::new(self.means[k], self.variances[k].sqrt()).map_or(self.means[k], |d| d.sample(rng))
    }
}

#[derive(Clone, Debug)]
pub struct GmmFit {
    pub params: GmmParams,
    /// Log-likelihood after each E step.
    pub log_likelihood: Vec<f64>,
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (x - mean) * (x - mean) / var)
}

/// k-means++ style seeding of the component means.
fn seed_means(values: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut means = vec![values[rng.gen_range(0..values.len())]];
    while means.len() < k {
        let d2: Vec<f64> = values
            .iter()
            .map(|&x| means.iter().map(|&m| (x - m) * (x - m)).fold(f64::INFINITY, f64::min))
            .collect();
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => values[dist.sample(rng)],
            Err(_) => values[rng.gen_range(0..values.len())],
        };
        means.push(next);
    }
    means
}

/// Fits a 1-D `k`-component mixture by expectation maximization.
pub fn fit_gmm(values: &[f64], k: usize, max_iter: usize, tol: f64, floor: f64, seed: u64) -> GmmFit {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = GmmParams {
        weights: vec![1.0 / k as f64; k],
        means: seed_means(values, k, &mut rng),
        variances: vec![(var / k as f64).max(floor); k],
    };
    let mut history = Vec::new();
    let mut resp = vec![0.0; values.len() * k];
    for _ in 0..max_iter {
        // E step
        let mut ll = 0.0;
        for (i, &x) in values.iter().enumerate() {
            let row = &mut resp[i * k..(i + 1) * k];
            for j in 0..k {
                row[j] = params.weights[j].ln() + log_normal(x, params.means[j], params.variances[j]);
            }
            let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = top + row.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
            ll += lse;
            for r in row.iter_mut() {
                *r = (*r - lse).exp();
            }
        }
        let converged = history.last().is_some_and(|&prev: &f64| (ll - prev).abs() <= tol * ll.abs().max(1.0));
        history.push(ll);
        if converged {
            break;
        }
        // M step
        for j in 0..k {
            let nk: f64 = (0..values.len()).map(|i| resp[i * k + j]).sum();
            params.weights[j] = nk / n;
            if nk <= 1e-300 {
                continue;
            }
            let mu = (0..values.len()).map(|i| resp[i * k + j] * values[i]).sum::<f64>() / nk;
            let v = (0..values.len())
                .map(|i| resp[i * k + j] * (values[i] - mu) * (values[i] - mu))
                .sum::<f64>()
                / nk;
            params.means[j] = mu;
            params.variances[j] = v.max(floor);
        }
    }
    GmmFit {
        params,
        log_likelihood: history,
    }
}

/// Per-pixel temporal mixture fit, imputing by sampling the mixture.
#[derive(Clone, Copy, Debug)]
pub struct EmImputer {
    pub components: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub variance_floor: f64,
    pub seed: u64,
}

impl Default for EmImputer {
    fn default() -> Self {
        Self {
            components: 3,
            max_iter: 100,
            tol: 1e-8,
            variance_floor: 1e-6,
            seed: 0,
        }
    }
}

impl Imputer for EmImputer {
    fn name(&self) -> String {
        "em".into()
    }

    fn impute(&self, seq: &IntermittentSequence) -> Result<Vec<Tensor<f32>>> {
        require_observed(seq)?;
        let shape = seq.observed_frames[0].shape().to_vec();
        let pixels = seq.observed_frames[0].len();
        let gaps: Vec<usize> = (0..seq.query_times.len())
            .filter(|&q| !matches!(bracket(&seq.observed_times, seq.query_times[q]), Bracket::Exact(_)))
            .collect();
        let mut out: Vec<Vec<f32>> = vec![vec![0.0; pixels]; seq.query_times.len()];
        if !gaps.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            let mut values = Vec::with_capacity(seq.observed_frames.len());
            for p in 0..pixels {
                values.clear();
                values.extend(seq.observed_frames.iter().map(|f| f.data()[p] as f64));
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                let spread = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / values.len() as f64;
                if values.len() < self.components || spread <= self.variance_floor {
                    for &q in &gaps {
                        out[q][p] = mean as f32;
                    }
                    continue;
                }
                let fit = fit_gmm(&values, self.components, self.max_iter, self.tol, self.variance_floor, rng.gen());
                for &q in &gaps {
                    out[q][p] = fit.params.sample(&mut rng) as f32;
                }
            }
        }
        seq.query_times
            .iter()
            .zip(out)
            .map(|(&m, data)| match bracket(&seq.observed_times, m) {
                Bracket::Exact(i) => Ok(seq.observed_frames[i].clone()),
                _ => Tensor::new(&shape, data),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::tests::sequence;
    use crate::synthdata::Mode;

    fn two_component_sample(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Normal::new(0.0, 0.05).unwrap();
        let b = Normal::new(1.0, 0.05).unwrap();
        (0..n)
            .map(|_| if rng.gen_bool(0.5) { a.sample(&mut rng) } else { b.sample(&mut rng) })
            .collect()
    }

    #[test]
    fn recovers_known_mixture_means() {
        let values = two_component_sample(500, 11);
        let fit = fit_gmm(&values, 2, 200, 1e-10, 1e-6, 4);
        let mut means = fit.params.means.clone();
        means.sort_by(f64::total_cmp);
        assert!((means[0] - 0.0).abs() < 0.05, "{means:?}");
        assert!((means[1] - 1.0).abs() < 0.05, "{means:?}");
        assert!((fit.params.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_is_monotone() {
        for seed in 0..5 {
            let values = two_component_sample(200, seed);
            let fit = fit_gmm(&values, 3, 100, 0.0, 1e-6, seed);
            assert!(fit.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{:?}", fit.log_likelihood);
        }
    }

    #[test]
    fn constant_trajectory_imputes_its_value() {
        let frames = vec![Tensor::full(&[2, 2, 1], 0.5f32); 3];
        let s = sequence(&[0.0, 1.0, 3.0], frames, &[2.0], Mode::Interpolation);
        let out = EmImputer::default().impute(&s).unwrap();
        assert!(out[0].data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn sampling_is_seeded() {
        let frames: Vec<_> = (0..5)
            .map(|i| Tensor::from_fn(&[3, 3, 1], |p| ((p + 2 * i) % 5) as f32 / 5.0))
            .collect();
        let s = sequence(&[0.0, 1.0, 2.0, 3.0, 5.0], frames, &[4.0], Mode::Interpolation);
        let em = EmImputer { seed: 9, ..EmImputer::default() };
        assert_eq!(em.impute(&s).unwrap(), em.impute(&s).unwrap());
    }
}
