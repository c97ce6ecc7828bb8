//! Full-covariance Gaussian mixtures fitted by expectation maximisation, with
//! the component count picked by AIC.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Added to every covariance diagonal.
pub const REG_COVAR: f64 = 1e-6;
const MAX_ITER: usize = 100;
const TOL: f64 = 1e-6;
const RESTARTS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub dim: usize,
    pub components: Vec<Component>,
    pub log_likelihood: f64,
    pub aic: f64,
    /// Total log-likelihood after each EM iteration of the selected fit.
    pub ll_trace: Vec<f64>,
    /// Set when every requested component count degenerated.
    pub fell_back: bool,
}

/// Lower-triangular Cholesky factor, or `None` if `a` is not positive definite.
pub(crate) fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Some(l)
}

struct Factor {
    chol: Vec<f64>,
    log_det: f64,
}

impl Factor {
    fn new(cov: &[f64], n: usize) -> Option<Self> {
        let chol = cholesky(cov, n)?;
        let log_det = 2.0 * (0..n).map(|i| chol[i * n + i].ln()).sum::<f64>();
        Some(Self { chol, log_det })
    }

    fn log_pdf(&self, x: &[f64], mean: &[f64]) -> f64 {
        let n = mean.len();
        // forward substitution: L y = x - mean
        let mut y = vec![0.0; n];
        let mut maha = 0.0;
        for i in 0..n {
            let mut v = x[i] - mean[i];
            for k in 0..i {
                v -= self.chol[i * n + k] * y[k];
            }
            y[i] = v / self.chol[i * n + i];
            maha += y[i] * y[i];
        }
        -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + self.log_det + maha)
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn sample_mean_cov(data: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = data.len() as f64;
    let mut mean = vec![0.0; dim];
    for x in data {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut cov = vec![0.0; dim * dim];
    for x in data {
        for i in 0..dim {
            for j in 0..dim {
                cov[i * dim + j] += (x[i] - mean[i]) * (x[j] - mean[j]) / n;
            }
        }
    }
    for i in 0..dim {
        cov[i * dim + i] += REG_COVAR;
    }
    (mean, cov)
}

fn param_count(k: usize, d: usize) -> usize {
    (k - 1) + k * d + k * d * (d + 1) / 2
}

fn total_log_likelihood(data: &[Vec<f64>], comps: &[Component], factors: &[Factor]) -> f64 {
    let mut buf = vec![0.0; comps.len()];
    data.iter()
        .map(|x| {
            for (j, (c, f)) in comps.iter().zip(factors).enumerate() {
                buf[j] = c.weight.ln() + f.log_pdf(x, &c.mean);
            }
            log_sum_exp(&buf)
        })
        .sum()
}

/// One EM run from a random initialisation. `None` signals degeneracy.
fn em_attempt(
    data: &[Vec<f64>],
    k: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Option<(Vec<Component>, Vec<f64>)> {
    let n = data.len();
    // k distinct data points as initial means
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for x in data {
        if !distinct.contains(&x) {
            distinct.push(x);
        }
    }
    if distinct.len() < k {
        return None;
    }
    let (_, global_cov) = sample_mean_cov(data, dim);
    let mut comps: Vec<Component> = index::sample(rng, distinct.len(), k)
        .into_iter()
        .map(|i| Component {
            weight: 1.0 / k as f64,
            mean: distinct[i].clone(),
            cov: global_cov.clone(),
        })
        .collect();

    let mut resp = vec![0.0; n * k];
    let mut trace = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..MAX_ITER {
        let factors: Vec<Factor> = comps
            .iter()
            .map(|c| Factor::new(&c.cov, dim))
            .collect::<Option<_>>()?;

        // E-step
        let mut ll = 0.0;
        let mut row = vec![0.0; k];
        for (i, x) in data.iter().enumerate() {
            for j in 0..k {
                row[j] = comps[j].weight.ln() + factors[j].log_pdf(x, &comps[j].mean);
            }
            let norm = log_sum_exp(&row);
            if !norm.is_finite() {
                return None;
            }
            ll += norm;
            for j in 0..k {
                resp[i * k + j] = (row[j] - norm).exp();
            }
        }
        trace.push(ll);
        if (ll - prev).abs() <= TOL * ll.abs().max(1.0) {
            break;
        }
        prev = ll;

        // M-step
        for (j, c) in comps.iter_mut().enumerate() {
            let nk: f64 = (0..n).map(|i| resp[i * k + j]).sum();
            if nk < 1e-8 {
                return None;
            }
            let mut mean = vec![0.0; dim];
            for (i, x) in data.iter().enumerate() {
                let r = resp[i * k + j];
                for (m, v) in mean.iter_mut().zip(x) {
                    *m += r * v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= nk);
            let mut cov = vec![0.0; dim * dim];
            for (i, x) in data.iter().enumerate() {
                let r = resp[i * k + j];
                for a in 0..dim {
                    let da = x[a] - mean[a];
                    for b in 0..=a {
                        cov[a * dim + b] += r * da * (x[b] - mean[b]);
                    }
                }
            }
            for a in 0..dim {
                for b in 0..=a {
                    let v = cov[a * dim + b] / nk;
                    cov[a * dim + b] = v;
                    cov[b * dim + a] = v;
                }
                cov[a * dim + a] += REG_COVAR;
            }
            c.weight = nk / n as f64;
            c.mean = mean;
            c.cov = cov;
        }
    }
    // likelihood of the final parameters
    let factors: Vec<Factor> = comps
        .iter()
        .map(|c| Factor::new(&c.cov, dim))
        .collect::<Option<_>>()?;
    let ll = total_log_likelihood(data, &comps, &factors);
    if trace.last() != Some(&ll) {
        trace.push(ll);
    }
    Some((comps, trace))
}

/// Fits mixtures for every `k` in `k_range` and keeps the lowest-AIC one.
/// Each `k` gets up to five restarts; if none converges cleanly the result is
/// a single Gaussian over the data.
pub fn fit_gmm(data: &[Vec<f64>], k_range: std::ops::RangeInclusive<usize>, seed: u64) -> GmmModel {
    assert!(!data.is_empty(), "cannot fit a mixture to no data");
    let dim = data[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<GmmModel> = None;
    for k in k_range {
        if k == 0 || k > data.len() {
            continue;
        }
        for _ in 0..RESTARTS {
            let Some((components, ll_trace)) = em_attempt(data, k, dim, &mut rng) else {
                continue;
            };
            let log_likelihood = *ll_trace.last().expect("at least one iteration");
            let aic = 2.0 * param_count(k, dim) as f64 - 2.0 * log_likelihood;
            if best.as_ref().is_none_or(|b| aic < b.aic) {
                best = Some(GmmModel {
                    dim,
                    components,
                    log_likelihood,
                    aic,
                    ll_trace,
                    fell_back: false,
                });
            }
            break;
        }
    }
    best.unwrap_or_else(|| single_gaussian(data, dim))
}

fn single_gaussian(data: &[Vec<f64>], dim: usize) -> GmmModel {
    let (mean, cov) = sample_mean_cov(data, dim);
    let comps = vec![Component {
        weight: 1.0,
        mean,
        cov,
    }];
    let factor =
        Factor::new(&comps[0].cov, dim).expect("regularised covariance is positive definite");
    let ll = total_log_likelihood(data, &comps, &[factor]);
    GmmModel {
        dim,
        components: comps,
        log_likelihood: ll,
        aic: 2.0 * param_count(1, dim) as f64 - 2.0 * ll,
        ll_trace: vec![ll],
        fell_back: true,
    }
}

impl GmmModel {
    /// Draws from component `j` restricted to its first `goal_dims` coordinates.
    pub fn sample_marginal<R: Rng + ?Sized>(
        &self,
        j: usize,
        goal_dims: usize,
        rng: &mut R,
    ) -> Vec<f64> {
        let c = &self.components[j];
        let d = self.dim;
        let mut sub = vec![0.0; goal_dims * goal_dims];
        for a in 0..goal_dims {
            for b in 0..goal_dims {
                sub[a * goal_dims + b] = c.cov[a * d + b];
            }
        }
        let l = cholesky(&sub, goal_dims).expect("marginal of a PD covariance is PD");
        let z: Vec<f64> = (0..goal_dims).map(|_| rng.sample(StandardNormal)).collect();
        (0..goal_dims)
            .map(|a| c.mean[a] + (0..=a).map(|b| l[a * goal_dims + b] * z[b]).sum::<f64>())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_clusters(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let (g, a) = if i % 2 == 0 { (0.2, 0.9) } else { (0.8, 0.0) };
                let dg: f64 = rng.sample(StandardNormal);
                let da: f64 = rng.sample(StandardNormal);
                vec![g + 0.02 * dg, a + 0.02 * da]
            })
            .collect()
    }

    #[test]
    fn cholesky_small() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let l = cholesky(&a, 2).unwrap();
        assert!((l[0] - 2.0).abs() < 1e-12);
        assert!((l[2] - 1.0).abs() < 1e-12);
        assert!((l[3] - 2f64.sqrt()).abs() < 1e-12);
        assert!(cholesky(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
    }

    #[test]
    fn recovers_two_clusters() {
        let data = two_clusters(300, 5);
        let m = fit_gmm(&data, 2..=5, 11);
        for truth in [[0.2, 0.9], [0.8, 0.0]] {
            let closest = m
                .components
                .iter()
                .filter(|c| c.weight > 0.1)
                .map(|c| ((c.mean[0] - truth[0]).abs()).max((c.mean[1] - truth[1]).abs()))
                .fold(f64::INFINITY, f64::min);
            assert!(closest < 0.05, "no component near {truth:?}: {m:?}");
        }
        let wsum: f64 = m.components.iter().map(|c| c.weight).sum();
        assert!((wsum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn identical_records_fall_back() {
        let data = vec![vec![0.5, 0.1]; 40];
        let m = fit_gmm(&data, 2..=5, 0);
        assert!(m.fell_back);
        assert_eq!(m.components.len(), 1);
        assert!(cholesky(&m.components[0].cov, 2).is_some());
    }

    #[test]
    fn deterministic_given_seed() {
        let data = two_clusters(120, 9);
        assert_eq!(fit_gmm(&data, 2..=4, 3), fit_gmm(&data, 2..=4, 3));
    }

    #[test]
    fn log_likelihood_never_decreases() {
        for seed in 0..10 {
            let data = two_clusters(200, seed);
            let m = fit_gmm(&data, 2..=5, seed);
            for w in m.ll_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{:?}", m.ll_trace);
            }
        }
    }
}
