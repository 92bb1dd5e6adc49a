//! Small statistical helpers shared by the simulation and report code.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

/// Sample mean and its standard error.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Two-sample energy statistic `2E|X-Y| - E|X-X'| - E|Y-Y'|` for 1D samples,
/// computed as `2 int (F_n - G_m)^2 dx` over the merged order statistics.
pub fn energy_distance_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut xs: Vec<(f64, bool)> = a
        .iter()
        .map(|&x| (x, true))
        .chain(b.iter().map(|&x| (x, false)))
        .collect();
    xs.sort_by(|p, q| p.0.total_cmp(&q.0));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut fa, mut fb) = (0.0, 0.0);
    let mut total = 0.0;
    for w in 0..xs.len() {
        if xs[w].1 {
            fa += 1.0 / na;
        } else {
            fb += 1.0 / nb;
        }
        if w + 1 < xs.len() {
            let gap = xs[w + 1].0 - xs[w].0;
            total += (fa - fb) * (fa - fb) * gap;
        }
    }
    2.0 * total
}

/// Energy statistic for samples in R^d (rows of length `dim`), O(n^2).
pub fn energy_distance(a: &[f64], b: &[f64], dim: usize) -> f64 {
    if dim == 1 {
        return energy_distance_1d(a, b);
    }
    let dist = |x: &[f64], y: &[f64]| -> f64 { x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt() };
    let mean_pair = |u: &[f64], v: &[f64]| -> f64 {
        let (nu, nv) = (u.len() / dim, v.len() / dim);
        let mut s = 0.0;
        for i in 0..nu {
            for j in 0..nv {
                s += dist(&u[i * dim..(i + 1) * dim], &v[j * dim..(j + 1) * dim]);
            }
        }
        s / (nu * nv) as f64
    };
    2.0 * mean_pair(a, b) - mean_pair(a, a) - mean_pair(b, b)
}

/// Result of a permutation two-sample test on the energy statistic.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TwoSampleTest {
    pub statistic: f64,
    pub p_value: f64,
    pub permutations: usize,
}

impl TwoSampleTest {
    /// Same distribution is not rejected at level `alpha`.
    pub fn passes(&self, alpha: f64) -> bool {
        self.p_value > alpha
    }
}

/// Permutation test of equal distributions using the energy statistic.
pub fn energy_test(a: &[f64], b: &[f64], dim: usize, permutations: usize, seed: u64) -> TwoSampleTest {
    let statistic = energy_distance(a, b, dim);
    let na = a.len() / dim;
    let mut pooled: Vec<Vec<f64>> = a.chunks(dim).chain(b.chunks(dim)).map(|c| c.to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exceed = 0usize;
    for _ in 0..permutations {
        pooled.shuffle(&mut rng);
        let pa: Vec<f64> = pooled[..na].concat();
        let pb: Vec<f64> = pooled[na..].concat();
        if energy_distance(&pa, &pb, dim) >= statistic {
            exceed += 1;
        }
    }
    TwoSampleTest {
        statistic,
        p_value: (exceed + 1) as f64 / (permutations + 1) as f64,
        permutations,
    }
}

/// Ordinary least squares line `y = slope * x + intercept`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    LinearFit {
        slope,
        intercept,
        r_squared,
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    linear_fit(&lx, &ly)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn energy_1d_matches_pairwise_definition() {
        let a = [0.1, 0.5, -0.3, 2.0];
        let b = [0.0, 1.5, 0.7];
        let pair = |u: &[f64], v: &[f64]| {
            let mut s = 0.0;
            for x in u {
                for y in v {
                    s += (x - y).abs();
                }
            }
            s / (u.len() * v.len()) as f64
        };
        let direct = 2.0 * pair(&a, &b) - pair(&a, &a) - pair(&b, &b);
        assert_relative_eq!(energy_distance_1d(&a, &b), direct, epsilon = 1e-12);
    }

    #[test]
    fn loglog_recovers_power() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.5)).collect();
        let fit = loglog_fit(&xs, &ys);
        assert_relative_eq!(fit.slope, -0.5, epsilon = 1e-12);
    }

    #[test]
    fn normal_cdf_values() {
        assert_relative_eq!(normal_cdf(0.0), 0.5);
        assert_relative_eq!(normal_cdf(1.959963984540054), 0.975, epsilon = 1e-9);
    }
}
