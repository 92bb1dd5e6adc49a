//! Log-domain Sinkhorn iterations with epsilon scaling and marginal rounding.

use crate::error::{Error, Result};

pub(crate) struct SinkhornOutput {
    pub plan: Vec<f64>,
    /// Row potential `f`; the column potential is recovered by c-transform.
    pub f: Vec<f64>,
    pub iterations: usize,
}

fn log_sum_exp(values: impl Iterator<Item = f64>, scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    scratch.extend(values);
    let max = scratch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + scratch.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Runs Sinkhorn to regularization `eps`, annealing from the cost scale.
pub(crate) fn run(
    a: &[f64],
    b: &[f64],
    cost: &[f64],
    eps: f64,
    max_iterations: usize,
    marginal_tol: f64,
) -> Result<SinkhornOutput> {
    let (n, m) = (a.len(), b.len());
    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let scale = cost.iter().cloned().fold(0.0f64, f64::max).max(eps);
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut scratch = Vec::with_capacity(n.max(m));
    let mut iterations = 0usize;
    let mut level = scale;

    let sweep = |f: &mut [f64], g: &mut [f64], e: f64, scratch: &mut Vec<f64>| {
        for i in 0..n {
            let row = &cost[i * m..(i + 1) * m];
            let lse = log_sum_exp((0..m).map(|j| (g[j] - row[j]) / e + log_b[j]), scratch);
            f[i] = -e * lse;
        }
        for j in 0..m {
            let lse = log_sum_exp((0..n).map(|i| (f[i] - cost[i * m + j]) / e + log_a[i]), scratch);
            g[j] = -e * lse;
        }
    };

    // anneal: a few sweeps per halving
    while level > eps {
        for _ in 0..10 {
            sweep(&mut f, &mut g, level, &mut scratch);
            iterations += 1;
        }
        level = (level * 0.5).max(eps);
    }

    let mut last_change = f64::INFINITY;
    let mut marginal_error = f64::INFINITY;
    while iterations < max_iterations {
        let before = f.clone();
        sweep(&mut f, &mut g, eps, &mut scratch);
        iterations += 1;
        last_change = f.iter().zip(&before).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        // columns are exact after the g-update; measure the row defect
        marginal_error = (0..n)
            .map(|i| {
                let s: f64 = (0..m)
                    .map(|j| (log_a[i] + log_b[j] + (f[i] + g[j] - cost[i * m + j]) / eps).exp())
                    .sum();
                (s - a[i]).abs()
            })
            .sum();
        if marginal_error <= marginal_tol {
            break;
        }
    }
    if marginal_error > marginal_tol {
        return Err(Error::ConvergenceFailure {
            iterations,
            marginal_error,
            last_change,
        });
    }

    let mut plan = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            plan[i * m + j] = (log_a[i] + log_b[j] + (f[i] + g[j] - cost[i * m + j]) / eps).exp();
        }
    }
    round_to_marginals(&mut plan, a, b);
    Ok(SinkhornOutput { plan, f, iterations })
}

/// Projects a nonnegative matrix onto the coupling polytope: scale rows and
/// columns down to their targets, then distribute the remaining defect as a
/// rank-one correction.
pub(crate) fn round_to_marginals(plan: &mut [f64], a: &[f64], b: &[f64]) {
    let (n, m) = (a.len(), b.len());
    for i in 0..n {
        let s: f64 = plan[i * m..(i + 1) * m].iter().sum();
        if s > a[i] && s > 0.0 {
            let r = a[i] / s;
            plan[i * m..(i + 1) * m].iter_mut().for_each(|x| *x *= r);
        }
    }
    for j in 0..m {
        let s: f64 = (0..n).map(|i| plan[i * m + j]).sum();
        if s > b[j] && s > 0.0 {
            let r = b[j] / s;
            (0..n).for_each(|i| plan[i * m + j] *= r);
        }
    }
    let row_def: Vec<f64> = (0..n)
        .map(|i| (a[i] - plan[i * m..(i + 1) * m].iter().sum::<f64>()).max(0.0))
        .collect();
    let col_def: Vec<f64> = (0..m)
        .map(|j| (b[j] - (0..n).map(|i| plan[i * m + j]).sum::<f64>()).max(0.0))
        .collect();
    let total: f64 = row_def.iter().sum();
    if total > 0.0 {
        for i in 0..n {
            for j in 0..m {
                plan[i * m + j] += row_def[i] * col_def[j] / total;
            }
        }
    }
}
