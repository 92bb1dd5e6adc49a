//! Transport costs and discrete optimal transport.
//!
//! Four cost families are supported: the log-squared discrepancy cost
//! `log(1 + |x-y|^2 / delta^2)`, the log-linear Kantorovich-Rubinstein cost
//! `log(1 + |x-y| / delta)`, the Osgood cost `psi_delta(|x-y|^2)` built from a
//! registered modulus, and powers `|x-y|^p`. The log-squared cost is not a
//! metric, so the corresponding value is called a discrepancy and no triangle
//! inequality is ever assumed for it.
//!
//! Small problems are solved exactly with a transportation simplex; large ones
//! with entropic regularization followed by rounding onto the marginals.

mod simplex;
mod sinkhorn;

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coefficients::OsgoodModulus;
use crate::error::{Error, Result};
use crate::measures::ParticleCloud;

/// Default cap on `n * m` for the exact solver.
pub const DEFAULT_EXACT_CAP: usize = 1_000_000;

/// Marginal feasibility tolerance for returned plans.
pub const MARGINAL_TOLERANCE: f64 = 1e-9;

#[derive(Clone)]
pub enum CostSpec {
    LogSquared { delta: f64 },
    LogLinear { delta: f64 },
    Osgood { delta: f64, modulus: Arc<OsgoodModulus> },
    Power { p: f64 },
}

impl fmt::Debug for CostSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostSpec::LogSquared { delta } => write!(f, "LogSquared(delta={delta})"),
            CostSpec::LogLinear { delta } => write!(f, "LogLinear(delta={delta})"),
            CostSpec::Osgood { delta, modulus } => {
                write!(f, "Osgood(delta={delta}, rho={})", modulus.name)
            }
            CostSpec::Power { p } => write!(f, "Power(p={p})"),
        }
    }
}

impl CostSpec {
    pub fn log_squared(delta: f64) -> Result<Self> {
        check_delta(delta)?;
        Ok(CostSpec::LogSquared { delta })
    }

    pub fn log_linear(delta: f64) -> Result<Self> {
        check_delta(delta)?;
        Ok(CostSpec::LogLinear { delta })
    }

    pub fn osgood(delta: f64, modulus: Arc<OsgoodModulus>) -> Result<Self> {
        check_delta(delta)?;
        Ok(CostSpec::Osgood { delta, modulus })
    }

    pub fn power(p: f64) -> Result<Self> {
        if !(p >= 1.0 && p.is_finite()) {
            return Err(Error::InvalidExponent(p));
        }
        Ok(CostSpec::Power { p })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CostSpec::LogSquared { .. } => "log-squared",
            CostSpec::LogLinear { .. } => "log-linear",
            CostSpec::Osgood { .. } => "osgood",
            CostSpec::Power { .. } => "power",
        }
    }

    pub fn delta(&self) -> Option<f64> {
        match self {
            CostSpec::LogSquared { delta } | CostSpec::LogLinear { delta } | CostSpec::Osgood { delta, .. } => {
                Some(*delta)
            }
            CostSpec::Power { .. } => None,
        }
    }

    /// Cost as a function of the squared distance.
    pub fn of_squared_distance(&self, r2: f64) -> f64 {
        match self {
            CostSpec::LogSquared { delta } => (r2 / (delta * delta)).ln_1p(),
            CostSpec::LogLinear { delta } => (r2.sqrt() / delta).ln_1p(),
            CostSpec::Osgood { delta, modulus } => modulus.psi(r2, *delta),
            CostSpec::Power { p } => {
                if *p == 2.0 {
                    r2
                } else {
                    r2.sqrt().powf(*p)
                }
            }
        }
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidMeasure(format!("delta must be positive, got {delta}")))
    }
}

fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `c(x, y)` for the given cost family. Symmetric, zero exactly on the diagonal.
pub fn eval_cost(spec: &CostSpec, x: &[f64], y: &[f64]) -> f64 {
    spec.of_squared_distance(squared_distance(x, y))
}

/// Dense `n x m` cost matrix, row major.
pub fn cost_matrix(mu: &ParticleCloud, nu: &ParticleCloud, spec: &CostSpec) -> Vec<f64> {
    let (n, m) = (mu.len(), nu.len());
    let mut c = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            c.push(eval_cost(spec, mu.point(i), nu.point(j)));
        }
    }
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverTag {
    Exact,
    Entropic,
}

/// A coupling between two discrete measures.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransportPlan {
    pub rows: usize,
    pub cols: usize,
    pub row_weights: Vec<f64>,
    pub col_weights: Vec<f64>,
    /// Dense coupling, row major.
    pub coupling: Vec<f64>,
    /// `sum pi_ij c_ij`.
    pub cost: f64,
    pub solver: SolverTag,
    /// Primal value minus a feasible dual value; an upper bound on suboptimality.
    pub duality_gap: f64,
    pub cost_kind: String,
    pub delta: Option<f64>,
    pub iterations: usize,
}

impl TransportPlan {
    pub fn mass(&self, i: usize, j: usize) -> f64 {
        self.coupling[i * self.cols + j]
    }

    /// Largest absolute row/column marginal defect.
    pub fn marginal_error(&self) -> f64 {
        let mut err: f64 = 0.0;
        for i in 0..self.rows {
            let s: f64 = self.coupling[i * self.cols..(i + 1) * self.cols].iter().sum();
            err = err.max((s - self.row_weights[i]).abs());
        }
        for j in 0..self.cols {
            let s: f64 = (0..self.rows).map(|i| self.coupling[i * self.cols + j]).sum();
            err = err.max((s - self.col_weights[j]).abs());
        }
        err
    }

    /// Mass the plan puts on pairs satisfying `pred(i, j)`.
    pub fn mass_where(&self, mut pred: impl FnMut(usize, usize) -> bool) -> f64 {
        let mut total = 0.0;
        for i in 0..self.rows {
            for j in 0..self.cols {
                let x = self.coupling[i * self.cols + j];
                if x > 0.0 && pred(i, j) {
                    total += x;
                }
            }
        }
        total
    }

    pub fn header_json(&self) -> serde_json::Value {
        serde_json::json!({
            "cost_kind": self.cost_kind,
            "delta": self.delta,
            "value": self.cost,
            "duality_gap": self.duality_gap,
            "solver": self.solver,
            "rows": self.rows,
            "cols": self.cols,
        })
    }

    /// Nonzero entries as `(i, j, mass)` triplets.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "j", "mass"])?;
        for i in 0..self.rows {
            for j in 0..self.cols {
                let x = self.coupling[i * self.cols + j];
                if x > 0.0 {
                    w.write_record(&[i.to_string(), j.to_string(), format!("{x:.17e}")])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn check_measure(mu: &ParticleCloud, name: &str) -> Result<()> {
    let total = mu.total_weight();
    if (total - 1.0).abs() > MARGINAL_TOLERANCE {
        return Err(Error::InvalidMeasure(format!("{name} weights sum to {total}")));
    }
    Ok(())
}

fn check_pair(mu: &ParticleCloud, nu: &ParticleCloud) -> Result<()> {
    check_measure(mu, "row measure")?;
    check_measure(nu, "column measure")?;
    if mu.dim() != nu.dim() {
        return Err(Error::InvalidMeasure(format!(
            "dimensions differ: {} vs {}",
            mu.dim(),
            nu.dim()
        )));
    }
    Ok(())
}

/// Options for [`solve_exact_with`].
#[derive(Clone, Copy, Debug)]
pub struct ExactOptions {
    pub cap: usize,
    pub max_iterations: usize,
}

impl Default for ExactOptions {
    fn default() -> Self {
        Self {
            cap: DEFAULT_EXACT_CAP,
            max_iterations: 5_000_000,
        }
    }
}

pub fn solve_exact(mu: &ParticleCloud, nu: &ParticleCloud, spec: &CostSpec) -> Result<TransportPlan> {
    solve_exact_with(mu, nu, spec, ExactOptions::default())
}

pub fn solve_exact_with(
    mu: &ParticleCloud,
    nu: &ParticleCloud,
    spec: &CostSpec,
    opts: ExactOptions,
) -> Result<TransportPlan> {
    check_pair(mu, nu)?;
    let (n, m) = (mu.len(), nu.len());
    if n * m > opts.cap {
        return Err(Error::SizeCapExceeded { n, m, cap: opts.cap });
    }
    let cost = cost_matrix(mu, nu, spec);
    solve_exact_matrix(mu.weights(), nu.weights(), &cost, mu, nu, spec, opts)
}

/// Exact LP on a precomputed cost matrix.
pub(crate) fn solve_exact_matrix(
    a: &[f64],
    b_raw: &[f64],
    cost: &[f64],
    mu: &ParticleCloud,
    nu: &ParticleCloud,
    spec: &CostSpec,
    opts: ExactOptions,
) -> Result<TransportPlan> {
    let (n, m) = (a.len(), b_raw.len());
    let sa: f64 = a.iter().sum();
    let sb: f64 = b_raw.iter().sum();
    let b: Vec<f64> = b_raw.iter().map(|x| x * sa / sb).collect();
    // sorting by the first coordinate makes the start the monotone coupling in 1D
    let order = |c: &ParticleCloud| {
        let mut idx: Vec<usize> = (0..c.len()).collect();
        idx.sort_by(|&p, &q| c.point(p)[0].total_cmp(&c.point(q)[0]));
        idx
    };
    let sol = simplex::solve(a, &b, cost, &order(mu), &order(nu), opts.max_iterations)?;
    let primal: f64 = sol.flow.iter().zip(cost).map(|(x, c)| x * c).sum();
    let dual: f64 = a.iter().zip(&sol.row_potential).map(|(w, u)| w * u).sum::<f64>()
        + b.iter().zip(&sol.col_potential).map(|(w, v)| w * v).sum::<f64>();
    let plan = TransportPlan {
        rows: n,
        cols: m,
        row_weights: a.to_vec(),
        col_weights: b_raw.to_vec(),
        coupling: sol.flow,
        cost: primal,
        solver: SolverTag::Exact,
        duality_gap: (primal - dual).abs(),
        cost_kind: spec.kind().into(),
        delta: spec.delta(),
        iterations: sol.iterations,
    };
    Ok(plan)
}

/// Options for [`solve_entropic_with`].
#[derive(Clone, Copy, Debug)]
pub struct EntropicOptions {
    pub epsilon: f64,
    pub max_iterations: usize,
    /// L1 row-marginal defect at which iteration stops (before rounding).
    pub marginal_tol: f64,
}

pub fn solve_entropic(
    mu: &ParticleCloud,
    nu: &ParticleCloud,
    spec: &CostSpec,
    epsilon: f64,
    max_iterations: usize,
) -> Result<TransportPlan> {
    solve_entropic_with(
        mu,
        nu,
        spec,
        EntropicOptions {
            epsilon,
            max_iterations,
            marginal_tol: 1e-9,
        },
    )
}

pub fn solve_entropic_with(
    mu: &ParticleCloud,
    nu: &ParticleCloud,
    spec: &CostSpec,
    opts: EntropicOptions,
) -> Result<TransportPlan> {
    check_pair(mu, nu)?;
    if !(opts.epsilon > 0.0) {
        return Err(Error::InvalidMeasure(format!(
            "regularization must be positive, got {}",
            opts.epsilon
        )));
    }
    let (n, m) = (mu.len(), nu.len());
    let cost = cost_matrix(mu, nu, spec);
    let out = sinkhorn::run(
        mu.weights(),
        nu.weights(),
        &cost,
        opts.epsilon,
        opts.max_iterations,
        opts.marginal_tol,
    )?;
    let primal: f64 = out.plan.iter().zip(&cost).map(|(x, c)| x * c).sum();
    // c-transform of f gives a feasible dual pair, hence a lower bound
    let g: Vec<f64> = (0..m)
        .map(|j| (0..n).map(|i| cost[i * m + j] - out.f[i]).fold(f64::INFINITY, f64::min))
        .collect();
    let dual: f64 = mu.weights().iter().zip(&out.f).map(|(w, f)| w * f).sum::<f64>()
        + nu.weights().iter().zip(&g).map(|(w, g)| w * g).sum::<f64>();
    Ok(TransportPlan {
        rows: n,
        cols: m,
        row_weights: mu.weights().to_vec(),
        col_weights: nu.weights().to_vec(),
        coupling: out.plan,
        cost: primal,
        solver: SolverTag::Entropic,
        duality_gap: (primal - dual).max(0.0),
        cost_kind: spec.kind().into(),
        delta: spec.delta(),
        iterations: out.iterations,
    })
}

/// Exact when the problem fits under the cap, entropic otherwise.
pub fn solve_auto(mu: &ParticleCloud, nu: &ParticleCloud, spec: &CostSpec) -> Result<TransportPlan> {
    match solve_exact(mu, nu, spec) {
        Err(Error::SizeCapExceeded { .. }) => {
            let scale = cost_matrix_scale(mu, nu, spec);
            solve_entropic(mu, nu, spec, 1e-3 * scale.max(1e-12), 100_000)
        }
        other => other,
    }
}

fn cost_matrix_scale(mu: &ParticleCloud, nu: &ParticleCloud, spec: &CostSpec) -> f64 {
    let mut s: f64 = 0.0;
    for i in 0..mu.len().min(50) {
        for j in 0..nu.len().min(50) {
            s = s.max(eval_cost(spec, mu.point(i), nu.point(j)));
        }
    }
    s
}

/// `W_p` between weighted 1D measures by monotone rearrangement.
pub fn wasserstein_1d(mu: &ParticleCloud, nu: &ParticleCloud, p: f64) -> Result<f64> {
    Ok(power_cost_1d(mu, nu, p)?.powf(1.0 / p))
}

/// `int |F^-1 - G^-1|^p` for weighted 1D measures.
pub fn power_cost_1d(mu: &ParticleCloud, nu: &ParticleCloud, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::InvalidExponent(p));
    }
    check_pair(mu, nu)?;
    if mu.dim() != 1 {
        return Err(Error::InvalidMeasure("quantile path needs 1D measures".into()));
    }
    let sorted = |c: &ParticleCloud| {
        let mut v: Vec<(f64, f64)> = (0..c.len()).map(|i| (c.point(i)[0], c.weights()[i])).collect();
        v.sort_by(|x, y| x.0.total_cmp(&y.0));
        v
    };
    let (xs, ys) = (sorted(mu), sorted(nu));
    let (mut i, mut j) = (0usize, 0usize);
    let (mut ra, mut rb) = (xs[0].1, ys[0].1);
    let mut total = 0.0;
    loop {
        let t = ra.min(rb);
        total += t * (xs[i].0 - ys[j].0).abs().powf(p);
        ra -= t;
        rb -= t;
        if ra <= 0.0 {
            i += 1;
            if i == xs.len() {
                break;
            }
            ra = xs[i].1;
        }
        if rb <= 0.0 {
            j += 1;
            if j == ys.len() {
                break;
            }
            rb = ys[j].1;
        }
    }
    Ok(total)
}

/// `W_p` between two 1D grid densities via their piecewise-linear quantile
/// functions, integrated with `levels` midpoint quantile levels.
pub fn wasserstein_densities_1d(
    u: &crate::measures::GridDensity,
    v: &crate::measures::GridDensity,
    p: f64,
    levels: usize,
) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::InvalidExponent(p));
    }
    let s: f64 = (0..levels)
        .map(|k| {
            let l = (k as f64 + 0.5) / levels as f64;
            (u.quantile(l) - v.quantile(l)).abs().powf(p)
        })
        .sum::<f64>()
        / levels as f64;
    Ok(s.powf(1.0 / p))
}

/// `W_p(mu, nu)`: the 1D quantile path or the exact LP otherwise.
pub fn wasserstein(mu: &ParticleCloud, nu: &ParticleCloud, p: f64) -> Result<f64> {
    if mu.dim() == 1 {
        return wasserstein_1d(mu, nu, p);
    }
    let plan = solve_exact(mu, nu, &CostSpec::power(p)?)?;
    Ok(plan.cost.max(0.0).powf(1.0 / p))
}

/// Log-squared discrepancy by the exact solver.
pub fn log_discrepancy(mu: &ParticleCloud, nu: &ParticleCloud, delta: f64) -> Result<f64> {
    Ok(solve_exact(mu, nu, &CostSpec::log_squared(delta)?)?.cost)
}

/// Both costs and the two comparison inequalities between them.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DistanceRelations {
    pub delta: f64,
    /// Log-linear Kantorovich-Rubinstein distance.
    pub d: f64,
    /// Log-squared discrepancy.
    pub tilde_d: f64,
    /// `tilde_d <= 2 d`.
    pub lhs1: f64,
    pub rhs1: f64,
    /// `d <= sqrt(tilde_d / log 2) + tilde_d`.
    pub lhs2: f64,
    pub rhs2: f64,
    pub holds: bool,
}

pub fn distance_relations(mu: &ParticleCloud, nu: &ParticleCloud, delta: f64) -> Result<DistanceRelations> {
    let d = solve_exact(mu, nu, &CostSpec::log_linear(delta)?)?.cost;
    let tilde_d = solve_exact(mu, nu, &CostSpec::log_squared(delta)?)?.cost;
    let rhs1 = 2.0 * d;
    let rhs2 = (tilde_d.max(0.0) / std::f64::consts::LN_2).sqrt() + tilde_d;
    let slack = 1e-12;
    Ok(DistanceRelations {
        delta,
        d,
        tilde_d,
        lhs1: tilde_d,
        rhs1,
        lhs2: d,
        rhs2,
        holds: tilde_d <= rhs1 + slack && d <= rhs2 + slack,
    })
}
