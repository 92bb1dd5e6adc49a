//! Zvonkin transformation: the backward system
//!
//! `d_t phi + (1/2) lap phi + b . grad phi - lambda phi = -b`,  `phi_T = 0`,
//!
//! the map `psi_t(x) = x + phi_t(x)` with its fixed-point inverse, and the
//! transformed coefficients `sigma~ = Id + grad phi o psi^-1`,
//! `b~ = lambda phi o psi^-1`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{axis_derivative, interpolate_components, CoefficientField};
use crate::error::{Error, Result};
use crate::measures::BoxGrid;

/// Number of stored time frames (plus the terminal one).
pub const DEFAULT_FRAMES: usize = 100;
pub const LAMBDA_CAP: f64 = 1073741824.0;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ZvonkinSolution {
    pub lambda: f64,
    pub grid: BoxGrid,
    pub horizon: f64,
    /// Ascending frame times, first `0`, last `T`.
    pub times: Vec<f64>,
    /// `phi[frame]`, `d` components per cell.
    pub phi: Vec<Vec<f64>>,
    /// `grad[frame]`, `d x d` row-major per cell, entry `(i, k) = d_k phi^i`.
    pub grad: Vec<Vec<f64>>,
    /// Sup over frames of the Lipschitz constant of the interpolated `phi_t`
    /// (Frobenius norm of the interpolant's Jacobian at interpolation-cell corners).
    pub grad_sup: f64,
    pub phi_sup: f64,
    /// PDE residual `L^2` norm on interior cells, per stored frame strictly
    /// inside `(0, T)`: `(t, norm)`.
    pub residuals: Vec<(f64, f64)>,
    pub dt: f64,
    pub steps: usize,
    pub source: String,
}

impl ZvonkinSolution {
    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().map(|r| r.1).fold(0.0, f64::max)
    }

    fn bracket(&self, t: f64) -> (usize, usize, f64) {
        let k = self.times.partition_point(|&s| s < t);
        if k == 0 {
            return (0, 0, 0.0);
        }
        if k >= self.times.len() {
            let last = self.times.len() - 1;
            return (last, last, 0.0);
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        (k - 1, k, (t - t0) / (t1 - t0))
    }

    fn interp(&self, frames: &[Vec<f64>], stride: usize, t: f64, x: &[f64], out: &mut [f64]) {
        let (a, b, w) = self.bracket(t);
        for c in 0..stride {
            let va = interpolate_components(&self.grid, &frames[a], stride, c, x);
            out[c] = if w == 0.0 {
                va
            } else {
                (1.0 - w) * va + w * interpolate_components(&self.grid, &frames[b], stride, c, x)
            };
        }
    }

    /// `phi_t(x)` by multilinear interpolation in space, linear in time.
    pub fn phi_at(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.interp(&self.phi, self.dim(), t, x, &mut out);
        out
    }

    /// `grad phi_t(x)`, row-major `d x d`.
    pub fn grad_at(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d * d];
        self.interp(&self.grad, d * d, t, x, &mut out);
        out
    }

    /// Writes every frame as CSV `t,x1[,x2],phi_1..,dphi_11..`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let d = self.dim();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|k| format!("x{k}")));
        header.extend((1..=d).map(|k| format!("phi{k}")));
        for i in 1..=d {
            header.extend((1..=d).map(|k| format!("dphi{i}_{k}")));
        }
        w.write_record(&header)?;
        for (f, &t) in self.times.iter().enumerate() {
            for idx in 0..self.grid.len() {
                let mut row = vec![format!("{t:.17e}")];
                row.extend(self.grid.center(idx).iter().map(|v| format!("{v:.17e}")));
                row.extend(self.phi[f][idx * d..(idx + 1) * d].iter().map(|v| format!("{v:.17e}")));
                row.extend(
                    self.grad[f][idx * d * d..(idx + 1) * d * d]
                        .iter()
                        .map(|v| format!("{v:.17e}")),
                );
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "lambda": self.lambda,
            "source": self.source,
            "dt": self.dt,
            "steps": self.steps,
            "frames": self.times.len(),
            "grad_sup": self.grad_sup,
            "phi_sup": self.phi_sup,
            "max_residual": self.max_residual(),
            "residual_threshold": 10.0 * self.grid.min_spacing(),
        })
    }
}

/// Largest stable step for the explicit backward scheme; the zeroth-order
/// term is integrated exactly and imposes no restriction.
pub fn stable_step(field: &CoefficientField, grid: &BoxGrid) -> f64 {
    let d = grid.dim();
    let mut bmax = vec![0.0f64; d];
    for s in 0..=4 {
        let t = field.horizon * s as f64 / 4.0;
        for idx in 0..grid.len() {
            let b = field.drift_at(t, &grid.center(idx));
            for k in 0..d {
                bmax[k] = bmax[k].max(b[k].abs());
            }
        }
    }
    let rate: f64 = (0..d)
        .map(|k| {
            let h = grid.spacing(k);
            1.0 / (h * h) + bmax[k] / h
        })
        .sum();
    0.9 / rate
}

/// Solves backward from `phi_T = 0` with exponential Euler in the
/// zeroth-order term and centred differences in space (Neumann boundaries).
/// `steps = None` picks the smallest stable count.
pub fn solve_backward(
    field: &CoefficientField,
    lambda: f64,
    grid: &BoxGrid,
    steps: Option<usize>,
) -> Result<ZvonkinSolution> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidCoefficients(format!("lambda = {lambda} must be > 0")));
    }
    if field.dim() != grid.dim() {
        return Err(Error::InvalidCoefficients("field and grid dimensions differ".into()));
    }
    let d = grid.dim();
    for k in 0..d {
        if grid.cells()[k] < 5 {
            return Err(Error::InvalidGrid(
                "the backward solver needs at least 5 cells per axis".into(),
            ));
        }
    }
    let horizon = field.horizon;
    let limit = stable_step(field, grid);
    let steps = match steps {
        Some(n) => {
            let dt = horizon / n as f64;
            if dt > limit * (1.0 + 1e-12) {
                return Err(Error::StepSize {
                    requested: dt,
                    suggested: limit,
                });
            }
            n
        }
        None => (horizon / limit).ceil().max(1.0) as usize,
    };
    let dt = horizon / steps as f64;
    let stride = steps.div_ceil(DEFAULT_FRAMES).max(1);
    let n_cells = grid.len();
    let centers: Vec<Vec<f64>> = (0..n_cells).map(|i| grid.center(i)).collect();
    let decay = (-lambda * dt).exp();
    // (1 - e^{-lambda dt}) / lambda, stable for small lambda dt
    let gain = -(-lambda * dt).exp_m1() / lambda;

    let drift_frame = |t: f64| -> Vec<f64> {
        let mut b = vec![0.0; n_cells * d];
        b.par_chunks_mut(d)
            .zip(&centers)
            .for_each(|(out, x)| field.eval_drift(t, x, out));
        b
    };

    let mut phi = vec![0.0; n_cells * d];
    // stored in backward order, reversed at the end
    let mut frames: Vec<(f64, Vec<f64>)> = vec![(horizon, phi.clone())];
    let mut residuals = Vec::new();
    let mut pending: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for n in 0..steps {
        let t = horizon - n as f64 * dt;
        let b = drift_frame(t);
        let mut next = vec![0.0; n_cells * d];
        next.par_chunks_mut(d).enumerate().for_each(|(idx, out)| {
            let ij = grid.unflatten(idx);
            for c in 0..d {
                let mut op = b[idx * d + c];
                for k in 0..d {
                    let h = grid.spacing(k);
                    let (m, p) = neighbours(grid, ij, k);
                    let (vm, v0, vp) = (phi[m * d + c], phi[idx * d + c], phi[p * d + c]);
                    op += 0.5 * (vp - 2.0 * v0 + vm) / (h * h);
                    op += b[idx * d + k] * (vp - vm) / (2.0 * h);
                }
                out[c] = decay * phi[idx * d + c] + gain * op;
            }
        });
        if let Some((tf, before, at)) = pending.take() {
            residuals.push((tf, residual_norm(field, grid, lambda, tf, dt, &before, &at, &next)));
        }
        let reached = n + 1;
        if reached % stride == 0 || reached == steps {
            let tf = horizon - reached as f64 * dt;
            let tf = if reached == steps { 0.0 } else { tf };
            frames.push((tf, next.clone()));
            if reached != steps {
                pending = Some((tf, phi.clone(), next.clone()));
            }
        }
        phi = next;
    }
    frames.reverse();
    residuals.reverse();
    let (times, phi_frames): (Vec<f64>, Vec<Vec<f64>>) = frames.into_iter().unzip();
    let grad: Vec<Vec<f64>> = phi_frames.iter().map(|p| gradient_frame(grid, p)).collect();
    let grad_sup = phi_frames
        .iter()
        .map(|p| interpolant_lipschitz(grid, p))
        .fold(0.0, f64::max);
    let phi_sup = phi_frames.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let sol = ZvonkinSolution {
        lambda,
        grid: grid.clone(),
        horizon,
        times,
        phi: phi_frames,
        grad,
        grad_sup,
        phi_sup,
        residuals,
        dt,
        steps,
        source: field.name.clone(),
    };
    let threshold = 10.0 * grid.min_spacing();
    if sol.max_residual() > threshold {
        log::warn!(
            "accuracy warning: residual {:.3e} above {:.3e} for lambda = {lambda}",
            sol.max_residual(),
            threshold
        );
    }
    Ok(sol)
}

/// Neighbours along `axis` with Neumann (mirror) ghosts.
fn neighbours(grid: &BoxGrid, ij: [usize; 2], axis: usize) -> (usize, usize) {
    let n = grid.cells()[axis];
    let mut lo = ij;
    let mut hi = ij;
    lo[axis] = ij[axis].saturating_sub(1);
    hi[axis] = (ij[axis] + 1).min(n - 1);
    (grid.flatten(lo[0], lo[1]), grid.flatten(hi[0], hi[1]))
}

fn gradient_frame(grid: &BoxGrid, phi: &[f64]) -> Vec<f64> {
    let d = grid.dim();
    let mut out = vec![0.0; grid.len() * d * d];
    for i in 0..d {
        for k in 0..d {
            let dk = axis_derivative(grid, phi, d, i, k);
            for idx in 0..grid.len() {
                out[idx * d * d + i * d + k] = dk[idx];
            }
        }
    }
    out
}

/// Lipschitz constant of the multilinear interpolant: its Jacobian is
/// multilinear on each interpolation cell, so the Frobenius norm peaks at a corner.
fn interpolant_lipschitz(grid: &BoxGrid, phi: &[f64]) -> f64 {
    let d = grid.dim();
    if d == 1 {
        let h = grid.spacing(0);
        return phi.windows(2).map(|w| (w[1] - w[0]).abs() / h).fold(0.0, f64::max);
    }
    let (nx, ny) = (grid.cells()[0], grid.cells()[1]);
    let (hx, hy) = (grid.spacing(0), grid.spacing(1));
    let at = |i: usize, j: usize, c: usize| phi[grid.flatten(i, j) * 2 + c];
    let mut best: f64 = 0.0;
    for i in 0..nx - 1 {
        for j in 0..ny - 1 {
            for (ci, cj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let mut f2 = 0.0;
                for c in 0..2 {
                    let dx = (at(i + 1, j + cj, c) - at(i, j + cj, c)) / hx;
                    let dy = (at(i + ci, j + 1, c) - at(i + ci, j, c)) / hy;
                    f2 += dx * dx + dy * dy;
                }
                best = best.max(f2.sqrt());
            }
        }
    }
    best
}

/// `L^2` norm over cells at least two away from the boundary of
/// `d_t phi + (1/2) lap phi + b . grad phi - lambda phi + b`, with fourth-order
/// stencils in space and a centred difference in time.
#[allow(clippy::too_many_arguments)]
fn residual_norm(
    field: &CoefficientField,
    grid: &BoxGrid,
    lambda: f64,
    t: f64,
    dt: f64,
    later: &[f64],
    now: &[f64],
    earlier: &[f64],
) -> f64 {
    let d = grid.dim();
    let total: f64 = (0..grid.len())
        .into_par_iter()
        .filter_map(|idx| {
            let ij = grid.unflatten(idx);
            if (0..d).any(|k| ij[k] < 2 || ij[k] + 2 >= grid.cells()[k]) {
                return None;
            }
            let x = grid.center(idx);
            let b = field.drift_at(t, &x);
            let mut sq = 0.0;
            for c in 0..d {
                let mut r = (later[idx * d + c] - earlier[idx * d + c]) / (2.0 * dt);
                for k in 0..d {
                    let h = grid.spacing(k);
                    let at = |off: isize| {
                        let mut m = ij;
                        m[k] = (ij[k] as isize + off) as usize;
                        now[grid.flatten(m[0], m[1]) * d + c]
                    };
                    let (m2, m1, z, p1, p2) = (at(-2), at(-1), at(0), at(1), at(2));
                    r += 0.5 * (-p2 + 16.0 * p1 - 30.0 * z + 16.0 * m1 - m2) / (12.0 * h * h);
                    r += b[k] * (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
                }
                r += -lambda * now[idx * d + c] + b[c];
                sq += r * r;
            }
            Some(sq)
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    (total * grid.cell_volume()).sqrt()
}

/// Outcome of the doubling search.
#[derive(Clone, Debug)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub achieved: f64,
    pub tried: Vec<(f64, f64)>,
    pub solution: ZvonkinSolution,
}

/// Doubles `lambda` from 1 until `sup_t |grad phi_t| <= target`.
pub fn select_lambda(field: &CoefficientField, grid: &BoxGrid, target: f64) -> Result<LambdaSelection> {
    let mut lambda = 1.0;
    let mut tried = Vec::new();
    loop {
        let sol = solve_backward(field, lambda, grid, None)?;
        tried.push((lambda, sol.grad_sup));
        if sol.grad_sup <= target {
            return Ok(LambdaSelection {
                lambda,
                achieved: sol.grad_sup,
                tried,
                solution: sol,
            });
        }
        if lambda >= LAMBDA_CAP {
            return Err(Error::SelectionFailure {
                lambda,
                achieved: sol.grad_sup,
            });
        }
        lambda *= 2.0;
    }
}

/// `psi_t(x) = x + phi_t(x)` backed by a solution.
#[derive(Clone, Debug)]
pub struct Diffeomorphism {
    pub solution: Arc<ZvonkinSolution>,
}

impl Diffeomorphism {
    pub fn new(solution: ZvonkinSolution) -> Self {
        Self {
            solution: Arc::new(solution),
        }
    }

    pub fn forward(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let phi = self.solution.phi_at(t, x);
        x.iter().zip(&phi).map(|(a, b)| a + b).collect()
    }

    /// `Id + grad phi_t(x)`.
    pub fn jacobian(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let d = self.solution.dim();
        let mut j = self.solution.grad_at(t, x);
        for k in 0..d {
            j[k * d + k] += 1.0;
        }
        j
    }

    pub fn invert(&self, t: f64, y: &[f64]) -> Result<Vec<f64>> {
        self.invert_with(t, y, 1e-10, 100).map(|r| r.0)
    }

    /// Fixed point `x <- y - phi_t(x)` from `x = y`; returns the point and
    /// the iteration count.
    pub fn invert_with(&self, t: f64, y: &[f64], tol: f64, max_iter: usize) -> Result<(Vec<f64>, usize)> {
        let mut x = y.to_vec();
        let mut step = f64::INFINITY;
        for it in 1..=max_iter {
            let phi = self.solution.phi_at(t, &x);
            let next: Vec<f64> = y.iter().zip(&phi).map(|(a, b)| a - b).collect();
            step = next.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            x = next;
            if step <= tol {
                return Ok((x, it));
            }
        }
        Err(Error::ContractionFailure {
            iterations: max_iter,
            residual: step,
        })
    }
}

/// `sigma~` and `b~` as a coefficient field, with sampled Lipschitz seminorms.
#[derive(Clone, Debug)]
pub struct TransformedCoefficients {
    pub field: CoefficientField,
    pub lipschitz_sigma: f64,
    pub lipschitz_drift: f64,
    pub psi: Diffeomorphism,
}

pub fn transform_coefficients(sol: &ZvonkinSolution) -> Result<TransformedCoefficients> {
    if sol.grad_sup > 0.5 {
        return Err(Error::InvalidCoefficients(format!(
            "sup |grad phi| = {:.4} exceeds 1/2; select a larger lambda",
            sol.grad_sup
        )));
    }
    let psi = Diffeomorphism::new(sol.clone());
    let d = sol.dim();
    // every frame must invert at the grid centres
    for &t in &sol.times {
        for idx in (0..sol.grid.len()).step_by((sol.grid.len() / 50).max(1)) {
            psi.invert(t, &sol.grid.center(idx))?;
        }
    }
    let lambda = sol.lambda;
    let inv = move |p: &Diffeomorphism, t: f64, y: &[f64]| match p.invert(t, y) {
        Ok(x) => x,
        Err(e) => {
            log::warn!("inverse at t = {t}: {e}");
            y.to_vec()
        }
    };
    let (pd, ps) = (psi.clone(), psi.clone());
    let drift = Arc::new(move |t: f64, y: &[f64], out: &mut [f64]| {
        let x = inv(&pd, t, y);
        let phi = pd.solution.phi_at(t, &x);
        for k in 0..out.len() {
            out[k] = lambda * phi[k];
        }
    });
    let diffusion = Arc::new(move |t: f64, y: &[f64], out: &mut [f64]| {
        let x = inv(&ps, t, y);
        out.copy_from_slice(&ps.jacobian(t, &x));
    });
    let field = CoefficientField::new(format!("zvonkin({})", sol.source), d, d, sol.horizon, drift, diffusion);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5a);
    let (mut ls, mut lb) = (0.0f64, 0.0f64);
    for _ in 0..500 {
        let t = rng.random_range(0.0..=sol.horizon);
        let x: Vec<f64> = (0..d)
            .map(|k| rng.random_range(sol.grid.lower()[k]..sol.grid.upper()[k]))
            .collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
        let r = crate::coefficients::distance(&x, &y);
        if r == 0.0 {
            continue;
        }
        ls = ls.max(crate::coefficients::distance(&field.diffusion_at(t, &x), &field.diffusion_at(t, &y)) / r);
        lb = lb.max(crate::coefficients::distance(&field.drift_at(t, &x), &field.drift_at(t, &y)) / r);
    }
    let field = field.with_lipschitz(lb.max(ls));
    Ok(TransformedCoefficients {
        field,
        lipschitz_sigma: ls,
        lipschitz_drift: lb,
        psi,
    })
}

/// Sampled `max |psi^-1(x) - psi^-1(y)| / |x - y|` over random pairs and times.
pub fn inverse_lipschitz_ratio(psi: &Diffeomorphism, pairs: usize, seed: u64) -> Result<f64> {
    let sol = &psi.solution;
    let d = sol.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for k in 0..pairs {
        let t = rng.random_range(0.0..=sol.horizon);
        let x: Vec<f64> = (0..d)
            .map(|a| rng.random_range(sol.grid.lower()[a]..sol.grid.upper()[a]))
            .collect();
        let scale = if k % 2 == 0 { 1.0 } else { 1e-3 };
        let y: Vec<f64> = x.iter().map(|v| v + scale * rng.random_range(-1.0..1.0)).collect();
        let r = crate::coefficients::distance(&x, &y);
        if r == 0.0 {
            continue;
        }
        let (ix, iy) = (
            psi.invert_with(t, &x, 1e-13, 200)?.0,
            psi.invert_with(t, &y, 1e-13, 200)?.0,
        );
        worst = worst.max(crate::coefficients::distance(&ix, &iy) / r);
    }
    Ok(worst)
}

/// Extreme eigenvalues of `sigma~ sigma~^*` over random samples.
pub fn ellipticity_range(tc: &TransformedCoefficients, samples: usize, seed: u64) -> (f64, f64) {
    let sol = &tc.psi.solution;
    let d = sol.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for _ in 0..samples {
        let t = rng.random_range(0.0..=sol.horizon);
        let y: Vec<f64> = (0..d)
            .map(|a| rng.random_range(sol.grid.lower()[a]..sol.grid.upper()[a]))
            .collect();
        let a = tc.field.diffusivity_at(t, &y);
        let (e0, e1) = if d == 1 {
            (a[0], a[0])
        } else {
            let (p, q, r) = (a[0], a[1], a[3]);
            let mid = 0.5 * (p + r);
            let rad = (0.25 * (p - r) * (p - r) + q * q).sqrt();
            (mid - rad, mid + rad)
        };
        lo = lo.min(e0);
        hi = hi.max(e1);
    }
    (lo, hi)
}

/// Difference norms between two Zvonkin solutions on the same grid and `lambda`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformComparison {
    pub p: f64,
    pub q: f64,
    /// `||b1 - b2||_{L^q(L^p)}`.
    pub drift_difference: f64,
    /// `sup_t ||phi1_t - phi2_t||_{W^{1,p}}`.
    pub phi_difference: f64,
    /// `||b~1 - b~2||_{L^inf(L^p)}`.
    pub transformed_drift_difference: f64,
    /// `||sigma~1 - sigma~2||_{L^q(L^p)}`.
    pub transformed_diffusion_difference: f64,
    pub ratio_phi: f64,
    pub ratio_drift: f64,
    pub ratio_diffusion: f64,
}

pub fn compare_transforms(
    b1: &CoefficientField,
    s1: &ZvonkinSolution,
    b2: &CoefficientField,
    s2: &ZvonkinSolution,
    p: f64,
    q: f64,
) -> Result<TransformComparison> {
    if s1.grid != s2.grid || s1.lambda != s2.lambda || s1.times.len() != s2.times.len() {
        return Err(Error::Config("solutions must share grid, lambda and frames".into()));
    }
    let grid = &s1.grid;
    let d = grid.dim();
    let vol = grid.cell_volume();
    let lp = |vals: &[f64]| -> f64 { (vals.iter().map(|v| v.abs().powf(p)).sum::<f64>() * vol).powf(1.0 / p) };
    let drift_difference = crate::coefficients::spacetime_norm(
        grid,
        s1.horizon,
        s1.times.len().max(2) - 1,
        q,
        p,
        crate::coefficients::drift_difference(b1, b2),
    )?;
    let (psi1, psi2) = (Diffeomorphism::new(s1.clone()), Diffeomorphism::new(s2.clone()));
    let mut phi_sup: f64 = 0.0;
    let mut bt_sup: f64 = 0.0;
    let mut sig_frames = Vec::new();
    for f in 0..s1.times.len() {
        let t = s1.times[f];
        let mut pd = Vec::with_capacity(grid.len());
        let mut gd = Vec::with_capacity(grid.len());
        let mut bd = Vec::with_capacity(grid.len());
        let mut sd = Vec::with_capacity(grid.len());
        for idx in 0..grid.len() {
            let dp =
                crate::coefficients::distance(&s1.phi[f][idx * d..(idx + 1) * d], &s2.phi[f][idx * d..(idx + 1) * d]);
            let dg = crate::coefficients::distance(
                &s1.grad[f][idx * d * d..(idx + 1) * d * d],
                &s2.grad[f][idx * d * d..(idx + 1) * d * d],
            );
            pd.push(dp);
            gd.push(dg);
            let y = grid.center(idx);
            let (x1, x2) = (psi1.invert(t, &y)?, psi2.invert(t, &y)?);
            let bt1: Vec<f64> = s1.phi_at(t, &x1).iter().map(|v| s1.lambda * v).collect();
            let bt2: Vec<f64> = s2.phi_at(t, &x2).iter().map(|v| s2.lambda * v).collect();
            bd.push(crate::coefficients::distance(&bt1, &bt2));
            sd.push(crate::coefficients::distance(&s1.grad_at(t, &x1), &s2.grad_at(t, &x2)));
        }
        phi_sup = phi_sup.max(lp(&pd) + lp(&gd));
        bt_sup = bt_sup.max(lp(&bd));
        sig_frames.push(lp(&sd));
    }
    // trapezoid in time for the L^q norm of the diffusion difference
    let mut integral = 0.0;
    for f in 1..s1.times.len() {
        let h = s1.times[f] - s1.times[f - 1];
        integral += 0.5 * h * (sig_frames[f].powf(q) + sig_frames[f - 1].powf(q));
    }
    let sig = integral.powf(1.0 / q);
    let ratio = |v: f64| {
        if drift_difference > 0.0 {
            v / drift_difference
        } else {
            0.0
        }
    };
    Ok(TransformComparison {
        p,
        q,
        drift_difference,
        phi_difference: phi_sup,
        transformed_drift_difference: bt_sup,
        transformed_diffusion_difference: sig,
        ratio_phi: ratio(phi_sup),
        ratio_drift: ratio(bt_sup),
        ratio_diffusion: ratio(sig),
    })
}

/// Discrete regularity proxy `||d_t phi||_{L^q L^p} + ||phi||_{L^q W^{2,p}}`
/// against `||b||_{L^q L^p}`; the ratio is the empirical constant.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegularityReport {
    pub p: f64,
    pub q: f64,
    pub lhs: f64,
    pub drift_norm: f64,
    pub ratio: f64,
}

pub fn regularity_report(field: &CoefficientField, sol: &ZvonkinSolution, p: f64, q: f64) -> Result<RegularityReport> {
    let grid = &sol.grid;
    let d = grid.dim();
    let vol = grid.cell_volume();
    let lp = |vals: &[f64]| -> f64 { (vals.iter().map(|v| v.abs().powf(p)).sum::<f64>() * vol).powf(1.0 / p) };
    let nf = sol.times.len();
    let mut dt_norms = Vec::new();
    let mut w2_norms = Vec::new();
    for f in 0..nf {
        let (a, b) = (f.saturating_sub(1), (f + 1).min(nf - 1));
        let h = sol.times[b] - sol.times[a];
        let dtphi: Vec<f64> = (0..grid.len())
            .map(|idx| {
                let diff: Vec<f64> = (0..d)
                    .map(|c| (sol.phi[b][idx * d + c] - sol.phi[a][idx * d + c]) / h)
                    .collect();
                diff.iter().map(|v| v * v).sum::<f64>().sqrt()
            })
            .collect();
        dt_norms.push(lp(&dtphi));
        let phi_abs: Vec<f64> = (0..grid.len())
            .map(|idx| {
                sol.phi[f][idx * d..(idx + 1) * d]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let grad_abs: Vec<f64> = (0..grid.len())
            .map(|idx| {
                sol.grad[f][idx * d * d..(idx + 1) * d * d]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let mut hess2 = vec![0.0; grid.len()];
        for e in 0..d * d {
            for k in 0..d {
                let dk = axis_derivative(grid, &sol.grad[f], d * d, e, k);
                for idx in 0..grid.len() {
                    hess2[idx] += dk[idx] * dk[idx];
                }
            }
        }
        let hess: Vec<f64> = hess2.iter().map(|v| v.sqrt()).collect();
        w2_norms.push(lp(&phi_abs) + lp(&grad_abs) + lp(&hess));
    }
    let lq = |vals: &[f64]| -> f64 {
        let mut s = 0.0;
        for f in 1..nf {
            s += 0.5 * (sol.times[f] - sol.times[f - 1]) * (vals[f].powf(q) + vals[f - 1].powf(q));
        }
        s.powf(1.0 / q)
    };
    let lhs = lq(&dt_norms) + lq(&w2_norms);
    let drift_norm = crate::coefficients::spacetime_norm(
        grid,
        sol.horizon,
        nf.max(2) - 1,
        q,
        p,
        crate::coefficients::drift_magnitude(field),
    )?;
    Ok(RegularityReport {
        p,
        q,
        lhs,
        drift_norm,
        ratio: if drift_norm > 0.0 { lhs / drift_norm } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{evolve_single, SdeScheme};
    use crate::stats::energy_test;
    use rand_distr::{Distribution, Normal};

    fn drift1(name: &str, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> CoefficientField {
        CoefficientField::with_constant_sigma(name, 1, 1.0, 1.0, move |_, x, out| out[0] = f(x[0]))
    }

    #[test]
    fn zero_drift_gives_zero_phi() {
        let grid = BoxGrid::line(-3.0, 3.0, 60).unwrap();
        let sol = solve_backward(&drift1("0", |_| 0.0), 1.0, &grid, None).unwrap();
        assert!(sol.phi.iter().flatten().all(|v| *v == 0.0));
        assert_eq!(sol.grad_sup, 0.0);
        let sel = select_lambda(&drift1("0", |_| 0.0), &grid, 0.5).unwrap();
        assert_eq!(sel.lambda, 1.0);
    }

    #[test]
    fn constant_drift_closed_form() {
        let grid = BoxGrid::line(-10.0, 10.0, 100).unwrap();
        let (c, lambda) = (0.7, 2.0);
        let sol = solve_backward(&drift1("c", move |_| c), lambda, &grid, None).unwrap();
        assert!(sol.phi.last().unwrap().iter().all(|v| *v == 0.0));
        for (f, &t) in sol.times.iter().enumerate() {
            let exact = c / lambda * (1.0 - (-lambda * (1.0 - t)).exp());
            for idx in 20..80 {
                assert!((sol.phi[f][idx] - exact).abs() < 1e-3);
            }
        }
        let tc = transform_coefficients(&sol).unwrap();
        let t = 0.3;
        let sig = tc.field.diffusion_at(t, &[0.1]);
        assert!((sig[0] - 1.0).abs() < 1e-9);
        let bt = tc.field.drift_at(t, &[0.1])[0];
        assert!((bt - c * (1.0 - (-lambda * (1.0 - t)).exp())).abs() < 2e-3);
    }

    #[test]
    fn residual_small_and_second_order() {
        let mut norms = Vec::new();
        for cells in [50, 100, 200] {
            let grid = BoxGrid::line(-std::f64::consts::PI * 2.0, std::f64::consts::PI * 2.0, cells).unwrap();
            let sol = solve_backward(&drift1("sin", f64::sin), 2.0, &grid, None).unwrap();
            assert!(sol.max_residual() <= 10.0 * grid.min_spacing());
            norms.push(sol.max_residual());
        }
        assert!(norms[0] / norms[1] >= 3.0 && norms[1] / norms[2] >= 3.0, "{norms:?}");
    }

    #[test]
    fn select_lambda_for_sine_and_scaling() {
        let grid = BoxGrid::line(-6.0, 6.0, 120).unwrap();
        let one = select_lambda(&drift1("sin", f64::sin), &grid, 0.5).unwrap();
        assert!(one.achieved <= 0.5);
        let two = select_lambda(&drift1("2sin", |x| 2.0 * x.sin()), &grid, 0.5).unwrap();
        let ratio = two.lambda / one.lambda;
        assert!((1.0..=4.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn inverse_examples() {
        let grid = BoxGrid::line(-8.0, 8.0, 1600).unwrap();
        let mut sol = solve_backward(&drift1("0", |_| 0.0), 1.0, &grid, Some(20000)).unwrap();
        let psi = Diffeomorphism::new(sol.clone());
        assert_eq!(psi.invert(0.2, &[0.4]).unwrap(), vec![0.4]);
        for f in sol.phi.iter_mut() {
            f.iter_mut().for_each(|v| *v = 0.25);
        }
        let psi = Diffeomorphism::new(sol.clone());
        let (x, it) = psi.invert_with(0.5, &[1.0], 1e-10, 100).unwrap();
        assert!((x[0] - 0.75).abs() < 1e-15 && it <= 2);
        for f in sol.phi.iter_mut() {
            for (idx, v) in f.iter_mut().enumerate() {
                *v = 0.4 * grid.center(idx)[0].sin();
            }
        }
        let psi = Diffeomorphism::new(sol);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = rng.random_range(-6.0..6.0);
            let y = psi.forward(0.5, &[x]);
            let back = psi.invert(0.5, &y).unwrap();
            assert!((back[0] - x).abs() < 1e-9);
        }
    }

    #[test]
    fn contraction_failure_reported() {
        let grid = BoxGrid::line(-4.0, 4.0, 400).unwrap();
        let mut sol = solve_backward(&drift1("0", |_| 0.0), 1.0, &grid, Some(20000)).unwrap();
        for f in sol.phi.iter_mut() {
            for (idx, v) in f.iter_mut().enumerate() {
                *v = 3.0 * (10.0 * grid.center(idx)[0]).sin();
            }
        }
        let psi = Diffeomorphism::new(sol);
        assert!(matches!(psi.invert(0.5, &[0.3]), Err(Error::ContractionFailure { .. })));
    }

    #[test]
    fn pipeline_properties() {
        let grid = BoxGrid::line(-8.0, 8.0, 320).unwrap();
        let field = drift1("sin", f64::sin);
        let sel = select_lambda(&field, &grid, 0.5).unwrap();
        let tc = transform_coefficients(&sel.solution).unwrap();
        assert!(inverse_lipschitz_ratio(&tc.psi, 1000, 4).unwrap() <= 2.0);
        let (lo, hi) = ellipticity_range(&tc, 500, 5);
        assert!(lo >= 0.25 && hi <= 2.25);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let t = rng.random_range(0.0..1.0);
            let y = [rng.random_range(-7.0..7.0)];
            let (x, it) = tc.psi.invert_with(t, &y, 1e-10, 100).unwrap();
            let start = sel.solution.phi_at(t, &y)[0].abs().max(1e-300);
            assert!(it as f64 <= (start / 1e-10).log2().ceil().max(1.0) + 1.0);
            assert!((tc.psi.forward(t, &x)[0] - y[0]).abs() < 1e-8);
        }
    }

    #[test]
    fn pushforward_matches_transformed_sde() {
        let grid = BoxGrid::line(-10.0, 10.0, 400).unwrap();
        let field = drift1("sin", f64::sin);
        let sel = select_lambda(&field, &grid, 0.5).unwrap();
        let tc = transform_coefficients(&sel.solution).unwrap();
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, 0.7).unwrap();
        let x0: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let x1: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let y0: Vec<f64> = x1.iter().map(|&x| tc.psi.forward(0.0, &[x])[0]).collect();
        let scheme = SdeScheme::new(1.0, 400, 200, 21).unwrap();
        let xs = evolve_single(&field, &x0, &scheme).unwrap();
        let scheme_y = SdeScheme::new(1.0, 400, 200, 22).unwrap();
        let ys = evolve_single(&tc.field, &y0, &scheme_y).unwrap();
        let pushed: Vec<f64> = xs[1].iter().map(|&x| tc.psi.forward(0.5, &[x])[0]).collect();
        let test = energy_test(&pushed, &ys[1], 1, 200, 5);
        assert!(test.passes(0.01), "{test:?}");
    }

    #[test]
    fn compare_identical_and_linear_scaling() {
        let grid = BoxGrid::line(-6.0, 6.0, 120).unwrap();
        let base = drift1("sin", f64::sin);
        let s0 = solve_backward(&base, 4.0, &grid, None).unwrap();
        let same = compare_transforms(&base, &s0, &base, &s0, 2.0, 2.0).unwrap();
        assert_eq!(same.phi_difference, 0.0);
        assert_eq!(same.transformed_drift_difference, 0.0);
        let mut diffs = Vec::new();
        for eps in [0.02, 0.01] {
            let pert = drift1("sin+eps", move |x| x.sin() + eps * (-(x * x)).exp());
            let sp = solve_backward(&pert, 4.0, &grid, Some(s0.steps)).unwrap();
            diffs.push(compare_transforms(&base, &s0, &pert, &sp, 2.0, 2.0).unwrap());
        }
        for r in [
            diffs[0].phi_difference / diffs[1].phi_difference,
            diffs[0].transformed_drift_difference / diffs[1].transformed_drift_difference,
            diffs[0].drift_difference / diffs[1].drift_difference,
        ] {
            assert!((1.8..=2.2).contains(&r), "{r}");
        }
        let reg = regularity_report(&base, &s0, 2.0, 2.0).unwrap();
        assert!(reg.ratio.is_finite() && reg.ratio > 0.0);
    }
}
