//! Coupled Euler-Maruyama simulation: two SDEs driven by the same Brownian
//! motion, started from an optimal coupling of their initial laws.
//!
//! Each trajectory owns a ChaCha stream selected by `(seed, trajectory)`, and
//! the increments are drawn in step order from that stream. Results therefore
//! do not depend on how trajectories are scheduled across threads.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientField;
use crate::error::{Error, Result};
use crate::measures::{BoxGrid, ParticleCloud};
use crate::stats::mean_and_se;
use crate::transport::{eval_cost, solve_exact, CostSpec};

/// States beyond this norm abort the run.
pub const BLOWUP_THRESHOLD: f64 = 1e6;

/// Paired initial conditions `(Y1_0, Y2_0)`, row-major with `dim` coordinates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InitialPairs {
    pub dim: usize,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    /// Plan cell `(i, j)` each pair was drawn from, when drawn from a plan.
    pub plan_index: Vec<(usize, usize)>,
}

impl InitialPairs {
    pub fn len(&self) -> usize {
        self.first.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    /// Both components equal to the given points.
    pub fn diagonal(dim: usize, points: Vec<f64>) -> Self {
        Self {
            dim,
            second: points.clone(),
            first: points,
            plan_index: Vec::new(),
        }
    }

    /// `n` i.i.d. draws from a normal law with the given mean and variance per
    /// axis, used for both components.
    pub fn gaussian_diagonal(dim: usize, mean: &[f64], variance: f64, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = variance.sqrt();
        let mut points = Vec::with_capacity(n * dim);
        for _ in 0..n {
            for m in mean.iter().take(dim) {
                let z: f64 = StandardNormal.sample(&mut rng);
                points.push(m + sd * z);
            }
        }
        Self::diagonal(dim, points)
    }
}

/// `n` i.i.d. pairs drawn from the exact optimal plan between `mu0` and `nu0`.
pub fn sample_initial_coupling(
    mu0: &ParticleCloud,
    nu0: &ParticleCloud,
    spec: &CostSpec,
    n: usize,
    seed: u64,
) -> Result<InitialPairs> {
    let plan = solve_exact(mu0, nu0, spec)?;
    let cells: Vec<(usize, usize)> = (0..plan.rows)
        .flat_map(|i| (0..plan.cols).map(move |j| (i, j)))
        .filter(|&(i, j)| plan.mass(i, j) > 0.0)
        .collect();
    let weights: Vec<f64> = cells.iter().map(|&(i, j)| plan.mass(i, j)).collect();
    let index =
        WeightedIndex::new(&weights).map_err(|e| Error::InvalidMeasure(format!("plan cannot be sampled: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = mu0.dim();
    let mut out = InitialPairs {
        dim,
        first: Vec::with_capacity(n * dim),
        second: Vec::with_capacity(n * dim),
        plan_index: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let (i, j) = cells[index.sample(&mut rng)];
        out.first.extend_from_slice(mu0.point(i));
        out.second.extend_from_slice(nu0.point(j));
        out.plan_index.push((i, j));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryPolicy {
    None,
    /// Mirror states back into the box after every step.
    Reflect(BoxGrid),
}

/// Uniform Euler-Maruyama time stepping on `[0, T]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SdeScheme {
    pub horizon: f64,
    pub steps: usize,
    /// Output frames are stored every `frame_every` steps (and at `t = 0`).
    pub frame_every: usize,
    pub boundary: BoundaryPolicy,
    pub seed: u64,
}

impl SdeScheme {
    pub fn new(horizon: f64, steps: usize, frame_every: usize, seed: u64) -> Result<Self> {
        if !(horizon > 0.0) || steps == 0 || frame_every == 0 || !steps.is_multiple_of(frame_every) {
            return Err(Error::Config(format!(
                "scheme needs T > 0 and frame_every dividing steps (T = {horizon}, steps = {steps}, frame_every = {frame_every})"
            )));
        }
        Ok(Self {
            horizon,
            steps,
            frame_every,
            boundary: BoundaryPolicy::None,
            seed,
        })
    }

    /// Frames at the given checkpoint times; each must sit on the step grid.
    pub fn with_checkpoints(horizon: f64, dt: f64, checkpoints: &[f64], seed: u64) -> Result<Self> {
        let steps = (horizon / dt).round() as usize;
        let mut every = steps;
        for &t in checkpoints {
            let k = (t / horizon * steps as f64).round() as usize;
            if ((k as f64) * horizon / steps as f64 - t).abs() > 1e-9 {
                return Err(Error::Config(format!("checkpoint {t} is not on the step grid")));
            }
            every = gcd(every, k.max(1));
        }
        Self::new(horizon, steps, every.max(1), seed)
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn frame_times(&self) -> Vec<f64> {
        (0..=self.steps / self.frame_every)
            .map(|k| (k * self.frame_every) as f64 * self.dt())
            .collect()
    }

    /// Index of the frame closest to `t`.
    pub fn frame_at(&self, t: f64) -> usize {
        (t / (self.dt() * self.frame_every as f64)).round() as usize
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Frame snapshots of a coupled ensemble.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoupledPathEnsemble {
    pub dim: usize,
    pub trajectories: usize,
    pub times: Vec<f64>,
    /// `first[frame]` holds `Y1` for every trajectory, row major.
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub seed: u64,
    pub dt: f64,
}

impl CoupledPathEnsemble {
    pub fn frame_at(&self, t: f64) -> usize {
        self.times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map(|(k, _)| k)
            .unwrap_or(0)
    }
}

fn stream(seed: u64, trajectory: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trajectory as u64);
    rng
}

fn reflect(x: &mut [f64], boundary: &BoundaryPolicy) {
    if let BoundaryPolicy::Reflect(grid) = boundary {
        for k in 0..x.len() {
            let (lo, hi) = (grid.lower()[k], grid.upper()[k]);
            let w = hi - lo;
            // fold onto [lo, hi] with period 2w
            let mut y = (x[k] - lo).rem_euclid(2.0 * w);
            if y > w {
                y = 2.0 * w - y;
            }
            x[k] = lo + y;
        }
    }
}

struct Stepper<'a> {
    field: &'a CoefficientField,
    drift: Vec<f64>,
    sigma: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(field: &'a CoefficientField) -> Self {
        Self {
            field,
            drift: vec![0.0; field.dim()],
            sigma: vec![0.0; field.dim() * field.noise_dim()],
        }
    }

    fn step(&mut self, t: f64, dt: f64, x: &mut [f64], dw: &[f64]) {
        let (d, m) = (self.field.dim(), self.field.noise_dim());
        self.field.eval_drift(t, x, &mut self.drift);
        self.field.eval_diffusion(t, x, &mut self.sigma);
        for i in 0..d {
            let noise: f64 = (0..m).map(|k| self.sigma[i * m + k] * dw[k]).sum();
            x[i] += self.drift[i] * dt + noise;
        }
    }
}

fn blown_up(x: &[f64]) -> bool {
    !x.iter().all(|v| v.is_finite()) || x.iter().map(|v| v * v).sum::<f64>() > BLOWUP_THRESHOLD * BLOWUP_THRESHOLD
}

/// Simulates both SDEs with shared Brownian increments per trajectory.
pub fn evolve_coupled(
    f1: &CoefficientField,
    f2: &CoefficientField,
    init: &InitialPairs,
    scheme: &SdeScheme,
) -> Result<CoupledPathEnsemble> {
    let d = init.dim;
    if f1.dim() != d || f2.dim() != d {
        return Err(Error::InvalidCoefficients("field and initial dimensions differ".into()));
    }
    let m = f1.noise_dim().max(f2.noise_dim());
    let n = init.len();
    let dt = scheme.dt();
    let sqrt_dt = dt.sqrt();
    let frames = scheme.steps / scheme.frame_every + 1;
    let paths: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..n)
        .into_par_iter()
        .map(|traj| {
            let mut rng = stream(scheme.seed, traj);
            let mut y1 = init.first[traj * d..(traj + 1) * d].to_vec();
            let mut y2 = init.second[traj * d..(traj + 1) * d].to_vec();
            let mut s1 = Stepper::new(f1);
            let mut s2 = Stepper::new(f2);
            let mut dw = vec![0.0; m];
            let mut out1 = Vec::with_capacity(frames * d);
            let mut out2 = Vec::with_capacity(frames * d);
            out1.extend_from_slice(&y1);
            out2.extend_from_slice(&y2);
            for k in 0..scheme.steps {
                let t = k as f64 * dt;
                for w in dw.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *w = z * sqrt_dt;
                }
                s1.step(t, dt, &mut y1, &dw[..f1.noise_dim()]);
                s2.step(t, dt, &mut y2, &dw[..f2.noise_dim()]);
                reflect(&mut y1, &scheme.boundary);
                reflect(&mut y2, &scheme.boundary);
                if blown_up(&y1) || blown_up(&y2) {
                    return Err(Error::Blowup {
                        trajectory: traj,
                        time: t + dt,
                    });
                }
                if (k + 1) % scheme.frame_every == 0 {
                    out1.extend_from_slice(&y1);
                    out2.extend_from_slice(&y2);
                }
            }
            Ok((out1, out2))
        })
        .collect();
    let mut first = vec![Vec::with_capacity(n * d); frames];
    let mut second = vec![Vec::with_capacity(n * d); frames];
    for path in paths {
        let (p1, p2) = path?;
        for f in 0..frames {
            first[f].extend_from_slice(&p1[f * d..(f + 1) * d]);
            second[f].extend_from_slice(&p2[f * d..(f + 1) * d]);
        }
    }
    Ok(CoupledPathEnsemble {
        dim: d,
        trajectories: n,
        times: scheme.frame_times(),
        first,
        second,
        seed: scheme.seed,
        dt,
    })
}

/// Single-SDE frames, e.g. for checking that the coupled marginals agree with
/// independently simulated ones. Returns `frames[k]` row major.
pub fn evolve_single(field: &CoefficientField, init: &[f64], scheme: &SdeScheme) -> Result<Vec<Vec<f64>>> {
    let pairs = InitialPairs::diagonal(field.dim(), init.to_vec());
    Ok(evolve_coupled(field, field, &pairs, scheme)?.first)
}

/// Monte Carlo mean of the cost along the coupled pairs at one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostPoint {
    pub t: f64,
    pub mean: f64,
    pub se: f64,
}

/// `E c(Y1_t, Y2_t)` per frame with its standard error. Each value bounds the
/// transport cost between the two marginals from above.
pub fn coupled_cost_curve(ensemble: &CoupledPathEnsemble, spec: &CostSpec) -> Vec<CostPoint> {
    let d = ensemble.dim;
    (0..ensemble.times.len())
        .map(|f| {
            let costs: Vec<f64> = (0..ensemble.trajectories)
                .into_par_iter()
                .map(|i| {
                    eval_cost(
                        spec,
                        &ensemble.first[f][i * d..(i + 1) * d],
                        &ensemble.second[f][i * d..(i + 1) * d],
                    )
                })
                .collect();
            let (mean, se) = mean_and_se(&costs);
            CostPoint {
                t: ensemble.times[f],
                mean,
                se,
            }
        })
        .collect()
}

/// Writes a cost curve as CSV `t,mean_cost,standard_error`.
pub fn write_cost_curve<W: std::io::Write>(curve: &[CostPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "mean_cost", "standard_error"])?;
    for p in curve {
        w.write_record(&[
            format!("{:.17e}", p.t),
            format!("{:.17e}", p.mean),
            format!("{:.17e}", p.se),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Equal-weight clouds of `Y1` and `Y2` at a frame.
pub fn marginals(ensemble: &CoupledPathEnsemble, frame: usize) -> Result<(ParticleCloud, ParticleCloud)> {
    if frame >= ensemble.times.len() {
        return Err(Error::Config(format!(
            "frame {frame} outside 0..{}",
            ensemble.times.len()
        )));
    }
    let t = ensemble.times[frame];
    Ok((
        ParticleCloud::uniform(ensemble.dim, ensemble.first[frame].clone(), t)?,
        ParticleCloud::uniform(ensemble.dim, ensemble.second[frame].clone(), t)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::sample_variance;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn zero_field(dim: usize) -> CoefficientField {
        CoefficientField::with_constant_sigma("zero", dim, 1.0, 0.0, |_, _, out| out.fill(0.0))
    }

    fn ou(shift: f64, sigma: f64) -> CoefficientField {
        CoefficientField::with_constant_sigma("ou", 1, 1.0, sigma, move |_, x, out| out[0] = -x[0] + shift)
    }

    #[test]
    fn dirac_coupling_pairs() {
        let d = ParticleCloud::dirac(vec![0.0]);
        let pairs = sample_initial_coupling(&d, &d, &CostSpec::log_squared(1.0).unwrap(), 10, 1).unwrap();
        assert!(pairs.first.iter().chain(&pairs.second).all(|v| *v == 0.0));
        let two = ParticleCloud::uniform(1, vec![0.0, 1.0], 0.0).unwrap();
        let pairs = sample_initial_coupling(&two, &two, &CostSpec::log_squared(1.0).unwrap(), 100, 2).unwrap();
        assert_eq!(pairs.first, pairs.second);
    }

    #[test]
    fn coupling_frequencies_match_plan() {
        let mu = ParticleCloud::uniform(1, vec![0.0, 1.0], 0.0).unwrap();
        let nu = ParticleCloud::uniform(1, vec![0.0, 2.0], 0.0).unwrap();
        let n = 100_000;
        let pairs = sample_initial_coupling(&mu, &nu, &CostSpec::log_squared(1.0).unwrap(), n, 3).unwrap();
        let freq = pairs.plan_index.iter().filter(|&&c| c == (0, 0)).count() as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.01);
        assert!(pairs.plan_index.iter().all(|&(i, j)| i == j));
    }

    #[test]
    fn frozen_dynamics() {
        let init = InitialPairs::diagonal(2, vec![0.5, -1.0, 2.0, 3.0]);
        let scheme = SdeScheme::new(1.0, 10, 5, 0).unwrap();
        let e = evolve_coupled(&zero_field(2), &zero_field(2), &init, &scheme).unwrap();
        assert_eq!(e.first.last().unwrap(), &init.first);
        let (a, _) = marginals(&e, 2).unwrap();
        assert_eq!(a.points(), &init.first[..]);
    }

    #[test]
    fn identical_dynamics_never_separate() {
        let init = InitialPairs::gaussian_diagonal(1, &[0.0], 1.0, 500, 1);
        let scheme = SdeScheme::new(1.0, 200, 50, 9).unwrap();
        let f = ou(0.0, 1.0);
        let e = evolve_coupled(&f, &f, &init, &scheme).unwrap();
        assert_eq!(e.first, e.second);
        let curve = coupled_cost_curve(&e, &CostSpec::log_squared(0.1).unwrap());
        assert!(curve.iter().all(|p| p.mean == 0.0));
    }

    #[test]
    fn frozen_pairs_at_distance_delta() {
        let delta = 0.3;
        let init = InitialPairs {
            dim: 1,
            first: vec![0.0; 4],
            second: vec![delta; 4],
            plan_index: vec![],
        };
        let scheme = SdeScheme::new(1.0, 4, 1, 0).unwrap();
        let e = evolve_coupled(&zero_field(1), &zero_field(1), &init, &scheme).unwrap();
        for p in coupled_cost_curve(&e, &CostSpec::log_squared(delta).unwrap()) {
            assert_relative_eq!(p.mean, 2f64.ln(), epsilon = 1e-15);
        }
    }

    #[test]
    fn linear_drift_difference_curve() {
        let (h, delta) = (1e-3, 0.05);
        let init = InitialPairs::diagonal(1, vec![0.0]);
        let scheme = SdeScheme::new(1.0, 1000, 100, 0).unwrap();
        let e = evolve_coupled(&ou(0.0, 0.0), &ou(0.1, 0.0), &init, &scheme).unwrap();
        let curve = coupled_cost_curve(&e, &CostSpec::log_squared(delta).unwrap());
        for p in curve {
            let z = 0.1 * (1.0 - (-p.t).exp());
            let exact = (z * z / (delta * delta)).ln_1p();
            assert!((p.mean - exact).abs() <= 2.0 * h, "t={} {} vs {}", p.t, p.mean, exact);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let init = InitialPairs::gaussian_diagonal(1, &[0.0], 1.0, 300, 4);
        let scheme = SdeScheme::new(0.5, 50, 10, 11).unwrap();
        let a = evolve_coupled(&ou(0.0, 1.0), &ou(0.2, 0.5), &init, &scheme).unwrap();
        let b = evolve_coupled(&ou(0.0, 1.0), &ou(0.2, 0.5), &init, &scheme).unwrap();
        assert_eq!(a.first, b.first);
        assert_eq!(a.second, b.second);
    }

    #[test]
    fn brownian_marginal_variance() {
        let n = 20_000;
        let init = InitialPairs::diagonal(1, vec![0.0; n]);
        let scheme = SdeScheme::new(1.0, 20, 20, 5).unwrap();
        let bm = CoefficientField::with_constant_sigma("bm", 1, 1.0, 1.0, |_, _, out| out[0] = 0.0);
        let e = evolve_coupled(&bm, &bm, &init, &scheme).unwrap();
        let (cloud, _) = marginals(&e, 1).unwrap();
        let var = sample_variance(cloud.points());
        // se of the sample variance of a normal is sqrt(2/(n-1))
        assert!((var - 1.0).abs() < 3.0 * (2.0 / (n as f64 - 1.0)).sqrt());
    }

    #[test]
    fn blowup_is_reported() {
        let boom = CoefficientField::new(
            "boom",
            1,
            1,
            1.0,
            Arc::new(|_, x: &[f64], out: &mut [f64]| out[0] = x[0] * x[0]),
            Arc::new(|_, _, out: &mut [f64]| out[0] = 0.0),
        );
        let init = InitialPairs::diagonal(1, vec![0.1, 5.0]);
        let scheme = SdeScheme::new(1.0, 100, 100, 0).unwrap();
        let err = evolve_coupled(&boom, &boom, &init, &scheme).unwrap_err();
        assert!(matches!(err, Error::Blowup { trajectory: 1, .. }));
    }

    #[test]
    fn reflection_keeps_states_in_box() {
        let grid = BoxGrid::line(-1.0, 1.0, 10).unwrap();
        let mut x = [2.5];
        reflect(&mut x, &BoundaryPolicy::Reflect(grid.clone()));
        assert_relative_eq!(x[0], -0.5);
        let mut y = [-1.25];
        reflect(&mut y, &BoundaryPolicy::Reflect(grid));
        assert_relative_eq!(y[0], -0.75);
    }

    #[test]
    fn checkpoint_scheme() {
        let s = SdeScheme::with_checkpoints(1.0, 1e-3, &[0.25, 0.5, 1.0], 0).unwrap();
        let times = s.frame_times();
        for t in [0.25, 0.5, 1.0] {
            assert!((times[s.frame_at(t)] - t).abs() < 1e-12);
        }
    }
}
