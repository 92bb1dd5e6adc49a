//! Right-hand sides of the stability bounds, their ingredients, and the
//! scenario-level checks comparing them with measured distances.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coefficients::{
    check_hypothesis_h, diffusion_difference, diffusion_jacobian_norm, drift_difference, drift_jacobian_norm,
    drift_magnitude, dvp_construct, phi_delta, CoefficientField, Exponents, OsgoodModulus, SpaceTimeSamples,
};
use crate::error::{Error, Result};
use crate::fpe::{self, FpeProblem, FpeSolution, NegativeDivergence};
use crate::measures::{abs_moment, BoxGrid, GridDensity, ParticleCloud};
use crate::simulate::{
    coupled_cost_curve, evolve_coupled, sample_initial_coupling, CoupledPathEnsemble, InitialPairs, SdeScheme,
};
use crate::stats::{loglog_fit, mean_and_se};
use crate::transport::{eval_cost, solve_exact, wasserstein_densities_1d, CostSpec};

/// Ingredient names used by the assemblers.
pub mod keys {
    pub const INITIAL: &str = "initial_distance";
    pub const U2: &str = "u2_norm";
    pub const U_SUM: &str = "u_sum";
    pub const U_SUM_DIFFUSION: &str = "u_sum_diffusion";
    pub const U_SUM_DRIFT: &str = "u_sum_drift";
    pub const DRIFT_DIFF: &str = "drift_difference";
    pub const DIFFUSION_DIFF_SQ: &str = "diffusion_difference_sq";
    pub const GRAD_DRIFT: &str = "grad_drift";
    pub const GRAD_DIFFUSION_SQ: &str = "grad_diffusion_sq";
    pub const G_NORM: &str = "g_norm";
    pub const PHI_DELTA: &str = "phi_delta";
    pub const DVP_INTEGRAL: &str = "dvp_integral";
    pub const DRIFT_NORM: &str = "drift_norm";
}

pub type Ingredients = BTreeMap<String, f64>;

fn need(ing: &Ingredients, key: &str) -> Result<f64> {
    match ing.get(key) {
        Some(v) if v.is_finite() => Ok(*v),
        Some(v) => Err(Error::IncompleteIngredients(format!("{key} = {v} is not finite"))),
        None => Err(Error::IncompleteIngredients(key.to_string())),
    }
}

fn positive_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("delta = {delta} must be positive")))
    }
}

/// Sobolev drift and diffusion:
/// `D0 + 2|u2| (|db| / delta + |dsigma|^2 / delta^2) + C (sum |u|) (|grad b1| + |grad sigma1|^2)`.
pub fn rhs_thm_sobolev(ing: &Ingredients, delta: f64, c_dp: f64) -> Result<f64> {
    positive_delta(delta)?;
    let mid = need(ing, keys::DRIFT_DIFF)? / delta + need(ing, keys::DIFFUSION_DIFF_SQ)? / (delta * delta);
    Ok(need(ing, keys::INITIAL)?
        + 2.0 * need(ing, keys::U2)? * mid
        + c_dp * need(ing, keys::U_SUM)? * (need(ing, keys::GRAD_DRIFT)? + need(ing, keys::GRAD_DIFFUSION_SQ)?))
}

/// `W^{1,1}` drift:
/// `D0 + 2|u2| (...) + C (1 + sum |u|) [phi(delta) (1 + |G(|grad b1|)|) + |grad sigma1|^2]`.
pub fn rhs_thm_w11(ing: &Ingredients, delta: f64, c_dt: f64) -> Result<f64> {
    positive_delta(delta)?;
    let mid = need(ing, keys::DRIFT_DIFF)? / delta + need(ing, keys::DIFFUSION_DIFF_SQ)? / (delta * delta);
    let bracket =
        need(ing, keys::PHI_DELTA)? * (1.0 + need(ing, keys::DVP_INTEGRAL)?) + need(ing, keys::GRAD_DIFFUSION_SQ)?;
    Ok(need(ing, keys::INITIAL)? + 2.0 * need(ing, keys::U2)? * mid + c_dt * (1.0 + need(ing, keys::U_SUM)?) * bracket)
}

/// Osgood hypothesis, no free constant:
/// `D_psi0 + 8 |g| sum |u| + 2 |u2| (|db| / delta + |dsigma|^2 / delta^2)`.
pub fn rhs_thm_osgood(ing: &Ingredients, delta: f64) -> Result<f64> {
    positive_delta(delta)?;
    let mid = need(ing, keys::DRIFT_DIFF)? / delta + need(ing, keys::DIFFUSION_DIFF_SQ)? / (delta * delta);
    Ok(need(ing, keys::INITIAL)?
        + 8.0 * need(ing, keys::G_NORM)? * need(ing, keys::U_SUM)?
        + 2.0 * need(ing, keys::U2)? * mid)
}

/// Mixed exponents:
/// `D0 + C1 (|dsigma|^2 / delta^2 + |grad sigma1|^2) + C2 (|db| / delta + |grad b1|)`.
pub fn rhs_thm_mixed(ing: &Ingredients, delta: f64, c1: f64, c2: f64) -> Result<f64> {
    positive_delta(delta)?;
    Ok(need(ing, keys::INITIAL)?
        + c1 * (need(ing, keys::DIFFUSION_DIFF_SQ)? / (delta * delta) + need(ing, keys::GRAD_DIFFUSION_SQ)?)
        + c2 * (need(ing, keys::DRIFT_DIFF)? / delta + need(ing, keys::GRAD_DRIFT)?))
}

/// `p, q > 2` and `d/p + 2/q < 1`.
pub fn check_lps(d: usize, p: f64, q: f64) -> Result<()> {
    if !(p > 2.0) || !(q > 2.0) {
        return Err(Error::LpsViolation(format!(
            "need p > 2 and q > 2, got p = {p}, q = {q}"
        )));
    }
    let s = d as f64 / p + 2.0 / q;
    if !(s < 1.0) {
        return Err(Error::LpsViolation(format!("d/p + 2/q = {s} must be < 1")));
    }
    Ok(())
}

/// Identity diffusion with an LPS drift; the initial term is measured at
/// scale `delta / 9`:
/// `D_{delta/9}(init) + C1 (|db|^2 / delta^2 + |b1|^2) + C2 (|db| / delta + |b1|)`.
pub fn rhs_thm_lps(ing: &Ingredients, delta: f64, d: usize, p: f64, q: f64, c1: f64, c2: f64) -> Result<f64> {
    positive_delta(delta)?;
    check_lps(d, p, q)?;
    let db = need(ing, keys::DRIFT_DIFF)?;
    let b1 = need(ing, keys::DRIFT_NORM)?;
    Ok(need(ing, keys::INITIAL)? + c1 * (db * db / (delta * delta) + b1 * b1) + c2 * (db / delta + b1))
}

/// `W_2` bound `C_alpha [W_alpha(init) + |u2|^{1/alpha} |db|]` for
/// `alpha in (2, p min q)`; `U2` is `|u2|_{L^inf(L^{p/(p-alpha)})}`.
pub fn rhs_thm_w2(ing: &Ingredients, alpha: f64, p: f64, q: f64, c_alpha: f64) -> Result<f64> {
    let upper = p.min(q);
    if !(alpha > 2.0 && alpha < upper) {
        return Err(Error::InvalidAlpha { alpha, upper });
    }
    Ok(c_alpha * (need(ing, keys::INITIAL)? + need(ing, keys::U2)?.powf(1.0 / alpha) * need(ing, keys::DRIFT_DIFF)?))
}

/// `2 C_{q,T} (C_{d,p} |grad b|_{L^1 L^p} + T |sigma|^2_{L^{2p}})`.
pub fn rhs_zero_diffusivity(c_qt: f64, c_dp: f64, grad_drift: f64, horizon: f64, sigma_sq: f64) -> f64 {
    2.0 * c_qt * (c_dp * grad_drift + horizon * sigma_sq)
}

/// `e^{(pL + p - 1) T} * integral`.
pub fn gronwall_rhs(p: f64, lipschitz: f64, horizon: f64, integral: f64) -> f64 {
    ((p * lipschitz + p - 1.0) * horizon).exp() * integral
}

/// Frozen constants. The committed manifest is the output of
/// `calibrate-constants` and is hashed into every run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub schema: u32,
    pub seed: u64,
    /// Pointwise Sobolev constant per dimension.
    pub sobolev_pointwise: BTreeMap<String, f64>,
    /// Strong-type maximal constants, dimension then exponent.
    pub maximal_strong: BTreeMap<String, BTreeMap<String, f64>>,
    /// Exact constants of the ball-kernel integral per dimension.
    pub kernel_integral: BTreeMap<String, f64>,
    pub theorem: TheoremConstants,
    /// Worst required value seen during calibration, per constant.
    pub needed: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremConstants {
    pub sobolev: f64,
    pub w11: f64,
    pub mixed_c1: f64,
    pub mixed_c2: f64,
    pub lps_c1: f64,
    pub lps_c2: f64,
    pub w2_alpha: f64,
}

impl TheoremConstants {
    pub fn uniform(c: f64) -> Self {
        Self {
            sobolev: c,
            w11: c,
            mixed_c1: c,
            mixed_c2: c,
            lps_c1: c,
            lps_c2: c,
            w2_alpha: c,
        }
    }
}

const FROZEN: &str = include_str!("../data/constants.json");

impl Constants {
    pub fn frozen() -> Self {
        serde_json::from_str(FROZEN).expect("committed constants manifest parses")
    }

    /// SHA-256 of the committed manifest text.
    pub fn frozen_hash() -> String {
        hex::encode(Sha256::digest(FROZEN.as_bytes()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("constants serialize") + "\n"
    }

    pub fn sobolev_pointwise(&self, d: usize) -> Result<f64> {
        self.sobolev_pointwise
            .get(&d.to_string())
            .copied()
            .ok_or_else(|| Error::Config(format!("no pointwise constant for d = {d}")))
    }

    pub fn maximal_strong(&self, d: usize, p: f64) -> Result<f64> {
        self.maximal_strong
            .get(&d.to_string())
            .and_then(|m| m.get(&p.to_string()))
            .copied()
            .ok_or_else(|| Error::Config(format!("no maximal constant for d = {d}, p = {p}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TheoremTag {
    Sobolev,
    W11,
    Osgood,
    Mixed,
    Lps,
    W2,
}

impl TheoremTag {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Sobolev => "sobolev",
            Self::W11 => "w11",
            Self::Osgood => "osgood",
            Self::Mixed => "mixed",
            Self::Lps => "lps",
            Self::W2 => "w2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "sobolev" => Self::Sobolev,
            "w11" => Self::W11,
            "osgood" => Self::Osgood,
            "mixed" => Self::Mixed,
            "lps" => Self::Lps,
            "w2" => Self::W2,
            other => return Err(Error::Config(format!("unknown theorem tag `{other}`"))),
        })
    }
}

/// Two coefficient fields, initial laws, and everything needed to measure
/// both sides of a bound.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub grid: BoxGrid,
    pub horizon: f64,
    pub first: CoefficientField,
    pub second: CoefficientField,
    pub init_first: GridDensity,
    pub init_second: GridDensity,
    /// Multiplies the second-order term; the particle noise is `sqrt(kappa) sigma`.
    pub kappa: f64,
    pub checkpoints: Vec<f64>,
    pub particles: usize,
    pub dt: f64,
    pub seed: u64,
    pub exponents: Exponents,
    pub osgood: Option<Arc<OsgoodModulus>>,
    /// Time samples for space-time norms.
    pub norm_steps: usize,
    /// Uniform FPE frames used for `sup_t` density norms.
    pub density_frames: usize,
    /// Atoms per subsample and number of resamples for the OT estimate.
    pub ot_atoms: usize,
    pub ot_resamples: usize,
}

impl Scenario {
    pub fn new(
        name: impl Into<String>,
        grid: BoxGrid,
        first: CoefficientField,
        second: CoefficientField,
        init: GridDensity,
    ) -> Self {
        let horizon = first.horizon;
        Self {
            name: name.into(),
            grid,
            horizon,
            first,
            second,
            init_second: init.clone(),
            init_first: init,
            kappa: 1.0,
            checkpoints: vec![0.25 * horizon, 0.5 * horizon, horizon],
            particles: 20_000,
            dt: 1e-3,
            seed: 1,
            exponents: Exponents {
                p: Some(2.0),
                ..Default::default()
            },
            osgood: None,
            norm_steps: 50,
            density_frames: 20,
            ot_atoms: 200,
            ot_resamples: 5,
        }
    }

    pub fn same_init(&self) -> bool {
        self.init_first.values == self.init_second.values && self.init_first.grid == self.init_second.grid
    }

    fn p(&self) -> f64 {
        self.exponents.p.unwrap_or(2.0)
    }

    /// `|b1 - b2|_{L^1(L^p)} + |sigma1 - sigma2|_{L^2(L^{2p})}`.
    pub fn dynamical_delta(&self) -> Result<f64> {
        let p = self.exponents.p.or(self.exponents.p2).unwrap_or(2.0);
        Ok(self.norm(1.0, p, drift_difference(&self.first, &self.second))?
            + self.norm(2.0, 2.0 * p, diffusion_difference(&self.first, &self.second))?)
    }

    fn norm(&self, r: f64, s: f64, f: impl Fn(f64, &[f64]) -> f64 + Sync) -> Result<f64> {
        SpaceTimeSamples::sample(&self.grid, self.horizon, self.norm_steps, f).norm(r, s)
    }
}

/// `sigma` multiplied by `factor`.
pub fn scaled_diffusion(field: &CoefficientField, factor: f64) -> CoefficientField {
    let inner = field.clone();
    field.with_diffusion(
        format!("{}*{factor}", field.name),
        field.noise_dim(),
        Arc::new(move |t, x, out: &mut [f64]| {
            inner.eval_diffusion(t, x, out);
            out.iter_mut().for_each(|v| *v *= factor);
        }),
    )
}

/// One checkpoint of a bound check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointResult {
    pub t: f64,
    /// Coupled-ensemble mean cost (an upper bound on the transport value).
    pub lhs_coupled: f64,
    pub lhs_se: f64,
    /// `lhs_coupled + 3 se`, the value compared with the right-hand side.
    pub lhs_upper: f64,
    /// Largest exact-OT value over the matched subsamples.
    pub lhs_ot: f64,
    /// Max minus min of the OT value over the resamples.
    pub lhs_ot_spread: f64,
    /// Coupled cost on the same subsamples; never below the OT value.
    pub lhs_subsample_coupled: f64,
    pub rhs: f64,
    pub margin: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub theorem: TheoremTag,
    pub scenario: String,
    pub delta: Option<f64>,
    pub alpha: Option<f64>,
    pub ingredients: Ingredients,
    pub constants: BTreeMap<String, f64>,
    pub rhs: f64,
    /// Smallest value of the free constant(s) for which every checkpoint passes.
    pub needed_constant: Option<f64>,
    pub checkpoints: Vec<CheckpointResult>,
    pub pass: bool,
}

impl BoundReport {
    pub const CSV_HEADER: [&'static str; 11] = [
        "theorem",
        "scenario",
        "parameter",
        "t",
        "lhs_coupled",
        "lhs_upper",
        "lhs_ot",
        "rhs",
        "margin",
        "pass",
        "lhs_se",
    ];

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let param = self.delta.or(self.alpha).unwrap_or(f64::NAN);
        self.checkpoints
            .iter()
            .map(|c| {
                vec![
                    self.theorem.name().to_string(),
                    self.scenario.clone(),
                    format!("{param:.17e}"),
                    format!("{:.17e}", c.t),
                    format!("{:.17e}", c.lhs_coupled),
                    format!("{:.17e}", c.lhs_upper),
                    format!("{:.17e}", c.lhs_ot),
                    format!("{:.17e}", c.rhs),
                    format!("{:.17e}", c.margin),
                    c.pass.to_string(),
                    format!("{:.17e}", c.lhs_se),
                ]
            })
            .collect()
    }

    pub fn write_csv<W: std::io::Write>(reports: &[BoundReport], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::CSV_HEADER)?;
        for r in reports {
            for row in r.csv_rows() {
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// FPE solutions and a coupled ensemble for one scenario, shared by every
/// bound checked on it.
pub struct ScenarioRun<'a> {
    pub scenario: &'a Scenario,
    pub fpe_first: FpeSolution,
    pub fpe_second: FpeSolution,
    /// Diagonal ensemble when both initial laws agree.
    diagonal: Option<CoupledPathEnsemble>,
}

impl<'a> ScenarioRun<'a> {
    pub fn prepare(scenario: &'a Scenario) -> Result<Self> {
        let mut times: Vec<f64> = (0..=scenario.density_frames)
            .map(|k| scenario.horizon * k as f64 / scenario.density_frames as f64)
            .collect();
        times.extend(&scenario.checkpoints);
        times.sort_by(f64::total_cmp);
        times.dedup();
        let solve = |field: &CoefficientField, init: &GridDensity| -> Result<FpeSolution> {
            let problem = FpeProblem::new(field.clone(), init.clone(), scenario.kappa, scenario.horizon);
            fpe::solve_auto(&problem, &times)
        };
        let fpe_first = solve(&scenario.first, &scenario.init_first)?;
        let fpe_second = solve(&scenario.second, &scenario.init_second)?;
        let diagonal = if scenario.same_init() {
            let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed ^ 0x1417);
            let points = scenario.init_first.sample(scenario.particles, &mut rng)?;
            let pairs = InitialPairs::diagonal(scenario.grid.dim(), points);
            Some(run_ensemble(scenario, &pairs)?)
        } else {
            None
        };
        Ok(Self {
            scenario,
            fpe_first,
            fpe_second,
            diagonal,
        })
    }

    pub fn diagonal_ensemble(&self) -> Option<&CoupledPathEnsemble> {
        self.diagonal.as_ref()
    }

    /// `sup_t |u^i_t|_{L^r}` over the stored frames.
    fn density_norm(&self, which: usize, r: f64) -> Result<f64> {
        let sol = if which == 1 { &self.fpe_first } else { &self.fpe_second };
        let mut best: f64 = 0.0;
        for f in &sol.frames {
            best = best.max(f.lr_norm(r)?);
        }
        Ok(best)
    }

    fn u_sum(&self, r: f64) -> Result<f64> {
        Ok(self.density_norm(1, r)? + self.density_norm(2, r)?)
    }

    /// Initial transport value and an ensemble started from its optimal plan.
    fn initial(&self, spec: &CostSpec) -> Result<(f64, CoupledPathEnsemble)> {
        if let Some(e) = &self.diagonal {
            return Ok((0.0, e.clone()));
        }
        let s = self.scenario;
        let (mu, nu) = (coarse_cloud(&s.init_first)?, coarse_cloud(&s.init_second)?);
        let plan = solve_exact(&mu, &nu, spec)?;
        let pairs = sample_initial_coupling(&mu, &nu, spec, s.particles, s.seed ^ 0x1417)?;
        Ok((plan.cost, run_ensemble(s, &pairs)?))
    }

    pub fn check(&self, tag: TheoremTag, param: f64, constants: &Constants) -> Result<BoundReport> {
        let s = self.scenario;
        let d = s.grid.dim();
        let mut ing = Ingredients::new();
        let mut used = BTreeMap::new();
        let (f1, f2) = (&s.first, &s.second);
        let h = 1e-5;
        let (spec, delta, alpha) = match tag {
            TheoremTag::Osgood => {
                let m = s
                    .osgood
                    .clone()
                    .ok_or_else(|| Error::Config(format!("scenario {} has no Osgood modulus", s.name)))?;
                (CostSpec::osgood(param, m)?, Some(param), None)
            }
            TheoremTag::W2 => (CostSpec::power(2.0)?, None, Some(param)),
            _ => (CostSpec::log_squared(param)?, Some(param), None),
        };
        match tag {
            TheoremTag::Sobolev => {
                let p = s.p();
                if !(p > 1.0) {
                    return Err(Error::Config(format!("p = {p} violates p > 1")));
                }
                let q = p / (p - 1.0);
                ing.insert(keys::U2.into(), self.density_norm(2, q)?);
                ing.insert(keys::U_SUM.into(), self.u_sum(q)?);
                ing.insert(keys::DRIFT_DIFF.into(), s.norm(1.0, p, drift_difference(f1, f2))?);
                ing.insert(
                    keys::DIFFUSION_DIFF_SQ.into(),
                    s.norm(2.0, 2.0 * p, diffusion_difference(f1, f2))?.powi(2),
                );
                ing.insert(keys::GRAD_DRIFT.into(), s.norm(1.0, p, drift_jacobian_norm(f1, h))?);
                ing.insert(
                    keys::GRAD_DIFFUSION_SQ.into(),
                    s.norm(2.0, 2.0 * p, diffusion_jacobian_norm(f1, h))?.powi(2),
                );
                ing.insert(keys::INITIAL.into(), self.initial(&spec)?.0);
                used.insert("sobolev".to_string(), constants.theorem.sobolev);
            }
            TheoremTag::W11 => {
                ing.insert(keys::U2.into(), self.density_norm(2, f64::INFINITY)?);
                ing.insert(keys::U_SUM.into(), self.u_sum(f64::INFINITY)?);
                ing.insert(keys::DRIFT_DIFF.into(), s.norm(1.0, 1.0, drift_difference(f1, f2))?);
                ing.insert(
                    keys::DIFFUSION_DIFF_SQ.into(),
                    s.norm(2.0, 2.0, diffusion_difference(f1, f2))?.powi(2),
                );
                ing.insert(
                    keys::GRAD_DIFFUSION_SQ.into(),
                    s.norm(2.0, 2.0, diffusion_jacobian_norm(f1, h))?.powi(2),
                );
                let grads = SpaceTimeSamples::sample(&s.grid, s.horizon, s.norm_steps, drift_jacobian_norm(f1, h));
                let (samples, weight) = grads.weighted_samples();
                let dvp = dvp_construct(&samples, weight);
                ing.insert(keys::DVP_INTEGRAL.into(), dvp.integral);
                ing.insert(keys::PHI_DELTA.into(), phi_delta(&dvp.g, param));
                ing.insert(keys::INITIAL.into(), self.initial(&spec)?.0);
                used.insert("w11".to_string(), constants.theorem.w11);
            }
            TheoremTag::Osgood => {
                let m = s.osgood.as_ref().expect("checked above");
                check_hypothesis_h(f1, m, &s.grid, 4000, s.seed).into_result()?;
                ing.insert(keys::U2.into(), self.density_norm(2, f64::INFINITY)?);
                ing.insert(keys::U_SUM.into(), self.u_sum(f64::INFINITY)?);
                ing.insert(keys::DRIFT_DIFF.into(), s.norm(1.0, 1.0, drift_difference(f1, f2))?);
                ing.insert(
                    keys::DIFFUSION_DIFF_SQ.into(),
                    s.norm(2.0, 2.0, diffusion_difference(f1, f2))?.powi(2),
                );
                let mm = Arc::clone(m);
                ing.insert(keys::G_NORM.into(), s.norm(1.0, 1.0, move |t, x| mm.g(t, x).abs())?);
                ing.insert(keys::INITIAL.into(), self.initial(&spec)?.0);
            }
            TheoremTag::Mixed => {
                let p1 = s.exponents.p1.unwrap_or(2.0);
                let p2 = s.exponents.p2.unwrap_or(2.0);
                if !(p1 > 1.0 && p2 > 1.0) {
                    return Err(Error::Config(format!("p1 = {p1}, p2 = {p2} violate p1, p2 > 1")));
                }
                let u1 = self.u_sum(p1 / (p1 - 1.0))?;
                let u2 = self.u_sum(p2 / (p2 - 1.0))?;
                ing.insert(keys::U_SUM_DIFFUSION.into(), u1);
                ing.insert(keys::U_SUM_DRIFT.into(), u2);
                ing.insert(
                    keys::DIFFUSION_DIFF_SQ.into(),
                    s.norm(2.0, 2.0 * p1, diffusion_difference(f1, f2))?.powi(2),
                );
                ing.insert(
                    keys::GRAD_DIFFUSION_SQ.into(),
                    s.norm(2.0, 2.0 * p1, diffusion_jacobian_norm(f1, h))?.powi(2),
                );
                ing.insert(keys::DRIFT_DIFF.into(), s.norm(1.0, p2, drift_difference(f1, f2))?);
                ing.insert(keys::GRAD_DRIFT.into(), s.norm(1.0, p2, drift_jacobian_norm(f1, h))?);
                ing.insert(keys::INITIAL.into(), self.initial(&spec)?.0);
                used.insert("mixed_c1".to_string(), constants.theorem.mixed_c1);
                used.insert("mixed_c2".to_string(), constants.theorem.mixed_c2);
            }
            TheoremTag::Lps => {
                let (p, q) = lps_exponents(s)?;
                check_lps(d, p, q)?;
                ing.insert(keys::DRIFT_DIFF.into(), s.norm(q, p, drift_difference(f1, f2))?);
                ing.insert(keys::DRIFT_NORM.into(), s.norm(q, p, drift_magnitude(f1))?);
                let init_spec = CostSpec::log_squared(param / 9.0)?;
                ing.insert(keys::INITIAL.into(), self.initial(&init_spec)?.0);
                used.insert("lps_c1".to_string(), constants.theorem.lps_c1);
                used.insert("lps_c2".to_string(), constants.theorem.lps_c2);
            }
            TheoremTag::W2 => {
                let (p, q) = lps_exponents(s)?;
                if !(param > 2.0 && param < p.min(q)) {
                    return Err(Error::InvalidAlpha {
                        alpha: param,
                        upper: p.min(q),
                    });
                }
                ing.insert(keys::U2.into(), self.density_norm(2, p / (p - param))?);
                ing.insert(keys::DRIFT_DIFF.into(), s.norm(q, p, drift_difference(f1, f2))?);
                let init_spec = CostSpec::power(param)?;
                let w_alpha = self.initial(&init_spec)?.0.powf(1.0 / param);
                ing.insert(keys::INITIAL.into(), w_alpha);
                let moment = 2.0 * param - 2.0;
                let cloud = s.init_first.to_cloud()?;
                ing.insert(format!("initial_moment_{moment}"), abs_moment(&cloud, moment));
                used.insert("w2_alpha".to_string(), constants.theorem.w2_alpha);
            }
        }
        let rhs = assemble(tag, &ing, param, s, &constants.theorem)?;
        let (_, ensemble) = self.initial(&spec)?;
        let checkpoints = measure_lhs(s, &ensemble, &spec, tag == TheoremTag::W2, rhs)?;
        let pass = checkpoints.iter().all(|c| c.pass);
        let needed_constant = if tag == TheoremTag::Osgood {
            None
        } else {
            let r0 = assemble(tag, &ing, param, s, &TheoremConstants::uniform(0.0))?;
            let r1 = assemble(tag, &ing, param, s, &TheoremConstants::uniform(1.0))?;
            let worst = checkpoints.iter().map(|c| c.lhs_upper).fold(0.0, f64::max);
            Some(if r1 > r0 {
                ((worst - r0) / (r1 - r0)).max(0.0)
            } else {
                0.0
            })
        };
        Ok(BoundReport {
            theorem: tag,
            scenario: s.name.clone(),
            delta,
            alpha,
            ingredients: ing,
            constants: used,
            rhs,
            needed_constant,
            checkpoints,
            pass,
        })
    }
}

/// The right-hand side for `tag` from measured ingredients; affine in each
/// free constant.
fn assemble(tag: TheoremTag, ing: &Ingredients, param: f64, s: &Scenario, tc: &TheoremConstants) -> Result<f64> {
    match tag {
        TheoremTag::Sobolev => rhs_thm_sobolev(ing, param, tc.sobolev),
        TheoremTag::W11 => rhs_thm_w11(ing, param, tc.w11),
        TheoremTag::Osgood => rhs_thm_osgood(ing, param),
        TheoremTag::Mixed => {
            // C1, C2 carry their dependence on the density norms linearly
            let c1 = tc.mixed_c1 * need(ing, keys::U_SUM_DIFFUSION)?;
            let c2 = tc.mixed_c2 * need(ing, keys::U_SUM_DRIFT)?;
            rhs_thm_mixed(ing, param, c1, c2)
        }
        TheoremTag::Lps => {
            let (p, q) = lps_exponents(s)?;
            rhs_thm_lps(ing, param, s.grid.dim(), p, q, tc.lps_c1, tc.lps_c2)
        }
        TheoremTag::W2 => {
            let (p, q) = lps_exponents(s)?;
            rhs_thm_w2(ing, param, p, q, tc.w2_alpha)
        }
    }
}

fn lps_exponents(s: &Scenario) -> Result<(f64, f64)> {
    match (s.exponents.p, s.exponents.q) {
        (Some(p), Some(q)) => Ok((p, q)),
        _ => Err(Error::Config(format!("scenario {} must declare p and q", s.name))),
    }
}

/// Cell-centre atoms of a density, coarsened until at most 400 remain.
fn coarse_cloud(density: &GridDensity) -> Result<ParticleCloud> {
    let mut g = density.clone();
    while g.to_cloud()?.len() > 400 {
        g = g.coarsen(2)?;
    }
    g.to_cloud()
}

fn run_ensemble(s: &Scenario, pairs: &InitialPairs) -> Result<CoupledPathEnsemble> {
    let scheme = SdeScheme::with_checkpoints(s.horizon, s.dt, &s.checkpoints, s.seed)?;
    let noise = s.kappa.sqrt();
    let (f1, f2) = if noise == 1.0 {
        (s.first.clone(), s.second.clone())
    } else {
        (scaled_diffusion(&s.first, noise), scaled_diffusion(&s.second, noise))
    };
    evolve_coupled(&f1, &f2, pairs, &scheme)
}

fn measure_lhs(
    s: &Scenario,
    ensemble: &CoupledPathEnsemble,
    spec: &CostSpec,
    root: bool,
    rhs: f64,
) -> Result<Vec<CheckpointResult>> {
    let curve = coupled_cost_curve(ensemble, spec);
    let d = ensemble.dim;
    let mut out = Vec::new();
    for (ci, &t) in s.checkpoints.iter().enumerate() {
        let frame = ensemble.frame_at(t);
        let point = curve[frame];
        let (coupled, se, upper) = if root {
            let m = point.mean.max(0.0);
            let se = if m > 0.0 {
                point.se / (2.0 * m.sqrt())
            } else {
                point.se.sqrt()
            };
            (m.sqrt(), se, (m + 3.0 * point.se).sqrt())
        } else {
            (point.mean, point.se, point.mean + 3.0 * point.se)
        };
        let results: Vec<(f64, f64)> = (0..s.ot_resamples)
            .into_par_iter()
            .map(|r| -> Result<(f64, f64)> {
                let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ ((ci as u64) << 32) ^ r as u64);
                let n = s.ot_atoms.min(ensemble.trajectories);
                let idx = sample_indices(&mut rng, ensemble.trajectories, n).into_vec();
                let pick =
                    |src: &[f64]| -> Vec<f64> { idx.iter().flat_map(|&i| src[i * d..(i + 1) * d].to_vec()).collect() };
                let a = ParticleCloud::uniform(d, pick(&ensemble.first[frame]), t)?;
                let b = ParticleCloud::uniform(d, pick(&ensemble.second[frame]), t)?;
                let plan = solve_exact(&a, &b, spec)?;
                let matched: Vec<f64> = (0..n).map(|i| eval_cost(spec, a.point(i), b.point(i))).collect();
                let matched = matched.iter().sum::<f64>() / n as f64;
                Ok(if root {
                    (plan.cost.max(0.0).sqrt(), matched.sqrt())
                } else {
                    (plan.cost, matched)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ot_max = results.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
        let ot_min = results.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
        let sub = results.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
        out.push(CheckpointResult {
            t,
            lhs_coupled: coupled,
            lhs_se: se,
            lhs_upper: upper,
            lhs_ot: ot_max,
            lhs_ot_spread: ot_max - ot_min,
            lhs_subsample_coupled: sub,
            rhs,
            margin: rhs - upper,
            pass: upper <= rhs,
        });
    }
    Ok(out)
}

/// Prepares the scenario and checks one bound.
pub fn check_bound(scenario: &Scenario, tag: TheoremTag, param: f64, constants: &Constants) -> Result<BoundReport> {
    ScenarioRun::prepare(scenario)?.check(tag, param, constants)
}

/// `W_p^p(mu1_t, mu2_t) <= e^{(pL+p-1)T} int_0^t int |b1 - b2|^p dmu2_s ds`
/// along 1D grid solutions of the continuity equations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GronwallReport {
    pub p: f64,
    pub lipschitz: f64,
    pub horizon: f64,
    pub times: Vec<f64>,
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    /// `1 - lhs / rhs` per checkpoint.
    pub margins: Vec<f64>,
    pub pass: bool,
}

pub fn gronwall_check(
    f1: &CoefficientField,
    f2: &CoefficientField,
    init: &GridDensity,
    p: f64,
    lipschitz: f64,
    checkpoints: &[f64],
    frames_per_unit: usize,
) -> Result<GronwallReport> {
    if init.grid.dim() != 1 {
        return Err(Error::InvalidGrid("the quantile route needs a 1D grid".into()));
    }
    let horizon = f1.horizon;
    let n = ((horizon * frames_per_unit as f64).ceil() as usize).max(1);
    let mut times: Vec<f64> = (0..=n).map(|k| horizon * k as f64 / n as f64).collect();
    times.extend(checkpoints);
    times.sort_by(f64::total_cmp);
    times.dedup();
    let sol1 = fpe::solve_auto(&FpeProblem::new(f1.clone(), init.clone(), 0.0, horizon), &times)?;
    let sol2 = fpe::solve_auto(&FpeProblem::new(f2.clone(), init.clone(), 0.0, horizon), &times)?;
    let grid = &init.grid;
    let vol = grid.cell_volume();
    // inner integral along mu2 at each frame
    let inner: Vec<(f64, f64)> = sol2
        .frames
        .iter()
        .map(|u| {
            let v: f64 = (0..grid.len())
                .map(|i| {
                    let x = grid.center(i);
                    let diff = crate::coefficients::distance(&f1.drift_at(u.time, &x), &f2.drift_at(u.time, &x));
                    diff.powf(p) * u.values[i] * vol
                })
                .sum();
            (u.time, v)
        })
        .collect();
    let mut report = GronwallReport {
        p,
        lipschitz,
        horizon,
        times: Vec::new(),
        lhs: Vec::new(),
        rhs: Vec::new(),
        margins: Vec::new(),
        pass: true,
    };
    for &t in checkpoints {
        let mut integral = 0.0;
        for w in inner.windows(2) {
            if w[1].0 <= t + 1e-12 {
                integral += 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1);
            }
        }
        let rhs = gronwall_rhs(p, lipschitz, horizon, integral);
        let wp = wasserstein_densities_1d(sol1.at(t), sol2.at(t), p, 20_000)?;
        let lhs = wp.powf(p);
        report.times.push(t);
        report.lhs.push(lhs);
        report.rhs.push(rhs);
        report.margins.push(1.0 - lhs / rhs);
        report.pass &= lhs <= rhs;
    }
    Ok(report)
}

/// One `(kappa, t)` cell of the zero-diffusivity sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroDiffusivityRow {
    pub kappa: f64,
    pub t: f64,
    /// Coupled estimate of `D~_{sqrt(kappa)}` and its standard error.
    pub coupled: f64,
    pub se: f64,
    pub upper: f64,
    /// Coupled estimate of `D~_{delta0}` at the fixed scale.
    pub fixed_scale: f64,
    /// Exact OT of `D~_{sqrt(kappa)}` between quantile atoms of the grid solutions (1D).
    pub grid_ot: Option<f64>,
    /// `sup_t |rho^kappa_t|_{L^q}` and the a priori bound.
    pub lq_norm: f64,
    pub lq_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroDiffusivityReport {
    pub rows: Vec<ZeroDiffusivityRow>,
    pub rhs: f64,
    pub c_qt: f64,
    pub grad_drift: f64,
    pub sigma_sq: f64,
    pub fixed_delta: f64,
    /// Max over min of the coupled values across kappa, per checkpoint.
    pub ratios: Vec<(f64, f64)>,
    /// Fitted slope of `log D~_{delta0}` against `log kappa` at the last checkpoint.
    pub slope: f64,
    pub ceiling_ok: bool,
    pub rhs_ok: bool,
    pub lq_ok: bool,
    pub pass: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn zero_diffusivity_sweep(
    field: &CoefficientField,
    init: &GridDensity,
    kappas: &[f64],
    checkpoints: &[f64],
    particles: usize,
    dt: f64,
    seed: u64,
    p: f64,
    c_dp: f64,
) -> Result<ZeroDiffusivityReport> {
    let grid = &init.grid;
    let horizon = field.horizon;
    let q = p / (p - 1.0);
    let fixed_delta = 0.1;
    let neg = NegativeDivergence::compute(field, grid, horizon, 50);
    let c_qt = init.lr_norm(q)? * ((1.0 - 1.0 / q) * neg.integral_to(horizon)).exp();
    let steps = 50;
    let grad_drift = SpaceTimeSamples::sample(grid, horizon, steps, drift_jacobian_norm(field, 1e-5)).norm(1.0, p)?;
    // sup_t |sigma_t|^2_{L^{2p}}
    let sig = SpaceTimeSamples::sample(grid, horizon, steps, |t, x| {
        field.diffusion_at(t, x).iter().map(|v| v * v).sum::<f64>().sqrt()
    });
    let sigma_sq = sig.norm(f64::INFINITY, 2.0 * p)?.powi(2);
    let rhs = rhs_zero_diffusivity(c_qt, c_dp, grad_drift, horizon, sigma_sq);

    let mut frames: Vec<f64> = (0..=20).map(|k| horizon * k as f64 / 20.0).collect();
    frames.extend(checkpoints);
    frames.sort_by(f64::total_cmp);
    frames.dedup();
    let transport = fpe::solve_auto(&FpeProblem::new(field.clone(), init.clone(), 0.0, horizon), &frames)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2e40);
    let pairs = InitialPairs::diagonal(grid.dim(), init.sample(particles, &mut rng)?);
    let scheme = SdeScheme::with_checkpoints(horizon, dt, checkpoints, seed)?;
    let frozen = scaled_diffusion(field, 0.0);
    let mut rows = Vec::new();
    for &kappa in kappas {
        let noisy = scaled_diffusion(field, kappa.sqrt());
        let ens = evolve_coupled(&noisy, &frozen, &pairs, &scheme)?;
        let spec = CostSpec::log_squared(kappa.sqrt())?;
        let curve = coupled_cost_curve(&ens, &spec);
        let fixed = coupled_cost_curve(&ens, &CostSpec::log_squared(fixed_delta)?);
        let sol = fpe::solve_auto(&FpeProblem::new(field.clone(), init.clone(), kappa, horizon), &frames)?;
        let lq = fpe::lq_apriori_check(&sol.frames, q, &neg)?;
        let lq_norm = lq.norms.iter().copied().fold(0.0, f64::max);
        let lq_bound = lq.bounds.iter().copied().fold(0.0, f64::max);
        for &t in checkpoints {
            let f = ens.frame_at(t);
            let grid_ot = if grid.dim() == 1 {
                let a = sol.at(t).quantile_atoms(200)?;
                let b = transport.at(t).quantile_atoms(200)?;
                Some(solve_exact(&a, &b, &spec)?.cost)
            } else {
                None
            };
            rows.push(ZeroDiffusivityRow {
                kappa,
                t,
                coupled: curve[f].mean,
                se: curve[f].se,
                upper: curve[f].mean + 3.0 * curve[f].se,
                fixed_scale: fixed[f].mean,
                grid_ot,
                lq_norm,
                lq_bound,
            });
        }
    }
    let mut ratios = Vec::new();
    for &t in checkpoints {
        let vals: Vec<f64> = rows.iter().filter(|r| r.t == t).map(|r| r.coupled).collect();
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        ratios.push((t, max / min));
    }
    let last = *checkpoints.last().unwrap_or(&horizon);
    let (ks, ds): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.t == last)
        .map(|r| (r.kappa, r.fixed_scale))
        .unzip();
    let slope = if ks.len() >= 2 {
        loglog_fit(&ks, &ds).slope
    } else {
        f64::NAN
    };
    let ceiling_ok = ratios.iter().all(|r| r.1 < 3.0);
    let rhs_ok = rows.iter().all(|r| r.upper <= rhs);
    let lq_ok = rows.iter().all(|r| r.lq_norm <= r.lq_bound * (1.0 + 1e-12));
    Ok(ZeroDiffusivityReport {
        rows,
        rhs,
        c_qt,
        grad_drift,
        sigma_sq,
        fixed_delta,
        ratios,
        slope,
        ceiling_ok,
        rhs_ok,
        lq_ok,
        pass: ceiling_ok && rhs_ok && lq_ok,
    })
}

/// Mass of `{|x - y| > kappa}` under the optimal plan for `D~_{1/n}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniquenessRow {
    pub n: usize,
    pub kappa: f64,
    pub off_diagonal_mass: f64,
    pub discrepancy: f64,
    /// `D~_{1/n}(mu, nu) / log(1 + n^2 kappa^2)`, the envelope for the mass.
    pub envelope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub rows: Vec<UniquenessRow>,
    /// Every off-diagonal mass at the largest `n` vanishes.
    pub concentrated: bool,
}

pub fn uniqueness_diagnostic(
    mu: &ParticleCloud,
    nu: &ParticleCloud,
    ns: &[usize],
    kappas: &[f64],
) -> Result<UniquenessReport> {
    let mut rows = Vec::new();
    for &n in ns {
        let spec = CostSpec::log_squared(1.0 / n as f64)?;
        let plan = solve_exact(mu, nu, &spec)?;
        for &kappa in kappas {
            let mass = plan.mass_where(|i, j| crate::coefficients::distance(mu.point(i), nu.point(j)) > kappa);
            let l = (n as f64 * kappa).powi(2).ln_1p();
            rows.push(UniquenessRow {
                n,
                kappa,
                off_diagonal_mass: mass,
                discrepancy: plan.cost,
                envelope: plan.cost / l,
            });
        }
    }
    let top = ns.iter().copied().max().unwrap_or(0);
    let concentrated = rows.iter().filter(|r| r.n == top).all(|r| r.off_diagonal_mass <= 1e-12);
    Ok(UniquenessReport { rows, concentrated })
}

/// Per-trajectory cost samples, exposed for sweeps that need raw values.
pub fn coupled_costs(ensemble: &CoupledPathEnsemble, frame: usize, spec: &CostSpec) -> (f64, f64) {
    let d = ensemble.dim;
    let costs: Vec<f64> = (0..ensemble.trajectories)
        .map(|i| {
            eval_cost(
                spec,
                &ensemble.first[frame][i * d..(i + 1) * d],
                &ensemble.second[frame][i * d..(i + 1) * d],
            )
        })
        .collect();
    mean_and_se(&costs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ing(pairs: &[(&str, f64)]) -> Ingredients {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn sobolev_example() -> Ingredients {
        ing(&[
            (keys::INITIAL, 0.0),
            (keys::U2, 1.0),
            (keys::DRIFT_DIFF, 0.1),
            (keys::DIFFUSION_DIFF_SQ, 0.01),
            (keys::U_SUM, 2.0),
            (keys::GRAD_DRIFT, 2.0),
            (keys::GRAD_DIFFUSION_SQ, 3.0),
        ])
    }

    #[test]
    fn sobolev_hand_arithmetic() {
        assert_relative_eq!(
            rhs_thm_sobolev(&sobolev_example(), 0.1, 1.0).unwrap(),
            14.0,
            max_relative = 1e-14
        );
        let mut zero = sobolev_example();
        for k in [
            keys::DRIFT_DIFF,
            keys::DIFFUSION_DIFF_SQ,
            keys::GRAD_DRIFT,
            keys::GRAD_DIFFUSION_SQ,
        ] {
            zero.insert(k.into(), 0.0);
        }
        assert_eq!(rhs_thm_sobolev(&zero, 0.1, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn delta_powers() {
        let mut only_drift = sobolev_example();
        only_drift.insert(keys::DIFFUSION_DIFF_SQ.into(), 0.0);
        only_drift.insert(keys::U_SUM.into(), 0.0);
        let mut only_diff = sobolev_example();
        only_diff.insert(keys::DRIFT_DIFF.into(), 0.0);
        only_diff.insert(keys::U_SUM.into(), 0.0);
        let a = rhs_thm_sobolev(&only_drift, 0.1, 1.0).unwrap();
        let b = rhs_thm_sobolev(&only_drift, 1.0, 1.0).unwrap();
        assert_relative_eq!(a / b, 10.0, max_relative = 1e-12);
        let a = rhs_thm_sobolev(&only_diff, 0.1, 1.0).unwrap();
        let b = rhs_thm_sobolev(&only_diff, 1.0, 1.0).unwrap();
        assert_relative_eq!(a / b, 100.0, max_relative = 1e-12);
    }

    #[test]
    fn missing_ingredient() {
        let mut i = sobolev_example();
        i.remove(keys::U2);
        match rhs_thm_sobolev(&i, 0.1, 1.0) {
            Err(Error::IncompleteIngredients(k)) => assert_eq!(k, keys::U2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn w11_hand_arithmetic() {
        let i = ing(&[
            (keys::INITIAL, 0.0),
            (keys::U2, 1.0),
            (keys::DRIFT_DIFF, 0.0),
            (keys::DIFFUSION_DIFF_SQ, 0.0),
            (keys::U_SUM, 1.0),
            (keys::DVP_INTEGRAL, 1.0),
            (keys::PHI_DELTA, 2.0),
            (keys::GRAD_DIFFUSION_SQ, 3.0),
        ]);
        assert_relative_eq!(rhs_thm_w11(&i, 0.1, 1.0).unwrap(), 14.0, max_relative = 1e-14);
        let mut same = i.clone();
        same.insert(keys::DVP_INTEGRAL.into(), 0.0);
        same.insert(keys::GRAD_DIFFUSION_SQ.into(), 0.0);
        // the "+1" next to the G-integral survives identical coefficients
        assert_relative_eq!(rhs_thm_w11(&same, 0.1, 1.0).unwrap(), 2.0 * 2.0, max_relative = 1e-14);
    }

    #[test]
    fn w11_grows_slower_than_log() {
        let g = crate::coefficients::DvpFunction::s_log();
        let mut last_ratio = f64::INFINITY;
        let mut last = 0.0;
        for k in 1..=6 {
            let delta = 10f64.powi(-k);
            let mut i = ing(&[
                (keys::INITIAL, 0.0),
                (keys::U2, 1.0),
                (keys::DRIFT_DIFF, 0.0),
                (keys::DIFFUSION_DIFF_SQ, 0.0),
                (keys::U_SUM, 1.0),
                (keys::DVP_INTEGRAL, 0.5),
                (keys::GRAD_DIFFUSION_SQ, 0.0),
            ]);
            i.insert(keys::PHI_DELTA.into(), phi_delta(&g, delta));
            let r = rhs_thm_w11(&i, delta, 1.0).unwrap();
            assert!(r > last);
            let ratio = r / delta.ln().abs();
            assert!(ratio < last_ratio);
            last = r;
            last_ratio = ratio;
        }
    }

    #[test]
    fn osgood_hand_arithmetic() {
        let i = ing(&[
            (keys::INITIAL, 0.0),
            (keys::G_NORM, 0.5),
            (keys::U_SUM, 2.0),
            (keys::U2, 1.0),
            (keys::DRIFT_DIFF, 0.1),
            (keys::DIFFUSION_DIFF_SQ, 0.0),
        ]);
        assert_relative_eq!(rhs_thm_osgood(&i, 0.1).unwrap(), 10.0, max_relative = 1e-14);
        let mut zero = i.clone();
        zero.insert(keys::G_NORM.into(), 0.0);
        zero.insert(keys::DRIFT_DIFF.into(), 0.0);
        assert_eq!(rhs_thm_osgood(&zero, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn mixed_and_monotone_in_delta() {
        let i = sobolev_example();
        assert_relative_eq!(
            rhs_thm_mixed(&i, 0.1, 1.0, 1.0).unwrap(),
            (1.0 + 3.0) + (1.0 + 2.0),
            max_relative = 1e-14
        );
        let mut last = f64::INFINITY;
        for delta in [0.01, 0.1, 1.0, 10.0] {
            let values = [
                rhs_thm_sobolev(&i, delta, 1.0).unwrap(),
                rhs_thm_mixed(&i, delta, 2.0, 3.0).unwrap(),
                rhs_thm_osgood(
                    &ing(&[
                        (keys::INITIAL, 0.0),
                        (keys::G_NORM, 0.5),
                        (keys::U_SUM, 2.0),
                        (keys::U2, 1.0),
                        (keys::DRIFT_DIFF, 0.1),
                        (keys::DIFFUSION_DIFF_SQ, 0.01),
                    ]),
                    delta,
                )
                .unwrap(),
            ];
            let total: f64 = values.iter().sum();
            assert!(total <= last);
            last = total;
        }
    }

    #[test]
    fn lps_arithmetic_and_validation() {
        let i = ing(&[(keys::INITIAL, 0.0), (keys::DRIFT_DIFF, 0.1), (keys::DRIFT_NORM, 1.0)]);
        // C1 (1 + 1) + C2 (1 + 1)
        assert_relative_eq!(
            rhs_thm_lps(&i, 0.1, 1, 6.0, 6.0, 1.0, 2.0).unwrap(),
            2.0 + 4.0,
            max_relative = 1e-14
        );
        let zero = ing(&[(keys::INITIAL, 0.3), (keys::DRIFT_DIFF, 0.0), (keys::DRIFT_NORM, 0.0)]);
        assert_eq!(rhs_thm_lps(&zero, 0.1, 1, 6.0, 6.0, 1.0, 2.0).unwrap(), 0.3);
        assert!(matches!(check_lps(2, 2.0, 6.0), Err(Error::LpsViolation(_))));
        assert!(matches!(check_lps(2, 4.0, 4.0), Err(Error::LpsViolation(_))));
        assert!(check_lps(1, 4.0, 4.0).is_ok());
        assert!(check_lps(1, 3.0, 3.0).is_err());
    }

    #[test]
    fn initial_scale_bookkeeping() {
        let mu = ParticleCloud::uniform(1, vec![0.0, 1.0, 2.5], 0.0).unwrap();
        let nu = ParticleCloud::uniform(1, vec![0.2, 1.4, 2.0], 0.0).unwrap();
        let delta = 0.3;
        let small = solve_exact(&mu, &nu, &CostSpec::log_squared(delta / 9.0).unwrap())
            .unwrap()
            .cost;
        let big = solve_exact(&mu, &nu, &CostSpec::log_squared(delta).unwrap())
            .unwrap()
            .cost;
        assert!(small >= big);
    }

    #[test]
    fn w2_arithmetic_and_alpha() {
        let alpha = 3.0;
        let i = ing(&[
            (keys::INITIAL, 0.2),
            (keys::U2, 1.1f64.powf(alpha)),
            (keys::DRIFT_DIFF, 0.05),
        ]);
        assert_relative_eq!(
            rhs_thm_w2(&i, alpha, 6.0, 6.0, 2.0).unwrap(),
            0.51,
            max_relative = 1e-12
        );
        assert!(matches!(
            rhs_thm_w2(&i, 2.0, 6.0, 6.0, 2.0),
            Err(Error::InvalidAlpha { .. })
        ));
        assert!(matches!(
            rhs_thm_w2(&i, 6.5, 6.0, 8.0, 2.0),
            Err(Error::InvalidAlpha { .. })
        ));
        let same = ing(&[(keys::INITIAL, 0.0), (keys::U2, 1.0), (keys::DRIFT_DIFF, 0.0)]);
        assert_eq!(rhs_thm_w2(&same, alpha, 6.0, 6.0, 2.0).unwrap(), 0.0);
        // W_alpha is nondecreasing in alpha
        let mu = ParticleCloud::uniform(1, vec![0.0, 1.0, 3.0, 4.0], 0.0).unwrap();
        let nu = ParticleCloud::uniform(1, vec![0.5, 0.7, 2.0, 6.0], 0.0).unwrap();
        let mut last = 0.0;
        for a in [2.5, 3.0, 4.0, 5.0] {
            let w = crate::transport::wasserstein(&mu, &nu, a).unwrap();
            assert!(w >= last - 1e-12);
            last = w;
        }
    }

    #[test]
    fn gronwall_smooth_case() {
        let grid = BoxGrid::line(-5.0, 5.0, 500).unwrap();
        let init = GridDensity::gaussian(grid, &[0.0], 0.5).unwrap();
        let f1 = CoefficientField::with_constant_sigma("-x", 1, 1.0, 0.0, |_, x, out| out[0] = -x[0]);
        let f2 = CoefficientField::with_constant_sigma("-x+0.05", 1, 1.0, 0.0, |_, x, out| out[0] = -x[0] + 0.05);
        let r = gronwall_check(&f1, &f2, &init, 2.0, 1.0, &[0.25, 0.5, 1.0], 40).unwrap();
        assert!(r.pass);
        for (k, &t) in r.times.iter().enumerate() {
            // oracle: both laws are translates, W_2^2 = (0.05 (1 - e^{-t}))^2
            let exact = (0.05 * (1.0 - (-t).exp())).powi(2);
            assert!((r.lhs[k] - exact).abs() < 0.2 * exact + 1e-6, "{} vs {exact}", r.lhs[k]);
            assert_relative_eq!(r.rhs[k], 3f64.exp() * 0.0025 * t, max_relative = 1e-3);
        }
    }

    #[test]
    fn uniqueness_examples() {
        let pts = vec![0.0, 0.3, 0.9, 1.4, 2.0];
        let mu = ParticleCloud::uniform(1, pts.clone(), 0.0).unwrap();
        let r = uniqueness_diagnostic(&mu, &mu, &[1, 10, 100], &[0.1, 0.5]).unwrap();
        assert!(r.concentrated);
        assert!(r.rows.iter().all(|row| row.off_diagonal_mass == 0.0));
        let a = ParticleCloud::dirac(vec![0.0]);
        let b = ParticleCloud::dirac(vec![1.0]);
        let r = uniqueness_diagnostic(&a, &b, &[1, 10, 100], &[0.5]).unwrap();
        assert!(!r.concentrated);
        assert!(r.rows.iter().all(|row| (row.off_diagonal_mass - 1.0).abs() < 1e-12));
        let shifted: Vec<f64> = pts.iter().map(|x| x + 0.01).collect();
        let nu = ParticleCloud::uniform(1, shifted, 0.0).unwrap();
        let r = uniqueness_diagnostic(&mu, &nu, &[1, 10, 100], &[0.1]).unwrap();
        assert!(r.rows.iter().all(|row| row.off_diagonal_mass == 0.0));
    }

    #[test]
    fn identical_halves_have_zero_lhs() {
        let grid = BoxGrid::line(-4.0, 4.0, 160).unwrap();
        let init = GridDensity::gaussian(grid.clone(), &[0.0], 0.5).unwrap();
        let f = CoefficientField::with_constant_sigma("ou", 1, 1.0, 0.3, |_, x, out| out[0] = -x[0]);
        let mut s = Scenario::new("identical", grid, f.clone(), f, init);
        s.particles = 2000;
        let run = ScenarioRun::prepare(&s).unwrap();
        let c = Constants::frozen();
        for tag in [TheoremTag::Sobolev, TheoremTag::W11, TheoremTag::Mixed] {
            let r = run.check(tag, 0.1, &c).unwrap();
            assert!(r.pass);
            assert!(r.checkpoints.iter().all(|cp| cp.lhs_coupled == 0.0 && cp.lhs_ot == 0.0));
        }
    }

    #[test]
    fn subsample_ot_never_exceeds_matched_coupling() {
        let grid = BoxGrid::line(-4.0, 4.0, 160).unwrap();
        let init = GridDensity::gaussian(grid.clone(), &[0.0], 0.5).unwrap();
        let f1 = CoefficientField::with_constant_sigma("a", 1, 1.0, 0.3, |_, x, out| out[0] = -x[0]);
        let f2 = CoefficientField::with_constant_sigma("b", 1, 1.0, 0.3, |_, x, out| out[0] = -x[0] + 0.2);
        let mut s = Scenario::new("shift", grid, f1, f2, init);
        s.particles = 2000;
        s.ot_atoms = 60;
        let r = check_bound(&s, TheoremTag::Sobolev, 0.1, &Constants::frozen()).unwrap();
        for cp in &r.checkpoints {
            assert!(cp.lhs_ot <= cp.lhs_subsample_coupled + 1e-12);
            assert!(cp.lhs_coupled > 0.0);
        }
    }

    #[test]
    fn frozen_manifest_loads() {
        let c = Constants::frozen();
        assert!((c.kernel_integral["1"] - 2.0).abs() < 1e-9);
        assert!((c.kernel_integral["2"] - 4.0).abs() < 1e-9);
        assert!(c.theorem.sobolev >= 1.0);
        assert_eq!(Constants::frozen_hash().len(), 64);
    }
}
