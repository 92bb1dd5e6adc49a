//! Scenario configuration, orchestration and report emission.

mod calibrate;
mod config;

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use calibrate::{calibrate, calibration_family, maximal_grid, MAXIMAL_EXPONENTS};
pub use config::{
    build_field, build_initial, linear_gaussian, Check, CoefficientSpec, Domain, InitialSpec, ModulusKind, OsgoodSpec,
    ScenarioConfig, ZvonkinSpec, SCHEMA,
};

use crate::coefficients::CoefficientField;
use crate::error::{Error, Result};
use crate::fpe::{self, FpeProblem};
use crate::measures::{density_from_cloud, GridDensity, ParticleCloud};
use crate::simulate::{evolve_single, marginals, SdeScheme};
use crate::stability::{
    gronwall_check, scaled_diffusion, zero_diffusivity_sweep, BoundReport, Constants, ScenarioRun, TheoremTag,
};
use crate::stats::loglog_fit;
use crate::transport::{self, CostSpec};
use crate::zvonkin::{self, Diffeomorphism};

/// Environment variable naming the root under which every command writes.
pub const OUTPUT_ROOT_ENV: &str = "FPK_OUTPUT_ROOT";

/// Marker left in an output directory whose run hit an execution error.
pub const FAILED_MARKER: &str = "FAILED";

/// Named scenarios shipped with the crate.
pub const BUILTIN_SCENARIOS: [(&str, &str); 14] = [
    (
        "sobolev-step-1d",
        include_str!("../../data/scenarios/sobolev-step-1d.json"),
    ),
    (
        "sobolev-rotation-2d",
        include_str!("../../data/scenarios/sobolev-rotation-2d.json"),
    ),
    ("w11-cusp-1d", include_str!("../../data/scenarios/w11-cusp-1d.json")),
    ("mixed-sine-1d", include_str!("../../data/scenarios/mixed-sine-1d.json")),
    (
        "mixed-sigma-1d",
        include_str!("../../data/scenarios/mixed-sigma-1d.json"),
    ),
    (
        "osgood-identity-1d",
        include_str!("../../data/scenarios/osgood-identity-1d.json"),
    ),
    ("osgood-log-1d", include_str!("../../data/scenarios/osgood-log-1d.json")),
    ("gronwall-1d", include_str!("../../data/scenarios/gronwall-1d.json")),
    (
        "zero-diffusivity-1d",
        include_str!("../../data/scenarios/zero-diffusivity-1d.json"),
    ),
    (
        "superposition-ou-1d",
        include_str!("../../data/scenarios/superposition-ou-1d.json"),
    ),
    (
        "superposition-rotation-2d",
        include_str!("../../data/scenarios/superposition-rotation-2d.json"),
    ),
    (
        "lps-singular-1d",
        include_str!("../../data/scenarios/lps-singular-1d.json"),
    ),
    (
        "heat-kernel-1d",
        include_str!("../../data/scenarios/heat-kernel-1d.json"),
    ),
    (
        "zvonkin-sine-1d",
        include_str!("../../data/scenarios/zvonkin-sine-1d.json"),
    ),
];

/// The regression suite checked against the frozen constants.
pub const REGRESSION_SUITE: [&str; 5] = [
    "sobolev-step-1d",
    "sobolev-rotation-2d",
    "w11-cusp-1d",
    "mixed-sine-1d",
    "mixed-sigma-1d",
];

pub fn builtin_scenario(name: &str) -> Result<ScenarioConfig> {
    let raw = BUILTIN_SCENARIOS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, raw)| *raw)
        .ok_or_else(|| Error::Config(format!("no built-in scenario `{name}`")))?;
    ScenarioConfig::parse(raw)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

/// Files written into one output directory, in order.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        // drop whatever a previous run listed, so nothing stale survives
        if let Ok(raw) = std::fs::read_to_string(dir.join("manifest.json")) {
            if let Ok(old) = serde_json::from_str::<serde_json::Value>(&raw) {
                for f in old["files"].as_array().into_iter().flatten().filter_map(|v| v.as_str()) {
                    let path = dir.join(f);
                    if path.is_file() {
                        std::fs::remove_file(path)?;
                    }
                }
            }
        }
        let marker = dir.join(FAILED_MARKER);
        if marker.exists() {
            std::fs::remove_file(marker)?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        std::fs::write(p, bytes)?;
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, serde_json::to_string_pretty(value)? + "\n")
    }

    fn density(&mut self, stem: &str, u: &GridDensity) -> Result<()> {
        self.files.push(format!("{stem}.csv"));
        self.files.push(format!("{stem}.json"));
        u.save(&self.dir.join(stem))
    }

    fn cloud(&mut self, stem: &str, c: &ParticleCloud) -> Result<()> {
        self.files.push(format!("{stem}.csv"));
        self.files.push(format!("{stem}.json"));
        c.save(&self.dir.join(stem))
    }

    fn finish(mut self, meta: serde_json::Value, status: &str, error: Option<String>) -> Result<()> {
        if let Some(e) = &error {
            let p = self.path(FAILED_MARKER);
            std::fs::write(p, format!("{e}\n"))?;
        }
        let created = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut manifest = serde_json::json!({
            "tool": "fpk",
            "version": env!("CARGO_PKG_VERSION"),
            "schema": SCHEMA,
            "created_unix": created,
            "status": status,
            "constants_sha256": Constants::frozen_hash(),
        });
        if let (Some(m), Some(extra)) = (manifest.as_object_mut(), meta.as_object()) {
            for (k, v) in extra {
                m.insert(k.clone(), v.clone());
            }
            if let Some(e) = error {
                m.insert("error".into(), e.into());
            }
            m.insert("files".into(), serde_json::json!(self.files));
        }
        std::fs::write(
            self.dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        Ok(())
    }
}

/// Result of one check inside a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckStatus {
    pub name: String,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub pass: bool,
    pub checks: Vec<CheckStatus>,
    /// Every report scalar, in a stable order, for sweeps.
    pub scalars: Vec<(String, f64)>,
}

impl RunOutcome {
    /// 0 when everything passed, 2 when a check failed.
    pub fn exit_code(&self) -> i32 {
        if self.pass {
            0
        } else {
            2
        }
    }
}

/// Grid solution against a particle histogram at `horizon`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperpositionReport {
    pub horizon: f64,
    pub particles: usize,
    pub coarse_cells: Vec<usize>,
    pub l1: f64,
    pub grid_leakage: f64,
    pub particle_leakage: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Coarsens the grid solution to at most `max_cells` per axis, then compares
/// cell averages with the histogram of `particles` SDE samples.
#[allow(clippy::too_many_arguments)]
pub fn superposition_check(
    field: &CoefficientField,
    init: &GridDensity,
    kappa: f64,
    particles: usize,
    dt: f64,
    seed: u64,
    max_cells: usize,
    tolerance: f64,
) -> Result<SuperpositionReport> {
    let horizon = field.horizon;
    let sol = fpe::solve_auto(
        &FpeProblem::new(field.clone(), init.clone(), kappa, horizon),
        &[horizon],
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e9e);
    let start = init.sample(particles, &mut rng)?;
    let scheme = SdeScheme::with_checkpoints(horizon, dt, &[horizon], seed)?;
    let noisy = if kappa == 1.0 {
        field.clone()
    } else {
        scaled_diffusion(field, kappa.sqrt())
    };
    let frames = evolve_single(&noisy, &start, &scheme)?;
    let last = frames.last().cloned().unwrap_or_default();
    let cloud = ParticleCloud::uniform(field.dim(), last, horizon)?;
    let cells = init.grid.cells()[0];
    let factor = (1..=cells)
        .find(|f| init.grid.cells().iter().all(|c| c % f == 0 && c / f <= max_cells))
        .ok_or_else(|| Error::InvalidGrid(format!("cannot coarsen {cells} cells below {max_cells}")))?;
    let coarse = sol.at(horizon).coarsen(factor)?;
    let hist = density_from_cloud(&cloud, &coarse.grid, None)?;
    let l1 = coarse.l1_distance(&hist)?;
    Ok(SuperpositionReport {
        horizon,
        particles,
        coarse_cells: coarse.grid.cells().to_vec(),
        l1,
        grid_leakage: sol.leakage,
        particle_leakage: hist.leakage,
        tolerance,
        pass: l1 <= tolerance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearExactReport {
    pub times: Vec<f64>,
    pub l1: Vec<f64>,
    pub steps: usize,
}

/// L1 error of the grid solution for a linear pair, whose law stays Gaussian.
pub fn linear_exact_check(cfg: &ScenarioConfig, base: &Path) -> Result<LinearExactReport> {
    let (CoefficientSpec::Linear { rate, shift, sigma }, InitialSpec::Gaussian { mean, variance }) =
        (&cfg.first, &cfg.initial)
    else {
        return Err(Error::Config(
            "linear-exact needs a linear pair and a Gaussian initial law".into(),
        ));
    };
    let grid = cfg.grid()?;
    let field = build_field(&cfg.first, &grid, cfg.horizon, base)?;
    let init = build_initial(&cfg.initial, &grid, base)?;
    let times = cfg.checkpoints();
    let sol = fpe::solve_auto(&FpeProblem::new(field, init, cfg.kappa, cfg.horizon), &times)?;
    let mut l1 = Vec::new();
    for &t in &times {
        let (m, v) = linear_gaussian(*rate, *shift, *sigma, cfg.kappa, mean, *variance, t);
        let exact = GridDensity::gaussian(grid.clone(), &m, v)?;
        l1.push(sol.at(t).l1_distance(&exact)?);
    }
    Ok(LinearExactReport {
        times,
        l1,
        steps: sol.steps,
    })
}

/// Runs a config file; outputs land in `output_root / (output or name)`.
pub fn run(config_path: &Path, output_root: &Path) -> Result<RunOutcome> {
    let raw = std::fs::read_to_string(config_path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", config_path.display())))?;
    let cfg = ScenarioConfig::parse(&raw)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let dir = output_root.join(cfg.output.clone().unwrap_or_else(|| cfg.name.clone()));
    run_config(&cfg, base, &dir, &Constants::frozen())
}

pub fn run_config(cfg: &ScenarioConfig, base: &Path, dir: &Path, constants: &Constants) -> Result<RunOutcome> {
    cfg.validate("")?;
    let mut out = Outputs::open(dir)?;
    let meta = serde_json::json!({
        "command": "run",
        "scenario": cfg.name,
        "seed": cfg.seed,
        "config_sha256": sha256_hex(cfg.to_json().as_bytes()),
    });
    out.write("config.json", cfg.to_json())?;
    let mut checks = Vec::new();
    let mut scalars = Vec::new();
    match execute(cfg, base, constants, &mut out, &mut checks, &mut scalars) {
        Ok(()) => {
            let pass = checks.iter().all(|c: &CheckStatus| c.pass);
            let mut meta = meta;
            meta["checks"] = serde_json::json!(checks);
            out.finish(meta, if pass { "passed" } else { "checks-failed" }, None)?;
            Ok(RunOutcome {
                dir: dir.to_path_buf(),
                pass,
                checks,
                scalars,
            })
        }
        Err(e) => {
            let mut meta = meta;
            meta["checks"] = serde_json::json!(checks);
            out.finish(meta, FAILED_MARKER, Some(e.to_string()))?;
            Err(e)
        }
    }
}

fn execute(
    cfg: &ScenarioConfig,
    base: &Path,
    constants: &Constants,
    out: &mut Outputs,
    checks: &mut Vec<CheckStatus>,
    scalars: &mut Vec<(String, f64)>,
) -> Result<()> {
    let parsed = cfg.parsed_checks()?;
    let scenario = cfg.scenario(base)?;
    let tags: Vec<TheoremTag> = parsed
        .iter()
        .filter_map(|c| match c {
            Check::Bound(t) => Some(*t),
            _ => None,
        })
        .collect();
    if !tags.is_empty() {
        let run = ScenarioRun::prepare(&scenario)?;
        for (k, &t) in scenario.checkpoints.iter().enumerate() {
            out.density(&format!("density_first_c{k}"), run.fpe_first.at(t))?;
            out.density(&format!("density_second_c{k}"), run.fpe_second.at(t))?;
        }
        if let Some(e) = run.diagonal_ensemble() {
            let (a, b) = marginals(e, e.frame_at(scenario.horizon))?;
            out.cloud("cloud_first_final", &a)?;
            out.cloud("cloud_second_final", &b)?;
        }
        let deltas = if cfg.deltas.is_empty() {
            let auto = scenario.dynamical_delta()?;
            // identical halves: any scale works, the left side vanishes
            vec![if auto > 0.0 { auto } else { 0.1 }]
        } else {
            cfg.deltas.clone()
        };
        let mut reports: Vec<BoundReport> = Vec::new();
        for tag in tags {
            let params = if tag == TheoremTag::W2 { &cfg.alphas } else { &deltas };
            for (k, &param) in params.iter().enumerate() {
                let r = run.check(tag, param, constants)?;
                let name = format!("{}[{k}]", tag.name());
                for c in &r.checkpoints {
                    let t = c.t;
                    scalars.push((format!("{name}_t{t}_lhs"), c.lhs_coupled));
                    scalars.push((format!("{name}_t{t}_se"), c.lhs_se));
                    scalars.push((format!("{name}_t{t}_ot"), c.lhs_ot));
                    scalars.push((format!("{name}_t{t}_rhs"), c.rhs));
                }
                checks.push(CheckStatus { name, pass: r.pass });
                reports.push(r);
            }
        }
        out.json("reports.json", &reports)?;
        let p = out.path("reports.csv");
        BoundReport::write_csv(&reports, std::fs::File::create(p)?)?;
    }
    for c in &parsed {
        match c {
            Check::Bound(_) => {}
            Check::Gronwall => {
                let lipschitz = match cfg.lipschitz {
                    Some(l) => l,
                    None => scenario
                        .first
                        .sampled_lipschitz(&scenario.grid, 4000, cfg.seed)
                        .max(scenario.second.sampled_lipschitz(&scenario.grid, 4000, cfg.seed)),
                };
                let p = cfg.exponents.p.unwrap_or(2.0);
                let r = gronwall_check(
                    &scenario.first,
                    &scenario.second,
                    &scenario.init_first,
                    p,
                    lipschitz,
                    &scenario.checkpoints,
                    200,
                )?;
                for (k, &t) in r.times.iter().enumerate() {
                    scalars.push((format!("gronwall_t{t}_lhs"), r.lhs[k]));
                    scalars.push((format!("gronwall_t{t}_rhs"), r.rhs[k]));
                }
                checks.push(CheckStatus {
                    name: "gronwall".into(),
                    pass: r.pass,
                });
                out.json("gronwall.json", &r)?;
            }
            Check::ZeroDiffusivity => {
                let p = cfg.exponents.p.unwrap_or(2.0);
                let r = zero_diffusivity_sweep(
                    &scenario.first,
                    &scenario.init_first,
                    &cfg.kappas,
                    &scenario.checkpoints,
                    cfg.particles,
                    cfg.dt,
                    cfg.seed,
                    p,
                    constants.theorem.sobolev,
                )?;
                for (k, &kappa) in cfg.kappas.iter().enumerate() {
                    for row in r.rows.iter().filter(|row| row.kappa == kappa) {
                        let t = row.t;
                        scalars.push((format!("zero-diffusivity[{k}]_t{t}_coupled"), row.coupled));
                        scalars.push((format!("zero-diffusivity[{k}]_t{t}_fixed"), row.fixed_scale));
                    }
                }
                checks.push(CheckStatus {
                    name: "zero-diffusivity".into(),
                    pass: r.pass,
                });
                out.json("zero_diffusivity.json", &r)?;
                let p = out.path("zero_diffusivity.csv");
                let mut w = csv::Writer::from_path(p)?;
                w.write_record([
                    "kappa",
                    "t",
                    "coupled",
                    "se",
                    "upper",
                    "fixed_scale",
                    "grid_ot",
                    "lq_norm",
                    "lq_bound",
                    "rhs",
                ])?;
                for row in &r.rows {
                    w.write_record([
                        fmt(row.kappa),
                        fmt(row.t),
                        fmt(row.coupled),
                        fmt(row.se),
                        fmt(row.upper),
                        fmt(row.fixed_scale),
                        row.grid_ot.map(fmt).unwrap_or_default(),
                        fmt(row.lq_norm),
                        fmt(row.lq_bound),
                        fmt(r.rhs),
                    ])?;
                }
                w.flush()?;
            }
            Check::Superposition => {
                let r = superposition_check(
                    &scenario.first,
                    &scenario.init_first,
                    cfg.kappa,
                    cfg.particles,
                    cfg.dt,
                    cfg.seed,
                    if cfg.dimension == 1 { 40 } else { 20 },
                    0.05,
                )?;
                scalars.push(("superposition_l1".into(), r.l1));
                checks.push(CheckStatus {
                    name: "superposition".into(),
                    pass: r.pass,
                });
                out.json("superposition.json", &r)?;
            }
            Check::LinearExact => {
                let r = linear_exact_check(cfg, base)?;
                for (t, e) in r.times.iter().zip(&r.l1) {
                    scalars.push((format!("linear-exact_t{t}_l1"), *e));
                }
                // reported only; the error is a discretisation measurement
                checks.push(CheckStatus {
                    name: "linear-exact".into(),
                    pass: true,
                });
                out.json("linear_exact.json", &r)?;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    Kappa,
    Delta,
    EpsilonMollifier,
    GridResolution,
    ParticleCount,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "kappa" => Self::Kappa,
            "delta" => Self::Delta,
            "epsilon-mollifier" => Self::EpsilonMollifier,
            "grid-resolution" => Self::GridResolution,
            "particle-count" => Self::ParticleCount,
            other => {
                return Err(Error::Config(format!(
                    "unknown sweep parameter `{other}` (expected kappa, delta, epsilon-mollifier, grid-resolution or particle-count)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Kappa => "kappa",
            Self::Delta => "delta",
            Self::EpsilonMollifier => "epsilon-mollifier",
            Self::GridResolution => "grid-resolution",
            Self::ParticleCount => "particle-count",
        }
    }

    pub fn apply(&self, cfg: &ScenarioConfig, value: f64) -> Result<ScenarioConfig> {
        let mut c = cfg.clone();
        let count = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!(
                    "{} needs positive integers, got {v}",
                    self.name()
                )))
            }
        };
        match self {
            Self::Kappa => {
                c.kappa = value;
                c.kappas = vec![value];
            }
            Self::Delta => c.deltas = vec![value],
            Self::EpsilonMollifier => c.mollify = Some(value),
            Self::GridResolution => c.cells = count(value)?,
            Self::ParticleCount => c.particles = count(value)?,
        }
        c.validate("")?;
        Ok(c)
    }
}

/// Slope, intercept and r^2 of `log |y|` against `log x`; NaN where undefined.
fn fit_column(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    if xs.len() < 2 || xs.iter().chain(ys).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let f = loglog_fit(xs, ys);
    (f.slope, f.intercept, f.r_squared)
}

/// One run per value; `sweep.csv` has a row per value and the log-log fits
/// of every column appended as `fit-slope`, `fit-intercept`, `fit-r2` rows.
pub fn sweep(config_path: &Path, param: SweepParam, values: &[f64], output_root: &Path) -> Result<RunOutcome> {
    let cfg = ScenarioConfig::load(config_path)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let name = cfg.output.clone().unwrap_or_else(|| cfg.name.clone());
    let dir = output_root.join(format!("{name}-sweep-{}", param.name()));
    sweep_config(&cfg, base, param, values, &dir, &Constants::frozen())
}

pub fn sweep_config(
    cfg: &ScenarioConfig,
    base: &Path,
    param: SweepParam,
    values: &[f64],
    dir: &Path,
    constants: &Constants,
) -> Result<RunOutcome> {
    if values.is_empty() {
        return Err(Error::Config("a sweep needs at least one value".into()));
    }
    let mut out = Outputs::open(dir)?;
    let meta = serde_json::json!({
        "command": "sweep",
        "scenario": cfg.name,
        "seed": cfg.seed,
        "parameter": param.name(),
        "values": values,
        "config_sha256": sha256_hex(cfg.to_json().as_bytes()),
    });
    let mut runs = Vec::new();
    for (k, &v) in values.iter().enumerate() {
        let sub = format!("run{k}");
        let result = param
            .apply(cfg, v)
            .and_then(|c| run_config(&c, base, &dir.join(&sub), constants));
        match result {
            Ok(r) => {
                out.files.push(format!("{sub}/manifest.json"));
                runs.push(r);
            }
            Err(e) => {
                out.finish(meta, FAILED_MARKER, Some(format!("value {v}: {e}")))?;
                return Err(e);
            }
        }
    }
    let mut columns: Vec<String> = Vec::new();
    for r in &runs {
        for (n, _) in &r.scalars {
            if !columns.contains(n) {
                columns.push(n.clone());
            }
        }
    }
    let lookup = |r: &RunOutcome, c: &str| {
        r.scalars
            .iter()
            .find(|(n, _)| n == c)
            .map(|(_, v)| *v)
            .unwrap_or(f64::NAN)
    };
    let p = out.path("sweep.csv");
    let mut w = csv::Writer::from_path(p)?;
    let mut header = vec![param.name().to_string(), "pass".to_string()];
    header.extend(columns.iter().cloned());
    w.write_record(&header)?;
    for (r, &v) in runs.iter().zip(values) {
        let mut row = vec![fmt(v), r.pass.to_string()];
        row.extend(columns.iter().map(|c| fmt(lookup(r, c))));
        w.write_record(&row)?;
    }
    let fits: Vec<(f64, f64, f64)> = columns
        .iter()
        .map(|c| {
            let ys: Vec<f64> = runs.iter().map(|r| lookup(r, c)).collect();
            fit_column(values, &ys)
        })
        .collect();
    for (label, pick) in [("fit-slope", 0), ("fit-intercept", 1), ("fit-r2", 2)] {
        let mut row = vec![label.to_string(), String::new()];
        row.extend(fits.iter().map(|f| fmt([f.0, f.1, f.2][pick])));
        w.write_record(&row)?;
    }
    w.flush()?;
    let pass = runs.iter().all(|r| r.pass);
    let checks: Vec<CheckStatus> = runs
        .iter()
        .zip(values)
        .flat_map(|(r, v)| {
            r.checks.iter().map(move |c| CheckStatus {
                name: format!("{}={v}:{}", param.name(), c.name),
                pass: c.pass,
            })
        })
        .collect();
    let mut meta = meta;
    meta["checks"] = serde_json::json!(checks);
    out.finish(meta, if pass { "passed" } else { "checks-failed" }, None)?;
    let scalars = columns
        .iter()
        .zip(&fits)
        .map(|(c, f)| (format!("{c}_slope"), f.0))
        .collect();
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        pass,
        checks,
        scalars,
    })
}

/// Zvonkin pipeline on the first drift of a config: solve, select lambda,
/// transform, and check the residual, gradient, roundtrip and Lipschitz
/// bounds.
pub fn zvonkin_run(config_path: &Path, output_root: &Path) -> Result<RunOutcome> {
    let cfg = ScenarioConfig::load(config_path)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let dir = output_root.join(format!(
        "{}-zvonkin",
        cfg.output.clone().unwrap_or_else(|| cfg.name.clone())
    ));
    zvonkin_config(&cfg, base, &dir)
}

pub fn zvonkin_config(cfg: &ScenarioConfig, base: &Path, dir: &Path) -> Result<RunOutcome> {
    let mut out = Outputs::open(dir)?;
    let meta = serde_json::json!({
        "command": "zvonkin",
        "scenario": cfg.name,
        "seed": cfg.seed,
        "config_sha256": sha256_hex(cfg.to_json().as_bytes()),
    });
    let mut checks = Vec::new();
    let mut scalars = Vec::new();
    match zvonkin_execute(cfg, base, &mut out, &mut checks, &mut scalars) {
        Ok(()) => {
            let pass = checks.iter().all(|c: &CheckStatus| c.pass);
            let mut meta = meta;
            meta["checks"] = serde_json::json!(checks);
            out.finish(meta, if pass { "passed" } else { "checks-failed" }, None)?;
            Ok(RunOutcome {
                dir: dir.to_path_buf(),
                pass,
                checks,
                scalars,
            })
        }
        Err(e) => {
            out.finish(meta, FAILED_MARKER, Some(e.to_string()))?;
            Err(e)
        }
    }
}

fn zvonkin_execute(
    cfg: &ScenarioConfig,
    base: &Path,
    out: &mut Outputs,
    checks: &mut Vec<CheckStatus>,
    scalars: &mut Vec<(String, f64)>,
) -> Result<()> {
    let spec = cfg.zvonkin.clone().unwrap_or_default();
    let grid = cfg.grid()?;
    let field = build_field(&cfg.first, &grid, cfg.horizon, base)?;
    let (sol, tried) = match spec.lambda {
        Some(l) => (zvonkin::solve_backward(&field, l, &grid, spec.steps)?, vec![]),
        None => {
            let s = zvonkin::select_lambda(&field, &grid, spec.target)?;
            (s.solution, s.tried)
        }
    };
    let mut status = |name: &str, pass: bool| {
        checks.push(CheckStatus {
            name: name.into(),
            pass,
        })
    };
    let threshold = 10.0 * grid.min_spacing();
    status("residual", sol.max_residual() <= threshold);
    status("gradient", sol.grad_sup <= spec.target);
    scalars.push(("lambda".into(), sol.lambda));
    scalars.push(("grad_sup".into(), sol.grad_sup));
    scalars.push(("max_residual".into(), sol.max_residual()));
    let p = out.path("phi.csv");
    sol.write_csv(std::fs::File::create(p)?)?;
    let mut summary = sol.summary_json();
    summary["tried"] = serde_json::json!(tried);
    if sol.grad_sup <= 0.5 {
        let tc = zvonkin::transform_coefficients(&sol)?;
        let psi: &Diffeomorphism = &tc.psi;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = grid.dim();
        let mut roundtrip: f64 = 0.0;
        for _ in 0..spec.pairs {
            use rand::Rng;
            let t = rng.random_range(0.0..=cfg.horizon);
            let x: Vec<f64> = (0..d)
                .map(|a| rng.random_range(grid.lower()[a]..grid.upper()[a]))
                .collect();
            let back = psi.invert(t, &psi.forward(t, &x))?;
            roundtrip = roundtrip.max(crate::coefficients::distance(&back, &x));
        }
        let lip = zvonkin::inverse_lipschitz_ratio(psi, spec.pairs, cfg.seed ^ 1)?;
        let (lo, hi) = zvonkin::ellipticity_range(&tc, spec.pairs, cfg.seed ^ 2);
        status("roundtrip", roundtrip <= 1e-8);
        status("inverse-lipschitz", lip <= 2.0);
        scalars.push(("roundtrip".into(), roundtrip));
        scalars.push(("inverse_lipschitz".into(), lip));
        summary["roundtrip_error"] = roundtrip.into();
        summary["inverse_lipschitz_ratio"] = lip.into();
        summary["lipschitz_sigma"] = tc.lipschitz_sigma.into();
        summary["lipschitz_drift"] = tc.lipschitz_drift.into();
        summary["ellipticity"] = serde_json::json!([lo, hi]);
    }
    out.json("zvonkin.json", &summary)?;
    Ok(())
}

/// Exact (or, above the size cap, entropic) transport between two clouds.
pub fn ot_files(a: &Path, b: &Path, cost: &str, delta: f64, output_root: &Path) -> Result<serde_json::Value> {
    let spec = match cost {
        "log-squared" => CostSpec::log_squared(delta)?,
        "log-linear" => CostSpec::log_linear(delta)?,
        "power" => CostSpec::power(delta)?,
        other => {
            return Err(Error::Config(format!(
                "unknown cost `{other}` (expected log-squared, log-linear or power)"
            )))
        }
    };
    let mu = ParticleCloud::load_csv(a)?;
    let nu = ParticleCloud::load_csv(b)?;
    let plan = transport::solve_auto(&mu, &nu, &spec)?;
    let dir = output_root.join("ot");
    let mut out = Outputs::open(&dir)?;
    let p = out.path("plan.csv");
    plan.write_csv(std::fs::File::create(p)?)?;
    let summary = serde_json::json!({
        "cost": cost,
        "parameter": delta,
        "value": plan.cost,
        "marginal_error": plan.marginal_error(),
        "plan": plan.header_json(),
    });
    out.json("ot.json", &summary)?;
    let meta = serde_json::json!({
        "command": "ot",
        "inputs": [a.display().to_string(), b.display().to_string()],
        "input_sha256": [sha256_hex(&std::fs::read(a)?), sha256_hex(&std::fs::read(b)?)],
    });
    out.finish(meta, "passed", None)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(checks: &str, exponents: &str) -> String {
        format!(
            r#"{{
  "schema": 1,
  "name": "minimal",
  "dimension": 1,
  "domain": {{"lower": [-4.0], "upper": [4.0]}},
  "cells": 160,
  "horizon": 1.0,
  "first": {{"builtin": "linear", "rate": 1.0, "sigma": 0.3}},
  "initial": {{"gaussian": {{"mean": [0.0], "variance": 0.5}}}},
  "checks": [{checks}],
  "exponents": {exponents},
  "particles": 2000
}}"#
        )
    }

    #[test]
    fn identical_halves_exit_zero() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ScenarioConfig::parse(&minimal("\"sobolev\"", r#"{"p": 2.0}"#)).unwrap();
        let r = run_config(&cfg, Path::new("."), dir.path(), &Constants::frozen()).unwrap();
        assert_eq!(r.exit_code(), 0);
        let reports: Vec<BoundReport> =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("reports.json")).unwrap()).unwrap();
        assert!(reports[0].checkpoints.iter().all(|c| c.lhs_coupled == 0.0));
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        for f in manifest["files"].as_array().unwrap() {
            assert!(dir.path().join(f.as_str().unwrap()).is_file(), "{f}");
        }
        let listed: Vec<&str> = manifest["files"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap())
            .collect();
        for entry in std::fs::read_dir(dir.path()).unwrap() {
            let name = entry.unwrap().file_name().into_string().unwrap();
            assert!(
                name == "manifest.json" || listed.contains(&name.as_str()),
                "orphan {name}"
            );
        }
    }

    #[test]
    fn exponent_violation_names_constraint() {
        let raw = minimal("\"sobolev\"", r#"{"p": 1.0}"#);
        let e = ScenarioConfig::parse(&raw).unwrap_err().to_string();
        assert!(e.contains("p > 1"), "{e}");
        let line = raw.lines().position(|l| l.contains("\"exponents\"")).unwrap() + 1;
        assert!(e.contains(&format!("line {line}")), "{e}");
    }

    #[test]
    fn parse_errors_carry_lines() {
        let raw = minimal("\"sobolev\"", r#"{"p": 2.0}"#).replace("\"cells\": 160", "\"cells\": \"many\"");
        let e = ScenarioConfig::parse(&raw).unwrap_err().to_string();
        assert!(e.contains("line 6"), "{e}");
        let e = ScenarioConfig::parse(&minimal("\"no-such-bound\"", "{}"))
            .unwrap_err()
            .to_string();
        assert!(e.contains("no-such-bound"), "{e}");
    }

    #[test]
    fn lps_and_alpha_validation() {
        let raw = minimal("\"lps\"", r#"{"p": 2.0, "q": 6.0}"#);
        assert!(ScenarioConfig::parse(&raw).unwrap_err().to_string().contains("p > 2"));
        let raw = minimal("\"w2\"", r#"{"p": 6.0, "q": 6.0}"#)
            .replace("\"particles\"", "\"alphas\": [7.0],\n  \"particles\"");
        assert!(ScenarioConfig::parse(&raw)
            .unwrap_err()
            .to_string()
            .contains("alpha = 7"));
    }

    #[test]
    fn builtins_parse() {
        for (name, _) in BUILTIN_SCENARIOS {
            let cfg = builtin_scenario(name).unwrap();
            assert_eq!(cfg.name, name);
            cfg.scenario(Path::new(".")).unwrap();
        }
    }

    #[test]
    fn failed_run_leaves_marker() {
        let dir = tempfile::tempdir().unwrap();
        let raw = minimal("\"sobolev\"", r#"{"p": 2.0}"#).replace(
            "\"particles\": 2000",
            "\"particles\": 2000,\n  \"initial_second\": {\"csv\": \"missing\"}",
        );
        let cfg = ScenarioConfig::parse(&raw).unwrap();
        assert!(run_config(&cfg, dir.path(), dir.path(), &Constants::frozen()).is_err());
        assert!(dir.path().join(FAILED_MARKER).is_file());
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["status"], FAILED_MARKER);
    }

    #[test]
    fn linear_gaussian_matches_moments() {
        let (m, v) = linear_gaussian(1.0, 0.5, 0.3, 1.0, &[1.0], 0.5, 1.0);
        let e = (-1.0f64).exp();
        assert!((m[0] - (e + 0.5 * (1.0 - e))).abs() < 1e-15);
        assert!((v - (0.5 * e * e + 0.09 * (1.0 - e * e) / 2.0)).abs() < 1e-15);
        let (m, v) = linear_gaussian(0.0, 1.0, 0.5, 1.0, &[0.0], 0.2, 2.0);
        assert_eq!(m[0], 2.0);
        assert!((v - 0.7).abs() < 1e-15);
    }
}
