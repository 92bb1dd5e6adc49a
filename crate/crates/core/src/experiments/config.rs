use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coefficients::{mollify_vector, CoefficientField, Exponents, OsgoodModulus, VectorGrid};
use crate::error::{Error, Result};
use crate::measures::{BoxGrid, GridDensity};
use crate::stability::{check_lps, Scenario, TheoremTag};

pub const SCHEMA: u32 = 1;

fn one() -> f64 {
    1.0
}

fn default_particles() -> usize {
    20_000
}

fn default_dt() -> f64 {
    1e-3
}

fn default_seed() -> u64 {
    1
}

fn default_atoms() -> usize {
    200
}

fn default_resamples() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Built-in coefficient pairs `(b, sigma)`. `shift` is added to the first drift
/// component; diffusion is diagonal unless stated otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builtin", rename_all = "kebab-case")]
pub enum CoefficientSpec {
    /// `b = -rate x + shift`, `sigma = sigma Id`.
    Linear {
        #[serde(default = "one")]
        rate: f64,
        #[serde(default)]
        shift: f64,
        #[serde(default)]
        sigma: f64,
    },
    /// `b = -rate x + jump S(x1 / width)` with `S` a tanh step; `width`
    /// defaults to the grid spacing.
    SmoothedStep {
        #[serde(default = "one")]
        rate: f64,
        jump: f64,
        width: Option<f64>,
        #[serde(default)]
        sigma: f64,
    },
    /// 2D: `b = (-rate x - omega y + shift, omega x - rate y)`.
    Rotation {
        omega: f64,
        #[serde(default = "one")]
        rate: f64,
        #[serde(default)]
        shift: f64,
        #[serde(default)]
        sigma: f64,
    },
    /// `b = -rate x - strength sign(x) |x|^{1/2} + shift`: gradient in `W^{1,1}`
    /// but not `W^{1,2}` near the origin.
    Cusp {
        #[serde(default = "one")]
        rate: f64,
        strength: f64,
        #[serde(default)]
        shift: f64,
        #[serde(default)]
        sigma: f64,
    },
    /// `b = -rate x + shift`, `sigma = (sigma + amplitude sin x1) Id`.
    SineDiffusion {
        #[serde(default = "one")]
        rate: f64,
        #[serde(default)]
        shift: f64,
        sigma: f64,
        amplitude: f64,
    },
    /// `b = -rate x + strength x log|x|` on `|x| <= 1`, `-rate x` outside.
    LogLipschitz {
        #[serde(default = "one")]
        rate: f64,
        strength: f64,
        #[serde(default)]
        shift: f64,
        #[serde(default)]
        sigma: f64,
    },
    /// `b = -rate x - strength sign(x) (|x| + eps)^{-exponent} + shift`.
    Singular {
        #[serde(default = "one")]
        rate: f64,
        strength: f64,
        exponent: f64,
        eps: f64,
        #[serde(default)]
        shift: f64,
        #[serde(default = "one")]
        sigma: f64,
    },
    /// `b = -rate x + amplitude sin(frequency x)` componentwise.
    SineDrift {
        #[serde(default)]
        rate: f64,
        amplitude: f64,
        #[serde(default = "one")]
        frequency: f64,
        #[serde(default)]
        sigma: f64,
    },
    /// Grid samples; paths are relative to the config file.
    Csv {
        drift: PathBuf,
        diffusion: PathBuf,
        noise_dim: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialSpec {
    Gaussian {
        mean: Vec<f64>,
        variance: f64,
    },
    /// Stem of a saved density (`.csv` + `.json`).
    Csv(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModulusKind {
    Identity,
    LogLipschitz,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OsgoodSpec {
    pub modulus: ModulusKind,
    /// Constant weight `g`.
    pub g: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZvonkinSpec {
    #[serde(default = "half")]
    pub target: f64,
    pub lambda: Option<f64>,
    pub steps: Option<usize>,
    #[serde(default = "thousand")]
    pub pairs: usize,
}

fn half() -> f64 {
    0.5
}

fn thousand() -> usize {
    1000
}

impl Default for ZvonkinSpec {
    fn default() -> Self {
        Self {
            target: 0.5,
            lambda: None,
            steps: None,
            pairs: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema: u32,
    pub name: String,
    pub dimension: usize,
    pub domain: Domain,
    /// Cells per axis.
    pub cells: usize,
    pub horizon: f64,
    pub first: CoefficientSpec,
    /// Defaults to `first`.
    pub second: Option<CoefficientSpec>,
    pub initial: InitialSpec,
    /// Defaults to `initial`.
    pub initial_second: Option<InitialSpec>,
    #[serde(default)]
    pub checks: Vec<String>,
    /// Empty means the dynamical choice `|b1 - b2| + |sigma1 - sigma2|`.
    #[serde(default)]
    pub deltas: Vec<f64>,
    #[serde(default)]
    pub alphas: Vec<f64>,
    /// Diffusivities for the zero-diffusivity sweep.
    #[serde(default)]
    pub kappas: Vec<f64>,
    /// Diffusivity of the bound checks.
    #[serde(default = "one")]
    pub kappa: f64,
    #[serde(default)]
    pub exponents: Exponents,
    pub osgood: Option<OsgoodSpec>,
    /// Lipschitz constant for the Gronwall check; sampled when absent.
    pub lipschitz: Option<f64>,
    pub checkpoints: Option<Vec<f64>>,
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Replace the second pair by the first mollified at this scale.
    pub mollify: Option<f64>,
    #[serde(default = "default_atoms")]
    pub ot_atoms: usize,
    #[serde(default = "default_resamples")]
    pub ot_resamples: usize,
    pub zvonkin: Option<ZvonkinSpec>,
    /// Output subdirectory; defaults to `name`.
    pub output: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Check {
    Bound(TheoremTag),
    Gronwall,
    ZeroDiffusivity,
    Superposition,
    /// Grid solution against the closed-form Gaussian of a linear pair.
    LinearExact,
}

impl Check {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "gronwall" => Self::Gronwall,
            "zero-diffusivity" => Self::ZeroDiffusivity,
            "superposition" => Self::Superposition,
            "linear-exact" => Self::LinearExact,
            other => Self::Bound(TheoremTag::parse(other)?),
        })
    }
}

/// `line N: msg` for the first line mentioning `"key"`.
fn at_key(raw: &str, key: &str, msg: String) -> Error {
    let needle = format!("\"{key}\"");
    match raw.lines().position(|l| l.contains(&needle)) {
        Some(i) => Error::Config(format!("line {}: {msg}", i + 1)),
        None => Error::Config(msg),
    }
}

impl ScenarioConfig {
    pub fn parse(raw: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(raw)
            .map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        cfg.validate(raw)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&raw)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn parsed_checks(&self) -> Result<Vec<Check>> {
        self.checks.iter().map(|c| Check::parse(c)).collect()
    }

    /// Validation against the raw text, for line numbers. Pass `""` when there
    /// is no source text.
    pub fn validate(&self, raw: &str) -> Result<()> {
        let err = |key: &str, msg: String| at_key(raw, key, msg);
        if self.schema != SCHEMA {
            return Err(err(
                "schema",
                format!("schema {} is not supported (expected {SCHEMA})", self.schema),
            ));
        }
        let d = self.dimension;
        if !(1..=2).contains(&d) {
            return Err(err("dimension", format!("dimension {d} must be 1 or 2")));
        }
        if self.domain.lower.len() != d || self.domain.upper.len() != d {
            return Err(err("domain", format!("domain bounds must have {d} entries")));
        }
        if self.domain.lower.iter().zip(&self.domain.upper).any(|(a, b)| !(a < b)) {
            return Err(err("domain", "domain needs lower < upper on every axis".into()));
        }
        if self.cells < 4 {
            return Err(err("cells", format!("cells = {} must be at least 4", self.cells)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(err("horizon", format!("horizon = {} must be positive", self.horizon)));
        }
        if let Some(cp) = &self.checkpoints {
            if cp.is_empty() || cp.iter().any(|&t| !(t > 0.0 && t <= self.horizon)) {
                return Err(err("checkpoints", "checkpoints must lie in (0, horizon]".into()));
            }
        }
        if !(self.kappa >= 0.0) {
            return Err(err("kappa", format!("kappa = {} must be nonnegative", self.kappa)));
        }
        if !(self.dt > 0.0) || self.particles == 0 {
            return Err(err("dt", "dt must be positive and particles nonzero".into()));
        }
        for spec in std::iter::once(&self.first).chain(self.second.as_ref()) {
            if matches!(spec, CoefficientSpec::Rotation { .. }) && d != 2 {
                return Err(err("rotation", "the rotation built-in needs dimension 2".into()));
            }
        }
        if let Some(e) = self.mollify {
            if !(e > 0.0) {
                return Err(err("mollify", format!("mollify = {e} must be positive")));
            }
        }
        if self.deltas.iter().any(|&x| !(x > 0.0)) {
            return Err(err("deltas", "every delta must be positive".into()));
        }
        let checks = self
            .checks
            .iter()
            .map(|c| Check::parse(c))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| err("checks", e.to_string()))?;
        let ex = &self.exponents;
        for c in checks {
            match c {
                Check::Bound(TheoremTag::Sobolev) => match ex.p {
                    Some(p) if p > 1.0 => {}
                    Some(p) => {
                        return Err(err(
                            "p",
                            format!("exponent p = {p} violates p > 1 required by the sobolev bound"),
                        ))
                    }
                    None => return Err(err("exponents", "the sobolev bound needs exponent p > 1".into())),
                },
                Check::Bound(TheoremTag::Mixed) => {
                    for (name, v) in [("p1", ex.p1), ("p2", ex.p2)] {
                        match v {
                            Some(p) if p > 1.0 => {}
                            _ => return Err(err(name, format!("the mixed bound needs {name} > 1"))),
                        }
                    }
                }
                Check::Bound(TheoremTag::Lps) | Check::Bound(TheoremTag::W2) => {
                    let (Some(p), Some(q)) = (ex.p, ex.q) else {
                        return Err(err("exponents", "LPS bounds need exponents p and q".into()));
                    };
                    check_lps(d, p, q).map_err(|e| err("exponents", e.to_string()))?;
                    if c == Check::Bound(TheoremTag::W2) {
                        if self.alphas.is_empty() {
                            return Err(err("alphas", "the W2 bound needs at least one alpha".into()));
                        }
                        let upper = p.min(q);
                        if let Some(a) = self.alphas.iter().find(|&&a| !(a > 2.0 && a < upper)) {
                            return Err(err("alphas", format!("alpha = {a} must lie in (2, {upper})")));
                        }
                    }
                }
                Check::Bound(TheoremTag::Osgood) => {
                    if self.osgood.is_none() {
                        return Err(err("checks", "the osgood bound needs an `osgood` modulus block".into()));
                    }
                }
                Check::Bound(TheoremTag::W11) | Check::Superposition => {}
                Check::Gronwall => {
                    if d != 1 {
                        return Err(err("checks", "the gronwall check runs in dimension 1".into()));
                    }
                }
                Check::ZeroDiffusivity => {
                    if self.kappas.is_empty() || self.kappas.iter().any(|&k| !(k > 0.0)) {
                        return Err(err("kappas", "the zero-diffusivity sweep needs positive kappas".into()));
                    }
                }
                Check::LinearExact => {
                    let linear = matches!(self.first, CoefficientSpec::Linear { .. });
                    if !linear || !matches!(self.initial, InitialSpec::Gaussian { .. }) {
                        return Err(err(
                            "checks",
                            "linear-exact needs a linear first pair and a Gaussian initial law".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<BoxGrid> {
        BoxGrid::new(
            self.domain.lower.clone(),
            self.domain.upper.clone(),
            vec![self.cells; self.dimension],
        )
    }

    pub fn checkpoints(&self) -> Vec<f64> {
        self.checkpoints
            .clone()
            .unwrap_or_else(|| vec![0.25 * self.horizon, 0.5 * self.horizon, self.horizon])
    }

    pub fn osgood_modulus(&self) -> Option<Arc<OsgoodModulus>> {
        self.osgood.as_ref().map(|o| {
            let g = OsgoodModulus::constant_weight(o.g);
            Arc::new(match o.modulus {
                ModulusKind::Identity => OsgoodModulus::identity(g),
                ModulusKind::LogLipschitz => OsgoodModulus::log_lipschitz(g),
            })
        })
    }

    /// Builds the scenario; `base` resolves relative CSV paths.
    pub fn scenario(&self, base: &Path) -> Result<Scenario> {
        let grid = self.grid()?;
        let first = build_field(&self.first, &grid, self.horizon, base)?;
        let second = match self.mollify {
            Some(eps) => mollified(&first, &grid, eps)?,
            None => match &self.second {
                Some(spec) => build_field(spec, &grid, self.horizon, base)?,
                None => first.clone(),
            },
        };
        let init = build_initial(&self.initial, &grid, base)?;
        let init_second = match &self.initial_second {
            Some(spec) => build_initial(spec, &grid, base)?,
            None => init.clone(),
        };
        let mut s = Scenario::new(self.name.clone(), grid, first, second, init);
        s.init_second = init_second;
        s.kappa = self.kappa;
        s.checkpoints = self.checkpoints();
        s.particles = self.particles;
        s.dt = self.dt;
        s.seed = self.seed;
        s.exponents = self.exponents;
        s.osgood = self.osgood_modulus();
        s.ot_atoms = self.ot_atoms;
        s.ot_resamples = self.ot_resamples;
        Ok(s)
    }
}

fn diagonal_sigma(d: usize, out: &mut [f64], s: f64) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for k in 0..d {
        out[k * d + k] = s;
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

type PointMap = Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

pub fn build_field(spec: &CoefficientSpec, grid: &BoxGrid, horizon: f64, base: &Path) -> Result<CoefficientField> {
    let d = grid.dim();
    let constant = |name: String, sigma: f64, drift: PointMap| {
        CoefficientField::with_constant_sigma(name, d, horizon, sigma, move |_, x, out| drift(x, out))
    };
    Ok(match *spec {
        CoefficientSpec::Linear { rate, shift, sigma } => constant(
            format!("linear(rate={rate},shift={shift},sigma={sigma})"),
            sigma,
            Box::new(move |x, out| {
                for k in 0..x.len() {
                    out[k] = -rate * x[k];
                }
                out[0] += shift;
            }),
        ),
        CoefficientSpec::SmoothedStep {
            rate,
            jump,
            width,
            sigma,
        } => {
            let w = width.unwrap_or(grid.min_spacing());
            if !(w > 0.0) {
                return Err(Error::Config(format!("step width {w} must be positive")));
            }
            constant(
                format!("smoothed-step(rate={rate},jump={jump},width={w},sigma={sigma})"),
                sigma,
                Box::new(move |x, out| {
                    for k in 0..x.len() {
                        out[k] = -rate * x[k];
                    }
                    out[0] += jump * 0.5 * (1.0 + (x[0] / w).tanh());
                }),
            )
        }
        CoefficientSpec::Rotation {
            omega,
            rate,
            shift,
            sigma,
        } => constant(
            format!("rotation(omega={omega},rate={rate},shift={shift},sigma={sigma})"),
            sigma,
            Box::new(move |x, out| {
                out[0] = -rate * x[0] - omega * x[1] + shift;
                out[1] = omega * x[0] - rate * x[1];
            }),
        ),
        CoefficientSpec::Cusp {
            rate,
            strength,
            shift,
            sigma,
        } => constant(
            format!("cusp(rate={rate},strength={strength},shift={shift},sigma={sigma})"),
            sigma,
            Box::new(move |x, out| {
                for k in 0..x.len() {
                    out[k] = -rate * x[k] - strength * sign(x[k]) * x[k].abs().sqrt();
                }
                out[0] += shift;
            }),
        ),
        CoefficientSpec::SineDiffusion {
            rate,
            shift,
            sigma,
            amplitude,
        } => {
            let drift = move |_t: f64, x: &[f64], out: &mut [f64]| {
                for k in 0..x.len() {
                    out[k] = -rate * x[k];
                }
                out[0] += shift;
            };
            let diffusion =
                move |_t: f64, x: &[f64], out: &mut [f64]| diagonal_sigma(d, out, sigma + amplitude * x[0].sin());
            CoefficientField::new(
                format!("sine-diffusion(rate={rate},shift={shift},sigma={sigma},amplitude={amplitude})"),
                d,
                d,
                horizon,
                Arc::new(drift),
                Arc::new(diffusion),
            )
        }
        CoefficientSpec::LogLipschitz {
            rate,
            strength,
            shift,
            sigma,
        } => constant(
            format!("log-lipschitz(rate={rate},strength={strength},shift={shift},sigma={sigma})"),
            sigma,
            Box::new(move |x, out| {
                for k in 0..x.len() {
                    let a = x[k].abs();
                    out[k] = -rate * x[k]
                        + if a > 0.0 && a <= 1.0 {
                            strength * x[k] * a.ln()
                        } else {
                            0.0
                        };
                }
                out[0] += shift;
            }),
        ),
        CoefficientSpec::Singular {
            rate,
            strength,
            exponent,
            eps,
            shift,
            sigma,
        } => {
            if !(eps > 0.0) {
                return Err(Error::Config(format!("singular drift needs eps > 0, got {eps}")));
            }
            constant(
                format!("singular(rate={rate},strength={strength},exponent={exponent},eps={eps},shift={shift},sigma={sigma})"),
                sigma,
                Box::new(move |x, out| {
                    for k in 0..x.len() {
                        out[k] = -rate * x[k] - strength * sign(x[k]) * (x[k].abs() + eps).powf(-exponent);
                    }
                    out[0] += shift;
                }),
            )
        }
        CoefficientSpec::SineDrift {
            rate,
            amplitude,
            frequency,
            sigma,
        } => constant(
            format!("sine-drift(rate={rate},amplitude={amplitude},frequency={frequency},sigma={sigma})"),
            sigma,
            Box::new(move |x, out| {
                for k in 0..x.len() {
                    out[k] = -rate * x[k] + amplitude * (frequency * x[k]).sin();
                }
            }),
        ),
        CoefficientSpec::Csv {
            ref drift,
            ref diffusion,
            noise_dim,
        } => {
            let open = |p: &PathBuf| {
                let path = base.join(p);
                std::fs::File::open(&path).map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))
            };
            let b = VectorGrid::read_csv(grid, d, open(drift)?)?;
            let s = VectorGrid::read_csv(grid, d * noise_dim, open(diffusion)?)?;
            CoefficientField::from_grids(format!("csv({})", drift.display()), b, s, horizon)?
        }
    })
}

/// First pair mollified at scale `eps`, frozen at `t = 0`.
fn mollified(field: &CoefficientField, grid: &BoxGrid, eps: f64) -> Result<CoefficientField> {
    let d = grid.dim();
    let m = field.noise_dim();
    let b = VectorGrid::from_fn(grid, d, |x, out| field.eval_drift(0.0, x, out));
    let s = VectorGrid::from_fn(grid, d * m, |x, out| field.eval_diffusion(0.0, x, out));
    let mut out = CoefficientField::from_grids(
        format!("{}*mollified({eps})", field.name),
        mollify_vector(&b, eps),
        mollify_vector(&s, eps),
        field.horizon,
    )?;
    out.exponents = field.exponents;
    Ok(out)
}

pub fn build_initial(spec: &InitialSpec, grid: &BoxGrid, base: &Path) -> Result<GridDensity> {
    match spec {
        InitialSpec::Gaussian { mean, variance } => {
            if mean.len() != grid.dim() {
                return Err(Error::Config(format!("initial mean needs {} entries", grid.dim())));
            }
            GridDensity::gaussian(grid.clone(), mean, *variance)
        }
        InitialSpec::Csv(stem) => {
            let u = GridDensity::load(&base.join(stem))?;
            if &u.grid != grid {
                return Err(Error::Config(format!(
                    "density {} is on a different grid",
                    stem.display()
                )));
            }
            Ok(u)
        }
    }
}

/// Closed-form law at `t` of the linear pair started from a Gaussian:
/// mean and isotropic variance.
pub fn linear_gaussian(
    rate: f64,
    shift: f64,
    sigma: f64,
    kappa: f64,
    mean: &[f64],
    variance: f64,
    t: f64,
) -> (Vec<f64>, f64) {
    let (decay, spread) = if rate == 0.0 {
        (1.0, t)
    } else {
        ((-rate * t).exp(), (1.0 - (-2.0 * rate * t).exp()) / (2.0 * rate))
    };
    let drift_part = if rate == 0.0 { t } else { (1.0 - decay) / rate };
    let mut m: Vec<f64> = mean.iter().map(|v| v * decay).collect();
    m[0] += shift * drift_part;
    (m, variance * decay * decay + kappa * sigma * sigma * spread)
}
