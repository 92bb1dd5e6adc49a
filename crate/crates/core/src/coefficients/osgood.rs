//! Osgood moduli, the auxiliary cost `psi_delta` and the mixed
//! Osgood/Sobolev hypothesis check.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CoefficientField;
use crate::error::{Error, Result};
use crate::measures::BoxGrid;

pub type ModulusFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type WeightFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// A modulus `rho` with `rho(0) = 0`, nondecreasing, together with the
/// weight `g(t, x)` of the hypothesis.
#[derive(Clone)]
pub struct OsgoodModulus {
    pub name: String,
    rho: ModulusFn,
    g: WeightFn,
}

impl fmt::Debug for OsgoodModulus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "OsgoodModulus({})", self.name)
    }
}

impl OsgoodModulus {
    pub fn new(name: impl Into<String>, rho: ModulusFn, g: WeightFn) -> Result<Self> {
        let name = name.into();
        if rho(0.0) != 0.0 {
            return Err(Error::InvalidCoefficients(format!("{name}: rho(0) must be 0")));
        }
        let mut prev = 0.0;
        for k in 0..=400 {
            let s = 10f64.powf(-12.0 + 16.0 * k as f64 / 400.0);
            let v = rho(s);
            if !(v >= prev) {
                return Err(Error::InvalidCoefficients(format!(
                    "{name}: rho is not nondecreasing near s = {s:.3e}"
                )));
            }
            prev = v;
        }
        Ok(Self { name, rho, g })
    }

    /// `rho(s) = s`, the Lipschitz case.
    pub fn identity(g: WeightFn) -> Self {
        Self::new("identity", Arc::new(|s| s), g).expect("identity modulus is valid")
    }

    /// `rho(s) = s (1 + |log s|)`: Osgood but not Lipschitz at the origin.
    pub fn log_lipschitz(g: WeightFn) -> Self {
        Self::new(
            "log-lipschitz",
            Arc::new(|s: f64| if s > 0.0 { s * (1.0 + s.ln().abs()) } else { 0.0 }),
            g,
        )
        .expect("log-lipschitz modulus is valid")
    }

    /// Constant weight `g`.
    pub fn constant_weight(c: f64) -> WeightFn {
        Arc::new(move |_, _| c)
    }

    /// Registered modulus, raised to `max(rho(s), s)`.
    pub fn rho(&self, s: f64) -> f64 {
        (self.rho)(s).max(s)
    }

    pub fn g(&self, t: f64, x: &[f64]) -> f64 {
        (self.g)(t, x)
    }

    /// `psi_delta(s) = int_0^s dr / (rho(r) + delta^2)`, relative tolerance 1e-8.
    pub fn psi(&self, s: f64, delta: f64) -> f64 {
        self.psi_with_tol(s, delta, 1e-8)
    }

    pub fn psi_with_tol(&self, s: f64, delta: f64, rel_tol: f64) -> f64 {
        if !(s > 0.0) {
            return 0.0;
        }
        let d2 = delta * delta;
        let f = |r: f64| 1.0 / (self.rho(r) + d2);
        // upper bound s / delta^2 sets the absolute scale of the tolerance
        let whole = adaptive_simpson(&f, 0.0, s, rel_tol * s * f(s), 48);
        whole.max(0.0)
    }
}

/// `psi_delta(s)` for the given modulus.
pub fn osgood_psi(s: f64, modulus: &OsgoodModulus, delta: f64) -> f64 {
    modulus.psi(s, delta)
}

fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let diff = left + right - whole;
    if depth == 0 || diff.abs() <= 15.0 * tol {
        return left + right + diff / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Sampled check of
/// `|<x-y, b(x)-b(y)>| + |sigma(x)-sigma(y)|^2 <= (g(x)+g(y)) rho(|x-y|^2)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HypothesisCheck {
    pub pairs: usize,
    /// Largest `lhs / rhs` seen.
    pub max_ratio: f64,
    pub violations: usize,
}

impl HypothesisCheck {
    pub fn passes(&self) -> bool {
        self.violations == 0
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passes() {
            Ok(self)
        } else {
            Err(Error::HypothesisViolation { ratio: self.max_ratio })
        }
    }
}

/// Half of the pairs are uniform in the box, half are close pairs at
/// log-uniform distances in `[1e-6, 1e-1]` of the box width.
pub fn check_hypothesis_h(
    field: &CoefficientField,
    modulus: &OsgoodModulus,
    grid: &BoxGrid,
    pairs: usize,
    seed: u64,
) -> HypothesisCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = grid.dim();
    let width = (0..d)
        .map(|k| grid.upper()[k] - grid.lower()[k])
        .fold(f64::INFINITY, f64::min);
    let mut max_ratio: f64 = 0.0;
    let mut violations = 0;
    for k in 0..pairs {
        let t = rng.random_range(0.0..=field.horizon);
        let x: Vec<f64> = (0..d)
            .map(|a| rng.random_range(grid.lower()[a]..grid.upper()[a]))
            .collect();
        let y: Vec<f64> = if k % 2 == 0 {
            (0..d)
                .map(|a| rng.random_range(grid.lower()[a]..grid.upper()[a]))
                .collect()
        } else {
            let r = width * 10f64.powf(rng.random_range(-6.0..-1.0));
            let mut dir: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            dir.iter_mut().for_each(|v| *v *= r / n);
            x.iter().zip(&dir).map(|(a, b)| a + b).collect()
        };
        let dx: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        let r2: f64 = dx.iter().map(|v| v * v).sum();
        if r2 == 0.0 {
            continue;
        }
        let (bx, by) = (field.drift_at(t, &x), field.drift_at(t, &y));
        let inner: f64 = dx.iter().zip(bx.iter().zip(&by)).map(|(z, (p, q))| z * (p - q)).sum();
        let (sx, sy) = (field.diffusion_at(t, &x), field.diffusion_at(t, &y));
        let sdiff: f64 = sx.iter().zip(&sy).map(|(p, q)| (p - q) * (p - q)).sum();
        let lhs = inner.abs() + sdiff;
        let rhs = (modulus.g(t, &x) + modulus.g(t, &y)) * modulus.rho(r2);
        if lhs > 0.0 {
            max_ratio = max_ratio.max(if rhs > 0.0 { lhs / rhs } else { f64::INFINITY });
        }
        if lhs > rhs * (1.0 + 1e-9) {
            violations += 1;
        }
    }
    HypothesisCheck {
        pairs,
        max_ratio,
        violations,
    }
}
