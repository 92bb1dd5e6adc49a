//! Coefficient fields `(sigma, b)` and the analysis toolkit used on them:
//! mollifiers, maximal functions, space-time norms, the Jabin kernel integral,
//! Osgood moduli and de la Vallee-Poussin functions.

mod analysis;
mod dvp;
mod osgood;

use std::fmt;
use std::io::Read;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::BoxGrid;

pub use analysis::{
    jabin_kernel_integral, maximal_function, maximal_function_with, mollifier_profile, mollify, mollify_vector,
    pointwise_sobolev_check, random_test_field, MaximalOptions, SobolevCheck,
};
pub use dvp::{dvp_construct, phi_delta, DvpConstruction, DvpFunction, DvpKind};
pub use osgood::{check_hypothesis_h, osgood_psi, HypothesisCheck, OsgoodModulus};

/// `(t, x, out)` evaluator writing a vector or a row-major matrix into `out`.
pub type FieldFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Declared integrability exponents of a coefficient pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Exponents {
    /// Spatial exponent of `grad b` (and `2p` for `grad sigma`).
    pub p: Option<f64>,
    /// Mixed exponents: `p1` for the diffusion, `p2` for the drift.
    pub p1: Option<f64>,
    pub p2: Option<f64>,
    /// Time exponent, used by the LPS class.
    pub q: Option<f64>,
}

/// Time-dependent drift `b: [0,T] x R^d -> R^d` and diffusion factor
/// `sigma: [0,T] x R^d -> R^{d x m}`.
#[derive(Clone)]
pub struct CoefficientField {
    pub name: String,
    dim: usize,
    noise_dim: usize,
    drift: FieldFn,
    diffusion: FieldFn,
    pub exponents: Exponents,
    /// Declared Lipschitz constant of `b` and `sigma` in `x`.
    pub lipschitz: Option<f64>,
    pub horizon: f64,
}

impl fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientField")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("exponents", &self.exponents)
            .field("lipschitz", &self.lipschitz)
            .field("horizon", &self.horizon)
            .finish()
    }
}

impl CoefficientField {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        noise_dim: usize,
        horizon: f64,
        drift: FieldFn,
        diffusion: FieldFn,
    ) -> Self {
        Self {
            name: name.into(),
            dim,
            noise_dim,
            drift,
            diffusion,
            exponents: Exponents::default(),
            lipschitz: None,
            horizon,
        }
    }

    /// Drift from a closure and a constant diagonal diffusion `sigma * Id`.
    pub fn with_constant_sigma(
        name: impl Into<String>,
        dim: usize,
        horizon: f64,
        sigma: f64,
        drift: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        let diffusion = move |_t: f64, _x: &[f64], out: &mut [f64]| {
            out.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..dim {
                out[k * dim + k] = sigma;
            }
        };
        Self::new(name, dim, dim, horizon, Arc::new(drift), Arc::new(diffusion))
    }

    pub fn with_exponents(mut self, exponents: Exponents) -> Self {
        self.exponents = exponents;
        self
    }

    pub fn with_lipschitz(mut self, l: f64) -> Self {
        self.lipschitz = Some(l);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn drift_fn(&self) -> &FieldFn {
        &self.drift
    }

    pub fn diffusion_fn(&self) -> &FieldFn {
        &self.diffusion
    }

    #[inline]
    pub fn eval_drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, out)
    }

    #[inline]
    pub fn eval_diffusion(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(t, x, out)
    }

    pub fn drift_at(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_drift(t, x, &mut out);
        out
    }

    /// `sigma(t, x)` as a row-major `d x m` matrix.
    pub fn diffusion_at(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.noise_dim];
        self.eval_diffusion(t, x, &mut out);
        out
    }

    /// `a = sigma sigma^*` as a row-major `d x d` matrix.
    pub fn diffusivity_at(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let s = self.diffusion_at(t, x);
        let (d, m) = (self.dim, self.noise_dim);
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = (0..m).map(|k| s[i * m + k] * s[j * m + k]).sum();
            }
        }
        a
    }

    /// Replaces the drift, keeping everything else.
    pub fn with_drift(&self, name: impl Into<String>, drift: FieldFn) -> Self {
        let mut out = self.clone();
        out.name = name.into();
        out.drift = drift;
        out.lipschitz = None;
        out
    }

    /// Replaces the diffusion factor, keeping everything else.
    pub fn with_diffusion(&self, name: impl Into<String>, noise_dim: usize, diffusion: FieldFn) -> Self {
        let mut out = self.clone();
        out.name = name.into();
        out.noise_dim = noise_dim;
        out.diffusion = diffusion;
        out.lipschitz = None;
        out
    }

    /// Largest sampled difference quotient of `b` and `sigma` over random
    /// point pairs in the grid box and random times.
    pub fn sampled_lipschitz(&self, grid: &BoxGrid, pairs: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..grid.dim())
                .map(|k| rng.random_range(grid.lower()[k]..grid.upper()[k]))
                .collect()
        };
        for _ in 0..pairs {
            let t = rng.random_range(0.0..=self.horizon);
            let x = draw(&mut rng);
            let y = draw(&mut rng);
            let dist = distance(&x, &y);
            if dist == 0.0 {
                continue;
            }
            let db = distance(&self.drift_at(t, &x), &self.drift_at(t, &y));
            let ds = distance(&self.diffusion_at(t, &x), &self.diffusion_at(t, &y));
            worst = worst.max(db / dist).max(ds / dist);
        }
        worst
    }

    /// Checks the declared Lipschitz constant on sampled pairs.
    pub fn validate_lipschitz(&self, grid: &BoxGrid, pairs: usize, seed: u64) -> Result<()> {
        if let Some(l) = self.lipschitz {
            let seen = self.sampled_lipschitz(grid, pairs, seed);
            if seen > l * (1.0 + 1e-6) {
                return Err(Error::InvalidCoefficients(format!(
                    "{}: sampled difference quotient {seen:.6} exceeds declared Lipschitz constant {l}",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Scalar function sampled at the cell centres of a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarGrid {
    pub grid: BoxGrid,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(grid: BoxGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "{} values for {} cells",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: &BoxGrid, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(&grid.center(i))).collect();
        Self {
            grid: grid.clone(),
            values,
        }
    }

    pub fn constant(grid: &BoxGrid, c: f64) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![c; grid.len()],
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn abs(&self) -> Self {
        self.map(f64::abs)
    }

    /// `(sum |f|^r vol)^(1/r)`, or the max for `r = inf`.
    pub fn lp_norm(&self, r: f64) -> Result<f64> {
        crate::measures::grid_lr_norm(&self.values, self.grid.cell_volume(), r)
    }

    /// Multilinear interpolation between cell centres, constant beyond the
    /// outermost centres.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        interpolate_components(&self.grid, &self.values, 1, 0, x)
    }

    /// Centred differences in the interior, one-sided on the boundary.
    pub fn gradient(&self) -> Vec<ScalarGrid> {
        (0..self.grid.dim())
            .map(|axis| ScalarGrid {
                grid: self.grid.clone(),
                values: axis_derivative(&self.grid, &self.values, 1, 0, axis),
            })
            .collect()
    }

    /// Euclidean norm of the gradient per cell.
    pub fn gradient_norm(&self) -> ScalarGrid {
        let g = self.gradient();
        let values = (0..self.grid.len())
            .map(|i| g.iter().map(|c| c.values[i] * c.values[i]).sum::<f64>().sqrt())
            .collect();
        ScalarGrid {
            grid: self.grid.clone(),
            values,
        }
    }
}

/// Derivative along `axis` of component `comp` of an interleaved field.
pub(crate) fn axis_derivative(grid: &BoxGrid, values: &[f64], stride: usize, comp: usize, axis: usize) -> Vec<f64> {
    let h = grid.spacing(axis);
    let n = grid.cells()[axis];
    let mut out = vec![0.0; grid.len()];
    for idx in 0..grid.len() {
        let ij = grid.unflatten(idx);
        let k = ij[axis];
        let at = |kk: usize| {
            let mut c = ij;
            c[axis] = kk;
            values[grid.flatten(c[0], c[1]) * stride + comp]
        };
        out[idx] = if k == 0 {
            (at(1) - at(0)) / h
        } else if k == n - 1 {
            (at(n - 1) - at(n - 2)) / h
        } else {
            (at(k + 1) - at(k - 1)) / (2.0 * h)
        };
    }
    out
}

/// Multilinear interpolation of component `comp` of an interleaved field.
pub(crate) fn interpolate_components(grid: &BoxGrid, values: &[f64], stride: usize, comp: usize, x: &[f64]) -> f64 {
    let mut base = [0usize; 2];
    let mut frac = [0.0f64; 2];
    for k in 0..grid.dim() {
        let n = grid.cells()[k];
        let s = (x[k] - grid.lower()[k]) / grid.spacing(k) - 0.5;
        let i0 = (s.floor().max(0.0) as usize).min(n - 2);
        base[k] = i0;
        frac[k] = (s - i0 as f64).clamp(0.0, 1.0);
    }
    let at = |i: usize, j: usize| values[grid.flatten(i, j) * stride + comp];
    if grid.dim() == 1 {
        let (i, f) = (base[0], frac[0]);
        at(i, 0) * (1.0 - f) + at(i + 1, 0) * f
    } else {
        let (i, j) = (base[0], base[1]);
        let (fx, fy) = (frac[0], frac[1]);
        at(i, j) * (1.0 - fx) * (1.0 - fy)
            + at(i + 1, j) * fx * (1.0 - fy)
            + at(i, j + 1) * (1.0 - fx) * fy
            + at(i + 1, j + 1) * fx * fy
    }
}

/// Vector- or matrix-valued field sampled at cell centres, components
/// interleaved per cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorGrid {
    pub grid: BoxGrid,
    pub components: usize,
    pub values: Vec<f64>,
}

impl VectorGrid {
    pub fn new(grid: BoxGrid, components: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() * components {
            return Err(Error::InvalidGrid(format!(
                "{} values for {} cells x {components} components",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self {
            grid,
            components,
            values,
        })
    }

    pub fn from_fn(grid: &BoxGrid, components: usize, f: impl Fn(&[f64], &mut [f64])) -> Self {
        let mut values = vec![0.0; grid.len() * components];
        for i in 0..grid.len() {
            f(&grid.center(i), &mut values[i * components..(i + 1) * components]);
        }
        Self {
            grid: grid.clone(),
            components,
            values,
        }
    }

    pub fn component(&self, c: usize) -> ScalarGrid {
        ScalarGrid {
            grid: self.grid.clone(),
            values: (0..self.grid.len())
                .map(|i| self.values[i * self.components + c])
                .collect(),
        }
    }

    pub fn interpolate(&self, x: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate().take(self.components) {
            *o = interpolate_components(&self.grid, &self.values, self.components, c, x);
        }
    }

    /// Pointwise Euclidean (Frobenius) norm.
    pub fn norm(&self) -> ScalarGrid {
        let k = self.components;
        ScalarGrid {
            grid: self.grid.clone(),
            values: self
                .values
                .chunks(k)
                .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect(),
        }
    }

    /// Reads rows of `coordinates..., components...` in cell order.
    pub fn read_csv<R: Read>(grid: &BoxGrid, components: usize, input: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let d = grid.dim();
        let mut values = Vec::with_capacity(grid.len() * components);
        for (row, rec) in reader.records().enumerate() {
            let rec = rec?;
            if rec.len() != d + components {
                return Err(Error::Config(format!(
                    "field CSV row {}: expected {} columns, found {}",
                    row + 2,
                    d + components,
                    rec.len()
                )));
            }
            for c in 0..components {
                let v: f64 = rec[d + c]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("field CSV row {}: bad number `{}`", row + 2, &rec[d + c])))?;
                values.push(v);
            }
        }
        Self::new(grid.clone(), components, values)
    }
}

impl CoefficientField {
    /// Time-independent field interpolated from grid samples of `b` (d
    /// components) and `sigma` (d*m components, row major).
    pub fn from_grids(name: impl Into<String>, drift: VectorGrid, diffusion: VectorGrid, horizon: f64) -> Result<Self> {
        let d = drift.grid.dim();
        if drift.components != d || !diffusion.components.is_multiple_of(d) || diffusion.grid != drift.grid {
            return Err(Error::InvalidCoefficients(
                "drift needs d components and diffusion d*m on the same grid".into(),
            ));
        }
        let m = diffusion.components / d;
        let drift = Arc::new(drift);
        let diffusion = Arc::new(diffusion);
        Ok(Self::new(
            name,
            d,
            m,
            horizon,
            Arc::new(move |_t, x, out| drift.interpolate(x, out)),
            Arc::new(move |_t, x, out| diffusion.interpolate(x, out)),
        ))
    }
}

/// Scalar quantity sampled on a space-time grid: midpoint rule in time over
/// `[0, T]`, cell centres in space.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpaceTimeSamples {
    pub grid: BoxGrid,
    pub times: Vec<f64>,
    pub dt: f64,
    /// `frames[k][cell]`.
    pub frames: Vec<Vec<f64>>,
}

impl SpaceTimeSamples {
    pub fn sample(grid: &BoxGrid, horizon: f64, steps: usize, f: impl Fn(f64, &[f64]) -> f64 + Sync) -> Self {
        use rayon::prelude::*;
        let dt = horizon / steps as f64;
        let times: Vec<f64> = (0..steps).map(|k| (k as f64 + 0.5) * dt).collect();
        let centers: Vec<Vec<f64>> = (0..grid.len()).map(|i| grid.center(i)).collect();
        let frames = times
            .par_iter()
            .map(|&t| centers.iter().map(|x| f(t, x)).collect())
            .collect();
        Self {
            grid: grid.clone(),
            times,
            dt,
            frames,
        }
    }

    /// `||f||_{L^r(0,T; L^s)}`.
    pub fn norm(&self, r: f64, s: f64) -> Result<f64> {
        if !(r >= 1.0) {
            return Err(Error::InvalidExponent(r));
        }
        let vol = self.grid.cell_volume();
        let spatial: Vec<f64> = self
            .frames
            .iter()
            .map(|v| crate::measures::grid_lr_norm(v, vol, s))
            .collect::<Result<_>>()?;
        if r.is_infinite() {
            return Ok(spatial.iter().cloned().fold(0.0, f64::max));
        }
        Ok(spatial.iter().map(|n| n.powf(r) * self.dt).sum::<f64>().powf(1.0 / r))
    }

    /// `int int |f| dx dt`.
    pub fn integral_abs(&self) -> f64 {
        let vol = self.grid.cell_volume();
        self.frames
            .iter()
            .map(|v| v.iter().map(|x| x.abs()).sum::<f64>() * vol * self.dt)
            .sum()
    }

    /// Every sample with its quadrature weight `dt * vol`.
    pub fn weighted_samples(&self) -> (Vec<f64>, f64) {
        (self.frames.concat(), self.dt * self.grid.cell_volume())
    }
}

/// `||f||_{L^r(0,T; L^s)}` of a scalar space-time function on a grid.
pub fn spacetime_norm(
    grid: &BoxGrid,
    horizon: f64,
    steps: usize,
    r: f64,
    s: f64,
    f: impl Fn(f64, &[f64]) -> f64 + Sync,
) -> Result<f64> {
    SpaceTimeSamples::sample(grid, horizon, steps, f).norm(r, s)
}

/// `|b(t,x)|` as a scalar sampler.
pub fn drift_magnitude(field: &CoefficientField) -> impl Fn(f64, &[f64]) -> f64 + Sync + '_ {
    move |t, x| {
        let b = field.drift_at(t, x);
        b.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `|b1(t,x) - b2(t,x)|`.
pub fn drift_difference<'a>(
    f1: &'a CoefficientField,
    f2: &'a CoefficientField,
) -> impl Fn(f64, &[f64]) -> f64 + Sync + 'a {
    move |t, x| distance(&f1.drift_at(t, x), &f2.drift_at(t, x))
}

/// Frobenius `|sigma1(t,x) - sigma2(t,x)|`.
pub fn diffusion_difference<'a>(
    f1: &'a CoefficientField,
    f2: &'a CoefficientField,
) -> impl Fn(f64, &[f64]) -> f64 + Sync + 'a {
    move |t, x| distance(&f1.diffusion_at(t, x), &f2.diffusion_at(t, x))
}

/// Frobenius norm of the Jacobian of `b` by centred differences with step `h`.
pub fn drift_jacobian_norm(field: &CoefficientField, h: f64) -> impl Fn(f64, &[f64]) -> f64 + Sync + '_ {
    move |t, x| jacobian_norm(|y, out| field.eval_drift(t, y, out), field.dim(), field.dim(), x, h)
}

/// Frobenius norm of the derivative of `sigma` (all `d*m*d` partials).
pub fn diffusion_jacobian_norm(field: &CoefficientField, h: f64) -> impl Fn(f64, &[f64]) -> f64 + Sync + '_ {
    move |t, x| {
        jacobian_norm(
            |y, out| field.eval_diffusion(t, y, out),
            field.dim() * field.noise_dim(),
            field.dim(),
            x,
            h,
        )
    }
}

fn jacobian_norm(f: impl Fn(&[f64], &mut [f64]), outputs: usize, dim: usize, x: &[f64], h: f64) -> f64 {
    let mut plus = vec![0.0; outputs];
    let mut minus = vec![0.0; outputs];
    let mut y = x.to_vec();
    let mut total = 0.0;
    for k in 0..dim {
        y[k] = x[k] + h;
        f(&y, &mut plus);
        y[k] = x[k] - h;
        f(&y, &mut minus);
        y[k] = x[k];
        total += plus
            .iter()
            .zip(&minus)
            .map(|(p, m)| ((p - m) / (2.0 * h)).powi(2))
            .sum::<f64>();
    }
    total.sqrt()
}

/// Divergence of `b` at `(t, x)` by centred differences.
pub fn drift_divergence(field: &CoefficientField, t: f64, x: &[f64], h: f64) -> f64 {
    let d = field.dim();
    let mut y = x.to_vec();
    let mut total = 0.0;
    for k in 0..d {
        y[k] = x[k] + h;
        let p = field.drift_at(t, &y)[k];
        y[k] = x[k] - h;
        let m = field.drift_at(t, &y)[k];
        y[k] = x[k];
        total += (p - m) / (2.0 * h);
    }
    total
}
