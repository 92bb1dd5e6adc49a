//! Mollification, the discrete Hardy-Littlewood maximal function, the
//! pointwise Sobolev difference check and the Jabin kernel integral.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ScalarGrid, VectorGrid};
use crate::error::{Error, Result};
use crate::measures::BoxGrid;

/// Unnormalized bump `exp(-1 / (1 - |z|^2))` on the unit ball.
pub fn mollifier_profile(r2: f64) -> f64 {
    if r2 < 1.0 {
        (-1.0 / (1.0 - r2)).exp()
    } else {
        0.0
    }
}

/// Discrete kernel: offsets and weights normalized to unit discrete mass.
fn mollifier_stencil(grid: &BoxGrid, eps: f64) -> Vec<(isize, isize, f64)> {
    let d = grid.dim();
    let reach: Vec<isize> = (0..2)
        .map(|k| {
            if k < d {
                (eps / grid.spacing(k)).ceil() as isize
            } else {
                0
            }
        })
        .collect();
    let mut stencil = Vec::new();
    for a in -reach[0]..=reach[0] {
        for b in -reach[1]..=reach[1] {
            let mut r2 = (a as f64 * grid.spacing(0) / eps).powi(2);
            if d == 2 {
                r2 += (b as f64 * grid.spacing(1) / eps).powi(2);
            }
            let w = mollifier_profile(r2);
            if w > 0.0 {
                stencil.push((a, b, w));
            }
        }
    }
    let total: f64 = stencil.iter().map(|s| s.2).sum();
    stencil.iter_mut().for_each(|s| s.2 /= total);
    stencil
}

/// Convolution with the standard bump of radius `eps`, zero extension outside
/// the box. For `eps` below the grid spacing the input is returned unchanged.
pub fn mollify(field: &ScalarGrid, eps: f64) -> ScalarGrid {
    let grid = &field.grid;
    if !(eps > grid.min_spacing()) {
        log::warn!(
            "mollifier radius {eps} does not exceed grid spacing {}; field left unchanged",
            grid.min_spacing()
        );
        return field.clone();
    }
    let stencil = mollifier_stencil(grid, eps);
    let n0 = grid.cells()[0] as isize;
    let n1 = if grid.dim() == 2 { grid.cells()[1] as isize } else { 1 };
    let values = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let ij = grid.unflatten(idx);
            let (i, j) = (ij[0] as isize, ij[1] as isize);
            let mut acc = 0.0;
            for &(a, b, w) in &stencil {
                let (p, q) = (i - a, j - b);
                if p >= 0 && p < n0 && q >= 0 && q < n1 {
                    acc += w * field.values[grid.flatten(p as usize, q as usize)];
                }
            }
            acc
        })
        .collect();
    ScalarGrid {
        grid: grid.clone(),
        values,
    }
}

/// Componentwise [`mollify`].
pub fn mollify_vector(field: &VectorGrid, eps: f64) -> VectorGrid {
    let k = field.components;
    let parts: Vec<ScalarGrid> = (0..k).map(|c| mollify(&field.component(c), eps)).collect();
    let mut values = vec![0.0; field.values.len()];
    for (c, part) in parts.iter().enumerate() {
        for (i, v) in part.values.iter().enumerate() {
            values[i * k + c] = *v;
        }
    }
    VectorGrid {
        grid: field.grid.clone(),
        components: k,
        values,
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MaximalOptions {
    /// Geometric ratio of the radius ladder.
    pub ratio: f64,
}

impl Default for MaximalOptions {
    fn default() -> Self {
        Self { ratio: 1.3 }
    }
}

/// Discrete maximal function: for each cell, the largest average of `|f|`
/// over lattice balls of radii `0, h, h*ratio, h*ratio^2, ...` up to the
/// domain diameter. Cells outside the box count as zeros.
pub fn maximal_function(f: &ScalarGrid) -> ScalarGrid {
    maximal_function_with(f, MaximalOptions::default())
}

pub fn maximal_function_with(f: &ScalarGrid, opts: MaximalOptions) -> ScalarGrid {
    let grid = &f.grid;
    let h = grid.min_spacing();
    let mut radii = vec![0.0];
    let mut r = h;
    while r <= grid.diameter() * (1.0 + 1e-12) {
        radii.push(r);
        r *= opts.ratio;
    }
    radii.push(grid.diameter());
    let abs: Vec<f64> = f.values.iter().map(|v| v.abs()).collect();
    let values = if grid.dim() == 1 {
        maximal_1d(grid, &abs, &radii)
    } else {
        maximal_2d(grid, &abs, &radii)
    };
    ScalarGrid {
        grid: grid.clone(),
        values,
    }
}

fn maximal_1d(grid: &BoxGrid, abs: &[f64], radii: &[f64]) -> Vec<f64> {
    let n = abs.len();
    let h = grid.spacing(0);
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + abs[i];
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut best = abs[i];
            for &r in radii {
                let w = (r / h + 1e-9).floor() as usize;
                let lo = i.saturating_sub(w);
                let hi = (i + w + 1).min(n);
                let avg = (prefix[hi] - prefix[lo]) / (2 * w + 1) as f64;
                best = best.max(avg);
            }
            best
        })
        .collect()
}

fn maximal_2d(grid: &BoxGrid, abs: &[f64], radii: &[f64]) -> Vec<f64> {
    let (n0, n1) = (grid.cells()[0], grid.cells()[1]);
    let (h0, h1) = (grid.spacing(0), grid.spacing(1));
    // prefix sums along axis 1 for each row
    let mut prefix = vec![0.0; n0 * (n1 + 1)];
    for i in 0..n0 {
        for j in 0..n1 {
            prefix[i * (n1 + 1) + j + 1] = prefix[i * (n1 + 1) + j] + abs[i * n1 + j];
        }
    }
    // half widths per row offset, per radius
    let shapes: Vec<(Vec<usize>, f64)> = radii
        .iter()
        .map(|&r| {
            let rows = (r / h0 + 1e-9).floor() as usize;
            let widths: Vec<usize> = (0..=rows)
                .map(|a| {
                    let rem = (r * r - (a as f64 * h0).powi(2)).max(0.0);
                    (rem.sqrt() / h1 + 1e-9).floor() as usize
                })
                .collect();
            let count = widths
                .iter()
                .enumerate()
                .map(|(a, w)| (2 * w + 1) * if a == 0 { 1 } else { 2 })
                .sum::<usize>() as f64;
            (widths, count)
        })
        .collect();
    (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / n1, idx % n1);
            let mut best = abs[idx];
            for (widths, count) in &shapes {
                let mut sum = 0.0;
                for (a, &w) in widths.iter().enumerate() {
                    let lo = j.saturating_sub(w);
                    let hi = (j + w + 1).min(n1);
                    let mut add_row = |row: usize| {
                        sum += prefix[row * (n1 + 1) + hi] - prefix[row * (n1 + 1) + lo];
                    };
                    if a == 0 {
                        add_row(i);
                    } else {
                        if i >= a {
                            add_row(i - a);
                        }
                        if i + a < n0 {
                            add_row(i + a);
                        }
                    }
                }
                best = best.max(sum / count);
            }
            best
        })
        .collect()
}

/// Outcome of the pointwise difference-quotient check
/// `|f(x) - f(y)| <= C |x - y| (M|grad f|(x) + M|grad f|(y))`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SobolevCheck {
    pub pairs: usize,
    pub constant: f64,
    /// Smallest constant that would make every sampled pair pass.
    pub max_ratio: f64,
    pub violations: usize,
}

impl SobolevCheck {
    pub fn passes(&self) -> bool {
        self.violations == 0
    }
}

/// Checks the pointwise Sobolev inequality at the given pairs of cell indices.
pub fn pointwise_sobolev_check(f: &ScalarGrid, pairs: &[(usize, usize)], constant: f64) -> SobolevCheck {
    let m = maximal_function(&f.gradient_norm());
    let grid = &f.grid;
    let mut max_ratio: f64 = 0.0;
    let mut violations = 0;
    for &(a, b) in pairs {
        let lhs = (f.values[a] - f.values[b]).abs();
        let dist = super::distance(&grid.center(a), &grid.center(b));
        let rhs = dist * (m.values[a] + m.values[b]);
        if lhs > 0.0 {
            let ratio = if rhs > 0.0 { lhs / rhs } else { f64::INFINITY };
            max_ratio = max_ratio.max(ratio);
        }
        if lhs > constant * rhs * (1.0 + 1e-12) {
            violations += 1;
        }
    }
    SobolevCheck {
        pairs: pairs.len(),
        constant,
        max_ratio,
        violations,
    }
}

/// `int_{B(x,y)} |x-z|^{1-d} + |y-z|^{1-d} dz` over the ball with centre
/// `(x+y)/2` and diameter `|x-y|`, for `d` in {1, 2}.
///
/// In two dimensions the integral about each singular boundary point is taken
/// in polar coordinates, where it reduces to the angular integral of the chord
/// length; that integral is evaluated by composite Simpson quadrature.
pub fn jabin_kernel_integral(x: &[f64], y: &[f64]) -> Result<f64> {
    let d = x.len();
    let diam = super::distance(x, y);
    if diam == 0.0 {
        return Ok(0.0);
    }
    match d {
        1 => {
            // kernel is identically one on each side; Simpson on a constant is exact
            let g = |_z: f64| 2.0;
            Ok(simpson(g, x[0].min(y[0]), x[0].max(y[0]), 2))
        }
        2 => {
            let c = [(x[0] + y[0]) / 2.0, (x[1] + y[1]) / 2.0];
            let chord_integral = |p: &[f64]| {
                let chord = |theta: f64| {
                    let u = [theta.cos(), theta.sin()];
                    (-2.0 * (u[0] * (p[0] - c[0]) + u[1] * (p[1] - c[1]))).max(0.0)
                };
                // chords are positive on the half circle facing the centre
                let theta0 = (c[1] - p[1]).atan2(c[0] - p[0]);
                let half = std::f64::consts::FRAC_PI_2;
                simpson(chord, theta0 - half, theta0 + half, 2048)
            };
            Ok(chord_integral(x) + chord_integral(y))
        }
        _ => Err(Error::InvalidGrid(format!(
            "jabin integral needs d in {{1, 2}}, got {d}"
        ))),
    }
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let n = intervals + intervals % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + k as f64 * h);
    }
    s * h / 3.0
}

/// Random signed field for the maximal-inequality suites: a few Gaussian
/// bumps and box indicators with random centres, widths and amplitudes.
pub fn random_test_field<R: Rng + ?Sized>(grid: &BoxGrid, rng: &mut R) -> ScalarGrid {
    let d = grid.dim();
    let parts = rng.random_range(1..=6);
    let mut values = vec![0.0; grid.len()];
    for _ in 0..parts {
        let center: Vec<f64> = (0..d)
            .map(|k| rng.random_range(grid.lower()[k]..grid.upper()[k]))
            .collect();
        let extent = (grid.upper()[0] - grid.lower()[0]) * rng.random_range(0.01..0.3);
        let amp = rng.random_range(-2.0..2.0);
        let boxy = rng.random_bool(0.5);
        for (idx, v) in values.iter_mut().enumerate() {
            let x = grid.center(idx);
            let r2: f64 = x.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum();
            *v += if boxy {
                if x.iter().zip(&center).all(|(a, b)| (a - b).abs() <= extent) {
                    amp
                } else {
                    0.0
                }
            } else {
                amp * (-r2 / (2.0 * extent * extent)).exp()
            };
        }
    }
    ScalarGrid {
        grid: grid.clone(),
        values,
    }
}
