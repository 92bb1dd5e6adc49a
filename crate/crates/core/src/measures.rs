//! Discrete probability measures: densities on box grids and weighted particle clouds.
//!
//! The state space is truncated to a box. Mass that leaves the box is not
//! discarded silently; every [`GridDensity`] carries the amount it lost as
//! `leakage`, so `mass() + leakage` stays at one.

use std::io::{Read, Write};
use std::path::Path;

use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total weight of a particle cloud.
pub const WEIGHT_TOLERANCE: f64 = 1e-12;

/// Uniform cell grid on a box in one or two dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxGrid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    cells: Vec<usize>,
}

impl BoxGrid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, cells: Vec<usize>) -> Result<Self> {
        let d = lower.len();
        if d == 0 || d > 2 {
            return Err(Error::InvalidGrid(format!("dimension {d} not in {{1, 2}}")));
        }
        if upper.len() != d || cells.len() != d {
            return Err(Error::InvalidGrid("axis arrays differ in length".into()));
        }
        for k in 0..d {
            if !(lower[k].is_finite() && upper[k].is_finite()) || upper[k] <= lower[k] {
                return Err(Error::InvalidGrid(format!(
                    "axis {k}: upper bound {} must exceed lower bound {}",
                    upper[k], lower[k]
                )));
            }
            if cells[k] < 2 {
                return Err(Error::InvalidGrid(format!("axis {k}: need at least 2 cells")));
            }
        }
        Ok(Self { lower, upper, cells })
    }

    pub fn line(lower: f64, upper: f64, cells: usize) -> Result<Self> {
        Self::new(vec![lower], vec![upper], vec![cells])
    }

    pub fn square(lower: f64, upper: f64, cells: usize) -> Result<Self> {
        Self::new(vec![lower; 2], vec![upper; 2], vec![cells; 2])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / self.cells[axis] as f64
    }

    pub fn min_spacing(&self) -> f64 {
        (0..self.dim()).map(|k| self.spacing(k)).fold(f64::INFINITY, f64::min)
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|k| self.spacing(k)).product()
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|k| self.upper[k] - self.lower[k]).product()
    }

    /// Total number of cells.
    pub fn len(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Diameter of the box.
    pub fn diameter(&self) -> f64 {
        (0..self.dim())
            .map(|k| (self.upper[k] - self.lower[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn axis_center(&self, axis: usize, i: usize) -> f64 {
        self.lower[axis] + (i as f64 + 0.5) * self.spacing(axis)
    }

    /// Per-axis indices of a flat cell index (axis 0 is the slow axis).
    pub fn unflatten(&self, idx: usize) -> [usize; 2] {
        if self.dim() == 1 {
            [idx, 0]
        } else {
            [idx / self.cells[1], idx % self.cells[1]]
        }
    }

    pub fn flatten(&self, i: usize, j: usize) -> usize {
        if self.dim() == 1 {
            i
        } else {
            i * self.cells[1] + j
        }
    }

    pub fn center(&self, idx: usize) -> Vec<f64> {
        let ij = self.unflatten(idx);
        (0..self.dim()).map(|k| self.axis_center(k, ij[k])).collect()
    }

    /// Flat array of all cell centres, `dim` coordinates per cell.
    pub fn centers(&self) -> Vec<f64> {
        (0..self.len()).flat_map(|idx| self.center(idx)).collect()
    }

    /// Cell containing `x`, or `None` outside the box.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        let mut ij = [0usize; 2];
        for k in 0..self.dim() {
            let s = (x[k] - self.lower[k]) / self.spacing(k);
            if !(s >= 0.0) || s >= self.cells[k] as f64 {
                if x[k] == self.upper[k] {
                    ij[k] = self.cells[k] - 1;
                    continue;
                }
                return None;
            }
            ij[k] = s as usize;
        }
        Some(self.flatten(ij[0], ij[1]))
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        (0..self.dim()).all(|k| x[k] >= self.lower[k] && x[k] <= self.upper[k])
    }
}

/// Visits the atoms of a discrete measure as (point, weight) pairs.
pub trait AtomSource {
    fn dim(&self) -> usize;
    fn for_each_atom(&self, f: &mut dyn FnMut(&[f64], f64));
}

/// Density of a measure that is absolutely continuous on a [`BoxGrid`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    pub grid: BoxGrid,
    pub values: Vec<f64>,
    pub time: f64,
    /// Mass that has left the box, or was never inside it.
    pub leakage: f64,
}

impl GridDensity {
    pub fn new(grid: BoxGrid, values: Vec<f64>, time: f64) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} values for a grid of {} cells",
                values.len(),
                grid.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidMeasure(format!(
                "cell {bad} has invalid density {}",
                values[bad]
            )));
        }
        Ok(Self {
            grid,
            values,
            time,
            leakage: 0.0,
        })
    }

    /// Samples `f` at cell centres and normalizes to unit mass.
    pub fn from_fn(grid: BoxGrid, time: f64, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values: Vec<f64> = (0..grid.len()).map(|i| f(&grid.center(i)).max(0.0)).collect();
        let mut density = Self::new(grid, values, time)?;
        let mass = density.mass();
        if !(mass > 0.0) {
            return Err(Error::InvalidMeasure("density has zero mass on the grid".into()));
        }
        density.values.iter_mut().for_each(|v| *v /= mass);
        Ok(density)
    }

    /// Gaussian N(mean, variance * Id) sampled on `grid`, normalized on the box.
    pub fn gaussian(grid: BoxGrid, mean: &[f64], variance: f64) -> Result<Self> {
        let mean = mean.to_vec();
        Self::from_fn(grid, 0.0, move |x| {
            let r2: f64 = x.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum();
            (-0.5 * r2 / variance).exp()
        })
    }

    pub fn with_leakage(mut self, leakage: f64) -> Self {
        self.leakage = leakage;
        self
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// Checks `mass` lies in `[1 - eps_mass, 1]` and that mass plus leakage is one.
    pub fn validate_mass(&self, eps_mass: f64) -> Result<()> {
        let m = self.mass();
        if m < 1.0 - eps_mass || m > 1.0 + 1e-9 {
            return Err(Error::InvalidMeasure(format!("mass {m} outside [1 - {eps_mass}, 1]")));
        }
        if (m + self.leakage - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidMeasure(format!(
                "mass {m} plus leakage {} differs from one",
                self.leakage
            )));
        }
        Ok(())
    }

    pub fn lr_norm(&self, r: f64) -> Result<f64> {
        lr_norm(self, r)
    }

    /// The measure as weighted atoms at cell centres; zero cells are dropped.
    /// Weights are renormalized to one (leakage is not represented).
    pub fn to_cloud(&self) -> Result<ParticleCloud> {
        let vol = self.grid.cell_volume();
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for (i, &v) in self.values.iter().enumerate() {
            if v > 0.0 {
                points.extend(self.grid.center(i));
                weights.push(v * vol);
            }
        }
        ParticleCloud::from_unnormalized(self.grid.dim(), points, weights, self.time)
    }

    /// `n` equal-weight atoms at the quantile midpoints `(k + 1/2) / n` of a 1D
    /// density, inverting the piecewise-linear CDF exactly.
    pub fn quantile_atoms(&self, n: usize) -> Result<ParticleCloud> {
        if self.grid.dim() != 1 {
            return Err(Error::InvalidGrid("quantile atoms need a 1D grid".into()));
        }
        let points: Vec<f64> = (0..n).map(|k| self.quantile((k as f64 + 0.5) / n as f64)).collect();
        ParticleCloud::uniform(1, points, self.time)
    }

    /// `n` i.i.d. draws: a cell by mass, then a uniform point inside it.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<f64>> {
        let index = rand::distr::weighted::WeightedIndex::new(&self.values)
            .map_err(|e| Error::InvalidMeasure(format!("density cannot be sampled: {e}")))?;
        let d = self.grid.dim();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            let ij = self.grid.unflatten(index.sample(rng));
            for k in 0..d {
                let lo = self.grid.lower()[k] + ij[k] as f64 * self.grid.spacing(k);
                out.push(lo + rng.random::<f64>() * self.grid.spacing(k));
            }
        }
        Ok(out)
    }

    /// Inverse of the normalized piecewise-linear CDF of a 1D density.
    pub fn quantile(&self, level: f64) -> f64 {
        let h = self.grid.spacing(0);
        let total: f64 = self.values.iter().sum::<f64>() * h;
        let target = level.clamp(0.0, 1.0) * total;
        let mut acc = 0.0;
        for (i, &v) in self.values.iter().enumerate() {
            let m = v * h;
            if m > 0.0 && acc + m >= target {
                let frac = ((target - acc) / m).clamp(0.0, 1.0);
                return self.grid.lower()[0] + (i as f64 + frac) * h;
            }
            acc += m;
        }
        self.grid.upper()[0]
    }

    /// Mean of the normalized density.
    pub fn mean(&self) -> Vec<f64> {
        let d = self.grid.dim();
        let mut acc = vec![0.0; d];
        let mut total = 0.0;
        for (i, &v) in self.values.iter().enumerate() {
            let c = self.grid.center(i);
            for k in 0..d {
                acc[k] += v * c[k];
            }
            total += v;
        }
        acc.iter().map(|a| a / total).collect()
    }

    /// L1 distance between two densities on the same grid.
    pub fn l1_distance(&self, other: &GridDensity) -> Result<f64> {
        if self.grid != other.grid {
            return Err(Error::InvalidGrid("densities live on different grids".into()));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * self.grid.cell_volume())
    }

    /// Averages cells onto a coarser 1D or 2D grid whose cell counts divide this one's.
    pub fn coarsen(&self, factor: usize) -> Result<GridDensity> {
        let cells = self.grid.cells();
        if factor == 0 || cells.iter().any(|c| c % factor != 0) {
            return Err(Error::InvalidGrid(format!(
                "coarsening factor {factor} does not divide {cells:?}"
            )));
        }
        let coarse_cells: Vec<usize> = cells.iter().map(|c| c / factor).collect();
        let coarse = BoxGrid::new(self.grid.lower().to_vec(), self.grid.upper().to_vec(), coarse_cells)?;
        let mut values = vec![0.0; coarse.len()];
        let per = factor.pow(self.grid.dim() as u32) as f64;
        for idx in 0..self.grid.len() {
            let [i, j] = self.grid.unflatten(idx);
            let cidx = coarse.flatten(i / factor, j / factor);
            values[cidx] += self.values[idx] / per;
        }
        Ok(GridDensity {
            grid: coarse,
            values,
            time: self.time,
            leakage: self.leakage,
        })
    }

    /// JSON header with grid metadata and time stamp.
    pub fn header_json(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "grid_density",
            "dimension": self.grid.dim(),
            "lower": self.grid.lower(),
            "upper": self.grid.upper(),
            "cells": self.grid.cells(),
            "cell_volume": self.grid.cell_volume(),
            "time": self.time,
            "leakage": self.leakage,
            "mass": self.mass(),
        })
    }

    /// One row per cell: centre coordinates then the density value.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let d = self.grid.dim();
        let mut header: Vec<String> = (0..d).map(|k| format!("x{k}")).collect();
        header.push("value".into());
        w.write_record(&header)?;
        for (i, v) in self.values.iter().enumerate() {
            let mut row: Vec<String> = self.grid.center(i).iter().map(|c| format!("{c:.12e}")).collect();
            row.push(format!("{v:.17e}"));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `<stem>.csv` and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(stem.with_extension("csv"))?)?;
        std::fs::write(
            stem.with_extension("json"),
            serde_json::to_string_pretty(&self.header_json())?,
        )?;
        Ok(())
    }

    /// Reads a density written by [`GridDensity::save`].
    pub fn load(stem: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            lower: Vec<f64>,
            upper: Vec<f64>,
            cells: Vec<usize>,
            time: f64,
            leakage: f64,
        }
        let header: Header = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let grid = BoxGrid::new(header.lower, header.upper, header.cells)?;
        let d = grid.dim();
        let mut reader = csv::Reader::from_path(stem.with_extension("csv"))?;
        let mut values = Vec::with_capacity(grid.len());
        for rec in reader.records() {
            let rec = rec?;
            let v: f64 = rec
                .get(d)
                .ok_or_else(|| Error::InvalidMeasure("short CSV row".into()))?
                .trim()
                .parse()
                .map_err(|e| Error::InvalidMeasure(format!("bad value: {e}")))?;
            values.push(v);
        }
        Ok(Self::new(grid, values, header.time)?.with_leakage(header.leakage))
    }
}

impl AtomSource for GridDensity {
    fn dim(&self) -> usize {
        self.grid.dim()
    }

    fn for_each_atom(&self, f: &mut dyn FnMut(&[f64], f64)) {
        let vol = self.grid.cell_volume();
        for (i, &v) in self.values.iter().enumerate() {
            if v > 0.0 {
                f(&self.grid.center(i), v * vol);
            }
        }
    }
}

/// Weighted point set in R^d.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleCloud {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    pub time: f64,
}

impl ParticleCloud {
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>, time: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMeasure("dimension must be positive".into()));
        }
        if points.len() != dim * weights.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} coordinates for {} weights in dimension {dim}",
                points.len(),
                weights.len()
            )));
        }
        if weights.is_empty() {
            return Err(Error::InvalidMeasure("empty cloud".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidMeasure("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOLERANCE * weights.len().max(1) as f64 {
            return Err(Error::InvalidMeasure(format!("weights sum to {total}, not 1")));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidMeasure("non-finite coordinate".into()));
        }
        Ok(Self {
            dim,
            points,
            weights,
            time,
        })
    }

    /// Equal weights `1/n`.
    pub fn uniform(dim: usize, points: Vec<f64>, time: f64) -> Result<Self> {
        let n = points.len() / dim.max(1);
        Self::new(dim, points, vec![1.0 / n as f64; n], time)
    }

    /// Normalizes positive weights to sum to one.
    pub fn from_unnormalized(dim: usize, points: Vec<f64>, weights: Vec<f64>, time: f64) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::InvalidMeasure(format!("total weight {total}")));
        }
        let weights = weights.iter().map(|w| w / total).collect();
        Self::new(dim, points, weights, time)
    }

    pub fn dirac(point: Vec<f64>) -> Self {
        let dim = point.len();
        Self {
            dim,
            points: point,
            weights: vec![1.0],
            time: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for i in 0..self.len() {
            for (k, x) in self.point(i).iter().enumerate() {
                m[k] += self.weights[i] * x;
            }
        }
        m
    }

    /// Weighted variance of coordinate `axis`.
    pub fn variance(&self, axis: usize) -> f64 {
        let m = self.mean()[axis];
        (0..self.len())
            .map(|i| self.weights[i] * (self.point(i)[axis] - m).powi(2))
            .sum()
    }

    /// `n` equal-weight atoms drawn with replacement according to the weights.
    pub fn subsample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> ParticleCloud {
        let mut cdf = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        for w in &self.weights {
            acc += w;
            cdf.push(acc);
        }
        let mut points = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            let u: f64 = rng.random::<f64>() * acc;
            let i = cdf.partition_point(|c| *c < u).min(self.len() - 1);
            points.extend_from_slice(self.point(i));
        }
        ParticleCloud {
            dim: self.dim,
            points,
            weights: vec![1.0 / n as f64; n],
            time: self.time,
        }
    }

    /// JSON header with dimension, size and time stamp.
    pub fn header_json(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "particle_cloud",
            "dimension": self.dim,
            "particles": self.len(),
            "time": self.time,
        })
    }

    /// One row per particle: coordinates then weight.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.dim).map(|k| format!("x{k}")).collect();
        header.push("weight".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.point(i).iter().map(|c| format!("{c:.17e}")).collect();
            row.push(format!("{:.17e}", self.weights[i]));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(stem.with_extension("csv"))?)?;
        std::fs::write(
            stem.with_extension("json"),
            serde_json::to_string_pretty(&self.header_json())?,
        )?;
        Ok(())
    }

    /// Reads a cloud from CSV with columns `x0..x{d-1}` and an optional `weight`
    /// column. Missing weights mean equal weights; weights are renormalized if
    /// they sum to one within 1e-6.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let headers = reader.headers()?.clone();
        let weight_col = headers.iter().position(|h| h.trim() == "weight");
        let dim = headers.len() - usize::from(weight_col.is_some());
        if dim == 0 {
            return Err(Error::InvalidMeasure("CSV has no coordinate columns".into()));
        }
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec?;
            for (c, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|e| Error::InvalidMeasure(format!("row {}: column {c}: {e}", line + 2)))?;
                if Some(c) == weight_col {
                    weights.push(v);
                } else {
                    points.push(v);
                }
            }
        }
        let n = points.len() / dim;
        if weight_col.is_none() {
            weights = vec![1.0 / n as f64; n];
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidMeasure(format!("weights sum to {total}, not 1")));
        }
        Self::from_unnormalized(dim, points, weights, 0.0)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

impl AtomSource for ParticleCloud {
    fn dim(&self) -> usize {
        self.dim
    }

    fn for_each_atom(&self, f: &mut dyn FnMut(&[f64], f64)) {
        for i in 0..self.len() {
            f(self.point(i), self.weights[i]);
        }
    }
}

/// Norms, absolute moments and log-moment of a measure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureSummary {
    /// `(r, ||u||_r)` for each requested exponent.
    pub norms: Vec<(f64, f64)>,
    pub first_moment: f64,
    pub alpha: f64,
    pub alpha_moment: f64,
    pub log_moment: f64,
    pub in_p_log: bool,
}

/// `(sum |u|^r cellvol)^(1/r)`, or the max for `r = inf`.
pub fn lr_norm(density: &GridDensity, r: f64) -> Result<f64> {
    grid_lr_norm(&density.values, density.grid.cell_volume(), r)
}

pub(crate) fn grid_lr_norm(values: &[f64], cell_volume: f64, r: f64) -> Result<f64> {
    if r.is_nan() || r < 1.0 {
        return Err(Error::InvalidExponent(r));
    }
    if r.is_infinite() {
        return Ok(values.iter().fold(0.0, |m, v| m.max(v.abs())));
    }
    let s: f64 = values.iter().map(|v| v.abs().powf(r)).sum::<f64>() * cell_volume;
    Ok(s.powf(1.0 / r))
}

/// `int log(1 + |x|^2) dmu`. Finite for every discrete measure.
pub fn log_moment(measure: &dyn AtomSource) -> f64 {
    let mut total = 0.0;
    let mut mass = 0.0;
    measure.for_each_atom(&mut |x, w| {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        total += w * r2.ln_1p();
        mass += w;
    });
    if mass > 0.0 {
        total / mass
    } else {
        0.0
    }
}

/// `int |x|^alpha dmu` over the normalized measure.
pub fn abs_moment(measure: &dyn AtomSource, alpha: f64) -> f64 {
    let mut total = 0.0;
    let mut mass = 0.0;
    measure.for_each_atom(&mut |x, w| {
        let r: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        total += w * r.powf(alpha);
        mass += w;
    });
    if mass > 0.0 {
        total / mass
    } else {
        0.0
    }
}

pub fn summarize(density: &GridDensity, exponents: &[f64], alpha: f64) -> Result<MeasureSummary> {
    let norms = exponents
        .iter()
        .map(|&r| Ok((r, lr_norm(density, r)?)))
        .collect::<Result<Vec<_>>>()?;
    let log_moment = log_moment(density);
    Ok(MeasureSummary {
        norms,
        first_moment: abs_moment(density, 1.0),
        alpha,
        alpha_moment: abs_moment(density, alpha),
        log_moment,
        in_p_log: log_moment.is_finite(),
    })
}

/// Pushes every point through `map`; weights are untouched.
pub fn pushforward(cloud: &ParticleCloud, map: impl Fn(&[f64]) -> Vec<f64>) -> Result<ParticleCloud> {
    let mut points = Vec::with_capacity(cloud.points.len());
    let mut dim = None;
    for i in 0..cloud.len() {
        let y = map(cloud.point(i));
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::TransformDomain { index: i });
        }
        match dim {
            None => dim = Some(y.len()),
            Some(d) if d != y.len() => return Err(Error::InvalidMeasure("map changes output dimension".into())),
            _ => {}
        }
        points.extend(y);
    }
    Ok(ParticleCloud {
        dim: dim.unwrap_or(cloud.dim),
        points,
        weights: cloud.weights.clone(),
        time: cloud.time,
    })
}

/// Histogram estimate of the cloud's density on `grid`. Weight outside the box
/// is reported as leakage. With `bandwidth`, the histogram is mollified and the
/// mass pushed out of the box is added to the leakage.
pub fn density_from_cloud(cloud: &ParticleCloud, grid: &BoxGrid, bandwidth: Option<f64>) -> Result<GridDensity> {
    if cloud.dim() != grid.dim() {
        return Err(Error::InvalidGrid(format!(
            "cloud dimension {} vs grid dimension {}",
            cloud.dim(),
            grid.dim()
        )));
    }
    let vol = grid.cell_volume();
    let mut values = vec![0.0; grid.len()];
    let mut leakage = 0.0;
    for i in 0..cloud.len() {
        match grid.locate(cloud.point(i)) {
            Some(c) => values[c] += cloud.weights[i] / vol,
            None => leakage += cloud.weights[i],
        }
    }
    if let Some(eps) = bandwidth {
        let before: f64 = values.iter().sum::<f64>() * vol;
        let field = crate::coefficients::ScalarGrid::new(grid.clone(), values)?;
        values = crate::coefficients::mollify(&field, eps).values;
        let after: f64 = values.iter().sum::<f64>() * vol;
        leakage += (before - after).max(0.0);
    }
    Ok(GridDensity::new(grid.clone(), values, cloud.time)?.with_leakage(leakage))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn grid_validation() {
        assert!(BoxGrid::line(0.0, 1.0, 1).is_err());
        assert!(BoxGrid::line(1.0, 1.0, 4).is_err());
        assert!(BoxGrid::new(vec![0.0; 3], vec![1.0; 3], vec![4; 3]).is_err());
        let g = BoxGrid::new(vec![0.0, -1.0], vec![2.0, 1.0], vec![4, 8]).unwrap();
        assert_relative_eq!(g.cell_volume(), 0.5 * 0.25);
        assert_eq!(g.len(), 32);
        assert_eq!(g.locate(&[1.9, 0.99]), Some(g.flatten(3, 7)));
        assert_eq!(g.locate(&[2.1, 0.0]), None);
    }

    #[test]
    fn lr_norm_of_constant_density() {
        let g = BoxGrid::line(0.0, 4.0, 40).unwrap();
        let u = GridDensity::new(g, vec![0.25; 40], 0.0).unwrap();
        assert_relative_eq!(u.lr_norm(1.0).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(u.lr_norm(f64::INFINITY).unwrap(), 0.25);
        assert!(matches!(u.lr_norm(0.5), Err(Error::InvalidExponent(_))));
    }

    #[test]
    fn lr_norm_of_hat_function() {
        // int_0^2 (1 - |x - 1|)^2 dx = 2/3; midpoint quadrature error is O(h^2).
        let g = BoxGrid::line(0.0, 2.0, 20_000).unwrap();
        let vals = (0..g.len()).map(|i| 1.0 - (g.axis_center(0, i) - 1.0).abs()).collect();
        let u = GridDensity::new(g, vals, 0.0).unwrap();
        assert_relative_eq!(u.lr_norm(2.0).unwrap(), (2.0f64 / 3.0).sqrt(), epsilon = 1e-8);
    }

    #[test]
    fn log_moment_examples() {
        assert_eq!(log_moment(&ParticleCloud::dirac(vec![0.0])), 0.0);
        assert_relative_eq!(log_moment(&ParticleCloud::dirac(vec![0.6, 0.8])), 2f64.ln());
        let c = ParticleCloud::uniform(1, vec![-1.0, 0.0, 1.0], 0.0).unwrap();
        assert_relative_eq!(log_moment(&c), 2.0 / 3.0 * 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn pushforward_examples() {
        let c = ParticleCloud::uniform(1, vec![-1.0, 1.0], 0.0).unwrap();
        assert_eq!(pushforward(&c, |x| x.to_vec()).unwrap(), c);
        let shifted = pushforward(&c, |x| vec![x[0] + 2.5]).unwrap();
        assert_eq!(shifted.points(), &[1.5, 3.5]);
        assert_eq!(shifted.weights(), c.weights());
        let bent = pushforward(&c, |x| vec![x[0] + 0.5 * x[0].tanh()]).unwrap();
        assert_relative_eq!(bent.point(0)[0], -1.380797, epsilon = 1e-6);
        assert_relative_eq!(bent.point(1)[0], 1.380797, epsilon = 1e-6);
        assert!(matches!(
            pushforward(&c, |x| vec![1.0 / (x[0] - 1.0)]),
            Err(Error::TransformDomain { index: 1 })
        ));
    }

    #[test]
    fn histogram_of_single_particle() {
        let g = BoxGrid::line(0.0, 1.0, 10).unwrap();
        let c = ParticleCloud::dirac(vec![0.35]);
        let u = density_from_cloud(&c, &g, None).unwrap();
        assert_relative_eq!(u.values[3], 10.0);
        assert_eq!(u.values.iter().filter(|v| **v > 0.0).count(), 1);
        let outside = density_from_cloud(&ParticleCloud::dirac(vec![3.0]), &g, None).unwrap();
        assert_eq!(outside.leakage, 1.0);
        assert_eq!(outside.mass(), 0.0);
    }

    #[test]
    fn histogram_of_standard_normal_cloud() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let pts: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let c = ParticleCloud::uniform(1, pts, 0.0).unwrap();
        let g = BoxGrid::line(-6.0, 6.0, 60).unwrap();
        let u = density_from_cloud(&c, &g, None).unwrap();
        assert!((u.mass() + u.leakage - 1.0).abs() < 1e-9);
        // exact cell averages of the Gaussian density
        let h = g.spacing(0);
        let exact: f64 = (0..g.len())
            .map(|i| {
                let a = g.lower()[0] + i as f64 * h;
                let p = crate::stats::normal_cdf(a + h) - crate::stats::normal_cdf(a);
                (u.values[i] * h - p).abs()
            })
            .sum();
        assert!(exact < 0.02, "L1 error {exact}");
    }

    #[test]
    fn quantile_atoms_of_uniform_density() {
        let g = BoxGrid::line(0.0, 1.0, 10).unwrap();
        let u = GridDensity::new(g, vec![1.0; 10], 0.0).unwrap();
        let q = u.quantile_atoms(4).unwrap();
        assert_eq!(q.len(), 4);
        for (k, x) in q.points().iter().enumerate() {
            assert_relative_eq!(*x, (k as f64 + 0.5) / 4.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn csv_roundtrip_for_density() {
        let dir = tempfile::tempdir().unwrap();
        let g = BoxGrid::square(-1.0, 1.0, 4).unwrap();
        let u = GridDensity::gaussian(g, &[0.0, 0.0], 0.5).unwrap().with_leakage(0.0);
        let stem = dir.path().join("u");
        u.save(&stem).unwrap();
        let back = GridDensity::load(&stem).unwrap();
        assert_eq!(back.grid, u.grid);
        for (a, b) in back.values.iter().zip(&u.values) {
            assert_relative_eq!(a, b, max_relative = 1e-15);
        }
    }

    #[test]
    fn cloud_csv_reader_defaults_to_equal_weights() {
        let c = ParticleCloud::read_csv("x0,x1\n0,0\n1,1\n".as_bytes()).unwrap();
        assert_eq!(c.dim(), 2);
        assert_eq!(c.weights(), &[0.5, 0.5]);
        assert!(ParticleCloud::read_csv("x0,weight\n0,0.3\n1,0.3\n".as_bytes()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn lr_norm_monotone_on_unit_box(vals in prop::collection::vec(0.01f64..5.0, 8..40),
                                            r1 in 1.0f64..6.0, dr in 0.0f64..6.0) {
                let n = vals.len();
                let g = BoxGrid::line(0.0, 1.0, n).unwrap();
                let s: f64 = vals.iter().sum::<f64>() / n as f64;
                let u = GridDensity::new(g, vals.iter().map(|v| v / s).collect(), 0.0).unwrap();
                let a = u.lr_norm(r1).unwrap();
                let b = u.lr_norm(r1 + dr).unwrap();
                prop_assert!(a <= b * (1.0 + 1e-12));
                prop_assert!(b <= u.lr_norm(f64::INFINITY).unwrap() * (1.0 + 1e-12));
            }

            #[test]
            fn pushforward_preserves_weights_and_translates_log_moment(
                pts in prop::collection::vec(-5.0f64..5.0, 1..20), c in -3.0f64..3.0) {
                let cloud = ParticleCloud::uniform(1, pts.clone(), 0.0).unwrap();
                let moved = pushforward(&cloud, |x| vec![x[0] + c]).unwrap();
                prop_assert_eq!(moved.weights(), cloud.weights());
                let direct = ParticleCloud::uniform(1, pts.iter().map(|x| x + c).collect(), 0.0).unwrap();
                prop_assert_eq!(log_moment(&moved), log_moment(&direct));
            }

            #[test]
            fn histogram_mass_accounting(pts in prop::collection::vec(-3.0f64..3.0, 1..50)) {
                let cloud = ParticleCloud::uniform(1, pts, 0.0).unwrap();
                let g = BoxGrid::line(-2.0, 2.0, 16).unwrap();
                let u = density_from_cloud(&cloud, &g, None).unwrap();
                prop_assert!((u.mass() + u.leakage - 1.0).abs() < 1e-9);
            }
        }
    }
}
