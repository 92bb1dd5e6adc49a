use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Check, ScenarioConfig};
use crate::coefficients::{
    jabin_kernel_integral, maximal_function, pointwise_sobolev_check, random_test_field, ScalarGrid,
};
use crate::error::Result;
use crate::measures::BoxGrid;
use crate::stability::{Constants, ScenarioRun, TheoremConstants, TheoremTag};

const FAMILY: [&str; 6] = [
    include_str!("../../data/calibration/cal-step-1d.json"),
    include_str!("../../data/calibration/cal-rotation-2d.json"),
    include_str!("../../data/calibration/cal-cusp-1d.json"),
    include_str!("../../data/calibration/cal-sine-1d.json"),
    include_str!("../../data/calibration/cal-sigma-1d.json"),
    include_str!("../../data/calibration/cal-singular-1d.json"),
];

pub const MAXIMAL_EXPONENTS: [f64; 3] = [1.5, 2.0, 4.0];

/// Held-out scenarios, disjoint from the regression suite.
pub fn calibration_family() -> Vec<ScenarioConfig> {
    FAMILY
        .iter()
        .map(|raw| ScenarioConfig::parse(raw).expect("calibration configs are valid"))
        .collect()
}

/// A frozen constant: twice the worst requirement, never below one.
fn freeze(needed: f64) -> f64 {
    (2.0 * needed).max(1.0)
}

fn random_pairs(n: usize, len: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    (0..n)
        .map(|_| (rng.random_range(0..len), rng.random_range(0..len)))
        .collect()
}

fn smooth_family(d: usize) -> Vec<ScalarGrid> {
    let pi = std::f64::consts::PI;
    if d == 1 {
        let g = BoxGrid::line(-pi, pi, 400).expect("grid");
        vec![
            ScalarGrid::from_fn(&g, |x| (2.0 * x[0]).sin() + 0.3 * x[0] * x[0]),
            ScalarGrid::from_fn(&g, |x| (-x[0] * x[0]).exp() * (3.0 * x[0]).cos()),
            ScalarGrid::from_fn(&g, |x| (4.0 * x[0]).tanh()),
        ]
    } else {
        let g = BoxGrid::square(-pi, pi, 64).expect("grid");
        vec![
            ScalarGrid::from_fn(&g, |x| x[0].sin() * (2.0 * x[1]).cos()),
            ScalarGrid::from_fn(&g, |x| (-(x[0] * x[0] + x[1] * x[1])).exp()),
            ScalarGrid::from_fn(&g, |x| (3.0 * x[0] + x[1]).tanh()),
        ]
    }
}

/// Maximal-inequality grids used for calibration and the strong-type suites.
pub fn maximal_grid(d: usize) -> BoxGrid {
    if d == 1 {
        BoxGrid::line(-1.0, 1.0, 256).expect("grid")
    } else {
        BoxGrid::square(-1.0, 1.0, 32).expect("grid")
    }
}

pub fn calibrate(seed: u64) -> Result<Constants> {
    let mut needed = BTreeMap::new();
    let mut sobolev_pointwise = BTreeMap::new();
    let mut maximal_strong = BTreeMap::new();
    let mut kernel_integral = BTreeMap::new();
    for d in [1usize, 2] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (d as u64) << 8);
        let mut worst: f64 = 0.0;
        for f in smooth_family(d) {
            let pairs = random_pairs(1000, f.grid.len(), &mut rng);
            worst = worst.max(pointwise_sobolev_check(&f, &pairs, f64::INFINITY).max_ratio);
        }
        needed.insert(format!("sobolev_pointwise_{d}"), worst);
        sobolev_pointwise.insert(d.to_string(), freeze(worst));

        let grid = maximal_grid(d);
        let fields: Vec<(ScalarGrid, ScalarGrid)> = (0..50)
            .map(|_| {
                let f = random_test_field(&grid, &mut rng);
                let m = maximal_function(&f);
                (f, m)
            })
            .collect();
        let mut by_p = BTreeMap::new();
        for p in MAXIMAL_EXPONENTS {
            let mut worst: f64 = 0.0;
            for (f, m) in &fields {
                let nf = f.lp_norm(p)?;
                if nf > 0.0 {
                    worst = worst.max(m.lp_norm(p)? / nf);
                }
            }
            needed.insert(format!("maximal_strong_{d}_{p}"), worst);
            by_p.insert(p.to_string(), freeze(worst));
        }
        maximal_strong.insert(d.to_string(), by_p);

        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = crate::coefficients::distance(&x, &y);
            if r > 0.0 {
                worst = worst.max(jabin_kernel_integral(&x, &y)? / r);
            }
        }
        // exact up to quadrature: 2 in one dimension, 4 in two
        kernel_integral.insert(d.to_string(), worst);
    }

    let mut theorem_needed: BTreeMap<&str, f64> = BTreeMap::new();
    let unit = Constants {
        schema: 1,
        seed,
        sobolev_pointwise: sobolev_pointwise.clone(),
        maximal_strong: maximal_strong.clone(),
        kernel_integral: kernel_integral.clone(),
        theorem: TheoremConstants::uniform(1.0),
        needed: BTreeMap::new(),
    };
    for (k, mut cfg) in calibration_family().into_iter().enumerate() {
        cfg.seed = seed.wrapping_add(k as u64);
        let scenario = cfg.scenario(Path::new("."))?;
        let run = ScenarioRun::prepare(&scenario)?;
        let delta = if cfg.deltas.is_empty() {
            vec![scenario.dynamical_delta()?]
        } else {
            cfg.deltas.clone()
        };
        for check in cfg.parsed_checks()? {
            let Check::Bound(tag) = check else { continue };
            let params = if tag == TheoremTag::W2 { &cfg.alphas } else { &delta };
            for &param in params {
                let r = run.check(tag, param, &unit)?;
                log::info!(
                    "calibration {} {} param {param}: needed {:?}",
                    cfg.name,
                    tag.name(),
                    r.needed_constant
                );
                if let Some(n) = r.needed_constant {
                    let e = theorem_needed.entry(tag.name()).or_insert(0.0);
                    *e = e.max(n);
                }
            }
        }
    }
    let get = |name: &str| theorem_needed.get(name).copied().unwrap_or(0.0);
    for (name, v) in &theorem_needed {
        needed.insert(format!("theorem_{name}"), *v);
    }
    let theorem = TheoremConstants {
        sobolev: freeze(get("sobolev")),
        w11: freeze(get("w11")),
        mixed_c1: freeze(get("mixed")),
        mixed_c2: freeze(get("mixed")),
        lps_c1: freeze(get("lps")),
        lps_c2: freeze(get("lps")),
        w2_alpha: freeze(get("w2")),
    };
    Ok(Constants {
        schema: 1,
        seed,
        sobolev_pointwise,
        maximal_strong,
        kernel_integral,
        theorem,
        needed,
    })
}
