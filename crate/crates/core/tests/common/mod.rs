#![allow(dead_code)]

use rand::Rng;

pub fn log_squared(x: &[f64], y: &[f64], delta: f64) -> f64 {
    let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (r2 / (delta * delta)).ln_1p()
}

pub fn log_linear(x: &[f64], y: &[f64], delta: f64) -> f64 {
    let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (r2.sqrt() / delta).ln_1p()
}

/// Minimum of `sum pi_ij c_ij` over the vertices of the transportation
/// polytope: every spanning tree of the bipartite graph gives at most one
/// vertex, found by peeling leaves.
pub fn vertex_enumeration(a: &[f64], b: &[f64], cost: &[f64]) -> f64 {
    let (m, n) = (a.len(), b.len());
    let edges = m * n;
    let k = m + n - 1;
    let mut best = f64::INFINITY;
    let mut choose = vec![0usize; k];
    fn next(choose: &mut [usize], edges: usize) -> bool {
        let k = choose.len();
        let mut i = k;
        while i > 0 {
            i -= 1;
            if choose[i] < edges - k + i {
                choose[i] += 1;
                for j in i + 1..k {
                    choose[j] = choose[j - 1] + 1;
                }
                return true;
            }
        }
        false
    }
    for (i, c) in choose.iter_mut().enumerate() {
        *c = i;
    }
    loop {
        if let Some(flow) = tree_flow(a, b, &choose, n) {
            let v: f64 = choose.iter().zip(&flow).map(|(&e, f)| f * cost[e]).sum();
            best = best.min(v);
        }
        if !next(&mut choose, edges) {
            break;
        }
    }
    best
}

fn tree_flow(a: &[f64], b: &[f64], edges: &[usize], n: usize) -> Option<Vec<f64>> {
    let m = a.len();
    let mut supply: Vec<f64> = a.iter().copied().chain(b.iter().copied()).collect();
    let ends = |e: usize| (e / n, m + e % n);
    let mut alive = vec![true; edges.len()];
    let mut flow = vec![0.0; edges.len()];
    for _ in 0..edges.len() {
        let mut degree = vec![0usize; m + n];
        for (k, &e) in edges.iter().enumerate() {
            if alive[k] {
                let (u, v) = ends(e);
                degree[u] += 1;
                degree[v] += 1;
            }
        }
        let leaf = (0..m + n).find(|&v| degree[v] == 1)?;
        let k = (0..edges.len()).find(|&k| {
            let (u, v) = ends(edges[k]);
            alive[k] && (u == leaf || v == leaf)
        })?;
        let (u, v) = ends(edges[k]);
        let f = supply[leaf];
        if f < -1e-12 {
            return None;
        }
        flow[k] = f.max(0.0);
        supply[u] -= f;
        supply[v] -= f;
        alive[k] = false;
    }
    if supply.iter().any(|s| s.abs() > 1e-9) {
        return None;
    }
    Some(flow)
}

/// `int_0^1 |F^-1(u) - G^-1(u)|^p du`, exact for atomic measures: both
/// quantile functions are constant between consecutive cumulative weights.
pub fn quantile_power_cost(xs: &[f64], wx: &[f64], ys: &[f64], wy: &[f64], p: f64) -> f64 {
    let sort = |v: &[f64], w: &[f64]| {
        let mut z: Vec<(f64, f64)> = v.iter().copied().zip(w.iter().copied()).collect();
        z.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        z
    };
    let (sx, sy) = (sort(xs, wx), sort(ys, wy));
    let cum = |s: &[(f64, f64)]| {
        let mut c = Vec::with_capacity(s.len());
        let mut acc = 0.0;
        for (_, w) in s {
            acc += w;
            c.push(acc);
        }
        c
    };
    let (cx, cy) = (cum(&sx), cum(&sy));
    let quantile = |s: &[(f64, f64)], c: &[f64], u: f64| {
        let k = c.iter().position(|&v| v >= u).unwrap_or(c.len() - 1);
        s[k].0
    };
    let mut breaks: Vec<f64> = cx.iter().chain(&cy).copied().collect();
    breaks.push(0.0);
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut total = 0.0;
    for w in breaks.windows(2) {
        let len = w[1] - w[0];
        if len > 0.0 {
            let u = 0.5 * (w[0] + w[1]);
            total += len * (quantile(&sx, &cx, u) - quantile(&sy, &cy, u)).abs().powf(p);
        }
    }
    total
}

pub fn random_weights<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}
