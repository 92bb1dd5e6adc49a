//! Primal transportation simplex on the bipartite row/column network.
//!
//! The basis is a spanning tree over `n + m` nodes (rows first, then
//! columns) with exactly `n + m - 1` basic cells, degenerate ones included.

use std::collections::VecDeque;

use crate::error::{Error, Result};

pub(crate) struct SimplexSolution {
    /// Dense `n x m` flows, row major.
    pub flow: Vec<f64>,
    pub row_potential: Vec<f64>,
    pub col_potential: Vec<f64>,
    pub iterations: usize,
}

struct Basis {
    n: usize,
    m: usize,
    cells: Vec<(usize, usize)>,
    flow: Vec<f64>,
    /// Incident basic cells per node.
    adj: Vec<Vec<usize>>,
}

impl Basis {
    fn node_row(i: usize) -> usize {
        i
    }

    fn node_col(&self, j: usize) -> usize {
        self.n + j
    }

    fn push(&mut self, i: usize, j: usize, x: f64) {
        let id = self.cells.len();
        self.cells.push((i, j));
        self.flow.push(x);
        self.adj[Self::node_row(i)].push(id);
        let c = self.node_col(j);
        self.adj[c].push(id);
    }

    fn other_end(&self, cell: usize, node: usize) -> usize {
        let (i, j) = self.cells[cell];
        if node == i {
            self.n + j
        } else {
            i
        }
    }

    /// Potentials with `u_0 = 0`, solving `u_i + v_j = c_ij` on basic cells.
    fn potentials(&self, cost: &[f64], u: &mut [f64], v: &mut [f64]) {
        let total = self.n + self.m;
        let mut seen = vec![false; total];
        let mut queue = VecDeque::with_capacity(total);
        u[0] = 0.0;
        seen[0] = true;
        queue.push_back(0usize);
        while let Some(node) = queue.pop_front() {
            for &cell in &self.adj[node] {
                let next = self.other_end(cell, node);
                if seen[next] {
                    continue;
                }
                seen[next] = true;
                let (i, j) = self.cells[cell];
                let c = cost[i * self.m + j];
                if next >= self.n {
                    v[j] = c - u[i];
                } else {
                    u[i] = c - v[j];
                }
                queue.push_back(next);
            }
        }
    }

    /// Basic cells on the tree path from row `i` to column `j`, in order.
    fn path(&self, i: usize, j: usize) -> Vec<usize> {
        let total = self.n + self.m;
        let mut via = vec![usize::MAX; total];
        let start = Self::node_row(i);
        let target = self.node_col(j);
        let mut queue = VecDeque::new();
        via[start] = usize::MAX - 1;
        queue.push_back(start);
        while let Some(node) = queue.pop_front() {
            if node == target {
                break;
            }
            for &cell in &self.adj[node] {
                let next = self.other_end(cell, node);
                if via[next] == usize::MAX {
                    via[next] = cell;
                    queue.push_back(next);
                }
            }
        }
        let mut cells = Vec::new();
        let mut node = target;
        while node != start {
            let cell = via[node];
            cells.push(cell);
            node = self.other_end(cell, node);
        }
        cells.reverse();
        cells
    }

    fn replace(&mut self, leaving: usize, i: usize, j: usize, x: f64) {
        let (li, lj) = self.cells[leaving];
        let rn = Self::node_row(li);
        self.adj[rn].retain(|&c| c != leaving);
        let cn = self.node_col(lj);
        self.adj[cn].retain(|&c| c != leaving);
        self.cells[leaving] = (i, j);
        self.flow[leaving] = x;
        self.adj[Self::node_row(i)].push(leaving);
        let c = self.node_col(j);
        self.adj[c].push(leaving);
    }
}

/// North-west corner start on rows/columns visited in the given orders.
fn initial_basis(a: &[f64], b: &[f64], row_order: &[usize], col_order: &[usize]) -> Basis {
    let (n, m) = (a.len(), b.len());
    let mut basis = Basis {
        n,
        m,
        cells: Vec::with_capacity(n + m - 1),
        flow: Vec::with_capacity(n + m - 1),
        adj: vec![Vec::new(); n + m],
    };
    let mut supply: Vec<f64> = a.to_vec();
    let mut demand: Vec<f64> = b.to_vec();
    let (mut r, mut c) = (0usize, 0usize);
    loop {
        let (i, j) = (row_order[r], col_order[c]);
        let x = supply[i].min(demand[j]).max(0.0);
        basis.push(i, j, x);
        supply[i] -= x;
        demand[j] -= x;
        if r == n - 1 && c == m - 1 {
            break;
        }
        if r == n - 1 {
            c += 1;
        } else if c == m - 1 || supply[i] <= demand[j] {
            r += 1;
        } else {
            c += 1;
        }
    }
    basis
}

pub(crate) fn solve(
    a: &[f64],
    b: &[f64],
    cost: &[f64],
    row_order: &[usize],
    col_order: &[usize],
    max_iterations: usize,
) -> Result<SimplexSolution> {
    let (n, m) = (a.len(), b.len());
    let scale = cost.iter().fold(1.0f64, |s, c| s.max(c.abs()));
    let tol = 1e-13 * scale;
    let mut basis = initial_basis(a, b, row_order, col_order);
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; m];
    let total = n * m;
    let block = (total / 8).max(64).min(total);
    let mut cursor = 0usize;
    let mut iterations = 0usize;

    loop {
        basis.potentials(cost, &mut u, &mut v);

        // block pricing: first block containing a negative reduced cost wins
        let mut entering = None;
        let mut best = -tol;
        let mut scanned = 0usize;
        while scanned < total {
            let end = (scanned + block).min(total);
            for k in scanned..end {
                let idx = (cursor + k) % total;
                let (i, j) = (idx / m, idx % m);
                let rc = cost[idx] - u[i] - v[j];
                if rc < best {
                    best = rc;
                    entering = Some((i, j));
                }
            }
            scanned = end;
            if entering.is_some() {
                cursor = (cursor + scanned) % total;
                break;
            }
        }
        let Some((ei, ej)) = entering else {
            break;
        };

        iterations += 1;
        if iterations > max_iterations {
            return Err(Error::ConvergenceFailure {
                iterations,
                marginal_error: 0.0,
                last_change: best,
            });
        }

        let path = basis.path(ei, ej);
        // path cells alternate -, +, -, ... starting next to the entering row
        let mut theta = f64::INFINITY;
        let mut leaving = usize::MAX;
        for (k, &cell) in path.iter().enumerate() {
            if k % 2 == 0 && basis.flow[cell] < theta {
                theta = basis.flow[cell];
                leaving = cell;
            }
        }
        for (k, &cell) in path.iter().enumerate() {
            if k % 2 == 0 {
                basis.flow[cell] -= theta;
            } else {
                basis.flow[cell] += theta;
            }
        }
        basis.replace(leaving, ei, ej, theta);
    }

    let mut flow = vec![0.0; total];
    for (k, &(i, j)) in basis.cells.iter().enumerate() {
        flow[i * m + j] += basis.flow[k].max(0.0);
    }
    Ok(SimplexSolution {
        flow,
        row_potential: u,
        col_potential: v,
        iterations,
    })
}
