//! Exact linear assignment between equal-size point sets.
//!
//! Shortest augmenting path with dual potentials (Jonker-Volgenant / Crouse
//! formulation), `O(B^3)` worst case. Used for the mini-batch coupling during
//! training and for the empirical W1 metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingPlan {
    /// Source row `i` is paired with target row `permutation[i]`.
    pub permutation: Vec<usize>,
    pub total_cost: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroundCost {
    SquaredEuclidean,
    Euclidean,
}

const NONE: usize = usize::MAX;

/// Minimum-cost perfect matching for a square, finite, nonnegative cost matrix.
pub fn solve_assignment(cost: &Tensor) -> Result<CouplingPlan> {
    match cost.shape() {
        [r, c] if r == c => solve_assignment_flat(*r, cost.data()),
        s => Err(Error::shape("solve_assignment", format!("cost matrix must be square, got {s:?}"))),
    }
}

/// As [`solve_assignment`] on a row-major `n x n` slice.
pub fn solve_assignment_flat(n: usize, cost: &[f64]) -> Result<CouplingPlan> {
    if cost.len() != n * n {
        return Err(Error::shape(
            "solve_assignment",
            format!("{} entries for a {n} x {n} matrix", cost.len()),
        ));
    }
    if let Some(bad) = cost.iter().find(|c| !c.is_finite() || **c < 0.0) {
        return Err(Error::invalid(format!(
            "assignment costs must be finite and nonnegative, found {bad}"
        )));
    }
    if n == 0 {
        return Ok(CouplingPlan {
            permutation: vec![],
            total_cost: 0.0,
        });
    }

    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut col4row = vec![NONE; n];
    let mut row4col = vec![NONE; n];
    let mut ws = Workspace::new(n);

    for cur_row in 0..n {
        let (sink, min_val) = ws.augmenting_path(n, cost, &u, &v, &row4col, cur_row);
        debug_assert_ne!(sink, NONE, "dense finite matrix always admits a matching");

        u[cur_row] += min_val;
        for i in 0..n {
            if ws.sr[i] && i != cur_row {
                u[i] += min_val - ws.spc[col4row[i]];
            }
        }
        for j in 0..n {
            if ws.sc[j] {
                v[j] -= min_val - ws.spc[j];
            }
        }

        let mut j = sink;
        loop {
            let i = ws.path[j];
            row4col[j] = i;
            std::mem::swap(&mut col4row[i], &mut j);
            if i == cur_row {
                break;
            }
        }
    }

    let total_cost = col4row
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    Ok(CouplingPlan {
        permutation: col4row,
        total_cost,
    })
}

struct Workspace {
    spc: Vec<f64>,
    path: Vec<usize>,
    sr: Vec<bool>,
    sc: Vec<bool>,
    remaining: Vec<usize>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Self {
            spc: vec![f64::INFINITY; n],
            path: vec![NONE; n],
            sr: vec![false; n],
            sc: vec![false; n],
            remaining: vec![0; n],
        }
    }

    fn augmenting_path(
        &mut self,
        n: usize,
        cost: &[f64],
        u: &[f64],
        v: &[f64],
        row4col: &[usize],
        start_row: usize,
    ) -> (usize, f64) {
        let mut min_val = 0.0;
        let mut num_remaining = n;
        // Reverse fill so that ties resolve to the lowest column index first
        // (a constant matrix yields the identity).
        for (it, r) in self.remaining.iter_mut().enumerate() {
            *r = n - it - 1;
        }
        self.sr.fill(false);
        self.sc.fill(false);
        self.spc.fill(f64::INFINITY);

        let mut i = start_row;
        let mut sink = NONE;
        while sink == NONE {
            let mut index = NONE;
            let mut lowest = f64::INFINITY;
            self.sr[i] = true;
            let row = &cost[i * n..(i + 1) * n];
            for it in 0..num_remaining {
                let j = self.remaining[it];
                let r = min_val + row[j] - u[i] - v[j];
                if r < self.spc[j] {
                    self.path[j] = i;
                    self.spc[j] = r;
                }
                if self.spc[j] < lowest || (self.spc[j] == lowest && row4col[j] == NONE) {
                    lowest = self.spc[j];
                    index = it;
                }
            }
            min_val = lowest;
            if index == NONE {
                return (NONE, min_val);
            }
            let j = self.remaining[index];
            if row4col[j] == NONE {
                sink = j;
            } else {
                i = row4col[j];
            }
            self.sc[j] = true;
            num_remaining -= 1;
            self.remaining[index] = self.remaining[num_remaining];
        }
        (sink, min_val)
    }
}

/// Row-major pairwise ground-cost matrix between two batches.
pub fn cost_matrix(x0: &Tensor, x1: &Tensor, kind: GroundCost) -> Result<Vec<f64>> {
    if x0.rows() != x1.rows() || x0.cols() != x1.cols() {
        return Err(Error::shape(
            "ot_pairs",
            format!("batches differ: {:?} vs {:?}", x0.shape(), x1.shape()),
        ));
    }
    let n = x0.rows();
    let mut c = Vec::with_capacity(n * n);
    for a in x0.iter_rows() {
        for b in x1.iter_rows() {
            let sq: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
            c.push(match kind {
                GroundCost::SquaredEuclidean => sq,
                GroundCost::Euclidean => sq.sqrt(),
            });
        }
    }
    Ok(c)
}

/// Optimal pairing of `x0` rows to `x1` rows under the given ground cost.
pub fn ot_pairs(x0: &Tensor, x1: &Tensor, kind: GroundCost) -> Result<CouplingPlan> {
    let c = cost_matrix(x0, x1, kind)?;
    solve_assignment_flat(x0.rows(), &c)
}
