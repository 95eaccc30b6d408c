//! Minimum-cost one-to-one matching of proposals to ground-truth entries.
//!
//! The solver is the shortest-augmenting-path form of Kuhn–Munkres with row
//! and column potentials, `O(G² · N)` for `G` ground truths and `N ≥ G`
//! proposals. Among equal-cost optima the result is the lexicographically
//! smallest proposal sequence when pairs are listed by ground-truth index.

use serde::{Deserialize, Serialize};

use crate::error::{param, shape, Result};
use crate::losses::{dice_value, focal_value, FocalParams};
use crate::tensor::Tensor;

/// `N × G` matrix of matching costs; proposals on rows, ground truths on columns.
///
/// Unlike [`Tensor`], a cost matrix may have zero columns (an image without
/// ground truth).
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        let (rows, cols) = values.dims2()?;
        Self::from_parts(rows, cols, values.into_data())
    }

    pub fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if cols > rows {
            return Err(shape(format!(
                "cost matrix has more ground truths ({cols}) than proposals ({rows})"
            )));
        }
        if data.len() != rows * cols {
            return Err(shape(format!(
                "{rows}x{cols} cost matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(param("cost matrix contains non-finite entries"));
        }
        Ok(Self { rows, cols, data })
    }

    /// A matrix with `rows` proposals and no ground truth.
    pub fn empty(rows: usize) -> Self {
        Self {
            rows,
            cols: 0,
            data: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, proposal: usize, gt: usize) -> f64 {
        self.data[proposal * self.cols + gt]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Elementwise sum of two cost matrices of the same shape.
    pub fn add(&self, other: &CostMatrix) -> Result<CostMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(shape(format!(
                "cannot add cost matrices {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Self::from_parts(self.rows, self.cols, data)
    }

    /// Same matrix with `k` added to every entry.
    pub fn shifted(&self, k: f64) -> Result<CostMatrix> {
        Self::from_parts(self.rows, self.cols, self.data.iter().map(|v| v + k).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(proposal, gt)` pairs sorted by gt index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn empty() -> Self {
        Self {
            pairs: Vec::new(),
            total_cost: 0.0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Proposal indices with a matched ground truth.
    pub fn matched_set(&self) -> Vec<usize> {
        let mut m: Vec<usize> = self.pairs.iter().map(|&(q, _)| q).collect();
        m.sort_unstable();
        m
    }

    /// Ground-truth index matched to each of `n` proposals.
    pub fn gt_of_proposal(&self, n: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n];
        for &(q, g) in &self.pairs {
            if q < n {
                out[q] = Some(g);
            }
        }
        out
    }
}

/// Solves the rectangular assignment problem on a dense row-major
/// `gts × props` matrix. Returns the proposal matched to each gt, plus the
/// optimal duals `(u, v)`.
fn solve(costs: &[f64], gts: usize, props: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; gts + 1];
    let mut v = vec![0.0; props + 1];
    // owner[j] = 1-based gt matched to proposal column j (0 = free).
    let mut owner = vec![0usize; props + 1];
    let mut way = vec![0usize; props + 1];
    let mut minv = vec![inf; props + 1];
    let mut used = vec![false; props + 1];

    for i in 1..=gts {
        owner[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = inf);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let row = &costs[(i0 - 1) * props..i0 * props];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=props {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=props {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assigned = vec![0usize; gts];
    for j in 1..=props {
        if owner[j] != 0 {
            assigned[owner[j] - 1] = j - 1;
        }
    }
    (assigned, u[1..].to_vec(), v[1..].to_vec())
}

/// Optimal cost of matching `gts` (in order) to the proposals in `avail`.
fn solve_subset(cost: &CostMatrix, gts: &[usize], avail: &[usize]) -> (Vec<usize>, f64) {
    if gts.is_empty() {
        return (Vec::new(), 0.0);
    }
    let mut dense = Vec::with_capacity(gts.len() * avail.len());
    for &g in gts {
        dense.extend(avail.iter().map(|&q| cost.get(q, g)));
    }
    let (assigned, _, _) = solve(&dense, gts.len(), avail.len());
    let props: Vec<usize> = assigned.iter().map(|&j| avail[j]).collect();
    let total = props.iter().zip(gts).map(|(&q, &g)| cost.get(q, g)).sum();
    (props, total)
}

/// Minimum-total-cost matching covering every ground-truth column.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    let n = cost.rows();
    let g = cost.cols();
    if g > n {
        return Err(shape(format!(
            "{g} ground truths cannot be matched to {n} proposals"
        )));
    }
    if g == 0 {
        return Ok(Assignment::empty());
    }

    let mut dense = Vec::with_capacity(g * n);
    for gi in 0..g {
        dense.extend((0..n).map(|q| cost.get(q, gi)));
    }
    let (mut current, u, v) = solve(&dense, g, n);
    let optimum: f64 = current.iter().enumerate().map(|(gi, &q)| cost.get(q, gi)).sum();

    let scale = 1.0 + cost.max_abs();
    let tight_tol = 1e-9 * scale;
    let total_tol = 1e-9 * scale * g as f64;

    // Lexicographic repair: an edge belongs to some optimum only if its reduced
    // cost under the optimal duals is zero, so only tight edges are tried.
    let mut fixed_cost = 0.0;
    for gi in 0..g {
        let taken: Vec<bool> = {
            let mut t = vec![false; n];
            current[..gi].iter().for_each(|&q| t[q] = true);
            t
        };
        for q in 0..current[gi] {
            if taken[q] || (cost.get(q, gi) - u[gi] - v[q]).abs() > tight_tol {
                continue;
            }
            let rest: Vec<usize> = (gi + 1..g).collect();
            let avail: Vec<usize> = (0..n).filter(|&p| !taken[p] && p != q).collect();
            let (sub, sub_cost) = solve_subset(cost, &rest, &avail);
            if fixed_cost + cost.get(q, gi) + sub_cost <= optimum + total_tol {
                current[gi] = q;
                current[gi + 1..].copy_from_slice(&sub);
                break;
            }
        }
        fixed_cost += cost.get(current[gi], gi);
    }

    let pairs: Vec<(usize, usize)> = current.iter().enumerate().map(|(gi, &q)| (q, gi)).collect();
    let total_cost = pairs.iter().map(|&(q, gi)| cost.get(q, gi)).sum();
    Ok(Assignment { pairs, total_cost })
}

/// Negated similarity: `cost[q][g] = -R[gt_labels[g]][q]`.
pub fn class_match_cost(similarity: &Tensor, gt_labels: &[usize]) -> Result<CostMatrix> {
    let (c, n) = similarity.dims2()?;
    if let Some(&bad) = gt_labels.iter().find(|&&l| l >= c) {
        return Err(param(format!("gt label {bad} out of range for {c} classes")));
    }
    let mut data = Vec::with_capacity(n * gt_labels.len());
    for q in 0..n {
        data.extend(gt_labels.iter().map(|&label| -similarity.get(label, q)));
    }
    CostMatrix::from_parts(n, gt_labels.len(), data)
}

/// Weights of the focal and DICE terms in the mask matching cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskCostWeights {
    pub focal: f64,
    pub dice: f64,
}

impl Default for MaskCostWeights {
    fn default() -> Self {
        Self {
            focal: 20.0,
            dice: 1.0,
        }
    }
}

/// `cost[q][g] = w_f · focal(M_q, gt_g) + w_d · dice(M_q, gt_g)`.
pub fn mask_match_cost(
    proposals: &Tensor,
    gt_masks: &Tensor,
    focal: FocalParams,
    dice_eps: f64,
    weights: MaskCostWeights,
) -> Result<CostMatrix> {
    let n = proposals.rows();
    let hw = proposals.cols();
    if gt_masks.cols() != hw {
        return Err(shape(format!(
            "proposals have {hw} pixels but gt masks have {}",
            gt_masks.cols()
        )));
    }
    let g = gt_masks.rows();
    let mut data = Vec::with_capacity(n * g);
    for q in 0..n {
        let m = proposals.row(q);
        for gi in 0..g {
            let t = gt_masks.row(gi);
            data.push(weights.focal * focal_value(m, t, focal) + weights.dice * dice_value(m, t, dice_eps));
        }
    }
    CostMatrix::from_parts(n, g, data)
}
