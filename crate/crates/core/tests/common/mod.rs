//! Independent scalar oracles and random instance generators shared by the
//! integration tests.

#![allow(dead_code)]

use maskrank::{LabelMap, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Minimum total cost over every injection of columns into rows, together
/// with the lexicographically smallest optimal proposal sequence.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let n = cost.len();
    let g = cost.first().map_or(0, Vec::len);
    let mut best = (f64::INFINITY, Vec::new());
    let mut used = vec![false; n];
    let mut chosen = Vec::with_capacity(g);
    fn recurse(
        cost: &[Vec<f64>],
        col: usize,
        acc: f64,
        used: &mut [bool],
        chosen: &mut Vec<usize>,
        best: &mut (f64, Vec<usize>),
    ) {
        let g = cost[0].len();
        if col == g {
            // Rows are tried in ascending order, so the first strict
            // improvement is also the lexicographically smallest one.
            if acc < best.0 {
                *best = (acc, chosen.clone());
            }
            return;
        }
        for row in 0..cost.len() {
            if !used[row] {
                used[row] = true;
                chosen.push(row);
                recurse(cost, col + 1, acc + cost[row][col], used, chosen, best);
                chosen.pop();
                used[row] = false;
            }
        }
    }
    if g == 0 || n == 0 {
        return (0.0, Vec::new());
    }
    recurse(cost, 0, 0.0, &mut used, &mut chosen, &mut best);
    best
}

/// Per-pixel `argmax_c Σ_q softmax(R[:, q] / τ)[c] · M[q, pixel]` computed
/// with explicit loops.
pub fn inference_oracle(r: &Tensor, proposals: &Tensor, temperature: f64) -> Vec<u32> {
    let (c, n) = (r.shape()[0], r.shape()[1]);
    let hw = proposals.len() / n;
    let mut probs = vec![vec![0.0; n]; c];
    for q in 0..n {
        let mut m = f64::NEG_INFINITY;
        for k in 0..c {
            m = m.max(r.data()[k * n + q] / temperature);
        }
        let mut z = 0.0;
        for (k, row) in probs.iter_mut().enumerate() {
            let e = (r.data()[k * n + q] / temperature - m).exp();
            row[q] = e;
            z += e;
        }
        for row in probs.iter_mut() {
            row[q] /= z;
        }
    }
    let mut out = Vec::with_capacity(hw);
    for px in 0..hw {
        let mut best = (0u32, f64::NEG_INFINITY);
        for (k, row) in probs.iter().enumerate() {
            let mut s = 0.0;
            for (q, p) in row.iter().enumerate() {
                s += p * proposals.data()[q * hw + px];
            }
            if s > best.1 {
                best = (k as u32, s);
            }
        }
        out.push(best.0);
    }
    out
}

/// Per-class IoU counted pixel by pixel; `None` when a class is absent
/// from both maps.
pub fn iou_oracle(pred: &LabelMap, gt: &LabelMap, num_classes: usize, ignore: u32) -> Vec<Option<f64>> {
    (0..num_classes as u32)
        .map(|k| {
            let (mut inter, mut union) = (0u64, 0u64);
            for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
                if g == ignore {
                    continue;
                }
                if p == k && g == k {
                    inter += 1;
                }
                if p == k || g == k {
                    union += 1;
                }
            }
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect()
}

pub fn mean_oracle(values: &[Option<f64>], seen: &[bool], want: bool) -> Option<f64> {
    let picked: Vec<f64> = values
        .iter()
        .zip(seen)
        .filter(|(_, &s)| s == want)
        .filter_map(|(v, _)| *v)
        .collect();
    (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
}

pub fn random_label_map(rng: &mut impl Rng, h: usize, w: usize, classes: u32, ignore: Option<u32>) -> LabelMap {
    let labels = (0..h * w)
        .map(|_| match ignore {
            Some(i) if rng.gen_bool(0.1) => i,
            _ => rng.gen_range(0..classes),
        })
        .collect();
    LabelMap::new(h, w, labels).unwrap()
}

/// Central finite differences of `f` at `x`.
pub fn finite_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute error when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}
