//! Training losses with hand-derived gradients.
//!
//! Every loss returns a [`LossReport`] holding the scalar value and the
//! gradient with respect to each differentiable input, keyed by input name
//! (`"R"` for similarity matrices, `"pred"` for masks, `"p"` for
//! distributions).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assignment::Assignment;
use crate::error::{param, shape, Result};
use crate::tensor::{log_softmax_unchecked, sigmoid, Tensor};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the
/// focal loss.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub value: f64,
    #[serde(default)]
    pub gradients: BTreeMap<String, Tensor>,
    /// Set when the loss had nothing to act on (no matches, no negatives).
    #[serde(default)]
    pub empty: bool,
}

impl LossReport {
    pub fn new(value: f64) -> Self {
        Self {
            value,
            gradients: BTreeMap::new(),
            empty: false,
        }
    }

    pub fn with_gradient(mut self, name: &str, grad: Tensor) -> Self {
        self.gradients.insert(name.to_string(), grad);
        self
    }

    pub fn absent(name: &str, shape: &[usize]) -> Self {
        Self {
            value: 0.0,
            gradients: BTreeMap::from([(name.to_string(), Tensor::zeros(shape))]),
            empty: true,
        }
    }

    pub fn gradient(&self, name: &str) -> Option<&Tensor> {
        self.gradients.get(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Class loss weight.
    pub alpha: f64,
    /// Mask loss weight.
    pub beta: f64,
    /// Ranking loss weight.
    pub gamma: f64,
    /// Mix between matched cross-entropy and unmatched KL terms.
    pub lambda: f64,
    /// Softmax temperature applied to similarities.
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 5.0,
            gamma: 1.0,
            lambda: 0.6,
            temperature: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(param(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(param(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        check_temperature(self.temperature)
    }
}

/// How KL terms of unmatched proposals are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BgReduce {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageLabelSets {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl ImageLabelSets {
    pub fn new(positives: Vec<usize>, negatives: Vec<usize>) -> Self {
        Self {
            positives,
            negatives,
        }
    }

    /// Positives as given, every other class of `0..num_classes` negative.
    pub fn with_complement(mut positives: Vec<usize>, num_classes: usize) -> Self {
        positives.sort_unstable();
        positives.dedup();
        let negatives = (0..num_classes).filter(|c| positives.binary_search(c).is_err()).collect();
        Self {
            positives,
            negatives,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let mut seen = vec![0u8; num_classes];
        for (set, bit) in [(&self.positives, 1u8), (&self.negatives, 2u8)] {
            for &c in set {
                if c >= num_classes {
                    return Err(param(format!("label {c} out of range for {num_classes} classes")));
                }
                if seen[c] & bit != 0 {
                    return Err(param(format!("label {c} listed twice")));
                }
                seen[c] |= bit;
            }
        }
        if let Some(c) = seen.iter().position(|&b| b == 3) {
            return Err(param(format!("label {c} is both positive and negative")));
        }
        Ok(())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(param(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

/// `(proposal, class)` targets obtained by resolving matched gt indices
/// through their class labels.
pub fn class_targets(assignment: &Assignment, gt_labels: &[usize]) -> Result<Vec<(usize, usize)>> {
    assignment
        .pairs
        .iter()
        .map(|&(q, g)| {
            gt_labels
                .get(g)
                .map(|&c| (q, c))
                .ok_or_else(|| param(format!("assignment references gt {g} without a label")))
        })
        .collect()
}

fn check_targets(c: usize, n: usize, targets: &[(usize, usize)]) -> Result<()> {
    let mut used = vec![false; n];
    for &(q, cls) in targets {
        if q >= n || cls >= c {
            return Err(param(format!(
                "target (proposal {q}, class {cls}) out of range for {c}x{n} similarities"
            )));
        }
        if used[q] {
            return Err(param(format!("proposal {q} has two targets")));
        }
        used[q] = true;
    }
    Ok(())
}

/// Cross-entropy of one proposal column; adds `scale · ∂/∂R` into `grad`.
fn ce_column(r: &Tensor, q: usize, class: usize, tau: f64, scale: f64, grad: &mut Tensor) -> f64 {
    let col = r.column(q);
    let logp = log_softmax_unchecked(&col, tau);
    for (c, lp) in logp.iter().enumerate() {
        let target = if c == class { 1.0 } else { 0.0 };
        let g = grad.get(c, q) + scale * (lp.exp() - target) / tau;
        grad.set(c, q, g);
    }
    -logp[class]
}

/// `KL(softmax(col/τ) ‖ uniform)` of one column; adds `scale · ∂/∂R` into `grad`.
fn kl_column(r: &Tensor, q: usize, tau: f64, scale: f64, grad: &mut Tensor) -> f64 {
    let col = r.column(q);
    let c = col.len() as f64;
    let logp = log_softmax_unchecked(&col, tau);
    let p: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
    let neg_entropy: f64 = p.iter().zip(&logp).map(|(pi, lp)| pi * lp).sum();
    for (ci, (pi, lp)) in p.iter().zip(&logp).enumerate() {
        let g = grad.get(ci, q) + scale * pi * (lp - neg_entropy) / tau;
        grad.set(ci, q, g);
    }
    (neg_entropy + c.ln()).max(0.0)
}

/// `Σ_q −log p_q(c_q)` over matched `(proposal, class)` targets.
pub fn ce_class_loss(r: &Tensor, targets: &[(usize, usize)], temperature: f64) -> Result<LossReport> {
    let (c, n) = r.dims2()?;
    check_temperature(temperature)?;
    check_targets(c, n, targets)?;
    if targets.is_empty() {
        return Ok(LossReport::absent("R", &[c, n]));
    }
    let mut grad = Tensor::zeros(&[c, n]);
    let value = targets
        .iter()
        .map(|&(q, cls)| ce_column(r, q, cls, temperature, 1.0, &mut grad))
        .sum();
    Ok(LossReport::new(value).with_gradient("R", grad))
}

/// Unchecked KL-to-uniform value and partial derivatives `ln(C·p) + 1`.
pub fn kl_to_uniform_raw(p: &[f64]) -> (f64, Vec<f64>) {
    let c = p.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for &pi in p {
        if pi > 0.0 {
            value += pi * (pi * c).ln();
        }
        grad.push((pi.max(f64::MIN_POSITIVE) * c).ln() + 1.0);
    }
    (value, grad)
}

/// `KL(p ‖ uniform) = Σ p ln(p·C)`; gradient is the partial derivative in `p`.
pub fn kl_uniform_loss(p: &[f64]) -> Result<LossReport> {
    if p.is_empty() {
        return Err(param("empty probability vector"));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(param("probabilities must be finite and non-negative"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(param(format!("probabilities sum to {total}, not 1")));
    }
    let (value, grad) = kl_to_uniform_raw(p);
    Ok(LossReport::new(value.max(0.0)).with_gradient("p", Tensor::vector(grad)?))
}

/// `λ Σ_{q∈H} CE_q + (1−λ) Σ_{q∉H} KL(p_q ‖ U)` with no background class.
pub fn bg_aware_class_loss(
    r: &Tensor,
    targets: &[(usize, usize)],
    weights: &LossWeights,
    reduce: BgReduce,
) -> Result<LossReport> {
    let (c, n) = r.dims2()?;
    check_temperature(weights.temperature)?;
    check_targets(c, n, targets)?;
    let tau = weights.temperature;
    let lambda = weights.lambda;

    let mut target_of = vec![None; n];
    for &(q, cls) in targets {
        target_of[q] = Some(cls);
    }
    let unmatched = target_of.iter().filter(|t| t.is_none()).count();
    let kl_scale = match reduce {
        BgReduce::Sum => 1.0 - lambda,
        BgReduce::Mean if unmatched > 0 => (1.0 - lambda) / unmatched as f64,
        BgReduce::Mean => 0.0,
    };

    let mut grad = Tensor::zeros(&[c, n]);
    let mut value = 0.0;
    for (q, target) in target_of.iter().enumerate() {
        match *target {
            Some(cls) => value += lambda * ce_column(r, q, cls, tau, lambda, &mut grad),
            None => value += kl_scale * kl_column(r, q, tau, kl_scale, &mut grad),
        }
    }
    Ok(LossReport::new(value).with_gradient("R", grad))
}

/// Cross-entropy over all proposals with unmatched ones assigned to the
/// background row `bg_class` of `r` (the trainable-background baseline).
pub fn ce_with_background(
    r: &Tensor,
    targets: &[(usize, usize)],
    bg_class: usize,
    temperature: f64,
) -> Result<LossReport> {
    let (c, n) = r.dims2()?;
    if bg_class >= c {
        return Err(param(format!("background row {bg_class} out of range for {c} rows")));
    }
    check_targets(c, n, targets)?;
    let mut full: Vec<(usize, usize)> = (0..n).map(|q| (q, bg_class)).collect();
    for &(q, cls) in targets {
        full[q].1 = cls;
    }
    ce_class_loss(r, &full, temperature)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Per-class maximum over proposals with lowest-index ties.
pub fn class_max(r: &Tensor) -> Vec<(f64, usize)> {
    (0..r.rows())
        .map(|c| {
            r.row(c)
                .iter()
                .enumerate()
                .fold((f64::NEG_INFINITY, 0), |best, (q, &v)| if v > best.0 { (v, q) } else { best })
        })
        .collect()
}

/// Pairwise soft-hinge ranking of max-over-proposal scores of positives
/// above negatives, averaged over positives.
pub fn ranking_loss_image(r: &Tensor, labels: &ImageLabelSets) -> Result<LossReport> {
    let (c, n) = r.dims2()?;
    labels.validate(c)?;
    if labels.negatives.is_empty() {
        return Ok(LossReport::absent("R", &[c, n]));
    }
    if labels.positives.is_empty() {
        return Err(param("ranking loss needs at least one positive label"));
    }
    let best = class_max(r);
    let inv_p = 1.0 / labels.positives.len() as f64;
    let mut grad = Tensor::zeros(&[c, n]);
    let mut value = 0.0;
    for &j in &labels.positives {
        let (rj, qj) = best[j];
        for &k in &labels.negatives {
            let (rk, qk) = best[k];
            let diff = rk - rj;
            value += softplus(diff);
            let s = sigmoid(diff) * inv_p;
            grad.set(k, qk, grad.get(k, qk) + s);
            grad.set(j, qj, grad.get(j, qj) - s);
        }
    }
    Ok(LossReport::new(value * inv_p).with_gradient("R", grad))
}

/// Mean of per-image ranking losses. Each image's gradients are scaled by
/// `1/B` and re-keyed as `"<name>/<image index>"`.
pub fn ranking_loss_batch(per_image: &[LossReport]) -> Result<LossReport> {
    if per_image.is_empty() {
        return Err(param("ranking loss over an empty batch"));
    }
    let inv_b = 1.0 / per_image.len() as f64;
    let mut out = LossReport::new(0.0);
    // Fixed summation order keeps the mean bit-reproducible.
    for (i, rep) in per_image.iter().enumerate() {
        out.value += rep.value;
        for (name, g) in &rep.gradients {
            out.gradients.insert(format!("{name}/{i}"), g.scaled(inv_b));
        }
    }
    out.value *= inv_b;
    out.empty = per_image.iter().all(|r| r.empty);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalParams {
    /// Focusing exponent, `≥ 0`.
    pub gamma: f64,
    /// Weight on positive pixels, in `(0, 1]`; negatives always weigh 1.
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 1.0,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(param(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(param(format!("focal alpha must lie in (0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Focal value and derivative in `p` for one pixel with soft target `g`.
fn focal_pixel(p: f64, g: f64, fp: FocalParams) -> (f64, f64) {
    let inside = p > PROB_CLAMP && p < 1.0 - PROB_CLAMP;
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let q = 1.0 - p;
    let gm = fp.gamma;
    let (ln_p, ln_q) = (p.ln(), q.ln());

    let pos = -fp.alpha * q.powf(gm) * ln_p;
    let neg = -p.powf(gm) * ln_q;
    let value = g * pos + (1.0 - g) * neg;
    if !inside {
        return (value, 0.0);
    }
    let dpos = fp.alpha * (gm * q.powf(gm - 1.0) * ln_p - q.powf(gm) / p);
    let dneg = -gm * p.powf(gm - 1.0) * ln_q + p.powf(gm) / q;
    (value, g * dpos + (1.0 - g) * dneg)
}

pub(crate) fn focal_value(pred: &[f64], gt: &[f64], fp: FocalParams) -> f64 {
    let sum: f64 = pred.iter().zip(gt).map(|(&p, &g)| focal_pixel(p, g, fp).0).sum();
    sum / pred.len() as f64
}

fn check_pair(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(shape(format!(
            "prediction shape {:?} differs from target shape {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if gt.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(param("mask targets must lie in [0, 1]"));
    }
    Ok(())
}

/// Mean per-pixel focal loss on probabilities.
pub fn focal_loss(pred: &Tensor, gt: &Tensor, params: FocalParams) -> Result<LossReport> {
    check_pair(pred, gt)?;
    params.validate()?;
    if pred.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(param("focal loss predictions must lie in [0, 1]"));
    }
    let inv = 1.0 / pred.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (v, d) = focal_pixel(p, g, params);
        value += v;
        grad.push(d * inv);
    }
    Ok(LossReport::new(value * inv).with_gradient("pred", Tensor::new(pred.shape().to_vec(), grad)?))
}

/// Focal loss on pre-sigmoid logits; gradient is with respect to the logits.
pub fn focal_loss_logits(logits: &Tensor, gt: &Tensor, params: FocalParams) -> Result<LossReport> {
    check_pair(logits, gt)?;
    params.validate()?;
    let inv = 1.0 / logits.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&x, &g) in logits.data().iter().zip(gt.data()) {
        let p = sigmoid(x);
        let (v, d) = focal_pixel(p, g, params);
        value += v;
        grad.push(d * p * (1.0 - p) * inv);
    }
    Ok(LossReport::new(value * inv).with_gradient("logits", Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Soft DICE terms: `(2Σpg + ε, Σp + Σg + ε)`.
fn dice_terms(pred: &[f64], gt: &[f64], eps: f64) -> (f64, f64) {
    let inter: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let sp: f64 = pred.iter().sum();
    let sg: f64 = gt.iter().sum();
    (2.0 * inter + eps, sp + sg + eps)
}

pub(crate) fn dice_value(pred: &[f64], gt: &[f64], eps: f64) -> f64 {
    let (num, den) = dice_terms(pred, gt, eps);
    if den <= 0.0 {
        return 0.0;
    }
    (1.0 - num / den).clamp(0.0, 1.0)
}

/// `1 − (2Σpg + ε) / (Σp + Σg + ε)` over the whole tensor.
pub fn dice_loss(pred: &Tensor, gt: &Tensor, eps: f64) -> Result<LossReport> {
    check_pair(pred, gt)?;
    if !eps.is_finite() || eps < 0.0 {
        return Err(param(format!("dice epsilon must be >= 0, got {eps}")));
    }
    if pred.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(param("dice loss predictions must lie in [0, 1]"));
    }
    let (num, den) = dice_terms(pred.data(), gt.data(), eps);
    if den <= 0.0 {
        return Ok(LossReport::absent("pred", pred.shape()));
    }
    let grad = gt
        .data()
        .iter()
        .map(|&g| -(2.0 * g * den - num) / (den * den))
        .collect();
    Ok(LossReport::new((1.0 - num / den).clamp(0.0, 1.0))
        .with_gradient("pred", Tensor::new(pred.shape().to_vec(), grad)?))
}

/// Settings of the class-agnostic mask loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskLossParams {
    pub focal: FocalParams,
    pub dice_eps: f64,
    pub focal_weight: f64,
    pub dice_weight: f64,
}

impl Default for MaskLossParams {
    fn default() -> Self {
        Self {
            focal: FocalParams::default(),
            dice_eps: 1.0,
            focal_weight: 20.0,
            dice_weight: 1.0,
        }
    }
}

/// Mean over matched pairs of `w_f · focal + w_d · dice`; unmatched
/// proposals are skipped. Gradient `"M"` is with respect to the `N × HW`
/// proposal probabilities.
pub fn mask_loss(
    proposals: &Tensor,
    gt_masks: &Tensor,
    assignment: &Assignment,
    params: &MaskLossParams,
) -> Result<LossReport> {
    let (n, hw) = proposals.dims2()?;
    let (g, hw2) = gt_masks.dims2()?;
    if hw != hw2 {
        return Err(shape(format!("proposals have {hw} pixels, gt masks {hw2}")));
    }
    if assignment.is_empty() {
        return Ok(LossReport::absent("M", &[n, hw]));
    }
    let inv = 1.0 / assignment.pairs.len() as f64;
    let mut grad = Tensor::zeros(&[n, hw]);
    let mut value = 0.0;
    for &(q, gi) in &assignment.pairs {
        if q >= n || gi >= g {
            return Err(param(format!("pair ({q}, {gi}) out of range")));
        }
        let pred = Tensor::new(vec![hw], proposals.row(q).to_vec())?;
        let gt = Tensor::new(vec![hw], gt_masks.row(gi).to_vec())?;
        let f = focal_loss(&pred, &gt, params.focal)?;
        let d = dice_loss(&pred, &gt, params.dice_eps)?;
        value += inv * (params.focal_weight * f.value + params.dice_weight * d.value);
        let row = grad.row_mut(q);
        for (slot, name_rep) in [(params.focal_weight, &f), (params.dice_weight, &d)] {
            if let Some(gr) = name_rep.gradient("pred") {
                for (o, v) in row.iter_mut().zip(gr.data()) {
                    *o += inv * slot * v;
                }
            }
        }
    }
    Ok(LossReport::new(value).with_gradient("M", grad))
}

/// `α · class + β · mask + γ · rank`, with gradients summed per input name.
pub fn total_loss(
    class: Option<&LossReport>,
    mask: Option<&LossReport>,
    rank: Option<&LossReport>,
    weights: &LossWeights,
) -> Result<LossReport> {
    let mut out = LossReport::new(0.0);
    out.empty = true;
    for (rep, w) in [(class, weights.alpha), (mask, weights.beta), (rank, weights.gamma)] {
        let Some(rep) = rep else { continue };
        out.value += w * rep.value;
        out.empty &= rep.empty;
        for (name, g) in &rep.gradients {
            match out.gradients.get_mut(name) {
                Some(acc) => acc.axpy(w, g)?,
                None => {
                    out.gradients.insert(name.clone(), g.scaled(w));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn fd_matrix(r: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-5;
        let mut g = Tensor::zeros(r.shape());
        for i in 0..r.len() {
            let mut a = r.clone();
            a.data_mut()[i] += h;
            let mut b = r.clone();
            b.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&a) - f(&b)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let mut d = a.clone();
        d.axpy(-1.0, b).unwrap();
        d.norm() / (a.norm() + b.norm()).max(1e-12)
    }

    #[test]
    fn ce_examples() {
        let r = Tensor::from_rows(&[[0.3], [0.3], [0.3], [0.3]]).unwrap();
        let rep = ce_class_loss(&r, &[(0, 2)], 0.1).unwrap();
        assert!(close(rep.value, 4f64.ln(), 1e-12));

        let r = Tensor::from_rows(&[[1.0], [-1.0]]).unwrap();
        let rep = ce_class_loss(&r, &[(0, 0)], 1.0).unwrap();
        assert!(close(rep.value, 0.12693, 1e-5));
        let fd = fd_matrix(&r, |x| ce_class_loss(x, &[(0, 0)], 1.0).unwrap().value);
        assert!(rel_err(rep.gradient("R").unwrap(), &fd) < 1e-4);
    }

    #[test]
    fn ce_empty_assignment_is_flagged() {
        let r = Tensor::zeros(&[3, 2]);
        let rep = ce_class_loss(&r, &[], 0.1).unwrap();
        assert!(rep.empty);
        assert_eq!(rep.value, 0.0);
        assert_eq!(rep.gradient("R").unwrap().shape(), &[3, 2]);
    }

    #[test]
    fn ce_rejects_bad_targets() {
        let r = Tensor::zeros(&[3, 2]);
        assert!(ce_class_loss(&r, &[(2, 0)], 0.1).is_err());
        assert!(ce_class_loss(&r, &[(0, 3)], 0.1).is_err());
        assert!(ce_class_loss(&r, &[(0, 0), (0, 1)], 0.1).is_err());
        assert!(ce_class_loss(&r, &[(0, 0)], 0.0).is_err());
    }

    #[test]
    fn kl_examples() {
        assert!(close(kl_uniform_loss(&[0.25; 4]).unwrap().value, 0.0, 1e-15));
        assert!(close(kl_uniform_loss(&[1.0, 0.0]).unwrap().value, 2f64.ln(), 1e-12));
        let v = kl_uniform_loss(&[0.75, 0.25]).unwrap().value;
        assert!(close(v, 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln(), 1e-15));
        assert!(close(v, 0.13081, 1e-5));
        assert!(kl_uniform_loss(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn bg_aware_composition() {
        // Column 0 matched as in the CE example; column 1 has p = [0.75, 0.25].
        let x = 3f64.ln();
        let r = Tensor::from_rows(&[[1.0, x], [-1.0, 0.0]]).unwrap();
        let w = LossWeights {
            lambda: 0.6,
            temperature: 1.0,
            ..LossWeights::default()
        };
        let rep = bg_aware_class_loss(&r, &[(0, 0)], &w, BgReduce::Sum).unwrap();
        let expected = 0.6 * (1.0 + (-2f64).exp()).ln() + 0.4 * (0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln());
        assert!(close(rep.value, expected, 1e-12));
        assert!(close(rep.value, 0.12848, 1e-5));
    }

    #[test]
    fn bg_aware_reductions() {
        let r = Tensor::from_rows(&[[0.2, 0.2, 0.9], [0.2, 0.2, -0.3]]).unwrap();
        let w = LossWeights::default();
        let all_uniform = bg_aware_class_loss(&r, &[(2, 0)], &w, BgReduce::Sum).unwrap();
        let ce = ce_class_loss(&r, &[(2, 0)], w.temperature).unwrap();
        assert!(close(all_uniform.value, w.lambda * ce.value, 1e-15));

        let full = bg_aware_class_loss(&r, &[(0, 0), (1, 1), (2, 0)], &w, BgReduce::Sum).unwrap();
        let ce = ce_class_loss(&r, &[(0, 0), (1, 1), (2, 0)], w.temperature).unwrap();
        assert!(close(full.value, w.lambda * ce.value, 1e-12));

        let r = Tensor::from_rows(&[[0.9, 0.1, 0.4], [0.1, 0.5, -0.2]]).unwrap();
        let s = bg_aware_class_loss(&r, &[(0, 0)], &w, BgReduce::Sum).unwrap();
        let m = bg_aware_class_loss(&r, &[(0, 0)], &w, BgReduce::Mean).unwrap();
        let ce = ce_class_loss(&r, &[(0, 0)], w.temperature).unwrap().value * w.lambda;
        assert!(close(m.value - ce, (s.value - ce) / 2.0, 1e-12));
        let fd = fd_matrix(&r, |x| bg_aware_class_loss(x, &[(0, 0)], &w, BgReduce::Mean).unwrap().value);
        assert!(rel_err(m.gradient("R").unwrap(), &fd) < 1e-4);
    }

    #[test]
    fn background_baseline_targets_every_proposal() {
        let r = Tensor::from_rows(&[[0.9, 0.1], [0.2, 0.3], [0.0, 0.8]]).unwrap();
        let rep = ce_with_background(&r, &[(0, 0)], 2, 0.1).unwrap();
        let manual = ce_class_loss(&r, &[(0, 0), (1, 2)], 0.1).unwrap();
        assert_eq!(rep.value, manual.value);
    }

    #[test]
    fn ranking_examples() {
        let labels = ImageLabelSets::new(vec![0], vec![1]);
        let r = Tensor::from_rows(&[[0.4, -0.1], [0.2, 0.4]]).unwrap();
        assert!(close(ranking_loss_image(&r, &labels).unwrap().value, 2f64.ln(), 1e-15));

        let r = Tensor::from_rows(&[[1.0, -0.5], [-1.0, -2.0]]).unwrap();
        assert!(close(ranking_loss_image(&r, &labels).unwrap().value, 0.12693, 1e-5));

        let labels = ImageLabelSets::new(vec![0, 1], vec![2]);
        let r = Tensor::from_rows(&[[1.0], [0.0], [0.0]]).unwrap();
        let v = ranking_loss_image(&r, &labels).unwrap().value;
        assert!(close(v, 0.5 * ((1.0 + (-1f64).exp()).ln() + 2f64.ln()), 1e-15));
        assert!(close(v, 0.50320, 1e-5));
    }

    #[test]
    fn ranking_gradient_routes_through_argmax() {
        let labels = ImageLabelSets::new(vec![0], vec![1]);
        let r = Tensor::from_rows(&[[0.5, 0.5, 0.1], [0.2, 0.7, 0.7]]).unwrap();
        let g = ranking_loss_image(&r, &labels).unwrap().gradients["R"].clone();
        assert!(g.get(0, 0) < 0.0 && g.get(0, 1) == 0.0);
        assert!(g.get(1, 1) > 0.0 && g.get(1, 2) == 0.0);
    }

    #[test]
    fn ranking_label_validation() {
        let r = Tensor::zeros(&[3, 2]);
        assert!(ranking_loss_image(&r, &ImageLabelSets::new(vec![], vec![1])).is_err());
        assert!(ranking_loss_image(&r, &ImageLabelSets::new(vec![1], vec![1])).is_err());
        assert!(ranking_loss_image(&r, &ImageLabelSets::new(vec![3], vec![])).is_err());
        let rep = ranking_loss_image(&r, &ImageLabelSets::new(vec![1], vec![])).unwrap();
        assert!(rep.empty && rep.value == 0.0);
    }

    #[test]
    fn ranking_batch_mean() {
        let reps: Vec<LossReport> = [0.1, 0.2, 0.6].iter().map(|&v| LossReport::new(v)).collect();
        assert!(close(ranking_loss_batch(&reps).unwrap().value, 0.3, 1e-15));
        let two = ranking_loss_batch(&reps[..2]).unwrap().value;
        assert!(close(two, 0.15, 1e-15));
        assert!(ranking_loss_batch(&[]).is_err());

        let single = LossReport::new(0.4).with_gradient("R", Tensor::filled(&[2, 2], 0.5));
        let b = ranking_loss_batch(std::slice::from_ref(&single)).unwrap();
        assert_eq!(b.value, single.value);
        assert_eq!(b.gradients["R/0"], single.gradients["R"]);
    }

    #[test]
    fn focal_examples() {
        let pred = Tensor::vector(vec![1.0, 0.0, 1.0]).unwrap();
        let gt = Tensor::vector(vec![1.0, 0.0, 1.0]).unwrap();
        assert!(focal_loss(&pred, &gt, FocalParams::default()).unwrap().value < 1e-5);

        let p = Tensor::vector(vec![0.5]).unwrap();
        let g = Tensor::vector(vec![1.0]).unwrap();
        let v = focal_loss(&p, &g, FocalParams { gamma: 2.0, alpha: 1.0 }).unwrap().value;
        assert!(close(v, 0.25 * 2f64.ln(), 1e-15));
        assert!(close(v, 0.17329, 1e-5));

        assert!(focal_loss(&p, &Tensor::vector(vec![1.0, 0.0]).unwrap(), FocalParams::default()).is_err());
    }

    #[test]
    fn focal_logits_matches_probability_form() {
        let x = Tensor::vector(vec![-1.3, 0.2, 2.5, -0.1]).unwrap();
        let g = Tensor::vector(vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let p = crate::tensor::sigmoid_map(&x).unwrap();
        let a = focal_loss_logits(&x, &g, FocalParams::default()).unwrap();
        let b = focal_loss(&p, &g, FocalParams::default()).unwrap();
        assert!(close(a.value, b.value, 1e-14));
        let fd = fd_matrix(&x, |t| focal_loss_logits(t, &g, FocalParams::default()).unwrap().value);
        assert!(rel_err(a.gradient("logits").unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn dice_examples() {
        let p = Tensor::vector(vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let g = Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(close(dice_loss(&p, &g, 0.0).unwrap().value, 1.0 - 2.0 / 3.0, 1e-15));

        let big = Tensor::filled(&[1200], 1.0);
        assert!(dice_loss(&big, &big, 1.0).unwrap().value < 1e-3);

        let mut a = vec![0.0; 2000];
        a[..1000].iter_mut().for_each(|v| *v = 1.0);
        let b: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        let v = dice_loss(&Tensor::vector(a).unwrap(), &Tensor::vector(b).unwrap(), 1.0).unwrap().value;
        assert!(v > 0.999);
    }

    #[test]
    fn mask_loss_skips_unmatched() {
        let props = Tensor::from_rows(&[[0.9, 0.1], [0.3, 0.6], [0.5, 0.5]]).unwrap();
        let gt = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let a = Assignment {
            pairs: vec![(0, 0)],
            total_cost: 0.0,
        };
        let rep = mask_loss(&props, &gt, &a, &MaskLossParams::default()).unwrap();
        let g = rep.gradient("M").unwrap();
        assert!(g.row(1).iter().chain(g.row(2)).all(|v| *v == 0.0));
        let fd = fd_matrix(&props, |m| mask_loss(m, &gt, &a, &MaskLossParams::default()).unwrap().value);
        assert!(rel_err(g, &fd) < 1e-5);
    }

    #[test]
    fn total_weighted_sum() {
        let w = LossWeights::default();
        let (c, m, r) = (LossReport::new(0.1), LossReport::new(0.2), LossReport::new(0.3));
        let t = total_loss(Some(&c), Some(&m), Some(&r), &w).unwrap();
        assert!(close(t.value, 1.5, 1e-12));

        let g = Tensor::filled(&[2, 2], 1.0);
        let c = LossReport::new(0.5).with_gradient("R", g.clone());
        let r = LossReport::new(0.25).with_gradient("R", g.clone());
        let t = total_loss(Some(&c), None, Some(&r), &w).unwrap();
        assert!(t.gradients["R"].data().iter().all(|v| *v == 3.0));

        let zero = total_loss(None, None, None, &w).unwrap();
        assert_eq!(zero.value, 0.0);
        assert!(zero.gradients.is_empty());
    }
}
