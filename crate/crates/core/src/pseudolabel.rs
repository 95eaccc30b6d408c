//! Image-level pseudo labels for unseen classes from per-proposal image
//! embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{param, shape, Error, Result};
use crate::tensor::{cosine_sim, l2_norm, softmax_temp, Tensor, NORM_EPS};

/// Inclusive pixel box, `x` along width and `y` along height.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Tightest box around the positive (`> 0.5`) pixels of an `H × W` mask.
pub fn mask_to_bbox(mask: &Tensor) -> Result<BBox> {
    let (h, w) = mask.dims2()?;
    let mut bbox: Option<BBox> = None;
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) <= 0.5 {
                continue;
            }
            bbox = Some(match bbox {
                None => BBox { x0: x, y0: y, x1: x, y1: y },
                Some(b) => BBox {
                    x0: b.x0.min(x),
                    y0: b.y0.min(y),
                    x1: b.x1.max(x),
                    y1: b.y1.max(y),
                },
            });
        }
    }
    bbox.ok_or_else(|| Error::Degenerate("mask has no positive pixel".into()))
}

/// Unit-norm image embeddings of the proposals of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalEmbeddings {
    values: Tensor,
    /// One box per row, or empty when provenance is unknown.
    boxes: Vec<BBox>,
}

impl ProposalEmbeddings {
    pub fn new(values: Tensor, boxes: Vec<BBox>) -> Result<Self> {
        let (n, _) = values.dims2()?;
        for i in 0..n {
            let norm = l2_norm(values.row(i));
            if (norm - 1.0).abs() > 1e-6 {
                return Err(param(format!("embedding row {i} has norm {norm}, expected 1")));
            }
        }
        if !boxes.is_empty() && boxes.len() != n {
            return Err(shape(format!("{n} embeddings but {} boxes", boxes.len())));
        }
        if let Some(b) = boxes.iter().find(|b| b.x0 > b.x1 || b.y0 > b.y1) {
            return Err(param(format!("inverted box {b:?}")));
        }
        Ok(Self { values, boxes })
    }

    /// Normalises each row; zero rows are a degenerate-input error.
    pub fn normalized(raw: &Tensor) -> Result<Self> {
        let (n, _) = raw.dims2()?;
        let mut values = raw.clone();
        for i in 0..n {
            let norm = l2_norm(values.row(i));
            if !(norm > NORM_EPS) {
                return Err(Error::Degenerate(format!("embedding row {i} has zero norm")));
            }
            values.row_mut(i).iter_mut().for_each(|v| *v /= norm);
        }
        Self::new(values, Vec::new())
    }

    /// Pairs raw embeddings with their `N × H × W` masks, dropping proposals
    /// whose mask is empty and recording each remaining mask's box.
    pub fn from_masks(raw: &Tensor, masks: &Tensor) -> Result<Self> {
        let (n, d) = raw.dims2()?;
        let &[nm, h, w] = masks.shape() else {
            return Err(shape(format!("masks must be N x H x W, got {:?}", masks.shape())));
        };
        if nm != n {
            return Err(shape(format!("{n} embeddings but {nm} masks")));
        }
        let mut rows = Vec::new();
        let mut boxes = Vec::new();
        for i in 0..n {
            let mask = Tensor::new(vec![h, w], masks.row(i).to_vec())?;
            match mask_to_bbox(&mask) {
                Ok(b) => {
                    rows.push(raw.row(i).to_vec());
                    boxes.push(b);
                }
                Err(Error::Degenerate(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        if rows.is_empty() {
            return Err(Error::Degenerate("every proposal mask is empty".into()));
        }
        let kept = Tensor::new(vec![rows.len(), d], rows.concat())?;
        let normed = Self::normalized(&kept)?;
        Self::new(normed.values, boxes)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoConfig {
    pub threshold: f64,
    /// Multiplier on cosines before the softmax over unseen classes.
    pub logit_scale: f64,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self {
            threshold: 0.99,
            logit_scale: 100.0,
        }
    }
}

impl PseudoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(param(format!("threshold must lie in [0, 1), got {}", self.threshold)));
        }
        if !(self.logit_scale > 0.0) || !self.logit_scale.is_finite() {
            return Err(param(format!("logit scale must be positive, got {}", self.logit_scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelResult {
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
    pub threshold: f64,
}

/// Per unseen class, the maximum over proposals of
/// `softmax(logit_scale · cos(ê_i, T̂))`.
pub fn pseudo_scores(embeddings: &ProposalEmbeddings, unseen_text: &Tensor, logit_scale: f64) -> Result<Vec<f64>> {
    let (u, d) = unseen_text.dims2()?;
    let (n, d2) = embeddings.values.dims2()?;
    if d != d2 {
        return Err(shape(format!("image embeddings have dimension {d2}, text {d}")));
    }
    if !(logit_scale > 0.0) {
        return Err(param(format!("logit scale must be positive, got {logit_scale}")));
    }
    let mut best = vec![0.0f64; u];
    let mut logits = vec![0.0; u];
    for i in 0..n {
        for (j, l) in logits.iter_mut().enumerate() {
            *l = logit_scale * cosine_sim(embeddings.values.row(i), unseen_text.row(j))?;
        }
        let s = softmax_temp(&logits, 1.0)?;
        for (b, v) in best.iter_mut().zip(s) {
            *b = b.max(v);
        }
    }
    Ok(best)
}

/// Indices whose score is strictly above `threshold`.
pub fn threshold_labels(scores: &[f64], threshold: f64) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > threshold)
        .map(|(j, _)| j)
        .collect()
}

pub fn generate_pseudo_labels(
    embeddings: &ProposalEmbeddings,
    unseen_text: &Tensor,
    config: &PseudoConfig,
) -> Result<PseudoLabelResult> {
    config.validate()?;
    let scores = pseudo_scores(embeddings, unseen_text, config.logit_scale)?;
    let labels = threshold_labels(&scores, config.threshold);
    Ok(PseudoLabelResult {
        scores,
        labels,
        threshold: config.threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Tensor {
        let mut m = Tensor::zeros(&[h, w]);
        for &(y, x) in on {
            m.set(y, x, 1.0);
        }
        m
    }

    #[test]
    fn bbox_examples() {
        assert_eq!(mask_to_bbox(&mask(5, 5, &[(2, 3)])).unwrap(), BBox { x0: 3, y0: 2, x1: 3, y1: 2 });
        assert_eq!(
            mask_to_bbox(&Tensor::filled(&[4, 6], 1.0)).unwrap(),
            BBox { x0: 0, y0: 0, x1: 5, y1: 3 }
        );
        assert_eq!(
            mask_to_bbox(&mask(8, 8, &[(1, 1), (4, 6)])).unwrap(),
            BBox { x0: 1, y0: 1, x1: 6, y1: 4 }
        );
        assert!(matches!(mask_to_bbox(&Tensor::zeros(&[3, 3])), Err(Error::Degenerate(_))));
    }

    #[test]
    fn equidistant_proposal_gives_uniform_scores() {
        let e = ProposalEmbeddings::normalized(&Tensor::from_rows(&[[1.0, 1.0, 1.0]]).unwrap()).unwrap();
        let t = Tensor::identity(3);
        let s = pseudo_scores(&e, &t, 100.0).unwrap();
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sharp_logit_scale() {
        let e = ProposalEmbeddings::normalized(&Tensor::from_rows(&[[1.0, 0.0]]).unwrap()).unwrap();
        let t = Tensor::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let s = pseudo_scores(&e, &t, 100.0).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        let expected = 1.0 / (1.0 + 200f64.exp());
        assert!((s[1] - expected).abs() / expected < 1e-9);
        assert!(s[1] < 1e-86 && s[1] > 1e-88);
    }

    #[test]
    fn thresholds() {
        assert!(threshold_labels(&[0.25; 4], 0.99).is_empty());
        assert_eq!(threshold_labels(&[0.995, 0.3], 0.99), vec![0]);
        assert_eq!(threshold_labels(&[0.0, 0.2, 1e-9], 0.0), vec![1, 2]);
    }

    #[test]
    fn from_masks_drops_empty_proposals() {
        let raw = Tensor::from_rows(&[[2.0, 0.0], [0.0, 3.0], [1.0, 1.0]]).unwrap();
        let mut m = Tensor::zeros(&[3, 2, 2]);
        m.data_mut()[0] = 1.0;
        m.data_mut()[8 + 3] = 1.0;
        let e = ProposalEmbeddings::from_masks(&raw, &m).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e.boxes()[1], BBox { x0: 1, y0: 1, x1: 1, y1: 1 });
        assert!((e.values().get(1, 0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_unit_rows() {
        let v = Tensor::from_rows(&[[2.0, 0.0]]).unwrap();
        assert!(ProposalEmbeddings::new(v, vec![]).is_err());
    }
}
