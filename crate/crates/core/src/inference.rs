//! Similarity matrix construction and per-pixel semantic prediction.

use serde::{Deserialize, Serialize};

use crate::error::{param, shape, Error, Result};
use crate::tensor::{cosine_sim, l2_norm, softmax_temp, Tensor, NORM_EPS};

/// `C × N` cosine similarities between text and class embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Tensor,
    pub class_names: Vec<String>,
    pub seen_mask: Vec<bool>,
}

impl SimilarityMatrix {
    /// Wraps precomputed similarities; every class is marked seen.
    pub fn new(values: Tensor) -> Result<Self> {
        let (c, _) = values.dims2()?;
        if values.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(param("similarities must lie in [-1, 1]"));
        }
        Ok(Self {
            values,
            class_names: (0..c).map(|i| format!("class_{i}")).collect(),
            seen_mask: vec![true; c],
        })
    }

    pub fn with_classes(mut self, names: Vec<String>, seen_mask: Vec<bool>) -> Result<Self> {
        let c = self.num_classes();
        if names.len() != c || seen_mask.len() != c {
            return Err(shape(format!(
                "{c} classes but {} names and {} seen flags",
                names.len(),
                seen_mask.len()
            )));
        }
        self.class_names = names;
        self.seen_mask = seen_mask;
        Ok(self)
    }

    pub fn num_classes(&self) -> usize {
        self.values.rows()
    }

    pub fn num_proposals(&self) -> usize {
        self.values.cols()
    }
}

fn check_rows(t: &Tensor, what: &str) -> Result<()> {
    for i in 0..t.rows() {
        let n = l2_norm(t.row(i));
        if !(n > NORM_EPS) {
            return Err(Error::Degenerate(format!("{what} row {i} has zero norm")));
        }
    }
    Ok(())
}

/// `values[c][q] = cos(Ec[q], T[c])`.
pub fn similarity_matrix(class_embeddings: &Tensor, text: &Tensor) -> Result<SimilarityMatrix> {
    let (n, d) = class_embeddings.dims2()?;
    let (c, d2) = text.dims2()?;
    if d != d2 {
        return Err(shape(format!(
            "class embeddings have dimension {d}, text embeddings {d2}"
        )));
    }
    check_rows(class_embeddings, "class embedding")?;
    check_rows(text, "text embedding")?;
    let mut values = Tensor::zeros(&[c, n]);
    for ci in 0..c {
        for q in 0..n {
            values.set(ci, q, cosine_sim(class_embeddings.row(q), text.row(ci))?);
        }
    }
    SimilarityMatrix::new(values)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    /// Row-major class index per pixel.
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(shape(format!(
                "{height}x{width} label map needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn get(&self, h: usize, w: usize) -> u32 {
        self.labels[h * self.width + w]
    }

    /// Integer-valued `H × W` tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(
            vec![self.height, self.width],
            self.labels.iter().map(|&l| l as f64).collect(),
        )
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = t.dims2()?;
        let labels = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                    Ok(v as u32)
                } else {
                    Err(param(format!("label map value {v} is not a class index")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(h, w, labels)
    }
}

/// Per-proposal class distributions, `C × N`, from column-wise softmax.
pub fn class_probabilities(similarity: &Tensor, temperature: f64) -> Result<Tensor> {
    let (c, n) = similarity.dims2()?;
    let mut probs = Tensor::zeros(&[c, n]);
    for q in 0..n {
        let p = softmax_temp(&similarity.column(q), temperature)?;
        for (ci, v) in p.into_iter().enumerate() {
            probs.set(ci, q, v);
        }
    }
    Ok(probs)
}

/// Geometric mix of model probabilities with external per-proposal scores:
/// `p'_q(c) ∝ p_q(c)^(1−w) · s_q(c)^w`, renormalised per proposal.
pub fn mix_external_scores(probs: &Tensor, external: &Tensor, weight: f64) -> Result<Tensor> {
    if probs.shape() != external.shape() {
        return Err(shape(format!(
            "external scores {:?} do not match probabilities {:?}",
            external.shape(),
            probs.shape()
        )));
    }
    if !(0.0..=1.0).contains(&weight) {
        return Err(param(format!("mixing weight must lie in [0, 1], got {weight}")));
    }
    let (c, n) = probs.dims2()?;
    let mut out = Tensor::zeros(&[c, n]);
    for q in 0..n {
        let mut z = 0.0;
        for ci in 0..c {
            let s = external.get(ci, q);
            if !(s > 0.0) {
                return Err(param("external scores must be positive"));
            }
            let v = probs.get(ci, q).powf(1.0 - weight) * s.powf(weight);
            out.set(ci, q, v);
            z += v;
        }
        for ci in 0..c {
            out.set(ci, q, out.get(ci, q) / z);
        }
    }
    Ok(out)
}

/// Resolves `(N, H, W)` from an `N × H × W` stack or an `N × HW` matrix with
/// explicit spatial dimensions.
pub fn proposal_dims(proposals: &Tensor, spatial: Option<(usize, usize)>) -> Result<(usize, usize, usize)> {
    match (proposals.shape(), spatial) {
        (&[n, h, w], None) => Ok((n, h, w)),
        (&[n, h, w], Some((sh, sw))) if (sh, sw) == (h, w) => Ok((n, h, w)),
        (&[n, hw], Some((h, w))) if h * w == hw => Ok((n, h, w)),
        (&[_, hw], None) => Err(shape(format!(
            "proposals are flat ({hw} pixels); height and width are required"
        ))),
        (s, sp) => Err(shape(format!("proposal shape {s:?} incompatible with {sp:?}"))),
    }
}

/// `argmax_c Σ_q probs[c][q] · M_q[pixel]`, ties to the lowest class.
pub fn label_from_probabilities(
    probs: &Tensor,
    proposals: &Tensor,
    spatial: Option<(usize, usize)>,
) -> Result<LabelMap> {
    let (c, n) = probs.dims2()?;
    let (np, h, w) = proposal_dims(proposals, spatial)?;
    if np != n {
        return Err(shape(format!(
            "{n} proposals in the similarity matrix but {np} masks"
        )));
    }
    if proposals.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(param("proposal values must lie in [0, 1]"));
    }
    let hw = h * w;
    let masks = proposals.data();
    let mut labels = Vec::with_capacity(hw);
    let mut scores = vec![0.0; c];
    for px in 0..hw {
        scores.iter_mut().for_each(|s| *s = 0.0);
        for q in 0..n {
            let m = masks[q * hw + px];
            for (ci, s) in scores.iter_mut().enumerate() {
                *s += probs.get(ci, q) * m;
            }
        }
        let best = scores
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |b, (ci, &s)| if s > b.1 { (ci, s) } else { b });
        labels.push(best.0 as u32);
    }
    LabelMap::new(h, w, labels)
}

/// Semantic label map from similarities and mask proposals.
pub fn semantic_inference(
    similarity: &Tensor,
    proposals: &Tensor,
    spatial: Option<(usize, usize)>,
    temperature: f64,
) -> Result<LabelMap> {
    let probs = class_probabilities(similarity, temperature)?;
    label_from_probabilities(&probs, proposals, spatial)
}
