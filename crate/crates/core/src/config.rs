//! Run configuration shared by the CLI and the toy trainer.
//!
//! Every section rejects unknown keys and is validated against the
//! preconditions of the module that consumes it.

use serde::{Deserialize, Serialize};

use crate::assignment::MaskCostWeights;
use crate::error::{param, Result};
use crate::losses::{BgReduce, LossWeights, MaskLossParams};
use crate::metrics::DEFAULT_IGNORE_INDEX;
use crate::pseudolabel::PseudoConfig;

/// How the class and mask branches obtain their matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// One matching on the summed class and mask costs.
    #[default]
    Combined,
    /// Independent matchings per branch.
    Separate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub mask: MaskLossParams,
    pub mask_cost: MaskCostWeights,
    pub match_mode: MatchMode,
    /// Aggregation of the unmatched-proposal KL terms. The default averages
    /// them: with many more proposals than ground truths, summing lets the
    /// uniformity terms swamp the matched cross-entropy and the class head
    /// collapses to uniform predictions.
    pub bg_reduce: BgReduce,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            mask: MaskLossParams::default(),
            mask_cost: MaskCostWeights::default(),
            match_mode: MatchMode::Combined,
            bg_reduce: BgReduce::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.mask.focal.validate()?;
        for (name, v) in [
            ("mask.dice_eps", self.mask.dice_eps),
            ("mask.focal_weight", self.mask.focal_weight),
            ("mask.dice_weight", self.mask.dice_weight),
            ("mask_cost.focal", self.mask_cost.focal),
            ("mask_cost.dice", self.mask_cost.dice),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(param(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Softmax temperature at inference; `None` reuses the training one.
    pub temperature: Option<f64>,
    /// Exponent weight of externally supplied scores, 0 disables mixing.
    pub ensemble_weight: f64,
}

impl InferenceConfig {
    pub fn resolved_temperature(&self, loss: &LossConfig) -> f64 {
        self.temperature.unwrap_or(loss.weights.temperature)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.temperature {
            if !(t > 0.0) || !t.is_finite() {
                return Err(param(format!("inference temperature must be positive, got {t}")));
            }
        }
        if !(0.0..=1.0).contains(&self.ensemble_weight) {
            return Err(param(format!(
                "ensemble_weight must lie in [0, 1], got {}",
                self.ensemble_weight
            )));
        }
        Ok(())
    }
}

/// Which loss combination and image-label source the toy trainer simulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Cross-entropy with a trainable background text embedding.
    #[serde(rename = "baseline-bg-embedding")]
    BaselineBgEmbedding,
    /// Background-aware class loss (CE on matched, KL on unmatched).
    #[serde(rename = "bg-aware")]
    BgAware,
    /// Background-aware loss plus ranking with ground-truth unseen labels.
    #[serde(rename = "bg-aware+rank")]
    BgAwareRank,
    /// Ranking with pseudo unseen labels.
    #[serde(rename = "bg-aware+rank+pseudo")]
    BgAwareRankPseudo,
    /// Ranking with seen labels only.
    #[serde(rename = "bg-aware+rank+seen-only")]
    BgAwareRankSeenOnly,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::BaselineBgEmbedding,
        Mode::BgAware,
        Mode::BgAwareRank,
        Mode::BgAwareRankPseudo,
        Mode::BgAwareRankSeenOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::BaselineBgEmbedding => "baseline-bg-embedding",
            Mode::BgAware => "bg-aware",
            Mode::BgAwareRank => "bg-aware+rank",
            Mode::BgAwareRankPseudo => "bg-aware+rank+pseudo",
            Mode::BgAwareRankSeenOnly => "bg-aware+rank+seen-only",
        }
    }

    pub fn uses_background_embedding(self) -> bool {
        self == Mode::BaselineBgEmbedding
    }

    pub fn uses_ranking(self) -> bool {
        matches!(
            self,
            Mode::BgAwareRank | Mode::BgAwareRankPseudo | Mode::BgAwareRankSeenOnly
        )
    }
}

impl std::str::FromStr for Mode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| param(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    #[default]
    Sgd,
    /// Decoupled weight decay Adam.
    Adamw {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Number of learned queries (mask proposals).
    pub n_queries: usize,
    /// Embedding dimension.
    pub dim: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub num_unseen: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    /// Probability that a scene contains at least one unseen region.
    pub unseen_scene_prob: f64,
    /// Std-dev of per-pixel feature noise.
    pub noise_sigma: f64,
    /// Target cosine of the correlated seen/unseen text pair.
    pub pair_cosine: f64,
    /// Std-dev of the perturbation applied to text embedding directions.
    pub text_jitter: f64,
    /// Upper bound on all other cross-class text cosines.
    pub max_cross_cosine: f64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Norm of the initial query vectors; large enough that attention
    /// logits `q·f/√d` can single out one region.
    pub query_init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::BgAwareRank,
            n_queries: 100,
            dim: 16,
            height: 8,
            width: 8,
            num_classes: 10,
            num_unseen: 3,
            min_regions: 2,
            max_regions: 4,
            unseen_scene_prob: 0.6,
            noise_sigma: 0.1,
            pair_cosine: 0.85,
            text_jitter: 0.1,
            max_cross_cosine: 0.3,
            train_scenes: 32,
            eval_scenes: 20,
            batch_size: 8,
            learning_rate: 0.05,
            steps: 300,
            seed: 0,
            optimizer: Optimizer::Sgd,
            query_init_scale: 12.0,
        }
    }
}

impl TrainConfig {
    pub fn num_seen(&self) -> usize {
        self.num_classes - self.num_unseen
    }

    /// Seen classes occupy `0..|S|`, unseen classes `|S|..C`.
    pub fn seen_mask(&self) -> Vec<bool> {
        (0..self.num_classes).map(|c| c < self.num_seen()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_queries", self.n_queries),
            ("dim", self.dim),
            ("height", self.height),
            ("width", self.width),
            ("num_classes", self.num_classes),
            ("min_regions", self.min_regions),
            ("train_scenes", self.train_scenes),
            ("eval_scenes", self.eval_scenes),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(param(format!("{name} must be positive")));
        }
        if self.num_unseen == 0 || self.num_unseen >= self.num_classes {
            return Err(param(format!(
                "num_unseen must lie in [1, {}), got {}",
                self.num_classes, self.num_unseen
            )));
        }
        if self.min_regions > self.max_regions {
            return Err(param("min_regions exceeds max_regions"));
        }
        if self.max_regions > self.height * self.width || self.max_regions > self.num_classes {
            return Err(param("max_regions exceeds the pixel or class count"));
        }
        if self.max_regions > self.n_queries {
            return Err(param("max_regions exceeds n_queries; every ground truth needs a proposal"));
        }
        if !(0.0..=1.0).contains(&self.unseen_scene_prob) {
            return Err(param("unseen_scene_prob must lie in [0, 1]"));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("text_jitter", self.text_jitter),
            ("learning_rate", self.learning_rate),
            ("query_init_scale", self.query_init_scale),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(param(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.pair_cosine > -1.0 && self.pair_cosine < 1.0) {
            return Err(param("pair_cosine must lie in (-1, 1)"));
        }
        if !(self.max_cross_cosine > 0.0 && self.max_cross_cosine < 1.0) {
            return Err(param("max_cross_cosine must lie in (0, 1)"));
        }
        if let Optimizer::Adamw {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.optimizer
        {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) || weight_decay < 0.0 {
                return Err(param("invalid AdamW hyper-parameters"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub loss: LossConfig,
    pub inference: InferenceConfig,
    pub pseudo: PseudoConfig,
    pub ignore_index: u32,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            inference: InferenceConfig::default(),
            pseudo: PseudoConfig::default(),
            ignore_index: DEFAULT_IGNORE_INDEX,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.inference.validate()?;
        self.pseudo.validate()?;
        self.train.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path.as_ref())?)
    }
}

/// Ordered class names and their seen/unseen partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSetFile {
    pub classes: Vec<String>,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

impl LabelSetFile {
    pub fn validate(&self) -> Result<()> {
        let c = self.classes.len();
        let mut hit = vec![false; c];
        for &i in self.seen.iter().chain(&self.unseen) {
            if i >= c {
                return Err(param(format!("class index {i} out of range for {c} classes")));
            }
            if hit[i] {
                return Err(param(format!("class {i} listed twice across seen/unseen")));
            }
            hit[i] = true;
        }
        if let Some(i) = hit.iter().position(|h| !h) {
            return Err(param(format!("class {i} is neither seen nor unseen")));
        }
        Ok(())
    }

    pub fn seen_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.classes.len()];
        self.seen.iter().for_each(|&i| m[i] = true);
        m
    }
}
