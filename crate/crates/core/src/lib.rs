//! Numerical engine for mask-proposal zero-shot semantic segmentation:
//! matching, class and mask losses with analytic gradients, probability
//! weighted mask inference, pseudo unseen labels, IoU metrics and a toy
//! trainer on synthetic embedding scenes.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod config;
pub mod error;
pub mod inference;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod pseudolabel;
pub mod tensor;
pub mod trainer;

pub use assignment::{class_match_cost, hungarian, mask_match_cost, Assignment, CostMatrix, MaskCostWeights};
pub use config::{InferenceConfig, LabelSetFile, LossConfig, MatchMode, Mode, Optimizer, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use inference::{semantic_inference, similarity_matrix, LabelMap, SimilarityMatrix};
pub use losses::{ImageLabelSets, LossReport, LossWeights};
pub use metrics::{hiou, iou_per_class, partitioned_miou, IoUReport};
pub use pseudolabel::{mask_to_bbox, pseudo_scores, threshold_labels, BBox, ProposalEmbeddings, PseudoConfig};
pub use tensor::{cosine_sim, sigmoid_map, softmax_temp, Tensor};
pub use trainer::{synth_scenario, train_toy, SceneInstance, ToyModel, TrainingHistory};
