//! Toy end-to-end trainer on synthetic embedding scenes.
//!
//! The model is a single cross-attention layer over pixel features followed
//! by two linear heads:
//!
//! ```text
//! A   = softmax_rows(Q · Fᵀ / √d)      N × HW
//! Z   = A · F                           N × d
//! E^c = Z · W_c,   E^m = Z · W_m
//! R   = cos(E^c, T)                     C × N
//! M   = σ(E^m · Fᵀ)                     N × HW
//! ```
//!
//! Gradients of the total loss are propagated by hand through every stage;
//! the Hungarian assignment is held constant within a step.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{class_match_cost, hungarian, mask_match_cost, Assignment};
use crate::config::{LossConfig, MatchMode, Mode, Optimizer, RunConfig, TrainConfig};
use crate::error::{param, Error, Result};
use crate::inference::{class_probabilities, label_from_probabilities, LabelMap};
use crate::losses::{
    bg_aware_class_loss, ce_with_background, class_targets, mask_loss, ranking_loss_image, total_loss,
    ImageLabelSets, LossReport,
};
use crate::metrics::{ConfusionMatrix, IoUReport};
use crate::pseudolabel::{generate_pseudo_labels, ProposalEmbeddings};
use crate::tensor::{cosine_grad_acc, cosine_sim, l2_norm, sigmoid, softmax_unchecked, Tensor};

const SCENARIO_STREAM: u64 = 0;
const MODEL_STREAM: u64 = 1;
const MAX_TEXT_ATTEMPTS: usize = 1000;

/// One synthetic image.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInstance {
    /// Pixel-major features, `HW × d`, unit-norm rows.
    pub features: Tensor,
    pub height: usize,
    pub width: usize,
    /// Binary masks of the seen-class regions, `G × HW`.
    pub gt_masks: Tensor,
    /// Class of each row of `gt_masks`.
    pub gt_labels: Vec<usize>,
    /// Class of every region, seen or unseen, in region order.
    pub region_classes: Vec<usize>,
    /// Region index of every pixel.
    pub region_of_pixel: Vec<usize>,
    /// Full ground truth, unseen regions included.
    pub truth: LabelMap,
    pub image_labels: ImageLabelSets,
}

impl SceneInstance {
    /// Features as a `d × H × W` tensor.
    pub fn feature_map(&self) -> Tensor {
        let d = self.features.cols();
        let hw = self.height * self.width;
        let mut data = vec![0.0; d * hw];
        for px in 0..hw {
            for (k, &v) in self.features.row(px).iter().enumerate() {
                data[k * hw + px] = v;
            }
        }
        Tensor::new(vec![d, self.height, self.width], data).expect("consistent dimensions")
    }

    pub fn present_classes(&self) -> Vec<usize> {
        let mut c = self.region_classes.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Whether some pixel is covered by no ground-truth mask.
    pub fn has_unannotated_pixels(&self) -> bool {
        let hw = self.height * self.width;
        (0..hw).any(|px| (0..self.gt_masks.rows()).all(|g| self.gt_masks.get(g, px) <= 0.5))
    }

    pub fn region_mask(&self, region: usize) -> Tensor {
        let data = self
            .region_of_pixel
            .iter()
            .map(|&r| if r == region { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![self.height, self.width], data).expect("consistent dimensions")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Unit-norm class text embeddings, `C × d`.
    pub text: Tensor,
    /// `(seen, unseen)` classes whose text embeddings are correlated.
    pub correlated_pair: (usize, usize),
    pub train: Vec<SceneInstance>,
    pub eval: Vec<SceneInstance>,
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let n = l2_norm(v);
    if !(n > 1e-12) {
        return Err(Error::Degenerate("cannot normalise a zero vector".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

/// Orthonormal directions by Gram–Schmidt on Gaussian draws.
fn orthonormal(rng: &mut ChaCha8Rng, count: usize, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = normal_vec(rng, d);
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        if l2_norm(&v) > 1e-6 {
            normalize(&mut v).expect("checked norm");
            basis.push(v);
        }
    }
    basis
}

fn text_embeddings(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<(Tensor, (usize, usize))> {
    let (c, d) = (cfg.num_classes, cfg.dim);
    if d < c {
        return Err(param(format!(
            "{c} classes need at least {c} embedding dimensions, got {d}"
        )));
    }
    let pair = (cfg.num_seen() - 1, cfg.num_seen());
    let min_pair = 0.8f64.min(cfg.pair_cosine);
    for _ in 0..MAX_TEXT_ATTEMPTS {
        let basis = orthonormal(rng, c, d);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(c);
        for b in &basis {
            let mut v: Vec<f64> = b
                .iter()
                .zip(normal_vec(rng, d))
                .map(|(x, n)| x + cfg.text_jitter / (d as f64).sqrt() * n)
                .collect();
            normalize(&mut v)?;
            rows.push(v);
        }
        // The unseen member of the pair leans towards its seen partner.
        let rho = cfg.pair_cosine;
        let mixed: Vec<f64> = rows[pair.0]
            .iter()
            .zip(&rows[pair.1])
            .map(|(s, u)| rho * s + (1.0 - rho * rho).sqrt() * u)
            .collect();
        rows[pair.1] = mixed;
        normalize(&mut rows[pair.1])?;

        let mut ok = cosine_sim(&rows[pair.0], &rows[pair.1])? >= min_pair;
        'outer: for i in 0..c {
            for j in i + 1..c {
                if (i, j) != pair && cosine_sim(&rows[i], &rows[j])?.abs() > cfg.max_cross_cosine {
                    ok = false;
                    break 'outer;
                }
            }
        }
        if ok {
            return Ok((Tensor::from_rows(&rows)?, pair));
        }
    }
    Err(param("could not draw text embeddings satisfying the cosine constraints"))
}

fn make_scene(cfg: &TrainConfig, text: &Tensor, rng: &mut ChaCha8Rng) -> Result<SceneInstance> {
    let (h, w, d) = (cfg.height, cfg.width, cfg.dim);
    let hw = h * w;
    let n_seen = cfg.num_seen();
    let k = rng.gen_range(cfg.min_regions..=cfg.max_regions);

    let with_unseen = k >= 2 && rng.gen_bool(cfg.unseen_scene_prob);
    let n_seen_regions = if with_unseen { k - 1 } else { k }.min(n_seen);
    let mut seen: Vec<usize> = (0..n_seen).collect();
    seen.shuffle(rng);
    let mut classes: Vec<usize> = seen[..n_seen_regions].to_vec();
    if with_unseen {
        classes.push(rng.gen_range(n_seen..cfg.num_classes));
    }
    classes.shuffle(rng);
    let k = classes.len();

    // Voronoi partition around distinct seed pixels; every region keeps its seed.
    let mut pixels: Vec<usize> = (0..hw).collect();
    pixels.shuffle(rng);
    let seeds: Vec<(f64, f64)> = pixels[..k].iter().map(|&p| ((p / w) as f64, (p % w) as f64)).collect();
    let region_of_pixel: Vec<usize> = (0..hw)
        .map(|p| {
            let (y, x) = ((p / w) as f64, (p % w) as f64);
            seeds
                .iter()
                .enumerate()
                .map(|(i, &(sy, sx))| (i, (y - sy).powi(2) + (x - sx).powi(2)))
                .fold((0, f64::INFINITY), |b, (i, dist)| if dist < b.1 { (i, dist) } else { b })
                .0
        })
        .collect();

    let mut feats = Vec::with_capacity(hw * d);
    for &r in &region_of_pixel {
        let base = text.row(classes[r]);
        let mut v: Vec<f64> = if cfg.noise_sigma > 0.0 {
            base.iter()
                .zip(normal_vec(rng, d))
                .map(|(b, n)| b + cfg.noise_sigma * n)
                .collect()
        } else {
            base.to_vec()
        };
        normalize(&mut v)?;
        feats.extend(v);
    }

    let mut gt_rows = Vec::new();
    let mut gt_labels = Vec::new();
    for (r, &cls) in classes.iter().enumerate() {
        if cls < n_seen {
            gt_rows.extend(region_of_pixel.iter().map(|&p| if p == r { 1.0 } else { 0.0 }));
            gt_labels.push(cls);
        }
    }
    let truth = LabelMap::new(h, w, region_of_pixel.iter().map(|&r| classes[r] as u32).collect())?;
    let image_labels = ImageLabelSets::with_complement(classes.clone(), cfg.num_classes);
    Ok(SceneInstance {
        features: Tensor::new(vec![hw, d], feats)?,
        height: h,
        width: w,
        gt_masks: Tensor::new(vec![gt_labels.len(), hw], gt_rows)?,
        gt_labels,
        region_classes: classes,
        region_of_pixel,
        truth,
        image_labels,
    })
}

/// Text embeddings plus training and held-out scenes, fully determined by
/// `(config, seed)`.
pub fn synth_scenario(cfg: &TrainConfig, seed: u64) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SCENARIO_STREAM);
    let (text, correlated_pair) = text_embeddings(cfg, &mut rng)?;
    let train = (0..cfg.train_scenes)
        .map(|_| make_scene(cfg, &text, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let eval = (0..cfg.eval_scenes)
        .map(|_| make_scene(cfg, &text, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Scenario {
        text,
        correlated_pair,
        train,
        eval,
    })
}

/// Image-level positives and negatives of `scene` for `mode`. Negatives are
/// every class not listed as positive.
pub fn image_labels_for_mode(
    scene: &SceneInstance,
    mode: Mode,
    text: &Tensor,
    num_seen: usize,
    pseudo: &crate::pseudolabel::PseudoConfig,
) -> Result<ImageLabelSets> {
    let c = text.rows();
    let seen_present: Vec<usize> = scene.present_classes().into_iter().filter(|&k| k < num_seen).collect();
    let positives = match mode {
        // Only images with unannotated pixels are pseudo-labelled.
        Mode::BgAwareRankPseudo if scene.has_unannotated_pixels() => {
            let n_regions = scene.region_classes.len();
            let d = text.cols();
            let mut emb = Vec::with_capacity(n_regions * d);
            let mut masks = Vec::with_capacity(n_regions * scene.height * scene.width);
            for (r, &cls) in scene.region_classes.iter().enumerate() {
                emb.extend_from_slice(text.row(cls));
                masks.extend(scene.region_mask(r).into_data());
            }
            let emb = Tensor::new(vec![n_regions, d], emb)?;
            let masks = Tensor::new(vec![n_regions, scene.height, scene.width], masks)?;
            let proposals = ProposalEmbeddings::from_masks(&emb, &masks)?;
            let unseen_rows: Vec<Vec<f64>> = (num_seen..c).map(|k| text.row(k).to_vec()).collect();
            let unseen_text = Tensor::from_rows(&unseen_rows)?;
            let res = generate_pseudo_labels(&proposals, &unseen_text, pseudo)?;
            let mut p = seen_present;
            p.extend(res.labels.iter().map(|j| num_seen + j));
            p
        }
        Mode::BgAwareRankPseudo | Mode::BgAwareRankSeenOnly => seen_present,
        _ => scene.present_classes(),
    };
    Ok(ImageLabelSets::with_complement(positives, c))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    /// Learned queries, `N × d`.
    pub queries: Tensor,
    /// Class projection head, `d × d`.
    pub w_class: Tensor,
    /// Mask projection head, `d × d`.
    pub w_mask: Tensor,
    /// Trainable background text embedding (baseline mode only).
    pub background: Option<Vec<f64>>,
}

impl ToyModel {
    pub fn init(cfg: &TrainConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(MODEL_STREAM);
        let (n, d) = (cfg.n_queries, cfg.dim);
        let mut q = Vec::with_capacity(n * d);
        for _ in 0..n {
            let mut v = normal_vec(&mut rng, d);
            normalize(&mut v).expect("gaussian draw is nonzero");
            q.extend(v.into_iter().map(|x| x * cfg.query_init_scale));
        }
        let head = |rng: &mut ChaCha8Rng| {
            let mut w = Tensor::identity(d);
            for v in w.data_mut() {
                *v += 0.01 * rng.sample::<f64, _>(StandardNormal);
            }
            w
        };
        let w_class = head(&mut rng);
        let w_mask = head(&mut rng);
        let background = cfg.mode.uses_background_embedding().then(|| {
            let mut v = normal_vec(&mut rng, d);
            normalize(&mut v).expect("gaussian draw is nonzero");
            v
        });
        Self {
            queries: Tensor::new(vec![n, d], q).expect("consistent dimensions"),
            w_class,
            w_mask,
            background,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.queries.is_finite()
            && self.w_class.is_finite()
            && self.w_mask.is_finite()
            && self.background.as_ref().is_none_or(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub attention: Tensor,
    pub pooled: Tensor,
    pub class_embeddings: Tensor,
    pub mask_embeddings: Tensor,
    /// `C × N`, or `(C+1) × N` with the background row last.
    pub similarity: Tensor,
    /// `N × HW` mask probabilities.
    pub proposals: Tensor,
}

impl ForwardPass {
    /// Similarities against real classes only.
    pub fn class_similarity(&self, num_classes: usize) -> Tensor {
        let n = self.similarity.cols();
        Tensor::new(vec![num_classes, n], self.similarity.data()[..num_classes * n].to_vec())
            .expect("row prefix of a valid tensor")
    }
}

pub fn forward(model: &ToyModel, scene: &SceneInstance, text: &Tensor) -> Result<ForwardPass> {
    let f = &scene.features;
    let d = f.cols();
    let mut attention = model.queries.matmul_t(f)?;
    attention.scale(1.0 / (d as f64).sqrt());
    for i in 0..attention.rows() {
        let p = softmax_unchecked(attention.row(i), 1.0);
        attention.row_mut(i).copy_from_slice(&p);
    }
    let pooled = attention.matmul(f)?;
    let class_embeddings = pooled.matmul(&model.w_class)?;
    let mask_embeddings = pooled.matmul(&model.w_mask)?;

    let n = class_embeddings.rows();
    let c = text.rows();
    let rows = c + usize::from(model.background.is_some());
    let mut similarity = Tensor::zeros(&[rows, n]);
    for q in 0..n {
        let e = class_embeddings.row(q);
        for k in 0..c {
            similarity.set(k, q, cosine_sim(e, text.row(k))?);
        }
        if let Some(bg) = &model.background {
            similarity.set(c, q, cosine_sim(e, bg)?);
        }
    }
    let mut proposals = mask_embeddings.matmul_t(f)?;
    proposals.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
    Ok(ForwardPass {
        attention,
        pooled,
        class_embeddings,
        mask_embeddings,
        similarity,
        proposals,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub queries: Tensor,
    pub w_class: Tensor,
    pub w_mask: Tensor,
    pub background: Option<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(model: &ToyModel) -> Self {
        Self {
            queries: Tensor::zeros(model.queries.shape()),
            w_class: Tensor::zeros(model.w_class.shape()),
            w_mask: Tensor::zeros(model.w_mask.shape()),
            background: model.background.as_ref().map(|b| vec![0.0; b.len()]),
        }
    }

    fn add_scaled(&mut self, k: f64, other: &Gradients) -> Result<()> {
        self.queries.axpy(k, &other.queries)?;
        self.w_class.axpy(k, &other.w_class)?;
        self.w_mask.axpy(k, &other.w_mask)?;
        if let (Some(a), Some(b)) = (self.background.as_mut(), other.background.as_ref()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += k * y);
        }
        Ok(())
    }
}

/// Back-propagates `dL/dR` and `dL/dM` to the model parameters.
pub fn backward(
    model: &ToyModel,
    scene: &SceneInstance,
    text: &Tensor,
    fwd: &ForwardPass,
    d_similarity: &Tensor,
    d_proposals: &Tensor,
) -> Result<Gradients> {
    let f = &scene.features;
    let d = f.cols();
    let n = fwd.class_embeddings.rows();
    let c = text.rows();

    let mut d_ec = Tensor::zeros(&[n, d]);
    let mut d_bg = model.background.as_ref().map(|b| vec![0.0; b.len()]);
    for q in 0..n {
        let e = fwd.class_embeddings.row(q).to_vec();
        let out = d_ec.row_mut(q);
        for k in 0..c {
            let g = d_similarity.get(k, q);
            if g != 0.0 {
                cosine_grad_acc(&e, text.row(k), g, out);
            }
        }
        if let (Some(bg), Some(dbg)) = (model.background.as_ref(), d_bg.as_mut()) {
            let g = d_similarity.get(c, q);
            if g != 0.0 {
                cosine_grad_acc(&e, bg, g, out);
                cosine_grad_acc(bg, &e, g, dbg);
            }
        }
    }

    let mut d_logits = d_proposals.clone();
    for (g, &m) in d_logits.data_mut().iter_mut().zip(fwd.proposals.data()) {
        *g *= m * (1.0 - m);
    }
    let d_em = d_logits.matmul(f)?;

    let w_class = fwd.pooled.t_matmul(&d_ec)?;
    let w_mask = fwd.pooled.t_matmul(&d_em)?;
    let mut d_z = d_ec.matmul_t(&model.w_class)?;
    d_z.axpy(1.0, &d_em.matmul_t(&model.w_mask)?)?;

    let d_attn = d_z.matmul_t(f)?;
    let mut d_scores = Tensor::zeros(d_attn.shape());
    for i in 0..n {
        let a = fwd.attention.row(i);
        let da = d_attn.row(i);
        let inner: f64 = a.iter().zip(da).map(|(x, y)| x * y).sum();
        for (o, (x, y)) in d_scores.row_mut(i).iter_mut().zip(a.iter().zip(da)) {
            *o = x * (y - inner);
        }
    }
    let mut queries = d_scores.matmul(f)?;
    queries.scale(1.0 / (d as f64).sqrt());
    Ok(Gradients {
        queries,
        w_class,
        w_mask,
        background: d_bg,
    })
}

/// Matchings used by the class and mask branches in one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    pub class: Assignment,
    pub mask: Assignment,
}

pub fn compute_matching(fwd: &ForwardPass, scene: &SceneInstance, loss: &LossConfig, num_classes: usize) -> Result<Matching> {
    if scene.gt_labels.is_empty() {
        return Ok(Matching {
            class: Assignment::empty(),
            mask: Assignment::empty(),
        });
    }
    let r = fwd.class_similarity(num_classes);
    let class_cost = class_match_cost(&r, &scene.gt_labels)?;
    let mask_cost = mask_match_cost(
        &fwd.proposals,
        &scene.gt_masks,
        loss.mask.focal,
        loss.mask.dice_eps,
        loss.mask_cost,
    )?;
    Ok(match loss.match_mode {
        MatchMode::Combined => {
            let a = hungarian(&class_cost.add(&mask_cost)?)?;
            Matching {
                class: a.clone(),
                mask: a,
            }
        }
        MatchMode::Separate => Matching {
            class: hungarian(&class_cost)?,
            mask: hungarian(&mask_cost)?,
        },
    })
}

/// Loss components of one scene.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub class: f64,
    pub mask: f64,
    pub rank: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, k: f64, o: &LossBreakdown) {
        self.total += k * o.total;
        self.class += k * o.class;
        self.mask += k * o.mask;
        self.rank += k * o.rank;
    }
}

/// Total loss of one scene and its gradient with respect to the model.
/// When `fixed` is given the matching is reused instead of recomputed.
pub fn scene_objective(
    model: &ToyModel,
    scene: &SceneInstance,
    text: &Tensor,
    mode: Mode,
    loss: &LossConfig,
    fixed: Option<&Matching>,
) -> Result<(LossBreakdown, Gradients, Matching)> {
    let c = text.rows();
    let fwd = forward(model, scene, text)?;
    let matching = match fixed {
        Some(m) => m.clone(),
        None => compute_matching(&fwd, scene, loss, c)?,
    };
    let w = &loss.weights;
    let targets = class_targets(&matching.class, &scene.gt_labels)?;

    let class_rep = if mode.uses_background_embedding() {
        ce_with_background(&fwd.similarity, &targets, c, w.temperature)?
    } else {
        bg_aware_class_loss(&fwd.similarity, &targets, w, loss.bg_reduce)?
    };
    let mask_rep = mask_loss(&fwd.proposals, &scene.gt_masks, &matching.mask, &loss.mask)?;
    let rank_rep = if mode.uses_ranking() {
        let mut rep = ranking_loss_image(&fwd.class_similarity(c), &scene.image_labels)?;
        if fwd.similarity.rows() != c {
            // Pad the gradient with a zero background row.
            let g = rep.gradients.remove("R").expect("ranking reports R");
            let mut padded = Tensor::zeros(fwd.similarity.shape());
            padded.data_mut()[..g.len()].copy_from_slice(g.data());
            rep.gradients.insert("R".into(), padded);
        }
        Some(rep)
    } else {
        None
    };

    let total = total_loss(Some(&class_rep), Some(&mask_rep), rank_rep.as_ref(), w)?;
    let zero_r = Tensor::zeros(fwd.similarity.shape());
    let zero_m = Tensor::zeros(fwd.proposals.shape());
    let d_r = total.gradient("R").unwrap_or(&zero_r);
    let d_m = total.gradient("M").unwrap_or(&zero_m);
    let grads = backward(model, scene, text, &fwd, d_r, d_m)?;
    let breakdown = LossBreakdown {
        total: total.value,
        class: class_rep.value,
        mask: mask_rep.value,
        rank: rank_rep.as_ref().map_or(0.0, |r: &LossReport| r.value),
    };
    Ok((breakdown, grads, matching))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub class: f64,
    pub mask: f64,
    pub rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub mode: Mode,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub report: IoUReport,
    /// Fraction of held-out unseen-region pixels predicted as a seen class.
    pub unseen_to_seen_rate: f64,
}

impl TrainingHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,total,class,mask,rank\n");
        for s in &self.steps {
            writeln!(out, "{},{},{},{},{}", s.step, s.total, s.class, s.mask, s.rank).expect("write to String");
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: TrainingHistory,
    pub model: ToyModel,
    pub scenario: Scenario,
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

fn params_mut(model: &mut ToyModel) -> Vec<&mut [f64]> {
    let mut p: Vec<&mut [f64]> = vec![
        model.queries.data_mut(),
        model.w_class.data_mut(),
        model.w_mask.data_mut(),
    ];
    if let Some(b) = model.background.as_mut() {
        p.push(b.as_mut_slice());
    }
    p
}

fn grads_ref(g: &Gradients) -> Vec<&[f64]> {
    let mut p: Vec<&[f64]> = vec![g.queries.data(), g.w_class.data(), g.w_mask.data()];
    if let Some(b) = g.background.as_ref() {
        p.push(b.as_slice());
    }
    p
}

fn apply_update(model: &mut ToyModel, grads: &Gradients, lr: f64, opt: &Optimizer, state: &mut Option<AdamState>) {
    match *opt {
        Optimizer::Sgd => {
            for (p, g) in params_mut(model).into_iter().zip(grads_ref(grads)) {
                p.iter_mut().zip(g).for_each(|(x, y)| *x -= lr * y);
            }
        }
        Optimizer::Adamw {
            beta1,
            beta2,
            eps,
            weight_decay,
        } => {
            let flat: Vec<f64> = grads_ref(grads).into_iter().flatten().copied().collect();
            let st = state.get_or_insert_with(|| AdamState {
                m: vec![0.0; flat.len()],
                v: vec![0.0; flat.len()],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - beta1.powi(st.t);
            let bc2 = 1.0 - beta2.powi(st.t);
            let mut i = 0;
            for p in params_mut(model) {
                for x in p.iter_mut() {
                    let g = flat[i];
                    st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                    st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                    let step = (st.m[i] / bc1) / ((st.v[i] / bc2).sqrt() + eps);
                    *x -= lr * (step + weight_decay * *x);
                    i += 1;
                }
            }
        }
    }
}

/// Label map predicted by `model` for `scene`. The background row, if any,
/// takes part in the softmax and is then discarded.
pub fn predict(model: &ToyModel, scene: &SceneInstance, text: &Tensor, temperature: f64) -> Result<LabelMap> {
    let fwd = forward(model, scene, text)?;
    let mut probs = class_probabilities(&fwd.similarity, temperature)?;
    let c = text.rows();
    if probs.rows() != c {
        let n = probs.cols();
        probs = Tensor::new(vec![c, n], probs.data()[..c * n].to_vec())?;
    }
    label_from_probabilities(&probs, &fwd.proposals, Some((scene.height, scene.width)))
}

/// Held-out IoU report and the unseen-to-seen confusion rate.
pub fn evaluate(
    model: &ToyModel,
    scenes: &[SceneInstance],
    text: &Tensor,
    temperature: f64,
    seen_mask: &[bool],
) -> Result<(IoUReport, f64)> {
    let c = text.rows();
    let preds = scenes
        .par_iter()
        .map(|s| predict(model, s, text, temperature))
        .collect::<Result<Vec<_>>>()?;
    let mut cm = ConfusionMatrix::new(c);
    let (mut unseen_px, mut to_seen) = (0usize, 0usize);
    for (pred, scene) in preds.iter().zip(scenes) {
        cm.accumulate(pred, &scene.truth, u32::MAX)?;
        for (&p, &g) in pred.labels.iter().zip(&scene.truth.labels) {
            if !seen_mask[g as usize] {
                unseen_px += 1;
                to_seen += usize::from(seen_mask[p as usize]);
            }
        }
    }
    let rate = if unseen_px == 0 { 0.0 } else { to_seen as f64 / unseen_px as f64 };
    Ok((IoUReport::from_confusion(&cm, seen_mask)?, rate))
}

/// Trains the toy model in `config.train.mode` and evaluates it on the
/// held-out scenes.
pub fn train_toy(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let tc = &config.train;
    let mut scenario = synth_scenario(tc, tc.seed)?;
    let num_seen = tc.num_seen();
    for scene in scenario.train.iter_mut() {
        scene.image_labels = image_labels_for_mode(scene, tc.mode, &scenario.text, num_seen, &config.pseudo)?;
    }
    let mut model = ToyModel::init(tc, tc.seed);
    let mut adam = None;
    let mut steps = Vec::with_capacity(tc.steps);
    let b = tc.batch_size.min(tc.train_scenes);
    let inv_b = 1.0 / b as f64;

    for step in 0..tc.steps {
        let batch: Vec<&SceneInstance> = (0..b)
            .map(|i| &scenario.train[(step * b + i) % scenario.train.len()])
            .collect();
        let results = batch
            .par_iter()
            .map(|s| scene_objective(&model, s, &scenario.text, tc.mode, &config.loss, None))
            .collect::<Result<Vec<_>>>()?;

        let mut sum = LossBreakdown::default();
        let mut grads = Gradients::zeros_like(&model);
        for (lb, g, _) in &results {
            sum.add_scaled(inv_b, lb);
            grads.add_scaled(inv_b, g)?;
        }
        if !sum.total.is_finite() {
            return Err(Error::Divergence(format!(
                "{} loss became {} at step {step}",
                tc.mode.name(),
                sum.total
            )));
        }
        steps.push(StepRecord {
            step,
            total: sum.total,
            class: sum.class,
            mask: sum.mask,
            rank: sum.rank,
        });
        apply_update(&mut model, &grads, tc.learning_rate, &tc.optimizer, &mut adam);
        if !model.is_finite() {
            return Err(Error::Divergence(format!(
                "{} parameters became non-finite at step {step}",
                tc.mode.name()
            )));
        }
    }

    let temperature = config.inference.resolved_temperature(&config.loss);
    let (report, rate) = evaluate(&model, &scenario.eval, &scenario.text, temperature, &tc.seen_mask())?;
    Ok(TrainOutcome {
        history: TrainingHistory {
            mode: tc.mode,
            seed: tc.seed,
            steps,
            report,
            unseen_to_seen_rate: rate,
        },
        model,
        scenario,
    })
}
