//! `maskrank` command-line interface.
//!
//! Every subcommand prints machine-readable JSON on stdout and diagnostics on
//! stderr. Usage errors exit with status 2, invalid inputs with status 1.
//! `MASKRANK_THREADS` caps the worker pool used by the batch subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use maskrank::config::Mode;
use maskrank::inference::{label_from_probabilities, class_probabilities};
use maskrank::io::{load_json, load_tensor, save_json, save_tensor};
use maskrank::losses::{
    bg_aware_class_loss, ce_class_loss, class_targets, dice_loss, focal_loss, ranking_loss_image, total_loss,
};
use maskrank::metrics::ConfusionMatrix;
use maskrank::pseudolabel::generate_pseudo_labels;
use maskrank::{
    hungarian, similarity_matrix, train_toy, Assignment, CostMatrix, ImageLabelSets, IoUReport, LabelMap,
    LabelSetFile, LossReport, ProposalEmbeddings, RunConfig, Tensor,
};

#[derive(Parser)]
#[command(name = "maskrank", version, about = "Mask-proposal zero-shot segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Minimum-cost matching of proposals (rows) to ground truths (columns).
    Match {
        /// `N × G` cost tensor (binary or JSON).
        #[arg(long)]
        cost: PathBuf,
    },
    /// Evaluate one loss on the inputs found in a directory.
    ///
    /// Tensors are read from `<name>.mten` or `<name>.json`:
    ///   ce, bg  — `R` (C × N) and `targets.json` ([[proposal, class], ...]),
    ///             or `assignment.json` plus `gt_labels.json`
    ///   rank    — `R` and `labels.json` ({"positives": [...], "negatives": [...]})
    ///   focal, dice — `pred` and `gt` of equal shape
    ///   total   — `class.json`, `mask.json`, `rank.json`; each a loss report or
    ///             a bare number, missing files count as absent components
    Loss {
        #[arg(long, value_enum)]
        kind: LossKind,
        #[arg(long)]
        inputs: PathBuf,
        /// Run configuration supplying loss weights and parameters.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Per-pixel semantic labels from class embeddings and mask proposals.
    Infer {
        /// Class embeddings `N × d`.
        #[arg(long)]
        embeddings: PathBuf,
        /// Text embeddings `C × d`.
        #[arg(long)]
        text: PathBuf,
        /// Mask proposals `N × H × W`, or `N × HW` with --height/--width.
        #[arg(long)]
        proposals: PathBuf,
        /// Label map output; a `.classes.json` sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Label set naming the classes.
        #[arg(long)]
        classes: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Softmax temperature; defaults to the configured value.
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
    /// Image-level unseen labels from per-proposal image embeddings.
    ///
    /// The directory holds one `<image_id>.mten|.json` tensor (`N × d`) per
    /// image and optionally `<image_id>.masks.mten|.json` (`N × H × W`); proposals
    /// with empty masks are skipped.
    PseudoLabel {
        #[arg(long)]
        embeddings: PathBuf,
        /// Unseen-class text embeddings `U × d`.
        #[arg(long)]
        text: PathBuf,
        #[arg(long, default_value_t = 0.99)]
        threshold: f64,
        #[arg(long, default_value_t = 100.0)]
        logit_scale: f64,
        /// JSON-lines output, one object per image.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class IoU, seen/unseen mIoU and hIoU of predicted label maps.
    Eval {
        /// Directory of predicted label maps.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground-truth label maps with the same file names.
        #[arg(long)]
        gt: PathBuf,
        /// Label set file, or a JSON array of seen class indices.
        #[arg(long)]
        seen: PathBuf,
        /// Class count when --seen is a plain index list.
        #[arg(long)]
        num_classes: Option<usize>,
        #[arg(long, default_value_t = maskrank::metrics::DEFAULT_IGNORE_INDEX)]
        ignore_index: u32,
        /// Also write `class,iou` rows here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train the toy model and report held-out IoU.
    TrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Per-step loss history CSV. With --all-modes one file per mode is
        /// written as `<stem>.<mode>.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Final IoU reports keyed by mode.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Train every mode with the same seed instead of the configured one.
        #[arg(long)]
        all_modes: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LossKind {
    Ce,
    Bg,
    Rank,
    Focal,
    Dice,
    Total,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Match { cost } => run_match(&cost),
        Command::Loss { kind, inputs, weights } => run_loss(kind, &inputs, weights.as_deref()),
        Command::Infer {
            embeddings,
            text,
            proposals,
            out,
            classes,
            config,
            temperature,
            height,
            width,
        } => run_infer(InferArgs {
            embeddings,
            text,
            proposals,
            out,
            classes,
            config,
            temperature,
            spatial: height.zip(width),
        }),
        Command::PseudoLabel {
            embeddings,
            text,
            threshold,
            logit_scale,
            out,
        } => run_pseudo(&embeddings, &text, threshold, logit_scale, &out),
        Command::Eval {
            pred,
            gt,
            seen,
            num_classes,
            ignore_index,
            csv,
        } => run_eval(&pred, &gt, &seen, num_classes, ignore_index, csv.as_deref()),
        Command::TrainToy {
            config,
            out,
            report,
            all_modes,
        } => run_train(config.as_deref(), &out, report.as_deref(), all_modes),
    };
    match result.and_then(|v| print_json(&v)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("MASKRANK_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("MASKRANK_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn read_tensor(path: &Path) -> Result<Tensor> {
    load_tensor(path).with_context(|| format!("reading {}", path.display()))
}

/// `<dir>/<name>.mten`, falling back to `<dir>/<name>.json`.
fn find_tensor(dir: &Path, name: &str) -> Result<Tensor> {
    let binary = dir.join(format!("{name}.mten"));
    if binary.exists() {
        return read_tensor(&binary);
    }
    let json = dir.join(format!("{name}.json"));
    if json.exists() {
        return read_tensor(&json);
    }
    bail!("no {name}.mten or {name}.json in {}", dir.display())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    load_json(path).with_context(|| format!("reading {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn run_match(cost: &Path) -> Result<serde_json::Value> {
    let assignment = hungarian(&CostMatrix::new(read_tensor(cost)?)?)?;
    Ok(serde_json::to_value(assignment)?)
}

fn targets_in(dir: &Path) -> Result<Vec<(usize, usize)>> {
    let direct = dir.join("targets.json");
    if direct.exists() {
        return read_json(&direct);
    }
    let assignment: Assignment = read_json(&dir.join("assignment.json"))?;
    let gt_labels: Vec<usize> = read_json(&dir.join("gt_labels.json"))?;
    Ok(class_targets(&assignment, &gt_labels)?)
}

/// A loss report, or just its value.
#[derive(Deserialize)]
#[serde(untagged)]
enum Component {
    Value(f64),
    Report(LossReport),
}

fn component(dir: &Path, name: &str) -> Result<Option<LossReport>> {
    let path = dir.join(format!("{name}.json"));
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(match read_json(&path)? {
        Component::Value(v) => LossReport::new(v),
        Component::Report(r) => r,
    }))
}

fn run_loss(kind: LossKind, dir: &Path, weights: Option<&Path>) -> Result<serde_json::Value> {
    let cfg = load_config(weights)?;
    let loss = &cfg.loss;
    let report = match kind {
        LossKind::Ce => ce_class_loss(&find_tensor(dir, "R")?, &targets_in(dir)?, loss.weights.temperature)?,
        LossKind::Bg => bg_aware_class_loss(&find_tensor(dir, "R")?, &targets_in(dir)?, &loss.weights, loss.bg_reduce)?,
        LossKind::Rank => {
            let labels: ImageLabelSets = read_json(&dir.join("labels.json"))?;
            ranking_loss_image(&find_tensor(dir, "R")?, &labels)?
        }
        LossKind::Focal => focal_loss(&find_tensor(dir, "pred")?, &find_tensor(dir, "gt")?, loss.mask.focal)?,
        LossKind::Dice => dice_loss(&find_tensor(dir, "pred")?, &find_tensor(dir, "gt")?, loss.mask.dice_eps)?,
        LossKind::Total => {
            let (class, mask, rank) = (component(dir, "class")?, component(dir, "mask")?, component(dir, "rank")?);
            if class.is_none() && mask.is_none() && rank.is_none() {
                bail!("no class.json, mask.json or rank.json in {}", dir.display());
            }
            total_loss(class.as_ref(), mask.as_ref(), rank.as_ref(), &loss.weights)?
        }
    };
    Ok(serde_json::to_value(report)?)
}

struct InferArgs {
    embeddings: PathBuf,
    text: PathBuf,
    proposals: PathBuf,
    out: PathBuf,
    classes: Option<PathBuf>,
    config: Option<PathBuf>,
    temperature: Option<f64>,
    spatial: Option<(usize, usize)>,
}

fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".classes.json");
    out.with_file_name(name)
}

fn run_infer(args: InferArgs) -> Result<serde_json::Value> {
    let cfg = load_config(args.config.as_deref())?;
    let temperature = args
        .temperature
        .unwrap_or_else(|| cfg.inference.resolved_temperature(&cfg.loss));
    let sim = similarity_matrix(&read_tensor(&args.embeddings)?, &read_tensor(&args.text)?)?;
    let names = match &args.classes {
        Some(p) => {
            let set: LabelSetFile = read_json(p)?;
            set.validate()?;
            if set.classes.len() != sim.num_classes() {
                bail!(
                    "label set names {} classes but the text embeddings have {}",
                    set.classes.len(),
                    sim.num_classes()
                );
            }
            set.classes
        }
        None => sim.class_names.clone(),
    };
    let probs = class_probabilities(&sim.values, temperature)?;
    let labels = label_from_probabilities(&probs, &read_tensor(&args.proposals)?, args.spatial)?;
    save_tensor(&labels.to_tensor()?, &args.out)?;
    save_json(&names, sidecar(&args.out))?;

    let mut pixels: BTreeMap<&str, usize> = BTreeMap::new();
    for &l in &labels.labels {
        *pixels.entry(names[l as usize].as_str()).or_default() += 1;
    }
    Ok(json!({
        "height": labels.height,
        "width": labels.width,
        "temperature": temperature,
        "pixels_per_class": pixels,
    }))
}

#[derive(Serialize)]
struct PseudoLine<'a> {
    image_id: &'a str,
    scores: Vec<f64>,
    labels: Vec<usize>,
}

/// Sorted `(id, path)` of every tensor in `dir` whose stem does not end with
/// `suffix_to_skip`.
fn tensors_in(dir: &Path, suffix_to_skip: Option<&str>) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str());
        if !matches!(ext, Some("mten" | "json")) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if suffix_to_skip.is_some_and(|s| stem.ends_with(s)) {
            continue;
        }
        out.push((stem, path));
    }
    out.sort();
    if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
        bail!("image {} has both a binary and a JSON file", w[0].0);
    }
    Ok(out)
}

fn run_pseudo(dir: &Path, text: &Path, threshold: f64, logit_scale: f64, out: &Path) -> Result<serde_json::Value> {
    let cfg = maskrank::PseudoConfig { threshold, logit_scale };
    cfg.validate()?;
    let text = read_tensor(text)?;
    let images = tensors_in(dir, Some(".masks"))?;
    let results = images
        .par_iter()
        .map(|(id, path)| {
            let raw = read_tensor(path)?;
            let masks = find_tensor(dir, &format!("{id}.masks")).ok();
            let emb = match masks {
                Some(m) => ProposalEmbeddings::from_masks(&raw, &m),
                None => ProposalEmbeddings::normalized(&raw),
            }
            .with_context(|| format!("image {id}"))?;
            let res = generate_pseudo_labels(&emb, &text, &cfg).with_context(|| format!("image {id}"))?;
            Ok(serde_json::to_string(&PseudoLine {
                image_id: id,
                scores: res.scores,
                labels: res.labels,
            })?)
        })
        .collect::<Result<Vec<String>>>()?;
    let mut body = results.join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    fs::write(out, body).with_context(|| format!("writing {}", out.display()))?;
    Ok(json!({
        "images": images.len(),
        "threshold": threshold,
        "logit_scale": logit_scale,
    }))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SeenSpec {
    LabelSet(LabelSetFile),
    Indices(Vec<usize>),
}

fn run_eval(
    pred_dir: &Path,
    gt_dir: &Path,
    seen: &Path,
    num_classes: Option<usize>,
    ignore_index: u32,
    csv: Option<&Path>,
) -> Result<serde_json::Value> {
    let preds = tensors_in(pred_dir, None)?;
    if preds.is_empty() {
        bail!("no label maps in {}", pred_dir.display());
    }
    let maps = preds
        .par_iter()
        .map(|(id, path)| {
            let pred = LabelMap::from_tensor(&read_tensor(path)?)?;
            let gt = LabelMap::from_tensor(&find_tensor(gt_dir, id)?)?;
            Ok((pred, gt))
        })
        .collect::<Result<Vec<_>>>()?;

    let (seen_mask, names) = match read_json::<SeenSpec>(seen)? {
        SeenSpec::LabelSet(set) => {
            set.validate()?;
            (set.seen_mask(), Some(set.classes))
        }
        SeenSpec::Indices(idx) => {
            let c = match num_classes {
                Some(c) => c,
                None => maps
                    .iter()
                    .flat_map(|(p, g)| p.labels.iter().chain(&g.labels))
                    .filter(|&&l| l != ignore_index)
                    .max()
                    .map_or(0, |&m| m as usize + 1)
                    .max(idx.iter().max().map_or(0, |m| m + 1)),
            };
            let mut mask = vec![false; c];
            for i in idx {
                if i >= c {
                    bail!("seen class {i} out of range for {c} classes");
                }
                mask[i] = true;
            }
            (mask, None)
        }
    };

    let mut cm = ConfusionMatrix::new(seen_mask.len());
    for ((id, _), (pred, gt)) in preds.iter().zip(&maps) {
        cm.accumulate(pred, gt, ignore_index).with_context(|| format!("image {id}"))?;
    }
    let report = IoUReport::from_confusion(&cm, &seen_mask)?;
    if let Some(path) = csv {
        fs::write(path, report.to_csv(names.as_deref())).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(serde_json::to_value(report)?)
}

fn mode_csv_path(out: &Path, mode: Mode) -> PathBuf {
    let stem = out.file_stem().unwrap_or_default().to_string_lossy();
    out.with_file_name(format!("{stem}.{}.csv", mode.name()))
}

fn run_train(config: Option<&Path>, out: &Path, report: Option<&Path>, all_modes: bool) -> Result<serde_json::Value> {
    let cfg = load_config(config)?;
    let modes: Vec<Mode> = if all_modes { Mode::ALL.to_vec() } else { vec![cfg.train.mode] };
    let mut reports = BTreeMap::new();
    let mut summary = BTreeMap::new();
    for mode in modes {
        let mut run = cfg.clone();
        run.train.mode = mode;
        let outcome = train_toy(&run).with_context(|| format!("training {}", mode.name()))?;
        let history = &outcome.history;
        let path = if all_modes { mode_csv_path(out, mode) } else { out.to_path_buf() };
        fs::write(&path, history.to_csv()).with_context(|| format!("writing {}", path.display()))?;
        let last = history.steps.last();
        summary.insert(
            mode.name(),
            json!({
                "final_total_loss": last.map(|s| s.total),
                "miou_seen": history.report.miou_seen,
                "miou_unseen": history.report.miou_unseen,
                "hiou": history.report.hiou,
                "unseen_to_seen_rate": history.unseen_to_seen_rate,
            }),
        );
        reports.insert(mode.name(), history.report.clone());
    }
    if let Some(path) = report {
        save_json(&reports, path)?;
    }
    Ok(json!({ "seed": cfg.train.seed, "modes": summary }))
}
