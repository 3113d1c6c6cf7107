//! Training: loss composition, augmentation, the SGD schedule, source
//! pre-training, and the round-based self-training adaptation loop.
//!
//! Every run writes a self-contained directory: a config snapshot, an
//! append-only metrics CSV (one row per optimizer step), the final
//! checkpoint, and for adaptation runs the per-round pseudo-labels,
//! round reports, and mode-occupancy tables. Runs are deterministic
//! given their config: all randomness flows from purpose-keyed streams
//! of the config seed.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayD, Ix2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{self, build_mcl_triplets};
use crate::error::{DrslError, Result};
use crate::mmdl::{self, BankView};
use crate::ops;
use crate::params::ParamSet;
use crate::pseudolabel::{self, delta_schedule, ProbMap, PseudoLabelSet, QualityReport};
use crate::rng::{stream, Purpose};
use crate::segnet::{image_leaf, Model, ModelSpec};
use crate::tape::{Id, Tape};
use crate::toyworld::{load_image_png, load_label_png, DatasetManifest, MANIFEST_FILE};
use crate::types::{Domain, ImageTensor, LabelMap, IGNORE};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ROUND_REPORTS_FILE: &str = "round_reports.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const PSEUDO_LABEL_DIR: &str = "pseudo_labels";

/// Which composite loss drives adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "drsl")]
    Drsl,
    #[serde(rename = "drsl+")]
    DrslPlus,
}

impl std::str::FromStr for Variant {
    type Err = DrslError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drsl" => Ok(Variant::Drsl),
            "drsl+" => Ok(Variant::DrslPlus),
            other => Err(DrslError::Config(format!(
                "unknown variant {other:?} (expected \"drsl\" or \"drsl+\")"
            ))),
        }
    }
}

/// Flat run configuration; the on-disk form is a TOML file with these
/// exact keys, and missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f32,
    pub eta: f32,
    pub gamma: f32,
    pub alpha: f32,
    pub alpha1: f32,
    pub sigma2: f32,
    pub modes: usize,
    pub t_e: usize,
    pub n_e: usize,
    pub crop: usize,
    pub lr_source: f32,
    pub lr_adapt: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub scale_min: f32,
    pub scale_max: f32,
    pub rounds: usize,
    pub steps_source: usize,
    pub steps_per_round: usize,
    pub seed: u64,
    pub variant: Variant,
    pub label_reduction_ratio: usize,
    /// Optional directory of pre-translated source images (same file
    /// names as the originals) pooled with them during training.
    pub translated_source: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.25,
            eta: 0.1,
            gamma: 0.1,
            alpha: 1.0,
            alpha1: 1.0,
            sigma2: 0.5,
            modes: 3,
            t_e: 64,
            n_e: 128,
            crop: 64,
            lr_source: 2.5e-4,
            lr_adapt: 5e-5,
            momentum: 0.9,
            weight_decay: 5e-4,
            scale_min: 0.5,
            scale_max: 1.5,
            rounds: 3,
            steps_source: 1500,
            steps_per_round: 400,
            seed: 0,
            variant: Variant::Drsl,
            label_reduction_ratio: 2,
            translated_source: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta", self.beta),
            ("eta", self.eta),
            ("gamma", self.gamma),
            ("alpha", self.alpha),
            ("alpha1", self.alpha1),
        ] {
            if !(v >= 0.0) {
                return Err(DrslError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.sigma2 <= 0.0 {
            return Err(DrslError::Config("sigma2 must be > 0".into()));
        }
        if self.modes == 0 {
            return Err(DrslError::Config("modes must be >= 1".into()));
        }
        if self.t_e == 0 || self.n_e == 0 {
            return Err(DrslError::Config("t_e and n_e must be >= 1".into()));
        }
        if self.crop < 8 || self.crop % 4 != 0 {
            return Err(DrslError::Config(format!(
                "crop {} must be >= 8 and divisible by 4",
                self.crop
            )));
        }
        if self.label_reduction_ratio == 0 || self.crop % self.label_reduction_ratio != 0 {
            return Err(DrslError::Config(format!(
                "label_reduction_ratio {} must divide crop {}",
                self.label_reduction_ratio, self.crop
            )));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(DrslError::Config(format!(
                "bad scale range [{}, {}]",
                self.scale_min, self.scale_max
            )));
        }
        if self.lr_source <= 0.0 || self.lr_adapt <= 0.0 {
            return Err(DrslError::Config("learning rates must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(DrslError::Config("momentum must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(DrslError::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DrslError::io(path, e))?;
        let cfg: TrainConfig =
            toml::from_str(&text).map_err(|e| DrslError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).expect("config serialization cannot fail");
        std::fs::write(path, text).map_err(|e| DrslError::io(path, e))
    }
}

/// Source split held in memory: images with their ground truth.
pub struct SourceSet {
    pub ids: Vec<String>,
    pub images: Vec<ImageTensor>,
    pub labels: Vec<LabelMap>,
}

/// Target split held in memory. Carries no labels by construction: the
/// training path has nothing to leak.
pub struct TargetSet {
    pub ids: Vec<String>,
    pub images: Vec<ImageTensor>,
}

fn stem_of(rel: &str) -> String {
    Path::new(rel)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| rel.to_string())
}

/// Loads the training view of a dataset: source images + labels (plus
/// the optional translated pool) and target images only.
pub fn load_training_data(
    manifest_path: &Path,
    translated_source: Option<&Path>,
) -> Result<(SourceSet, TargetSet, DatasetManifest)> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut source = SourceSet {
        ids: Vec::new(),
        images: Vec::new(),
        labels: Vec::new(),
    };
    for rel in &manifest.source {
        let label_rel = DatasetManifest::source_label_path(rel);
        source.ids.push(stem_of(rel));
        source.images.push(load_image_png(&base.join(rel))?);
        source.labels.push(load_label_png(&base.join(&label_rel))?);
    }
    if let Some(dir) = translated_source {
        for rel in &manifest.source {
            let name = Path::new(rel)
                .file_name()
                .ok_or_else(|| DrslError::Config(format!("bad source path {rel}")))?;
            let translated = dir.join(name);
            if !translated.is_file() {
                return Err(DrslError::MissingInput(format!(
                    "translated source image {} not found",
                    translated.display()
                )));
            }
            let label_rel = DatasetManifest::source_label_path(rel);
            source.ids.push(format!("{}_translated", stem_of(rel)));
            source.images.push(load_image_png(&translated)?);
            source.labels.push(load_label_png(&base.join(&label_rel))?);
        }
    }
    let mut target = TargetSet {
        ids: Vec::new(),
        images: Vec::new(),
    };
    for rel in &manifest.target {
        target.ids.push(stem_of(rel));
        target.images.push(load_image_png(&base.join(rel))?);
    }
    if source.images.is_empty() || target.images.is_empty() {
        return Err(DrslError::Config("dataset has an empty split".into()));
    }
    for (img, lab) in source.images.iter().zip(&source.labels) {
        if (img.height(), img.width()) != lab.0.dim() {
            return Err(DrslError::Shape("source image/label size mismatch".into()));
        }
        lab.validate(manifest.spec.num_classes)?;
    }
    Ok((source, target, manifest))
}

fn nearest_index(out_ix: usize, n_out: usize, n_in: usize) -> usize {
    (((out_ix as f32 + 0.5) * n_in as f32 / n_out as f32) as usize).min(n_in - 1)
}

/// Bilinear image rescale on raw values (training-side augmentation; the
/// differentiable path has its own resize).
pub fn scale_image(img: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = img.dim();
    let rows = ops::resize_axis::<f32>(h, out_h);
    let cols = ops::resize_axis::<f32>(w, out_w);
    Array3::from_shape_fn((c, out_h, out_w), |(ch, i, j)| {
        let (i0, i1, wi0, wi1) = rows[i];
        let (j0, j1, wj0, wj1) = cols[j];
        wi0 * (wj0 * img[[ch, i0, j0]] + wj1 * img[[ch, i0, j1]])
            + wi1 * (wj0 * img[[ch, i1, j0]] + wj1 * img[[ch, i1, j1]])
    })
}

/// Nearest-neighbor label rescale.
pub fn scale_labels(labels: &Array2<u8>, out_h: usize, out_w: usize) -> Array2<u8> {
    let (h, w) = labels.dim();
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        labels[[nearest_index(i, out_h, h), nearest_index(j, out_w, w)]]
    })
}

/// Mirrors image and labels left-to-right.
pub fn hflip(img: &Array3<f32>, labels: &Array2<u8>) -> (Array3<f32>, Array2<u8>) {
    let w = img.dim().2;
    let out_img = Array3::from_shape_fn(img.dim(), |(c, i, j)| img[[c, i, w - 1 - j]]);
    let lw = labels.dim().1;
    let out_lab = Array2::from_shape_fn(labels.dim(), |(i, j)| labels[[i, lw - 1 - j]]);
    (out_img, out_lab)
}

/// Pastes the region starting at (oy, ox) into a crop-sized canvas,
/// zero-padding the image and IGNORE-padding the labels.
pub fn crop_pad(
    img: &Array3<f32>,
    labels: &Array2<u8>,
    crop: usize,
    oy: usize,
    ox: usize,
) -> (ImageTensor, LabelMap) {
    let (c, h, w) = img.dim();
    let mut out_img = Array3::<f32>::zeros((c, crop, crop));
    let mut out_lab = Array2::<u8>::from_elem((crop, crop), IGNORE);
    let copy_h = crop.min(h.saturating_sub(oy));
    let copy_w = crop.min(w.saturating_sub(ox));
    for ch in 0..c {
        for i in 0..copy_h {
            for j in 0..copy_w {
                out_img[[ch, i, j]] = img[[ch, oy + i, ox + j]];
            }
        }
    }
    for i in 0..copy_h {
        for j in 0..copy_w {
            out_lab[[i, j]] = labels[[oy + i, ox + j]];
        }
    }
    (
        ImageTensor(out_img),
        LabelMap(out_lab),
    )
}

/// Random scale, horizontal flip, and crop, applied identically to the
/// image and its label map.
pub fn augment(
    img: &ImageTensor,
    labels: &LabelMap,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> (ImageTensor, LabelMap) {
    let scale = rng.random_range(cfg.scale_min..=cfg.scale_max);
    let (h, w) = (img.height(), img.width());
    let (sh, sw) = (
        ((h as f32 * scale).round() as usize).max(1),
        ((w as f32 * scale).round() as usize).max(1),
    );
    let (mut simg, mut slab) = if (sh, sw) == (h, w) {
        (img.0.clone(), labels.0.clone())
    } else {
        (scale_image(&img.0, sh, sw), scale_labels(&labels.0, sh, sw))
    };
    if rng.random_bool(0.5) {
        let (fi, fl) = hflip(&simg, &slab);
        simg = fi;
        slab = fl;
    }
    let oy = if sh > cfg.crop {
        rng.random_range(0..=sh - cfg.crop)
    } else {
        0
    };
    let ox = if sw > cfg.crop {
        rng.random_range(0..=sw - cfg.crop)
    } else {
        0
    };
    crop_pad(&simg, &slab, cfg.crop, oy, ox)
}

/// Polynomial learning-rate decay from `base` over `total` steps.
pub fn poly_lr(base: f32, step: usize, total: usize, power: f32) -> f32 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total - 1)) as f32 / total as f32;
    base * (1.0 - frac).powf(power)
}

/// SGD with momentum and decoupled-into-gradient weight decay.
pub struct Sgd {
    momentum: f32,
    weight_decay: f32,
    velocity: Vec<ArrayD<f32>>,
}

impl Sgd {
    pub fn new(params: &ParamSet<f32>, momentum: f32, weight_decay: f32) -> Self {
        let velocity = (0..params.len())
            .map(|ix| ArrayD::zeros(params.get(ix).value.raw_dim()))
            .collect();
        Sgd {
            momentum,
            weight_decay,
            velocity,
        }
    }

    /// One update: v ← m·v + (g + wd·w); w ← w − lr·v.
    pub fn step(
        &mut self,
        params: &mut ParamSet<f32>,
        grads: &[ArrayD<f32>],
        bound: &[Id],
        lr: f32,
    ) {
        for ix in 0..params.len() {
            let g = &grads[bound[ix]];
            let p = params.get_mut(ix);
            let v = &mut self.velocity[ix];
            ndarray::Zip::from(v)
                .and(&mut p.value)
                .and(g)
                .for_each(|v, w, &g| {
                    *v = self.momentum * *v + (g + self.weight_decay * *w);
                    *w -= lr * *v;
                });
        }
    }
}

/// Loss terms of one optimizer step, as logged to the metrics CSV. Each
/// value is the unweighted term; `total` is the weighted sum the
/// optimizer actually minimized.
#[derive(Debug, Clone, Copy)]
pub struct StepLog {
    pub seg_source: f32,
    pub seg_target: f32,
    pub emb: f32,
    pub cls: f32,
    pub mcl: f32,
    pub total: f32,
}

fn metrics_header() -> &'static str {
    "step,lr,seg_source,seg_target,emb,cls,mcl,total\n"
}

fn metrics_row(step: usize, lr: f32, log: &StepLog) -> String {
    format!(
        "{step},{lr:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}\n",
        log.seg_source, log.seg_target, log.emb, log.cls, log.mcl, log.total
    )
}

/// Mirrors the weighted accumulation used on the tape and asserts the
/// composed total matches it bit for bit. The composite losses must be
/// exactly the declared weighted sums of their terms.
fn check_linearity(tape: &Tape<f32>, total: Id, weighted: &[(Id, f32)]) -> f32 {
    let mut acc = 0.0f32;
    for &(id, w) in weighted {
        if w != 0.0 {
            acc += w * tape.scalar(id);
        }
    }
    let got = tape.scalar(total);
    assert!(
        acc.to_bits() == got.to_bits(),
        "composite loss drifted from its terms: {acc:?} vs {got:?}"
    );
    got
}

/// Eval-mode forward pass over a full image: per-pixel class
/// probabilities `[K, H, W]`.
pub fn forward_probs(model: &Model<f32>, img: &ImageTensor) -> Array3<f32> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = image_leaf(&mut tape, img);
    let feats = model.encode(&mut tape, &bound, x);
    let probs = model.segment(&mut tape, &bound, feats, img.height(), img.width());
    let v = tape.value(probs);
    v.clone()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("probabilities are [K, H, W]")
}

/// Argmax prediction plus the probabilities behind it.
pub fn predict(model: &Model<f32>, img: &ImageTensor) -> (LabelMap, Array3<f32>) {
    let probs = forward_probs(model, img);
    let (k, h, w) = probs.dim();
    let labels = Array2::from_shape_fn((h, w), |(i, j)| {
        let mut best = 0usize;
        let mut best_p = probs[[0, i, j]];
        for c in 1..k {
            if probs[[c, i, j]] > best_p {
                best_p = probs[[c, i, j]];
                best = c;
            }
        }
        best as u8
    });
    (LabelMap(labels), probs)
}

/// Confusion totals of the model over an image list, optionally split
/// across threads. Per-image matrices combine through the associative
/// `merge`, so the thread count cannot change the result.
pub fn eval_confusion(
    model: &Model<f32>,
    images: &[ImageTensor],
    labels: &[LabelMap],
    num_classes: usize,
    threads: usize,
) -> Result<crate::metrics::Confusion> {
    if images.len() != labels.len() {
        return Err(DrslError::Config(format!(
            "{} images vs {} label maps",
            images.len(),
            labels.len()
        )));
    }
    let mut conf = crate::metrics::Confusion::new(num_classes);
    if threads <= 1 || images.len() <= 1 {
        for (img, gt) in images.iter().zip(labels) {
            let (pred, _) = predict(model, img);
            conf.accumulate(gt, &pred)?;
        }
        return Ok(conf);
    }
    let chunk = images.len().div_ceil(threads);
    let parts: Vec<Result<crate::metrics::Confusion>> = std::thread::scope(|scope| {
        let handles: Vec<_> = images
            .chunks(chunk)
            .zip(labels.chunks(chunk))
            .map(|(imgs, gts)| {
                scope.spawn(move || {
                    let mut local = crate::metrics::Confusion::new(num_classes);
                    for (img, gt) in imgs.iter().zip(gts) {
                        let (pred, _) = predict(model, img);
                        local.accumulate(gt, &pred)?;
                    }
                    Ok(local)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    });
    for part in parts {
        conf.merge(&part?);
    }
    Ok(conf)
}

/// Mean IoU of the model over an image list with ground truth.
pub fn eval_miou(
    model: &Model<f32>,
    images: &[ImageTensor],
    labels: &[LabelMap],
    num_classes: usize,
) -> Result<Option<f64>> {
    Ok(eval_confusion(model, images, labels, num_classes, 1)?.miou())
}

struct StepOutcome {
    log: StepLog,
    grads: Vec<ArrayD<f32>>,
    bound: Vec<Id>,
}

/// Builds the source-training loss (segmentation + the two
/// distribution-head terms) on a fresh tape and runs backward.
fn source_step(
    model: &Model<f32>,
    cfg: &TrainConfig,
    img: &ImageTensor,
    labels: &LabelMap,
    embed_rng: &mut ChaCha8Rng,
    num_classes: usize,
) -> StepOutcome {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = image_leaf(&mut tape, img);
    let feats = model.encode(&mut tape, &bound, x);
    let probs = model.segment(&mut tape, &bound, feats, cfg.crop, cfg.crop);
    let seg = crate::segnet::loss_seg_source(&mut tape, probs, labels);

    let grid = cfg.crop / cfg.label_reduction_ratio;
    let field = mmdl::embed(model, &mut tape, &bound, feats, grid, grid);
    let y_small = mmdl::downscale_labels(labels, cfg.label_reduction_ratio)
        .expect("validated config: ratio divides crop");
    let samples = mmdl::sample_embeddings(
        &mut tape,
        field,
        &y_small,
        num_classes,
        cfg.t_e,
        Domain::Source,
        embed_rng,
    );
    let mut weighted: Vec<(Id, f32)> = vec![(seg.node, 1.0)];
    let (mut emb_logged, mut cls_logged) = (0.0f32, 0.0f32);
    if !samples.is_empty() {
        let bank = model.bank_id(&bound);
        let dist2 = mmdl::sample_dist2(&mut tape, &samples, bank);
        let emb_raw = mmdl::loss_emb(&mut tape, dist2, &samples, num_classes, cfg.modes, cfg.alpha);
        let cls = mmdl::loss_cls(&mut tape, dist2, &samples, num_classes, cfg.modes, cfg.sigma2);
        let w_emb = cfg.beta / samples.len() as f32;
        weighted.push((emb_raw, w_emb));
        weighted.push((cls, cfg.eta));
        emb_logged = tape.scalar(emb_raw) / samples.len() as f32;
        cls_logged = tape.scalar(cls);
    }
    let total = ops::weighted_sum(&mut tape, &weighted);
    let total_v = check_linearity(&tape, total, &weighted);
    let log = StepLog {
        seg_source: tape.scalar(seg.node),
        seg_target: 0.0,
        emb: emb_logged,
        cls: cls_logged,
        mcl: 0.0,
        total: total_v,
    };
    let grads = tape.backward(total);
    StepOutcome { log, grads, bound }
}

/// Builds the adaptation loss on one mixed batch (Eq. of the composed
/// source + target objective, with the optional contrastive term).
#[allow(clippy::too_many_arguments)]
fn adapt_step(
    model: &Model<f32>,
    cfg: &TrainConfig,
    src_img: &ImageTensor,
    src_labels: &LabelMap,
    tgt_img: &ImageTensor,
    tgt_pl: &LabelMap,
    src_embed_rng: &mut ChaCha8Rng,
    tgt_embed_rng: &mut ChaCha8Rng,
    triplet_rng: &mut ChaCha8Rng,
    num_classes: usize,
) -> StepOutcome {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);

    let xs = image_leaf(&mut tape, src_img);
    let fs = model.encode(&mut tape, &bound, xs);
    let ps = model.segment(&mut tape, &bound, fs, cfg.crop, cfg.crop);
    let seg_s = crate::segnet::loss_seg_source(&mut tape, ps, src_labels);

    let xt = image_leaf(&mut tape, tgt_img);
    let ft = model.encode(&mut tape, &bound, xt);
    let pt = model.segment(&mut tape, &bound, ft, cfg.crop, cfg.crop);
    let seg_t = crate::segnet::loss_seg_target(&mut tape, pt, tgt_pl);

    let grid = cfg.crop / cfg.label_reduction_ratio;
    let field_s = mmdl::embed(model, &mut tape, &bound, fs, grid, grid);
    let field_t = mmdl::embed(model, &mut tape, &bound, ft, grid, grid);
    let ys_small = mmdl::downscale_labels(src_labels, cfg.label_reduction_ratio)
        .expect("validated config: ratio divides crop");
    let yt_small = mmdl::downscale_labels(tgt_pl, cfg.label_reduction_ratio)
        .expect("validated config: ratio divides crop");
    let s_set = mmdl::sample_embeddings(
        &mut tape,
        field_s,
        &ys_small,
        num_classes,
        cfg.t_e,
        Domain::Source,
        src_embed_rng,
    );
    let t_set = mmdl::sample_embeddings(
        &mut tape,
        field_t,
        &yt_small,
        num_classes,
        cfg.t_e,
        Domain::Target,
        tgt_embed_rng,
    );

    let bank = model.bank_id(&bound);
    let s_dist2 = (!s_set.is_empty()).then(|| mmdl::sample_dist2(&mut tape, &s_set, bank));
    let t_dist2 = (!t_set.is_empty()).then(|| mmdl::sample_dist2(&mut tape, &t_set, bank));

    let ma = alignment::loss_ma(
        &mut tape,
        s_dist2,
        &s_set,
        t_dist2,
        &t_set,
        num_classes,
        cfg.modes,
        cfg.alpha,
    );

    let mut weighted: Vec<(Id, f32)> = vec![(seg_s.node, 1.0), (seg_t.node, 1.0), (ma.total, cfg.beta)];
    let mut cls_logged = 0.0f32;
    if let Some(d) = s_dist2 {
        let cls_s = mmdl::loss_cls(&mut tape, d, &s_set, num_classes, cfg.modes, cfg.sigma2);
        weighted.push((cls_s, cfg.eta));
        cls_logged += tape.scalar(cls_s);
    }
    if let Some(d) = t_dist2 {
        let cls_t = mmdl::loss_cls(&mut tape, d, &t_set, num_classes, cfg.modes, cfg.sigma2);
        weighted.push((cls_t, cfg.eta));
        cls_logged += tape.scalar(cls_t);
    }

    let mut mcl_logged = 0.0f32;
    if cfg.variant == Variant::DrslPlus && !t_set.is_empty() && !s_set.is_empty() {
        let bank_values = model.bank_values();
        let bank_view = BankView::new(
            bank_values.view(),
            num_classes,
            cfg.modes,
            cfg.sigma2,
        );
        let t_rows = tape.value(t_set.rows).clone();
        let s_rows = tape.value(s_set.rows).clone();
        let t_rows2 = t_rows.view().into_dimensionality::<Ix2>().unwrap();
        let s_rows2 = s_rows.view().into_dimensionality::<Ix2>().unwrap();
        let triplets = build_mcl_triplets(
            &t_rows2,
            &t_set.labels,
            &s_rows2,
            &s_set.labels,
            &bank_view,
            cfg.n_e,
            triplet_rng,
        );
        let mcl = alignment::loss_mcl(
            &mut tape,
            field_t,
            field_s,
            &t_set,
            &s_set,
            &triplets,
            cfg.alpha1,
        );
        weighted.push((mcl, cfg.gamma));
        mcl_logged = tape.scalar(mcl);
    }

    let total = ops::weighted_sum(&mut tape, &weighted);
    let total_v = check_linearity(&tape, total, &weighted);
    let log = StepLog {
        seg_source: tape.scalar(seg_s.node),
        seg_target: tape.scalar(seg_t.node),
        emb: tape.scalar(ma.total),
        cls: cls_logged,
        mcl: mcl_logged,
        total: total_v,
    };
    let grads = tape.backward(total);
    StepOutcome { log, grads, bound }
}

fn ensure_finite(log: &StepLog, step: usize) -> Result<()> {
    if !log.total.is_finite() {
        return Err(DrslError::Diverged {
            step,
            what: format!("loss total {:?}", log.total),
        });
    }
    Ok(())
}

const PHASE_SOURCE: u64 = 0;
const PHASE_ADAPT: u64 = 1;
const PHASE_OCCUPANCY: u64 = 2;

/// Trains the source model from scratch and writes the run directory:
/// config snapshot, metrics CSV, and final checkpoint.
pub fn train_source(cfg: &TrainConfig, manifest_path: &Path, out_dir: &Path) -> Result<Model<f32>> {
    cfg.validate()?;
    let (source, _target, manifest) = load_training_data(
        manifest_path,
        cfg.translated_source.as_deref().map(Path::new),
    )?;
    let k = manifest.spec.num_classes;
    std::fs::create_dir_all(out_dir).map_err(|e| DrslError::io(out_dir, e))?;
    cfg.save(&out_dir.join(CONFIG_SNAPSHOT))?;

    let spec = ModelSpec::desk(k, cfg.modes);
    let mut model: Model<f32> = Model::init(&spec, cfg.seed)?;
    let mut sgd = Sgd::new(&model.params, cfg.momentum, cfg.weight_decay);
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut metrics = std::io::BufWriter::new(
        std::fs::File::create(&metrics_path).map_err(|e| DrslError::io(&metrics_path, e))?,
    );
    metrics
        .write_all(metrics_header().as_bytes())
        .map_err(|e| DrslError::io(&metrics_path, e))?;

    for step in 0..cfg.steps_source {
        let s = step as u64;
        let mut order = stream(cfg.seed, Purpose::BatchOrder, &[PHASE_SOURCE, s]);
        let ix = order.random_range(0..source.images.len());
        let mut aug = stream(cfg.seed, Purpose::Augment, &[PHASE_SOURCE, s, 0]);
        let (img, labels) = augment(&source.images[ix], &source.labels[ix], cfg, &mut aug);
        let mut embed_rng = stream(cfg.seed, Purpose::EmbedSample, &[PHASE_SOURCE, s, 0]);
        let out = source_step(&model, cfg, &img, &labels, &mut embed_rng, k);
        ensure_finite(&out.log, step)?;
        let lr = poly_lr(cfg.lr_source, step, cfg.steps_source, 0.9);
        sgd.step(&mut model.params, &out.grads, &out.bound, lr);
        metrics
            .write_all(metrics_row(step, lr, &out.log).as_bytes())
            .map_err(|e| DrslError::io(&metrics_path, e))?;
    }
    metrics.flush().map_err(|e| DrslError::io(&metrics_path, e))?;
    model.save(&out_dir.join(CHECKPOINT_DIR))?;
    Ok(model)
}

/// Quality and accuracy snapshot of one adaptation round.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub delta: f64,
    /// Quality of the pseudo-labels generated at the top of the round,
    /// against held-out target ground truth when it is available.
    pub pl_quality: Option<QualityReport>,
    /// Target mIoU after the round's fine-tuning (needs eval labels).
    pub target_miou: Option<f64>,
}

/// Loads the eval-only target labels if they are present on disk. Their
/// absence is not an error: training proceeds and reports skip the
/// GT-based fields.
pub fn try_load_eval_labels(
    manifest_path: &Path,
    manifest: &DatasetManifest,
) -> Option<Vec<LabelMap>> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(manifest.target_eval_labels.len());
    for rel in &manifest.target_eval_labels {
        match load_label_png(&base.join(rel)) {
            Ok(l) => out.push(l),
            Err(_) => return None,
        }
    }
    if out.len() == manifest.target.len() {
        Some(out)
    } else {
        None
    }
}

fn dump_round_occupancy(
    model: &Model<f32>,
    cfg: &TrainConfig,
    source: &SourceSet,
    target: &TargetSet,
    pl: &PseudoLabelSet,
    num_classes: usize,
    round: usize,
    out_path: &Path,
) -> Result<()> {
    let take_src = source.images.len().min(2);
    let take_tgt = target.images.len().min(2);
    let mut s_rows: Vec<ArrayD<f32>> = Vec::new();
    let mut s_labels: Vec<u8> = Vec::new();
    let mut t_rows: Vec<ArrayD<f32>> = Vec::new();
    let mut t_labels: Vec<u8> = Vec::new();
    let gather = |img: &ImageTensor,
                  labels: &LabelMap,
                  domain: Domain,
                  rng: &mut ChaCha8Rng,
                  model: &Model<f32>|
     -> Result<(Vec<ArrayD<f32>>, Vec<u8>)> {
        let h = img.height();
        let w = img.width();
        if h % cfg.label_reduction_ratio != 0 || w % cfg.label_reduction_ratio != 0 {
            return Err(DrslError::Shape(format!(
                "image {h}x{w} not divisible by label ratio {}",
                cfg.label_reduction_ratio
            )));
        }
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = image_leaf(&mut tape, img);
        let feats = model.encode(&mut tape, &bound, x);
        let field = mmdl::embed(
            model,
            &mut tape,
            &bound,
            feats,
            h / cfg.label_reduction_ratio,
            w / cfg.label_reduction_ratio,
        );
        let y_small = mmdl::downscale_labels(labels, cfg.label_reduction_ratio)?;
        let set = mmdl::sample_embeddings(
            &mut tape,
            field,
            &y_small,
            num_classes,
            cfg.t_e,
            domain,
            rng,
        );
        let rows = tape.value(set.rows).clone();
        let out: Vec<ArrayD<f32>> = (0..set.len())
            .map(|r| rows.index_axis(ndarray::Axis(0), r).to_owned())
            .collect();
        Ok((out, set.labels))
    };
    for ix in 0..take_src {
        let mut rng = stream(
            cfg.seed,
            Purpose::EmbedSample,
            &[PHASE_OCCUPANCY, round as u64, ix as u64, 0],
        );
        let (rows, labels) = gather(
            &source.images[ix],
            &source.labels[ix],
            Domain::Source,
            &mut rng,
            model,
        )?;
        s_rows.extend(rows);
        s_labels.extend(labels);
    }
    for ix in 0..take_tgt {
        let mut rng = stream(
            cfg.seed,
            Purpose::EmbedSample,
            &[PHASE_OCCUPANCY, round as u64, ix as u64, 1],
        );
        let (rows, labels) = gather(
            &target.images[ix],
            &pl.labels[ix],
            Domain::Target,
            &mut rng,
            model,
        )?;
        t_rows.extend(rows);
        t_labels.extend(labels);
    }
    let dim = model.spec.embed_dim;
    let to_matrix = |rows: &[ArrayD<f32>]| -> Array2<f32> {
        let mut m = Array2::zeros((rows.len(), dim));
        for (r, row) in rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                m[[r, c]] = *v;
            }
        }
        m
    };
    let s_m = to_matrix(&s_rows);
    let t_m = to_matrix(&t_rows);
    let bank_values = model.bank_values();
    let bank = BankView::new(bank_values.view(), num_classes, cfg.modes, cfg.sigma2);
    let occ = alignment::mode_occupancy(&s_m.view(), &s_labels, &t_m.view(), &t_labels, &bank);
    alignment::write_occupancy_csv(&occ, out_path)
}

/// Runs the round-based adaptation loop from a source checkpoint.
/// Returns the adapted model and the per-round reports.
pub fn adapt(
    cfg: &TrainConfig,
    checkpoint_dir: &Path,
    manifest_path: &Path,
    out_dir: &Path,
) -> Result<(Model<f32>, Vec<RoundReport>)> {
    cfg.validate()?;
    let (source, target, manifest) = load_training_data(
        manifest_path,
        cfg.translated_source.as_deref().map(Path::new),
    )?;
    let k = manifest.spec.num_classes;
    let mut model: Model<f32> = Model::load(checkpoint_dir)?;
    if model.spec.num_classes != k {
        return Err(DrslError::Config(format!(
            "checkpoint has {} classes, dataset has {k}",
            model.spec.num_classes
        )));
    }
    if model.spec.modes != cfg.modes {
        return Err(DrslError::Config(format!(
            "checkpoint has {} modes, config wants {}",
            model.spec.modes, cfg.modes
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| DrslError::io(out_dir, e))?;
    cfg.save(&out_dir.join(CONFIG_SNAPSHOT))?;
    let eval_labels = try_load_eval_labels(manifest_path, &manifest);

    let metrics_path = out_dir.join(METRICS_FILE);
    let mut metrics = std::io::BufWriter::new(
        std::fs::File::create(&metrics_path).map_err(|e| DrslError::io(&metrics_path, e))?,
    );
    metrics
        .write_all(metrics_header().as_bytes())
        .map_err(|e| DrslError::io(&metrics_path, e))?;

    let mut sgd = Sgd::new(&model.params, cfg.momentum, cfg.weight_decay);
    let total_steps = cfg.rounds * cfg.steps_per_round;
    let mut reports = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        let delta = delta_schedule(round as i64)?;
        // pseudo-labels for this round, from the current model in eval
        // mode, then frozen
        let probs: Vec<ProbMap> = target
            .images
            .iter()
            .zip(&target.ids)
            .map(|(img, id)| ProbMap {
                id: id.clone(),
                probs: forward_probs(&model, img),
            })
            .collect();
        let pl = pseudolabel::generate(&probs, delta, round)?;
        let pl_dir = out_dir.join(PSEUDO_LABEL_DIR).join(format!("round_{round}"));
        pseudolabel::save_pseudo_labels(&pl, &pl_dir)?;
        let pl_quality = eval_labels
            .as_ref()
            .map(|gt| pseudolabel::eval_quality(&pl, gt, &probs))
            .transpose()?;

        for in_round in 0..cfg.steps_per_round {
            let step = round * cfg.steps_per_round + in_round;
            let s = step as u64;
            let mut order = stream(cfg.seed, Purpose::BatchOrder, &[PHASE_ADAPT, s]);
            let s_ix = order.random_range(0..source.images.len());
            let t_ix = order.random_range(0..target.images.len());
            let mut s_aug = stream(cfg.seed, Purpose::Augment, &[PHASE_ADAPT, s, 0]);
            let mut t_aug = stream(cfg.seed, Purpose::Augment, &[PHASE_ADAPT, s, 1]);
            let (s_img, s_lab) = augment(&source.images[s_ix], &source.labels[s_ix], cfg, &mut s_aug);
            let (t_img, t_lab) = augment(&target.images[t_ix], &pl.labels[t_ix], cfg, &mut t_aug);
            let mut s_embed = stream(cfg.seed, Purpose::EmbedSample, &[PHASE_ADAPT, s, 0]);
            let mut t_embed = stream(cfg.seed, Purpose::EmbedSample, &[PHASE_ADAPT, s, 1]);
            let mut trip = stream(cfg.seed, Purpose::TripletSample, &[PHASE_ADAPT, s]);
            let out = adapt_step(
                &model,
                cfg,
                &s_img,
                &s_lab,
                &t_img,
                &t_lab,
                &mut s_embed,
                &mut t_embed,
                &mut trip,
                k,
            );
            ensure_finite(&out.log, step)?;
            let lr = poly_lr(cfg.lr_adapt, step, total_steps, 0.9);
            sgd.step(&mut model.params, &out.grads, &out.bound, lr);
            metrics
                .write_all(metrics_row(step, lr, &out.log).as_bytes())
                .map_err(|e| DrslError::io(&metrics_path, e))?;
        }

        dump_round_occupancy(
            &model,
            cfg,
            &source,
            &target,
            &pl,
            k,
            round,
            &out_dir.join(format!("occupancy_round_{round}.csv")),
        )?;
        let target_miou = match &eval_labels {
            Some(gt) => eval_miou(&model, &target.images, gt, k)?,
            None => None,
        };
        reports.push(RoundReport {
            round,
            delta,
            pl_quality,
            target_miou,
        });
    }

    metrics.flush().map_err(|e| DrslError::io(&metrics_path, e))?;
    model.save(&out_dir.join(CHECKPOINT_DIR))?;
    let reports_path = out_dir.join(ROUND_REPORTS_FILE);
    let text = serde_json::to_string_pretty(&reports).expect("report serialization cannot fail");
    std::fs::write(&reports_path, text).map_err(|e| DrslError::io(&reports_path, e))?;
    Ok((model, reports))
}

/// Resolves a dataset directory or manifest path to the manifest file.
pub fn manifest_path_of(dataset: &Path) -> PathBuf {
    if dataset.is_dir() {
        dataset.join(MANIFEST_FILE)
    } else {
        dataset.to_path_buf()
    }
}
