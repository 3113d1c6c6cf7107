//! Class-balanced pseudo-label generation over the target split.
//!
//! Candidates are argmax predictions; each class pools its candidates
//! across the whole split, sorts them by confidence, and keeps the top
//! ceil(δ·n_c). The schedule grows δ by five points per round from 20%.
//! Generated labels are written once per round and never touched
//! mid-round.

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{DrslError, Result};
use crate::metrics::Confusion;
use crate::toyworld::{load_label_png, save_label_png};
use crate::types::{LabelMap, IGNORE};

/// Per-pixel class probabilities `[K, H, W]` for one target image, with
/// a stable identity used for deterministic tie-breaking and on-disk
/// naming (must be a bare file stem).
#[derive(Debug, Clone)]
pub struct ProbMap {
    pub id: String,
    pub probs: Array3<f32>,
}

/// Selection fraction for a self-training round: 20% plus five points
/// per additional round, capped at 100%.
pub fn delta_schedule(round: i64) -> Result<f64> {
    if round < 0 {
        return Err(DrslError::Config(format!("round {round} must be >= 0")));
    }
    Ok((0.20 + 0.05 * round as f64).min(1.0))
}

/// One round's frozen pseudo-labels. `labels[i]` matches the i-th input
/// probability map; unselected pixels hold IGNORE, so the selection mask
/// is `labels != IGNORE` by construction.
#[derive(Debug, Clone)]
pub struct PseudoLabelSet {
    pub ids: Vec<String>,
    pub labels: Vec<LabelMap>,
    /// Confidence of the weakest kept pixel per class; `None` means the
    /// class never appeared as an argmax (nothing selected, cutoff +∞).
    pub thresholds: Vec<Option<f64>>,
    pub round: usize,
    pub delta: f64,
}

impl PseudoLabelSet {
    pub fn selected_pixels(&self) -> usize {
        self.labels
            .iter()
            .map(|l| l.0.iter().filter(|&&v| v != IGNORE).count())
            .sum()
    }

    pub fn total_pixels(&self) -> usize {
        self.labels.iter().map(|l| l.0.len()).sum()
    }

    pub fn coverage(&self) -> f64 {
        let total = self.total_pixels();
        if total == 0 {
            0.0
        } else {
            self.selected_pixels() as f64 / total as f64
        }
    }
}

/// Generates pseudo-labels for one round from eval-mode probabilities
/// over the whole target split.
pub fn generate(probs: &[ProbMap], delta: f64, round: usize) -> Result<PseudoLabelSet> {
    if probs.is_empty() {
        return Err(DrslError::Config("empty target split".into()));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(DrslError::Config(format!("delta {delta} outside (0, 1]")));
    }
    let k = probs[0].probs.dim().0;
    for p in probs {
        if p.probs.dim().0 != k {
            return Err(DrslError::Shape(format!(
                "probability map {} has {} classes, expected {k}",
                p.id,
                p.probs.dim().0
            )));
        }
        if p.probs.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(DrslError::Shape(format!(
                "probability map {} has invalid entries",
                p.id
            )));
        }
    }

    // candidate = per-pixel argmax (lowest class wins ties)
    let mut per_class: Vec<Vec<(f32, usize, usize, usize)>> = vec![Vec::new(); k];
    for (img_ix, p) in probs.iter().enumerate() {
        let (_, h, w) = p.probs.dim();
        for i in 0..h {
            for j in 0..w {
                let mut best_c = 0usize;
                let mut best_p = p.probs[[0, i, j]];
                for c in 1..k {
                    let v = p.probs[[c, i, j]];
                    if v > best_p {
                        best_p = v;
                        best_c = c;
                    }
                }
                per_class[best_c].push((best_p, img_ix, i, j));
            }
        }
    }

    let mut labels: Vec<LabelMap> = probs
        .iter()
        .map(|p| {
            let (_, h, w) = p.probs.dim();
            LabelMap(Array2::from_elem((h, w), IGNORE))
        })
        .collect();
    let mut thresholds = vec![None; k];
    for (c, candidates) in per_class.iter_mut().enumerate() {
        if candidates.is_empty() {
            continue;
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("confidences are finite")
                .then_with(|| probs[a.1].id.cmp(&probs[b.1].id))
                .then_with(|| (a.2, a.3).cmp(&(b.2, b.3)))
        });
        let keep = (delta * candidates.len() as f64).ceil() as usize;
        for &(conf, img_ix, i, j) in candidates.iter().take(keep) {
            labels[img_ix].0[[i, j]] = c as u8;
            thresholds[c] = Some(conf as f64);
        }
    }

    Ok(PseudoLabelSet {
        ids: probs.iter().map(|p| p.id.clone()).collect(),
        labels,
        thresholds,
        round,
        delta,
    })
}

/// Quality summary of one round's pseudo-labels against held-out ground
/// truth.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QualityReport {
    /// mIoU over selected pixels only; `None` when nothing was selected.
    pub pl_miou: Option<f64>,
    pub coverage: f64,
    /// Mean −Σ p ln p / ln K over every pixel of the split.
    pub self_entropy: f64,
}

/// Scores pseudo-labels against ground truth. Inputs are parallel to the
/// set's image order.
pub fn eval_quality(
    pl: &PseudoLabelSet,
    gt: &[LabelMap],
    probs: &[ProbMap],
) -> Result<QualityReport> {
    if gt.len() != pl.labels.len() || probs.len() != pl.labels.len() {
        return Err(DrslError::Config(format!(
            "quality inputs disagree: {} labels, {} gt, {} prob maps",
            pl.labels.len(),
            gt.len(),
            probs.len()
        )));
    }
    let k = probs[0].probs.dim().0;
    let mut conf = Confusion::new(k);
    for (ix, pred) in pl.labels.iter().enumerate() {
        if gt[ix].0.dim() != pred.0.dim() {
            return Err(DrslError::Shape(format!(
                "ground truth shape mismatch on {}",
                pl.ids[ix]
            )));
        }
        // restrict scoring to selected pixels by masking everything else
        let masked = LabelMap(Array2::from_shape_fn(gt[ix].0.dim(), |(i, j)| {
            if pred.0[[i, j]] == IGNORE {
                IGNORE
            } else {
                gt[ix].0[[i, j]]
            }
        }));
        conf.accumulate(&masked, pred)?;
    }
    let ln_k = (k as f64).ln();
    let mut ent = 0.0f64;
    let mut n_pixels = 0usize;
    for p in probs {
        let (_, h, w) = p.probs.dim();
        for i in 0..h {
            for j in 0..w {
                let mut h_pix = 0.0f64;
                for c in 0..k {
                    let v = p.probs[[c, i, j]] as f64;
                    if v > 0.0 {
                        h_pix -= v * v.ln();
                    }
                }
                ent += h_pix / ln_k;
            }
        }
        n_pixels += h * w;
    }
    Ok(QualityReport {
        pl_miou: conf.miou(),
        coverage: pl.coverage(),
        self_entropy: ent / n_pixels as f64,
    })
}

/// JSON sidecar stored next to the label PNGs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PseudoLabelMeta {
    pub round: usize,
    pub delta: f64,
    pub thresholds: Vec<Option<f64>>,
    pub coverage: f64,
}

pub const SIDECAR_FILE: &str = "pseudo_labels.json";

/// Persists one round's labels as PNGs named by image id, plus the
/// sidecar.
pub fn save_pseudo_labels(pl: &PseudoLabelSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DrslError::io(dir, e))?;
    for (id, labels) in pl.ids.iter().zip(&pl.labels) {
        save_label_png(labels, &dir.join(format!("{id}.png")))?;
    }
    let meta = PseudoLabelMeta {
        round: pl.round,
        delta: pl.delta,
        thresholds: pl.thresholds.clone(),
        coverage: pl.coverage(),
    };
    let text = serde_json::to_string_pretty(&meta).expect("sidecar serialization cannot fail");
    let path = dir.join(SIDECAR_FILE);
    std::fs::write(&path, text).map_err(|e| DrslError::io(path, e))
}

/// Loads a persisted round back, in the id order given.
pub fn load_pseudo_labels(dir: &Path, ids: &[String]) -> Result<(Vec<LabelMap>, PseudoLabelMeta)> {
    let meta_path = dir.join(SIDECAR_FILE);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| DrslError::io(meta_path, e))?;
    let meta: PseudoLabelMeta =
        serde_json::from_str(&text).map_err(|e| DrslError::decode(dir.join(SIDECAR_FILE), e.to_string()))?;
    let mut labels = Vec::with_capacity(ids.len());
    for id in ids {
        labels.push(load_label_png(&dir.join(format!("{id}.png")))?);
    }
    Ok((labels, meta))
}
