//! Segmentation metrics: confusion matrices, per-class IoU, and the
//! prediction-entropy summary used to judge pseudo-label quality.

use ndarray::Array2;

use crate::error::{DrslError, Result};
use crate::types::{LabelMap, IGNORE};

/// Class-confusion counts. Rows index ground truth, columns index the
/// prediction; ignored ground-truth pixels are excluded entirely.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub counts: Array2<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Confusion {
            counts: Array2::zeros((num_classes, num_classes)),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    /// Accumulates one image pair. Shapes must match; prediction values
    /// must be valid classes wherever ground truth is not ignored.
    pub fn accumulate(&mut self, gt: &LabelMap, pred: &LabelMap) -> Result<()> {
        if gt.0.dim() != pred.0.dim() {
            return Err(DrslError::Shape(format!(
                "confusion shapes differ: {:?} vs {:?}",
                gt.0.dim(),
                pred.0.dim()
            )));
        }
        let k = self.num_classes();
        for (&g, &p) in gt.0.iter().zip(pred.0.iter()) {
            if g == IGNORE {
                continue;
            }
            if (g as usize) >= k || (p as usize) >= k {
                return Err(DrslError::Shape(format!(
                    "label pair ({g}, {p}) outside {k} classes"
                )));
            }
            self.counts[[g as usize, p as usize]] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        assert_eq!(self.num_classes(), other.num_classes());
        self.counts += &other.counts;
    }

    /// Per-class IoU = TP / (TP + FP + FN). Classes that never occur in
    /// either ground truth or prediction get `None`.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes();
        (0..k)
            .map(|c| {
                let tp = self.counts[[c, c]];
                let fp: u64 = (0..k).filter(|&r| r != c).map(|r| self.counts[[r, c]]).sum();
                let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| self.counts[[c, p]]).sum();
                let denom = tp + fp + fn_;
                if denom == 0 {
                    None
                } else {
                    Some(tp as f64 / denom as f64)
                }
            })
            .collect()
    }

    /// Mean IoU over the classes that occur. `None` when no class does.
    pub fn miou(&self) -> Option<f64> {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            None
        } else {
            Some(ious.iter().sum::<f64>() / ious.len() as f64)
        }
    }

    /// Overall pixel accuracy over counted pixels.
    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return None;
        }
        let correct: u64 = (0..self.num_classes()).map(|c| self.counts[[c, c]]).sum();
        Some(correct as f64 / total as f64)
    }
}

/// Mean normalized prediction entropy: for each pixel's class
/// distribution, −Σ p ln p / ln K, averaged over all pixels given.
/// Lower means the model commits harder to its predictions.
pub fn mean_normalized_entropy(probs: &[Vec<f64>], num_classes: usize) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let ln_k = (num_classes as f64).ln();
    let mut acc = 0.0;
    for p in probs {
        let mut h = 0.0;
        for &v in p {
            if v > 0.0 {
                h -= v * v.ln();
            }
        }
        acc += h / ln_k;
    }
    acc / probs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn worked_two_class_example() {
        // gt [[0,0],[1,1]], pred [[0,1],[1,1]]: IoU_0 = 1/2, IoU_1 = 2/3,
        // mean = 0.5833...
        let gt = LabelMap(arr2(&[[0u8, 0], [1, 1]]));
        let pred = LabelMap(arr2(&[[0u8, 1], [1, 1]]));
        let mut conf = Confusion::new(2);
        conf.accumulate(&gt, &pred).unwrap();
        let ious = conf.per_class_iou();
        assert!((ious[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((ious[1].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((conf.miou().unwrap() - 0.5833).abs() < 1e-4);
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let gt = LabelMap(arr2(&[[0u8, 1], [2, 1]]));
        let mut conf = Confusion::new(3);
        conf.accumulate(&gt, &gt).unwrap();
        assert_eq!(conf.miou(), Some(1.0));
        assert_eq!(conf.pixel_accuracy(), Some(1.0));
    }

    #[test]
    fn ignored_gt_pixels_are_excluded() {
        let gt = LabelMap(arr2(&[[0u8, IGNORE], [IGNORE, 1]]));
        let pred = LabelMap(arr2(&[[0u8, 0], [0, 0]]));
        let mut conf = Confusion::new(2);
        conf.accumulate(&gt, &pred).unwrap();
        let total: u64 = conf.counts.iter().sum();
        assert_eq!(total, 2, "only non-ignored gt pixels counted");
        assert_eq!(conf.counts[[0, 0]], 1);
        assert_eq!(conf.counts[[1, 0]], 1);
    }

    #[test]
    fn absent_classes_are_excluded_from_the_mean() {
        // class 2 never occurs; mIoU averages the other two
        let gt = LabelMap(arr2(&[[0u8, 0], [1, 1]]));
        let pred = LabelMap(arr2(&[[0u8, 1], [1, 1]]));
        let mut conf = Confusion::new(3);
        conf.accumulate(&gt, &pred).unwrap();
        assert!(conf.per_class_iou()[2].is_none());
        assert!((conf.miou().unwrap() - 0.5833).abs() < 1e-4);
        // a predicted-only class still enters (IoU 0)
        let pred2 = LabelMap(arr2(&[[0u8, 2], [1, 1]]));
        let mut conf2 = Confusion::new(3);
        conf2.accumulate(&gt, &pred2).unwrap();
        assert_eq!(conf2.per_class_iou()[2], Some(0.0));
    }

    #[test]
    fn confusion_matches_brute_force_recount() {
        let mut rng_state = 0x2545F4914F6CDD1Du64;
        let mut next = move || {
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            rng_state
        };
        let k = 4;
        let gt = LabelMap(ndarray::Array2::from_shape_fn((9, 7), |_| {
            let v = (next() % 5) as u8;
            if v == 4 { IGNORE } else { v }
        }));
        let pred = LabelMap(ndarray::Array2::from_shape_fn((9, 7), |_| (next() % 4) as u8));
        let mut conf = Confusion::new(k);
        conf.accumulate(&gt, &pred).unwrap();
        for r in 0..k {
            for c in 0..k {
                let brute = gt
                    .0
                    .iter()
                    .zip(pred.0.iter())
                    .filter(|(&g, &p)| g == r as u8 && p == c as u8)
                    .count() as u64;
                assert_eq!(conf.counts[[r, c]], brute);
            }
        }
    }

    #[test]
    fn merge_equals_joint_accumulation() {
        let gt_a = LabelMap(arr2(&[[0u8, 1]]));
        let pred_a = LabelMap(arr2(&[[0u8, 0]]));
        let gt_b = LabelMap(arr2(&[[1u8, 1]]));
        let pred_b = LabelMap(arr2(&[[1u8, 0]]));
        let mut joint = Confusion::new(2);
        joint.accumulate(&gt_a, &pred_a).unwrap();
        joint.accumulate(&gt_b, &pred_b).unwrap();
        let mut merged = Confusion::new(2);
        merged.accumulate(&gt_a, &pred_a).unwrap();
        let mut other = Confusion::new(2);
        other.accumulate(&gt_b, &pred_b).unwrap();
        merged.merge(&other);
        assert_eq!(joint, merged);
    }

    #[test]
    fn mismatched_shapes_and_bad_labels_error() {
        let gt = LabelMap(arr2(&[[0u8, 1]]));
        let tall = LabelMap(arr2(&[[0u8], [1]]));
        let mut conf = Confusion::new(2);
        assert!(conf.accumulate(&gt, &tall).is_err());
        let wild = LabelMap(arr2(&[[0u8, 7]]));
        assert!(conf.accumulate(&gt, &wild).is_err());
    }

    #[test]
    fn entropy_bounds_and_uniform_case() {
        let uniform = vec![vec![0.25; 4]; 3];
        assert!((mean_normalized_entropy(&uniform, 4) - 1.0).abs() < 1e-12);
        let certain = vec![vec![1.0, 0.0, 0.0, 0.0]];
        assert_eq!(mean_normalized_entropy(&certain, 4), 0.0);
        let mixed = vec![vec![0.5, 0.5, 0.0, 0.0]];
        let expect = (2.0f64).ln() / (4.0f64).ln();
        assert!((mean_normalized_entropy(&mixed, 4) - expect).abs() < 1e-12);
    }
}
