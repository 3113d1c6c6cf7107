//! The segmentation model: a small stride-4 convolutional encoder, a
//! parallel dilated-convolution class head, and the cross-entropy
//! segmentation losses. The embedding head and mode bank share the same
//! parameter registry so one checkpoint carries the whole model.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DrslError, Result};
use crate::ops;
use crate::params::{load_checkpoint, save_checkpoint, ParamSet};
use crate::rng::{stream, Purpose};
use crate::tape::{Id, Real, Tape};
use crate::types::{ImageTensor, LabelMap, IGNORE};

/// Spatial reduction of the encoder: input H×W to features H/4×W/4.
pub const ENCODER_STRIDE: usize = 4;
/// The embedding field lives at half input resolution by default.
pub const EMBED_STRIDE: usize = 2;

pub const MODEL_SPEC_FILE: &str = "model.json";
/// Registry name of the mode-center matrix.
pub const BANK_PARAM: &str = "mode_bank.centers";

/// Architecture hyperparameters. Desk-scale defaults keep a full training
/// run in the minutes range; the micro variant exists for 64-bit gradient
/// checking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub num_classes: usize,
    /// Width of the first encoder stage.
    pub mid_dim: usize,
    /// Width of the base features (d).
    pub feat_dim: usize,
    /// Embedding dimensionality (d̂), well below `feat_dim`.
    pub embed_dim: usize,
    /// Modes per class in the bank (M).
    pub modes: usize,
    /// Dilation rates of the parallel head branches.
    pub head_rates: Vec<usize>,
}

impl ModelSpec {
    pub fn desk(num_classes: usize, modes: usize) -> Self {
        ModelSpec {
            num_classes,
            mid_dim: 32,
            feat_dim: 64,
            embed_dim: 16,
            modes,
            head_rates: vec![1, 2, 4, 8],
        }
    }

    /// Tiny configuration for finite-difference runs.
    pub fn micro() -> Self {
        ModelSpec {
            num_classes: 3,
            mid_dim: 4,
            feat_dim: 6,
            embed_dim: 3,
            modes: 2,
            head_rates: vec![1, 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(DrslError::Config("num_classes must be at least 2".into()));
        }
        if self.modes == 0 {
            return Err(DrslError::Config("modes must be at least 1".into()));
        }
        if self.embed_dim == 0 || self.embed_dim >= self.feat_dim {
            return Err(DrslError::Config(
                "embed_dim must be positive and below feat_dim".into(),
            ));
        }
        if self.head_rates.is_empty() {
            return Err(DrslError::Config("head_rates must be non-empty".into()));
        }
        Ok(())
    }

    /// Encoder layout: (in, out, stride) per 3×3 conv, padding 1.
    fn encoder_layers(&self) -> Vec<(usize, usize, usize)> {
        vec![
            (3, self.mid_dim, 2),
            (self.mid_dim, self.feat_dim, 1),
            (self.feat_dim, self.feat_dim, 2),
            (self.feat_dim, self.feat_dim, 1),
        ]
    }

    /// Every parameter the model owns, in registry order.
    fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, (cin, cout, _)) in self.encoder_layers().iter().enumerate() {
            out.push((format!("encoder.conv{i}.weight"), vec![*cout, *cin, 3, 3]));
            out.push((format!("encoder.conv{i}.bias"), vec![*cout]));
        }
        for &rate in &self.head_rates {
            out.push((
                format!("seg_head.r{rate}.weight"),
                vec![self.num_classes, self.feat_dim, 3, 3],
            ));
            out.push((format!("seg_head.r{rate}.bias"), vec![self.num_classes]));
        }
        for &rate in &self.head_rates {
            out.push((
                format!("embed_head.r{rate}.weight"),
                vec![self.embed_dim, self.feat_dim, 3, 3],
            ));
            out.push((format!("embed_head.r{rate}.bias"), vec![self.embed_dim]));
        }
        out.push((
            BANK_PARAM.to_string(),
            vec![self.num_classes * self.modes, self.embed_dim],
        ));
        out
    }
}

/// A model: architecture spec plus its parameter registry.
#[derive(Debug, Clone)]
pub struct Model<F: Real> {
    pub spec: ModelSpec,
    pub params: ParamSet<F>,
}

impl<F: Real> Model<F> {
    /// Fresh parameters: He-style Gaussians for conv weights, zero biases,
    /// and mode centers at the embedding's initial scale (std 1/√d̂).
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::new();
        for (ix, (name, shape)) in spec.param_layout().into_iter().enumerate() {
            let mut rng = stream(seed, Purpose::Init, &[ix as u64]);
            let value = if name.ends_with(".bias") {
                ArrayD::zeros(IxDyn(&shape))
            } else if name == BANK_PARAM {
                let std = 1.0 / (spec.embed_dim as f64).sqrt();
                let dist = Normal::new(0.0, std).unwrap();
                ArrayD::from_shape_fn(IxDyn(&shape), |_| F::from_f64(dist.sample(&mut rng)))
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                ArrayD::from_shape_fn(IxDyn(&shape), |_| F::from_f64(dist.sample(&mut rng)))
            };
            params.register(&name, value);
        }
        Ok(Model {
            spec: spec.clone(),
            params,
        })
    }

    /// Wraps an existing registry, validating names and shapes.
    pub fn from_params(spec: ModelSpec, params: ParamSet<F>) -> Result<Self> {
        spec.validate()?;
        let layout = spec.param_layout();
        if layout.len() != params.len() {
            return Err(DrslError::Shape(format!(
                "expected {} parameters, registry has {}",
                layout.len(),
                params.len()
            )));
        }
        for (expected, actual) in layout.iter().zip(params.iter()) {
            if expected.0 != actual.name || expected.1 != actual.value.shape() {
                return Err(DrslError::Shape(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    expected.0,
                    expected.1,
                    actual.name,
                    actual.value.shape()
                )));
            }
        }
        Ok(Model { spec, params })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| DrslError::io(dir, e))?;
        let spec_path = dir.join(MODEL_SPEC_FILE);
        let json = serde_json::to_string_pretty(&self.spec).expect("spec serializes");
        fs::write(&spec_path, json).map_err(|e| DrslError::io(&spec_path, e))?;
        save_checkpoint(dir, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec_path = dir.join(MODEL_SPEC_FILE);
        let text = fs::read_to_string(&spec_path).map_err(|e| DrslError::io(&spec_path, e))?;
        let spec: ModelSpec =
            serde_json::from_str(&text).map_err(|e| DrslError::decode(&spec_path, e.to_string()))?;
        let params = load_checkpoint(dir)?;
        Model::from_params(spec, params)
    }

    /// Registers all parameters on a tape; returned ids are parallel to
    /// registry order.
    pub fn bind(&self, tape: &mut Tape<F>) -> Vec<Id> {
        self.params.bind(tape)
    }

    fn conv_ids(&self, bound: &[Id], name: &str) -> (Id, Id) {
        let w = self
            .params
            .index_of(&format!("{name}.weight"))
            .unwrap_or_else(|| panic!("missing parameter {name}.weight"));
        let b = self.params.index_of(&format!("{name}.bias")).unwrap();
        (bound[w], bound[b])
    }

    pub fn bank_id(&self, bound: &[Id]) -> Id {
        bound[self.params.index_of(BANK_PARAM).expect("bank registered")]
    }

    /// Current mode-center values as a `[K·M, embed_dim]` matrix view.
    pub fn bank_values(&self) -> ndarray::ArrayView2<'_, F> {
        let ix = self.params.index_of(BANK_PARAM).expect("bank registered");
        self.params
            .get(ix)
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("bank is a matrix")
    }

    /// Encoder forward: image `[3, H, W]` to base features
    /// `[feat_dim, H/4, W/4]`. H and W must be divisible by 4.
    pub fn encode(&self, tape: &mut Tape<F>, bound: &[Id], image: Id) -> Id {
        let shape = tape.value(image).shape().to_vec();
        assert_eq!(shape.len(), 3, "image must be [3, H, W]");
        assert!(
            shape[1] % ENCODER_STRIDE == 0 && shape[2] % ENCODER_STRIDE == 0,
            "image size {}x{} not divisible by {ENCODER_STRIDE}",
            shape[1],
            shape[2]
        );
        let mut x = image;
        for (i, (_, _, stride)) in self.spec.encoder_layers().iter().enumerate() {
            let (w, b) = self.conv_ids(bound, &format!("encoder.conv{i}"));
            x = ops::conv2d(tape, x, w, b, *stride, 1, 1);
            x = ops::relu(tape, x);
        }
        x
    }

    /// Sum of the parallel dilated branches of one head over base features.
    pub(crate) fn dilated_head(
        &self,
        tape: &mut Tape<F>,
        bound: &[Id],
        feats: Id,
        prefix: &str,
    ) -> Id {
        let branches: Vec<Id> = self
            .spec
            .head_rates
            .iter()
            .map(|&rate| {
                let (w, b) = self.conv_ids(bound, &format!("{prefix}.r{rate}"));
                ops::conv2d(tape, feats, w, b, 1, rate, rate)
            })
            .collect();
        ops::add_n(tape, &branches)
    }

    /// Segmentation head: dilated branches summed, bilinear upsample to
    /// `(out_h, out_w)`, per-pixel softmax. Output is `[K, out_h, out_w]`
    /// with unit column sums.
    pub fn segment(
        &self,
        tape: &mut Tape<F>,
        bound: &[Id],
        feats: Id,
        out_h: usize,
        out_w: usize,
    ) -> Id {
        let logits = self.dilated_head(tape, bound, feats, "seg_head");
        let up = ops::bilinear_resize(tape, logits, out_h, out_w);
        ops::softmax_channels(tape, up)
    }
}

/// Puts an image on the tape as a leaf.
pub fn image_leaf<F: Real>(tape: &mut Tape<F>, image: &ImageTensor) -> Id {
    tape.leaf(image.0.mapv(|v| F::from_f64(v as f64)).into_dyn())
}

/// A segmentation loss node plus how many pixels contributed. A term over
/// zero pixels is the zero node; callers can warn on `is_empty`.
#[derive(Debug, Clone, Copy)]
pub struct SegLossTerm {
    pub node: Id,
    pub pixels: usize,
}

impl SegLossTerm {
    pub fn is_empty(&self) -> bool {
        self.pixels == 0
    }
}

fn count_labeled(labels: &LabelMap) -> usize {
    labels.0.iter().filter(|&&v| v != IGNORE).count()
}

/// Source segmentation loss: mean cross-entropy over labeled pixels.
pub fn loss_seg_source<F: Real>(tape: &mut Tape<F>, probs: Id, y: &LabelMap) -> SegLossTerm {
    SegLossTerm {
        node: ops::ce_from_probs(tape, probs, &y.0),
        pixels: count_labeled(y),
    }
}

/// Target segmentation loss: mean cross-entropy over pseudo-labeled
/// pixels (the selection mask is the non-IGNORE set of the label map).
pub fn loss_seg_target<F: Real>(tape: &mut Tape<F>, probs: Id, pseudo: &LabelMap) -> SegLossTerm {
    SegLossTerm {
        node: ops::ce_from_probs(tape, probs, &pseudo.0),
        pixels: count_labeled(pseudo),
    }
}

/// Combined segmentation loss: source term plus target term, with the
/// terms kept separately for logging.
pub struct SegTotal {
    pub total: Id,
    pub source: SegLossTerm,
    pub target: SegLossTerm,
}

pub fn loss_seg_total<F: Real>(
    tape: &mut Tape<F>,
    src_probs: Id,
    y_s: &LabelMap,
    tgt_probs: Id,
    pseudo: &LabelMap,
) -> SegTotal {
    let source = loss_seg_source(tape, src_probs, y_s);
    let target = loss_seg_target(tape, tgt_probs, pseudo);
    let total = ops::weighted_sum(tape, &[(source.node, F::one()), (target.node, F::one())]);
    SegTotal {
        total,
        source,
        target,
    }
}
