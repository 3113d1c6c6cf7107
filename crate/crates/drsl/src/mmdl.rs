//! The multi-modal distribution head: an embedding block running parallel
//! to the segmentation head, a bank of per-class mode centers, Gaussian
//! mode posteriors, per-class embedding sampling, and the margin /
//! classification losses that regularize the embedding space.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand_chacha::ChaCha8Rng;

use crate::error::{DrslError, Result};
use crate::ops;
use crate::segnet::Model;
use crate::tape::{Id, Real, Tape};
use crate::types::{Domain, LabelMap, IGNORE};

/// Read-only view of the mode centers with their layout. Centers are
/// stored class-major: row `c·M + m` is mode `m` of class `c`.
#[derive(Debug, Clone, Copy)]
pub struct BankView<'a, F: Real> {
    pub centers: ArrayView2<'a, F>,
    pub num_classes: usize,
    pub modes: usize,
    pub sigma2: F,
}

impl<'a, F: Real> BankView<'a, F> {
    pub fn new(
        centers: ArrayView2<'a, F>,
        num_classes: usize,
        modes: usize,
        sigma2: F,
    ) -> Self {
        assert_eq!(centers.nrows(), num_classes * modes, "bank row count");
        assert!(sigma2 > F::zero());
        BankView {
            centers,
            num_classes,
            modes,
            sigma2,
        }
    }

    pub fn center(&self, class: usize, mode: usize) -> ArrayView1<'_, F> {
        self.centers.row(class * self.modes + mode)
    }
}

/// Squared distances from one embedding to every mode center: `[K, M]`.
pub fn mode_dist2<F: Real>(e: &ArrayView1<F>, bank: &BankView<F>) -> Array2<F> {
    assert_eq!(e.len(), bank.centers.ncols(), "embedding dim mismatch");
    Array2::from_shape_fn((bank.num_classes, bank.modes), |(c, m)| {
        let center = bank.center(c, m);
        let mut acc = F::zero();
        for (a, b) in e.iter().zip(center.iter()) {
            let d = *a - *b;
            acc += d * d;
        }
        acc
    })
}

/// Mode posteriors: q(c,m) ∝ exp(−dist2 / 2σ²), normalized over all K·M
/// entries, computed with max subtraction so large distances cannot
/// underflow the normalizer.
pub fn mode_posteriors<F: Real>(dist2: &ArrayView2<F>, sigma2: F) -> Array2<F> {
    assert!(sigma2 > F::zero());
    let half_inv = (F::from_f64(2.0) * sigma2).recip();
    let zmax = dist2
        .iter()
        .fold(F::infinity(), |acc, &d| acc.min(d))
        .neg()
        * half_inv;
    let mut q = dist2.mapv(|d| (-d * half_inv - zmax).exp());
    let sum = q.iter().copied().sum::<F>();
    q.mapv_inplace(|v| v / sum);
    q
}

/// Per-class posterior: the best mode's share, Q(c) = max_m q(c,m).
pub fn class_posterior<F: Real>(q: &ArrayView2<F>) -> Array1<F> {
    Array1::from_iter(
        q.outer_iter()
            .map(|row| row.iter().copied().fold(F::neg_infinity(), F::max)),
    )
}

/// Nearest-neighbor label subsampling with a top-left anchor. IGNORE
/// passes through. The spatial dims must divide evenly.
pub fn downscale_labels(y: &LabelMap, ratio: usize) -> Result<LabelMap> {
    if ratio == 0 {
        return Err(DrslError::Config("label ratio must be positive".into()));
    }
    let (h, w) = y.0.dim();
    if h % ratio != 0 || w % ratio != 0 {
        return Err(DrslError::Shape(format!(
            "label map {h}x{w} not divisible by ratio {ratio}"
        )));
    }
    if ratio == 1 {
        return Ok(y.clone());
    }
    Ok(LabelMap(Array2::from_shape_fn(
        (h / ratio, w / ratio),
        |(i, j)| y.0[[i * ratio, j * ratio]],
    )))
}

/// Embedding head forward: parallel dilated convs over base features,
/// summed, then bilinear-resized to the target grid (half input
/// resolution by default; the label-reduction ratio may move it).
pub fn embed<F: Real>(
    model: &Model<F>,
    tape: &mut Tape<F>,
    bound: &[Id],
    feats: Id,
    out_h: usize,
    out_w: usize,
) -> Id {
    let summed = model.dilated_head(tape, bound, feats, "embed_head");
    ops::bilinear_resize(tape, summed, out_h, out_w)
}

/// Embeddings gathered at labeled positions of one image, with their
/// class labels and grid coordinates. `rows` is a `[N, d̂]` tape node.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub rows: Id,
    pub labels: Vec<u8>,
    pub coords: Vec<(usize, usize)>,
    pub domain: Domain,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Samples up to `t_e` labeled positions per class (uniform, without
/// replacement) from a label map aligned with the embedding field, and
/// gathers their embeddings. Classes are visited in ascending order so
/// the draw sequence is reproducible.
pub fn sample_embeddings<F: Real>(
    tape: &mut Tape<F>,
    field: Id,
    labels: &LabelMap,
    num_classes: usize,
    t_e: usize,
    domain: Domain,
    rng: &mut ChaCha8Rng,
) -> SampleSet {
    let field_shape = tape.value(field).shape().to_vec();
    assert_eq!(
        (field_shape[1], field_shape[2]),
        labels.0.dim(),
        "label map does not match embedding field"
    );
    let mut per_class: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_classes];
    for ((i, j), &l) in labels.0.indexed_iter() {
        if l != IGNORE {
            per_class[l as usize].push((i, j));
        }
    }
    let mut coords = Vec::new();
    let mut out_labels = Vec::new();
    for (c, positions) in per_class.iter().enumerate() {
        if positions.is_empty() {
            continue;
        }
        let take = t_e.min(positions.len());
        let picks = rand::seq::index::sample(rng, positions.len(), take);
        for ix in picks.iter() {
            coords.push(positions[ix]);
            out_labels.push(c as u8);
        }
    }
    let rows = ops::gather_pixels(tape, field, &coords);
    SampleSet {
        rows,
        labels: out_labels,
        coords,
        domain,
    }
}

/// Distances from every sample row to every mode center, as a tape node
/// `[N, K·M]` shared by both losses below.
pub fn sample_dist2<F: Real>(tape: &mut Tape<F>, samples: &SampleSet, bank: Id) -> Id {
    ops::pairwise_sqdist(tape, samples.rows, bank)
}

/// Margin loss (raw sum) between each sample's nearest own-class mode and
/// the nearest mode of any other class.
pub fn loss_emb<F: Real>(
    tape: &mut Tape<F>,
    dist2: Id,
    samples: &SampleSet,
    num_classes: usize,
    modes: usize,
    alpha: F,
) -> Id {
    ops::loss_emb_from_dist2(tape, dist2, &samples.labels, num_classes, modes, alpha)
}

/// Mixture classification loss: mean of −log Q(true class) over samples.
pub fn loss_cls<F: Real>(
    tape: &mut Tape<F>,
    dist2: Id,
    samples: &SampleSet,
    num_classes: usize,
    modes: usize,
    sigma2: F,
) -> Id {
    ops::loss_cls_from_dist2(tape, dist2, &samples.labels, num_classes, modes, sigma2)
}
