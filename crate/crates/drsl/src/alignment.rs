//! Cross-domain alignment: assigning embeddings to their nearest
//! same-class mode, mining anchor/positive/negative triplets across the
//! domain gap, and the two adaptation-time losses built on top of them.

use ndarray::ArrayView2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::mmdl::{BankView, SampleSet};
use crate::ops;
use crate::tape::{Id, Real, Tape};

/// Index of the mode of class `c` nearest to the embedding, lowest index
/// winning ties.
pub fn assign_mode<F: Real>(e: &ndarray::ArrayView1<F>, bank: &BankView<F>, class: usize) -> usize {
    let mut best = 0usize;
    let mut best_d = F::infinity();
    for m in 0..bank.modes {
        let center = bank.center(class, m);
        let mut d = F::zero();
        for (a, b) in e.iter().zip(center.iter()) {
            let diff = *a - *b;
            d += diff * diff;
        }
        if d < best_d {
            best_d = d;
            best = m;
        }
    }
    best
}

/// Mode assignment for every row of a sample matrix at once.
pub fn assign_modes<F: Real>(
    rows: &ArrayView2<F>,
    labels: &[u8],
    bank: &BankView<F>,
) -> Vec<usize> {
    assert_eq!(rows.nrows(), labels.len());
    rows.outer_iter()
        .zip(labels)
        .map(|(row, &l)| assign_mode(&row, bank, l as usize))
        .collect()
}

/// One mined triplet, as row indices into the target (anchor) and source
/// (positive / negative) sample sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Mines up to `n_e` triplets: anchors drawn uniformly without
/// replacement from the target samples; each one pairs with a uniform
/// source sample of the same class assigned to the same mode, and a
/// uniform source sample of any other class. Anchors with no eligible
/// positive or negative are dropped, so a single-class source batch or an
/// empty target batch yields an empty list.
pub fn build_mcl_triplets<F: Real>(
    tgt_rows: &ArrayView2<F>,
    tgt_labels: &[u8],
    src_rows: &ArrayView2<F>,
    src_labels: &[u8],
    bank: &BankView<F>,
    n_e: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Triplet> {
    if tgt_labels.is_empty() || src_labels.is_empty() {
        return Vec::new();
    }
    let src_modes = assign_modes(src_rows, src_labels, bank);
    let tgt_modes = assign_modes(tgt_rows, tgt_labels, bank);
    // source rows bucketed by (class, mode) for positives, by class for
    // negatives
    let mut by_class_mode =
        vec![Vec::<usize>::new(); bank.num_classes * bank.modes];
    let mut by_class = vec![Vec::<usize>::new(); bank.num_classes];
    for (ix, (&l, &m)) in src_labels.iter().zip(&src_modes).enumerate() {
        by_class_mode[l as usize * bank.modes + m].push(ix);
        by_class[l as usize].push(ix);
    }
    let n_src = src_labels.len();
    let take = n_e.min(tgt_labels.len());
    let anchor_picks = rand::seq::index::sample(rng, tgt_labels.len(), take);
    let mut out = Vec::new();
    for anchor in anchor_picks.iter() {
        let c = tgt_labels[anchor] as usize;
        let positives = &by_class_mode[c * bank.modes + tgt_modes[anchor]];
        if positives.is_empty() {
            continue;
        }
        let n_neg = n_src - by_class[c].len();
        if n_neg == 0 {
            continue;
        }
        let positive = positives[rng.random_range(0..positives.len())];
        // pick the k-th source row whose class differs from c
        let k = rng.random_range(0..n_neg);
        let negative = src_labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l as usize != c)
            .nth(k)
            .expect("negative count was checked above")
            .0;
        out.push(Triplet {
            anchor,
            positive,
            negative,
        });
    }
    out
}

/// Mode-contrastive loss: a margin hinge pulling each target anchor
/// toward its matched source embedding and away from the other-class
/// one. Raw sum over triplets; zero when the batch is empty.
pub fn loss_mcl<F: Real>(
    tape: &mut Tape<F>,
    tgt_field: Id,
    src_field: Id,
    tgt_set: &SampleSet,
    src_set: &SampleSet,
    triplets: &[Triplet],
    margin: F,
) -> Id {
    let anchor_coords: Vec<_> = triplets.iter().map(|t| tgt_set.coords[t.anchor]).collect();
    let pos_coords: Vec<_> = triplets.iter().map(|t| src_set.coords[t.positive]).collect();
    let neg_coords: Vec<_> = triplets.iter().map(|t| src_set.coords[t.negative]).collect();
    let anchors = ops::gather_pixels(tape, tgt_field, &anchor_coords);
    let positives = ops::gather_pixels(tape, src_field, &pos_coords);
    let negatives = ops::gather_pixels(tape, src_field, &neg_coords);
    ops::loss_triplet_rows(tape, anchors, positives, negatives, margin)
}

/// The two per-domain margin terms of the alignment loss, each averaged
/// over its own sample count, plus their sum. An empty domain's term is
/// dropped.
#[derive(Debug, Clone, Copy)]
pub struct MaTerms {
    pub total: Id,
    pub source: Option<Id>,
    pub target: Option<Id>,
}

/// Mode-alignment loss: the margin loss on source samples plus the same
/// loss on pseudo-labeled target samples, each normalized by its own
/// sample count.
pub fn loss_ma<F: Real>(
    tape: &mut Tape<F>,
    src_dist2: Option<Id>,
    src_set: &SampleSet,
    tgt_dist2: Option<Id>,
    tgt_set: &SampleSet,
    num_classes: usize,
    modes: usize,
    alpha: F,
) -> MaTerms {
    let mut weighted: Vec<(Id, F)> = Vec::new();
    let mut source = None;
    let mut target = None;
    if let Some(d) = src_dist2 {
        if !src_set.is_empty() {
            let raw = crate::mmdl::loss_emb(tape, d, src_set, num_classes, modes, alpha);
            let w = F::from_usize(src_set.len()).recip();
            weighted.push((raw, w));
            source = Some(raw);
        }
    }
    if let Some(d) = tgt_dist2 {
        if !tgt_set.is_empty() {
            let raw = crate::mmdl::loss_emb(tape, d, tgt_set, num_classes, modes, alpha);
            let w = F::from_usize(tgt_set.len()).recip();
            weighted.push((raw, w));
            target = Some(raw);
        }
    }
    let total = ops::weighted_sum(tape, &weighted);
    MaTerms {
        total,
        source,
        target,
    }
}

/// One row of the per-round mode occupancy dump.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyRow {
    pub class: usize,
    pub mode: usize,
    pub source_count: usize,
    pub target_count: usize,
    pub mean_dist2: f64,
}

/// Counts how many source and target embeddings each mode attracts and
/// the mean squared distance of its members to the center.
pub fn mode_occupancy<F: Real>(
    src_rows: &ArrayView2<F>,
    src_labels: &[u8],
    tgt_rows: &ArrayView2<F>,
    tgt_labels: &[u8],
    bank: &BankView<F>,
) -> Vec<OccupancyRow> {
    let mut rows: Vec<OccupancyRow> = (0..bank.num_classes)
        .flat_map(|c| {
            (0..bank.modes).map(move |m| OccupancyRow {
                class: c,
                mode: m,
                source_count: 0,
                target_count: 0,
                mean_dist2: 0.0,
            })
        })
        .collect();
    let tally = |rows_v: &ArrayView2<F>, labels: &[u8], is_src: bool, out: &mut Vec<OccupancyRow>| {
        for (row, &l) in rows_v.outer_iter().zip(labels) {
            let c = l as usize;
            let m = assign_mode(&row, bank, c);
            let center = bank.center(c, m);
            let mut d = 0.0f64;
            for (a, b) in row.iter().zip(center.iter()) {
                let diff = (*a - *b).as_f64();
                d += diff * diff;
            }
            let slot = &mut out[c * bank.modes + m];
            if is_src {
                slot.source_count += 1;
            } else {
                slot.target_count += 1;
            }
            slot.mean_dist2 += d;
        }
    };
    tally(src_rows, src_labels, true, &mut rows);
    tally(tgt_rows, tgt_labels, false, &mut rows);
    for r in &mut rows {
        let n = r.source_count + r.target_count;
        if n > 0 {
            r.mean_dist2 /= n as f64;
        }
    }
    rows
}

/// Writes the occupancy table as CSV.
pub fn write_occupancy_csv(rows: &[OccupancyRow], path: &std::path::Path) -> crate::Result<()> {
    let mut out = String::from("class,mode,source_count,target_count,mean_dist2\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6}\n",
            r.class, r.mode, r.source_count, r.target_count, r.mean_dist2
        ));
    }
    std::fs::write(path, out).map_err(|e| crate::DrslError::io(path, e))
}
