//! Differentiable operations on the tape.
//!
//! Shapes are channel-first: images and feature maps are `[C, H, W]`,
//! sample matrices are `[N, D]`, scalars are rank-0. Convolution runs as
//! im2col plus a GEMM; the fused loss heads differentiate straight from
//! squared distances so hinge routing and arg-min/arg-max subgradients
//! stay in one place.

use ndarray::{Array2, Array3, ArrayView3, Axis, Ix1, Ix2, Ix3, Ix4};

use crate::tape::{Id, Real, Tape};
use crate::types::IGNORE;

/// Output spatial size of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, dilation: usize, pad: usize) -> usize {
    let span = dilation * (kernel - 1) + 1;
    assert!(
        input + 2 * pad >= span,
        "kernel span {span} exceeds padded input {input}+2*{pad}"
    );
    (input + 2 * pad - span) / stride + 1
}

fn im2col<F: Real>(
    x: &ArrayView3<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
    hout: usize,
    wout: usize,
) -> Array2<F> {
    let (cin, h, w) = x.dim();
    let mut col = Array2::<F>::zeros((cin * kh * kw, hout * wout));
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..hout {
                    let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wout {
                        let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * wout + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<F: Real>(
    dcol: &Array2<F>,
    dinput: &mut ndarray::ArrayViewMut3<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
    hout: usize,
    wout: usize,
) {
    let (cin, h, w) = dinput.dim();
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..hout {
                    let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wout {
                        let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dinput[[ci, iy as usize, ix as usize]] += dcol[[row, oy * wout + ox]];
                    }
                }
            }
        }
    }
}

/// 2-D convolution with zero padding. Input `[C_in, H, W]`, weight
/// `[C_out, C_in, kH, kW]`, bias `[C_out]`.
pub fn conv2d<F: Real>(
    tape: &mut Tape<F>,
    input: Id,
    weight: Id,
    bias: Id,
    stride: usize,
    dilation: usize,
    pad: usize,
) -> Id {
    let x = tape.value(input).view().into_dimensionality::<Ix3>().unwrap();
    let w = tape.value(weight).view().into_dimensionality::<Ix4>().unwrap();
    let b = tape.value(bias).view().into_dimensionality::<Ix1>().unwrap();
    let (cin, h, win) = x.dim();
    let (cout, cin_w, kh, kw) = w.dim();
    assert_eq!(cin, cin_w, "conv2d channel mismatch");
    assert_eq!(b.len(), cout, "conv2d bias length mismatch");
    let hout = conv_out_len(h, kh, stride, dilation, pad);
    let wout = conv_out_len(win, kw, stride, dilation, pad);

    let col = im2col(&x, kh, kw, stride, dilation, pad, hout, wout);
    let wmat = w.to_shape((cout, cin * kh * kw)).unwrap();
    let mut out = wmat.dot(&col);
    for (mut row, &bv) in out.outer_iter_mut().zip(b.iter()) {
        row += bv;
    }
    let value = out
        .into_shape_with_order((cout, hout, wout))
        .unwrap()
        .into_dyn();

    tape.push(value, move |g, values, grads| {
        let gm = g.view().into_dimensionality::<Ix3>().unwrap();
        let gm = gm.to_shape((cout, hout * wout)).unwrap();
        // Weight gradient: dW = g · colᵀ.
        let dw = gm.dot(&col.t());
        {
            let mut wg = grads[weight]
                .view_mut()
                .into_dimensionality::<Ix4>()
                .unwrap();
            let dw4 = dw.into_shape_with_order((cout, cin, kh, kw)).unwrap();
            wg += &dw4;
        }
        {
            let mut bg = grads[bias].view_mut().into_dimensionality::<Ix1>().unwrap();
            bg += &gm.sum_axis(Axis(1));
        }
        // Input gradient: scatter Wᵀ · g back through the im2col map.
        let wv = values[weight].view().into_dimensionality::<Ix4>().unwrap();
        let wmat = wv.to_shape((cout, cin * kh * kw)).unwrap();
        let dcol = wmat.t().dot(&gm);
        let mut ig = grads[input].view_mut().into_dimensionality::<Ix3>().unwrap();
        col2im_add(&dcol, &mut ig, kh, kw, stride, dilation, pad, hout, wout);
    })
}

/// Elementwise max(x, 0).
pub fn relu<F: Real>(tape: &mut Tape<F>, x: Id) -> Id {
    let value = tape.value(x).mapv(|a| if a > F::zero() { a } else { F::zero() });
    tape.push(value, move |g, values, grads| {
        ndarray::Zip::from(&mut grads[x])
            .and(g)
            .and(&values[x])
            .for_each(|d, &gv, &xv| {
                if xv > F::zero() {
                    *d += gv;
                }
            });
    })
}

/// Elementwise sum of same-shape tensors.
pub fn add_n<F: Real>(tape: &mut Tape<F>, terms: &[Id]) -> Id {
    assert!(!terms.is_empty());
    let mut value = tape.value(terms[0]).clone();
    for &t in &terms[1..] {
        value += tape.value(t);
    }
    let terms = terms.to_vec();
    tape.push(value, move |g, _values, grads| {
        for &t in &terms {
            grads[t] += g;
        }
    })
}

pub(crate) fn resize_axis<F: Real>(n_in: usize, n_out: usize) -> Vec<(usize, usize, F, F)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            // Half-pixel-center mapping, clamped at the borders.
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let w1 = src - i0 as f64;
            (i0, i1, F::from_f64(1.0 - w1), F::from_f64(w1))
        })
        .collect()
}

/// Bilinear resize of a `[C, H, W]` map to an arbitrary target size.
/// Interpolation weights at each output pixel sum to one, so constant
/// fields stay constant under both up- and downsampling.
pub fn bilinear_resize<F: Real>(tape: &mut Tape<F>, x: Id, out_h: usize, out_w: usize) -> Id {
    let xv = tape.value(x).view().into_dimensionality::<Ix3>().unwrap();
    let (c, h, w) = xv.dim();
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0);
    let ys = resize_axis::<F>(h, out_h);
    let xs = resize_axis::<F>(w, out_w);
    let mut out = Array3::<F>::zeros((c, out_h, out_w));
    for ci in 0..c {
        for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                out[[ci, oy, ox]] = wy0 * (wx0 * xv[[ci, y0, x0]] + wx1 * xv[[ci, y0, x1]])
                    + wy1 * (wx0 * xv[[ci, y1, x0]] + wx1 * xv[[ci, y1, x1]]);
            }
        }
    }
    tape.push(out.into_dyn(), move |g, _values, grads| {
        let gv = g.view().into_dimensionality::<Ix3>().unwrap();
        let mut xg = grads[x].view_mut().into_dimensionality::<Ix3>().unwrap();
        for ci in 0..c {
            for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                    let gp = gv[[ci, oy, ox]];
                    xg[[ci, y0, x0]] += wy0 * wx0 * gp;
                    xg[[ci, y0, x1]] += wy0 * wx1 * gp;
                    xg[[ci, y1, x0]] += wy1 * wx0 * gp;
                    xg[[ci, y1, x1]] += wy1 * wx1 * gp;
                }
            }
        }
    })
}

/// Per-pixel softmax over the class axis of a `[K, H, W]` map.
pub fn softmax_channels<F: Real>(tape: &mut Tape<F>, x: Id) -> Id {
    let xv = tape.value(x).view().into_dimensionality::<Ix3>().unwrap();
    let (k, h, w) = xv.dim();
    let mut out = Array3::<F>::zeros((k, h, w));
    for y in 0..h {
        for xcol in 0..w {
            let mut m = F::neg_infinity();
            for c in 0..k {
                m = m.max(xv[[c, y, xcol]]);
            }
            let mut s = F::zero();
            for c in 0..k {
                let e = (xv[[c, y, xcol]] - m).exp();
                out[[c, y, xcol]] = e;
                s += e;
            }
            for c in 0..k {
                out[[c, y, xcol]] /= s;
            }
        }
    }
    let out_id = tape.next_id();
    tape.push(out.into_dyn(), move |g, values, grads| {
        let p = values[out_id].view().into_dimensionality::<Ix3>().unwrap();
        let gv = g.view().into_dimensionality::<Ix3>().unwrap();
        let mut xg = grads[x].view_mut().into_dimensionality::<Ix3>().unwrap();
        for y in 0..h {
            for xcol in 0..w {
                let mut dot = F::zero();
                for c in 0..k {
                    dot += gv[[c, y, xcol]] * p[[c, y, xcol]];
                }
                for c in 0..k {
                    xg[[c, y, xcol]] += p[[c, y, xcol]] * (gv[[c, y, xcol]] - dot);
                }
            }
        }
    })
}

/// Mean cross-entropy −log p(label) over pixels whose label is not
/// `IGNORE`, read directly from a probability map `[K, H, W]`.
/// Returns a zero node when every pixel is ignored.
pub fn ce_from_probs<F: Real>(tape: &mut Tape<F>, probs: Id, labels: &Array2<u8>) -> Id {
    let pv = tape.value(probs).view().into_dimensionality::<Ix3>().unwrap();
    let (k, h, w) = pv.dim();
    assert_eq!((h, w), labels.dim(), "label map does not match probs");
    let tiny = F::min_positive_value();
    let mut n = 0usize;
    let mut total = F::zero();
    for y in 0..h {
        for x in 0..w {
            let l = labels[[y, x]];
            if l == IGNORE {
                continue;
            }
            assert!((l as usize) < k, "label {l} out of range");
            n += 1;
            total -= pv[[l as usize, y, x]].max(tiny).ln();
        }
    }
    if n == 0 {
        return tape.push(ndarray::arr0(F::zero()).into_dyn(), |_g, _v, _grads| {});
    }
    let value = total / F::from_usize(n);
    let labels = labels.clone();
    tape.push(ndarray::arr0(value).into_dyn(), move |g, values, grads| {
        let gs = g[[]] / F::from_usize(n);
        let pv = values[probs].view().into_dimensionality::<Ix3>().unwrap();
        let mut pg = grads[probs].view_mut().into_dimensionality::<Ix3>().unwrap();
        for y in 0..h {
            for x in 0..w {
                let l = labels[[y, x]];
                if l == IGNORE {
                    continue;
                }
                let p = pv[[l as usize, y, x]];
                if p > tiny {
                    pg[[l as usize, y, x]] -= gs / p;
                }
            }
        }
    })
}

/// Gathers feature vectors at pixel positions: `[D, H, W]` map plus
/// `(row, col)` coordinates produce a `[N, D]` sample matrix.
pub fn gather_pixels<F: Real>(tape: &mut Tape<F>, fmap: Id, coords: &[(usize, usize)]) -> Id {
    let fv = tape.value(fmap).view().into_dimensionality::<Ix3>().unwrap();
    let (d, h, w) = fv.dim();
    let mut out = Array2::<F>::zeros((coords.len(), d));
    for (n, &(y, x)) in coords.iter().enumerate() {
        assert!(y < h && x < w, "gather coordinate ({y},{x}) outside {h}x{w}");
        for di in 0..d {
            out[[n, di]] = fv[[di, y, x]];
        }
    }
    let coords = coords.to_vec();
    tape.push(out.into_dyn(), move |g, _values, grads| {
        let gv = g.view().into_dimensionality::<Ix2>().unwrap();
        let mut fg = grads[fmap].view_mut().into_dimensionality::<Ix3>().unwrap();
        for (n, &(y, x)) in coords.iter().enumerate() {
            for di in 0..d {
                fg[[di, y, x]] += gv[[n, di]];
            }
        }
    })
}

/// Squared Euclidean distances between all row pairs: `[N, D]` × `[M, D]`
/// → `[N, M]`.
pub fn pairwise_sqdist<F: Real>(tape: &mut Tape<F>, a: Id, b: Id) -> Id {
    let av = tape.value(a).view().into_dimensionality::<Ix2>().unwrap();
    let bv = tape.value(b).view().into_dimensionality::<Ix2>().unwrap();
    let (n, d) = av.dim();
    let (m, d2) = bv.dim();
    assert_eq!(d, d2, "pairwise_sqdist dim mismatch");
    let mut out = Array2::<F>::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut acc = F::zero();
            for t in 0..d {
                let diff = av[[i, t]] - bv[[j, t]];
                acc += diff * diff;
            }
            out[[i, j]] = acc;
        }
    }
    tape.push(out.into_dyn(), move |g, values, grads| {
        let gv = g.view().into_dimensionality::<Ix2>().unwrap();
        let av = values[a].view().into_dimensionality::<Ix2>().unwrap();
        let bv = values[b].view().into_dimensionality::<Ix2>().unwrap();
        let mut ag = grads[a].to_owned().into_dimensionality::<Ix2>().unwrap();
        let mut bg = grads[b].to_owned().into_dimensionality::<Ix2>().unwrap();
        for i in 0..n {
            for j in 0..m {
                let c = gv[[i, j]] + gv[[i, j]];
                if c == F::zero() {
                    continue;
                }
                for t in 0..d {
                    let diff = av[[i, t]] - bv[[j, t]];
                    ag[[i, t]] += c * diff;
                    bg[[j, t]] -= c * diff;
                }
            }
        }
        grads[a] = ag.into_dyn();
        grads[b] = bg.into_dyn();
    })
}

/// Column range of a class inside a `[N, K·M]` distance matrix.
#[inline]
fn class_cols(c: usize, modes: usize) -> std::ops::Range<usize> {
    c * modes..(c + 1) * modes
}

fn argmin_in<F: Real>(row: ndarray::ArrayView1<F>, cols: std::ops::Range<usize>) -> usize {
    let mut best = cols.start;
    for j in cols {
        if row[j] < row[best] {
            best = j;
        }
    }
    best
}

/// Margin loss over mode distances: per sample, hinge between the nearest
/// own-class mode and the nearest mode of any other class. Raw sum over
/// samples; callers normalize. `dist2` is `[N, K·M]`, row layout class-major.
pub fn loss_emb_from_dist2<F: Real>(
    tape: &mut Tape<F>,
    dist2: Id,
    labels: &[u8],
    num_classes: usize,
    modes: usize,
    margin: F,
) -> Id {
    let dv = tape.value(dist2).view().into_dimensionality::<Ix2>().unwrap();
    let (n, km) = dv.dim();
    assert_eq!(n, labels.len());
    assert_eq!(km, num_classes * modes);
    assert!(num_classes >= 2, "margin loss needs at least two classes");
    // (sample, positive col, negative col) for rows whose hinge is active.
    let mut active: Vec<(usize, usize, usize)> = Vec::new();
    let mut total = F::zero();
    for i in 0..n {
        let c = labels[i] as usize;
        assert!(c < num_classes, "label {c} out of range");
        let row = dv.row(i);
        let own = class_cols(c, modes);
        let pos = argmin_in(row, own.clone());
        let mut neg = if own.start == 0 { own.end } else { 0 };
        for j in 0..km {
            if own.contains(&j) {
                continue;
            }
            if row[j] < row[neg] {
                neg = j;
            }
        }
        let h = row[pos] - row[neg] + margin;
        if h > F::zero() {
            total += h;
            active.push((i, pos, neg));
        }
    }
    tape.push(ndarray::arr0(total).into_dyn(), move |g, _values, grads| {
        let gs = g[[]];
        let mut dg = grads[dist2].view_mut().into_dimensionality::<Ix2>().unwrap();
        for &(i, pos, neg) in &active {
            dg[[i, pos]] += gs;
            dg[[i, neg]] -= gs;
        }
    })
}

/// Mixture classification loss from mode distances: mean over samples of
/// −log Q(true class), where q ∝ exp(−dist2 / 2σ²) normalized over all
/// K·M modes and Q is the max over the true class's modes. `dist2` is
/// `[N, K·M]`.
pub fn loss_cls_from_dist2<F: Real>(
    tape: &mut Tape<F>,
    dist2: Id,
    labels: &[u8],
    num_classes: usize,
    modes: usize,
    sigma2: F,
) -> Id {
    let dv = tape.value(dist2).view().into_dimensionality::<Ix2>().unwrap();
    let (n, km) = dv.dim();
    assert_eq!(n, labels.len());
    assert_eq!(km, num_classes * modes);
    assert!(sigma2 > F::zero());
    if n == 0 {
        return tape.push(ndarray::arr0(F::zero()).into_dyn(), |_g, _v, _grads| {});
    }
    let half_inv = (F::from_f64(2.0) * sigma2).recip();
    let mut total = F::zero();
    for i in 0..n {
        let c = labels[i] as usize;
        assert!(c < num_classes);
        let row = dv.row(i);
        // z = −dist2 / 2σ²; loss = logsumexp(z) − max over own modes.
        let zmax = -row.iter().fold(F::infinity(), |m, &d| m.min(d)) * half_inv;
        let mut sum = F::zero();
        for &d in row.iter() {
            sum += (-d * half_inv - zmax).exp();
        }
        let lse = zmax + sum.ln();
        let own = class_cols(c, modes);
        let zt = -dv[[i, argmin_in(row, own)]] * half_inv;
        total += lse - zt;
    }
    let value = total / F::from_usize(n);
    let labels = labels.to_vec();
    tape.push(ndarray::arr0(value).into_dyn(), move |g, values, grads| {
        let gs = g[[]] / F::from_usize(n);
        let dvv = values[dist2].view().into_dimensionality::<Ix2>().unwrap();
        let mut dg = grads[dist2].view_mut().into_dimensionality::<Ix2>().unwrap();
        for i in 0..n {
            let c = labels[i] as usize;
            let row = dvv.row(i);
            let zmax = -row.iter().fold(F::infinity(), |m, &d| m.min(d)) * half_inv;
            let mut sum = F::zero();
            for &d in row.iter() {
                sum += (-d * half_inv - zmax).exp();
            }
            let own = class_cols(c, modes);
            let jt = argmin_in(row, own);
            for j in 0..km {
                let soft = (-row[j] * half_inv - zmax).exp() / sum;
                let indicator = if j == jt { F::one() } else { F::zero() };
                // d loss / d dist2 = (1{j = j*} − softmax_j) / 2σ².
                dg[[i, j]] += gs * (indicator - soft) * half_inv;
            }
        }
    })
}

/// Triplet hinge over row-aligned anchor/positive/negative matrices
/// `[N, D]`: Σ relu(‖a−p‖² − ‖a−n‖² + margin). Raw sum over rows.
pub fn loss_triplet_rows<F: Real>(
    tape: &mut Tape<F>,
    anchors: Id,
    positives: Id,
    negatives: Id,
    margin: F,
) -> Id {
    let av = tape.value(anchors).view().into_dimensionality::<Ix2>().unwrap();
    let pv = tape.value(positives).view().into_dimensionality::<Ix2>().unwrap();
    let nv = tape.value(negatives).view().into_dimensionality::<Ix2>().unwrap();
    let (n, d) = av.dim();
    assert_eq!(pv.dim(), (n, d));
    assert_eq!(nv.dim(), (n, d));
    let mut active = Vec::new();
    let mut total = F::zero();
    for i in 0..n {
        let mut dap = F::zero();
        let mut dan = F::zero();
        for t in 0..d {
            let e = av[[i, t]] - pv[[i, t]];
            dap += e * e;
            let e = av[[i, t]] - nv[[i, t]];
            dan += e * e;
        }
        let h = dap - dan + margin;
        if h > F::zero() {
            total += h;
            active.push(i);
        }
    }
    tape.push(ndarray::arr0(total).into_dyn(), move |g, values, grads| {
        let gs = g[[]];
        let two = F::from_f64(2.0);
        let av = values[anchors].view().into_dimensionality::<Ix2>().unwrap();
        let pv = values[positives].view().into_dimensionality::<Ix2>().unwrap();
        let nv = values[negatives].view().into_dimensionality::<Ix2>().unwrap();
        let mut ag = grads[anchors].to_owned().into_dimensionality::<Ix2>().unwrap();
        let mut pg = grads[positives].to_owned().into_dimensionality::<Ix2>().unwrap();
        let mut ng = grads[negatives].to_owned().into_dimensionality::<Ix2>().unwrap();
        for &i in &active {
            for t in 0..d {
                let a = av[[i, t]];
                ag[[i, t]] += gs * two * (nv[[i, t]] - pv[[i, t]]);
                pg[[i, t]] -= gs * two * (a - pv[[i, t]]);
                ng[[i, t]] += gs * two * (a - nv[[i, t]]);
            }
        }
        grads[anchors] = ag.into_dyn();
        grads[positives] = pg.into_dyn();
        grads[negatives] = ng.into_dyn();
    })
}

/// Weighted sum of scalar nodes. Zero-weight terms are skipped entirely,
/// in the value and in the backward pass, so a disabled term is bitwise
/// absent rather than merely multiplied by zero.
pub fn weighted_sum<F: Real>(tape: &mut Tape<F>, terms: &[(Id, F)]) -> Id {
    let mut value = F::zero();
    let kept: Vec<(Id, F)> = terms
        .iter()
        .copied()
        .filter(|&(_, w)| w != F::zero())
        .collect();
    for &(id, w) in &kept {
        value += tape.scalar(id) * w;
    }
    tape.push(ndarray::arr0(value).into_dyn(), move |g, _values, grads| {
        let gs = g[[]];
        for &(id, w) in &kept {
            grads[id] += &ndarray::arr0(gs * w).into_dyn();
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_err, numeric_gradient};
    use crate::rng::{stream, Purpose};
    use ndarray::{arr0, arr1, arr2, ArrayD, IxDyn};
    use rand::Rng;

    /// Test-only reduction: Σ coeffs ⊙ x, to funnel any op output into a
    /// scalar with a fixed, well-conditioned gradient.
    fn dot_const(tape: &mut Tape<f64>, x: Id, coeffs: &ArrayD<f64>) -> Id {
        assert_eq!(tape.value(x).shape(), coeffs.shape());
        let value = (tape.value(x) * coeffs).sum();
        let coeffs = coeffs.clone();
        tape.push(arr0(value).into_dyn(), move |g, _v, grads| {
            grads[x] += &(&coeffs * g[[]]);
        })
    }

    fn rand_array(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = stream(seed, Purpose::Scratch, &[shape.len() as u64]);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks one op against central differences w.r.t. every input.
    fn check_op<Build>(inputs: &[ArrayD<f64>], tol: f64, build: Build)
    where
        Build: Fn(&mut Tape<f64>, &[Id]) -> Id,
    {
        let mut tape = Tape::new();
        let ids: Vec<Id> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let root = build(&mut tape, &ids);
        let grads = tape.backward(root);
        let analytic: Vec<ArrayD<f64>> = ids.iter().map(|&id| grads[id].clone()).collect();
        let numeric = numeric_gradient(
            |vals| {
                let mut t = Tape::new();
                let ids: Vec<Id> = vals.iter().map(|x| t.leaf(x.clone())).collect();
                let root = build(&mut t, &ids);
                t.scalar(root)
            },
            inputs,
            1e-5,
        );
        let (err, input, flat) = max_rel_err(&analytic, &numeric);
        assert!(
            err < tol,
            "gradient mismatch: rel err {err:.3e} at input {input} element {flat}"
        );
    }

    #[test]
    fn conv_output_shape() {
        // stride 2, k=3, pad 1 halves even sizes; dilation widens the span.
        assert_eq!(conv_out_len(64, 3, 2, 1, 1), 32);
        assert_eq!(conv_out_len(64, 3, 1, 4, 4), 64);
        assert_eq!(conv_out_len(5, 3, 1, 1, 0), 3);
    }

    #[test]
    fn conv_identity_kernel_passes_through() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(rand_array(&[1, 4, 4], 1));
        let mut w = ArrayD::zeros(IxDyn(&[1, 1, 3, 3]));
        w[[0, 0, 1, 1]] = 1.0;
        let w = tape.leaf(w);
        let b = tape.leaf(arr1(&[0.0]).into_dyn());
        let y = conv2d(&mut tape, x, w, b, 1, 1, 1);
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv_matches_hand_computed_cell() {
        // 1x1 input channel, 2x2 kernel, no padding: pure dot product.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn().into_shape_with_order(IxDyn(&[1, 2, 2])).unwrap());
        let w = tape.leaf(
            arr2(&[[0.5, -1.0], [2.0, 0.25]])
                .into_dyn()
                .into_shape_with_order(IxDyn(&[1, 1, 2, 2]))
                .unwrap(),
        );
        let b = tape.leaf(arr1(&[0.125]).into_dyn());
        let y = conv2d(&mut tape, x, w, b, 1, 1, 0);
        let expect = 0.5 * 1.0 - 1.0 * 2.0 + 2.0 * 3.0 + 0.25 * 4.0 + 0.125;
        assert_eq!(tape.value(y)[[0, 0, 0]], expect);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let inputs = vec![
            rand_array(&[2, 6, 5], 10),
            rand_array(&[3, 2, 3, 3], 11),
            rand_array(&[3], 12),
        ];
        for &(stride, dilation, pad) in &[(1, 1, 1), (2, 1, 1), (1, 2, 2)] {
            check_op(&inputs, 1e-6, |t, ids| {
                let y = conv2d(t, ids[0], ids[1], ids[2], stride, dilation, pad);
                let coeffs = rand_array(t.value(y).shape(), 13);
                dot_const(t, y, &coeffs)
            });
        }
    }

    #[test]
    fn relu_gradient_masks_negatives() {
        // Values chosen clear of zero so the subgradient choice is moot.
        let x = arr1(&[1.0, -2.0, 0.5, -0.25]).into_dyn();
        check_op(&[x], 1e-8, |t, ids| {
            let y = relu(t, ids[0]);
            let coeffs = arr1(&[1.0, 2.0, 3.0, 4.0]).into_dyn();
            dot_const(t, y, &coeffs)
        });
    }

    #[test]
    fn add_n_sums_and_fans_out() {
        let a = rand_array(&[2, 3], 20);
        let b = rand_array(&[2, 3], 21);
        let c = rand_array(&[2, 3], 22);
        check_op(&[a, b, c], 1e-8, |t, ids| {
            let y = add_n(t, ids);
            let coeffs = rand_array(&[2, 3], 23);
            dot_const(t, y, &coeffs)
        });
    }

    #[test]
    fn bilinear_preserves_constants() {
        for &(oh, ow) in &[(8, 8), (2, 3), (5, 7)] {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(ArrayD::from_elem(IxDyn(&[2, 4, 4]), 0.7));
            let y = bilinear_resize(&mut tape, x, oh, ow);
            for v in tape.value(y).iter() {
                assert!((v - 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_doubling_interpolates_midpoints() {
        // 1-D ramp [0, 1] widened to 4: half-pixel centers give 0, ¼, ¾, 1.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            arr1(&[0.0, 1.0])
                .into_dyn()
                .into_shape_with_order(IxDyn(&[1, 1, 2]))
                .unwrap(),
        );
        let y = bilinear_resize(&mut tape, x, 1, 4);
        let out = tape.value(y);
        let expect = [0.0, 0.25, 0.75, 1.0];
        for (i, &e) in expect.iter().enumerate() {
            assert!((out[[0, 0, i]] - e).abs() < 1e-12, "index {i}");
        }
    }

    #[test]
    fn bilinear_gradients_match_finite_differences() {
        let x = rand_array(&[2, 3, 5], 30);
        for &(oh, ow) in &[(6, 10), (2, 2), (3, 5)] {
            check_op(&[x.clone()], 1e-8, |t, ids| {
                let y = bilinear_resize(t, ids[0], oh, ow);
                let coeffs = rand_array(&[2, oh, ow], 31);
                dot_const(t, y, &coeffs)
            });
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(rand_array(&[5, 3, 4], 40) * 10.0);
        let y = softmax_channels(&mut tape, x);
        let p = tape.value(y);
        for yy in 0..3 {
            for xx in 0..4 {
                let s: f64 = (0..5).map(|c| p[[c, yy, xx]]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[4, 2, 2]), 3.0));
        let y = softmax_channels(&mut tape, x);
        for v in tape.value(y).iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_gradients_match_finite_differences() {
        let x = rand_array(&[4, 2, 3], 41);
        check_op(&[x], 1e-7, |t, ids| {
            let y = softmax_channels(t, ids[0]);
            let coeffs = rand_array(&[4, 2, 3], 42);
            dot_const(t, y, &coeffs)
        });
    }

    #[test]
    fn ce_matches_hand_computed_mean() {
        let mut tape = Tape::<f64>::new();
        let mut p = ArrayD::from_elem(IxDyn(&[2, 1, 3]), 0.0);
        p[[0, 0, 0]] = 0.8;
        p[[1, 0, 0]] = 0.2;
        p[[0, 0, 1]] = 0.4;
        p[[1, 0, 1]] = 0.6;
        p[[0, 0, 2]] = 0.5;
        p[[1, 0, 2]] = 0.5;
        let probs = tape.leaf(p);
        let labels = arr2(&[[0u8, 1, IGNORE]]);
        let loss = ce_from_probs(&mut tape, probs, &labels);
        let expect = -(0.8f64.ln() + 0.6f64.ln()) / 2.0;
        assert!((tape.scalar(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn ce_all_ignored_is_zero_with_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let probs = tape.leaf(rand_array(&[3, 2, 2], 50).mapv(f64::abs) + 0.1);
        let labels = Array2::from_elem((2, 2), IGNORE);
        let loss = ce_from_probs(&mut tape, probs, &labels);
        assert_eq!(tape.scalar(loss), 0.0);
        let grads = tape.backward(loss);
        assert!(grads[probs].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ce_gradients_match_finite_differences() {
        let probs = rand_array(&[3, 2, 4], 51).mapv(|v| 0.2 + 0.6 * v.abs());
        let labels = arr2(&[[0u8, 1, 2, IGNORE], [2, IGNORE, 0, 1]]);
        check_op(&[probs], 1e-8, |t, ids| ce_from_probs(t, ids[0], &labels));
    }

    #[test]
    fn gather_reads_and_scatters() {
        let fmap = rand_array(&[3, 4, 4], 60);
        let coords = vec![(0, 0), (3, 2), (0, 0), (1, 3)];
        {
            let mut tape = Tape::<f64>::new();
            let id = tape.leaf(fmap.clone());
            let y = gather_pixels(&mut tape, id, &coords);
            for d in 0..3 {
                assert_eq!(tape.value(y)[[1, d]], fmap[[d, 3, 2]]);
            }
        }
        check_op(&[fmap], 1e-8, |t, ids| {
            let y = gather_pixels(t, ids[0], &coords);
            let coeffs = rand_array(&[4, 3], 61);
            dot_const(t, y, &coeffs)
        });
    }

    #[test]
    fn pairwise_sqdist_matches_direct_recount() {
        let a = rand_array(&[4, 3], 70);
        let b = rand_array(&[2, 3], 71);
        let mut tape = Tape::<f64>::new();
        let ida = tape.leaf(a.clone());
        let idb = tape.leaf(b.clone());
        let d = pairwise_sqdist(&mut tape, ida, idb);
        for i in 0..4 {
            for j in 0..2 {
                let direct: f64 = (0..3).map(|t| (a[[i, t]] - b[[j, t]]).powi(2)).sum();
                assert!((tape.value(d)[[i, j]] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pairwise_sqdist_gradients_match_finite_differences() {
        let a = rand_array(&[4, 3], 72);
        let b = rand_array(&[5, 3], 73);
        check_op(&[a, b], 1e-7, |t, ids| {
            let d = pairwise_sqdist(t, ids[0], ids[1]);
            let coeffs = rand_array(&[4, 5], 74);
            dot_const(t, d, &coeffs)
        });
    }

    #[test]
    fn loss_emb_worked_example() {
        // 1-D embeddings, class centers at 0 and 2, sample at 1.2 labeled 0:
        // own distance 1.44, other 0.64, hinge 1.44 − 0.64 + 1 = 1.8.
        let mut tape = Tape::<f64>::new();
        let e = tape.leaf(arr2(&[[1.2]]).into_dyn());
        let centers = tape.leaf(arr2(&[[0.0], [2.0]]).into_dyn());
        let d = pairwise_sqdist(&mut tape, e, centers);
        let loss = loss_emb_from_dist2(&mut tape, d, &[0], 2, 1, 1.0);
        assert!((tape.scalar(loss) - 1.8).abs() < 1e-12);
    }

    #[test]
    fn loss_emb_satisfied_margin_is_zero() {
        let mut tape = Tape::<f64>::new();
        let e = tape.leaf(arr2(&[[0.5]]).into_dyn());
        let centers = tape.leaf(arr2(&[[0.0], [2.0]]).into_dyn());
        let d = pairwise_sqdist(&mut tape, e, centers);
        let loss = loss_emb_from_dist2(&mut tape, d, &[0], 2, 1, 1.0);
        assert_eq!(tape.scalar(loss), 0.0);
    }

    #[test]
    fn loss_emb_gradients_match_finite_differences() {
        // Margins sit well away from zero and from arg-min ties.
        let dist2 = arr2(&[
            [0.30, 2.10, 1.40, 0.70, 3.00, 2.50],
            [1.90, 0.20, 0.90, 2.70, 1.30, 0.60],
        ])
        .into_dyn();
        check_op(&[dist2], 1e-8, |t, ids| {
            loss_emb_from_dist2(t, ids[0], &[0, 2], 3, 2, 1.0)
        });
    }

    #[test]
    fn loss_cls_worked_example() {
        // K=2, M=1, σ²=0.5, dist2 [0, 1] → q = [0.7311, 0.2689];
        // true class 0 → −ln 0.7311 ≈ 0.3133.
        let mut tape = Tape::<f64>::new();
        let d = tape.leaf(arr2(&[[0.0, 1.0]]).into_dyn());
        let loss = loss_cls_from_dist2(&mut tape, d, &[0], 2, 1, 0.5);
        assert!((tape.scalar(loss) - 0.31326168751822286).abs() < 1e-10);
    }

    #[test]
    fn loss_cls_uniform_distances_give_log_km() {
        let mut tape = Tape::<f64>::new();
        let d = tape.leaf(ArrayD::from_elem(IxDyn(&[3, 6]), 1.7));
        let loss = loss_cls_from_dist2(&mut tape, d, &[0, 1, 2], 3, 2, 0.5);
        assert!((tape.scalar(loss) - 6.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_cls_gradients_match_finite_differences() {
        let dist2 = arr2(&[
            [0.30, 2.10, 1.40, 0.70, 3.00, 2.50],
            [1.90, 0.20, 0.95, 2.70, 1.30, 0.60],
            [0.40, 1.10, 2.20, 1.80, 0.10, 0.90],
        ])
        .into_dyn();
        check_op(&[dist2], 1e-7, |t, ids| {
            loss_cls_from_dist2(t, ids[0], &[0, 2, 1], 3, 2, 0.5)
        });
    }

    #[test]
    fn triplet_worked_examples() {
        let mut tape = Tape::<f64>::new();
        // relu(1 − 4 + 1) = 0, then relu(1 − 1 + 1) = 1.
        let a = tape.leaf(arr2(&[[0.0, 0.0], [0.0, 0.0]]).into_dyn());
        let p = tape.leaf(arr2(&[[1.0, 0.0], [1.0, 0.0]]).into_dyn());
        let n = tape.leaf(arr2(&[[0.0, 2.0], [0.0, 1.0]]).into_dyn());
        let loss = loss_triplet_rows(&mut tape, a, p, n, 1.0);
        assert!((tape.scalar(loss) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn triplet_gradients_match_finite_differences() {
        let a = arr2(&[[0.1, 0.3], [1.0, -0.4]]).into_dyn();
        let p = arr2(&[[0.9, -0.2], [0.4, 0.6]]).into_dyn();
        let n = arr2(&[[0.3, 0.4], [2.0, -1.5]]).into_dyn();
        check_op(&[a, p, n], 1e-8, |t, ids| {
            loss_triplet_rows(t, ids[0], ids[1], ids[2], 1.0)
        });
    }

    #[test]
    fn weighted_sum_skips_zero_weights() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(arr0(2.0).into_dyn());
        let b = tape.leaf(arr0(f64::NAN).into_dyn());
        let c = tape.leaf(arr0(3.0).into_dyn());
        let s = weighted_sum(&mut tape, &[(a, 0.5), (b, 0.0), (c, 2.0)]);
        assert_eq!(tape.scalar(s), 7.0);
        let grads = tape.backward(s);
        assert_eq!(grads[a][[]], 0.5);
        assert_eq!(grads[b][[]], 0.0);
        assert_eq!(grads[c][[]], 2.0);
    }
}
