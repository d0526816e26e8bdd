//! Pure forward/backward kernels shared by the tape and the eval-mode path.

use ndarray::{Array1, Array2, Array4, ArrayView3, ArrayView4, Axis};

use super::Scalar;

/// 2-D convolution, stride 1. `x`: (N, Cin, H, W); `w`: (Cout, Cin, KH, KW).
/// Output spatial dims: `H + 2*pad - KH + 1` (same-shape for 3x3 with pad 1).
pub fn conv2d_fwd<F: Scalar>(
    x: &ArrayView4<F>,
    w: &ArrayView4<F>,
    bias: Option<&Array1<F>>,
    pad: usize,
) -> Array4<F> {
    let (n, cin, h, width) = x.dim();
    let (cout, cin_w, kh, kw) = w.dim();
    assert_eq!(cin, cin_w, "channel mismatch");
    let ho = h + 2 * pad + 1 - kh;
    let wo = width + 2 * pad + 1 - kw;
    let w_mat = w
        .to_shape((cout, cin * kh * kw))
        .expect("conv weight reshape")
        .to_owned();
    let mut out = Array4::<F>::zeros((n, cout, ho, wo));
    for i in 0..n {
        let cols = im2col(&x.index_axis(Axis(0), i), kh, kw, pad);
        let out_mat = w_mat.dot(&cols); // (Cout, Ho*Wo)
        let mut out_i = out.index_axis_mut(Axis(0), i);
        for c in 0..cout {
            let src = out_mat.row(c);
            let mut dst = out_i.index_axis_mut(Axis(0), c);
            let b = bias.map_or(F::zero(), |bv| bv[c]);
            for (d, &s) in dst.iter_mut().zip(src.iter()) {
                *d = s + b;
            }
        }
    }
    out
}

/// Gradients of [`conv2d_fwd`] w.r.t. input, weight and bias.
pub fn conv2d_bwd<F: Scalar>(
    x: &ArrayView4<F>,
    w: &ArrayView4<F>,
    has_bias: bool,
    pad: usize,
    dout: &ArrayView4<F>,
) -> (Array4<F>, Array4<F>, Option<Array1<F>>) {
    let (n, cin, h, width) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let (_, _, ho, wo) = dout.dim();
    let w_mat = w
        .to_shape((cout, cin * kh * kw))
        .expect("conv weight reshape")
        .to_owned();

    let mut dw_mat = Array2::<F>::zeros((cout, cin * kh * kw));
    let mut dx = Array4::<F>::zeros((n, cin, h, width));
    let mut db = has_bias.then(|| Array1::<F>::zeros(cout));

    for i in 0..n {
        let cols = im2col(&x.index_axis(Axis(0), i), kh, kw, pad);
        let dout_i = dout.index_axis(Axis(0), i);
        let dout_mat = dout_i
            .to_shape((cout, ho * wo))
            .expect("dout reshape")
            .to_owned();
        dw_mat = dw_mat + dout_mat.dot(&cols.t());
        let dcols = w_mat.t().dot(&dout_mat); // (Cin*KH*KW, Ho*Wo)
        col2im_acc(&dcols, &mut dx.index_axis_mut(Axis(0), i), kh, kw, pad);
        if let Some(db) = db.as_mut() {
            for c in 0..cout {
                let s = dout_mat.row(c).iter().copied().sum::<F>();
                let slot = &mut db[c];
                *slot += s;
            }
        }
    }
    let dw = dw_mat
        .into_shape_with_order((cout, cin, kh, kw))
        .expect("dw reshape");
    (dx, dw, db)
}

/// Unfold one item into columns: (Cin*KH*KW, Ho*Wo).
fn im2col<F: Scalar>(x: &ArrayView3<F>, kh: usize, kw: usize, pad: usize) -> Array2<F> {
    let (cin, h, w) = x.dim();
    let ho = h + 2 * pad + 1 - kh;
    let wo = w + 2 * pad + 1 - kw;
    let mut cols = Array2::<F>::zeros((cin * kh * kw, ho * wo));
    for c in 0..cin {
        let plane = x.index_axis(Axis(0), c);
        for ki in 0..kh {
            for kj in 0..kw {
                let row_idx = (c * kh + ki) * kw + kj;
                let mut row = cols.row_mut(row_idx);
                for oh in 0..ho {
                    let ih = (oh + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        row[oh * wo + ow] = plane[[ih as usize, iw as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Fold gradient columns back onto one input item (accumulating).
fn col2im_acc<F: Scalar>(
    dcols: &Array2<F>,
    dx: &mut ndarray::ArrayViewMut3<F>,
    kh: usize,
    kw: usize,
    pad: usize,
) {
    let (cin, h, w) = dx.dim();
    let ho = h + 2 * pad + 1 - kh;
    let wo = w + 2 * pad + 1 - kw;
    for c in 0..cin {
        let mut plane = dx.index_axis_mut(Axis(0), c);
        for ki in 0..kh {
            for kj in 0..kw {
                let row = dcols.row((c * kh + ki) * kw + kj);
                for oh in 0..ho {
                    let ih = (oh + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        plane[[ih as usize, iw as usize]] += row[oh * wo + ow];
                    }
                }
            }
        }
    }
}

/// Per-channel mean and biased variance over (N, H, W).
pub fn bn_stats<F: Scalar>(x: &ArrayView4<F>) -> (Array1<F>, Array1<F>) {
    let (n, c, h, w) = x.dim();
    let count = F::from_f64((n * h * w) as f64);
    let mut mean = Array1::<F>::zeros(c);
    let mut var = Array1::<F>::zeros(c);
    for ch in 0..c {
        let mut acc = F::zero();
        for i in 0..n {
            acc += x.index_axis(Axis(0), i).index_axis(Axis(0), ch).iter().copied().sum::<F>();
        }
        mean[ch] = acc / count;
    }
    for ch in 0..c {
        let m = mean[ch];
        let mut acc = F::zero();
        for i in 0..n {
            for &v in x.index_axis(Axis(0), i).index_axis(Axis(0), ch).iter() {
                let d = v - m;
                acc += d * d;
            }
        }
        var[ch] = acc / count;
    }
    (mean, var)
}

/// Normalize with the given statistics: `gamma * (x - mean)/sqrt(var + eps) + beta`.
pub fn bn_fwd<F: Scalar>(
    x: &ArrayView4<F>,
    mean: &Array1<F>,
    var: &Array1<F>,
    gamma: &Array1<F>,
    beta: &Array1<F>,
    eps: F,
) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::<F>::zeros((n, c, h, w));
    for ch in 0..c {
        let inv_std = F::one() / (var[ch] + eps).sqrt();
        let g = gamma[ch] * inv_std;
        let b = beta[ch] - mean[ch] * g;
        for i in 0..n {
            let src = x.index_axis(Axis(0), i);
            let src = src.index_axis(Axis(0), ch);
            let mut dst = out.index_axis_mut(Axis(0), i);
            let mut dst = dst.index_axis_mut(Axis(0), ch);
            for (d, &s) in dst.iter_mut().zip(src.iter()) {
                *d = s * g + b;
            }
        }
    }
    out
}

pub fn leaky_relu_fwd<F: Scalar>(x: &ArrayView4<F>, slope: F) -> Array4<F> {
    x.mapv(|v| if v > F::zero() { v } else { v * slope })
}

/// 2x2 max pooling, stride 2, ceil mode. Returns the output and the flat
/// input index of each maximum (in the input's standard layout).
pub fn maxpool2_fwd<F: Scalar>(x: &ArrayView4<F>) -> (Array4<F>, Vec<usize>) {
    let (n, c, h, w) = x.dim();
    let ho = h.div_ceil(2);
    let wo = w.div_ceil(2);
    let mut out = Array4::<F>::zeros((n, c, ho, wo));
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for i in 0..n {
        for ch in 0..c {
            let plane = x.index_axis(Axis(0), i);
            let plane = plane.index_axis(Axis(0), ch);
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = F::neg_infinity();
                    let mut best_idx = 0usize;
                    for dh in 0..2 {
                        for dw in 0..2 {
                            let (ih, iw) = (oh * 2 + dh, ow * 2 + dw);
                            if ih < h && iw < w && plane[[ih, iw]] > best {
                                best = plane[[ih, iw]];
                                best_idx = ((i * c + ch) * h + ih) * w + iw;
                            }
                        }
                    }
                    out[[i, ch, oh, ow]] = best;
                    argmax.push(best_idx);
                }
            }
        }
    }
    (out, argmax)
}

/// 2x2 average pooling, stride 2, ceil mode; edge windows average only the
/// cells that exist.
pub fn avgpool2_fwd<F: Scalar>(x: &ArrayView4<F>) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let ho = h.div_ceil(2);
    let wo = w.div_ceil(2);
    let mut out = Array4::<F>::zeros((n, c, ho, wo));
    for i in 0..n {
        for ch in 0..c {
            let plane = x.index_axis(Axis(0), i);
            let plane = plane.index_axis(Axis(0), ch);
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = F::zero();
                    let mut cnt = 0;
                    for dh in 0..2 {
                        for dw in 0..2 {
                            let (ih, iw) = (oh * 2 + dh, ow * 2 + dw);
                            if ih < h && iw < w {
                                acc += plane[[ih, iw]];
                                cnt += 1;
                            }
                        }
                    }
                    out[[i, ch, oh, ow]] = acc / F::from_f64(cnt as f64);
                }
            }
        }
    }
    out
}

/// Pooling region of output cell `i` out of `out_len` over `in_len` inputs.
/// Regions can overlap when `in_len < out_len`; they are never empty.
pub fn adaptive_region(i: usize, out_len: usize, in_len: usize) -> (usize, usize) {
    let start = i * in_len / out_len;
    let end = ((i + 1) * in_len).div_ceil(out_len);
    (start, end)
}

/// Adaptive average pooling to a fixed (T, F) grid.
pub fn adaptive_avgpool_fwd<F: Scalar>(x: &ArrayView4<F>, out_t: usize, out_f: usize) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::<F>::zeros((n, c, out_t, out_f));
    for i in 0..n {
        for ch in 0..c {
            let plane = x.index_axis(Axis(0), i);
            let plane = plane.index_axis(Axis(0), ch);
            for ot in 0..out_t {
                let (t0, t1) = adaptive_region(ot, out_t, h);
                for of in 0..out_f {
                    let (f0, f1) = adaptive_region(of, out_f, w);
                    let mut acc = F::zero();
                    for it in t0..t1 {
                        for iw in f0..f1 {
                            acc += plane[[it, iw]];
                        }
                    }
                    out[[i, ch, ot, of]] = acc / F::from_f64(((t1 - t0) * (f1 - f0)) as f64);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn conv_identity_kernel() {
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64);
        // 1x1 kernel of weight 1 reproduces the input
        let w = Array4::from_elem((1, 1, 1, 1), 1.0);
        let y = conv2d_fwd(&x.view(), &w.view(), None, 0);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_same_padding_shape() {
        let x = Array4::<f64>::zeros((2, 3, 5, 7));
        let w = Array4::<f64>::zeros((4, 3, 3, 3));
        let y = conv2d_fwd(&x.view(), &w.view(), None, 1);
        assert_eq!(y.dim(), (2, 4, 5, 7));
    }

    #[test]
    fn conv_known_sum() {
        // 3x3 all-ones kernel on all-ones input, pad 1: interior = 9, corner = 4.
        let x = Array4::from_elem((1, 1, 4, 4), 1.0);
        let w = Array4::from_elem((1, 1, 3, 3), 1.0);
        let y = conv2d_fwd(&x.view(), &w.view(), None, 1);
        assert_eq!(y[[0, 0, 1, 1]], 9.0);
        assert_eq!(y[[0, 0, 0, 0]], 4.0);
        assert_eq!(y[[0, 0, 0, 1]], 6.0);
    }

    #[test]
    fn maxpool_ceil_and_argmax() {
        let x = Array4::from_shape_fn((1, 1, 3, 3), |(_, _, i, j)| (i * 3 + j) as f64);
        let (y, argmax) = maxpool2_fwd(&x.view());
        assert_eq!(y.dim(), (1, 1, 2, 2));
        assert_eq!(y, array![[[[4.0, 5.0], [7.0, 8.0]]]].into_dyn().into_dimensionality().unwrap());
        assert_eq!(argmax, vec![4, 5, 7, 8]);
    }

    #[test]
    fn adaptive_pool_upsamples_from_short_input() {
        let x = Array4::from_shape_fn((1, 1, 3, 2), |(_, _, i, _)| i as f64);
        let y = adaptive_avgpool_fwd(&x.view(), 4, 8);
        assert_eq!(y.dim(), (1, 1, 4, 8));
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn bn_normalizes_batch() {
        let x = Array4::from_shape_fn((2, 1, 2, 2), |(n, _, i, j)| (n * 4 + i * 2 + j) as f64);
        let (mean, var) = bn_stats(&x.view());
        let gamma = array![1.0];
        let beta = array![0.0];
        let y = bn_fwd(&x.view(), &mean, &var, &gamma, &beta, 0.0);
        let (m2, v2) = bn_stats(&y.view());
        assert!(m2[0].abs() < 1e-12);
        assert!((v2[0] - 1.0).abs() < 1e-12);
    }
}
