use ndarray::{Array2, Array4, ArrayView4};

/// Output spatial size of a convolution.
pub fn conv_out_size(h: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - kernel) / stride + 1
}

/// Unfold `x` [N,C,H,W] into a column matrix [C*kh*kw, N*oh*ow].
pub fn im2col(
    x: &ArrayView4<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    let mut col = Array2::<f64>::zeros((c * kh * kw, n * oh * ow));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for ni in 0..n {
                    for oi in 0..oh {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            col[[row, (ni * oh + oi) * ow + oj]] =
                                x[[ni, ci, ii as usize, jj as usize]];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Fold a column matrix back into [N,C,H,W], accumulating overlaps. Adjoint
/// of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    col: &Array2<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    let mut x = Array4::<f64>::zeros((n, c, h, w));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for ni in 0..n {
                    for oi in 0..oh {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            x[[ni, ci, ii as usize, jj as usize]] +=
                                col[[row, (ni * oh + oi) * ow + oj]];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Direct-loop convolution, kept deliberately separate from the im2col path
/// so tests can compare the two.
pub fn conv2d_naive(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, c, h, wd) = x.dim();
    let (o, cw, kh, kw) = w.dim();
    assert_eq!(c, cw);
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(wd, kw, stride, pad);
    let mut out = Array4::<f64>::zeros((n, o, oh, ow));
    for ni in 0..n {
        for oc in 0..o {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = b[oc];
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ii = (oi * stride + ki) as isize - pad as isize;
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if ii < 0 || ii >= h as isize || jj < 0 || jj >= wd as isize {
                                    continue;
                                }
                                acc += x[[ni, ci, ii as usize, jj as usize]]
                                    * w[[oc, ci, ki, kj]];
                            }
                        }
                    }
                    out[[ni, oc, oi, oj]] = acc;
                }
            }
        }
    }
    out
}
