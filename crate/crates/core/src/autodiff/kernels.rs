//! Raw array kernels behind the tape ops. Convolution is im2col + GEMM,
//! fanned out over the batch dimension (see `util::par_map_indexed`).

use ndarray::{Array2, Array4, ArrayView2, ArrayView4, ArrayViewMut4, Axis};

use super::Scalar;
use crate::util::par_map_indexed;

/// Output spatial size for a conv with the given geometry.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Lower one item (C,H,W) into a (C*kh*kw, OH*OW) column matrix.
fn im2col<T: Scalar>(
    x: &ArrayView4<T>,
    n: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<T> {
    let (_, c, h, w) = x.dim();
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let mut cols = Array2::<T>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let mut dst = cols.row_mut(row);
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[oi * ow + oj] = x[[n, ci, ii as usize, jj as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter a column-matrix gradient back onto the input gradient of one item.
fn col2im_accum<T: Scalar>(
    dcols: &Array2<T>,
    dx: &mut ArrayViewMut4<T>,
    n: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let (_, c, h, w) = dx.dim();
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = dcols.row(row);
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            dx[[n, ci, ii as usize, jj as usize]] += src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

pub struct ConvForward<T> {
    pub y: Array4<T>,
    /// im2col buffers kept for the backward pass, one per batch item.
    pub cols: Vec<Array2<T>>,
}

/// Batched conv2d, NCHW, weight (Co, Ci, kh, kw).
pub fn conv2d_forward<T: Scalar>(
    x: &ArrayView4<T>,
    w: &ArrayView4<T>,
    stride: usize,
    pad: usize,
) -> ConvForward<T> {
    let (n, _, h, wdt) = x.dim();
    let (co, ci, kh, kw) = w.dim();
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wdt, kw, stride, pad);
    let w2 = w
        .to_shape((co, ci * kh * kw))
        .expect("kernel reshape")
        .into_owned();
    let per_item: Vec<(Array2<T>, Array2<T>)> = par_map_indexed(n, |i| {
        let cols = im2col(x, i, kh, kw, stride, pad);
        let y2 = w2.dot(&cols);
        (y2, cols)
    });
    let mut y = Array4::<T>::zeros((n, co, oh, ow));
    let mut cols_out = Vec::with_capacity(n);
    for (i, (y2, cols)) in per_item.into_iter().enumerate() {
        let y3 = y2.into_shape_with_order((co, oh, ow)).expect("out reshape");
        y.index_axis_mut(Axis(0), i).assign(&y3);
        cols_out.push(cols);
    }
    ConvForward { y, cols: cols_out }
}

pub struct ConvBackward<T> {
    pub dx: Array4<T>,
    pub dw: Array4<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x_shape: (usize, usize, usize, usize),
    w: &ArrayView4<T>,
    cols: &[Array2<T>],
    dy: &ArrayView4<T>,
    stride: usize,
    pad: usize,
) -> ConvBackward<T> {
    let (n, _ci, _h, _w) = x_shape;
    let (co, ci, kh, kw) = w.dim();
    let (_, _, oh, ow) = dy.dim();
    let w2 = w
        .to_shape((co, ci * kh * kw))
        .expect("kernel reshape")
        .into_owned();
    let per_item: Vec<(Array2<T>, Array2<T>)> = par_map_indexed(n, |i| {
        let dy2 = dy
            .index_axis(Axis(0), i)
            .to_shape((co, oh * ow))
            .expect("dy reshape")
            .into_owned();
        let dw2 = dy2.dot(&cols[i].t());
        let dcols = w2.t().dot(&dy2);
        (dw2, dcols)
    });
    let mut dw2 = Array2::<T>::zeros((co, ci * kh * kw));
    let mut dx = Array4::<T>::zeros(x_shape);
    // Weight-gradient partials are summed in batch order so results do not
    // depend on thread scheduling.
    for (i, (dw_i, dcols_i)) in per_item.iter().enumerate() {
        dw2 += dw_i;
        col2im_accum(dcols_i, &mut dx.view_mut(), i, kh, kw, stride, pad);
    }
    let dw = dw2
        .into_shape_with_order((co, ci, kh, kw))
        .expect("dw reshape");
    ConvBackward { dx, dw }
}

/// Nearest-neighbor 2x spatial upsample.
pub fn nearest_up2<T: Scalar>(x: &ArrayView4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<T>::zeros((n, c, h * 2, w * 2));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[[ni, ci, i, j]];
                    y[[ni, ci, 2 * i, 2 * j]] = v;
                    y[[ni, ci, 2 * i, 2 * j + 1]] = v;
                    y[[ni, ci, 2 * i + 1, 2 * j]] = v;
                    y[[ni, ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
    }
    y
}

pub fn nearest_up2_backward<T: Scalar>(dy: &ArrayView4<T>) -> Array4<T> {
    let (n, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<T>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    dx[[ni, ci, i, j]] = dy[[ni, ci, 2 * i, 2 * j]]
                        + dy[[ni, ci, 2 * i, 2 * j + 1]]
                        + dy[[ni, ci, 2 * i + 1, 2 * j]]
                        + dy[[ni, ci, 2 * i + 1, 2 * j + 1]];
                }
            }
        }
    }
    dx
}

/// Row-wise softmax of a (rows, cols) view, numerically stable.
pub fn softmax_rows<T: Scalar>(x: &ArrayView2<T>) -> Array2<T> {
    let mut y = x.to_owned();
    for mut row in y.rows_mut() {
        let mut m = row[0];
        for &v in row.iter() {
            if v > m {
                m = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    y
}
