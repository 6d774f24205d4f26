//! Numeric forward/backward kernels behind the graph ops.
//!
//! Convolutions use im2col plus a per-sample GEMM (`ndarray::dot`). The batch
//! loop is the data-parallel axis; per-sample work and all cross-sample
//! accumulation stay sequential so results are reproducible bit-for-bit.

use crate::parallel::map_indexed;
use crate::Arr4;
use ndarray::{s, Array2, Array3, Axis};

/// Output spatial size of a strided convolution.
pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= k,
        "conv input {input} too small for kernel {k} with pad {pad}"
    );
    (input + 2 * pad - k) / stride + 1
}

/// Output spatial size of a transposed convolution.
pub fn convt_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + k - 2 * pad
}

/// Unfold one sample `[C, H, W]` into a `[C*K*K, Ho*Wo]` patch matrix.
fn im2col(x: &ndarray::ArrayView3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for kr in 0..k {
            for kc in 0..k {
                let row = (ci * k + kr) * k + kc;
                let mut dst = cols.row_mut(row);
                for or in 0..ho {
                    let ir = (or * stride + kr) as isize - pad as isize;
                    if ir < 0 || ir >= h as isize {
                        continue;
                    }
                    for oc in 0..wo {
                        let ic = (oc * stride + kc) as isize - pad as isize;
                        if ic < 0 || ic >= w as isize {
                            continue;
                        }
                        dst[or * wo + oc] = x[[ci, ir as usize, ic as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Fold a `[C*K*K, Ho*Wo]` patch matrix back into `[C, H, W]`, accumulating
/// overlapping contributions. Exact adjoint of [`im2col`].
fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for kr in 0..k {
            for kc in 0..k {
                let row = (ci * k + kr) * k + kc;
                let src = cols.row(row);
                for or in 0..ho {
                    let ir = (or * stride + kr) as isize - pad as isize;
                    if ir < 0 || ir >= h as isize {
                        continue;
                    }
                    for oc in 0..wo {
                        let ic = (oc * stride + kc) as isize - pad as isize;
                        if ic < 0 || ic >= w as isize {
                            continue;
                        }
                        out[[ci, ir as usize, ic as usize]] += src[or * wo + oc];
                    }
                }
            }
        }
    }
    out
}

fn stack_batch(parts: Vec<Array3<f64>>) -> Arr4 {
    let (c, h, w) = parts[0].dim();
    let mut out = Arr4::zeros((parts.len(), c, h, w));
    for (b, part) in parts.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), b).assign(&part);
    }
    out
}

/// Strided 2-D convolution. `w` is `[Cout, Cin, K, K]`, `b` is `[1, Cout, 1, 1]`.
pub fn conv2d_fwd(x: &Arr4, w: &Arr4, b: Option<&Arr4>, stride: usize, pad: usize) -> Arr4 {
    let (n, cin, h, wd) = x.dim();
    let (cout, wcin, k, _) = w.dim();
    assert_eq!(cin, wcin, "conv2d: input has {cin} channels, weight expects {wcin}");
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(wd, k, stride, pad);
    let w_mat = w
        .view()
        .into_shape_with_order((cout, cin * k * k))
        .expect("contiguous weight");
    let parts = map_indexed(n, |bi| {
        let cols = im2col(&x.index_axis(Axis(0), bi), k, stride, pad);
        let y = w_mat.dot(&cols);
        y.into_shape_with_order((cout, ho, wo)).unwrap()
    });
    let mut out = stack_batch(parts);
    if let Some(b) = b {
        for co in 0..cout {
            let bias = b[[0, co, 0, 0]];
            out.slice_mut(s![.., co, .., ..]).mapv_inplace(|v| v + bias);
        }
    }
    out
}

/// Gradients of [`conv2d_fwd`]: returns `(gx, gw, gb)`; any of the input
/// gradients can be skipped by passing `false`.
pub fn conv2d_bwd(
    x: &Arr4,
    w: &Arr4,
    gy: &Arr4,
    stride: usize,
    pad: usize,
    need_gx: bool,
    need_gw: bool,
) -> (Option<Arr4>, Option<Arr4>, Arr4) {
    let (n, cin, h, wd) = x.dim();
    let (cout, _, k, _) = w.dim();
    let (_, _, ho, wo) = gy.dim();
    let w_mat = w
        .view()
        .into_shape_with_order((cout, cin * k * k))
        .expect("contiguous weight");

    let per_sample = map_indexed(n, |bi| {
        let gy_b = gy.index_axis(Axis(0), bi);
        let gy_mat = gy_b
            .into_shape_with_order((cout, ho * wo))
            .expect("contiguous grad");
        let gx_b = if need_gx {
            let cols_g = w_mat.t().dot(&gy_mat);
            Some(col2im(&cols_g, cin, h, wd, k, stride, pad))
        } else {
            None
        };
        let gw_b = if need_gw {
            let cols = im2col(&x.index_axis(Axis(0), bi), k, stride, pad);
            Some(gy_mat.dot(&cols.t()))
        } else {
            None
        };
        (gx_b, gw_b)
    });

    let mut gx_parts = Vec::with_capacity(n);
    let mut gw = Array2::<f64>::zeros((cout, cin * k * k));
    for (gx_b, gw_b) in per_sample {
        if let Some(g) = gx_b {
            gx_parts.push(g);
        }
        if let Some(g) = gw_b {
            gw += &g;
        }
    }
    let gx = if need_gx { Some(stack_batch(gx_parts)) } else { None };
    let gw = if need_gw {
        Some(gw.into_shape_with_order((cout, cin, k, k)).unwrap())
    } else {
        None
    };
    let mut gb = Arr4::zeros((1, cout, 1, 1));
    for co in 0..cout {
        gb[[0, co, 0, 0]] = gy.slice(s![.., co, .., ..]).sum();
    }
    (gx, gw, gb)
}

/// Transposed 2-D convolution. `w` is `[Cin, Cout, K, K]` (torch layout).
pub fn convt2d_fwd(x: &Arr4, w: &Arr4, b: Option<&Arr4>, stride: usize, pad: usize) -> Arr4 {
    let (n, cin, h, wd) = x.dim();
    let (wcin, cout, k, _) = w.dim();
    assert_eq!(cin, wcin, "convt2d: input has {cin} channels, weight expects {wcin}");
    let ho = convt_out_size(h, k, stride, pad);
    let wo = convt_out_size(wd, k, stride, pad);
    let w_mat = w
        .view()
        .into_shape_with_order((cin, cout * k * k))
        .expect("contiguous weight");
    let parts = map_indexed(n, |bi| {
        let x_b = x.index_axis(Axis(0), bi);
        let x_mat = x_b.into_shape_with_order((cin, h * wd)).expect("contiguous input");
        let cols = w_mat.t().dot(&x_mat);
        col2im(&cols, cout, ho, wo, k, stride, pad)
    });
    let mut out = stack_batch(parts);
    if let Some(b) = b {
        for co in 0..cout {
            let bias = b[[0, co, 0, 0]];
            out.slice_mut(s![.., co, .., ..]).mapv_inplace(|v| v + bias);
        }
    }
    out
}

/// Gradients of [`convt2d_fwd`].
pub fn convt2d_bwd(
    x: &Arr4,
    w: &Arr4,
    gy: &Arr4,
    stride: usize,
    pad: usize,
    need_gx: bool,
    need_gw: bool,
) -> (Option<Arr4>, Option<Arr4>, Arr4) {
    let (n, cin, h, wd) = x.dim();
    let (_, cout, k, _) = w.dim();
    let w_mat = w
        .view()
        .into_shape_with_order((cin, cout * k * k))
        .expect("contiguous weight");

    let per_sample = map_indexed(n, |bi| {
        // im2col of the output-side gradient plays the role the input patch
        // matrix plays in the forward conv.
        let cols = im2col(&gy.index_axis(Axis(0), bi), k, stride, pad);
        let gx_b = if need_gx {
            let g = w_mat.dot(&cols);
            Some(g.into_shape_with_order((cin, h, wd)).unwrap())
        } else {
            None
        };
        let gw_b = if need_gw {
            let x_b = gy_role_input(x, bi, cin, h * wd);
            Some(x_b.dot(&cols.t()))
        } else {
            None
        };
        (gx_b, gw_b)
    });

    let mut gx_parts = Vec::with_capacity(n);
    let mut gw = Array2::<f64>::zeros((cin, cout * k * k));
    for (gx_b, gw_b) in per_sample {
        if let Some(g) = gx_b {
            gx_parts.push(g);
        }
        if let Some(g) = gw_b {
            gw += &g;
        }
    }
    let gx = if need_gx { Some(stack_batch(gx_parts)) } else { None };
    let gw = if need_gw {
        Some(gw.into_shape_with_order((cin, cout, k, k)).unwrap())
    } else {
        None
    };
    let mut gb = Arr4::zeros((1, cout, 1, 1));
    for co in 0..cout {
        gb[[0, co, 0, 0]] = gy.slice(s![.., co, .., ..]).sum();
    }
    (gx, gw, gb)
}

fn gy_role_input(x: &Arr4, bi: usize, c: usize, hw: usize) -> Array2<f64> {
    x.index_axis(Axis(0), bi)
        .into_shape_with_order((c, hw))
        .expect("contiguous input")
        .to_owned()
}

/// Per-sample, per-channel normalization with affine parameters.
/// Returns `(y, x_hat, inv_std)`; the latter two feed the backward pass.
pub fn instance_norm_fwd(
    x: &Arr4,
    gamma: &Arr4,
    beta: &Arr4,
    eps: f64,
) -> (Arr4, Arr4, ndarray::Array2<f64>) {
    let (n, c, h, w) = x.dim();
    let count = (h * w) as f64;
    let mut y = Arr4::zeros((n, c, h, w));
    let mut x_hat = Arr4::zeros((n, c, h, w));
    let mut inv_std = Array2::<f64>::zeros((n, c));
    for bi in 0..n {
        for ci in 0..c {
            let plane = x.slice(s![bi, ci, .., ..]);
            let mean = plane.sum() / count;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[[bi, ci]] = inv;
            let g = gamma[[0, ci, 0, 0]];
            let b = beta[[0, ci, 0, 0]];
            for r in 0..h {
                for cc in 0..w {
                    let xh = (x[[bi, ci, r, cc]] - mean) * inv;
                    x_hat[[bi, ci, r, cc]] = xh;
                    y[[bi, ci, r, cc]] = g * xh + b;
                }
            }
        }
    }
    (y, x_hat, inv_std)
}

/// Backward pass of [`instance_norm_fwd`]. Returns `(gx, ggamma, gbeta)`.
pub fn instance_norm_bwd(
    x_hat: &Arr4,
    inv_std: &ndarray::Array2<f64>,
    gamma: &Arr4,
    gy: &Arr4,
) -> (Arr4, Arr4, Arr4) {
    let (n, c, h, w) = x_hat.dim();
    let count = (h * w) as f64;
    let mut gx = Arr4::zeros((n, c, h, w));
    let mut ggamma = Arr4::zeros((1, c, 1, 1));
    let mut gbeta = Arr4::zeros((1, c, 1, 1));
    for bi in 0..n {
        for ci in 0..c {
            let gy_p = gy.slice(s![bi, ci, .., ..]);
            let xh_p = x_hat.slice(s![bi, ci, .., ..]);
            let sum_gy = gy_p.sum();
            let sum_gy_xh = gy_p.iter().zip(xh_p.iter()).map(|(a, b)| a * b).sum::<f64>();
            ggamma[[0, ci, 0, 0]] += sum_gy_xh;
            gbeta[[0, ci, 0, 0]] += sum_gy;
            let scale = gamma[[0, ci, 0, 0]] * inv_std[[bi, ci]];
            let mean_gy = sum_gy / count;
            let mean_gy_xh = sum_gy_xh / count;
            for r in 0..h {
                for cc in 0..w {
                    gx[[bi, ci, r, cc]] = scale
                        * (gy[[bi, ci, r, cc]] - mean_gy - x_hat[[bi, ci, r, cc]] * mean_gy_xh);
                }
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// 2x2 average pooling with stride 2; trailing odd row/column is dropped.
pub fn avg_pool2_fwd(x: &Arr4) -> Arr4 {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    assert!(ho >= 1 && wo >= 1, "avg_pool2 input {h}x{w} too small");
    let mut y = Arr4::zeros((n, c, ho, wo));
    for bi in 0..n {
        for ci in 0..c {
            for r in 0..ho {
                for cc in 0..wo {
                    y[[bi, ci, r, cc]] = 0.25
                        * (x[[bi, ci, 2 * r, 2 * cc]]
                            + x[[bi, ci, 2 * r, 2 * cc + 1]]
                            + x[[bi, ci, 2 * r + 1, 2 * cc]]
                            + x[[bi, ci, 2 * r + 1, 2 * cc + 1]]);
                }
            }
        }
    }
    y
}

pub fn avg_pool2_bwd(x_shape: (usize, usize, usize, usize), gy: &Arr4) -> Arr4 {
    let (n, c, _, _) = gy.dim();
    let mut gx = Arr4::zeros(x_shape);
    let (_, _, ho, wo) = gy.dim();
    for bi in 0..n {
        for ci in 0..c {
            for r in 0..ho {
                for cc in 0..wo {
                    let g = gy[[bi, ci, r, cc]] * 0.25;
                    gx[[bi, ci, 2 * r, 2 * cc]] += g;
                    gx[[bi, ci, 2 * r, 2 * cc + 1]] += g;
                    gx[[bi, ci, 2 * r + 1, 2 * cc]] += g;
                    gx[[bi, ci, 2 * r + 1, 2 * cc + 1]] += g;
                }
            }
        }
    }
    gx
}

/// Center crop or zero-pad each spatial dimension to `(th, tw)`.
pub fn fit_to_fwd(x: &Arr4, th: usize, tw: usize) -> Arr4 {
    let (n, c, h, w) = x.dim();
    let mut y = Arr4::zeros((n, c, th, tw));
    let (src_r0, dst_r0, rows) = overlap(h, th);
    let (src_c0, dst_c0, cols) = overlap(w, tw);
    y.slice_mut(s![.., .., dst_r0..dst_r0 + rows, dst_c0..dst_c0 + cols])
        .assign(&x.slice(s![.., .., src_r0..src_r0 + rows, src_c0..src_c0 + cols]));
    y
}

pub fn fit_to_bwd(x_shape: (usize, usize, usize, usize), gy: &Arr4) -> Arr4 {
    let (_, _, h, w) = x_shape;
    let (_, _, th, tw) = gy.dim();
    let mut gx = Arr4::zeros(x_shape);
    let (src_r0, dst_r0, rows) = overlap(h, th);
    let (src_c0, dst_c0, cols) = overlap(w, tw);
    gx.slice_mut(s![.., .., src_r0..src_r0 + rows, src_c0..src_c0 + cols])
        .assign(&gy.slice(s![.., .., dst_r0..dst_r0 + rows, dst_c0..dst_c0 + cols]));
    gx
}

// (source offset, destination offset, length) for a centered copy.
fn overlap(src: usize, dst: usize) -> (usize, usize, usize) {
    if src >= dst {
        (((src - dst) / 2), 0, dst)
    } else {
        (0, ((dst - src) / 2), src)
    }
}
