//! Convolution and resampling kernels over `(N, C, H, W)` tensors.

use crate::tensor::{gemm, Float, MatRef, Tensor};

fn out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(n + 2 * pad >= k, "kernel larger than padded input");
    (n + 2 * pad - k) / stride + 1
}

/// Unfolds one image `(C, H, W)` into `(C·k·k, Ho·Wo)` columns.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Float>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let hw_out = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Float>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let hw_out = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(k: usize, stride: usize, pad: usize) -> bool {
    k == 1 && stride == 1 && pad == 0
}

pub(super) fn conv2d_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 4, "conv input must be (N, C, H, W)");
    assert_eq!(ws.len(), 4, "conv weight must be (O, C, k, k)");
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, c2, k) = (ws[0], ws[1], ws[2]);
    assert_eq!(c, c2, "conv channel mismatch");
    assert_eq!(ws[3], k, "square kernels only");
    assert_eq!(b.numel(), o);
    let ho = out_size(h, k, stride, pad);
    let wo = out_size(wd, k, stride, pad);
    let ckk = c * k * k;
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    let mut cols = if is_pointwise(k, stride, pad) { Vec::new() } else { vec![T::zero(); ckk * ho * wo] };
    let in_sz = c * h * wd;
    let out_sz = o * ho * wo;
    for img in 0..n {
        let xi = &x.data()[img * in_sz..(img + 1) * in_sz];
        let oi = &mut out.data_mut()[img * out_sz..(img + 1) * out_sz];
        for (ch, row) in oi.chunks_mut(ho * wo).enumerate() {
            row.iter_mut().for_each(|v| *v = b.data()[ch]);
        }
        let cols_ref: &[T] = if is_pointwise(k, stride, pad) {
            xi
        } else {
            im2col(xi, c, h, wd, k, stride, pad, ho, wo, &mut cols);
            &cols
        };
        gemm(MatRef::new(w.data(), o, ckk), MatRef::new(cols_ref, ckk, ho * wo), T::one(), oi);
    }
    out
}

/// Returns `(dx, dw, db)`; each only when requested.
#[allow(clippy::type_complexity)]
pub(super) fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let xs = x.shape();
    let ws = w.shape();
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, k) = (ws[0], ws[2]);
    let (ho, wo) = (dout.shape()[2], dout.shape()[3]);
    let ckk = c * k * k;
    let pointwise = is_pointwise(k, stride, pad);
    let mut dx = need_dx.then(|| Tensor::zeros(xs));
    let mut dw = need_dw.then(|| Tensor::zeros(ws));
    let mut db = need_dw.then(|| Tensor::zeros(&[o]));
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); ckk * ho * wo] };
    let in_sz = c * h * wd;
    let out_sz = o * ho * wo;
    for img in 0..n {
        let xi = &x.data()[img * in_sz..(img + 1) * in_sz];
        let gi = &dout.data()[img * out_sz..(img + 1) * out_sz];
        if let (Some(dw), Some(db)) = (dw.as_mut(), db.as_mut()) {
            let cols_ref: &[T] = if pointwise {
                xi
            } else {
                im2col(xi, c, h, wd, k, stride, pad, ho, wo, &mut cols);
                &cols
            };
            gemm(MatRef::new(gi, o, ho * wo), MatRef::new(cols_ref, ckk, ho * wo).t(), T::one(), dw.data_mut());
            for (ch, row) in gi.chunks(ho * wo).enumerate() {
                db.data_mut()[ch] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx.data_mut()[img * in_sz..(img + 1) * in_sz];
            if pointwise {
                gemm(MatRef::new(w.data(), o, ckk).t(), MatRef::new(gi, o, ho * wo), T::one(), dxi);
            } else {
                gemm(MatRef::new(w.data(), o, ckk).t(), MatRef::new(gi, o, ho * wo), T::zero(), &mut cols);
                col2im(&cols, c, h, wd, k, stride, pad, ho, wo, dxi);
            }
        }
    }
    (dx, dw, db)
}

pub(super) fn upsample_forward<T: Float>(x: &Tensor<T>, factor: usize, out_h: usize, out_w: usize) -> Tensor<T> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert!(out_h <= h * factor && out_w <= w * factor, "upsample target too large");
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data_mut()[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for y in 0..out_h {
            for xx in 0..out_w {
                dst[y * out_w + xx] = src[(y / factor) * w + xx / factor];
            }
        }
    }
    out
}

pub(super) fn upsample_backward<T: Float>(g: &Tensor<T>, in_shape: &[usize], factor: usize) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (out_h, out_w) = (g.shape()[2], g.shape()[3]);
    let mut gx = Tensor::zeros(in_shape);
    let planes = in_shape[0] * in_shape[1];
    for plane in 0..planes {
        let src = &g.data()[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        let dst = &mut gx.data_mut()[plane * h * w..(plane + 1) * h * w];
        for y in 0..out_h {
            for xx in 0..out_w {
                dst[(y / factor) * w + xx / factor] += src[y * out_w + xx];
            }
        }
    }
    gx
}

fn pooled(n: usize, f: usize) -> usize {
    n.div_ceil(f)
}

pub(super) fn avg_pool_forward<T: Float>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (pooled(h, f), pooled(w, f));
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data_mut()[plane * ho * wo..(plane + 1) * ho * wo];
        for oy in 0..ho {
            let (y0, y1) = (oy * f, ((oy + 1) * f).min(h));
            for ox in 0..wo {
                let (x0, x1) = (ox * f, ((ox + 1) * f).min(w));
                let mut acc = T::zero();
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += src[y * w + xx];
                    }
                }
                dst[oy * wo + ox] = acc / T::of(((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    out
}

pub(super) fn avg_pool_backward<T: Float>(g: &Tensor<T>, in_shape: &[usize], f: usize) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ho, wo) = (g.shape()[2], g.shape()[3]);
    let mut gx = Tensor::zeros(in_shape);
    for plane in 0..in_shape[0] * in_shape[1] {
        let src = &g.data()[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut gx.data_mut()[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            let (y0, y1) = (oy * f, ((oy + 1) * f).min(h));
            for ox in 0..wo {
                let (x0, x1) = (ox * f, ((ox + 1) * f).min(w));
                let share = src[oy * wo + ox] / T::of(((y1 - y0) * (x1 - x0)) as f64);
                for y in y0..y1 {
                    for xx in x0..x1 {
                        dst[y * w + xx] += share;
                    }
                }
            }
        }
    }
    gx
}
