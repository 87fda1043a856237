//! Forward and backward kernels used by [`crate::Graph`].

use crate::graph::Roi;
use crate::tensor::Tensor;

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c = a · b + beta · c` on strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_rs: usize,
    a_cs: usize,
    b: &[f32],
    b_rs: usize,
    b_cs: usize,
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe views that lie inside the given slices;
    // every caller derives them from the slice shapes.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn out_size(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(size + 2 * pad >= k, "kernel larger than padded input");
    (size + 2 * pad - k) / stride + 1
}

fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f32],
) {
    let ho = out_size(h, k, stride, pad);
    let wo = out_size(w, k, stride, pad);
    let p = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    x: &mut [f32],
) {
    let ho = out_size(h, k, stride, pad);
    let wo = out_size(w, k, stride, pad);
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
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

pub fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&[f32]>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (co, ci, k, k2) = weight.dims4();
    assert_eq!(ci, c, "conv input has {c} channels, weight expects {ci}");
    assert_eq!(k, k2, "only square kernels are supported");
    let ho = out_size(h, k, stride, pad);
    let wo = out_size(w, k, stride, pad);
    let p = ho * wo;
    let kk = c * k * k;
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    let mut cols = vec![0.0f32; if is_pointwise(k, stride, pad) { 0 } else { kk * p }];
    for b in 0..n {
        let xb = &x.data()[b * c * h * w..(b + 1) * c * h * w];
        let cols_ref: &[f32] = if is_pointwise(k, stride, pad) {
            xb
        } else {
            im2col(xb, c, h, w, k, stride, pad, &mut cols);
            &cols
        };
        let yb = &mut out.data_mut()[b * co * p..(b + 1) * co * p];
        if let Some(bias) = bias {
            for (o, row) in yb.chunks_mut(p).enumerate() {
                row.fill(bias[o]);
            }
        }
        gemm(
            co,
            kk,
            p,
            weight.data(),
            kk,
            1,
            cols_ref,
            p,
            1,
            if bias.is_some() { 1.0 } else { 0.0 },
            yb,
        );
    }
    out
}

/// Returns `(dx, dweight, dbias)`; `dx` only when `want_dx`.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    want_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, c, h, w) = x.dims4();
    let (co, _, k, _) = weight.dims4();
    let (_, _, ho, wo) = gy.dims4();
    let p = ho * wo;
    let kk = c * k * k;
    let pointwise = is_pointwise(k, stride, pad);
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = vec![0.0f32; co];
    let mut gx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = vec![0.0f32; if pointwise { 0 } else { kk * p }];
    let mut gcols = vec![0.0f32; kk * p];
    for b in 0..n {
        let xb = &x.data()[b * c * h * w..(b + 1) * c * h * w];
        let gyb = &gy.data()[b * co * p..(b + 1) * co * p];
        for (o, row) in gyb.chunks(p).enumerate() {
            gb[o] += row.iter().sum::<f32>();
        }
        let cols_ref: &[f32] = if pointwise {
            xb
        } else {
            im2col(xb, c, h, w, k, stride, pad, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        gemm(co, p, kk, gyb, p, 1, cols_ref, 1, p, 1.0, gw.data_mut());
        if let Some(gx) = gx.as_mut() {
            // dcols = Wᵀ · dY
            gemm(kk, co, p, weight.data(), 1, kk, gyb, p, 1, 0.0, &mut gcols);
            let gxb = &mut gx.data_mut()[b * c * h * w..(b + 1) * c * h * w];
            if pointwise {
                gxb.copy_from_slice(&gcols);
            } else {
                col2im(&gcols, c, h, w, k, stride, pad, gxb);
            }
        }
    }
    (gx, gw, Tensor::new(vec![co], gb))
}

pub fn group_norm_forward(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    groups: usize,
) -> (Tensor, Vec<f32>, Vec<f32>) {
    const EPS: f32 = 1e-5;
    let (n, c, h, w) = x.dims4();
    assert_eq!(c % groups, 0, "{c} channels not divisible into {groups} groups");
    let cg = c / groups;
    let hw = h * w;
    let count = (cg * hw) as f32;
    let mut out = Tensor::zeros(x.shape());
    let mut means = Vec::with_capacity(n * groups);
    let mut rstds = Vec::with_capacity(n * groups);
    for b in 0..n {
        for g in 0..groups {
            let start = (b * c + g * cg) * hw;
            let xs = &x.data()[start..start + cg * hw];
            let mean = xs.iter().sum::<f32>() / count;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / count;
            let rstd = 1.0 / (var + EPS).sqrt();
            means.push(mean);
            rstds.push(rstd);
            let ys = &mut out.data_mut()[start..start + cg * hw];
            for j in 0..cg {
                let ch = g * cg + j;
                let (ga, be) = (gamma[ch], beta[ch]);
                for (y, &v) in ys[j * hw..(j + 1) * hw]
                    .iter_mut()
                    .zip(&xs[j * hw..(j + 1) * hw])
                {
                    *y = (v - mean) * rstd * ga + be;
                }
            }
        }
    }
    (out, means, rstds)
}

pub fn group_norm_backward(
    x: &Tensor,
    gamma: &[f32],
    gy: &Tensor,
    groups: usize,
    means: &[f32],
    rstds: &[f32],
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = x.dims4();
    let cg = c / groups;
    let hw = h * w;
    let count = (cg * hw) as f32;
    let mut gx = Tensor::zeros(x.shape());
    let mut ggamma = vec![0.0f32; c];
    let mut gbeta = vec![0.0f32; c];
    for b in 0..n {
        for g in 0..groups {
            let idx = b * groups + g;
            let (mean, rstd) = (means[idx], rstds[idx]);
            let start = (b * c + g * cg) * hw;
            let xs = &x.data()[start..start + cg * hw];
            let gys = &gy.data()[start..start + cg * hw];
            let mut sum_dxhat = 0.0f32;
            let mut sum_dxhat_xhat = 0.0f32;
            for j in 0..cg {
                let ch = g * cg + j;
                for t in j * hw..(j + 1) * hw {
                    let xhat = (xs[t] - mean) * rstd;
                    ggamma[ch] += gys[t] * xhat;
                    gbeta[ch] += gys[t];
                    let dxhat = gys[t] * gamma[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            let m1 = sum_dxhat / count;
            let m2 = sum_dxhat_xhat / count;
            let gxs = &mut gx.data_mut()[start..start + cg * hw];
            for j in 0..cg {
                let ch = g * cg + j;
                for t in j * hw..(j + 1) * hw {
                    let xhat = (xs[t] - mean) * rstd;
                    gxs[t] = rstd * (gys[t] * gamma[ch] - m1 - xhat * m2);
                }
            }
        }
    }
    (
        gx,
        Tensor::new(vec![c], ggamma),
        Tensor::new(vec![c], gbeta),
    )
}

pub fn mul_channel_forward(x: &Tensor, gate: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert_eq!(gate.shape(), &[n, 1, h, w]);
    let hw = h * w;
    let mut out = x.clone();
    for b in 0..n {
        let gb = &gate.data()[b * hw..(b + 1) * hw];
        for ch in 0..c {
            let o = &mut out.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for (v, g) in o.iter_mut().zip(gb) {
                *v *= g;
            }
        }
    }
    out
}

pub fn mul_channel_backward(x: &Tensor, gate: &Tensor, gy: &Tensor) -> (Tensor, Tensor) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut gx = gy.clone();
    let mut ggate = Tensor::zeros(gate.shape());
    for b in 0..n {
        let gb = &gate.data()[b * hw..(b + 1) * hw];
        for ch in 0..c {
            let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let xs = &x.data()[range.clone()];
            let gys = &gy.data()[range.clone()];
            let gg = &mut ggate.data_mut()[b * hw..(b + 1) * hw];
            for t in 0..hw {
                gg[t] += gys[t] * xs[t];
            }
            for (v, g) in gx.data_mut()[range].iter_mut().zip(gb) {
                *v *= g;
            }
        }
    }
    (gx, ggate)
}

pub fn upsample_forward(x: &Tensor, ho: usize, wo: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data_mut()[plane * ho * wo..(plane + 1) * ho * wo];
        for oy in 0..ho {
            let iy = oy * h / ho;
            for ox in 0..wo {
                dst[oy * wo + ox] = src[iy * w + ox * w / wo];
            }
        }
    }
    out
}

pub fn upsample_backward(x_shape: &[usize], gy: &Tensor) -> Tensor {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (_, _, ho, wo) = gy.dims4();
    let mut gx = Tensor::zeros(x_shape);
    for plane in 0..n * c {
        let src = &gy.data()[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut gx.data_mut()[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            let iy = oy * h / ho;
            for ox in 0..wo {
                dst[iy * w + ox * w / wo] += src[oy * wo + ox];
            }
        }
    }
    gx
}

pub fn channel_max_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut out = Tensor::full(&[n, 1, h, w], f32::NEG_INFINITY);
    let mut argmax = vec![0u32; n * hw];
    for b in 0..n {
        for ch in 0..c {
            let xs = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for t in 0..hw {
                let o = &mut out.data_mut()[b * hw + t];
                if xs[t] > *o {
                    *o = xs[t];
                    argmax[b * hw + t] = ch as u32;
                }
            }
        }
    }
    (out, argmax)
}

pub fn channel_max_backward(x_shape: &[usize], argmax: &[u32], gy: &Tensor) -> Tensor {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let hw = h * w;
    let mut gx = Tensor::zeros(x_shape);
    for b in 0..n {
        for t in 0..hw {
            let ch = argmax[b * hw + t] as usize;
            gx.data_mut()[(b * c + ch) * hw + t] = gy.data()[b * hw + t];
        }
    }
    gx
}

pub fn channel_mean_forward(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, 1, h, w]);
    for b in 0..n {
        let o = &mut out.data_mut()[b * hw..(b + 1) * hw];
        for ch in 0..c {
            let xs = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for (acc, v) in o.iter_mut().zip(xs) {
                *acc += v;
            }
        }
        for v in o.iter_mut() {
            *v /= c as f32;
        }
    }
    out
}

pub fn channel_mean_backward(x_shape: &[usize], gy: &Tensor) -> Tensor {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let hw = h * w;
    let mut gx = Tensor::zeros(x_shape);
    for b in 0..n {
        let g = &gy.data()[b * hw..(b + 1) * hw];
        for ch in 0..c {
            let dst = &mut gx.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for (d, v) in dst.iter_mut().zip(g) {
                *d = v / c as f32;
            }
        }
    }
    gx
}

pub fn concat_forward(parts: &[&Tensor], axis: usize) -> Tensor {
    assert!(!parts.is_empty());
    let first = parts[0].shape();
    match axis {
        0 => {
            let mut shape = first.to_vec();
            shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
            let mut data = Vec::with_capacity(shape.iter().product());
            for p in parts {
                assert_eq!(&p.shape()[1..], &first[1..], "concat shape mismatch");
                data.extend_from_slice(p.data());
            }
            Tensor::new(shape, data)
        }
        1 => {
            let (n, _, h, w) = parts[0].dims4();
            let total_c: usize = parts.iter().map(|p| p.shape()[1]).sum();
            let hw = h * w;
            let mut data = Vec::with_capacity(n * total_c * hw);
            for b in 0..n {
                for p in parts {
                    let (pn, pc, ph, pw) = p.dims4();
                    assert_eq!((pn, ph, pw), (n, h, w), "concat shape mismatch");
                    data.extend_from_slice(&p.data()[b * pc * hw..(b + 1) * pc * hw]);
                }
            }
            Tensor::new(vec![n, total_c, h, w], data)
        }
        _ => panic!("concat only supports axis 0 or 1"),
    }
}

pub fn concat_backward(shapes: &[&[usize]], axis: usize, gy: &Tensor) -> Vec<Tensor> {
    match axis {
        0 => {
            let mut offset = 0;
            shapes
                .iter()
                .map(|s| {
                    let len: usize = s.iter().product();
                    let t = Tensor::new(s.to_vec(), gy.data()[offset..offset + len].to_vec());
                    offset += len;
                    t
                })
                .collect()
        }
        _ => {
            let (n, total_c, h, w) = gy.dims4();
            let hw = h * w;
            let mut out: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
            for b in 0..n {
                let mut c0 = 0;
                for (t, s) in out.iter_mut().zip(shapes) {
                    let pc = s[1];
                    let src = &gy.data()[(b * total_c + c0) * hw..(b * total_c + c0 + pc) * hw];
                    t.data_mut()[b * pc * hw..(b + 1) * pc * hw].copy_from_slice(src);
                    c0 += pc;
                }
            }
            out
        }
    }
}

/// Precomputed bilinear sampling taps for RoI align: each output bin of each
/// RoI reads a weighted set of feature-map cells, shared across channels.
#[derive(Debug)]
pub struct RoiTaps {
    out_size: usize,
    batch: Vec<usize>,
    /// `offsets[k * bins + bin]..offsets[.. + 1]` indexes `cells`/`weights`.
    offsets: Vec<usize>,
    cells: Vec<u32>,
    weights: Vec<f32>,
}

impl RoiTaps {
    pub fn build(
        rois: &[Roi],
        h: usize,
        w: usize,
        scale: f32,
        out_size: usize,
        sampling: usize,
    ) -> Self {
        let bins = out_size * out_size;
        let mut offsets = Vec::with_capacity(rois.len() * bins + 1);
        let mut cells = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        let norm = 1.0 / (sampling * sampling) as f32;
        for roi in rois {
            let x1 = roi.x1 * scale - 0.5;
            let y1 = roi.y1 * scale - 0.5;
            let bw = (roi.x2 * scale - 0.5 - x1) / out_size as f32;
            let bh = (roi.y2 * scale - 0.5 - y1) / out_size as f32;
            for by in 0..out_size {
                for bx in 0..out_size {
                    for sy in 0..sampling {
                        let y = y1 + bh * (by as f32 + (sy as f32 + 0.5) / sampling as f32);
                        for sx in 0..sampling {
                            let x = x1 + bw * (bx as f32 + (sx as f32 + 0.5) / sampling as f32);
                            push_bilinear(y, x, h, w, norm, &mut cells, &mut weights);
                        }
                    }
                    offsets.push(cells.len());
                }
            }
        }
        Self {
            out_size,
            batch: rois.iter().map(|r| r.batch).collect(),
            offsets,
            cells,
            weights,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let bins = self.out_size * self.out_size;
        let k = self.batch.len();
        let mut out = Tensor::zeros(&[k, c, self.out_size, self.out_size]);
        for (r, &b) in self.batch.iter().enumerate() {
            assert!(b < n, "roi batch index out of range");
            for ch in 0..c {
                let plane = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                let dst = &mut out.data_mut()[(r * c + ch) * bins..(r * c + ch + 1) * bins];
                for (bin, d) in dst.iter_mut().enumerate() {
                    let span = self.offsets[r * bins + bin]..self.offsets[r * bins + bin + 1];
                    *d = self.cells[span.clone()]
                        .iter()
                        .zip(&self.weights[span])
                        .map(|(&cell, &wt)| plane[cell as usize] * wt)
                        .sum();
                }
            }
        }
        out
    }

    pub fn backward(&self, x_shape: &[usize], gy: &Tensor) -> Tensor {
        let (c, h, w) = (x_shape[1], x_shape[2], x_shape[3]);
        let hw = h * w;
        let bins = self.out_size * self.out_size;
        let mut gx = Tensor::zeros(x_shape);
        for (r, &b) in self.batch.iter().enumerate() {
            for ch in 0..c {
                let src = &gy.data()[(r * c + ch) * bins..(r * c + ch + 1) * bins];
                let plane = &mut gx.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for (bin, &g) in src.iter().enumerate() {
                    let span = self.offsets[r * bins + bin]..self.offsets[r * bins + bin + 1];
                    for (&cell, &wt) in self.cells[span.clone()].iter().zip(&self.weights[span]) {
                        plane[cell as usize] += g * wt;
                    }
                }
            }
        }
        gx
    }
}

fn push_bilinear(
    mut y: f32,
    mut x: f32,
    h: usize,
    w: usize,
    norm: f32,
    cells: &mut Vec<u32>,
    weights: &mut Vec<f32>,
) {
    if y < -1.0 || y > h as f32 || x < -1.0 || x > w as f32 {
        return;
    }
    y = y.max(0.0);
    x = x.max(0.0);
    let mut y0 = y as usize;
    let mut x0 = x as usize;
    let y1;
    let x1;
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        y = y0 as f32;
    } else {
        y1 = y0 + 1;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        x = x0 as f32;
    } else {
        x1 = x0 + 1;
    }
    let ly = y - y0 as f32;
    let lx = x - x0 as f32;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    for (cy, cx, wt) in [
        (y0, x0, hy * hx),
        (y0, x1, hy * lx),
        (y1, x0, ly * hx),
        (y1, x1, ly * lx),
    ] {
        if wt != 0.0 {
            cells.push((cy * w + cx) as u32);
            weights.push(wt * norm);
        }
    }
}

pub fn linear_forward(x: &Tensor, weight: &Tensor, bias: &[f32]) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let (o, d2) = (weight.shape()[0], weight.shape()[1]);
    assert_eq!(d, d2, "linear input width mismatch");
    let mut out = Tensor::zeros(&[n, o]);
    for row in out.data_mut().chunks_mut(o) {
        row.copy_from_slice(bias);
    }
    gemm(n, d, o, x.data(), d, 1, weight.data(), 1, d, 1.0, out.data_mut());
    out
}

pub fn linear_backward(x: &Tensor, weight: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let o = weight.shape()[0];
    let mut gx = Tensor::zeros(x.shape());
    gemm(n, o, d, gy.data(), o, 1, weight.data(), d, 1, 0.0, gx.data_mut());
    let mut gw = Tensor::zeros(weight.shape());
    gemm(o, n, d, gy.data(), 1, o, x.data(), d, 1, 0.0, gw.data_mut());
    let mut gb = vec![0.0f32; o];
    for row in gy.data().chunks(o) {
        for (acc, v) in gb.iter_mut().zip(row) {
            *acc += v;
        }
    }
    (gx, gw, Tensor::new(vec![o], gb))
}
