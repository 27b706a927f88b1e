//! Raw numeric kernels over flat slices. Shapes are validated by the caller.

/// Geometry of a stride-1, zero-padded 2D cross-correlation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Output positions `lo..hi` for which input index `o + kk - pad` is in `0..extent`.
    #[inline]
    fn valid_range(out_extent: usize, in_extent: usize, kk: usize, pad: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(kk).min(out_extent);
        let hi = (in_extent + pad).saturating_sub(kk).min(out_extent);
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.h_out * g.w_out;
    let mut out = vec![0.0; g.batch * g.c_out * plane_out];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let dst = &mut out[(b * g.c_out + co) * plane_out..][..plane_out];
            dst.fill(bias[co]);
            for ci in 0..g.c_in {
                let src = &input[(b * g.c_in + ci) * plane_in..][..plane_in];
                let wk = &weight[(co * g.c_in + ci) * g.k * g.k..][..g.k * g.k];
                for ky in 0..g.k {
                    let (oy_lo, oy_hi) = ConvGeom::valid_range(g.h_out, g.h, ky, g.pad);
                    for kx in 0..g.k {
                        let wv = wk[ky * g.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = ConvGeom::valid_range(g.w_out, g.w, kx, g.pad);
                        if ox_lo == ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - g.pad;
                            let row_out = &mut dst[oy * g.w_out + ox_lo..oy * g.w_out + ox_hi];
                            let ix0 = ox_lo + kx - g.pad;
                            let row_in = &src[iy * g.w + ix0..iy * g.w + ix0 + row_out.len()];
                            for (o, i) in row_out.iter_mut().zip(row_in) {
                                *o += wv * i;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates gradients for input, weight and bias given the output gradient.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_weight: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let plane_in = g.h * g.w;
    let plane_out = g.h_out * g.w_out;
    if let Some(gb) = grad_bias {
        for b in 0..g.batch {
            for (co, slot) in gb.iter_mut().enumerate() {
                *slot += grad_out[(b * g.c_out + co) * plane_out..][..plane_out]
                    .iter()
                    .sum::<f64>();
            }
        }
    }
    if let Some(gw) = grad_weight {
        for b in 0..g.batch {
            for co in 0..g.c_out {
                let go = &grad_out[(b * g.c_out + co) * plane_out..][..plane_out];
                for ci in 0..g.c_in {
                    let src = &input[(b * g.c_in + ci) * plane_in..][..plane_in];
                    let gwk = &mut gw[(co * g.c_in + ci) * g.k * g.k..][..g.k * g.k];
                    for ky in 0..g.k {
                        let (oy_lo, oy_hi) = ConvGeom::valid_range(g.h_out, g.h, ky, g.pad);
                        for kx in 0..g.k {
                            let (ox_lo, ox_hi) = ConvGeom::valid_range(g.w_out, g.w, kx, g.pad);
                            if ox_lo == ox_hi {
                                continue;
                            }
                            let mut acc = 0.0;
                            for oy in oy_lo..oy_hi {
                                let iy = oy + ky - g.pad;
                                let ix0 = ox_lo + kx - g.pad;
                                let n = ox_hi - ox_lo;
                                let row_go = &go[oy * g.w_out + ox_lo..][..n];
                                let row_in = &src[iy * g.w + ix0..][..n];
                                acc += row_go.iter().zip(row_in).map(|(a, b)| a * b).sum::<f64>();
                            }
                            gwk[ky * g.k + kx] += acc;
                        }
                    }
                }
            }
        }
    }
    if let Some(gi) = grad_input {
        for b in 0..g.batch {
            for co in 0..g.c_out {
                let go = &grad_out[(b * g.c_out + co) * plane_out..][..plane_out];
                for ci in 0..g.c_in {
                    let dst = &mut gi[(b * g.c_in + ci) * plane_in..][..plane_in];
                    let wk = &weight[(co * g.c_in + ci) * g.k * g.k..][..g.k * g.k];
                    for ky in 0..g.k {
                        let (oy_lo, oy_hi) = ConvGeom::valid_range(g.h_out, g.h, ky, g.pad);
                        for kx in 0..g.k {
                            let wv = wk[ky * g.k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (ox_lo, ox_hi) = ConvGeom::valid_range(g.w_out, g.w, kx, g.pad);
                            if ox_lo == ox_hi {
                                continue;
                            }
                            for oy in oy_lo..oy_hi {
                                let iy = oy + ky - g.pad;
                                let ix0 = ox_lo + kx - g.pad;
                                let n = ox_hi - ox_lo;
                                let row_go = &go[oy * g.w_out + ox_lo..][..n];
                                let row_in = &mut dst[iy * g.w + ix0..][..n];
                                for (i, o) in row_in.iter_mut().zip(row_go) {
                                    *i += wv * o;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out[b] = a[b] (n×d) · c[b] (d×m)`.
pub(crate) fn matmul_batched(
    a: &[f64],
    c: &[f64],
    batch: usize,
    n: usize,
    d: usize,
    m: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * n * m];
    for b in 0..batch {
        let ab = &a[b * n * d..][..n * d];
        let cb = &c[b * d * m..][..d * m];
        let ob = &mut out[b * n * m..][..n * m];
        for i in 0..n {
            let row = &mut ob[i * m..][..m];
            for (p, &av) in ab[i * d..][..d].iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                for (o, cv) in row.iter_mut().zip(&cb[p * m..][..m]) {
                    *o += av * cv;
                }
            }
        }
    }
    out
}

/// Swaps the last two axes of a `[batch, rows, cols]` block.
pub(crate) fn transpose_last2(x: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let src = &x[b * rows * cols..][..rows * cols];
        let dst = &mut out[b * rows * cols..][..rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

pub(crate) fn softmax_rows(x: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(m).zip(out.chunks_exact_mut(m)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

/// Normalization statistics kept for the backward pass.
pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Normalizes across the middle axis of an `[outer, c, inner]` block.
pub(crate) fn layer_norm_forward(
    x: &[f64],
    gain: &[f64],
    shift: &[f64],
    eps: f64,
    outer: usize,
    c: usize,
    inner: usize,
) -> (Vec<f64>, NormCache) {
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; outer * inner];
    let cf = c as f64;
    for o in 0..outer {
        let base = o * c * inner;
        for i in 0..inner {
            let mut mean = 0.0;
            for ch in 0..c {
                mean += x[base + ch * inner + i];
            }
            mean /= cf;
            let mut var = 0.0;
            for ch in 0..c {
                let d = x[base + ch * inner + i] - mean;
                var += d * d;
            }
            var /= cf;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[o * inner + i] = is;
            for ch in 0..c {
                let idx = base + ch * inner + i;
                let xh = (x[idx] - mean) * is;
                xhat[idx] = xh;
                y[idx] = gain[ch] * xh + shift[ch];
            }
        }
    }
    (y, NormCache { xhat, inv_std })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward(
    cache: &NormCache,
    gain: &[f64],
    grad_out: &[f64],
    outer: usize,
    c: usize,
    inner: usize,
    grad_x: Option<&mut [f64]>,
    grad_gain: Option<&mut [f64]>,
    grad_shift: Option<&mut [f64]>,
) {
    let xhat = &cache.xhat;
    if let Some(gg) = grad_gain {
        for (idx, go) in grad_out.iter().enumerate() {
            gg[(idx / inner) % c] += go * xhat[idx];
        }
    }
    if let Some(gs) = grad_shift {
        for (idx, go) in grad_out.iter().enumerate() {
            gs[(idx / inner) % c] += go;
        }
    }
    if let Some(gx) = grad_x {
        let cf = c as f64;
        for o in 0..outer {
            let base = o * c * inner;
            for i in 0..inner {
                let mut mean_g = 0.0;
                let mut mean_gx = 0.0;
                for (ch, &g) in gain.iter().enumerate().take(c) {
                    let idx = base + ch * inner + i;
                    let gxh = grad_out[idx] * g;
                    mean_g += gxh;
                    mean_gx += gxh * xhat[idx];
                }
                mean_g /= cf;
                mean_gx /= cf;
                let is = cache.inv_std[o * inner + i];
                for (ch, &g) in gain.iter().enumerate().take(c) {
                    let idx = base + ch * inner + i;
                    let gxh = grad_out[idx] * g;
                    gx[idx] += is * (gxh - mean_g - xhat[idx] * mean_gx);
                }
            }
        }
    }
}
