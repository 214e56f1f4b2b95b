//! Raw numeric kernels behind the graph ops.
//!
//! Everything works on a canonical `[B, C, T, H, W]` layout; 2D tensors are
//! handled as `T = 1` with a temporal kernel of 1. Convolution is lowered to
//! im2col plus a single-threaded sgemm, so results are bit-stable for a given
//! input.

use crate::error::{Error, Result};

/// Geometry of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub in_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        batch: usize,
        in_c: usize,
        out_c: usize,
        in_dims: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        let mut out_dims = [0; 3];
        for d in 0..3 {
            if stride[d] == 0 || kernel[d] == 0 {
                return Err(Error::Shape("kernel and stride must be positive".into()));
            }
            let span = in_dims[d] + 2 * padding[d];
            if span < kernel[d] {
                return Err(Error::Shape(format!(
                    "kernel {:?} larger than padded input {:?} (padding {:?})",
                    kernel, in_dims, padding
                )));
            }
            out_dims[d] = (span - kernel[d]) / stride[d] + 1;
        }
        Ok(Self {
            batch,
            in_c,
            out_c,
            in_dims,
            kernel,
            stride,
            padding,
            out_dims,
        })
    }

    /// Rows of the im2col matrix (`C_in · kt · kh · kw`).
    pub fn col_rows(&self) -> usize {
        self.in_c * self.kernel.iter().product::<usize>()
    }

    /// Columns of the im2col matrix (output voxels per sample).
    pub fn col_cols(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn in_volume(&self) -> usize {
        self.in_dims.iter().product()
    }
}

/// Unfolds one sample `x` (`C × T × H × W`) into `col` (`K × N`).
pub fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let [it, ih, iw] = g.in_dims;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let [ot, oh, ow] = g.out_dims;
    let n = ot * oh * ow;
    let mut row = 0;
    for c in 0..g.in_c {
        let xc = &x[c * it * ih * iw..(c + 1) * it * ih * iw];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let dst = &mut col[row * n..(row + 1) * n];
                    let mut k = 0;
                    for zt in 0..ot {
                        let ti = (zt * st + dt) as isize - pt as isize;
                        for zh in 0..oh {
                            let hi = (zh * sh + dh) as isize - ph as isize;
                            let out_row = &mut dst[k..k + ow];
                            k += ow;
                            if ti < 0 || ti >= it as isize || hi < 0 || hi >= ih as isize {
                                out_row.fill(0.0);
                                continue;
                            }
                            let base = (ti as usize * ih + hi as usize) * iw;
                            let src = &xc[base..base + iw];
                            if sw == 1 {
                                // valid output columns: 0 <= zw + dw - pw < iw
                                let lo = pw.saturating_sub(dw).min(ow);
                                let hi_ex = (iw + pw).saturating_sub(dw).min(ow).max(lo);
                                out_row[..lo].fill(0.0);
                                let s0 = lo + dw - pw;
                                out_row[lo..hi_ex].copy_from_slice(&src[s0..s0 + (hi_ex - lo)]);
                                out_row[hi_ex..].fill(0.0);
                            } else {
                                for (zw, o) in out_row.iter_mut().enumerate() {
                                    let wi = (zw * sw + dw) as isize - pw as isize;
                                    *o = if wi < 0 || wi >= iw as isize {
                                        0.0
                                    } else {
                                        src[wi as usize]
                                    };
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back, accumulating into `dx`.
pub fn col2im(col: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let [it, ih, iw] = g.in_dims;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let [ot, oh, ow] = g.out_dims;
    let n = ot * oh * ow;
    let mut row = 0;
    for c in 0..g.in_c {
        let xc = &mut dx[c * it * ih * iw..(c + 1) * it * ih * iw];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let src = &col[row * n..(row + 1) * n];
                    let mut k = 0;
                    for zt in 0..ot {
                        let ti = (zt * st + dt) as isize - pt as isize;
                        for zh in 0..oh {
                            let hi = (zh * sh + dh) as isize - ph as isize;
                            let in_row = &src[k..k + ow];
                            k += ow;
                            if ti < 0 || ti >= it as isize || hi < 0 || hi >= ih as isize {
                                continue;
                            }
                            let base = (ti as usize * ih + hi as usize) * iw;
                            let dst = &mut xc[base..base + iw];
                            for (zw, &v) in in_row.iter().enumerate() {
                                let wi = (zw * sw + dw) as isize - pw as isize;
                                if wi >= 0 && wi < iw as isize {
                                    dst[wi as usize] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `c (m×n) = alpha · a (m×k) · b (k×n) + beta · c`, all row-major with
/// explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose extents cover the strided index ranges.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward convolution (cross-correlation) over the whole batch. Stride-1
/// geometries use the direct kernel, others im2col + sgemm.
pub fn conv_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    if direct_ok(g) {
        conv_forward_direct(x, w, bias, g)
    } else {
        conv_forward_gemm(x, w, bias, g)
    }
}

/// Gradients of a convolution, accumulated into each buffer that is
/// present. Dispatches like [`conv_forward`].
pub fn conv_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    g: &ConvGeom,
    dx: Option<&mut [f32]>,
    dw: Option<&mut [f32]>,
    db: Option<&mut [f32]>,
) {
    if direct_ok(g) {
        conv_backward_direct(x, w, dy, g, dx, dw, db)
    } else {
        conv_backward_gemm(x, w, dy, g, dx, dw, db)
    }
}

/// Unit stride and padding below the kernel extent on every axis.
fn direct_ok(g: &ConvGeom) -> bool {
    g.stride == [1, 1, 1] && (0..3).all(|d| g.padding[d] < g.kernel[d])
}

/// im2col + sgemm forward convolution.
pub fn conv_forward_gemm(x: &[f32], w: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let k = g.col_rows();
    let n = g.col_cols();
    let in_len = g.in_c * g.in_volume();
    let mut out = vec![0.0f32; g.batch * g.out_c * n];
    let mut col = vec![0.0f32; k * n];
    for b in 0..g.batch {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut col);
        let ob = &mut out[b * g.out_c * n..(b + 1) * g.out_c * n];
        gemm(g.out_c, k, n, w, k as isize, 1, &col, n as isize, 1, 0.0, ob);
        if let Some(bias) = bias {
            for (co, row) in ob.chunks_mut(n).enumerate() {
                let bv = bias[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// im2col + sgemm convolution gradients.
pub fn conv_backward_gemm(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    g: &ConvGeom,
    dx: Option<&mut [f32]>,
    dw: Option<&mut [f32]>,
    db: Option<&mut [f32]>,
) {
    let k = g.col_rows();
    let n = g.col_cols();
    let in_len = g.in_c * g.in_volume();
    let out_len = g.out_c * n;
    if let Some(db) = db {
        for b in 0..g.batch {
            for (co, row) in dy[b * out_len..(b + 1) * out_len].chunks(n).enumerate() {
                db[co] += row.iter().sum::<f32>();
            }
        }
    }
    let mut col = vec![0.0f32; k * n];
    if let Some(dw) = dw {
        for b in 0..g.batch {
            im2col(&x[b * in_len..(b + 1) * in_len], g, &mut col);
            let dyb = &dy[b * out_len..(b + 1) * out_len];
            // dW (Co×K) += dY (Co×N) · colᵀ (N×K)
            gemm(g.out_c, n, k, dyb, n as isize, 1, &col, 1, n as isize, 1.0, dw);
        }
    }
    if let Some(dx) = dx {
        for b in 0..g.batch {
            let dyb = &dy[b * out_len..(b + 1) * out_len];
            // dcol (K×N) = Wᵀ (K×Co) · dY (Co×N)
            gemm(k, g.out_c, n, w, 1, k as isize, dyb, n as isize, 1, 0.0, &mut col);
            col2im(&col, g, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
}

/// Output lanes kept in registers by the direct kernels.
const LANES: usize = 32;

/// Zero-padded copy of one sample `[C, T, H, W]` as `[C, T+2pt, H+2ph, W+2pw]`
/// plus trailing slack so vector reads past the last plane stay in bounds.
fn pad_sample(x: &[f32], c: usize, dims: [usize; 3], pad: [usize; 3]) -> (Vec<f32>, [usize; 3]) {
    let [t, h, w] = dims;
    let pd = [t + 2 * pad[0], h + 2 * pad[1], w + 2 * pad[2]];
    let plane = pd[1] * pd[2];
    let mut out = vec![0.0f32; c * pd[0] * plane + LANES + pd[2] + 1];
    for ci in 0..c {
        for ti in 0..t {
            for hi in 0..h {
                let src = &x[((ci * t + ti) * h + hi) * w..][..w];
                let dst = ((ci * pd[0] + ti + pad[0]) * pd[1] + hi + pad[1]) * pd[2] + pad[2];
                out[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    (out, pd)
}

/// Stride-1 convolution of one padded sample. Output rows keep the padded
/// width `pd[2]` (columns past the valid width hold garbage), giving a
/// `[out_c, To, Ho, pd[2]]` buffer.
#[allow(clippy::too_many_arguments)]
fn direct_sample(
    xpad: &[f32],
    in_c: usize,
    pd: [usize; 3],
    valid_t: (usize, usize),
    w: &[f32],
    out_c: usize,
    k: [usize; 3],
    bias: Option<&[f32]>,
) -> Vec<f32> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { direct_sample_avx2(xpad, in_c, pd, valid_t, w, out_c, k, bias) };
    }
    direct_sample_impl(xpad, in_c, pd, valid_t, w, out_c, k, bias)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn direct_sample_avx2(
    xpad: &[f32],
    in_c: usize,
    pd: [usize; 3],
    valid_t: (usize, usize),
    w: &[f32],
    out_c: usize,
    k: [usize; 3],
    bias: Option<&[f32]>,
) -> Vec<f32> {
    direct_sample_impl(xpad, in_c, pd, valid_t, w, out_c, k, bias)
}

/// Lanes accumulate independently in a fixed order, so every instruction
/// set produces the same bits. Padded time planes outside `valid_t` are
/// all zero and skipped.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn direct_sample_impl(
    xpad: &[f32],
    in_c: usize,
    pd: [usize; 3],
    valid_t: (usize, usize),
    w: &[f32],
    out_c: usize,
    k: [usize; 3],
    bias: Option<&[f32]>,
) -> Vec<f32> {
    let [tp, hp, wp] = pd;
    let [kt, kh, kw] = k;
    let (to, ho) = (tp - kt + 1, hp - kh + 1);
    let plane_in = hp * wp;
    let plane_out = ho * wp;
    let ksz = kt * kh * kw;
    let mut out = vec![0.0f32; out_c * to * plane_out];
    for co in 0..out_c {
        let b = bias.map_or(0.0, |b| b[co]);
        let wco = &w[co * in_c * ksz..(co + 1) * in_c * ksz];
        for zt in 0..to {
            let dst = &mut out[(co * to + zt) * plane_out..][..plane_out];
            let mut j0 = 0;
            while j0 < plane_out {
                let mut acc = [b; LANES];
                for ci in 0..in_c {
                    for a in 0..kt {
                        if zt + a < valid_t.0 || zt + a >= valid_t.1 {
                            continue;
                        }
                        let base = (ci * tp + zt + a) * plane_in + j0;
                        let wk = &wco[(ci * kt + a) * kh * kw..][..kh * kw];
                        for p in 0..kh {
                            for q in 0..kw {
                                let wv = wk[p * kw + q];
                                let xs = &xpad[base + p * wp + q..][..LANES];
                                for l in 0..LANES {
                                    acc[l] += wv * xs[l];
                                }
                            }
                        }
                    }
                }
                let n = LANES.min(plane_out - j0);
                dst[j0..j0 + n].copy_from_slice(&acc[..n]);
                j0 += LANES;
            }
        }
    }
    out
}

/// Drops the garbage columns of a padded-width buffer, accumulating into
/// (or overwriting) a compact `[C, T, H, W]` destination.
fn compact_into(src: &[f32], c: usize, t: usize, h: usize, wp: usize, w: usize, dst: &mut [f32], accumulate: bool) {
    for ct in 0..c * t {
        for r in 0..h {
            let s = &src[(ct * h + r) * wp..][..w];
            let d = &mut dst[(ct * h + r) * w..][..w];
            if accumulate {
                d.iter_mut().zip(s).for_each(|(a, b)| *a += b);
            } else {
                d.copy_from_slice(s);
            }
        }
    }
}

/// Weight gradient for one sample, accumulated into `dw`.
fn weight_grad(xpad: &[f32], pd: [usize; 3], dyp: &[f32], ps: usize, g: &ConvGeom, dw: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { weight_grad_avx2(xpad, pd, dyp, ps, g, dw) };
    }
    weight_grad_impl(xpad, pd, dyp, ps, g, dw)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn weight_grad_avx2(xpad: &[f32], pd: [usize; 3], dyp: &[f32], ps: usize, g: &ConvGeom, dw: &mut [f32]) {
    weight_grad_impl(xpad, pd, dyp, ps, g, dw)
}

/// `dw[co, ci, a, p, q] += Σ dy[co, t, j] · xpad[ci, t + a, j + p·wp + q]`
/// with `dy` at the padded width in lane-rounded planes of `ps`.
#[inline(always)]
fn weight_grad_impl(xpad: &[f32], pd: [usize; 3], dyp: &[f32], ps: usize, g: &ConvGeom, dw: &mut [f32]) {
    let [tp, hp, wp] = pd;
    let [kt, kh, kw] = g.kernel;
    let ot = g.out_dims[0];
    for co in 0..g.out_c {
        for ci in 0..g.in_c {
            for a in 0..kt {
                for p in 0..kh {
                    for q in 0..kw {
                        let mut acc = [0.0f32; LANES];
                        for zt in 0..ot {
                            let ys = &dyp[(co * ot + zt) * ps..][..ps];
                            let xs = &xpad[((ci * tp + zt + a) * hp + p) * wp + q..];
                            let mut j0 = 0;
                            while j0 < ps {
                                let yv = &ys[j0..][..LANES];
                                let xv = &xs[j0..][..LANES];
                                for l in 0..LANES {
                                    acc[l] += yv[l] * xv[l];
                                }
                                j0 += LANES;
                            }
                        }
                        dw[(((co * g.in_c + ci) * kt + a) * kh + p) * kw + q] += acc.iter().sum::<f32>();
                    }
                }
            }
        }
    }
}

/// Direct stride-1 forward convolution; no im2col buffer.
pub fn conv_forward_direct(x: &[f32], w: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    assert!(direct_ok(g), "direct kernel needs unit stride and padding < kernel");
    let in_len = g.in_c * g.in_volume();
    let [ot, oh, ow] = g.out_dims;
    let out_len = g.out_c * ot * oh * ow;
    let mut out = vec![0.0f32; g.batch * out_len];
    for b in 0..g.batch {
        let (xpad, pd) = pad_sample(&x[b * in_len..(b + 1) * in_len], g.in_c, g.in_dims, g.padding);
        let vt = (g.padding[0], g.padding[0] + g.in_dims[0]);
        let y = direct_sample(&xpad, g.in_c, pd, vt, w, g.out_c, g.kernel, bias);
        compact_into(&y, g.out_c, ot, oh, pd[2], ow, &mut out[b * out_len..(b + 1) * out_len], false);
    }
    out
}

/// Direct stride-1 gradients. `dx` is the full convolution of `dy` with the
/// flipped, channel-transposed kernel; `dw` correlates `dy` with the padded
/// input.
pub fn conv_backward_direct(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    g: &ConvGeom,
    dx: Option<&mut [f32]>,
    dw: Option<&mut [f32]>,
    db: Option<&mut [f32]>,
) {
    assert!(direct_ok(g), "direct kernel needs unit stride and padding < kernel");
    let [kt, kh, kw] = g.kernel;
    let [ot, oh, ow] = g.out_dims;
    let ksz = kt * kh * kw;
    let in_len = g.in_c * g.in_volume();
    let out_len = g.out_c * ot * oh * ow;
    if let Some(db) = db {
        for b in 0..g.batch {
            for (co, plane) in dy[b * out_len..(b + 1) * out_len].chunks(ot * oh * ow).enumerate() {
                db[co] += plane.iter().sum::<f32>();
            }
        }
    }
    if let Some(dw) = dw {
        for b in 0..g.batch {
            let (xpad, pd) = pad_sample(&x[b * in_len..(b + 1) * in_len], g.in_c, g.in_dims, g.padding);
            let wp = pd[2];
            let plane_out = oh * wp;
            // dy re-laid out at the padded width with each plane rounded up to
            // whole lanes; garbage columns and the round-up tail are zero
            let ps = plane_out.div_ceil(LANES) * LANES;
            let mut dyp = vec![0.0f32; g.out_c * ot * ps];
            for ct in 0..g.out_c * ot {
                for r in 0..oh {
                    let s = &dy[b * out_len + (ct * oh + r) * ow..][..ow];
                    dyp[ct * ps + r * wp..][..ow].copy_from_slice(s);
                }
            }
            weight_grad(&xpad, pd, &dyp, ps, g, dw);
        }
    }
    if let Some(dx) = dx {
        let [pt, ph, pw] = g.padding;
        let back_pad = [kt - 1 - pt, kh - 1 - ph, kw - 1 - pw];
        // wf[ci, co, a, p, q] = w[co, ci, kt-1-a, kh-1-p, kw-1-q]
        let mut wf = vec![0.0f32; w.len()];
        for co in 0..g.out_c {
            for ci in 0..g.in_c {
                for kk in 0..ksz {
                    wf[(ci * g.out_c + co) * ksz + kk] = w[(co * g.in_c + ci) * ksz + (ksz - 1 - kk)];
                }
            }
        }
        let [it, ih, iw] = g.in_dims;
        for b in 0..g.batch {
            let (dyp, pd) = pad_sample(&dy[b * out_len..(b + 1) * out_len], g.out_c, g.out_dims, back_pad);
            let vt = (back_pad[0], back_pad[0] + ot);
            let d = direct_sample(&dyp, g.out_c, pd, vt, &wf, g.in_c, g.kernel, None);
            compact_into(&d, g.in_c, it, ih, pd[2], iw, &mut dx[b * in_len..(b + 1) * in_len], true);
        }
    }
}

/// Non-overlapping max pooling with window = stride = `f` on `[planes, T, H, W]`.
/// Returns the pooled values and, per output, the flat input index of the max.
pub fn max_pool(x: &[f32], planes: usize, dims: [usize; 3], f: [usize; 3]) -> (Vec<f32>, Vec<u32>) {
    let [t, h, w] = dims;
    let [ot, oh, ow] = [t / f[0], h / f[1], w / f[2]];
    let in_plane = t * h * w;
    let out_plane = ot * oh * ow;
    let mut out = vec![0.0f32; planes * out_plane];
    let mut arg = vec![0u32; planes * out_plane];
    for p in 0..planes {
        let xp = &x[p * in_plane..(p + 1) * in_plane];
        for zt in 0..ot {
            for zh in 0..oh {
                for zw in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for dt in 0..f[0] {
                        for dh in 0..f[1] {
                            let base = ((zt * f[0] + dt) * h + zh * f[1] + dh) * w + zw * f[2];
                            for dw in 0..f[2] {
                                let v = xp[base + dw];
                                // first maximum wins; NaN never replaces a value
                                if v > best {
                                    best = v;
                                    best_i = base + dw;
                                }
                            }
                        }
                    }
                    let o = p * out_plane + (zt * oh + zh) * ow + zw;
                    out[o] = best;
                    arg[o] = (p * in_plane + best_i) as u32;
                }
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour upsampling by integer factors on `[planes, T, H, W]`.
pub fn upsample_nearest(x: &[f32], planes: usize, dims: [usize; 3], f: [usize; 3]) -> Vec<f32> {
    let [t, h, w] = dims;
    let [ut, uh, uw] = [t * f[0], h * f[1], w * f[2]];
    let mut out = vec![0.0f32; planes * ut * uh * uw];
    for p in 0..planes {
        let xp = &x[p * t * h * w..(p + 1) * t * h * w];
        let op = &mut out[p * ut * uh * uw..(p + 1) * ut * uh * uw];
        for zt in 0..ut {
            for zh in 0..uh {
                let src = &xp[((zt / f[0]) * h + zh / f[1]) * w..][..w];
                let dst = &mut op[(zt * uh + zh) * uw..][..uw];
                for (zw, d) in dst.iter_mut().enumerate() {
                    *d = src[zw / f[2]];
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest`]: sums each block back to its source.
pub fn upsample_nearest_backward(
    dy: &[f32],
    planes: usize,
    dims: [usize; 3],
    f: [usize; 3],
    dx: &mut [f32],
) {
    let [t, h, w] = dims;
    let [ut, uh, uw] = [t * f[0], h * f[1], w * f[2]];
    for p in 0..planes {
        let dyp = &dy[p * ut * uh * uw..(p + 1) * ut * uh * uw];
        let dxp = &mut dx[p * t * h * w..(p + 1) * t * h * w];
        for zt in 0..ut {
            for zh in 0..uh {
                let src = &dyp[(zt * uh + zh) * uw..][..uw];
                let dst = &mut dxp[((zt / f[0]) * h + zh / f[1]) * w..][..w];
                for (zw, &v) in src.iter().enumerate() {
                    dst[zw / f[2]] += v;
                }
            }
        }
    }
}
