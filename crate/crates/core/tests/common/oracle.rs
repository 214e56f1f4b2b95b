//! Direct-sum f64 reference implementations, written without reference to
//! the library kernels.

#![allow(dead_code)]

use std::collections::HashMap;

/// `[B, C, T, H, W]` dense f64 array.
#[derive(Debug, Clone, PartialEq)]
pub struct Arr {
    pub shape: [usize; 5],
    pub data: Vec<f64>,
}

impl Arr {
    pub fn new(shape: [usize; 5], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Arr { shape, data }
    }

    pub fn zeros(shape: [usize; 5]) -> Self {
        Arr::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn at(&self, b: usize, c: usize, t: usize, h: usize, w: usize) -> f64 {
        let [_, cc, tt, hh, ww] = self.shape;
        self.data[(((b * cc + c) * tt + t) * hh + h) * ww + w]
    }

    fn at_mut(&mut self, b: usize, c: usize, t: usize, h: usize, w: usize) -> &mut f64 {
        let [_, cc, tt, hh, ww] = self.shape;
        &mut self.data[(((b * cc + c) * tt + t) * hh + h) * ww + w]
    }
}

/// Cross-correlation with zero padding; weights `[O, C, kt, kh, kw]`.
pub fn conv(x: &Arr, w: &[f64], wshape: [usize; 5], bias: Option<&[f64]>, stride: [usize; 3], pad: [usize; 3]) -> Arr {
    let [b, c, t, h, wd] = x.shape;
    let [o, c2, kt, kh, kw] = wshape;
    assert_eq!(c, c2);
    let ot = (t + 2 * pad[0] - kt) / stride[0] + 1;
    let oh = (h + 2 * pad[1] - kh) / stride[1] + 1;
    let ow = (wd + 2 * pad[2] - kw) / stride[2] + 1;
    let mut out = Arr::zeros([b, o, ot, oh, ow]);
    for bi in 0..b {
        for oi in 0..o {
            for ti in 0..ot {
                for hi in 0..oh {
                    for wi in 0..ow {
                        let mut s = bias.map_or(0.0, |bb| bb[oi]);
                        for ci in 0..c {
                            for a in 0..kt {
                                for p in 0..kh {
                                    for q in 0..kw {
                                        let tt = (ti * stride[0] + a) as isize - pad[0] as isize;
                                        let hh = (hi * stride[1] + p) as isize - pad[1] as isize;
                                        let ww = (wi * stride[2] + q) as isize - pad[2] as isize;
                                        if tt < 0 || hh < 0 || ww < 0 || tt >= t as isize || hh >= h as isize || ww >= wd as isize {
                                            continue;
                                        }
                                        let wv = w[(((oi * c + ci) * kt + a) * kh + p) * kw + q];
                                        s += wv * x.at(bi, ci, tt as usize, hh as usize, ww as usize);
                                    }
                                }
                            }
                        }
                        *out.at_mut(bi, oi, ti, hi, wi) = s;
                    }
                }
            }
        }
    }
    out
}

pub fn max_pool(x: &Arr, f: [usize; 3]) -> Arr {
    let [b, c, t, h, w] = x.shape;
    let mut out = Arr::zeros([b, c, t / f[0], h / f[1], w / f[2]]);
    for bi in 0..b {
        for ci in 0..c {
            for ti in 0..t / f[0] {
                for hi in 0..h / f[1] {
                    for wi in 0..w / f[2] {
                        let mut m = f64::NEG_INFINITY;
                        for a in 0..f[0] {
                            for p in 0..f[1] {
                                for q in 0..f[2] {
                                    m = m.max(x.at(bi, ci, ti * f[0] + a, hi * f[1] + p, wi * f[2] + q));
                                }
                            }
                        }
                        *out.at_mut(bi, ci, ti, hi, wi) = m;
                    }
                }
            }
        }
    }
    out
}

pub fn upsample(x: &Arr, f: [usize; 3]) -> Arr {
    let [b, c, t, h, w] = x.shape;
    let mut out = Arr::zeros([b, c, t * f[0], h * f[1], w * f[2]]);
    for bi in 0..b {
        for ci in 0..c {
            for ti in 0..t * f[0] {
                for hi in 0..h * f[1] {
                    for wi in 0..w * f[2] {
                        *out.at_mut(bi, ci, ti, hi, wi) = x.at(bi, ci, ti / f[0], hi / f[1], wi / f[2]);
                    }
                }
            }
        }
    }
    out
}

pub fn concat(xs: &[&Arr]) -> Arr {
    let [b, _, t, h, w] = xs[0].shape;
    let c: usize = xs.iter().map(|x| x.shape[1]).sum();
    let mut out = Arr::zeros([b, c, t, h, w]);
    for bi in 0..b {
        let mut off = 0;
        for x in xs {
            for ci in 0..x.shape[1] {
                for ti in 0..t {
                    for hi in 0..h {
                        for wi in 0..w {
                            *out.at_mut(bi, off + ci, ti, hi, wi) = x.at(bi, ci, ti, hi, wi);
                        }
                    }
                }
            }
            off += x.shape[1];
        }
    }
    out
}

pub fn relu(x: &Arr) -> Arr {
    Arr::new(x.shape, x.data.iter().map(|v| v.max(0.0)).collect())
}

/// Weighted sum `Σ r_i x_i`.
pub fn dot(x: &Arr, r: &[f64]) -> f64 {
    x.data.iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Architecture description for the reference U-Net.
#[derive(Debug, Clone)]
pub struct RefNet {
    pub three_d: bool,
    pub in_c: usize,
    pub base: usize,
    pub depth: usize,
    pub schedule: Vec<usize>,
    pub final_relu: bool,
    pub scale: f64,
    pub offset: f64,
}

/// Named f64 weights: `(shape, values)`.
pub type RefParams = HashMap<String, ([usize; 5], Vec<f64>)>;

fn layer(x: &Arr, p: &RefParams, name: &str, kernel: [usize; 3], relu_after: bool) -> Arr {
    let (ws, w) = &p[&format!("{name}.weight")];
    let (_, b) = &p[&format!("{name}.bias")];
    assert_eq!([ws[2], ws[3], ws[4]], kernel, "{name}");
    let y = conv(x, w, *ws, Some(b), [1, 1, 1], [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2]);
    if relu_after {
        relu(&y)
    } else {
        y
    }
}

/// Encoder: two 3×3(×3 when T ≥ 2) conv+ReLU per level, max-pool by
/// (schedule[l], 2, 2). 3D skips collapse time with a (T_l, 3, 3) conv with
/// no temporal padding. Decoder: nearest ×2 upsample, conv+ReLU, concat
/// (upsampled first), two conv+ReLU. Head: 1×1 conv, scale, offset, ReLU.
pub fn ref_unet(net: &RefNet, p: &RefParams, x: &Arr) -> Arr {
    let mut h = x.clone();
    let mut skips = Vec::new();
    for l in 0..net.depth {
        let t = h.shape[2];
        let k = if net.three_d && t >= 2 { [3, 3, 3] } else { [1, 3, 3] };
        h = layer(&h, p, &format!("enc{l}.conv1"), k, true);
        h = layer(&h, p, &format!("enc{l}.conv2"), k, true);
        if l + 1 == net.depth {
            break;
        }
        if net.three_d {
            let (ws, w) = &p[&format!("skip{l}.weight")];
            let (_, b) = &p[&format!("skip{l}.bias")];
            let s = relu(&conv(&h, w, *ws, Some(b), [1, 1, 1], [0, 1, 1]));
            assert_eq!(s.shape[2], 1);
            skips.push(s);
        } else {
            skips.push(h.clone());
        }
        let tf = if net.three_d { net.schedule[l] } else { 1 };
        h = max_pool(&h, [tf, 2, 2]);
    }
    assert_eq!(h.shape[2], 1, "bottleneck must have T = 1");
    for l in (0..net.depth - 1).rev() {
        let up = upsample(&h, [1, 2, 2]);
        let up = layer(&up, p, &format!("dec{l}.up"), [1, 3, 3], true);
        let cat = concat(&[&up, &skips[l]]);
        h = layer(&cat, p, &format!("dec{l}.conv1"), [1, 3, 3], true);
        h = layer(&h, p, &format!("dec{l}.conv2"), [1, 3, 3], true);
    }
    let mut out = layer(&h, p, "head", [1, 1, 1], false);
    for v in &mut out.data {
        *v = *v * net.scale + net.offset;
        if net.final_relu {
            *v = v.max(0.0);
        }
    }
    out
}

/// Central finite differences of `f` with respect to each coordinate of
/// `x0`.
pub fn finite_diff(x0: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    (0..x0.len())
        .map(|i| {
            x[i] = x0[i] + eps;
            let up = f(&x);
            x[i] = x0[i] - eps;
            let down = f(&x);
            x[i] = x0[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
