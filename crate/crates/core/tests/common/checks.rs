//! Gradient and convolution checks shared by the integration tests and the
//! acceptance runner. Each returns the worst observed error.

#![allow(dead_code)]

use std::collections::HashMap;

use cht_core::neuralnet::{param_init, unet_forward, Graph, Tensor, UNetSpec, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::{self, Arr};

/// Denominator floor of the per-coordinate relative error.
pub const REL_FLOOR: f64 = 1.0;
pub const GRAD_TOL: f64 = 1e-4;
pub const CONV_TOL: f64 = 1e-5;

fn to5(shape: &[usize]) -> [usize; 5] {
    match *shape {
        [b, c, h, w] => [b, c, 1, h, w],
        [b, c, t, h, w] => [b, c, t, h, w],
        [o] => [o, 1, 1, 1, 1],
        _ => panic!("unsupported shape {shape:?}"),
    }
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Distinct values on a 0.01 grid, so finite differences never cross a
/// pooling tie.
fn distinct_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * 0.01).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Compares graph gradients of `Σ r ⊙ op(inputs)` against central
/// differences of the f64 oracle.
fn check_op(
    rng: &mut ChaCha8Rng,
    inputs: Vec<Tensor>,
    eps: f64,
    graph_op: impl Fn(&mut Graph, &[Var]) -> Var,
    oracle_op: impl Fn(&[Vec<f64>]) -> Arr,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let y = graph_op(&mut g, &vars);
    let ys = g.value(y).shape().to_vec();
    let r = random_tensor(rng, &ys, -1.0, 1.0);
    let rv = g.leaf(r.clone(), false);
    let prod = g.mul(y, rv).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    let r64 = f64s(&r);
    let base: Vec<Vec<f64>> = inputs.iter().map(f64s).collect();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let grad = g.grad(*v).unwrap().clone();
        let fd = oracle::finite_diff(&base[k], eps, |xk| {
            let mut all = base.clone();
            all[k] = xk.to_vec();
            oracle::dot(&oracle_op(&all), &r64)
        });
        for (a, n) in grad.data().iter().zip(&fd) {
            worst = worst.max(oracle::rel_err(*a as f64, *n, REL_FLOOR));
        }
    }
    worst
}

/// Worst relative gradient error per op family.
pub fn op_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // conv2d, stride 1 and 2
    for (stride, pad) in [(1usize, 1usize), (2, 0)] {
        let x = random_tensor(&mut rng, &[2, 3, 6, 5], -1.0, 1.0);
        let w = random_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[4], -1.0, 1.0);
        let ws = to5(w.shape());
        let xs = to5(x.shape());
        let e = check_op(
            &mut rng,
            vec![x, w, b],
            1e-3,
            |g, v| g.conv(v[0], v[1], Some(v[2]), [1, stride, stride], [0, pad, pad]).unwrap(),
            |a| oracle::conv(&Arr::new(xs, a[0].clone()), &a[1], ws, Some(&a[2]), [1, stride, stride], [0, pad, pad]),
        );
        out.push(("conv2d", e));
    }

    // conv3d
    let x = random_tensor(&mut rng, &[1, 2, 4, 5, 4], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[3, 2, 3, 3, 2], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[3], -1.0, 1.0);
    let (xs, ws) = (to5(x.shape()), to5(w.shape()));
    let e = check_op(
        &mut rng,
        vec![x, w, b],
        1e-3,
        |g, v| g.conv(v[0], v[1], Some(v[2]), [1, 1, 1], [1, 1, 0]).unwrap(),
        |a| oracle::conv(&Arr::new(xs, a[0].clone()), &a[1], ws, Some(&a[2]), [1, 1, 1], [1, 1, 0]),
    );
    out.push(("conv3d", e));

    // max-pool (spatial and spatio-temporal)
    let x = distinct_tensor(&mut rng, &[2, 2, 4, 6, 4]);
    let xs = to5(x.shape());
    let e = check_op(
        &mut rng,
        vec![x],
        1e-3,
        |g, v| g.max_pool(v[0], [2, 2, 2]).unwrap(),
        |a| oracle::max_pool(&Arr::new(xs, a[0].clone()), [2, 2, 2]),
    );
    out.push(("max_pool", e));
    let x = distinct_tensor(&mut rng, &[1, 3, 6, 4]);
    let xs = to5(x.shape());
    let e = check_op(
        &mut rng,
        vec![x],
        1e-3,
        |g, v| g.max_pool(v[0], [1, 2, 2]).unwrap(),
        |a| oracle::max_pool(&Arr::new(xs, a[0].clone()), [1, 2, 2]),
    );
    out.push(("max_pool", e));

    // nearest upsample
    let x = random_tensor(&mut rng, &[1, 2, 2, 3, 2], -1.0, 1.0);
    let xs = to5(x.shape());
    let e = check_op(
        &mut rng,
        vec![x],
        1e-3,
        |g, v| g.upsample(v[0], [2, 2, 2]).unwrap(),
        |a| oracle::upsample(&Arr::new(xs, a[0].clone()), [2, 2, 2]),
    );
    out.push(("upsample", e));

    // concat
    let a = random_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
    let (sa, sb) = (to5(a.shape()), to5(b.shape()));
    let e = check_op(
        &mut rng,
        vec![a, b],
        1e-3,
        |g, v| g.concat(&[v[0], v[1]]).unwrap(),
        |x| oracle::concat(&[&Arr::new(sa, x[0].clone()), &Arr::new(sb, x[1].clone())]),
    );
    out.push(("concat", e));

    // relu, inputs kept away from the kink
    let x = {
        let t = random_tensor(&mut rng, &[1, 2, 4, 4], 0.01, 1.0);
        let signs: Vec<f32> = t.data().iter().map(|v| if rng.random::<bool>() { *v } else { -*v }).collect();
        Tensor::new(t.shape().to_vec(), signs).unwrap()
    };
    let xs = to5(x.shape());
    let e = check_op(
        &mut rng,
        vec![x],
        1e-3,
        |g, v| g.relu(v[0]),
        |a| oracle::relu(&Arr::new(xs, a[0].clone())),
    );
    out.push(("relu", e));

    // sparse Huber, residuals away from ±delta
    let x = random_tensor(&mut rng, &[1, 1, 5, 5], 0.0, 20.0);
    let idx: Vec<usize> = vec![0, 3, 7, 12, 18, 24];
    let target: Vec<f32> = idx
        .iter()
        .enumerate()
        .map(|(k, &i)| x.data()[i] + if k % 2 == 0 { 0.37 } else { -3.1 })
        .collect();
    let weight: Vec<f32> = vec![0.2, 0.1, 0.3, 0.15, 0.05, 0.2];
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let loss = g.sparse_huber(v, idx.clone(), target.clone(), weight.clone(), 1.0).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(v).unwrap().clone();
    let fd = oracle::finite_diff(&f64s(&x), 1e-3, |xv| {
        idx.iter()
            .zip(&target)
            .zip(&weight)
            .map(|((&i, &t), &w)| {
                let r = xv[i] - t as f64;
                let h = if r.abs() <= 1.0 { 0.5 * r * r } else { r.abs() - 0.5 };
                w as f64 * h
            })
            .sum()
    });
    let e = grad
        .data()
        .iter()
        .zip(&fd)
        .map(|(a, n)| oracle::rel_err(*a as f64, *n, REL_FLOOR))
        .fold(0.0, f64::max);
    out.push(("masked_huber", e));

    // track-shift loss at its selected shifts
    use cht_core::geodata::Label;
    use cht_core::training::loss::{masked_shift_loss, SparseLabelBatch};
    let (h, w) = (7usize, 7usize);
    let x = random_tensor(&mut rng, &[1, 1, h, w], 0.0, 20.0);
    let labels: Vec<Label> = (0..10)
        .map(|k| Label {
            row: rng.random_range(0..h as u32),
            col: rng.random_range(0..w as u32),
            height: rng.random_range(0.0..20.0),
            track_id: k % 3,
        })
        .collect();
    let batch = SparseLabelBatch {
        labels: vec![labels.clone()],
        years: vec![2020],
    };
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let sl = masked_shift_loss(&mut g, v, &batch, 1.0, 1).unwrap().unwrap();
    g.backward(sl.loss).unwrap();
    let grad = g.grad(v).unwrap().clone();
    let fd = oracle::finite_diff(&f64s(&x), 1e-3, |xv| {
        let mut total = 0.0;
        for ts in &sl.shifts {
            let members: Vec<&Label> = labels.iter().filter(|l| l.track_id == ts.track_id).collect();
            let (mut sum, mut n) = (0.0, 0);
            for l in &members {
                let (r, c) = (l.row as i64 + ts.shift.0 as i64, l.col as i64 + ts.shift.1 as i64);
                if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                    continue;
                }
                let res = xv[r as usize * w + c as usize] - l.height as f64;
                sum += if res.abs() <= 1.0 { 0.5 * res * res } else { res.abs() - 0.5 };
                n += 1;
            }
            total += members.len() as f64 / labels.len() as f64 * sum / n as f64;
        }
        total
    });
    let e = grad
        .data()
        .iter()
        .zip(&fd)
        .map(|(a, n)| oracle::rel_err(*a as f64, *n, REL_FLOOR))
        .fold(0.0, f64::max);
    out.push(("masked_shift_huber", e));
    out
}

fn ref_params(p: &cht_core::neuralnet::Params) -> oracle::RefParams {
    let mut m = HashMap::new();
    for (name, t) in p.entries() {
        let shape = if t.ndim() == 1 { [t.numel(), 1, 1, 1, 1] } else { to5(t.shape()) };
        m.insert(name.clone(), (shape, f64s(t)));
    }
    m
}

/// Tiny 3D U-Net used by the full-network gradient check.
pub fn tiny_unet_spec() -> UNetSpec {
    UNetSpec::conv3d(3, 2, vec![2, 2])
}

/// Worst relative error of dL/dθ and dL/dx for a tiny U-Net, plus its
/// parameter count.
pub fn unet_gradient_error(spec: &UNetSpec, input_shape: &[usize], seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = param_init(spec, seed).unwrap();
    // nonzero biases so every code path carries signal
    let mut params = params;
    for t in params.tensors_mut() {
        if t.ndim() == 1 {
            for v in t.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let x = random_tensor(&mut rng, input_shape, 0.0, 1.0);
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let xv = g.leaf(x.clone(), true);
    let out = unet_forward(spec, &bound, &mut g, xv).unwrap();
    let ys = g.value(out.output).shape().to_vec();
    let r = random_tensor(&mut rng, &ys, -1.0, 1.0);
    let rv = g.leaf(r.clone(), false);
    let prod = g.mul(out.output, rv).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();

    let net = oracle::RefNet {
        three_d: spec.variant == cht_core::neuralnet::ConvDims::Conv3d,
        in_c: spec.in_channels,
        base: spec.base_channels,
        depth: spec.depth,
        schedule: spec.temporal_schedule.clone(),
        final_relu: spec.with_final_relu,
        scale: spec.output_scale as f64,
        offset: spec.output_offset as f64,
    };
    let base = ref_params(&params);
    let xs = to5(x.shape());
    let x64 = f64s(&x);
    let r64 = f64s(&r);
    let eps = 1e-5;
    let mut worst = 0.0f64;
    let names: Vec<String> = params.entries().iter().map(|(n, _)| n.clone()).collect();
    for (k, var) in bound.vars().enumerate() {
        let name = &names[k];
        let grad = g.grad(var).unwrap().clone();
        let (shape, vals) = base[name].clone();
        let fd = oracle::finite_diff(&vals, eps, |v| {
            let mut p = base.clone();
            p.insert(name.clone(), (shape, v.to_vec()));
            oracle::dot(&oracle::ref_unet(&net, &p, &Arr::new(xs, x64.clone())), &r64)
        });
        for (a, n) in grad.data().iter().zip(&fd) {
            worst = worst.max(oracle::rel_err(*a as f64, *n, REL_FLOOR));
        }
    }
    let gx = g.grad(xv).unwrap().clone();
    let fd = oracle::finite_diff(&x64, eps, |v| {
        oracle::dot(&oracle::ref_unet(&net, &base, &Arr::new(xs, v.to_vec())), &r64)
    });
    for (a, n) in gx.data().iter().zip(&fd) {
        worst = worst.max(oracle::rel_err(*a as f64, *n, REL_FLOOR));
    }
    (worst, params.num_scalars())
}

/// Max |library − direct sum| over `cases` random conv problems
/// (C ≤ 3, T, H, W ≤ 6, kernels ≤ 3, strides ≤ 2).
pub fn conv_oracle_max_diff(cases: usize, seed: u64) -> f64 {
    use cht_core::neuralnet::kernels::{conv_forward, ConvGeom};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < cases {
        let b = rng.random_range(1..=2);
        let ci = rng.random_range(1..=3);
        let co = rng.random_range(1..=3);
        let three_d = rng.random::<bool>();
        let dims = [if three_d { rng.random_range(1..=6) } else { 1 }, rng.random_range(1..=6), rng.random_range(1..=6)];
        let k = [if three_d { rng.random_range(1..=3) } else { 1 }, rng.random_range(1..=3), rng.random_range(1..=3)];
        let s = [rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(1..=2)];
        let p = [rng.random_range(0..=k[0] / 2), rng.random_range(0..=k[1] / 2), rng.random_range(0..=k[2] / 2)];
        let Ok(geom) = ConvGeom::new(b, ci, co, dims, k, s, p) else { continue };
        let xn = b * ci * dims.iter().product::<usize>();
        let wn = co * ci * k.iter().product::<usize>();
        let x: Vec<f32> = (0..xn).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f32> = (0..wn).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias: Vec<f32> = (0..co).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = conv_forward(&x, &w, Some(&bias), &geom);
        let to = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<f64>>();
        let want = oracle::conv(
            &Arr::new([b, ci, dims[0], dims[1], dims[2]], to(&x)),
            &to(&w),
            [co, ci, k[0], k[1], k[2]],
            Some(&to(&bias)),
            s,
            p,
        );
        assert_eq!(got.len(), want.data.len());
        for (a, e) in got.iter().zip(&want.data) {
            worst = worst.max((*a as f64 - e).abs());
        }
        done += 1;
    }
    worst
}
