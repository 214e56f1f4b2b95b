//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op as a node holding its forward value. Leaves
//! created with `requires_grad = true` receive gradients from
//! [`Graph::backward`]; repeated calls accumulate until
//! [`Graph::zero_grad`].

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        x: Var,
        planes: usize,
        dims: [usize; 3],
        factors: [usize; 3],
    },
    Concat {
        xs: Vec<Var>,
    },
    Relu {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: f32,
    },
    Sum {
        x: Var,
    },
    SparseHuber {
        x: Var,
        idx: Vec<usize>,
        target: Vec<f32>,
        weight: Vec<f32>,
        delta: f32,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Computation tape.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Splits a 4D (`[B, C, H, W]`) or 5D (`[B, C, T, H, W]`) shape into
/// `(B, C, [T, H, W])`.
pub fn split_shape(shape: &[usize]) -> Result<(usize, usize, [usize; 3])> {
    match *shape {
        [b, c, h, w] => Ok((b, c, [1, h, w])),
        [b, c, t, h, w] => Ok((b, c, [t, h, w])),
        _ => Err(Error::Shape(format!(
            "expected [B, C, H, W] or [B, C, T, H, W], got {:?}",
            shape
        ))),
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Convolution with "valid" semantics after explicit zero padding.
    /// 4D inputs take `[Co, Ci, kh, kw]` weights, 5D inputs
    /// `[Co, Ci, kt, kh, kw]`. `stride` and `padding` are given as
    /// `[t, h, w]`; for 2D the temporal entries must be 1 and 0.
    pub fn conv(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (batch, in_c, in_dims) = split_shape(&xs)?;
        let (out_c, w_in, kernel) = match (xs.len(), ws.as_slice()) {
            (4, &[co, ci, kh, kw]) => (co, ci, [1, kh, kw]),
            (5, &[co, ci, kt, kh, kw]) => (co, ci, [kt, kh, kw]),
            _ => {
                return Err(Error::Shape(format!(
                    "conv: input {:?} incompatible with weight {:?}",
                    xs, ws
                )))
            }
        };
        if w_in != in_c {
            return Err(Error::Shape(format!(
                "conv: input {:?} has {} channels but weight {:?} expects {}",
                xs, in_c, ws, w_in
            )));
        }
        if xs.len() == 4 && (stride[0] != 1 || padding[0] != 0) {
            return Err(Error::Shape("conv2d: temporal stride/padding must be 1/0".into()));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [out_c] {
                return Err(Error::Shape(format!(
                    "conv: bias {:?} does not match {} output channels",
                    self.value(b).shape(),
                    out_c
                )));
            }
        }
        let geom = ConvGeom::new(batch, in_c, out_c, in_dims, kernel, stride, padding)
            .map_err(|e| Error::Shape(format!("conv: input {:?}, weight {:?}: {}", xs, ws, e)))?;
        let out = kernels::conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let mut shape = vec![batch, out_c];
        if xs.len() == 5 {
            shape.push(geom.out_dims[0]);
        }
        shape.extend_from_slice(&geom.out_dims[1..]);
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv { x, w, b, geom }, rg))
    }

    /// Max pooling with window = stride = `factors` (`[t, h, w]`; use `t = 1`
    /// for 4D inputs). Every pooled dimension must divide exactly.
    pub fn max_pool(&mut self, x: Var, factors: [usize; 3]) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (b, c, dims) = split_shape(&xs)?;
        if xs.len() == 4 && factors[0] != 1 {
            return Err(Error::Shape("max_pool: 4D input needs temporal factor 1".into()));
        }
        for d in 0..3 {
            if factors[d] == 0 || dims[d] % factors[d] != 0 {
                return Err(Error::Shape(format!(
                    "max_pool: dims {:?} not divisible by {:?}",
                    dims, factors
                )));
            }
        }
        let (out, argmax) = kernels::max_pool(self.value(x).data(), b * c, dims, factors);
        let mut shape = vec![b, c];
        if xs.len() == 5 {
            shape.push(dims[0] / factors[0]);
        }
        shape.push(dims[1] / factors[1]);
        shape.push(dims[2] / factors[2]);
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPool { x, argmax }, rg))
    }

    pub fn upsample(&mut self, x: Var, factors: [usize; 3]) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (b, c, dims) = split_shape(&xs)?;
        if xs.len() == 4 && factors[0] != 1 {
            return Err(Error::Shape("upsample: 4D input needs temporal factor 1".into()));
        }
        let out = kernels::upsample_nearest(self.value(x).data(), b * c, dims, factors);
        let mut shape = vec![b, c];
        if xs.len() == 5 {
            shape.push(dims[0] * factors[0]);
        }
        shape.push(dims[1] * factors[1]);
        shape.push(dims[2] * factors[2]);
        let rg = self.requires_grad(x);
        let op = Op::Upsample {
            x,
            planes: b * c,
            dims,
            factors,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// Concatenates along the channel axis (axis 1).
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self
            .value(*xs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?)
            .shape()
            .to_vec();
        if first.len() < 2 {
            return Err(Error::Shape(format!("concat: need a channel axis, got {:?}", first)));
        }
        let batch = first[0];
        let inner: usize = first[2..].iter().product();
        let mut channels = 0;
        for &v in xs {
            let s = self.value(v).shape();
            if s.len() != first.len() || s[0] != batch || s[2..] != first[2..] {
                return Err(Error::Shape(format!("concat: {:?} vs {:?}", first, s)));
            }
            channels += s[1];
        }
        let mut out = Vec::with_capacity(batch * channels * inner);
        for b in 0..batch {
            for &v in xs {
                let t = self.value(v);
                let n = t.shape()[1] * inner;
                out.extend_from_slice(&t.data()[b * n..(b + 1) * n]);
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let rg = self.any_grad(xs);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { xs: xs.to_vec() }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str) -> Result<(Vec<usize>, bool)> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{}: {:?} vs {:?}", name, sa, sb)));
        }
        Ok((sa.to_vec(), self.any_grad(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * k).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(out, Op::Scale { x, k }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum() as f32;
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// `Σ weight[i] · huber(x[idx[i]] − target[i], delta)` as a scalar node.
    /// Only the listed elements of `x` receive gradient.
    pub fn sparse_huber(
        &mut self,
        x: Var,
        idx: Vec<usize>,
        target: Vec<f32>,
        weight: Vec<f32>,
        delta: f32,
    ) -> Result<Var> {
        if idx.len() != target.len() || idx.len() != weight.len() {
            return Err(Error::Shape("sparse_huber: index/target/weight lengths differ".into()));
        }
        let xv = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::Range(format!(
                "sparse_huber: index {} outside tensor of {} elements",
                bad,
                xv.len()
            )));
        }
        let mut total = 0.0f64;
        for ((&i, &t), &w) in idx.iter().zip(&target).zip(&weight) {
            total += w as f64 * crate::training::loss::huber((xv[i] - t) as f64, delta as f64);
        }
        let rg = self.requires_grad(x);
        let op = Op::SparseHuber {
            x,
            idx,
            target,
            weight,
            delta,
        };
        Ok(self.push(Tensor::scalar(total as f32), op, rg))
    }

    /// Reverse pass from a scalar root. Leaf gradients accumulate across
    /// calls.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Domain(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        if !self.requires_grad(root) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &g, &mut grads);
            let is_leaf = matches!(op, Op::Leaf);
            self.nodes[i].op = op;
            if is_leaf {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => add_into(acc.data_mut(), &g),
                    None => {
                        node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                    }
                }
            }
        }
        Ok(())
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Vec<f32>>], v: Var) -> Option<&'a mut Vec<f32>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, i: usize, op: &Op, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                // take the slots one at a time to satisfy the borrow checker
                let mut dx = self.grad_slot(grads, *x).map(std::mem::take);
                let mut dw = self.grad_slot(grads, *w).map(std::mem::take);
                let mut db = b.and_then(|b| self.grad_slot(grads, b)).map(std::mem::take);
                kernels::conv_backward(
                    xv,
                    wv,
                    g,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    grads[x.0] = Some(d);
                }
                if let Some(d) = dw {
                    grads[w.0] = Some(d);
                }
                if let (Some(d), Some(b)) = (db, b) {
                    grads[b.0] = Some(d);
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for (&gi, &a) in g.iter().zip(argmax) {
                        dx[a as usize] += gi;
                    }
                }
            }
            Op::Upsample {
                x,
                planes,
                dims,
                factors,
            } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    kernels::upsample_nearest_backward(g, *planes, *dims, *factors, dx);
                }
            }
            Op::Concat { xs } => {
                let shape = self.nodes[i].value.shape();
                let batch = shape[0];
                let inner: usize = shape[2..].iter().product();
                let total_c = shape[1];
                let mut c0 = 0;
                for &v in xs {
                    let c = self.value(v).shape()[1];
                    if let Some(dx) = self.grad_slot(grads, v) {
                        for b in 0..batch {
                            let src = &g[(b * total_c + c0) * inner..(b * total_c + c0 + c) * inner];
                            add_into(&mut dx[b * c * inner..(b + 1) * c * inner], src);
                        }
                    }
                    c0 += c;
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for ((d, &gi), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    add_into(dx, g);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(d) = self.grad_slot(grads, v) {
                        add_into(d, g);
                    }
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = self.grad_slot(grads, *a) {
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    for ((d, &gi), &y) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * y;
                    }
                }
            }
            Op::Scale { x, k } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi * k;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SparseHuber {
                x,
                idx,
                target,
                weight,
                delta,
            } => {
                let xv = self.value(*x).data();
                let xv: Vec<f32> = idx.iter().map(|&i| xv[i]).collect();
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for (((&i, &t), &w), &p) in idx.iter().zip(target).zip(weight).zip(&xv) {
                        let r = p - t;
                        let d = if r.abs() <= *delta { r } else { delta * r.signum() };
                        dx[i] += g[0] * w * d;
                    }
                }
            }
        }
    }
}
