//! 2D and 3D U-Net regressors.
//!
//! Both variants share one layout: two conv+ReLU blocks per encoder level,
//! max-pool downsampling, nearest upsampling followed by a conv in the
//! decoder, and a final 1×1 conv to a single height channel. The 3D encoder
//! pools time by `temporal_schedule` so the bottleneck has `T = 1`; each 3D
//! skip connection collapses its remaining time axis with a conv whose
//! temporal kernel equals that length. The decoder is always 2D.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvDims {
    Conv2d,
    Conv3d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub variant: ConvDims,
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    /// Temporal pooling factor per downsampling step (3D only).
    #[serde(default)]
    pub temporal_schedule: Vec<usize>,
    pub with_final_relu: bool,
    /// Constant multiplier on the head output, so unit-scale activations
    /// map to metres.
    #[serde(default = "default_output_scale")]
    pub output_scale: f32,
    /// Constant added after scaling, so freshly initialised networks start
    /// at a typical height instead of at the ReLU kink.
    #[serde(default = "default_output_offset")]
    pub output_offset: f32,
}

fn default_output_offset() -> f32 {
    10.0
}

fn default_output_scale() -> f32 {
    10.0
}

/// One convolution's parameters as laid out in [`Params`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDef {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    /// Trailing weight dims: `[kh, kw]` or `[kt, kh, kw]`.
    pub kernel: Vec<usize>,
}

impl LayerDef {
    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.out_c, self.in_c];
        s.extend_from_slice(&self.kernel);
        s
    }

    pub fn fan_in(&self) -> usize {
        self.in_c * self.kernel.iter().product::<usize>()
    }
}

fn temporal_kernel(t: usize) -> usize {
    if t >= 2 {
        3
    } else {
        1
    }
}

impl UNetSpec {
    pub fn conv2d(in_channels: usize, base_channels: usize, depth: usize) -> Self {
        Self {
            variant: ConvDims::Conv2d,
            in_channels,
            base_channels,
            depth,
            temporal_schedule: Vec::new(),
            with_final_relu: true,
            output_scale: default_output_scale(),
            output_offset: default_output_offset(),
        }
    }

    pub fn conv3d(in_channels: usize, base_channels: usize, temporal_schedule: Vec<usize>) -> Self {
        Self {
            variant: ConvDims::Conv3d,
            in_channels,
            base_channels,
            depth: temporal_schedule.len() + 1,
            temporal_schedule,
            with_final_relu: true,
            output_scale: default_output_scale(),
            output_offset: default_output_offset(),
        }
    }

    /// Expected input time length (1 for 2D).
    pub fn time_len(&self) -> usize {
        match self.variant {
            ConvDims::Conv2d => 1,
            ConvDims::Conv3d => self.temporal_schedule.iter().product(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !self.output_offset.is_finite() {
            return Err(Error::Config("output_offset must be finite".into()));
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return Err(Error::Config("output_scale must be positive".into()));
        }
        if self.variant == ConvDims::Conv3d {
            if self.temporal_schedule.len() != self.depth - 1 {
                return Err(Error::Config(format!(
                    "temporal_schedule needs {} entries for depth {}, got {:?}",
                    self.depth - 1,
                    self.depth,
                    self.temporal_schedule
                )));
            }
            if self.temporal_schedule.contains(&0) {
                return Err(Error::Config("temporal pool factors must be positive".into()));
            }
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Remaining time length at each encoder level.
    pub fn level_times(&self) -> Vec<usize> {
        let mut t = self.time_len();
        let mut out = Vec::with_capacity(self.depth);
        for l in 0..self.depth {
            out.push(t);
            if l + 1 < self.depth && self.variant == ConvDims::Conv3d {
                t /= self.temporal_schedule[l];
            }
        }
        out
    }

    fn enc_kernel(&self, t: usize) -> Vec<usize> {
        match self.variant {
            ConvDims::Conv2d => vec![3, 3],
            ConvDims::Conv3d => vec![temporal_kernel(t), 3, 3],
        }
    }

    /// Every conv in forward order.
    pub fn layers(&self) -> Vec<LayerDef> {
        let mut out = Vec::new();
        let times = self.level_times();
        let def = |name: String, in_c, out_c, kernel: Vec<usize>| LayerDef {
            name,
            in_c,
            out_c,
            kernel,
        };
        for (l, &t) in times.iter().enumerate() {
            let c = self.channels(l);
            let cin = if l == 0 { self.in_channels } else { self.channels(l - 1) };
            out.push(def(format!("enc{l}.conv1"), cin, c, self.enc_kernel(t)));
            out.push(def(format!("enc{l}.conv2"), c, c, self.enc_kernel(t)));
            if l + 1 < self.depth && self.variant == ConvDims::Conv3d {
                out.push(def(format!("skip{l}"), c, c, vec![t, 3, 3]));
            }
        }
        for l in (0..self.depth - 1).rev() {
            let c = self.channels(l);
            out.push(def(format!("dec{l}.up"), self.channels(l + 1), c, vec![3, 3]));
            out.push(def(format!("dec{l}.conv1"), 2 * c, c, vec![3, 3]));
            out.push(def(format!("dec{l}.conv2"), c, c, vec![3, 3]));
        }
        out.push(def("head".into(), self.channels(0), 1, vec![1, 1]));
        out
    }

    /// Checks an input shape (`[B, C, H, W]` or `[B, C, T, H, W]`).
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (c, t, h, w) = match (self.variant, shape) {
            (ConvDims::Conv2d, &[_, c, h, w]) => (c, 1, h, w),
            (ConvDims::Conv3d, &[_, c, t, h, w]) => (c, t, h, w),
            _ => {
                return Err(Error::Shape(format!(
                    "input {:?} does not match a {:?} network",
                    shape, self.variant
                )))
            }
        };
        if c != self.in_channels || t != self.time_len() {
            return Err(Error::Shape(format!(
                "input {:?} needs {} channels and time length {}",
                shape,
                self.in_channels,
                self.time_len()
            )));
        }
        let div = 1 << (self.depth - 1);
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "spatial size {}x{} not divisible by {} (depth {})",
                h, w, div, self.depth
            )));
        }
        Ok(())
    }
}

/// Ordered, named parameter tensors (`<layer>.weight`, `<layer>.bias`).
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Places every tensor on `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph, requires_grad: bool) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), graph.leaf(t.clone(), requires_grad)))
            .collect();
        BoundParams { vars }
    }

    /// Verifies names and shapes against a spec.
    pub fn check_against(&self, spec: &UNetSpec) -> Result<()> {
        let expected = expected_entries(spec);
        if expected.len() != self.entries.len() {
            return Err(Error::Config(format!(
                "parameter count {} does not match spec ({})",
                self.entries.len(),
                expected.len()
            )));
        }
        for ((en, es), (n, t)) in expected.iter().zip(&self.entries) {
            if en != n || es.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter `{}` {:?} does not match spec entry `{}` {:?}",
                    n,
                    t.shape(),
                    en,
                    es
                )));
            }
        }
        Ok(())
    }
}

fn expected_entries(spec: &UNetSpec) -> Vec<(String, Vec<usize>)> {
    spec.layers()
        .into_iter()
        .flat_map(|l| {
            [
                (format!("{}.weight", l.name), l.weight_shape()),
                (format!("{}.bias", l.name), vec![l.out_c]),
            ]
        })
        .collect()
}

/// Graph handles for a [`Params`] set.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().map(|(_, v)| *v)
    }

    fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Config(format!("missing parameter `{}`", name)))
    }

    fn layer(&self, name: &str) -> Result<(Var, Var)> {
        Ok((self.get(&format!("{name}.weight"))?, self.get(&format!("{name}.bias"))?))
    }
}

/// Deterministic initialisation: weights `U(-a, a)` with `a = sqrt(3 / fan_in)`
/// (variance `1 / fan_in`), biases zero.
pub fn param_init(spec: &UNetSpec, seed: u64) -> Result<Params> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for l in spec.layers() {
        let a = (3.0 / l.fan_in() as f64).sqrt() as f32;
        let shape = l.weight_shape();
        let n: usize = shape.iter().product();
        let w: Vec<f32> = (0..n).map(|_| rng.random_range(-a..a)).collect();
        entries.push((format!("{}.weight", l.name), Tensor::new(shape, w)?));
        entries.push((format!("{}.bias", l.name), Tensor::zeros(&[l.out_c])));
    }
    Ok(Params { entries })
}

/// Handles produced by [`unet_forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, 1, H, W]` height prediction.
    pub output: Var,
    /// Shape of the bottleneck activation (before it is flattened to 2D).
    pub bottleneck_shape: Vec<usize>,
}

fn conv_block(g: &mut Graph, p: &BoundParams, name: &str, x: Var, kernel: &[usize]) -> Result<Var> {
    let (w, b) = p.layer(name)?;
    let padding = match kernel {
        [kh, kw] => [0, kh / 2, kw / 2],
        [kt, kh, kw] => [kt / 2, kh / 2, kw / 2],
        _ => return Err(Error::Shape(format!("bad kernel {:?}", kernel))),
    };
    let y = g.conv(x, w, Some(b), [1, 1, 1], padding)?;
    Ok(g.relu(y))
}

/// Builds the network on `graph` for input `x`.
pub fn unet_forward(spec: &UNetSpec, p: &BoundParams, g: &mut Graph, x: Var) -> Result<ForwardOutput> {
    spec.validate()?;
    spec.check_input(g.value(x).shape())?;
    let is3d = spec.variant == ConvDims::Conv3d;
    let times = spec.level_times();
    let mut skips = Vec::with_capacity(spec.depth - 1);
    let mut h = x;
    let mut bottleneck_shape = Vec::new();
    for (l, &t) in times.iter().enumerate() {
        let k = spec.enc_kernel(t);
        h = conv_block(g, p, &format!("enc{l}.conv1"), h, &k)?;
        h = conv_block(g, p, &format!("enc{l}.conv2"), h, &k)?;
        if l + 1 == spec.depth {
            bottleneck_shape = g.value(h).shape().to_vec();
            break;
        }
        let skip = if is3d {
            let (w, b) = p.layer(&format!("skip{l}"))?;
            let s = g.conv(h, w, Some(b), [1, 1, 1], [0, 1, 1])?;
            let s = g.relu(s);
            flatten_time(g, s)?
        } else {
            h
        };
        skips.push(skip);
        let tf = if is3d { spec.temporal_schedule[l] } else { 1 };
        h = g.max_pool(h, [tf, 2, 2])?;
    }
    if is3d {
        h = flatten_time(g, h)?;
    }
    for l in (0..spec.depth - 1).rev() {
        let up = g.upsample(h, [1, 2, 2])?;
        let up = conv_block(g, p, &format!("dec{l}.up"), up, &[3, 3])?;
        let cat = g.concat(&[up, skips[l]])?;
        h = conv_block(g, p, &format!("dec{l}.conv1"), cat, &[3, 3])?;
        h = conv_block(g, p, &format!("dec{l}.conv2"), h, &[3, 3])?;
    }
    let (w, b) = p.layer("head")?;
    let mut out = g.conv(h, w, Some(b), [1, 1, 1], [0, 0, 0])?;
    out = g.scale(out, spec.output_scale);
    if spec.output_offset != 0.0 {
        let shape = g.value(out).shape().to_vec();
        let offset = g.leaf(Tensor::full(&shape, spec.output_offset), false);
        out = g.add(out, offset)?;
    }
    if spec.with_final_relu {
        out = g.relu(out);
    }
    Ok(ForwardOutput {
        output: out,
        bottleneck_shape,
    })
}

/// `[B, C, 1, H, W]` → `[B, C, H, W]`.
fn flatten_time(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.value(x).shape().to_vec();
    if s.len() != 5 || s[2] != 1 {
        return Err(Error::Shape(format!("expected a collapsed time axis, got {:?}", s)));
    }
    g.reshape(x, &[s[0], s[1], s[3], s[4]])
}

/// Gradient-free forward pass.
pub fn predict(spec: &UNetSpec, params: &Params, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let xv = g.leaf(x.clone(), false);
    let out = unet_forward(spec, &p, &mut g, xv)?;
    Ok(g.value(out.output).clone())
}
