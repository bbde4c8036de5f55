//! A small convolutional network with a full backward pass, seeded SGD
//! training and a bit-exact binary model format.
//!
//! Activations are stored channel-major (`C x H x W`). Convolutions run as
//! im2col followed by a dense matrix product.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::numerics::{softmax, Distribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Fc {
        out_units: usize,
    },
    Softmax,
}

impl LayerSpec {
    pub fn conv3(out_channels: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel: 3,
            stride: 1,
            pad: 1,
        }
    }

    pub fn pool2() -> Self {
        LayerSpec::MaxPool {
            kernel: 2,
            stride: 2,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. })
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => write!(f, "conv {out_channels} {kernel} {stride} {pad}"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::MaxPool { kernel, stride } => write!(f, "maxpool {kernel} {stride}"),
            LayerSpec::Fc { out_units } => write!(f, "fc {out_units}"),
            LayerSpec::Softmax => write!(f, "softmax"),
        }
    }
}

/// Activation shape, channel-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    /// Input height, width, channels.
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    /// Conv layer designated for part attention.
    pub part_layer: usize,
}

impl NetworkSpec {
    /// conv3x3(16)-relu-pool ×2, conv3x3(32)-relu (part layer),
    /// conv3x3(32)-relu-pool, fc(64)-relu, fc(classes)-softmax.
    pub fn mini_domain_net(input_side: usize, classes: usize) -> Self {
        use LayerSpec::*;
        Self {
            input: (input_side, input_side, 3),
            classes,
            layers: vec![
                LayerSpec::conv3(16),
                Relu,
                LayerSpec::pool2(),
                LayerSpec::conv3(16),
                Relu,
                LayerSpec::pool2(),
                LayerSpec::conv3(32),
                Relu,
                LayerSpec::conv3(32),
                Relu,
                LayerSpec::pool2(),
                Fc { out_units: 64 },
                Relu,
                Fc { out_units: classes },
                Softmax,
            ],
            part_layer: 6,
        }
    }

    /// A lighter network for patch filtering: conv(8)-pool, conv(16)-pool, fc(32), fc(classes).
    pub fn mini_filter_net(input_side: usize, classes: usize) -> Self {
        use LayerSpec::*;
        Self {
            input: (input_side, input_side, 3),
            classes,
            layers: vec![
                LayerSpec::conv3(8),
                Relu,
                LayerSpec::pool2(),
                LayerSpec::conv3(16),
                Relu,
                LayerSpec::pool2(),
                Fc { out_units: 32 },
                Relu,
                Fc { out_units: classes },
                Softmax,
            ],
            part_layer: 3,
        }
    }

    pub fn input_shape(&self) -> Shape {
        Shape {
            c: self.input.2,
            h: self.input.0,
            w: self.input.1,
        }
    }

    /// Output shape of every layer, validating the whole stack.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape();
        if cur.is_empty() {
            return Err(Error::Layer {
                layer: 0,
                msg: "empty input".into(),
            });
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |msg: String| Error::Layer { layer: i, msg };
            cur = match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(err("degenerate conv".into()));
                    }
                    if cur.h + 2 * pad < kernel || cur.w + 2 * pad < kernel {
                        return Err(err(format!("kernel {kernel} larger than {}x{}", cur.h, cur.w)));
                    }
                    Shape {
                        c: out_channels,
                        h: (cur.h + 2 * pad - kernel) / stride + 1,
                        w: (cur.w + 2 * pad - kernel) / stride + 1,
                    }
                }
                LayerSpec::MaxPool { kernel, stride } => {
                    if kernel == 0 || stride == 0 || cur.h < kernel || cur.w < kernel {
                        return Err(err(format!("pool {kernel} does not fit {}x{}", cur.h, cur.w)));
                    }
                    Shape {
                        c: cur.c,
                        h: (cur.h - kernel) / stride + 1,
                        w: (cur.w - kernel) / stride + 1,
                    }
                }
                LayerSpec::Fc { out_units } => {
                    if out_units == 0 {
                        return Err(err("fc with zero units".into()));
                    }
                    Shape {
                        c: out_units,
                        h: 1,
                        w: 1,
                    }
                }
                LayerSpec::Relu => cur,
                LayerSpec::Softmax => {
                    if i + 1 != self.layers.len() {
                        return Err(err("softmax must be the last layer".into()));
                    }
                    if cur.len() != self.classes {
                        return Err(err(format!(
                            "softmax over {} units but {} classes",
                            cur.len(),
                            self.classes
                        )));
                    }
                    cur
                }
            };
            shapes.push(cur);
        }
        if self.layers.last() != Some(&LayerSpec::Softmax) {
            return Err(Error::Layer {
                layer: self.layers.len(),
                msg: "network must end with softmax".into(),
            });
        }
        if !self.layers.get(self.part_layer).is_some_and(LayerSpec::is_conv) {
            return Err(Error::Layer {
                layer: self.part_layer,
                msg: "designated part layer is not a conv layer".into(),
            });
        }
        Ok(shapes)
    }

    pub fn first_fc(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Fc { .. }))
    }

    /// Line-oriented text form used inside model files.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "input {} {} {}\nclasses {}\npart {}\n",
            self.input.0, self.input.1, self.input.2, self.classes, self.part_layer
        );
        for l in &self.layers {
            s.push_str(&l.to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut input = None;
        let mut classes = None;
        let mut part = None;
        let mut layers = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.is_empty() {
                continue;
            }
            let bad = || Error::Invalid(format!("spec line {}: '{line}'", n + 1));
            let nums: Vec<usize> = toks[1..]
                .iter()
                .map(|t| t.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            let arity = |k: usize| if nums.len() == k { Ok(()) } else { Err(bad()) };
            match toks[0] {
                "input" => {
                    arity(3)?;
                    input = Some((nums[0], nums[1], nums[2]));
                }
                "classes" => {
                    arity(1)?;
                    classes = Some(nums[0]);
                }
                "part" => {
                    arity(1)?;
                    part = Some(nums[0]);
                }
                "conv" => {
                    arity(4)?;
                    layers.push(LayerSpec::Conv {
                        out_channels: nums[0],
                        kernel: nums[1],
                        stride: nums[2],
                        pad: nums[3],
                    });
                }
                "relu" => {
                    arity(0)?;
                    layers.push(LayerSpec::Relu);
                }
                "maxpool" => {
                    arity(2)?;
                    layers.push(LayerSpec::MaxPool {
                        kernel: nums[0],
                        stride: nums[1],
                    });
                }
                "fc" => {
                    arity(1)?;
                    layers.push(LayerSpec::Fc { out_units: nums[0] });
                }
                "softmax" => {
                    arity(0)?;
                    layers.push(LayerSpec::Softmax);
                }
                _ => return Err(bad()),
            }
        }
        let spec = Self {
            input: input.ok_or_else(|| Error::Invalid("spec missing input".into()))?,
            classes: classes.ok_or_else(|| Error::Invalid("spec missing classes".into()))?,
            layers,
            part_layer: part.ok_or_else(|| Error::Invalid("spec missing part layer".into()))?,
        };
        spec.shapes()?;
        Ok(spec)
    }
}

/// Weights and biases of one layer; both empty for parameter-free layers.
/// Conv weights are `[out][in][kh][kw]`, fc weights `[out][in]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerParams {
    fn empty() -> Self {
        Self {
            weights: Vec::new(),
            bias: Vec::new(),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    shapes: Vec<Shape>,
    params: Vec<LayerParams>,
}

/// Activation tensor, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.shape.h * self.shape.w;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Every activation of one forward pass: `activations[0]` is the input,
/// `activations[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub activations: Vec<Tensor>,
}

impl ForwardTrace {
    pub fn output(&self, layer: usize) -> &Tensor {
        &self.activations[layer + 1]
    }

    pub fn distribution(&self) -> Distribution {
        let last = self.activations.last().expect("trace has the input at least");
        Distribution::new(last.data.clone()).expect("softmax output is a distribution")
    }
}

fn param_shapes(spec: &NetworkSpec, shapes: &[Shape]) -> Vec<(usize, usize)> {
    let mut prev = spec.input_shape();
    spec.layers
        .iter()
        .zip(shapes)
        .map(|(l, &out)| {
            let r = match *l {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    ..
                } => (out_channels * prev.c * kernel * kernel, out_channels),
                LayerSpec::Fc { out_units } => (out_units * prev.len(), out_units),
                _ => (0, 0),
            };
            prev = out;
            r
        })
        .collect()
}

impl Network {
    /// Zero biases, weights drawn from `Normal(0, sqrt(2 / fan_in))`.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = param_shapes(&spec, &shapes);
        let params = sizes
            .iter()
            .map(|&(nw, nb)| {
                if nw == 0 {
                    return LayerParams::empty();
                }
                let fan_in = nw / nb;
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                LayerParams {
                    weights: (0..nw).map(|_| normal.sample(&mut rng)).collect(),
                    bias: vec![0.0; nb],
                }
            })
            .collect();
        Ok(Self {
            spec,
            shapes,
            params,
        })
    }

    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        let mut net = Self::init(spec, 0)?;
        for p in &mut net.params {
            p.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        Ok(net)
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<LayerParams>) -> Result<Self> {
        let shapes = spec.shapes()?;
        let sizes = param_shapes(&spec, &shapes);
        if params.len() != sizes.len() {
            return Err(Error::Shape(format!(
                "{} parameter blocks for {} layers",
                params.len(),
                sizes.len()
            )));
        }
        for (i, (p, &(nw, nb))) in params.iter().zip(&sizes).enumerate() {
            if p.weights.len() != nw || p.bias.len() != nb {
                return Err(Error::Layer {
                    layer: i,
                    msg: format!(
                        "expected {nw} weights and {nb} biases, got {} and {}",
                        p.weights.len(),
                        p.bias.len()
                    ),
                });
            }
            if p.weights.iter().chain(&p.bias).any(|v| !v.is_finite()) {
                return Err(Error::Layer {
                    layer: i,
                    msg: "non-finite parameter".into(),
                });
            }
        }
        Ok(Self {
            spec,
            shapes,
            params,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn layer_shape(&self, layer: usize) -> Shape {
        self.shapes[layer]
    }

    /// Shape of layer `layer`'s input.
    pub fn input_shape_of(&self, layer: usize) -> Shape {
        if layer == 0 {
            self.spec.input_shape()
        } else {
            self.shapes[layer - 1]
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .map(|p| p.weights.len() + p.bias.len())
            .sum()
    }

    /// All parameters flattened in layer order, weights before biases.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.weights.iter().chain(&p.bias).copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::LengthMismatch(self.parameter_count(), flat.len()));
        }
        let mut it = flat.iter().copied();
        for p in &mut self.params {
            p.weights.iter_mut().for_each(|w| *w = it.next().expect("length checked"));
            p.bias.iter_mut().for_each(|b| *b = it.next().expect("length checked"));
        }
        Ok(())
    }

    /// Flattened kernel of filter `filter` in conv layer `layer`.
    pub fn conv_filter(&self, layer: usize, filter: usize) -> Result<&[f64]> {
        match self.spec.layers.get(layer) {
            Some(LayerSpec::Conv { out_channels, .. }) if filter < *out_channels => {
                let n = self.params[layer].weights.len() / out_channels;
                Ok(&self.params[layer].weights[filter * n..(filter + 1) * n])
            }
            Some(LayerSpec::Conv { .. }) => Err(Error::Layer {
                layer,
                msg: format!("no filter {filter}"),
            }),
            _ => Err(Error::Layer {
                layer,
                msg: "not a conv layer".into(),
            }),
        }
    }

    /// The image as a channel-major tensor, shifted by [`INPUT_OFFSET`].
    fn input_tensor(&self, img: &Image) -> Result<Tensor> {
        let (h, w, c) = self.spec.input;
        if img.height() != h || img.width() != w || img.channels() != c {
            return Err(Error::Layer {
                layer: 0,
                msg: format!(
                    "input is {}x{}x{}, network expects {h}x{w}x{c}",
                    img.height(),
                    img.width(),
                    img.channels()
                ),
            });
        }
        let mut data = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[(ch * h + y) * w + x] = img.get(y, x, ch) - INPUT_OFFSET;
                }
            }
        }
        Ok(Tensor {
            shape: Shape { c, h, w },
            data,
        })
    }

    fn forward_layer(&self, i: usize, input: &Tensor) -> Tensor {
        let out_shape = self.shapes[i];
        let data = match self.spec.layers[i] {
            LayerSpec::Conv {
                kernel,
                stride,
                pad,
                ..
            } => conv_forward(
                input,
                &self.params[i],
                out_shape,
                kernel,
                stride,
                pad,
            ),
            LayerSpec::Relu => input.data.iter().map(|&v| v.max(0.0)).collect(),
            LayerSpec::MaxPool { kernel, stride } => {
                pool_forward(input, out_shape, kernel, stride).0
            }
            LayerSpec::Fc { out_units } => {
                let p = &self.params[i];
                let n = input.data.len();
                (0..out_units)
                    .map(|o| {
                        p.bias[o]
                            + p.weights[o * n..(o + 1) * n]
                                .iter()
                                .zip(&input.data)
                                .map(|(w, x)| w * x)
                                .sum::<f64>()
                    })
                    .collect()
            }
            LayerSpec::Softmax => softmax(&input.data)
                .expect("finite logits")
                .into_vec(),
        };
        Tensor {
            shape: out_shape,
            data,
        }
    }

    pub fn forward(&self, img: &Image) -> Result<ForwardTrace> {
        let mut activations = Vec::with_capacity(self.spec.layers.len() + 1);
        activations.push(self.input_tensor(img)?);
        for i in 0..self.spec.layers.len() {
            let next = self.forward_layer(i, activations.last().expect("non-empty"));
            activations.push(next);
        }
        Ok(ForwardTrace { activations })
    }

    /// Output of layer `layer`, stopping the forward pass there.
    pub fn forward_to(&self, img: &Image, layer: usize) -> Result<Tensor> {
        if layer >= self.spec.layers.len() {
            return Err(Error::Layer {
                layer,
                msg: "no such layer".into(),
            });
        }
        let mut cur = self.input_tensor(img)?;
        for i in 0..=layer {
            cur = self.forward_layer(i, &cur);
        }
        Ok(cur)
    }

    /// Output of `layer`, passed through the relu that follows it when there is one.
    pub fn response(&self, img: &Image, layer: usize) -> Result<Tensor> {
        let next_is_relu = self.spec.layers.get(layer + 1) == Some(&LayerSpec::Relu);
        self.forward_to(img, if next_is_relu { layer + 1 } else { layer })
    }

    pub fn predict(&self, img: &Image) -> Result<Distribution> {
        let t = self.forward_to(img, self.spec.layers.len() - 1)?;
        Distribution::new(t.data).map_err(|e| Error::Layer {
            layer: self.spec.layers.len() - 1,
            msg: e.to_string(),
        })
    }

    /// Post-activation output of the first fully connected layer.
    pub fn extract_feature(&self, img: &Image) -> Result<Vec<f64>> {
        let fc = self.spec.first_fc().ok_or_else(|| Error::Layer {
            layer: self.spec.layers.len(),
            msg: "network has no fc layer".into(),
        })?;
        Ok(self.response(img, fc)?.data)
    }
}

fn im2col(input: &Tensor, out: Shape, kernel: usize, stride: usize, pad: usize) -> Vec<f64> {
    let Shape { c, h, w } = input.shape;
    let n = out.h * out.w;
    let mut cols = vec![0.0; c * kernel * kernel * n];
    for ch in 0..c {
        let plane = &input.data[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ch * kernel + ky) * kernel + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..out.h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let d = &mut dst[oy * out.w..(oy + 1) * out.w];
                    for (ox, v) in d.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *v = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], shape: Shape, out: Shape, kernel: usize, stride: usize, pad: usize) -> Vec<f64> {
    let Shape { c, h, w } = shape;
    let n = out.h * out.w;
    let mut data = vec![0.0; c * h * w];
    for ch in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ch * kernel + ky) * kernel + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..out.h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..out.w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            data[(ch * h + iy as usize) * w + ix as usize] += src[oy * out.w + ox];
                        }
                    }
                }
            }
        }
    }
    data
}

/// `c[m x n] (+)= a[m x k] * b[k x n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every index the strided views touch,
    // and `c` is an exclusive borrow that does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_forward(
    input: &Tensor,
    params: &LayerParams,
    out: Shape,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let cols = im2col(input, out, kernel, stride, pad);
    let m = out.c;
    let k = input.shape.c * kernel * kernel;
    let n = out.h * out.w;
    let mut data = Vec::with_capacity(m * n);
    for &b in &params.bias {
        data.extend(std::iter::repeat_n(b, n));
    }
    gemm(m, k, n, &params.weights, (k as isize, 1), &cols, (n as isize, 1), 1.0, &mut data);
    data
}

/// Pooled values plus the flat input index each one came from (first maximum wins).
fn pool_forward(input: &Tensor, out: Shape, kernel: usize, stride: usize) -> (Vec<f64>, Vec<usize>) {
    let Shape { h, w, .. } = input.shape;
    let mut vals = Vec::with_capacity(out.len());
    let mut idx = Vec::with_capacity(out.len());
    for ch in 0..out.c {
        for oy in 0..out.h {
            for ox in 0..out.w {
                let mut best = usize::MAX;
                let mut best_v = f64::NEG_INFINITY;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let i = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                        if input.data[i] > best_v {
                            best_v = input.data[i];
                            best = i;
                        }
                    }
                }
                vals.push(best_v);
                idx.push(best);
            }
        }
    }
    (vals, idx)
}

/// Routes each pooled gradient to the input position that won the max.
pub fn maxpool_backward(input: &Tensor, grad_out: &[f64], out: Shape, kernel: usize, stride: usize) -> Vec<f64> {
    let (_, idx) = pool_forward(input, out, kernel, stride);
    let mut g = vec![0.0; input.data.len()];
    for (&i, &d) in idx.iter().zip(grad_out) {
        g[i] += d;
    }
    g
}

/// Parameter gradients, shaped like [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerParams>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net.params.iter().map(LayerParams::zeros_like).collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|p| p.weights.iter().chain(&p.bias).copied())
            .collect()
    }

    fn scale(&mut self, s: f64) {
        for p in &mut self.layers {
            p.weights.iter_mut().chain(p.bias.iter_mut()).for_each(|v| *v *= s);
        }
    }
}

/// Accumulates into `grads` the gradient of `-ln p[label]` for one sample;
/// returns that loss.
fn accumulate_sample(net: &Network, img: &Image, label: usize, grads: &mut Gradients) -> Result<f64> {
    if label >= net.spec.classes {
        return Err(Error::InvalidLabel {
            label,
            classes: net.spec.classes,
        });
    }
    let trace = net.forward(img)?;
    let probs = &trace.activations.last().expect("non-empty").data;
    let loss = -probs[label].max(f64::MIN_POSITIVE).ln();

    let layers = &net.spec.layers;
    // softmax and cross-entropy combine into p - onehot on the logits
    let mut grad: Vec<f64> = probs.clone();
    grad[label] -= 1.0;
    for i in (0..layers.len() - 1).rev() {
        let input = &trace.activations[i];
        let out_shape = net.shapes[i];
        grad = match layers[i] {
            LayerSpec::Relu => grad
                .iter()
                .zip(&input.data)
                .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                .collect(),
            LayerSpec::MaxPool { kernel, stride } => {
                maxpool_backward(input, &grad, out_shape, kernel, stride)
            }
            LayerSpec::Fc { out_units } => {
                let p = &net.params[i];
                let g = &mut grads.layers[i];
                let n = input.data.len();
                let mut gin = vec![0.0; n];
                for (o, &d) in grad.iter().enumerate().take(out_units) {
                    g.bias[o] += d;
                    if d == 0.0 {
                        continue;
                    }
                    let row = &p.weights[o * n..(o + 1) * n];
                    let grow = &mut g.weights[o * n..(o + 1) * n];
                    for j in 0..n {
                        grow[j] += d * input.data[j];
                        gin[j] += d * row[j];
                    }
                }
                gin
            }
            LayerSpec::Conv {
                kernel,
                stride,
                pad,
                ..
            } => {
                let m = out_shape.c;
                let k = input.shape.c * kernel * kernel;
                let n = out_shape.h * out_shape.w;
                let cols = im2col(input, out_shape, kernel, stride, pad);
                let g = &mut grads.layers[i];
                for (o, b) in g.bias.iter_mut().enumerate() {
                    *b += grad[o * n..(o + 1) * n].iter().sum::<f64>();
                }
                // dW += dOut * colsᵀ
                gemm(m, n, k, &grad, (n as isize, 1), &cols, (1, n as isize), 1.0, &mut g.weights);
                if i == 0 {
                    break;
                }
                // dCols = Wᵀ * dOut
                let mut dcols = vec![0.0; k * n];
                gemm(k, m, n, &net.params[i].weights, (1, k as isize), &grad, (n as isize, 1), 0.0, &mut dcols);
                col2im(&dcols, input.shape, out_shape, kernel, stride, pad)
            }
            LayerSpec::Softmax => unreachable!("softmax is validated to be last"),
        };
    }
    Ok(loss)
}

/// Mean cross-entropy over `batch` and its gradient with respect to every parameter.
pub fn loss_and_gradients(net: &Network, batch: &[(&Image, usize)]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut grads = Gradients::zeros_like(net);
    let mut total = 0.0;
    for &(img, label) in batch {
        total += accumulate_sample(net, img, label, &mut grads)?;
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    Ok((total * inv, grads))
}

/// Indexed training samples; `epoch` lets sources vary augmentation per pass.
pub trait SampleSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn sample(&self, index: usize, epoch: usize) -> Result<(Image, usize)>;
}

impl SampleSource for [(Image, usize)] {
    fn len(&self) -> usize {
        <[(Image, usize)]>::len(self)
    }

    fn sample(&self, index: usize, _epoch: usize) -> Result<(Image, usize)> {
        Ok(self[index].clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 10,
            batch: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    /// Mean training loss of each epoch, measured during the pass.
    pub epoch_losses: Vec<f64>,
}

/// Minibatch SGD with momentum. Returns a new network; `net` is untouched.
pub fn train<S>(net: &Network, data: &S, config: &TrainConfig) -> Result<TrainOutcome>
where
    S: SampleSource + ?Sized,
{
    train_with(net, data, config, |_, _| {})
}

/// As [`train`], calling `on_epoch(epoch, mean_loss)` after every epoch.
pub fn train_with<S, F>(net: &Network, data: &S, config: &TrainConfig, mut on_epoch: F) -> Result<TrainOutcome>
where
    S: SampleSource + ?Sized,
    F: FnMut(usize, f64),
{
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.batch == 0 || !config.lr.is_finite() || config.lr < 0.0 {
        return Err(Error::Invalid(format!("invalid training config {config:?}")));
    }
    let mut net = net.clone();
    let mut velocity = Gradients::zeros_like(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch) {
            let mut grads = Gradients::zeros_like(&net);
            for &idx in chunk {
                let (img, label) = data.sample(idx, epoch)?;
                epoch_loss += accumulate_sample(&net, &img, label, &mut grads)?;
            }
            let inv = 1.0 / chunk.len() as f64;
            for ((p, g), v) in net
                .params
                .iter_mut()
                .zip(&grads.layers)
                .zip(&mut velocity.layers)
            {
                for ((w, &gw), vw) in p.weights.iter_mut().zip(&g.weights).zip(&mut v.weights) {
                    *vw = config.momentum * *vw - config.lr * (gw * inv + config.weight_decay * *w);
                    *w += *vw;
                }
                for ((b, &gb), vb) in p.bias.iter_mut().zip(&g.bias).zip(&mut v.bias) {
                    *vb = config.momentum * *vb - config.lr * gb * inv;
                    *b += *vb;
                }
            }
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Invalid(format!("training diverged at epoch {epoch}")));
        }
        on_epoch(epoch, mean);
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome { net, epoch_losses })
}

/// Subtracted from every pixel before the first layer, centring inputs on zero.
pub const INPUT_OFFSET: f64 = 0.5;

pub const MODEL_MAGIC: &[u8; 5] = b"TLAN1";

/// `TLAN1`, u32 LE spec-text length, spec text, then every parameter as an
/// f64 LE in layer order (weights before biases).
pub fn save_net(net: &Network) -> Vec<u8> {
    let text = net.spec.to_text();
    let mut out = Vec::with_capacity(9 + text.len() + 8 * net.parameter_count());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for v in net.flat_params() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn load_net(bytes: &[u8]) -> Result<Network> {
    let parse = |offset: usize, msg: &str| Error::Parse {
        offset,
        msg: msg.into(),
    };
    if bytes.len() < 5 || &bytes[..5] != MODEL_MAGIC {
        return Err(parse(0, "bad magic"));
    }
    let len_bytes: [u8; 4] = bytes
        .get(5..9)
        .ok_or_else(|| parse(5, "truncated header"))?
        .try_into()
        .expect("slice of four");
    let text_len = u32::from_le_bytes(len_bytes) as usize;
    let text = bytes
        .get(9..9 + text_len)
        .ok_or_else(|| parse(9, "truncated spec text"))?;
    let text = std::str::from_utf8(text).map_err(|_| parse(9, "spec text is not UTF-8"))?;
    let spec = NetworkSpec::from_text(text).map_err(|e| parse(9, &e.to_string()))?;
    let mut net = Network::zeros(spec)?;
    let start = 9 + text_len;
    let payload = &bytes[start..];
    let want = 8 * net.parameter_count();
    if payload.len() != want {
        return Err(parse(
            start,
            &format!("expected {want} weight bytes, found {}", payload.len()),
        ));
    }
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of eight")))
        .collect();
    if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
        return Err(parse(start + 8 * i, "non-finite weight"));
    }
    net.set_flat_params(&flat)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use rand::Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, c, |_, _, _| rng.random::<f64>()).unwrap()
    }

    fn toy_spec() -> NetworkSpec {
        NetworkSpec {
            input: (6, 6, 3),
            classes: 3,
            layers: vec![
                LayerSpec::conv3(3),
                LayerSpec::Relu,
                LayerSpec::pool2(),
                LayerSpec::Fc { out_units: 5 },
                LayerSpec::Relu,
                LayerSpec::Fc { out_units: 3 },
                LayerSpec::Softmax,
            ],
            part_layer: 0,
        }
    }

    #[test]
    fn default_specs_validate() {
        let s = NetworkSpec::mini_domain_net(32, 4);
        let shapes = s.shapes().unwrap();
        assert_eq!(shapes[s.part_layer], Shape { c: 32, h: 8, w: 8 });
        assert_eq!(shapes[10], Shape { c: 32, h: 4, w: 4 });
        NetworkSpec::mini_domain_net(64, 4).shapes().unwrap();
        NetworkSpec::mini_filter_net(32, 3).shapes().unwrap();
    }

    #[test]
    fn spec_validation_errors() {
        let mut s = toy_spec();
        s.layers.pop();
        assert!(s.shapes().is_err());
        let mut s = toy_spec();
        s.part_layer = 1;
        assert!(s.shapes().is_err());
        let mut s = toy_spec();
        s.classes = 4;
        assert!(s.shapes().is_err());
        let s = toy_spec();
        assert_eq!(NetworkSpec::from_text(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn zero_net_gives_uniform_output() {
        let net = Network::zeros(toy_spec()).unwrap();
        let d = net.predict(&random_image(6, 6, 3, 1)).unwrap();
        for p in d.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(net.extract_feature(&random_image(6, 6, 3, 2)).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn relu_layer_is_elementwise_max() {
        let net = Network::init(toy_spec(), 3).unwrap();
        let t = net.forward(&random_image(6, 6, 3, 4)).unwrap();
        let pre = &t.activations[1].data;
        let post = &t.activations[2].data;
        for (a, b) in pre.iter().zip(post) {
            assert_eq!(*b, a.max(0.0));
        }
    }

    #[test]
    fn identity_one_by_one_kernel_copies_input() {
        let spec = NetworkSpec {
            input: (4, 5, 3),
            classes: 2,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 3,
                    kernel: 1,
                    stride: 1,
                    pad: 0,
                },
                LayerSpec::Fc { out_units: 2 },
                LayerSpec::Softmax,
            ],
            part_layer: 0,
        };
        let mut params = Network::zeros(spec.clone()).unwrap().params().to_vec();
        params[0].weights = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let net = Network::from_params(spec, params).unwrap();
        let img = random_image(4, 5, 3, 8);
        let t = net.forward(&img).unwrap();
        assert_eq!(t.activations[1], t.activations[0]);
    }

    #[test]
    fn forward_rejects_wrong_input_size() {
        let net = Network::zeros(toy_spec()).unwrap();
        let e = net.forward(&random_image(5, 6, 3, 1)).unwrap_err();
        assert!(matches!(e, Error::Layer { layer: 0, .. }));
    }

    #[test]
    fn loss_examples() {
        let net = Network::zeros(toy_spec()).unwrap();
        let img = random_image(6, 6, 3, 5);
        let (loss, _) = loss_and_gradients(&net, &[(&img, 1)]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        assert!(matches!(
            loss_and_gradients(&net, &[(&img, 3)]),
            Err(Error::InvalidLabel { label: 3, classes: 3 })
        ));
        // a huge bias on the right class drives the loss to zero
        let mut params = net.params().to_vec();
        params[5].bias = vec![0.0, 800.0, 0.0];
        let confident = Network::from_params(toy_spec(), params).unwrap();
        let (loss, _) = loss_and_gradients(&confident, &[(&img, 1)]).unwrap();
        assert!(loss < 1e-300);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let net = Network::init(toy_spec(), 17).unwrap();
        let imgs: Vec<Image> = (0..3).map(|i| random_image(6, 6, 3, 100 + i)).collect();
        let batch: Vec<(&Image, usize)> = imgs.iter().zip([0, 2, 1]).collect();
        let (_, grads) = loss_and_gradients(&net, &batch).unwrap();
        let analytic = grads.flat();
        let mut probe = net.clone();
        let numeric = finite_diff_grad(
            |x| {
                probe.set_flat_params(x).unwrap();
                loss_and_gradients(&probe, &batch).unwrap().0
            },
            &net.flat_params(),
            1e-5,
        );
        for (a, n) in analytic.iter().zip(&numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel < 1e-4, "analytic {a} numeric {n}");
        }
    }

    #[test]
    fn maxpool_routes_to_argmax() {
        let input = Tensor {
            shape: Shape { c: 1, h: 2, w: 4 },
            data: vec![1.0, 5.0, 2.0, 2.0, 3.0, 4.0, 0.0, 1.0],
        };
        let out = Shape { c: 1, h: 1, w: 2 };
        let g = maxpool_backward(&input, &[0.5, -2.0], out, 2, 2);
        assert_eq!(g, vec![0.0, 0.5, -2.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(g.iter().sum::<f64>(), -1.5);
    }

    fn separable_toy(n: usize) -> Vec<(Image, usize)> {
        (0..n)
            .map(|i| {
                let label = i % 2;
                let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
                let img = Image::from_fn(8, 8, 1, |_, x, _| {
                    let base = if (x < 4) == (label == 0) { 0.8 } else { 0.2 };
                    base + rng.random_range(-0.1..0.1)
                })
                .unwrap();
                (img, label)
            })
            .collect()
    }

    fn toy_classifier() -> NetworkSpec {
        NetworkSpec {
            input: (8, 8, 1),
            classes: 2,
            layers: vec![
                LayerSpec::conv3(4),
                LayerSpec::Relu,
                LayerSpec::pool2(),
                LayerSpec::Fc { out_units: 8 },
                LayerSpec::Relu,
                LayerSpec::Fc { out_units: 2 },
                LayerSpec::Softmax,
            ],
            part_layer: 0,
        }
    }

    #[test]
    fn training_reduces_loss() {
        let data = separable_toy(40);
        let net = Network::init(toy_classifier(), 4).unwrap();
        let batch: Vec<(&Image, usize)> = data.iter().map(|(i, l)| (i, *l)).collect();
        let (initial, _) = loss_and_gradients(&net, &batch).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            batch: 8,
            lr: 0.05,
            ..Default::default()
        };
        let out = train(&net, &data[..], &cfg).unwrap();
        let (after, _) = loss_and_gradients(&out.net, &batch).unwrap();
        assert!(after < initial);
        assert!(*out.epoch_losses.last().unwrap() < initial);
        assert!(out.epoch_losses[25..].iter().sum::<f64>() < out.epoch_losses[..5].iter().sum::<f64>());
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let data = separable_toy(10);
        let net = Network::init(toy_classifier(), 4).unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 2,
            ..Default::default()
        };
        assert_eq!(train(&net, &data[..], &cfg).unwrap().net, net);
    }

    #[test]
    fn training_is_deterministic() {
        let data = separable_toy(12);
        let net = Network::init(toy_classifier(), 9).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch: 4,
            seed: 5,
            ..Default::default()
        };
        let a = save_net(&train(&net, &data[..], &cfg).unwrap().net);
        let b = save_net(&train(&net, &data[..], &cfg).unwrap().net);
        assert_eq!(a, b);
        assert!(train(&net, &data[..0], &cfg).is_err());
    }

    #[test]
    fn model_file_round_trip_and_layout() {
        let net = Network::init(toy_spec(), 21).unwrap();
        let bytes = save_net(&net);
        let header = 9 + net.spec().to_text().len();
        assert_eq!(bytes.len(), header + 8 * net.parameter_count());
        let back = load_net(&bytes).unwrap();
        for s in 0..5 {
            let img = random_image(6, 6, 3, 300 + s);
            assert_eq!(back.predict(&img).unwrap(), net.predict(&img).unwrap());
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(load_net(&bad), Err(Error::Parse { offset: 0, .. })));
        assert!(load_net(&bytes[..bytes.len() - 3]).is_err());
    }
}
