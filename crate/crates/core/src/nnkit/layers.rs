use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::tensor::{gemm, Tensor};
use super::NnError;

static NEXT_STACK_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_STACK_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    /// Normalizes each row (last axis) to unit length; zero rows stay zero.
    L2Normalize,
}

impl Activation {
    fn tag(self) -> &'static str {
        match self {
            Activation::Identity => "id",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Exp => "exp",
            Activation::L2Normalize => "l2n",
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn uniform_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("shape product matches")
}

/// Fully connected layer on `[N, in]` batches: `y = x Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[out, in]`.
    pub weight: Tensor,
    /// `[out]`.
    pub bias: Tensor,
}

impl Dense {
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self { weight: uniform_init(rng, &[output, input], input), bias: Tensor::zeros(&[output]) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// 2D convolution on a single `[C, H, W]` image.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `[out, in, k, k]`.
    pub weight: Tensor,
    /// `[out]`.
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(input: usize, output: usize, kernel: usize, stride: usize, padding: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: uniform_init(rng, &[output, input, kernel, kernel], input * kernel * kernel),
            bias: Tensor::zeros(&[output]),
            stride,
            padding,
        }
    }

    /// Size-preserving 3×3 or 1×1 convolution.
    pub fn same(input: usize, output: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        Self::new(input, output, kernel, 1, kernel / 2, rng)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize), NnError> {
        let k = self.kernel();
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < k || wp < k {
            return Err(NnError::Shape(format!("{h}×{w} input too small for {k}×{k} kernel")));
        }
        Ok(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }

    fn im2col(&self, x: &[f64], c: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
        let k = self.kernel();
        let (s, p) = (self.stride as isize, self.padding as isize);
        let cols_n = ho * wo;
        let mut cols = vec![0.0; c * k * k * cols_n];
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    #[allow(clippy::too_many_arguments)]
    fn col2im(&self, cols: &[f64], c: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
        let k = self.kernel();
        let (s, p) = (self.stride as isize, self.padding as isize);
        let cols_n = ho * wo;
        let mut x = vec![0.0; c * h * w];
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * cols_n..(row + 1) * cols_n];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..wo {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                x[base + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv(Conv2d),
    Act(Activation),
    /// `y = x + inner(x)`.
    Residual(LayerStack),
    /// `[C, H, W] -> [1, C]`.
    GlobalAvgPool,
}

impl Layer {
    fn describe(&self, out: &mut String) {
        use std::fmt::Write;
        match self {
            Layer::Dense(d) => write!(out, "dense{}x{};", d.input_dim(), d.output_dim()),
            Layer::Conv(c) => {
                write!(out, "conv{}x{}k{}s{}p{};", c.in_channels(), c.out_channels(), c.kernel(), c.stride, c.padding)
            }
            Layer::Act(a) => write!(out, "{};", a.tag()),
            Layer::Residual(s) => write!(out, "res[{}];", s.describe()),
            Layer::GlobalAvgPool => write!(out, "gap;"),
        }
        .expect("writing to a String cannot fail");
    }
}

/// Saved activations from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    stack_id: u64,
    version: u64,
    entries: Vec<Entry>,
}

#[derive(Debug, Clone)]
enum Entry {
    Dense { input: Tensor },
    Conv { cols: Vec<f64>, in_shape: [usize; 3], out_hw: (usize, usize) },
    Act { kind: Activation, input: Tensor, output: Tensor },
    Residual(Tape),
    Pool { in_shape: [usize; 3] },
}

/// Ordered list of layers with shape-checked composition.
#[derive(Debug, PartialEq)]
pub struct LayerStack {
    layers: Vec<Layer>,
    id: u64,
    version: u64,
}

impl Clone for LayerStack {
    fn clone(&self) -> Self {
        Self { layers: self.layers.clone(), id: fresh_id(), version: 0 }
    }
}

fn layer_io(layer: &Layer) -> Result<Option<(usize, usize)>, NnError> {
    Ok(match layer {
        Layer::Dense(d) => Some((d.input_dim(), d.output_dim())),
        Layer::Conv(c) => Some((c.in_channels(), c.out_channels())),
        Layer::Residual(s) => {
            let (i, o) = s.io_dims().ok_or_else(|| NnError::Shape("empty residual block".into()))?;
            if i != o {
                return Err(NnError::Shape(format!("residual block maps {i} -> {o} channels")));
            }
            Some((i, o))
        }
        Layer::Act(_) | Layer::GlobalAvgPool => None,
    })
}

impl LayerStack {
    pub fn new(layers: Vec<Layer>) -> Result<Self, NnError> {
        let mut width: Option<usize> = None;
        for (i, l) in layers.iter().enumerate() {
            if let Some((inp, out)) = layer_io(l)? {
                if let Some(w) = width {
                    if w != inp {
                        return Err(NnError::Shape(format!("layer {i} expects {inp} inputs, previous produces {w}")));
                    }
                }
                width = Some(out);
            }
        }
        Ok(Self { layers, id: fresh_id(), version: 0 })
    }

    /// `[Dense, act, Dense, act, ...]` with `act` between layers and `last` at the end.
    pub fn mlp(dims: &[usize], hidden: Activation, last: Activation, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            layers.push(Layer::Dense(Dense::new(w[0], w[1], rng)));
            layers.push(Layer::Act(hidden));
        }
        layers.pop();
        if last != Activation::Identity {
            layers.push(Layer::Act(last));
        }
        Self::new(layers).expect("consecutive dims chain")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to the layers; invalidates outstanding tapes.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.version += 1;
        &mut self.layers
    }

    /// Input and output feature/channel widths of the parametric layers.
    pub fn io_dims(&self) -> Option<(usize, usize)> {
        let mut first = None;
        let mut last = None;
        for l in &self.layers {
            if let Ok(Some((i, o))) = layer_io(l) {
                first.get_or_insert(i);
                last = Some(o);
            }
        }
        Some((first?, last?))
    }

    /// Canonical architecture string (used for checkpoint validation).
    pub fn describe(&self) -> String {
        let mut s = String::new();
        for l in &self.layers {
            l.describe(&mut s);
        }
        s
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Dense(d) => out.extend([&d.weight, &d.bias]),
                Layer::Conv(c) => out.extend([&c.weight, &c.bias]),
                Layer::Residual(s) => out.extend(s.params()),
                _ => {}
            }
        }
        out
    }

    /// Mutable parameter views; invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.version += 1;
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Dense(d) => out.extend([&mut d.weight, &mut d.bias]),
                Layer::Conv(c) => out.extend([&mut c.weight, &mut c.bias]),
                Layer::Residual(s) => out.extend(s.params_mut()),
                _ => {}
            }
        }
        out
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Dense(d) => {
                    out.push((format!("{prefix}.{i}.weight"), &d.weight));
                    out.push((format!("{prefix}.{i}.bias"), &d.bias));
                }
                Layer::Conv(c) => {
                    out.push((format!("{prefix}.{i}.weight"), &c.weight));
                    out.push((format!("{prefix}.{i}.bias"), &c.bias));
                }
                Layer::Residual(s) => out.extend(s.named_params(&format!("{prefix}.{i}"))),
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params().iter().map(|t| t.zeros_like()).collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tape), NnError> {
        let mut cur = x.clone();
        let mut entries = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, e) = forward_layer(layer, cur)?;
            entries.push(e);
            cur = y;
        }
        Ok((cur, Tape { stack_id: self.id, version: self.version, entries }))
    }

    /// Forward pass without keeping the tape.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor, NnError> {
        Ok(self.forward(x)?.0)
    }

    /// Reverse pass; returns `dL/dx` and parameter gradients in [`Self::params`] order.
    pub fn backward(&self, tape: &Tape, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>), NnError> {
        if tape.stack_id != self.id || tape.version != self.version || tape.entries.len() != self.layers.len() {
            return Err(NnError::StaleTape);
        }
        let mut grads_rev: Vec<Vec<Tensor>> = Vec::with_capacity(self.layers.len());
        let mut g = dy.clone();
        for (layer, entry) in self.layers.iter().zip(&tape.entries).rev() {
            let (dx, pg) = backward_layer(layer, entry, g)?;
            grads_rev.push(pg);
            g = dx;
        }
        let grads = grads_rev.into_iter().rev().flatten().collect();
        Ok((g, grads))
    }
}

fn forward_layer(layer: &Layer, x: Tensor) -> Result<(Tensor, Entry), NnError> {
    match layer {
        Layer::Dense(d) => {
            let (n, i) = match x.shape() {
                [n, i] => (*n, *i),
                s => return Err(NnError::Shape(format!("dense layer expects [N, {}], got {s:?}", d.input_dim()))),
            };
            if i != d.input_dim() {
                return Err(NnError::Shape(format!("dense layer expects {} inputs, got {i}", d.input_dim())));
            }
            let o = d.output_dim();
            let mut y = vec![0.0; n * o];
            for row in y.chunks_mut(o) {
                row.copy_from_slice(d.bias.data());
            }
            gemm(n, i, o, x.data(), false, d.weight.data(), true, 1.0, &mut y);
            Ok((Tensor::from_vec(&[n, o], y)?, Entry::Dense { input: x }))
        }
        Layer::Conv(c) => {
            let (ci, h, w) = match x.shape() {
                [ci, h, w] => (*ci, *h, *w),
                s => return Err(NnError::Shape(format!("conv layer expects [C, H, W], got {s:?}"))),
            };
            if ci != c.in_channels() {
                return Err(NnError::Shape(format!("conv expects {} channels, got {ci}", c.in_channels())));
            }
            let (ho, wo) = c.out_size(h, w)?;
            let cols = c.im2col(x.data(), ci, h, w, ho, wo);
            let co = c.out_channels();
            let kk = ci * c.kernel() * c.kernel();
            let mut y = vec![0.0; co * ho * wo];
            for (o, plane) in y.chunks_mut(ho * wo).enumerate() {
                plane.fill(c.bias.data()[o]);
            }
            gemm(co, kk, ho * wo, c.weight.data(), false, &cols, false, 1.0, &mut y);
            Ok((Tensor::from_vec(&[co, ho, wo], y)?, Entry::Conv { cols, in_shape: [ci, h, w], out_hw: (ho, wo) }))
        }
        Layer::Act(kind) => {
            let y = apply_activation(*kind, &x)?;
            Ok((y.clone(), Entry::Act { kind: *kind, input: x, output: y }))
        }
        Layer::Residual(s) => {
            let (inner, tape) = s.forward(&x)?;
            if inner.shape() != x.shape() {
                return Err(NnError::Shape("residual branch changed the shape".into()));
            }
            let mut y = inner;
            y.add_assign(&x);
            Ok((y, Entry::Residual(tape)))
        }
        Layer::GlobalAvgPool => {
            let (c, h, w) = match x.shape() {
                [c, h, w] => (*c, *h, *w),
                s => return Err(NnError::Shape(format!("pool expects [C, H, W], got {s:?}"))),
            };
            let inv = 1.0 / (h * w) as f64;
            let y = x.data().chunks(h * w).map(|p| p.iter().sum::<f64>() * inv).collect();
            Ok((Tensor::from_vec(&[1, c], y)?, Entry::Pool { in_shape: [c, h, w] }))
        }
    }
}

fn apply_activation(kind: Activation, x: &Tensor) -> Result<Tensor, NnError> {
    let mut y = x.clone();
    match kind {
        Activation::Identity => {}
        Activation::Relu => y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Sigmoid => y.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v)),
        Activation::Tanh => y.data_mut().iter_mut().for_each(|v| *v = v.tanh()),
        Activation::Exp => y.data_mut().iter_mut().for_each(|v| *v = v.exp()),
        Activation::L2Normalize => {
            let d = *x.shape().last().ok_or_else(|| NnError::Shape("scalar input to l2 normalize".into()))?;
            for row in y.data_mut().chunks_mut(d) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    row.iter_mut().for_each(|v| *v /= n);
                }
            }
        }
    }
    Ok(y)
}

fn backward_layer(layer: &Layer, entry: &Entry, dy: Tensor) -> Result<(Tensor, Vec<Tensor>), NnError> {
    match (layer, entry) {
        (Layer::Dense(d), Entry::Dense { input }) => {
            let n = input.shape()[0];
            let (i, o) = (d.input_dim(), d.output_dim());
            if dy.shape() != [n, o] {
                return Err(NnError::Shape(format!("dense upstream gradient {:?}, expected [{n}, {o}]", dy.shape())));
            }
            let mut dw = vec![0.0; o * i];
            gemm(o, n, i, dy.data(), true, input.data(), false, 0.0, &mut dw);
            let mut db = vec![0.0; o];
            for row in dy.data().chunks(o) {
                for (b, g) in db.iter_mut().zip(row) {
                    *b += g;
                }
            }
            let mut dx = vec![0.0; n * i];
            gemm(n, o, i, dy.data(), false, d.weight.data(), false, 0.0, &mut dx);
            Ok((Tensor::from_vec(&[n, i], dx)?, vec![Tensor::from_vec(&[o, i], dw)?, Tensor::from_vec(&[o], db)?]))
        }
        (Layer::Conv(c), Entry::Conv { cols, in_shape, out_hw }) => {
            let [ci, h, w] = *in_shape;
            let (ho, wo) = *out_hw;
            let co = c.out_channels();
            if dy.shape() != [co, ho, wo] {
                return Err(NnError::Shape(format!("conv upstream gradient {:?}", dy.shape())));
            }
            let kk = ci * c.kernel() * c.kernel();
            let mut dw = vec![0.0; co * kk];
            gemm(co, ho * wo, kk, dy.data(), false, cols, true, 0.0, &mut dw);
            let db = dy.data().chunks(ho * wo).map(|p| p.iter().sum()).collect();
            let mut dcols = vec![0.0; kk * ho * wo];
            gemm(kk, co, ho * wo, c.weight.data(), true, dy.data(), false, 0.0, &mut dcols);
            let dx = c.col2im(&dcols, ci, h, w, ho, wo);
            Ok((
                Tensor::from_vec(&[ci, h, w], dx)?,
                vec![Tensor::from_vec(c.weight.shape(), dw)?, Tensor::from_vec(&[co], db)?],
            ))
        }
        (Layer::Act(_), Entry::Act { kind, input, output }) => {
            if dy.shape() != output.shape() {
                return Err(NnError::Shape("activation upstream gradient shape".into()));
            }
            let mut dx = dy;
            let (xs, ys) = (input.data(), output.data());
            match kind {
                Activation::Identity => {}
                Activation::Relu => dx.data_mut().iter_mut().zip(xs).for_each(|(g, x)| {
                    if *x <= 0.0 {
                        *g = 0.0
                    }
                }),
                Activation::Sigmoid => dx.data_mut().iter_mut().zip(ys).for_each(|(g, y)| *g *= y * (1.0 - y)),
                Activation::Tanh => dx.data_mut().iter_mut().zip(ys).for_each(|(g, y)| *g *= 1.0 - y * y),
                Activation::Exp => dx.data_mut().iter_mut().zip(ys).for_each(|(g, y)| *g *= y),
                Activation::L2Normalize => {
                    let d = *input.shape().last().expect("checked in forward");
                    for ((g, x), y) in dx.data_mut().chunks_mut(d).zip(xs.chunks(d)).zip(ys.chunks(d)) {
                        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if n > 0.0 {
                            let yg: f64 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
                            g.iter_mut().zip(y).for_each(|(gi, yi)| *gi = (*gi - yi * yg) / n);
                        } else {
                            g.fill(0.0);
                        }
                    }
                }
            }
            Ok((dx, vec![]))
        }
        (Layer::Residual(s), Entry::Residual(tape)) => {
            let (mut dx, grads) = s.backward(tape, &dy)?;
            dx.add_assign(&dy);
            Ok((dx, grads))
        }
        (Layer::GlobalAvgPool, Entry::Pool { in_shape }) => {
            let [c, h, w] = *in_shape;
            if dy.len() != c {
                return Err(NnError::Shape("pool upstream gradient shape".into()));
            }
            let inv = 1.0 / (h * w) as f64;
            let mut dx = vec![0.0; c * h * w];
            for (plane, g) in dx.chunks_mut(h * w).zip(dy.data()) {
                plane.fill(g * inv);
            }
            Ok((Tensor::from_vec(&[c, h, w], dx)?, vec![]))
        }
        _ => Err(NnError::StaleTape),
    }
}
