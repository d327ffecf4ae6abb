//! Network construction, forward evaluation and reverse-mode gradients.
//!
//! A [`Network`] binds an [`ArchSpec`] to a concrete input shape and drives
//! batched forward passes and backpropagation over dense `f64` tensors.
//! ReLU follows every convolution and every hidden fully connected layer;
//! the score-producing layer has no activation. Dropout uses the inverted
//! convention: retained activations are scaled by `1/(1-r)` at train time so
//! evaluation is the identity.
//!
//! Convolutions run as im2col plus a dense matrix product; pooling uses the
//! same ceil-mode window arithmetic as the cost model, with windows clipped
//! at the input border. Everything is sequential and bit-reproducible given
//! the same inputs and generator state.

use crate::arch::{ArchError, ArchSpec, LayerSpec, Shape};
use crate::tensor::{matmul, matmul_at, matmul_bt, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("train-mode dropout requires a random generator")]
    MissingRng,
    #[error("backward requires a cache from a train-mode forward pass")]
    EvalCache,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Weight and bias tensors for one layer; `None` for layers without
/// parameters (pooling, dropout).
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Conv { weight: Tensor, bias: Tensor },
    Fc { weight: Tensor, bias: Tensor },
    None,
}

impl LayerParams {
    fn tensors(&self) -> Vec<&Tensor> {
        match self {
            LayerParams::Conv { weight, bias } | LayerParams::Fc { weight, bias } => {
                vec![weight, bias]
            }
            LayerParams::None => vec![],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            LayerParams::Conv { weight, bias } | LayerParams::Fc { weight, bias } => {
                vec![weight, bias]
            }
            LayerParams::None => vec![],
        }
    }
}

/// All parameters of a network, ordered to match its [`ArchSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<LayerParams>,
}

impl NetworkParams {
    /// Flat iteration over every parameter tensor, weights before biases,
    /// in layer order. This is also the checkpoint serialization order.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| l.tensors())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut())
    }

    /// Same structure with every value zeroed.
    pub fn zeros_like(&self) -> NetworkParams {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                LayerParams::Conv { weight, bias } => LayerParams::Conv {
                    weight: Tensor::zeros(weight.shape()),
                    bias: Tensor::zeros(bias.shape()),
                },
                LayerParams::Fc { weight, bias } => LayerParams::Fc {
                    weight: Tensor::zeros(weight.shape()),
                    bias: Tensor::zeros(bias.shape()),
                },
                LayerParams::None => LayerParams::None,
            })
            .collect();
        NetworkParams { layers }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }
}

enum LayerExtra {
    Conv {
        /// im2col buffer, `batch` blocks of `(k^2 * in_c) x (out_h * out_w)`.
        col: Vec<f64>,
        /// Pre-activation output, kept when ReLU follows the layer.
        preact: Option<Tensor>,
    },
    Fc {
        preact: Option<Tensor>,
    },
    MaxPool {
        /// Flat index into the layer input for each output element.
        argmax: Vec<usize>,
    },
    AvgPool,
    Dropout {
        /// Per-element scale (0 or 1/(1-r)); empty when the layer was the
        /// identity (eval mode or r = 0).
        mask: Vec<f64>,
    },
}

/// Activations and bookkeeping from a forward pass, consumed by `backward`.
pub struct ForwardCache {
    mode: Mode,
    /// `acts[i]` is the input to layer `i`; `acts[len]` is the final output.
    acts: Vec<Tensor>,
    extras: Vec<LayerExtra>,
}

/// An [`ArchSpec`] bound to an input shape, with per-layer shapes resolved.
pub struct Network {
    spec: ArchSpec,
    input_shape: (usize, usize, usize),
    trace: Vec<Shape>,
    scoring_layer: usize,
    classes: usize,
}

impl Network {
    pub fn new(spec: ArchSpec, input: (usize, usize, usize)) -> Result<Self, EngineError> {
        spec.validate_classifier()?;
        let trace = crate::arch::infer_shapes(&spec, input)?;
        let scoring_layer = spec.scoring_layer().expect("validated above");
        let classes = trace.last().expect("non-empty").numel();
        Ok(Network {
            spec,
            input_shape: input,
            trace,
            scoring_layer,
            classes,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn layer_input_shape(&self, idx: usize) -> Shape {
        if idx == 0 {
            let (h, w, c) = self.input_shape;
            Shape::Spatial(h, w, c)
        } else {
            self.trace[idx - 1]
        }
    }

    fn relu_after(&self, idx: usize) -> bool {
        self.spec.layers[idx].is_scoring() && idx < self.scoring_layer
    }

    /// Xavier-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> NetworkParams {
        let layers = self
            .spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| match *layer {
                LayerSpec::Conv {
                    kernel,
                    out_channels,
                    ..
                } => {
                    let in_c = match self.layer_input_shape(i) {
                        Shape::Spatial(_, _, c) => c,
                        Shape::Flat(_) => unreachable!("shape inference rejects this"),
                    };
                    let fan_in = kernel * kernel * in_c;
                    let fan_out = kernel * kernel * out_channels;
                    let weight = uniform_tensor(
                        &[out_channels, in_c, kernel, kernel],
                        fan_in,
                        fan_out,
                        rng,
                    );
                    LayerParams::Conv {
                        weight,
                        bias: Tensor::zeros(&[out_channels]),
                    }
                }
                LayerSpec::FullyConnected { out_units } => {
                    let in_units = self.layer_input_shape(i).numel();
                    let weight = uniform_tensor(&[out_units, in_units], in_units, out_units, rng);
                    LayerParams::Fc {
                        weight,
                        bias: Tensor::zeros(&[out_units]),
                    }
                }
                _ => LayerParams::None,
            })
            .collect();
        NetworkParams { layers }
    }

    fn check_params(&self, params: &NetworkParams) -> Result<(), EngineError> {
        if params.layers.len() != self.spec.layers.len() {
            return Err(EngineError::ShapeMismatch(format!(
                "parameter set has {} layers, architecture has {}",
                params.layers.len(),
                self.spec.layers.len()
            )));
        }
        for (i, (layer, p)) in self.spec.layers.iter().zip(&params.layers).enumerate() {
            let expected: Option<(Vec<usize>, Vec<usize>)> = match *layer {
                LayerSpec::Conv {
                    kernel,
                    out_channels,
                    ..
                } => {
                    let in_c = match self.layer_input_shape(i) {
                        Shape::Spatial(_, _, c) => c,
                        Shape::Flat(_) => unreachable!(),
                    };
                    Some((vec![out_channels, in_c, kernel, kernel], vec![out_channels]))
                }
                LayerSpec::FullyConnected { out_units } => {
                    let in_units = self.layer_input_shape(i).numel();
                    Some((vec![out_units, in_units], vec![out_units]))
                }
                _ => None,
            };
            let ok = match (&expected, p) {
                (Some((w, b)), LayerParams::Conv { weight, bias })
                | (Some((w, b)), LayerParams::Fc { weight, bias }) => {
                    weight.shape() == w.as_slice() && bias.shape() == b.as_slice()
                }
                (None, LayerParams::None) => true,
                _ => false,
            };
            if !ok {
                return Err(EngineError::ShapeMismatch(format!(
                    "layer {} parameters do not match the architecture",
                    i
                )));
            }
        }
        Ok(())
    }

    /// Runs the network over a rank-4 batch `(n, channels, height, width)`
    /// and returns the logits `(n, classes)` with cached activations.
    pub fn forward(
        &self,
        params: &NetworkParams,
        batch: &Tensor,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, ForwardCache), EngineError> {
        self.check_params(params)?;
        let (h, w, c) = self.input_shape;
        if batch.shape().len() != 4 || batch.shape()[1..] != [c, h, w] {
            return Err(EngineError::ShapeMismatch(format!(
                "batch shape {:?} does not match network input {}x{}x{}",
                batch.shape(),
                h,
                w,
                c
            )));
        }
        let n = batch.shape()[0];
        let mut acts = Vec::with_capacity(self.spec.layers.len() + 1);
        let mut extras = Vec::with_capacity(self.spec.layers.len());
        acts.push(batch.clone());
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let input = acts.last().expect("pushed above");
            let relu = self.relu_after(i);
            let (out, extra) = match (layer, &params.layers[i]) {
                (LayerSpec::Conv { kernel, stride, padding, .. }, LayerParams::Conv { weight, bias }) => {
                    conv_forward(input, weight, bias, *kernel, *stride, *padding, relu)
                }
                (LayerSpec::MaxPool { kernel, stride }, _) => {
                    max_pool_forward(input, *kernel, *stride)
                }
                (LayerSpec::AvgPool { kernel, stride }, _) => {
                    avg_pool_forward(input, *kernel, *stride)
                }
                (LayerSpec::FullyConnected { .. }, LayerParams::Fc { weight, bias }) => {
                    fc_forward(input, weight, bias, relu)
                }
                (LayerSpec::Dropout { drop_prob }, _) => {
                    let rate = *drop_prob;
                    if mode == Mode::Train && rate > 0.0 {
                        let rng = rng.as_deref_mut().ok_or(EngineError::MissingRng)?;
                        dropout_forward(input, rate, rng)
                    } else {
                        (input.clone(), LayerExtra::Dropout { mask: Vec::new() })
                    }
                }
                _ => unreachable!("check_params guarantees matching variants"),
            };
            acts.push(out);
            extras.push(extra);
        }
        let logits = acts
            .last()
            .expect("non-empty")
            .clone()
            .reshaped(&[n, self.classes])
            .expect("trace guarantees element count");
        Ok((
            logits,
            ForwardCache {
                mode,
                acts,
                extras,
            },
        ))
    }

    /// Convenience eval-mode forward returning only the logits.
    pub fn eval_logits(
        &self,
        params: &NetworkParams,
        batch: &Tensor,
    ) -> Result<Tensor, EngineError> {
        self.forward(params, batch, Mode::Eval, None).map(|(l, _)| l)
    }

    /// Backpropagates `loss_grad` (shaped like the logits) through the cached
    /// forward pass, returning parameter gradients shaped like the params.
    pub fn backward(
        &self,
        params: &NetworkParams,
        cache: &ForwardCache,
        loss_grad: &Tensor,
    ) -> Result<NetworkParams, EngineError> {
        if cache.mode != Mode::Train {
            return Err(EngineError::EvalCache);
        }
        let n = cache.acts[0].shape()[0];
        if loss_grad.shape() != [n, self.classes] {
            return Err(EngineError::ShapeMismatch(format!(
                "loss gradient shape {:?}, expected [{}, {}]",
                loss_grad.shape(),
                n,
                self.classes
            )));
        }
        let mut grads = params.zeros_like();
        let out_shape = cache.acts.last().expect("non-empty").shape().to_vec();
        let mut grad = loss_grad
            .clone()
            .reshaped(&out_shape)
            .expect("same element count");
        for i in (0..self.spec.layers.len()).rev() {
            let input = &cache.acts[i];
            grad = match (&self.spec.layers[i], &params.layers[i], &cache.extras[i]) {
                (
                    LayerSpec::Conv { kernel, stride, padding, .. },
                    LayerParams::Conv { weight, .. },
                    LayerExtra::Conv { col, preact },
                ) => {
                    let mut g = grad;
                    if let Some(pre) = preact {
                        relu_backward(&mut g, pre);
                    }
                    let (dw, db, dx) = conv_backward(
                        input, weight, col, &g, *kernel, *stride, *padding,
                    );
                    if let LayerParams::Conv { weight, bias } = &mut grads.layers[i] {
                        *weight = dw;
                        *bias = db;
                    }
                    dx
                }
                (
                    LayerSpec::FullyConnected { .. },
                    LayerParams::Fc { weight, .. },
                    LayerExtra::Fc { preact },
                ) => {
                    let mut g = grad;
                    if let Some(pre) = preact {
                        relu_backward(&mut g, pre);
                    }
                    let (dw, db, dx) = fc_backward(input, weight, &g);
                    if let LayerParams::Fc { weight, bias } = &mut grads.layers[i] {
                        *weight = dw;
                        *bias = db;
                    }
                    dx
                }
                (LayerSpec::MaxPool { .. }, _, LayerExtra::MaxPool { argmax }) => {
                    max_pool_backward(input, &grad, argmax)
                }
                (LayerSpec::AvgPool { kernel, stride }, _, LayerExtra::AvgPool) => {
                    avg_pool_backward(input, &grad, *kernel, *stride)
                }
                (LayerSpec::Dropout { .. }, _, LayerExtra::Dropout { mask }) => {
                    let mut g = grad;
                    if !mask.is_empty() {
                        for (v, m) in g.data_mut().iter_mut().zip(mask) {
                            *v *= m;
                        }
                    }
                    g
                }
                _ => unreachable!("cache layout mirrors the layer sequence"),
            };
        }
        Ok(grads)
    }
}

fn uniform_tensor(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.gen_range(-limit..limit))
        .collect::<Vec<f64>>();
    Tensor::from_vec(shape, data).expect("length matches by construction")
}

fn relu_backward(grad: &mut Tensor, preact: &Tensor) {
    for (g, &z) in grad.data_mut().iter_mut().zip(preact.data()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
}

fn apply_relu(t: &mut Tensor) {
    for v in t.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn conv_out_extent(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

/// Fills one im2col block: `(k^2 * in_c) x (out_h * out_w)`, zero-padded.
#[allow(clippy::too_many_arguments)]
fn im2col_sample(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    let ohw = oh * ow;
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[(ch * k * k + ky * k + kx) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let base = oy * ow;
                    if iy < 0 || iy >= h as isize {
                        row[base..base + ow].fill(0.0);
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * s + kx) as isize - p as isize;
                        row[base + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            plane[iy * w + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add of an im2col gradient block back onto the input layout.
#[allow(clippy::too_many_arguments)]
fn col2im_sample(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
    input_grad: &mut [f64],
) {
    let ohw = oh * ow;
    for ch in 0..c {
        let plane = &mut input_grad[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[(ch * k * k + ky * k + kx) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy * w + ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    k: usize,
    s: usize,
    p: usize,
    relu: bool,
) -> (Tensor, LayerExtra) {
    let (n, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let oc = weight.shape()[0];
    let oh = conv_out_extent(h, k, s, p);
    let ow = conv_out_extent(w, k, s, p);
    let ohw = oh * ow;
    let kin = k * k * c;
    let mut col = vec![0.0; n * kin * ohw];
    let mut out = Tensor::zeros(&[n, oc, oh, ow]);
    for i in 0..n {
        let sample = &input.data()[i * c * h * w..(i + 1) * c * h * w];
        let block = &mut col[i * kin * ohw..(i + 1) * kin * ohw];
        im2col_sample(sample, c, h, w, k, s, p, oh, ow, block);
        let dst = &mut out.data_mut()[i * oc * ohw..(i + 1) * oc * ohw];
        matmul(oc, kin, ohw, weight.data(), block, dst, false);
        for o in 0..oc {
            let b = bias.data()[o];
            for v in &mut dst[o * ohw..(o + 1) * ohw] {
                *v += b;
            }
        }
    }
    let extra = if relu {
        let preact = out.clone();
        apply_relu(&mut out);
        LayerExtra::Conv {
            col,
            preact: Some(preact),
        }
    } else {
        LayerExtra::Conv { col, preact: None }
    };
    (out, extra)
}

fn conv_backward(
    input: &Tensor,
    weight: &Tensor,
    col: &[f64],
    grad: &Tensor,
    k: usize,
    s: usize,
    p: usize,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let oc = weight.shape()[0];
    let (oh, ow) = (grad.shape()[2], grad.shape()[3]);
    let ohw = oh * ow;
    let kin = k * k * c;
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[oc]);
    let mut dx = Tensor::zeros(input.shape());
    let mut dcol = vec![0.0; kin * ohw];
    for i in 0..n {
        let g = &grad.data()[i * oc * ohw..(i + 1) * oc * ohw];
        let block = &col[i * kin * ohw..(i + 1) * kin * ohw];
        // dW += g . col^T
        matmul_bt(oc, ohw, kin, g, block, dw.data_mut(), true);
        for o in 0..oc {
            db.data_mut()[o] += g[o * ohw..(o + 1) * ohw].iter().sum::<f64>();
        }
        // dcol = W^T . g
        matmul_at(kin, oc, ohw, weight.data(), g, &mut dcol, false);
        col2im_sample(
            &dcol,
            c,
            h,
            w,
            k,
            s,
            p,
            oh,
            ow,
            &mut dx.data_mut()[i * c * h * w..(i + 1) * c * h * w],
        );
    }
    (dw, db, dx)
}

fn pool_out_extent(n: usize, k: usize, s: usize) -> usize {
    (n - k).div_ceil(s) + 1
}

fn max_pool_forward(input: &Tensor, k: usize, s: usize) -> (Tensor, LayerExtra) {
    let (n, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let oh = pool_out_extent(h, k, s);
    let ow = pool_out_extent(w, k, s);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let data = input.data();
    let mut oi = 0;
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for oy in 0..oh {
                let y0 = oy * s;
                let y1 = (y0 + k).min(h);
                for ox in 0..ow {
                    let x0 = ox * s;
                    let x1 = (x0 + k).min(w);
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = base + y0 * w + x0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let idx = base + y * w + x;
                            // strict comparison: ties go to the first element
                            if data[idx] > best {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.data_mut()[oi] = best;
                    argmax[oi] = best_idx;
                    oi += 1;
                }
            }
        }
    }
    (out, LayerExtra::MaxPool { argmax })
}

fn max_pool_backward(input: &Tensor, grad: &Tensor, argmax: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(input.shape());
    for (g, &idx) in grad.data().iter().zip(argmax) {
        dx.data_mut()[idx] += g;
    }
    dx
}

fn avg_pool_forward(input: &Tensor, k: usize, s: usize) -> (Tensor, LayerExtra) {
    let (n, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let oh = pool_out_extent(h, k, s);
    let ow = pool_out_extent(w, k, s);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let data = input.data();
    let mut oi = 0;
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for oy in 0..oh {
                let y0 = oy * s;
                let y1 = (y0 + k).min(h);
                for ox in 0..ow {
                    let x0 = ox * s;
                    let x1 = (x0 + k).min(w);
                    let mut sum = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            sum += data[base + y * w + x];
                        }
                    }
                    // clipped windows average over the elements they cover
                    out.data_mut()[oi] = sum / ((y1 - y0) * (x1 - x0)) as f64;
                    oi += 1;
                }
            }
        }
    }
    (out, LayerExtra::AvgPool)
}

fn avg_pool_backward(input: &Tensor, grad: &Tensor, k: usize, s: usize) -> Tensor {
    let (n, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (oh, ow) = (grad.shape()[2], grad.shape()[3]);
    let mut dx = Tensor::zeros(input.shape());
    let mut oi = 0;
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for oy in 0..oh {
                let y0 = oy * s;
                let y1 = (y0 + k).min(h);
                for ox in 0..ow {
                    let x0 = ox * s;
                    let x1 = (x0 + k).min(w);
                    let share = grad.data()[oi] / ((y1 - y0) * (x1 - x0)) as f64;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            dx.data_mut()[base + y * w + x] += share;
                        }
                    }
                    oi += 1;
                }
            }
        }
    }
    dx
}

fn fc_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, relu: bool) -> (Tensor, LayerExtra) {
    let n = input.shape()[0];
    let in_units: usize = input.shape()[1..].iter().product();
    let out_units = weight.shape()[0];
    let mut out = Tensor::zeros(&[n, out_units]);
    // out = x . W^T
    matmul_bt(
        n,
        in_units,
        out_units,
        input.data(),
        weight.data(),
        out.data_mut(),
        false,
    );
    for row in 0..n {
        let dst = &mut out.data_mut()[row * out_units..(row + 1) * out_units];
        for (v, b) in dst.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    let extra = if relu {
        let preact = out.clone();
        apply_relu(&mut out);
        LayerExtra::Fc {
            preact: Some(preact),
        }
    } else {
        LayerExtra::Fc { preact: None }
    };
    (out, extra)
}

fn fc_backward(input: &Tensor, weight: &Tensor, grad: &Tensor) -> (Tensor, Tensor, Tensor) {
    let n = input.shape()[0];
    let in_units: usize = input.shape()[1..].iter().product();
    let out_units = weight.shape()[0];
    let mut dw = Tensor::zeros(weight.shape());
    // dW = g^T . x
    matmul_at(
        out_units,
        n,
        in_units,
        grad.data(),
        input.data(),
        dw.data_mut(),
        false,
    );
    let mut db = Tensor::zeros(&[out_units]);
    for row in 0..n {
        for (d, &g) in db
            .data_mut()
            .iter_mut()
            .zip(&grad.data()[row * out_units..(row + 1) * out_units])
        {
            *d += g;
        }
    }
    let mut dx = Tensor::zeros(input.shape());
    // dx = g . W
    matmul(
        n,
        out_units,
        in_units,
        grad.data(),
        weight.data(),
        dx.data_mut(),
        false,
    );
    (dw, db, dx)
}

fn dropout_forward(input: &Tensor, rate: f64, rng: &mut ChaCha8Rng) -> (Tensor, LayerExtra) {
    let keep_scale = 1.0 / (1.0 - rate);
    let mut out = input.clone();
    let mask: Vec<f64> = out
        .data_mut()
        .iter_mut()
        .map(|v| {
            let m = if rng.gen::<f64>() < rate { 0.0 } else { keep_scale };
            *v *= m;
            m
        })
        .collect();
    (out, LayerExtra::Dropout { mask })
}

/// Numerically stable softmax cross-entropy over a batch of logits.
///
/// Returns the mean loss and its gradient with respect to the logits,
/// `(softmax - onehot) / n`.
pub fn softmax_cross_entropy(
    logits: &Tensor,
    labels: &[u8],
) -> Result<(f64, Tensor), EngineError> {
    if logits.shape().len() != 2 || logits.shape()[0] != labels.len() {
        return Err(EngineError::ShapeMismatch(format!(
            "logits shape {:?} does not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let n = labels.len();
    let classes = logits.shape()[1];
    let mut grad = Tensor::zeros(&[n, classes]);
    let mut total = 0.0;
    for (i, &raw_label) in labels.iter().enumerate() {
        let label = raw_label as usize;
        if label >= classes {
            return Err(EngineError::LabelOutOfRange { label, classes });
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &z in row {
            denom += (z - max).exp();
        }
        total += denom.ln() - (row[label] - max);
        let g = &mut grad.data_mut()[i * classes..(i + 1) * classes];
        for (j, &z) in row.iter().enumerate() {
            let p = (z - max).exp() / denom;
            g[j] = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::parse_arch;
    use crate::rng::{stream_rng, Stream};

    fn tiny_net(text: &str, input: (usize, usize, usize)) -> (Network, NetworkParams) {
        let net = Network::new(parse_arch(text).unwrap(), input).unwrap();
        let mut rng = stream_rng(7, Stream::Init);
        let params = net.init_params(&mut rng);
        (net, params)
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let (net, params) = tiny_net("C3(S1P1)@4-MP2(S2)-FC10", (8, 8, 2));
        let zeros = params.zeros_like();
        let batch = Tensor::from_vec(
            &[2, 2, 8, 8],
            (0..256).map(|i| (i as f64).sin()).collect(),
        )
        .unwrap();
        let logits = net.eval_logits(&zeros, &batch).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_fc_selects_inputs() {
        let net = Network::new(parse_arch("FC10").unwrap(), (1, 1, 16)).unwrap();
        let mut params = net.init_params(&mut stream_rng(0, Stream::Init));
        if let LayerParams::Fc { weight, bias } = &mut params.layers[0] {
            weight.data_mut().fill(0.0);
            bias.data_mut().fill(0.0);
            // row j reads input element 15 - j
            for j in 0..10 {
                weight.data_mut()[j * 16 + (15 - j)] = 1.0;
            }
        }
        let input: Vec<f64> = (0..16).map(|i| i as f64 * 0.25).collect();
        let batch = Tensor::from_vec(&[1, 16, 1, 1], input.clone()).unwrap();
        let logits = net.eval_logits(&params, &batch).unwrap();
        for j in 0..10 {
            assert_eq!(logits.data()[j], input[15 - j]);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let (net, params) = tiny_net("C3(S1P1)@4-D0.5-FC10", (6, 6, 1));
        let batch = Tensor::from_vec(&[3, 1, 6, 6], (0..108).map(|i| i as f64 * 0.01).collect())
            .unwrap();
        let mut r1 = stream_rng(99, Stream::Dropout);
        let mut r2 = stream_rng(99, Stream::Dropout);
        let (a, _) = net
            .forward(&params, &batch, Mode::Train, Some(&mut r1))
            .unwrap();
        let (b, _) = net
            .forward(&params, &batch, Mode::Train, Some(&mut r2))
            .unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_rate_dropout_equals_eval() {
        let (net, params) = tiny_net("FC8-D0-FC4", (1, 1, 6));
        let batch = Tensor::from_vec(&[2, 6, 1, 1], (0..12).map(|i| i as f64 - 4.0).collect())
            .unwrap();
        let mut rng = stream_rng(3, Stream::Dropout);
        let (train, _) = net
            .forward(&params, &batch, Mode::Train, Some(&mut rng))
            .unwrap();
        let eval = net.eval_logits(&params, &batch).unwrap();
        assert_eq!(train.data(), eval.data());
    }

    #[test]
    fn final_layer_is_linear_in_its_weights() {
        let (net, mut params) = tiny_net("FC6-FC4", (1, 1, 5));
        // zero the final bias so scaling the weights scales the logits
        if let LayerParams::Fc { bias, .. } = &mut params.layers[1] {
            bias.data_mut().fill(0.0);
        }
        let batch =
            Tensor::from_vec(&[1, 5, 1, 1], vec![0.3, -0.2, 0.9, 0.1, -0.5]).unwrap();
        let base = net.eval_logits(&params, &batch).unwrap();
        if let LayerParams::Fc { weight, .. } = &mut params.layers[1] {
            for v in weight.data_mut() {
                *v *= 3.0;
            }
        }
        let scaled = net.eval_logits(&params, &batch).unwrap();
        for (s, b) in scaled.data().iter().zip(base.data()) {
            assert!((s - 3.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_eval_cache() {
        let (net, params) = tiny_net("FC4", (1, 1, 3));
        let batch = Tensor::from_vec(&[1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let (logits, cache) = net.forward(&params, &batch, Mode::Eval, None).unwrap();
        let grad = Tensor::zeros(logits.shape());
        assert!(matches!(
            net.backward(&params, &cache, &grad),
            Err(EngineError::EvalCache)
        ));
    }

    #[test]
    fn zero_loss_gradient_gives_zero_param_gradients() {
        let (net, params) = tiny_net("C3(S1P0)@2-MP2(S2)-FC4", (6, 6, 1));
        let batch =
            Tensor::from_vec(&[2, 1, 6, 6], (0..72).map(|i| (i as f64).cos()).collect()).unwrap();
        let (logits, cache) = net.forward(&params, &batch, Mode::Train, None).unwrap();
        let grads = net
            .backward(&params, &cache, &Tensor::zeros(logits.shape()))
            .unwrap();
        for t in grads.tensors() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn softmax_uniform_logits_is_ln_n() {
        let logits = Tensor::zeros(&[2, 4]);
        let (loss, _) = softmax_cross_entropy(&logits, &[1, 3]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_confident_correct_logit_drives_loss_to_zero() {
        let logits = Tensor::from_vec(&[1, 3], vec![100.0, 0.0, 0.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!((0.0..1e-40).contains(&loss));
    }

    #[test]
    fn softmax_rejects_out_of_range_label() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(EngineError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn batch_shape_is_validated() {
        let (net, params) = tiny_net("FC4", (1, 1, 3));
        let batch = Tensor::zeros(&[1, 3, 2, 1]);
        assert!(matches!(
            net.forward(&params, &batch, Mode::Eval, None),
            Err(EngineError::ShapeMismatch(_))
        ));
    }
}
