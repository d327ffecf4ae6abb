//! Verification utilities: central finite differences and an independent
//! straight-loop network evaluator.
//!
//! The reference evaluator here deliberately avoids the im2col/GEMM path of
//! the engine — plain nested loops only — so agreement between the two is
//! evidence of correctness rather than shared structure.

use crate::arch::{ArchSpec, LayerSpec, Shape};
use crate::net::{LayerParams, NetworkParams};
use crate::tensor::Tensor;

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Relative error with an absolute floor: tiny pairs compare as equal.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Copies every parameter value into one flat vector, in checkpoint order.
pub fn flatten_params(params: &NetworkParams) -> Vec<f64> {
    params
        .tensors()
        .flat_map(|t| t.data().iter().copied())
        .collect()
}

/// Writes a flat vector produced by [`flatten_params`] back into `params`.
pub fn assign_params(params: &mut NetworkParams, values: &[f64]) {
    let mut off = 0;
    for t in params.tensors_mut() {
        let n = t.numel();
        t.data_mut().copy_from_slice(&values[off..off + n]);
        off += n;
    }
    assert_eq!(off, values.len(), "value vector length mismatch");
}

fn relu_positions(spec: &ArchSpec) -> Vec<bool> {
    let scoring = spec
        .layers
        .iter()
        .rposition(LayerSpec::is_scoring)
        .unwrap_or(0);
    spec.layers
        .iter()
        .enumerate()
        .map(|(i, l)| l.is_scoring() && i < scoring)
        .collect()
}

/// Straight-loop eval-mode forward pass. Dropout layers are the identity.
pub fn naive_eval_logits(
    spec: &ArchSpec,
    input: (usize, usize, usize),
    params: &NetworkParams,
    batch: &Tensor,
) -> Tensor {
    let trace = crate::arch::infer_shapes(spec, input).expect("shapes must be inferable");
    let relu = relu_positions(spec);
    let n = batch.shape()[0];
    let mut shape = Shape::Spatial(input.0, input.1, input.2);
    let mut act: Vec<Vec<f64>> = (0..n)
        .map(|i| batch.data()[i * shape.numel()..(i + 1) * shape.numel()].to_vec())
        .collect();
    for (li, layer) in spec.layers.iter().enumerate() {
        let out_shape = trace[li];
        for sample in act.iter_mut() {
            let mut out = vec![0.0; out_shape.numel()];
            match (layer, &params.layers[li]) {
                (
                    LayerSpec::Conv {
                        kernel,
                        stride,
                        padding,
                        out_channels,
                    },
                    LayerParams::Conv { weight, bias },
                ) => {
                    let (h, w, c) = match shape {
                        Shape::Spatial(h, w, c) => (h, w, c),
                        Shape::Flat(_) => panic!("conv on flat input"),
                    };
                    let (oh, ow) = match out_shape {
                        Shape::Spatial(oh, ow, _) => (oh, ow),
                        Shape::Flat(_) => unreachable!(),
                    };
                    for oc in 0..*out_channels {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = bias.data()[oc];
                                for ic in 0..c {
                                    for ky in 0..*kernel {
                                        for kx in 0..*kernel {
                                            let iy = (oy * stride + ky) as isize - *padding as isize;
                                            let ix = (ox * stride + kx) as isize - *padding as isize;
                                            if iy >= 0
                                                && iy < h as isize
                                                && ix >= 0
                                                && ix < w as isize
                                            {
                                                let xv = sample
                                                    [ic * h * w + iy as usize * w + ix as usize];
                                                let wv = weight.data()[((oc * c + ic) * kernel
                                                    + ky)
                                                    * kernel
                                                    + kx];
                                                acc += xv * wv;
                                            }
                                        }
                                    }
                                }
                                out[(oc * oh + oy) * ow + ox] = acc;
                            }
                        }
                    }
                }
                (LayerSpec::MaxPool { kernel, stride }, _)
                | (LayerSpec::AvgPool { kernel, stride }, _) => {
                    let is_max = matches!(layer, LayerSpec::MaxPool { .. });
                    let (h, w, c) = match shape {
                        Shape::Spatial(h, w, c) => (h, w, c),
                        Shape::Flat(_) => panic!("pool on flat input"),
                    };
                    let (oh, ow) = match out_shape {
                        Shape::Spatial(oh, ow, _) => (oh, ow),
                        Shape::Flat(_) => unreachable!(),
                    };
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let y1 = (oy * stride + kernel).min(h);
                                let x1 = (ox * stride + kernel).min(w);
                                let mut best = f64::NEG_INFINITY;
                                let mut sum = 0.0;
                                let mut count = 0;
                                for y in oy * stride..y1 {
                                    for x in ox * stride..x1 {
                                        let v = sample[ch * h * w + y * w + x];
                                        best = best.max(v);
                                        sum += v;
                                        count += 1;
                                    }
                                }
                                out[(ch * oh + oy) * ow + ox] = if is_max {
                                    best
                                } else {
                                    sum / count as f64
                                };
                            }
                        }
                    }
                }
                (LayerSpec::FullyConnected { out_units }, LayerParams::Fc { weight, bias }) => {
                    let in_units = shape.numel();
                    for (o, slot) in out.iter_mut().enumerate().take(*out_units) {
                        let mut acc = bias.data()[o];
                        for (i, &xv) in sample.iter().enumerate().take(in_units) {
                            acc += weight.data()[o * in_units + i] * xv;
                        }
                        *slot = acc;
                    }
                }
                (LayerSpec::Dropout { .. }, _) => {
                    out.copy_from_slice(sample);
                }
                _ => panic!("parameter variant does not match layer"),
            }
            if relu[li] {
                for v in &mut out {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            *sample = out;
        }
        shape = out_shape;
    }
    let classes = shape.numel();
    let mut data = Vec::with_capacity(n * classes);
    for sample in &act {
        data.extend_from_slice(sample);
    }
    Tensor::from_vec(&[n, classes], data).expect("sized by construction")
}
