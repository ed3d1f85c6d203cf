//! Layer kinds with hand-written forward and backward rules.
//!
//! All activations carry a leading batch dimension. Dense layers take
//! `N×in`, image layers take `N×C×H×W`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Gradient, PatchGeometry, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
}

fn one() -> usize {
    1
}

impl ConvGeometry {
    pub fn patches(&self, input: &[usize]) -> Result<PatchGeometry> {
        match *input {
            [c, h, w] if c == self.in_channels => {
                PatchGeometry::new((c, h, w), (self.kernel_h, self.kernel_w), self.stride, self.padding)
            }
            _ => Err(Error::dim(
                "conv input (per sample)",
                input,
                &[self.in_channels, 0, 0],
            )),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }
}

/// What a layer computes, without its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Dense { inputs: usize, outputs: usize },
    Conv2d(ConvGeometry),
    Relu,
    MaxPool2d { size: usize, stride: usize },
    Flatten,
    /// Fused softmax + cross-entropy head; its forward output is the logits.
    SoftmaxCrossEntropy { classes: usize },
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d(_))
    }

    /// Output units (dense rows or conv filters) of a parametric layer.
    pub fn units(&self) -> Option<usize> {
        match *self {
            LayerKind::Dense { outputs, .. } => Some(outputs),
            LayerKind::Conv2d(g) => Some(g.out_channels),
            _ => None,
        }
    }

    /// Weights feeding one output unit (bias excluded).
    pub fn fan_in(&self) -> Option<usize> {
        match *self {
            LayerKind::Dense { inputs, .. } => Some(inputs),
            LayerKind::Conv2d(g) => Some(g.fan_in()),
            _ => None,
        }
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerKind::Dense { inputs, outputs } => Some(vec![outputs, inputs]),
            LayerKind::Conv2d(g) => Some(vec![g.out_channels, g.in_channels, g.kernel_h, g.kernel_w]),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d(_) => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::Flatten => "flatten",
            LayerKind::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerKind::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(Error::dim("dense input (per sample)", input, &[inputs]));
                }
                Ok(vec![outputs])
            }
            LayerKind::Conv2d(g) => {
                let p = g.patches(input)?;
                Ok(vec![g.out_channels, p.out_h, p.out_w])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::MaxPool2d { size, stride } => {
                let p = pool_geometry(input, size, stride)?;
                Ok(vec![p.channels, p.out_h, p.out_w])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::SoftmaxCrossEntropy { classes } => {
                if input != [classes] {
                    return Err(Error::dim("classifier head input", input, &[classes]));
                }
                Ok(vec![classes])
            }
        }
    }
}

fn pool_geometry(input: &[usize], size: usize, stride: usize) -> Result<PatchGeometry> {
    match *input {
        [c, h, w] => PatchGeometry::new((1, h, w), (size, size), stride, 0).map(|mut p| {
            p.channels = c;
            p
        }),
        _ => Err(Error::dim("maxpool input (per sample)", input, &[0, 0, 0])),
    }
}

/// Weight and bias of a parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Gradients for a layer's [`Params`].
pub type ParamGrads = Params;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    kind: LayerKind,
    params: Option<Params>,
}

impl Layer {
    /// Parametric layers start with all-zero weights and biases.
    pub fn new(kind: LayerKind) -> Self {
        let params = kind.weight_shape().map(|ws| Params {
            bias: Tensor::zeros(&[ws[0]]),
            weight: Tensor::zeros(&ws),
        });
        Layer { kind, params }
    }

    pub fn with_params(kind: LayerKind, weight: Tensor, bias: Tensor) -> Result<Self> {
        let ws = kind
            .weight_shape()
            .ok_or_else(|| Error::Input(format!("{} has no parameters", kind.name())))?;
        if weight.shape() != ws.as_slice() {
            return Err(Error::dim("weight shape", weight.shape(), &ws));
        }
        if bias.shape() != [ws[0]] {
            return Err(Error::dim("bias shape", bias.shape(), &[ws[0]]));
        }
        Ok(Layer {
            kind,
            params: Some(Params { weight, bias }),
        })
    }

    pub fn dense(inputs: usize, outputs: usize) -> Self {
        Layer::new(LayerKind::Dense { inputs, outputs })
    }

    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Layer::new(LayerKind::Conv2d(ConvGeometry {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
        }))
    }

    /// He-normal weights, zero biases.
    pub fn init_he(&mut self, rng: &mut impl Rng) {
        if let (Some(p), Some(fan_in)) = (self.params.as_mut(), self.kind.fan_in()) {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for w in p.weight.data_mut() {
                *w = normal.sample(rng);
            }
            p.bias.data_mut().fill(0.0);
        }
    }

    pub fn kind(&self) -> &LayerKind {
        &self.kind
    }

    pub fn params(&self) -> Option<&Params> {
        self.params.as_ref()
    }

    pub fn params_mut(&mut self) -> Option<&mut Params> {
        self.params.as_mut()
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.forward_masked(input, None)
    }

    /// Forward pass; units with `mask[u] == false` are skipped and output zero.
    pub fn forward_masked(&self, input: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
        let sample_shape = &input.shape()[1..];
        let out_shape = self.kind.output_shape(sample_shape)?;
        let n = input.rows();
        let mut full = vec![n];
        full.extend_from_slice(&out_shape);
        match self.kind {
            LayerKind::Dense { inputs, outputs } => {
                let p = self.params.as_ref().expect("dense params");
                let (w, b) = (p.weight.data(), p.bias.data());
                let mut out = vec![0.0; n * outputs];
                for (x, y) in input.data().chunks_exact(inputs).zip(out.chunks_exact_mut(outputs)) {
                    for (j, yj) in y.iter_mut().enumerate() {
                        if mask.is_some_and(|m| !m[j]) {
                            continue;
                        }
                        let row = &w[j * inputs..(j + 1) * inputs];
                        *yj = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[j];
                    }
                }
                Tensor::new(full, out)
            }
            LayerKind::Conv2d(g) => {
                let p = self.params.as_ref().expect("conv params");
                let geom = g.patches(sample_shape)?;
                let (e, pos) = (geom.patch_len(), geom.positions());
                let mut cols = vec![0.0; e * pos];
                let mut out = vec![0.0; n * g.out_channels * pos];
                let (w, b) = (p.weight.data(), p.bias.data());
                for (x, y) in input
                    .data()
                    .chunks_exact(geom.input_len())
                    .zip(out.chunks_exact_mut(g.out_channels * pos))
                {
                    geom.im2col_into(x, &mut cols);
                    for f in 0..g.out_channels {
                        if mask.is_some_and(|m| !m[f]) {
                            continue;
                        }
                        let yf = &mut y[f * pos..(f + 1) * pos];
                        yf.fill(b[f]);
                        gemm_nn(1, e, pos, &w[f * e..(f + 1) * e], &cols, yf);
                    }
                }
                Tensor::new(full, out)
            }
            LayerKind::Relu => Ok(input.map(|v| v.max(0.0))),
            LayerKind::MaxPool2d { size, stride } => {
                let geom = pool_geometry(sample_shape, size, stride)?;
                let argmax = pool_argmax(input, &geom);
                let data = argmax.iter().map(|&i| input.data()[i]).collect();
                Tensor::new(full, data)
            }
            LayerKind::Flatten | LayerKind::SoftmaxCrossEntropy { .. } => input.clone().reshape(&full),
        }
    }
}

/// For each pooled output element, the flat index (into the whole batch
/// tensor) of the window maximum. Ties resolve to the lowest index.
pub(crate) fn pool_argmax(input: &Tensor, geom: &PatchGeometry) -> Vec<usize> {
    let n = input.rows();
    let plane = geom.height * geom.width;
    let mut out = Vec::with_capacity(n * geom.channels * geom.positions());
    let data = input.data();
    for plane_idx in 0..n * geom.channels {
        let base = plane_idx * plane;
        for oy in 0..geom.out_h {
            for ox in 0..geom.out_w {
                let mut best = base + oy * geom.stride * geom.width + ox * geom.stride;
                for ky in 0..geom.kernel_h {
                    for kx in 0..geom.kernel_w {
                        let idx = base + (oy * geom.stride + ky) * geom.width + ox * geom.stride + kx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

/// Reverse-mode rule for one layer: given the forward input and `∂L/∂output`,
/// returns `∂L/∂input` and, for parametric layers, `∂L/∂params`.
pub fn backprop_layer(layer: &Layer, input: &Tensor, upstream: &Gradient) -> Result<(Gradient, Option<ParamGrads>)> {
    backprop(layer, input, upstream, true)
}

/// Same as [`backprop_layer`]; with `want_input_grad == false` the input
/// gradient of parametric layers is skipped and returned as zeros.
pub(crate) fn backprop(
    layer: &Layer,
    input: &Tensor,
    upstream: &Gradient,
    want_input_grad: bool,
) -> Result<(Gradient, Option<ParamGrads>)> {
    let sample_shape = &input.shape()[1..];
    let mut expected = vec![input.rows()];
    expected.extend(layer.kind.output_shape(sample_shape)?);
    if upstream.shape() != expected.as_slice() {
        return Err(Error::dim("upstream gradient vs layer output", upstream.shape(), &expected));
    }
    let n = input.rows();
    match layer.kind {
        LayerKind::Dense { inputs, outputs } => {
            let p = layer.params.as_ref().expect("dense params");
            let mut dx = vec![0.0; n * inputs];
            if want_input_grad {
                gemm_nn(n, outputs, inputs, upstream.data(), p.weight.data(), &mut dx);
            }
            let mut dw = vec![0.0; outputs * inputs];
            gemm_tn(outputs, n, inputs, upstream.data(), input.data(), &mut dw);
            let mut db = vec![0.0; outputs];
            for g in upstream.data().chunks_exact(outputs) {
                for (d, v) in db.iter_mut().zip(g) {
                    *d += v;
                }
            }
            Ok((
                Tensor::new(input.shape().to_vec(), dx)?,
                Some(Params {
                    weight: Tensor::new(vec![outputs, inputs], dw)?,
                    bias: Tensor::new(vec![outputs], db)?,
                }),
            ))
        }
        LayerKind::Conv2d(g) => {
            let p = layer.params.as_ref().expect("conv params");
            let geom = g.patches(sample_shape)?;
            let (e, pos, f) = (geom.patch_len(), geom.positions(), g.out_channels);
            let mut cols = vec![0.0; e * pos];
            let mut dcols = vec![0.0; e * pos];
            let mut dx = vec![0.0; input.len()];
            let mut dw = vec![0.0; f * e];
            let mut db = vec![0.0; f];
            for ((x, gy), dxi) in input
                .data()
                .chunks_exact(geom.input_len())
                .zip(upstream.data().chunks_exact(f * pos))
                .zip(dx.chunks_exact_mut(geom.input_len()))
            {
                geom.im2col_into(x, &mut cols);
                // dW += gy · colsᵀ
                gemm_nt(f, pos, e, gy, &cols, &mut dw);
                if want_input_grad {
                    // dcols = Wᵀ · gy
                    dcols.fill(0.0);
                    gemm_tn(e, f, pos, p.weight.data(), gy, &mut dcols);
                    geom.col2im_add(&dcols, dxi);
                }
                for (d, row) in db.iter_mut().zip(gy.chunks_exact(pos)) {
                    *d += row.iter().sum::<f64>();
                }
            }
            Ok((
                Tensor::new(input.shape().to_vec(), dx)?,
                Some(Params {
                    weight: Tensor::new(p.weight.shape().to_vec(), dw)?,
                    bias: Tensor::new(vec![f], db)?,
                }),
            ))
        }
        LayerKind::Relu => {
            let data = input
                .data()
                .iter()
                .zip(upstream.data())
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect();
            Ok((Tensor::new(input.shape().to_vec(), data)?, None))
        }
        LayerKind::MaxPool2d { size, stride } => {
            let geom = pool_geometry(sample_shape, size, stride)?;
            let mut dx = vec![0.0; input.len()];
            for (&src, &g) in pool_argmax(input, &geom).iter().zip(upstream.data()) {
                dx[src] += g;
            }
            Ok((Tensor::new(input.shape().to_vec(), dx)?, None))
        }
        LayerKind::Flatten | LayerKind::SoftmaxCrossEntropy { .. } => {
            Ok((upstream.clone().reshape(input.shape())?, None))
        }
    }
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the
/// logits. Uses max-subtracted log-sum-exp.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Gradient)> {
    let (n, classes) = logits.dims2("logits")?;
    if labels.len() != n {
        return Err(Error::dim("labels vs logits batch", &[labels.len()], &[n]));
    }
    let mut grad = vec![0.0; n * classes];
    let mut loss = 0.0;
    for ((row, g), &label) in logits.data().chunks_exact(classes).zip(grad.chunks_exact_mut(classes)).zip(labels) {
        if label >= classes {
            return Err(Error::Input(format!("label {label} out of range for {classes} classes")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        loss += log_z - row[label];
        for (gj, &z) in g.iter_mut().zip(row) {
            *gj = (z - log_z).exp() / n as f64;
        }
        g[label] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, Tensor::new(vec![n, classes], grad)?))
}
