//! Networks as ordered layer lists with structured channel masks.
//!
//! Pruning is realized as masking: a pruned unit's outgoing weights and bias
//! are zeroed, the next parametric layer's incoming weights for that channel
//! are zeroed, and all of them stay frozen for the rest of training. Tensors
//! are never physically shrunk.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layer::{backprop, ConvGeometry, Layer, LayerKind, ParamGrads};
use crate::tensor::{Gradient, Tensor};

/// Activations recorded by [`Network::forward`]: `activations[i]` is the input
/// of layer `i`, and the last entry is the network output.
#[derive(Debug, Clone)]
pub struct Trace {
    pub activations: Vec<Tensor>,
}

impl Trace {
    pub fn logits(&self) -> &Tensor {
        self.activations.last().expect("trace holds at least the input")
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].rows()
    }
}

/// Which prunable layer's units index the channels of an activation, and how
/// many consecutive elements (per sample) belong to each channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelMap {
    pub layer: usize,
    pub channels: usize,
    pub group: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    masks: Vec<Option<Vec<bool>>>,
    cut_index: usize,
    /// Per-sample activation shape at each layer boundary.
    shapes: Vec<Vec<usize>>,
}

impl Network {
    /// Builds a network with every unit active. `input_shape` is the
    /// per-sample input shape; `cut_index` must lie in `[1, len − 1]`.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, cut_index: usize) -> Result<Self> {
        let last_param = layers.iter().rposition(|l| l.kind().has_params());
        let masks = layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let prunable = l.kind().has_params() && Some(i) != last_param;
                prunable.then(|| vec![true; l.kind().units().unwrap_or(0)])
            })
            .collect();
        Network::from_parts(input_shape, layers, masks, cut_index)
    }

    pub(crate) fn from_parts(
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
        masks: Vec<Option<Vec<bool>>>,
        cut_index: usize,
    ) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::Input("a network needs at least two layers".into()));
        }
        if !(1..layers.len()).contains(&cut_index) {
            return Err(Error::Input(format!(
                "cut index {cut_index} outside [1, {}]",
                layers.len() - 1
            )));
        }
        if masks.len() != layers.len() {
            return Err(Error::Consistency("one mask slot per layer required".into()));
        }
        let mut shapes = vec![input_shape.clone()];
        for (i, layer) in layers.iter().enumerate() {
            let next = layer
                .kind()
                .output_shape(shapes.last().expect("non-empty"))
                .map_err(|e| Error::Input(format!("layer {i} ({}) does not compose: {e}", layer.kind().name())))?;
            shapes.push(next);
            if let Some(mask) = &masks[i] {
                if Some(mask.len()) != layer.kind().units() {
                    return Err(Error::Consistency(format!("layer {i}: mask length mismatch")));
                }
                if !mask.iter().any(|&m| m) {
                    return Err(Error::Constraint(format!("layer {i} has no active unit")));
                }
            }
        }
        Ok(Network {
            input_shape,
            layers,
            masks,
            cut_index,
            shapes,
        })
    }

    /// Builds a network from layer kinds with He-initialized weights.
    pub fn from_kinds(input_shape: Vec<usize>, kinds: &[LayerKind], cut_index: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = kinds
            .iter()
            .map(|&k| {
                let mut l = Layer::new(k);
                l.init_he(&mut rng);
                l
            })
            .collect();
        Network::new(input_shape, layers, cut_index)
    }

    /// Small VGG-style CNN for `side×side` single-channel inputs (side
    /// divisible by 8): three conv/ReLU/pool blocks with 16, 32 and 64
    /// filters, then dense layers of 256 units and `classes` logits.
    pub fn desk_cnn_kinds(side: usize, classes: usize) -> Vec<LayerKind> {
        let conv = |i, o| {
            LayerKind::Conv2d(ConvGeometry {
                in_channels: i,
                out_channels: o,
                kernel_h: 3,
                kernel_w: 3,
                stride: 1,
                padding: 1,
            })
        };
        let pool = LayerKind::MaxPool2d { size: 2, stride: 2 };
        let flat = 64 * (side / 8) * (side / 8);
        vec![
            conv(1, 16),
            LayerKind::Relu,
            pool,
            conv(16, 32),
            LayerKind::Relu,
            pool,
            conv(32, 64),
            LayerKind::Relu,
            pool,
            LayerKind::Flatten,
            LayerKind::Dense {
                inputs: flat,
                outputs: 256,
            },
            LayerKind::Relu,
            LayerKind::Dense {
                inputs: 256,
                outputs: classes,
            },
            LayerKind::SoftmaxCrossEntropy { classes },
        ]
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &Layer {
        &self.layers[i]
    }

    pub(crate) fn layer_mut(&mut self, i: usize) -> &mut Layer {
        &mut self.layers[i]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Per-sample activation shape entering layer `boundary` (the output shape
    /// when `boundary == len()`).
    pub fn boundary_shape(&self, boundary: usize) -> &[usize] {
        &self.shapes[boundary]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("non-empty")
    }

    pub fn cut_index(&self) -> usize {
        self.cut_index
    }

    pub fn set_cut_index(&mut self, cut_index: usize) -> Result<()> {
        if !(1..self.layers.len()).contains(&cut_index) {
            return Err(Error::Input(format!(
                "cut index {cut_index} outside [1, {}]",
                self.layers.len() - 1
            )));
        }
        self.cut_index = cut_index;
        Ok(())
    }

    pub fn is_prunable(&self, layer: usize) -> bool {
        self.masks.get(layer).is_some_and(Option::is_some)
    }

    pub fn prunable_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.is_prunable(i)).collect()
    }

    pub fn mask(&self, layer: usize) -> Option<&[bool]> {
        self.masks.get(layer).and_then(|m| m.as_deref())
    }

    pub fn active_units(&self, layer: usize) -> usize {
        match self.mask(layer) {
            Some(m) => m.iter().filter(|&&a| a).count(),
            None => self.layers[layer].kind().units().unwrap_or(0),
        }
    }

    /// Weights plus bias of one output unit.
    pub fn params_per_unit(&self, layer: usize) -> usize {
        self.layers[layer].kind().fan_in().map_or(0, |f| f + 1)
    }

    /// Prunable parameters with every unit active.
    pub fn total_prunable_params(&self) -> usize {
        self.prunable_layers()
            .into_iter()
            .map(|l| self.layers[l].kind().units().unwrap_or(0) * self.params_per_unit(l))
            .sum()
    }

    /// `Σ` over prunable layers of active units × parameters per unit.
    pub fn active_param_count(&self) -> usize {
        self.prunable_layers()
            .into_iter()
            .map(|l| self.active_units(l) * self.params_per_unit(l))
            .sum()
    }

    /// Maps the channels of the activation entering layer `boundary` to the
    /// prunable layer that produced them, looking back through ReLU, pooling
    /// and flattening. `None` if the channels are not prunable.
    pub fn channel_source(&self, boundary: usize) -> Option<ChannelMap> {
        let mut i = boundary;
        while i > 0 {
            i -= 1;
            let kind = self.layers[i].kind();
            if kind.has_params() {
                if !self.is_prunable(i) {
                    return None;
                }
                let channels = kind.units().expect("parametric");
                let elements: usize = self.shapes[boundary].iter().product();
                return Some(ChannelMap {
                    layer: i,
                    channels,
                    group: elements / channels,
                });
            }
        }
        None
    }

    /// Per-sample count of activation elements at `boundary` whose channel is
    /// still active.
    pub fn active_elements(&self, boundary: usize) -> usize {
        let total: usize = self.shapes[boundary].iter().product();
        match self.channel_source(boundary) {
            Some(map) => self.active_units(map.layer) * map.group,
            None => total,
        }
    }

    /// For each weight of `layer`, whether it is frozen: its own unit is
    /// pruned, or it reads a pruned channel of the upstream prunable layer.
    pub fn frozen_weights(&self, layer: usize) -> Option<Vec<bool>> {
        let kind = *self.layers[layer].kind();
        let units = kind.units()?;
        let fan_in = kind.fan_in()?;
        let mut frozen = vec![false; units * fan_in];
        if let Some(mask) = self.mask(layer) {
            for (u, _) in mask.iter().enumerate().filter(|(_, &a)| !a) {
                frozen[u * fan_in..(u + 1) * fan_in].fill(true);
            }
        }
        if let Some(src) = self.channel_source(layer) {
            let src_mask = self.mask(src.layer).expect("prunable source");
            for column in 0..fan_in {
                let channel = match kind {
                    LayerKind::Dense { .. } => column / src.group,
                    LayerKind::Conv2d(g) => column / (g.kernel_h * g.kernel_w),
                    _ => unreachable!("parametric"),
                };
                if !src_mask[channel] {
                    for u in 0..units {
                        frozen[u * fan_in + column] = true;
                    }
                }
            }
        }
        Some(frozen)
    }

    /// Prunes one output unit of a prunable layer.
    pub fn apply_mask(&mut self, layer: usize, unit: usize) -> Result<()> {
        let mask = self
            .masks
            .get_mut(layer)
            .and_then(Option::as_mut)
            .ok_or_else(|| Error::Constraint(format!("layer {layer} is not prunable")))?;
        if unit >= mask.len() {
            return Err(Error::Input(format!("unit {unit} out of range for layer {layer}")));
        }
        if !mask[unit] {
            return Err(Error::Constraint(format!("unit {unit} of layer {layer} is already pruned")));
        }
        if mask.iter().filter(|&&a| a).count() < 2 {
            return Err(Error::Constraint(format!(
                "cannot prune the last active unit of layer {layer}"
            )));
        }
        mask[unit] = false;

        let fan_in = self.layers[layer].kind().fan_in().expect("parametric");
        let p = self.layers[layer].params_mut().expect("parametric");
        p.weight.data_mut()[unit * fan_in..(unit + 1) * fan_in].fill(0.0);
        p.bias.data_mut()[unit] = 0.0;

        // The next parametric layer reading this layer's channels.
        if let Some(next) = (layer + 1..self.layers.len()).find(|&j| self.layers[j].kind().has_params()) {
            if let Some(frozen) = self.frozen_weights(next) {
                let p = self.layers[next].params_mut().expect("parametric");
                for (w, f) in p.weight.data_mut().iter_mut().zip(frozen) {
                    if f {
                        *w = 0.0;
                    }
                }
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.rank() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..] {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::dim("network input batch", batch.shape(), &expected));
        }
        Ok(())
    }

    /// Runs the batch through every layer, keeping all activations.
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, Trace)> {
        self.check_batch(batch)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(batch.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.forward_masked(&activations[i], self.mask(i))?;
            activations.push(out);
        }
        let logits = activations.last().expect("non-empty").clone();
        Ok((logits, Trace { activations }))
    }

    /// Forward pass without retaining the trace.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward_masked(&x, self.mask(i))?;
        }
        Ok(x)
    }

    /// Parameter gradients for a loss gradient at the network output. Masked
    /// units and frozen weights receive exactly zero gradient.
    pub fn backward(&self, trace: &Trace, output_grad: &Gradient) -> Result<Vec<Option<ParamGrads>>> {
        if trace.activations.len() != self.layers.len() + 1 {
            return Err(Error::Consistency("trace does not belong to this network".into()));
        }
        let first_param = self.layers.iter().position(|l| l.kind().has_params()).unwrap_or(0);
        let mut grads = vec![None; self.layers.len()];
        let mut g = output_grad.clone();
        for i in (first_param..self.layers.len()).rev() {
            if let Some(mask) = self.mask(i) {
                zero_masked_channels(&mut g, mask);
            }
            let (dx, pg) = backprop(&self.layers[i], &trace.activations[i], &g, i > first_param)?;
            if let Some(mut pg) = pg {
                if let Some(frozen) = self.frozen_weights(i) {
                    for (w, f) in pg.weight.data_mut().iter_mut().zip(frozen) {
                        if f {
                            *w = 0.0;
                        }
                    }
                }
                if let Some(mask) = self.mask(i) {
                    for (b, &active) in pg.bias.data_mut().iter_mut().zip(mask) {
                        if !active {
                            *b = 0.0;
                        }
                    }
                }
                grads[i] = Some(pg);
            }
            g = dx;
        }
        Ok(grads)
    }
}

/// Zeroes, per sample, the elements of channels whose mask entry is false.
pub(crate) fn zero_masked_channels(t: &mut Tensor, mask: &[bool]) {
    let per_sample = t.row_len();
    let group = per_sample / mask.len();
    for sample in t.data_mut().chunks_exact_mut(per_sample) {
        for (c, &active) in mask.iter().enumerate() {
            if !active {
                sample[c * group..(c + 1) * group].fill(0.0);
            }
        }
    }
}
