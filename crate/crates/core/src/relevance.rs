//! Inference-time relevance.
//!
//! Output relevance is seeded with the selected-class logit and propagated
//! back to the input with the LRP-ε rule:
//!
//! ```text
//! rel(a_k) = Σ_j a_k·w_kj / (z_j + ε·sign(z_j)) · rel(b_j),   z_j = Σ_k a_k·w_kj + bias_j
//! ```
//!
//! Convolutions use the same rule on their im2col (fully-connected) form.
//! Element relevances are then lifted to parameters: a weight linking input
//! element `k` to output element `j` gets `Σ_i [rel_i(a_k) + rel_i(b_j)]`
//! summed over scoring samples `i`; a shared conv weight additionally sums
//! over every output position it is applied at.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layer::{pool_argmax, LayerKind};
use crate::network::{Network, Trace};
use crate::tensor::{gemm_nn, gemm_tn, order_independent_sum, PatchGeometry, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Seed relevance: per sample, the selected-class logit at that class and zero
/// elsewhere. The class is the label when given, else the argmax (lowest
/// index on ties).
pub fn seed_output_relevance(logits: &Tensor, labels: Option<&[usize]>) -> Result<Tensor> {
    let (n, classes) = logits.dims2("logits")?;
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::dim("labels vs logits batch", &[l.len()], &[n]));
        }
    }
    let mut seed = vec![0.0; n * classes];
    for i in 0..n {
        let row = logits.row(i);
        let class = match labels {
            Some(l) => {
                if l[i] >= classes {
                    return Err(Error::Input(format!("label {} out of range for {classes} classes", l[i])));
                }
                l[i]
            }
            None => argmax(row),
        };
        seed[i * classes + class] = row[class];
    }
    Tensor::new(vec![n, classes], seed)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Element relevances at every layer boundary of one scoring batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceRecord {
    kinds: Vec<LayerKind>,
    /// Per-sample shapes at each boundary.
    shapes: Vec<Vec<usize>>,
    /// `boundaries[i]` is the relevance of the activation entering layer `i`.
    boundaries: Vec<Tensor>,
}

impl RelevanceRecord {
    /// Assembles a record from explicit boundary relevances (batch-leading).
    pub fn from_boundaries(net: &Network, boundaries: Vec<Tensor>) -> Result<Self> {
        if boundaries.len() != net.len() + 1 {
            return Err(Error::Consistency(format!(
                "expected {} boundaries, got {}",
                net.len() + 1,
                boundaries.len()
            )));
        }
        let batch = boundaries[0].rows();
        for (b, t) in boundaries.iter().enumerate() {
            if t.rows() != batch || t.shape()[1..] != *net.boundary_shape(b) {
                return Err(Error::Consistency(format!("boundary {b} relevance has shape {:?}", t.shape())));
            }
        }
        Ok(RelevanceRecord {
            kinds: net.layers().iter().map(|l| *l.kind()).collect(),
            shapes: (0..=net.len()).map(|b| net.boundary_shape(b).to_vec()).collect(),
            boundaries,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.boundaries[0].rows()
    }

    pub fn layer_count(&self) -> usize {
        self.kinds.len()
    }

    /// `rel(a)`: relevance of the elements entering `layer`.
    pub fn input_relevance(&self, layer: usize) -> Result<&Tensor> {
        self.boundaries
            .get(layer)
            .filter(|_| layer < self.kinds.len())
            .ok_or_else(|| Error::Consistency(format!("no relevance recorded for layer {layer}")))
    }

    /// `rel(b)`: relevance of the elements leaving `layer`.
    pub fn output_relevance(&self, layer: usize) -> Result<&Tensor> {
        self.boundaries
            .get(layer + 1)
            .ok_or_else(|| Error::Consistency(format!("no relevance recorded for layer {layer}")))
    }

    pub fn boundary(&self, b: usize) -> &Tensor {
        &self.boundaries[b]
    }

    /// Sum of the relevance at boundary `b` for each sample.
    pub fn totals(&self, b: usize) -> Vec<f64> {
        let t = &self.boundaries[b];
        (0..t.rows()).map(|i| t.row(i).iter().sum()).collect()
    }

    /// Concatenates records of disjoint sample sets of the same network.
    pub fn concat(records: &[RelevanceRecord]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Input("no relevance records to merge".into()))?;
        if records.iter().any(|r| r.kinds != first.kinds) {
            return Err(Error::Consistency("records come from different networks".into()));
        }
        let boundaries = (0..first.boundaries.len())
            .map(|b| {
                let mut data = Vec::new();
                let mut rows = 0;
                for r in records {
                    data.extend_from_slice(r.boundaries[b].data());
                    rows += r.boundaries[b].rows();
                }
                let mut shape = vec![rows];
                shape.extend_from_slice(&first.shapes[b]);
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RelevanceRecord {
            kinds: first.kinds.clone(),
            shapes: first.shapes.clone(),
            boundaries,
        })
    }

    /// Writes `layer,side,sample,element,relevance` rows.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "layer,side,sample,element,relevance")?;
        for layer in 0..self.kinds.len() {
            for (side, t) in [("input", &self.boundaries[layer]), ("output", &self.boundaries[layer + 1])] {
                for i in 0..t.rows() {
                    for (e, v) in t.row(i).iter().enumerate() {
                        writeln!(out, "{layer},{side},{i},{e},{v}")?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn stabilized(z: f64, eps: f64) -> f64 {
    // sign(0) is taken as +1 so the denominator never vanishes
    if z >= 0.0 {
        z + eps
    } else {
        z - eps
    }
}

/// Propagates `seed` (shaped like the network output) back through `net`
/// using the activations in `trace`.
pub fn propagate_relevance(net: &Network, trace: &Trace, seed: &Tensor, eps: f64) -> Result<RelevanceRecord> {
    if trace.activations.len() != net.len() + 1 {
        return Err(Error::Consistency("trace does not belong to this network".into()));
    }
    let n = trace.batch_size();
    for (b, a) in trace.activations.iter().enumerate() {
        if a.rows() != n || a.shape()[1..] != *net.boundary_shape(b) {
            return Err(Error::Consistency(format!("trace activation {b} has shape {:?}", a.shape())));
        }
    }
    if seed.shape() != trace.logits().shape() {
        return Err(Error::dim("seed vs network output", seed.shape(), trace.logits().shape()));
    }

    let mut boundaries = vec![Tensor::zeros(&[1]); net.len() + 1];
    boundaries[net.len()] = seed.clone();
    for i in (0..net.len()).rev() {
        let a = &trace.activations[i];
        let z = &trace.activations[i + 1];
        let r_out = &boundaries[i + 1];
        let layer = net.layer(i);
        let r_in = match *layer.kind() {
            LayerKind::Dense { inputs, outputs } => {
                let w = &layer.params().expect("dense params").weight;
                let s: Vec<f64> = r_out.data().iter().zip(z.data()).map(|(&r, &z)| r / stabilized(z, eps)).collect();
                let mut c = vec![0.0; n * inputs];
                gemm_nn(n, outputs, inputs, &s, w.data(), &mut c);
                let data = a.data().iter().zip(&c).map(|(x, c)| x * c).collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            LayerKind::Conv2d(g) => {
                let w = &layer.params().expect("conv params").weight;
                let geom = g.patches(&a.shape()[1..])?;
                let (e, pos, f) = (geom.patch_len(), geom.positions(), g.out_channels);
                let mut cols = vec![0.0; e * pos];
                let mut c = vec![0.0; e * pos];
                let mut r_in = vec![0.0; a.len()];
                for (((x, zi), ri), dst) in a
                    .data()
                    .chunks_exact(geom.input_len())
                    .zip(z.data().chunks_exact(f * pos))
                    .zip(r_out.data().chunks_exact(f * pos))
                    .zip(r_in.chunks_exact_mut(geom.input_len()))
                {
                    geom.im2col_into(x, &mut cols);
                    let s: Vec<f64> = ri.iter().zip(zi).map(|(&r, &z)| r / stabilized(z, eps)).collect();
                    c.fill(0.0);
                    gemm_tn(e, f, pos, w.data(), &s, &mut c);
                    for (cv, &xv) in c.iter_mut().zip(&cols) {
                        *cv *= xv;
                    }
                    geom.col2im_add(&c, dst);
                }
                Tensor::new(a.shape().to_vec(), r_in)?
            }
            LayerKind::MaxPool2d { size, stride } => {
                let [ch, h, w] = a.shape()[1..] else {
                    return Err(Error::Consistency("maxpool input is not C×H×W".into()));
                };
                let mut geom = PatchGeometry::new((1, h, w), (size, size), stride, 0)?;
                geom.channels = ch;
                let mut r_in = vec![0.0; a.len()];
                for (&src, &r) in pool_argmax(a, &geom).iter().zip(r_out.data()) {
                    r_in[src] += r;
                }
                Tensor::new(a.shape().to_vec(), r_in)?
            }
            LayerKind::Relu | LayerKind::Flatten | LayerKind::SoftmaxCrossEntropy { .. } => {
                r_out.clone().reshape(a.shape())?
            }
        };
        r_in.ensure_finite(&format!("relevance through layer {i}"))?;
        boundaries[i] = r_in;
    }
    RelevanceRecord::from_boundaries(net, boundaries)
}

/// Forward pass, seeding and propagation for a scoring batch, fanned out over
/// chunks of `chunk` samples and merged in sample order.
pub fn relevance_pass(
    net: &Network,
    batch: &Tensor,
    labels: Option<&[usize]>,
    eps: f64,
    chunk: usize,
) -> Result<RelevanceRecord> {
    let n = batch.rows();
    let chunk = chunk.max(1);
    let ranges: Vec<(usize, usize)> = (0..n).step_by(chunk).map(|s| (s, (s + chunk).min(n))).collect();
    let records = ranges
        .par_iter()
        .map(|&(s, e)| {
            let idx: Vec<usize> = (s..e).collect();
            let (logits, trace) = net.forward(&batch.select_rows(&idx))?;
            let seed = seed_output_relevance(&logits, labels.map(|l| &l[s..e]))?;
            propagate_relevance(net, &trace, &seed, eps)
        })
        .collect::<Result<Vec<_>>>()?;
    RelevanceRecord::concat(&records)
}

/// Per-element column sums over the sample axis, order independent.
fn sample_sums(t: &Tensor) -> Vec<f64> {
    let width = t.row_len();
    let mut scratch = Vec::with_capacity(t.rows());
    (0..width)
        .map(|k| {
            scratch.clear();
            scratch.extend((0..t.rows()).map(|i| t.row(i)[k]));
            order_independent_sum(&mut scratch)
        })
        .collect()
}

/// Parameter relevance of a dense layer, shaped like its `outputs × inputs`
/// weight: entry `[j][k]` is `Σ_i rel_i(a_k) + Σ_i rel_i(b_j)`.
pub fn parameter_relevance(record: &RelevanceRecord, layer: usize) -> Result<Tensor> {
    let Some(LayerKind::Dense { inputs, outputs }) = record.kinds.get(layer).copied() else {
        return Err(Error::Consistency(format!("layer {layer} is not a dense layer")));
    };
    let a_sum = sample_sums(record.input_relevance(layer)?);
    let b_sum = sample_sums(record.output_relevance(layer)?);
    let mut rel = vec![0.0; outputs * inputs];
    for (j, row) in rel.chunks_exact_mut(inputs).enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = a_sum[k] + b_sum[j];
        }
    }
    Tensor::new(vec![outputs, inputs], rel)
}

/// Parameter relevance of a conv layer, shaped `out_ch × in_ch × kh × kw`.
///
/// Each (sample, output position) is one application of the unrolled
/// fully-connected form; the kernel element at patch row `e` of filter `f`
/// collects `rel(column element e) + rel(output f at that position)` over all
/// of them. Column relevance is the im2col of the input relevance, with zero
/// at padded positions.
pub fn conv_parameter_relevance(record: &RelevanceRecord, layer: usize) -> Result<Tensor> {
    let Some(LayerKind::Conv2d(g)) = record.kinds.get(layer).copied() else {
        return Err(Error::Consistency(format!("layer {layer} is not a conv layer")));
    };
    let rel_in = record.input_relevance(layer)?;
    let rel_out = record.output_relevance(layer)?;
    let geom = g.patches(&record.shapes[layer])?;
    let (e, pos, f) = (geom.patch_len(), geom.positions(), g.out_channels);
    let n = rel_in.rows();

    let mut cols = vec![0.0; e * pos];
    let mut per_row: Vec<Vec<f64>> = vec![Vec::with_capacity(n * pos); e];
    for i in 0..n {
        geom.im2col_into(rel_in.row(i), &mut cols);
        for (row, acc) in cols.chunks_exact(pos).zip(per_row.iter_mut()) {
            acc.extend_from_slice(row);
        }
    }
    let col_sum: Vec<f64> = per_row.iter_mut().map(|v| order_independent_sum(v)).collect();

    let mut out_sum = Vec::with_capacity(f);
    let mut scratch = Vec::with_capacity(n * pos);
    for filter in 0..f {
        scratch.clear();
        for i in 0..n {
            scratch.extend_from_slice(&rel_out.row(i)[filter * pos..(filter + 1) * pos]);
        }
        out_sum.push(order_independent_sum(&mut scratch));
    }

    let mut rel = vec![0.0; f * e];
    for (filter, row) in rel.chunks_exact_mut(e).enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = col_sum[k] + out_sum[filter];
        }
    }
    Tensor::new(vec![g.out_channels, g.in_channels, g.kernel_h, g.kernel_w], rel)
}

/// Dispatches to the dense or conv parameter relevance.
pub fn layer_parameter_relevance(record: &RelevanceRecord, layer: usize) -> Result<Tensor> {
    match record.kinds.get(layer) {
        Some(LayerKind::Dense { .. }) => parameter_relevance(record, layer),
        Some(LayerKind::Conv2d(_)) => conv_parameter_relevance(record, layer),
        _ => Err(Error::Consistency(format!("layer {layer} has no parameters"))),
    }
}
