//! Closed-form split-learning cost model.
//!
//! The device runs layers `[0, cut)` and the server runs `[cut, len)`. Every
//! mini-batch sends the cut activation up and its gradient down; pruned cut
//! channels are not transmitted. Compute is counted in multiply-accumulates
//! (MACs) per unit: a kept unit costs `fan_in` MACs per output position, a
//! pruned one costs nothing, so compute scales with the active parameter
//! count the same way the pruning factor does.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::LayerKind;
use crate::network::Network;
use crate::pruning::Technique;

const BYTES_PER_ELEMENT: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkModel {
    /// Device to server, bits per second.
    pub uplink_rate: f64,
    /// Server to device, bits per second.
    pub downlink_rate: f64,
    /// Fixed latency added to every mini-batch transfer, seconds.
    pub overhead_s: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            uplink_rate: 150e6,
            downlink_rate: 20e6,
            overhead_s: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComputeModel {
    /// MAC/s on the device.
    pub device_throughput: f64,
    /// MAC/s on the server.
    pub server_throughput: f64,
    /// Relevance-pass MACs per forward MAC.
    pub relevance_cost_factor: f64,
    /// Backward MACs per forward MAC.
    pub backward_factor: f64,
}

impl Default for ComputeModel {
    fn default() -> Self {
        ComputeModel {
            device_throughput: 1e9,
            server_throughput: 2e10,
            relevance_cost_factor: 2.0,
            backward_factor: 2.0,
        }
    }
}

/// Link and compute models together.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitModels {
    pub link: LinkModel,
    pub compute: ComputeModel,
}

impl SplitModels {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("uplink_rate", self.link.uplink_rate),
            ("downlink_rate", self.link.downlink_rate),
            ("device_throughput", self.compute.device_throughput),
            ("server_throughput", self.compute.server_throughput),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("overhead_s", self.link.overhead_s),
            ("relevance_cost_factor", self.compute.relevance_cost_factor),
            ("backward_factor", self.compute.backward_factor),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// How much data one epoch pushes through the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    /// Samples in the relevance scoring batch.
    pub scoring_samples: usize,
}

impl Workload {
    pub fn new(train_samples: usize, batch_size: usize, scoring_samples: usize) -> Self {
        Workload {
            batch_size,
            batches_per_epoch: train_samples.div_ceil(batch_size.max(1)),
            scoring_samples: scoring_samples.min(train_samples),
        }
    }

    pub fn samples_per_epoch(&self) -> u64 {
        (self.batch_size * self.batches_per_epoch) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochTimeBreakdown {
    pub t_device_compute: f64,
    pub t_server_compute: f64,
    pub t_uplink: f64,
    pub t_downlink: f64,
    pub t_relevance: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

impl EpochTimeBreakdown {
    pub fn total(&self) -> f64 {
        self.t_device_compute + self.t_server_compute + self.t_uplink + self.t_downlink + self.t_relevance
    }

    pub fn compute(&self) -> f64 {
        self.t_device_compute + self.t_server_compute
    }

    pub fn bytes(&self) -> u64 {
        self.bytes_up + self.bytes_down
    }

    /// Component-wise sum.
    pub fn accumulate(&mut self, other: &EpochTimeBreakdown) {
        self.t_device_compute += other.t_device_compute;
        self.t_server_compute += other.t_server_compute;
        self.t_uplink += other.t_uplink;
        self.t_downlink += other.t_downlink;
        self.t_relevance += other.t_relevance;
        self.bytes_up += other.bytes_up;
        self.bytes_down += other.bytes_down;
    }
}

/// Forward MACs of one sample through `layer`, counting active units only.
pub fn layer_macs(net: &Network, layer: usize) -> u64 {
    let kind = net.layer(layer).kind();
    let active = net.active_units(layer) as u64;
    match kind {
        LayerKind::Dense { inputs, .. } => active * *inputs as u64,
        LayerKind::Conv2d(g) => {
            let out = net.boundary_shape(layer + 1);
            active * g.fan_in() as u64 * (out[1] * out[2]) as u64
        }
        _ => 0,
    }
}

/// Per-sample forward MACs on the device and on the server.
pub fn forward_macs(net: &Network, cut_index: usize) -> (u64, u64) {
    let device = (0..cut_index).map(|l| layer_macs(net, l)).sum();
    let server = (cut_index..net.len()).map(|l| layer_macs(net, l)).sum();
    (device, server)
}

fn check_cut(net: &Network, cut_index: usize) -> Result<()> {
    if cut_index == 0 || cut_index >= net.len() {
        return Err(Error::Input(format!(
            "cut index {cut_index} outside [1, {})",
            net.len()
        )));
    }
    Ok(())
}

/// Bytes sent up (activations) and down (their gradients) per epoch across
/// the cut boundary.
pub fn cut_payload(net: &Network, cut_index: usize, batch_size: usize, batches: usize) -> Result<(u64, u64)> {
    check_cut(net, cut_index)?;
    let bytes = (batches * batch_size * net.active_elements(cut_index)) as u64 * BYTES_PER_ELEMENT;
    Ok((bytes, bytes))
}

/// Time and traffic of one epoch; `charge_relevance` adds one relevance pass
/// over the scoring batch.
pub fn epoch_time(
    net: &Network,
    models: &SplitModels,
    workload: &Workload,
    charge_relevance: bool,
) -> Result<EpochTimeBreakdown> {
    models.validate()?;
    let cut = net.cut_index();
    let (bytes_up, bytes_down) = cut_payload(net, cut, workload.batch_size, workload.batches_per_epoch)?;
    let (dev, srv) = forward_macs(net, cut);
    let ComputeModel {
        device_throughput,
        server_throughput,
        relevance_cost_factor,
        backward_factor,
    } = models.compute;
    let samples = workload.samples_per_epoch() as f64;
    let train_factor = 1.0 + backward_factor;
    let transfers = workload.batches_per_epoch as f64 * models.link.overhead_s;
    let t_relevance = if charge_relevance {
        let s = workload.scoring_samples as f64;
        relevance_cost_factor * s * (dev as f64 / device_throughput + srv as f64 / server_throughput)
    } else {
        0.0
    };
    Ok(EpochTimeBreakdown {
        t_device_compute: train_factor * samples * dev as f64 / device_throughput,
        t_server_compute: train_factor * samples * srv as f64 / server_throughput,
        t_uplink: bytes_up as f64 * 8.0 / models.link.uplink_rate + transfers,
        t_downlink: bytes_down as f64 * 8.0 / models.link.downlink_rate + transfers,
        t_relevance,
        bytes_up,
        bytes_down,
    })
}

/// Per-epoch breakdowns of a full protocol run: `epochs_dense` epochs of the
/// dense network (the last one carrying the relevance charge when the
/// technique uses relevance), then `epochs_pruned` epochs of the pruned one.
pub fn protocol_breakdowns(
    dense: &Network,
    pruned: &Network,
    epochs_dense: usize,
    epochs_pruned: usize,
    technique: Technique,
    models: &SplitModels,
    workload: &Workload,
) -> Result<Vec<EpochTimeBreakdown>> {
    if technique.needs_relevance() && epochs_dense == 0 {
        return Err(Error::Config("relevance needs at least one dense epoch".into()));
    }
    let plain = epoch_time(dense, models, workload, false)?;
    let scoring = epoch_time(dense, models, workload, technique.needs_relevance())?;
    let after = epoch_time(pruned, models, workload, false)?;
    let mut out = vec![plain; epochs_dense];
    if let Some(last) = out.last_mut() {
        *last = scoring;
    }
    out.extend(std::iter::repeat(after).take(epochs_pruned));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeToAccuracy {
    Reached {
        /// 1-based epoch at which the target was first met.
        epoch: usize,
        seconds: f64,
        bytes: u64,
        /// Component sums over epochs `1..=epoch`.
        components: EpochTimeBreakdown,
    },
    NotReached,
}

impl TimeToAccuracy {
    pub fn seconds(&self) -> Option<f64> {
        match self {
            TimeToAccuracy::Reached { seconds, .. } => Some(*seconds),
            TimeToAccuracy::NotReached => None,
        }
    }
}

/// Cumulative time and traffic until the first epoch with accuracy ≥ `target`.
pub fn time_to_accuracy(accuracies: &[f64], breakdowns: &[EpochTimeBreakdown], target: f64) -> Result<TimeToAccuracy> {
    if accuracies.len() != breakdowns.len() {
        return Err(Error::dim("accuracies vs breakdowns", &[accuracies.len()], &[breakdowns.len()]));
    }
    let mut components = EpochTimeBreakdown::default();
    for (i, (acc, b)) in accuracies.iter().zip(breakdowns).enumerate() {
        components.accumulate(b);
        if *acc >= target {
            return Ok(TimeToAccuracy::Reached {
                epoch: i + 1,
                seconds: components.total(),
                bytes: components.bytes(),
                components,
            });
        }
    }
    Ok(TimeToAccuracy::NotReached)
}

/// CSV with columns `epoch,t_device,t_server,t_up,t_down,t_rel,bytes_up,bytes_down`.
pub fn write_breakdown_csv(breakdowns: &[EpochTimeBreakdown], mut out: impl Write) -> Result<()> {
    writeln!(out, "epoch,t_device,t_server,t_up,t_down,t_rel,bytes_up,bytes_down")?;
    for (i, b) in breakdowns.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            i + 1,
            b.t_device_compute,
            b.t_server_compute,
            b.t_uplink,
            b.t_downlink,
            b.t_relevance,
            b.bytes_up,
            b.bytes_down
        )?;
    }
    Ok(())
}
