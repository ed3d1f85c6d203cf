//! Dense-train, score, prune, retrain protocol.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabeledImages};
use crate::error::{Error, Result};
use crate::layer::softmax_cross_entropy;
use crate::network::Network;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::pruning::{magnitude_scores, plan_prune, relevance_scores, NormScope, PrunePlan, ScoreTable, Technique, UnitScore};
use crate::relevance::{argmax, relevance_pass, DEFAULT_EPSILON};

const EVAL_CHUNK: usize = 256;
const SCORING_STREAM: u64 = 0x5C0E;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs_dense: usize,
    pub epochs_pruned: usize,
    pub seed: u64,
    /// Samples drawn from the training split to compute relevance.
    pub scoring_batch: usize,
    pub technique: Technique,
    pub delta: f64,
    pub rho: f64,
    pub scope: NormScope,
    pub epsilon: f64,
    /// Chunk size for the parallel relevance pass.
    pub relevance_chunk: usize,
    /// When false, timing columns are written as 0 so logs are reproducible.
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs_dense: 10,
            epochs_pruned: 40,
            seed: 1,
            scoring_batch: 256,
            technique: Technique::FlexRel,
            delta: 0.5,
            rho: 0.0,
            scope: NormScope::PerLayer,
            epsilon: DEFAULT_EPSILON,
            relevance_chunk: 64,
            record_wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.scoring_batch == 0 {
            return bad("scoring_batch must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return bad(format!("delta {} outside [0, 1]", self.delta));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho {} outside [0, 1)", self.rho));
        }
        if !(self.adam.learning_rate > 0.0 && self.adam.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.adam.learning_rate));
        }
        if self.technique.needs_relevance() && self.epochs_dense == 0 {
            return bad("relevance scoring needs epochs_dense >= 1".into());
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive".into());
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_dense + self.epochs_pruned
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Dense,
    Pruned,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Dense => "dense",
            Phase::Pruned => "pruned",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub accuracy: f64,
    pub t_fwd_bwd_s: f64,
    pub t_relevance_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub epochs: Vec<EpochMetrics>,
}

impl MetricsLog {
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "epoch,phase,loss,accuracy,t_fwd_bwd_s,t_relevance_s")?;
        for m in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                m.epoch, m.phase, m.loss, m.accuracy, m.t_fwd_bwd_s, m.t_relevance_s
            )?;
        }
        Ok(())
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.epochs.iter().map(|m| m.accuracy).collect()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|m| m.accuracy)
    }
}

/// Network plus optimizer state at an epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub network: Network,
    pub optimizer: AdamState,
    pub epoch: usize,
    pub log: MetricsLog,
}

impl TrainState {
    pub fn new(network: Network) -> Self {
        let optimizer = AdamState::for_network(&network);
        TrainState {
            network,
            optimizer,
            epoch: 0,
            log: MetricsLog::default(),
        }
    }
}

/// Raw per-unit statistics taken after the dense phase.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitStatistics {
    pub magnitude: Vec<UnitScore>,
    pub relevance: Option<Vec<UnitScore>>,
    pub relevance_seconds: f64,
}

impl UnitStatistics {
    pub fn score_table(&self, technique: Technique, delta: f64, scope: NormScope) -> Result<ScoreTable> {
        ScoreTable::build(&self.magnitude, self.relevance.as_deref(), technique, delta, scope)
    }
}

/// Result of a full protocol run.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolOutcome {
    pub dense: Network,
    pub network: Network,
    pub optimizer: AdamState,
    pub log: MetricsLog,
    pub scores: ScoreTable,
    pub plan: PrunePlan,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Top-1 accuracy over a labeled set.
pub fn evaluate(net: &Network, data: &LabeledImages) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty set".into()));
    }
    let mut correct = 0usize;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(data.len())).collect();
        let logits = net.predict(&data.images.select_rows(&idx))?;
        correct += idx
            .iter()
            .enumerate()
            .filter(|&(r, &i)| argmax(logits.row(r)) == data.labels[i])
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// One optimizer step on a mini-batch; returns the mean batch loss.
pub fn train_step(
    net: &mut Network,
    optimizer: &mut AdamState,
    adam: &AdamConfig,
    data: &LabeledImages,
    batch: &[usize],
) -> Result<f64> {
    let images = data.images.select_rows(batch);
    let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
    let (logits, trace) = net.forward(&images)?;
    let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
    if !loss.is_finite() {
        return Err(Error::Training {
            layer: net.len() - 1,
            reason: format!("non-finite loss {loss}"),
        });
    }
    let grads = net.backward(&trace, &grad)?;
    adam_step(net, &grads, optimizer, adam)?;
    Ok(loss)
}

/// Trains `epochs` further epochs, appending one metrics row per epoch.
pub fn train_epochs(
    state: &mut TrainState,
    data: &Dataset,
    config: &TrainConfig,
    epochs: usize,
    phase: Phase,
) -> Result<()> {
    let n = data.train.len();
    if n == 0 {
        return Err(Error::Input("empty training split".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(config.seed, state.epoch));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let started = Instant::now();
        let mut weighted = 0.0;
        for batch in order.chunks(config.batch_size) {
            let loss = train_step(&mut state.network, &mut state.optimizer, &config.adam, &data.train, batch)?;
            weighted += loss * batch.len() as f64;
        }
        let elapsed = started.elapsed().as_secs_f64();
        state.epoch += 1;
        let accuracy = evaluate(&state.network, &data.test)?;
        state.log.epochs.push(EpochMetrics {
            epoch: state.epoch,
            phase,
            loss: weighted / n as f64,
            accuracy,
            t_fwd_bwd_s: if config.record_wall_clock { elapsed } else { 0.0 },
            t_relevance_s: 0.0,
        });
    }
    Ok(())
}

/// Indices of the scoring batch; depends only on the seed and the split size.
pub fn scoring_indices(seed: u64, n: usize, size: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, 0) ^ SCORING_STREAM);
    let mut idx = index::sample(&mut rng, n, size.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// Magnitude statistics, plus relevance over the scoring batch when
/// `with_relevance` is set. Relevance is seeded at the ground-truth class.
pub fn unit_statistics(net: &Network, data: &Dataset, config: &TrainConfig, with_relevance: bool) -> Result<UnitStatistics> {
    let magnitude = magnitude_scores(net)?;
    if !with_relevance {
        return Ok(UnitStatistics {
            magnitude,
            relevance: None,
            relevance_seconds: 0.0,
        });
    }
    let started = Instant::now();
    let scoring = data
        .train
        .subset(&scoring_indices(config.seed, data.train.len(), config.scoring_batch));
    let record = relevance_pass(
        net,
        &scoring.images,
        Some(&scoring.labels),
        config.epsilon,
        config.relevance_chunk,
    )?;
    let relevance = relevance_scores(net, &record)?;
    Ok(UnitStatistics {
        magnitude,
        relevance: Some(relevance),
        relevance_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Scores, plans and applies pruning to a trained dense state, then trains the
/// pruned phase. The dense state is left untouched so it can be reused.
pub fn prune_and_retrain(
    dense: &TrainState,
    stats: &UnitStatistics,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<ProtocolOutcome> {
    let scores = stats.score_table(config.technique, config.delta, config.scope)?;
    let plan = plan_prune(&scores, config.rho)?;
    let mut state = dense.clone();
    if let Some(last) = state.log.epochs.last_mut() {
        if config.technique.needs_relevance() && config.record_wall_clock {
            last.t_relevance_s = stats.relevance_seconds;
        }
    }
    plan.apply(&mut state.network)?;
    train_epochs(&mut state, data, config, config.epochs_pruned, Phase::Pruned)?;
    Ok(ProtocolOutcome {
        dense: dense.network.clone(),
        network: state.network,
        optimizer: state.optimizer,
        log: state.log,
        scores,
        plan,
    })
}

/// Dense training phase only.
pub fn train_dense(network: Network, data: &Dataset, config: &TrainConfig) -> Result<TrainState> {
    config.validate()?;
    let mut state = TrainState::new(network);
    train_epochs(&mut state, data, config, config.epochs_dense, Phase::Dense)?;
    Ok(state)
}

/// Full protocol: dense training, scoring, pruning to `rho`, retraining.
pub fn run_protocol(network: Network, data: &Dataset, config: &TrainConfig) -> Result<ProtocolOutcome> {
    let dense = train_dense(network, data, config)?;
    let stats = unit_statistics(&dense.network, data, config, config.technique.needs_relevance())?;
    prune_and_retrain(&dense, &stats, data, config)
}
