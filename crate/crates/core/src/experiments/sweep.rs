use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::pruning::{plan_prune, PrunePlan, Technique};
use crate::splitsim::{protocol_breakdowns, time_to_accuracy, write_breakdown_csv, TimeToAccuracy, Workload, EpochTimeBreakdown};
use crate::training::{prune_and_retrain, train_dense, unit_statistics, ProtocolOutcome, TrainConfig, TrainState, UnitStatistics};

use super::config::ExperimentConfig;

pub const RESULTS_FILE: &str = "results.csv";
pub const TARGETS_FILE: &str = "targets.csv";
pub const CELLS_DIR: &str = "cells";

/// One point of the sweep grid. `delta` is `None` for techniques that do not
/// combine scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellKey {
    pub technique: Technique,
    pub rho: f64,
    pub delta: Option<f64>,
    pub seed: u64,
}

impl CellKey {
    pub fn order(&self, other: &CellKey) -> Ordering {
        self.technique
            .cmp(&other.technique)
            .then(self.rho.total_cmp(&other.rho))
            .then(match (self.delta, other.delta) {
                (Some(a), Some(b)) => a.total_cmp(&b),
                (a, b) => a.is_some().cmp(&b.is_some()),
            })
            .then(self.seed.cmp(&other.seed))
    }

    pub fn delta_label(&self) -> String {
        self.delta.map_or_else(|| "n/a".to_string(), |d| d.to_string())
    }

    pub fn file_stem(&self) -> String {
        format!(
            "{}_rho{}_delta{}_seed{}",
            self.technique,
            self.rho,
            self.delta.map_or_else(|| "na".to_string(), |d| d.to_string()),
            self.seed
        )
    }

    fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            technique: self.technique,
            rho: self.rho,
            delta: self.delta.unwrap_or(base.delta),
            seed: self.seed,
            record_wall_clock: false,
            ..base.clone()
        }
    }
}

/// Every cell of the configured grid, in table order.
pub fn enumerate_cells(cfg: &ExperimentConfig) -> Vec<CellKey> {
    let mut cells = Vec::new();
    for &technique in &cfg.techniques {
        let deltas: Vec<Option<f64>> = match technique {
            Technique::FlexRel => cfg.deltas.iter().map(|&d| Some(d)).collect(),
            _ => vec![None],
        };
        for &rho in &cfg.rhos {
            for &delta in &deltas {
                for &seed in &cfg.seeds {
                    cells.push(CellKey {
                        technique,
                        rho,
                        delta,
                        seed,
                    });
                }
            }
        }
    }
    cells.sort_by(CellKey::order);
    cells
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetResult {
    pub target: f64,
    pub outcome: TimeToAccuracy,
}

/// Outcome of one cell. Times are modeled split-learning seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub key: CellKey,
    pub status: CellStatus,
    pub achieved_rho: f64,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub bytes_total: u64,
    pub t_dense_s: f64,
    pub t_relevance_s: f64,
    pub t_pruned_s: f64,
    pub targets: Vec<TargetResult>,
}

impl ResultRow {
    pub fn failed(key: CellKey, message: String) -> Self {
        ResultRow {
            key,
            status: CellStatus::Failed(message),
            achieved_rho: f64::NAN,
            final_accuracy: f64::NAN,
            best_accuracy: f64::NAN,
            bytes_total: 0,
            t_dense_s: f64::NAN,
            t_relevance_s: f64::NAN,
            t_pruned_s: f64::NAN,
            targets: Vec::new(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == CellStatus::Ok
    }

    pub fn target(&self, target: f64) -> Option<&TimeToAccuracy> {
        self.targets.iter().find(|t| t.target == target).map(|t| &t.outcome)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultTable {
    pub targets: Vec<f64>,
    pub rows: Vec<ResultRow>,
}

fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

fn parse_num(s: &str) -> Result<f64> {
    if s.is_empty() {
        return Ok(f64::NAN);
    }
    s.parse().map_err(|_| Error::Parse(format!("not a number: {s:?}")))
}

fn parse_key(rec: &csv::StringRecord) -> Result<CellKey> {
    let field = |i: usize| rec.get(i).ok_or_else(|| Error::Parse("short CSV record".into()));
    Ok(CellKey {
        technique: field(0)?.parse()?,
        rho: parse_num(field(1)?)?,
        delta: match field(2)? {
            "n/a" => None,
            d => Some(parse_num(d)?),
        },
        seed: field(3)?
            .parse()
            .map_err(|_| Error::Parse(format!("bad seed {:?}", rec.get(3))))?,
    })
}

impl ResultTable {
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| a.key.order(&b.key));
    }

    pub fn get(&self, key: &CellKey) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.key.order(key) == Ordering::Equal)
    }

    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| !r.is_ok()).count()
    }

    fn results_header(&self) -> Vec<String> {
        let mut h: Vec<String> = [
            "technique",
            "rho",
            "delta",
            "seed",
            "status",
            "achieved_rho",
            "final_accuracy",
            "best_accuracy",
            "bytes_total",
            "t_dense_s",
            "t_relevance_s",
            "t_pruned_s",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        h.extend(self.targets.iter().map(|t| format!("ttt_{t}")));
        h.push("message".into());
        h
    }

    fn result_record(&self, r: &ResultRow) -> Vec<String> {
        let (status, message) = match &r.status {
            CellStatus::Ok => ("ok", String::new()),
            CellStatus::Failed(m) => ("failed", m.clone()),
        };
        let mut rec = vec![
            r.key.technique.to_string(),
            r.key.rho.to_string(),
            r.key.delta_label(),
            r.key.seed.to_string(),
            status.to_string(),
            num(r.achieved_rho),
            num(r.final_accuracy),
            num(r.best_accuracy),
            if r.is_ok() { r.bytes_total.to_string() } else { String::new() },
            num(r.t_dense_s),
            num(r.t_relevance_s),
            num(r.t_pruned_s),
        ];
        rec.extend(
            self.targets
                .iter()
                .map(|&t| r.target(t).and_then(TimeToAccuracy::seconds).map(num).unwrap_or_default()),
        );
        rec.push(message);
        rec
    }

    /// One line per cell.
    pub fn write_results_csv(&self, out: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.results_header())?;
        for r in &self.rows {
            w.write_record(self.result_record(r))?;
        }
        w.flush()?;
        Ok(())
    }

    /// One line per (cell, target) with the stacked time components.
    pub fn write_targets_csv(&self, out: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "technique", "rho", "delta", "seed", "target", "reached", "epoch", "seconds", "bytes", "t_device", "t_server",
            "t_up", "t_down", "t_rel", "bytes_up", "bytes_down",
        ])?;
        for r in self.rows.iter().filter(|r| r.is_ok()) {
            for t in &r.targets {
                let mut rec = vec![
                    r.key.technique.to_string(),
                    r.key.rho.to_string(),
                    r.key.delta_label(),
                    r.key.seed.to_string(),
                    t.target.to_string(),
                ];
                match t.outcome {
                    TimeToAccuracy::Reached {
                        epoch,
                        seconds,
                        bytes,
                        components: c,
                    } => rec.extend([
                        "1".to_string(),
                        epoch.to_string(),
                        num(seconds),
                        bytes.to_string(),
                        num(c.t_device_compute),
                        num(c.t_server_compute),
                        num(c.t_uplink),
                        num(c.t_downlink),
                        num(c.t_relevance),
                        c.bytes_up.to_string(),
                        c.bytes_down.to_string(),
                    ]),
                    TimeToAccuracy::NotReached => {
                        rec.push("0".into());
                        rec.extend(std::iter::repeat(String::new()).take(10));
                    }
                }
                w.write_record(rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.write_results_csv(BufWriter::new(File::create(dir.join(RESULTS_FILE))?))?;
        self.write_targets_csv(BufWriter::new(File::create(dir.join(TARGETS_FILE))?))
    }

    /// Reads a table written by [`ResultTable::save`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut rd = csv::Reader::from_path(dir.join(RESULTS_FILE))?;
        let header = rd.headers()?.clone();
        let targets: Vec<f64> = header
            .iter()
            .filter_map(|h| h.strip_prefix("ttt_"))
            .map(parse_num)
            .collect::<Result<_>>()?;
        let message_col = header.len() - 1;
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let key = parse_key(&rec)?;
            let f = |i: usize| parse_num(rec.get(i).unwrap_or(""));
            let row = match rec.get(4) {
                Some("ok") => ResultRow {
                    key,
                    status: CellStatus::Ok,
                    achieved_rho: f(5)?,
                    final_accuracy: f(6)?,
                    best_accuracy: f(7)?,
                    bytes_total: rec
                        .get(8)
                        .unwrap_or("")
                        .parse()
                        .map_err(|_| Error::Parse("bad bytes_total".into()))?,
                    t_dense_s: f(9)?,
                    t_relevance_s: f(10)?,
                    t_pruned_s: f(11)?,
                    targets: Vec::new(),
                },
                Some("failed") => ResultRow::failed(key, rec.get(message_col).unwrap_or("").to_string()),
                other => return Err(Error::Parse(format!("bad status {other:?}"))),
            };
            rows.push(row);
        }
        let mut table = ResultTable { targets, rows };

        let mut rd = csv::Reader::from_path(dir.join(TARGETS_FILE))?;
        for rec in rd.records() {
            let rec = rec?;
            let key = parse_key(&rec)?;
            let f = |i: usize| parse_num(rec.get(i).unwrap_or(""));
            let int = |i: usize| {
                rec.get(i)
                    .unwrap_or("")
                    .parse::<u64>()
                    .map_err(|_| Error::Parse(format!("bad integer in column {i}")))
            };
            let target = f(4)?;
            let outcome = if rec.get(5) == Some("1") {
                TimeToAccuracy::Reached {
                    epoch: int(6)? as usize,
                    seconds: f(7)?,
                    bytes: int(8)?,
                    components: EpochTimeBreakdown {
                        t_device_compute: f(9)?,
                        t_server_compute: f(10)?,
                        t_uplink: f(11)?,
                        t_downlink: f(12)?,
                        t_relevance: f(13)?,
                        bytes_up: int(14)?,
                        bytes_down: int(15)?,
                    },
                }
            } else {
                TimeToAccuracy::NotReached
            };
            let row = table
                .rows
                .iter_mut()
                .find(|r| r.key.order(&key) == Ordering::Equal)
                .ok_or_else(|| Error::Parse(format!("target row for unknown cell {}", key.file_stem())))?;
            row.targets.push(TargetResult { target, outcome });
        }
        for r in table.rows.iter_mut().filter(|r| r.is_ok()) {
            let order = &table.targets;
            r.targets
                .sort_by_key(|t| order.iter().position(|&x| x == t.target).unwrap_or(usize::MAX));
        }
        Ok(table)
    }
}

/// Dense phase and unit statistics shared by every cell of one seed.
struct SeedBase {
    dense: TrainState,
    stats: UnitStatistics,
}

fn seed_base(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<SeedBase> {
    let train = TrainConfig {
        seed,
        record_wall_clock: false,
        ..cfg.train.clone()
    };
    let net = cfg.build_network(data, seed)?;
    let dense = train_dense(net, data, &train)?;
    let need_relevance = cfg.techniques.iter().any(|t| t.needs_relevance());
    let stats = unit_statistics(&dense.network, data, &train, need_relevance)?;
    Ok(SeedBase { dense, stats })
}

/// Builds the row of `key` from a finished protocol run.
pub fn cell_row(
    key: CellKey,
    outcome: &ProtocolOutcome,
    cfg: &ExperimentConfig,
    workload: &Workload,
    targets: &[f64],
) -> Result<(ResultRow, Vec<EpochTimeBreakdown>)> {
    let ed = cfg.train.epochs_dense;
    let breakdowns = protocol_breakdowns(
        &outcome.dense,
        &outcome.network,
        ed,
        cfg.train.epochs_pruned,
        key.technique,
        &cfg.split,
        workload,
    )?;
    let accs = outcome.log.accuracies();
    let targets = targets
        .iter()
        .map(|&t| Ok(TargetResult { target: t, outcome: time_to_accuracy(&accs, &breakdowns, t)? }))
        .collect::<Result<Vec<_>>>()?;
    let sum = |it: &mut dyn Iterator<Item = f64>| it.sum::<f64>();
    let row = ResultRow {
        key,
        status: CellStatus::Ok,
        achieved_rho: outcome.plan.achieved_fraction,
        final_accuracy: outcome.log.final_accuracy().unwrap_or(f64::NAN),
        best_accuracy: accs.iter().copied().fold(f64::NAN, f64::max),
        bytes_total: breakdowns.iter().map(EpochTimeBreakdown::bytes).sum(),
        t_dense_s: sum(&mut breakdowns[..ed].iter().map(|b| b.total() - b.t_relevance)),
        t_relevance_s: sum(&mut breakdowns.iter().map(|b| b.t_relevance)),
        t_pruned_s: sum(&mut breakdowns[ed..].iter().map(EpochTimeBreakdown::total)),
        targets,
    };
    Ok((row, breakdowns))
}

fn write_cell(dir: &Path, targets: &[f64], row: &ResultRow, outcome: Option<(&ProtocolOutcome, &[EpochTimeBreakdown])>) -> Result<()> {
    let stem = row.key.file_stem();
    let single = ResultTable {
        targets: targets.to_vec(),
        rows: vec![row.clone()],
    };
    single.write_results_csv(BufWriter::new(File::create(dir.join(format!("{stem}.csv")))?))?;
    if let Some((outcome, breakdowns)) = outcome {
        outcome
            .log
            .write_csv(BufWriter::new(File::create(dir.join(format!("{stem}.metrics.csv")))?))?;
        write_breakdown_csv(breakdowns, BufWriter::new(File::create(dir.join(format!("{stem}.breakdown.csv")))?))?;
    }
    Ok(())
}

/// Runs every cell of `cfg` and writes per-cell files as they finish, then
/// the merged `results.csv` and `targets.csv` under `cfg.out_dir`.
///
/// The dense phase runs once per seed; cells of one seed whose prune plans
/// coincide share a single retraining run. Failed cells (for instance an
/// unreachable pruning factor) become failed rows and the sweep continues.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<ResultTable> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    let cells_dir = out.join(CELLS_DIR);
    fs::create_dir_all(&cells_dir)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let data = cfg.load_dataset()?;
    let workload = Workload::new(data.train.len(), cfg.train.batch_size, cfg.train.scoring_batch);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let cells = enumerate_cells(cfg);
    let targets = cfg.targets.clone();

    let bases: Vec<(u64, Result<SeedBase>)> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| (seed, seed_base(cfg, &data, seed)))
            .collect()
    });

    let mut rows = Vec::new();
    // (seed, plan units) → cells sharing that retraining run
    let mut jobs: BTreeMap<(u64, Vec<(usize, usize)>), (PrunePlan, Vec<CellKey>)> = BTreeMap::new();
    for key in &cells {
        let (_, base) = bases.iter().find(|(s, _)| *s == key.seed).expect("seed enumerated");
        let planned = base.as_ref().map_err(|e| e.to_string()).and_then(|b| {
            let c = key.train_config(&cfg.train);
            b.stats
                .score_table(c.technique, c.delta, c.scope)
                .and_then(|t| plan_prune(&t, c.rho))
                .map_err(|e| e.to_string())
        });
        match planned {
            Ok(plan) => jobs.entry((key.seed, plan.units.clone())).or_insert((plan, Vec::new())).1.push(*key),
            Err(message) => {
                let row = ResultRow::failed(*key, message);
                write_cell(&cells_dir, &targets, &row, None)?;
                rows.push(row);
            }
        }
    }

    let jobs: Vec<_> = jobs.into_values().collect();
    let finished: Vec<Result<Vec<ResultRow>>> = pool.install(|| {
        jobs.par_iter()
            .map(|(_, keys)| {
                let first = keys[0];
                let base = bases
                    .iter()
                    .find(|(s, _)| *s == first.seed)
                    .and_then(|(_, b)| b.as_ref().ok())
                    .expect("planned cells have a base");
                let outcome = prune_and_retrain(&base.dense, &base.stats, &data, &first.train_config(&cfg.train));
                let mut out = Vec::with_capacity(keys.len());
                for &key in keys {
                    let row = match &outcome {
                        Ok(o) => {
                            let (row, breakdowns) = cell_row(key, o, cfg, &workload, &targets)?;
                            write_cell(&cells_dir, &targets, &row, Some((o, &breakdowns)))?;
                            row
                        }
                        Err(e) => {
                            let row = ResultRow::failed(key, e.to_string());
                            write_cell(&cells_dir, &targets, &row, None)?;
                            row
                        }
                    };
                    out.push(row);
                }
                Ok(out)
            })
            .collect()
    });
    for r in finished {
        rows.extend(r?);
    }
    let mut table = ResultTable { targets, rows };
    table.sort();
    table.save(&out)?;
    Ok(table)
}
