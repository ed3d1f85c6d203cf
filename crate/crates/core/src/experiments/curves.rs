use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pruning::Technique;
use crate::splitsim::TimeToAccuracy;

use super::sweep::{CellKey, ResultRow, ResultTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveKind {
    AccuracyVsRho,
    TimeVsTarget,
    AccuracyVsDelta,
}

impl CurveKind {
    pub const ALL: [CurveKind; 3] = [CurveKind::AccuracyVsRho, CurveKind::TimeVsTarget, CurveKind::AccuracyVsDelta];

    pub fn as_str(self) -> &'static str {
        match self {
            CurveKind::AccuracyVsRho => "accuracy_vs_rho",
            CurveKind::TimeVsTarget => "time_vs_target",
            CurveKind::AccuracyVsDelta => "accuracy_vs_delta",
        }
    }
}

impl fmt::Display for CurveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CurveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CurveKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown curve kind {s:?}")))
    }
}

/// Summary of one quantity over seeds; `std` is the sample standard deviation
/// (0 for a single seed). All fields are NaN when `n == 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub std: f64,
    pub n: usize,
}

impl SeedStats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return SeedStats {
                mean: f64::NAN,
                min: f64::NAN,
                max: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        SeedStats {
            mean,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            std: var.sqrt(),
            n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RhoPoint {
    /// `magnitude`, `relevance`, `flexrel` (one curve per δ) or
    /// `flexrel_best` (best δ at each ρ).
    pub curve: String,
    pub delta: Option<f64>,
    pub rho: f64,
    pub accuracy: SeedStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaPoint {
    pub rho: f64,
    pub delta: f64,
    pub accuracy: SeedStats,
    /// Highest mean accuracy at this ρ (ties go to the smaller δ).
    pub best: bool,
}

/// Mean time-to-target of one technique at its operating point: the largest
/// ρ (and, for flexrel, the best δ there) whose mean final accuracy meets
/// the target.
#[derive(Debug, Clone, PartialEq)]
pub struct TimePoint {
    pub technique: Technique,
    pub target: f64,
    pub rho: Option<f64>,
    pub delta: Option<f64>,
    /// Seeds of the operating cell that reached the target.
    pub reached: usize,
    pub t_device: f64,
    pub t_server: f64,
    pub t_up: f64,
    pub t_down: f64,
    pub t_rel: f64,
    pub total: f64,
    pub bytes: f64,
}

struct Axes {
    techniques: Vec<Technique>,
    rhos: Vec<f64>,
    deltas: Vec<f64>,
    seeds: Vec<u64>,
}

fn sorted_unique(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

fn axes(table: &ResultTable) -> Result<Axes> {
    if table.rows.is_empty() {
        return Err(Error::Input("result table is empty".into()));
    }
    let techniques: BTreeSet<Technique> = table.rows.iter().map(|r| r.key.technique).collect();
    let seeds: BTreeSet<u64> = table.rows.iter().map(|r| r.key.seed).collect();
    Ok(Axes {
        techniques: techniques.into_iter().collect(),
        rhos: sorted_unique(table.rows.iter().map(|r| r.key.rho).collect()),
        deltas: sorted_unique(table.rows.iter().filter_map(|r| r.key.delta).collect()),
        seeds: seeds.into_iter().collect(),
    })
}

fn deltas_for(t: Technique, axes: &Axes) -> Vec<Option<f64>> {
    match t {
        Technique::FlexRel => axes.deltas.iter().map(|&d| Some(d)).collect(),
        _ => vec![None],
    }
}

/// Errors listing every grid cell absent from the table.
fn check_coverage(table: &ResultTable, axes: &Axes, techniques: &[Technique]) -> Result<()> {
    let mut missing = Vec::new();
    for &technique in techniques {
        for &rho in &axes.rhos {
            for delta in deltas_for(technique, axes) {
                for &seed in &axes.seeds {
                    let key = CellKey {
                        technique,
                        rho,
                        delta,
                        seed,
                    };
                    if table.get(&key).is_none() {
                        missing.push(key.file_stem());
                    }
                }
            }
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Input(format!("missing cells: {}", missing.join(", "))))
    }
}

fn cell_rows<'a>(table: &'a ResultTable, axes: &Axes, technique: Technique, rho: f64, delta: Option<f64>) -> Vec<&'a ResultRow> {
    axes.seeds
        .iter()
        .filter_map(|&seed| {
            table.get(&CellKey {
                technique,
                rho,
                delta,
                seed,
            })
        })
        .filter(|r| r.is_ok())
        .collect()
}

fn accuracy_stats(rows: &[&ResultRow]) -> SeedStats {
    SeedStats::of(&rows.iter().map(|r| r.final_accuracy).collect::<Vec<_>>())
}

/// Index of the highest mean, ties to the earliest; NaN means never win.
fn best_index(stats: &[SeedStats]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in stats.iter().enumerate() {
        if s.mean.is_nan() {
            continue;
        }
        if best.map_or(true, |b| s.mean > stats[b].mean) {
            best = Some(i);
        }
    }
    best
}

pub fn accuracy_vs_rho(table: &ResultTable) -> Result<Vec<RhoPoint>> {
    let axes = axes(table)?;
    check_coverage(table, &axes, &axes.techniques)?;
    let mut out = Vec::new();
    for &t in &axes.techniques {
        for delta in deltas_for(t, &axes) {
            for &rho in &axes.rhos {
                out.push(RhoPoint {
                    curve: t.to_string(),
                    delta,
                    rho,
                    accuracy: accuracy_stats(&cell_rows(table, &axes, t, rho, delta)),
                });
            }
        }
    }
    if axes.techniques.contains(&Technique::FlexRel) {
        for &rho in &axes.rhos {
            let stats: Vec<SeedStats> = axes
                .deltas
                .iter()
                .map(|&d| accuracy_stats(&cell_rows(table, &axes, Technique::FlexRel, rho, Some(d))))
                .collect();
            if let Some(i) = best_index(&stats) {
                out.push(RhoPoint {
                    curve: "flexrel_best".into(),
                    delta: Some(axes.deltas[i]),
                    rho,
                    accuracy: stats[i],
                });
            }
        }
    }
    Ok(out)
}

pub fn accuracy_vs_delta(table: &ResultTable) -> Result<Vec<DeltaPoint>> {
    let axes = axes(table)?;
    if !axes.techniques.contains(&Technique::FlexRel) {
        return Err(Error::Input("accuracy_vs_delta needs flexrel cells".into()));
    }
    check_coverage(table, &axes, &[Technique::FlexRel])?;
    let mut out = Vec::new();
    for &rho in &axes.rhos {
        let stats: Vec<SeedStats> = axes
            .deltas
            .iter()
            .map(|&d| accuracy_stats(&cell_rows(table, &axes, Technique::FlexRel, rho, Some(d))))
            .collect();
        let best = best_index(&stats);
        for (i, (&delta, s)) in axes.deltas.iter().zip(&stats).enumerate() {
            out.push(DeltaPoint {
                rho,
                delta,
                accuracy: *s,
                best: best == Some(i),
            });
        }
    }
    Ok(out)
}

pub fn time_vs_target(table: &ResultTable) -> Result<Vec<TimePoint>> {
    let axes = axes(table)?;
    if table.targets.is_empty() {
        return Err(Error::Input("result table has no accuracy targets".into()));
    }
    check_coverage(table, &axes, &axes.techniques)?;
    let mut out = Vec::new();
    for &technique in &axes.techniques {
        // (rho, delta, mean final accuracy) of every configuration
        let configs: Vec<(f64, Option<f64>, f64)> = axes
            .rhos
            .iter()
            .flat_map(|&rho| deltas_for(technique, &axes).into_iter().map(move |d| (rho, d)))
            .map(|(rho, d)| (rho, d, accuracy_stats(&cell_rows(table, &axes, technique, rho, d)).mean))
            .collect();
        for &target in &table.targets {
            let mut chosen: Option<(f64, Option<f64>, f64)> = None;
            for &(rho, d, mean) in &configs {
                if !(mean >= target) {
                    continue;
                }
                let better = match chosen {
                    None => true,
                    Some((r, _, m)) => rho > r || (rho == r && mean > m),
                };
                if better {
                    chosen = Some((rho, d, mean));
                }
            }
            let mut point = TimePoint {
                technique,
                target,
                rho: None,
                delta: None,
                reached: 0,
                t_device: f64::NAN,
                t_server: f64::NAN,
                t_up: f64::NAN,
                t_down: f64::NAN,
                t_rel: f64::NAN,
                total: f64::NAN,
                bytes: f64::NAN,
            };
            if let Some((rho, delta, _)) = chosen {
                point.rho = Some(rho);
                point.delta = delta;
                let reached: Vec<_> = cell_rows(table, &axes, technique, rho, delta)
                    .into_iter()
                    .filter_map(|r| match r.target(target) {
                        Some(TimeToAccuracy::Reached { components, bytes, .. }) => Some((*components, *bytes)),
                        _ => None,
                    })
                    .collect();
                if !reached.is_empty() {
                    let n = reached.len() as f64;
                    let mean = |f: fn(&crate::splitsim::EpochTimeBreakdown) -> f64| {
                        reached.iter().map(|(c, _)| f(c)).sum::<f64>() / n
                    };
                    point.reached = reached.len();
                    point.t_device = mean(|c| c.t_device_compute);
                    point.t_server = mean(|c| c.t_server_compute);
                    point.t_up = mean(|c| c.t_uplink);
                    point.t_down = mean(|c| c.t_downlink);
                    point.t_rel = mean(|c| c.t_relevance);
                    point.total = point.t_device + point.t_server + point.t_up + point.t_down + point.t_rel;
                    point.bytes = reached.iter().map(|(_, b)| *b as f64).sum::<f64>() / n;
                }
            }
            out.push(point);
        }
    }
    Ok(out)
}

fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| v.to_string())
}

fn dat(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        v.to_string()
    }
}

/// Writes `<kind>.csv` and a gnuplot data file `<kind>.dat` (one indexed
/// block per curve) into `dir`; returns the written paths.
pub fn emit_curves(table: &ResultTable, kind: CurveKind, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{kind}.csv"));
    let dat_path = dir.join(format!("{kind}.dat"));
    let mut w = csv::Writer::from_path(&csv_path)?;
    let mut d = Vec::new();
    match kind {
        CurveKind::AccuracyVsRho => {
            let points = accuracy_vs_rho(table)?;
            w.write_record(["curve", "delta", "rho", "mean", "min", "max", "std", "n"])?;
            let mut current: Option<(String, Option<f64>)> = None;
            for p in &points {
                let s = &p.accuracy;
                w.write_record([
                    p.curve.clone(),
                    opt(p.delta),
                    p.rho.to_string(),
                    num(s.mean),
                    num(s.min),
                    num(s.max),
                    num(s.std),
                    s.n.to_string(),
                ])?;
                let id = (p.curve.clone(), if p.curve == "flexrel_best" { None } else { p.delta });
                if current.as_ref() != Some(&id) {
                    if current.is_some() {
                        writeln!(d, "\n")?;
                    }
                    writeln!(d, "# curve={} delta={}", id.0, opt(id.1))?;
                    writeln!(d, "# rho mean min max{}", if p.curve == "flexrel_best" { " delta" } else { "" })?;
                    current = Some(id);
                }
                let extra = if p.curve == "flexrel_best" { format!(" {}", opt(p.delta)) } else { String::new() };
                writeln!(d, "{} {} {} {}{extra}", p.rho, dat(s.mean), dat(s.min), dat(s.max))?;
            }
        }
        CurveKind::AccuracyVsDelta => {
            let points = accuracy_vs_delta(table)?;
            w.write_record(["rho", "delta", "mean", "min", "max", "std", "n", "best"])?;
            let mut current: Option<f64> = None;
            for p in &points {
                let s = &p.accuracy;
                w.write_record([
                    p.rho.to_string(),
                    p.delta.to_string(),
                    num(s.mean),
                    num(s.min),
                    num(s.max),
                    num(s.std),
                    s.n.to_string(),
                    u8::from(p.best).to_string(),
                ])?;
                if current != Some(p.rho) {
                    if current.is_some() {
                        writeln!(d, "\n")?;
                    }
                    writeln!(d, "# rho={}\n# delta mean min max best", p.rho)?;
                    current = Some(p.rho);
                }
                writeln!(d, "{} {} {} {} {}", p.delta, dat(s.mean), dat(s.min), dat(s.max), u8::from(p.best))?;
            }
        }
        CurveKind::TimeVsTarget => {
            let points = time_vs_target(table)?;
            w.write_record([
                "technique", "target", "rho", "delta", "n_reached", "t_device", "t_server", "t_up", "t_down", "t_rel",
                "total", "bytes",
            ])?;
            let mut current: Option<Technique> = None;
            for p in &points {
                w.write_record([
                    p.technique.to_string(),
                    p.target.to_string(),
                    p.rho.map(|r| r.to_string()).unwrap_or_default(),
                    opt(p.delta),
                    p.reached.to_string(),
                    num(p.t_device),
                    num(p.t_server),
                    num(p.t_up),
                    num(p.t_down),
                    num(p.t_rel),
                    num(p.total),
                    num(p.bytes),
                ])?;
                if current != Some(p.technique) {
                    if current.is_some() {
                        writeln!(d, "\n")?;
                    }
                    writeln!(d, "# technique={}", p.technique)?;
                    writeln!(d, "# target t_device t_server t_up t_down t_rel total bytes")?;
                    current = Some(p.technique);
                }
                writeln!(
                    d,
                    "{} {} {} {} {} {} {} {}",
                    p.target,
                    dat(p.t_device),
                    dat(p.t_server),
                    dat(p.t_up),
                    dat(p.t_down),
                    dat(p.t_rel),
                    dat(p.total),
                    dat(p.bytes)
                )?;
            }
        }
    }
    w.flush()?;
    fs::write(&dat_path, d)?;
    Ok(vec![csv_path, dat_path])
}
