//! Per-filter scores and structured prune plans.
//!
//! Each prunable unit gets a raw magnitude (mean `|w|`) and a raw relevance
//! (mean parameter relevance), both min-max normalized to `[0, 1]` within a
//! scope. The combined score is
//!
//! ```text
//! s = (1 − δ)·M + δ·R
//! ```
//!
//! so `δ = 0` ranks by magnitude alone and `δ = 1` by relevance alone. A unit
//! with low magnitude and high relevance scores close to `δ`.
//!
//! Note the convention: the alternative form `δ·M + (1 − δ)·R` swaps the two
//! endpoints and is not what is implemented.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::relevance::{layer_parameter_relevance, RelevanceRecord};

/// How filters are ranked for removal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Technique {
    Magnitude,
    Relevance,
    #[serde(rename = "flexrel")]
    FlexRel,
}

impl Technique {
    pub const ALL: [Technique; 3] = [Technique::Magnitude, Technique::Relevance, Technique::FlexRel];

    pub fn needs_relevance(self) -> bool {
        !matches!(self, Technique::Magnitude)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Technique::Magnitude => "magnitude",
            Technique::Relevance => "relevance",
            Technique::FlexRel => "flexrel",
        }
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Technique {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(Technique::Magnitude),
            "relevance" => Ok(Technique::Relevance),
            "flexrel" => Ok(Technique::FlexRel),
            other => Err(Error::Input(format!("unknown technique {other:?}"))),
        }
    }
}

/// Where min-max normalization takes its min and max.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    #[default]
    PerLayer,
    Global,
}

/// Raw per-unit statistic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitScore {
    pub layer: usize,
    pub unit: usize,
    pub value: f64,
    /// Parameters removed together with the unit (weights plus bias).
    pub params: usize,
}

/// Mean of `values[i]` over the entries of each active unit that are not
/// frozen; 0 when every entry is frozen.
fn unit_means(net: &Network, layer: usize, values: &[f64], transform: impl Fn(f64) -> f64) -> Vec<UnitScore> {
    let kind = net.layer(layer).kind();
    let fan_in = kind.fan_in().expect("parametric");
    let frozen = net.frozen_weights(layer).expect("parametric");
    let mask = net.mask(layer).expect("prunable");
    let params = net.params_per_unit(layer);
    mask.iter()
        .enumerate()
        .filter(|(_, &active)| active)
        .map(|(unit, _)| {
            let range = unit * fan_in..(unit + 1) * fan_in;
            let (sum, count) = values[range.clone()]
                .iter()
                .zip(&frozen[range])
                .filter(|(_, &f)| !f)
                .fold((0.0, 0usize), |(s, c), (&v, _)| (s + transform(v), c + 1));
            UnitScore {
                layer,
                unit,
                value: if count == 0 { 0.0 } else { sum / count as f64 },
                params,
            }
        })
        .collect()
}

fn require_prunable(net: &Network) -> Result<Vec<usize>> {
    let layers = net.prunable_layers();
    if layers.is_empty() {
        return Err(Error::Input("network has no prunable layer".into()));
    }
    Ok(layers)
}

/// Mean absolute weight of every active prunable unit.
pub fn magnitude_scores(net: &Network) -> Result<Vec<UnitScore>> {
    Ok(require_prunable(net)?
        .into_iter()
        .flat_map(|l| {
            let w = net.layer(l).params().expect("parametric").weight.data();
            unit_means(net, l, w, f64::abs)
        })
        .collect())
}

/// Mean parameter relevance of every active prunable unit.
pub fn relevance_scores(net: &Network, record: &RelevanceRecord) -> Result<Vec<UnitScore>> {
    let mut out = Vec::new();
    for l in require_prunable(net)? {
        let rel = layer_parameter_relevance(record, l)?;
        out.extend(unit_means(net, l, rel.data(), |v| v));
    }
    Ok(out)
}

/// Min-max normalization of one scope; a constant scope maps to 0.5.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![0.5; values.len()];
    }
    let span = max - min;
    values.iter().map(|&v| ((v - min) / span).clamp(0.0, 1.0)).collect()
}

/// Normalizes raw unit statistics per layer or across all layers, keeping the
/// input order.
pub fn normalize_scoped(raw: &[UnitScore], scope: NormScope) -> Vec<f64> {
    match scope {
        NormScope::Global => normalize(&raw.iter().map(|s| s.value).collect::<Vec<_>>()),
        NormScope::PerLayer => {
            let mut by_layer: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, s) in raw.iter().enumerate() {
                by_layer.entry(s.layer).or_default().push(i);
            }
            let mut out = vec![0.0; raw.len()];
            for idx in by_layer.values() {
                let vals: Vec<f64> = idx.iter().map(|&i| raw[i].value).collect();
                for (&i, v) in idx.iter().zip(normalize(&vals)) {
                    out[i] = v;
                }
            }
            out
        }
    }
}

/// `s = (1 − δ)·M + δ·R`.
pub fn combine(magnitude: f64, relevance: f64, delta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Input(format!("weighting factor {delta} outside [0, 1]")));
    }
    Ok((1.0 - delta) * magnitude + delta * relevance)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub layer: usize,
    pub unit: usize,
    pub raw_magnitude: f64,
    pub raw_relevance: Option<f64>,
    pub magnitude: f64,
    pub relevance: Option<f64>,
    pub score: f64,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    /// Normalizes and combines raw statistics according to `technique`.
    /// `relevance` must list the same units as `magnitude` in the same order
    /// whenever the technique needs it.
    pub fn build(
        magnitude: &[UnitScore],
        relevance: Option<&[UnitScore]>,
        technique: Technique,
        delta: f64,
        scope: NormScope,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&delta) {
            return Err(Error::Input(format!("weighting factor {delta} outside [0, 1]")));
        }
        if let Some(r) = relevance {
            let same_units = r.len() == magnitude.len()
                && r.iter().zip(magnitude).all(|(a, b)| (a.layer, a.unit) == (b.layer, b.unit));
            if !same_units {
                return Err(Error::Consistency("magnitude and relevance cover different units".into()));
            }
        } else if technique.needs_relevance() {
            return Err(Error::Input(format!("technique {technique} needs relevance scores")));
        }
        let m_norm = normalize_scoped(magnitude, scope);
        let r_norm = relevance.map(|r| normalize_scoped(r, scope));
        let rows = magnitude
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let r = r_norm.as_ref().map(|r| r[i]);
                let score = match technique {
                    Technique::Magnitude => m_norm[i],
                    Technique::Relevance => r.expect("checked above"),
                    Technique::FlexRel => combine(m_norm[i], r.expect("checked above"), delta)?,
                };
                Ok(ScoreRow {
                    layer: m.layer,
                    unit: m.unit,
                    raw_magnitude: m.value,
                    raw_relevance: relevance.map(|r| r[i].value),
                    magnitude: m_norm[i],
                    relevance: r,
                    score,
                    params: m.params,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ScoreTable { rows })
    }

    /// Table with explicit scores, e.g. for replaying an external ranking.
    pub fn from_scores(scores: &[UnitScore]) -> Self {
        ScoreTable {
            rows: scores
                .iter()
                .map(|s| ScoreRow {
                    layer: s.layer,
                    unit: s.unit,
                    raw_magnitude: s.value,
                    raw_relevance: None,
                    magnitude: s.value,
                    relevance: None,
                    score: s.value,
                    params: s.params,
                })
                .collect(),
        }
    }

    /// CSV with columns `layer,unit,raw_m,raw_r,M,R,s,params`; relevance
    /// columns are empty when relevance was not computed.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "layer,unit,raw_m,raw_r,M,R,s,params")?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.layer,
                r.unit,
                r.raw_magnitude,
                opt(r.raw_relevance),
                r.magnitude,
                opt(r.relevance),
                r.score,
                r.params
            )?;
        }
        Ok(())
    }
}

/// Units selected for removal, in removal order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunePlan {
    pub units: Vec<(usize, usize)>,
    pub requested_fraction: f64,
    pub achieved_fraction: f64,
}

impl PrunePlan {
    pub fn apply(&self, net: &mut Network) -> Result<()> {
        for &(layer, unit) in &self.units {
            net.apply_mask(layer, unit)?;
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

/// Greedily removes the lowest-scoring units (ties: lower layer, then lower
/// unit) until at least `rho` of the table's parameters are removed, never
/// removing the last unit of a layer.
pub fn plan_prune(scores: &ScoreTable, rho: f64) -> Result<PrunePlan> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Input(format!("pruning factor {rho} outside [0, 1)")));
    }
    let total: usize = scores.rows.iter().map(|r| r.params).sum();
    if total == 0 {
        return Err(Error::Input("score table is empty".into()));
    }
    let mut remaining: BTreeMap<usize, usize> = BTreeMap::new();
    for r in &scores.rows {
        *remaining.entry(r.layer).or_default() += 1;
    }
    let mut order: Vec<&ScoreRow> = scores.rows.iter().collect();
    order.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then(a.layer.cmp(&b.layer))
            .then(a.unit.cmp(&b.unit))
    });

    let mut removed = 0usize;
    let mut units = Vec::new();
    for row in order {
        if removed as f64 / total as f64 >= rho {
            break;
        }
        let left = remaining.get_mut(&row.layer).expect("counted");
        if *left <= 1 {
            continue;
        }
        *left -= 1;
        removed += row.params;
        units.push((row.layer, row.unit));
    }
    let achieved = removed as f64 / total as f64;
    if achieved.partial_cmp(&rho) == Some(Ordering::Less) {
        let mut keep: BTreeMap<usize, usize> = BTreeMap::new();
        for r in &scores.rows {
            let k = keep.entry(r.layer).or_insert(usize::MAX);
            *k = (*k).min(r.params);
        }
        let max_removable = total - keep.values().sum::<usize>();
        return Err(Error::Unreachable {
            requested: rho,
            max_achievable: max_removable as f64 / total as f64,
        });
    }
    Ok(PrunePlan {
        units,
        requested_fraction: rho,
        achieved_fraction: achieved,
    })
}
