use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DataSource, Dataset};
use crate::error::{Error, Result};
use crate::layer::LayerKind;
use crate::network::Network;
use crate::pruning::Technique;
use crate::splitsim::SplitModels;
use crate::training::TrainConfig;

/// `[0, step, 2·step, …]` up to `last`, built from integer multiples so the
/// values print without rounding noise.
pub fn grid(last_tenths: usize) -> Vec<f64> {
    (0..=last_tenths).map(|i| i as f64 / 10.0).collect()
}

/// Everything a sweep needs; loaded from TOML, then narrowed by CLI flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub techniques: Vec<Technique>,
    pub rhos: Vec<f64>,
    /// Only used by the flexrel technique.
    pub deltas: Vec<f64>,
    /// Accuracy targets for time-to-accuracy.
    pub targets: Vec<f64>,
    /// Worker threads for independent cells.
    pub workers: usize,
    pub cut_index: usize,
    /// Seed of the synthetic dataset; the run seeds only vary training.
    pub data_seed: u64,
    pub data: DataSource,
    /// Layer list; defaults to the desk CNN sized for the dataset.
    pub model: Option<Vec<LayerKind>>,
    pub train: TrainConfig,
    pub split: SplitModels,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            out_dir: PathBuf::from("results"),
            seeds: vec![1, 2, 3],
            techniques: Technique::ALL.to_vec(),
            rhos: grid(8),
            deltas: grid(10),
            targets: grid(8)[1..].to_vec(),
            workers: 1,
            cut_index: 3,
            data_seed: 0,
            data: DataSource::default(),
            model: None,
            train: TrainConfig::default(),
            split: SplitModels::default(),
        }
    }
}

/// Command-line overrides; each set flag replaces the matching list by a
/// single value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub technique: Option<Technique>,
    pub rho: Option<f64>,
    pub delta: Option<f64>,
    pub dataset: Option<String>,
    pub cut_index: Option<usize>,
}

/// Standard IDX file names inside a dataset directory.
pub const IDX_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// `synthetic` or a directory holding the four [`IDX_FILES`].
pub fn parse_dataset(spec: &str) -> Result<DataSource> {
    if spec == "synthetic" {
        return Ok(DataSource::default());
    }
    let dir = Path::new(spec);
    if !dir.is_dir() {
        return Err(Error::Config(format!(
            "dataset must be `synthetic` or a directory with IDX files, got {spec}"
        )));
    }
    let path = |name: &str| dir.join(name).to_string_lossy().into_owned();
    Ok(DataSource::Idx {
        train_images: path(IDX_FILES[0]),
        train_labels: path(IDX_FILES[1]),
        test_images: path(IDX_FILES[2]),
        test_labels: path(IDX_FILES[3]),
    })
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(dir) = &o.out_dir {
            self.out_dir = dir.clone();
        }
        if let Some(seed) = o.seed {
            self.seeds = vec![seed];
        }
        if let Some(t) = o.technique {
            self.techniques = vec![t];
        }
        if let Some(r) = o.rho {
            self.rhos = vec![r];
        }
        if let Some(d) = o.delta {
            self.deltas = vec![d];
        }
        if let Some(ds) = &o.dataset {
            self.data = parse_dataset(ds)?;
        }
        if let Some(c) = o.cut_index {
            self.cut_index = c;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.seeds.is_empty() || self.techniques.is_empty() || self.rhos.is_empty() {
            return bad("seeds, techniques and rhos must be non-empty");
        }
        if self.techniques.contains(&Technique::FlexRel) && self.deltas.is_empty() {
            return bad("deltas must be non-empty for flexrel");
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct");
        }
        if self.techniques.iter().collect::<BTreeSet<_>>().len() != self.techniques.len() {
            return bad("techniques must be distinct");
        }
        if self.rhos.iter().any(|r| !(0.0..1.0).contains(r)) {
            return bad("every rho must lie in [0, 1)");
        }
        if self.deltas.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return bad("every delta must lie in [0, 1]");
        }
        if self.targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return bad("every target must lie in [0, 1]");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        self.train.validate()?;
        self.split.validate()?;
        if self.techniques.iter().any(|t| t.needs_relevance()) && self.train.epochs_dense == 0 {
            return bad("relevance techniques need epochs_dense >= 1");
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        Dataset::load(&self.data, self.data_seed)
    }

    /// Fresh network for `seed`, shaped for `data`.
    pub fn build_network(&self, data: &Dataset, seed: u64) -> Result<Network> {
        let input = data.train.sample_shape().to_vec();
        let kinds = match &self.model {
            Some(k) => k.clone(),
            None => {
                if input.len() != 3 || input[0] != 1 || input[1] != input[2] || input[1] % 8 != 0 {
                    return Err(Error::Config(format!(
                        "default model needs square single-channel inputs with side divisible by 8, got {input:?}"
                    )));
                }
                Network::desk_cnn_kinds(input[1], data.classes)
            }
        };
        Network::from_kinds(input, &kinds, self.cut_index, seed)
    }
}
