//! Datasets: IDX image/label files and a seeded synthetic pattern generator.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

/// Images (`N×C×H×W`, values in `[0, 1]`) with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 || images.rows() != labels.len() {
            return Err(Error::dim("images vs labels", images.shape(), &[labels.len()]));
        }
        Ok(LabeledImages { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledImages {
        LabeledImages {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthSpec),
    Idx {
        train_images: String,
        train_labels: String,
        test_images: String,
        test_labels: String,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SynthSpec::default())
    }
}

/// Train and test splits over the same label space.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: LabeledImages,
    pub test: LabeledImages,
    pub classes: usize,
    pub source: DataSource,
}

impl Dataset {
    pub fn new(train: LabeledImages, test: LabeledImages, classes: usize, source: DataSource) -> Result<Self> {
        if train.sample_shape() != test.sample_shape() {
            return Err(Error::dim("train vs test sample shape", train.sample_shape(), test.sample_shape()));
        }
        if let Some(&bad) = train.labels.iter().chain(&test.labels).find(|&&l| l >= classes) {
            return Err(Error::Input(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Dataset {
            train,
            test,
            classes,
            source,
        })
    }

    pub fn load(source: &DataSource, seed: u64) -> Result<Self> {
        match source {
            DataSource::Synthetic(spec) => synth_dataset(spec, seed),
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = load_idx(train_images, train_labels)?;
                let test = load_idx(test_images, test_labels)?;
                let classes = train.labels.iter().chain(&test.labels).max().map_or(1, |&m| m + 1);
                Dataset::new(train, test, classes, source.clone())
            }
        }
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Parse("IDX header truncated".into()))
}

/// Parses an IDX3 image file; pixels are scaled to `[0, 1]` and shaped
/// `N×1×rows×cols`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse(format!("bad IDX image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let payload = &bytes[16..];
    let expected = n * rows * cols;
    if payload.len() != expected {
        return Err(Error::Parse(format!(
            "IDX image payload has {} bytes, header promises {expected}",
            payload.len()
        )));
    }
    Tensor::new(
        vec![n, 1, rows, cols],
        payload.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse(format!("bad IDX label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Parse(format!(
            "IDX label payload has {} bytes, header promises {n}",
            payload.len()
        )));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<LabeledImages> {
    let images = parse_idx_images(&fs::read(images)?)?;
    let labels = parse_idx_labels(&fs::read(labels)?)?;
    if images.rows() != labels.len() {
        return Err(Error::Parse(format!(
            "{} images but {} labels",
            images.rows(),
            labels.len()
        )));
    }
    LabeledImages::new(images, labels)
}

/// Parameters of the synthetic pattern dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub side: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 10,
            train: 1000,
            test: 500,
            side: 16,
            noise: 0.35,
        }
    }
}

/// Superposed sine gratings with additive Gaussian noise.
///
/// Each class is a distinct unordered pair of grating orientations drawn
/// from the smallest set of evenly spaced orientations with enough pairs.
/// Phase, amplitude, frequency and a small orientation jitter are random per
/// grating. Labels cycle through the classes so both splits are balanced.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 || spec.side < 4 || spec.train == 0 || spec.test == 0 {
        return Err(Error::Input(format!("invalid synthetic dataset spec {spec:?}")));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::Input("noise must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = synth_split(spec, spec.train, &mut rng)?;
    let test = synth_split(spec, spec.test, &mut rng)?;
    Dataset::new(train, test, spec.classes, DataSource::Synthetic(spec.clone()))
}

fn orientation_pairs(classes: usize) -> Vec<(usize, usize, usize)> {
    let mut k = 2;
    while k * (k - 1) / 2 < classes {
        k += 1;
    }
    (0..k)
        .flat_map(|a| (a + 1..k).map(move |b| (a, b, k)))
        .take(classes)
        .collect()
}

fn synth_split(spec: &SynthSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<LabeledImages> {
    let side = spec.side;
    let s = side as f64;
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("valid std");
    let pairs = orientation_pairs(spec.classes);
    let mut data = Vec::with_capacity(n * side * side);
    let labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    for &c in &labels {
        let (a, b, k) = pairs[c];
        let gratings: Vec<(f64, f64, f64, f64)> = [a, b]
            .iter()
            .map(|&o| {
                let theta = PI * o as f64 / k as f64 + rng.gen_range(-0.08..0.08);
                let freq = rng.gen_range(2.5..3.5) / s;
                (theta, freq, rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.6..1.0))
            })
            .collect();
        for y in 0..side {
            for x in 0..side {
                let (fx, fy) = (x as f64, y as f64);
                let v = 0.5
                    + 0.25
                        * gratings
                            .iter()
                            .map(|&(theta, freq, phase, amp)| {
                                amp * (2.0 * PI * freq * (fx * theta.cos() + fy * theta.sin()) + phase).sin()
                            })
                            .sum::<f64>();
                let noisy = if spec.noise > 0.0 { v + noise.sample(rng) } else { v };
                data.push(noisy.clamp(0.0, 1.0));
            }
        }
    }
    LabeledImages::new(Tensor::new(vec![n, 1, side, side], data)?, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, payload: usize) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend((0..payload).map(|i| (i * 8) as u8));
        b
    }

    #[test]
    fn idx_images_header_and_scaling() {
        let t = parse_idx_images(&idx_images(2, 4, 4, 32)).unwrap();
        assert_eq!(t.shape(), &[2, 1, 4, 4]);
        assert_eq!(t.data()[1], 8.0 / 255.0);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn idx_truncated_payload_is_rejected() {
        assert!(matches!(parse_idx_images(&idx_images(2, 4, 4, 31)), Err(Error::Parse(_))));
        assert!(matches!(parse_idx_images(&idx_images(2, 4, 4, 32)[..10]), Err(Error::Parse(_))));
    }

    #[test]
    fn idx_bad_magic() {
        let mut b = idx_images(1, 2, 2, 4);
        b[3] = 0x01;
        assert!(matches!(parse_idx_images(&b), Err(Error::Parse(_))));
        assert!(parse_idx_labels(&idx_images(1, 2, 2, 4)).is_err());
    }

    #[test]
    fn idx_labels() {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&3u32.to_be_bytes());
        b.extend_from_slice(&[7, 0, 2]);
        assert_eq!(parse_idx_labels(&b).unwrap(), vec![7, 0, 2]);
        assert!(parse_idx_labels(&b[..10]).is_err());
    }

    #[test]
    fn idx_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        fs::write(&ip, idx_images(3, 2, 2, 12)).unwrap();
        let mut l = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        l.extend_from_slice(&3u32.to_be_bytes());
        l.extend_from_slice(&[1, 0, 1]);
        fs::write(&lp, &l).unwrap();
        let set = load_idx(&ip, &lp).unwrap();
        assert_eq!(set.labels, vec![1, 0, 1]);
        assert_eq!(set.images.shape(), &[3, 1, 2, 2]);

        l[7] = 2;
        l.truncate(10);
        fs::write(&lp, &l).unwrap();
        assert!(load_idx(&ip, &lp).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let spec = SynthSpec {
            classes: 4,
            train: 100,
            test: 40,
            ..SynthSpec::default()
        };
        let a = synth_dataset(&spec, 7).unwrap();
        let b = synth_dataset(&spec, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_dataset(&spec, 8).unwrap());
        assert_eq!(a.train.images.shape(), &[100, 1, 16, 16]);
        for c in 0..4 {
            assert_eq!(a.train.labels.iter().filter(|&&l| l == c).count(), 25);
        }
        assert!(a.train.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a.train.images.row(0), a.test.images.row(0));
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let imgs = LabeledImages::new(Tensor::zeros(&[1, 1, 2, 2]), vec![3]).unwrap();
        assert!(Dataset::new(imgs.clone(), imgs, 3, DataSource::default()).is_err());
    }
}
