//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "FXPR"
//! version      u32      currently 1
//! payload_len  u64
//! payload      payload_len bytes
//! crc32        u32      CRC-32 (IEEE) of the payload bytes
//! ```
//!
//! The payload is a sequence of sections:
//!
//! ```text
//! input shape   u32 rank, rank × u64
//! cut index     u64
//! epoch         u64
//! layers        u32 count, then per layer:
//!                 u8 tag (0 dense, 1 conv2d, 2 relu, 3 maxpool2d, 4 flatten, 5 softmax_ce)
//!                 tag fields as u64 (dense: inputs, outputs;
//!                   conv2d: in, out, kh, kw, stride, padding; maxpool2d: size, stride;
//!                   softmax_ce: classes)
//!                 parametric layers: weight then bias as f64 (count implied by shape)
//!                 u8 mask flag; if 1: u32 units, one u8 (0/1) per unit
//! optimizer     u64 step, u32 slots, per slot: u64 len, len × f64 first, len × f64 second
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layer::{ConvGeometry, Layer, LayerKind};
use crate::network::Network;
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FXPR";
pub const FORMAT_VERSION: u32 = 1;

/// A network together with its training progress.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub epoch: u64,
    pub optimizer: AdamState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut p = Vec::new();
        let net = &self.network;
        put_u32(&mut p, net.input_shape().len() as u32);
        for &d in net.input_shape() {
            put_u64(&mut p, d as u64);
        }
        put_u64(&mut p, net.cut_index() as u64);
        put_u64(&mut p, self.epoch);
        put_u32(&mut p, net.len() as u32);
        for (i, layer) in net.layers().iter().enumerate() {
            let (tag, fields): (u8, Vec<usize>) = match *layer.kind() {
                LayerKind::Dense { inputs, outputs } => (0, vec![inputs, outputs]),
                LayerKind::Conv2d(g) => (
                    1,
                    vec![g.in_channels, g.out_channels, g.kernel_h, g.kernel_w, g.stride, g.padding],
                ),
                LayerKind::Relu => (2, vec![]),
                LayerKind::MaxPool2d { size, stride } => (3, vec![size, stride]),
                LayerKind::Flatten => (4, vec![]),
                LayerKind::SoftmaxCrossEntropy { classes } => (5, vec![classes]),
            };
            p.push(tag);
            for f in fields {
                put_u64(&mut p, f as u64);
            }
            if let Some(params) = layer.params() {
                put_f64s(&mut p, params.weight.data());
                put_f64s(&mut p, params.bias.data());
            }
            match net.mask(i) {
                Some(mask) => {
                    p.push(1);
                    put_u32(&mut p, mask.len() as u32);
                    p.extend(mask.iter().map(|&a| a as u8));
                }
                None => p.push(0),
            }
        }
        put_u64(&mut p, self.optimizer.step);
        put_u32(&mut p, self.optimizer.first.len() as u32);
        for (m, v) in self.optimizer.first.iter().zip(&self.optimizer.second) {
            put_u64(&mut p, m.len() as u64);
            put_f64s(&mut p, m);
            put_f64s(&mut p, v);
        }

        let mut out = Vec::with_capacity(p.len() + 20);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u64(&mut out, p.len() as u64);
        out.extend_from_slice(&p);
        put_u32(&mut out, crc32fast::hash(&p));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated);
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let mut header = Reader::new(&bytes[4..]);
        let version = header.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let len = usize::try_from(header.u64()?).map_err(|_| Error::Truncated)?;
        let payload = header.take(len)?;
        let stored = header.u32()?;
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        if !header.is_empty() {
            return Err(Error::Parse("trailing bytes after checksum".into()));
        }
        parse_payload(payload)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

/// Saves a bare network (epoch 0, empty optimizer state).
pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint {
        network: net.clone(),
        epoch: 0,
        optimizer: AdamState::default(),
    }
    .save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    Ok(Checkpoint::load(path)?.network)
}

fn parse_payload(payload: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(payload);
    let rank = r.u32()? as usize;
    let input_shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let cut_index = r.usize()?;
    let epoch = r.u64()?;
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count);
    let mut masks = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = match r.u8()? {
            0 => LayerKind::Dense {
                inputs: r.usize()?,
                outputs: r.usize()?,
            },
            1 => LayerKind::Conv2d(ConvGeometry {
                in_channels: r.usize()?,
                out_channels: r.usize()?,
                kernel_h: r.usize()?,
                kernel_w: r.usize()?,
                stride: r.usize()?,
                padding: r.usize()?,
            }),
            2 => LayerKind::Relu,
            3 => LayerKind::MaxPool2d {
                size: r.usize()?,
                stride: r.usize()?,
            },
            4 => LayerKind::Flatten,
            5 => LayerKind::SoftmaxCrossEntropy { classes: r.usize()? },
            t => return Err(Error::Parse(format!("unknown layer tag {t}"))),
        };
        let layer = match kind.weight_shape() {
            Some(ws) => {
                let wlen = ws.iter().product();
                let weight = Tensor::new(ws.clone(), r.f64s(wlen)?)?;
                let bias = Tensor::new(vec![ws[0]], r.f64s(ws[0])?)?;
                Layer::with_params(kind, weight, bias)?
            }
            None => Layer::new(kind),
        };
        layers.push(layer);
        masks.push(match r.u8()? {
            0 => None,
            1 => {
                let units = r.u32()? as usize;
                let raw = r.take(units)?;
                Some(raw.iter().map(|&b| b != 0).collect())
            }
            f => return Err(Error::Parse(format!("bad mask flag {f}"))),
        });
    }
    let step = r.u64()?;
    let slots = r.u32()? as usize;
    let mut optimizer = AdamState {
        step,
        first: Vec::with_capacity(slots),
        second: Vec::with_capacity(slots),
    };
    for _ in 0..slots {
        let len = r.usize()?;
        optimizer.first.push(r.f64s(len)?);
        optimizer.second.push(r.f64s(len)?);
    }
    if !r.is_empty() {
        return Err(Error::Parse("unexpected bytes at end of payload".into()));
    }
    Ok(Checkpoint {
        network: Network::from_parts(input_shape, layers, masks, cut_index)?,
        epoch,
        optimizer,
    })
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf }
    }

    fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Truncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Parse("value exceeds usize".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or(Error::Truncated)?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
