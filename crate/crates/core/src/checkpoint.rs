//! Portable model files: `PFXF` magic, little-endian `u32` version and
//! header length, a plain-text `key = value` header, then every parameter
//! as little-endian `f32` in module order.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::decoders::Descriptor;
use crate::flowode::NormStats;
use crate::nn::Module;
use crate::numerics::Real;

pub const MAGIC: &[u8; 4] = b"PFXF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("architecture descriptor mismatch: {0}")]
    DescriptorMismatch(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Dg,
    Af,
    Sr,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Dg => "DG",
            ModelKind::Af => "AF",
            ModelKind::Sr => "SR",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "DG" => Some(ModelKind::Dg),
            "AF" => Some(ModelKind::Af),
            "SR" => Some(ModelKind::Sr),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub descriptor: Descriptor,
    pub norm: NormStats,
    pub seed: u64,
    pub params: Vec<ParamRecord>,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn split_floats(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| CheckpointError::Header(format!("bad number {x:?}"))))
        .collect()
}

impl Checkpoint {
    /// Snapshot a module's parameters.
    pub fn capture<S: Real>(kind: ModelKind, descriptor: Descriptor, norm: NormStats, seed: u64, module: &impl Module<S>) -> Self {
        let params = module
            .named_params()
            .into_iter()
            .map(|p| ParamRecord {
                name: p.name,
                shape: p.tensor.shape().to_vec(),
                values: p.tensor.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        Self {
            kind,
            descriptor,
            norm,
            seed,
            params,
        }
    }

    /// Copy stored values into `module`, which must have exactly the stored
    /// parameter names and shapes.
    pub fn restore_into<S: Real>(&self, module: &impl Module<S>) -> Result<()> {
        let named = module.named_params();
        if named.len() != self.params.len() {
            return Err(CheckpointError::DescriptorMismatch(format!(
                "{} stored parameters, model has {}",
                self.params.len(),
                named.len()
            )));
        }
        for (p, r) in named.iter().zip(&self.params) {
            if p.name != r.name || p.tensor.shape() != r.shape.as_slice() {
                return Err(CheckpointError::DescriptorMismatch(format!(
                    "parameter {} {:?} vs stored {} {:?}",
                    p.name,
                    p.tensor.shape(),
                    r.name,
                    r.shape
                )));
            }
        }
        for (p, r) in named.iter().zip(&self.params) {
            let v: Vec<S> = r.values.iter().map(|&x| S::lit(x as f64)).collect();
            p.tensor
                .set_data(&v)
                .map_err(|e| CheckpointError::DescriptorMismatch(e.to_string()))?;
        }
        Ok(())
    }

    pub fn expect(&self, kind: ModelKind, descriptor: Option<&Descriptor>) -> Result<()> {
        if self.kind != kind {
            return Err(CheckpointError::DescriptorMismatch(format!(
                "kind {} where {} was expected",
                self.kind.tag(),
                kind.tag()
            )));
        }
        if let Some(d) = descriptor {
            if d != &self.descriptor {
                return Err(CheckpointError::DescriptorMismatch("architecture settings differ".into()));
            }
        }
        Ok(())
    }

    fn header(&self) -> String {
        let mut h = String::new();
        h.push_str(&format!("kind = {}\n", self.kind.tag()));
        h.push_str(&format!("seed = {}\n", self.seed));
        h.push_str(&format!("norm.mean = {}\n", join(&self.norm.mean)));
        h.push_str(&format!("norm.std = {}\n", join(&self.norm.std)));
        for (k, v) in &self.descriptor {
            h.push_str(&format!("arch.{k} = {v}\n"));
        }
        for p in &self.params {
            let shape: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
            h.push_str(&format!("param = {} {}\n", p.name, shape.join("x")));
        }
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header();
        let n: usize = self.params.iter().map(|p| p.values.len()).sum();
        let mut out = Vec::with_capacity(12 + header.len() + 4 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for p in &self.params {
            for v in &p.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 12 {
            return Err(CheckpointError::Truncated("fixed header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if body.len() < hlen {
            return Err(CheckpointError::Truncated("text header".into()));
        }
        let header = std::str::from_utf8(&body[..hlen]).map_err(|_| CheckpointError::Header("header is not UTF-8".into()))?;
        let mut kind = None;
        let mut seed = None;
        let mut mean = None;
        let mut std = None;
        let mut descriptor = Vec::new();
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        for line in header.lines() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| CheckpointError::Header(format!("line {line:?}")))?;
            match k {
                "kind" => kind = Some(ModelKind::parse(v).ok_or_else(|| CheckpointError::Header(format!("kind {v}")))?),
                "seed" => seed = Some(v.parse().map_err(|_| CheckpointError::Header(format!("seed {v}")))?),
                "norm.mean" => mean = Some(split_floats(v)?),
                "norm.std" => std = Some(split_floats(v)?),
                "param" => {
                    let (name, dims) = v
                        .rsplit_once(' ')
                        .ok_or_else(|| CheckpointError::Header(format!("param {v}")))?;
                    let shape = dims
                        .split('x')
                        .map(|d| d.parse().map_err(|_| CheckpointError::Header(format!("shape {dims}"))))
                        .collect::<Result<Vec<usize>>>()?;
                    shapes.push((name.to_string(), shape));
                }
                _ => match k.strip_prefix("arch.") {
                    Some(a) => descriptor.push((a.to_string(), v.to_string())),
                    None => return Err(CheckpointError::Header(format!("unknown key {k}"))),
                },
            }
        }
        let missing = |what: &str| CheckpointError::Header(format!("missing {what}"));
        let (mean, std) = (mean.ok_or_else(|| missing("norm.mean"))?, std.ok_or_else(|| missing("norm.std"))?);
        if mean.len() != std.len() {
            return Err(CheckpointError::Header("norm mean/std lengths differ".into()));
        }
        let mut payload = &body[hlen..];
        let mut params = Vec::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            if payload.len() < 4 * n {
                return Err(CheckpointError::Truncated(format!("payload ends inside {name}")));
            }
            let values = payload[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            payload = &payload[4 * n..];
            params.push(ParamRecord { name, shape, values });
        }
        if !payload.is_empty() {
            return Err(CheckpointError::Header(format!("{} trailing payload bytes", payload.len())));
        }
        Ok(Self {
            kind: kind.ok_or_else(|| missing("kind"))?,
            descriptor,
            norm: NormStats { mean, std },
            seed: seed.ok_or_else(|| missing("seed"))?,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoders::{AfConfig, AfModel};
    use crate::nn::perturb_params;
    use crate::numerics::CounterRng;

    fn sample() -> (Checkpoint, AfModel<f32>) {
        let cfg = AfConfig {
            d_model: 16,
            heads: 2,
            n_blocks: 1,
            text_layers: 1,
            prompt_layers: 1,
            prompt_dim: 4,
            freq_dim: 8,
            ..AfConfig::default()
        };
        let m: AfModel<f32> = AfModel::new(cfg.clone(), 3).unwrap();
        perturb_params(&m, &mut CounterRng::new(1), 0.1);
        let norm = NormStats {
            mean: vec![0.1, 1.0 / 3.0],
            std: vec![2.0, std::f64::consts::PI],
        };
        (Checkpoint::capture(ModelKind::Af, cfg.descriptor(), norm, 77, &m), m)
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let (c, _) = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.norm.mean[1].to_bits(), (1.0f64 / 3.0).to_bits());
    }

    #[test]
    fn restore_reproduces_parameters() {
        let (c, m) = sample();
        let fresh: AfModel<f32> = AfModel::new(AfConfig::from_descriptor(&c.descriptor).unwrap(), 99).unwrap();
        c.restore_into(&fresh).unwrap();
        for (a, b) in m.params().iter().zip(fresh.params()) {
            let (a, b) = (a.to_vec(), b.to_vec());
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn distinct_load_errors() {
        let (c, _) = sample();
        let bytes = c.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&ver), Err(CheckpointError::VersionMismatch { found: 9, .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated(_))));
        assert!(matches!(c.expect(ModelKind::Dg, None), Err(CheckpointError::DescriptorMismatch(_))));
        let other = AfConfig::default().descriptor();
        assert!(matches!(c.expect(ModelKind::Af, Some(&other)), Err(CheckpointError::DescriptorMismatch(_))));
        let big: AfModel<f32> = AfModel::new(AfConfig::default(), 0).unwrap();
        assert!(matches!(c.restore_into(&big), Err(CheckpointError::DescriptorMismatch(_))));
    }
}
