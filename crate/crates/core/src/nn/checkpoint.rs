//! `VCKP` checkpoint files.
//!
//! Layout (little-endian): magic `VCKP`, version u32, metadata JSON (u32
//! length + bytes), layer table (u32 count; per layer kind u8, activation u8,
//! in/out/kernel/dilation u32), parameter section (u32 count; per blob u32
//! name length, name, u32 rank, u32 dims, f32 values), SHA-256 of the
//! parameter section, then an optional training-state section (u8 flag,
//! optimizer JSON, f64 Adam moments per parameter).

use std::path::Path;

use sha2::{Digest, Sha256};

use super::layers::{Act, LayerKind, LayerSpec, Param};
use super::optim::Adam;
use super::NnError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub optimizer: Adam,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<ParamBlob>,
    pub training: Option<TrainingState>,
}

impl Checkpoint {
    pub fn capture(
        metadata: serde_json::Value,
        layers: Vec<LayerSpec>,
        params: &[&Param],
        optimizer: Option<&Adam>,
    ) -> Self {
        let blobs = params
            .iter()
            .map(|p| ParamBlob {
                name: p.name.clone(),
                shape: p.shape.clone(),
                values: p.values.iter().map(|&v| v as f32).collect(),
            })
            .collect();
        let training = optimizer.map(|opt| TrainingState {
            optimizer: opt.clone(),
            adam_m: params.iter().map(|p| p.adam_m.clone()).collect(),
            adam_v: params.iter().map(|p| p.adam_v.clone()).collect(),
        });
        Self { metadata, layers, params: blobs, training }
    }

    /// Copies stored values into `params` (matched by position, checked by
    /// name and shape). Restores optimizer moments when both sides have them.
    pub fn restore(&self, params: Vec<&mut Param>, optimizer: Option<&mut Adam>) -> Result<(), NnError> {
        if params.len() != self.params.len() {
            return Err(NnError::Checkpoint(format!(
                "checkpoint has {} parameter blobs, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        for (p, b) in params.iter().zip(&self.params) {
            if p.name != b.name || p.shape != b.shape {
                return Err(NnError::Checkpoint(format!(
                    "parameter mismatch: model {} {:?} vs checkpoint {} {:?}",
                    p.name, p.shape, b.name, b.shape
                )));
            }
        }
        for (i, (p, b)) in params.into_iter().zip(&self.params).enumerate() {
            p.values = b.values.iter().map(|&v| v as f64).collect();
            p.zero_grad();
            match &self.training {
                Some(ts) => {
                    p.adam_m.clone_from(&ts.adam_m[i]);
                    p.adam_v.clone_from(&ts.adam_v[i]);
                }
                None => {
                    p.adam_m.iter_mut().for_each(|v| *v = 0.0);
                    p.adam_v.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        if let (Some(opt), Some(ts)) = (optimizer, &self.training) {
            *opt = ts.optimizer.clone();
        }
        Ok(())
    }

    fn param_section(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for b in &self.params {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
            for &d in &b.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &b.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Hex SHA-256 of the parameter section.
    pub fn param_hash(&self) -> String {
        hex::encode(Sha256::digest(self.param_section()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, NnError> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.metadata).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            let (kind, act) = match l.kind {
                LayerKind::Dense => (0u8, 0u8),
                LayerKind::Activation(a) => (1, act_code(a)),
                LayerKind::GruCell => (2, 0),
                LayerKind::CausalConv => (3, 0),
            };
            out.push(kind);
            out.push(act);
            for v in [l.in_dim, l.out_dim, l.kernel, l.dilation] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
        }
        let section = self.param_section();
        out.extend_from_slice(&section);
        out.extend_from_slice(&Sha256::digest(&section));
        match &self.training {
            None => out.push(0),
            Some(ts) => {
                out.push(1);
                let opt = serde_json::to_vec(&ts.optimizer).map_err(|e| NnError::Checkpoint(e.to_string()))?;
                out.extend_from_slice(&(opt.len() as u32).to_le_bytes());
                out.extend_from_slice(&opt);
                for (m, v) in ts.adam_m.iter().zip(&ts.adam_v) {
                    m.iter().chain(v).for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let metadata =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers.min(1 << 16));
        for _ in 0..n_layers {
            let kind = r.take(1)?[0];
            let act = r.take(1)?[0];
            let kind = match kind {
                0 => LayerKind::Dense,
                1 => LayerKind::Activation(act_from_code(act)?),
                2 => LayerKind::GruCell,
                3 => LayerKind::CausalConv,
                k => return Err(NnError::Checkpoint(format!("unknown layer kind {k}"))),
            };
            let [in_dim, out_dim, kernel, dilation] =
                [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|v| v as usize);
            layers.push(LayerSpec { kind, in_dim, out_dim, kernel, dilation });
        }
        let start = r.pos;
        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params.min(1 << 16));
        for _ in 0..n_params {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| NnError::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
            let count: usize = shape.iter().product();
            let values = r
                .take(count.checked_mul(4).ok_or_else(|| NnError::Checkpoint("blob too large".into()))?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(ParamBlob { name, shape, values });
        }
        let section = &bytes[start..r.pos];
        let digest = r.take(32)?;
        if Sha256::digest(section).as_slice() != digest {
            return Err(NnError::Integrity("parameter digest mismatch".into()));
        }
        let training = match r.take(1)?[0] {
            0 => None,
            1 => {
                let len = r.u32()? as usize;
                let optimizer: Adam =
                    serde_json::from_slice(r.take(len)?).map_err(|e| NnError::Checkpoint(e.to_string()))?;
                let mut adam_m = Vec::new();
                let mut adam_v = Vec::new();
                for b in &params {
                    adam_m.push(r.f64s(b.values.len())?);
                    adam_v.push(r.f64s(b.values.len())?);
                }
                Some(TrainingState { optimizer, adam_m, adam_v })
            }
            f => return Err(NnError::Checkpoint(format!("bad training-state flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(NnError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { metadata, layers, params, training })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Hash of `params` as [`Checkpoint::param_hash`] would report it.
pub fn params_hash(params: &[&Param]) -> String {
    Checkpoint::capture(serde_json::Value::Null, Vec::new(), params, None).param_hash()
}

fn act_code(a: Act) -> u8 {
    match a {
        Act::Tanh => 1,
        Act::Sigmoid => 2,
        Act::Relu => 3,
    }
}

fn act_from_code(c: u8) -> Result<Act, NnError> {
    Ok(match c {
        1 => Act::Tanh,
        2 => Act::Sigmoid,
        3 => Act::Relu,
        _ => return Err(NnError::Checkpoint(format!("unknown activation code {c}"))),
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NnError::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, NnError> {
        Ok(self
            .take(n.checked_mul(8).ok_or_else(|| NnError::Checkpoint("state too large".into()))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
