//! Binary checkpoint container.
//!
//! Layout, little-endian:
//! `"MOTRON1"`, then the config block
//! `u32 nodes, u32 state_dim, u32 hidden, u32 modes, u32 max_horizon,
//! u8 latent_grad_flow, u32 × nodes class labels`, then `u32` parameter
//! count followed by blocks `u32 name_len, name, u32 ndim, u32 × ndim dims,
//! f32 × len row-major values`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, Motron, STATE_DIM};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::tglayers::ClassMap;

pub const MAGIC: &[u8; 7] = b"MOTRON1";

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Validation(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

impl Motron {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        let c = &self.config;
        put_u32(&mut buf, c.num_nodes());
        put_u32(&mut buf, STATE_DIM);
        put_u32(&mut buf, c.hidden);
        put_u32(&mut buf, c.modes);
        put_u32(&mut buf, c.max_horizon);
        buf.push(c.latent_grad_flow as u8);
        for l in c.classes.labels() {
            put_u32(&mut buf, *l as usize);
        }
        put_u32(&mut buf, self.params.len());
        for (_, name, t) in self.params.iter() {
            put_u32(&mut buf, name.len());
            buf.extend_from_slice(name.as_bytes());
            put_u32(&mut buf, t.ndim());
            for d in t.shape() {
                put_u32(&mut buf, *d);
            }
            for v in t.data() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Validation("not a checkpoint (bad magic)".into()));
        }
        let nodes = r.u32()?;
        let state_dim = r.u32()?;
        if state_dim != STATE_DIM {
            return Err(Error::Validation(format!("checkpoint state width {state_dim}, expected {STATE_DIM}")));
        }
        let hidden = r.u32()?;
        let modes = r.u32()?;
        let max_horizon = r.u32()?;
        let flow = r.u8()? != 0;
        let labels = (0..nodes).map(|_| r.u32().map(|v| v as u32)).collect::<Result<Vec<_>>>()?;
        let mut config = ModelConfig::new(ClassMap::new(&labels)?, hidden, modes, max_horizon)?;
        config.latent_grad_flow = flow;
        let mut model = Motron::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let count = r.u32()?;
        if count != model.params.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {count} parameter blocks, model expects {}",
                model.params.len()
            )));
        }
        let mut values = Vec::with_capacity(count);
        for (_, name, t) in model.params.iter() {
            let len = r.u32()?;
            let got = String::from_utf8_lossy(r.take(len)?).into_owned();
            if got != name {
                return Err(Error::Validation(format!("expected parameter {name}, found {got}")));
            }
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            if shape != t.shape() {
                return Err(Error::Validation(format!("parameter {name}: shape {shape:?}, expected {:?}", t.shape())));
            }
            let raw = r.take(4 * t.len())?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            values.push(Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Validation("trailing bytes after checkpoint".into()));
        }
        model.params.set_values(values)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Loads a checkpoint; with `expected` set, the stored class map must
    /// match it exactly.
    pub fn load(path: &Path, expected: Option<&ClassMap>) -> Result<Self> {
        let model = Self::from_bytes(&std::fs::read(path)?)?;
        if let Some(cm) = expected {
            if cm.labels() != model.config.classes.labels() {
                return Err(Error::Validation(format!(
                    "checkpoint class map {:?} does not match skeleton {:?}",
                    model.config.classes.labels(),
                    cm.labels()
                )));
            }
        }
        Ok(model)
    }

    /// Rounds every parameter to `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        let vals: Vec<Tensor> = self.params.values().iter().map(|t| t.map(|v| v as f32 as f64)).collect();
        self.params.set_values(vals).expect("same shapes");
    }
}
