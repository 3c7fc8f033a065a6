//! Checkpoint byte layout, all integers and floats little-endian:
//!
//! ```text
//! magic    8 bytes  "MGIADCK\0"
//! version  u32      1
//! epoch    u64
//! params   u32      then per parameter:
//!            u32 name length, name (UTF-8), u32 rank, u64 extent per axis, f64 per element
//! running  u32      then per batch norm: u32 channels, f64 mean[channels], f64 var[channels]
//! optim    u8       0 = absent, 1 = present, then:
//!            u64 step, f64 lr, f64 momentum, f64 weight decay,
//!            u32 buffers, per buffer u64 length and f64 per element
//! ```
//!
//! Values are stored as f64 so f32 and f64 models both round-trip exactly.

use std::path::{Path, PathBuf};

use super::optim::OptimizerState;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, RunningStats, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"MGIADCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SavedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub params: Vec<SavedParam>,
    pub running: Vec<(Vec<f64>, Vec<f64>)>,
    pub optimizer: Option<SavedOptimizer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SavedOptimizer {
    pub step: u64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(store: &ParamStore<T>, optimizer: Option<&OptimizerState<T>>, epoch: usize) -> Self {
        let f64s = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        Checkpoint {
            epoch,
            params: store
                .iter()
                .map(|(_, p)| SavedParam {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: f64s(p.value.data()),
                })
                .collect(),
            running: store.running().iter().map(|r| (f64s(&r.mean), f64s(&r.var))).collect(),
            optimizer: optimizer.map(|o| SavedOptimizer {
                step: o.step,
                lr: o.lr,
                momentum: o.momentum,
                weight_decay: o.weight_decay,
                buffers: o.buffers.iter().map(|b| f64s(b.data())).collect(),
            }),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        let put_f64s = |out: &mut Vec<u8>, v: &[f64]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, &p.values);
        }
        out.extend_from_slice(&(self.running.len() as u32).to_le_bytes());
        for (mean, var) in &self.running {
            out.extend_from_slice(&(mean.len() as u32).to_le_bytes());
            put_f64s(&mut out, mean);
            put_f64s(&mut out, var);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                for x in [o.lr, o.momentum, o.weight_decay] {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                out.extend_from_slice(&(o.buffers.len() as u32).to_le_bytes());
                for b in &o.buffers {
                    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                    put_f64s(&mut out, b);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], source: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, source };
        if r.take(8)? != MAGIC {
            return Err(Error::parse(source, 0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::parse(source, 8, format!("unsupported checkpoint version {version}")));
        }
        let epoch = r.u64()? as usize;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let at = r.pos;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::parse(source, at, "parameter name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let values = r.f64s(shape.iter().product())?;
            params.push(SavedParam { name, shape, values });
        }
        let m = r.u32()? as usize;
        let mut running = Vec::with_capacity(m.min(1 << 16));
        for _ in 0..m {
            let c = r.u32()? as usize;
            running.push((r.f64s(c)?, r.f64s(c)?));
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let (lr, momentum, weight_decay) = (r.f64()?, r.f64()?, r.f64()?);
                let k = r.u32()? as usize;
                let buffers = (0..k)
                    .map(|_| {
                        let len = r.u64()? as usize;
                        r.f64s(len)
                    })
                    .collect::<Result<_>>()?;
                Some(SavedOptimizer {
                    step,
                    lr,
                    momentum,
                    weight_decay,
                    buffers,
                })
            }
            flag => return Err(Error::parse(source, r.pos - 1, format!("bad optimizer flag {flag}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::parse(source, r.pos, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            epoch,
            params,
            running,
            optimizer,
        })
    }

    /// Plain-text listing of the stored parameters.
    pub fn manifest(&self) -> String {
        let mut out = format!(
            "mgiad checkpoint v{CHECKPOINT_VERSION}\nepoch {}\nparams {}\n",
            self.epoch,
            self.params.len()
        );
        for p in &self.params {
            let dims: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
            out.push_str(&format!("{} {}\n", p.name, dims.join("x")));
        }
        out.push_str(&format!("batch_norm_buffers {}\n", self.running.len()));
        match &self.optimizer {
            Some(o) => out.push_str(&format!("optimizer step {} lr {}\n", o.step, o.lr)),
            None => out.push_str("optimizer none\n"),
        }
        out
    }

    /// Copies the stored values into `store`, which must have the same parameter names and shapes.
    /// Returns the optimizer state if one was stored.
    pub fn restore<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<Option<OptimizerState<T>>> {
        let model: Vec<(String, Vec<usize>)> =
            store.iter().map(|(_, p)| (p.name.clone(), p.value.shape().to_vec())).collect();
        for (i, (saved, (name, shape))) in self.params.iter().zip(&model).enumerate() {
            if saved.name != *name || saved.shape != *shape {
                return Err(Error::config(format!(
                    "checkpoint does not match the model: parameter #{i} is {} {:?} in the checkpoint but {name} {shape:?} in the model",
                    saved.name, saved.shape
                )));
            }
        }
        if self.params.len() != model.len() {
            let i = self.params.len().min(model.len());
            let which = match (self.params.get(i), model.get(i)) {
                (Some(p), _) => format!("{} only in the checkpoint", p.name),
                (_, Some((n, _))) => format!("{n} only in the model"),
                _ => unreachable!(),
            };
            return Err(Error::config(format!(
                "checkpoint does not match the model: {} parameters vs {}; first mismatch #{i}: {which}",
                self.params.len(),
                model.len()
            )));
        }
        if self.running.len() != store.running().len() {
            return Err(Error::config(format!(
                "checkpoint has {} batch-norm buffers, the model has {}",
                self.running.len(),
                store.running().len()
            )));
        }
        let conv = |v: &[f64]| v.iter().map(|&x| T::of(x)).collect::<Vec<T>>();
        for ((_, p), saved) in store.iter_mut().zip(&self.params) {
            p.value = Tensor::new(saved.shape.clone(), conv(&saved.values))?;
        }
        for (r, (mean, var)) in store.running_mut().iter_mut().zip(&self.running) {
            *r = RunningStats {
                mean: conv(mean),
                var: conv(var),
            };
        }
        let Some(o) = &self.optimizer else {
            return Ok(None);
        };
        if o.buffers.len() != self.params.len() {
            return Err(Error::config("optimizer buffers do not match the parameters"));
        }
        let buffers = o
            .buffers
            .iter()
            .zip(&self.params)
            .map(|(b, p)| Tensor::new(p.shape.clone(), conv(b)))
            .collect::<Result<_>>()?;
        Ok(Some(OptimizerState {
            buffers,
            momentum: o.momentum,
            weight_decay: o.weight_decay,
            lr: o.lr,
            step: o.step,
        }))
    }

    /// Writes `path` and a manifest next to it with the `.manifest` extension.
    pub fn save(&self, path: &Path) -> Result<PathBuf> {
        std::fs::write(path, self.encode())?;
        let manifest = path.with_extension("manifest");
        std::fs::write(&manifest, self.manifest())?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::decode(&bytes, &path.display().to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::parse(self.source, self.pos, format!("truncated: need {n} more bytes"))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).unwrap_or(usize::MAX))?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{build_model, ModelConfig};

    fn small() -> ModelConfig {
        ModelConfig {
            channels: vec![8, 16],
            input_size: 8,
            ..ModelConfig::mgiad(4, 4, 1)
        }
    }

    #[test]
    fn round_trip_restores_everything() {
        let net = build_model::<f32>(&small(), 1).unwrap();
        let mut opt = OptimizerState::new(net.store(), 0.9, 1e-4);
        opt.step = 17;
        opt.lr = 0.03;
        opt.buffers[0].data_mut()[0] = 0.25;
        let ck = Checkpoint::capture(net.store(), Some(&opt), 5);
        let decoded = Checkpoint::decode(&ck.encode(), "mem").unwrap();
        assert_eq!(decoded, ck);
        let mut other = build_model::<f32>(&small(), 2).unwrap();
        let restored = decoded.restore(other.store_mut()).unwrap().unwrap();
        assert_eq!(other.store(), net.store());
        assert_eq!(restored, opt);
        assert!(ck.manifest().starts_with("mgiad checkpoint v1\nepoch 5\n"));
    }

    #[test]
    fn mismatch_names_first_parameter() {
        let net = build_model::<f32>(&small(), 1).unwrap();
        let ck = Checkpoint::capture(net.store(), None, 0);
        let mut wider = build_model::<f32>(&ModelConfig { channels: vec![8, 32], ..small() }, 1).unwrap();
        let err = ck.restore(wider.store_mut()).unwrap_err().to_string();
        assert!(err.contains("parameter #") && err.contains("in the model"), "{err}");
    }

    #[test]
    fn corrupt_bytes_are_parse_errors() {
        let net = build_model::<f32>(&small(), 1).unwrap();
        let bytes = Checkpoint::capture(net.store(), None, 0).encode();
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3], "x"), Err(Error::Parse { .. })));
        assert!(matches!(Checkpoint::decode(b"nonsense", "x"), Err(Error::Parse { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra, "x").is_err());
    }

    #[test]
    fn save_writes_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let net = build_model::<f32>(&small(), 1).unwrap();
        let path = dir.path().join("final.ckpt");
        let manifest = Checkpoint::capture(net.store(), None, 3).save(&path).unwrap();
        assert!(std::fs::read_to_string(manifest).unwrap().contains("stem.conv"));
        assert_eq!(Checkpoint::load(&path).unwrap().epoch, 3);
    }
}
