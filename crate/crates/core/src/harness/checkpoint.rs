//! Binary checkpoints: `DRNC`, a little-endian `u32` version, a `u64` header
//! length, a JSON header, then the `f32` payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::Model;
use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::par::Exec;

pub const MAGIC: &[u8; 4] = b"DRNC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: TrainConfig,
    pub seed: u64,
    pub warm_steps: u64,
    pub joint_steps: u64,
    pub adam_steps: u64,
    pub discriminator_adam_steps: u64,
    pub tensors: Vec<TensorEntry>,
}

/// A parsed checkpoint file: header plus named tensors in index order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = self.header.clone();
        header.tensors.clear();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            header.tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.len() as u64;
        }
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(fail("bad magic"));
        }
        if bytes.len() < 16 {
            return Err(fail("truncated header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version mismatch: file has {version}, expected {FORMAT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(fail("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let payload = &body[hlen..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.offset != expected {
                return Err(Error::Checkpoint(format!(
                    "index entry `{}` starts at {}, expected {expected}",
                    e.name, e.offset
                )));
            }
            let end = e
                .shape
                .iter()
                .try_fold(4usize, |acc, &d| acc.checked_mul(d))
                .and_then(|bytes| bytes.checked_add(e.offset as usize));
            let Some(end) = end.filter(|&end| end <= payload.len()) else {
                return Err(Error::Checkpoint(format!("truncated payload in `{}`", e.name)));
            };
            let data = payload[e.offset as usize..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name.clone(), Tensor::from_vec(&e.shape, data)?));
            expected = end as u64;
        }
        if expected as usize != payload.len() {
            return Err(Error::Checkpoint(format!(
                "index covers {expected} payload bytes, file has {}",
                payload.len()
            )));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn push_store(out: &mut Vec<(String, Tensor<f32>)>, prefix: &str, store: &ParamStore<f32>) {
    for (name, t) in store.iter() {
        out.push((format!("{prefix}/{name}"), t.clone()));
    }
}

fn push_moments(out: &mut Vec<(String, Tensor<f32>)>, prefix: &str, store: &ParamStore<f32>, m: &[Vec<f32>], v: &[Vec<f32>]) {
    for (kind, buf) in [("m", m), ("v", v)] {
        for ((name, t), data) in store.iter().zip(buf) {
            let tensor = Tensor::from_vec(t.shape(), data.clone()).expect("moment matches parameter");
            out.push((format!("{prefix}.{kind}/{name}"), tensor));
        }
    }
}

fn fill_store(ck: &Checkpoint, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let key = format!("{prefix}/{}", store.name(id));
        let t = ck
            .tensor(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
        if t.shape() != store.get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{key}` has shape {:?}, model expects {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t.clone();
    }
    Ok(())
}

fn read_moments(ck: &Checkpoint, prefix: &str, store: &ParamStore<f32>) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    let read = |kind: &str| -> Result<Vec<Vec<f32>>> {
        store
            .iter()
            .map(|(name, t)| {
                let key = format!("{prefix}.{kind}/{name}");
                match ck.tensor(&key) {
                    Some(m) if m.shape() == t.shape() => Ok(m.data().to_vec()),
                    Some(_) => Err(Error::Checkpoint(format!("tensor `{key}` has the wrong shape"))),
                    None => Err(Error::Checkpoint(format!("missing tensor `{key}`"))),
                }
            })
            .collect()
    };
    Ok((read("m")?, read("v")?))
}

impl Model {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        push_store(&mut tensors, "main", &self.store);
        push_store(&mut tensors, "disc", &self.disc_store);
        let (adam_steps, m, v) = self.adam.state();
        push_moments(&mut tensors, "adam", &self.store, m, v);
        let (disc_steps, m, v) = self.disc_adam.state();
        push_moments(&mut tensors, "disc_adam", &self.disc_store, m, v);
        let means = self.reference.means();
        let d = means.first().map_or(0, Vec::len);
        let flat: Vec<f32> = means.iter().flatten().map(|&x| x as f32).collect();
        tensors.push((
            "reference".into(),
            Tensor::from_vec(&[means.len(), d], flat).expect("reference rows share a width"),
        ));
        Checkpoint {
            header: Header {
                config: self.config.clone(),
                seed: self.config.seed,
                warm_steps: self.warm_steps_done,
                joint_steps: self.joint_steps_done,
                adam_steps,
                discriminator_adam_steps: disc_steps,
                tensors: Vec::new(),
            },
            tensors,
        }
    }

    /// Rebuilds a model from its config and overwrites every tensor by name.
    pub fn from_checkpoint(ck: &Checkpoint, exec: Exec) -> Result<Self> {
        let mut model = Model::new(ck.header.config.clone(), exec)?;
        fill_store(ck, "main", &mut model.store)?;
        fill_store(ck, "disc", &mut model.disc_store)?;
        let (m, v) = read_moments(ck, "adam", &model.store)?;
        model.adam.restore(ck.header.adam_steps, m, v)?;
        let (m, v) = read_moments(ck, "disc_adam", &model.disc_store)?;
        model.disc_adam.restore(ck.header.discriminator_adam_steps, m, v)?;
        let reference = ck
            .tensor("reference")
            .ok_or_else(|| Error::Checkpoint("missing tensor `reference`".into()))?;
        let (rows, d) = reference.dims2();
        for r in 0..rows {
            model
                .reference
                .push(reference.data()[r * d..(r + 1) * d].iter().map(|&x| x as f64).collect());
        }
        let known = 1 + 3 * (model.store.len() + model.disc_store.len());
        if ck.tensors.len() != known {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {known}",
                ck.tensors.len()
            )));
        }
        model.warm_steps_done = ck.header.warm_steps;
        model.joint_steps_done = ck.header.joint_steps;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path, exec: Exec) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, exec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trained() -> Model {
        let cfg = TrainConfig {
            warm_start_steps: 2,
            joint_steps: 2,
            batch_size: 4,
            warm_batch_size: 8,
            ..TrainConfig::desk()
        };
        super::super::model::train(cfg, Exec::Sequential, &mut |_| {}).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = trained();
        let ck = m.to_checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.tensors.len(), ck.tensors.len());
        for ((na, a), (nb, b)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b), "{na}");
        }
        let rebuilt = Model::from_checkpoint(&back, Exec::Sequential).unwrap();
        assert_eq!(rebuilt.to_checkpoint().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let cfg = TrainConfig {
            warm_start_steps: 2,
            joint_steps: 4,
            batch_size: 4,
            warm_batch_size: 8,
            ..TrainConfig::desk()
        };
        let full = super::super::model::train(cfg.clone(), Exec::Sequential, &mut |_| {}).unwrap();
        let mut half = Model::new(cfg, Exec::Sequential).unwrap();
        half.warm_start(&mut |_| {}).unwrap();
        half.joint_step().unwrap();
        half.joint_step().unwrap();
        let bytes = half.to_checkpoint().to_bytes().unwrap();
        let mut resumed = Model::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap(), Exec::Sequential).unwrap();
        resumed.train_joint(&mut |_| {}).unwrap();
        assert_eq!(
            resumed.to_checkpoint().to_bytes().unwrap(),
            full.to_checkpoint().to_bytes().unwrap()
        );
    }

    #[test]
    fn rejects_corruption() {
        let bytes = trained().to_checkpoint().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("bad magic"));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version mismatch"));

        let cut = &bytes[..bytes.len() - 8];
        assert!(Checkpoint::from_bytes(cut).unwrap_err().to_string().contains("truncated payload"));

        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn shape_mismatch_in_index_is_an_error() {
        let mut ck = trained().to_checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: Header = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        header.tensors[0].shape[0] += 1;
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[16 + hlen..]);
        assert!(Checkpoint::from_bytes(&out).is_err());

        ck.tensors.pop();
        assert!(Model::from_checkpoint(&ck, Exec::Sequential).is_err());
    }
}
