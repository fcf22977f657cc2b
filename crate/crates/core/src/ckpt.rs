//! Checkpoint format: a magic tag, a JSON metadata block, then named f64
//! arrays (parameters and optimizer moments) in little-endian byte order.
//! Loading restores parameter values bit-identically, so an eval before
//! and after a save/load round trip produces the same numbers.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::Module;
use crate::optim::{AdamW, MomentPair};

const MAGIC: &[u8; 12] = b"rspk-ckpt-v1";

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    n_classes: usize,
    trained: bool,
    step: usize,
    epoch: usize,
    opt_step: usize,
}

pub struct Checkpoint {
    pub model_cfg: ModelConfig,
    pub n_classes: usize,
    pub trained: bool,
    pub step: usize,
    pub epoch: usize,
    pub params: BTreeMap<String, ArrayD<f64>>,
    pub opt_step: usize,
    /// First/second moment per parameter name (empty when saved without
    /// an optimizer, e.g. a final eval-only checkpoint).
    pub moments: BTreeMap<String, MomentPair>,
}

impl Checkpoint {
    /// Snapshot a model (and optionally its optimizer state).
    pub fn from_model(model: &Model, opt: Option<&AdamW>, step: usize, epoch: usize) -> Self {
        let mut named = Vec::new();
        model.collect_params("", &mut named);
        let params = named
            .into_iter()
            .map(|(n, p)| (n, (*p.value()).clone()))
            .collect();
        let (opt_step, moments) = match opt {
            Some(o) => (o.step_count, o.moments().clone()),
            None => (0, BTreeMap::new()),
        };
        Checkpoint {
            model_cfg: model.cfg.clone(),
            n_classes: model.n_classes,
            trained: model.trained,
            step,
            epoch,
            params,
            opt_step,
            moments,
        }
    }

    /// Write parameter values back into a model built from the same
    /// config. Every checkpoint entry must land on an existing parameter
    /// of the same shape, and every model parameter must be covered.
    pub fn apply_to(&self, model: &mut Model) -> Result<()> {
        if model.cfg != self.model_cfg {
            return Err(Error::config(
                "checkpoint was produced by a different model configuration",
            ));
        }
        if model.n_classes != self.n_classes {
            return Err(Error::config(format!(
                "checkpoint has {} categories, model has {}",
                self.n_classes, model.n_classes
            )));
        }
        let mut named = Vec::new();
        model.collect_params("", &mut named);
        if named.len() != self.params.len() {
            return Err(Error::config(format!(
                "checkpoint holds {} tensors, model has {} parameters",
                self.params.len(),
                named.len()
            )));
        }
        for (name, p) in &named {
            let stored = self
                .params
                .get(name)
                .ok_or_else(|| Error::config(format!("checkpoint is missing tensor `{name}`")))?;
            if stored.shape() != p.shape() {
                return Err(Error::config(format!(
                    "tensor `{name}` has shape {:?} in the checkpoint but {:?} in the model",
                    stored.shape(),
                    p.shape()
                )));
            }
            p.set(stored.clone());
        }
        model.trained = self.trained;
        Ok(())
    }

    pub fn restore_optimizer(&self, opt: &mut AdamW) {
        opt.restore_moments(self.opt_step, self.moments.clone());
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)
            .map_err(|e| Error::runtime(format!("create {}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        let io = |e: std::io::Error| Error::runtime(format!("write {}: {e}", path.display()));
        w.write_all(MAGIC).map_err(io)?;
        let meta = serde_json::to_vec(&Meta {
            model: self.model_cfg.clone(),
            n_classes: self.n_classes,
            trained: self.trained,
            step: self.step,
            epoch: self.epoch,
            opt_step: self.opt_step,
        })
        .map_err(|e| Error::runtime(format!("encode checkpoint metadata: {e}")))?;
        w.write_all(&(meta.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&meta).map_err(io)?;
        write_array_map(&mut w, &self.params, io)?;
        let flat: BTreeMap<String, ArrayD<f64>> = self
            .moments
            .iter()
            .flat_map(|(n, mp)| {
                [(format!("{n}.m"), mp.m.clone()), (format!("{n}.v"), mp.v.clone())]
            })
            .collect();
        write_array_map(&mut w, &flat, io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| Error::runtime(format!("open {}: {e}", path.display())))?;
        let mut r = BufReader::new(file);
        let io = |e: std::io::Error| Error::runtime(format!("read {}: {e}", path.display()));
        let mut magic = [0u8; 12];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::config(format!(
                "{} is not a checkpoint (bad magic)",
                path.display()
            )));
        }
        let meta_len = read_u64(&mut r, io)? as usize;
        let mut meta_buf = vec![0u8; meta_len];
        r.read_exact(&mut meta_buf).map_err(io)?;
        let meta: Meta = serde_json::from_slice(&meta_buf)
            .map_err(|e| Error::config(format!("checkpoint metadata: {e}")))?;
        let params = read_array_map(&mut r, io)?;
        let flat = read_array_map(&mut r, io)?;
        let mut moments: BTreeMap<String, MomentPair> = BTreeMap::new();
        for (name, arr) in flat {
            let (base, kind) = name
                .rsplit_once('.')
                .ok_or_else(|| Error::config("malformed moment entry name"))?;
            let entry = moments.entry(base.to_string()).or_insert_with(|| MomentPair {
                m: ArrayD::zeros(arr.raw_dim()),
                v: ArrayD::zeros(arr.raw_dim()),
            });
            match kind {
                "m" => entry.m = arr,
                "v" => entry.v = arr,
                other => {
                    return Err(Error::config(format!("unknown moment suffix `{other}`")))
                }
            }
        }
        Ok(Checkpoint {
            model_cfg: meta.model,
            n_classes: meta.n_classes,
            trained: meta.trained,
            step: meta.step,
            epoch: meta.epoch,
            params,
            opt_step: meta.opt_step,
            moments,
        })
    }
}

fn write_array_map<W: Write>(
    w: &mut W,
    map: &BTreeMap<String, ArrayD<f64>>,
    io: impl Fn(std::io::Error) -> Error + Copy,
) -> Result<()> {
    w.write_all(&(map.len() as u64).to_le_bytes()).map_err(io)?;
    for (name, arr) in map {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(bytes).map_err(io)?;
        w.write_all(&(arr.ndim() as u32).to_le_bytes()).map_err(io)?;
        for &d in arr.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for &v in arr.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

fn read_array_map<R: Read>(
    r: &mut R,
    io: impl Fn(std::io::Error) -> Error + Copy,
) -> Result<BTreeMap<String, ArrayD<f64>>> {
    let n = read_u64(r, io)? as usize;
    let mut map = BTreeMap::new();
    for _ in 0..n {
        let name_len = read_u32(r, io)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(io)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::config("non-UTF-8 tensor name in checkpoint"))?;
        let ndim = read_u32(r, io)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u64(r, io)? as usize);
        }
        let count: usize = dims.iter().product();
        let mut data = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf).map_err(io)?;
            data.push(f64::from_le_bytes(buf));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::config(format!("tensor `{name}` in checkpoint: {e}")))?;
        map.insert(name, arr);
    }
    Ok(map)
}

fn read_u64<R: Read>(r: &mut R, io: impl Fn(std::io::Error) -> Error) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(io)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R, io: impl Fn(std::io::Error) -> Error) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(kind: ModelKind) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        Model::new(ModelConfig::with_kind(kind), 3, &mut rng).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let mut model = tiny_model(ModelKind::RsprompterQuery);
        model.trained = true;
        let ck = Checkpoint::from_model(&model, None, 42, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.epoch, 3);
        assert!(back.trained);
        assert_eq!(back.params.len(), ck.params.len());
        for (name, arr) in &ck.params {
            let b = &back.params[name];
            assert_eq!(arr.shape(), b.shape());
            assert!(
                arr.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
                "tensor `{name}` changed across the round trip"
            );
        }
    }

    #[test]
    fn apply_restores_a_fresh_model_exactly() {
        let mut src = tiny_model(ModelKind::RsprompterAnchor);
        src.trained = true;
        let ck = Checkpoint::from_model(&src, None, 0, 0);
        let mut dst = {
            let mut rng = ChaCha8Rng::seed_from_u64(999); // different init
            Model::new(ModelConfig::with_kind(ModelKind::RsprompterAnchor), 3, &mut rng).unwrap()
        };
        ck.apply_to(&mut dst).unwrap();
        assert!(dst.trained);
        let mut a = Vec::new();
        src.collect_params("", &mut a);
        let mut b = Vec::new();
        dst.collect_params("", &mut b);
        for ((an, ap), (bn, bp)) in a.iter().zip(&b) {
            assert_eq!(an, bn);
            let (av, bv) = (ap.value(), bp.value());
            assert!(av
                .iter()
                .zip(bv.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let src = tiny_model(ModelKind::RsprompterQuery);
        let ck = Checkpoint::from_model(&src, None, 0, 0);
        let mut other = tiny_model(ModelKind::RsprompterAnchor);
        assert!(ck.apply_to(&mut other).is_err());
        let mut wrong_classes = {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            Model::new(ModelConfig::with_kind(ModelKind::RsprompterQuery), 5, &mut rng).unwrap()
        };
        assert!(ck.apply_to(&mut wrong_classes).is_err());
    }

    #[test]
    fn optimizer_moments_survive() {
        use crate::optim::OptimConfig;
        let model = tiny_model(ModelKind::RsprompterQuery);
        let mut named = Vec::new();
        model.collect_params("", &mut named);
        let mut opt = AdamW::new(OptimConfig::default()).unwrap();
        // drive one step so moments exist
        let p = &named.iter().find(|(n, _)| n.starts_with("prompter")).unwrap().1;
        let loss = p.tensor().square().sum_all();
        let grads = loss.backward();
        opt.step(&named, &grads, 1e-3);
        let ck = Checkpoint::from_model(&model, Some(&opt), 1, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.opt_step, 1);
        assert_eq!(back.moments.len(), opt.moments().len());
        let mut fresh = AdamW::new(OptimConfig::default()).unwrap();
        back.restore_optimizer(&mut fresh);
        assert_eq!(fresh.step_count, 1);
    }

    #[test]
    fn garbage_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
