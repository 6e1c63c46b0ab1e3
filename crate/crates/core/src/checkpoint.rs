//! Versioned binary snapshots of a model plus its optimizer.
//!
//! A checkpoint stores everything needed to resume or evaluate a run:
//! architecture identifier and geometry, epoch counter, the master seed
//! (every random stream in this crate is derived from the master seed and a
//! position, so the seed plus the epoch *is* the RNG state), learnable
//! parameters, optimizer velocity, and model buffers. All integers and
//! floats are little-endian; the layout is private to this module but
//! round-trip stable: save → load → save reproduces the file byte for byte.

use std::path::Path;

use ndarray::ArrayD;

use crate::model::{build_model, Classifier};
use crate::optim::{SgdConfig, SgdState};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"FADVCKPT";
const VERSION: u32 = 1;

/// Everything a checkpoint holds, rehydrated.
pub struct Checkpoint {
    pub model: Box<dyn Classifier>,
    pub optimizer: SgdState,
    pub epoch: usize,
    pub master_seed: u64,
}

/// Serializes `model` and `optimizer` at `epoch` into `path`.
pub fn save(
    path: &Path,
    model: &dyn Classifier,
    optimizer: &SgdState,
    epoch: usize,
    master_seed: u64,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    let arch = model.arch_id();
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(arch.as_bytes());

    let (c, h, w) = model.input_shape();
    for dim in [c, h, w, model.num_classes()] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.extend_from_slice(&(epoch as u64).to_le_bytes());
    out.extend_from_slice(&master_seed.to_le_bytes());
    out.extend_from_slice(&optimizer.config.momentum.to_le_bytes());
    out.extend_from_slice(&optimizer.config.weight_decay.to_le_bytes());

    write_tensors(&mut out, model.params());
    write_tensors(&mut out, &optimizer.velocity);
    let buffers: Vec<ArrayD<f32>> = model.buffers().into_iter().cloned().collect();
    write_tensors(&mut out, &buffers);

    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a checkpoint back, rebuilding the architecture from its identifier
/// and overwriting its state bit for bit.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, at: 0 };

    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let arch_len = r.u32()? as usize;
    let arch = String::from_utf8(r.take(arch_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("architecture id is not UTF-8".into()))?;
    let c = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let epoch = r.u64()? as usize;
    let master_seed = r.u64()?;
    let momentum = r.f32()?;
    let weight_decay = r.f32()?;

    let params = read_tensors(&mut r)?;
    let velocity = read_tensors(&mut r)?;
    let buffers = read_tensors(&mut r)?;
    if r.at != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.at
        )));
    }

    let mut model = build_model(&arch, (c, h, w), num_classes, 0)?;
    overwrite(
        model.params_mut(),
        &params,
        "parameter",
    )?;
    {
        let mut slots = model.buffers_mut();
        if slots.len() != buffers.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} buffer tensors, architecture {arch} expects {}",
                buffers.len(),
                slots.len()
            )));
        }
        for (slot, stored) in slots.iter_mut().zip(&buffers) {
            if slot.shape() != stored.shape() {
                return Err(Error::Checkpoint(format!(
                    "buffer shape {:?} does not match architecture's {:?}",
                    stored.shape(),
                    slot.shape()
                )));
            }
            slot.assign(stored);
        }
    }

    let mut optimizer =
        SgdState::new(model.as_ref(), SgdConfig { momentum, weight_decay })?;
    overwrite(&mut optimizer.velocity, &velocity, "velocity")?;

    Ok(Checkpoint { model, optimizer, epoch, master_seed })
}

fn overwrite(slots: &mut [ArrayD<f32>], stored: &[ArrayD<f32>], what: &str) -> Result<()> {
    if slots.len() != stored.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} {what} tensors, architecture expects {}",
            stored.len(),
            slots.len()
        )));
    }
    for (slot, value) in slots.iter_mut().zip(stored) {
        if slot.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "{what} shape {:?} does not match architecture's {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        slot.assign(value);
    }
    Ok(())
}

fn write_tensors(out: &mut Vec<u8>, tensors: &[ArrayD<f32>]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_tensors(r: &mut Reader<'_>) -> Result<Vec<ArrayD<f32>>> {
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f32()?);
        }
        tensors.push(
            ArrayD::from_shape_vec(ndarray::IxDyn(&shape), data)
                .map_err(|e| Error::Checkpoint(format!("inconsistent tensor shape: {e}")))?,
        );
    }
    Ok(tensors)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.at,
                self.bytes.len()
            )));
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DeskCnn, LossKind, Mode};
    use crate::tensor::{ImageBatch, LabelBatch};
    use ndarray::Array4;
    use rand::Rng;

    fn trained_fixture() -> (DeskCnn, SgdState) {
        let mut model = DeskCnn::new((3, 8, 8), 4, 3, 9).unwrap();
        let mut opt = SgdState::new(&model, SgdConfig::default()).unwrap();
        let mut r = crate::rng::stream(4, "test", &[]);
        let x = ImageBatch::new(Array4::from_shape_simple_fn((8, 3, 8, 8), || {
            r.gen_range(0.0f32..1.0)
        }))
        .unwrap();
        let y = LabelBatch::new(vec![0, 1, 2, 3, 0, 1, 2, 3], 4).unwrap();
        // A few steps so parameters, velocity, and batch-norm-free buffers
        // (none for this net) take nontrivial values.
        for _ in 0..3 {
            let (_, grads) = model.loss_and_param_grads(&x, &y).unwrap();
            opt.apply(&mut model, &grads, 0.05);
        }
        (model, opt)
    }

    #[test]
    fn save_load_save_is_byte_identical_and_state_exact() {
        let (model, opt) = trained_fixture();
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("a.ckpt");
        let second = dir.path().join("b.ckpt");

        save(&first, &model, &opt, 17, 0xDEADBEEF).unwrap();
        let loaded = load(&first).unwrap();
        assert_eq!(loaded.epoch, 17);
        assert_eq!(loaded.master_seed, 0xDEADBEEF);
        assert_eq!(loaded.model.arch_id(), model.arch_id());
        assert_eq!(loaded.optimizer.config, opt.config);
        for (a, b) in loaded.model.params().iter().zip(model.params()) {
            assert_eq!(a, b);
        }
        for (a, b) in loaded.optimizer.velocity.iter().zip(&opt.velocity) {
            assert_eq!(a, b);
        }

        save(&second, loaded.model.as_ref(), &loaded.optimizer, 17, 0xDEADBEEF).unwrap();
        assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    }

    #[test]
    fn loaded_model_predicts_identically() {
        let (model, opt) = trained_fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &model, &opt, 1, 7).unwrap();
        let loaded = load(&path).unwrap();

        let mut r = crate::rng::stream(5, "test", &[]);
        let x = ImageBatch::new(Array4::from_shape_simple_fn((4, 3, 8, 8), || {
            r.gen_range(0.0f32..1.0)
        }))
        .unwrap();
        let y = LabelBatch::new(vec![0, 1, 2, 3], 4).unwrap();
        assert_eq!(
            model.forward(&x).unwrap(),
            loaded.model.forward(&x).unwrap(),
            "logits must match bit for bit"
        );
        assert_eq!(
            model.input_gradient(&x, &y, LossKind::CrossEntropy, Mode::Eval).unwrap(),
            loaded.model.input_gradient(&x, &y, LossKind::CrossEntropy, Mode::Eval).unwrap()
        );
    }

    #[test]
    fn corrupt_files_are_rejected_with_diagnostics() {
        let (model, opt) = trained_fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save(&path, &model, &opt, 3, 1).unwrap();
        let good = std::fs::read(&path).unwrap();

        let load_err = |name: &str, bytes: &[u8]| -> String {
            let p = dir.path().join(name);
            std::fs::write(&p, bytes).unwrap();
            match load(&p) {
                Err(e) => e.to_string(),
                Ok(_) => panic!("{name} should not load"),
            }
        };

        let mut bad_magic = good.clone();
        bad_magic[0] ^= 0xFF;
        assert!(load_err("magic.ckpt", &bad_magic).contains("magic"));

        let mut bad_version = good.clone();
        bad_version[8] = 99;
        assert!(load_err("version.ckpt", &bad_version).contains("version"));

        assert!(load_err("short.ckpt", &good[..good.len() / 2]).contains("truncated"));

        let mut padded = good.clone();
        padded.extend_from_slice(&[0, 1, 2]);
        assert!(load_err("long.ckpt", &padded).contains("trailing"));
    }

    /// Buffers (batch-norm running statistics) must survive the trip too.
    #[test]
    fn buffers_round_trip_on_a_batchnorm_model() {
        let mut model = crate::model::PreActResNet18::new((3, 16, 16), 4, 2).unwrap();
        let opt = SgdState::new(&model, SgdConfig::default()).unwrap();
        let mut r = crate::rng::stream(6, "test", &[]);
        let x = ImageBatch::new(Array4::from_shape_simple_fn((4, 3, 16, 16), || {
            r.gen_range(0.1f32..0.9)
        }))
        .unwrap();
        let y = LabelBatch::new(vec![0, 1, 2, 3], 4).unwrap();
        model.loss_and_param_grads(&x, &y).unwrap(); // commit running stats

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bn.ckpt");
        save(&path, &model, &opt, 0, 2).unwrap();
        let loaded = load(&path).unwrap();
        let original: Vec<&ArrayD<f32>> = model.buffers();
        let restored = loaded.model.buffers();
        assert_eq!(original.len(), restored.len());
        assert!(!original.is_empty(), "resnet must expose running statistics");
        for (a, b) in original.iter().zip(restored) {
            assert_eq!(*a, b);
        }
        assert_eq!(model.forward(&x).unwrap(), loaded.model.forward(&x).unwrap());
    }
}
