//! Versioned little-endian binary checkpoints.
//!
//! Layout: magic `LSEGCKPT`, u32 version, then length-prefixed fields in a
//! fixed order (config hash, counters, wall time, RNG state, Adam step, and
//! three lists of named tensors: parameters, first moments, second moments).
//! Every float is stored as its IEEE-754 bit pattern, so save → load → save
//! is byte-identical.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::adam::AdamState;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"LSEGCKPT";

/// Serializable state of a ChaCha8 generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub wall_seconds: f64,
    pub rng: RngState,
    pub params: Vec<(String, Tensor)>,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn file_name(epoch: u64) -> String {
        format!("ckpt_epoch_{epoch}.bin")
    }

    /// Copies checkpointed parameter values into `store`, which must have
    /// the same names and shapes in the same order.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Input(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, (name, value)) in ids.into_iter().zip(&self.params) {
            if store.name(id) != name || store.get(id).shape() != value.shape() {
                return Err(Error::Input(format!(
                    "checkpoint parameter `{name}` {:?} does not match model parameter `{}` {:?}",
                    value.shape(),
                    store.name(id),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = value.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(&self.config_hash);
        w.u64(self.epoch);
        w.u64(self.step);
        w.u64(self.wall_seconds.to_bits());
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u64(self.adam.step);
        w.u32(self.params.len() as u32);
        for (name, t) in &self.params {
            w.str(name);
            w.tensor(t);
        }
        for list in [&self.adam.m, &self.adam.v] {
            w.u32(list.len() as u32);
            for t in list {
                w.tensor(t);
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(r.error(0, "not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version.to_string(),
                supported: CHECKPOINT_VERSION,
            });
        }
        let config_hash = r.str()?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let wall_seconds = f64::from_bits(r.u64()?);
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let adam_step = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.str()?;
            params.push((name, r.tensor()?));
        }
        let mut moments = Vec::with_capacity(2);
        for _ in 0..2 {
            let at = r.pos;
            let k = r.u32()? as usize;
            if k != n {
                return Err(r.error(at, "moment count differs from parameter count"));
            }
            moments.push((0..k).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?);
        }
        if r.pos != bytes.len() {
            return Err(r.error(r.pos, "trailing bytes"));
        }
        let v = moments.pop().expect("two lists");
        let m = moments.pop().expect("two lists");
        Ok(Self {
            config_hash,
            epoch,
            step,
            wall_seconds,
            rng: RngState { seed, stream, word_pos },
            params,
            adam: AdamState { step: adam_step, m, v },
        })
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("bin.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::Inventory(path.to_path_buf())),
            Err(e) => return Err(Error::io(path, e)),
        };
        Self::from_bytes(&bytes, path)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.u64(v.to_bits());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, msg: &str) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error(self.bytes.len(), "unexpected end of file")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.error(at, "invalid UTF-8 string"))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let at = self.pos;
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(self.error(at, "implausible tensor rank"));
        }
        let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len() - self.pos))
            .ok_or_else(|| self.error(at, "tensor larger than the file"))?;
        let data = (0..numel).map(|_| self.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|_| self.error(at, "tensor shape does not match its data"))
    }
}
