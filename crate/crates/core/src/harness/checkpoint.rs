//! Single-file checkpoints.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! b"CAPSAGG\0"  u32 version
//! str config          (key = value text)
//! u64 n, n × i64      raw labels in class order
//! u64 n, n × str      vocabulary tokens in id order
//! u64 n, n × tensor   parameters
//! tensor = str name, u64 rank, rank × u64 dims, Π dims × f64
//! str    = u64 byte length, UTF-8 bytes
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::config::TrainConfig;
use crate::data::{LabelMap, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};

const MAGIC: &[u8; 8] = b"CAPSAGG\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub labels: LabelMap,
    pub vocab: Vocabulary,
    pub model: Model,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {n}")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config.to_text());
        put_u64(&mut out, self.labels.classes() as u64);
        for &r in self.labels.raw() {
            out.extend_from_slice(&r.to_le_bytes());
        }
        put_u64(&mut out, self.vocab.len() as u64);
        for t in self.vocab.tokens() {
            put_str(&mut out, t);
        }
        put_u64(&mut out, self.model.store.len() as u64);
        for p in self.model.store.iter() {
            put_str(&mut out, &p.name);
            put_u64(&mut out, p.value.ndim() as u64);
            for &d in p.value.shape() {
                put_u64(&mut out, d as u64);
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut config = TrainConfig::default();
        config
            .apply_text(&r.str()?, Path::new("<checkpoint>"))
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let n = r.len()?;
        let raw = (0..n)
            .map(|_| Ok(i64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"))))
            .collect::<Result<Vec<i64>>>()?;
        let labels = LabelMap::from_raw(raw);
        let n = r.len()?;
        let tokens = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let vocab =
            Vocabulary::from_tokens(tokens).map_err(|e| Error::Checkpoint(e.to_string()))?;

        let spec = ModelSpec::from_config(&config, vocab.len(), labels.classes());
        let mut model = Model::new(spec, &mut ChaCha8Rng::seed_from_u64(0))
            .map_err(|e| Error::Checkpoint(format!("model: {e}")))?;
        let n = r.len()?;
        if n != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "{n} tensors stored, model has {}",
                model.store.len()
            )));
        }
        for p in model.store.iter_mut() {
            let name = r.str()?;
            if name != p.name {
                return Err(Error::Checkpoint(format!(
                    "expected tensor `{}`, found `{name}`",
                    p.name
                )));
            }
            let rank = r.len()?;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            if shape != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {shape:?}, model expects {:?}",
                    p.value.shape()
                )));
            }
            let bytes = r.take(p.value.len() * 8)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            p.value = Tensor::new(shape, data)?;
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            config,
            labels,
            vocab,
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}
