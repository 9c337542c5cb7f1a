//! Named-tensor checkpoint files.
//!
//! Layout: magic `TTMC`, `u32` version (1), `u64` header length, a UTF-8 JSON
//! header holding the config and tensor directory, the little-endian payload,
//! then the CRC32 of the payload. All integers are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

use super::config::{ModelConfig, Part};
use super::params::{param_schema, ParamStore};
use super::transformer::Seq2SeqModel;

pub const MAGIC: [u8; 4] = *b"TTMC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: u64,
}

impl TensorEntry {
    fn elem_bytes(&self) -> Result<usize> {
        match self.dtype.as_str() {
            "f32" => Ok(4),
            "f64" => Ok(8),
            other => Err(Error::Config(format!("{}: unknown dtype {other:?}", self.name))),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn byte_len(&self) -> Result<usize> {
        Ok(self.numel() * self.elem_bytes()?)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    payload_len: u64,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

/// A configuration plus any subset of the model's named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub entries: Vec<TensorEntry>,
    pub payload: Vec<u8>,
    /// Free-form annotations (training step, objective, ...).
    pub meta: BTreeMap<String, String>,
}

/// Outcome of a partial initialization.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LoadReport {
    pub loaded: usize,
    /// Model tensors in the requested part that were left untouched.
    pub skipped: Vec<String>,
}

impl Checkpoint {
    /// Collects the tensors whose names satisfy `keep`.
    pub fn from_params<T: Scalar>(
        config: &ModelConfig,
        params: &ParamStore<T>,
        keep: impl Fn(&str) -> bool,
    ) -> Self {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        for (name, t) in params.iter().filter(|(n, _)| keep(n)) {
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: T::DTYPE.to_string(),
                offset: payload.len() as u64,
            });
            payload.reserve(t.len() * T::BYTES);
            for &v in t.data() {
                v.write_le(&mut payload);
            }
        }
        Checkpoint {
            config: config.clone(),
            entries,
            payload,
            meta: BTreeMap::new(),
        }
    }

    pub fn from_model<T: Scalar>(model: &Seq2SeqModel<T>) -> Self {
        Self::from_params(model.config(), model.params(), |_| true)
    }

    /// Only the tensors of one stack.
    pub fn from_model_part<T: Scalar>(model: &Seq2SeqModel<T>, part: Part) -> Self {
        Self::from_params(model.config(), model.params(), |n| n.starts_with(part.prefix()))
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(TensorEntry::numel).sum()
    }

    /// Decodes one tensor, converting its dtype to `T`.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Option<Result<Tensor<T>>> {
        let e = self.entry(name)?;
        Some(self.decode_entry(e))
    }

    fn decode_entry<T: Scalar>(&self, e: &TensorEntry) -> Result<Tensor<T>> {
        let width = e.elem_bytes()?;
        let start = e.offset as usize;
        let bytes = self
            .payload
            .get(start..start + e.byte_len()?)
            .ok_or_else(|| Error::Truncated(format!("tensor {} lies outside the payload", e.name)))?;
        let data = bytes
            .chunks_exact(width)
            .map(|c| match width {
                4 => T::from_f64_lossy(f32::read_le(c) as f64),
                _ => T::from_f64_lossy(f64::read_le(c)),
            })
            .collect();
        Tensor::new(e.shape.clone(), data)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            tensors: self.entries.clone(),
            payload_len: self.payload.len() as u64,
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&crc32fast::hash(&self.payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Truncated("file shorter than the fixed preamble".into()));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Truncated("header extends past end of file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
        let payload_len = header.payload_len as usize;
        if bytes.len() < header_end + payload_len + 4 {
            return Err(Error::Truncated(format!(
                "expected {payload_len} payload bytes and a checksum"
            )));
        }
        if bytes.len() > header_end + payload_len + 4 {
            return Err(Error::Config("trailing bytes after checksum".into()));
        }
        let payload = &bytes[header_end..header_end + payload_len];
        let stored = u32::from_le_bytes(bytes[header_end + payload_len..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let mut spans = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let start = e.offset as usize;
            let end = start + e.byte_len()?;
            if end > payload_len {
                return Err(Error::Truncated(format!("tensor {} lies outside the payload", e.name)));
            }
            spans.push((start, end, e.name.as_str()));
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Config(format!("tensors {} and {} overlap", w[0].2, w[1].2)));
            }
        }

        Ok(Checkpoint {
            config: header.config,
            entries: header.tensors,
            payload: payload.to_vec(),
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds a full model; every tensor of the schema must be present.
    pub fn into_model<T: Scalar>(&self) -> Result<Seq2SeqModel<T>> {
        let mut store = ParamStore::new();
        for e in &self.entries {
            store.push(e.name.clone(), self.decode_entry(e)?);
        }
        Seq2SeqModel::from_params(self.config.clone(), store)
    }
}

pub fn save_checkpoint<T: Scalar>(model: &Seq2SeqModel<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_model(model).save(path)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Seq2SeqModel<T>> {
    Checkpoint::load(path)?.into_model()
}

impl<T: Scalar> Seq2SeqModel<T> {
    /// Overwrites every parameter from `ckpt`; names and shapes must match
    /// exactly.
    pub fn load_state(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let mut missing = Vec::new();
        let mut decoded = Vec::new();
        for spec in param_schema(self.config()) {
            let Some(e) = ckpt.entry(&spec.name) else {
                missing.push(spec.name);
                continue;
            };
            if e.shape != spec.shape {
                return Err(Error::Shape(format!(
                    "{}: model expects {:?}, checkpoint has {:?}",
                    spec.name, spec.shape, e.shape
                )));
            }
            decoded.push((spec.name, ckpt.decode_entry::<T>(e)?));
        }
        if !missing.is_empty() {
            return Err(Error::MissingTensors(missing));
        }
        for (name, t) in decoded {
            let id = self.params().id(&name).expect("schema name");
            *self.params_mut().get_mut(id) = t;
        }
        Ok(())
    }

    /// Copies every tensor of `part` whose name and shape match. In strict
    /// mode any unmatched tensor of the part is an error and nothing changes.
    pub fn init_from(&mut self, ckpt: &Checkpoint, part: Part, strict: bool) -> Result<LoadReport> {
        let prefix = part.prefix();
        let mut report = LoadReport::default();
        let mut updates = Vec::new();
        for (id, name) in self.params().names().iter().enumerate() {
            if !name.starts_with(prefix) {
                continue;
            }
            match ckpt.entry(name) {
                Some(e) if e.shape.as_slice() == self.params().get(id).shape() => {
                    updates.push((id, ckpt.decode_entry::<T>(e)?));
                }
                _ => report.skipped.push(name.clone()),
            }
        }
        if strict && !report.skipped.is_empty() {
            return Err(Error::UnmatchedTensors(report.skipped));
        }
        report.loaded = updates.len();
        for (id, t) in updates {
            *self.params_mut().get_mut(id) = t;
        }
        Ok(report)
    }
}

/// Initializes the encoder from a (possibly partial) checkpoint, leaving the
/// decoder untouched.
pub fn init_encoder_from<T: Scalar>(
    model: &mut Seq2SeqModel<T>,
    ckpt: &Checkpoint,
    strict: bool,
) -> Result<LoadReport> {
    model.init_from(ckpt, Part::Encoder, strict)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn cfg(src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 1,
            hidden: 8,
            heads: 2,
            ffn: 12,
            src_vocab,
            tgt_vocab,
            max_src_len: 6,
            max_tgt_len: 6,
            dropout: 0.1,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = init_model::<f32>(&cfg(9, 7), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ttmc");
        save_checkpoint(&m, &path).unwrap();
        let back: Seq2SeqModel<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        let wide: Seq2SeqModel<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(wide.params().flatten()[5], m.params().flatten()[5] as f64);
    }

    #[test]
    fn corruption_is_detected() {
        let m = init_model::<f32>(&cfg(9, 7), 3).unwrap();
        let bytes = Checkpoint::from_model(&m).to_bytes().unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;

        let mut flipped = bytes.clone();
        flipped[16 + header_len + 10] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checksum { .. })));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::BadMagic(_))));

        let mut version = bytes.clone();
        version[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::UnsupportedVersion(2))));

        let short = &bytes[..bytes.len() - 9];
        assert!(matches!(Checkpoint::from_bytes(short), Err(Error::Truncated(_))));
    }

    #[test]
    fn shape_mismatch_on_full_load() {
        let other = init_model::<f32>(&cfg(9, 5), 1).unwrap();
        let ckpt = Checkpoint::from_model(&other);
        let mut m = init_model::<f32>(&cfg(9, 7), 1).unwrap();
        assert!(matches!(m.load_state(&ckpt), Err(Error::Shape(_))));
    }

    #[test]
    fn encoder_init_leaves_decoder_alone() {
        let donor = init_model::<f32>(&cfg(9, 7), 10).unwrap();
        let ckpt = Checkpoint::from_model_part(&donor, Part::Encoder);
        assert!(ckpt.names().all(|n| n.starts_with("encoder.")));

        let mut m = init_model::<f32>(&cfg(9, 7), 11).unwrap();
        let before = m.clone();
        let report = init_encoder_from(&mut m, &ckpt, true).unwrap();
        let n_enc = m.params().names().iter().filter(|n| n.starts_with("encoder.")).count();
        assert_eq!(report.loaded, n_enc);
        for (name, t) in m.params().iter() {
            if name.starts_with("decoder.") {
                assert_eq!(t, before.params().by_name(name).unwrap());
            } else {
                assert_eq!(t, donor.params().by_name(name).unwrap());
            }
        }
    }

    #[test]
    fn lenient_init_skips_mismatched_embedding() {
        let donor = init_model::<f32>(&cfg(15, 7), 10).unwrap();
        let ckpt = Checkpoint::from_model_part(&donor, Part::Encoder);
        let mut m = init_model::<f32>(&cfg(9, 7), 11).unwrap();
        let report = init_encoder_from(&mut m, &ckpt, false).unwrap();
        assert_eq!(report.skipped, vec!["encoder.embed_tokens.weight".to_string()]);
        assert_eq!(report.loaded, ckpt.entries.len() - 1);
        assert!(matches!(
            init_encoder_from(&mut m, &ckpt, true),
            Err(Error::UnmatchedTensors(_))
        ));
    }

    #[test]
    fn strict_init_from_empty_checkpoint_fails() {
        let m0 = init_model::<f32>(&cfg(9, 7), 1).unwrap();
        let empty = Checkpoint::from_params(m0.config(), m0.params(), |_| false);
        let mut m = m0.clone();
        assert!(init_encoder_from(&mut m, &empty, true).is_err());
        assert_eq!(m, m0);
    }
}
