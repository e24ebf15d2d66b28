//! Checkpoint directories: JSON metadata, vocabulary, one binary blob per
//! parameter store and a SHA-256 manifest.
//!
//! Store blob layout (little-endian): magic `SVPS`, u32 version, u8 scalar
//! width, u64 count, then per parameter: u32 name length, name, u8 flags
//! (trainable, decay, quantized), and either u32 rank + u64 dims + values,
//! or u64 length + NF4 bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::AlignHeads;
use crate::error::{Error, Result};
use crate::models::lm::LmConfig;
use crate::models::{LanguageModel, LlvmModel, Param, ParamStore, ParamValue, Projector, PromptTemplate, VisionConfig, VisionEncoder};
use crate::peft::nf4::QuantizedTensor;
use crate::peft::LoraConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::Vocabulary;

const MAGIC: &[u8; 4] = b"SVPS";
const VERSION: u32 = 1;
const META: &str = "meta.json";
const VOCAB: &str = "vocab.json";
const MANIFEST: &str = "manifest.json";

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn width<T: Scalar>() -> u8 {
    std::mem::size_of::<T>() as u8
}

fn put_scalar<T: Scalar>(out: &mut Vec<u8>, v: T) {
    if width::<T>() == 4 {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    } else {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
}

pub fn store_to_bytes<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(width::<T>());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let flags = u8::from(p.trainable) | (u8::from(p.decay) << 1) | (u8::from(p.is_quantized()) << 2);
        out.push(flags);
        match &p.value {
            ParamValue::Dense(t) => {
                out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in t.data() {
                    put_scalar(&mut out, v);
                }
            }
            ParamValue::Quantized { q, .. } => {
                let b = q.to_bytes();
                out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                out.extend_from_slice(&b);
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated store blob"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn store_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("not a parameter store blob"));
    }
    if r.u32()? != VERSION {
        return Err(bad("unsupported store version"));
    }
    let w = r.u8()?;
    if w != 4 && w != 8 {
        return Err(bad(format!("unsupported scalar width {w}")));
    }
    let count = r.u64()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad("parameter name is not UTF-8"))?;
        let flags = r.u8()?;
        let value = if flags & 4 != 0 {
            let n = r.u64()? as usize;
            let q = QuantizedTensor::from_bytes(r.take(n)?)?;
            let compute = q.dequantize::<T>().bf16_round();
            ParamValue::Quantized { q, compute }
        } else {
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(w as usize).ok_or_else(|| bad("tensor too large"))?)?;
            let data: Vec<T> = if w == 4 {
                raw.chunks_exact(4)
                    .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                    .collect()
            } else {
                raw.chunks_exact(8)
                    .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                    .collect()
            };
            ParamValue::Dense(Tensor::new(shape, data)?)
        };
        store.push(Param {
            name,
            value,
            trainable: flags & 1 != 0,
            decay: flags & 2 != 0,
        })?;
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes in store blob"));
    }
    Ok(store)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// `lm`, `aligned` or `llvm`.
    pub kind: String,
    pub step: u64,
    pub scalar_bytes: u8,
    pub lm: LmConfig,
    pub vision: Option<VisionConfig>,
    pub lora: Option<LoraConfig>,
    pub template: Option<PromptTemplate>,
    /// Names of the parameter stores saved alongside.
    pub stores: Vec<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write a checkpoint directory. Existing files of the same names are
/// overwritten.
pub fn save<T: Scalar>(dir: &Path, meta: &CheckpointMeta, stores: &[&ParamStore<T>], vocab: &Vocabulary) -> Result<()> {
    if meta.stores.len() != stores.len() {
        return Err(bad("store names and stores differ in number"));
    }
    std::fs::create_dir_all(dir)?;
    let mut files: Vec<(String, Vec<u8>)> = vec![
        (META.into(), serde_json::to_vec_pretty(meta)?),
        (VOCAB.into(), serde_json::to_vec_pretty(&vocab.to_file())?),
    ];
    for (name, s) in meta.stores.iter().zip(stores) {
        files.push((format!("{name}.params"), store_to_bytes(s)));
    }
    let mut manifest = BTreeMap::new();
    for (name, bytes) in &files {
        std::fs::write(dir.join(name), bytes)?;
        manifest.insert(name.clone(), sha256_hex(bytes));
    }
    std::fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub struct Loaded<T> {
    pub meta: CheckpointMeta,
    pub stores: BTreeMap<String, ParamStore<T>>,
    pub vocab: Vocabulary,
}

impl<T: Scalar> Loaded<T> {
    fn take_store(&mut self, name: &str) -> Result<ParamStore<T>> {
        self.stores.remove(name).ok_or_else(|| bad(format!("checkpoint lacks store {name:?}")))
    }
}

/// Read and hash-verify a checkpoint directory.
pub fn load<T: Scalar>(dir: &Path) -> Result<Loaded<T>> {
    let read = |name: &str| std::fs::read(dir.join(name)).map_err(|e| bad(format!("{}: {e}", dir.join(name).display())));
    let manifest: BTreeMap<String, String> = serde_json::from_slice(&read(MANIFEST)?)?;
    let verified = |name: &str| -> Result<Vec<u8>> {
        let bytes = read(name)?;
        match manifest.get(name) {
            Some(h) if *h == sha256_hex(&bytes) => Ok(bytes),
            Some(_) => Err(bad(format!("hash mismatch for {name}"))),
            None => Err(bad(format!("{name} missing from manifest"))),
        }
    };
    let meta: CheckpointMeta = serde_json::from_slice(&verified(META)?)?;
    let vocab = Vocabulary::from_file(&serde_json::from_slice(&verified(VOCAB)?)?)?;
    let mut stores = BTreeMap::new();
    for s in &meta.stores {
        stores.insert(s.clone(), store_from_bytes::<T>(&verified(&format!("{s}.params"))?)?);
    }
    Ok(Loaded { meta, stores, vocab })
}

pub fn save_lm<T: Scalar>(dir: &Path, lm: &LanguageModel<T>, vocab: &Vocabulary, step: u64) -> Result<()> {
    let meta = CheckpointMeta {
        kind: "lm".into(),
        step,
        scalar_bytes: width::<T>(),
        lm: lm.config.clone(),
        vision: None,
        lora: lm.lora.clone(),
        template: None,
        stores: vec!["lm".into()],
    };
    save(dir, &meta, &[&lm.params], vocab)
}

pub fn load_lm<T: Scalar>(dir: &Path) -> Result<(LanguageModel<T>, Vocabulary)> {
    let mut l = load::<T>(dir)?;
    let params = l.take_store("lm")?;
    Ok((
        LanguageModel {
            config: l.meta.lm.clone(),
            params,
            lora: l.meta.lora.clone(),
        },
        l.vocab,
    ))
}

pub fn save_aligned<T: Scalar>(
    dir: &Path,
    vision: &VisionEncoder<T>,
    lm: &LanguageModel<T>,
    heads: &AlignHeads<T>,
    vocab: &Vocabulary,
    step: u64,
) -> Result<()> {
    let meta = CheckpointMeta {
        kind: "aligned".into(),
        step,
        scalar_bytes: width::<T>(),
        lm: lm.config.clone(),
        vision: Some(vision.config.clone()),
        lora: lm.lora.clone(),
        template: None,
        stores: vec!["vision".into(), "lm".into(), "align".into()],
    };
    save(dir, &meta, &[&vision.params, &lm.params, &heads.params], vocab)
}

pub struct Aligned<T> {
    pub vision: VisionEncoder<T>,
    pub lm: LanguageModel<T>,
    pub heads: AlignHeads<T>,
    pub vocab: Vocabulary,
}

pub fn load_aligned<T: Scalar>(dir: &Path) -> Result<Aligned<T>> {
    let mut l = load::<T>(dir)?;
    let vision = VisionEncoder {
        config: l.meta.vision.clone().ok_or_else(|| bad("aligned checkpoint lacks a vision config"))?,
        params: l.take_store("vision")?,
    };
    let lm = LanguageModel {
        config: l.meta.lm.clone(),
        params: l.take_store("lm")?,
        lora: l.meta.lora.clone(),
    };
    let heads = AlignHeads {
        params: l.take_store("align")?,
    };
    Ok(Aligned {
        vision,
        lm,
        heads,
        vocab: l.vocab,
    })
}

pub fn save_llvm<T: Scalar>(dir: &Path, model: &LlvmModel<T>, vocab: &Vocabulary, step: u64) -> Result<()> {
    let meta = CheckpointMeta {
        kind: "llvm".into(),
        step,
        scalar_bytes: width::<T>(),
        lm: model.lm.config.clone(),
        vision: Some(model.vision.config.clone()),
        lora: model.lm.lora.clone(),
        template: Some(model.template.clone()),
        stores: vec!["vision".into(), "projector".into(), "lm".into()],
    };
    save(dir, &meta, &[&model.vision.params, &model.projector.params, &model.lm.params], vocab)
}

pub fn load_llvm<T: Scalar>(dir: &Path) -> Result<(LlvmModel<T>, Vocabulary, CheckpointMeta)> {
    let mut l = load::<T>(dir)?;
    if l.meta.kind != "llvm" {
        return Err(bad(format!("expected an llvm checkpoint, found {:?}", l.meta.kind)));
    }
    let vcfg = l.meta.vision.clone().ok_or_else(|| bad("llvm checkpoint lacks a vision config"))?;
    let projector_params = l.take_store("projector")?;
    let d_vision = vcfg.d_vision;
    let vision = VisionEncoder {
        config: vcfg,
        params: l.take_store("vision")?,
    };
    let projector = Projector {
        d_vision,
        d_model: l.meta.lm.d_model,
        params: projector_params,
    };
    let lm = LanguageModel {
        config: l.meta.lm.clone(),
        params: l.take_store("lm")?,
        lora: l.meta.lora.clone(),
    };
    let mut model = LlvmModel::assemble(vision, projector, lm)?;
    if let Some(t) = &l.meta.template {
        t.validate()?;
        model.template = t.clone();
    }
    Ok((model, l.vocab, l.meta))
}
