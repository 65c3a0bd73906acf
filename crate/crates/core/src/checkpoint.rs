//! Single-file checkpoints for models, SVF experts and LoRA adapters, plus a
//! JSON cache of singular-value factors.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! "SVF2"            4 bytes magic
//! version           u16
//! kind              u8   (0 model, 1 expert, 2 lora)
//! metadata length   u32
//! metadata          UTF-8 JSON
//! record count      u32
//! records:          layer u16, code u8, length u32, length × f32
//! ```
//!
//! Record codes 0–5 name the adaptable sites; model checkpoints also use the
//! codes of [`TensorKey::record_key`]. A LoRA entry is two consecutive records
//! with the same key, `A` then `B`. Values are stored at 32-bit precision.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::weights_hash;
use crate::linalg::{Matrix, SvdFactors};
use crate::lora::{LoraAdapter, LoraEntry};
use crate::model::{ModelConfig, PolicyModel, TensorKey, Weights};
use crate::svf::{ExpertProvenance, ExpertVector, MatrixId, Site};

pub const MAGIC: &[u8; 4] = b"SVF2";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Model,
    Expert,
    Lora,
}

impl CheckpointKind {
    fn tag(self) -> u8 {
        match self {
            CheckpointKind::Model => 0,
            CheckpointKind::Expert => 1,
            CheckpointKind::Lora => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(CheckpointKind::Model),
            1 => Ok(CheckpointKind::Expert),
            2 => Ok(CheckpointKind::Lora),
            _ => Err(Error::Checkpoint(format!("unknown type tag {tag}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraMeta {
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
}

/// JSON header. `created` is a caller-chosen run label rather than a clock
/// reading, so identical runs write identical bytes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub name: String,
    pub domain_tag: String,
    pub source_model: String,
    pub config_hash: String,
    pub created: String,
    #[serde(default)]
    pub training_task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_config: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraMeta>,
}

#[derive(Clone, Debug, PartialEq)]
struct Record {
    layer: u16,
    code: u8,
    values: Vec<f32>,
}

fn record(key: (u16, u8), values: &[f64]) -> Record {
    Record {
        layer: key.0,
        code: key.1,
        values: values.iter().map(|&v| v as f32).collect(),
    }
}

fn site_key(id: MatrixId) -> (u16, u8) {
    (id.layer as u16, id.site.code())
}

fn site_id(r: &Record) -> Result<MatrixId> {
    let site = Site::from_code(r.code)
        .ok_or_else(|| Error::Checkpoint(format!("record code {} is not a site", r.code)))?;
    Ok(MatrixId::new(usize::from(r.layer), site))
}

fn widen(values: &[f32]) -> Vec<f64> {
    values.iter().map(|&v| f64::from(v)).collect()
}

fn encode(kind: CheckpointKind, meta: &CheckpointMeta, records: &[Record]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind.tag());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&r.layer.to_le_bytes());
        out.push(r.code);
        out.extend_from_slice(&(r.values.len() as u32).to_le_bytes());
        for v in &r.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn decode(bytes: &[u8]) -> Result<(CheckpointKind, CheckpointMeta, Vec<Record>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let kind = CheckpointKind::from_tag(r.u8()?)?;
    let len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?)?;
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let layer = r.u16()?;
        let code = r.u8()?;
        let n = r.u32()? as usize;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("record too long".into()))?)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        records.push(Record { layer, code, values });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after records".into()));
    }
    Ok((kind, meta, records))
}

fn expect_kind(found: CheckpointKind, wanted: CheckpointKind) -> Result<()> {
    if found != wanted {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds a {found:?}, expected a {wanted:?}"
        )));
    }
    Ok(())
}

/// The type tag of a checkpoint file.
pub fn peek_kind(bytes: &[u8]) -> Result<CheckpointKind> {
    Ok(decode(bytes)?.0)
}

pub fn model_to_bytes(model: &PolicyModel, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut meta = meta.clone();
    meta.model_config = Some(model.config().clone());
    if meta.source_model.is_empty() {
        meta.source_model = weights_hash(model.base());
    }
    let records: Vec<Record> = model
        .base()
        .tensors()
        .into_iter()
        .map(|(k, m)| record(k.record_key(), m.data()))
        .collect();
    encode(CheckpointKind::Model, &meta, &records)
}

/// Loads the base weights and recomputes the factor cache.
pub fn model_from_bytes(bytes: &[u8]) -> Result<(PolicyModel, CheckpointMeta)> {
    let (kind, meta, records) = decode(bytes)?;
    expect_kind(kind, CheckpointKind::Model)?;
    let config = meta
        .model_config
        .clone()
        .ok_or_else(|| Error::Checkpoint("model checkpoint without model_config".into()))?;
    config.validate()?;
    let mut weights = Weights::init(&config, 0);
    let mut by_key: BTreeMap<TensorKey, Vec<f32>> = BTreeMap::new();
    for r in records {
        let key = TensorKey::from_record_key(r.layer, r.code)
            .ok_or_else(|| Error::Checkpoint(format!("unknown record ({}, {})", r.layer, r.code)))?;
        if by_key.insert(key, r.values).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record {key:?}")));
        }
    }
    let expected = weights.tensors().len();
    if by_key.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{} tensors in checkpoint, model has {expected}",
            by_key.len()
        )));
    }
    for (key, m) in weights.tensors_mut() {
        let values = by_key
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key:?}")))?;
        if values.len() != m.data().len() {
            return Err(Error::Checkpoint(format!("tensor {key:?} has wrong length")));
        }
        m.data_mut().copy_from_slice(&widen(values));
    }
    Ok((PolicyModel::new(config, weights)?, meta))
}

pub fn expert_to_bytes(e: &ExpertVector, created: &str) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        name: e.name.clone(),
        domain_tag: e.domain_tag.clone(),
        source_model: e.provenance.source_model.clone(),
        config_hash: e.provenance.config_hash.clone(),
        created: created.to_string(),
        training_task: e.provenance.training_task.clone(),
        model_config: None,
        lora: None,
    };
    let records: Vec<Record> = e
        .entries
        .iter()
        .map(|(id, z)| record(site_key(*id), z))
        .collect();
    encode(CheckpointKind::Expert, &meta, &records)
}

pub fn expert_from_bytes(bytes: &[u8]) -> Result<(ExpertVector, CheckpointMeta)> {
    let (kind, meta, records) = decode(bytes)?;
    expect_kind(kind, CheckpointKind::Expert)?;
    let mut entries = BTreeMap::new();
    for r in &records {
        if entries.insert(site_id(r)?, widen(&r.values)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record for {}", site_id(r)?)));
        }
    }
    let e = ExpertVector {
        name: meta.name.clone(),
        domain_tag: meta.domain_tag.clone(),
        entries,
        provenance: ExpertProvenance {
            source_model: meta.source_model.clone(),
            training_task: meta.training_task.clone(),
            config_hash: meta.config_hash.clone(),
        },
    };
    Ok((e, meta))
}

pub fn lora_to_bytes(a: &LoraAdapter, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut meta = meta.clone();
    meta.name = a.name.clone();
    meta.lora = Some(LoraMeta {
        rank: a.rank,
        alpha: a.alpha,
        dropout_p: a.dropout_p,
    });
    let mut records = Vec::with_capacity(2 * a.entries.len());
    for (id, e) in &a.entries {
        records.push(record(site_key(*id), e.a.data()));
        records.push(record(site_key(*id), e.b.data()));
    }
    encode(CheckpointKind::Lora, &meta, &records)
}

pub fn lora_from_bytes(bytes: &[u8]) -> Result<(LoraAdapter, CheckpointMeta)> {
    let (kind, meta, records) = decode(bytes)?;
    expect_kind(kind, CheckpointKind::Lora)?;
    let lm = meta
        .lora
        .clone()
        .ok_or_else(|| Error::Checkpoint("LoRA checkpoint without rank".into()))?;
    if lm.rank == 0 || records.len() % 2 != 0 {
        return Err(Error::Checkpoint("malformed LoRA checkpoint".into()));
    }
    let mut entries = BTreeMap::new();
    for pair in records.chunks(2) {
        let id = site_id(&pair[0])?;
        if site_id(&pair[1])? != id {
            return Err(Error::Checkpoint(format!("unpaired LoRA record for {id}")));
        }
        let (la, lb) = (pair[0].values.len(), pair[1].values.len());
        if la % lm.rank != 0 || lb % lm.rank != 0 {
            return Err(Error::Checkpoint(format!("LoRA record {id} not divisible by rank")));
        }
        let a = Matrix::from_vec(la / lm.rank, lm.rank, widen(&pair[0].values))?;
        let b = Matrix::from_vec(lm.rank, lb / lm.rank, widen(&pair[1].values))?;
        if entries.insert(id, LoraEntry { a, b }).is_some() {
            return Err(Error::Checkpoint(format!("duplicate LoRA entry {id}")));
        }
    }
    let adapter = LoraAdapter {
        name: meta.name.clone(),
        rank: lm.rank,
        alpha: lm.alpha,
        dropout_p: lm.dropout_p,
        entries,
    };
    Ok((adapter, meta))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn save_model(path: &Path, model: &PolicyModel, meta: &CheckpointMeta) -> Result<()> {
    write(path, &model_to_bytes(model, meta)?)
}

pub fn load_model(path: &Path) -> Result<(PolicyModel, CheckpointMeta)> {
    model_from_bytes(&fs::read(path)?)
}

pub fn save_expert(path: &Path, e: &ExpertVector, created: &str) -> Result<()> {
    write(path, &expert_to_bytes(e, created)?)
}

pub fn load_expert(path: &Path) -> Result<ExpertVector> {
    Ok(expert_from_bytes(&fs::read(path)?)?.0)
}

pub fn save_lora(path: &Path, a: &LoraAdapter, meta: &CheckpointMeta) -> Result<()> {
    write(path, &lora_to_bytes(a, meta)?)
}

pub fn load_lora(path: &Path) -> Result<LoraAdapter> {
    Ok(lora_from_bytes(&fs::read(path)?)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FactorRecord {
    matrix: MatrixId,
    rows: usize,
    cols: usize,
    u: Vec<f64>,
    sigma: Vec<f64>,
    vt: Vec<f64>,
}

/// Singular-value factors of a model's SVF targets, keyed to its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorCache {
    pub weights_hash: String,
    factors: Vec<FactorRecord>,
}

impl FactorCache {
    pub fn from_model(model: &PolicyModel) -> Result<Self> {
        let factors = model
            .factors()?
            .iter()
            .map(|(id, f)| FactorRecord {
                matrix: *id,
                rows: f.u.rows(),
                cols: f.vt.cols(),
                u: f.u.data().to_vec(),
                sigma: f.sigma.clone(),
                vt: f.vt.data().to_vec(),
            })
            .collect();
        Ok(Self {
            weights_hash: weights_hash(model.base()),
            factors,
        })
    }

    /// Installs the cached factors after checking they belong to `model`.
    pub fn install(&self, model: &mut PolicyModel) -> Result<()> {
        if self.weights_hash != weights_hash(model.base()) {
            return Err(Error::StaleCache {
                cache: 0,
                model: model.version(),
            });
        }
        let mut factors = BTreeMap::new();
        for r in &self.factors {
            let k = r.sigma.len();
            let f = SvdFactors::new(
                Matrix::from_vec(r.rows, k, r.u.clone())?,
                r.sigma.clone(),
                Matrix::from_vec(k, r.cols, r.vt.clone())?,
            )?;
            factors.insert(r.matrix, f);
        }
        model.set_factors(factors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, &serde_json::to_vec(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::LoraConfig;

    fn round32(v: &[f64]) -> Vec<f64> {
        v.iter().map(|&x| f64::from(x as f32)).collect()
    }

    #[test]
    fn expert_round_trip() {
        let m = PolicyModel::init(ModelConfig::default(), 0).unwrap();
        let mut e = ExpertVector::ones("e", &m.svf_ranks()).with_domain_tag("math");
        let vals: Vec<f64> = (0..e.parameter_count()).map(|i| 1.0 + 0.001 * i as f64).collect();
        e.set_flat(&vals).unwrap();
        e.provenance.training_task = "mod10-add".into();
        let bytes = expert_to_bytes(&e, "run").unwrap();
        assert_eq!(&bytes[..4], b"SVF2");
        let (back, meta) = expert_from_bytes(&bytes).unwrap();
        assert_eq!(back.flat(), round32(&vals));
        assert_eq!(back.name, e.name);
        assert_eq!(back.provenance, e.provenance);
        assert_eq!(meta.created, "run");
        assert_eq!(expert_to_bytes(&back, "run").unwrap(), bytes);
    }

    #[test]
    fn lora_round_trip() {
        let cfg = ModelConfig::default();
        let mut a = LoraAdapter::init("l", &cfg, &LoraConfig::default(), 1).unwrap();
        let vals: Vec<f64> = (0..a.parameter_count()).map(|i| (i as f64).sin()).collect();
        a.set_flat(&vals).unwrap();
        let bytes = lora_to_bytes(&a, &CheckpointMeta::default()).unwrap();
        let (back, _) = lora_from_bytes(&bytes).unwrap();
        assert_eq!(back.flat(), round32(&vals));
        assert_eq!((back.rank, back.alpha, back.dropout_p), (a.rank, a.alpha, a.dropout_p));
    }

    #[test]
    fn model_round_trip() {
        let m = PolicyModel::init(ModelConfig::default(), 2).unwrap();
        let bytes = model_to_bytes(&m, &CheckpointMeta::default()).unwrap();
        let (back, meta) = model_from_bytes(&bytes).unwrap();
        for ((_, a), (_, b)) in m.base().tensors().into_iter().zip(back.base().tensors()) {
            assert_eq!(round32(a.data()), b.data());
        }
        assert_eq!(meta.source_model, weights_hash(m.base()));
        assert_eq!(weights_hash(back.base()), weights_hash(m.base()));
        assert_eq!(model_to_bytes(&back, &CheckpointMeta::default()).unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_headers() {
        let m = PolicyModel::init(ModelConfig::default(), 0).unwrap();
        let e = ExpertVector::ones("e", &m.svf_ranks());
        let mut bytes = expert_to_bytes(&e, "").unwrap();
        assert!(model_from_bytes(&bytes).is_err());
        bytes[4] = 9;
        assert!(matches!(expert_from_bytes(&bytes), Err(Error::Checkpoint(_))));
        bytes[0] = b'X';
        assert!(matches!(expert_from_bytes(&bytes), Err(Error::Checkpoint(_))));
        let ok = expert_to_bytes(&e, "").unwrap();
        assert!(expert_from_bytes(&ok[..ok.len() - 1]).is_err());
    }

    #[test]
    fn factor_cache_round_trip() {
        let m = PolicyModel::init(ModelConfig::default(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("factors.json");
        FactorCache::from_model(&m).unwrap().save(&path).unwrap();
        let mut other = m.clone();
        FactorCache::load(&path).unwrap().install(&mut other).unwrap();
        assert_eq!(other.factors().unwrap(), m.factors().unwrap());
        let mut different = PolicyModel::init(ModelConfig::default(), 5).unwrap();
        assert!(FactorCache::load(&path).unwrap().install(&mut different).is_err());
    }
}
