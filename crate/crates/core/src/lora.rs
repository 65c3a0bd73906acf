//! Low-rank additive adapters, `W + (alpha/rank) · A · B`, used as the
//! comparison baseline for SVF experts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, SeededRng};
use crate::model::{ModelConfig, SiteSet};
use crate::svf::MatrixId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub target_sites: SiteSet,
    pub init_std: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 32.0,
            dropout_p: 0.05,
            target_sites: SiteSet::QueryValue,
            init_std: 0.02,
        }
    }
}

/// `A` is `n × rank`, `B` is `rank × m` for a weight of shape `n × m`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraEntry {
    pub a: Matrix,
    pub b: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub name: String,
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub entries: BTreeMap<MatrixId, LoraEntry>,
}

impl LoraAdapter {
    /// Standard initialization: `A ~ N(0, init_std²)`, `B = 0`, so the adapted
    /// model starts out identical to the base model.
    pub fn init(name: &str, model: &ModelConfig, cfg: &LoraConfig, seed: u64) -> Result<Self> {
        if cfg.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&cfg.dropout_p) {
            return Err(Error::Config(format!(
                "LoRA dropout {} outside [0, 1)",
                cfg.dropout_p
            )));
        }
        let mut entries = BTreeMap::new();
        for id in model.matrix_ids(cfg.target_sites) {
            let (n, m) = model.site_shape(id.site);
            let mut rng = SeededRng::new(
                seed,
                "lora-init",
                &[id.layer as u64, u64::from(id.site.code())],
            );
            entries.insert(
                id,
                LoraEntry {
                    a: Matrix::random_normal(n, cfg.rank, cfg.init_std, &mut rng),
                    b: Matrix::zeros(cfg.rank, m),
                },
            );
        }
        Ok(Self {
            name: name.to_string(),
            rank: cfg.rank,
            alpha: cfg.alpha,
            dropout_p: cfg.dropout_p,
            entries,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `Σ rank · (n + m)` over all entries.
    pub fn parameter_count(&self) -> usize {
        self.entries
            .values()
            .map(|e| e.a.data().len() + e.b.data().len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries
            .values()
            .all(|e| e.a.is_finite() && e.b.is_finite())
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for e in self.entries.values() {
            out.extend_from_slice(e.a.data());
            out.extend_from_slice(e.b.data());
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::Shape(format!(
                "{} values for {} LoRA parameters",
                values.len(),
                self.parameter_count()
            )));
        }
        let mut offset = 0;
        for e in self.entries.values_mut() {
            for m in [&mut e.a, &mut e.b] {
                let len = m.data().len();
                m.data_mut().copy_from_slice(&values[offset..offset + len]);
                offset += len;
            }
        }
        Ok(())
    }
}

/// Closed-form LoRA parameter count for a rank over a site set.
pub fn lora_parameter_count(model: &ModelConfig, sites: SiteSet, rank: usize) -> usize {
    model
        .matrix_ids(sites)
        .iter()
        .map(|id| {
            let (n, m) = model.site_shape(id.site);
            rank * (n + m)
        })
        .sum()
}

/// `W + (alpha / rank) · A · B`
pub fn apply_lora(w: &Matrix, entry: &LoraEntry, alpha: f64) -> Result<Matrix> {
    let rank = entry.a.cols();
    if rank == 0 || entry.b.rows() != rank {
        return Err(Error::Shape(format!(
            "A is {}x{}, B is {}x{}",
            entry.a.rows(),
            entry.a.cols(),
            entry.b.rows(),
            entry.b.cols()
        )));
    }
    if entry.a.rows() != w.rows() || entry.b.cols() != w.cols() {
        return Err(Error::Shape(format!(
            "adapter maps {}x{} but W is {}x{}",
            entry.a.rows(),
            entry.b.cols(),
            w.rows(),
            w.cols()
        )));
    }
    let delta = entry.a.matmul(&entry.b)?;
    let mut out = w.clone();
    out.add_scaled(&delta, alpha / rank as f64)?;
    Ok(out)
}
