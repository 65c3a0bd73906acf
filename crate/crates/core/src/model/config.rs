use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::vocab;
use crate::error::{Error, Result};
use crate::svf::{MatrixId, Site};

/// Which weight matrices an adapter targets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteSet {
    Attention,
    Mlp,
    #[default]
    Both,
    /// Query and value projections only (the usual LoRA placement).
    QueryValue,
}

impl SiteSet {
    pub fn sites(self) -> Vec<Site> {
        match self {
            SiteSet::Attention => Site::ATTENTION.to_vec(),
            SiteSet::Mlp => Site::MLP.to_vec(),
            SiteSet::Both => Site::ALL.to_vec(),
            SiteSet::QueryValue => vec![Site::QProj, Site::VProj],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SiteSet::Attention => "attention",
            SiteSet::Mlp => "mlp",
            SiteSet::Both => "both",
            SiteSet::QueryValue => "query_value",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub svf_sites: SiteSet,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: vocab::vocab_size(),
            context_len: 48,
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_mlp: 64,
            svf_sites: SiteSet::Both,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_mlp", self.d_mlp),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < vocab::vocab_size() {
            return Err(Error::Config(format!(
                "vocab_size {} is smaller than the symbol table ({})",
                self.vocab_size,
                vocab::vocab_size()
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `(rows, cols)` of a site's weight, stored as `d_in × d_out`.
    pub fn site_shape(&self, site: Site) -> (usize, usize) {
        match site {
            Site::QProj | Site::KProj | Site::VProj | Site::OProj => (self.d_model, self.d_model),
            Site::MlpIn => (self.d_model, self.d_mlp),
            Site::MlpOut => (self.d_mlp, self.d_model),
        }
    }

    pub fn matrix_ids(&self, sites: SiteSet) -> Vec<MatrixId> {
        (0..self.n_layers)
            .flat_map(|l| sites.sites().into_iter().map(move |s| MatrixId::new(l, s)))
            .collect()
    }

    /// SVF rank (`min(n, m)`) of every matrix in the configured SVF target set.
    pub fn svf_ranks(&self) -> BTreeMap<MatrixId, usize> {
        self.matrix_ids(self.svf_sites)
            .into_iter()
            .map(|id| {
                let (n, m) = self.site_shape(id.site);
                (id, n.min(m))
            })
            .collect()
    }
}
