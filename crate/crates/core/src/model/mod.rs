//! The toy decoder-only policy and everything needed to adapt, sample from and
//! differentiate it.

mod config;
mod transformer;
pub mod vocab;
mod weights;

use std::collections::BTreeMap;

pub use config::{ModelConfig, SiteSet};
pub use transformer::{ForwardCache, Gradients};
pub use vocab::{Token, TokenSequence};
pub use weights::{LayerWeights, TensorKey, Weights};

use crate::error::{Error, Result};
use crate::linalg::{rank1_contraction, svd, Matrix, SeededRng, SvdFactors};
use crate::lora::LoraAdapter;
use crate::svf::{apply_expert, ExpertVector, MatrixId};

/// The currently active parameter modification.
#[derive(Clone, Debug, PartialEq)]
pub enum Adaptation {
    Expert(ExpertVector),
    Lora(LoraAdapter),
}

/// Decoding strategy for [`PolicyModel::generate`].
pub enum Decode<'a> {
    Greedy,
    /// Temperature `≤ 0` decodes greedily.
    Sample {
        temperature: f64,
        rng: &'a mut SeededRng,
    },
}

/// Generated answer tokens with the log-probability of each under the
/// (temperature-free) policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<Token>,
    pub logps: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PolicyModel {
    config: ModelConfig,
    base: Weights,
    factors: Option<BTreeMap<MatrixId, SvdFactors>>,
    adaptation: Option<Adaptation>,
    /// Base weights with every SVF site replaced by `W′`; set while an expert
    /// is active.
    adapted: Option<Weights>,
    version: u64,
}

impl PolicyModel {
    /// Wraps base weights and decomposes every SVF target matrix.
    pub fn new(config: ModelConfig, base: Weights) -> Result<Self> {
        config.validate()?;
        if base.layers.len() != config.n_layers
            || base.tok_emb.shape() != (config.vocab_size, config.d_model)
            || base.pos_emb.shape() != (config.context_len, config.d_model)
        {
            return Err(Error::IncompatibleArchitecture(
                "weights do not match the model configuration".into(),
            ));
        }
        let mut m = Self {
            config,
            base,
            factors: None,
            adaptation: None,
            adapted: None,
            version: 0,
        };
        m.refresh_factors()?;
        Ok(m)
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let w = Weights::init(&config, seed);
        Self::new(config, w)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn base(&self) -> &Weights {
        &self.base
    }

    /// Mutable access to the base weights. Drops any active adaptation and
    /// marks the factor cache stale until [`refresh_factors`](Self::refresh_factors).
    pub fn base_mut(&mut self) -> &mut Weights {
        self.factors = None;
        self.adaptation = None;
        self.adapted = None;
        self.version += 1;
        &mut self.base
    }

    /// Recomputes the SVD of every SVF target matrix from the base weights.
    pub fn refresh_factors(&mut self) -> Result<()> {
        let mut factors = BTreeMap::new();
        for id in self.config.matrix_ids(self.config.svf_sites) {
            factors.insert(id, svd(self.base.matrix(id))?);
        }
        self.factors = Some(factors);
        Ok(())
    }

    /// A copy of this model whose SVF target set is `sites`, with no active
    /// adaptation. Factors are reused where cached.
    pub fn with_svf_sites(&self, sites: SiteSet) -> Result<PolicyModel> {
        let mut config = self.config.clone();
        config.svf_sites = sites;
        let mut factors = BTreeMap::new();
        for id in config.matrix_ids(sites) {
            let f = match self.factors.as_ref().and_then(|f| f.get(&id)) {
                Some(f) => f.clone(),
                None => svd(self.base.matrix(id))?,
            };
            factors.insert(id, f);
        }
        Ok(Self {
            config,
            base: self.base.clone(),
            factors: Some(factors),
            adaptation: None,
            adapted: None,
            version: self.version + 1,
        })
    }

    pub fn factors(&self) -> Result<&BTreeMap<MatrixId, SvdFactors>> {
        self.factors.as_ref().ok_or(Error::StaleCache {
            cache: self.version.saturating_sub(1),
            model: self.version,
        })
    }

    /// Installs precomputed factors (e.g. loaded from disk). They must match
    /// the current base weights.
    pub fn set_factors(&mut self, factors: BTreeMap<MatrixId, SvdFactors>) -> Result<()> {
        let expected = self.config.matrix_ids(self.config.svf_sites);
        if factors.keys().copied().collect::<Vec<_>>() != expected {
            return Err(Error::IncompatibleArchitecture(
                "factor set does not cover the SVF target matrices".into(),
            ));
        }
        for (id, f) in &factors {
            let w = self.base.matrix(*id);
            let r = crate::linalg::reconstruct(f)?;
            let tol = 1e-6 * w.frobenius_norm().max(1.0);
            if r.shape() != w.shape() || r.sub(w)?.frobenius_norm() > tol {
                return Err(Error::StaleCache {
                    cache: 0,
                    model: self.version,
                });
            }
        }
        self.factors = Some(factors);
        Ok(())
    }

    /// Monotone counter bumped on every weight or adaptation change; caches
    /// from an older version cannot be backpropagated.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn adaptation(&self) -> Option<&Adaptation> {
        self.adaptation.as_ref()
    }

    pub fn svf_ranks(&self) -> BTreeMap<MatrixId, usize> {
        self.config.svf_ranks()
    }

    /// Activates an SVF expert, materializing `W′` for each target matrix.
    pub fn set_expert(&mut self, expert: ExpertVector) -> Result<()> {
        let ranks = self.svf_ranks();
        if expert.ranks() != ranks {
            return Err(Error::IncompatibleExperts(format!(
                "expert `{}` does not match the model's SVF target set",
                expert.name
            )));
        }
        if !expert.is_finite() {
            return Err(Error::Range(format!("expert `{}` is not finite", expert.name)));
        }
        let factors = self.factors()?;
        let mut adapted = self.base.clone();
        for (id, z) in &expert.entries {
            *adapted.matrix_mut(*id) = apply_expert(&factors[id], z)?;
        }
        self.adapted = Some(adapted);
        self.adaptation = Some(Adaptation::Expert(expert));
        self.version += 1;
        Ok(())
    }

    pub fn set_lora(&mut self, adapter: LoraAdapter) -> Result<()> {
        for (id, e) in &adapter.entries {
            if id.layer >= self.config.n_layers {
                return Err(Error::IncompatibleArchitecture(format!(
                    "LoRA entry for {id} beyond layer count"
                )));
            }
            let (n, m) = self.config.site_shape(id.site);
            if e.a.shape() != (n, adapter.rank) || e.b.shape() != (adapter.rank, m) {
                return Err(Error::Shape(format!("LoRA entry {id} has wrong shape")));
            }
        }
        self.adapted = None;
        self.adaptation = Some(Adaptation::Lora(adapter));
        self.version += 1;
        Ok(())
    }

    pub fn set_adaptation(&mut self, adaptation: Option<Adaptation>) -> Result<()> {
        match adaptation {
            None => {
                self.clear_adaptation();
                Ok(())
            }
            Some(Adaptation::Expert(e)) => self.set_expert(e),
            Some(Adaptation::Lora(a)) => self.set_lora(a),
        }
    }

    pub fn clear_adaptation(&mut self) -> Option<Adaptation> {
        self.adapted = None;
        self.version += 1;
        self.adaptation.take()
    }

    /// Weights used by the adapted forward pass (LoRA contributes through a
    /// side path, so these are the base weights in that case).
    pub fn active_weights(&self) -> &Weights {
        self.adapted.as_ref().unwrap_or(&self.base)
    }

    fn active_lora(&self) -> Option<&LoraAdapter> {
        match &self.adaptation {
            Some(Adaptation::Lora(a)) => Some(a),
            _ => None,
        }
    }

    fn check_context(&self, tokens: &[Token]) -> Result<()> {
        if tokens.len() > self.config.context_len {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                context: self.config.context_len,
            });
        }
        if tokens.is_empty() {
            return Err(Error::Range("empty token sequence".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Range(format!("token id {t} outside vocabulary")));
        }
        Ok(())
    }

    /// Adapted forward pass without dropout.
    pub fn forward(&self, tokens: &[Token]) -> Result<ForwardCache> {
        self.forward_with_dropout(tokens, None)
    }

    /// Adapted forward pass; LoRA dropout draws from `dropout` when given.
    pub fn forward_with_dropout(
        &self,
        tokens: &[Token],
        dropout: Option<&mut SeededRng>,
    ) -> Result<ForwardCache> {
        self.check_context(tokens)?;
        Ok(transformer::forward(
            &self.config,
            self.active_weights(),
            self.active_lora(),
            tokens,
            dropout,
            self.version,
        ))
    }

    /// Forward pass of the unadapted base model.
    pub fn forward_base(&self, tokens: &[Token]) -> Result<ForwardCache> {
        self.check_context(tokens)?;
        Ok(transformer::forward(
            &self.config,
            &self.base,
            None,
            tokens,
            None,
            self.version,
        ))
    }

    /// Per-position next-token log-probabilities of the adapted model.
    pub fn log_probs(&self, tokens: &[Token]) -> Result<Matrix> {
        Ok(self.forward(tokens)?.logprobs)
    }

    fn check_cache(&self, cache: &ForwardCache, dlogits: &Matrix) -> Result<()> {
        if cache.version != self.version {
            return Err(Error::StaleCache {
                cache: cache.version,
                model: self.version,
            });
        }
        if dlogits.shape() != cache.logprobs.shape() {
            return Err(Error::Shape(format!(
                "logit gradient is {:?}, forward produced {:?}",
                dlogits.shape(),
                cache.logprobs.shape()
            )));
        }
        Ok(())
    }

    /// Gradients with respect to all active weights (and LoRA factors if a
    /// LoRA adapter is active). `dlogits` is `∂L/∂logits`, one row per position.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Matrix) -> Result<Gradients> {
        self.check_cache(cache, dlogits)?;
        Ok(transformer::backward(
            &self.config,
            self.active_weights(),
            self.active_lora(),
            cache,
            dlogits,
        ))
    }

    /// `∂L/∂z_i = σ_i · u_iᵀ (∂L/∂W′) v_i` for every SVF target matrix.
    pub fn backward_z(
        &self,
        cache: &ForwardCache,
        dlogits: &Matrix,
    ) -> Result<BTreeMap<MatrixId, Vec<f64>>> {
        if !matches!(self.adaptation, Some(Adaptation::Expert(_))) {
            return Err(Error::AdapterMissing);
        }
        let grads = self.backward(cache, dlogits)?;
        z_gradients(self.factors()?, &grads.weights)
    }

    /// Generates up to `max_new` tokens after `prompt`, stopping after an
    /// end-of-answer token (which is included in the output).
    pub fn generate(
        &self,
        prompt: &[Token],
        mut mode: Decode<'_>,
        max_new: usize,
    ) -> Result<Generation> {
        if max_new == 0 {
            return Err(Error::Range("max_new must be at least 1".into()));
        }
        let mut seq = prompt.to_vec();
        let mut out = Generation {
            tokens: Vec::with_capacity(max_new),
            logps: Vec::with_capacity(max_new),
        };
        for _ in 0..max_new {
            let cache = self.forward(&seq)?;
            let row = cache.logprobs.row(seq.len() - 1);
            let tok = match &mut mode {
                Decode::Greedy => argmax(row),
                Decode::Sample { temperature, rng } => {
                    if *temperature <= 0.0 {
                        argmax(row)
                    } else {
                        sample_categorical(row, *temperature, rng)
                    }
                }
            };
            out.tokens.push(tok);
            out.logps.push(row[tok as usize]);
            if tok == vocab::EOS {
                break;
            }
            seq.push(tok);
        }
        Ok(out)
    }

    /// Log-probability of the answer part of `s` under the adapted model:
    /// the sum and the per-token terms.
    pub fn sequence_log_prob(&self, s: &TokenSequence) -> Result<(f64, Vec<f64>)> {
        if s.prompt_len == 0 || s.prompt_len >= s.len() {
            return Err(Error::Range(format!(
                "need a non-empty prompt and answer (prompt {}, length {})",
                s.prompt_len,
                s.len()
            )));
        }
        let cache = self.forward(&s.tokens[..s.len() - 1])?;
        let per: Vec<f64> = (s.prompt_len..s.len())
            .map(|t| cache.logprobs.get(t - 1, s.tokens[t] as usize))
            .collect();
        Ok((per.iter().sum(), per))
    }

    /// Mean over answer positions of `KL(π′ ‖ π)` between the adapted and
    /// base next-token distributions.
    pub fn kl_to_base(&self, s: &TokenSequence) -> Result<f64> {
        if self.adaptation.is_none() {
            return Err(Error::AdapterMissing);
        }
        if s.prompt_len == 0 || s.prompt_len >= s.len() {
            return Err(Error::Range("KL needs a non-empty prompt and answer".into()));
        }
        let tokens = &s.tokens[..s.len() - 1];
        let adapted = self.forward(tokens)?;
        let base = self.forward_base(tokens)?;
        let positions = s.prompt_len - 1..s.len() - 1;
        let n = positions.len() as f64;
        Ok(positions
            .map(|t| token_kl(adapted.logprobs.row(t), base.logprobs.row(t)))
            .sum::<f64>()
            / n)
    }
}

/// Converts full weight gradients at `W′` into z-gradients.
pub fn z_gradients(
    factors: &BTreeMap<MatrixId, SvdFactors>,
    grads: &Weights,
) -> Result<BTreeMap<MatrixId, Vec<f64>>> {
    factors
        .iter()
        .map(|(id, f)| {
            let c = rank1_contraction(f, grads.matrix(*id))?;
            Ok((*id, c.iter().zip(&f.sigma).map(|(ci, s)| ci * s).collect()))
        })
        .collect()
}

/// `Σ_v p′(v) (log p′(v) − log p(v))` from two log-probability rows.
pub fn token_kl(logp_adapted: &[f64], logp_base: &[f64]) -> f64 {
    logp_adapted
        .iter()
        .zip(logp_base)
        .map(|(&a, &b)| {
            let p = a.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (a - b)
            }
        })
        .sum::<f64>()
        .max(0.0)
}

pub fn argmax(row: &[f64]) -> Token {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as Token
}

/// Draws an index from `softmax(logps / temperature)` by inverse CDF.
pub fn sample_categorical(logps: &[f64], temperature: f64, rng: &mut SeededRng) -> Token {
    let scaled: Vec<f64> = logps.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i as Token;
        }
        u -= w;
    }
    // Rounding left `u` past the last bucket: return the last non-zero one.
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0) as Token
}
