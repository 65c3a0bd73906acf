//! Training loops: base-model pretraining, adapter training with the
//! KL-regularized policy-gradient objective or next-token prediction, and
//! greedy evaluation.

mod adapter;
pub mod optim;
mod pretrain;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Adaptation, Decode, Generation, PolicyModel, TokenSequence};
use crate::tasks::{self, ClassificationDataset, TaskInstance, TaskSplit};

pub use adapter::{
    init_expert, train_lora, train_next_token, train_svf_expert, train_with_objective,
};
pub use pretrain::{
    pretrain_base, pretraining_corpus, train_full_text, CorpusItem, PretrainConfig, PretrainReport,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    PolicyGradient,
    NextToken,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::PolicyGradient => "policy_gradient",
            Objective::NextToken => "next_token",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_max_norm: f64,
    pub kl_lambda: f64,
    pub max_epochs: usize,
    /// Stop after this many epochs without a new best validation accuracy;
    /// 0 disables early stopping.
    pub early_stop_patience: usize,
    pub z_init_mean: f64,
    pub z_init_variance: f64,
    /// Subtract the batch-mean reward before forming the policy gradient.
    pub baseline_enabled: bool,
    pub temperature: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            batch_size: 64,
            clip_max_norm: 1e-3,
            kl_lambda: 0.0,
            max_epochs: 20,
            early_stop_patience: 0,
            z_init_mean: 1.0,
            z_init_variance: 1e-3,
            baseline_enabled: false,
            temperature: 1.0,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if self.kl_lambda < 0.0 {
            return Err(Error::Config("kl_lambda must be non-negative".into()));
        }
        if self.clip_max_norm.is_nan() || self.clip_max_norm <= 0.0 {
            return Err(Error::Config("clip_max_norm must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.z_init_variance < 0.0 {
            return Err(Error::Config("z_init_variance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Training and validation instances for one adapter, with the domain tag the
/// resulting expert carries.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub name: String,
    pub domain_tag: String,
    pub train: Vec<TaskInstance>,
    pub validation: Vec<TaskInstance>,
}

impl TrainData {
    pub fn from_split(split: &TaskSplit) -> Self {
        Self {
            name: split.family.name().to_string(),
            domain_tag: split.family.category().name().to_string(),
            train: split.train.clone(),
            validation: split.validation.clone(),
        }
    }

    pub fn classifier(train: &ClassificationDataset, validation: &ClassificationDataset) -> Self {
        Self {
            name: "classifier".into(),
            domain_tag: "classifier".into(),
            train: train.instances(),
            validation: validation.instances(),
        }
    }
}

/// One sampled answer and its objective terms.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub instance: TaskInstance,
    pub generated: TokenSequence,
    pub reward: f64,
    pub logp: f64,
    pub per_token_logp: Vec<f64>,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean of `r·log π′(ŷ|x) − λ·KL` (policy gradient) or of the reference
    /// log-likelihood (next token); absent for the pre-training evaluation.
    pub objective: Option<f64>,
    pub mean_reward: Option<f64>,
    pub kl: Option<f64>,
    pub val_acc: f64,
    pub lr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

impl TrainMetrics {
    /// `epoch,J,reward,kl,val_acc,lr` with empty cells where a value does not
    /// apply.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.10}")).unwrap_or_default();
        let mut out = String::from("epoch,J,reward,kl,val_acc,lr\n");
        for e in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{:.10},{}",
                e.epoch,
                cell(e.objective),
                cell(e.mean_reward),
                cell(e.kl),
                e.val_acc,
                cell(e.lr)
            )
            .expect("writing to a string");
        }
        out
    }

    pub fn last(&self) -> &EpochMetrics {
        self.epochs.last().expect("at least the initial evaluation")
    }
}

/// Greedy answers for every instance, in order.
pub fn greedy_answers(model: &PolicyModel, instances: &[TaskInstance]) -> Result<Vec<Generation>> {
    instances
        .par_iter()
        .map(|inst| {
            model.generate(
                inst.prompt.prompt_tokens(),
                Decode::Greedy,
                inst.max_new_tokens(),
            )
        })
        .collect()
}

/// Fraction of instances answered exactly under greedy decoding with the
/// model's current adaptation.
pub fn accuracy(model: &PolicyModel, instances: &[TaskInstance]) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::EmptyEval);
    }
    let answers = greedy_answers(model, instances)?;
    let correct = answers
        .iter()
        .zip(instances)
        .filter(|(g, inst)| tasks::reward(&g.tokens, &inst.reference.tokens) > 0.0)
        .count();
    Ok(correct as f64 / instances.len() as f64)
}

/// Accuracy with `adapter` applied (or the bare base model for `None`).
pub fn evaluate(
    model: &PolicyModel,
    adapter: Option<&Adaptation>,
    instances: &[TaskInstance],
) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::EmptyEval);
    }
    let mut m = model.clone();
    m.set_adaptation(adapter.cloned())?;
    accuracy(&m, instances)
}
