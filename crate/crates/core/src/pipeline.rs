//! The end-to-end stages shared by the command-line tool and the test
//! harness: task data, base pretraining, expert and classifier training.

use crate::adapt::ExpertLibrary;
use crate::config::RunConfig;
use crate::error::Result;
use crate::model::PolicyModel;
use crate::svf::ExpertVector;
use crate::tasks::{
    build_classification_dataset, classification_from, generate_family, Family, Portion,
    TaskSplit,
};
use crate::train::{
    pretrain_base, pretraining_corpus, train_svf_expert, PretrainReport, TrainData, TrainMetrics,
};

/// Generated splits of the training and unseen families.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub training: Vec<TaskSplit>,
    pub unseen: Vec<TaskSplit>,
}

impl TaskData {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let gen = |families: &[Family]| -> Result<Vec<TaskSplit>> {
            families
                .iter()
                .map(|&f| generate_family(f, cfg.task.data_seed, cfg.task.sizes))
                .collect()
        };
        Ok(Self {
            training: gen(&Family::TRAINING)?,
            unseen: gen(&Family::UNSEEN)?,
        })
    }

    pub fn split(&self, family: Family) -> &TaskSplit {
        self.training
            .iter()
            .chain(&self.unseen)
            .find(|s| s.family == family)
            .expect("every family is generated")
    }

    pub fn all(&self) -> Vec<TaskSplit> {
        self.training.iter().chain(&self.unseen).cloned().collect()
    }
}

/// A freshly initialized model pretrained with `seed` on the training
/// families.
pub fn pretrain(cfg: &RunConfig, data: &TaskData, seed: u64) -> Result<(PolicyModel, PretrainReport)> {
    let corpus = pretraining_corpus(&data.training, &data.unseen, &cfg.pretrain, seed)?;
    let mut model = PolicyModel::init(cfg.model.clone(), seed)?;
    let report = pretrain_base(&mut model, &corpus, &data.training, &cfg.pretrain, seed)?;
    Ok((model, report))
}

pub fn train_expert(
    cfg: &RunConfig,
    model: &PolicyModel,
    split: &TaskSplit,
    seed: u64,
) -> Result<(ExpertVector, TrainMetrics)> {
    train_svf_expert(model, &TrainData::from_split(split), &cfg.train, seed)
}

/// The classification expert: an SVF vector trained with the same objective
/// to answer the dispatch framing with the right category token.
pub fn train_classifier(
    cfg: &RunConfig,
    model: &PolicyModel,
    data: &TaskData,
    seed: u64,
) -> Result<(ExpertVector, TrainMetrics)> {
    let train = build_classification_dataset(&data.training, cfg.classifier.per_class, seed)?;
    let val = classification_from(
        &data.training,
        Portion::Validation,
        cfg.classifier.validation_per_class,
        seed,
    )?;
    let (mut e, m) = train_svf_expert(model, &TrainData::classifier(&train, &val), &cfg.train, seed)?;
    e.name = format!("classifier-s{seed}");
    Ok((e, m))
}

/// Experts for every training family plus the classifier, all with `seed`.
pub fn build_library(
    cfg: &RunConfig,
    model: &PolicyModel,
    data: &TaskData,
    seed: u64,
) -> Result<ExpertLibrary> {
    let experts = data
        .training
        .iter()
        .map(|s| Ok(train_expert(cfg, model, s, seed)?.0))
        .collect::<Result<Vec<_>>>()?;
    let (zc, _) = train_classifier(cfg, model, data, seed)?;
    ExpertLibrary::new(experts, Some(zc))
}
