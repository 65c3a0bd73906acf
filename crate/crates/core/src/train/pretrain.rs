use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{clip_global_norm, AdamW};
use super::accuracy;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, SeededRng};
use crate::model::{PolicyModel, TokenSequence, Weights};
use crate::tasks::{self, Category, Family, TaskInstance, TaskSplit};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub clip_max_norm: f64,
    pub weight_decay: f64,
    /// Accuracy band every training family must land in.
    pub band_lo: f64,
    pub band_hi: f64,
    /// A family stops contributing task examples once its validation accuracy
    /// reaches this level; it rejoins if it falls back below. Training stops
    /// once every family is in the band and at or above this level, so
    /// two-choice tasks cannot pass the band at chance accuracy.
    pub family_target: f64,
    /// Optimizer steps between band checks.
    pub eval_every_steps: usize,
    /// Validation instances per family used for the band check.
    pub eval_size: usize,
    /// Dispatch-template examples per training family.
    pub dispatch_examples_per_family: usize,
    /// Off-task filler prompts labeled "others".
    pub others_examples: usize,
    /// Train-portion examples of each unseen family mixed into the corpus.
    pub unseen_examples_per_family: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            batch_size: 32,
            max_epochs: 200,
            clip_max_norm: 1.0,
            weight_decay: 0.0,
            band_lo: 0.40,
            band_hi: 0.75,
            family_target: 0.55,
            eval_every_steps: 10,
            eval_size: 256,
            dispatch_examples_per_family: 128,
            others_examples: 128,
            unseen_examples_per_family: 0,
        }
    }
}

/// One pretraining sequence; `family` is set for task examples subject to the
/// per-family cap.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub family: Option<Family>,
    pub sequence: TokenSequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub steps: usize,
    /// Mean token cross-entropy over each completed epoch.
    pub epoch_losses: Vec<f64>,
    pub accuracies: Vec<(Family, f64)>,
}

/// Task examples from the training splits (and optionally a few unseen-family
/// examples), dispatch-template examples, and "others" filler examples.
pub fn pretraining_corpus(
    training: &[TaskSplit],
    unseen: &[TaskSplit],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Vec<CorpusItem>> {
    let mut items = Vec::new();
    for split in training {
        if split.train.is_empty() {
            return Err(Error::EmptySplit(format!("{} train", split.family)));
        }
        items.extend(split.train.iter().map(|inst| CorpusItem {
            family: Some(split.family),
            sequence: inst.full_sequence(),
        }));
    }
    for split in unseen {
        items.extend(
            split
                .train
                .iter()
                .take(cfg.unseen_examples_per_family)
                .map(|inst| CorpusItem {
                    family: Some(split.family),
                    sequence: inst.full_sequence(),
                }),
        );
    }
    if cfg.dispatch_examples_per_family > 0 && training.len() >= 2 {
        let ds = tasks::build_classification_dataset(
            training,
            cfg.dispatch_examples_per_family,
            seed,
        )?;
        items.extend(ds.examples.iter().map(|e| CorpusItem {
            family: None,
            sequence: e.instance.full_sequence(),
        }));
    }
    for prompt in tasks::others_prompts(seed, cfg.others_examples) {
        let inst = TaskInstance::new(
            tasks::dispatch_template(&prompt),
            vec![Category::Others.token()],
            Family::Mod10Add,
        );
        items.push(CorpusItem {
            family: None,
            sequence: inst.full_sequence(),
        });
    }
    Ok(items)
}

fn flatten(w: &Weights) -> Vec<f64> {
    w.tensors()
        .iter()
        .flat_map(|(_, m)| m.data().iter().copied())
        .collect()
}

fn unflatten(w: &mut Weights, values: &[f64]) {
    let mut off = 0;
    for (_, m) in w.tensors_mut() {
        let len = m.data().len();
        m.data_mut().copy_from_slice(&values[off..off + len]);
        off += len;
    }
}

/// Gradient of the summed next-token cross-entropy of one sequence, and that
/// sum.
fn sequence_gradient(model: &PolicyModel, seq: &TokenSequence) -> Result<(Vec<f64>, f64)> {
    let input = &seq.tokens[..seq.len() - 1];
    let cache = model.forward(input)?;
    let vocab = model.config().vocab_size;
    let mut d = Matrix::zeros(input.len(), vocab);
    let mut loss = 0.0;
    for t in 0..input.len() {
        let target = seq.tokens[t + 1] as usize;
        let lp = cache.logprobs.row(t);
        loss -= lp[target];
        let row = d.row_mut(t);
        for v in 0..vocab {
            row[v] = lp[v].exp();
        }
        row[target] -= 1.0;
    }
    let grads = model.backward(&cache, &d)?;
    Ok((flatten(&grads.weights), loss))
}

fn band_accuracies(
    model: &PolicyModel,
    validation: &[(Family, Vec<TaskInstance>)],
) -> Result<Vec<(Family, f64)>> {
    validation
        .iter()
        .map(|(f, v)| Ok((*f, accuracy(model, v)?)))
        .collect()
}

/// Full-parameter next-token training until every training family's
/// validation accuracy lies in `[band_lo, band_hi]`. Families that reach
/// `family_target` are dropped from the task examples while the others catch
/// up. Leaves the model's factor cache refreshed.
pub fn pretrain_base(
    model: &mut PolicyModel,
    corpus: &[CorpusItem],
    validation: &[TaskSplit],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainReport> {
    if cfg.band_lo > cfg.band_hi {
        return Err(Error::Config("band_lo exceeds band_hi".into()));
    }
    if corpus.is_empty() {
        return Err(Error::EmptySplit("pretraining corpus".into()));
    }
    model.clear_adaptation();
    let val: Vec<(Family, Vec<TaskInstance>)> = validation
        .iter()
        .map(|s| {
            let n = cfg.eval_size.min(s.validation.len()).max(1);
            (s.family, s.validation[..n].to_vec())
        })
        .collect();
    let in_band = |acc: &[(Family, f64)]| {
        acc.iter()
            .all(|(_, a)| *a >= cfg.band_lo && *a <= cfg.band_hi)
    };
    let done = |acc: &[(Family, f64)]| {
        in_band(acc) && acc.iter().all(|(_, a)| *a >= cfg.family_target)
    };

    let mut report = PretrainReport {
        epochs: 0,
        steps: 0,
        epoch_losses: Vec::new(),
        accuracies: band_accuracies(model, &val)?,
    };
    if cfg.max_epochs == 0 || done(&report.accuracies) {
        model.refresh_factors()?;
        return Ok(report);
    }

    let mut params = flatten(model.base());
    let mut opt = AdamW::new(params.len(), cfg.weight_decay);
    let mut capped: Vec<Family> = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let mut active: Vec<usize> = (0..corpus.len())
            .filter(|&i| corpus[i].family.is_none_or(|f| !capped.contains(&f)))
            .collect();
        SeededRng::new(seed, "pretrain-order", &[epoch as u64]).shuffle(&mut active);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for chunk in active.chunks(cfg.batch_size.max(1)) {
            let parts: Vec<(Vec<f64>, f64)> = chunk
                .par_iter()
                .map(|&i| sequence_gradient(model, &corpus[i].sequence))
                .collect::<Result<_>>()?;
            let tokens: usize = chunk.iter().map(|&i| corpus[i].sequence.len() - 1).sum();
            let mut grad = vec![0.0; params.len()];
            for (g, l) in &parts {
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
                epoch_loss += l;
            }
            epoch_tokens += tokens;
            let scale = 1.0 / tokens as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            clip_global_norm(&mut grad, cfg.clip_max_norm);
            opt.step(&mut params, &grad, cfg.learning_rate);
            if !params.iter().all(|v| v.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            unflatten(model.base_mut(), &params);
            report.steps += 1;

            if report.steps.is_multiple_of(cfg.eval_every_steps.max(1)) {
                report.accuracies = band_accuracies(model, &val)?;
                if done(&report.accuracies) {
                    report.epochs = epoch;
                    report.epoch_losses.push(epoch_loss / epoch_tokens as f64);
                    model.refresh_factors()?;
                    return Ok(report);
                }
                capped = report
                    .accuracies
                    .iter()
                    .filter(|(_, a)| *a >= cfg.family_target)
                    .map(|(f, _)| *f)
                    .collect();
            }
        }
        report.epochs = epoch;
        report.epoch_losses.push(epoch_loss / epoch_tokens.max(1) as f64);
    }
    report.accuracies = band_accuracies(model, &val)?;
    model.refresh_factors()?;
    if in_band(&report.accuracies) {
        return Ok(report);
    }
    Err(Error::PretrainBand {
        lo: cfg.band_lo,
        hi: cfg.band_hi,
        epochs: cfg.max_epochs,
        accuracies: report
            .accuracies
            .iter()
            .map(|(f, a)| (f.name().to_string(), *a))
            .collect(),
    })
}

/// Plain full-text next-token training for a fixed number of epochs, without
/// the band logic. Returns the mean token loss per epoch.
pub fn train_full_text(
    model: &mut PolicyModel,
    corpus: &[TokenSequence],
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut params = flatten(model.base());
    let mut opt = AdamW::new(params.len(), 0.0);
    let mut losses = Vec::new();
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        SeededRng::new(seed, "full-text-order", &[epoch as u64]).shuffle(&mut order);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(32) {
            let parts: Vec<(Vec<f64>, f64)> = chunk
                .par_iter()
                .map(|&i| sequence_gradient(model, &corpus[i]))
                .collect::<Result<_>>()?;
            let tokens: usize = chunk.iter().map(|&i| corpus[i].len() - 1).sum();
            let mut grad = vec![0.0; params.len()];
            for (g, l) in &parts {
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b / tokens as f64;
                }
                total += l;
            }
            count += tokens;
            opt.step(&mut params, &grad, learning_rate);
            unflatten(model.base_mut(), &params);
        }
        losses.push(total / count as f64);
    }
    model.refresh_factors()?;
    Ok(losses)
}
