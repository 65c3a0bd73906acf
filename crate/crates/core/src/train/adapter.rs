use rayon::prelude::*;

use super::optim::{clip_global_norm, cosine_lr, AdamW};
use super::{accuracy, EpochMetrics, Objective, Rollout, TrainConfig, TrainData, TrainMetrics};
use crate::error::{Error, Result};
use crate::hashing::{json_hash, weights_hash};
use crate::linalg::{Matrix, SeededRng};
use crate::lora::{LoraAdapter, LoraConfig};
use crate::model::{z_gradients, Adaptation, Decode, Gradients, PolicyModel, TokenSequence};
use crate::svf::{ExpertProvenance, ExpertVector};
use crate::tasks::{self, TaskInstance};

/// Trains an SVF expert with the policy-gradient objective.
pub fn train_svf_expert(
    model: &PolicyModel,
    data: &TrainData,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ExpertVector, TrainMetrics)> {
    let init = init_expert(model, data, cfg, seed)?;
    let (adapted, metrics) = train_with_objective(
        model,
        Adaptation::Expert(init),
        data,
        Objective::PolicyGradient,
        cfg,
        seed,
    )?;
    match adapted {
        Adaptation::Expert(e) => Ok((e, metrics)),
        Adaptation::Lora(_) => unreachable!("expert training returns an expert"),
    }
}

/// Minimizes reference-answer cross-entropy, updating only the adapter.
pub fn train_next_token(
    model: &PolicyModel,
    adapter: Adaptation,
    data: &TrainData,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Adaptation, TrainMetrics)> {
    train_with_objective(model, adapter, data, Objective::NextToken, cfg, seed)
}

pub fn train_lora(
    model: &PolicyModel,
    data: &TrainData,
    objective: Objective,
    lora: &LoraConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(LoraAdapter, TrainMetrics)> {
    let init = LoraAdapter::init(
        &format!("lora-{}-s{seed}", data.name),
        model.config(),
        lora,
        seed,
    )?;
    let (adapted, metrics) =
        train_with_objective(model, Adaptation::Lora(init), data, objective, cfg, seed)?;
    match adapted {
        Adaptation::Lora(a) => Ok((a, metrics)),
        Adaptation::Expert(_) => unreachable!("LoRA training returns an adapter"),
    }
}

/// `z ~ N(z_init_mean, z_init_variance)` per entry, tagged with the data's
/// domain and the model's provenance.
pub fn init_expert(
    model: &PolicyModel,
    data: &TrainData,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ExpertVector> {
    let mut e = ExpertVector::ones(&format!("svf-{}-s{seed}", data.name), &model.svf_ranks())
        .with_domain_tag(&data.domain_tag);
    let mut rng = SeededRng::new(seed, "z-init", &[]);
    let std = cfg.z_init_variance.sqrt();
    let values: Vec<f64> = e
        .flat()
        .iter()
        .map(|_| cfg.z_init_mean + std * rng.normal())
        .collect();
    e.set_flat(&values)?;
    e.provenance = ExpertProvenance {
        source_model: weights_hash(model.base()),
        training_task: data.name.clone(),
        config_hash: json_hash(cfg),
    };
    Ok(e)
}

fn flat_params(a: &Adaptation) -> Vec<f64> {
    match a {
        Adaptation::Expert(e) => e.flat(),
        Adaptation::Lora(l) => l.flat(),
    }
}

fn set_flat_params(a: &mut Adaptation, values: &[f64]) -> Result<()> {
    match a {
        Adaptation::Expert(e) => e.set_flat(values),
        Adaptation::Lora(l) => l.set_flat(values),
    }
}

/// Adapter-parameter gradient from full backprop results.
fn adapter_gradient(model: &PolicyModel, grads: &Gradients) -> Result<Vec<f64>> {
    match model.adaptation() {
        Some(Adaptation::Expert(_)) => Ok(z_gradients(model.factors()?, &grads.weights)?
            .into_values()
            .flatten()
            .collect()),
        Some(Adaptation::Lora(_)) => Ok(grads
            .lora
            .values()
            .flat_map(|e| e.a.data().iter().chain(e.b.data()).copied())
            .collect()),
        None => Err(Error::AdapterMissing),
    }
}

/// Per-instance contribution: adapter gradient of the batch loss, the answer
/// log-likelihood (per token for next-token training) and the mean KL.
struct Contribution {
    grad: Vec<f64>,
    logp: f64,
    kl: f64,
}

/// Samples one answer at the configured temperature.
fn rollout(
    model: &PolicyModel,
    inst: &TaskInstance,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<Rollout> {
    let g = model.generate(
        inst.prompt.prompt_tokens(),
        Decode::Sample {
            temperature: cfg.temperature,
            rng,
        },
        inst.max_new_tokens(),
    )?;
    let reward = tasks::reward(&g.tokens, &inst.reference.tokens);
    Ok(Rollout {
        instance: inst.clone(),
        generated: inst.prompt.with_answer(&g.tokens),
        reward,
        logp: g.logps.iter().sum(),
        per_token_logp: g.logps,
        kl: 0.0,
    })
}

/// Gradient of `−(1/B)·(r·log π′(ŷ|x) − λ·KL)` (policy gradient) or
/// `−(1/B)·mean_t log π′(y_t|·)` (next token) with respect to the adapter.
fn contribution(
    model: &PolicyModel,
    seq: &TokenSequence,
    weight: f64,
    objective: Objective,
    cfg: &TrainConfig,
    batch: usize,
    dropout: &mut SeededRng,
) -> Result<Contribution> {
    let input = &seq.tokens[..seq.len() - 1];
    let cache = model.forward_with_dropout(input, Some(dropout))?;
    let base = model.forward_base(input)?;
    let vocab = model.config().vocab_size;
    let positions = seq.prompt_len - 1..seq.len() - 1;
    let n_ans = positions.len() as f64;
    let b = batch as f64;
    let mut dlogits = Matrix::zeros(input.len(), vocab);
    let mut logp = 0.0;
    let mut kl = 0.0;
    for t in positions {
        let target = seq.tokens[t + 1] as usize;
        let lp = cache.logprobs.row(t);
        let lb = base.logprobs.row(t);
        logp += lp[target];
        let kl_t = crate::model::token_kl(lp, lb);
        kl += kl_t / n_ans;
        let lam = match objective {
            Objective::PolicyGradient => cfg.kl_lambda,
            Objective::NextToken => 0.0,
        };
        let coeff = match objective {
            Objective::PolicyGradient => weight / b,
            Objective::NextToken => 1.0 / (b * n_ans),
        };
        let row = dlogits.row_mut(t);
        for v in 0..vocab {
            let p = lp[v].exp();
            let onehot = if v == target { 1.0 } else { 0.0 };
            row[v] = -coeff * (onehot - p);
            if lam > 0.0 {
                row[v] += lam / (b * n_ans) * p * (lp[v] - lb[v] - kl_t);
            }
        }
    }
    let grads = model.backward(&cache, &dlogits)?;
    Ok(Contribution {
        grad: adapter_gradient(model, &grads)?,
        logp: match objective {
            Objective::PolicyGradient => logp,
            Objective::NextToken => logp / n_ans,
        },
        kl,
    })
}

/// Shared loop for every adapter/objective combination. Validation accuracy is
/// measured before the first update (epoch 0) and after every epoch; the
/// returned adapter is the best-validation checkpoint, ties going to the
/// earliest epoch.
pub fn train_with_objective(
    model: &PolicyModel,
    init: Adaptation,
    data: &TrainData,
    objective: Objective,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Adaptation, TrainMetrics)> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptySplit(format!("{} train", data.name)));
    }
    if data.validation.is_empty() {
        return Err(Error::EmptySplit(format!("{} validation", data.name)));
    }
    let mut current = model.clone();
    current.set_adaptation(Some(init.clone()))?;
    let mut adapter = init;
    let mut params = flat_params(&adapter);
    let mut opt = AdamW::new(params.len(), cfg.weight_decay);

    let n = data.train.len();
    let batch = cfg.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let total_steps = cfg.max_epochs * steps_per_epoch;

    let initial = accuracy(&current, &data.validation)?;
    let mut metrics = TrainMetrics {
        epochs: vec![EpochMetrics {
            epoch: 0,
            objective: None,
            mean_reward: None,
            kl: None,
            val_acc: initial,
            lr: None,
        }],
        best_epoch: 0,
        best_val_acc: initial,
    };
    let mut best = adapter.clone();
    let mut step = 0;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        SeededRng::new(seed, "batch-order", &[epoch as u64]).shuffle(&mut order);
        let mut sum_obj = 0.0;
        let mut sum_reward = 0.0;
        let mut sum_kl = 0.0;
        let mut lr = 0.0;

        for chunk in order.chunks(batch) {
            lr = cosine_lr(cfg.learning_rate, step, total_steps);
            let contribs: Vec<(Contribution, f64)> = match objective {
                Objective::PolicyGradient => {
                    let rollouts: Vec<Rollout> = chunk
                        .par_iter()
                        .map(|&i| {
                            let mut rng =
                                SeededRng::new(seed, "rollout", &[epoch as u64, i as u64]);
                            rollout(&current, &data.train[i], cfg, &mut rng)
                        })
                        .collect::<Result<_>>()?;
                    let baseline = if cfg.baseline_enabled {
                        rollouts.iter().map(|r| r.reward).sum::<f64>() / rollouts.len() as f64
                    } else {
                        0.0
                    };
                    rollouts
                        .par_iter()
                        .zip(chunk.par_iter())
                        .map(|(r, &i)| {
                            let mut drop =
                                SeededRng::new(seed, "dropout", &[epoch as u64, i as u64]);
                            let c = contribution(
                                &current,
                                &r.generated,
                                r.reward - baseline,
                                objective,
                                cfg,
                                batch,
                                &mut drop,
                            )?;
                            Ok((c, r.reward))
                        })
                        .collect::<Result<_>>()?
                }
                Objective::NextToken => chunk
                    .par_iter()
                    .map(|&i| {
                        let mut drop = SeededRng::new(seed, "dropout", &[epoch as u64, i as u64]);
                        let seq = data.train[i].full_sequence();
                        let c = contribution(&current, &seq, 1.0, objective, cfg, batch, &mut drop)?;
                        Ok((c, f64::NAN))
                    })
                    .collect::<Result<_>>()?,
            };

            let mut grad = vec![0.0; params.len()];
            for (c, r) in &contribs {
                for (g, v) in grad.iter_mut().zip(&c.grad) {
                    *g += v;
                }
                // The reported objective uses raw rewards, not baseline-shifted ones.
                sum_obj += match objective {
                    Objective::PolicyGradient => r * c.logp - cfg.kl_lambda * c.kl,
                    Objective::NextToken => c.logp,
                };
                sum_reward += r;
                sum_kl += c.kl;
            }
            clip_global_norm(&mut grad, cfg.clip_max_norm);
            opt.step(&mut params, &grad, lr);
            if !params.iter().all(|v| v.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            set_flat_params(&mut adapter, &params)?;
            current.set_adaptation(Some(adapter.clone()))?;
            step += 1;
        }

        let val_acc = accuracy(&current, &data.validation)?;
        let nf = n as f64;
        metrics.epochs.push(EpochMetrics {
            epoch,
            objective: Some(sum_obj / nf),
            mean_reward: match objective {
                Objective::PolicyGradient => Some(sum_reward / nf),
                Objective::NextToken => None,
            },
            kl: Some(sum_kl / nf),
            val_acc,
            lr: Some(lr),
        });
        if val_acc > metrics.best_val_acc {
            metrics.best_val_acc = val_acc;
            metrics.best_epoch = epoch;
            best = adapter.clone();
        }
        if cfg.early_stop_patience > 0 && epoch - metrics.best_epoch >= cfg.early_stop_patience {
            break;
        }
    }
    Ok((best, metrics))
}
