//! Two-pass inference: pass 1 inspects the prompt and picks or composes an
//! SVF expert, pass 2 answers under the adapted weights. Three strategies are
//! provided: asking the base model for the prompt's category, asking it with a
//! classification expert loaded, and cross-entropy-method search over expert
//! interpolation weights on a few held-out examples.
//!
//! The pass-1 framing is the token sequence
//! `<task> prompt… <cat>`, and the model is expected to answer with one of the
//! category tokens `<math>`, `<code>`, `<reasoning>` or `<others>`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SeededRng;
use crate::model::{Adaptation, Decode, PolicyModel, Token};
use crate::svf::{compose, compose_layerwise, CompositionWeights, ExpertVector};
use crate::tasks::{self, Category, TaskInstance};

/// The K expert vectors available for adaptation, plus the optional
/// classification expert.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertLibrary {
    experts: Vec<ExpertVector>,
    classifier: Option<ExpertVector>,
}

impl ExpertLibrary {
    /// Experts must have unique domain tags and share one set of ranks.
    pub fn new(experts: Vec<ExpertVector>, classifier: Option<ExpertVector>) -> Result<Self> {
        let mut tags = BTreeSet::new();
        for e in &experts {
            if !tags.insert(e.domain_tag.as_str()) {
                return Err(Error::IncompatibleExperts(format!(
                    "duplicate domain tag `{}`",
                    e.domain_tag
                )));
            }
        }
        if let Some(first) = experts.first() {
            let ranks = first.ranks();
            let mismatch = experts
                .iter()
                .chain(classifier.as_ref())
                .find(|e| e.ranks() != ranks);
            if let Some(e) = mismatch {
                return Err(Error::IncompatibleExperts(format!(
                    "`{}` and `{}` have different key sets or ranks",
                    first.name, e.name
                )));
            }
        }
        Ok(Self {
            experts,
            classifier,
        })
    }

    pub fn experts(&self) -> &[ExpertVector] {
        &self.experts
    }

    pub fn classifier(&self) -> Option<&ExpertVector> {
        self.classifier.as_ref()
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    /// The expert whose domain tag names `category`, if any.
    pub fn expert_for(&self, category: Category) -> Option<&ExpertVector> {
        self.experts
            .iter()
            .find(|e| e.domain_tag.parse::<Category>().ok() == Some(category))
    }

    /// Categories covered by an expert, in library order, followed by others.
    pub fn categories(&self) -> Vec<Category> {
        let mut out: Vec<Category> = self
            .experts
            .iter()
            .filter_map(|e| e.domain_tag.parse().ok())
            .filter(|c| *c != Category::Others)
            .collect();
        out.push(Category::Others);
        out
    }
}

/// How pass 1 decides on a category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchStrategy {
    /// Ask the base model directly.
    Prompt,
    /// Ask the base model with the classification expert loaded.
    Classifier,
}

impl DispatchStrategy {
    pub fn name(self) -> &'static str {
        match self {
            DispatchStrategy::Prompt => "prompt",
            DispatchStrategy::Classifier => "classifier",
        }
    }
}

impl FromStr for DispatchStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prompt" => Ok(DispatchStrategy::Prompt),
            "classifier" => Ok(DispatchStrategy::Classifier),
            _ => Err(Error::Config(format!("unknown dispatch strategy `{s}`"))),
        }
    }
}

/// Pass-1 behaviour for [`two_pass_infer`].
#[derive(Clone, Debug, PartialEq)]
pub enum Strategy {
    Dispatch(DispatchStrategy),
    /// A fixed composed expert, e.g. the result of CEM.
    Fixed(ExpertVector),
}

/// Answer of a two-pass inference with the time spent in each pass.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoPassOutput {
    /// Dispatch decision; `None` for a fixed strategy.
    pub category: Option<Category>,
    pub answer: Vec<Token>,
    pub pass1: Duration,
    pub pass2: Duration,
}

fn with_adaptation(model: &PolicyModel, expert: Option<&ExpertVector>) -> Result<PolicyModel> {
    let mut m = model.clone();
    m.set_adaptation(expert.cloned().map(Adaptation::Expert))?;
    Ok(m)
}

/// Pass 1 with whatever adaptation `model` carries: greedy-decode the category
/// token after the dispatch framing.
fn categorize(model: &PolicyModel, prompt: &[Token]) -> Result<Category> {
    let framed = tasks::dispatch_template(prompt);
    let g = model.generate(&framed, Decode::Greedy, 2)?;
    Ok(tasks::parse_category(&g.tokens))
}

/// Holds one prepared model per pass-1 and pass-2 configuration, so repeated
/// inference does not rebuild adapted weights.
#[derive(Clone, Debug)]
pub struct TwoPassEngine {
    base: PolicyModel,
    classifier: Option<PolicyModel>,
    experts: BTreeMap<Category, PolicyModel>,
}

impl TwoPassEngine {
    pub fn new(model: &PolicyModel, library: &ExpertLibrary) -> Result<Self> {
        let base = with_adaptation(model, None)?;
        let classifier = library
            .classifier()
            .map(|c| with_adaptation(model, Some(c)))
            .transpose()?;
        let mut experts = BTreeMap::new();
        for e in library.experts() {
            if let Ok(cat) = e.domain_tag.parse::<Category>() {
                if cat != Category::Others {
                    experts.insert(cat, with_adaptation(model, Some(e))?);
                }
            }
        }
        Ok(Self {
            base,
            classifier,
            experts,
        })
    }

    pub fn base(&self) -> &PolicyModel {
        &self.base
    }

    /// Pass 1 only. A category without an expert in the library counts as
    /// others.
    pub fn dispatch(&self, strategy: DispatchStrategy, prompt: &[Token]) -> Result<Category> {
        let model = match strategy {
            DispatchStrategy::Prompt => &self.base,
            DispatchStrategy::Classifier => {
                self.classifier.as_ref().ok_or(Error::ClassifierMissing)?
            }
        };
        let cat = categorize(model, prompt)?;
        Ok(if self.experts.contains_key(&cat) {
            cat
        } else {
            Category::Others
        })
    }

    /// Both passes; "others" answers with the base weights.
    pub fn infer(
        &self,
        strategy: &Strategy,
        prompt: &[Token],
        max_new: usize,
    ) -> Result<TwoPassOutput> {
        let start = Instant::now();
        let (category, fixed, answerer) = match strategy {
            Strategy::Dispatch(d) => {
                let cat = self.dispatch(*d, prompt)?;
                let m = self.experts.get(&cat).unwrap_or(&self.base);
                (Some(cat), None, Some(m))
            }
            Strategy::Fixed(e) => (None, Some(with_adaptation(&self.base, Some(e))?), None),
        };
        let pass1 = start.elapsed();
        let model = answerer.or(fixed.as_ref()).expect("one answering model");
        let start = Instant::now();
        let g = model.generate(prompt, Decode::Greedy, max_new)?;
        Ok(TwoPassOutput {
            category,
            answer: g.tokens,
            pass1,
            pass2: start.elapsed(),
        })
    }

    /// Two-pass outputs for every instance, in order.
    pub fn infer_all(
        &self,
        strategy: &Strategy,
        instances: &[TaskInstance],
    ) -> Result<Vec<TwoPassOutput>> {
        instances
            .par_iter()
            .map(|inst| self.infer(strategy, inst.prompt.prompt_tokens(), inst.max_new_tokens()))
            .collect()
    }

    /// Exact-match accuracy of two-pass inference.
    pub fn accuracy(&self, strategy: &Strategy, instances: &[TaskInstance]) -> Result<f64> {
        if instances.is_empty() {
            return Err(Error::EmptyEval);
        }
        let outs = self.infer_all(strategy, instances)?;
        let correct = outs
            .iter()
            .zip(instances)
            .filter(|(o, inst)| tasks::reward(&o.answer, &inst.reference.tokens) > 0.0)
            .count();
        Ok(correct as f64 / instances.len() as f64)
    }
}

/// Pass-1 category from the base weights (any adaptation on `model` is
/// ignored).
pub fn dispatch_prompt(
    model: &PolicyModel,
    library: &ExpertLibrary,
    prompt: &[Token],
) -> Result<Category> {
    TwoPassEngine::new(model, library)?.dispatch(DispatchStrategy::Prompt, prompt)
}

/// Pass-1 category with the classification expert loaded.
pub fn dispatch_classifier(
    model: &PolicyModel,
    library: &ExpertLibrary,
    prompt: &[Token],
) -> Result<Category> {
    if library.classifier().is_none() {
        return Err(Error::ClassifierMissing);
    }
    TwoPassEngine::new(model, library)?.dispatch(DispatchStrategy::Classifier, prompt)
}

pub fn two_pass_infer(
    model: &PolicyModel,
    library: &ExpertLibrary,
    strategy: &Strategy,
    prompt: &[Token],
    max_new: usize,
) -> Result<TwoPassOutput> {
    TwoPassEngine::new(model, library)?.infer(strategy, prompt, max_new)
}

/// Whether CEM searches one weight per expert or one per expert and layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    PerVector,
    PerLayer,
}

impl Granularity {
    pub fn name(self) -> &'static str {
        match self {
            Granularity::PerVector => "per_vector",
            Granularity::PerLayer => "per_layer",
        }
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_vector" => Ok(Granularity::PerVector),
            "per_layer" => Ok(Granularity::PerLayer),
            _ => Err(Error::Config(format!("unknown granularity `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CemConfig {
    pub num_samples: usize,
    pub num_elites: usize,
    pub max_iterations: usize,
    pub granularity: Granularity,
    /// Project every sample (per layer group) onto `Σα = 1`.
    pub normalized: bool,
    /// Initial mean; `1/K` for every weight when absent.
    pub init_mu: Option<Vec<f64>>,
    pub init_sigma: f64,
    /// Stop once every standard deviation falls below this.
    pub convergence_sigma: f64,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            num_samples: 32,
            num_elites: 8,
            max_iterations: 100,
            granularity: Granularity::PerVector,
            normalized: false,
            init_mu: None,
            init_sigma: 0.5,
            convergence_sigma: 1e-8,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 || self.num_elites == 0 {
            return Err(Error::Config("CEM needs at least one sample and elite".into()));
        }
        if self.num_elites > self.num_samples {
            return Err(Error::Config(format!(
                "num_elites {} exceeds num_samples {}",
                self.num_elites, self.num_samples
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("CEM needs at least one iteration".into()));
        }
        if !(self.init_sigma >= 0.0 && self.init_sigma.is_finite()) {
            return Err(Error::Config("init_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Sampling parameters of one CEM step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CemStepParams {
    pub num_samples: usize,
    pub num_elites: usize,
    pub normalized: bool,
    /// Size of each group projected onto `Σα = 1` in normalized mode.
    pub group_size: usize,
    pub seed: u64,
    pub iteration: usize,
}

/// Samples, their scores and the refitted distribution of one CEM step.
#[derive(Clone, Debug, PartialEq)]
pub struct CemStep<S> {
    pub samples: Vec<Vec<f64>>,
    pub scores: Vec<S>,
    pub elites: Vec<usize>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

const MAX_RESAMPLES: usize = 10_000;

/// Draws sample `index` of iteration `iteration` from `N(μ, σ²)`, projecting
/// each group onto `Σα = 1` in normalized mode and redrawing a group whose sum
/// is within 1e-6 of zero.
pub fn cem_sample(mu: &[f64], sigma: &[f64], p: &CemStepParams, index: usize) -> Result<Vec<f64>> {
    let mut rng = SeededRng::new(p.seed, "cem-sample", &[p.iteration as u64, index as u64]);
    let mut x = vec![0.0; mu.len()];
    let group = if p.normalized { p.group_size.max(1) } else { mu.len().max(1) };
    for start in (0..mu.len()).step_by(group) {
        let end = (start + group).min(mu.len());
        let mut attempts = 0;
        loop {
            for i in start..end {
                x[i] = mu[i] + sigma[i] * rng.normal();
            }
            if !p.normalized {
                break;
            }
            let sum: f64 = x[start..end].iter().sum();
            if sum.abs() >= 1e-6 {
                x[start..end].iter_mut().for_each(|v| *v /= sum);
                break;
            }
            attempts += 1;
            if attempts >= MAX_RESAMPLES {
                return Err(Error::Range(
                    "CEM samples keep summing to zero; cannot normalize".into(),
                ));
            }
        }
    }
    Ok(x)
}

/// Indices of the `num_elites` best scores, best first; equal scores keep the
/// lower sample index first.
pub fn elite_indices<S: PartialOrd>(scores: &[S], num_elites: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx.truncate(num_elites);
    idx
}

/// Elite refit: the mean and population standard deviation (divisor = number
/// of elites) of the best-scoring samples, accumulated in ascending sample
/// index.
pub fn cem_update<S: PartialOrd>(
    samples: &[Vec<f64>],
    scores: &[S],
    num_elites: usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<usize>)> {
    if samples.is_empty() || samples.len() != scores.len() {
        return Err(Error::Range(format!(
            "{} samples with {} scores",
            samples.len(),
            scores.len()
        )));
    }
    if num_elites == 0 || num_elites > samples.len() {
        return Err(Error::Range(format!(
            "{num_elites} elites from {} samples",
            samples.len()
        )));
    }
    let elites = elite_indices(scores, num_elites);
    let mut ordered = elites.clone();
    ordered.sort_unstable();
    let dims = samples[0].len();
    let n = num_elites as f64;
    let mut mu = vec![0.0; dims];
    for &i in &ordered {
        for (m, x) in mu.iter_mut().zip(&samples[i]) {
            *m += x;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dims];
    for &i in &ordered {
        for ((v, x), m) in var.iter_mut().zip(&samples[i]).zip(&mu) {
            *v += (x - m) * (x - m);
        }
    }
    let sigma = var.into_iter().map(|v| (v / n).sqrt()).collect();
    Ok((mu, sigma, elites))
}

/// One CEM iteration: sample, score in parallel, refit to the elites.
pub fn cem_step<S, F>(mu: &[f64], sigma: &[f64], p: &CemStepParams, scorer: F) -> Result<CemStep<S>>
where
    S: PartialOrd + Send,
    F: Fn(&[f64]) -> Result<S> + Sync,
{
    if mu.len() != sigma.len() {
        return Err(Error::Shape(format!(
            "mu has {} entries, sigma {}",
            mu.len(),
            sigma.len()
        )));
    }
    if sigma.iter().any(|s| s.is_nan() || *s < 0.0) {
        return Err(Error::Range("sigma must be non-negative".into()));
    }
    let samples: Vec<Vec<f64>> = (0..p.num_samples)
        .map(|j| cem_sample(mu, sigma, p, j))
        .collect::<Result<_>>()?;
    let scores: Vec<S> = samples.par_iter().map(|x| scorer(x)).collect::<Result<_>>()?;
    let (mu, sigma, elites) = cem_update(&samples, &scores, p.num_elites)?;
    Ok(CemStep {
        samples,
        scores,
        elites,
        mu,
        sigma,
    })
}

/// Best sample seen over a whole CEM run.
#[derive(Clone, Debug, PartialEq)]
pub struct CemOutcome<S> {
    pub best: Vec<f64>,
    pub best_score: S,
    pub iterations: usize,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Runs CEM over `dims` weights until `max_iterations` or convergence and
/// returns the best evaluated sample (earliest on ties), not the final mean.
pub fn cem_search<S, F>(
    dims: usize,
    group_size: usize,
    cfg: &CemConfig,
    seed: u64,
    scorer: F,
) -> Result<CemOutcome<S>>
where
    S: PartialOrd + Clone + Send,
    F: Fn(&[f64]) -> Result<S> + Sync,
{
    cfg.validate()?;
    if dims == 0 {
        return Err(Error::EmptyLibrary);
    }
    let mut mu = match &cfg.init_mu {
        Some(m) if m.len() != dims => {
            return Err(Error::Config(format!(
                "init_mu has {} entries, expected {dims}",
                m.len()
            )))
        }
        Some(m) => m.clone(),
        None => vec![1.0 / group_size.max(1) as f64; dims],
    };
    let mut sigma = vec![cfg.init_sigma; dims];
    let mut best: Option<(Vec<f64>, S)> = None;
    let mut iterations = 0;
    for iteration in 0..cfg.max_iterations {
        let p = CemStepParams {
            num_samples: cfg.num_samples,
            num_elites: cfg.num_elites,
            normalized: cfg.normalized,
            group_size,
            seed,
            iteration,
        };
        let step = cem_step(&mu, &sigma, &p, &scorer)?;
        iterations += 1;
        for (x, s) in step.samples.iter().zip(&step.scores) {
            if best.as_ref().is_none_or(|(_, b)| s > b) {
                best = Some((x.clone(), s.clone()));
            }
        }
        mu = step.mu;
        sigma = step.sigma;
        if sigma.iter().all(|s| *s < cfg.convergence_sigma) {
            break;
        }
    }
    let (best, best_score) = best.expect("at least one iteration");
    Ok(CemOutcome {
        best,
        best_score,
        iterations,
        mu,
        sigma,
    })
}

/// Holdout accuracy with the mean per-token log-likelihood of the correct
/// generations as a tie-break (`-∞` when nothing is correct). Compares
/// lexicographically.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct HoldoutScore {
    pub accuracy: f64,
    pub loglik: f64,
}

/// Greedy holdout evaluation under `model`'s current adaptation.
pub fn score_holdout(model: &PolicyModel, holdout: &[TaskInstance]) -> Result<HoldoutScore> {
    if holdout.is_empty() {
        return Err(Error::EmptyEval);
    }
    let gens = crate::train::greedy_answers(model, holdout)?;
    let mut correct = 0usize;
    let mut ll = 0.0;
    let mut tokens = 0usize;
    for (g, inst) in gens.iter().zip(holdout) {
        if tasks::reward(&g.tokens, &inst.reference.tokens) > 0.0 {
            correct += 1;
            ll += g.logps.iter().sum::<f64>();
            tokens += g.logps.len();
        }
    }
    Ok(HoldoutScore {
        accuracy: correct as f64 / holdout.len() as f64,
        loglik: if correct == 0 {
            f64::NEG_INFINITY
        } else {
            ll / tokens as f64
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Base,
    Prompt,
    Classifier,
    Cem,
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StrategyKind::Base => "base",
            StrategyKind::Prompt => "prompt",
            StrategyKind::Classifier => "classifier",
            StrategyKind::Cem => "cem",
        };
        f.write_str(s)
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(StrategyKind::Base),
            "prompt" => Ok(StrategyKind::Prompt),
            "classifier" => Ok(StrategyKind::Classifier),
            "cem" => Ok(StrategyKind::Cem),
            _ => Err(Error::Config(format!("unknown strategy `{s}`"))),
        }
    }
}

/// Outcome of adapting to a task from its few-shot holdout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationResult {
    pub strategy: StrategyKind,
    /// Majority dispatch decision on the holdout (dispatch strategies only).
    pub category: Option<Category>,
    /// Interpolation weights over the library, layer-major for per-layer
    /// granularity; one-hot or empty for dispatch strategies.
    pub alphas: Vec<f64>,
    pub granularity: Granularity,
    pub normalized: bool,
    pub holdout_score: f64,
    /// `None` when no holdout answer was correct.
    pub tiebreak_loglik: Option<f64>,
    pub iterations: usize,
    /// Distinct prompts evaluated during the search.
    #[serde(skip)]
    pub evaluated_prompts: BTreeSet<Vec<Token>>,
}

impl AdaptationResult {
    /// Rebuilds `z′` from the recorded weights; `None` means the base model.
    pub fn composed(&self, library: &ExpertLibrary) -> Result<Option<ExpertVector>> {
        if self.alphas.is_empty() {
            return Ok(None);
        }
        compose_alphas(library.experts(), &self.alphas, self.granularity, self.normalized)
            .map(Some)
    }
}

/// `z′` for flat weights laid out as [`AdaptationResult::alphas`].
pub fn compose_alphas(
    experts: &[ExpertVector],
    alphas: &[f64],
    granularity: Granularity,
    normalized: bool,
) -> Result<ExpertVector> {
    let k = experts.len();
    if k == 0 {
        return Err(Error::EmptyLibrary);
    }
    match granularity {
        Granularity::PerVector => compose(experts, &CompositionWeights::new(alphas.to_vec(), normalized)?),
        Granularity::PerLayer => {
            if !alphas.len().is_multiple_of(k) {
                return Err(Error::Shape(format!(
                    "{} per-layer weights for {k} experts",
                    alphas.len()
                )));
            }
            let per_layer = alphas
                .chunks(k)
                .map(|c| CompositionWeights::new(c.to_vec(), normalized))
                .collect::<Result<Vec<_>>>()?;
            compose_layerwise(experts, &per_layer)
        }
    }
}

fn layer_count(experts: &[ExpertVector]) -> usize {
    experts[0]
        .entries
        .keys()
        .map(|id| id.layer + 1)
        .max()
        .unwrap_or(0)
}

/// Few-shot adaptation: CEM over interpolation weights, maximizing holdout
/// accuracy with the log-likelihood tie-break. Only `holdout` is ever
/// evaluated.
pub fn adapt_cem(
    model: &PolicyModel,
    library: &ExpertLibrary,
    holdout: &[TaskInstance],
    cfg: &CemConfig,
    seed: u64,
) -> Result<AdaptationResult> {
    let experts = library.experts();
    if experts.is_empty() {
        return Err(Error::EmptyLibrary);
    }
    if holdout.is_empty() {
        return Err(Error::EmptyEval);
    }
    let k = experts.len();
    let dims = match cfg.granularity {
        Granularity::PerVector => k,
        Granularity::PerLayer => k * layer_count(experts),
    };
    let base = with_adaptation(model, None)?;
    let seen = Mutex::new(BTreeSet::new());
    let scorer = |alphas: &[f64]| -> Result<HoldoutScore> {
        let z = compose_alphas(experts, alphas, cfg.granularity, cfg.normalized)?;
        let m = with_adaptation(&base, Some(&z))?;
        let mut guard = seen.lock().expect("audit lock");
        guard.extend(holdout.iter().map(|i| i.prompt.tokens.clone()));
        drop(guard);
        score_holdout(&m, holdout)
    };
    let out = cem_search(dims, k, cfg, seed, scorer)?;
    Ok(AdaptationResult {
        strategy: StrategyKind::Cem,
        category: None,
        alphas: out.best,
        granularity: cfg.granularity,
        normalized: cfg.normalized,
        holdout_score: out.best_score.accuracy,
        tiebreak_loglik: out.best_score.loglik.is_finite().then_some(out.best_score.loglik),
        iterations: out.iterations,
        evaluated_prompts: seen.into_inner().expect("audit lock"),
    })
}

/// Task-level record of a dispatch strategy on the holdout: accuracy of
/// two-pass inference and the most frequent category (earliest in library
/// order on ties).
pub fn adapt_dispatch(
    model: &PolicyModel,
    library: &ExpertLibrary,
    strategy: DispatchStrategy,
    holdout: &[TaskInstance],
) -> Result<AdaptationResult> {
    if holdout.is_empty() {
        return Err(Error::EmptyEval);
    }
    let engine = TwoPassEngine::new(model, library)?;
    let outs = engine.infer_all(&Strategy::Dispatch(strategy), holdout)?;
    let categories = library.categories();
    let mut counts = vec![0usize; categories.len()];
    let mut correct = 0usize;
    let mut ll = 0.0;
    let mut tokens = 0usize;
    for (o, inst) in outs.iter().zip(holdout) {
        let cat = o.category.expect("dispatch decision");
        if let Some(i) = categories.iter().position(|c| *c == cat) {
            counts[i] += 1;
        }
        if tasks::reward(&o.answer, &inst.reference.tokens) > 0.0 {
            correct += 1;
            let model = engine.experts.get(&cat).unwrap_or(&engine.base);
            let seq = inst.prompt.with_answer(&o.answer);
            let (sum, per) = model.sequence_log_prob(&seq)?;
            ll += sum;
            tokens += per.len();
        }
    }
    let best = (0..counts.len())
        .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
        .expect("others is always a category");
    let category = categories[best];
    let alphas = match library
        .experts()
        .iter()
        .position(|e| e.domain_tag.parse::<Category>().ok() == Some(category))
    {
        Some(i) => CompositionWeights::one_hot(library.len(), i).alphas,
        None => Vec::new(),
    };
    Ok(AdaptationResult {
        strategy: match strategy {
            DispatchStrategy::Prompt => StrategyKind::Prompt,
            DispatchStrategy::Classifier => StrategyKind::Classifier,
        },
        category: Some(category),
        alphas,
        granularity: Granularity::PerVector,
        normalized: true,
        holdout_score: correct as f64 / holdout.len() as f64,
        tiebreak_loglik: (correct > 0).then(|| ll / tokens as f64),
        iterations: 0,
        evaluated_prompts: holdout.iter().map(|i| i.prompt.tokens.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tasks::{generate_family, Family, SplitSizes};

    fn tiny_model() -> PolicyModel {
        PolicyModel::init(ModelConfig::default(), 3).unwrap()
    }

    fn library(model: &PolicyModel, classifier: bool) -> ExpertLibrary {
        let ranks = model.svf_ranks();
        let experts = Category::EXPERTS
            .iter()
            .enumerate()
            .map(|(i, c)| {
                ExpertVector::filled(c.name(), &ranks, 0.9 + 0.1 * i as f64).with_domain_tag(c.name())
            })
            .collect();
        let zc = classifier.then(|| ExpertVector::ones("classifier", &ranks));
        ExpertLibrary::new(experts, zc).unwrap()
    }

    #[test]
    fn forced_elite_update() {
        let samples = vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]];
        let (mu, sigma, elites) = cem_update(&samples, &[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(elites, vec![3, 2]);
        assert_eq!(mu, vec![3.5]);
        assert_eq!(sigma, vec![0.5]);
    }

    #[test]
    fn all_elites_give_sample_mean() {
        let samples = vec![vec![1.0, -2.0], vec![2.0, 0.0], vec![6.0, 5.0]];
        let (mu, _, _) = cem_update(&samples, &[0.3, 0.1, 0.2], 3).unwrap();
        assert_eq!(mu, vec![3.0, 1.0]);
    }

    #[test]
    fn equal_scores_pick_lower_indices() {
        assert_eq!(elite_indices(&[1.0; 5], 2), vec![0, 1]);
        assert_eq!(elite_indices(&[0.0, 2.0, 2.0, 1.0], 2), vec![1, 2]);
    }

    #[test]
    fn normalized_samples_sum_to_one_per_group() {
        let p = CemStepParams {
            num_samples: 16,
            num_elites: 4,
            normalized: true,
            group_size: 3,
            seed: 4,
            iteration: 0,
        };
        let mu = vec![1.0 / 3.0; 6];
        let sigma = vec![0.5; 6];
        for j in 0..p.num_samples {
            let x = cem_sample(&mu, &sigma, &p, j).unwrap();
            for g in x.chunks(3) {
                assert!((g.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn single_normalized_expert_is_forced_to_one() {
        let cfg = CemConfig {
            normalized: true,
            max_iterations: 3,
            ..CemConfig::default()
        };
        let out = cem_search(1, 1, &cfg, 0, |a: &[f64]| Ok(-a[0])).unwrap();
        assert_eq!(out.best, vec![1.0]);
    }

    #[test]
    fn cem_finds_quadratic_optimum() {
        let target = [0.2, 0.3, 0.5];
        let cfg = CemConfig {
            max_iterations: 50,
            ..CemConfig::default()
        };
        let out = cem_search(3, 3, &cfg, 1, |a: &[f64]| {
            Ok(-a.iter().zip(&target).map(|(x, t)| (x - t) * (x - t)).sum::<f64>())
        })
        .unwrap();
        for (x, t) in out.best.iter().zip(&target) {
            assert!((x - t).abs() <= 1e-2, "{:?}", out.best);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = CemConfig {
            num_elites: 40,
            ..CemConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn duplicate_domain_tags_rejected() {
        let ranks = tiny_model().svf_ranks();
        let e = ExpertVector::ones("a", &ranks).with_domain_tag("math");
        assert!(ExpertLibrary::new(vec![e.clone(), e], None).is_err());
    }

    #[test]
    fn missing_classifier() {
        let m = tiny_model();
        let lib = library(&m, false);
        let p = vec![crate::model::vocab::digit(1)];
        assert!(matches!(
            dispatch_classifier(&m, &lib, &p),
            Err(Error::ClassifierMissing)
        ));
    }

    #[test]
    fn ones_classifier_matches_prompt_dispatch() {
        let m = tiny_model();
        let lib = library(&m, true);
        let engine = TwoPassEngine::new(&m, &lib).unwrap();
        let split = generate_family(Family::Mod10Add, 0, SplitSizes::default()).unwrap();
        for inst in &split.test[..20] {
            let p = inst.prompt.prompt_tokens();
            assert_eq!(
                engine.dispatch(DispatchStrategy::Prompt, p).unwrap(),
                engine.dispatch(DispatchStrategy::Classifier, p).unwrap()
            );
        }
    }

    #[test]
    fn others_answers_with_base_and_one_hot_matches_expert() {
        let m = tiny_model();
        // Library without experts: every decision falls back to others.
        let empty = ExpertLibrary::new(Vec::new(), None).unwrap();
        let engine = TwoPassEngine::new(&m, &empty).unwrap();
        let split = generate_family(Family::TokenReverse, 0, SplitSizes::default()).unwrap();
        let inst = &split.test[0];
        let p = inst.prompt.prompt_tokens();
        let out = engine
            .infer(&Strategy::Dispatch(DispatchStrategy::Prompt), p, 5)
            .unwrap();
        assert_eq!(out.category, Some(Category::Others));
        assert_eq!(out.answer, m.generate(p, Decode::Greedy, 5).unwrap().tokens);

        let lib = library(&m, false);
        let z = compose(lib.experts(), &CompositionWeights::one_hot(3, 1)).unwrap();
        let fixed = two_pass_infer(&m, &lib, &Strategy::Fixed(z), p, 5).unwrap();
        let mut em = m.clone();
        em.set_expert(lib.experts()[1].clone()).unwrap();
        assert_eq!(fixed.answer, em.generate(p, Decode::Greedy, 5).unwrap().tokens);
    }

    #[test]
    fn adapt_cem_only_touches_holdout() {
        let m = tiny_model();
        let lib = library(&m, false);
        let split = generate_family(Family::Mod10Add3Op, 0, SplitSizes::default()).unwrap();
        let cfg = CemConfig {
            num_samples: 4,
            num_elites: 2,
            max_iterations: 2,
            ..CemConfig::default()
        };
        let r = adapt_cem(&m, &lib, &split.few_shot_holdout, &cfg, 0).unwrap();
        let holdout: BTreeSet<Vec<Token>> = split
            .few_shot_holdout
            .iter()
            .map(|i| i.prompt.tokens.clone())
            .collect();
        assert_eq!(r.evaluated_prompts, holdout);
        assert!(split
            .test
            .iter()
            .all(|i| !r.evaluated_prompts.contains(&i.prompt.tokens)));
        assert_eq!(r.alphas.len(), 3);
        assert!((0.0..=1.0).contains(&r.holdout_score));
        let z = r.composed(&lib).unwrap().unwrap();
        let again = compose_alphas(lib.experts(), &r.alphas, r.granularity, r.normalized).unwrap();
        assert_eq!(z, again);
    }

    #[test]
    fn adapt_cem_is_replayable() {
        let m = tiny_model();
        let lib = library(&m, false);
        let split = generate_family(Family::MajorityChoice, 0, SplitSizes::default()).unwrap();
        let cfg = CemConfig {
            num_samples: 4,
            num_elites: 2,
            max_iterations: 2,
            granularity: Granularity::PerLayer,
            normalized: true,
            ..CemConfig::default()
        };
        let a = adapt_cem(&m, &lib, &split.few_shot_holdout, &cfg, 5).unwrap();
        let b = adapt_cem(&m, &lib, &split.few_shot_holdout, &cfg, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.alphas.len(), 6);
        for g in a.alphas.chunks(3) {
            assert!((g.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn empty_library_rejected() {
        let m = tiny_model();
        let lib = ExpertLibrary::new(Vec::new(), None).unwrap();
        let split = generate_family(Family::Mod10Add3Op, 0, SplitSizes::default()).unwrap();
        assert!(matches!(
            adapt_cem(&m, &lib, &split.few_shot_holdout, &CemConfig::default(), 0),
            Err(Error::EmptyLibrary)
        ));
    }

    #[test]
    fn result_json_fields() {
        let r = AdaptationResult {
            strategy: StrategyKind::Cem,
            category: None,
            alphas: vec![0.5, 0.5],
            granularity: Granularity::PerVector,
            normalized: true,
            holdout_score: 0.7,
            tiebreak_loglik: None,
            iterations: 3,
            evaluated_prompts: BTreeSet::new(),
        };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in ["strategy", "alphas", "granularity", "normalized", "holdout_score", "tiebreak_loglik", "iterations"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["strategy"], "cem");
    }
}
