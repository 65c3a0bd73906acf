//! Analysis experiments: singular-value energy ratios, dispatch confusion
//! matrices, interpolation-weight tables, the adapter ablation grid, and
//! cross-model expert transfer with a shuffled control.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_cem, AdaptationResult, CemConfig, DispatchStrategy, ExpertLibrary, TwoPassEngine};
use crate::error::{Error, Result};
use crate::linalg::SvdFactors;
use crate::lora::{lora_parameter_count, LoraConfig};
use crate::model::{Adaptation, ModelConfig, PolicyModel, SiteSet, Token};
use crate::svf::{shuffle_expert, ExpertVector, MatrixId};
use crate::tasks::{Category, Family, Portion, TaskSplit};
use crate::train::{self, evaluate, Objective, TrainConfig, TrainData};

fn csv_line(out: &mut String, cells: &[String]) {
    writeln!(out, "{}", cells.join(",")).expect("writing to a string");
}

/// Share of the singular-value sum captured by the top `r` values of a
/// descending `sigma`. An all-zero spectrum counts as fully captured.
pub fn pca_ratio_sigma(sigma: &[f64], r: usize) -> Result<f64> {
    if r == 0 || r > sigma.len() {
        return Err(Error::Range(format!(
            "r = {r} outside 1..={}",
            sigma.len()
        )));
    }
    let total: f64 = sigma.iter().sum();
    if total == 0.0 {
        return Ok(1.0);
    }
    if r == sigma.len() {
        return Ok(1.0);
    }
    Ok(sigma[..r].iter().sum::<f64>() / total)
}

pub fn pca_ratio(f: &SvdFactors, r: usize) -> Result<f64> {
    pca_ratio_sigma(&f.sigma, r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaEntry {
    pub matrix: MatrixId,
    pub sigma: Vec<f64>,
    pub ratios: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaReport {
    pub entries: Vec<PcaEntry>,
}

impl PcaReport {
    /// `matrix,r,ratio` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("matrix,r,ratio\n");
        for e in &self.entries {
            for (r, ratio) in &e.ratios {
                csv_line(&mut out, &[e.matrix.to_string(), r.to_string(), format!("{ratio:.10}")]);
            }
        }
        out
    }
}

/// Ratios for every `r` of `grid` within each matrix's rank, always
/// including the full rank.
pub fn pca_report(factors: &BTreeMap<MatrixId, SvdFactors>, grid: &[usize]) -> Result<PcaReport> {
    let entries = factors
        .iter()
        .map(|(id, f)| {
            let mut rs: Vec<usize> = grid
                .iter()
                .copied()
                .filter(|&r| r >= 1 && r <= f.rank())
                .collect();
            rs.push(f.rank());
            rs.sort_unstable();
            rs.dedup();
            let ratios = rs
                .into_iter()
                .map(|r| Ok((r, pca_ratio(f, r)?)))
                .collect::<Result<_>>()?;
            Ok(PcaEntry {
                matrix: *id,
                sigma: f.sigma.clone(),
                ratios,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PcaReport { entries })
}

/// Dispatch outcomes: rows are true categories, columns the decision
/// (the row categories followed by others).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub rows: Vec<Category>,
    pub columns: Vec<Category>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    /// `pairs` are `(truth, decision)`; every row category needs at least one
    /// example. Decisions outside the columns count as others.
    pub fn from_decisions(rows: &[Category], pairs: &[(Category, Category)]) -> Result<Self> {
        let mut columns: Vec<Category> = rows.iter().copied().filter(|c| *c != Category::Others).collect();
        let rows = columns.clone();
        columns.push(Category::Others);
        let mut counts = vec![vec![0usize; columns.len()]; rows.len()];
        for (truth, decision) in pairs {
            let r = rows.iter().position(|c| c == truth).ok_or_else(|| {
                Error::Range(format!("label `{}` is not a confusion row", truth.name()))
            })?;
            let c = columns
                .iter()
                .position(|c| c == decision)
                .unwrap_or(columns.len() - 1);
            counts[r][c] += 1;
        }
        if let Some(r) = counts.iter().position(|row| row.iter().sum::<usize>() == 0) {
            return Err(Error::Range(format!("no examples for `{}`", rows[r].name())));
        }
        Ok(Self {
            rows,
            columns,
            counts,
        })
    }

    /// Row-stochastic rates.
    pub fn rates(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let n = row.iter().sum::<usize>() as f64;
                row.iter().map(|&c| c as f64 / n).collect()
            })
            .collect()
    }

    /// Every diagonal rate strictly exceeds all other rates in its row.
    pub fn diagonal_dominant(&self) -> bool {
        self.rates().iter().enumerate().all(|(i, row)| {
            row.iter()
                .enumerate()
                .all(|(j, &v)| j == i || row[i] > v)
        })
    }

    /// Fraction of all examples dispatched to their own category.
    pub fn pooled_accuracy(&self) -> f64 {
        let total: usize = self.counts.iter().flatten().sum();
        let diag: usize = (0..self.rows.len()).map(|i| self.counts[i][i]).sum();
        diag as f64 / total as f64
    }

    /// `truth,<column…>` with rates.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let mut header = vec!["truth".to_string()];
        header.extend(self.columns.iter().map(|c| c.name().to_string()));
        csv_line(&mut out, &header);
        for (cat, row) in self.rows.iter().zip(self.rates()) {
            let mut cells = vec![cat.name().to_string()];
            cells.extend(row.iter().map(|v| format!("{v:.10}")));
            csv_line(&mut out, &cells);
        }
        out
    }
}

/// Prompts of a portion of every split, labeled with the family's category.
pub fn labeled_prompts(splits: &[TaskSplit], portion: Portion) -> Vec<(Category, Vec<Token>)> {
    splits
        .iter()
        .flat_map(|s| {
            s.portion(portion)
                .iter()
                .map(move |i| (s.family.category(), i.prompt.prompt_tokens().to_vec()))
        })
        .collect()
}

/// Confusion matrix of an arbitrary dispatcher.
pub fn confusion_with<F>(
    rows: &[Category],
    labeled: &[(Category, Vec<Token>)],
    dispatcher: F,
) -> Result<ConfusionMatrix>
where
    F: Fn(&[Token]) -> Result<Category> + Sync,
{
    let decisions: Vec<Category> = labeled
        .par_iter()
        .map(|(_, p)| dispatcher(p))
        .collect::<Result<_>>()?;
    let pairs: Vec<(Category, Category)> = labeled
        .iter()
        .map(|(c, _)| *c)
        .zip(decisions)
        .collect();
    ConfusionMatrix::from_decisions(rows, &pairs)
}

/// Confusion matrix of one dispatch strategy over the library's categories.
pub fn confusion(
    model: &PolicyModel,
    library: &ExpertLibrary,
    strategy: DispatchStrategy,
    labeled: &[(Category, Vec<Token>)],
) -> Result<ConfusionMatrix> {
    let engine = TwoPassEngine::new(model, library)?;
    confusion_with(&library.categories(), labeled, |p| engine.dispatch(strategy, p))
}

/// `task,<expert…>` table of interpolation weights (per-vector results only;
/// per-layer results list every layer's weights in order).
pub fn alpha_table(library: &ExpertLibrary, results: &[(String, AdaptationResult)]) -> String {
    let k = library.len();
    let mut out = String::new();
    let mut header = vec!["task".to_string(), "group".to_string()];
    header.extend(library.experts().iter().map(|e| e.name.clone()));
    csv_line(&mut out, &header);
    for (task, r) in results {
        for (g, chunk) in r.alphas.chunks(k.max(1)).enumerate() {
            let mut cells = vec![task.clone(), g.to_string()];
            cells.extend(chunk.iter().map(|a| format!("{a:.10}")));
            csv_line(&mut out, &cells);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Svf,
    Lora,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Svf => "svf",
            Method::Lora => "lora",
        }
    }
}

/// One ablation cell. For LoRA, `Attention` means the query and value
/// projections (its usual placement) and `Both` every adaptable matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub method: Method,
    pub objective: Objective,
    pub sites: SiteSet,
}

impl AblationSpec {
    /// Matrices actually adapted.
    pub fn target_sites(&self) -> SiteSet {
        match (self.method, self.sites) {
            (Method::Lora, SiteSet::Attention) => SiteSet::QueryValue,
            (_, s) => s,
        }
    }

    /// Exact trainable-parameter count for `model`.
    pub fn parameter_count(&self, model: &ModelConfig, lora_rank: usize) -> usize {
        match self.method {
            Method::Svf => model
                .matrix_ids(self.target_sites())
                .iter()
                .map(|id| {
                    let (n, m) = model.site_shape(id.site);
                    n.min(m)
                })
                .sum(),
            Method::Lora => lora_parameter_count(model, self.target_sites(), lora_rank),
        }
    }
}

/// The seven standard rows: SVF with policy gradient on MLP, attention and
/// both; SVF with next-token prediction on attention; LoRA with policy
/// gradient on attention; LoRA with next-token prediction on attention and on
/// both.
pub fn standard_ablation_rows() -> Vec<AblationSpec> {
    use Method::*;
    use Objective::*;
    let row = |method, objective, sites| AblationSpec {
        method,
        objective,
        sites,
    };
    vec![
        row(Svf, PolicyGradient, SiteSet::Mlp),
        row(Svf, PolicyGradient, SiteSet::Attention),
        row(Svf, PolicyGradient, SiteSet::Both),
        row(Svf, NextToken, SiteSet::Attention),
        row(Lora, PolicyGradient, SiteSet::Attention),
        row(Lora, NextToken, SiteSet::Attention),
        row(Lora, NextToken, SiteSet::Both),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub svf: TrainConfig,
    pub lora: LoraConfig,
    /// Training settings for LoRA rows; the learning rate is swept.
    pub lora_train: TrainConfig,
    pub lora_learning_rates: Vec<f64>,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            svf: TrainConfig::default(),
            lora: LoraConfig::default(),
            lora_train: TrainConfig {
                clip_max_norm: 1.0,
                ..TrainConfig::default()
            },
            lora_learning_rates: vec![2e-4, 5e-4, 2e-3, 5e-3, 2e-2],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub spec: AblationSpec,
    pub params: usize,
    pub learning_rate: f64,
    pub best_val_acc: f64,
    pub train_score: f64,
    pub unseen_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub train_family: Family,
    pub unseen_family: Family,
    pub base_train_score: f64,
    pub base_unseen_score: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// `row,method,objective,sites,params,learning_rate,best_val_acc,train_score,unseen_score`
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "row,method,objective,sites,params,learning_rate,best_val_acc,train_score,unseen_score\n",
        );
        for (i, r) in self.rows.iter().enumerate() {
            csv_line(
                &mut out,
                &[
                    (i + 1).to_string(),
                    r.spec.method.name().to_string(),
                    r.spec.objective.name().to_string(),
                    r.spec.sites.name().to_string(),
                    r.params.to_string(),
                    format!("{}", r.learning_rate),
                    format!("{:.10}", r.best_val_acc),
                    format!("{:.10}", r.train_score),
                    format!("{:.10}", r.unseen_score),
                ],
            );
        }
        out
    }

    pub fn row(&self, spec: &AblationSpec) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.spec == *spec)
    }
}

fn run_cell(
    model: &PolicyModel,
    data: &TrainData,
    train_split: &TaskSplit,
    unseen_split: &TaskSplit,
    spec: &AblationSpec,
    cfg: &AblationConfig,
) -> Result<AblationRow> {
    let params = spec.parameter_count(model.config(), cfg.lora.rank);
    let score = |m: &PolicyModel, a: &Adaptation| -> Result<(f64, f64)> {
        Ok((
            evaluate(m, Some(a), &train_split.test)?,
            evaluate(m, Some(a), &unseen_split.test)?,
        ))
    };
    match spec.method {
        Method::Svf => {
            let m = model.with_svf_sites(spec.target_sites())?;
            let init = train::init_expert(&m, data, &cfg.svf, cfg.seed)?;
            let (adapted, metrics) = train::train_with_objective(
                &m,
                Adaptation::Expert(init),
                data,
                spec.objective,
                &cfg.svf,
                cfg.seed,
            )?;
            let (train_score, unseen_score) = score(&m, &adapted)?;
            Ok(AblationRow {
                spec: *spec,
                params,
                learning_rate: cfg.svf.learning_rate,
                best_val_acc: metrics.best_val_acc,
                train_score,
                unseen_score,
            })
        }
        Method::Lora => {
            let lora = LoraConfig {
                target_sites: spec.target_sites(),
                ..cfg.lora.clone()
            };
            let mut best: Option<(f64, f64, Adaptation)> = None;
            for &lr in &cfg.lora_learning_rates {
                let tc = TrainConfig {
                    learning_rate: lr,
                    ..cfg.lora_train.clone()
                };
                let (adapter, metrics) =
                    train::train_lora(model, data, spec.objective, &lora, &tc, cfg.seed)?;
                if best.as_ref().is_none_or(|(v, _, _)| metrics.best_val_acc > *v) {
                    best = Some((metrics.best_val_acc, lr, Adaptation::Lora(adapter)));
                }
            }
            let (best_val_acc, learning_rate, adapted) =
                best.ok_or_else(|| Error::Config("empty LoRA learning-rate sweep".into()))?;
            let (train_score, unseen_score) = score(model, &adapted)?;
            Ok(AblationRow {
                spec: *spec,
                params,
                learning_rate,
                best_val_acc,
                train_score,
                unseen_score,
            })
        }
    }
}

/// Trains every cell on `train_split` and scores it on the test portions of
/// `train_split` and `unseen_split`. LoRA cells keep the learning rate with
/// the best validation accuracy.
pub fn run_ablation_grid(
    model: &PolicyModel,
    train_split: &TaskSplit,
    unseen_split: &TaskSplit,
    specs: &[AblationSpec],
    cfg: &AblationConfig,
) -> Result<AblationTable> {
    let data = TrainData::from_split(train_split);
    let rows = specs
        .par_iter()
        .map(|spec| run_cell(model, &data, train_split, unseen_split, spec, cfg))
        .collect::<Result<_>>()?;
    Ok(AblationTable {
        train_family: train_split.family,
        unseen_family: unseen_split.family,
        base_train_score: evaluate(model, None, &train_split.test)?,
        base_unseen_score: evaluate(model, None, &unseen_split.test)?,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub family: Family,
    pub base: f64,
    pub ordered: f64,
    pub shuffled: Vec<f64>,
    pub shuffled_mean: f64,
    pub shuffled_std: f64,
    /// Few-shot CEM over both models' experts, scored on the test portion.
    pub cross_cem: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub rows: Vec<TransferRow>,
}

impl TransferReport {
    /// `family,base,ordered,shuffled_mean,shuffled_std,cross_cem`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("family,base,ordered,shuffled_mean,shuffled_std,cross_cem\n");
        for r in &self.rows {
            csv_line(
                &mut out,
                &[
                    r.family.name().to_string(),
                    format!("{:.10}", r.base),
                    format!("{:.10}", r.ordered),
                    format!("{:.10}", r.shuffled_mean),
                    format!("{:.10}", r.shuffled_std),
                    r.cross_cem.map(|v| format!("{v:.10}")).unwrap_or_default(),
                ],
            );
        }
        out
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn retagged(library: &ExpertLibrary, suffix: &str) -> Vec<ExpertVector> {
    library
        .experts()
        .iter()
        .map(|e| {
            let mut e = e.clone();
            e.domain_tag = format!("{}@{suffix}", e.domain_tag);
            e
        })
        .collect()
}

/// Applies `source` experts to `target` for every unseen family: the expert of
/// the family's category as is, under each shuffle seed, and, when the target
/// model's own library is given, few-shot CEM over the pooled experts of both
/// models.
pub fn transfer_experiment(
    source: &ExpertLibrary,
    target: &PolicyModel,
    target_library: Option<&ExpertLibrary>,
    unseen: &[TaskSplit],
    shuffle_seeds: &[u64],
    cem: &CemConfig,
    seed: u64,
) -> Result<TransferReport> {
    if shuffle_seeds.is_empty() {
        return Err(Error::Config("transfer needs at least one shuffle seed".into()));
    }
    let ranks = target.svf_ranks();
    if let Some(e) = source.experts().iter().find(|e| e.ranks() != ranks) {
        return Err(Error::IncompatibleArchitecture(format!(
            "expert `{}` does not match the target model's singular-value ranks",
            e.name
        )));
    }
    let pooled = target_library
        .map(|t| {
            let mut experts = retagged(source, "source");
            experts.extend(retagged(t, "target"));
            ExpertLibrary::new(experts, None)
        })
        .transpose()?;
    let rows = unseen
        .iter()
        .map(|split| {
            let expert = source.expert_for(split.family.category()).ok_or_else(|| {
                Error::IncompatibleExperts(format!(
                    "no `{}` expert for {}",
                    split.family.category().name(),
                    split.family
                ))
            })?;
            let base = evaluate(target, None, &split.test)?;
            let ordered = evaluate(target, Some(&Adaptation::Expert(expert.clone())), &split.test)?;
            let shuffled: Vec<f64> = shuffle_seeds
                .iter()
                .map(|&s| {
                    evaluate(
                        target,
                        Some(&Adaptation::Expert(shuffle_expert(expert, s))),
                        &split.test,
                    )
                })
                .collect::<Result<_>>()?;
            let (shuffled_mean, shuffled_std) = mean_std(&shuffled);
            let cross_cem = pooled
                .as_ref()
                .map(|lib| -> Result<f64> {
                    let r = adapt_cem(target, lib, &split.few_shot_holdout, cem, seed)?;
                    let z = r.composed(lib)?.map(Adaptation::Expert);
                    evaluate(target, z.as_ref(), &split.test)
                })
                .transpose()?;
            Ok(TransferRow {
                family: split.family,
                base,
                ordered,
                shuffled,
                shuffled_mean,
                shuffled_std,
                cross_cem,
            })
        })
        .collect::<Result<_>>()?;
    Ok(TransferReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{svd, Matrix, SeededRng};

    #[test]
    fn ratio_fixture() {
        assert_eq!(pca_ratio_sigma(&[4.0, 3.0, 2.0, 1.0], 2).unwrap(), 0.7);
        assert_eq!(pca_ratio_sigma(&[4.0, 3.0, 2.0, 1.0], 4).unwrap(), 1.0);
        assert!(matches!(pca_ratio_sigma(&[1.0], 2), Err(Error::Range(_))));
        assert!(matches!(pca_ratio_sigma(&[1.0], 0), Err(Error::Range(_))));
        assert_eq!(pca_ratio_sigma(&[0.0, 0.0], 1).unwrap(), 1.0);
    }

    #[test]
    fn rank_one_ratio() {
        let u = Matrix::from_rows(&[&[1.0], &[2.0], &[-1.0]]);
        let v = Matrix::from_rows(&[&[3.0, 1.0]]);
        let f = svd(&u.matmul(&v).unwrap()).unwrap();
        assert!((pca_ratio(&f, 1).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_monotone_and_complete() {
        let mut rng = SeededRng::new(1, "test", &[]);
        let mut factors = BTreeMap::new();
        for (i, (n, m)) in [(6usize, 4usize), (3, 7)].iter().enumerate() {
            let w = Matrix::random_normal(*n, *m, 1.0, &mut rng);
            factors.insert(
                MatrixId::new(i, crate::svf::Site::QProj),
                svd(&w).unwrap(),
            );
        }
        let report = pca_report(&factors, &[1, 2, 3, 50]).unwrap();
        for e in &report.entries {
            assert_eq!(e.ratios.last().unwrap(), &(e.sigma.len(), 1.0));
            assert!(e.ratios.windows(2).all(|w| w[0].1 <= w[1].1));
        }
        assert!(report.to_csv().starts_with("matrix,r,ratio\n"));
    }

    fn labeled() -> Vec<(Category, Vec<Token>)> {
        Category::EXPERTS
            .iter()
            .flat_map(|&c| (0..4).map(move |i| (c, vec![c.token(), i as Token])))
            .collect()
    }

    #[test]
    fn oracle_dispatcher_gives_identity() {
        let cm = confusion_with(&Category::ALL, &labeled(), |p| {
            Ok(Category::from_token(p[0]).unwrap())
        })
        .unwrap();
        assert_eq!(cm.columns.len(), 4);
        for (i, row) in cm.rates().iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, if i == j { 1.0 } else { 0.0 });
            }
        }
        assert!(cm.diagonal_dominant());
        assert_eq!(cm.pooled_accuracy(), 1.0);
    }

    #[test]
    fn always_others_fills_last_column() {
        let cm = confusion_with(&Category::EXPERTS, &labeled(), |_| Ok(Category::Others)).unwrap();
        for row in cm.rates() {
            assert_eq!(row.last(), Some(&1.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        assert!(!cm.diagonal_dominant());
    }

    #[test]
    fn svf_counts_compare() {
        let cfg = ModelConfig::default();
        let spec = |method, sites| AblationSpec {
            method,
            objective: Objective::PolicyGradient,
            sites,
        };
        let both = spec(Method::Svf, SiteSet::Both).parameter_count(&cfg, 16);
        let attn = spec(Method::Svf, SiteSet::Attention).parameter_count(&cfg, 16);
        assert!(both > attn);
        let lora = spec(Method::Lora, SiteSet::Attention).parameter_count(&cfg, 16);
        let expected: usize = cfg
            .matrix_ids(SiteSet::QueryValue)
            .iter()
            .map(|id| {
                let (n, m) = cfg.site_shape(id.site);
                16 * (n + m)
            })
            .sum();
        assert_eq!(lora, expected);
        assert_eq!(standard_ablation_rows().len(), 7);
    }

    #[test]
    fn alpha_table_layout() {
        let ranks = ModelConfig::default().svf_ranks();
        let lib = ExpertLibrary::new(
            vec![
                ExpertVector::ones("m", &ranks).with_domain_tag("math"),
                ExpertVector::ones("c", &ranks).with_domain_tag("code"),
            ],
            None,
        )
        .unwrap();
        let r = AdaptationResult {
            strategy: crate::adapt::StrategyKind::Cem,
            category: None,
            alphas: vec![0.25, 0.75, 1.0, 0.0],
            granularity: crate::adapt::Granularity::PerLayer,
            normalized: true,
            holdout_score: 1.0,
            tiebreak_loglik: Some(-0.1),
            iterations: 1,
            evaluated_prompts: Default::default(),
        };
        let csv = alpha_table(&lib, &[("x".into(), r)]);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("task,group,m,c\n"));
    }
}
