//! `svf`: pretrain a base model, train SVF experts and the dispatch
//! classifier, adapt to unseen tasks and run the analysis experiments.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

mod run_dir;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use svf_core::adapt::{
    adapt_cem, adapt_dispatch, DispatchStrategy, ExpertLibrary, Granularity, Strategy,
    StrategyKind, TwoPassEngine,
};
use svf_core::analysis::{
    alpha_table, confusion, labeled_prompts, pca_report, run_ablation_grid, standard_ablation_rows,
    transfer_experiment,
};
use svf_core::checkpoint::{self, CheckpointKind, CheckpointMeta, FactorCache};
use svf_core::config::RunConfig;
use svf_core::model::{Adaptation, PolicyModel};
use svf_core::pipeline::{self, TaskData};
use svf_core::svf::ExpertVector;
use svf_core::tasks::{generate_family, Category, Family, Portion};
use svf_core::train::evaluate;

use run_dir::{RunDir, UsageError};

#[derive(Parser)]
#[command(name = "svf", version, about = "SVF expert training and two-pass self-adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; the reference configuration when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing output directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain a base model until its task accuracies sit in the configured band.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Pretraining seed (defaults to experiment.base_seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the singular-value factor cache of a model checkpoint.
    Decompose {
        /// Model checkpoint or run directory.
        #[arg(long)]
        model: PathBuf,
        /// Output JSON file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Train an SVF expert on one training family.
    TrainExpert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        family: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the classification expert used for dispatch.
    TrainClassifier {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Adapt to a task with one of the dispatch strategies or few-shot CEM.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Directory holding expert (and classifier) checkpoints.
        #[arg(long)]
        library: PathBuf,
        #[arg(long)]
        task: String,
        /// prompt, classifier or cem.
        #[arg(long)]
        strategy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of holdout instances to adapt on (at most the holdout size).
        #[arg(long)]
        holdout: Option<usize>,
        /// per_vector or per_layer (CEM only).
        #[arg(long)]
        granularity: Option<String>,
    },
    /// Greedy accuracy of a model, optionally with an expert or LoRA adapter.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        task: String,
        /// train, validation, test or few_shot_holdout.
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write the score JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analysis reports.
    Analyze {
        #[command(subcommand)]
        report: Report,
    },
    /// Task data utilities.
    Task {
        #[command(subcommand)]
        action: TaskCmd,
    },
}

#[derive(Subcommand)]
enum Report {
    /// Singular-value energy ratios of every adaptable matrix.
    Pca {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated r values.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 4, 8, 16, 32])]
        grid: Vec<usize>,
    },
    /// Dispatch confusion matrices for both strategies.
    Confusion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        library: PathBuf,
    },
    /// Apply a library trained on one model to another.
    Transfer {
        #[command(flatten)]
        common: Common,
        /// Library trained on the source model.
        #[arg(long)]
        source_library: PathBuf,
        #[arg(long)]
        target_model: PathBuf,
        /// The target model's own library, enabling pooled few-shot CEM.
        #[arg(long)]
        target_library: Option<PathBuf>,
    },
    /// The seven-row adapter ablation.
    Ablation {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum TaskCmd {
    /// Write every split of a family as line-delimited JSON.
    Dump {
        #[arg(long)]
        family: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => RunConfig::load(p)
            .map_err(|e| usage(format!("config {}: {e}", p.display()))),
    }
}

fn parse_family(name: &str) -> Result<Family> {
    name.parse::<Family>().map_err(|e| usage(e.to_string()))
}

fn model_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("model.svf2")
    } else {
        p.to_path_buf()
    }
}

/// Loads a model checkpoint, reusing a `factors.json` next to it when it
/// matches the weights.
fn load_model(p: &Path) -> Result<PolicyModel> {
    let path = model_path(p);
    let (mut model, _) =
        checkpoint::load_model(&path).with_context(|| format!("loading {}", path.display()))?;
    let cache = path.with_file_name("factors.json");
    if cache.exists() {
        FactorCache::load(&cache)?.install(&mut model)?;
    }
    Ok(model)
}

fn category_rank(e: &ExpertVector) -> usize {
    e.domain_tag
        .parse::<Category>()
        .map(Category::index)
        .unwrap_or(usize::MAX)
}

/// Collects expert checkpoints from `dir` and its immediate subdirectories.
/// The expert tagged `classifier` becomes the classification expert.
fn load_library(dir: &Path) -> Result<ExpertLibrary> {
    let mut files = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading library {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            let mut inner: Vec<PathBuf> = fs::read_dir(&p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            inner.sort();
            files.extend(inner.into_iter().filter(|f| f.extension().is_some_and(|x| x == "svf2")));
        } else if p.extension().is_some_and(|x| x == "svf2") {
            files.push(p);
        }
    }
    let mut experts = Vec::new();
    let mut classifier = None;
    for f in files {
        let bytes = fs::read(&f)?;
        if checkpoint::peek_kind(&bytes)? != CheckpointKind::Expert {
            continue;
        }
        let (e, _) = checkpoint::expert_from_bytes(&bytes)?;
        if e.domain_tag == "classifier" {
            classifier = Some(e);
        } else {
            experts.push(e);
        }
    }
    if experts.is_empty() {
        bail!("no expert checkpoints under {}", dir.display());
    }
    experts.sort_by(|a, b| (category_rank(a), &a.name).cmp(&(category_rank(b), &b.name)));
    Ok(ExpertLibrary::new(experts, classifier)?)
}

fn created(cmd: &str, seed: u64) -> String {
    format!("{cmd} seed {seed}")
}

#[derive(Serialize)]
struct Score {
    task: String,
    split: String,
    accuracy: f64,
    instances: usize,
}

fn cmd_pretrain(common: &Common, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let seed = seed.unwrap_or(cfg.experiment.base_seed);
    let dir = RunDir::create(&common.out, common.overwrite, &cfg, seed)?;
    let data = TaskData::generate(&cfg)?;
    let (model, report) = pipeline::pretrain(&cfg, &data, seed)?;
    let meta = CheckpointMeta {
        name: format!("base-s{seed}"),
        domain_tag: "base".into(),
        config_hash: cfg.hash(),
        created: created("pretrain", seed),
        ..CheckpointMeta::default()
    };
    checkpoint::save_model(&dir.file("model.svf2"), &model, &meta)?;
    // Later stages see the 32-bit checkpoint, so the cache is built from it.
    let (stored, _) = checkpoint::load_model(&dir.file("model.svf2"))?;
    FactorCache::from_model(&stored)?.save(&dir.file("factors.json"))?;
    dir.write_json("pretrain.json", &report)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in report.epoch_losses.iter().enumerate() {
        writeln!(csv, "{},{l:.10}", i + 1)?;
    }
    dir.write("metrics.csv", csv.as_bytes())?;
    for (f, a) in &report.accuracies {
        println!("{f}: validation accuracy {a:.3}");
    }
    println!("wrote {}", dir.path().display());
    Ok(())
}

fn cmd_decompose(model: &Path, out: &Path, overwrite: bool) -> Result<()> {
    if out.exists() && !overwrite {
        return Err(usage(format!(
            "{} already exists; pass --overwrite to replace it",
            out.display()
        )));
    }
    let path = model_path(model);
    let (m, _) = checkpoint::load_model(&path)?;
    FactorCache::from_model(&m)?.save(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_train_expert(common: &Common, model: &Path, family: &str, seed: u64) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let family = parse_family(family)?;
    if family.is_unseen() {
        return Err(usage(format!("{family} is held out from expert training")));
    }
    let model = load_model(model)?;
    let dir = RunDir::create(&common.out, common.overwrite, &cfg, seed)?;
    let data = TaskData::generate(&cfg)?;
    let (expert, metrics) = pipeline::train_expert(&cfg, &model, data.split(family), seed)?;
    checkpoint::save_expert(&dir.file("expert.svf2"), &expert, &created("train-expert", seed))?;
    dir.write("metrics.csv", metrics.to_csv().as_bytes())?;
    let base = evaluate(&model, None, &data.split(family).test)?;
    let test = evaluate(&model, Some(&Adaptation::Expert(expert)), &data.split(family).test)?;
    dir.write_json(
        "summary.json",
        &serde_json::json!({
            "family": family.name(),
            "best_epoch": metrics.best_epoch,
            "best_val_acc": metrics.best_val_acc,
            "base_test_acc": base,
            "test_acc": test,
        }),
    )?;
    println!(
        "{family}: best epoch {} validation {:.3}, test {test:.3} (base {base:.3})",
        metrics.best_epoch, metrics.best_val_acc
    );
    Ok(())
}

fn cmd_train_classifier(common: &Common, model: &Path, seed: u64) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let model = load_model(model)?;
    let dir = RunDir::create(&common.out, common.overwrite, &cfg, seed)?;
    let data = TaskData::generate(&cfg)?;
    let (mut zc, metrics) = pipeline::train_classifier(&cfg, &model, &data, seed)?;
    zc.domain_tag = "classifier".into();
    checkpoint::save_expert(
        &dir.file("classifier.svf2"),
        &zc,
        &created("train-classifier", seed),
    )?;
    dir.write("metrics.csv", metrics.to_csv().as_bytes())?;
    println!(
        "classifier: best epoch {} validation {:.3}",
        metrics.best_epoch, metrics.best_val_acc
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_adapt(
    common: &Common,
    model: &Path,
    library: &Path,
    task: &str,
    strategy: &str,
    seed: u64,
    holdout: Option<usize>,
    granularity: Option<&str>,
) -> Result<()> {
    let mut cfg = load_config(common.config.as_deref())?;
    let family = parse_family(task)?;
    let kind: StrategyKind = strategy.parse().map_err(|e: svf_core::Error| usage(e.to_string()))?;
    if let Some(g) = granularity {
        cfg.cem.granularity = g
            .parse::<Granularity>()
            .map_err(|e| usage(e.to_string()))?;
    }
    let model = load_model(model)?;
    let lib = load_library(library)?;
    let split = generate_family(family, cfg.task.data_seed, cfg.task.sizes)?;
    let n = holdout.unwrap_or(split.few_shot_holdout.len());
    if n == 0 || n > split.few_shot_holdout.len() {
        return Err(usage(format!(
            "holdout must be between 1 and {}",
            split.few_shot_holdout.len()
        )));
    }
    let shots = &split.few_shot_holdout[..n];
    let dir = RunDir::create(&common.out, common.overwrite, &cfg, seed)?;
    let engine = TwoPassEngine::new(&model, &lib)?;
    let (result, strategy) = match kind {
        StrategyKind::Cem => {
            let r = adapt_cem(&model, &lib, shots, &cfg.cem, seed)?;
            let z = r
                .composed(&lib)?
                .expect("CEM always records interpolation weights");
            dir.write(
                "alphas.csv",
                alpha_table(&lib, &[(family.name().to_string(), r.clone())]).as_bytes(),
            )?;
            (r, Strategy::Fixed(z))
        }
        StrategyKind::Prompt | StrategyKind::Classifier => {
            let d = if kind == StrategyKind::Prompt {
                DispatchStrategy::Prompt
            } else {
                DispatchStrategy::Classifier
            };
            (adapt_dispatch(&model, &lib, d, shots)?, Strategy::Dispatch(d))
        }
        StrategyKind::Base => return Err(usage("strategy must be prompt, classifier or cem")),
    };
    dir.write_json("adaptation.json", &result)?;
    let outs = engine.infer_all(&strategy, &split.test)?;
    let correct = outs
        .iter()
        .zip(&split.test)
        .filter(|(o, i)| svf_core::tasks::reward(&o.answer, &i.reference.tokens) > 0.0)
        .count();
    let test_acc = correct as f64 / split.test.len() as f64;
    let base = evaluate(&model, None, &split.test)?;
    dir.write_json(
        "evaluation.json",
        &serde_json::json!({
            "task": family.name(),
            "strategy": kind.to_string(),
            "holdout": n,
            "holdout_score": result.holdout_score,
            "test_acc": test_acc,
            "base_test_acc": base,
        }),
    )?;
    // Wall-clock timings vary between runs and are kept apart from the
    // reproducible artifacts.
    let mut timings = String::from("index,pass1_us,pass2_us\n");
    for (i, o) in outs.iter().enumerate() {
        writeln!(timings, "{i},{},{}", o.pass1.as_micros(), o.pass2.as_micros())?;
    }
    dir.write("timings.csv", timings.as_bytes())?;
    println!(
        "{family} {kind}: holdout {:.3}, test {test_acc:.3} (base {base:.3})",
        result.holdout_score
    );
    Ok(())
}

fn cmd_eval(
    config: Option<&Path>,
    model: &Path,
    adapter: Option<&Path>,
    task: &str,
    split: &str,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let family = parse_family(task)?;
    let portion = Portion::ALL
        .into_iter()
        .find(|p| p.name() == split)
        .ok_or_else(|| usage(format!("unknown split `{split}`")))?;
    let model = load_model(model)?;
    let adaptation = match adapter {
        None => None,
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            Some(match checkpoint::peek_kind(&bytes)? {
                CheckpointKind::Expert => Adaptation::Expert(checkpoint::expert_from_bytes(&bytes)?.0),
                CheckpointKind::Lora => Adaptation::Lora(checkpoint::lora_from_bytes(&bytes)?.0),
                CheckpointKind::Model => bail!("{} is a model, not an adapter", p.display()),
            })
        }
    };
    let data = generate_family(family, cfg.task.data_seed, cfg.task.sizes)?;
    let instances = data.portion(portion);
    let score = Score {
        task: family.name().to_string(),
        split: portion.name().to_string(),
        accuracy: evaluate(&model, adaptation.as_ref(), instances)?,
        instances: instances.len(),
    };
    let mut text = serde_json::to_string_pretty(&score)?;
    text.push('\n');
    if let Some(o) = out {
        fs::write(o, &text).with_context(|| format!("writing {}", o.display()))?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_analyze(report: &Report) -> Result<()> {
    match report {
        Report::Pca {
            common,
            model,
            grid,
        } => {
            let cfg = load_config(common.config.as_deref())?;
            let model = load_model(model)?;
            let dir = RunDir::create(&common.out, common.overwrite, &cfg, 0)?;
            let r = pca_report(model.factors()?, grid)?;
            dir.write("pca.csv", r.to_csv().as_bytes())?;
            println!("wrote {}", dir.file("pca.csv").display());
        }
        Report::Confusion {
            common,
            model,
            library,
        } => {
            let cfg = load_config(common.config.as_deref())?;
            let model = load_model(model)?;
            let lib = load_library(library)?;
            let dir = RunDir::create(&common.out, common.overwrite, &cfg, 0)?;
            let data = TaskData::generate(&cfg)?;
            let labeled = labeled_prompts(&data.all(), Portion::Test);
            let mut summary = serde_json::Map::new();
            for s in [DispatchStrategy::Prompt, DispatchStrategy::Classifier] {
                if s == DispatchStrategy::Classifier && lib.classifier().is_none() {
                    continue;
                }
                let cm = confusion(&model, &lib, s, &labeled)?;
                dir.write(&format!("confusion_{}.csv", s.name()), cm.to_csv().as_bytes())?;
                summary.insert(
                    s.name().to_string(),
                    serde_json::json!({
                        "pooled_accuracy": cm.pooled_accuracy(),
                        "diagonal_dominant": cm.diagonal_dominant(),
                    }),
                );
                println!("{}: pooled accuracy {:.3}", s.name(), cm.pooled_accuracy());
            }
            dir.write_json("confusion.json", &summary)?;
        }
        Report::Transfer {
            common,
            source_library,
            target_model,
            target_library,
        } => {
            let cfg = load_config(common.config.as_deref())?;
            let source = load_library(source_library)?;
            let target = load_model(target_model)?;
            let target_lib = target_library.as_deref().map(load_library).transpose()?;
            let dir = RunDir::create(&common.out, common.overwrite, &cfg, cfg.experiment.cem_seed)?;
            let data = TaskData::generate(&cfg)?;
            let report = transfer_experiment(
                &source,
                &target,
                target_lib.as_ref(),
                &data.unseen,
                &cfg.experiment.shuffle_seeds,
                &cfg.cem,
                cfg.experiment.cem_seed,
            )?;
            dir.write("transfer.csv", report.to_csv().as_bytes())?;
            dir.write_json("transfer.json", &report)?;
            print!("{}", report.to_csv());
        }
        Report::Ablation {
            common,
            model,
            seed,
        } => {
            let cfg = load_config(common.config.as_deref())?;
            let model = load_model(model)?;
            let dir = RunDir::create(&common.out, common.overwrite, &cfg, *seed)?;
            let data = TaskData::generate(&cfg)?;
            let table = run_ablation_grid(
                &model,
                data.split(cfg.ablation.train_family),
                data.split(cfg.ablation.unseen_family),
                &standard_ablation_rows(),
                &cfg.ablation_config(*seed),
            )?;
            dir.write("ablation.csv", table.to_csv().as_bytes())?;
            dir.write_json("ablation.json", &table)?;
            print!("{}", table.to_csv());
        }
    }
    Ok(())
}

fn cmd_task(action: &TaskCmd) -> Result<()> {
    match action {
        TaskCmd::Dump {
            family,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let split = generate_family(parse_family(family)?, cfg.task.data_seed, cfg.task.sizes)?;
            let mut buf = Vec::new();
            split.dump_jsonl(&mut buf)?;
            match out {
                Some(p) => fs::write(p, &buf).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{}", String::from_utf8(buf)?),
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Cmd::Pretrain { common, seed } => cmd_pretrain(common, *seed),
        Cmd::Decompose {
            model,
            out,
            overwrite,
        } => cmd_decompose(model, out, *overwrite),
        Cmd::TrainExpert {
            common,
            model,
            family,
            seed,
        } => cmd_train_expert(common, model, family, *seed),
        Cmd::TrainClassifier {
            common,
            model,
            seed,
        } => cmd_train_classifier(common, model, *seed),
        Cmd::Adapt {
            common,
            model,
            library,
            task,
            strategy,
            seed,
            holdout,
            granularity,
        } => cmd_adapt(
            common,
            model,
            library,
            task,
            strategy,
            *seed,
            *holdout,
            granularity.as_deref(),
        ),
        Cmd::Eval {
            config,
            model,
            adapter,
            task,
            split,
            out,
        } => cmd_eval(
            config.as_deref(),
            model,
            adapter.as_deref(),
            task,
            split,
            out.as_deref(),
        ),
        Cmd::Analyze { report } => cmd_analyze(report),
        Cmd::Task { action } => cmd_task(action),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
