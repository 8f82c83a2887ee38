use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use protonam::config::{ModelKind, TrainConfig};
use protonam::data::{holdout_split, Dataset, FoldFile, HoldoutSpec, Schema};
use protonam::explain::{self, ShapeOptions};
use protonam::head::Metric;
use protonam::modelfile::FittedModel;
use protonam::training::{self, AblationSpec, Prepared};
use protonam::{svg, Error};

mod error;

use error::{CliError, Context, EXIT_INPUT};

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "protonam", version, about = "Prototypical neural additive models")]
struct Cli {
    /// Overrides the configuration seed, the split seed and the fold seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for folds, members and ablation cells (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Directory for written artifacts.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (or ensemble) on a seeded holdout split.
    Train(TrainArgs),
    /// Cross-validate over a fold file.
    Crossval(CrossvalArgs),
    /// Score rows with a saved model or ensemble.
    Predict(PredictArgs),
    /// Export shape functions, prototypes and interaction surfaces.
    Explain(ExplainArgs),
    /// Train a grid of depths and prototype counts on one split.
    Ablate(AblateArgs),
    /// Write a seeded k-fold file.
    Folds(FoldsArgs),
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// JSON training configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model_kind: Option<String>,
    #[arg(long)]
    ensemble_size: Option<usize>,
    #[arg(long)]
    max_iteration: Option<usize>,
}

#[derive(Args)]
struct SplitArgs {
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.7,0.1,0.2")]
    split: String,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    split: SplitArgs,
    /// Model file path; ensemble members get a `-<k>` suffix.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CrossvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    folds: PathBuf,
}

#[derive(Args)]
struct ModelSource {
    #[arg(long, conflicts_with = "ensemble_dir")]
    model: Option<PathBuf>,
    /// Directory of `.pnam` files averaged as one ensemble.
    #[arg(long)]
    ensemble_dir: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    source: ModelSource,
    #[arg(long)]
    data: PathBuf,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    source: ModelSource,
    /// Raw table the model was trained on.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    feature: Vec<String>,
    #[arg(long)]
    all_features: bool,
    /// Also plot every layer's cumulative curve.
    #[arg(long)]
    layers: bool,
    /// Write the learned prototypes.
    #[arg(long)]
    prototypes: bool,
    /// Interaction surface for `A,B` (pairwise models).
    #[arg(long)]
    pair: Vec<String>,
    #[arg(long, default_value_t = 200)]
    grid_size: usize,
    /// Add every observed training value to the grid.
    #[arg(long)]
    samples: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    split: SplitArgs,
    /// Comma-separated depths; defaults to the configured depth.
    #[arg(long)]
    layers: Option<String>,
    /// Comma-separated prototype counts; defaults to the configured count.
    #[arg(long)]
    prototypes: Option<String>,
    #[arg(long)]
    no_hierarchy: bool,
    #[arg(long)]
    no_prototypes: bool,
}

#[derive(Args)]
struct FoldsArgs {
    /// Count rows of this table (needs --schema).
    #[arg(long, required_unless_present = "rows")]
    data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    schema: Option<PathBuf>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::input("usage", e.to_string().trim_end());
            eprintln!("{}", err.to_json());
            return ExitCode::from(EXIT_INPUT as u8);
        }
    };
    match run(cli) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            let _ = writeln!(stdout, "{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.code as u8)
        }
    }
}

fn run(cli: Cli) -> CliResult<String> {
    let Cli {
        seed,
        jobs,
        out_dir,
        command,
    } = cli;
    let ctx = Ctx { seed, jobs, out_dir };
    let value = match command {
        Command::Train(a) => train(&ctx, a)?,
        Command::Crossval(a) => crossval(&ctx, a)?,
        Command::Predict(a) => return predict(a),
        Command::Explain(a) => explain_cmd(&ctx, a)?,
        Command::Ablate(a) => ablate(&ctx, a)?,
        Command::Folds(a) => folds(&ctx, a)?,
    };
    Ok(serde_json::to_string_pretty(&value)?)
}

struct Ctx {
    seed: Option<u64>,
    jobs: usize,
    out_dir: PathBuf,
}

impl Ctx {
    fn out(&self, name: &str) -> CliResult<PathBuf> {
        fs::create_dir_all(&self.out_dir)?;
        Ok(self.out_dir.join(name))
    }
}

fn load_inputs(ctx: &Ctx, a: &DataArgs) -> CliResult<(TrainConfig, Dataset)> {
    let schema = Schema::from_json_file(&a.schema).input("schema")?;
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|_| {
                CliError::input("config-not-found", format!("config file not found: {}", p.display()))
            })?;
            TrainConfig::from_json(&text).input("config")?
        }
        None => TrainConfig::default(),
    };
    if let Some(k) = &a.model_kind {
        cfg.model_kind = k.parse::<ModelKind>()?;
    }
    if let Some(n) = a.ensemble_size {
        cfg.ensemble_size = n;
    }
    if let Some(n) = a.max_iteration {
        cfg.max_iteration = n;
    }
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let data = Dataset::load_csv(&a.data, &schema).input("data")?;
    Ok((cfg, data))
}

fn parse_split(text: &str, seed: u64) -> CliResult<HoldoutSpec> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::input("split-invalid", format!("cannot parse split `{text}`")))?;
    match parts[..] {
        [train, validation, test] => Ok(HoldoutSpec {
            train,
            validation,
            test,
            seed,
        }),
        _ => Err(CliError::input("split-invalid", "split needs three fractions")),
    }
}

fn parse_list(text: &str, what: &str) -> CliResult<Vec<usize>> {
    text.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::input("config-invalid", format!("cannot parse {what} list `{text}`")))
}

fn member_paths(base: &Path, n: usize) -> Vec<PathBuf> {
    if n == 1 {
        return vec![base.to_path_buf()];
    }
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let ext = base.extension().and_then(|s| s.to_str()).unwrap_or("pnam");
    (0..n).map(|k| base.with_file_name(format!("{stem}-{k}.{ext}"))).collect()
}

fn train(ctx: &Ctx, a: TrainArgs) -> CliResult<Value> {
    let (cfg, data) = load_inputs(ctx, &a.data)?;
    let spec = parse_split(&a.split.split, cfg.seed)?;
    let split = holdout_split(data.n_samples(), &spec)?;
    let prepared = Prepared::from_rows(&data, &cfg, &split.train, &split.validation, &split.test)?;
    let run = training::run_split(&cfg, &prepared, ctx.jobs)?;
    let base = match a.out {
        Some(p) => p,
        None => ctx.out("model.pnam")?,
    };
    if let Some(dir) = base.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let paths = member_paths(&base, run.ensemble.members.len());
    for (model, path) in run.ensemble.members.iter().zip(&paths) {
        FittedModel {
            model: model.clone(),
            transforms: prepared.transforms.clone(),
            config: cfg.clone(),
            schema: data.schema.clone(),
            train_rows: split.train.clone(),
        }
        .save(path)?;
    }
    let metric = Metric::for_task(cfg.task);
    let summary = json!({
        "model_kind": cfg.model_kind,
        "metric": metric,
        "test": run.test_metric,
        "test_standardized": run.test_rmse_standardized,
        "models": paths,
        "advisory": cfg.outside_search_space(),
        "members": run.reports,
    });
    fs::write(base.with_extension("report.json"), serde_json::to_string_pretty(&summary)?)?;
    let trace: String = run.reports.iter().map(|r| r.json_lines()).collect();
    fs::write(base.with_extension("trace.jsonl"), trace)?;
    Ok(json!({
        "metric": metric,
        "test": run.test_metric,
        "test_standardized": run.test_rmse_standardized,
        "models": paths,
    }))
}

fn crossval(ctx: &Ctx, a: CrossvalArgs) -> CliResult<Value> {
    let (cfg, data) = load_inputs(ctx, &a.data)?;
    let folds = FoldFile::from_json_file(&a.folds).input("folds")?;
    let cv = training::cross_validate(&data, &folds, &cfg, ctx.jobs)?;
    let per_fold: serde_json::Map<String, Value> =
        cv.folds.iter().map(|f| (f.name.clone(), json!(f.run.test_metric))).collect();
    let out = json!({
        "metric": cv.summary.metric,
        "mean": cv.summary.value,
        "std": cv.summary.std,
        "folds": per_fold,
    });
    fs::write(ctx.out("crossval.json")?, serde_json::to_string_pretty(&out)?)?;
    Ok(out)
}

fn load_models(source: &ModelSource) -> CliResult<Vec<FittedModel>> {
    match (&source.model, &source.ensemble_dir) {
        (Some(p), None) => Ok(vec![FittedModel::load(p).input("model")?]),
        (None, Some(dir)) => {
            let mut paths: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|_| CliError::input("model-not-found", format!("cannot read {}", dir.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "pnam"))
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(CliError::input(
                    "model-not-found",
                    format!("no .pnam files in {}", dir.display()),
                ));
            }
            paths.iter().map(|p| FittedModel::load(p).input("model")).collect()
        }
        _ => Err(CliError::input("usage", "pass --model or --ensemble-dir")),
    }
}

fn predict(a: PredictArgs) -> CliResult<String> {
    let models = load_models(&a.source)?;
    let data = Dataset::load_unlabeled_csv(&a.data, &models[0].schema).input("data")?;
    let mut total = vec![0.0; data.n_samples()];
    for m in &models {
        let encoded = m.transforms.apply(&data)?;
        for (t, p) in total.iter_mut().zip(m.model.predict(&encoded)?) {
            *t += p;
        }
    }
    let k = models.len() as f64;
    let mut csv = String::from("prediction\n");
    for t in total {
        csv.push_str(&format!("{}\n", t / k));
    }
    match a.output {
        Some(p) => {
            fs::write(&p, csv)?;
            Ok(serde_json::to_string_pretty(&json!({ "rows": data.n_samples(), "output": p }))?)
        }
        None => Ok(csv.trim_end().to_string()),
    }
}

fn explain_cmd(ctx: &Ctx, a: ExplainArgs) -> CliResult<Value> {
    let fitted = load_models(&a.source)?;
    let first = &fitted[0];
    if fitted.iter().any(|f| f.transforms != first.transforms) {
        return Err(CliError::input(
            "ensemble-mismatch",
            "ensemble members were fitted on different preprocessing",
        ));
    }
    let data = Dataset::load_csv(&a.data, &first.schema).input("data")?;
    let train_rows = first.training_rows(&data)?;
    let models: Vec<_> = fitted.iter().map(|f| f.model.clone()).collect();
    let transforms = &first.transforms;
    let mut features = if a.all_features {
        transforms.feature_names()
    } else {
        a.feature.clone()
    };
    features.dedup();
    for f in &features {
        transforms.feature_index(f)?;
    }
    if features.is_empty() && a.pair.is_empty() && !a.prototypes {
        return Err(CliError::input(
            "usage",
            "nothing to explain: pass --feature, --all-features, --pair or --prototypes",
        ));
    }
    fs::create_dir_all(&ctx.out_dir)?;
    let opts = ShapeOptions {
        grid_size: a.grid_size,
        include_samples: a.samples,
        ..ShapeOptions::default()
    };
    let mut written: Vec<PathBuf> = Vec::new();
    let mut exports = Vec::new();
    for f in &features {
        for task in 0..transforms.n_tasks() {
            let e = explain::export_shape(&models, transforms, &train_rows, f, task, &opts)?;
            written.push(explain::write_shape(&e, &ctx.out_dir)?);
            exports.push(e);
        }
    }
    written.extend(svg::render_plots(&exports, &ctx.out_dir, a.layers)?);
    if a.prototypes {
        for (k, f) in fitted.iter().enumerate() {
            let records = explain::prototype_report(&f.model, transforms)?;
            let name = if fitted.len() == 1 {
                "prototypes.csv".to_string()
            } else {
                format!("prototypes-{k}.csv")
            };
            let path = ctx.out_dir.join(name);
            explain::write_prototypes(&records, &path)?;
            written.push(path);
        }
    }
    for p in &a.pair {
        let names: Vec<&str> = p.split(',').map(str::trim).collect();
        let [fa, fb] = names[..] else {
            return Err(CliError::input("usage", format!("--pair expects `A,B`, got `{p}`")));
        };
        if fitted.len() > 1 {
            return Err(Error::Unsupported("interaction surfaces are exported per model; pass --model".into()).into());
        }
        let s = explain::export_surface(&first.model, transforms, &train_rows, (fa, fb))?;
        written.push(explain::write_surface(&s, &ctx.out_dir)?);
        written.push(svg::render_surface(&s, &ctx.out_dir)?);
    }
    Ok(json!({ "members": fitted.len(), "files": written }))
}

fn ablate(ctx: &Ctx, a: AblateArgs) -> CliResult<Value> {
    let (cfg, data) = load_inputs(ctx, &a.data)?;
    let spec = AblationSpec {
        layers: match &a.layers {
            Some(t) => parse_list(t, "layers")?,
            None => vec![cfg.layers],
        },
        prototypes: match &a.prototypes {
            Some(t) => parse_list(t, "prototypes")?,
            None => vec![cfg.prototypes],
        },
        no_hierarchy: a.no_hierarchy,
        no_prototypes: a.no_prototypes,
    };
    let holdout = parse_split(&a.split.split, cfg.seed)?;
    let prepared = Prepared::holdout(&data, &cfg, &holdout)?;
    let cells = training::ablate(&prepared, &cfg, &spec, ctx.jobs)?;
    let out = json!({ "spec": spec, "cells": cells });
    fs::write(ctx.out("ablation.json")?, serde_json::to_string_pretty(&out)?)?;
    Ok(out)
}

fn folds(ctx: &Ctx, a: FoldsArgs) -> CliResult<Value> {
    let rows = match (a.rows, &a.data, &a.schema) {
        (Some(n), _, _) => n,
        (None, Some(d), Some(s)) => {
            let schema = Schema::from_json_file(s).input("schema")?;
            Dataset::load_csv(d, &schema).input("data")?.n_samples()
        }
        _ => return Err(CliError::input("usage", "pass --rows or --data with --schema")),
    };
    let seed = ctx.seed.unwrap_or(0);
    let file = FoldFile::k_fold(rows, a.k, seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, serde_json::to_string(&file)? + "\n")?;
    Ok(json!({ "rows": rows, "folds": a.k, "seed": seed, "output": a.out }))
}

