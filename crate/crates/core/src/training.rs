//! Optimization loop, ensembles, cross-validation and ablation grids.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::config::{TaskKind, TrainConfig};
use crate::data::{carve_validation, holdout_split, Dataset, EncodedData, Fold, FoldFile, HoldoutSpec, TransformConfig, TransformState};
use crate::error::{Error, Result};
use crate::head::{self, Metric, MetricSummary};
use crate::interactions::Route;
use crate::model::{Architecture, Batch, Model, PassOptions};
use crate::optim::{cosine_lr, Adam};
use crate::par;

/// Fraction of each fold's training part held out for model selection.
pub const FOLD_VALIDATION_FRACTION: f64 = 0.125;

/// One evaluation point of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub train_loss: f64,
    pub validation_metric: Option<f64>,
    pub sigma: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub metric: Metric,
    /// Training loss of every optimizer step.
    pub losses: Vec<f64>,
    pub trace: Vec<EvalRecord>,
    /// Iteration of the returned snapshot.
    pub best_iteration: usize,
    pub best_validation: Option<f64>,
    pub test_metric: Option<f64>,
    /// Test RMSE divided by the training target's standard deviation.
    pub test_rmse_standardized: Option<f64>,
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    /// One JSON object per evaluation point.
    pub fn json_lines(&self) -> String {
        self.trace
            .iter()
            .map(|r| serde_json::to_string(r).expect("serializable record") + "\n")
            .collect()
    }
}

/// Standardization applied to regression targets during optimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetScale {
    pub mean: f64,
    pub std: f64,
}

impl TargetScale {
    pub fn fit(targets: &[f64]) -> Self {
        let (mean, std) = head::mean_std(targets);
        TargetScale {
            mean,
            std: if std > 0.0 { std } else { 1.0 },
        }
    }
}

fn initial_bias(task: TaskKind, targets: &[f64]) -> f64 {
    match task {
        TaskKind::Regression => 0.0,
        TaskKind::Classification => {
            let p = (targets.iter().sum::<f64>() / targets.len() as f64).clamp(1e-6, 1.0 - 1e-6);
            (p / (1.0 - p)).ln()
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Score of `model` on `data` in the original target units.
fn score(model: &Model, data: &EncodedData, scale: Option<TargetScale>) -> Result<f64> {
    let metric = Metric::for_task(model.arch.task);
    let mut preds = model.predict(data)?;
    if let Some(s) = scale {
        preds.iter_mut().for_each(|p| *p = s.mean + s.std * *p);
    }
    metric.evaluate(&preds, &data.targets)
}

fn better(metric: Metric, candidate: f64, best: Option<f64>) -> bool {
    match best {
        None => true,
        Some(b) if metric.higher_is_better() => candidate > b,
        Some(b) => candidate < b,
    }
}

/// Trains one model for `cfg.max_iteration` steps. With a validation set
/// the returned model is the snapshot with the best validation metric,
/// otherwise the final state. Regression heads are rescaled at the end so
/// the model predicts in the original target units.
pub fn train(
    cfg: &TrainConfig,
    train: &EncodedData,
    validation: Option<&EncodedData>,
    tasks: usize,
) -> Result<(Model, TrainReport)> {
    let started = Instant::now();
    cfg.validate()?;
    if train.n_samples() == 0 {
        return Err(Error::EmptyDataset);
    }
    if cfg.task == TaskKind::Classification {
        head::check_binary(&train.targets)?;
    }
    let metric = Metric::for_task(cfg.task);
    let scale = (cfg.task == TaskKind::Regression).then(|| TargetScale::fit(&train.targets));
    let targets: Vec<f64> = match scale {
        Some(s) => train.targets.iter().map(|y| (y - s.mean) / s.std).collect(),
        None => train.targets.clone(),
    };

    let arch = Architecture::from_config(cfg, train.n_features(), tasks)?;
    let mut model = Model::new(arch, &train.features, initial_bias(cfg.task, &targets), &mut stream(cfg.seed, 0))?;
    let mut batch_rng = stream(cfg.seed, 1);
    let mut dropout_rng = stream(cfg.seed, 2);
    let mut adam = Adam::new(&model.params, cfg.weight_decay);
    let schedule = model.arch.schedule();

    let n = train.n_samples();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let batch_len = cfg.batch_size.min(n);

    let mut report = TrainReport {
        metric,
        losses: Vec::with_capacity(cfg.max_iteration),
        trace: Vec::new(),
        best_iteration: 0,
        best_validation: None,
        test_metric: None,
        test_rmse_standardized: None,
        wall_clock_seconds: 0.0,
    };
    let mut best: Option<Model> = None;

    for t in 0..cfg.max_iteration {
        if cursor + batch_len > n {
            order.shuffle(&mut batch_rng);
            cursor = 0;
        }
        let rows = &order[cursor..cursor + batch_len];
        cursor += batch_len;
        let mut batch = Batch::gather(train, rows);
        batch.targets = rows.iter().map(|&r| targets[r]).collect();

        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, true);
        let opts = PassOptions {
            train: true,
            iteration: t,
            rng: Some(&mut dropout_rng),
            route: Route::Projected,
        };
        let fwd = model.forward(&mut tape, &bound, &batch, opts)?;
        let last = *fwd.cumulative.last().expect("layers");
        let loss = head::hierarchical_loss(
            &mut tape,
            cfg.task,
            &fwd.scores,
            &batch.targets,
            cfg.hierarchical,
            Some(last),
            cfg.output_penalty,
        )?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Divergence {
                iteration: t,
                loss: loss_value,
            });
        }
        tape.backward(loss)?;
        let grads: Vec<Option<Tensor>> = bound.vars.iter().map(|&v| tape.grad(v).cloned()).collect();
        let lr = cosine_lr(cfg.learning_rate, t, cfg.max_iteration);
        adam.step(&mut model.params, &grads, lr);
        for (name, stats) in &fwd.batch_stats {
            model.norm_stats.get_mut(name).expect("norm buffer").update(stats);
        }
        model.iteration = t + 1;
        report.losses.push(loss_value);

        if model.iteration % cfg.eval_every == 0 || model.iteration == cfg.max_iteration {
            let validation_metric = validation.map(|v| score(&model, v, scale)).transpose()?;
            report.trace.push(EvalRecord {
                iteration: model.iteration,
                train_loss: loss_value,
                validation_metric,
                sigma: schedule.sigma(model.iteration),
                learning_rate: lr,
            });
            if let Some(m) = validation_metric {
                if better(metric, m, report.best_validation) {
                    report.best_validation = Some(m);
                    report.best_iteration = model.iteration;
                    best = Some(model.clone());
                }
            }
        }
    }
    let mut model = match best {
        Some(b) => b,
        None => {
            report.best_iteration = model.iteration;
            model
        }
    };
    if let Some(s) = scale {
        model.rescale_output(s.mean, s.std);
    }
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Models averaged after the output link.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<Model>,
}

impl Ensemble {
    pub fn predict(&self, data: &EncodedData) -> Result<Vec<f64>> {
        let mut total = vec![0.0; data.n_samples()];
        for m in &self.members {
            for (t, p) in total.iter_mut().zip(m.predict(data)?) {
                *t += p;
            }
        }
        let k = self.members.len() as f64;
        Ok(total.into_iter().map(|t| t / k).collect())
    }

    pub fn evaluate(&self, data: &EncodedData) -> Result<f64> {
        let task = self.members[0].arch.task;
        Metric::for_task(task).evaluate(&self.predict(data)?, &data.targets)
    }
}

/// Seed of ensemble member `k`.
pub fn member_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_add(k as u64)
}

/// Trains `size` members differing only by seed.
pub fn train_ensemble(
    cfg: &TrainConfig,
    data: &EncodedData,
    validation: Option<&EncodedData>,
    tasks: usize,
    size: usize,
    jobs: usize,
) -> Result<(Ensemble, Vec<TrainReport>)> {
    if size == 0 {
        return Err(Error::Config("ensemble size must be at least 1".into()));
    }
    let runs = par::try_map((0..size).collect(), jobs, |k| {
        let member = TrainConfig {
            seed: member_seed(cfg.seed, k),
            ..cfg.clone()
        };
        train(&member, data, validation, tasks)
    })?;
    let (members, reports) = runs.into_iter().unzip();
    Ok((Ensemble { members }, reports))
}

/// Transforms fitted on a training part and the encoded partitions.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub transforms: TransformState,
    pub train: EncodedData,
    pub validation: EncodedData,
    pub test: EncodedData,
}

impl Prepared {
    pub fn from_rows(
        data: &Dataset,
        cfg: &TrainConfig,
        train: &[usize],
        validation: &[usize],
        test: &[usize],
    ) -> Result<Self> {
        let train_ds = data.select(train);
        let transforms = TransformState::fit_with_vocabulary(
            &train_ds,
            data,
            TransformConfig {
                use_quantile: cfg.use_quantile,
            },
        )?;
        Ok(Prepared {
            train: transforms.apply(&train_ds)?,
            validation: transforms.apply(&data.select(validation))?,
            test: transforms.apply(&data.select(test))?,
            transforms,
        })
    }

    pub fn holdout(data: &Dataset, cfg: &TrainConfig, spec: &HoldoutSpec) -> Result<Self> {
        let split = holdout_split(data.n_samples(), spec)?;
        Self::from_rows(data, cfg, &split.train, &split.validation, &split.test)
    }

    /// Fold partition with a seeded validation subset of the training part.
    pub fn fold(data: &Dataset, cfg: &TrainConfig, fold: &Fold, seed: u64) -> Result<Self> {
        let (rest, validation) = carve_validation(&fold.train, FOLD_VALIDATION_FRACTION, seed);
        Self::from_rows(data, cfg, &rest, &validation, &fold.test)
    }

    pub fn tasks(&self) -> usize {
        self.transforms.n_tasks()
    }

    fn validation_set(&self) -> Option<&EncodedData> {
        (self.validation.n_samples() > 0).then_some(&self.validation)
    }
}

/// Result of training on one split.
#[derive(Debug, Clone)]
pub struct Run {
    pub ensemble: Ensemble,
    pub reports: Vec<TrainReport>,
    pub test_metric: f64,
    /// Regression only: test RMSE over the training target's deviation.
    pub test_rmse_standardized: Option<f64>,
}

/// Trains `cfg.ensemble_size` members on a prepared split and scores the
/// test part.
pub fn run_split(cfg: &TrainConfig, prepared: &Prepared, jobs: usize) -> Result<Run> {
    let (ensemble, mut reports) = train_ensemble(
        cfg,
        &prepared.train,
        prepared.validation_set(),
        prepared.tasks(),
        cfg.ensemble_size,
        jobs,
    )?;
    let test_metric = ensemble.evaluate(&prepared.test)?;
    let sd = TargetScale::fit(&prepared.train.targets).std;
    let test_rmse_standardized = (cfg.task == TaskKind::Regression).then_some(test_metric / sd);
    for (r, m) in reports.iter_mut().zip(&ensemble.members) {
        let single = Metric::for_task(cfg.task).evaluate(&m.predict(&prepared.test)?, &prepared.test.targets)?;
        r.test_metric = Some(single);
        r.test_rmse_standardized = (cfg.task == TaskKind::Regression).then_some(single / sd);
    }
    Ok(Run {
        ensemble,
        reports,
        test_metric,
        test_rmse_standardized,
    })
}

/// Per-fold outcome of a cross-validation.
#[derive(Debug, Clone)]
pub struct FoldRun {
    pub name: String,
    pub prepared: Prepared,
    pub run: Run,
}

#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub summary: MetricSummary,
    pub folds: Vec<FoldRun>,
}

/// Trains and scores every fold; any fold error aborts the whole run.
pub fn cross_validate(data: &Dataset, folds: &FoldFile, cfg: &TrainConfig, jobs: usize) -> Result<CrossValidation> {
    folds.validate(data.n_samples())?;
    let items: Vec<(String, Fold)> = folds.folds.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    // fold workers take the pool; members inside a fold run inline
    let inner = if items.len() > 1 { 1 } else { jobs };
    let runs = par::try_map(items, jobs, |(name, fold)| {
        let prepared = Prepared::fold(data, cfg, &fold, cfg.seed)?;
        let run = run_split(cfg, &prepared, inner)?;
        Ok::<_, Error>(FoldRun { name, prepared, run })
    })?;
    let metric = Metric::for_task(cfg.task);
    let summary = MetricSummary::from_folds(metric, runs.iter().map(|f| f.run.test_metric).collect());
    Ok(CrossValidation { summary, folds: runs })
}

/// Grid over depth and prototype count, with optional component removal
/// applied to every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub layers: Vec<usize>,
    pub prototypes: Vec<usize>,
    pub no_hierarchy: bool,
    pub no_prototypes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub layers: usize,
    pub prototypes: usize,
    pub hierarchical: bool,
    pub use_prototypes: bool,
    pub metric: Metric,
    pub value: f64,
    pub value_standardized: Option<f64>,
}

impl AblationSpec {
    pub fn cells(&self, base: &TrainConfig) -> Result<Vec<TrainConfig>> {
        if self.layers.is_empty() || self.prototypes.is_empty() {
            return Err(Error::Config("ablation grid is empty".into()));
        }
        let mut out = Vec::new();
        for &layers in &self.layers {
            for &prototypes in &self.prototypes {
                let cfg = TrainConfig {
                    layers,
                    prototypes,
                    hierarchical: base.hierarchical && !self.no_hierarchy,
                    use_prototypes: base.use_prototypes && !self.no_prototypes,
                    ..base.clone()
                };
                cfg.validate()?;
                out.push(cfg);
            }
        }
        Ok(out)
    }
}

/// Scores every cell on the same split with the same seed.
pub fn ablate(prepared: &Prepared, base: &TrainConfig, spec: &AblationSpec, jobs: usize) -> Result<Vec<AblationCell>> {
    let cells = spec.cells(base)?;
    par::try_map(cells, jobs, |cfg| {
        let run = run_split(&cfg, prepared, 1)?;
        Ok(AblationCell {
            layers: cfg.layers,
            prototypes: cfg.prototypes,
            hierarchical: cfg.hierarchical,
            use_prototypes: cfg.use_prototypes,
            metric: Metric::for_task(cfg.task),
            value: run.test_metric,
            value_standardized: run.test_rmse_standardized,
        })
    })
}
