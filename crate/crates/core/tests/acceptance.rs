//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion that ran failed.
//!
//! Criteria 7 and 8 always run. The benchmark-scale criteria 1-5 train on
//! the full Housing and Income tables and take hours on a single core; they
//! run when `PROTONAM_ACCEPTANCE` is `full` or a comma list such as `1,3`.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use protonam::autodiff::{BatchNormMode, Tape, Tensor, Var};
use protonam::config::{ModelKind, Normalization, TaskKind, TrainConfig};
use protonam::data::{
    Column, ColumnKind, ColumnRole, ColumnSchema, Dataset, EncodedData, FoldFile, HoldoutSpec, Schema,
    TransformConfig, TransformState,
};
use protonam::explain::{self, ShapeOptions};
use protonam::head;
use protonam::interactions::Route;
use protonam::model::{Architecture, Batch, Model, PassOptions};
use protonam::modelfile::FittedModel;
use protonam::proto::{proximity_weights, SigmaSchedule, SIGMA_MIN};
use protonam::training::{self, AblationSpec, Prepared};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn load(table: &str, schema: &str) -> Dataset {
    let schema = Schema::from_json_file(&root().join("data").join(schema)).expect("schema");
    Dataset::load_csv(&root().join("data").join(table), &schema).expect("data")
}

fn housing_split() -> HoldoutSpec {
    HoldoutSpec {
        train: 0.7,
        validation: 0.1,
        test: 0.2,
        seed: 0,
    }
}

fn selected() -> BTreeSet<u32> {
    match std::env::var("PROTONAM_ACCEPTANCE") {
        Ok(v) if v.trim() == "full" => (1..=5).collect(),
        Ok(v) => v.split(',').filter_map(|s| s.trim().parse().ok()).collect(),
        Err(_) => BTreeSet::new(),
    }
}

fn main() {
    // `cargo test -- --list` and filters from the default harness are not
    // meaningful here
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let chosen = selected();
    let heavy: [Criterion; 5] = [
        (1, "Housing ProtoNAM 5-member ensemble RMSE <= 0.575", housing_protonam),
        (2, "Housing ProtoNA2M RMSE <= 0.47", housing_protona2m),
        (3, "depth and prototype ablation direction", ablation_direction),
        (4, "Income ProtoNAM 5-fold AUC >= 0.915 and > 0.900", income_protonam),
        (5, "Income multitask by Gender 5-fold AUC >= 0.915 with group shapes", income_multitask),
    ];
    let mut failed = 0;
    let mut report = |id: u32, name: &str, run: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let o = run();
        let status = if o.passed { "PASS" } else { "FAIL" };
        if !o.passed {
            failed += 1;
        }
        println!(
            "{status} criterion {id}: {name} | {} | {:.1}s",
            o.detail,
            start.elapsed().as_secs_f64()
        );
    };
    for (id, name, run) in heavy {
        if chosen.contains(&id) {
            report(id, name, &run);
        } else {
            println!("SKIP criterion {id}: {name} | set PROTONAM_ACCEPTANCE=full or ={id} to run");
        }
    }
    println!("SKIP criterion 6: clinical datasets | restricted data, no criterion attached");
    report(7, "property suite in under 5 minutes", &property_suite);
    report(8, "synthetic oracle suite", &synthetic_oracles);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn housing_protonam() -> Outcome {
    let data = load("housing.csv", "housing.schema.json");
    let cfg = TrainConfig {
        ensemble_size: 5,
        ..TrainConfig::protonam_housing()
    };
    let prepared = Prepared::holdout(&data, &cfg, &housing_split()).expect("split");
    let run = training::run_split(&cfg, &prepared, 0).expect("training");
    let members: Vec<String> = run
        .reports
        .iter()
        .map(|r| format!("{:.4}", r.test_metric.unwrap()))
        .collect();
    outcome(
        run.test_metric <= 0.575,
        format!(
            "ensemble RMSE {:.4} (standardized {:.4}), members [{}]",
            run.test_metric,
            run.test_rmse_standardized.unwrap(),
            members.join(", ")
        ),
    )
}

fn housing_protona2m() -> Outcome {
    let data = load("housing.csv", "housing.schema.json");
    let cfg = TrainConfig::protona2m_housing();
    let prepared = Prepared::holdout(&data, &cfg, &housing_split()).expect("split");
    let run = training::run_split(&cfg, &prepared, 0).expect("training");
    outcome(
        run.test_metric <= 0.47,
        format!(
            "RMSE {:.4} (standardized {:.4})",
            run.test_metric,
            run.test_rmse_standardized.unwrap()
        ),
    )
}

fn ablation_direction() -> Outcome {
    let data = load("housing.csv", "housing.schema.json");
    let base = TrainConfig::protonam_housing();
    let prepared = Prepared::holdout(&data, &base, &housing_split()).expect("split");
    let spec = |layers: Vec<usize>, prototypes: Vec<usize>| AblationSpec {
        layers,
        prototypes,
        no_hierarchy: false,
        no_prototypes: false,
    };
    let mut cells = training::ablate(&prepared, &base, &spec(vec![1, 4], vec![8]), 0).expect("ablation");
    cells.extend(training::ablate(&prepared, &base, &spec(vec![4], vec![128]), 0).expect("ablation"));
    let value = |l: usize, p: usize| {
        cells
            .iter()
            .find(|c| c.layers == l && c.prototypes == p)
            .expect("cell")
            .value
    };
    let (d1t8, d4t8, d4t128) = (value(1, 8), value(4, 8), value(4, 128));
    outcome(
        d4t8 <= d1t8 - 0.02 && d4t128 < d4t8,
        format!("RMSE d1/t8 {d1t8:.4}, d4/t8 {d4t8:.4}, d4/t128 {d4t128:.4}"),
    )
}

fn income_cv(schema: &str) -> (Dataset, TrainConfig, training::CrossValidation) {
    let data = load("income.csv", schema);
    let folds = FoldFile::from_json_file(&root().join("data/income_folds.json")).expect("folds");
    let cfg = TrainConfig::protonam_income();
    let cv = training::cross_validate(&data, &folds, &cfg, 0).expect("cross-validation");
    (data, cfg, cv)
}

fn income_protonam() -> Outcome {
    let (_, _, cv) = income_cv("income.schema.json");
    let s = &cv.summary;
    outcome(
        s.value >= 0.915,
        format!(
            "AUC {:.4} +- {:.4} over folds {:?}; linear baseline 0.900 beaten: {}",
            s.value,
            s.std,
            rounded(&s.folds),
            s.value > 0.900
        ),
    )
}

fn income_multitask() -> Outcome {
    let (data, _, cv) = income_cv("income_multitask.schema.json");
    let s = &cv.summary;
    let fold = &cv.folds[0];
    let excluded = !fold.prepared.transforms.feature_names().iter().any(|f| f == "Gender");
    let tasks = fold.prepared.tasks();
    let dir = tempfile::tempdir().expect("tempdir");
    let mut exported = 0;
    let mut problems = Vec::new();
    // explanations center over the fold's whole training part
    let folds = FoldFile::from_json_file(&root().join("data/income_folds.json")).expect("folds");
    let train_rows = data.select(&folds.folds[&fold.name].train);
    for feature in ["Age", "HoursPerWeek"] {
        for task in 0..tasks {
            match explain::export_shape(
                &fold.run.ensemble.members,
                &fold.prepared.transforms,
                &train_rows,
                feature,
                task,
                &ShapeOptions::default(),
            )
            .and_then(|e| explain::write_shape(&e, dir.path()))
            {
                Ok(_) => exported += 1,
                Err(e) => problems.push(format!("{feature}/{task}: {e}")),
            }
        }
    }
    outcome(
        s.value >= 0.915 && excluded && tasks == 2 && problems.is_empty(),
        format!(
            "AUC {:.4} +- {:.4} over folds {:?}; Gender excluded: {excluded}; {exported} group shape files{}",
            s.value,
            s.std,
            rounded(&s.folds),
            if problems.is_empty() {
                String::new()
            } else {
                format!("; errors: {}", problems.join("; "))
            }
        ),
    )
}

fn rounded(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}

// ---------------------------------------------------------------- criterion 7

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Worst relative error between tape gradients and central differences.
fn gradient_error(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let value = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let root = build(&mut tape, &vars);
        tape.value(root).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let root = build(&mut tape, &vars);
    tape.backward(root).unwrap();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let (mut diff, mut scale_a, mut scale_n) = (0.0, 0.0, 0.0);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= eps;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * eps);
            let a = analytic.data()[i];
            diff += (a - numeric) * (a - numeric);
            scale_a += a * a;
            scale_n += numeric * numeric;
        }
        worst = worst.max(diff.sqrt() / (scale_a.sqrt() + scale_n.sqrt()).max(1e-8));
    }
    worst
}

/// Random linear functional of `y`, so every element gets its own gradient.
fn functional(tape: &mut Tape, y: Var, rng: &mut ChaCha8Rng) -> Var {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(rand_tensor(rng, &shape));
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

fn op_family_error() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, n, h) = (2, 4, 3);
        let x = rand_tensor(&mut rng, &[c, n, h]);
        let w = rand_tensor(&mut rng, &[c, h, h]);
        let b = rand_tensor(&mut rng, &[c, h]);
        let g = rand_tensor(&mut rng, &[c, h]);
        let be = rand_tensor(&mut rng, &[c, h]);
        let m = rand_tensor(&mut rng, &[h, 2]);
        let build = move |t: &mut Tape, v: &[Var]| {
            let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
            let a = t.affine(v[0], v[1], v[2]).unwrap();
            let ln = t.layer_norm(a, v[3], v[4]).unwrap();
            let (bn, _) = t.batch_norm(v[0], v[3], v[4], BatchNormMode::Train).unwrap();
            let e = t.exp(bn);
            let sq = t.square(ln);
            let s = t.add(sq, e).unwrap();
            let d = t.sub(s, v[0]).unwrap();
            let sm = t.softmax(d, 2).unwrap();
            let flat = t.reshape(sm, &[c * n, h]).unwrap();
            let mm = t.matmul(flat, v[5]).unwrap();
            let tr = t.transpose(mm).unwrap();
            let sa = t.sum_axis(ln, 2).unwrap();
            let cat = t.concat(&[ln, a], 2).unwrap();
            let mc = t.masked_concat(cat, &[true, false]).unwrap();
            let gr = t.gather_rows(mm, &[0, 3, 3, 5]).unwrap();
            let sc = t.scale(gr, 0.7);
            let parts = [tr, sa, mc, sc];
            let mut total = functional(t, parts[0], &mut r);
            for &p in &parts[1..] {
                let f = functional(t, p, &mut r);
                total = t.add(total, f).unwrap();
            }
            let mean = t.mean(mc);
            t.add(total, mean).unwrap()
        };
        worst = worst.max(gradient_error(&[x, w, b, g, be, m], &build));

        let xs = rand_tensor(&mut rng, &[c, n]);
        let mu = rand_tensor(&mut rng, &[c, 5]);
        let sl = rand_tensor(&mut rng, &[c, 5]);
        let ic = rand_tensor(&mut rng, &[c, 5]);
        for sigma in [1.0, 0.3] {
            let build = move |t: &mut Tape, v: &[Var]| {
                let mut r = ChaCha8Rng::seed_from_u64(200 + seed);
                let a = t.proto_activate(v[0], v[1], v[2], v[3], sigma).unwrap();
                functional(t, a, &mut r)
            };
            worst = worst.max(gradient_error(&[xs.clone(), mu.clone(), sl.clone(), ic.clone()], &build));
        }
        let scores = rand_tensor(&mut rng, &[6]);
        let targets: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
        let build = move |t: &mut Tape, v: &[Var]| t.bce_with_logits(v[0], &targets).unwrap();
        worst = worst.max(gradient_error(&[scores], &build));
    }
    worst
}

fn random_encoded(features: usize, rows: usize, seed: u64) -> EncodedData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EncodedData {
        features: (0..features).map(|_| (0..rows).map(|_| rng.gen::<f64>()).collect()).collect(),
        targets: (0..rows).map(|_| rng.gen::<f64>()).collect(),
        groups: vec![0; rows],
    }
}

fn perturbed(cfg: &TrainConfig, data: &EncodedData, seed: u64) -> Model {
    let arch = Architecture::from_config(cfg, data.n_features(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(arch, &data.features, 0.1, &mut rng).unwrap();
    for p in model.params.iter_mut() {
        if !p.name.starts_with("proto.") {
            p.value.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
    }
    model.iteration = 40;
    model
}

fn small(kind: ModelKind, norm: Normalization) -> TrainConfig {
    TrainConfig {
        model_kind: kind,
        normalization: norm,
        prototypes: 4,
        layers: 2,
        hidden_dim: 3,
        max_iteration: 100,
        ..TrainConfig::default()
    }
}

fn model_graph_error() -> f64 {
    let data = random_encoded(3, 6, 9);
    let rows: Vec<usize> = (0..6).collect();
    let batch = Batch::gather(&data, &rows);
    let mut worst: f64 = 0.0;
    for (kind, norm) in [
        (ModelKind::Protonam, Normalization::LayerNorm),
        (ModelKind::Protonam, Normalization::BatchNorm),
        (ModelKind::Protona2m, Normalization::LayerNorm),
        (ModelKind::Protonanm, Normalization::LayerNorm),
    ] {
        let model = perturbed(&small(kind, norm), &data, 10);
        let loss = |m: &Model, tape: &mut Tape| {
            let bound = m.params.bind(tape, true);
            let opts = PassOptions {
                train: true,
                ..PassOptions::inference(m.iteration)
            };
            let fwd = m.forward(tape, &bound, &batch, opts).unwrap();
            let last = *fwd.cumulative.last().unwrap();
            let l = head::hierarchical_loss(tape, TaskKind::Regression, &fwd.scores, &batch.targets, true, Some(last), 0.1)
                .unwrap();
            (bound, l)
        };
        let mut tape = Tape::new();
        let (bound, l) = loss(&model, &mut tape);
        tape.backward(l).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (k, p) in model.params.iter().enumerate() {
            let g = tape.grad(bound.vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            let j = rng.gen_range(0..p.value.len());
            let eps = 1e-5;
            let shifted = |d: f64| {
                let mut m = model.clone();
                m.params.get_mut(&p.name).unwrap().data_mut()[j] += d;
                let mut t = Tape::new();
                let (_, l) = loss(&m, &mut t);
                t.value(l).item()
            };
            let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
            let an = g.data()[j];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-3));
        }
    }
    worst
}

fn synthetic_table(rows: usize, seed: u64, f: impl Fn(&[f64]) -> f64, features: usize, lo: f64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(rows); features];
    let mut y = Vec::with_capacity(rows);
    for _ in 0..rows {
        let x: Vec<f64> = (0..features).map(|_| rng.gen_range(lo..1.0)).collect();
        y.push(f(&x));
        for (c, v) in cols.iter_mut().zip(&x) {
            c.push(*v);
        }
    }
    let mut schema: Vec<ColumnSchema> = (0..features)
        .map(|i| ColumnSchema {
            name: format!("x{}", i + 1),
            kind: ColumnKind::Numeric,
            role: ColumnRole::Feature,
        })
        .collect();
    schema.push(ColumnSchema {
        name: "y".into(),
        kind: ColumnKind::Numeric,
        role: ColumnRole::Target,
    });
    let mut columns: Vec<Column> = cols.into_iter().map(Column::Numeric).collect();
    columns.push(Column::Numeric(y));
    Dataset::new(Schema::new(schema).unwrap(), columns).unwrap()
}

fn property_suite() -> Outcome {
    let start = Instant::now();
    let mut checks: Vec<(String, bool)> = Vec::new();

    let op = op_family_error();
    checks.push((format!("op gradients {op:.1e}"), op <= 1e-4));
    let graph = model_graph_error();
    checks.push((format!("model gradients {graph:.1e}"), graph <= 1e-4));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rbf: f64 = 0.0;
    for sigma in [1.0, 0.5, SIGMA_MIN] {
        for _ in 0..1000 {
            let t = rng.gen_range(1..40);
            let mu: Vec<f64> = (0..t).map(|_| rng.gen_range(-0.5..1.5)).collect();
            let w = proximity_weights(rng.gen_range(-1.0..2.0), &mu, sigma);
            rbf = rbf.max((w.iter().sum::<f64>() - 1.0).abs());
        }
    }
    checks.push((format!("weight sums {rbf:.1e}"), rbf <= 1e-9));

    let sched = SigmaSchedule::new(1000, 16.0);
    let strict = (0..1000).all(|t| sched.raw(t as f64 + 1.0) < sched.raw(t as f64));
    checks.push(("sigma schedule".into(), sched.sigma(500) == 0.5 && strict));

    let data = random_encoded(4, 50, 12);
    let mut telescoping = true;
    let mut additive: f64 = 0.0;
    for kind in [ModelKind::Protonam, ModelKind::Protona2m] {
        let model = perturbed(&small(kind, Normalization::LayerNorm), &data, 13);
        let out = model.outputs(&data).unwrap();
        for m in 0..model.arch.layers {
            for term in 0..model.arch.terms.len() {
                for r in 0..data.n_samples() {
                    let prev = if m == 0 { 0.0 } else { out.cumulative[m - 1][term][r] };
                    telescoping &= (prev + out.increments[m][term][r]).to_bits() == out.cumulative[m][term][r].to_bits();
                }
            }
            for r in 0..data.n_samples() {
                let sum: f64 = (0..model.arch.terms.len())
                    .map(|k| model.head_weight(m, 0, k) * out.cumulative[m][k][r])
                    .sum::<f64>()
                    + model.head_bias(m, 0);
                additive = additive.max((sum - out.scores[m][r]).abs());
            }
        }
    }
    checks.push(("telescoping".into(), telescoping));
    checks.push((format!("additive scores {additive:.1e}"), additive <= 1e-9));

    let raw = synthetic_table(300, 14, |x| x[0] - x[1] * x[1] + 0.5 * x[2], 3, 0.0);
    let transforms = TransformState::fit(&raw, TransformConfig { use_quantile: false }).unwrap();
    let encoded = transforms.apply(&raw).unwrap();
    let model = perturbed(&small(ModelKind::Protonam, Normalization::LayerNorm), &encoded, 15);
    let mut layer_sum: f64 = 0.0;
    for f in ["x1", "x2", "x3"] {
        let e = explain::export_shape(
            std::slice::from_ref(&model),
            &transforms,
            &raw,
            f,
            0,
            &ShapeOptions::default(),
        )
        .unwrap();
        for (p, total) in e.contribution_mean.iter().enumerate() {
            let parts: f64 = e.layers.iter().map(|l| l[p]).sum();
            layer_sum = layer_sum.max((parts - total).abs());
        }
    }
    checks.push((format!("export layer sums {layer_sum:.1e}"), layer_sum <= 1e-9));

    let pairs = perturbed(&small(ModelKind::Protona2m, Normalization::LayerNorm), &data, 16);
    let mut moved = data.clone();
    moved.features[3].iter_mut().for_each(|v| *v = 1.0 - *v);
    let (a, b) = (pairs.outputs(&data).unwrap(), pairs.outputs(&moved).unwrap());
    let mut invariant = true;
    for (k, term) in pairs.arch.terms.iter().enumerate() {
        if !term.contains(&3) {
            for m in 0..pairs.arch.layers {
                invariant &= a.increments[m][k]
                    .iter()
                    .zip(&b.increments[m][k])
                    .all(|(u, v)| u.to_bits() == v.to_bits());
            }
        }
    }
    let routes_differ = {
        let rows: Vec<usize> = (0..data.n_samples()).collect();
        let batch = Batch::gather(&data, &rows);
        let run = |route: Route| {
            let mut tape = Tape::new();
            let bound = pairs.params.bind(&mut tape, false);
            let fwd = pairs
                .forward(
                    &mut tape,
                    &bound,
                    &batch,
                    PassOptions {
                        route,
                        ..PassOptions::inference(pairs.iteration)
                    },
                )
                .unwrap();
            tape.value(*fwd.scores.last().unwrap()).data().to_vec()
        };
        run(Route::Projected)
            .iter()
            .zip(run(Route::Literal))
            .map(|(p, l)| (p - l).abs())
            .fold(0.0, f64::max)
    };
    checks.push(("mask invariance".into(), invariant && routes_differ <= 1e-12));

    let cfg = TrainConfig {
        prototypes: 4,
        layers: 2,
        hidden_dim: 8,
        batch_size: 64,
        max_iteration: 40,
        ..TrainConfig::default()
    };
    let (trained, _) = training::train(&cfg, &encoded, None, 1).unwrap();
    let fitted = FittedModel {
        model: trained,
        transforms: transforms.clone(),
        config: cfg.clone(),
        schema: raw.schema.clone(),
        train_rows: Vec::new(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pnam");
    fitted.save(&path).unwrap();
    let back = FittedModel::load(&path).unwrap();
    let p1 = fitted.model.predict(&encoded).unwrap();
    let p2 = back.model.predict(&back.transforms.apply(&raw).unwrap()).unwrap();
    checks.push((
        "model file round trip".into(),
        p1.iter().zip(&p2).all(|(a, b)| a.to_bits() == b.to_bits()),
    ));

    let rerun = |_: ()| {
        let (m, r) = training::train(&cfg, &encoded, Some(&encoded), 1).unwrap();
        let metric = head::Metric::Rmse.evaluate(&m.predict(&encoded).unwrap(), &encoded.targets).unwrap();
        (metric.to_bits(), r.losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>())
    };
    checks.push(("determinism".into(), rerun(()) == rerun(())));

    let elapsed = start.elapsed().as_secs_f64();
    checks.push((format!("elapsed {elapsed:.0}s"), elapsed < 300.0));
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0.as_str()).collect();
    let all: Vec<&str> = checks.iter().map(|c| c.0.as_str()).collect();
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            all.join(", ")
        } else {
            format!("failed: {}", failed.join(", "))
        },
    )
}

// ---------------------------------------------------------------- criterion 8

fn oracle_config(kind: ModelKind) -> TrainConfig {
    TrainConfig {
        model_kind: kind,
        prototypes: 16,
        layers: 2,
        hidden_dim: 32,
        batch_size: 256,
        max_iteration: 600,
        learning_rate: 2e-3,
        eval_every: 50,
        ..TrainConfig::default()
    }
}

fn fit(raw: &Dataset, cfg: &TrainConfig) -> (Model, TransformState) {
    let transforms = TransformState::fit(raw, TransformConfig { use_quantile: false }).unwrap();
    let encoded = transforms.apply(raw).unwrap();
    let (model, _) = training::train(cfg, &encoded, None, 1).unwrap();
    (model, transforms)
}

fn synthetic_oracles() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;

    let raw = synthetic_table(2000, 20, |x| 3.0 * x[0], 1, 0.0);
    let (model, transforms) = fit(&raw, &oracle_config(ModelKind::Protonam));
    let e = explain::export_shape(&[model], &transforms, &raw, "x1", 0, &ShapeOptions::default()).unwrap();
    let inner: Vec<f64> = e
        .grid_raw
        .iter()
        .zip(&e.contribution_mean)
        .filter(|(x, _)| (0.1..=0.9).contains(*x))
        .map(|(_, c)| *c)
        .collect();
    let worst_step = inner.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let monotone = worst_step >= 0.0;
    ok &= monotone;
    parts.push(format!("y=3x monotone: {monotone} (smallest step {worst_step:.2e})"));

    let raw = synthetic_table(2000, 21, |x| 2.0 * x[0], 2, 0.0);
    let (model, transforms) = fit(&raw, &oracle_config(ModelKind::Protonam));
    let range = |f: &str| {
        let e = explain::export_shape(std::slice::from_ref(&model), &transforms, &raw, f, 0, &ShapeOptions::default())
            .unwrap();
        let hi = e.contribution_mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = e.contribution_mean.iter().copied().fold(f64::INFINITY, f64::min);
        hi - lo
    };
    let ratio = range("x2") / range("x1");
    ok &= ratio <= 0.05;
    parts.push(format!("inert/active range {:.2}%", ratio * 100.0));

    let raw = synthetic_table(2000, 22, |x| x[0] * x[1], 2, -1.0);
    let (model, transforms) = fit(&raw, &oracle_config(ModelKind::Protona2m));
    let s = explain::export_surface(&model, &transforms, &raw, ("x1", "x2")).unwrap();
    let truth: Vec<f64> = s.points.iter().map(|p| p.feature_a_raw * p.feature_b_raw).collect();
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let agree = s
        .points
        .iter()
        .zip(&truth)
        .filter(|(p, t)| (p.contribution_centered > 0.0) == (**t - mean > 0.0))
        .count() as f64
        / truth.len() as f64;
    ok &= agree >= 0.9;
    parts.push(format!("x1*x2 sign agreement {:.1}%", agree * 100.0));

    outcome(ok, parts.join("; "))
}
