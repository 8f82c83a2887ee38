use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn small_config(kind: ModelKind) -> TrainConfig {
    TrainConfig {
        model_kind: kind,
        prototypes: 4,
        layers: 3,
        hidden_dim: 5,
        max_iteration: 100,
        ..TrainConfig::default()
    }
}

fn random_data(n_features: usize, rows: usize, seed: u64) -> EncodedData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EncodedData {
        features: (0..n_features).map(|_| (0..rows).map(|_| rng.gen::<f64>()).collect()).collect(),
        targets: (0..rows).map(|_| rng.gen::<f64>()).collect(),
        groups: vec![0; rows],
    }
}

/// Fresh model with every parameter perturbed so that zero-initialized
/// outputs do not hide wiring mistakes.
fn perturbed_model(cfg: &TrainConfig, data: &EncodedData, tasks: usize, seed: u64) -> Model {
    let arch = Architecture::from_config(cfg, data.n_features(), tasks).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(arch, &data.features, 0.1, &mut rng).unwrap();
    for p in model.params.iter_mut() {
        if !p.name.starts_with("proto.") {
            p.value.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
    }
    model.iteration = 30;
    model
}

fn run(model: &Model, data: &EncodedData, route: Route) -> (Tape, Forward) {
    let rows: Vec<usize> = (0..data.n_samples()).collect();
    let batch = Batch::gather(data, &rows);
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    let opts = PassOptions {
        route,
        ..PassOptions::inference(model.iteration)
    };
    let fwd = model.forward(&mut tape, &bound, &batch, opts).unwrap();
    (tape, fwd)
}

#[test]
fn fresh_model_predicts_head_bias_and_zero_terms() {
    let data = random_data(3, 7, 1);
    for kind in [ModelKind::Protonam, ModelKind::Protona2m, ModelKind::Protonanm] {
        let arch = Architecture::from_config(&small_config(kind), 3, 1).unwrap();
        let model = Model::new(arch, &data.features, 0.25, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let out = model.outputs(&data).unwrap();
        for m in 0..3 {
            assert!(out.cumulative[m].iter().flatten().all(|&v| v == 0.0));
            assert!(out.scores[m].iter().all(|&s| s == 0.25));
        }
    }
}

#[test]
fn embedding_shapes_and_single_layer_base_case() {
    let data = random_data(3, 6, 2);
    let cfg = small_config(ModelKind::Protonam);
    let model = perturbed_model(&cfg, &data, 1, 3);
    let (tape, fwd) = run(&model, &data, Route::Projected);
    assert_eq!(fwd.embeddings.len(), 3);
    for &v in &fwd.embeddings {
        assert_eq!(tape.shape(v), &[3, 6, 5]);
    }

    let one = TrainConfig { layers: 1, ..cfg };
    let model = perturbed_model(&one, &data, 1, 3);
    let (tape, fwd) = run(&model, &data, Route::Projected);
    assert_eq!(fwd.increments.len(), 1);
    assert_eq!(tape.value(fwd.increments[0]), tape.value(fwd.cumulative[0]));
}

#[test]
fn zeroed_layer_weights_give_bias_images() {
    let data = random_data(2, 5, 4);
    let cfg = TrainConfig {
        layers: 1,
        ..small_config(ModelKind::Protonam)
    };
    let mut model = perturbed_model(&cfg, &data, 1, 5);
    model.params.get_mut("encoder.0.weight").unwrap().data_mut().fill(0.0);
    let (tape, fwd) = run(&model, &data, Route::Projected);
    let v = tape.value(fwd.embeddings[0]);
    // every row of a channel is identical once the input is ignored
    for c in 0..2 {
        let first = &v.data()[c * 5 * 5..c * 5 * 5 + 5];
        for r in 1..5 {
            assert_eq!(&v.data()[(c * 5 + r) * 5..(c * 5 + r + 1) * 5], first);
        }
    }
    let (tape2, fwd2) = run(&model, &data, Route::Projected);
    assert_eq!(tape.value(fwd.embeddings[0]), tape2.value(fwd2.embeddings[0]));
}

#[test]
fn telescoping_recurrence_is_exact() {
    let data = random_data(4, 9, 6);
    let model = perturbed_model(&small_config(ModelKind::Protonam), &data, 1, 7);
    let out = model.outputs(&data).unwrap();
    for m in 1..3 {
        for i in 0..4 {
            for r in 0..9 {
                let (prev, cur, h) = (out.cumulative[m - 1][i][r], out.cumulative[m][i][r], out.increments[m][i][r]);
                assert_eq!(cur, prev + h);
                assert!((cur - prev - h).abs() <= 4.0 * f64::EPSILON * cur.abs().max(prev.abs()));
            }
        }
    }
    assert_eq!(out.cumulative[0], out.increments[0]);
}

#[test]
fn additive_decomposition_of_scores() {
    let data = random_data(4, 11, 8);
    for kind in [ModelKind::Protonam, ModelKind::Protona2m] {
        let model = perturbed_model(&small_config(kind), &data, 1, 9);
        let out = model.outputs(&data).unwrap();
        for m in 0..3 {
            for r in 0..11 {
                let direct: f64 = model.head_bias(m, 0)
                    + (0..model.arch.terms.len())
                        .map(|t| model.head_weight(m, 0, t) * out.cumulative[m][t][r])
                        .sum::<f64>();
                assert!((direct - out.scores[m][r]).abs() <= 1e-9, "{direct} vs {}", out.scores[m][r]);
            }
        }
        let scores = model.predict_scores(&data).unwrap();
        assert_eq!(&scores, out.scores.last().unwrap());
    }
}

#[test]
fn features_are_isolated() {
    let data = random_data(3, 8, 10);
    let model = perturbed_model(&small_config(ModelKind::Protonam), &data, 1, 11);
    let base = model.outputs(&data).unwrap();
    let (tape0, fwd0) = run(&model, &data, Route::Projected);
    let mut moved = data.clone();
    moved.features[1].iter_mut().for_each(|v| *v = 1.0 - *v);
    let after = model.outputs(&moved).unwrap();
    let (tape1, fwd1) = run(&model, &moved, Route::Projected);
    for m in 0..3 {
        for i in [0, 2] {
            assert_eq!(base.cumulative[m][i], after.cumulative[m][i]);
            let chunk = 8 * 5;
            assert_eq!(
                &tape0.value(fwd0.embeddings[m]).data()[i * chunk..(i + 1) * chunk],
                &tape1.value(fwd1.embeddings[m]).data()[i * chunk..(i + 1) * chunk]
            );
        }
        assert_ne!(base.cumulative[m][1], after.cumulative[m][1]);
    }
}

#[test]
fn first_layer_receives_gradient_at_initialization() {
    let data = random_data(3, 16, 12);
    let arch = Architecture::from_config(&small_config(ModelKind::Protonam), 3, 1).unwrap();
    let mut model = Model::new(arch, &data.features, 0.0, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
    model.iteration = 0;
    let rows: Vec<usize> = (0..16).collect();
    let batch = Batch::gather(&data, &rows);
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, true);
    let fwd = model.forward(&mut tape, &bound, &batch, PassOptions::inference(0)).unwrap();
    let loss = head::hierarchical_loss(&mut tape, TaskKind::Regression, &fwd.scores, &batch.targets, true, None, 0.0).unwrap();
    tape.backward(loss).unwrap();
    // the zero output layer only passes gradient to itself on the first step
    let out_w = tape.grad(bound.get("predictor.0.out.weight")).unwrap();
    assert!(out_w.data().iter().any(|&g| g != 0.0));

    let model = perturbed_model(&small_config(ModelKind::Protonam), &data, 1, 13);
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, true);
    let fwd = model.forward(&mut tape, &bound, &batch, PassOptions::inference(0)).unwrap();
    let loss = head::hierarchical_loss(&mut tape, TaskKind::Regression, &fwd.scores, &batch.targets, true, None, 0.0).unwrap();
    tape.backward(loss).unwrap();
    for name in ["encoder.0.weight", "encoder.0.bias", "proto.0.slope", "proto.0.mu"] {
        let g = tape.grad(bound.get(name)).unwrap();
        assert!(g.data().iter().any(|&v| v != 0.0), "{name}");
    }
}

#[test]
fn interaction_routes_agree() {
    let data = random_data(4, 10, 14);
    for depth in [1, 2] {
        let cfg = TrainConfig {
            predictor_layers: depth,
            ..small_config(ModelKind::Protona2m)
        };
        let model = perturbed_model(&cfg, &data, 1, 15);
        let (tp, fp) = run(&model, &data, Route::Projected);
        let (tl, fl) = run(&model, &data, Route::Literal);
        for m in 0..3 {
            for (a, b) in tp.value(fp.increments[m]).data().iter().zip(tl.value(fl.increments[m]).data()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn out_of_set_features_do_not_move_conditional_outputs() {
    let data = random_data(3, 12, 16);
    let model = perturbed_model(&small_config(ModelKind::Protona2m), &data, 1, 17);
    assert_eq!(model.arch.terms, vec![vec![0, 1], vec![0, 2], vec![1, 2]]);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for route in [Route::Literal, Route::Projected] {
        let (t0, f0) = run(&model, &data, route);
        for _ in 0..5 {
            let mut moved = data.clone();
            moved.features[2].iter_mut().for_each(|v| *v = rng.gen());
            let (t1, f1) = run(&model, &moved, route);
            for m in 0..3 {
                // term {0, 1} is row 0
                assert_eq!(&t0.value(f0.increments[m]).data()[..12], &t1.value(f1.increments[m]).data()[..12]);
                assert_ne!(&t0.value(f0.increments[m]).data()[12..], &t1.value(f1.increments[m]).data()[12..]);
            }
        }
    }
}

#[test]
fn conditional_size_is_linear_in_features() {
    let data = random_data(8, 4, 19);
    let size = |kind| {
        let cfg = small_config(kind);
        let arch = Architecture::from_config(&cfg, 8, 1).unwrap();
        let terms = arch.terms.len();
        let model = Model::new(arch, &data.features, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (terms, model.predictor_size())
    };
    let (pairs, pair_size) = size(ModelKind::Protona2m);
    let (full, full_size) = size(ModelKind::Protonanm);
    assert_eq!((pairs, full), (28, 1));
    assert_eq!(pair_size, full_size);
    let (n, h, d) = (8, 5, 3);
    assert_eq!(pair_size, d * (n * h * h + h + h + 1));
}

#[test]
fn two_groups_with_equal_weights_predict_alike() {
    let mut data = random_data(3, 10, 20);
    data.groups = (0..10).map(|r| r % 2).collect();
    let mut model = perturbed_model(&small_config(ModelKind::Protonam), &data, 2, 21);
    for m in 0..3 {
        let w = model.params.get_mut(&format!("head.{m}.weight")).unwrap();
        let row: Vec<f64> = w.data()[..3].to_vec();
        w.data_mut()[3..].copy_from_slice(&row);
        let b = model.params.get_mut(&format!("head.{m}.bias")).unwrap();
        b.data_mut()[1] = b.data()[0];
    }
    let two = model.predict_scores(&data).unwrap();
    data.groups = vec![0; 10];
    assert_eq!(two, model.predict_scores(&data).unwrap());
    data.groups[3] = 2;
    assert!(matches!(model.predict_scores(&data), Err(Error::UnknownGroup { label: 2, .. })));
}

#[test]
fn rescaled_output_is_affine_in_scores() {
    let data = random_data(3, 6, 22);
    let mut model = perturbed_model(&small_config(ModelKind::Protonam), &data, 1, 23);
    let before = model.predict_scores(&data).unwrap();
    model.rescale_output(2.0, 3.0);
    let after = model.predict_scores(&data).unwrap();
    for (a, b) in before.iter().zip(&after) {
        assert!((2.0 + 3.0 * a - b).abs() < 1e-12);
    }
}

#[test]
fn model_graph_gradients_match_finite_differences() {
    let data = random_data(3, 6, 24);
    let rows: Vec<usize> = (0..6).collect();
    let batch = Batch::gather(&data, &rows);
    for (kind, norm) in [
        (ModelKind::Protonam, Normalization::LayerNorm),
        (ModelKind::Protonam, Normalization::BatchNorm),
        (ModelKind::Protona2m, Normalization::LayerNorm),
        (ModelKind::Protonanm, Normalization::LayerNorm),
    ] {
        let cfg = TrainConfig {
            normalization: norm,
            layers: 2,
            hidden_dim: 3,
            ..small_config(kind)
        };
        let model = perturbed_model(&cfg, &data, 1, 25);
        let loss_of = |m: &Model| -> (f64, Tape, Bound, Var) {
            let mut tape = Tape::new();
            let bound = m.params.bind(&mut tape, true);
            let opts = PassOptions {
                train: true,
                ..PassOptions::inference(m.iteration)
            };
            let fwd = m.forward(&mut tape, &bound, &batch, opts).unwrap();
            let last = *fwd.cumulative.last().unwrap();
            let loss = head::hierarchical_loss(&mut tape, TaskKind::Regression, &fwd.scores, &batch.targets, true, Some(last), 0.1)
                .unwrap();
            (tape.value(loss).item(), tape, bound, loss)
        };
        let (_, mut tape, bound, loss) = loss_of(&model);
        tape.backward(loss).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        for (k, p) in model.params.iter().enumerate() {
            let g = tape.grad(bound.vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            for _ in 0..2 {
                let j = rng.gen_range(0..p.value.len());
                let eps = 1e-5;
                let mut plus = model.clone();
                plus.params.get_mut(&p.name).unwrap().data_mut()[j] += eps;
                let mut minus = model.clone();
                minus.params.get_mut(&p.name).unwrap().data_mut()[j] -= eps;
                let fd = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * eps);
                let an = g.data()[j];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                assert!(rel <= 1e-4, "{kind:?} {norm:?} {}[{j}]: fd {fd} vs {an}", p.name);
            }
        }
    }
}
