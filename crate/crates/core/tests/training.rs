use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use diets_core::fixtures::{fixture_clip, sample_profile, synthetic_clips};
use diets_core::model::*;
use diets_core::pipeline::{split, DatasetSplit};
use diets_core::training::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn profiles() -> BTreeMap<String, PatientProfile> {
    ["fixture", "p1", "p2", "p3"]
        .into_iter()
        .map(|p| (p.to_string(), sample_profile()))
        .collect()
}

fn one_clip_split() -> DatasetSplit {
    DatasetSplit {
        train: vec![fixture_clip()],
        val: vec![fixture_clip()],
        test: vec![],
        seed: 0,
    }
}

fn memorize_config() -> TrainConfig {
    TrainConfig {
        batch_size: 1,
        max_epochs: 500,
        early_stop_patience: 500,
        max_steps: Some(500),
        ..TrainConfig::default()
    }
}

#[test]
fn memorizes_one_clip() {
    for (task, group, tol) in [(Task::Titration, FeatureGroup::G7, 0.01), (Task::GlucoseForecast, FeatureGroup::G5, 1.0)] {
        let mc = ModelConfig::tiny(task, group);
        let (model, report) = train_foundation(&one_clip_split(), &profiles(), &memorize_config(), &mc).unwrap();
        let eval = evaluate(&model, &[fixture_clip()], &profiles()).unwrap();
        eprintln!("{task:?}: steps {} mae {} first {:?}", report.steps, eval.mae, report.history.first().map(|h| h.val_mae));
        assert!(eval.mae < tol, "{task:?} mae {}", eval.mae);
        assert!(report.steps <= 500);
    }
}

fn small_split() -> DatasetSplit {
    let mut clips = synthetic_clips("p1", 2, 1);
    clips.extend(synthetic_clips("p2", 2, 2));
    let clips: Vec<_> = clips.into_iter().step_by(8).collect();
    split(&clips, 0).unwrap()
}

fn quick() -> TrainConfig {
    TrainConfig {
        max_epochs: 3,
        max_steps: Some(20),
        ..TrainConfig::default()
    }
}

fn set_element(var: &candle_core::Var, i: usize, value: f64) {
    let mut v: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
    v[i] = value;
    var.set(&Tensor::from_vec(v, var.dims(), var.device()).unwrap()).unwrap();
}

#[test]
fn analytic_gradients_match_central_differences() {
    let mc = ModelConfig {
        precision: Precision::F64,
        ..ModelConfig::tiny(Task::Titration, FeatureGroup::G7)
    };
    let clips: Vec<_> = synthetic_clips("p1", 2, 1).into_iter().step_by(10).take(4).collect();
    let inputs = clip_inputs(&clips, &profiles(), &mc).unwrap();
    let norm = NormStats::fit(&inputs, &mc).unwrap();
    let model = GlycemicModel::new(mc, norm, 21).unwrap();
    let loss = |m: &GlycemicModel| -> f64 { loss_on(m, &inputs, LossKind::Mse).unwrap().to_scalar::<f64>().unwrap() };
    let grads = loss_on(&model, &inputs, LossKind::Mse).unwrap().backward().unwrap();
    let vars = model.named_vars();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (name, var) = &vars[rng.gen_range(0..vars.len())];
        let i = rng.gen_range(0..var.elem_count());
        let analytic: f64 = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()[i];
        let orig: f64 = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()[i];
        set_element(var, i, orig + eps);
        let up = loss(&model);
        set_element(var, i, orig - eps);
        let down = loss(&model);
        set_element(var, i, orig);
        let numeric = (up - down) / (2.0 * eps);
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale < 1e-8 { 0.0 } else { (analytic - numeric).abs() / scale };
        assert!(rel <= 1e-3, "{name}[{i}] analytic {analytic} numeric {numeric}");
        worst = worst.max(rel);
    }
    assert!(worst <= 1e-3);
}

#[test]
fn freeze_modes_leave_frozen_weights_bitwise_identical() {
    let mc = ModelConfig::tiny(Task::Titration, FeatureGroup::G7);
    let (base, _) = train_foundation(&small_split(), &profiles(), &quick(), &mc).unwrap();
    let patient = synthetic_clips("p3", 3, 3);
    let cfg = TrainConfig {
        max_steps: Some(30),
        max_epochs: 30,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let before = base.weights().unwrap();
    for mode in [FinetuneMode::FtDense, FinetuneMode::FtCnnDense, FinetuneMode::Foundation, FinetuneMode::FtFull] {
        let (tuned, _) = personalize(&base, &patient[..40], &profiles(), mode, &cfg).unwrap();
        let after = tuned.weights().unwrap();
        let mut changed = 0;
        for (name, w) in &before {
            if mode.trainable(name) {
                changed += usize::from(after[name] != *w);
            } else {
                assert_eq!(after[name], *w, "{mode}: frozen {name} changed");
            }
        }
        if mode != FinetuneMode::Foundation {
            assert!(changed > 0, "{mode}: nothing trained");
        }
    }
    assert_eq!(base.weights().unwrap(), before, "base model mutated");
}

#[test]
fn mode_parsing_and_predicates() {
    assert_eq!("ft_dense".parse::<FinetuneMode>().unwrap(), FinetuneMode::FtDense);
    assert_eq!("FT-CNN&Dense".parse::<FinetuneMode>().unwrap(), FinetuneMode::FtCnnDense);
    assert!(matches!("ft_conv".parse::<FinetuneMode>(), Err(TrainError::ModeUnknown(_))));
    assert!(FinetuneMode::FtDense.trainable("head.dense.weight"));
    assert!(!FinetuneMode::FtDense.trainable("head.conv.weight"));
    assert!(FinetuneMode::FtCnnDense.trainable("head.conv.bias"));
    assert!(!FinetuneMode::FtCnnDense.trainable("decoder.0.ff1.weight"));
    assert!(!FinetuneMode::Foundation.trainable("head.dense.weight"));
}

#[test]
fn empty_inputs_rejected() {
    let mc = ModelConfig::tiny(Task::Titration, FeatureGroup::G7);
    let empty = DatasetSplit {
        train: vec![],
        val: vec![],
        test: vec![],
        seed: 0,
    };
    assert!(matches!(train_foundation(&empty, &profiles(), &quick(), &mc), Err(TrainError::EmptySplit)));
    let model = GlycemicModel::new(mc.clone(), NormStats::identity(&mc), 0).unwrap();
    assert!(matches!(
        personalize(&model, &[], &profiles(), FinetuneMode::FtDense, &quick()),
        Err(TrainError::InsufficientData(_))
    ));
}

#[test]
fn early_stopping_halts_on_flat_validation() {
    let mc = ModelConfig::tiny(Task::Titration, FeatureGroup::G1);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        weight_decay: 0.0,
        batch_size: 64,
        ..TrainConfig::default()
    };
    let data = DatasetSplit {
        train: vec![fixture_clip()],
        val: vec![fixture_clip()],
        test: vec![],
        seed: 0,
    };
    let (_, report) = train_foundation(&data, &profiles(), &cfg, &mc).unwrap();
    assert!(report.stopped_early);
    assert_eq!(report.best_epoch, Some(0));
    assert_eq!(report.history.len(), 41);
    assert!(report.history.len() < 200);
}

#[test]
fn patience_bounds_epochs_after_best() {
    let mc = ModelConfig::tiny(Task::GlucoseForecast, FeatureGroup::G5);
    let cfg = TrainConfig {
        max_epochs: 30,
        early_stop_patience: 3,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let (_, report) = train_foundation(&small_split(), &profiles(), &cfg, &mc).unwrap();
    let best = report.best_epoch.unwrap();
    let last = report.history.last().unwrap().epoch;
    assert!(last - best <= 3);
    let best_val = report.history.iter().map(|h| h.val_mae).fold(f64::INFINITY, f64::min);
    assert_eq!(report.best_val_mae, Some(best_val));
}

#[test]
fn non_finite_loss_is_divergence() {
    let mc = ModelConfig::tiny(Task::Titration, FeatureGroup::G7);
    let inputs = clip_inputs(&[fixture_clip()], &profiles(), &mc).unwrap();
    let model = GlycemicModel::new(mc.clone(), NormStats::fit(&inputs, &mc).unwrap(), 0).unwrap();
    let (_, w) = model.named_vars().into_iter().find(|(n, _)| n == "head.dense.bias").unwrap();
    w.set(&Tensor::new(&[f32::NAN], model.device()).unwrap()).unwrap();
    assert!(matches!(
        fit(&model, &inputs, &[], &quick(), |_| true),
        Err(TrainError::Divergence { step: 0, .. })
    ));
}

#[test]
fn evaluation_is_deterministic_and_training_helps() {
    let mc = ModelConfig::tiny(Task::GlucoseForecast, FeatureGroup::G5);
    let data = one_clip_split();
    let inputs = clip_inputs(&data.train, &profiles(), &mc).unwrap();
    let untrained = GlycemicModel::new(mc.clone(), NormStats::fit(&inputs, &mc).unwrap(), 0).unwrap();
    let cfg = TrainConfig {
        batch_size: 1,
        max_steps: Some(60),
        max_epochs: 60,
        ..TrainConfig::default()
    };
    let (trained, _) = train_foundation(&data, &profiles(), &cfg, &mc).unwrap();
    let a = evaluate(&trained, &data.train, &profiles()).unwrap();
    let b = evaluate(&trained, &data.train, &profiles()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.clips.len(), 1);
    assert_eq!(a.clips[0].clip_id, fixture_clip().id());
    let u = evaluate(&untrained, &data.train, &profiles()).unwrap();
    assert!(a.mae < u.mae, "trained {} untrained {}", a.mae, u.mae);
}

#[test]
fn training_is_reproducible() {
    let mc = ModelConfig::tiny(Task::Titration, FeatureGroup::G7);
    let cfg = TrainConfig {
        scheduled_sampling: 0.5,
        ..quick()
    };
    let (a, ra) = train_foundation(&small_split(), &profiles(), &cfg, &mc).unwrap();
    let (b, rb) = train_foundation(&small_split(), &profiles(), &cfg, &mc).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.weights().unwrap(), b.weights().unwrap());
}

#[test]
fn ablation_table() {
    let base = ModelConfig::tiny(Task::Titration, FeatureGroup::G7);
    let rows = ablation_run(&[FeatureGroup::G1], &small_split(), &profiles(), &quick(), &base).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].group, FeatureGroup::G1);
    let again = ablation_run(&[FeatureGroup::G1], &small_split(), &profiles(), &quick(), &base).unwrap();
    assert_eq!(rows, again);
    let two = ablation_run(&[FeatureGroup::G4, FeatureGroup::G5], &small_split(), &profiles(), &quick(), &base).unwrap();
    assert!(two[1].parameters > two[0].parameters);
}

#[test]
fn loss_kinds_differ() {
    let mc = ModelConfig::tiny(Task::Titration, FeatureGroup::G7);
    let inputs = clip_inputs(&[fixture_clip()], &profiles(), &mc).unwrap();
    let m = GlycemicModel::new(mc.clone(), NormStats::fit(&inputs, &mc).unwrap(), 0).unwrap();
    let mae = loss_on(&m, &inputs, LossKind::Mae).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
    let mse = loss_on(&m, &inputs, LossKind::Mse).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
    assert!(mae > 0.0 && mse > 0.0 && mae != mse);
}
