use std::collections::BTreeMap;

use diets_core::context::GlycemicContext;
use diets_core::fixtures::{fixture_clip, quiet_clip, sample_profile, synthetic_clips};
use diets_core::forecast::{forecast, glucose_mae, ForecastError, ForecastRequest, GlucoseTrace};
use diets_core::model::*;
use diets_core::pipeline::{split, Channel, DatasetSplit};
use diets_core::titration::*;
use diets_core::training::*;
use proptest::prelude::*;

fn profiles() -> BTreeMap<String, PatientProfile> {
    ["fixture", "p1", "p2"]
        .into_iter()
        .map(|p| (p.to_string(), sample_profile()))
        .collect()
}

fn memorize(task: Task, group: FeatureGroup, clip: &diets_core::pipeline::Clip) -> GlycemicModel {
    let split = DatasetSplit {
        train: vec![clip.clone()],
        val: vec![clip.clone()],
        test: vec![],
        seed: 0,
    };
    let cfg = TrainConfig {
        batch_size: 1,
        max_epochs: 500,
        early_stop_patience: 500,
        max_steps: Some(500),
        ..TrainConfig::default()
    };
    train_foundation(&split, &profiles(), &cfg, &ModelConfig::tiny(task, group)).unwrap().0
}

fn untrained(task: Task, group: FeatureGroup) -> GlycemicModel {
    let mc = ModelConfig::tiny(task, group);
    let clips: Vec<_> = synthetic_clips("p1", 2, 1).into_iter().step_by(6).collect();
    let inputs = clip_inputs(&clips, &profiles(), &mc).unwrap();
    GlycemicModel::new(mc.clone(), NormStats::fit(&inputs, &mc).unwrap(), 3).unwrap()
}

fn request(clip: &diets_core::pipeline::Clip, target: TargetSpec) -> TitrationRequest {
    TitrationRequest {
        context: GlycemicContext::from_clip(clip, Some(sample_profile())),
        target,
    }
}

fn recorded_target(clip: &diets_core::pipeline::Clip) -> TargetSpec {
    TargetSpec::Trace {
        glucose_mg_dl: clip.glucose_labels(),
    }
}

#[test]
fn plans_have_eight_bounded_reproducible_doses() {
    let model = untrained(Task::Titration, FeatureGroup::G7);
    let clip = fixture_clip();
    let req = request(&clip, TargetSpec::constant(120.0));
    let plan = recommend(&req, &model, DEFAULT_MAX_BOLUS_IU).unwrap();
    assert_eq!(plan.doses_iu.len(), 8);
    assert!(plan.doses_iu.iter().all(|d| (0.0..=DEFAULT_MAX_BOLUS_IU).contains(d)));
    assert_eq!(plan.safety_status, SafetyStatus::Unchecked);
    assert_eq!(recommend(&req, &model, DEFAULT_MAX_BOLUS_IU).unwrap(), plan);
}

#[test]
fn dose_cap_and_floor_hold_for_extreme_outputs() {
    let model = untrained(Task::Titration, FeatureGroup::G7);
    let req = request(&fixture_clip(), TargetSpec::constant(120.0));
    let (_, bias) = model
        .named_vars()
        .into_iter()
        .find(|(n, _)| n == "head.dense.bias")
        .unwrap();
    for (value, expect) in [(1e6, DEFAULT_MAX_BOLUS_IU), (-1e6, 0.0)] {
        bias.set(&candle_core::Tensor::new(&[value as f32], model.device()).unwrap()).unwrap();
        let plan = recommend(&req, &model, DEFAULT_MAX_BOLUS_IU).unwrap();
        assert!(plan.doses_iu.iter().all(|d| *d == expect), "{:?}", plan.doses_iu);
    }
    let plan = recommend(&req, &model, 2.0).unwrap();
    assert!(plan.doses_iu.iter().all(|d| *d <= 2.0));
}

#[test]
fn requests_are_checked_before_inference() {
    let model = untrained(Task::Titration, FeatureGroup::G7);
    let clip = fixture_clip();
    assert!(matches!(
        recommend(&request(&clip, TargetSpec::constant(500.0)), &model, 25.0),
        Err(TitrationError::TargetOutOfRange(_))
    ));
    let mut no_basal = request(&clip, TargetSpec::constant(120.0));
    no_basal.context.basal_history_iu = None;
    assert!(matches!(
        recommend(&no_basal, &model, 25.0),
        Err(TitrationError::Model(ModelError::FeatureGroupMismatch(_)))
    ));
    let mut short = request(&clip, TargetSpec::constant(120.0));
    short.context.history.glucose_mg_dl.pop();
    assert!(matches!(recommend(&short, &model, 25.0), Err(TitrationError::Model(ModelError::ShapeMismatch(_)))));
    let glucose_model = untrained(Task::GlucoseForecast, FeatureGroup::G5);
    assert!(matches!(
        recommend(&request(&clip, TargetSpec::constant(120.0)), &glucose_model, 25.0),
        Err(TitrationError::WrongTask(Task::GlucoseForecast))
    ));
}

#[test]
fn memorized_quiet_clip_gives_near_zero_doses() {
    let clip = quiet_clip();
    let labels = clip.bolus_labels();
    let model = memorize(Task::Titration, FeatureGroup::G7, &clip);
    let plan = recommend(&request(&clip, recorded_target(&clip)), &model, DEFAULT_MAX_BOLUS_IU).unwrap();
    for (d, l) in plan.doses_iu.iter().zip(&labels) {
        assert!(*d <= l + 0.01, "dose {d} label {l}");
    }
}

#[test]
fn memorized_forecast_is_within_one_mg_dl() {
    let clip = fixture_clip();
    let model = memorize(Task::GlucoseForecast, FeatureGroup::G5, &clip);
    let n = clip.history_len;
    let req = ForecastRequest {
        context: GlycemicContext::from_clip(&clip, Some(sample_profile())),
        plan_iu: clip.channel(Channel::BolusInsulin)[n..].to_vec(),
    };
    let trace = forecast(&req, &model).unwrap();
    assert_eq!(trace.len(), 8);
    for (p, l) in trace.glucose_mg_dl.iter().zip(clip.glucose_labels()) {
        assert!((p - l).abs() < 1.0, "forecast {p} label {l}");
    }
}

#[test]
fn forecast_responds_to_the_plan() {
    let mut clips = synthetic_clips("p1", 3, 1);
    clips.extend(synthetic_clips("p2", 3, 2));
    let clips: Vec<_> = clips.into_iter().step_by(4).collect();
    let cfg = TrainConfig {
        max_epochs: 4,
        max_steps: Some(60),
        ..TrainConfig::default()
    };
    let (model, _) = train_foundation(
        &split(&clips, 0).unwrap(),
        &profiles(),
        &cfg,
        &ModelConfig::tiny(Task::GlucoseForecast, FeatureGroup::G5),
    )
    .unwrap();
    let clip = fixture_clip();
    let ctx = GlycemicContext::from_clip(&clip, Some(sample_profile()));
    let base = forecast(
        &ForecastRequest {
            context: ctx.clone(),
            plan_iu: vec![0.0; 8],
        },
        &model,
    )
    .unwrap();
    let heavy = forecast(
        &ForecastRequest {
            context: ctx.clone(),
            plan_iu: vec![20.0; 8],
        },
        &model,
    )
    .unwrap();
    let diff = glucose_mae(&[base], &[heavy]).unwrap();
    assert!(diff > 0.1, "forecast moved by {diff} mg/dl");
    assert!(matches!(
        forecast(
            &ForecastRequest {
                context: ctx,
                plan_iu: vec![0.0; 7]
            },
            &model
        ),
        Err(ForecastError::PlanLength { expected: 8, got: 7 })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn maes_equal_brute_force(rows in proptest::collection::vec(proptest::collection::vec((-500.0f64..500.0, -500.0f64..500.0), 8), 1..6)) {
        let t = diets_core::fixtures::epoch();
        let p: Vec<_> = rows.iter().map(|r| GlucoseTrace::new(r.iter().map(|x| x.0).collect())).collect();
        let q: Vec<_> = rows.iter().map(|r| GlucoseTrace::new(r.iter().map(|x| x.1).collect())).collect();
        let mut sum = 0.0;
        let mut count = 0.0;
        for r in &rows {
            for (a, b) in r {
                sum += (a - b).abs();
                count += 1.0;
            }
        }
        let oracle = sum / count;
        let g = glucose_mae(&p, &q).unwrap();
        prop_assert!((g - oracle).abs() <= 1e-9 * oracle.abs().max(1e-300));
        let pp: Vec<_> = p.iter().map(|x| InsulinPlan::unchecked(x.glucose_mg_dl.clone(), t)).collect();
        let qq: Vec<_> = q.iter().map(|x| InsulinPlan::unchecked(x.glucose_mg_dl.clone(), t)).collect();
        prop_assert_eq!(titration_mae(&pp, &qq).unwrap(), g);
    }
}
