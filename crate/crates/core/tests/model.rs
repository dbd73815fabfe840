use candle_core::{DType, Tensor};
use diets_core::fixtures::{fixture_clip, sample_profile, synthetic_clips};
use diets_core::model::*;
use diets_core::pipeline::Channel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(task: Task, group: FeatureGroup) -> GlycemicModel {
    let cfg = ModelConfig::tiny(task, group);
    GlycemicModel::new(cfg.clone(), NormStats::identity(&cfg), 3).unwrap()
}

fn titration_input(model: &GlycemicModel) -> ModelInput {
    ModelInput::from_clip(&fixture_clip(), Some(&sample_profile()), model.config()).unwrap()
}

#[test]
fn temporal_encoding_shape_and_finiteness() {
    let model = tiny(Task::Titration, FeatureGroup::G7);
    let input = titration_input(&model);
    let enc = model.encode_temporal(&input).unwrap();
    assert_eq!(enc.len(), 32);
    assert!(enc.iter().all(|r| r.len() == 2 * model.config().temporal_hidden));

    let mut zero = input.clone();
    for s in &mut zero.temporal.values {
        s.iter_mut().for_each(|v| *v = 0.0);
    }
    let enc = model.encode_temporal(&zero).unwrap();
    assert!(enc.iter().flatten().all(|v| v.is_finite()));
}

#[test]
fn channel_guards() {
    let model = tiny(Task::Titration, FeatureGroup::G7);
    let input = titration_input(&model);

    let mut swapped = input.clone();
    swapped.temporal.channels.swap(3, 4);
    swapped.temporal.values.swap(3, 4);
    assert!(matches!(model.predict_one(&swapped), Err(ModelError::ChannelOrder { .. })));

    let mut short = input.clone();
    short.temporal.channels.pop();
    short.temporal.values.pop();
    assert!(matches!(model.predict_one(&short), Err(ModelError::ShapeMismatch(_))));

    let mut ragged = input;
    ragged.temporal.values[0].pop();
    assert!(matches!(model.predict_one(&ragged), Err(ModelError::ShapeMismatch(_))));
}

#[test]
fn profile_encoding() {
    let model = tiny(Task::Titration, FeatureGroup::G7);
    let latent = model.encode_profile(&titration_input(&model)).unwrap().unwrap();
    assert_eq!(latent.len(), model.config().d_model);

    let mut bad = sample_profile();
    bad.weight_kg = -1.0;
    assert!(matches!(
        ModelInput::from_clip(&fixture_clip(), Some(&bad), model.config()),
        Err(ModelError::UnencodableField(_))
    ));

    // no profile available: zero placeholder, recurrent decoder
    let cfg = ModelConfig {
        decoder_kind: DecoderKind::Lstm,
        ..ModelConfig::tiny(Task::GlucoseForecast, FeatureGroup::G5)
    };
    let lstm = GlycemicModel::new(cfg.clone(), NormStats::identity(&cfg), 1).unwrap();
    let input = ModelInput::from_clip(&fixture_clip(), None, &cfg).unwrap();
    assert_eq!(input.profile.as_deref(), Some(&[0.0; BASIC_FEATURES][..]));
    assert_eq!(lstm.predict_one(&input).unwrap().len(), 8);
}

#[test]
fn fusion_shapes_and_branch_guard() {
    let t = tiny(Task::Titration, FeatureGroup::G7);
    let x = t.fuse(&titration_input(&t)).unwrap();
    assert_eq!((x.len(), x[0].len()), (32, t.config().d_model));

    let g = tiny(Task::GlucoseForecast, FeatureGroup::G5);
    let gi = ModelInput::from_clip(&fixture_clip(), Some(&sample_profile()), g.config()).unwrap();
    assert!(gi.basal.is_none());
    assert!(!g.named_vars().iter().any(|(n, _)| n.starts_with("basal.")));
    assert_eq!(g.fuse(&gi).unwrap().len(), 32);

    let input = titration_input(&t);
    let mut basal = input.basal.clone().unwrap();
    basal.source_id = "other:0".into();
    assert!(matches!(
        ModelInput::assemble(input.temporal.clone(), Some(basal), input.profile.clone(), input.target_history.clone(), None),
        Err(ModelError::SourceMismatch { .. })
    ));
}

#[test]
fn feature_group_gates_profile() {
    let g4 = ModelConfig::tiny(Task::GlucoseForecast, FeatureGroup::G4);
    let g5 = ModelConfig::tiny(Task::GlucoseForecast, FeatureGroup::G5);
    let m4 = GlycemicModel::new(g4.clone(), NormStats::identity(&g4), 0).unwrap();
    let m5 = GlycemicModel::new(g5.clone(), NormStats::identity(&g5), 0).unwrap();
    let with_profile = ModelInput::from_clip(&fixture_clip(), Some(&sample_profile()), &g5).unwrap();
    assert!(m5.predict_one(&with_profile).is_ok());
    assert!(matches!(m4.predict_one(&with_profile), Err(ModelError::FeatureGroupMismatch(_))));
}

#[test]
fn decode_emits_future_len_for_both_decoders() {
    for kind in [DecoderKind::Transformer, DecoderKind::Lstm] {
        let cfg = ModelConfig {
            decoder_kind: kind,
            ..ModelConfig::tiny(Task::Titration, FeatureGroup::G7)
        };
        let m = GlycemicModel::new(cfg.clone(), NormStats::identity(&cfg), 5).unwrap();
        let input = ModelInput::from_clip(&fixture_clip(), Some(&sample_profile()), &cfg).unwrap();
        let out = m.predict(&[input.clone(), input]).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|r| r.len() == 8 && r.iter().all(|v| v.is_finite() && *v >= 0.0)));
    }
}

#[test]
fn insulin_clamp_emits_zero() {
    let m = tiny(Task::Titration, FeatureGroup::G7);
    let (_, bias) = m
        .named_vars()
        .into_iter()
        .find(|(n, _)| n == "head.dense.bias")
        .unwrap();
    bias.set(&Tensor::new(&[-1000f32], m.device()).unwrap()).unwrap();
    let out = m.predict_one(&titration_input(&m)).unwrap();
    assert_eq!(out, vec![0.0; 8]);
}

fn lstm_params(input: usize, hidden: usize) -> usize {
    4 * hidden * (input + hidden) + 8 * hidden
}

fn linear_params(i: usize, o: usize) -> usize {
    i * o + o
}

#[test]
fn zero_layer_parameter_count_matches_closed_form() {
    let cfg = ModelConfig {
        fusion_layers: 0,
        decoder_layers: 0,
        ..ModelConfig::tiny(Task::Titration, FeatureGroup::G9)
    };
    let d = cfg.d_model;
    let expected = linear_params(23, cfg.profile_hidden)
        + linear_params(cfg.profile_hidden, d)
        + 2 * lstm_params(1, cfg.basal_hidden)
        + linear_params(2 * cfg.basal_hidden, d)
        + 2 * lstm_params(8, cfg.temporal_hidden)
        + linear_params(2 * cfg.temporal_hidden, d)
        + 3 * d
        + 2 * d
        + linear_params(d + 1, d)
        + 2 * d
        + d * cfg.head_channels * cfg.head_kernel
        + cfg.head_channels
        + linear_params(cfg.head_channels, 1);
    assert_eq!(count_parameters(&cfg).unwrap(), expected);

    let block = 4 * d + linear_params(d, 3 * d) + linear_params(d, d) + linear_params(d, cfg.ffn_dim) + linear_params(cfg.ffn_dim, d);
    let two = ModelConfig {
        fusion_layers: 1,
        decoder_layers: 1,
        ..cfg
    };
    assert_eq!(count_parameters(&two).unwrap(), expected + 2 * block);
}

#[test]
fn default_parameter_counts_near_targets() {
    let t = count_parameters(&ModelConfig::titration()).unwrap() as f64;
    let g = count_parameters(&ModelConfig::glucose()).unwrap() as f64;
    assert!((t / 11_233_692.0 - 1.0).abs() <= 0.15, "titration {t}");
    assert!((g / 11_182_384.0 - 1.0).abs() <= 0.15, "glucose {g}");
}

#[test]
fn masked_future_labels_do_not_reach_outputs() {
    for task in [Task::Titration, Task::GlucoseForecast] {
        let group = if task == Task::Titration { FeatureGroup::G7 } else { FeatureGroup::G5 };
        let m = tiny(task, group);
        let clip = fixture_clip();
        let base = m
            .predict_one(&ModelInput::from_clip(&clip, Some(&sample_profile()), m.config()).unwrap())
            .unwrap();
        let target = task.target_channel().grid_index().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut p = clip.clone();
            for s in 24..32 {
                p.values[target][s] = rng.gen_range(0.0..400.0);
            }
            let input = ModelInput::from_clip(&p, Some(&sample_profile()), m.config()).unwrap();
            assert_eq!(m.predict_one(&input).unwrap(), base);
        }
    }
}

#[test]
fn generated_values_only_affect_later_steps() {
    let m = tiny(Task::GlucoseForecast, FeatureGroup::G5);
    let input = ModelInput::from_clip(&fixture_clip(), Some(&sample_profile()), m.config()).unwrap();
    let batch = m.batch(&[&input]).unwrap();
    let ctx = m.context(&batch).unwrap();
    let gen = m.net().generate(&ctx, &batch.history, (None, None)).unwrap();
    let y = Tensor::cat(&[&batch.history, &gen.narrow(1, 0, 7).unwrap()], 1).unwrap();
    let base: Vec<f32> = m.net().decode_step_outputs(&ctx, &y).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    for k in 0..7 {
        let mut v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        v[24 + k] += 3.0;
        let yp = Tensor::from_vec(v, (1, 31), m.device()).unwrap();
        let out: Vec<f32> = m.net().decode_step_outputs(&ctx, &yp).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        // output position t predicts slot t + 1
        assert_eq!(&out[..24 + k], &base[..24 + k], "k = {k}");
        assert_ne!(&out[24 + k..], &base[24 + k..]);
    }
}

#[test]
fn deterministic_weights_and_outputs() {
    let a = tiny(Task::Titration, FeatureGroup::G7);
    let b = tiny(Task::Titration, FeatureGroup::G7);
    assert_eq!(a.weights().unwrap(), b.weights().unwrap());
    let input = titration_input(&a);
    let x = a.predict_one(&input).unwrap();
    assert_eq!(x, a.predict_one(&input).unwrap());
    assert_eq!(x, b.predict_one(&input).unwrap());
    let c = GlycemicModel::new(a.config().clone(), a.norm().clone(), 4).unwrap();
    assert_ne!(a.weights().unwrap(), c.weights().unwrap());
}

#[test]
fn checkpoint_round_trip() {
    let clips = synthetic_clips("p1", 2, 1);
    let cfg = ModelConfig::tiny(Task::Titration, FeatureGroup::G7);
    let inputs: Vec<_> = clips
        .iter()
        .map(|c| ModelInput::from_clip(c, Some(&sample_profile()), &cfg).unwrap())
        .collect();
    let norm = NormStats::fit(&inputs, &cfg).unwrap();
    let m = GlycemicModel::new(cfg, norm, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    let mut info = std::collections::BTreeMap::new();
    info.insert("note".to_string(), "unit".to_string());
    m.save(&path, info.clone()).unwrap();
    let (loaded, header) = GlycemicModel::load(&path).unwrap();
    assert_eq!(header.info, info);
    assert_eq!(header.config.feature_group, FeatureGroup::G7);
    assert_eq!(loaded.norm(), m.norm());
    assert_eq!(loaded.weights().unwrap(), m.weights().unwrap());
    assert_eq!(loaded.predict(&inputs[..3]).unwrap(), m.predict(&inputs[..3]).unwrap());

    let bytes = std::fs::read(&path).unwrap();
    let text = String::from_utf8_lossy(&bytes).replace("\"version\":\"1\"", "\"version\":\"9\"");
    assert!(GlycemicModel::from_checkpoint_bytes(text.as_bytes()).is_err());
    assert!(GlycemicModel::from_checkpoint_bytes(b"not a checkpoint").is_err());
}

#[test]
fn f64_precision_runs() {
    let cfg = ModelConfig {
        precision: Precision::F64,
        ..ModelConfig::tiny(Task::Titration, FeatureGroup::G1)
    };
    let m = GlycemicModel::new(cfg.clone(), NormStats::identity(&cfg), 0).unwrap();
    assert_eq!(m.named_vars()[0].1.dtype(), DType::F64);
    let input = ModelInput::from_clip(&fixture_clip(), None, &cfg).unwrap();
    assert_eq!(input.temporal.channels, vec![Channel::Glucose, Channel::BolusInsulin, Channel::BasalInsulin]);
    assert_eq!(m.predict_one(&input).unwrap().len(), 8);
}

/// Step-by-step full-sequence decoding, the reference for the cached path.
fn generate_by_recompute(m: &GlycemicModel, ctx: &Tensor, history: &Tensor, lo: f64, hi: f64) -> Vec<f64> {
    let mut y = history.clone();
    let mut out = Vec::new();
    for _ in 0..m.config().future_len {
        let t = y.dim(1).unwrap();
        let pred = m.net().decode_step_outputs(ctx, &y).unwrap().narrow(1, t - 1, 1).unwrap().clamp(lo, hi).unwrap();
        out.push(pred.to_dtype(candle_core::DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()[0]);
        y = Tensor::cat(&[&y, &pred], 1).unwrap();
    }
    out
}

#[test]
fn cached_generation_matches_full_recompute() {
    for (task, group, precision, tol) in [
        (Task::Titration, FeatureGroup::G7, Precision::F64, 1e-10),
        (Task::GlucoseForecast, FeatureGroup::G5, Precision::F64, 1e-10),
        (Task::Titration, FeatureGroup::G7, Precision::F32, 1e-4),
    ] {
        let mc = ModelConfig {
            precision,
            decoder_layers: 2,
            head_kernel: 4,
            ..ModelConfig::tiny(task, group)
        };
        let m = GlycemicModel::new(mc, NormStats::identity(&ModelConfig::tiny(task, group)), 9).unwrap();
        let input = ModelInput::from_clip(&fixture_clip(), Some(&sample_profile()), m.config()).unwrap();
        let batch = m.batch(&[&input]).unwrap();
        let ctx = m.context(&batch).unwrap();
        let (lo, hi) = (-3.0, 3.0);
        let cached: Vec<f64> = m
            .net()
            .generate(&ctx, &batch.history, (Some(lo), Some(hi)))
            .unwrap()
            .to_dtype(candle_core::DType::F64)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let reference = generate_by_recompute(&m, &ctx, &batch.history, lo, hi);
        assert_eq!(cached.len(), reference.len());
        for (a, b) in cached.iter().zip(&reference) {
            assert!((a - b).abs() <= tol * b.abs().max(1.0), "{task:?} {precision:?}: {a} vs {b}");
        }
    }
}
