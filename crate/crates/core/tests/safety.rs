use std::sync::atomic::{AtomicUsize, Ordering};

use diets_core::audit::{AuditEntry, MemoryAudit, NullAudit};
use diets_core::context::GlycemicContext;
use diets_core::fixtures::{fixture_clip, sample_profile};
use diets_core::forecast::{ForecastError, ForecastRequest, GlucoseForecaster, GlucoseTrace};
use diets_core::llm::{text_hash, BackendError, ScriptedBackend};
use diets_core::model::ModelError;
use diets_core::safety::*;
use diets_core::titration::*;
use proptest::prelude::*;

/// Forecaster answering through a closure of (call index, plan).
struct StubForecaster<F> {
    f: F,
    calls: AtomicUsize,
}

impl<F: Fn(usize, &[f64]) -> Result<Vec<f64>, ForecastError> + Send + Sync> StubForecaster<F> {
    fn new(f: F) -> Self {
        StubForecaster {
            f,
            calls: AtomicUsize::new(0),
        }
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<F: Fn(usize, &[f64]) -> Result<Vec<f64>, ForecastError> + Send + Sync> GlucoseForecaster for StubForecaster<F> {
    fn forecast(&self, request: &ForecastRequest) -> Result<GlucoseTrace, ForecastError> {
        let i = self.calls.fetch_add(1, Ordering::SeqCst);
        (self.f)(i, &request.plan_iu).map(GlucoseTrace::new)
    }
}

fn context() -> GlycemicContext {
    GlycemicContext::from_clip(&fixture_clip(), Some(sample_profile()))
}

fn plan(doses: Vec<f64>) -> InsulinPlan {
    InsulinPlan::unchecked(doses, diets_core::fixtures::epoch())
}

/// Reads the proposed doses back out of a re-titration prompt.
fn prompt_doses(prompt: &str) -> Vec<f64> {
    let line = prompt.lines().find(|l| l.starts_with("Proposed bolus doses")).unwrap();
    line.rsplit(": ").next().unwrap().split(", ").map(|v| v.parse().unwrap()).collect()
}

fn halving_llm() -> ScriptedBackend {
    ScriptedBackend::with_handler(|p| {
        let d: Vec<String> = prompt_doses(p).iter().map(|v| format!("{}", v / 2.0)).collect();
        Ok(format!("Lower them.\n{{doses_iu: [{}]}}", d.join(", ")))
    })
}

fn run(
    doses: Vec<f64>,
    forecaster: &dyn GlucoseForecaster,
    llm: &ScriptedBackend,
    cfg: &GuardConfig,
) -> Result<GuardOutcome, SafetyError> {
    let ctx = context();
    let input = GuardInput {
        context: &ctx,
        recent_intake: "rice 200 g",
    };
    guard(plan(doses), &input, forecaster, &LlmRetitrator { backend: llm }, cfg, &NullAudit)
}

#[test]
fn safe_first_returns_the_original_plan() {
    let f = StubForecaster::new(|_, _| Ok(vec![110.0; 8]));
    let llm = halving_llm();
    let out = run(vec![1.0; 8], &f, &llm, &GuardConfig::default()).unwrap();
    assert_eq!(out.plan.safety_status, SafetyStatus::Safe);
    assert_eq!(out.plan.retitration_count, 0);
    assert_eq!(out.plan.doses_iu, vec![1.0; 8]);
    assert_eq!(f.calls(), 1);
    assert_eq!(llm.call_count(), 0);
}

#[test]
fn risky_then_safe_after_one_halving() {
    // more than 10 IU in total drives glucose low
    let f = StubForecaster::new(|_, p: &[f64]| Ok(vec![if p.iter().sum::<f64>() > 10.0 { 60.0 } else { 100.0 }; 8]));
    let llm = halving_llm();
    let out = run(vec![2.0; 8], &f, &llm, &GuardConfig::default()).unwrap();
    assert_eq!(out.plan.safety_status, SafetyStatus::Safe);
    assert_eq!(out.plan.retitration_count, 1);
    assert_eq!(out.plan.doses_iu, vec![1.0; 8]);
    assert!(llm.calls()[0].contains(HYPO_GUIDANCE));
    assert_eq!(out.iterations.len(), 2);
    assert!(out.iterations[1].assessment.is_safe);
}

#[test]
fn always_risky_is_flagged_after_exactly_max_iters() {
    for max_iters in [0, 1, 5] {
        let f = StubForecaster::new(|i, _| Ok(vec![200.0 + i as f64; 8]));
        let llm = halving_llm();
        let cfg = GuardConfig {
            max_iters,
            ..GuardConfig::default()
        };
        let out = run(vec![1.0; 8], &f, &llm, &cfg).unwrap();
        assert_eq!(out.plan.safety_status, SafetyStatus::Flagged);
        assert_eq!(out.plan.retitration_count, max_iters);
        assert_eq!(llm.call_count(), max_iters);
        assert_eq!(f.calls(), max_iters + 1);
        assert_eq!(out.iterations.len(), max_iters + 1);
        assert!(!out.diagnostics.is_empty());
    }
}

#[test]
fn flagged_fallback_picks_fewest_risk_events() {
    // second candidate has a single risky slot, the rest have eight
    let f = StubForecaster::new(|i, _| {
        let mut t = vec![250.0; 8];
        if i == 2 {
            t = vec![100.0; 8];
            t[7] = 181.0;
        }
        Ok(t)
    });
    let llm = halving_llm();
    let out = run(vec![8.0; 8], &f, &llm, &GuardConfig::default()).unwrap();
    assert_eq!(out.plan.safety_status, SafetyStatus::Flagged);
    assert_eq!(out.selected_iteration, 2);
    assert_eq!(out.plan.doses_iu, vec![2.0; 8]);
    assert_eq!(out.final_trace.glucose_mg_dl[7], 181.0);
}

#[test]
fn backend_failure_mid_loop_flags_immediately() {
    let f = StubForecaster::new(|_, _| Ok(vec![300.0; 8]));
    let llm = ScriptedBackend::new([
        Ok("{doses_iu: [1, 1, 1, 1, 1, 1, 1, 1]}".to_string()),
        Err(BackendError::Unavailable("down".into())),
    ]);
    let out = run(vec![0.5; 8], &f, &llm, &GuardConfig::default()).unwrap();
    assert_eq!(out.plan.safety_status, SafetyStatus::Flagged);
    assert_eq!(out.plan.retitration_count, 1);
    assert_eq!(f.calls(), 2);
    assert!(out.diagnostics.iter().any(|d| d.contains("unavailable")));
    assert_eq!(out.iterations.last().unwrap().backend_error.as_deref(), Some("backend unavailable: down"));
}

#[test]
fn unusable_reply_keeps_candidate_and_counts() {
    let f = StubForecaster::new(|i, _| Ok(vec![if i < 2 { 190.0 } else { 120.0 }; 8]));
    let llm = ScriptedBackend::new([
        Ok("no idea".to_string()),
        Ok("{doses_iu: [3, 3, 3, 3, 3, 3, 3, 3]}".to_string()),
    ]);
    let out = run(vec![1.0; 8], &f, &llm, &GuardConfig::default()).unwrap();
    assert_eq!(out.plan.safety_status, SafetyStatus::Safe);
    assert_eq!(out.plan.retitration_count, 2);
    assert_eq!(out.iterations[1].doses_iu, vec![1.0; 8]);
    assert!(out.iterations[0].notes[0].contains("unusable"));
    assert_eq!(out.plan.doses_iu, vec![3.0; 8]);
}

#[test]
fn out_of_range_llm_doses_are_clipped_and_noted() {
    let f = StubForecaster::new(|i, _| Ok(vec![if i == 0 { 200.0 } else { 120.0 }; 8]));
    let llm = ScriptedBackend::new([Ok("{doses_iu: [-2, 40, 1, 1, 1, 1, 1, 1]}".to_string())]);
    let out = run(vec![1.0; 8], &f, &llm, &GuardConfig::default()).unwrap();
    assert_eq!(out.plan.doses_iu, vec![0.0, 25.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
    assert_eq!(out.iterations[0].notes.len(), 2);
}

#[test]
fn first_forecast_failure_is_an_error() {
    let f = StubForecaster::new(|_, _| Err(ForecastError::Model(ModelError::ModelNotLoaded)));
    let llm = halving_llm();
    assert!(matches!(
        run(vec![1.0; 8], &f, &llm, &GuardConfig::default()),
        Err(SafetyError::Forecast(_))
    ));
}

#[test]
fn boundary_values_follow_strict_inequalities() {
    let cases = [(69.99, Some(RiskKind::Hypo)), (70.0, None), (180.0, None), (180.01, Some(RiskKind::Hyper))];
    for (v, expect) in cases {
        for slot in 0..8 {
            let mut t = vec![100.0; 8];
            t[slot] = v;
            let a = detect_risk(&GlucoseTrace::new(t));
            match expect {
                None => assert!(a.is_safe, "{v} at {slot}"),
                Some(kind) => {
                    assert_eq!(a.events, vec![RiskEvent { slot, kind, glucose_mg_dl: v }]);
                    assert!(!a.is_safe);
                }
            }
        }
    }
    let a = detect_risk(&GlucoseTrace::new(vec![100.0, 100.0, 100.0, 185.0, 100.0, 100.0, 100.0, 100.0]));
    assert_eq!(a.events.len(), 1);
    assert_eq!(a.events[0].slot, 3);
}

#[test]
fn prompts_carry_context_and_direction() {
    let doses: Vec<f64> = (1..=8).map(|i| i as f64 * 0.5).collect();
    let ctx = RetitrationContext {
        current_glucose_mg_dl: vec![150.0, 160.0],
        recent_intake: "noodles 300 g".into(),
        candidate_doses_iu: doses.clone(),
        predicted_glucose_mg_dl: Some(vec![190.0; 8]),
        risk_events: vec![RiskEvent {
            slot: 0,
            kind: RiskKind::Hyper,
            glucose_mg_dl: 190.0,
        }],
    };
    let p = build_retitration_prompt(&ctx).unwrap();
    assert!(p.contains(HYPER_GUIDANCE) && !p.contains(HYPO_GUIDANCE));
    assert!(p.contains("noodles 300 g") && p.contains("150.00"));
    assert_eq!(prompt_doses(&p), doses);
    let hypo = RetitrationContext {
        risk_events: vec![RiskEvent {
            slot: 4,
            kind: RiskKind::Hypo,
            glucose_mg_dl: 60.0,
        }],
        ..ctx.clone()
    };
    assert!(build_retitration_prompt(&hypo).unwrap().contains(HYPO_GUIDANCE));
    let missing = RetitrationContext {
        predicted_glucose_mg_dl: None,
        ..ctx
    };
    assert!(matches!(
        build_retitration_prompt(&missing),
        Err(SafetyError::IncompleteContext("predicted glucose trace"))
    ));
}

#[test]
fn audit_records_every_iteration_and_replays() {
    let f = StubForecaster::new(|_, p: &[f64]| Ok(vec![if p[0] > 1.0 { 60.0 } else { 120.0 }; 8]));
    let llm = halving_llm();
    let audit = MemoryAudit::default();
    let ctx = context();
    let input = GuardInput {
        context: &ctx,
        recent_intake: "rice",
    };
    let cfg = GuardConfig::default();
    let live = guard(plan(vec![4.0; 8]), &input, &f, &LlmRetitrator { backend: &llm }, &cfg, &audit).unwrap();
    assert_eq!(live.plan.retitration_count, 2);
    let entries = audit.entries();
    assert_eq!(entries.len(), live.iterations.len() + 1);
    for (e, it) in entries.iter().zip(&live.iterations) {
        assert_eq!(e, &AuditEntry::Iteration(it.clone()));
    }
    let first = &live.iterations[0];
    assert_eq!(first.prompt_sha256, Some(text_hash(first.prompt.as_ref().unwrap())));
    assert_eq!(first.response_sha256, Some(text_hash(first.response.as_ref().unwrap())));
    assert!(matches!(entries.last(), Some(AuditEntry::Outcome { .. })));

    let replayed = guard(
        live.initial_plan.clone(),
        &input,
        &f,
        &LlmRetitrator {
            backend: replay_backend(&live),
        },
        &cfg,
        &NullAudit,
    )
    .unwrap();
    assert_eq!(replayed, live);
}

struct ConstTitrator(AtomicUsize);

impl Titrator for ConstTitrator {
    fn recommend(&self, request: &TitrationRequest) -> Result<InsulinPlan, TitrationError> {
        self.0.fetch_add(1, Ordering::SeqCst);
        let target = request.target.resolve(8)?;
        // lower targets ask for more insulin
        Ok(plan(target.iter().map(|t| (200.0 - t).max(0.0) / 20.0).collect()))
    }
}

#[test]
fn experimental_model_retitration_moves_the_target() {
    let request = TitrationRequest {
        context: context(),
        target: TargetSpec::constant(140.0),
    };
    let titrator = ConstTitrator(AtomicUsize::new(0));
    let re = ModelRetitrator::new(titrator, request, 20.0);
    // hyper until the plan reaches 4 IU per slot
    let f = StubForecaster::new(|_, p: &[f64]| Ok(vec![if p[0] < 4.0 { 200.0 } else { 150.0 }; 8]));
    let ctx = context();
    let input = GuardInput {
        context: &ctx,
        recent_intake: "rice",
    };
    let out = guard(plan(vec![3.0; 8]), &input, &f, &re, &GuardConfig::default(), &NullAudit).unwrap();
    assert_eq!(out.plan.safety_status, SafetyStatus::Safe);
    assert_eq!(out.plan.retitration_count, 1);
    assert_eq!(out.plan.doses_iu, vec![4.0; 8]);
    assert!(out.iterations[0].prompt.is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Random forecasters and replies: the loop stops within bounds, never
    /// returns an unchecked plan, and `safe` always means a risk-free forecast.
    #[test]
    fn guard_contract_under_random_scripts(
        traces in proptest::collection::vec(proptest::collection::vec(40.0f64..260.0, 8), 8),
        replies in proptest::collection::vec(0u8..4, 8),
        max_iters in 0usize..6,
    ) {
        let t2 = traces.clone();
        let f = StubForecaster::new(move |i, _| Ok(t2[i.min(7)].clone()));
        let script: Vec<Result<String, BackendError>> = replies.iter().map(|r| match r {
            0 => Ok("{doses_iu: [1, 2, 3, 4, 5, 6, 7, 8]}".to_string()),
            1 => Ok("{doses_iu: [-5, 99, 0, 0, 0, 0, 0, 0]}".to_string()),
            2 => Ok("garbage".to_string()),
            _ => Err(BackendError::Unavailable("x".into())),
        }).collect();
        let llm = ScriptedBackend::new(script);
        let cfg = GuardConfig { max_iters, ..GuardConfig::default() };
        let out = run(vec![1.0; 8], &f, &llm, &cfg).unwrap();
        prop_assert!(out.plan.safety_status != SafetyStatus::Unchecked);
        prop_assert!(f.calls() <= max_iters + 1);
        prop_assert!(out.plan.retitration_count <= max_iters);
        prop_assert!(out.plan.doses_iu.iter().all(|d| (0.0..=25.0).contains(d)));
        if out.plan.safety_status == SafetyStatus::Safe {
            prop_assert!(detect_risk(&out.final_trace).is_safe);
        }
    }
}
