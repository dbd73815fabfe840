//! The guard loop: forecast a plan, look for hypo/hyperglycemia, ask for a
//! revised plan, repeat.
//!
//! A plan leaves [`guard`] either `safe` (its last forecast had no risk
//! event) or `flagged`. The loop runs at most `max_iters` re-titrations.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::audit::{AuditEntry, AuditError, AuditSink};
use crate::context::GlycemicContext;
use crate::forecast::{ForecastError, ForecastRequest, GlucoseForecaster, GlucoseTrace};
use crate::llm::{text_hash, BackendError, LlmBackend, ScriptedBackend};
use crate::titration::{InsulinPlan, SafetyStatus, TargetSpec, TitrationError, TitrationRequest, Titrator, TARGET_BOUNDS_MG_DL};

#[derive(Debug, Error)]
pub enum SafetyError {
    #[error("re-titration context is missing {0}")]
    IncompleteContext(&'static str),
    #[error("malformed re-titration response: {0}")]
    MalformedResponse(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Titration(#[from] TitrationError),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskKind {
    Hypo,
    Hyper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskEvent {
    pub slot: usize,
    pub kind: RiskKind,
    pub glucose_mg_dl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskAssessment {
    pub events: Vec<RiskEvent>,
    pub is_safe: bool,
}

impl RiskAssessment {
    pub fn has(&self, kind: RiskKind) -> bool {
        self.events.iter().any(|e| e.kind == kind)
    }
}

/// Risk bounds in mg/dl. By default a value equal to a bound is safe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskThresholds {
    pub hypo_mg_dl: f64,
    pub hyper_mg_dl: f64,
    #[serde(default)]
    pub bounds_are_risky: bool,
}

impl Default for RiskThresholds {
    fn default() -> Self {
        RiskThresholds {
            hypo_mg_dl: 70.0,
            hyper_mg_dl: 180.0,
            bounds_are_risky: false,
        }
    }
}

impl RiskThresholds {
    pub fn classify(&self, glucose_mg_dl: f64) -> Option<RiskKind> {
        let (hypo, hyper) = if self.bounds_are_risky {
            (glucose_mg_dl <= self.hypo_mg_dl, glucose_mg_dl >= self.hyper_mg_dl)
        } else {
            (glucose_mg_dl < self.hypo_mg_dl, glucose_mg_dl > self.hyper_mg_dl)
        };
        if hypo {
            Some(RiskKind::Hypo)
        } else if hyper {
            Some(RiskKind::Hyper)
        } else {
            None
        }
    }

    pub fn assess(&self, trace: &GlucoseTrace) -> RiskAssessment {
        let events: Vec<RiskEvent> = trace
            .glucose_mg_dl
            .iter()
            .enumerate()
            .filter_map(|(slot, &g)| {
                // a non-finite forecast cannot be called safe
                let kind = if g.is_nan() { Some(RiskKind::Hyper) } else { self.classify(g) };
                kind.map(|kind| RiskEvent {
                    slot,
                    kind,
                    glucose_mg_dl: g,
                })
            })
            .collect();
        RiskAssessment {
            is_safe: events.is_empty(),
            events,
        }
    }
}

/// Risk events of a trace with the default 70/180 mg/dl bounds.
pub fn detect_risk(trace: &GlucoseTrace) -> RiskAssessment {
    RiskThresholds::default().assess(trace)
}

/// What the re-titration prompt needs to know.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetitrationContext {
    pub current_glucose_mg_dl: Vec<f64>,
    pub recent_intake: String,
    pub candidate_doses_iu: Vec<f64>,
    pub predicted_glucose_mg_dl: Option<Vec<f64>>,
    pub risk_events: Vec<RiskEvent>,
}

pub const HYPER_GUIDANCE: &str =
    "Glucose is forecast to rise above the upper bound, so one or more doses probably need to be increased.";
pub const HYPO_GUIDANCE: &str =
    "Glucose is forecast to fall below the lower bound, so one or more doses probably need to be reduced.";

fn list(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(", ")
}

/// Prompt asking for a revised plan. Wording is original to this crate.
pub fn build_retitration_prompt(ctx: &RetitrationContext) -> Result<String, SafetyError> {
    if ctx.current_glucose_mg_dl.is_empty() {
        return Err(SafetyError::IncompleteContext("current glucose"));
    }
    if ctx.recent_intake.trim().is_empty() {
        return Err(SafetyError::IncompleteContext("recent dietary intake"));
    }
    if ctx.candidate_doses_iu.is_empty() {
        return Err(SafetyError::IncompleteContext("candidate plan"));
    }
    let trace = match &ctx.predicted_glucose_mg_dl {
        Some(t) if !t.is_empty() => t,
        _ => return Err(SafetyError::IncompleteContext("predicted glucose trace")),
    };
    if ctx.risk_events.is_empty() {
        return Err(SafetyError::IncompleteContext("risk events"));
    }
    let n = ctx.candidate_doses_iu.len();
    let mut p = String::new();
    p.push_str("You are an endocrinologist reviewing a bolus insulin schedule before it is given.\n\n");
    p.push_str(&format!(
        "Recent glucose readings, 15 minutes apart, mg/dl: {}\n",
        list(&ctx.current_glucose_mg_dl)
    ));
    p.push_str(&format!("Recent and planned food: {}\n", ctx.recent_intake.trim()));
    p.push_str(&format!(
        "Proposed bolus doses for the next {n} slots of 15 minutes, IU: {}\n",
        list(&ctx.candidate_doses_iu)
    ));
    p.push_str(&format!("Forecast glucose under that schedule, mg/dl: {}\n", list(trace)));
    p.push_str("Problems found in the forecast:\n");
    for e in &ctx.risk_events {
        let what = match e.kind {
            RiskKind::Hypo => "too low",
            RiskKind::Hyper => "too high",
        };
        p.push_str(&format!("- slot {}: {:.1} mg/dl, {what}\n", e.slot + 1, e.glucose_mg_dl));
    }
    p.push('\n');
    if ctx.risk_events.iter().any(|e| e.kind == RiskKind::Hyper) {
        p.push_str(HYPER_GUIDANCE);
        p.push('\n');
    }
    if ctx.risk_events.iter().any(|e| e.kind == RiskKind::Hypo) {
        p.push_str(HYPO_GUIDANCE);
        p.push('\n');
    }
    p.push_str(&format!(
        "\nReply with a revised schedule of exactly {n} non-negative doses in this form and nothing after it:\n{{doses_iu: [d1, d2, ..., d{n}]}}\n"
    ));
    Ok(p)
}

/// Reads the last `doses_iu: [...]` list in `text`, or the last bracketed
/// list when the key is absent. Values are not clipped here.
pub fn parse_retitration_response(text: &str, expected: usize) -> Result<Vec<f64>, SafetyError> {
    let start = match text.rfind("doses_iu") {
        Some(k) => text[k..].find('[').map(|i| k + i),
        None => text.rfind('['),
    }
    .ok_or_else(|| SafetyError::MalformedResponse("no dose list".into()))?;
    let end = text[start..]
        .find(']')
        .map(|i| start + i)
        .ok_or_else(|| SafetyError::MalformedResponse("unterminated dose list".into()))?;
    let doses = text[start + 1..end]
        .split(',')
        .map(|s| {
            let s = s.trim().trim_end_matches("IU").trim();
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| SafetyError::MalformedResponse(format!("not a dose: {s:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if doses.len() != expected {
        return Err(SafetyError::MalformedResponse(format!(
            "{} doses, expected {expected}",
            doses.len()
        )));
    }
    Ok(doses)
}

/// Clips every dose into `[0, max_bolus_iu]`; returns a note per change.
pub fn clip_doses(doses: &mut [f64], max_bolus_iu: f64) -> Vec<String> {
    let mut notes = Vec::new();
    for (i, d) in doses.iter_mut().enumerate() {
        let c = d.clamp(0.0, max_bolus_iu);
        if c != *d {
            notes.push(format!("slot {} dose {} IU clipped to {} IU", i + 1, d, c));
            *d = c;
        }
    }
    notes
}

/// A revised plan together with the exchange that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retitration {
    /// `None` when the reply could not be read as a plan.
    pub doses_iu: Option<Vec<f64>>,
    pub prompt: Option<String>,
    pub response: Option<String>,
    pub error: Option<String>,
}

pub trait Retitrator: Send + Sync {
    fn retitrate(&self, ctx: &RetitrationContext) -> Result<Retitration, SafetyError>;
}

/// Asks a language model for a revised plan.
pub struct LlmRetitrator<B> {
    pub backend: B,
}

impl<B: LlmBackend> Retitrator for LlmRetitrator<B> {
    fn retitrate(&self, ctx: &RetitrationContext) -> Result<Retitration, SafetyError> {
        let prompt = build_retitration_prompt(ctx)?;
        let response = self.backend.complete(&prompt)?;
        let (doses, error) = match parse_retitration_response(&response, ctx.candidate_doses_iu.len()) {
            Ok(d) => (Some(d), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Ok(Retitration {
            doses_iu: doses,
            prompt: Some(prompt),
            response: Some(response),
            error,
        })
    }
}

/// Experimental: re-runs the titration model with the target moved away
/// from the risk, `step_mg_dl` further on every call.
pub struct ModelRetitrator<T> {
    pub titrator: T,
    pub request: TitrationRequest,
    pub step_mg_dl: f64,
    offset: Mutex<f64>,
}

impl<T: Titrator> ModelRetitrator<T> {
    pub fn new(titrator: T, request: TitrationRequest, step_mg_dl: f64) -> Self {
        ModelRetitrator {
            titrator,
            request,
            step_mg_dl,
            offset: Mutex::new(0.0),
        }
    }
}

impl<T: Titrator> Retitrator for ModelRetitrator<T> {
    fn retitrate(&self, ctx: &RetitrationContext) -> Result<Retitration, SafetyError> {
        let hyper = ctx.risk_events.iter().filter(|e| e.kind == RiskKind::Hyper).count();
        let hypo = ctx.risk_events.len() - hyper;
        let mut offset = self.offset.lock().expect("offset lock");
        *offset += if hyper >= hypo { -self.step_mg_dl } else { self.step_mg_dl };
        let base = self.request.target.resolve(ctx.candidate_doses_iu.len())?;
        let (lo, hi) = TARGET_BOUNDS_MG_DL;
        let shifted = base.iter().map(|v| (v + *offset).clamp(lo + 1.0, hi - 1.0)).collect();
        let request = TitrationRequest {
            context: self.request.context.clone(),
            target: TargetSpec::Trace { glucose_mg_dl: shifted },
        };
        let plan = self.titrator.recommend(&request)?;
        Ok(Retitration {
            doses_iu: Some(plan.doses_iu),
            prompt: None,
            response: None,
            error: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuardConfig {
    pub max_iters: usize,
    pub thresholds: RiskThresholds,
    pub max_bolus_iu: f64,
}

impl Default for GuardConfig {
    fn default() -> Self {
        GuardConfig {
            max_iters: 5,
            thresholds: RiskThresholds::default(),
            max_bolus_iu: crate::titration::DEFAULT_MAX_BOLUS_IU,
        }
    }
}

/// Audit record of one forecast and, when it was risky, the re-titration
/// that followed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardIteration {
    pub iteration: usize,
    pub doses_iu: Vec<f64>,
    pub trace_mg_dl: Vec<f64>,
    pub assessment: RiskAssessment,
    pub prompt_sha256: Option<String>,
    pub response_sha256: Option<String>,
    pub prompt: Option<String>,
    pub response: Option<String>,
    /// Backend error text when the re-titration call failed.
    pub backend_error: Option<String>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardOutcome {
    pub initial_plan: InsulinPlan,
    /// Status is always `safe` or `flagged`.
    pub plan: InsulinPlan,
    pub final_trace: GlucoseTrace,
    pub iterations: Vec<GuardIteration>,
    /// Iteration whose candidate became `plan`.
    pub selected_iteration: usize,
    pub diagnostics: Vec<String>,
}

impl GuardOutcome {
    pub fn risk_history(&self) -> Vec<RiskAssessment> {
        self.iterations.iter().map(|i| i.assessment.clone()).collect()
    }
}

/// Everything the guard needs besides the plan and its collaborators.
pub struct GuardInput<'a> {
    pub context: &'a GlycemicContext,
    pub recent_intake: &'a str,
}

/// Runs forecast, risk detection and re-titration until a forecast is safe
/// or `max_iters` re-titrations have been made.
///
/// A failed re-titration call ends the loop at once with a flagged plan. An
/// unparseable reply keeps the current candidate for the next round. A
/// forecast error before any forecast succeeded is returned as an error.
pub fn guard(
    plan: InsulinPlan,
    input: &GuardInput<'_>,
    forecaster: &dyn GlucoseForecaster,
    retitrator: &dyn Retitrator,
    config: &GuardConfig,
    audit: &dyn AuditSink,
) -> Result<GuardOutcome, SafetyError> {
    let initial_plan = plan.clone();
    let mut doses = plan.doses_iu.clone();
    let mut diagnostics = clip_doses(&mut doses, config.max_bolus_iu);
    let mut iterations: Vec<GuardIteration> = Vec::new();
    let mut retitrations = 0;
    let mut stopped_early = false;
    for iteration in 0..=config.max_iters {
        let request = ForecastRequest {
            context: input.context.clone(),
            plan_iu: doses.clone(),
        };
        let trace = match forecaster.forecast(&request) {
            Ok(t) => t,
            Err(e) if iterations.is_empty() => return Err(e.into()),
            Err(e) => {
                diagnostics.push(format!("forecast failed at iteration {iteration}: {e}"));
                stopped_early = true;
                break;
            }
        };
        let assessment = config.thresholds.assess(&trace);
        let mut record = GuardIteration {
            iteration,
            doses_iu: doses.clone(),
            trace_mg_dl: trace.glucose_mg_dl.clone(),
            assessment: assessment.clone(),
            prompt_sha256: None,
            response_sha256: None,
            prompt: None,
            response: None,
            backend_error: None,
            notes: Vec::new(),
        };
        if assessment.is_safe || iteration == config.max_iters {
            audit.append(&AuditEntry::Iteration(record.clone()))?;
            iterations.push(record);
            if assessment.is_safe {
                let outcome = GuardOutcome {
                    initial_plan,
                    plan: InsulinPlan {
                        doses_iu: doses,
                        created_at: plan.created_at,
                        safety_status: SafetyStatus::Safe,
                        retitration_count: retitrations,
                    },
                    final_trace: trace,
                    iterations,
                    selected_iteration: iteration,
                    diagnostics,
                };
                audit.append(&AuditEntry::outcome(&input.context.patient_id, &outcome))?;
                return Ok(outcome);
            }
            break;
        }
        let ctx = RetitrationContext {
            current_glucose_mg_dl: input.context.history.glucose_mg_dl.clone(),
            recent_intake: input.recent_intake.to_string(),
            candidate_doses_iu: doses.clone(),
            predicted_glucose_mg_dl: Some(trace.glucose_mg_dl.clone()),
            risk_events: assessment.events.clone(),
        };
        match retitrator.retitrate(&ctx) {
            Ok(r) => {
                record.prompt_sha256 = r.prompt.as_deref().map(text_hash);
                record.response_sha256 = r.response.as_deref().map(text_hash);
                record.prompt = r.prompt;
                record.response = r.response;
                match r.doses_iu {
                    Some(mut next) => {
                        record.notes = clip_doses(&mut next, config.max_bolus_iu);
                        for n in &record.notes {
                            warn!(iteration, "{n}");
                        }
                        doses = next;
                    }
                    None => {
                        let e = r.error.unwrap_or_else(|| "no plan".into());
                        warn!(iteration, error = %e, "re-titration unusable, keeping candidate");
                        record.notes.push(format!("re-titration unusable: {e}"));
                    }
                }
            }
            Err(SafetyError::Backend(e)) => {
                let msg = e.to_string();
                warn!(iteration, error = %msg, "re-titration backend failed");
                record.backend_error = Some(msg.clone());
                diagnostics.push(format!("re-titration backend unavailable at iteration {iteration}: {msg}"));
                audit.append(&AuditEntry::Iteration(record.clone()))?;
                iterations.push(record);
                stopped_early = true;
                break;
            }
            Err(e) => {
                warn!(iteration, error = %e, "re-titration unusable, keeping candidate");
                record.notes.push(format!("re-titration unusable: {e}"));
            }
        }
        retitrations += 1;
        audit.append(&AuditEntry::Iteration(record.clone()))?;
        iterations.push(record);
    }
    if !stopped_early {
        diagnostics.push(format!("no safe plan after {} re-titrations", config.max_iters));
    }
    let selected = iterations
        .iter()
        .min_by_key(|i| i.assessment.events.len())
        .expect("at least one forecast");
    let outcome = GuardOutcome {
        initial_plan,
        plan: InsulinPlan {
            doses_iu: selected.doses_iu.clone(),
            created_at: plan.created_at,
            safety_status: SafetyStatus::Flagged,
            retitration_count: retitrations,
        },
        final_trace: GlucoseTrace::new(selected.trace_mg_dl.clone()),
        selected_iteration: selected.iteration,
        iterations,
        diagnostics,
    };
    audit.append(&AuditEntry::outcome(&input.context.patient_id, &outcome))?;
    Ok(outcome)
}

/// Backend that answers with the responses recorded in `outcome`, in order.
pub fn replay_backend(outcome: &GuardOutcome) -> ScriptedBackend {
    let script: Vec<Result<String, BackendError>> = outcome
        .iterations
        .iter()
        .filter_map(|i| match (&i.response, &i.backend_error) {
            (Some(r), _) => Some(Ok(r.clone())),
            (None, Some(e)) => Some(Err(BackendError::Unavailable(e.clone()))),
            (None, None) => None,
        })
        .collect();
    ScriptedBackend::new(script)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strict_bounds() {
        let t = RiskThresholds::default();
        assert_eq!(t.classify(69.99), Some(RiskKind::Hypo));
        assert_eq!(t.classify(70.0), None);
        assert_eq!(t.classify(180.0), None);
        assert_eq!(t.classify(180.01), Some(RiskKind::Hyper));
        let inclusive = RiskThresholds {
            bounds_are_risky: true,
            ..t
        };
        assert_eq!(inclusive.classify(70.0), Some(RiskKind::Hypo));
        assert_eq!(inclusive.classify(180.0), Some(RiskKind::Hyper));
    }

    #[test]
    fn nan_is_never_safe() {
        let a = detect_risk(&GlucoseTrace::new(vec![f64::NAN]));
        assert!(!a.is_safe);
    }

    #[test]
    fn response_parsing() {
        let d = parse_retitration_response("thinking [1] ... {doses_iu: [1, 2.5, 0, 0, 0, 0, 0, 3 IU]}", 8).unwrap();
        assert_eq!(d, vec![1.0, 2.5, 0.0, 0.0, 0.0, 0.0, 0.0, 3.0]);
        assert_eq!(parse_retitration_response("[1,2]", 2).unwrap(), vec![1.0, 2.0]);
        assert!(parse_retitration_response("{doses_iu: [1, lots]}", 2).is_err());
        assert!(parse_retitration_response("{doses_iu: [1, 2, 3]}", 2).is_err());
        assert!(parse_retitration_response("no list", 2).is_err());
        assert_eq!(parse_retitration_response("{doses_iu: [-1, 2]}", 2).unwrap(), vec![-1.0, 2.0]);
    }

    #[test]
    fn clipping_notes_each_change() {
        let mut d = vec![-1.0, 3.0, 40.0];
        let notes = clip_doses(&mut d, 25.0);
        assert_eq!(d, vec![0.0, 3.0, 25.0]);
        assert_eq!(notes.len(), 2);
    }
}
