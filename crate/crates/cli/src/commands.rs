use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::NaiveDateTime;
use diets_core::audit::NullAudit;
use diets_core::context::{GlycemicContext, Horizon, SlotHistory};
use diets_core::diet::{MealDescription, NutrientEstimate, NutrientEstimator};
use diets_core::forecast::{forecast as run_forecast, ForecastRequest, GlucoseTrace};
use diets_core::llm::{BackendConfig, LlmBackend};
use diets_core::model::{FeatureGroup, GlycemicModel, PatientProfile, Task};
use diets_core::pipeline::{split, Channel, Clip, DatasetSplit, SampleGrid, BASAL_HISTORY_SLOTS, SLOT_MINUTES};
use diets_core::safety::{guard, GuardConfig, GuardInput, LlmRetitrator, RiskAssessment};
use diets_core::titration::{recommend as titrate, InsulinPlan, TargetSpec, TitrationRequest};
use diets_core::training::{ablation_run, evaluate, personalize, train_foundation, EvalReport, FinetuneMode, TrainReport};
use serde::{Deserialize, Serialize};

use crate::config::{require_path, CliConfig};
use crate::dataset::{patient_clips, Dataset};
use crate::error::{internal, user, CliError, Result};

pub const DISCLAIMER: &str = diets_service::session::DISCLAIMER;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(internal)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(internal)?;
    std::fs::write(path, text + "\n").map_err(internal)
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(internal)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(internal)?;
    for r in rows {
        w.serialize(r).map_err(internal)?;
    }
    w.flush().map_err(internal)
}

pub fn task_name(task: Task) -> &'static str {
    match task {
        Task::Titration => "titration",
        Task::GlucoseForecast => "glucose",
    }
}

fn unit(task: Task) -> &'static str {
    match task {
        Task::Titration => "IU",
        Task::GlucoseForecast => "mg/dl",
    }
}

pub fn load_model(path: &Path) -> Result<GlycemicModel> {
    GlycemicModel::load(path)
        .map(|(m, _)| m)
        .map_err(|e| CliError::User(format!("{}: {e}", path.display())))
}

fn dataset(cfg: &CliConfig) -> Result<Dataset> {
    Dataset::load(require_path(cfg.dataset.as_ref(), "dataset directory")?)
}

fn pooled_split(cfg: &CliConfig, data: &Dataset) -> Result<DatasetSplit> {
    let clips = data.clips(cfg.window()?)?;
    split(&clips, cfg.seed).map_err(user)
}

#[derive(Serialize)]
struct HistoryRow {
    epoch: usize,
    steps: usize,
    train_loss: f64,
    val_mae: f64,
}

fn save_training(out: &Path, stem: &str, model: &GlycemicModel, report: &TrainReport) -> Result<PathBuf> {
    std::fs::create_dir_all(out).map_err(internal)?;
    let ckpt = out.join(format!("{stem}.safetensors"));
    model.save(&ckpt, report.info()).map_err(internal)?;
    let rows: Vec<HistoryRow> = report
        .history
        .iter()
        .map(|e| HistoryRow {
            epoch: e.epoch,
            steps: e.steps,
            train_loss: e.train_loss,
            val_mae: e.val_mae,
        })
        .collect();
    write_csv(&out.join(format!("{stem}_history.csv")), &rows)?;
    write_json(&out.join(format!("{stem}_train.json")), report)?;
    Ok(ckpt)
}

fn training_summary(task: Task, ckpt: &Path, report: &TrainReport) -> String {
    format!(
        "{} epochs, {} steps{}; best validation MAE {} {} at epoch {}\ncheckpoint: {}\n",
        report.history.len(),
        report.steps,
        if report.stopped_early { " (early stop)" } else { "" },
        report.best_val_mae.map_or("n/a".into(), |v| format!("{v:.4}")),
        unit(task),
        report.best_epoch.map_or("n/a".into(), |e| e.to_string()),
        ckpt.display()
    )
}

pub fn train(cfg: &CliConfig, task: Task, group: Option<FeatureGroup>) -> Result<String> {
    let data = dataset(cfg)?;
    let split = pooled_split(cfg, &data)?;
    let mc = cfg.model.config(task, group);
    let (model, report) = train_foundation(&split, &data.profiles, &cfg.train, &mc)?;
    let ckpt = save_training(&cfg.out, task_name(task), &model, &report)?;
    Ok(format!(
        "foundation {} model, {} parameters, {}/{}/{} clips\n{}",
        task_name(task),
        model.parameter_count(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        training_summary(task, &ckpt, &report)
    ))
}

/// First `days` days of a patient's grid.
fn first_days(grid: &SampleGrid, days: Option<usize>) -> SampleGrid {
    let Some(d) = days else { return grid.clone() };
    let len = (d * 96).min(grid.len());
    let mut g = grid.clone();
    g.values.iter_mut().for_each(|v| v.truncate(len));
    g.missing.iter_mut().for_each(|m| m.truncate(len));
    g.notes.retain(|(s, _)| *s < len);
    g
}

pub fn finetune(cfg: &CliConfig, checkpoint: &Path, patient: &str, mode: FinetuneMode, days: Option<usize>) -> Result<String> {
    let base = load_model(checkpoint)?;
    let data = dataset(cfg)?;
    let grid = first_days(data.grid(patient)?, days);
    let clips = patient_clips(&grid, cfg.window()?)?;
    let (model, report) = personalize(&base, &clips, &data.profiles, mode, &cfg.train)?;
    let task = base.config().task;
    let stem = format!("{}_{patient}_{mode}", task_name(task));
    let ckpt = save_training(&cfg.out, &stem, &model, &report)?;
    Ok(format!(
        "{mode} personalization for {patient} on {} clips\n{}",
        clips.len(),
        training_summary(task, &ckpt, &report)
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Train,
    Val,
    Test,
    All,
}

/// What `evaluate` writes and `report` reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub task: Task,
    pub unit: String,
    pub checkpoint: String,
    pub patient: Option<String>,
    pub part: Part,
    pub report: EvalReport,
}

pub const EVAL_FILE: &str = "eval.json";

pub fn evaluate_cmd(cfg: &CliConfig, checkpoint: &Path, patient: Option<&str>, part: Part) -> Result<String> {
    let model = load_model(checkpoint)?;
    let data = dataset(cfg)?;
    let clips: Vec<Clip> = match patient {
        Some(p) => patient_clips(data.grid(p)?, cfg.window()?)?,
        None => data.clips(cfg.window()?)?,
    };
    let chosen = match part {
        Part::All => clips,
        _ => {
            let s = split(&clips, cfg.seed).map_err(user)?;
            match part {
                Part::Train => s.train,
                Part::Val => s.val,
                _ => s.test,
            }
        }
    };
    let report = evaluate(&model, &chosen, &data.profiles)?;
    let task = model.config().task;
    let artifact = EvalArtifact {
        task,
        unit: unit(task).into(),
        checkpoint: checkpoint.display().to_string(),
        patient: patient.map(str::to_string),
        part,
        report,
    };
    write_json(&cfg.out.join(EVAL_FILE), &artifact)?;
    #[derive(Serialize)]
    struct Row<'a> {
        clip_id: &'a str,
        mae: f64,
    }
    let rows: Vec<Row> = artifact
        .report
        .clips
        .iter()
        .map(|c| Row {
            clip_id: &c.clip_id,
            mae: c.mae,
        })
        .collect();
    write_csv(&cfg.out.join("eval_clips.csv"), &rows)?;
    Ok(format!(
        "{} MAE {:.4} {} over {} {:?} clips\n",
        task_name(task),
        artifact.report.mae,
        artifact.unit,
        artifact.report.clips.len(),
        part
    ))
}

pub fn ablate(cfg: &CliConfig, task: Task, groups: &[FeatureGroup]) -> Result<String> {
    let data = dataset(cfg)?;
    let split = pooled_split(cfg, &data)?;
    let groups = if groups.is_empty() { &FeatureGroup::ALL[..] } else { groups };
    let rows = ablation_run(groups, &split, &data.profiles, &cfg.train, &cfg.model.config(task, None))?;
    #[derive(Serialize)]
    struct Row {
        group: String,
        parameters: usize,
        best_val_mae: Option<f64>,
        test_mae: f64,
    }
    let csv_rows: Vec<Row> = rows
        .iter()
        .map(|r| Row {
            group: r.group.to_string(),
            parameters: r.parameters,
            best_val_mae: r.best_val_mae,
            test_mae: r.test_mae,
        })
        .collect();
    let path = cfg.out.join(format!("ablation_{}.csv", task_name(task)));
    write_csv(&path, &csv_rows)?;
    let mut s = format!("{:<6} {:>12} {:>12}\n", "group", "parameters", format!("MAE ({})", unit(task)));
    for r in &rows {
        s.push_str(&format!("{:<6} {:>12} {:>12.4}\n", r.group.to_string(), r.parameters, r.test_mae));
    }
    s.push_str(&format!("written to {}\n", path.display()));
    Ok(s)
}

fn backend(cfg: &CliConfig) -> Result<(Box<dyn LlmBackend>, usize)> {
    let bc = match &cfg.backend_config {
        Some(p) => BackendConfig::load(p).map_err(user)?,
        None => BackendConfig::default(),
    };
    Ok((bc.build().map_err(user)?, bc.max_retries))
}

/// Context at `issued_at` from a patient's grid: the `history` slots
/// before it, the previous day of basal insulin and, as projected basal,
/// the doses given at the same times one day earlier.
pub fn context_at(
    grid: &SampleGrid,
    issued_at: NaiveDateTime,
    history: usize,
    future: usize,
    profile: Option<PatientProfile>,
) -> Result<GlycemicContext> {
    let offset = (issued_at - grid.start).num_minutes();
    if offset % SLOT_MINUTES != 0 {
        return Err(CliError::User(format!("{issued_at} is not on the {SLOT_MINUTES}-minute grid")));
    }
    let at = offset / SLOT_MINUTES;
    if at < history as i64 || at > grid.len() as i64 {
        return Err(CliError::User(format!(
            "{issued_at} needs {history} recorded slots before it inside the patient's data"
        )));
    }
    let at = at as usize;
    let slot = |c: Channel, i: i64| -> f64 {
        if i >= 0 && (i as usize) < grid.len() {
            grid.channel(c)[i as usize]
        } else {
            0.0
        }
    };
    let past = |c: Channel| (at - history..at).map(|i| grid.channel(c)[i]).collect::<Vec<_>>();
    let day = BASAL_HISTORY_SLOTS as i64;
    Ok(GlycemicContext {
        patient_id: grid.patient_id.clone(),
        issued_at,
        history: SlotHistory {
            glucose_mg_dl: past(Channel::Glucose),
            bolus_iu: past(Channel::BolusInsulin),
            basal_iu: past(Channel::BasalInsulin),
            carb_g: past(Channel::CarbG),
            protein_g: past(Channel::ProteinG),
            fat_g: past(Channel::FatG),
            calories_cal: past(Channel::Calories),
            drug_g: past(Channel::DrugG),
        },
        basal_history_iu: Some((at as i64 - day..at as i64).map(|i| slot(Channel::BasalInsulin, i)).collect()),
        profile,
        horizon: Horizon {
            basal_iu: (0..future as i64).map(|k| slot(Channel::BasalInsulin, at as i64 + k - day)).collect(),
            ..Horizon::zeros(future)
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub patient_id: String,
    pub issued_at: NaiveDateTime,
    pub target_glucose_mg_dl: f64,
    pub meal_text: String,
    pub nutrients: NutrientEstimate,
    /// Rounded to 0.01 IU.
    pub doses_iu: Vec<f64>,
    pub plan: InsulinPlan,
    pub predicted_glucose_mg_dl: Vec<f64>,
    pub risk_history: Vec<RiskAssessment>,
    pub diagnostics: Vec<String>,
    pub disclaimer: String,
}

pub struct RecommendArgs<'a> {
    pub patient: &'a str,
    pub target_mg_dl: f64,
    pub meal: &'a str,
    pub checkpoint: Option<&'a Path>,
    pub forecast_checkpoint: Option<&'a Path>,
    pub at: Option<NaiveDateTime>,
}

pub fn recommend(cfg: &CliConfig, args: &RecommendArgs) -> Result<Recommendation> {
    let tpath = args.checkpoint.map(Path::to_path_buf).or(cfg.titration_checkpoint.clone());
    let fpath = args.forecast_checkpoint.map(Path::to_path_buf).or(cfg.forecast_checkpoint.clone());
    let titration = load_model(require_path(tpath.as_ref(), "titration checkpoint")?)?;
    let forecaster = load_model(require_path(fpath.as_ref(), "forecast checkpoint")?)?;
    let data = dataset(cfg)?;
    let grid = data.grid(args.patient)?;
    let issued_at = args.at.unwrap_or_else(|| grid.slot_time(grid.len()));
    let mc = titration.config();
    let mut context = context_at(
        grid,
        issued_at,
        mc.history_len,
        mc.future_len,
        data.profiles.get(args.patient).cloned(),
    )?;
    let (backend, retries) = backend(cfg)?;
    let estimator = NutrientEstimator {
        retries,
        ..NutrientEstimator::default()
    };
    let nutrients = estimator
        .estimate(&MealDescription::new(args.meal), backend.as_ref())
        .map_err(user)?;
    context.horizon.add_meal(0, &nutrients);
    let request = TitrationRequest {
        context,
        target: TargetSpec::constant(args.target_mg_dl),
    };
    let plan = titrate(&request, &titration, cfg.service.max_bolus_iu).map_err(user)?;
    let intake = format!("{} ({:.0} g carbohydrate)", args.meal, nutrients.carbohydrate_g);
    let input = GuardInput {
        context: &request.context,
        recent_intake: &intake,
    };
    let guard_config = GuardConfig {
        max_iters: cfg.service.max_iters,
        max_bolus_iu: cfg.service.max_bolus_iu,
        ..GuardConfig::default()
    };
    let outcome = guard(
        plan,
        &input,
        &forecaster,
        &LlmRetitrator { backend: backend.as_ref() },
        &guard_config,
        &NullAudit,
    )
    .map_err(user)?;
    let rec = Recommendation {
        patient_id: args.patient.to_string(),
        issued_at,
        target_glucose_mg_dl: args.target_mg_dl,
        meal_text: args.meal.to_string(),
        nutrients,
        doses_iu: outcome.plan.display_doses(),
        risk_history: outcome.risk_history(),
        predicted_glucose_mg_dl: outcome.final_trace.glucose_mg_dl.clone(),
        plan: outcome.plan,
        diagnostics: outcome.diagnostics,
        disclaimer: DISCLAIMER.into(),
    };
    write_json(&cfg.out.join("recommendation.json"), &rec)?;
    Ok(rec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastOutput {
    pub patient_id: String,
    pub plan_iu: Vec<f64>,
    pub trace: GlucoseTrace,
    pub assessment: RiskAssessment,
    pub disclaimer: String,
}

pub fn forecast_cmd(cfg: &CliConfig, request: &Path, checkpoint: Option<&Path>) -> Result<ForecastOutput> {
    let text = std::fs::read_to_string(request).map_err(|e| CliError::User(format!("{}: {e}", request.display())))?;
    let req: ForecastRequest = serde_json::from_str(&text).map_err(|e| CliError::User(format!("{}: {e}", request.display())))?;
    let path = checkpoint.map(Path::to_path_buf).or(cfg.forecast_checkpoint.clone());
    let model = load_model(require_path(path.as_ref(), "forecast checkpoint")?)?;
    let trace = run_forecast(&req, &model).map_err(user)?;
    let out = ForecastOutput {
        patient_id: req.context.patient_id.clone(),
        plan_iu: req.plan_iu.clone(),
        assessment: diets_core::safety::detect_risk(&trace),
        trace,
        disclaimer: DISCLAIMER.into(),
    };
    write_json(&cfg.out.join("forecast.json"), &out)?;
    Ok(out)
}

pub fn serve(cfg: &CliConfig) -> Result<()> {
    let mut sc = cfg.service.clone();
    if sc.titration_checkpoint.is_none() {
        sc.titration_checkpoint = cfg.titration_checkpoint.clone();
    }
    if sc.forecast_checkpoint.is_none() {
        sc.forecast_checkpoint = cfg.forecast_checkpoint.clone();
    }
    if sc.backend_config.is_none() {
        sc.backend_config = cfg.backend_config.clone();
    }
    let sc = sc.with_env(std::env::vars()).map_err(user)?;
    for p in [&sc.titration_checkpoint, &sc.forecast_checkpoint, &sc.backend_config, &sc.nutrient_table]
        .into_iter()
        .flatten()
    {
        if !p.exists() {
            return Err(CliError::User(format!("{} does not exist", p.display())));
        }
    }
    // built before the runtime: the HTTP backend owns a blocking client
    let state = Arc::new(diets_service::AppState::from_config(sc).map_err(user)?);
    let rt = tokio::runtime::Runtime::new().map_err(internal)?;
    rt.block_on(diets_service::serve(state)).map_err(internal)
}
