//! MAE table and trace plots from an `evaluate` run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::commands::{task_name, EvalArtifact, EVAL_FILE};
use crate::error::{internal, CliError, Result};

pub struct ReportFiles {
    pub table: PathBuf,
    pub plots: Vec<PathBuf>,
}

pub fn report(eval_dir: &Path, out: &Path) -> Result<ReportFiles> {
    let path = eval_dir.join(EVAL_FILE);
    if !path.exists() {
        return Err(CliError::MissingArtifacts(format!(
            "{} not found; run `evaluate` first",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(&path).map_err(internal)?;
    let eval: EvalArtifact =
        serde_json::from_str(&text).map_err(|e| CliError::MissingArtifacts(format!("{}: {e}", path.display())))?;
    if eval.report.clips.is_empty() {
        return Err(CliError::MissingArtifacts(format!("{} holds no clips", path.display())));
    }
    std::fs::create_dir_all(out).map_err(internal)?;
    let name = task_name(eval.task);
    let table = out.join(format!("{name}_mae.md"));
    std::fs::write(&table, mae_table(&eval)).map_err(internal)?;
    let trace = out.join(format!("{name}_trace.svg"));
    trace_plot(&eval, &trace)?;
    let per_clip = out.join(format!("{name}_clip_mae.svg"));
    clip_plot(&eval, &per_clip)?;
    Ok(ReportFiles {
        table,
        plots: vec![trace, per_clip],
    })
}

fn mae_table(eval: &EvalArtifact) -> String {
    let mut by_patient: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for c in &eval.report.clips {
        let pid = c.clip_id.rsplit_once(':').map_or(c.clip_id.as_str(), |(p, _)| p);
        by_patient.entry(pid).or_default().push(c.mae);
    }
    let mut s = format!(
        "# {} MAE ({:?} clips)\n\n| patient | clips | MAE ({}) |\n|---|---:|---:|\n",
        task_name(eval.task),
        eval.part,
        eval.unit
    );
    // every clip has the same number of slots, so the mean of clip MAEs is the pooled MAE
    for (pid, maes) in &by_patient {
        s.push_str(&format!("| {pid} | {} | {:.4} |\n", maes.len(), maes.iter().sum::<f64>() / maes.len() as f64));
    }
    s.push_str(&format!("| all | {} | {:.4} |\n", eval.report.clips.len(), eval.report.mae));
    s
}

fn draw_err<E: std::fmt::Debug>(e: E) -> CliError {
    CliError::Internal(format!("plot: {e:?}"))
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if hi - lo < 1e-9 {
        (lo - 1.0, hi + 1.0)
    } else {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    }
}

/// Predicted against recorded series for the median-error clip.
fn trace_plot(eval: &EvalArtifact, path: &Path) -> Result<()> {
    let mut order: Vec<usize> = (0..eval.report.clips.len()).collect();
    order.sort_by(|a, b| eval.report.clips[*a].mae.total_cmp(&eval.report.clips[*b].mae).then(a.cmp(b)));
    let clip = &eval.report.clips[order[order.len() / 2]];
    let n = clip.predicted.len();
    let (lo, hi) = range(clip.predicted.iter().chain(&clip.reference).copied());
    let root = SVGBackend::new(path, (640, 360)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let what = if eval.unit == "IU" { "bolus" } else { "glucose" };
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{what} trace, clip {}", clip.clip_id), ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..(n.max(2) - 1) as f64, lo..hi)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc("future slot (15 min)")
        .y_desc(eval.unit.as_str())
        .draw()
        .map_err(draw_err)?;
    for (series, color, label) in [(&clip.reference, BLACK, "recorded"), (&clip.predicted, RED, "predicted")] {
        chart
            .draw_series(LineSeries::new(series.iter().enumerate().map(|(i, v)| (i as f64, *v)), color))
            .map_err(draw_err)?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)
}

/// MAE of every clip in evaluation order.
fn clip_plot(eval: &EvalArtifact, path: &Path) -> Result<()> {
    let maes: Vec<f64> = eval.report.clips.iter().map(|c| c.mae).collect();
    let (_, hi) = range(maes.iter().copied());
    let root = SVGBackend::new(path, (640, 360)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("per-clip MAE ({})", eval.unit), ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..(maes.len().max(2) - 1) as f64, 0f64..hi.max(1e-6))
        .map_err(draw_err)?;
    chart.configure_mesh().x_desc("clip").y_desc(eval.unit.as_str()).draw().map_err(draw_err)?;
    chart
        .draw_series(LineSeries::new(maes.iter().enumerate().map(|(i, v)| (i as f64, *v)), BLUE))
        .map_err(draw_err)?;
    root.present().map_err(draw_err)
}
