//! The five pipeline commands. Each returns the text it prints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use knav_core::dataset::{collect as collect_trajectories, read_dataset, sample_windows, write_dataset};
use knav_core::mpc::{write_solve_trace, MpcController, SOLVE_TRACE_HEADER};
use knav_core::nav::{builtin_map, episodes_csv, run_suite, ObstacleMap, SuiteSummary};
use knav_core::sysid::{fit_model, prediction_error, DynamicsModel, FitOptions, IntegratorModel, LiftSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{io_error, slug, Baseline, CliError, Context, EvalArgs, FitArgs, NavigateArgs};

pub const TRAIN: &str = "train";
pub const VALIDATION: &str = "validation";

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

fn dir_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

pub fn collect(ctx: &Context) -> Result<String, CliError> {
    let cfg = &ctx.config;
    let mut text = String::new();
    for (name, collection) in [(TRAIN, cfg.training_collection()), (VALIDATION, cfg.validation_collection())] {
        let trajectories = collect_trajectories(&cfg.plant, &collection)?;
        let dir = ctx.dataset_dir(name);
        let manifest = write_dataset(&dir, &trajectories, &cfg.plant, &collection)?;
        writeln!(
            text,
            "{name}: {} trajectories (seed {}) -> {} [manifest {}]",
            trajectories.len(),
            collection.seed,
            dir.display(),
            manifest.hash
        )
        .unwrap();
    }
    Ok(text)
}

pub fn fit(ctx: &Context, args: &FitArgs) -> Result<String, CliError> {
    let cfg = &ctx.config;
    let lifts = if args.lifts.is_empty() { cfg.fit.lifts.clone() } else { args.lifts.clone() };
    if lifts.is_empty() {
        return Err(CliError::config("no lifts to fit"));
    }
    let dataset = args.dataset.clone().unwrap_or_else(|| ctx.dataset_dir(TRAIN));
    let (manifest, trajectories) = read_dataset(&dataset)?;
    let opts = FitOptions {
        rcond: cfg.fit.rcond,
        mode: cfg.fit.mode,
    };
    let mut text = String::new();
    for lift in &lifts {
        let mut model = fit_model(&trajectories, cfg.fit.window, lift, &opts)?;
        model.set_dataset_hash(Some(manifest.hash.clone()));
        let path = ctx.model_path(lift);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
        }
        model.save(&path)?;
        let residual = match &model {
            DynamicsModel::Koopman(k) => format!("residual {:.6e} over {} pairs", k.fit_residual, k.pairs),
            DynamicsModel::Componentwise(c) => format!(
                "axis residuals {:.6e} {:.6e} {:.6e}",
                c.residuals[0], c.residuals[1], c.residuals[2]
            ),
            DynamicsModel::Integrator(_) => "closed form, nothing fitted".to_string(),
        };
        writeln!(
            text,
            "{}: p={} m={} {residual} -> {}",
            model.name(),
            lift.lifted_dim(),
            lift.command_dim(),
            path.display()
        )
        .unwrap();
    }
    Ok(text)
}

/// Provenance of a model used in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub name: String,
    pub lift: String,
    /// `None` for baselines that have no file.
    pub file: Option<String>,
    pub hash: String,
    pub dataset_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub name: String,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub dataset: String,
    pub mean: f64,
    pub std: f64,
    pub cell: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub seed: u64,
    pub sequences: usize,
    pub horizon: usize,
    pub models: Vec<ModelRecord>,
    pub datasets: Vec<DatasetRecord>,
    pub rows: Vec<EvalRow>,
}

struct LoadedModel {
    model: DynamicsModel,
    record: ModelRecord,
}

/// Loads a model; its recorded file name is relative to `out` when it lives
/// there, so reports do not depend on where the run directory sits.
fn load_model(path: &Path, out: &Path) -> Result<LoadedModel, CliError> {
    let model = DynamicsModel::load(path)?;
    let file = path.strip_prefix(out).unwrap_or(path);
    let record = ModelRecord {
        name: model.name(),
        lift: model.lift_spec().to_string(),
        file: Some(file.display().to_string()),
        hash: model.content_hash(),
        dataset_hash: model.dataset_hash().map(str::to_string),
    };
    Ok(LoadedModel { model, record })
}

fn baseline_model(baseline: Baseline, dt: f64) -> LoadedModel {
    let model = match baseline {
        Baseline::Integrator => DynamicsModel::Integrator(IntegratorModel { dt }),
    };
    let record = ModelRecord {
        name: model.name(),
        lift: model.lift_spec().to_string(),
        file: None,
        hash: model.content_hash(),
        dataset_hash: None,
    };
    LoadedModel { model, record }
}

pub fn eval_predict(ctx: &Context, args: &EvalArgs) -> Result<String, CliError> {
    let cfg = &ctx.config;
    let sequences = args.sequences.unwrap_or(cfg.eval.sequences);
    let horizon = args.horizon.unwrap_or(cfg.eval.horizon);
    if sequences == 0 || horizon == 0 {
        return Err(CliError::config("sequences and horizon must be positive"));
    }

    let mut models = Vec::new();
    if args.models.is_empty() && args.baseline.is_none() {
        models.push(baseline_model(Baseline::Integrator, cfg.plant.dt));
        for lift in cfg.fit.lifts.iter().filter(|l| **l != LiftSpec::Integrator) {
            models.push(load_model(&ctx.model_path(lift), &ctx.out)?);
        }
    } else {
        if let Some(b) = args.baseline {
            models.push(baseline_model(b, cfg.plant.dt));
        }
        for path in &args.models {
            models.push(load_model(path, &ctx.out)?);
        }
    }

    let dataset_dirs: Vec<PathBuf> = if args.datasets.is_empty() {
        vec![ctx.dataset_dir(TRAIN), ctx.dataset_dir(VALIDATION)]
    } else {
        args.datasets.clone()
    };

    let mut summary = EvalSummary {
        seed: cfg.seed,
        sequences,
        horizon,
        models: models.iter().map(|m| m.record.clone()).collect(),
        datasets: Vec::new(),
        rows: Vec::new(),
    };
    let eval_dir = ctx.out.join("eval");
    for dir in &dataset_dirs {
        let (manifest, trajectories) = read_dataset(dir)?;
        if horizon > manifest.collection.window_h {
            return Err(CliError::config(format!(
                "horizon {horizon} exceeds the dataset window length {}",
                manifest.collection.window_h
            )));
        }
        let name = dir_name(dir);
        let windows = sample_windows(&trajectories, horizon, sequences, cfg.seed)?;
        for m in &models {
            let report = prediction_error(&m.model, &trajectories, &windows, horizon)?;
            write_file(
                &eval_dir.join(&name).join(format!("{}.csv", slug(&m.model.lift_spec()))),
                &report.to_csv(),
            )?;
            summary.rows.push(EvalRow {
                model: m.record.name.clone(),
                dataset: name.clone(),
                mean: report.aggregate_mean,
                std: report.aggregate_std,
                cell: report.summary_cell(),
            });
        }
        summary.datasets.push(DatasetRecord {
            name,
            hash: manifest.hash,
        });
    }

    write_file(&eval_dir.join("summary.json"), &to_json(&summary))?;
    write_file(&eval_dir.join("summary.csv"), &prediction_csv(&summary))?;
    let table = prediction_table(&summary);
    write_file(&eval_dir.join("table.txt"), &table)?;
    Ok(table)
}

fn prediction_csv(summary: &EvalSummary) -> String {
    let mut out = String::from("model,dataset,mean_abs_err,std_abs_err,cell,model_hash,dataset_hash\n");
    for row in &summary.rows {
        let model_hash = summary
            .models
            .iter()
            .find(|m| m.name == row.model)
            .map(|m| m.hash.as_str())
            .unwrap_or("");
        let dataset_hash = summary
            .datasets
            .iter()
            .find(|d| d.name == row.dataset)
            .map(|d| d.hash.as_str())
            .unwrap_or("");
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.model, row.dataset, row.mean, row.std, row.cell, model_hash, dataset_hash
        )
        .unwrap();
    }
    out
}

/// Models as rows, datasets as columns, `mean(±std)` cells.
fn prediction_table(summary: &EvalSummary) -> String {
    let datasets: Vec<&str> = summary.datasets.iter().map(|d| d.name.as_str()).collect();
    let width = summary.models.iter().map(|m| m.name.len()).max().unwrap_or(5).max(5);
    let mut out = format!(
        "Prediction error: mean(±std) absolute error over {} windows of {} steps\n",
        summary.sequences, summary.horizon
    );
    write!(out, "{:<width$}", "model").unwrap();
    for d in &datasets {
        write!(out, "  {d:>14}").unwrap();
    }
    out.push('\n');
    for m in &summary.models {
        write!(out, "{:<width$}", m.name).unwrap();
        for d in &datasets {
            let cell = summary
                .rows
                .iter()
                .find(|r| r.model == m.name && r.dataset == *d)
                .map(|r| r.cell.as_str())
                .unwrap_or("-");
            write!(out, "  {cell:>14}").unwrap();
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavRecord {
    pub seed: u64,
    pub map_source: String,
    pub model: ModelRecord,
    pub summary: SuiteSummary,
}

fn resolve_map(spec: &str) -> Result<ObstacleMap, CliError> {
    let looks_like_path = spec.ends_with(".json") || spec.contains('/') || spec.contains('\\');
    let map = if looks_like_path {
        ObstacleMap::load(Path::new(spec))?
    } else {
        builtin_map(spec)?
    };
    Ok(map)
}

pub fn navigate(ctx: &Context, args: &NavigateArgs) -> Result<String, CliError> {
    let cfg = &ctx.config;
    let loaded = match (&args.model, args.baseline) {
        (Some(path), _) => load_model(path, &ctx.out)?,
        (None, Some(b)) => baseline_model(b, cfg.plant.dt),
        (None, None) if cfg.nav.model == LiftSpec::Integrator => baseline_model(Baseline::Integrator, cfg.plant.dt),
        (None, None) => load_model(&ctx.model_path(&cfg.nav.model), &ctx.out)?,
    };
    let map_specs = if args.maps.is_empty() { cfg.nav.maps.clone() } else { args.maps.clone() };
    if map_specs.is_empty() {
        return Err(CliError::config("no maps to navigate"));
    }
    let maps = map_specs
        .iter()
        .map(|s| resolve_map(s).map(|m| (s.clone(), m)))
        .collect::<Result<Vec<_>, _>>()?;
    let runs_override = args.runs.or(cfg.nav.runs);
    if runs_override == Some(0) {
        return Err(CliError::config("runs must be at least 1"));
    }

    let controller = MpcController::new(loaded.model.to_linear(), cfg.mpc.clone())?;
    let model_slug = slug(&loaded.model.lift_spec());
    let mut text = format!(
        "{:<12} {:<18} {:>5} {:>9} {:>10} {:>10} {:>9}\n",
        "map", "model", "runs", "success%", "time(s)", "collisions", "min_clr"
    );
    for (source, map) in &maps {
        let runs = runs_override.unwrap_or(map.default_runs);
        let suite = run_suite(map, &controller, &loaded.record.name, &cfg.plant, &cfg.nav.robot, runs, cfg.seed)?;
        let dir = ctx.out.join("nav").join(&map.name).join(&model_slug);
        for e in &suite.episodes {
            write_file(&dir.join(format!("episode_{:03}.csv", e.index)), &e.trace_csv())?;
            if args.solver_trace {
                let mut trace = String::from(SOLVE_TRACE_HEADER);
                trace.push('\n');
                write_solve_trace(&mut trace, &e.solves);
                write_file(&dir.join(format!("solver_{:03}.csv", e.index)), &trace)?;
            }
        }
        write_file(&dir.join("episodes.csv"), &episodes_csv(&suite.episodes))?;
        let record = NavRecord {
            seed: cfg.seed,
            map_source: source.clone(),
            model: loaded.record.clone(),
            summary: suite.summary.clone(),
        };
        write_file(&dir.join("summary.json"), &to_json(&record))?;
        let s = &suite.summary;
        writeln!(
            text,
            "{:<12} {:<18} {:>5} {:>9.1} {:>10} {:>10.2} {:>9.4}",
            s.map,
            s.model,
            s.runs,
            s.success_percent,
            s.mean_time.map(|t| format!("{t:.2}")).unwrap_or_else(|| "-".into()),
            s.mean_collision_events,
            s.min_clearance
        )
        .unwrap();
    }
    Ok(text)
}

fn read_json(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(format!("malformed {}: {e}", path.display())))
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_error(dir, e))? {
        let entry = entry.map_err(|e| io_error(dir, e))?;
        if entry.path().is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn field(value: &Value, path: &[&str]) -> Value {
    path.iter().fold(value.clone(), |v, key| v.get(key).cloned().unwrap_or(Value::Null))
}

/// Numbers as written; missing or non-finite values as empty cells.
fn cell(value: &Value) -> String {
    match value {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn report(dir: &Path) -> Result<String, CliError> {
    let eval_summary = dir.join("eval").join("summary.json");
    let prediction = if eval_summary.is_file() {
        let text = fs::read_to_string(&eval_summary).map_err(|e| io_error(&eval_summary, e))?;
        Some(
            serde_json::from_str::<EvalSummary>(&text)
                .map_err(|e| CliError::io(format!("malformed {}: {e}", eval_summary.display())))?,
        )
    } else {
        None
    };

    let mut nav_records = Vec::new();
    let nav_dir = dir.join("nav");
    if nav_dir.is_dir() {
        for map_dir in sorted_subdirs(&nav_dir)? {
            for model_dir in sorted_subdirs(&map_dir)? {
                let path = model_dir.join("summary.json");
                if path.is_file() {
                    nav_records.push(read_json(&path)?);
                }
            }
        }
    }
    if prediction.is_none() && nav_records.is_empty() {
        return Err(CliError::io(format!(
            "no evaluation or navigation results under {}",
            dir.display()
        )));
    }

    let report_dir = dir.join("report");
    let mut text = String::new();
    if let Some(summary) = &prediction {
        write_file(&report_dir.join("prediction.csv"), &prediction_csv(summary))?;
        text.push_str(&prediction_table(summary));
    }
    if !nav_records.is_empty() {
        let columns: [(&str, &[&str]); 10] = [
            ("map", &["summary", "map"]),
            ("model", &["summary", "model"]),
            ("runs", &["summary", "runs"]),
            ("success_percent", &["summary", "success_percent"]),
            ("mean_time", &["summary", "mean_time"]),
            ("mean_collision_events", &["summary", "mean_collision_events"]),
            ("mean_penetration_steps", &["summary", "mean_penetration_steps"]),
            ("min_clearance", &["summary", "min_clearance"]),
            ("failed_solves", &["summary", "failed_solves"]),
            ("model_hash", &["model", "hash"]),
        ];
        let mut csv = columns.iter().map(|c| c.0).collect::<Vec<_>>().join(",");
        csv.push('\n');
        if !text.is_empty() {
            text.push('\n');
        }
        text.push_str("Navigation\n");
        writeln!(
            text,
            "{:<12} {:<18} {:>5} {:>9} {:>10} {:>10} {:>10}",
            "map", "model", "runs", "success%", "time(s)", "collisions", "penetrate"
        )
        .unwrap();
        for record in &nav_records {
            let cells: Vec<String> = columns.iter().map(|(_, path)| cell(&field(record, path))).collect();
            csv.push_str(&cells.join(","));
            csv.push('\n');
            let num = |i: usize| cells[i].parse::<f64>().ok();
            writeln!(
                text,
                "{:<12} {:<18} {:>5} {:>9} {:>10} {:>10} {:>10}",
                cells[0],
                cells[1],
                cells[2],
                num(3).map(|v| format!("{v:.1}")).unwrap_or_default(),
                num(4).map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into()),
                num(5).map(|v| format!("{v:.2}")).unwrap_or_default(),
                num(6).map(|v| format!("{v:.1}")).unwrap_or_default(),
            )
            .unwrap();
        }
        write_file(&report_dir.join("navigation.csv"), &csv)?;
    }
    write_file(&report_dir.join("report.txt"), &text)?;
    Ok(text)
}
