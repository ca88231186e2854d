use std::fs;
use std::path::Path;

use confit::continual::{
    continual_run, evaluate, load_checkpoint, save_checkpoint, MomentMode, NormMode, RunState, ScheduleMode,
    TrainConfig,
};
use confit::datagen::{generate, load_dataset, save_dataset, TaskSequence, TaskSequenceSpec};
use confit::metrics::{delta_diagnostics, deltas_csv, median, probe_layer_means, AccuracyMatrix};
use confit::theory::{theory_report, Dims, TheoryConfig};
use confit::verify::{run_suite, VerifyConfig};
use confit::{Error, Precision};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::{DiagArgs, EvalArgs, GenDataArgs, TheoryArgs, TrainArgs, VerifyArgs};

pub const PRECISION_ENV: &str = "CONFIT_PRECISION";

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(message: &str) -> Self {
        CliError { code: 64, kind: "usage", message: message.into() }
    }

    fn schema(message: String) -> Self {
        CliError { code: 2, kind: "schema", message }
    }

    fn missing(path: &Path) -> Self {
        CliError { code: 3, kind: "missing_path", message: format!("{} does not exist", path.display()) }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Config(_) | Error::Spec(_) | Error::Usage(_) | Error::Setup(_) => (2, "config"),
            Error::Data(_)
            | Error::Format(_)
            | Error::Json(_)
            | Error::Io(_)
            | Error::Metric(_)
            | Error::Diagnostic(_)
            | Error::DegenerateBatch(_) => (3, "data"),
            _ => (1, "internal"),
        };
        CliError { code, kind, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CliResult = Result<(), CliError>;

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing(path))
    }
}

fn read_json(path: &Path) -> Result<Value, CliError> {
    require(path)?;
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::schema(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    fs::write(path, serde_json::to_string_pretty(value).map_err(Error::from)? + "\n")?;
    Ok(())
}

/// On-disk run configuration. Unknown keys anywhere are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfigFile {
    train: TrainConfig,
    /// When present, must equal the spec recorded in the dataset manifest.
    data: Option<TaskSequenceSpec>,
}

fn env_precision() -> Result<Option<Precision>, CliError> {
    match std::env::var(PRECISION_ENV) {
        Ok(v) => Ok(Some(v.parse::<Precision>()?)),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("{PRECISION_ENV}: {e}")).into()),
    }
}

/// Defaults, then the environment precision, then the file; an explicit
/// precision in the file wins over the environment.
fn load_run_config(path: Option<&Path>) -> Result<(TrainConfig, Option<TaskSequenceSpec>), CliError> {
    let value = match path {
        Some(p) => read_json(p)?,
        None => json!({}),
    };
    let explicit = value.get("train").and_then(|t| t.get("precision")).is_some();
    let file: RunConfigFile = serde_json::from_value(value).map_err(|e| CliError::schema(e.to_string()))?;
    let mut train = file.train;
    if !explicit {
        if let Some(p) = env_precision()? {
            train.precision = p;
        }
    }
    Ok((train, file.data))
}

pub fn gen_data(a: &GenDataArgs) -> CliResult {
    let mut spec = match &a.spec {
        Some(p) => serde_json::from_value::<TaskSequenceSpec>(read_json(p)?)
            .map_err(|e| CliError::schema(format!("{}: {e}", p.display())))?,
        None => TaskSequenceSpec::default(),
    };
    let set = |field: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *field = v;
        }
    };
    set(&mut spec.num_tasks, a.num_tasks);
    set(&mut spec.classes_per_task, a.classes_per_task);
    set(&mut spec.train_per_class, a.train_per_class);
    set(&mut spec.test_per_class, a.test_per_class);
    set(&mut spec.pretext_classes, a.pretext_classes);
    if let Some(v) = a.noise_scale {
        spec.noise_scale = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    let seq = generate(&spec)?;
    save_dataset(&seq, &a.out)?;
    println!(
        "{}",
        json!({
            "out": a.out.display().to_string(),
            "tasks": seq.tasks.len(),
            "train_samples": seq.tasks.iter().map(|t| t.train.len()).sum::<usize>(),
            "test_samples": seq.tasks.iter().map(|t| t.test.len()).sum::<usize>(),
            "pretext": seq.pretext.is_some(),
        })
    );
    Ok(())
}

fn load_data(dir: &Path) -> Result<TaskSequence, CliError> {
    require(dir)?;
    Ok(load_dataset(dir)?)
}

fn load_ckpt(dir: &Path) -> Result<RunState, CliError> {
    require(dir)?;
    Ok(load_checkpoint(dir)?)
}

fn matrix_rows(m: &AccuracyMatrix) -> Vec<Vec<Option<f64>>> {
    (0..m.tasks()).map(|i| (0..m.tasks()).map(|j| m.get(i, j)).collect()).collect()
}

fn write_run_outputs(state: &RunState, out: &Path) -> CliResult {
    fs::write(out.join("acc_matrix.csv"), state.matrix.to_csv())?;
    let mut metrics = json!({
        "norm_mode": state.config.norm_mode.name(),
        "schedule": state.config.schedule.mode.name(),
        "seed": state.config.seed,
        "completed_tasks": state.completed(),
        "num_tasks": state.num_tasks,
        "accuracy_matrix": matrix_rows(&state.matrix),
        "stage_epochs": state.logs.iter().map(|l| l.stage_epochs).collect::<Vec<_>>(),
    });
    if state.is_finished() {
        let summary = state.summary()?;
        fs::write(out.join("deltas.csv"), deltas_csv(&summary.deltas))?;
        metrics["acc"] = json!(summary.acc);
        metrics["fgt"] = json!(summary.fgt);
        metrics["fgt_defined"] = json!(summary.fgt_defined);
        metrics["deltas"] = serde_json::to_value(&summary.deltas).map_err(Error::from)?;
    }
    write_json(&out.join("metrics.json"), &metrics)
}

pub fn train(a: &TrainArgs) -> CliResult {
    if let Some(dir) = &a.resume {
        let seq = load_data(&a.data)?;
        let mut state = load_ckpt(dir)?;
        if state.num_tasks != seq.tasks.len() {
            return Err(Error::Data(format!(
                "checkpoint expects {} tasks, dataset has {}",
                state.num_tasks,
                seq.tasks.len()
            ))
            .into());
        }
        return run_tasks(&mut state, &seq, a);
    }
    let (mut cfg, data_spec) = load_run_config(a.config.as_deref())?;
    if let Some(m) = &a.bn_mode {
        cfg.norm_mode = m.parse::<NormMode>()?;
    }
    if let Some(s) = &a.schedule {
        cfg.schedule.mode = s.parse::<ScheduleMode>()?;
    }
    cfg.validate()?;
    let seq = load_data(&a.data)?;
    if let Some(spec) = data_spec {
        if spec != seq.spec {
            return Err(Error::Config("the configuration's data spec differs from the dataset manifest".into()).into());
        }
    }
    if a.grid {
        return run_grid(&seq, &cfg, a.seeds, &a.out);
    }
    let mut state = RunState::start(&seq, cfg)?;
    run_tasks(&mut state, &seq, a)
}

fn run_tasks(state: &mut RunState, seq: &TaskSequence, a: &TrainArgs) -> CliResult {
    fs::create_dir_all(&a.out)?;
    let target = a.tasks.unwrap_or(seq.tasks.len()).min(seq.tasks.len());
    while state.completed() < target {
        state.step(seq)?;
        let done = state.completed();
        save_checkpoint(state, &a.out.join(format!("ckpt_after_{done}")))?;
        eprintln!("trained task {} of {}", done, state.num_tasks);
    }
    if state.is_finished() {
        save_checkpoint(state, &a.out.join("final"))?;
    }
    write_run_outputs(state, &a.out)?;
    let mut line = json!({ "out": a.out.display().to_string(), "completed_tasks": state.completed() });
    if state.is_finished() {
        let s = state.summary()?;
        line["acc"] = json!(s.acc);
        line["fgt"] = json!(s.fgt);
    }
    println!("{line}");
    Ok(())
}

#[derive(Debug, Serialize)]
struct GridCell {
    schedule: &'static str,
    bn_mode: &'static str,
    seeds: u64,
    acc_mean: f64,
    acc_std: f64,
    fgt_mean: f64,
    fgt_std: f64,
    delta1_median: f64,
    delta2_minus_delta0_median: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn run_grid(seq: &TaskSequence, base: &TrainConfig, seeds: u64, out: &Path) -> CliResult {
    if seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()).into());
    }
    fs::create_dir_all(out)?;
    let mut cells = Vec::new();
    for schedule in [ScheduleMode::PlainFt, ScheduleMode::Hierarchical] {
        for mode in [NormMode::SharedBn, NormMode::TaskBn, NormMode::XconvBn] {
            let (mut accs, mut fgts, mut d1, mut d20) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for s in 0..seeds {
                let mut cfg = base.clone();
                cfg.norm_mode = mode;
                cfg.schedule.mode = schedule;
                cfg.seed = base.seed.wrapping_add(s);
                let seed = cfg.seed;
                let summary = continual_run(seq, cfg)?.summary()?;
                accs.push(summary.acc);
                fgts.push(summary.fgt);
                for d in &summary.deltas {
                    d1.push(d.delta1);
                    d20.push(d.delta2 - d.delta0);
                }
                eprintln!(
                    "{} + {} seed {}: acc {:.4} fgt {:.4}",
                    schedule.name(),
                    mode.name(),
                    seed,
                    summary.acc,
                    summary.fgt
                );
            }
            let (acc_mean, acc_std) = mean_std(&accs);
            let (fgt_mean, fgt_std) = mean_std(&fgts);
            cells.push(GridCell {
                schedule: schedule.name(),
                bn_mode: mode.name(),
                seeds,
                acc_mean,
                acc_std,
                fgt_mean,
                fgt_std,
                delta1_median: median(&d1).unwrap_or(f64::NAN),
                delta2_minus_delta0_median: median(&d20).unwrap_or(f64::NAN),
            });
        }
    }
    let mut csv = String::from(
        "schedule,bn_mode,seeds,acc_mean,acc_std,fgt_mean,fgt_std,delta1_median,delta2_minus_delta0_median\n",
    );
    for c in &cells {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            c.schedule,
            c.bn_mode,
            c.seeds,
            c.acc_mean,
            c.acc_std,
            c.fgt_mean,
            c.fgt_std,
            c.delta1_median,
            c.delta2_minus_delta0_median
        ));
    }
    fs::write(out.join("grid.csv"), &csv)?;
    write_json(&out.join("grid.json"), &cells)?;
    print!("{csv}");
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CliResult {
    let state = load_ckpt(&a.ckpt)?;
    let seq = load_data(&a.data)?;
    if state.num_tasks != seq.tasks.len() {
        return Err(
            Error::Data(format!("checkpoint has {} tasks, dataset has {}", state.num_tasks, seq.tasks.len())).into()
        );
    }
    if a.task >= state.completed() {
        return Err(Error::Usage(format!(
            "task {} has not been trained; the checkpoint covers tasks 0..{}",
            a.task,
            state.completed()
        ))
        .into());
    }
    let moments = a.moments.parse::<MomentMode>()?;
    let test = &seq.tasks[a.task].test;
    let mut x = test.x.clone();
    x.round_to(state.config.precision);
    let accuracy = evaluate(state.model_for(a.task)?, a.task, &x, &test.y, moments)?;
    let result = json!({ "task": a.task, "moments": a.moments, "accuracy": accuracy, "test_samples": test.len() });
    if let Some(p) = &a.out {
        write_json(p, &result)?;
    }
    println!("{result}");
    Ok(())
}

pub fn diag(a: &DiagArgs) -> CliResult {
    let first = load_ckpt(&a.ckpt_after_1)?;
    let last = load_ckpt(&a.ckpt_final)?;
    let seq = load_data(&a.data)?;
    if first.completed() != 1 {
        return Err(Error::Usage(format!(
            "--ckpt-after-1 must hold a run after exactly one task, it has {}",
            first.completed()
        ))
        .into());
    }
    if last.completed() < 1 || seq.tasks.is_empty() {
        return Err(Error::Usage("--ckpt-final holds no trained task".into()).into());
    }
    let x = &seq.tasks[0].test.x;
    let probes_first = probe_layer_means(first.model_for(0)?, 0, x)?;
    let probes_last = probe_layer_means(last.model_for(0)?, 0, x)?;
    let csv = deltas_csv(&delta_diagnostics(&probes_first, &probes_last)?);
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("deltas.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn verify(a: &VerifyArgs) -> CliResult {
    let report = run_suite(VerifyConfig { cases: a.cases, seed: a.seed })?;
    for p in &report.properties {
        println!(
            "{} {:<22} cases {:>4}  failures {:>3}  max error {:.3e}  tolerance {:.0e}",
            if p.passed() { "PASS" } else { "FAIL" },
            p.name,
            p.cases,
            p.failures,
            p.max_error,
            p.tolerance
        );
    }
    println!("{} failures", report.failures());
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError {
            code: 4,
            kind: "verification_failure",
            message: format!("{} property failures", report.failures()),
        })
    }
}

pub fn theory(a: &TheoryArgs) -> CliResult {
    let cfg = TheoryConfig {
        dims: Dims { k: a.k, n: a.n, d: a.d },
        instances: a.instances,
        seed: a.seed,
        ..TheoryConfig::default()
    };
    let report = theory_report(&cfg)?;
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("theory_report.json"), &report)?;
    fs::write(a.out.join("theory_bounds.csv"), report.to_csv())?;
    println!(
        "{}",
        json!({
            "instances": report.instances.len(),
            "counted": report.counted,
            "violations": report.violations,
            "precondition_failed": report.precondition_failed,
            "not_converged": report.not_converged,
            "lp_max_drift": report.probe_linear.max_drift(),
            "lp_max_previous_loss": report.probe_linear.max_previous_loss(),
            "random_head_max_drift": report.probe_random_head.max_drift(),
            "multi_head_holds": report.multi_head.iter().all(|m| m.holds),
        })
    );
    if report.all_hold() {
        Ok(())
    } else {
        Err(CliError { code: 5, kind: "theory_violation", message: "a linear-model bound was violated".into() })
    }
}
