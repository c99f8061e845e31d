//! Sweep orchestration: expand a config into independent runs, execute them
//! on a worker pool, and assemble deterministic result tables.

use std::path::Path;
use std::time::Instant;

use extrapolab_core::gru::{gru_extrapolation_error, gru_train, GruParams, GruTrainConfig};
use extrapolab_core::lds::{default_tail_window, extrapolation_error};
use extrapolab_core::losses::make_dataset;
use extrapolab_core::optim::{init_student, train, InitKind, LossKind, StopReason, Target, TrainingConfig, TrainingTrajectory};
use extrapolab_core::seeds::{derive_seed, stream};
use extrapolab_core::teachers::{
    default_gru_target, gen_balanced_teacher, gen_delay_teacher, gen_gru_teacher, gen_random_unbalanced_teacher,
    GruTeacher, GRU_TEACHER_HORIZON,
};
use extrapolab_core::{LabError, LinearRnnParams};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, InitName, TeacherConfig, TeacherKind};
use crate::output::{csv_bytes, fmt_f64, fmt_opt, json_bytes, write_atomic};
use crate::{CliError, Format};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    SweepK,
    SweepInitScale,
    GruSweep,
}

/// One (sweep point, seed) outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    pub k: usize,
    pub seed: usize,
    pub final_loss: f64,
    pub extrap_error: f64,
    pub non_extrapolating: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_balancedness_ratio: Option<f64>,
    /// `converged`, `max_steps`, `diverged`, or the name of the error that
    /// stopped the run.
    pub status: String,
    pub steps: usize,
    pub wall_time_s: f64,
}

impl RunRow {
    fn failed(eps: Option<f64>, k: usize, seed: usize, err: &CliError) -> Self {
        Self {
            eps,
            k,
            seed,
            final_loss: f64::NAN,
            extrap_error: f64::NAN,
            non_extrapolating: true,
            min_balancedness_ratio: None,
            status: err.short_name().to_string(),
            steps: 0,
            wall_time_s: 0.0,
        }
    }
}

/// Mean and spread of one sweep point across seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointStats {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    pub k: usize,
    pub runs: usize,
    /// Runs that ended in an error (no numeric result).
    pub failed: usize,
    pub mean_extrap_error: f64,
    pub std_extrap_error: f64,
    pub mean_final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metadata {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: SweepKind,
    pub config_hash: String,
    pub teacher: String,
    pub student_d: usize,
    pub seed_scheme: &'static str,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub kind: SweepKind,
    pub rows: Vec<RunRow>,
    pub stats: Vec<PointStats>,
    pub metadata: Metadata,
    /// One JSON document per run, in row order.
    pub trajectories: Vec<String>,
    /// Final linear students in row order; `None` for GRU runs and failures.
    pub students: Vec<Option<LinearRnnParams>>,
}

pub const SEED_SCHEME: &str = "run seed = splitmix64(master_seed, seed_index); init, data, batch, teacher and \
                               evaluation streams = splitmix64(run seed, 1..5)";

pub fn run_seed(master: u64, seed_index: usize) -> u64 {
    derive_seed(master, seed_index as u64)
}

pub fn teacher_seed(cfg: &TeacherConfig, run_seed: u64) -> u64 {
    cfg.seed.unwrap_or_else(|| derive_seed(run_seed, stream::TEACHER))
}

pub fn build_linear_teacher(cfg: &TeacherConfig, run_seed: u64) -> Result<LinearRnnParams, CliError> {
    let seed = teacher_seed(cfg, run_seed);
    Ok(match cfg.kind {
        TeacherKind::Balanced => gen_balanced_teacher(cfg.dh, seed)?,
        TeacherKind::Delay => gen_delay_teacher(cfg.dh)?,
        TeacherKind::RandomUnbalanced => gen_random_unbalanced_teacher(cfg.dh, seed)?,
        TeacherKind::File => {
            let path = cfg.path.as_deref().ok_or_else(|| CliError::Usage("teacher.path is required".into()))?;
            crate::read_json(path)?
        }
        TeacherKind::Gru => return Err(CliError::Usage("a GRU teacher needs the gru-sweep command".into())),
    })
}

pub fn build_gru_teacher(cfg: &TeacherConfig, run_seed: u64) -> Result<GruTeacher, CliError> {
    if cfg.kind != TeacherKind::Gru {
        return Err(CliError::Usage("gru-sweep needs teacher.kind = gru".into()));
    }
    let target = default_gru_target(GRU_TEACHER_HORIZON);
    Ok(gen_gru_teacher(cfg.dh, &target, teacher_seed(cfg, run_seed))?)
}

fn teacher_descriptor(cfg: &TeacherConfig) -> String {
    let seed = cfg.seed.map_or("per-run".to_string(), |s| s.to_string());
    match cfg.kind {
        TeacherKind::Delay => format!("delay(dh={})", cfg.dh),
        TeacherKind::File => format!("file({})", cfg.path.as_deref().map(Path::display).map(|d| d.to_string()).unwrap_or_default()),
        kind => {
            let name = serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
            format!("{name}(dh={}, seed={seed})", cfg.dh)
        }
    }
}

/// A single trained linear student together with its evaluation.
#[derive(Debug, Clone)]
pub struct LinearRun {
    pub row: RunRow,
    pub teacher: LinearRnnParams,
    pub trajectory: TrainingTrajectory,
}

fn status_of(reason: StopReason) -> &'static str {
    match reason {
        StopReason::Converged => "converged",
        StopReason::MaxSteps => "max_steps",
        StopReason::Diverged => "diverged",
    }
}

/// Trains one linear student at training length `k`. `eps` overrides the
/// configured initialization scale.
pub fn run_linear(cfg: &ExperimentConfig, k: usize, eps: Option<f64>, seed_index: usize) -> Result<LinearRun, CliError> {
    let started = Instant::now();
    let seed = run_seed(cfg.sweep.master_seed, seed_index);
    let teacher = build_linear_teacher(&cfg.teacher, seed)?;
    let scale = eps.unwrap_or_else(|| cfg.linear_init_scale());
    let init = match cfg.student.init.kind {
        InitName::Balanced => InitKind::BalancedRandom { scale },
        InitName::Normal => InitKind::GaussianScaled { eps: scale },
    };
    let student = init_student(cfg.student.d, cfg.student.structure, &init, derive_seed(seed, stream::INIT))?;
    let opt = &cfg.optimizer;
    let target = match opt.loss {
        LossKind::Population | LossKind::Accumulating => Target::Teacher(teacher.impulse_response(k)?),
        LossKind::Empirical => Target::Data(make_dataset(&teacher, k, opt.n_train, derive_seed(seed, stream::DATA))?),
    };
    let tc = TrainingConfig {
        method: opt.method,
        lr: opt.lr,
        max_steps: opt.max_steps,
        loss_kind: opt.loss,
        early_stop_loss: opt.early_stop(),
        lr_milestones: opt.milestones(),
        batch_size: opt.batch_size,
        init,
        seed,
        record_every: opt.record_every,
    };
    let trajectory = train(&target, &student, &tc)?;
    let (start, end) = match cfg.sweep.tail_end {
        Some(end) => (k, end),
        None => default_tail_window(k),
    };
    let teacher_ir = teacher.impulse_response(end)?;
    let (extrap_error, non_extrapolating) = match trajectory.final_theta.impulse_response(end) {
        Ok(student_ir) => {
            let e = extrapolation_error(&student_ir, &teacher_ir, start, end)?;
            (e.error, e.non_extrapolating)
        }
        Err(LabError::NonFinite { .. }) => (f64::INFINITY, true),
        Err(e) => return Err(e.into()),
    };
    let last = trajectory.records.last();
    let row = RunRow {
        eps,
        k,
        seed: seed_index,
        final_loss: trajectory.final_loss(),
        extrap_error,
        non_extrapolating,
        min_balancedness_ratio: eps.and(trajectory.min_balancedness_ratio()),
        status: status_of(trajectory.stop_reason).into(),
        steps: last.map_or(0, |r| r.step),
        wall_time_s: if cfg.output.wall_time { started.elapsed().as_secs_f64() } else { 0.0 },
    };
    log::info!(
        "k={k} seed={seed_index}{} loss={:e} extrap_error={:e} status={}",
        eps.map(|e| format!(" eps={e:e}")).unwrap_or_default(),
        row.final_loss,
        row.extrap_error,
        row.status
    );
    Ok(LinearRun {
        row,
        teacher,
        trajectory,
    })
}

/// Trains one GRU student at training length `k_g` and scores it on the
/// configured evaluation horizon.
pub fn run_gru(cfg: &ExperimentConfig, k: usize, seed_index: usize) -> Result<(RunRow, String), CliError> {
    let started = Instant::now();
    let seed = run_seed(cfg.sweep.master_seed, seed_index);
    let teacher = build_gru_teacher(&cfg.teacher, seed)?;
    let opt = &cfg.optimizer;
    let tc = GruTrainConfig {
        k_g: k,
        n_train: opt.n_train,
        batch_size: opt.batch_size,
        lr: opt.lr,
        max_steps: opt.max_steps,
        early_stop_loss: opt.early_stop_loss.unwrap_or(LossKind::Empirical.default_early_stop()),
        init_scale: cfg.gru_init_scale(),
        seed,
        record_every: opt.record_every,
    };
    let trajectory = gru_train(&teacher.params, cfg.student.d, &tc)?;
    let horizon = gru_horizon(cfg);
    let eval_seed = derive_seed(seed, stream::EVAL);
    let n = cfg.sweep.eval_inputs;
    let extrap_error = gru_extrapolation_error(&trajectory.final_params, &teacher.params, n, k, horizon, eval_seed)?;
    let baseline = gru_extrapolation_error(&GruParams::zeros(cfg.student.d), &teacher.params, n, k, horizon, eval_seed)?;
    let row = RunRow {
        eps: None,
        k,
        seed: seed_index,
        final_loss: trajectory.final_loss(),
        extrap_error,
        non_extrapolating: extrap_error > baseline,
        min_balancedness_ratio: None,
        status: status_of(trajectory.stop_reason).into(),
        steps: trajectory.records.last().map_or(0, |r| r.step),
        wall_time_s: if cfg.output.wall_time { started.elapsed().as_secs_f64() } else { 0.0 },
    };
    log::info!(
        "k_g={k} seed={seed_index} loss={:e} extrap_error={:e} status={}",
        row.final_loss,
        row.extrap_error,
        row.status
    );
    let line = serde_json::json!({
        "k": k,
        "seed": seed_index,
        "status": row.status,
        "teacher_fit_error": teacher.fit_error,
        "records": trajectory.records,
    });
    Ok((row, line.to_string()))
}

pub fn gru_horizon(cfg: &ExperimentConfig) -> usize {
    let max_k = cfg.sweep.k_values.iter().copied().max().unwrap_or(1);
    cfg.sweep.horizon.unwrap_or((2 * max_k).max(64))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} workers: {e}")))
}

fn linear_line(run: &LinearRun) -> String {
    serde_json::json!({
        "eps": run.row.eps,
        "k": run.row.k,
        "seed": run.row.seed,
        "status": run.row.status,
        "records": run.trajectory.records,
    })
    .to_string()
}

fn metadata(cfg: &ExperimentConfig, kind: SweepKind) -> Metadata {
    Metadata {
        tool: "extrapolab",
        version: env!("CARGO_PKG_VERSION"),
        command: kind,
        config_hash: cfg.hash(),
        teacher: teacher_descriptor(&cfg.teacher),
        student_d: cfg.student.d,
        seed_scheme: SEED_SCHEME,
        config: cfg.clone(),
    }
}

/// Runs every `(point, seed)` pair; failures become rows, never aborts.
fn execute(
    cfg: &ExperimentConfig,
    kind: SweepKind,
    points: Vec<(Option<f64>, usize)>,
    jobs: usize,
) -> Result<SweepResult, CliError> {
    cfg.validate()?;
    if kind == SweepKind::GruSweep {
        let horizon = gru_horizon(cfg);
        if points.iter().any(|&(_, k)| k >= horizon) {
            return Err(CliError::Usage(format!("sweep.horizon {horizon} must exceed every k")));
        }
    } else if let Some(end) = cfg.sweep.tail_end {
        if points.iter().any(|&(_, k)| k >= end) {
            return Err(CliError::Usage(format!("sweep.tail_end {end} must exceed every k")));
        }
    }
    let tasks: Vec<(Option<f64>, usize, usize)> = points
        .iter()
        .flat_map(|&(eps, k)| (0..cfg.sweep.seeds).map(move |s| (eps, k, s)))
        .collect();
    let outcomes: Vec<(RunRow, String, Option<LinearRnnParams>)> = pool(jobs)?.install(|| {
        tasks
            .into_par_iter()
            .map(|(eps, k, s)| {
                let result = match kind {
                    SweepKind::GruSweep => run_gru(cfg, k, s).map(|(row, line)| (row, line, None)),
                    _ => run_linear(cfg, k, eps, s).map(|run| {
                        let line = linear_line(&run);
                        (run.row, line, Some(run.trajectory.final_theta))
                    }),
                };
                result.unwrap_or_else(|err| {
                    log::error!("k={k} seed={s}: {err}");
                    let row = RunRow::failed(eps, k, s, &err);
                    let line = serde_json::json!({"eps": eps, "k": k, "seed": s, "status": row.status, "error": err.to_string()});
                    (row, line.to_string(), None)
                })
            })
            .collect()
    });
    let mut rows = Vec::with_capacity(outcomes.len());
    let mut trajectories = Vec::with_capacity(outcomes.len());
    let mut students = Vec::with_capacity(outcomes.len());
    for (row, line, student) in outcomes {
        rows.push(row);
        trajectories.push(line);
        students.push(student);
    }
    let stats = points.iter().map(|&(eps, k)| point_stats(eps, k, &rows)).collect();
    Ok(SweepResult {
        kind,
        rows,
        stats,
        metadata: metadata(cfg, kind),
        trajectories,
        students,
    })
}

fn point_stats(eps: Option<f64>, k: usize, rows: &[RunRow]) -> PointStats {
    let at: Vec<&RunRow> = rows.iter().filter(|r| r.k == k && r.eps == eps).collect();
    let ok: Vec<&RunRow> = at.iter().copied().filter(|r| !r.extrap_error.is_nan()).collect();
    let n = ok.len() as f64;
    let mean = |f: fn(&RunRow) -> f64| if ok.is_empty() { f64::NAN } else { ok.iter().map(|r| f(r)).sum::<f64>() / n };
    let mean_err = mean(|r| r.extrap_error);
    let std = if ok.len() > 1 {
        (ok.iter().map(|r| (r.extrap_error - mean_err).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    PointStats {
        eps,
        k,
        runs: at.len(),
        failed: at.len() - ok.len(),
        mean_extrap_error: mean_err,
        std_extrap_error: std,
        mean_final_loss: mean(|r| r.final_loss),
    }
}

/// Phase-transition sweep over training lengths.
pub fn sweep_k(cfg: &ExperimentConfig, jobs: usize) -> Result<SweepResult, CliError> {
    let points = cfg.sweep.k_values.iter().map(|&k| (None, k)).collect();
    execute(cfg, SweepKind::SweepK, points, jobs)
}

/// Sweep over initialization scales, each at every configured `k`.
pub fn sweep_init_scale(cfg: &ExperimentConfig, jobs: usize) -> Result<SweepResult, CliError> {
    let points = cfg
        .sweep
        .eps_values
        .iter()
        .flat_map(|&e| cfg.sweep.k_values.iter().map(move |&k| (Some(e), k)))
        .collect();
    execute(cfg, SweepKind::SweepInitScale, points, jobs)
}

/// The GRU analogue of [`sweep_k`].
pub fn gru_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<SweepResult, CliError> {
    let points = cfg.sweep.k_values.iter().map(|&k| (None, k)).collect();
    execute(cfg, SweepKind::GruSweep, points, jobs)
}

impl SweepResult {
    fn with_eps(&self) -> bool {
        self.kind == SweepKind::SweepInitScale
    }

    pub fn summary_csv(&self) -> Vec<u8> {
        let mut header = vec![];
        if self.with_eps() {
            header.push("eps");
        }
        header.extend(["k", "seed", "final_loss", "extrap_error", "non_extrapolating"]);
        if self.with_eps() {
            header.push("min_balancedness_ratio");
        }
        header.extend(["status", "steps", "wall_time_s"]);
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut v = vec![];
                if self.with_eps() {
                    v.push(fmt_opt(r.eps));
                }
                v.extend([
                    r.k.to_string(),
                    r.seed.to_string(),
                    fmt_f64(r.final_loss),
                    fmt_f64(r.extrap_error),
                    r.non_extrapolating.to_string(),
                ]);
                if self.with_eps() {
                    v.push(fmt_opt(r.min_balancedness_ratio));
                }
                v.extend([r.status.clone(), r.steps.to_string(), fmt_f64(r.wall_time_s)]);
                v
            })
            .collect();
        csv_bytes(&header, &rows)
    }

    pub fn stats_csv(&self) -> Vec<u8> {
        let mut header = vec![];
        if self.with_eps() {
            header.push("eps");
        }
        header.extend(["k", "runs", "failed", "mean_extrap_error", "std_extrap_error", "mean_final_loss"]);
        let rows: Vec<Vec<String>> = self
            .stats
            .iter()
            .map(|s| {
                let mut v = vec![];
                if self.with_eps() {
                    v.push(fmt_opt(s.eps));
                }
                v.extend([
                    s.k.to_string(),
                    s.runs.to_string(),
                    s.failed.to_string(),
                    fmt_f64(s.mean_extrap_error),
                    fmt_f64(s.std_extrap_error),
                    fmt_f64(s.mean_final_loss),
                ]);
                v
            })
            .collect();
        csv_bytes(&header, &rows)
    }

    pub fn trajectories_jsonl(&self) -> Vec<u8> {
        let mut out = String::new();
        for line in &self.trajectories {
            out.push_str(line);
            out.push('\n');
        }
        out.into_bytes()
    }

    /// Mean extrapolation error at `(eps, k)`, if that point was run.
    pub fn mean_error(&self, eps: Option<f64>, k: usize) -> Option<f64> {
        self.stats.iter().find(|s| s.k == k && s.eps == eps).map(|s| s.mean_extrap_error)
    }

    /// Writes `summary`, `stats`, `metadata.json` and, when enabled,
    /// `trajectories.jsonl` into `dir`.
    pub fn write(&self, dir: &Path, format: Format) -> Result<(), CliError> {
        match format {
            Format::Csv => {
                write_atomic(&dir.join("summary.csv"), &self.summary_csv())?;
                write_atomic(&dir.join("stats.csv"), &self.stats_csv())?;
            }
            Format::Json => {
                let body = serde_json::json!({"rows": self.rows, "stats": self.stats});
                write_atomic(&dir.join("summary.json"), &json_bytes(&body))?;
            }
        }
        write_atomic(&dir.join("metadata.json"), &json_bytes(&self.metadata))?;
        if self.metadata.config.output.trajectories {
            write_atomic(&dir.join("trajectories.jsonl"), &self.trajectories_jsonl())?;
        }
        Ok(())
    }
}
