use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use extrapolab_core::gru::{gru_impulse_response, GruParams};
use extrapolab_core::moments::{
    construct_moment_confounders, moments, recover_atomic, recover_atomic_auto, verify_extrapolation,
    wasserstein_1_cdf, wasserstein_p, AtomicDistribution, MomentVector,
};
use extrapolab_core::teachers::{
    default_gru_target, gen_balanced_teacher, gen_delay_teacher, gen_gru_teacher, gen_random_unbalanced_teacher,
    GruTeacher, GRU_TEACHER_HORIZON,
};
use extrapolab_core::LinearRnnParams;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::output::{csv_bytes, fmt_f64, json_bytes, write_atomic};
use crate::sweep::{self, SweepResult};
use crate::{read_json, CliError, Format};

#[derive(Debug, Parser)]
#[command(name = "extrapolab", version, about = "Teacher-student experiments on sequence-length extrapolation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (JSON). Missing blocks and fields take the defaults listed below.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory for train and sweeps; output file for the other commands (stdout if absent).
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Master seed for sweeps and train; generator seed for gen-teacher and confound.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for sweeps [default: logical cores].
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Tabular output format [default: csv]. Commands with structured output always write JSON.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TeacherArg {
    Balanced,
    Delay,
    RandomUnbalanced,
    Gru,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a teacher and write its parameters as JSON.
    GenTeacher {
        #[arg(long, value_enum)]
        kind: TeacherArg,
        #[arg(long)]
        dh: usize,
    },
    /// Impulse response of a serialized linear or GRU system.
    Impulse {
        #[arg(long, value_name = "PATH")]
        params: PathBuf,
        #[arg(long)]
        n: usize,
    },
    /// Train one student (seed index 0) from the config.
    Train {
        /// Training length [default: first entry of sweep.k_values].
        #[arg(long)]
        k: Option<usize>,
    },
    /// Sweep the training length k.
    SweepK,
    /// Sweep the initialization scale over sweep.eps_values at every k.
    SweepInitScale,
    /// Sweep the training length for a GRU teacher and student.
    GruSweep,
    /// Moment tools on atomic distributions.
    Moments {
        #[command(subcommand)]
        mode: MomentsMode,
    },
    /// Two distributions agreeing on all but the last moment of a 2·dh moment sequence.
    Confound {
        #[arg(long)]
        dh: usize,
    },
    /// Compare a student against a teacher beyond the training length.
    Verify {
        #[arg(long, value_name = "PATH")]
        student: PathBuf,
        #[arg(long, value_name = "PATH")]
        teacher: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 200)]
        horizon: usize,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
    },
}

#[derive(Debug, Subcommand)]
pub enum MomentsMode {
    /// Moments m_0 .. m_{order-1} of a distribution file {"atoms", "weights"}.
    Compute {
        #[arg(long, value_name = "PATH")]
        dist: PathBuf,
        #[arg(long)]
        order: usize,
    },
    /// Recover an atomic distribution from a moment file {"moments"}.
    Recover {
        #[arg(long, value_name = "PATH")]
        moments: PathBuf,
        /// Exact atom count; when absent, counts from min(n-max, moments / 2) down to 1 are tried.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 10)]
        n_max: usize,
    },
    /// p-Wasserstein distance between two distribution files.
    Wasserstein {
        #[arg(long, value_name = "PATH")]
        a: PathBuf,
        #[arg(long, value_name = "PATH")]
        b: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        p: f64,
    },
}

fn defaults_help() -> String {
    let json = serde_json::to_string_pretty(&ExperimentConfig::default()).expect("default config serializes");
    format!(
        "Default config (any subset may be given):\n{json}\n\n\
         Defaults not shown: student.init.scale is 1e-2 for linear students and 1e-4 for GRU students; \
         optimizer.early_stop_loss is 1e-12 for population-type losses and 1e-8 for empirical and GRU losses; \
         sweep.tail_end is max(4k, 200); sweep.horizon is max(2 * max k, 64).\n\n\
         Environment: EXTRAPOLAB_LOG=error|info|debug sets log verbosity on stderr (default error).\n\
         Exit status: 0 success, 1 usage error, 2 numeric failure."
    )
}

fn init_logging() {
    let level = std::env::var("EXTRAPOLAB_LOG").unwrap_or_else(|_| "error".into());
    let _ = env_logger::Builder::new()
        .parse_filters(&level)
        .target(env_logger::Target::Stderr)
        .format_timestamp(None)
        .try_init();
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let matches = match Cli::command().after_long_help(defaults_help()).try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.sweep.master_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn jobs(cli: &Cli) -> usize {
    cli.jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(path) => write_atomic(path, bytes),
        None => std::io::stdout().write_all(bytes).map_err(|source| CliError::Io {
            path: PathBuf::from("<stdout>"),
            source,
        }),
    }
}

fn json_only(cli: &Cli, what: &str) -> Result<(), CliError> {
    if cli.format == Some(Format::Csv) {
        return Err(CliError::Usage(format!("{what} only writes JSON")));
    }
    Ok(())
}

fn emit_json<T: Serialize>(cli: &Cli, what: &str, value: &T) -> Result<(), CliError> {
    json_only(cli, what)?;
    emit(cli.out.as_deref(), &json_bytes(value))
}

/// Either one JSON document with the sequence or a two-column CSV.
fn emit_sequence(cli: &Cli, index: &str, value: &str, key: &str, values: &[f64]) -> Result<(), CliError> {
    let bytes = match cli.format.unwrap_or_default() {
        Format::Csv => {
            let rows: Vec<Vec<String>> =
                values.iter().enumerate().map(|(j, v)| vec![j.to_string(), fmt_f64(*v)]).collect();
            csv_bytes(&[index, value], &rows)
        }
        Format::Json => json_bytes(&serde_json::json!({ key: values })),
    };
    emit(cli.out.as_deref(), &bytes)
}

fn finish_sweep(cli: &Cli, result: SweepResult) -> Result<(), CliError> {
    let dir = cli
        .out
        .as_deref()
        .ok_or_else(|| CliError::Usage("sweeps need --out DIR".into()))?;
    result.write(dir, cli.format.unwrap_or_default())?;
    std::io::stdout()
        .write_all(&result.stats_csv())
        .map_err(|source| CliError::Io {
            path: PathBuf::from("<stdout>"),
            source,
        })
}

/// A serialized system accepted by `impulse`.
enum AnySystem {
    Linear(LinearRnnParams),
    Gru(GruParams),
}

fn read_system(path: &Path) -> Result<AnySystem, CliError> {
    let value: serde_json::Value = read_json(path)?;
    let parse_err = |e: serde_json::Error| CliError::Usage(format!("cannot parse {}: {e}", path.display()));
    if value.get("params").is_some() {
        let t: GruTeacher = serde_json::from_value(value).map_err(parse_err)?;
        Ok(AnySystem::Gru(t.params))
    } else if value.get("d_g").is_some() {
        Ok(AnySystem::Gru(serde_json::from_value(value).map_err(parse_err)?))
    } else {
        Ok(AnySystem::Linear(serde_json::from_value(value).map_err(parse_err)?))
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenTeacher { kind, dh } => {
            let seed = cli.seed.unwrap_or(0);
            match kind {
                TeacherArg::Balanced => emit_json(cli, "gen-teacher", &gen_balanced_teacher(*dh, seed)?),
                TeacherArg::Delay => emit_json(cli, "gen-teacher", &gen_delay_teacher(*dh)?),
                TeacherArg::RandomUnbalanced => emit_json(cli, "gen-teacher", &gen_random_unbalanced_teacher(*dh, seed)?),
                TeacherArg::Gru => {
                    let target = default_gru_target(GRU_TEACHER_HORIZON);
                    emit_json(cli, "gen-teacher", &gen_gru_teacher(*dh, &target, seed)?)
                }
            }
        }
        Command::Impulse { params, n } => {
            let values = match read_system(params)? {
                AnySystem::Linear(p) => p.impulse_response(*n)?.values,
                AnySystem::Gru(p) => gru_impulse_response(&p, *n)?,
            };
            emit_sequence(cli, "j", "value", "values", &values)
        }
        Command::Train { k } => {
            let cfg = load_config(cli)?;
            let k = k.unwrap_or(cfg.sweep.k_values[0]);
            let run = sweep::run_linear(&cfg, k, None, 0)?;
            let summary = serde_json::json!({
                "config_hash": cfg.hash(),
                "row": run.row,
            });
            match cli.out.as_deref() {
                Some(dir) => {
                    write_atomic(&dir.join("teacher.json"), &json_bytes(&run.teacher))?;
                    write_atomic(&dir.join("student.json"), &json_bytes(&run.trajectory.final_theta))?;
                    write_atomic(&dir.join("trajectory.json"), &json_bytes(&run.trajectory))?;
                    write_atomic(&dir.join("summary.json"), &json_bytes(&summary))
                }
                None => emit(None, &json_bytes(&summary)),
            }
        }
        Command::SweepK => {
            let cfg = load_config(cli)?;
            finish_sweep(cli, sweep::sweep_k(&cfg, jobs(cli))?)
        }
        Command::SweepInitScale => {
            let cfg = load_config(cli)?;
            finish_sweep(cli, sweep::sweep_init_scale(&cfg, jobs(cli))?)
        }
        Command::GruSweep => {
            let cfg = load_config(cli)?;
            finish_sweep(cli, sweep::gru_sweep(&cfg, jobs(cli))?)
        }
        Command::Moments { mode } => match mode {
            MomentsMode::Compute { dist, order } => {
                let d: AtomicDistribution = read_json(dist)?;
                emit_sequence(cli, "p", "moment", "moments", &moments(&d, *order).values)
            }
            MomentsMode::Recover { moments: path, n, n_max } => {
                let m: MomentVector = read_json(path)?;
                let m = MomentVector::new(m.values)?;
                let dist = match n {
                    Some(n) => recover_atomic(&m, *n)?,
                    None => recover_atomic_auto(&m, (*n_max).min(m.order() / 2).max(1))?,
                };
                emit_json(cli, "moments recover", &dist)
            }
            MomentsMode::Wasserstein { a, b, p } => {
                if !(*p >= 1.0 && p.is_finite()) {
                    return Err(CliError::Usage(format!("--p must be a finite value >= 1, got {p}")));
                }
                let (a, b): (AtomicDistribution, AtomicDistribution) = (read_json(a)?, read_json(b)?);
                let body = serde_json::json!({
                    "p": p,
                    "distance": wasserstein_p(&a, &b, *p),
                    "w1_cdf": wasserstein_1_cdf(&a, &b),
                });
                emit_json(cli, "moments wasserstein", &body)
            }
        },
        Command::Confound { dh } => {
            let (first, second, gap) = construct_moment_confounders(*dh, cli.seed.unwrap_or(0))?;
            let order = 2 * dh;
            let body = serde_json::json!({
                "dh": dh,
                "first": first,
                "second": second,
                "gap": gap,
                "moments_first": moments(&first, order).values,
                "moments_second": moments(&second, order).values,
            });
            emit_json(cli, "confound", &body)
        }
        Command::Verify {
            student,
            teacher,
            k,
            horizon,
            eps,
        } => {
            let s: LinearRnnParams = read_json(student)?;
            let t: LinearRnnParams = read_json(teacher)?;
            if *k == 0 || *horizon < *k {
                return Err(CliError::Usage("need 1 <= k <= horizon".into()));
            }
            emit_json(cli, "verify", &verify_extrapolation(&s, &t, *k, *horizon, *eps))
        }
    }
}
