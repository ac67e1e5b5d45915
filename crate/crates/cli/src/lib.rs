//! `dipa`: weight generation, episode runs, sweeps, gradient checks and
//! parameter accounting.

pub mod config;
pub mod run;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dipa_core::adapter::count_params_for;
use dipa_core::backbone::{init_random_weights, save_weights, InitScheme};
use dipa_core::episodes::worker_count;
use dipa_core::grad::check::{check_all_ops, check_all_ops_f32, check_f32, check_f64, CheckReport, Tolerance};
use dipa_core::grad::OpKind;
use dipa_core::tensor::Rng;
use dipa_core::trainer::{EndToEndProbe, LossKind};
use dipa_core::{DType, Error, ErrorKind};

use config::{backbone_from_arg, load_run_config, Preset, RunConfig};
use run::SweepParam;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("episode {episode}: {source}")]
    Episode { episode: usize, source: Error },
    #[error("gradient check failed for {}", ops.join(", "))]
    GradCheck { ops: Vec<String> },
}

impl CliError {
    /// 1 usage, 2 data or format, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        let kind = match self {
            CliError::Core(e) | CliError::Episode { source: e, .. } => e.kind(),
            CliError::GradCheck { .. } => ErrorKind::Numerical,
        };
        match kind {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numerical => 3,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "dipa", version, about = "Few-shot adaptation of a frozen ViT with scale/shift adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded random backbone as a DIPAW1 file.
    InitWeights(InitWeightsArgs),
    /// Fine-tune and evaluate on a batch of episodes.
    Run(RunArgs),
    /// Repeat a run over several values of one parameter.
    Sweep(SweepArgs),
    /// Compare every adjoint and the end-to-end loss gradient with finite differences.
    Gradcheck(GradcheckArgs),
    /// Count trainable parameters.
    Params(ParamsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

impl From<Precision> for DType {
    fn from(p: Precision) -> Self {
        match p {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Args)]
pub struct InitWeightsArgs {
    /// `vit-small`, `tiny`, `desk` or a backbone JSON file.
    #[arg(long, default_value = "vit-small")]
    pub config: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: Precision,
    /// Standard deviation of the truncated-normal initialisation.
    #[arg(long, default_value_t = 0.02)]
    pub init_std: f64,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration JSON, overlaid on the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "seen")]
    pub preset: Preset,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long = "d-t")]
    pub d_t: Option<usize>,
    #[arg(long = "d-f")]
    pub d_f: Option<usize>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Directory with `index.json` and raw samples; synthetic tasks otherwise.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    /// Also write per-episode wall-clock times to `timings.jsonl`.
    #[arg(long)]
    pub record_timing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    ProxyAnchor,
    NccMean,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::ProxyAnchor => LossKind::ProxyAnchor,
            LossArg::NccMean => LossKind::NccMean,
        }
    }
}

impl RunArgs {
    /// Preset, then the JSON file, then flags.
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut c = load_run_config(self.preset, self.config.as_deref())?;
        if let Some(v) = self.episodes {
            c.episodes = v;
        }
        if let Some(v) = self.d_t {
            c.finetune.d_t = v;
        }
        if let Some(v) = self.d_f {
            c.finetune.d_f = v;
        }
        if let Some(v) = self.loss {
            c.finetune.loss = v.into();
        }
        if let Some(v) = self.iterations {
            c.finetune.iterations = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.weights {
            c.weights = Some(v.clone());
        }
        if let Some(v) = &self.pool {
            c.pool = Some(v.clone());
        }
        if let Some(v) = self.precision {
            c.precision = v.into();
        }
        if self.record_timing {
            c.record_timing = true;
        }
        let requested = self.workers.or((c.workers > 0).then_some(c.workers));
        c.workers = worker_count(requested);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<usize>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Backbone for the end-to-end check.
    #[arg(long, default_value = "tiny")]
    pub config: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: Precision,
    /// Scale the named op's input gradients (self-test of the checker).
    #[arg(long, hide = true)]
    pub corrupt_adjoint: Option<String>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long, default_value = "vit-small")]
    pub config: String,
    #[arg(long = "d-t", default_value_t = 7)]
    pub d_t: usize,
    #[arg(long, default_value_t = 5)]
    pub n_way: usize,
    #[arg(long = "d-f", default_value_t = 4)]
    pub d_f: usize,
    #[arg(long)]
    pub json: bool,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::Core(Error::Io(e))
}

pub fn execute(command: Command, out: &mut dyn Write) -> CliResult<()> {
    match command {
        Command::InitWeights(a) => init_weights(&a, out),
        Command::Run(a) => {
            let cfg = a.resolve()?;
            let s = run::run(&cfg, &a.out)?;
            let acc = s.accuracy.expect("completed runs have results");
            writeln!(
                out,
                "{} episodes: accuracy {:.4} +- {:.4}, anchor accuracy {:.4}, results in {}",
                s.completed,
                acc.mean,
                acc.ci95,
                s.accuracy_anchor.map_or(f64::NAN, |a| a.mean),
                a.out.display()
            )
            .map_err(io_err)
        }
        Command::Sweep(a) => {
            let cfg = a.run.resolve()?;
            let rows = run::sweep(&cfg, a.param, &a.values, &a.run.out)?;
            for r in rows {
                writeln!(
                    out,
                    "{}={}: fused_dim {} accuracy {:.4} +- {:.4} (n={})",
                    r.param, r.value, r.fused_dim, r.mean, r.ci95, r.n
                )
                .map_err(io_err)?;
            }
            Ok(())
        }
        Command::Gradcheck(a) => gradcheck(&a, out),
        Command::Params(a) => params(&a, out),
    }
}

fn init_weights(a: &InitWeightsArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = backbone_from_arg(&a.config)?;
    if a.init_std.is_nan() || a.init_std <= 0.0 {
        return Err(Error::Config(format!("init std must be > 0, got {}", a.init_std)).into());
    }
    let c =
        init_random_weights(&cfg, &mut Rng::new(a.seed), InitScheme::TruncNormal { std: a.init_std }, a.dtype.into())?;
    save_weights(&c, &a.out)?;
    let total = c.total_scalars();
    writeln!(out, "{total} parameters ({:.2} M) written to {}", total as f64 / 1e6, a.out.display()).map_err(io_err)
}

fn params(a: &ParamsArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = backbone_from_arg(&a.config)?;
    if a.d_t > cfg.depth {
        return Err(Error::Config(format!("d_t {} exceeds depth {}", a.d_t, cfg.depth)).into());
    }
    let r = count_params_for(&cfg, a.d_t, a.n_way, cfg.fused_dim(a.d_f)?);
    if a.json {
        let text = serde_json::to_string_pretty(&r).map_err(Error::from)?;
        return writeln!(out, "{text}").map_err(io_err);
    }
    let m = |n: usize| n as f64 / 1e6;
    writeln!(
        out,
        "adapter   {:>10} ({:.2} M, {:.2}% of backbone)\n\
         anchor    {:>10} ({:.2} M)\n\
         total     {:>10} ({:.2} M, {:.2}% of backbone)\n\
         backbone  {:>10} ({:.2} M)\n\
         fused dim {:>10}",
        r.adapter_params,
        m(r.adapter_params),
        r.adapter_ratio_percent,
        r.anchor_params,
        m(r.anchor_params),
        r.total_trainable,
        m(r.total_trainable),
        r.total_ratio_percent,
        r.backbone_params,
        m(r.backbone_params),
        r.fused_dim
    )
    .map_err(io_err)
}

fn gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = backbone_from_arg(&a.config)?;
    let fault = match &a.corrupt_adjoint {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Error::Config(format!("unknown op `{name}`")))?),
        None => None,
    };
    let (mut reports, tol) = match a.precision {
        Precision::F64 => (check_all_ops(a.seed, fault)?, Tolerance::F64),
        Precision::F32 => (check_all_ops_f32(a.seed, fault)?, Tolerance::F32),
    };
    let probe = EndToEndProbe::<f64>::new(&cfg, a.seed)?;
    let e2e = match a.precision {
        Precision::F64 => check_f64("end_to_end", &probe, &tol, fault)?,
        Precision::F32 => check_f32("end_to_end", &EndToEndProbe::<f32>::new(&cfg, a.seed)?, &probe, &tol, fault)?,
    };
    reports.push(e2e);
    let failed = summarize_reports(&reports, &tol, out).map_err(io_err)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck { ops: failed })
    }
}

/// Prints one line per op; returns the names of failing ops.
fn summarize_reports(reports: &[CheckReport], tol: &Tolerance, out: &mut dyn Write) -> std::io::Result<Vec<String>> {
    writeln!(out, "threshold: relative error < {:e} (absolute floor {:e})", tol.rel, tol.abs_floor)?;
    let mut names: Vec<&str> = Vec::new();
    for r in reports {
        if !names.contains(&r.op_name()) {
            names.push(r.op_name());
        }
    }
    let mut failed = Vec::new();
    for name in names {
        let group: Vec<&CheckReport> = reports.iter().filter(|r| r.op_name() == name).collect();
        let rel = group.iter().map(|r| r.max_rel_err()).fold(0.0, f64::max);
        let entries: usize = group.iter().map(|r| r.entries_checked()).sum();
        let ok = group.iter().all(|r| r.passed());
        writeln!(
            out,
            "{:<16} cases {:>2} entries {:>5} max rel err {:.3e} {}",
            name,
            group.len(),
            entries,
            rel,
            if ok { "ok" } else { "FAILED" }
        )?;
        if !ok {
            failed.push(name.to_string());
        }
    }
    Ok(failed)
}
