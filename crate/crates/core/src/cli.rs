//! `echoloop` subcommands and the TOML run configuration.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::diagnostics::report::{build_report, write_plot_data, DiagnosticsConfig, Projections, RiskReport};
use crate::ingest::{build_dataset, parse_attribute_table, parse_interaction_log, AttributeTable, LogFormat, SubjectKind};
use crate::loop_engine::{run_feedback_loop, LoopError, LoopTrace, PipelineConfig};
use crate::seeding::derive_seed;
use crate::synthetic::{self, SyntheticParams};
use crate::timeline::SplitConfig;
use crate::trace_io::{read_trace, write_trace};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_LOOP: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "echoloop", version, about = "Feedback-loop simulation and risk diagnostics for recommenders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the loop described by a TOML config and write trace, report and plot data.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Recompute the report from a stored trace directory.
    Diagnose {
        #[arg(long)]
        trace: PathBuf,
        /// Comma-separated phases to compute, e.g. `1,3`.
        #[arg(long, value_delimiter = ',')]
        phases: Option<Vec<u8>>,
        /// Write the report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a planted-partition dataset.
    GenSynthetic {
        #[arg(long)]
        users: usize,
        #[arg(long)]
        items: usize,
        #[arg(long)]
        communities: usize,
        #[arg(long)]
        inter_prob: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        per_user: usize,
        #[arg(long, default_value_t = 1_000_000)]
        time_span: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub interactions: PathBuf,
    pub user_attributes: Option<PathBuf>,
    pub item_attributes: Option<PathBuf>,
}

/// Top-level run configuration. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataPaths,
    pub split: SplitConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

/// An error paired with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn config(message: impl ToString) -> Self {
        Self { code: EXIT_CONFIG, message: message.to_string() }
    }
}

impl From<LoopError> for Failure {
    fn from(e: LoopError) -> Self {
        let code = match e {
            LoopError::Config(_) => EXIT_CONFIG,
            _ => EXIT_LOOP,
        };
        Self { code, message: e.to_string() }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.output_dir);
        resolve(&mut cfg.data.interactions);
        cfg.data.user_attributes.as_mut().map(resolve);
        cfg.data.item_attributes.as_mut().map(resolve);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.split.validate().map_err(Failure::config)?;
        self.pipeline.validate().map_err(Failure::config)?;
        if self.diagnostics.phases.iter().any(|p| !(1..=3).contains(p)) {
            return Err(Failure::config("diagnostics.phases may only contain 1, 2 and 3"));
        }
        if self.diagnostics.clusters < 1 {
            return Err(Failure::config("diagnostics.clusters must be at least 1"));
        }
        Ok(())
    }

    /// Pipeline and diagnostics settings with the global seed folded in.
    pub fn effective(&self) -> (PipelineConfig, DiagnosticsConfig) {
        let mut pipeline = self.pipeline.clone();
        pipeline.seed = derive_seed(self.seed, &["pipeline".into(), self.pipeline.seed.into()]);
        let mut diagnostics = self.diagnostics.clone();
        diagnostics.kmeans_seed = derive_seed(self.seed, &["kmeans".into(), self.diagnostics.kmeans_seed.into()]);
        (pipeline, diagnostics)
    }
}

fn load_table(path: Option<&Path>, kind: SubjectKind) -> Result<AttributeTable, Failure> {
    match path {
        None => Ok(AttributeTable::empty(kind)),
        Some(p) => {
            let f = File::open(p).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?;
            parse_attribute_table(BufReader::new(f), kind).map_err(|e| Failure::config(format!("{}: {e}", p.display())))
        }
    }
}

/// Exclusive claim on an output directory, released on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| Failure::config(format!("{}: {e}", dir.display())))?;
        let path = dir.join(".echoloop.lock");
        OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            Failure::config(format!("cannot lock output directory {} ({e}); is another run using it?", dir.display()))
        })?;
        Ok(Self(path))
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn write_outputs(dir: &Path, report: &RiskReport) -> Result<(), Failure> {
    let io = |e: std::io::Error| Failure::config(e.to_string());
    fs::write(dir.join("report.json"), report.to_json()).map_err(io)?;
    let plot = File::create(dir.join("plot_data.csv")).map_err(io)?;
    write_plot_data(std::io::BufWriter::new(plot), report).map_err(|e| Failure::config(e.to_string()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

pub fn summary(trace: &LoopTrace, report: &RiskReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "cutoff time      {}", trace.cutoff_time);
    let _ = writeln!(s, "initial size     {}", trace.initial_size);
    let _ = writeln!(s, "common users     {}", trace.common_users);
    let _ = writeln!(s, "catalog size     {}", trace.catalog.len());
    if let Some(p1) = &report.phase1 {
        let _ = writeln!(s, "phase 1          profile fef {}  lc {}", fmt_opt(p1.fef), fmt_opt(p1.lc));
        for (name, d) in &p1.divergences {
            let _ = writeln!(s, "  {name:<14} tv {:.4}  top1 delta {:+.4}", d.tv_distance, d.top1_share_delta);
        }
    }
    if let Some(p2) = &report.phase2 {
        let _ = writeln!(
            s,
            "phase 2          mean gap {}  catalog fef {}  lc {}",
            fmt_opt(p2.gap_stats.as_ref().map(|g| g.summary.mean)),
            fmt_opt(p2.catalog_fef),
            fmt_opt(p2.lc)
        );
    }
    let _ = writeln!(s, "period  active  injected  size      mean_gap  dist_user  dist_item");
    for (i, p) in trace.periods.iter().enumerate() {
        let m = report.phase3.as_ref().and_then(|r| r.per_period.get(i));
        let _ = writeln!(
            s,
            "{:<7} {:<7} {:<9} {:<9} {:<9} {:<10} {}",
            p.index,
            p.quotas.len(),
            p.injected.len(),
            p.dataset_size,
            fmt_opt(m.and_then(|m| m.gap_stats.as_ref()).map(|g| g.summary.mean)),
            fmt_opt(m.and_then(|m| m.centroid_distance).map(|c| c.user)),
            fmt_opt(m.and_then(|m| m.centroid_distance).map(|c| c.item)),
        );
    }
    if let Some(Projections::Unavailable(_)) = report.phase3.as_ref().map(|p| &p.projections) {
        let _ = writeln!(s, "polarization     unavailable");
    }
    if !trace.warnings.is_empty() {
        let _ = writeln!(s, "warnings         {} (see trace.json)", trace.warnings.len());
    }
    s
}

pub fn cmd_run(config_path: &Path) -> Result<String, Failure> {
    let cfg = RunConfig::load(config_path)?;
    let (pipeline, diagnostics) = cfg.effective();
    let path = &cfg.data.interactions;
    let log = File::open(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let interactions = parse_interaction_log(BufReader::new(log), LogFormat::Csv)
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let users = load_table(cfg.data.user_attributes.as_deref(), SubjectKind::User)?;
    let items = load_table(cfg.data.item_attributes.as_deref(), SubjectKind::Item)?;
    let dataset = build_dataset(interactions, users, items).map_err(Failure::config)?;

    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let trace = run_feedback_loop(&dataset, &cfg.split, &pipeline)?;
    let report = build_report(&trace, &diagnostics);
    let extra = serde_json::json!({ "diagnostics": diagnostics, "run_seed": cfg.seed });
    let trace_dir = cfg.output_dir.join("trace");
    if trace_dir.exists() {
        fs::remove_dir_all(&trace_dir).map_err(|e| Failure::config(format!("{}: {e}", trace_dir.display())))?;
    }
    write_trace(&trace_dir, &trace, extra).map_err(Failure::config)?;
    write_outputs(&cfg.output_dir, &report)?;
    Ok(summary(&trace, &report))
}

/// Recomputes the report from `trace_dir`. The diagnostics settings stored in
/// the trace are reused; `phases` overrides the phase selection.
pub fn cmd_diagnose(trace_dir: &Path, phases: Option<Vec<u8>>) -> Result<RiskReport, Failure> {
    let (trace, manifest) = read_trace(trace_dir).map_err(Failure::config)?;
    let mut config: DiagnosticsConfig = match manifest.extra.get("diagnostics") {
        Some(v) => serde_json::from_value(v.clone()).map_err(Failure::config)?,
        None => DiagnosticsConfig::default(),
    };
    if let Some(p) = phases {
        if p.iter().any(|x| !(1..=3).contains(x)) {
            return Err(Failure::config("--phases may only contain 1, 2 and 3"));
        }
        config.phases = p;
    }
    for w in &trace.warnings {
        tracing::warn!("{w}");
    }
    Ok(build_report(&trace, &config))
}

pub fn cmd_gen_synthetic(params: &SyntheticParams, out: &Path) -> Result<String, Failure> {
    let data = synthetic::generate(params).map_err(Failure::config)?;
    synthetic::write(out, &data).map_err(Failure::config)?;
    Ok(format!("wrote {} interactions to {}\n", data.interactions.len(), out.display()))
}

pub fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_env("ECHOLOOP_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Run { config } => cmd_run(&config).map(|s| print!("{s}")),
        Command::Diagnose { trace, phases, out } => cmd_diagnose(&trace, phases).and_then(|r| match out {
            Some(path) => fs::write(&path, r.to_json()).map_err(|e| Failure::config(format!("{}: {e}", path.display()))),
            None => {
                print!("{}", r.to_json());
                Ok(())
            }
        }),
        Command::GenSynthetic { users, items, communities, inter_prob, seed, per_user, time_span, out } => {
            let params = SyntheticParams {
                users,
                items,
                communities,
                inter_prob,
                interactions_per_user: per_user,
                time_span,
                seed,
            };
            cmd_gen_synthetic(&params, &out).map(|s| print!("{s}"))
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
