//! `uvt`: runs the reconstruction pipeline stage by stage, checkpointing
//! every intermediate in an output directory.

mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use uvt_core::pipeline::PipelineConfig;
use uvt_core::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Simulate,
    Cluster,
    Denoise,
    PoseInit,
    Reconstruct,
    ReconstructSparse,
    Evaluate,
    All,
}

#[derive(Debug, Parser)]
#[command(
    name = "uvt",
    version,
    about = "Tomographic reconstruction from projections at unknown angles",
    after_help = "Any configuration key can also be given as `--key value` or `--key=value`."
)]
struct Cli {
    #[arg(value_enum)]
    stage: Stage,

    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Artifact directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,

    /// Worker thread cap.
    #[arg(long, env = "UVT_THREADS")]
    threads: Option<usize>,

    /// Also write truth.csv when simulating (`all` always does).
    #[arg(long)]
    emit_truth: bool,
}

/// Command line with configuration overrides (`--key value` or
/// `--key=value`, any config key) split off before clap sees it.
struct Invocation {
    cli: Cli,
    overrides: Overrides,
}

type Overrides = Vec<(String, String)>;

/// A failure with its exit status.
pub struct Failure {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            kind: "invalid_config",
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::MissingArtifact(_) => (2, "missing_artifact"),
            Error::InvalidConfig(_) => (3, "invalid_config"),
            Error::Io(_) => (1, "io"),
            Error::Csv(_) | Error::Parse(_) => (1, "bad_artifact"),
            _ => (1, "runtime"),
        };
        Self {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

fn config_key(flag: &str) -> Option<String> {
    let key = flag.strip_prefix("--")?.replace('-', "_");
    PipelineConfig::KEYS.contains(&key.as_str()).then_some(key)
}

fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides), Failure> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let (flag, inline) = match arg.split_once('=') {
            Some((f, v)) => (f.to_string(), Some(v.to_string())),
            None => (arg.clone(), None),
        };
        match config_key(&flag) {
            Some(key) => {
                let value = match inline {
                    Some(v) => v,
                    None => it.next().ok_or_else(|| Failure::config(format!("{flag} needs a value")))?,
                };
                overrides.push((key, value));
            }
            None => rest.push(arg),
        }
    }
    Ok((rest, overrides))
}

fn parse_args(args: Vec<String>) -> Result<Invocation, Failure> {
    let (rest, overrides) = split_overrides(args)?;
    match Cli::try_parse_from(rest) {
        Ok(cli) => Ok(Invocation { cli, overrides }),
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            std::process::exit(0);
        }
        Err(e) => {
            let text = e.render().to_string();
            let message: Vec<&str> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with("For more information"))
                .collect();
            Err(Failure::config(message.join(" ").trim_start_matches("error: ").to_string()))
        }
    }
}

fn load_config(inv: &Invocation) -> Result<PipelineConfig, Failure> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &inv.cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text).map_err(|e| Failure::config(e.to_string()))?;
    }
    for (k, v) in &inv.overrides {
        cfg.set(k, v).map_err(|e| Failure::config(e.to_string()))?;
    }
    cfg.validate().map_err(|e| Failure::config(e.to_string()))?;
    Ok(cfg)
}

fn run(args: Vec<String>) -> Result<(), Failure> {
    let inv = parse_args(args)?;
    let cfg = load_config(&inv)?;
    let cli = &inv.cli;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::config("threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::config(format!("cannot size thread pool: {e}")))?;
    }
    std::fs::create_dir_all(&cli.out).map_err(|e| Failure::from(Error::Io(e)))?;
    let ctx = stages::Context {
        cfg,
        dir: cli.out.clone(),
        emit_truth: cli.emit_truth,
    };
    stages::run(&ctx, cli.stage).map_err(Failure::from)
}

fn one_line(s: &str) -> String {
    s.replace(['\n', '\r'], " ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error kind={} exit={} message={:?}", f.kind, f.code, one_line(&f.message));
            ExitCode::from(f.code)
        }
    }
}
