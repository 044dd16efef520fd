//! `onesug`: runs pipeline stages, evaluation, the HTTP service and one-shot
//! suggestions from a single JSON config.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use onesug_core::config::{RunConfig, Stage};
use onesug_core::pipeline::{eval_stage, run_stage};
use onesug_core::CoreError;
use onesug_serve::{ServeError, Service};
use thiserror::Error;

/// Settings used when `--config` is not given.
pub const DESK_CONFIG: &str = include_str!("../../../configs/desk.json");

#[derive(Debug, Parser)]
#[command(name = "onesug", version, about = "Generative query suggestion: train, evaluate and serve")]
pub struct Cli {
    /// JSON run configuration. Defaults to the bundled desk-scale config.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Artifact directory, overriding the config's `workdir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub workdir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic catalog, users and interaction logs.
    GenCorpus,
    /// Train the contrastive prefix/query encoder.
    TrainAlign,
    /// Embed indexable queries and collect per-prefix co-occurring queries.
    BuildIndex,
    /// Train the residual quantizer and assign semantic IDs to the index.
    TrainRqvae,
    /// Supervised training of the generator.
    TrainSft,
    /// Preference alignment of the generator, merging logged feedback.
    TrainDpo,
    /// Score the baseline and generator variants on held-out page views.
    Eval {
        /// Exit with status 4 when an ordering check fails.
        #[arg(long)]
        strict: bool,
    },
    /// Serve /suggest, /feedback and /healthz.
    Serve {
        /// Listen address, overriding `serve.addr`.
        #[arg(long)]
        addr: Option<String>,
    },
    /// Print suggestions for one prefix as `query<TAB>score` lines.
    Suggest {
        #[arg(long)]
        prefix: String,
        #[arg(long, default_value = "")]
        user: String,
        /// Number of suggestions, defaults to `serve.k`.
        #[arg(long)]
        k: Option<usize>,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Serve(#[from] ServeError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn core(&self) -> Option<&CoreError> {
        match self {
            CliError::Core(e) | CliError::Serve(ServeError::Core(e)) => Some(e),
            _ => None,
        }
    }

    /// 2 config, 3 missing or stale artifact, 4 anything else.
    pub fn exit_code(&self) -> i32 {
        match self.core() {
            Some(CoreError::Config(_)) => 2,
            Some(CoreError::MissingArtifact { .. } | CoreError::StaleArtifact { .. }) => 3,
            _ => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self.core() {
            Some(CoreError::Config(_)) => "config",
            Some(CoreError::MissingArtifact { .. }) => "missing-artifact",
            Some(CoreError::StaleArtifact { .. }) => "stale-artifact",
            _ => "runtime",
        }
    }

    /// One JSON object on one line.
    pub fn structured(&self) -> String {
        let mut v = serde_json::json!({
            "error": self.kind(),
            "code": self.exit_code(),
            "message": self.to_string(),
        });
        if let Some(CoreError::MissingArtifact { stage, .. } | CoreError::StaleArtifact { stage, .. }) = self.core() {
            v["run_first"] = serde_json::json!(stage);
        }
        v.to_string()
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::from_json(DESK_CONFIG)?,
    };
    if let Some(dir) = &cli.workdir {
        cfg.workdir = dir.clone();
    }
    Ok(cfg)
}

fn stage_of(cmd: &Command) -> Option<Stage> {
    Some(match cmd {
        Command::GenCorpus => Stage::Corpus,
        Command::TrainAlign => Stage::Align,
        Command::BuildIndex => Stage::Index,
        Command::TrainRqvae => Stage::Rqvae,
        Command::TrainSft => Stage::Sft,
        Command::TrainDpo => Stage::Dpo,
        _ => return None,
    })
}

fn io(e: std::io::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    if let Some(stage) = stage_of(&cli.command) {
        let meta = run_stage(&cfg, stage)?;
        writeln!(
            out,
            "{}",
            serde_json::json!({ "stage": meta.stage, "config_hash": meta.config_hash, "stats": meta.stats })
        )
        .map_err(io)?;
        return Ok(());
    }
    match &cli.command {
        Command::Eval { strict } => {
            let (_, report) = eval_stage(&cfg)?;
            write!(out, "{}", report.to_table()).map_err(io)?;
            if *strict && !report.all_passed() {
                return Err(CliError::Runtime("ordering checks failed".into()));
            }
        }
        Command::Suggest { prefix, user, k } => {
            let service = Service::open(&cfg)?;
            for s in service.suggest(user, prefix, *k)?.suggestions {
                writeln!(out, "{}\t{:.6}", s.query, s.score).map_err(io)?;
            }
        }
        Command::Serve { addr } => {
            let service = Arc::new(Service::open(&cfg)?);
            let addr = addr.clone().unwrap_or_else(|| cfg.serve.addr.clone());
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(io)?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&addr).await.map_err(io)?;
                let local = listener.local_addr().map_err(io)?;
                eprintln!("listening on http://{local}");
                onesug_serve::serve_until(listener, service, async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await
                .map_err(io)
            })?;
        }
        _ => unreachable!("stage commands handled above"),
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Failures are reported on `err` as one JSON line.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here too, with exit code 0.
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return 2;
            }
            let _ = write!(out, "{e}");
            return 0;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", e.structured());
            e.exit_code()
        }
    }
}
