use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Args, Parser, Subcommand};
use handlift_cli::{cmd_ablate, cmd_annotate, cmd_evaluate, cmd_serve, cmd_synth, load_config, RunConfig};
use handlift_core::io_formats::report_to_string;

/// Multi-view hand keypoint lifting, clustering and tracking.
#[derive(Parser)]
#[command(name = "handlift", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; command-line settings take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or report file for `evaluate`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// DM or TM.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// NS, CD or Repr.
    #[arg(long, global = true)]
    criterion: Option<String>,
    /// Named detection source from the manifest.
    #[arg(long, global = true)]
    source: Option<String>,
    /// FIXED or EXACT number formatting in written annotations.
    #[arg(long, global = true)]
    precision: Option<String>,
    /// Any setting as a dotted key, e.g. `--set search.delta_default=0.06`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Log level for stderr (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    log: String,
}

#[derive(Subcommand)]
enum Command {
    /// Annotate a sequence and write annotations plus a summary.
    Annotate { manifest: Option<PathBuf> },
    /// Score predicted annotations against ground truth.
    Evaluate { pred: PathBuf, gt: PathBuf },
    /// Render a synthetic dataset directory.
    Synth,
    /// Run all six mode and criterion combinations against ground truth.
    Ablate { manifest: Option<PathBuf> },
    /// Serve annotation sessions over HTTP and WebSocket.
    Serve {
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

fn settings(common: &Common, manifest: Option<&PathBuf>) -> Result<Vec<(String, String)>> {
    let quoted = |s: &str| serde_json::Value::String(s.to_owned()).to_string();
    let mut out = Vec::new();
    if let Some(m) = manifest {
        out.push(("manifest".into(), quoted(&m.to_string_lossy())));
    }
    if let Some(s) = common.seed {
        out.push(("seed".into(), s.to_string()));
    }
    if let Some(o) = &common.out {
        out.push(("out".into(), quoted(&o.to_string_lossy())));
    }
    if let Some(m) = &common.mode {
        out.push(("search.mode".into(), quoted(&m.to_uppercase())));
    }
    if let Some(c) = &common.criterion {
        out.push(("search.criterion".into(), quoted(&c.to_uppercase())));
    }
    if let Some(s) = &common.source {
        out.push(("source".into(), quoted(s)));
    }
    if let Some(p) = &common.precision {
        out.push(("precision".into(), quoted(&p.to_uppercase())));
    }
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
        out.push((k.trim().to_owned(), v.to_owned()));
    }
    Ok(out)
}

/// Writes results to stdout. A reader that went away early (`| head`) is not
/// an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let manifest = match &cli.command {
        Command::Annotate { manifest } | Command::Ablate { manifest } | Command::Serve { manifest, .. } => manifest.as_ref(),
        _ => None,
    };
    let cfg: RunConfig = load_config(cli.common.config.as_deref(), &settings(&cli.common, manifest)?)?;
    match cli.command {
        Command::Annotate { .. } => {
            let out = cmd_annotate(&cfg)?;
            log::info!("wrote {}", out.annotations.display());
            emit(&(serde_json::to_string_pretty(&out.summary)? + "\n"))?;
        }
        Command::Evaluate { pred, gt } => {
            let report = cmd_evaluate(&pred, &gt, &cfg)?;
            emit(&report_to_string(&report))?;
        }
        Command::Synth => {
            let manifest = cmd_synth(&cfg)?;
            emit(&format!("{}\n", manifest.display()))?;
        }
        Command::Ablate { .. } => {
            let table = cmd_ablate(&cfg)?;
            emit(&table.text)?;
            log::info!("csv table:\n{}", table.csv);
        }
        Command::Serve { port, host, .. } => {
            cmd_serve(&cfg, &format!("{host}:{port}"), |addr, session| {
                log::info!("listening on http://{addr}");
                let session = session.map(|s| format!(" {s}")).unwrap_or_default();
                let _ = emit(&format!("listening {addr}{session}\n"));
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.common.log)
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
