use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use click3d_core::harness::{
    evaluate, replay, write_reports, BackendSpec, EvalConfig, InstanceFilter, DEFAULT_BUDGETS,
    DEFAULT_MIN_POINTS,
};
use click3d_core::scene_io::{load_ply, load_scene, save_ply, save_scene, PlyEncoding};
use click3d_core::synth::{write_suite, DEFAULT_SUITE_SCENES, DEFAULT_SUITE_SEED};
use click3d_service::{ServiceConfig, SessionManager};

/// Exit status when the run finished but some scenes or sessions were lost,
/// or replayed traces failed their checksum.
const EXIT_PARTIAL: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "click3d",
    version,
    about = "Interactive 3D point-cloud instance segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run simulated sessions over a directory of scenes and report metrics.
    Eval(EvalArgs),
    /// Recompute reports from trace files without running a backend.
    Replay(ReplayArgs),
    /// Convert between PLY and the internal scene format.
    Convert(ConvertArgs),
    /// Write the synthetic regression suite.
    Synth(SynthArgs),
    /// Serve the session API over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory of scenes, or a single scene file.
    #[arg(long)]
    data: PathBuf,
    /// ref, oracle, empty or cmd:"<command line>".
    #[arg(long, default_value = "ref")]
    backend: String,
    #[arg(long, default_value_t = click3d_core::clickmap::DEFAULT_EPSILON)]
    epsilon: f64,
    /// Voxel edge length in metres for the simulated annotator.
    #[arg(long)]
    grid: Option<f64>,
    #[arg(long, default_value_t = 20)]
    max_clicks: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// all, seen or unseen.
    #[arg(long, default_value = "all")]
    filter: String,
    /// Comma-separated class names treated as seen.
    #[arg(long, value_delimiter = ',')]
    seen_classes: Vec<String>,
    /// Class map; defaults to classes.json in the data directory.
    #[arg(long)]
    classes: Option<PathBuf>,
    /// Comma-separated click budgets for the AP sweep.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BUDGETS.to_vec())]
    budgets: Vec<u32>,
    #[arg(long, default_value_t = DEFAULT_MIN_POINTS)]
    min_points: usize,
    /// Worker threads, 0 for all cores.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Per-request timeout for external backends, in seconds.
    #[arg(long, default_value_t = 60.0)]
    timeout: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    /// Trace files or directories of traces.
    #[arg(long, required = true, num_args = 1..)]
    traces: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ConvertArgs {
    /// PLY input, written out in the internal format.
    #[arg(long, conflicts_with = "scene", required_unless_present = "scene")]
    ply: Option<PathBuf>,
    /// Internal-format manifest, written out as PLY.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Write ASCII instead of binary PLY.
    #[arg(long)]
    ascii: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SUITE_SCENES)]
    scenes: usize,
    #[arg(long, default_value_t = DEFAULT_SUITE_SEED)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080", env = "CLICK3D_ADDR")]
    addr: SocketAddr,
    /// Where uploaded scenes and finalized results are kept.
    #[arg(long)]
    data_dir: PathBuf,
    /// Scene manifests to preload.
    #[arg(long)]
    scenes: Option<PathBuf>,
    /// Extra backend as name=spec, e.g. gpu=cmd:"python model.py". Repeatable.
    #[arg(long = "backend", value_parser = parse_named_backend)]
    backends: Vec<(String, BackendSpec)>,
    #[arg(long, default_value = "ref")]
    default_backend: String,
    #[arg(long)]
    chunk_points: Option<usize>,
    /// Per-request timeout for external backends, in seconds.
    #[arg(long, default_value_t = 60.0)]
    timeout: f64,
}

fn parse_named_backend(s: &str) -> Result<(String, BackendSpec), String> {
    let (name, spec) = s.split_once('=').ok_or("expected name=spec")?;
    if name.is_empty() {
        return Err("empty backend name".into());
    }
    Ok((
        name.to_string(),
        spec.parse()
            .map_err(|e: click3d_core::Error| e.to_string())?,
    ))
}

fn seconds(s: f64) -> anyhow::Result<Duration> {
    Duration::try_from_secs_f64(s).map_err(|_| anyhow::anyhow!("invalid timeout {s}"))
}

fn run_eval(args: EvalArgs) -> anyhow::Result<ExitCode> {
    let mut config = EvalConfig::new(&args.data, args.backend.parse()?);
    config.session.epsilon = args.epsilon;
    if let Some(g) = args.grid {
        config.session.grid_resolution = g;
    }
    config.session.max_clicks = args.max_clicks;
    config.seed = args.seed;
    config.filter = args.filter.parse::<InstanceFilter>()?;
    config.seen_classes = args.seen_classes;
    config.classes = args.classes;
    config.budgets = args.budgets;
    config.min_points = args.min_points;
    config.threads = args.threads;
    config.backend_timeout = seconds(args.timeout)?;
    config.out = args.out;

    let outcome = evaluate(&config)?;
    println!("{}", serde_json::to_string_pretty(&outcome.report.overall)?);
    let s = &outcome.summary;
    eprintln!(
        "{} instances from {} scenes ({} failed, {} too small, {} filtered, {} aborted)",
        s.instances_evaluated,
        s.scenes_loaded,
        s.scenes_failed.len(),
        s.instances_too_small,
        s.instances_filtered,
        s.sessions_aborted,
    );
    Ok(if s.partial {
        ExitCode::from(EXIT_PARTIAL)
    } else {
        ExitCode::SUCCESS
    })
}

fn run_replay(args: ReplayArgs) -> anyhow::Result<ExitCode> {
    let outcome = replay(&args.traces)?;
    if let Some(out) = &args.out {
        write_reports(out, &outcome.report, &outcome.sweep)?;
    }
    println!("{}", serde_json::to_string_pretty(&outcome.report.overall)?);
    for p in &outcome.checksum_mismatches {
        eprintln!("checksum mismatch: {}", p.display());
    }
    Ok(if outcome.checksum_mismatches.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_PARTIAL)
    })
}

fn run_convert(args: ConvertArgs) -> anyhow::Result<ExitCode> {
    match (&args.ply, &args.scene) {
        (Some(ply), None) => {
            let scene = load_ply(ply)?;
            let manifest = save_scene(&scene, &args.out)?;
            eprintln!(
                "wrote {} ({} points)",
                args.out.display(),
                manifest.n_points
            );
        }
        (None, Some(manifest)) => {
            let scene = load_scene(manifest)?;
            let encoding = if args.ascii {
                PlyEncoding::Ascii
            } else {
                PlyEncoding::BinaryLittleEndian
            };
            save_ply(&scene, &args.out, encoding)?;
            eprintln!("wrote {} ({} points)", args.out.display(), scene.len());
        }
        _ => bail!("give exactly one of --ply and --scene"),
    }
    Ok(ExitCode::SUCCESS)
}

fn run_synth(args: SynthArgs) -> anyhow::Result<ExitCode> {
    write_suite(&args.out, args.scenes, args.seed)?;
    eprintln!("wrote {} scenes to {}", args.scenes, args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn run_serve(args: ServeArgs) -> anyhow::Result<ExitCode> {
    let mut config = ServiceConfig::new(&args.data_dir);
    config.backends.extend(args.backends);
    config.default_backend = args.default_backend;
    if let Some(c) = args.chunk_points {
        config.chunk_points = c;
    }
    config.backend_timeout = seconds(args.timeout)?;
    let manager = Arc::new(SessionManager::new(config)?);
    for dir in [Some(args.data_dir.join("scenes")), args.scenes]
        .into_iter()
        .flatten()
    {
        if dir.is_dir() {
            let metas = manager
                .load_scene_dir(&dir)
                .with_context(|| format!("loading scenes from {}", dir.display()))?;
            tracing::info!("loaded {} scenes from {}", metas.len(), dir.display());
        }
    }

    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(args.addr)
            .await
            .with_context(|| format!("binding {}", args.addr))?;
        eprintln!("listening on http://{}/v1", listener.local_addr()?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        click3d_service::serve(manager, listener, shutdown).await?;
        anyhow::Ok(())
    })?;
    Ok(ExitCode::SUCCESS)
}

fn init_logging() {
    let filter = EnvFilter::try_from_env("CLICK3D_LOG").unwrap_or_else(|_| EnvFilter::new("warn"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn main() -> ExitCode {
    init_logging();
    // clap exits with 2 on usage errors, which would read as a partial run.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Eval(a) => run_eval(a),
        Command::Replay(a) => run_replay(a),
        Command::Convert(a) => run_convert(a),
        Command::Synth(a) => run_synth(a),
        Command::Serve(a) => run_serve(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
