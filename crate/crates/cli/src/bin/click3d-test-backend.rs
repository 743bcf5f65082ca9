//! Scriptable stand-in for an external segmentation backend, used to test the
//! wire protocol end to end.
//!
//! Modes:
//! - `echo`: the mask is the positive click channel.
//! - `adaptive`: like `echo`, but advertises adaptation and remembers the
//!   labels of clicked points across `adapt` messages.
//! - `crash`: answers `--crash-after` segment requests, then dies.
//! - `bad-version`: announces a different protocol version.
//! - `garbage`: answers the handshake with a line that is not JSON.
//! - `hang`: completes the handshake and never answers again.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, ValueEnum};

use click3d_core::clickmap::{encode_clicks, Click, Polarity};
use click3d_core::scene_io::{load_scene, PointCloud};
use click3d_core::segmenter::protocol::{encode_scores, Request, Response, PROTOCOL_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Echo,
    Adaptive,
    Crash,
    BadVersion,
    Garbage,
    Hang,
}

#[derive(Debug, Parser)]
struct Args {
    #[arg(long, value_enum, default_value = "echo")]
    mode: Mode,
    /// Segment requests answered before a `crash` backend dies.
    #[arg(long, default_value_t = 0)]
    crash_after: usize,
    /// Append the type of every received message to this file.
    #[arg(long)]
    log: Option<PathBuf>,
}

struct State {
    cloud: PointCloud,
    epsilon: f64,
    /// Point labels learned through `adapt`.
    memory: BTreeMap<usize, bool>,
}

impl State {
    fn segment(&self, clicks: &[Click]) -> anyhow::Result<Vec<f32>> {
        let channels = encode_clicks(&self.cloud, clicks, self.epsilon)?;
        let mut scores: Vec<f32> = channels
            .t_p
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        for (&i, &label) in &self.memory {
            scores[i] = if label { 1.0 } else { 0.0 };
        }
        Ok(scores)
    }
}

fn send(out: &mut impl Write, response: &Response) -> anyhow::Result<()> {
    writeln!(out, "{}", serde_json::to_string(response)?)?;
    out.flush()?;
    Ok(())
}

fn run(args: &Args) -> anyhow::Result<()> {
    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    let lines = stdin.lock().lines();
    let mut state: Option<State> = None;
    let mut segments = 0usize;

    for line in lines {
        let request: Request = serde_json::from_str(&line?).context("unreadable request")?;
        if let Some(path) = &args.log {
            let kind = match &request {
                Request::Init { .. } => "init",
                Request::Segment { .. } => "segment",
                Request::Adapt { .. } => "adapt",
                Request::Shutdown => "shutdown",
            };
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{kind}")?;
        }
        match request {
            Request::Init {
                version,
                n_points,
                epsilon,
                scene_blob,
                ..
            } => {
                if version != PROTOCOL_VERSION {
                    bail!("unsupported protocol {version}");
                }
                let scene = load_scene(Path::new(&scene_blob))?;
                if scene.len() != n_points {
                    bail!("scene has {} points, init says {n_points}", scene.len());
                }
                state = Some(State {
                    cloud: scene.cloud,
                    epsilon,
                    memory: BTreeMap::new(),
                });
                match args.mode {
                    Mode::Garbage => {
                        writeln!(out, "hello there")?;
                        out.flush()?;
                    }
                    Mode::BadVersion => send(
                        &mut out,
                        &Response::Ready {
                            supports_adaptation: false,
                            needs_color: false,
                            version: Some("click3d/0".into()),
                        },
                    )?,
                    _ => send(
                        &mut out,
                        &Response::Ready {
                            supports_adaptation: args.mode == Mode::Adaptive,
                            needs_color: false,
                            version: Some(PROTOCOL_VERSION.into()),
                        },
                    )?,
                }
            }
            Request::Segment { session, clicks } => {
                let state = state.as_ref().context("segment before init")?;
                if args.mode == Mode::Hang {
                    std::thread::park();
                }
                if args.mode == Mode::Crash && segments >= args.crash_after {
                    eprintln!("test backend: injected crash after {segments} segments");
                    std::process::exit(3);
                }
                segments += 1;
                let scores = state.segment(&clicks)?;
                send(
                    &mut out,
                    &Response::Mask {
                        session,
                        scores_b64: encode_scores(&scores),
                    },
                )?;
            }
            Request::Adapt { clicks, .. } => {
                let state = state.as_mut().context("adapt before init")?;
                for c in &clicks {
                    if let Some(i) = c.point_index {
                        state.memory.insert(i, c.polarity == Polarity::Positive);
                    }
                }
                send(&mut out, &Response::Ack)?;
            }
            Request::Shutdown => return Ok(()),
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("test backend: {e:#}");
            ExitCode::FAILURE
        }
    }
}
