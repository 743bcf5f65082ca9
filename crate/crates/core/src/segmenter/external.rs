//! Adapter for segmentation backends running as child processes.
//!
//! One request is in flight per connection. Any malformed or unexpected line
//! terminates the connection; the adapter then reports every further call as
//! a backend error so a session can be aborted cleanly.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crate::clickmap::Click;
use crate::segmenter::protocol::{decode_scores, Request, Response, PROTOCOL_VERSION};
use crate::segmenter::{BackendError, Capabilities, SegmentRequest, SegmenterBackend, SoftMask};

pub const DEFAULT_HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(30);
const STDERR_TAIL: usize = 20;

/// Scene description sent in the `init` message.
#[derive(Debug, Clone)]
pub struct ExternalInit {
    pub n_points: usize,
    /// Feature channels of the scene (3 or 6).
    pub channels: usize,
    pub epsilon: f64,
    /// Manifest path of the scene in the internal format.
    pub scene_blob: PathBuf,
}

pub struct ExternalBackend {
    command: String,
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<String>,
    stderr: Arc<Mutex<VecDeque<String>>>,
    capabilities: Capabilities,
    n_points: usize,
    timeout: Duration,
    failure: Option<String>,
}

impl std::fmt::Debug for ExternalBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalBackend")
            .field("command", &self.command)
            .field("capabilities", &self.capabilities)
            .field("failure", &self.failure)
            .finish()
    }
}

impl ExternalBackend {
    /// Spawns `command` through `sh -c` and performs the handshake. The same
    /// `timeout` bounds every later response.
    pub fn connect(
        command: &str,
        init: &ExternalInit,
        timeout: Duration,
    ) -> Result<Self, BackendError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| BackendError::Spawn(format!("{command}: {e}")))?;

        let stdout = child.stdout.take().expect("piped stdout");
        let stderr = child.stderr.take().expect("piped stderr");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines().map_while(Result::ok) {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let tail = Arc::new(Mutex::new(VecDeque::new()));
        let tail_writer = Arc::clone(&tail);
        thread::spawn(move || {
            for line in BufReader::new(stderr).lines().map_while(Result::ok) {
                let mut tail = tail_writer.lock().unwrap();
                if tail.len() == STDERR_TAIL {
                    tail.pop_front();
                }
                tail.push_back(line);
            }
        });

        let mut backend = Self {
            command: command.to_string(),
            stdin: child.stdin.take(),
            child,
            lines,
            stderr: tail,
            capabilities: Capabilities::default(),
            n_points: init.n_points,
            timeout,
            failure: None,
        };

        let hello = Request::Init {
            version: PROTOCOL_VERSION.to_string(),
            n_points: init.n_points,
            c: init.channels,
            epsilon: init.epsilon,
            scene_blob: init.scene_blob.to_string_lossy().into_owned(),
        };
        match backend.exchange(&hello) {
            Ok(Response::Ready {
                supports_adaptation,
                needs_color,
                version,
            }) => {
                if let Some(v) = version.filter(|v| v != PROTOCOL_VERSION) {
                    backend.terminate(format!("protocol version mismatch: child speaks {v}"));
                    return Err(BackendError::Handshake(format!(
                        "protocol version mismatch: expected {PROTOCOL_VERSION}, child speaks {v}"
                    )));
                }
                backend.capabilities = Capabilities {
                    supports_adaptation,
                    needs_color,
                };
                Ok(backend)
            }
            Ok(other) => {
                let msg = format!("expected ready, got {other:?}");
                backend.terminate(msg.clone());
                Err(BackendError::Handshake(msg))
            }
            Err(e) => Err(BackendError::Handshake(e.to_string())),
        }
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    fn stderr_tail(&self) -> String {
        let tail = self.stderr.lock().unwrap();
        if tail.is_empty() {
            String::new()
        } else {
            format!(
                "; stderr: {}",
                tail.iter().cloned().collect::<Vec<_>>().join(" | ")
            )
        }
    }

    /// Kills the child and poisons the connection.
    fn terminate(&mut self, reason: String) {
        self.stdin = None;
        let _ = self.child.kill();
        let _ = self.child.wait();
        self.failure.get_or_insert(reason);
    }

    fn exit_diagnostic(&mut self) -> String {
        // Give the reader threads a moment to drain before reporting.
        let deadline = Instant::now() + Duration::from_millis(500);
        let status = loop {
            match self.child.try_wait() {
                Ok(Some(status)) => break status.to_string(),
                Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(10)),
                Ok(None) => break "closed its output".to_string(),
                Err(e) => break e.to_string(),
            }
        };
        format!("{} {status}{}", self.command, self.stderr_tail())
    }

    fn exchange(&mut self, request: &Request) -> Result<Response, BackendError> {
        if let Some(reason) = &self.failure {
            return Err(BackendError::Crashed(reason.clone()));
        }
        let mut line = serde_json::to_string(request).expect("requests serialize");
        line.push('\n');
        let write = self
            .stdin
            .as_mut()
            .map(|stdin| stdin.write_all(line.as_bytes()).and_then(|_| stdin.flush()));
        if !matches!(write, Some(Ok(()))) {
            let diag = self.exit_diagnostic();
            self.terminate(diag.clone());
            return Err(BackendError::Crashed(diag));
        }
        match self.lines.recv_timeout(self.timeout) {
            Ok(reply) => match serde_json::from_str::<Response>(&reply) {
                Ok(response) => Ok(response),
                Err(e) => {
                    let msg = format!("malformed line {reply:?}: {e}");
                    self.terminate(msg.clone());
                    Err(BackendError::Protocol(msg))
                }
            },
            Err(RecvTimeoutError::Timeout) => {
                self.terminate(format!("timed out after {:?}", self.timeout));
                Err(BackendError::Timeout(self.timeout))
            }
            Err(RecvTimeoutError::Disconnected) => {
                let diag = self.exit_diagnostic();
                self.terminate(diag.clone());
                Err(BackendError::Crashed(diag))
            }
        }
    }

    fn unexpected(&mut self, expected: &str, got: Response) -> BackendError {
        let msg = format!("expected {expected}, got {got:?}");
        self.terminate(msg.clone());
        BackendError::Protocol(msg)
    }
}

impl SegmenterBackend for ExternalBackend {
    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn segment(&mut self, request: &SegmentRequest<'_>) -> Result<SoftMask, BackendError> {
        let message = Request::Segment {
            session: request.session.to_string(),
            clicks: request.clicks.to_vec(),
        };
        match self.exchange(&message)? {
            Response::Mask {
                session,
                scores_b64,
            } if session == request.session => {
                let scores = decode_scores(&scores_b64).map_err(|e| {
                    self.terminate(e.clone());
                    BackendError::Protocol(e)
                })?;
                if scores.len() != self.n_points {
                    let msg = format!(
                        "mask has {} scores for {} points",
                        scores.len(),
                        self.n_points
                    );
                    self.terminate(msg.clone());
                    return Err(BackendError::Protocol(msg));
                }
                SoftMask::new(scores).inspect_err(|e| self.terminate(e.to_string()))
            }
            other => Err(self.unexpected("mask for this session", other)),
        }
    }

    fn adapt(&mut self, session: &str, clicks: &[Click]) -> Result<(), BackendError> {
        if !self.capabilities.supports_adaptation {
            return Err(BackendError::Capability("online adaptation"));
        }
        let message = Request::Adapt {
            session: session.to_string(),
            clicks: clicks.to_vec(),
        };
        match self.exchange(&message)? {
            Response::Ack => Ok(()),
            other => Err(self.unexpected("ack", other)),
        }
    }

    fn name(&self) -> String {
        format!("cmd:{}", self.command)
    }
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        if self.failure.is_some() {
            return;
        }
        if let Some(stdin) = self.stdin.as_mut() {
            let mut line = serde_json::to_string(&Request::Shutdown).unwrap();
            line.push('\n');
            let _ = stdin.write_all(line.as_bytes()).and_then(|_| stdin.flush());
        }
        self.stdin = None;
        let deadline = Instant::now() + Duration::from_secs(2);
        while Instant::now() < deadline {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(5));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
