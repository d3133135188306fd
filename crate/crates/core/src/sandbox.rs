//! Host side of the code sandbox: one JSON request line on the child's stdin,
//! one JSON response line back on its stdout.

use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Extra wall-clock time the host grants beyond the request timeout.
pub const HOST_GRACE: Duration = Duration::from_secs(2);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxConfig {
    /// Runner command line, e.g. `["python3", "-m", "sandbox_runner"]`.
    pub command: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_max_output")]
    pub max_output_bytes: usize,
}

fn default_timeout() -> f64 {
    10.0
}

fn default_max_output() -> usize {
    65_536
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxRequest {
    pub code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tests: Option<Vec<String>>,
    pub timeout_s: f64,
    pub max_output_bytes: usize,
}

impl SandboxRequest {
    pub fn validate(&self) -> Result<(), SandboxError> {
        if self.code.trim().is_empty() {
            return Err(SandboxError::InvalidRequest("code is empty".into()));
        }
        if !(self.timeout_s > 0.0 && self.timeout_s <= 60.0) {
            return Err(SandboxError::InvalidRequest(format!("timeout_s {} outside (0, 60]", self.timeout_s)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SandboxStatus {
    Pass,
    Fail,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxResponse {
    pub status: SandboxStatus,
    #[serde(default)]
    pub result: Option<String>,
    #[serde(default)]
    pub stderr: String,
    #[serde(default)]
    pub duration_ms: u64,
}

#[derive(Debug, Error, PartialEq)]
pub enum SandboxError {
    #[error("invalid sandbox request: {0}")]
    InvalidRequest(String),
    #[error("sandbox command is empty")]
    NoCommand,
    #[error("could not start sandbox: {0}")]
    Spawn(String),
    #[error("sandbox exceeded {0:?} without answering")]
    HostTimeout(Duration),
    #[error("sandbox protocol violation: {0}")]
    Protocol(String),
}

/// Runs one evaluation in a fresh runner process. The child is killed if it
/// outlives the request timeout plus [`HOST_GRACE`].
pub fn evaluate(cfg: &SandboxConfig, request: &SandboxRequest) -> Result<SandboxResponse, SandboxError> {
    request.validate()?;
    let (program, args) = cfg.command.split_first().ok_or(SandboxError::NoCommand)?;
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| SandboxError::Spawn(e.to_string()))?;

    let mut line = serde_json::to_string(request).expect("request serializes");
    line.push('\n');
    let mut stdin = child.stdin.take().expect("piped stdin");
    // A runner that exits early closes its stdin; the response decides.
    let _ = stdin.write_all(line.as_bytes());
    drop(stdin);

    let mut stdout = child.stdout.take().expect("piped stdout");
    let reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stdout.read_to_end(&mut buf);
        buf
    });

    let limit = Duration::from_secs_f64(request.timeout_s) + HOST_GRACE;
    let started = Instant::now();
    loop {
        match child.try_wait() {
            Ok(Some(_)) => break,
            Ok(None) if started.elapsed() >= limit => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(SandboxError::HostTimeout(limit));
            }
            Ok(None) => thread::sleep(Duration::from_millis(10)),
            Err(e) => return Err(SandboxError::Spawn(e.to_string())),
        }
    }
    let out = reader.join().unwrap_or_default();
    let text = String::from_utf8_lossy(&out);
    let first = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| SandboxError::Protocol("no response line".into()))?;
    serde_json::from_str(first).map_err(|e| SandboxError::Protocol(e.to_string()))
}

/// The program to evaluate: the last ```python fenced block, else the last
/// fenced block of any language, else the whole answer.
pub fn extract_code(answer: &str) -> String {
    let mut blocks: Vec<(String, String)> = Vec::new();
    let mut current: Option<(String, Vec<&str>)> = None;
    for line in answer.lines() {
        let trimmed = line.trim_start();
        match (&mut current, trimmed.strip_prefix("```")) {
            (None, Some(lang)) => current = Some((lang.trim().to_lowercase(), Vec::new())),
            (Some(_), Some(_)) => {
                let (lang, body) = current.take().expect("open block");
                blocks.push((lang, body.join("\n")));
            }
            (Some((_, body)), None) => body.push(line),
            (None, None) => {}
        }
    }
    blocks
        .iter()
        .rev()
        .find(|(lang, _)| lang == "python" || lang == "py")
        .or_else(|| blocks.last())
        .map(|(_, body)| body.clone())
        .unwrap_or_else(|| answer.trim().to_string())
}
