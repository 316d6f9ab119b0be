//! Reasoning judges: the built-in template-inversion judge and external
//! judges spoken to over newline-delimited JSON.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::datagen::{template, Outcome, NUM_MODES, PREFIXES};
use crate::error::{Error, Result};

use super::metrics::token_f1;

pub const JUDGE_TIMEOUT: Duration = Duration::from_secs(10);

/// Token F1 a candidate needs against its nearest template for a mode match
/// to count as fully correct.
pub const MATCH_F1: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub id: String,
    pub candidate: Vec<String>,
    pub reference: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub id: String,
    pub score: f64,
}

pub trait Judge {
    /// Score in `[0, 1]`.
    fn score(&mut self, req: &JudgeRequest) -> Result<f64>;
}

/// Maps reasoning back onto the closed set of outcomes.
#[derive(Debug, Clone, Default)]
pub struct TemplateJudge;

fn outcomes() -> impl Iterator<Item = Outcome> {
    std::iter::once(Outcome::Success).chain((0..NUM_MODES).map(Outcome::Failure))
}

impl TemplateJudge {
    /// Outcome whose template has the highest token F1 with `tokens`
    /// (ties to the earliest: success, then modes in order), and that F1.
    pub fn invert<S: AsRef<str>>(tokens: &[S]) -> (Outcome, f64) {
        let toks: Vec<&str> = tokens
            .iter()
            .map(AsRef::as_ref)
            .filter(|t| !PREFIXES.iter().any(|p| p.contains(t)))
            .collect();
        let mut best = (Outcome::Success, -1.0);
        for o in outcomes() {
            let f = token_f1(&toks, template(o));
            if f > best.1 {
                best = (o, f);
            }
        }
        best
    }

    pub fn judge<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> f64 {
        if candidate.is_empty() {
            return 0.0;
        }
        let (co, cf) = Self::invert(candidate);
        let (ro, _) = Self::invert(reference);
        if co == ro && cf >= MATCH_F1 {
            1.0
        } else {
            let c: Vec<&str> = candidate.iter().map(AsRef::as_ref).collect();
            let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
            token_f1(&c, &r)
        }
    }
}

impl Judge for TemplateJudge {
    fn score(&mut self, req: &JudgeRequest) -> Result<f64> {
        Ok(Self::judge(&req.candidate, &req.reference))
    }
}

struct Running {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

/// External judge process. Requests go to its standard input one JSON
/// object per line; each must be answered within [`JUDGE_TIMEOUT`]. A
/// failed exchange kills the process, which is restarted on the next
/// request.
pub struct ProcessJudge {
    command: String,
    timeout: Duration,
    running: Option<Running>,
}

impl ProcessJudge {
    pub fn new(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
            timeout: JUDGE_TIMEOUT,
            running: None,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn spawn(&self) -> Result<Running> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::Judge(format!("cannot start `{}`: {e}", self.command)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Running {
            child,
            stdin,
            lines: rx,
        })
    }

    fn exchange(&mut self, req: &JudgeRequest) -> Result<f64> {
        if self.running.is_none() {
            self.running = Some(self.spawn()?);
        }
        let run = self.running.as_mut().expect("spawned");
        let mut line = serde_json::to_string(req)?;
        line.push('\n');
        run.stdin
            .write_all(line.as_bytes())
            .and_then(|_| run.stdin.flush())
            .map_err(|e| Error::Judge(format!("write: {e}")))?;
        let reply = match run.lines.recv_timeout(self.timeout) {
            Ok(Ok(l)) => l,
            Ok(Err(e)) => return Err(Error::Judge(format!("read: {e}"))),
            Err(mpsc::RecvTimeoutError::Timeout) => {
                return Err(Error::Judge(format!("no reply within {:?}", self.timeout)))
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => return Err(Error::Judge("judge exited".into())),
        };
        let resp: JudgeResponse =
            serde_json::from_str(&reply).map_err(|e| Error::Judge(format!("bad reply `{reply}`: {e}")))?;
        if resp.id != req.id {
            return Err(Error::Judge(format!("reply for `{}` while waiting for `{}`", resp.id, req.id)));
        }
        if !resp.score.is_finite() {
            return Err(Error::Judge(format!("non-finite score for `{}`", req.id)));
        }
        Ok(resp.score.clamp(0.0, 1.0))
    }

    fn kill(&mut self) {
        if let Some(mut r) = self.running.take() {
            let _ = r.child.kill();
            let _ = r.child.wait();
        }
    }
}

impl Judge for ProcessJudge {
    fn score(&mut self, req: &JudgeRequest) -> Result<f64> {
        let out = self.exchange(req);
        if out.is_err() {
            self.kill();
        }
        out
    }
}

impl Drop for ProcessJudge {
    fn drop(&mut self) {
        self.kill();
    }
}
