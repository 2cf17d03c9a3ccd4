//! Executes rendered inputs and interprets the result.
//!
//! A run succeeds exactly when the exit code is zero and no CRASH file was
//! written. The simulated backend reproduces that contract without a QE
//! installation: it fails when its fault script says so, or when the input
//! does not parse or has error findings under static validation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::KnowledgeGraph;
use crate::llm::{bindings, ExpectedKey, ExtractionSchema, FieldType, Gateway, ModelRef, TemplateId};
use crate::protocol::{parse_input, validate_static};
use crate::retrieval::tokenize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub crash_text: Option<String>,
    pub stdout_tail: String,
    /// Wall-clock seconds.
    pub duration: f64,
}

impl RunOutcome {
    pub fn is_success(&self) -> bool {
        self.exit_code == 0 && self.crash_text.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDescriptor {
    pub routine: Option<String>,
    pub message: String,
    pub keywords: Vec<String>,
}

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("input is empty")]
    EmptyInput,
    #[error("binary `{0}` not found")]
    BinaryMissing(String),
    #[error("external runs need a working directory")]
    NoWorkdir,
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Anything that can run a `pw.x` input.
pub trait Runner: Send + Sync {
    fn execute(&self, input: &str, workdir: Option<&Path>) -> Result<RunOutcome, RunnerError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultOutcome {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultStep {
    /// 1-based invocation number.
    pub on_call: u32,
    pub outcome: FaultOutcome,
    #[serde(default)]
    pub crash_text: String,
}

/// Script failing the first `k` calls with a generic convergence crash.
pub fn fail_first(k: u32) -> Vec<FaultStep> {
    (1..=k)
        .map(|on_call| FaultStep {
            on_call,
            outcome: FaultOutcome::Fail,
            crash_text: String::new(),
        })
        .collect()
}

const BORDER: &str =
    " %%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%%";

/// CRASH file body in the layout `pw.x` 7.2 writes.
pub fn qe_crash_text(routine: &str, code: i32, message: &str) -> String {
    format!("{BORDER}\n     task #         0\n     from {routine} : error #{code:>10}\n     {message}\n{BORDER}\n")
}

fn default_injected_crash() -> String {
    qe_crash_text("c_bands", 1, "too many bands are not converged")
}

#[derive(Debug)]
pub struct SimulatedRunner {
    script: Vec<FaultStep>,
    graph: Arc<KnowledgeGraph>,
    calls: AtomicU32,
    crash_on_static_errors: bool,
}

impl SimulatedRunner {
    pub fn new(script: Vec<FaultStep>, graph: Arc<KnowledgeGraph>) -> Self {
        SimulatedRunner {
            script,
            graph,
            calls: AtomicU32::new(0),
            crash_on_static_errors: true,
        }
    }

    /// Turns off the crash-on-finding policy so only the script decides.
    pub fn script_only(mut self) -> Self {
        self.crash_on_static_errors = false;
        self
    }

    pub fn calls(&self) -> u32 {
        self.calls.load(Ordering::SeqCst)
    }

    fn crash_for_input(&self, input: &str) -> Option<String> {
        let doc = match parse_input(input) {
            Ok(d) => d,
            Err(e) => return Some(qe_crash_text("read_namelists", e.line() as i32, &e.to_string())),
        };
        let report = validate_static(&doc, &self.graph);
        let f = report.errors().next()?;
        let routine = match f.code.as_str() {
            "unknown-parameter" | "type-mismatch" | "wrong-section" | "unexpected-namelist" => "read_namelists",
            "missing-card" => "read_cards",
            _ => "iosys",
        };
        Some(qe_crash_text(routine, 1, &format!("{} ({})", f.message, f.code.as_str())))
    }
}

impl Runner for SimulatedRunner {
    fn execute(&self, input: &str, workdir: Option<&Path>) -> Result<RunOutcome, RunnerError> {
        if input.trim().is_empty() {
            return Err(RunnerError::EmptyInput);
        }
        let call = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        let scripted = self.script.iter().find(|s| s.on_call == call);
        let mut crash = match scripted {
            Some(s) if s.outcome == FaultOutcome::Fail => Some(if s.crash_text.trim().is_empty() {
                default_injected_crash()
            } else {
                s.crash_text.clone()
            }),
            _ => None,
        };
        if crash.is_none() && self.crash_on_static_errors {
            crash = self.crash_for_input(input);
        }
        if let Some(dir) = workdir {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("pw.in"), input)?;
            let crash_path = dir.join("CRASH");
            match &crash {
                Some(text) => fs::write(crash_path, text)?,
                None if crash_path.exists() => fs::remove_file(crash_path)?,
                None => {}
            }
        }
        Ok(RunOutcome {
            exit_code: if crash.is_some() { 1 } else { 0 },
            stdout_tail: if crash.is_some() {
                "simulated pw.x: stopped with an error".into()
            } else {
                "simulated pw.x: JOB DONE.".into()
            },
            crash_text: crash,
            duration: 0.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalConfig {
    pub binary: PathBuf,
    pub args: Vec<String>,
    pub timeout: Duration,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        ExternalConfig {
            binary: PathBuf::from("pw.x"),
            args: vec!["-in".into(), "pw.in".into()],
            timeout: Duration::from_secs(600),
        }
    }
}

/// Runs a real binary in the given working directory.
#[derive(Debug, Clone)]
pub struct ExternalRunner {
    pub config: ExternalConfig,
}

fn tail(text: &str, lines: usize) -> String {
    let all: Vec<&str> = text.lines().collect();
    all[all.len().saturating_sub(lines)..].join("\n")
}

impl Runner for ExternalRunner {
    fn execute(&self, input: &str, workdir: Option<&Path>) -> Result<RunOutcome, RunnerError> {
        if input.trim().is_empty() {
            return Err(RunnerError::EmptyInput);
        }
        let dir = workdir.ok_or(RunnerError::NoWorkdir)?;
        fs::create_dir_all(dir)?;
        fs::write(dir.join("pw.in"), input)?;
        let crash_path = dir.join("CRASH");
        if crash_path.exists() {
            fs::remove_file(&crash_path)?;
        }
        let started = Instant::now();
        let mut child = Command::new(&self.config.binary)
            .args(&self.config.args)
            .current_dir(dir)
            .stdin(Stdio::null())
            .stdout(fs::File::create(dir.join("pw.out"))?)
            .stderr(fs::File::create(dir.join("pw.err"))?)
            .spawn()
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => RunnerError::BinaryMissing(self.config.binary.display().to_string()),
                _ => RunnerError::Io(e),
            })?;
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break Some(status);
            }
            if started.elapsed() >= self.config.timeout {
                child.kill()?;
                child.wait()?;
                break None;
            }
            std::thread::sleep(Duration::from_millis(20));
        };
        let stdout = fs::read_to_string(dir.join("pw.out")).unwrap_or_default();
        let duration = started.elapsed().as_secs_f64();
        let Some(status) = status else {
            return Ok(RunOutcome {
                exit_code: -1,
                crash_text: Some("timeout".into()),
                stdout_tail: tail(&stdout, 20),
                duration,
            });
        };
        let crash_text = fs::read_to_string(&crash_path).ok();
        Ok(RunOutcome {
            exit_code: status.code().unwrap_or(-1),
            crash_text,
            stdout_tail: tail(&stdout, 20),
            duration,
        })
    }
}

const STOP_WORDS: [&str; 32] = [
    "the", "is", "are", "be", "in", "of", "to", "for", "and", "or", "not", "on", "at", "by", "an", "with", "from",
    "error", "task", "this", "that", "it", "as", "was", "were", "could", "should", "must", "can", "has", "have",
    "too",
];

fn routine_res() -> &'static [Regex; 2] {
    static RE: OnceLock<[Regex; 2]> = OnceLock::new();
    RE.get_or_init(|| {
        [
            Regex::new(r"Error in routine\s+([A-Za-z_][A-Za-z0-9_]*)").expect("valid regex"),
            Regex::new(r"from\s+([A-Za-z_][A-Za-z0-9_]*)\s*:\s*error").expect("valid regex"),
        ]
    })
}

fn crash_message(text: &str) -> String {
    let lines: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('%'))
        .filter(|l| !l.starts_with("task #"))
        .filter(|l| !routine_res().iter().any(|re| re.is_match(l)))
        .collect();
    if lines.is_empty() {
        text.trim().to_string()
    } else {
        lines.join(" ")
    }
}

fn push_unique(out: &mut Vec<String>, k: String) {
    if !k.is_empty() && !out.contains(&k) {
        out.push(k);
    }
}

/// Rule-based part of crash parsing: routine name, KG node names that
/// appear verbatim, and (when `with_tokens`) the message's content words.
fn rule_keywords(message: &str, routine: Option<&str>, graph: &KnowledgeGraph, with_tokens: bool) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(r) = routine {
        push_unique(&mut out, r.to_string());
    }
    for word in message.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_')) {
        if word.len() > 1 && graph.contains(word) {
            push_unique(&mut out, word.to_string());
        }
    }
    if with_tokens {
        for t in tokenize(message) {
            if !STOP_WORDS.contains(&t.as_str()) && !t.chars().all(|c| c.is_ascii_digit()) {
                push_unique(&mut out, t);
            }
        }
    }
    out
}

/// Extracts routine, message and search keywords from a CRASH text. With a
/// gateway, keywords from the error_keywords template come first; without
/// one, or when it fails or answers nothing, the message's content words
/// are used.
pub fn parse_crash(crash_text: &str, keyworder: Option<(&Gateway, &ModelRef)>, graph: &KnowledgeGraph) -> ErrorDescriptor {
    let routine = routine_res()
        .iter()
        .find_map(|re| re.captures(crash_text).map(|c| c[1].to_string()));
    let message = crash_message(crash_text);

    let llm: Vec<String> = keyworder
        .and_then(|(gateway, model)| {
            let schema = ExtractionSchema::new("error_keywords", vec![ExpectedKey::new("keywords", FieldType::TextList)]);
            gateway
                .extract(model, TemplateId::ErrorKeywords, &bindings([("error", crash_text)]), &schema)
                .ok()
        })
        .map(|x| x.text_list("keywords"))
        .unwrap_or_default();

    let mut keywords = Vec::new();
    for k in &llm {
        push_unique(&mut keywords, k.trim().to_string());
    }
    for k in rule_keywords(&message, routine.as_deref(), graph, keywords.is_empty()) {
        push_unique(&mut keywords, k);
    }
    if keywords.is_empty() && !message.is_empty() {
        push_unique(&mut keywords, message.chars().take(60).collect());
    }
    ErrorDescriptor {
        routine,
        message,
        keywords,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph() -> Arc<KnowledgeGraph> {
        Arc::new(KnowledgeGraph::shipped())
    }

    const GOOD: &str = "&CONTROL\n  calculation = 'scf'\n  outdir = './out'\n  pseudo_dir = './pseudo'\n/\n&SYSTEM\n  ibrav = 0\n  nat = 1\n  ntyp = 1\n  ecutwfc = 30.0\n/\n&ELECTRONS\n/\nATOMIC_SPECIES\n  Cu 63.546 Cu.UPF\nATOMIC_POSITIONS crystal\n  Cu 0.0 0.0 0.0\nK_POINTS automatic\n  8 8 8 0 0 0\nCELL_PARAMETERS angstrom\n  0.0 1.8 1.8\n  1.8 0.0 1.8\n  1.8 1.8 0.0\n";

    #[test]
    fn success_predicate_truth_table() {
        for (code, crash, ok) in [(0, None, true), (0, Some("x"), false), (1, None, false), (1, Some("x"), false)] {
            let o = RunOutcome {
                exit_code: code,
                crash_text: crash.map(str::to_string),
                stdout_tail: String::new(),
                duration: 0.0,
            };
            assert_eq!(o.is_success(), ok);
        }
    }

    #[test]
    fn script_fail_fail_pass() {
        let r = SimulatedRunner::new(fail_first(2), graph());
        let codes: Vec<i32> = (0..3).map(|_| r.execute(GOOD, None).unwrap().exit_code).collect();
        assert_eq!(codes, [1, 1, 0]);
        // past the script the run defaults to success
        assert!(r.execute(GOOD, None).unwrap().is_success());
    }

    #[test]
    fn static_error_becomes_crash() {
        let r = SimulatedRunner::new(vec![], graph());
        let out = r.execute(&GOOD.replace("ecutwfc", "ecutwfcc"), None).unwrap();
        assert!(!out.is_success());
        let crash = out.crash_text.unwrap();
        assert!(crash.contains("ecutwfcc") && crash.contains("from read_namelists : error #"));
        let lenient = SimulatedRunner::new(vec![], graph()).script_only();
        assert!(lenient.execute(&GOOD.replace("ecutwfc", "ecutwfcc"), None).unwrap().is_success());
    }

    #[test]
    fn workdir_gets_input_and_crash() {
        let dir = tempfile::tempdir().unwrap();
        let r = SimulatedRunner::new(fail_first(1), graph());
        r.execute(GOOD, Some(dir.path())).unwrap();
        assert!(dir.path().join("CRASH").exists());
        r.execute(GOOD, Some(dir.path())).unwrap();
        assert!(!dir.path().join("CRASH").exists());
        assert_eq!(fs::read_to_string(dir.path().join("pw.in")).unwrap(), GOOD);
    }

    #[test]
    fn routine_from_both_layouts() {
        let g = graph();
        let old = "Error in routine cell_base_init (2):\n ibrav=0: must read cell parameters";
        let d = parse_crash(old, None, &g);
        assert_eq!(d.routine.as_deref(), Some("cell_base_init"));
        assert!(d.keywords.contains(&"cell_base_init".to_string()));
        assert!(d.keywords.contains(&"ibrav".to_string()));
        let new = qe_crash_text("iosys", 1, "ecutwfc is too small for ecutrho");
        let d = parse_crash(&new, None, &g);
        assert_eq!(d.routine.as_deref(), Some("iosys"));
        assert!(d.keywords.contains(&"ecutwfc".to_string()));
        assert_eq!(d.message, "ecutwfc is too small for ecutrho");
    }

    #[test]
    fn keywords_never_empty() {
        let g = graph();
        for text in ["the of and", "x", "%%%%\n%%%%", "42"] {
            assert!(!parse_crash(text, None, &g).keywords.is_empty(), "{text}");
        }
    }

    #[cfg(unix)]
    #[test]
    fn external_runner_reads_crash_and_exit_code() {
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("fake_pw.sh");
        fs::write(&script, "#!/bin/sh\necho 'from fake : error # 1' > CRASH\nexit 3\n").unwrap();
        let r = ExternalRunner {
            config: ExternalConfig {
                binary: "/bin/sh".into(),
                args: vec![script.display().to_string()],
                timeout: Duration::from_secs(10),
            },
        };
        let out = r.execute(GOOD, Some(dir.path())).unwrap();
        assert_eq!(out.exit_code, 3);
        assert!(out.crash_text.unwrap().contains("fake"));
    }

    #[cfg(unix)]
    #[test]
    fn external_runner_timeout() {
        let dir = tempfile::tempdir().unwrap();
        let r = ExternalRunner {
            config: ExternalConfig {
                binary: "/bin/sh".into(),
                args: vec!["-c".into(), "sleep 5".into()],
                timeout: Duration::from_millis(100),
            },
        };
        let out = r.execute(GOOD, Some(dir.path())).unwrap();
        assert_eq!(out.crash_text.as_deref(), Some("timeout"));
        assert!(!out.is_success());
    }

    #[test]
    fn missing_binary() {
        let dir = tempfile::tempdir().unwrap();
        let r = ExternalRunner {
            config: ExternalConfig {
                binary: "/nonexistent/pw.x".into(),
                ..ExternalConfig::default()
            },
        };
        assert!(matches!(r.execute(GOOD, Some(dir.path())), Err(RunnerError::BinaryMissing(_))));
    }
}
