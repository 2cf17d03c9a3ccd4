use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use genius_core::aeh::{run_workflow, EventStatus, RunObserver, RunOptions, RunSnapshot, RunStore, TimelineEvent};
use genius_core::analytics::{
    aggregate_logs, as_percent_points, emit_reports, fit_decay, parse_embeddings, parse_fractions, q_only_success,
    train_som, DecayReport, ReportInputs, SomConfig,
};
use genius_core::kg::KnowledgeGraph;
use genius_core::runner::ExternalConfig;
use genius_service::backend::{BackendMode, Engine, DEFAULT_LLM_BASE_URL};
use genius_service::payload::WorkflowPayload;
use genius_service::{default_data_dir, AppState, Registry, DEFAULT_PORT};
use serde_json::json;

#[derive(Parser)]
#[command(name = "genius", version, about = "pw.x input generation with automated error handling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Simulated,
    Live,
}

#[derive(clap::Args)]
struct BackendOpts {
    #[arg(long, value_enum, default_value = "simulated")]
    backend: BackendArg,
    /// `pw.x` binary for the live backend.
    #[arg(long, default_value = "pw.x")]
    pw_binary: PathBuf,
    #[arg(long, env = "GENIUS_LLM_BASE_URL", default_value = DEFAULT_LLM_BASE_URL)]
    llm_base_url: String,
    #[arg(long, env = "GENIUS_DATA_DIR")]
    data_dir: Option<PathBuf>,
}

impl BackendOpts {
    fn engine(&self) -> Engine {
        let mut engine = Engine::simulated(Arc::new(KnowledgeGraph::shipped()));
        engine.llm_base_url = self.llm_base_url.clone();
        if let BackendArg::Live = self.backend {
            engine.mode = BackendMode::Live {
                runner: ExternalConfig {
                    binary: self.pw_binary.clone(),
                    ..ExternalConfig::default()
                },
            };
            engine.backoff = std::time::Duration::from_millis(500);
        }
        engine
    }

    fn store(&self) -> RunStore {
        RunStore::new(self.data_dir.clone().unwrap_or_else(default_data_dir))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one workflow in this process and print its result.
    Run {
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value = "model-1,model-2,referee", value_delimiter = ',')]
        hierarchy: Vec<String>,
        /// Provider id; anything but `scripted` needs GENIUS_API_KEY_<PROVIDER>.
        #[arg(long, default_value = "scripted")]
        provider: String,
        #[arg(long)]
        retries: Option<u32>,
        /// Simulated backend: fail the first K runs.
        #[arg(long)]
        fail_first: Option<u32>,
        /// Simulated backend: use a shipped scenario's fault script.
        #[arg(long)]
        scenario: Option<String>,
        #[command(flatten)]
        backend: BackendOpts,
    },
    /// Show the stored state of a run.
    Status {
        workflow_id: String,
        #[arg(long, env = "GENIUS_DATA_DIR")]
        data_dir: Option<PathBuf>,
    },
    /// Print a run's timeline.
    Timeline {
        workflow_id: String,
        /// Draw one row per state with a mark per event.
        #[arg(long)]
        plot: bool,
        #[arg(long, env = "GENIUS_DATA_DIR")]
        data_dir: Option<PathBuf>,
    },
    /// Success statistics, decay fit, SOM and report files.
    Analyze {
        /// Directory of run folders with result.json files.
        #[arg(long)]
        logs: Option<PathBuf>,
        /// One unit vector per line, comma separated.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// `attempt,fraction` CSV to fit instead of the logs' histogram.
        #[arg(long)]
        fractions: Option<PathBuf>,
        #[arg(long, default_value = "reports")]
        out: PathBuf,
        #[arg(long, default_value_t = 50_000)]
        som_iterations: usize,
        #[arg(long, default_value_t = SomConfig::default().seed)]
        seed: u64,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long, env = "GENIUS_PORT", default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "0.0.0.0")]
        host: std::net::IpAddr,
        #[command(flatten)]
        backend: BackendOpts,
    },
}

struct Printer;

impl RunObserver for Printer {
    fn on_event(&self, _: &RunSnapshot, e: &TimelineEvent) {
        eprintln!("{} {:<28} {:<7} {}", e.timestamp.format("%H:%M:%S%.3f"), e.state, status_name(e.status), e.detail);
    }
}

fn status_name(s: EventStatus) -> &'static str {
    match s {
        EventStatus::Pending => "PENDING",
        EventStatus::Success => "SUCCESS",
        EventStatus::Retry => "RETRY",
        EventStatus::Error => "ERROR",
    }
}

fn mark(s: EventStatus) -> char {
    match s {
        EventStatus::Pending => 'o',
        EventStatus::Success => '+',
        EventStatus::Retry => 'r',
        EventStatus::Error => 'x',
    }
}

fn plot(events: &[TimelineEvent]) -> String {
    let mut rows: Vec<(String, String)> = Vec::new();
    for (i, e) in events.iter().enumerate() {
        let name = e.state.to_string();
        let row = match rows.iter().position(|(n, _)| *n == name) {
            Some(p) => p,
            None => {
                rows.push((name, String::new()));
                rows.len() - 1
            }
        };
        let line = &mut rows[row].1;
        while line.len() < i {
            line.push(' ');
        }
        line.push(mark(e.status));
    }
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
    let mut out = String::from("o PENDING  + SUCCESS  r RETRY  x ERROR\n");
    for (name, line) in rows {
        out.push_str(&format!("{name:>width$} |{line}\n"));
    }
    out
}

fn run(cmd: Command) -> Result<(), String> {
    match cmd {
        Command::Run { prompt, hierarchy, provider, retries, fail_first, scenario, backend } => {
            let mut project = serde_json::Map::new();
            if let Some(r) = retries {
                project.insert("retries_per_model".into(), json!(r));
            }
            if let Some(k) = fail_first {
                project.insert("fail_first".into(), json!(k));
            }
            if let Some(s) = scenario {
                project.insert("scenario".into(), json!(s));
            }
            let body = json!({
                "calculation_prompt": prompt,
                "gen_model_hierarchy": hierarchy,
                "target_api": provider,
                "project_config": project,
            });
            let payload = WorkflowPayload::from_json(body.to_string().as_bytes()).map_err(|errs| {
                errs.iter().map(|e| format!("{}: {}", e.field, e.message)).collect::<Vec<_>>().join("\n")
            })?;
            let engine = backend.engine();
            let store = Arc::new(backend.store());
            let backends = engine.backends_for(&payload).map_err(|e| match e {
                genius_service::backend::SetupError::Invalid(errs) => {
                    errs.iter().map(|e| format!("{}: {}", e.field, e.message)).collect::<Vec<_>>().join("\n")
                }
                other => other.to_string(),
            })?;
            let mut options = RunOptions::new(payload.roles());
            options.workdir = Some(store.work_dir(&options.workflow_id));
            options.observers = vec![store.clone(), Arc::new(Printer)];
            let id = options.workflow_id.clone();
            run_workflow(&payload.calculation_prompt, &payload.hierarchy(), &backends, options).map_err(|e| e.to_string())?;
            let doc = store.load_result(&id).map_err(|e| e.to_string())?;
            println!("{}", serde_json::to_string_pretty(&doc).expect("serializes"));
            if let Some(input) = store.load_input(&id) {
                eprintln!("input written to {}", store.run_dir(&id).join("pw.in").display());
                println!("{input}");
            }
            Ok(())
        }
        Command::Status { workflow_id, data_dir } => {
            let store = RunStore::new(data_dir.unwrap_or_else(default_data_dir));
            if let Ok(doc) = store.load_result(&workflow_id) {
                println!("{}", serde_json::to_string_pretty(&doc).expect("serializes"));
                return Ok(());
            }
            let events = store.load_timeline(&workflow_id).map_err(|e| e.to_string())?;
            let last = events.last().ok_or("timeline is empty")?;
            println!("{}", json!({"workflow_id": workflow_id, "state": last.state, "done": false}));
            Ok(())
        }
        Command::Timeline { workflow_id, plot: draw, data_dir } => {
            let store = RunStore::new(data_dir.unwrap_or_else(default_data_dir));
            let events = store.load_timeline(&workflow_id).map_err(|e| e.to_string())?;
            if draw {
                print!("{}", plot(&events));
            } else {
                for e in &events {
                    println!("{} {:<28} {:<7} {}", e.timestamp.to_rfc3339(), e.state, status_name(e.status), e.detail);
                }
            }
            Ok(())
        }
        Command::Analyze { logs, embeddings, fractions, out, som_iterations, seed } => {
            analyze(logs.as_deref(), embeddings.as_deref(), fractions.as_deref(), &out, som_iterations, seed)
        }
        Command::Serve { port, host, backend } => {
            let registry = Registry::new(backend.engine(), backend.store());
            let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
            rt.block_on(genius_service::serve(AppState::new(registry), SocketAddr::new(host, port)))
                .map_err(|e| e.to_string())
        }
    }
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn analyze(
    logs: Option<&Path>,
    embeddings: Option<&Path>,
    fractions: Option<&Path>,
    out: &Path,
    som_iterations: usize,
    seed: u64,
) -> Result<(), String> {
    let summary = match logs {
        Some(dir) => {
            let (docs, unreadable) = RunStore::new(dir).load_all_results().map_err(|e| e.to_string())?;
            let raw: Vec<_> = docs.iter().map(|d| serde_json::to_value(d).expect("serializes")).collect();
            let s = aggregate_logs(&raw).map_err(|e| e.to_string())?;
            let st = &s.stats;
            println!("runs {}  successes {}  zero-shot {}  unreadable {}", st.total, st.successes, st.zero_shot_successes, unreadable + s.skipped);
            println!("P(S) {:.4}  P(ZS) {:.4}  ZS share of successes {}", st.p_s, st.p_zs, fmt_opt(st.zero_shot_share_of_successes()));
            println!("P(AEH | not ZS) {}", fmt_opt(st.p_aeh_given_not_zs));
            for g in [1.0, 1.5, 2.0] {
                let q = q_only_success(st, g, g).map_err(|e| e.to_string())?;
                println!("q-only success at gamma {g}: {q:.4}");
            }
            Some(s)
        }
        None => None,
    };
    let points = match (fractions, &summary) {
        (Some(path), _) => Some(as_percent_points(&parse_fractions(&read(path)?).map_err(|e| e.to_string())?)),
        (None, Some(s)) => Some(as_percent_points(&s.success_fractions())),
        (None, None) => None,
    };
    let decay = match points {
        Some(p) if p.len() >= 4 => {
            let fit = fit_decay(&p).map_err(|e| e.to_string())?;
            println!(
                "decay fit: A {:.3} b {:.4} C {:.3} RMSE {:.3} (+/- {:.3}, {:.4}, {:.3})",
                fit.a, fit.b, fit.c, fit.rmse, fit.uncertainties[0], fit.uncertainties[1], fit.uncertainties[2]
            );
            Some(DecayReport::new(p, fit))
        }
        Some(p) => {
            eprintln!("decay fit skipped: {} attempt bins, need 4", p.len());
            None
        }
        None => None,
    };
    let som = match embeddings {
        Some(path) => {
            let data = parse_embeddings(&read(path)?).map_err(|e| e.to_string())?;
            let cfg = SomConfig { iterations: som_iterations, seed, ..SomConfig::default() };
            let model = train_som(&data, &cfg).map_err(|e| e.to_string())?;
            println!("SOM: QE {:.4}  TE {:.4}", model.quantization_error, model.topological_error);
            Some(model)
        }
        None => None,
    };
    let files = emit_reports(ReportInputs { som: som.as_ref(), decay: decay.as_ref(), logs: summary.as_ref() }, out)
        .map_err(|e| e.to_string())?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
