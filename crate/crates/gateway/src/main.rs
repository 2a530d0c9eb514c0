//! `gateway` command line: serve the HTTP gateway, check a single
//! prompt, or evaluate a corpus.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use gateway::ae_store::spawn_writer;
use gateway::config::{load_config, GatewayConfig};
use gateway::driver::{check_prompt, GatewayState};
use gateway::eval::{load_corpus, render_json, render_table, run_eval, EvalOptions};
use gateway::service::serve;
use gateway_core::VerdictKind;

const EXIT_OK: u8 = 0;
const EXIT_ERROR: u8 = 1;
const EXIT_HARMFUL: u8 = 2;

#[derive(Parser)]
#[command(
    name = "gateway",
    version,
    about = "Streaming LLM gateway that races a safety checker against the target and gates output on the verdict"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP gateway.
    Serve {
        /// Path to the gateway JSON config.
        #[arg(long)]
        config: PathBuf,
    },
    /// Ask the checker about one prompt and print the verdict as JSON.
    /// Exits 0 for benign, 2 for harmful.
    Check {
        #[arg(long)]
        config: PathBuf,
        /// The prompt to inspect.
        #[arg(long)]
        prompt: String,
    },
    /// Run a corpus through the gate and report per-category accuracy.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Path to a JSONL corpus file.
        #[arg(long)]
        corpus: PathBuf,
        /// Full passes over the corpus.
        #[arg(long, default_value_t = 1)]
        repetitions: u32,
        /// Concurrent in-flight cases.
        #[arg(long, default_value_t = 4)]
        parallel: usize,
        /// Emit the report as JSON (default is the table).
        #[arg(long, conflicts_with = "table")]
        json: bool,
        /// Emit the human-readable table (the default).
        #[arg(long)]
        table: bool,
    },
}

fn init_tracing(log_level: &str) {
    use tracing_subscriber::EnvFilter;
    // RUST_LOG wins over the config so operators can crank verbosity
    // without editing files. Logs go to stderr; stdout is for output.
    let filter = EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| EnvFilter::new(log_level));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn load(config_path: &Path) -> Result<GatewayConfig, u8> {
    match load_config(config_path) {
        Ok(config) => Ok(config),
        Err(error) => {
            eprintln!("config error: {error}");
            Err(EXIT_ERROR)
        }
    }
}

fn build_state(config: &GatewayConfig) -> Result<GatewayState, u8> {
    match GatewayState::from_config(config) {
        Ok(state) => Ok(state),
        Err(error) => {
            eprintln!("startup error: {error}");
            Err(EXIT_ERROR)
        }
    }
}

async fn run() -> u8 {
    let cli = Cli::parse();
    match cli.command {
        Command::Serve { config } => {
            let config = match load(&config) {
                Ok(config) => config,
                Err(code) => return code,
            };
            init_tracing(&config.log_level);
            match serve(config).await {
                Ok(()) => EXIT_OK,
                Err(error) => {
                    eprintln!("startup error: {error}");
                    EXIT_ERROR
                }
            }
        }
        Command::Check { config, prompt } => {
            let config = match load(&config) {
                Ok(config) => config,
                Err(code) => return code,
            };
            init_tracing(&config.log_level);
            let state = match build_state(&config) {
                Ok(state) => state,
                Err(code) => return code,
            };
            match check_prompt(&state, &prompt).await {
                Ok(verdict) => {
                    println!(
                        "{}",
                        serde_json::to_string_pretty(&verdict).expect("verdict serializes")
                    );
                    match verdict.kind {
                        VerdictKind::Benign => EXIT_OK,
                        VerdictKind::Harmful => EXIT_HARMFUL,
                    }
                }
                Err(error) => {
                    eprintln!("check failed: {error}");
                    EXIT_ERROR
                }
            }
        }
        Command::Eval {
            config,
            corpus,
            repetitions,
            parallel,
            json,
            table: _,
        } => {
            let config = match load(&config) {
                Ok(config) => config,
                Err(code) => return code,
            };
            init_tracing(&config.log_level);
            let mut state = match build_state(&config) {
                Ok(state) => state,
                Err(code) => return code,
            };
            let mut ae_writer = None;
            if let Some(path) = &config.ae_sink_path {
                let (handle, writer) = spawn_writer(path.clone());
                state = state.with_ae(handle);
                ae_writer = Some(writer);
            }
            let load = match load_corpus(&corpus) {
                Ok(load) => load,
                Err(error) => {
                    eprintln!("cannot read corpus {}: {error}", corpus.display());
                    return EXIT_ERROR;
                }
            };
            for warning in &load.warnings {
                eprintln!("corpus warning: {warning}");
            }
            if load.cases.is_empty() {
                eprintln!("corpus has no valid cases");
                return EXIT_ERROR;
            }
            let run = run_eval(
                Arc::new(state),
                &load.cases,
                EvalOptions {
                    repetitions,
                    parallel,
                },
            )
            .await;
            if let Some(writer) = ae_writer {
                // All state clones are gone once run_eval returns, so the
                // writer drains its queue and exits.
                let _ = writer.await;
            }
            if json {
                println!("{}", render_json(&run.report));
            } else {
                print!("{}", render_table(&run, load.skipped));
            }
            EXIT_OK
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    ExitCode::from(run().await)
}
