//! Gateway front end. Exit codes: 0 ok, 1 transport, 2 task failure, 3 bad arguments.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use fogbus::gateway::{self, GatewayError, Profile, SessionConfig};
use fogbus::net::{ByteMeter, NetClient};

#[derive(Parser)]
#[command(name = "gateway", about = "Simulated oximeter gateway")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Record, upload and analyse one session
    Session {
        #[arg(long)]
        master: String,
        #[arg(long, default_value_t = 180.0)]
        seconds: f64,
        #[arg(long, default_value = "healthy")]
        profile: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replay a recorded trace instead of simulating one
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long)]
        session_id: Option<String>,
    },
    /// Show each worker's replica tip
    ChainStatus {
        #[arg(long)]
        master: String,
    },
}

fn fail(e: GatewayError) -> ExitCode {
    eprintln!("gateway: {e}");
    ExitCode::from(e.exit_code() as u8)
}

#[tokio::main(flavor = "current_thread")]
async fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(3);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    let client = NetClient::new("gateway", Arc::new(ByteMeter::default()));
    match cli.cmd {
        Cmd::Session { master, seconds, profile, seed, script, session_id } => {
            let profile = match script {
                Some(path) => Profile::Scripted(path),
                None => match profile.parse::<Profile>() {
                    Ok(p) => p,
                    Err(e) => return fail(GatewayError::Input(e)),
                },
            };
            let config = SessionConfig {
                master_address: master,
                session_id: session_id.unwrap_or_else(|| format!("session-{seed}")),
                record_seconds: seconds,
                profile,
                seed,
                ..SessionConfig::default()
            };
            match gateway::run_session(&config, client).await {
                Ok(report) => {
                    print!("{}", gateway::format_report(&report));
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Cmd::ChainStatus { master } => match gateway::chain_status(client, &master).await {
            Ok(s) => {
                print!("{}", gateway::format_chain_status(&s));
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
    }
}
