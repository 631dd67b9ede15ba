//! Node daemons. Each reads a TOML config, prints its listen address on
//! stdout and runs until interrupted.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use fogbus::broker::{start_broker, BrokerConfig};
use fogbus::cloud::{CloudConfig, CloudSim};
use fogbus::net::ByteMeter;
use fogbus::worker::{start_worker, WorkerConfig};

#[derive(Parser)]
#[command(name = "fogbus", about = "Run a broker, worker or simulated cloud node")]
struct Cli {
    #[command(subcommand)]
    node: Node,
}

#[derive(Subcommand)]
enum Node {
    /// Master node
    Broker {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compute or repository worker
    Worker {
        #[arg(long)]
        config: PathBuf,
    },
    /// Cloud instance pool polling the shared input file
    Cloud {
        #[arg(long)]
        config: PathBuf,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let meter = Arc::new(ByteMeter::default());
    // handles stop their node on drop, so keep them alive until shutdown
    let _keep: Box<dyn std::any::Any> = match Cli::parse().node {
        Node::Broker { config } => {
            let cfg = BrokerConfig::from_toml(&read(&config)?).map_err(|e| anyhow!("{}: {e}", config.display()))?;
            let h = start_broker(cfg, meter).await?;
            println!("broker {} listening on {}", h.broker.master_id(), h.address());
            Box::new(h)
        }
        Node::Worker { config } => {
            let cfg: WorkerConfig = toml::from_str(&read(&config)?).with_context(|| config.display().to_string())?;
            let h = start_worker(cfg, meter).await?;
            println!("worker {} listening on {}", h.node_id(), h.address());
            Box::new(h)
        }
        Node::Cloud { config } => {
            let cfg: CloudConfig = toml::from_str(&read(&config)?).with_context(|| config.display().to_string())?;
            let file = cfg.input_file.clone();
            let h = CloudSim::start(cfg, meter).map_err(|e| anyhow!(e))?;
            println!("cloud polling {}", file.display());
            Box::new(h)
        }
    };
    tokio::signal::ctrl_c().await?;
    Ok(())
}
