//! In-process deployment: one broker, a repository worker, compute workers
//! and an optional cloud simulator sharing one byte meter.

use std::sync::Arc;

use crate::apps::AppDescriptor;
use crate::broker::{start_broker, BrokerConfig, BrokerHandle, ProvisionMode};
use crate::cloud::{CloudConfig, CloudHandle, CloudModel, CloudSim, WanModel};
use crate::model::NodeRole;
use crate::net::{self, ByteMeter, NetClient};
use crate::proto::Health;
use crate::worker::{start_worker, WorkerConfig, WorkerHandle};

#[derive(Debug, Clone)]
pub struct ClusterSpec {
    pub master_id: String,
    pub compute_workers: usize,
    pub blockchain: bool,
    pub difficulty: u32,
    pub interval_ms: u64,
    pub mode: ProvisionMode,
    pub cloud: bool,
    pub wan: WanModel,
    pub cloud_instances: u32,
    pub cloud_model: CloudModel,
    pub cloud_shards: u32,
    pub heartbeat_ms: u64,
    pub probe_ms: u64,
    /// Application start-up cost charged per execution.
    pub launch_ms: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            master_id: "master".into(),
            compute_workers: 1,
            blockchain: true,
            difficulty: crate::ledger::DEFAULT_DIFFICULTY,
            interval_ms: 0,
            mode: ProvisionMode::Integrated,
            cloud: false,
            wan: WanModel::default(),
            cloud_instances: 4,
            cloud_model: CloudModel::Thread,
            cloud_shards: 4,
            heartbeat_ms: 1000,
            probe_ms: 1000,
            launch_ms: 0,
        }
    }
}

pub struct Cluster {
    pub meter: Arc<ByteMeter>,
    pub broker: BrokerHandle,
    pub repository: WorkerHandle,
    pub compute: Vec<WorkerHandle>,
    pub cloud: Option<CloudHandle>,
    master_id: String,
    _dir: tempfile::TempDir,
}

impl Cluster {
    pub async fn launch(spec: ClusterSpec) -> std::io::Result<Self> {
        let meter = Arc::new(ByteMeter::default());
        let dir = tempfile::tempdir()?;
        let app = AppDescriptor {
            launch_ms: spec.launch_ms,
            ..AppDescriptor::apnea()
        };
        let worker = |id: String, role| WorkerConfig {
            node_id: id,
            role,
            probe_ms: spec.probe_ms,
            catalogue: vec![app.clone()],
            ..WorkerConfig::default()
        };
        let repository = start_worker(
            worker(format!("{}-repo", spec.master_id), NodeRole::RepositoryWorker),
            meter.clone(),
        )
        .await?;
        let mut compute = Vec::new();
        for i in 0..spec.compute_workers {
            compute.push(
                start_worker(
                    worker(format!("{}-w{}", spec.master_id, i + 1), NodeRole::ComputeWorker),
                    meter.clone(),
                )
                .await?,
            );
        }
        let cloud_file = dir.path().join("cloud-input.jsonl");
        let cloud = if spec.cloud {
            let cfg = CloudConfig {
                input_file: cloud_file.clone(),
                wan: spec.wan,
                instances: spec.cloud_instances,
                catalogue: vec![app.clone()],
                ..CloudConfig::default()
            };
            Some(CloudSim::start(cfg, meter.clone()).map_err(std::io::Error::other)?)
        } else {
            None
        };
        let mut workers = vec![repository.address()];
        workers.extend(compute.iter().map(|w| w.address()));
        let broker = start_broker(
            BrokerConfig {
                master_id: spec.master_id.clone(),
                workers,
                cloud_enabled: spec.cloud,
                cloud_file: spec.cloud.then_some(cloud_file),
                blockchain_enabled: spec.blockchain,
                difficulty: spec.difficulty,
                interval_ms: spec.interval_ms,
                heartbeat_ms: spec.heartbeat_ms,
                mode: spec.mode,
                cloud_model: spec.cloud_model,
                cloud_shards: spec.cloud_shards,
                ..BrokerConfig::default()
            },
            meter.clone(),
        )
        .await?;
        Ok(Self {
            meter,
            broker,
            repository,
            compute,
            cloud,
            master_id: spec.master_id,
            _dir: dir,
        })
    }

    pub fn master_id(&self) -> &str {
        &self.master_id
    }

    pub fn broker_address(&self) -> String {
        self.broker.address()
    }

    pub fn workers(&self) -> impl Iterator<Item = &WorkerHandle> {
        std::iter::once(&self.repository).chain(self.compute.iter())
    }

    /// Address of the worker holding the master image, as reported by the
    /// broker.
    pub async fn replica_holder(&self) -> Option<String> {
        let c = NetClient::new("probe", Arc::new(ByteMeter::default()));
        let env = c.get(&self.broker_address(), "/health").await.ok()?;
        net::body::<Health>(&env).ok()?.replica_holder
    }

    pub fn kill_master(&self) {
        self.broker.kill();
    }

    /// Address of a broker promoted on some worker after master failure.
    pub fn promoted_address(&self) -> Option<String> {
        self.workers().find_map(|w| w.node.promoted_broker(&self.master_id))
    }

    pub fn cpu_busy_ms(&self) -> u64 {
        let workers: u64 = self.workers().map(|w| w.node.status().cpu_busy_ms).sum();
        workers + self.cloud.as_ref().map_or(0, |c| c.sim.cpu_busy_ms())
    }
}
