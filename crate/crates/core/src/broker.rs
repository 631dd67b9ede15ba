//! Master node: ingests gateway data, builds blocks, provisions fog first
//! and cloud second, dispatches tasks, collects results, monitors workers
//! and keeps a replica image on one worker for failover.

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::response::Response;
use axum::routing::{get, post};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tokio::sync::Notify;
use tokio::task::JoinHandle;

use crate::cloud::{append_record, CloudInputRecord, CloudModel, RecordState, CLOUD_NODE_ID};
use crate::crypto::ArchiveKey;
use crate::ledger::{make_block, resolve_majority, BlockKeyRecord, Chain, ChainVerdict, DEFAULT_DIFFICULTY};
use crate::model::{
    canonical_bytes, now_ms, serialize_trace, AnalysisTask, MsgType, NodeDescriptor, NodeId, NodeRole, SignalChunk,
};
use crate::net::{self, serve_on, ApiError, ByteMeter, Envelope, NetClient, Server};
use crate::proto::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProvisionMode {
    FogOnly,
    CloudOnly,
    Integrated,
}

impl std::str::FromStr for ProvisionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fog_only" => Ok(Self::FogOnly),
            "cloud_only" => Ok(Self::CloudOnly),
            "integrated" => Ok(Self::Integrated),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

impl std::fmt::Display for ProvisionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::FogOnly => "fog_only",
            Self::CloudOnly => "cloud_only",
            Self::Integrated => "integrated",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BrokerConfig {
    pub master_id: NodeId,
    pub bind: String,
    /// Worker addresses registered at start-up.
    pub workers: Vec<String>,
    /// Other brokers whose idle workers may be borrowed.
    pub peers: Vec<String>,
    pub cloud_enabled: bool,
    pub blockchain_enabled: bool,
    pub difficulty: u32,
    /// Minimum gap between consecutive dispatches to the same node.
    pub interval_ms: u64,
    pub heartbeat_ms: u64,
    pub miss_threshold: u32,
    pub mode: ProvisionMode,
    pub cloud_file: Option<PathBuf>,
    pub cloud_model: CloudModel,
    pub cloud_shards: u32,
    pub app_id: String,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            master_id: "master".into(),
            bind: "127.0.0.1:0".into(),
            workers: Vec::new(),
            peers: Vec::new(),
            cloud_enabled: false,
            blockchain_enabled: true,
            difficulty: DEFAULT_DIFFICULTY,
            interval_ms: 0,
            heartbeat_ms: 1000,
            miss_threshold: 3,
            mode: ProvisionMode::Integrated,
            cloud_file: None,
            cloud_model: CloudModel::Thread,
            cloud_shards: 4,
            app_id: crate::apps::APNEA_APP.into(),
        }
    }
}

impl BrokerConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let c: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.difficulty > crate::ledger::MAX_DIFFICULTY {
            return Err(format!("difficulty {} above {}", self.difficulty, crate::ledger::MAX_DIFFICULTY));
        }
        if self.heartbeat_ms == 0 || self.miss_threshold == 0 {
            return Err("heartbeat_ms and miss_threshold must be positive".into());
        }
        if self.cloud_enabled && self.cloud_file.is_none() {
            return Err("cloud_enabled needs cloud_file".into());
        }
        if self.cloud_model == CloudModel::Thread && self.cloud_shards < 2 {
            return Err("thread model needs cloud_shards >= 2".into());
        }
        Ok(())
    }
}

/// One fog node as seen by the provisioning policy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FogCandidate {
    pub node_id: NodeId,
    pub address: String,
    pub idle: bool,
    /// Earliest time the interval rule allows another dispatch.
    pub ready_at: u64,
    pub borrowed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeAssignment {
    Fog { node_id: NodeId, address: String },
    Cloud,
    /// Nothing usable now; `until` is when a retry can succeed, if known.
    Queued { until: Option<u64> },
}

/// Chooses among idle, ready fog nodes.
pub trait ProvisionPolicy: Send + Sync {
    fn pick<'a>(&self, ready: &[&'a FogCandidate]) -> Option<&'a FogCandidate>;
}

/// Registration order: own workers first, then borrowed ones.
pub struct RegistrationOrder;

impl ProvisionPolicy for RegistrationOrder {
    fn pick<'a>(&self, ready: &[&'a FogCandidate]) -> Option<&'a FogCandidate> {
        ready
            .iter()
            .find(|c| !c.borrowed)
            .or_else(|| ready.first())
            .copied()
    }
}

/// Fog first, cloud second. `cloud_ready_at` is `None` when no cloud is
/// configured.
pub fn provision(
    mode: ProvisionMode,
    fog: &[FogCandidate],
    cloud_ready_at: Option<u64>,
    now: u64,
    policy: &dyn ProvisionPolicy,
) -> NodeAssignment {
    let idle: Vec<&FogCandidate> = fog.iter().filter(|c| c.idle).collect();
    let ready: Vec<&FogCandidate> = idle.iter().copied().filter(|c| c.ready_at <= now).collect();
    let fog_pick = policy.pick(&ready).map(|c| NodeAssignment::Fog {
        node_id: c.node_id.clone(),
        address: c.address.clone(),
    });
    let fog_wait = idle.iter().map(|c| c.ready_at).min();
    let cloud = match cloud_ready_at {
        Some(t) if t <= now => NodeAssignment::Cloud,
        Some(t) => NodeAssignment::Queued { until: Some(t) },
        None => NodeAssignment::Queued { until: None },
    };
    match mode {
        ProvisionMode::FogOnly => fog_pick.unwrap_or(NodeAssignment::Queued { until: fog_wait }),
        ProvisionMode::CloudOnly => cloud,
        ProvisionMode::Integrated => match (fog_pick, fog_wait) {
            (Some(a), _) => a,
            (None, Some(t)) => NodeAssignment::Queued { until: Some(t) },
            (None, None) => cloud,
        },
    }
}

struct WorkerEntry {
    desc: NodeDescriptor,
    active: u32,
    misses: u32,
    suspect: bool,
    last_dispatch: Option<u64>,
}

struct TaskRecord {
    task: AnalysisTask,
    repository: NodeId,
    entry: ResourceConfigEntry,
    result: Option<crate::model::AnalysisResult>,
    failure: Option<String>,
    published: bool,
    stamp: u64,
    attempts: u32,
}

impl TaskRecord {
    fn terminal(&self) -> bool {
        matches!(self.entry.state, TaskState::Completed | TaskState::Failed)
    }

    fn image(&self) -> TaskImage {
        TaskImage {
            task: self.task.clone(),
            repository: self.repository.clone(),
            entry: self.entry.clone(),
            result: self.result.clone(),
            failure: self.failure.clone(),
        }
    }
}

struct SessionRec {
    data_key: String,
    repository: NodeId,
    block_hash: Option<String>,
    stamp: u64,
}

struct Replica {
    node_id: NodeId,
    acked_version: Option<u64>,
    acked_change: u64,
    acked_log: usize,
}

const PAYLOAD_CACHE: usize = 32;

struct BrokerState {
    registry: Vec<WorkerEntry>,
    borrowed: Vec<WorkerEntry>,
    chain: Chain,
    key_records: Vec<(BlockKeyRecord, u64)>,
    tasks: HashMap<String, TaskRecord>,
    sessions: HashMap<String, SessionRec>,
    queue: VecDeque<String>,
    unpublished: HashSet<String>,
    payloads: HashMap<String, Arc<Vec<u8>>>,
    payload_order: VecDeque<String>,
    seq: u64,
    change: u64,
    image_version: u64,
    replica: Option<Replica>,
    dispatch_log: Vec<(NodeId, u64)>,
    cloud_last_dispatch: Option<u64>,
    alerts: Vec<String>,
    wake_at: Option<u64>,
}

impl BrokerState {
    fn touch(&mut self) -> u64 {
        self.change += 1;
        self.change
    }

    fn cache_payload(&mut self, key: &str, bytes: Arc<Vec<u8>>) {
        self.payloads.insert(key.into(), bytes);
        self.payload_order.push_back(key.into());
        while self.payload_order.len() > PAYLOAD_CACHE {
            if let Some(old) = self.payload_order.pop_front() {
                self.payloads.remove(&old);
            }
        }
    }

    fn worker_mut(&mut self, node_id: &str) -> Option<&mut WorkerEntry> {
        self.registry
            .iter_mut()
            .chain(self.borrowed.iter_mut())
            .find(|w| w.desc.node_id == node_id)
    }

    fn address_of(&self, node_id: &str) -> Option<String> {
        self.registry
            .iter()
            .find(|w| w.desc.node_id == node_id)
            .map(|w| w.desc.address.clone())
    }

    fn requeue(&mut self, task_id: &str) {
        let Some(rec) = self.tasks.get_mut(task_id) else { return };
        if rec.entry.state != TaskState::Dispatched {
            return;
        }
        let node = rec.entry.assigned_node.take();
        rec.entry.state = TaskState::Queued;
        rec.attempts += 1;
        let task_id = rec.task.task_id.clone();
        if let Some(n) = node {
            if let Some(w) = self.worker_mut(&n) {
                w.active = w.active.saturating_sub(1);
            }
        }
        self.queue.push_front(task_id.clone());
        let stamp = self.touch();
        if let Some(rec) = self.tasks.get_mut(&task_id) {
            rec.stamp = stamp;
        }
    }
}

pub struct Broker {
    config: BrokerConfig,
    address: String,
    self_node: Option<NodeId>,
    state: Mutex<BrokerState>,
    ingest_lock: tokio::sync::Mutex<()>,
    image_lock: tokio::sync::Mutex<()>,
    results: Notify,
    client: NetClient,
    archive_key: ArchiveKey,
    alive: AtomicBool,
    policy: Box<dyn ProvisionPolicy>,
}

pub struct BrokerHandle {
    pub broker: Arc<Broker>,
    server: Server,
    loops: Vec<JoinHandle<()>>,
}

impl BrokerHandle {
    pub fn address(&self) -> String {
        self.broker.address.clone()
    }

    pub fn kill(&self) {
        self.broker.alive.store(false, Ordering::SeqCst);
        self.server.abort();
        for l in &self.loops {
            l.abort();
        }
    }
}

impl Drop for BrokerHandle {
    fn drop(&mut self) {
        self.kill();
    }
}

enum Job {
    Fog(ExecuteRequest),
    Cloud {
        task_id: String,
        app_id: String,
        data_key: String,
        repository: Option<String>,
        block_hash: Option<String>,
    },
}

pub async fn start_broker(config: BrokerConfig, meter: Arc<ByteMeter>) -> std::io::Result<BrokerHandle> {
    config.validate().map_err(std::io::Error::other)?;
    let difficulty = config.difficulty;
    let chain = tokio::task::spawn_blocking(move || Chain::new(difficulty))
        .await
        .map_err(std::io::Error::other)?
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    let archive_key = ArchiveKey::generate().map_err(|e| std::io::Error::other(e.to_string()))?;
    let listener = tokio::net::TcpListener::bind(&config.bind).await?;
    let address = listener.local_addr()?.to_string();
    let workers = config.workers.clone();
    let broker = Arc::new(Broker::new(config, address, None, chain, archive_key, meter));
    let handle = launch(broker.clone(), listener)?;
    for addr in workers {
        if let Err(e) = broker.register_address(&addr).await {
            tracing::warn!(%addr, "worker registration failed: {e:?}");
        }
    }
    Ok(handle)
}

/// Rebuilds a broker from a replica image on the worker `self_desc`.
/// Dispatched-but-unfinished tasks go back to the queue.
pub async fn start_from_image(
    image: MasterImage,
    chain: Option<Chain>,
    self_desc: NodeDescriptor,
    meter: Arc<ByteMeter>,
) -> std::io::Result<BrokerHandle> {
    let mut config = image.settings.clone();
    config.bind = "127.0.0.1:0".into();
    config.workers.clear();
    let chain = match chain {
        Some(c) if crate::ledger::validate_chain(&c) == ChainVerdict::Ok => c,
        _ => {
            let d = config.difficulty;
            tokio::task::spawn_blocking(move || Chain::new(d))
                .await
                .map_err(std::io::Error::other)?
                .map_err(|e| std::io::Error::other(e.to_string()))?
        }
    };
    if chain.len() as u64 != image.chain_length {
        tracing::warn!(
            replica = chain.len(),
            image = image.chain_length,
            "replica chain length differs from image; blocks after the replica tip are lost"
        );
    }
    let archive_key = ArchiveKey::from_b64(&image.archive_key_b64).map_err(|e| std::io::Error::other(e.to_string()))?;
    let listener = tokio::net::TcpListener::bind(&config.bind).await?;
    let address = listener.local_addr()?.to_string();
    let broker = Arc::new(Broker::new(
        config,
        address,
        Some(self_desc.node_id.clone()),
        chain,
        archive_key,
        meter,
    ));
    {
        let mut st = broker.state.lock().unwrap();
        st.registry = image
            .worker_registry
            .iter()
            .map(|d| WorkerEntry {
                desc: d.clone(),
                active: 0,
                misses: 0,
                suspect: false,
                last_dispatch: None,
            })
            .collect();
        for (node, at) in &image.dispatch_log {
            if let Some(w) = st.worker_mut(node) {
                w.last_dispatch = Some(*at);
            }
            if node == CLOUD_NODE_ID {
                st.cloud_last_dispatch = Some(*at);
            }
        }
        st.dispatch_log = image.dispatch_log.clone();
        st.seq = image.next_seq;
        st.image_version = image.image_version;
        st.key_records = image.key_records.iter().map(|k| (k.clone(), 0)).collect();
        for s in &image.sessions {
            st.sessions.insert(
                s.session_id.clone(),
                SessionRec {
                    data_key: s.data_key.clone(),
                    repository: s.repository.clone(),
                    block_hash: s.block_hash.clone(),
                    stamp: 0,
                },
            );
        }
        let mut queued = Vec::new();
        for t in &image.tasks {
            let mut entry = t.entry.clone();
            if entry.state == TaskState::Dispatched {
                entry.state = TaskState::Queued;
                entry.assigned_node = None;
            }
            if entry.state == TaskState::Queued {
                queued.push((t.task.created_at, t.task.task_id.clone()));
            }
            let published = matches!(entry.state, TaskState::Completed | TaskState::Failed);
            st.tasks.insert(
                t.task.task_id.clone(),
                TaskRecord {
                    task: t.task.clone(),
                    repository: t.repository.clone(),
                    entry,
                    result: t.result.clone(),
                    failure: t.failure.clone(),
                    published,
                    stamp: 0,
                    attempts: 0,
                },
            );
        }
        queued.sort();
        st.queue = queued.into_iter().map(|(_, id)| id).collect();
        st.change = 1;
    }
    let handle = launch(broker.clone(), listener)?;
    broker.pump();
    let b = broker.clone();
    tokio::spawn(async move { b.replicate().await });
    Ok(handle)
}

fn launch(broker: Arc<Broker>, listener: tokio::net::TcpListener) -> std::io::Result<BrokerHandle> {
    let server = serve_on(listener, router(broker.clone()))?;
    let hb = broker.clone();
    let loops = vec![tokio::spawn(async move { hb.heartbeat_loop().await })];
    Ok(BrokerHandle { broker, server, loops })
}

fn router(b: Arc<Broker>) -> Router {
    Router::new()
        .route("/register", post(h_register))
        .route("/ingest", post(h_ingest))
        .route("/analyze", post(h_analyze))
        .route("/result/{task_id}", get(h_result))
        .route("/complete", post(h_complete))
        .route("/chain", get(h_chain))
        .route("/chain/block/{hash}", get(h_block))
        .route("/chain/status", get(h_chain_status))
        .route("/health", get(h_health))
        .route("/workers", get(h_workers))
        .route("/resource-config", get(h_resource_config))
        .with_state(b)
}

impl Broker {
    fn new(
        config: BrokerConfig,
        address: String,
        self_node: Option<NodeId>,
        chain: Chain,
        archive_key: ArchiveKey,
        meter: Arc<ByteMeter>,
    ) -> Self {
        Self {
            client: NetClient::new(config.master_id.clone(), meter),
            config,
            address,
            self_node,
            state: Mutex::new(BrokerState {
                registry: Vec::new(),
                borrowed: Vec::new(),
                chain,
                key_records: Vec::new(),
                tasks: HashMap::new(),
                sessions: HashMap::new(),
                queue: VecDeque::new(),
                unpublished: HashSet::new(),
                payloads: HashMap::new(),
                payload_order: VecDeque::new(),
                seq: 0,
                change: 0,
                image_version: 0,
                replica: None,
                dispatch_log: Vec::new(),
                cloud_last_dispatch: None,
                alerts: Vec::new(),
                wake_at: None,
            }),
            ingest_lock: tokio::sync::Mutex::new(()),
            image_lock: tokio::sync::Mutex::new(()),
            results: Notify::new(),
            archive_key,
            alive: AtomicBool::new(true),
            policy: Box::new(RegistrationOrder),
        }
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    pub fn address(&self) -> &str {
        &self.address
    }

    pub fn master_id(&self) -> &str {
        &self.config.master_id
    }

    pub fn chain(&self) -> Chain {
        self.state.lock().unwrap().chain.clone()
    }

    pub fn resource_config(&self) -> ResourceConfigReply {
        let st = self.state.lock().unwrap();
        let mut tasks: Vec<&TaskRecord> = st.tasks.values().collect();
        tasks.sort_by(|a, b| (a.task.created_at, &a.task.task_id).cmp(&(b.task.created_at, &b.task.task_id)));
        ResourceConfigReply {
            entries: tasks.into_iter().map(|t| t.entry.clone()).collect(),
            dispatch_log: st.dispatch_log.clone(),
        }
    }

    pub fn registry(&self) -> Vec<NodeDescriptor> {
        self.state.lock().unwrap().registry.iter().map(|w| w.desc.clone()).collect()
    }

    pub fn alerts(&self) -> Vec<String> {
        self.state.lock().unwrap().alerts.clone()
    }

    pub fn image_version(&self) -> u64 {
        self.state.lock().unwrap().image_version
    }

    pub fn replica_holder(&self) -> Option<NodeId> {
        self.state.lock().unwrap().replica.as_ref().map(|r| r.node_id.clone())
    }

    fn alive(&self) -> bool {
        self.alive.load(Ordering::SeqCst)
    }

    async fn register_address(self: &Arc<Self>, addr: &str) -> Result<(), ApiError> {
        let env = self
            .client
            .get(addr, "/status")
            .await
            .map_err(|e| ApiError::unavailable(e.to_string()))?;
        let status: ResourceStatus = net::body(&env).map_err(|e| ApiError::bad_request(e.to_string()))?;
        let desc = NodeDescriptor {
            node_id: status.node_id,
            address: addr.into(),
            role: status.role,
            capacity_slots: status.total_slots,
        };
        self.register_worker(desc).await
    }

    pub async fn register_worker(self: &Arc<Self>, desc: NodeDescriptor) -> Result<(), ApiError> {
        if !desc.role.is_worker() {
            return Err(ApiError::bad_request(format!("role {:?} is not a worker role", desc.role)));
        }
        desc.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
        {
            let mut st = self.state.lock().unwrap();
            if let Some(existing) = st.registry.iter().find(|w| w.desc.node_id == desc.node_id) {
                if existing.desc.address == desc.address {
                    return Ok(());
                }
                return Err(ApiError::conflict(format!(
                    "node `{}` already registered at {}",
                    desc.node_id, existing.desc.address
                )));
            }
            st.registry.push(WorkerEntry {
                desc: desc.clone(),
                active: 0,
                misses: 0,
                suspect: false,
                last_dispatch: None,
            });
            st.touch();
        }
        let cred = CredentialRecord {
            master_id: self.config.master_id.clone(),
            body: CredentialBody::ArchiveKey {
                key_b64: self.archive_key.to_b64(),
                master_address: self.address.clone(),
            },
        };
        if let Err(e) = self.client.post(&desc.address, "/credential", MsgType::CredentialPut, &cred).await {
            tracing::warn!(node = %desc.node_id, "archive key delivery failed: {e}");
        }
        let chain = self.chain();
        if self.config.blockchain_enabled && chain.len() > 1 {
            let body = ChainReplace {
                master_id: self.config.master_id.clone(),
                chain,
            };
            if let Err(e) = self.client.post(&desc.address, "/chain/replace", MsgType::ChainReplace, &body).await {
                tracing::warn!(node = %desc.node_id, "chain hand-over failed: {e}");
            }
        }
        self.pump();
        self.replicate().await;
        Ok(())
    }

    fn repository_candidates(st: &BrokerState) -> Vec<(NodeId, String)> {
        let live = st.registry.iter().filter(|w| !w.suspect);
        let mut repos: Vec<&WorkerEntry> = live.clone().filter(|w| w.desc.role == NodeRole::RepositoryWorker).collect();
        if repos.is_empty() {
            repos = live.collect();
        }
        repos.iter().map(|w| (w.desc.node_id.clone(), w.desc.address.clone())).collect()
    }

    pub async fn ingest(self: &Arc<Self>, chunk: SignalChunk) -> Result<IngestReceipt, ApiError> {
        chunk.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
        let bytes = Arc::new(canonical_bytes(&chunk).map_err(|e| ApiError::bad_request(e.to_string()))?);
        let guard = self.ingest_lock.lock().await;
        let (data_key, repos, workers) = {
            let mut st = self.state.lock().unwrap();
            st.seq += 1;
            let key = format!("{}-d{}", self.config.master_id, st.seq);
            let workers: Vec<(NodeId, String)> = st
                .registry
                .iter()
                .map(|w| (w.desc.node_id.clone(), w.desc.address.clone()))
                .collect();
            (key, Self::repository_candidates(&st), workers)
        };
        if repos.is_empty() {
            return Err(ApiError::unavailable("no repository worker registered"));
        }
        let store = StoreRequest {
            data_key: data_key.clone(),
            owner_master: self.config.master_id.clone(),
            plaintext_b64: B64.encode(bytes.as_slice()),
        };
        let mut repository = None;
        for (node, addr) in &repos {
            match self.client.post(addr, "/data", MsgType::DataPut, &store).await {
                Ok(_) => {
                    repository = Some(node.clone());
                    break;
                }
                Err(e) => tracing::warn!(%node, "store failed: {e}"),
            }
        }
        let Some(repository) = repository else {
            return Err(ApiError::unavailable("no repository worker reachable"));
        };

        let mut warnings = Vec::new();
        let mut block_hash = None;
        let mut majority_failed = false;
        if self.config.blockchain_enabled {
            let (prev, difficulty) = {
                let st = self.state.lock().unwrap();
                (st.chain.tip().clone(), st.chain.difficulty)
            };
            let payload = bytes.clone();
            let block = tokio::task::spawn_blocking(move || make_block(&prev, difficulty, &payload, now_ms()))
                .await
                .map_err(|e| ApiError::internal(e.to_string()))?
                .map_err(|e| ApiError::internal(e.to_string()))?;
            self.state.lock().unwrap().chain.blocks.push(block.clone());
            let outcomes = futures::future::join_all(workers.iter().map(|(node, addr)| {
                let block = block.clone();
                async move { (node.clone(), self.push_block(addr, block, difficulty).await) }
            }))
            .await;
            let mut accepted = std::collections::BTreeSet::new();
            let mut rejected = 0usize;
            let mut failed = 0usize;
            for (node, outcome) in outcomes {
                match outcome {
                    Ok(v) if v.verdict == crate::ledger::BlockVerdict::Ok => {
                        accepted.insert(node);
                    }
                    Ok(v) => {
                        warnings.push(format!("{node} rejected block {}: {} at {}", block.index, v.verdict, v.index));
                        rejected += 1;
                        failed += 1;
                    }
                    Err(e) => {
                        warnings.push(format!("{node} unreachable for block {}: {e}", block.index));
                        failed += 1;
                    }
                }
            }
            majority_failed = !workers.is_empty() && failed * 2 > workers.len();
            {
                let mut st = self.state.lock().unwrap();
                let stamp = st.touch();
                st.key_records.push((
                    BlockKeyRecord {
                        block_index: block.index,
                        pub_key_b64: block.pub_key_b64.clone(),
                        distributed_to: accepted,
                    },
                    stamp,
                ));
            }
            if rejected > 0 {
                self.repair().await;
            }
            block_hash = Some(block.hash.clone());
        }
        {
            let mut st = self.state.lock().unwrap();
            let stamp = st.touch();
            st.sessions.insert(
                chunk.session_id.clone(),
                SessionRec {
                    data_key: data_key.clone(),
                    repository,
                    block_hash: block_hash.clone(),
                    stamp,
                },
            );
            st.cache_payload(&data_key, bytes);
        }
        drop(guard);
        self.replicate().await;
        for w in &warnings {
            tracing::warn!("{w}");
        }
        if majority_failed {
            return Err(ApiError::unavailable(format!(
                "block push failed on a majority of workers: {}",
                warnings.join("; ")
            )));
        }
        Ok(IngestReceipt {
            data_key,
            block_hash,
            warnings,
        })
    }

    async fn push_block(
        &self,
        addr: &str,
        block: crate::ledger::DataBlock,
        difficulty: u32,
    ) -> Result<BlockVerdictReply, net::NetError> {
        let cred = CredentialRecord {
            master_id: self.config.master_id.clone(),
            body: CredentialBody::BlockKey {
                block_index: block.index,
                pub_key_b64: block.pub_key_b64.clone(),
            },
        };
        self.client.post(addr, "/credential", MsgType::CredentialPut, &cred).await?;
        #[derive(Serialize)]
        struct Body<'a> {
            master_id: &'a str,
            block: crate::ledger::DataBlock,
            difficulty: u32,
        }
        let env = self
            .client
            .post(
                addr,
                "/block",
                MsgType::Block,
                &Body {
                    master_id: &self.config.master_id,
                    block,
                    difficulty,
                },
            )
            .await?;
        net::body(&env)
    }

    /// Collects every replica plus the master's own chain, resolves the
    /// majority and overwrites deviants with it.
    pub async fn repair(self: &Arc<Self>) {
        let (own, workers) = {
            let st = self.state.lock().unwrap();
            let w: Vec<(NodeId, String)> = st
                .registry
                .iter()
                .map(|w| (w.desc.node_id.clone(), w.desc.address.clone()))
                .collect();
            (st.chain.clone(), w)
        };
        let path = format!("/chain?master={}", self.config.master_id);
        let fetched = futures::future::join_all(workers.iter().map(|(node, addr)| {
            let path = path.clone();
            async move {
                let c = self.client.get(addr, &path).await.ok().and_then(|e| net::body::<Chain>(&e).ok());
                (node.clone(), addr.clone(), c)
            }
        }))
        .await;
        let mut replicas: Vec<(NodeId, Chain)> = vec![(self.config.master_id.clone(), own)];
        let mut addrs = HashMap::new();
        for (node, addr, chain) in fetched {
            if let Some(c) = chain {
                replicas.push((node.clone(), c));
                addrs.insert(node, addr);
            }
        }
        match resolve_majority(replicas.iter().map(|(n, c)| (n, c))) {
            Ok(m) => {
                for d in &m.deviants {
                    if d == &self.config.master_id {
                        let msg = "master chain deviated from the worker majority; adopted majority chain".to_string();
                        tracing::error!("{msg}");
                        let mut st = self.state.lock().unwrap();
                        st.chain = m.canonical.clone();
                        st.alerts.push(msg);
                        continue;
                    }
                    let Some(addr) = addrs.get(d) else { continue };
                    let body = ChainReplace {
                        master_id: self.config.master_id.clone(),
                        chain: m.canonical.clone(),
                    };
                    match self.client.post(addr, "/chain/replace", MsgType::ChainReplace, &body).await {
                        Ok(_) => tracing::warn!(node = %d, "replica repaired from majority chain"),
                        Err(e) => tracing::warn!(node = %d, "replica repair failed: {e}"),
                    }
                }
            }
            Err(e) => {
                let msg = format!("suspicious chain state: {e}");
                tracing::error!("{msg}");
                self.state.lock().unwrap().alerts.push(msg);
            }
        }
    }

    pub async fn analyze(self: &Arc<Self>, req: AnalyzeRequest) -> Result<TaskAccepted, ApiError> {
        let task_id = {
            let mut st = self.state.lock().unwrap();
            let (data_key, repository) = match st.sessions.get(&req.session_id) {
                Some(s) => (s.data_key.clone(), s.repository.clone()),
                None => return Err(ApiError::not_found(format!("no data for session `{}`", req.session_id))),
            };
            st.seq += 1;
            let task_id = format!("{}-t{}", self.config.master_id, st.seq);
            let app_id = req.app_id.clone().unwrap_or_else(|| self.config.app_id.clone());
            let stamp = st.touch();
            st.tasks.insert(
                task_id.clone(),
                TaskRecord {
                    task: AnalysisTask {
                        task_id: task_id.clone(),
                        session_id: req.session_id.clone(),
                        app_id: app_id.clone(),
                        input_ref: data_key,
                        created_at: now_ms(),
                    },
                    repository,
                    entry: ResourceConfigEntry {
                        task_id: task_id.clone(),
                        assigned_node: None,
                        app_id,
                        state: TaskState::Queued,
                        assigned_at: 0,
                    },
                    result: None,
                    failure: None,
                    published: false,
                    stamp,
                    attempts: 0,
                },
            );
            st.queue.push_back(task_id.clone());
            task_id
        };
        self.pump();
        self.replicate().await;
        Ok(TaskAccepted { task_id })
    }

    fn fog_candidates(&self, st: &BrokerState) -> Vec<FogCandidate> {
        let compute: Vec<&WorkerEntry> = st
            .registry
            .iter()
            .filter(|w| w.desc.role == NodeRole::ComputeWorker)
            .collect();
        let own: Vec<&WorkerEntry> = if compute.is_empty() {
            st.registry.iter().collect()
        } else {
            compute
        };
        let gate = |w: &WorkerEntry| match w.last_dispatch {
            Some(t) if self.config.interval_ms > 0 => t + self.config.interval_ms,
            _ => 0,
        };
        own.into_iter()
            .map(|w| (w, false))
            .chain(st.borrowed.iter().map(|w| (w, true)))
            .filter(|(w, _)| !w.suspect)
            .map(|(w, borrowed)| FogCandidate {
                node_id: w.desc.node_id.clone(),
                address: w.desc.address.clone(),
                idle: w.active < w.desc.capacity_slots,
                ready_at: gate(w),
                borrowed,
            })
            .collect()
    }

    /// Assigns queued tasks in FIFO order until one has to wait.
    pub fn pump(self: &Arc<Self>) {
        if !self.alive() {
            return;
        }
        let mut jobs = Vec::new();
        let mut wake = None;
        {
            let mut st = self.state.lock().unwrap();
            let now = now_ms();
            while let Some(task_id) = st.queue.front().cloned() {
                let live = st.tasks.get(&task_id).is_some_and(|t| t.entry.state == TaskState::Queued);
                if !live {
                    st.queue.pop_front();
                    continue;
                }
                let fog = self.fog_candidates(&st);
                let cloud_ready = (self.config.cloud_enabled && self.config.cloud_file.is_some()).then(|| {
                    match st.cloud_last_dispatch {
                        Some(t) if self.config.interval_ms > 0 => t + self.config.interval_ms,
                        _ => 0,
                    }
                });
                let assignment = provision(self.config.mode, &fog, cloud_ready, now, self.policy.as_ref());
                let node_id = match &assignment {
                    NodeAssignment::Queued { until } => {
                        wake = *until;
                        if until.is_none() && fog.is_empty() && cloud_ready.is_none() {
                            tracing::warn!(task = %task_id, "no workers and no cloud; task stays queued");
                        }
                        break;
                    }
                    NodeAssignment::Fog { node_id, .. } => node_id.clone(),
                    NodeAssignment::Cloud => CLOUD_NODE_ID.to_string(),
                };
                st.queue.pop_front();
                let stamp = st.touch();
                st.dispatch_log.push((node_id.clone(), now));
                let (task, repository, block_hash) = {
                    let rec = st.tasks.get_mut(&task_id).expect("queued task exists");
                    rec.entry.state = TaskState::Dispatched;
                    rec.entry.assigned_node = Some(node_id.clone());
                    rec.entry.assigned_at = now;
                    rec.stamp = stamp;
                    (rec.task.clone(), rec.repository.clone(), ())
                };
                let _ = block_hash;
                let repository_address = st.address_of(&repository);
                match assignment {
                    NodeAssignment::Fog { address, .. } => {
                        if let Some(w) = st.worker_mut(&node_id) {
                            w.active += 1;
                            w.last_dispatch = Some(now);
                        }
                        jobs.push(Job::Fog(ExecuteRequest {
                            task_id: task.task_id.clone(),
                            app_id: task.app_id.clone(),
                            data_key: task.input_ref.clone(),
                            master_id: self.config.master_id.clone(),
                            master_address: self.address.clone(),
                            repository_address: repository_address.unwrap_or(address),
                        }));
                    }
                    NodeAssignment::Cloud => {
                        st.cloud_last_dispatch = Some(now);
                        let block_hash = st
                            .sessions
                            .values()
                            .find(|s| s.data_key == task.input_ref)
                            .and_then(|s| s.block_hash.clone());
                        jobs.push(Job::Cloud {
                            task_id: task.task_id.clone(),
                            app_id: task.app_id.clone(),
                            data_key: task.input_ref.clone(),
                            repository: repository_address,
                            block_hash,
                        });
                    }
                    NodeAssignment::Queued { .. } => unreachable!(),
                }
            }
            if let Some(t) = wake {
                if st.wake_at.is_some_and(|w| w <= t && w > now) {
                    wake = None;
                } else {
                    st.wake_at = Some(t);
                }
            }
        }
        for job in jobs {
            tokio::spawn(self.clone().dispatch(job));
        }
        if let Some(t) = wake {
            let b = self.clone();
            tokio::spawn(async move {
                tokio::time::sleep(Duration::from_millis(t.saturating_sub(now_ms()) + 1)).await;
                b.state.lock().unwrap().wake_at = None;
                b.pump();
                b.replicate().await;
            });
        }
    }

    async fn dispatch(self: Arc<Self>, job: Job) {
        match job {
            Job::Fog(req) => {
                let addr = {
                    let st = self.state.lock().unwrap();
                    st.registry
                        .iter()
                        .chain(st.borrowed.iter())
                        .find(|w| Some(&w.desc.node_id) == st.tasks.get(&req.task_id).and_then(|t| t.entry.assigned_node.as_ref()))
                        .map(|w| w.desc.address.clone())
                };
                let Some(addr) = addr else { return };
                if let Err(e) = self.client.post(&addr, "/execute", MsgType::Execute, &req).await {
                    tracing::warn!(task = %req.task_id, "dispatch failed, requeueing: {e}");
                    {
                        let mut st = self.state.lock().unwrap();
                        let node = st.tasks.get(&req.task_id).and_then(|t| t.entry.assigned_node.clone());
                        if let Some(n) = node {
                            if let Some(w) = st.worker_mut(&n) {
                                w.suspect = true;
                            }
                        }
                        st.requeue(&req.task_id);
                    }
                    self.pump();
                }
            }
            Job::Cloud {
                task_id,
                app_id,
                data_key,
                repository,
                block_hash,
            } => {
                if let Err(reason) = self
                    .send_to_cloud(&task_id, &app_id, &data_key, repository.as_deref(), block_hash)
                    .await
                {
                    tracing::warn!(task = %task_id, "cloud dispatch failed: {reason}");
                    self.finish(
                        &task_id,
                        CLOUD_NODE_ID,
                        TaskOutcome::Failed {
                            kind: FailureKind::Unreachable,
                            reason,
                        },
                    );
                    self.pump();
                    self.replicate().await;
                }
            }
        }
    }

    async fn send_to_cloud(
        &self,
        task_id: &str,
        app_id: &str,
        data_key: &str,
        repository: Option<&str>,
        block_hash: Option<String>,
    ) -> Result<(), String> {
        let path = self.config.cloud_file.as_ref().ok_or("no cloud file configured")?;
        let cached = self.state.lock().unwrap().payloads.get(data_key).cloned();
        let bytes = match cached {
            Some(b) => b.as_ref().clone(),
            None => {
                let repo = repository.ok_or("repository unknown")?;
                let env = self
                    .client
                    .get(repo, &format!("/data/{data_key}?master={}", self.config.master_id))
                    .await
                    .map_err(|e| e.to_string())?;
                let d: DataReply = net::body(&env).map_err(|e| e.to_string())?;
                B64.decode(d.plaintext_b64).map_err(|e| e.to_string())?
            }
        };
        let chunk: SignalChunk = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
        let (model, shards) = match self.config.cloud_model {
            CloudModel::Task => (CloudModel::Task, 1),
            CloudModel::Thread => (CloudModel::Thread, self.config.cloud_shards),
        };
        let record = CloudInputRecord {
            task_id: task_id.into(),
            app_id: app_id.into(),
            payload_b64: B64.encode(serialize_trace(&chunk.samples)),
            model,
            shards,
            state: RecordState::Pending,
            block_hash,
            master_id: self.config.master_id.clone(),
            master_address: self.address.clone(),
        };
        let written = append_record(path, &record).map_err(|e| e.to_string())?;
        self.client.meter().add(written);
        Ok(())
    }

    /// Records an outcome. Returns false when the notice is stale.
    fn finish(&self, task_id: &str, node_id: &str, outcome: TaskOutcome) -> bool {
        let mut st = self.state.lock().unwrap();
        let Some(rec) = st.tasks.get(task_id) else { return false };
        if rec.terminal()
            || rec.entry.state != TaskState::Dispatched
            || rec.entry.assigned_node.as_deref() != Some(node_id)
        {
            return false;
        }
        let attempts = rec.attempts;
        let created_at = rec.task.created_at;
        if let Some(w) = st.worker_mut(node_id) {
            w.active = w.active.saturating_sub(1);
        }
        match outcome {
            TaskOutcome::Failed {
                kind: FailureKind::Unreachable | FailureKind::NotFound,
                reason,
            } if attempts < 3 && node_id != CLOUD_NODE_ID => {
                tracing::warn!(task = %task_id, "retrying after: {reason}");
                if let Some(w) = st.worker_mut(node_id) {
                    w.active += 1;
                }
                st.requeue(task_id);
                return true;
            }
            outcome => {
                let stamp = st.touch();
                let rec = st.tasks.get_mut(task_id).expect("checked above");
                rec.stamp = stamp;
                match outcome {
                    TaskOutcome::Completed { mut result } => {
                        result.task_id = task_id.into();
                        result.latency_ms = now_ms().saturating_sub(created_at);
                        rec.result = Some(result);
                        rec.entry.state = TaskState::Completed;
                    }
                    TaskOutcome::Failed { kind, reason } => {
                        rec.failure = Some(format!("{kind:?}: {reason}"));
                        rec.entry.state = TaskState::Failed;
                        if kind == FailureKind::Integrity {
                            let msg = format!("integrity alarm on {task_id}: {reason}");
                            tracing::error!("{msg}");
                            st.alerts.push(msg);
                        }
                    }
                }
                st.unpublished.insert(task_id.into());
            }
        }
        true
    }

    pub async fn complete(self: &Arc<Self>, notice: CompletionNotice) -> Result<(), ApiError> {
        if !self.state.lock().unwrap().tasks.contains_key(&notice.task_id) {
            return Err(ApiError::not_found(format!("unknown task `{}`", notice.task_id)));
        }
        if self.finish(&notice.task_id, &notice.node_id, notice.outcome) {
            self.pump();
            self.replicate().await;
        }
        Ok(())
    }

    fn publish_upto(&self, st: &mut BrokerState, upto: u64) {
        let ready: Vec<String> = st
            .unpublished
            .iter()
            .filter(|id| st.tasks.get(*id).is_none_or(|t| t.stamp <= upto))
            .cloned()
            .collect();
        for id in ready {
            st.unpublished.remove(&id);
            if let Some(t) = st.tasks.get_mut(&id) {
                t.published = true;
            }
        }
    }

    fn build_image(&self, st: &BrokerState, version: u64, base: Option<(u64, u64, usize)>) -> MasterImage {
        let since = base.map_or(0, |(_, c, _)| c);
        let log_base = base.map_or(0, |(_, _, l)| l);
        let mut tasks: Vec<&TaskRecord> = st.tasks.values().filter(|t| t.stamp > since || base.is_none()).collect();
        tasks.sort_by(|a, b| (a.task.created_at, &a.task.task_id).cmp(&(b.task.created_at, &b.task.task_id)));
        MasterImage {
            master_id: self.config.master_id.clone(),
            master_address: self.address.clone(),
            image_version: version,
            base_version: base.map(|(v, _, _)| v),
            tasks: tasks.into_iter().map(TaskRecord::image).collect(),
            sessions: st
                .sessions
                .iter()
                .filter(|(_, s)| s.stamp > since || base.is_none())
                .map(|(id, s)| SessionImage {
                    session_id: id.clone(),
                    data_key: s.data_key.clone(),
                    repository: s.repository.clone(),
                    block_hash: s.block_hash.clone(),
                })
                .collect(),
            key_records: st
                .key_records
                .iter()
                .filter(|(_, stamp)| *stamp > since || base.is_none())
                .map(|(k, _)| k.clone())
                .collect(),
            worker_registry: st.registry.iter().map(|w| w.desc.clone()).collect(),
            archive_key_b64: self.archive_key.to_b64(),
            settings: self.config.clone(),
            chain_length: st.chain.len() as u64,
            chain_tip: st.chain.tip_hash().to_owned(),
            next_seq: st.seq,
            dispatch_log_base: log_base as u64,
            dispatch_log: st.dispatch_log[log_base.min(st.dispatch_log.len())..].to_vec(),
        }
    }

    /// Pushes everything changed since the last acknowledged image to the
    /// replica holder, then makes finished results visible.
    pub async fn replicate(self: &Arc<Self>) {
        if !self.alive() {
            return;
        }
        let _g = self.image_lock.lock().await;
        let mut force_full = false;
        for _ in 0..2 {
            let plan = {
                let mut st = self.state.lock().unwrap();
                if st.replica.is_none() {
                    let pick = st
                        .registry
                        .iter()
                        .find(|w| Some(&w.desc.node_id) != self.self_node.as_ref() && !w.suspect)
                        .map(|w| w.desc.node_id.clone());
                    st.replica = pick.map(|node_id| Replica {
                        node_id,
                        acked_version: None,
                        acked_change: 0,
                        acked_log: 0,
                    });
                }
                let Some(r) = st.replica.as_ref() else {
                    let upto = st.change;
                    self.publish_upto(&mut st, upto);
                    drop(st);
                    self.results.notify_waiters();
                    return;
                };
                let clean = r.acked_version.is_some() && r.acked_change == st.change && r.acked_log == st.dispatch_log.len();
                if clean && !force_full {
                    return;
                }
                let base = match (r.acked_version, force_full) {
                    (Some(v), false) => Some((v, r.acked_change, r.acked_log)),
                    _ => None,
                };
                let Some(addr) = st.address_of(&r.node_id) else {
                    st.replica = None;
                    continue;
                };
                st.image_version += 1;
                let v = st.image_version;
                (self.build_image(&st, v, base), addr, st.change, st.dispatch_log.len())
            };
            let (image, addr, upto, log_len) = plan;
            let version = image.image_version;
            let sent = self.client.post(&addr, "/image", MsgType::Image, &image).await;
            let mut st = self.state.lock().unwrap();
            match sent.and_then(|env| net::body::<ImageAck>(&env)) {
                Ok(ack) if ack.status == ImageStatus::NeedsFull => {
                    force_full = true;
                    continue;
                }
                Ok(_) => {
                    if let Some(r) = st.replica.as_mut() {
                        r.acked_version = Some(version);
                        r.acked_change = upto;
                        r.acked_log = log_len;
                    }
                }
                Err(e) => {
                    tracing::warn!("image replication failed: {e}");
                    if let Some(r) = st.replica.as_mut() {
                        r.acked_version = None;
                    }
                }
            }
            self.publish_upto(&mut st, upto);
            drop(st);
            self.results.notify_waiters();
            return;
        }
    }

    pub async fn result(&self, task_id: &str, wait_ms: u64) -> Result<ResultReply, ApiError> {
        let deadline = tokio::time::Instant::now() + Duration::from_millis(wait_ms);
        loop {
            let notified = self.results.notified();
            {
                let st = self.state.lock().unwrap();
                let rec = st
                    .tasks
                    .get(task_id)
                    .ok_or_else(|| ApiError::not_found(format!("unknown task `{task_id}`")))?;
                if rec.published {
                    match (&rec.result, &rec.failure) {
                        (Some(r), _) => return Ok(ResultReply::Completed { result: r.clone() }),
                        (None, Some(f)) => return Ok(ResultReply::Failed { reason: f.clone() }),
                        _ => {}
                    }
                }
            }
            if tokio::time::timeout_at(deadline, notified).await.is_err() {
                return Ok(ResultReply::Pending);
            }
        }
    }

    pub async fn chain_status(&self) -> ChainStatus {
        let (workers, master_length, master_tip, alerts) = {
            let st = self.state.lock().unwrap();
            (
                st.registry
                    .iter()
                    .map(|w| (w.desc.node_id.clone(), w.desc.address.clone()))
                    .collect::<Vec<_>>(),
                st.chain.len() as u64,
                st.chain.tip_hash().to_owned(),
                st.alerts.clone(),
            )
        };
        let path = format!("/chain/tip?master={}", self.config.master_id);
        let rows = futures::future::join_all(workers.iter().map(|(node, addr)| {
            let path = path.clone();
            let master_tip = master_tip.clone();
            async move {
                match self.client.get(addr, &path).await.and_then(|e| net::body::<ChainTip>(&e)) {
                    Ok(t) => WorkerChainRow {
                        node_id: node.clone(),
                        reachable: true,
                        matches_master: t.valid && t.tip_hash == master_tip && t.length == master_length,
                        length: t.length,
                        tip_hash: t.tip_hash,
                        valid: t.valid,
                    },
                    Err(_) => WorkerChainRow {
                        node_id: node.clone(),
                        reachable: false,
                        length: 0,
                        tip_hash: String::new(),
                        valid: false,
                        matches_master: false,
                    },
                }
            }
        }))
        .await;
        ChainStatus {
            enabled: self.config.blockchain_enabled,
            master_length,
            master_tip,
            workers: rows,
            alerts,
        }
    }

    pub fn health(&self) -> Health {
        let st = self.state.lock().unwrap();
        Health {
            master_id: self.config.master_id.clone(),
            address: self.address.clone(),
            replica_holder: st.replica.as_ref().and_then(|r| st.address_of(&r.node_id)),
            image_version: st.image_version,
            chain_length: st.chain.len() as u64,
        }
    }

    pub fn workers(&self) -> Vec<WorkerInfo> {
        let st = self.state.lock().unwrap();
        st.registry
            .iter()
            .map(|w| WorkerInfo {
                descriptor: w.desc.clone(),
                active: w.active,
                failed: w.suspect,
            })
            .collect()
    }

    /// Probes every worker once. Workers missing `miss_threshold`
    /// consecutive sweeps are dropped and their tasks requeued.
    pub async fn heartbeat_sweep(self: &Arc<Self>) -> Vec<(NodeId, Option<ResourceStatus>)> {
        let workers: Vec<(NodeId, String)> = {
            let st = self.state.lock().unwrap();
            st.registry
                .iter()
                .map(|w| (w.desc.node_id.clone(), w.desc.address.clone()))
                .collect()
        };
        let probe = self
            .client
            .clone()
            .with_timeout(Duration::from_millis(self.config.heartbeat_ms));
        let results = futures::future::join_all(workers.iter().map(|(node, addr)| {
            let probe = probe.clone();
            async move {
                let s = probe.get(addr, "/status").await.ok().and_then(|e| net::body::<ResourceStatus>(&e).ok());
                (node.clone(), s)
            }
        }))
        .await;
        let now = now_ms();
        let stale_after = 2 * self.config.heartbeat_ms;
        {
            let mut st = self.state.lock().unwrap();
            let mut failed = Vec::new();
            for (node, status) in &results {
                let Some(w) = st.registry.iter_mut().find(|w| &w.desc.node_id == node) else { continue };
                match status {
                    Some(s) => {
                        w.misses = 0;
                        w.suspect = false;
                        if s.busy_slots + s.queued == 0 {
                            let lost: Vec<String> = st
                                .tasks
                                .values()
                                .filter(|t| {
                                    t.entry.state == TaskState::Dispatched
                                        && t.entry.assigned_node.as_deref() == Some(node.as_str())
                                        && t.entry.assigned_at + stale_after < now
                                })
                                .map(|t| t.task.task_id.clone())
                                .collect();
                            for id in lost {
                                tracing::warn!(task = %id, %node, "worker idle but task unfinished; requeueing");
                                st.requeue(&id);
                            }
                        }
                    }
                    None => {
                        w.misses += 1;
                        if w.misses >= self.config.miss_threshold {
                            failed.push(node.clone());
                        }
                    }
                }
            }
            for node in failed {
                tracing::warn!(%node, "worker failed after missed heartbeats");
                st.registry.retain(|w| w.desc.node_id != node);
                let orphaned: Vec<String> = st
                    .tasks
                    .values()
                    .filter(|t| t.entry.state == TaskState::Dispatched && t.entry.assigned_node.as_deref() == Some(node.as_str()))
                    .map(|t| t.task.task_id.clone())
                    .collect();
                for id in orphaned {
                    st.requeue(&id);
                }
                if st.replica.as_ref().is_some_and(|r| r.node_id == node) {
                    st.replica = None;
                }
                st.touch();
            }
        }
        results
    }

    async fn refresh_peers(&self) {
        for peer in &self.config.peers {
            let Ok(env) = self.client.get(peer, "/workers").await else { continue };
            let Ok(infos) = net::body::<Vec<WorkerInfo>>(&env) else { continue };
            let mut st = self.state.lock().unwrap();
            for info in infos {
                if info.failed || info.descriptor.role != NodeRole::ComputeWorker {
                    continue;
                }
                let known = st.registry.iter().chain(st.borrowed.iter()).any(|w| w.desc.node_id == info.descriptor.node_id);
                if !known {
                    st.borrowed.push(WorkerEntry {
                        desc: info.descriptor,
                        active: 0,
                        misses: 0,
                        suspect: false,
                        last_dispatch: None,
                    });
                }
            }
        }
    }

    async fn heartbeat_loop(self: Arc<Self>) {
        let mut ticker = tokio::time::interval(Duration::from_millis(self.config.heartbeat_ms));
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            ticker.tick().await;
            if !self.alive() {
                return;
            }
            self.heartbeat_sweep().await;
            self.refresh_peers().await;
            self.pump();
            self.replicate().await;
        }
    }
}

type S = State<Arc<Broker>>;

async fn h_register(State(b): S, env: Envelope) -> Result<Response, ApiError> {
    let desc: NodeDescriptor = env.body()?;
    b.register_worker(desc).await?;
    Ok(net::reply(b.master_id(), MsgType::Ack, &Ack::OK))
}

async fn h_ingest(State(b): S, env: Envelope) -> Result<Response, ApiError> {
    let chunk: SignalChunk = env.body()?;
    let receipt = b.ingest(chunk).await?;
    Ok(net::reply(b.master_id(), MsgType::IngestReceipt, &receipt))
}

async fn h_analyze(State(b): S, env: Envelope) -> Result<Response, ApiError> {
    let req: AnalyzeRequest = env.body()?;
    let accepted = b.analyze(req).await?;
    Ok(net::reply(b.master_id(), MsgType::TaskAccepted, &accepted))
}

#[derive(Deserialize)]
struct WaitQuery {
    #[serde(default)]
    wait_ms: u64,
}

async fn h_result(State(b): S, Path(id): Path<String>, Query(q): Query<WaitQuery>) -> Result<Response, ApiError> {
    let r = b.result(&id, q.wait_ms.min(120_000)).await?;
    let t = match r {
        ResultReply::Pending => MsgType::Pending,
        _ => MsgType::Result,
    };
    Ok(net::reply(b.master_id(), t, &r))
}

async fn h_complete(State(b): S, env: Envelope) -> Result<Response, ApiError> {
    let notice: CompletionNotice = env.body()?;
    b.complete(notice).await?;
    Ok(net::reply(b.master_id(), MsgType::Ack, &Ack::OK))
}

async fn h_chain(State(b): S) -> Response {
    net::reply(b.master_id(), MsgType::Chain, &b.chain())
}

async fn h_block(State(b): S, Path(hash): Path<String>) -> Result<Response, ApiError> {
    let block = b
        .state
        .lock()
        .unwrap()
        .chain
        .find(&hash)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("no block {hash}")))?;
    Ok(net::reply(b.master_id(), MsgType::Block, &block))
}

async fn h_chain_status(State(b): S) -> Response {
    net::reply(b.master_id(), MsgType::ChainStatus, &b.chain_status().await)
}

async fn h_health(State(b): S) -> Response {
    net::reply(b.master_id(), MsgType::Health, &b.health())
}

async fn h_workers(State(b): S) -> Response {
    net::reply(b.master_id(), MsgType::Workers, &b.workers())
}

async fn h_resource_config(State(b): S) -> Response {
    net::reply(b.master_id(), MsgType::ResourceConfig, &b.resource_config())
}
