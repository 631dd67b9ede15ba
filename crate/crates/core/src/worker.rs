//! Worker node: computing service (executor, resource monitor) and
//! repository service (data container, credential archive, application
//! catalogue) behind one HTTP endpoint. Every structure is namespaced by the
//! owning master so a worker can be shared.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::Response;
use axum::routing::{get, post};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;
use tokio::task::JoinHandle;

use crate::apps::{run_with_files, AppDescriptor, ProgramRegistry};
use crate::broker::{self, BrokerHandle};
use crate::crypto::{ArchiveKey, CryptoError};
use crate::ledger::{validate_chain, verify_block, verify_block_with_key, BlockVerdict, Chain, ChainVerdict};
use crate::model::{now_ms, serialize_trace, AnalysisResult, MsgType, NodeDescriptor, NodeId, NodeRole, SignalChunk};
use crate::net::{self, serve_on, ApiError, ByteMeter, Envelope, NetClient, NetError, Server};
use crate::proto::*;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkerConfig {
    pub node_id: NodeId,
    pub role: NodeRole,
    pub bind: String,
    pub capacity_slots: u32,
    /// Period of the master health probe run by a replica holder.
    pub probe_ms: u64,
    pub miss_threshold: u32,
    /// Applications served by this node's catalogue.
    pub catalogue: Vec<AppDescriptor>,
    pub work_dir: Option<PathBuf>,
    /// Brokers to register with at start-up.
    pub masters: Vec<String>,
}

impl Default for WorkerConfig {
    fn default() -> Self {
        Self {
            node_id: "worker".into(),
            role: NodeRole::ComputeWorker,
            bind: "127.0.0.1:0".into(),
            capacity_slots: 1,
            probe_ms: 1000,
            miss_threshold: 3,
            catalogue: vec![AppDescriptor::apnea()],
            work_dir: None,
            masters: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StoredObject {
    pub data_key: String,
    pub owner_master: NodeId,
    pub ciphertext_b64: String,
    pub created_at: u64,
}

#[derive(Default)]
struct MasterSpace {
    archive: Option<CredentialEntry>,
    block_keys: BTreeMap<u64, CredentialEntry>,
    chain: Option<Chain>,
    image: Option<MasterImage>,
}

impl MasterSpace {
    fn archive_key(&self) -> Option<ArchiveKey> {
        match &self.archive.as_ref()?.record.body {
            CredentialBody::ArchiveKey { key_b64, .. } => ArchiveKey::from_b64(key_b64).ok(),
            _ => None,
        }
    }
}

#[derive(Default)]
struct WorkerState {
    spaces: HashMap<NodeId, MasterSpace>,
    objects: HashMap<String, StoredObject>,
    installed: HashMap<String, AppDescriptor>,
}

pub struct WorkerNode {
    config: WorkerConfig,
    address: String,
    state: Mutex<WorkerState>,
    slots: Arc<Semaphore>,
    busy: AtomicU32,
    queued: AtomicU32,
    cpu_busy_ms: AtomicU64,
    started: Instant,
    alive: AtomicBool,
    client: NetClient,
    programs: ProgramRegistry,
    work_dir: PathBuf,
    _tmp: Option<tempfile::TempDir>,
    monitors: Mutex<HashMap<NodeId, JoinHandle<()>>>,
    promoted: Mutex<HashMap<NodeId, BrokerHandle>>,
}

pub struct WorkerHandle {
    pub node: Arc<WorkerNode>,
    server: Server,
}

impl WorkerHandle {
    pub fn address(&self) -> String {
        self.node.address.clone()
    }

    pub fn node_id(&self) -> &str {
        &self.node.config.node_id
    }

    pub fn descriptor(&self) -> NodeDescriptor {
        self.node.descriptor()
    }

    pub fn kill(&self) {
        self.server.abort();
        self.node.shutdown();
    }

    pub fn is_running(&self) -> bool {
        !self.server.is_finished() && self.node.alive.load(Ordering::SeqCst)
    }
}

impl Drop for WorkerHandle {
    fn drop(&mut self) {
        self.kill();
    }
}

pub async fn start_worker(config: WorkerConfig, meter: Arc<ByteMeter>) -> std::io::Result<WorkerHandle> {
    start_worker_with(config, meter, ProgramRegistry::default()).await
}

pub async fn start_worker_with(
    config: WorkerConfig,
    meter: Arc<ByteMeter>,
    programs: ProgramRegistry,
) -> std::io::Result<WorkerHandle> {
    let listener = tokio::net::TcpListener::bind(&config.bind).await?;
    let addr = listener.local_addr()?;
    let (work_dir, tmp) = match &config.work_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            (d.clone(), None)
        }
        None => {
            let t = tempfile::tempdir()?;
            (t.path().to_owned(), Some(t))
        }
    };
    let node = Arc::new(WorkerNode {
        address: addr.to_string(),
        slots: Arc::new(Semaphore::new(config.capacity_slots.max(1) as usize)),
        client: NetClient::new(config.node_id.clone(), meter),
        config,
        state: Mutex::new(WorkerState::default()),
        busy: AtomicU32::new(0),
        queued: AtomicU32::new(0),
        cpu_busy_ms: AtomicU64::new(0),
        started: Instant::now(),
        alive: AtomicBool::new(true),
        programs,
        work_dir,
        _tmp: tmp,
        monitors: Mutex::new(HashMap::new()),
        promoted: Mutex::new(HashMap::new()),
    });
    let server = serve_on(listener, router(node.clone()))?;
    let handle = WorkerHandle { node: node.clone(), server };
    for master in node.config.masters.clone() {
        if let Err(e) = node.register_with(&master).await {
            tracing::warn!(worker = %node.config.node_id, %master, "registration failed: {e}");
        }
    }
    Ok(handle)
}

fn router(node: Arc<WorkerNode>) -> Router {
    Router::new()
        .route("/status", get(h_status))
        .route("/execute", post(h_execute))
        .route("/data", post(h_store))
        .route("/data/{key}", get(h_fetch))
        .route("/credential", post(h_put_credential).get(h_get_credential))
        .route("/block", post(h_block))
        .route("/image", post(h_image))
        .route("/chain", get(h_chain))
        .route("/chain/tip", get(h_chain_tip))
        .route("/chain/replace", post(h_chain_replace))
        .route("/catalogue/{app}", get(h_catalogue))
        .route("/master", get(h_master))
        .with_state(node)
}

#[derive(Debug, Error)]
pub enum RepositoryError {
    #[error("no object under `{0}`")]
    NotFound(String),
    #[error("authentication failed for `{0}`")]
    Authentication(String),
}

impl From<RepositoryError> for ApiError {
    fn from(e: RepositoryError) -> Self {
        match e {
            RepositoryError::NotFound(_) => ApiError::not_found(e.to_string()),
            RepositoryError::Authentication(_) => ApiError::new(StatusCode::FORBIDDEN, "authentication", e.to_string()),
        }
    }
}

impl WorkerNode {
    pub fn node_id(&self) -> &str {
        &self.config.node_id
    }

    pub fn address(&self) -> &str {
        &self.address
    }

    pub fn descriptor(&self) -> NodeDescriptor {
        NodeDescriptor {
            node_id: self.config.node_id.clone(),
            address: self.address.clone(),
            role: self.config.role,
            capacity_slots: self.config.capacity_slots.max(1),
        }
    }

    fn shutdown(&self) {
        self.alive.store(false, Ordering::SeqCst);
        for (_, h) in self.monitors.lock().unwrap().drain() {
            h.abort();
        }
        for (_, b) in self.promoted.lock().unwrap().drain() {
            b.kill();
        }
    }

    pub async fn register_with(&self, master: &str) -> Result<(), NetError> {
        self.client
            .post(master, "/register", MsgType::Register, &self.descriptor())
            .await
            .map(|_| ())
    }

    pub fn status(&self) -> ResourceStatus {
        ResourceStatus {
            node_id: self.config.node_id.clone(),
            role: self.config.role,
            busy_slots: self.busy.load(Ordering::SeqCst),
            total_slots: self.config.capacity_slots.max(1),
            queued: self.queued.load(Ordering::SeqCst),
            uptime_ms: self.started.elapsed().as_millis() as u64,
            cpu_busy_ms: self.cpu_busy_ms.load(Ordering::SeqCst),
        }
    }

    pub fn store_data(&self, data_key: &str, plaintext: &[u8], owner_master: &str) -> Result<(), RepositoryError> {
        let mut st = self.state.lock().unwrap();
        let key = st
            .spaces
            .get(owner_master)
            .and_then(MasterSpace::archive_key)
            .ok_or_else(|| RepositoryError::Authentication(data_key.into()))?;
        let ciphertext_b64 = key
            .seal(plaintext, data_key.as_bytes())
            .map_err(|_| RepositoryError::Authentication(data_key.into()))?;
        st.objects.insert(
            data_key.into(),
            StoredObject {
                data_key: data_key.into(),
                owner_master: owner_master.into(),
                ciphertext_b64,
                created_at: now_ms(),
            },
        );
        Ok(())
    }

    /// Decrypts under the requesting master's archive key, so another
    /// master's identity can never open the object.
    pub fn fetch_data(&self, data_key: &str, owner_master: &str) -> Result<Vec<u8>, RepositoryError> {
        let st = self.state.lock().unwrap();
        let obj = st
            .objects
            .get(data_key)
            .ok_or_else(|| RepositoryError::NotFound(data_key.into()))?;
        let key = st
            .spaces
            .get(owner_master)
            .and_then(MasterSpace::archive_key)
            .ok_or_else(|| RepositoryError::Authentication(data_key.into()))?;
        key.open(&obj.ciphertext_b64, data_key.as_bytes()).map_err(|e| match e {
            CryptoError::Malformed | CryptoError::Authentication | CryptoError::Rng => {
                RepositoryError::Authentication(data_key.into())
            }
        })
    }

    /// Flips one ciphertext byte, for fault-injection tests.
    pub fn tamper_object(&self, data_key: &str) -> bool {
        let mut st = self.state.lock().unwrap();
        let Some(obj) = st.objects.get_mut(data_key) else { return false };
        let mut raw = B64.decode(&obj.ciphertext_b64).unwrap_or_default();
        if let Some(b) = raw.last_mut() {
            *b ^= 0x01;
        }
        obj.ciphertext_b64 = B64.encode(raw);
        true
    }

    pub fn put_credential(&self, record: CredentialRecord) -> CredentialEntry {
        let mut st = self.state.lock().unwrap();
        let space = st.spaces.entry(record.master_id.clone()).or_default();
        let slot = match &record.body {
            CredentialBody::ArchiveKey { .. } => &mut space.archive,
            CredentialBody::BlockKey { block_index, .. } => {
                let idx = *block_index;
                space.block_keys.entry(idx).or_insert_with(|| CredentialEntry {
                    record: record.clone(),
                    version: 0,
                });
                let e = space.block_keys.get_mut(&idx).unwrap();
                e.record = record;
                e.version += 1;
                return e.clone();
            }
        };
        let version = slot.as_ref().map_or(0, |e| e.version) + 1;
        let entry = CredentialEntry { record, version };
        *slot = Some(entry.clone());
        entry
    }

    pub fn get_credential(&self, master_id: &str, block_index: Option<u64>) -> Option<CredentialEntry> {
        let st = self.state.lock().unwrap();
        let space = st.spaces.get(master_id)?;
        match block_index {
            Some(i) => space.block_keys.get(&i).cloned(),
            None => space.archive.clone(),
        }
    }

    pub fn accept_block(&self, push: BlockPush, difficulty: u32) -> BlockVerdictReply {
        let mut st = self.state.lock().unwrap();
        let space = st.spaces.entry(push.master_id.clone()).or_default();
        let needs_init = space.chain.as_ref().is_none_or(|c| c.len() == 1 && c.difficulty != difficulty);
        if needs_init {
            space.chain = Chain::new(difficulty).ok();
        }
        let trusted = space.block_keys.get(&push.block.index).and_then(|e| match &e.record.body {
            CredentialBody::BlockKey { pub_key_b64, .. } => Some(pub_key_b64.clone()),
            _ => None,
        });
        let Some(chain) = space.chain.as_mut() else {
            return BlockVerdictReply {
                verdict: BlockVerdict::BadPow,
                index: push.block.index,
                length: 0,
            };
        };
        let n = chain.blocks.len();
        // a retry of a block we already hold
        if let Some(existing) = chain.blocks.get(push.block.index as usize) {
            if existing == &push.block && n == push.block.index as usize + 1 {
                return BlockVerdictReply {
                    verdict: BlockVerdict::Ok,
                    index: push.block.index,
                    length: n as u64,
                };
            }
        }
        let tip_prev = if n >= 2 { Some(&chain.blocks[n - 2]) } else { None };
        let tip_verdict = verify_block(chain.tip(), tip_prev, chain.difficulty);
        if tip_verdict != BlockVerdict::Ok {
            return BlockVerdictReply {
                verdict: tip_verdict,
                index: chain.tip().index,
                length: n as u64,
            };
        }
        let verdict = match trusted {
            Some(k) => verify_block_with_key(&push.block, Some(chain.tip()), chain.difficulty, &k),
            None => BlockVerdict::BadSignature,
        };
        if verdict == BlockVerdict::Ok {
            chain.blocks.push(push.block.clone());
        }
        BlockVerdictReply {
            verdict,
            index: push.block.index,
            length: chain.blocks.len() as u64,
        }
    }

    pub fn replica_chain(&self, master_id: &str) -> Option<Chain> {
        self.state.lock().unwrap().spaces.get(master_id)?.chain.clone()
    }

    pub fn replace_chain(&self, master_id: &str, chain: Chain) -> Result<(), ChainVerdict> {
        let v = validate_chain(&chain);
        if v != ChainVerdict::Ok {
            return Err(v);
        }
        self.state.lock().unwrap().spaces.entry(master_id.into()).or_default().chain = Some(chain);
        Ok(())
    }

    /// Edits the local replica directly, for tamper scenarios.
    pub fn tamper_replica(&self, master_id: &str, f: impl FnOnce(&mut Chain)) -> bool {
        let mut st = self.state.lock().unwrap();
        match st.spaces.get_mut(master_id).and_then(|s| s.chain.as_mut()) {
            Some(c) => {
                f(c);
                true
            }
            None => false,
        }
    }

    pub fn chain_tip(&self, master_id: &str) -> ChainTip {
        let st = self.state.lock().unwrap();
        match st.spaces.get(master_id).and_then(|s| s.chain.as_ref()) {
            Some(c) => ChainTip {
                length: c.len() as u64,
                tip_hash: c.tip_hash().to_owned(),
                valid: validate_chain(c) == ChainVerdict::Ok,
            },
            None => ChainTip {
                length: 0,
                tip_hash: String::new(),
                valid: true,
            },
        }
    }

    pub fn accept_image(self: &Arc<Self>, image: MasterImage) -> Result<ImageAck, ApiError> {
        let master_id = image.master_id.clone();
        let ack = {
            let mut st = self.state.lock().unwrap();
            let space = st.spaces.entry(master_id.clone()).or_default();
            let stored = space.image.as_ref().map(|i| i.image_version);
            let incoming = image.image_version;
            if let Some(v) = stored {
                if incoming < v {
                    return Err(ApiError::conflict(format!("image version {incoming} older than stored {v}")));
                }
                if incoming == v {
                    return Ok(ImageAck {
                        status: ImageStatus::Unchanged,
                        version: v,
                    });
                }
            }
            match (image.base_version, space.image.as_mut()) {
                (None, _) => {
                    space.image = Some(image);
                }
                (Some(base), Some(cur)) if cur.image_version == base => cur.merge(image),
                _ => {
                    return Ok(ImageAck {
                        status: ImageStatus::NeedsFull,
                        version: stored.unwrap_or(0),
                    })
                }
            }
            ImageAck {
                status: ImageStatus::Stored,
                version: incoming,
            }
        };
        self.ensure_monitor(&master_id);
        Ok(ack)
    }

    pub fn image(&self, master_id: &str) -> Option<MasterImage> {
        self.state.lock().unwrap().spaces.get(master_id)?.image.clone()
    }

    pub fn promoted_broker(&self, master_id: &str) -> Option<String> {
        self.promoted.lock().unwrap().get(master_id).map(|b| b.address())
    }

    pub fn promoted_handle(&self, master_id: &str) -> Option<Arc<broker::Broker>> {
        self.promoted.lock().unwrap().get(master_id).map(|b| b.broker.clone())
    }

    fn ensure_monitor(self: &Arc<Self>, master_id: &str) {
        if !self.alive.load(Ordering::SeqCst) {
            return;
        }
        let mut monitors = self.monitors.lock().unwrap();
        if monitors.contains_key(master_id) || self.promoted.lock().unwrap().contains_key(master_id) {
            return;
        }
        let node = self.clone();
        let m = master_id.to_owned();
        monitors.insert(master_id.into(), tokio::spawn(async move { node.monitor_master(m).await }));
    }

    /// Probes every `probe_ms`; after a miss, confirmation probes follow at
    /// half that period so `miss_threshold` misses fit inside the same
    /// number of periods even when the master dies right after a probe.
    async fn monitor_master(self: Arc<Self>, master_id: NodeId) {
        let period = Duration::from_millis(self.config.probe_ms.max(2));
        let probe = self.client.clone().with_timeout(period / 2);
        let mut next = tokio::time::Instant::now() + period;
        let mut misses = 0u32;
        loop {
            tokio::time::sleep_until(next).await;
            if !self.alive.load(Ordering::SeqCst) {
                return;
            }
            let started = tokio::time::Instant::now();
            let healthy = match self.image(&master_id).map(|i| i.master_address) {
                Some(addr) => match probe.get(&addr, "/health").await {
                    Ok(env) => net::body::<Health>(&env).is_ok_and(|h| h.master_id == master_id),
                    Err(_) => false,
                },
                None => true,
            };
            misses = if healthy { 0 } else { misses + 1 };
            if misses >= self.config.miss_threshold {
                tracing::warn!(worker = %self.config.node_id, master = %master_id, "master unreachable, promoting replica");
                match self.promote(&master_id).await {
                    Ok(()) => {}
                    Err(e) => tracing::error!("promotion failed: {e}"),
                }
                self.monitors.lock().unwrap().remove(&master_id);
                return;
            }
            next = started + if misses == 0 { period } else { period / 2 };
        }
    }

    /// Starts a broker for `master_id` from the stored image and the local
    /// replica chain.
    pub async fn promote(self: &Arc<Self>, master_id: &str) -> Result<(), String> {
        let (image, chain) = {
            let st = self.state.lock().unwrap();
            let space = st.spaces.get(master_id).ok_or("no state for master")?;
            let image = space.image.clone().ok_or("no image stored")?;
            (image, space.chain.clone())
        };
        let handle = broker::start_from_image(image, chain, self.descriptor(), self.client.meter().clone())
            .await
            .map_err(|e| e.to_string())?;
        tracing::info!(worker = %self.config.node_id, master = %master_id, address = %handle.address(), "promoted");
        self.promoted.lock().unwrap().insert(master_id.into(), handle);
        Ok(())
    }

    pub fn catalogue_entry(&self, app_id: &str) -> Option<AppDescriptor> {
        self.config.catalogue.iter().find(|a| a.app_id == app_id).cloned()
    }

    async fn fetch_app(&self, req: &ExecuteRequest) -> Result<AppDescriptor, (FailureKind, String)> {
        if let Some(app) = self.state.lock().unwrap().installed.get(&req.app_id) {
            return Ok(app.clone());
        }
        let env = self
            .client
            .get(&req.repository_address, &format!("/catalogue/{}", req.app_id))
            .await
            .map_err(|e| (FailureKind::CatalogueMiss, format!("app `{}`: {e}", req.app_id)))?;
        let reply: CatalogueReply =
            net::body(&env).map_err(|e| (FailureKind::CatalogueMiss, e.to_string()))?;
        if self.programs.get(&reply.descriptor.entrypoint).is_none() {
            return Err((
                FailureKind::CatalogueMiss,
                format!("no program for entrypoint `{}`", reply.descriptor.entrypoint),
            ));
        }
        self.state
            .lock()
            .unwrap()
            .installed
            .insert(req.app_id.clone(), reply.descriptor.clone());
        Ok(reply.descriptor)
    }

    async fn run_task(&self, req: &ExecuteRequest) -> Result<AnalysisResult, (FailureKind, String)> {
        let app = self.fetch_app(req).await?;
        let path = format!("/data/{}?master={}", req.data_key, req.master_id);
        let env = self.client.get(&req.repository_address, &path).await.map_err(|e| match e.kind() {
            "authentication" => (FailureKind::Integrity, e.to_string()),
            "not_found" => (FailureKind::NotFound, e.to_string()),
            _ => (FailureKind::Unreachable, e.to_string()),
        })?;
        let data: DataReply = net::body(&env).map_err(|e| (FailureKind::Analytic, e.to_string()))?;
        let plaintext = B64
            .decode(&data.plaintext_b64)
            .map_err(|e| (FailureKind::Integrity, e.to_string()))?;
        let chunk: SignalChunk =
            serde_json::from_slice(&plaintext).map_err(|e| (FailureKind::Analytic, format!("stored chunk: {e}")))?;
        let input = serialize_trace(&chunk.samples);

        let started = Instant::now();
        tokio::time::sleep(Duration::from_millis(app.launch_ms)).await;
        let program = self
            .programs
            .get(&app.entrypoint)
            .ok_or((FailureKind::CatalogueMiss, app.entrypoint.clone()))?;
        let dir = self.work_dir.join(&req.task_id);
        let out = tokio::task::spawn_blocking(move || {
            std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
            let r = run_with_files(&program, &app, &dir, &input);
            let _ = std::fs::remove_dir_all(&dir);
            r
        })
        .await
        .map_err(|e| (FailureKind::Analytic, e.to_string()))?
        .map_err(|e| (FailureKind::Analytic, e))?;
        self.cpu_busy_ms
            .fetch_add(started.elapsed().as_millis() as u64, Ordering::SeqCst);
        let mut result: AnalysisResult =
            serde_json::from_slice(&out).map_err(|e| (FailureKind::Analytic, format!("output file: {e}")))?;
        result.task_id = req.task_id.clone();
        Ok(result)
    }

    async fn execute(self: Arc<Self>, req: ExecuteRequest) {
        self.queued.fetch_add(1, Ordering::SeqCst);
        let permit = self.slots.clone().acquire_owned().await;
        self.queued.fetch_sub(1, Ordering::SeqCst);
        self.busy.fetch_add(1, Ordering::SeqCst);
        let outcome = match self.run_task(&req).await {
            Ok(result) => TaskOutcome::Completed { result },
            Err((kind, reason)) => TaskOutcome::Failed { kind, reason },
        };
        self.busy.fetch_sub(1, Ordering::SeqCst);
        drop(permit);
        if !self.alive.load(Ordering::SeqCst) {
            return;
        }
        let notice = CompletionNotice {
            task_id: req.task_id.clone(),
            node_id: self.config.node_id.clone(),
            outcome,
            cpu_busy_ms: self.cpu_busy_ms.load(Ordering::SeqCst),
        };
        for attempt in 0..3 {
            match self
                .client
                .post(&req.master_address, "/complete", MsgType::Result, &notice)
                .await
            {
                Ok(_) => return,
                Err(e) if e.is_transport() => {
                    tokio::time::sleep(Duration::from_millis(200 * (attempt + 1))).await;
                }
                Err(e) => {
                    tracing::warn!(task = %req.task_id, "completion rejected: {e}");
                    return;
                }
            }
        }
    }
}

type S = State<Arc<WorkerNode>>;

async fn h_status(State(n): S) -> Response {
    net::reply(n.node_id(), MsgType::Status, &n.status())
}

async fn h_execute(State(n): S, env: Envelope) -> Result<Response, ApiError> {
    let req: ExecuteRequest = env.body()?;
    tokio::spawn(n.clone().execute(req));
    Ok(net::reply(n.node_id(), MsgType::Ack, &Ack::OK))
}

async fn h_store(State(n): S, env: Envelope) -> Result<Response, ApiError> {
    let req: StoreRequest = env.body()?;
    let plain = B64
        .decode(&req.plaintext_b64)
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    n.store_data(&req.data_key, &plain, &req.owner_master)?;
    Ok(net::reply(n.node_id(), MsgType::Ack, &Ack::OK))
}

#[derive(Deserialize)]
struct MasterQuery {
    master: String,
    #[serde(default)]
    index: Option<u64>,
}

async fn h_fetch(State(n): S, Path(key): Path<String>, Query(q): Query<MasterQuery>) -> Result<Response, ApiError> {
    let plain = n.fetch_data(&key, &q.master)?;
    Ok(net::reply(
        n.node_id(),
        MsgType::Data,
        &DataReply {
            data_key: key,
            plaintext_b64: B64.encode(plain),
        },
    ))
}

async fn h_put_credential(State(n): S, env: Envelope) -> Result<Response, ApiError> {
    let rec: CredentialRecord = env.body()?;
    Ok(net::reply(n.node_id(), MsgType::Credential, &n.put_credential(rec)))
}

async fn h_get_credential(State(n): S, Query(q): Query<MasterQuery>) -> Result<Response, ApiError> {
    let e = n
        .get_credential(&q.master, q.index)
        .ok_or_else(|| ApiError::not_found(format!("no credential for {} {:?}", q.master, q.index)))?;
    Ok(net::reply(n.node_id(), MsgType::Credential, &e))
}

#[derive(Deserialize)]
struct BlockBody {
    #[serde(flatten)]
    push: BlockPush,
    difficulty: u32,
}

async fn h_block(State(n): S, env: Envelope) -> Result<Response, ApiError> {
    let b: BlockBody = env.body()?;
    Ok(net::reply(n.node_id(), MsgType::BlockVerdict, &n.accept_block(b.push, b.difficulty)))
}

async fn h_image(State(n): S, env: Envelope) -> Result<Response, ApiError> {
    let image: MasterImage = env.body()?;
    let ack = n.accept_image(image)?;
    Ok(net::reply(n.node_id(), MsgType::ImageAck, &ack))
}

async fn h_chain(State(n): S, Query(q): Query<MasterQuery>) -> Result<Response, ApiError> {
    let c = n
        .replica_chain(&q.master)
        .ok_or_else(|| ApiError::not_found(format!("no replica for {}", q.master)))?;
    Ok(net::reply(n.node_id(), MsgType::Chain, &c))
}

async fn h_chain_tip(State(n): S, Query(q): Query<MasterQuery>) -> Response {
    net::reply(n.node_id(), MsgType::ChainTip, &n.chain_tip(&q.master))
}

async fn h_chain_replace(State(n): S, env: Envelope) -> Result<Response, ApiError> {
    let r: ChainReplace = env.body()?;
    n.replace_chain(&r.master_id, r.chain)
        .map_err(|v| ApiError::bad_request(format!("replacement chain invalid: {v:?}")))?;
    Ok(net::reply(n.node_id(), MsgType::Ack, &Ack::OK))
}

async fn h_catalogue(State(n): S, Path(app): Path<String>) -> Result<Response, ApiError> {
    let d = n
        .catalogue_entry(&app)
        .ok_or_else(|| ApiError::not_found(format!("app `{app}` not in catalogue")))?;
    let package_b64 = B64.encode(d.package());
    Ok(net::reply(
        n.node_id(),
        MsgType::Catalogue,
        &CatalogueReply {
            descriptor: d,
            package_b64,
        },
    ))
}

async fn h_master(State(n): S, Query(q): Query<MasterQuery>) -> Response {
    let promoted = n.promoted_broker(&q.master);
    let known = n.image(&q.master).map(|i| i.master_address);
    let lookup = MasterLookup {
        master_id: q.master,
        promoted: promoted.is_some(),
        address: promoted.or(known),
    };
    net::reply(n.node_id(), MsgType::MasterLookup, &lookup)
}
