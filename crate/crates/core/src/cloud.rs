//! Simulated cloud executor. Brokers append records to a newline-delimited
//! cloud input file; one polling loop owns the read cursor and launches each
//! pending record on simulated instances behind a WAN delay model.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tokio::task::JoinHandle;

use crate::analytic::{self, AnalyticConfig, SegmentSummary, Shard};
use crate::apps::{AppDescriptor, ProgramRegistry, APNEA_ENTRYPOINT};
use crate::ledger::DataBlock;
use crate::model::{parse_input_file, serialize_trace, AnalysisResult, MsgType, SignalChunk, WireEnvelope};
use crate::net::{self, ByteMeter, NetClient};
use crate::proto::{CompletionNotice, FailureKind, TaskOutcome};

pub const CLOUD_NODE_ID: &str = "cloud";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudModel {
    Task,
    Thread,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordState {
    Pending,
    Running,
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloudInputRecord {
    pub task_id: String,
    pub app_id: String,
    /// Base64 of the analytic input file.
    pub payload_b64: String,
    pub model: CloudModel,
    pub shards: u32,
    pub state: RecordState,
    /// Hash of the ingest block whose payload this input was derived from.
    pub block_hash: Option<String>,
    pub master_id: String,
    pub master_address: String,
}

impl CloudInputRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.shards == 0 {
            return Err("shards must be >= 1".into());
        }
        if self.model == CloudModel::Task && self.shards != 1 {
            return Err(format!("task model with {} shards", self.shards));
        }
        Ok(())
    }
}

/// Appends one record line and returns the bytes written.
pub fn append_record(path: &Path, record: &CloudInputRecord) -> std::io::Result<u64> {
    let mut line = serde_json::to_vec(&serde_json::to_value(record)?)?;
    line.push(b'\n');
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(&line)?;
    Ok(line.len() as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WanModel {
    pub rtt_ms: f64,
    pub uplink_bps: f64,
    pub downlink_bps: f64,
}

impl Default for WanModel {
    fn default() -> Self {
        Self {
            rtt_ms: 100.0,
            uplink_bps: 2_000_000.0,
            downlink_bps: 7_000_000.0,
        }
    }
}

impl WanModel {
    pub fn validate(&self) -> Result<(), String> {
        if self.rtt_ms < 0.0 || !(self.uplink_bps > 0.0) || !(self.downlink_bps > 0.0) {
            return Err(format!("invalid WAN model {self:?}"));
        }
        Ok(())
    }

    /// Half a round trip plus serialisation time at the link rate.
    pub fn simulate_delay(&self, direction: Direction, payload_bytes: u64) -> f64 {
        let bps = match direction {
            Direction::Up => self.uplink_bps,
            Direction::Down => self.downlink_bps,
        };
        self.rtt_ms / 2.0 + payload_bytes as f64 * 8.0 / bps * 1000.0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CloudConfig {
    pub input_file: PathBuf,
    pub poll_ms: u64,
    /// Each poll period is drawn from `poll_ms` plus or minus this much, so a
    /// strictly sequential submitter does not lock onto one phase of the cycle.
    pub poll_jitter_ms: u64,
    #[serde(flatten)]
    pub wan: WanModel,
    pub instances: u32,
    /// Execution time multiplier of a cloud instance relative to a fog node.
    pub slowdown: f64,
    pub catalogue: Vec<AppDescriptor>,
}

impl Default for CloudConfig {
    fn default() -> Self {
        Self {
            input_file: PathBuf::from("cloud-input.jsonl"),
            poll_ms: 500,
            poll_jitter_ms: 50,
            wan: WanModel::default(),
            instances: 4,
            slowdown: 1.0,
            catalogue: vec![AppDescriptor::apnea()],
        }
    }
}

/// Membership verdict the analytic waits on before it runs.
type Gate = tokio::sync::watch::Receiver<Option<Result<(), String>>>;

fn sleep_ms(ms: f64) -> tokio::time::Sleep {
    tokio::time::sleep(Duration::from_secs_f64(ms.max(0.0) / 1000.0))
}

pub struct CloudSim {
    config: CloudConfig,
    cursor: Mutex<u64>,
    seen: Mutex<HashSet<String>>,
    states: Mutex<HashMap<String, RecordState>>,
    quarantined: Mutex<Vec<String>>,
    instances: Arc<Semaphore>,
    cpu_busy_ms: AtomicU64,
    executions: AtomicU64,
    client: NetClient,
    programs: ProgramRegistry,
    analytic: AnalyticConfig,
}

pub struct CloudHandle {
    pub sim: Arc<CloudSim>,
    poller: JoinHandle<()>,
}

impl CloudHandle {
    pub fn kill(&self) {
        self.poller.abort();
    }
}

impl Drop for CloudHandle {
    fn drop(&mut self) {
        self.poller.abort();
    }
}

impl CloudSim {
    pub fn new(config: CloudConfig, meter: Arc<ByteMeter>) -> Result<Arc<Self>, String> {
        config.wan.validate()?;
        if !std::fs::exists(&config.input_file).unwrap_or(false) {
            std::fs::write(&config.input_file, b"").map_err(|e| e.to_string())?;
        }
        Ok(Arc::new(Self {
            instances: Arc::new(Semaphore::new(config.instances.max(1) as usize)),
            config,
            cursor: Mutex::new(0),
            seen: Mutex::new(HashSet::new()),
            states: Mutex::new(HashMap::new()),
            quarantined: Mutex::new(Vec::new()),
            cpu_busy_ms: AtomicU64::new(0),
            executions: AtomicU64::new(0),
            client: NetClient::new(CLOUD_NODE_ID, meter),
            programs: ProgramRegistry::default(),
            analytic: AnalyticConfig::default(),
        }))
    }

    pub fn start(config: CloudConfig, meter: Arc<ByteMeter>) -> Result<CloudHandle, String> {
        let sim = Self::new(config, meter)?;
        let s = sim.clone();
        let poller = tokio::spawn(async move {
            let base = s.config.poll_ms.max(1) as i64;
            let jitter = s.config.poll_jitter_ms.min(s.config.poll_ms / 2) as i64;
            let mut next = tokio::time::Instant::now();
            loop {
                let offset = if jitter > 0 { rand::rng().random_range(-jitter..=jitter) } else { 0 };
                next += Duration::from_millis((base + offset) as u64);
                tokio::time::sleep_until(next).await;
                match s.poll_cycle() {
                    Ok(records) => {
                        for r in records {
                            tokio::spawn(s.clone().process(r));
                        }
                    }
                    Err(e) => tracing::warn!("cloud poll failed: {e}"),
                }
            }
        });
        Ok(CloudHandle { sim, poller })
    }

    pub fn config(&self) -> &CloudConfig {
        &self.config
    }

    pub fn cpu_busy_ms(&self) -> u64 {
        self.cpu_busy_ms.load(Ordering::SeqCst)
    }

    /// Number of record executions started so far.
    pub fn executions(&self) -> u64 {
        self.executions.load(Ordering::SeqCst)
    }

    pub fn quarantined(&self) -> Vec<String> {
        self.quarantined.lock().unwrap().clone()
    }

    pub fn state_of(&self, task_id: &str) -> Option<RecordState> {
        self.states.lock().unwrap().get(task_id).copied()
    }

    /// Reads every complete line past the cursor and moves pending records
    /// to running. Returns the records to execute.
    pub fn poll_cycle(&self) -> std::io::Result<Vec<CloudInputRecord>> {
        let mut cursor = self.cursor.lock().unwrap();
        let mut f = std::fs::File::open(&self.config.input_file)?;
        f.seek(SeekFrom::Start(*cursor))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf)?;
        let complete = buf.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        *cursor += complete as u64;
        let mut picked = Vec::new();
        for line in buf[..complete].split(|b| *b == b'\n').filter(|l| !l.is_empty()) {
            let record = serde_json::from_slice::<CloudInputRecord>(line)
                .map_err(|e| e.to_string())
                .and_then(|r| r.validate().map(|_| r));
            let record = match record {
                Ok(r) => r,
                Err(reason) => {
                    tracing::warn!("quarantined cloud record: {reason}");
                    self.quarantined.lock().unwrap().push(reason);
                    continue;
                }
            };
            if record.state != RecordState::Pending || !self.seen.lock().unwrap().insert(record.task_id.clone()) {
                continue;
            }
            self.states
                .lock()
                .unwrap()
                .insert(record.task_id.clone(), RecordState::Running);
            picked.push(record);
        }
        Ok(picked)
    }

    fn app(&self, app_id: &str) -> Result<AppDescriptor, String> {
        self.config
            .catalogue
            .iter()
            .find(|a| a.app_id == app_id)
            .cloned()
            .ok_or_else(|| format!("app `{app_id}` not in cloud catalogue"))
    }

    async fn verify_membership(&self, record: &CloudInputRecord, input: &[u8]) -> Result<(), String> {
        let Some(hash) = &record.block_hash else { return Ok(()) };
        let env = self
            .client
            .get(&record.master_address, &format!("/chain/block/{hash}"))
            .await
            .map_err(|e| format!("block {hash}: {e}"))?;
        sleep_ms(self.config.wan.simulate_delay(Direction::Up, env.body_bytes)).await;
        let block: DataBlock = net::body(&env).map_err(|e| e.to_string())?;
        if block.recompute_hash() != block.hash || &block.hash != hash {
            return Err(format!("block {hash} does not verify"));
        }
        let chunk: SignalChunk = block
            .payload()
            .and_then(|p| serde_json::from_slice(&p).ok())
            .ok_or_else(|| format!("block {hash} payload is not a chunk"))?;
        if serialize_trace(&chunk.samples) != input {
            return Err(format!("payload is not a member of block {hash}"));
        }
        Ok(())
    }

    /// Upload, launch, compute and download on one instance. Returns the
    /// compute output and its size on the wire.
    async fn on_instance<T, F>(&self, upload_bytes: u64, app: &AppDescriptor, gate: Option<Gate>, job: F) -> Result<T, String>
    where
        T: Serialize + Send + 'static,
        F: FnOnce() -> Result<T, String> + Send + 'static,
    {
        let _permit = self.instances.clone().acquire_owned().await.map_err(|e| e.to_string())?;
        let wan = self.config.wan;
        sleep_ms(wan.simulate_delay(Direction::Up, upload_bytes)).await;
        let started = Instant::now();
        sleep_ms(app.launch_ms as f64 * self.config.slowdown).await;
        if let Some(mut gate) = gate {
            let verdict = gate.wait_for(Option::is_some).await.map_err(|e| e.to_string())?.clone();
            verdict.expect("checked above")?;
        }
        let t0 = Instant::now();
        let out = tokio::task::spawn_blocking(job).await.map_err(|e| e.to_string())??;
        let compute = t0.elapsed().as_secs_f64() * 1000.0;
        sleep_ms(compute * (self.config.slowdown - 1.0)).await;
        self.cpu_busy_ms
            .fetch_add(started.elapsed().as_millis() as u64, Ordering::SeqCst);
        let down = WireEnvelope::new(MsgType::CloudDownload, CLOUD_NODE_ID, &out)
            .map_err(|e| e.to_string())?
            .body_bytes;
        self.client.meter().add(down);
        sleep_ms(wan.simulate_delay(Direction::Down, down)).await;
        Ok(out)
    }

    fn upload_bytes<T: Serialize>(&self, body: &T, package_b64: &str) -> Result<u64, String> {
        #[derive(Serialize)]
        struct Upload<'a, T> {
            input: &'a T,
            package_b64: &'a str,
        }
        let n = WireEnvelope::new(MsgType::CloudUpload, CLOUD_NODE_ID, &Upload { input: body, package_b64 })
            .map_err(|e| e.to_string())?
            .body_bytes;
        self.client.meter().add(n);
        Ok(n)
    }

    pub async fn run_task_model(&self, record: &CloudInputRecord) -> Result<AnalysisResult, String> {
        self.task_model(record, None).await
    }

    async fn task_model(&self, record: &CloudInputRecord, gate: Option<Gate>) -> Result<AnalysisResult, String> {
        let app = self.app(&record.app_id)?;
        let program = self
            .programs
            .get(&app.entrypoint)
            .ok_or_else(|| format!("no program `{}`", app.entrypoint))?;
        let input = B64.decode(&record.payload_b64).map_err(|e| e.to_string())?;
        let up = self.upload_bytes(&record.payload_b64, &B64.encode(app.package()))?;
        let out = self
            .on_instance(up, &app, gate, move || {
                let bytes = program(&input)?;
                serde_json::from_slice::<AnalysisResult>(&bytes).map_err(|e| e.to_string())
            })
            .await?;
        Ok(AnalysisResult {
            task_id: record.task_id.clone(),
            ..out
        })
    }

    pub async fn run_thread_model(&self, record: &CloudInputRecord) -> Result<AnalysisResult, String> {
        self.thread_model(record, None).await
    }

    async fn thread_model(&self, record: &CloudInputRecord, gate: Option<Gate>) -> Result<AnalysisResult, String> {
        if record.shards < 2 {
            return Err(format!("thread model needs at least 2 shards, got {}", record.shards));
        }
        let app = self.app(&record.app_id)?;
        if app.entrypoint != APNEA_ENTRYPOINT {
            return Err(format!("app `{}` cannot be sharded", app.app_id));
        }
        let input = B64.decode(&record.payload_b64).map_err(|e| e.to_string())?;
        let trace = parse_input_file(&input).map_err(|e| e.to_string())?;
        let config = self.analytic.clone();
        let package_b64 = B64.encode(app.package());
        let shards = analytic::split_shards(&trace, record.shards as usize, &config);
        let jobs = shards.into_iter().map(|shard: Shard| {
            let config = config.clone();
            let app = app.clone();
            let up = self.upload_bytes(&shard, &package_b64);
            let gate = gate.clone();
            async move {
                let up = up?;
                self.on_instance(up, &app, gate, move || Ok(analytic::analyze_segment(&shard, &config)))
                    .await
            }
        });
        let parts: Vec<SegmentSummary> = futures::future::join_all(jobs).await.into_iter().collect::<Result<_, _>>()?;
        let mut result = analytic::merge_segments(&trace, parts, &config).map_err(|e| e.to_string())?;
        result.task_id = record.task_id.clone();
        Ok(result)
    }

    /// Executes one record and reports the outcome to its master.
    pub async fn process(self: Arc<Self>, record: CloudInputRecord) {
        self.executions.fetch_add(1, Ordering::SeqCst);
        let outcome = match self.execute(&record).await {
            Ok(result) => TaskOutcome::Completed { result },
            Err((kind, reason)) => TaskOutcome::Failed { kind, reason },
        };
        self.states
            .lock()
            .unwrap()
            .insert(record.task_id.clone(), RecordState::Done);
        let notice = CompletionNotice {
            task_id: record.task_id.clone(),
            node_id: CLOUD_NODE_ID.into(),
            outcome,
            cpu_busy_ms: self.cpu_busy_ms(),
        };
        if let Err(e) = self
            .client
            .post(&record.master_address, "/complete", MsgType::Result, &notice)
            .await
        {
            tracing::warn!(task = %record.task_id, "cloud result undeliverable: {e}");
        }
    }

    pub async fn execute(&self, record: &CloudInputRecord) -> Result<AnalysisResult, (FailureKind, String)> {
        let input = B64
            .decode(&record.payload_b64)
            .map_err(|e| (FailureKind::Analytic, e.to_string()))?;
        // Upload and instance launch overlap the membership check; the
        // analytic itself waits on the verdict.
        let (tx, rx) = tokio::sync::watch::channel(None);
        let verify = async {
            let v = self.verify_membership(record, &input).await;
            let _ = tx.send(Some(v.clone()));
            v
        };
        let gate = record.block_hash.is_some().then_some(rx);
        let run = async {
            match record.model {
                CloudModel::Task => self.task_model(record, gate).await,
                CloudModel::Thread => self.thread_model(record, gate).await,
            }
        };
        let (verdict, r) = tokio::join!(verify, run);
        verdict.map_err(|e| (FailureKind::Integrity, e))?;
        r.map_err(|e| (FailureKind::Analytic, e))
    }
}
