//! Bodies of the envelopes exchanged between brokers, workers, the cloud
//! and gateways.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::apps::AppDescriptor;
use crate::ledger::{BlockKeyRecord, BlockVerdict, Chain, DataBlock};
use crate::model::{AnalysisResult, AnalysisTask, NodeDescriptor, NodeId, NodeRole};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceStatus {
    pub node_id: NodeId,
    pub role: NodeRole,
    pub busy_slots: u32,
    pub total_slots: u32,
    pub queued: u32,
    pub uptime_ms: u64,
    pub cpu_busy_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecuteRequest {
    pub task_id: String,
    pub app_id: String,
    pub data_key: String,
    pub master_id: NodeId,
    pub master_address: String,
    pub repository_address: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    CatalogueMiss,
    NotFound,
    Integrity,
    Analytic,
    Unreachable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum TaskOutcome {
    Completed { result: AnalysisResult },
    Failed { kind: FailureKind, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionNotice {
    pub task_id: String,
    pub node_id: NodeId,
    pub outcome: TaskOutcome,
    pub cpu_busy_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreRequest {
    pub data_key: String,
    pub owner_master: NodeId,
    pub plaintext_b64: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataReply {
    pub data_key: String,
    pub plaintext_b64: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CredentialBody {
    BlockKey { block_index: u64, pub_key_b64: String },
    ArchiveKey { key_b64: String, master_address: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredentialRecord {
    pub master_id: NodeId,
    #[serde(flatten)]
    pub body: CredentialBody,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredentialEntry {
    pub record: CredentialRecord,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPush {
    pub master_id: NodeId,
    pub block: DataBlock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockVerdictReply {
    pub verdict: BlockVerdict,
    /// Index the verdict refers to; differs from the pushed block when the
    /// local tip itself failed re-verification.
    pub index: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainTip {
    pub length: u64,
    pub tip_hash: String,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainReplace {
    pub master_id: NodeId,
    pub chain: Chain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogueReply {
    pub descriptor: AppDescriptor,
    pub package_b64: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MasterLookup {
    pub master_id: NodeId,
    pub address: Option<String>,
    pub promoted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Queued,
    Dispatched,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceConfigEntry {
    pub task_id: String,
    pub assigned_node: Option<NodeId>,
    pub app_id: String,
    pub state: TaskState,
    pub assigned_at: u64,
}

/// Everything the replica holder keeps about one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskImage {
    pub task: AnalysisTask,
    pub repository: NodeId,
    pub entry: ResourceConfigEntry,
    pub result: Option<AnalysisResult>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionImage {
    pub session_id: String,
    pub data_key: String,
    pub repository: NodeId,
    pub block_hash: Option<String>,
}

/// Replicated broker state. A full image has `base_version == None`; a
/// delta carries only tasks, sessions and key records changed since
/// `base_version`. Blocks travel separately through `/block`, so the holder
/// rebuilds the chain from its own replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterImage {
    pub master_id: NodeId,
    pub master_address: String,
    pub image_version: u64,
    pub base_version: Option<u64>,
    pub tasks: Vec<TaskImage>,
    pub sessions: Vec<SessionImage>,
    pub key_records: Vec<BlockKeyRecord>,
    pub worker_registry: Vec<NodeDescriptor>,
    pub archive_key_b64: String,
    pub settings: crate::broker::BrokerConfig,
    pub chain_length: u64,
    pub chain_tip: String,
    pub next_seq: u64,
    /// Dispatch log entries from index `dispatch_log_base` on.
    pub dispatch_log_base: u64,
    pub dispatch_log: Vec<(NodeId, u64)>,
}

impl MasterImage {
    pub fn resource_config(&self) -> Vec<ResourceConfigEntry> {
        self.tasks.iter().map(|t| t.entry.clone()).collect()
    }

    /// Applies a delta on top of this image.
    pub fn merge(&mut self, delta: MasterImage) {
        let mut tasks: BTreeMap<String, TaskImage> =
            std::mem::take(&mut self.tasks).into_iter().map(|t| (t.task.task_id.clone(), t)).collect();
        for t in delta.tasks {
            tasks.insert(t.task.task_id.clone(), t);
        }
        let mut sessions: BTreeMap<String, SessionImage> =
            std::mem::take(&mut self.sessions).into_iter().map(|s| (s.session_id.clone(), s)).collect();
        for s in delta.sessions {
            sessions.insert(s.session_id.clone(), s);
        }
        let mut keys: BTreeMap<u64, BlockKeyRecord> =
            std::mem::take(&mut self.key_records).into_iter().map(|k| (k.block_index, k)).collect();
        for k in delta.key_records {
            keys.insert(k.block_index, k);
        }
        let mut log = std::mem::take(&mut self.dispatch_log);
        log.truncate(delta.dispatch_log_base as usize);
        log.extend(delta.dispatch_log.iter().cloned());
        let mut tasks: Vec<TaskImage> = tasks.into_values().collect();
        tasks.sort_by_key(|t| (t.task.created_at, t.task.task_id.clone()));
        *self = MasterImage {
            tasks,
            sessions: sessions.into_values().collect(),
            key_records: keys.into_values().collect(),
            base_version: None,
            dispatch_log_base: 0,
            dispatch_log: log,
            ..delta
        };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageStatus {
    Stored,
    Unchanged,
    NeedsFull,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageAck {
    pub status: ImageStatus,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReceipt {
    pub data_key: String,
    pub block_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyzeRequest {
    pub session_id: String,
    #[serde(default)]
    pub app_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskAccepted {
    pub task_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum ResultReply {
    Pending,
    Completed { result: AnalysisResult },
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerChainRow {
    pub node_id: NodeId,
    pub reachable: bool,
    pub length: u64,
    pub tip_hash: String,
    pub valid: bool,
    pub matches_master: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainStatus {
    pub enabled: bool,
    pub master_length: u64,
    pub master_tip: String,
    pub workers: Vec<WorkerChainRow>,
    #[serde(default)]
    pub alerts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub master_id: NodeId,
    pub address: String,
    pub replica_holder: Option<String>,
    pub image_version: u64,
    pub chain_length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerInfo {
    pub descriptor: NodeDescriptor,
    pub active: u32,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceConfigReply {
    pub entries: Vec<ResourceConfigEntry>,
    /// Every dispatch in order: (node, wall-clock ms).
    pub dispatch_log: Vec<(NodeId, u64)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub ok: bool,
}

impl Ack {
    pub const OK: Ack = Ack { ok: true };
}
