//! Shared domain types, the oximeter input-file format and the JSON wire
//! envelope exchanged by every node.

use std::fmt;
use std::str::FromStr;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub type NodeId = String;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("serialization: {0}")]
    Serialization(#[from] serde_json::Error),
    #[error("unknown message type `{0}`")]
    UnknownMsgType(String),
    #[error("envelope body is {actual} bytes but header declares {declared}")]
    BodyLength { declared: u64, actual: u64 },
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeRole {
    Broker,
    ComputeWorker,
    RepositoryWorker,
    CloudInstance,
}

impl NodeRole {
    pub fn is_worker(self) -> bool {
        matches!(self, NodeRole::ComputeWorker | NodeRole::RepositoryWorker)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeDescriptor {
    pub node_id: NodeId,
    pub address: String,
    pub role: NodeRole,
    pub capacity_slots: u32,
}

impl NodeDescriptor {
    pub fn new(node_id: impl Into<String>, address: impl Into<String>, role: NodeRole) -> Self {
        Self {
            node_id: node_id.into(),
            address: address.into(),
            role,
            capacity_slots: 1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.node_id.is_empty() {
            return Err(ModelError::Invalid {
                what: "node_id",
                reason: "empty".into(),
            });
        }
        if self.capacity_slots == 0 {
            return Err(ModelError::Invalid {
                what: "capacity_slots",
                reason: "must be at least 1".into(),
            });
        }
        validate_address(&self.address)
    }
}

/// Accepts `host:port` with a non-empty host and a numeric port.
pub fn validate_address(address: &str) -> Result<(), ModelError> {
    let invalid = |reason: &str| ModelError::Invalid {
        what: "address",
        reason: format!("`{address}`: {reason}"),
    };
    let (host, port) = address.rsplit_once(':').ok_or_else(|| invalid("missing port"))?;
    if host.is_empty() {
        return Err(invalid("missing host"));
    }
    port.parse::<u16>().map_err(|_| invalid("bad port"))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OximeterSample {
    pub timestamp_ms: u64,
    pub heart_rate_bpm: u32,
    pub spo2_pct: u8,
}

impl OximeterSample {
    pub const fn new(timestamp_ms: u64, heart_rate_bpm: u32, spo2_pct: u8) -> Self {
        Self {
            timestamp_ms,
            heart_rate_bpm,
            spo2_pct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalChunk {
    pub session_id: String,
    pub samples: Vec<OximeterSample>,
    pub recorded_seconds: f64,
    /// Padding carried so that an ingest body reaches the nominal signal size.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub filler: String,
}

impl SignalChunk {
    pub fn new(session_id: impl Into<String>, samples: Vec<OximeterSample>, recorded_seconds: f64) -> Self {
        Self {
            session_id: session_id.into(),
            samples,
            recorded_seconds,
            filler: String::new(),
        }
    }

    /// Checks the invariants required of a chunk submitted for ingest.
    pub fn validate(&self) -> Result<(), ModelError> {
        let invalid = |reason: String| ModelError::Invalid {
            what: "signal chunk",
            reason,
        };
        if self.samples.is_empty() {
            return Err(invalid("no samples".into()));
        }
        for (i, pair) in self.samples.windows(2).enumerate() {
            if pair[1].timestamp_ms <= pair[0].timestamp_ms {
                return Err(invalid(format!("timestamps not increasing at sample {}", i + 1)));
            }
        }
        if let Some(s) = self.samples.iter().find(|s| s.spo2_pct > 100) {
            return Err(invalid(format!("spo2 {} above 100", s.spo2_pct)));
        }
        let last_s = self.samples.last().map_or(0.0, |s| s.timestamp_ms as f64 / 1000.0);
        if !(self.recorded_seconds >= last_s) {
            return Err(invalid(format!(
                "recorded_seconds {} shorter than last timestamp {last_s}",
                self.recorded_seconds
            )));
        }
        Ok(())
    }

    /// Grows `filler` so the canonical JSON encoding is at least `target` bytes.
    pub fn pad_to(&mut self, target: usize) {
        self.filler.clear();
        let base = canonical_bytes(self).map(|b| b.len()).unwrap_or(0);
        if base >= target {
            return;
        }
        // `,"filler":""` costs 12 bytes once the field is present.
        let overhead = 12;
        let n = target.saturating_sub(base + overhead).max(1);
        self.filler = "0".repeat(n);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisTask {
    pub task_id: String,
    pub session_id: String,
    pub app_id: String,
    pub input_ref: String,
    pub created_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Severity {
    NoMinimal,
    Mild,
    Moderate,
    Severe,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Severity::NoMinimal => "No/Minimal",
            Severity::Mild => "Mild",
            Severity::Moderate => "Moderate",
            Severity::Severe => "Severe",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisResult {
    pub task_id: String,
    pub dip_count_raw: u32,
    pub dip_count_verified: u32,
    pub ahi_per_hour: f64,
    pub severity: Severity,
    pub min_spo2: u8,
    pub hr_min: f64,
    pub hr_max: f64,
    pub hr_avg: f64,
    pub hr_avg_delta: f64,
    pub dip_patterns: Vec<Vec<OximeterSample>>,
    pub latency_ms: u64,
    /// Set when heart statistics could not be computed (empty input).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl AnalysisResult {
    /// Checks the invariants that hold for any result without external state.
    pub fn is_consistent(&self) -> bool {
        self.dip_count_verified <= self.dip_count_raw
            && self.hr_min <= self.hr_avg + 1e-9
            && self.hr_avg <= self.hr_max + 1e-9
            && self.ahi_per_hour >= 0.0
            && crate::analytic::classify(self.ahi_per_hour) == self.severity
    }
}

/// Every request and response on the wire is one of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MsgType {
    Register,
    Ingest,
    IngestReceipt,
    Analyze,
    TaskAccepted,
    ResultQuery,
    Result,
    Pending,
    Status,
    Execute,
    DataPut,
    DataGet,
    Data,
    CredentialPut,
    CredentialGet,
    Credential,
    Block,
    BlockVerdict,
    Image,
    ImageAck,
    ChainTip,
    ChainFetch,
    Chain,
    ChainReplace,
    ChainStatus,
    CatalogueGet,
    Catalogue,
    Health,
    Workers,
    ResourceConfig,
    MasterLookup,
    CloudRecord,
    CloudUpload,
    CloudDownload,
    Ack,
    Error,
}

impl MsgType {
    pub const ALL: [MsgType; 36] = [
        MsgType::Register,
        MsgType::Ingest,
        MsgType::IngestReceipt,
        MsgType::Analyze,
        MsgType::TaskAccepted,
        MsgType::ResultQuery,
        MsgType::Result,
        MsgType::Pending,
        MsgType::Status,
        MsgType::Execute,
        MsgType::DataPut,
        MsgType::DataGet,
        MsgType::Data,
        MsgType::CredentialPut,
        MsgType::CredentialGet,
        MsgType::Credential,
        MsgType::Block,
        MsgType::BlockVerdict,
        MsgType::Image,
        MsgType::ImageAck,
        MsgType::ChainTip,
        MsgType::ChainFetch,
        MsgType::Chain,
        MsgType::ChainReplace,
        MsgType::ChainStatus,
        MsgType::CatalogueGet,
        MsgType::Catalogue,
        MsgType::Health,
        MsgType::Workers,
        MsgType::ResourceConfig,
        MsgType::MasterLookup,
        MsgType::CloudRecord,
        MsgType::CloudUpload,
        MsgType::CloudDownload,
        MsgType::Ack,
        MsgType::Error,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MsgType::Register => "register",
            MsgType::Ingest => "ingest",
            MsgType::IngestReceipt => "ingest_receipt",
            MsgType::Analyze => "analyze",
            MsgType::TaskAccepted => "task_accepted",
            MsgType::ResultQuery => "result_query",
            MsgType::Result => "result",
            MsgType::Pending => "pending",
            MsgType::Status => "status",
            MsgType::Execute => "execute",
            MsgType::DataPut => "data_put",
            MsgType::DataGet => "data_get",
            MsgType::Data => "data",
            MsgType::CredentialPut => "credential_put",
            MsgType::CredentialGet => "credential_get",
            MsgType::Credential => "credential",
            MsgType::Block => "block",
            MsgType::BlockVerdict => "block_verdict",
            MsgType::Image => "image",
            MsgType::ImageAck => "image_ack",
            MsgType::ChainTip => "chain_tip",
            MsgType::ChainFetch => "chain_fetch",
            MsgType::Chain => "chain",
            MsgType::ChainReplace => "chain_replace",
            MsgType::ChainStatus => "chain_status",
            MsgType::CatalogueGet => "catalogue_get",
            MsgType::Catalogue => "catalogue",
            MsgType::Health => "health",
            MsgType::Workers => "workers",
            MsgType::ResourceConfig => "resource_config",
            MsgType::MasterLookup => "master_lookup",
            MsgType::CloudRecord => "cloud_record",
            MsgType::CloudUpload => "cloud_upload",
            MsgType::CloudDownload => "cloud_download",
            MsgType::Ack => "ack",
            MsgType::Error => "error",
        }
    }
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MsgType {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MsgType::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| ModelError::UnknownMsgType(s.to_owned()))
    }
}

impl Serialize for MsgType {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for MsgType {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireEnvelope {
    pub msg_type: MsgType,
    pub sender_id: String,
    pub body: Value,
    pub body_bytes: u64,
}

impl WireEnvelope {
    pub fn new<T: Serialize>(msg_type: MsgType, sender_id: impl Into<String>, body: &T) -> Result<Self, ModelError> {
        let body = serde_json::to_value(body)?;
        let body_bytes = serde_json::to_vec(&body)?.len() as u64;
        Ok(Self {
            msg_type,
            sender_id: sender_id.into(),
            body,
            body_bytes,
        })
    }

    pub fn empty(msg_type: MsgType, sender_id: impl Into<String>) -> Self {
        Self {
            msg_type,
            sender_id: sender_id.into(),
            body: Value::Object(Default::default()),
            body_bytes: 2,
        }
    }

    pub fn body_as<T: DeserializeOwned>(&self) -> Result<T, ModelError> {
        Ok(T::deserialize(&self.body)?)
    }
}

/// Canonical JSON: object keys sorted lexicographically, no insignificant
/// whitespace. `serde_json::Value` keeps objects in a `BTreeMap`, so routing
/// through it sorts every level.
pub fn canonical_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, ModelError> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_vec(&v)?)
}

pub fn encode_envelope(msg: &WireEnvelope) -> Result<Vec<u8>, ModelError> {
    canonical_bytes(msg)
}

pub fn decode_envelope(bytes: &[u8]) -> Result<WireEnvelope, ModelError> {
    let raw: Value = serde_json::from_slice(bytes)?;
    if let Some(t) = raw.get("msg_type").and_then(Value::as_str) {
        t.parse::<MsgType>()?;
    }
    let env: WireEnvelope = serde_json::from_value(raw)?;
    let actual = serde_json::to_vec(&env.body)?.len() as u64;
    if actual != env.body_bytes {
        return Err(ModelError::BodyLength {
            declared: env.body_bytes,
            actual,
        });
    }
    Ok(env)
}

/// Renders samples as the analytic's input file: one
/// `<timestamp_ms> <heart_rate_bpm> <spo2_pct>` line per sample.
pub fn serialize_trace(samples: &[OximeterSample]) -> Vec<u8> {
    let mut out = String::with_capacity(samples.len() * 14);
    for s in samples {
        out.push_str(&format!("{} {} {}\n", s.timestamp_ms, s.heart_rate_bpm, s.spo2_pct));
    }
    out.into_bytes()
}

pub fn parse_input_file(bytes: &[u8]) -> Result<Vec<OximeterSample>, ModelError> {
    let text = std::str::from_utf8(bytes).map_err(|e| ModelError::Parse {
        line: 0,
        reason: format!("not UTF-8: {e}"),
    })?;
    let mut samples: Vec<OximeterSample> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| ModelError::Parse { line: line_no, reason };
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < 3 {
            return Err(err(format!("expected 3 columns, found {}", cols.len())));
        }
        let timestamp_ms = cols[0]
            .parse::<u64>()
            .map_err(|_| err(format!("timestamp `{}` is not an integer", cols[0])))?;
        let heart_rate_bpm = cols[1]
            .parse::<u32>()
            .map_err(|_| err(format!("heart rate `{}` is not an integer", cols[1])))?;
        let spo2_pct = cols[2]
            .parse::<u8>()
            .ok()
            .filter(|v| *v <= 100)
            .ok_or_else(|| err(format!("spo2 `{}` is not an integer in [0,100]", cols[2])))?;
        if let Some(prev) = samples.last() {
            if timestamp_ms <= prev.timestamp_ms {
                return Err(err(format!(
                    "timestamp {timestamp_ms} does not increase (previous {})",
                    prev.timestamp_ms
                )));
            }
        }
        samples.push(OximeterSample::new(timestamp_ms, heart_rate_bpm, spo2_pct));
    }
    Ok(samples)
}

/// Milliseconds since the Unix epoch.
pub fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
