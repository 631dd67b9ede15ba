//! Gateway side: simulates a pulse oximeter recording and drives the
//! ingest, analyze and result sequence against a broker, following the
//! broker to its promoted replica if it dies.

use std::path::PathBuf;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytic::AnalyticConfig;
use crate::model::{parse_input_file, AnalysisResult, MsgType, OximeterSample, SignalChunk, WireEnvelope};
use crate::net::{self, NetClient, NetError};
use crate::proto::*;

pub const DEFAULT_PAD_BYTES: usize = 18 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Healthy,
    Mild,
    Moderate,
    Severe,
    Scripted(PathBuf),
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "healthy" => Ok(Self::Healthy),
            "mild" => Ok(Self::Mild),
            "moderate" => Ok(Self::Moderate),
            "severe" => Ok(Self::Severe),
            other => Err(format!("unknown profile `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub master_address: String,
    pub session_id: String,
    pub record_seconds: f64,
    pub sensing_hz: f64,
    pub profile: Profile,
    pub pad_to_bytes: usize,
    pub seed: u64,
    /// Each result probe waits at most this long before asking again.
    pub poll_ms: u64,
    pub result_timeout_ms: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            master_address: "127.0.0.1:7000".into(),
            session_id: "session".into(),
            record_seconds: 180.0,
            sensing_hz: 2.0,
            profile: Profile::Healthy,
            pad_to_bytes: DEFAULT_PAD_BYTES,
            seed: 0,
            poll_ms: 250,
            result_timeout_ms: 120_000,
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("{0}")]
    Input(String),
    #[error("broker unreachable: {0}")]
    Transport(String),
    #[error("task failed: {0}")]
    TaskFailed(String),
}

impl GatewayError {
    pub fn exit_code(&self) -> i32 {
        match self {
            GatewayError::Transport(_) => 1,
            GatewayError::TaskFailed(_) => 2,
            GatewayError::Input(_) => 3,
        }
    }
}

impl From<NetError> for GatewayError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Transport(m) => GatewayError::Transport(m),
            other => GatewayError::TaskFailed(other.to_string()),
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.sensing_hz > 0.0 && self.sensing_hz.is_finite()) {
            return Err(GatewayError::Input("sensing_hz must be positive".into()));
        }
        if !(self.record_seconds > 0.0 && self.record_seconds.is_finite()) {
            return Err(GatewayError::Input("record_seconds must be positive".into()));
        }
        Ok(())
    }
}

/// Number of verified dips that puts a recording of `seconds` into the
/// band `[lo, hi)` events per hour, if any integer does.
fn dips_for_band(seconds: f64, lo: f64, hi: f64) -> Option<u32> {
    let n = (lo * seconds / 3600.0).ceil().max(1.0);
    (n * 3600.0 / seconds < hi).then_some(n as u32)
}

pub fn simulate_stream(config: &SessionConfig) -> Result<SignalChunk, GatewayError> {
    config.validate()?;
    let mut chunk = match &config.profile {
        Profile::Scripted(path) => {
            let bytes = std::fs::read(path).map_err(|e| GatewayError::Input(format!("{}: {e}", path.display())))?;
            let samples = parse_input_file(&bytes).map_err(|e| GatewayError::Input(format!("{}: {e}", path.display())))?;
            SignalChunk::new(config.session_id.clone(), samples, config.record_seconds)
        }
        profile => {
            let dips = match profile {
                Profile::Healthy => 0,
                Profile::Mild => dips_for_band(config.record_seconds, 5.0, 15.0)
                    .ok_or_else(|| no_band("mild", config.record_seconds))?,
                Profile::Moderate => dips_for_band(config.record_seconds, 15.0, 30.0)
                    .ok_or_else(|| no_band("moderate", config.record_seconds))?,
                Profile::Severe => dips_for_band(config.record_seconds, 30.0, f64::INFINITY)
                    .ok_or_else(|| no_band("severe", config.record_seconds))?,
                Profile::Scripted(_) => unreachable!(),
            };
            let samples = synth_trace(config, dips)?;
            SignalChunk::new(config.session_id.clone(), samples, config.record_seconds)
        }
    };
    chunk.pad_to(config.pad_to_bytes);
    Ok(chunk)
}

fn no_band(name: &str, seconds: f64) -> GatewayError {
    GatewayError::Input(format!("no whole number of dips lands in the {name} band for a {seconds} s recording"))
}

fn synth_trace(config: &SessionConfig, dips: u32) -> Result<Vec<OximeterSample>, GatewayError> {
    let n = (config.record_seconds * config.sensing_hz).round() as usize;
    let period_ms = 1000.0 / config.sensing_hz;
    let w = AnalyticConfig::default().hr_window_samples;
    let dip_len = (2 * w).min(n / (2 * dips.max(1) as usize));
    if dips > 0 && dip_len < 2 {
        return Err(GatewayError::Input(format!("{n} samples cannot hold {dips} dips")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let base_hr: u32 = rng.random_range(60..=80);
    let slot = n / dips.max(1) as usize;
    let starts: Vec<usize> = (0..dips as usize).map(|i| i * slot + slot / 2).collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let in_dip = starts.iter().any(|&s| i >= s && i < s + dip_len);
        let spo2 = if in_dip { rng.random_range(80..=86) } else { rng.random_range(94..=99) };
        let hr = if in_dip { base_hr + 15 } else { base_hr } + rng.random_range(0..=2);
        out.push(OximeterSample::new((i as f64 * period_ms).round() as u64, hr, spo2));
    }
    Ok(out)
}

/// Connection to a master that follows it to a promoted replica.
pub struct MasterLink {
    client: NetClient,
    address: String,
    master_id: Option<String>,
    replica_holder: Option<String>,
    pub failover_wait: Duration,
}

impl MasterLink {
    pub fn new(client: NetClient, address: impl Into<String>) -> Self {
        Self {
            client,
            address: address.into(),
            master_id: None,
            replica_holder: None,
            failover_wait: Duration::from_secs(15),
        }
    }

    pub fn address(&self) -> &str {
        &self.address
    }

    pub fn client(&self) -> &NetClient {
        &self.client
    }

    /// Learns the master id and its current replica holder.
    pub async fn refresh(&mut self) -> Result<Health, NetError> {
        let env = self.client.get(&self.address, "/health").await?;
        let h: Health = net::body(&env)?;
        self.master_id = Some(h.master_id.clone());
        self.replica_holder = h.replica_holder.clone();
        Ok(h)
    }

    async fn failover(&mut self) -> bool {
        let (Some(id), Some(holder)) = (self.master_id.clone(), self.replica_holder.clone()) else {
            return false;
        };
        let deadline = tokio::time::Instant::now() + self.failover_wait;
        while tokio::time::Instant::now() < deadline {
            if let Ok(env) = self.client.get(&holder, &format!("/master?master={id}")).await {
                if let Ok(MasterLookup {
                    address: Some(addr),
                    promoted: true,
                    ..
                }) = net::body::<MasterLookup>(&env)
                {
                    tracing::warn!(old = %self.address, new = %addr, "master failed over");
                    self.address = addr;
                    let _ = self.refresh().await;
                    return true;
                }
            }
            tokio::time::sleep(Duration::from_millis(250)).await;
        }
        false
    }

    pub async fn get(&mut self, path: &str) -> Result<WireEnvelope, NetError> {
        match self.client.get(&self.address, path).await {
            Err(e) if e.is_transport() && self.failover().await => self.client.get(&self.address, path).await,
            r => r,
        }
    }

    pub async fn post<T: Serialize>(&mut self, path: &str, t: MsgType, body: &T) -> Result<WireEnvelope, NetError> {
        match self.client.post(&self.address, path, t, body).await {
            Err(e) if e.is_transport() && self.failover().await => self.client.post(&self.address, path, t, body).await,
            r => r,
        }
    }

    pub async fn ingest(&mut self, chunk: &SignalChunk) -> Result<IngestReceipt, NetError> {
        let env = self.post("/ingest", MsgType::Ingest, chunk).await?;
        net::body(&env)
    }

    pub async fn analyze(&mut self, session_id: &str) -> Result<String, NetError> {
        let req = AnalyzeRequest {
            session_id: session_id.into(),
            app_id: None,
        };
        let env = self.post("/analyze", MsgType::Analyze, &req).await?;
        Ok(net::body::<TaskAccepted>(&env)?.task_id)
    }

    /// Polls until the task finishes or `timeout` passes.
    pub async fn await_result(
        &mut self,
        task_id: &str,
        poll_ms: u64,
        timeout: Duration,
    ) -> Result<AnalysisResult, GatewayError> {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let env = self.get(&format!("/result/{task_id}?wait_ms={poll_ms}")).await?;
            match net::body::<ResultReply>(&env)? {
                ResultReply::Completed { result } => return Ok(result),
                ResultReply::Failed { reason } => return Err(GatewayError::TaskFailed(reason)),
                ResultReply::Pending => {}
            }
            if tokio::time::Instant::now() >= deadline {
                return Err(GatewayError::TaskFailed(format!("no result for {task_id} within {timeout:?}")));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub master_address: String,
    pub receipt: IngestReceipt,
    pub result: AnalysisResult,
    pub round_trip_ms: u64,
}

pub async fn run_session(config: &SessionConfig, client: NetClient) -> Result<SessionReport, GatewayError> {
    let chunk = simulate_stream(config)?;
    let mut link = MasterLink::new(client, config.master_address.clone());
    link.refresh().await?;
    let started = std::time::Instant::now();
    let receipt = link.ingest(&chunk).await?;
    let task_id = link.analyze(&chunk.session_id).await?;
    let result = link
        .await_result(&task_id, config.poll_ms, Duration::from_millis(config.result_timeout_ms))
        .await?;
    Ok(SessionReport {
        master_address: link.address().to_owned(),
        receipt,
        result,
        round_trip_ms: started.elapsed().as_millis() as u64,
    })
}

pub fn format_report(r: &SessionReport) -> String {
    let x = &r.result;
    let mut s = String::new();
    s += &format!("task            {}\n", x.task_id);
    s += &format!("severity        {}\n", x.severity);
    s += &format!("ahi             {:.2} /h\n", x.ahi_per_hour);
    s += &format!("dips            {} raw, {} verified\n", x.dip_count_raw, x.dip_count_verified);
    s += &format!("heart rate      min {:.0}  max {:.0}  avg {:.1}  avg delta {:.2}\n", x.hr_min, x.hr_max, x.hr_avg, x.hr_avg_delta);
    s += &format!("latency         {} ms at master, {} ms round trip\n", x.latency_ms, r.round_trip_ms);
    if let Some(h) = &r.receipt.block_hash {
        s += &format!("block           {h}\n");
    }
    for w in &r.receipt.warnings {
        s += &format!("warning         {w}\n");
    }
    s
}

pub async fn chain_status(client: NetClient, master: &str) -> Result<ChainStatus, GatewayError> {
    let env = client.get(master, "/chain/status").await?;
    Ok(net::body(&env)?)
}

pub fn format_chain_status(s: &ChainStatus) -> String {
    if !s.enabled {
        return "chain disabled\n".into();
    }
    let short = |h: &str| h.chars().take(16).collect::<String>();
    let mut out = format!("master  length {:>4}  tip {}\n", s.master_length, short(&s.master_tip));
    out += &format!("{:<20} {:>6}  {:<16}  {}\n", "node", "length", "tip", "status");
    for r in &s.workers {
        let status = match (r.reachable, r.valid, r.matches_master) {
            (false, _, _) => "UNREACHABLE",
            (true, false, _) => "INVALID",
            (true, true, false) => "MISMATCH",
            (true, true, true) => "ok",
        };
        out += &format!("{:<20} {:>6}  {:<16}  {}\n", r.node_id, r.length, short(&r.tip_hash), status);
    }
    for a in &s.alerts {
        out += &format!("alert: {a}\n");
    }
    out
}
