//! Experiment matrix: interval x blockchain x infrastructure. Each scenario
//! launches its own cluster, drives sequential tasks for a fixed duration
//! and reports counts, latencies, bytes and CPU time.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::ProvisionMode;
use crate::cloud::WanModel;
use crate::cluster::{Cluster, ClusterSpec};
use crate::gateway::{simulate_stream, MasterLink, Profile, SessionConfig};
use crate::model::SignalChunk;
use crate::net::NetClient;

pub const INTERVAL_MS: u64 = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalSetting {
    With,
    Without,
}

impl std::fmt::Display for IntervalSetting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::With => "with",
            Self::Without => "without",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSettings {
    pub interval: IntervalSetting,
    pub blockchain: bool,
    pub infra: ProvisionMode,
    pub duration_seconds: u64,
    pub recording_seconds: u64,
    pub workers: usize,
    pub seed: u64,
    pub wan: WanModel,
    pub difficulty: u32,
    /// Application start-up cost per execution, on fog and cloud alike.
    pub launch_ms: u64,
}

impl Default for ScenarioSettings {
    fn default() -> Self {
        Self {
            interval: IntervalSetting::Without,
            blockchain: false,
            infra: ProvisionMode::FogOnly,
            duration_seconds: 300,
            recording_seconds: 180,
            workers: 1,
            seed: 0,
            wan: WanModel::default(),
            difficulty: crate::ledger::DEFAULT_DIFFICULTY,
            launch_ms: 750,
        }
    }
}

impl ScenarioSettings {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.duration_seconds == 0 || self.recording_seconds == 0 {
            return Err(BenchError::Settings("duration and recording must be positive".into()));
        }
        if self.infra != ProvisionMode::CloudOnly && self.workers == 0 {
            return Err(BenchError::Settings("fog settings need at least one worker".into()));
        }
        self.wan.validate().map_err(BenchError::Settings)
    }

    /// All twelve cells sharing this seed and base settings.
    pub fn matrix(&self) -> Vec<ScenarioSettings> {
        let mut out = Vec::new();
        for infra in [ProvisionMode::FogOnly, ProvisionMode::CloudOnly, ProvisionMode::Integrated] {
            for interval in [IntervalSetting::With, IntervalSetting::Without] {
                for blockchain in [false, true] {
                    out.push(ScenarioSettings {
                        infra,
                        interval,
                        blockchain,
                        ..self.clone()
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("bad settings: {0}")]
    Settings(String),
    #[error("cluster launch failed: {0}")]
    Launch(String),
    #[error("scenario failed: {0}")]
    Scenario(String),
    #[error("incomplete matrix: missing {0}")]
    IncompleteMatrix(String),
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub settings: ScenarioSettings,
    pub tasks_completed: u64,
    pub latency_ms: Vec<u64>,
    pub bytes_transferred: u64,
    pub cpu_busy_ms: u64,
    pub wall_seconds: f64,
    /// Gaps between consecutive dispatches, in dispatch order.
    pub dispatch_gaps_ms: Vec<u64>,
}

pub fn median(xs: &[u64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

/// Nearest-rank percentile.
pub fn percentile(xs: &[u64], p: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_unstable();
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1] as f64
}

impl MetricsReport {
    pub fn summary(&self) -> ScenarioSummary {
        ScenarioSummary {
            interval: self.settings.interval,
            blockchain: self.settings.blockchain,
            infra: self.settings.infra,
            tasks: self.tasks_completed,
            median_latency_ms: median(&self.latency_ms),
            p95_latency_ms: percentile(&self.latency_ms, 95.0),
            bytes: self.bytes_transferred,
            cpu_busy_ms: self.cpu_busy_ms,
        }
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub interval: IntervalSetting,
    pub blockchain: bool,
    pub infra: ProvisionMode,
    pub tasks: u64,
    pub median_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub bytes: u64,
    pub cpu_busy_ms: u64,
}

/// The recording used for the `i`th task of a run. Identical across all
/// cells with the same seed.
pub fn recording(seed: u64, i: u64, seconds: u64) -> Result<SignalChunk, BenchError> {
    let profile = match i % 3 {
        0 => Profile::Healthy,
        1 => Profile::Moderate,
        _ => Profile::Severe,
    };
    simulate_stream(&SessionConfig {
        session_id: format!("bench-{i}"),
        record_seconds: seconds as f64,
        profile,
        seed: seed.wrapping_mul(1_000_003).wrapping_add(i),
        ..SessionConfig::default()
    })
    .map_err(|e| BenchError::Settings(e.to_string()))
}

pub fn cluster_spec(s: &ScenarioSettings) -> ClusterSpec {
    ClusterSpec {
        master_id: "master".into(),
        compute_workers: s.workers,
        blockchain: s.blockchain,
        difficulty: s.difficulty,
        interval_ms: match s.interval {
            IntervalSetting::With => INTERVAL_MS,
            IntervalSetting::Without => 0,
        },
        mode: s.infra,
        cloud: s.infra != ProvisionMode::FogOnly,
        wan: s.wan,
        launch_ms: s.launch_ms,
        ..ClusterSpec::default()
    }
}

pub async fn run_scenario(settings: &ScenarioSettings) -> Result<MetricsReport, BenchError> {
    settings.validate()?;
    let mut pregen = Vec::new();
    let cluster = Cluster::launch(cluster_spec(settings))
        .await
        .map_err(|e| BenchError::Launch(e.to_string()))?;
    let mut link = MasterLink::new(NetClient::new("gateway", cluster.meter.clone()), cluster.broker_address());
    link.refresh().await.map_err(|e| BenchError::Launch(e.to_string()))?;

    let started = Instant::now();
    let deadline = started + Duration::from_secs(settings.duration_seconds);
    let mut latency_ms = Vec::new();
    let mut i = 0u64;
    while Instant::now() < deadline {
        if pregen.len() <= i as usize {
            pregen.push(recording(settings.seed, i, settings.recording_seconds)?);
        }
        let chunk = &pregen[i as usize];
        link.ingest(chunk).await.map_err(|e| BenchError::Scenario(format!("ingest {i}: {e}")))?;
        let task = link
            .analyze(&chunk.session_id)
            .await
            .map_err(|e| BenchError::Scenario(format!("analyze {i}: {e}")))?;
        let result = link
            .await_result(&task, 2000, Duration::from_secs(120))
            .await
            .map_err(|e| BenchError::Scenario(format!("{task}: {e}")))?;
        latency_ms.push(result.latency_ms);
        i += 1;
        if settings.interval == IntervalSetting::With {
            let pause = Duration::from_millis(INTERVAL_MS).min(deadline.saturating_duration_since(Instant::now()));
            tokio::time::sleep(pause).await;
        }
    }
    if let Some(dead) = cluster.workers().find(|w| !w.is_running()) {
        return Err(BenchError::Scenario(format!("node {} crashed", dead.node_id())));
    }
    let log = cluster.broker.broker.resource_config().dispatch_log;
    let dispatch_gaps_ms = log.windows(2).map(|w| w[1].1.saturating_sub(w[0].1)).collect();
    Ok(MetricsReport {
        settings: settings.clone(),
        tasks_completed: latency_ms.len() as u64,
        latency_ms,
        bytes_transferred: cluster.meter.total(),
        cpu_busy_ms: cluster.cpu_busy_ms(),
        wall_seconds: started.elapsed().as_secs_f64(),
        dispatch_gaps_ms,
    })
}

/// Runs every cell at once, each on its own cluster.
pub async fn run_matrix(base: &ScenarioSettings) -> Result<Vec<MetricsReport>, BenchError> {
    let runs = base.matrix().into_iter().map(|s| async move { run_scenario(&s).await });
    futures::future::join_all(runs).await.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub name: String,
    pub cell: String,
    pub passed: bool,
    pub detail: String,
}

/// Count comparisons allow one task of slack for completion races.
const TASK_SLACK: u64 = 1;

pub fn assert_trends(rows: &[ScenarioSummary]) -> Result<Vec<TrendCheck>, BenchError> {
    let get = |infra: ProvisionMode, interval: IntervalSetting, blockchain: bool| {
        rows.iter()
            .find(|r| r.infra == infra && r.interval == interval && r.blockchain == blockchain)
            .ok_or_else(|| BenchError::IncompleteMatrix(format!("{infra}/{interval}/blockchain={blockchain}")))
    };
    use IntervalSetting::*;
    use ProvisionMode::*;
    let mut out = Vec::new();
    let mut check = |name: &str, cell: String, passed: bool, detail: String| {
        out.push(TrendCheck {
            name: name.into(),
            cell,
            passed,
            detail,
        })
    };
    for interval in [With, Without] {
        for bc in [false, true] {
            let cell = format!("interval={interval} blockchain={bc}");
            let (f, c, i) = (get(FogOnly, interval, bc)?, get(CloudOnly, interval, bc)?, get(Integrated, interval, bc)?);
            check(
                "T1",
                cell.clone(),
                f.tasks + TASK_SLACK >= i.tasks && i.tasks + TASK_SLACK >= c.tasks,
                format!("tasks fog {} integrated {} cloud {}", f.tasks, i.tasks, c.tasks),
            );
            check(
                "L1",
                cell.clone(),
                f.median_latency_ms < c.median_latency_ms,
                format!("median latency fog {} cloud {}", f.median_latency_ms, c.median_latency_ms),
            );
            check(
                "N2",
                cell,
                f.bytes < c.bytes,
                format!("bytes fog {} cloud {}", f.bytes, c.bytes),
            );
        }
    }
    for infra in [FogOnly, CloudOnly, Integrated] {
        for bc in [false, true] {
            let (w, wo) = (get(infra, With, bc)?, get(infra, Without, bc)?);
            check(
                "T2",
                format!("infra={infra} blockchain={bc}"),
                wo.tasks > w.tasks,
                format!("tasks without {} with {}", wo.tasks, w.tasks),
            );
        }
        for interval in [With, Without] {
            let (off, on) = (get(infra, interval, false)?, get(infra, interval, true)?);
            let cell = format!("infra={infra} interval={interval}");
            check(
                "T3",
                cell.clone(),
                off.tasks + TASK_SLACK >= on.tasks,
                format!("tasks off {} on {}", off.tasks, on.tasks),
            );
            check(
                "N1",
                cell,
                on.bytes > off.bytes,
                format!("bytes on {} off {}", on.bytes, off.bytes),
            );
        }
    }
    Ok(out)
}

pub fn export_csv(reports: &[MetricsReport]) -> Result<Vec<u8>, BenchError> {
    let mut rows: Vec<ScenarioSummary> = reports.iter().map(MetricsReport::summary).collect();
    rows.sort_by_key(|r| (r.infra as u8, r.interval, r.blockchain));
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| BenchError::Csv(e.to_string()))?;
    }
    w.into_inner().map_err(|e| BenchError::Csv(e.to_string()))
}

pub fn parse_csv(bytes: &[u8]) -> Result<Vec<ScenarioSummary>, BenchError> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| BenchError::Csv(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(infra: ProvisionMode, interval: IntervalSetting, blockchain: bool, tasks: u64, bytes: u64) -> MetricsReport {
        MetricsReport {
            settings: ScenarioSettings {
                infra,
                interval,
                blockchain,
                ..ScenarioSettings::default()
            },
            tasks_completed: tasks,
            latency_ms: (0..tasks).map(|i| 100 + i).collect(),
            bytes_transferred: bytes,
            cpu_busy_ms: 7,
            wall_seconds: 1.0,
            dispatch_gaps_ms: vec![],
        }
    }

    #[test]
    fn median_and_percentile() {
        assert_eq!(median(&[3, 1, 2]), 2.0);
        assert_eq!(median(&[4, 1, 2, 3]), 2.5);
        assert_eq!(percentile(&(1..=20).collect::<Vec<_>>(), 95.0), 19.0);
        assert_eq!(percentile(&[5], 95.0), 5.0);
        assert_eq!(median(&[]), 0.0);
    }

    #[test]
    fn one_report_gives_two_lines_and_round_trips() {
        let r = report(ProvisionMode::FogOnly, IntervalSetting::With, true, 3, 1234);
        let csv = export_csv(std::slice::from_ref(&r)).unwrap();
        let text = String::from_utf8(csv.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(
            text.lines().next().unwrap(),
            "interval,blockchain,infra,tasks,median_latency_ms,p95_latency_ms,bytes,cpu_busy_ms"
        );
        assert_eq!(parse_csv(&csv).unwrap(), vec![r.summary()]);
    }

    #[test]
    fn twelve_reports_sorted() {
        let base = ScenarioSettings::default();
        let mut reports: Vec<MetricsReport> = base
            .matrix()
            .into_iter()
            .map(|s| report(s.infra, s.interval, s.blockchain, 1, 1))
            .collect();
        reports.reverse();
        let rows = parse_csv(&export_csv(&reports).unwrap()).unwrap();
        assert_eq!(rows.len(), 12);
        let keys: Vec<_> = rows.iter().map(|r| (r.infra as u8, r.interval, r.blockchain)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(rows[0].infra, ProvisionMode::FogOnly);
        assert_eq!(rows[11].infra, ProvisionMode::Integrated);
    }

    #[test]
    fn single_report_is_incomplete() {
        let r = report(ProvisionMode::FogOnly, IntervalSetting::With, true, 3, 1);
        assert!(matches!(assert_trends(&[r.summary()]), Err(BenchError::IncompleteMatrix(_))));
    }

    #[test]
    fn nominal_matrix_passes_and_violations_are_reported() {
        let build = |fog_latency: u64| {
            ScenarioSettings::default()
                .matrix()
                .into_iter()
                .map(|s| {
                    let tasks = match (s.infra, s.interval) {
                        (ProvisionMode::CloudOnly, IntervalSetting::With) => 5,
                        (ProvisionMode::CloudOnly, IntervalSetting::Without) => 20,
                        (_, IntervalSetting::With) => 8,
                        (_, IntervalSetting::Without) => 60,
                    };
                    let per = if s.infra == ProvisionMode::CloudOnly { 400 } else { 80 } + if s.blockchain { 50 } else { 0 };
                    let mut r = report(s.infra, s.interval, s.blockchain, tasks, tasks * per);
                    let lat = if s.infra == ProvisionMode::CloudOnly { 1500 } else { fog_latency };
                    r.latency_ms = vec![lat; tasks as usize];
                    r.summary()
                })
                .collect::<Vec<_>>()
        };
        let checks = assert_trends(&build(600)).unwrap();
        assert_eq!(checks.len(), 4 * 3 + 6 + 6 * 2);
        assert!(checks.iter().all(|c| c.passed), "{checks:#?}");
        let checks = assert_trends(&build(2000)).unwrap();
        let failed: Vec<_> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        assert_eq!(failed, vec!["L1"; 4]);
    }
}
