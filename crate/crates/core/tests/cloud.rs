use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use fogbus::analytic::analyze_trace;
use fogbus::broker::ProvisionMode;
use fogbus::cloud::*;
use fogbus::cluster::{Cluster, ClusterSpec};
use fogbus::gateway::{simulate_stream, MasterLink, Profile, SessionConfig};
use fogbus::net::{ByteMeter, NetClient};
use fogbus::{serialize_trace, AnalyticConfig};

#[test]
fn delay_examples() {
    let wan = WanModel::default();
    assert_eq!(wan.simulate_delay(Direction::Up, 0), 50.0);
    assert!((wan.simulate_delay(Direction::Up, 18432) - 123.728).abs() < 1e-9);
    assert!((wan.simulate_delay(Direction::Down, 18432) - 71.065_142_857_142_86).abs() < 1e-9);
    let zero = WanModel {
        rtt_ms: 0.0,
        ..wan
    };
    assert_eq!(zero.simulate_delay(Direction::Down, 0), 0.0);
    assert!(WanModel { uplink_bps: 0.0, ..wan }.validate().is_err());
}

fn fast_config(dir: &std::path::Path) -> CloudConfig {
    CloudConfig {
        input_file: dir.join("in.jsonl"),
        wan: WanModel {
            rtt_ms: 0.0,
            uplink_bps: 1e12,
            downlink_bps: 1e12,
        },
        ..CloudConfig::default()
    }
}

fn record(task: &str, model: CloudModel, shards: u32, seed: u64) -> (CloudInputRecord, Vec<fogbus::OximeterSample>) {
    let chunk = simulate_stream(&SessionConfig {
        profile: Profile::Severe,
        seed,
        ..SessionConfig::default()
    })
    .unwrap();
    let rec = CloudInputRecord {
        task_id: task.into(),
        app_id: "apnea".into(),
        payload_b64: B64.encode(serialize_trace(&chunk.samples)),
        model,
        shards,
        state: RecordState::Pending,
        block_hash: None,
        master_id: "m".into(),
        master_address: "127.0.0.1:9".into(),
    };
    (rec, chunk.samples)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn thread_model_matches_task_model() {
    let dir = tempfile::tempdir().unwrap();
    let sim = CloudSim::new(fast_config(dir.path()), Arc::new(ByteMeter::default())).unwrap();
    for seed in 0..5 {
        let (task, samples) = record("t", CloudModel::Task, 1, seed);
        let whole = sim.run_task_model(&task).await.unwrap();
        for k in [2, 3, 4] {
            let (thread, _) = record("t", CloudModel::Thread, k, seed);
            let split = sim.run_thread_model(&thread).await.unwrap();
            assert_eq!(split, whole, "seed {seed} k {k}");
        }
        let offline = analyze_trace(&samples, &AnalyticConfig::default()).unwrap();
        assert_eq!(whole.ahi_per_hour, offline.ahi_per_hour);
    }
    let (one, _) = record("t", CloudModel::Thread, 1, 0);
    assert!(sim.run_thread_model(&one).await.is_err());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn records_are_picked_up_within_one_poll() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fast_config(dir.path());
    let path = cfg.input_file.clone();
    let h = CloudSim::start(cfg, Arc::new(ByteMeter::default())).unwrap();
    tokio::time::sleep(Duration::from_millis(120)).await;
    let (rec, _) = record("t1", CloudModel::Task, 1, 0);
    append_record(&path, &rec).unwrap();
    let t0 = Instant::now();
    while h.sim.state_of("t1").is_none() {
        assert!(t0.elapsed() < Duration::from_millis(600), "not picked up");
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    // the same task appended again runs only once
    append_record(&path, &rec).unwrap();
    tokio::time::sleep(Duration::from_millis(700)).await;
    assert_eq!(h.sim.executions(), 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn malformed_and_partial_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fast_config(dir.path());
    let path = cfg.input_file.clone();
    let sim = CloudSim::new(cfg, Arc::new(ByteMeter::default())).unwrap();
    let (rec, _) = record("t1", CloudModel::Task, 3, 0);
    append_record(&path, &rec).unwrap();
    let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
    f.write_all(b"{not json}\n{\"task_id\":").unwrap();
    assert!(sim.poll_cycle().unwrap().is_empty());
    assert_eq!(sim.quarantined().len(), 2);
    // the partial line completes later
    let (good, _) = record("t2", CloudModel::Task, 1, 0);
    let line = serde_json::to_string(&good).unwrap();
    f.write_all(line.strip_prefix("{\"task_id\":").unwrap_or(&line).as_bytes()).unwrap();
    f.write_all(b"\n").unwrap();
    let picked = sim.poll_cycle().unwrap();
    assert_eq!(picked.len(), 1, "{:?}", sim.quarantined());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn cloud_only_cluster_runs_tasks_and_checks_membership() {
    let c = Cluster::launch(ClusterSpec {
        compute_workers: 1,
        mode: ProvisionMode::CloudOnly,
        cloud: true,
        wan: WanModel {
            rtt_ms: 20.0,
            ..WanModel::default()
        },
        ..ClusterSpec::default()
    })
    .await
    .unwrap();
    let mut link = MasterLink::new(NetClient::new("gw", c.meter.clone()), c.broker_address());
    link.refresh().await.unwrap();
    let chunk = simulate_stream(&SessionConfig {
        session_id: "s".into(),
        profile: Profile::Moderate,
        seed: 9,
        ..SessionConfig::default()
    })
    .unwrap();
    link.ingest(&chunk).await.unwrap();
    let task = link.analyze("s").await.unwrap();
    let r = link.await_result(&task, 250, Duration::from_secs(30)).await.unwrap();
    let offline = analyze_trace(&chunk.samples, &AnalyticConfig::default()).unwrap();
    assert_eq!((r.ahi_per_hour, r.severity), (offline.ahi_per_hour, offline.severity));
    let rc = c.broker.broker.resource_config();
    assert_eq!(rc.entries[0].assigned_node.as_deref(), Some(CLOUD_NODE_ID));
    assert_eq!(c.cloud.as_ref().unwrap().sim.executions(), 1);
    assert!(c.cpu_busy_ms() > 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn integrated_overflows_to_cloud_when_fog_is_busy() {
    let c = Cluster::launch(ClusterSpec {
        compute_workers: 1,
        mode: ProvisionMode::Integrated,
        cloud: true,
        launch_ms: 400,
        ..ClusterSpec::default()
    })
    .await
    .unwrap();
    let mut link = MasterLink::new(NetClient::new("gw", c.meter.clone()), c.broker_address());
    link.refresh().await.unwrap();
    let mut tasks = Vec::new();
    for i in 0..2 {
        let chunk = simulate_stream(&SessionConfig {
            session_id: format!("s{i}"),
            seed: i,
            ..SessionConfig::default()
        })
        .unwrap();
        link.ingest(&chunk).await.unwrap();
        tasks.push(link.analyze(&chunk.session_id).await.unwrap());
    }
    for t in &tasks {
        link.await_result(t, 250, Duration::from_secs(30)).await.unwrap();
    }
    let nodes: Vec<String> = c
        .broker
        .broker
        .resource_config()
        .entries
        .into_iter()
        .map(|e| e.assigned_node.unwrap())
        .collect();
    assert_eq!(nodes, vec!["master-w1".to_string(), CLOUD_NODE_ID.to_string()]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn unverifiable_block_fails_before_the_analytic_runs() {
    let dir = tempfile::tempdir().unwrap();
    let sim = CloudSim::new(fast_config(dir.path()), Arc::new(ByteMeter::default())).unwrap();
    let (mut rec, _) = record("t", CloudModel::Thread, 2, 0);
    rec.block_hash = Some("00ab".into());
    let (kind, reason) = sim.execute(&rec).await.unwrap_err();
    assert_eq!(kind, fogbus::proto::FailureKind::Integrity, "{reason}");
    assert_eq!(sim.cpu_busy_ms(), 0);
}
