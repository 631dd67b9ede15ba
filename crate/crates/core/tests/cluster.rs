use std::sync::Arc;
use std::time::{Duration, Instant};

use fogbus::broker::{start_broker, BrokerConfig, ProvisionMode};
use fogbus::cluster::{Cluster, ClusterSpec};
use fogbus::gateway::{simulate_stream, MasterLink, Profile, SessionConfig};
use fogbus::ledger::{validate_chain, ChainVerdict};
use fogbus::net::{self, ByteMeter, NetClient};
use fogbus::proto::*;
use fogbus::worker::{start_worker, WorkerConfig};
use fogbus::analytic::analyze_trace;
use fogbus::{AnalyticConfig, MsgType, NodeDescriptor, NodeRole, Severity};

fn client() -> NetClient {
    NetClient::new("test", Arc::new(ByteMeter::default()))
}

fn chunk(session: &str, profile: Profile, seed: u64) -> fogbus::SignalChunk {
    simulate_stream(&SessionConfig {
        session_id: session.into(),
        profile,
        seed,
        ..SessionConfig::default()
    })
    .unwrap()
}

async fn spec(workers: usize) -> Cluster {
    Cluster::launch(ClusterSpec {
        compute_workers: workers,
        mode: ProvisionMode::FogOnly,
        heartbeat_ms: 200,
        probe_ms: 200,
        ..ClusterSpec::default()
    })
    .await
    .unwrap()
}

async fn wait_until(limit: Duration, mut f: impl FnMut() -> bool) -> bool {
    let end = Instant::now() + limit;
    while Instant::now() < end {
        if f() {
            return true;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    f()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn register_is_idempotent_and_conflicts_on_new_address() {
    let c = spec(1).await;
    let b = c.broker_address();
    let w = c.compute[0].descriptor();
    let cl = client();
    cl.post(&b, "/register", MsgType::Register, &w).await.unwrap();
    assert_eq!(c.broker.broker.registry().len(), 2);
    let moved = NodeDescriptor {
        address: "127.0.0.1:1".into(),
        ..w
    };
    let err = cl.post(&b, "/register", MsgType::Register, &moved).await.unwrap_err();
    assert_eq!(err.kind(), "conflict");
    let gw = NodeDescriptor::new("gw", "127.0.0.1:2", NodeRole::Broker);
    assert_eq!(cl.post(&b, "/register", MsgType::Register, &gw).await.unwrap_err().kind(), "bad_request");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn ingest_extends_every_replica_by_one_block() {
    let c = spec(2).await;
    let mut link = MasterLink::new(client(), c.broker_address());
    link.refresh().await.unwrap();
    let before: Vec<u64> = c.workers().map(|w| w.node.chain_tip("master").length).collect();
    let r = link.ingest(&chunk("s1", Profile::Healthy, 1)).await.unwrap();
    assert!(r.warnings.is_empty(), "{:?}", r.warnings);
    let tip = c.broker.broker.chain().tip_hash().to_owned();
    assert_eq!(r.block_hash.as_deref(), Some(tip.as_str()));
    for (w, b) in c.workers().zip(before) {
        let t = w.node.chain_tip("master");
        assert_eq!(t.length, b.max(1) + 1);
        assert_eq!(t.tip_hash, tip);
    }
    let status = fogbus::gateway::chain_status(client(), &c.broker_address()).await.unwrap();
    assert_eq!(status.workers.len(), 3);
    assert!(status.workers.iter().all(|w| w.matches_master));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn ingest_without_repository_is_rejected() {
    let meter = Arc::new(ByteMeter::default());
    let b = start_broker(BrokerConfig::default(), meter).await.unwrap();
    let mut link = MasterLink::new(client(), b.address());
    let err = link.ingest(&chunk("s", Profile::Healthy, 0)).await.unwrap_err();
    assert_eq!(err.kind(), "unavailable");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn fog_task_matches_offline_analytic() {
    let c = spec(1).await;
    let mut link = MasterLink::new(client(), c.broker_address());
    link.refresh().await.unwrap();
    let ch = chunk("s1", Profile::Severe, 4);
    link.ingest(&ch).await.unwrap();
    let task = link.analyze("s1").await.unwrap();
    let r = link.await_result(&task, 250, Duration::from_secs(20)).await.unwrap();
    let offline = analyze_trace(&ch.samples, &AnalyticConfig::default()).unwrap();
    assert_eq!(r.severity, Severity::Severe);
    assert_eq!(r.ahi_per_hour, offline.ahi_per_hour);
    assert_eq!(r.dip_count_verified, offline.dip_count_verified);
    let rc = c.broker.broker.resource_config();
    assert_eq!(rc.entries[0].assigned_node.as_deref(), Some("master-w1"));
    assert_eq!(rc.entries[0].state, TaskState::Completed);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn analyze_unknown_session_is_not_found() {
    let c = spec(1).await;
    let mut link = MasterLink::new(client(), c.broker_address());
    assert_eq!(link.analyze("nope").await.unwrap_err().kind(), "not_found");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn dispatch_to_dead_worker_requeues_elsewhere() {
    let c = Cluster::launch(ClusterSpec {
        compute_workers: 2,
        mode: ProvisionMode::FogOnly,
        heartbeat_ms: 60_000,
        ..ClusterSpec::default()
    })
    .await
    .unwrap();
    c.compute[0].kill();
    let mut link = MasterLink::new(client(), c.broker_address());
    link.refresh().await.unwrap();
    link.ingest(&chunk("s", Profile::Healthy, 2)).await.unwrap();
    let task = link.analyze("s").await.unwrap();
    link.await_result(&task, 250, Duration::from_secs(20)).await.unwrap();
    let rc = c.broker.broker.resource_config();
    let nodes: Vec<&str> = rc.dispatch_log.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(nodes, vec!["master-w1", "master-w2"]);
    let w = c.broker.broker.workers();
    assert!(w.iter().any(|i| i.descriptor.node_id == "master-w1" && i.failed));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn worker_dropped_after_three_missed_heartbeats() {
    let c = spec(2).await;
    c.compute[1].kill();
    let b = c.broker.broker.clone();
    let gone = wait_until(Duration::from_secs(5), || {
        !b.registry().iter().any(|d| d.node_id == "master-w2")
    })
    .await;
    assert!(gone);
    assert_eq!(b.registry().len(), 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn image_versions_grow_and_results_wait_for_replication() {
    let c = spec(1).await;
    let mut link = MasterLink::new(client(), c.broker_address());
    let h = link.refresh().await.unwrap();
    assert_eq!(h.replica_holder.as_deref(), Some(c.repository.address().as_str()));
    let v0 = c.repository.node.image("master").unwrap().image_version;
    link.ingest(&chunk("s", Profile::Healthy, 5)).await.unwrap();
    let task = link.analyze("s").await.unwrap();
    let r = link.await_result(&task, 250, Duration::from_secs(20)).await.unwrap();
    let image = c.repository.node.image("master").unwrap();
    assert!(image.image_version > v0);
    let held = image.tasks.iter().find(|t| t.task.task_id == task).unwrap();
    assert_eq!(held.entry.state, TaskState::Completed);
    assert_eq!(held.result.as_ref().unwrap().ahi_per_hour, r.ahi_per_hour);
    let err = c.repository.node.accept_image(MasterImage {
        image_version: 1,
        base_version: None,
        ..image.clone()
    });
    assert_eq!(err.unwrap_err().kind, "conflict");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn credential_versions_bump() {
    let meter = Arc::new(ByteMeter::default());
    let w = start_worker(WorkerConfig::default(), meter).await.unwrap();
    let rec = |k: &str| CredentialRecord {
        master_id: "m".into(),
        body: CredentialBody::BlockKey {
            block_index: 3,
            pub_key_b64: k.into(),
        },
    };
    let cl = client();
    let env = cl.post(&w.address(), "/credential", MsgType::CredentialPut, &rec("a")).await.unwrap();
    assert_eq!(net::body::<CredentialEntry>(&env).unwrap().version, 1);
    let env = cl.post(&w.address(), "/credential", MsgType::CredentialPut, &rec("b")).await.unwrap();
    assert_eq!(net::body::<CredentialEntry>(&env).unwrap().version, 2);
    let env = cl.get(&w.address(), "/credential?master=m&index=3").await.unwrap();
    let e: CredentialEntry = net::body(&env).unwrap();
    assert_eq!((e.version, e.record), (2, rec("b")));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn tampered_replica_is_flagged_then_repaired() {
    let c = spec(2).await;
    let mut link = MasterLink::new(client(), c.broker_address());
    link.refresh().await.unwrap();
    link.ingest(&chunk("s", Profile::Healthy, 1)).await.unwrap();
    let victim = &c.compute[0];
    assert!(victim.node.tamper_replica("master", |ch| {
        let tip = ch.blocks.last_mut().unwrap();
        tip.timestamp_ms += 1;
    }));
    let status = fogbus::gateway::chain_status(client(), &c.broker_address()).await.unwrap();
    let row = status.workers.iter().find(|r| r.node_id == "master-w1").unwrap();
    assert!(!row.matches_master && !row.valid, "{row:?}");
    let table = fogbus::gateway::format_chain_status(&status);
    assert!(table.lines().any(|l| l.starts_with("master-w1") && l.ends_with("INVALID")));

    let r = link.ingest(&chunk("s", Profile::Healthy, 2)).await.unwrap();
    assert_eq!(r.warnings.len(), 1, "{:?}", r.warnings);
    let master = c.broker.broker.chain();
    let repaired = victim.node.replica_chain("master").unwrap();
    assert_eq!(validate_chain(&repaired), ChainVerdict::Ok);
    assert_eq!(repaired.tip_hash(), master.tip_hash());
    // the next block lands on the repaired replica
    let r = link.ingest(&chunk("s", Profile::Healthy, 3)).await.unwrap();
    assert!(r.warnings.is_empty(), "{:?}", r.warnings);
    let status = fogbus::gateway::chain_status(client(), &c.broker_address()).await.unwrap();
    assert!(status.workers.iter().all(|w| w.matches_master), "{status:?}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn tampered_ciphertext_fails_with_integrity_alarm() {
    let c = spec(1).await;
    let mut link = MasterLink::new(client(), c.broker_address());
    link.refresh().await.unwrap();
    let r = link.ingest(&chunk("s", Profile::Healthy, 1)).await.unwrap();
    assert!(c.repository.node.tamper_object(&r.data_key));
    let task = link.analyze("s").await.unwrap();
    let err = link.await_result(&task, 250, Duration::from_secs(20)).await.unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(c.broker.broker.alerts().iter().any(|a| a.contains("integrity")));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn promoted_replica_keeps_completed_tasks() {
    let c = spec(1).await;
    let mut link = MasterLink::new(client(), c.broker_address());
    link.refresh().await.unwrap();
    link.ingest(&chunk("s", Profile::Moderate, 1)).await.unwrap();
    let t1 = link.analyze("s").await.unwrap();
    link.await_result(&t1, 250, Duration::from_secs(20)).await.unwrap();

    c.kill_master();
    let killed = Instant::now();
    assert!(wait_until(Duration::from_secs(5), || c.promoted_address().is_some()).await);
    assert!(killed.elapsed() <= Duration::from_millis(3 * 200 + 400), "{:?}", killed.elapsed());

    // the gateway follows the master to its new address
    link.ingest(&chunk("s", Profile::Severe, 2)).await.unwrap();
    assert_eq!(link.address(), c.promoted_address().unwrap());
    let t2 = link.analyze("s").await.unwrap();
    let r2 = link.await_result(&t2, 250, Duration::from_secs(20)).await.unwrap();
    assert_eq!(r2.severity, Severity::Severe);
    let env = client().get(link.address(), &format!("/result/{t1}")).await.unwrap();
    assert!(matches!(net::body::<ResultReply>(&env).unwrap(), ResultReply::Completed { .. }));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn masters_sharing_a_worker_cannot_read_each_other() {
    let meter = Arc::new(ByteMeter::default());
    let shared = start_worker(
        WorkerConfig {
            node_id: "shared".into(),
            role: NodeRole::RepositoryWorker,
            ..WorkerConfig::default()
        },
        meter.clone(),
    )
    .await
    .unwrap();
    let mk = |id: &str| BrokerConfig {
        master_id: id.into(),
        workers: vec![shared.address()],
        ..BrokerConfig::default()
    };
    let a = start_broker(mk("a"), meter.clone()).await.unwrap();
    let b = start_broker(mk("b"), meter.clone()).await.unwrap();
    let mut la = MasterLink::new(client(), a.address());
    let mut lb = MasterLink::new(client(), b.address());
    let ka = la.ingest(&chunk("x", Profile::Healthy, 1)).await.unwrap().data_key;
    lb.ingest(&chunk("y", Profile::Healthy, 2)).await.unwrap();
    let cl = client();
    let err = cl.get(&shared.address(), &format!("/data/{ka}?master=b")).await.unwrap_err();
    assert_eq!(err.kind(), "authentication");
    assert!(cl.get(&shared.address(), &format!("/data/{ka}?master=a")).await.is_ok());
    assert_eq!(shared.node.chain_tip("a").tip_hash, a.broker.chain().tip_hash());
    assert_eq!(shared.node.chain_tip("b").tip_hash, b.broker.chain().tip_hash());
}
