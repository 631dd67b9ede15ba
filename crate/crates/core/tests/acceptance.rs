//! Acceptance suite: one PASS/FAIL line per criterion. Runs criteria
//! concurrently; the failover and experiment runs dominate wall time.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use fogbus::analytic::{count_dips, AnalyticConfig};
use fogbus::bench::{self, IntervalSetting, MetricsReport, ScenarioSettings};
use fogbus::broker::{start_broker, BrokerConfig, ProvisionMode};
use fogbus::cluster::{Cluster, ClusterSpec};
use fogbus::gateway::{simulate_stream, MasterLink, Profile, SessionConfig};
use fogbus::ledger::{append_block_at, mine, resolve_majority, validate_chain, Chain, ChainVerdict, DataBlock};
use fogbus::net::{ByteMeter, NetClient};
use fogbus::worker::{start_worker, WorkerConfig};
use fogbus::{classify, serialize_trace, AnalysisResult, NodeRole, OximeterSample, Severity};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: u8,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(id: u8, name: &'static str, passed: bool, detail: String) -> Outcome {
    Outcome { id, name, passed, detail }
}

// ---- 1: blockchain integrity -------------------------------------------

const FIELDS: usize = 8;

fn tamper(b: &mut DataBlock, field: usize) {
    fn flip(s: &mut String) {
        let c = if s.starts_with('0') { "1" } else { "0" };
        s.replace_range(0..s.chars().next().map_or(0, char::len_utf8), c);
    }
    match field {
        0 => b.index += 1,
        1 => b.timestamp_ms += 1,
        2 => flip(&mut b.payload_b64),
        3 => flip(&mut b.prev_hash),
        4 => b.nonce += 1,
        5 => flip(&mut b.hash),
        6 => flip(&mut b.pub_key_b64),
        _ => flip(&mut b.signature_b64),
    }
}

fn chain_pool(rng: &mut ChaCha8Rng, count: usize) -> Vec<Chain> {
    (0..count)
        .map(|_| {
            let mut c = Chain::new(3).unwrap();
            let n = rng.random_range(2..=50);
            while c.len() < n {
                let payload: Vec<u8> = (0..rng.random_range(1..64)).map(|_| rng.random()).collect();
                let ts = 1_700_000_000_000 + c.len() as u64;
                append_block_at(&mut c, &payload, ts).unwrap();
            }
            c
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pool = chain_pool(&mut rng, 24);
    let mut detected = 0;
    for _ in 0..1000 {
        let mut c = pool[rng.random_range(0..pool.len())].clone();
        let i = rng.random_range(0..c.len());
        tamper(&mut c.blocks[i], rng.random_range(0..FIELDS));
        if let ChainVerdict::InvalidAt { index, .. } = validate_chain(&c) {
            if index as usize == i || index as usize == i + 1 {
                detected += 1;
            }
        }
    }
    let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let mut repaired = 0;
    for _ in 0..200 {
        let good = &pool[rng.random_range(0..pool.len())];
        let victim = rng.random_range(0..3);
        let mut replicas = vec![good.clone(), good.clone(), good.clone()];
        let i = rng.random_range(0..good.len());
        tamper(&mut replicas[victim].blocks[i], rng.random_range(0..FIELDS));
        if let Ok(m) = resolve_majority(ids.iter().zip(replicas.iter())) {
            if &m.canonical == good && m.deviants == BTreeSet::from([ids[victim].clone()]) {
                repaired += 1;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        1,
        "blockchain integrity",
        detected == 1000 && repaired == 200 && secs < 60.0,
        format!("{detected}/1000 tampers located, {repaired}/200 replica sets repaired, {secs:.1} s at difficulty 3"),
    )
}

// ---- 2: proof-of-work statistics ---------------------------------------

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ok = true;
    let mut parts = Vec::new();
    for d in 1..=3u32 {
        let mut total = 0u64;
        for i in 0..200u64 {
            let payload: String = (0..24).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
            let prev = format!("{:064x}", rng.random::<u64>());
            total += mine(i + 1, rng.random(), &payload, &prev, d, None).unwrap().attempts;
        }
        let mean = total as f64 / 200.0;
        let expect = 16f64.powi(d as i32);
        let inside = mean >= expect / 3.0 && mean <= 3.0 * expect;
        ok &= inside;
        parts.push(format!("d={d} mean {mean:.1} in [{:.1}, {:.0}]", expect / 3.0, 3.0 * expect));
    }
    outcome(2, "proof-of-work statistics", ok, parts.join("; "))
}

// ---- 3: analytic oracle equivalence ------------------------------------

/// Literal two-state machine: enter below the threshold, leave above it.
fn reference_raw(spo2: &[u8], thr: u8) -> u32 {
    let mut inside = false;
    let mut n = 0;
    for &s in spo2 {
        if !inside && s < thr {
            inside = true;
            n += 1;
        } else if inside && s > thr {
            inside = false;
        }
    }
    n
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = AnalyticConfig::default();
    let mut mismatches = 0;
    for _ in 0..100_000 {
        let n = rng.random_range(0..160);
        let lo = rng.random_range(80..=88);
        let hi = rng.random_range(88..=99);
        let trace: Vec<OximeterSample> = (0..n)
            .map(|i| OximeterSample::new(i as u64 * 500, rng.random_range(50..120), rng.random_range(lo..=hi)))
            .collect();
        let spo2: Vec<u8> = trace.iter().map(|s| s.spo2_pct).collect();
        if count_dips(&trace, &cfg).raw != reference_raw(&spo2, cfg.spo2_threshold) {
            mismatches += 1;
        }
    }
    let table = [
        (0.0, Severity::NoMinimal),
        (4.99, Severity::NoMinimal),
        (5.0, Severity::Mild),
        (14.99, Severity::Mild),
        (15.0, Severity::Moderate),
        (29.99, Severity::Moderate),
        (30.0, Severity::Severe),
        (100.0, Severity::Severe),
    ];
    let wrong: Vec<f64> = table.iter().filter(|(a, s)| classify(*a) != *s).map(|(a, _)| *a).collect();
    outcome(
        3,
        "analytic oracle equivalence",
        mismatches == 0 && wrong.is_empty(),
        format!("{mismatches} mismatches over 100000 traces; classify wrong at {wrong:?}"),
    )
}

// ---- 4: end-to-end session ---------------------------------------------

async fn criterion_4() -> Outcome {
    let r: Result<String, String> = async {
        let c = Cluster::launch(ClusterSpec {
            compute_workers: 1,
            mode: ProvisionMode::FogOnly,
            ..ClusterSpec::default()
        })
        .await
        .map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut lines = Vec::new();
        for (profile, want, seed) in [(Profile::Healthy, Severity::NoMinimal, 40), (Profile::Severe, Severity::Severe, 41)] {
            let chunk = simulate_stream(&SessionConfig {
                profile,
                seed,
                ..SessionConfig::default()
            })
            .map_err(|e| e.to_string())?;
            let path = dir.path().join(format!("{seed}.txt"));
            let script = serialize_trace(&chunk.samples);
            std::fs::write(&path, &script).map_err(|e| e.to_string())?;
            let report = fogbus::gateway::run_session(
                &SessionConfig {
                    master_address: c.broker_address(),
                    session_id: format!("session-{seed}"),
                    profile: Profile::Scripted(path),
                    ..SessionConfig::default()
                },
                NetClient::new("gateway", c.meter.clone()),
            )
            .await
            .map_err(|e| e.to_string())?;
            let offline: AnalysisResult =
                serde_json::from_slice(&fogbus::analyze(&script, &AnalyticConfig::default()).map_err(|e| e.to_string())?)
                    .map_err(|e| e.to_string())?;
            if report.result.severity != want || report.result.ahi_per_hour != offline.ahi_per_hour {
                return Err(format!(
                    "{want}: got {} ahi {} vs offline {}",
                    report.result.severity, report.result.ahi_per_hour, offline.ahi_per_hour
                ));
            }
            lines.push(format!("{} ahi {} == offline", report.result.severity, report.result.ahi_per_hour));
        }
        Ok(lines.join("; "))
    }
    .await;
    match r {
        Ok(d) => outcome(4, "end-to-end session", true, d),
        Err(e) => outcome(4, "end-to-end session", false, e),
    }
}

// ---- 5: failover ---------------------------------------------------------

async fn criterion_5() -> Outcome {
    const DURATION: Duration = Duration::from_secs(300);
    const KILL_AT: Duration = Duration::from_secs(60);
    let r: Result<String, String> = async {
        let c = Arc::new(
            Cluster::launch(ClusterSpec {
                compute_workers: 1,
                mode: ProvisionMode::FogOnly,
                launch_ms: ScenarioSettings::default().launch_ms,
                ..ClusterSpec::default()
            })
            .await
            .map_err(|e| e.to_string())?,
        );
        let probe_ms = 1000u64;
        let killer = {
            let c = c.clone();
            tokio::spawn(async move {
                tokio::time::sleep(KILL_AT).await;
                c.kill_master();
                let killed = Instant::now();
                while c.promoted_address().is_none() && killed.elapsed() < Duration::from_secs(30) {
                    tokio::time::sleep(Duration::from_millis(5)).await;
                }
                c.promoted_address().map(|_| killed.elapsed())
            })
        };
        let mut link = MasterLink::new(NetClient::new("gateway", c.meter.clone()), c.broker_address());
        link.refresh().await.map_err(|e| e.to_string())?;
        let original = link.address().to_owned();
        let started = Instant::now();
        let mut completed = Vec::new();
        let mut after = 0;
        let mut errors = Vec::new();
        let mut i = 0u64;
        while started.elapsed() < DURATION {
            let chunk = bench::recording(5, i, 180).map_err(|e| e.to_string())?;
            i += 1;
            let step = async {
                link.ingest(&chunk).await.map_err(|e| e.to_string())?;
                let t = link.analyze(&chunk.session_id).await.map_err(|e| e.to_string())?;
                link.await_result(&t, 2000, Duration::from_secs(60)).await.map_err(|e| e.to_string())?;
                Ok::<_, String>(t)
            };
            match step.await {
                Ok(t) => {
                    if link.address() != original {
                        after += 1;
                    }
                    completed.push(t);
                }
                Err(e) => errors.push(e),
            }
        }
        let promotion = killer.await.map_err(|e| e.to_string())?.ok_or("no promotion within 30 s")?;
        let promoted = c
            .workers()
            .find_map(|w| w.node.promoted_handle(c.master_id()))
            .ok_or("promoted broker missing")?;
        let rc = promoted.resource_config();
        let lost: Vec<&String> = completed
            .iter()
            .filter(|t| {
                !rc.entries
                    .iter()
                    .any(|e| &e.task_id == *t && e.state == fogbus::proto::TaskState::Completed)
            })
            .collect();
        let detail = format!(
            "promoted after {:.2} s (limit {:.1} s); {} tasks completed, {} after failover, {} lost, {} driver errors",
            promotion.as_secs_f64(),
            3.0 * probe_ms as f64 / 1000.0,
            completed.len(),
            after,
            lost.len(),
            errors.len()
        );
        if promotion > Duration::from_millis(3 * probe_ms) || after == 0 || !lost.is_empty() {
            return Err(format!("{detail}; first error {:?}", errors.first()));
        }
        Ok(detail)
    }
    .await;
    match r {
        Ok(d) => outcome(5, "failover", true, d),
        Err(e) => outcome(5, "failover", false, e),
    }
}

// ---- 6 and 7: experiment trends and interval semantics ----------------

async fn criteria_6_7() -> (Outcome, Outcome) {
    let started = Instant::now();
    let mut all: Vec<MetricsReport> = Vec::new();
    let mut failures = Vec::new();
    let mut per_seed = Vec::new();
    for seed in [11u64, 22, 33] {
        let base = ScenarioSettings {
            duration_seconds: 60,
            seed,
            ..ScenarioSettings::default()
        };
        match bench::run_matrix(&base).await {
            Ok(reports) => {
                let rows: Vec<_> = reports.iter().map(MetricsReport::summary).collect();
                if let Ok(csv) = bench::export_csv(&reports) {
                    eprintln!("seed {seed}\n{}", String::from_utf8_lossy(&csv));
                }
                match bench::assert_trends(&rows) {
                    Ok(checks) => {
                        let bad: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
                        per_seed.push(format!("seed {seed}: {}/{} checks", checks.len() - bad.len(), checks.len()));
                        for b in bad {
                            failures.push(format!("seed {seed} {} [{}] {}", b.name, b.cell, b.detail));
                        }
                    }
                    Err(e) => failures.push(format!("seed {seed}: {e}")),
                }
                all.extend(reports);
            }
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    let minutes = started.elapsed().as_secs_f64() / 60.0;
    let c6 = outcome(
        6,
        "experiment trends",
        failures.is_empty() && minutes < 20.0,
        format!("{}; matrix wall time {minutes:.1} min; {}", per_seed.join(", "), if failures.is_empty() { "no failed checks".into() } else { failures.join(" | ") }),
    );

    let with: Vec<u64> = all
        .iter()
        .filter(|r| r.settings.interval == IntervalSetting::With)
        .flat_map(|r| r.dispatch_gaps_ms.iter().copied())
        .collect();
    let short = with.iter().filter(|g| **g < bench::INTERVAL_MS).count();
    let local: Vec<(String, f64)> = all
        .iter()
        .filter(|r| r.settings.interval == IntervalSetting::Without && r.settings.infra != ProvisionMode::CloudOnly)
        .map(|r| {
            (
                format!("{}/bc={}/seed={}", r.settings.infra, r.settings.blockchain, r.settings.seed),
                bench::median(&r.dispatch_gaps_ms),
            )
        })
        .collect();
    let slow: Vec<&(String, f64)> = local.iter().filter(|(_, m)| *m >= 1000.0).collect();
    let worst = local.iter().map(|(_, m)| *m).fold(0.0, f64::max);
    let c7 = outcome(
        7,
        "interval semantics",
        !with.is_empty() && short == 0 && !local.is_empty() && slow.is_empty(),
        format!(
            "{}/{} with-interval gaps >= 5000 ms (min {:?}); worst local without-interval median gap {worst:.0} ms over {} runs{}",
            with.len() - short,
            with.len(),
            with.iter().min(),
            local.len(),
            if slow.is_empty() { String::new() } else { format!("; slow: {slow:?}") }
        ),
    );
    (c6, c7)
}

// ---- 8: isolation --------------------------------------------------------

async fn criterion_8() -> Outcome {
    let r: Result<String, String> = async {
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
        .map_err(|e| e.to_string())?;
        let mk = |id: &str| BrokerConfig {
            master_id: id.into(),
            workers: vec![shared.address()],
            ..BrokerConfig::default()
        };
        let a = start_broker(mk("alpha"), meter.clone()).await.map_err(|e| e.to_string())?;
        let b = start_broker(mk("beta"), meter.clone()).await.map_err(|e| e.to_string())?;
        let client = NetClient::new("probe", meter.clone());
        let mut la = MasterLink::new(client.clone(), a.address());
        let mut lb = MasterLink::new(client.clone(), b.address());
        let (mut ka, mut kb) = (Vec::new(), Vec::new());
        for i in 0..50u64 {
            let ca = bench::recording(80, i, 180).map_err(|e| e.to_string())?;
            let cb = bench::recording(81, i, 180).map_err(|e| e.to_string())?;
            ka.push(la.ingest(&ca).await.map_err(|e| e.to_string())?.data_key);
            kb.push(lb.ingest(&cb).await.map_err(|e| e.to_string())?.data_key);
        }
        let mut cross_ok = 0;
        let mut own_ok = 0;
        for (keys, owner, other) in [(&ka, "alpha", "beta"), (&kb, "beta", "alpha")] {
            for k in keys {
                if client.get(&shared.address(), &format!("/data/{k}?master={other}")).await.is_ok() {
                    cross_ok += 1;
                }
                if client.get(&shared.address(), &format!("/data/{k}?master={owner}")).await.is_ok() {
                    own_ok += 1;
                }
            }
        }
        let mut chains = Vec::new();
        for (id, broker) in [("alpha", &a), ("beta", &b)] {
            let replica = shared.node.replica_chain(id).ok_or(format!("no replica for {id}"))?;
            let master = broker.broker.chain();
            chains.push((
                validate_chain(&replica) == ChainVerdict::Ok,
                replica.tip_hash() == master.tip_hash(),
                replica.len(),
            ));
        }
        let detail = format!(
            "{cross_ok}/100 cross-master reads succeeded, {own_ok}/100 own reads; replicas (valid, tip matches, length): {chains:?}"
        );
        if cross_ok == 0 && own_ok == 100 && chains.iter().all(|(v, t, l)| *v && *t && *l == 51) {
            Ok(detail)
        } else {
            Err(detail)
        }
    }
    .await;
    match r {
        Ok(d) => outcome(8, "isolation", true, d),
        Err(e) => outcome(8, "isolation", false, e),
    }
}

fn main() {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let started = Instant::now();
    let cpu = [
        std::thread::spawn(criterion_1),
        std::thread::spawn(criterion_2),
        std::thread::spawn(criterion_3),
    ];
    let (c4, c5, (c6, c7), c8) = rt.block_on(async {
        let c4 = tokio::spawn(criterion_4());
        let c5 = tokio::spawn(criterion_5());
        let c67 = tokio::spawn(criteria_6_7());
        let c8 = tokio::spawn(criterion_8());
        (c4.await.unwrap(), c5.await.unwrap(), c67.await.unwrap(), c8.await.unwrap())
    });
    let mut all: Vec<Outcome> = cpu.into_iter().map(|h| h.join().unwrap()).collect();
    all.extend([c4, c5, c6, c7, c8]);
    all.sort_by_key(|o| o.id);
    let mut failed = 0;
    for o in &all {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        failed += usize::from(!o.passed);
        println!("[{tag}] {} {}: {}", o.id, o.name, o.detail);
    }
    println!("acceptance: {}/{} passed in {:.0} s", all.len() - failed, all.len(), started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
