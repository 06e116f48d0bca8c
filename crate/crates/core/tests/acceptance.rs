//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::rc::Rc;
use std::time::Instant;

use cafs::api::{decode_data, encode_data, ApiRequest, ApiResponse};
use cafs::cid::{sha256, Cid};
use cafs::clock::ManualClock;
use cafs::daemon::{handle_api, Daemon, DaemonConfig};
use cafs::dag::{add_bytes, collect_cids, root_of, verify_block, DagLimits, DagNode};
use cafs::identity::NodeIdentity;
use cafs::ledger::{check_block, mine_block, Chain, MetadataEntry};
use cafs::naming::NameRecord;
use cafs::node::{Node, Role, VerifyStatus};
use cafs::simnet::{run_scenario, Action, ChurnAction, ChurnEvent, ScriptStep, SimConfig, Simulation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn pattern(seed: u64, len: usize) -> Vec<u8> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut v = vec![0u8; len];
    rng.fill(&mut v[..]);
    v
}

fn round_trip_integrity() -> Outcome {
    const FILES: usize = 100;
    const MAX: usize = 4 << 20;
    let sim = Simulation::start(SimConfig {
        seed: 101,
        node_count: 16,
        ..SimConfig::default()
    });
    let mut rng = ChaCha20Rng::seed_from_u64(0xacce);
    let mut failures = Vec::new();
    let mut total = 0usize;
    for i in 0..FILES {
        let size = match i {
            0 => 0,
            1 => MAX,
            _ => rng.gen_range(0..=MAX),
        };
        total += size;
        let data = pattern(i as u64, size);
        let src = rng.gen_range(0..16);
        let dst = (src + rng.gen_range(1..16)) % 16;
        let (a, b) = (sim.node(src), sim.node(dst));
        let expected = data.clone();
        let result = sim.run(async move {
            let added = a.add_with_metadata(&data, Some("blob.bin")).await?;
            let (got, report) = b.get_with_verify(&added.root).await?;
            Ok::<_, cafs::node::NodeError>((got == expected, report.status))
        });
        match result {
            Ok((true, VerifyStatus::Verified)) => {}
            Ok((same, status)) => failures.push(format!("file {i}: identical={same} status={status:?}")),
            Err(e) => failures.push(format!("file {i}: {e}")),
        }
    }
    ensure!(failures.is_empty(), "{} failures: {}", failures.len(), failures.join("; "));
    Ok(format!("{FILES} files, {} MiB, 0 failures", total >> 20))
}

fn log_scaling_lookups() -> Outcome {
    let mut means = Vec::new();
    for n in [64u32, 256] {
        let report = run_scenario(
            SimConfig {
                seed: 202,
                node_count: n,
                ..SimConfig::default()
            },
            &[ScriptStep {
                at_ms: None,
                action: Action::Lookup { node: None, count: 200 },
            }],
        )
        .map_err(|e| e.to_string())?;
        ensure!(report.lookups.len() == 200, "n={n}: {} lookups ran", report.lookups.len());
        let mean = report.mean_lookup_rounds().unwrap();
        let bound = f64::from(n).log2().ceil() + 2.0;
        ensure!(mean <= bound, "n={n}: mean {mean:.3} rounds exceeds {bound}");
        means.push(mean);
    }
    let growth = means[1] - means[0];
    ensure!(growth <= 3.0, "mean grew by {growth:.3} rounds");
    Ok(format!(
        "mean rounds {:.3} (n=64, bound 8), {:.3} (n=256, bound 10), growth {growth:.3}",
        means[0], means[1]
    ))
}

/// Bytes each of `providers` sent to `to`.
fn sent_to(providers: &[Rc<Node>], to: &Node) -> Vec<u64> {
    providers
        .iter()
        .map(|p| p.peer_ledgers().get(&to.id()).map_or(0, |l| l.bytes_sent))
        .collect()
}

fn block_bytes(node: &Node, cids: &[Cid]) -> u64 {
    cids.iter()
        .map(|c| node.store().get(c).unwrap().map_or(0, |b| b.len() as u64))
        .sum()
}

fn multi_source_retrieval() -> Outcome {
    let limits = DagLimits::default();
    let data = pattern(3, 40 * limits.chunk_size);
    let sim = Simulation::start(SimConfig {
        seed: 303,
        node_count: 16,
        ..SimConfig::default()
    });

    // Two full providers.
    let (p1, p2, fetcher) = (sim.node(4), sim.node(9), sim.node(13));
    let root = add_bytes(&data, p1.store(), &limits).unwrap().root;
    add_bytes(&data, p2.store(), &limits).unwrap();
    let all = collect_cids(&root, p1.store()).unwrap();
    let leaves = all.len() - 1;
    ensure!(leaves == 40, "file has {leaves} leaf blocks");
    let (a, b, f) = (p1.clone(), p2.clone(), fetcher.clone());
    let expected = data.clone();
    let got = sim.run(async move {
        a.provide(&root).await?;
        b.provide(&root).await?;
        f.fetch(&root).await?;
        cafs::dag::cat_file(&root, f.store()).map_err(cafs::node::NodeError::from)
    });
    ensure!(got.as_ref().ok() == Some(&expected), "full-provider fetch failed: {:?}", got.err());
    let total = block_bytes(&p1, &all);
    let sent = sent_to(&[p1.clone(), p2.clone()], &fetcher);
    ensure!(sent[0] + sent[1] == total, "providers sent {sent:?}, payload {total}");
    for (i, s) in sent.iter().enumerate() {
        ensure!(*s * 4 >= total, "provider {i} sent {s} of {total} bytes");
    }
    let share = format!(
        "{:.1}%/{:.1}%",
        100.0 * sent[0] as f64 / total as f64,
        100.0 * sent[1] as f64 / total as f64
    );

    // Disjoint halves, on a fresh network: one provider holds the root and
    // leaves 0..20, the other leaves 20..40.
    let sim = Simulation::start(SimConfig {
        seed: 304,
        node_count: 16,
        ..SimConfig::default()
    });
    let (h1, h2, fetcher) = (sim.node(5), sim.node(10), sim.node(14));
    let DagNode::Interior(links) = cafs::dag::load_node(&root, p1.store()).unwrap() else {
        return Err("root is not an interior node".into());
    };
    let first: Vec<Cid> = std::iter::once(root)
        .chain(links[..20].iter().map(|l| l.cid))
        .collect();
    let second: Vec<Cid> = links[20..].iter().map(|l| l.cid).collect();
    for (holder, cids) in [(&h1, &first), (&h2, &second)] {
        for c in cids {
            holder.store().put_verified(c, p1.store().get(c).unwrap().unwrap()).unwrap();
        }
    }
    let (a, b, f) = (h1.clone(), h2.clone(), fetcher.clone());
    let got = sim.run(async move {
        a.provide(&root).await?;
        b.provide(&root).await?;
        f.fetch(&root).await?;
        cafs::dag::cat_file(&root, f.store()).map_err(cafs::node::NodeError::from)
    });
    ensure!(got.as_ref().ok() == Some(&data), "disjoint fetch failed: {:?}", got.err());
    let sent = sent_to(&[h1.clone(), h2.clone()], &fetcher);
    let halves = [block_bytes(&h1, &first), block_bytes(&h2, &second)];
    ensure!(sent == halves, "disjoint providers sent {sent:?}, halves are {halves:?}");
    Ok(format!("full providers shipped {share}; disjoint halves shipped exactly {halves:?} bytes"))
}

fn entry(i: u64) -> MetadataEntry {
    MetadataEntry {
        file_cid: Cid::of_bytes(&i.to_be_bytes()),
        created_at: 1_600_000_000 + i,
        accessed_at: 1_600_000_500 + i,
        size_bytes: 1000 * i,
        file_type: "text/plain".into(),
        author: format!("author{i}"),
        modified_cid: i.is_multiple_of(3).then(|| Cid::of_bytes(&(i + 10_000).to_be_bytes())),
    }
}

type Mutation = (&'static str, fn(&mut MetadataEntry));

const MUTATIONS: [Mutation; 8] = [
    ("file_cid", |e| e.file_cid = Cid::of_bytes(b"other")),
    ("created_at", |e| e.created_at ^= 1),
    ("accessed_at", |e| e.accessed_at ^= 1),
    ("size_bytes", |e| e.size_bytes ^= 1),
    ("file_type", |e| e.file_type.push('x')),
    ("author", |e| e.author = e.author.to_uppercase() + "!"),
    ("modified_cid", |e| {
        e.modified_cid = match e.modified_cid {
            Some(_) => None,
            None => Some(Cid::of_bytes(b"successor")),
        }
    }),
    ("modified_cid value", |e| {
        if let Some(c) = &mut e.modified_cid {
            *c = Cid::of_bytes(c.to_text().as_bytes());
        } else {
            e.modified_cid = Some(Cid::of_bytes(b"x"));
        }
    }),
];

fn tamper_evidence() -> Outcome {
    const DIFFICULTY: u32 = 12;
    let clock = ManualClock::new(1_700_000_000_000);
    let mut chain = Chain::new();
    let mut next = 0u64;
    for h in 0..20u64 {
        let entries: Vec<MetadataEntry> = (0..1 + h % 4).map(|_| {
            next += 1;
            entry(next)
        }).collect();
        let mined = mine_block(entries, chain.tip_hash(), DIFFICULTY, &clock).map_err(|e| e.to_string())?;
        chain.append(mined.block, DIFFICULTY).map_err(|e| e.to_string())?;
        clock.advance(1000);
    }
    ensure!(chain.validate(DIFFICULTY).is_ok(), "untouched chain does not validate");

    let mut checked = 0;
    let mut missed = Vec::new();
    for (height, block) in chain.blocks().iter().enumerate() {
        for index in 0..block.entries.len() {
            for (field, mutate) in MUTATIONS {
                let mut t = chain.clone();
                t.tamper(|blocks| mutate(&mut blocks[height].entries[index]));
                checked += 1;
                if t.validate(DIFFICULTY).is_ok() {
                    missed.push(format!("{field} of entry {index} at height {height}"));
                }
            }
        }
    }
    ensure!(missed.is_empty(), "undetected mutations: {}", missed.join(", "));
    Ok(format!("{checked} single-field mutations over {} entries, all rejected", next))
}

fn byzantine_block_serving() -> Outcome {
    let limits = DagLimits::default();
    let mut runs = 0;
    for bad in 0..3usize {
        let sim = Simulation::start(SimConfig {
            seed: 500 + bad as u64,
            node_count: 16,
            ..SimConfig::default()
        });
        let providers = [sim.node(2), sim.node(6), sim.node(11)];
        let data = pattern(50 + bad as u64, 3 * limits.chunk_size + 12_345);
        let p0 = providers[0].clone();
        let d = data.clone();
        let root = sim
            .run(async move { p0.add_with_metadata(&d, Some("doc.pdf")).await })
            .map_err(|e| e.to_string())?
            .root;
        for p in &providers[1..] {
            add_bytes(&data, p.store(), &limits).unwrap();
        }
        for p in providers.clone() {
            sim.run(async move { p.provide(&root).await }).map_err(|e| e.to_string())?;
        }
        sim.set_byzantine([2, 6, 11][bad], true);
        for fetcher in [3usize, 8, 14] {
            let f = sim.node(fetcher);
            let (got, report) = sim
                .run(async move { f.get_with_verify(&root).await })
                .map_err(|e| format!("corrupt provider {bad}, fetcher {fetcher}: {e}"))?;
            ensure!(got == data, "fetcher {fetcher} got different bytes");
            ensure!(
                report.status == VerifyStatus::Verified,
                "fetcher {fetcher}: {:?} ({})",
                report.status,
                report.detail
            );
            runs += 1;
        }
        for node in sim.nodes() {
            for cid in node.store().cids() {
                let bytes = node.store().get(&cid).unwrap().unwrap();
                ensure!(verify_block(&cid, &bytes), "node {} stores a corrupt block {cid}", node.id());
            }
        }
    }
    Ok(format!("{runs} fetches with a corrupt provider, all Verified; every stored block hashes to its CID"))
}

fn pow_sanity() -> Outcome {
    const DIFFICULTY: u32 = 12;
    let clock = ManualClock::new(1_700_000_000_000);
    let mut chain = Chain::new();
    let mut attempts = Vec::new();
    for i in 0..30u64 {
        let mined = mine_block(vec![entry(i + 1)], chain.tip_hash(), DIFFICULTY, &clock).map_err(|e| e.to_string())?;
        let prev = chain.blocks().last().cloned();
        check_block(&mined.block, i, prev.as_ref(), DIFFICULTY).map_err(|v| v.to_string())?;
        attempts.push(mined.attempts);
        chain.append(mined.block, DIFFICULTY).map_err(|v| v.to_string())?;
        clock.advance(1000);
    }
    chain.validate(DIFFICULTY).map_err(|v| v.to_string())?;
    let mean = attempts.iter().sum::<u64>() as f64 / attempts.len() as f64;
    ensure!((2048.0..=8192.0).contains(&mean), "mean attempts {mean:.1}");
    Ok(format!("mean nonce attempts {mean:.1} over 30 mines; chain of 30 re-validates"))
}

fn churny_scenario(seed: u64) -> (SimConfig, Vec<ScriptStep>) {
    let config = SimConfig {
        seed,
        node_count: 24,
        drop_probability: 0.05,
        churn: vec![
            ChurnEvent {
                at_ms: 5_000,
                node: 7,
                action: ChurnAction::Leave,
            },
            ChurnEvent {
                at_ms: 40_000,
                node: 7,
                action: ChurnAction::Join,
            },
        ],
        ..SimConfig::default()
    };
    let step = |action| ScriptStep { at_ms: None, action };
    let script = vec![
        step(Action::Add { node: 3, size: 700_000, label: "a".into() }),
        step(Action::Get { node: 12, label: "a".into() }),
        step(Action::Modify { node: 3, label: "a".into(), new_label: "b".into() }),
        step(Action::Publish { node: 3, label: "b".into() }),
        step(Action::Partition { groups: vec![(0..12).collect(), (12..24).collect()] }),
        step(Action::Get { node: 20, label: "b".into() }),
        step(Action::Heal),
        step(Action::Resolve { node: 20, owner: 3 }),
        step(Action::Lookup { node: None, count: 30 }),
    ];
    (config, script)
}

fn determinism_and_vectors() -> Outcome {
    let (config, script) = churny_scenario(77);
    let first = run_scenario(config.clone(), &script).map_err(|e| e.to_string())?;
    let second = run_scenario(config, &script).map_err(|e| e.to_string())?;
    ensure!(first.to_jsonl() == second.to_jsonl(), "equal seeds gave different traces");
    let (other_cfg, other_script) = churny_scenario(78);
    let other = run_scenario(other_cfg, &other_script).map_err(|e| e.to_string())?;
    ensure!(other.trace_digest != first.trace_digest, "different seeds gave the same trace");

    let limits = DagLimits::default();
    let cid_vectors = [
        (Cid::of_bytes(b""), "QmdfTbBqBPQ7VNxZEYEj14VmRuZBkqFbiwReogJgS1zR1n"),
        (Cid::of_bytes(b"hello world"), "QmaozNR7DZHQK1ZcU9p7QdrshMvXqWK6gpu5rmrkPdT3L4"),
        (Cid::from_digest([0; 32]), "QmNLei78zWmzUdbeRB3CiUfAizWUrbeeZh5K1rhAQKCh51"),
    ];
    for (cid, text) in cid_vectors {
        ensure!(cid.to_text() == text, "cid {} != {text}", cid.to_text());
        ensure!(text.parse::<Cid>().ok() == Some(cid), "{text} does not parse back");
    }
    let long: Vec<u8> = (0..600_000u32).map(|i| (i * 7 % 256) as u8).collect();
    let dag_vectors: [(&[u8], &str); 3] = [
        (b"", "QmXWqcHJmXLJa6nvWKLjKNjHVF3eAx64eBpCirzZb86LP5"),
        (b"ab", "QmZCMQYjdcDonPvFEMWT5CqteqVcNrcg2TfWhfRRpv57Mo"),
        (&long, "QmT1C8waca2k2gMcNjpxKu8EBgX2R29mJSPu5JCBsGoLb1"),
    ];
    for (data, text) in dag_vectors {
        let root = root_of(data, &limits).map_err(|e| e.to_string())?;
        ensure!(root.to_text() == text, "dag root of {} bytes: {root}", data.len());
    }
    let e = MetadataEntry {
        file_cid: Cid::of_bytes(b"file"),
        created_at: 1_528_761_600,
        accessed_at: 1_528_980_300,
        size_bytes: 1024,
        file_type: "text/plain".into(),
        author: "alice".into(),
        modified_cid: Some(Cid::of_bytes(b"file v2")),
    };
    ensure!(
        hex::encode(e.hash()) == "d396b409fc42197de32a075ec03fc32cf44f3b0bf828b1a33aa489ed7c557d4a",
        "entry hash {}",
        hex::encode(e.hash())
    );
    let plain = MetadataEntry { modified_cid: None, ..e.clone() };
    ensure!(
        hex::encode(plain.hash()) == "7118b788f54d09826c12171506d99a87f2dd22512e4d78767aff3791a143ba4f",
        "entry hash without modification {}",
        hex::encode(plain.hash())
    );
    let mined = mine_block(vec![e], [0; 32], 12, &ManualClock::new(1_700_000_000_000)).map_err(|e| e.to_string())?;
    ensure!(
        hex::encode(mined.block.header.merkle_root) == "e8460f7aa31281929caae0829031f9bb29234eb39c5d01207561635432be818b"
            && mined.block.header.nonce == 2562
            && hex::encode(mined.block.hash()) == "0002fb9c7d0befcfa7e7daded2d649bb4bd26a33d9ef571f07d4b7fab321a82b",
        "mined block {:?}",
        mined.block.header
    );
    let record = NameRecord::sign(&NodeIdentity::from_seed([42; 32]), Cid::of_bytes(b"root"), 5, 1_700_000_000);
    let bytes = record.encode();
    ensure!(
        bytes.len() == 178
            && hex::encode(sha256(&bytes)) == "2d9da37f4d37e6be690f92e6088becd14d6ad0cbcd8fd0c5d4dccd89a4fd840d",
        "name record digest {}",
        hex::encode(sha256(&bytes))
    );
    Ok(format!(
        "identical traces ({} events, digest {}); cid, dag, entry, block and name vectors match",
        first.trace_events,
        &first.trace_digest[..16]
    ))
}

/// What a two-node exchange produced, comparable across transports.
#[derive(Debug, PartialEq, Eq)]
struct Exchange {
    cid: Cid,
    size_bytes: u64,
    identical: bool,
    status: VerifyStatus,
    resolved: Cid,
    sequence: u64,
}

fn parity_data() -> Vec<u8> {
    pattern(8, 900_000)
}

fn simnet_exchange() -> Result<Exchange, String> {
    let sim = Simulation::start(SimConfig {
        seed: 808,
        node_count: 3,
        ..SimConfig::default()
    });
    let (a, b) = (sim.node(1), sim.node(2));
    sim.run(async move {
        let data = parity_data();
        let added = a.add_with_metadata(&data, Some("notes.bin")).await?;
        let (got, report) = b.get_with_verify(&added.root).await?;
        let published = a.publish(added.root).await?;
        let resolved = b.resolve(published.name_key).await?;
        Ok(Exchange {
            cid: added.root,
            size_bytes: added.size_bytes,
            identical: got == data,
            status: report.status,
            resolved: resolved.value,
            sequence: resolved.sequence,
        })
    })
    .map_err(|e: cafs::node::NodeError| e.to_string())
}

fn loopback_exchange() -> Result<Exchange, String> {
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?;
    tokio::task::LocalSet::new().block_on(&rt, async {
        let config = |role, bootstrap: Vec<String>| DaemonConfig {
            listen_addr: "127.0.0.1:0".into(),
            api_addr: "127.0.0.1:0".into(),
            bootstrap,
            role,
            flush_interval_ms: 200,
            ..DaemonConfig::default()
        };
        let err = |e: cafs::daemon::DaemonError| e.to_string();
        let r = Daemon::start(&config(Role::Registrar, vec![]), NodeIdentity::from_seed([80; 32]))
            .await
            .map_err(err)?;
        let boot = vec![r.peer_addr().to_string()];
        let a = Daemon::start(&config(Role::Peer, boot.clone()), NodeIdentity::from_seed([81; 32]))
            .await
            .map_err(err)?;
        let b = Daemon::start(&config(Role::Peer, boot), NodeIdentity::from_seed([82; 32]))
            .await
            .map_err(err)?;
        let data = parity_data();
        let ApiResponse::Added { cid, size_bytes, .. } = handle_api(
            a.node(),
            ApiRequest::Add {
                data: encode_data(&data),
                name: Some("notes.bin".into()),
            },
        )
        .await
        else {
            return Err("add failed".into());
        };
        let reply = handle_api(b.node(), ApiRequest::Get { cid }).await;
        let ApiResponse::Got { data: body, report } = reply else {
            return Err(format!("get failed: {reply:?}"));
        };
        let reply = handle_api(a.node(), ApiRequest::Publish { cid }).await;
        let ApiResponse::Published { name_key, .. } = reply else {
            return Err(format!("publish failed: {reply:?}"));
        };
        let reply = handle_api(b.node(), ApiRequest::Resolve { key: name_key }).await;
        let ApiResponse::Resolved { cid: resolved, sequence, .. } = reply else {
            return Err(format!("resolve failed: {reply:?}"));
        };
        Ok(Exchange {
            cid,
            size_bytes,
            identical: decode_data(&body).map_err(|e| e.to_string())? == data,
            status: report.status,
            resolved,
            sequence,
        })
    })
}

fn transport_parity() -> Outcome {
    let sim = simnet_exchange()?;
    let real = loopback_exchange()?;
    ensure!(sim == real, "simnet {sim:?} vs loopback {real:?}");
    ensure!(
        real.identical && real.status == VerifyStatus::Verified && real.resolved == real.cid,
        "loopback outcome {real:?}"
    );
    Ok(format!("both transports: {} Verified, name resolves at sequence {}", real.cid, real.sequence))
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 8] = [
        ("round-trip integrity", round_trip_integrity),
        ("log-scaling lookups", log_scaling_lookups),
        ("multi-source retrieval", multi_source_retrieval),
        ("tamper evidence", tamper_evidence),
        ("byzantine block serving", byzantine_block_serving),
        ("pow sanity", pow_sanity),
        ("determinism and golden vectors", determinism_and_vectors),
        ("real-transport parity", transport_parity),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {} {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
