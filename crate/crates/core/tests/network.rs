use std::collections::BTreeSet;

use cafs::cid::Cid;
use cafs::dag::{root_of, verify_block, DagLimits};
use cafs::dht::NodeId;
use cafs::naming::NameError;
use cafs::node::{NodeError, VerifyStatus};
use cafs::simnet::{run_scenario, Action, Scenario, ScriptError, ScriptStep, SimConfig, Simulation};

fn sim(seed: u64, n: u32) -> Simulation {
    Simulation::start(SimConfig {
        seed,
        node_count: n,
        ..SimConfig::default()
    })
}

fn lookups(count: usize) -> Vec<ScriptStep> {
    vec![ScriptStep {
        at_ms: None,
        action: Action::Lookup { node: None, count },
    }]
}

fn bytes(n: usize, salt: u8) -> Vec<u8> {
    (0..n).map(|i| (i as u8).wrapping_mul(31).wrapping_add(salt)).collect()
}

#[test]
fn two_node_lookup_takes_one_round() {
    let s = sim(1, 2);
    let n = s.node(1);
    let target = s.node(0).id();
    let out = s.run(async move { n.iterative_find_node(target).await }).unwrap();
    assert_eq!(out.rounds, 1);
    assert_eq!(out.closest.len(), 1);
    assert_eq!(out.closest[0].id, target);
}

#[test]
fn lookups_find_the_true_k_closest() {
    let report = run_scenario(
        SimConfig {
            seed: 9,
            node_count: 64,
            ..SimConfig::default()
        },
        &lookups(60),
    )
    .unwrap();
    assert_eq!(report.lookups.len(), 60);
    assert!(report.lookups.iter().all(|l| l.exact));
}

#[test]
fn provider_records_land_on_the_k_closest() {
    let s = sim(2, 64);
    let data = bytes(10_000, 1);
    let n = s.node(17);
    let root = s.run(async move { n.add_with_metadata(&data, None).await }).unwrap().root;
    let key = NodeId::from(&root);
    let expected: BTreeSet<usize> = s
        .oracle()
        .k_closest(&key, 20)
        .iter()
        .map(|id| s.oracle().index_of(id).unwrap())
        .collect();
    let holders: BTreeSet<usize> = s.oracle().provider_record_holders(&root).into_iter().collect();
    assert_eq!(holders, expected);
}

#[test]
fn find_providers_returns_every_provider() {
    let s = sim(3, 32);
    let data = bytes(5_000, 2);
    let limits = DagLimits::default();
    let providers = [4usize, 11, 25];
    let mut root = None;
    for &p in &providers {
        let node = s.node(p);
        cafs::dag::add_bytes(&data, node.store(), &limits).unwrap();
        let r = root_of(&data, &limits).unwrap();
        root = Some(r);
        s.run(async move { node.provide(&r).await }).unwrap();
    }
    let root = root.unwrap();
    let asker = s.node(30);
    let found = s.run(async move { asker.find_providers(&root).await }).unwrap();
    let found: BTreeSet<NodeId> = found.iter().map(|r| r.provider.id).collect();
    for p in providers {
        assert!(found.contains(&s.node(p).id()), "provider {p} missing");
    }
    let actual: BTreeSet<NodeId> = s.oracle().block_holders(&root).into_iter().map(|i| s.node(i).id()).collect();
    assert!(found.is_superset(&actual));
}

#[test]
fn total_loss_fails_without_hanging() {
    let s = Simulation::start(SimConfig {
        seed: 4,
        node_count: 8,
        drop_probability: 1.0,
        ..SimConfig::default()
    });
    let data = bytes(2_000, 3);
    let root = root_of(&data, &DagLimits::default()).unwrap();
    let a = s.node(1);
    let added = s.run_until(async move { a.add_with_metadata(&data, None).await }, s.now_ms() + 600_000);
    assert!(matches!(added, Some(Err(NodeError::RegistrarUnreachable(_)))), "{added:?}");
    let b = s.node(2);
    let got = s.run_until(async move { b.get_with_verify(&root).await }, s.now_ms() + 600_000);
    assert!(matches!(got, Some(Err(NodeError::Unretrievable(c))) if c == root), "{got:?}");
}

#[test]
fn equal_seeds_replay_and_different_seeds_diverge() {
    let script = [
        ScriptStep {
            at_ms: None,
            action: Action::Add {
                node: 2,
                size: 50_000,
                label: "f".into(),
            },
        },
        ScriptStep {
            at_ms: Some(20_000),
            action: Action::Get {
                node: 9,
                label: "f".into(),
            },
        },
        ScriptStep {
            at_ms: None,
            action: Action::Lookup { node: None, count: 10 },
        },
    ];
    let config = |seed| SimConfig {
        seed,
        node_count: 12,
        drop_probability: 0.02,
        ..SimConfig::default()
    };
    let a = run_scenario(config(5), &script).unwrap();
    let b = run_scenario(config(5), &script).unwrap();
    let c = run_scenario(config(6), &script).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_jsonl(), b.to_jsonl());
    assert_ne!(a.trace_digest, c.trace_digest);
    assert_eq!(a.ops[1].at_ms, 20_000);
}

#[test]
fn names_publish_and_resolve_across_nodes() {
    let s = sim(6, 16);
    let owner = s.node(5);
    let key = owner.id();
    let (v1, v2) = (Cid::of_bytes(b"v1"), Cid::of_bytes(b"v2"));
    let o = owner.clone();
    let first = s.run(async move { o.publish(v1).await }).unwrap();
    let r = s.node(12);
    let got = s.run(async move { r.resolve(key).await }).unwrap();
    assert_eq!((got.value, got.sequence), (v1, first.sequence));

    let o = owner.clone();
    let second = s.run(async move { o.publish(v2).await }).unwrap();
    assert!(second.sequence > first.sequence);
    for reader in [1usize, 9, 15] {
        let r = s.node(reader);
        let got = s.run(async move { r.resolve(key).await }).unwrap();
        assert_eq!(got.value, v2, "reader {reader}");
    }

    let r = s.node(3);
    let unknown = s.run(async move { r.resolve(NodeId([7; 32])).await });
    assert!(matches!(unknown, Err(NodeError::Name(NameError::NotFound))), "{unknown:?}");
}

#[test]
fn republishing_keeps_names_alive() {
    let s = sim(7, 8);
    let o = s.node(2);
    let key = o.id();
    let rec = s.run(async move { o.publish(Cid::of_bytes(b"x")).await }).unwrap();
    // Republishing keeps the record alive well past its original validity.
    s.advance((rec.validity * 1000).saturating_sub(s.now_ms()) + 3_600_000);
    let r = s.node(6);
    let got = s.run(async move { r.resolve(key).await }).unwrap();
    assert!(got.validity > rec.validity);
}

#[test]
fn adding_twice_empty_files_and_modifications() {
    let s = sim(8, 8);
    let a = s.node(3);
    let data = bytes(300_000, 4);
    let (first, second, empty) = s
        .run(async move {
            let first = a.add_with_metadata(&data, None).await?;
            let second = a.add_with_metadata(&data, None).await?;
            let empty = a.add_with_metadata(&[], None).await?;
            Ok::<_, NodeError>((first, second, empty))
        })
        .unwrap();
    assert_eq!(first.root, second.root);
    assert!(second.height > first.height);
    assert_eq!(empty.size_bytes, 0);

    let b = s.node(6);
    let (got, report) = s.run(async move { b.get_with_verify(&empty.root).await }).unwrap();
    assert!(got.is_empty());
    assert_eq!(report.status, VerifyStatus::Verified);

    let a = s.node(3);
    let root = first.root;
    let (v2, v3, history) = s
        .run(async move {
            let v2 = a.record_modification(&root, b"second version", Some("a.txt")).await?;
            let v3 = a.record_modification(&v2.root, b"third version", Some("a.txt")).await?;
            let same = a.record_modification(&v3.root, b"third version", None).await;
            assert!(matches!(same, Err(NodeError::SameContent(_))));
            let history = a.version_history(&root).await?;
            Ok::<_, NodeError>((v2, v3, history))
        })
        .unwrap();
    assert_eq!(history, vec![root, v2.root, v3.root]);

    let b = s.node(5);
    let (got, report) = s.run(async move { b.get_with_verify(&v3.root).await }).unwrap();
    assert_eq!(got, b"third version");
    assert_eq!(report.status, VerifyStatus::Verified);
    assert!(report.ledger_entries.iter().any(|m| m.modification));
}

#[test]
fn every_replica_converges_on_the_registrar_chain() {
    let s = sim(9, 12);
    for i in 1..6usize {
        let n = s.node(i);
        let data = bytes(1_000 + i, i as u8);
        s.run(async move { n.add_with_metadata(&data, None).await }).unwrap();
    }
    let truth = s.node(0).chain();
    assert!(truth.len() >= 5);
    truth.validate(12).unwrap();
    for i in 1..12usize {
        let n = s.node(i);
        s.run(async move { n.sync_ledger().await }).unwrap();
        assert_eq!(s.node(i).chain().blocks(), truth.blocks(), "node {i}");
    }
}

#[test]
fn lone_corrupt_provider_is_unretrievable_and_stores_nothing_bad() {
    let s = sim(10, 12);
    let p = s.node(4);
    let data = bytes(600_000, 5);
    let root = s.run(async move { p.add_with_metadata(&data, None).await }).unwrap().root;
    s.set_byzantine(4, true);
    let f = s.node(8);
    let got = s.run(async move { f.get_with_verify(&root).await });
    assert!(matches!(got, Err(NodeError::Unretrievable(_))), "{got:?}");
    let bad = s.node(4).id();
    assert!(s.node(8).peer_ledgers()[&bad].invalid_blocks > 0);
    for node in s.nodes() {
        for cid in node.store().cids() {
            assert!(verify_block(&cid, &node.store().get(&cid).unwrap().unwrap()));
        }
    }
}

#[test]
fn partitioned_fetch_fails_and_heals() {
    let s = sim(11, 10);
    let p = s.node(2);
    let data = bytes(40_000, 6);
    let root = s.run(async move { p.add_with_metadata(&data, None).await }).unwrap().root;
    s.partition(&[vec![0, 1, 2, 3, 4], vec![5, 6, 7, 8, 9]]);
    let f = s.node(7);
    let got = s.run(async move { f.get_with_verify(&root).await });
    assert!(got.is_err());
    s.heal();
    let f = s.node(7);
    let (_, report) = s.run(async move { f.get_with_verify(&root).await }).unwrap();
    assert_eq!(report.status, VerifyStatus::Verified);
}

#[test]
fn departed_nodes_do_not_stall_lookups() {
    let s = sim(12, 40);
    for i in [3usize, 8, 13, 21, 34] {
        s.set_alive(i, false);
    }
    let n = s.node(1);
    let target = NodeId([0x5a; 32]);
    let out = s.run(async move { n.iterative_find_node(target).await }).unwrap();
    let live: Vec<NodeId> = s
        .oracle()
        .k_closest_excluding(&target, 20, &s.node(1).id())
        .into_iter()
        .filter(|id| s.is_alive(s.oracle().index_of(id).unwrap()))
        .collect();
    let found: Vec<NodeId> = out.closest.iter().map(|c| c.id).collect();
    assert!(found.iter().all(|id| s.is_alive(s.oracle().index_of(id).unwrap())));
    assert_eq!(found[..10], live[..10]);
}

#[test]
fn scenario_files_parse_and_validate() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/basic.toml")).unwrap();
    let scenario = Scenario::from_toml(&text).unwrap();
    assert_eq!(scenario.config.node_count, 16);
    assert_eq!(scenario.script.len(), 9);

    assert!(matches!(
        Scenario::from_toml("seed = 1\nnode_count = 4\nbogus = 1\n"),
        Err(ScriptError::Parse(_))
    ));
    let bad = Scenario::from_toml("seed = 1\nnode_count = 4\n[[script]]\nop = \"get\"\nnode = 9\nlabel = \"x\"\n").unwrap();
    assert!(matches!(bad.run(), Err(ScriptError::Invalid { step: 0, .. })));
}
