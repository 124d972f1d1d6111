use dcast_core::cluster::{run, Cluster};
use dcast_core::ledger::Protocol;
use dcast_core::report::{read_trace, write_trace, RunReport};
use dcast_core::scenario::Scenario;
use dcast_core::switch::{Outcome, Trigger};

fn scenario(text: &str) -> Scenario {
    Scenario::parse(text).unwrap()
}

#[test]
fn quiet_raft_cluster_converges_without_switches() {
    let s = scenario(
        r#"
        [cluster]
        n = 4
        protocol = "raft"
        duration = 10000
        [workload]
        rate = 0.2
        [switch]
        enabled = true
        "#,
    );
    let (r, _) = run(&s, false).unwrap();
    assert!(r.safe(), "{:?}", r.safety);
    let h: Vec<u64> = r.nodes.iter().map(|n| n.committed_height).collect();
    assert!(h.iter().all(|&x| x == h[0]), "{h:?}");
    assert!(h[0] > 1000, "{h:?}");
    assert_eq!(r.switches.count(Outcome::Completed), 0);
    assert!(r.commit_latency.count > 0);
}

#[test]
fn equivocating_raft_node_triggers_one_switch_to_bft() {
    let mut s = scenario(
        r#"
        [cluster]
        n = 4
        protocol = "raft"
        duration = 10000
        [workload]
        rate = 0.2
        [switch]
        enabled = true
        "#,
    );
    // Raft tolerates crashes only, so the equivocator must not be leading.
    let mut probe = Cluster::from_scenario(&s).unwrap();
    probe.run_until(1999);
    let byz = (0..4).find(|&i| !probe.nodes[i].is_leader()).unwrap();
    s.faults.plan = vec![format!("2000:{byz}:equivocate")];
    let (r, _) = run(&s, false).unwrap();
    assert!(r.safe(), "{:?}", r.safety);
    let done: Vec<_> = r.switches.completed().collect();
    assert_eq!(done.len(), 1, "{:#?}", r.switches);
    assert_eq!(done[0].from, Protocol::Raft);
    assert!(done[0].to.is_bft());
    assert_eq!(done[0].trigger, Trigger::ByzRatio);
    assert!(r.min_honest_height() > done[0].checkpoint_height.unwrap());
}

#[test]
fn hotstuff_modes_make_progress() {
    for p in ["hotstuff-basic", "hotstuff-chained"] {
        let mut s = scenario("[workload]\nrate = 0.5\n[cluster]\nduration = 5000\n");
        s.set("cluster.protocol", p).unwrap();
        let (r, _) = run(&s, false).unwrap();
        assert!(r.safe(), "{p}: {:?}", r.safety);
        assert!(r.min_honest_height() > 50, "{p}: {:?}", r.nodes);
    }
}

#[test]
fn manual_switches_preserve_ledger() {
    let s = scenario(
        r#"
        [cluster]
        duration = 8000
        [workload]
        rate = 0.3
        [switch]
        manual = ["1500:hotstuff-chained", "3500:hotstuff-basic", "5500:raft"]
        "#,
    );
    let (r, _) = run(&s, false).unwrap();
    assert!(r.safe(), "{:?}", r.safety);
    assert_eq!(r.switches.count(Outcome::Completed), 3, "{:#?}", r.switches);
    assert!(r
        .nodes
        .iter()
        .all(|n| n.protocol == Protocol::Raft && n.epoch == 3));
}

#[test]
fn same_seed_same_bytes() {
    let s = scenario(
        r#"
        [cluster]
        duration = 3000
        seed = 11
        [channel]
        loss_prob = 0.1
        latency_min = 3
        latency_max = 30
        [faults]
        plan = ["500:1:crash:1500"]
        [switch]
        enabled = true
        manual = ["1000:hotstuff-basic"]
        "#,
    );
    let once = || {
        let (r, t) = run(&s, true).unwrap();
        let mut buf = Vec::new();
        write_trace(&t, &mut buf).unwrap();
        (r.to_json(), r.to_csv(), buf)
    };
    let a = once();
    assert_eq!(a, once());
    assert!(!a.2.is_empty());
}

#[test]
fn report_round_trips_through_json_and_csv() {
    let s = scenario("[cluster]\nduration = 2000\n[switch]\nmanual = [\"700:hotstuff-chained\"]\n");
    let mut c = Cluster::from_scenario(&s).unwrap();
    c.enable_trace();
    let (r, t) = c.run();
    assert_eq!(RunReport::from_json(&r.to_json()).unwrap(), r);
    assert_eq!(RunReport::from_csv(&r.to_csv()).unwrap(), r);
    let mut buf = Vec::new();
    write_trace(&t, &mut buf).unwrap();
    assert_eq!(read_trace(std::str::from_utf8(&buf).unwrap()).unwrap(), t);
}
