use dcast_core::cluster::Cluster;
use dcast_core::ledger::{
    make_checkpoint, verify_checkpoint, Command, CommittedLedger, LedgerEntry, NodeId, Protocol,
};
use dcast_core::report::RunReport;
use dcast_core::scenario::Scenario;
use dcast_core::sim::{ChannelModel, Delivery, Fired, LatencyDist, Payload, Simulator};
use proptest::prelude::*;
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
struct Msg(u32);

impl Payload for Msg {
    fn kind(&self) -> &'static str {
        "msg"
    }
}

fn channel(loss: f64, min: u64, spread: u64, cap: u32) -> ChannelModel {
    ChannelModel {
        loss_prob: loss,
        latency: LatencyDist::Uniform {
            min,
            max: min + spread,
        },
        bandwidth_cap: cap,
        ..ChannelModel::default()
    }
}

type Sends = Vec<(u32, u32, u64)>;
type Arrival = (u32, u32, u64, u64, u64);

/// Schedules every send up front and returns each delivery as
/// `(id, src, requested tick, departure tick, arrival tick)`.
fn simulate(
    ch: &ChannelModel,
    seed: u64,
    n: usize,
    sends: &Sends,
) -> (Vec<Arrival>, u64, u64, u64) {
    let mut sim = Simulator::new(n, ch.clone(), seed).unwrap();
    let mut sorted: Vec<_> = sends.iter().enumerate().collect();
    sorted.sort_by_key(|(_, s)| s.2);
    let mut requested = BTreeMap::new();
    for (id, &(src, dst, at)) in sorted {
        let env = dcast_core::sim::Envelope {
            src: NodeId(src % n as u32),
            dst: NodeId(dst % n as u32),
            payload: Msg(id as u32),
            send_tick: at,
            deliver: Delivery::Dropped,
        };
        requested.insert(id as u32, at);
        sim.schedule(env).unwrap();
    }
    let mut out = Vec::new();
    while !sim.is_idle() {
        for f in sim.step() {
            if let Fired::Deliver {
                src,
                payload,
                send_tick,
                ..
            } = f
            {
                out.push((
                    payload.0,
                    src.0,
                    requested[&payload.0],
                    send_tick,
                    sim.now(),
                ));
            }
        }
    }
    let st = sim.stats();
    (out, st.sent, st.delivered, st.dropped)
}

fn entry(h: u64, seq: u64, payload: u8) -> LedgerEntry {
    LedgerEntry {
        height: h,
        cmd: Command::new(1, seq, vec![payload]),
        origin_protocol: Protocol::Raft,
        origin_round: 1,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn channel_respects_latency_bandwidth_and_conservation(
        seed in any::<u64>(),
        n in 2usize..6,
        loss in 0.0f64..0.5,
        min in 1u64..20,
        spread in 0u64..30,
        cap in 1u32..4,
        sends in proptest::collection::vec((0u32..8, 0u32..8, 0u64..40), 1..120),
    ) {
        let ch = channel(loss, min, spread, cap);
        let (delivered, sent, ok, dropped) = simulate(&ch, seed, n, &sends);
        prop_assert_eq!(sent, sends.len() as u64);
        prop_assert_eq!(sent, ok + dropped);
        prop_assert_eq!(ok, delivered.len() as u64);
        let mut per_tick: BTreeMap<(u32, u64), u32> = BTreeMap::new();
        for &(_, src, requested, departed, arrived) in &delivered {
            prop_assert!(departed >= requested);
            let lat = arrived - departed;
            prop_assert!((min..=min + spread).contains(&lat), "latency {}", lat);
            *per_tick.entry((src, departed)).or_default() += 1;
        }
        prop_assert!(per_tick.values().all(|&c| c <= cap));
        // same seed, same outcome
        prop_assert_eq!(simulate(&ch, seed, n, &sends).0, delivered);
    }

    #[test]
    fn mutating_one_entry_changes_every_later_hash(
        payloads in proptest::collection::vec(any::<u8>(), 2..40),
        pick in any::<prop::sample::Index>(),
        delta in 1u8..=255,
    ) {
        let mut a = CommittedLedger::new();
        for (i, &p) in payloads.iter().enumerate() {
            a.append(entry(i as u64 + 1, i as u64, p)).unwrap();
        }
        let k = pick.index(payloads.len()) as u64 + 1;
        let mut b = a.clone();
        b.tamper_payload(k, vec![payloads[k as usize - 1].wrapping_add(delta)]);
        prop_assert!(!b.verify_chain());
        b.rehash();
        prop_assert!(b.verify_chain());
        for h in 1..=a.len() {
            prop_assert_eq!(a.hash_at(h) == b.hash_at(h), h < k, "height {}", h);
        }
        let cp = make_checkpoint(&a, k - 1, Protocol::Raft).unwrap();
        prop_assert!(verify_checkpoint(&cp, &b));
        let cp = make_checkpoint(&a, k, Protocol::Raft).unwrap();
        prop_assert!(!verify_checkpoint(&cp, &b));
    }
}

fn random_scenario(seed: u64, protocol: usize, loss: f64, crash: Option<(u64, usize)>) -> Scenario {
    let mut s = Scenario::default();
    s.cluster.seed = seed;
    s.cluster.duration = 3000;
    s.cluster.protocol = ["raft", "hotstuff-basic", "hotstuff-chained"][protocol].into();
    s.channel.loss_prob = loss;
    s.channel.latency_min = 2;
    s.channel.latency_max = 25;
    s.workload.rate = 0.2;
    s.switch.enabled = true;
    s.switch.manual = vec!["1200:raft".into(), "2000:hotstuff-chained".into()];
    if let Some((at, node)) = crash {
        s.faults.plan = vec![format!("{at}:{node}:crash")];
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn honest_commits_grow_monotonically_and_agree(
        seed in any::<u64>(),
        protocol in 0usize..3,
        loss in 0.0f64..0.2,
        crash in proptest::option::of((100u64..2500, 0usize..4)),
    ) {
        let s = random_scenario(seed, protocol, loss, crash);
        let mut c = Cluster::from_scenario(&s).unwrap();
        let mut last = vec![0u64; c.nodes.len()];
        let mut snapshots: Vec<Vec<CommittedLedger>> = vec![Vec::new(); c.nodes.len()];
        for end in (250..=3000).step_by(250) {
            c.run_until(end);
            for (i, node) in c.nodes.iter().enumerate() {
                let h = node.ledger.len();
                prop_assert!(h >= last[i], "n{} went from {} to {}", i, last[i], h);
                last[i] = h;
                snapshots[i].push(node.ledger.clone());
            }
        }
        let honest: Vec<usize> = (0..c.nodes.len()).filter(|&i| c.is_honest(i)).collect();
        for &i in &honest {
            let fin = &c.nodes[i].ledger;
            prop_assert!(fin.verify_chain());
            prop_assert!(snapshots[i].iter().all(|l| l.is_prefix_of(fin)));
            for &j in &honest {
                prop_assert!(fin.prefix_consistent(&c.nodes[j].ledger));
            }
        }
        let (r, _) = c.finish();
        prop_assert!(r.safe(), "{:?}", r.safety);
        prop_assert_eq!(RunReport::from_json(&r.to_json()).unwrap(), r.clone());
        prop_assert_eq!(RunReport::from_csv(&r.to_csv()).unwrap(), r);
    }
}
