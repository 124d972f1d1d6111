//! Deterministic discrete-event engine with a stochastic wireless channel.
//!
//! Time is an integer tick (1 tick = 1 ms simulated). Events due at the
//! same tick fire in global sequence order. Each directed link draws loss
//! and latency from its own ChaCha stream, seeded from the run seed and the
//! link endpoints, so adding traffic on one link never perturbs another.

use crate::digest::Encoder;
use crate::ledger::NodeId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use thiserror::Error;

pub type Tick = u64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("destination {0} is not a cluster member")]
    UnknownNode(NodeId),
    #[error("send tick {send} is in the past (now {now})")]
    SendInPast { send: Tick, now: Tick },
    #[error("timer tick {fire} must be after now ({now})")]
    TimerNotInFuture { fire: Tick, now: Tick },
    #[error("invalid channel: {0}")]
    InvalidChannel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatencyDist {
    Fixed(Tick),
    Uniform { min: Tick, max: Tick },
}

impl LatencyDist {
    pub fn bounds(&self) -> (Tick, Tick) {
        match *self {
            LatencyDist::Fixed(t) => (t, t),
            LatencyDist::Uniform { min, max } => (min, max),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Tick {
        match *self {
            LatencyDist::Fixed(t) => t,
            LatencyDist::Uniform { min, max } => rng.gen_range(min..=max),
        }
    }
}

/// Directed link `from -> to` severed for ticks in `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub from: NodeId,
    pub to: NodeId,
    pub start: Tick,
    pub end: Tick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub loss_prob: f64,
    pub latency: LatencyDist,
    /// Messages per node per tick.
    pub bandwidth_cap: u32,
    /// `(from_tick, cap)` overrides applied in tick order.
    pub bandwidth_schedule: Vec<(Tick, u32)>,
    pub partitions: Vec<Partition>,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self {
            loss_prob: 0.0,
            latency: LatencyDist::Fixed(5),
            bandwidth_cap: 1000,
            bandwidth_schedule: Vec::new(),
            partitions: Vec::new(),
        }
    }
}

impl ChannelModel {
    pub fn lossless(latency: Tick) -> Self {
        Self {
            latency: LatencyDist::Fixed(latency),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.loss_prob) || self.loss_prob.is_nan() {
            return Err(SimError::InvalidChannel(format!(
                "loss_prob {} not in [0,1]",
                self.loss_prob
            )));
        }
        let (min, max) = self.latency.bounds();
        if min > max {
            return Err(SimError::InvalidChannel(format!(
                "latency min {min} > max {max}"
            )));
        }
        if self.bandwidth_cap == 0 || self.bandwidth_schedule.iter().any(|&(_, c)| c == 0) {
            return Err(SimError::InvalidChannel(
                "bandwidth_cap must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn cap_at(&self, tick: Tick) -> u32 {
        self.bandwidth_schedule
            .iter()
            .filter(|&&(from, _)| from <= tick)
            .max_by_key(|&&(from, _)| from)
            .map_or(self.bandwidth_cap, |&(_, cap)| cap)
    }

    pub fn severed(&self, from: NodeId, to: NodeId, tick: Tick) -> bool {
        self.partitions
            .iter()
            .any(|p| p.from == from && p.to == to && p.start <= tick && tick < p.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Delivery {
    At(Tick),
    Dropped,
}

#[derive(Debug, Clone)]
pub struct Envelope<M> {
    pub src: NodeId,
    pub dst: NodeId,
    pub payload: M,
    pub send_tick: Tick,
    pub deliver: Delivery,
}

/// Labels used for per-kind accounting and traces.
pub trait Payload: Clone {
    fn kind(&self) -> &'static str;
    /// Protocol round (term or view) the message belongs to, if any.
    fn round(&self) -> Option<u64> {
        None
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub per_node_sent: Vec<u64>,
    pub by_kind: BTreeMap<String, u64>,
}

impl MessageStats {
    fn new(n: usize) -> Self {
        Self {
            per_node_sent: vec![0; n],
            ..Self::default()
        }
    }

    pub fn in_flight(&self) -> u64 {
        self.sent - self.delivered - self.dropped
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimerId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TimerKind {
    /// Node-internal protocol deadline (election, heartbeat, view timeout).
    Wake,
    /// Client command arrival.
    Workload,
    /// Fault-plan activation.
    Fault,
    /// Operator-issued switch request.
    Operator,
}

#[derive(Debug, Clone)]
pub enum Fired<M> {
    Deliver {
        src: NodeId,
        dst: NodeId,
        payload: M,
        send_tick: Tick,
    },
    Timer {
        node: NodeId,
        id: TimerId,
        kind: TimerKind,
    },
}

#[derive(Debug, Clone)]
enum Event<M> {
    Deliver(Envelope<M>),
    Timer {
        node: NodeId,
        id: TimerId,
        kind: TimerKind,
    },
}

/// One line of the run trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub tick: Tick,
    pub node: u32,
    pub event: String,
    pub detail: String,
}

pub struct Simulator<M> {
    now: Tick,
    n: usize,
    channel: ChannelModel,
    seed: u64,
    next_seq: u64,
    queue: BinaryHeap<Reverse<(Tick, u64)>>,
    events: BTreeMap<u64, Event<M>>,
    cancelled: BTreeSet<TimerId>,
    link_rngs: BTreeMap<(NodeId, NodeId), ChaCha8Rng>,
    sends_per_tick: BTreeMap<(Tick, NodeId), u32>,
    stats: MessageStats,
    trace: Option<Vec<TraceEvent>>,
}

fn link_seed(seed: u64, src: NodeId, dst: NodeId) -> u64 {
    let mut enc = Encoder::tagged("link");
    enc.u64(seed).u32(src.0).u32(dst.0);
    enc.finish().0
}

impl<M: Payload> Simulator<M> {
    pub fn new(n: usize, channel: ChannelModel, seed: u64) -> Result<Self, SimError> {
        channel.validate()?;
        Ok(Self {
            now: 0,
            n,
            channel,
            seed,
            next_seq: 0,
            queue: BinaryHeap::new(),
            events: BTreeMap::new(),
            cancelled: BTreeSet::new(),
            link_rngs: BTreeMap::new(),
            sends_per_tick: BTreeMap::new(),
            stats: MessageStats::new(n),
            trace: None,
        })
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn nodes(&self) -> usize {
        self.n
    }

    pub fn channel(&self) -> &ChannelModel {
        &self.channel
    }

    pub fn stats(&self) -> &MessageStats {
        &self.stats
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn peek_tick(&self) -> Option<Tick> {
        self.queue.peek().map(|Reverse((t, _))| *t)
    }

    pub fn record(&mut self, node: NodeId, event: &str, detail: impl FnOnce() -> String) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceEvent {
                tick: self.now,
                node: node.0,
                event: event.to_string(),
                detail: detail(),
            });
        }
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        self.trace.take().unwrap_or_default()
    }

    fn push(&mut self, tick: Tick, ev: Event<M>) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse((tick, seq)));
        self.events.insert(seq, ev);
    }

    /// Sends `payload` from `src` to `dst` at the current tick.
    pub fn send(&mut self, src: NodeId, dst: NodeId, payload: M) -> Result<Delivery, SimError> {
        self.schedule(Envelope {
            src,
            dst,
            payload,
            send_tick: self.now,
            deliver: Delivery::Dropped,
        })
    }

    /// Enqueues an envelope; the delivery field is overwritten with the
    /// sampled outcome, which is also returned.
    pub fn schedule(&mut self, mut env: Envelope<M>) -> Result<Delivery, SimError> {
        if env.dst.index() >= self.n {
            return Err(SimError::UnknownNode(env.dst));
        }
        if env.src.index() >= self.n {
            return Err(SimError::UnknownNode(env.src));
        }
        if env.send_tick < self.now {
            return Err(SimError::SendInPast {
                send: env.send_tick,
                now: self.now,
            });
        }
        // Bandwidth: defer to the first tick with spare capacity.
        let mut tick = env.send_tick;
        loop {
            let cap = self.channel.cap_at(tick);
            let used = self.sends_per_tick.entry((tick, env.src)).or_insert(0);
            if *used < cap {
                *used += 1;
                break;
            }
            tick += 1;
        }
        env.send_tick = tick;

        let (loss_prob, latency) = (self.channel.loss_prob, self.channel.latency);
        let seed = self.seed;
        let rng = self
            .link_rngs
            .entry((env.src, env.dst))
            .or_insert_with(|| ChaCha8Rng::seed_from_u64(link_seed(seed, env.src, env.dst)));
        let lost = rng.gen::<f64>() < loss_prob;
        let delay = latency.sample(rng);
        let severed = self.channel.severed(env.src, env.dst, env.send_tick);

        self.stats.sent += 1;
        self.stats.per_node_sent[env.src.index()] += 1;
        *self
            .stats
            .by_kind
            .entry(env.payload.kind().to_string())
            .or_insert(0) += 1;

        let kind = env.payload.kind();
        let round = env.payload.round();
        let (src, dst) = (env.src, env.dst);
        if lost || severed {
            env.deliver = Delivery::Dropped;
            self.stats.dropped += 1;
            self.record(src, "drop", || {
                format!("{kind} r={} to={}", round.unwrap_or(0), dst.0)
            });
            return Ok(Delivery::Dropped);
        }
        let at = env.send_tick + delay;
        env.deliver = Delivery::At(at);
        self.record(src, "send", || {
            format!("{kind} r={} to={} at={at}", round.unwrap_or(0), dst.0)
        });
        self.push(at, Event::Deliver(env));
        Ok(Delivery::At(at))
    }

    pub fn set_timer(
        &mut self,
        node: NodeId,
        fire: Tick,
        kind: TimerKind,
    ) -> Result<TimerId, SimError> {
        if fire <= self.now {
            return Err(SimError::TimerNotInFuture {
                fire,
                now: self.now,
            });
        }
        let id = TimerId(self.next_seq);
        self.push(fire, Event::Timer { node, id, kind });
        Ok(id)
    }

    pub fn cancel_timer(&mut self, id: TimerId) {
        self.cancelled.insert(id);
    }

    /// Advances to the earliest pending tick and fires everything due then.
    pub fn step(&mut self) -> Vec<Fired<M>> {
        let Some(&Reverse((tick, _))) = self.queue.peek() else {
            return Vec::new();
        };
        debug_assert!(tick >= self.now);
        self.now = tick;
        let mut out = Vec::new();
        while let Some(&Reverse((t, seq))) = self.queue.peek() {
            if t != tick {
                break;
            }
            self.queue.pop();
            match self.events.remove(&seq).expect("event for queued seq") {
                Event::Deliver(env) => {
                    self.stats.delivered += 1;
                    out.push(Fired::Deliver {
                        src: env.src,
                        dst: env.dst,
                        payload: env.payload,
                        send_tick: env.send_tick,
                    });
                }
                Event::Timer { node, id, kind } => {
                    if !self.cancelled.remove(&id) {
                        out.push(Fired::Timer { node, id, kind });
                    }
                }
            }
        }
        // Bandwidth bookkeeping for past ticks is no longer needed.
        let keep = self.sends_per_tick.split_off(&(tick, NodeId(0)));
        self.sends_per_tick = keep;
        out
    }

    /// Drops all pending timers and lets in-flight messages land.
    pub fn drain(&mut self) -> Vec<Fired<M>> {
        let mut out = Vec::new();
        while !self.queue.is_empty() {
            out.extend(self.step());
        }
        out
    }
}
