//! Scenario actors: the benign client pool and the five attack generators.
//! Every actor is an event-driven state machine; each traffic source draws
//! from its own RNG stream so adding or removing one source (or one whole
//! attack) never shifts anybody else's timing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::engine::{actor_rng, Engine, EventHandle, SimTime};
use crate::events::{AttackWake, BenignWake, SimEvent};
use crate::sentinel::AttackClass;
use crate::topology::{
    attacker_addr, benign_addr, HostAddr, Packet, PacketKind, Payload, Target, SIZE_CTRL,
    SIZE_FRAGMENT, SIZE_GET, SIZE_TLS, VICTIM,
};

/// How long a client waits on the server before giving up. Only armed while
/// the ball is in the server's court (handshake reply or final response);
/// a client dribbling its own request is not waiting on anyone.
pub const CLIENT_PATIENCE_S: f64 = 10.0;

const BAD_NETWORK_FRAGMENTS: u8 = 3;

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenignConfig {
    pub client_count: u32,
    /// Mean think time between requests, exponentially distributed.
    pub request_interval_s: f64,
    pub target: Target,
    /// This many clients (taken from the front of the pool) send their
    /// header in fragments with long pauses, like a client on a bad link.
    pub bad_network_clients: u32,
    pub bad_gap_s: f64,
}

impl Default for BenignConfig {
    fn default() -> Self {
        BenignConfig {
            client_count: 20,
            request_interval_s: 2.0,
            target: Target::Light,
            bad_network_clients: 1,
            bad_gap_s: 10.0,
        }
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackClass,
    pub start_s: f64,
    pub duration_s: f64,
    /// Packets (or requests) per second for the flooding kinds.
    #[serde(default)]
    pub rate_pps: f64,
    #[serde(default = "default_source_count")]
    pub source_count: u32,
    #[serde(default = "default_connections_per_source")]
    pub connections_per_source: u32,
    /// Gap between fragments for the slow kinds.
    #[serde(default = "default_slow_interval")]
    pub slow_interval_s: f64,
    #[serde(default = "default_jitter")]
    pub jitter_fraction: f64,
}

fn default_source_count() -> u32 {
    300
}
fn default_connections_per_source() -> u32 {
    8
}
fn default_slow_interval() -> f64 {
    30.0
}
fn default_jitter() -> f64 {
    0.02
}

impl AttackConfig {
    pub fn is_flooding(&self) -> bool {
        matches!(
            self.kind,
            AttackClass::SynFlood | AttackClass::HttpFlood | AttackClass::TlsFlood
        )
    }

    fn start_us(&self) -> u64 {
        (self.start_s * 1e6).round() as u64
    }

    fn end(&self) -> SimTime {
        SimTime::from_us(self.start_us() + (self.duration_s * 1e6).round() as u64)
    }
}

fn to_victim(
    now: SimTime,
    src: HostAddr,
    src_port: u16,
    kind: PacketKind,
    payload: Payload,
    size: u32,
) -> Packet {
    Packet { at: now, src, dst: VICTIM, src_port, dst_port: 80, kind, payload, size_bytes: size }
}

// ---- benign clients ----

#[derive(Clone, Copy, PartialEq, Debug)]
pub enum BenignOutcome {
    Success { response_time_us: u64 },
    Refused,
    TimedOut,
}

#[derive(Clone, Copy, Default, Debug)]
pub struct ClientStats {
    pub success: u64,
    pub refused: u64,
    pub timed_out: u64,
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum ClientState {
    Idle,
    AwaitSynAck { port: u16 },
    Dribbling { port: u16, sent: u8 },
    AwaitResponse { port: u16 },
}

pub struct BenignClient {
    pub id: u32,
    pub addr: HostAddr,
    think_mean_s: f64,
    target: Target,
    bad_network: bool,
    bad_gap_s: f64,
    rng: ChaCha8Rng,
    state: ClientState,
    next_port: u16,
    request_started: SimTime,
    patience: Option<EventHandle>,
    pub stats: ClientStats,
}

impl BenignClient {
    pub fn new(id: u32, cfg: &BenignConfig, seed: u64) -> Self {
        BenignClient {
            id,
            addr: benign_addr(id),
            think_mean_s: cfg.request_interval_s,
            target: cfg.target,
            bad_network: id < cfg.bad_network_clients,
            bad_gap_s: cfg.bad_gap_s,
            rng: actor_rng(seed, "benign", id as u64, 0),
            state: ClientState::Idle,
            next_port: 40_000,
            request_started: SimTime::ZERO,
            patience: None,
            stats: ClientStats::default(),
        }
    }

    pub fn start(&mut self, eng: &mut Engine<SimEvent>) {
        self.schedule_think(eng, SimTime::ZERO);
    }

    fn schedule_think(&mut self, eng: &mut Engine<SimEvent>, now: SimTime) {
        let exp = Exp::new(1.0 / self.think_mean_s).expect("positive think time");
        let delay: f64 = exp.sample(&mut self.rng);
        eng.schedule(
            now.plus_secs_f64(delay),
            SimEvent::BenignWake { client: self.id, wake: BenignWake::Think },
        )
        .expect("think scheduled forward");
    }

    fn arm_patience(&mut self, eng: &mut Engine<SimEvent>, now: SimTime) {
        self.disarm_patience(eng);
        let h = eng
            .schedule(
                now.plus_secs_f64(CLIENT_PATIENCE_S),
                SimEvent::BenignWake { client: self.id, wake: BenignWake::Patience },
            )
            .expect("patience scheduled forward");
        self.patience = Some(h);
    }

    fn disarm_patience(&mut self, eng: &mut Engine<SimEvent>) {
        if let Some(h) = self.patience.take() {
            eng.cancel(h);
        }
    }

    fn finish(
        &mut self,
        eng: &mut Engine<SimEvent>,
        now: SimTime,
        outcome: BenignOutcome,
    ) -> Option<BenignOutcome> {
        match outcome {
            BenignOutcome::Success { .. } => self.stats.success += 1,
            BenignOutcome::Refused => self.stats.refused += 1,
            BenignOutcome::TimedOut => self.stats.timed_out += 1,
        }
        self.disarm_patience(eng);
        self.state = ClientState::Idle;
        self.schedule_think(eng, now);
        Some(outcome)
    }

    pub fn on_wake(
        &mut self,
        eng: &mut Engine<SimEvent>,
        now: SimTime,
        wake: BenignWake,
        out: &mut Vec<Packet>,
    ) -> Option<BenignOutcome> {
        match wake {
            BenignWake::Think => {
                let port = self.next_port;
                self.next_port = self.next_port.wrapping_add(1);
                self.request_started = now;
                self.state = ClientState::AwaitSynAck { port };
                self.arm_patience(eng, now);
                out.push(to_victim(now, self.addr, port, PacketKind::Syn, Payload::None, SIZE_CTRL));
                None
            }
            BenignWake::Patience => {
                let port = match self.state {
                    ClientState::AwaitSynAck { port } | ClientState::AwaitResponse { port } => port,
                    // Stale wake; progress already cancelled the wait.
                    _ => return None,
                };
                self.patience = None;
                out.push(to_victim(now, self.addr, port, PacketKind::Rst, Payload::None, SIZE_CTRL));
                self.finish(eng, now, BenignOutcome::TimedOut)
            }
            BenignWake::Fragment { index } => {
                let ClientState::Dribbling { port, sent } = self.state else {
                    return None; // connection died mid-dribble
                };
                if index != sent {
                    return None;
                }
                let last = index + 1 == BAD_NETWORK_FRAGMENTS;
                out.push(to_victim(
                    now,
                    self.addr,
                    port,
                    PacketKind::Data,
                    Payload::HeaderFragment { last },
                    SIZE_FRAGMENT,
                ));
                if last {
                    self.state = ClientState::AwaitResponse { port };
                    self.arm_patience(eng, now);
                } else {
                    self.state = ClientState::Dribbling { port, sent: sent + 1 };
                    self.schedule_fragment(eng, now, index + 1);
                }
                None
            }
        }
    }

    fn schedule_fragment(&mut self, eng: &mut Engine<SimEvent>, now: SimTime, index: u8) {
        eng.schedule(
            now.plus_secs_f64(self.bad_gap_s),
            SimEvent::BenignWake { client: self.id, wake: BenignWake::Fragment { index } },
        )
        .expect("fragment scheduled forward");
    }

    pub fn on_packet(
        &mut self,
        eng: &mut Engine<SimEvent>,
        now: SimTime,
        pkt: &Packet,
        out: &mut Vec<Packet>,
    ) -> Option<BenignOutcome> {
        match (self.state, pkt.kind) {
            (ClientState::AwaitSynAck { port }, PacketKind::SynAck) if pkt.dst_port == port => {
                out.push(to_victim(now, self.addr, port, PacketKind::Ack, Payload::None, SIZE_CTRL));
                if self.bad_network {
                    self.disarm_patience(eng);
                    out.push(to_victim(
                        now,
                        self.addr,
                        port,
                        PacketKind::Data,
                        Payload::HeaderFragment { last: false },
                        SIZE_FRAGMENT,
                    ));
                    self.state = ClientState::Dribbling { port, sent: 1 };
                    self.schedule_fragment(eng, now, 1);
                } else {
                    out.push(to_victim(
                        now,
                        self.addr,
                        port,
                        PacketKind::Data,
                        Payload::HttpGet { target: self.target },
                        SIZE_GET,
                    ));
                    self.state = ClientState::AwaitResponse { port };
                    self.arm_patience(eng, now);
                }
                None
            }
            (
                ClientState::AwaitSynAck { port }
                | ClientState::Dribbling { port, .. }
                | ClientState::AwaitResponse { port },
                PacketKind::Rst,
            ) if pkt.dst_port == port => self.finish(eng, now, BenignOutcome::Refused),
            (ClientState::AwaitResponse { port }, PacketKind::Data)
                if pkt.dst_port == port && pkt.payload == Payload::HttpResponse =>
            {
                let rtt = now.since(self.request_started);
                out.push(to_victim(now, self.addr, port, PacketKind::Fin, Payload::None, SIZE_CTRL));
                self.finish(eng, now, BenignOutcome::Success { response_time_us: rtt })
            }
            _ => None,
        }
    }
}

// ---- attack generators ----

#[derive(Clone, Copy, Default, Debug)]
struct SlowConn {
    opened: bool,
    established: bool,
    dead: bool,
}

pub struct AttackActor {
    pub idx: u32,
    pub cfg: AttackConfig,
    src_rngs: Vec<ChaCha8Rng>,
    /// Flooding kinds: total packet/request slots for the whole window.
    slot_count: u64,
    /// http_flood: next fresh port per source.
    http_ports: Vec<u16>,
    /// tls_flood: which sources hold an established session.
    tls_established: Vec<bool>,
    /// slow kinds: per source, per connection.
    slow_conns: Vec<Vec<SlowConn>>,
}

impl AttackActor {
    pub fn new(idx: u32, cfg: AttackConfig, seed: u64) -> Self {
        let n = cfg.source_count as usize;
        let src_rngs = (0..n)
            .map(|s| actor_rng(seed, "attack", idx as u64, s as u64))
            .collect();
        let slot_count = match cfg.kind {
            AttackClass::SynFlood | AttackClass::HttpFlood => {
                (cfg.rate_pps * cfg.duration_s).round() as u64
            }
            // Renegotiations start one second in, once sessions exist.
            AttackClass::TlsFlood => (cfg.rate_pps * (cfg.duration_s - 1.0).max(0.0)).round() as u64,
            _ => 0,
        };
        let conns = if cfg.is_flooding() { 0 } else { cfg.connections_per_source as usize };
        AttackActor {
            idx,
            http_ports: vec![1000; n],
            tls_established: vec![false; n],
            slow_conns: vec![vec![SlowConn::default(); conns]; n],
            src_rngs,
            slot_count,
            cfg,
        }
    }

    pub fn source_addr(&self, source: u32) -> HostAddr {
        attacker_addr(self.idx, source)
    }

    /// Time of flooding slot `k`: fixed grid plus per-slot jitter, local to
    /// the slot so the total count is exact regardless of jitter.
    fn slot_time(&mut self, grid_start_us: u64, k: u64) -> SimTime {
        let n = self.cfg.source_count as u64;
        let rng = &mut self.src_rngs[(k % n) as usize];
        let spacing = 1e6 / self.cfg.rate_pps;
        let jitter = (rng.gen::<f64>() * 2.0 - 1.0) * self.cfg.jitter_fraction * spacing;
        let offset = (k as f64 * spacing + jitter).max(0.0);
        SimTime::from_us(grid_start_us + offset.round() as u64)
    }

    fn schedule_wake(&self, eng: &mut Engine<SimEvent>, at: SimTime, wake: AttackWake) {
        eng.schedule(at, SimEvent::AttackWake { attack: self.idx, wake })
            .expect("attack wake scheduled forward");
    }

    /// Schedule the opening moves. Call once at simulation start.
    pub fn start(&mut self, eng: &mut Engine<SimEvent>) {
        let start_us = self.cfg.start_us();
        match self.cfg.kind {
            AttackClass::SynFlood | AttackClass::HttpFlood => {
                if self.slot_count > 0 {
                    let at = self.slot_time(start_us, 0);
                    self.schedule_wake(eng, at, AttackWake::Fire { k: 0 });
                }
            }
            AttackClass::TlsFlood => {
                for s in 0..self.cfg.source_count {
                    let at = SimTime::from_us(start_us + s as u64 * 1_000);
                    self.schedule_wake(eng, at, AttackWake::Setup { source: s });
                }
                if self.slot_count > 0 {
                    let at = self.slot_time(start_us + 1_000_000, 0);
                    self.schedule_wake(eng, at, AttackWake::Fire { k: 0 });
                }
            }
            AttackClass::SlowHeader | AttackClass::SlowBody => {
                // Ramp: every source opens one connection per second, spread
                // across the second so the SYNs do not land as one burst.
                let n = self.cfg.source_count as u64;
                for conn in 0..self.cfg.connections_per_source {
                    for s in 0..self.cfg.source_count {
                        let at = SimTime::from_us(
                            start_us + conn as u64 * 1_000_000 + s as u64 * (1_000_000 / n.max(1)),
                        );
                        if at <= self.cfg.end() {
                            self.schedule_wake(eng, at, AttackWake::Open { source: s, conn });
                        }
                    }
                }
            }
        }
    }

    pub fn on_wake(
        &mut self,
        eng: &mut Engine<SimEvent>,
        now: SimTime,
        wake: AttackWake,
        out: &mut Vec<Packet>,
    ) {
        match (self.cfg.kind, wake) {
            (AttackClass::SynFlood, AttackWake::Fire { k }) => {
                let n = self.cfg.source_count;
                let source = (k % n as u64) as u32;
                let port = self.src_rngs[source as usize].gen_range(1024..=65535u16);
                out.push(to_victim(
                    now,
                    self.source_addr(source),
                    port,
                    PacketKind::Syn,
                    Payload::None,
                    SIZE_CTRL,
                ));
                self.chain_fire(eng, self.cfg.start_us(), k);
            }
            (AttackClass::HttpFlood, AttackWake::Fire { k }) => {
                let n = self.cfg.source_count;
                let source = (k % n as u64) as u32;
                let port = self.http_ports[source as usize];
                self.http_ports[source as usize] = port.wrapping_add(1);
                out.push(to_victim(
                    now,
                    self.source_addr(source),
                    port,
                    PacketKind::Syn,
                    Payload::None,
                    SIZE_CTRL,
                ));
                self.chain_fire(eng, self.cfg.start_us(), k);
            }
            (AttackClass::TlsFlood, AttackWake::Setup { source }) => {
                out.push(to_victim(
                    now,
                    self.source_addr(source),
                    30_000,
                    PacketKind::Syn,
                    Payload::None,
                    SIZE_CTRL,
                ));
            }
            (AttackClass::TlsFlood, AttackWake::Fire { k }) => {
                let n = self.cfg.source_count;
                let source = (k % n as u64) as u32;
                if self.tls_established[source as usize] {
                    out.push(to_victim(
                        now,
                        self.source_addr(source),
                        30_000,
                        PacketKind::Data,
                        Payload::TlsRenegotiate,
                        SIZE_TLS,
                    ));
                }
                self.chain_fire(eng, self.cfg.start_us() + 1_000_000, k);
            }
            (AttackClass::SlowHeader | AttackClass::SlowBody, AttackWake::Open { source, conn }) => {
                if now > self.cfg.end() {
                    return;
                }
                let slot = &mut self.slow_conns[source as usize][conn as usize];
                if slot.established || slot.dead {
                    return;
                }
                slot.opened = true;
                out.push(to_victim(
                    now,
                    self.source_addr(source),
                    20_000 + conn as u16,
                    PacketKind::Syn,
                    Payload::None,
                    SIZE_CTRL,
                ));
            }
            (AttackClass::SlowHeader | AttackClass::SlowBody, AttackWake::Drip { source, conn }) => {
                if now > self.cfg.end() {
                    return;
                }
                let slot = self.slow_conns[source as usize][conn as usize];
                if !slot.established || slot.dead {
                    return;
                }
                let payload = match self.cfg.kind {
                    AttackClass::SlowBody => Payload::PostFragment { last: false },
                    _ => Payload::HeaderFragment { last: false },
                };
                out.push(to_victim(
                    now,
                    self.source_addr(source),
                    20_000 + conn as u16,
                    PacketKind::Data,
                    payload,
                    SIZE_FRAGMENT,
                ));
                self.schedule_next_drip(eng, now, source, conn);
            }
            _ => {}
        }
    }

    fn chain_fire(&mut self, eng: &mut Engine<SimEvent>, grid_start_us: u64, k: u64) {
        let next = k + 1;
        if next < self.slot_count {
            let at = self.slot_time(grid_start_us, next);
            self.schedule_wake(eng, at, AttackWake::Fire { k: next });
        }
    }

    fn schedule_next_drip(&mut self, eng: &mut Engine<SimEvent>, now: SimTime, source: u32, conn: u32) {
        let rng = &mut self.src_rngs[source as usize];
        let jitter = (rng.gen::<f64>() * 2.0 - 1.0) * self.cfg.jitter_fraction;
        let gap = self.cfg.slow_interval_s * (1.0 + jitter);
        self.schedule_wake(eng, now.plus_secs_f64(gap), AttackWake::Drip { source, conn });
    }

    /// Replies from the victim, routed here by source address.
    pub fn on_packet(
        &mut self,
        eng: &mut Engine<SimEvent>,
        now: SimTime,
        pkt: &Packet,
        out: &mut Vec<Packet>,
    ) {
        match self.cfg.kind {
            // Spoofed sources: nobody is listening, nothing ever answers.
            AttackClass::SynFlood => {}
            AttackClass::HttpFlood => {
                if pkt.kind == PacketKind::SynAck {
                    let source = source_index(pkt.dst, self.idx);
                    let port = pkt.dst_port;
                    let addr = self.source_addr(source);
                    // Fire and forget: complete the handshake, lob the heavy
                    // request, and abandon the connection immediately.
                    out.push(to_victim(now, addr, port, PacketKind::Ack, Payload::None, SIZE_CTRL));
                    out.push(to_victim(
                        now,
                        addr,
                        port,
                        PacketKind::Data,
                        Payload::HttpGet { target: Target::Heavy },
                        SIZE_GET,
                    ));
                    out.push(to_victim(now, addr, port, PacketKind::Rst, Payload::None, SIZE_CTRL));
                }
            }
            AttackClass::TlsFlood => {
                let source = source_index(pkt.dst, self.idx);
                match pkt.kind {
                    PacketKind::SynAck => {
                        let addr = self.source_addr(source);
                        out.push(to_victim(now, addr, 30_000, PacketKind::Ack, Payload::None, SIZE_CTRL));
                        out.push(to_victim(
                            now,
                            addr,
                            30_000,
                            PacketKind::Data,
                            Payload::TlsHandshake,
                            SIZE_TLS,
                        ));
                        self.tls_established[source as usize] = true;
                    }
                    PacketKind::Rst => {
                        self.tls_established[source as usize] = false;
                    }
                    _ => {}
                }
            }
            AttackClass::SlowHeader | AttackClass::SlowBody => {
                let source = source_index(pkt.dst, self.idx);
                if pkt.dst_port < 20_000 {
                    return;
                }
                let conn = (pkt.dst_port - 20_000) as u32;
                if conn >= self.cfg.connections_per_source {
                    return;
                }
                let slot = &mut self.slow_conns[source as usize][conn as usize];
                match pkt.kind {
                    PacketKind::SynAck if !slot.established && !slot.dead => {
                        slot.established = true;
                        let addr = self.source_addr(source);
                        out.push(to_victim(now, addr, pkt.dst_port, PacketKind::Ack, Payload::None, SIZE_CTRL));
                        out.push(to_victim(
                            now,
                            addr,
                            pkt.dst_port,
                            PacketKind::Data,
                            Payload::HeaderFragment { last: false },
                            SIZE_FRAGMENT,
                        ));
                        if self.cfg.kind == AttackClass::SlowBody {
                            // Complete the header straight away; the slow part
                            // is the body that follows.
                            self.schedule_wake(
                                eng,
                                now.plus_us(1_000),
                                AttackWake::Drip { source, conn },
                            );
                        } else {
                            self.schedule_next_drip(eng, now, source, conn);
                        }
                    }
                    PacketKind::Rst => {
                        if slot.established {
                            // Server tore the connection down for good.
                            slot.dead = true;
                        } else if slot.opened && now <= self.cfg.end() {
                            // Refused at the door; keep knocking until a
                            // table slot frees up.
                            self.schedule_wake(
                                eng,
                                now.plus_secs_f64(1.0),
                                AttackWake::Open { source, conn },
                            );
                        }
                    }
                    _ => {}
                }
            }
        }
    }
}

fn source_index(addr: HostAddr, attack_idx: u32) -> u32 {
    debug_assert_eq!(attacker_addr(attack_idx, 0).0 & 0xFFFF_F000, addr.0 & 0xFFFF_F000);
    addr.0 & 0x0FFF
}
