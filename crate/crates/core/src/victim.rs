//! Victim web server: a bounded TCP connection table, request parsing states
//! with idle timeouts, and a single FIFO CPU serving queued request work.
//! Both resources are finite on purpose; the attacks in this simulator are
//! fights over one or the other.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::engine::{Engine, EventHandle, SimTime, US_PER_SEC};
use crate::events::{SimEvent, TimeoutKind};
use crate::topology::{
    ConnKey, Packet, PacketKind, Payload, Target, SIZE_CTRL, SIZE_RESPONSE, VICTIM,
};

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerConfig {
    pub table_capacity: usize,
    pub syn_timeout_s: f64,
    pub header_timeout_s: f64,
    pub body_timeout_s: f64,
    /// Abstract work units the CPU retires per second.
    pub cpu_capacity_ups: u32,
    pub heavy_request_cost: u32,
    pub light_request_cost: u32,
    pub tls_handshake_cost: u32,
    pub cpu_queue_limit: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            table_capacity: 256,
            syn_timeout_s: 30.0,
            header_timeout_s: 300.0,
            body_timeout_s: 300.0,
            cpu_capacity_ups: 100,
            heavy_request_cost: 10,
            light_request_cost: 1,
            tls_handshake_cost: 5,
            cpu_queue_limit: 1000,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Phase {
    SynReceived,
    Established,
    ReceivingHeader,
    ReceivingBody,
    Queued,
    Processing,
}

const GAP_HISTORY: usize = 16;

pub struct Record {
    pub phase: Phase,
    pub opened_at: SimTime,
    pub last_packet_at: SimTime,
    timer: Option<EventHandle>,
    /// Recent inter-packet gaps in microseconds, newest last.
    pub gaps: VecDeque<u64>,
}

struct Job {
    key: ConnKey,
    cost: u32,
    /// Request jobs answer and close; TLS work leaves the connection open.
    respond_and_close: bool,
}

/// What the server did with an arriving packet; used by tests and traces.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Reaction {
    Accepted,
    RejectedFull,
    Duplicate,
    Established,
    IgnoredAck,
    NeedMore,
    RequestQueued,
    TlsQueued,
    QueueRejected,
    ProtocolError,
    StrayData,
    Closed,
    IgnoredClose,
}

#[derive(Clone, Copy, Default, Debug, PartialEq, Eq)]
pub struct VictimCounters {
    pub syns_accepted: u64,
    pub rejected_full: u64,
    pub duplicate_syns: u64,
    pub ignored_acks: u64,
    pub stray_data: u64,
    pub protocol_errors: u64,
    /// Subset of protocol_errors that tore the connection down.
    protocol_errors_closing: u64,
    pub syn_timeouts: u64,
    pub header_timeouts: u64,
    pub body_timeouts: u64,
    pub responded: u64,
    pub closed_by_client: u64,
    pub queue_rejected: u64,
    /// CPU completions whose connection was already gone.
    pub orphan_completions: u64,
    pub requests_queued: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VictimSample {
    pub occupancy: usize,
    pub cpu_utilization: f64,
    pub rejected_in_window: u64,
    pub timeouts_in_window: u64,
}

pub struct VictimServer {
    pub cfg: ServerConfig,
    table: HashMap<ConnKey, Record>,
    cpu_queue: VecDeque<Job>,
    running: Option<Job>,
    busy_accum_us: u64,
    last_accrue: SimTime,
    window_rejected: u64,
    window_timeouts: u64,
    pub counters: VictimCounters,
    /// First instant the table hit capacity, if it ever did.
    pub first_full_at: Option<SimTime>,
}

impl VictimServer {
    pub fn new(cfg: ServerConfig) -> Self {
        VictimServer {
            cfg,
            table: HashMap::new(),
            cpu_queue: VecDeque::new(),
            running: None,
            busy_accum_us: 0,
            last_accrue: SimTime::ZERO,
            window_rejected: 0,
            window_timeouts: 0,
            counters: VictimCounters::default(),
            first_full_at: None,
        }
    }

    pub fn occupancy(&self) -> usize {
        self.table.len()
    }

    pub fn cpu_queue_len(&self) -> usize {
        self.cpu_queue.len() + usize::from(self.running.is_some())
    }

    pub fn record(&self, key: &ConnKey) -> Option<&Record> {
        self.table.get(key)
    }

    /// Live connections currently in `phase`.
    pub fn count_phase(&self, phase: Phase) -> usize {
        self.table.values().filter(|r| r.phase == phase).count()
    }

    fn reply(&self, to: ConnKey, now: SimTime, kind: PacketKind, payload: Payload, size: u32) -> Packet {
        Packet {
            at: now,
            src: VICTIM,
            dst: to.src,
            src_port: 80,
            dst_port: to.port,
            kind,
            payload,
            size_bytes: size,
        }
    }

    fn arm_timer(
        &mut self,
        eng: &mut Engine<SimEvent>,
        now: SimTime,
        key: ConnKey,
        kind: TimeoutKind,
        delay_s: f64,
    ) {
        let rec = self.table.get_mut(&key).expect("timer for live record");
        if let Some(h) = rec.timer.take() {
            eng.cancel(h);
        }
        let at = now.plus_secs_f64(delay_s);
        let h = eng
            .schedule(at, SimEvent::ConnTimeout { key, kind })
            .expect("timeout scheduled forward");
        rec.timer = Some(h);
    }

    fn drop_record(&mut self, eng: &mut Engine<SimEvent>, key: &ConnKey) -> Option<Record> {
        let rec = self.table.remove(key)?;
        if let Some(h) = rec.timer {
            eng.cancel(h);
        }
        Some(rec)
    }

    /// Entry point for every packet addressed to the server.
    pub fn on_packet(
        &mut self,
        eng: &mut Engine<SimEvent>,
        now: SimTime,
        pkt: &Packet,
        out: &mut Vec<Packet>,
    ) -> Reaction {
        let key = ConnKey { src: pkt.src, port: pkt.src_port };
        match pkt.kind {
            PacketKind::Syn => self.on_syn(eng, now, key, out),
            PacketKind::Ack => self.on_ack(eng, now, key),
            PacketKind::Data => self.on_data(eng, now, key, &pkt.payload, out),
            PacketKind::Fin | PacketKind::Rst => self.on_close(eng, key),
            PacketKind::SynAck => Reaction::StrayData, // never addressed to a server
        }
    }

    fn on_syn(
        &mut self,
        eng: &mut Engine<SimEvent>,
        now: SimTime,
        key: ConnKey,
        out: &mut Vec<Packet>,
    ) -> Reaction {
        if self.table.contains_key(&key) {
            self.counters.duplicate_syns += 1;
            return Reaction::Duplicate;
        }
        if self.table.len() >= self.cfg.table_capacity {
            self.counters.rejected_full += 1;
            self.window_rejected += 1;
            out.push(self.reply(key, now, PacketKind::Rst, Payload::None, SIZE_CTRL));
            return Reaction::RejectedFull;
        }
        self.counters.syns_accepted += 1;
        self.table.insert(
            key,
            Record {
                phase: Phase::SynReceived,
                opened_at: now,
                last_packet_at: now,
                timer: None,
                gaps: VecDeque::new(),
            },
        );
        if self.table.len() == self.cfg.table_capacity && self.first_full_at.is_none() {
            self.first_full_at = Some(now);
        }
        self.arm_timer(eng, now, key, TimeoutKind::Syn, self.cfg.syn_timeout_s);
        out.push(self.reply(key, now, PacketKind::SynAck, Payload::None, SIZE_CTRL));
        Reaction::Accepted
    }

    fn on_ack(&mut self, eng: &mut Engine<SimEvent>, now: SimTime, key: ConnKey) -> Reaction {
        match self.table.get_mut(&key) {
            Some(rec) if rec.phase == Phase::SynReceived => {
                rec.phase = Phase::Established;
                rec.last_packet_at = now;
                self.arm_timer(eng, now, key, TimeoutKind::Header, self.cfg.header_timeout_s);
                Reaction::Established
            }
            _ => {
                // Bare ACKs on established connections and ACKs for unknown
                // connections carry no state change.
                self.counters.ignored_acks += 1;
                Reaction::IgnoredAck
            }
        }
    }

    fn on_data(
        &mut self,
        eng: &mut Engine<SimEvent>,
        now: SimTime,
        key: ConnKey,
        payload: &Payload,
        out: &mut Vec<Packet>,
    ) -> Reaction {
        let Some(rec) = self.table.get_mut(&key) else {
            self.counters.stray_data += 1;
            out.push(self.reply(key, now, PacketKind::Rst, Payload::None, SIZE_CTRL));
            return Reaction::StrayData;
        };
        if rec.phase == Phase::SynReceived {
            // Data before the handshake completes.
            self.counters.protocol_errors += 1;
            self.counters.protocol_errors_closing += 1;
            self.drop_record(eng, &key);
            out.push(self.reply(key, now, PacketKind::Rst, Payload::None, SIZE_CTRL));
            return Reaction::ProtocolError;
        }
        if matches!(rec.phase, Phase::Queued | Phase::Processing) {
            // Request already complete; extra data is a protocol violation but
            // the queued work is kept.
            self.counters.protocol_errors += 1;
            return Reaction::ProtocolError;
        }
        let gap = now.since(rec.last_packet_at);
        if rec.gaps.len() == GAP_HISTORY {
            rec.gaps.pop_front();
        }
        rec.gaps.push_back(gap);
        rec.last_packet_at = now;

        match payload {
            Payload::HttpGet { target } => {
                let cost = match target {
                    Target::Heavy => self.cfg.heavy_request_cost,
                    Target::Light => self.cfg.light_request_cost,
                };
                self.enqueue_request(eng, now, key, cost, out)
            }
            Payload::HeaderFragment { last: false } => {
                rec.phase = Phase::ReceivingHeader;
                self.arm_timer(eng, now, key, TimeoutKind::Header, self.cfg.header_timeout_s);
                Reaction::NeedMore
            }
            Payload::HeaderFragment { last: true } => {
                let cost = self.cfg.light_request_cost;
                self.enqueue_request(eng, now, key, cost, out)
            }
            Payload::PostFragment { last: false } => {
                rec.phase = Phase::ReceivingBody;
                self.arm_timer(eng, now, key, TimeoutKind::Body, self.cfg.body_timeout_s);
                Reaction::NeedMore
            }
            Payload::PostFragment { last: true } => {
                let cost = self.cfg.light_request_cost;
                self.enqueue_request(eng, now, key, cost, out)
            }
            Payload::TlsHandshake | Payload::TlsRenegotiate => {
                // Handshake work burns CPU but keeps the connection open.
                let cost = self.cfg.tls_handshake_cost;
                if self.cpu_queue.len() >= self.cfg.cpu_queue_limit {
                    self.counters.queue_rejected += 1;
                    self.drop_record(eng, &key);
                    out.push(self.reply(key, now, PacketKind::Rst, Payload::None, SIZE_CTRL));
                    return Reaction::QueueRejected;
                }
                self.arm_timer(eng, now, key, TimeoutKind::Header, self.cfg.header_timeout_s);
                self.cpu_queue.push_back(Job { key, cost, respond_and_close: false });
                self.start_cpu_if_idle(eng, now);
                Reaction::TlsQueued
            }
            Payload::None | Payload::HttpResponse => {
                self.counters.protocol_errors += 1;
                Reaction::ProtocolError
            }
        }
    }

    fn enqueue_request(
        &mut self,
        eng: &mut Engine<SimEvent>,
        now: SimTime,
        key: ConnKey,
        cost: u32,
        out: &mut Vec<Packet>,
    ) -> Reaction {
        if self.cpu_queue.len() >= self.cfg.cpu_queue_limit {
            self.counters.queue_rejected += 1;
            self.drop_record(eng, &key);
            out.push(self.reply(key, now, PacketKind::Rst, Payload::None, SIZE_CTRL));
            return Reaction::QueueRejected;
        }
        let rec = self.table.get_mut(&key).expect("record checked by caller");
        rec.phase = Phase::Queued;
        // The response path owns the connection from here; no idle timer.
        if let Some(h) = rec.timer.take() {
            eng.cancel(h);
        }
        self.counters.requests_queued += 1;
        self.cpu_queue.push_back(Job { key, cost, respond_and_close: true });
        self.start_cpu_if_idle(eng, now);
        Reaction::RequestQueued
    }

    fn accrue(&mut self, now: SimTime) {
        if self.running.is_some() {
            self.busy_accum_us += now.since(self.last_accrue);
        }
        self.last_accrue = now;
    }

    fn start_cpu_if_idle(&mut self, eng: &mut Engine<SimEvent>, now: SimTime) {
        if self.running.is_some() {
            return;
        }
        let Some(job) = self.cpu_queue.pop_front() else { return };
        self.accrue(now);
        let service_us = job.cost as u64 * US_PER_SEC / self.cfg.cpu_capacity_ups as u64;
        if let Some(rec) = self.table.get_mut(&job.key) {
            if job.respond_and_close {
                rec.phase = Phase::Processing;
            }
        }
        self.running = Some(job);
        eng.schedule(now.plus_us(service_us), SimEvent::CpuDone)
            .expect("cpu completion scheduled forward");
    }

    /// CPU finished its current job.
    pub fn on_cpu_done(&mut self, eng: &mut Engine<SimEvent>, now: SimTime, out: &mut Vec<Packet>) {
        self.accrue(now);
        let job = self.running.take().expect("completion implies a running job");
        if job.respond_and_close {
            if self.drop_record(eng, &job.key).is_some() {
                self.counters.responded += 1;
                out.push(self.reply(
                    job.key,
                    now,
                    PacketKind::Data,
                    Payload::HttpResponse,
                    SIZE_RESPONSE,
                ));
            } else {
                // Client walked away; the work was already spent.
                self.counters.orphan_completions += 1;
            }
        }
        self.start_cpu_if_idle(eng, now);
    }

    pub fn on_timeout(
        &mut self,
        eng: &mut Engine<SimEvent>,
        now: SimTime,
        key: ConnKey,
        kind: TimeoutKind,
        out: &mut Vec<Packet>,
    ) {
        if self.drop_record(eng, &key).is_none() {
            return; // raced with a close; timer should have been cancelled
        }
        self.window_timeouts += 1;
        match kind {
            TimeoutKind::Syn => self.counters.syn_timeouts += 1, // silent
            TimeoutKind::Header => {
                self.counters.header_timeouts += 1;
                out.push(self.reply(key, now, PacketKind::Rst, Payload::None, SIZE_CTRL));
            }
            TimeoutKind::Body => {
                self.counters.body_timeouts += 1;
                out.push(self.reply(key, now, PacketKind::Rst, Payload::None, SIZE_CTRL));
            }
        }
    }

    fn on_close(&mut self, eng: &mut Engine<SimEvent>, key: ConnKey) -> Reaction {
        if self.drop_record(eng, &key).is_some() {
            self.counters.closed_by_client += 1;
            Reaction::Closed
        } else {
            Reaction::IgnoredClose
        }
    }

    /// Per-second snapshot; resets the windowed accumulators.
    pub fn metrics_sample(&mut self, now: SimTime) -> VictimSample {
        self.accrue(now);
        let sample = VictimSample {
            occupancy: self.table.len(),
            cpu_utilization: (self.busy_accum_us as f64 / US_PER_SEC as f64).min(1.0),
            rejected_in_window: self.window_rejected,
            timeouts_in_window: self.window_timeouts,
        };
        self.busy_accum_us = 0;
        self.window_rejected = 0;
        self.window_timeouts = 0;
        sample
    }

    /// Accepted connections must be accounted for exactly once.
    pub fn conservation_holds(&self) -> bool {
        let c = &self.counters;
        let closed = c.responded
            + c.closed_by_client
            + c.protocol_errors_closing
            + c.queue_rejected
            + c.syn_timeouts
            + c.header_timeouts
            + c.body_timeouts;
        c.syns_accepted == closed + self.table.len() as u64
    }
}
