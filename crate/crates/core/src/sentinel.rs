//! Passive analysis side of the protection system. Watches the mirror tap,
//! keeps sliding-window per-source statistics, probes the victim for RTT
//! health, and turns "service is degraded" plus "traffic looks like pattern X"
//! into lists of addresses for the controller to block.
//!
//! Probing, classification and identification all re-run every second so new
//! attackers keep being found while earlier ones are already blocked.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::engine::{Engine, EventHandle, SimTime};
use crate::events::SimEvent;
use crate::topology::{
    role_of, ConnKey, HostAddr, Packet, PacketKind, Payload, Role, Target, PROBER, SIZE_CTRL,
    SIZE_GET, VICTIM,
};

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SentinelConfig {
    /// Sliding statistics window in seconds.
    pub window_s: f64,
    pub probe_interval_s: f64,
    pub probe_timeout_s: f64,
    /// RTT above factor x baseline counts as an exceedance.
    pub rtt_threshold_factor: f64,
    /// Consecutive exceedances needed to latch the alarm.
    pub alarm_consecutive: u32,
    /// Successful probes averaged into the RTT baseline.
    pub baseline_probes: u32,
    /// Window ticks averaged into the packet-rate baseline.
    pub baseline_windows: u32,
    /// Attack-free windows needed to unlatch a latched alarm.
    pub clear_windows: u32,
    pub syn_ratio_threshold: f64,
    /// Packet rate above factor x baseline counts as a traffic spike.
    pub spike_factor: f64,
    /// Operator knowledge of the victim: connection table size.
    pub table_capacity_estimate: u32,
    /// Fraction of the table held by slow connections before classifying.
    pub slow_occupancy_fraction: f64,
    /// Operator knowledge of the victim: heavy requests/s it can sustain.
    pub sustainable_heavy_rps: f64,
    pub heavy_rate_factor: f64,
    pub reneg_rate_per_s: f64,
    /// Mean fragment gap at or above this marks a connection as slow.
    pub slow_gap_s: f64,
    /// Incomplete connection idle at least this long is also slow.
    pub slow_idle_s: f64,
    pub gap_cv_max: f64,
    /// Gaps shorter than this are bursts, not dripping; excluded from stats.
    pub burst_filter_s: f64,
    pub min_gap_samples: usize,
    pub min_half_open_per_source: u64,
    pub heavy_rps_per_source: f64,
    pub renegs_per_source: u64,
    pub incomplete_per_source: usize,
    /// Half-open tap records idle beyond this are assumed reaped server-side.
    pub half_open_prune_s: f64,
}

impl Default for SentinelConfig {
    fn default() -> Self {
        SentinelConfig {
            window_s: 10.0,
            probe_interval_s: 1.0,
            probe_timeout_s: 4.0,
            rtt_threshold_factor: 5.0,
            alarm_consecutive: 5,
            baseline_probes: 10,
            baseline_windows: 10,
            clear_windows: 3,
            syn_ratio_threshold: 0.5,
            spike_factor: 3.0,
            table_capacity_estimate: 256,
            slow_occupancy_fraction: 0.5,
            sustainable_heavy_rps: 10.0,
            heavy_rate_factor: 3.0,
            reneg_rate_per_s: 10.0,
            slow_gap_s: 5.0,
            slow_idle_s: 5.0,
            gap_cv_max: 0.5,
            burst_filter_s: 0.1,
            min_gap_samples: 3,
            min_half_open_per_source: 3,
            heavy_rps_per_source: 2.0,
            renegs_per_source: 5,
            incomplete_per_source: 3,
            half_open_prune_s: 35.0,
        }
    }
}

fn secs_to_us(s: f64) -> u64 {
    (s * 1e6).round() as u64
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackClass {
    SynFlood,
    HttpFlood,
    TlsFlood,
    SlowHeader,
    SlowBody,
}

impl std::fmt::Display for AttackClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AttackClass::SynFlood => "syn_flood",
            AttackClass::HttpFlood => "http_flood",
            AttackClass::TlsFlood => "tls_flood",
            AttackClass::SlowHeader => "slow_header",
            AttackClass::SlowBody => "slow_body",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ProbeOutcome {
    Responded { rtt_us: u64 },
    Refused,
    TimedOut,
}

impl ProbeOutcome {
    pub fn status_str(&self) -> &'static str {
        match self {
            ProbeOutcome::Responded { .. } => "ok",
            ProbeOutcome::Refused => "refused",
            ProbeOutcome::TimedOut => "timeout",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ProbeLogEntry {
    pub sent_at: SimTime,
    pub recorded_at: SimTime,
    pub outcome: ProbeOutcome,
}

/// Per-source counters over the sliding window, plus connection-derived
/// state. `half_open_live` counts windowed SYNs whose connection never
/// completed a handshake at any point in the run.
#[derive(Clone, PartialEq, Debug, Default)]
pub struct SourceStats {
    pub syn_count: u64,
    pub ack_count: u64,
    pub data_count: u64,
    pub bytes: u64,
    pub half_open_live: u64,
    pub requests_heavy: u64,
    pub renegotiations: u64,
    pub incomplete_header: usize,
    pub incomplete_body: usize,
    pub gap_mean_s: Option<f64>,
    pub gap_cv: Option<f64>,
    /// True if this source ever finished a handshake, across the whole run.
    pub ever_established: bool,
}

impl SourceStats {
    pub fn incomplete_connections(&self) -> usize {
        self.incomplete_header + self.incomplete_body
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct WindowAggregate {
    pub total_packets: u64,
    pub total_syns: u64,
    pub packet_rate_pps: f64,
    pub baseline_packet_rate_pps: Option<f64>,
    pub slow_header_conns: usize,
    pub slow_body_conns: usize,
    pub heavy_request_rate: f64,
    pub renegotiation_rate: f64,
}

#[derive(Clone, PartialEq, Debug)]
pub struct DetectionEvent {
    pub at: SimTime,
    pub class: AttackClass,
    /// Sorted, deduplicated, never previously reported.
    pub attackers: Vec<HostAddr>,
    pub evidence: Vec<(HostAddr, SourceStats)>,
}

#[derive(Clone, PartialEq, Debug, Default)]
pub struct WindowReport {
    pub detections: Vec<DetectionEvent>,
    pub all_clear: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum TapKind {
    Syn,
    Ack,
    Fin,
    Rst,
    HeavyGet,
    LightGet,
    HeaderFrag { last: bool },
    PostFrag { last: bool },
    TlsHandshake,
    TlsReneg,
    OtherData,
}

fn tap_kind(pkt: &Packet) -> TapKind {
    match pkt.kind {
        PacketKind::Syn => TapKind::Syn,
        PacketKind::Ack => TapKind::Ack,
        PacketKind::Fin => TapKind::Fin,
        PacketKind::Rst => TapKind::Rst,
        PacketKind::SynAck => TapKind::OtherData,
        PacketKind::Data => match pkt.payload {
            Payload::HttpGet { target: Target::Heavy } => TapKind::HeavyGet,
            Payload::HttpGet { target: Target::Light } => TapKind::LightGet,
            Payload::HeaderFragment { last } => TapKind::HeaderFrag { last },
            Payload::PostFragment { last } => TapKind::PostFrag { last },
            Payload::TlsHandshake => TapKind::TlsHandshake,
            Payload::TlsRenegotiate => TapKind::TlsReneg,
            _ => TapKind::OtherData,
        },
    }
}

#[derive(Clone, Copy, Debug)]
struct TapEvent {
    at: SimTime,
    key: ConnKey,
    kind: TapKind,
    bytes: u32,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum TapPhase {
    SynSent,
    Established,
    Header,
    Body,
    /// Request finalized; waiting on the server to respond and close.
    Done,
}

#[derive(Clone, Debug)]
struct TapConn {
    phase: TapPhase,
    last_packet_at: SimTime,
    last_fragment_at: Option<SimTime>,
    fragment_count: u32,
    /// True once any above-burst-filter gap completed on this connection.
    ever_gap: bool,
    /// (completion time, gap in us), burst-filtered, newest last.
    gaps: VecDeque<(SimTime, u64)>,
}

const CONN_GAP_HISTORY: usize = 32;

impl TapConn {
    fn new(now: SimTime) -> Self {
        TapConn {
            phase: TapPhase::SynSent,
            last_packet_at: now,
            last_fragment_at: None,
            fragment_count: 0,
            ever_gap: false,
            gaps: VecDeque::new(),
        }
    }

    fn note_fragment(&mut self, now: SimTime, burst_filter_us: u64) {
        if let Some(prev) = self.last_fragment_at {
            let gap = now.since(prev);
            if gap >= burst_filter_us {
                if self.gaps.len() == CONN_GAP_HISTORY {
                    self.gaps.pop_front();
                }
                self.gaps.push_back((now, gap));
                self.ever_gap = true;
            }
        }
        self.last_fragment_at = Some(now);
        self.fragment_count += 1;
    }

    fn lifetime_gap_mean_us(&self) -> Option<f64> {
        if self.gaps.is_empty() {
            return None;
        }
        let sum: u64 = self.gaps.iter().map(|(_, g)| g).sum();
        Some(sum as f64 / self.gaps.len() as f64)
    }
}

struct InFlightProbe {
    sent_at: SimTime,
    established: bool,
    timeout: EventHandle,
}

pub struct Sentinel {
    pub cfg: SentinelConfig,
    // tap state
    events: VecDeque<TapEvent>,
    conns: BTreeMap<ConnKey, TapConn>,
    ever_acked: HashSet<ConnKey>,
    ever_established_src: HashSet<HostAddr>,
    inbound_total: u64,
    baseline_pps: Option<f64>,
    window_ticks: u32,
    // probe state
    in_flight: HashMap<u16, InFlightProbe>,
    next_probe_seq: u16,
    warmup_rtts: Vec<u64>,
    baseline_rtt_us: Option<f64>,
    consecutive_exceed: u32,
    alarm: bool,
    alarm_since: Option<SimTime>,
    premature_exceedances: u64,
    probe_log: Vec<ProbeLogEntry>,
    // reporting state
    reported: BTreeSet<HostAddr>,
    clear_streak: u32,
}

impl Sentinel {
    pub fn new(cfg: SentinelConfig) -> Self {
        Sentinel {
            cfg,
            events: VecDeque::new(),
            conns: BTreeMap::new(),
            ever_acked: HashSet::new(),
            ever_established_src: HashSet::new(),
            inbound_total: 0,
            baseline_pps: None,
            window_ticks: 0,
            in_flight: HashMap::new(),
            next_probe_seq: 0,
            warmup_rtts: Vec::new(),
            baseline_rtt_us: None,
            consecutive_exceed: 0,
            alarm: false,
            alarm_since: None,
            premature_exceedances: 0,
            probe_log: Vec::new(),
            reported: BTreeSet::new(),
            clear_streak: 0,
        }
    }

    pub fn is_alarmed(&self) -> bool {
        self.alarm
    }

    pub fn alarm_since(&self) -> Option<SimTime> {
        self.alarm_since
    }

    pub fn baseline_rtt_us(&self) -> Option<f64> {
        self.baseline_rtt_us
    }

    pub fn baseline_pps(&self) -> Option<f64> {
        self.baseline_pps
    }

    pub fn probe_log(&self) -> &[ProbeLogEntry] {
        &self.probe_log
    }

    pub fn reported(&self) -> &BTreeSet<HostAddr> {
        &self.reported
    }

    fn window_us(&self) -> u64 {
        secs_to_us(self.cfg.window_s)
    }

    // ---- mirror tap ----

    /// Feed one mirrored packet. Counters track the client-to-victim
    /// direction only; replies are used purely to retire connection state
    /// (a response or reset means the server is done with that connection).
    pub fn observe(&mut self, now: SimTime, pkt: &Packet) {
        if pkt.dst == VICTIM && matches!(role_of(pkt.src), Role::Benign | Role::Attacker) {
            self.observe_inbound(now, pkt);
        } else if pkt.src == VICTIM && matches!(role_of(pkt.dst), Role::Benign | Role::Attacker) {
            let key = ConnKey { src: pkt.dst, port: pkt.dst_port };
            match pkt.kind {
                PacketKind::Rst | PacketKind::Fin => {
                    self.conns.remove(&key);
                }
                PacketKind::Data if pkt.payload == Payload::HttpResponse => {
                    self.conns.remove(&key);
                }
                _ => {}
            }
        }
    }

    fn observe_inbound(&mut self, now: SimTime, pkt: &Packet) {
        let key = pkt.key();
        let kind = tap_kind(pkt);
        self.inbound_total += 1;
        self.events.push_back(TapEvent { at: now, key, kind, bytes: pkt.size_bytes });

        let burst_us = secs_to_us(self.cfg.burst_filter_s);
        match kind {
            TapKind::Syn => {
                self.conns.entry(key).or_insert_with(|| TapConn::new(now)).last_packet_at = now;
            }
            TapKind::Ack => {
                self.ever_acked.insert(key);
                if let Some(conn) = self.conns.get_mut(&key) {
                    conn.last_packet_at = now;
                    if conn.phase == TapPhase::SynSent {
                        conn.phase = TapPhase::Established;
                        self.ever_established_src.insert(key.src);
                    }
                }
            }
            TapKind::Fin | TapKind::Rst => {
                self.conns.remove(&key);
            }
            TapKind::HeaderFrag { last } => {
                if let Some(conn) = self.conns.get_mut(&key) {
                    conn.last_packet_at = now;
                    if matches!(conn.phase, TapPhase::Established | TapPhase::Header) {
                        conn.note_fragment(now, burst_us);
                        conn.phase = if last { TapPhase::Done } else { TapPhase::Header };
                    }
                }
            }
            TapKind::PostFrag { last } => {
                if let Some(conn) = self.conns.get_mut(&key) {
                    conn.last_packet_at = now;
                    if matches!(
                        conn.phase,
                        TapPhase::Established | TapPhase::Header | TapPhase::Body
                    ) {
                        conn.note_fragment(now, burst_us);
                        conn.phase = if last { TapPhase::Done } else { TapPhase::Body };
                    }
                }
            }
            TapKind::HeavyGet | TapKind::LightGet => {
                if let Some(conn) = self.conns.get_mut(&key) {
                    conn.last_packet_at = now;
                    if conn.phase == TapPhase::Established {
                        conn.phase = TapPhase::Done;
                    }
                }
            }
            TapKind::TlsHandshake | TapKind::TlsReneg | TapKind::OtherData => {
                if let Some(conn) = self.conns.get_mut(&key) {
                    conn.last_packet_at = now;
                }
            }
        }
    }

    fn evict(&mut self, now: SimTime) {
        let window = self.window_us();
        while self
            .events
            .front()
            .is_some_and(|e| e.at.us() + window <= now.us())
        {
            self.events.pop_front();
        }
        // Half-open records the server has long since reaped would otherwise
        // accumulate forever under a spoofed flood.
        let prune_us = secs_to_us(self.cfg.half_open_prune_s);
        self.conns.retain(|_, c| {
            c.phase != TapPhase::SynSent || now.since(c.last_packet_at) <= prune_us
        });
    }

    pub fn source_stats(&self, now: SimTime) -> BTreeMap<HostAddr, SourceStats> {
        let w_start = now.us().saturating_sub(self.window_us());
        let burst_us = secs_to_us(self.cfg.burst_filter_s);
        let mut map: BTreeMap<HostAddr, SourceStats> = BTreeMap::new();

        for ev in &self.events {
            if ev.at.us() <= w_start {
                continue;
            }
            let s = map.entry(ev.key.src).or_default();
            s.bytes += ev.bytes as u64;
            match ev.kind {
                TapKind::Syn => {
                    s.syn_count += 1;
                    if !self.ever_acked.contains(&ev.key) {
                        s.half_open_live += 1;
                    }
                }
                TapKind::Ack => s.ack_count += 1,
                TapKind::Fin | TapKind::Rst => {}
                TapKind::HeavyGet => {
                    s.data_count += 1;
                    s.requests_heavy += 1;
                }
                TapKind::TlsReneg => {
                    s.data_count += 1;
                    s.renegotiations += 1;
                }
                TapKind::LightGet
                | TapKind::HeaderFrag { .. }
                | TapKind::PostFrag { .. }
                | TapKind::TlsHandshake
                | TapKind::OtherData => s.data_count += 1,
            }
        }

        let mut gap_samples: BTreeMap<HostAddr, Vec<f64>> = BTreeMap::new();
        for (key, conn) in &self.conns {
            let s = map.entry(key.src).or_default();
            match conn.phase {
                TapPhase::Header => s.incomplete_header += 1,
                TapPhase::Body => s.incomplete_body += 1,
                _ => {}
            }
            let samples = gap_samples.entry(key.src).or_default();
            for (done_at, gap_us) in &conn.gaps {
                if done_at.us() > w_start {
                    samples.push(*gap_us as f64 / 1e6);
                }
            }
            // Dripping connections show no completed gap until their second
            // fragment, up to 30 s away; the still-open gap is evidence too.
            if !conn.ever_gap {
                if let Some(last_frag) = conn.last_fragment_at {
                    let open = now.since(last_frag);
                    if open >= burst_us {
                        samples.push(open as f64 / 1e6);
                    }
                }
            }
        }

        for (src, s) in &mut map {
            s.ever_established = self.ever_established_src.contains(src);
            if let Some(samples) = gap_samples.get(src) {
                if samples.len() >= self.cfg.min_gap_samples {
                    let n = samples.len() as f64;
                    let mean = samples.iter().sum::<f64>() / n;
                    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                    s.gap_mean_s = Some(mean);
                    s.gap_cv = if mean > 0.0 { Some(var.sqrt() / mean) } else { None };
                }
            }
        }
        map
    }

    pub fn aggregate(&self, now: SimTime) -> WindowAggregate {
        let w_start = now.us().saturating_sub(self.window_us());
        let mut total_packets = 0u64;
        let mut total_syns = 0u64;
        let mut heavy = 0u64;
        let mut renegs = 0u64;
        for ev in &self.events {
            if ev.at.us() <= w_start {
                continue;
            }
            total_packets += 1;
            match ev.kind {
                TapKind::Syn => total_syns += 1,
                TapKind::HeavyGet => heavy += 1,
                TapKind::TlsReneg => renegs += 1,
                _ => {}
            }
        }

        let gap_slow_us = secs_to_us(self.cfg.slow_gap_s);
        let idle_slow_us = secs_to_us(self.cfg.slow_idle_s);
        let mut slow_header = 0usize;
        let mut slow_body = 0usize;
        for conn in self.conns.values() {
            let bucket = match conn.phase {
                TapPhase::Header => &mut slow_header,
                TapPhase::Body => &mut slow_body,
                _ => continue,
            };
            let gap_slow = conn
                .lifetime_gap_mean_us()
                .is_some_and(|m| m >= gap_slow_us as f64);
            let idle_slow = now.since(conn.last_packet_at) >= idle_slow_us;
            if gap_slow || idle_slow {
                *bucket += 1;
            }
        }

        let w_secs = self.cfg.window_s;
        WindowAggregate {
            total_packets,
            total_syns,
            packet_rate_pps: total_packets as f64 / w_secs,
            baseline_packet_rate_pps: self.baseline_pps,
            slow_header_conns: slow_header,
            slow_body_conns: slow_body,
            heavy_request_rate: heavy as f64 / w_secs,
            renegotiation_rate: renegs as f64 / w_secs,
        }
    }

    // ---- probing ----

    /// Launch the periodic health probe: full handshake plus a light request
    /// from the prober address. Several probes can be in flight at once when
    /// the server is slow, distinguished by source port.
    pub fn probe_tick(&mut self, eng: &mut Engine<SimEvent>, now: SimTime) -> Vec<Packet> {
        let port = 50_000u16.wrapping_add(self.next_probe_seq);
        self.next_probe_seq = self.next_probe_seq.wrapping_add(1);
        let timeout_at = now.plus_us(secs_to_us(self.cfg.probe_timeout_s));
        let timeout = eng
            .schedule(timeout_at, SimEvent::ProbeTimeout { port })
            .expect("probe timeout scheduled forward");
        self.in_flight.insert(port, InFlightProbe { sent_at: now, established: false, timeout });
        vec![probe_packet(now, port, PacketKind::Syn, Payload::None, SIZE_CTRL)]
    }

    pub fn on_prober_packet(
        &mut self,
        eng: &mut Engine<SimEvent>,
        now: SimTime,
        pkt: &Packet,
    ) -> Vec<Packet> {
        let port = pkt.dst_port;
        match pkt.kind {
            PacketKind::SynAck => {
                if let Some(probe) = self.in_flight.get_mut(&port) {
                    if !probe.established {
                        probe.established = true;
                        return vec![
                            probe_packet(now, port, PacketKind::Ack, Payload::None, SIZE_CTRL),
                            probe_packet(
                                now,
                                port,
                                PacketKind::Data,
                                Payload::HttpGet { target: Target::Light },
                                SIZE_GET,
                            ),
                        ];
                    }
                }
                Vec::new()
            }
            PacketKind::Rst => {
                if let Some(probe) = self.in_flight.remove(&port) {
                    eng.cancel(probe.timeout);
                    self.record_outcome(probe.sent_at, now, ProbeOutcome::Refused);
                }
                Vec::new()
            }
            PacketKind::Data if pkt.payload == Payload::HttpResponse => {
                if let Some(probe) = self.in_flight.remove(&port) {
                    eng.cancel(probe.timeout);
                    let rtt_us = now.since(probe.sent_at);
                    self.record_outcome(probe.sent_at, now, ProbeOutcome::Responded { rtt_us });
                    return vec![probe_packet(now, port, PacketKind::Fin, Payload::None, SIZE_CTRL)];
                }
                Vec::new()
            }
            _ => Vec::new(),
        }
    }

    /// The probe gave up waiting. Abort the connection so a slow server does
    /// not accumulate one parked probe connection per second.
    pub fn on_probe_timeout(&mut self, now: SimTime, port: u16) -> Vec<Packet> {
        if let Some(probe) = self.in_flight.remove(&port) {
            self.record_outcome(probe.sent_at, now, ProbeOutcome::TimedOut);
            return vec![probe_packet(now, port, PacketKind::Rst, Payload::None, SIZE_CTRL)];
        }
        Vec::new()
    }

    /// Fold one probe outcome into baseline/alarm state. Public so the alarm
    /// logic is testable without a running simulation.
    pub fn record_outcome(&mut self, sent_at: SimTime, now: SimTime, outcome: ProbeOutcome) {
        self.probe_log.push(ProbeLogEntry { sent_at, recorded_at: now, outcome });

        let Some(baseline) = self.baseline_rtt_us else {
            match outcome {
                ProbeOutcome::Responded { rtt_us } => {
                    self.warmup_rtts.push(rtt_us);
                    if self.warmup_rtts.len() == self.cfg.baseline_probes as usize {
                        let sum: u64 = self.warmup_rtts.iter().sum();
                        self.baseline_rtt_us = Some(sum as f64 / self.warmup_rtts.len() as f64);
                    }
                }
                // Failures before a baseline exists cannot be judged against
                // one; count them so a dead-from-the-start service is visible.
                ProbeOutcome::Refused | ProbeOutcome::TimedOut => {
                    self.premature_exceedances += 1;
                }
            }
            return;
        };

        let exceeded = match outcome {
            ProbeOutcome::Responded { rtt_us } => {
                rtt_us as f64 > self.cfg.rtt_threshold_factor * baseline
            }
            ProbeOutcome::Refused | ProbeOutcome::TimedOut => true,
        };
        if exceeded {
            self.consecutive_exceed += 1;
            if self.consecutive_exceed >= self.cfg.alarm_consecutive && !self.alarm {
                self.alarm = true;
                self.alarm_since = Some(now);
            }
        } else {
            self.consecutive_exceed = 0;
        }
    }

    // ---- periodic evaluation ----

    /// Once per second: age out the window, refresh the traffic baseline,
    /// and when the alarm is latched run classification and identification.
    pub fn window_tick(&mut self, now: SimTime) -> WindowReport {
        self.window_ticks += 1;
        self.evict(now);

        if self.baseline_pps.is_none() && self.window_ticks >= self.cfg.baseline_windows {
            let elapsed = now.as_secs_f64();
            if elapsed > 0.0 {
                self.baseline_pps = Some(self.inbound_total as f64 / elapsed);
            }
        }

        if !self.alarm {
            return WindowReport::default();
        }

        let agg = self.aggregate(now);
        let classes = classify(&self.cfg, &agg);
        if classes.is_empty() {
            self.clear_streak += 1;
            if self.clear_streak >= self.cfg.clear_windows {
                self.alarm = false;
                self.alarm_since = None;
                self.consecutive_exceed = 0;
                self.clear_streak = 0;
                return WindowReport { detections: Vec::new(), all_clear: true };
            }
            return WindowReport::default();
        }
        self.clear_streak = 0;

        let stats = self.source_stats(now);
        let mut detections = Vec::new();
        for class in classes {
            let attackers = identify(&self.cfg, class, &stats, &self.reported);
            if attackers.is_empty() {
                continue;
            }
            let evidence = attackers
                .iter()
                .map(|a| (*a, stats.get(a).cloned().unwrap_or_default()))
                .collect();
            self.reported.extend(attackers.iter().copied());
            detections.push(DetectionEvent { at: now, class, attackers, evidence });
        }
        WindowReport { detections, all_clear: false }
    }
}

fn probe_packet(now: SimTime, port: u16, kind: PacketKind, payload: Payload, size: u32) -> Packet {
    Packet {
        at: now,
        src: PROBER,
        dst: VICTIM,
        src_port: port,
        dst_port: 80,
        kind,
        payload,
        size_bytes: size,
    }
}

/// Which attack patterns does the current window match? Pure so thresholds
/// are testable in isolation; multiple classes may hold at once.
pub fn classify(cfg: &SentinelConfig, agg: &WindowAggregate) -> Vec<AttackClass> {
    let mut out = Vec::new();

    let syn_ratio = if agg.total_packets > 0 {
        agg.total_syns as f64 / agg.total_packets as f64
    } else {
        0.0
    };
    let spike = agg
        .baseline_packet_rate_pps
        .is_some_and(|b| agg.packet_rate_pps > cfg.spike_factor * b);
    if syn_ratio > cfg.syn_ratio_threshold && spike {
        out.push(AttackClass::SynFlood);
    }

    if agg.heavy_request_rate > cfg.heavy_rate_factor * cfg.sustainable_heavy_rps {
        out.push(AttackClass::HttpFlood);
    }

    if agg.renegotiation_rate > cfg.reneg_rate_per_s {
        out.push(AttackClass::TlsFlood);
    }

    let slow_floor =
        (cfg.slow_occupancy_fraction * cfg.table_capacity_estimate as f64).ceil() as usize;
    if agg.slow_header_conns >= slow_floor {
        out.push(AttackClass::SlowHeader);
    }
    if agg.slow_body_conns >= slow_floor {
        out.push(AttackClass::SlowBody);
    }

    out
}

/// Sources matching the per-class attacker shape, excluding the prober and
/// anything already reported. Benign addresses get no special treatment; the
/// predicates themselves must not match them.
pub fn identify(
    cfg: &SentinelConfig,
    class: AttackClass,
    stats: &BTreeMap<HostAddr, SourceStats>,
    exclude: &BTreeSet<HostAddr>,
) -> Vec<HostAddr> {
    let slow_gaps_ok = |s: &SourceStats| {
        s.gap_mean_s.is_some_and(|m| m >= cfg.slow_gap_s)
            && s.gap_cv.is_some_and(|cv| cv <= cfg.gap_cv_max)
    };
    stats
        .iter()
        .filter(|(addr, _)| **addr != PROBER && !exclude.contains(addr))
        .filter(|(_, s)| match class {
            // A source that completed a handshake at some point is a real
            // client; full-table refusals make even benign retries look
            // half-open, so spoofed sources are the never-established ones.
            AttackClass::SynFlood => {
                s.half_open_live >= cfg.min_half_open_per_source && !s.ever_established
            }
            AttackClass::HttpFlood => {
                s.requests_heavy as f64 / cfg.window_s > cfg.heavy_rps_per_source
            }
            AttackClass::TlsFlood => s.renegotiations >= cfg.renegs_per_source,
            AttackClass::SlowHeader => {
                s.incomplete_header >= cfg.incomplete_per_source && slow_gaps_ok(s)
            }
            AttackClass::SlowBody => {
                s.incomplete_body >= cfg.incomplete_per_source && slow_gaps_ok(s)
            }
        })
        .map(|(addr, _)| *addr)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{attacker_addr, benign_addr, SIZE_FRAGMENT};

    fn inbound(src: HostAddr, port: u16, at: SimTime, kind: PacketKind, payload: Payload) -> Packet {
        let size = match kind {
            PacketKind::Data => SIZE_FRAGMENT,
            _ => SIZE_CTRL,
        };
        Packet { at, src, dst: VICTIM, src_port: port, dst_port: 80, kind, payload, size_bytes: size }
    }

    fn at(s: f64) -> SimTime {
        SimTime::from_secs_f64(s)
    }

    #[test]
    fn syn_without_ack_counts_half_open() {
        let mut sen = Sentinel::new(SentinelConfig::default());
        let a = attacker_addr(0, 0);
        sen.observe(at(1.0), &inbound(a, 7, at(1.0), PacketKind::Syn, Payload::None));
        let stats = sen.source_stats(at(2.0));
        let s = &stats[&a];
        assert_eq!(s.syn_count, 1);
        assert_eq!(s.half_open_live, 1);
        assert!(!s.ever_established);
    }

    #[test]
    fn ack_clears_half_open_and_marks_established() {
        let mut sen = Sentinel::new(SentinelConfig::default());
        let b = benign_addr(0);
        sen.observe(at(1.0), &inbound(b, 7, at(1.0), PacketKind::Syn, Payload::None));
        sen.observe(at(1.1), &inbound(b, 7, at(1.1), PacketKind::Ack, Payload::None));
        let stats = sen.source_stats(at(2.0));
        let s = &stats[&b];
        assert_eq!(s.syn_count, 1);
        assert_eq!(s.ack_count, 1);
        assert_eq!(s.half_open_live, 0);
        assert!(s.ever_established);
    }

    #[test]
    fn window_eviction_forgets_old_traffic() {
        let mut sen = Sentinel::new(SentinelConfig::default());
        let a = attacker_addr(0, 0);
        sen.observe(at(1.0), &inbound(a, 7, at(1.0), PacketKind::Syn, Payload::None));
        sen.observe(at(9.0), &inbound(a, 8, at(9.0), PacketKind::Syn, Payload::None));
        let stats = sen.source_stats(at(12.0));
        // Only the SYN at t=9 is inside (2, 12].
        assert_eq!(stats[&a].syn_count, 1);
        sen.window_tick(at(20.0));
        let stats = sen.source_stats(at(20.0));
        assert!(stats.get(&a).map_or(0, |s| s.syn_count) == 0);
    }

    #[test]
    fn drip_gaps_match_interval_with_tiny_spread() {
        let mut sen = Sentinel::new(SentinelConfig::default());
        let a = attacker_addr(0, 3);
        // Three dripping connections whose most recent gaps (29.5, 30.5,
        // 30.0 s) all complete inside the final window.
        let drips: [(u16, [f64; 4]); 3] = [
            (1, [0.2, 30.2, 60.2, 89.7]),
            (2, [0.3, 30.3, 60.3, 90.8]),
            (3, [0.4, 30.4, 60.4, 90.4]),
        ];
        for (port, times) in drips {
            sen.observe(at(times[0]), &inbound(a, port, at(times[0]), PacketKind::Syn, Payload::None));
            sen.observe(at(times[0]), &inbound(a, port, at(times[0]), PacketKind::Ack, Payload::None));
            for t in times {
                sen.observe(
                    at(t),
                    &inbound(a, port, at(t), PacketKind::Data, Payload::HeaderFragment { last: false }),
                );
            }
        }
        let stats = sen.source_stats(at(91.0));
        let s = &stats[&a];
        assert_eq!(s.incomplete_header, 3);
        let mean = s.gap_mean_s.unwrap();
        let cv = s.gap_cv.unwrap();
        assert!((mean - 30.0).abs() < 1e-9, "mean {mean}");
        assert!(cv <= 0.04, "cv {cv}");
    }

    #[test]
    fn open_gap_stands_in_before_first_drip_completes() {
        let mut sen = Sentinel::new(SentinelConfig::default());
        let a = attacker_addr(0, 5);
        // Three connections, one fragment each at t = 0, 1, 2.
        for (port, t) in [(1u16, 0.0), (2, 1.0), (3, 2.0)] {
            sen.observe(at(t), &inbound(a, port, at(t), PacketKind::Syn, Payload::None));
            sen.observe(at(t), &inbound(a, port, at(t), PacketKind::Ack, Payload::None));
            sen.observe(
                at(t),
                &inbound(a, port, at(t), PacketKind::Data, Payload::HeaderFragment { last: false }),
            );
        }
        let stats = sen.source_stats(at(8.0));
        let s = &stats[&a];
        assert_eq!(s.incomplete_header, 3);
        // Open gaps 8, 7, 6 seconds.
        assert!((s.gap_mean_s.unwrap() - 7.0).abs() < 1e-9);
        assert!(s.gap_cv.unwrap() <= 0.5);
        let ident = identify(&sen.cfg, AttackClass::SlowHeader, &stats, &BTreeSet::new());
        assert_eq!(ident, vec![a]);
    }

    fn warmed_up(baseline_rtt_us: u64) -> Sentinel {
        let mut sen = Sentinel::new(SentinelConfig::default());
        for i in 0..10u64 {
            sen.record_outcome(
                at(i as f64),
                at(i as f64 + 0.01),
                ProbeOutcome::Responded { rtt_us: baseline_rtt_us },
            );
        }
        assert_eq!(sen.baseline_rtt_us(), Some(baseline_rtt_us as f64));
        sen
    }

    #[test]
    fn alarm_needs_the_full_consecutive_run() {
        let mut sen = warmed_up(10_000);
        for i in 0..4u64 {
            sen.record_outcome(at(10.0 + i as f64), at(14.0 + i as f64), ProbeOutcome::TimedOut);
        }
        assert!(!sen.is_alarmed());
        sen.record_outcome(at(14.0), at(18.0), ProbeOutcome::TimedOut);
        assert!(sen.is_alarmed());
        assert_eq!(sen.alarm_since(), Some(at(18.0)));
    }

    #[test]
    fn one_healthy_probe_resets_the_run() {
        let mut sen = warmed_up(10_000);
        for i in 0..4u64 {
            sen.record_outcome(at(10.0 + i as f64), at(14.0 + i as f64), ProbeOutcome::Refused);
        }
        sen.record_outcome(at(14.0), at(14.01), ProbeOutcome::Responded { rtt_us: 10_000 });
        for i in 0..4u64 {
            sen.record_outcome(at(15.0 + i as f64), at(19.0 + i as f64), ProbeOutcome::Refused);
        }
        assert!(!sen.is_alarmed());
    }

    #[test]
    fn rtt_threshold_is_factor_times_baseline() {
        // Baseline 105 ms, factor 5: threshold 525 ms.
        let mut sen = warmed_up(105_000);
        sen.record_outcome(at(10.0), at(10.52), ProbeOutcome::Responded { rtt_us: 520_000 });
        assert_eq!(sen.consecutive_exceed, 0);
        sen.record_outcome(at(11.0), at(11.53), ProbeOutcome::Responded { rtt_us: 530_000 });
        assert_eq!(sen.consecutive_exceed, 1);
    }

    #[test]
    fn failures_before_warmup_do_not_latch() {
        let mut sen = Sentinel::new(SentinelConfig::default());
        for i in 0..8u64 {
            sen.record_outcome(at(i as f64), at(4.0 + i as f64), ProbeOutcome::TimedOut);
        }
        assert!(!sen.is_alarmed());
        assert_eq!(sen.premature_exceedances, 8);
        assert_eq!(sen.baseline_rtt_us(), None);
    }

    fn benign_aggregate() -> WindowAggregate {
        WindowAggregate {
            total_packets: 360,
            total_syns: 90,
            packet_rate_pps: 36.0,
            baseline_packet_rate_pps: Some(36.0),
            slow_header_conns: 1,
            slow_body_conns: 0,
            heavy_request_rate: 0.0,
            renegotiation_rate: 0.0,
        }
    }

    #[test]
    fn classify_benign_window_is_empty() {
        let cfg = SentinelConfig::default();
        assert!(classify(&cfg, &benign_aggregate()).is_empty());
    }

    #[test]
    fn classify_syn_flood_needs_ratio_and_spike() {
        let cfg = SentinelConfig::default();
        let mut agg = benign_aggregate();
        agg.total_packets = 3200;
        agg.total_syns = 2880;
        agg.packet_rate_pps = 320.0;
        assert_eq!(classify(&cfg, &agg), vec![AttackClass::SynFlood]);
        // Same ratio without the spike: benign SYN retries against a full
        // table must not classify.
        agg.total_packets = 100;
        agg.total_syns = 90;
        agg.packet_rate_pps = 10.0;
        assert!(classify(&cfg, &agg).is_empty());
    }

    #[test]
    fn classify_http_and_tls_rates() {
        let cfg = SentinelConfig::default();
        let mut agg = benign_aggregate();
        agg.heavy_request_rate = 36.0;
        assert_eq!(classify(&cfg, &agg), vec![AttackClass::HttpFlood]);
        agg.heavy_request_rate = 0.0;
        agg.renegotiation_rate = 12.0;
        assert_eq!(classify(&cfg, &agg), vec![AttackClass::TlsFlood]);
    }

    #[test]
    fn classify_slow_floor_is_half_the_table() {
        let cfg = SentinelConfig::default();
        let mut agg = benign_aggregate();
        agg.slow_header_conns = 127;
        assert!(classify(&cfg, &agg).is_empty());
        agg.slow_header_conns = 128;
        assert_eq!(classify(&cfg, &agg), vec![AttackClass::SlowHeader]);
        agg.slow_header_conns = 0;
        agg.slow_body_conns = 128;
        assert_eq!(classify(&cfg, &agg), vec![AttackClass::SlowBody]);
    }

    #[test]
    fn identify_syn_flood_skips_sources_that_ever_established() {
        let cfg = SentinelConfig::default();
        let spoofed = attacker_addr(0, 1);
        let benign = benign_addr(2);
        let mut stats = BTreeMap::new();
        stats.insert(
            spoofed,
            SourceStats { syn_count: 6, half_open_live: 6, ..Default::default() },
        );
        // A benign client hammered by refusals: many half-open SYNs in the
        // window, but it completed handshakes earlier in the run.
        stats.insert(
            benign,
            SourceStats {
                syn_count: 5,
                half_open_live: 5,
                ever_established: true,
                ..Default::default()
            },
        );
        let ident = identify(&cfg, AttackClass::SynFlood, &stats, &BTreeSet::new());
        assert_eq!(ident, vec![spoofed]);
    }

    #[test]
    fn identify_excludes_prober_and_already_reported() {
        let cfg = SentinelConfig::default();
        let a = attacker_addr(0, 1);
        let b = attacker_addr(0, 2);
        let mut stats = BTreeMap::new();
        for addr in [a, b, PROBER] {
            stats.insert(addr, SourceStats { half_open_live: 9, ..Default::default() });
        }
        let mut exclude = BTreeSet::new();
        exclude.insert(a);
        let ident = identify(&cfg, AttackClass::SynFlood, &stats, &exclude);
        assert_eq!(ident, vec![b]);
    }

    #[test]
    fn identify_bad_network_client_is_not_a_slow_attacker() {
        let cfg = SentinelConfig::default();
        let b = benign_addr(0);
        let mut stats = BTreeMap::new();
        // One fragmented connection with regular 10 s gaps: slow-looking
        // gaps, but a single connection fails the concurrency floor.
        stats.insert(
            b,
            SourceStats {
                incomplete_header: 1,
                gap_mean_s: Some(10.0),
                gap_cv: Some(0.01),
                ever_established: true,
                ..Default::default()
            },
        );
        assert!(identify(&cfg, AttackClass::SlowHeader, &stats, &BTreeSet::new()).is_empty());
    }

    #[test]
    fn identify_per_source_request_rate_floors() {
        let cfg = SentinelConfig::default();
        let hot = attacker_addr(1, 0);
        let warm = attacker_addr(1, 1);
        let mut stats = BTreeMap::new();
        stats.insert(hot, SourceStats { requests_heavy: 25, ..Default::default() });
        stats.insert(warm, SourceStats { requests_heavy: 15, ..Default::default() });
        let ident = identify(&cfg, AttackClass::HttpFlood, &stats, &BTreeSet::new());
        assert_eq!(ident, vec![hot]);

        let mut stats = BTreeMap::new();
        stats.insert(hot, SourceStats { renegotiations: 5, ..Default::default() });
        stats.insert(warm, SourceStats { renegotiations: 4, ..Default::default() });
        let ident = identify(&cfg, AttackClass::TlsFlood, &stats, &BTreeSet::new());
        assert_eq!(ident, vec![hot]);
    }

    /// End-to-end sentinel cycle without a simulation: baseline, flood,
    /// detection with delta suppression, then all-clear after the window
    /// drains.
    #[test]
    fn detection_is_delta_only_and_clears_after_quiet_windows() {
        let mut sen = Sentinel::new(SentinelConfig::default());
        // 10 s of benign background: 5 request cycles per second.
        let mut port = 0u16;
        for sec in 0..10u64 {
            for k in 0..5u64 {
                let b = benign_addr((k % 3) as u32);
                let t = at(sec as f64 + 0.1 * k as f64);
                port = port.wrapping_add(1);
                sen.observe(t, &inbound(b, port, t, PacketKind::Syn, Payload::None));
                sen.observe(t, &inbound(b, port, t, PacketKind::Ack, Payload::None));
                sen.observe(
                    t,
                    &inbound(b, port, t, PacketKind::Data, Payload::HttpGet { target: Target::Light }),
                );
                sen.observe(t, &inbound(b, port, t, PacketKind::Fin, Payload::None));
            }
            assert!(sen.window_tick(at(sec as f64 + 0.5)).detections.is_empty());
        }
        assert!(sen.baseline_pps().is_some());
        let baseline = sen.baseline_pps().unwrap();
        assert!((baseline - 20.0).abs() < 2.0, "baseline {baseline}");

        // Warm the probe baseline, then latch via refusals.
        for i in 0..10u64 {
            sen.record_outcome(
                at(i as f64),
                at(i as f64 + 0.01),
                ProbeOutcome::Responded { rtt_us: 10_000 },
            );
        }
        for i in 0..5u64 {
            sen.record_outcome(at(10.0 + i as f64), at(10.0 + i as f64), ProbeOutcome::Refused);
        }
        assert!(sen.is_alarmed());

        // 3 s of spoofed SYN flood at 200/s over 10 sources.
        for sec in 10..13u64 {
            for k in 0..200u64 {
                let a = attacker_addr(0, (k % 10) as u32);
                let t = at(sec as f64 + k as f64 / 200.0);
                sen.observe(
                    t,
                    &inbound(a, (1000 + sec * 200 + k) as u16, t, PacketKind::Syn, Payload::None),
                );
            }
        }

        let report = sen.window_tick(at(13.0));
        assert_eq!(report.detections.len(), 1);
        let det = &report.detections[0];
        assert_eq!(det.class, AttackClass::SynFlood);
        assert_eq!(det.attackers.len(), 10);
        assert_eq!(det.evidence.len(), 10);
        assert!(det.attackers.windows(2).all(|w| w[0] < w[1]), "sorted");

        // Same window next tick: everyone already reported.
        let report = sen.window_tick(at(14.0));
        assert!(report.detections.is_empty());
        assert!(!report.all_clear);

        // Flood stops; once the flood ages out of the window, three quiet
        // ticks in a row unlatch the alarm.
        let mut cleared_at = None;
        for sec in 15..30u64 {
            let report = sen.window_tick(at(sec as f64));
            assert!(report.detections.is_empty());
            if report.all_clear {
                cleared_at = Some(sec);
                break;
            }
        }
        let cleared_at = cleared_at.expect("alarm should unlatch");
        assert!((21..=25).contains(&cleared_at), "cleared at {cleared_at}");
        assert!(!sen.is_alarmed());
    }
}
