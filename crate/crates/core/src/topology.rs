//! Network model: host addressing, packets, and the switch that joins the
//! client pools, the victim server and the monitoring tap. Links are FIFO:
//! a packet occupies its destination link for its serialization time, so
//! back-to-back packets queue behind each other.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::engine::SimTime;

/// Opaque 32-bit host address, printed dotted-quad for logs.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HostAddr(pub u32);

impl fmt::Display for HostAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.0;
        write!(f, "{}.{}.{}.{}", v >> 24, (v >> 16) & 0xff, (v >> 8) & 0xff, v & 0xff)
    }
}

pub const VICTIM: HostAddr = HostAddr(0x0A00_0001); // 10.0.0.1
pub const SENTINEL: HostAddr = HostAddr(0x0A00_0002); // 10.0.0.2
pub const PROBER: HostAddr = HostAddr(0x0A00_0003); // 10.0.0.3

const BENIGN_BASE: u32 = 0x0A01_0000; // 10.1.0.0/16
const ATTACK_BASE: u32 = 0x0A02_0000; // 10.2.0.0/16
const ATTACK_STRIDE: u32 = 0x1000; // up to 4096 sources per attack

pub fn benign_addr(i: u32) -> HostAddr {
    HostAddr(BENIGN_BASE + i)
}

pub fn attacker_addr(attack: u32, source: u32) -> HostAddr {
    debug_assert!(source < ATTACK_STRIDE);
    HostAddr(ATTACK_BASE + attack * ATTACK_STRIDE + source)
}

/// Inverse of `attacker_addr`. Caller must know the address is an attacker.
pub fn attacker_index(addr: HostAddr) -> (u32, u32) {
    debug_assert_eq!(role_of(addr), Role::Attacker);
    let off = addr.0 - ATTACK_BASE;
    (off / ATTACK_STRIDE, off % ATTACK_STRIDE)
}

pub fn benign_index(addr: HostAddr) -> u32 {
    debug_assert_eq!(role_of(addr), Role::Benign);
    addr.0 - BENIGN_BASE
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Role {
    Victim,
    Sentinel,
    Prober,
    Benign,
    Attacker,
    Unknown,
}

pub fn role_of(addr: HostAddr) -> Role {
    match addr {
        VICTIM => Role::Victim,
        SENTINEL => Role::Sentinel,
        PROBER => Role::Prober,
        HostAddr(v) if (BENIGN_BASE..ATTACK_BASE).contains(&v) => Role::Benign,
        HostAddr(v) if (ATTACK_BASE..ATTACK_BASE + 0x1_0000).contains(&v) => Role::Attacker,
        _ => Role::Unknown,
    }
}

/// Connection identity as the server sees it: client address + client port.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct ConnKey {
    pub src: HostAddr,
    pub port: u16,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PacketKind {
    Syn,
    SynAck,
    Ack,
    Fin,
    Rst,
    Data,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Light,
    Heavy,
}

/// Application payload riding in a DATA packet.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Payload {
    None,
    HttpGet { target: Target },
    /// Partial request header; `last` finalizes the request.
    HeaderFragment { last: bool },
    /// Partial request body; `last` finalizes the request.
    PostFragment { last: bool },
    TlsHandshake,
    TlsRenegotiate,
    HttpResponse,
}

pub const SIZE_CTRL: u32 = 40; // SYN/SYN-ACK/ACK/FIN/RST
pub const SIZE_GET: u32 = 200;
pub const SIZE_FRAGMENT: u32 = 60;
pub const SIZE_TLS: u32 = 200;
pub const SIZE_RESPONSE: u32 = 500;

#[derive(Clone, PartialEq, Debug)]
pub struct Packet {
    /// Time the sender handed the packet to the switch.
    pub at: SimTime,
    pub src: HostAddr,
    pub dst: HostAddr,
    pub src_port: u16,
    pub dst_port: u16,
    pub kind: PacketKind,
    pub payload: Payload,
    pub size_bytes: u32,
}

impl Packet {
    pub fn key(&self) -> ConnKey {
        // The client side of a connection is whichever end is not the victim.
        if self.dst == VICTIM {
            ConnKey { src: self.src, port: self.src_port }
        } else {
            ConnKey { src: self.dst, port: self.dst_port }
        }
    }
}

/// Uniform point-to-point link parameters.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkParams {
    pub bandwidth_bps: u64,
    pub propagation_us: u64,
}

impl Default for LinkParams {
    fn default() -> Self {
        LinkParams { bandwidth_bps: 13_000_000_000, propagation_us: 50 }
    }
}

impl LinkParams {
    /// Whole-microsecond serialization time, rounded up; never zero.
    pub fn serialization_us(&self, size_bytes: u32) -> u64 {
        let bits = size_bytes as u64 * 8 * 1_000_000;
        bits.div_ceil(self.bandwidth_bps).max(1)
    }
}

/// A queued transmission start later than this far behind `now` overflows the
/// link buffer and the packet is dropped.
pub const MAX_LINK_BACKLOG_US: u64 = 200_000;

/// Match-on-source drop rule.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct FlowRule {
    pub match_src: HostAddr,
    pub installed_at: SimTime,
    pub hard_timeout_us: Option<u64>,
}

impl FlowRule {
    pub fn active(&self, now: SimTime) -> bool {
        match self.hard_timeout_us {
            Some(t) => now.since(self.installed_at) < t,
            None => true,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum InstallOutcome {
    Installed,
    /// Rule for this source already present; install is idempotent.
    AlreadyPresent,
    /// Rule table at capacity; nothing installed.
    TableFull,
}

#[derive(Clone, PartialEq, Debug)]
pub enum ForwardOutcome {
    Delivered {
        deliver_at: SimTime,
        /// Copy the packet to the monitoring tap at the same instant.
        mirror: bool,
    },
    DroppedByRule,
    DroppedOverflow,
    /// Destination is not a registered host.
    RoutingError,
}

/// Hosts the switch will route to. Pool sizes come from the scenario.
#[derive(Clone, Debug, Default)]
pub struct HostSet {
    pub benign_count: u32,
    pub attack_source_counts: Vec<u32>,
}

impl HostSet {
    fn contains(&self, addr: HostAddr) -> bool {
        match role_of(addr) {
            Role::Victim | Role::Sentinel | Role::Prober => true,
            Role::Benign => addr.0 - BENIGN_BASE < self.benign_count,
            Role::Attacker => {
                let off = addr.0 - ATTACK_BASE;
                let (a, s) = (off / ATTACK_STRIDE, off % ATTACK_STRIDE);
                (a as usize) < self.attack_source_counts.len()
                    && s < self.attack_source_counts[a as usize]
            }
            Role::Unknown => false,
        }
    }
}

#[derive(Clone, Copy, Default, Debug, PartialEq, Eq)]
pub struct SwitchCounters {
    pub delivered: u64,
    pub dropped_by_rule: u64,
    pub dropped_overflow: u64,
    pub routing_errors: u64,
    /// Packets dropped at delivery because their source was blocked while
    /// they were in flight.
    pub late_drops: u64,
}

/// Output switch: flow table, per-destination FIFO links, and the mirror tap.
/// Traffic between the client pools and the victim is copied to the tap,
/// except when a rule drops it first.
pub struct Switch {
    params: LinkParams,
    hosts: HostSet,
    rules: BTreeMap<HostAddr, FlowRule>,
    rule_limit: Option<usize>,
    /// Instant each destination link becomes free.
    link_busy: HashMap<HostAddr, SimTime>,
    pub counters: SwitchCounters,
    delivered_in_window: u64,
}

impl Switch {
    pub fn new(params: LinkParams, hosts: HostSet) -> Self {
        Switch {
            params,
            hosts,
            rules: BTreeMap::new(),
            rule_limit: None,
            link_busy: HashMap::new(),
            counters: SwitchCounters::default(),
            delivered_in_window: 0,
        }
    }

    pub fn with_rule_limit(mut self, limit: usize) -> Self {
        self.rule_limit = Some(limit);
        self
    }

    pub fn params(&self) -> LinkParams {
        self.params
    }

    pub fn blocks(&self, now: SimTime, src: HostAddr) -> bool {
        self.rules.get(&src).is_some_and(|r| r.active(now))
    }

    /// Route one packet. On delivery the destination link is held for the
    /// packet's serialization time; `deliver_at` adds propagation on top.
    pub fn forward(&mut self, now: SimTime, pkt: &Packet) -> ForwardOutcome {
        if self.blocks(now, pkt.src) {
            self.counters.dropped_by_rule += 1;
            return ForwardOutcome::DroppedByRule;
        }
        if !self.hosts.contains(pkt.dst) {
            self.counters.routing_errors += 1;
            return ForwardOutcome::RoutingError;
        }
        let busy = self.link_busy.get(&pkt.dst).copied().unwrap_or(SimTime::ZERO);
        let start = busy.max(now);
        if start.since(now) > MAX_LINK_BACKLOG_US {
            self.counters.dropped_overflow += 1;
            return ForwardOutcome::DroppedOverflow;
        }
        let ser = self.params.serialization_us(pkt.size_bytes);
        let done = start.plus_us(ser);
        self.link_busy.insert(pkt.dst, done);
        self.counters.delivered += 1;
        self.delivered_in_window += 1;
        let mirror = matches!(role_of(pkt.src), Role::Benign | Role::Attacker)
            || matches!(role_of(pkt.dst), Role::Benign | Role::Attacker);
        ForwardOutcome::Delivered { deliver_at: done.plus_us(self.params.propagation_us), mirror }
    }

    /// Install a drop rule for one source. Idempotent: re-installing refreshes
    /// `installed_at` (and with it any hard timeout).
    pub fn install_rule(&mut self, rule: FlowRule) -> InstallOutcome {
        let refresh = self.rules.contains_key(&rule.match_src);
        if !refresh {
            if let Some(limit) = self.rule_limit {
                if self.rules.len() >= limit {
                    return InstallOutcome::TableFull;
                }
            }
        }
        self.rules.insert(rule.match_src, rule);
        if refresh {
            InstallOutcome::AlreadyPresent
        } else {
            InstallOutcome::Installed
        }
    }

    /// Expired rules are purged here; the result is sorted by match address.
    pub fn active_rules(&mut self, now: SimTime) -> Vec<FlowRule> {
        self.rules.retain(|_, r| r.active(now));
        self.rules.values().copied().collect()
    }

    /// Packets delivered since the previous call; backs the per-second rate
    /// column in run reports.
    pub fn take_delivered_window(&mut self) -> u64 {
        std::mem::take(&mut self.delivered_in_window)
    }
}
