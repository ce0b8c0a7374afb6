//! Shared event vocabulary. The variant identifies the handling component;
//! the fields are the payload.

use crate::sentinel::DetectionEvent;
use crate::topology::{ConnKey, Packet};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TimeoutKind {
    Syn,
    Header,
    Body,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BenignWake {
    /// Think time elapsed; start the next request attempt.
    Think,
    /// Waited too long on the server; abandon the attempt.
    Patience,
    /// Next header fragment of a dribbled request is due.
    Fragment { index: u8 },
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AttackWake {
    /// Paced emission slot `k` for flood-style generators.
    Fire { k: u64 },
    /// One-time connection setup for a persistent (TLS) source.
    Setup { source: u32 },
    /// Open (or retry) connection `conn` of `source` for slow attacks.
    Open { source: u32, conn: u32 },
    /// Next slow fragment on an open connection is due.
    Drip { source: u32, conn: u32 },
}

#[derive(Clone, Debug)]
pub enum SimEvent {
    /// Packet reaches its destination host.
    Deliver(Packet),
    /// Mirrored copy reaches the monitoring tap.
    Tap(Packet),
    /// Server-side connection timer fired.
    ConnTimeout { key: ConnKey, kind: TimeoutKind },
    /// Server CPU finished the job it was running.
    CpuDone,
    /// Per-second metrics sample.
    Sample,
    /// Send the next RTT probe.
    ProbeTick,
    /// Outstanding probe gave up waiting.
    ProbeTimeout { port: u16 },
    /// Per-second detection evaluation.
    WindowTick,
    BenignWake { client: u32, wake: BenignWake },
    AttackWake { attack: u32, wake: AttackWake },
    /// Detection news crossing the sentinel-to-controller channel.
    DeliverDetection(DetectionEvent),
}
