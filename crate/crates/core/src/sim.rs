//! Wires every component into one simulation: actors hand packets to the
//! switch, the switch schedules deliveries and tap copies, the victim serves,
//! the sentinel watches, the controller blocks. One `World` per run.

use thiserror::Error;

use crate::controller::Controller;
use crate::engine::{Engine, EngineError, Handler, RunAborted, SimTime, US_PER_SEC};
use crate::events::SimEvent;
use crate::report::{LogEvent, RunReport, SampleRow, Summary};
use crate::scenario::ScenarioConfig;
use crate::sentinel::{ProbeOutcome, Sentinel};
use crate::topology::{
    attacker_index, benign_index, role_of, ForwardOutcome, HostAddr, HostSet, Packet, Role, Switch,
};
use crate::traffic::{AttackActor, BenignClient, BenignOutcome};
use crate::victim::VictimServer;

/// What the protection side of the system is allowed to do in this run.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    /// No sentinel at all: no probes, no tap processing, no detections.
    Off,
    /// Sentinel runs and detections are logged, but nothing is blocked.
    Observe,
    /// Detections feed the controller, which installs switch rules.
    Enforce,
}

impl Mode {
    pub fn of(cfg: &ScenarioConfig) -> Mode {
        if cfg.protection_enabled {
            Mode::Enforce
        } else if cfg.sentinel_observe_only {
            Mode::Observe
        } else {
            Mode::Off
        }
    }
}

#[derive(Error, Debug)]
pub enum WorldError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("no route from {src} to {dst}")]
    Routing { src: HostAddr, dst: HostAddr },
}

#[derive(Error, Debug)]
pub enum RunError {
    #[error(transparent)]
    Aborted(#[from] RunAborted<WorldError>),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

const DETECTION_LATENCY_US: u64 = 1_000;

pub struct World {
    switch: Switch,
    victim: VictimServer,
    sentinel: Option<Sentinel>,
    controller: Option<Controller>,
    clients: Vec<BenignClient>,
    attacks: Vec<AttackActor>,
    end: SimTime,
    probe_interval_us: u64,

    window_successes: u64,
    window_attempts: u64,
    last_success_rate: f64,
    probe_cursor: usize,
    pub report: RunReport,
}

impl World {
    pub fn new(cfg: &ScenarioConfig) -> World {
        let mode = Mode::of(cfg);
        let hosts = HostSet {
            benign_count: cfg.benign.client_count,
            attack_source_counts: cfg.attacks.iter().map(|a| a.source_count).collect(),
        };
        let controller = (mode == Mode::Enforce).then(|| {
            let mut c = Controller::new();
            c.rule_timeout_us = cfg.rule_timeout_s.map(|s| (s * 1e6).round() as u64);
            c
        });
        let report = RunReport { scenario_name: cfg.name.clone(), ..RunReport::default() };
        World {
            switch: Switch::new(cfg.link, hosts),
            victim: VictimServer::new(cfg.server),
            sentinel: (mode != Mode::Off).then(|| Sentinel::new(cfg.thresholds)),
            controller,
            clients: (0..cfg.benign.client_count)
                .map(|i| BenignClient::new(i, &cfg.benign, cfg.seed))
                .collect(),
            attacks: cfg
                .attacks
                .iter()
                .enumerate()
                .map(|(i, a)| AttackActor::new(i as u32, a.clone(), cfg.seed))
                .collect(),
            end: SimTime::from_secs_f64(cfg.duration_s),
            probe_interval_us: (cfg.thresholds.probe_interval_s * 1e6).round() as u64,
            window_successes: 0,
            window_attempts: 0,
            last_success_rate: 1.0,
            probe_cursor: 0,
            report,
        }
    }

    /// Schedule the opening events. The fixed order (sample, probe, window
    /// tick, then actors) pins the dispatch order at every later second.
    pub fn setup(&mut self, eng: &mut Engine<SimEvent>) -> Result<(), WorldError> {
        eng.schedule(SimTime::ZERO, SimEvent::Sample)?;
        if self.sentinel.is_some() {
            eng.schedule(SimTime::ZERO, SimEvent::ProbeTick)?;
            eng.schedule(SimTime::from_secs(1), SimEvent::WindowTick)?;
        }
        for c in &mut self.clients {
            c.start(eng);
        }
        for a in &mut self.attacks {
            a.start(eng);
        }
        Ok(())
    }

    fn send(&mut self, eng: &mut Engine<SimEvent>, pkt: Packet) -> Result<(), WorldError> {
        match self.switch.forward(pkt.at, &pkt) {
            ForwardOutcome::Delivered { deliver_at, mirror } => {
                let tap = mirror && self.sentinel.is_some();
                eng.schedule(deliver_at, SimEvent::Deliver(pkt.clone()))?;
                if tap {
                    eng.schedule(deliver_at, SimEvent::Tap(pkt))?;
                }
                Ok(())
            }
            ForwardOutcome::DroppedByRule | ForwardOutcome::DroppedOverflow => Ok(()),
            ForwardOutcome::RoutingError => {
                Err(WorldError::Routing { src: pkt.src, dst: pkt.dst })
            }
        }
    }

    fn send_all(&mut self, eng: &mut Engine<SimEvent>, out: Vec<Packet>) -> Result<(), WorldError> {
        for pkt in out {
            self.send(eng, pkt)?;
        }
        Ok(())
    }

    fn tally(&mut self, now: SimTime, outcome: Option<BenignOutcome>) {
        let Some(o) = outcome else { return };
        self.window_attempts += 1;
        match o {
            BenignOutcome::Success { .. } => {
                self.window_successes += 1;
                self.report.benign_success_total += 1;
            }
            BenignOutcome::Refused => {
                self.report.benign_refused_total += 1;
                self.report.first_benign_refusal_at.get_or_insert(now);
            }
            BenignOutcome::TimedOut => self.report.benign_timed_out_total += 1,
        }
    }

    fn on_deliver(
        &mut self,
        eng: &mut Engine<SimEvent>,
        now: SimTime,
        pkt: Packet,
    ) -> Result<(), WorldError> {
        // A rule installed while this packet was in flight still stops it.
        if self.switch.blocks(now, pkt.src) {
            self.switch.counters.late_drops += 1;
            return Ok(());
        }
        let mut out = Vec::new();
        match role_of(pkt.dst) {
            Role::Victim => {
                self.report.victim_deliveries.push((now, pkt.src));
                self.victim.on_packet(eng, now, &pkt, &mut out);
            }
            Role::Benign => {
                let i = benign_index(pkt.dst) as usize;
                let outcome = self.clients[i].on_packet(eng, now, &pkt, &mut out);
                self.tally(now, outcome);
            }
            Role::Attacker => {
                let (a, _) = attacker_index(pkt.dst);
                self.attacks[a as usize].on_packet(eng, now, &pkt, &mut out);
            }
            Role::Prober => {
                if let Some(s) = &mut self.sentinel {
                    out = s.on_prober_packet(eng, now, &pkt);
                }
            }
            Role::Sentinel | Role::Unknown => {}
        }
        self.send_all(eng, out)
    }

    fn on_sample(&mut self, eng: &mut Engine<SimEvent>, now: SimTime) -> Result<(), WorldError> {
        let vs = self.victim.metrics_sample(now);
        let pps = self.switch.take_delivered_window();

        let rate = if self.window_attempts > 0 {
            self.window_successes as f64 / self.window_attempts as f64
        } else {
            self.last_success_rate
        };
        self.last_success_rate = rate;
        self.window_successes = 0;
        self.window_attempts = 0;

        let (probe_status, probe_rtt_us) = match &self.sentinel {
            None => ("off", None),
            Some(s) => {
                let log = s.probe_log();
                let mut latest = None;
                while self.probe_cursor < log.len() && log[self.probe_cursor].recorded_at <= now {
                    latest = Some(log[self.probe_cursor]);
                    self.probe_cursor += 1;
                }
                match latest {
                    Some(e) => {
                        let rtt = match e.outcome {
                            ProbeOutcome::Responded { rtt_us } => Some(rtt_us),
                            _ => None,
                        };
                        (e.outcome.status_str(), rtt)
                    }
                    None => ("none", None),
                }
            }
        };

        let blocked_count = match &mut self.controller {
            Some(ctl) => {
                ctl.purge_expired(&mut self.switch, now);
                ctl.blocked_count()
            }
            None => 0,
        };

        self.report.samples.push(SampleRow {
            t_s: now.us() / US_PER_SEC,
            probe_rtt_us,
            probe_status,
            cpu_util: vs.cpu_utilization,
            occupancy: vs.occupancy,
            benign_success_rate: rate,
            blocked_count,
            packet_rate_pps: pps,
        });

        let next = now.plus_us(US_PER_SEC);
        if next <= self.end {
            eng.schedule(next, SimEvent::Sample)?;
        }
        Ok(())
    }

    fn on_window_tick(
        &mut self,
        eng: &mut Engine<SimEvent>,
        now: SimTime,
    ) -> Result<(), WorldError> {
        let Some(s) = &mut self.sentinel else { return Ok(()) };
        let rep = s.window_tick(now);
        for ev in rep.detections {
            self.report.events.push(LogEvent::Detect {
                at: ev.at,
                class: ev.class,
                attackers: ev.attackers.clone(),
            });
            self.report.detections.push(ev.clone());
            if self.controller.is_some() {
                eng.schedule(
                    now.plus_us(DETECTION_LATENCY_US),
                    SimEvent::DeliverDetection(ev),
                )?;
            }
        }
        if rep.all_clear {
            self.report.events.push(LogEvent::AllClear { at: now });
        }
        let next = now.plus_us(US_PER_SEC);
        if next <= self.end {
            eng.schedule(next, SimEvent::WindowTick)?;
        }
        Ok(())
    }

    pub fn finalize(&mut self, eng: &Engine<SimEvent>, cfg: &ScenarioConfig) -> Result<(), RunError> {
        if !self.victim.conservation_holds() {
            return Err(RunError::Invariant(format!(
                "victim connection accounting does not balance: {:?}",
                self.victim.counters
            )));
        }
        let stats = eng.stats();
        if stats.scheduled != stats.dispatched + stats.cancelled + eng.pending() as u64 {
            return Err(RunError::Invariant(format!(
                "event accounting does not balance: {stats:?} with {} pending",
                eng.pending()
            )));
        }

        if let Some(s) = &self.sentinel {
            self.report.final_source_stats = s.source_stats(self.end);
            self.report.probe_log = s.probe_log().to_vec();
        }
        self.report.first_full_at = self.victim.first_full_at;
        self.report.victim_counters = self.victim.counters;
        self.report.switch_counters = self.switch.counters;
        self.report.engine_stats = Some(stats);
        self.report.summary = compute_summary(cfg, &self.report);
        Ok(())
    }
}

impl Handler<SimEvent> for World {
    type Err = WorldError;

    fn on_event(
        &mut self,
        eng: &mut Engine<SimEvent>,
        now: SimTime,
        ev: SimEvent,
    ) -> Result<(), WorldError> {
        match ev {
            SimEvent::Deliver(pkt) => self.on_deliver(eng, now, pkt),
            SimEvent::Tap(pkt) => {
                if self.switch.blocks(now, pkt.src) {
                    return Ok(());
                }
                if let Some(s) = &mut self.sentinel {
                    self.report.tap_log.push((now, pkt.clone()));
                    s.observe(now, &pkt);
                }
                Ok(())
            }
            SimEvent::ConnTimeout { key, kind } => {
                let mut out = Vec::new();
                self.victim.on_timeout(eng, now, key, kind, &mut out);
                self.send_all(eng, out)
            }
            SimEvent::CpuDone => {
                let mut out = Vec::new();
                self.victim.on_cpu_done(eng, now, &mut out);
                self.send_all(eng, out)
            }
            SimEvent::Sample => self.on_sample(eng, now),
            SimEvent::ProbeTick => {
                let Some(s) = &mut self.sentinel else { return Ok(()) };
                let out = s.probe_tick(eng, now);
                self.send_all(eng, out)?;
                let next = now.plus_us(self.probe_interval_us);
                if next <= self.end {
                    eng.schedule(next, SimEvent::ProbeTick)?;
                }
                Ok(())
            }
            SimEvent::ProbeTimeout { port } => {
                let Some(s) = &mut self.sentinel else { return Ok(()) };
                let out = s.on_probe_timeout(now, port);
                self.send_all(eng, out)
            }
            SimEvent::WindowTick => self.on_window_tick(eng, now),
            SimEvent::BenignWake { client, wake } => {
                let mut out = Vec::new();
                let outcome = self.clients[client as usize].on_wake(eng, now, wake, &mut out);
                self.tally(now, outcome);
                self.send_all(eng, out)
            }
            SimEvent::AttackWake { attack, wake } => {
                let mut out = Vec::new();
                self.attacks[attack as usize].on_wake(eng, now, wake, &mut out);
                self.send_all(eng, out)
            }
            SimEvent::DeliverDetection(ev) => {
                let Some(ctl) = &mut self.controller else { return Ok(()) };
                let installed = ctl.on_detection_event(&mut self.switch, now, &ev);
                for b in installed {
                    self.report.events.push(LogEvent::Block {
                        at: b.blocked_at,
                        addr: b.addr,
                        cause: b.cause,
                    });
                    self.report.blocks.push(b);
                }
                Ok(())
            }
        }
    }
}

/// Run one scenario start to finish and return its report.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunReport, RunError> {
    let mut eng = Engine::new();
    let mut world = World::new(cfg);
    world
        .setup(&mut eng)
        .map_err(|source| RunAborted { at: SimTime::ZERO, dispatched: 0, source })?;
    eng.run_until(world.end, &mut world)?;
    world.finalize(&eng, cfg)?;
    Ok(world.report)
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0u64;
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn compute_summary(cfg: &ScenarioConfig, report: &RunReport) -> Summary {
    let samples = &report.samples;
    let peak_occupancy = samples.iter().map(|r| r.occupancy).max().unwrap_or(0);
    let peak_cpu = samples.iter().map(|r| r.cpu_util).fold(0.0f64, f64::max);

    let window = attack_window(cfg);
    let (before, during, after) = match window {
        Some((start, end)) => (
            mean(samples.iter().filter(|r| (r.t_s as f64) < start).map(|r| r.benign_success_rate)),
            mean(
                samples
                    .iter()
                    .filter(|r| (r.t_s as f64) >= start && (r.t_s as f64) <= end)
                    .map(|r| r.benign_success_rate),
            ),
            mean(samples.iter().filter(|r| (r.t_s as f64) > end).map(|r| r.benign_success_rate)),
        ),
        None => (
            mean(samples.iter().map(|r| r.benign_success_rate)),
            None,
            None,
        ),
    };

    let time_to_detection_s = match (window, report.detections.first()) {
        (Some((start, _)), Some(d)) => Some(round6(d.at.as_secs_f64() - start)),
        _ => None,
    };

    let time_to_mitigation_s = window.and_then(|(start, _)| {
        const OK: f64 = 0.95;
        const SUSTAIN_S: u64 = 10;
        // Degradation can surface well after the attack begins (a request only
        // fails once its patience runs out), so recovery is measured from the
        // first degraded sample, not from the attack start itself.
        let onset = samples
            .iter()
            .position(|r| (r.t_s as f64) >= start && r.benign_success_rate < OK);
        let Some(onset) = onset else {
            return Some(0.0); // service never dipped
        };
        for (i, row) in samples.iter().enumerate().skip(onset) {
            let horizon = row.t_s + SUSTAIN_S;
            if (horizon as f64) > cfg.duration_s {
                return None; // not enough run left to demonstrate sustain
            }
            let sustained = samples[i..]
                .iter()
                .take_while(|r| r.t_s <= horizon)
                .all(|r| r.benign_success_rate >= OK);
            if sustained {
                return Some(round6(row.t_s as f64 - start));
            }
        }
        None
    });

    Summary {
        time_to_detection_s,
        time_to_mitigation_s,
        benign_success_before: before.map(round6),
        benign_success_during: during.map(round6),
        benign_success_after: after.map(round6),
        peak_occupancy,
        peak_cpu: round6(peak_cpu),
    }
}

/// Earliest attack start and latest attack end, if any attack is configured.
fn attack_window(cfg: &ScenarioConfig) -> Option<(f64, f64)> {
    if cfg.attacks.is_empty() {
        return None;
    }
    let start = cfg.attacks.iter().map(|a| a.start_s).fold(f64::INFINITY, f64::min);
    let end = cfg.attacks.iter().map(|a| a.start_s + a.duration_s).fold(0.0f64, f64::max);
    Some((start, end))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sentinel::AttackClass;
    use crate::traffic::{AttackConfig, BenignConfig};

    fn base_cfg(name: &str, duration_s: f64) -> ScenarioConfig {
        ScenarioConfig {
            name: name.into(),
            seed: 11,
            duration_s,
            warmup_s: 10.0,
            protection_enabled: true,
            sentinel_observe_only: false,
            rule_timeout_s: None,
            server: Default::default(),
            link: Default::default(),
            benign: BenignConfig {
                client_count: 10,
                request_interval_s: 2.0,
                ..Default::default()
            },
            attacks: vec![],
            thresholds: Default::default(),
        }
    }

    #[test]
    fn benign_only_run_is_clean() {
        let cfg = base_cfg("benign-smoke", 40.0);
        let report = run_scenario(&cfg).unwrap();
        assert_eq!(report.samples.len(), 41);
        for (i, r) in report.samples.iter().enumerate() {
            assert_eq!(r.t_s, i as u64);
            assert_eq!(r.benign_success_rate, 1.0, "second {i}");
            assert_eq!(r.blocked_count, 0);
            assert!(r.cpu_util <= 0.5);
        }
        assert!(report.detections.is_empty());
        assert!(report.blocks.is_empty());
        assert!(report.benign_success_total > 0);
        assert_eq!(report.benign_refused_total, 0);
        // Probes respond promptly once the pipeline warms up.
        let late = &report.samples[20];
        assert_eq!(late.probe_status, "ok");
        let rtt = late.probe_rtt_us.unwrap();
        assert!((10_000..60_000).contains(&rtt), "rtt {rtt}");
        assert_eq!(report.summary.benign_success_before, Some(1.0));
        assert_eq!(report.summary.time_to_detection_s, None);
    }

    #[test]
    fn protection_off_without_observe_disables_the_sentinel() {
        let mut cfg = base_cfg("dark", 20.0);
        cfg.protection_enabled = false;
        let report = run_scenario(&cfg).unwrap();
        assert!(report.samples.iter().all(|r| r.probe_status == "off"));
        assert!(report.probe_log.is_empty());
        assert!(report.tap_log.is_empty());
        assert!(report.detections.is_empty());
    }

    #[test]
    fn observe_mode_detects_but_never_blocks() {
        let mut cfg = base_cfg("observer", 60.0);
        cfg.protection_enabled = false;
        cfg.sentinel_observe_only = true;
        cfg.attacks = vec![AttackConfig {
            kind: AttackClass::SynFlood,
            start_s: 12.0,
            duration_s: 30.0,
            rate_pps: 100.0,
            source_count: 50,
            connections_per_source: 8,
            slow_interval_s: 30.0,
            jitter_fraction: 0.02,
        }];
        let report = run_scenario(&cfg).unwrap();
        assert!(!report.detections.is_empty(), "flood must be detected");
        assert_eq!(report.detections[0].class, AttackClass::SynFlood);
        assert!(report.blocks.is_empty());
        assert!(report.samples.iter().all(|r| r.blocked_count == 0));
    }

    #[test]
    fn protected_syn_flood_blocks_and_goes_quiet() {
        let mut cfg = base_cfg("mini-protected", 60.0);
        cfg.attacks = vec![AttackConfig {
            kind: AttackClass::SynFlood,
            start_s: 12.0,
            duration_s: 30.0,
            rate_pps: 100.0,
            source_count: 50,
            connections_per_source: 8,
            slow_interval_s: 30.0,
            jitter_fraction: 0.02,
        }];
        let report = run_scenario(&cfg).unwrap();

        assert_eq!(report.detections[0].class, AttackClass::SynFlood);
        assert_eq!(report.blocks.len(), 50, "all spoofed sources blocked");

        // Detection must be quick; the table fills about 2.6 s in.
        let ttd = report.summary.time_to_detection_s.unwrap();
        assert!(ttd <= 15.0, "ttd {ttd}");

        // Nothing from a blocked source reaches the victim afterwards.
        for b in &report.blocks {
            let leaked = report
                .victim_deliveries
                .iter()
                .any(|(at, src)| *src == b.addr && *at > b.blocked_at);
            assert!(!leaked, "delivery from {} after block", b.addr);
        }

        // The bad-network client is never accused.
        let bad = crate::topology::benign_addr(0);
        assert!(report.blocks.iter().all(|b| b.addr != bad));
        assert!(report.detections.iter().all(|d| !d.attackers.contains(&bad)));

        // Service recovers after the table drains.
        let ttm = report.summary.time_to_mitigation_s.unwrap();
        assert!(ttm <= 45.0, "ttm {ttm}");
    }

    #[test]
    fn same_seed_same_bytes_different_seed_different_bytes() {
        let mut cfg = base_cfg("replay", 30.0);
        cfg.attacks = vec![AttackConfig {
            kind: AttackClass::HttpFlood,
            start_s: 12.0,
            duration_s: 10.0,
            rate_pps: 20.0,
            source_count: 4,
            connections_per_source: 8,
            slow_interval_s: 30.0,
            jitter_fraction: 0.02,
        }];
        let a = run_scenario(&cfg).unwrap();
        let b = run_scenario(&cfg).unwrap();
        let render = |r: &RunReport| {
            (
                crate::report::render_samples_csv(&r.samples),
                crate::report::render_events_log(&r.events),
                crate::report::render_summary_json(&r.summary),
            )
        };
        assert_eq!(render(&a), render(&b));

        cfg.seed = 12;
        let c = run_scenario(&cfg).unwrap();
        assert_ne!(render(&a).0, render(&c).0, "different seed must show up in samples");
    }
}
