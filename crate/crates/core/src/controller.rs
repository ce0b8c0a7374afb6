//! Control-plane half of the protection system: turns detection events into
//! drop rules in the switch and keeps the book of who is blocked and why.
//! Deliberately thin; it never second-guesses the analysis side.

use std::collections::BTreeMap;

use crate::engine::SimTime;
use crate::sentinel::{AttackClass, DetectionEvent};
use crate::topology::{FlowRule, HostAddr, InstallOutcome, Switch};

#[derive(Clone, Copy, PartialEq, Debug)]
pub struct BlockEntry {
    pub addr: HostAddr,
    pub blocked_at: SimTime,
    pub cause: AttackClass,
}

pub struct Controller {
    /// Rules installed with no hard timeout unless configured otherwise.
    pub rule_timeout_us: Option<u64>,
    entries: BTreeMap<HostAddr, BlockEntry>,
    /// Installs rejected by a full rule table, retried on the next event.
    pending_failed: Vec<(HostAddr, AttackClass)>,
    pub install_failures: u64,
}

impl Controller {
    pub fn new() -> Self {
        Controller {
            rule_timeout_us: None,
            entries: BTreeMap::new(),
            pending_failed: Vec::new(),
            install_failures: 0,
        }
    }

    pub fn is_blocked(&self, addr: HostAddr) -> bool {
        self.entries.contains_key(&addr)
    }

    pub fn blocked_count(&self) -> usize {
        self.entries.len()
    }

    /// Current entries in address order.
    pub fn blocked_set(&self) -> Vec<BlockEntry> {
        self.entries.values().copied().collect()
    }

    pub fn pending_retries(&self) -> usize {
        self.pending_failed.len()
    }

    /// Apply one detection event: install a drop rule per attacker not yet
    /// blocked, plus anything left over from earlier table-full failures.
    /// Returns the newly created entries in address order.
    pub fn on_detection_event(
        &mut self,
        switch: &mut Switch,
        now: SimTime,
        ev: &DetectionEvent,
    ) -> Vec<BlockEntry> {
        let mut todo: Vec<(HostAddr, AttackClass)> = std::mem::take(&mut self.pending_failed);
        todo.extend(ev.attackers.iter().map(|a| (*a, ev.class)));

        let mut applied = Vec::new();
        for (addr, cause) in todo {
            if self.entries.contains_key(&addr) {
                continue;
            }
            let rule = FlowRule {
                match_src: addr,
                installed_at: now,
                hard_timeout_us: self.rule_timeout_us,
            };
            match switch.install_rule(rule) {
                InstallOutcome::Installed | InstallOutcome::AlreadyPresent => {
                    let entry = BlockEntry { addr, blocked_at: now, cause };
                    self.entries.insert(addr, entry);
                    applied.push(entry);
                }
                InstallOutcome::TableFull => {
                    self.install_failures += 1;
                    self.pending_failed.push((addr, cause));
                }
            }
        }
        applied.sort_by_key(|e| e.addr);
        applied
    }

    /// Drop entries whose switch rule has expired; returns them so the run
    /// log can record the expiry.
    pub fn purge_expired(&mut self, switch: &mut Switch, now: SimTime) -> Vec<BlockEntry> {
        let live: BTreeMap<HostAddr, FlowRule> = switch
            .active_rules(now)
            .into_iter()
            .map(|r| (r.match_src, r))
            .collect();
        let mut expired = Vec::new();
        self.entries.retain(|addr, entry| {
            if live.contains_key(addr) {
                true
            } else {
                expired.push(*entry);
                false
            }
        });
        expired
    }
}

impl Default for Controller {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{attacker_addr, HostSet, LinkParams};

    fn switch() -> Switch {
        let hosts = HostSet { benign_count: 4, attack_source_counts: vec![16] };
        Switch::new(LinkParams::default(), hosts)
    }

    fn event(attackers: Vec<HostAddr>) -> DetectionEvent {
        DetectionEvent {
            at: SimTime::from_secs(30),
            class: AttackClass::SynFlood,
            attackers,
            evidence: Vec::new(),
        }
    }

    #[test]
    fn installs_one_rule_per_attacker() {
        let mut sw = switch();
        let mut ctl = Controller::new();
        let attackers = vec![attacker_addr(0, 2), attacker_addr(0, 0), attacker_addr(0, 1)];
        let applied = ctl.on_detection_event(&mut sw, SimTime::from_secs(30), &event(attackers));
        assert_eq!(applied.len(), 3);
        assert!(applied.windows(2).all(|w| w[0].addr < w[1].addr));
        assert_eq!(ctl.blocked_count(), 3);
        for e in &applied {
            assert!(sw.blocks(SimTime::from_secs(31), e.addr));
            assert_eq!(e.blocked_at, SimTime::from_secs(30));
        }
    }

    #[test]
    fn replaying_an_event_changes_nothing() {
        let mut sw = switch();
        let mut ctl = Controller::new();
        let ev = event(vec![attacker_addr(0, 0), attacker_addr(0, 1)]);
        let first = ctl.on_detection_event(&mut sw, SimTime::from_secs(30), &ev);
        assert_eq!(first.len(), 2);
        let again = ctl.on_detection_event(&mut sw, SimTime::from_secs(31), &ev);
        assert!(again.is_empty());
        assert_eq!(ctl.blocked_count(), 2);
        // blocked_at keeps the original time.
        assert_eq!(ctl.blocked_set()[0].blocked_at, SimTime::from_secs(30));
    }

    #[test]
    fn full_rule_table_defers_and_retries() {
        let hosts = HostSet { benign_count: 0, attack_source_counts: vec![16] };
        let mut sw = Switch::new(LinkParams::default(), hosts).with_rule_limit(2);
        let mut ctl = Controller::new();
        let ev = event(vec![attacker_addr(0, 0), attacker_addr(0, 1), attacker_addr(0, 2)]);
        let applied = ctl.on_detection_event(&mut sw, SimTime::from_secs(30), &ev);
        assert_eq!(applied.len(), 2);
        assert_eq!(ctl.pending_retries(), 1);
        assert_eq!(ctl.install_failures, 1);
        // The deferred address rides along with the next event and fails
        // again while the table stays full.
        let applied =
            ctl.on_detection_event(&mut sw, SimTime::from_secs(31), &event(vec![attacker_addr(0, 3)]));
        assert!(applied.is_empty());
        assert_eq!(ctl.pending_retries(), 2);
        assert_eq!(ctl.install_failures, 3);
    }

    #[test]
    fn expired_rules_leave_the_blocked_set() {
        let mut sw = switch();
        let mut ctl = Controller::new();
        ctl.rule_timeout_us = Some(10_000_000);
        let ev = event(vec![attacker_addr(0, 0)]);
        ctl.on_detection_event(&mut sw, SimTime::from_secs(30), &ev);
        assert!(ctl.purge_expired(&mut sw, SimTime::from_secs(35)).is_empty());
        assert_eq!(ctl.blocked_count(), 1);
        let expired = ctl.purge_expired(&mut sw, SimTime::from_secs(41));
        assert_eq!(expired.len(), 1);
        assert_eq!(expired[0].addr, attacker_addr(0, 0));
        assert_eq!(ctl.blocked_count(), 0);
    }
}
