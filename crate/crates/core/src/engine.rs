//! Discrete-event core: a virtual microsecond clock and a priority queue of
//! pending events. Everything else in the simulator acts by scheduling and
//! handling events; nothing reads wall-clock time.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;

/// Virtual time in whole microseconds since run start.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Debug)]
pub struct SimTime(u64);

pub const US_PER_SEC: u64 = 1_000_000;

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_us(us: u64) -> Self {
        SimTime(us)
    }

    pub fn from_secs(s: u64) -> Self {
        SimTime(s * US_PER_SEC)
    }

    /// Fractional seconds, rounded to the nearest microsecond.
    pub fn from_secs_f64(s: f64) -> Self {
        SimTime((s * US_PER_SEC as f64).round() as u64)
    }

    pub fn us(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / US_PER_SEC as f64
    }

    pub fn plus_us(self, us: u64) -> SimTime {
        SimTime(self.0 + us)
    }

    pub fn plus_secs_f64(self, s: f64) -> SimTime {
        SimTime(self.0 + (s * US_PER_SEC as f64).round() as u64)
    }

    /// Saturating difference in microseconds.
    pub fn since(self, earlier: SimTime) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}", self.0 / US_PER_SEC, self.0 % US_PER_SEC)
    }
}

/// Identifies a scheduled event so it can be cancelled before it fires.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct EventHandle {
    seq: u64,
}

struct Entry<P> {
    at: SimTime,
    seq: u64,
    payload: P,
}

// Order by (fire_at, seq); the heap is a max-heap so comparisons are reversed.
// seq ties guarantee FIFO dispatch for events scheduled at the same instant.
impl<P> Ord for Entry<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

impl<P> PartialOrd for Entry<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> PartialEq for Entry<P> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}

impl<P> Eq for Entry<P> {}

#[derive(thiserror::Error, Debug, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("event scheduled at {at} which is before the current clock {now}")]
    SchedulePast { at: SimTime, now: SimTime },
}

/// A run aborted by a handler; carries enough state to diagnose the failure.
#[derive(thiserror::Error, Debug)]
#[error("run aborted at {at} after {dispatched} events: {source}")]
pub struct RunAborted<E: std::error::Error + 'static> {
    pub at: SimTime,
    pub dispatched: u64,
    #[source]
    pub source: E,
}

/// Receives dispatched events and may schedule further ones.
pub trait Handler<P> {
    type Err: std::error::Error + 'static;

    fn on_event(&mut self, eng: &mut Engine<P>, now: SimTime, payload: P)
        -> Result<(), Self::Err>;
}

/// Event queue plus clock. Dispatch order is a strict total order over
/// (fire_at, seq), so a run is a pure function of its inputs.
pub struct Engine<P> {
    clock: SimTime,
    heap: BinaryHeap<Entry<P>>,
    live: HashSet<u64>,
    next_seq: u64,
    scheduled: u64,
    dispatched: u64,
    cancelled: u64,
}

impl<P> Default for Engine<P> {
    fn default() -> Self {
        Engine::new()
    }
}

impl<P> Engine<P> {
    pub fn new() -> Self {
        Engine {
            clock: SimTime::ZERO,
            heap: BinaryHeap::new(),
            live: HashSet::new(),
            next_seq: 0,
            scheduled: 0,
            dispatched: 0,
            cancelled: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.clock
    }

    /// Queue an event. `at` may equal the current clock (it fires after the
    /// events already due at this instant); scheduling in the past is rejected.
    pub fn schedule(&mut self, at: SimTime, payload: P) -> Result<EventHandle, EngineError> {
        if at < self.clock {
            return Err(EngineError::SchedulePast { at, now: self.clock });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.scheduled += 1;
        self.live.insert(seq);
        self.heap.push(Entry { at, seq, payload });
        Ok(EventHandle { seq })
    }

    pub fn schedule_in(&mut self, delay_us: u64, payload: P) -> Result<EventHandle, EngineError> {
        self.schedule(self.clock.plus_us(delay_us), payload)
    }

    /// True iff the event was still pending; cancelling a dispatched, already
    /// cancelled, or unknown handle returns false and changes nothing.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        if self.live.remove(&handle.seq) {
            self.cancelled += 1;
            true
        } else {
            false
        }
    }

    /// Dispatch every event with fire_at <= end in order, then set the clock
    /// to exactly `end`. A handler error aborts the run immediately.
    pub fn run_until<H: Handler<P>>(
        &mut self,
        end: SimTime,
        handler: &mut H,
    ) -> Result<SimTime, RunAborted<H::Err>> {
        loop {
            match self.heap.peek() {
                Some(entry) if entry.at <= end => {}
                _ => break,
            }
            let entry = self.heap.pop().unwrap();
            if !self.live.remove(&entry.seq) {
                continue; // cancelled; heap entry is stale
            }
            debug_assert!(entry.at >= self.clock);
            self.clock = entry.at;
            self.dispatched += 1;
            if let Err(source) = handler.on_event(self, entry.at, entry.payload) {
                return Err(RunAborted {
                    at: self.clock,
                    dispatched: self.dispatched,
                    source,
                });
            }
        }
        self.clock = end;
        Ok(end)
    }

    pub fn pending(&self) -> usize {
        self.live.len()
    }

    pub fn stats(&self) -> EngineStats {
        EngineStats {
            scheduled: self.scheduled,
            dispatched: self.dispatched,
            cancelled: self.cancelled,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EngineStats {
    pub scheduled: u64,
    pub dispatched: u64,
    pub cancelled: u64,
}

/// Derives an independent deterministic RNG stream for one simulated actor.
/// Streams depend only on (seed, tag, a, b), so adding or removing another
/// actor never perturbs this one's draws.
pub fn actor_rng(seed: u64, tag: &str, a: u64, b: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &byte in tag.as_bytes() {
        h = (h ^ byte as u64).wrapping_mul(0x100_0000_01B3);
    }
    h = (h ^ a).wrapping_mul(0x100_0000_01B3);
    h = (h ^ b).wrapping_mul(0x100_0000_01B3);
    rand_chacha::ChaCha8Rng::seed_from_u64(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    struct Recorder {
        seen: Vec<(SimTime, u32)>,
    }

    impl Handler<u32> for Recorder {
        type Err = EngineError;

        fn on_event(&mut self, _: &mut Engine<u32>, now: SimTime, p: u32) -> Result<(), EngineError> {
            self.seen.push((now, p));
            Ok(())
        }
    }

    #[test]
    fn fifo_tie_break_at_same_instant() {
        let mut eng = Engine::new();
        eng.schedule(SimTime::ZERO, 1).unwrap();
        eng.schedule(SimTime::ZERO, 2).unwrap();
        let mut rec = Recorder { seen: Vec::new() };
        eng.run_until(SimTime::from_secs(1), &mut rec).unwrap();
        assert_eq!(rec.seen, vec![(SimTime::ZERO, 1), (SimTime::ZERO, 2)]);
    }

    #[test]
    fn empty_queue_advance_dispatches_nothing() {
        let mut eng: Engine<u32> = Engine::new();
        let mut rec = Recorder { seen: Vec::new() };
        let end = eng.run_until(SimTime::from_secs(10), &mut rec).unwrap();
        assert_eq!(end, SimTime::from_secs(10));
        assert_eq!(eng.now(), SimTime::from_secs(10));
        assert!(rec.seen.is_empty());
        assert_eq!(eng.stats().dispatched, 0);
    }

    #[test]
    fn schedule_in_past_rejected() {
        let mut eng: Engine<u32> = Engine::new();
        eng.schedule(SimTime::from_us(5), 0).unwrap();
        let mut rec = Recorder { seen: Vec::new() };
        eng.run_until(SimTime::from_us(5), &mut rec).unwrap();
        let err = eng.schedule(SimTime::from_us(4), 1).unwrap_err();
        assert_eq!(
            err,
            EngineError::SchedulePast { at: SimTime::from_us(4), now: SimTime::from_us(5) }
        );
    }

    struct PastScheduler;

    impl Handler<u32> for PastScheduler {
        type Err = EngineError;

        fn on_event(&mut self, eng: &mut Engine<u32>, _: SimTime, _: u32) -> Result<(), EngineError> {
            eng.schedule(SimTime::ZERO, 9)?;
            Ok(())
        }
    }

    #[test]
    fn handler_scheduling_past_aborts_with_diagnostics() {
        let mut eng = Engine::new();
        eng.schedule(SimTime::from_us(100), 0).unwrap();
        let aborted = eng.run_until(SimTime::from_secs(1), &mut PastScheduler).unwrap_err();
        assert_eq!(aborted.at, SimTime::from_us(100));
        assert_eq!(aborted.dispatched, 1);
    }

    #[test]
    fn cancel_pending_once() {
        let mut eng = Engine::new();
        let h = eng.schedule(SimTime::from_us(10), 7).unwrap();
        assert!(eng.cancel(h));
        assert!(!eng.cancel(h));
        let mut rec = Recorder { seen: Vec::new() };
        eng.run_until(SimTime::from_secs(1), &mut rec).unwrap();
        assert!(rec.seen.is_empty());
        let s = eng.stats();
        assert_eq!((s.scheduled, s.dispatched, s.cancelled), (1, 0, 1));
    }

    #[test]
    fn cancel_dispatched_returns_false() {
        let mut eng = Engine::new();
        let h = eng.schedule(SimTime::from_us(10), 7).unwrap();
        let mut rec = Recorder { seen: Vec::new() };
        eng.run_until(SimTime::from_secs(1), &mut rec).unwrap();
        assert!(!eng.cancel(h));
    }

    /// Count oracle: N scheduled, N/2 cancelled, N/2 dispatched, conservation
    /// holds exactly.
    #[test]
    fn conservation_under_cancellation() {
        let n = 1000;
        let mut eng = Engine::new();
        let mut handles = Vec::new();
        for i in 0..n {
            handles.push(eng.schedule(SimTime::from_us(i as u64 * 3), i).unwrap());
        }
        for h in handles.iter().step_by(2) {
            assert!(eng.cancel(*h));
        }
        let mut rec = Recorder { seen: Vec::new() };
        eng.run_until(SimTime::from_secs(1), &mut rec).unwrap();
        assert_eq!(rec.seen.len(), n as usize / 2);
        let s = eng.stats();
        assert_eq!(s.scheduled, n as u64);
        assert_eq!(s.dispatched + s.cancelled, n as u64);
    }

    fn random_run(seed: u64) -> Vec<(SimTime, u32)> {
        let mut rng = actor_rng(seed, "engine-replay", 0, 0);
        let mut eng = Engine::new();
        for i in 0..10_000u32 {
            let at = SimTime::from_us(rng.gen_range(0..60_000_000));
            eng.schedule(at, i).unwrap();
        }
        let mut rec = Recorder { seen: Vec::new() };
        eng.run_until(SimTime::from_secs(60), &mut rec).unwrap();
        rec.seen
    }

    /// Replay oracle: identical seeds produce identical dispatch sequences.
    #[test]
    fn replay_is_bit_identical() {
        let a = random_run(42);
        let b = random_run(42);
        assert_eq!(a.len(), 10_000);
        assert_eq!(a, b);
        // And the order is the (fire_at, seq) total order.
        for w in a.windows(2) {
            assert!(w[0].0 <= w[1].0);
        }
        assert_ne!(a, random_run(43));
    }

    #[test]
    fn actor_streams_are_independent() {
        let mut a = actor_rng(1, "attack", 0, 0);
        let mut a2 = actor_rng(1, "attack", 0, 0);
        let mut b = actor_rng(1, "attack", 1, 0);
        let xs: Vec<u64> = (0..8).map(|_| a.gen()).collect();
        let xs2: Vec<u64> = (0..8).map(|_| a2.gen()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.gen()).collect();
        assert_eq!(xs, xs2);
        assert_ne!(xs, ys);
    }
}
