//! Run artifacts and their renderers. The CSV, event log and summary formats
//! are part of the tool's external contract: same input, same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;

use crate::controller::BlockEntry;
use crate::engine::{EngineStats, SimTime};
use crate::sentinel::{AttackClass, DetectionEvent, ProbeLogEntry, SourceStats};
use crate::topology::{HostAddr, Packet, SwitchCounters};
use crate::victim::VictimCounters;

pub const SAMPLES_HEADER: &str =
    "time_s,probe_rtt_ms,probe_status,cpu_util,occupancy,benign_success_rate,blocked_count,packet_rate_pps";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleRow {
    pub t_s: u64,
    /// Round trip of the probe outcome reported this second, if it responded.
    pub probe_rtt_us: Option<u64>,
    /// "ok", "timeout", "refused", "none" (no outcome this second) or "off".
    pub probe_status: &'static str,
    pub cpu_util: f64,
    pub occupancy: usize,
    pub benign_success_rate: f64,
    pub blocked_count: usize,
    pub packet_rate_pps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LogEvent {
    Detect { at: SimTime, class: AttackClass, attackers: Vec<HostAddr> },
    Block { at: SimTime, addr: HostAddr, cause: AttackClass },
    AllClear { at: SimTime },
}

#[derive(Clone, Debug, PartialEq, Default, Serialize)]
pub struct Summary {
    pub time_to_detection_s: Option<f64>,
    pub time_to_mitigation_s: Option<f64>,
    pub benign_success_before: Option<f64>,
    pub benign_success_during: Option<f64>,
    pub benign_success_after: Option<f64>,
    pub peak_occupancy: usize,
    pub peak_cpu: f64,
}

/// Everything a finished run produced. The rendered files cover the external
/// contract; the rest is raw material for tests and analysis.
#[derive(Clone, Debug, Default)]
pub struct RunReport {
    pub scenario_name: String,
    pub samples: Vec<SampleRow>,
    pub events: Vec<LogEvent>,
    pub summary: Summary,

    pub detections: Vec<DetectionEvent>,
    pub blocks: Vec<BlockEntry>,
    pub probe_log: Vec<ProbeLogEntry>,
    /// (arrival time, source) for every packet delivered to the victim.
    pub victim_deliveries: Vec<(SimTime, HostAddr)>,
    /// (arrival time, packet) for every mirrored copy the tap received.
    pub tap_log: Vec<(SimTime, Packet)>,
    /// Sliding-window statistics as of the final instant of the run.
    pub final_source_stats: BTreeMap<HostAddr, SourceStats>,
    pub first_full_at: Option<SimTime>,
    pub first_benign_refusal_at: Option<SimTime>,
    pub benign_success_total: u64,
    pub benign_refused_total: u64,
    pub benign_timed_out_total: u64,
    pub victim_counters: VictimCounters,
    pub switch_counters: SwitchCounters,
    pub engine_stats: Option<EngineStats>,
}

pub fn render_samples_csv(rows: &[SampleRow]) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(SAMPLES_HEADER);
    s.push('\n');
    for r in rows {
        let rtt = match r.probe_rtt_us {
            Some(us) => format!("{:.3}", us as f64 / 1000.0),
            None => String::new(),
        };
        s.push_str(&format!(
            "{},{},{},{:.4},{},{:.4},{},{}\n",
            r.t_s,
            rtt,
            r.probe_status,
            r.cpu_util,
            r.occupancy,
            r.benign_success_rate,
            r.blocked_count,
            r.packet_rate_pps
        ));
    }
    s
}

pub fn render_events_log(events: &[LogEvent]) -> String {
    let mut s = String::from("# time_s event details\n");
    for e in events {
        match e {
            LogEvent::Detect { at, class, attackers } => {
                let list: Vec<String> = attackers.iter().map(ToString::to_string).collect();
                s.push_str(&format!(
                    "{:.3} DETECT class={} attackers={}\n",
                    at.as_secs_f64(),
                    class,
                    list.join(",")
                ));
            }
            LogEvent::Block { at, addr, cause } => {
                s.push_str(&format!(
                    "{:.3} BLOCK addr={} cause={}\n",
                    at.as_secs_f64(),
                    addr,
                    cause
                ));
            }
            LogEvent::AllClear { at } => {
                s.push_str(&format!("{:.3} ALL_CLEAR\n", at.as_secs_f64()));
            }
        }
    }
    s
}

pub fn render_summary_json(summary: &Summary) -> String {
    let mut text = serde_json::to_string_pretty(summary).expect("summary serializes");
    text.push('\n');
    text
}

impl RunReport {
    /// Write samples.csv, events.log and summary.json into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("samples.csv"), render_samples_csv(&self.samples))?;
        fs::write(dir.join("events.log"), render_events_log(&self.events))?;
        fs::write(dir.join("summary.json"), render_summary_json(&self.summary))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_rows_render_exactly() {
        let rows = vec![
            SampleRow {
                t_s: 0,
                probe_rtt_us: None,
                probe_status: "none",
                cpu_util: 0.0,
                occupancy: 0,
                benign_success_rate: 1.0,
                blocked_count: 0,
                packet_rate_pps: 0,
            },
            SampleRow {
                t_s: 21,
                probe_rtt_us: Some(10_205),
                probe_status: "ok",
                cpu_util: 0.1234567,
                occupancy: 256,
                benign_success_rate: 0.5,
                blocked_count: 3,
                packet_rate_pps: 412,
            },
            SampleRow {
                t_s: 22,
                probe_rtt_us: None,
                probe_status: "timeout",
                cpu_util: 1.0,
                occupancy: 7,
                benign_success_rate: 0.0,
                blocked_count: 300,
                packet_rate_pps: 9,
            },
        ];
        let text = render_samples_csv(&rows);
        let expected = "time_s,probe_rtt_ms,probe_status,cpu_util,occupancy,benign_success_rate,blocked_count,packet_rate_pps\n\
                        0,,none,0.0000,0,1.0000,0,0\n\
                        21,10.205,ok,0.1235,256,0.5000,3,412\n\
                        22,,timeout,1.0000,7,0.0000,300,9\n";
        assert_eq!(text, expected);
    }

    #[test]
    fn event_lines_render_exactly() {
        let events = vec![
            LogEvent::Detect {
                at: SimTime::from_us(25_000_000),
                class: AttackClass::SynFlood,
                attackers: vec![HostAddr(0x0A02_0000), HostAddr(0x0A02_0001)],
            },
            LogEvent::Block {
                at: SimTime::from_us(25_001_000),
                addr: HostAddr(0x0A02_0000),
                cause: AttackClass::SynFlood,
            },
            LogEvent::AllClear { at: SimTime::from_us(61_000_000) },
        ];
        let text = render_events_log(&events);
        let expected = "# time_s event details\n\
                        25.000 DETECT class=syn_flood attackers=10.2.0.0,10.2.0.1\n\
                        25.001 BLOCK addr=10.2.0.0 cause=syn_flood\n\
                        61.000 ALL_CLEAR\n";
        assert_eq!(text, expected);
    }

    #[test]
    fn summary_serializes_nulls_and_values() {
        let s = Summary {
            time_to_detection_s: Some(5.0),
            time_to_mitigation_s: None,
            benign_success_before: Some(1.0),
            benign_success_during: Some(0.25),
            benign_success_after: None,
            peak_occupancy: 256,
            peak_cpu: 1.0,
        };
        let text = render_summary_json(&s);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["time_to_detection_s"], 5.0);
        assert!(v["time_to_mitigation_s"].is_null());
        assert_eq!(v["peak_occupancy"], 256);
        assert!(text.ends_with('\n'));
    }
}
