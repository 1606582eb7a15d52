//! Run statistics, the linear energy model, and report serialization.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Energy per event, arbitrary units. Only the ordering matters: STTRAM
/// writes cost more than reads, which cost more than SRAM accesses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    pub l1_access: f64,
    pub l2_access: f64,
    pub llc_read: f64,
    pub llc_write: f64,
    pub mem_access: f64,
    pub buffer_op: f64,
    pub checkpoint: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel {
            l1_access: 1.0,
            l2_access: 2.0,
            llc_read: 3.0,
            llc_write: 8.0,
            mem_access: 20.0,
            buffer_op: 1.0,
            checkpoint: 50.0,
        }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.components() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("energy.{name} must be >= 0, got {v}")));
            }
        }
        if self.llc_write < self.llc_read {
            return Err(Error::Config(
                "energy.llc_write must be >= energy.llc_read".into(),
            ));
        }
        Ok(())
    }

    fn components(&self) -> [(&'static str, f64); 7] {
        [
            ("l1", self.l1_access),
            ("l2", self.l2_access),
            ("llc_read", self.llc_read),
            ("llc_write", self.llc_write),
            ("mem", self.mem_access),
            ("buffer_op", self.buffer_op),
            ("checkpoint", self.checkpoint),
        ]
    }

    pub fn by_component(&self, events: &EventCounts) -> BTreeMap<String, f64> {
        self.components()
            .iter()
            .zip(events.as_array())
            .map(|(&(name, w), n)| (name.to_string(), w * n as f64))
            .collect()
    }

    /// Dot product of event counts and per-event energies.
    pub fn energy(&self, events: &EventCounts) -> f64 {
        self.components()
            .iter()
            .zip(events.as_array())
            .map(|(&(_, w), n)| w * n as f64)
            .sum()
    }
}

/// Energy-bearing event counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    pub l1_access: u64,
    pub l2_access: u64,
    pub llc_read: u64,
    pub llc_write: u64,
    pub mem_access: u64,
    pub buffer_op: u64,
    pub checkpoint: u64,
}

impl EventCounts {
    pub fn as_array(&self) -> [u64; 7] {
        [
            self.l1_access,
            self.l2_access,
            self.llc_read,
            self.llc_write,
            self.mem_access,
            self.buffer_op,
            self.checkpoint,
        ]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleBreakdown {
    pub total: u64,
    /// Request latencies, including requests later discarded by a rollback.
    pub access: u64,
    /// Processor halted by the stall policy.
    pub stall: u64,
    pub flush: u64,
    pub invalidate: u64,
    /// Write-back, register save, and alignment to the sensor sample.
    pub checkpoint: u64,
    /// Pipeline flush on rollback.
    pub rollback: u64,
}

impl CycleBreakdown {
    pub fn sum_of_parts(&self) -> u64 {
        self.access + self.stall + self.flush + self.invalidate + self.checkpoint + self.rollback
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelStats {
    pub l1_hits: u64,
    pub l1_misses: u64,
    pub l2_hits: u64,
    pub l2_misses: u64,
    pub llc_hits: u64,
    pub llc_misses: u64,
    /// Requests that reached the LLC stage while BP was asserted.
    pub llc_forced_misses: u64,
    pub buffer_forwards: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventSummary {
    pub requests_executed: u64,
    pub useful_requests: u64,
    pub re_executed_requests: u64,
    #[serde(flatten)]
    pub levels: LevelStats,
    pub flushes: u64,
    pub flushed_lines: u64,
    pub invalidations: u64,
    pub checkpoints: u64,
    pub forced_checkpoints: u64,
    pub rollbacks: u64,
    pub memory_writes: u64,
    pub poisoned_lines_observed: u64,
    /// Corrupted reads that happened inside an epoch later rolled back.
    pub discarded_corrupted_reads: u64,
    pub energy_events: EventCounts,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub episodes: Vec<String>,
    pub assertions: u64,
    pub gradual_detections: u64,
    pub sudden_detections: u64,
    /// Stall policy met a sudden attack: dirty data could not be saved.
    pub restart_required: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergySummary {
    pub total: f64,
    pub by_component: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config_hash: String,
    pub seed: u64,
    pub policy: String,
    pub trace_id: String,
    pub attack: AttackSummary,
    pub cycles: CycleBreakdown,
    pub events: EventSummary,
    pub energy: EnergySummary,
    pub corrupted_reads: u64,
    /// Canonical config text; re-running it reproduces this report.
    pub config: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

/// Column order of the single-run CSV document.
pub const REPORT_CSV_COLUMNS: &[&str] = &[
    "config_hash",
    "seed",
    "policy",
    "trace_id",
    "total_cycles",
    "access_cycles",
    "stall_cycles",
    "flush_cycles",
    "invalidate_cycles",
    "checkpoint_cycles",
    "rollback_cycles",
    "requests_executed",
    "useful_requests",
    "re_executed_requests",
    "l1_hits",
    "l1_misses",
    "l2_hits",
    "l2_misses",
    "llc_hits",
    "llc_misses",
    "llc_forced_misses",
    "flushes",
    "invalidations",
    "checkpoints",
    "forced_checkpoints",
    "rollbacks",
    "attack_assertions",
    "corrupted_reads",
    "energy_total",
];

impl SimReport {
    pub fn csv_values(&self) -> Vec<String> {
        let e = &self.events;
        let c = &self.cycles;
        vec![
            self.config_hash.clone(),
            self.seed.to_string(),
            self.policy.clone(),
            self.trace_id.clone(),
            c.total.to_string(),
            c.access.to_string(),
            c.stall.to_string(),
            c.flush.to_string(),
            c.invalidate.to_string(),
            c.checkpoint.to_string(),
            c.rollback.to_string(),
            e.requests_executed.to_string(),
            e.useful_requests.to_string(),
            e.re_executed_requests.to_string(),
            e.levels.l1_hits.to_string(),
            e.levels.l1_misses.to_string(),
            e.levels.l2_hits.to_string(),
            e.levels.l2_misses.to_string(),
            e.levels.llc_hits.to_string(),
            e.levels.llc_misses.to_string(),
            e.levels.llc_forced_misses.to_string(),
            e.flushes.to_string(),
            e.invalidations.to_string(),
            e.checkpoints.to_string(),
            e.forced_checkpoints.to_string(),
            e.rollbacks.to_string(),
            self.attack.assertions.to_string(),
            self.corrupted_reads.to_string(),
            self.energy.total.to_string(),
        ]
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Report(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Report(e.to_string()))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_CSV_COLUMNS)
            .and_then(|_| w.write_record(self.csv_values()))
            .map_err(|e| Error::Report(e.to_string()))?;
        finish_csv(w)
    }
}

pub(crate) fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
}

pub fn emit_report(report: &SimReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => report.to_json(),
        ReportFormat::Csv => report.to_csv(),
    }
}

pub fn write_report(report: &SimReport, format: ReportFormat, path: &Path) -> Result<()> {
    let doc = emit_report(report, format)?;
    fs::write(path, doc).map_err(|source| Error::ReportWrite {
        path: path.to_path_buf(),
        source,
    })
}

fn same_trace(report: &SimReport, baseline: &SimReport) -> Result<()> {
    if report.trace_id != baseline.trace_id {
        return Err(Error::TraceMismatch(
            report.trace_id.clone(),
            baseline.trace_id.clone(),
        ));
    }
    Ok(())
}

/// Cycle ratio against a baseline run of the same trace (inverse of the
/// normalized IPC).
pub fn normalized_slowdown(report: &SimReport, baseline: &SimReport) -> Result<f64> {
    same_trace(report, baseline)?;
    match (report.cycles.total, baseline.cycles.total) {
        (0, 0) => Ok(1.0),
        (_, 0) => Err(Error::Report("baseline ran for zero cycles".into())),
        (r, b) => Ok(r as f64 / b as f64),
    }
}

/// Relative energy change against a baseline; negative when the run used
/// less energy.
pub fn energy_overhead(report: &SimReport, baseline: &SimReport) -> Result<f64> {
    same_trace(report, baseline)?;
    let (r, b) = (report.energy.total, baseline.energy.total);
    if b == 0.0 {
        return if r == 0.0 {
            Ok(0.0)
        } else {
            Err(Error::Report("baseline used zero energy".into()))
        };
    }
    Ok(r / b - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SimReport {
        let events = EventCounts {
            l1_access: 10,
            l2_access: 4,
            llc_read: 2,
            llc_write: 1,
            mem_access: 3,
            buffer_op: 2,
            checkpoint: 1,
        };
        let model = EnergyModel::default();
        SimReport {
            config_hash: "abc".into(),
            seed: 7,
            policy: "bypass".into(),
            trace_id: "t1".into(),
            cycles: CycleBreakdown {
                total: 500,
                access: 400,
                flush: 100,
                ..Default::default()
            },
            events: EventSummary {
                requests_executed: 12,
                useful_requests: 12,
                energy_events: events,
                ..Default::default()
            },
            energy: EnergySummary {
                total: model.energy(&events),
                by_component: model.by_component(&events),
            },
            ..Default::default()
        }
    }

    #[test]
    fn energy_is_dot_product() {
        let r = sample();
        // 10*1 + 4*2 + 2*3 + 1*8 + 3*20 + 2*1 + 1*50
        assert_eq!(r.energy.total, 144.0);
        assert_eq!(r.energy.by_component.values().sum::<f64>(), 144.0);
    }

    #[test]
    fn energy_model_rejects_cheap_writes() {
        let m = EnergyModel {
            llc_write: 1.0,
            ..Default::default()
        };
        assert!(m.validate().is_err());
        assert!(EnergyModel::default().validate().is_ok());
    }

    #[test]
    fn identical_runs_have_unit_slowdown_and_zero_overhead() {
        let r = sample();
        assert_eq!(normalized_slowdown(&r, &r).unwrap(), 1.0);
        assert_eq!(energy_overhead(&r, &r).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_traces_are_rejected() {
        let a = sample();
        let mut b = sample();
        b.trace_id = "other".into();
        assert!(matches!(normalized_slowdown(&a, &b), Err(Error::TraceMismatch(..))));
        assert!(matches!(energy_overhead(&a, &b), Err(Error::TraceMismatch(..))));
    }

    #[test]
    fn json_round_trip() {
        let r = sample();
        let text = emit_report(&r, ReportFormat::Json).unwrap();
        assert_eq!(SimReport::from_json(&text).unwrap(), r);
        assert_eq!(text, emit_report(&r, ReportFormat::Json).unwrap());
    }

    #[test]
    fn json_top_level_keys_are_stable() {
        let v: serde_json::Value = serde_json::from_str(&sample().to_json().unwrap()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(
            keys,
            vec![
                "attack",
                "config",
                "config_hash",
                "corrupted_reads",
                "cycles",
                "energy",
                "events",
                "policy",
                "seed",
                "trace_id"
            ]
        );
    }

    #[test]
    fn csv_header_matches_documented_schema() {
        let text = sample().to_csv().unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(
            header,
            "config_hash,seed,policy,trace_id,total_cycles,access_cycles,stall_cycles,\
             flush_cycles,invalidate_cycles,checkpoint_cycles,rollback_cycles,\
             requests_executed,useful_requests,re_executed_requests,l1_hits,l1_misses,\
             l2_hits,l2_misses,llc_hits,llc_misses,llc_forced_misses,flushes,invalidations,\
             checkpoints,forced_checkpoints,rollbacks,attack_assertions,corrupted_reads,\
             energy_total"
        );
        assert_eq!(text.lines().count(), 2);
        assert_eq!(sample().csv_values().len(), REPORT_CSV_COLUMNS.len());
    }

    #[test]
    fn write_failure_is_a_report_write_error() {
        let err = write_report(
            &sample(),
            ReportFormat::Json,
            Path::new("/nonexistent-dir/x/report.json"),
        )
        .unwrap_err();
        assert!(matches!(err, Error::ReportWrite { .. }));
    }
}
