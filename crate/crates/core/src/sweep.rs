//! Parameter sweeps: batches of independent runs against a shared baseline.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::{AttackEpisode, AttackWaveform, Profile};
use crate::config::{RunConfig, SweepProfile};
use crate::engine::simulate;
use crate::error::{Error, Result};
use crate::metrics::{
    energy_overhead, finish_csv, normalized_slowdown, SimReport, REPORT_CSV_COLUMNS,
};
use crate::mitigation::PolicyKind;
use crate::trace::Trace;

/// End cycle of an attack that lasts for the rest of the run.
pub const UNTIL_END: u64 = u64::MAX / 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    AttackDuration,
    Policy,
    CheckpointInterval,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::AttackDuration => "attack_duration",
            Axis::Policy => "policy",
            Axis::CheckpointInterval => "checkpoint_interval",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attack_duration" => Ok(Axis::AttackDuration),
            "policy" => Ok(Axis::Policy),
            "checkpoint_interval" => Ok(Axis::CheckpointInterval),
            other => Err(Error::Config(format!(
                "unknown sweep axis `{other}` (attack_duration, policy, checkpoint_interval)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Rayon thread pool; falls back to sequential without the `parallel`
    /// feature.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Maps `f` over independent jobs. Output order matches input order either
/// way, and each run is deterministic, so both modes give identical results.
pub fn map_jobs<T, R, F>(jobs: Vec<T>, exec: Execution, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            jobs.into_par_iter().map(f).collect()
        }
        _ => jobs.into_iter().map(f).collect(),
    }
}

/// Runs every config over the same trace.
pub fn run_batch(configs: Vec<RunConfig>, trace: &Trace, exec: Execution) -> Vec<Result<SimReport>> {
    map_jobs(configs, exec, |cfg| simulate(&cfg, trace))
}

/// The unprotected, unattacked run every sweep point is normalized to.
pub fn baseline_config(cfg: &RunConfig) -> RunConfig {
    let mut b = cfg.clone();
    b.policy.kind = PolicyKind::None;
    b.attack = AttackWaveform::none();
    b
}

/// Baseline reports keyed by (baseline config hash, trace id).
#[derive(Debug, Default)]
pub struct BaselineCache {
    runs: HashMap<(String, String), SimReport>,
}

impl BaselineCache {
    pub fn get_or_run(&mut self, cfg: &RunConfig, trace: &Trace) -> Result<SimReport> {
        let b = baseline_config(cfg);
        let key = (b.hash(), trace.id());
        if let Some(r) = self.runs.get(&key) {
            return Ok(r.clone());
        }
        let r = simulate(&b, trace)?;
        self.runs.insert(key, r.clone());
        Ok(r)
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }
}

/// Ramp length that gives ramps exactly `sensor.lead_cycles` of warning.
pub fn derived_rise(cfg: &RunConfig) -> u64 {
    if cfg.sweep.rise > 0 {
        return cfg.sweep.rise;
    }
    let gap = cfg.sensor.functional_threshold - cfg.sensor.sensor_threshold;
    (cfg.sensor.lead_cycles as f64 * cfg.sweep.peak / gap).ceil() as u64
}

/// The sweep attack covering `pct` percent of a run of `baseline_cycles`.
/// 100% lasts until the run ends, however long mitigation makes it.
pub fn attack_for(cfg: &RunConfig, pct: f64, baseline_cycles: u64) -> Result<AttackWaveform> {
    if pct <= 0.0 {
        return Ok(AttackWaveform::none());
    }
    let b = baseline_cycles as f64;
    let start = (cfg.sweep.start_pct / 100.0 * b).round() as u64;
    let end = if pct >= 100.0 {
        UNTIL_END
    } else {
        start + ((pct / 100.0 * b).round() as u64).max(1)
    };
    let peak = cfg.sweep.peak;
    let episodes = match cfg.sweep.profile {
        SweepProfile::Step => vec![AttackEpisode::new(start, end, Profile::Step, peak)],
        SweepProfile::RampHold => {
            let rise = derived_rise(cfg).max(1);
            if end - start <= rise {
                let reached = peak * (end - start) as f64 / rise as f64;
                vec![AttackEpisode::new(start, end, Profile::Ramp, reached)]
            } else {
                vec![
                    AttackEpisode::new(start, start + rise, Profile::Ramp, peak),
                    AttackEpisode::new(start + rise + 1, end, Profile::Step, peak),
                ]
            }
        }
    };
    AttackWaveform::new(episodes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis: Axis,
    pub value: String,
    pub slowdown: f64,
    pub energy_overhead: f64,
    pub report: SimReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub baseline: SimReport,
    pub points: Vec<SweepPoint>,
}

/// Labeled configurations for every value on `axis`.
pub fn sweep_configs(
    cfg: &RunConfig,
    axis: Axis,
    baseline_cycles: u64,
) -> Result<Vec<(String, RunConfig)>> {
    let s = &cfg.sweep;
    let with = |f: &dyn Fn(&mut RunConfig)| -> RunConfig {
        let mut c = cfg.clone();
        f(&mut c);
        c
    };
    let fixed_attack = attack_for(cfg, s.duration_pct, baseline_cycles)?;
    let out = match axis {
        Axis::AttackDuration => s
            .durations
            .iter()
            .map(|&pct| {
                let attack = attack_for(cfg, pct, baseline_cycles)?;
                Ok((format!("{pct}"), with(&|c| c.attack = attack.clone())))
            })
            .collect::<Result<Vec<_>>>()?,
        Axis::Policy => s
            .policies
            .iter()
            .map(|&p| {
                (
                    p.to_string(),
                    with(&|c| {
                        c.policy.kind = p;
                        c.attack = fixed_attack.clone();
                    }),
                )
            })
            .collect(),
        Axis::CheckpointInterval => s
            .intervals
            .iter()
            .map(|&i| {
                (
                    if i == u64::MAX { "inf".to_string() } else { i.to_string() },
                    with(&|c| {
                        c.policy.kind = PolicyKind::CheckpointBypass;
                        c.policy.checkpoint_interval = i;
                        c.attack = fixed_attack.clone();
                    }),
                )
            })
            .collect(),
    };
    if out.is_empty() {
        return Err(Error::Config(format!("sweep axis `{axis}` has no values")));
    }
    for (_, c) in &out {
        c.validate()?;
    }
    Ok(out)
}

pub fn run_sweep(cfg: &RunConfig, trace: &Trace, axis: Axis, exec: Execution) -> Result<SweepResult> {
    let baseline = BaselineCache::default().get_or_run(cfg, trace)?;
    let jobs = sweep_configs(cfg, axis, baseline.cycles.total)?;
    let reports = map_jobs(jobs, exec, |(label, c)| simulate(&c, trace).map(|r| (label, r)));
    let mut points = Vec::with_capacity(reports.len());
    for r in reports {
        let (value, report) = r?;
        points.push(SweepPoint {
            axis,
            value,
            slowdown: normalized_slowdown(&report, &baseline)?,
            energy_overhead: energy_overhead(&report, &baseline)?,
            report,
        });
    }
    Ok(SweepResult { baseline, points })
}

impl SweepResult {
    /// A baseline row, then one row per point: axis and value, the
    /// single-run report columns, then slowdown and energy overhead against
    /// the baseline.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<&str> = ["axis", "value"]
            .into_iter()
            .chain(REPORT_CSV_COLUMNS.iter().copied())
            .chain(["slowdown", "energy_overhead"])
            .collect();
        w.write_record(&header).map_err(|e| Error::Report(e.to_string()))?;
        let base = SweepPoint {
            axis: Axis::AttackDuration,
            value: "baseline".into(),
            slowdown: 1.0,
            energy_overhead: 0.0,
            report: self.baseline.clone(),
        };
        for p in std::iter::once(&base).chain(&self.points) {
            let axis = if p.value == "baseline" { "baseline".to_string() } else { p.axis.to_string() };
            let row: Vec<String> = [axis, p.value.clone()]
                .into_iter()
                .chain(p.report.csv_values())
                .chain([p.slowdown.to_string(), p.energy_overhead.to_string()])
                .collect();
            w.write_record(&row).map_err(|e| Error::Report(e.to_string()))?;
        }
        finish_csv(w)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Report(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names_round_trip() {
        for a in [Axis::AttackDuration, Axis::Policy, Axis::CheckpointInterval] {
            assert_eq!(a.to_string().parse::<Axis>().unwrap(), a);
        }
        assert!("voltage".parse::<Axis>().is_err());
    }

    #[test]
    fn derived_rise_grants_the_configured_lead() {
        let cfg = RunConfig::default();
        let rise = derived_rise(&cfg);
        let w = attack_for(&cfg, 50.0, 10 * rise).unwrap();
        let lead = crate::attack::detection_lead(&cfg.sensor, &w, 0).unwrap().unwrap();
        let interval = cfg.sensor.sample_interval;
        assert!(lead + interval >= cfg.sensor.lead_cycles && lead <= cfg.sensor.lead_cycles);
    }

    #[test]
    fn attack_template_shapes() {
        let cfg = RunConfig::default();
        assert!(attack_for(&cfg, 0.0, 1_000_000).unwrap().is_empty());
        let full = attack_for(&cfg, 100.0, 1_000_000).unwrap();
        assert_eq!(full.episodes().last().unwrap().end_cycle, UNTIL_END);
        let short = attack_for(&cfg, 1.0, 1_000_000).unwrap();
        assert_eq!(short.episodes().len(), 1);
        assert_eq!(short.episodes()[0].profile, Profile::Ramp);
        assert!(short.episodes()[0].peak_strength < cfg.sweep.peak);
    }

    #[test]
    fn map_jobs_preserves_order_in_both_modes() {
        let jobs: Vec<u64> = (0..64).collect();
        let seq = map_jobs(jobs.clone(), Execution::Sequential, |x| x * x);
        let par = map_jobs(jobs, Execution::Parallel, |x| x * x);
        assert_eq!(seq, par);
        assert_eq!(seq[9], 81);
    }
}
