//! Run configuration: a flat `section.key = value` text format, its
//! canonical form and hash, and environment overrides.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! `attack.episode` may repeat; any other key may appear once. Unknown keys
//! are rejected.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{AttackEpisode, AttackWaveform, SensorConfig};
use crate::error::{Error, Result};
use crate::hierarchy::HierarchyConfig;
use crate::metrics::EnergyModel;
use crate::mitigation::{MitigationPolicy, PolicyKind};
use crate::physics::MtjParams;
use crate::trace::{SyntheticTraceSpec, Trace};

/// Prefix of environment variables that override config keys:
/// `STTSIM_LLC__READ_LATENCY=20` sets `llc.read_latency = 20`.
pub const ENV_PREFIX: &str = "STTSIM_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSettings {
    /// Replay this file instead of generating a trace.
    pub file: Option<PathBuf>,
    pub synthetic: SyntheticTraceSpec,
    pub seed: u64,
}

impl Default for TraceSettings {
    fn default() -> Self {
        TraceSettings {
            file: None,
            synthetic: SyntheticTraceSpec::default(),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckSettings {
    /// Full exclusivity scan every N requests; 0 disables it.
    pub exclusivity_interval: u64,
    /// Compare memory with the oracle after every checkpoint.
    pub memory_at_checkpoint: bool,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings {
            exclusivity_interval: 0,
            memory_at_checkpoint: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepProfile {
    /// Ramp to the peak, then hold it until the attack ends.
    #[default]
    RampHold,
    Step,
}

impl std::str::FromStr for SweepProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ramp_hold" => Ok(SweepProfile::RampHold),
            "step" => Ok(SweepProfile::Step),
            other => Err(Error::Config(format!("unknown sweep profile `{other}`"))),
        }
    }
}

impl std::fmt::Display for SweepProfile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepProfile::RampHold => "ramp_hold",
            SweepProfile::Step => "step",
        })
    }
}

/// Attack template and axis values used by sweeps. Durations and the start
/// point are percentages of the unattacked run's cycle count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub profile: SweepProfile,
    pub peak: f64,
    /// Ramp length in cycles; 0 derives it from `sensor.lead_cycles`.
    pub rise: u64,
    pub start_pct: f64,
    /// Attack length used by the policy and interval axes.
    pub duration_pct: f64,
    pub durations: Vec<f64>,
    pub policies: Vec<PolicyKind>,
    pub intervals: Vec<u64>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            profile: SweepProfile::RampHold,
            peak: 3.0,
            rise: 0,
            start_pct: 10.0,
            duration_pct: 50.0,
            durations: vec![0.0, 25.0, 50.0, 75.0, 100.0],
            policies: PolicyKind::ALL.to_vec(),
            intervals: vec![25_000, 50_000, 100_000, 200_000],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub clock_hz: f64,
    pub hierarchy: HierarchyConfig,
    pub policy: MitigationPolicy,
    /// Cycles to gang-invalidate a cache level.
    pub invalidate_cost: u64,
    pub mtj: MtjParams,
    /// `functional_threshold` always equals `mtj.critical_strength`.
    pub sensor: SensorConfig,
    pub attack: AttackWaveform,
    pub energy: EnergyModel,
    pub trace: TraceSettings,
    pub checks: CheckSettings,
    pub sweep: SweepSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mtj = MtjParams::default();
        RunConfig {
            seed: 1,
            clock_hz: 2e9,
            hierarchy: HierarchyConfig::default(),
            policy: MitigationPolicy::default(),
            invalidate_cost: 100,
            mtj,
            sensor: SensorConfig {
                functional_threshold: mtj.critical_strength,
                ..SensorConfig::default()
            },
            attack: AttackWaveform::none(),
            energy: EnergyModel::default(),
            trace: TraceSettings::default(),
            checks: CheckSettings::default(),
            sweep: SweepSettings::default(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{v}`: {e}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{v}`"))),
    }
}

/// Byte count with an optional K, M or G (binary) suffix.
fn size(key: &str, v: &str) -> Result<u64> {
    let (digits, mult) = match v.as_bytes().last() {
        Some(b'K' | b'k') => (&v[..v.len() - 1], 1u64 << 10),
        Some(b'M' | b'm') => (&v[..v.len() - 1], 1 << 20),
        Some(b'G' | b'g') => (&v[..v.len() - 1], 1 << 30),
        _ => (v, 1),
    };
    num::<u64>(key, digits.trim())?
        .checked_mul(mult)
        .ok_or_else(|| Error::Config(format!("{key}: `{v}` overflows")))
}

/// `inf` or a cycle count.
fn interval(key: &str, v: &str) -> Result<u64> {
    if v == "inf" {
        Ok(u64::MAX)
    } else {
        num(key, v)
    }
}

fn show_interval(v: u64) -> String {
    if v == u64::MAX {
        "inf".into()
    } else {
        v.to_string()
    }
}

fn list<T>(key: &str, v: &str, f: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| f(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        let mut episodes = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "attack.episode" {
                episodes.push(value.parse::<AttackEpisode>()?);
                continue;
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` set twice", lineno + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.attack = AttackWaveform::new(episodes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key. `attack.episode` takes `;`-separated episodes and
    /// replaces the whole waveform.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let h = &mut self.hierarchy;
        let k = key;
        match key {
            "sim.seed" => self.seed = num(k, v)?,
            "sim.clock_hz" => self.clock_hz = num(k, v)?,
            "policy.kind" => self.policy.kind = v.parse()?,
            "checkpoint.interval" => self.policy.checkpoint_interval = interval(k, v)?,
            "checkpoint.adaptive" => self.policy.adaptive_interval = boolean(k, v)?,
            "checkpoint.register_save_cost" => self.policy.register_save_cost = num(k, v)?,
            "checkpoint.rollback_cost" => self.policy.rollback_cost = num(k, v)?,
            "checkpoint.commit_mode" => self.policy.commit_mode = v.parse()?,
            "bypass.allow_fills" => self.policy.allow_fills = boolean(k, v)?,
            "l1.size" => h.l1.capacity = size(k, v)?,
            "l1.ways" => h.l1.ways = num(k, v)?,
            "l1.line" => h.l1.line_size = num(k, v)?,
            "l1.read_latency" => h.l1.read_latency = num(k, v)?,
            "l1.write_latency" => h.l1.write_latency = num(k, v)?,
            "l2.size" => h.l2.capacity = size(k, v)?,
            "l2.ways" => h.l2.ways = num(k, v)?,
            "l2.line" => h.l2.line_size = num(k, v)?,
            "l2.read_latency" => h.l2.read_latency = num(k, v)?,
            "l2.write_latency" => h.l2.write_latency = num(k, v)?,
            "llc.enabled" => h.llc_enabled = boolean(k, v)?,
            "llc.size" => h.llc.capacity = size(k, v)?,
            "llc.ways" => h.llc.ways = num(k, v)?,
            "llc.line" => h.llc.line_size = num(k, v)?,
            "llc.read_latency" => h.llc.read_latency = num(k, v)?,
            "llc.write_latency" => h.llc.write_latency = num(k, v)?,
            "llc.banks" => h.llc.banks = num(k, v)?,
            "llc.write_buffer" => h.llc.write_buffer_entries = num(k, v)?,
            "llc.lookup" => h.lookup = v.parse()?,
            "llc.invalidate_cost" => self.invalidate_cost = num(k, v)?,
            "mem.latency" => h.mem_latency = num(k, v)?,
            "mem.write_cost" => h.mem_write_cost = num(k, v)?,
            "mtj.c" => self.mtj.fit_constant = num(k, v)?,
            "mtj.k" => self.mtj.fit_exponent = num(k, v)?,
            "mtj.e" => self.mtj.energy_barrier = num(k, v)?,
            "mtj.kb" => self.mtj.boltzmann = num(k, v)?,
            "mtj.t" => self.mtj.nominal_temperature = num(k, v)?,
            "mtj.critical_strength" => {
                self.mtj.critical_strength = num(k, v)?;
                self.sensor.functional_threshold = self.mtj.critical_strength;
            }
            "sensor.threshold" => self.sensor.sensor_threshold = num(k, v)?,
            "sensor.sample_interval" => self.sensor.sample_interval = num(k, v)?,
            "sensor.lead_cycles" => self.sensor.lead_cycles = num(k, v)?,
            "attack.episode" => {
                let eps = v
                    .split(';')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<Vec<AttackEpisode>>>()?;
                self.attack = AttackWaveform::new(eps)?;
            }
            "energy.l1" => self.energy.l1_access = num(k, v)?,
            "energy.l2" => self.energy.l2_access = num(k, v)?,
            "energy.llc_read" => self.energy.llc_read = num(k, v)?,
            "energy.llc_write" => self.energy.llc_write = num(k, v)?,
            "energy.mem" => self.energy.mem_access = num(k, v)?,
            "energy.buffer_op" => self.energy.buffer_op = num(k, v)?,
            "energy.checkpoint" => self.energy.checkpoint = num(k, v)?,
            "trace.file" => self.trace.file = (!v.is_empty()).then(|| PathBuf::from(v)),
            "trace.length" => self.trace.synthetic.length = num(k, v)?,
            "trace.working_set" => self.trace.synthetic.working_set = size(k, v)?,
            "trace.alpha" => self.trace.synthetic.locality_alpha = num(k, v)?,
            "trace.write_fraction" => self.trace.synthetic.write_fraction = num(k, v)?,
            "trace.stride_mix" => self.trace.synthetic.stride_mix = num(k, v)?,
            "trace.seed" => self.trace.seed = num(k, v)?,
            "check.exclusivity_interval" => self.checks.exclusivity_interval = num(k, v)?,
            "check.memory_at_checkpoint" => self.checks.memory_at_checkpoint = boolean(k, v)?,
            "sweep.profile" => self.sweep.profile = v.parse()?,
            "sweep.peak" => self.sweep.peak = num(k, v)?,
            "sweep.rise" => self.sweep.rise = num(k, v)?,
            "sweep.start" => self.sweep.start_pct = num(k, v)?,
            "sweep.duration" => self.sweep.duration_pct = num(k, v)?,
            "sweep.durations" => self.sweep.durations = list(k, v, num)?,
            "sweep.policies" => self.sweep.policies = list(k, v, |_, s| s.parse())?,
            "sweep.intervals" => self.sweep.intervals = list(k, v, interval)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in canonical (sorted) order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let h = &self.hierarchy;
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        put("sim.seed", self.seed.to_string());
        put("sim.clock_hz", format!("{:?}", self.clock_hz));
        put("policy.kind", self.policy.kind.to_string());
        put("checkpoint.interval", show_interval(self.policy.checkpoint_interval));
        put("checkpoint.adaptive", self.policy.adaptive_interval.to_string());
        put("checkpoint.register_save_cost", self.policy.register_save_cost.to_string());
        put("checkpoint.rollback_cost", self.policy.rollback_cost.to_string());
        put("checkpoint.commit_mode", self.policy.commit_mode.to_string());
        put("bypass.allow_fills", self.policy.allow_fills.to_string());
        for (name, g) in [("l1", &h.l1), ("l2", &h.l2), ("llc", &h.llc)] {
            put(&format!("{name}.size"), g.capacity.to_string());
            put(&format!("{name}.ways"), g.ways.to_string());
            put(&format!("{name}.line"), g.line_size.to_string());
            put(&format!("{name}.read_latency"), g.read_latency.to_string());
            put(&format!("{name}.write_latency"), g.write_latency.to_string());
        }
        put("llc.enabled", h.llc_enabled.to_string());
        put("llc.banks", h.llc.banks.to_string());
        put("llc.write_buffer", h.llc.write_buffer_entries.to_string());
        put("llc.lookup", h.lookup.to_string());
        put("llc.invalidate_cost", self.invalidate_cost.to_string());
        put("mem.latency", h.mem_latency.to_string());
        put("mem.write_cost", h.mem_write_cost.to_string());
        put("mtj.c", format!("{:?}", self.mtj.fit_constant));
        put("mtj.k", format!("{:?}", self.mtj.fit_exponent));
        put("mtj.e", format!("{:?}", self.mtj.energy_barrier));
        put("mtj.kb", format!("{:?}", self.mtj.boltzmann));
        put("mtj.t", format!("{:?}", self.mtj.nominal_temperature));
        put("mtj.critical_strength", format!("{:?}", self.mtj.critical_strength));
        put("sensor.threshold", format!("{:?}", self.sensor.sensor_threshold));
        put("sensor.sample_interval", self.sensor.sample_interval.to_string());
        put("sensor.lead_cycles", self.sensor.lead_cycles.to_string());
        for e in self.attack.episodes() {
            put("attack.episode", e.to_config_value());
        }
        let en = &self.energy;
        put("energy.l1", format!("{:?}", en.l1_access));
        put("energy.l2", format!("{:?}", en.l2_access));
        put("energy.llc_read", format!("{:?}", en.llc_read));
        put("energy.llc_write", format!("{:?}", en.llc_write));
        put("energy.mem", format!("{:?}", en.mem_access));
        put("energy.buffer_op", format!("{:?}", en.buffer_op));
        put("energy.checkpoint", format!("{:?}", en.checkpoint));
        if let Some(f) = &self.trace.file {
            put("trace.file", f.display().to_string());
        }
        let t = &self.trace.synthetic;
        put("trace.length", t.length.to_string());
        put("trace.working_set", t.working_set.to_string());
        put("trace.alpha", format!("{:?}", t.locality_alpha));
        put("trace.write_fraction", format!("{:?}", t.write_fraction));
        put("trace.stride_mix", format!("{:?}", t.stride_mix));
        put("trace.seed", self.trace.seed.to_string());
        put("check.exclusivity_interval", self.checks.exclusivity_interval.to_string());
        put("check.memory_at_checkpoint", self.checks.memory_at_checkpoint.to_string());
        let s = &self.sweep;
        put("sweep.profile", s.profile.to_string());
        put("sweep.peak", format!("{:?}", s.peak));
        put("sweep.rise", s.rise.to_string());
        put("sweep.start", format!("{:?}", s.start_pct));
        put("sweep.duration", format!("{:?}", s.duration_pct));
        put("sweep.durations", join(&s.durations));
        put("sweep.policies", join(&s.policies));
        put(
            "sweep.intervals",
            s.intervals.iter().map(|&v| show_interval(v)).collect::<Vec<_>>().join(","),
        );
        // Stable sort keeps episodes in waveform order.
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        hex::encode(&digest[..8])
    }

    /// Applies `STTSIM_*` overrides. Double underscores separate the section
    /// from the key: `STTSIM_POLICY__KIND=bypass`.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut pairs: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                let rest = k.as_ref().strip_prefix(ENV_PREFIX)?;
                Some((rest.to_lowercase().replace("__", "."), v.as_ref().to_string()))
            })
            .collect();
        pairs.sort();
        for (key, value) in pairs {
            self.set(&key, value.trim())
                .map_err(|e| Error::Config(format!("{ENV_PREFIX} override: {e}")))?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.hierarchy.validate()?;
        self.policy.validate()?;
        self.mtj.validate()?;
        self.sensor.validate()?;
        self.energy.validate()?;
        if (self.sensor.functional_threshold - self.mtj.critical_strength).abs() > 0.0 {
            return Err(Error::Config(
                "sensor functional threshold must equal mtj.critical_strength".into(),
            ));
        }
        if !(self.clock_hz > 0.0 && self.clock_hz.is_finite()) {
            return Err(Error::Config("sim.clock_hz must be positive".into()));
        }
        if self.policy.kind == PolicyKind::CheckpointBypass
            && (self.hierarchy.llc.write_buffer_entries as usize)
                < crate::hierarchy::BUFFER_HEADROOM
        {
            return Err(Error::Config(format!(
                "checkpoint_bypass needs llc.write_buffer >= {}",
                crate::hierarchy::BUFFER_HEADROOM
            )));
        }
        let s = &self.sweep;
        if !(s.peak > 0.0 && s.peak.is_finite()) {
            return Err(Error::Config("sweep.peak must be positive".into()));
        }
        if s.durations.iter().chain([&s.duration_pct, &s.start_pct]).any(|d| !(0.0..=100.0).contains(d)) {
            return Err(Error::Config("sweep percentages must be in [0, 100]".into()));
        }
        if s.intervals.contains(&0) {
            return Err(Error::Config("sweep.intervals must be >= 1".into()));
        }
        Ok(())
    }

    /// The trace this config names: the file if set, otherwise the
    /// synthetic generator.
    pub fn load_trace(&self) -> Result<Trace> {
        match &self.trace.file {
            Some(path) => Trace::load(path),
            None => self.trace.synthetic.generate(self.trace.seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::Profile;

    #[test]
    fn empty_text_is_the_default() {
        assert_eq!(RunConfig::parse("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("policy.kind", "checkpoint_bypass").unwrap();
        cfg.set("checkpoint.interval", "inf").unwrap();
        cfg.set("attack.episode", "100,900,ramp,3.5; 1000,2000,step,2.5").unwrap();
        cfg.set("trace.file", "traces/a.trace").unwrap();
        cfg.set("mtj.e", "2.5e-19").unwrap();
        let text = cfg.canonical_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);
    }

    #[test]
    fn hash_changes_with_any_field() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.set("llc.read_latency", "18").unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("llc.red_latency = 3"), Err(Error::Config(_))));
        assert!(RunConfig::parse("sim.seed = 1\nsim.seed = 2").is_err());
        assert!(RunConfig::parse("just words").is_err());
    }

    #[test]
    fn sizes_accept_binary_suffixes() {
        let cfg = RunConfig::parse("llc.size = 8M\nl1.size = 16K").unwrap();
        assert_eq!(cfg.hierarchy.llc.capacity, 8 << 20);
        assert_eq!(cfg.hierarchy.l1.capacity, 16 << 10);
    }

    #[test]
    fn episodes_accumulate_in_order() {
        let cfg = RunConfig::parse(
            "attack.episode = 100,200,step,2.5\nattack.episode = 300,400,ramp,3",
        )
        .unwrap();
        assert_eq!(cfg.attack.episodes().len(), 2);
        assert_eq!(cfg.attack.episodes()[1].profile, Profile::Ramp);
        assert!(RunConfig::parse("attack.episode = 300,400,ramp,3\nattack.episode = 350,500,step,2").is_err());
    }

    #[test]
    fn env_overrides_map_to_keys() {
        let mut cfg = RunConfig::default();
        cfg.apply_env([
            ("STTSIM_POLICY__KIND", "bypass"),
            ("STTSIM_LLC__READ_LATENCY", "20"),
            ("HOME", "/root"),
        ])
        .unwrap();
        assert_eq!(cfg.policy.kind, PolicyKind::Bypass);
        assert_eq!(cfg.hierarchy.llc.read_latency, 20);
        assert!(cfg.apply_env([("STTSIM_NOPE__X", "1")]).is_err());
    }

    #[test]
    fn critical_strength_drives_functional_threshold() {
        let cfg = RunConfig::parse("mtj.critical_strength = 3").unwrap();
        assert_eq!(cfg.sensor.functional_threshold, 3.0);
        assert!(RunConfig::parse("mtj.critical_strength = 0.5").is_err());
    }

    #[test]
    fn checkpointing_needs_a_two_entry_buffer() {
        assert!(RunConfig::parse("policy.kind = checkpoint_bypass\nllc.write_buffer = 1").is_err());
        assert!(RunConfig::parse("policy.kind = bypass\nllc.write_buffer = 1").is_ok());
    }
}
