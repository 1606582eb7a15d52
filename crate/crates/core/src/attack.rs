//! Attack waveforms and the sensor array that watches them.
//!
//! Strength is in normalized units: the sensor cells fail at
//! `sensor_threshold` (1.0 by convention), the functional bits at the MTJ
//! `critical_strength`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physics::MtjParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Linear rise from zero at `start_cycle` to the peak at `end_cycle`.
    Ramp,
    /// Peak strength for the whole episode.
    Step,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Ramp => "ramp",
            Profile::Step => "step",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ramp" => Ok(Profile::Ramp),
            "step" => Ok(Profile::Step),
            other => Err(Error::Config(format!("unknown attack profile `{other}`"))),
        }
    }
}

/// One attack interval, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackEpisode {
    pub start_cycle: u64,
    pub end_cycle: u64,
    pub profile: Profile,
    pub peak_strength: f64,
}

impl AttackEpisode {
    pub fn new(start_cycle: u64, end_cycle: u64, profile: Profile, peak_strength: f64) -> Self {
        AttackEpisode {
            start_cycle,
            end_cycle,
            profile,
            peak_strength,
        }
    }

    fn contains(&self, cycle: u64) -> bool {
        self.start_cycle <= cycle && cycle <= self.end_cycle
    }

    fn strength_within(&self, cycle: u64) -> f64 {
        match self.profile {
            Profile::Step => self.peak_strength,
            Profile::Ramp => {
                let span = (self.end_cycle - self.start_cycle) as f64;
                self.peak_strength * (cycle - self.start_cycle) as f64 / span
            }
        }
    }

    /// First cycle of the episode at which strength reaches `level`.
    fn first_cycle_at_least(&self, level: f64) -> Option<u64> {
        if self.peak_strength < level {
            return None;
        }
        match self.profile {
            Profile::Step => Some(self.start_cycle),
            Profile::Ramp => {
                let span = (self.end_cycle - self.start_cycle) as f64;
                let guess = (level / self.peak_strength * span).ceil().max(0.0) as u64;
                let mut c = (self.start_cycle + guess.min(self.end_cycle - self.start_cycle))
                    .max(self.start_cycle);
                // Float rounding may put the guess one cycle off either way.
                while c > self.start_cycle && self.strength_within(c - 1) >= level {
                    c -= 1;
                }
                while c < self.end_cycle && self.strength_within(c) < level {
                    c += 1;
                }
                Some(c)
            }
        }
    }

    /// Config-file form: `<start>,<end>,<ramp|step>,<peak>`.
    pub fn to_config_value(&self) -> String {
        format!(
            "{},{},{},{}",
            self.start_cycle, self.end_cycle, self.profile, self.peak_strength
        )
    }
}

impl FromStr for AttackEpisode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::Config(format!(
                "attack.episode expects `start,end,ramp|step,peak`, got `{s}`"
            )));
        }
        let num = |v: &str| {
            v.parse::<u64>()
                .map_err(|_| Error::Config(format!("bad cycle `{v}` in attack.episode")))
        };
        let peak = parts[3]
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("bad peak `{}` in attack.episode", parts[3])))?;
        Ok(AttackEpisode::new(
            num(parts[0])?,
            num(parts[1])?,
            parts[2].parse()?,
            peak,
        ))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackWaveform {
    episodes: Vec<AttackEpisode>,
}

impl AttackWaveform {
    pub fn new(episodes: Vec<AttackEpisode>) -> Result<Self> {
        for e in &episodes {
            if e.start_cycle >= e.end_cycle {
                return Err(Error::Config(format!(
                    "attack episode must have start < end, got [{}, {}]",
                    e.start_cycle, e.end_cycle
                )));
            }
            if !(e.peak_strength >= 0.0 && e.peak_strength.is_finite()) {
                return Err(Error::Config(format!(
                    "attack peak must be finite and non-negative, got {}",
                    e.peak_strength
                )));
            }
        }
        for pair in episodes.windows(2) {
            if pair[1].start_cycle <= pair[0].end_cycle {
                return Err(Error::Config(format!(
                    "attack episodes must be sorted and disjoint: [{}, {}] then [{}, {}]",
                    pair[0].start_cycle, pair[0].end_cycle, pair[1].start_cycle, pair[1].end_cycle
                )));
            }
        }
        Ok(AttackWaveform { episodes })
    }

    pub fn none() -> Self {
        AttackWaveform::default()
    }

    pub fn episodes(&self) -> &[AttackEpisode] {
        &self.episodes
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn strength_at(&self, cycle: u64) -> f64 {
        self.episodes
            .iter()
            .find(|e| e.contains(cycle))
            .map_or(0.0, |e| e.strength_within(cycle))
    }

    /// Maximum strength over the integer cycles `lo..=hi`.
    pub fn peak_between(&self, lo: u64, hi: u64) -> f64 {
        self.episodes
            .iter()
            .filter(|e| e.start_cycle <= hi && lo <= e.end_cycle)
            .map(|e| e.strength_within(hi.min(e.end_cycle)))
            .fold(0.0, f64::max)
    }

    /// Accumulated flip hazard (dimensionless) for a line exposed over the
    /// continuous cycle interval `[from, to)`.
    ///
    /// Integrates the Poisson rate `1 / retention(strength(t))` exactly for
    /// both profiles, so `1 - exp(-hazard)` is the flip probability over the
    /// interval.
    pub fn cumulative_hazard(&self, params: &MtjParams, from: u64, to: u64, clock_hz: f64) -> f64 {
        if to <= from {
            return 0.0;
        }
        let mut total = 0.0;
        for e in &self.episodes {
            if e.start_cycle >= to {
                break;
            }
            let lo = from.max(e.start_cycle) as f64;
            let hi = to.min(e.end_cycle) as f64;
            if hi <= lo {
                continue;
            }
            total += match e.profile {
                Profile::Step => (hi - lo) * params.hazard_rate(e.peak_strength),
                Profile::Ramp => ramp_hazard(params, e, lo, hi),
            };
        }
        total / clock_hz
    }
}

/// Integral of the flip rate over `[lo, hi]` cycles within a ramp episode.
/// Result is in (rate * cycles); the caller divides by the clock.
fn ramp_hazard(params: &MtjParams, e: &AttackEpisode, lo: f64, hi: f64) -> f64 {
    let start = e.start_cycle as f64;
    let span = (e.end_cycle - e.start_cycle) as f64;
    if e.peak_strength <= 0.0 {
        return (hi - lo) * params.hazard_rate(0.0);
    }
    // Cycle at which the barrier collapses to zero.
    let collapse = start + params.critical_strength / e.peak_strength * span;
    let mut sum = 0.0;
    let sub_hi = hi.min(collapse);
    if sub_hi > lo {
        // rate(t) = exp(-k*d0 + slope * (t - start)) / C
        let kd0 = params.fit_exponent * params.nominal_barrier();
        let slope = kd0 * e.peak_strength / (params.critical_strength * span);
        let x_lo = -kd0 + slope * (lo - start);
        let width = sub_hi - lo;
        let integral = if slope * width < 1e-12 {
            width * x_lo.exp()
        } else {
            x_lo.exp() * (slope * width).exp_m1() / slope
        };
        sum += integral / params.fit_constant;
    }
    let sat_lo = lo.max(collapse);
    if hi > sat_lo {
        sum += (hi - sat_lo) / params.fit_constant;
    }
    sum
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub sensor_threshold: f64,
    pub functional_threshold: f64,
    pub sample_interval: u64,
    /// Minimum detection lead the scenario generator grants ramps.
    pub lead_cycles: u64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            sensor_threshold: 1.0,
            functional_threshold: 2.0,
            sample_interval: 100,
            // ~100us at 2 GHz.
            lead_cycles: 200_000,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sensor_threshold > 0.0 && self.sensor_threshold < self.functional_threshold) {
            return Err(Error::Config(format!(
                "need 0 < sensor threshold ({}) < functional threshold ({})",
                self.sensor_threshold, self.functional_threshold
            )));
        }
        if self.sample_interval == 0 || self.lead_cycles == 0 {
            return Err(Error::Config(
                "sensor.sample_interval and sensor.lead_cycles must be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn round_up(&self, cycle: u64) -> u64 {
        cycle.div_ceil(self.sample_interval) * self.sample_interval
    }

    /// Sample cycles `[first, last]` at which this episode alone keeps the
    /// sensor asserted, or `None` if it never reaches the sensor threshold.
    fn asserted_samples(&self, e: &AttackEpisode) -> Option<(u64, u64)> {
        let crossing = e.first_cycle_at_least(self.sensor_threshold)?;
        let first = self.round_up(crossing);
        let last = e.end_cycle.div_ceil(self.sample_interval) * self.sample_interval;
        Some((first, last))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    None,
    Gradual,
    Sudden,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorReading {
    pub cycle: u64,
    pub attack_asserted: bool,
    pub classification: Classification,
    pub strength: f64,
}

/// Reads the sensor array at a sample point.
///
/// Sensor MTJs that flipped stay flipped until read, so a reading reports the
/// peak strength since the previous sample rather than the instantaneous
/// value. A contiguous run of asserted samples is classified once, from the
/// strength seen at its first sample.
pub fn sample_sensor(config: &SensorConfig, waveform: &AttackWaveform, cycle: u64) -> SensorReading {
    let strength = window_peak(config, waveform, cycle);
    if strength < config.sensor_threshold {
        return SensorReading {
            cycle,
            attack_asserted: false,
            classification: Classification::None,
            strength,
        };
    }
    let run_start = assertion_run_start(config, waveform, cycle).unwrap_or(cycle);
    let onset = window_peak(config, waveform, run_start);
    let classification = if onset >= config.functional_threshold {
        Classification::Sudden
    } else {
        Classification::Gradual
    };
    SensorReading {
        cycle,
        attack_asserted: true,
        classification,
        strength,
    }
}

fn window_peak(config: &SensorConfig, waveform: &AttackWaveform, cycle: u64) -> f64 {
    let lo = (cycle + 1).saturating_sub(config.sample_interval);
    waveform.peak_between(lo, cycle)
}

/// First sample of the contiguous asserted run that contains `cycle`.
fn assertion_run_start(config: &SensorConfig, waveform: &AttackWaveform, cycle: u64) -> Option<u64> {
    let ranges: Vec<(u64, u64)> = waveform
        .episodes()
        .iter()
        .filter_map(|e| config.asserted_samples(e))
        .collect();
    let mut idx = ranges.iter().rposition(|&(a, b)| a <= cycle && cycle <= b)?;
    let mut start = ranges[idx].0;
    while idx > 0 {
        let (a, b) = ranges[idx - 1];
        if b + config.sample_interval < start {
            break;
        }
        start = start.min(a);
        idx -= 1;
    }
    Some(start)
}

/// First sample at or after `sample` (a multiple of the interval) at which
/// the sensor reads clear. Lets a halted processor skip a long attack.
pub fn next_clear_sample(config: &SensorConfig, waveform: &AttackWaveform, sample: u64) -> u64 {
    let ranges: Vec<(u64, u64)> = waveform
        .episodes()
        .iter()
        .filter_map(|e| config.asserted_samples(e))
        .collect();
    let Some(mut idx) = ranges.iter().position(|&(a, b)| a <= sample && sample <= b) else {
        return sample;
    };
    let mut end = ranges[idx].1;
    while idx + 1 < ranges.len() && ranges[idx + 1].0 <= end + config.sample_interval {
        idx += 1;
        end = end.max(ranges[idx].1);
    }
    end + config.sample_interval
}

/// Cycles between the first asserted sample of an episode and the first cycle
/// at which functional bits fail (or the episode end if they never do).
///
/// Returns `Ok(None)` if the sensor never asserts for this episode. A sensor
/// that asserts only after functional failure (a step attack) yields 0.
pub fn detection_lead(
    config: &SensorConfig,
    waveform: &AttackWaveform,
    episode_index: usize,
) -> Result<Option<u64>> {
    let e = waveform.episodes().get(episode_index).ok_or_else(|| {
        Error::Domain(format!(
            "episode index {episode_index} out of range ({} episodes)",
            waveform.episodes().len()
        ))
    })?;
    let Some((first, _)) = config.asserted_samples(e) else {
        return Ok(None);
    };
    let failure = e
        .first_cycle_at_least(config.functional_threshold)
        .unwrap_or(e.end_cycle);
    Ok(Some(failure.saturating_sub(first)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(eps: &[(u64, u64, Profile, f64)]) -> AttackWaveform {
        AttackWaveform::new(
            eps.iter()
                .map(|&(a, b, p, s)| AttackEpisode::new(a, b, p, s))
                .collect(),
        )
        .unwrap()
    }

    fn sensor(interval: u64) -> SensorConfig {
        SensorConfig {
            sample_interval: interval,
            ..SensorConfig::default()
        }
    }

    #[test]
    fn strength_profiles() {
        let w = wave(&[(500, 800, Profile::Step, 2.5), (1000, 2000, Profile::Ramp, 3.0)]);
        assert_eq!(w.strength_at(10), 0.0);
        assert_eq!(w.strength_at(500), 2.5);
        assert_eq!(w.strength_at(800), 2.5);
        assert_eq!(w.strength_at(801), 0.0);
        assert_eq!(w.strength_at(1500), 1.5);
        assert_eq!(w.strength_at(2000), 3.0);
        assert_eq!(w.strength_at(2001), 0.0);
    }

    #[test]
    fn waveform_rejects_overlap_and_bad_bounds() {
        let ov = AttackWaveform::new(vec![
            AttackEpisode::new(0, 100, Profile::Step, 1.0),
            AttackEpisode::new(100, 200, Profile::Step, 1.0),
        ]);
        assert!(ov.is_err());
        assert!(AttackWaveform::new(vec![AttackEpisode::new(5, 5, Profile::Ramp, 1.0)]).is_err());
        assert!(AttackWaveform::new(vec![AttackEpisode::new(0, 5, Profile::Ramp, -1.0)]).is_err());
    }

    #[test]
    fn episode_parses_from_config_value() {
        let e: AttackEpisode = "100, 900, ramp, 3.5".parse().unwrap();
        assert_eq!(e, AttackEpisode::new(100, 900, Profile::Ramp, 3.5));
        assert_eq!(e.to_config_value().parse::<AttackEpisode>().unwrap(), e);
        assert!("1,2,zigzag,1".parse::<AttackEpisode>().is_err());
        assert!("1,2,step".parse::<AttackEpisode>().is_err());
    }

    #[test]
    fn below_threshold_reads_none() {
        let w = wave(&[(0, 1000, Profile::Step, 0.5)]);
        let r = sample_sensor(&sensor(100), &w, 500);
        assert!(!r.attack_asserted);
        assert_eq!(r.classification, Classification::None);
    }

    #[test]
    fn ramp_crossing_reads_gradual() {
        let w = wave(&[(0, 10_000, Profile::Ramp, 3.0)]);
        let cfg = sensor(100);
        // crosses 1.0 at 3334, reading at 3400 sees 1.02
        let r = sample_sensor(&cfg, &w, 3400);
        assert!(r.attack_asserted);
        assert_eq!(r.classification, Classification::Gradual);
        // still gradual once strength passes the functional threshold
        let later = sample_sensor(&cfg, &w, 9000);
        assert_eq!(later.classification, Classification::Gradual);
    }

    #[test]
    fn step_between_samples_reads_sudden() {
        let w = wave(&[(550, 5000, Profile::Step, 3.0)]);
        let cfg = sensor(100);
        assert!(!sample_sensor(&cfg, &w, 500).attack_asserted);
        let r = sample_sensor(&cfg, &w, 600);
        assert!(r.attack_asserted);
        assert_eq!(r.classification, Classification::Sudden);
        assert_eq!(r.strength, 3.0);
    }

    #[test]
    fn short_pulse_between_samples_is_latched() {
        let w = wave(&[(510, 540, Profile::Step, 2.5)]);
        let r = sample_sensor(&sensor(100), &w, 600);
        assert!(r.attack_asserted);
        assert!(!sample_sensor(&sensor(100), &w, 700).attack_asserted);
    }

    #[test]
    fn ramp_then_hold_stays_gradual() {
        let w = wave(&[(0, 3000, Profile::Ramp, 3.0), (3001, 9000, Profile::Step, 3.0)]);
        let cfg = sensor(100);
        for c in (1000..=9000).step_by(100) {
            let r = sample_sensor(&cfg, &w, c);
            assert!(r.attack_asserted, "cycle {c}");
            assert_eq!(r.classification, Classification::Gradual, "cycle {c}");
        }
        assert!(sample_sensor(&cfg, &w, 9000).attack_asserted);
        assert!(!sample_sensor(&cfg, &w, 9100).attack_asserted);
    }

    #[test]
    fn lead_of_linear_ramp_matches_crossing_points() {
        let w = wave(&[(0, 10_000, Profile::Ramp, 2.0)]);
        let lead = detection_lead(&sensor(10), &w, 0).unwrap().unwrap();
        assert!(lead.abs_diff(5000) <= 10, "lead {lead}");
    }

    #[test]
    fn lead_of_step_is_within_one_sample() {
        let w = wave(&[(555, 9000, Profile::Step, 2.5)]);
        let lead = detection_lead(&sensor(100), &w, 0).unwrap().unwrap();
        assert!(lead <= 100);
    }

    #[test]
    fn lead_of_subcritical_ramp_is_remaining_duration() {
        let w = wave(&[(0, 9000, Profile::Ramp, 1.5)]);
        let cfg = sensor(100);
        let lead = detection_lead(&cfg, &w, 0).unwrap().unwrap();
        // assertion at cycle 6000 exactly
        assert_eq!(lead, 3000);
        assert!(detection_lead(&cfg, &w, 1).is_err());
        let weak = wave(&[(0, 9000, Profile::Ramp, 0.5)]);
        assert_eq!(detection_lead(&cfg, &weak, 0).unwrap(), None);
    }

    #[test]
    fn step_hazard_matches_flip_probability() {
        let p = MtjParams::default();
        let w = wave(&[(0, 100_000, Profile::Step, 1.8)]);
        let clock = 2e9;
        let h = w.cumulative_hazard(&p, 1000, 3000, clock);
        let direct = p.flip_probability(1.8, 2000.0 / clock).unwrap();
        assert!((crate::physics::probability_from_hazard(h) - direct).abs() < 1e-15);
    }

    /// Composite Simpson quadrature of the per-cycle rate as the oracle for
    /// the closed-form ramp integral.
    fn simpson(p: &MtjParams, w: &AttackWaveform, a: f64, b: f64, clock: f64) -> f64 {
        let n = 200_000;
        let h = (b - a) / n as f64;
        let rate = |t: f64| {
            let s = w
                .episodes()
                .iter()
                .find(|e| e.start_cycle as f64 <= t && t <= e.end_cycle as f64)
                .map_or(0.0, |e| match e.profile {
                    Profile::Step => e.peak_strength,
                    Profile::Ramp => {
                        e.peak_strength * (t - e.start_cycle as f64)
                            / (e.end_cycle - e.start_cycle) as f64
                    }
                });
            p.hazard_rate(s)
        };
        let mut acc = rate(a) + rate(b);
        for i in 1..n {
            let t = a + i as f64 * h;
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * rate(t);
        }
        acc * h / 3.0 / clock
    }

    #[test]
    fn ramp_hazard_matches_quadrature() {
        let p = MtjParams::default();
        let clock = 2e9;
        let w = wave(&[(1000, 21_000, Profile::Ramp, 3.0)]);
        // below collapse, across collapse, and fully saturated
        for (a, b) in [(5000u64, 13_000u64), (10_000, 16_000), (15_000, 20_000)] {
            let closed = w.cumulative_hazard(&p, a, b, clock);
            let numeric = simpson(&p, &w, a as f64, b as f64, clock);
            let rel = ((closed - numeric) / numeric).abs();
            assert!(rel < 1e-6, "[{a},{b}) closed {closed} numeric {numeric}");
        }
    }

    #[test]
    fn hazard_outside_episodes_is_zero() {
        let p = MtjParams::default();
        let w = wave(&[(1000, 2000, Profile::Step, 3.0)]);
        assert_eq!(w.cumulative_hazard(&p, 0, 1000, 2e9), 0.0);
        assert_eq!(w.cumulative_hazard(&p, 2000, 9000, 2e9), 0.0);
        assert_eq!(w.cumulative_hazard(&p, 1500, 1500, 2e9), 0.0);
    }

    #[test]
    fn next_clear_sample_skips_contiguous_runs() {
        let s = sensor(100);
        let w = wave(&[(1000, 2000, Profile::Step, 3.0), (2050, 3000, Profile::Step, 1.5)]);
        assert_eq!(next_clear_sample(&s, &w, 500), 500);
        // Second episode keeps the sensor asserted from 2100 through 3000.
        assert_eq!(next_clear_sample(&s, &w, 1000), 3100);
        assert_eq!(next_clear_sample(&s, &w, 2500), 3100);
        assert!(!sample_sensor(&s, &w, 3100).attack_asserted);
        assert!(sample_sensor(&s, &w, 3000).attack_asserted);
    }
}
