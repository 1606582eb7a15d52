//! Mitigation policies and their state machines.
//!
//! Three responses to an asserted attack signal are modeled: halting the
//! processor, bypassing the LLC, and rolling back to a checkpoint before
//! bypassing. The transitions that touch the hierarchy are methods on
//! [`Engine`](crate::engine::Engine), defined here.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::{Classification, SensorReading};
use crate::cache::VictimChoice;
use crate::engine::{Engine, EngineEvent, InjectedFault, Observer};
use crate::error::{Error, Result};
use crate::golden::GoldenMemory;
use crate::hierarchy::{AccessOutcome, LlcRoute};
use crate::trace::MemoryRequest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    None,
    Stall,
    Bypass,
    CheckpointBypass,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::None,
        PolicyKind::Stall,
        PolicyKind::Bypass,
        PolicyKind::CheckpointBypass,
    ];
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::None => "none",
            PolicyKind::Stall => "stall",
            PolicyKind::Bypass => "bypass",
            PolicyKind::CheckpointBypass => "checkpoint_bypass",
        })
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy `{s}`")))
    }
}

/// How speculative data is kept out of memory between checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommitMode {
    /// LLC evictions wait in the write buffer until the next checkpoint.
    #[default]
    Masked,
    /// Lines written since the checkpoint carry a volatile bit and the LLC
    /// evicts non-volatile lines first. Anything that still has to leave
    /// waits in the masked buffer.
    Volatile,
}

impl fmt::Display for CommitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CommitMode::Masked => "masked",
            CommitMode::Volatile => "volatile",
        })
    }
}

impl FromStr for CommitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(CommitMode::Masked),
            "volatile" => Ok(CommitMode::Volatile),
            other => Err(Error::Config(format!("unknown commit mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MitigationPolicy {
    pub kind: PolicyKind,
    /// Cycles between checkpoints; `u64::MAX` disables periodic ones.
    pub checkpoint_interval: u64,
    /// Halve the interval once the first attack has been seen.
    pub adaptive_interval: bool,
    pub register_save_cost: u64,
    /// Pipeline flush charged on every rollback.
    pub rollback_cost: u64,
    pub commit_mode: CommitMode,
    /// Fetched lines are also written (stale) into the LLC during bypass.
    pub allow_fills: bool,
}

impl Default for MitigationPolicy {
    fn default() -> Self {
        MitigationPolicy {
            kind: PolicyKind::None,
            checkpoint_interval: 100_000,
            adaptive_interval: false,
            register_save_cost: 100,
            rollback_cost: 50,
            commit_mode: CommitMode::Masked,
            allow_fills: false,
        }
    }
}

impl MitigationPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.kind == PolicyKind::CheckpointBypass && self.checkpoint_interval == 0 {
            return Err(Error::Config(
                "checkpoint.interval must be >= 1 for checkpoint_bypass".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BypassPhase {
    #[default]
    Off,
    /// Dirty LLC data is being written back; BP not yet asserted.
    Preparing,
    Active,
    /// Attack over; the LLC is being invalidated before BP drops.
    Exiting,
}

/// Controller for the BP signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BypassState {
    phase: BypassPhase,
}

impl BypassState {
    pub fn phase(&self) -> BypassPhase {
        self.phase
    }

    /// Whether requests currently skip the LLC.
    pub fn bp_signal(&self) -> bool {
        matches!(self.phase, BypassPhase::Active | BypassPhase::Exiting)
    }

    fn step(&mut self, from: BypassPhase, to: BypassPhase) -> Result<()> {
        if self.phase != from {
            return Err(Error::Protocol(format!(
                "bypass transition {from:?} -> {to:?} requested in {:?}",
                self.phase
            )));
        }
        self.phase = to;
        Ok(())
    }

    pub fn begin_prepare(&mut self) -> Result<()> {
        self.step(BypassPhase::Off, BypassPhase::Preparing)
    }

    pub fn activate(&mut self) -> Result<()> {
        self.step(BypassPhase::Preparing, BypassPhase::Active)
    }

    pub fn begin_exit(&mut self) -> Result<()> {
        self.step(BypassPhase::Active, BypassPhase::Exiting)
    }

    pub fn finish_exit(&mut self) -> Result<()> {
        self.step(BypassPhase::Exiting, BypassPhase::Off)
    }
}

/// Counters restored on rollback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CheckpointStats {
    pub corrupted_reads: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    /// First request not covered by this checkpoint.
    pub trace_index: usize,
    pub cycle_at_save: u64,
    pub golden_snapshot: GoldenMemory,
    pub stats_snapshot: CheckpointStats,
}

/// One step taken by a mitigation, in the order it happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MitigationAction {
    Flush { lines: u64 },
    BypassOn,
    /// A request that reached the LLC stage while BP was asserted.
    ForcedMiss,
    Invalidate { lines: u64 },
    BypassOff,
    Halt,
    Resume,
    RestartRequired,
    Rollback { to_index: usize },
    Checkpoint { index: usize, forced: bool },
}

impl MitigationAction {
    /// Short token used in action logs.
    pub fn token(&self) -> &'static str {
        match self {
            MitigationAction::Flush { .. } => "FLUSH",
            MitigationAction::BypassOn => "BP_UP",
            MitigationAction::ForcedMiss => "MISS",
            MitigationAction::Invalidate { .. } => "INVALIDATE",
            MitigationAction::BypassOff => "BP_DOWN",
            MitigationAction::Halt => "HALT",
            MitigationAction::Resume => "RESUME",
            MitigationAction::RestartRequired => "RESTART",
            MitigationAction::Rollback { .. } => "ROLLBACK",
            MitigationAction::Checkpoint { .. } => "CHECKPOINT",
        }
    }
}

impl fmt::Display for MitigationAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Processor state under the stall policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StallState {
    Running,
    Halted,
}

impl<'t> Engine<'t> {
    fn act<O: Observer>(&mut self, obs: &mut O, action: MitigationAction, out: &mut Vec<MitigationAction>) {
        obs.observe(EngineEvent::Action {
            cycle: self.cycle,
            action,
        });
        out.push(action);
    }

    /// Reacts to a sensor reading. Only edges of the assertion signal cause
    /// actions; readings must arrive in cycle order.
    pub fn on_sensor<O: Observer>(
        &mut self,
        reading: SensorReading,
        obs: &mut O,
    ) -> Result<Vec<MitigationAction>> {
        if let Some(last) = self.sensor.last_cycle {
            if reading.cycle < last {
                return Err(Error::Protocol(format!(
                    "sensor reading at cycle {} after reading at {last}",
                    reading.cycle
                )));
            }
        }
        self.sensor.last_cycle = Some(reading.cycle);
        let was = self.sensor.asserted;
        self.sensor.asserted = reading.attack_asserted;
        let mut out = Vec::new();
        match (was, reading.attack_asserted) {
            (false, true) => {
                self.counters.assertions += 1;
                match reading.classification {
                    Classification::Sudden => self.counters.sudden += 1,
                    _ => self.counters.gradual += 1,
                }
                self.on_assert(reading, obs, &mut out)?;
            }
            (true, false) => self.on_deassert(obs, &mut out)?,
            _ => {}
        }
        Ok(out)
    }

    fn on_assert<O: Observer>(
        &mut self,
        reading: SensorReading,
        obs: &mut O,
        out: &mut Vec<MitigationAction>,
    ) -> Result<()> {
        match self.cfg.policy.kind {
            PolicyKind::None => {}
            PolicyKind::Stall => {
                self.stall_step(reading, obs, out)?;
            }
            PolicyKind::Bypass => {
                self.bypass.begin_prepare()?;
                let lines = self.flush_llc()?;
                self.act(obs, MitigationAction::Flush { lines }, out);
                self.bypass.activate()?;
                self.act(obs, MitigationAction::BypassOn, out);
            }
            PolicyKind::CheckpointBypass => {
                let to_index = self.checkpoint.as_ref().map_or(0, |c| c.trace_index);
                self.rollback(obs)?;
                self.act(obs, MitigationAction::Rollback { to_index }, out);
                // Nothing in the LLC is worth saving after a rollback.
                self.bypass.begin_prepare()?;
                self.bypass.activate()?;
                self.checkpointing = false;
                self.hier.buffer.set_masked(false);
                self.hier.mark_volatile = false;
                self.hier.victim_choice = VictimChoice::Lru;
                if self.cfg.policy.adaptive_interval && !self.adapted {
                    self.adapted = true;
                    self.interval = (self.interval / 2).max(1);
                }
                self.act(obs, MitigationAction::BypassOn, out);
            }
        }
        Ok(())
    }

    fn on_deassert<O: Observer>(&mut self, obs: &mut O, out: &mut Vec<MitigationAction>) -> Result<()> {
        match self.cfg.policy.kind {
            PolicyKind::None => {}
            PolicyKind::Stall => {
                let reading = SensorReading {
                    cycle: self.cycle,
                    attack_asserted: false,
                    classification: Classification::None,
                    strength: 0.0,
                };
                self.stall_step(reading, obs, out)?;
            }
            PolicyKind::Bypass | PolicyKind::CheckpointBypass => {
                self.bypass.begin_exit()?;
                let lines = self.invalidate_llc();
                self.act(obs, MitigationAction::Invalidate { lines }, out);
                self.bypass.finish_exit()?;
                self.act(obs, MitigationAction::BypassOff, out);
                if self.cfg.policy.kind == PolicyKind::CheckpointBypass {
                    // The LLC is empty and L1/L2 are SRAM, so the state is
                    // trustworthy right now.
                    self.checkpointing = true;
                    self.take_checkpoint(false, obs)?;
                    let index = self.cursor.position();
                    self.act(obs, MitigationAction::Checkpoint { index, forced: false }, out);
                }
            }
        }
        Ok(())
    }

    /// Stall policy transition for one reading edge.
    pub fn stall_step<O: Observer>(
        &mut self,
        reading: SensorReading,
        obs: &mut O,
        out: &mut Vec<MitigationAction>,
    ) -> Result<StallState> {
        if reading.attack_asserted && !self.halted {
            if reading.classification == Classification::Sudden {
                // Data is already being lost; flushing it would only spread it.
                self.restart_required = true;
                self.act(obs, MitigationAction::RestartRequired, out);
            } else {
                let lines = self.flush_llc()?;
                self.act(obs, MitigationAction::Flush { lines }, out);
            }
            self.halted = true;
            self.act(obs, MitigationAction::Halt, out);
        } else if !reading.attack_asserted && self.halted {
            let lines = self.invalidate_llc();
            self.act(obs, MitigationAction::Invalidate { lines }, out);
            self.halted = false;
            self.act(obs, MitigationAction::Resume, out);
        }
        Ok(if self.halted {
            StallState::Halted
        } else {
            StallState::Running
        })
    }

    fn flush_llc(&mut self) -> Result<u64> {
        let lines = self.hier.flush_llc(self.cycle, self.exposure.as_ref())?;
        let g = &self.cfg.hierarchy;
        let cost = lines * (g.llc.read_latency + g.mem_write_cost);
        self.counters.flushes += 1;
        self.counters.flushed_lines += lines;
        self.charge(cost, |c| &mut c.flush);
        Ok(lines)
    }

    fn invalidate_llc(&mut self) -> u64 {
        let lines = self.hier.invalidate_llc() as u64;
        self.counters.invalidations += 1;
        self.charge(self.cfg.invalidate_cost, |c| &mut c.invalidate);
        lines
    }

    /// Executes one request with BP asserted.
    pub fn bypass_access<O: Observer>(
        &mut self,
        request: &MemoryRequest,
        obs: &mut O,
    ) -> Result<AccessOutcome> {
        if !self.bypass.bp_signal() {
            return Err(Error::Protocol(format!(
                "bypass access in phase {:?}",
                self.bypass.phase()
            )));
        }
        self.access(request, obs)
    }

    pub(crate) fn route(&self) -> LlcRoute {
        if !self.cfg.hierarchy.llc_enabled {
            LlcRoute::Absent
        } else if self.bypass.bp_signal() {
            LlcRoute::Bypass {
                allow_fills: self.cfg.policy.allow_fills,
            }
        } else {
            LlcRoute::Normal
        }
    }

    /// Commits all dirty state to memory and records a restore point.
    pub fn take_checkpoint<O: Observer>(&mut self, forced: bool, obs: &mut O) -> Result<()> {
        if self.cfg.policy.kind != PolicyKind::CheckpointBypass {
            return Err(Error::Protocol("checkpoint without checkpoint policy".into()));
        }
        if self.bypass.phase() != BypassPhase::Off || !self.checkpointing {
            return Err(Error::Protocol("checkpoint requested during an attack".into()));
        }
        let c = self.hier.commit_all(self.cycle, self.exposure.as_ref());
        let g = &self.cfg.hierarchy;
        let cost = c.l1 * (g.l1.read_latency + g.mem_write_cost)
            + c.l2 * (g.l2.read_latency + g.mem_write_cost)
            + c.llc * (g.llc.read_latency + g.mem_write_cost)
            + c.buffer * g.mem_write_cost
            + self.cfg.policy.register_save_cost;
        self.hier.events.checkpoint += 1;
        self.arm_checkpointing();
        if self.checks.memory_at_checkpoint && !self.hier.memory.matches(&self.golden) {
            let (a, m, g) = self.hier.memory.first_mismatch(&self.golden).unwrap_or_default();
            return Err(Error::Invariant(format!(
                "memory differs from oracle after checkpoint at line {a:#x} ({m} vs {g})"
            )));
        }
        self.checkpoint = Some(Checkpoint {
            trace_index: self.cursor.position(),
            cycle_at_save: self.cycle,
            golden_snapshot: self.golden.clone(),
            stats_snapshot: CheckpointStats {
                corrupted_reads: self.counters.corrupted_reads,
            },
        });
        self.counters.checkpoints += 1;
        self.counters.forced_checkpoints += u64::from(forced);
        self.charge(cost, |c| &mut c.checkpoint);
        self.next_checkpoint = self.cycle.saturating_add(self.interval);
        if let Some(cp) = &self.checkpoint {
            obs.observe(EngineEvent::Checkpoint {
                checkpoint: cp,
                memory: &self.hier.memory,
            });
        }
        Ok(())
    }

    /// Restores the last checkpoint: rewinds the trace, the oracle and the
    /// counters, and drops every cached line and buffered write.
    pub fn rollback<O: Observer>(&mut self, obs: &mut O) -> Result<()> {
        if self.cfg.policy.kind != PolicyKind::CheckpointBypass {
            return Err(Error::Protocol("rollback without checkpoint policy".into()));
        }
        if matches!(self.bypass.phase(), BypassPhase::Preparing | BypassPhase::Exiting) {
            return Err(Error::Protocol(format!(
                "rollback during bypass phase {:?}",
                self.bypass.phase()
            )));
        }
        let cp = self
            .checkpoint
            .clone()
            .ok_or_else(|| Error::Protocol("rollback with no checkpoint".into()))?;
        let detected = self.cursor.position();
        if self.fault == Some(InjectedFault::LeakMaskedBuffer) {
            self.hier.leak_buffer();
        }
        self.hier.discard_all();
        self.cursor.rewind_to(cp.trace_index);
        self.golden = cp.golden_snapshot.clone();
        // Memory was verified at the checkpoint and nothing since may have
        // reached it.
        if self.checks.memory_at_checkpoint && !self.hier.memory.matches(&self.golden) {
            let (a, m, g) = self.hier.memory.first_mismatch(&self.golden).unwrap_or_default();
            return Err(Error::Invariant(format!(
                "memory differs from restored checkpoint at line {a:#x} ({m} vs {g})"
            )));
        }
        self.counters.re_executed += (detected - cp.trace_index) as u64;
        self.counters.discarded_corrupted +=
            self.counters.corrupted_reads - cp.stats_snapshot.corrupted_reads;
        self.counters.corrupted_reads = cp.stats_snapshot.corrupted_reads;
        self.counters.rollbacks += 1;
        self.counters.invalidations += 1;
        self.charge(self.cfg.invalidate_cost, |c| &mut c.invalidate);
        self.charge(self.cfg.policy.rollback_cost, |c| &mut c.rollback);
        obs.observe(EngineEvent::Rollback {
            restored_index: cp.trace_index,
            detected_index: detected,
            golden: &self.golden,
        });
        Ok(())
    }
}
