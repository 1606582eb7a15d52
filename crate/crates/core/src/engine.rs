//! The cycle-accounting simulation loop.

use crate::attack::{next_clear_sample, sample_sensor};
use crate::cache::Version;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::golden::{verify_outcome, GoldenMemory, Verdict};
use crate::hierarchy::{
    AccessOutcome, ExposureModel, Hierarchy, LlcRoute, MainMemory, ServicedBy, BUFFER_HEADROOM,
};
use crate::metrics::{
    AttackSummary, CycleBreakdown, EnergySummary, EventSummary, SimReport,
};
use crate::mitigation::{BypassPhase, BypassState, Checkpoint, MitigationAction, PolicyKind};
use crate::trace::{AccessKind, MemoryRequest, Trace, TraceCursor};

/// Something the engine did, for tests and tracing tools.
#[derive(Debug)]
pub enum EngineEvent<'e> {
    Action {
        cycle: u64,
        action: MitigationAction,
    },
    Checkpoint {
        checkpoint: &'e Checkpoint,
        memory: &'e MainMemory,
    },
    Rollback {
        restored_index: usize,
        detected_index: usize,
        golden: &'e GoldenMemory,
    },
    Access {
        cycle: u64,
        request: &'e MemoryRequest,
        outcome: &'e AccessOutcome,
        expected: Version,
        memory_writes: u64,
    },
}

pub trait Observer {
    fn observe(&mut self, event: EngineEvent<'_>);
}

impl Observer for () {
    fn observe(&mut self, _: EngineEvent<'_>) {}
}

impl<F: FnMut(EngineEvent<'_>)> Observer for F {
    fn observe(&mut self, event: EngineEvent<'_>) {
        self(event)
    }
}

/// Deliberate bugs, used to show the oracles catch them.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectedFault {
    /// Rollback writes the masked buffer to memory instead of dropping it.
    LeakMaskedBuffer,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct SensorTrack {
    pub(crate) next_sample: u64,
    pub(crate) last_sample: Option<u64>,
    pub(crate) last_cycle: Option<u64>,
    pub(crate) asserted: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunCounters {
    pub requests_executed: u64,
    pub re_executed: u64,
    pub corrupted_reads: u64,
    pub discarded_corrupted: u64,
    pub flushes: u64,
    pub flushed_lines: u64,
    pub invalidations: u64,
    pub checkpoints: u64,
    pub forced_checkpoints: u64,
    pub rollbacks: u64,
    pub assertions: u64,
    pub gradual: u64,
    pub sudden: u64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Checks {
    pub(crate) memory_at_checkpoint: bool,
    pub(crate) exclusivity_interval: u64,
}

pub struct Engine<'t> {
    pub(crate) cfg: &'t RunConfig,
    trace: &'t Trace,
    pub(crate) hier: Hierarchy,
    pub(crate) golden: GoldenMemory,
    pub(crate) cursor: TraceCursor,
    pub(crate) cycle: u64,
    pub(crate) cycles: CycleBreakdown,
    pub(crate) exposure: Option<ExposureModel>,
    pub(crate) sensor: SensorTrack,
    pub(crate) bypass: BypassState,
    pub(crate) halted: bool,
    pub(crate) restart_required: bool,
    pub(crate) checkpointing: bool,
    pub(crate) checkpoint: Option<Checkpoint>,
    pub(crate) interval: u64,
    pub(crate) adapted: bool,
    pub(crate) next_checkpoint: u64,
    pub(crate) counters: RunCounters,
    pub(crate) checks: Checks,
    pub(crate) fault: Option<InjectedFault>,
    since_check: u64,
    started: bool,
}

impl<'t> Engine<'t> {
    pub fn new(cfg: &'t RunConfig, trace: &'t Trace) -> Result<Self> {
        cfg.validate()?;
        let exposure = (!cfg.attack.is_empty()).then(|| ExposureModel {
            params: cfg.mtj,
            waveform: cfg.attack.clone(),
            clock_hz: cfg.clock_hz,
            seed: cfg.seed,
        });
        Ok(Engine {
            cfg,
            trace,
            hier: Hierarchy::new(cfg.hierarchy)?,
            golden: GoldenMemory::new(cfg.hierarchy.l1.line_size),
            cursor: TraceCursor::default(),
            cycle: 0,
            cycles: CycleBreakdown::default(),
            exposure,
            sensor: SensorTrack::default(),
            bypass: BypassState::default(),
            halted: false,
            restart_required: false,
            checkpointing: false,
            checkpoint: None,
            interval: cfg.policy.checkpoint_interval,
            adapted: false,
            next_checkpoint: 0,
            counters: RunCounters::default(),
            checks: Checks {
                memory_at_checkpoint: cfg.checks.memory_at_checkpoint,
                exclusivity_interval: cfg.checks.exclusivity_interval,
            },
            fault: None,
            since_check: 0,
            started: false,
        })
    }

    #[doc(hidden)]
    pub fn with_fault(mut self, fault: InjectedFault) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hier
    }

    pub fn golden(&self) -> &GoldenMemory {
        &self.golden
    }

    pub fn counters(&self) -> &RunCounters {
        &self.counters
    }

    pub fn bypass_phase(&self) -> BypassPhase {
        self.bypass.phase()
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    pub fn last_checkpoint(&self) -> Option<&Checkpoint> {
        self.checkpoint.as_ref()
    }

    pub(crate) fn charge(&mut self, cost: u64, part: impl FnOnce(&mut CycleBreakdown) -> &mut u64) {
        *part(&mut self.cycles) += cost;
        self.cycle += cost;
    }

    pub fn run(self) -> Result<SimReport> {
        self.run_observed(&mut ())
    }

    pub fn run_observed<O: Observer>(mut self, obs: &mut O) -> Result<SimReport> {
        self.run_in_place(obs)
    }

    /// Like [`Engine::run_observed`], but leaves the engine around so its
    /// final state can be inspected.
    pub fn run_in_place<O: Observer>(&mut self, obs: &mut O) -> Result<SimReport> {
        if self.started {
            return Err(Error::Protocol("engine already ran".into()));
        }
        self.started = true;
        self.start();
        loop {
            self.poll_sensor(obs)?;
            if self.halted {
                self.wait_out_attack();
                continue;
            }
            if self.cursor.position() >= self.trace.len() {
                break;
            }
            if self.checkpoint_due() {
                self.aligned_checkpoint(obs)?;
                continue;
            }
            let request = self.trace.requests()[self.cursor.position()];
            self.access(&request, obs)?;
            self.cursor.advance();
        }
        self.finish()
    }

    /// The program start is an implicit checkpoint: memory holds nothing
    /// speculative yet.
    fn start(&mut self) {
        if self.cfg.policy.kind == PolicyKind::CheckpointBypass {
            self.checkpointing = true;
            self.arm_checkpointing();
            self.checkpoint = Some(Checkpoint {
                trace_index: 0,
                cycle_at_save: 0,
                golden_snapshot: self.golden.clone(),
                stats_snapshot: Default::default(),
            });
            self.next_checkpoint = self.interval;
        }
    }

    pub(crate) fn arm_checkpointing(&mut self) {
        use crate::cache::VictimChoice;
        use crate::mitigation::CommitMode;
        self.hier.buffer.set_masked(true);
        self.hier.mark_volatile = true;
        self.hier.victim_choice = match self.cfg.policy.commit_mode {
            CommitMode::Masked => VictimChoice::Lru,
            CommitMode::Volatile => VictimChoice::PreferNonVolatile,
        };
    }

    /// Processes every sensor sample up to the current cycle.
    fn poll_sensor<O: Observer>(&mut self, obs: &mut O) -> Result<()> {
        let interval = self.cfg.sensor.sample_interval;
        while self.sensor.next_sample <= self.cycle {
            let at = self.sensor.next_sample;
            self.sensor.next_sample = at + interval;
            self.sensor.last_sample = Some(at);
            if self.exposure.is_none() {
                // Nothing can assert; jump to the sample after now.
                self.sensor.next_sample = (self.cycle / interval + 1) * interval;
                self.sensor.last_sample = Some(self.cycle / interval * interval);
                continue;
            }
            let reading = sample_sensor(&self.cfg.sensor, &self.cfg.attack, at);
            self.on_sensor(reading, obs)?;
        }
        Ok(())
    }

    /// Halted: skip straight to the first clean sample.
    fn wait_out_attack(&mut self) {
        let clear = next_clear_sample(&self.cfg.sensor, &self.cfg.attack, self.sensor.next_sample);
        let wait = clear.saturating_sub(self.cycle);
        self.charge(wait, |c| &mut c.stall);
        self.sensor.next_sample = clear;
    }

    fn checkpoint_due(&self) -> bool {
        self.checkpointing
            && (self.cycle >= self.next_checkpoint
                || self.hier.buffer.min_free() < BUFFER_HEADROOM)
    }

    /// Waits for the next sensor sample and checkpoints if it reads clear.
    fn aligned_checkpoint<O: Observer>(&mut self, obs: &mut O) -> Result<()> {
        let forced = self.cycle < self.next_checkpoint;
        let target = if self.sensor.last_sample == Some(self.cycle) {
            self.cycle
        } else {
            self.sensor.next_sample
        };
        self.charge(target - self.cycle, |c| &mut c.checkpoint);
        self.poll_sensor(obs)?;
        if self.checkpointing && self.bypass.phase() == BypassPhase::Off {
            self.take_checkpoint(forced, obs)?;
            let index = self.cursor.position();
            obs.observe(EngineEvent::Action {
                cycle: self.cycle,
                action: MitigationAction::Checkpoint { index, forced },
            });
        }
        Ok(())
    }

    /// Executes one request against the hierarchy and the oracle.
    pub fn access<O: Observer>(&mut self, request: &MemoryRequest, obs: &mut O) -> Result<AccessOutcome> {
        if self.halted {
            return Err(Error::Halted);
        }
        let expected = self.golden.apply(request);
        let route = self.route();
        let outcome = self
            .hier
            .access(request, expected, self.cycle, route, self.exposure.as_ref())?;
        let start = self.cycle;
        self.charge(outcome.latency, |c| &mut c.access);
        self.counters.requests_executed += 1;
        if request.kind == AccessKind::Read
            && verify_outcome(outcome.corrupted, outcome.version, expected) == Verdict::CorruptedRead
        {
            self.counters.corrupted_reads += 1;
        }
        if matches!(route, LlcRoute::Bypass { .. }) && outcome.serviced_by == ServicedBy::Memory {
            obs.observe(EngineEvent::Action {
                cycle: start,
                action: MitigationAction::ForcedMiss,
            });
        }
        self.hier.drain_evictions();
        if self.checks.exclusivity_interval > 0 {
            self.since_check += 1;
            if self.since_check >= self.checks.exclusivity_interval {
                self.since_check = 0;
                self.hier.check_exclusive()?;
            }
        }
        obs.observe(EngineEvent::Access {
            cycle: start,
            request,
            outcome: &outcome,
            expected,
            memory_writes: self.hier.memory.writes(),
        });
        Ok(outcome)
    }

    fn finish(&self) -> Result<SimReport> {
        if self.cycles.sum_of_parts() != self.cycle {
            return Err(Error::Invariant(format!(
                "cycle parts sum to {} but {} cycles elapsed",
                self.cycles.sum_of_parts(),
                self.cycle
            )));
        }
        let useful = self.trace.len() as u64;
        if self.counters.requests_executed != useful + self.counters.re_executed {
            return Err(Error::Invariant(format!(
                "{} requests executed, expected {} useful + {} re-executed",
                self.counters.requests_executed, useful, self.counters.re_executed
            )));
        }
        if self.checks.exclusivity_interval > 0 {
            self.hier.check_exclusive()?;
        }
        let cfg = self.cfg;
        let c = &self.counters;
        let energy_events = self.hier.events;
        let cycles = CycleBreakdown {
            total: self.cycle,
            ..self.cycles
        };
        Ok(SimReport {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            policy: cfg.policy.kind.to_string(),
            trace_id: self.trace.id(),
            attack: AttackSummary {
                episodes: cfg.attack.episodes().iter().map(|e| e.to_config_value()).collect(),
                assertions: c.assertions,
                gradual_detections: c.gradual,
                sudden_detections: c.sudden,
                restart_required: self.restart_required,
            },
            cycles,
            events: EventSummary {
                requests_executed: c.requests_executed,
                useful_requests: useful,
                re_executed_requests: c.re_executed,
                levels: self.hier.stats,
                flushes: c.flushes,
                flushed_lines: c.flushed_lines,
                invalidations: c.invalidations,
                checkpoints: c.checkpoints,
                forced_checkpoints: c.forced_checkpoints,
                rollbacks: c.rollbacks,
                memory_writes: self.hier.memory.writes(),
                poisoned_lines_observed: self.hier.poisoned_observed,
                discarded_corrupted_reads: c.discarded_corrupted,
                energy_events,
            },
            energy: EnergySummary {
                total: cfg.energy.energy(&energy_events),
                by_component: cfg.energy.by_component(&energy_events),
            },
            corrupted_reads: c.corrupted_reads,
            config: cfg.canonical_text(),
        })
    }
}

/// Runs one configuration over one trace.
pub fn simulate(cfg: &RunConfig, trace: &Trace) -> Result<SimReport> {
    Engine::new(cfg, trace)?.run()
}
