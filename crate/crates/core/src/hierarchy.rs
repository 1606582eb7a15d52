//! Exclusive three-level hierarchy with an STTRAM LLC, a banked write buffer
//! in front of main memory, and lazy attack exposure of LLC lines.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::attack::AttackWaveform;
use crate::cache::{
    BankedWriteBuffer, BufferEntry, CacheGeometry, CacheLevel, LineImage, Lookup, Version,
    VictimChoice,
};
use crate::error::{Error, Result};
use crate::golden::GoldenMemory;
use crate::metrics::{EventCounts, LevelStats};
use crate::physics::{probability_from_hazard, MtjParams};
use crate::trace::{AccessKind, MemoryRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LookupMode {
    /// LLC and memory are probed in parallel; a miss costs no LLC latency.
    #[default]
    LookAside,
    /// Memory is accessed only after the LLC misses.
    LookThrough,
}

impl std::fmt::Display for LookupMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LookupMode::LookAside => "look_aside",
            LookupMode::LookThrough => "look_through",
        })
    }
}

impl std::str::FromStr for LookupMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "look_aside" => Ok(LookupMode::LookAside),
            "look_through" => Ok(LookupMode::LookThrough),
            other => Err(Error::Config(format!("unknown lookup mode `{other}`"))),
        }
    }
}

/// How a request that missed L1 and L2 is treated at the LLC stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LlcRoute {
    Normal,
    /// BP asserted: every request misses. With `allow_fills` the fetched line
    /// is also written into the LLC, marked stale.
    Bypass { allow_fills: bool },
    /// Configuration without an LLC.
    Absent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServicedBy {
    L1,
    L2,
    Llc,
    Memory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessOutcome {
    pub serviced_by: ServicedBy,
    pub latency: u64,
    /// Version returned to the processor (reads) or written (writes).
    pub version: Version,
    /// The read consumed a line the attack had scrambled.
    pub corrupted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HierarchyConfig {
    pub l1: CacheGeometry,
    pub l2: CacheGeometry,
    pub llc: CacheGeometry,
    pub llc_enabled: bool,
    pub lookup: LookupMode,
    pub mem_latency: u64,
    /// Cycles to write one line back to memory (flush and checkpoint cost).
    pub mem_write_cost: u64,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        HierarchyConfig {
            l1: CacheGeometry::reference_l1(),
            l2: CacheGeometry::reference_l2(),
            llc: CacheGeometry::reference_llc(),
            llc_enabled: true,
            lookup: LookupMode::LookAside,
            mem_latency: 100,
            mem_write_cost: 100,
        }
    }
}

impl HierarchyConfig {
    pub fn validate(&self) -> Result<()> {
        self.l1.validate("l1")?;
        self.l2.validate("l2")?;
        self.llc.validate("llc")?;
        if self.l1.line_size != self.l2.line_size || self.l2.line_size != self.llc.line_size {
            return Err(Error::Config("all levels must share one line size".into()));
        }
        if self.mem_latency == 0 {
            return Err(Error::Config("mem.latency must be >= 1".into()));
        }
        Ok(())
    }

    /// Latency of a request that goes all the way to memory.
    pub fn memory_path_latency(&self, route: LlcRoute) -> u64 {
        let through = match (route, self.lookup) {
            (LlcRoute::Absent, _) | (_, LookupMode::LookAside) => 0,
            (_, LookupMode::LookThrough) => self.llc.read_latency,
        };
        self.l1.read_latency + self.l2.read_latency + through + self.mem_latency
    }
}

/// Backing store. Lines never written read as version 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MainMemory {
    lines: HashMap<u64, Version>,
    writes: u64,
}

impl MainMemory {
    pub fn read(&self, line: u64) -> Version {
        self.lines.get(&line).copied().unwrap_or(0)
    }

    pub fn write(&mut self, line: u64, version: Version) {
        self.writes += 1;
        self.lines.insert(line, version);
    }

    pub fn writes(&self) -> u64 {
        self.writes
    }

    /// Line-by-line equality with the oracle.
    pub fn matches(&self, golden: &GoldenMemory) -> bool {
        golden.iter().all(|(a, v)| self.read(a) == v)
            && self.lines.iter().all(|(&a, &v)| golden.read(a) == v)
    }

    /// First line on which memory and oracle disagree.
    pub fn first_mismatch(&self, golden: &GoldenMemory) -> Option<(u64, Version, Version)> {
        let mut addrs: Vec<u64> = golden.iter().map(|(a, _)| a).chain(self.lines.keys().copied()).collect();
        addrs.sort_unstable();
        addrs.dedup();
        addrs
            .into_iter()
            .map(|a| (a, self.read(a), golden.read(a)))
            .find(|(_, m, g)| m != g)
    }
}

/// Attack exposure of LLC bits, evaluated per line when the line is read,
/// written, moved, or written back.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureModel {
    pub params: MtjParams,
    pub waveform: AttackWaveform,
    pub clock_hz: f64,
    pub seed: u64,
}

impl ExposureModel {
    /// Probability that a line resident over `[from, to)` lost its data.
    pub fn flip_probability(&self, from: u64, to: u64) -> f64 {
        if to <= from || self.waveform.is_empty() {
            return 0.0;
        }
        let h = self
            .waveform
            .cumulative_hazard(&self.params, from, to, self.clock_hz);
        probability_from_hazard(h)
    }
}

/// What a call to [`Hierarchy::drain_evictions`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DrainSignal {
    pub drained: usize,
    /// The buffer is masked and some bank is short of room: a checkpoint has
    /// to commit it before more evictions arrive.
    pub needs_checkpoint: bool,
}

/// Lines written back to memory by a checkpoint commit, per source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CommitCounts {
    pub l1: u64,
    pub l2: u64,
    pub llc: u64,
    pub buffer: u64,
}

/// Free slots a masked bank must keep before a request. A request pushes at
/// most one entry; the second slot is slack.
pub const BUFFER_HEADROOM: usize = 2;

#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub l1: CacheLevel,
    pub l2: CacheLevel,
    pub llc: CacheLevel,
    pub buffer: BankedWriteBuffer,
    pub memory: MainMemory,
    cfg: HierarchyConfig,
    /// LLC replacement preference (volatile-bit commit mode).
    pub victim_choice: VictimChoice,
    /// Writes set the volatile flag (checkpointing active).
    pub mark_volatile: bool,
    pub events: EventCounts,
    pub stats: LevelStats,
    pub poisoned_observed: u64,
}

impl Hierarchy {
    pub fn new(cfg: HierarchyConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Hierarchy {
            l1: CacheLevel::new("l1", cfg.l1)?,
            l2: CacheLevel::new("l2", cfg.l2)?,
            llc: CacheLevel::new("llc", cfg.llc)?,
            buffer: BankedWriteBuffer::new(
                cfg.llc.banks as usize,
                cfg.llc.write_buffer_entries as usize,
                cfg.llc.line_size,
            ),
            memory: MainMemory::default(),
            cfg,
            victim_choice: VictimChoice::Lru,
            mark_volatile: false,
            events: EventCounts::default(),
            stats: LevelStats::default(),
            poisoned_observed: 0,
        })
    }

    pub fn config(&self) -> &HierarchyConfig {
        &self.cfg
    }

    pub fn line_addr(&self, addr: u64) -> u64 {
        self.l1.line_addr(addr)
    }

    /// Services one request. `version` is the token a write stores; reads
    /// ignore it.
    pub fn access(
        &mut self,
        request: &MemoryRequest,
        version: Version,
        now: u64,
        route: LlcRoute,
        exposure: Option<&ExposureModel>,
    ) -> Result<AccessOutcome> {
        let line = self.line_addr(request.address);
        match request.kind {
            AccessKind::Read => self.read(line, now, route, exposure),
            AccessKind::Write => self.write(line, version, now, route, exposure),
        }
    }

    fn read(
        &mut self,
        line: u64,
        now: u64,
        route: LlcRoute,
        exposure: Option<&ExposureModel>,
    ) -> Result<AccessOutcome> {
        let l1_lat = self.cfg.l1.read_latency;
        self.events.l1_access += 1;
        if let Lookup::Hit { set, way } = self.l1.lookup(line) {
            self.stats.l1_hits += 1;
            self.l1.touch(set, way);
            return Ok(self.outcome(ServicedBy::L1, l1_lat, self.l1.line(set, way).version));
        }
        self.stats.l1_misses += 1;

        let l2_lat = l1_lat + self.cfg.l2.read_latency;
        self.events.l2_access += 1;
        if let Lookup::Hit { set, way } = self.l2.lookup(line) {
            self.stats.l2_hits += 1;
            let img = self.l2.take_at(set, way);
            self.install_l1(img, now, route, exposure)?;
            return Ok(self.outcome(ServicedBy::L2, l2_lat, img.version));
        }
        self.stats.l2_misses += 1;

        if route == LlcRoute::Normal {
            if let Lookup::Hit { set, way } = self.llc.lookup(line) {
                self.stats.llc_hits += 1;
                self.events.llc_read += 1;
                let corrupted = self.expose(set, way, now, exposure);
                let img = self.llc.take_at(set, way);
                let moved = LineImage {
                    version: img.payload(),
                    poisoned: false,
                    ..img
                };
                self.install_l1(moved, now, route, exposure)?;
                let lat = l2_lat + self.cfg.llc.read_latency;
                return Ok(AccessOutcome {
                    serviced_by: ServicedBy::Llc,
                    latency: lat,
                    version: moved.version,
                    corrupted,
                });
            }
            self.stats.llc_misses += 1;
        } else {
            self.note_forced_miss(line, route);
        }

        let version = self.fetch(line);
        if let LlcRoute::Bypass { allow_fills: true } = route {
            self.stale_fill(line, version, now);
        }
        self.install_l1(LineImage::clean(line, version), now, route, exposure)?;
        Ok(self.outcome(ServicedBy::Memory, self.cfg.memory_path_latency(route), version))
    }

    fn write(
        &mut self,
        line: u64,
        version: Version,
        now: u64,
        route: LlcRoute,
        exposure: Option<&ExposureModel>,
    ) -> Result<AccessOutcome> {
        let volatile = self.mark_volatile;
        let update = |lv: &mut CacheLevel, set: usize, way: usize| {
            lv.touch(set, way);
            let l = lv.line_mut(set, way);
            l.version = version;
            l.dirty = true;
            l.poisoned = false;
            l.volatile_flag |= volatile;
            l.exposed_since = now;
        };

        let l1_lat = self.cfg.l1.write_latency;
        self.events.l1_access += 1;
        if let Lookup::Hit { set, way } = self.l1.lookup(line) {
            self.stats.l1_hits += 1;
            update(&mut self.l1, set, way);
            return Ok(self.outcome(ServicedBy::L1, l1_lat, version));
        }
        self.stats.l1_misses += 1;

        let l2_lat = l1_lat + self.cfg.l2.write_latency;
        self.events.l2_access += 1;
        if let Lookup::Hit { set, way } = self.l2.lookup(line) {
            self.stats.l2_hits += 1;
            update(&mut self.l2, set, way);
            return Ok(self.outcome(ServicedBy::L2, l2_lat, version));
        }
        self.stats.l2_misses += 1;

        if route == LlcRoute::Normal {
            if let Lookup::Hit { set, way } = self.llc.lookup(line) {
                self.stats.llc_hits += 1;
                self.events.llc_write += 1;
                // The old content is overwritten whole, so no exposure draw.
                update(&mut self.llc, set, way);
                return Ok(self.outcome(
                    ServicedBy::Llc,
                    l2_lat + self.cfg.llc.write_latency,
                    version,
                ));
            }
            self.stats.llc_misses += 1;
        } else {
            self.note_forced_miss(line, route);
        }

        let lat = self.cfg.memory_path_latency(route);
        if route == LlcRoute::Normal {
            // L1/L2 are write-allocate: fetch for ownership, then write.
            self.fetch(line);
            let img = LineImage {
                addr: line,
                version,
                dirty: true,
                poisoned: false,
                volatile_flag: volatile,
            };
            self.install_l1(img, now, route, exposure)?;
        } else {
            // Write-no-allocate below L2: straight to the write buffer.
            self.commit(line, version)?;
        }
        Ok(self.outcome(ServicedBy::Memory, lat, version))
    }

    fn outcome(&self, serviced_by: ServicedBy, latency: u64, version: Version) -> AccessOutcome {
        AccessOutcome {
            serviced_by,
            latency,
            version,
            corrupted: false,
        }
    }

    fn note_forced_miss(&mut self, line: u64, route: LlcRoute) {
        if let LlcRoute::Bypass { .. } = route {
            self.stats.llc_forced_misses += 1;
            // A resident copy may be stale from now on; never read it.
            if let Lookup::Hit { set, way } = self.llc.lookup(line) {
                self.llc.line_mut(set, way).stale = true;
            }
        }
    }

    fn stale_fill(&mut self, line: u64, version: Version, now: u64) {
        self.events.llc_write += 1;
        // Anything displaced is either stale too or was flushed on entry.
        self.llc
            .insert_image(LineImage::clean(line, version), now, VictimChoice::Lru);
        if let Lookup::Hit { set, way } = self.llc.lookup(line) {
            self.llc.line_mut(set, way).stale = true;
        }
    }

    /// Samples the attack for an LLC line over its unexposed interval.
    fn expose(&mut self, set: usize, way: usize, now: u64, exposure: Option<&ExposureModel>) -> bool {
        let l = *self.llc.line(set, way);
        if l.poisoned {
            return true;
        }
        let Some(x) = exposure else {
            return false;
        };
        let p = x.flip_probability(l.exposed_since, now);
        self.llc.line_mut(set, way).exposed_since = now;
        let poisoned = self.llc.expose_line(set, way, p, x.seed, now);
        if poisoned {
            self.poisoned_observed += 1;
        }
        poisoned
    }

    /// Brings every valid LLC line's exposure up to `now`.
    pub fn expose_llc(&mut self, now: u64, exposure: Option<&ExposureModel>) {
        if exposure.is_none() {
            return;
        }
        for (set, way) in self.llc.valid_slots() {
            self.expose(set, way, now, exposure);
        }
    }

    fn install_l1(
        &mut self,
        img: LineImage,
        now: u64,
        route: LlcRoute,
        exposure: Option<&ExposureModel>,
    ) -> Result<()> {
        self.events.l1_access += 1;
        match self.l1.insert_image(img, now, VictimChoice::Lru) {
            Some(v) => self.install_l2(v, now, route, exposure),
            None => Ok(()),
        }
    }

    fn install_l2(
        &mut self,
        img: LineImage,
        now: u64,
        route: LlcRoute,
        exposure: Option<&ExposureModel>,
    ) -> Result<()> {
        self.events.l2_access += 1;
        match self.l2.insert_image(img, now, VictimChoice::Lru) {
            Some(v) => self.install_llc(v, now, route, exposure),
            None => Ok(()),
        }
    }

    fn install_llc(
        &mut self,
        img: LineImage,
        now: u64,
        route: LlcRoute,
        exposure: Option<&ExposureModel>,
    ) -> Result<()> {
        if route != LlcRoute::Normal {
            return self.retire(img);
        }
        self.events.llc_write += 1;
        // Bring the would-be victim up to date before it leaves.
        if let Some((set, way)) = self.llc_victim_slot(img.addr) {
            self.expose(set, way, now, exposure);
        }
        match self.llc.insert_image(img, now, self.victim_choice) {
            Some(v) => {
                self.events.llc_read += u64::from(v.dirty);
                self.retire(v)
            }
            None => Ok(()),
        }
    }

    fn llc_victim_slot(&self, addr: u64) -> Option<(usize, usize)> {
        if self.llc.lookup(addr).is_hit() {
            return None;
        }
        let sets = self.llc.sets() as u64;
        let set = ((addr >> self.cfg.llc.line_size.trailing_zeros()) % sets) as usize;
        let ways = self.llc.ways();
        if (0..ways).any(|w| !self.llc.line(set, w).valid) {
            return None;
        }
        let pick = |pred: &dyn Fn(usize) -> bool| {
            (0..ways)
                .filter(|&w| pred(w))
                .min_by_key(|&w| self.llc.line(set, w).lru_stamp)
        };
        let preferred = match self.victim_choice {
            VictimChoice::Lru => None,
            VictimChoice::PreferNonVolatile => pick(&|w| !self.llc.line(set, w).volatile_flag),
        };
        preferred.or_else(|| pick(&|_| true)).map(|w| (set, w))
    }

    /// Dirty lines go to memory through the buffer; clean ones are dropped.
    fn retire(&mut self, img: LineImage) -> Result<()> {
        if img.dirty {
            self.commit(img.addr, img.payload())
        } else {
            Ok(())
        }
    }

    fn commit(&mut self, addr: u64, version: Version) -> Result<()> {
        self.events.buffer_op += 1;
        let entry = BufferEntry { addr, version };
        if self.buffer.push(entry).is_ok() {
            return Ok(());
        }
        if self.buffer.is_masked() {
            return Err(Error::Invariant(format!(
                "masked write buffer overflowed on line {addr:#x}"
            )));
        }
        self.drain_buffer();
        self.buffer
            .push(entry)
            .map_err(|_| Error::Invariant("write buffer full after drain".into()))
    }

    fn drain_buffer(&mut self) -> usize {
        let drained = self.buffer.drain();
        for e in &drained {
            self.events.buffer_op += 1;
            self.events.mem_access += 1;
            self.memory.write(e.addr, e.version);
        }
        drained.len()
    }

    fn fetch(&mut self, line: u64) -> Version {
        match self.buffer.forward(line) {
            Some(v) => {
                self.stats.buffer_forwards += 1;
                self.events.buffer_op += 1;
                v
            }
            None => {
                self.events.mem_access += 1;
                self.memory.read(line)
            }
        }
    }

    /// Moves pending evictions to memory when the buffer is unmasked, and
    /// reports whether a masked buffer needs a checkpoint.
    pub fn drain_evictions(&mut self) -> DrainSignal {
        if self.buffer.is_masked() {
            DrainSignal {
                drained: 0,
                needs_checkpoint: self.buffer.min_free() < BUFFER_HEADROOM,
            }
        } else {
            DrainSignal {
                drained: self.drain_buffer(),
                needs_checkpoint: false,
            }
        }
    }

    /// Writes back every dirty LLC line and invalidates the LLC. Returns the
    /// number of lines written back.
    pub fn flush_llc(&mut self, now: u64, exposure: Option<&ExposureModel>) -> Result<u64> {
        for (set, way) in self.llc.valid_slots() {
            if self.llc.line(set, way).dirty {
                self.expose(set, way, now, exposure);
            }
        }
        let written = self.llc.flush();
        for img in &written {
            self.events.llc_read += 1;
            self.commit(img.addr, img.payload())?;
        }
        self.drain_evictions();
        Ok(written.len() as u64)
    }

    pub fn invalidate_llc(&mut self) -> usize {
        self.llc.invalidate_all()
    }

    /// Checkpoint commit: the buffer first (older data), then every dirty
    /// line of every level straight to memory. Leaves the buffer unmasked.
    pub fn commit_all(&mut self, now: u64, exposure: Option<&ExposureModel>) -> CommitCounts {
        self.buffer.set_masked(false);
        let buffer = self.drain_buffer() as u64;
        for (set, way) in self.llc.valid_slots() {
            if self.llc.line(set, way).dirty {
                self.expose(set, way, now, exposure);
            }
        }
        let mut counts = CommitCounts {
            buffer,
            ..Default::default()
        };
        for (level, n) in [(0, &mut counts.l1), (1, &mut counts.l2), (2, &mut counts.llc)] {
            let written = match level {
                0 => self.l1.commit_dirty(),
                1 => self.l2.commit_dirty(),
                _ => self.llc.commit_dirty(),
            };
            for img in &written {
                match level {
                    0 => self.events.l1_access += 1,
                    1 => self.events.l2_access += 1,
                    _ => self.events.llc_read += 1,
                }
                self.events.mem_access += 1;
                self.memory.write(img.addr, img.payload());
            }
            *n = written.len() as u64;
        }
        counts
    }

    /// Rollback: every cached copy and every masked buffer entry is newer
    /// than the checkpoint, so all of it goes. Returns (lines, entries).
    pub fn discard_all(&mut self) -> (usize, usize) {
        let lines = self.l1.invalidate_all() + self.l2.invalidate_all() + self.llc.invalidate_all();
        (lines, self.buffer.discard())
    }

    /// Fault hook for tests: drains a masked buffer instead of discarding it.
    pub(crate) fn leak_buffer(&mut self) -> usize {
        self.buffer.set_masked(false);
        self.drain_buffer()
    }

    /// Full scan: no line is trusted in more than one level.
    pub fn check_exclusive(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for level in [&self.l1, &self.l2, &self.llc] {
            for a in level.trusted_addrs() {
                if !seen.insert(a) {
                    return Err(Error::Invariant(format!(
                        "line {a:#x} resident in more than one level ({})",
                        level.name()
                    )));
                }
            }
        }
        Ok(())
    }
}
