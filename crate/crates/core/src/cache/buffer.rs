//! Bounded FIFO write buffers that sit between the LLC and main memory.
//!
//! While masked, entries are held back and `drain` returns nothing; this is
//! what keeps speculative data out of memory between two checkpoints.

use std::collections::VecDeque;

use super::Version;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferEntry {
    /// Line-aligned byte address.
    pub addr: u64,
    pub version: Version,
}

/// Returned by `push` when the buffer has no free slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferFull;

#[derive(Debug, Clone)]
pub struct WriteBuffer {
    entries: VecDeque<BufferEntry>,
    capacity: usize,
    masked: bool,
    pushed: u64,
    drained: u64,
    discarded: u64,
}

impl WriteBuffer {
    pub fn new(capacity: usize) -> Self {
        WriteBuffer {
            entries: VecDeque::with_capacity(capacity),
            capacity,
            masked: false,
            pushed: 0,
            drained: 0,
            discarded: 0,
        }
    }

    pub fn push(&mut self, entry: BufferEntry) -> Result<(), BufferFull> {
        if self.entries.len() >= self.capacity {
            return Err(BufferFull);
        }
        self.entries.push_back(entry);
        self.pushed += 1;
        Ok(())
    }

    /// All resident entries in push order, or nothing while masked.
    pub fn drain(&mut self) -> Vec<BufferEntry> {
        if self.masked {
            return Vec::new();
        }
        self.drained += self.entries.len() as u64;
        self.entries.drain(..).collect()
    }

    /// Drops every resident entry without committing it.
    pub fn discard(&mut self) -> usize {
        let n = self.entries.len();
        self.entries.clear();
        self.discarded += n as u64;
        n
    }

    /// Newest buffered version of a line, for store-to-load forwarding.
    pub fn forward(&self, addr: u64) -> Option<Version> {
        self.entries
            .iter()
            .rev()
            .find(|e| e.addr == addr)
            .map(|e| e.version)
    }

    pub fn set_masked(&mut self, masked: bool) {
        self.masked = masked;
    }

    pub fn is_masked(&self) -> bool {
        self.masked
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn free(&self) -> usize {
        self.capacity - self.entries.len()
    }

    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    pub fn drained(&self) -> u64 {
        self.drained
    }

    pub fn discarded(&self) -> u64 {
        self.discarded
    }
}

/// One write buffer per LLC bank; lines map to banks by line index.
#[derive(Debug, Clone)]
pub struct BankedWriteBuffer {
    banks: Vec<WriteBuffer>,
    line_shift: u32,
}

impl BankedWriteBuffer {
    pub fn new(banks: usize, entries_per_bank: usize, line_size: u32) -> Self {
        BankedWriteBuffer {
            banks: (0..banks).map(|_| WriteBuffer::new(entries_per_bank)).collect(),
            line_shift: line_size.trailing_zeros(),
        }
    }

    fn bank_of(&self, addr: u64) -> usize {
        ((addr >> self.line_shift) % self.banks.len() as u64) as usize
    }

    pub fn push(&mut self, entry: BufferEntry) -> Result<(), BufferFull> {
        let b = self.bank_of(entry.addr);
        self.banks[b].push(entry)
    }

    /// Drains every bank in bank order; FIFO within a bank.
    pub fn drain(&mut self) -> Vec<BufferEntry> {
        self.banks.iter_mut().flat_map(WriteBuffer::drain).collect()
    }

    pub fn discard(&mut self) -> usize {
        self.banks.iter_mut().map(WriteBuffer::discard).sum()
    }

    pub fn forward(&self, addr: u64) -> Option<Version> {
        self.banks[self.bank_of(addr)].forward(addr)
    }

    pub fn set_masked(&mut self, masked: bool) {
        for b in &mut self.banks {
            b.set_masked(masked);
        }
    }

    pub fn is_masked(&self) -> bool {
        self.banks.first().is_some_and(WriteBuffer::is_masked)
    }

    pub fn len(&self) -> usize {
        self.banks.iter().map(WriteBuffer::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.banks.iter().all(WriteBuffer::is_empty)
    }

    /// Free slots in the fullest bank.
    pub fn min_free(&self) -> usize {
        self.banks.iter().map(WriteBuffer::free).min().unwrap_or(0)
    }

    pub fn banks(&self) -> &[WriteBuffer] {
        &self.banks
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e(addr: u64, version: Version) -> BufferEntry {
        BufferEntry { addr, version }
    }

    #[test]
    fn masked_drain_holds_entries() {
        let mut b = WriteBuffer::new(4);
        b.set_masked(true);
        b.push(e(0, 1)).unwrap();
        b.push(e(64, 2)).unwrap();
        assert!(b.drain().is_empty());
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn push_past_capacity_signals_full() {
        let mut b = WriteBuffer::new(3);
        for i in 0..3 {
            b.push(e(i * 64, i)).unwrap();
        }
        assert_eq!(b.push(e(999, 9)), Err(BufferFull));
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn unmasked_drain_is_fifo() {
        let mut b = WriteBuffer::new(8);
        b.set_masked(true);
        for i in 0..5 {
            b.push(e(i * 64, 10 + i)).unwrap();
        }
        b.set_masked(false);
        let out: Vec<u64> = b.drain().iter().map(|x| x.version).collect();
        assert_eq!(out, vec![10, 11, 12, 13, 14]);
        assert!(b.is_empty());
    }

    #[test]
    fn forwarding_returns_newest() {
        let mut b = WriteBuffer::new(8);
        b.push(e(128, 3)).unwrap();
        b.push(e(64, 4)).unwrap();
        b.push(e(128, 7)).unwrap();
        assert_eq!(b.forward(128), Some(7));
        assert_eq!(b.forward(0), None);
    }

    #[test]
    fn banks_split_by_line_index() {
        let mut b = BankedWriteBuffer::new(4, 2, 64);
        b.set_masked(true);
        // lines 0 and 4 share bank 0
        b.push(e(0, 1)).unwrap();
        b.push(e(4 * 64, 2)).unwrap();
        assert_eq!(b.push(e(8 * 64, 3)), Err(BufferFull));
        assert!(b.push(e(64, 3)).is_ok());
        assert_eq!(b.min_free(), 0);
        assert_eq!(b.len(), 3);
        assert_eq!(b.discard(), 3);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Push(u64),
        Drain,
        Mask(bool),
        Discard,
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            4 => (0u64..32).prop_map(Op::Push),
            2 => Just(Op::Drain),
            2 => any::<bool>().prop_map(Op::Mask),
            1 => Just(Op::Discard),
        ]
    }

    proptest! {
        #[test]
        fn pushed_equals_drained_plus_resident(ops in prop::collection::vec(op(), 0..200)) {
            let mut b = WriteBuffer::new(8);
            let mut drained = 0u64;
            for o in ops {
                match o {
                    Op::Push(a) => { let _ = b.push(e(a * 64, a)); }
                    Op::Drain => {
                        let masked = b.is_masked();
                        let got = b.drain();
                        if masked { prop_assert!(got.is_empty()); }
                        drained += got.len() as u64;
                    }
                    Op::Mask(m) => b.set_masked(m),
                    Op::Discard => { b.discard(); }
                }
                prop_assert!(b.len() <= b.capacity());
            }
            prop_assert_eq!(b.drained(), drained);
            prop_assert_eq!(b.pushed(), b.drained() + b.len() as u64 + b.discarded());
        }
    }
}
