//! Fixed-capacity KV cache with a validity mask and a single-slot
//! overwrite protocol.
//!
//! The arena is allocated once and never grows or shrinks. During the fill
//! phase new tokens occupy the lowest invalid slot; once full, each append
//! must land in the slot chosen by the previous step's eviction decision.
//! Slot order stops being token order as soon as overwrites begin — token
//! identity survives only through the [`SlotWriteLog`].

use log::warn;

use crate::error::{Error, Result};
use crate::numerics::VecF;
use crate::scalar::Real;

/// Why a slot was written.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteSource {
    /// Loaded by `load_prefill`.
    Prefill,
    /// Decode-step append into a never-used slot (cache not yet full).
    Fill,
    /// Decode-step append that covered a previously valid slot.
    Overwrite,
}

/// One slot write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteRecord {
    pub step: u64,
    pub slot: usize,
    pub source: WriteSource,
}

/// Append-only record of every slot write, plus a per-slot recency stamp.
#[derive(Debug, Clone, Default)]
pub struct SlotWriteLog {
    records: Vec<WriteRecord>,
    /// Monotone write stamp per slot; 0 = never written.
    last_write: Vec<u64>,
    next_stamp: u64,
}

impl SlotWriteLog {
    fn new(capacity: usize) -> Self {
        Self { records: Vec::new(), last_write: vec![0; capacity], next_stamp: 1 }
    }

    fn record(&mut self, step: u64, slot: usize, source: WriteSource) {
        self.records.push(WriteRecord { step, slot, source });
        self.last_write[slot] = self.next_stamp;
        self.next_stamp += 1;
    }

    pub fn records(&self) -> &[WriteRecord] {
        &self.records
    }

    /// Write stamp of `slot`; larger means more recent, 0 means never.
    pub fn last_write_stamp(&self, slot: usize) -> u64 {
        self.last_write[slot]
    }

    /// Slot overwritten at `step`, if any.
    pub fn overwrite_at_step(&self, step: u64) -> Option<usize> {
        self.records
            .iter()
            .rev()
            .take_while(|r| r.step == step)
            .find(|r| r.source == WriteSource::Overwrite)
            .map(|r| r.slot)
    }

    /// Number of overwrite records.
    pub fn overwrite_count(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.source == WriteSource::Overwrite)
            .count()
    }
}

/// Key/value backing store: one flat buffer holding keys then values.
#[derive(Debug, Clone)]
struct KvStorage<T> {
    data: Vec<T>,
    head_dim: usize,
    /// Buffer allocations performed over the arena's lifetime. Stays at 1:
    /// the store is grabbed once at construction and never reallocated.
    allocations: usize,
}

impl<T: Real> KvStorage<T> {
    fn new(capacity: usize, head_dim: usize) -> Self {
        let data = vec![T::zero(); 2 * capacity * head_dim];
        Self { data, head_dim, allocations: 1 }
    }

    #[inline]
    fn key(&self, capacity: usize, slot: usize) -> &[T] {
        let off = slot * self.head_dim;
        debug_assert!(slot < capacity);
        &self.data[off..off + self.head_dim]
    }

    #[inline]
    fn value(&self, capacity: usize, slot: usize) -> &[T] {
        let off = (capacity + slot) * self.head_dim;
        &self.data[off..off + self.head_dim]
    }

    fn write(&mut self, capacity: usize, slot: usize, k: &[T], v: &[T]) {
        let koff = slot * self.head_dim;
        self.data[koff..koff + self.head_dim].copy_from_slice(k);
        let voff = (capacity + slot) * self.head_dim;
        self.data[voff..voff + self.head_dim].copy_from_slice(v);
    }
}

/// Pre-allocated slot array of (key, value) pairs with a validity mask.
#[derive(Debug, Clone)]
pub struct KvArena<T> {
    capacity: usize,
    head_dim: usize,
    storage: KvStorage<T>,
    valid: Vec<bool>,
    valid_count: usize,
    next_overwrite: Option<usize>,
    step_counter: u64,
    log: SlotWriteLog,
}

impl<T: Real> KvArena<T> {
    /// Allocates an arena with `capacity` slots of dimension `head_dim`.
    /// All slots start invalid and zero-filled.
    pub fn allocate(capacity: usize, head_dim: usize) -> Result<Self> {
        if capacity < 2 {
            return Err(Error::Config(format!("capacity must be >= 2, got {capacity}")));
        }
        if head_dim < 1 {
            return Err(Error::Config("head_dim must be >= 1".into()));
        }
        Ok(Self {
            capacity,
            head_dim,
            storage: KvStorage::new(capacity, head_dim),
            valid: vec![false; capacity],
            valid_count: 0,
            next_overwrite: None,
            step_counter: 0,
            log: SlotWriteLog::new(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn valid_count(&self) -> usize {
        self.valid_count
    }

    pub fn is_full(&self) -> bool {
        self.valid_count == self.capacity
    }

    pub fn is_valid(&self, slot: usize) -> bool {
        slot < self.capacity && self.valid[slot]
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    /// Ascending indices of valid slots.
    pub fn valid_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.valid.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i)
    }

    pub fn next_overwrite(&self) -> Option<usize> {
        self.next_overwrite
    }

    pub fn step_counter(&self) -> u64 {
        self.step_counter
    }

    pub fn log(&self) -> &SlotWriteLog {
        &self.log
    }

    /// Storage-buffer allocations performed so far; 1 for the lifetime of a
    /// correctly driven arena.
    pub fn allocation_count(&self) -> usize {
        self.storage.allocations
    }

    /// Key row of `slot`. Contents of invalid slots are stale or zero.
    pub fn key(&self, slot: usize) -> &[T] {
        self.storage.key(self.capacity, slot)
    }

    /// Value row of `slot`.
    pub fn value(&self, slot: usize) -> &[T] {
        self.storage.value(self.capacity, slot)
    }

    fn check_dim(&self, v: &VecF<T>) -> Result<()> {
        if v.dim() != self.head_dim {
            return Err(Error::DimMismatch { expected: self.head_dim, got: v.dim() });
        }
        Ok(())
    }

    /// Loads prompt keys/values into slots `[0, n)`, replacing any prior
    /// contents. With `kept`, only the listed source rows are loaded, in
    /// list order. Without it the whole prompt must fit the budget.
    pub fn load_prefill(
        &mut self,
        keys: &[VecF<T>],
        values: &[VecF<T>],
        kept: Option<&[usize]>,
    ) -> Result<()> {
        if keys.len() != values.len() {
            return Err(Error::DimMismatch { expected: keys.len(), got: values.len() });
        }
        let n = keys.len();
        let selected: Vec<usize> = match kept {
            None => {
                if n > self.capacity {
                    return Err(Error::PrefillExceedsBudget { tokens: n, capacity: self.capacity });
                }
                (0..n).collect()
            }
            Some(list) => {
                if list.len() > self.capacity {
                    return Err(Error::PrefillExceedsBudget {
                        tokens: list.len(),
                        capacity: self.capacity,
                    });
                }
                if let Some(&bad) = list.iter().find(|&&i| i >= n) {
                    return Err(Error::IndexOutOfRange { index: bad, len: n });
                }
                list.to_vec()
            }
        };

        self.valid.fill(false);
        self.valid_count = 0;
        self.next_overwrite = None;
        self.step_counter = 0;
        self.log = SlotWriteLog::new(self.capacity);

        for (slot, &row) in selected.iter().enumerate() {
            self.check_dim(&keys[row])?;
            self.check_dim(&values[row])?;
            self.storage
                .write(self.capacity, slot, keys[row].as_slice(), values[row].as_slice());
            self.valid[slot] = true;
            self.log.record(0, slot, WriteSource::Prefill);
        }
        self.valid_count = selected.len();
        Ok(())
    }

    /// Writes one token: into the lowest invalid slot while filling, or into
    /// the slot chosen by the previous step's eviction decision once full.
    /// Returns the slot written.
    pub fn append_or_overwrite(&mut self, k: &VecF<T>, v: &VecF<T>) -> Result<usize> {
        self.check_dim(k)?;
        self.check_dim(v)?;

        let step = self.step_counter + 1;
        let slot = if self.is_full() {
            let slot = self.next_overwrite.take().ok_or(Error::NoEvictionDecision)?;
            self.storage.write(self.capacity, slot, k.as_slice(), v.as_slice());
            self.log.record(step, slot, WriteSource::Overwrite);
            slot
        } else {
            let slot = self
                .valid
                .iter()
                .position(|&used| !used)
                .expect("non-full arena has an invalid slot");
            self.storage.write(self.capacity, slot, k.as_slice(), v.as_slice());
            self.valid[slot] = true;
            self.valid_count += 1;
            self.log.record(step, slot, WriteSource::Fill);
            slot
        };
        self.step_counter = step;
        Ok(slot)
    }

    /// Records the slot the next append will cover. Calling twice in one
    /// step is allowed; the later decision wins.
    pub fn set_eviction(&mut self, slot: usize) -> Result<()> {
        if slot >= self.capacity {
            return Err(Error::IndexOutOfRange { index: slot, len: self.capacity });
        }
        if !self.valid[slot] {
            return Err(Error::InvalidSlot(slot));
        }
        if let Some(prev) = self.next_overwrite {
            warn!("eviction decision replaced: slot {prev} -> slot {slot}");
        }
        self.next_overwrite = Some(slot);
        Ok(())
    }

    /// Marks the given valid slots invalid in one batch. This is the
    /// interval-compaction path used by policies that let the cache run
    /// above budget and then shed several tokens at once; the per-step
    /// overwrite protocol never calls it.
    pub fn invalidate_slots(&mut self, slots: &[usize]) -> Result<()> {
        for &slot in slots {
            if slot >= self.capacity {
                return Err(Error::IndexOutOfRange { index: slot, len: self.capacity });
            }
            if !self.valid[slot] {
                return Err(Error::InvalidSlot(slot));
            }
        }
        for &slot in slots {
            self.valid[slot] = false;
            self.valid_count -= 1;
            if self.next_overwrite == Some(slot) {
                self.next_overwrite = None;
            }
        }
        Ok(())
    }
}
