//! Tracker state machine: provisioned encoded memory, sensor-record
//! commits, upload payload construction and rewrite application.
//!
//! Memory is a circular buffer of n fixed-length records. `dirty` points at
//! the first written ("red") record, `clean` at the first available
//! ("green") one. A green record holds a server-chosen pre-image; a write
//! XORs the sensor data and the tracker-side pad into it in place, so the
//! device never stores plaintext and never needs extra space.
//!
//! The per-record generation is derived from pointer position: indices at
//! or past `dirty` carry the shared counter, indices below `dirty` (the
//! region the clean pointer has already cycled back over) carry counter+1.
//! Both sides derive it the same way, which keeps the wrapped branch of the
//! upload decodable.

use thiserror::Error;

use crate::crypto::{self, Generation, KeystreamDomain, SymmetricKey, KEY_LEN, REWRITE_PREFIX_LEN};
use crate::wire::{RewriteBatch, TrackerId, TrqDataBody};

/// Default record count, sized to a Fitbit-scale flash budget.
pub const DEFAULT_RECORD_COUNT: u32 = 1512;
/// Default record length in bytes.
pub const DEFAULT_RECORD_LEN: u32 = 64;

const SNAPSHOT_MAGIC: &[u8; 4] = b"SCTK";
const SNAPSHOT_VERSION: u8 = 1;
const FLAG_HAS_KEY: u8 = 0x01;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProvisionError {
    #[error("bad dimensions: {0}")]
    BadDimensions(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RecordError {
    /// Every record slot is red; the write is refused and the sample
    /// dropped, because overrunning `dirty` would double-encode a slot and
    /// leave it undecodable for everyone.
    #[error("tracker memory full: all records are written but unsynced")]
    MemoryFull,
    #[error("sensor record must be {expected} bytes, got {actual}")]
    WrongLength { expected: usize, actual: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApplyError {
    /// A sealed value decoded to the wrong generation: replay, corruption
    /// or forgery. Nothing was modified.
    #[error("rewrite batch rejected: {0}")]
    GenerationMismatch(#[from] crypto::GenerationMismatch),
    /// Batch does not cover exactly the red region in traversal order.
    #[error("rewrite batch does not match the red region: {0}")]
    CoverageMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SnapshotError {
    #[error("malformed tracker snapshot: {0}")]
    Malformed(String),
    #[error("snapshot carries no tracker key")]
    MissingKey,
}

/// A provisioned tracker: identity, shared key, generation counter and the
/// encoded circular record memory.
#[derive(Debug, Clone)]
pub struct Tracker {
    id: TrackerId,
    key: SymmetricKey,
    ctr: Generation,
    record_count: u32,
    record_len: u32,
    records: Vec<u8>,
    dirty: u32,
    clean: u32,
    red_count: u32,
    // per-record overwrite counters; test instrumentation, not protocol state
    wear: Vec<u64>,
}

impl Tracker {
    /// Install factory state: the n pre-images generated by the server for
    /// generation 1, pointers at zero, counter at 1.
    pub fn provision(
        id: TrackerId,
        key: SymmetricKey,
        record_len: u32,
        images: &[Vec<u8>],
    ) -> Result<Self, ProvisionError> {
        if images.is_empty() {
            return Err(ProvisionError::BadDimensions("record count must be at least 1".into()));
        }
        if record_len == 0 {
            return Err(ProvisionError::BadDimensions("record length must be at least 1".into()));
        }
        let mut records = Vec::with_capacity(images.len() * record_len as usize);
        for (i, image) in images.iter().enumerate() {
            if image.len() != record_len as usize {
                return Err(ProvisionError::BadDimensions(format!(
                    "image {i} is {} bytes, expected {record_len}",
                    image.len()
                )));
            }
            records.extend_from_slice(image);
        }
        Ok(Self {
            id,
            key,
            ctr: Generation::FIRST,
            record_count: images.len() as u32,
            record_len,
            records,
            dirty: 0,
            clean: 0,
            red_count: 0,
            wear: vec![0; images.len()],
        })
    }

    pub fn id(&self) -> TrackerId {
        self.id
    }

    pub(crate) fn key(&self) -> &SymmetricKey {
        &self.key
    }

    pub fn ctr(&self) -> Generation {
        self.ctr
    }

    pub fn record_count(&self) -> u32 {
        self.record_count
    }

    pub fn record_len(&self) -> u32 {
        self.record_len
    }

    pub fn dirty(&self) -> u32 {
        self.dirty
    }

    pub fn clean(&self) -> u32 {
        self.clean
    }

    pub fn red_count(&self) -> u32 {
        self.red_count
    }

    pub fn wear(&self) -> &[u64] {
        &self.wear
    }

    pub fn record(&self, index: u32) -> &[u8] {
        let r = self.record_len as usize;
        &self.records[index as usize * r..(index as usize + 1) * r]
    }

    /// True when the red region crosses the end of memory (or fills it).
    pub fn wrapped(&self) -> bool {
        self.clean < self.dirty || self.red_count == self.record_count
    }

    /// Generation of the pre-image currently governing `index`, derived
    /// from pointer position: the prefix below `dirty` has already been
    /// cycled over and sits one generation ahead.
    pub fn generation_at(&self, index: u32) -> Generation {
        assert!(index < self.record_count, "record index out of range");
        if index < self.dirty {
            self.ctr.next()
        } else {
            self.ctr
        }
    }

    /// Red-region indices in traversal order dirty -> end -> start -> clean.
    pub fn red_indices(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.red_count as usize);
        let mut idx = self.dirty;
        for _ in 0..self.red_count {
            out.push(idx);
            idx += 1;
            if idx == self.record_count {
                idx = 0;
            }
        }
        out
    }

    /// Commit one sensor snapshot into the next green record.
    pub fn record_data(&mut self, data: &[u8]) -> Result<(), RecordError> {
        let r = self.record_len as usize;
        if data.len() != r {
            return Err(RecordError::WrongLength { expected: r, actual: data.len() });
        }
        if self.red_count == self.record_count {
            return Err(RecordError::MemoryFull);
        }
        let index = self.clean;
        let gen = self.generation_at(index);
        let pad = crypto::keystream(&self.key, gen, index, KeystreamDomain::Record, r);
        let slot = &mut self.records[index as usize * r..(index as usize + 1) * r];
        for ((byte, d), p) in slot.iter_mut().zip(data).zip(&pad) {
            *byte ^= d ^ p;
        }
        self.wear[index as usize] += 1;
        self.clean += 1;
        if self.clean == self.record_count {
            self.clean = 0;
        }
        self.red_count += 1;
        Ok(())
    }

    /// Assemble the upload body: pointer header plus the red records in
    /// traversal order. Memory is not modified.
    pub fn build_upload_payload(&self) -> TrqDataBody {
        let r = self.record_len as usize;
        let mut records = Vec::with_capacity(self.red_count as usize * r);
        for index in self.red_indices() {
            records.extend_from_slice(self.record(index));
        }
        TrqDataBody {
            dirty: self.dirty,
            clean: self.clean,
            wrapped: self.wrapped(),
            red_count: self.red_count,
            records,
        }
    }

    /// Open and install a server rewrite batch. All-or-nothing: every seal
    /// is opened against its expected generation before anything is
    /// written back, so a rejected batch leaves the state bit-identical.
    pub fn apply_rewrites(&mut self, batch: &RewriteBatch) -> Result<(), ApplyError> {
        let expected = self.red_indices();
        if batch.entries.len() != expected.len() {
            return Err(ApplyError::CoverageMismatch(format!(
                "batch has {} entries, red region has {}",
                batch.entries.len(),
                expected.len()
            )));
        }
        let sealed_len = self.record_len as usize + REWRITE_PREFIX_LEN;
        let mut staged: Vec<(u32, Vec<u8>)> = Vec::with_capacity(batch.entries.len());
        for (entry, &want_index) in batch.entries.iter().zip(&expected) {
            if entry.index != want_index {
                return Err(ApplyError::CoverageMismatch(format!(
                    "batch index {} where traversal expects {want_index}",
                    entry.index
                )));
            }
            if entry.sealed.len() != sealed_len {
                return Err(ApplyError::CoverageMismatch(format!(
                    "sealed value is {} bytes, expected {sealed_len}",
                    entry.sealed.len()
                )));
            }
            let expected_gen = self.generation_at(entry.index).next();
            let (_, inner) = crypto::open_rewrite(&self.key, expected_gen, entry.index, &entry.sealed)?;
            staged.push((entry.index, inner));
        }

        let was_wrapped = self.wrapped();
        let r = self.record_len as usize;
        for (index, inner) in staged {
            self.records[index as usize * r..(index as usize + 1) * r].copy_from_slice(&inner);
            self.wear[index as usize] += 1;
        }
        if was_wrapped {
            self.ctr = self.ctr.next();
        }
        self.dirty = self.clean;
        self.red_count = 0;
        Ok(())
    }

    /// JTAG-RW attack surface: overwrite one record slot directly,
    /// bypassing the protocol. Harness use only.
    pub(crate) fn jtag_rw_overwrite(&mut self, index: u32, bytes: &[u8]) {
        let r = self.record_len as usize;
        assert_eq!(bytes.len(), r);
        self.records[index as usize * r..(index as usize + 1) * r].copy_from_slice(bytes);
        self.wear[index as usize] += 1;
    }

    /// JTAG-RW attack surface: force the buffer pointers. Harness use only.
    pub(crate) fn jtag_rw_set_pointers(&mut self, dirty: u32, clean: u32, red_count: u32) {
        assert!(dirty < self.record_count && clean < self.record_count && red_count <= self.record_count);
        self.dirty = dirty;
        self.clean = clean;
        self.red_count = red_count;
    }

    /// Serialize the full device state. `include_key` distinguishes a
    /// JTAG-R dump (memory plus key) from a Capture dump (memory only).
    pub fn snapshot(&self, include_key: bool) -> Vec<u8> {
        let snap = TrackerSnapshot {
            id: self.id,
            record_count: self.record_count,
            record_len: self.record_len,
            dirty: self.dirty,
            clean: self.clean,
            red_count: self.red_count,
            ctr: self.ctr,
            records: self.records.clone(),
            key: include_key.then_some(self.key),
        };
        snap.encode()
    }

    /// Rebuild a live tracker from a snapshot that includes the key.
    /// Wear counters are instrumentation, not protocol state, and restart
    /// at zero.
    pub fn restore(bytes: &[u8]) -> Result<Self, SnapshotError> {
        let snap = TrackerSnapshot::parse(bytes)?;
        let key = snap.key.ok_or(SnapshotError::MissingKey)?;
        Ok(Self {
            id: snap.id,
            key,
            ctr: snap.ctr,
            record_count: snap.record_count,
            record_len: snap.record_len,
            wear: vec![0; snap.record_count as usize],
            records: snap.records,
            dirty: snap.dirty,
            clean: snap.clean,
            red_count: snap.red_count,
        })
    }
}

/// Parsed device dump. What an attacker holds after Capture (no key) or
/// JTAG-R (with key).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackerSnapshot {
    pub id: TrackerId,
    pub record_count: u32,
    pub record_len: u32,
    pub dirty: u32,
    pub clean: u32,
    pub red_count: u32,
    pub ctr: Generation,
    pub records: Vec<u8>,
    pub key: Option<SymmetricKey>,
}

impl TrackerSnapshot {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(34 + self.records.len() + KEY_LEN);
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.push(SNAPSHOT_VERSION);
        out.push(if self.key.is_some() { FLAG_HAS_KEY } else { 0 });
        out.extend_from_slice(self.id.as_bytes());
        out.extend_from_slice(&self.record_count.to_be_bytes());
        out.extend_from_slice(&self.record_len.to_be_bytes());
        out.extend_from_slice(&self.dirty.to_be_bytes());
        out.extend_from_slice(&self.clean.to_be_bytes());
        out.extend_from_slice(&self.red_count.to_be_bytes());
        out.extend_from_slice(&self.ctr.get().to_be_bytes());
        out.extend_from_slice(&self.records);
        if let Some(key) = &self.key {
            out.extend_from_slice(key.as_bytes());
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, SnapshotError> {
        let malformed = |why: &str| SnapshotError::Malformed(why.into());
        if bytes.len() < 38 {
            return Err(malformed("truncated header"));
        }
        if &bytes[0..4] != SNAPSHOT_MAGIC {
            return Err(malformed("bad magic"));
        }
        if bytes[4] != SNAPSHOT_VERSION {
            return Err(malformed("unsupported version"));
        }
        let has_key = match bytes[5] {
            0 => false,
            FLAG_HAS_KEY => true,
            _ => return Err(malformed("unknown flags")),
        };
        let id = TrackerId::from_slice(&bytes[6..14]).map_err(|_| malformed("bad id"))?;
        let word = |at: usize| u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap());
        let record_count = word(14);
        let record_len = word(18);
        let dirty = word(22);
        let clean = word(26);
        let red_count = word(30);
        let ctr_raw = word(34);
        if ctr_raw == 0 {
            return Err(malformed("zero generation counter"));
        }
        let mem_len = (record_count as usize)
            .checked_mul(record_len as usize)
            .ok_or_else(|| malformed("memory size overflow"))?;
        let expected = 38 + mem_len + if has_key { KEY_LEN } else { 0 };
        if bytes.len() != expected {
            return Err(malformed("length disagrees with header"));
        }
        if record_count == 0 || record_len == 0 {
            return Err(malformed("degenerate geometry"));
        }
        if dirty >= record_count || clean >= record_count || red_count > record_count {
            return Err(malformed("pointers out of range"));
        }
        let records = bytes[38..38 + mem_len].to_vec();
        let key = has_key
            .then(|| SymmetricKey::from_slice(&bytes[38 + mem_len..]).expect("length checked"));
        Ok(Self {
            id,
            record_count,
            record_len,
            dirty,
            clean,
            red_count,
            ctr: Generation::new(ctr_raw),
            records,
            key,
        })
    }

    pub fn record(&self, index: u32) -> &[u8] {
        let r = self.record_len as usize;
        &self.records[index as usize * r..(index as usize + 1) * r]
    }

    /// Same positional generation rule a live tracker uses; an attacker
    /// holding a dump can derive it from the dumped pointers.
    pub fn generation_at(&self, index: u32) -> Generation {
        if index < self.dirty {
            self.ctr.next()
        } else {
            self.ctr
        }
    }

    /// Red-region membership for an index, derived from the dumped pointers.
    pub fn is_red(&self, index: u32) -> bool {
        let mut idx = self.dirty;
        for _ in 0..self.red_count {
            if idx == index {
                return true;
            }
            idx += 1;
            if idx == self.record_count {
                idx = 0;
            }
        }
        false
    }
}
