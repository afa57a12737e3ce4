//! Webserver logic: the Map store of per-tracker entries, upload decoding,
//! rewrite-batch issuance and durable persistence.
//!
//! An upload is processed atomically per tracker: decode, append to the
//! fitness store, emit the rewrite batch and advance the counter as one
//! step. A tracker that never received the batch (crashed session) will
//! re-upload the same red region; re-processing is deduplicated on the
//! header plus a payload digest and re-emits the original batch without
//! appending twice.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::crypto::{self, Generation, KeystreamDomain, SymmetricKey, KEY_LEN};
use crate::wire::{RewriteBatch, RewriteEntry, TrackerId, TrqDataBody};

pub const SALT_LEN: usize = 16;
pub const PASSWORD_HASH_LEN: usize = 28;
/// Storage-accounting key size: the Map budget is quoted at 32 B per
/// key even though the operative cipher keys are 16 B.
pub const ACCOUNTED_KEY_LEN: usize = 32;

const STORE_MAGIC: &[u8; 5] = b"SCSRV";
const STORE_VERSION: u8 = 1;

/// 8-byte public user identifier.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UserId([u8; 8]);

impl UserId {
    pub fn new(bytes: [u8; 8]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 8] {
        &self.0
    }
}

impl std::fmt::Display for UserId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl std::fmt::Debug for UserId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "UserId({})", hex::encode(self.0))
    }
}

pub type BaseId = [u8; 8];

/// Per-tracker row of the Map store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MapEntry {
    pub id_user: UserId,
    pub id_tracker: TrackerId,
    pub k_t: SymmetricKey,
    pub k_w: SymmetricKey,
    pub ctr: Generation,
    pub salt: [u8; SALT_LEN],
    pub password_hash: [u8; PASSWORD_HASH_LEN],
    pub base_ids: Vec<BaseId>,
}

/// Storage cost of one entry under the quoted budget accounting (ids for
/// user, tracker and each base, salt, password hash, two keys, a 1-byte
/// counter).
pub fn map_entry_size(entry: &MapEntry) -> usize {
    map_entry_size_with_key_len(entry, ACCOUNTED_KEY_LEN)
}

pub fn map_entry_size_with_key_len(entry: &MapEntry, key_len: usize) -> usize {
    8 * (2 + entry.base_ids.len()) + SALT_LEN + PASSWORD_HASH_LEN + 2 * key_len + 1
}

/// One decoded sensor record from an upload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedRecord {
    pub record_index: u32,
    pub data: Vec<u8>,
}

/// Append-only decoded-data row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FitnessRow {
    pub upload_seq: u64,
    pub record_index: u32,
    pub data: Vec<u8>,
    pub received_tick: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
struct FitnessSeries {
    uploads_processed: u64,
    rows: Vec<FitnessRow>,
}

/// Append-only store of decoded records per (user, tracker) pair.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FitnessStore {
    series: BTreeMap<(UserId, TrackerId), FitnessSeries>,
}

impl FitnessStore {
    pub fn rows(&self, user: UserId, tracker: TrackerId) -> &[FitnessRow] {
        self.series.get(&(user, tracker)).map_or(&[], |s| &s.rows)
    }

    pub fn total_rows(&self) -> usize {
        self.series.values().map(|s| s.rows.len()).sum()
    }
}

/// Memory geometry learned at provisioning time, used to cross-check
/// upload headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub record_count: u32,
    pub record_len: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct LastUpload {
    dirty: u32,
    clean: u32,
    wrapped: bool,
    red_count: u32,
    payload_digest: [u8; 32],
    ctr_used: u32,
    record_len: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("unknown tracker id")]
pub struct NotFound;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegisterError {
    #[error("tracker id already registered")]
    DuplicateTracker,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProvisionImagesError {
    #[error(transparent)]
    NotFound(#[from] NotFound),
    #[error("tracker already provisioned: counter has advanced past 1")]
    AlreadyProvisioned,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UploadError {
    #[error(transparent)]
    NotFound(#[from] NotFound),
    /// Structure the MAC cannot vouch for: pointer fields, flags and byte
    /// counts that do not add up.
    #[error("inconsistent upload header: {0}")]
    HeaderInconsistent(String),
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("corrupt store: {0}")]
    CorruptStore(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Result of processing one upload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UploadOutcome {
    pub decoded: Vec<DecodedRecord>,
    pub batch: RewriteBatch,
    /// True when this payload was already processed (crash-recovery
    /// re-upload); the batch is re-emitted and nothing is appended.
    pub duplicate: bool,
}

/// The webserver state: Map store, fitness store and dedup bookkeeping.
#[derive(Debug, Clone, Default)]
pub struct Server {
    entries: BTreeMap<TrackerId, MapEntry>,
    fitness: FitnessStore,
    last_uploads: BTreeMap<TrackerId, LastUpload>,
    geometry: BTreeMap<TrackerId, Geometry>,
}

impl Server {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, entry: MapEntry) -> Result<(), RegisterError> {
        if self.entries.contains_key(&entry.id_tracker) {
            return Err(RegisterError::DuplicateTracker);
        }
        self.entries.insert(entry.id_tracker, entry);
        Ok(())
    }

    pub fn lookup(&self, id: TrackerId) -> Result<&MapEntry, NotFound> {
        self.entries.get(&id).ok_or(NotFound)
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    pub fn fitness(&self) -> &FitnessStore {
        &self.fitness
    }

    /// Factory images for a fresh tracker: record i starts out holding the
    /// generation-1 pre-image for i. The geometry is remembered so later
    /// upload headers can be checked against it.
    pub fn provision_images(
        &mut self,
        id: TrackerId,
        record_count: u32,
        record_len: u32,
    ) -> Result<Vec<Vec<u8>>, ProvisionImagesError> {
        let entry = self.lookup(id)?;
        if entry.ctr != Generation::FIRST {
            return Err(ProvisionImagesError::AlreadyProvisioned);
        }
        let images = (0..record_count)
            .map(|i| {
                crypto::keystream(
                    &entry.k_w,
                    Generation::FIRST,
                    i,
                    KeystreamDomain::Record,
                    record_len as usize,
                )
            })
            .collect();
        self.geometry.insert(id, Geometry { record_count, record_len });
        Ok(images)
    }

    /// Decode an upload, append the records, emit the covering rewrite
    /// batch, and advance the counter if the region wrapped. The payload's
    /// MAC has already been checked by the wire layer; this validates the
    /// structure the MAC cannot vouch for.
    pub fn process_upload(
        &mut self,
        id: TrackerId,
        body: &TrqDataBody,
        tick: u64,
    ) -> Result<UploadOutcome, UploadError> {
        let entry = self.entries.get(&id).ok_or(NotFound)?;
        let layout = UploadLayout::validate(body, self.geometry.get(&id).copied())?;

        let digest: [u8; 32] = Sha256::digest(&body.records).into();
        if let Some(last) = self.last_uploads.get(&id) {
            let same_header = (last.dirty, last.clean, last.wrapped, last.red_count)
                == (body.dirty, body.clean, body.wrapped, body.red_count);
            if same_header && last.payload_digest == digest {
                let batch = build_batch(entry, &layout, Generation::new(last.ctr_used));
                return Ok(UploadOutcome { decoded: Vec::new(), batch, duplicate: true });
            }
        }

        let ctr_used = entry.ctr;
        let mut decoded = Vec::with_capacity(layout.indices.len());
        let record_len = layout.record_len;
        for (pos, &(index, gen)) in layout.indices.iter().enumerate() {
            let gen = if gen == 0 { ctr_used } else { ctr_used.next() };
            let start = pos * record_len;
            let chunk = &body.records[start..start + record_len];
            let pad_w = crypto::keystream(&entry.k_w, gen, index, KeystreamDomain::Record, record_len);
            let pad_t = crypto::keystream(&entry.k_t, gen, index, KeystreamDomain::Record, record_len);
            let data: Vec<u8> = chunk
                .iter()
                .zip(&pad_w)
                .zip(&pad_t)
                .map(|((c, w), t)| c ^ w ^ t)
                .collect();
            decoded.push(DecodedRecord { record_index: index, data });
        }

        let batch = build_batch(entry, &layout, ctr_used);

        // commit: fitness rows, dedup record, counter advance
        let series = self
            .fitness
            .series
            .entry((entry.id_user, entry.id_tracker))
            .or_default();
        let seq = series.uploads_processed;
        series.uploads_processed += 1;
        for rec in &decoded {
            series.rows.push(FitnessRow {
                upload_seq: seq,
                record_index: rec.record_index,
                data: rec.data.clone(),
                received_tick: tick,
            });
        }
        self.last_uploads.insert(
            id,
            LastUpload {
                dirty: body.dirty,
                clean: body.clean,
                wrapped: body.wrapped,
                red_count: body.red_count,
                payload_digest: digest,
                ctr_used: ctr_used.get(),
                record_len: record_len as u32,
            },
        );
        if body.wrapped {
            self.entries.get_mut(&id).expect("looked up above").ctr = ctr_used.next();
        }
        Ok(UploadOutcome { decoded, batch, duplicate: false })
    }

    /// Write the whole store (Map, fitness data, dedup bookkeeping) to one
    /// durable file with a trailing whole-file checksum.
    pub fn persist(&self, path: &Path) -> Result<(), StoreError> {
        let mut out = Vec::new();
        out.extend_from_slice(STORE_MAGIC);
        out.push(STORE_VERSION);

        out.extend_from_slice(&(self.entries.len() as u32).to_be_bytes());
        for entry in self.entries.values() {
            out.extend_from_slice(entry.id_user.as_bytes());
            out.extend_from_slice(entry.id_tracker.as_bytes());
            out.extend_from_slice(entry.k_t.as_bytes());
            out.extend_from_slice(entry.k_w.as_bytes());
            out.extend_from_slice(&entry.ctr.get().to_be_bytes());
            out.extend_from_slice(&entry.salt);
            out.extend_from_slice(&entry.password_hash);
            out.push(entry.base_ids.len() as u8);
            for base in &entry.base_ids {
                out.extend_from_slice(base);
            }
        }

        out.extend_from_slice(&(self.geometry.len() as u32).to_be_bytes());
        for (id, g) in &self.geometry {
            out.extend_from_slice(id.as_bytes());
            out.extend_from_slice(&g.record_count.to_be_bytes());
            out.extend_from_slice(&g.record_len.to_be_bytes());
        }

        out.extend_from_slice(&(self.last_uploads.len() as u32).to_be_bytes());
        for (id, last) in &self.last_uploads {
            out.extend_from_slice(id.as_bytes());
            out.extend_from_slice(&last.dirty.to_be_bytes());
            out.extend_from_slice(&last.clean.to_be_bytes());
            out.push(last.wrapped as u8);
            out.extend_from_slice(&last.red_count.to_be_bytes());
            out.extend_from_slice(&last.payload_digest);
            out.extend_from_slice(&last.ctr_used.to_be_bytes());
            out.extend_from_slice(&last.record_len.to_be_bytes());
        }

        out.extend_from_slice(&(self.fitness.series.len() as u32).to_be_bytes());
        for ((user, tracker), series) in &self.fitness.series {
            out.extend_from_slice(user.as_bytes());
            out.extend_from_slice(tracker.as_bytes());
            out.extend_from_slice(&series.uploads_processed.to_be_bytes());
            out.extend_from_slice(&(series.rows.len() as u32).to_be_bytes());
            for row in &series.rows {
                out.extend_from_slice(&row.upload_seq.to_be_bytes());
                out.extend_from_slice(&row.record_index.to_be_bytes());
                out.extend_from_slice(&row.received_tick.to_be_bytes());
                out.extend_from_slice(&(row.data.len() as u32).to_be_bytes());
                out.extend_from_slice(&row.data);
            }
        }

        let digest: [u8; 32] = Sha256::digest(&out).into();
        out.extend_from_slice(&digest);
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn restore(path: &Path) -> Result<Self, StoreError> {
        let bytes = std::fs::read(path)?;
        let corrupt = |why: &str| StoreError::CorruptStore(why.into());
        if bytes.len() < 6 + 32 {
            return Err(corrupt("file too short"));
        }
        let (payload, trailer) = bytes.split_at(bytes.len() - 32);
        let digest: [u8; 32] = Sha256::digest(payload).into();
        if digest != trailer {
            return Err(corrupt("checksum mismatch"));
        }
        if &payload[0..5] != STORE_MAGIC {
            return Err(corrupt("bad magic"));
        }
        if payload[5] != STORE_VERSION {
            return Err(corrupt("unsupported version"));
        }

        let mut reader = Reader { bytes: payload, off: 6 };
        let mut server = Server::new();

        let entry_count = reader.u32()?;
        for _ in 0..entry_count {
            let id_user = UserId::new(reader.array::<8>()?);
            let id_tracker = TrackerId::new(reader.array::<8>()?);
            let k_t = SymmetricKey::new(reader.array::<KEY_LEN>()?);
            let k_w = SymmetricKey::new(reader.array::<KEY_LEN>()?);
            let ctr_raw = reader.u32()?;
            if ctr_raw == 0 {
                return Err(corrupt("zero counter"));
            }
            let salt = reader.array::<SALT_LEN>()?;
            let password_hash = reader.array::<PASSWORD_HASH_LEN>()?;
            let base_count = reader.u8()? as usize;
            let mut base_ids = Vec::with_capacity(base_count);
            for _ in 0..base_count {
                base_ids.push(reader.array::<8>()?);
            }
            server
                .register(MapEntry {
                    id_user,
                    id_tracker,
                    k_t,
                    k_w,
                    ctr: Generation::new(ctr_raw),
                    salt,
                    password_hash,
                    base_ids,
                })
                .map_err(|_| corrupt("duplicate tracker entry"))?;
        }

        let geometry_count = reader.u32()?;
        for _ in 0..geometry_count {
            let id = TrackerId::new(reader.array::<8>()?);
            let record_count = reader.u32()?;
            let record_len = reader.u32()?;
            server.geometry.insert(id, Geometry { record_count, record_len });
        }

        let last_count = reader.u32()?;
        for _ in 0..last_count {
            let id = TrackerId::new(reader.array::<8>()?);
            let dirty = reader.u32()?;
            let clean = reader.u32()?;
            let wrapped = match reader.u8()? {
                0 => false,
                1 => true,
                _ => return Err(corrupt("bad wrapped flag")),
            };
            let red_count = reader.u32()?;
            let payload_digest = reader.array::<32>()?;
            let ctr_used = reader.u32()?;
            let record_len = reader.u32()?;
            server.last_uploads.insert(
                id,
                LastUpload { dirty, clean, wrapped, red_count, payload_digest, ctr_used, record_len },
            );
        }

        let series_count = reader.u32()?;
        for _ in 0..series_count {
            let user = UserId::new(reader.array::<8>()?);
            let tracker = TrackerId::new(reader.array::<8>()?);
            let uploads_processed = reader.u64()?;
            let row_count = reader.u32()?;
            let mut rows = Vec::with_capacity(row_count as usize);
            for _ in 0..row_count {
                let upload_seq = reader.u64()?;
                let record_index = reader.u32()?;
                let received_tick = reader.u64()?;
                let data_len = reader.u32()? as usize;
                let data = reader.slice(data_len)?.to_vec();
                rows.push(FitnessRow { upload_seq, record_index, data, received_tick });
            }
            server
                .fitness
                .series
                .insert((user, tracker), FitnessSeries { uploads_processed, rows });
        }

        if reader.off != payload.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(server)
    }
}

/// Validated upload geometry: which indices get decoded, with which
/// generation offset (0 = current counter, 1 = counter + 1).
struct UploadLayout {
    indices: Vec<(u32, u8)>,
    record_len: usize,
}

impl UploadLayout {
    fn validate(body: &TrqDataBody, geometry: Option<Geometry>) -> Result<Self, UploadError> {
        let bad = |why: String| UploadError::HeaderInconsistent(why);
        let red = body.red_count as usize;

        if let Some(g) = geometry {
            if body.dirty >= g.record_count || body.clean >= g.record_count || body.red_count > g.record_count {
                return Err(bad(format!(
                    "pointers ({}, {}, red {}) exceed the provisioned {} records",
                    body.dirty, body.clean, body.red_count, g.record_count
                )));
            }
            if body.records.len() != red * g.record_len as usize {
                return Err(bad(format!(
                    "{} record bytes where {red} x {} were declared",
                    body.records.len(),
                    g.record_len
                )));
            }
        }

        if red == 0 {
            if body.wrapped || body.dirty != body.clean || !body.records.is_empty() {
                return Err(bad("empty upload with wrapped flag, moved pointers or stray bytes".into()));
            }
            return Ok(Self { indices: Vec::new(), record_len: 0 });
        }

        if !body.records.len().is_multiple_of(red) {
            return Err(bad(format!(
                "{} record bytes do not divide into {red} records",
                body.records.len()
            )));
        }
        let record_len = body.records.len() / red;
        if record_len == 0 {
            return Err(bad("zero-length records".into()));
        }

        let mut indices = Vec::with_capacity(red);
        if !body.wrapped {
            if body.clean < body.dirty || (body.clean - body.dirty) as usize != red {
                return Err(bad(format!(
                    "unwrapped region [{}, {}) disagrees with red count {red}",
                    body.dirty, body.clean
                )));
            }
            for i in body.dirty..body.clean {
                indices.push((i, 0));
            }
        } else {
            // wrapped: the region is [dirty, n) then [0, clean), so the
            // header implies n; with known geometry it must match exactly
            if body.clean > body.dirty || (body.clean as usize) >= red {
                return Err(bad(format!(
                    "wrapped region with clean={} dirty={} red count {red} is impossible",
                    body.clean, body.dirty
                )));
            }
            let n = body.dirty as usize + red - body.clean as usize;
            if let Some(g) = geometry {
                if n != g.record_count as usize {
                    return Err(bad(format!(
                        "wrapped header implies {n} records, tracker has {}",
                        g.record_count
                    )));
                }
            }
            for i in body.dirty as usize..n {
                indices.push((i as u32, 0));
            }
            for i in 0..body.clean {
                indices.push((i, 1));
            }
        }
        Ok(Self { indices, record_len })
    }
}

fn build_batch(entry: &MapEntry, layout: &UploadLayout, ctr_used: Generation) -> RewriteBatch {
    let entries = layout
        .indices
        .iter()
        .map(|&(index, offset)| {
            let gen_new = if offset == 0 { ctr_used.next() } else { ctr_used.next().next() };
            let inner = crypto::keystream(
                &entry.k_w,
                gen_new,
                index,
                KeystreamDomain::Record,
                layout.record_len,
            );
            RewriteEntry {
                index,
                sealed: crypto::seal_rewrite(&entry.k_t, gen_new, index, &inner),
            }
        })
        .collect();
    RewriteBatch { entries }
}

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn slice(&mut self, len: usize) -> Result<&'a [u8], StoreError> {
        if self.off + len > self.bytes.len() {
            return Err(StoreError::CorruptStore("unexpected end of file".into()));
        }
        let s = &self.bytes[self.off..self.off + len];
        self.off += len;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], StoreError> {
        Ok(self.slice(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8, StoreError> {
        Ok(self.slice(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_be_bytes(self.array::<4>()?))
    }

    fn u64(&mut self) -> Result<u64, StoreError> {
        Ok(u64::from_be_bytes(self.array::<8>()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracker::Tracker;

    fn entry(user: u8, tracker: u8) -> MapEntry {
        MapEntry {
            id_user: UserId::new([user; 8]),
            id_tracker: TrackerId::new([tracker; 8]),
            k_t: SymmetricKey::new([tracker ^ 0xAA; KEY_LEN]),
            k_w: SymmetricKey::new([tracker ^ 0x55; KEY_LEN]),
            ctr: Generation::FIRST,
            salt: [user; SALT_LEN],
            password_hash: [tracker; PASSWORD_HASH_LEN],
            base_ids: vec![[9; 8]],
        }
    }

    fn world(n: u32, r: u32) -> (Server, Tracker) {
        let mut server = Server::new();
        let e = entry(1, 2);
        let id = e.id_tracker;
        let key = e.k_t;
        server.register(e).unwrap();
        let images = server.provision_images(id, n, r).unwrap();
        let tracker = Tracker::provision(id, key, r, &images).unwrap();
        (server, tracker)
    }

    #[test]
    fn lookup_known_and_unknown() {
        let mut server = Server::new();
        server.register(entry(1, 2)).unwrap();
        assert!(server.lookup(TrackerId::new([2; 8])).is_ok());
        assert_eq!(server.lookup(TrackerId::new([3; 8])).unwrap_err(), NotFound);
        assert_eq!(server.register(entry(4, 2)).unwrap_err(), RegisterError::DuplicateTracker);
    }

    #[test]
    fn provision_images_gating() {
        let mut server = Server::new();
        let mut e = entry(1, 2);
        e.ctr = Generation::new(3);
        let id = e.id_tracker;
        server.register(e).unwrap();
        assert!(matches!(
            server.provision_images(id, 4, 64),
            Err(ProvisionImagesError::AlreadyProvisioned)
        ));

        server.register(entry(1, 7)).unwrap();
        assert!(server.provision_images(TrackerId::new([7; 8]), 0, 64).unwrap().is_empty());
    }

    #[test]
    fn distinct_trackers_get_disjoint_images() {
        let mut server = Server::new();
        server.register(entry(1, 2)).unwrap();
        server.register(entry(1, 3)).unwrap();
        let a = server.provision_images(TrackerId::new([2; 8]), 8, 64).unwrap();
        let b = server.provision_images(TrackerId::new([3; 8]), 8, 64).unwrap();
        for img in &a {
            assert!(!b.contains(img));
        }
    }

    #[test]
    fn empty_upload_decodes_nothing_and_keeps_ctr() {
        let (mut server, tracker) = world(4, 16);
        let id = tracker.id();
        let out = server.process_upload(id, &tracker.build_upload_payload(), 0).unwrap();
        assert!(out.decoded.is_empty());
        assert!(out.batch.entries.is_empty());
        assert_eq!(server.lookup(id).unwrap().ctr, Generation::FIRST);
    }

    #[test]
    fn unwrapped_roundtrip_recovers_writes() {
        let (mut server, mut tracker) = world(8, 32);
        let id = tracker.id();
        let written: Vec<Vec<u8>> = (0..3u8).map(|i| vec![i + 10; 32]).collect();
        for d in &written {
            tracker.record_data(d).unwrap();
        }
        let out = server.process_upload(id, &tracker.build_upload_payload(), 5).unwrap();
        let got: Vec<&Vec<u8>> = out.decoded.iter().map(|d| &d.data).collect();
        assert_eq!(got, written.iter().collect::<Vec<_>>());
        // counter unchanged on the unwrapped branch, on both sides
        assert_eq!(server.lookup(id).unwrap().ctr, Generation::FIRST);
        tracker.apply_rewrites(&out.batch).unwrap();
        assert_eq!(tracker.ctr(), Generation::FIRST);
        assert_eq!(tracker.dirty(), tracker.clean());
        assert_eq!(tracker.red_count(), 0);
    }

    #[test]
    fn wrapped_roundtrip_advances_ctr_in_sync() {
        let (mut server, mut tracker) = world(4, 16);
        let id = tracker.id();
        // fill to wrap: 3 writes, upload, 3 more writes crosses the end
        for i in 0..3u8 {
            tracker.record_data(&[i; 16]).unwrap();
        }
        let out = server.process_upload(id, &tracker.build_upload_payload(), 1).unwrap();
        tracker.apply_rewrites(&out.batch).unwrap();

        let mut written = Vec::new();
        for i in 10..13u8 {
            tracker.record_data(&[i; 16]).unwrap();
            written.push(vec![i; 16]);
        }
        assert!(tracker.wrapped());
        let payload = tracker.build_upload_payload();
        let out = server.process_upload(id, &payload, 2).unwrap();
        let got: Vec<&Vec<u8>> = out.decoded.iter().map(|d| &d.data).collect();
        assert_eq!(got, written.iter().collect::<Vec<_>>());

        tracker.apply_rewrites(&out.batch).unwrap();
        assert_eq!(tracker.ctr(), Generation::new(2));
        assert_eq!(server.lookup(id).unwrap().ctr, Generation::new(2));
    }

    #[test]
    fn replayed_batch_is_rejected_atomically() {
        let (mut server, mut tracker) = world(4, 16);
        let id = tracker.id();
        tracker.record_data(&[1; 16]).unwrap();
        let out = server.process_upload(id, &tracker.build_upload_payload(), 0).unwrap();
        tracker.apply_rewrites(&out.batch).unwrap();

        tracker.record_data(&[2; 16]).unwrap();
        let before = tracker.snapshot(true);
        // the old batch covers index 0; the red region is now index 1
        let err = tracker.apply_rewrites(&out.batch).unwrap_err();
        assert!(matches!(err, crate::tracker::ApplyError::CoverageMismatch(_)));
        assert_eq!(tracker.snapshot(true), before);
    }

    #[test]
    fn stale_batch_for_the_same_region_is_rejected_by_generation() {
        // n=2: cycle the buffer until index 0 is red again, then replay
        // the batch that re-imaged it a generation ago. Coverage matches,
        // freshness does not.
        let (mut server, mut tracker) = world(2, 16);
        let id = tracker.id();

        tracker.record_data(&[1; 16]).unwrap();
        let first = server.process_upload(id, &tracker.build_upload_payload(), 0).unwrap();
        tracker.apply_rewrites(&first.batch).unwrap();

        tracker.record_data(&[2; 16]).unwrap();
        let second = server.process_upload(id, &tracker.build_upload_payload(), 1).unwrap();
        tracker.apply_rewrites(&second.batch).unwrap();
        assert_eq!(tracker.ctr(), Generation::new(2));

        // index 0 is red again, exactly what the stale batch covers
        tracker.record_data(&[3; 16]).unwrap();
        assert_eq!(tracker.red_indices(), vec![0]);
        assert_eq!(first.batch.entries[0].index, 0);

        let before = tracker.snapshot(true);
        let err = tracker.apply_rewrites(&first.batch).unwrap_err();
        assert!(matches!(err, crate::tracker::ApplyError::GenerationMismatch(_)), "got {err:?}");
        assert_eq!(tracker.snapshot(true), before);
    }

    #[test]
    fn full_buffer_wrapped_upload_decodes_at_any_dirty_position() {
        let (mut server, mut tracker) = world(4, 16);
        let id = tracker.id();
        // move dirty to 2, then fill the whole buffer
        for i in 0..2u8 {
            tracker.record_data(&[i; 16]).unwrap();
        }
        let out = server.process_upload(id, &tracker.build_upload_payload(), 0).unwrap();
        tracker.apply_rewrites(&out.batch).unwrap();
        assert_eq!(tracker.dirty(), 2);

        let mut written = Vec::new();
        for i in 10..14u8 {
            tracker.record_data(&[i; 16]).unwrap();
            written.push(vec![i; 16]);
        }
        assert_eq!(tracker.red_count(), 4);
        assert_eq!(tracker.dirty(), tracker.clean());
        let payload = tracker.build_upload_payload();
        assert!(payload.wrapped);

        let out = server.process_upload(id, &payload, 1).unwrap();
        let got: Vec<&Vec<u8>> = out.decoded.iter().map(|d| &d.data).collect();
        assert_eq!(got, written.iter().collect::<Vec<_>>());
        tracker.apply_rewrites(&out.batch).unwrap();
        assert_eq!(tracker.ctr(), Generation::new(2));
        assert_eq!(server.lookup(id).unwrap().ctr, Generation::new(2));
    }

    #[test]
    fn duplicate_upload_reemits_batch_without_double_append() {
        let (mut server, mut tracker) = world(4, 16);
        let id = tracker.id();
        tracker.record_data(&[1; 16]).unwrap();
        tracker.record_data(&[2; 16]).unwrap();
        let payload = tracker.build_upload_payload();
        let first = server.process_upload(id, &payload, 0).unwrap();
        assert!(!first.duplicate);
        let rows_after_first = server.fitness().total_rows();

        // crashed session: tracker never applied, re-uploads the same region
        let second = server.process_upload(id, &payload, 1).unwrap();
        assert!(second.duplicate);
        assert_eq!(second.batch, first.batch);
        assert_eq!(server.fitness().total_rows(), rows_after_first);

        tracker.apply_rewrites(&second.batch).unwrap();
        assert_eq!(tracker.red_count(), 0);
    }

    #[test]
    fn wrapped_duplicate_reemits_batch_the_tracker_still_accepts() {
        let (mut server, mut tracker) = world(4, 16);
        let id = tracker.id();
        // reach a wrapped red region
        for i in 0..3u8 {
            tracker.record_data(&[i; 16]).unwrap();
        }
        let out = server.process_upload(id, &tracker.build_upload_payload(), 0).unwrap();
        tracker.apply_rewrites(&out.batch).unwrap();
        for i in 0..3u8 {
            tracker.record_data(&[10 + i; 16]).unwrap();
        }
        assert!(tracker.wrapped());
        let payload = tracker.build_upload_payload();

        // first processing advances the server counter; the batch is lost
        let first = server.process_upload(id, &payload, 1).unwrap();
        assert_eq!(server.lookup(id).unwrap().ctr, Generation::new(2));

        // the tracker re-uploads; the server re-emits the original batch
        // without touching the counter or the store again
        let rows = server.fitness().total_rows();
        let second = server.process_upload(id, &payload, 2).unwrap();
        assert!(second.duplicate);
        assert_eq!(second.batch, first.batch);
        assert_eq!(server.fitness().total_rows(), rows);
        assert_eq!(server.lookup(id).unwrap().ctr, Generation::new(2));

        // and the never-applied tracker accepts it, restoring sync
        tracker.apply_rewrites(&second.batch).unwrap();
        assert_eq!(tracker.ctr(), Generation::new(2));
        assert_eq!(tracker.red_count(), 0);
    }

    #[test]
    fn header_inconsistencies_are_rejected() {
        let (mut server, mut tracker) = world(4, 16);
        let id = tracker.id();
        tracker.record_data(&[1; 16]).unwrap();
        let good = tracker.build_upload_payload();

        let mut wrong_count = good.clone();
        wrong_count.red_count = 2;
        assert!(matches!(
            server.process_upload(id, &wrong_count, 0),
            Err(UploadError::HeaderInconsistent(_))
        ));

        let mut stray = good.clone();
        stray.records.push(0);
        assert!(matches!(
            server.process_upload(id, &stray, 0),
            Err(UploadError::HeaderInconsistent(_))
        ));

        let mut bad_flag = good.clone();
        bad_flag.wrapped = true;
        assert!(matches!(
            server.process_upload(id, &bad_flag, 0),
            Err(UploadError::HeaderInconsistent(_))
        ));

        assert!(matches!(
            server.process_upload(TrackerId::new([99; 8]), &good, 0),
            Err(UploadError::NotFound(_))
        ));
    }

    #[test]
    fn entry_size_matches_budget_accounting() {
        let e = entry(1, 2);
        assert_eq!(map_entry_size(&e), 133);
        let mut two_bases = e.clone();
        two_bases.base_ids.push([8; 8]);
        assert_eq!(map_entry_size(&two_bases), 141);
        assert_eq!(map_entry_size_with_key_len(&e, KEY_LEN), 133 - 32);
    }

    #[test]
    fn persist_restore_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.bin");

        let (mut server, mut tracker) = world(4, 16);
        let id = tracker.id();
        tracker.record_data(&[5; 16]).unwrap();
        server.process_upload(id, &tracker.build_upload_payload(), 7).unwrap();

        server.persist(&path).unwrap();
        let restored = Server::restore(&path).unwrap();
        assert_eq!(restored.entries, server.entries);
        assert_eq!(restored.fitness, server.fitness);
        assert_eq!(restored.last_uploads, server.last_uploads);
        assert_eq!(restored.geometry, server.geometry);
    }

    #[test]
    fn truncated_store_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.bin");
        let (server, _) = world(4, 16);
        server.persist(&path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Server::restore(&path), Err(StoreError::CorruptStore(_))));
    }
}
