//! Timing sanity runs: per-write latency, a full sync round, and lookups
//! against a large Map. These are regression guards on commodity hardware,
//! not reproductions of any embedded-platform numbers.

use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fleet::{provision_fleet, FleetConfig};
use crate::sim::SensCryptWorld;

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub record_len: u32,
    pub record_data_iters: u32,
    pub record_data_mean_us: f64,
    pub upload_round_records: u32,
    pub upload_round_ms: f64,
    pub uploads_per_sec: f64,
    pub upload_payload_bytes: usize,
    pub map_entries: usize,
    pub map_lookup_mean_us: f64,
    pub map_lookups_ok: bool,
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "bench report")?;
        writeln!(
            f,
            "  record_data      mean {:.2} us over {} writes (R={})",
            self.record_data_mean_us, self.record_data_iters, self.record_len
        )?;
        writeln!(
            f,
            "  upload round     {:.2} ms for {} records ({} payload bytes), {:.1} uploads/s",
            self.upload_round_ms,
            self.upload_round_records,
            self.upload_payload_bytes,
            self.uploads_per_sec
        )?;
        writeln!(
            f,
            "  map lookup       mean {:.2} us across {} entries (all found: {})",
            self.map_lookup_mean_us, self.map_entries, self.map_lookups_ok
        )
    }
}

/// Run the three timing probes. `map_entries` sizes the synthetic Map.
pub fn run_bench(record_len: u32, map_entries: usize, seed: u64) -> BenchReport {
    // per-write latency on a default-geometry tracker
    let iters: u32 = 1000;
    let mut world = SensCryptWorld::new(seed, iters + 8, record_len);
    let started = Instant::now();
    for _ in 0..iters {
        world.write_random().expect("memory sized for the loop");
    }
    let record_data_mean_us = started.elapsed().as_secs_f64() * 1e6 / iters as f64;

    // full sync round at the 71-record reference scenario size
    let upload_round_records: u32 = 71;
    let mut world = SensCryptWorld::new(seed ^ 1, 128, record_len);
    let rounds = 5u32;
    let mut total = 0.0f64;
    let mut payload_bytes = 0usize;
    for _ in 0..rounds {
        for _ in 0..upload_round_records {
            world.write_random().unwrap();
        }
        let started = Instant::now();
        let report = world.upload().expect("in-process upload");
        total += started.elapsed().as_secs_f64();
        payload_bytes = report.payload_bytes;
    }
    let upload_round_ms = total * 1e3 / rounds as f64;
    let uploads_per_sec = 1e3 / upload_round_ms;

    // lookups against a large synthetic Map
    let fleet = provision_fleet(&FleetConfig {
        seed: seed ^ 2,
        trackers: 0,
        record_count: 0,
        record_len,
        explicit_ids: Vec::new(),
    })
    .expect("empty fleet");
    let mut server = fleet.server;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
    let mut ids = Vec::with_capacity(map_entries);
    for _ in 0..map_entries {
        let mut id = [0u8; 8];
        rng.fill_bytes(&mut id);
        let mut user = [0u8; 8];
        rng.fill_bytes(&mut user);
        let entry = crate::server::MapEntry {
            id_user: crate::server::UserId::new(user),
            id_tracker: crate::wire::TrackerId::new(id),
            k_t: crate::crypto::SymmetricKey::new([0x11; 16]),
            k_w: crate::crypto::SymmetricKey::new([0x22; 16]),
            ctr: crate::crypto::Generation::FIRST,
            salt: [0; crate::server::SALT_LEN],
            password_hash: [0; crate::server::PASSWORD_HASH_LEN],
            base_ids: vec![*b"BASE0001"],
        };
        if server.register(entry).is_ok() {
            ids.push(crate::wire::TrackerId::new(id));
        }
    }
    let probes = 1000.min(ids.len());
    let started = Instant::now();
    let mut all_found = true;
    for i in 0..probes {
        let id = ids[(i * 7919) % ids.len()];
        all_found &= server.lookup(id).map(|e| e.id_tracker == id).unwrap_or(false);
    }
    let map_lookup_mean_us = if probes > 0 {
        started.elapsed().as_secs_f64() * 1e6 / probes as f64
    } else {
        0.0
    };

    BenchReport {
        record_len,
        record_data_iters: iters,
        record_data_mean_us,
        upload_round_records,
        upload_round_ms,
        uploads_per_sec,
        upload_payload_bytes: payload_bytes,
        map_entries: ids.len(),
        map_lookup_mean_us,
        map_lookups_ok: all_found && probes > 0,
    }
}
