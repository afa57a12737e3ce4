//! Fleet provisioning: mint identities and keys for a batch of trackers,
//! register them with a fresh server, and lay the factory state out on
//! disk (one snapshot per tracker plus the server store).

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::crypto::{Generation, SymmetricKey};
use crate::server::{MapEntry, Server, UserId, PASSWORD_HASH_LEN, SALT_LEN};
use crate::tracker::Tracker;
use crate::wire::TrackerId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FleetConfig {
    pub seed: u64,
    pub trackers: u32,
    pub record_count: u32,
    pub record_len: u32,
    /// Explicit ids override the seeded ones, in order.
    pub explicit_ids: Vec<TrackerId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FleetError {
    #[error("duplicate tracker id {0}")]
    DuplicateTrackerId(TrackerId),
    #[error("config asks for {got} explicit ids but {want} trackers")]
    IdCountMismatch { want: u32, got: usize },
}

pub struct ProvisionedFleet {
    pub server: Server,
    pub trackers: Vec<Tracker>,
}

pub fn provision_fleet(config: &FleetConfig) -> Result<ProvisionedFleet, FleetError> {
    if !config.explicit_ids.is_empty() && config.explicit_ids.len() != config.trackers as usize {
        return Err(FleetError::IdCountMismatch {
            want: config.trackers,
            got: config.explicit_ids.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut server = Server::new();
    let mut trackers = Vec::with_capacity(config.trackers as usize);

    for index in 0..config.trackers {
        let id = match config.explicit_ids.get(index as usize) {
            Some(id) => *id,
            None => {
                let mut bytes = [0u8; 8];
                rng.fill_bytes(&mut bytes);
                TrackerId::new(bytes)
            }
        };
        let mut user = [0u8; 8];
        rng.fill_bytes(&mut user);
        let mut k_t = [0u8; 16];
        rng.fill_bytes(&mut k_t);
        let k_t = SymmetricKey::new(k_t);
        let mut k_w = [0u8; 16];
        rng.fill_bytes(&mut k_w);
        let mut salt = [0u8; SALT_LEN];
        rng.fill_bytes(&mut salt);
        let mut password_hash = [0u8; PASSWORD_HASH_LEN];
        rng.fill_bytes(&mut password_hash);

        server
            .register(MapEntry {
                id_user: UserId::new(user),
                id_tracker: id,
                k_t,
                k_w: SymmetricKey::new(k_w),
                ctr: Generation::FIRST,
                salt,
                password_hash,
                base_ids: vec![*b"BASE0001"],
            })
            .map_err(|_| FleetError::DuplicateTrackerId(id))?;
        let images = server
            .provision_images(id, config.record_count, config.record_len)
            .expect("fresh entry");
        let tracker = Tracker::provision(id, k_t, config.record_len, &images).expect("valid images");
        trackers.push(tracker);
    }

    Ok(ProvisionedFleet { server, trackers })
}

/// Write factory state: `server.store` plus one `tracker-<id>.bin` per
/// device. The tracker files are factory images and carry the key.
pub fn write_fleet(fleet: &ProvisionedFleet, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    fleet
        .server
        .persist(&dir.join("server.store"))
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    for tracker in &fleet.trackers {
        let path = dir.join(format!("tracker-{}.bin", tracker.id()));
        std::fs::write(path, tracker.snapshot(true))?;
    }
    Ok(())
}
