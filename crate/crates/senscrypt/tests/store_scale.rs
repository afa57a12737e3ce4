//! Large-store behavior: a million-entry Map persists and restores
//! without loss.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use senscrypt::crypto::{Generation, SymmetricKey};
use senscrypt::server::{MapEntry, Server, UserId, PASSWORD_HASH_LEN, SALT_LEN};
use senscrypt::wire::TrackerId;

#[test]
fn million_entry_store_persists_and_restores() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5CA1E);
    let mut server = Server::new();
    let mut sample_ids = Vec::new();
    let total = 1_000_000u32;
    for i in 0..total {
        let mut id = [0u8; 8];
        rng.fill_bytes(&mut id);
        let mut user = [0u8; 8];
        rng.fill_bytes(&mut user);
        let mut k_t = [0u8; 16];
        rng.fill_bytes(&mut k_t);
        let entry = MapEntry {
            id_user: UserId::new(user),
            id_tracker: TrackerId::new(id),
            k_t: SymmetricKey::new(k_t),
            k_w: SymmetricKey::new([0x22; 16]),
            ctr: Generation::new(1 + (i % 7)),
            salt: [0; SALT_LEN],
            password_hash: [0; PASSWORD_HASH_LEN],
            base_ids: vec![*b"BASE0001"],
        };
        if server.register(entry).is_ok() && i % 100_000 == 0 {
            sample_ids.push(TrackerId::new(id));
        }
    }
    let count = server.entry_count();
    assert!(count >= 999_990, "unexpected id collisions: {count}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.store");
    server.persist(&path).unwrap();

    let restored = Server::restore(&path).unwrap();
    assert_eq!(restored.entry_count(), count);
    // content spot-check across the sampled rows
    for id in &sample_ids {
        assert_eq!(restored.lookup(*id).unwrap(), server.lookup(*id).unwrap());
    }
}
