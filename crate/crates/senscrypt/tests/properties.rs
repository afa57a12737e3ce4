//! Property tests for the protocol invariants: lossless codecs, MAC
//! exactness, schedule-independent roundtrip correctness, even wear,
//! pointer algebra and no-plaintext-at-rest.

use proptest::prelude::*;

use senscrypt::crypto::{self, AuthTag, Generation, SymmetricKey};
use senscrypt::sim::SensCryptWorld;
use senscrypt::wire::{
    decode_message, encode_message, frame_legacy, unframe_legacy, MessageError, MsgType, Opcode,
    SensCryptMessage, TrackerId,
};

fn arb_opcode() -> impl Strategy<Value = Opcode> {
    prop_oneof![
        Just(Opcode::TrqReq),
        any::<u8>().prop_map(|bank| Opcode::ReadTrq { bank }),
        (any::<u8>(), any::<u16>()).prop_map(|(bank, data_len)| Opcode::Write { bank, data_len }),
        (any::<u8>(), any::<u32>()).prop_map(|(bank, deadline)| Opcode::Erase { bank, deadline }),
        Just(Opcode::Close),
        Just(Opcode::Sleep),
        Just(Opcode::ResponseOk),
    ]
}

proptest! {
    // every opcode is exactly 7 bytes and decode inverts encode
    #[test]
    fn opcode_roundtrip_and_length(op in arb_opcode()) {
        let encoded = op.encode();
        prop_assert_eq!(encoded.len(), 7);
        prop_assert_eq!(Opcode::decode(&encoded).unwrap(), op);
    }

    // framing is a lossless inverse on its valid range
    #[test]
    fn legacy_frame_roundtrip(
        banks in proptest::collection::vec(any::<u8>(), 1..5),
        data_len in 0usize..64,
    ) {
        let mut opcodes: Vec<Opcode> = banks.iter().map(|&bank| Opcode::ReadTrq { bank }).collect();
        opcodes.push(Opcode::Write { bank: 0, data_len: data_len as u16 });
        let data: Vec<u8> = (0..data_len as u8).collect();
        let frame = frame_legacy(&opcodes, &data).unwrap();
        let (ops2, data2) = unframe_legacy(&frame).unwrap();
        prop_assert_eq!(ops2, opcodes);
        prop_assert_eq!(data2, data);
    }

    // the MAC accepts exactly the honest tag: any single-bit perturbation
    // of message or tag is rejected
    #[test]
    fn mac_accepts_exactly_the_honest_tag(
        key in any::<[u8; 16]>(),
        message in proptest::collection::vec(any::<u8>(), 0..64),
        flip_bit in 0usize..8,
    ) {
        let key = SymmetricKey::new(key);
        let tag = crypto::mac(&key, &message);
        prop_assert!(crypto::verify_mac(&key, &message, &tag));

        if !message.is_empty() {
            let mut bad = message.clone();
            let pos = flip_bit % bad.len();
            bad[pos] ^= 1 << (flip_bit % 8);
            prop_assert!(!crypto::verify_mac(&key, &bad, &tag));
        }
        let mut bad_tag = *tag.as_bytes();
        bad_tag[flip_bit % 32] ^= 1 << (flip_bit % 8);
        prop_assert!(!crypto::verify_mac(&key, &message, &AuthTag::new(bad_tag)));
    }

    // seal/open are mutual inverses when generations match and reject
    // every other generation
    #[test]
    fn seal_open_inverse_and_generation_gate(
        key in any::<[u8; 16]>(),
        gen in 1u32..1000,
        index in 0u32..2048,
        inner in proptest::collection::vec(any::<u8>(), 1..96),
        other_gen in 1u32..1000,
    ) {
        let key = SymmetricKey::new(key);
        let sealed = crypto::seal_rewrite(&key, Generation::new(gen), index, &inner);
        prop_assert_eq!(sealed.len(), inner.len() + 4);
        let (got_gen, got_inner) = crypto::open_rewrite(&key, Generation::new(gen), index, &sealed).unwrap();
        prop_assert_eq!(got_gen, Generation::new(gen));
        prop_assert_eq!(got_inner, inner);
        if other_gen != gen {
            prop_assert!(crypto::open_rewrite(&key, Generation::new(other_gen), index, &sealed).is_err());
        }
    }

    // a bit flipped anywhere in an encoded message fails authentication
    // (or structural parsing) — never silently decodes
    #[test]
    fn message_bit_flip_is_always_rejected(
        key in any::<[u8; 16]>(),
        body in proptest::collection::vec(any::<u8>(), 0..96),
        flip in any::<(usize, u8)>(),
    ) {
        let key = SymmetricKey::new(key);
        let msg = SensCryptMessage::new(MsgType::TrqData, TrackerId::new([9; 8]), body);
        let mut bytes = encode_message(&msg, &key);
        prop_assert_eq!(decode_message(&bytes, &key).unwrap(), msg);

        let pos = flip.0 % bytes.len();
        let bit = 1u8 << (flip.1 % 8);
        bytes[pos] ^= bit;
        match decode_message(&bytes, &key) {
            Err(MessageError::AuthFailure) | Err(MessageError::Malformed(_)) => {}
            Ok(_) => prop_assert!(false, "tampered frame decoded"),
        }
    }
}

/// A schedule is a sequence of writes and uploads; whatever the
/// interleaving (absent memory-full), the server must end up with exactly
/// the shadow log, wear must stay within 2, and pointer algebra must hold.
fn run_schedule(seed: u64, n: u32, r: u32, ops: &[bool]) -> SensCryptWorld {
    let mut world = SensCryptWorld::new(seed, n, r);
    for &is_write in ops {
        if is_write {
            if world.tracker.tracker.red_count() < n {
                world.write_random().unwrap();
            }
        } else {
            world.upload().unwrap();
        }
        // pointer algebra after every step
        let t = &world.tracker.tracker;
        let dist = if t.red_count() == n {
            n
        } else {
            (t.clean() + n - t.dirty()) % n
        };
        assert_eq!(t.red_count(), dist, "red_count is the traversal distance");
    }
    world.upload().unwrap();
    world
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_roundtrip_wear_and_secrecy(
        seed in any::<u64>(),
        n in 4u32..32,
        r in prop_oneof![Just(16u32), Just(64u32), Just(80u32)],
        ops in proptest::collection::vec(any::<bool>(), 1..80),
    ) {
        let world = run_schedule(seed, n, r, &ops);

        // roundtrip: server holds exactly the shadow log, in order
        prop_assert_eq!(world.server_decoded(), world.shadow_data());

        // even wear: max spread 2
        let wear = world.tracker.tracker.wear();
        let spread = wear.iter().max().unwrap() - wear.iter().min().unwrap();
        prop_assert!(spread <= 2, "wear spread {spread} > 2: {wear:?}");

        // no plaintext at rest: no record cell ever equals a written value
        let t = &world.tracker.tracker;
        for index in 0..t.record_count() {
            for shadow in world.shadow_data() {
                prop_assert_ne!(t.record(index), shadow);
            }
        }
    }
}
