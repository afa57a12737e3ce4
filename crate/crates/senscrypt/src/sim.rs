//! Deterministic simulation worlds: a tracker, a base, a server and a
//! transcript, all driven from one seed.
//!
//! Each world keeps a plaintext shadow log of every sensor value the
//! victim actually recorded. The shadow never touches the protocol path;
//! it is the ground truth that roundtrip checks and attack judgments
//! compare against.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crypto::SymmetricKey;
use crate::legacy::{BankEntry, LegacyServer, LegacyTracker, MINUTES_PER_DAY, READ_BANK_COUNT};
use crate::protocol::{ServerNode, TrackerNode};
use crate::relay::{
    run_legacy_session, run_senscrypt_session, Base, LegacyCredentials, LegacySessionReport,
    SessionError, SessionReport,
};
use crate::server::{MapEntry, Server, UserId, PASSWORD_HASH_LEN, SALT_LEN};
use crate::tracker::{RecordError, Tracker};
use crate::transcript::Transcript;
use crate::transport::{InProcChannel, ServerChannel, UnreachableChannel};
use crate::wire::{TrackerId, TrqDataBody};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackKind {
    Legacy,
    SensCrypt,
}

impl std::str::FromStr for StackKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "legacy" => Ok(StackKind::Legacy),
            "senscrypt" => Ok(StackKind::SensCrypt),
            other => Err(format!("unknown stack '{other}' (expected legacy|senscrypt)")),
        }
    }
}

impl std::fmt::Display for StackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StackKind::Legacy => "legacy",
            StackKind::SensCrypt => "senscrypt",
        })
    }
}

/// One sensor value the victim really recorded, with when it happened.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShadowRecord {
    pub tick: u64,
    pub data: Vec<u8>,
}

/// Per-upload numbers the schedule corpus asserts on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UploadRunReport {
    pub session: SessionReport,
    pub payload_bytes: usize,
    pub red_count: u32,
    pub wrapped: bool,
}

/// A deterministic sync-protocol world with one tracker.
pub struct SensCryptWorld {
    pub tracker: TrackerNode,
    pub server: ServerNode,
    pub base: Base,
    pub transcript: Transcript,
    pub shadow: Vec<ShadowRecord>,
    pub tick: u64,
    pub memory_full_events: u32,
    rng: ChaCha8Rng,
}

impl SensCryptWorld {
    pub fn new(seed: u64, record_count: u32, record_len: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut id = [0u8; 8];
        rng.fill_bytes(&mut id);
        let id = TrackerId::new(id);
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

        let mut server = Server::new();
        server
            .register(MapEntry {
                id_user: UserId::new(user),
                id_tracker: id,
                k_t,
                k_w: SymmetricKey::new(k_w),
                ctr: crate::crypto::Generation::FIRST,
                salt,
                password_hash,
                base_ids: vec![*b"BASE0001"],
            })
            .expect("fresh server");
        let images = server
            .provision_images(id, record_count, record_len)
            .expect("fresh tracker");
        let tracker = Tracker::provision(id, k_t, record_len, &images).expect("valid images");

        Self {
            tracker: TrackerNode::new(tracker),
            server: ServerNode::new(server),
            base: Base::new(*b"BASE0001", true),
            transcript: Transcript::new(),
            shadow: Vec::new(),
            tick: 0,
            memory_full_events: 0,
            rng,
        }
    }

    pub fn tracker_id(&self) -> TrackerId {
        self.tracker.tracker.id()
    }

    pub fn user_id(&self) -> UserId {
        self.server
            .server
            .lookup(self.tracker_id())
            .expect("own tracker")
            .id_user
    }

    pub fn record_len(&self) -> u32 {
        self.tracker.tracker.record_len()
    }

    /// Record one sensor snapshot. Shadow-logged only if the tracker
    /// accepted it; a full memory drops the sample.
    pub fn write(&mut self, data: Vec<u8>) -> Result<(), RecordError> {
        self.tick += 1;
        match self.tracker.tracker.record_data(&data) {
            Ok(()) => {
                self.shadow.push(ShadowRecord { tick: self.tick, data });
                Ok(())
            }
            Err(e) => {
                if e == RecordError::MemoryFull {
                    self.memory_full_events += 1;
                }
                Err(e)
            }
        }
    }

    pub fn write_random(&mut self) -> Result<(), RecordError> {
        let mut data = vec![0u8; self.record_len() as usize];
        self.rng.fill_bytes(&mut data);
        self.write(data)
    }

    /// Run one honest sync session over the in-process transport.
    pub fn upload(&mut self) -> Result<UploadRunReport, SessionError> {
        self.tick += 1;
        let payload = self.tracker.tracker.build_upload_payload();
        let payload_bytes = payload.encode().len();
        let mut channel = InProcChannel { node: &mut self.server, tick: self.tick };
        let session = run_senscrypt_session(
            &mut self.base,
            &mut self.tracker,
            &mut channel,
            &mut self.transcript,
            self.tick,
        )?;
        Ok(UploadRunReport {
            session,
            payload_bytes,
            red_count: payload.red_count,
            wrapped: payload.wrapped,
        })
    }

    /// Run one honest session against a caller-supplied channel (TCP mode,
    /// fault injection).
    pub fn upload_via(&mut self, channel: &mut dyn ServerChannel) -> Result<UploadRunReport, SessionError> {
        self.tick += 1;
        let payload = self.tracker.tracker.build_upload_payload();
        let payload_bytes = payload.encode().len();
        let session = run_senscrypt_session(
            &mut self.base,
            &mut self.tracker,
            channel,
            &mut self.transcript,
            self.tick,
        )?;
        Ok(UploadRunReport {
            session,
            payload_bytes,
            red_count: payload.red_count,
            wrapped: payload.wrapped,
        })
    }

    /// Attempt a session while the server is unreachable.
    pub fn upload_unreachable(&mut self) -> Result<UploadRunReport, SessionError> {
        self.upload_via(&mut UnreachableChannel)
    }

    /// Capture dump: full memory and pointers, no key.
    pub fn snapshot_capture(&mut self) -> Vec<u8> {
        self.tick += 1;
        self.tracker.tracker.snapshot(false)
    }

    /// JTAG-R dump: memory, pointers and the tracker key.
    pub fn snapshot_jtag(&mut self) -> Vec<u8> {
        self.tick += 1;
        self.tracker.tracker.snapshot(true)
    }

    /// Flattened shadow data, in write order.
    pub fn shadow_data(&self) -> Vec<&[u8]> {
        self.shadow.iter().map(|s| s.data.as_slice()).collect()
    }

    /// Decoded records on the server, in decode (== write) order.
    pub fn server_decoded(&self) -> Vec<&[u8]> {
        self.server
            .server
            .fitness()
            .rows(self.user_id(), self.tracker_id())
            .iter()
            .map(|row| row.data.as_slice())
            .collect()
    }

    /// The upload body the tracker would send right now.
    pub fn pending_payload(&self) -> TrqDataBody {
        self.tracker.tracker.build_upload_payload()
    }
}

/// A deterministic legacy-stack world with one tracker and one account.
pub struct LegacyWorld {
    pub tracker: LegacyTracker,
    pub server: LegacyServer,
    pub base: Base,
    pub transcript: Transcript,
    pub shadow: Vec<BankEntry>,
    pub tick: u64,
    pub upi: UserId,
    pub credentials: LegacyCredentials,
    minutes_recorded: usize,
    rng: ChaCha8Rng,
}

impl LegacyWorld {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut serial = [0u8; 5];
        rng.fill_bytes(&mut serial);
        let mut tpi = [0u8; 8];
        rng.fill_bytes(&mut tpi);
        let tpi = TrackerId::new(tpi);
        let mut upi_bytes = [0u8; 8];
        rng.fill_bytes(&mut upi_bytes);
        let upi = UserId::new(upi_bytes);
        let mut passkey = [0u8; 8];
        rng.fill_bytes(&mut passkey);

        let mut server = LegacyServer::default();
        server.register(serial, tpi, upi, "victim@example.com");

        Self {
            tracker: LegacyTracker::new(serial, tpi, passkey),
            server,
            base: Base::new(*b"BASE0001", false),
            transcript: Transcript::new(),
            shadow: Vec::new(),
            tick: 0,
            upi,
            credentials: LegacyCredentials {
                email: "victim@example.com".into(),
                password: "correct-horse-battery".into(),
            },
            minutes_recorded: 0,
            rng,
        }
    }

    /// Record one per-minute entry; banks fill day by day.
    pub fn record_minute(&mut self, entry: BankEntry) -> Result<(), crate::legacy::LegacyError> {
        self.tick += 1;
        let bank = ((self.minutes_recorded / MINUTES_PER_DAY) % READ_BANK_COUNT) as u8;
        self.tracker.record_minute(bank, entry)?;
        self.shadow.push(entry);
        self.minutes_recorded += 1;
        Ok(())
    }

    pub fn record_random_minute(&mut self) -> Result<(), crate::legacy::LegacyError> {
        let entry = BankEntry {
            timestamp: self.tick as u32 + 1,
            steps: self.rng.gen_range(0..200),
            floors: self.rng.gen_range(0..3),
            has_gps: false,
            lat: 0,
            lon: 0,
        };
        self.record_minute(entry)
    }

    /// Run the full legacy sync flow, optionally preceded by the cleartext
    /// login.
    pub fn sync(&mut self, with_login: bool) -> Result<LegacySessionReport, SessionError> {
        self.tick += 1;
        let creds = self.credentials.clone();
        run_legacy_session(
            &mut self.base,
            &mut self.tracker,
            &mut self.server,
            with_login.then_some(&creds),
            &mut self.transcript,
            self.tick,
        )
    }

    pub fn account_steps(&self) -> u64 {
        self.server.account(self.upi).map_or(0, |a| a.daily_steps)
    }
}
