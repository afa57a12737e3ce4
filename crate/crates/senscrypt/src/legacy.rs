//! Mock cleartext legacy stack: a tracker with indexed memory banks, the
//! pairing procedure, and the webserver endpoints of the upload flow.
//!
//! Everything here is deliberately attackable. Fitness data sits in banks
//! as plaintext, the tracker answers any base without authenticating it,
//! the server swallows whatever totals it is given, and login credentials
//! travel as cleartext form fields. The adversary harness leans on each of
//! these on purpose; do not fix them.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::server::UserId;
use crate::wire::{Opcode, TrackerId};

/// Fixed per-minute bank entry size.
pub const BANK_ENTRY_LEN: usize = 16;
/// Minutes per day; one fitness bank holds one day.
pub const MINUTES_PER_DAY: usize = 1440;
/// Number of read (fitness) banks: a week of daily history.
pub const READ_BANK_COUNT: usize = 7;
/// Number of write (profile/settings) banks following the read banks.
pub const WRITE_BANK_COUNT: usize = 2;
/// GPS-tagged (lap-style) entry capacity across the whole tracker.
pub const LAP_CAPACITY: usize = 1000;

/// Step total above which the server grants the Top Daily Step badge.
pub const BADGE_STEP_THRESHOLD: u64 = 40_000;

pub const ROUTE_LOGIN: &str = "login";
pub const ROUTE_UPLOAD_DATA: &str = "device/tracker/uploadData";
pub const ROUTE_LOOKUP_TRACKER: &str = "device/tracker/dumpData/lookupTracker";
pub const ROUTE_DUMP_DATA: &str = "device/tracker/dumpData/dumpData";
pub const ROUTE_CLEAR_DATA: &str = "device/tracker/dumpData/clearDataConfigTracker";

/// One per-minute sensor entry: timestamp, steps, floors, optional GPS tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BankEntry {
    pub timestamp: u32,
    pub steps: u16,
    pub floors: u8,
    pub has_gps: bool,
    pub lat: i32,
    pub lon: i32,
}

impl BankEntry {
    pub fn encode(&self) -> [u8; BANK_ENTRY_LEN] {
        let mut out = [0u8; BANK_ENTRY_LEN];
        out[0..4].copy_from_slice(&self.timestamp.to_be_bytes());
        out[4..6].copy_from_slice(&self.steps.to_be_bytes());
        out[6] = self.floors;
        out[7] = self.has_gps as u8;
        out[8..12].copy_from_slice(&self.lat.to_be_bytes());
        out[12..16].copy_from_slice(&self.lon.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, LegacyError> {
        if bytes.len() != BANK_ENTRY_LEN {
            return Err(LegacyError::MalformedEntry(bytes.len()));
        }
        Ok(Self {
            timestamp: u32::from_be_bytes(bytes[0..4].try_into().unwrap()),
            steps: u16::from_be_bytes(bytes[4..6].try_into().unwrap()),
            floors: bytes[6],
            has_gps: bytes[7] != 0,
            lat: i32::from_be_bytes(bytes[8..12].try_into().unwrap()),
            lon: i32::from_be_bytes(bytes[12..16].try_into().unwrap()),
        })
    }

    pub fn decode_bank(bytes: &[u8]) -> Result<Vec<Self>, LegacyError> {
        if !bytes.len().is_multiple_of(BANK_ENTRY_LEN) {
            return Err(LegacyError::MalformedEntry(bytes.len()));
        }
        bytes.chunks(BANK_ENTRY_LEN).map(Self::decode).collect()
    }

    pub fn encode_bank(entries: &[Self]) -> Vec<u8> {
        let mut out = Vec::with_capacity(entries.len() * BANK_ENTRY_LEN);
        for entry in entries {
            out.extend_from_slice(&entry.encode());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LegacyError {
    #[error("bank index {0} out of range")]
    BadBankIndex(u8),
    #[error("fitness bank full")]
    BankFull,
    #[error("lap capacity of {LAP_CAPACITY} exceeded")]
    LapCapacity,
    #[error("bank entry payload of {0} bytes is not entry-aligned")]
    MalformedEntry(usize),
    #[error("opcode {0:?} is not a tracker command")]
    NotACommand(Opcode),
}

/// Cleartext legacy tracker: indexed banks, factory serial and passkey.
#[derive(Debug, Clone)]
pub struct LegacyTracker {
    pub serial: [u8; 5],
    pub tpi: TrackerId,
    pub hardware_rev: u8,
    pub plugged: bool,
    passkey: [u8; 8],
    banks: Vec<Vec<u8>>,
    gps_entries: usize,
}

impl LegacyTracker {
    pub fn new(serial: [u8; 5], tpi: TrackerId, passkey: [u8; 8]) -> Self {
        Self {
            serial,
            tpi,
            hardware_rev: 1,
            plugged: false,
            passkey,
            banks: vec![Vec::new(); READ_BANK_COUNT + WRITE_BANK_COUNT],
            gps_entries: 0,
        }
    }

    pub fn bank(&self, index: u8) -> Result<&[u8], LegacyError> {
        self.banks
            .get(index as usize)
            .map(Vec::as_slice)
            .ok_or(LegacyError::BadBankIndex(index))
    }

    /// Factory passkey, readable only during pairing (and by attack
    /// tooling that skips the protocol, which is exactly the point).
    pub fn passkey(&self) -> [u8; 8] {
        self.passkey
    }

    /// Commit one per-minute sensor entry to a fitness bank.
    pub fn record_minute(&mut self, day_bank: u8, entry: BankEntry) -> Result<(), LegacyError> {
        if day_bank as usize >= READ_BANK_COUNT {
            return Err(LegacyError::BadBankIndex(day_bank));
        }
        let bank = &mut self.banks[day_bank as usize];
        if bank.len() / BANK_ENTRY_LEN >= MINUTES_PER_DAY {
            return Err(LegacyError::BankFull);
        }
        if entry.has_gps {
            if self.gps_entries >= LAP_CAPACITY {
                return Err(LegacyError::LapCapacity);
            }
            self.gps_entries += 1;
        }
        bank.extend_from_slice(&entry.encode());
        Ok(())
    }

    /// Sum of step counts in one fitness bank; what the display shows.
    pub fn daily_steps(&self, day_bank: u8) -> Result<u64, LegacyError> {
        let entries = BankEntry::decode_bank(self.bank(day_bank)?)?;
        Ok(entries.iter().map(|e| e.steps as u64).sum())
    }

    /// Execute one opcode against this tracker. No caller authentication
    /// of any kind; any base in range gets served.
    pub fn handle_opcode(&mut self, op: &Opcode, data: &[u8]) -> Result<Vec<u8>, LegacyError> {
        match *op {
            Opcode::TrqReq => {
                let mut reply = Vec::with_capacity(7);
                reply.extend_from_slice(&self.serial);
                reply.push(self.hardware_rev);
                reply.push(self.plugged as u8);
                Ok(reply)
            }
            Opcode::ReadTrq { bank } => Ok(self.bank(bank)?.to_vec()),
            Opcode::Write { bank, data_len } => {
                debug_assert_eq!(data_len as usize, data.len());
                let slot = self
                    .banks
                    .get_mut(bank as usize)
                    .ok_or(LegacyError::BadBankIndex(bank))?;
                *slot = data.to_vec();
                Ok(Opcode::ResponseOk.encode().to_vec())
            }
            Opcode::Erase { bank, deadline } => {
                let is_fitness = (bank as usize) < READ_BANK_COUNT;
                let slot = self
                    .banks
                    .get_mut(bank as usize)
                    .ok_or(LegacyError::BadBankIndex(bank))?;
                if is_fitness {
                    // keep entries newer than the deadline
                    let entries = BankEntry::decode_bank(slot)?;
                    let kept: Vec<BankEntry> =
                        entries.into_iter().filter(|e| e.timestamp > deadline).collect();
                    *slot = BankEntry::encode_bank(&kept);
                } else {
                    slot.clear();
                }
                Ok(Opcode::ResponseOk.encode().to_vec())
            }
            other => Err(LegacyError::NotACommand(other)),
        }
    }
}

/// Pairing record kept by a base.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthFile {
    pub tpi: TrackerId,
    pub passkey: [u8; 8],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMethod {
    Pairing,
    Passkey,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PairError {
    #[error("user did not press the tracker button")]
    UserDeclined,
    #[error("no authfile for this tracker")]
    MissingAuthFile,
    #[error("stored passkey does not match the tracker")]
    WrongPasskey,
}

/// Base-side pairing store plus the two authentication methods. The
/// authentication is one-way on purpose: the tracker never verifies the
/// base.
#[derive(Debug, Clone, Default)]
pub struct PairingStore {
    authfiles: BTreeMap<TrackerId, AuthFile>,
}

impl PairingStore {
    pub fn authfile(&self, tpi: TrackerId) -> Option<&AuthFile> {
        self.authfiles.get(&tpi)
    }

    pub fn pair(
        &mut self,
        tracker: &LegacyTracker,
        method: PairMethod,
        button_pressed: bool,
    ) -> Result<AuthFile, PairError> {
        match method {
            PairMethod::Pairing => {
                if !button_pressed {
                    return Err(PairError::UserDeclined);
                }
                let authfile = AuthFile { tpi: tracker.tpi, passkey: tracker.passkey() };
                self.authfiles.insert(tracker.tpi, authfile.clone());
                Ok(authfile)
            }
            PairMethod::Passkey => {
                let authfile = self.authfiles.get(&tracker.tpi).ok_or(PairError::MissingAuthFile)?;
                if authfile.passkey != tracker.passkey() {
                    return Err(PairError::WrongPasskey);
                }
                Ok(authfile.clone())
            }
        }
    }
}

/// Legacy webserver account state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LegacyAccount {
    pub upi: UserId,
    pub email: String,
    /// Password as received; the login endpoint takes it in cleartext.
    pub password_seen: Option<String>,
    pub daily_steps: u64,
    pub top_daily_step_badge: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LegacyServerError {
    #[error("unknown endpoint: {0}")]
    UnknownEndpoint(String),
    #[error("bad request: {0}")]
    BadRequest(String),
}

/// Cleartext legacy webserver: Figure-4 routes over `key=value` text
/// bodies, with binary payloads base64-encoded. Performs no plausibility
/// validation of submitted fitness values whatsoever.
#[derive(Debug, Clone, Default)]
pub struct LegacyServer {
    accounts: BTreeMap<UserId, LegacyAccount>,
    trackers: BTreeMap<[u8; 5], (TrackerId, UserId)>,
}

impl LegacyServer {
    pub fn register(&mut self, serial: [u8; 5], tpi: TrackerId, upi: UserId, email: &str) {
        self.trackers.insert(serial, (tpi, upi));
        self.accounts.insert(
            upi,
            LegacyAccount {
                upi,
                email: email.to_string(),
                password_seen: None,
                daily_steps: 0,
                top_daily_step_badge: false,
            },
        );
    }

    pub fn account(&self, upi: UserId) -> Option<&LegacyAccount> {
        self.accounts.get(&upi)
    }

    /// Dispatch one request by route. Bodies and responses are UTF-8
    /// `key=value` lines; binary values are base64.
    pub fn handle_request(&mut self, route: &str, body: &[u8]) -> Result<Vec<u8>, LegacyServerError> {
        match route {
            ROUTE_LOGIN => self.login(body),
            ROUTE_UPLOAD_DATA => Ok(respond(&[("frame", &one_opcode_frame(Opcode::TrqReq))])),
            ROUTE_LOOKUP_TRACKER => self.lookup_tracker(body),
            ROUTE_DUMP_DATA => self.dump_data(body),
            ROUTE_CLEAR_DATA => Ok(respond(&[("frame", &one_opcode_frame(Opcode::Close))])),
            other => Err(LegacyServerError::UnknownEndpoint(other.to_string())),
        }
    }

    fn login(&mut self, body: &[u8]) -> Result<Vec<u8>, LegacyServerError> {
        let fields = parse_form(body)?;
        let email = field(&fields, "email")?;
        let password = field(&fields, "password")?;
        for account in self.accounts.values_mut() {
            if account.email == email {
                account.password_seen = Some(password.to_string());
                return Ok(respond(&[("status", "ok")]));
            }
        }
        Ok(respond(&[("status", "unknown-user")]))
    }

    fn lookup_tracker(&mut self, body: &[u8]) -> Result<Vec<u8>, LegacyServerError> {
        let fields = parse_form(body)?;
        let info = decode_b64(field(&fields, "trqinfo")?)?;
        if info.len() < 5 {
            return Err(LegacyServerError::BadRequest("TRQ-INFO shorter than a serial".into()));
        }
        let serial: [u8; 5] = info[0..5].try_into().unwrap();
        let (tpi, upi) = self
            .trackers
            .get(&serial)
            .ok_or_else(|| LegacyServerError::BadRequest("unknown serial".into()))?;
        let read_all: Vec<Opcode> =
            (0..READ_BANK_COUNT as u8).map(|bank| Opcode::ReadTrq { bank }).collect();
        let frame = crate::wire::frame_legacy(&read_all, &[]).expect("static frame");
        Ok(respond(&[
            ("tpi", &tpi.to_string()),
            ("upi", &upi.to_string()),
            ("frame", &frame.xml_body),
        ]))
    }

    fn dump_data(&mut self, body: &[u8]) -> Result<Vec<u8>, LegacyServerError> {
        let fields = parse_form(body)?;
        let upi_bytes = hex::decode(field(&fields, "upi")?)
            .map_err(|_| LegacyServerError::BadRequest("bad upi".into()))?;
        let upi = UserId::new(
            upi_bytes
                .as_slice()
                .try_into()
                .map_err(|_| LegacyServerError::BadRequest("bad upi length".into()))?,
        );

        let mut submitted_steps: u64 = 0;
        let mut latest_timestamp: u32 = 0;
        let mut banks_seen = 0u8;
        for (key, value) in &fields {
            if let Some(rest) = key.strip_prefix("bank") {
                let _: u8 = rest
                    .parse()
                    .map_err(|_| LegacyServerError::BadRequest("bad bank key".into()))?;
                banks_seen += 1;
                let bytes = decode_b64(value)?;
                let entries = BankEntry::decode_bank(&bytes)
                    .map_err(|e| LegacyServerError::BadRequest(e.to_string()))?;
                for entry in entries {
                    // no plausibility validation: whatever arrives is stored
                    submitted_steps += entry.steps as u64;
                    latest_timestamp = latest_timestamp.max(entry.timestamp);
                }
            }
        }
        if banks_seen == 0 {
            return Err(LegacyServerError::BadRequest("no banks submitted".into()));
        }

        let account = self
            .accounts
            .get_mut(&upi)
            .ok_or_else(|| LegacyServerError::BadRequest("unknown account".into()))?;
        account.daily_steps += submitted_steps;
        if account.daily_steps > BADGE_STEP_THRESHOLD {
            account.top_daily_step_badge = true;
        }

        // Phase 4: settings write-back plus erasure of what was uploaded
        let settings = b"timezone=UTC".to_vec();
        let mut opcodes = vec![Opcode::Write {
            bank: READ_BANK_COUNT as u8,
            data_len: settings.len() as u16,
        }];
        for bank in 0..READ_BANK_COUNT as u8 {
            opcodes.push(Opcode::Erase { bank, deadline: latest_timestamp });
        }
        let frame = crate::wire::frame_legacy(&opcodes, &settings).expect("static frame");
        Ok(respond(&[("frame", &frame.xml_body)]))
    }
}

fn one_opcode_frame(op: Opcode) -> String {
    crate::wire::frame_legacy(&[op], &[]).expect("static frame").xml_body
}

fn respond(pairs: &[(&str, &str)]) -> Vec<u8> {
    let mut out = String::new();
    for (key, value) in pairs {
        out.push_str(key);
        out.push('=');
        out.push_str(value);
        out.push('\n');
    }
    out.into_bytes()
}

/// Parse `key=value` lines (also accepts `&`-separated single-line forms).
pub fn parse_form(body: &[u8]) -> Result<Vec<(String, String)>, LegacyServerError> {
    let text = std::str::from_utf8(body)
        .map_err(|_| LegacyServerError::BadRequest("body is not UTF-8".into()))?;
    let mut fields = Vec::new();
    for line in text.lines() {
        for piece in line.split('&') {
            if piece.trim().is_empty() {
                continue;
            }
            let (key, value) = piece
                .split_once('=')
                .ok_or_else(|| LegacyServerError::BadRequest(format!("bad field: {piece}")))?;
            fields.push((key.trim().to_string(), value.trim().to_string()));
        }
    }
    Ok(fields)
}

fn field<'a>(fields: &'a [(String, String)], name: &str) -> Result<&'a str, LegacyServerError> {
    fields
        .iter()
        .find(|(key, _)| key == name)
        .map(|(_, value)| value.as_str())
        .ok_or_else(|| LegacyServerError::BadRequest(format!("missing field {name}")))
}

fn decode_b64(value: &str) -> Result<Vec<u8>, LegacyServerError> {
    use base64::Engine;
    base64::engine::general_purpose::STANDARD
        .decode(value)
        .map_err(|_| LegacyServerError::BadRequest("bad base64".into()))
}
