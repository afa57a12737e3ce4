//! The thin base: discovers trackers, bridges tracker<->webserver
//! sessions, and keeps the service log that makes the legacy stack such a
//! rewarding target.
//!
//! In sync-protocol mode the base forwards frames verbatim and contributes
//! zero bytes to any message body. In legacy mode it actively drives the
//! eleven-step upload flow and logs every request in cleartext, login
//! credentials included, which reproduces the service-log vulnerability.

use base64::Engine;
use thiserror::Error;

use crate::legacy::{
    BankEntry, LegacyServer, LegacyTracker, PairingStore, ROUTE_CLEAR_DATA, ROUTE_DUMP_DATA,
    ROUTE_LOGIN, ROUTE_LOOKUP_TRACKER, ROUTE_UPLOAD_DATA, READ_BANK_COUNT,
};
use crate::protocol::TrackerNode;
use crate::transcript::Transcript;
use crate::transport::{ChannelError, ServerChannel};
use crate::wire::{frame_legacy, unframe_legacy, LegacyFrame, Opcode};

pub const EP_TRACKER: &str = "tracker";
pub const EP_BASE: &str = "base";
pub const EP_SERVER: &str = "server";

/// Default sleep hint: 15 minutes at one tick per second.
pub const DEFAULT_SLEEP_TICKS: u64 = 900;

/// Seconds between the service-log epoch (2014-01-01T00:00:00Z) and the
/// Unix epoch; ticks are rendered relative to it.
const LOG_EPOCH_UNIX: i64 = 1_388_534_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Idle,
    Connected,
    Uploading,
    Closing,
}

impl Phase {
    fn may_advance_to(self, next: Phase) -> bool {
        matches!(
            (self, next),
            (Phase::Idle, Phase::Connected)
                | (Phase::Connected, Phase::Uploading)
                | (Phase::Uploading, Phase::Closing)
                | (Phase::Closing, Phase::Idle)
        )
    }
}

/// Append-only base-side log: one line per event, ISO-8601 time, direction,
/// endpoint, payload. With transport encryption off (the legacy setup) the
/// payload is logged verbatim.
#[derive(Debug, Clone)]
pub struct ServiceLog {
    pub transport_encrypted: bool,
    lines: Vec<String>,
}

impl ServiceLog {
    pub fn new(transport_encrypted: bool) -> Self {
        Self { transport_encrypted, lines: Vec::new() }
    }

    pub fn log_text(&mut self, tick: u64, direction: &str, endpoint: &str, payload: &str) {
        let shown = if self.transport_encrypted { "<encrypted>" } else { payload };
        self.lines.push(format!("{} {direction} {endpoint} {shown}", iso_time(tick)));
    }

    pub fn log_bytes(&mut self, tick: u64, direction: &str, endpoint: &str, payload: &[u8]) {
        match std::str::from_utf8(payload) {
            Ok(text) if text.chars().all(|c| !c.is_control() || c == '\n') => {
                self.log_text(tick, direction, endpoint, &text.replace('\n', "; "))
            }
            _ => {
                let hexed = hex::encode(payload);
                let shown = if self.transport_encrypted { "<encrypted>".to_string() } else { hexed };
                self.lines.push(format!("{} {direction} {endpoint} {shown}", iso_time(tick)));
            }
        }
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn to_text(&self) -> String {
        let mut out = self.lines.join("\n");
        if !out.is_empty() {
            out.push('\n');
        }
        out
    }
}

fn iso_time(tick: u64) -> String {
    chrono::DateTime::from_timestamp(LOG_EPOCH_UNIX + tick as i64, 0)
        .expect("tick within chrono range")
        .format("%Y-%m-%dT%H:%M:%SZ")
        .to_string()
}

/// A base station: identity, session phase, service log and (legacy)
/// pairing records.
#[derive(Debug, Clone)]
pub struct Base {
    pub id: [u8; 8],
    pub log: ServiceLog,
    pub pairing: PairingStore,
    pub sleep_ticks: u64,
    phase: Phase,
}

impl Base {
    pub fn new(id: [u8; 8], transport_encrypted: bool) -> Self {
        Self {
            id,
            log: ServiceLog::new(transport_encrypted),
            pairing: PairingStore::default(),
            sleep_ticks: DEFAULT_SLEEP_TICKS,
            phase: Phase::Idle,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    fn advance(&mut self, next: Phase) {
        assert!(
            self.phase.may_advance_to(next),
            "illegal session transition {:?} -> {next:?}",
            self.phase
        );
        self.phase = next;
    }

    fn abort(&mut self) {
        self.phase = Phase::Idle;
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("server timeout")]
    Timeout,
    #[error("session disconnected: {0}")]
    Disconnect(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionReport {
    pub frames_forwarded: usize,
    pub completed: bool,
}

/// Bridge one full sync session between a tracker and the server channel.
/// Every frame is forwarded byte-for-byte and logged on both hops.
pub fn run_senscrypt_session(
    base: &mut Base,
    tracker: &mut TrackerNode,
    server: &mut dyn ServerChannel,
    transcript: &mut Transcript,
    tick: u64,
) -> Result<SessionReport, SessionError> {
    let mut frames = 0usize;

    let result = (|| {
        base.advance(Phase::Connected);
        let beacon = tracker.make_beacon();
        let ack = forward_to_server(base, server, transcript, tick, &beacon, "beacon", &mut frames)?
            .ok_or_else(|| SessionError::Disconnect("server ended session at beacon".into()))?;

        base.advance(Phase::Uploading);
        let trq_data = forward_to_tracker(base, tracker, transcript, tick, &ack, "beacon ack", &mut frames)?
            .ok_or_else(|| SessionError::Disconnect("tracker had no payload".into()))?;
        let rewrite =
            forward_to_server(base, server, transcript, tick, &trq_data, "upload payload", &mut frames)?
                .ok_or_else(|| SessionError::Disconnect("server issued no rewrite".into()))?;
        let applied =
            forward_to_tracker(base, tracker, transcript, tick, &rewrite, "rewrite batch", &mut frames)?
                .ok_or_else(|| SessionError::Disconnect("tracker refused the rewrite".into()))?;

        base.advance(Phase::Closing);
        let trailing =
            forward_to_server(base, server, transcript, tick, &applied, "applied ack", &mut frames)?;
        if trailing.is_some() {
            return Err(SessionError::Disconnect("server kept talking after final ack".into()));
        }
        Ok(())
    })();

    match result {
        Ok(()) => {
            base.advance(Phase::Idle);
            Ok(SessionReport { frames_forwarded: frames, completed: true })
        }
        Err(e) => {
            base.abort();
            Err(e)
        }
    }
}

fn forward_to_server(
    base: &mut Base,
    server: &mut dyn ServerChannel,
    transcript: &mut Transcript,
    tick: u64,
    frame: &[u8],
    note: &str,
    frames: &mut usize,
) -> Result<Option<Vec<u8>>, SessionError> {
    transcript.log(tick, EP_TRACKER, EP_BASE, frame, note);
    transcript.log(tick, EP_BASE, EP_SERVER, frame, note);
    base.log.log_bytes(tick, "->", EP_SERVER, frame);
    *frames += 1;
    match server.request(frame) {
        Ok(reply) => Ok(reply),
        Err(ChannelError::Unreachable(_)) => Err(SessionError::Timeout),
        Err(ChannelError::Io(why)) => Err(SessionError::Disconnect(why)),
    }
}

fn forward_to_tracker(
    base: &mut Base,
    tracker: &mut TrackerNode,
    transcript: &mut Transcript,
    tick: u64,
    frame: &[u8],
    note: &str,
    frames: &mut usize,
) -> Result<Option<Vec<u8>>, SessionError> {
    transcript.log(tick, EP_SERVER, EP_BASE, frame, note);
    transcript.log(tick, EP_BASE, EP_TRACKER, frame, note);
    base.log.log_bytes(tick, "<-", EP_SERVER, frame);
    *frames += 1;
    tracker
        .handle_frame(frame)
        .map_err(|e| SessionError::Disconnect(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LegacyCredentials {
    pub email: String,
    pub password: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LegacySessionReport {
    pub uploaded_banks: usize,
    pub uploaded_bytes: usize,
    /// Ticks until the tracker's next beacon, from the SLEEP hint.
    pub next_beacon_in: u64,
}

/// Drive the full legacy upload flow (all eleven steps), logging every
/// exchange in the service log. With `credentials` set, an initial login
/// POST carries them in cleartext, exactly like the real client did.
pub fn run_legacy_session(
    base: &mut Base,
    tracker: &mut LegacyTracker,
    server: &mut LegacyServer,
    credentials: Option<&LegacyCredentials>,
    transcript: &mut Transcript,
    tick: u64,
) -> Result<LegacySessionReport, SessionError> {
    let b64 = base64::engine::general_purpose::STANDARD;
    let post = |base: &mut Base,
                server: &mut LegacyServer,
                transcript: &mut Transcript,
                route: &str,
                body: String|
     -> Result<Vec<u8>, SessionError> {
        transcript.log(tick, EP_BASE, EP_SERVER, body.as_bytes(), route);
        base.log.log_text(tick, "POST", route, &body.replace('\n', "; "));
        let reply = server
            .handle_request(route, body.as_bytes())
            .map_err(|e| SessionError::Disconnect(e.to_string()))?;
        transcript.log(tick, EP_SERVER, EP_BASE, &reply, route);
        base.log.log_bytes(tick, "RESP", route, &reply);
        Ok(reply)
    };

    // step 1: beacon, connection established
    base.advance(Phase::Connected);
    let beacon = format!("beacon tpi={}", tracker.tpi);
    transcript.log(tick, EP_TRACKER, EP_BASE, beacon.as_bytes(), "legacy beacon");
    base.log.log_text(tick, "<-", EP_TRACKER, &beacon);

    if let Some(creds) = credentials {
        let body = format!("email={}&password={}", creds.email, creds.password);
        post(base, server, transcript, ROUTE_LOGIN, body)?;
    }

    let result = (|| {
        base.advance(Phase::Uploading);

        // phase 1: client info; server answers with the TRQ-REQ opcode
        let reply = post(
            base,
            server,
            transcript,
            ROUTE_UPLOAD_DATA,
            "client=fitbit-agent/1.0\nplatform=sim".to_string(),
        )?;
        let trq_req = single_opcode_from(&reply)?;

        // phase 2: query the tracker for TRQ-INFO
        let trq_info = exchange_opcode(base, tracker, transcript, tick, &trq_req, &[])?;

        // phase 3: lookup; server answers with TPI/UPI and READ-TRQ opcodes
        let reply = post(
            base,
            server,
            transcript,
            ROUTE_LOOKUP_TRACKER,
            format!("trqinfo={}", b64.encode(&trq_info)),
        )?;
        let fields = crate::legacy::parse_form(&reply)
            .map_err(|e| SessionError::Disconnect(e.to_string()))?;
        let upi = field_of(&fields, "upi")?;
        let read_ops = opcodes_from(&frame_of(&fields)?)?;

        // read every fitness bank the server asked for
        let mut dump_body = format!("upi={upi}\ntpi={}\n", tracker.tpi);
        let mut uploaded_banks = 0usize;
        let mut uploaded_bytes = 0usize;
        for op in &read_ops {
            let bank_bytes = exchange_opcode(base, tracker, transcript, tick, op, &[])?;
            if let Opcode::ReadTrq { bank } = op {
                dump_body.push_str(&format!("bank{bank}={}\n", b64.encode(&bank_bytes)));
                uploaded_banks += 1;
                uploaded_bytes += bank_bytes.len();
            }
        }

        // phase 3b: ship the fitness data; server answers with phase-4 ops
        let reply = post(base, server, transcript, ROUTE_DUMP_DATA, dump_body)?;
        let fields = crate::legacy::parse_form(&reply)
            .map_err(|e| SessionError::Disconnect(e.to_string()))?;
        let (phase4_ops, phase4_data) = unframe_legacy(&LegacyFrame { xml_body: frame_of(&fields)? })
            .map_err(|e| SessionError::Disconnect(e.to_string()))?;

        // phase 4: apply WRITE (settings) and ERASE, collecting responses
        let mut responses = Vec::new();
        let mut data_cursor = 0usize;
        for op in &phase4_ops {
            let data = match op {
                Opcode::Write { data_len, .. } => {
                    let chunk = &phase4_data[data_cursor..data_cursor + *data_len as usize];
                    data_cursor += *data_len as usize;
                    chunk.to_vec()
                }
                _ => Vec::new(),
            };
            let response = exchange_opcode(base, tracker, transcript, tick, op, &data)?;
            responses.extend_from_slice(&response);
        }

        // steps 9-10: report response codes, receive CLOSE
        let reply = post(
            base,
            server,
            transcript,
            ROUTE_CLEAR_DATA,
            format!("tpi={}\nresponses={}", tracker.tpi, b64.encode(&responses)),
        )?;
        let close = single_opcode_from(&reply)?;
        if close != Opcode::Close {
            return Err(SessionError::Disconnect("expected CLOSE".into()));
        }

        base.advance(Phase::Closing);

        // step 11: SLEEP with the next-beacon hint
        let sleep_frame = frame_legacy(&[Opcode::Sleep], &[])
            .expect("static frame")
            .xml_body;
        transcript.log(tick, EP_BASE, EP_TRACKER, sleep_frame.as_bytes(), "sleep");
        base.log
            .log_text(tick, "->", EP_TRACKER, &format!("SLEEP next-beacon-in={}", base.sleep_ticks));

        Ok(LegacySessionReport {
            uploaded_banks,
            uploaded_bytes,
            next_beacon_in: base.sleep_ticks,
        })
    })();

    match result {
        Ok(report) => {
            base.advance(Phase::Idle);
            Ok(report)
        }
        Err(e) => {
            base.abort();
            Err(e)
        }
    }
}

/// Send one opcode (and optional payload) to the tracker; both directions
/// are framed, logged and transcribed.
fn exchange_opcode(
    base: &mut Base,
    tracker: &mut LegacyTracker,
    transcript: &mut Transcript,
    tick: u64,
    op: &Opcode,
    data: &[u8],
) -> Result<Vec<u8>, SessionError> {
    let frame = frame_legacy(std::slice::from_ref(op), data)
        .map_err(|e| SessionError::Disconnect(e.to_string()))?;
    transcript.log(tick, EP_BASE, EP_TRACKER, frame.xml_body.as_bytes(), &format!("{op:?}"));
    base.log.log_text(tick, "->", EP_TRACKER, &frame.xml_body);
    let response = tracker
        .handle_opcode(op, data)
        .map_err(|e| SessionError::Disconnect(e.to_string()))?;
    transcript.log(tick, EP_TRACKER, EP_BASE, &response, &format!("{op:?} response"));
    base.log.log_bytes(tick, "<-", EP_TRACKER, &response);
    Ok(response)
}

fn frame_of(fields: &[(String, String)]) -> Result<String, SessionError> {
    fields
        .iter()
        .find(|(key, _)| key == "frame")
        .map(|(_, value)| value.clone())
        .ok_or_else(|| SessionError::Disconnect("server response carried no frame".into()))
}

fn field_of<'a>(fields: &'a [(String, String)], name: &str) -> Result<&'a str, SessionError> {
    fields
        .iter()
        .find(|(key, _)| key == name)
        .map(|(_, value)| value.as_str())
        .ok_or_else(|| SessionError::Disconnect(format!("server response missing {name}")))
}

fn opcodes_from(xml: &str) -> Result<Vec<Opcode>, SessionError> {
    let (ops, _) = unframe_legacy(&LegacyFrame { xml_body: xml.to_string() })
        .map_err(|e| SessionError::Disconnect(e.to_string()))?;
    Ok(ops)
}

fn single_opcode_from(reply: &[u8]) -> Result<Opcode, SessionError> {
    let fields =
        crate::legacy::parse_form(reply).map_err(|e| SessionError::Disconnect(e.to_string()))?;
    let ops = opcodes_from(&frame_of(&fields)?)?;
    match ops.as_slice() {
        [op] => Ok(*op),
        _ => Err(SessionError::Disconnect("expected exactly one opcode".into())),
    }
}

/// Count of per-minute entries a bank payload holds; used in reports.
pub fn bank_entry_count(bytes: &[u8]) -> usize {
    BankEntry::decode_bank(bytes).map(|v| v.len()).unwrap_or(0)
}

/// Banks the legacy server reads in a full sync.
pub fn fitness_bank_indices() -> impl Iterator<Item = u8> {
    0..READ_BANK_COUNT as u8
}
