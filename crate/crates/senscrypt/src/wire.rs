//! Byte-exact codecs for the legacy opcode protocol and the authenticated
//! message layer.
//!
//! Legacy commands are 7-byte opcodes carried as base64 payloads inside a
//! fixed XML envelope. Authenticated messages are
//! `type(1) || tracker_id(8) || body_len(4 BE) || body || tag(32)` with the
//! tag computed over `type || tracker_id || body`; [`decode_message`] is the
//! only entry point and never surfaces a frame whose tag does not verify.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use thiserror::Error;

use crate::crypto::{self, AuthTag, SymmetricKey, TAG_LEN};

/// Every legacy opcode is exactly 7 bytes.
pub const OPCODE_LEN: usize = 7;

const XML_PREFIX: &str = "<fitbitClient><device>";
const XML_SUFFIX: &str = "</device></fitbitClient>";

/// 7-byte legacy tracker command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Opcode {
    /// Retrieve device information (`0x24`).
    TrqReq,
    /// Read a memory bank (`0x22`).
    ReadTrq { bank: u8 },
    /// Write a memory bank (`0x23`); payload data follows the opcode.
    Write { bank: u8, data_len: u16 },
    /// Erase a memory bank up to a deadline (`0x25`).
    Erase { bank: u8, deadline: u32 },
    /// End of session (`0x26`); byte value is an artifact-chosen constant.
    Close,
    /// Sleep until the next beacon (`0x27`); artifact-chosen constant.
    Sleep,
    /// Success response (`0x41`).
    ResponseOk,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OpcodeError {
    #[error("unknown opcode byte 0x{0:02x}")]
    UnknownOpcode(u8),
    #[error("opcode must be {OPCODE_LEN} bytes, got {0}")]
    MalformedOpcode(usize),
    #[error("opcode parameter {name} out of range: {value}")]
    InvalidParam { name: &'static str, value: u64 },
}

impl Opcode {
    /// Range-checked constructors for callers holding untyped numbers
    /// (scenario text, attack scripts).
    pub fn read_trq(bank: u64) -> Result<Self, OpcodeError> {
        Ok(Opcode::ReadTrq { bank: narrow(bank, "bank")? })
    }

    pub fn write(bank: u64, data_len: u64) -> Result<Self, OpcodeError> {
        Ok(Opcode::Write {
            bank: narrow(bank, "bank")?,
            data_len: u16::try_from(data_len)
                .map_err(|_| OpcodeError::InvalidParam { name: "data_len", value: data_len })?,
        })
    }

    pub fn erase(bank: u64, deadline: u64) -> Result<Self, OpcodeError> {
        Ok(Opcode::Erase {
            bank: narrow(bank, "bank")?,
            deadline: u32::try_from(deadline)
                .map_err(|_| OpcodeError::InvalidParam { name: "deadline", value: deadline })?,
        })
    }

    pub fn encode(&self) -> [u8; OPCODE_LEN] {
        let mut out = [0u8; OPCODE_LEN];
        match *self {
            Opcode::TrqReq => out[0] = 0x24,
            Opcode::ReadTrq { bank } => {
                out[0] = 0x22;
                out[1] = bank;
            }
            Opcode::Write { bank, data_len } => {
                out[0] = 0x23;
                out[1] = bank;
                out[2..4].copy_from_slice(&data_len.to_be_bytes());
            }
            Opcode::Erase { bank, deadline } => {
                out[0] = 0x25;
                out[1] = bank;
                out[2..6].copy_from_slice(&deadline.to_be_bytes());
            }
            Opcode::Close => out[0] = 0x26,
            Opcode::Sleep => out[0] = 0x27,
            Opcode::ResponseOk => out[0] = 0x41,
        }
        out
    }

    /// Strict inverse of [`Opcode::encode`]: zero-fill bytes must be zero.
    pub fn decode(bytes: &[u8]) -> Result<Self, OpcodeError> {
        if bytes.len() != OPCODE_LEN {
            return Err(OpcodeError::MalformedOpcode(bytes.len()));
        }
        let zeros_from = |from: usize| bytes[from..].iter().all(|&b| b == 0);
        let op = match bytes[0] {
            0x24 if zeros_from(1) => Opcode::TrqReq,
            0x22 if zeros_from(2) => Opcode::ReadTrq { bank: bytes[1] },
            0x23 if zeros_from(4) => Opcode::Write {
                bank: bytes[1],
                data_len: u16::from_be_bytes([bytes[2], bytes[3]]),
            },
            0x25 if zeros_from(6) => Opcode::Erase {
                bank: bytes[1],
                deadline: u32::from_be_bytes([bytes[2], bytes[3], bytes[4], bytes[5]]),
            },
            0x26 if zeros_from(1) => Opcode::Close,
            0x27 if zeros_from(1) => Opcode::Sleep,
            0x41 if zeros_from(1) => Opcode::ResponseOk,
            0x22 | 0x23 | 0x24 | 0x25 | 0x26 | 0x27 | 0x41 => {
                return Err(OpcodeError::MalformedOpcode(OPCODE_LEN))
            }
            other => return Err(OpcodeError::UnknownOpcode(other)),
        };
        Ok(op)
    }

    fn declared_data_len(&self) -> usize {
        match *self {
            Opcode::Write { data_len, .. } => data_len as usize,
            _ => 0,
        }
    }
}

fn narrow(value: u64, name: &'static str) -> Result<u8, OpcodeError> {
    u8::try_from(value).map_err(|_| OpcodeError::InvalidParam { name, value })
}

/// XML block carrying base64-encoded opcodes plus their payload data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LegacyFrame {
    pub xml_body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("malformed legacy frame: {0}")]
    MalformedFrame(String),
}

/// Pack opcodes and trailing payload data into the XML transport envelope.
/// The payload data length must equal the total declared by WRITE opcodes.
pub fn frame_legacy(opcodes: &[Opcode], data: &[u8]) -> Result<LegacyFrame, FrameError> {
    if opcodes.is_empty() {
        return Err(FrameError::MalformedFrame("empty opcode list".into()));
    }
    let declared: usize = opcodes.iter().map(Opcode::declared_data_len).sum();
    if declared != data.len() {
        return Err(FrameError::MalformedFrame(format!(
            "declared data length {declared} does not match payload length {}",
            data.len()
        )));
    }
    let mut payload = Vec::with_capacity(opcodes.len() * OPCODE_LEN + data.len());
    for op in opcodes {
        payload.extend_from_slice(&op.encode());
    }
    payload.extend_from_slice(data);
    Ok(LegacyFrame {
        xml_body: format!("{XML_PREFIX}{}{XML_SUFFIX}", BASE64.encode(payload)),
    })
}

/// Inverse of [`frame_legacy`]. Opcodes are read greedily until exactly the
/// WRITE-declared number of data bytes remains.
pub fn unframe_legacy(frame: &LegacyFrame) -> Result<(Vec<Opcode>, Vec<u8>), FrameError> {
    let inner = frame
        .xml_body
        .strip_prefix(XML_PREFIX)
        .and_then(|rest| rest.strip_suffix(XML_SUFFIX))
        .ok_or_else(|| FrameError::MalformedFrame("missing XML envelope".into()))?;
    let payload = BASE64
        .decode(inner)
        .map_err(|e| FrameError::MalformedFrame(format!("undecodable base64: {e}")))?;

    let mut opcodes = Vec::new();
    let mut expected_data = 0usize;
    let mut offset = 0usize;
    loop {
        let remaining = payload.len() - offset;
        if remaining == expected_data {
            break;
        }
        if remaining < expected_data + OPCODE_LEN {
            return Err(FrameError::MalformedFrame(
                "payload length does not cover opcodes plus declared data".into(),
            ));
        }
        let op = Opcode::decode(&payload[offset..offset + OPCODE_LEN])
            .map_err(|e| FrameError::MalformedFrame(e.to_string()))?;
        expected_data += op.declared_data_len();
        opcodes.push(op);
        offset += OPCODE_LEN;
    }
    if opcodes.is_empty() {
        return Err(FrameError::MalformedFrame("empty opcode list".into()));
    }
    Ok((opcodes, payload[offset..].to_vec()))
}

/// 8-byte public tracker identifier.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrackerId([u8; 8]);

impl TrackerId {
    pub fn new(bytes: [u8; 8]) -> Self {
        Self(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, MessageError> {
        let arr: [u8; 8] = bytes
            .try_into()
            .map_err(|_| MessageError::Malformed("tracker id must be 8 bytes".into()))?;
        Ok(Self(arr))
    }

    pub fn as_bytes(&self) -> &[u8; 8] {
        &self.0
    }
}

impl std::fmt::Display for TrackerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl std::fmt::Debug for TrackerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "TrackerId({})", hex::encode(self.0))
    }
}

/// Message types of the authenticated sync protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Beacon = 0x01,
    TrqData = 0x02,
    Rewrite = 0x03,
    Ack = 0x04,
}

impl MsgType {
    fn from_byte(byte: u8) -> Option<Self> {
        match byte {
            0x01 => Some(MsgType::Beacon),
            0x02 => Some(MsgType::TrqData),
            0x03 => Some(MsgType::Rewrite),
            0x04 => Some(MsgType::Ack),
            _ => None,
        }
    }
}

/// Authenticated tracker<->webserver message. The tag is computed during
/// encode and checked during decode; it is never carried in this struct.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensCryptMessage {
    pub msg_type: MsgType,
    pub tracker_id: TrackerId,
    pub body: Vec<u8>,
}

impl SensCryptMessage {
    pub fn new(msg_type: MsgType, tracker_id: TrackerId, body: Vec<u8>) -> Self {
        Self { msg_type, tracker_id, body }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MessageError {
    /// Tag mismatch: forged, corrupted or wrong-key frame.
    #[error("message authentication failed")]
    AuthFailure,
    #[error("malformed message: {0}")]
    Malformed(String),
}

const MSG_HEADER_LEN: usize = 1 + 8 + 4;

fn mac_input(msg: &SensCryptMessage) -> Vec<u8> {
    let mut input = Vec::with_capacity(1 + 8 + msg.body.len());
    input.push(msg.msg_type as u8);
    input.extend_from_slice(msg.tracker_id.as_bytes());
    input.extend_from_slice(&msg.body);
    input
}

/// Serialize and authenticate a message under the tracker key.
pub fn encode_message(msg: &SensCryptMessage, k_t: &SymmetricKey) -> Vec<u8> {
    let tag = crypto::mac(k_t, &mac_input(msg));
    let mut out = Vec::with_capacity(MSG_HEADER_LEN + msg.body.len() + TAG_LEN);
    out.push(msg.msg_type as u8);
    out.extend_from_slice(msg.tracker_id.as_bytes());
    out.extend_from_slice(&(msg.body.len() as u32).to_be_bytes());
    out.extend_from_slice(&msg.body);
    out.extend_from_slice(tag.as_bytes());
    out
}

/// Parse and verify a message. The tag is checked before anything is
/// returned, so downstream logic only ever sees authentic frames.
pub fn decode_message(bytes: &[u8], k_t: &SymmetricKey) -> Result<SensCryptMessage, MessageError> {
    if bytes.len() < MSG_HEADER_LEN + TAG_LEN {
        return Err(MessageError::Malformed("truncated message header".into()));
    }
    let msg_type = MsgType::from_byte(bytes[0])
        .ok_or_else(|| MessageError::Malformed(format!("unknown message type 0x{:02x}", bytes[0])))?;
    let tracker_id = TrackerId::from_slice(&bytes[1..9])?;
    let body_len = u32::from_be_bytes(bytes[9..13].try_into().unwrap()) as usize;
    if bytes.len() != MSG_HEADER_LEN + body_len + TAG_LEN {
        return Err(MessageError::Malformed("body length field disagrees with frame size".into()));
    }
    let body = bytes[MSG_HEADER_LEN..MSG_HEADER_LEN + body_len].to_vec();
    let tag = AuthTag::from_slice(&bytes[MSG_HEADER_LEN + body_len..])
        .map_err(|e| MessageError::Malformed(e.to_string()))?;
    let msg = SensCryptMessage { msg_type, tracker_id, body };
    if !crypto::verify_mac(k_t, &mac_input(&msg), &tag) {
        return Err(MessageError::AuthFailure);
    }
    Ok(msg)
}

/// Read the tracker id out of a raw frame without verifying it, so the
/// server can look up the right key before [`decode_message`] runs.
pub fn peek_tracker_id(bytes: &[u8]) -> Result<TrackerId, MessageError> {
    if bytes.len() < MSG_HEADER_LEN {
        return Err(MessageError::Malformed("truncated message header".into()));
    }
    TrackerId::from_slice(&bytes[1..9])
}

/// TRQ-DATA body: 13-byte pointer header followed by the red records in
/// traversal order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrqDataBody {
    pub dirty: u32,
    pub clean: u32,
    pub wrapped: bool,
    pub red_count: u32,
    pub records: Vec<u8>,
}

impl TrqDataBody {
    pub const HEADER_LEN: usize = 13;

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::HEADER_LEN + self.records.len());
        out.extend_from_slice(&self.dirty.to_be_bytes());
        out.extend_from_slice(&self.clean.to_be_bytes());
        out.push(self.wrapped as u8);
        out.extend_from_slice(&self.red_count.to_be_bytes());
        out.extend_from_slice(&self.records);
        out
    }

    /// Structural parse only; cross-field consistency is judged by the
    /// server, which knows what the fields must add up to.
    pub fn decode(bytes: &[u8]) -> Result<Self, MessageError> {
        if bytes.len() < Self::HEADER_LEN {
            return Err(MessageError::Malformed("truncated TRQ-DATA header".into()));
        }
        let wrapped = match bytes[8] {
            0 => false,
            1 => true,
            other => {
                return Err(MessageError::Malformed(format!("invalid wrapped flag 0x{other:02x}")))
            }
        };
        Ok(Self {
            dirty: u32::from_be_bytes(bytes[0..4].try_into().unwrap()),
            clean: u32::from_be_bytes(bytes[4..8].try_into().unwrap()),
            wrapped,
            red_count: u32::from_be_bytes(bytes[9..13].try_into().unwrap()),
            records: bytes[Self::HEADER_LEN..].to_vec(),
        })
    }
}

/// One sealed record replacement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewriteEntry {
    pub index: u32,
    pub sealed: Vec<u8>,
}

/// Ordered rewrite batch covering a red region in traversal order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RewriteBatch {
    pub entries: Vec<RewriteEntry>,
}

impl RewriteBatch {
    /// `count(4) || sealed_len(4) || (index(4) || sealed)*`; all entries
    /// carry equally long sealed values.
    pub fn encode(&self) -> Vec<u8> {
        let sealed_len = self.entries.first().map_or(0, |e| e.sealed.len());
        debug_assert!(self.entries.iter().all(|e| e.sealed.len() == sealed_len));
        let mut out = Vec::with_capacity(8 + self.entries.len() * (4 + sealed_len));
        out.extend_from_slice(&(self.entries.len() as u32).to_be_bytes());
        out.extend_from_slice(&(sealed_len as u32).to_be_bytes());
        for entry in &self.entries {
            out.extend_from_slice(&entry.index.to_be_bytes());
            out.extend_from_slice(&entry.sealed);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, MessageError> {
        if bytes.len() < 8 {
            return Err(MessageError::Malformed("truncated rewrite batch header".into()));
        }
        let count = u32::from_be_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let sealed_len = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let expected = 8usize
            .checked_add(count.checked_mul(4 + sealed_len).ok_or_else(overlong)?)
            .ok_or_else(overlong)?;
        if bytes.len() != expected {
            return Err(MessageError::Malformed("rewrite batch length mismatch".into()));
        }
        let mut entries = Vec::with_capacity(count);
        let mut off = 8;
        for _ in 0..count {
            let index = u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap());
            let sealed = bytes[off + 4..off + 4 + sealed_len].to_vec();
            entries.push(RewriteEntry { index, sealed });
            off += 4 + sealed_len;
        }
        Ok(Self { entries })
    }
}

fn overlong() -> MessageError {
    MessageError::Malformed("rewrite batch length overflow".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_opcode_encodings() {
        assert_eq!(Opcode::TrqReq.encode(), [0x24, 0, 0, 0, 0, 0, 0]);
        assert_eq!(Opcode::ReadTrq { bank: 0 }.encode(), [0x22, 0, 0, 0, 0, 0, 0]);
        assert_eq!(Opcode::ResponseOk.encode(), [0x41, 0, 0, 0, 0, 0, 0]);
        assert_eq!(
            Opcode::Write { bank: 2, data_len: 16 }.encode(),
            [0x23, 0x02, 0x00, 0x10, 0, 0, 0]
        );
        assert_eq!(
            Opcode::Erase { bank: 1, deadline: 0x530f_b560 }.encode(),
            [0x25, 0x01, 0x53, 0x0f, 0xb5, 0x60, 0x00]
        );
    }

    #[test]
    fn decode_inverts_encode() {
        let ops = [
            Opcode::TrqReq,
            Opcode::ReadTrq { bank: 255 },
            Opcode::Write { bank: 9, data_len: 65535 },
            Opcode::Erase { bank: 3, deadline: u32::MAX },
            Opcode::Close,
            Opcode::Sleep,
            Opcode::ResponseOk,
        ];
        for op in ops {
            assert_eq!(Opcode::decode(&op.encode()).unwrap(), op);
        }
    }

    #[test]
    fn decode_rejects_wrong_length_and_unknown_byte() {
        assert!(matches!(
            Opcode::decode(&[0x24, 0, 0, 0, 0, 0]),
            Err(OpcodeError::MalformedOpcode(6))
        ));
        assert!(matches!(
            Opcode::decode(&[0x99, 0, 0, 0, 0, 0, 0]),
            Err(OpcodeError::UnknownOpcode(0x99))
        ));
        // stray bits in the zero-fill are not canonical
        assert!(Opcode::decode(&[0x24, 0, 0, 0, 0, 0, 1]).is_err());
    }

    #[test]
    fn constructors_reject_out_of_range_params() {
        assert!(matches!(
            Opcode::read_trq(256),
            Err(OpcodeError::InvalidParam { name: "bank", .. })
        ));
        assert!(Opcode::write(0, 70_000).is_err());
        assert!(Opcode::erase(0, u64::MAX).is_err());
    }

    #[test]
    fn frame_roundtrip_with_write_payload() {
        let ops = vec![Opcode::Write { bank: 0, data_len: 16 }];
        let data = vec![0xAB; 16];
        let frame = frame_legacy(&ops, &data).unwrap();
        let (ops2, data2) = unframe_legacy(&frame).unwrap();
        assert_eq!(ops2, ops);
        assert_eq!(data2, data);

        // decoded payload is opcode plus data: 7 + 16 bytes
        let inner = frame
            .xml_body
            .strip_prefix(XML_PREFIX)
            .and_then(|r| r.strip_suffix(XML_SUFFIX))
            .unwrap();
        assert_eq!(BASE64.decode(inner).unwrap().len(), 23);
    }

    #[test]
    fn trq_req_frame_carries_known_base64() {
        // "JAAAAAAAAA==" is the independently computed base64 of
        // 24 00 00 00 00 00 00
        let frame = frame_legacy(&[Opcode::TrqReq], &[]).unwrap();
        assert_eq!(
            frame.xml_body,
            "<fitbitClient><device>JAAAAAAAAA==</device></fitbitClient>"
        );
    }

    #[test]
    fn frame_refuses_empty_opcode_list_and_length_mismatch() {
        assert!(frame_legacy(&[], &[]).is_err());
        let ops = vec![Opcode::Write { bank: 0, data_len: 4 }];
        assert!(frame_legacy(&ops, &[0u8; 3]).is_err());
    }

    #[test]
    fn unframe_rejects_garbage() {
        let frame = LegacyFrame { xml_body: "<fitbitClient><device>!!!</device></fitbitClient>".into() };
        assert!(unframe_legacy(&frame).is_err());
        let frame = LegacyFrame { xml_body: "no envelope".into() };
        assert!(unframe_legacy(&frame).is_err());
    }

    fn test_key() -> SymmetricKey {
        SymmetricKey::new([0x42; 16])
    }

    fn sample_message() -> SensCryptMessage {
        SensCryptMessage::new(
            MsgType::TrqData,
            TrackerId::new([1, 2, 3, 4, 5, 6, 7, 8]),
            vec![0xDE, 0xAD, 0xBE, 0xEF],
        )
    }

    #[test]
    fn message_roundtrip() {
        let msg = sample_message();
        let bytes = encode_message(&msg, &test_key());
        assert_eq!(decode_message(&bytes, &test_key()).unwrap(), msg);
        assert_eq!(peek_tracker_id(&bytes).unwrap(), msg.tracker_id);
    }

    #[test]
    fn message_decode_rejects_wrong_key() {
        let bytes = encode_message(&sample_message(), &test_key());
        let other = SymmetricKey::new([0x43; 16]);
        assert_eq!(decode_message(&bytes, &other).unwrap_err(), MessageError::AuthFailure);
    }

    #[test]
    fn message_decode_rejects_truncation() {
        let bytes = encode_message(&sample_message(), &test_key());
        assert!(matches!(
            decode_message(&bytes[..bytes.len() - 1], &test_key()),
            Err(MessageError::Malformed(_))
        ));
    }

    #[test]
    fn trq_data_body_roundtrip_and_header_len() {
        let body = TrqDataBody {
            dirty: 2,
            clean: 1,
            wrapped: true,
            red_count: 3,
            records: vec![7u8; 3 * 64],
        };
        let bytes = body.encode();
        assert_eq!(bytes.len(), TrqDataBody::HEADER_LEN + 3 * 64);
        assert_eq!(TrqDataBody::decode(&bytes).unwrap(), body);
    }

    #[test]
    fn rewrite_batch_roundtrip_including_empty() {
        let batch = RewriteBatch {
            entries: vec![
                RewriteEntry { index: 6, sealed: vec![1u8; 68] },
                RewriteEntry { index: 7, sealed: vec![2u8; 68] },
            ],
        };
        assert_eq!(RewriteBatch::decode(&batch.encode()).unwrap(), batch);
        let empty = RewriteBatch::default();
        assert_eq!(RewriteBatch::decode(&empty.encode()).unwrap(), empty);
    }
}
