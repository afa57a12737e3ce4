//! Session logic for the authenticated sync protocol: what each end does
//! with an incoming frame.
//!
//! A sync session is five frames: BEACON (tracker announces itself), ACK
//! (server asks for data), TRQ-DATA (the red region), REWRITE (the sealed
//! replacement batch) and a final ACK (tracker confirms installation). All
//! frames are authenticated; a frame that fails [`wire::decode_message`]
//! is rejected before any state machine sees it.

use thiserror::Error;

use crate::server::{Server, UploadError, UploadOutcome};
use crate::tracker::{ApplyError, Tracker};
use crate::wire::{
    self, MessageError, MsgType, RewriteBatch, SensCryptMessage, TrqDataBody,
};

/// ACK body sent by the server in response to a beacon: proceed with upload.
pub const ACK_PROCEED: u8 = 0x01;
/// ACK body sent by the tracker after installing a rewrite batch.
pub const ACK_APPLIED: u8 = 0x02;

#[derive(Debug, Error)]
pub enum TrackerNodeError {
    /// Frame failed authentication or parsing; dropped, state unchanged.
    #[error("frame rejected: {0}")]
    Reject(#[from] MessageError),
    #[error("rewrite batch refused: {0}")]
    Apply(#[from] ApplyError),
    #[error("unexpected {0:?} frame for the tracker")]
    Unexpected(MsgType),
}

/// Tracker endpoint of a sync session.
pub struct TrackerNode {
    pub tracker: Tracker,
}

impl TrackerNode {
    pub fn new(tracker: Tracker) -> Self {
        Self { tracker }
    }

    /// Announce presence; opens a session.
    pub fn make_beacon(&self) -> Vec<u8> {
        let msg = SensCryptMessage::new(MsgType::Beacon, self.tracker.id(), Vec::new());
        wire::encode_message(&msg, self.tracker.key())
    }

    /// React to one authenticated frame. `Ok(Some(reply))` continues the
    /// session, `Ok(None)` ends it.
    pub fn handle_frame(&mut self, bytes: &[u8]) -> Result<Option<Vec<u8>>, TrackerNodeError> {
        let msg = wire::decode_message(bytes, self.tracker.key())?;
        match msg.msg_type {
            MsgType::Ack if msg.body == [ACK_PROCEED] => {
                let payload = self.tracker.build_upload_payload();
                let reply = SensCryptMessage::new(MsgType::TrqData, self.tracker.id(), payload.encode());
                Ok(Some(wire::encode_message(&reply, self.tracker.key())))
            }
            MsgType::Rewrite => {
                let batch = RewriteBatch::decode(&msg.body)?;
                self.tracker.apply_rewrites(&batch)?;
                let reply = SensCryptMessage::new(MsgType::Ack, self.tracker.id(), vec![ACK_APPLIED]);
                Ok(Some(wire::encode_message(&reply, self.tracker.key())))
            }
            other => Err(TrackerNodeError::Unexpected(other)),
        }
    }
}

#[derive(Debug, Error)]
pub enum ServerNodeError {
    #[error("frame rejected: {0}")]
    Reject(#[from] MessageError),
    #[error("unknown tracker: session aborted")]
    UnknownTracker,
    #[error("upload refused: {0}")]
    Upload(#[from] UploadError),
    #[error("unexpected {0:?} frame for the server")]
    Unexpected(MsgType),
}

/// Server endpoint of sync sessions, for any number of trackers.
pub struct ServerNode {
    pub server: Server,
    last_outcome: Option<UploadOutcome>,
}

impl ServerNode {
    pub fn new(server: Server) -> Self {
        Self { server, last_outcome: None }
    }

    /// Outcome of the most recent processed upload, for reporting.
    pub fn last_outcome(&self) -> Option<&UploadOutcome> {
        self.last_outcome.as_ref()
    }

    /// React to one frame at the given simulation tick.
    pub fn handle_frame(&mut self, bytes: &[u8], tick: u64) -> Result<Option<Vec<u8>>, ServerNodeError> {
        let id = wire::peek_tracker_id(bytes)?;
        let k_t = self.server.lookup(id).map_err(|_| ServerNodeError::UnknownTracker)?.k_t;
        let msg = wire::decode_message(bytes, &k_t)?;
        match msg.msg_type {
            MsgType::Beacon => {
                let reply = SensCryptMessage::new(MsgType::Ack, id, vec![ACK_PROCEED]);
                Ok(Some(wire::encode_message(&reply, &k_t)))
            }
            MsgType::TrqData => {
                let body = TrqDataBody::decode(&msg.body)?;
                let outcome = self.server.process_upload(id, &body, tick)?;
                let reply = SensCryptMessage::new(MsgType::Rewrite, id, outcome.batch.encode());
                self.last_outcome = Some(outcome);
                Ok(Some(wire::encode_message(&reply, &k_t)))
            }
            MsgType::Ack if msg.body == [ACK_APPLIED] => Ok(None),
            other => Err(ServerNodeError::Unexpected(other)),
        }
    }
}
