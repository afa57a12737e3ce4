//! Frame transcripts: every protocol frame, with direction and timing, in
//! a JSONL-friendly shape. Transcripts double as the Inspect attack
//! surface, so they carry exactly what went over the wire and nothing else.

use serde::{Deserialize, Serialize};

/// One frame as it crossed one hop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub tick: u64,
    pub from: String,
    pub to: String,
    pub frame_hex: String,
    pub note: String,
}

impl FrameRecord {
    pub fn frame_bytes(&self) -> Vec<u8> {
        hex::decode(&self.frame_hex).expect("transcripts hold valid hex")
    }
}

/// Append-only sequence of frame records.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    records: Vec<FrameRecord>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn log(&mut self, tick: u64, from: &str, to: &str, frame: &[u8], note: &str) {
        self.records.push(FrameRecord {
            tick,
            from: from.to_string(),
            to: to.to_string(),
            frame_hex: hex::encode(frame),
            note: note.to_string(),
        });
    }

    pub fn records(&self) -> &[FrameRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    /// Frames that crossed a given hop, in order.
    pub fn frames_between(&self, from: &str, to: &str) -> Vec<Vec<u8>> {
        self.records
            .iter()
            .filter(|r| r.from == from && r.to == to)
            .map(FrameRecord::frame_bytes)
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let mut records = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line)?);
        }
        Ok(Self { records })
    }
}
