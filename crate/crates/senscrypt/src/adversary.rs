//! Scripted attacker with declared capability sets.
//!
//! Each attack builds its own deterministic victim world from a seed, lets
//! the attacker act through capability-gated primitives, and judges success
//! against the world's plaintext shadow log (never against anything the
//! attacker reports about itself). A JTAG-R grant covers a single memory
//! dump; the double-dump variant is its own attack with its own budget.

use thiserror::Error;

use crate::crypto::{self, Generation, KeystreamDomain, SymmetricKey};
use crate::legacy::{BankEntry, ROUTE_DUMP_DATA, ROUTE_LOOKUP_TRACKER};
use crate::sim::{LegacyWorld, SensCryptWorld, StackKind};
use crate::tracker::TrackerSnapshot;
use crate::transcript::Transcript;
use crate::wire::{
    self, MsgType, Opcode, RewriteBatch, RewriteEntry, SensCryptMessage, TrqDataBody,
};

/// Step total the tracker-injection attack plants on the legacy stack.
pub const TI_STEP_TOTAL: u64 = 167_116;
/// Step total the account-injection attack lands on the legacy server.
pub const UAI_STEP_TOTAL: u64 = 12_580_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CapabilitySet {
    inspect: bool,
    inject: bool,
    capture: bool,
    jtag_r: bool,
}

impl CapabilitySet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with_inspect(mut self) -> Self {
        self.inspect = true;
        self
    }

    pub fn with_inject(mut self) -> Self {
        self.inject = true;
        self
    }

    pub fn with_capture(mut self) -> Self {
        self.capture = true;
        self
    }

    /// Reading memory requires possession, so this grants capture too.
    pub fn with_jtag_r(mut self) -> Self {
        self.jtag_r = true;
        self.capture = true;
        self
    }

    pub fn inspect(&self) -> bool {
        self.inspect
    }

    pub fn inject(&self) -> bool {
        self.inject
    }

    pub fn capture(&self) -> bool {
        self.capture
    }

    pub fn jtag_r(&self) -> bool {
        self.jtag_r
    }

    pub fn is_empty(&self) -> bool {
        !(self.inspect || self.inject || self.capture || self.jtag_r)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut caps = Self::none();
        if text.trim().eq_ignore_ascii_case("none") || text.trim().is_empty() {
            return Ok(caps);
        }
        for token in text.split('+') {
            match token.trim().to_ascii_lowercase().as_str() {
                "inspect" => caps.inspect = true,
                "inject" => caps.inject = true,
                "capture" => caps.capture = true,
                "jtag-r" | "jtag_r" | "jtagr" => caps = caps.with_jtag_r(),
                other => return Err(format!("unknown capability '{other}'")),
            }
        }
        Ok(caps)
    }
}

impl std::fmt::Display for CapabilitySet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if self.inspect {
            parts.push("inspect");
        }
        if self.inject {
            parts.push("inject");
        }
        if self.capture {
            parts.push("capture");
        }
        if self.jtag_r {
            parts.push("jtag-r");
        }
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("capability denied: {needed}")]
pub struct CapabilityDenied {
    pub needed: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    Tpdc,
    Ti,
    Uai,
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackKind::Tpdc => "TPDC",
            AttackKind::Ti => "TI",
            AttackKind::Uai => "UAI",
        })
    }
}

/// Machine-checkable evidence behind a verdict. For a successful data
/// capture both sides of the byte-equality are recorded; for injections,
/// the planted value and the observed state.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Evidence {
    pub summary: String,
    pub recovered_hex: Option<String>,
    pub ground_truth_hex: Option<String>,
    pub matched_shadow_index: Option<usize>,
    pub matched_count: usize,
    pub injected_value: Option<u64>,
    pub observed_value: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackOutcome {
    pub attack: AttackKind,
    pub stack: StackKind,
    pub capabilities: CapabilitySet,
    pub succeeded: bool,
    pub evidence: Evidence,
}

impl AttackOutcome {
    /// One line of the machine-readable matrix format.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.stack,
            self.capabilities,
            self.attack,
            self.succeeded,
            self.evidence.summary.replace(',', ";")
        )
    }
}

/// Capability gate: every primitive burns its grant here. A plain JTAG-R
/// grant covers one dump.
struct Gate {
    caps: CapabilitySet,
    jtag_budget: u32,
}

impl Gate {
    fn new(caps: CapabilitySet) -> Self {
        Self { caps, jtag_budget: 1 }
    }

    fn with_jtag_budget(caps: CapabilitySet, budget: u32) -> Self {
        Self { caps, jtag_budget: budget }
    }

    fn need(&self, granted: bool, what: &str) -> Result<(), CapabilityDenied> {
        if granted {
            Ok(())
        } else {
            Err(CapabilityDenied { needed: what.to_string() })
        }
    }
}

/// Attacker's view of a sync-protocol world.
pub struct SensCryptAttackCtx<'w> {
    world: &'w mut SensCryptWorld,
    gate: Gate,
}

impl<'w> SensCryptAttackCtx<'w> {
    pub fn new(world: &'w mut SensCryptWorld, caps: CapabilitySet) -> Self {
        Self { world, gate: Gate::new(caps) }
    }

    fn with_jtag_budget(world: &'w mut SensCryptWorld, caps: CapabilitySet, budget: u32) -> Self {
        Self { world, gate: Gate::with_jtag_budget(caps, budget) }
    }

    pub fn caps(&self) -> CapabilitySet {
        self.gate.caps
    }

    /// Wiretap: everything forwarded so far. [INSPECT]
    pub fn transcript(&self) -> Result<&Transcript, CapabilityDenied> {
        self.gate.need(self.gate.caps.inspect, "inspect")?;
        Ok(&self.world.transcript)
    }

    /// Send a raw frame to the tracker as if from the server; the reply to
    /// the attacker's own frame is visible to the attacker. [INJECT]
    pub fn inject_to_tracker(&mut self, frame: &[u8]) -> Result<Option<Vec<u8>>, CapabilityDenied> {
        self.gate.need(self.gate.caps.inject, "inject")?;
        self.world.tick += 1;
        let tick = self.world.tick;
        self.world.transcript.log(tick, "attacker", "tracker", frame, "injected frame");
        match self.world.tracker.handle_frame(frame) {
            Ok(Some(reply)) => {
                self.world.transcript.log(tick, "tracker", "attacker", &reply, "reply to injected frame");
                Ok(Some(reply))
            }
            Ok(None) => Ok(None),
            Err(_) => Ok(None), // rejected frames get silence
        }
    }

    /// Send a raw frame to the server. [INJECT]
    pub fn inject_to_server(&mut self, frame: &[u8]) -> Result<Option<Vec<u8>>, CapabilityDenied> {
        self.gate.need(self.gate.caps.inject, "inject")?;
        self.world.tick += 1;
        let tick = self.world.tick;
        self.world.transcript.log(tick, "attacker", "server", frame, "injected frame");
        match self.world.server.handle_frame(frame, tick) {
            Ok(Some(reply)) => {
                self.world.transcript.log(tick, "server", "attacker", &reply, "reply to injected frame");
                Ok(Some(reply))
            }
            Ok(None) => Ok(None),
            Err(_) => Ok(None),
        }
    }

    /// Physical possession without memory access: dump minus key. [CAPTURE]
    pub fn capture_snapshot(&mut self) -> Result<TrackerSnapshot, CapabilityDenied> {
        self.gate.need(self.gate.caps.capture, "capture")?;
        let bytes = self.world.snapshot_capture();
        Ok(TrackerSnapshot::parse(&bytes).expect("own snapshot parses"))
    }

    /// Full memory read including the tracker key. One dump per grant. [JTAG-R]
    pub fn jtag_snapshot(&mut self) -> Result<TrackerSnapshot, CapabilityDenied> {
        self.gate.need(self.gate.caps.jtag_r, "jtag-r")?;
        if self.gate.jtag_budget == 0 {
            return Err(CapabilityDenied { needed: "jtag-r (dump budget exhausted)".into() });
        }
        self.gate.jtag_budget -= 1;
        let bytes = self.world.snapshot_jtag();
        Ok(TrackerSnapshot::parse(&bytes).expect("own snapshot parses"))
    }
}

/// Per-bank memory dump of a captured legacy tracker.
pub type BankDump = Vec<(u8, Vec<u8>)>;

/// Attacker's view of a legacy world.
pub struct LegacyAttackCtx<'w> {
    world: &'w mut LegacyWorld,
    gate: Gate,
}

impl<'w> LegacyAttackCtx<'w> {
    pub fn new(world: &'w mut LegacyWorld, caps: CapabilitySet) -> Self {
        Self { world, gate: Gate::new(caps) }
    }

    fn with_jtag_budget(world: &'w mut LegacyWorld, caps: CapabilitySet, budget: u32) -> Self {
        Self { world, gate: Gate::with_jtag_budget(caps, budget) }
    }

    pub fn caps(&self) -> CapabilitySet {
        self.gate.caps
    }

    pub fn transcript(&self) -> Result<&Transcript, CapabilityDenied> {
        self.gate.need(self.gate.caps.inspect, "inspect")?;
        Ok(&self.world.transcript)
    }

    /// Rogue-base query: the legacy tracker serves any base. [INJECT]
    pub fn inject_opcode(&mut self, op: &Opcode, data: &[u8]) -> Result<Option<Vec<u8>>, CapabilityDenied> {
        self.gate.need(self.gate.caps.inject, "inject")?;
        self.world.tick += 1;
        let tick = self.world.tick;
        let frame = wire::frame_legacy(std::slice::from_ref(op), data)
            .map(|f| f.xml_body.into_bytes())
            .unwrap_or_default();
        self.world.transcript.log(tick, "attacker", "tracker", &frame, "query");
        match self.world.tracker.handle_opcode(op, data) {
            Ok(reply) => {
                self.world.transcript.log(tick, "tracker", "attacker", &reply, "query reply");
                Ok(Some(reply))
            }
            Err(_) => Ok(None),
        }
    }

    /// Forged webserver request. [INJECT]
    pub fn inject_request(&mut self, route: &str, body: &[u8]) -> Result<Option<Vec<u8>>, CapabilityDenied> {
        self.gate.need(self.gate.caps.inject, "inject")?;
        self.world.tick += 1;
        let tick = self.world.tick;
        self.world.transcript.log(tick, "attacker", "server", body, route);
        match self.world.server.handle_request(route, body) {
            Ok(reply) => {
                self.world.transcript.log(tick, "server", "attacker", &reply, route);
                Ok(Some(reply))
            }
            Err(_) => Ok(None),
        }
    }

    /// Dump of the cleartext banks, no factory secrets. [CAPTURE]
    pub fn capture_banks(&mut self) -> Result<BankDump, CapabilityDenied> {
        self.gate.need(self.gate.caps.capture, "capture")?;
        self.world.tick += 1;
        Ok(self.dump_banks())
    }

    /// Full dump including the factory passkey. One dump per grant. [JTAG-R]
    pub fn jtag_banks(&mut self) -> Result<(BankDump, [u8; 8]), CapabilityDenied> {
        self.gate.need(self.gate.caps.jtag_r, "jtag-r")?;
        if self.gate.jtag_budget == 0 {
            return Err(CapabilityDenied { needed: "jtag-r (dump budget exhausted)".into() });
        }
        self.gate.jtag_budget -= 1;
        self.world.tick += 1;
        Ok((self.dump_banks(), self.world.tracker.passkey()))
    }

    fn dump_banks(&self) -> BankDump {
        crate::relay::fitness_bank_indices()
            .map(|bank| (bank, self.world.tracker.bank(bank).expect("bank in range").to_vec()))
            .collect()
    }
}

fn judge_tpdc_senscrypt(world: &SensCryptWorld, caps: CapabilitySet, candidates: Vec<Vec<u8>>, how: &str) -> AttackOutcome {
    let shadow = world.shadow_data();
    let mut matched_count = 0usize;
    let mut first: Option<(usize, Vec<u8>)> = None;
    for candidate in &candidates {
        if let Some(idx) = shadow.iter().position(|s| *s == candidate.as_slice()) {
            matched_count += 1;
            if first.is_none() {
                first = Some((idx, candidate.clone()));
            }
        }
    }
    let succeeded = matched_count > 0;
    let evidence = match &first {
        Some((idx, bytes)) => Evidence {
            summary: format!("{how}: recovered {matched_count} record(s); first matches shadow[{idx}]"),
            recovered_hex: Some(hex::encode(bytes)),
            ground_truth_hex: Some(hex::encode(shadow[*idx])),
            matched_shadow_index: Some(*idx),
            matched_count,
            ..Evidence::default()
        },
        None => Evidence {
            summary: format!("{how}: {} candidate(s), none matched the shadow log", candidates.len()),
            ..Evidence::default()
        },
    };
    AttackOutcome { attack: AttackKind::Tpdc, stack: StackKind::SensCrypt, capabilities: caps, succeeded, evidence }
}

/// Compute per-index write generations the way an attacker would: from the
/// dumped (or uploaded) pointers and counter.
fn generation_for(dirty: u32, ctr: Generation, index: u32) -> Generation {
    if index < dirty {
        ctr.next()
    } else {
        ctr
    }
}

/// Tracker private data capture against the sync-protocol stack.
fn tpdc_senscrypt(caps: CapabilitySet, seed: u64) -> AttackOutcome {
    let mut world = SensCryptWorld::new(seed, 8, 32);
    let r = world.record_len() as usize;

    // victim activity, phase 1: a few records, then an honest sync
    for _ in 0..3 {
        world.write_random().unwrap();
    }
    world.upload().unwrap();

    let mut ctx = SensCryptAttackCtx::new(&mut world, caps);

    // a rewrite-planting upload was just observed (if we may listen); an
    // early dump grabs the green pre-images (if we may probe and inject)
    let observed_rewrites: Vec<(u32, Vec<u8>)> = if caps.inspect() {
        ctx.transcript()
            .unwrap()
            .frames_between("base", "tracker")
            .iter()
            .filter(|f| f.first() == Some(&(MsgType::Rewrite as u8)))
            .filter_map(|f| parse_rewrite_frame(f))
            .flatten()
            .collect()
    } else {
        Vec::new()
    };
    let early_dump = if caps.jtag_r() && caps.inject() && !caps.inspect() {
        Some(ctx.jtag_snapshot().unwrap())
    } else {
        None
    };

    // victim activity, phase 2: enough writes to cycle back over the
    // freshly re-imaged records; no sync afterwards
    ctx.world.tick += 1;
    for _ in 0..7 {
        ctx.world.write_random().unwrap();
    }

    let mut candidates: Vec<Vec<u8>> = Vec::new();
    let how: String;

    if caps.inspect() && caps.jtag_r() {
        // open the observed sealed rewrites with the dumped key, then undo
        // both pads on every record written over a known pre-image
        let snap = ctx.jtag_snapshot().unwrap();
        let k_t = snap.key.expect("jtag dump carries the key");
        for (index, sealed) in &observed_rewrites {
            if !snap.is_red(*index) {
                continue;
            }
            let gen = snap.generation_at(*index);
            if let Ok((_, pre_image)) = crypto::open_rewrite(&k_t, gen, *index, sealed) {
                let pad = crypto::keystream(&k_t, gen, *index, KeystreamDomain::Record, r);
                let data: Vec<u8> = snap
                    .record(*index)
                    .iter()
                    .zip(&pre_image)
                    .zip(&pad)
                    .map(|((m, w), t)| m ^ w ^ t)
                    .collect();
                candidates.push(data);
            }
        }
        how = "opened inspected rewrites with dumped key".into();
    } else if let Some(snap) = early_dump {
        // impersonate the server with the dumped key and read the red
        // region straight out of the tracker's reply
        let k_t = snap.key.expect("jtag dump carries the key");
        let id = snap.id;
        let ack = SensCryptMessage::new(MsgType::Ack, id, vec![crate::protocol::ACK_PROCEED]);
        let reply = ctx.inject_to_tracker(&wire::encode_message(&ack, &k_t)).unwrap();
        if let Some(frame) = reply {
            if let Ok(msg) = wire::decode_message(&frame, &k_t) {
                if let Ok(body) = TrqDataBody::decode(&msg.body) {
                    for (pos, index) in traversal_indices(&body).into_iter().enumerate() {
                        let chunk = &body.records[pos * r..(pos + 1) * r];
                        let gen = generation_for(body.dirty, snap.ctr, index);
                        let pad = crypto::keystream(&k_t, gen, index, KeystreamDomain::Record, r);
                        let data: Vec<u8> = chunk
                            .iter()
                            .zip(snap.record(index))
                            .zip(&pad)
                            .map(|((c, w), t)| c ^ w ^ t)
                            .collect();
                        candidates.push(data);
                    }
                }
            }
        }
        how = "faked a sync session with the dumped key and pre-images".into();
    } else if caps.jtag_r() {
        // single dump: the webserver pad is missing, best effort fails
        let snap = ctx.jtag_snapshot().unwrap();
        let k_t = snap.key.expect("jtag dump carries the key");
        for index in 0..snap.record_count {
            if !snap.is_red(index) {
                continue;
            }
            let gen = snap.generation_at(index);
            let pad = crypto::keystream(&k_t, gen, index, KeystreamDomain::Record, r);
            candidates.push(snap.record(index).iter().zip(&pad).map(|(m, t)| m ^ t).collect());
        }
        how = "single dump, stripped only the tracker pad".into();
    } else if caps.capture() {
        let snap = ctx.capture_snapshot().unwrap();
        for index in 0..snap.record_count {
            candidates.push(snap.record(index).to_vec());
        }
        how = "offline read of a captured device".into();
    } else if caps.inspect() {
        for frame in ctx.transcript().unwrap().frames_between("base", "server") {
            if frame.first() == Some(&(MsgType::TrqData as u8)) {
                if let Some(records) = parse_trq_records(&frame, r) {
                    candidates.extend(records);
                }
            }
        }
        how = "harvested upload payloads off the wire".into();
    } else if caps.inject() {
        // cannot produce a valid tag; the tracker stays silent
        let id = ctx.world.tracker_id();
        let forged = SensCryptMessage::new(MsgType::Ack, id, vec![crate::protocol::ACK_PROCEED]);
        let frame = wire::encode_message(&forged, &SymmetricKey::new([0u8; 16]));
        let reply = ctx.inject_to_tracker(&frame).unwrap();
        assert!(reply.is_none());
        how = "forged session request was rejected".into();
    } else {
        how = "no capabilities granted".into();
    }

    judge_tpdc_senscrypt(&world, caps, candidates, &how)
}

fn parse_rewrite_frame(frame: &[u8]) -> Option<Vec<(u32, Vec<u8>)>> {
    // structural parse without tag verification; attackers do not care
    let body = raw_body(frame)?;
    let batch = RewriteBatch::decode(&body).ok()?;
    Some(batch.entries.into_iter().map(|e| (e.index, e.sealed)).collect())
}

fn parse_trq_records(frame: &[u8], r: usize) -> Option<Vec<Vec<u8>>> {
    let body = raw_body(frame)?;
    let body = TrqDataBody::decode(&body).ok()?;
    if r == 0 || body.records.len() % r != 0 {
        return None;
    }
    Some(body.records.chunks(r).map(<[u8]>::to_vec).collect())
}

/// Body bytes of a raw frame, ignoring authentication entirely.
fn raw_body(frame: &[u8]) -> Option<Vec<u8>> {
    if frame.len() < 13 + 32 {
        return None;
    }
    let body_len = u32::from_be_bytes(frame[9..13].try_into().unwrap()) as usize;
    if frame.len() != 13 + body_len + 32 {
        return None;
    }
    Some(frame[13..13 + body_len].to_vec())
}

fn traversal_indices(body: &TrqDataBody) -> Vec<u32> {
    let mut out = Vec::with_capacity(body.red_count as usize);
    if !body.wrapped {
        out.extend(body.dirty..body.clean);
    } else {
        let n = body.dirty as usize + body.red_count as usize - body.clean as usize;
        out.extend((body.dirty as usize..n).map(|i| i as u32));
        out.extend(0..body.clean);
    }
    out
}

/// Tracker private data capture against the legacy stack.
fn tpdc_legacy(caps: CapabilitySet, seed: u64, minutes: usize) -> AttackOutcome {
    let mut world = LegacyWorld::new(seed);
    for _ in 0..minutes {
        world.record_random_minute().unwrap();
    }
    // a victim sync only happens when there is a wire to listen on
    if caps.inspect() {
        world.sync(true).unwrap();
    }

    let mut ctx = LegacyAttackCtx::new(&mut world, caps);
    let mut harvested: Vec<BankEntry> = Vec::new();
    let how: String;

    if caps.inspect() {
        for frame in ctx.transcript().unwrap().frames_between("base", "server") {
            if let Ok(fields) = crate::legacy::parse_form(&frame) {
                for (key, value) in fields {
                    if key.starts_with("bank") {
                        use base64::Engine;
                        if let Ok(bytes) = base64::engine::general_purpose::STANDARD.decode(value) {
                            if let Ok(entries) = BankEntry::decode_bank(&bytes) {
                                harvested.extend(entries);
                            }
                        }
                    }
                }
            }
        }
        how = "read bank payloads out of the cleartext sync transcript".into();
    } else if caps.inject() {
        for bank in crate::relay::fitness_bank_indices() {
            if let Some(bytes) = ctx.inject_opcode(&Opcode::ReadTrq { bank }, &[]).unwrap() {
                if let Ok(entries) = BankEntry::decode_bank(&bytes) {
                    harvested.extend(entries);
                }
            }
        }
        how = "queried the banks from a rogue base; the tracker never authenticates".into();
    } else if caps.jtag_r() {
        let (banks, _passkey) = ctx.jtag_banks().unwrap();
        for (_, bytes) in banks {
            harvested.extend(BankEntry::decode_bank(&bytes).unwrap_or_default());
        }
        how = "dumped the cleartext banks over JTAG".into();
    } else if caps.capture() {
        for (_, bytes) in ctx.capture_banks().unwrap() {
            harvested.extend(BankEntry::decode_bank(&bytes).unwrap_or_default());
        }
        how = "read the cleartext banks from a captured device".into();
    } else {
        how = "no capabilities granted".into();
    }

    let shadow = &world.shadow;
    let mut matched_count = 0usize;
    let mut first: Option<(usize, BankEntry)> = None;
    for entry in &harvested {
        if let Some(idx) = shadow.iter().position(|s| s == entry) {
            matched_count += 1;
            if first.is_none() {
                first = Some((idx, *entry));
            }
        }
    }
    let succeeded = matched_count > 0;
    let evidence = match first {
        Some((idx, entry)) => Evidence {
            summary: format!("{how}: {matched_count} entries match the victim's recordings"),
            recovered_hex: Some(hex::encode(entry.encode())),
            ground_truth_hex: Some(hex::encode(shadow[idx].encode())),
            matched_shadow_index: Some(idx),
            matched_count,
            ..Evidence::default()
        },
        None => Evidence {
            summary: format!("{how}: {} candidates, none match", harvested.len()),
            ..Evidence::default()
        },
    };
    AttackOutcome { attack: AttackKind::Tpdc, stack: StackKind::Legacy, capabilities: caps, succeeded, evidence }
}

pub fn attack_tpdc(stack: StackKind, caps: CapabilitySet, seed: u64) -> AttackOutcome {
    match stack {
        StackKind::SensCrypt => tpdc_senscrypt(caps, seed),
        StackKind::Legacy => tpdc_legacy(caps, seed, 1500),
    }
}

/// Legacy TPDC sized to pull at least one full day of per-minute entries.
pub fn attack_tpdc_legacy_full_day(caps: CapabilitySet, seed: u64) -> AttackOutcome {
    tpdc_legacy(caps, seed, crate::legacy::MINUTES_PER_DAY + 120)
}

/// Tracker injection: plant attacker-chosen data so the tracker state
/// decodes to it (next honest upload for the sync stack, bank contents for
/// the legacy stack).
pub fn attack_ti(stack: StackKind, caps: CapabilitySet, seed: u64) -> AttackOutcome {
    match stack {
        StackKind::SensCrypt => ti_senscrypt(caps, seed),
        StackKind::Legacy => ti_legacy(caps, seed),
    }
}

fn ti_senscrypt(caps: CapabilitySet, seed: u64) -> AttackOutcome {
    let mut world = SensCryptWorld::new(seed, 8, 32);
    let r = world.record_len() as usize;
    let planted = vec![0xEEu8; 32];

    for _ in 0..2 {
        world.write_random().unwrap();
    }
    world.upload().unwrap();

    let mut ctx = SensCryptAttackCtx::new(&mut world, caps);
    let mut how = String::from("no injection path");
    let mut plant_accepted = false;

    if caps.inject() {
        // victim writes two records the attacker will try to overwrite
        for _ in 0..2 {
            ctx.world.write_random().unwrap();
        }
        let key = if caps.jtag_r() {
            ctx.jtag_snapshot().ok().and_then(|s| s.key)
        } else {
            None
        };
        let key_known = key.is_some();
        let k_t = key.unwrap_or(SymmetricKey::new([0u8; 16]));
        let id = ctx.world.tracker_id();

        // fake a full sync session: request the payload, then answer with a
        // rewrite batch carrying the attacker's value instead of pre-images
        let ack = SensCryptMessage::new(MsgType::Ack, id, vec![crate::protocol::ACK_PROCEED]);
        if let Some(frame) = ctx.inject_to_tracker(&wire::encode_message(&ack, &k_t)).unwrap() {
            if let Ok(msg) = wire::decode_message(&frame, &k_t) {
                if let Ok(body) = TrqDataBody::decode(&msg.body) {
                    let ctr = ctx.world.tracker.tracker.ctr();
                    let entries: Vec<RewriteEntry> = traversal_indices(&body)
                        .into_iter()
                        .map(|index| {
                            let gen_new = generation_for(body.dirty, ctr, index).next();
                            RewriteEntry {
                                index,
                                sealed: crypto::seal_rewrite(&k_t, gen_new, index, &planted),
                            }
                        })
                        .collect();
                    let rewrite = SensCryptMessage::new(
                        MsgType::Rewrite,
                        id,
                        RewriteBatch { entries }.encode(),
                    );
                    let reply = ctx.inject_to_tracker(&wire::encode_message(&rewrite, &k_t)).unwrap();
                    plant_accepted = reply.is_some();
                }
            }
        }
        how = if key_known {
            format!("faked a sync and planted a rewrite batch (accepted: {plant_accepted})")
        } else {
            "forged frames without the key; tracker stayed silent".into()
        };
    }

    // victim keeps writing; the next honest upload is the judge
    for _ in 0..2 {
        world.write_random().unwrap();
    }
    world.upload().unwrap();

    let decoded = world.server_decoded();
    let succeeded = decoded.iter().any(|rec| *rec == planted.as_slice() && rec.len() == r);
    let evidence = Evidence {
        summary: format!("{how}; server-side decode contains planted value: {succeeded}"),
        recovered_hex: succeeded.then(|| hex::encode(&planted)),
        injected_value: Some(0xEE),
        ..Evidence::default()
    };
    AttackOutcome { attack: AttackKind::Ti, stack: StackKind::SensCrypt, capabilities: caps, succeeded, evidence }
}

fn ti_legacy(caps: CapabilitySet, seed: u64) -> AttackOutcome {
    let mut world = LegacyWorld::new(seed);
    for _ in 0..20 {
        world.record_random_minute().unwrap();
    }

    let mut ctx = LegacyAttackCtx::new(&mut world, caps);
    let mut how = String::from("no injection path");
    if caps.inject() {
        // overwrite bank 0 with entries totalling the implausible step count
        let entries = steps_as_entries(TI_STEP_TOTAL);
        let data = BankEntry::encode_bank(&entries);
        let op = Opcode::Write { bank: 0, data_len: data.len() as u16 };
        let reply = ctx.inject_opcode(&op, &data).unwrap();
        how = format!(
            "forged WRITE to bank 0 ({} entries), response-ok: {}",
            entries.len(),
            reply.as_deref() == Some(&Opcode::ResponseOk.encode()[..])
        );
    }

    let observed = world.tracker.daily_steps(0).unwrap_or(0);
    let succeeded = observed == TI_STEP_TOTAL;
    let evidence = Evidence {
        summary: format!("{how}; tracker bank 0 now totals {observed} steps"),
        injected_value: Some(TI_STEP_TOTAL),
        observed_value: Some(observed),
        ..Evidence::default()
    };
    AttackOutcome { attack: AttackKind::Ti, stack: StackKind::Legacy, capabilities: caps, succeeded, evidence }
}

/// Split a step total into maxed-out per-minute entries.
fn steps_as_entries(total: u64) -> Vec<BankEntry> {
    let mut entries = Vec::new();
    let mut remaining = total;
    let mut ts = 1u32;
    while remaining > 0 {
        let steps = remaining.min(u16::MAX as u64) as u16;
        entries.push(BankEntry { timestamp: ts, steps, floors: 0, has_gps: false, lat: 0, lon: 0 });
        remaining -= steps as u64;
        ts += 1;
    }
    entries
}

/// User-account injection: land attacker-chosen totals in the webserver
/// store without the victim tracker ever having recorded them.
pub fn attack_uai(stack: StackKind, caps: CapabilitySet, seed: u64) -> AttackOutcome {
    match stack {
        StackKind::SensCrypt => uai_senscrypt(caps, seed),
        StackKind::Legacy => uai_legacy(caps, seed),
    }
}

fn uai_senscrypt(caps: CapabilitySet, seed: u64) -> AttackOutcome {
    let mut world = SensCryptWorld::new(seed, 8, 32);
    let r = world.record_len() as usize;
    let fraudulent = vec![0xF4u8; 32];

    for _ in 0..3 {
        world.write_random().unwrap();
    }
    world.upload().unwrap();

    let mut ctx = SensCryptAttackCtx::new(&mut world, caps);
    let mut how = String::from("no injection path");

    if caps.inject() {
        let (key_known, k_t, snap) = if caps.jtag_r() {
            let snap = ctx.jtag_snapshot().unwrap();
            (snap.key.is_some(), snap.key.unwrap_or(SymmetricKey::new([0u8; 16])), Some(snap))
        } else {
            (false, SymmetricKey::new([0u8; 16]), None)
        };
        let id = ctx.world.tracker_id();

        // claim a fake red region over green records whose pre-images the
        // dump exposed, encoding the fraudulent value against them
        let (dirty, clean) = match &snap {
            Some(s) => (s.dirty, s.dirty + 2),
            None => (3, 5),
        };
        let records: Vec<u8> = (dirty..clean)
            .flat_map(|index| {
                let pad = crypto::keystream(&k_t, Generation::FIRST, index, KeystreamDomain::Record, r);
                let image: Vec<u8> = match &snap {
                    Some(s) => s.record(index).to_vec(),
                    None => vec![0u8; r],
                };
                fraudulent
                    .iter()
                    .zip(&image)
                    .zip(&pad)
                    .map(|((v, i), p)| v ^ i ^ p)
                    .collect::<Vec<u8>>()
            })
            .collect();
        let body = TrqDataBody { dirty, clean, wrapped: false, red_count: clean - dirty, records };
        let msg = SensCryptMessage::new(MsgType::TrqData, id, body.encode());
        let reply = ctx.inject_to_server(&wire::encode_message(&msg, &k_t)).unwrap();
        how = format!(
            "forged TRQ-DATA ({}), server replied: {}",
            if key_known { "valid tag from dumped key" } else { "no key, bogus tag" },
            reply.is_some()
        );
    }

    let decoded = world.server_decoded();
    let in_store = decoded.contains(&fraudulent.as_slice());
    let in_shadow = world.shadow_data().contains(&fraudulent.as_slice());
    let succeeded = in_store && !in_shadow;
    let evidence = Evidence {
        summary: format!("{how}; fraudulent record in store: {in_store}, ever recorded by victim: {in_shadow}"),
        recovered_hex: succeeded.then(|| hex::encode(&fraudulent)),
        injected_value: Some(0xF4),
        ..Evidence::default()
    };
    AttackOutcome { attack: AttackKind::Uai, stack: StackKind::SensCrypt, capabilities: caps, succeeded, evidence }
}

fn uai_legacy(caps: CapabilitySet, seed: u64) -> AttackOutcome {
    let mut world = LegacyWorld::new(seed);
    for _ in 0..20 {
        world.record_random_minute().unwrap();
    }
    let upi = world.upi;

    let mut ctx = LegacyAttackCtx::new(&mut world, caps);
    let mut how = String::from("no injection path");
    if caps.inject() {
        // learn the serial from the tracker, resolve TPI/UPI like any base
        use base64::Engine;
        let b64 = base64::engine::general_purpose::STANDARD;
        let info = ctx.inject_opcode(&Opcode::TrqReq, &[]).unwrap().unwrap_or_default();
        let lookup = ctx
            .inject_request(ROUTE_LOOKUP_TRACKER, format!("trqinfo={}", b64.encode(&info)).as_bytes())
            .unwrap();
        let upi_hex = lookup
            .and_then(|reply| {
                crate::legacy::parse_form(&reply).ok().and_then(|fields| {
                    fields.into_iter().find(|(k, _)| k == "upi").map(|(_, v)| v)
                })
            })
            .unwrap_or_default();

        let entries = steps_as_entries(UAI_STEP_TOTAL);
        let body = format!("upi={upi_hex}\nbank0={}\n", b64.encode(BankEntry::encode_bank(&entries)));
        let reply = ctx.inject_request(ROUTE_DUMP_DATA, body.as_bytes()).unwrap();
        how = format!(
            "resolved UPI via lookupTracker, posted fabricated dumpData ({} entries), accepted: {}",
            entries.len(),
            reply.is_some()
        );
    }

    let account = world.server.account(upi).expect("victim account");
    let succeeded = account.daily_steps == UAI_STEP_TOTAL && account.top_daily_step_badge;
    let evidence = Evidence {
        summary: format!(
            "{how}; account steps {} badge {}",
            account.daily_steps, account.top_daily_step_badge
        ),
        injected_value: Some(UAI_STEP_TOTAL),
        observed_value: Some(account.daily_steps),
        ..Evidence::default()
    };
    AttackOutcome { attack: AttackKind::Uai, stack: StackKind::Legacy, capabilities: caps, succeeded, evidence }
}

/// Schedule shape for the double-dump attack: the victim writes between
/// the dumps, and a sync may run after those writes but before the second
/// dump. Only that ordering defends: a sync re-images exactly the red
/// region, so records written after it would still sit on pre-images the
/// first dump already exposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DoubleJtagPlan {
    pub writes_before_t1: u32,
    pub writes_between: u32,
    pub upload_before_t2: bool,
}

impl Default for DoubleJtagPlan {
    fn default() -> Self {
        Self { writes_before_t1: 2, writes_between: 3, upload_before_t2: false }
    }
}

/// Capture the device twice and difference the dumps: the first dump holds
/// the pre-image, the second the encoded record and the key.
pub fn attack_double_jtag(
    stack: StackKind,
    kind: AttackKind,
    seed: u64,
    plan: DoubleJtagPlan,
) -> AttackOutcome {
    let caps = CapabilitySet::none().with_jtag_r();
    match stack {
        StackKind::Legacy => double_jtag_legacy(kind, caps, seed, plan),
        StackKind::SensCrypt => double_jtag_senscrypt(kind, caps, seed, plan),
    }
}

fn double_jtag_senscrypt(
    kind: AttackKind,
    caps: CapabilitySet,
    seed: u64,
    plan: DoubleJtagPlan,
) -> AttackOutcome {
    let mut world = SensCryptWorld::new(seed, 8, 32);
    let r = world.record_len() as usize;
    for _ in 0..plan.writes_before_t1 {
        world.write_random().unwrap();
    }

    let mut ctx = SensCryptAttackCtx::with_jtag_budget(&mut world, caps, 2);
    let snap1 = ctx.jtag_snapshot().unwrap();

    for _ in 0..plan.writes_between {
        ctx.world.write_random().unwrap();
    }
    if plan.upload_before_t2 {
        ctx.world.upload().unwrap();
    }

    let snap2 = ctx.jtag_snapshot().unwrap();

    if kind != AttackKind::Tpdc {
        // two read-only dumps give no way to place data anywhere
        return AttackOutcome {
            attack: kind,
            stack: StackKind::SensCrypt,
            capabilities: caps,
            succeeded: false,
            evidence: Evidence {
                summary: "double dump is read-only; no injection surface".into(),
                ..Evidence::default()
            },
        };
    }

    let k_t = snap2.key.expect("jtag dump carries the key");
    let mut candidates = Vec::new();
    for index in 0..snap2.record_count {
        // newly red since the first dump: first dump held its pre-image
        if snap2.is_red(index) && !snap1.is_red(index) {
            let gen = snap2.generation_at(index);
            let pad = crypto::keystream(&k_t, gen, index, KeystreamDomain::Record, r);
            let data: Vec<u8> = snap2
                .record(index)
                .iter()
                .zip(snap1.record(index))
                .zip(&pad)
                .map(|((m, w), t)| m ^ w ^ t)
                .collect();
            candidates.push(data);
        }
    }
    let mut outcome = judge_tpdc_senscrypt(&world, caps, candidates, "differenced two dumps");
    outcome.evidence.summary = format!(
        "upload between dumps: {}; {}",
        plan.upload_before_t2, outcome.evidence.summary
    );
    outcome
}

fn double_jtag_legacy(
    kind: AttackKind,
    caps: CapabilitySet,
    seed: u64,
    plan: DoubleJtagPlan,
) -> AttackOutcome {
    let mut world = LegacyWorld::new(seed);
    for _ in 0..plan.writes_before_t1 + plan.writes_between {
        world.record_random_minute().unwrap();
    }
    if kind != AttackKind::Tpdc {
        return AttackOutcome {
            attack: kind,
            stack: StackKind::Legacy,
            capabilities: caps,
            succeeded: false,
            evidence: Evidence {
                summary: "double dump is read-only; no injection surface".into(),
                ..Evidence::default()
            },
        };
    }
    // cleartext banks: the second dump alone already is the data
    let mut ctx = LegacyAttackCtx::with_jtag_budget(&mut world, caps, 2);
    let _ = ctx.jtag_banks().unwrap();
    let (banks, _) = ctx.jtag_banks().unwrap();
    let mut harvested = Vec::new();
    for (_, bytes) in banks {
        harvested.extend(BankEntry::decode_bank(&bytes).unwrap_or_default());
    }
    let matched_count = harvested.iter().filter(|e| world.shadow.contains(e)).count();
    let succeeded = matched_count > 0;
    AttackOutcome {
        attack: AttackKind::Tpdc,
        stack: StackKind::Legacy,
        capabilities: caps,
        succeeded,
        evidence: Evidence {
            summary: format!("second dump alone yields {matched_count} cleartext entries"),
            matched_count,
            ..Evidence::default()
        },
    }
}

/// The one JTAG-RW scenario: with write access and the dumped key, encode
/// fraudulent data in place so the next honest sync delivers it.
pub fn attack_ti_jtag_rw(seed: u64) -> AttackOutcome {
    let caps = CapabilitySet::none().with_jtag_r().with_inject();
    let mut world = SensCryptWorld::new(seed, 8, 32);
    let r = world.record_len() as usize;
    let planted = vec![0xEEu8; 32];

    for _ in 0..2 {
        world.write_random().unwrap();
    }
    world.upload().unwrap();

    // read key and memory, then write: encode the plant exactly the way
    // RecordData would have, and advance the pointers to match
    let snapshot = TrackerSnapshot::parse(&world.snapshot_jtag()).expect("own snapshot");
    let k_t = snapshot.key.expect("jtag dump carries the key");
    let index = snapshot.clean;
    let gen = snapshot.generation_at(index);
    let pad = crypto::keystream(&k_t, gen, index, KeystreamDomain::Record, r);
    let encoded: Vec<u8> = snapshot
        .record(index)
        .iter()
        .zip(&planted)
        .zip(&pad)
        .map(|((image, v), p)| image ^ v ^ p)
        .collect();
    let tracker = &mut world.tracker.tracker;
    tracker.jtag_rw_overwrite(index, &encoded);
    let n = tracker.record_count();
    tracker.jtag_rw_set_pointers(snapshot.dirty, (index + 1) % n, snapshot.red_count + 1);

    world.upload().unwrap();
    let succeeded = world.server_decoded().contains(&planted.as_slice());
    AttackOutcome {
        attack: AttackKind::Ti,
        stack: StackKind::SensCrypt,
        capabilities: caps,
        succeeded,
        evidence: Evidence {
            summary: format!("JTAG-RW in-place encode; decoded server-side: {succeeded}"),
            injected_value: Some(0xEE),
            recovered_hex: succeeded.then(|| hex::encode(&planted)),
            ..Evidence::default()
        },
    }
}

/// One row of the security matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatrixRow {
    pub label: String,
    pub capabilities: CapabilitySet,
    pub outcomes: Vec<AttackOutcome>,
}

impl MatrixRow {
    pub fn thwarted(&self) -> Vec<AttackKind> {
        self.outcomes.iter().filter(|o| !o.succeeded).map(|o| o.attack).collect()
    }

    pub fn succeeded(&self) -> Vec<AttackKind> {
        self.outcomes.iter().filter(|o| o.succeeded).map(|o| o.attack).collect()
    }
}

/// Full capability-grid run against one stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecurityMatrix {
    pub stack: StackKind,
    pub seed: u64,
    pub rows: Vec<MatrixRow>,
}

impl SecurityMatrix {
    pub fn row(&self, label: &str) -> Option<&MatrixRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Line-delimited `stack,capabilities,attack,succeeded,evidence` records.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stack,capabilities,attack,succeeded,evidence_ref\n");
        for row in &self.rows {
            for outcome in &row.outcomes {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    self.stack,
                    row.label,
                    outcome.attack,
                    outcome.succeeded,
                    outcome.evidence.summary.replace(',', ";")
                ));
            }
        }
        out
    }

    /// Human-readable table listing the thwarted attacks per row.
    pub fn render_text(&self) -> String {
        let mut out = format!("Security matrix — stack: {} (seed {})\n", self.stack, self.seed);
        out.push_str(&format!("{:<18} {:<28} {}\n", "capabilities", "thwarted", "succeeded"));
        for row in &self.rows {
            let thwarted: Vec<String> = row.thwarted().iter().map(|a| a.to_string()).collect();
            let succeeded: Vec<String> = row.succeeded().iter().map(|a| a.to_string()).collect();
            out.push_str(&format!(
                "{:<18} {:<28} {}\n",
                row.label,
                if thwarted.is_empty() { "-".into() } else { thwarted.join(",") },
                if succeeded.is_empty() { "-".into() } else { succeeded.join(",") },
            ));
        }
        out
    }
}

/// Run the full capability-by-attack grid against one stack. Deterministic
/// for a fixed seed: every cell derives its world seed from the row and
/// attack position.
pub fn security_matrix(stack: StackKind, seed: u64) -> SecurityMatrix {
    let row_defs: [(&str, CapabilitySet); 6] = [
        ("Inspect", CapabilitySet::none().with_inspect()),
        ("Inject", CapabilitySet::none().with_inject()),
        ("Capture", CapabilitySet::none().with_capture()),
        ("JTAG-R", CapabilitySet::none().with_jtag_r()),
        ("JTAG-R+Inspect", CapabilitySet::none().with_jtag_r().with_inspect()),
        ("JTAG-R+Inject", CapabilitySet::none().with_jtag_r().with_inject()),
    ];

    let cell_seed = |row: u64, col: u64| seed.wrapping_mul(1_000_003).wrapping_add(row * 97 + col);

    let mut rows = Vec::new();
    for (row_idx, (label, caps)) in row_defs.iter().enumerate() {
        let outcomes = vec![
            attack_tpdc(stack, *caps, cell_seed(row_idx as u64, 0)),
            attack_ti(stack, *caps, cell_seed(row_idx as u64, 1)),
            attack_uai(stack, *caps, cell_seed(row_idx as u64, 2)),
        ];
        rows.push(MatrixRow { label: label.to_string(), capabilities: *caps, outcomes });
    }

    // the double-dump row runs with its window open: the dumps straddle
    // the victim's writes with no sync in between
    let plan = DoubleJtagPlan::default();
    let outcomes = vec![
        attack_double_jtag(stack, AttackKind::Tpdc, cell_seed(6, 0), plan),
        attack_double_jtag(stack, AttackKind::Ti, cell_seed(6, 1), plan),
        attack_double_jtag(stack, AttackKind::Uai, cell_seed(6, 2), plan),
    ];
    rows.push(MatrixRow {
        label: "Double JTAG-R".to_string(),
        capabilities: CapabilitySet::none().with_jtag_r(),
        outcomes,
    });

    SecurityMatrix { stack, seed, rows }
}

/// Session-count metric for the battery-drain behavior: how many frames
/// the attacker pushed at the tracker. Reported, never judged.
pub fn attacker_query_count(transcript: &Transcript) -> usize {
    transcript.records().iter().filter(|r| r.from == "attacker" && r.to == "tracker").count()
}


#[cfg(test)]
mod metric_tests {
    use super::*;

    // the battery-drain behavior surfaces as a query count, nothing more
    #[test]
    fn query_count_tracks_injected_frames() {
        let mut world = LegacyWorld::new(4);
        world.record_random_minute().unwrap();
        let mut ctx = LegacyAttackCtx::new(&mut world, CapabilitySet::none().with_inject());
        for _ in 0..4 {
            ctx.inject_opcode(&Opcode::TrqReq, &[]).unwrap();
        }
        assert_eq!(attacker_query_count(&world.transcript), 4);
    }
}
