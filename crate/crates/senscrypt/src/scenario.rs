//! Line-oriented scenario files and their runner.
//!
//! A scenario is a plain text file: `key value` configuration lines first,
//! then one event per line. Events run in order against a freshly seeded
//! world; everything a run produces (transcript, service log, snapshots,
//! attack outcomes, final states) lands in the output directory.
//!
//! ```text
//! # make the clean pointer wrap, then sync
//! seed 42
//! stack senscrypt
//! records 8
//! record-len 64
//! write random
//! upload
//! snapshot t1
//! attack tpdc caps=inspect
//! attack double-jtag writes=3
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::adversary::{
    attack_double_jtag, attack_tpdc, attack_ti, attack_uai, AttackKind, AttackOutcome,
    CapabilitySet, DoubleJtagPlan,
};
use crate::sim::{LegacyWorld, SensCryptWorld, StackKind};
use crate::tracker::{DEFAULT_RECORD_COUNT, DEFAULT_RECORD_LEN};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScheduleError {
    #[error("line {line}: {why}")]
    Malformed { line: usize, why: String },
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("transport: {0}")]
    Transport(String),
}

/// How uploads reach the server during a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    InProc,
    /// Spin up the framed TCP service on this address and run every
    /// session through real sockets.
    Tcp { listen: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    /// Record one sensor snapshot; `None` draws seeded random bytes.
    Write(Option<Vec<u8>>),
    Upload,
    Snapshot(String),
    Attack { kind: AttackKind, caps: CapabilitySet },
    DoubleJtag(DoubleJtagPlan),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub seed: u64,
    pub stack: StackKind,
    pub record_count: u32,
    pub record_len: u32,
    pub epoch_ticks: u64,
    pub events: Vec<Event>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            seed: 0,
            stack: StackKind::SensCrypt,
            record_count: DEFAULT_RECORD_COUNT,
            record_len: DEFAULT_RECORD_LEN,
            epoch_ticks: 1,
            events: Vec::new(),
        }
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScheduleError> {
        let mut scenario = Scenario::default();
        let malformed = |line: usize, why: String| ScheduleError::Malformed { line, why };

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (head, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let rest = rest.trim();
            match head {
                "seed" => {
                    scenario.seed = rest
                        .parse()
                        .map_err(|_| malformed(line_no, format!("bad seed '{rest}'")))?;
                }
                "stack" => {
                    scenario.stack = rest.parse().map_err(|e| malformed(line_no, e))?;
                }
                "records" => {
                    scenario.record_count = rest
                        .parse()
                        .map_err(|_| malformed(line_no, format!("bad record count '{rest}'")))?;
                }
                "record-len" => {
                    scenario.record_len = rest
                        .parse()
                        .map_err(|_| malformed(line_no, format!("bad record length '{rest}'")))?;
                }
                "epoch-ticks" => {
                    scenario.epoch_ticks = rest
                        .parse()
                        .map_err(|_| malformed(line_no, format!("bad epoch ticks '{rest}'")))?;
                }
                "write" => {
                    let event = match rest {
                        "" | "random" => Event::Write(None),
                        hex_arg => {
                            let hex_str = hex_arg.strip_prefix("hex ").unwrap_or(hex_arg);
                            let bytes = hex::decode(hex_str.trim()).map_err(|_| {
                                malformed(line_no, format!("bad hex payload '{hex_str}'"))
                            })?;
                            Event::Write(Some(bytes))
                        }
                    };
                    scenario.events.push(event);
                }
                "upload" | "sync" => scenario.events.push(Event::Upload),
                "snapshot" => {
                    if rest.is_empty() {
                        return Err(malformed(line_no, "snapshot needs a tag".into()));
                    }
                    scenario.events.push(Event::Snapshot(rest.to_string()));
                }
                "attack" => scenario.events.push(parse_attack(rest, line_no)?),
                other => return Err(malformed(line_no, format!("unknown event '{other}'"))),
            }
        }
        Ok(scenario)
    }
}

fn parse_attack(rest: &str, line_no: usize) -> Result<Event, ScheduleError> {
    let malformed = |why: String| ScheduleError::Malformed { line: line_no, why };
    let mut tokens = rest.split_whitespace();
    let kind_token = tokens.next().ok_or_else(|| malformed("attack needs a kind".into()))?;

    let mut params: BTreeMap<&str, &str> = BTreeMap::new();
    for token in tokens {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| malformed(format!("bad attack parameter '{token}'")))?;
        params.insert(key, value);
    }

    if kind_token.eq_ignore_ascii_case("double-jtag") {
        let mut plan = DoubleJtagPlan::default();
        if let Some(w) = params.get("writes") {
            plan.writes_between =
                w.parse().map_err(|_| malformed(format!("bad writes '{w}'")))?;
        }
        if let Some(u) = params.get("upload-between") {
            plan.upload_before_t2 =
                u.parse().map_err(|_| malformed(format!("bad upload-between '{u}'")))?;
        }
        return Ok(Event::DoubleJtag(plan));
    }

    let kind = match kind_token.to_ascii_lowercase().as_str() {
        "tpdc" => AttackKind::Tpdc,
        "ti" => AttackKind::Ti,
        "uai" => AttackKind::Uai,
        other => return Err(malformed(format!("unknown attack '{other}'"))),
    };
    let caps = match params.get("caps") {
        Some(caps_text) => CapabilitySet::parse(caps_text).map_err(malformed)?,
        None => CapabilitySet::none(),
    };
    Ok(Event::Attack { kind, caps })
}

/// Everything one run produced.
pub struct RunReport {
    pub transcript_jsonl: String,
    pub service_log: String,
    pub snapshots: Vec<(String, Vec<u8>)>,
    pub attack_outcomes: Vec<AttackOutcome>,
    pub notes: Vec<String>,
    pub final_tick: u64,
}

impl RunReport {
    /// Write transcript, service log, snapshots and outcomes into a
    /// directory.
    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("transcript.jsonl"), &self.transcript_jsonl)?;
        std::fs::write(dir.join("service.log"), &self.service_log)?;
        for (tag, bytes) in &self.snapshots {
            std::fs::write(dir.join(format!("{tag}.state.bin")), bytes)?;
        }
        let mut outcomes = String::from("stack,capabilities,attack,succeeded,evidence_ref\n");
        for outcome in &self.attack_outcomes {
            outcomes.push_str(&outcome.csv_line());
            outcomes.push('\n');
        }
        std::fs::write(dir.join("outcomes.csv"), outcomes)?;
        std::fs::write(dir.join("notes.txt"), self.notes.join("\n"))?;
        Ok(())
    }
}

/// Execute a scenario deterministically over the in-process transport.
/// Attack events run against their own derived-seed worlds, so the victim
/// schedule stays undisturbed.
pub fn run(scenario: &Scenario) -> Result<RunReport, RunError> {
    run_with(scenario, &Transport::InProc)
}

pub fn run_with(scenario: &Scenario, transport: &Transport) -> Result<RunReport, RunError> {
    match scenario.stack {
        StackKind::SensCrypt => run_senscrypt(scenario, transport),
        StackKind::Legacy => {
            // the legacy stack has no framed socket service; runs are in-process
            run_legacy(scenario).map_err(RunError::from)
        }
    }
}

fn run_senscrypt(scenario: &Scenario, transport: &Transport) -> Result<RunReport, RunError> {
    use crate::protocol::ServerNode;
    use crate::transport::{TcpChannel, TcpService};

    let mut world = SensCryptWorld::new(scenario.seed, scenario.record_count, scenario.record_len);

    // in TCP mode the server state moves into the background service and
    // comes back when the run is over
    let mut service: Option<TcpService> = None;
    if let Transport::Tcp { listen } = transport {
        let node = std::mem::replace(&mut world.server, ServerNode::new(crate::server::Server::new()));
        service = Some(TcpService::start(node, listen).map_err(|e| RunError::Transport(e.to_string()))?);
    }
    let mut report = RunReport {
        transcript_jsonl: String::new(),
        service_log: String::new(),
        snapshots: Vec::new(),
        attack_outcomes: Vec::new(),
        notes: Vec::new(),
        final_tick: 0,
    };

    for (position, event) in scenario.events.iter().enumerate() {
        let attack_seed = scenario.seed.wrapping_add(1 + position as u64);
        match event {
            Event::Write(None) => {
                world.tick += scenario.epoch_ticks.saturating_sub(1);
                if let Err(e) = world.write_random() {
                    report.notes.push(format!("tick {}: write refused: {e}", world.tick));
                }
            }
            Event::Write(Some(data)) => {
                world.tick += scenario.epoch_ticks.saturating_sub(1);
                if data.len() != world.record_len() as usize {
                    return Err(ScheduleError::Malformed {
                        line: 0,
                        why: format!(
                            "write payload is {} bytes, record length is {}",
                            data.len(),
                            world.record_len()
                        ),
                    }
                    .into());
                }
                if let Err(e) = world.write(data.clone()) {
                    report.notes.push(format!("tick {}: write refused: {e}", world.tick));
                }
            }
            Event::Upload => {
                let result = match &service {
                    Some(svc) => {
                        svc.set_tick(world.tick + 1);
                        match TcpChannel::connect(svc.addr()) {
                            Ok(mut channel) => world.upload_via(&mut channel),
                            Err(e) => {
                                report.notes.push(format!("tick {}: connect failed: {e}", world.tick));
                                continue;
                            }
                        }
                    }
                    None => world.upload(),
                };
                match result {
                    Ok(run) => report.notes.push(format!(
                        "tick {}: upload ok, {} red records, {} payload bytes",
                        world.tick, run.red_count, run.payload_bytes
                    )),
                    Err(e) => report.notes.push(format!("tick {}: upload failed: {e}", world.tick)),
                }
            }
            Event::Snapshot(tag) => {
                let bytes = world.snapshot_jtag();
                report.snapshots.push((tag.clone(), bytes));
            }
            Event::Attack { kind, caps } => {
                let outcome = match kind {
                    AttackKind::Tpdc => attack_tpdc(StackKind::SensCrypt, *caps, attack_seed),
                    AttackKind::Ti => attack_ti(StackKind::SensCrypt, *caps, attack_seed),
                    AttackKind::Uai => attack_uai(StackKind::SensCrypt, *caps, attack_seed),
                };
                report.attack_outcomes.push(outcome);
            }
            Event::DoubleJtag(plan) => {
                let outcome =
                    attack_double_jtag(StackKind::SensCrypt, AttackKind::Tpdc, attack_seed, *plan);
                report.attack_outcomes.push(outcome);
            }
        }
    }

    if let Some(svc) = service {
        world.server = svc.stop();
    }

    report.transcript_jsonl = world.transcript.to_jsonl();
    report.service_log = world.base.log.to_text();
    report.final_tick = world.tick;
    report.snapshots.push(("final".into(), world.tracker.tracker.snapshot(true)));
    Ok(report)
}

fn run_legacy(scenario: &Scenario) -> Result<RunReport, ScheduleError> {
    let mut world = LegacyWorld::new(scenario.seed);
    let mut report = RunReport {
        transcript_jsonl: String::new(),
        service_log: String::new(),
        snapshots: Vec::new(),
        attack_outcomes: Vec::new(),
        notes: Vec::new(),
        final_tick: 0,
    };

    let mut logged_in = false;
    for (position, event) in scenario.events.iter().enumerate() {
        let attack_seed = scenario.seed.wrapping_add(1 + position as u64);
        match event {
            Event::Write(_) => {
                world.tick += scenario.epoch_ticks.saturating_sub(1);
                if let Err(e) = world.record_random_minute() {
                    report.notes.push(format!("tick {}: record refused: {e}", world.tick));
                }
            }
            Event::Upload => {
                let with_login = !logged_in;
                logged_in = true;
                match world.sync(with_login) {
                    Ok(run) => report.notes.push(format!(
                        "tick {}: sync ok, {} banks, {} bytes",
                        world.tick, run.uploaded_banks, run.uploaded_bytes
                    )),
                    Err(e) => report.notes.push(format!("tick {}: sync failed: {e}", world.tick)),
                }
            }
            Event::Snapshot(tag) => {
                let mut dump = Vec::new();
                for bank in crate::relay::fitness_bank_indices() {
                    dump.extend_from_slice(world.tracker.bank(bank).expect("bank in range"));
                }
                report.snapshots.push((tag.clone(), dump));
            }
            Event::Attack { kind, caps } => {
                let outcome = match kind {
                    AttackKind::Tpdc => attack_tpdc(StackKind::Legacy, *caps, attack_seed),
                    AttackKind::Ti => attack_ti(StackKind::Legacy, *caps, attack_seed),
                    AttackKind::Uai => attack_uai(StackKind::Legacy, *caps, attack_seed),
                };
                report.attack_outcomes.push(outcome);
            }
            Event::DoubleJtag(plan) => {
                let outcome =
                    attack_double_jtag(StackKind::Legacy, AttackKind::Tpdc, attack_seed, *plan);
                report.attack_outcomes.push(outcome);
            }
        }
    }

    report.transcript_jsonl = world.transcript.to_jsonl();
    report.service_log = world.base.log.to_text();
    report.final_tick = world.tick;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_full_scenario() {
        let text = "\
# comment
seed 42
stack senscrypt
records 8
record-len 16

write random
write hex 000102030405060708090a0b0c0d0e0f
upload
snapshot t1
attack tpdc caps=inspect+jtag-r
attack double-jtag writes=3 upload-between=true
";
        let scenario = Scenario::parse(text).unwrap();
        assert_eq!(scenario.seed, 42);
        assert_eq!(scenario.record_count, 8);
        assert_eq!(scenario.events.len(), 6);
        assert!(matches!(scenario.events[0], Event::Write(None)));
        assert!(matches!(scenario.events[1], Event::Write(Some(_))));
        assert!(matches!(scenario.events[5], Event::DoubleJtag(_)));
    }

    #[test]
    fn malformed_lines_are_schedule_errors() {
        assert!(Scenario::parse("seed x").is_err());
        assert!(Scenario::parse("launch missiles").is_err());
        assert!(Scenario::parse("attack warp caps=inspect").is_err());
        assert!(Scenario::parse("snapshot").is_err());
        assert!(Scenario::parse("write hex zz").is_err());
    }

    #[test]
    fn run_is_deterministic_under_seed() {
        let text = "seed 7\nstack senscrypt\nrecords 8\nrecord-len 16\nwrite\nwrite\nupload\nwrite\nupload\n";
        let scenario = Scenario::parse(text).unwrap();
        let a = run(&scenario).unwrap();
        let b = run(&scenario).unwrap();
        assert_eq!(a.transcript_jsonl, b.transcript_jsonl);
        assert!(!a.transcript_jsonl.is_empty());
    }

    #[test]
    fn overflow_schedule_surfaces_memory_full() {
        let mut text = String::from("seed 3\nstack senscrypt\nrecords 4\nrecord-len 16\n");
        for _ in 0..5 {
            text.push_str("write\n");
        }
        let scenario = Scenario::parse(&text).unwrap();
        let report = run(&scenario).unwrap();
        assert!(report.notes.iter().any(|n| n.contains("memory full")), "notes: {:?}", report.notes);
    }

    /// The worked trace from the memory-state figure: with n=8 and i=4,
    /// write i-1=3 records, sync, write n-i+2=6 more (the clean pointer
    /// cycles), sync again.
    #[test]
    fn figure_trace_pointer_states() {
        let mut world = SensCryptWorld::new(1, 8, 16);
        for _ in 0..3 {
            world.write_random().unwrap();
        }
        // (a): first i-1 records written, counter 1
        let t = &world.tracker.tracker;
        assert_eq!((t.dirty(), t.clean(), t.red_count()), (0, 3, 3));
        assert_eq!(t.ctr().get(), 1);

        world.upload().unwrap();
        // (b): red region re-imaged, pointers meet, counter still 1
        let t = &world.tracker.tracker;
        assert_eq!((t.dirty(), t.clean(), t.red_count()), (3, 3, 0));
        assert_eq!(t.ctr().get(), 1);

        for _ in 0..6 {
            world.write_random().unwrap();
        }
        // (c): clean cycled past the end
        let t = &world.tracker.tracker;
        assert_eq!((t.dirty(), t.clean(), t.red_count()), (3, 1, 6));
        assert!(t.wrapped());
        assert_eq!(t.ctr().get(), 1);

        world.upload().unwrap();
        // (d): wrap processed, counter advanced on both sides
        let t = &world.tracker.tracker;
        assert_eq!((t.dirty(), t.clean(), t.red_count()), (1, 1, 0));
        assert_eq!(t.ctr().get(), 2);
        assert_eq!(
            world.server.server.lookup(world.tracker_id()).unwrap().ctr.get(),
            2
        );
        // every record the victim wrote decoded byte-exactly
        assert_eq!(world.server_decoded(), world.shadow_data());
    }
}
