//! Command-line front end: provision fleets, run scenario schedules,
//! launch scripted attacks, emit security matrices, and run the timing
//! sanity suite.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use senscrypt::adversary::{
    attack_double_jtag, attack_tpdc, attack_ti, attack_uai, security_matrix, AttackKind,
    CapabilitySet, DoubleJtagPlan,
};
use senscrypt::bench::run_bench;
use senscrypt::fleet::{provision_fleet, write_fleet, FleetConfig};
use senscrypt::scenario::{run_with, Scenario, Transport};
use senscrypt::sim::StackKind;
use senscrypt::tracker::{DEFAULT_RECORD_COUNT, DEFAULT_RECORD_LEN};
use senscrypt::wire::TrackerId;

#[derive(Parser)]
#[command(name = "senscrypt", version, about = "Tracker sync protocol simulator and attack harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StackArg {
    Legacy,
    Senscrypt,
}

impl From<StackArg> for StackKind {
    fn from(value: StackArg) -> Self {
        match value {
            StackArg::Legacy => StackKind::Legacy,
            StackArg::Senscrypt => StackKind::SensCrypt,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Inproc,
    Tcp,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackArg {
    Tpdc,
    Ti,
    Uai,
    DoubleJtag,
}

#[derive(Subcommand)]
enum Command {
    /// Mint factory state for a tracker fleet and write it to disk.
    Provision {
        #[arg(long, default_value = "fleet")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of trackers to provision.
        #[arg(long, default_value_t = 1)]
        trackers: u32,
        #[arg(long, default_value_t = DEFAULT_RECORD_COUNT)]
        records: u32,
        #[arg(long, default_value_t = DEFAULT_RECORD_LEN)]
        record_len: u32,
        /// Explicit 8-byte tracker ids (hex), one per tracker.
        #[arg(long = "tracker-id")]
        tracker_ids: Vec<String>,
    },
    /// Execute a scenario file and write transcripts, snapshots and
    /// outcomes to the output directory.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = TransportArg::Inproc)]
        transport: TransportArg,
        /// Listen address for the TCP transport.
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
    },
    /// Run one scripted attack and print its outcome.
    Attack {
        #[arg(long, value_enum)]
        stack: StackArg,
        #[arg(long, value_enum)]
        attack: AttackArg,
        /// Capability set, e.g. `inspect+jtag-r` or `none`.
        #[arg(long, default_value = "none")]
        caps: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// For double-jtag: run a sync between the straddled writes and
        /// the second dump.
        #[arg(long, default_value_t = false)]
        upload_between: bool,
    },
    /// Run the full capability-by-attack grid and emit the matrix.
    Matrix {
        #[arg(long, value_enum)]
        stack: StackArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the machine-readable CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Timing sanity suite.
    Bench {
        #[arg(long, default_value_t = DEFAULT_RECORD_LEN)]
        record_len: u32,
        #[arg(long, default_value_t = 1_000_000)]
        map_entries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Provision { out, seed, trackers, records, record_len, tracker_ids } => {
            let explicit_ids = tracker_ids
                .iter()
                .map(|hex_id| {
                    let bytes = hex::decode(hex_id)
                        .with_context(|| format!("tracker id '{hex_id}' is not hex"))?;
                    let arr: [u8; 8] = bytes
                        .try_into()
                        .map_err(|_| anyhow::anyhow!("tracker id '{hex_id}' is not 8 bytes"))?;
                    Ok(TrackerId::new(arr))
                })
                .collect::<Result<Vec<_>>>()?;
            let config = FleetConfig { seed, trackers, record_count: records, record_len, explicit_ids };
            let fleet = provision_fleet(&config)?;
            write_fleet(&fleet, &out)?;
            println!(
                "provisioned {trackers} tracker(s) ({records} x {record_len} B records) into {}",
                out.display()
            );
        }
        Command::Run { scenario, out, seed, transport, listen } => {
            let text = std::fs::read_to_string(&scenario)
                .with_context(|| format!("reading {}", scenario.display()))?;
            let mut parsed = Scenario::parse(&text)?;
            if let Some(seed) = seed {
                parsed.seed = seed;
            }
            let transport = match transport {
                TransportArg::Inproc => Transport::InProc,
                TransportArg::Tcp => Transport::Tcp { listen },
            };
            let report = run_with(&parsed, &transport)?;
            report.write_to(&out)?;
            println!(
                "ran {} events to tick {}; transcript, snapshots and outcomes in {}",
                parsed.events.len(),
                report.final_tick,
                out.display()
            );
            for note in &report.notes {
                println!("  {note}");
            }
            for outcome in &report.attack_outcomes {
                println!("  {}", outcome.csv_line());
            }
        }
        Command::Attack { stack, attack, caps, seed, upload_between } => {
            let stack: StackKind = stack.into();
            let caps = CapabilitySet::parse(&caps).map_err(|e| anyhow::anyhow!(e))?;
            let outcome = match attack {
                AttackArg::Tpdc => attack_tpdc(stack, caps, seed),
                AttackArg::Ti => attack_ti(stack, caps, seed),
                AttackArg::Uai => attack_uai(stack, caps, seed),
                AttackArg::DoubleJtag => attack_double_jtag(
                    stack,
                    AttackKind::Tpdc,
                    seed,
                    DoubleJtagPlan { upload_before_t2: upload_between, ..DoubleJtagPlan::default() },
                ),
            };
            println!("stack,capabilities,attack,succeeded,evidence_ref");
            println!("{}", outcome.csv_line());
            println!();
            println!("evidence: {}", outcome.evidence.summary);
            if !outcome.succeeded {
                std::process::exit(2);
            }
        }
        Command::Matrix { stack, seed, out } => {
            let matrix = security_matrix(stack.into(), seed);
            print!("{}", matrix.render_text());
            if let Some(path) = out {
                std::fs::write(&path, matrix.to_csv())
                    .with_context(|| format!("writing {}", path.display()))?;
                println!("csv written to {}", path.display());
            }
        }
        Command::Bench { record_len, map_entries, seed } => {
            if record_len == 0 {
                bail!("record length must be at least 1");
            }
            let report = run_bench(record_len, map_entries, seed);
            print!("{report}");
        }
    }
    Ok(())
}
