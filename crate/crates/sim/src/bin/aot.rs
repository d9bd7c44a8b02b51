//! Command-line entry point: run a network, attack it, or print the
//! analytical report for a parameter set.

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aot_core::analysis;
use aot_core::faults::FaultKind;
use aot_core::params::{Level, NetworkParams, SECOND_MS};
use aot_sim::adversary::Scenario;
use aot_sim::scenarios;
use aot_sim::world::{Sim, SimConfig, TransportKind};

#[derive(Parser)]
#[command(name = "aot", version, about = "Simulate a three-level OT mixnet")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an honest network and print its summary.
    Run(NetArgs),
    /// Run a network under an adversary scenario.
    Attack {
        /// Scenario file, or the name of a built-in scenario or experiment.
        #[arg(long)]
        scenario: String,
        #[command(flatten)]
        net: NetArgs,
    },
    /// Print closed-form figures next to Monte-Carlo estimates.
    Analyze {
        /// TOML file of network parameters; defaults apply to missing keys.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// List built-in scenarios and experiments.
    Scenarios,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    InProcess,
    Tcp,
}

#[derive(Args)]
struct NetArgs {
    /// TOML file of network parameters; flags override it.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    q1: Option<usize>,
    #[arg(long)]
    q2: Option<usize>,
    #[arg(long)]
    q3: Option<usize>,
    #[arg(long)]
    alpha: Option<usize>,
    #[arg(long)]
    beta1: Option<usize>,
    #[arg(long)]
    beta2: Option<usize>,
    #[arg(long)]
    lambda: Option<usize>,
    /// Publication period in seconds.
    #[arg(long)]
    tau: Option<u64>,
    #[arg(long)]
    gamma: Option<usize>,
    #[arg(long)]
    zeta: Option<usize>,
    #[arg(long, default_value_t = 100)]
    clients: usize,
    /// Measured messages to send.
    #[arg(long, default_value_t = 1000)]
    messages: usize,
    /// Hard stop in virtual seconds.
    #[arg(long)]
    duration: Option<u64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = TransportArg::InProcess)]
    transport: TransportArg,
    /// Write the event log and summary here as JSON lines.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl NetArgs {
    fn config(&self) -> Result<SimConfig, String> {
        let mut cfg = SimConfig::default();
        if let Some(p) = &self.params {
            cfg.params = load_params(p)?;
        }
        let p = &mut cfg.params;
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut p.q1, self.q1);
        set(&mut p.q2, self.q2);
        set(&mut p.q3, self.q3);
        set(&mut p.alpha, self.alpha);
        set(&mut p.beta1, self.beta1);
        set(&mut p.beta2, self.beta2);
        set(&mut p.lambda, self.lambda);
        set(&mut p.gamma, self.gamma);
        set(&mut p.zeta, self.zeta);
        if self.q3.is_some() || self.alpha.is_some() {
            p.rho = p.q3.saturating_sub(p.alpha);
        }
        if let Some(t) = self.tau {
            p.tau_ms = t * SECOND_MS;
        }
        cfg.clients = self.clients;
        cfg.messages = self.messages;
        cfg.seed = self.seed;
        cfg.keep_log = self.out.is_some();
        cfg.transport = match self.transport {
            TransportArg::InProcess => TransportKind::InProcess,
            TransportArg::Tcp => TransportKind::Tcp,
        };
        if let Some(d) = self.duration {
            cfg.max_time_ms = d * SECOND_MS;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

fn load_params(path: &Path) -> Result<NetworkParams, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let p: NetworkParams = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    p.validate().map_err(|e| e.to_string())?;
    Ok(p)
}

fn print<T: Serialize>(v: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(v).expect("reports serialize")
    );
}

fn write_log(sim: &Sim, out: &Path) -> Result<(), String> {
    let f = File::create(out).map_err(|e| format!("{}: {e}", out.display()))?;
    let mut w = BufWriter::new(f);
    sim.event_log()
        .write_jsonl(&mut w, &sim.summary())
        .and_then(|_| w.flush())
        .map_err(|e| format!("{}: {e}", out.display()))
}

fn run_net(net: &NetArgs, scenario: Scenario) -> Result<(), String> {
    let cfg = net.config()?;
    let (sim, report) = scenarios::run(cfg, scenario).map_err(|e| e.to_string())?;
    if let Some(out) = &net.out {
        write_log(&sim, out)?;
    }
    #[derive(Serialize)]
    struct Attack<'a> {
        #[serde(flatten)]
        report: &'a scenarios::RunReport,
        transport: &'static str,
        link_drops_by_adversary: u64,
        delayed_by_adversary: u64,
        observed_frames: usize,
        audits: &'a [aot_sim::metrics::AuditRecord],
    }
    print(&Attack {
        report: &report,
        transport: sim.transport_name(),
        link_drops_by_adversary: sim.adversary().dropped,
        delayed_by_adversary: sim.adversary().delayed,
        observed_frames: sim.adversary().observations.len(),
        audits: &sim.metrics.audits,
    });
    Ok(())
}

const EXPERIMENTS: &[&str] = &[
    "blending",
    "blending-no-dummies",
    "replay",
    "resend",
    "tamper",
    "handshake",
    "determinism",
];

/// Experiments ignore the network flags except the seed: their setups are
/// fixed.
fn experiment(name: &str, seed: u64) -> Result<bool, String> {
    let e = |e: aot_sim::world::SimError| e.to_string();
    match name {
        "blending" => print(&scenarios::blending(seed, true).map_err(e)?),
        "blending-no-dummies" => print(&scenarios::blending(seed, false).map_err(e)?),
        "replay" => print(&scenarios::replay(seed).map_err(e)?),
        "resend" => print(&scenarios::resend(seed).map_err(e)?),
        "tamper" => {
            let mut reports = Vec::new();
            for (level, kinds) in [
                (Level::L1, FaultKind::LEVEL1),
                (Level::L2, FaultKind::LEVEL2),
                (Level::L3, FaultKind::LEVEL3),
            ] {
                for kind in kinds {
                    reports.push(scenarios::tamper(seed, level, kind, 0.35).map_err(e)?);
                }
            }
            print(&reports);
        }
        "handshake" => print(&scenarios::handshake(seed).map_err(e)?),
        "determinism" => print(
            &scenarios::determinism(SimConfig {
                seed,
                messages: 200,
                ..SimConfig::default()
            })
            .map_err(e)?,
        ),
        _ => return Ok(false),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run(net) => run_net(&net, Scenario::honest()),
        Cmd::Attack { scenario, net } => {
            let path = Path::new(&scenario);
            if path.exists() {
                Scenario::load(path)
                    .map_err(|e| e.to_string())
                    .and_then(|s| run_net(&net, s))
            } else {
                match experiment(&scenario, net.seed) {
                    Ok(true) => Ok(()),
                    Ok(false) => match scenarios::builtin(&scenario) {
                        Some(s) => run_net(&net, s),
                        None => Err(format!("no scenario file or built-in named {scenario}")),
                    },
                    Err(e) => Err(e),
                }
            }
        }
        Cmd::Analyze {
            params,
            samples,
            seed,
        } => params
            .as_deref()
            .map_or_else(|| Ok(NetworkParams::default()), load_params)
            .map(|p| print(&analysis::report(&p, samples, seed))),
        Cmd::Scenarios => {
            println!("experiments:");
            for n in EXPERIMENTS {
                println!("  {n}");
            }
            println!("scenario files:");
            for (n, text) in scenarios::BUILTIN {
                let s = Scenario::from_toml(text).expect("shipped scenarios parse");
                println!(
                    "  {n}: {}",
                    s.description
                        .split_whitespace()
                        .collect::<Vec<_>>()
                        .join(" ")
                );
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
