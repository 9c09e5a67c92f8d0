use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acnc_core::config::{parse_policies, parse_v_range, ExperimentConfig, TierChoice, KEYS};
use acnc_core::context::{parse_stream_spec, run_demo, ContextCodebook};
use acnc_core::placement::{solve_exact, ExactProblem, PlacementObjective};
use acnc_core::sim::{run_experiment, Phase, PolicyRunner, World};
use acnc_core::topology::generate_topology;
use acnc_core::agents::Policy;
use acnc_core::Error;
use clap::{Args, Parser, Subcommand};
use ini::Ini;

const OUT_ENV: &str = "ACNC_OUT_DIR";

#[derive(Parser)]
#[command(name = "acnc", version, about = "Compute-network convergence simulator", after_help = keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a topology and write it as text.
    GenTopo {
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// scaled, fig6 or uniform
        #[arg(long, default_value = "fig6")]
        tier_plan: String,
        /// Output file; defaults to topology-<size>.txt in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment sweep and write its report files.
    #[command(after_help = keys_help())]
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        allow_skip_opt: bool,
        /// Output directory; falls back to $ACNC_OUT_DIR, then ./acnc-out.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve one slot exactly and print the optimum with search statistics.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        requests: Option<usize>,
        #[arg(long, default_value_t = 0)]
        slot: u64,
        /// Write the optimal placement here.
        #[arg(long)]
        placement_out: Option<PathBuf>,
    },
    /// Replay a synthetic stream of placement regimes through the context engine.
    CtxDemo {
        /// single:N, alt:N, or a comma list of 1 and 2
        #[arg(long, default_value = "alt:10")]
        stream: String,
        #[arg(long, default_value_t = 0.75)]
        rho: f64,
        #[arg(long, default_value_t = 0.1)]
        beta: f64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Write the final codebook here.
        #[arg(long)]
        codebook_out: Option<PathBuf>,
    },
    /// Run one policy for a few slots and dump its memory bank and codebook.
    DumpState {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value = "greedy")]
        policy: String,
        #[arg(long, default_value_t = 3)]
        slots: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// INI file with [section] key = value settings.
    config: Option<PathBuf>,
    /// Start from the small preset on which the exact policy runs.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    v_range: Option<String>,
}

fn keys_help() -> String {
    let d = ExperimentConfig::default();
    let mut s = String::from("Config keys ([section] key = default):\n");
    let mut current = "";
    for &(section, key, desc) in KEYS {
        if section != current {
            let _ = writeln!(s, "  [{section}]");
            current = section;
        }
        let _ = writeln!(s, "    {key} = {}    {desc}", d.get(section, key).unwrap_or_default());
    }
    s
}

enum Failure {
    Config(String),
    Tractability(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) | Error::Parse { .. } => Failure::Config(e.to_string()),
            Error::Tractability(_) => Failure::Tractability(e.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

fn io(path: &Path, e: std::io::Error) -> Failure {
    Failure::Other(format!("{}: {e}", path.display()))
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = if c.desk { ExperimentConfig::desk() } else { ExperimentConfig::default() };
    if let Some(path) = &c.config {
        let ini = Ini::load_from_file(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        for (section, props) in ini.iter() {
            for (k, v) in props.iter() {
                let Some(section) = section else {
                    return Err(Failure::Config(format!("key `{k}` outside any section")));
                };
                cfg.apply(section, k, v)?;
            }
        }
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(v) = &c.v_range {
        cfg.v_range = parse_v_range(v)?;
    }
    Ok(cfg)
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("acnc-out"))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenTopo { size, seed, tier_plan, out } => {
            let mut cfg = ExperimentConfig::default();
            cfg.apply("experiment", "tier_plan", &tier_plan)?;
            if cfg.tier_plan == TierChoice::Scaled {
                cfg.v_range = (size.min(cfg.v_range.0), size.max(cfg.v_range.1));
            }
            let t = generate_topology(size, &cfg.tier_plan(), &cfg.topology, seed)?;
            let path = match out {
                Some(p) => p,
                None => out_dir(None).join(format!("topology-{size}.txt")),
            };
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
            }
            std::fs::write(&path, t.to_text()).map_err(|e| io(&path, e))?;
            print!("V={} L={} nodes={} poas={}", t.size(), t.links.len(), t.nodes.len(), t.poas().len());
            for (tier, n) in t.tier_histogram(&cfg.tier_plan()) {
                print!(" {}={n}", tier.name());
            }
            println!("\nwrote {}", path.display());
        }
        Command::Run { common, policy, allow_skip_opt, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(p) = policy {
                cfg.policies = parse_policies(&p)?;
            }
            if allow_skip_opt {
                cfg.allow_skip_opt = true;
            }
            cfg.validate()?;
            let report = run_experiment(&cfg)?;
            let dir = out_dir(out);
            let files = report.write(&dir)?;
            println!("{:>3} {:>9} {:>12} {:>9} {:>14} {:>9}", "v", "policy", "profit", "+-", "energy/served", "+-");
            for r in &report.summary {
                let e = r.mean_energy_per_served.map(|x| format!("{x:.3}")).unwrap_or_else(|| "NA".into());
                let ci = r.energy_per_served_ci.map(|x| format!("{x:.3}")).unwrap_or_else(|| "NA".into());
                println!("{:>3} {:>9} {:>12.3} {:>9.3} {:>14} {:>9}", r.size, r.policy.name(), r.mean_profit, r.profit_ci, e, ci);
            }
            for (v, p) in &report.skipped {
                println!("{v:>3} {:>9} skipped: exact solver out of limits", p.name());
            }
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Command::Solve { common, size, requests, slot, placement_out } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = requests {
                cfg.requests_per_slot = n;
            }
            cfg.v_range = (cfg.v_range.0.min(size), cfg.v_range.1.max(size));
            cfg.validate()?;
            let world = World::build(&cfg, size)?;
            let reqs = world.requests(&cfg, slot)?;
            let pb = ExactProblem {
                topology: &world.topology,
                registry: &world.registry,
                catalog: &world.catalog,
                requests: &reqs,
                objective: PlacementObjective {
                    profit_weight: 1.0,
                    energy_weight: cfg.energy_weight,
                    include_transition: false,
                },
                routing: &cfg.routing,
                previous: None,
                rates: &world.rates,
            };
            pb.check_limits(&cfg.exact)?;
            let sol = solve_exact(&pb, &cfg.exact)?;
            println!("objective {:.6}", sol.objective);
            println!("profit {:.6}", sol.profit);
            println!("served {} of {}", sol.served(), reqs.len());
            println!("link_energy {:.6}", sol.link_energy);
            println!("compute_energy {:.6}", sol.compute_energy);
            let s = sol.stats;
            println!("placement_nodes {} placement_prunes {}", s.placement_nodes, s.placement_prunes);
            println!("assignment_nodes {} assignment_prunes {} leaves {}", s.assignment_nodes, s.assignment_prunes, s.leaves);
            print!("{}", sol.placement.to_text());
            if let Some(p) = placement_out {
                std::fs::write(&p, sol.placement.to_text()).map_err(|e| io(&p, e))?;
            }
        }
        Command::CtxDemo { stream, rho, beta, noise, seed, codebook_out } => {
            let regimes = parse_stream_spec(&stream)?;
            let mut cb = ContextCodebook::new(rho, beta, regimes.len().max(1))?;
            let steps = run_demo(&regimes, &mut cb, noise, seed)?;
            println!("index,regime,context,match,created");
            for s in &steps {
                println!("{},{},{},{:.6},{}", s.index, s.regime, s.context, s.matched, s.created as u8);
            }
            println!("contexts {}", cb.len());
            if let Some(p) = codebook_out {
                std::fs::write(&p, cb.to_text()).map_err(|e| io(&p, e))?;
            }
        }
        Command::DumpState { common, size, policy, slots, out } => {
            let mut cfg = load_config(&common)?;
            cfg.v_range = (cfg.v_range.0.min(size), cfg.v_range.1.max(size));
            cfg.validate()?;
            let policy: Policy = policy.parse()?;
            let mut world = World::build(&cfg, size)?;
            let mut runner = PolicyRunner::new(&world, &cfg, policy)?;
            for slot in 0..slots {
                let reqs = world.requests(&cfg, slot)?;
                runner.run_slot(&mut world, &cfg, size, slot, &reqs, Phase::Measured)?;
            }
            let dir = out_dir(out);
            std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
            for (name, body) in [
                ("memory-bank.txt", runner.bank.to_text()),
                ("codebook.txt", runner.codebook.to_text()),
                ("placement.txt", runner.placement.to_text()),
                ("topology.txt", world.topology.to_text()),
            ] {
                let p = dir.join(name);
                std::fs::write(&p, body).map_err(|e| io(&p, e))?;
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Tractability(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
