use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtlr_core::bandit_env::{gen_instance, InstanceKind};
use mtlr_core::harness::{
    bandit_instance_json, coverage_study, curve_from_csv, estimate_slope, mdp_json, run_suite, summary,
    ExperimentConfig, HarnessError, MdpKind, Setting, SlopeEstimate,
};

#[derive(Parser)]
#[command(name = "mtlr", about = "Multi-task low-rank bandit and RL experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every (seed, algorithm) pair of a config and write the CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Empirical coverage of the joint confidence set.
    Coverage {
        #[arg(long)]
        config: PathBuf,
    },
    /// Log-log slope of the mean cumulative regret of one algorithm.
    Slope {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        algo: String,
        /// `lo:hi`, 1-based and inclusive.
        #[arg(long)]
        window: String,
    },
    /// Generate an instance and archive it as JSON.
    Gen {
        /// exact, misspecified, grouped-hard, linear-mdp or hard-mdp.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), HarnessError> {
    match cmd {
        Cmd::Run { config, out, workers } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            let workers = workers.unwrap_or(cfg.workers);
            if workers == 0 {
                return Err(HarnessError::Config("workers must be positive".into()));
            }
            let path = out.or_else(|| cfg.output.take().map(PathBuf::from));
            let results = match path {
                Some(p) => {
                    let mut w = BufWriter::new(File::create(&p)?);
                    let r = run_suite(&cfg, workers, Some(&mut w))?;
                    w.flush()?;
                    r
                }
                None => {
                    let stdout = std::io::stdout();
                    let mut lock = stdout.lock();
                    run_suite(&cfg, workers, Some(&mut lock))?
                }
            };
            for (algo, mean, std) in summary(&results) {
                eprintln!("{algo}: final regret {mean:.4} ± {std:.4}");
            }
        }
        Cmd::Coverage { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let rep = coverage_study(&cfg)?;
            println!("coverage {:.4} ({}/{}) at checkpoints {:?}", rep.coverage(), rep.covered, rep.trials, rep.checkpoints);
        }
        Cmd::Slope { input, algo, window } => {
            let (lo, hi) = window
                .split_once(':')
                .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
                .ok_or_else(|| HarnessError::Config(format!("window must look like lo:hi, got {window}")))?;
            let text = std::fs::read_to_string(&input)?;
            let curve = curve_from_csv(&text, &algo)?;
            match estimate_slope(&curve, lo, hi)? {
                SlopeEstimate::Slope(s) => println!("{s:.6}"),
                SlopeEstimate::Exact => println!("exact"),
            }
        }
        Cmd::Gen { kind, out, config, seed } => {
            let mut cfg = match &config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            let value = match kind.as_str() {
                "linear-mdp" | "hard-mdp" => {
                    let mk = if kind == "hard-mdp" { MdpKind::Hard } else { MdpKind::Linear };
                    cfg.setting = Setting::Rl;
                    cfg.mdp_kind = mk;
                    if config.is_none() {
                        cfg = ExperimentConfig { mdp_kind: mk, ..mtlr_core::harness::default_rl_config() };
                        if mk == MdpKind::Hard {
                            cfg.d = Some(10);
                            cfg.h = 10;
                            cfg.horizon = Some(1000);
                            cfg.a_count = 2;
                        }
                    }
                    cfg.validate()?;
                    mdp_json(&cfg.build_mdp(seed)?, mk)
                }
                other => {
                    let ik: InstanceKind = serde_json::from_str(&format!("\"{other}\""))
                        .map_err(|_| HarnessError::Config(format!("unknown instance kind {other:?}")))?;
                    cfg.setting = Setting::Bandit;
                    cfg.instance_kind = ik;
                    if ik == InstanceKind::Misspecified && cfg.zeta == 0.0 {
                        cfg.zeta = 0.05;
                    }
                    if ik == InstanceKind::GroupedHard && cfg.m() % cfg.k() != 0 {
                        cfg.m = Some(cfg.k() * cfg.m().div_ceil(cfg.k()));
                    }
                    cfg.validate()?;
                    let inst = gen_instance(&cfg.instance_spec(seed)).map_err(|e| HarnessError::Config(e.to_string()))?;
                    bandit_instance_json(&inst)
                }
            };
            let text = serde_json::to_string_pretty(&value).map_err(|e| HarnessError::Runtime(e.to_string()))?;
            std::fs::write(&out, text + "\n")?;
        }
    }
    Ok(())
}
