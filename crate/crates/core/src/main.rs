use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cogc::bound::{theorem1_bound, BoundParams, BoundReport};
use cogc::channel::OutageMode;
use cogc::config::ExperimentConfig;
use cogc::experiment::{
    calibrate_quantizer_upper, run_experiment, sweep_outage, with_threads, OutageSweep,
};
use cogc::gc_code::GcScheme;
use cogc::outage::{closed_form_outage, monte_carlo_outage};
use cogc::protocols::Method;
use cogc::Error;

#[derive(Parser)]
#[command(
    name = "cogc",
    version,
    about = "Cooperative gradient coding simulator"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training experiment from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run this single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        #[arg(long)]
        rounds: Option<usize>,
        /// Set the quantizer upper bound from a pre-scan run.
        #[arg(long)]
        calibrate_bounds: bool,
    },
    /// Closed-form overall outage over an SNR grid.
    Outage {
        #[arg(long, value_delimiter = ',', default_value = "0.2")]
        rates: Vec<f64>,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "1,2,3,4,5,6,7,8,9,10,11,12,13,14,15"
        )]
        snrs: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "5")]
        stragglers: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        clients: usize,
        #[arg(long, default_value = "linearized")]
        mode: OutageMode,
        #[arg(long, default_value_t = 0.5)]
        sigma2: f64,
        /// Also estimate each point with this many Monte Carlo trials.
        #[arg(long, default_value_t = 0)]
        mc_trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo estimate of the overall outage at fixed link outages.
    Mc {
        #[arg(long, default_value_t = 10)]
        clients: usize,
        #[arg(long, default_value_t = 5)]
        stragglers: usize,
        #[arg(long)]
        q_a: f64,
        /// D2P outage (default: same as D2D).
        #[arg(long)]
        q_b: Option<f64>,
        #[arg(long, default_value_t = 1_000_000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Construct, export or verify a gradient-coding scheme.
    Gc {
        #[command(subcommand)]
        action: GcAction,
    },
    /// Evaluate the convergence bound from a TOML parameter file.
    Bound {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        p_o: Option<f64>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum GcAction {
    /// Build a scheme and write it as text.
    Export {
        #[arg(long)]
        clients: usize,
        #[arg(long)]
        stragglers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Read a scheme and report its worst decoding deviation.
    Verify {
        #[arg(long)]
        input: PathBuf,
    },
}

fn emit(out: Option<&Path>, text: &str) -> cogc::Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> cogc::Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            methods,
            rounds,
            calibrate_bounds,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            if let Some(m) = methods {
                cfg.methods = m;
            }
            if let Some(r) = rounds {
                cfg.rounds = r;
            }
            cfg.validate()?;
            with_threads(cli.threads, || {
                if calibrate_bounds {
                    let upper = calibrate_quantizer_upper(&cfg)?;
                    log::info!("calibrated quantizer upper bound {upper}");
                    cfg.quantizer.lower = 0.0;
                    cfg.quantizer.upper = upper;
                }
                let out = run_experiment(&cfg, Some(&cfg.output_dir))?;
                for &m in &cfg.methods {
                    if let Some(acc) = out.final_accuracy(m, cfg.rounds) {
                        println!(
                            "{}: mean accuracy after {} rounds {acc:.4}",
                            m.as_str(),
                            cfg.rounds
                        );
                    }
                }
                Ok(())
            })?
        }
        Command::Outage {
            rates,
            snrs,
            stragglers,
            clients,
            mode,
            sigma2,
            mc_trials,
            seed,
            out,
        } => {
            let sweep = OutageSweep {
                rates,
                snrs,
                stragglers,
                clients,
                mode,
                sigma2,
                mc_trials,
                seed,
            };
            let csv = with_threads(cli.threads, || sweep_outage(&sweep))??;
            emit(out.as_deref(), &csv)
        }
        Command::Mc {
            clients,
            stragglers,
            q_a,
            q_b,
            trials,
            seed,
        } => {
            let q_b = q_b.unwrap_or(q_a);
            let e = with_threads(cli.threads, || {
                monte_carlo_outage(clients, stragglers, q_a, q_b, trials, seed)
            })??;
            println!("M,s,q_a,q_b,trials,failures,estimate,std_error,closed_form");
            let closed = if q_a == q_b {
                closed_form_outage(clients, stragglers, q_a)?
                    .p_o
                    .to_string()
            } else {
                String::new()
            };
            println!(
                "{clients},{stragglers},{q_a},{q_b},{},{},{},{},{closed}",
                e.trials, e.failures, e.estimate, e.std_error
            );
            Ok(())
        }
        Command::Gc { action } => match action {
            GcAction::Export {
                clients,
                stragglers,
                seed,
                out,
            } => {
                let scheme = GcScheme::construct(clients, stragglers, seed)?;
                log::info!("max decoding deviation {:e}", scheme.verify());
                emit(out.as_deref(), &scheme.to_text())
            }
            GcAction::Verify { input } => {
                let scheme = GcScheme::from_text(&fs::read_to_string(&input)?)?;
                let dev = scheme.verify();
                println!(
                    "M = {}, s = {}, patterns = {}, max deviation {dev:e}",
                    scheme.clients(),
                    scheme.stragglers(),
                    scheme.pattern_count()
                );
                if dev < cogc::gc_code::RESIDUAL_TOL {
                    Ok(())
                } else {
                    Err(Error::InvalidParams(format!(
                        "scheme deviation {dev:e} too large"
                    )))
                }
            }
        },
        Command::Bound {
            config,
            p_o,
            rounds,
            out,
        } => {
            let text = fs::read_to_string(&config).map_err(|e| {
                Error::config("<file>", format!("cannot read {}: {e}", config.display()))
            })?;
            let mut params: BoundParams = toml::from_str(&text)
                .map_err(|e| Error::config("<document>", e.to_string().trim().to_string()))?;
            if let Some(p) = p_o {
                params.p_o = p;
            }
            if let Some(t) = rounds {
                params.rounds = t;
            }
            params
                .validate()
                .map_err(|e| Error::config("bound", e.to_string()))?;
            let report = theorem1_bound(&params)?;
            let csv = format!(
                "{}\n{}\n",
                BoundReport::csv_header(),
                report.csv_row(params.p_o)
            );
            emit(out.as_deref(), &csv)?;
            let total = report.total;
            for (name, v) in [
                ("gap", report.gap_term),
                ("dissimilarity", report.dissimilarity_term),
                ("variance", report.variance_term),
                ("quantization", report.quantization_term),
            ] {
                eprintln!("{name:>14} {v:.6e} ({:.1}%)", 100.0 * v / total);
            }
            eprintln!("{:>14} {total:.6e}", "total");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } | Error::InvalidConfig(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
