//! Experiment orchestration: `(method, seed)` cells, CSV emission, sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::channel::{link_outage_probability, OutageMode};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fl::{partition_dataset, Dataset, Model};
use crate::gc_code::GcScheme;
use crate::outage::{closed_form_outage, monte_carlo_outage};
use crate::protocols::{run_method, Federation, LinkModel, Method, RunResult};

pub const ROUND_COLUMNS: &str =
    "run_id,method,seed,wall_round,successful_round,success,n_d2d_stragglers,n_d2p_lost,accuracy,loss";
pub const AGGREGATE_COLUMNS: &str =
    "run_id,method,wall_round,seeds,accuracy_mean,accuracy_std,loss_mean,success_rate";
pub const SUCCESS_AGGREGATE_COLUMNS: &str =
    "run_id,method,successful_round,seeds,accuracy_mean,loss_mean,wall_round_mean";
pub const OUTAGE_COLUMNS: &str = "snr,rate,mode,q,M,s,p1,p2,p3,p_o,mc_estimate,mc_stderr";

#[derive(Debug, Clone)]
pub struct CellResult {
    pub method: Method,
    pub seed: u64,
    pub run: RunResult,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub cells: Vec<CellResult>,
    pub rounds_csv: String,
    pub aggregate_csv: String,
    pub successful_csv: String,
}

impl ExperimentOutput {
    pub fn cell(&self, method: Method, seed: u64) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.seed == seed)
    }

    /// Mean over seeds of the accuracy after wall round `T`.
    pub fn final_accuracy(&self, method: Method, rounds: usize) -> Option<f64> {
        let accs: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.method == method)
            .filter_map(|c| c.run.rows.get(rounds - 1).map(|r| r.accuracy))
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }
}

/// Data and model shared by every method at one seed.
pub struct Cohort {
    pub model: Model,
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_cohort(cfg: &ExperimentConfig, seed: u64) -> Result<Cohort> {
    let (train, test) = cfg.dataset.load(cfg.clients, seed)?;
    let model = Model::new(cfg.model, train.dim, cfg.dataset.classes);
    Ok(Cohort { model, train, test })
}

/// One `(method, seed)` run. QFL ignores the channel and sees perfect links.
pub fn run_cell(
    cfg: &ExperimentConfig,
    cohort: &Cohort,
    method: Method,
    seed: u64,
) -> Result<RunResult> {
    let shards = partition_dataset(&cohort.train, cfg.clients, cfg.dataset.partition, seed)?;
    let init = cohort.model.init(seed);
    let mut fed = Federation::new(
        cohort.model,
        shards,
        init,
        cfg.sgd(),
        cfg.quantizer.quantizer(),
        seed,
    );
    let (q_a, q_b) = match method {
        Method::Qfl => (0.0, 0.0),
        _ => cfg.channel.outage_probabilities()?,
    };
    let scheme = match method {
        Method::Cogc => Some(GcScheme::construct(cfg.clients, cfg.stragglers, seed)?),
        _ => None,
    };
    let links = LinkModel { q_a, q_b, seed };
    run_method(
        method,
        &mut fed,
        scheme.as_ref(),
        links,
        cfg.rounds,
        &cohort.test,
    )
}

/// Formats an `f64` with the shortest representation that round-trips.
fn num(v: f64) -> String {
    format!("{v}")
}

pub fn rounds_csv_rows(run_id: &str, cell: &CellResult) -> String {
    let mut out = String::new();
    for r in &cell.run.rows {
        writeln!(
            out,
            "{run_id},{},{},{},{},{},{},{},{},{}",
            cell.method.as_str(),
            cell.seed,
            r.wall_round,
            r.successful_round,
            r.success,
            r.n_d2d_stragglers,
            r.n_d2p_lost,
            num(r.accuracy),
            num(r.loss)
        )
        .unwrap();
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; 0 for a single value.
fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Wall-round indexed means over seeds, truncated at `rounds`.
pub fn aggregate_csv(
    run_id: &str,
    methods: &[Method],
    cells: &[CellResult],
    rounds: usize,
) -> String {
    let mut out = format!("{AGGREGATE_COLUMNS}\n");
    for &method in methods {
        let runs: Vec<&CellResult> = cells.iter().filter(|c| c.method == method).collect();
        for w in 1..=rounds {
            let rows: Vec<_> = runs.iter().filter_map(|c| c.run.rows.get(w - 1)).collect();
            if rows.is_empty() {
                continue;
            }
            let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
            let loss: Vec<f64> = rows.iter().map(|r| r.loss).collect();
            let succ: Vec<f64> = rows
                .iter()
                .map(|r| f64::from(u8::from(r.success)))
                .collect();
            writeln!(
                out,
                "{run_id},{},{w},{},{},{},{},{}",
                method.as_str(),
                rows.len(),
                num(mean(&acc)),
                num(std_dev(&acc)),
                num(mean(&loss)),
                num(mean(&succ))
            )
            .unwrap();
        }
    }
    out
}

/// Means over seeds indexed by the number of successful global updates.
/// Row `j` averages the seeds that reached `j` updates.
pub fn successful_csv(run_id: &str, methods: &[Method], cells: &[CellResult]) -> String {
    let mut out = format!("{SUCCESS_AGGREGATE_COLUMNS}\n");
    for &method in methods {
        let per_seed: Vec<Vec<_>> = cells
            .iter()
            .filter(|c| c.method == method)
            .map(|c| c.run.rows.iter().filter(|r| r.success).collect())
            .collect();
        let most = per_seed.iter().map(Vec::len).max().unwrap_or(0);
        for j in 1..=most {
            let rows: Vec<_> = per_seed.iter().filter_map(|s| s.get(j - 1)).collect();
            let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
            let loss: Vec<f64> = rows.iter().map(|r| r.loss).collect();
            let wall: Vec<f64> = rows.iter().map(|r| r.wall_round as f64).collect();
            writeln!(
                out,
                "{run_id},{},{j},{},{},{},{}",
                method.as_str(),
                rows.len(),
                num(mean(&acc)),
                num(mean(&loss)),
                num(mean(&wall))
            )
            .unwrap();
        }
    }
    out
}

fn cell_file(dir: &Path, method: Method, seed: u64) -> std::path::PathBuf {
    dir.join(format!("{}_seed{seed}.csv", method.as_str()))
}

/// Runs every `(method, seed)` cell in parallel and merges in config order.
/// With `out_dir`, each cell's rows are written under `cells/` as soon as it
/// finishes, followed by the merged `rounds.csv`, `aggregate.csv`,
/// `aggregate_successful.csv` and the resolved `config.toml`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let cell_dir = out_dir.map(|d| d.join("cells"));
    if let Some(d) = &cell_dir {
        fs::create_dir_all(d)?;
    }
    let cohorts: Vec<Cohort> = cfg
        .seeds
        .par_iter()
        .map(|&seed| load_cohort(cfg, seed))
        .collect::<Result<_>>()?;
    let jobs: Vec<(Method, usize)> = cfg
        .methods
        .iter()
        .flat_map(|&m| (0..cfg.seeds.len()).map(move |i| (m, i)))
        .collect();
    let cells: Vec<CellResult> = jobs
        .par_iter()
        .map(|&(method, i)| {
            let seed = cfg.seeds[i];
            let run = run_cell(cfg, &cohorts[i], method, seed)?;
            let cell = CellResult { method, seed, run };
            if let Some(d) = &cell_dir {
                let body = format!("{ROUND_COLUMNS}\n{}", rounds_csv_rows(&cfg.run_id, &cell));
                fs::write(cell_file(d, method, seed), body)?;
            }
            log::info!(
                "{} seed {seed}: {} wall rounds, final accuracy {:.4}",
                method.as_str(),
                cell.run.rows.len(),
                cell.run.rows.last().map_or(f64::NAN, |r| r.accuracy)
            );
            Ok(cell)
        })
        .collect::<Result<_>>()?;

    let mut rounds_csv = format!("{ROUND_COLUMNS}\n");
    for c in &cells {
        rounds_csv.push_str(&rounds_csv_rows(&cfg.run_id, c));
    }
    let aggregate_csv = aggregate_csv(&cfg.run_id, &cfg.methods, &cells, cfg.rounds);
    let successful_csv = successful_csv(&cfg.run_id, &cfg.methods, &cells);
    if let Some(d) = out_dir {
        fs::write(d.join("rounds.csv"), &rounds_csv)?;
        fs::write(d.join("aggregate.csv"), &aggregate_csv)?;
        fs::write(d.join("aggregate_successful.csv"), &successful_csv)?;
        fs::write(d.join("config.toml"), cfg.to_toml_string())?;
    }
    Ok(ExperimentOutput {
        cells,
        rounds_csv,
        aggregate_csv,
        successful_csv,
    })
}

/// Runs `f` on a dedicated pool of `threads` workers (`None`: rayon default).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::config("threads", e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Largest update coordinate seen in an unquantized, perfect-link run at the
/// first seed; a data-driven quantizer `upper` bound.
pub fn calibrate_quantizer_upper(cfg: &ExperimentConfig) -> Result<f64> {
    let seed = cfg.seeds[0];
    let cohort = load_cohort(cfg, seed)?;
    let shards = partition_dataset(&cohort.train, cfg.clients, cfg.dataset.partition, seed)?;
    let mut fed = Federation::new(
        cohort.model,
        shards,
        cohort.model.init(seed),
        cfg.sgd(),
        None,
        seed,
    );
    let mut peak = 0.0f64;
    for _ in 0..cfg.rounds {
        let (_, updates) = fed.qfl_round()?;
        for u in &updates {
            peak = u.quantized.iter().fold(peak, |m, x| m.max(x.abs()));
        }
    }
    Ok(peak)
}

/// Grid for [`sweep_outage`]. Both hops share one `q`, as when the D2P SNR
/// is balanced against the path loss.
#[derive(Debug, Clone, PartialEq)]
pub struct OutageSweep {
    pub rates: Vec<f64>,
    pub snrs: Vec<f64>,
    pub stragglers: Vec<usize>,
    pub clients: usize,
    pub mode: OutageMode,
    /// `sigma^2` of the D2D channel.
    pub sigma2: f64,
    /// Monte Carlo trials per point; 0 leaves the MC columns empty.
    pub mc_trials: u64,
    pub seed: u64,
}

/// Closed-form (and optionally Monte Carlo) outage over a grid, one CSV row
/// per `(rate, s, snr)` in that nesting order.
pub fn sweep_outage(sweep: &OutageSweep) -> Result<String> {
    let mut out = format!("{OUTAGE_COLUMNS}\n");
    for &rate in &sweep.rates {
        for &s in &sweep.stragglers {
            for &snr in &sweep.snrs {
                let q = link_outage_probability(rate, snr, sweep.sigma2, sweep.mode)?;
                let r = closed_form_outage(sweep.clients, s, q)?;
                let (mc, se) = if sweep.mc_trials > 0 {
                    let e =
                        monte_carlo_outage(sweep.clients, s, q, q, sweep.mc_trials, sweep.seed)?;
                    (num(e.estimate), num(e.std_error))
                } else {
                    (String::new(), String::new())
                };
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{mc},{se}",
                    num(snr),
                    num(rate),
                    sweep.mode.as_str(),
                    num(q),
                    sweep.clients,
                    s,
                    num(r.p1),
                    num(r.p2),
                    num(r.p3),
                    num(r.p_o)
                )
                .unwrap();
            }
        }
    }
    Ok(out)
}
