//! Runs config cells across seeds and writes ledgers, sidecars, a run log
//! and the summary.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use smoothfbo::drift::DriftSchedule;
use smoothfbo::models::{init_network, InitScheme, InitSpec};
use smoothfbo::numkit::{Activation, Network, Rng};
use smoothfbo::outer_loop::{
    run_estimation_mode, run_fbo_baseline, run_oracle_mode, Constraint, DriftingQuadratic,
    EstimationConfig, EstimationRun, FunctionalEstimator, OracleSpec, ProbeConfig, ProbeRow,
    TheoremConstants, UnrolledEstimator,
};

use crate::config::{ExperimentConfig, GridCell, InitChoice, Method};
use crate::summary::{summarize_paths, SUMMARY_FILE};

pub const RUN_LOG_FILE: &str = "runs.jsonl";

/// One config of a grid, with the label used in file names and the summary.
#[derive(Debug, Clone)]
pub struct Cell {
    pub label: String,
    pub config: ExperimentConfig,
}

impl Cell {
    /// Label is the method name, extended with any grid tags other than
    /// `method` and `w`.
    pub fn new(config: ExperimentConfig, tags: &[(String, String)]) -> Self {
        let mut label = config.method.as_str().to_string();
        for (k, v) in tags {
            if k == "method" || k == "w" {
                continue;
            }
            label.push('-');
            label.push_str(&sanitize(&format!("{k}={v}")));
        }
        Self { label, config }
    }
}

/// Cells for expanded grid configs. Configs that map to the same
/// `(label, effective w)` pair, such as `fbo_w1` crossed with several
/// windows, are kept once.
pub fn cells_from(expanded: Vec<GridCell>) -> Vec<Cell> {
    let mut seen = std::collections::BTreeSet::new();
    expanded
        .into_iter()
        .map(|(c, tags)| Cell::new(c, &tags))
        .filter(|c| seen.insert((c.label.clone(), c.config.effective_w())))
        .collect()
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '=' | '+') {
                c
            } else {
                '~'
            }
        })
        .collect()
}

pub fn ledger_stem(label: &str, w: usize, seed: u64) -> String {
    format!("{label}_w{w}_seed{seed}")
}

/// Everything one (cell, seed) run produces, held in memory until written.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub stem: String,
    pub ledger_csv: String,
    /// `(suffix, contents)`, written as `{stem}{suffix}`.
    pub sidecars: Vec<(String, String)>,
    pub blr_final: f64,
    pub loss_final: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub label: String,
    pub method: String,
    pub w: usize,
    pub seed: u64,
    pub status: &'static str,
    pub ledger: Option<String>,
    pub blr_final: Option<f64>,
    pub loss_final: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct GridReport {
    pub records: Vec<RunRecord>,
    pub summary_path: PathBuf,
}

impl GridReport {
    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.status != "ok").count()
    }
}

fn build_network(cfg: &ExperimentConfig, label: &str, rng: &Rng) -> smoothfbo::Result<Network> {
    let mut dims = vec![cfg.input_dim];
    dims.extend(&cfg.hidden);
    dims.push(1);
    match cfg.init {
        InitChoice::FanIn => init_network(
            &InitSpec::new(InitScheme::FanIn, label),
            dims,
            Activation::Gelu,
            rng,
        ),
        InitChoice::Zeros => Network::zeros(dims, Activation::Gelu),
    }
}

fn probe_csv(probes: &[ProbeRow]) -> String {
    let mut s = String::from("t,mean_variance\n");
    for p in probes {
        s.push_str(&format!("{},{}\n", p.t, p.mean_variance()));
    }
    s
}

fn ledger_text(ledger: &smoothfbo::smoother::RegretLedger) -> String {
    let mut buf = Vec::new();
    ledger.write_csv(&mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ledger is ASCII")
}

fn finish(stem: String, run: &EstimationRun, mut sidecars: Vec<(String, String)>) -> RunOutput {
    if !run.probes.is_empty() {
        sidecars.push((".probe.csv".into(), probe_csv(&run.probes)));
    }
    RunOutput {
        stem,
        ledger_csv: ledger_text(&run.ledger),
        sidecars,
        blr_final: run.ledger.blr(),
        loss_final: run.ledger.rows().last().map_or(f64::NAN, |r| r.outer_loss),
    }
}

/// Runs one seed of one cell.
pub fn run_one(cell: &Cell, seed: u64) -> smoothfbo::Result<RunOutput> {
    let cfg = &cell.config;
    let w = cfg.effective_w();
    let stem = ledger_stem(&cell.label, w, seed);
    let rng = Rng::new(seed);

    if cfg.method == Method::Oracle {
        return run_oracle_cell(cfg, stem, &rng);
    }

    let schedule = DriftSchedule::random(cfg.drift_kind(), cfg.input_dim, &rng)?;
    let mut sidecars = Vec::new();
    if cfg.dump_truth {
        let mut buf = Vec::new();
        schedule
            .write_trajectory(cfg.rounds, &mut buf)
            .expect("writing to memory");
        sidecars.push((".truth.csv".into(), String::from_utf8(buf).expect("ASCII")));
    }
    let est_cfg = EstimationConfig {
        rounds: cfg.rounds,
        window: w,
        alpha: cfg.outer_lr,
        constraint: cfg.constraint,
        lambda0: vec![cfg.lambda0; cfg.data_window],
        dgp: cfg.dgp(),
        probe: ProbeConfig {
            replicates: cfg.probe_replicates,
            every: cfg.probe_every,
        },
    };
    let h = build_network(cfg, "inner", &rng)?;
    let run = match cfg.method {
        Method::SmoothFbo | Method::FboW1 => {
            let a = build_network(cfg, "adjoint", &rng)?;
            let mut est = FunctionalEstimator::new(h, a, cfg.inner, cfg.adjoint)?;
            est.warm_start = cfg.warm_start;
            est.fraction = cfg.fraction;
            if cfg.method == Method::FboW1 {
                run_fbo_baseline(&schedule, &est_cfg, est, &rng)?
            } else {
                run_estimation_mode(&schedule, &est_cfg, est, &rng)?
            }
        }
        Method::Unrolled => {
            let mut est = UnrolledEstimator::new(h, cfg.inner.steps, cfg.inner.lr, cfg.inner.ridge);
            est.warm_start = cfg.warm_start;
            run_estimation_mode(&schedule, &est_cfg, est, &rng)?
        }
        Method::Oracle => unreachable!(),
    };
    Ok(finish(stem, &run, sidecars))
}

pub const THEOREM_HEADER: &str = "l,q,sigma_f_sq,w,t,v1t,bound,true_blr,holds";

fn run_oracle_cell(
    cfg: &ExperimentConfig,
    stem: String,
    rng: &Rng,
) -> smoothfbo::Result<RunOutput> {
    let w = cfg.effective_w();
    let problem = DriftingQuadratic::new(
        cfg.oracle_dim,
        cfg.oracle_curvature,
        cfg.oracle_amplitude,
        cfg.oracle_omega,
    );
    let spec = OracleSpec {
        sigma_f: cfg.oracle_sigma,
    };
    let r = cfg.oracle_radius;
    let alpha = cfg.oracle_alpha.unwrap_or(1.0 / cfg.oracle_curvature);
    let lambda1 = vec![cfg.lambda0.clamp(-r, r); cfg.oracle_dim];
    let run = run_oracle_mode(
        &problem,
        &spec,
        lambda1,
        Constraint::Box { lo: -r, hi: r },
        alpha,
        w,
        cfg.rounds,
        rng,
    )?;

    let mut true_csv = Vec::new();
    run.write_true_csv(&mut true_csv)
        .expect("writing to memory");
    let consts = TheoremConstants {
        l: cfg.oracle_curvature,
        q: problem.q_over_box(r, cfg.rounds),
        sigma_f_sq: spec.total_variance(cfg.oracle_dim),
        w,
        t: cfg.rounds,
        v1t: problem.v1t_over_box(r, cfg.rounds),
    };
    let bound = consts.bound();
    let true_blr = run.true_blr();
    let theorem = format!(
        "{THEOREM_HEADER}\n{},{},{},{},{},{},{},{},{}\n",
        consts.l,
        consts.q,
        consts.sigma_f_sq,
        consts.w,
        consts.t,
        consts.v1t,
        bound,
        true_blr,
        true_blr <= bound
    );
    let sidecars = vec![
        (
            ".true.csv".into(),
            String::from_utf8(true_csv).expect("ASCII"),
        ),
        (".theorem.csv".into(), theorem),
    ];
    Ok(RunOutput {
        stem,
        ledger_csv: ledger_text(&run.ledger),
        sidecars,
        blr_final: run.ledger.blr(),
        loss_final: run.ledger.rows().last().map_or(f64::NAN, |r| r.outer_loss),
    })
}

fn write_output(dir: &Path, out: &RunOutput) -> io::Result<String> {
    let name = format!("{}.csv", out.stem);
    fs::write(dir.join(&name), &out.ledger_csv)?;
    for (suffix, body) in &out.sidecars {
        fs::write(dir.join(format!("{}{suffix}", out.stem)), body)?;
    }
    Ok(name)
}

/// Runs every `(cell, seed)` pair on a pool of `parallel` threads, writes
/// the results in a fixed order, then writes the summary.
///
/// A failing pair is recorded in the run log and skipped; only I/O errors
/// on the summary abort.
pub fn run_grid(cells: &[Cell], parallel: usize, out_dir: &Path) -> io::Result<GridReport> {
    fs::create_dir_all(out_dir)?;
    let jobs: Vec<(&Cell, u64)> = cells
        .iter()
        .flat_map(|c| c.config.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(io::Error::other)?;
    let results: Vec<smoothfbo::Result<RunOutput>> = pool.install(|| {
        jobs.par_iter()
            .map(|(cell, seed)| {
                let start = Instant::now();
                let res = run_one(cell, *seed);
                eprintln!(
                    "{} seed {}: {} in {:.2}s",
                    cell.label,
                    seed,
                    if res.is_ok() { "ok" } else { "FAILED" },
                    start.elapsed().as_secs_f64()
                );
                res
            })
            .collect()
    });

    let mut records = Vec::with_capacity(jobs.len());
    let mut log = String::new();
    for ((cell, seed), res) in jobs.iter().zip(results) {
        let w = cell.config.effective_w();
        let mut rec = RunRecord {
            label: cell.label.clone(),
            method: cell.config.method.as_str().into(),
            w,
            seed: *seed,
            status: "ok",
            ledger: None,
            blr_final: None,
            loss_final: None,
            error: None,
        };
        match res.map_err(|e| e.to_string()).and_then(|out| {
            write_output(out_dir, &out)
                .map(|name| (name, out.blr_final, out.loss_final))
                .map_err(|e| format!("writing ledger: {e}"))
        }) {
            Ok((name, blr, loss)) => {
                rec.ledger = Some(name);
                rec.blr_final = Some(blr);
                rec.loss_final = Some(loss);
            }
            Err(msg) => {
                eprintln!("{} seed {}: {msg}", cell.label, seed);
                rec.status = "failed";
                rec.error = Some(msg);
            }
        }
        log.push_str(&serde_json::to_string(&rec).map_err(io::Error::other)?);
        log.push('\n');
        records.push(rec);
    }
    fs::write(out_dir.join(RUN_LOG_FILE), log)?;

    let ledgers: Vec<PathBuf> = records
        .iter()
        .filter_map(|r| r.ledger.as_ref().map(|name| out_dir.join(name)))
        .collect();
    let summary = summarize_paths(&ledgers).map_err(io::Error::other)?;
    let summary_path = out_dir.join(SUMMARY_FILE);
    fs::write(&summary_path, summary.to_csv())?;
    Ok(GridReport {
        records,
        summary_path,
    })
}
