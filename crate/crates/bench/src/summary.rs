//! Per-cell aggregation of ledger files.
//!
//! Ledgers are grouped by the `{label}_w{w}` part of their file name. Each
//! group reports the median final BLR with a percentile-bootstrap 95%
//! interval (1000 resamples, fixed seed), the standard error, the median
//! final outer loss and the mean of any variance-probe sidecars.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use smoothfbo::numkit::Rng;
use smoothfbo::smoother::RegretLedger;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_HEADER: &str = "method,w,n_seeds,blr_final_median,blr_final_lo95,blr_final_hi95,loss_final_median,variance_probe_mean,blr_final_se";
pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const BOOTSTRAP_SEED: u64 = 20240607;

/// Sidecar suffixes that share a ledger's stem.
pub const SIDECARS: [&str; 4] = [".probe.csv", ".true.csv", ".theorem.csv", ".truth.csv"];

#[derive(Debug, thiserror::Error)]
pub enum SummaryError {
    #[error("no ledgers to summarize")]
    Empty,
    #[error("{path}: {msg}")]
    Read { path: PathBuf, msg: String },
    #[error("{path}: file name is not `<label>_w<W>_seed<S>.csv`")]
    Name { path: PathBuf },
    #[error("{path}: schema differs from other ledgers of cell {cell}")]
    Schema { path: PathBuf, cell: String },
}

/// `(label, w, seed)` from a ledger file name.
pub fn parse_stem(name: &str) -> Option<(String, usize, u64)> {
    let stem = name.strip_suffix(".csv")?;
    if SIDECARS.iter().any(|s| name.ends_with(s)) {
        return None;
    }
    let (rest, seed) = stem.rsplit_once("_seed")?;
    let (label, w) = rest.rsplit_once("_w")?;
    if label.is_empty() {
        return None;
    }
    Some((label.to_string(), w.parse().ok()?, seed.parse().ok()?))
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Percentile-bootstrap 95% interval for the median.
pub fn bootstrap_median_ci(xs: &[f64], resamples: usize, rng: &Rng) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mut rng = rng.clone();
    let mut medians = Vec::with_capacity(resamples);
    let mut buf = vec![0.0; n];
    for _ in 0..resamples {
        for b in buf.iter_mut() {
            *b = xs[rng.below(n)];
        }
        medians.push(median(&buf));
    }
    medians.sort_by(f64::total_cmp);
    (
        quantile_sorted(&medians, 0.025),
        quantile_sorted(&medians, 0.975),
    )
}

pub fn std_error(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub method: String,
    pub w: usize,
    pub n_seeds: usize,
    pub blr_final_median: f64,
    pub blr_final_lo95: f64,
    pub blr_final_hi95: f64,
    pub loss_final_median: f64,
    pub variance_probe_mean: Option<f64>,
    pub blr_final_se: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunSummary {
    pub cells: Vec<CellSummary>,
}

impl RunSummary {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{SUMMARY_HEADER}\n");
        for c in &self.cells {
            let probe = c
                .variance_probe_mean
                .map_or(String::new(), |v| v.to_string());
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                c.method,
                c.w,
                c.n_seeds,
                c.blr_final_median,
                c.blr_final_lo95,
                c.blr_final_hi95,
                c.loss_final_median,
                probe,
                c.blr_final_se
            ));
        }
        s
    }
}

/// Per-seed finals feeding one summary row.
#[derive(Debug, Clone, Default)]
pub struct CellFinals {
    pub blr: Vec<f64>,
    pub loss: Vec<f64>,
    pub probe_means: Vec<f64>,
}

pub fn summarize_cell(method: &str, w: usize, finals: &CellFinals) -> CellSummary {
    let rng = Rng::new(BOOTSTRAP_SEED);
    let (lo, hi) = bootstrap_median_ci(&finals.blr, BOOTSTRAP_RESAMPLES, &rng);
    let probe = if finals.probe_means.is_empty() {
        None
    } else {
        Some(finals.probe_means.iter().sum::<f64>() / finals.probe_means.len() as f64)
    };
    CellSummary {
        method: method.to_string(),
        w,
        n_seeds: finals.blr.len(),
        blr_final_median: median(&finals.blr),
        blr_final_lo95: lo,
        blr_final_hi95: hi,
        loss_final_median: median(&finals.loss),
        variance_probe_mean: probe,
        blr_final_se: std_error(&finals.blr),
    }
}

fn read_err(path: &Path, msg: impl ToString) -> SummaryError {
    SummaryError::Read {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

fn read_probe_mean(path: &Path) -> Result<Option<f64>, SummaryError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(read_err(path, e)),
    };
    let mut lines = text.lines();
    if lines.next() != Some("t,mean_variance") {
        return Err(read_err(path, "probe header must be `t,mean_variance`"));
    }
    let mut vals = Vec::new();
    for line in lines {
        let v = line
            .split_once(',')
            .and_then(|(_, v)| v.parse::<f64>().ok())
            .ok_or_else(|| read_err(path, format!("bad probe row `{line}`")))?;
        vals.push(v);
    }
    Ok(if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    })
}

/// Summarizes the given ledger files. Order of `paths` does not matter.
pub fn summarize_paths(paths: &[PathBuf]) -> Result<RunSummary, SummaryError> {
    // (label, w) -> [(seed, rows, lambda dim, blr, loss, probe)]
    type Entry = (u64, usize, usize, f64, f64, Option<f64>);
    let mut groups: BTreeMap<(String, usize), Vec<Entry>> = BTreeMap::new();
    for path in paths {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        let (label, w, seed) =
            parse_stem(name).ok_or_else(|| SummaryError::Name { path: path.clone() })?;
        let file = fs::File::open(path).map_err(|e| read_err(path, e))?;
        let ledger = RegretLedger::read_csv(BufReader::new(file)).map_err(|e| read_err(path, e))?;
        let last = ledger
            .rows()
            .last()
            .ok_or_else(|| read_err(path, "ledger has no rows"))?;
        let probe = read_probe_mean(
            &path.with_file_name(format!("{}.probe.csv", &name[..name.len() - 4])),
        )?;
        let entry = (
            seed,
            ledger.len(),
            last.lambda.len(),
            last.blr_cum,
            last.outer_loss,
            probe,
        );
        let group = groups.entry((label.clone(), w)).or_default();
        if let Some(first) = group.first() {
            if (first.1, first.2) != (entry.1, entry.2) {
                return Err(SummaryError::Schema {
                    path: path.clone(),
                    cell: format!("{label}_w{w}"),
                });
            }
        }
        group.push(entry);
    }
    let mut cells = Vec::with_capacity(groups.len());
    for ((label, w), mut runs) in groups {
        runs.sort_by_key(|r| r.0);
        let finals = CellFinals {
            blr: runs.iter().map(|r| r.3).collect(),
            loss: runs.iter().map(|r| r.4).collect(),
            probe_means: runs.iter().filter_map(|r| r.5).collect(),
        };
        cells.push(summarize_cell(&label, w, &finals));
    }
    Ok(RunSummary { cells })
}

/// Ledger files directly inside `dir`, sorted by name.
pub fn ledger_paths(dir: &Path) -> Result<Vec<PathBuf>, SummaryError> {
    let entries = fs::read_dir(dir).map_err(|e| read_err(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| read_err(dir, e))?.path();
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        if path.is_file() && parse_stem(name).is_some() {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

pub fn summarize_dir(dir: &Path) -> Result<RunSummary, SummaryError> {
    let paths = ledger_paths(dir)?;
    if paths.is_empty() {
        return Err(SummaryError::Empty);
    }
    summarize_paths(&paths)
}
