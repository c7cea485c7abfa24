//! Flat `key=value` experiment configs.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Dotted prefixes group related keys (`inner.lr=1e-4`). Unknown keys are
//! rejected. Keys prefixed with `grid.` take comma-separated values and
//! expand into one config per combination (see [`expand_grid`]).

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use smoothfbo::drift::{DgpConfig, DriftKind};
use smoothfbo::funcgrad::SolverConfig;
use smoothfbo::models::OptimizerKind;
use smoothfbo::outer_loop::Constraint;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key=value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: `{key}`: {msg}")]
    BadValue {
        line: usize,
        key: String,
        msg: String,
    },
    #[error("line {line}: `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("`{key}` (line {line}): {msg}")]
    Constraint {
        line: usize,
        key: String,
        msg: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    SmoothFbo,
    FboW1,
    Unrolled,
    Oracle,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::SmoothFbo => "smoothfbo",
            Method::FboW1 => "fbo_w1",
            Method::Unrolled => "unrolled",
            Method::Oracle => "oracle",
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "smoothfbo" => Ok(Method::SmoothFbo),
            "fbo_w1" => Ok(Method::FboW1),
            "unrolled" => Ok(Method::Unrolled),
            "oracle" => Ok(Method::Oracle),
            _ => Err(format!(
                "expected one of smoothfbo, fbo_w1, unrolled, oracle; got `{s}`"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftChoice {
    Sinusoidal,
    Jump,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitChoice {
    FanIn,
    Zeros,
}

/// Everything that defines one experiment cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    pub w: usize,
    pub rounds: u64,
    pub seeds: Vec<u64>,
    pub out: PathBuf,

    pub outer_lr: f64,
    pub lambda0: f64,
    pub constraint: Constraint,

    pub inner: SolverConfig,
    pub adjoint: SolverConfig,
    pub fraction: f64,
    pub warm_start: bool,
    pub hidden: Vec<usize>,
    pub init: InitChoice,

    pub drift: DriftChoice,
    pub beta: f64,
    pub omega: f64,
    pub interval: u64,
    pub magnitude: f64,
    pub dump_truth: bool,

    pub input_dim: usize,
    pub batch: usize,
    pub noise: f64,
    pub data_window: usize,

    pub probe_replicates: usize,
    pub probe_every: u64,

    pub oracle_dim: usize,
    pub oracle_sigma: f64,
    pub oracle_amplitude: f64,
    pub oracle_omega: f64,
    pub oracle_curvature: f64,
    pub oracle_radius: f64,
    /// `None` means `1/L`.
    pub oracle_alpha: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let solver = SolverConfig::new(5, 1e-4, 0.0, OptimizerKind::Adam);
        Self {
            method: Method::SmoothFbo,
            w: 50,
            rounds: 1000,
            seeds: vec![1, 2, 3],
            out: PathBuf::from("results"),
            outer_lr: 1e-3,
            lambda0: 1.0,
            constraint: Constraint::NonnegativeOrthant,
            inner: solver,
            adjoint: solver,
            fraction: 1.0,
            warm_start: true,
            hidden: vec![32, 32],
            init: InitChoice::FanIn,
            drift: DriftChoice::Sinusoidal,
            beta: 1.0,
            omega: 2.0 * PI / 200.0,
            interval: 250,
            magnitude: 1.0,
            dump_truth: false,
            input_dim: 8,
            batch: 32,
            noise: 0.05,
            data_window: 5,
            probe_replicates: 0,
            probe_every: 100,
            oracle_dim: 2,
            oracle_sigma: 0.5,
            oracle_amplitude: 1.0,
            oracle_omega: 2.0 * PI / 200.0,
            oracle_curvature: 1.0,
            oracle_radius: 5.0,
            oracle_alpha: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "method",
    "w",
    "T",
    "seeds",
    "out",
    "outer.lr",
    "outer.lambda0",
    "outer.constraint",
    "inner.steps",
    "inner.lr",
    "inner.ridge",
    "inner.optimizer",
    "adjoint.steps",
    "adjoint.lr",
    "adjoint.ridge",
    "adjoint.optimizer",
    "hypergrad.fraction",
    "warm_start",
    "model.hidden",
    "model.init",
    "drift.kind",
    "drift.beta",
    "drift.omega",
    "drift.interval",
    "drift.magnitude",
    "drift.dump",
    "data.dim",
    "batch",
    "data.noise",
    "data.window",
    "probe.replicates",
    "probe.every",
    "oracle.dim",
    "oracle.sigma",
    "oracle.amplitude",
    "oracle.omega",
    "oracle.curvature",
    "oracle.radius",
    "oracle.alpha",
];

fn parse_num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(s.trim())).collect()
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_constraint(v: &str) -> Result<Constraint, String> {
    match v {
        "nonnegative" => Ok(Constraint::NonnegativeOrthant),
        "unconstrained" => Ok(Constraint::Unconstrained),
        _ => {
            let rest = v.strip_prefix("box:").ok_or_else(|| {
                format!("expected nonnegative, unconstrained or box:LO:HI, got `{v}`")
            })?;
            let (lo, hi) = rest
                .split_once(':')
                .ok_or_else(|| format!("expected box:LO:HI, got `{v}`"))?;
            Ok(Constraint::Box {
                lo: parse_num(lo)?,
                hi: parse_num(hi)?,
            })
        }
    }
}

fn fmt_constraint(c: &Constraint) -> String {
    match c {
        Constraint::NonnegativeOrthant => "nonnegative".into(),
        Constraint::Unconstrained => "unconstrained".into(),
        Constraint::Box { lo, hi } => format!("box:{lo}:{hi}"),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    /// Assigns one key. Errors carry only the message; the caller adds the
    /// line.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "method" => self.method = v.parse()?,
            "w" => self.w = parse_num(v)?,
            "T" => self.rounds = parse_num(v)?,
            "seeds" => self.seeds = parse_list(v)?,
            "out" => self.out = PathBuf::from(v),
            "outer.lr" => self.outer_lr = parse_num(v)?,
            "outer.lambda0" => self.lambda0 = parse_num(v)?,
            "outer.constraint" => self.constraint = parse_constraint(v)?,
            "inner.steps" => self.inner.steps = parse_num(v)?,
            "inner.lr" => self.inner.lr = parse_num(v)?,
            "inner.ridge" => self.inner.ridge = parse_num(v)?,
            "inner.optimizer" => self.inner.optimizer = v.parse()?,
            "adjoint.steps" => self.adjoint.steps = parse_num(v)?,
            "adjoint.lr" => self.adjoint.lr = parse_num(v)?,
            "adjoint.ridge" => self.adjoint.ridge = parse_num(v)?,
            "adjoint.optimizer" => self.adjoint.optimizer = v.parse()?,
            "hypergrad.fraction" => self.fraction = parse_num(v)?,
            "warm_start" => self.warm_start = parse_bool(v)?,
            "model.hidden" => self.hidden = parse_list(v)?,
            "model.init" => {
                self.init = match v {
                    "fan_in" => InitChoice::FanIn,
                    "zeros" => InitChoice::Zeros,
                    _ => return Err(format!("expected fan_in or zeros, got `{v}`")),
                }
            }
            "drift.kind" => {
                self.drift = match v {
                    "sinusoidal" => DriftChoice::Sinusoidal,
                    "jump" => DriftChoice::Jump,
                    _ => return Err(format!("expected sinusoidal or jump, got `{v}`")),
                }
            }
            "drift.beta" => self.beta = parse_num(v)?,
            "drift.omega" => self.omega = parse_num(v)?,
            "drift.interval" => self.interval = parse_num(v)?,
            "drift.magnitude" => self.magnitude = parse_num(v)?,
            "drift.dump" => self.dump_truth = parse_bool(v)?,
            "data.dim" => self.input_dim = parse_num(v)?,
            "batch" => self.batch = parse_num(v)?,
            "data.noise" => self.noise = parse_num(v)?,
            "data.window" => self.data_window = parse_num(v)?,
            "probe.replicates" => self.probe_replicates = parse_num(v)?,
            "probe.every" => self.probe_every = parse_num(v)?,
            "oracle.dim" => self.oracle_dim = parse_num(v)?,
            "oracle.sigma" => self.oracle_sigma = parse_num(v)?,
            "oracle.amplitude" => self.oracle_amplitude = parse_num(v)?,
            "oracle.omega" => self.oracle_omega = parse_num(v)?,
            "oracle.curvature" => self.oracle_curvature = parse_num(v)?,
            "oracle.radius" => self.oracle_radius = parse_num(v)?,
            "oracle.alpha" => self.oracle_alpha = Some(parse_num(v)?),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Current value of a key, formatted so that [`ExperimentConfig::set`]
    /// reads it back unchanged. `None` for unset optional keys.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "method" => self.method.as_str().into(),
            "w" => self.w.to_string(),
            "T" => self.rounds.to_string(),
            "seeds" => join(&self.seeds),
            "out" => self.out.display().to_string(),
            "outer.lr" => self.outer_lr.to_string(),
            "outer.lambda0" => self.lambda0.to_string(),
            "outer.constraint" => fmt_constraint(&self.constraint),
            "inner.steps" => self.inner.steps.to_string(),
            "inner.lr" => self.inner.lr.to_string(),
            "inner.ridge" => self.inner.ridge.to_string(),
            "inner.optimizer" => self.inner.optimizer.to_string(),
            "adjoint.steps" => self.adjoint.steps.to_string(),
            "adjoint.lr" => self.adjoint.lr.to_string(),
            "adjoint.ridge" => self.adjoint.ridge.to_string(),
            "adjoint.optimizer" => self.adjoint.optimizer.to_string(),
            "hypergrad.fraction" => self.fraction.to_string(),
            "warm_start" => self.warm_start.to_string(),
            "model.hidden" => join(&self.hidden),
            "model.init" => match self.init {
                InitChoice::FanIn => "fan_in".into(),
                InitChoice::Zeros => "zeros".into(),
            },
            "drift.kind" => match self.drift {
                DriftChoice::Sinusoidal => "sinusoidal".into(),
                DriftChoice::Jump => "jump".into(),
            },
            "drift.beta" => self.beta.to_string(),
            "drift.omega" => self.omega.to_string(),
            "drift.interval" => self.interval.to_string(),
            "drift.magnitude" => self.magnitude.to_string(),
            "drift.dump" => self.dump_truth.to_string(),
            "data.dim" => self.input_dim.to_string(),
            "batch" => self.batch.to_string(),
            "data.noise" => self.noise.to_string(),
            "data.window" => self.data_window.to_string(),
            "probe.replicates" => self.probe_replicates.to_string(),
            "probe.every" => self.probe_every.to_string(),
            "oracle.dim" => self.oracle_dim.to_string(),
            "oracle.sigma" => self.oracle_sigma.to_string(),
            "oracle.amplitude" => self.oracle_amplitude.to_string(),
            "oracle.omega" => self.oracle_omega.to_string(),
            "oracle.curvature" => self.oracle_curvature.to_string(),
            "oracle.radius" => self.oracle_radius.to_string(),
            "oracle.alpha" => return self.oracle_alpha.map(|a| a.to_string()),
            _ => return None,
        })
    }

    /// Checks value constraints; the error names the offending key.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        fn pos(key: &'static str, v: f64) -> Result<(), (&'static str, String)> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err((key, format!("must be > 0, got {v}")))
            }
        }
        fn nonneg(key: &'static str, v: f64) -> Result<(), (&'static str, String)> {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err((key, format!("must be >= 0, got {v}")))
            }
        }
        if self.w < 1 {
            return Err(("w", "must satisfy w >= 1".into()));
        }
        if self.rounds < 1 {
            return Err(("T", "must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(("seeds", "needs at least one seed".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(("seeds", "seeds must be distinct".into()));
        }
        nonneg("outer.lr", self.outer_lr)?;
        nonneg("outer.lambda0", self.lambda0)?;
        if let Constraint::Box { lo, hi } = self.constraint {
            if !(lo <= hi) {
                return Err((
                    "outer.constraint",
                    format!("box needs lo <= hi, got {lo} > {hi}"),
                ));
            }
        }
        for (prefix, s) in [("inner", &self.inner), ("adjoint", &self.adjoint)] {
            if s.steps < 1 {
                return Err((
                    if prefix == "inner" {
                        "inner.steps"
                    } else {
                        "adjoint.steps"
                    },
                    "must be >= 1".into(),
                ));
            }
            nonneg(
                if prefix == "inner" {
                    "inner.lr"
                } else {
                    "adjoint.lr"
                },
                s.lr,
            )?;
            nonneg(
                if prefix == "inner" {
                    "inner.ridge"
                } else {
                    "adjoint.ridge"
                },
                s.ridge,
            )?;
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err((
                "hypergrad.fraction",
                format!("must be in (0, 1], got {}", self.fraction),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(("model.hidden", "widths must be >= 1".into()));
        }
        nonneg("drift.beta", self.beta.abs())?;
        nonneg("drift.omega", self.omega.abs())?;
        if self.interval < 1 {
            return Err(("drift.interval", "must be >= 1".into()));
        }
        nonneg("drift.magnitude", self.magnitude.abs())?;
        if self.input_dim < 1 {
            return Err(("data.dim", "must be >= 1".into()));
        }
        if self.batch < 1 {
            return Err(("batch", "must be >= 1".into()));
        }
        nonneg("data.noise", self.noise)?;
        if self.data_window < 1 {
            return Err(("data.window", "must be >= 1".into()));
        }
        if self.probe_replicates == 1 {
            return Err(("probe.replicates", "must be 0 (off) or >= 2".into()));
        }
        if self.probe_every < 1 {
            return Err(("probe.every", "must be >= 1".into()));
        }
        if self.oracle_dim < 1 {
            return Err(("oracle.dim", "must be >= 1".into()));
        }
        nonneg("oracle.sigma", self.oracle_sigma)?;
        nonneg("oracle.amplitude", self.oracle_amplitude.abs())?;
        pos("oracle.curvature", self.oracle_curvature)?;
        pos("oracle.radius", self.oracle_radius)?;
        if let Some(a) = self.oracle_alpha {
            pos("oracle.alpha", a)?;
        }
        Ok(())
    }

    /// All keys in [`KEYS`] order, one `key=value` per line.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            if let Some(v) = self.get(key) {
                let _ = writeln!(out, "{key}={v}");
            }
        }
        out
    }

    pub fn dgp(&self) -> DgpConfig {
        DgpConfig {
            batch_size: self.batch,
            noise_std: self.noise,
            window: self.data_window,
        }
    }

    pub fn drift_kind(&self) -> DriftKind {
        match self.drift {
            DriftChoice::Sinusoidal => DriftKind::Sinusoidal {
                beta: self.beta,
                omega: self.omega,
            },
            DriftChoice::Jump => DriftKind::Jump {
                interval: self.interval,
                magnitude: self.magnitude,
            },
        }
    }

    /// The window actually used by the method.
    pub fn effective_w(&self) -> usize {
        match self.method {
            Method::FboW1 => 1,
            _ => self.w,
        }
    }
}

/// A parsed file: the base config, the source line of each key, and any
/// `grid.*` lists.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedConfig {
    pub base: ExperimentConfig,
    pub lines: BTreeMap<String, usize>,
    pub grid: BTreeMap<String, (usize, Vec<String>)>,
}

fn split_line(raw: &str) -> Option<&str> {
    let line = match raw.find('#') {
        Some(i) => &raw[..i],
        None => raw,
    };
    let line = line.trim();
    if line.is_empty() {
        None
    } else {
        Some(line)
    }
}

pub fn parse_file(text: &str) -> Result<ParsedConfig, ConfigError> {
    let mut base = ExperimentConfig::default();
    let mut lines = BTreeMap::new();
    let mut grid = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let Some(body) = split_line(raw) else {
            continue;
        };
        let (key, value) = body.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            text: body.to_string(),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if let Some(inner) = key.strip_prefix("grid.") {
            if !KEYS.contains(&inner) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.into(),
                });
            }
            if inner == "seeds" || inner == "out" {
                return Err(ConfigError::BadValue {
                    line,
                    key: key.into(),
                    msg: "seeds and out cannot be gridded; list seeds directly".into(),
                });
            }
            let values: Vec<String> = value.split(',').map(|s| s.trim().to_string()).collect();
            for v in &values {
                let mut probe = base.clone();
                probe.set(inner, v).map_err(|msg| ConfigError::BadValue {
                    line,
                    key: key.into(),
                    msg,
                })?;
            }
            if grid.insert(inner.to_string(), (line, values)).is_some() {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.into(),
                });
            }
            continue;
        }
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey {
                line,
                key: key.into(),
            });
        }
        if lines.insert(key.to_string(), line).is_some() {
            return Err(ConfigError::Duplicate {
                line,
                key: key.into(),
            });
        }
        base.set(key, value).map_err(|msg| ConfigError::BadValue {
            line,
            key: key.into(),
            msg,
        })?;
    }
    let parsed = ParsedConfig { base, lines, grid };
    if parsed.grid.is_empty() {
        validate_with_lines(&parsed.base, &parsed.lines)?;
    }
    Ok(parsed)
}

fn validate_with_lines(
    cfg: &ExperimentConfig,
    lines: &BTreeMap<String, usize>,
) -> Result<(), ConfigError> {
    cfg.validate()
        .map_err(|(key, msg)| ConfigError::Constraint {
            line: lines.get(key).copied().unwrap_or(0),
            key: key.into(),
            msg,
        })
}

/// Parses a single-cell config; `grid.*` keys are an error here.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let parsed = parse_file(text)?;
    if let Some((key, (line, _))) = parsed.grid.iter().next() {
        return Err(ConfigError::BadValue {
            line: *line,
            key: format!("grid.{key}"),
            msg: "grid keys need the `grid` subcommand".into(),
        });
    }
    Ok(parsed.base)
}

/// A config and the `(key, value)` grid tags that produced it.
pub type GridCell = (ExperimentConfig, Vec<(String, String)>);

/// One config per combination of grid values, in lexicographic order of
/// grid keys with the first key varying slowest. Each cell carries the
/// `(key, value)` pairs that made it.
pub fn expand_grid(parsed: &ParsedConfig) -> Result<Vec<GridCell>, ConfigError> {
    let mut cells: Vec<GridCell> = vec![(parsed.base.clone(), Vec::new())];
    for (key, (line, values)) in &parsed.grid {
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for (cfg, tags) in &cells {
            for v in values {
                let mut c = cfg.clone();
                c.set(key, v).map_err(|msg| ConfigError::BadValue {
                    line: *line,
                    key: format!("grid.{key}"),
                    msg,
                })?;
                let mut t = tags.clone();
                t.push((key.clone(), v.clone()));
                next.push((c, t));
            }
        }
        cells = next;
    }
    for (cfg, _) in &cells {
        validate_with_lines(cfg, &parsed.lines)?;
    }
    Ok(cells)
}
