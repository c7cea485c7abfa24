//! Window averaging of hypergradients and regret bookkeeping.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::numkit::linalg::all_finite;
use crate::numkit::{norm, norm_sq, Rng};

/// Ring buffer of the last `w` hypergradient estimates. The smoothed value
/// always divides by `w`: rounds before the stream started count as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct HypergradWindow {
    capacity: usize,
    buf: VecDeque<Vec<f64>>,
    dim: Option<usize>,
}

impl HypergradWindow {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("window must be >= 1".into()));
        }
        Ok(Self {
            capacity,
            buf: VecDeque::with_capacity(capacity),
            dim: None,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn clear(&mut self) {
        self.buf.clear();
        self.dim = None;
    }

    /// Current smoothed value without pushing anything.
    pub fn smoothed(&self) -> Vec<f64> {
        let mut iter = self.buf.iter();
        let mut out = match iter.next() {
            Some(first) => first.clone(),
            None => return vec![0.0; self.dim.unwrap_or(0)],
        };
        for g in iter {
            for (o, x) in out.iter_mut().zip(g) {
                *o += x;
            }
        }
        let w = self.capacity as f64;
        out.iter_mut().for_each(|o| *o /= w);
        out
    }

    pub fn push_and_smooth(&mut self, g: &[f64]) -> Result<Vec<f64>> {
        if !all_finite(g) {
            return Err(Error::NonFinite("hypergradient pushed to window"));
        }
        match self.dim {
            Some(d) if d != g.len() => {
                return Err(Error::ShapeMismatch {
                    context: "HypergradWindow::push_and_smooth",
                    expected: d,
                    got: g.len(),
                })
            }
            _ => self.dim = Some(g.len()),
        }
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(g.to_vec());
        Ok(self.smoothed())
    }
}

/// Per-round quantities logged next to the regret term.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoundDiagnostics {
    pub outer_loss: f64,
    pub g_exp_norm: f64,
    pub g_imp_norm: f64,
    pub inner_err_proxy: f64,
    pub adjoint_err_proxy: f64,
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerRow {
    pub t: u64,
    pub blr_term: f64,
    pub blr_cum: f64,
    pub outer_loss: f64,
    pub g_exp_norm: f64,
    pub g_imp_norm: f64,
    pub smoothed_norm: f64,
    pub inner_err_proxy: f64,
    pub adjoint_err_proxy: f64,
    pub lambda: Vec<f64>,
}

/// Running local regret `Σ_t ‖smoothed_t‖²` with per-round diagnostics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegretLedger {
    rows: Vec<LedgerRow>,
}

pub const LEDGER_COLUMNS: [&str; 9] = [
    "t",
    "blr_term",
    "blr_cum",
    "outer_loss",
    "g_exp_norm",
    "g_imp_norm",
    "smoothed_norm",
    "inner_err_proxy",
    "adjoint_err_proxy",
];

pub fn ledger_header(num_lambda: usize) -> String {
    let mut cols: Vec<String> = LEDGER_COLUMNS.iter().map(|c| c.to_string()).collect();
    cols.extend((0..num_lambda).map(|i| format!("lambda_{i}")));
    cols.join(",")
}

impl RegretLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[LedgerRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Cumulative regret so far.
    pub fn blr(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.blr_cum)
    }

    pub fn blr_update(
        &mut self,
        t: u64,
        smoothed: &[f64],
        diag: RoundDiagnostics,
    ) -> Result<&LedgerRow> {
        if let Some(last) = self.rows.last() {
            if t <= last.t {
                return Err(Error::OutOfOrder {
                    prev: last.t,
                    got: t,
                });
            }
        }
        if !all_finite(smoothed) {
            return Err(Error::NonFinite("smoothed hypergradient"));
        }
        let blr_term = norm_sq(smoothed);
        let row = LedgerRow {
            t,
            blr_term,
            blr_cum: self.blr() + blr_term,
            outer_loss: diag.outer_loss,
            g_exp_norm: diag.g_exp_norm,
            g_imp_norm: diag.g_imp_norm,
            smoothed_norm: norm(smoothed),
            inner_err_proxy: diag.inner_err_proxy,
            adjoint_err_proxy: diag.adjoint_err_proxy,
            lambda: diag.lambda,
        };
        self.rows.push(row);
        Ok(self.rows.last().expect("just pushed"))
    }

    /// CSV with the fixed column order of [`ledger_header`]. Floats use
    /// Rust's shortest round-trip formatting, so reading back is bit-exact.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let k = self.rows.first().map_or(0, |r| r.lambda.len());
        writeln!(out, "{}", ledger_header(k))?;
        for r in &self.rows {
            write!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.t,
                r.blr_term,
                r.blr_cum,
                r.outer_loss,
                r.g_exp_norm,
                r.g_imp_norm,
                r.smoothed_norm,
                r.inner_err_proxy,
                r.adjoint_err_proxy
            )?;
            for l in &r.lambda {
                write!(out, ",{l}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let header = match lines.next() {
            Some((_, l)) => l.map_err(|e| Error::Parse {
                line: 1,
                msg: e.to_string(),
            })?,
            None => {
                return Err(Error::Parse {
                    line: 1,
                    msg: "empty ledger".into(),
                })
            }
        };
        let cols: Vec<&str> = header.trim_end().split(',').collect();
        if cols.len() < LEDGER_COLUMNS.len() || cols[..LEDGER_COLUMNS.len()] != LEDGER_COLUMNS {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unexpected ledger header `{header}`"),
            });
        }
        let k = cols.len() - LEDGER_COLUMNS.len();
        if header.trim_end() != ledger_header(k) {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unexpected ledger header `{header}`"),
            });
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim_end().split(',').collect();
            if fields.len() != cols.len() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {} fields, got {}", cols.len(), fields.len()),
                });
            }
            let f = |j: usize| -> Result<f64> {
                fields[j].parse::<f64>().map_err(|e| Error::Parse {
                    line: lineno,
                    msg: format!("column {}: {e}", cols[j]),
                })
            };
            let t = fields[0].parse::<u64>().map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("column t: {e}"),
            })?;
            rows.push(LedgerRow {
                t,
                blr_term: f(1)?,
                blr_cum: f(2)?,
                outer_loss: f(3)?,
                g_exp_norm: f(4)?,
                g_imp_norm: f(5)?,
                smoothed_norm: f(6)?,
                inner_err_proxy: f(7)?,
                adjoint_err_proxy: f(8)?,
                lambda: (LEDGER_COLUMNS.len()..cols.len())
                    .map(f)
                    .collect::<Result<_>>()?,
            });
        }
        Ok(Self { rows })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    pub replicates: usize,
    pub mean: Vec<f64>,
    /// Unbiased per-coordinate sample variance.
    pub variance: Vec<f64>,
}

impl VarianceReport {
    pub fn mean_variance(&self) -> f64 {
        if self.variance.is_empty() {
            return 0.0;
        }
        self.variance.iter().sum::<f64>() / self.variance.len() as f64
    }
}

/// Runs `estimate` on `replicates` independent streams
/// `rng.fork_indexed("probe", r)` and returns per-coordinate mean and
/// variance. The closure must hold the outer variable and models fixed;
/// only its data draws should depend on the stream.
pub fn variance_probe<F>(replicates: usize, rng: &Rng, mut estimate: F) -> Result<VarianceReport>
where
    F: FnMut(&mut Rng) -> Result<Vec<f64>>,
{
    if replicates < 2 {
        return Err(Error::InvalidArgument(format!(
            "variance probe needs >= 2 replicates, got {replicates}"
        )));
    }
    let mut dim = None;
    let mut sum: Vec<f64> = Vec::new();
    let mut draws = Vec::with_capacity(replicates);
    for r in 0..replicates {
        let mut stream = rng.fork_indexed("probe", r as u64);
        let g = estimate(&mut stream)?;
        match dim {
            None => {
                dim = Some(g.len());
                sum = vec![0.0; g.len()];
            }
            Some(d) if d != g.len() => {
                return Err(Error::ShapeMismatch {
                    context: "variance_probe",
                    expected: d,
                    got: g.len(),
                })
            }
            _ => {}
        }
        for (s, x) in sum.iter_mut().zip(&g) {
            *s += x;
        }
        draws.push(g);
    }
    let n = replicates as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mut variance = vec![0.0; mean.len()];
    for g in &draws {
        for ((v, x), m) in variance.iter_mut().zip(g).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    variance.iter_mut().for_each(|v| *v /= n - 1.0);
    Ok(VarianceReport {
        replicates,
        mean,
        variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_one_is_identity() {
        let mut w = HypergradWindow::new(1).unwrap();
        for g in [[1.0, -2.0], [0.5, 3.0]] {
            assert_eq!(w.push_and_smooth(&g).unwrap(), g.to_vec());
        }
    }

    #[test]
    fn window_averages() {
        let mut w = HypergradWindow::new(3).unwrap();
        for _ in 0..3 {
            w.push_and_smooth(&[2.0, -1.0]).unwrap();
        }
        assert_eq!(w.push_and_smooth(&[2.0, -1.0]).unwrap(), vec![2.0, -1.0]);

        let mut w = HypergradWindow::new(3).unwrap();
        w.push_and_smooth(&[1.0, 0.0]).unwrap();
        w.push_and_smooth(&[0.0, 1.0]).unwrap();
        assert_eq!(w.push_and_smooth(&[2.0, 2.0]).unwrap(), vec![1.0, 1.0]);
        // oldest is evicted
        assert_eq!(w.push_and_smooth(&[1.0, 0.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(w.len(), 3);
    }

    #[test]
    fn early_rounds_divide_by_full_window() {
        let mut w = HypergradWindow::new(4).unwrap();
        assert_eq!(w.push_and_smooth(&[4.0, 8.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn window_rejects_dimension_change_and_nan() {
        let mut w = HypergradWindow::new(2).unwrap();
        w.push_and_smooth(&[1.0]).unwrap();
        assert!(w.push_and_smooth(&[1.0, 2.0]).is_err());
        assert!(w.push_and_smooth(&[f64::NAN]).is_err());
        assert!(HypergradWindow::new(0).is_err());
    }

    #[test]
    fn blr_sums() {
        let mut l = RegretLedger::new();
        for t in 1..=5 {
            l.blr_update(t, &[0.0, 0.0], RoundDiagnostics::default())
                .unwrap();
        }
        assert_eq!(l.blr(), 0.0);

        let mut l = RegretLedger::new();
        for t in 1..=10 {
            l.blr_update(t, &[0.6, 0.8], RoundDiagnostics::default())
                .unwrap();
        }
        assert!((l.blr() - 10.0).abs() < 1e-12);

        let mut rng = Rng::new(4);
        let mut l = RegretLedger::new();
        let mut brute = 0.0;
        for t in 1..=50 {
            let g: Vec<f64> = (0..3).map(|_| rng.gaussian()).collect();
            brute += g.iter().map(|x| x * x).sum::<f64>();
            l.blr_update(t, &g, RoundDiagnostics::default()).unwrap();
        }
        assert!((l.blr() - brute).abs() < 1e-10 * brute);
    }

    #[test]
    fn blr_rejects_out_of_order() {
        let mut l = RegretLedger::new();
        l.blr_update(3, &[1.0], RoundDiagnostics::default())
            .unwrap();
        assert!(matches!(
            l.blr_update(3, &[1.0], RoundDiagnostics::default()),
            Err(Error::OutOfOrder { prev: 3, got: 3 })
        ));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let mut rng = Rng::new(8);
        let mut l = RegretLedger::new();
        for t in 1..=20 {
            let g: Vec<f64> = (0..2).map(|_| rng.gaussian() * 1e-7).collect();
            let diag = RoundDiagnostics {
                outer_loss: rng.uniform(),
                g_exp_norm: 0.0,
                g_imp_norm: rng.gaussian().abs(),
                inner_err_proxy: 1.0 / 3.0,
                adjoint_err_proxy: f64::NAN,
                lambda: vec![rng.gaussian(), 1e300],
            };
            l.blr_update(t, &g, diag).unwrap();
        }
        let mut buf = Vec::new();
        l.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "t,blr_term,blr_cum,outer_loss,g_exp_norm,g_imp_norm,smoothed_norm,inner_err_proxy,adjoint_err_proxy,lambda_0,lambda_1\n"
        ));
        let back = RegretLedger::read_csv(&buf[..]).unwrap();
        assert_eq!(back.len(), l.len());
        for (a, b) in back.rows().iter().zip(l.rows()) {
            assert_eq!(a.blr_cum.to_bits(), b.blr_cum.to_bits());
            assert_eq!(a.blr_term.to_bits(), b.blr_term.to_bits());
            assert_eq!(a.adjoint_err_proxy.is_nan(), b.adjoint_err_proxy.is_nan());
            assert_eq!(a.lambda, b.lambda);
        }
        let mut again = Vec::new();
        back.write_csv(&mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let text = "t,blr_term,blr_cum,outer_loss,g_exp_norm,g_imp_norm,smoothed_norm,inner_err_proxy,adjoint_err_proxy\n1,0,0,0,0,0,0,0,oops\n";
        match RegretLedger::read_csv(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(RegretLedger::read_csv("a,b\n".as_bytes()).is_err());
    }

    #[test]
    fn deterministic_estimates_have_zero_variance() {
        let rep = variance_probe(10, &Rng::new(0), |_| Ok(vec![1.5, -2.0])).unwrap();
        assert_eq!(rep.variance, vec![0.0, 0.0]);
        assert!(variance_probe(1, &Rng::new(0), |_| Ok(vec![0.0])).is_err());
    }

    fn smoothed_noise(rng: &mut Rng, w: usize, dim: usize) -> Vec<f64> {
        let mut win = HypergradWindow::new(w).unwrap();
        let mut out = Vec::new();
        for _ in 0..w {
            let g: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
            out = win.push_and_smooth(&g).unwrap();
        }
        out
    }

    #[test]
    fn variance_shrinks_by_window() {
        let r = 10_000;
        let rep = variance_probe(r, &Rng::new(21), |s| Ok(smoothed_noise(s, 4, 3))).unwrap();
        assert!(
            (rep.mean_variance() - 0.25).abs() < 0.025,
            "{}",
            rep.mean_variance()
        );
        assert!(rep.mean_variance() <= 0.25 * (1.0 + 5.0 / (r as f64).sqrt()));

        let v1 = variance_probe(r, &Rng::new(22), |s| Ok(smoothed_noise(s, 1, 3))).unwrap();
        let v16 = variance_probe(r, &Rng::new(22), |s| Ok(smoothed_noise(s, 16, 3))).unwrap();
        let ratio = v1.mean_variance() / v16.mean_variance();
        assert!((12.0..=20.0).contains(&ratio), "{ratio}");
    }
}
