use std::fs;
use std::path::Path;
use std::process::Command;

use proptest::prelude::*;
use smoothfbo_bench::config::{expand_grid, parse_config, parse_file, ExperimentConfig, Method};
use smoothfbo_bench::grid::{cells_from, run_grid, Cell, THEOREM_HEADER};
use smoothfbo_bench::summary::{summarize_dir, SUMMARY_FILE, SUMMARY_HEADER};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_smoothfbo"));
    c.env_remove("SMOOTHFBO_OUT");
    c
}

fn tiny(method: Method, w: usize, seeds: &[u64]) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.method = method;
    c.w = w;
    c.rounds = 12;
    c.seeds = seeds.to_vec();
    c.hidden = vec![4];
    c
}

fn csv_names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    v.sort();
    v
}

#[test]
fn golden_headers() {
    let dir = tempfile::tempdir().unwrap();
    let cells = vec![
        Cell::new(tiny(Method::SmoothFbo, 2, &[1]), &[]),
        Cell::new(tiny(Method::Oracle, 2, &[1]), &[]),
    ];
    run_grid(&cells, 1, dir.path()).unwrap();
    let first = |name: &str| {
        fs::read_to_string(dir.path().join(name))
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string()
    };
    assert_eq!(
        first("smoothfbo_w2_seed1.csv"),
        "t,blr_term,blr_cum,outer_loss,g_exp_norm,g_imp_norm,smoothed_norm,inner_err_proxy,adjoint_err_proxy,lambda_0,lambda_1,lambda_2,lambda_3,lambda_4"
    );
    assert_eq!(
        first("oracle_w2_seed1.csv"),
        "t,blr_term,blr_cum,outer_loss,g_exp_norm,g_imp_norm,smoothed_norm,inner_err_proxy,adjoint_err_proxy,lambda_0,lambda_1"
    );
    assert_eq!(
        first("oracle_w2_seed1.true.csv"),
        "t,true_blr_term,true_blr_cum"
    );
    assert_eq!(first("oracle_w2_seed1.theorem.csv"), THEOREM_HEADER);
    assert_eq!(
        THEOREM_HEADER,
        "l,q,sigma_f_sq,w,t,v1t,bound,true_blr,holds"
    );
    assert_eq!(
        first(SUMMARY_FILE),
        "method,w,n_seeds,blr_final_median,blr_final_lo95,blr_final_hi95,loss_final_median,variance_probe_mean,blr_final_se"
    );
    assert_eq!(first(SUMMARY_FILE), SUMMARY_HEADER);
    let ledger = fs::read_to_string(dir.path().join("smoothfbo_w2_seed1.csv")).unwrap();
    assert!(!ledger.contains('\r'));
    assert_eq!(ledger.lines().count(), 13);
}

#[test]
fn single_cell_single_seed() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_grid(
        &[Cell::new(tiny(Method::SmoothFbo, 3, &[4]), &[])],
        1,
        dir.path(),
    )
    .unwrap();
    assert_eq!(report.failures(), 0);
    assert_eq!(
        csv_names(dir.path()),
        vec!["smoothfbo_w3_seed4.csv", "summary.csv"]
    );
    let summary = fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
    let row: Vec<&str> = summary.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[..3], &["smoothfbo", "3", "1"]);
    assert_eq!(row[3], row[4]);
    assert_eq!(row[3], row[5]);
}

#[test]
fn seeds_give_distinct_ledgers_and_bracketing_median() {
    let dir = tempfile::tempdir().unwrap();
    run_grid(
        &[Cell::new(tiny(Method::SmoothFbo, 2, &[1, 2, 3]), &[])],
        2,
        dir.path(),
    )
    .unwrap();
    let ledgers: Vec<String> = (1..=3)
        .map(|s| fs::read_to_string(dir.path().join(format!("smoothfbo_w2_seed{s}.csv"))).unwrap())
        .collect();
    assert_ne!(ledgers[0], ledgers[1]);
    assert_ne!(ledgers[1], ledgers[2]);
    assert_ne!(ledgers[0], ledgers[2]);
    let finals: Vec<f64> = ledgers
        .iter()
        .map(|l| {
            l.lines()
                .last()
                .unwrap()
                .split(',')
                .nth(2)
                .unwrap()
                .parse()
                .unwrap()
        })
        .collect();
    let s = summarize_dir(dir.path()).unwrap();
    let m = s.cells[0].blr_final_median;
    let lo = finals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = finals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(lo <= m && m <= hi);
}

#[test]
fn parallelism_does_not_change_bytes() {
    let text = "T=15\nmodel.hidden=4\nseeds=1,2\ngrid.w=1,3\ngrid.method=smoothfbo,unrolled,oracle\nprobe.replicates=2\nprobe.every=5\n";
    let cells = cells_from(expand_grid(&parse_file(text).unwrap()).unwrap());
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_grid(&cells, 1, a.path()).unwrap();
    run_grid(&cells, 8, b.path()).unwrap();
    let names = csv_names(a.path());
    assert_eq!(names, csv_names(b.path()));
    assert!(names.len() > 12);
    for n in names
        .iter()
        .chain(std::iter::once(&"runs.jsonl".to_string()))
    {
        assert_eq!(
            fs::read(a.path().join(n)).unwrap(),
            fs::read(b.path().join(n)).unwrap(),
            "{n}"
        );
    }
}

#[test]
fn summary_recomputes_from_ledgers() {
    let dir = tempfile::tempdir().unwrap();
    let text = "T=10\nmodel.hidden=3\nseeds=1,2,3\ngrid.w=1,2\nprobe.replicates=2\nprobe.every=5\n";
    let cells = cells_from(expand_grid(&parse_file(text).unwrap()).unwrap());
    run_grid(&cells, 2, dir.path()).unwrap();
    let written = fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
    assert_eq!(summarize_dir(dir.path()).unwrap().to_csv(), written);
}

#[test]
fn fbo_w1_is_not_duplicated_across_windows() {
    let cells = cells_from(
        expand_grid(&parse_file("grid.w=1,5,10\ngrid.method=fbo_w1,smoothfbo").unwrap()).unwrap(),
    );
    assert_eq!(cells.len(), 4);
    assert_eq!(
        cells
            .iter()
            .filter(|c| c.config.method == Method::FboW1)
            .count(),
        1
    );
}

#[test]
fn failed_cell_is_recorded_and_grid_continues() {
    let dir = tempfile::tempdir().unwrap();
    let mut bad = tiny(Method::SmoothFbo, 1, &[1]);
    bad.outer_lr = 1e300;
    bad.lambda0 = 1e300;
    bad.inner.lr = 1e300;
    let good = tiny(Method::SmoothFbo, 2, &[1]);
    let report = run_grid(&[Cell::new(bad, &[]), Cell::new(good, &[])], 1, dir.path()).unwrap();
    assert_eq!(report.failures(), 1);
    assert_eq!(report.records[0].status, "failed");
    assert!(report.records[0].error.is_some());
    assert!(dir.path().join("smoothfbo_w2_seed1.csv").exists());
    let log = fs::read_to_string(dir.path().join("runs.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log
        .lines()
        .next()
        .unwrap()
        .contains("\"status\":\"failed\""));
}

#[test]
fn cli_exit_codes_and_out_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "T=5\nmodel.hidden=2\nseeds=1\nw=2\n").unwrap();
    let out = dir.path().join("flag");
    let st = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    assert!(out.join("smoothfbo_w2_seed1.csv").exists());

    let env_out = dir.path().join("env");
    let st = bin()
        .env("SMOOTHFBO_OUT", &env_out)
        .args(["run", "--w", "3", "--seeds", "7,8", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    assert!(env_out.join("smoothfbo_w3_seed7.csv").exists());
    assert!(env_out.join("smoothfbo_w3_seed8.csv").exists());

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "w=0\n").unwrap();
    let o = bin().args(["run", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("w >= 1"));

    fs::write(
        &bad,
        "T=3\nmodel.hidden=2\nseeds=1\nouter.lr=1e300\nouter.lambda0=1e300\ninner.lr=1e300\n",
    )
    .unwrap();
    let st = bin()
        .args(["run", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("x"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(1));

    let st = bin()
        .arg("summarize")
        .arg(&out)
        .arg("--out")
        .arg(dir.path().join("s"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    assert_eq!(
        fs::read(dir.path().join("s").join(SUMMARY_FILE)).unwrap(),
        fs::read(out.join(SUMMARY_FILE)).unwrap()
    );
}

fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
    (
        prop_oneof![
            Just(Method::SmoothFbo),
            Just(Method::FboW1),
            Just(Method::Unrolled),
            Just(Method::Oracle)
        ],
        1usize..600,
        1u64..5000,
        proptest::collection::btree_set(0u64..1000, 1..5),
        (1e-9f64..1.0, 0.0f64..10.0, 1e-9f64..1.0),
        proptest::collection::vec(1usize..64, 0..4),
        any::<bool>(),
        proptest::option::of(1e-3f64..5.0),
        (-3.0f64..0.0, 0.0f64..3.0),
    )
        .prop_map(
            |(method, w, rounds, seeds, (olr, lam, ilr), hidden, warm, alpha, (lo, hi))| {
                let mut c = ExperimentConfig::default();
                c.method = method;
                c.w = w;
                c.rounds = rounds;
                c.seeds = seeds.into_iter().collect();
                c.outer_lr = olr;
                c.lambda0 = lam;
                c.inner.lr = ilr;
                c.hidden = hidden;
                c.warm_start = warm;
                c.oracle_alpha = alpha;
                c.constraint = smoothfbo::outer_loop::Constraint::Box { lo, hi };
                c
            },
        )
}

proptest! {
    #[test]
    fn serialize_round_trips(c in arb_config()) {
        prop_assert_eq!(parse_config(&c.serialize()).unwrap(), c);
    }
}
