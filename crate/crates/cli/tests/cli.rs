use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use seasonal_dstm::analysis::SummaryGrid;
use seasonal_dstm::draws::PosteriorDraws;
use seasonal_dstm::ingest::{load_dataset, write_csv};
use seasonal_dstm::synthetic::TruthRecord;
use seasonal_dstm_cli::commands::{explore_grids, summary_grids};
use seasonal_dstm_cli::config::{resolve, Layers};

/// Small run: 4×4 sites, 2×2 knots, four 365-day years (2001..2004).
const BASE: &[&str] = &[
    "--set",
    "simulation.days=[365,365,365,365]",
    "--set",
    "model.knots=[2,2]",
    "--set",
    "sampler.n_iter=60",
    "--set",
    "sampler.n_burn=20",
    "--set",
    "chunk_draws=16",
    "--set",
    "periods={\"first\":[2001,2002],\"second\":[2003,2004]}",
    "--set",
    "explore_periods={\"first\":[2001,2002],\"second\":[2003,2004]}",
];

fn base_args(out: &Path, extra: &[&str]) -> Vec<String> {
    let mut args: Vec<String> = BASE.iter().map(|s| s.to_string()).collect();
    args.extend(["--out".to_string(), out.to_string_lossy().into_owned()]);
    args.extend(extra.iter().map(|s| s.to_string()));
    args
}

fn run(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seasonal-dstm")).arg(cmd).args(base_args(out, extra)).output().unwrap()
}

fn ok(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let o = run(cmd, out, extra);
    assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn library_config(out: &Path, extra: &[&str]) -> seasonal_dstm_cli::config::RunConfig {
    let args = base_args(out, extra);
    let overrides: Vec<String> = args.chunks(2).filter(|p| p[0] == "--set").map(|p| p[1].clone()).collect();
    let seed = args.iter().position(|a| a == "--seed").map(|i| args[i + 1].parse().unwrap());
    resolve(&Layers { config_file: None, overrides, seed, output: Some(out.to_path_buf()) }).unwrap().config
}

fn manifest(out: &Path, cmd: &str) -> Value {
    serde_json::from_slice(&std::fs::read(out.join("manifests").join(format!("{cmd}.json"))).unwrap()).unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v.into_iter().map(|p| (p.file_name().unwrap().into(), std::fs::read(&p).unwrap())).collect()
}

fn error_kind(o: &Output) -> String {
    let v: Value = serde_json::from_slice(&o.stderr).unwrap();
    v["error"]["kind"].as_str().unwrap().to_string()
}

#[test]
fn simulate_is_seed_deterministic_and_loadable() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok("simulate", &a, &["--seed", "5"]);
    ok("simulate", &b, &["--seed", "5"]);
    ok("simulate", &c, &["--seed", "6"]);
    assert_eq!(files(&a.join("dataset")), files(&b.join("dataset")));
    assert_ne!(files(&a.join("dataset")), files(&c.join("dataset")));
    assert_eq!(std::fs::read(a.join("truth.json")).unwrap(), std::fs::read(b.join("truth.json")).unwrap());

    let ds = load_dataset(&a.join("dataset")).unwrap();
    assert_eq!(ds.sites().len(), 16);
    assert_eq!(ds.years().iter().map(|y| y.label).collect::<Vec<_>>(), vec![2001, 2002, 2003, 2004]);
    let truth = TruthRecord::load(&a.join("truth.json")).unwrap();
    assert_eq!(truth.sites.len(), 16);

    let m = manifest(&a, "simulate");
    assert_eq!(m["command"], "simulate");
    assert_eq!(m["seed"], 5);
    assert!(m["outputs"].as_array().unwrap().iter().all(|o| o["sha256"].as_str().unwrap().len() == 64));
}

#[test]
fn fit_writes_draws_and_recovery() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    ok("simulate", &out, &[]);
    let truth = out.join("truth.json").to_string_lossy().into_owned();
    ok("fit", &out, &["--set", &format!("recovery={truth}")]);
    let draws = PosteriorDraws::load(&out.join("draws")).unwrap();
    assert_eq!(draws.n_draws(), 40);
    let report: Value = serde_json::from_slice(&std::fs::read(out.join("recovery.json")).unwrap()).unwrap();
    let coverage = report["beta_coverage"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&coverage));
    assert_eq!(report["n_draws"], 40);
}

#[test]
fn fit_with_zero_retained_draws_then_summarize_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    ok("simulate", &out, &[]);
    ok("fit", &out, &["--set", "sampler.n_iter=20", "--set", "sampler.n_burn=20"]);
    assert_eq!(PosteriorDraws::load(&out.join("draws")).unwrap().n_draws(), 0);
    let o = run("summarize", &out, &["--set", "sampler.n_iter=20", "--set", "sampler.n_burn=20"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_kind(&o), "validation");
}

#[test]
fn config_hash_tracks_config_not_threads() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    ok("simulate", &out, &["--threads", "1"]);
    let h1 = manifest(&out, "simulate")["config_hash"].clone();
    ok("simulate", &out, &["--threads", "2"]);
    assert_eq!(manifest(&out, "simulate")["config_hash"], h1);
    ok("simulate", &out, &["--set", "sampler.n_iter=61"]);
    assert_ne!(manifest(&out, "simulate")["config_hash"], h1);
}

#[test]
fn print_config_reports_sources() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("config.json");
    std::fs::write(&file, r#"{"model": {"phi": 2.5}}"#).unwrap();
    let o = ok("print-config", tmp.path(), &["--config", file.to_str().unwrap(), "--seed", "3"]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["config"]["model"]["phi"], 2.5);
    assert_eq!(v["config"]["sampler"]["seed"], 3);
    let p = &v["provenance"];
    assert_eq!(p["model.phi"], "config-file");
    assert_eq!(p["sampler.seed"], "flag");
    assert_eq!(p["sampler.n_iter"], "override");
    assert_eq!(p["data.stride"], "published");
    assert_eq!(p["model.jitter"], "default");
}

#[test]
fn summarize_matches_library_and_swapped_periods_negate() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    ok("simulate", &out, &[]);
    ok("fit", &out, &[]);
    ok("summarize", &out, &[]);

    let config = library_config(&out, &[]);
    let draws = PosteriorDraws::load(&out.join("draws")).unwrap();
    let grids = summary_grids(&config, &draws).unwrap();
    // 2 variables × (2 modes × 3 shift products + 4 years × 2 harmonics × 2 fields).
    assert_eq!(grids.len(), 2 * (6 + 16));
    let dir = out.join("summary");
    for (stem, want) in &grids {
        let got = SummaryGrid::read(&dir, stem).unwrap();
        assert_eq!(got.quantity, want.quantity, "{stem}");
        for (g, w) in got.records.iter().zip(&want.records) {
            for (x, y) in [(g.mean, w.mean), (g.lower, w.lower), (g.upper, w.upper)] {
                assert!(x == y || (x.is_nan() && y.is_nan()), "{stem}: {x} vs {y}");
            }
            assert_eq!(g.significant, w.significant);
        }
    }

    let swapped = out.join("swapped");
    let set = "periods={\"first\":[2003,2004],\"second\":[2001,2002]}";
    ok("summarize", &swapped, &["--set", set, "--set", &format!("summary.draws={}", out.join("draws").display())]);
    for stem in ["tmin_peak_shift", "tmax_trough_shift", "tmin_peak_shift_annual"] {
        let a = SummaryGrid::read(&dir, stem).unwrap();
        let b = SummaryGrid::read(&swapped.join("summary"), stem).unwrap();
        for (x, y) in a.records.iter().zip(&b.records) {
            assert!((x.mean + y.mean).abs() < 1e-9, "{stem}: {} vs {}", x.mean, y.mean);
            assert_eq!(x.significant, y.significant);
        }
    }
}

#[test]
fn explore_matches_library_and_csv_input() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    // CSV export needs calendar-length years; 2004 is a leap year.
    let leap: &[&str] = &["--set", "simulation.days=[365,365,365,366]"];
    ok("simulate", &out, leap);
    ok("explore", &out, leap);
    let config = library_config(&out, leap);
    let grids = explore_grids(&config).unwrap();
    assert_eq!(grids.len(), 8);
    for (stem, want) in &grids {
        let got = SummaryGrid::read(&out.join("explore"), stem).unwrap();
        for (g, w) in got.records.iter().zip(&want.records) {
            assert_eq!(g.mean.to_bits(), w.mean.to_bits(), "{stem}");
        }
    }

    // The same panel through CSV ingestion gives the same screen.
    let ds = load_dataset(&out.join("dataset")).unwrap();
    let csv = tmp.path().join("panel.csv");
    // A constant tmax offset keeps tmin <= tmax; the screen's intercept absorbs it.
    let mut raw = ds.uncentered();
    for l in 0..ds.years().len() {
        for s in 0..ds.sites().len() {
            raw.series_mut(1, l, s).iter_mut().for_each(|v| *v += 20.0);
        }
    }
    write_csv(&csv, ds.sites(), ds.years(), &raw).unwrap();
    let from_csv = tmp.path().join("csv");
    ok("explore", &from_csv, &[leap[0], leap[1], "--set", &format!("data.csv={}", csv.display()), "--set", "data.stride=[1,1]"]);
    for (stem, want) in &grids {
        let got = SummaryGrid::read(&from_csv.join("explore"), stem).unwrap();
        for (g, w) in got.records.iter().zip(&want.records) {
            assert!((g.mean - w.mean).abs() < 1e-6, "{stem}: {} vs {}", g.mean, w.mean);
        }
    }
}

#[test]
fn errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");

    let o = run("fit", &out, &["--set", "sampler.n_iter=0"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_kind(&o), "validation");

    let o = run("print-config", &out, &["--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));

    let o = run("fit", &out, &[]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(error_kind(&o), "io");

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let o = run("print-config", &out, &["--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let missing = tmp.path().join("missing.json");
    let o = run("print-config", &out, &["--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}
