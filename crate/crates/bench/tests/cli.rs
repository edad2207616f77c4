use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vpng_bench::metrics::{read_csv, summarize, CSV_HEADER};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vpng-bench"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("vpng-bench-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

const SHORT: &str = r#"
task = "logreg"
n = 100
methods = ["grad", "vpng"]
step_size = 0.1
mu = 1e-3
fisher_expectation = "exact"
max_iters = 30
eval_every = 5
seeds = 2
"#;

#[test]
fn dry_run_writes_only_the_header() {
    let cfg = scratch("dry.toml");
    let out = scratch("dry.csv");
    write(&cfg, SHORT);
    run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--dry-run"]);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), format!("{CSV_HEADER}\n"));
}

#[test]
fn repeated_runs_write_identical_files() {
    let cfg = scratch("twice.toml");
    write(&cfg, SHORT);
    let (a, b) = (scratch("a.csv"), scratch("b.csv"));
    run(&["run", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap(), "--seed", "7"]);
    run(&["run", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--seed", "7"]);
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    let rows = read_csv(bytes.as_slice()).unwrap();
    assert!(rows.iter().all(|r| r.seed == 7 || r.seed == 8));
    assert!(rows.iter().all(|r| r.train_auc.is_some() && r.wall_clock_s.is_none()));
}

#[test]
fn summary_line_is_reproduced_from_the_csv() {
    let cfg = scratch("summary.toml");
    let out = scratch("summary.csv");
    write(&cfg, SHORT);
    let printed = String::from_utf8(run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).stdout).unwrap();
    let rows = read_csv(std::fs::File::open(&out).unwrap()).unwrap();
    let again: String = summarize(&rows).unwrap().iter().map(|s| format!("{s}\n")).collect();
    assert_eq!(printed, again);
    let resummarized = String::from_utf8(run(&["summarize", "--csv", out.to_str().unwrap()]).stdout).unwrap();
    assert_eq!(printed, resummarized);
    assert!(printed.contains("vpng step=0.1 seeds=2 train_auc="), "{printed}");
}

#[test]
fn config_errors_name_the_line_and_field() {
    let cfg = scratch("bad.toml");
    write(&cfg, "task = \"toy\"\nstep_size = 0.1\nlearnig_rate = 3\n");
    let out = bin().args(["run", "--config", cfg.to_str().unwrap(), "--dry-run", "--out", scratch("bad.csv").to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("learnig_rate"), "{err}");

    write(&cfg, "task = \"toy\"\nmax_iters = 10\neval_every = 0\n");
    let out = bin().args(["run", "--config", cfg.to_str().unwrap(), "--dry-run", "--out", scratch("bad.csv").to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("eval_every"), "{err}");
}

#[test]
fn generated_files_load_back() {
    let images = scratch("images.idx");
    run(&["gen", "--kind", "images", "--out", images.to_str().unwrap(), "--seed", "3"]);
    let ds = vpng_bench::data::load_idx_images(&images, vpng_bench::data::ImageOptions { downscale: false, ..Default::default() }).unwrap();
    let mut expect = vpng_bench::data::gen_images(1000, 200, 3).rows;
    let mut got = ds.rows.clone();
    expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
    got.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(got, expect);

    let ratings = scratch("ratings.csv");
    run(&["gen", "--kind", "ratings", "--out", ratings.to_str().unwrap()]);
    let opts = vpng_bench::data::RatingOptions { min_ratings: 1, ..Default::default() };
    let ds = vpng_bench::data::load_ratings(&ratings, opts).unwrap();
    let total: f64 = ds.rows.iter().flatten().sum();
    let expect: f64 = vpng_bench::data::gen_ratings(50, 30, 0).rows.iter().flatten().sum();
    assert_eq!(total, expect);

    let logreg = scratch("logreg.csv");
    run(&["gen", "--kind", "logreg", "--out", logreg.to_str().unwrap()]);
    let text = std::fs::read_to_string(&logreg).unwrap();
    assert!(text.starts_with("x1,x2,x3,x4,y\n"));
    assert_eq!(text.lines().count(), 501);
}
