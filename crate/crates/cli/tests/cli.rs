// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn secscale(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_secscale"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL_SYSTEM: &str = r#"
[system.geometry]
total_size = 4194304
epc_size = 131072
scratch_pages = 2
[system.cache]
l1_bytes = 1024
l1_ways = 2
l2_bytes = 4096
l2_ways = 4
"#;

fn config(dir: &TempDir, body: &str) -> String {
    let p = dir.path().join("run.toml");
    fs::write(&p, format!("{body}\n{SMALL_SYSTEM}")).unwrap();
    p.to_string_lossy().into_owned()
}

const SEQUENTIAL: &str = r#"
[workload.synthetic]
pattern = { kind = "sequential" }
footprint = 262144
accesses = 300
accesses_per_instruction = 0.01
"#;

#[test]
fn minimal_run_succeeds_and_writes_reports() {
    let d = TempDir::new().unwrap();
    let cfg = config(&d, SEQUENTIAL);
    let o = secscale(&["run", "-c", &cfg, "--out", "r"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(d.path().join("r/report.json")).unwrap();
    assert!(report.contains("\"security_event\": null"));
    let csv = fs::read_to_string(d.path().join("r/summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let d = TempDir::new().unwrap();
    let cfg = config(&d, SEQUENTIAL);
    for out in ["a", "b"] {
        assert_eq!(code(&secscale(&["run", "-c", &cfg, "--out", out], d.path())), 0);
    }
    for f in ["report.json", "summary.csv"] {
        assert_eq!(
            fs::read(d.path().join("a").join(f)).unwrap(),
            fs::read(d.path().join("b").join(f)).unwrap()
        );
    }
}

#[test]
fn attack_script_exits_with_security_code() {
    let d = TempDir::new().unwrap();
    let body = format!(
        "model = \"sec-scale\"\n{}\n[[attacks]]\nat = 250\nkind = \"tamper-data\"\n",
        SEQUENTIAL.replace("sequential", "uniform-random")
    );
    let cfg = config(&d, &body);
    let o = secscale(&["run", "-c", &cfg, "--out", "r"], d.path());
    assert_eq!(code(&o), 2, "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(d.path().join("r/report.json")).unwrap();
    assert!(!report.contains("\"security_event\": null"));
    assert!(stdout(&o).contains("security event"));
}

#[test]
fn unknown_key_is_a_config_error_naming_the_key() {
    let d = TempDir::new().unwrap();
    let cfg = config(&d, "[system.forest]\ntop_cache_entires = 4\n");
    let o = secscale(&["run", "-c", &cfg], d.path());
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("system.forest") && err.contains("top_cache_entires"), "{err}");
}

#[test]
fn bad_flag_is_a_usage_error() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(&secscale(&["run", "--model", "enclave-9000"], d.path())), 1);
    assert_eq!(code(&secscale(&["frobnicate"], d.path())), 1);
    assert_eq!(code(&secscale(&["storage", "--total", "lots"], d.path())), 1);
}

#[test]
fn seed_flag_overrides_file() {
    let d = TempDir::new().unwrap();
    let cfg = config(&d, &format!("seed = 5\nout = \"from-file\"\n{SEQUENTIAL}"));
    assert_eq!(code(&secscale(&["run", "-c", &cfg], d.path())), 0);
    let file = fs::read_to_string(d.path().join("from-file/report.json")).unwrap();
    assert!(file.contains("\"seed\": 5"));
    assert_eq!(code(&secscale(&["run", "-c", &cfg, "--seed", "7", "--out", "flag"], d.path())), 0);
    let flag = fs::read_to_string(d.path().join("flag/report.json")).unwrap();
    assert!(flag.contains("\"seed\": 7"));
}

#[test]
fn storage_defaults_print_machine_scale_figures() {
    let d = TempDir::new().unwrap();
    let o = secscale(&["storage", "--out", "s"], d.path());
    assert_eq!(code(&o), 0);
    let s = stdout(&o);
    for needle in ["1096.00 MB", "2.06 MB", "1098.06 MB", "2048.00 MB", "1048576 MACs"] {
        assert!(s.contains(needle), "missing {needle} in\n{s}");
    }
    assert!(d.path().join("s/storage.json").exists());
}

#[test]
fn storage_of_one_subtree_region() {
    let d = TempDir::new().unwrap();
    let o = secscale(&["storage", "--total", "512KiB"], d.path());
    assert_eq!(code(&o), 0);
    // 137 MACs of 8 bytes.
    assert!(stdout(&o).contains(&format!("{:.2} MB", 1096.0 / 1048576.0)));
}

#[test]
fn counter_tree_curve_grows_linearly() {
    let d = TempDir::new().unwrap();
    let o = secscale(&["storage", "--curve"], d.path());
    let vals: Vec<f64> = stdout(&o)
        .lines()
        .filter(|l| l.contains("GiB"))
        .map(|l| l.split_whitespace().nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(vals.len(), 4);
    for w in vals.windows(2) {
        assert!((w[1] / w[0] - 2.0).abs() < 0.01, "{vals:?}");
    }
}

#[test]
fn duplicate_models_give_identical_rows() {
    let d = TempDir::new().unwrap();
    let cfg = config(&d, SEQUENTIAL);
    let o = secscale(
        &["compare", "-c", &cfg, "--model", "sgx-client", "--model", "sgx-client", "--out", "c"],
        d.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(d.path().join("c/compare.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], rows[1]);
}

#[test]
fn compare_needs_two_models() {
    let d = TempDir::new().unwrap();
    let cfg = config(&d, SEQUENTIAL);
    assert_eq!(code(&secscale(&["compare", "-c", &cfg, "--model", "dfp"], d.path())), 1);
    assert_eq!(code(&secscale(&["compare", "--preset", "no-such-preset"], d.path())), 1);
}

#[test]
fn five_model_preset_flags_the_ordering() {
    let d = TempDir::new().unwrap();
    let o = secscale(&["compare", "--preset", "five-model", "--seed", "3", "--out", "c"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("check ordering: holds"), "{}", stdout(&o));
    let json = fs::read_to_string(d.path().join("c/compare.json")).unwrap();
    assert!(json.contains("\"ordering\": true"));
}

#[test]
fn penalty_sweep_preset_is_monotone() {
    let d = TempDir::new().unwrap();
    let o = secscale(&["compare", "--preset", "fault-penalty-sweep", "--out", "c"], d.path());
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("check monotone degradation: holds"), "{}", stdout(&o));
    let csv = fs::read_to_string(d.path().join("c/compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn attack_subcommand_detects_and_exits_two() {
    let d = TempDir::new().unwrap();
    let o = secscale(
        &["attack", "--kind", "splice-relocate", "--kind", "tamper-key-slot", "--seeds", "3", "--out", "a"],
        d.path(),
    );
    assert_eq!(code(&o), 2);
    let s = stdout(&o);
    assert!(s.contains("splice-relocate") && s.contains("3/3 detected"), "{s}");
    let csv = fs::read_to_string(d.path().join("a/attacks.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.lines().skip(1).all(|l| l.contains(",true,")));
}

#[test]
fn generated_trace_feeds_a_run() {
    let d = TempDir::new().unwrap();
    let o = secscale(
        &["gen-trace", "--out", "t/trace.txt.gz", "--pattern", "zipf:0.9", "--footprint", "512KiB", "--accesses", "500"],
        d.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("500 records"));
    let cfg = config(&d, "[workload]\ntrace = \"t/trace.txt.gz\"\n");
    let o = secscale(&["run", "-c", &cfg, "--model", "penglai", "--out", "r"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(d.path().join("r/report.json")).unwrap();
    assert!(report.contains("\"trace_records\": 500"));
    assert!(report.contains("penglai-mmt"));
}

#[test]
fn shipped_config_runs() {
    let d = TempDir::new().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/small.toml");
    let o = secscale(&["run", "-c", cfg.to_str().unwrap(), "--out", "r"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = secscale(&["compare", "-c", cfg.to_str().unwrap(), "--preset", "ablation", "--out", "c"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(d.path().join("c/compare.csv")).unwrap().lines().count(), 7);
}
