use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_jumplora");

/// A small config; `extra` lines replace base keys of the same name.
fn small_config(method: &str, out: &Path, extra: &str) -> String {
    let base = format!(
        r#"method = "{method}"
d_model = 16
n_heads = 2
n_blocks = 2
vocab_size = 32
max_seq_len = 8
d_ff = 32
n_tasks = 4
classes_per_task = 2
samples_per_class = 24
seq_len = 8
batch_size = 8
seeds = [42]
output_dir = "{}""#,
        out.display()
    );
    let key = |l: &str| l.split('=').next().unwrap().trim().to_string();
    let overridden: Vec<String> = extra.lines().filter(|l| !l.is_empty()).map(key).collect();
    let mut lines: Vec<&str> = base.lines().filter(|l| !overridden.contains(&key(l))).collect();
    lines.extend(extra.lines());
    lines.join("\n") + "\n"
}

fn run_with(tmp: &TempDir, name: &str, config: &str, env: &[(&str, &Path)]) -> Output {
    let path = tmp.path().join(format!("{name}.toml"));
    fs::write(&path, config).unwrap();
    let mut cmd = Command::new(BIN);
    cmd.args(["run", "--config"]).arg(&path);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn run_ok(tmp: &TempDir, name: &str, method: &str, extra: &str) -> PathBuf {
    let out = tmp.path().join(name);
    let o = run_with(tmp, name, &small_config(method, &out, extra), &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn analyze(dir: &Path, layer: &str) -> Output {
    Command::new(BIN)
        .args(["analyze", "--dir"])
        .arg(dir)
        .args(["--layer", layer])
        .output()
        .unwrap()
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

/// Losses of the first task position, by step.
fn first_task_losses(trace: &str) -> Vec<(usize, String)> {
    trace
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|f| f[0] == "1")
        .map(|f| (f[2].parse().unwrap(), f[4].to_string()))
        .collect()
}

#[test]
fn run_writes_one_accuracy_table_per_seed_and_one_report() {
    let tmp = TempDir::new().unwrap();
    let dir = run_ok(
        &tmp,
        "three",
        "jumplora+inclora",
        "seeds = [42, 43, 44]\nisolated = false",
    );
    for seed in [42, 43, 44] {
        let acc = read(dir.join(format!("order1_seed{seed}/accuracy.csv")));
        assert!(acc.starts_with("row,task_index,accuracy\n"));
        assert!(dir.join(format!("order1_seed{seed}/masks/manifest.json")).exists());
    }
    let report = read(dir.join("report.txt"));
    assert!(report.contains("runs: 3"), "{report}");
    assert!(report.contains("fwt: NA"), "{report}");
    assert!(!dir.join("INCOMPLETE").exists());
}

#[test]
fn invalid_config_exits_nonzero_with_diagnostic() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("bad");
    let o = run_with(&tmp, "typo", &small_config("inclora", &out, "learning_rat = 0.1"), &[]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rat"));

    let o = run_with(
        &tmp,
        "grid",
        &small_config("inclora", &out, "ella_variant = \"sparse\""),
        &[],
    );
    assert!(!o.status.success());
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn gated_and_plain_traces_agree_until_interpolation_starts() {
    let tmp = TempDir::new().unwrap();
    let plain = run_ok(&tmp, "plain", "inclora", "isolated = false");
    let gated = run_ok(&tmp, "gated", "jumplora+inclora", "isolated = false");
    let a = first_task_losses(&read(plain.join("order1_seed42/trace.csv")));
    let b = first_task_losses(&read(gated.join("order1_seed42/trace.csv")));
    assert_eq!(a.len(), b.len());
    // 24 samples × 2 classes / batch 8 = 6 steps; S_start = ⌊0.2·6⌋ = 1.
    let total = a.len();
    let start = (0.2 * total as f64).floor() as usize;
    for (x, y) in a.iter().zip(&b) {
        if x.0 <= start {
            assert_eq!(x, y, "step {} differs before interpolation", x.0);
        }
    }
    assert!(
        a.iter().zip(&b).any(|(x, y)| x.0 > start && x.1 != y.1),
        "gating never changed the trajectory"
    );
}

#[test]
fn identical_configs_give_byte_identical_csvs() {
    let tmp = TempDir::new().unwrap();
    let a = run_ok(&tmp, "a", "jumplora+ella", "seeds = [42, 43]");
    let b = run_ok(&tmp, "b", "jumplora+ella", "seeds = [42, 43]");
    for f in [
        "metrics.csv",
        "bwt_series.csv",
        "order1_seed42/accuracy.csv",
        "order1_seed43/trace.csv",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn disabled_gating_analyzes_to_zero_sparsity() {
    let tmp = TempDir::new().unwrap();
    let dir = run_ok(&tmp, "dense", "jumplora+inclora", "gating = false\nisolated = false");
    let o = analyze(&dir, "all");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = read(dir.join("order1_seed42/analysis_all.csv"));
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert!(!rows.is_empty());
    for row in rows {
        assert_eq!(row.split(',').nth(2), Some("0"), "{row}");
    }
}

#[test]
fn analyze_is_idempotent() {
    let tmp = TempDir::new().unwrap();
    let dir = run_ok(&tmp, "idem", "jumplora+ella", "isolated = false");
    assert!(analyze(&dir, "middle").status.success());
    let first = fs::read(dir.join("order1_seed42/analysis_middle.csv")).unwrap();
    assert!(analyze(&dir, "middle").status.success());
    assert_eq!(first, fs::read(dir.join("order1_seed42/analysis_middle.csv")).unwrap());
}

#[test]
fn single_task_overlap_is_not_applicable() {
    let tmp = TempDir::new().unwrap();
    let dir = run_ok(&tmp, "one", "jumplora+inclora", "n_tasks = 1\nisolated = false");
    assert!(analyze(&dir, "block1.q").status.success());
    let table = read(dir.join("order1_seed42/analysis_block1.q.csv"));
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].ends_with(",NA"), "{}", rows[0]);
}

#[test]
fn analyze_without_masks_fails() {
    let tmp = TempDir::new().unwrap();
    let o = analyze(tmp.path(), "all");
    assert!(!o.status.success());
    assert!(!o.stderr.is_empty());
}

#[test]
fn output_root_override_applies_to_relative_dirs() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("root");
    let o = run_with(
        &tmp,
        "rel",
        &small_config("inclora", Path::new("relative/out"), "isolated = false"),
        &[("JUMPLORA_OUTPUT_ROOT", &root)],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(root.join("relative/out/report.txt").exists());
}

#[test]
fn gradcheck_passes_and_detects_perturbed_pseudo_derivative() {
    let clean = Command::new(BIN).arg("gradcheck").output().unwrap();
    assert_eq!(clean.status.code(), Some(0));
    let text = String::from_utf8_lossy(&clean.stdout);
    for op in [
        "matmul",
        "layer_norm",
        "attention",
        "cross_entropy",
        "jumprelu",
        "psi_casewise",
    ] {
        assert!(text.contains(op), "report lacks {op}");
    }
    assert!(text.contains("max_rel_error"));

    let broken = Command::new(BIN).args(["gradcheck", "--perturb-psi"]).output().unwrap();
    assert_eq!(broken.status.code(), Some(1));
}
