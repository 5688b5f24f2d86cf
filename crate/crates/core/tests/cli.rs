use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn assignflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_assignflow"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = assignflow(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn synth(dir: &Path, size: &str, labels: &str, seed: &str) {
    ok(&[
        "synth",
        "--size",
        size,
        "--labels",
        labels,
        "--seed",
        seed,
        "--noise",
        "0.2",
        "--out",
        dir.to_str().unwrap(),
    ]);
}

fn labels(path: &Path) -> Vec<usize> {
    fs::read_to_string(path)
        .unwrap()
        .split([',', '\n'])
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().unwrap())
        .collect()
}

fn run_mode(dir: &Path, mode: &str, extra: &[&str]) -> std::path::PathBuf {
    let out = dir.join(mode);
    let image = dir.join("noisy.ppm");
    let protos = dir.join("prototypes.csv");
    let mut args = vec![
        "run",
        "--mode",
        mode,
        "--image",
        image.to_str().unwrap(),
        "--prototypes",
        protos.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

#[test]
fn synth_writes_all_outputs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth(&a, "20x24", "4", "9");
    synth(&b, "20x24", "4", "9");
    for f in ["truth.ppm", "noisy.ppm", "prototypes.csv", "truth_labels.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(a.join("manifest.txt").exists());
    let truth = fs::read_to_string(a.join("truth_labels.csv")).unwrap();
    assert_eq!(truth.lines().count(), 20);
    assert!(truth.lines().all(|l| l.split(',').count() == 24));
    assert!(fs::read(a.join("noisy.ppm")).unwrap().starts_with(b"P6"));
}

#[test]
fn synth_rejects_fewer_than_two_labels() {
    let dir = tempfile::tempdir().unwrap();
    let out = assignflow(&[
        "synth",
        "--size",
        "8x8",
        "--labels",
        "1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn run_reports_missing_prototypes() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "8x8", "3", "1");
    let image = dir.path().join("noisy.ppm");
    let out = assignflow(&[
        "run",
        "--mode",
        "af",
        "--image",
        image.to_str().unwrap(),
        "--prototypes",
        dir.path().join("missing.csv").to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));
}

#[test]
fn assignment_flow_and_s_flow_agree() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "32x32", "4", "5");
    let af = run_mode(dir.path(), "af", &[]);
    let sf = run_mode(dir.path(), "sflow", &[]);
    let (a, s) = (labels(&af.join("labels.csv")), labels(&sf.join("labels.csv")));
    assert_eq!(a.len(), 1024);
    let agree = a.iter().zip(&s).filter(|(x, y)| x == y).count() as f64 / a.len() as f64;
    assert!(agree >= 0.99, "agreement {agree}");
    let truth = labels(&dir.path().join("truth_labels.csv"));
    let err = a.iter().zip(&truth).filter(|(x, y)| x != y).count() as f64 / a.len() as f64;
    assert!(err < 0.05, "error {err}");
    for f in [
        "trace.csv",
        "solution.bin",
        "labeling.ppm",
        "summary.txt",
        "manifest.txt",
    ] {
        assert!(af.join(f).exists(), "{f}");
    }
    let trace = fs::read_to_string(af.join("trace.csv")).unwrap();
    assert!(trace.starts_with("t,J,mean_entropy,min_entry\n"));
}

#[test]
fn pde_mode_trace_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "12x12", "3", "2");
    let out = run_mode(dir.path(), "pde", &["--max-outer", "20", "--threads", "2"]);
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(
        lines.next(),
        Some("k,surrogate_objective,E_alpha,max_row_change,feasibility_violation")
    );
    let obj: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(!obj.is_empty());
    assert!(obj.windows(2).all(|p| p[1] <= p[0] + 1e-9));
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.starts_with("mode=pde\niterations=20\n"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.cfg");
    fs::write(&cfg, "size=6x7\nlabels=3\nseed=4\nnoise=0.1\n").unwrap();
    let out = dir.path().join("o");
    ok(&[
        "--config",
        cfg.to_str().unwrap(),
        "synth",
        "--size",
        "5x9",
        "--out",
        out.to_str().unwrap(),
    ]);
    let truth = fs::read_to_string(out.join("truth_labels.csv")).unwrap();
    assert_eq!(truth.lines().count(), 5);
    assert_eq!(truth.lines().next().unwrap().split(',').count(), 9);
    assert_eq!(
        fs::read_to_string(out.join("prototypes.csv"))
            .unwrap()
            .lines()
            .filter(|l| !l.is_empty())
            .count(),
        3
    );
}

#[test]
fn verify_passes() {
    let out = ok(&["verify", "--draws", "200", "--probes", "5"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PASS"));
    assert!(!text.contains("FAIL"));
}
