use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &["--layers", "4", "--hidden", "8", "--heads", "2", "--ff-dim", "16"];

fn ftlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ftlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ftlab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Pretrains a tiny encoder into `dir` and returns the checkpoint path.
fn tiny_pretrained(dir: &Path, steps: &str) -> PathBuf {
    let mut args = vec!["pretrain", "--synth", "--synth-examples", "200", "--steps", steps, "--out", s(dir)];
    args.extend_from_slice(TINY);
    ok(&args);
    dir.join("pretrained.ftlb")
}

fn finetune_args<'a>(ckpt: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "finetune", "--pretrained", ckpt, "--synth", "--synth-examples", "60", "--epochs", "1", "--out", out,
    ]
}

#[test]
fn pretraining_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ca = tiny_pretrained(a.path(), "10");
    let cb = tiny_pretrained(b.path(), "10");
    assert_eq!(std::fs::read(ca).unwrap(), std::fs::read(cb).unwrap());
    assert!(a.path().join("manifest.txt").exists());
}

#[test]
fn zero_steps_still_writes_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_pretrained(dir.path(), "0");
    assert!(std::fs::metadata(ck).unwrap().len() > 0);
}

#[test]
fn finetune_reports_group_rates() {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_pretrained(dir.path(), "0");
    let out_dir = dir.path().join("ft");
    let mut args = finetune_args(s(&ck), s(&out_dir));
    args.extend(["--llrd", "4group"]);
    let out = ok(&args);
    let table = String::from_utf8(out.stdout).unwrap();
    let header: Vec<&str> = table.lines().next().unwrap().split('|').map(str::trim).collect();
    assert_eq!(header, ["Model", "Precision", "Recall", "Accuracy", "F-Score"]);
    let manifest = std::fs::read_to_string(out_dir.join("manifest.txt")).unwrap();
    for want in ["1.1538e-5", "3.0000e-5", "7.8000e-5", "3.0000e-4"] {
        assert!(manifest.contains(want), "missing {want} in\n{manifest}");
    }
    for f in ["finetuned.ftlb", "history.csv", "results.csv"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let history = std::fs::read_to_string(out_dir.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
}

#[test]
fn incompatible_pooling_and_reinit_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_pretrained(dir.path(), "0");
    let out_dir = dir.path().join("ft");
    let mut args = finetune_args(s(&ck), s(&out_dir));
    args.extend(["--pool", "avg4", "--reinit", "1"]);
    let out = ftlab(&args);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn bad_flags_exit_2() {
    assert_eq!(ftlab(&["finetune", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(ftlab(&["--help"]).status.code(), Some(0));
}

#[test]
fn grid_rows_match_the_cross_product() {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_pretrained(dir.path(), "0");
    let lr_dir = dir.path().join("lr");
    let mut args = finetune_args(s(&ck), s(&lr_dir));
    args[0] = "grid";
    let out = ok(&args);
    let table = String::from_utf8(out.stdout).unwrap();
    let csv = std::fs::read_to_string(lr_dir.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count() - 1, 3);
    assert_eq!(table.lines().count() - 2, 3, "{table}");

    let full_dir = dir.path().join("full");
    let mut args = finetune_args(s(&ck), s(&full_dir));
    args[0] = "grid";
    args.extend(["--axes", "lr,mixout,reinit"]);
    ok(&args);
    let csv = std::fs::read_to_string(full_dir.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count() - 1, 36);
    let txt = std::fs::read_to_string(full_dir.join("results.txt")).unwrap();
    assert_eq!(txt.lines().count() - 2, 36);

    let mut args = finetune_args(s(&ck), s(&full_dir));
    args[0] = "grid";
    args.extend(["--axes", ""]);
    assert_eq!(ftlab(&args).status.code(), Some(2));
}

#[test]
fn variance_seed_rules() {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_pretrained(dir.path(), "0");
    let out_dir = dir.path().join("var");
    let mut args = finetune_args(s(&ck), s(&out_dir));
    args[0] = "variance";
    let mut one = args.clone();
    one.extend(["--seeds", "3"]);
    assert_eq!(ftlab(&one).status.code(), Some(2));

    args.extend(["--seeds", "3,3", "--strategy", "baseline", "--strategy", "llrd=4group,mixout=0.5"]);
    let out = ok(&args);
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().count() - 2, 2);
    assert!(table.contains("± 0.00"), "{table}");
}

#[test]
fn config_file_sets_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_pretrained(dir.path(), "0");
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "# toy run\nllrd=2group\nlr=2e-5\n").unwrap();
    let out_dir = dir.path().join("cfg");
    let mut args = finetune_args(s(&ck), s(&out_dir));
    args.extend(["--config", s(&cfg), "--lr", "4e-5"]);
    ok(&args);
    let manifest = std::fs::read_to_string(out_dir.join("manifest.txt")).unwrap();
    assert!(manifest.contains("llrd=2group"), "{manifest}");
    assert!(manifest.contains("lr=0.00004"), "{manifest}");
    assert!(manifest.contains("4.0000e-4"), "{manifest}");
}

#[test]
fn corrupt_checkpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_pretrained(dir.path(), "0");
    let mut bytes = std::fs::read(&ck).unwrap();
    bytes.truncate(bytes.len() / 2);
    let bad = dir.path().join("bad.ftlb");
    std::fs::write(&bad, bytes).unwrap();
    let out_dir = dir.path().join("ft");
    let out = ftlab(&finetune_args(s(&bad), s(&out_dir)));
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("at byte"), "{err}");
}

#[test]
fn missing_data_file_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_pretrained(dir.path(), "0");
    let out = ftlab(&["finetune", "--pretrained", s(&ck), "--data", "/nonexistent.tsv", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn report_renders_results() {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_pretrained(dir.path(), "0");
    let out_dir = dir.path().join("ft");
    let first = ok(&finetune_args(s(&ck), s(&out_dir)));
    let again = ok(&["report", "--input", s(&out_dir.join("results.csv"))]);
    assert_eq!(first.stdout, again.stdout);
}

#[test]
fn tsv_corpus_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_pretrained(dir.path(), "0");
    let mut tsv = String::from("post\tclass\n");
    for i in 0..30 {
        let label = ["not_hate", "implicit_hate", "explicit_hate"][i % 3];
        tsv.push_str(&format!("w{} w{} w1\t{label}\n", i % 7, i % 3));
    }
    let path = dir.path().join("corpus.tsv");
    std::fs::write(&path, tsv).unwrap();
    let out = ok(&[
        "finetune", "--pretrained", s(&ck), "--data", s(&path), "--text-column", "post", "--label-column", "class",
        "--epochs", "1", "--out", s(&dir.path().join("tsv")),
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("skipped 10"));
}
