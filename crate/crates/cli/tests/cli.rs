use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn otc_lab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otc-lab"))
        .arg("--workdir")
        .arg(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

const SMALL: &[&str] = &[
    "--languages",
    "2",
    "--groups",
    "50",
    "--set",
    "test_groups_per_language=20",
];

#[test]
fn corpus_generation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let mut args = vec!["gen-corpus", "--out", out, "--seed", "3"];
        args.extend_from_slice(SMALL);
        ok(otc_lab(dir.path(), &args));
    }
    let (a, b) = (
        snapshot(&dir.path().join("a")),
        snapshot(&dir.path().join("b")),
    );
    assert!(a.contains_key(Path::new("train.jsonl")));
    assert_eq!(a, b);
}

#[test]
fn sweep_then_report_leaves_runs_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["gen-corpus"];
    args.extend_from_slice(SMALL);
    ok(otc_lab(dir.path(), &args));
    fs::write(
        dir.path().join("tiny.cfg"),
        "epochs = 1\nembed_dim = 8\nffn_dim = 16\n",
    )
    .unwrap();
    let sweep = [
        "sweep",
        "--config",
        "tiny.cfg",
        "--languages",
        "en,fr",
        "--otc",
        "both",
        "--seeds",
        "0,1,2",
    ];
    let stdout = ok(otc_lab(dir.path(), &sweep));
    assert!(stdout.contains("12 runs trained"), "{stdout}");
    let runs: Vec<_> = fs::read_dir(dir.path().join("sweep"))
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.path().is_dir())
        .collect();
    assert_eq!(runs.len(), 12);
    assert!(dir.path().join("sweep/manifest.json").is_file());
    assert!(ok(otc_lab(dir.path(), &sweep)).contains("0 runs trained, 12 already complete"));

    let before = snapshot(&dir.path().join("sweep"));
    let stdout = ok(otc_lab(dir.path(), &["report", "--out", "report"]));
    assert!(stdout.contains("sign-flip p ="), "{stdout}");
    assert_eq!(before, snapshot(&dir.path().join("sweep")));
    for f in [
        "table1.txt",
        "table2.csv",
        "table3.txt",
        "results.csv",
        "significance.json",
    ] {
        assert!(dir.path().join("report").join(f).is_file(), "{f}");
    }
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["gen-corpus"];
    args.extend_from_slice(SMALL);
    ok(otc_lab(dir.path(), &args));
    let stdout = ok(otc_lab(
        dir.path(),
        &[
            "train",
            "--out",
            "run",
            "--epochs",
            "1",
            "--set",
            "embed_dim=8",
            "--otc",
            "on",
        ],
    ));
    assert!(stdout.starts_with("trained 3 steps"), "{stdout}");
    for f in [
        "config.json",
        "metrics.csv",
        "model.json",
        "checkpoint_epoch_1.json",
    ] {
        assert!(dir.path().join("run").join(f).is_file(), "{f}");
    }
    let stdout = ok(otc_lab(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            "run",
            "--corpus",
            "corpus",
            "--original-language",
            "en",
            "--out",
            "m.json",
        ],
    ));
    assert!(
        stdout.contains("en\tf1_micro=") && stdout.contains("retrieval(en)"),
        "{stdout}"
    );
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(json["metrics"].as_array().unwrap().len(), 2);
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(otc_lab(dir.path(), &["grad-check"]));
    assert!(stdout.contains("PASS"), "{stdout}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| otc_lab(dir.path(), args).status.code();
    assert_eq!(code(&["train", "--bogus"]), Some(1));
    assert_eq!(
        code(&["train", "--corpus", "missing", "--epochs", "1"]),
        Some(2)
    );
    assert_eq!(code(&["train", "--set", "no_such_key=1"]), Some(1));
    assert_eq!(code(&["train", "--baseline", "--otc", "on"]), Some(1));
    assert_eq!(code(&["report", "--sweep", "nowhere"]), Some(2));
    assert_eq!(code(&["--help"]), Some(0));
}
