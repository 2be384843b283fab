use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fcnmt(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fcnmt"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &[&str] = &[
    "--task",
    "map",
    "--train-size",
    "120",
    "--dev-size",
    "12",
    "--test-size",
    "12",
    "--d-model",
    "16",
    "--d-ffn",
    "32",
    "--n-layers",
    "1",
    "--batch-size",
    "16",
    "--warmup-steps",
    "4",
    "--validate-every",
    "4",
    "--steps",
    "8",
];

fn train_small(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--output-dir", out];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    fcnmt(&args, dir)
}

#[test]
fn train_translate_evaluate_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = train_small(d, "run", &["--variant", "model2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "best.ckpt",
        "last.ckpt",
        "metrics.tsv",
        "config.txt",
        "eval.txt",
    ] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(d.join("run/metrics.tsv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 4, "{metrics}");
    assert!(lines[0].starts_with("step\tlr\t"));
    assert!(lines.iter().all(|l| l.split('\t').count() == 10));

    fs::write(d.join("in.txt"), "a b c\n\nd e\nzz top\n").unwrap();
    let translate = |extra: &[&str], out: &str| {
        let mut args = vec![
            "translate",
            "--checkpoint",
            "run/best.ckpt",
            "--input",
            "in.txt",
            "--output",
            out,
        ];
        args.extend_from_slice(extra);
        fcnmt(&args, d)
    };
    let o = translate(&["--greedy"], "greedy.txt");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(
        stderr(&o).contains("warning: 2 source tokens"),
        "{}",
        stderr(&o)
    );
    let o = translate(&["--beam-size", "1"], "beam1.txt");
    assert!(o.status.success());
    let greedy = fs::read(d.join("greedy.txt")).unwrap();
    assert_eq!(greedy, fs::read(d.join("beam1.txt")).unwrap());
    let text = String::from_utf8(greedy).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert_eq!(text.lines().nth(1), Some(""));

    let o = translate(&["--beam-size", "3", "--trace", "trace.txt"], "beam3.txt");
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = fs::read_to_string(d.join("trace.txt")).unwrap();
    assert_eq!(
        trace.lines().filter(|l| l.starts_with("# line ")).count(),
        3
    );

    let o = fcnmt(
        &[
            "evaluate",
            "--hyp",
            "beam3.txt",
            "--ref",
            "beam3.txt",
            "--src",
            "in.txt",
            "--report",
            "r.txt",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(d.join("r.txt")).unwrap();
    assert!(report.contains("bucket.0-10.count = 4"), "{report}");
    assert!(report.contains("bucket.50-inf.bleu = null"));
}

#[test]
fn identical_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = train_small(dir.path(), out, &["--variant", "model1", "--seed", "7"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = fs::read(dir.path().join("a/metrics.tsv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/metrics.tsv")).unwrap());
    assert_eq!(
        fs::read(dir.path().join("a/best.ckpt")).unwrap(),
        fs::read(dir.path().join("b/best.ckpt")).unwrap()
    );
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.cfg"),
        "# test\nd_model = 32\nseed = 3\nvariant = model1\n",
    )
    .unwrap();
    let o = fcnmt(
        &["show-config", "--config", "run.cfg", "--seed", "5"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("d_model = 32\n"));
    assert!(text.contains("seed = 5\n"));
    assert!(text.contains("variant = model1\n"));
}

#[test]
fn errors_are_single_line_with_a_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let check = |o: Output, class: &str| {
        assert!(!o.status.success());
        let e = stderr(&o);
        assert_eq!(e.lines().count(), 1, "{e}");
        assert!(e.starts_with(&format!("error[{class}]: ")), "{e}");
        e
    };
    check(
        fcnmt(
            &[
                "train",
                "--variant",
                "baseline",
                "--lambda",
                "0.5",
                "--task",
                "map",
            ],
            d,
        ),
        "config",
    );
    check(
        fcnmt(&["train", "--task", "map", "--d-model", "7"], d),
        "config",
    );
    check(fcnmt(&["train", "--task", "sort"], d), "config");

    fs::write(d.join("h.txt"), "a b\nc d\n").unwrap();
    fs::write(d.join("r.txt"), "a b\n").unwrap();
    let e = check(
        fcnmt(&["evaluate", "--hyp", "h.txt", "--ref", "r.txt"], d),
        "input",
    );
    assert!(e.contains('2') && e.contains('1'), "{e}");

    fs::write(d.join("bad.ckpt"), b"fcnmt-checkpoint 1\nvariant model2\n").unwrap();
    fs::write(d.join("in.txt"), "a\n").unwrap();
    let args = [
        "translate",
        "--checkpoint",
        "bad.ckpt",
        "--input",
        "in.txt",
        "--output",
        "o.txt",
    ];
    check(fcnmt(&args, d), "checkpoint");
    assert!(!d.join("o.txt").exists());
}

#[test]
fn empty_input_gives_empty_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = train_small(d, "run", &["--variant", "baseline", "--steps", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    fs::write(d.join("empty.txt"), "").unwrap();
    let o = fcnmt(
        &[
            "translate",
            "--checkpoint",
            "run/last.ckpt",
            "--input",
            "empty.txt",
            "--output",
            "out.txt",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(d.join("out.txt")).unwrap(), b"");
}

#[test]
fn hyp_equal_to_ref_scores_100() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("x.txt"),
        "the quick brown fox jumps\nover the lazy dog today\n",
    )
    .unwrap();
    let o = fcnmt(&["evaluate", "--hyp", "x.txt", "--ref", "x.txt"], d);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("BLEU = 100.00,"));
}

#[test]
fn generate_writes_three_corpora() {
    let dir = tempfile::tempdir().unwrap();
    let o = fcnmt(
        &[
            "generate",
            "--task",
            "reverse",
            "--train-size",
            "5",
            "--output-dir",
            "data",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let train = fs::read_to_string(dir.path().join("data/train.tsv")).unwrap();
    assert_eq!(train.lines().count(), 5);
    for line in train.lines() {
        let (s, t) = line.split_once('\t').unwrap();
        let rev: Vec<&str> = s.split(' ').rev().collect();
        assert_eq!(rev.join(" "), t);
    }
}
