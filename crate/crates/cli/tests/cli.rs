use std::path::Path;
use std::process::{Command, Output};

fn ifqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ifqa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn help_lists_all_subcommands() {
    let o = ifqa(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for sub in ["synth", "degrade", "train", "assess", "eval", "study-serve"] {
        assert!(text.contains(sub), "missing {sub}");
    }
}

#[test]
fn version_names_the_checkpoint_format() {
    let o = ifqa(&["--version"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains(ifqa::FORMAT_VERSION));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(ifqa(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ifqa(&["synth"]).status.code(), Some(1));
    assert_eq!(ifqa(&["train", "--out", "x"]).status.code(), Some(1));
}

#[test]
fn validation_and_runtime_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "no_such_key = 3\n").unwrap();
    let o = ifqa(&["train", "--synth", "4", "--config", p(&cfg), "--out", p(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));

    let o = ifqa(&[
        "assess",
        "--in",
        p(dir.path()),
        "--ckpt",
        p(&dir.path().join("missing.json")),
        "--csv",
        p(&dir.path().join("out.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = Command::new(env!("CARGO_BIN_EXE_ifqa"))
        .args(["synth", "--out", p(&dir.path().join("s")), "--count", "1"])
        .env("IFQA_NUM_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn seeded_subcommands_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = ifqa(&["synth", "--out", p(d), "--count", "3", "--resolution", "32", "--seed", "5"]);
        assert!(o.status.success());
        let o = ifqa(&["degrade", "--in", p(d), "--out", p(&d.join("lq")), "--seed", "9"]);
        assert!(o.status.success());
    }
    assert_eq!(read_dir_bytes(&a.join("lq")), read_dir_bytes(&b.join("lq")));
    std::fs::remove_dir_all(a.join("lq")).unwrap();
    std::fs::remove_dir_all(b.join("lq")).unwrap();
    assert_eq!(read_dir_bytes(&a), read_dir_bytes(&b));
}

#[test]
fn pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let lq = root.join("lq");
    let run = root.join("run");

    let o = ifqa(&["synth", "--out", p(&data), "--count", "6", "--resolution", "32", "--seed", "1"]);
    assert!(o.status.success());
    let o = ifqa(&["degrade", "--in", p(&data), "--out", p(&lq), "--seed", "2"]);
    assert!(o.status.success());
    assert!(lq.join("manifest.jsonl").exists());

    let cfg = root.join("smoke.toml");
    std::fs::write(&cfg, "resolution = 32\nsteps = 3\nbatch_size = 2\ncheckpoint_every = 2\n").unwrap();
    let o = ifqa(&[
        "train",
        "--data",
        p(&data),
        "--config",
        p(&cfg),
        "--out",
        p(&run),
        "--dump-fprs",
        p(&root.join("dump")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = run.join("final.json");
    assert!(ckpt.exists());
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 3);

    for (name, input) in [("hq", &data), ("lq", &lq)] {
        let csv = root.join(format!("{name}.csv"));
        let o = ifqa(&[
            "assess",
            "--in",
            p(input),
            "--ckpt",
            p(&ckpt),
            "--csv",
            p(&csv),
            "--maps",
            p(&root.join(format!("maps_{name}"))),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("# polarity: higher\n# resolution: 32\nid,qs\n"));
        assert_eq!(text.lines().filter(|l| l.starts_with("synth_1_")).count(), 6);
    }

    let ids: Vec<String> = (0..6).map(|i| format!("\"synth_1_{i:05}\"")).collect();
    let fwd = ids.join(",");
    let rev = ids.iter().rev().cloned().collect::<Vec<_>>().join(",");
    let human = root.join("responses.jsonl");
    std::fs::write(
        &human,
        format!(
            "{{\"sample_id\":\"s1\",\"rater_id\":\"a\",\"ordering\":[{fwd}]}}\n{{\"sample_id\":\"s1\",\"rater_id\":\"b\",\"ordering\":[{rev}]}}\n{{\"sample_id\":\"s1\",\"rater_id\":\"c\",\"ordering\":[{fwd}]}}\n"
        ),
    )
    .unwrap();
    let table = root.join("table.csv");
    let o = ifqa(&[
        "eval",
        "--human",
        p(&human),
        "--scores",
        p(&root.join("hq.csv")),
        "--scores",
        p(&root.join("lq.csv")),
        "--out",
        p(&table),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("SRCC") && text.contains("hq") && text.contains("lq"));
    assert!(std::fs::read_to_string(&table).unwrap().starts_with("metric,srcc,krcc,samples,excluded\n"));
}

#[test]
fn eval_without_usable_rankings_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let human = dir.path().join("h.jsonl");
    std::fs::write(&human, "garbage\n").unwrap();
    let scores = dir.path().join("m.csv");
    std::fs::write(&scores, "# polarity: higher\nid,qs\na,1\n").unwrap();
    let o = ifqa(&["eval", "--human", p(&human), "--scores", p(&scores)]);
    assert_eq!(o.status.code(), Some(1));
}
