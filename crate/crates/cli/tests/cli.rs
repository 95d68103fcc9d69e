use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scenflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
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

fn lines(p: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn synth(dir: &Path, kind: &str, n: usize, len: usize, seed: u64) -> PathBuf {
    ok(&[
        "synth-data",
        "--kind",
        kind,
        "--n",
        &n.to_string(),
        "--len",
        &len.to_string(),
        "--seed",
        &seed.to_string(),
        "-o",
        s(dir),
    ]);
    dir.join("dataset.ndjson")
}

const TINY_NET: &str = r#"
[train.net]
seq_len = 16
base_channels = 4
channel_multipliers = [1, 2]
groups = 2
d_llm = 64
d_k = 4
attention_levels = [1]
"#;

#[test]
fn synth_data_writes_valid_reproducible_records() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(&tmp.path().join("a"), "pv", 100, 64, 5);
    let b = synth(&tmp.path().join("b"), "pv", 100, 64, 5);
    let recs = lines(&a);
    assert_eq!(recs.len(), 100);
    for r in &recs {
        let series = r["series"].as_array().unwrap();
        assert_eq!(series.len(), 64);
        assert!(series
            .iter()
            .all(|v| (0.0..=1.0).contains(&v.as_f64().unwrap())));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let labels = std::fs::read_to_string(tmp.path().join("a/labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 101);
    assert!(labels.starts_with("id,kind,weather,peak"));
    let snap = std::fs::read_to_string(tmp.path().join("a/resolved_config.toml")).unwrap();
    assert!(snap.contains("version = \"0.1.0\""));
    assert!(snap.contains("seed = 5"));
}

#[test]
fn snapshot_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let first = synth(&tmp.path().join("first"), "load", 20, 32, 11);
    let snap = tmp.path().join("first/resolved_config.toml");
    let again = tmp.path().join("again");
    ok(&["synth-data", "--config", s(&snap), "-o", s(&again)]);
    assert_eq!(
        std::fs::read(first).unwrap(),
        std::fs::read(again.join("dataset.ndjson")).unwrap()
    );
}

#[test]
fn indivisible_length_warns() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["synth-data", "--n", "3", "--len", "63", "-o", s(tmp.path())]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("WARN") && err.contains("not divisible by 8"),
        "{err}"
    );
}

#[test]
fn eval_of_a_set_against_itself_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(&tmp.path().join("d"), "pv", 30, 64, 1);
    let out = tmp.path().join("e");
    ok(&[
        "eval",
        "--real",
        s(&data),
        "--generated",
        s(&data),
        "-o",
        s(&out),
    ]);
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut rows = csv.lines();
    assert_eq!(rows.next().unwrap(), "kl,mmd2,fd,dtw_mean,psdd,marr_mean");
    let row: Vec<f64> = rows
        .next()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    for v in &row[..5] {
        assert!(v.abs() < 1e-9, "{row:?}");
    }
    assert!(row[5] > 0.0);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(json["kl"].as_f64().unwrap(), row[0]);
}

#[test]
fn probe_on_one_hot_embeddings() {
    let tmp = tempfile::tempdir().unwrap();
    let emb = tmp.path().join("emb.ndjson");
    let labels = tmp.path().join("labels.csv");
    let mut e = String::new();
    let mut l = String::from("id,weather\n");
    for i in 0..60 {
        let c = i % 3;
        let data: Vec<f64> = (0..3).map(|j| if j == c { 1.0 } else { 0.0 }).collect();
        e.push_str(&format!(
            "{{\"id\":\"s{i}\",\"m\":1,\"d\":3,\"data\":{}}}\n",
            serde_json::to_string(&data).unwrap()
        ));
        l.push_str(&format!("s{i},w{c}\n"));
    }
    std::fs::write(&emb, e).unwrap();
    std::fs::write(&labels, l).unwrap();
    let out = tmp.path().join("p");
    ok(&[
        "probe",
        "--embeddings",
        s(&emb),
        "--labels",
        s(&labels),
        "-o",
        s(&out),
    ]);
    let csv = std::fs::read_to_string(out.join("probe.csv")).unwrap();
    assert_eq!(csv, "attribute,task,score\nweather,classification,1\n");
}

#[test]
fn judge_scores_generator_records_five() {
    let tmp = tempfile::tempdir().unwrap();
    for kind in ["pv", "load"] {
        let data = synth(&tmp.path().join(kind), kind, 40, 64, 2);
        let out = tmp.path().join(format!("j-{kind}"));
        ok(&["judge", "--generated", s(&data), "-o", s(&out)]);
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("judge_summary.json")).unwrap())
                .unwrap();
        assert_eq!(summary["mjas"].as_f64().unwrap(), 5.0);
        assert_eq!(summary["count"].as_u64().unwrap(), 40);
        let verdicts = lines(&out.join("verdicts.ndjson"));
        assert!(verdicts
            .iter()
            .all(|v| v["score"] == 5 && v["justification"].is_string()));
    }
}

fn train_args<'a>(cfg: &'a Path, data: &'a Path, out: &'a Path, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "train",
        "--config",
        s(cfg),
        "--dataset",
        s(data),
        "--batch-size",
        "16",
        "--optimizer",
        "adamw",
        "--learning-rate",
        "3e-3",
        "-o",
        s(out),
    ];
    v.extend_from_slice(extra);
    v
}

fn loss_rows(dir: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(dir.join("loss.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn train_sample_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("net.toml");
    std::fs::write(&cfg, TINY_NET).unwrap();
    let data = synth(&tmp.path().join("d"), "pv", 64, 16, 3);

    let on = tmp.path().join("on");
    ok(&train_args(&cfg, &data, &on, &["--epochs", "20"]));
    let rows = loss_rows(&on);
    assert_eq!(rows.len(), 80);
    assert_eq!(rows[0][0], "0");
    let l_time: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    let head: f64 = l_time[..10].iter().sum();
    let tail: f64 = l_time[70..].iter().sum();
    assert!(tail < head, "{head} {tail}");
    for r in &rows {
        let a: f64 = r[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&a));
    }

    let off = tmp.path().join("off");
    ok(&train_args(
        &cfg,
        &data,
        &off,
        &["--epochs", "1", "--mgda", "false"],
    ));
    assert!(loss_rows(&off).iter().all(|r| r[3].is_empty()));

    let resumed = tmp.path().join("resumed");
    let ck = on.join("checkpoint.bin");
    ok(&train_args(
        &cfg,
        &data,
        &resumed,
        &["--epochs", "22", "--resume", s(&ck)],
    ));
    let rows = loss_rows(&resumed);
    assert_eq!(rows.len(), 8);
    assert_eq!(rows[0][0], "80");

    for steps in ["5", "50"] {
        let out = tmp.path().join(format!("sample{steps}"));
        ok(&[
            "sample",
            "--checkpoint",
            s(&ck),
            "--prompts",
            s(&data),
            "--samples-per-prompt",
            "2",
            "--steps",
            steps,
            "-o",
            s(&out),
        ]);
        let recs = lines(&out.join("generated.ndjson"));
        assert_eq!(recs.len(), 128);
        assert!(recs
            .iter()
            .all(|r| r["steps"].as_u64().unwrap().to_string() == steps));
        assert_eq!(recs[1]["prompt_id"], "pv-000000");
        assert_eq!(recs[1]["sample_index"], 1);

        let judged = tmp.path().join(format!("judge{steps}"));
        ok(&[
            "judge",
            "--generated",
            s(&out.join("generated.ndjson")),
            "--dataset",
            s(&data),
            "-o",
            s(&judged),
        ]);
    }

    let emb = tmp.path().join("partial.ndjson");
    std::fs::write(
        &emb,
        "{\"id\":\"pv-000000\",\"m\":1,\"d\":64,\"data\":[".to_string()
            + &vec!["0.0"; 64].join(",")
            + "]}\n",
    )
    .unwrap();
    let out = run(&[
        "sample",
        "--checkpoint",
        s(&ck),
        "--prompts",
        s(&data),
        "--embeddings",
        s(&emb),
        "-o",
        s(&tmp.path().join("missing")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pv-000001"));
}

#[test]
fn divergent_training_exits_with_numeric_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("net.toml");
    std::fs::write(&cfg, TINY_NET).unwrap();
    let data = synth(&tmp.path().join("d"), "pv", 16, 16, 3);
    let out = tmp.path().join("t");
    let mut args = train_args(&cfg, &data, &out, &["--epochs", "50"]);
    let lr = args.iter().position(|a| *a == "3e-3").unwrap();
    args[lr] = "1e300";
    let res = run(&args);
    assert_eq!(
        res.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert!(String::from_utf8_lossy(&res.stderr).contains("step"));
}

#[test]
fn validation_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["train", "-o", s(tmp.path())]).status.code(), Some(1));
    assert_eq!(
        run(&["synth-data", "--kind", "wind"]).status.code(),
        Some(1)
    );
    assert_eq!(
        run(&["synth-data", "--n", "0", "-o", s(tmp.path())])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(run(&["--version"]).status.code(), Some(0));
}

#[test]
fn annotate_never_overwrites_its_input() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "pv", 5, 64, 0);
    let before = std::fs::read(&data).unwrap();
    let res = run(&["annotate", "--input", s(&data), "-o", s(tmp.path())]);
    assert_eq!(res.status.code(), Some(1));
    assert_eq!(std::fs::read(&data).unwrap(), before);

    let out = tmp.path().join("annotated");
    ok(&["annotate", "--input", s(&data), "-o", s(&out)]);
    assert_eq!(std::fs::read(&data).unwrap(), before);
    let recs = lines(&out.join("dataset.ndjson"));
    assert!(recs
        .iter()
        .all(|r| r["prompt"].as_str().unwrap().ends_with('.')));
    assert_eq!(lines(&out.join("embeddings.ndjson")).len(), 5);
}
