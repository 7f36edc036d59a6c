use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

fn irm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_irm"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn read_lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Ten grounded records: two with clock-time answers and one "where" question.
fn write_source(dir: &Path) -> PathBuf {
    let mut lines = Vec::new();
    for i in 0..10 {
        let (question, answer) = match i {
            2 => ("Why did the boy stop?".to_string(), "at 15 seconds".to_string()),
            5 => ("What happens next?".to_string(), "from 0:10 to 0:20".to_string()),
            7 => ("Where did the boy go?".to_string(), "to the bars".to_string()),
            _ => (format!("Why did person {i} climb?"), format!("to reach bar {i}")),
        };
        lines.push(json!({
            "id": format!("src-{i}"),
            "video_id": format!("video-{i}"),
            "duration": 60.0,
            "question": question,
            "answer": answer,
            "options": [answer.clone(), "walk away", "sit down", "wave"],
            "answer_index": 0,
            "grounded_spans": [[10.0 + i as f64, 20.0 + i as f64]],
            "context": [
                {"question": "What did the boy do first?", "answer": "walked to the pole", "span": [0.0, 4.0]},
                {"question": "Why did the boy wave?", "answer": "greet a friend", "span": [40.0, 50.0]}
            ]
        }));
    }
    let path = dir.join("source.jsonl");
    std::fs::write(&path, lines.iter().map(|l| l.to_string() + "\n").collect::<String>()).unwrap();
    path
}

#[test]
fn build_dataset_filters_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let source = write_source(dir.path());
    let out = dir.path().join("out");
    let run = irm(&out, &["build-dataset", "--source", p(&source), "--seed", "11"]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    assert_eq!(read_lines(&out.join("dataset.jsonl")).len(), 7);
    let excluded = read_lines(&out.join("exclusions.jsonl"));
    let reasons: Vec<&str> = excluded.iter().map(|e| e["reason"].as_str().unwrap()).collect();
    assert_eq!(reasons, vec!["temporal_answer", "temporal_answer", "wh_insufficient"]);
    let stats = read_json(&out.join("stats.json"));
    assert_eq!(stats["report"]["item_count"], 7);
    assert_eq!(stats["run"]["seed"], 11);
    assert_eq!(stats["run"]["config"]["dataset"]["sigma"], 20.0);
    let meta = read_json(&out.join("dataset.jsonl.meta.json"));
    assert_eq!(meta["run"]["command"], "build-dataset");
    assert!(out.join("stats/duration.svg").is_file());
}

#[test]
fn smaller_sigma_masks_a_superset() {
    let dir = tempfile::tempdir().unwrap();
    let source = write_source(dir.path());
    let (a, b) = (dir.path().join("s20"), dir.path().join("s10"));
    assert_eq!(code(&irm(&a, &["build-dataset", "--source", p(&source)])), 0);
    assert_eq!(code(&irm(&b, &["build-dataset", "--source", p(&source), "--sigma", "10"])), 0);
    let wide = read_lines(&b.join("dataset.jsonl"));
    for (narrow, wide) in read_lines(&a.join("dataset.jsonl")).iter().zip(&wide) {
        let (n, w) = (&narrow["excluded_spans"][0], &wide["excluded_spans"][0]);
        assert!(w[0].as_f64() <= n[0].as_f64() && w[1].as_f64() >= n[1].as_f64());
        assert_ne!(n, w);
    }
}

#[test]
fn empty_or_missing_source_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(code(&irm(dir.path(), &["build-dataset", "--source", p(&empty)])), 2);
    assert_eq!(code(&irm(dir.path(), &["build-dataset", "--source", "/nonexistent/x.jsonl"])), 2);
    assert_eq!(code(&irm(dir.path(), &["stats", "--dataset", "/nonexistent/x.jsonl"])), 2);
    assert_eq!(code(&irm(dir.path(), &["no-such-command"])), 2);
}

#[test]
fn bad_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[dataset]\nsigma = -1.0\n").unwrap();
    let run = irm(dir.path(), &["--config", p(&cfg), "build-dataset", "--synthetic", "3"]);
    assert_eq!(code(&run), 2, "{}", stderr(&run));
    std::fs::write(&cfg, "[backend]\nkind = \"remote\"\n").unwrap();
    assert_eq!(code(&irm(dir.path(), &["--config", p(&cfg), "build-dataset", "--synthetic", "3"])), 2);
}

#[test]
fn smoke_inference_is_deterministic_and_fast() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&irm(&data, &["build-dataset", "--synthetic", "20"])), 0);
    let dataset = data.join("dataset.jsonl");
    let start = Instant::now();
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let r = irm(&out, &["infer", "--dataset", p(&dataset), "--iterations", "2"]);
        assert_eq!(code(&r), 0, "{}", stderr(&r));
        files.push(std::fs::read(out.join("predictions.jsonl")).unwrap());
    }
    assert!(start.elapsed() < Duration::from_secs(60), "two runs took {:?}", start.elapsed());
    assert_eq!(files[0], files[1]);
    let summary = read_json(&dir.path().join("a/predictions_summary.json"));
    assert_eq!(summary["report"]["items"], 20);
    assert_eq!(summary["report"]["iterations"], 2);

    let eval_dir = dir.path().join("eval");
    let r = irm(&eval_dir, &["evaluate", "--predictions", p(&dir.path().join("a/predictions.jsonl"))]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let report = read_json(&eval_dir.join("evaluation.json"));
    assert!(report["report"]["multi_choice_accuracy"].is_number());
}

#[test]
fn iteration_count_changes_only_refinement_traces() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&irm(&data, &["build-dataset", "--synthetic", "4"])), 0);
    let dataset = data.join("dataset.jsonl");
    for k in ["0", "2"] {
        let out = dir.path().join(format!("k{k}"));
        assert_eq!(code(&irm(&out, &["infer", "--dataset", p(&dataset), "--iterations", k])), 0);
    }
    let t0 = read_lines(&dir.path().join("k0/predictions_traces.jsonl"));
    let t2 = read_lines(&dir.path().join("k2/predictions_traces.jsonl"));
    for (a, b) in t0.iter().zip(&t2) {
        assert_eq!(a["iterations"].as_array().unwrap().len(), 1);
        assert_eq!(b["iterations"].as_array().unwrap().len(), 3);
        assert_eq!(a["item_id"], b["item_id"]);
    }
}

#[test]
fn generated_clue_file_feeds_inference() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&irm(&data, &["build-dataset", "--synthetic", "3"])), 0);
    let dataset = data.join("dataset.jsonl");
    let clues_dir = dir.path().join("clues");
    let r = irm(&clues_dir, &["generate-clues", "--dataset", p(&dataset)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let clues = clues_dir.join("clues.jsonl");
    let records = read_lines(&clues);
    assert_eq!(records.len(), 3);
    let out = dir.path().join("infer");
    let r = irm(&out, &["infer", "--dataset", p(&dataset), "--clues", p(&clues)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let traces = read_lines(&out.join("predictions_traces.jsonl"));
    let first_action = &traces[0]["clues"][0]["action"];
    assert_eq!(first_action, &records[0]["candidates"][0]["action"]);
    assert_eq!(read_json(&out.join("predictions_summary.json"))["report"]["clue_source"], "external");
}

const TOY_CONFIG: &str = "
[model]
d_model = 32
head_count = 4
d_visual = 16
visual_head_count = 2
n_queries = 8
tokens_per_frame = 2

[train]
epochs = 3
max_steps = 20
";

#[test]
fn training_is_seeded_and_logs_the_weight_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.toml");
    std::fs::write(&cfg, TOY_CONFIG).unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&irm(&data, &["build-dataset", "--separable", "16"])), 0);
    let dataset = data.join("dataset.jsonl");
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let r = irm(&out, &["--config", p(&cfg), "train", "--dataset", p(&dataset)]);
        assert_eq!(code(&r), 0, "{}", stderr(&r));
        logs.push(std::fs::read(out.join("train_log.jsonl")).unwrap());
        assert!(out.join("checkpoint.irm").is_file());
    }
    assert_eq!(logs[0], logs[1]);
    let weights: Vec<f64> =
        read_lines(&dir.path().join("a/train_log.jsonl")).iter().map(|e| e["relation_weight"].as_f64().unwrap()).collect();
    assert_eq!(weights, vec![2.0, 1.95, 1.9]);
    let report = read_json(&dir.path().join("a/train_report.json"));
    assert_eq!(report["report"]["steps"], 6);
    assert_eq!(report["run"]["config"]["model"]["d_model"], 32);

    // a trained checkpoint drives inference
    let out = dir.path().join("infer");
    let ckpt = dir.path().join("a/checkpoint.irm");
    let r = irm(&out, &["--config", p(&cfg), "infer", "--dataset", p(&dataset), "--checkpoint", p(&ckpt)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
}

#[test]
fn training_rejects_unlabeled_data() {
    let dir = tempfile::tempdir().unwrap();
    let source = write_source(dir.path());
    let data = dir.path().join("data");
    assert_eq!(code(&irm(&data, &["build-dataset", "--source", p(&source)])), 0);
    let r = irm(dir.path(), &["train", "--dataset", p(&data.join("dataset.jsonl"))]);
    assert_eq!(code(&r), 2, "{}", stderr(&r));
}

#[test]
fn evaluate_counts_by_hand_and_breaks_down_by_type() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("preds.jsonl");
    let rec = |id: &str, pred: Option<usize>, gold: usize, word: &str| {
        json!({"item_id": id, "predicted_index": pred, "gold_index": gold, "question_first_word": word, "kept_clues": []})
    };
    let lines = [
        rec("1", Some(1), 1, "Why"),
        rec("2", Some(0), 1, "Why"),
        rec("3", Some(2), 2, "How"),
        rec("4", Some(3), 3, "What"),
        json!({"item_id": "5", "predicted_text": "taking a photo", "gold_text": "taking a photo", "question": "What is she doing?", "question_first_word": "What", "kept_clues": []}),
    ];
    std::fs::write(&preds, lines.iter().map(|l| l.to_string() + "\n").collect::<String>()).unwrap();
    let psav = dir.path().join("psav.jsonl");
    std::fs::write(
        &psav,
        "{\"item_id\":\"a\",\"gold\":[\"A\"],\"predicted\":\"A\"}\n{\"item_id\":\"b\",\"gold\":[\"A\",\"H\"],\"predicted\":\"C\"}\n",
    )
    .unwrap();
    let r = irm(dir.path(), &["evaluate", "--predictions", p(&preds), "--psav", p(&psav)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let report = &read_json(&dir.path().join("evaluation.json"))["report"];
    assert_eq!(report["multi_choice_accuracy"], 75.0);
    assert_eq!(report["breakdown_by_question_type"]["why"]["accuracy"], 50.0);
    assert_eq!(report["breakdown_by_question_type"]["how"]["accuracy"], 100.0);
    assert_eq!(report["breakdown_by_question_type"]["what"]["accuracy"], 100.0);
    assert_eq!(report["open_ended"]["mean_score"], 5.0);
    assert_eq!(report["psav"]["accuracy"], 50.0);
    assert_eq!(code(&irm(dir.path(), &["evaluate"])), 2);
}

#[test]
fn robustness_drop_is_the_exact_difference() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&irm(&data, &["build-dataset", "--synthetic", "12"])), 0);
    let out = dir.path().join("rob");
    let r = irm(&out, &["robustness", "--dataset", p(&data.join("dataset.jsonl"))]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let result = &read_json(&out.join("robustness.json"))["report"]["result"];
    let (v, n, d) = (
        result["vanilla_accuracy"].as_f64().unwrap(),
        result["noisy_accuracy"].as_f64().unwrap(),
        result["drop"].as_f64().unwrap(),
    );
    assert_eq!(d, v - n);
    assert_eq!(read_lines(&out.join("noisy.jsonl")).len(), 12);

    // recomputing from the two prediction files gives the same report
    let again = dir.path().join("again");
    let r = irm(&again, &["robustness", "--vanilla", p(&out.join("vanilla.jsonl")), "--noisy", p(&out.join("noisy.jsonl"))]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert_eq!(read_json(&again.join("robustness.json"))["report"]["result"], *result);
}

#[test]
fn gradcheck_passes_and_reports_assertion_failures() {
    let dir = tempfile::tempdir().unwrap();
    let r = irm(dir.path(), &["gradcheck", "--seeds", "2"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let report = read_json(&dir.path().join("gradcheck.json"));
    assert!(report["report"].as_array().unwrap().iter().all(|r| r["report"]["pass"] == true));
    // a zero tolerance cannot be met by finite differences
    let r = irm(dir.path(), &["gradcheck", "--seeds", "1", "--tolerance", "0"]);
    assert_eq!(code(&r), 4, "{}", stderr(&r));
}

#[test]
fn unreachable_backend_fails_items_without_leaking_credentials() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&irm(&data, &["build-dataset", "--synthetic", "3"])), 0);
    // bind then drop a listener to get a port nothing is serving
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = dir.path().join("remote.toml");
    std::fs::write(
        &cfg,
        format!(
            "[backend]\nkind = \"remote\"\nendpoint = \"http://127.0.0.1:{port}/v1/chat/completions\"\nmodel = \"m\"\n\
             retry_budget = 1\nbackoff_ms = 1\ntimeout_secs = 2.0\ncredential_env = \"IRM_TEST_TOKEN\"\n"
        ),
    )
    .unwrap();
    let out = dir.path().join("out");
    let run = Command::new(env!("CARGO_BIN_EXE_irm"))
        .env("IRM_TEST_TOKEN", "sk-very-secret-value")
        .args(["--out-dir", p(&out), "--config", p(&cfg), "infer", "--dataset", p(&data.join("dataset.jsonl"))])
        .output()
        .unwrap();
    assert_eq!(code(&run), 3, "{}", stderr(&run));
    let records = read_lines(&out.join("predictions.jsonl"));
    assert_eq!(records.len(), 3);
    assert!(records.iter().all(|r| r["error"].is_string()));
    let mut seen = stderr(&run) + &String::from_utf8_lossy(&run.stdout);
    for entry in std::fs::read_dir(&out).unwrap() {
        seen += &std::fs::read_to_string(entry.unwrap().path()).unwrap_or_default();
    }
    assert!(!seen.contains("sk-very-secret-value"));
    assert!(seen.contains("IRM_TEST_TOKEN"));
}
