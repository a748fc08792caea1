//! End-to-end tests of the binary: exit codes, file outputs, and the
//! offline replay path.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_r3prompt"))
}

fn asset(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/assets")
        .join(rel)
        .display()
        .to_string()
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
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

fn write_corpus(dir: &Path) -> PathBuf {
    let path = dir.join("clean.jsonl");
    fs::write(
        &path,
        concat!(
            r#"{"id": "a", "question": "Tom had 3 pears. He bought 4 more pears. How many pears does Tom have now?", "answer": 7, "source": "demo"}"#,
            "\n",
            r#"{"id": "b", "question": "Ana read 12 pages on Monday. She read 5 pages on Tuesday. How many pages did Ana read?", "answer": 17, "source": "demo"}"#,
            "\n",
            r#"{"id": "c", "question": "Sara picked 9 flowers. She gave 2 flowers away. How many flowers does Sara have left?", "answer": 7, "source": "demo"}"#,
            "\n",
        ),
    )
    .unwrap();
    path
}

#[test]
fn help_exits_zero_and_bad_flags_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run_in(dir.path(), &["--help"])), 0);
    assert_eq!(code(&run_in(dir.path(), &["run", "--help"])), 0);
    assert_eq!(code(&run_in(dir.path(), &["--no-such-flag"])), 1);
    assert_eq!(code(&run_in(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&run_in(dir.path(), &[])), 1);
}

#[test]
fn replay_run_writes_reports_and_rescoring_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = asset("datasets/demo.jsonl");
    let fixtures = asset("fixtures/demo_replay.jsonl");

    let out = run_in(
        dir.path(),
        &[
            "run", "--dataset", &dataset, "--replay", &fixtures, "--out-dir", "run1",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let run_dir = dir.path().join("run1");
    assert!(run_dir.join("manifest.json").exists());
    assert!(run_dir.join("records.jsonl").exists());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["accuracy"], 1.0);
    assert_eq!(report["total"], 5);
    let transcript_text = fs::read_to_string(run_dir.join("transcripts.jsonl")).unwrap();
    assert_eq!(transcript_text.lines().count(), 15);

    let first_report = fs::read_to_string(run_dir.join("report.json")).unwrap();
    let rescore = run_in(
        dir.path(),
        &["score", "--run-dir", "run1", "--dataset", &dataset],
    );
    assert_eq!(code(&rescore), 0, "stderr: {}", stderr(&rescore));
    assert_eq!(
        fs::read_to_string(run_dir.join("report.json")).unwrap(),
        first_report
    );

    let rerun = run_in(
        dir.path(),
        &[
            "run", "--dataset", &dataset, "--replay", &fixtures, "--out-dir", "run2",
        ],
    );
    assert_eq!(code(&rerun), 0);
    let again = fs::read_to_string(dir.path().join("run2/transcripts.jsonl")).unwrap();
    assert_eq!(
        r3prompt::pipeline::canonical_transcript_lines(&transcript_text),
        r3prompt::pipeline::canonical_transcript_lines(&again)
    );
}

#[test]
fn ablation_writes_one_report_per_combination() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "run",
            "--dataset",
            &asset("datasets/demo.jsonl"),
            "--replay",
            &asset("fixtures/demo_replay.jsonl"),
            "--ablation",
            "--out-dir",
            "abl",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    for combo in [
        "resolve",
        "review-resolve",
        "rephrase-resolve",
        "review-rephrase-resolve",
    ] {
        assert!(dir.path().join("abl").join(combo).join("report.json").exists());
    }
}

#[test]
fn usage_problems_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = asset("datasets/demo.jsonl");
    let out = run_in(
        dir.path(),
        &["run", "--dataset", &dataset, "--method", "bogus"],
    );
    assert_eq!(code(&out), 1);

    let out = run_in(dir.path(), &["run", "--dataset", &dataset]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("endpoint_url"));

    let out = run_in(
        dir.path(),
        &[
            "report", "--run-dir", "r1", "--run-dir", "r2", "--dataset", "d1", "--out", "s.json",
        ],
    );
    assert_eq!(code(&out), 1);
}

#[test]
fn data_problems_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "run",
            "--dataset",
            "no-such-dataset.jsonl",
            "--replay",
            &asset("fixtures/demo_replay.jsonl"),
        ],
    );
    assert_eq!(code(&out), 2);

    let out = run_in(
        dir.path(),
        &["score", "--run-dir", "nowhere", "--dataset", &asset("datasets/demo.jsonl")],
    );
    assert_eq!(code(&out), 2);

    let out = run_in(
        dir.path(),
        &["build", "--corpus", "missing.json", "--format", "mawps", "--out", "x.jsonl"],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn provider_problems_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("r3prompt.toml"),
        "[provider]\nendpoint_url = \"http://127.0.0.1:1\"\ncredential_env_name = \"R3_TEST_NO_SUCH_VAR\"\n",
    )
    .unwrap();
    let out = bin()
        .current_dir(dir.path())
        .env_remove("R3_TEST_NO_SUCH_VAR")
        .args(["run", "--dataset", &asset("datasets/demo.jsonl")])
        .output()
        .unwrap();
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("R3_TEST_NO_SUCH_VAR"));

    let corpus = write_corpus(dir.path());
    let out = run_in(
        dir.path(),
        &[
            "run",
            "--dataset",
            corpus.to_str().unwrap(),
            "--replay",
            &asset("fixtures/demo_replay.jsonl"),
        ],
    );
    assert_eq!(code(&out), 3, "fixture miss surfaces as a provider failure");
}

#[test]
fn build_modes_produce_the_advertised_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let corpus = corpus.to_str().unwrap();

    let out = run_in(
        dir.path(),
        &[
            "build", "--corpus", corpus, "--graded", "2", "--seed", "7", "--out", "graded.jsonl",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    for n in 1..=2usize {
        let text = fs::read_to_string(dir.path().join(format!("graded-{n}.jsonl"))).unwrap();
        let lines: Vec<serde_json::Value> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 3);
        for problem in &lines {
            assert_eq!(problem["noise"].as_array().unwrap().len(), n);
        }
    }

    let out = run_in(
        dir.path(),
        &[
            "build", "--corpus", corpus, "--single-kind", "in-topic", "--sample", "2", "--out",
            "single.jsonl",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = fs::read_to_string(dir.path().join("single.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    for problem in &lines {
        let noise = problem["noise"].as_array().unwrap();
        assert_eq!(noise.len(), 1);
        assert_eq!(noise[0]["kind"], "in_topic");
    }

    let repeat = run_in(
        dir.path(),
        &[
            "build", "--corpus", corpus, "--graded", "2", "--seed", "7", "--out", "again.jsonl",
        ],
    );
    assert_eq!(code(&repeat), 0);
    assert_eq!(
        fs::read_to_string(dir.path().join("graded-1.jsonl")).unwrap(),
        fs::read_to_string(dir.path().join("again-1.jsonl")).unwrap()
    );
}

#[test]
fn instructed_baseline_warns_unless_trigger_is_configured() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = asset("datasets/demo.jsonl");
    let fixtures = asset("fixtures/demo_replay.jsonl");
    let out = run_in(
        dir.path(),
        &[
            "run", "--dataset", &dataset, "--replay", &fixtures, "--method", "instructed-cot",
            "--out-dir", "warned",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("instructed_trigger"));

    fs::write(
        dir.path().join("with_trigger.toml"),
        "[run]\ninstructed_trigger = \"Ignore anything irrelevant.\"\n",
    )
    .unwrap();
    let out = run_in(
        dir.path(),
        &[
            "run", "--config", "with_trigger.toml", "--dataset", &dataset, "--replay", &fixtures,
            "--method", "instructed-cot", "--out-dir", "quiet",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(!stderr(&out).contains("instructed_trigger"));
    let transcripts = fs::read_to_string(dir.path().join("quiet/transcripts.jsonl")).unwrap();
    assert!(transcripts.contains("Ignore anything irrelevant."));
}

#[test]
fn report_aggregates_runs_into_a_noise_series() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let out = run_in(
        dir.path(),
        &[
            "build",
            "--corpus",
            corpus.to_str().unwrap(),
            "--graded",
            "2",
            "--seed",
            "7",
            "--out",
            "graded.jsonl",
        ],
    );
    assert_eq!(code(&out), 0);

    for n in 1..=2usize {
        let text = fs::read_to_string(dir.path().join(format!("graded-{n}.jsonl"))).unwrap();
        let run_dir = dir.path().join(format!("run-{n}"));
        fs::create_dir(&run_dir).unwrap();
        let mut lines = String::new();
        for (i, line) in text.lines().enumerate() {
            let problem: serde_json::Value = serde_json::from_str(line).unwrap();
            let answer = problem["answer"].as_f64().unwrap();
            let miss = n == 2 && i == 0;
            let value = if miss { answer + 1.0 } else { answer };
            let record = serde_json::json!({
                "run_id": format!("forged-{n}"),
                "problem_id": problem["id"],
                "stage": "resolve",
                "sample_index": 0,
                "prompt": "Q",
                "response": format!("The answer is {value}."),
                "temperature": 0.0,
                "model": "forged",
                "token_usage": null,
                "timestamp": "",
                "latency_ms": 0,
            });
            lines.push_str(&record.to_string());
            lines.push('\n');
        }
        fs::write(run_dir.join("transcripts.jsonl"), lines).unwrap();
    }

    let out = run_in(
        dir.path(),
        &[
            "report", "--run-dir", "run-1", "--dataset", "graded-1.jsonl", "--run-dir", "run-2",
            "--dataset", "graded-2.jsonl", "--out", "series.json",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let series: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("series.json")).unwrap()).unwrap();
    let points = series["points"].as_array().unwrap();
    assert_eq!(points.len(), 2);
    assert_eq!(points[0]["noise_count"], 1);
    assert_eq!(points[0]["accuracy"], 1.0);
    assert_eq!(points[1]["noise_count"], 2);
    assert_eq!(points[1]["correct"], 2);
    assert_eq!(points[1]["total"], 3);
}
