mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::{Step, Stub};

fn fixture(p: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(p)
}

fn cli() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_llm-annotate"));
    cmd.env_remove("OPENAI_API_KEY").env("RUST_LOG", "error");
    cmd
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn annotate_args(out: &Path, prompt: &str, endpoint: &str) -> Vec<String> {
    [
        "annotate",
        "--corpus",
        fixture("corpora/tweets_60.csv").to_str().unwrap(),
        "--prompt-set",
        fixture("prompts/tweets.json").to_str().unwrap(),
        "--prompt",
        prompt,
        "--model",
        "zephyr-7b-alpha",
        "--template",
        "zephyr",
        "--endpoint",
        endpoint,
        "--out",
        out.to_str().unwrap(),
    ]
    .map(String::from)
    .to_vec()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(cli().output().unwrap().status.code(), Some(1));
    assert_eq!(cli().args(["ingest", "--bogus"]).output().unwrap().status.code(), Some(1));
    assert_eq!(cli().arg("--help").output().unwrap().status.code(), Some(0));
    let o = cli()
        .args(["ingest", fixture("corpora/tweets_60.csv").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--prompt-set or --labels"));
}

#[test]
fn ingest_prints_the_label_distribution() {
    let o = cli()
        .args(["ingest", fixture("corpora/tweets_60.csv").to_str().unwrap()])
        .args(["--prompt-set", fixture("prompts/tweets.json").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    for row in ["negative", "21", "35.00%", "neutral", "27", "45.00%", "positive", "12", "20.00%"] {
        assert!(text.contains(row), "missing {row} in\n{text}");
    }
    assert!(text.contains("Total"));
}

#[test]
fn data_errors_exit_with_two() {
    let o = cli()
        .args(["ingest", "/nonexistent/corpus.csv", "--labels", "yes,no"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "id,text,gold\n1,fine,yes\n2,odd,maybe\n").unwrap();
    let o = cli()
        .args(["ingest", bad.to_str().unwrap(), "--labels", "yes,no"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn annotate_with_a_mock_script_writes_records_and_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let mock = format!("tweets={}", fixture("mocks/tweets.json").display());
    let o = cli()
        .args(annotate_args(dir.path(), "01_Zero_shot1", "mock:tweets"))
        .args(["--mock-script", &mock])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("Kappa"));
    let records = dir.path().join("records/01_Zero_shot1__zephyr-7b-alpha.jsonl");
    let text = std::fs::read_to_string(&records).unwrap();
    assert_eq!(text.lines().count(), 60);
    assert!(dir.path().join("reports/01_Zero_shot1__zephyr-7b-alpha.json").exists());

    // offline evaluation prints the same table
    let e = cli()
        .args(["evaluate", "--records", records.to_str().unwrap()])
        .args(["--corpus", fixture("corpora/tweets_60.csv").to_str().unwrap()])
        .args(["--prompt-set", fixture("prompts/tweets.json").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(e.status.code(), Some(0), "{}", stderr(&e));
    assert_eq!(stdout(&e), stdout(&o));

    // a second run resumes everything and leaves the file untouched
    let again = cli()
        .args(annotate_args(dir.path(), "01_Zero_shot1", "mock:tweets"))
        .args(["--mock-script", &mock])
        .output()
        .unwrap();
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(&records).unwrap(), text);
}

#[test]
fn evaluate_rejects_records_from_another_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("r.jsonl");
    std::fs::write(&records, "").unwrap();
    let o = cli()
        .args(["evaluate", "--records", records.to_str().unwrap()])
        .args(["--corpus", fixture("corpora/tweets_60.csv").to_str().unwrap()])
        .args(["--labels", "negative,neutral,positive"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no record for item `t001`"), "{}", stderr(&o));
}

#[tokio::test(flavor = "multi_thread")]
async fn invalid_temperature_is_rejected_before_any_request() {
    let stub = Stub::start().await;
    let dir = tempfile::tempdir().unwrap();
    let args = annotate_args(dir.path(), "01_Zero_shot1", &stub.url);
    let o = tokio::task::spawn_blocking(move || {
        cli().args(args).args(["--temperature", "1.5"]).output().unwrap()
    })
    .await
    .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("temperature"), "{}", stderr(&o));
    assert_eq!(stub.hits(), 0);
}

#[tokio::test(flavor = "multi_thread")]
async fn paths_flag_requires_a_self_consistency_prompt() {
    let stub = Stub::start().await;
    let dir = tempfile::tempdir().unwrap();
    let args = annotate_args(dir.path(), "03_one_shot1", &stub.url);
    let o = tokio::task::spawn_blocking(move || cli().args(args).args(["--paths", "3"]).output().unwrap())
        .await
        .unwrap();
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert_eq!(stub.hits(), 0);
}

#[tokio::test(flavor = "multi_thread")]
async fn paths_override_and_live_endpoint() {
    let stub = Stub::start().await;
    let dir = tempfile::tempdir().unwrap();
    let args = annotate_args(dir.path(), "13_self_consistency1", &stub.url);
    let o = tokio::task::spawn_blocking(move || {
        cli()
            .args(args)
            .args(["--paths", "3", "--max-inflight", "2"])
            .env("STUB_KEY", "sk-cli")
            .args(["--api-key-env", "STUB_KEY"])
            .output()
            .unwrap()
    })
    .await
    .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stub.hits(), 60 * 3);
    assert!(stub.peak() <= 2);
    assert!(stub.auth().iter().all(|a| a.as_deref() == Some("Bearer sk-cli")));
}

#[tokio::test(flavor = "multi_thread")]
async fn backend_failures_exit_with_three() {
    let stub = Stub::start().await;
    stub.push([Step::Status(401)]);
    let dir = tempfile::tempdir().unwrap();
    let args = annotate_args(dir.path(), "01_Zero_shot1", &stub.url);
    let o = tokio::task::spawn_blocking(move || cli().args(args).args(["--max-inflight", "1"]).output().unwrap())
        .await
        .unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("401"), "{}", stderr(&o));
}

#[test]
fn grid_then_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = fixture("grid_essays.json");
    let o = cli()
        .args(["grid", spec.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let best = std::fs::read_to_string(dir.path().join("best_per_prompt.txt")).unwrap();
    assert_eq!(stdout(&o), best);
    assert_eq!(best.lines().filter(|l| l.starts_with(char::is_numeric)).count(), 15);

    let summary = std::fs::read(dir.path().join("summary.csv")).unwrap();
    std::fs::remove_file(dir.path().join("summary.csv")).unwrap();
    let r = cli()
        .args(["report", spec.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(0), "{}", stderr(&r));
    assert_eq!(std::fs::read(dir.path().join("summary.csv")).unwrap(), summary);

    let empty = tempfile::tempdir().unwrap();
    let r = cli()
        .args(["report", spec.to_str().unwrap(), "--out", empty.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn grid_with_invalid_temperature_override_is_a_usage_error() {
    let o = cli()
        .args(["grid", fixture("grid_tweets.json").to_str().unwrap(), "--temperature", "-1"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}
