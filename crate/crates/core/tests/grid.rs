use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use proptest::prelude::*;

use llm_annotate::metrics::{ClassificationReport, KappaBand, UnparsedPolicy};
use llm_annotate::model::{AnnotationStatus, Endpoint};
use llm_annotate::runner::{
    self, best_per_prompt, cell_stem, read_records, GridCellResult, GridSpec,
};

fn fixture(p: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(p)
}

fn spec_into(name: &str, out: &Path) -> GridSpec {
    let mut spec = GridSpec::load(&fixture(name)).unwrap();
    spec.output_dir = out.to_path_buf();
    spec
}

/// Every output file except the run manifest, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else if path.file_name().unwrap() != "run_manifest.json" {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

async fn run(spec: &GridSpec) -> runner::GridRun {
    let client = spec.build_client("LLM_ANNOTATE_TEST_NO_KEY").unwrap();
    runner::run_grid(spec, &client).await.unwrap()
}

#[tokio::test]
async fn two_model_grid_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run(&spec_into("grid_essays.json", a.path())).await;
    run(&spec_into("grid_essays.json", b.path())).await;
    assert_eq!(first.cells.len(), 30);
    assert!(first.failed().next().is_none());
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.len(), 30 * 3 + 4);
    assert_eq!(sa, sb);
    assert!(a.path().join("run_manifest.json").exists());
}

#[tokio::test]
async fn every_cell_has_one_record_per_item() {
    let dir = tempfile::tempdir().unwrap();
    let spec = spec_into("grid_tweets.json", dir.path());
    let grid = run(&spec).await;
    let corpus = spec.load_corpus().unwrap();
    for cell in &grid.cells {
        let records = read_records(&cell.record_path).unwrap();
        assert_eq!(records.len(), corpus.len());
        let ids: Vec<_> = records.iter().map(|r| r.item_id()).collect();
        let expected: Vec<_> = corpus.iter().map(|i| i.id()).collect();
        assert_eq!(ids, expected, "record order follows the corpus");
        let s = cell.statuses.as_ref().unwrap();
        assert_eq!(s.ok + s.tie_broken + s.unparsed, corpus.len());
        assert_eq!(cell.report.as_ref().unwrap().n as usize, corpus.len());
    }
}

#[tokio::test]
async fn self_consistency_records_votes_per_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = spec_into("grid_tweets.json", dir.path());
    spec.prompts.retain(|p| p.name == "13_self_consistency1");
    run(&spec).await;
    let path = dir
        .path()
        .join("records")
        .join(format!("{}.jsonl", cell_stem("13_self_consistency1", "zephyr-7b-alpha")));
    let records = read_records(&path).unwrap();
    for r in &records {
        assert_eq!(r.raw_replies().len(), 5);
    }
    // "#torn" replies cycle with the seed: positive, negative, neutral, negative, positive
    let torn = records
        .iter()
        .find(|r| r.raw_replies().iter().any(|x| x == "neutral") && r.votes().len() == 3)
        .expect("a #torn tweet");
    assert_eq!(torn.votes()["negative"], 2);
    assert_eq!(torn.votes()["positive"], 2);
    assert_eq!(torn.predicted(), Some("negative"));
    assert_eq!(torn.status(), AnnotationStatus::TieBroken);

    let dir2 = tempfile::tempdir().unwrap();
    let mut spec = spec_into("grid_tweets.json", dir2.path());
    spec.prompts.retain(|p| p.name == "13_self_consistency1");
    spec.options.identical_seeds = true;
    run(&spec).await;
    let records = read_records(&dir2.path().join("records").join(path.file_name().unwrap())).unwrap();
    for r in &records {
        let first = &r.raw_replies()[0];
        assert!(r.raw_replies().iter().all(|x| x == first));
        assert_ne!(r.status(), AnnotationStatus::TieBroken);
    }
}

#[tokio::test]
async fn resume_from_torn_file_matches_uninterrupted_run() {
    let full = tempfile::tempdir().unwrap();
    run(&spec_into("grid_tweets.json", full.path())).await;
    let expected = snapshot(full.path());

    let partial = tempfile::tempdir().unwrap();
    let spec = spec_into("grid_tweets.json", partial.path());
    run(&spec).await;
    // Simulate a crash inside the fourth cell: keep 10 records plus half a line,
    // and drop everything produced afterwards.
    let stems: Vec<String> = spec
        .prompts
        .iter()
        .map(|p| cell_stem(&p.name, "zephyr-7b-alpha"))
        .collect();
    let records = partial.path().join("records");
    let victim = records.join(format!("{}.jsonl", stems[3]));
    let text = std::fs::read_to_string(&victim).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let torn = format!("{}\n{}", lines[..10].join("\n"), &lines[10][..lines[10].len() / 2]);
    std::fs::write(&victim, torn).unwrap();
    for stem in &stems[4..] {
        std::fs::remove_file(records.join(format!("{stem}.jsonl"))).unwrap();
    }
    std::fs::remove_dir_all(partial.path().join("reports")).unwrap();
    std::fs::remove_file(partial.path().join("summary.csv")).unwrap();

    let resumed = run(&spec).await;
    assert_eq!(resumed.cells[3].resumed, 10);
    assert_eq!(resumed.cells[0].resumed, 60);
    assert_eq!(resumed.cells[5].resumed, 0);
    assert_eq!(snapshot(partial.path()), expected);
}

#[tokio::test]
async fn stale_records_are_recomputed() {
    let full = tempfile::tempdir().unwrap();
    let mut spec = spec_into("grid_tweets.json", full.path());
    spec.prompts.truncate(1);
    run(&spec).await;
    let expected = snapshot(full.path());

    let path = full
        .path()
        .join("records")
        .join(format!("{}.jsonl", cell_stem(&spec.prompts[0].name, "zephyr-7b-alpha")));
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines[5] = lines[5].replace("\"seed\":42", "\"seed\":7");
    lines[7] = lines[3].clone(); // duplicate item
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();

    let again = run(&spec).await;
    assert_eq!(again.cells[0].resumed, 5);
    assert_eq!(snapshot(full.path()), expected);
}

#[tokio::test]
async fn failing_cells_are_recorded_and_the_grid_continues() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = spec_into("grid_tweets.json", dir.path());
    spec.prompts.truncate(2);
    let mut broken = spec.models[0].clone();
    broken.model_name = "unreachable".into();
    broken.endpoint = Endpoint::Mock("missing".into());
    spec.models.insert(0, broken);

    let grid = run(&spec).await;
    assert_eq!(grid.cells.len(), 4);
    let failed: Vec<_> = grid.failed().map(|c| (c.prompt.as_str(), c.model.as_str())).collect();
    assert_eq!(
        failed,
        [("01_Zero_shot1", "unreachable"), ("02_Zero_shot2", "unreachable")]
    );
    assert_eq!(grid.cells[0].error_kind, Some("backend"));
    assert!(grid.best.iter().all(|b| b.model == "zephyr-7b-alpha"));
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(summary.contains("01_Zero_shot1,unreachable,failed"));
    assert!(summary.contains("unknown mock script"));
}

#[tokio::test]
async fn report_rebuilds_identical_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let spec = spec_into("grid_essays.json", dir.path());
    run(&spec).await;
    let before = snapshot(dir.path());
    let cells = runner::collect_cells(&spec).unwrap();
    runner::write_summaries(dir.path(), &cells).unwrap();
    assert_eq!(snapshot(dir.path()), before);

    // offline evaluation equals the stored report
    let corpus = spec.load_corpus().unwrap();
    for cell in &cells {
        let records = read_records(&cell.record_path).unwrap();
        let report = runner::evaluate(&records, &corpus, &spec.schema, UnparsedPolicy::AsWrong).unwrap();
        let stored: ClassificationReport = serde_json::from_slice(
            &std::fs::read(
                dir.path()
                    .join("reports")
                    .join(format!("{}.json", cell_stem(&cell.prompt, &cell.model))),
            )
            .unwrap(),
        )
        .unwrap();
        assert_eq!(report, stored);
    }
}

#[tokio::test]
async fn exclude_policy_drops_unparsed_items() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = spec_into("grid_tweets.json", dir.path());
    spec.prompts.truncate(1);
    spec.unparsed_policy = UnparsedPolicy::Exclude;
    let grid = run(&spec).await;
    let report = grid.cells[0].report.as_ref().unwrap();
    let unparsed = grid.cells[0].statuses.as_ref().unwrap().unparsed as u64;
    assert!(unparsed > 0);
    assert_eq!(report.n + unparsed, 60);
    assert_eq!(report.unparsed, unparsed);
}

#[tokio::test]
async fn reparse_retry_recovers_unparsed_replies() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = spec_into("grid_tweets.json", dir.path());
    spec.prompts.truncate(1);
    let base = run(&spec).await.cells[0].statuses.clone().unwrap().unparsed;

    let dir2 = tempfile::tempdir().unwrap();
    let mut spec = spec_into("grid_tweets.json", dir2.path());
    spec.prompts.truncate(1);
    spec.options.reparse_retry = 1;
    let grid = run(&spec).await;
    let records = read_records(&grid.cells[0].record_path).unwrap();
    let retried: Vec<_> = records
        .iter()
        .filter(|r| r.flags().iter().any(|f| f == "reparse_retry"))
        .collect();
    assert!(!retried.is_empty());
    assert!(retried.iter().all(|r| r.raw_replies().len() == 2));
    // The nudge conversation still carries the cue hashtag, so "#hmm" stays
    // unparseable while the ambiguous "#both" reply is re-asked too.
    assert!(grid.cells[0].statuses.as_ref().unwrap().unparsed <= base);
}

#[test]
fn spec_rejects_duplicates_and_unknown_prompts() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = fixture("");
    let write = |body: serde_json::Value| {
        let p = dir.path().join("spec.json");
        std::fs::write(&p, body.to_string()).unwrap();
        p
    };
    let base = serde_json::json!({
        "corpus": fixtures.join("corpora/tweets_60.csv"),
        "prompt_set": fixtures.join("prompts/tweets.json"),
        "models": [
            {"model_name": "a", "template_id": "zephyr", "endpoint": "mock:x"},
            {"model_name": "a", "template_id": "zephyr", "endpoint": "mock:x"}
        ],
        "output_dir": "out"
    });
    let err = GridSpec::load(&write(base.clone())).unwrap_err();
    assert!(err.to_string().contains("duplicate model"), "{err}");

    let mut subset = base.clone();
    subset["models"].as_array_mut().unwrap().pop();
    subset["prompts"] = serde_json::json!(["01_Zero_shot1", "nope"]);
    let err = GridSpec::load(&write(subset.clone())).unwrap_err();
    assert!(err.to_string().contains("unknown prompt `nope`"));

    subset["prompts"] = serde_json::json!(["12_COT_2", "01_Zero_shot1"]);
    let spec = GridSpec::load(&write(subset)).unwrap();
    let names: Vec<_> = spec.prompts.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(names, ["12_COT_2", "01_Zero_shot1"]);
    assert_eq!(spec.output_dir, dir.path().join("out"));
}

fn cell(prompt: usize, model: usize, kappa: f64, accuracy: f64) -> GridCellResult {
    GridCellResult {
        prompt: format!("p{prompt}"),
        model: format!("m{model}"),
        report: Some(ClassificationReport {
            per_class: vec![],
            accuracy,
            macro_precision: 0.0,
            macro_recall: 0.0,
            macro_f1: 0.0,
            weighted_f1: 0.0,
            kappa,
            kappa_band: KappaBand::Poor,
            n: 1,
            unparsed_policy: UnparsedPolicy::AsWrong,
            unparsed: 0,
            zero_division: false,
        }),
        record_path: PathBuf::new(),
        wall_time: Default::default(),
        statuses: None,
        resumed: 0,
        error: None,
        error_kind: None,
    }
}

proptest! {
    #[test]
    fn best_per_prompt_is_the_argmax_of_each_prompt(
        grid in proptest::collection::vec(
            proptest::collection::vec((0u8..5, 0u8..5), 1..6),
            1..8,
        )
    ) {
        // small value ranges force plenty of ties
        let mut cells = Vec::new();
        for (p, row) in grid.iter().enumerate() {
            for (m, &(k, a)) in row.iter().enumerate() {
                cells.push(cell(p, m, f64::from(k) / 4.0, f64::from(a) / 4.0));
            }
        }
        let best = best_per_prompt(&cells);
        prop_assert_eq!(best.len(), grid.len());
        for (p, row) in grid.iter().enumerate() {
            let mut winner = 0;
            for (m, &(k, a)) in row.iter().enumerate() {
                let (wk, wa) = row[winner];
                if k > wk || (k == wk && a > wa) {
                    winner = m;
                }
            }
            prop_assert_eq!(&best[p].prompt, &format!("p{p}"));
            prop_assert_eq!(&best[p].model, &format!("m{winner}"));
        }
    }
}
