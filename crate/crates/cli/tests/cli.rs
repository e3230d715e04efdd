use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn iclner(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iclner"))
        .args(args)
        .env_remove("ICLNER_API_KEY")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Synthetic EMB1 files for both fixture corpora plus a run config.
fn workspace(dir: &Path, extra: &str) -> PathBuf {
    for (corpus, stem) in [("conll_train.txt", "train"), ("conll_test.txt", "test")] {
        for level in ["sentence", "token"] {
            let out = dir.join(format!("{stem}.{level}.emb1"));
            let o = iclner(&["synth-emb", "--corpus", p(&fixture(corpus)), "--level", level, "--out", p(&out)]);
            assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        }
    }
    let config = dir.join("run.toml");
    let text = format!(
        "dataset = \"fixture\"\n\
         train = {:?}\n\
         test = {:?}\n\
         train_sentence_emb = \"train.sentence.emb1\"\n\
         test_sentence_emb = \"test.sentence.emb1\"\n\
         train_token_emb = \"train.token.emb1\"\n\
         test_token_emb = \"test.token.emb1\"\n\
         output = \"out/pred.jsonl\"\n\
         backend = \"mock:oracle\"\n\
         retrieval = \"sentence\"\n\
         k = 4\n\
         {extra}",
        p(&fixture("conll_train.txt")),
        p(&fixture("conll_test.txt")),
    );
    std::fs::write(&config, text).unwrap();
    config
}

#[test]
fn help_succeeds_and_bad_usage_exits_1() {
    assert_eq!(code(&iclner(&["--help"])), 0);
    assert_eq!(code(&iclner(&["run", "--help"])), 0);
    assert_eq!(code(&iclner(&[])), 1);
    assert_eq!(code(&iclner(&["frobnicate"])), 1);
}

#[test]
fn validate_corpus_reports_clean_and_broken_files() {
    let o = iclner(&["validate-corpus", p(&fixture("conll_test.txt"))]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("sentences: 200"));
    assert!(stdout(&o).contains("status: clean"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conll");
    std::fs::write(&bad, "Paris B-LOC extra\n").unwrap();
    assert_eq!(code(&iclner(&["validate-corpus", p(&bad)])), 3);
    let repairable = dir.path().join("rep.conll");
    std::fs::write(&repairable, "Paris O\nFrance I-LOC\n").unwrap();
    let o = iclner(&["validate-corpus", p(&repairable)]);
    assert_eq!(code(&o), 3);
    assert!(stdout(&o).contains("repairable"));
    assert_eq!(code(&iclner(&["validate-corpus", p(&bad), "--schema", "nope"])), 2);
}

#[test]
fn index_checks_counts_against_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    workspace(dir.path(), "");
    let emb = dir.path().join("test.token.emb1");
    let o = iclner(&["index", "--level", "token", "--emb", p(&emb), "--corpus", p(&fixture("conll_test.txt"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("dim: 32"));
    assert!(stdout(&o).contains("(100.00%)"));

    let o = iclner(&["index", "--level", "token", "--emb", p(&emb), "--corpus", p(&fixture("conll_train.txt"))]);
    assert_eq!(code(&o), 3);
    assert!(stdout(&o).contains("missing:"));
    let o = iclner(&["index", "--level", "sentence", "--emb", p(&emb), "--corpus", p(&fixture("conll_test.txt"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn oracle_run_scores_one_and_resumes_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let config = workspace(dir.path(), "");
    let cache = dir.path().join("cache");
    let args = ["run", "--config", p(&config), "--override", "k=2", "--cache-dir", p(&cache), "--workers", "2"];
    let o = iclner(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.starts_with("run_id,"));
    assert!(out.contains("fixture-sentence-atmarker-k2-off,fixture,sentence,atmarker,2,off,1.0000,1.0000,1.0000"), "{out}");

    let pred = dir.path().join("out/pred.jsonl");
    let first = std::fs::read(&pred).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/pred.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["k"], 2);
    assert_eq!(manifest["config"]["workers"], 2);
    assert!(manifest["extra"]["overrides"].as_str().unwrap().contains("k=2"));
    assert_eq!(manifest["cache"]["hits"], 0);

    let o = iclner(&args);
    assert_eq!(code(&o), 0);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/pred.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["cache"]["misses"], 0);
    assert_eq!(manifest["cache"]["hits"], 800);
    assert_eq!(std::fs::read(&pred).unwrap(), first);
}

#[test]
fn config_and_backend_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = workspace(dir.path(), "");
    assert_eq!(code(&iclner(&["run", "--config", p(&config), "--override", "bogus=1"])), 2);
    assert_eq!(code(&iclner(&["run", "--config", p(&config), "--override", "backend=mock:nope"])), 2);
    assert_eq!(code(&iclner(&["run", "--config", p(&dir.path().join("missing.toml"))])), 2);
    let o = iclner(&["run", "--config", p(&config), "--override", "backend=openai:text-davinci-003"]);
    assert_eq!(code(&o), 4);
    let o = iclner(&["run", "--config", p(&config), "--override", "retrieval=entity", "--override", "train_token_emb=missing.emb1"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn overprediction_with_verification_backend() {
    let dir = tempfile::tempdir().unwrap();
    let config = workspace(dir.path(), "verify_backend = \"mock:yesno\"\n");
    let base = ["run", "--config", p(&config), "--override", "backend=mock:overpredict"];
    let raw = stdout(&iclner(&base));
    let verified = stdout(&iclner(&[&base[..], &["--override", "verification=zero-shot"]].concat()));
    let precision = |csv: &str| csv.lines().nth(1).unwrap().split(',').nth(6).unwrap().parse::<f64>().unwrap();
    assert!(precision(&raw) < 0.9, "{raw}");
    assert_eq!(precision(&verified), 1.0, "{verified}");
}

#[test]
fn score_prints_the_half_precision_case() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("gold.conll");
    std::fs::write(&gold, "Paris S-LOC\nis O\nnice O\n").unwrap();
    let pred = dir.path().join("pred.jsonl");
    std::fs::write(
        &pred,
        "{\"id\":0,\"spans\":[{\"start\":0,\"end\":0,\"type\":\"LOC\",\"surface\":\"Paris\"},{\"start\":2,\"end\":2,\"type\":\"LOC\",\"surface\":\"nice\"}]}\n",
    )
    .unwrap();
    let o = iclner(&["score", "--pred", p(&pred), "--gold", p(&gold)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("0.5000") && out.contains("1.0000") && out.contains("0.6667"), "{out}");
    assert!(out.contains("micro,0.5000,1.0000,0.6667,1,1,0"), "{out}");

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"id\":9,\"spans\":[]}\n").unwrap();
    assert_eq!(code(&iclner(&["score", "--pred", p(&bad), "--gold", p(&gold)])), 3);
}

#[test]
fn ablate_sweeps_a_grid() {
    let dir = tempfile::tempdir().unwrap();
    let config = workspace(dir.path(), "");
    let csv = dir.path().join("ablation.csv");
    let o = iclner(&[
        "ablate", "--config", p(&config), "--sweep", "k=1,2", "--sweep", "format=atmarker,bmes,entpos", "--out", p(&csv),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("fixture-sentence-atmarker-k1-off,"));
    assert!(lines[6].starts_with("fixture-sentence-entpos-k2-off,"));
    assert!(lines[1..].iter().all(|l| l.contains(",1.0000,1.0000,1.0000,")));
    assert_eq!(code(&iclner(&["ablate", "--config", p(&config), "--sweep", "k="])), 1);
}
