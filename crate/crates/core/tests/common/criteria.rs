//! Checks shared by the integration tests and the `acceptance` target. Each
//! returns a one-line summary on success and the first violation otherwise.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use iclner::corpus::{parse_conll, ConllOptions, CorpusMode, LabeledCorpus, Schema};
use iclner::embedstore::Datastore;
use iclner::evalkit::{
    ablate_kshot, build_8sent_seedset, low_resource_splits, results_csv, score, Score, ScoreTriple,
};
use iclner::llmgate::{GoldIndex, OracleMock, OverpredictMock, YesNoOracleMock};
use iclner::markup::{encode, parse, OutputFormat};
use iclner::pipeline::{
    predictions_to_jsonl, run_corpus, PredictedSpan, Pipeline, PredictionSet, Provenance, Retrieval, RunConfig,
    TypeDiagnostics, Verification,
};
use iclner::promptkit::estimate_tokens;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    brute_force_knn, sample_extraction_prompt, sample_verification_prompt, fixture, fixture_path, pooled_oracle, queries, random_sentence,
    random_spans, same_neighbors, tied_records, Fixture, Recorder,
};

pub type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn gold_count(gold: &LabeledCorpus) -> usize {
    gold.ids().map(|id| gold.gold(id).len()).sum()
}

/// tp+fn equals the gold count and tp+fp the distinct predicted count.
pub fn count_identities(predictions: &[PredictionSet], gold: &LabeledCorpus, s: &Score) -> Result<(), String> {
    let predicted: BTreeSet<_> = predictions
        .iter()
        .flat_map(|p| p.spans.iter().map(move |x| (p.id, x.span.start, x.span.end, x.span.ty.clone())))
        .collect();
    let m = &s.micro;
    ensure!(m.tp + m.fn_ == gold_count(gold), "tp+fn={} but |gold|={}", m.tp + m.fn_, gold_count(gold));
    ensure!(m.tp + m.fp == predicted.len(), "tp+fp={} but |pred|={}", m.tp + m.fp, predicted.len());
    Ok(())
}

fn scored(predictions: &[PredictionSet], gold: &LabeledCorpus) -> Result<Score, String> {
    let s = score(predictions, gold).map_err(|e| e.to_string())?;
    count_identities(predictions, gold, &s)?;
    Ok(s)
}

fn oracle_run(fx: &Fixture, config: &RunConfig) -> Result<Vec<PredictionSet>, String> {
    let gold = Arc::new(GoldIndex::new(&fx.test, &fx.schema));
    let oracle = OracleMock::new(gold, config.format);
    let p = Pipeline::new(config, &fx.schema, &fx.train, &fx.stores, &oracle);
    Ok(run_corpus(&p, &fx.test).map_err(|e| e.to_string())?.predictions)
}

/// Oracle run under every retrieval mode. The time limit applies to each
/// run; callers that share the CPU with other tests pass `None`.
pub fn oracle_identity_within(limit: Option<f64>) -> Outcome {
    let fx = fixture();
    let mut lines = Vec::new();
    for retrieval in Retrieval::ALL {
        let config = RunConfig {
            retrieval: *retrieval,
            ..Default::default()
        };
        let clock = Instant::now();
        let predictions = oracle_run(&fx, &config)?;
        let elapsed = clock.elapsed();
        let m = scored(&predictions, &fx.test)?.micro;
        ensure!(
            (m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0),
            "{retrieval}: P={} R={} F1={}",
            m.precision,
            m.recall,
            m.f1
        );
        if let Some(limit) = limit {
            ensure!(elapsed.as_secs_f64() < limit, "{retrieval}: took {elapsed:?}");
        }
        lines.push(format!("{retrieval} {:.2}s", elapsed.as_secs_f64()));
    }
    Ok(format!("{} sentences, P=R=F1=1.0 ({})", fx.test.len(), lines.join(", ")))
}

pub fn oracle_identity() -> Outcome {
    oracle_identity_within(Some(10.0))
}

pub fn hallucination_filter() -> Outcome {
    let fx = fixture();
    let gold = Arc::new(GoldIndex::new(&fx.test, &fx.schema));
    let over = OverpredictMock::new(gold.clone(), OutputFormat::AtMarker, 0.3, 7);
    let yes_no = YesNoOracleMock::new(gold);
    let mut results = Vec::new();
    for verification in Verification::ALL {
        let config = RunConfig {
            verification: *verification,
            ..Default::default()
        };
        let p = Pipeline::new(&config, &fx.schema, &fx.train, &fx.stores, &over).with_verify_backend(&yes_no);
        let predictions = run_corpus(&p, &fx.test).map_err(|e| e.to_string())?.predictions;
        results.push((*verification, scored(&predictions, &fx.test)?.micro));
    }
    let raw = results[0].1.clone();
    ensure!(raw.precision < 0.9, "overprediction left precision at {:.4}", raw.precision);
    for (v, m) in &results[1..] {
        ensure!(m.precision == 1.0, "{v}: precision {:.4}", m.precision);
        ensure!(m.recall == raw.recall, "{v}: recall {:.4} vs {:.4} unverified", m.recall, raw.recall);
    }
    Ok(results
        .iter()
        .map(|(v, m)| format!("{v} P={:.4} R={:.4}", m.precision, m.recall))
        .collect::<Vec<_>>()
        .join(", "))
}

pub const ROUND_TRIP_CASES: usize = 10_000;

pub fn markup_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2023);
    for case in 0..ROUND_TRIP_CASES {
        let s = random_sentence(&mut rng, case as u32, 15);
        let spans = random_spans(&mut rng, &s, "LOC");
        for format in OutputFormat::ALL {
            let marked = encode(format, &s, &spans).map_err(|e| format!("case {case}: {e}"))?;
            let report = parse(format, &s, &marked.text, "LOC");
            ensure!(report.spans == spans, "case {case} {format}: {:?} parsed to {:?}", marked.text, report.spans);
        }
    }
    let s = random_sentence(&mut rng, 0, 15);
    for case in 0..ROUND_TRIP_CASES {
        let n = rng.gen_range(0..200);
        let bytes: Vec<u8> = (0..n).map(|_| rng.gen()).collect();
        let text = String::from_utf8_lossy(&bytes);
        for format in OutputFormat::ALL {
            let outcome = std::panic::catch_unwind(|| parse(format, &s, &text, "LOC"));
            let report = outcome.map_err(|_| format!("fuzz case {case} {format}: parser panicked"))?;
            ensure!(report.spans.iter().all(|x| x.end < s.len()), "fuzz case {case} {format}: span out of range");
        }
    }
    Ok(format!(
        "{ROUND_TRIP_CASES} round trips x {} formats, {ROUND_TRIP_CASES} fuzzed strings",
        OutputFormat::ALL.len()
    ))
}

pub fn knn_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    for token_level in [false, true] {
        let records = tied_records(&mut rng, 10_000, 64, token_level);
        let store = Datastore::build(records.clone()).map_err(|e| e.to_string())?;
        for (i, q) in queries(&mut rng, &records, 100, 64).iter().enumerate() {
            let got = if token_level { store.knn(q, 32) } else { store.knn_sentences(q, 32) };
            let got = got.map_err(|e| e.to_string())?;
            ensure!(
                same_neighbors(&got, &brute_force_knn(&records, q, 32)),
                "query {i} (token level {token_level}) differs from the linear scan"
            );
        }
    }
    let trials = 500;
    for trial in 0..trials {
        let n = rng.gen_range(1..=32);
        let records = tied_records(&mut rng, n, 4, true);
        let store = Datastore::build(records.clone()).map_err(|e| e.to_string())?;
        let nq = rng.gen_range(1..=4);
        let qs = queries(&mut rng, &records, nq, 4);
        let (fanout, k) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let tagged: Vec<(u32, Vec<f32>)> = qs.iter().cloned().enumerate().map(|(i, v)| (i as u32, v)).collect();
        let got = store.retrieve_token_demos(&tagged, fanout, k).map_err(|e| e.to_string())?;
        let want = pooled_oracle(&records, &qs, fanout, k);
        ensure!(got == want, "pooling trial {trial}: {got:?} vs {want:?}");
    }
    Ok(format!("2 x 100 queries on 10000x64 stores, {trials} pooling enumerations"))
}

/// Trimming keeps a prefix of the best-first demo list: the dropped ranks
/// are exactly the tail after the kept demos.
fn tail_dropped(d: &TypeDiagnostics, retrieved: usize) -> bool {
    let kept = d.demo_ids.len();
    kept + d.dropped_ranks.len() == retrieved && d.dropped_ranks.iter().copied().eq(kept..retrieved)
}

pub fn budget_law() -> Outcome {
    let fx = fixture();
    let config = RunConfig {
        k: 32,
        ..Default::default()
    };
    let limit = config.prompt_limit();
    ensure!(limit == 3584, "prompt limit {limit}");
    let gold = Arc::new(GoldIndex::new(&fx.test, &fx.schema));
    let backend = Recorder::new(OracleMock::new(gold, config.format));
    let p = Pipeline::new(&config, &fx.schema, &fx.train, &fx.stores, &backend);
    let out = run_corpus(&p, &fx.test).map_err(|e| e.to_string())?;
    let prompts = backend.take();
    ensure!(prompts.len() == fx.test.len() * fx.schema.len(), "{} prompts sent", prompts.len());
    let worst = prompts.iter().map(|t| estimate_tokens(t, 1.3)).max().unwrap_or(0);
    ensure!(worst <= limit, "a prompt estimates to {worst} tokens");

    let mut trimmed = 0;
    for prediction in &out.predictions {
        let sentence = fx.test.get(prediction.id).ok_or("unknown id")?;
        for d in &prediction.diagnostics.types {
            if d.dropped_ranks.is_empty() {
                continue;
            }
            trimmed += 1;
            let mut scratch = TypeDiagnostics::default();
            let ranked = p.select_demos(sentence, &d.ty, &mut scratch).map_err(|e| e.to_string())?;
            ensure!(tail_dropped(d, ranked.len()), "sentence {} {}: dropped {:?}", prediction.id, d.ty, d.dropped_ranks);
            ensure!(ranked[..d.demo_ids.len()] == d.demo_ids[..], "sentence {} {}: kept demos are not the nearest", prediction.id, d.ty);
        }
    }
    ensure!(trimmed > 0, "no prompt needed trimming at k=32");
    ensure!(out.manifest.max_prompt_tokens <= limit, "manifest max {}", out.manifest.max_prompt_tokens);
    Ok(format!("{} prompts, max estimate {worst} <= {limit}, {trimmed} trimmed from the tail", prompts.len()))
}

pub fn golden_prompts() -> Outcome {
    for (name, rendered) in [
        ("prompts/extraction_loc.txt", sample_extraction_prompt()),
        ("prompts/verification_loc.txt", sample_verification_prompt()),
    ] {
        let golden = std::fs::read(fixture_path(name)).map_err(|e| format!("{name}: {e}"))?;
        ensure!(rendered.as_bytes() == golden.as_slice(), "{name} differs from the rendered prompt");
    }
    Ok("extraction and verification prompts match byte for byte".into())
}

const SCORER_GOLD: &str = "\
Paris S-LOC
and O
New B-ORG
York E-ORG
. O

John B-PER
Smith E-PER
won O

Rome S-LOC
";

fn scorer_case(preds: &[(u32, usize, usize, &str)]) -> Result<(LabeledCorpus, Vec<PredictionSet>), String> {
    let schema = Schema::conll03();
    let gold = parse_conll(SCORER_GOLD, &schema, ConllOptions::default()).map_err(|e| e.to_string())?;
    let mut sets: Vec<PredictionSet> = gold
        .ids()
        .map(|id| PredictionSet {
            id,
            spans: Vec::new(),
            diagnostics: Default::default(),
        })
        .collect();
    for &(id, a, b, ty) in preds {
        let s = gold.get(id).ok_or("bad id")?;
        let span = iclner::corpus::EntitySpan::new(s, a, b, ty).map_err(|e| e.to_string())?;
        let set = sets.iter_mut().find(|p| p.id == id).ok_or("bad id")?;
        set.spans.push(PredictedSpan {
            span,
            provenance: Provenance::Raw,
        });
    }
    Ok((gold, sets))
}

pub fn scorer_oracle() -> Outcome {
    type Case<'a> = (&'a str, Vec<(u32, usize, usize, &'a str)>, (usize, usize, usize), (f64, f64, f64));
    let all_gold = vec![(0, 0, 0, "LOC"), (0, 2, 3, "ORG"), (1, 0, 1, "PER"), (2, 0, 0, "LOC")];
    let cases: Vec<Case> = vec![
        ("perfect", all_gold.clone(), (4, 0, 0), (1.0, 1.0, 1.0)),
        (
            "half precision",
            [all_gold.clone(), vec![(0, 4, 4, "MISC"), (1, 2, 2, "ORG"), (2, 0, 0, "PER"), (1, 1, 1, "PER")]].concat(),
            (4, 4, 0),
            (0.5, 1.0, 0.6667),
        ),
        ("left boundary", vec![(0, 3, 3, "ORG")], (0, 1, 4), (0.0, 0.0, 0.0)),
        ("right boundary", vec![(1, 0, 2, "PER")], (0, 1, 4), (0.0, 0.0, 0.0)),
        ("wrong type", vec![(0, 0, 0, "ORG"), (2, 0, 0, "MISC")], (0, 2, 4), (0.0, 0.0, 0.0)),
        ("no predictions", vec![], (0, 0, 4), (1.0, 0.0, 0.0)),
        ("duplicates count once", vec![(0, 0, 0, "LOC"), (0, 0, 0, "LOC")], (1, 0, 3), (1.0, 0.25, 0.4)),
        (
            "three of four",
            vec![(0, 0, 0, "LOC"), (0, 2, 3, "ORG"), (1, 0, 0, "PER"), (2, 0, 0, "LOC")],
            (3, 1, 1),
            (0.75, 0.75, 0.75),
        ),
    ];
    let round = |x: f64| (x * 10_000.0).round() / 10_000.0;
    for (name, preds, (tp, fp, fn_), (p, r, f)) in &cases {
        let (gold, sets) = scorer_case(preds)?;
        let s = scored(&sets, &gold)?;
        let m: &ScoreTriple = &s.micro;
        ensure!((m.tp, m.fp, m.fn_) == (*tp, *fp, *fn_), "{name}: counts {:?}", (m.tp, m.fp, m.fn_));
        let got = (round(m.precision), round(m.recall), round(m.f1));
        ensure!(got == (*p, *r, *f), "{name}: got {got:?}, expected {:?}", (p, r, f));
    }
    Ok(format!("{} hand-computed cases", cases.len()))
}

pub fn low_resource() -> Outcome {
    let fx = fixture();
    for seed in 0..100 {
        let (seedset, slots) = build_8sent_seedset(&fx.train, seed).map_err(|e| format!("seed {seed}: {e}"))?;
        ensure!(seedset.len() == 8 && slots.len() == 8, "seed {seed}: {} sentences", seedset.len());
        for ty in fx.schema.names() {
            let has = |id| seedset.gold(id).iter().any(|s| s.ty == ty);
            ensure!(seedset.ids().any(has), "seed {seed}: no positive for {ty}");
            ensure!(seedset.ids().any(|id| !has(id)), "seed {seed}: no negative for {ty}");
        }
    }
    let sizes = [8, 50, 100, 240];
    for seed in [0, 1, 42] {
        let a = low_resource_splits(&fx.train, &sizes, seed).map_err(|e| e.to_string())?;
        let b = low_resource_splits(&fx.train, &sizes, seed).map_err(|e| e.to_string())?;
        let ids = |c: &LabeledCorpus| c.ids().collect::<BTreeSet<_>>();
        for (i, split) in a.iter().enumerate() {
            ensure!(split.len() == sizes[i], "seed {seed}: split {i} has {}", split.len());
            ensure!(ids(split) == ids(&b[i]), "seed {seed}: split {i} not deterministic");
            if i > 0 {
                ensure!(ids(&a[i - 1]).is_subset(&ids(split)), "seed {seed}: split {i} not nested");
            }
        }
    }
    Ok(format!("100 seeds satisfy the seed-set constraint, splits {sizes:?} nested and repeatable"))
}

fn determinism_run(fx: &Fixture) -> Result<(String, String), String> {
    let gold = Arc::new(GoldIndex::new(&fx.test, &fx.schema));
    let over = OverpredictMock::new(gold.clone(), OutputFormat::AtMarker, 0.3, 7);
    let yes_no = YesNoOracleMock::new(gold);
    let config = RunConfig {
        verification: Verification::FewShot,
        workers: 8,
        ..Default::default()
    };
    let p = Pipeline::new(&config, &fx.schema, &fx.train, &fx.stores, &over).with_verify_backend(&yes_no);
    let jsonl = predictions_to_jsonl(&run_corpus(&p, &fx.test).map_err(|e| e.to_string())?.predictions);

    let subset = iclner::evalkit::sample_test_subset(&fx.test, 50, 3).map_err(|e| e.to_string())?;
    let template = RunConfig::default();
    let rows = ablate_kshot("fixture", &template, &[2, 8], Retrieval::ALL, &subset, |c| {
        let p = Pipeline::new(c, &fx.schema, &fx.train, &fx.stores, &over).with_verify_backend(&yes_no);
        run_corpus(&p, &subset).map(|o| o.predictions)
    })
    .map_err(|e| e.to_string())?;
    Ok((jsonl, results_csv(&rows).map_err(|e| e.to_string())?))
}

pub fn determinism() -> Outcome {
    let fx = fixture();
    ensure!(fx.test.mode() == CorpusMode::Flat, "fixture should be flat");
    let (jsonl_a, csv_a) = determinism_run(&fx)?;
    let (jsonl_b, csv_b) = determinism_run(&fx)?;
    ensure!(jsonl_a == jsonl_b, "prediction JSONL differs between runs");
    ensure!(csv_a == csv_b, "results CSV differs between runs");
    Ok(format!("{} JSONL bytes and {} CSV bytes identical", jsonl_a.len(), csv_a.len()))
}

pub const ALL: &[(&str, fn() -> Outcome)] = &[
    ("oracle identity", oracle_identity),
    ("hallucination filter", hallucination_filter),
    ("markup round trip", markup_round_trip),
    ("kNN exactness", knn_exactness),
    ("budget law", budget_law),
    ("golden prompts", golden_prompts),
    ("scorer oracle", scorer_oracle),
    ("low-resource protocol", low_resource),
    ("determinism", determinism),
];
