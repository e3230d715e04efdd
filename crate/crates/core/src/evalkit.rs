//! Span-level scoring, test/train subset construction and ablation sweeps.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LabeledCorpus, Schema, SentenceId};
use crate::markup::OutputFormat;
use crate::pipeline::{PipelineError, PredictionSet, Retrieval, RunConfig, Verification};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction for sentence {0}, which is not in the gold corpus")]
    UnknownSentenceId(SentenceId),
    #[error("cannot draw {requested} sentences from a corpus of {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("split sizes must be non-decreasing, got {0:?}")]
    UnorderedSizes(Vec<usize>),
    #[error("seed set unsatisfiable: {0}")]
    Unsatisfiable(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Precision, recall and F1 with the counts they come from.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ScoreTriple {
    /// Precision is 1 when nothing is predicted, recall is 1 when there is
    /// nothing to find, and F1 is 0 when both are 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

/// Micro-averaged scores plus a per-type breakdown.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Score {
    pub micro: ScoreTriple,
    pub per_type: BTreeMap<String, ScoreTriple>,
    /// Unweighted mean of the per-type F1 values.
    pub macro_f1: f64,
}

/// Exact-match span scoring: a prediction counts only when start, end and
/// type all equal a gold span. Duplicate predictions count once. Gold
/// sentences without a prediction line contribute only false negatives.
pub fn score(predictions: &[PredictionSet], gold: &LabeledCorpus) -> Result<Score, EvalError> {
    type Key = (SentenceId, usize, usize, String);
    let mut pred: BTreeSet<Key> = BTreeSet::new();
    for p in predictions {
        if !gold.contains(p.id) {
            return Err(EvalError::UnknownSentenceId(p.id));
        }
        for s in &p.spans {
            pred.insert((p.id, s.span.start, s.span.end, s.span.ty.clone()));
        }
    }
    let truth: BTreeSet<Key> = gold
        .ids()
        .flat_map(|id| gold.gold(id).iter().map(move |s| (id, s.start, s.end, s.ty.clone())))
        .collect();

    let mut counts: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for k in &pred {
        let c = counts.entry(k.3.clone()).or_default();
        if truth.contains(k) {
            c.0 += 1;
        } else {
            c.1 += 1;
        }
    }
    for k in truth.difference(&pred) {
        counts.entry(k.3.clone()).or_default().2 += 1;
    }
    let (tp, fp, fn_) = counts
        .values()
        .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    let per_type: BTreeMap<String, ScoreTriple> = counts
        .into_iter()
        .map(|(ty, (tp, fp, fn_))| (ty, ScoreTriple::from_counts(tp, fp, fn_)))
        .collect();
    let macro_f1 = if per_type.is_empty() {
        0.0
    } else {
        per_type.values().map(|s| s.f1).sum::<f64>() / per_type.len() as f64
    };
    Ok(Score {
        micro: ScoreTriple::from_counts(tp, fp, fn_),
        per_type,
        macro_f1,
    })
}

fn shuffled_ids(corpus: &LabeledCorpus, seed: u64) -> Vec<SentenceId> {
    let mut ids: Vec<SentenceId> = corpus.ids().collect();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids
}

/// `n` distinct sentences chosen uniformly with `seed`, returned in id
/// order.
pub fn sample_test_subset(corpus: &LabeledCorpus, n: usize, seed: u64) -> Result<LabeledCorpus, EvalError> {
    if n > corpus.len() {
        return Err(EvalError::SampleTooLarge {
            requested: n,
            available: corpus.len(),
        });
    }
    let mut ids = shuffled_ids(corpus, seed);
    ids.truncate(n);
    ids.sort_unstable();
    Ok(corpus.subset(&ids))
}

/// Training subsets of the given sizes, each a prefix of one seeded
/// shuffle, so every split contains all smaller ones. Sentences within a
/// split are in id order.
pub fn low_resource_splits(corpus: &LabeledCorpus, sizes: &[usize], seed: u64) -> Result<Vec<LabeledCorpus>, EvalError> {
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(EvalError::UnorderedSizes(sizes.to_vec()));
    }
    if let Some(&largest) = sizes.last() {
        if largest > corpus.len() {
            return Err(EvalError::SampleTooLarge {
                requested: largest,
                available: corpus.len(),
            });
        }
    }
    let order = shuffled_ids(corpus, seed);
    Ok(sizes
        .iter()
        .map(|&n| {
            let mut ids = order[..n].to_vec();
            ids.sort_unstable();
            corpus.subset(&ids)
        })
        .collect())
}

/// One slot of the seed set: a sentence that does (positive) or does not
/// (negative) contain an entity of `ty`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSlot {
    #[serde(rename = "type")]
    pub ty: String,
    pub positive: bool,
    pub sentence_id: SentenceId,
}

fn assign(slots: &[Vec<SentenceId>], order: &[usize], at: usize, used: &mut HashSet<SentenceId>, out: &mut [SentenceId]) -> bool {
    let Some(&slot) = order.get(at) else {
        return true;
    };
    // A slot with at least `slots.len()` candidates always has a free one
    // among its first `slots.len()`.
    for &id in slots[slot].iter().take(slots.len()) {
        if used.insert(id) {
            out[slot] = id;
            if assign(slots, order, at + 1, used, out) {
                return true;
            }
            used.remove(&id);
        }
    }
    false
}

/// For every schema type, one sentence containing the type and one
/// containing none of it, all distinct: `2 * |schema|` sentences. Each slot
/// draws from its own seeded shuffle; a sentence already taken is skipped
/// and the next candidate drawn.
pub fn build_seedset(corpus: &LabeledCorpus, schema: &Schema, seed: u64) -> Result<(LabeledCorpus, Vec<SeedSlot>), EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::new();
    let mut slots = Vec::new();
    let mut ids: Vec<SentenceId> = corpus.ids().collect();
    ids.sort_unstable();
    for ty in schema.names() {
        for positive in [true, false] {
            let mut candidates: Vec<SentenceId> =
                ids.iter().copied().filter(|&id| corpus.has_type(id, ty) == positive).collect();
            if candidates.is_empty() {
                return Err(EvalError::Unsatisfiable(format!(
                    "no sentence {} {ty}",
                    if positive { "contains" } else { "lacks" }
                )));
            }
            candidates.shuffle(&mut rng);
            labels.push((ty.to_owned(), positive));
            slots.push(candidates);
        }
    }
    let mut order: Vec<usize> = (0..slots.len()).collect();
    order.sort_by_key(|&i| (slots[i].len(), i));
    let mut chosen = vec![0; slots.len()];
    if !assign(&slots, &order, 0, &mut HashSet::new(), &mut chosen) {
        return Err(EvalError::Unsatisfiable(
            "not enough distinct sentences to fill every slot".into(),
        ));
    }
    let seeds: Vec<SeedSlot> = labels
        .into_iter()
        .zip(&chosen)
        .map(|((ty, positive), &sentence_id)| SeedSlot {
            ty,
            positive,
            sentence_id,
        })
        .collect();
    let mut sorted = chosen.clone();
    sorted.sort_unstable();
    Ok((corpus.subset(&sorted), seeds))
}

/// The CoNLL seed set: eight sentences over LOC, ORG, PER and MISC.
pub fn build_8sent_seedset(corpus: &LabeledCorpus, seed: u64) -> Result<(LabeledCorpus, Vec<SeedSlot>), EvalError> {
    build_seedset(corpus, &Schema::conll03(), seed)
}

/// Checks the one-positive-one-negative-per-type constraint.
pub fn seedset_satisfies(corpus: &LabeledCorpus, schema: &Schema, seeds: &[SeedSlot]) -> bool {
    let distinct: HashSet<SentenceId> = seeds.iter().map(|s| s.sentence_id).collect();
    distinct.len() == seeds.len()
        && seeds.len() == 2 * schema.len()
        && schema.names().all(|ty| {
            [true, false].iter().all(|&positive| {
                seeds
                    .iter()
                    .filter(|s| s.ty == ty && s.positive == positive)
                    .all(|s| corpus.has_type(s.sentence_id, ty) == positive)
                    && seeds.iter().filter(|s| s.ty == ty && s.positive == positive).count() == 1
            })
        })
}

pub const CSV_HEADER: [&str; 12] = [
    "run_id",
    "dataset",
    "retrieval",
    "format",
    "k",
    "verification",
    "precision",
    "recall",
    "f1",
    "tp",
    "fp",
    "fn",
];

/// One row of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub run_id: String,
    pub dataset: String,
    pub retrieval: Retrieval,
    pub format: OutputFormat,
    pub k: usize,
    pub verification: Verification,
    pub score: ScoreTriple,
}

impl ResultRow {
    pub fn new(dataset: &str, config: &RunConfig, score: ScoreTriple) -> Self {
        Self {
            run_id: format!(
                "{dataset}-{}-{}-k{}-{}",
                config.retrieval, config.format, config.k, config.verification
            ),
            dataset: dataset.to_owned(),
            retrieval: config.retrieval,
            format: config.format,
            k: config.k,
            verification: config.verification,
            score,
        }
    }

    fn record(&self) -> [String; 12] {
        let s = &self.score;
        [
            self.run_id.clone(),
            self.dataset.clone(),
            self.retrieval.to_string(),
            self.format.to_string(),
            self.k.to_string(),
            self.verification.to_string(),
            format!("{:.4}", s.precision),
            format!("{:.4}", s.recall),
            format!("{:.4}", s.f1),
            s.tp.to_string(),
            s.fp.to_string(),
            s.fn_.to_string(),
        ]
    }
}

pub fn results_csv(rows: &[ResultRow]) -> Result<String, EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Runs every configuration with `run` and scores it against `gold`.
pub fn sweep(
    dataset: &str,
    configs: &[RunConfig],
    gold: &LabeledCorpus,
    mut run: impl FnMut(&RunConfig) -> Result<Vec<PredictionSet>, PipelineError>,
) -> Result<Vec<ResultRow>, EvalError> {
    configs
        .iter()
        .map(|c| {
            let predictions = run(c)?;
            Ok(ResultRow::new(dataset, c, score(&predictions, gold)?.micro))
        })
        .collect()
}

/// One run per (retrieval, k), in that nesting order.
pub fn ablate_kshot(
    dataset: &str,
    template: &RunConfig,
    ks: &[usize],
    retrievals: &[Retrieval],
    gold: &LabeledCorpus,
    run: impl FnMut(&RunConfig) -> Result<Vec<PredictionSet>, PipelineError>,
) -> Result<Vec<ResultRow>, EvalError> {
    let configs: Vec<RunConfig> = retrievals
        .iter()
        .flat_map(|&retrieval| {
            ks.iter().map(move |&k| RunConfig {
                retrieval,
                k,
                ..template.clone()
            })
        })
        .collect();
    sweep(dataset, &configs, gold, run)
}

/// One run per output format on the same test set and backend.
pub fn ablate_format(
    dataset: &str,
    template: &RunConfig,
    formats: &[OutputFormat],
    gold: &LabeledCorpus,
    run: impl FnMut(&RunConfig) -> Result<Vec<PredictionSet>, PipelineError>,
) -> Result<Vec<ResultRow>, EvalError> {
    let configs: Vec<RunConfig> = formats
        .iter()
        .map(|&format| RunConfig {
            format,
            ..template.clone()
        })
        .collect();
    sweep(dataset, &configs, gold, run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_conll, ConllOptions, EntitySpan, Sentence};
    use crate::pipeline::{PredictedSpan, Provenance, SentenceDiagnostics};

    fn gold_corpus(text: &str) -> LabeledCorpus {
        parse_conll(text, &Schema::conll03(), ConllOptions::default()).unwrap()
    }

    fn pred(corpus: &LabeledCorpus, id: SentenceId, spans: &[(usize, usize, &str)]) -> PredictionSet {
        let s: &Sentence = corpus.get(id).unwrap();
        PredictionSet {
            id,
            spans: spans
                .iter()
                .map(|&(a, b, t)| PredictedSpan {
                    span: EntitySpan::new(s, a, b, t).unwrap(),
                    provenance: Provenance::Raw,
                })
                .collect(),
            diagnostics: SentenceDiagnostics::default(),
        }
    }

    const ONE_LOC: &str = "Paris B-LOC\nis O\nnice O\ntoday O\n";

    #[test]
    fn half_precision_case() {
        let g = gold_corpus(ONE_LOC);
        let s = score(&[pred(&g, 0, &[(0, 0, "LOC"), (3, 3, "LOC")])], &g).unwrap().micro;
        assert_eq!((s.tp, s.fp, s.fn_), (1, 1, 0));
        assert_eq!(s.precision, 0.5);
        assert_eq!(s.recall, 1.0);
        assert_eq!(format!("{:.4}", s.f1), "0.6667");
    }

    #[test]
    fn boundary_mismatch_scores_zero() {
        let g = gold_corpus("Acme B-ORG\nCorp I-ORG\nwins O\n");
        let s = score(&[pred(&g, 0, &[(0, 0, "ORG")])], &g).unwrap().micro;
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn type_mismatch_scores_zero() {
        let g = gold_corpus(ONE_LOC);
        let s = score(&[pred(&g, 0, &[(0, 0, "ORG")])], &g).unwrap();
        assert_eq!((s.micro.tp, s.micro.fp, s.micro.fn_), (0, 1, 1));
        assert_eq!(s.per_type["LOC"].recall, 0.0);
        assert_eq!(s.per_type["ORG"].precision, 0.0);
    }

    #[test]
    fn empty_prediction_and_empty_gold_conventions() {
        let g = gold_corpus(ONE_LOC);
        let s = score(&[], &g).unwrap().micro;
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 0.0, 0.0));
        let none = gold_corpus("a O\nb O\n");
        let s = score(&[pred(&none, 0, &[])], &none).unwrap().micro;
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn duplicates_collapse() {
        let g = gold_corpus(ONE_LOC);
        let mut p = pred(&g, 0, &[(0, 0, "LOC"), (0, 0, "LOC")]);
        p.spans[1].provenance = Provenance::Verified;
        let s = score(&[p.clone(), p], &g).unwrap().micro;
        assert_eq!((s.tp, s.fp, s.fn_), (1, 0, 0));
    }

    #[test]
    fn unknown_sentence_is_an_error() {
        let g = gold_corpus(ONE_LOC);
        let mut p = pred(&g, 0, &[]);
        p.id = 9;
        assert!(matches!(score(&[p], &g), Err(EvalError::UnknownSentenceId(9))));
    }

    #[test]
    fn csv_layout() {
        let rows = [ResultRow::new("fixture", &RunConfig::default(), ScoreTriple::from_counts(1, 1, 0))];
        let csv = results_csv(&rows).unwrap();
        assert_eq!(
            csv,
            "run_id,dataset,retrieval,format,k,verification,precision,recall,f1,tp,fp,fn\n\
             fixture-entity-atmarker-k8-off,fixture,entity,atmarker,8,off,0.5000,1.0000,0.6667,1,1,0\n"
        );
    }

    const SEED_CORPUS: &str = "\
Paris B-LOC
. O

Acme B-ORG
. O

John B-PER
. O

Dutch B-MISC
. O

nothing O
. O
";

    #[test]
    fn seedset_picks_distinct_sentences() {
        let g = gold_corpus(SEED_CORPUS);
        let schema = Schema::conll03();
        let extra: String = (0..4).map(|i| format!("\nx{i} O\n")).collect();
        let g2 = gold_corpus(&format!("{SEED_CORPUS}{extra}"));
        for seed in 0..20 {
            let (sub, seeds) = build_seedset(&g2, &schema, seed).unwrap();
            assert_eq!(sub.len(), 8);
            assert!(seedset_satisfies(&g2, &schema, &seeds));
        }
        // Five sentences cannot fill eight distinct slots.
        assert!(matches!(build_seedset(&g, &schema, 0), Err(EvalError::Unsatisfiable(_))));
    }

    #[test]
    fn seedset_without_misc_positive_is_unsatisfiable() {
        let g = gold_corpus("Paris B-LOC\n\nAcme B-ORG\n\nJohn B-PER\n\na O\n\nb O\n\nc O\n\nd O\n\ne O\n");
        let err = build_seedset(&g, &Schema::conll03(), 3).unwrap_err();
        assert!(err.to_string().contains("MISC"), "{err}");
    }

    #[test]
    fn splits_are_nested_and_seeded() {
        let text: String = (0..50).map(|i| format!("w{i} O\n\n")).collect();
        let g = gold_corpus(&text);
        let a = low_resource_splits(&g, &[2, 8, 20, 50], 11).unwrap();
        let b = low_resource_splits(&g, &[2, 8, 20, 50], 11).unwrap();
        for w in a.windows(2) {
            let small: HashSet<_> = w[0].ids().collect();
            assert!(small.iter().all(|&id| w[1].contains(id)));
        }
        let ids = |c: &[LabeledCorpus]| c.iter().map(|x| x.ids().collect::<Vec<_>>()).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        assert!(low_resource_splits(&g, &[8, 2], 0).is_err());
        assert!(low_resource_splits(&g, &[51], 0).is_err());
    }

    #[test]
    fn test_subset_is_seeded() {
        let text: String = (0..30).map(|i| format!("w{i} O\n\n")).collect();
        let g = gold_corpus(&text);
        let a: Vec<_> = sample_test_subset(&g, 10, 5).unwrap().ids().collect();
        let b: Vec<_> = sample_test_subset(&g, 10, 5).unwrap().ids().collect();
        let c: Vec<_> = sample_test_subset(&g, 10, 6).unwrap().ids().collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.iter().collect::<HashSet<_>>().len(), 10);
    }

    proptest::proptest! {
        #[test]
        fn score_counts_and_monotonicity(
            gold_bits in proptest::collection::vec(proptest::bool::ANY, 12),
            pred_bits in proptest::collection::vec(proptest::bool::ANY, 12),
        ) {
            let text = "a O\nb O\nc O\nd O\ne O\nf O\n";
            let g0 = gold_corpus(text);
            let s = g0.get(0).unwrap().clone();
            let types = ["LOC", "PER"];
            let make = |bits: &[bool]| -> Vec<EntitySpan> {
                bits.iter().enumerate().filter(|(_, &b)| b)
                    .map(|(i, _)| EntitySpan::new(&s, i % 6, i % 6, types[i / 6]).unwrap())
                    .collect()
            };
            let gold_spans = make(&gold_bits);
            let g = LabeledCorpus::new(vec![s.clone()], [(0, gold_spans.clone())].into(), crate::corpus::CorpusMode::Nested, &Schema::conll03()).unwrap();
            let p = PredictionSet {
                id: 0,
                spans: make(&pred_bits).into_iter().map(|span| PredictedSpan { span, provenance: Provenance::Raw }).collect(),
                diagnostics: SentenceDiagnostics::default(),
            };
            let sc = score(std::slice::from_ref(&p), &g).unwrap().micro;
            proptest::prop_assert_eq!(sc.tp + sc.fn_, gold_spans.len());
            proptest::prop_assert_eq!(sc.tp + sc.fp, p.spans.len());

            let self_score = score(&[PredictionSet { spans: gold_spans.iter().cloned().map(|span| PredictedSpan { span, provenance: Provenance::Raw }).collect(), ..p.clone() }], &g).unwrap().micro;
            proptest::prop_assert_eq!((self_score.precision, self_score.recall), (1.0, 1.0));

            // One more false positive lowers precision and keeps recall.
            if let Some(i) = (0..12).find(|&i| !gold_bits[i] && !pred_bits[i]) {
                let mut q = p.clone();
                q.spans.push(PredictedSpan { span: EntitySpan::new(&s, i % 6, i % 6, types[i / 6]).unwrap(), provenance: Provenance::Raw });
                let sq = score(&[q], &g).unwrap().micro;
                if sc.precision > 0.0 {
                    proptest::prop_assert!(sq.precision < sc.precision);
                } else {
                    proptest::prop_assert_eq!(sq.precision, 0.0);
                }
                proptest::prop_assert_eq!(sq.recall, sc.recall);
            }
        }
    }
}
