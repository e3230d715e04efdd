#![allow(dead_code)]

pub mod criteria;

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::Mutex;

use iclner::corpus::{load_conll, EntitySpan, LabeledCorpus, Schema, Sentence};
use iclner::embedstore::{synthetic, write_emb1, Datastore, Level, Neighbor, RecordKey, VectorRecord};
use iclner::llmgate::{Backend, CompletionRequest, CompletionResponse, LlmError};
use iclner::markup::encode_atmarker;
use iclner::pipeline::Stores;
use iclner::promptkit::{
    render_extraction_prompt, render_verification_prompt, DemoOrder, ExtractionDemo, PromptSpec, VerificationDemo,
    VerificationSpec,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const EMB_DIM: usize = 32;
pub const EMB_SEED: u64 = 1;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub struct Fixture {
    pub schema: Schema,
    pub train: LabeledCorpus,
    pub test: LabeledCorpus,
    pub stores: Stores,
}

/// The CoNLL-style fixture with synthetic random vectors, written to EMB1
/// files and loaded back.
pub fn fixture() -> Fixture {
    let schema = Schema::conll03();
    let train = load_conll(fixture_path("conll_train.txt"), &schema).unwrap();
    let test = load_conll(fixture_path("conll_test.txt"), &schema).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = |name: &str, level: Level, records: Vec<VectorRecord>| {
        let path = dir.path().join(name);
        write_emb1(&path, level, &records).unwrap();
        Some(Datastore::load_emb1(&path).unwrap())
    };
    let stores = Stores {
        train_sentence: store("train.sent.emb1", Level::Sentence, synthetic::sentence_records(&train, EMB_DIM, EMB_SEED)),
        test_sentence: store("test.sent.emb1", Level::Sentence, synthetic::sentence_records(&test, EMB_DIM, EMB_SEED)),
        train_token: store("train.tok.emb1", Level::Token, synthetic::token_records(&train, EMB_DIM, EMB_SEED)),
        test_token: store("test.tok.emb1", Level::Token, synthetic::token_records(&test, EMB_DIM, EMB_SEED)),
        query_entities: None,
    };
    Fixture {
        schema,
        train,
        test,
        stores,
    }
}

/// Records every prompt passed to the wrapped backend.
pub struct Recorder<B> {
    pub inner: B,
    pub prompts: Mutex<Vec<String>>,
}

impl<B> Recorder<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn take(&self) -> Vec<String> {
        std::mem::take(&mut self.prompts.lock().unwrap())
    }
}

impl<B: Backend> Backend for Recorder<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        self.prompts.lock().unwrap().push(request.prompt.clone());
        self.inner.complete(request)
    }
}

/// Tokens for round-trip sentences: plain words, tag-like and marker-like
/// strings, escapes, parentheses and non-ASCII. Tokens shaped like
/// `(3),` are left out: in entity+position output they are
/// indistinguishable from a position marker followed by a separator.
pub const ROUND_TRIP_TOKENS: &[&str] = &[
    "a", "b", "the", "of", "Paris", "New", "York", "None", "none", "O", "B-LOC", "S-PER", "M-X", "E-ORG",
    "@", "@@", "##", "#", "a@b", "x##y", "@@z##", "\\", "\\@", "(", ")", "(1)", "(12", "3)", ",", ".", "word,",
    "1996", "$", "'s", "e-mail", "ü", "日本", "Input:", "Output:", "yes", "No",
];

pub fn random_sentence(rng: &mut ChaCha8Rng, id: u32, max_len: usize) -> Sentence {
    let n = rng.gen_range(1..=max_len);
    let tokens = (0..n)
        .map(|_| ROUND_TRIP_TOKENS[rng.gen_range(0..ROUND_TRIP_TOKENS.len())].to_owned())
        .collect();
    Sentence::new(id, tokens).unwrap()
}

/// Random non-overlapping spans of one type, sorted.
pub fn random_spans(rng: &mut ChaCha8Rng, sentence: &Sentence, ty: &str) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < sentence.len() {
        if rng.gen_bool(0.3) {
            let len = rng.gen_range(1..=3).min(sentence.len() - i);
            spans.push(EntitySpan::new(sentence, i, i + len - 1, ty).unwrap());
            i += len + rng.gen_range(0..2);
        } else {
            i += 1;
        }
    }
    spans
}

/// Linear-scan kNN written from the definition: normalize in f64, store as
/// f32, accumulate the dot product in f64 in index order, sort by score
/// descending then key ascending.
pub fn brute_force_knn(records: &[VectorRecord], query: &[f32], k: usize) -> Vec<Neighbor> {
    fn unit(v: &[f32]) -> Vec<f32> {
        let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        v.iter().map(|&x| (x as f64 / norm) as f32).collect()
    }
    let q = unit(query);
    let mut all: Vec<Neighbor> = records
        .iter()
        .map(|r| {
            let v = unit(&r.vector);
            let mut dot = 0.0f64;
            for i in 0..v.len() {
                dot += q[i] as f64 * v[i] as f64;
            }
            Neighbor {
                key: RecordKey {
                    sentence_id: r.sentence_id,
                    token_index: r.token_index,
                },
                score: dot.clamp(-1.0, 1.0),
            }
        })
        .collect();
    all.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.key.sentence_id.cmp(&b.key.sentence_id))
            .then(a.key.token_index.cmp(&b.key.token_index))
    });
    all.truncate(k);
    all
}

/// Random store of `n` records with many exact duplicates, so ties occur.
pub fn tied_records(rng: &mut ChaCha8Rng, n: usize, dim: usize, token_level: bool) -> Vec<VectorRecord> {
    let distinct = (n / 4).max(1);
    let base: Vec<Vec<f32>> = (0..distinct)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
        .collect();
    (0..n)
        .map(|i| {
            let v = if rng.gen_bool(0.5) {
                base[rng.gen_range(0..distinct)].clone()
            } else {
                (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
            };
            let (sentence_id, token_index) = if token_level {
                ((i / 7) as u32, (i % 7) as u32)
            } else {
                ((n - i) as u32, u32::MAX)
            };
            VectorRecord {
                sentence_id,
                token_index,
                vector: v,
            }
        })
        .collect()
}

/// Query vectors: every third one copies a stored vector, so exact ties
/// with the query itself occur.
pub fn queries(rng: &mut ChaCha8Rng, records: &[VectorRecord], n: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|i| {
            if i % 3 == 0 {
                records[rng.gen_range(0..records.len())].vector.clone()
            } else {
                (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
            }
        })
        .collect()
}

/// Pooling oracle: every record's best score over the queries whose top
/// `fanout` contains it, then a best-first walk for distinct sentences.
pub fn pooled_oracle(records: &[VectorRecord], queries: &[Vec<f32>], fanout: usize, k: usize) -> Vec<u32> {
    let mut pool: Vec<Neighbor> = Vec::new();
    for q in queries {
        for n in brute_force_knn(records, q, fanout) {
            match pool.iter_mut().find(|p| p.key == n.key) {
                Some(p) if n.score > p.score => p.score = n.score,
                Some(_) => {}
                None => pool.push(n),
            }
        }
    }
    pool.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.key.cmp(&b.key)));
    let mut seen = HashSet::new();
    pool.iter()
        .map(|n| n.key.sentence_id)
        .filter(|s| seen.insert(*s))
        .take(k)
        .collect()
}

pub fn same_neighbors(got: &[Neighbor], want: &[Neighbor]) -> bool {
    got.len() == want.len()
        && got
            .iter()
            .zip(want)
            .all(|(g, w)| g.key == w.key && g.score.to_bits() == w.score.to_bits())
}

fn loc_demo(text: &str, locs: &[usize]) -> ExtractionDemo {
    let s = Sentence::from_text(0, text).unwrap();
    let spans: Vec<EntitySpan> = locs.iter().map(|&i| EntitySpan::new(&s, i, i, "LOC").unwrap()).collect();
    ExtractionDemo {
        input: s.text(),
        output: encode_atmarker(&s, &spans).unwrap().text,
    }
}

/// LOC extraction prompt with four demos, nearest first.
pub fn sample_extraction_prompt() -> String {
    let schema = Schema::conll03();
    let demos = vec![
        loc_demo("Columbus is a sailor", &[]),
        loc_demo("Columbus is a city", &[0]),
        loc_demo("China thanks Gabon for support on human rights .", &[0, 2]),
        loc_demo("China says militant Japan must face war past .", &[0, 3]),
    ];
    let mut spec = PromptSpec::new(schema.get("LOC").unwrap(), demos, "China says Taiwan spoils atmosphere for talks");
    spec.order = DemoOrder::NearestFirst;
    render_extraction_prompt(&spec).unwrap().text
}

/// LOC verification prompt with one demo answered yes.
pub fn sample_verification_prompt() -> String {
    let schema = Schema::conll03();
    let demos = vec![VerificationDemo {
        sentence: "Only France and Britain backed Fischler 's proposal".into(),
        word: "France".into(),
        answer: true,
    }];
    let spec = VerificationSpec::new(schema.get("LOC").unwrap(), demos, "Rare Hendrix song sells for $ 17", "Hendrix");
    render_verification_prompt(&spec).unwrap().text
}
