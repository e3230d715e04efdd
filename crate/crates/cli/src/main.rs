mod config;

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use iclner::corpus::{load_corpus, load_conll_with, ConllOptions, LabeledCorpus};
use iclner::embedstore::{read_emb1, synthetic, write_emb1, Datastore, Level, RecordKey, SENTENCE};
use iclner::evalkit::{results_csv, score, ResultRow, Score};
use iclner::llmgate::{
    ApiFlavor, Backend, CachedBackend, CopyMock, GatedBackend, GoldIndex, OpenAiBackend, OpenAiConfig, OracleMock,
    OverpredictMock, ScriptedMock, YesNoOracleMock,
};
use iclner::pipeline::{
    read_predictions, run_corpus, write_predictions, Pipeline, PipelineError, RunOutput, Stores,
};

use config::{FileConfig, Loaded};

const USAGE: u8 = 1;
const CONFIG: u8 = 2;
const DATA: u8 = 3;
const BACKEND: u8 = 4;

/// An error with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

trait Code<T> {
    fn code(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Code<T> for Result<T, E> {
    fn code(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

fn pipeline_code(e: &PipelineError) -> u8 {
    match e {
        PipelineError::Config(_) | PipelineError::UnknownType(_) => CONFIG,
        PipelineError::Backend { .. } => BACKEND,
        _ => DATA,
    }
}

#[derive(Parser)]
#[command(name = "iclner", version, about = "Named-entity recognition by in-context generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Sentence,
    Token,
}

impl From<LevelArg> for Level {
    fn from(l: LevelArg) -> Self {
        match l {
            LevelArg::Sentence => Level::Sentence,
            LevelArg::Token => Level::Token,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Checks a CoNLL or nested JSONL corpus against a schema.
    ValidateCorpus {
        path: PathBuf,
        #[arg(long, default_value = "conll03")]
        schema: String,
    },
    /// Checks an EMB1 file against the corpus it embeds.
    Index {
        #[arg(long, value_enum)]
        level: LevelArg,
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "conll03")]
        schema: String,
    },
    /// Runs the pipeline described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// `key=value`, applied on top of the config file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// Predictions JSONL; the manifest is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scores a predictions JSONL against a gold corpus.
    Score {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, default_value = "conll03")]
        schema: String,
        /// Write the CSV here instead of after the table.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Runs one configuration per combination of sweep values.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// `key=v1,v2,...`; several sweeps form a grid.
        #[arg(long = "sweep", value_name = "KEY=V1,V2", required = true)]
        sweeps: Vec<String>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// Results CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes deterministic stand-in embeddings for a corpus.
    SynthEmb {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        level: LevelArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "conll03")]
        schema: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::ValidateCorpus { path, schema } => validate_corpus(&path, &schema),
        Command::Index {
            level,
            emb,
            corpus,
            schema,
        } => index(level.into(), &emb, &corpus, &schema),
        Command::Run {
            config,
            overrides,
            workers,
            cache_dir,
            out,
        } => {
            let loaded = load_config(&config, overrides, workers, cache_dir, out)?;
            run(&loaded, &config)
        }
        Command::Score { pred, gold, schema, csv } => score_cmd(&pred, &gold, &schema, csv.as_deref()),
        Command::Ablate {
            config,
            sweeps,
            overrides,
            workers,
            cache_dir,
            out,
        } => ablate(&config, &sweeps, overrides, workers, cache_dir, out.as_deref()),
        Command::SynthEmb {
            corpus,
            level,
            out,
            dim,
            seed,
            schema,
        } => synth_emb(&corpus, level.into(), &out, dim, seed, &schema),
    }
}

fn load_config(
    path: &Path,
    mut overrides: Vec<String>,
    workers: Option<usize>,
    cache_dir: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<Loaded, Failure> {
    if let Some(w) = workers {
        overrides.push(format!("workers={w}"));
    }
    let mut loaded = config::load(path, &overrides).code(CONFIG)?;
    if let Some(dir) = cache_dir {
        loaded.overrides.push(format!("cache_dir={}", dir.display()));
        loaded.files.cache_dir = Some(dir);
    }
    if let Some(out) = out {
        loaded.overrides.push(format!("output={}", out.display()));
        loaded.files.output = Some(out);
    }
    Ok(loaded)
}

fn validate_corpus(path: &Path, schema: &str) -> Result<(), Failure> {
    let schema = config::schema(schema).code(CONFIG)?;
    let is_jsonl = matches!(path.extension().and_then(|e| e.to_str()), Some("jsonl") | Some("json"));
    let corpus = if is_jsonl {
        load_corpus(path, &schema).code(DATA)?
    } else {
        let strict = ConllOptions {
            strict: true,
            ..Default::default()
        };
        match load_conll_with(path, &schema, strict) {
            Ok(c) => c,
            Err(strict_err) => {
                let lenient = load_conll_with(path, &schema, ConllOptions::default());
                if lenient.is_ok() {
                    println!("repairable: {strict_err}");
                }
                return Err(Failure {
                    code: DATA,
                    error: anyhow!(strict_err).context(format!("{} is not clean", path.display())),
                });
            }
        }
    };
    println!("path: {}", path.display());
    println!("mode: {:?}", corpus.mode());
    println!("sentences: {}", corpus.len());
    println!("tokens: {}", corpus.total_tokens());
    println!("entities: {}", corpus.total_spans());
    for ty in schema.names() {
        let n: usize = corpus.ids().map(|id| corpus.gold_of_type(id, ty).count()).sum();
        println!("  {ty}: {n}");
    }
    println!("status: clean");
    Ok(())
}

fn expected_keys(corpus: &LabeledCorpus, level: Level) -> BTreeSet<RecordKey> {
    corpus
        .sentences()
        .iter()
        .flat_map(|s| match level {
            Level::Sentence => vec![RecordKey::sentence(s.id)],
            Level::Token => (0..s.len() as u32).map(|t| RecordKey::token(s.id, t)).collect(),
        })
        .collect()
}

fn show_keys(keys: &[&RecordKey]) -> String {
    let shown: Vec<String> = keys
        .iter()
        .take(10)
        .map(|k| {
            if k.token_index == SENTENCE {
                format!("{}", k.sentence_id)
            } else {
                format!("{}:{}", k.sentence_id, k.token_index)
            }
        })
        .collect();
    let more = if keys.len() > 10 { format!(" (+{} more)", keys.len() - 10) } else { String::new() };
    format!("{}{more}", shown.join(", "))
}

fn index(level: Level, emb: &Path, corpus_path: &Path, schema: &str) -> Result<(), Failure> {
    let schema = config::schema(schema).code(CONFIG)?;
    let corpus = load_corpus(corpus_path, &schema).code(DATA)?;
    let (file_level, records) = read_emb1(emb).code(DATA)?;
    if file_level != level {
        return Err(anyhow!("{} holds {file_level:?}-level vectors, expected {level:?}", emb.display())).code(DATA);
    }
    let found: BTreeSet<RecordKey> = records.iter().map(|r| r.key()).collect();
    let store = Datastore::build(records).code(DATA)?;
    let expected = expected_keys(&corpus, level);
    let missing: Vec<&RecordKey> = expected.difference(&found).collect();
    let extra: Vec<&RecordKey> = found.difference(&expected).collect();
    let covered = expected.len() - missing.len();
    println!("file: {}", emb.display());
    println!("level: {level:?}");
    println!("dim: {}", store.dim());
    println!("records: {}", store.len());
    println!("expected: {}", expected.len());
    println!(
        "coverage: {covered}/{} ({:.2}%)",
        expected.len(),
        100.0 * covered as f64 / expected.len().max(1) as f64
    );
    if !missing.is_empty() {
        println!("missing: {}", show_keys(&missing));
    }
    if !extra.is_empty() {
        println!("unexpected: {}", show_keys(&extra));
    }
    if store.len() != expected.len() || !missing.is_empty() || !extra.is_empty() {
        return Err(anyhow!(
            "record count {} does not match the corpus ({} expected)",
            store.len(),
            expected.len()
        ))
        .code(DATA);
    }
    Ok(())
}

fn build_backend(
    spec: &str,
    files: &FileConfig,
    loaded: &Loaded,
    gold: &Arc<GoldIndex>,
) -> Result<Box<dyn Backend>, Failure> {
    let format = loaded.run.format;
    let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
    let backend: Box<dyn Backend> = match (kind, arg) {
        ("mock", "copy") => Box::new(CopyMock),
        ("mock", "oracle") => Box::new(OracleMock::new(gold.clone(), format)),
        ("mock", "overpredict") => Box::new(
            OverpredictMock::new(gold.clone(), format, files.mock_rate, files.mock_seed)
                .with_cross_type(files.mock_cross_type),
        ),
        ("mock", "yesno") => Box::new(YesNoOracleMock::new(gold.clone())),
        ("mock", "scripted") => {
            let path = files
                .scripted_responses
                .as_ref()
                .ok_or_else(|| anyhow!("mock:scripted needs scripted_responses"))
                .code(CONFIG)?;
            Box::new(ScriptedMock::from_json_file(path).code(DATA)?)
        }
        ("openai", model) | ("openai-chat", model) if !model.is_empty() => {
            let flavor = if kind == "openai" { ApiFlavor::Completions } else { ApiFlavor::Chat };
            let cfg = OpenAiConfig::from_env(model, flavor).code(BACKEND)?;
            Box::new(OpenAiBackend::new(cfg).code(BACKEND)?)
        }
        _ => {
            return Err(anyhow!(
                "unknown backend `{spec}`; expected mock:copy|oracle|overpredict|yesno|scripted, openai:<model> or openai-chat:<model>"
            ))
            .code(CONFIG)
        }
    };
    Ok(backend)
}

type Cached = Arc<CachedBackend<GatedBackend<Box<dyn Backend>>>>;

/// Gates the backend to `workers` in-flight requests and, with a cache
/// directory, caches it.
fn wrap(inner: Box<dyn Backend>, loaded: &Loaded) -> Result<(Box<dyn Backend>, Option<Cached>), Failure> {
    let gated = GatedBackend::new(inner, loaded.run.workers)
        .with_min_interval(Duration::from_millis(loaded.files.min_interval_ms));
    match &loaded.files.cache_dir {
        Some(dir) => {
            let cached = Arc::new(CachedBackend::new(gated, dir).code(DATA)?);
            Ok((Box::new(cached.clone()), Some(cached)))
        }
        None => Ok((Box::new(gated), None)),
    }
}

fn load_store(path: &Option<PathBuf>) -> Result<Option<Datastore>, Failure> {
    path.as_ref()
        .map(|p| Datastore::load_emb1(p).with_context(|| format!("loading {}", p.display())))
        .transpose()
        .code(DATA)
}

fn git_describe() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_owned())
        .filter(|s| !s.is_empty())
}

/// Runs one loaded configuration and scores it against the test gold.
fn execute(loaded: &Loaded, config_path: &Path) -> Result<(RunOutput, Score), Failure> {
    let files = &loaded.files;
    let schema = config::schema(&files.schema).code(CONFIG)?;
    let train = load_corpus(&files.train, &schema).code(DATA)?;
    let test = load_corpus(&files.test, &schema).code(DATA)?;
    let query_entities = match &files.query_entities {
        Some(p) => {
            let preds = read_predictions(p).code(DATA)?;
            Some(preds.iter().map(|p| (p.id, p.plain_spans())).collect::<HashMap<_, _>>())
        }
        None => None,
    };
    let stores = Stores {
        train_sentence: load_store(&files.train_sentence_emb)?,
        test_sentence: load_store(&files.test_sentence_emb)?,
        train_token: load_store(&files.train_token_emb)?,
        test_token: load_store(&files.test_token_emb)?,
        query_entities,
    };
    let gold = Arc::new(GoldIndex::new(&test, &schema));
    let (backend, cache) = wrap(build_backend(&files.backend, files, loaded, &gold)?, loaded)?;
    let verify = match &files.verify_backend {
        Some(spec) => Some(wrap(build_backend(spec, files, loaded, &gold)?, loaded)?),
        None => None,
    };
    let mut pipeline = Pipeline::new(&loaded.run, &schema, &train, &stores, backend.as_ref());
    if let Some((v, _)) = &verify {
        pipeline = pipeline.with_verify_backend(v.as_ref());
    }
    let mut out = run_corpus(&pipeline, &test).map_err(|e| Failure {
        code: pipeline_code(&e),
        error: e.into(),
    })?;

    let m = &mut out.manifest;
    m.cache = cache.map(|c| c.stats());
    if let Some((_, Some(c))) = &verify {
        let s = c.stats();
        m.extra.insert("verify_cache".into(), format!("hits={} misses={}", s.hits, s.misses));
    }
    m.extra.insert("config_file".into(), config_path.display().to_string());
    m.extra.insert("overrides".into(), loaded.overrides.join(" "));
    if let Some(g) = git_describe() {
        m.extra.insert("git_describe".into(), g);
    }
    m.extra.extend(config::describe(files));
    let s = score(&out.predictions, &test).code(DATA)?;
    Ok((out, s))
}

fn dataset_name(files: &FileConfig) -> String {
    files.dataset.clone().unwrap_or_else(|| {
        files
            .test
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    })
}

fn manifest_path(predictions: &Path) -> PathBuf {
    predictions.with_extension("manifest.json")
}

fn run(loaded: &Loaded, config_path: &Path) -> Result<(), Failure> {
    let output = loaded
        .files
        .output
        .clone()
        .ok_or_else(|| anyhow!("no output path: set `output` in the config or pass --out"))
        .code(CONFIG)?;
    let (out, s) = execute(loaded, config_path)?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).code(DATA)?;
    }
    write_predictions(&output, &out.predictions).code(DATA)?;
    let manifest = serde_json::to_string_pretty(&out.manifest).code(DATA)?;
    std::fs::write(manifest_path(&output), manifest + "\n").code(DATA)?;
    let row = ResultRow::new(&dataset_name(&loaded.files), &loaded.run, s.micro);
    print!("{}", results_csv(&[row]).code(DATA)?);
    Ok(())
}

/// Expands `key=a,b` sweeps into the grid of override lists.
fn grid(sweeps: &[String]) -> anyhow::Result<Vec<Vec<String>>> {
    let mut combos: Vec<Vec<String>> = vec![Vec::new()];
    for sweep in sweeps {
        let (key, values) = config::split_assignment(sweep)?;
        let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            anyhow::bail!("sweep `{sweep}` has no values");
        }
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push(format!("{key}={v}"));
                    c
                })
            })
            .collect();
    }
    Ok(combos)
}

fn ablate(
    config_path: &Path,
    sweeps: &[String],
    overrides: Vec<String>,
    workers: Option<usize>,
    cache_dir: Option<PathBuf>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let mut rows = Vec::new();
    for combo in grid(sweeps).code(USAGE)? {
        let all: Vec<String> = overrides.iter().cloned().chain(combo).collect();
        let loaded = load_config(config_path, all, workers, cache_dir.clone(), None)?;
        let (_, s) = execute(&loaded, config_path)?;
        log::info!("{}: f1 {:.4}", loaded.overrides.join(" "), s.micro.f1);
        rows.push(ResultRow::new(&dataset_name(&loaded.files), &loaded.run, s.micro));
    }
    let csv = results_csv(&rows).code(DATA)?;
    match out {
        Some(p) => std::fs::write(p, csv).code(DATA),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn score_cmd(pred: &Path, gold: &Path, schema: &str, csv_out: Option<&Path>) -> Result<(), Failure> {
    let schema = config::schema(schema).code(CONFIG)?;
    let gold = load_corpus(gold, &schema).code(DATA)?;
    let predictions = read_predictions(pred).code(DATA)?;
    let s = score(&predictions, &gold).code(DATA)?;
    let mut rows: Vec<(String, _)> = s.per_type.iter().map(|(t, v)| (t.clone(), *v)).collect();
    rows.push(("micro".into(), s.micro));

    println!("{:<8} {:>9} {:>9} {:>9} {:>6} {:>6} {:>6}", "type", "precision", "recall", "f1", "tp", "fp", "fn");
    for (t, v) in &rows {
        println!(
            "{t:<8} {:>9.4} {:>9.4} {:>9.4} {:>6} {:>6} {:>6}",
            v.precision, v.recall, v.f1, v.tp, v.fp, v.fn_
        );
    }
    println!("macro-f1 {:.4}", s.macro_f1);

    let mut w = csv::Writer::from_writer(Vec::new());
    let record = |w: &mut csv::Writer<Vec<u8>>, r: [String; 7]| w.write_record(r);
    record(&mut w, ["type", "precision", "recall", "f1", "tp", "fp", "fn"].map(String::from)).code(DATA)?;
    for (t, v) in &rows {
        record(
            &mut w,
            [
                t.clone(),
                format!("{:.4}", v.precision),
                format!("{:.4}", v.recall),
                format!("{:.4}", v.f1),
                v.tp.to_string(),
                v.fp.to_string(),
                v.fn_.to_string(),
            ],
        )
        .code(DATA)?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow!("csv: {e}")).code(DATA)?;
    match csv_out {
        Some(p) => std::fs::write(p, bytes).code(DATA),
        None => {
            println!();
            print!("{}", String::from_utf8_lossy(&bytes));
            Ok(())
        }
    }
}

fn synth_emb(corpus: &Path, level: Level, out: &Path, dim: usize, seed: u64, schema: &str) -> Result<(), Failure> {
    if dim == 0 {
        return Err(anyhow!("dim must be positive")).code(USAGE);
    }
    let schema = config::schema(schema).code(CONFIG)?;
    let corpus = load_corpus(corpus, &schema).code(DATA)?;
    let records = match level {
        Level::Sentence => synthetic::sentence_records(&corpus, dim, seed),
        Level::Token => synthetic::token_records(&corpus, dim, seed),
    };
    write_emb1(out, level, &records).code(DATA)?;
    println!("wrote {} {level:?} records of dim {dim} to {}", records.len(), out.display());
    Ok(())
}
