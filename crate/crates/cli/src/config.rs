use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use iclner::corpus::Schema;
use iclner::pipeline::RunConfig;
use serde::{Deserialize, Serialize};

/// Keys of the config file that are not run parameters.
const FILE_KEYS: &[&str] = &[
    "dataset",
    "schema",
    "train",
    "test",
    "train_sentence_emb",
    "test_sentence_emb",
    "train_token_emb",
    "test_token_emb",
    "query_entities",
    "output",
    "cache_dir",
    "backend",
    "verify_backend",
    "mock_rate",
    "mock_seed",
    "mock_cross_type",
    "scripted_responses",
    "min_interval_ms",
];

/// Paths and backend selection. Relative paths resolve against the config
/// file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dataset: Option<String>,
    #[serde(default = "default_schema")]
    pub schema: String,
    pub train: PathBuf,
    pub test: PathBuf,
    pub train_sentence_emb: Option<PathBuf>,
    pub test_sentence_emb: Option<PathBuf>,
    pub train_token_emb: Option<PathBuf>,
    pub test_token_emb: Option<PathBuf>,
    pub query_entities: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub backend: String,
    pub verify_backend: Option<String>,
    #[serde(default = "default_mock_rate")]
    pub mock_rate: f64,
    #[serde(default = "default_mock_seed")]
    pub mock_seed: u64,
    #[serde(default)]
    pub mock_cross_type: bool,
    pub scripted_responses: Option<PathBuf>,
    #[serde(default)]
    pub min_interval_ms: u64,
}

fn default_schema() -> String {
    "conll03".into()
}

fn default_mock_rate() -> f64 {
    0.3
}

fn default_mock_seed() -> u64 {
    7
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub files: FileConfig,
    pub run: RunConfig,
    pub overrides: Vec<String>,
}

/// Parses an override value as a TOML literal, falling back to a string.
fn literal(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_owned()))
}

pub fn split_assignment(text: &str) -> Result<(&str, &str)> {
    text.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| anyhow!("expected key=value, got `{text}`"))
}

/// Reads the config, applies `key=value` overrides, splits file keys from
/// run keys and validates both.
pub fn load(path: &Path, overrides: &[String]) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    for o in overrides {
        let (key, value) = split_assignment(o)?;
        table.insert(key.to_owned(), literal(value));
    }
    let mut file_table = toml::Table::new();
    for key in FILE_KEYS {
        if let Some(v) = table.remove(*key) {
            file_table.insert((*key).to_owned(), v);
        }
    }
    let mut files: FileConfig = file_table.try_into().context("file settings")?;
    let run: RunConfig = table.try_into().context("run settings")?;
    run.validate()?;
    if !(0.0..=1.0).contains(&files.mock_rate) {
        bail!("mock_rate must lie in [0, 1], got {}", files.mock_rate);
    }

    let base = path.parent().unwrap_or(Path::new(""));
    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    resolve(&mut files.train);
    resolve(&mut files.test);
    for p in [
        &mut files.train_sentence_emb,
        &mut files.test_sentence_emb,
        &mut files.train_token_emb,
        &mut files.test_token_emb,
        &mut files.query_entities,
        &mut files.output,
        &mut files.cache_dir,
        &mut files.scripted_responses,
    ]
    .into_iter()
    .flatten()
    {
        resolve(p);
    }
    if Schema::builtin(&files.schema).is_none() {
        let mut p = PathBuf::from(&files.schema);
        resolve(&mut p);
        files.schema = p.display().to_string();
    }
    Ok(Loaded {
        files,
        run,
        overrides: overrides.to_vec(),
    })
}

/// Resolves a built-in schema name or a schema JSON file.
pub fn schema(spec: &str) -> Result<Schema> {
    match Schema::builtin(spec) {
        Some(s) => Ok(s),
        None => Schema::from_json_file(spec).with_context(|| format!("schema `{spec}`")),
    }
}

/// The file settings as flat strings, for the manifest.
pub fn describe(files: &FileConfig) -> BTreeMap<String, String> {
    let value = toml::Value::try_from(files).unwrap_or(toml::Value::Table(Default::default()));
    let mut out = BTreeMap::new();
    if let toml::Value::Table(t) = value {
        for (k, v) in t {
            let s = match v {
                toml::Value::String(s) => s,
                other => other.to_string(),
            };
            out.insert(format!("file.{k}"), s);
        }
    }
    out
}
