//! Command implementations behind the `craftlm` binary: configuration, run
//! directories and manifests, the end-to-end pipeline and the REPL.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::builder::{
    decode_actions, encode_context, load_builder, save_builder, BuilderError, BuilderModel, BuilderTrainConfig, DecodeConfig,
    DialogueContext, EncoderInit,
};
use crate::corpus::{
    build_vocab_from_texts, generic_text, load_corpus_with, serialize_corpus, split_words, synth_corpus, utterances, CorpusError,
    Episode, LoadOptions, Speaker, Turn, Vocab,
};
use crate::eval::{compare_runs, evaluate_model, Comparison, EvalError, EvalReport};
use crate::mlm::{train_mlm_on_texts, EpochStats, LossHistory, MaskingConfig, MlmError, TrainConfig};
use crate::nn::{init_encoder, load_checkpoint, save_checkpoint, EncoderConfig, EncoderState, NnError};
use crate::world::{render_text, BlockAction, FeasibilityRule, GridDims, WorldError, WorldState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<WorldError> for CliError {
    fn from(e: WorldError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::NonFinite => CliError::Numerical(e.to_string()),
            NnError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<MlmError> for CliError {
    fn from(e: MlmError) -> Self {
        match e {
            MlmError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            MlmError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            MlmError::Nn(n) => n.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<BuilderError> for CliError {
    fn from(e: BuilderError) -> Self {
        match e {
            BuilderError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            BuilderError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            BuilderError::Nn(n) => n.into(),
            BuilderError::Mlm(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Builder(b) => b.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

/// Parses flat `key=value` text. Blank lines and `#` comments are ignored.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value, got {line:?}", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Everything a command needs. Built from defaults, then a config file, then
/// command-line overrides; see [`RunConfig::from_map`] for the keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub out: PathBuf,
    pub seed: u64,
    pub dims: GridDims,
    pub rule: FeasibilityRule,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub base_path: Option<PathBuf>,
    pub init_path: Option<PathBuf>,
    pub model_path: Option<PathBuf>,
    pub synth_train_seed: u64,
    pub synth_test_seed: u64,
    pub synth_train_episodes: usize,
    pub synth_test_episodes: usize,
    pub generic_seed: u64,
    pub generic_sentences: usize,
    pub min_freq: usize,
    /// `vocab_size` is filled in from the vocabulary at run time.
    pub encoder: EncoderConfig,
    pub masking: MaskingConfig,
    pub pretrain: TrainConfig,
    pub adapt: TrainConfig,
    pub builder: BuilderTrainConfig,
    pub decode: DecodeConfig,
    pub verbose: bool,
}

fn desk_schedule(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        peak_lr: 1e-3,
        seed,
        ..TrainConfig::default()
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Usage(format!("bad boolean {value:?} for {key}"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn set_train(t: &mut TrainConfig, field: &str, key: &str, value: &str) -> Result<bool, CliError> {
    match field {
        "epochs" => t.epochs = parse(key, value)?,
        "peak_lr" => t.peak_lr = parse(key, value)?,
        "warmup_frac" => t.warmup_frac = parse(key, value)?,
        "batch_size" => t.batch_size = parse(key, value)?,
        "val_frac" => t.val_frac = parse(key, value)?,
        "seed" => t.seed = parse(key, value)?,
        "optimizer" => t.optimizer = value.parse().map_err(CliError::Usage)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn train_pairs(prefix: &str, t: &TrainConfig, out: &mut BTreeMap<String, String>) {
    for (k, v) in [
        ("epochs", t.epochs.to_string()),
        ("peak_lr", t.peak_lr.to_string()),
        ("warmup_frac", t.warmup_frac.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("val_frac", t.val_frac.to_string()),
        ("seed", t.seed.to_string()),
        ("optimizer", t.optimizer.to_string()),
    ] {
        out.insert(format!("{prefix}.{k}"), v);
    }
}

impl RunConfig {
    /// Defaults for a run named `name` with master seed `seed`. Every
    /// section seed starts equal to the master seed.
    pub fn new(name: &str, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            out: PathBuf::from("runs"),
            seed,
            dims: GridDims::default(),
            rule: FeasibilityRule::Grounded,
            train_path: None,
            test_path: None,
            base_path: None,
            init_path: None,
            model_path: None,
            synth_train_seed: 1,
            synth_test_seed: 2,
            synth_train_episodes: 400,
            synth_test_episodes: 100,
            generic_seed: 3,
            generic_sentences: 2000,
            min_freq: 1,
            encoder: EncoderConfig::new(0),
            masking: MaskingConfig {
                seed,
                ..MaskingConfig::default()
            },
            pretrain: desk_schedule(seed, 10),
            adapt: desk_schedule(seed, 10),
            builder: BuilderTrainConfig {
                train: desk_schedule(seed, 20),
                ..BuilderTrainConfig::default()
            },
            decode: DecodeConfig::default(),
            verbose: false,
        }
    }

    /// Builds a configuration from `key=value` pairs. `seed` is applied first
    /// so that explicit section seeds override it.
    pub fn from_map(default_name: &str, map: &BTreeMap<String, String>) -> Result<Self, CliError> {
        let seed = map.get("seed").map(|v| parse("seed", v)).transpose()?.unwrap_or(0);
        let mut cfg = Self::new(default_name, seed);
        for (k, v) in map.iter().filter(|(k, _)| k.as_str() != "seed") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let (section, field) = key.split_once('.').unwrap_or(("", key));
        match (section, field) {
            ("", "name") => self.name = value.to_string(),
            ("", "out") => self.out = PathBuf::from(value),
            ("", "seed") => self.seed = parse(key, value)?,
            ("", "verbose") => self.verbose = parse_bool(key, value)?,
            ("", "rule") => {
                self.rule = match value {
                    "grounded" => FeasibilityRule::Grounded,
                    "unrestricted" => FeasibilityRule::Unrestricted,
                    _ => return Err(CliError::Usage(format!("bad rule {value:?}"))),
                }
            }
            ("dims", "sx") => self.dims.sx = parse(key, value)?,
            ("dims", "sy") => self.dims.sy = parse(key, value)?,
            ("dims", "sz") => self.dims.sz = parse(key, value)?,
            ("paths", "train") => self.train_path = opt_path(value),
            ("paths", "test") => self.test_path = opt_path(value),
            ("paths", "base") => self.base_path = opt_path(value),
            ("paths", "init") => self.init_path = opt_path(value),
            ("paths", "model") => self.model_path = opt_path(value),
            ("synth", "train_seed") => self.synth_train_seed = parse(key, value)?,
            ("synth", "test_seed") => self.synth_test_seed = parse(key, value)?,
            ("synth", "train_episodes") => self.synth_train_episodes = parse(key, value)?,
            ("synth", "test_episodes") => self.synth_test_episodes = parse(key, value)?,
            ("generic", "seed") => self.generic_seed = parse(key, value)?,
            ("generic", "sentences") => self.generic_sentences = parse(key, value)?,
            ("vocab", "min_freq") => self.min_freq = parse(key, value)?,
            ("encoder", "n_layers") => self.encoder.n_layers = parse(key, value)?,
            ("encoder", "d_model") => self.encoder.d_model = parse(key, value)?,
            ("encoder", "n_heads") => self.encoder.n_heads = parse(key, value)?,
            ("encoder", "d_ff") => self.encoder.d_ff = parse(key, value)?,
            ("encoder", "max_seq_len") => self.encoder.max_seq_len = parse(key, value)?,
            ("encoder", "dropout") => self.encoder.dropout = parse(key, value)?,
            ("encoder", "tied_output") => self.encoder.tied_output = parse_bool(key, value)?,
            ("masking", "rate") => self.masking.rate = parse(key, value)?,
            ("masking", "mode") => self.masking.mode = value.parse().map_err(CliError::Usage)?,
            ("masking", "mask_frac") => self.masking.mask_frac = parse(key, value)?,
            ("masking", "random_frac") => self.masking.random_frac = parse(key, value)?,
            ("masking", "keep_frac") => self.masking.keep_frac = parse(key, value)?,
            ("masking", "seed") => self.masking.seed = parse(key, value)?,
            ("pretrain", f) if set_train(&mut self.pretrain, f, key, value)? => {}
            ("adapt", f) if set_train(&mut self.adapt, f, key, value)? => {}
            ("builder", "history") => self.builder.history = parse(key, value)?,
            ("builder", "freeze_encoder") => self.builder.freeze_encoder = parse_bool(key, value)?,
            ("builder", f) if set_train(&mut self.builder.train, f, key, value)? => {}
            ("decode", "max_actions") => self.decode.max_actions = parse(key, value)?,
            ("decode", "mask_infeasible") => self.decode.mask_infeasible = parse_bool(key, value)?,
            _ => return Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
        if section.is_empty() && field == "seed" {
            let s = self.seed;
            self.masking.seed = s;
            self.pretrain.seed = s;
            self.adapt.seed = s;
            self.builder.train.seed = s;
        }
        if section.is_empty() && field == "rule" {
            self.decode.rule = self.rule;
        }
        Ok(())
    }

    /// The full resolved configuration, sorted by key.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("name", self.name.clone());
        put("out", self.out.display().to_string());
        put("seed", self.seed.to_string());
        put("verbose", self.verbose.to_string());
        put(
            "rule",
            match self.rule {
                FeasibilityRule::Grounded => "grounded",
                FeasibilityRule::Unrestricted => "unrestricted",
            }
            .into(),
        );
        put("dims.sx", self.dims.sx.to_string());
        put("dims.sy", self.dims.sy.to_string());
        put("dims.sz", self.dims.sz.to_string());
        put("paths.train", path_str(&self.train_path));
        put("paths.test", path_str(&self.test_path));
        put("paths.base", path_str(&self.base_path));
        put("paths.init", path_str(&self.init_path));
        put("paths.model", path_str(&self.model_path));
        put("synth.train_seed", self.synth_train_seed.to_string());
        put("synth.test_seed", self.synth_test_seed.to_string());
        put("synth.train_episodes", self.synth_train_episodes.to_string());
        put("synth.test_episodes", self.synth_test_episodes.to_string());
        put("generic.seed", self.generic_seed.to_string());
        put("generic.sentences", self.generic_sentences.to_string());
        put("vocab.min_freq", self.min_freq.to_string());
        for (k, v) in self.encoder.to_pairs() {
            if k != "vocab_size" {
                put(&format!("encoder.{k}"), v);
            }
        }
        put("masking.rate", self.masking.rate.to_string());
        put("masking.mode", self.masking.mode.to_string());
        put("masking.mask_frac", self.masking.mask_frac.to_string());
        put("masking.random_frac", self.masking.random_frac.to_string());
        put("masking.keep_frac", self.masking.keep_frac.to_string());
        put("masking.seed", self.masking.seed.to_string());
        put("builder.history", self.builder.history.to_string());
        put("builder.freeze_encoder", self.builder.freeze_encoder.to_string());
        put("decode.max_actions", self.decode.max_actions.to_string());
        put("decode.mask_infeasible", self.decode.mask_infeasible.to_string());
        train_pairs("pretrain", &self.pretrain, &mut m);
        train_pairs("adapt", &self.adapt, &mut m);
        train_pairs("builder", &self.builder.train, &mut m);
        m
    }

    /// Checks value ranges and that every referenced input path exists.
    pub fn validate(&self) -> Result<(), CliError> {
        self.dims.validate()?;
        self.masking.validate()?;
        for t in [&self.pretrain, &self.adapt, &self.builder.train] {
            t.validate()?;
        }
        let probe = EncoderConfig {
            vocab_size: 1,
            ..self.encoder.clone()
        };
        probe.validate()?;
        for p in [&self.train_path, &self.test_path, &self.base_path, &self.init_path, &self.model_path]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(CliError::Data(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join(&self.name)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?))
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_sha256: String,
    config: &'a BTreeMap<String, String>,
    inputs: &'a BTreeMap<String, String>,
    artifacts: &'a BTreeMap<String, String>,
}

/// A run directory being populated. Every artifact written through it is
/// hashed into the manifest.
pub struct Run {
    pub dir: PathBuf,
    command: String,
    config: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    artifacts: BTreeMap<String, String>,
    verbose: bool,
}

impl Run {
    pub fn create(command: &str, cfg: &RunConfig) -> Result<Self, CliError> {
        let dir = cfg.run_dir();
        for sub in ["checkpoints", "csv", "report"] {
            fs::create_dir_all(dir.join(sub))?;
        }
        Ok(Self {
            dir,
            command: command.to_string(),
            config: cfg.to_map(),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            verbose: cfg.verbose,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn input(&mut self, label: &str, path: &Path) -> Result<(), CliError> {
        let h = sha256_file(path)?;
        self.inputs.insert(format!("{label}:{}", path.display()), h);
        Ok(())
    }

    /// Records an in-memory input (a generated corpus) by content hash.
    pub fn input_bytes(&mut self, label: &str, bytes: &[u8]) {
        self.inputs.insert(label.to_string(), sha256_hex(bytes));
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, bytes)?;
        self.artifacts.insert(rel.to_string(), sha256_hex(bytes));
        Ok(p)
    }

    /// Hashes a file some other writer already produced inside the run.
    pub fn record(&mut self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        let h = sha256_file(&p)?;
        self.artifacts.insert(rel.to_string(), h);
        Ok(p)
    }

    pub fn artifacts(&self) -> &BTreeMap<String, String> {
        &self.artifacts
    }

    fn progress(&self, stage: &str) -> impl FnMut(&EpochStats) {
        let verbose = self.verbose;
        let stage = stage.to_string();
        move |e: &EpochStats| {
            if verbose {
                let val = e.val_loss.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
                eprintln!("[{stage}] epoch {:>3} train {:.4} val {val} lr {:.2e}", e.epoch, e.train_loss, e.mean_lr);
            }
        }
    }

    pub fn finish(self) -> Result<PathBuf, CliError> {
        let cfg_text: String = self.config.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let manifest = Manifest {
            command: &self.command,
            config_sha256: sha256_hex(cfg_text.as_bytes()),
            config: &self.config,
            inputs: &self.inputs,
            artifacts: &self.artifacts,
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Data(e.to_string()))?;
        let p = self.dir.join("manifest.json");
        fs::write(&p, json + "\n")?;
        Ok(self.dir)
    }
}

fn load_split(cfg: &RunConfig, run: &mut Run, label: &str, path: &Option<PathBuf>, seed: u64, n: usize) -> Result<Vec<Episode>, CliError> {
    let opts = LoadOptions {
        dims: cfg.dims,
        rule: cfg.rule,
    };
    match path {
        Some(p) => {
            run.input(label, p)?;
            Ok(load_corpus_with(p, &opts)?)
        }
        None => {
            let eps = synth_corpus(seed, n, cfg.dims);
            run.input_bytes(&format!("{label}:synth"), serialize_corpus(&eps).as_bytes());
            Ok(eps)
        }
    }
}

fn train_split(cfg: &RunConfig, run: &mut Run) -> Result<Vec<Episode>, CliError> {
    load_split(cfg, run, "train", &cfg.train_path, cfg.synth_train_seed, cfg.synth_train_episodes)
}

fn test_split(cfg: &RunConfig, run: &mut Run) -> Result<Vec<Episode>, CliError> {
    load_split(cfg, run, "test", &cfg.test_path, cfg.synth_test_seed, cfg.synth_test_episodes)
}

/// Shared vocabulary: generic text, task utterances and the speaker tags.
pub fn task_vocab(generic: &[String], train: &[Episode], min_freq: usize) -> Vocab {
    let tags = format!("{} {}", Speaker::Architect.tag(), Speaker::Builder.tag());
    let texts = generic
        .iter()
        .map(String::as_str)
        .chain(utterances(train))
        .chain(std::iter::repeat_n(tags.as_str(), min_freq.max(1)));
    build_vocab_from_texts(texts, min_freq)
}

fn encoder_config(cfg: &RunConfig, vocab: &Vocab) -> EncoderConfig {
    EncoderConfig {
        vocab_size: vocab.len(),
        ..cfg.encoder.clone()
    }
}

fn save_history(run: &mut Run, rel: &str, h: &LossHistory) -> Result<(), CliError> {
    run.write(rel, h.to_csv().as_bytes())?;
    Ok(())
}

fn save_encoder(run: &mut Run, rel: &str, state: &EncoderState, vocab: &Vocab) -> Result<PathBuf, CliError> {
    save_checkpoint(state, vocab, run.path(rel))?;
    run.record(rel)
}

fn save_builder_ck(run: &mut Run, rel: &str, model: &BuilderModel, vocab: &Vocab) -> Result<PathBuf, CliError> {
    save_builder(model, vocab, run.path(rel))?;
    run.record(rel)
}

fn stage_pretrain(cfg: &RunConfig, run: &mut Run, generic: &[String], vocab: &Vocab) -> Result<EncoderState, CliError> {
    let init = init_encoder(&encoder_config(cfg, vocab), cfg.pretrain.seed)?;
    let texts: Vec<&str> = generic.iter().map(String::as_str).collect();
    let mut progress = run.progress("pretrain");
    let (state, hist) = train_mlm_on_texts(&texts, vocab, &init, &cfg.masking, &cfg.pretrain, &mut progress)?;
    save_history(run, "csv/pretrain_loss.csv", &hist)?;
    save_encoder(run, "checkpoints/base.ckpt", &state, vocab)?;
    Ok(state)
}

fn stage_adapt(cfg: &RunConfig, run: &mut Run, base: &EncoderState, vocab: &Vocab, train: &[Episode]) -> Result<EncoderState, CliError> {
    let texts: Vec<&str> = utterances(train).collect();
    let mut progress = run.progress("adapt");
    let (state, hist) = train_mlm_on_texts(&texts, vocab, base, &cfg.masking, &cfg.adapt, &mut progress)?;
    save_history(run, "csv/adapt_loss.csv", &hist)?;
    save_encoder(run, "checkpoints/adapted.ckpt", &state, vocab)?;
    Ok(state)
}

fn stage_train(cfg: &RunConfig, run: &mut Run, tag: &str, init: EncoderInit, vocab: &Vocab, train: &[Episode]) -> Result<BuilderModel, CliError> {
    let mut progress = run.progress(&format!("train {tag}"));
    let (model, hist) = crate::builder::train_builder(train, vocab, init, cfg.dims, &cfg.builder, &mut progress)?;
    save_history(run, &format!("csv/builder_{tag}_loss.csv"), &hist)?;
    save_builder_ck(run, &format!("checkpoints/builder_{tag}.ckpt"), &model, vocab)?;
    Ok(model)
}

fn stage_eval(cfg: &RunConfig, run: &mut Run, tag: &str, model: &BuilderModel, vocab: &Vocab, test: &[Episode]) -> Result<EvalReport, CliError> {
    let report = evaluate_model(model, test, vocab, &cfg.decode)?;
    run.write(&format!("csv/eval_{tag}.csv"), report.to_csv().as_bytes())?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
    run.write(&format!("report/eval_{tag}.json"), (json + "\n").as_bytes())?;
    Ok(report)
}

/// Corpus counts. `tokens` counts words as split by the tokenizer; `types`
/// counts distinct words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CorpusStats {
    pub episodes: usize,
    pub turns: usize,
    pub architect_turns: usize,
    pub builder_turns: usize,
    pub actions: usize,
    pub tokens: usize,
    pub types: usize,
}

pub fn corpus_stats(episodes: &[Episode]) -> CorpusStats {
    let mut types = std::collections::HashSet::new();
    let mut s = CorpusStats {
        episodes: episodes.len(),
        ..Default::default()
    };
    for t in episodes.iter().flat_map(|e| &e.turns) {
        s.turns += 1;
        match t.speaker {
            Speaker::Architect => s.architect_turns += 1,
            Speaker::Builder => s.builder_turns += 1,
        }
        s.actions += t.actions.len();
        for w in split_words(&t.utterance) {
            s.tokens += 1;
            types.insert(w);
        }
    }
    s.types = types.len();
    s
}

impl std::fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "episodes        {}", self.episodes)?;
        writeln!(f, "turns           {}", self.turns)?;
        writeln!(f, "architect turns {}", self.architect_turns)?;
        writeln!(f, "builder turns   {}", self.builder_turns)?;
        writeln!(f, "actions         {}", self.actions)?;
        writeln!(f, "tokens          {}", self.tokens)?;
        write!(f, "types           {}", self.types)
    }
}

/// Writes the train and test corpora as JSON lines.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let mut run = Run::create("synth", cfg)?;
    let train = synth_corpus(cfg.synth_train_seed, cfg.synth_train_episodes, cfg.dims);
    let test = synth_corpus(cfg.synth_test_seed, cfg.synth_test_episodes, cfg.dims);
    run.write("corpus/train.jsonl", serialize_corpus(&train).as_bytes())?;
    run.write("corpus/test.jsonl", serialize_corpus(&test).as_bytes())?;
    run.finish()
}

/// Statistics of `paths.train` (or the synthetic training split).
pub fn cmd_corpus_stats(cfg: &RunConfig) -> Result<CorpusStats, CliError> {
    cfg.validate()?;
    let mut run = Run::create("stats", cfg)?;
    let eps = train_split(cfg, &mut run)?;
    let stats = corpus_stats(&eps);
    let json = serde_json::to_string_pretty(&stats).map_err(|e| CliError::Data(e.to_string()))?;
    run.write("report/stats.json", (json + "\n").as_bytes())?;
    run.finish()?;
    Ok(stats)
}

/// Generic-text masked-LM pretraining of a fresh encoder.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let mut run = Run::create("pretrain", cfg)?;
    let generic = generic_text(cfg.generic_seed, cfg.generic_sentences);
    let train = train_split(cfg, &mut run)?;
    let vocab = task_vocab(&generic, &train, cfg.min_freq);
    stage_pretrain(cfg, &mut run, &generic, &vocab)?;
    run.finish()
}

/// Domain adaptation of the encoder at `paths.base`.
pub fn cmd_adapt(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let base_path = cfg
        .base_path
        .as_ref()
        .ok_or_else(|| CliError::Usage("adapt needs paths.base (--base)".into()))?;
    let mut run = Run::create("adapt", cfg)?;
    run.input("base", base_path)?;
    let (base, vocab) = load_checkpoint(base_path)?;
    let train = train_split(cfg, &mut run)?;
    stage_adapt(cfg, &mut run, &base, &vocab, &train)?;
    run.finish()
}

/// Builder training from `paths.init`, or from scratch when unset.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let mut run = Run::create("train", cfg)?;
    let train = train_split(cfg, &mut run)?;
    let (init, vocab, tag) = match &cfg.init_path {
        Some(p) => {
            run.input("init", p)?;
            let (state, vocab) = load_checkpoint(p)?;
            (EncoderInit::Pretrained(state), vocab, "pretrained")
        }
        None => {
            let generic = generic_text(cfg.generic_seed, cfg.generic_sentences);
            let vocab = task_vocab(&generic, &train, cfg.min_freq);
            (EncoderInit::Scratch(encoder_config(cfg, &vocab)), vocab, "scratch")
        }
    };
    run.input_bytes(&format!("init:{tag}"), tag.as_bytes());
    stage_train(cfg, &mut run, tag, init, &vocab, &train)?;
    run.finish()
}

/// Scores the builder at `paths.model` on `paths.test` (or the synthetic
/// test split).
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport, CliError> {
    cfg.validate()?;
    let model_path = cfg
        .model_path
        .as_ref()
        .ok_or_else(|| CliError::Usage("eval needs paths.model (--model)".into()))?;
    let mut run = Run::create("eval", cfg)?;
    run.input("model", model_path)?;
    let (model, vocab) = load_builder(model_path)?;
    let test = test_split(cfg, &mut run)?;
    let report = stage_eval(cfg, &mut run, "model", &model, &vocab, &test)?;
    run.finish()?;
    Ok(report)
}

/// Scratch-init versus adapted-init results on one test split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineSummary {
    pub scratch: EvalReport,
    pub adapted: EvalReport,
    pub comparison: Comparison,
    pub run_dir: PathBuf,
}

impl PipelineSummary {
    /// Recall, precision and F1 (percent, one decimal) per initialization.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("init,recall,precision,f1\n");
        for (name, r) in [("scratch-init", &self.scratch), ("adapted-init", &self.adapted)] {
            let _ = writeln!(
                out,
                "{name},{:.1},{:.1},{:.1}",
                r.recall * 100.0,
                r.precision * 100.0,
                r.f1 * 100.0
            );
        }
        out
    }
}

/// Pretrain, adapt, train twice (scratch and adapted init, otherwise
/// identical), evaluate both and compare.
pub fn cmd_pipeline(cfg: &RunConfig) -> Result<PipelineSummary, CliError> {
    cfg.validate()?;
    let mut run = Run::create("pipeline", cfg)?;
    let generic = generic_text(cfg.generic_seed, cfg.generic_sentences);
    let train = train_split(cfg, &mut run)?;
    let test = test_split(cfg, &mut run)?;
    let vocab = task_vocab(&generic, &train, cfg.min_freq);
    let base = stage_pretrain(cfg, &mut run, &generic, &vocab)?;
    let adapted = stage_adapt(cfg, &mut run, &base, &vocab, &train)?;
    let scratch_model = stage_train(cfg, &mut run, "scratch", EncoderInit::Scratch(encoder_config(cfg, &vocab)), &vocab, &train)?;
    let scratch = stage_eval(cfg, &mut run, "scratch", &scratch_model, &vocab, &test)?;
    let adapted_model = stage_train(cfg, &mut run, "adapted", EncoderInit::Pretrained(adapted), &vocab, &train)?;
    let adapted = stage_eval(cfg, &mut run, "adapted", &adapted_model, &vocab, &test)?;
    let comparison = compare_runs(&scratch, &adapted)?;
    let mut summary = PipelineSummary {
        scratch,
        adapted,
        comparison,
        run_dir: run.dir.clone(),
    };
    run.write("report/summary.csv", summary.table_csv().as_bytes())?;
    let json = serde_json::to_string_pretty(&summary.comparison).map_err(|e| CliError::Data(e.to_string()))?;
    run.write("report/comparison.json", (json + "\n").as_bytes())?;
    summary.run_dir = run.finish()?;
    Ok(summary)
}

/// Interactive builder state: a growing dialogue, the current world and an
/// undo stack.
pub struct PlaySession<'m> {
    model: &'m BuilderModel,
    vocab: &'m Vocab,
    decode: DecodeConfig,
    episode: Episode,
    log: Vec<String>,
}

impl<'m> PlaySession<'m> {
    pub fn new(model: &'m BuilderModel, vocab: &'m Vocab, decode: DecodeConfig) -> Self {
        let world = WorldState::empty(model.dims);
        Self {
            model,
            vocab,
            decode,
            episode: Episode {
                id: "play".into(),
                turns: Vec::new(),
                target: world,
            },
            log: Vec::new(),
        }
    }

    pub fn world(&self) -> WorldState {
        self.episode.final_world()
    }

    pub fn render(&self) -> String {
        render_text(&self.world())
    }

    /// The model input an instruction would produce right now.
    pub fn context(&self, instruction: &str) -> DialogueContext {
        let mut ep = self.episode.clone();
        ep.turns.push(Turn {
            speaker: Speaker::Architect,
            utterance: instruction.to_string(),
            actions: Vec::new(),
            world_before: self.world(),
        });
        ep.turns.push(Turn {
            speaker: Speaker::Builder,
            utterance: String::new(),
            actions: Vec::new(),
            world_before: self.world(),
        });
        encode_context(&ep, ep.turns.len() - 1, self.vocab, self.model.history, self.model.encoder.max_seq_len)
    }

    /// Decodes and applies the builder's response to `instruction`.
    pub fn instruct(&mut self, instruction: &str) -> Result<Vec<BlockAction>, CliError> {
        let ctx = self.context(instruction);
        let actions = decode_actions(self.model, &ctx, &self.decode)?;
        let world = self.world();
        self.episode.turns.push(Turn {
            speaker: Speaker::Architect,
            utterance: instruction.to_string(),
            actions: Vec::new(),
            world_before: world.clone(),
        });
        self.episode.turns.push(Turn {
            speaker: Speaker::Builder,
            utterance: "done".into(),
            actions: actions.clone(),
            world_before: world,
        });
        self.log.push(format!("architect: {instruction}"));
        self.log.push(format!("builder: {}", format_actions(&actions)));
        Ok(actions)
    }

    /// Reverts the last instruction. Returns `false` when there is none.
    pub fn undo(&mut self) -> bool {
        if self.episode.turns.len() < 2 {
            return false;
        }
        self.episode.turns.truncate(self.episode.turns.len() - 2);
        self.log.push("undo".into());
        true
    }

    pub fn reset(&mut self) {
        self.episode.turns.clear();
        self.log.push("reset".into());
    }

    pub fn log(&self) -> &[String] {
        &self.log
    }
}

pub fn format_actions(actions: &[BlockAction]) -> String {
    if actions.is_empty() {
        return "(no actions)".into();
    }
    actions
        .iter()
        .map(|a| match a {
            BlockAction::Place { cell, color } => format!("place {} {} {} {}", color.name(), cell.x, cell.y, cell.z),
            BlockAction::Remove { cell } => format!("remove {} {} {}", cell.x, cell.y, cell.z),
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Line-oriented REPL over `input`. Besides instructions it understands
/// `undo`, `reset` and `quit`; end of input behaves like `quit`. The session
/// log and the final world are written to the run directory.
pub fn cmd_play(cfg: &RunConfig, input: &mut dyn BufRead, output: &mut dyn Write) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let model_path = cfg
        .model_path
        .as_ref()
        .ok_or_else(|| CliError::Usage("play needs paths.model (--model)".into()))?;
    let mut run = Run::create("play", cfg)?;
    run.input("model", model_path)?;
    let (model, vocab) = load_builder(model_path)?;
    let mut session = PlaySession::new(&model, &vocab, cfg.decode);
    writeln!(output, "type an instruction, or undo / reset / quit")?;
    let mut line = String::new();
    loop {
        write!(output, "> ")?;
        output.flush()?;
        line.clear();
        if input.read_line(&mut line)? == 0 {
            break;
        }
        match line.trim() {
            "" => continue,
            "quit" | "exit" => break,
            "undo" => {
                if !session.undo() {
                    writeln!(output, "nothing to undo")?;
                }
            }
            "reset" => session.reset(),
            text => {
                let actions = session.instruct(text)?;
                writeln!(output, "{}", format_actions(&actions))?;
            }
        }
        writeln!(output, "{}", session.render())?;
    }
    let mut log = session.log().join("\n");
    log.push('\n');
    run.write("report/session.log", log.as_bytes())?;
    run.write("report/world.txt", session.render().as_bytes())?;
    run.finish()
}
