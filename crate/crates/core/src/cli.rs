//! The `codesearch` command line: prepare → train → eval → audit → index →
//! search → rouge, plus `synth` for desk corpora and `replay` for manifests.
//!
//! Exit codes: 0 success, 1 other failure, 2 unreadable input, 3 empty
//! output after filtering, 4 config or fingerprint mismatch, 5 numeric abort.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{BaseRef, Checkpoint, CheckpointMeta};
use crate::data::{
    build_vocab, filter_pairs, read_jsonl, read_jsonl_located, split_dataset, tokenize, write_jsonl, EncodedPair,
    FilterConfig, PairRecord, TokenMode, Vocab,
};
use crate::encoder::{EncoderConfig, EncoderWeights};
use crate::error::Error;
use crate::index::{file_fingerprint, EmbeddingIndex, IndexSource};
use crate::metrics::{
    audit_report, audit_rows, mrr_all_pairs, mrr_chunked, rouge_all, CutoffRule, MrrProtocol, RougeReport,
    REFERENCE_BASE_PARAMS,
};
use crate::objective::DEFAULT_TEMPERATURE;
use crate::peft::{
    AdaLoraConfig, Adapter, AdapterConfig, Ia3Config, LoraConfig, Method, PromptConfig, PromptInit, Proj,
};
use crate::synthetic::{generate, SyntheticConfig};
use crate::trainer::{train, Model, TrainConfig, TrainStatus};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_UNREADABLE_INPUT: i32 = 2;
pub const EXIT_EMPTY_OUTPUT: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;
pub const EXIT_NUMERIC_ABORT: i32 = 5;

pub const SEED_ENV: &str = "CODESEARCH_SEED";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug)]
enum CliError {
    Unreadable(Error),
    EmptyOutput(String),
    Mismatch(Error),
    Aborted(String),
    Other(Error),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Unreadable(_) => EXIT_UNREADABLE_INPUT,
            CliError::EmptyOutput(_) => EXIT_EMPTY_OUTPUT,
            CliError::Mismatch(_) => EXIT_MISMATCH,
            CliError::Aborted(_) => EXIT_NUMERIC_ABORT,
            CliError::Other(_) => EXIT_OTHER,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Unreadable(e) => write!(f, "unreadable input: {e}"),
            CliError::EmptyOutput(m) => write!(f, "empty output: {m}"),
            CliError::Mismatch(e) => write!(f, "{e}"),
            CliError::Aborted(m) => write!(f, "numeric abort: {m}"),
            CliError::Other(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } => CliError::Unreadable(e),
            Error::Config(_) | Error::Fingerprint(_) => CliError::Mismatch(e),
            Error::Numeric(ref m) => CliError::Aborted(m.clone()),
            _ => CliError::Other(e),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Errors while reading an input file are "unreadable input" unless they
/// report a mismatch.
fn input<T>(r: crate::Result<T>) -> CliResult<T> {
    r.map_err(|e| match e {
        Error::Config(_) | Error::Fingerprint(_) => CliError::Mismatch(e),
        other => CliError::Unreadable(other),
    })
}

fn output_io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Other(Error::io(path, e))
}

#[derive(Parser, Debug)]
#[command(name = "codesearch", version, about = "Parameter-efficient contrastive fine-tuning for text-to-code search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Filter a JSONL corpus, split it and build the vocabulary.
    Prepare(PrepareArgs),
    /// Write the seeded synthetic desk corpus.
    Synth(SynthArgs),
    /// Fine-tune (or fully train) the encoder on a prepared dataset.
    Train(TrainArgs),
    /// Mean reciprocal rank of a checkpoint on a split.
    Eval(EvalArgs),
    /// Trainable-parameter counts of the four adapter methods.
    Audit(AuditArgs),
    /// Embed the code side of a corpus into a search index.
    Index(IndexArgs),
    /// Text-to-code search against an index, optionally exporting context.
    Search(SearchArgs),
    /// ROUGE-1/2/L of candidate lines against reference lines.
    Rouge(RougeArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

/// Provenance record written next to every output artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub tool_version: String,
}

impl RunManifest {
    fn new(command: &str, argv: &[String], config: impl Serialize, seed: Option<u64>) -> CliResult<Self> {
        Ok(Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            config: serde_json::to_value(config).map_err(Error::from)?,
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }

    fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.into(), path.to_path_buf());
        self
    }

    fn output(mut self, name: &str, path: &Path) -> Self {
        self.outputs.insert(name.into(), path.to_path_buf());
        self
    }

    fn write(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).map_err(Error::from)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(output_io(&path))
    }

    pub fn load(path: impl AsRef<Path>) -> crate::Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn absolute(path: &Path) -> CliResult<PathBuf> {
    std::fs::canonicalize(path).map_err(|e| CliError::Unreadable(Error::io(path, e)))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(output_io(dir))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(output_io(path))
}

fn to_json_line(v: &impl Serialize) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(Error::from)?;
    s.push('\n');
    Ok(s)
}

// ---------------------------------------------------------------- prepare

#[derive(Args, Debug, Serialize)]
pub struct PrepareArgs {
    /// JSON Lines corpus of {id, text, code, lang} records.
    #[arg(long)]
    pub input: PathBuf,
    /// Keep only records with this language tag.
    #[arg(long)]
    pub lang: Option<String>,
    /// Minimum tokens on each side.
    #[arg(long, default_value_t = 3)]
    pub min_tokens: usize,
    /// Docstring truncation length in tokens.
    #[arg(long, default_value_t = 256)]
    pub max_text_tokens: usize,
    /// Code truncation length in tokens.
    #[arg(long, default_value_t = 256)]
    pub max_code_tokens: usize,
    /// Train, valid and test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    pub ratios: Vec<f64>,
    /// Maximum number of learned vocabulary tokens.
    #[arg(long, default_value_t = 30_000)]
    pub vocab_size: usize,
    /// Minimum token frequency for the vocabulary.
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn prepare(a: &PrepareArgs, argv: &[String], stdout: &mut dyn Write) -> CliResult<()> {
    let mut records = input(read_jsonl(&a.input))?;
    if let Some(lang) = &a.lang {
        records.retain(|r| &r.lang == lang);
    }
    let cfg = FilterConfig {
        min_tokens: a.min_tokens,
        max_text_tokens: a.max_text_tokens,
        max_code_tokens: a.max_code_tokens,
    };
    let (kept, report) = filter_pairs(&records, &cfg);
    if kept.is_empty() {
        return Err(CliError::EmptyOutput(format!("no records survive filtering\n{report}")));
    }
    let ratios: [f64; 3] = a
        .ratios
        .as_slice()
        .try_into()
        .map_err(|_| Error::Config("--ratios takes exactly three values".into()))?;
    let splits = split_dataset(&kept, ratios, a.seed)?;
    if splits.train.is_empty() {
        return Err(CliError::EmptyOutput("training split is empty".into()));
    }
    let vocab = build_vocab(&splits.train, a.vocab_size, a.min_freq)?;

    create_dir(&a.out)?;
    let mut manifest = RunManifest::new("prepare", argv, a, Some(a.seed))?.input("input", &a.input);
    for (name, part) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
        let path = a.out.join(format!("{name}.jsonl"));
        write_jsonl(&path, part)?;
        manifest = manifest.output(name, &path);
    }
    let vocab_path = a.out.join("vocab.txt");
    vocab.save(&vocab_path)?;
    let report_path = a.out.join("drop_report.txt");
    write_file(&report_path, report.to_string())?;
    manifest
        .output("vocab", &vocab_path)
        .output("drop_report", &report_path)
        .write(&a.out)?;
    writeln!(stdout, "{report}").map_err(output_io(&a.out))?;
    writeln!(
        stdout,
        "train {} / valid {} / test {}; vocabulary {}",
        splits.train.len(),
        splits.valid.len(),
        splits.test.len(),
        vocab.len()
    )
    .map_err(output_io(&a.out))
}

// ------------------------------------------------------------------ synth

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 512)]
    pub pairs: usize,
    #[arg(long, default_value = "synth")]
    pub lang: String,
    #[arg(long, env = SEED_ENV, default_value_t = SyntheticConfig::default().seed)]
    pub seed: u64,
    /// Output directory; the corpus is written to `corpus.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
}

fn synth(a: &SynthArgs, argv: &[String]) -> CliResult<()> {
    let cfg = SyntheticConfig {
        pairs: a.pairs,
        lang: a.lang.clone(),
        seed: a.seed,
        ..SyntheticConfig::default()
    };
    let records = generate(&cfg)?;
    create_dir(&a.out)?;
    let path = a.out.join("corpus.jsonl");
    write_jsonl(&path, &records)?;
    RunManifest::new("synth", argv, &cfg, Some(a.seed))?
        .output("corpus", &path)
        .write(&a.out)
}

// ------------------------------------------------------------------ train

/// Training options. Every flag may also come from `--config`, a JSON object
/// whose keys are the flag names; flags win over the file.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct TrainArgs {
    /// Prepared dataset directory (train.jsonl, valid.jsonl, vocab.txt).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// full | lora | adalora | ia3 | prompt | none [default: lora]
    #[arg(long)]
    pub method: Option<Method>,
    /// JSON file with flag values.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Peak learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Final learning rate of the cosine schedule [default: 0]
    #[arg(long)]
    pub lr_min: Option<f64>,
    /// Pairs per micro-batch [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Micro-batches per optimizer step [default: 4]
    #[arg(long)]
    pub accumulation: Option<usize>,
    /// [default: 10]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Cap on optimizer steps.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Softmax temperature τ [default: 0.08]
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Learn 1/τ instead of keeping it fixed.
    #[arg(long)]
    pub learn_temperature: Option<bool>,
    /// Chunk size of the per-epoch validation MRR [default: 1000]
    #[arg(long)]
    pub eval_chunk_size: Option<usize>,
    /// Full checkpoint to use as the frozen base.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Seed of a freshly initialised base [default: --seed]
    #[arg(long)]
    pub base_seed: Option<u64>,
    /// JSON encoder configuration [default: desk architecture]
    #[arg(long)]
    pub encoder_config: Option<PathBuf>,
    /// Docstring truncation in tokens [default: 256]
    #[arg(long)]
    pub max_text_tokens: Option<usize>,
    /// Code truncation in tokens [default: 256]
    #[arg(long)]
    pub max_code_tokens: Option<usize>,
    /// Adapted projections for LoRA/AdaLoRA, comma separated [default: q,v]
    #[arg(long)]
    pub targets: Option<String>,
    /// LoRA rank [default: 8]
    #[arg(long)]
    pub rank: Option<usize>,
    /// LoRA scale numerator [default: 2·rank]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// AdaLoRA initial rank [default: 12]
    #[arg(long)]
    pub r_init: Option<usize>,
    /// AdaLoRA target average rank [default: 8]
    #[arg(long)]
    pub r_target: Option<usize>,
    /// AdaLoRA step where pruning starts [default: 50]
    #[arg(long)]
    pub t_init: Option<u64>,
    /// AdaLoRA step where the target budget is reached [default: 300]
    #[arg(long)]
    pub t_final: Option<u64>,
    /// AdaLoRA orthogonality weight γ [default: 0.1]
    #[arg(long)]
    pub orth_weight: Option<f64>,
    /// AdaLoRA sensitivity smoothing β [default: 0.85]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Prompt-tuning virtual tokens [default: 10]
    #[arg(long)]
    pub virtual_tokens: Option<usize>,
    /// Prompt init: vocab_sample | normal [default: vocab_sample]
    #[arg(long)]
    pub prompt_init: Option<PromptInit>,
}

macro_rules! fill_from {
    ($dst:ident, $src:ident; $($f:ident),* $(,)?) => {
        $( if $dst.$f.is_none() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl TrainArgs {
    /// Flags first, then the config file, then defaults.
    fn resolve(&self) -> CliResult<TrainArgs> {
        let mut a = self.clone();
        if let Some(path) = &self.config {
            let text = input(std::fs::read_to_string(path).map_err(|e| Error::io(path, e)))?;
            let file: TrainArgs = serde_json::from_str(&text)
                .map_err(|e| CliError::Mismatch(Error::Config(format!("{}: {e}", path.display()))))?;
            fill_from!(a, file; data, method, seed, out, lr, lr_min, batch_size, accumulation, epochs,
                max_steps, temperature, learn_temperature, eval_chunk_size, base, base_seed, encoder_config,
                max_text_tokens, max_code_tokens, targets, rank, alpha, r_init, r_target, t_init, t_final,
                orth_weight, beta, virtual_tokens, prompt_init);
        }
        let d = TrainConfig::default();
        a.method.get_or_insert(d.method);
        a.seed.get_or_insert(d.seed);
        a.lr.get_or_insert(d.lr);
        a.lr_min.get_or_insert(d.lr_min);
        a.batch_size.get_or_insert(d.batch_size);
        a.accumulation.get_or_insert(d.accumulation);
        a.epochs.get_or_insert(d.epochs);
        a.temperature.get_or_insert(DEFAULT_TEMPERATURE);
        a.learn_temperature.get_or_insert(false);
        a.eval_chunk_size.get_or_insert(d.eval_chunk_size);
        a.max_text_tokens.get_or_insert(256);
        a.max_code_tokens.get_or_insert(256);
        if a.base.is_none() {
            a.base_seed = a.base_seed.or(a.seed);
        }
        match a.method {
            Some(Method::Lora) => {
                let c = LoraConfig::default();
                a.rank.get_or_insert(c.rank);
                a.targets.get_or_insert_with(|| targets_str(&c.targets));
            }
            Some(Method::Adalora) => {
                let c = AdaLoraConfig::default();
                a.r_init.get_or_insert(c.r_init);
                a.r_target.get_or_insert(c.r_target);
                a.t_init.get_or_insert(c.t_init);
                a.t_final.get_or_insert(c.t_final);
                a.orth_weight.get_or_insert(c.orth_weight);
                a.beta.get_or_insert(c.beta);
                a.targets.get_or_insert_with(|| targets_str(&c.targets));
            }
            Some(Method::Prompt) => {
                let c = PromptConfig::default();
                a.virtual_tokens.get_or_insert(c.virtual_tokens);
                a.prompt_init.get_or_insert(c.init);
            }
            _ => {}
        }
        if a.data.is_none() || a.out.is_none() {
            return Err(CliError::Mismatch(Error::Config("train needs --data and --out".into())));
        }
        Ok(a)
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            method: self.method.unwrap_or(Method::Lora),
            lr: self.lr.unwrap_or(1e-3),
            lr_min: self.lr_min.unwrap_or(0.0),
            batch_size: self.batch_size.unwrap_or(32),
            accumulation: self.accumulation.unwrap_or(4),
            epochs: self.epochs.unwrap_or(10),
            temperature: self.temperature.unwrap_or(DEFAULT_TEMPERATURE),
            learn_temperature: self.learn_temperature.unwrap_or(false),
            seed: self.seed.unwrap_or(0),
            max_steps: self.max_steps,
            eval_chunk_size: self.eval_chunk_size.unwrap_or(1000),
        }
    }

    fn adapter_config(&self) -> CliResult<Option<AdapterConfig>> {
        let targets = || parse_targets(self.targets.as_deref().unwrap_or("q,v"));
        Ok(match self.method.unwrap_or(Method::Lora) {
            Method::Lora => Some(AdapterConfig::Lora(LoraConfig {
                rank: self.rank.unwrap_or(8),
                alpha: self.alpha,
                targets: targets()?,
            })),
            Method::Adalora => {
                let d = AdaLoraConfig::default();
                Some(AdapterConfig::Adalora(AdaLoraConfig {
                    r_init: self.r_init.unwrap_or(d.r_init),
                    r_target: self.r_target.unwrap_or(d.r_target),
                    t_init: self.t_init.unwrap_or(d.t_init),
                    t_final: self.t_final.unwrap_or(d.t_final),
                    orth_weight: self.orth_weight.unwrap_or(d.orth_weight),
                    beta: self.beta.unwrap_or(d.beta),
                    targets: targets()?,
                }))
            }
            Method::Ia3 => Some(AdapterConfig::Ia3(Ia3Config::default())),
            Method::Prompt => Some(AdapterConfig::Prompt(PromptConfig {
                virtual_tokens: self.virtual_tokens.unwrap_or(10),
                init: self.prompt_init.unwrap_or_default(),
            })),
            Method::Full | Method::None => None,
        })
    }
}

fn targets_str(t: &std::collections::BTreeSet<Proj>) -> String {
    t.iter().map(Proj::to_string).collect::<Vec<_>>().join(",")
}

fn parse_targets(s: &str) -> CliResult<std::collections::BTreeSet<Proj>> {
    s.split(',')
        .map(|t| match t.trim() {
            "q" => Ok(Proj::Q),
            "k" => Ok(Proj::K),
            "v" => Ok(Proj::V),
            "o" => Ok(Proj::O),
            other => Err(CliError::Mismatch(Error::Config(format!("unknown target {other:?}")))),
        })
        .collect()
}

fn load_encoder_config(path: &Path) -> CliResult<EncoderConfig> {
    let text = input(std::fs::read_to_string(path).map_err(|e| Error::io(path, e)))?;
    let cfg: EncoderConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Mismatch(Error::Config(format!("{}: {e}", path.display()))))?;
    cfg.validate()?;
    Ok(cfg)
}

fn encode_split(records: &[PairRecord], vocab: &Vocab, max_text: usize, max_code: usize) -> Vec<EncodedPair> {
    records.iter().map(|r| EncodedPair::new(r, vocab, max_text, max_code)).collect()
}

fn train_cmd(raw: &TrainArgs, argv: &[String], stdout: &mut dyn Write) -> CliResult<()> {
    let a = raw.resolve()?;
    let data = a.data.clone().expect("resolved");
    let out = a.out.clone().expect("resolved");
    let cfg = a.train_config();
    cfg.validate()?;

    let vocab_path = data.join("vocab.txt");
    let vocab = input(Vocab::load(&vocab_path))?;
    let train_path = data.join("train.jsonl");
    let valid_path = data.join("valid.jsonl");
    let (max_text, max_code) = (a.max_text_tokens.unwrap_or(256), a.max_code_tokens.unwrap_or(256));
    let train_set = encode_split(&input(read_jsonl(&train_path))?, &vocab, max_text, max_code);
    let valid_set = if valid_path.exists() {
        encode_split(&input(read_jsonl(&valid_path))?, &vocab, max_text, max_code)
    } else {
        Vec::new()
    };

    let enc_cfg = match &a.encoder_config {
        Some(p) => load_encoder_config(p)?,
        None => EncoderConfig::desk(vocab.len()),
    };
    if enc_cfg.vocab_size != vocab.len() {
        return Err(CliError::Mismatch(Error::Config(format!(
            "encoder vocab_size {} differs from vocabulary size {}",
            enc_cfg.vocab_size,
            vocab.len()
        ))));
    }
    let (mut encoder, base_ref) = match &a.base {
        Some(path) => {
            let ck = input(Checkpoint::load(path))?;
            if ck.header.method != Method::Full {
                return Err(CliError::Mismatch(Error::Config(format!(
                    "base {} is a {} checkpoint, not a full one",
                    path.display(),
                    ck.header.method
                ))));
            }
            if ck.header.encoder != enc_cfg {
                return Err(CliError::Mismatch(Error::Config("base checkpoint encoder config differs".into())));
            }
            let dir = path.parent().unwrap_or(Path::new(""));
            let model = input(ck.restore::<f64>(dir, Some(&vocab.hash())))?;
            let abs = absolute(path)?;
            let fp = model.encoder.fingerprint();
            (model.encoder, BaseRef::Checkpoint { path: abs, fingerprint: fp })
        }
        None => {
            let seed = a.base_seed.unwrap_or(cfg.seed);
            let enc = EncoderWeights::init(enc_cfg, seed)?;
            let fp = enc.fingerprint();
            (enc, BaseRef::Seeded { seed, fingerprint: fp })
        }
    };
    let adapter_cfg = a.adapter_config()?;
    let adapter = match &adapter_cfg {
        Some(c) => Some(Adapter::attach(c, &mut encoder, cfg.seed)?),
        None => None,
    };
    let mut model = Model::new(encoder, adapter, cfg.temperature, cfg.learn_temperature);

    create_dir(&out)?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = Vec::new();
    let outcome = train(&cfg, &mut model, &train_set, &valid_set, Some(&mut metrics))?;
    write_file(&metrics_path, &metrics)?;

    let meta = |step: u64| CheckpointMeta {
        vocab_hash: vocab.hash(),
        seed: cfg.seed,
        step,
        base: (cfg.method != Method::Full).then(|| base_ref.clone()),
    };
    let vocab_out = out.join("vocab.txt");
    vocab.save(&vocab_out)?;
    let resolved = serde_json::json!({
        "args": a,
        "train": cfg,
        "adapter": adapter_cfg,
        "encoder": model.encoder.config,
    });
    let mut manifest = RunManifest::new("train", argv, resolved, Some(cfg.seed))?
        .input("train", &train_path)
        .input("vocab", &vocab_path)
        .output("metrics", &metrics_path)
        .output("vocab", &vocab_out);
    if valid_path.exists() {
        manifest = manifest.input("valid", &valid_path);
    }
    if let Some(b) = &a.base {
        manifest = manifest.input("base", b);
    }

    if let TrainStatus::Aborted { step, reason } = &outcome.status {
        let path = out.join("last_good.ckpt");
        Checkpoint::from_model(&model, cfg.method, meta(step.saturating_sub(1)))?.save(&path)?;
        manifest.output("last_good", &path).write(&out)?;
        return Err(CliError::Aborted(format!("step {step}: {reason}; last good state in {}", path.display())));
    }

    let final_path = out.join("final.ckpt");
    Checkpoint::from_model(&model, cfg.method, meta(outcome.steps))?.save(&final_path)?;
    manifest = manifest.output("final", &final_path);
    if let Some(best) = &outcome.best {
        let mut best_model = model.clone();
        best_model.restore(&best.params);
        if best.adapter.is_some() {
            best_model.adapter.clone_from(&best.adapter);
        }
        let path = out.join("best.ckpt");
        Checkpoint::from_model(&best_model, cfg.method, meta(best.step))?.save(&path)?;
        manifest = manifest.output("best", &path);
    }
    manifest.write(&out)?;
    writeln!(
        stdout,
        "{}: {} optimizer steps, final loss {}, best valid MRR {}",
        cfg.method,
        outcome.steps,
        outcome.losses.last().map_or_else(|| "-".into(), |l| format!("{l:.4}")),
        outcome.best.as_ref().map_or_else(|| "-".into(), |b| format!("{:.4}", b.valid_mrr))
    )
    .map_err(output_io(&out))
}

/// Loads a checkpoint and its vocabulary (next to it unless given).
fn load_model(checkpoint: &Path, vocab: Option<&Path>) -> CliResult<(Model<f64>, Vocab, PathBuf)> {
    let ck = input(Checkpoint::load(checkpoint))?;
    let dir = checkpoint.parent().unwrap_or(Path::new(""));
    let vocab_path = vocab.map_or_else(|| dir.join("vocab.txt"), Path::to_path_buf);
    let vocab = input(Vocab::load(&vocab_path))?;
    let model = input(ck.restore::<f64>(dir, Some(&vocab.hash())))?;
    Ok((model, vocab, vocab_path))
}

// ------------------------------------------------------------------- eval

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL split to evaluate.
    #[arg(long)]
    pub split: PathBuf,
    /// all-pairs | chunked
    #[arg(long, default_value = "chunked")]
    pub protocol: MrrProtocol,
    /// Ranks above this contribute nothing (all-pairs).
    #[arg(long, default_value_t = 1000)]
    pub cutoff: usize,
    /// zero | exclude: how ranks past the cutoff enter the mean.
    #[arg(long, default_value = "zero", value_parser = parse_cutoff_rule)]
    pub cutoff_rule: CutoffRule,
    /// Pairs per chunk (chunked).
    #[arg(long, default_value_t = 1000)]
    pub chunk_size: usize,
    /// Vocabulary [default: vocab.txt next to the checkpoint]
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub max_text_tokens: usize,
    #[arg(long, default_value_t = 256)]
    pub max_code_tokens: usize,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
    /// Directory for report.json and the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_cutoff_rule(s: &str) -> Result<CutoffRule, String> {
    match s {
        "zero" => Ok(CutoffRule::Zero),
        "exclude" => Ok(CutoffRule::Exclude),
        other => Err(format!("unknown cutoff rule {other:?}")),
    }
}

fn eval_cmd(a: &EvalArgs, argv: &[String], stdout: &mut dyn Write) -> CliResult<()> {
    let (model, vocab, vocab_path) = load_model(&a.checkpoint, a.vocab.as_deref())?;
    let records = input(read_jsonl(&a.split))?;
    if records.is_empty() {
        return Err(CliError::Unreadable(Error::Data(format!("{} is empty", a.split.display()))));
    }
    let pairs = encode_split(&records, &vocab, a.max_text_tokens, a.max_code_tokens);
    let (hc, ht) = model.embed_pairs(&pairs)?;
    let report = match a.protocol {
        MrrProtocol::AllPairs => mrr_all_pairs(&hc, &ht, a.cutoff, a.cutoff_rule)?,
        MrrProtocol::Chunked => mrr_chunked(&hc, &ht, a.chunk_size).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{msg}; use a smaller --chunk-size or --protocol all-pairs")),
            e => e,
        })?,
    };
    let text = if a.json {
        to_json_line(&report)?
    } else {
        report.to_text()
    };
    if let Some(out) = &a.out {
        create_dir(out)?;
        let path = out.join("report.json");
        write_file(&path, to_json_line(&report)?)?;
        RunManifest::new("eval", argv, a, None)?
            .input("checkpoint", &a.checkpoint)
            .input("split", &a.split)
            .input("vocab", &vocab_path)
            .output("report", &path)
            .write(out)?;
    }
    stdout.write_all(text.as_bytes()).map_err(output_io(&a.split))
}

// ------------------------------------------------------------------ audit

#[derive(Args, Debug, Serialize)]
pub struct AuditArgs {
    /// JSON encoder configuration [default: L=12, d_model=768]
    #[arg(long)]
    pub encoder_config: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub rank: usize,
    #[arg(long, default_value_t = 12)]
    pub r_init: usize,
    #[arg(long, default_value_t = 10)]
    pub virtual_tokens: usize,
    /// Parameter count the percentages refer to.
    #[arg(long, default_value_t = REFERENCE_BASE_PARAMS)]
    pub base_params: u64,
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn audit_cmd(a: &AuditArgs, argv: &[String], stdout: &mut dyn Write) -> CliResult<()> {
    let enc = match &a.encoder_config {
        Some(p) => load_encoder_config(p)?,
        None => EncoderConfig::audit(),
    };
    let adapters = [
        AdapterConfig::Lora(LoraConfig {
            rank: a.rank,
            ..LoraConfig::default()
        }),
        AdapterConfig::Adalora(AdaLoraConfig {
            r_init: a.r_init,
            r_target: a.r_init.min(AdaLoraConfig::default().r_target),
            ..AdaLoraConfig::default()
        }),
        AdapterConfig::Ia3(Ia3Config::default()),
        AdapterConfig::Prompt(PromptConfig {
            virtual_tokens: a.virtual_tokens,
            ..PromptConfig::default()
        }),
    ];
    for c in &adapters {
        c.validate(&enc)?;
    }
    let rows = audit_rows(&enc, &adapters, a.base_params);
    let text = if a.json {
        to_json_line(&rows)?
    } else {
        audit_report(&enc, &adapters, a.base_params)
    };
    if let Some(out) = &a.out {
        create_dir(out)?;
        let path = out.join("audit.json");
        write_file(&path, to_json_line(&rows)?)?;
        let mut m = RunManifest::new("audit", argv, a, None)?.output("audit", &path);
        if let Some(p) = &a.encoder_config {
            m = m.input("encoder_config", p);
        }
        m.write(out)?;
    }
    stdout.write_all(text.as_bytes()).map_err(output_io(Path::new("<stdout>")))
}

// ------------------------------------------------------------------ index

#[derive(Args, Debug, Serialize)]
pub struct IndexArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL corpus whose code side is indexed.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Vocabulary [default: vocab.txt next to the checkpoint]
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub max_code_tokens: usize,
    #[arg(long, default_value_t = 256)]
    pub max_text_tokens: usize,
    /// Output directory; the index is written to `index.bin`.
    #[arg(long)]
    pub out: PathBuf,
}

fn index_cmd(a: &IndexArgs, argv: &[String], stdout: &mut dyn Write) -> CliResult<()> {
    let (model, vocab, vocab_path) = load_model(&a.checkpoint, a.vocab.as_deref())?;
    let records = input(read_jsonl_located(&a.corpus))?;
    if records.is_empty() {
        return Err(CliError::EmptyOutput(format!("{} has no records", a.corpus.display())));
    }
    let source = IndexSource {
        checkpoint: absolute(&a.checkpoint)?,
        fingerprint: input(file_fingerprint(&a.checkpoint))?,
        vocab: absolute(&vocab_path)?,
        corpus: absolute(&a.corpus)?,
        max_code_tokens: a.max_code_tokens,
        max_text_tokens: a.max_text_tokens,
    };
    let index = EmbeddingIndex::build(&model, &vocab, &records, source)?;
    create_dir(&a.out)?;
    let path = a.out.join("index.bin");
    index.save(&path)?;
    RunManifest::new("index", argv, a, None)?
        .input("checkpoint", &a.checkpoint)
        .input("corpus", &a.corpus)
        .input("vocab", &vocab_path)
        .output("index", &path)
        .write(&a.out)?;
    writeln!(stdout, "indexed {} snippets into {}", index.len(), path.display()).map_err(output_io(&path))
}

// ----------------------------------------------------------------- search

#[derive(Args, Debug, Serialize)]
pub struct SearchArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Natural-language query.
    #[arg(long)]
    pub query: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Emit the hits as a context block limited to this many code tokens.
    #[arg(long)]
    pub context_budget: Option<usize>,
    /// Checkpoint to embed the query with [default: the one recorded in the index]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
    /// Directory for results.json / context.txt and the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn search_cmd(a: &SearchArgs, argv: &[String], stdout: &mut dyn Write) -> CliResult<()> {
    let index = input(EmbeddingIndex::load(&a.index))?;
    let ck_path = a.checkpoint.clone().unwrap_or_else(|| index.header.checkpoint.clone());
    index.check_fingerprint(&input(file_fingerprint(&ck_path))?)?;
    let (model, vocab, _) = load_model(&ck_path, Some(&index.header.vocab))?;
    let q = index.embed_query(&model, &vocab, &a.query)?;
    let result = index.search(&q, a.k)?;
    let base = Path::new("");
    let (text, name) = match a.context_budget {
        Some(budget) => {
            let mut buf = Vec::new();
            index.export_context(&result, budget, base, &mut buf)?;
            (buf, "context.txt")
        }
        None if a.json => (to_json_line(&result)?.into_bytes(), "results.json"),
        None => {
            let mut s = String::new();
            for (i, h) in result.hits.iter().enumerate() {
                s.push_str(&format!("{:>3}  {:.6}  {}\n", i + 1, h.score, h.id));
            }
            (s.into_bytes(), "results.txt")
        }
    };
    if let Some(out) = &a.out {
        create_dir(out)?;
        let path = out.join(name);
        write_file(&path, &text)?;
        RunManifest::new("search", argv, a, None)?
            .input("index", &a.index)
            .input("checkpoint", &ck_path)
            .output(name.split('.').next().unwrap_or(name), &path)
            .write(out)?;
    }
    stdout.write_all(&text).map_err(output_io(&a.index))
}

// ------------------------------------------------------------------ rouge

#[derive(Args, Debug, Serialize)]
pub struct RougeArgs {
    /// One candidate per line.
    #[arg(long)]
    pub candidates: PathBuf,
    /// One reference per line, aligned with the candidates.
    #[arg(long)]
    pub references: PathBuf,
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn read_lines(path: &Path) -> CliResult<Vec<String>> {
    let text = input(std::fs::read_to_string(path).map_err(|e| Error::io(path, e)))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn rouge_cmd(a: &RougeArgs, argv: &[String], stdout: &mut dyn Write) -> CliResult<()> {
    let cands = read_lines(&a.candidates)?;
    let refs = read_lines(&a.references)?;
    if cands.len() != refs.len() {
        return Err(CliError::Mismatch(Error::Config(format!(
            "{} candidates vs {} references",
            cands.len(),
            refs.len()
        ))));
    }
    if cands.is_empty() {
        return Err(CliError::Unreadable(Error::Data("no candidate lines".into())));
    }
    let reports: Vec<RougeReport> = cands
        .iter()
        .zip(&refs)
        .map(|(c, r)| rouge_all(&tokenize(c, TokenMode::Text), &tokenize(r, TokenMode::Text)))
        .collect();
    let mean = RougeReport::mean(&reports);
    let text = if a.json { to_json_line(&mean)? } else { mean.to_string() };
    if let Some(out) = &a.out {
        create_dir(out)?;
        let path = out.join("rouge.json");
        write_file(&path, to_json_line(&mean)?)?;
        RunManifest::new("rouge", argv, a, None)?
            .input("candidates", &a.candidates)
            .input("references", &a.references)
            .output("rouge", &path)
            .write(out)?;
    }
    stdout.write_all(text.as_bytes()).map_err(output_io(&a.candidates))
}

// ----------------------------------------------------------------- replay

#[derive(Args, Debug, Serialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

// ------------------------------------------------------------------- main

fn dispatch(cli: &Cli, argv: &[String], stdout: &mut dyn Write) -> CliResult<()> {
    match &cli.command {
        Command::Prepare(a) => prepare(a, argv, stdout),
        Command::Synth(a) => synth(a, argv),
        Command::Train(a) => train_cmd(a, argv, stdout),
        Command::Eval(a) => eval_cmd(a, argv, stdout),
        Command::Audit(a) => audit_cmd(a, argv, stdout),
        Command::Index(a) => index_cmd(a, argv, stdout),
        Command::Search(a) => search_cmd(a, argv, stdout),
        Command::Rouge(a) => rouge_cmd(a, argv, stdout),
        Command::Replay(a) => {
            let m = input(RunManifest::load(&a.manifest))?;
            let cli = Cli::try_parse_from(std::iter::once("codesearch".to_string()).chain(m.argv.iter().cloned()))
                .map_err(|e| CliError::Mismatch(Error::Config(format!("manifest argv does not parse: {e}"))))?;
            if matches!(cli.command, Command::Replay(_)) {
                return Err(CliError::Mismatch(Error::Config("a manifest cannot replay a replay".into())));
            }
            dispatch(&cli, &m.argv, stdout)
        }
    }
}

/// Runs the command line `args` (program name first) and returns the exit
/// code. Normal output goes to `stdout`; diagnostics go to standard error.
pub fn run<I, S>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_OTHER } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(&cli, &argv, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}
