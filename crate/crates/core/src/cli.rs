//! Command-line front end.
//!
//! Every command is driven by a [`RunConfig`]: the config file, then
//! `--set key=value` overrides, then dedicated flags. The effective config
//! (with defaults filled in) is stored in a manifest next to the output, and
//! `xlent rerun MANIFEST` replays the command from that manifest alone.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::align::{self, FeatureSpec};
use crate::checkpoint::{self, ModelCheckpoint, StorageDtype};
use crate::cloze::{self, ClozeMode};
use crate::config::{ConfigError, RunConfig};
use crate::corpus::{self, AnnotatedDocument, MaskingConfig};
use crate::encoder::{EncoderConfig, Model, PositionPooling};
use crate::entity_vocab::{EntityVocab, InterLanguageLinks, MentionStats};
use crate::linker::{self, AnchorIndex, MentionMap};
use crate::optim::{AdamConfig, ParamSelector};
use crate::pretrain::{self, RunOutput, TrainConfig, TrainItem, Trainer};
use crate::seeding::{rng_for, Stream};
use crate::synthetic::{SyntheticCorpus, SyntheticSpec};
use crate::tasks::ner::{self, NerSpec, NerTask, NerVariant};
use crate::tasks::qa::{self, QaTask};
use crate::tasks::re::{self, ReSpec, ReTask, ReVariant};
use crate::tasks::{self, FinetuneConfig};
use crate::vocab::{self, WordVocab};

pub const MANIFEST_FORMAT: &str = "xlent-manifest/1";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
    #[error("rerun outputs differ from the manifest: {0}")]
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Mismatch(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Runtime(_) => "runtime",
            CliError::Mismatch(_) => "mismatch",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn runtime<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

fn invalid<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Config(ConfigError::Invalid(e.to_string()))
}

#[derive(Parser, Debug)]
#[command(name = "xlent", version, about = "Entity-aware multilingual encoder toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Configuration file (`key = value` lines with `[section]` headers).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 runs strictly single-threaded, 0 uses all cores.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output path (`io.output`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic two-language corpus.
    MakeToy {
        #[command(flatten)]
        common: Common,
    },
    /// Build word and entity vocabularies and mention statistics.
    BuildVocab {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<String>,
        #[arg(long)]
        links: Option<PathBuf>,
        #[arg(long)]
        min_languages: Option<usize>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Masked word and entity pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<String>,
        #[arg(long)]
        words: Option<PathBuf>,
        #[arg(long)]
        entities: Option<PathBuf>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Copy matching parameters from an existing checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Detect entity mentions in tokenized text.
    LinkEntities {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<String>,
        #[arg(long)]
        entities: Option<PathBuf>,
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long)]
        links: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        min_link_prob: Option<f64>,
    },
    /// Fine-tune a pretrained checkpoint on a downstream task.
    Finetune {
        #[command(subcommand)]
        task: FinetuneCommand,
    },
    /// Evaluate a fine-tuned checkpoint.
    Eval {
        #[command(subcommand)]
        task: EvalCommand,
    },
    /// Typed cloze-prompt evaluation.
    ClozeEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        words: Option<PathBuf>,
        #[arg(long)]
        entities: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
        /// word, entity-y or entity-xy.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Write span or relation features of an un-tuned model.
    DumpFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        words: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// span-mean, re-word or re-entity.
        #[arg(long)]
        spec: Option<String>,
    },
    /// Alignment metrics over dumped features.
    Analyze {
        #[command(subcommand)]
        metric: AnalyzeCommand,
    },
    /// Print parameter names, shapes and norms.
    InspectCheckpoint {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Replay a run from its manifest.
    Rerun {
        manifest: PathBuf,
        /// Write to this output path instead of the recorded one.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fail unless every output digest matches the manifest.
        #[arg(long)]
        verify: bool,
    },
}

#[derive(Args, Debug, Clone)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub words: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// RE: word-markers or entity-mask; NER: word-endpoints or entity-mask.
    #[arg(long)]
    pub variant: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum FinetuneCommand {
    Qa(FinetuneArgs),
    Re(FinetuneArgs),
    Ner(FinetuneArgs),
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub words: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    Qa(EvalArgs),
    Re(EvalArgs),
    Ner(EvalArgs),
}

#[derive(Args, Debug, Clone)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub query_lang: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum AnalyzeCommand {
    Cwr(AnalyzeArgs),
    Modularity(AnalyzeArgs),
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Role {
    Input,
    Output,
    Param,
}

struct Key {
    name: &'static str,
    default: Option<&'static str>,
    role: Role,
}

const fn input(name: &'static str) -> Key {
    Key { name, default: None, role: Role::Input }
}

const fn param(name: &'static str, default: Option<&'static str>) -> Key {
    Key { name, default, role: Role::Param }
}

const OUTPUT: Key = Key { name: "io.output", default: None, role: Role::Output };

const COMMON: [Key; 2] = [param("seed", Some("0")), param("threads", Some("0"))];

const MODEL_KEYS: [Key; 11] = [
    param("model.preset", Some("base")),
    param("model.hidden_size", None),
    param("model.entity_emb_size", None),
    param("model.layers", None),
    param("model.heads", None),
    param("model.ffn_size", None),
    param("model.max_positions", None),
    param("model.dropout", None),
    param("model.position_pooling", None),
    param("model.max_entities", None),
    param("model.init_std", Some("0.02")),
];

const TRAIN_KEYS: [Key; 22] = [
    param("train.total_steps", Some("1000000")),
    param("train.stage1_steps", Some("500000")),
    param("train.batch_size", Some("2048")),
    param("train.peak_lr", Some("1e-4")),
    param("train.stage1_peak_lr", Some("5e-4")),
    param("train.warmup_steps", Some("2500")),
    param("train.weight_decay", Some("0.01")),
    param("train.beta1", Some("0.9")),
    param("train.beta2", Some("0.999")),
    param("train.eps", Some("1e-6")),
    param("train.clip_norm", None),
    param("train.stage1_frozen", Some(pretrain::DEFAULT_STAGE1_FROZEN)),
    param("train.language_alpha", Some("0.7")),
    param("train.checkpoint_every", Some("10000")),
    param("train.log_every", Some("100")),
    param("train.checkpoint_dtype", Some("f64")),
    param("train.max_words", Some("512")),
    param("train.max_entities", Some("32")),
    param("train.masking.word_p", Some("0.15")),
    param("train.masking.word_random_p", Some("0.1")),
    param("train.masking.word_keep_p", Some("0.1")),
    param("train.masking.entity_p", Some("0.15")),
];

const FINETUNE_KEYS: [Key; 6] = [
    param("finetune.learning_rate", Some("2e-5")),
    param("finetune.epochs", None),
    param("finetune.batch_size", None),
    param("finetune.warmup_fraction", Some("0.06")),
    param("finetune.weight_decay", Some("0.01")),
    param("finetune.init_std", Some("0.02")),
];

fn schema(command: &str) -> Option<Vec<Key>> {
    let mut keys: Vec<Key> = COMMON.into();
    match command {
        "make-toy" => keys.extend([
            OUTPUT,
            param("toy.pairs", Some("250")),
            param("toy.heldout_pairs", Some("50")),
            param("toy.entities", Some("30")),
        ]),
        "build-vocab" => keys.extend([
            input("io.corpus"),
            input("io.links"),
            OUTPUT,
            param("vocab.min_languages", Some("3")),
            param("vocab.top_k", Some("1200000")),
            param("vocab.word_min_count", Some("1")),
        ]),
        "pretrain" => {
            keys.extend([
                input("io.corpus"),
                input("io.words"),
                input("io.entities"),
                input("io.resume"),
                input("io.init"),
                OUTPUT,
            ]);
            keys.extend(MODEL_KEYS);
            keys.extend(TRAIN_KEYS);
        }
        "link-entities" => keys.extend([
            input("io.corpus"),
            input("io.entities"),
            input("io.stats"),
            input("io.links"),
            input("io.input"),
            OUTPUT,
            param("link.min_link_prob", Some("0.01")),
        ]),
        "finetune-qa" | "finetune-re" | "finetune-ner" => {
            keys.extend([
                input("io.checkpoint"),
                input("io.words"),
                input("io.train"),
                input("io.dev"),
                OUTPUT,
            ]);
            keys.extend(FINETUNE_KEYS);
            match command {
                "finetune-qa" => keys.push(param("task.use_entities", Some("true"))),
                "finetune-re" => keys.push(param("task.variant", Some("entity-mask"))),
                _ => keys.extend([param("task.variant", Some("entity-mask")), param("task.lang", Some("en"))]),
            }
        }
        "eval-qa" | "eval-re" | "eval-ner" => {
            keys.extend([input("io.checkpoint"), input("io.words"), input("io.data"), OUTPUT]);
            if command == "eval-ner" {
                keys.push(param("task.lang", Some("en")));
            }
        }
        "cloze-eval" => keys.extend([
            input("io.checkpoint"),
            input("io.words"),
            input("io.entities"),
            input("io.queries"),
            OUTPUT,
            param("cloze.mode", Some("word")),
        ]),
        "dump-features" => keys.extend([
            input("io.checkpoint"),
            input("io.words"),
            input("io.data"),
            OUTPUT,
            param("features.spec", Some("span-mean")),
        ]),
        "analyze-cwr" => keys.extend([input("io.embeddings"), OUTPUT, param("analyze.query_lang", Some("en"))]),
        "analyze-modularity" => keys.extend([
            input("io.embeddings"),
            OUTPUT,
            param("analyze.k", Some("3")),
            param("analyze.query_lang", Some("en")),
        ]),
        "inspect-checkpoint" => keys.extend([input("io.checkpoint"), OUTPUT]),
        _ => return None,
    }
    Some(keys)
}

/// Check keys against the command's schema and fill in defaults.
pub fn resolve_config(command: &str, mut cfg: RunConfig) -> Result<RunConfig> {
    let keys = schema(command).ok_or_else(|| CliError::Usage(format!("unknown command {command:?}")))?;
    let names: Vec<&str> = keys.iter().map(|k| k.name).collect();
    cfg.check_keys(&names)?;
    for k in &keys {
        if let (Some(d), false) = (k.default, cfg.contains(k.name)) {
            cfg.set(k.name, d);
        }
    }
    Ok(cfg)
}

fn assemble(common: &Common, flags: Vec<(&str, Option<String>)>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::new(),
    };
    cfg.apply_overrides(&common.set)?;
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let mut all = vec![
        ("seed", common.seed.map(|s| s.to_string())),
        ("threads", common.threads.map(|t| t.to_string())),
        ("io.output", path(&common.out)),
    ];
    all.extend(flags);
    for (k, v) in all {
        if let Some(v) = v {
            cfg.set(k, v);
        }
    }
    Ok(cfg)
}

fn p(path: &Option<PathBuf>) -> Option<String> {
    path.as_ref().map(|p| p.display().to_string())
}

/// Command name and assembled (unresolved) config for parsed arguments.
pub fn plan(command: Command) -> Result<(String, RunConfig)> {
    let out = match command {
        Command::MakeToy { common } => ("make-toy".to_string(), assemble(&common, vec![])?),
        Command::BuildVocab {
            common,
            corpus,
            links,
            min_languages,
            top_k,
        } => (
            "build-vocab".into(),
            assemble(
                &common,
                vec![
                    ("io.corpus", corpus),
                    ("io.links", p(&links)),
                    ("vocab.min_languages", min_languages.map(|x| x.to_string())),
                    ("vocab.top_k", top_k.map(|x| x.to_string())),
                ],
            )?,
        ),
        Command::Pretrain {
            common,
            corpus,
            words,
            entities,
            resume,
            init,
        } => (
            "pretrain".into(),
            assemble(
                &common,
                vec![
                    ("io.corpus", corpus),
                    ("io.words", p(&words)),
                    ("io.entities", p(&entities)),
                    ("io.resume", p(&resume)),
                    ("io.init", p(&init)),
                ],
            )?,
        ),
        Command::LinkEntities {
            common,
            corpus,
            entities,
            stats,
            links,
            input,
            min_link_prob,
        } => (
            "link-entities".into(),
            assemble(
                &common,
                vec![
                    ("io.corpus", corpus),
                    ("io.entities", p(&entities)),
                    ("io.stats", p(&stats)),
                    ("io.links", p(&links)),
                    ("io.input", p(&input)),
                    ("link.min_link_prob", min_link_prob.map(|x| x.to_string())),
                ],
            )?,
        ),
        Command::Finetune { task } => {
            let (name, a) = match task {
                FinetuneCommand::Qa(a) => ("finetune-qa", a),
                FinetuneCommand::Re(a) => ("finetune-re", a),
                FinetuneCommand::Ner(a) => ("finetune-ner", a),
            };
            (
                name.into(),
                assemble(
                    &a.common,
                    vec![
                        ("io.checkpoint", p(&a.checkpoint)),
                        ("io.words", p(&a.words)),
                        ("io.train", p(&a.train)),
                        ("io.dev", p(&a.dev)),
                        ("task.variant", a.variant.clone()),
                    ],
                )?,
            )
        }
        Command::Eval { task } => {
            let (name, a) = match task {
                EvalCommand::Qa(a) => ("eval-qa", a),
                EvalCommand::Re(a) => ("eval-re", a),
                EvalCommand::Ner(a) => ("eval-ner", a),
            };
            (
                name.into(),
                assemble(
                    &a.common,
                    vec![
                        ("io.checkpoint", p(&a.checkpoint)),
                        ("io.words", p(&a.words)),
                        ("io.data", p(&a.data)),
                    ],
                )?,
            )
        }
        Command::ClozeEval {
            common,
            checkpoint,
            words,
            entities,
            queries,
            mode,
        } => (
            "cloze-eval".into(),
            assemble(
                &common,
                vec![
                    ("io.checkpoint", p(&checkpoint)),
                    ("io.words", p(&words)),
                    ("io.entities", p(&entities)),
                    ("io.queries", p(&queries)),
                    ("cloze.mode", mode),
                ],
            )?,
        ),
        Command::DumpFeatures {
            common,
            checkpoint,
            words,
            data,
            spec,
        } => (
            "dump-features".into(),
            assemble(
                &common,
                vec![
                    ("io.checkpoint", p(&checkpoint)),
                    ("io.words", p(&words)),
                    ("io.data", p(&data)),
                    ("features.spec", spec),
                ],
            )?,
        ),
        Command::Analyze { metric } => {
            let (name, a) = match metric {
                AnalyzeCommand::Cwr(a) => ("analyze-cwr", a),
                AnalyzeCommand::Modularity(a) => ("analyze-modularity", a),
            };
            (
                name.into(),
                assemble(
                    &a.common,
                    vec![
                        ("io.embeddings", p(&a.embeddings)),
                        ("analyze.k", a.k.map(|k| k.to_string())),
                        ("analyze.query_lang", a.query_lang.clone()),
                    ],
                )?,
            )
        }
        Command::InspectCheckpoint { common, checkpoint } => (
            "inspect-checkpoint".into(),
            assemble(&common, vec![("io.checkpoint", p(&checkpoint))])?,
        ),
        Command::Rerun { .. } => return Err(CliError::Usage("rerun has no plan".into())),
    };
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    /// Keyed by config key; comma-separated paths get one entry each.
    pub inputs: BTreeMap<String, Vec<FileDigest>>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut h = Sha256::new();
    let mut f = BufReader::new(File::open(path)?);
    loop {
        let buf = f.fill_buf()?;
        if buf.is_empty() {
            break;
        }
        h.update(buf);
        let n = buf.len();
        f.consume(n);
    }
    Ok(hex::encode(h.finalize()))
}

fn split_paths(v: &str) -> Vec<PathBuf> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect()
}

/// Files making up an output: the file itself, or every file under a
/// directory except its manifest, in sorted order.
fn output_files(path: &Path) -> std::io::Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(if path.exists() { vec![path.to_path_buf()] } else { vec![] });
    }
    let mut out = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir)? {
            let e = e?.path();
            if e.is_dir() {
                stack.push(e);
            } else if e.file_name().is_some_and(|n| n != "manifest.json") {
                out.push(e);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Digest entries of an output, with paths relative to it.
pub fn digest_output(path: &Path) -> std::io::Result<Vec<FileDigest>> {
    output_files(path)?
        .into_iter()
        .map(|f| {
            let rel = f.strip_prefix(path).ok().filter(|r| !r.as_os_str().is_empty());
            Ok(FileDigest {
                path: rel.unwrap_or(Path::new(".")).display().to_string(),
                sha256: sha256_file(&f)?,
            })
        })
        .collect()
}

pub fn manifest_path(output: &Path) -> PathBuf {
    if output.is_dir() {
        output.join("manifest.json")
    } else {
        let mut s = output.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let f = File::open(path).map_err(runtime("cannot open manifest"))?;
    let m: Manifest = serde_json::from_reader(BufReader::new(f)).map_err(invalid)?;
    if m.format != MANIFEST_FORMAT {
        return Err(invalid(format!("unsupported manifest format {:?}", m.format)));
    }
    Ok(m)
}

/// Resolve `cfg`, run `command` and write its manifest. Returns the manifest.
pub fn execute(command: &str, cfg: RunConfig) -> Result<Manifest> {
    let cfg = resolve_config(command, cfg)?;
    let keys = schema(command).expect("resolved");
    let seed: u64 = cfg.require("seed")?;
    let threads: usize = cfg.require("threads")?;
    let mut inputs = BTreeMap::new();
    for k in keys.iter().filter(|k| k.role == Role::Input) {
        if let Some(v) = cfg.raw(k.name) {
            let mut ds = Vec::new();
            for path in split_paths(v) {
                let sha256 = sha256_file(&path).map_err(runtime(&format!("cannot read {}", path.display())))?;
                ds.push(FileDigest {
                    path: path.display().to_string(),
                    sha256,
                });
            }
            inputs.insert(k.name.to_string(), ds);
        }
    }
    let run = || dispatch(command, &cfg);
    if threads > 0 {
        crate::par::with_threads(threads, run)?;
    } else {
        run()?;
    }
    let Some(out) = cfg.raw("io.output").map(PathBuf::from) else {
        return Ok(Manifest {
            format: MANIFEST_FORMAT.into(),
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config: cfg.values().clone(),
            inputs,
            outputs: vec![],
        });
    };
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed,
        config: cfg.values().clone(),
        inputs,
        outputs: digest_output(&out).map_err(runtime("cannot digest outputs"))?,
    };
    let mp = manifest_path(&out);
    let text = serde_json::to_string_pretty(&manifest).map_err(runtime("manifest"))?;
    std::fs::write(&mp, text + "\n").map_err(runtime(&format!("cannot write {}", mp.display())))?;
    Ok(manifest)
}

/// Replay a manifest, optionally into another output path, and compare the
/// output digests when `verify` is set.
pub fn rerun(manifest: &Path, out: Option<&Path>, verify: bool) -> Result<Manifest> {
    let m = read_manifest(manifest)?;
    let mut cfg = RunConfig::from_map(m.config.clone())?;
    if let Some(o) = out {
        cfg.set("io.output", o.display().to_string());
    }
    let new = execute(&m.command, cfg)?;
    if verify {
        for (k, ds) in &m.inputs {
            if new.inputs.get(k).map(|n| n.iter().map(|d| &d.sha256).collect::<Vec<_>>())
                != Some(ds.iter().map(|d| &d.sha256).collect())
            {
                return Err(CliError::Mismatch(format!("input {k} changed since the recorded run")));
            }
        }
        if new.outputs != m.outputs {
            return Err(CliError::Mismatch(format!(
                "{} recorded output files, {} reproduced, or contents differ",
                m.outputs.len(),
                new.outputs.len()
            )));
        }
    }
    Ok(new)
}

fn open(path: &str) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(runtime(&format!("cannot open {path}")))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(runtime(&format!("cannot create {}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(runtime(&format!("cannot create {}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(runtime("json"))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(runtime("write"))
}

fn read_docs(paths: &str) -> Result<Vec<AnnotatedDocument>> {
    let mut docs = Vec::new();
    for p in split_paths(paths) {
        let p = p.display().to_string();
        docs.extend(corpus::read_corpus(open(&p)?).map_err(runtime(&p))?);
    }
    Ok(docs)
}

fn read_words(path: &str) -> Result<WordVocab> {
    WordVocab::read(open(path)?).map_err(runtime(path))
}

fn read_entities(path: &str) -> Result<EntityVocab> {
    EntityVocab::read(open(path)?).map_err(runtime(path))
}

fn read_links(path: &str) -> Result<InterLanguageLinks> {
    InterLanguageLinks::read_tsv(open(path)?).map_err(runtime(path))
}

fn load_checkpoint(path: &str) -> Result<ModelCheckpoint> {
    ModelCheckpoint::load(Path::new(path)).map_err(runtime(path))
}

/// Parse a kebab-case enum value.
fn get_enum<T: DeserializeOwned>(cfg: &RunConfig, key: &str) -> Result<T> {
    let v: String = cfg.require(key)?;
    serde_json::from_value(serde_json::Value::String(v.clone())).map_err(|_| {
        CliError::Config(ConfigError::Value {
            key: key.into(),
            value: v,
            reason: "unknown variant".into(),
        })
    })
}

fn output(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.require::<String>("io.output").map(PathBuf::from).map_err(Into::into)
}

fn dispatch(command: &str, cfg: &RunConfig) -> Result<()> {
    match command {
        "make-toy" => make_toy(cfg),
        "build-vocab" => build_vocab(cfg),
        "pretrain" => run_pretrain(cfg),
        "link-entities" => link_entities(cfg),
        "finetune-qa" | "finetune-re" | "finetune-ner" => run_finetune(&command[9..], cfg),
        "eval-qa" | "eval-re" | "eval-ner" => run_eval(&command[5..], cfg),
        "cloze-eval" => run_cloze(cfg),
        "dump-features" => dump_features(cfg),
        "analyze-cwr" => analyze_cwr(cfg),
        "analyze-modularity" => analyze_modularity(cfg),
        "inspect-checkpoint" => inspect(cfg),
        _ => Err(CliError::Usage(format!("unknown command {command:?}"))),
    }
}

fn make_toy(cfg: &RunConfig) -> Result<()> {
    let spec = SyntheticSpec {
        pairs: cfg.require("toy.pairs")?,
        heldout_pairs: cfg.require("toy.heldout_pairs")?,
        entities: cfg.require("toy.entities")?,
        seed: cfg.require("seed")?,
    };
    let c = SyntheticCorpus::generate(&spec).map_err(invalid)?;
    c.write_to(&output(cfg)?).map_err(runtime("write toy corpus"))
}

fn build_vocab(cfg: &RunConfig) -> Result<()> {
    let docs = read_docs(&cfg.require::<String>("io.corpus")?)?;
    let links = match cfg.raw("io.links") {
        Some(p) => read_links(p)?,
        None => InterLanguageLinks::new(),
    };
    let min_languages: usize = cfg.require("vocab.min_languages")?;
    let top_k: usize = cfg.require("vocab.top_k")?;
    if min_languages == 0 || top_k == 0 {
        return Err(invalid("vocab.min_languages and vocab.top_k must be at least 1"));
    }
    let entities = EntityVocab::build(&docs, &links, min_languages, top_k).map_err(runtime("entity vocabulary"))?;
    let words = WordVocab::build(
        docs.iter().flat_map(|d| d.tokens.iter().map(String::as_str)),
        cfg.require("vocab.word_min_count")?,
    );
    let stats = MentionStats::from_corpus(&docs);
    let dir = output(cfg)?;
    std::fs::create_dir_all(&dir).map_err(runtime("output directory"))?;
    let mut w = create(&dir.join("entities.tsv"))?;
    entities.write(&mut w).and_then(|_| w.flush()).map_err(runtime("entities.tsv"))?;
    let mut w = create(&dir.join("words.txt"))?;
    words.write(&mut w).and_then(|_| w.flush()).map_err(runtime("words.txt"))?;
    let mut w = create(&dir.join("mention_stats.tsv"))?;
    stats.write_tsv(&mut w).and_then(|_| w.flush()).map_err(runtime("mention_stats.tsv"))?;
    eprintln!("{} words, {} entities", words.len(), entities.len());
    Ok(())
}

fn encoder_config(cfg: &RunConfig, words: usize, entities: usize) -> Result<EncoderConfig> {
    let mut c = match cfg.require::<String>("model.preset")?.as_str() {
        "base" => EncoderConfig::base(words, entities),
        "tiny" => EncoderConfig::tiny(words, entities),
        other => return Err(invalid(format!("model.preset must be base or tiny, not {other:?}"))),
    };
    macro_rules! over {
        ($field:ident, $key:literal) => {
            if let Some(v) = cfg.get($key)? {
                c.$field = v;
            }
        };
    }
    over!(hidden_size, "model.hidden_size");
    over!(entity_emb_size, "model.entity_emb_size");
    over!(layers, "model.layers");
    over!(heads, "model.heads");
    over!(ffn_size, "model.ffn_size");
    over!(max_positions, "model.max_positions");
    over!(dropout, "model.dropout");
    over!(max_entities, "model.max_entities");
    if cfg.contains("model.position_pooling") {
        c.position_pooling = get_enum::<PositionPooling>(cfg, "model.position_pooling")?;
    }
    c.validate().map_err(invalid)?;
    Ok(c)
}

fn threads_option(cfg: &RunConfig) -> Result<Option<usize>> {
    Ok(match cfg.require::<usize>("threads")? {
        0 => None,
        n => Some(n),
    })
}

fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let selector: String = cfg.require("train.stage1_frozen")?;
    let c = TrainConfig {
        total_steps: cfg.require("train.total_steps")?,
        stage1_steps: cfg.require("train.stage1_steps")?,
        batch_size: cfg.require("train.batch_size")?,
        peak_lr: cfg.require("train.peak_lr")?,
        stage1_peak_lr: cfg.require("train.stage1_peak_lr")?,
        warmup_steps: cfg.require("train.warmup_steps")?,
        adam: AdamConfig {
            beta1: cfg.require("train.beta1")?,
            beta2: cfg.require("train.beta2")?,
            eps: cfg.require("train.eps")?,
            weight_decay: cfg.require("train.weight_decay")?,
            clip_norm: cfg.get("train.clip_norm")?,
        },
        seed: cfg.require("seed")?,
        stage1_frozen: ParamSelector::parse(&selector).map_err(invalid)?,
        masking: MaskingConfig {
            word_p: cfg.require("train.masking.word_p")?,
            word_random_p: cfg.require("train.masking.word_random_p")?,
            word_keep_p: cfg.require("train.masking.word_keep_p")?,
            entity_p: cfg.require("train.masking.entity_p")?,
        },
        language_alpha: cfg.require("train.language_alpha")?,
        checkpoint_every: match cfg.require::<usize>("train.checkpoint_every")? {
            0 => None,
            n => Some(n),
        },
        log_every: cfg.require("train.log_every")?,
        threads: threads_option(cfg)?,
    };
    c.validate().map_err(invalid)?;
    Ok(c)
}

/// Split documents into training sequences of at most `max_words` tokens
/// including `[CLS]` and `[SEP]`.
pub fn training_items(
    docs: &[AnnotatedDocument],
    words: &WordVocab,
    entities: &EntityVocab,
    max_words: usize,
    max_entities: usize,
) -> Result<(Vec<TrainItem>, Vec<String>)> {
    if max_words < 3 {
        return Err(invalid("train.max_words must be at least 3"));
    }
    let langs: Vec<String> = docs
        .iter()
        .map(|d| d.lang.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut items = Vec::new();
    for d in docs {
        let language = langs.binary_search(&d.lang).expect("collected");
        for part in corpus::split_sequences(d, max_words - 2).map_err(runtime(&d.title))? {
            if part.tokens.is_empty() {
                continue;
            }
            let sequence =
                corpus::encode_document(&part, words, entities, max_entities).with_boundaries(vocab::CLS, vocab::SEP);
            items.push(TrainItem { sequence, language });
        }
    }
    if items.is_empty() {
        return Err(CliError::Runtime("corpus yields no training sequences".into()));
    }
    Ok((items, langs))
}

fn run_pretrain(cfg: &RunConfig) -> Result<()> {
    let tc = train_config(cfg)?;
    let words = read_words(&cfg.require::<String>("io.words")?)?;
    let entities = read_entities(&cfg.require::<String>("io.entities")?)?;
    let docs = read_docs(&cfg.require::<String>("io.corpus")?)?;
    let mc = encoder_config(cfg, words.len(), entities.len())?;
    let max_words: usize = cfg.require("train.max_words")?;
    if max_words > mc.max_positions {
        return Err(invalid(format!(
            "train.max_words {max_words} exceeds model.max_positions {}",
            mc.max_positions
        )));
    }
    let (items, langs) = training_items(&docs, &words, &entities, max_words, cfg.require("train.max_entities")?)?;
    let dtype = get_enum::<StorageDtype>(cfg, "train.checkpoint_dtype")?;
    let seed = tc.seed;
    let mut trainer = match cfg.raw("io.resume") {
        Some(p) => Trainer::resume(load_checkpoint(p)?, tc).map_err(runtime("resume"))?,
        None => {
            let std: f64 = cfg.require("model.init_std")?;
            let mut model = Model::init(mc, std, &mut rng_for(seed, Stream::Init, 0)).map_err(invalid)?;
            if let Some(p) = cfg.raw("io.init") {
                let src = load_checkpoint(p)?;
                let copied = pretrain::transfer_parameters(&mut model.params, &src.model.params);
                eprintln!("initialised {} tensors from {p}", copied.len());
            }
            Trainer::new(model, tc).map_err(invalid)?
        }
    };
    let dir = output(cfg)?;
    std::fs::create_dir_all(&dir).map_err(runtime("output directory"))?;
    let mut log = create(&dir.join("train.log"))?;
    writeln!(log, "step\tstage\tlr\tmlm\tmep").map_err(runtime("train.log"))?;
    trainer
        .run(
            &items,
            langs.len(),
            RunOutput {
                checkpoint_dir: Some(&dir),
                dtype,
                log: Some(&mut log),
            },
        )
        .map_err(runtime("pretraining"))?;
    log.flush().map_err(runtime("train.log"))?;
    let mut ckpt = trainer.checkpoint();
    ckpt.metadata.insert("languages".into(), serde_json::json!(langs));
    ckpt.save(&dir.join("final.ckpt"), dtype).map_err(runtime("final checkpoint"))
}

#[derive(Debug, Deserialize)]
struct LinkItem {
    lang: String,
    tokens: Vec<String>,
    #[serde(default)]
    page: Option<String>,
    #[serde(default)]
    page_lang: Option<String>,
}

fn link_entities(cfg: &RunConfig) -> Result<()> {
    let docs = read_docs(&cfg.require::<String>("io.corpus")?)?;
    let vocab = read_entities(&cfg.require::<String>("io.entities")?)?;
    let stats = match cfg.raw("io.stats") {
        Some(p) => MentionStats::read_tsv(open(p)?).map_err(runtime(p))?,
        None => MentionStats::from_corpus(&docs),
    };
    let links = cfg.raw("io.links").map(read_links).transpose()?;
    let min_p: f64 = cfg.require("link.min_link_prob")?;
    if !(0.0..=1.0).contains(&min_p) {
        return Err(invalid("link.min_link_prob must lie in [0, 1]"));
    }
    let pages: BTreeMap<(&str, &str), &AnnotatedDocument> =
        docs.iter().map(|d| ((d.lang.as_str(), d.title.as_str()), d)).collect();
    let anchors = AnchorIndex::from_corpus(&docs);
    let mut per_lang: BTreeMap<String, MentionMap> = BTreeMap::new();
    let input: String = cfg.require("io.input")?;
    let mut w = create(&output(cfg)?)?;
    for (i, line) in open(&input)?.lines().enumerate() {
        let line = line.map_err(runtime(&input))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: String| CliError::Runtime(format!("{input}:{}: {e}", i + 1));
        let mut obj: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        let item: LinkItem =
            serde_json::from_value(serde_json::Value::Object(obj.clone())).map_err(|e| at(e.to_string()))?;
        let map = match &item.page {
            Some(title) => {
                let page_lang = item.page_lang.as_deref().unwrap_or(&item.lang);
                let page = pages
                    .get(&(page_lang, title.as_str()))
                    .ok_or_else(|| at(format!("page {page_lang}:{title} not in corpus")))?;
                let m = linker::build_mention_map(page, &vocab);
                if page_lang == item.lang {
                    m
                } else {
                    let links = links
                        .as_ref()
                        .ok_or_else(|| at("translating a mention map needs io.links".into()))?;
                    linker::translate_mention_map(&m, &vocab, links, &anchors, &item.lang)
                }
            }
            None => per_lang
                .entry(item.lang.clone())
                .or_insert_with(|| {
                    let mut m = MentionMap::new();
                    for d in docs.iter().filter(|d| d.lang == item.lang) {
                        for a in &d.annotations {
                            if let Some(id) = vocab.resolve(&d.lang, &a.title) {
                                m.add(&d.tokens[a.start..a.end], id);
                            }
                        }
                    }
                    m
                })
                .clone(),
        };
        let found = linker::detect_entities(&item.tokens, &map, &stats, &item.lang, min_p);
        obj.insert("entities".into(), serde_json::to_value(found).map_err(runtime("json"))?);
        serde_json::to_writer(&mut w, &obj).map_err(runtime("json"))?;
        w.write_all(b"\n").map_err(runtime("write"))?;
    }
    w.flush().map_err(runtime("write"))
}

fn finetune_config(cfg: &RunConfig, task: &str) -> Result<FinetuneConfig> {
    let mut c = if task == "qa" { FinetuneConfig::qa() } else { FinetuneConfig::re_ner() };
    c.learning_rate = cfg.require("finetune.learning_rate")?;
    c.epochs = cfg.get_or("finetune.epochs", c.epochs)?;
    c.batch_size = cfg.get_or("finetune.batch_size", c.batch_size)?;
    c.warmup_fraction = cfg.require("finetune.warmup_fraction")?;
    c.adam.weight_decay = cfg.require("finetune.weight_decay")?;
    c.seed = cfg.require("seed")?;
    c.threads = threads_option(cfg)?;
    c.validate().map_err(invalid)?;
    Ok(c)
}

fn run_finetune(task: &str, cfg: &RunConfig) -> Result<()> {
    let fc = finetune_config(cfg, task)?;
    let words = read_words(&cfg.require::<String>("io.words")?)?;
    let base = load_checkpoint(&cfg.require::<String>("io.checkpoint")?)?;
    let mut model = base.model;
    let std: f64 = cfg.require("finetune.init_std")?;
    let mut rng = rng_for(fc.seed, Stream::Init, 1);
    let train_path: String = cfg.require("io.train")?;
    let dev_path = cfg.raw("io.dev");
    let fail = runtime("fine-tuning");
    let (spec, report) = match task {
        "qa" => {
            let train = qa::read_qa(open(&train_path)?).map_err(runtime(&train_path))?;
            let dev = dev_path.map(|p| qa::read_qa(open(p)?).map_err(runtime(p))).transpose()?;
            let use_entities: bool = cfg.require("task.use_entities")?;
            QaTask::attach(&mut model, std, &mut rng);
            let t = QaTask::new(words, use_entities);
            let r = tasks::finetune(&mut model, &t, &train, dev.as_deref(), &fc).map_err(fail)?;
            (serde_json::json!({ "use_entities": use_entities }), r)
        }
        "re" => {
            let train = re::read_re(open(&train_path)?).map_err(runtime(&train_path))?;
            let dev = dev_path.map(|p| re::read_re(open(p)?).map_err(runtime(p))).transpose()?;
            let variant: ReVariant = get_enum(cfg, "task.variant")?;
            let t = ReTask::attach(&mut model, words, variant, re::label_set(&train), std, &mut rng).map_err(invalid)?;
            let r = tasks::finetune(&mut model, &t, &train, dev.as_deref(), &fc).map_err(fail)?;
            (serde_json::to_value(&t.spec).map_err(runtime("json"))?, r)
        }
        _ => {
            let lang: String = cfg.require("task.lang")?;
            let train = ner::read_conll(open(&train_path)?, &lang).map_err(runtime(&train_path))?;
            let dev = dev_path
                .map(|p| ner::read_conll(open(p)?, &lang).map_err(runtime(p)))
                .transpose()?;
            let variant: NerVariant = get_enum(cfg, "task.variant")?;
            let t = NerTask::attach(&mut model, words, variant, ner::type_set(&train), std, &mut rng).map_err(invalid)?;
            let r = tasks::finetune(&mut model, &t, &train, dev.as_deref(), &fc).map_err(fail)?;
            (serde_json::to_value(&t.spec).map_err(runtime("json"))?, r)
        }
    };
    let mut ckpt = ModelCheckpoint::new(model, fc.seed);
    ckpt.step = report.steps as u64;
    ckpt.metadata.insert("task".into(), serde_json::json!(task));
    ckpt.metadata.insert("task_spec".into(), spec);
    ckpt.metadata
        .insert("finetune".into(), serde_json::to_value(&report).map_err(runtime("json"))?);
    ckpt.save(&output(cfg)?, StorageDtype::F64).map_err(runtime("checkpoint"))
}

fn task_spec<T: DeserializeOwned>(ckpt: &ModelCheckpoint, task: &str) -> Result<T> {
    match ckpt.metadata.get("task").and_then(|v| v.as_str()) {
        Some(t) if t == task => {}
        other => {
            return Err(CliError::Runtime(format!(
                "checkpoint was fine-tuned for {:?}, not {task}",
                other.unwrap_or("nothing")
            )))
        }
    }
    let spec = ckpt
        .metadata
        .get("task_spec")
        .cloned()
        .ok_or_else(|| CliError::Runtime("checkpoint lacks task_spec".into()))?;
    serde_json::from_value(spec).map_err(runtime("task_spec"))
}

/// Word vocabulary of a fine-tuned RE model: markers are appended again and
/// must land on the recorded ids.
fn re_vocab(mut words: WordVocab, spec: &ReSpec) -> Result<WordVocab> {
    if let Some((a, b)) = spec.markers {
        let got = (words.push(re::MARKER_HEAD), words.push(re::MARKER_TAIL));
        if got != (a, b) {
            return Err(CliError::Runtime(format!(
                "word vocabulary does not match the checkpoint (markers at {got:?}, expected {:?})",
                (a, b)
            )));
        }
    }
    Ok(words)
}

fn run_eval(task: &str, cfg: &RunConfig) -> Result<()> {
    let words = read_words(&cfg.require::<String>("io.words")?)?;
    let ckpt = load_checkpoint(&cfg.require::<String>("io.checkpoint")?)?;
    let data_path: String = cfg.require("io.data")?;
    let fail = runtime("evaluation");
    let report = match task {
        "qa" => {
            #[derive(Deserialize)]
            struct QaSpec {
                use_entities: bool,
            }
            let spec: QaSpec = task_spec(&ckpt, "qa")?;
            let data = qa::read_qa(open(&data_path)?).map_err(runtime(&data_path))?;
            let t = QaTask::new(words, spec.use_entities);
            let (preds, rep) = t.evaluate_report(&ckpt.model, &data).map_err(fail)?;
            serde_json::json!({ "report": rep, "predictions": preds })
        }
        "re" => {
            let spec: ReSpec = task_spec(&ckpt, "re")?;
            let data = re::read_re(open(&data_path)?).map_err(runtime(&data_path))?;
            let t = ReTask::from_spec(re_vocab(words, &spec)?, spec);
            let preds = t.predict_all(&ckpt.model, &data).map_err(runtime("evaluation"))?;
            let labels: Vec<&str> = preds.iter().map(|&p| t.spec.labels[p].as_str()).collect();
            serde_json::json!({
                "accuracy": t.accuracy(&ckpt.model, &data).map_err(runtime("evaluation"))?,
                "macro_f1": t.macro_f1(&ckpt.model, &data).map_err(runtime("evaluation"))?,
                "predictions": labels,
            })
        }
        _ => {
            let spec: NerSpec = task_spec(&ckpt, "ner")?;
            let lang: String = cfg.require("task.lang")?;
            let data = ner::read_conll(open(&data_path)?, &lang).map_err(runtime(&data_path))?;
            let t = NerTask::from_spec(words, spec);
            let prf = t.prf(&ckpt.model, &data).map_err(fail)?;
            let preds = crate::par::map(&data, |inst| t.predict(&ckpt.model, inst))
                .into_iter()
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(runtime("evaluation"))?;
            serde_json::json!({ "prf": prf, "predictions": preds })
        }
    };
    write_json(&output(cfg)?, &report)
}

fn run_cloze(cfg: &RunConfig) -> Result<()> {
    let mode: ClozeMode = get_enum(cfg, "cloze.mode")?;
    let words = read_words(&cfg.require::<String>("io.words")?)?;
    let entities = read_entities(&cfg.require::<String>("io.entities")?)?;
    let ckpt = load_checkpoint(&cfg.require::<String>("io.checkpoint")?)?;
    let qp: String = cfg.require("io.queries")?;
    let queries = cloze::read_queries(open(&qp)?, &entities).map_err(runtime(&qp))?;
    let report = cloze::evaluate(&ckpt.model, &words, &queries, mode).map_err(runtime("cloze evaluation"))?;
    write_json(&output(cfg)?, &report)
}

fn dump_features(cfg: &RunConfig) -> Result<()> {
    let spec: FeatureSpec = cfg
        .require::<String>("features.spec")?
        .parse()
        .map_err(invalid)?;
    let words = read_words(&cfg.require::<String>("io.words")?)?;
    let ckpt = load_checkpoint(&cfg.require::<String>("io.checkpoint")?)?;
    let dp: String = cfg.require("io.data")?;
    let embs = match spec {
        FeatureSpec::SpanMean => {
            let items = align::read_span_items(open(&dp)?).map_err(runtime(&dp))?;
            align::span_features(&ckpt.model, &words, &items)
        }
        FeatureSpec::ReConcat(variant) => {
            let data = re::read_re(open(&dp)?).map_err(runtime(&dp))?;
            align::re_features(&ckpt.model, &words, &data, variant, cfg.require("seed")?)
        }
    }
    .map_err(runtime("features"))?;
    let mut w = create(&output(cfg)?)?;
    align::write_embeddings(&mut w, &embs).map_err(runtime("write"))?;
    w.flush().map_err(runtime("write"))
}

fn read_embeddings(cfg: &RunConfig) -> Result<Vec<align::SpanEmbedding>> {
    let p: String = cfg.require("io.embeddings")?;
    align::read_embeddings(open(&p)?).map_err(runtime(&p))
}

fn analyze_cwr(cfg: &RunConfig) -> Result<()> {
    let embs = read_embeddings(cfg)?;
    let q: String = cfg.require("analyze.query_lang")?;
    let mrr = align::cwr_by_language(&embs, &q).map_err(runtime("retrieval"))?;
    let mean = if mrr.is_empty() { None } else { Some(mrr.values().sum::<f64>() / mrr.len() as f64) };
    write_json(&output(cfg)?, &serde_json::json!({ "query_lang": q, "mrr": mrr, "mean": mean }))
}

fn analyze_modularity(cfg: &RunConfig) -> Result<()> {
    let embs = read_embeddings(cfg)?;
    let k: usize = cfg.require("analyze.k")?;
    if k == 0 {
        return Err(invalid("analyze.k must be at least 1"));
    }
    let q: String = cfg.require("analyze.query_lang")?;
    let overall = align::modularity(&embs, k).map_err(runtime("modularity"))?;
    let langs: std::collections::BTreeSet<&str> = embs.iter().map(|e| e.lang.as_str()).collect();
    let mut pairs = BTreeMap::new();
    for l in langs.iter().filter(|l| **l != q) {
        let sub: Vec<_> = embs.iter().filter(|e| e.lang == q || e.lang == *l).cloned().collect();
        pairs.insert(l.to_string(), align::modularity(&sub, k).map_err(runtime("modularity"))?);
    }
    write_json(
        &output(cfg)?,
        &serde_json::json!({ "k": k, "modularity": overall, "with_query_lang": pairs }),
    )
}

fn inspect(cfg: &RunConfig) -> Result<()> {
    let ckpt = load_checkpoint(&cfg.require::<String>("io.checkpoint")?)?;
    let mut lines = vec![
        format!("step\t{}", ckpt.step),
        format!("seed\t{}", ckpt.rng.seed),
        format!("parameters\t{}", ckpt.model.params.total_numel()),
        format!("optimizer\t{}", ckpt.optimizer.is_some()),
    ];
    lines.extend(ckpt.metadata.keys().map(|k| format!("metadata\t{k}")));
    lines.extend(checkpoint::describe(&ckpt));
    let text = lines.join("\n") + "\n";
    match cfg.raw("io.output") {
        Some(p) => std::fs::write(p, text).map_err(runtime(p)),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(runtime("stdout")),
    }
}

fn report_error(e: &CliError) -> i32 {
    let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
    eprintln!("{line}");
    e.exit_code()
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let res = match cli.command {
        Command::Rerun { manifest, out, verify } => rerun(&manifest, out.as_deref(), verify).map(|_| ()),
        other => plan(other).and_then(|(name, cfg)| execute(&name, cfg).map(|_| ())),
    };
    match res {
        Ok(()) => 0,
        Err(e) => report_error(&e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_config_errors() {
        let cfg = RunConfig::parse("[train]\nbogus = 1\n").unwrap();
        let e = resolve_config("pretrain", cfg).unwrap_err();
        assert_eq!(e.exit_code(), 3);
        let e = resolve_config("nope", RunConfig::new()).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn defaults_follow_full_scale_settings() {
        let cfg = resolve_config("build-vocab", RunConfig::new()).unwrap();
        assert_eq!(cfg.raw("vocab.min_languages"), Some("3"));
        assert_eq!(cfg.raw("vocab.top_k"), Some("1200000"));
        let cfg = resolve_config("pretrain", RunConfig::new()).unwrap();
        let t = train_config(&cfg).unwrap();
        assert_eq!(t, TrainConfig::paper());
        assert_eq!(cfg.raw("train.max_entities"), Some("32"));
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from(["xlent", "cloze-eval", "--mode", "entity-xy", "--seed", "3"]).unwrap();
        let (name, cfg) = plan(cli.command).unwrap();
        assert_eq!(name, "cloze-eval");
        let cfg = resolve_config(&name, cfg).unwrap();
        assert_eq!(get_enum::<ClozeMode>(&cfg, "cloze.mode").unwrap(), ClozeMode::EntityXy);
        assert_eq!(cfg.raw("seed"), Some("3"));
        assert_eq!(run(["xlent", "frobnicate"]), 2);
        assert_eq!(run(["xlent", "pretrain", "--bogus"]), 2);
    }

    #[test]
    fn bad_values_exit_three() {
        let dir = tempfile::tempdir().unwrap();
        let cfgp = dir.path().join("x.cfg");
        std::fs::write(&cfgp, "[train]\nbatch_size = 0\n").unwrap();
        let code = run([
            "xlent",
            "pretrain",
            "--config",
            cfgp.to_str().unwrap(),
            "--set",
            "model.preset=tiny",
        ]);
        assert_eq!(code, 3);
    }
}
