//! Subcommands of the `hgda` tool. Each command validates all of its inputs
//! before it creates anything under the output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use hgda::checkpoint::TensorFile;
use hgda::config::RunConfig;
use hgda::corpus::{corpus_stats, Sentence, Split};
use hgda::eval::{run_protocol, summary_table, EvalReport};
use hgda::manifest::{load_manifest, LoadedManifest};
use hgda::optim::Sgd;
use hgda::rng::RngKey;
use hgda::sampler::{sample_batch_par, SamplingMode};
use hgda::synth::{generate, write_suite, SynthConfig};
use hgda::trainer::{IterationRecord, StopReason, TrainState, Trainer, Weighting};
use hgda::vocab::Vocabularies;
use hgda::{Error, ModelParams, CODE_VERSION};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const MODEL_FILE: &str = "model.ckpt";
pub const STATE_FILE: &str = "state.ckpt";
pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Parser)]
#[command(name = "hgda", version, about = "Hardness-guided meta-learning for few-shot NER")]
pub struct Cli {
    /// Worker threads (0 = one per core). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-corpus size and entity-density table.
    Stats(StatsArgs),
    /// Write a synthetic multi-domain suite with manifest and config.
    Synth(SynthArgs),
    /// Meta-train on the source domains of a manifest.
    Train(TrainArgs),
    /// Adapt a trained encoder to the target domain and score it.
    AdaptEval(EvalArgs),
    /// Dump sampled source tasks for inspection.
    SampleTasks(SampleArgs),
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Also write `stats.csv` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML file overriding the generator defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Hardness weighting, any sentence in support sets.
    Hgda,
    /// Hardness weighting, entity-bearing support sentences only.
    HgdaNes,
    /// Every task weighted equally.
    Uniform,
}

/// Flags shared by commands that read a manifest and a run configuration.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Save resumable state every this many iterations (0 = only at the end).
    #[arg(long, default_value_t = 25)]
    pub checkpoint_every: usize,
    /// Continue from `state.ckpt` in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Save state and exit after this many iterations; continue with `--resume`.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

impl TrainArgs {
    pub fn new(manifest: &Path, config: Option<&Path>, out: &Path) -> Self {
        TrainArgs {
            run: RunArgs {
                manifest: manifest.to_path_buf(),
                config: config.map(Path::to_path_buf),
                seed: None,
                mode: None,
            },
            out: out.to_path_buf(),
            max_iters: None,
            checkpoint_every: 25,
            resume: false,
            stop_after: None,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated target episode sizes.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub repeats: Option<usize>,
}

impl EvalArgs {
    pub fn new(manifest: &Path, config: Option<&Path>, checkpoint: &Path, out: &Path) -> Self {
        EvalArgs {
            run: RunArgs {
                manifest: manifest.to_path_buf(),
                config: config.map(Path::to_path_buf),
                seed: None,
                mode: None,
            },
            checkpoint: checkpoint.to_path_buf(),
            out: out.to_path_buf(),
            sizes: None,
            repeats: None,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// JSON-lines output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Everything a run is derived from.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub manifest_path: PathBuf,
    pub manifest: LoadedManifest,
    pub config: RunConfig,
}

impl RunSpec {
    pub fn load(args: &RunArgs) -> Result<Self> {
        let mut config = match &args.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = args.seed {
            config.seed = seed;
        }
        if let Some(mode) = args.mode {
            let (sampling, weighting) = match mode {
                Mode::Hgda => (SamplingMode::Uniform, Weighting::Hardness),
                Mode::HgdaNes => (SamplingMode::NeConstrained, Weighting::Hardness),
                Mode::Uniform => (SamplingMode::Uniform, Weighting::Uniform),
            };
            config.train.mode = sampling;
            config.train.weighting = weighting;
        }
        config.validate()?;
        let manifest = load_manifest(&args.manifest, config.repair_tags)
            .with_context(|| format!("loading manifest {}", args.manifest.display()))?;
        Ok(RunSpec {
            manifest_path: args.manifest.clone(),
            manifest,
            config,
        })
    }

    /// Provenance embedded in every output.
    pub fn provenance(&self) -> Value {
        json!({
            "seed": self.config.seed,
            "config_hash": self.config.hash(),
            "code_version": CODE_VERSION,
        })
    }
}

/// Report label for a sampling mode and weighting combination.
pub fn method_name(mode: SamplingMode, weighting: Weighting) -> &'static str {
    match (weighting, mode) {
        (Weighting::Hardness, SamplingMode::Uniform) => "hgda",
        (Weighting::Hardness, SamplingMode::NeConstrained) => "hgda-nes",
        (Weighting::Uniform, SamplingMode::Uniform) => "uniform",
        (Weighting::Uniform, SamplingMode::NeConstrained) => "uniform-nes",
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build()?;
    pool.install(|| match cli.command {
        Command::Stats(a) => cmd_stats(&a).map(|t| print!("{t}")),
        Command::Synth(a) => cmd_synth(&a).map(|p| println!("wrote {}", p.display())),
        Command::Train(a) => cmd_train(&a).map(|s| match s.stop {
            Some(stop) => println!(
                "{} iterations ({stop:?}); dev query loss {:.4} -> {:.4}",
                s.iterations, s.initial_dev, s.best_dev
            ),
            None => println!("paused after {} iterations; continue with --resume", s.iterations),
        }),
        Command::AdaptEval(a) => cmd_adapt_eval(&a).map(|r| print!("{}", summary_table(&r))),
        Command::SampleTasks(a) => cmd_sample_tasks(&a).map(|s| {
            if a.out.is_none() {
                print!("{s}")
            }
        }),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Aligned table of per-corpus statistics.
pub fn cmd_stats(args: &StatsArgs) -> Result<String> {
    let m = load_manifest(&args.manifest, false)?;
    let mut rows = Vec::new();
    for c in &m.corpora {
        let s = corpus_stats(c)?;
        rows.push([
            c.name.clone(),
            m.registry.domains[c.domain_id].clone(),
            c.split.to_string(),
            s.num_sentences.to_string(),
            s.num_unique_tokens.to_string(),
            format!("{:.1}", 100.0 * s.fraction_with_entities),
        ]);
    }
    let header = [
        "corpus",
        "domain",
        "split",
        "sentences",
        "unique_tokens",
        "pct_with_entities",
    ];
    if let Some(out) = &args.out {
        create_dir(out)?;
        let mut csv = header.join(",") + "\n";
        for r in &rows {
            csv += &(r.join(",") + "\n");
        }
        write(&out.join("stats.csv"), &csv)?;
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap())
        .collect();
    let mut table = String::new();
    for r in std::iter::once(header.map(String::from)).chain(rows) {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i < 3 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        writeln!(table, "{}", cells.join("  ").trim_end()).unwrap();
    }
    Ok(table)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<PathBuf> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SynthConfig::from_toml(&text)?
        }
        None => SynthConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let suite = generate(&cfg)?;
    let files = write_suite(&suite, &args.out)?;
    Ok(files.manifest)
}

/// One line of `train_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Header {
        seed: u64,
        config_hash: String,
        code_version: String,
        method: String,
        domains: Vec<String>,
    },
    Iteration(IterationRecord),
    Summary {
        iterations: usize,
        stop: StopReason,
        initial_dev: f64,
        best_dev: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub iterations: usize,
    /// `None` when the run was paused by `--stop-after`.
    pub stop: Option<StopReason>,
    pub initial_dev: f64,
    pub best_dev: f64,
    pub out: PathBuf,
}

fn init_model(spec: &RunSpec, vocabs: &Vocabularies) -> Result<ModelParams> {
    let emb = spec
        .manifest
        .load_embeddings(spec.config.model.embedding_dim, spec.config.unk_policy)?;
    let mut rng = RngKey::new(spec.config.seed).child("init").stream();
    Ok(ModelParams::init(
        &spec.config.model,
        vocabs,
        spec.manifest.registry.domains.len(),
        emb.as_ref(),
        &mut rng,
    )?)
}

fn checkpoint_metadata(spec: &RunSpec, vocabs: &Vocabularies, extra: Value) -> Value {
    let mut meta = spec.provenance();
    let m = meta.as_object_mut().unwrap();
    m.insert(
        "method".into(),
        json!(method_name(spec.config.train.mode, spec.config.train.weighting)),
    );
    m.insert("config".into(), serde_json::to_value(&spec.config).unwrap());
    m.insert("vocabularies".into(), serde_json::to_value(vocabs).unwrap());
    m.insert("domains".into(), json!(spec.manifest.registry.domains));
    if let Value::Object(e) = extra {
        m.extend(e);
    }
    meta
}

fn save_state(spec: &RunSpec, vocabs: &Vocabularies, state: &TrainState, path: &Path) -> Result<()> {
    let mut f = TensorFile::new(checkpoint_metadata(
        spec,
        vocabs,
        json!({
            "iteration": state.iteration,
            "best_dev": state.best_dev,
            "initial_dev": state.initial_dev,
            "since_best": state.since_best,
            "optimizer_steps": state.optimizer.steps,
        }),
    ));
    f.push_group("params", &state.params);
    f.push_group("velocity", &state.optimizer.velocity);
    f.push_group("best", &state.best_params);
    f.save(path)?;
    Ok(())
}

fn load_state(spec: &RunSpec, path: &Path) -> Result<TrainState> {
    let f = TensorFile::load(path)?;
    let meta = &f.metadata;
    if meta["config_hash"] != json!(spec.config.hash()) {
        return Err(Error::IncompatibleCheckpoint("state was written with a different configuration".into()).into());
    }
    let field = |k: &str| meta[k].clone();
    let num = |k: &str| -> Result<f64> {
        field(k)
            .as_f64()
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing `{k}`")).into())
    };
    let params = f.model("params")?;
    let mut optimizer = Sgd::new(spec.config.train.sgd(), &params);
    optimizer.velocity = f.model("velocity")?;
    optimizer.steps = num("optimizer_steps")? as u64;
    Ok(TrainState {
        iteration: num("iteration")? as usize,
        best_params: f.model("best")?,
        params,
        optimizer,
        best_dev: num("best_dev")?,
        initial_dev: num("initial_dev")?,
        since_best: num("since_best")? as usize,
    })
}

fn log_line(line: &LogLine) -> String {
    serde_json::to_string(line).unwrap() + "\n"
}

/// Meta-trains and writes `train_log.jsonl`, `model.ckpt`, `state.ckpt` and `run.json`.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let mut spec = RunSpec::load(&args.run)?;
    if let Some(n) = args.max_iters {
        spec.config.train.max_outer_iters = n;
        spec.config.validate()?;
    }
    let vocabs = spec.manifest.vocabularies();
    let pool = spec.manifest.source_pool(&vocabs, Split::Train)?;
    let dev_pool = if spec.manifest.has_split(Split::Dev) {
        spec.manifest.source_pool(&vocabs, Split::Dev)?
    } else {
        pool.clone()
    };
    let trainer = Trainer::new(&pool, &dev_pool, spec.config.train.clone(), spec.config.seed)?;
    let state_path = args.out.join(STATE_FILE);
    let log_path = args.out.join(LOG_FILE);
    let (state, mut log) = if args.resume {
        let state = load_state(&spec, &state_path)?;
        let old = fs::read_to_string(&log_path).with_context(|| format!("reading {}", log_path.display()))?;
        let mut kept = String::new();
        for line in old.lines() {
            let parsed: LogLine = serde_json::from_str(line).context("parsing training log")?;
            match parsed {
                LogLine::Iteration(r) if r.iteration >= state.iteration => {}
                LogLine::Summary { .. } => {}
                _ => kept += &(line.to_string() + "\n"),
            }
        }
        (state, kept)
    } else {
        let init = init_model(&spec, &vocabs)?;
        let state = trainer.init_state(init)?;
        let header = LogLine::Header {
            seed: spec.config.seed,
            config_hash: spec.config.hash(),
            code_version: CODE_VERSION.to_string(),
            method: method_name(spec.config.train.mode, spec.config.train.weighting).to_string(),
            domains: pool.domains.iter().map(|d| d.name.clone()).collect(),
        };
        (state, log_line(&header))
    };
    create_dir(&args.out)?;
    write(
        &args.out.join(RUN_FILE),
        &(serde_json::to_string_pretty(&json!({
            "provenance": spec.provenance(),
            "manifest": spec.manifest_path,
            "config": spec.config,
        }))? + "\n"),
    )?;

    let mut state = state;
    let mut ran = 0;
    let stop = loop {
        if let Some(reason) = trainer.is_done(&state) {
            break reason;
        }
        if args.stop_after.is_some_and(|n| ran >= n) {
            save_state(&spec, &vocabs, &state, &state_path)?;
            write(&log_path, &log)?;
            return Ok(TrainSummary {
                iterations: state.iteration,
                stop: None,
                initial_dev: state.initial_dev,
                best_dev: state.best_dev,
                out: args.out.clone(),
            });
        }
        let rec = trainer.step(&mut state)?;
        ran += 1;
        log += &log_line(&LogLine::Iteration(rec));
        if args.checkpoint_every > 0 && state.iteration % args.checkpoint_every == 0 {
            save_state(&spec, &vocabs, &state, &state_path)?;
            write(&log_path, &log)?;
        }
    };
    log += &log_line(&LogLine::Summary {
        iterations: state.iteration,
        stop,
        initial_dev: state.initial_dev,
        best_dev: state.best_dev,
    });
    save_state(&spec, &vocabs, &state, &state_path)?;
    write(&log_path, &log)?;
    let mut model = TensorFile::new(checkpoint_metadata(&spec, &vocabs, json!({"best_dev": state.best_dev})));
    model.push_group("model", &state.best_params);
    model.save(&args.out.join(MODEL_FILE))?;
    Ok(TrainSummary {
        iterations: state.iteration,
        stop: Some(stop),
        initial_dev: state.initial_dev,
        best_dev: state.best_dev,
        out: args.out.clone(),
    })
}

/// Trained parameters plus what is needed to use them.
pub struct LoadedModel {
    pub params: ModelParams,
    pub vocabs: Vocabularies,
    pub method: String,
    pub metadata: Value,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let f = TensorFile::load(path)?;
    let params = f.model("model")?;
    let vocabs: Vocabularies = serde_json::from_value(f.metadata["vocabularies"].clone())
        .map_err(|e| Error::IncompatibleCheckpoint(format!("vocabularies: {e}")))?;
    if vocabs.tokens.len() != params.theta.vocab_size() {
        return Err(Error::IncompatibleCheckpoint("vocabulary does not match the embedding table".into()).into());
    }
    let method = f.metadata["method"].as_str().unwrap_or("model").to_string();
    Ok(LoadedModel {
        params,
        vocabs,
        method,
        metadata: f.metadata,
    })
}

fn report_stem(r: &EvalReport) -> String {
    format!("report_{}_{}", r.target, r.size)
}

fn comment_line(provenance: &Value) -> String {
    format!(
        "# {} seed={} config={}\n",
        provenance["code_version"].as_str().unwrap_or_default(),
        provenance["seed"],
        provenance["config_hash"].as_str().unwrap_or_default()
    )
}

/// Runs the adaptation protocol for every target corpus and size and writes
/// one JSON and one CSV report per pair plus `summary.txt`.
pub fn cmd_adapt_eval(args: &EvalArgs) -> Result<Vec<EvalReport>> {
    let mut spec = RunSpec::load(&args.run)?;
    if let Some(sizes) = &args.sizes {
        spec.config.adapt.sizes = sizes.clone();
    }
    if let Some(r) = args.repeats {
        spec.config.adapt.repeats = r;
    }
    spec.config.validate()?;
    let model = load_model(&args.checkpoint)?;
    let theta = &model.params.theta;
    let m = &spec.config.model;
    if theta.embedding_dim() != m.embedding_dim
        || theta.output_dim() != m.hidden_size
        || theta.chars.is_some() != m.char_features
    {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint encoder ({}-d embeddings, {}-d output) does not match the configuration ({}-d, {}-d)",
            theta.embedding_dim(),
            theta.output_dim(),
            m.embedding_dim,
            m.hidden_size
        ))
        .into());
    }
    let targets = spec.manifest.target_corpora();
    if targets.is_empty() {
        bail!("manifest has no target-domain corpus with both train and test splits");
    }
    let mut provenance = spec.provenance();
    provenance["checkpoint_config_hash"] = model.metadata["config_hash"].clone();
    let mut reports = Vec::new();
    for (_, train, test) in &targets {
        for &size in &spec.config.adapt.sizes {
            let mut r = run_protocol(
                &model.params,
                &model.vocabs,
                train,
                test,
                size,
                &spec.config.adapt,
                spec.config.seed,
                &model.method,
            )?;
            r.run = provenance.clone();
            reports.push(r);
        }
    }
    create_dir(&args.out)?;
    for r in &reports {
        let stem = report_stem(r);
        write(&args.out.join(format!("{stem}.json")), &r.to_json())?;
        write(
            &args.out.join(format!("{stem}.csv")),
            &(comment_line(&provenance) + &r.to_csv()),
        )?;
    }
    write(
        &args.out.join("summary.txt"),
        &(comment_line(&provenance) + &summary_table(&reports)),
    )?;
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDump {
    pub index: usize,
    pub domain: String,
    pub support: Vec<String>,
    pub query: Vec<String>,
}

fn show(s: &Sentence) -> String {
    s.tokens
        .iter()
        .zip(&s.tags)
        .map(|(w, t)| if t == "O" { w.clone() } else { format!("{w}/{t}") })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Samples `count` tasks exactly as training iteration 0 would key them and
/// renders their sentences as JSON lines.
pub fn cmd_sample_tasks(args: &SampleArgs) -> Result<String> {
    let spec = RunSpec::load(&args.run)?;
    let lm = &spec.manifest;
    let vocabs = lm.vocabularies();
    let pool = lm.source_pool(&vocabs, Split::Train)?;
    let raw: Vec<Vec<&Sentence>> = lm
        .registry
        .source_domains()
        .iter()
        .map(|name| {
            let id = lm.registry.id(name).unwrap();
            lm.corpora
                .iter()
                .filter(|c| c.domain_id == id && c.split == Split::Train)
                .flat_map(|c| c.sentences.iter())
                .collect()
        })
        .collect();
    let sampler = spec.config.train.sampler(spec.config.seed);
    pool.validate(&sampler)?;
    let key = RngKey::new(spec.config.seed).child("sample-tasks");
    let tasks = sample_batch_par(&pool, &sampler, args.count, key)?;
    let mut out =
        serde_json::to_string(&json!({"provenance": spec.provenance(), "k": sampler.k, "mode": sampler.mode}))? + "\n";
    for (i, t) in tasks.iter().enumerate() {
        let d = TaskDump {
            index: i,
            domain: pool.domains[t.domain].name.clone(),
            support: t.support.iter().map(|&j| show(raw[t.domain][j])).collect(),
            query: t.query.iter().map(|&j| show(raw[t.domain][j])).collect(),
        };
        out += &(serde_json::to_string(&d)? + "\n");
    }
    if let Some(path) = &args.out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        write(path, &out)?;
    }
    Ok(out)
}
