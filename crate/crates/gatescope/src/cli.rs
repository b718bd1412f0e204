//! Command-line entry points. Exit codes: 0 success, 1 runtime error,
//! 2 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand};
use gatescope_core::aggregator::DEFAULT_K;
use gatescope_core::analysis::correlate_layer;
use gatescope_core::corpus::{sample_corpus, ByteTokenizer, CorpusManifest, CorpusSpec};
use gatescope_core::fixtures::make_again_fixture;
use gatescope_core::model::ModelConfig;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::corpus_io::{read_corpus, read_manifest, read_source_docs, write_corpus};
use crate::dataset::{find_row, read_dataset, write_dataset, DatasetManifest, DatasetRow};
use crate::dump::{read_dump, DumpHeader};
use crate::page::{build_neuron_page, write_pages, DEFAULT_CONTEXT_LEFT};
use crate::pipeline::{aggregate_corpus, aggregate_dump};
use crate::weights::{load_weights_file, save_weights_file, LoadedWeights};

pub const THREADS_ENV: &str = "GLUSCOPE_THREADS";
pub const RUN_MANIFEST_FILE: &str = "run.json";

#[derive(Debug, Parser)]
#[command(name = "gatescope", version, about = "Sign-split activation datasets for gated MLP neurons")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a token-budgeted corpus from a document source.
    Sample(SampleArgs),
    /// Aggregate activations from a model run or a dump into a dataset.
    Activations(ActivationsArgs),
    /// Correlate cos(w_in, w_out) with gate-positive frequency per layer.
    Analyze(AnalyzeArgs),
    /// Build viewer pages for neurons.
    Page(PageArgs),
    /// Serve a page directory over HTTP.
    Serve(ServeArgs),
    /// Write the synthetic "again" model and corpus.
    Fixture(FixtureArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    /// `.jsonl` with a "text" field per line, or plain text with one document per line.
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub budget: u64,
    #[arg(long, default_value_t = 1024)]
    pub max_doc_tokens: usize,
    /// Defaults to the byte tokenizer's end-of-text id.
    #[arg(long, default_value_t = ByteTokenizer::EOS)]
    pub prefix_token: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(group(ArgGroup::new("input").required(true).args(["weights", "dump"])))]
pub struct ActivationsArgs {
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub dump: Option<PathBuf>,
    /// Required with --weights; with --dump it only supplies the corpus id.
    #[arg(long, required_unless_present = "dump")]
    pub corpus: Option<PathBuf>,
    /// Model config JSON; overrides the one stored in the archive and, with
    /// --dump, must match the dump header.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_K, value_parser = clap::builder::RangedU64ValueParser::<usize>::new().range(1..))]
    pub k: usize,
    #[arg(long, default_value_t = 1, value_parser = clap::builder::RangedU64ValueParser::<usize>::new().range(1..))]
    pub shards: usize,
    /// Model id recorded in the dataset; defaults to the archive's.
    #[arg(long)]
    pub model_id: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(group(ArgGroup::new("layers").required(true).args(["layer", "all_layers"])))]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub all_layers: bool,
    /// Also write `analysis.json` and `run.json` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// `layer.neuron`, zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeuronId {
    pub layer: usize,
    pub neuron: usize,
}

impl FromStr for NeuronId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (l, n) = s
            .split_once('.')
            .ok_or_else(|| format!("expected layer.neuron, got \"{s}\""))?;
        let parse = |x: &str| x.parse::<usize>().map_err(|_| format!("expected layer.neuron, got \"{s}\""));
        Ok(NeuronId {
            layer: parse(l)?,
            neuron: parse(n)?,
        })
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.layer, self.neuron)
    }
}

impl Serialize for NeuronId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PageArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Neuron as `layer.neuron`; repeatable.
    #[arg(long = "neuron", required = true)]
    pub neurons: Vec<NeuronId>,
    #[arg(long, default_value_t = DEFAULT_CONTEXT_LEFT)]
    pub context_left: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long, default_value_t = 8000)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
}

#[derive(Debug, Args, Serialize)]
pub struct FixtureArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Receives `weights.safetensors` and `corpus/`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Written as `run.json` by every subcommand that finishes.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'static str,
    pub config: Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub corpus_id: Option<String>,
    pub model_id: Option<String>,
    pub duration_seconds: f64,
}

struct Run {
    subcommand: &'static str,
    config: Value,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    corpus_id: Option<String>,
    model_id: Option<String>,
    started: Instant,
}

impl Run {
    fn new<A: Serialize>(subcommand: &'static str, args: &A) -> Self {
        Run {
            subcommand,
            config: serde_json::to_value(args).unwrap_or(Value::Null),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            corpus_id: None,
            model_id: None,
            started: Instant::now(),
        }
    }

    fn input(&mut self, name: &str, p: &Path) {
        self.inputs.insert(name.into(), p.display().to_string());
    }

    fn output(&mut self, name: &str, p: &Path) {
        self.outputs.insert(name.into(), p.display().to_string());
    }

    fn manifest(self) -> RunManifest {
        RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            subcommand: self.subcommand,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            corpus_id: self.corpus_id,
            model_id: self.model_id,
            duration_seconds: self.started.elapsed().as_secs_f64(),
        }
    }

    fn write(self, dir: &Path) -> Result<()> {
        let p = dir.join(RUN_MANIFEST_FILE);
        let mut s = serde_json::to_string_pretty(&self.manifest())?;
        s.push('\n');
        std::fs::write(&p, s).with_context(|| format!("writing {}", p.display()))
    }
}

/// Identifier a dataset records for the corpus it was computed on.
pub fn corpus_id(m: &CorpusManifest) -> String {
    format!(
        "{}#seed={},budget={},max_doc_tokens={}",
        m.source, m.spec.seed, m.spec.token_budget, m.spec.max_doc_tokens
    )
}

/// Worker cap from `GLUSCOPE_THREADS`, if set.
pub fn thread_limit() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => bail!("{THREADS_ENV} must be a positive integer, got \"{v}\""),
        },
    }
}

fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match thread_limit()? {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
            Ok(pool.install(f))
        }
    }
}

fn read_config(path: &Path) -> Result<ModelConfig> {
    let s = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: ModelConfig =
        serde_json::from_str(&s).with_context(|| format!("parsing model config {}", path.display()))?;
    cfg.validate().with_context(|| format!("model config {}", path.display()))?;
    Ok(cfg)
}

fn load_model(weights: &Path, config: Option<&Path>) -> Result<LoadedWeights> {
    let cfg = config.map(read_config).transpose()?;
    load_weights_file(weights, cfg.as_ref()).with_context(|| format!("loading weights {}", weights.display()))
}

fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let mut run = Run::new("sample", a);
    let spec = CorpusSpec {
        token_budget: a.budget,
        max_doc_tokens: a.max_doc_tokens,
        prefix_token: a.prefix_token,
        seed: a.seed,
    };
    spec.validate()?;
    let docs = read_source_docs(&a.source)?;
    let source_id = a.source.display().to_string();
    let corpus = sample_corpus(docs, &ByteTokenizer, &spec, &source_id)?;
    if !corpus.manifest.budget_reached {
        eprintln!(
            "warning: source exhausted after {} tokens, below the budget of {}",
            corpus.manifest.total_tokens, a.budget
        );
    }
    write_corpus(&a.out, &corpus)?;
    run.input("source", &a.source);
    run.output("corpus", &a.out);
    run.corpus_id = Some(corpus_id(&corpus.manifest));
    run.write(&a.out)
}

fn cmd_activations(a: &ActivationsArgs) -> Result<()> {
    let mut run = Run::new("activations", a);
    let corpus_manifest = a.corpus.as_deref().map(read_manifest).transpose()?;
    let (state, model_id) = if let Some(wp) = &a.weights {
        let corpus_dir = a.corpus.as_deref().ok_or_else(|| anyhow!("--weights needs --corpus"))?;
        let model = load_model(wp, a.config.as_deref())?;
        let corpus = read_corpus(corpus_dir)?;
        run.input("weights", wp);
        run.input("corpus", corpus_dir);
        let state = with_pool(|| aggregate_corpus(&model.weights, &corpus, a.k, a.shards))??;
        (state, a.model_id.clone().unwrap_or(model.model_id))
    } else {
        let dp = a.dump.as_deref().expect("clap enforces one input");
        let expected = a
            .config
            .as_deref()
            .map(read_config)
            .transpose()?
            .map(|c| DumpHeader {
                n_layers: c.n_layers as u32,
                d_mlp: c.d_mlp as u32,
                activation: c.activation,
            });
        let f = File::open(dp).with_context(|| format!("opening {}", dp.display()))?;
        let (_, reader) = read_dump(BufReader::new(f)).with_context(|| format!("reading {}", dp.display()))?;
        run.input("dump", dp);
        if let Some(c) = &a.corpus {
            run.input("corpus", c);
        }
        let state = with_pool(|| aggregate_dump(reader, a.k, a.shards, expected))?
            .with_context(|| format!("aggregating {}", dp.display()))?;
        let stem = dp.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        (state, a.model_id.clone().unwrap_or(stem))
    };

    let cfg = state.config().clone();
    let cid = match &corpus_manifest {
        Some(m) => corpus_id(m),
        None => format!("dump:{}", a.dump.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
    };
    let manifest = DatasetManifest::new(
        &model_id,
        &cid,
        cfg.k,
        state.total_positions(),
        cfg.n_layers,
        cfg.d_mlp,
        cfg.activation,
    );
    let rows: Vec<DatasetRow> = state.finalize().iter().map(DatasetRow::from_record).collect();
    write_dataset(&a.out, &manifest, &rows)?;
    run.output("dataset", &a.out);
    run.corpus_id = Some(cid);
    run.model_id = Some(model_id);
    run.write(&a.out)
}

#[derive(Debug, Serialize)]
struct LayerCorrelation {
    layer: usize,
    n: usize,
    r: f64,
    p: f64,
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let mut run = Run::new("analyze", a);
    let (manifest, rows) = read_dataset(&a.dataset)?;
    let model = load_model(&a.weights, a.config.as_deref())?;
    let cfg = &model.weights.config;
    if (manifest.n_layers, manifest.d_mlp) != (cfg.n_layers, cfg.d_mlp) {
        bail!(
            "dataset shape ({} layers, d_mlp {}) does not match the model ({} layers, d_mlp {})",
            manifest.n_layers,
            manifest.d_mlp,
            cfg.n_layers,
            cfg.d_mlp
        );
    }
    let layers: Vec<usize> = match a.layer {
        Some(l) if l >= cfg.n_layers => bail!("layer {l} out of range (model has {} layers)", cfg.n_layers),
        Some(l) => vec![l],
        None => (0..cfg.n_layers).collect(),
    };
    let mut results = Vec::new();
    println!("{:>5} {:>6} {:>10} {:>12}", "layer", "n", "r", "p");
    for l in layers {
        let c = correlate_layer(&rows, &model.weights, l).with_context(|| format!("layer {l}"))?;
        println!("{:>5} {:>6} {:>10.6} {:>12.4e}", l, c.n, c.r, c.p);
        results.push(LayerCorrelation {
            layer: l,
            n: c.n,
            r: c.r,
            p: c.p,
        });
    }
    run.input("dataset", &a.dataset);
    run.input("weights", &a.weights);
    run.corpus_id = Some(manifest.corpus_id.clone());
    run.model_id = Some(model.model_id.clone());
    match &a.out {
        Some(out) => {
            std::fs::create_dir_all(out)?;
            let p = out.join("analysis.json");
            let mut s = serde_json::to_string_pretty(&json!({ "layers": results }))?;
            s.push('\n');
            std::fs::write(&p, s)?;
            run.output("analysis", &p);
            run.write(out)
        }
        None => {
            eprintln!("{}", serde_json::to_string(&run.manifest())?);
            Ok(())
        }
    }
}

fn cmd_page(a: &PageArgs) -> Result<()> {
    let mut run = Run::new("page", a);
    let (manifest, rows) = read_dataset(&a.dataset)?;
    let corpus = read_corpus(&a.corpus)?;
    let cid = corpus_id(&corpus.manifest);
    if cid != manifest.corpus_id {
        bail!("dataset was computed on corpus \"{}\", not \"{cid}\"", manifest.corpus_id);
    }
    let model = load_model(&a.weights, a.config.as_deref())?;
    if model.model_id != manifest.model_id {
        eprintln!(
            "warning: weights are \"{}\", dataset was computed with \"{}\"",
            model.model_id, manifest.model_id
        );
    }
    let mut selected = Vec::new();
    for id in &a.neurons {
        let row = find_row(&rows, id.layer, id.neuron)
            .ok_or_else(|| anyhow!("neuron {id} is not in the dataset"))?;
        selected.push(row);
    }
    let pages = with_pool(|| {
        selected
            .par_iter()
            .map(|row| build_neuron_page(row, &manifest, &corpus, &model.weights, a.context_left))
            .collect::<Result<Vec<_>, _>>()
    })??;
    write_pages(&a.out, &pages)?;
    run.input("dataset", &a.dataset);
    run.input("corpus", &a.corpus);
    run.input("weights", &a.weights);
    run.output("pages", &a.out);
    run.corpus_id = Some(cid);
    run.model_id = Some(manifest.model_id.clone());
    run.write(&a.out)
}

fn cmd_serve(a: &ServeArgs) -> Result<()> {
    if !a.dir.is_dir() {
        bail!("{} is not a directory", a.dir.display());
    }
    let mut rt = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = thread_limit()? {
        rt.worker_threads(n);
    }
    let rt = rt.enable_all().build()?;
    rt.block_on(crate::serve::serve(a.dir.clone(), SocketAddr::new(a.host, a.port)))?;
    Ok(())
}

pub const FIXTURE_WEIGHTS: &str = "weights.safetensors";
pub const FIXTURE_CORPUS: &str = "corpus";

fn cmd_fixture(a: &FixtureArgs) -> Result<()> {
    let mut run = Run::new("fixture", a);
    let f = make_again_fixture(a.seed);
    std::fs::create_dir_all(&a.out)?;
    let wp = a.out.join(FIXTURE_WEIGHTS);
    let model_id = format!("fixture-again-{}", a.seed);
    save_weights_file(&wp, &f.weights, &model_id)?;
    let cp = a.out.join(FIXTURE_CORPUS);
    write_corpus(&cp, &f.corpus)?;
    run.output("weights", &wp);
    run.output("corpus", &cp);
    run.model_id = Some(model_id);
    run.corpus_id = Some(corpus_id(&f.corpus.manifest));
    run.write(&a.out)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Sample(a) => cmd_sample(a),
        Command::Activations(a) => cmd_activations(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Page(a) => cmd_page(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Fixture(a) => cmd_fixture(a),
    }
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
