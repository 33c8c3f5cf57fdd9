use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use daae::checkpoint::{sha256_hex, write_atomic, Checkpoint};
use daae::corpus::{generate_clustered_dataset, load_corpus, load_labels, ClusterSpec, Corpus, TokenSequence};
use daae::experiment::{self, load_text, DataSource, EvalSpec, ExperimentConfig, SweepAxis, CHECKPOINT_FILE, TOOL_VERSION};
use daae::metrics;
use daae::objectives::Objective;
use daae::theorem::{run_suite, SuiteConfig};
use daae::{Error, Result};

/// Exit status when a theorem check fails.
const EXIT_VIOLATION: u8 = 3;
/// Exit status when every check passed but some instances could not be solved.
const EXIT_SOLVER_FAILURE: u8 = 4;

#[derive(Parser)]
#[command(name = "daae", version, about = "Sequence autoencoder experiments and latent-geometry checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a clustered binary dataset (corpus.txt, labels.txt, centers.txt).
    MakeSynthetic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long)]
        per_cluster: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        flip_prob: Option<f64>,
    },
    /// Train a model; writes checkpoint.bin and metrics.jsonl.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_objective)]
        objective: Option<Objective>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_seconds: Option<f64>,
        /// Train on a text corpus instead of the configured data.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, requires = "corpus")]
        labels: Option<PathBuf>,
        /// Use the built-in synthetic benchmark settings as the base configuration.
        #[arg(long, conflicts_with = "config")]
        benchmark: bool,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; prints one JSON line and appends it to <out>/eval.jsonl.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate on this corpus instead of the training data.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, requires = "corpus")]
        labels: Option<PathBuf>,
        #[arg(long)]
        purity_k: Option<usize>,
        #[arg(long)]
        ppl_samples: Option<usize>,
    },
    /// Train and evaluate one model per value; writes sweep-<axis>.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_axis)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Decode interpolations or attribute-vector offsets.
    Manipulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Sequences to transform, one per line; interpolation uses the first two.
        #[arg(long)]
        inputs: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Labelled corpus the attribute vector is computed from.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        positive: Option<String>,
        #[arg(long)]
        negative: Option<String>,
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
    },
    /// Run the numerical theorem checks and write theorems.json.
    VerifyTheorems {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Interpolate,
    Arithmetic,
}

fn parse_objective(s: &str) -> std::result::Result<Objective, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown objective {s:?}; expected ae, aae, daae, beta-vae or laae"))
}

fn parse_axis(s: &str) -> std::result::Result<SweepAxis, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", p.display())))
        }
        None => Ok(T::default()),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require_out(common: &Common) -> Result<&Path> {
    common.out.as_deref().ok_or_else(|| Error::invalid("--out <dir> is required"))
}

fn lines_text<I: IntoIterator<Item = String>>(lines: I) -> String {
    lines.into_iter().map(|l| l + "\n").collect()
}

#[derive(Serialize)]
struct DatasetManifest<'a> {
    spec: &'a ClusterSpec,
    tool_version: &'a str,
    hash: String,
}

fn make_synthetic(common: &Common, clusters: Option<usize>, per_cluster: Option<usize>, length: Option<usize>, flip_prob: Option<f64>) -> Result<()> {
    let mut spec: ClusterSpec = read_config(common.config.as_deref())?;
    spec.num_clusters = clusters.unwrap_or(spec.num_clusters);
    spec.per_cluster = per_cluster.unwrap_or(spec.per_cluster);
    spec.length = length.unwrap_or(spec.length);
    spec.flip_prob = flip_prob.unwrap_or(spec.flip_prob);
    spec.seed = common.seed.unwrap_or(spec.seed);
    let out = require_out(common)?;
    let data = generate_clustered_dataset(&spec)?;
    ensure_dir(out)?;
    let bits = |s: &Vec<u8>| s.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(" ");
    write_atomic(&out.join("corpus.txt"), lines_text(data.lines()).as_bytes())?;
    write_atomic(&out.join("labels.txt"), lines_text(data.labels.iter().map(usize::to_string)).as_bytes())?;
    write_atomic(&out.join("centers.txt"), lines_text(data.centers.iter().map(bits)).as_bytes())?;
    let hash = sha256_hex(&serde_json::to_vec(&(&spec, TOOL_VERSION))?);
    let manifest = DatasetManifest { spec: &spec, tool_version: TOOL_VERSION, hash };
    write_atomic(&out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    eprintln!("wrote {} sequences to {}", data.sequences.len(), out.display());
    Ok(())
}

struct TrainArgs {
    objective: Option<Objective>,
    epochs: Option<usize>,
    max_seconds: Option<f64>,
    corpus: Option<PathBuf>,
    labels: Option<PathBuf>,
    benchmark: bool,
    resume: Option<PathBuf>,
}

fn train(common: &Common, a: TrainArgs) -> Result<()> {
    let mut cfg: ExperimentConfig = if a.benchmark {
        ExperimentConfig::synthetic_benchmark(a.objective.unwrap_or(Objective::Daae), common.seed.unwrap_or(0))
    } else {
        read_config(common.config.as_deref())?
    };
    if let Some(o) = a.objective {
        cfg.train.objective = o;
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if a.max_seconds.is_some() {
        cfg.max_seconds = a.max_seconds;
    }
    if let Some(c) = a.corpus {
        cfg.data = DataSource::Text { corpus: c, labels: a.labels };
    }
    let out = require_out(common)?;
    let resume = a.resume.map(Checkpoint::load).transpose()?;
    let run = experiment::train_run(cfg, Some(out), resume)?;
    let last = run.history.last();
    eprintln!(
        "trained to epoch {} in {:.1}s; reconstruction {:.4}; checkpoint {}",
        run.checkpoint.trainer.epoch,
        run.seconds,
        last.map_or(f64::NAN, |m| m.reconstruction),
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn checkpoint_corpus(ck: &Checkpoint, corpus: Option<PathBuf>, labels: Option<PathBuf>) -> Result<Corpus> {
    let c = &ck.manifest.config;
    match corpus {
        Some(path) => load_text(&DataSource::Text { corpus: path, labels }, &ck.vocab, c.model.max_len),
        None => load_text(&c.data, &ck.vocab, c.model.max_len),
    }
}

fn eval(common: &Common, checkpoint: &Path, corpus: Option<PathBuf>, labels: Option<PathBuf>, purity_k: Option<usize>, ppl_samples: Option<usize>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut spec: EvalSpec = match common.config.as_deref() {
        Some(p) => read_config(Some(p))?,
        None => ck.manifest.config.eval.clone(),
    };
    if let Some(s) = common.seed {
        spec.seed = s;
        spec.recall.seed = s;
        spec.lm.seed = s;
    }
    if purity_k.is_some() {
        spec.purity_k = purity_k;
    }
    if let Some(n) = ppl_samples {
        spec.ppl_samples = n;
    }
    let data = checkpoint_corpus(&ck, corpus, labels)?;
    let id = serde_json::to_value(ck.manifest.config.train.objective)?.as_str().unwrap_or("model").to_string();
    let report = experiment::evaluate(&ck.model, &data, &spec, &id, Some(ck.manifest_hash()?))?;
    println!("{}", report.to_json_line()?);
    if let Some(out) = &common.out {
        ensure_dir(out)?;
        report.append_jsonl(out.join("eval.jsonl"))?;
    }
    Ok(())
}

fn sweep(common: &Common, axis: SweepAxis, values: &[f64]) -> Result<()> {
    let mut base: ExperimentConfig = read_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        base.train.seed = s;
    }
    let out = require_out(common)?;
    ensure_dir(out)?;
    let rows = experiment::sweep(&base, axis, values, Some(out))?;
    print!("{}", experiment::sweep_csv(&rows));
    Ok(())
}

/// Settings of the manipulate command, readable from `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct ManipulateConfig {
    mode: Mode,
    inputs: Option<PathBuf>,
    steps: usize,
    corpus: Option<PathBuf>,
    labels: Option<PathBuf>,
    positive: Option<String>,
    negative: Option<String>,
    /// Examples per side used for the attribute vector.
    examples: usize,
    scales: Vec<f64>,
}

impl Default for ManipulateConfig {
    fn default() -> Self {
        ManipulateConfig {
            mode: Mode::Interpolate,
            inputs: None,
            steps: 10,
            corpus: None,
            labels: None,
            positive: None,
            negative: None,
            examples: 100,
            scales: vec![1.0, 1.5, 2.0],
        }
    }
}

fn manipulate(common: &Common, checkpoint: &Path, m: ManipulateConfig) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let max_len = ck.manifest.config.model.max_len;
    let decode = |s: &TokenSequence| ck.vocab.decode(s);
    let inputs = match &m.inputs {
        Some(p) => Some(load_corpus(p, &ck.vocab, max_len)?.sequences),
        None => None,
    };
    let mut lines = Vec::new();
    match m.mode {
        Mode::Interpolate => {
            let seqs = inputs.ok_or_else(|| Error::invalid("interpolation needs --inputs with two sequences"))?;
            if seqs.len() < 2 {
                return Err(Error::invalid(format!("interpolation needs two input sequences, found {}", seqs.len())));
            }
            // Listed from the first input to the second.
            for s in metrics::interpolate(&ck.model, &seqs[1], &seqs[0], m.steps)? {
                lines.push(decode(&s));
            }
        }
        Mode::Arithmetic => {
            let missing = || Error::invalid("arithmetic needs --corpus, --labels, --positive and --negative");
            let (corpus, labels) = (m.corpus.as_ref().ok_or_else(missing)?, m.labels.as_ref().ok_or_else(missing)?);
            let (pos, neg) = (m.positive.as_deref().ok_or_else(missing)?, m.negative.as_deref().ok_or_else(missing)?);
            let data = load_corpus(corpus, &ck.vocab, max_len)?.with_labels(load_labels(labels)?.into_iter().filter(|l| !l.is_empty()).collect())?;
            let (p, n) = (data.filter_label(pos, m.examples), data.filter_label(neg, m.examples));
            if p.is_empty() || n.is_empty() {
                return Err(Error::invalid(format!("no examples labelled {pos:?} or {neg:?}")));
            }
            let v = metrics::attribute_vector(&ck.model, &p, &n)?;
            let targets = inputs.unwrap_or_else(|| n.clone());
            for x in &targets {
                lines.push(format!("input\t{}", decode(x)));
                for &s in &m.scales {
                    lines.push(format!("+{s}\t{}", decode(&metrics::apply_offset(&ck.model, x, &v, s)?)));
                    lines.push(format!("-{s}\t{}", decode(&metrics::apply_offset(&ck.model, x, &v, -s)?)));
                }
            }
        }
    }
    let text = lines_text(lines);
    print!("{text}");
    if let Some(out) = &common.out {
        ensure_dir(out)?;
        let name = match m.mode {
            Mode::Interpolate => "interpolation.txt",
            Mode::Arithmetic => "arithmetic.txt",
        };
        write_atomic(&out.join(name), text.as_bytes())?;
    }
    Ok(())
}

fn verify_theorems(common: &Common, trials: Option<usize>) -> Result<ExitCode> {
    let mut cfg: SuiteConfig = read_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = trials {
        cfg.theorem1.trials = t;
        cfg.theorem3.trials = t;
    }
    let report = run_suite(&cfg)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &common.out {
        ensure_dir(out)?;
        write_atomic(&out.join("theorems.json"), json.as_bytes())?;
    }
    let (t1, t2, t3) = (&report.theorem1, &report.theorem2, &report.theorem3);
    println!("theorem 1: {}/{} trials equal across matchings ({} inconclusive)", t1.passed, t1.trials.len(), t1.inconclusive);
    println!("theorem 2: {}/{} grid points pass ({} infeasible skipped, {} solver errors)", t2.passed, t2.points.len(), t2.skipped.len(), t2.errors.len());
    println!(
        "theorem 3: {} bound violations over {} trials, separating matching wins {:.1}% ({} solver errors)",
        t3.bound_violations,
        t3.trials.len(),
        100.0 * t3.separating_win_rate,
        t3.errors.len()
    );
    println!("{} violations, {} solver failures, {:.1}s", report.violations, report.solver_failures, report.seconds);
    Ok(if report.violations > 0 {
        ExitCode::from(EXIT_VIOLATION)
    } else if report.solver_failures > 0 {
        ExitCode::from(EXIT_SOLVER_FAILURE)
    } else {
        ExitCode::SUCCESS
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::MakeSynthetic { common, clusters, per_cluster, length, flip_prob } => make_synthetic(&common, clusters, per_cluster, length, flip_prob)?,
        Command::Train { common, objective, epochs, max_seconds, corpus, labels, benchmark, resume } => {
            train(&common, TrainArgs { objective, epochs, max_seconds, corpus, labels, benchmark, resume })?
        }
        Command::Eval { common, checkpoint, corpus, labels, purity_k, ppl_samples } => eval(&common, &checkpoint, corpus, labels, purity_k, ppl_samples)?,
        Command::Sweep { common, axis, values } => sweep(&common, axis, &values)?,
        Command::Manipulate { common, checkpoint, mode, inputs, steps, corpus, labels, positive, negative, scales } => {
            let mut m: ManipulateConfig = read_config(common.config.as_deref())?;
            m.mode = mode.unwrap_or(m.mode);
            m.inputs = inputs.or(m.inputs);
            m.steps = steps.unwrap_or(m.steps);
            m.corpus = corpus.or(m.corpus);
            m.labels = labels.or(m.labels);
            m.positive = positive.or(m.positive);
            m.negative = negative.or(m.negative);
            m.scales = scales.unwrap_or(m.scales);
            manipulate(&common, &checkpoint, m)?
        }
        Command::VerifyTheorems { common, trials } => return verify_theorems(&common, trials),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
