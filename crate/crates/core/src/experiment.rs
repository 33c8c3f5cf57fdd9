//! Experiment configuration, training runs with checkpoints and metric logs,
//! evaluation reports and hyperparameter sweeps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{sha256_hex, write_atomic, Checkpoint, RunStatus};
use crate::corpus::{build_vocab, generate_clustered_dataset, load_labels, read_lines, ClusterSpec, Corpus, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport, RecallConfig};
use crate::objectives::{mix_seed, EpochMetrics, LmConfig, Objective, PerturbKind, Trainer};
use crate::seqmodel::{ModelConfig, SeqAutoencoder};
use crate::SeededRng;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Where training sequences come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    /// Generated clustered binary sequences.
    Synthetic(ClusterSpec),
    /// One whitespace-tokenized sequence per line, with an optional label sidecar.
    Text { corpus: PathBuf, labels: Option<PathBuf> },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(ClusterSpec::default())
    }
}

/// Metrics computed by [`evaluate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSpec {
    /// Latent neighborhood sizes for the recall curve; empty disables recall.
    pub ks: Vec<usize>,
    pub recall: RecallConfig,
    /// Neighborhood size for label purity; requires labels.
    pub purity_k: Option<usize>,
    pub reconstruction: bool,
    /// Prior samples for forward/reverse perplexity; 0 disables it.
    pub ppl_samples: usize,
    pub lm: LmConfig,
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            ks: vec![10, 20, 50, 100],
            recall: RecallConfig::default(),
            purity_k: None,
            reconstruction: true,
            ppl_samples: 0,
            lm: LmConfig::default(),
            seed: 0,
        }
    }
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: crate::objectives::TrainConfig,
    pub data: DataSource,
    /// Minimum token count for text vocabularies.
    pub min_count: usize,
    /// Checkpoint every this many epochs; 0 saves only at the end.
    pub save_every: usize,
    /// Stop after the first epoch that ends past this wall-clock budget.
    pub max_seconds: Option<f64>,
    pub eval: EvalSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            train: Default::default(),
            data: DataSource::default(),
            min_count: 1,
            save_every: 0,
            max_seconds: None,
            eval: EvalSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Settings used for the clustered binary benchmark; `seed` draws both
    /// the dataset and the training randomness.
    pub fn synthetic_benchmark(objective: Objective, seed: u64) -> Self {
        let mut c = ExperimentConfig::default();
        c.model = ModelConfig {
            embed_dim: 16,
            hidden_dim: 64,
            latent_dim: 2,
            disc_hidden: 32,
            max_len: 50,
            init: crate::seqmodel::Init::Glorot,
            ..ModelConfig::default()
        };
        c.data = DataSource::Synthetic(ClusterSpec { seed, ..ClusterSpec::default() });
        c.train.objective = objective;
        c.train.perturbation = crate::objectives::PerturbationSpec::new(PerturbKind::BitFlip, 0.2);
        c.train.batch_size = 8;
        c.train.epochs = 400;
        c.train.seed = seed;
        c.train.adam.lr = 0.002;
        c.train.final_lr_fraction = 0.1;
        c.max_seconds = Some(570.0);
        c.eval.purity_k = Some(10);
        c
    }
}

/// Resolved configuration plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub tool_version: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub git_describe: Option<String>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn git_describe() -> Option<String> {
    let out = std::process::Command::new("git").args(["describe", "--always", "--dirty"]).output().ok()?;
    out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_string()).filter(|s| !s.is_empty())
}

impl ExperimentManifest {
    pub fn new(config: ExperimentConfig) -> Self {
        ExperimentManifest {
            seed: config.train.seed,
            config,
            tool_version: TOOL_VERSION.to_string(),
            started_unix: unix_now(),
            finished_unix: None,
            git_describe: git_describe(),
        }
    }

    /// SHA-256 over the configuration, seed and tool version. Timestamps and
    /// the source revision are left out so identical runs share a hash.
    pub fn hash(&self) -> Result<String> {
        let key = serde_json::to_vec(&(&self.config, self.seed, &self.tool_version))?;
        Ok(sha256_hex(&key))
    }
}

/// Vocabulary and corpus for a data source. Text vocabularies are built
/// from the corpus; the model's vocabulary size and maximum length follow.
pub fn load_data(config: &mut ExperimentConfig) -> Result<(Vocab, Corpus)> {
    let (vocab, corpus) = match &config.data {
        DataSource::Synthetic(spec) => {
            config.model.max_len = spec.length;
            (Vocab::binary(), generate_clustered_dataset(spec)?.to_corpus())
        }
        DataSource::Text { corpus, .. } => {
            let lines = read_lines(corpus)?;
            let vocab = build_vocab(&lines, config.min_count.max(1))?;
            let corpus = load_text(&config.data, &vocab, config.model.max_len)?;
            (vocab, corpus)
        }
    };
    config.model.vocab_size = vocab.len();
    Ok((vocab, corpus))
}

/// Corpus for a data source under an existing vocabulary.
pub fn load_text(source: &DataSource, vocab: &Vocab, max_len: usize) -> Result<Corpus> {
    match source {
        DataSource::Synthetic(spec) => Ok(generate_clustered_dataset(spec)?.to_corpus()),
        DataSource::Text { corpus, labels } => {
            let lines = read_lines(corpus)?;
            let seqs = lines
                .iter()
                .map(|l| {
                    let mut s = vocab.encode_line(l);
                    s.0.truncate(max_len);
                    s
                })
                .collect();
            let c = Corpus::new(seqs);
            match labels {
                Some(p) => c.with_labels(load_labels(p)?.into_iter().filter(|l| !l.is_empty()).collect()),
                None => Ok(c),
            }
        }
    }
}

/// One row of the per-epoch metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub manifest_hash: String,
    pub epoch: usize,
    pub reconstruction: f64,
    pub discriminator: Option<f64>,
    pub encoder_adversarial: Option<f64>,
    pub kl: Option<f64>,
    pub logvar_penalty: Option<f64>,
    pub total: f64,
}

impl EpochRow {
    fn new(hash: &str, m: &EpochMetrics) -> Self {
        EpochRow {
            manifest_hash: hash.to_string(),
            epoch: m.epoch,
            reconstruction: m.reconstruction,
            discriminator: m.discriminator,
            encoder_adversarial: m.encoder_adversarial,
            kl: m.kl,
            logvar_penalty: m.logvar_penalty,
            total: m.total,
        }
    }
}

pub fn append_jsonl<T: Serialize>(path: &Path, row: &T) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(row)?).map_err(|e| Error::io(path, e))
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub corpus: Corpus,
    pub history: Vec<EpochMetrics>,
    pub seconds: f64,
}

/// A fresh model and trainer for a resolved configuration.
pub fn initialize(config: &ExperimentConfig, vocab: &Vocab) -> Result<(SeqAutoencoder, Trainer)> {
    let mut rng = SeededRng::seed_from_u64(mix_seed(config.train.seed, 0, 0));
    let model = SeqAutoencoder::new(config.model, config.train.objective.is_variational(), &mut rng)?;
    let trainer = Trainer::new(config.train, &model, vocab)?;
    Ok((model, trainer))
}

/// Trains to `config.train.epochs` (or the time budget). With `out`, writes
/// `metrics.jsonl` and `checkpoint.bin` there. A resumed run continues from
/// the checkpoint's epoch with its optimizer state.
pub fn train_run(config: ExperimentConfig, out: Option<&Path>, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    let (mut ck, corpus) = match resume {
        Some(ck) => {
            let c = &ck.manifest.config;
            let corpus = load_text(&c.data, &ck.vocab, c.model.max_len)?;
            let mut ck = ck;
            ck.manifest.config.train.epochs = config.train.epochs;
            ck.trainer.config.epochs = config.train.epochs;
            ck.manifest.config.max_seconds = config.max_seconds;
            ck.status = RunStatus::Running;
            (ck, corpus)
        }
        None => {
            let mut config = config;
            let (vocab, corpus) = load_data(&mut config)?;
            let (model, trainer) = initialize(&config, &vocab)?;
            (Checkpoint { manifest: ExperimentManifest::new(config), vocab, model, trainer, status: RunStatus::Running }, corpus)
        }
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let hash = ck.manifest.hash()?;
    let cfg = ck.manifest.config.clone();
    let start = Instant::now();
    let mut history = Vec::new();
    while ck.trainer.epoch < cfg.train.epochs {
        let step = ck.trainer.train_epoch(&mut ck.model, &corpus).and_then(|m| {
            if m.total.is_finite() {
                Ok(m)
            } else {
                Err(Error::numeric(format!("epoch {}: non-finite loss {}", m.epoch, m.total)))
            }
        });
        let m = match step {
            Ok(m) => m,
            Err(e) => {
                ck.status = RunStatus::Failed { reason: e.to_string() };
                if let Some(dir) = out {
                    ck.save(dir.join(CHECKPOINT_FILE))?;
                }
                return Err(e);
            }
        };
        if let Some(dir) = out {
            append_jsonl(&dir.join(METRICS_FILE), &EpochRow::new(&hash, &m))?;
            if cfg.save_every > 0 && ck.trainer.epoch % cfg.save_every == 0 {
                ck.save(dir.join(CHECKPOINT_FILE))?;
            }
        }
        history.push(m);
        if cfg.max_seconds.is_some_and(|s| start.elapsed().as_secs_f64() >= s) {
            break;
        }
    }
    ck.status = RunStatus::Complete;
    ck.manifest.finished_unix = Some(unix_now());
    if let Some(dir) = out {
        ck.save(dir.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome { checkpoint: ck, corpus, history, seconds: start.elapsed().as_secs_f64() })
}

/// Runs the metrics selected by `spec` and collects them in one report.
pub fn evaluate(model: &SeqAutoencoder, corpus: &Corpus, spec: &EvalSpec, model_id: &str, manifest_hash: Option<String>) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::invalid("evaluation corpus is empty"));
    }
    if spec.purity_k.is_some() && corpus.labels.is_none() {
        return Err(Error::invalid("label purity requested but the corpus has no labels"));
    }
    let mut report = EvalReport::new(model_id);
    report.manifest_hash = manifest_hash;
    report.param("eval", spec)?;
    report.param("items", corpus.len())?;
    let seqs = &corpus.sequences;
    let latents = metrics::encode_all(model, seqs)?;
    if !spec.ks.is_empty() {
        let n = seqs.len().min(spec.recall.max_items);
        let (ks, dropped): (Vec<usize>, Vec<usize>) = spec.ks.iter().partition(|&&k| k < n);
        for k in dropped {
            report.warnings.push(format!("recall@{k} skipped: needs more than {k} items"));
        }
        if !ks.is_empty() {
            let curve = metrics::recall_curve(seqs, &latents, &ks, &spec.recall)?;
            for (k, r) in ks.iter().zip(curve) {
                report.metric(format!("recall@{k}"), r);
            }
        }
    }
    if let (Some(k), Some(labels)) = (spec.purity_k, &corpus.labels) {
        report.metric(format!("purity@{k}"), metrics::knn_label_purity(&latents, labels, k)?);
    }
    if spec.reconstruction {
        let rec = metrics::decode_all(model, &latents)?;
        report.metric("bleu", metrics::corpus_bleu(&rec, seqs)?);
        report.metric("token_accuracy", metrics::token_accuracy(&rec, seqs)?);
        let exact = rec.iter().zip(seqs).filter(|(a, b)| a == b).count();
        report.metric("exact_match", exact as f64 / seqs.len() as f64);
    }
    if spec.ppl_samples > 0 {
        let ppl = metrics::forward_reverse_ppl(model, seqs, spec.ppl_samples, lm_config(&model.config), &spec.lm, spec.seed)?;
        report.metric("forward_ppl", ppl.forward);
        report.metric("reverse_ppl", ppl.reverse);
        if ppl.degenerate {
            report.warnings.push("all generated samples are empty".into());
        }
    }
    Ok(report)
}

/// Language models for perplexity share the autoencoder's decoder shape.
pub fn lm_config(model: &ModelConfig) -> ModelConfig {
    *model
}

/// Hyperparameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    /// KL weight of the β-VAE.
    Beta,
    /// Log-variance L1 weight of the LAAE.
    Lambda1,
    /// Perturbation probability of the DAAE.
    P,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SweepAxis::Beta),
            "lambda1" => Ok(SweepAxis::Lambda1),
            "p" => Ok(SweepAxis::P),
            other => Err(Error::invalid(format!("unknown sweep axis {other:?}; expected beta, lambda1 or p"))),
        }
    }
}

impl SweepAxis {
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> ExperimentConfig {
        let mut c = base.clone();
        match self {
            SweepAxis::Beta => {
                c.train.objective = Objective::BetaVae;
                c.train.beta = value;
            }
            SweepAxis::Lambda1 => {
                c.train.objective = Objective::Laae;
                c.train.lambda1 = value;
            }
            SweepAxis::P => {
                c.train.objective = Objective::Daae;
                if c.train.perturbation.kind == PerturbKind::None {
                    c.train.perturbation.kind = match c.data {
                        DataSource::Synthetic(_) => PerturbKind::BitFlip,
                        DataSource::Text { .. } => PerturbKind::WordDelete,
                    };
                }
                c.train.perturbation.p = value;
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub bleu: f64,
    pub forward_ppl: f64,
    pub reverse_ppl: f64,
    pub manifest_hash: String,
}

pub const SWEEP_HEADER: &str = "value,bleu,forward_ppl,reverse_ppl";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.value, r.bleu, r.forward_ppl, r.reverse_ppl));
    }
    s
}

/// Trains and evaluates one model per value. With `out`, each run gets its own
/// subdirectory and the table is written to `sweep-<axis>.csv`.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64], out: Option<&Path>) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::invalid("sweep needs at least one value"));
    }
    let name = serde_json::to_value(axis)?.as_str().unwrap_or("axis").to_string();
    let mut spec = base.eval.clone();
    spec.ks.clear();
    spec.purity_k = None;
    spec.reconstruction = true;
    if spec.ppl_samples == 0 {
        spec.ppl_samples = 500;
    }
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let cfg = axis.apply(base, v);
        let dir = out.map(|o| o.join(format!("{name}-{v}")));
        let run = train_run(cfg, dir.as_deref(), None)?;
        let hash = run.checkpoint.manifest_hash()?;
        let rep = evaluate(&run.checkpoint.model, &run.corpus, &spec, &format!("{name}={v}"), Some(hash.clone()))?;
        if let Some(d) = &dir {
            rep.append_jsonl(d.join("eval.jsonl"))?;
        }
        let get = |k: &str| rep.metrics.get(k).copied().unwrap_or(f64::INFINITY);
        rows.push(SweepRow { value: v, bleu: get("bleu"), forward_ppl: get("forward_ppl"), reverse_ppl: get("reverse_ppl"), manifest_hash: hash });
    }
    if let Some(o) = out {
        write_atomic(&o.join(format!("sweep-{name}.csv")), sweep_csv(&rows).as_bytes())?;
        let rows_json: Vec<String> = rows.iter().map(serde_json::to_string).collect::<std::result::Result<_, _>>()?;
        write_atomic(&o.join(format!("sweep-{name}.jsonl")), (rows_json.join("\n") + "\n").as_bytes())?;
    }
    Ok(rows)
}
