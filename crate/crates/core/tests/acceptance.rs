//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=2,7` runs a subset; `ACCEPTANCE_STRICT=1` makes any
//! failure a nonzero exit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};

use daae::checkpoint::Checkpoint;
use daae::corpus::{ClusterSpec, Corpus, TokenSequence, Vocab};
use daae::experiment::{self, evaluate, load_text, sweep, train_run, DataSource, EvalSpec, ExperimentConfig, SweepAxis, SweepRow};
use daae::metrics::{self, corpus_bleu, normalized_edit_distance, recall_at_k};
use daae::objectives::{encoder_adversarial_loss_graph, BatchLosses, LmConfig, Objective, PerturbKind, PerturbationSpec, TrainConfig, Trainer};
use daae::seqmodel::{CellKind, Init, LatentCode, ModelConfig, SeqAutoencoder};
use daae::tensor::{finite_difference_check, finite_difference_check_params, Graph, Tensor, Var};
use daae::theorem::{default_theorem2_grid, verify_theorem1, verify_theorem2, verify_theorem3, GeometryParams};
use daae::{Result, SeededRng};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Runner {
    only: Option<Vec<usize>>,
    results: Vec<(usize, &'static str, bool)>,
}

impl Runner {
    fn wants(&self, id: usize) -> bool {
        self.only.as_ref().is_none_or(|o| o.contains(&id))
    }

    fn run(&mut self, id: usize, name: &'static str, f: impl FnOnce() -> Result<Outcome>) {
        if !self.wants(id) {
            return;
        }
        let start = Instant::now();
        let o = f().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        let secs = start.elapsed().as_secs_f64();
        println!("[{}] {id:>2} {name}: {} ({secs:.1}s)", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        self.results.push((id, name, o.pass));
    }
}

// ---------------------------------------------------------------- gradients

fn random_point(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Rows `r0..r0+r` of a column block of `p`, as a separate variable.
fn block(g: &mut Graph, p: Var, r0: usize, r: usize, c0: usize, c: usize) -> Result<Var> {
    let rows = g.slice_rows(p, r0, r0 + r)?;
    g.slice_cols(rows, c0, c0 + c)
}

fn to_scalar(g: &mut Graph, v: Var) -> Result<Var> {
    // A fixed weighting makes every output entry matter differently.
    let shape = g.shape(v).to_vec();
    let n = shape.iter().product::<usize>();
    let w = Tensor::new(shape, (0..n).map(|i| 0.3 + 0.1 * (i % 7) as f64).collect()).unwrap();
    let w = g.constant(w);
    let m = g.mul(v, w)?;
    Ok(g.sum(m))
}

type OpFn = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

fn op_table() -> Vec<(&'static str, (usize, usize), OpFn)> {
    let (h, b) = (3usize, 2usize);
    let mut ops: Vec<(&'static str, (usize, usize), OpFn)> = vec![
        ("matmul", (5, 3), Box::new(|g, p| {
            let a = block(g, p, 0, 2, 0, 3)?;
            let w = block(g, p, 2, 3, 0, 3)?;
            g.matmul(a, w)
        })),
        ("add", (4, 3), Box::new(|g, p| {
            let (a, c) = (block(g, p, 0, 2, 0, 3)?, block(g, p, 2, 2, 0, 3)?);
            g.add(a, c)
        })),
        ("sub", (4, 3), Box::new(|g, p| {
            let (a, c) = (block(g, p, 0, 2, 0, 3)?, block(g, p, 2, 2, 0, 3)?);
            g.sub(a, c)
        })),
        ("mul", (4, 3), Box::new(|g, p| {
            let (a, c) = (block(g, p, 0, 2, 0, 3)?, block(g, p, 2, 2, 0, 3)?);
            g.mul(a, c)
        })),
        ("add_row", (3, 3), Box::new(|g, p| {
            let (a, r) = (block(g, p, 0, 2, 0, 3)?, block(g, p, 2, 1, 0, 3)?);
            g.add_row(a, r)
        })),
        ("affine", (2, 3), Box::new(|g, p| Ok(g.affine(p, -1.7, 0.4)))),
        ("scale", (2, 3), Box::new(|g, p| Ok(g.scale(p, 2.5)))),
        ("sigmoid", (2, 3), Box::new(|g, p| Ok(g.sigmoid(p)))),
        ("tanh", (2, 3), Box::new(|g, p| Ok(g.tanh(p)))),
        ("relu", (2, 3), Box::new(|g, p| Ok(g.relu(p)))),
        ("exp", (2, 3), Box::new(|g, p| Ok(g.exp(p)))),
        ("log", (2, 3), Box::new(|g, p| {
            let sq = g.mul(p, p)?;
            let pos = g.affine(sq, 1.0, 0.5);
            Ok(g.log(pos))
        })),
        ("abs", (2, 3), Box::new(|g, p| Ok(g.abs(p)))),
        ("softplus", (2, 3), Box::new(|g, p| Ok(g.softplus(p)))),
        ("concat_cols", (2, 4), Box::new(|g, p| {
            let (a, c) = (block(g, p, 0, 2, 0, 1)?, block(g, p, 0, 2, 1, 3)?);
            g.concat_cols(&[c, a])
        })),
        ("concat_rows", (3, 2), Box::new(|g, p| {
            let (a, c) = (block(g, p, 0, 1, 0, 2)?, block(g, p, 1, 2, 0, 2)?);
            g.concat_rows(&[c, a])
        })),
        ("slice_cols", (2, 4), Box::new(|g, p| g.slice_cols(p, 1, 3))),
        ("slice_rows", (4, 2), Box::new(|g, p| g.slice_rows(p, 1, 3))),
        ("gather", (4, 3), Box::new(|g, p| g.gather(p, &[2, 0, 2, 3]))),
        ("log_softmax", (2, 5), Box::new(|g, p| Ok(g.log_softmax(p)))),
        ("softmax_cross_entropy", (3, 5), Box::new(|g, p| g.softmax_cross_entropy(p, &[1, 4, 0], &[1.0, 0.5, 0.0]))),
        ("sum", (2, 3), Box::new(|g, p| Ok(g.sum(p)))),
        ("mean", (2, 3), Box::new(|g, p| Ok(g.mean(p)))),
    ];
    for lstm in [false, true] {
        let k = if lstm { 4 * h } else { 3 * h };
        let sw = if lstm { 2 * h } else { h };
        // Rows: 2b input projections, b extra inputs, b states, h recurrent weights, 1 bias.
        let rows = 2 * b + b + b + h + 1;
        let f: OpFn = Box::new(move |g, p| {
            let x = block(g, p, 0, 2 * b, 0, k)?;
            let e = block(g, p, 2 * b, b, 0, k)?;
            let s = block(g, p, 3 * b, b, 0, sw)?;
            let wh = block(g, p, 4 * b, h, 0, k)?;
            let bh = block(g, p, 4 * b + h, 1, 0, k)?;
            let s1 = if lstm { g.lstm_cell(x, 0, Some(e), s, wh, bh)? } else { g.gru_cell(x, 0, Some(e), s, wh, bh)? };
            if lstm {
                g.lstm_cell(x, b, None, s1, wh, bh)
            } else {
                g.gru_cell(x, b, None, s1, wh, bh)
            }
        });
        ops.push((if lstm { "lstm_cell" } else { "gru_cell" }, (rows, k), f));
    }
    ops
}

const POINTS: usize = 100;
const GRAD_TOL: f64 = 1e-4;

fn gradient_criterion() -> Result<Outcome> {
    let mut rng = SeededRng::seed_from_u64(2024);
    let mut worst_op = ("", 0.0f64);
    let ops = op_table();
    for (name, (r, c), f) in &ops {
        for _ in 0..POINTS {
            let point = random_point(*r, *c, &mut rng);
            let err = finite_difference_check(|g, p| {
                let y = f(g, p)?;
                to_scalar(g, y)
            }, &point, 1e-6)?;
            if err > worst_op.1 {
                worst_op = (name, err);
            }
        }
    }
    let vocab = Vocab::from_tokens(&["a", "b", "c"]).unwrap();
    assert_eq!(vocab.len(), 8);
    let cfg = ModelConfig { vocab_size: 8, embed_dim: 4, hidden_dim: 8, latent_dim: 2, disc_hidden: 4, max_len: 6, cell: CellKind::Gru, init: Init::Uniform };
    let mut worst_model: f64 = 0.0;
    for point in 0..POINTS {
        let mut r = SeededRng::seed_from_u64(point as u64);
        let mut m = SeqAutoencoder::new(cfg, false, &mut r)?;
        for id in m.store.ids().collect::<Vec<_>>() {
            for v in m.store.value_mut(id).data_mut() {
                *v = r.random_range(-0.5..0.5);
            }
        }
        let x: Vec<TokenSequence> = (0..2).map(|_| TokenSequence((0..r.random_range(1..5)).map(|_| r.random_range(5..8)).collect())).collect();
        let model = m.clone();
        let err = finite_difference_check_params(
            &mut m.store,
            |g, store| {
                let mut view = model.clone();
                view.store = store.clone();
                let enc = view.encode_graph(g, &x)?;
                let nll = view.decode_nll_graph(g, enc.mu, &x)?;
                let logits = view.discriminator_graph(g, enc.mu)?;
                let adv = encoder_adversarial_loss_graph(g, logits);
                let w = g.scale(adv, 10.0);
                g.add(nll, w)
            },
            1e-6,
        )?;
        worst_model = worst_model.max(err);
    }
    Ok(outcome(
        worst_op.1 < GRAD_TOL && worst_model < GRAD_TOL,
        format!("{} ops x {POINTS} points, worst op {} {:.2e}; full loss over {POINTS} points {:.2e}", ops.len(), worst_op.0, worst_op.1, worst_model),
    ))
}

// ------------------------------------------------------------ trained models

struct Trained {
    objective: Objective,
    seed: u64,
    seconds: f64,
    final_discriminator: Option<f64>,
    report: BTreeMap<String, f64>,
}

fn train_and_eval(cfg: ExperimentConfig) -> Result<Trained> {
    let objective = cfg.train.objective;
    let seed = cfg.train.seed;
    let spec = cfg.eval.clone();
    let run = train_run(cfg, None, None)?;
    let hash = run.checkpoint.manifest_hash()?;
    let report = evaluate(&run.checkpoint.model, &run.corpus, &spec, "acceptance", Some(hash))?;
    Ok(Trained {
        objective,
        seed,
        seconds: run.seconds,
        final_discriminator: run.history.last().and_then(|m| m.discriminator),
        report: report.metrics,
    })
}

fn synthetic_config(objective: Objective, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::synthetic_benchmark(objective, seed);
    c.eval.ks = vec![10];
    c
}

fn metric(t: &Trained, key: &str) -> f64 {
    t.report.get(key).copied().unwrap_or(f64::NAN)
}

const SEEDS: u64 = 5;

fn synthetic_criterion(runs: &[Trained]) -> Outcome {
    let by = |o: Objective| runs.iter().filter(move |t| t.objective == o);
    let acc_ok = runs.iter().all(|t| metric(t, "token_accuracy") >= 0.99);
    let d_ok = by(Objective::Aae).chain(by(Objective::Daae)).all(|t| t.final_discriminator.is_some_and(|d| (1.2..=1.55).contains(&d)));
    let wins = by(Objective::Daae).zip(by(Objective::Aae)).filter(|(d, a)| metric(d, "purity@10") > metric(a, "purity@10")).count();
    let daae_purity: Vec<f64> = by(Objective::Daae).map(|t| metric(t, "purity@10")).collect();
    let mean_daae = daae_purity.iter().sum::<f64>() / daae_purity.len().max(1) as f64;
    let time_ok = runs.iter().all(|t| t.seconds < 600.0);
    let fmt = |o: Objective, key: &str| by(o).map(|t| format!("{:.3}", metric(t, key))).collect::<Vec<_>>().join(" ");
    let d_losses = runs.iter().filter_map(|t| t.final_discriminator).map(|d| format!("{d:.3}")).collect::<Vec<_>>().join(" ");
    let slowest = runs.iter().map(|t| t.seconds).fold(0.0, f64::max);
    let pass = acc_ok && d_ok && wins >= 4 && mean_daae >= 0.80 && time_ok;
    outcome(
        pass,
        format!(
            "(a) token acc >= 0.99: {} [AAE {} | DAAE {}]; (b) D loss in [1.2,1.55]: {} [{}]; (c) DAAE purity > AAE in {wins}/{SEEDS} seeds [AAE {} | DAAE {}], mean DAAE {mean_daae:.3} >= 0.80: {}; slowest run {slowest:.0}s",
            acc_ok,
            fmt(Objective::Aae, "token_accuracy"),
            fmt(Objective::Daae, "token_accuracy"),
            d_ok,
            d_losses,
            fmt(Objective::Aae, "purity@10"),
            fmt(Objective::Daae, "purity@10"),
            mean_daae >= 0.80,
        ),
    )
}

fn recall_ratio(runs: &[Trained], seeds: &[u64]) -> (f64, Vec<String>) {
    let mut ratios = Vec::new();
    let mut parts = Vec::new();
    for &s in seeds {
        let get = |o: Objective| runs.iter().find(|t| t.objective == o && t.seed == s).map_or(f64::NAN, |t| metric(t, "recall@10"));
        let (a, d) = (get(Objective::Aae), get(Objective::Daae));
        ratios.push(d / a);
        parts.push(format!("seed {s}: {d:.4}/{a:.4}"));
    }
    (ratios.iter().sum::<f64>() / ratios.len() as f64, parts)
}

/// Sentences from topic-specific templates, so similar lines share both
/// structure and vocabulary.
fn template_corpus(lines: usize, seed: u64) -> Vec<String> {
    const TOPICS: [(&[&str], &[&str], &[&str]); 6] = [
        (&["chef", "cook", "waiter", "baker"], &["serves", "bakes", "cooks", "tastes"], &["soup", "bread", "pasta", "cake", "salad"]),
        (&["pilot", "sailor", "driver", "rider"], &["steers", "drives", "parks", "flies"], &["plane", "boat", "truck", "bike", "train"]),
        (&["doctor", "nurse", "patient", "surgeon"], &["treats", "checks", "heals", "visits"], &["wound", "fever", "heart", "knee", "cough"]),
        (&["farmer", "gardener", "shepherd", "miller"], &["plants", "waters", "grows", "picks"], &["corn", "wheat", "roses", "apples", "beans"]),
        (&["singer", "drummer", "player", "pianist"], &["plays", "sings", "hums", "writes"], &["song", "tune", "melody", "chorus", "ballad"]),
        (&["coder", "tester", "admin", "hacker"], &["fixes", "builds", "breaks", "ships"], &["code", "server", "patch", "build", "bug"]),
    ];
    const ADJ: [&str; 8] = ["old", "young", "happy", "tired", "busy", "quiet", "small", "brave"];
    const TAIL: [&str; 6] = ["today", "again", "slowly", "at night", "every day", "with care"];
    let mut rng = SeededRng::seed_from_u64(seed);
    let pick = |xs: &[&'static str], rng: &mut SeededRng| xs[rng.random_range(0..xs.len())];
    (0..lines)
        .map(|_| {
            let (subj, verb, obj) = TOPICS[rng.random_range(0..TOPICS.len())];
            let mut words = vec!["the", pick(&ADJ, &mut rng), pick(subj, &mut rng), pick(verb, &mut rng), "the", pick(obj, &mut rng)];
            if rng.random_bool(0.5) {
                words.insert(5, pick(&ADJ, &mut rng));
            }
            if rng.random_bool(0.5) {
                words.push(pick(&TAIL, &mut rng));
            }
            words.join(" ")
        })
        .collect()
}

fn text_config(objective: Objective, seed: u64, corpus: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.data = DataSource::Text { corpus: corpus.to_path_buf(), labels: None };
    c.model = ModelConfig { embed_dim: 32, hidden_dim: 64, latent_dim: 8, disc_hidden: 32, max_len: 12, init: Init::Glorot, ..ModelConfig::default() };
    c.train.objective = objective;
    // Heavy deletion: at lighter rates the small GRU encoder is already smooth
    // enough that DAAE and AAE neighbourhoods barely differ.
    c.train.perturbation = PerturbationSpec::new(PerturbKind::WordDelete, 0.7);
    c.train.batch_size = 32;
    c.train.epochs = 100;
    c.train.seed = seed;
    c.train.adam.lr = 0.002;
    c.train.final_lr_fraction = 0.1;
    c.eval.ks = vec![10];
    c
}

// ------------------------------------------------------------------ oracles

fn oracle_criterion() -> Result<Outcome> {
    let mut notes = Vec::new();
    let mut pass = true;
    let vocab = Vocab::from_tokens(&["a", "b", "c", "d", "e", "k", "i", "t", "n", "s", "g"]).unwrap();
    let enc = |s: &str| vocab.encode_line(s);

    let synth = daae::corpus::generate_clustered_dataset(&ClusterSpec::default())?.to_corpus();
    let self_bleu = corpus_bleu(&synth.sequences, &synth.sequences)?;
    pass &= self_bleu == 100.0;
    notes.push(format!("BLEU(self) {self_bleu}"));

    let b = corpus_bleu(&[enc("a b c d")], &[enc("a b c d e")])?;
    pass &= (b - 77.88).abs() <= 0.01;
    notes.push(format!("BLEU short {b:.4}"));

    let ed = normalized_edit_distance(&enc("k i t t e n"), &enc("s i t t i n g"));
    pass &= (ed - 3.0 / 7.0).abs() <= 1e-12;
    notes.push(format!("edit {ed:.15}"));

    // Latents independent of the sequences: overlap is hypergeometric.
    let (n, k) = (1001usize, 10usize);
    let mut rng = SeededRng::seed_from_u64(99);
    let seqs: Vec<TokenSequence> = (0..n).map(|_| TokenSequence((0..12).map(|_| rng.random_range(5..vocab.len())).collect())).collect();
    let lat: Vec<LatentCode> = (0..n).map(|_| LatentCode(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])).collect();
    let recall = recall_at_k(&seqs, &lat, k)?;
    let m = (n - 1) as f64;
    let var_overlap = k as f64 * (k as f64 / m) * ((m - k as f64) / m) * ((m - k as f64) / (m - 1.0));
    let sigma = var_overlap.sqrt() / k as f64 / (n as f64).sqrt();
    pass &= (recall - 0.01).abs() <= 3.0 * sigma;
    notes.push(format!("random recall {recall:.4} (3σ {:.4})", 3.0 * sigma));

    let content = 10usize;
    let words: Vec<String> = (0..content).map(|i| format!("w{i}")).collect();
    let uvocab = Vocab::from_tokens(&words).unwrap();
    let stream = |count: usize, rng: &mut SeededRng| -> Vec<TokenSequence> {
        (0..count).map(|_| TokenSequence((0..40).map(|_| rng.random_range(5..5 + content)).collect())).collect()
    };
    let mut rng = SeededRng::seed_from_u64(7);
    let (train, held) = (stream(400, &mut rng), stream(200, &mut rng));
    let lm_model = ModelConfig { vocab_size: uvocab.len(), embed_dim: 8, hidden_dim: 16, latent_dim: 2, disc_hidden: 4, max_len: 40, ..ModelConfig::default() };
    let lm_cfg = LmConfig { epochs: 10, batch_size: 32, ..LmConfig::default() };
    let ppl = metrics::lm_perplexity(lm_model, &lm_cfg, &train, &held)?;
    pass &= (ppl - content as f64).abs() <= 0.1 * content as f64;
    notes.push(format!("uniform LM PPL {ppl:.3} vs V={content}"));
    Ok(outcome(pass, notes.join("; ")))
}

// -------------------------------------------------------------- degeneracy

fn batch_losses(objective: Objective, variational: bool, cfg: TrainConfig, corpus: &Corpus, vocab: &Vocab) -> Result<Vec<BatchLosses>> {
    let mc = ModelConfig { vocab_size: vocab.len(), embed_dim: 6, hidden_dim: 10, latent_dim: 2, disc_hidden: 6, max_len: 10, ..ModelConfig::default() };
    let mut m = SeqAutoencoder::new(mc, variational, &mut SeededRng::seed_from_u64(11))?;
    let mut t = Trainer::new(TrainConfig { objective, ..cfg }, &m, vocab)?;
    t.zero_reparam_noise = true;
    let mut out = Vec::new();
    for _ in 0..3 {
        out.extend(t.train_epoch(&mut m, corpus)?.batches);
    }
    Ok(out)
}

fn max_gap(a: &[BatchLosses], b: &[BatchLosses]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let opt = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (Some(x), Some(y)) => (x - y).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    };
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.reconstruction - y.reconstruction).abs().max((x.total - y.total).abs()).max(opt(x.discriminator, y.discriminator)).max(opt(x.encoder_adversarial, y.encoder_adversarial)))
        .fold(0.0, f64::max)
}

fn degeneracy_criterion() -> Result<Outcome> {
    let vocab = Vocab::binary();
    let data = daae::corpus::generate_clustered_dataset(&ClusterSpec { num_clusters: 3, per_cluster: 6, length: 8, flip_prob: 0.2, seed: 5 })?;
    let corpus = data.to_corpus();
    let base = TrainConfig { batch_size: 5, seed: 21, perturbation: PerturbationSpec::new(PerturbKind::BitFlip, 0.0), ..TrainConfig::default() };
    let daae = batch_losses(Objective::Daae, false, base, &corpus, &vocab)?;
    let aae = batch_losses(Objective::Aae, false, base, &corpus, &vocab)?;
    let gap_p0 = max_gap(&daae, &aae);

    let zero = TrainConfig { lambda_adv: 0.0, beta: 0.0, lambda1: 0.0, perturbation: PerturbationSpec::NONE, ..base };
    let ae = batch_losses(Objective::Ae, false, zero, &corpus, &vocab)?;
    let mut worst: f64 = 0.0;
    for (o, v) in [(Objective::Aae, false), (Objective::Daae, false), (Objective::BetaVae, true), (Objective::Laae, true)] {
        let other = batch_losses(o, v, zero, &corpus, &vocab)?;
        let gap = ae
            .iter()
            .zip(&other)
            .map(|(x, y)| (x.reconstruction - y.reconstruction).abs().max((x.total - y.total).abs()))
            .fold(if other.len() == ae.len() { 0.0 } else { f64::INFINITY }, f64::max);
        worst = worst.max(gap);
    }
    Ok(outcome(
        gap_p0 <= 1e-12 && worst <= 1e-12,
        format!("{} batches; p=0 DAAE vs AAE max gap {gap_p0:.1e}; zero-weight objectives vs AE max gap {worst:.1e}", aae.len()),
    ))
}

// ------------------------------------------------------------- persistence

fn persistence_criterion() -> Result<Outcome> {
    let dir = tempfile::tempdir().map_err(|e| daae::Error::io("tempdir", e))?;
    let mut cfg = synthetic_config(Objective::Daae, 3);
    cfg.train.epochs = 3;
    cfg.data = DataSource::Synthetic(ClusterSpec { per_cluster: 20, ..ClusterSpec::default() });
    let run = train_run(cfg.clone(), Some(dir.path()), None)?;
    let path = dir.path().join(experiment::CHECKPOINT_FILE);
    let bytes = fs::read(&path).map_err(|e| daae::Error::io(&path, e))?;
    let loaded = Checkpoint::load(&path)?;
    let again = loaded.to_bytes()?;
    let same_bytes = again == bytes;
    let same_fields = loaded == run.checkpoint;
    let spec = EvalSpec { ks: vec![10, 20, 50], ..cfg.eval.clone() };
    let before = evaluate(&run.checkpoint.model, &run.corpus, &spec, "m", Some(run.checkpoint.manifest_hash()?))?;
    let c = &loaded.manifest.config;
    let corpus = load_text(&c.data, &loaded.vocab, c.model.max_len)?;
    let after = evaluate(&loaded.model, &corpus, &spec, "m", Some(loaded.manifest_hash()?))?;
    let same_report = before == after;
    Ok(outcome(
        same_bytes && same_fields && same_report,
        format!("{} bytes; byte-identical resave {same_bytes}; field-equal {same_fields}; identical report {same_report} ({} metrics)", bytes.len(), after.metrics.len()),
    ))
}

// ------------------------------------------------------------------- sweep

fn sweep_criterion(aae_runs: &[&Trained]) -> Result<Outcome> {
    let dir = tempfile::tempdir().map_err(|e| daae::Error::io("tempdir", e))?;
    let base = synthetic_config(Objective::Aae, 0);
    let start = Instant::now();
    let rows: Vec<SweepRow> = sweep(&base, SweepAxis::P, &[0.0, 0.1, 0.2, 0.3], Some(dir.path()))?;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let csv = fs::read_to_string(dir.path().join("sweep-p.csv")).map_err(|e| daae::Error::io(dir.path(), e))?;
    let csv_ok = csv.lines().count() == 5 && csv.starts_with("value,bleu,forward_ppl,reverse_ppl\n");
    let aae_bleu: Vec<f64> = aae_runs.iter().map(|t| metric(t, "bleu")).collect();
    let mean = aae_bleu.iter().sum::<f64>() / aae_bleu.len() as f64;
    let sd = (aae_bleu.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (aae_bleu.len() - 1).max(1) as f64).sqrt();
    let seed0 = aae_runs.iter().find(|t| t.seed == 0).map_or(f64::NAN, |t| metric(t, "bleu"));
    let p0 = rows[0].bleu;
    // Seed noise: two standard deviations of AAE BLEU across seeds.
    let matches = (p0 - seed0).abs() <= 2.0 * sd;
    let table = rows.iter().map(|r| format!("p={} bleu {:.2} fppl {:.2} rppl {:.2}", r.value, r.bleu, r.forward_ppl, r.reverse_ppl)).collect::<Vec<_>>().join(", ");
    Ok(outcome(
        csv_ok && minutes < 45.0 && matches,
        format!("{table}; p=0 BLEU {p0:.3} vs AAE seed 0 {seed0:.3} (2σ across seeds {:.3}); {minutes:.1} min", 2.0 * sd),
    ))
}

fn main() {
    let only = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut r = Runner { only, results: Vec::new() };
    println!("acceptance: {} criteria", 10);

    r.run(1, "gradient correctness", gradient_criterion);

    let need_synthetic = [2, 6, 10].iter().any(|&i| r.wants(i));
    let mut synthetic = Vec::new();
    if need_synthetic {
        for seed in 0..SEEDS {
            for obj in [Objective::Aae, Objective::Daae] {
                match train_and_eval(synthetic_config(obj, seed)) {
                    Ok(t) => {
                        println!(
                            "      trained {obj:?} seed {seed}: {:.0}s, acc {:.3}, purity {:.3}, recall@10 {:.4}, D {:?}",
                            t.seconds,
                            metric(&t, "token_accuracy"),
                            metric(&t, "purity@10"),
                            metric(&t, "recall@10"),
                            t.final_discriminator
                        );
                        synthetic.push(t)
                    }
                    Err(e) => println!("      training {obj:?} seed {seed} failed: {e}"),
                }
            }
        }
    }
    r.run(2, "synthetic benchmark", || {
        if synthetic.len() < 2 * SEEDS as usize {
            return Ok(outcome(false, "some training runs failed"));
        }
        Ok(synthetic_criterion(&synthetic))
    });

    r.run(3, "theorem 1 matching invariance", || {
        let t = verify_theorem1(4, 2, 1.0, 20, 1e-3, 0)?;
        let worst = t.trials.iter().map(|x| x.relative_spread).fold(0.0, f64::max);
        Ok(outcome(
            t.ok() && t.trials.len() == 20 && t.trials.iter().all(|x| x.optima.len() == 24),
            format!("{} trials x 24 matchings, {} failed, {} inconclusive, worst spread {worst:.2e}", t.trials.len(), t.failed, t.inconclusive),
        ))
    });

    r.run(4, "theorem 2 bounds and ordering", || {
        let t = verify_theorem2(&default_theorem2_grid(), &[0.5, 1.0, 2.0], 1e-4)?;
        let named = GeometryParams { delta: 0.4, zeta: 2.0, epsilon: 1.0 };
        let at = t.points.iter().find(|p| p.lipschitz == 1.0 && p.params == named);
        let named_ok = at.is_some_and(|p| p.pass);
        let others = t.points.iter().filter(|p| p.pass && !(p.lipschitz == 1.0 && p.params == named)).count();
        let ordering = t.points.iter().all(|p| p.ordering_holds);
        let gap = at.map_or(f64::NAN, |p| p.separated_bound - p.mixed_bound);
        Ok(outcome(
            named_ok && others >= 8 && ordering && t.ok(),
            format!("named point passes {named_ok} (analytic gap {gap:.4}); {others} further points pass; {} failed; {} infeasible skipped", t.failed, t.skipped.len()),
        ))
    });

    r.run(5, "theorem 3 bound and separation", || {
        let t = verify_theorem3(6, 2, 2, 1.0, 100, 1e-4, 1)?;
        Ok(outcome(
            t.ok(0.8) && t.trials.len() == 100,
            format!("{} instances, {} bound violations, separating wins {:.0}%, {} solver errors", t.trials.len(), t.bound_violations, 100.0 * t.separating_win_rate, t.errors.len()),
        ))
    });

    r.run(6, "neighborhood recall DAAE/AAE", || {
        let (syn, syn_parts) = recall_ratio(&synthetic, &[0, 1, 2]);
        let dir = tempfile::tempdir().map_err(|e| daae::Error::io("tempdir", e))?;
        let path = dir.path().join("text.txt");
        let lines = template_corpus(2400, 17);
        fs::write(&path, lines.join("\n")).map_err(|e| daae::Error::io(&path, e))?;
        let mut text = Vec::new();
        for seed in 0..3 {
            for obj in [Objective::Aae, Objective::Daae] {
                text.push(train_and_eval(text_config(obj, seed, &path))?);
            }
        }
        let (txt, txt_parts) = recall_ratio(&text, &[0, 1, 2]);
        Ok(outcome(
            syn >= 1.2 && txt >= 1.2,
            format!("synthetic ratio {syn:.3} [{}]; text ({} lines) ratio {txt:.3} [{}]", syn_parts.join(", "), lines.len(), txt_parts.join(", ")),
        ))
    });

    r.run(7, "metric oracles", oracle_criterion);
    r.run(8, "degeneracy equivalences", degeneracy_criterion);
    r.run(9, "checkpoint persistence", persistence_criterion);
    r.run(10, "p-sweep", || {
        let aae: Vec<&Trained> = synthetic.iter().filter(|t| t.objective == Objective::Aae).collect();
        if aae.is_empty() {
            return Ok(outcome(false, "no AAE reference runs"));
        }
        sweep_criterion(&aae)
    });

    let passed = r.results.iter().filter(|x| x.2).count();
    println!("acceptance: {passed}/{} criteria passed", r.results.len());
    for (id, name, _) in r.results.iter().filter(|x| !x.2) {
        println!("  failed: {id} {name}");
    }
    if std::env::var_os("ACCEPTANCE_STRICT").is_some() && passed < r.results.len() {
        std::process::exit(1);
    }
}
