//! Input perturbations, the autoencoder training objectives and the
//! alternating discriminator / encoder-decoder update schedule.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{batches, Corpus, TokenSequence, Vocab, MASK, NUM_SPECIAL};
use crate::error::{Error, Result};
use crate::seqmodel::{LanguageModel, LatentCode, SeqAutoencoder};
use crate::tensor::{Adam, AdamConfig, Graph, Tensor, Var};
use crate::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbKind {
    None,
    BitFlip,
    WordDelete,
    WordMask,
    WordReplace,
}

/// Corruption process applied independently to every token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbKind,
    pub p: f64,
}

impl PerturbationSpec {
    pub const NONE: PerturbationSpec = PerturbationSpec { kind: PerturbKind::None, p: 0.0 };

    pub fn new(kind: PerturbKind, p: f64) -> Self {
        PerturbationSpec { kind, p }
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::invalid(format!("perturbation probability {} outside [0,1]", self.p)));
        }
        if self.kind == PerturbKind::BitFlip && !vocab.is_binary() {
            return Err(Error::invalid("bit-flip perturbation needs a binary 0/1 alphabet"));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.kind == PerturbKind::None || self.p == 0.0
    }
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self::NONE
    }
}

/// A perturbation bound to a vocabulary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturber {
    spec: PerturbationSpec,
    vocab_size: usize,
    // Ids of "0" and "1" for bit flips.
    bits: Option<(usize, usize)>,
}

impl Perturber {
    pub fn new(spec: PerturbationSpec, vocab: &Vocab) -> Result<Self> {
        spec.validate(vocab)?;
        let bits = vocab.is_binary().then(|| (vocab.id("0"), vocab.id("1")));
        Ok(Perturber { spec, vocab_size: vocab.len(), bits })
    }

    pub fn spec(&self) -> PerturbationSpec {
        self.spec
    }

    /// Corrupts `x`. Reserved ids in the input pass through unchanged.
    pub fn apply<R: Rng>(&self, x: &TokenSequence, rng: &mut R) -> TokenSequence {
        let p = self.spec.p;
        if self.spec.is_identity() {
            return x.clone();
        }
        let mut out = Vec::with_capacity(x.len());
        for &tok in x.iter() {
            if tok < NUM_SPECIAL && tok != crate::corpus::UNK {
                out.push(tok);
                continue;
            }
            let hit = rng.random_bool(p);
            match self.spec.kind {
                PerturbKind::None => out.push(tok),
                PerturbKind::BitFlip => {
                    let (zero, one) = self.bits.expect("validated binary alphabet");
                    out.push(match (hit, tok) {
                        (true, t) if t == zero => one,
                        (true, t) if t == one => zero,
                        _ => tok,
                    });
                }
                PerturbKind::WordDelete => {
                    if !hit {
                        out.push(tok);
                    }
                }
                PerturbKind::WordMask => out.push(if hit { MASK } else { tok }),
                PerturbKind::WordReplace => {
                    out.push(if hit { rng.random_range(NUM_SPECIAL..self.vocab_size) } else { tok });
                }
            }
        }
        TokenSequence(out)
    }
}

pub fn perturb<R: Rng>(x: &TokenSequence, spec: PerturbationSpec, vocab: &Vocab, rng: &mut R) -> Result<TokenSequence> {
    Ok(Perturber::new(spec, vocab)?.apply(x, rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Reconstruction only; with a perturbation this is a denoising AE.
    Ae,
    Aae,
    Daae,
    BetaVae,
    Laae,
}

impl Objective {
    pub fn is_adversarial(self) -> bool {
        matches!(self, Objective::Aae | Objective::Daae | Objective::Laae)
    }

    pub fn is_variational(self) -> bool {
        matches!(self, Objective::BetaVae | Objective::Laae)
    }

    pub fn uses_perturbation(self) -> bool {
        matches!(self, Objective::Ae | Objective::Daae)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Adversarial weight λ.
    pub lambda_adv: f64,
    /// KL weight for the β-VAE.
    pub beta: f64,
    /// L1 weight on the log-variance for LAAE.
    pub lambda1: f64,
    pub perturbation: PerturbationSpec,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Learning rate reached at the last epoch, as a fraction of `adam.lr`;
    /// the rate falls linearly per epoch. 1 keeps it constant.
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Daae,
            lambda_adv: 10.0,
            beta: 0.15,
            lambda1: 0.05,
            perturbation: PerturbationSpec::new(PerturbKind::WordDelete, 0.3),
            batch_size: 256,
            epochs: 50,
            seed: 0,
            adam: AdamConfig::default(),
            final_lr_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_adv", self.lambda_adv), ("beta", self.beta), ("lambda1", self.lambda1)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::invalid(format!("final_lr_fraction must be in (0, 1], got {}", self.final_lr_fraction)));
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch under the linear schedule.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if self.final_lr_fraction == 1.0 || self.epochs <= 1 {
            return self.adam.lr;
        }
        let t = (epoch.min(self.epochs - 1)) as f64 / (self.epochs - 1) as f64;
        self.adam.lr * (1.0 - t * (1.0 - self.final_lr_fraction))
    }

    /// Perturbation actually applied for this objective.
    pub fn effective_perturbation(&self) -> PerturbationSpec {
        if self.objective.uses_perturbation() {
            self.perturbation
        } else {
            PerturbationSpec::NONE
        }
    }
}

/// splitmix64 finalizer, for deriving independent stream seeds.
pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_PERTURB: u64 = 2;
const STREAM_PRIOR: u64 = 3;
const STREAM_REPARAM: u64 = 4;

/// Independent RNG streams for one epoch, derived from `(seed, epoch)`.
#[derive(Debug, Clone)]
pub struct EpochStreams {
    pub shuffle_seed: u64,
    pub perturb: SeededRng,
    pub prior: SeededRng,
    pub reparam: SeededRng,
}

impl EpochStreams {
    pub fn new(seed: u64, epoch: usize) -> Self {
        let e = epoch as u64;
        EpochStreams {
            shuffle_seed: mix_seed(seed, e, STREAM_SHUFFLE),
            perturb: SeededRng::seed_from_u64(mix_seed(seed, e, STREAM_PERTURB)),
            prior: SeededRng::seed_from_u64(mix_seed(seed, e, STREAM_PRIOR)),
            reparam: SeededRng::seed_from_u64(mix_seed(seed, e, STREAM_REPARAM)),
        }
    }
}

pub fn standard_normal<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).expect("positive dims")
}

/// All randomness consumed by one training batch.
#[derive(Debug, Clone)]
pub struct BatchNoise {
    pub perturbed: Vec<TokenSequence>,
    /// One prior draw per batch element.
    pub prior: Tensor,
    /// Reparameterization noise for variational encoders.
    pub eps: Tensor,
}

impl BatchNoise {
    pub fn sample(x: &[TokenSequence], perturber: &Perturber, d: usize, streams: &mut EpochStreams) -> Self {
        let perturbed = x.iter().map(|s| perturber.apply(s, &mut streams.perturb)).collect();
        BatchNoise {
            perturbed,
            prior: standard_normal(x.len(), d, &mut streams.prior),
            eps: standard_normal(x.len(), d, &mut streams.reparam),
        }
    }
}

/// `0.5·Σ(exp(lv) + μ² − 1 − lv)` over latent dims, averaged over rows.
pub fn gaussian_kl_graph(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let rows = g.value(mu).rows() as f64;
    let d = g.value(mu).cols() as f64;
    let var = g.exp(logvar);
    let mu2 = g.mul(mu, mu)?;
    let a = g.add(var, mu2)?;
    let b = g.sub(a, logvar)?;
    let s = g.sum(b);
    Ok(g.affine(s, 0.5 / rows, -0.5 * d))
}

/// `λ1·Σ|lv|`, averaged over rows.
pub fn laae_penalty_graph(g: &mut Graph, logvar: Var, lambda1: f64) -> Var {
    let rows = g.value(logvar).rows() as f64;
    let a = g.abs(logvar);
    let s = g.sum(a);
    g.scale(s, lambda1 / rows)
}

/// `z = μ + exp(lv/2) ⊙ ε`.
pub fn reparameterize(g: &mut Graph, mu: Var, logvar: Var, eps: &Tensor) -> Result<Var> {
    let half = g.scale(logvar, 0.5);
    let std = g.exp(half);
    let e = g.constant(eps.clone());
    let noise = g.mul(std, e)?;
    g.add(mu, noise)
}

/// Mean `−log D(z_prior)` plus mean `−log(1 − D(z_enc))`, from logits.
pub fn discriminator_loss_graph(g: &mut Graph, prior_logits: Var, enc_logits: Var) -> Var {
    let neg = g.scale(prior_logits, -1.0);
    let real = g.softplus(neg);
    let real = g.mean(real);
    let fake = g.softplus(enc_logits);
    let fake = g.mean(fake);
    g.add(real, fake).expect("scalars")
}

/// Nonsaturating encoder loss: mean `−log D(z_enc)`.
pub fn encoder_adversarial_loss_graph(g: &mut Graph, enc_logits: Var) -> Var {
    let neg = g.scale(enc_logits, -1.0);
    let sp = g.softplus(neg);
    g.mean(sp)
}

fn mean_over_rows(rows: &[LatentCode]) -> Result<Tensor> {
    crate::seqmodel::stack_latents(rows)
}

/// KL from `N(μ, diag(exp(lv)))` to `N(0, I)`, averaged over rows.
pub fn gaussian_kl(mu: &[LatentCode], logvar: &[LatentCode]) -> Result<f64> {
    if mu.len() != logvar.len() || mu.is_empty() || mu.iter().zip(logvar).any(|(a, b)| a.dim() != b.dim()) {
        return Err(Error::invalid("gaussian_kl: mu and logvar shapes differ"));
    }
    if mu.iter().chain(logvar).flat_map(|c| &c.0).any(|v| !v.is_finite()) {
        return Err(Error::numeric("gaussian_kl: non-finite input"));
    }
    let mut g = Graph::new();
    let m = g.constant(mean_over_rows(mu)?);
    let l = g.constant(mean_over_rows(logvar)?);
    let kl = gaussian_kl_graph(&mut g, m, l)?;
    Ok(g.value(kl).item())
}

pub fn laae_regularizer(logvar: &[LatentCode], lambda1: f64) -> Result<f64> {
    if logvar.is_empty() {
        return Err(Error::invalid("laae_regularizer: empty batch"));
    }
    let mut g = Graph::new();
    let l = g.constant(mean_over_rows(logvar)?);
    let p = laae_penalty_graph(&mut g, l, lambda1);
    Ok(g.value(p).item())
}

/// Mean over the batch of `−log p_G(x | E(perturb(x)))`.
pub fn reconstruction_loss<R: Rng>(
    batch: &[TokenSequence],
    model: &SeqAutoencoder,
    perturber: &Perturber,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("reconstruction_loss: empty batch"));
    }
    let noisy: Vec<TokenSequence> = batch.iter().map(|x| perturber.apply(x, rng)).collect();
    let mut g = Graph::new();
    let enc = model.encode_graph(&mut g, &noisy)?;
    let nll = model.decode_nll_graph(&mut g, enc.mu, batch)?;
    Ok(g.value(nll).item() / batch.len() as f64)
}

/// `(discriminator loss, nonsaturating encoder loss)` on fresh prior draws.
pub fn adversarial_losses<R: Rng>(
    batch: &[TokenSequence],
    model: &SeqAutoencoder,
    perturber: &Perturber,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::invalid("adversarial_losses: empty batch"));
    }
    let noisy: Vec<TokenSequence> = batch.iter().map(|x| perturber.apply(x, rng)).collect();
    let mut g = Graph::new();
    let enc = model.encode_graph(&mut g, &noisy)?;
    let prior = g.constant(standard_normal(batch.len(), model.config.latent_dim, rng));
    let prior_logits = model.discriminator_graph(&mut g, prior)?;
    let enc_logits = model.discriminator_graph(&mut g, enc.mu)?;
    let d = discriminator_loss_graph(&mut g, prior_logits, enc_logits);
    let e = encoder_adversarial_loss_graph(&mut g, enc_logits);
    Ok((g.value(d).item(), g.value(e).item()))
}

/// Loss components of one training batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchLosses {
    pub reconstruction: f64,
    pub discriminator: Option<f64>,
    pub encoder_adversarial: Option<f64>,
    pub kl: Option<f64>,
    pub logvar_penalty: Option<f64>,
    /// Objective minimized by the encoder/decoder step.
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub reconstruction: f64,
    pub discriminator: Option<f64>,
    pub encoder_adversarial: Option<f64>,
    pub kl: Option<f64>,
    pub logvar_penalty: Option<f64>,
    pub total: f64,
    pub batches: Vec<BatchLosses>,
}

fn mean_opt(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl EpochMetrics {
    fn from_batches(epoch: usize, batches: Vec<BatchLosses>) -> Self {
        let n = batches.len().max(1) as f64;
        EpochMetrics {
            epoch,
            reconstruction: batches.iter().map(|b| b.reconstruction).sum::<f64>() / n,
            discriminator: mean_opt(batches.iter().map(|b| b.discriminator)),
            encoder_adversarial: mean_opt(batches.iter().map(|b| b.encoder_adversarial)),
            kl: mean_opt(batches.iter().map(|b| b.kl)),
            logvar_penalty: mean_opt(batches.iter().map(|b| b.logvar_penalty)),
            total: batches.iter().map(|b| b.total).sum::<f64>() / n,
            batches,
        }
    }
}

/// Optimizer state and schedule for one autoencoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub generator_opt: Adam,
    pub discriminator_opt: Adam,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Use ε = 0 in the reparameterization, so z = μ.
    pub zero_reparam_noise: bool,
    perturber: Perturber,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: &SeqAutoencoder, vocab: &Vocab) -> Result<Self> {
        config.validate()?;
        if config.objective.is_variational() != model.variational {
            return Err(Error::invalid(format!(
                "{:?} objective needs a model with variational = {}",
                config.objective,
                config.objective.is_variational()
            )));
        }
        if vocab.len() != model.config.vocab_size {
            return Err(Error::invalid(format!(
                "vocabulary of {} tokens for a model with vocab size {}",
                vocab.len(),
                model.config.vocab_size
            )));
        }
        let perturber = Perturber::new(config.effective_perturbation(), vocab)?;
        Ok(Trainer {
            config,
            generator_opt: Adam::new(config.adam, model.generator_ids().to_vec(), &model.store),
            discriminator_opt: Adam::new(config.adam, model.discriminator_ids().to_vec(), &model.store),
            epoch: 0,
            zero_reparam_noise: false,
            perturber,
        })
    }

    pub fn perturber(&self) -> &Perturber {
        &self.perturber
    }

    /// One step on D, then one on E and G, for a single batch.
    pub fn train_batch(&mut self, model: &mut SeqAutoencoder, x: &[TokenSequence], noise: &BatchNoise) -> Result<BatchLosses> {
        let cfg = self.config;
        let rows = x.len() as f64;
        let mut g = Graph::new();
        let enc = model.encode_graph(&mut g, &noise.perturbed)?;
        let z = match (cfg.objective.is_variational(), enc.logvar) {
            (true, Some(lv)) => reparameterize(&mut g, enc.mu, lv, &noise.eps)?,
            _ => enc.mu,
        };

        let mut losses = BatchLosses::default();
        if cfg.objective.is_adversarial() {
            let mut gd = Graph::new();
            let prior = gd.constant(noise.prior.clone());
            let fake = gd.constant(g.value(z).clone());
            let prior_logits = model.discriminator_graph(&mut gd, prior)?;
            let fake_logits = model.discriminator_graph(&mut gd, fake)?;
            let d_loss = discriminator_loss_graph(&mut gd, prior_logits, fake_logits);
            let d_val = gd.value(d_loss).item();
            if !d_val.is_finite() {
                return Err(Error::numeric(format!("discriminator loss is {d_val}")));
            }
            model.store.zero_grad();
            gd.backward(d_loss)?;
            model.store.accumulate(&gd);
            self.discriminator_opt.step(&mut model.store)?;
            losses.discriminator = Some(d_val);
        }

        let nll = model.decode_nll_graph(&mut g, z, x)?;
        let rec = g.scale(nll, 1.0 / rows);
        losses.reconstruction = g.value(rec).item();
        let mut total = rec;
        if cfg.objective.is_adversarial() {
            // D parameters enter this graph only now, after their update.
            let logits = model.discriminator_graph(&mut g, z)?;
            let adv = encoder_adversarial_loss_graph(&mut g, logits);
            losses.encoder_adversarial = Some(g.value(adv).item());
            let weighted = g.scale(adv, cfg.lambda_adv);
            total = g.add(total, weighted)?;
        }
        if let (Some(lv), Objective::BetaVae) = (enc.logvar, cfg.objective) {
            let kl = gaussian_kl_graph(&mut g, enc.mu, lv)?;
            losses.kl = Some(g.value(kl).item());
            let weighted = g.scale(kl, cfg.beta);
            total = g.add(total, weighted)?;
        }
        if let (Some(lv), Objective::Laae) = (enc.logvar, cfg.objective) {
            let pen = laae_penalty_graph(&mut g, lv, cfg.lambda1);
            losses.logvar_penalty = Some(g.value(pen).item());
            total = g.add(total, pen)?;
        }
        losses.total = g.value(total).item();
        if !losses.total.is_finite() {
            return Err(Error::numeric(format!("non-finite training loss: {losses:?}")));
        }
        model.store.zero_grad();
        g.backward(total)?;
        model.store.accumulate(&g);
        self.generator_opt.step(&mut model.store)?;
        Ok(losses)
    }

    /// Trains one epoch over shuffled batches and returns mean losses.
    pub fn train_epoch(&mut self, model: &mut SeqAutoencoder, corpus: &Corpus) -> Result<EpochMetrics> {
        if corpus.is_empty() {
            return Err(Error::invalid("cannot train on an empty corpus"));
        }
        let mut streams = EpochStreams::new(self.config.seed, self.epoch);
        // The scheduled rate applies only inside the epoch, so the stored
        // optimizer configuration always holds the base rate.
        let lr = self.config.learning_rate(self.epoch);
        self.generator_opt.config.lr = lr;
        self.discriminator_opt.config.lr = lr;
        let perturber = self.perturber;
        let mut run = || -> Result<Vec<BatchLosses>> {
            let mut out = Vec::new();
            for (i, batch) in batches(corpus, self.config.batch_size, Some(streams.shuffle_seed))?.into_iter().enumerate() {
                let mut noise = BatchNoise::sample(&batch.sequences, &perturber, model.config.latent_dim, &mut streams);
                if self.zero_reparam_noise {
                    noise.eps.data_mut().iter_mut().for_each(|e| *e = 0.0);
                }
                let losses = self.train_batch(model, &batch.sequences, &noise).map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("epoch {} batch {i}: {msg}", self.epoch)),
                    other => other,
                })?;
                out.push(losses);
            }
            Ok(out)
        };
        let result = run();
        self.generator_opt.config.lr = self.config.adam.lr;
        self.discriminator_opt.config.lr = self.config.adam.lr;
        let out = result?;
        let metrics = EpochMetrics::from_batches(self.epoch, out);
        self.epoch += 1;
        Ok(metrics)
    }
}

/// Builds the model matching an objective and trains it for `config.epochs`.
pub fn train_autoencoder(
    model_config: crate::seqmodel::ModelConfig,
    config: TrainConfig,
    vocab: &Vocab,
    corpus: &Corpus,
) -> Result<(SeqAutoencoder, Trainer, Vec<EpochMetrics>)> {
    let mut init = SeededRng::seed_from_u64(mix_seed(config.seed, 0, 0));
    let mut model = SeqAutoencoder::new(model_config, config.objective.is_variational(), &mut init)?;
    let mut trainer = Trainer::new(config, &model, vocab)?;
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        history.push(trainer.train_epoch(&mut model, corpus)?);
    }
    Ok((model, trainer, history))
}

/// Language-model training settings for perplexity evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig { epochs: 30, batch_size: 64, seed: 0, adam: AdamConfig { lr: 0.002, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 } }
    }
}

/// Maximum-likelihood training of a language model; returns per-epoch mean token NLL.
pub fn train_language_model(lm: &mut LanguageModel, corpus: &Corpus, cfg: &LmConfig) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot train a language model on an empty corpus"));
    }
    let ids: Vec<_> = lm.store.ids().collect();
    let mut opt = Adam::new(cfg.adam, ids, &lm.store);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut nll, mut tokens) = (0.0, 0.0);
        for batch in batches(corpus, cfg.batch_size, Some(mix_seed(cfg.seed, epoch as u64, STREAM_SHUFFLE)))? {
            let count: usize = batch.sequences.iter().map(|s| s.len() + 1).sum();
            let mut g = Graph::new();
            let total = lm.nll_graph(&mut g, &batch.sequences)?;
            let loss = g.scale(total, 1.0 / count as f64);
            let v = g.value(total).item();
            if !v.is_finite() {
                return Err(Error::numeric(format!("language model loss is {v} at epoch {epoch}")));
            }
            nll += v;
            tokens += count as f64;
            lm.store.zero_grad();
            g.backward(loss)?;
            lm.store.accumulate(&g);
            opt.step(&mut lm.store)?;
        }
        history.push(nll / tokens);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::{CellKind, Init, ModelConfig};

    fn words() -> Vocab {
        Vocab::from_tokens(&["a", "b", "c", "d", "e"]).unwrap()
    }

    fn seq(ids: &[usize]) -> TokenSequence {
        TokenSequence(ids.to_vec())
    }

    #[test]
    fn zero_probability_is_identity_for_every_kind() {
        let x = seq(&[5, 6, 7, 8, 9, 5]);
        let mut rng = SeededRng::seed_from_u64(0);
        for kind in [PerturbKind::WordDelete, PerturbKind::WordMask, PerturbKind::WordReplace, PerturbKind::None] {
            assert_eq!(perturb(&x, PerturbationSpec::new(kind, 0.0), &words(), &mut rng).unwrap(), x);
        }
        let bits = seq(&[5, 6, 6]);
        let spec = PerturbationSpec::new(PerturbKind::BitFlip, 0.0);
        assert_eq!(perturb(&bits, spec, &Vocab::binary(), &mut rng).unwrap(), bits);
    }

    #[test]
    fn full_deletion_empties_and_full_flip_inverts() {
        let mut rng = SeededRng::seed_from_u64(1);
        let x = seq(&[5, 6, 7]);
        let del = perturb(&x, PerturbationSpec::new(PerturbKind::WordDelete, 1.0), &words(), &mut rng).unwrap();
        assert!(del.is_empty());
        let flip = perturb(&seq(&[5, 6, 5]), PerturbationSpec::new(PerturbKind::BitFlip, 1.0), &Vocab::binary(), &mut rng).unwrap();
        assert_eq!(flip, seq(&[6, 5, 6]));
        let masked = perturb(&x, PerturbationSpec::new(PerturbKind::WordMask, 1.0), &words(), &mut rng).unwrap();
        assert_eq!(masked, seq(&[MASK; 3]));
    }

    #[test]
    fn learning_rate_anneals_linearly() {
        let mut c = TrainConfig::default();
        c.epochs = 5;
        assert_eq!(c.learning_rate(3), c.adam.lr);
        c.final_lr_fraction = 0.1;
        assert!((c.learning_rate(0) - c.adam.lr).abs() < 1e-15);
        assert!((c.learning_rate(4) - 0.1 * c.adam.lr).abs() < 1e-15);
        assert!((c.learning_rate(2) - 0.55 * c.adam.lr).abs() < 1e-15);
        assert_eq!(c.learning_rate(9), c.learning_rate(4));
        c.final_lr_fraction = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn bit_flip_needs_binary_alphabet() {
        let mut rng = SeededRng::seed_from_u64(0);
        let r = perturb(&seq(&[5]), PerturbationSpec::new(PerturbKind::BitFlip, 0.5), &words(), &mut rng);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn word_delete_keeps_binomial_mean_length() {
        let mut rng = SeededRng::seed_from_u64(7);
        let x = seq(&[5, 6, 7, 8, 9, 5, 6, 7, 8, 9]);
        let p = Perturber::new(PerturbationSpec::new(PerturbKind::WordDelete, 0.3), &words()).unwrap();
        let mean = (0..10_000).map(|_| p.apply(&x, &mut rng).len() as f64).sum::<f64>() / 10_000.0;
        assert!((mean - 7.0).abs() < 0.1, "{mean}");
    }

    #[test]
    fn replacement_stays_in_content_range() {
        let mut rng = SeededRng::seed_from_u64(2);
        let v = words();
        let p = Perturber::new(PerturbationSpec::new(PerturbKind::WordReplace, 0.9), &v).unwrap();
        for _ in 0..200 {
            let out = p.apply(&seq(&[5, 6, 7, 8]), &mut rng);
            assert!(out.iter().all(|&t| (NUM_SPECIAL..v.len()).contains(&t)));
        }
    }

    #[test]
    fn kl_values() {
        let z = |v: &[f64]| vec![LatentCode(v.to_vec())];
        assert_eq!(gaussian_kl(&z(&[0.0]), &z(&[0.0])).unwrap(), 0.0);
        assert!((gaussian_kl(&z(&[1.0]), &z(&[0.0])).unwrap() - 0.5).abs() < 1e-15);
        let expected = 0.5 * (4.0 - 1.0 - 4f64.ln());
        assert!((gaussian_kl(&z(&[0.0]), &z(&[4f64.ln()])).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.8069).abs() < 1e-4);
        assert!(matches!(gaussian_kl(&z(&[f64::NAN]), &z(&[0.0])), Err(Error::Numeric(_))));
    }

    #[test]
    fn laae_penalty_values_and_gradient_sign() {
        let lv = vec![LatentCode(vec![1.0, -1.0])];
        assert!((laae_regularizer(&lv, 0.05).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(laae_regularizer(&[LatentCode(vec![0.0, 0.0])], 0.05).unwrap(), 0.0);
        // Central differences: the penalty grows away from zero on both sides.
        let f = |x: f64| laae_regularizer(&[LatentCode(vec![x])], 0.05).unwrap();
        let h = 1e-6;
        assert!((f(0.7 + h) - f(0.7 - h)) / (2.0 * h) > 0.0);
        assert!((f(-0.7 + h) - f(-0.7 - h)) / (2.0 * h) < 0.0);
    }

    #[test]
    fn constant_discriminator_losses() {
        let mut g = Graph::new();
        let half = g.constant(Tensor::zeros(&[4, 1]));
        let d = discriminator_loss_graph(&mut g, half, half);
        assert!((g.value(d).item() + 2.0 * 0.5f64.ln()).abs() < 1e-12);
        let logit = (0.9f64 / 0.1).ln();
        let c = g.constant(Tensor::full(&[4, 1], logit));
        let d = discriminator_loss_graph(&mut g, c, c);
        assert!((g.value(d).item() - 2.4079456086518722).abs() < 1e-12);
        let hi = g.constant(Tensor::full(&[4, 1], 40.0));
        let lo = g.constant(Tensor::full(&[4, 1], -40.0));
        let d = discriminator_loss_graph(&mut g, hi, lo);
        assert!(g.value(d).item() < 1e-15);
    }

    fn tiny_model(variational: bool) -> SeqAutoencoder {
        let cfg = ModelConfig {
            vocab_size: 10,
            embed_dim: 6,
            hidden_dim: 10,
            latent_dim: 2,
            disc_hidden: 6,
            max_len: 8,
            cell: CellKind::Gru,
            init: Init::Uniform,
        };
        SeqAutoencoder::new(cfg, variational, &mut SeededRng::seed_from_u64(11)).unwrap()
    }

    #[test]
    fn zero_output_reconstruction_loss_is_uniform() {
        let mut m = tiny_model(false);
        m.zero_output_layer();
        let batch = vec![seq(&[5, 6]), seq(&[7, 8, 9, 5])];
        let p = Perturber::new(PerturbationSpec::NONE, &words()).unwrap();
        let loss = reconstruction_loss(&batch, &m, &p, &mut SeededRng::seed_from_u64(0)).unwrap();
        assert!((loss - 4.0 * 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn discriminator_at_half_gives_two_log_two() {
        let mut m = tiny_model(false);
        m.zero_discriminator_output();
        let p = Perturber::new(PerturbationSpec::NONE, &words()).unwrap();
        let (d, e) = adversarial_losses(&[seq(&[5])], &m, &p, &mut SeededRng::seed_from_u64(0)).unwrap();
        assert!((d - 1.3862943611198906).abs() < 1e-12);
        assert!((e - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fixed_seed_epochs_are_bit_identical() {
        let corpus = Corpus::new((0..12).map(|i| seq(&[5 + i % 5, 6, 5 + (i * 3) % 5])).collect());
        let cfg = TrainConfig { batch_size: 5, seed: 4, ..TrainConfig::default() };
        let run = || {
            let mut m = tiny_model(false);
            let mut t = Trainer::new(cfg, &m, &words()).unwrap();
            (0..2).map(|_| t.train_epoch(&mut m, &corpus).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    fn losses_for(objective: Objective, variational: bool, cfg: TrainConfig, corpus: &Corpus) -> Vec<BatchLosses> {
        let mut m = tiny_model(variational);
        let mut t = Trainer::new(TrainConfig { objective, ..cfg }, &m, &words()).unwrap();
        t.zero_reparam_noise = true;
        (0..2).flat_map(|_| t.train_epoch(&mut m, corpus).unwrap().batches).collect()
    }

    #[test]
    fn zero_weights_make_every_objective_plain_ae() {
        let corpus = Corpus::new((0..9).map(|i| seq(&[5 + i % 5, 7, 5 + (i * 2) % 5, 9])).collect());
        let cfg = TrainConfig {
            lambda_adv: 0.0,
            beta: 0.0,
            lambda1: 0.0,
            perturbation: PerturbationSpec::NONE,
            batch_size: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        let ae = losses_for(Objective::Ae, false, cfg, &corpus);
        for (obj, var) in [(Objective::Aae, false), (Objective::Daae, false), (Objective::BetaVae, true), (Objective::Laae, true)] {
            let other = losses_for(obj, var, cfg, &corpus);
            assert_eq!(other.len(), ae.len());
            for (a, b) in ae.iter().zip(&other) {
                assert!((a.reconstruction - b.reconstruction).abs() < 1e-12, "{obj:?}");
                assert!((a.total - b.total).abs() < 1e-12, "{obj:?}");
            }
        }
    }

    #[test]
    fn daae_without_noise_matches_aae() {
        let corpus = Corpus::new((0..9).map(|i| seq(&[5 + i % 5, 6, 8])).collect());
        let cfg = TrainConfig { batch_size: 4, seed: 9, perturbation: PerturbationSpec::new(PerturbKind::WordDelete, 0.0), ..TrainConfig::default() };
        assert_eq!(losses_for(Objective::Daae, false, cfg, &corpus), losses_for(Objective::Aae, false, cfg, &corpus));
    }

    #[test]
    fn full_adversarial_loss_passes_gradient_check() {
        let cfg = ModelConfig {
            vocab_size: 8,
            embed_dim: 4,
            hidden_dim: 8,
            latent_dim: 2,
            disc_hidden: 4,
            max_len: 5,
            cell: CellKind::Gru,
            init: Init::Uniform,
        };
        let mut m = SeqAutoencoder::new(cfg, false, &mut SeededRng::seed_from_u64(5)).unwrap();
        let x = vec![seq(&[5, 6, 7]), seq(&[7, 5])];
        let model = m.clone();
        let err = crate::tensor::finite_difference_check_params(
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
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn objective_must_match_model_head() {
        let m = tiny_model(false);
        let cfg = TrainConfig { objective: Objective::BetaVae, ..TrainConfig::default() };
        assert!(Trainer::new(cfg, &m, &words()).is_err());
    }
}
