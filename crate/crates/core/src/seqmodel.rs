//! Recurrent encoder, latent-conditioned decoder, latent discriminator and
//! the unconditioned language model used for perplexity evaluation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{PaddedBatch, TokenSequence, BOS, EOS, MASK, NUM_SPECIAL, PAD};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Gru,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub disc_hidden: usize,
    pub max_len: usize,
    pub cell: CellKind,
    pub init: Init,
}

/// Weight initialization. Biases always start at zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// `U(-0.1, 0.1)` for every matrix.
    #[default]
    Uniform,
    /// `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    Glorot,
}

impl Init {
    fn limit(self, shape: &[usize]) -> f64 {
        match self {
            Init::Uniform => 0.1,
            Init::Glorot => (6.0 / (shape[0] + shape[1]) as f64).sqrt(),
        }
    }

    fn add<R: Rng>(self, store: &mut ParamStore, name: impl Into<String>, shape: &[usize], rng: &mut R) -> ParamId {
        store.add_uniform(name, shape, self.limit(shape), rng)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: NUM_SPECIAL + 2,
            embed_dim: 128,
            hidden_dim: 256,
            latent_dim: 32,
            disc_hidden: 128,
            max_len: 50,
            cell: CellKind::Gru,
            init: Init::Uniform,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.embed_dim, self.hidden_dim, self.latent_dim, self.disc_hidden, self.max_len];
        if dims.contains(&0) {
            return Err(Error::invalid(format!("model dimensions must be positive: {self:?}")));
        }
        if self.vocab_size <= NUM_SPECIAL {
            return Err(Error::invalid(format!(
                "vocab size {} leaves no room beyond {NUM_SPECIAL} reserved tokens",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// A point in latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn zeros(d: usize) -> Self {
        LatentCode(vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn distance(&self, other: &LatentCode) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }

    /// `self + scale * other`.
    pub fn offset(&self, other: &LatentCode, scale: f64) -> LatentCode {
        LatentCode(self.0.iter().zip(&other.0).map(|(a, b)| a + scale * b).collect())
    }

    pub fn lerp(a: &LatentCode, b: &LatentCode, t: f64) -> LatentCode {
        LatentCode(a.0.iter().zip(&b.0).map(|(x, y)| t * x + (1.0 - t) * y).collect())
    }
}

pub(crate) fn stack_latents(codes: &[LatentCode]) -> Result<Tensor> {
    Tensor::from_rows(&codes.iter().map(|c| c.0.clone()).collect::<Vec<_>>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, inp: usize, out: usize, init: Init, rng: &mut R) -> Self {
        let w = init.add(store, format!("{name}.w"), &[inp, out], rng);
        let b = store.add_zeros(format!("{name}.b"), &[1, out]);
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        for id in [self.w, self.b] {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Single-layer GRU or LSTM.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Recurrent {
    kind: CellKind,
    hidden: usize,
    wx: ParamId,
    wh: ParamId,
    bx: ParamId,
    bh: ParamId,
}

impl Recurrent {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, input: usize, rng: &mut R) -> Self {
        let (kind, hidden) = (cfg.cell, cfg.hidden_dim);
        let gates = match kind {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        } * hidden;
        Recurrent {
            kind,
            hidden,
            wx: cfg.init.add(store, format!("{name}.wx"), &[input, gates], rng),
            wh: cfg.init.add(store, format!("{name}.wh"), &[hidden, gates], rng),
            bx: store.add_zeros(format!("{name}.bx"), &[1, gates]),
            bh: store.add_zeros(format!("{name}.bh"), &[1, gates]),
        }
    }

    /// Input-side gate pre-activations for a stack of inputs.
    fn project_inputs(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let wx = g.param(store, self.wx);
        let bx = g.param(store, self.bx);
        let p = g.matmul(x, wx)?;
        g.add_row(p, bx)
    }

    /// Input-side contribution of a per-row additive input offset, without bias.
    fn project_offset(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let wx = g.param(store, self.wx);
        g.matmul(x, wx)
    }

    fn state_width(&self) -> usize {
        match self.kind {
            CellKind::Gru => self.hidden,
            CellKind::Lstm => 2 * self.hidden,
        }
    }

    /// Zero state: `h` for the GRU, `[h | c]` for the LSTM.
    fn initial(&self, g: &mut Graph, rows: usize) -> Var {
        g.constant(Tensor::zeros(&[rows, self.state_width()]))
    }

    /// One step reading input pre-activations from rows `row..row+B` of `xp`.
    fn step(&self, g: &mut Graph, store: &ParamStore, xp: Var, row: usize, extra: Option<Var>, state: Var) -> Result<Var> {
        let wh = g.param(store, self.wh);
        let bh = g.param(store, self.bh);
        match self.kind {
            CellKind::Gru => g.gru_cell(xp, row, extra, state, wh, bh),
            CellKind::Lstm => g.lstm_cell(xp, row, extra, state, wh, bh),
        }
    }

    fn output(&self, g: &mut Graph, state: Var) -> Result<Var> {
        match self.kind {
            CellKind::Gru => Ok(state),
            CellKind::Lstm => g.slice_cols(state, 0, self.hidden),
        }
    }
}

/// Time-major ids of a padded batch: step `t` occupies rows `t*B..(t+1)*B`.
fn time_major(ids: &[usize], rows: usize, width: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(rows * width);
    for t in 0..width {
        for r in 0..rows {
            out.push(ids[r * width + t]);
        }
    }
    out
}

/// Masked blend `old + m ⊙ (new − old)`, where `m` repeats a per-row 0/1 flag.
fn blend(g: &mut Graph, old: Var, new: Var, mask: &[f64], width: usize) -> Result<Var> {
    if mask.iter().all(|&m| m == 1.0) {
        return Ok(new);
    }
    let m: Vec<f64> = mask.iter().flat_map(|&m| std::iter::repeat_n(m, width)).collect();
    let m = g.constant(Tensor::new(vec![mask.len(), width], m)?);
    let diff = g.sub(new, old)?;
    let step = g.mul(m, diff)?;
    g.add(old, step)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Encoder {
    embed: ParamId,
    rnn: Recurrent,
    mu: Linear,
    logvar: Option<Linear>,
}

/// Encoder outputs for a batch: the code (or posterior mean) and, for
/// variational heads, the log-variance.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub mu: Var,
    pub logvar: Option<Var>,
}

impl Encoder {
    fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &PaddedBatch) -> Result<Encoded> {
        let rows = batch.rows;
        let mut state = self.rnn.initial(g, rows);
        if batch.width > 0 {
            let embed = g.param(store, self.embed);
            let x = g.gather(embed, &time_major(&batch.ids, rows, batch.width))?;
            let xp = self.rnn.project_inputs(g, store, x)?;
            for t in 0..batch.width {
                let next = self.rnn.step(g, store, xp, t * rows, None, state)?;
                state = blend(g, state, next, &batch.mask_column(t), self.rnn.state_width())?;
            }
        }
        let h = self.rnn.output(g, state)?;
        let mu = self.mu.forward(g, store, h)?;
        let logvar = match &self.logvar {
            Some(head) => Some(head.forward(g, store, h)?),
            None => None,
        };
        Ok(Encoded { mu, logvar })
    }
}

/// Teacher-forced decoder inputs, targets and per-position weights.
struct DecoderTargets {
    inputs: Vec<usize>,
    targets: Vec<usize>,
    weights: Vec<f64>,
    steps: usize,
}

impl DecoderTargets {
    /// Frames each sequence as `<bos> x` → `x <eos>`, time-major.
    fn new(seqs: &[TokenSequence]) -> Self {
        let rows = seqs.len();
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0) + 1;
        let mut inputs = vec![PAD; rows * steps];
        let mut targets = vec![PAD; rows * steps];
        let mut weights = vec![0.0; rows * steps];
        for (r, s) in seqs.iter().enumerate() {
            for t in 0..=s.len() {
                let at = t * rows + r;
                inputs[at] = if t == 0 { BOS } else { s[t - 1] };
                targets[at] = if t == s.len() { EOS } else { s[t] };
                weights[at] = 1.0;
            }
        }
        DecoderTargets { inputs, targets, weights, steps }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Decoder {
    embed: ParamId,
    rnn: Recurrent,
    zproj: Option<Linear>,
    out: Linear,
}

impl Decoder {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, conditioned: bool, rng: &mut R) -> Self {
        let embed = cfg.init.add(store, format!("{name}.embed"), &[cfg.vocab_size, cfg.embed_dim], rng);
        let rnn = Recurrent::new(store, &format!("{name}.rnn"), cfg, cfg.embed_dim, rng);
        let zproj = conditioned.then(|| Linear::new(store, &format!("{name}.zproj"), cfg.latent_dim, cfg.embed_dim, cfg.init, rng));
        let out = Linear::new(store, &format!("{name}.out"), cfg.hidden_dim, cfg.vocab_size, cfg.init, rng);
        Decoder { embed, rnn, zproj, out }
    }

    /// Gate offset from the latent code: `(z·Wz + bz)·Wx`, added at every step.
    fn latent_offset(&self, g: &mut Graph, store: &ParamStore, z: Option<Var>) -> Result<Option<Var>> {
        match (z, &self.zproj) {
            (Some(z), Some(proj)) => {
                let e = proj.forward(g, store, z)?;
                Ok(Some(self.rnn.project_offset(g, store, e)?))
            }
            (None, None) => Ok(None),
            (Some(_), None) => Err(Error::invalid("latent code given to an unconditioned decoder")),
            (None, Some(_)) => Err(Error::invalid("conditioned decoder needs a latent code")),
        }
    }

    /// Logits `[steps*B, V]` under teacher forcing.
    fn logits(&self, g: &mut Graph, store: &ParamStore, z: Option<Var>, tgt: &DecoderTargets, rows: usize) -> Result<Var> {
        let offset = self.latent_offset(g, store, z)?;
        let embed = g.param(store, self.embed);
        let x = g.gather(embed, &tgt.inputs)?;
        let xp = self.rnn.project_inputs(g, store, x)?;
        let mut state = self.rnn.initial(g, rows);
        let mut hidden = Vec::with_capacity(tgt.steps);
        for t in 0..tgt.steps {
            state = self.rnn.step(g, store, xp, t * rows, offset, state)?;
            hidden.push(self.rnn.output(g, state)?);
        }
        let all = g.concat_rows(&hidden)?;
        self.out.forward(g, store, all)
    }

    /// Summed negative log-likelihood of the batch (scalar graph node).
    pub(crate) fn nll(&self, g: &mut Graph, store: &ParamStore, z: Option<Var>, seqs: &[TokenSequence]) -> Result<Var> {
        let tgt = DecoderTargets::new(seqs);
        let logits = self.logits(g, store, z, &tgt, seqs.len())?;
        g.softmax_cross_entropy(logits, &tgt.targets, &tgt.weights)
    }

    /// Per-sequence log-likelihoods, end token included.
    fn log_likelihoods(&self, store: &ParamStore, z: Option<&Tensor>, seqs: &[TokenSequence]) -> Result<Vec<f64>> {
        let rows = seqs.len();
        let tgt = DecoderTargets::new(seqs);
        let mut g = Graph::new();
        let zv = z.map(|t| g.constant(t.clone()));
        let logits = self.logits(&mut g, store, zv, &tgt, rows)?;
        let lp = g.log_softmax(logits);
        let lp = g.value(lp);
        let mut out = vec![0.0; rows];
        for (i, (&t, &w)) in tgt.targets.iter().zip(&tgt.weights).enumerate() {
            if w != 0.0 {
                out[i % rows] += lp.row(i)[t];
            }
        }
        Ok(out)
    }

    /// Argmax decoding from `<bos>`; ties go to the lowest id. Stops at `<eos>`.
    fn greedy(&self, store: &ParamStore, z: Option<&Tensor>, rows: usize, max_len: usize) -> Result<Vec<TokenSequence>> {
        let mut g = Graph::new();
        let zv = z.map(|t| g.constant(t.clone()));
        let offset = self.latent_offset(&mut g, store, zv)?;
        let embed = g.param(store, self.embed);
        let mut state = self.rnn.initial(&mut g, rows);
        let mut current = vec![BOS; rows];
        let mut done = vec![false; rows];
        let mut out = vec![Vec::new(); rows];
        for _ in 0..=max_len {
            if done.iter().all(|&d| d) {
                break;
            }
            let x = g.gather(embed, &current)?;
            let xt = self.rnn.project_inputs(&mut g, store, x)?;
            state = self.rnn.step(&mut g, store, xt, 0, offset, state)?;
            let h = self.rnn.output(&mut g, state)?;
            let logits = self.out.forward(&mut g, store, h)?;
            let logits = g.value(logits);
            for r in 0..rows {
                let next = argmax(logits.row(r));
                current[r] = next;
                if done[r] {
                    continue;
                }
                if next == EOS {
                    done[r] = true;
                } else if !matches!(next, PAD | BOS | MASK) {
                    out[r].push(next);
                }
            }
            for (r, seq) in out.iter().enumerate() {
                if seq.len() >= max_len {
                    done[r] = true;
                }
            }
        }
        Ok(out.into_iter().map(TokenSequence).collect())
    }
}

/// Index of the largest entry; the first (lowest) index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Discriminator {
    hidden: Linear,
    out: Linear,
}

impl Discriminator {
    fn logits(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, z)?;
        let h = g.relu(h);
        self.out.forward(g, store, h)
    }
}

/// Encoder E, decoder G and discriminator D sharing one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqAutoencoder {
    pub config: ModelConfig,
    pub variational: bool,
    pub store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    discriminator: Discriminator,
    generator_ids: Vec<ParamId>,
    discriminator_ids: Vec<ParamId>,
}

impl SeqAutoencoder {
    /// `variational` adds a log-variance head to the encoder.
    pub fn new<R: Rng>(config: ModelConfig, variational: bool, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let init = config.init;
        let embed = init.add(&mut store, "enc.embed", &[config.vocab_size, config.embed_dim], rng);
        let rnn = Recurrent::new(&mut store, "enc.rnn", &config, config.embed_dim, rng);
        let mu = Linear::new(&mut store, "enc.mu", config.hidden_dim, config.latent_dim, init, rng);
        let decoder = Decoder::new(&mut store, "dec", &config, true, rng);
        let hidden = Linear::new(&mut store, "disc.hidden", config.latent_dim, config.disc_hidden, init, rng);
        let out = Linear::new(&mut store, "disc.out", config.disc_hidden, 1, init, rng);
        // Created last so deterministic and variational models built from the
        // same seed share every other initial weight.
        let logvar = variational.then(|| Linear::new(&mut store, "enc.logvar", config.hidden_dim, config.latent_dim, init, rng));
        let encoder = Encoder { embed, rnn, mu, logvar };
        let is_disc = |name: &str| name.starts_with("disc.");
        let (discriminator_ids, generator_ids): (Vec<ParamId>, Vec<ParamId>) =
            store.ids().partition(|&id| is_disc(store.name(id)));
        Ok(SeqAutoencoder {
            config,
            variational,
            store,
            encoder,
            decoder,
            discriminator: Discriminator { hidden, out },
            generator_ids,
            discriminator_ids,
        })
    }

    /// Encoder and decoder parameters.
    pub fn generator_ids(&self) -> &[ParamId] {
        &self.generator_ids
    }

    pub fn discriminator_ids(&self) -> &[ParamId] {
        &self.discriminator_ids
    }

    pub fn zero_output_layer(&mut self) {
        self.decoder.out.zero(&mut self.store);
    }

    pub fn zero_discriminator_output(&mut self) {
        self.discriminator.out.zero(&mut self.store);
    }

    fn check_tokens(&self, seqs: &[TokenSequence], max_len: usize) -> Result<()> {
        for s in seqs {
            if let Some(&bad) = s.iter().find(|&&id| id >= self.config.vocab_size) {
                return Err(Error::invalid(format!("token id {bad} >= vocab size {}", self.config.vocab_size)));
            }
            if s.len() > max_len {
                return Err(Error::invalid(format!("sequence of length {} exceeds max length {max_len}", s.len())));
            }
        }
        Ok(())
    }

    fn check_latents(&self, codes: &[LatentCode]) -> Result<()> {
        for c in codes {
            if c.dim() != self.config.latent_dim {
                return Err(Error::invalid(format!("latent code of dim {} for a {}-dim model", c.dim(), self.config.latent_dim)));
            }
            if c.0.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("latent code has non-finite entries"));
            }
        }
        Ok(())
    }

    /// Records the encoder on `g` for a batch of raw (unframed) sequences.
    pub fn encode_graph(&self, g: &mut Graph, seqs: &[TokenSequence]) -> Result<Encoded> {
        if seqs.is_empty() {
            return Err(Error::invalid("cannot encode an empty batch"));
        }
        self.check_tokens(seqs, self.config.max_len)?;
        self.encoder.forward(g, &self.store, &PaddedBatch::from_sequences(seqs))
    }

    /// Summed reconstruction NLL of `targets` given latent rows `z`.
    pub fn decode_nll_graph(&self, g: &mut Graph, z: Var, targets: &[TokenSequence]) -> Result<Var> {
        self.check_tokens(targets, self.config.max_len)?;
        self.decoder.nll(g, &self.store, Some(z), targets)
    }

    /// Discriminator logits `[B,1]`.
    pub fn discriminator_graph(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.discriminator.logits(g, &self.store, z)
    }

    /// Deterministic codes (posterior means for variational encoders).
    pub fn encode_batch(&self, seqs: &[TokenSequence]) -> Result<Vec<LatentCode>> {
        let mut g = Graph::new();
        let enc = self.encode_graph(&mut g, seqs)?;
        let t = g.value(enc.mu);
        Ok((0..t.rows()).map(|r| LatentCode(t.row(r).to_vec())).collect())
    }

    pub fn encode(&self, seq: &TokenSequence) -> Result<LatentCode> {
        Ok(self.encode_batch(std::slice::from_ref(seq))?.remove(0))
    }

    /// `Σ_t log p(x_t | z, x_<t)` including the end token.
    pub fn decode_log_likelihood_batch(&self, codes: &[LatentCode], seqs: &[TokenSequence]) -> Result<Vec<f64>> {
        if codes.len() != seqs.len() || seqs.is_empty() {
            return Err(Error::invalid(format!("{} codes for {} sequences", codes.len(), seqs.len())));
        }
        self.check_latents(codes)?;
        self.check_tokens(seqs, self.config.max_len)?;
        self.decoder.log_likelihoods(&self.store, Some(&stack_latents(codes)?), seqs)
    }

    pub fn decode_log_likelihood(&self, z: &LatentCode, seq: &TokenSequence) -> Result<f64> {
        Ok(self.decode_log_likelihood_batch(std::slice::from_ref(z), std::slice::from_ref(seq))?[0])
    }

    pub fn decode_greedy_batch(&self, codes: &[LatentCode], max_len: usize) -> Result<Vec<TokenSequence>> {
        if codes.is_empty() {
            return Ok(Vec::new());
        }
        self.check_latents(codes)?;
        let max_len = max_len.min(self.config.max_len);
        self.decoder.greedy(&self.store, Some(&stack_latents(codes)?), codes.len(), max_len)
    }

    pub fn decode_greedy(&self, z: &LatentCode, max_len: usize) -> Result<TokenSequence> {
        Ok(self.decode_greedy_batch(std::slice::from_ref(z), max_len)?.remove(0))
    }

    /// Greedy reconstructions of `seqs` (no perturbation).
    pub fn reconstruct(&self, seqs: &[TokenSequence]) -> Result<Vec<TokenSequence>> {
        let codes = self.encode_batch(seqs)?;
        self.decode_greedy_batch(&codes, self.config.max_len)
    }

    pub fn discriminate_batch(&self, codes: &[LatentCode]) -> Result<Vec<f64>> {
        if codes.is_empty() {
            return Ok(Vec::new());
        }
        self.check_latents(codes)?;
        let mut g = Graph::new();
        let z = g.constant(stack_latents(codes)?);
        let logits = self.discriminator_graph(&mut g, z)?;
        let p = g.sigmoid(logits);
        Ok(g.value(p).data().to_vec())
    }

    /// Probability that `z` came from the prior.
    pub fn discriminate(&self, z: &LatentCode) -> Result<f64> {
        Ok(self.discriminate_batch(std::slice::from_ref(z))?[0])
    }
}

/// Decoder architecture without latent input, used as the perplexity model.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    decoder: Decoder,
}

impl LanguageModel {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let decoder = Decoder::new(&mut store, "lm", &config, false, rng);
        Ok(LanguageModel { config, store, decoder })
    }

    pub fn zero_output_layer(&mut self) {
        self.decoder.out.zero(&mut self.store);
    }

    fn check(&self, seqs: &[TokenSequence]) -> Result<()> {
        for s in seqs {
            if let Some(&bad) = s.iter().find(|&&id| id >= self.config.vocab_size) {
                return Err(Error::invalid(format!("token id {bad} >= vocab size {}", self.config.vocab_size)));
            }
        }
        Ok(())
    }

    pub fn nll_graph(&self, g: &mut Graph, seqs: &[TokenSequence]) -> Result<Var> {
        self.check(seqs)?;
        self.decoder.nll(g, &self.store, None, seqs)
    }

    pub fn log_likelihood_batch(&self, seqs: &[TokenSequence]) -> Result<Vec<f64>> {
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        self.check(seqs)?;
        self.decoder.log_likelihoods(&self.store, None, seqs)
    }

    pub fn lm_log_likelihood(&self, seq: &TokenSequence) -> Result<f64> {
        Ok(self.log_likelihood_batch(std::slice::from_ref(seq))?[0])
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::SeededRng;

    fn tiny(cell: CellKind) -> SeqAutoencoder {
        let cfg = ModelConfig {
            vocab_size: 8,
            embed_dim: 6,
            hidden_dim: 8,
            latent_dim: 2,
            disc_hidden: 5,
            max_len: 10,
            cell,
            init: Init::Uniform,
        };
        SeqAutoencoder::new(cfg, false, &mut SeededRng::seed_from_u64(3)).unwrap()
    }

    fn seq(ids: &[usize]) -> TokenSequence {
        TokenSequence(ids.to_vec())
    }

    #[test]
    fn encode_is_deterministic_with_latent_dim_output() {
        for cell in [CellKind::Gru, CellKind::Lstm] {
            let m = tiny(cell);
            for s in [seq(&[5]), seq(&[5, 6, 7, 5, 6])] {
                let a = m.encode(&s).unwrap();
                assert_eq!(a.dim(), 2);
                assert_eq!(a, m.encode(&s).unwrap());
            }
        }
    }

    #[test]
    fn batched_encoding_matches_single_with_padding() {
        let m = tiny(CellKind::Lstm);
        let seqs = vec![seq(&[5, 6]), seq(&[7, 7, 7, 5, 6]), seq(&[])];
        let batch = m.encode_batch(&seqs).unwrap();
        for (s, b) in seqs.iter().zip(&batch) {
            let single = m.encode(s).unwrap();
            assert!(single.distance(b) < 1e-12);
        }
    }

    #[test]
    fn out_of_vocab_token_is_rejected() {
        let m = tiny(CellKind::Gru);
        assert!(matches!(m.encode(&seq(&[5, 8])), Err(Error::InvalidArgument(_))));
        assert!(m.encode(&seq(&[5; 11])).is_err());
    }

    #[test]
    fn zero_output_layer_gives_uniform_likelihood() {
        let mut m = tiny(CellKind::Gru);
        m.zero_output_layer();
        let s = seq(&[5, 6, 7]);
        let z = m.encode(&s).unwrap();
        let ll = m.decode_log_likelihood(&z, &s).unwrap();
        assert!((ll + 4.0 * 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn teacher_forced_likelihood_matches_stepwise_recomputation() {
        // Oracle: one step at a time, summing log-softmax of the gold token.
        let m = tiny(CellKind::Gru);
        let s = seq(&[6, 5, 7, 7]);
        let z = LatentCode(vec![0.3, -0.8]);
        let batch = m.decode_log_likelihood(&z, &s).unwrap();
        let mut total = 0.0;
        let framed: Vec<usize> = s.iter().copied().chain([EOS]).collect();
        for t in 0..framed.len() {
            let prefix = TokenSequence(s[..t].to_vec());
            let mut g = Graph::new();
            let zv = g.constant(stack_latents(std::slice::from_ref(&z)).unwrap());
            let tgt = DecoderTargets::new(std::slice::from_ref(&prefix));
            let logits = m.decoder.logits(&mut g, &m.store, Some(zv), &tgt, 1).unwrap();
            let lp = g.log_softmax(logits);
            total += g.value(lp).row(t)[framed[t]];
        }
        assert!((batch - total).abs() < 1e-12);
        assert!(batch <= 0.0);
    }

    #[test]
    fn greedy_is_deterministic_and_bounded() {
        let m = tiny(CellKind::Gru);
        let z = LatentCode(vec![1.0, -2.0]);
        let a = m.decode_greedy(&z, 7).unwrap();
        assert_eq!(a, m.decode_greedy(&z, 7).unwrap());
        assert!(a.len() <= 7);
        assert!(a.iter().all(|&id| !matches!(id, PAD | BOS | EOS | MASK)));
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.1, 0.7, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }

    #[test]
    fn discriminator_range_and_zero_init() {
        let mut m = tiny(CellKind::Gru);
        let mut rng = SeededRng::seed_from_u64(1);
        let codes: Vec<LatentCode> =
            (0..1000).map(|_| LatentCode(vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])).collect();
        for p in m.discriminate_batch(&codes).unwrap() {
            assert!(p > 0.0 && p < 1.0);
        }
        m.zero_discriminator_output();
        for p in m.discriminate_batch(&codes).unwrap() {
            assert_eq!(p, 0.5);
        }
    }

    #[test]
    fn lm_zero_output_is_uniform() {
        let cfg = ModelConfig { vocab_size: 9, embed_dim: 4, hidden_dim: 5, ..ModelConfig::default() };
        let mut lm = LanguageModel::new(cfg, &mut SeededRng::seed_from_u64(0)).unwrap();
        lm.zero_output_layer();
        let ll = lm.lm_log_likelihood(&seq(&[5, 6])).unwrap();
        assert!((ll + 3.0 * 9f64.ln()).abs() < 1e-12);
    }
}
