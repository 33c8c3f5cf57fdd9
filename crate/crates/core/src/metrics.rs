//! Evaluation of sequence autoencoders: edit-distance neighborhoods, latent
//! neighborhoods, reconstruction BLEU, forward/reverse perplexity and latent
//! manipulation (interpolation and attribute vectors).

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TokenSequence};
use crate::error::{Error, Result};
use crate::objectives::{standard_normal, train_language_model, LmConfig};
use crate::seqmodel::{LanguageModel, LatentCode, ModelConfig, SeqAutoencoder};
use crate::SeededRng;

/// Rows per forward pass when encoding or decoding whole corpora.
const CHUNK: usize = 256;

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Token-level Levenshtein distance over the longer length; 0 for two empty sequences.
pub fn normalized_edit_distance(a: &[usize], b: &[usize]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 0.0;
    }
    levenshtein(a, b) as f64 / longest as f64
}

/// Indices of the `k` items nearest to `i` (excluding `i`), ties broken by index.
fn nearest(i: usize, n: usize, k: usize, dist: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut others: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (dist(j), j)).collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    others.truncate(k);
    others.into_iter().map(|(_, j)| j).collect()
}

/// Parameters of the neighborhood recall computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallConfig {
    /// Size of the edit-distance neighborhood.
    pub nn_x: usize,
    /// Larger corpora are subsampled to this many items.
    pub max_items: usize,
    pub seed: u64,
}

impl Default for RecallConfig {
    fn default() -> Self {
        RecallConfig { nn_x: 10, max_items: 2000, seed: 0 }
    }
}

/// Mean over items of `|NN_x ∩ NN_z| / |NN_x|`, one value per entry of `ks`.
///
/// `NN_x` holds the `nn_x` nearest other items by normalized edit distance and
/// `NN_z` the `k` nearest by Euclidean latent distance.
pub fn recall_curve(seqs: &[TokenSequence], latents: &[LatentCode], ks: &[usize], cfg: &RecallConfig) -> Result<Vec<f64>> {
    if seqs.len() != latents.len() {
        return Err(Error::invalid(format!("{} sequences but {} latent codes", seqs.len(), latents.len())));
    }
    let n_all = seqs.len();
    if n_all <= cfg.nn_x + 1 {
        return Err(Error::invalid(format!("recall needs more than {} items, got {n_all}", cfg.nn_x + 1)));
    }
    let items: Vec<usize> = if n_all > cfg.max_items {
        let mut rng = SeededRng::seed_from_u64(cfg.seed);
        let mut idx = sample(&mut rng, n_all, cfg.max_items).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n_all).collect()
    };
    let n = items.len();
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k >= n) {
        return Err(Error::invalid(format!("k = {bad} must be in 1..{n}")));
    }
    let kmax = ks.iter().copied().max().unwrap_or(0);
    let mut totals = vec![0.0; ks.len()];
    for a in 0..n {
        let x = &seqs[items[a]];
        let nn_x = nearest(a, n, cfg.nn_x, |b| normalized_edit_distance(x, &seqs[items[b]]));
        let z = &latents[items[a]];
        let nn_z = nearest(a, n, kmax, |b| z.distance(&latents[items[b]]));
        for (t, &k) in totals.iter_mut().zip(ks) {
            let hits = nn_x.iter().filter(|j| nn_z[..k].contains(j)).count();
            *t += hits as f64 / cfg.nn_x as f64;
        }
    }
    Ok(totals.into_iter().map(|t| t / n as f64).collect())
}

pub fn recall_at_k(seqs: &[TokenSequence], latents: &[LatentCode], k: usize) -> Result<f64> {
    Ok(recall_curve(seqs, latents, &[k], &RecallConfig::default())?[0])
}

/// Mean fraction of each point's `k` nearest latent neighbors that share its label.
pub fn knn_label_purity<L: PartialEq>(latents: &[LatentCode], labels: &[L], k: usize) -> Result<f64> {
    let n = latents.len();
    if labels.len() != n {
        return Err(Error::invalid(format!("{n} latent codes but {} labels", labels.len())));
    }
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("k = {k} must be in 1..{n}")));
    }
    let total: f64 = (0..n)
        .map(|i| {
            let nn = nearest(i, n, k, |j| latents[i].distance(&latents[j]));
            nn.iter().filter(|&&j| labels[j] == labels[i]).count() as f64 / k as f64
        })
        .sum();
    Ok(total / n as f64)
}

/// Fraction of reference positions reproduced at the same position.
pub fn token_accuracy(hyps: &[TokenSequence], refs: &[TokenSequence]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::invalid(format!("{} hypotheses but {} references", hyps.len(), refs.len())));
    }
    let total: usize = refs.iter().map(|r| r.len()).sum();
    if total == 0 {
        return Err(Error::invalid("references contain no tokens"));
    }
    let hits: usize = hyps.iter().zip(refs).map(|(h, r)| r.iter().zip(h.iter()).filter(|(a, b)| a == b).count()).sum();
    Ok(hits as f64 / total as f64)
}

/// Count of zero-match n-gram orders is replaced by this before the log.
pub const BLEU_EPSILON: f64 = 1e-9;

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 on a 0–100 scale with one reference per hypothesis.
///
/// Orders with no matching n-gram use a count of [`BLEU_EPSILON`]; orders
/// for which no hypothesis has any n-gram are left out of the geometric mean.
pub fn corpus_bleu(hyps: &[TokenSequence], refs: &[TokenSequence]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::invalid(format!("{} hypotheses but {} references", hyps.len(), refs.len())));
    }
    if hyps.is_empty() {
        return Err(Error::invalid("BLEU of an empty corpus"));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    for (h, r) in hyps.iter().zip(refs) {
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (gram, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(gram).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    let hyp_len: usize = hyps.iter().map(|h| h.len()).sum();
    let ref_len: usize = refs.iter().map(|r| r.len()).sum();
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let (mut log_sum, mut orders) = (0.0, 0);
    for (&m, &t) in matches.iter().zip(&totals) {
        if t == 0 {
            continue;
        }
        let m = if m == 0 { BLEU_EPSILON } else { m as f64 };
        log_sum += (m / t as f64).ln();
        orders += 1;
    }
    let bp = if hyp_len >= ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    Ok(100.0 * bp * (log_sum / orders as f64).exp())
}

/// Encodes a corpus in chunks.
pub fn encode_all(model: &SeqAutoencoder, seqs: &[TokenSequence]) -> Result<Vec<LatentCode>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(CHUNK) {
        out.extend(model.encode_batch(chunk)?);
    }
    Ok(out)
}

pub fn decode_all(model: &SeqAutoencoder, codes: &[LatentCode]) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::with_capacity(codes.len());
    for chunk in codes.chunks(CHUNK) {
        out.extend(model.decode_greedy_batch(chunk, model.config.max_len)?);
    }
    Ok(out)
}

/// Greedy reconstructions with the encoder reading clean inputs.
pub fn reconstruct_all(model: &SeqAutoencoder, seqs: &[TokenSequence]) -> Result<Vec<TokenSequence>> {
    decode_all(model, &encode_all(model, seqs)?)
}

pub fn sample_prior<R: Rng>(model: &SeqAutoencoder, count: usize, rng: &mut R) -> Result<Vec<TokenSequence>> {
    let z = standard_normal(count, model.config.latent_dim, rng);
    let codes: Vec<LatentCode> = (0..count).map(|r| LatentCode(z.row(r).to_vec())).collect();
    decode_all(model, &codes)
}

/// `exp(total NLL / total tokens)`, end tokens included.
pub fn perplexity(lm: &LanguageModel, corpus: &[TokenSequence]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::invalid("perplexity of an empty corpus"));
    }
    let (mut nll, mut tokens) = (0.0, 0usize);
    for chunk in corpus.chunks(CHUNK) {
        nll -= lm.log_likelihood_batch(chunk)?.iter().sum::<f64>();
        tokens += chunk.iter().map(|s| s.len() + 1).sum::<usize>();
    }
    Ok((nll / tokens as f64).exp())
}

/// Trains a fresh language model on `train` and returns its perplexity on `eval`.
pub fn lm_perplexity(config: ModelConfig, lm_cfg: &LmConfig, train: &[TokenSequence], eval: &[TokenSequence]) -> Result<f64> {
    let mut lm = LanguageModel::new(config, &mut SeededRng::seed_from_u64(lm_cfg.seed))?;
    train_language_model(&mut lm, &Corpus::new(train.to_vec()), lm_cfg)?;
    perplexity(&lm, eval)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplReport {
    pub forward: f64,
    /// `+inf` when every generated sequence is empty.
    pub reverse: f64,
    pub degenerate: bool,
    pub samples: Vec<TokenSequence>,
}

/// Forward PPL: LM trained on `real`, scored on prior samples decoded by the
/// model. Reverse PPL: LM trained on those samples, scored on `real`.
pub fn forward_reverse_ppl(
    model: &SeqAutoencoder,
    real: &[TokenSequence],
    sample_count: usize,
    lm_model: ModelConfig,
    lm_cfg: &LmConfig,
    seed: u64,
) -> Result<PplReport> {
    if sample_count == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let samples = sample_prior(model, sample_count, &mut SeededRng::seed_from_u64(seed))?;
    let forward = lm_perplexity(lm_model, lm_cfg, real, &samples)?;
    let degenerate = samples.iter().all(|s| s.is_empty());
    let reverse = if degenerate { f64::INFINITY } else { lm_perplexity(lm_model, lm_cfg, &samples, real)? };
    Ok(PplReport { forward, reverse, degenerate, samples })
}

/// Greedy decodes along the segment from `x2` (first) to `x1` (last),
/// at `t = i/(steps-1)` with code `t·z1 + (1−t)·z2`.
pub fn interpolate(model: &SeqAutoencoder, x1: &TokenSequence, x2: &TokenSequence, steps: usize) -> Result<Vec<TokenSequence>> {
    if steps < 2 {
        return Err(Error::invalid(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    let z = model.encode_batch(&[x1.clone(), x2.clone()])?;
    let last = (steps - 1) as f64;
    let codes: Vec<LatentCode> = (0..steps)
        .map(|i| {
            // Weights computed separately so swapping the endpoints is exact.
            let (w1, w2) = (i as f64 / last, (steps - 1 - i) as f64 / last);
            LatentCode(z[0].0.iter().zip(&z[1].0).map(|(a, b)| w1 * a + w2 * b).collect())
        })
        .collect();
    decode_all(model, &codes)
}

fn mean_code(codes: &[LatentCode]) -> LatentCode {
    let d = codes[0].dim();
    let mut sum = vec![0.0; d];
    for c in codes {
        for (s, v) in sum.iter_mut().zip(&c.0) {
            *s += v;
        }
    }
    LatentCode(sum.into_iter().map(|s| s / codes.len() as f64).collect())
}

/// Mean code of `positive` minus mean code of `negative`.
pub fn attribute_vector(model: &SeqAutoencoder, positive: &[TokenSequence], negative: &[TokenSequence]) -> Result<LatentCode> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::invalid("attribute vector needs examples on both sides"));
    }
    let p = mean_code(&encode_all(model, positive)?);
    let n = mean_code(&encode_all(model, negative)?);
    Ok(LatentCode(p.0.iter().zip(&n.0).map(|(a, b)| a - b).collect()))
}

/// Greedy decoding of `encode(x) + scale·v`.
pub fn apply_offset(model: &SeqAutoencoder, x: &TokenSequence, v: &LatentCode, scale: f64) -> Result<TokenSequence> {
    if !scale.is_finite() {
        return Err(Error::invalid(format!("offset scale must be finite, got {scale}")));
    }
    let z = model.encode(x)?;
    if v.dim() != z.dim() {
        return Err(Error::invalid(format!("offset of dimension {} for codes of dimension {}", v.dim(), z.dim())));
    }
    model.decode_greedy(&z.offset(v, scale), model.config.max_len)
}

/// One evaluation run, serialized as a single JSON line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    /// Manifest hash of the evaluated checkpoint, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_hash: Option<String>,
    pub metrics: BTreeMap<String, f64>,
    pub params: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn new(model: impl Into<String>) -> Self {
        EvalReport { model: model.into(), ..Self::default() }
    }

    /// Records a metric; non-finite values become a warning instead.
    pub fn metric(&mut self, name: impl Into<String>, value: f64) {
        let name = name.into();
        if value.is_finite() {
            self.metrics.insert(name, value);
        } else {
            self.warnings.push(format!("{name} is {value}"));
        }
    }

    pub fn param(&mut self, name: impl Into<String>, value: impl Serialize) -> Result<()> {
        self.params.insert(name.into(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn append_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "{}", self.to_json_line()?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::{CellKind, Init};

    fn seq(ids: &[usize]) -> TokenSequence {
        TokenSequence(ids.to_vec())
    }

    fn words(s: &str) -> TokenSequence {
        // Letters a.. map to ids 5..
        TokenSequence(s.split_whitespace().map(|w| 5 + (w.as_bytes()[0] - b'a') as usize).collect())
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(normalized_edit_distance(&[5, 6, 7], &[5, 6, 7]), 0.0);
        assert_eq!(normalized_edit_distance(&[5; 5], &[6; 5]), 1.0);
        let d = normalized_edit_distance(&words("k i t t e n"), &words("s i t t i n g"));
        assert!((d - 3.0 / 7.0).abs() < 1e-12);
        assert_eq!(normalized_edit_distance(&[], &[]), 0.0);
    }

    #[test]
    fn edit_distance_is_symmetric_with_identity_on_short_binary() {
        let all: Vec<Vec<usize>> = (0..=4)
            .flat_map(|len| (0..1usize << len).map(move |bits| (0..len).map(|i| 5 + ((bits >> i) & 1)).collect()))
            .collect();
        for a in &all {
            for b in &all {
                let d = normalized_edit_distance(a, b);
                assert_eq!(d, normalized_edit_distance(b, a));
                assert_eq!(d == 0.0, a == b);
            }
        }
    }

    #[test]
    fn levenshtein_triangle_inequality() {
        let mut rng = SeededRng::seed_from_u64(3);
        let rand_seq = |rng: &mut SeededRng| (0..rng.random_range(0..8)).map(|_| rng.random_range(5..8)).collect::<Vec<usize>>();
        for _ in 0..500 {
            let (a, b, c) = (rand_seq(&mut rng), rand_seq(&mut rng), rand_seq(&mut rng));
            assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        }
    }

    #[test]
    fn bleu_examples() {
        let h = vec![words("a b c d"), words("e f g h i")];
        assert_eq!(corpus_bleu(&h, &h).unwrap(), 100.0);
        let b = corpus_bleu(&[words("a b c d")], &[words("a b c d e")]).unwrap();
        assert!((b - 100.0 * (1.0f64 - 1.25).exp()).abs() < 1e-9);
        assert!((b - 77.88).abs() < 0.01);
        let zero = corpus_bleu(&[words("a b c d")], &[words("e f g h")]).unwrap();
        assert!(zero < 1e-6);
        let short = vec![words("a"), words("b c")];
        assert_eq!(corpus_bleu(&short, &short).unwrap(), 100.0);
        assert!(corpus_bleu(&[], &[]).is_err());
    }

    fn line_latents(n: usize) -> Vec<LatentCode> {
        (0..n).map(|i| LatentCode(vec![i as f64, 0.0])).collect()
    }

    #[test]
    fn recall_is_one_when_rankings_agree() {
        // Sequence i is i sixes then fives, so edit distance is |i - j| / 30,
        // ordered exactly like the latent line.
        let seqs: Vec<TokenSequence> = (0..30).map(|i| TokenSequence([vec![6; i], vec![5; 30 - i]].concat())).collect();
        assert_eq!(normalized_edit_distance(&seqs[3], &seqs[10]), 7.0 / 30.0);
        let r = recall_at_k(&seqs, &line_latents(30), 10).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn recall_is_monotone_in_k_and_validates_k() {
        let mut rng = SeededRng::seed_from_u64(1);
        let seqs: Vec<TokenSequence> =
            (0..40).map(|_| TokenSequence((0..6).map(|_| rng.random_range(5..9)).collect())).collect();
        let z: Vec<LatentCode> = (0..40).map(|_| LatentCode(vec![rng.random(), rng.random()])).collect();
        let curve = recall_curve(&seqs, &z, &[10, 20, 30, 39], &RecallConfig::default()).unwrap();
        assert!(curve.windows(2).all(|w| w[0] <= w[1]), "{curve:?}");
        assert!((curve[3] - 1.0).abs() < 1e-12);
        assert!(recall_at_k(&seqs, &z, 40).is_err());
    }

    #[test]
    fn purity_examples() {
        let z: Vec<LatentCode> = (0..20).map(|i| LatentCode(vec![(i / 10) as f64 * 100.0 + (i % 10) as f64 * 0.01])).collect();
        let labels: Vec<usize> = (0..20).map(|i| i / 10).collect();
        assert_eq!(knn_label_purity(&z, &labels, 5).unwrap(), 1.0);
        assert!(knn_label_purity(&z, &labels, 20).is_err());
    }

    fn tiny_model() -> SeqAutoencoder {
        let cfg = ModelConfig { vocab_size: 9, embed_dim: 4, hidden_dim: 6, latent_dim: 2, disc_hidden: 4, max_len: 6, cell: CellKind::Gru, init: Init::Uniform };
        SeqAutoencoder::new(cfg, false, &mut SeededRng::seed_from_u64(2)).unwrap()
    }

    #[test]
    fn interpolation_endpoints_and_symmetry() {
        let m = tiny_model();
        let (a, b) = (seq(&[5, 6, 7]), seq(&[8, 8]));
        let path = interpolate(&m, &a, &b, 7).unwrap();
        assert_eq!(path.len(), 7);
        assert_eq!(path[6], m.decode_greedy(&m.encode(&a).unwrap(), 6).unwrap());
        assert_eq!(path[0], m.decode_greedy(&m.encode(&b).unwrap(), 6).unwrap());
        let mut back = interpolate(&m, &b, &a, 7).unwrap();
        back.reverse();
        assert_eq!(path, back);
        assert!(interpolate(&m, &a, &b, 1).is_err());
    }

    #[test]
    fn attribute_vector_properties() {
        let m = tiny_model();
        let pos = vec![seq(&[5, 6]), seq(&[7])];
        let neg = vec![seq(&[8, 8, 5])];
        assert!(attribute_vector(&m, &pos, &pos).unwrap().0.iter().all(|&v| v == 0.0));
        let v = attribute_vector(&m, &pos, &neg).unwrap();
        let w = attribute_vector(&m, &neg, &pos).unwrap();
        assert!(v.0.iter().zip(&w.0).all(|(a, b)| *a == -*b));
        assert!(attribute_vector(&m, &[], &neg).is_err());
        let x = seq(&[5, 7]);
        assert_eq!(apply_offset(&m, &x, &v, 0.0).unwrap(), m.reconstruct(&[x.clone()]).unwrap()[0]);
        assert_eq!(apply_offset(&m, &x, &v, 1.5).unwrap(), apply_offset(&m, &x, &v, 1.5).unwrap());
    }

    #[test]
    fn uniform_lm_perplexity_is_vocab_size() {
        let cfg = ModelConfig { vocab_size: 12, embed_dim: 4, hidden_dim: 6, latent_dim: 2, disc_hidden: 4, max_len: 10, cell: CellKind::Gru, init: Init::Uniform };
        let mut lm = LanguageModel::new(cfg, &mut SeededRng::seed_from_u64(0)).unwrap();
        lm.zero_output_layer();
        let ppl = perplexity(&lm, &[seq(&[5, 6, 7]), seq(&[9])]).unwrap();
        assert!((ppl - 12.0).abs() < 1e-9);
    }

    #[test]
    fn report_keeps_only_finite_metrics() {
        let mut r = EvalReport::new("m");
        r.metric("bleu", 50.0);
        r.metric("reverse_ppl", f64::INFINITY);
        r.param("k", [10, 20]).unwrap();
        let line = r.to_json_line().unwrap();
        let back: EvalReport = serde_json::from_str(&line).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.metrics.len(), 1);
        assert_eq!(r.warnings.len(), 1);
    }
}
