//! Vocabulary, corpus ingestion, batching and the clustered binary-sequence generator.

use std::collections::HashMap;
use std::fs;
use std::ops::Deref;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::SeededRng;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const MASK: usize = 4;
pub const NUM_SPECIAL: usize = 5;

const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["<pad>", "<bos>", "<eos>", "<unk>", "<mask>"];

/// Token ids of one unframed sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<usize>);

impl Deref for TokenSequence {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for TokenSequence {
    fn from(ids: Vec<usize>) -> Self {
        TokenSequence(ids)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Vocabulary holding the reserved tokens followed by `tokens` in order.
    /// Duplicates and reserved names are rejected.
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Result<Self> {
        let mut all: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.iter().map(|t| t.as_ref().to_string()));
        let index = Self::index_of(&all)?;
        Ok(Vocab { tokens: all, index })
    }

    fn index_of(tokens: &[String]) -> Result<HashMap<String, usize>> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if i < NUM_SPECIAL && t != SPECIAL_TOKENS[i] {
                return Err(Error::invalid(format!("reserved id {i} must be {}", SPECIAL_TOKENS[i])));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(index)
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn from_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIAL {
            return Err(Error::invalid("vocabulary is missing reserved tokens"));
        }
        let index = Self::index_of(&tokens)?;
        Ok(Vocab { tokens, index })
    }

    /// The two-symbol alphabet `"0"`, `"1"` at ids 5 and 6.
    pub fn binary() -> Self {
        Self::from_tokens(&["0", "1"]).expect("static vocabulary")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Number of non-reserved tokens.
    pub fn content_len(&self) -> usize {
        self.tokens.len() - NUM_SPECIAL
    }

    /// True when the only content symbols are `"0"` and `"1"`.
    pub fn is_binary(&self) -> bool {
        self.content_len() == 2 && self.index.contains_key("0") && self.index.contains_key("1")
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(SPECIAL_TOKENS[UNK])
    }

    pub fn encode_line(&self, line: &str) -> TokenSequence {
        TokenSequence(line.split_whitespace().map(|t| self.id(t)).collect())
    }

    pub fn decode(&self, seq: &[usize]) -> String {
        seq.iter().map(|&id| self.token(id)).collect::<Vec<_>>().join(" ")
    }
}

/// Counts whitespace tokens and keeps those seen at least `min_count` times,
/// ordered by descending count then lexicographically.
pub fn build_vocab<S: AsRef<str>>(lines: &[S], min_count: usize) -> Result<Vocab> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for line in lines {
        for tok in line.as_ref().split_whitespace() {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_count.max(1) && !SPECIAL_TOKENS.contains(&t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens: Vec<&str> = kept.into_iter().map(|(t, _)| t).collect();
    Vocab::from_tokens(&tokens)
}

/// Sequences with optional line-aligned labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub sequences: Vec<TokenSequence>,
    pub labels: Option<Vec<String>>,
}

impl Corpus {
    pub fn new(sequences: Vec<TokenSequence>) -> Self {
        Corpus { sequences, labels: None }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.sequences.len() {
            return Err(Error::invalid(format!(
                "label count {} does not match corpus size {}",
                labels.len(),
                self.sequences.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Items whose label equals `label`, in corpus order.
    pub fn filter_label(&self, label: &str, limit: usize) -> Vec<TokenSequence> {
        let Some(labels) = &self.labels else { return Vec::new() };
        self.sequences
            .iter()
            .zip(labels)
            .filter(|(_, l)| l.as_str() == label)
            .map(|(s, _)| s.clone())
            .take(limit)
            .collect()
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads one sequence per line; empty lines are dropped and long lines truncated to `max_len`.
pub fn load_corpus(path: impl AsRef<Path>, vocab: &Vocab, max_len: usize) -> Result<Corpus> {
    if max_len == 0 {
        return Err(Error::invalid("max length must be at least 1"));
    }
    let text = read_text(path.as_ref())?;
    Ok(parse_corpus(&text, vocab, max_len))
}

pub fn parse_corpus(text: &str, vocab: &Vocab, max_len: usize) -> Corpus {
    let sequences = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut s = vocab.encode_line(l);
            s.0.truncate(max_len);
            s
        })
        .collect();
    Corpus::new(sequences)
}

/// Reads the raw non-empty lines of a text file.
pub fn read_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let text = read_text(path.as_ref())?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

/// Reads a label sidecar; one label per line, aligned with the corpus file.
pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let text = read_text(path.as_ref())?;
    Ok(text.lines().map(|l| l.trim().to_string()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSpec {
    pub num_clusters: usize,
    pub per_cluster: usize,
    pub length: usize,
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec { num_clusters: 5, per_cluster: 100, length: 50, flip_prob: 0.2, seed: 0 }
    }
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clusters == 0 || self.per_cluster == 0 || self.length == 0 {
            return Err(Error::invalid("cluster counts and length must be positive"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid(format!("flip probability {} outside [0,1]", self.flip_prob)));
        }
        Ok(())
    }
}

/// Binary sequences drawn around random centers, with their cluster ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredDataset {
    pub centers: Vec<Vec<u8>>,
    pub sequences: Vec<Vec<u8>>,
    pub labels: Vec<usize>,
}

pub fn generate_clustered_dataset(spec: &ClusterSpec) -> Result<ClusteredDataset> {
    spec.validate()?;
    let mut rng = SeededRng::seed_from_u64(spec.seed);
    let centers: Vec<Vec<u8>> = (0..spec.num_clusters)
        .map(|_| (0..spec.length).map(|_| rng.random_range(0..2u8)).collect())
        .collect();
    let mut sequences = Vec::with_capacity(spec.num_clusters * spec.per_cluster);
    let mut labels = Vec::with_capacity(sequences.capacity());
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.per_cluster {
            let seq = center
                .iter()
                .map(|&b| if rng.random_bool(spec.flip_prob) { 1 - b } else { b })
                .collect();
            sequences.push(seq);
            labels.push(c);
        }
    }
    Ok(ClusteredDataset { centers, sequences, labels })
}

impl ClusteredDataset {
    pub fn lines(&self) -> Vec<String> {
        self.sequences
            .iter()
            .map(|s| s.iter().map(|b| if *b == 0 { "0" } else { "1" }).collect::<Vec<_>>().join(" "))
            .collect()
    }

    /// Corpus over [`Vocab::binary`] with the cluster ids as labels.
    pub fn to_corpus(&self) -> Corpus {
        let vocab = Vocab::binary();
        let sequences = self
            .sequences
            .iter()
            .map(|s| TokenSequence(s.iter().map(|&b| vocab.id(if b == 0 { "0" } else { "1" })).collect()))
            .collect();
        Corpus { sequences, labels: Some(self.labels.iter().map(usize::to_string).collect()) }
    }
}

pub fn hamming(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Padded view of a batch: row-major ids `[rows, width]` and a 0/1 mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<f64>,
    pub rows: usize,
    pub width: usize,
}

impl PaddedBatch {
    pub fn from_sequences(seqs: &[TokenSequence]) -> Self {
        let rows = seqs.len();
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = vec![PAD; rows * width];
        let mut mask = vec![0.0; rows * width];
        for (r, s) in seqs.iter().enumerate() {
            for (c, &id) in s.iter().enumerate() {
                ids[r * width + c] = id;
                mask[r * width + c] = 1.0;
            }
        }
        PaddedBatch { ids, mask, rows, width }
    }

    /// Ids at time step `t` for every row.
    pub fn column(&self, t: usize) -> Vec<usize> {
        (0..self.rows).map(|r| self.ids[r * self.width + t]).collect()
    }

    pub fn mask_column(&self, t: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.mask[r * self.width + t]).collect()
    }

    pub fn mask_sums(&self) -> Vec<f64> {
        self.mask.chunks(self.width.max(1)).map(|r| r.iter().sum()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Positions of the batch members in the source corpus.
    pub indices: Vec<usize>,
    pub sequences: Vec<TokenSequence>,
}

impl Batch {
    pub fn padded(&self) -> PaddedBatch {
        PaddedBatch::from_sequences(&self.sequences)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Splits a corpus into batches. `shuffle_seed = None` keeps corpus order.
pub fn batches(corpus: &Corpus, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut SeededRng::seed_from_u64(seed));
    }
    Ok(order
        .chunks(batch_size)
        .map(|idx| Batch {
            indices: idx.to_vec(),
            sequences: idx.iter().map(|&i| corpus.sequences[i].clone()).collect(),
        })
        .collect())
}
