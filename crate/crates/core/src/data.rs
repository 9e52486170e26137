//! Deterministic token streams for training and validation.
//!
//! The synthetic source samples from a fixed sparse Markov chain, so a model
//! has real structure to learn without any external data. The byte source
//! reads any file and treats each byte as a token.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `[rows, width]` matrix of token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenBatch {
    pub rows: usize,
    pub width: usize,
    pub tokens: Vec<u32>,
}

impl TokenBatch {
    pub fn new(rows: usize, width: usize, tokens: Vec<u32>) -> Result<Self> {
        if tokens.len() != rows * width {
            return Err(Error::Input(format!(
                "{} tokens for a {rows}x{width} batch",
                tokens.len()
            )));
        }
        Ok(Self {
            rows,
            width,
            tokens,
        })
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.tokens[r * self.width..(r + 1) * self.width]
    }

    /// Model inputs: every column but the last, flattened row-major.
    pub fn inputs(&self) -> Vec<usize> {
        (0..self.rows)
            .flat_map(|r| self.row(r)[..self.width - 1].iter().map(|&t| t as usize))
            .collect()
    }

    /// Next-token targets: every column but the first.
    pub fn targets(&self) -> Vec<usize> {
        (0..self.rows)
            .flat_map(|r| self.row(r)[1..].iter().map(|&t| t as usize))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    SyntheticMarkov,
    BytesCorpus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: SourceKind,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of the corpus used for training (byte source only).
    pub split_fraction: f32,
    /// Successors per state in the synthetic chain.
    pub branching: usize,
    pub corpus_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: SourceKind::SyntheticMarkov,
            batch_size: 8,
            seed: 1234,
            split_fraction: 0.9,
            branching: 4,
            corpus_path: None,
        }
    }
}

/// Sparse random Markov chain over `vocab` states.
#[derive(Clone, Debug)]
pub struct MarkovChain {
    /// Per state: `(successor, cumulative probability)`.
    transitions: Vec<Vec<(u32, f64)>>,
    stationary: Vec<f64>,
}

impl MarkovChain {
    pub fn new(vocab: usize, branching: usize, seed: u64) -> Result<Self> {
        if vocab < 2 || branching == 0 {
            return Err(Error::Config(format!(
                "Markov chain needs vocab >= 2 and branching >= 1, got {vocab}/{branching}"
            )));
        }
        let branching = branching.min(vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_726b_6f76);
        let mut transitions = Vec::with_capacity(vocab);
        for s in 0..vocab {
            // The ring edge s -> s+1 keeps the chain irreducible.
            let mut succ = vec![((s + 1) % vocab) as u32];
            while succ.len() < branching {
                let c = rng.gen_range(0..vocab) as u32;
                if !succ.contains(&c) {
                    succ.push(c);
                }
            }
            let weights: Vec<f64> = succ
                .iter()
                .map(|_| -rng.gen_range(f64::EPSILON..1.0f64).ln())
                .collect();
            let total: f64 = weights.iter().sum();
            let mut acc = 0.0;
            let row = succ
                .into_iter()
                .zip(weights)
                .map(|(c, w)| {
                    acc += w / total;
                    (c, acc)
                })
                .collect();
            transitions.push(row);
        }
        let mut chain = Self {
            transitions,
            stationary: Vec::new(),
        };
        chain.stationary = chain.power_iterate_stationary(10_000, 1e-13);
        Ok(chain)
    }

    pub fn vocab(&self) -> usize {
        self.transitions.len()
    }

    /// Transition probability `P(to | from)`.
    pub fn prob(&self, from: usize, to: usize) -> f64 {
        let mut prev = 0.0;
        for &(c, cum) in &self.transitions[from] {
            if c as usize == to {
                return cum - prev;
            }
            prev = cum;
        }
        0.0
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    /// Stationary distribution of the lazy chain `(P + I)/2`, which shares
    /// the fixed point of `P` and is aperiodic.
    fn power_iterate_stationary(&self, iters: usize, tol: f64) -> Vec<f64> {
        let n = self.vocab();
        let mut pi = vec![1.0 / n as f64; n];
        for _ in 0..iters {
            let mut next: Vec<f64> = pi.iter().map(|p| 0.5 * p).collect();
            for (s, row) in self.transitions.iter().enumerate() {
                let mut prev = 0.0;
                for &(c, cum) in row {
                    next[c as usize] += 0.5 * pi[s] * (cum - prev);
                    prev = cum;
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < tol {
                break;
            }
        }
        pi
    }

    fn sample_from(cum: impl Iterator<Item = (u32, f64)>, u: f64) -> u32 {
        let mut last = 0;
        for (c, p) in cum {
            last = c;
            if u < p {
                return c;
            }
        }
        last
    }

    fn start_state(&self, rng: &mut ChaCha8Rng) -> u32 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        Self::sample_from(
            self.stationary.iter().enumerate().map(|(i, p)| {
                acc += p;
                (i as u32, acc)
            }),
            u,
        )
    }

    fn step(&self, state: u32, rng: &mut ChaCha8Rng) -> u32 {
        let u: f64 = rng.gen();
        Self::sample_from(self.transitions[state as usize].iter().copied(), u)
    }

    /// A sequence of `len` tokens started from the stationary distribution.
    pub fn sample_sequence(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
        let mut seq = Vec::with_capacity(len);
        let mut s = self.start_state(rng);
        for _ in 0..len {
            seq.push(s);
            s = self.step(s, rng);
        }
        seq
    }
}

enum Backing {
    Markov(MarkovChain),
    Bytes { bytes: Vec<u8>, split_at: usize },
}

/// Deterministic batch generator with disjoint train and validation streams.
pub struct BatchSource {
    cfg: DataConfig,
    vocab: usize,
    width: usize,
    backing: Backing,
    cursor: [u64; 2],
}

impl BatchSource {
    /// Batches have `seq_len + 1` columns so that inputs and shifted targets
    /// both span `seq_len` positions.
    pub fn new(cfg: &DataConfig, vocab: usize, seq_len: usize) -> Result<Self> {
        if cfg.batch_size == 0 || seq_len == 0 {
            return Err(Error::Config(
                "batch size and sequence length must be positive".into(),
            ));
        }
        let width = seq_len + 1;
        let backing = match cfg.kind {
            SourceKind::SyntheticMarkov => {
                Backing::Markov(MarkovChain::new(vocab, cfg.branching, cfg.seed)?)
            }
            SourceKind::BytesCorpus => {
                let path = cfg
                    .corpus_path
                    .as_deref()
                    .ok_or_else(|| Error::Config("bytes_corpus source needs corpus_path".into()))?;
                if vocab < 256 {
                    return Err(Error::Config(format!(
                        "byte corpus needs vocab >= 256, got {vocab}"
                    )));
                }
                let bytes = read_corpus(path)?;
                if !(0.0..1.0).contains(&cfg.split_fraction) || cfg.split_fraction <= 0.0 {
                    return Err(Error::Config(format!(
                        "split_fraction must lie in (0, 1), got {}",
                        cfg.split_fraction
                    )));
                }
                let split_at = (bytes.len() as f64 * f64::from(cfg.split_fraction)) as usize;
                if split_at < width || bytes.len() - split_at < width {
                    return Err(Error::Config(format!(
                        "corpus of {} bytes is too small for windows of {width}",
                        bytes.len()
                    )));
                }
                Backing::Bytes { bytes, split_at }
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            width,
            backing,
            cursor: [0, 0],
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn chain(&self) -> Option<&MarkovChain> {
        match &self.backing {
            Backing::Markov(c) => Some(c),
            Backing::Bytes { .. } => None,
        }
    }

    /// The next batch of `split`, advancing that split's cursor.
    pub fn next_batch(&mut self, split: Split) -> TokenBatch {
        let slot = split as usize;
        let idx = self.cursor[slot];
        self.cursor[slot] += 1;
        self.batch_at(split, idx)
    }

    /// Batch number `index` of `split`; a pure function of
    /// `(seed, split, index)`.
    pub fn batch_at(&self, split: Split, index: u64) -> TokenBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(((split as u64) << 62) | index);
        let rows = self.cfg.batch_size;
        let mut tokens = Vec::with_capacity(rows * self.width);
        for _ in 0..rows {
            match &self.backing {
                Backing::Markov(chain) => loop {
                    let seq = chain.sample_sequence(self.width, &mut rng);
                    if sequence_split(&seq) == split {
                        tokens.extend(seq);
                        break;
                    }
                },
                Backing::Bytes { bytes, split_at } => {
                    let (lo, hi) = match split {
                        Split::Train => (0, *split_at),
                        Split::Val => (*split_at, bytes.len()),
                    };
                    let start = rng.gen_range(lo..=hi - self.width);
                    tokens.extend(
                        bytes[start..start + self.width]
                            .iter()
                            .map(|&b| u32::from(b)),
                    );
                }
            }
        }
        TokenBatch {
            rows,
            width: self.width,
            tokens,
        }
    }
}

/// Hash-based ownership of a synthetic sequence; each sequence belongs to
/// exactly one split, so the two streams cannot share one.
pub fn sequence_split(seq: &[u32]) -> Split {
    let mut h = DefaultHasher::new();
    seq.hash(&mut h);
    if h.finish() & 1 == 0 {
        Split::Train
    } else {
        Split::Val
    }
}

fn read_corpus(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
