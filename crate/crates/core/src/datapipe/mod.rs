//! Synthetic sequence-to-sequence tasks, batching and embedding files.

mod bleu;
mod embeddings;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bleu::{bleu, Bleu};
pub use embeddings::{load_embeddings, save_embeddings, PretrainedEmbeddings, EMBEDDING_MAGIC};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// First id available to task content.
pub const FIRST_CONTENT: usize = 4;
pub const MIN_VOCAB: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
}

impl TaskKind {
    /// Target sequence for `src` (content tokens only).
    pub fn apply(self, src: &[usize]) -> Vec<usize> {
        let mut out = src.to_vec();
        match self {
            TaskKind::Copy => {}
            TaskKind::Reverse => out.reverse(),
            TaskKind::Sort => out.sort_unstable(),
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_samples: usize,
    pub valid_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < MIN_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size must be at least {MIN_VOCAB}, got {}",
                self.vocab_size
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "empty length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    /// Number of distinct sources the spec can produce, saturating.
    fn capacity(&self) -> u128 {
        let symbols = (self.vocab_size - FIRST_CONTENT) as u128;
        (self.min_len..=self.max_len)
            .map(|l| symbols.saturating_pow(l as u32))
            .fold(0u128, u128::saturating_add)
    }
}

/// One source/target pair of content tokens (no specials).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

/// Builds train/valid/test splits. Each split draws from its own ChaCha
/// stream; sources already present in an earlier split are redrawn, so the
/// splits never share a source sequence.
pub fn generate_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let wanted = (spec.train_samples + spec.valid_samples + spec.test_samples) as u128;
    if spec.capacity() < wanted {
        return Err(Error::Config(format!(
            "task can produce at most {} distinct sources, {wanted} requested",
            spec.capacity()
        )));
    }
    let mut seen = HashSet::new();
    // Test first so held-out data is independent of the train size.
    let test = draw_split(spec, 0, spec.test_samples, &mut seen);
    let valid = draw_split(spec, 1, spec.valid_samples, &mut seen);
    let train = draw_split(spec, 2, spec.train_samples, &mut seen);
    Ok(Dataset { train, valid, test })
}

fn draw_split(spec: &TaskSpec, stream: u64, count: usize, seen: &mut HashSet<Vec<usize>>) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let len = rng.gen_range(spec.min_len as u32..=spec.max_len as u32) as usize;
        let src: Vec<usize> = (0..len)
            .map(|_| rng.gen_range(FIRST_CONTENT as u32..spec.vocab_size as u32) as usize)
            .collect();
        if seen.insert(src.clone()) {
            let tgt = spec.kind.apply(&src);
            out.push(Example { src, tgt });
        }
    }
    out
}

/// Row-major padded token matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokens {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<usize>,
}

impl Tokens {
    /// Right-pads each row with [`PAD`] to the longest row.
    pub fn from_rows<R: AsRef<[usize]>>(rows: &[R]) -> Tokens {
        let len = rows.iter().map(|r| r.as_ref().len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * len);
        for r in rows {
            let r = r.as_ref();
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat_n(PAD, len - r.len()));
        }
        Tokens {
            batch: rows.len(),
            len,
            ids,
        }
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.len..(i + 1) * self.len]
    }

    /// `true` where the token is padding.
    pub fn padding_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&t| t == PAD).collect()
    }
}

/// A training/evaluation batch.
///
/// `src` rows are `content + EOS`; `tgt_in` rows are `BOS + target`;
/// `tgt_out` rows are `target + EOS`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub src: Tokens,
    pub tgt_in: Tokens,
    pub tgt_out: Tokens,
}

pub fn source_row(content: &[usize]) -> Vec<usize> {
    let mut row = content.to_vec();
    row.push(EOS);
    row
}

impl Batch {
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Batch {
        let mut src = Vec::new();
        let mut tgt_in = Vec::new();
        let mut tgt_out = Vec::new();
        for ex in examples {
            src.push(source_row(&ex.src));
            let mut i = vec![BOS];
            i.extend_from_slice(&ex.tgt);
            tgt_in.push(i);
            tgt_out.push(source_row(&ex.tgt));
        }
        Batch {
            src: Tokens::from_rows(&src),
            tgt_in: Tokens::from_rows(&tgt_in),
            tgt_out: Tokens::from_rows(&tgt_out),
        }
    }

    pub fn size(&self) -> usize {
        self.src.batch
    }
}

/// Uniform sampler of training batches, single consumer.
pub struct BatchSampler<'a> {
    examples: &'a [Example],
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> BatchSampler<'a> {
    pub fn new(examples: &'a [Example], batch_size: usize, seed: u64) -> Self {
        let mut s = BatchSampler {
            examples,
            batch_size: batch_size.max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..examples.len()).collect(),
            cursor: examples.len(),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    fn advance(&mut self) -> std::ops::Range<usize> {
        if self.cursor + self.batch_size > self.order.len() {
            self.reshuffle();
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let range = self.cursor..end;
        self.cursor = end;
        range
    }

    /// Next batch; the example order is reshuffled after every epoch.
    pub fn next_batch(&mut self) -> Batch {
        let range = self.advance();
        Batch::from_examples(self.order[range].iter().map(|&i| &self.examples[i]))
    }

    /// Advances past `n` batches without building them.
    pub fn skip(&mut self, n: usize) {
        for _ in 0..n {
            self.advance();
        }
    }
}

/// Splits `examples` into consecutive batches of at most `batch_size`.
pub fn eval_batches(examples: &[Example], batch_size: usize) -> Vec<Batch> {
    examples
        .chunks(batch_size.max(1))
        .map(Batch::from_examples)
        .collect()
}
