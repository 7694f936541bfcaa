use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::{FIRST_CONTENT_TOKEN, PAD};

/// Synthetic sequence-to-sequence task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    /// `target_i = source_{i-k}`, with the first `k` positions padded.
    Shift,
    /// Adjacent pairs swapped; a trailing odd token stays in place.
    LocalSwap,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Shift => "shift",
            TaskKind::LocalSwap => "local_swap",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "shift" => Ok(TaskKind::Shift),
            "local_swap" => Ok(TaskKind::LocalSwap),
            other => Err(crate::Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Shift distance for [`TaskKind::Shift`].
    pub shift: usize,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

/// One source/target pair of content tokens (no start or end tokens).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub pairs: Vec<Pair>,
}

impl Batch {
    /// Sources padded to a common length with `PAD`, plus `true` on real tokens.
    pub fn padded_sources(&self) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
        pad(self.pairs.iter().map(|p| &p.source))
    }

    pub fn padded_targets(&self) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
        pad(self.pairs.iter().map(|p| &p.target))
    }
}

fn pad<'a>(seqs: impl Iterator<Item = &'a Vec<usize>> + Clone) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let width = seqs.clone().map(Vec::len).max().unwrap_or(0);
    seqs.map(|s| {
        let mut ids = s.clone();
        ids.resize(width, PAD);
        let mask = (0..width).map(|i| i < s.len()).collect();
        (ids, mask)
    })
    .unzip()
}

impl TaskSpec {
    pub fn new(kind: TaskKind, vocab_size: usize, min_len: usize, max_len: usize, seed: u64) -> Self {
        Self { kind, shift: 1, vocab_size, min_len, max_len, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= FIRST_CONTENT_TOKEN {
            return Err(contract(format!(
                "vocab_size {} leaves no content tokens (ids below {FIRST_CONTENT_TOKEN} are reserved)",
                self.vocab_size
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(contract(format!("invalid length range [{}, {}]", self.min_len, self.max_len)));
        }
        if self.kind == TaskKind::Shift && (self.shift == 0 || self.shift >= self.min_len) {
            return Err(contract(format!(
                "shift {} must be in [1, min_len) = [1, {})",
                self.shift, self.min_len
            )));
        }
        Ok(())
    }

    pub fn target_for(&self, source: &[usize]) -> Vec<usize> {
        match self.kind {
            TaskKind::Copy => source.to_vec(),
            TaskKind::Reverse => source.iter().rev().copied().collect(),
            TaskKind::Shift => {
                let k = self.shift.min(source.len());
                std::iter::repeat_n(PAD, k).chain(source[..source.len() - k].iter().copied()).collect()
            }
            TaskKind::LocalSwap => {
                let mut t = source.to_vec();
                for pair in t.chunks_exact_mut(2) {
                    pair.swap(0, 1);
                }
                t
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Pair {
        let len = rng.gen_range(self.min_len..=self.max_len);
        let source: Vec<usize> = (0..len).map(|_| rng.gen_range(FIRST_CONTENT_TOKEN..self.vocab_size)).collect();
        let target = self.target_for(&source);
        Pair { source, target }
    }

    /// `n` pairs drawn from RNG stream `stream` of this spec's seed.
    pub fn dataset(&self, n: usize, stream: u64) -> Result<Vec<Pair>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        Ok((0..n).map(|_| self.sample(&mut rng)).collect())
    }
}

pub fn generate_batch<R: Rng + ?Sized>(spec: &TaskSpec, batch_size: usize, rng: &mut R) -> Result<Batch> {
    spec.validate()?;
    if batch_size == 0 {
        return Err(contract("batch_size must be at least 1"));
    }
    Ok(Batch { pairs: (0..batch_size).map(|_| spec.sample(rng)).collect() })
}
