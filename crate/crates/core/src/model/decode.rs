//! Incremental (simultaneous) greedy decoding.
//!
//! At every target step each monotonic head scans forward from its previous
//! position and stops at the first source position whose selection
//! probability exceeds one half. A head that needs a position beyond what
//! has been revealed triggers a read; a head that runs past the end of the
//! source stops at the last position. A token is written once every head of
//! every layer has stopped.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{argmax, HardPositions, Model, Variant, BOS, EOS};
use crate::error::Result;
use crate::latency::DelayRecord;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Read,
    Write,
}

impl Action {
    pub fn as_char(self) -> char {
        match self {
            Action::Read => 'R',
            Action::Write => 'W',
        }
    }
}

/// Read positions of every monotonic head.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MonotonicState {
    /// `positions[i][l][h]`: 1-based position of head `h` in layer `l` when
    /// target token `i` was written.
    pub positions: Vec<Vec<Vec<usize>>>,
    /// Number of target tokens written so far.
    pub target_step: usize,
    pub emitted: Vec<usize>,
}

impl MonotonicState {
    /// Current position of `(layer, head)`, if any token has been written.
    pub fn position(&self, layer: usize, head: usize) -> Option<usize> {
        self.positions.last().map(|p| p[layer][head])
    }

    /// All heads of all layers per step, flattened layer-major.
    pub fn flat_positions(&self) -> Vec<Vec<usize>> {
        self.positions.iter().map(|step| step.iter().flatten().copied().collect()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct DecodeOutput {
    /// Written tokens, including the final end token when one was produced.
    pub tokens: Vec<usize>,
    /// Interleaved reads and writes, with leftover reads after the last write.
    pub actions: Vec<Action>,
    pub delays: DelayRecord,
    pub state: MonotonicState,
}

impl DecodeOutput {
    /// Written tokens without the trailing end token.
    pub fn content(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    pub fn action_string(&self) -> String {
        let mut s = String::with_capacity(self.actions.len() * 2);
        for (i, a) in self.actions.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            s.push(a.as_char());
        }
        s
    }
}

/// Threshold scan bookkeeping for one target step.
pub(crate) struct HardScan {
    /// Per layer, positions of already written rows.
    prev: Vec<HardPositions>,
    /// Per layer, positions of the row being decided.
    current: Vec<Vec<usize>>,
    revealed: usize,
    exhausted: bool,
}

impl HardScan {
    /// Scans the last row of `energy[H, rows, T]`; returns false when a
    /// head needs an unrevealed source token.
    pub(crate) fn scan_layer<S: Scalar>(&mut self, layer: usize, energy: &Tensor<S>) -> bool {
        let sh = energy.shape();
        let (heads, rows, t) = (sh[0], sh[1], sh[2]);
        let last = rows - 1;
        let mut chosen = Vec::with_capacity(heads);
        for h in 0..heads {
            let start = self.prev[layer].last().map_or(1, |p| p[h]);
            let row = &energy.data()[(h * rows + last) * t..(h * rows + last + 1) * t];
            let mut j = start;
            loop {
                if j > self.revealed {
                    if self.exhausted {
                        j = self.revealed;
                        break;
                    }
                    return false;
                }
                if sigmoid(row[j - 1].to_acc()) > 0.5 {
                    break;
                }
                j += 1;
            }
            chosen.push(j);
        }
        self.current[layer] = chosen;
        true
    }

    pub(crate) fn layer_positions(&self, layer: usize) -> HardPositions {
        let mut p = self.prev[layer].clone();
        p.push(self.current[layer].clone());
        p
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Lazily revealed source with the end token appended after exhaustion.
struct SourceStream<I> {
    iter: I,
    tokens: Vec<usize>,
    exhausted: bool,
}

impl<I: Iterator<Item = usize>> SourceStream<I> {
    fn read(&mut self) -> bool {
        if self.exhausted {
            return false;
        }
        match self.iter.next() {
            Some(t) => self.tokens.push(t),
            None => {
                self.tokens.push(EOS);
                self.exhausted = true;
            }
        }
        true
    }
}

/// Greedy simultaneous decoding of a source stream (content tokens only).
///
/// Encoder states are recomputed whenever the revealed prefix grows; the
/// encoder is causal, so earlier rows are unaffected by later reads.
pub fn decode_simultaneous<S, I>(model: &Model<S>, source: I) -> Result<DecodeOutput>
where
    S: Scalar,
    I: IntoIterator<Item = usize>,
{
    let cfg = model.config();
    let monotonic = cfg.variant.is_monotonic();
    let mut stream = SourceStream { iter: source.into_iter(), tokens: Vec::new(), exhausted: false };
    let mut actions = Vec::new();
    let mut state = MonotonicState::default();
    let mut delays = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    if !monotonic {
        while stream.read() {
            actions.push(Action::Read);
        }
    }
    let mut mem: Option<(usize, Tensor<S>)> = None;
    let mut prev: Vec<HardPositions> = vec![Vec::new(); cfg.decoder_layers];

    while state.emitted.len() < cfg.max_len {
        let tgt_in: Vec<usize> = std::iter::once(BOS).chain(state.emitted.iter().copied()).collect();
        let (logits, positions) = loop {
            if stream.tokens.is_empty() {
                stream.read();
                actions.push(Action::Read);
            }
            if mem.as_ref().map(|(n, _)| *n) != Some(stream.tokens.len()) {
                mem = Some((stream.tokens.len(), model.encode(&stream.tokens)?));
            }
            let mem_t = &mem.as_ref().expect("encoded above").1;
            let mut g = Graph::new();
            let b = model.bind(&mut g, false);
            let m = g.constant(mem_t.clone());
            let mut scan = HardScan {
                prev: prev.clone(),
                current: vec![Vec::new(); cfg.decoder_layers],
                revealed: stream.tokens.len(),
                exhausted: stream.exhausted,
            };
            let hard = monotonic.then_some(&mut scan);
            match model.decode_layers_on(&mut g, &b, m, &tgt_in, hard, false, &mut rng)? {
                Some(fv) => {
                    let v = g.value(fv.logits);
                    let vocab = v.last_dim();
                    let last = v.data()[(tgt_in.len() - 1) * vocab..].to_vec();
                    break (last, scan.current);
                }
                None => {
                    stream.read();
                    actions.push(Action::Read);
                }
            }
        };
        let token = argmax(&logits);
        actions.push(Action::Write);
        delays.push(stream.tokens.len() as f64);
        if monotonic {
            for (l, p) in positions.iter().enumerate() {
                prev[l].push(p.clone());
            }
            state.positions.push(positions);
        }
        state.emitted.push(token);
        state.target_step += 1;
        if token == EOS {
            break;
        }
    }
    while stream.read() {
        actions.push(Action::Read);
    }
    let delays = DelayRecord::new(delays, stream.tokens.len())?;
    Ok(DecodeOutput { tokens: state.emitted.clone(), actions, delays, state })
}

impl<S: Scalar> Model<S> {
    /// See [`decode_simultaneous`].
    pub fn decode<I: IntoIterator<Item = usize>>(&self, source: I) -> Result<DecodeOutput> {
        decode_simultaneous(self, source)
    }

    pub fn is_offline(&self) -> bool {
        self.config().variant == Variant::Offline
    }
}
