use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::tasks::{Pair, TaskSpec};
use super::train::streams;
use crate::error::{contract, Result};
use crate::latency::{DelayRecord, LatencyReport};
use crate::model::{argmax, with_eos, Model};
use crate::scalar::Scalar;

/// Teacher-forced next-token accuracy (end token included) in eval mode.
pub fn next_token_accuracy<S: Scalar>(model: &Model<S>, pairs: &[Pair]) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut correct, mut total) = (0usize, 0usize);
    for p in pairs {
        let out = model.decoder_forward_train(&p.source, &p.target, false, &mut rng)?;
        let gold = with_eos(&p.target);
        for (row, &t) in out.logits.rows().zip(&gold) {
            correct += usize::from(argmax(row) == t);
        }
        total += gold.len();
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

/// One decoded sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceResult {
    /// Content tokens (end token stripped).
    pub hypothesis: Vec<usize>,
    pub delays: DelayRecord,
    pub latency: LatencyReport,
    pub correct: usize,
    /// Reference length including the end token.
    pub reference_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Position-wise match of the decoded output (with end token) against the
    /// reference (with end token), pooled over the corpus.
    pub token_accuracy: f64,
    pub bleu: f64,
    /// Arithmetic mean of per-sentence reports.
    pub latency: LatencyReport,
    pub sentences: Vec<SentenceResult>,
}

/// Greedy simultaneous decoding of every pair.
pub fn evaluate<S: Scalar>(model: &Model<S>, pairs: &[Pair]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(contract("evaluate needs at least one sentence"));
    }
    let mut sentences = Vec::with_capacity(pairs.len());
    for p in pairs {
        let out = model.decode(p.source.iter().copied())?;
        let gold = with_eos(&p.target);
        let correct = gold.iter().zip(&out.tokens).filter(|(a, b)| a == b).count();
        let positions = out.state.flat_positions();
        sentences.push(SentenceResult {
            hypothesis: out.content().to_vec(),
            latency: LatencyReport::from_decode(&out.delays, &positions),
            delays: out.delays,
            correct,
            reference_len: gold.len(),
        });
    }
    let hyps: Vec<Vec<usize>> = sentences.iter().map(|s| s.hypothesis.clone()).collect();
    let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.target.clone()).collect();
    let correct: usize = sentences.iter().map(|s| s.correct).sum();
    let total: usize = sentences.iter().map(|s| s.reference_len).sum();
    let latency = LatencyReport::mean(&sentences.iter().map(|s| s.latency).collect::<Vec<_>>());
    Ok(EvalReport { token_accuracy: correct as f64 / total as f64, bleu: corpus_bleu(&hyps, &refs)?, latency, sentences })
}

/// Evaluates a checkpoint on `n` held-out pairs drawn from the test stream of `spec`.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, spec: &TaskSpec, n: usize) -> Result<EvalReport> {
    let model: Model<f32> = ckpt.model()?;
    evaluate(&model, &spec.dataset(n, streams::TEST)?)
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 in `[0, 100]` with clipped n-gram counts, uniform weights
/// and the brevity penalty. Precisions for `n >= 2` use add-one smoothing
/// (`(matches + 1) / (total + 1)`); a zero unigram precision gives 0.
pub fn corpus_bleu<T: AsRef<[usize]>>(hypotheses: &[T], references: &[T]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(contract("BLEU needs at least one hypothesis"));
    }
    if hypotheses.len() != references.len() {
        return Err(contract(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (h.as_ref(), r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            matches[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if matches[0] == 0 || hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_p = (matches[0] as f64 / totals[0] as f64).ln();
    for n in 1..4 {
        log_p += ((matches[n] + 1) as f64 / (totals[n] + 1) as f64).ln();
    }
    let bp = if hyp_len >= ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    Ok(100.0 * bp * (log_p / 4.0).exp())
}
