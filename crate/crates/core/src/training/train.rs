use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::eval::next_token_accuracy;
use super::optim::{clip_grad_norm, Adam, InverseSqrt};
use super::tasks::{generate_batch, Pair};
use crate::error::{Error, Result};
use crate::latency::{head_divergence_on, total_loss_on, weighted_average_latency_on};
use crate::model::{with_eos, Bound, Model};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// RNG streams split off the run seed (ChaCha8, `set_stream`). Parameter
/// initialization uses the seed directly.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const VALID: u64 = 3;
    pub const TEST: u64 = 4;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    /// Batch mean of the full objective.
    pub loss: f64,
    /// Batch mean of the per-token (label-smoothed) cross entropy.
    pub nll: f64,
    pub l_avg: f64,
    pub l_var: f64,
    /// Before clipping.
    pub grad_norm: f64,
}

impl LogEntry {
    pub const CSV_HEADER: &'static str = "step,lr,loss,nll,l_avg,l_var,grad_norm";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.lr, self.loss, self.nll, self.l_avg, self.l_var, self.grad_norm
        )
    }
}

/// Loss components of one example, as values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub nll: f64,
    pub l_avg: f64,
    pub l_var: f64,
}

/// Builds the objective of one pair on `g`: mean per-token cross entropy
/// plus the weighted latency terms.
pub fn example_loss_on<S: Scalar, R: Rng + ?Sized>(
    model: &Model<S>,
    g: &mut Graph<S>,
    b: &Bound,
    pair: &Pair,
    label_smoothing: f64,
    training: bool,
    rng: &mut R,
) -> Result<(Var, LossParts)> {
    let cfg = model.config();
    let fv = model.forward_on(g, b, &pair.source, &pair.target, training, rng)?;
    let targets = with_eos(&pair.target);
    let ce = g.cross_entropy(fv.logits, &targets, label_smoothing)?;
    let nll = g.scale(ce, S::from_acc(1.0 / targets.len() as f64));
    let (mut l_avg, mut l_var) = (None, None);
    if let Some(d) = fv.delays {
        l_avg = Some(weighted_average_latency_on(g, d, pair.source.len() + 1)?);
        l_var = Some(head_divergence_on(g, d)?);
    }
    let total = total_loss_on(g, nll, l_avg, l_var, cfg.variant, cfg.lambda_avg, cfg.lambda_var)?;
    let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().to_acc());
    let parts = LossParts { total: val(Some(total)), nll: val(Some(nll)), l_avg: val(l_avg), l_var: val(l_var) };
    Ok((total, parts))
}

/// Mean loss over `pairs` and its gradient for every parameter array.
pub fn batch_gradients<S: Scalar, R: Rng + ?Sized>(
    model: &Model<S>,
    pairs: &[Pair],
    label_smoothing: f64,
    training: bool,
    rng: &mut R,
) -> Result<(LossParts, Vec<Vec<f64>>)> {
    let mut grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
    let mut sum = LossParts::default();
    let w = 1.0 / pairs.len() as f64;
    for pair in pairs {
        let mut g = Graph::new();
        let b = model.bind(&mut g, true);
        let (loss, parts) = example_loss_on(model, &mut g, &b, pair, label_smoothing, training, rng)?;
        if !parts.total.is_finite() {
            return Err(Error::Diverged { step: 0, detail: format!("non-finite loss {}", parts.total) });
        }
        g.backward(loss)?;
        for (acc, &v) in grads.iter_mut().zip(b.vars()) {
            if let Some(gr) = g.grad(v) {
                acc.iter_mut().zip(gr.data()).for_each(|(a, x)| *a += w * x.to_acc());
            }
        }
        sum.total += w * parts.total;
        sum.nll += w * parts.nll;
        sum.l_avg += w * parts.l_avg;
        sum.l_var += w * parts.l_var;
    }
    Ok((sum, grads))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// State after the last step, with optimizer moments.
    pub last: Checkpoint,
    /// Parameters with the best validation accuracy.
    pub best: Checkpoint,
    pub best_accuracy: f64,
    pub log: Vec<LogEntry>,
    /// `(step, validation next-token accuracy)`.
    pub validations: Vec<(usize, f64)>,
}

/// Trains a fresh `f32` model as described by `cfg`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    train_with(cfg, |_| {})
}

/// [`train`] with a per-step callback.
pub fn train_with(cfg: &RunConfig, mut on_step: impl FnMut(&LogEntry)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = cfg.task_spec();
    let mut model = Model::<f32>::new(cfg.model(), cfg.seed)?;
    let valid = spec.dataset(cfg.valid_size, streams::VALID)?;
    let mut data_rng = stream_rng(cfg.seed, streams::DATA);
    let mut noise_rng = stream_rng(cfg.seed, streams::NOISE);
    let schedule = InverseSqrt { peak_lr: cfg.lr, warmup: cfg.warmup, init_lr: cfg.warmup_init_lr };
    let mut opt = Adam::new(model.params().iter().map(|p| p.value.len()), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);

    let mut log = Vec::with_capacity(cfg.steps);
    let mut validations = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut step = 0;
    while step < cfg.steps {
        step += 1;
        let batch = generate_batch(&spec, cfg.batch_size, &mut data_rng)?;
        let (parts, mut grads) = batch_gradients(&model, &batch.pairs, cfg.label_smoothing, true, &mut noise_rng)
            .map_err(|e| match e {
                Error::Diverged { detail, .. } => Error::Diverged { step, detail },
                other => other,
            })?;
        let norm = clip_grad_norm(&mut grads, cfg.clip_norm);
        if !norm.is_finite() {
            return Err(Error::Diverged { step, detail: format!("non-finite gradient norm {norm}") });
        }
        let lr = schedule.lr(step);
        let mut params: Vec<_> = model.params_mut().iter_mut().map(|p| &mut p.value).collect();
        opt.update(&mut params, &grads, lr)?;
        let entry = LogEntry {
            step,
            lr,
            loss: parts.total,
            nll: parts.nll,
            l_avg: parts.l_avg,
            l_var: parts.l_var,
            grad_norm: norm,
        };
        on_step(&entry);
        log.push(entry);

        if step % cfg.eval_every.max(1) == 0 || step == cfg.steps {
            let acc = next_token_accuracy(&model, &valid)?;
            log::info!("step {step}: loss {:.4} valid accuracy {acc:.4}", parts.total);
            validations.push((step, acc));
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, Checkpoint::from_model(cfg, &model, step as u64, None)));
            }
            if cfg.stop_at_accuracy.is_some_and(|t| acc >= t) {
                break;
            }
        }
    }
    let (best_accuracy, best) = best.expect("validated at least once");
    Ok(TrainOutcome {
        last: Checkpoint::from_model(cfg, &model, step as u64, Some(&opt)),
        best,
        best_accuracy,
        log,
        validations,
    })
}
