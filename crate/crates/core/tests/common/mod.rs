//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod ops;

use mma_core::{Graph, Result, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<S: Scalar>(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| S::from_acc(rng.gen_range(lo..hi))).collect()).unwrap()
}

/// `Σ w ⊙ y` with fixed pseudo-random weights, so every output element
/// contributes to the checked gradient.
pub fn weighted_sum<S: Scalar>(g: &mut Graph<S>, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0x5eed);
    let n = g.value(y).len();
    let w: Vec<S> = (0..n).map(|_| S::from_acc(r.gen_range(-1.0..1.0))).collect();
    let m = g.mul_const(y, w)?;
    Ok(g.sum(m))
}

/// Exact expected alignment by walking every outcome of the `U×T` grid of
/// independent Bernoulli draws. Returns `(absorb, spill)` tables: with
/// absorb a step that never selects stops on the last position; with spill
/// the process ends there.
pub fn bernoulli_enumeration(p: &[f64], u: usize, t: usize) -> (Vec<f64>, Vec<f64>) {
    let cells = u * t;
    let mut absorb = vec![0.0; cells];
    let mut spill = vec![0.0; cells];
    let mut z = vec![false; cells];
    loop {
        let mut w = 1.0;
        for k in 0..cells {
            w *= if z[k] { p[k] } else { 1.0 - p[k] };
        }
        for (table, absorbing) in [(&mut absorb, true), (&mut spill, false)] {
            let mut pos = 0;
            for i in 0..u {
                let mut j = pos;
                while j < t && !z[i * t + j] {
                    j += 1;
                }
                if j == t {
                    if !absorbing {
                        break;
                    }
                    j = t - 1;
                }
                table[i * t + j] += w;
                pos = j;
            }
        }
        // odometer increment
        let mut k = 0;
        while k < cells && z[k] {
            z[k] = false;
            k += 1;
        }
        if k == cells {
            break;
        }
        z[k] = true;
    }
    (absorb, spill)
}

pub mod end_to_end {
    use mma_core::model::{AlignmentForm, Model, ModelConfig, Variant};
    use mma_core::tensor::compare_gradients;
    use mma_core::training::{batch_gradients, Pair};
    use mma_core::Tensor;

    pub const STEP: f64 = 1e-5;
    pub const TOL: f64 = 1e-2;

    fn tiny(variant: Variant, alignment: AlignmentForm) -> Model<f64> {
        let cfg = ModelConfig {
            vocab_size: 9,
            d_model: 4,
            ffn_dim: 8,
            n_heads: 2,
            encoder_layers: 1,
            decoder_layers: 2,
            dropout: 0.0,
            variant,
            lambda_avg: 0.5,
            lambda_var: 0.5,
            max_len: 8,
            alignment,
            ..Default::default()
        };
        Model::new(cfg, 3).unwrap()
    }

    /// Worst central-difference error over every parameter array of a tiny
    /// model's full objective (label-smoothed cross entropy plus both latency
    /// terms, averaged over a two-pair batch), with the parameter name.
    pub fn worst_parameter_error(variant: Variant, alignment: AlignmentForm) -> (f64, String) {
        let model = tiny(variant, alignment);
        let pairs = [
            Pair { source: vec![3, 4, 5], target: vec![4, 5, 6, 7] },
            Pair { source: vec![6, 7, 3, 8], target: vec![5, 3] },
        ];
        let mut rng = super::rng(0);
        let (_, grads) = batch_gradients(&model, &pairs, 0.1, false, &mut rng).unwrap();
        let mut worst = (0.0, String::new());
        for (k, p) in model.params().iter().enumerate() {
            let value = |t: &Tensor<f64>| {
                let mut m = model.clone();
                m.params_mut()[k].value = t.clone();
                Ok(batch_gradients(&m, &pairs, 0.1, false, &mut super::rng(0))?.0.total)
            };
            let r = compare_gradients(value, &grads[k], &p.value, STEP, TOL).unwrap();
            if r.max_rel_error >= worst.0 {
                worst = (r.max_rel_error, p.name.clone());
            }
        }
        worst
    }
}
