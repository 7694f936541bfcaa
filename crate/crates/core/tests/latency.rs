mod common;

use common::{rng, uniform, weighted_sum};
use mma_core::latency::*;
use mma_core::model::Variant;
use mma_core::tensor::grad_check;
use mma_core::{Graph, Tensor};
use proptest::prelude::*;

fn rec(g: &[f64], t: usize) -> DelayRecord {
    DelayRecord::new(g.to_vec(), t).unwrap()
}

/// DAL written out directly from its definition.
fn dal_reference(g: &[f64], t: usize) -> f64 {
    let u = g.len();
    let gamma = t as f64 / u as f64;
    let mut gp = vec![0.0; u];
    for i in 0..u {
        gp[i] = if i == 0 { g[0] } else { g[i].max(gp[i - 1] + gamma) };
    }
    (0..u).map(|i| gp[i] - i as f64 * gamma).sum::<f64>() / u as f64
}

#[test]
fn hand_computed_metrics() {
    let diag = rec(&[1.0, 2.0, 3.0], 3);
    assert!((metric_ap(&diag) - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(metric_al(&diag), 1.0);
    assert_eq!(metric_dal(&diag), 1.0);

    let wait3 = rec(&[3.0, 4.0, 5.0, 6.0, 6.0, 6.0], 6);
    assert_eq!(metric_al(&wait3), 3.0);

    let full = rec(&[3.0, 3.0, 3.0], 3);
    assert_eq!(metric_dal(&full), 3.0);
    assert_eq!(metric_al(&full), 3.0);
    assert_eq!(metric_ap(&full), 1.0);

    let minimal = rec(&[1.0; 4], 5);
    assert!((metric_ap(&minimal) - 0.2).abs() < 1e-12);
    assert_eq!(metric_dal(&rec(&[2.0], 3)), 2.0);
}

#[test]
fn wait_k_lagging_equals_k() {
    for k in 1..=3 {
        let t = 6;
        let g: Vec<f64> = (0..t).map(|i| ((k + i) as f64).min(t as f64)).collect();
        assert!((metric_al(&rec(&g, t)) - k as f64).abs() < 1e-12);
    }
}

#[test]
fn lagging_falls_back_to_all_steps_when_the_source_is_never_finished() {
    let d = rec(&[1.0, 2.0], 5);
    let rate = 5.0 / 2.0;
    assert!((metric_al(&d) - (1.0 + (2.0 - rate)) / 2.0).abs() < 1e-12);
}

#[test]
fn span_examples() {
    assert_eq!(attention_span(&[vec![2, 2, 2], vec![3, 3, 3]]), 0.0);
    assert_eq!(attention_span(&[vec![1, 2], vec![1, 4]]), 2.0);
    assert_eq!(attention_span(&[vec![4], vec![7]]), 0.0);
}

#[test]
fn records_validate_and_round_trip() {
    assert!(DelayRecord::new(vec![], 3).is_err());
    assert!(DelayRecord::new(vec![4.0], 3).is_err());
    assert!(DelayRecord::new(vec![0.0], 3).is_err());
    let d = DelayRecord::parse_trace_line("3\t3\t1,2,3").unwrap();
    assert_eq!(d, rec(&[1.0, 2.0, 3.0], 3));
    assert_eq!(DelayRecord::parse_trace_line(&d.to_trace_line()).unwrap(), d);
    assert!(DelayRecord::parse_trace_line("3\t2\t1,2,3").is_err());
    assert!(DelayRecord::parse_trace_line("3 3 1,2,3").is_err());
    assert!(DelayRecord::parse_trace_line("3\t1\tx").is_err());
}

#[test]
fn reports_average_per_sentence() {
    let a = LatencyReport::from_decode(&rec(&[1.0, 2.0, 3.0], 3), &[vec![1, 1], vec![1, 2], vec![3, 3]]);
    let b = LatencyReport::from_decode(&rec(&[3.0, 3.0, 3.0], 3), &[]);
    assert!((a.avg_attention_span - 1.0 / 3.0).abs() < 1e-12);
    assert!((a.max_head_latency - 2.0).abs() < 1e-12);
    assert_eq!(b.max_head_latency, 3.0);
    let m = LatencyReport::mean(&[a, b]);
    assert!((m.dal - 2.0).abs() < 1e-12);
    assert!((m.ap - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
    assert_eq!(LatencyReport::CSV_HEADER.split(',').count(), m.to_csv_row().split(',').count());
}

fn grid(data: Vec<f64>, l: usize, h: usize, u: usize) -> ExpectedDelayGrid<f64> {
    ExpectedDelayGrid { delays: Tensor::new(vec![l, h, u], data).unwrap() }
}

#[test]
fn identical_heads_reduce_to_dal_and_have_no_divergence() {
    let g = [1.2, 2.5, 2.9];
    let data: Vec<f64> = (0..4).flat_map(|_| g).collect();
    let gr = grid(data, 2, 2, 3);
    assert!((weighted_average_latency_loss(&gr, 4).unwrap() - dal_reference(&g, 4)).abs() < 1e-12);
    assert!(head_divergence_loss(&gr).unwrap().abs() < 1e-12);
}

#[test]
fn divergence_is_the_population_variance() {
    // two heads, one step: delays 1 and 3 -> variance 1
    let gr = grid(vec![1.0, 3.0], 1, 2, 1);
    assert!((head_divergence_loss(&gr).unwrap() - 1.0).abs() < 1e-12);
    // weights softmax([1, 3]) on delays [1, 3]
    let w3 = 3f64.exp() / (1f64.exp() + 3f64.exp());
    let expect = 1.0 * (1.0 - w3) + 3.0 * w3;
    assert!((weighted_delays(&gr).unwrap()[0] - expect).abs() < 1e-12);
    assert_eq!(gr.max_over_heads(), vec![3.0]);
}

#[test]
fn expected_delays_are_position_weighted_sums() {
    let a = Tensor::<f64>::new(vec![1, 2, 3], vec![0.2, 0.3, 0.5, 0.0, 0.0, 1.0]).unwrap();
    let g = expected_delays(&[a.clone(), a]).unwrap();
    assert_eq!(g.delays.shape(), &[2, 1, 2]);
    assert!((g.delays.data()[0] - (0.2 + 0.6 + 1.5)).abs() < 1e-12);
    assert!((g.delays.data()[1] - 3.0).abs() < 1e-12);
}

#[test]
fn total_objective_weights() {
    assert_eq!(total_loss(1.0, 2.0, 3.0, Variant::MmaIl, 0.5, 0.1), 1.0 + 1.0 + 0.3);
    // hard heads ignore the average-latency term
    assert_eq!(total_loss(1.0, 2.0, 3.0, Variant::MmaH, 0.5, 0.1), 1.0 + 0.3);
    assert_eq!(effective_lambda_avg(Variant::MmaH, 0.5), 0.0);
}

#[test]
fn latency_loss_gradients_with_respect_to_alpha() {
    // L = H = 2, U = T = 3
    let x = uniform::<f64>(&[4, 3, 3], 0.0, 1.0, &mut rng(8));
    for which in 0..3 {
        let r = grad_check(
            |g: &mut Graph<f64>, a| {
                let d = expected_delays_on(g, a)?;
                let flat = g.reshape(d, &[4, 3])?;
                match which {
                    0 => weighted_average_latency_on(g, flat, 3),
                    1 => head_divergence_on(g, flat),
                    _ => {
                        let w = weighted_delays_on(g, flat)?;
                        weighted_sum(g, w, 1)
                    }
                }
            },
            &x,
            1e-6,
            1e-3,
        )
        .unwrap();
        assert!(r.passed, "loss {which}: {}", r.max_rel_error);
    }
}

proptest! {
    #[test]
    fn dal_matches_reference_and_is_monotone(
        t in 1usize..10, raw in prop::collection::vec(0.0f64..1.0, 1..10), bump in 0.0f64..2.0, k in 0usize..10
    ) {
        let g: Vec<f64> = raw.iter().map(|v| 1.0 + v * (t as f64 - 1.0)).collect();
        let d = rec(&g, t);
        prop_assert!((metric_dal(&d) - dal_reference(&g, t)).abs() < 1e-9);
        let k = k % g.len();
        let mut h = g.clone();
        h[k] = (h[k] + bump).min(t as f64);
        prop_assert!(metric_dal(&rec(&h, t)) >= metric_dal(&d) - 1e-12);
        prop_assert!(metric_ap(&rec(&h, t)) >= metric_ap(&d));
        if h[k] > g[k] {
            prop_assert!(metric_ap(&rec(&h, t)) > metric_ap(&d));
        }
        prop_assert!(metric_ap(&d) <= 1.0 + 1e-12);
    }

    #[test]
    fn divergence_ignores_a_common_shift(
        data in prop::collection::vec(1.0f64..5.0, 12), shift in prop::collection::vec(-2.0f64..2.0, 3)
    ) {
        let base = grid(data.clone(), 2, 2, 3);
        let shifted: Vec<f64> = data.iter().enumerate().map(|(k, v)| v + shift[k % 3]).collect();
        let moved = grid(shifted, 2, 2, 3);
        prop_assert!((head_divergence_loss(&base).unwrap() - head_divergence_loss(&moved).unwrap()).abs() < 1e-9);
    }
}
