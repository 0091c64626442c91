use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

/// ceil(num/den * n^2) capped at n^2 - n, in integers.
fn budget_oracle(n: usize, num: usize, den: usize) -> usize {
    ((num * n * n).div_ceil(den)).min(n * n - n)
}

#[test]
fn budget_examples() {
    assert_eq!(edge_budget(3, 0.5), 5);
    assert_eq!(edge_budget(4, 1.0), 12);
    assert_eq!(edge_budget(1, 0.3), 0);
    assert_eq!(edge_budget(7, 0.5), 25);
}

#[test]
fn every_sampled_mask_meets_the_budget_exactly() {
    for n in 2..=8 {
        for (num, den) in [(1, 10), (1, 4), (1, 2), (1, 1)] {
            let s = num as f64 / den as f64;
            let k = budget_oracle(n, num, den);
            for seed in 0..100 {
                let g = init_graph(n, s, seed).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for mode in [MaskMode::Train, MaskMode::Eval] {
                    let m = g.sample_mask(mode, &mut rng).mask;
                    assert_eq!(m.off_diagonal_edges(), k, "n={n} s={s} seed={seed}");
                    assert!((0..n).all(|i| m.edge(i, i)));
                }
            }
        }
    }
}

#[test]
fn single_agent_gets_identity() {
    let g = init_graph(1, 0.7, 3).unwrap();
    let m = g.sample_mask(MaskMode::Train, &mut ChaCha8Rng::seed_from_u64(0)).mask;
    assert_eq!(m, AdjacencyMask::identity(1));
}

#[test]
fn full_sparsity_is_complete() {
    let g = init_graph(5, 1.0, 3).unwrap();
    let m = g.sample_mask(MaskMode::Train, &mut ChaCha8Rng::seed_from_u64(0)).mask;
    assert_eq!(m, AdjacencyMask::complete(5));
}

#[test]
fn init_is_seeded_and_validated() {
    assert_eq!(init_graph(4, 0.5, 9).unwrap(), init_graph(4, 0.5, 9).unwrap());
    assert_ne!(init_graph(4, 0.5, 9).unwrap().logits(), init_graph(4, 0.5, 10).unwrap().logits());
    for s in [0.0, -0.1, 1.5, f64::NAN] {
        assert!(matches!(init_graph(3, s, 0), Err(Error::Config(_))));
    }
    assert!(init_graph(0, 0.5, 0).is_err());
}

#[test]
fn eval_mask_is_a_function_of_the_logits() {
    let g = init_graph(6, 0.25, 1).unwrap();
    let a = g.sample_mask(MaskMode::Eval, &mut ChaCha8Rng::seed_from_u64(1)).mask;
    let b = g.sample_mask(MaskMode::Eval, &mut ChaCha8Rng::seed_from_u64(2)).mask;
    assert_eq!(a, b);
}

#[test]
fn eval_ties_break_by_row_then_column() {
    let mut g = init_graph(3, 0.2, 0).unwrap(); // k = 2
    g.set_logits(Tensor::zeros(vec![3, 3])).unwrap();
    let m = g.sample_mask(MaskMode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).mask;
    assert_eq!(m.bits(), &[1, 1, 1, 0, 1, 0, 0, 0, 1]);
}

#[test]
fn zero_gradient_leaves_logits_unchanged() {
    let mut g = init_graph(4, 0.5, 2).unwrap();
    let before = g.logits().clone();
    let s = g.sample_mask(MaskMode::Train, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(g.edge_update(&s, &[0.0; 16]).unwrap(), StepOutcome::Applied);
    assert_eq!(g.logits(), &before);
}

#[test]
fn non_finite_gradient_is_skipped() {
    let mut g = init_graph(3, 0.5, 2).unwrap();
    let before = g.clone();
    let s = g.sample_mask(MaskMode::Train, &mut ChaCha8Rng::seed_from_u64(0));
    let mut grad = [0.0; 9];
    grad[1] = f64::NAN;
    assert_eq!(g.edge_update(&s, &grad).unwrap(), StepOutcome::SkippedNonFinite);
    assert_eq!(g, before);
}

#[test]
fn positive_gradient_raises_a_selected_edge_monotonically() {
    let mut g = init_graph(4, 0.5, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let first = g.sample_mask(MaskMode::Train, &mut rng);
    let edge = (0..16).find(|e| e / 4 != e % 4 && first.mask.bits()[*e] == 1).unwrap();
    let mut grad = [0.0; 16];
    grad[edge] = 1.0;
    let mut last = g.logits().data()[edge];
    for _ in 0..50 {
        let s = g.sample_mask(MaskMode::Train, &mut rng);
        g.edge_update(&s, &grad).unwrap();
        let now = g.logits().data()[edge];
        assert!(now > last, "{now} <= {last}");
        last = now;
    }
    // the diagonal never moves
    assert!((0..4).all(|i| g.logits().get(i, i) == init_graph(4, 0.5, 5).unwrap().logits().get(i, i)));
}

#[test]
fn relaxation_gradient_matches_finite_differences() {
    let mut g = init_graph(5, 0.4, 8).unwrap();
    g.temperature = 0.7;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sample = g.sample_mask(MaskMode::Train, &mut rng);
    let weights: Vec<f64> = (0..25).map(|e| ((e * 7 % 11) as f64 - 5.0) / 3.0).collect();
    let analytic = g.straight_through(&sample, &weights).unwrap();
    let objective = |g: &CommGraph| -> f64 {
        g.relaxed_scores(&sample).iter().zip(&weights).map(|(s, w)| s * w).sum()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for e in 0..25 {
        let mut plus = g.clone();
        let mut minus = g.clone();
        let mut lp = g.logits().clone();
        lp.data_mut()[e] += h;
        plus.set_logits(lp).unwrap();
        let mut lm = g.logits().clone();
        lm.data_mut()[e] -= h;
        minus.set_logits(lm).unwrap();
        let numeric = if e / 5 == e % 5 { 0.0 } else { (objective(&plus) - objective(&minus)) / (2.0 * h) };
        let rel = (analytic[e] - numeric).abs() / analytic[e].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn temperature_anneals_geometrically() {
    let mut g = init_graph(2, 1.0, 0).unwrap();
    assert_eq!(g.temperature, 1.0);
    g.anneal(0.5);
    assert!((g.temperature - 0.1f64.sqrt()).abs() < 1e-12);
    g.anneal(1.0);
    assert!((g.temperature - 0.1).abs() < 1e-12);
}

#[test]
fn matrix_lines() {
    assert_eq!(serialize_matrix(17, &AdjacencyMask::identity(2)), "episode=17 1 0 / 0 1");
    let (ep, m) = parse_matrix("episode=3 1 1 / 0 1").unwrap();
    assert_eq!(ep, 3);
    assert!(m.edge(0, 1) && !m.edge(1, 0));
    for bad in ["1 0 / 0 1", "episode=x 1", "episode=1 1 0 / 1", "episode=1 0 1 / 1 1", "episode=1 2"] {
        assert!(matches!(parse_matrix(bad), Err(Error::Parse { .. })), "{bad}");
    }
}

fn any_mask() -> impl Strategy<Value = AdjacencyMask> {
    (1usize..9).prop_flat_map(|n| {
        proptest::collection::vec(0u8..2, n * n).prop_map(move |mut bits| {
            for i in 0..n {
                bits[i * n + i] = 1;
            }
            AdjacencyMask::from_bits(n, bits).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn matrix_lines_round_trip(mask in any_mask(), episode in 0u64..1_000_000) {
        let line = serialize_matrix(episode, &mask);
        prop_assert_eq!(parse_matrix(&line).unwrap(), (episode, mask));
    }
}
