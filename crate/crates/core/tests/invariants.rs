//! Property tests and exhaustive checks over the task, model and oracle layers.

use cotlab::attention_model::{
    forward_level, generate_deterministic, generate_stochastic, init_weights, optimal_scores, rollout_deterministic, Field,
};
use cotlab::boolean_task::{build_task, ground_truth_chain, target, tokens_from_mask, FunctionKind, TaskSpec, Token};
use cotlab::checks::random_weights;
use cotlab::oracle::{abcd, ExpectationEngine, TokenLaw};
use cotlab::rl_finetune::{gamma, policy_gradient};
use cotlab::sft_finetune::sft_gradient;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn kind_of(i: usize) -> FunctionKind {
    FunctionKind::ALL[i % 3]
}

#[test]
fn tree_reproduces_target_exhaustively() {
    for (kind, d, k) in [(FunctionKind::Parity, 12, 8), (FunctionKind::And, 10, 8), (FunctionKind::Or, 12, 4)] {
        let task = build_task(kind, d, k, 6).unwrap();
        for mask in 0..1u64 << d {
            let x = tokens_from_mask(mask, d);
            let gt = ground_truth_chain(&task, &x).unwrap();
            for t in 1..=task.depth() {
                for (l, &y) in gt.level(t).iter().enumerate() {
                    let (a, b) = task.children(t, l);
                    assert_eq!(y, kind.phi2(gt.level(t - 1)[a], gt.level(t - 1)[b]));
                }
            }
            assert_eq!(gt.output(), target(&task, &x).unwrap());
        }
    }
}

#[test]
fn target_ignores_order_of_relevant_coordinates() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for kind in FunctionKind::ALL {
        let task = build_task(kind, 10, 8, 3).unwrap();
        let mut order = task.relevant().to_vec();
        order.shuffle(&mut rng);
        for mask in 0..1u64 << 10 {
            let x = tokens_from_mask(mask, 10);
            assert_eq!(target(&task, &x).unwrap(), kind.reduce(order.iter().map(|&i| x[i])));
        }
    }
}

#[test]
fn gates_stay_boolean() {
    for kind in FunctionKind::ALL {
        for a in [-1, 1] {
            for b in [-1, 1] {
                assert!(matches!(kind.phi2(a, b), -1 | 1));
            }
        }
    }
}

#[test]
fn activation_derivative_matches_finite_differences() {
    let h = 1e-6;
    for kind in FunctionKind::ALL {
        for i in 1..400 {
            let z = -1.0 + i as f64 / 200.0;
            if kind != FunctionKind::Parity && z.abs() <= 1e-3 {
                continue;
            }
            if z.abs() + h > 1.0 {
                continue;
            }
            let fd = (kind.psi(z + h).unwrap() - kind.psi(z - h).unwrap()) / (2.0 * h);
            assert!((fd - kind.psi_prime(z).unwrap()).abs() < 1e-8, "{kind} at {z}");
        }
    }
}

#[test]
fn optimal_scores_generate_the_ground_truth() {
    for kind in FunctionKind::ALL {
        let task = build_task(kind, 8, 8, 2).unwrap();
        let s = optimal_scores(&task);
        for mask in 0..256u64 {
            let x = tokens_from_mask(mask, 8);
            let gt = ground_truth_chain(&task, &x).unwrap();
            assert_eq!(generate_deterministic(&task, &s, &x).unwrap(), gt);
            assert_eq!(generate_stochastic(&task, &s, &x, mask).unwrap(), gt);
        }
    }
}

#[test]
fn children_expectations_match_at_symmetric_weights() {
    for kind in FunctionKind::ALL {
        let task = build_task(kind, 8, 8, 5).unwrap();
        let s = init_weights(&task).softmax();
        for t in 1..=task.depth() {
            let marg = cotlab::oracle::level_marginal(&task, &s, t - 1).unwrap();
            let n = task.width(t - 1);
            for l in 0..task.width(t) {
                let (a, b) = task.children(t, l);
                let (mut ga, mut gb) = (0.0, 0.0);
                for (mask, &mu) in marg.iter().enumerate() {
                    if mu > 0.0 {
                        let prev = tokens_from_mask(mask as u64, n);
                        ga += mu * gamma(&task, &s, &prev, t, l, a).unwrap();
                        gb += mu * gamma(&task, &s, &prev, t, l, b).unwrap();
                    }
                }
                assert!((ga - gb).abs() < 1e-12, "{kind} ({t},{l})");
            }
        }
    }
}

/// Direct enumeration of `E[I(active) * prod of tokens in subset]` for the first level.
fn indicator_moment(task: &TaskSpec, l: usize, p_prime: usize, pick: &[bool; 3]) -> f64 {
    let (i1, i2) = task.children(1, l);
    let d = task.d();
    let mut total = 0.0;
    for mask in 0..1u64 << d {
        let x = tokens_from_mask(mask, d);
        let xi = x.iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64;
        let active = match task.kind() {
            FunctionKind::And => xi > 0.0,
            _ => xi < 0.0,
        };
        if active {
            let mut prod = 1.0;
            for (&on, &pos) in pick.iter().zip(&[i1, i2, p_prime]) {
                if on {
                    prod *= f64::from(x[pos]);
                }
            }
            total += prod;
        }
    }
    total / (1u64 << d) as f64
}

#[test]
fn abcd_terms_reconstruct_indicator_moments() {
    for kind in [FunctionKind::And, FunctionKind::Or] {
        let task = build_task(kind, 8, 4, 1).unwrap();
        let s = init_weights(&task).softmax();
        for l in 0..task.width(1) {
            for p in (0..8).filter(|&p| !task.is_child(1, l, p)) {
                for law in [TokenLaw::OnPolicy, TokenLaw::GroundTruth] {
                    let terms = abcd(&task, &s, 1, l, p, law).unwrap().terms();
                    let want = [
                        indicator_moment(&task, l, p, &[false, false, false]),
                        indicator_moment(&task, l, p, &[true, false, false]),
                        indicator_moment(&task, l, p, &[true, true, false]),
                        indicator_moment(&task, l, p, &[true, true, true]),
                    ];
                    for (got, want) in terms.iter().zip(want) {
                        assert!((got - want).abs() < 1e-12, "{kind} l={l} p={p}: {got} vs {want}");
                    }
                }
            }
        }
    }
}

/// Supervised gradient rebuilt from generated predecessors and the label level only.
fn generated_input_oracle(task: &TaskSpec, w: &Field, teacher_forced: bool) -> Field {
    let s = w.softmax();
    let c = 2.0 / (task.k() as f64 - 1.0);
    let mut g = Field::zeros(task);
    let px = 1.0 / (1u64 << task.d()) as f64;
    for mask in 0..1u64 << task.d() {
        let x = tokens_from_mask(mask, task.d());
        let gt = ground_truth_chain(task, &x).unwrap();
        let run = rollout_deterministic(task, &s, &x).unwrap();
        for t in 1..=task.depth() {
            let prev: &[Token] = if teacher_forced { gt.level(t - 1) } else { run.chain.level(t - 1) };
            let out = forward_level(task, &s, prev, t).unwrap();
            for (l, &label) in gt.level(t).iter().enumerate() {
                let xi = out.xi[l];
                let coef = -c * f64::from(label) * task.kind().psi_prime(xi).unwrap();
                for (p, &sp) in s.column(t, l).iter().enumerate() {
                    g.add(cotlab::attention_model::Entry { t, l, p }, px * coef * (f64::from(prev[p]) - xi) * sp);
                }
            }
        }
    }
    g
}

#[test]
fn supervised_gradient_feeds_generated_tokens_forward() {
    let task = build_task(FunctionKind::Parity, 8, 8, 0).unwrap();
    let w = random_weights(&task, 2.0, 21);
    let g = sft_gradient(&task, &w.softmax(), &ExpectationEngine::exact()).unwrap().mean;
    let own = generated_input_oracle(&task, &w, false);
    let forced = generated_input_oracle(&task, &w, true);
    assert!(g.zip_with(&own, |a, b| a - b).unwrap().max_abs() < 1e-12);
    assert!(g.zip_with(&forced, |a, b| a - b).unwrap().max_abs() > 1e-6);
}

#[test]
fn forward_pass_reads_only_its_own_level() {
    let task = build_task(FunctionKind::And, 8, 8, 0).unwrap();
    let w = random_weights(&task, 1.0, 2);
    let prev = tokens_from_mask(0b1011_0110, 8);
    let base = forward_level(&task, &w.softmax(), &prev, 1).unwrap();
    let mut other = w.clone();
    for t in 2..=task.depth() {
        for col in 0..task.width(t) {
            other.column_mut(t, col).iter_mut().for_each(|v| *v += 7.0 * (col as f64 + 1.0));
        }
    }
    assert_eq!(forward_level(&task, &other.softmax(), &prev, 1).unwrap(), base);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn column_shift_leaves_scores(seed in any::<u64>(), shift in -50.0f64..50.0, col in 0usize..4) {
        let task = build_task(FunctionKind::Or, 8, 8, seed).unwrap();
        let w = random_weights(&task, 5.0, seed);
        let mut shifted = w.clone();
        shifted.column_mut(1, col).iter_mut().for_each(|v| *v += shift);
        let (a, b) = (w.softmax(), shifted.softmax());
        for (x, y) in a.column(1, col).iter().zip(b.column(1, col)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_outputs_stay_in_range(seed in any::<u64>(), kind_ix in 0usize..3, mask in any::<u64>()) {
        let task = build_task(kind_of(kind_ix), 10, 8, seed).unwrap();
        let s = random_weights(&task, 4.0, seed ^ 1).softmax();
        let run = rollout_deterministic(&task, &s, &tokens_from_mask(mask, 10)).unwrap();
        for (xs, qs) in run.xi.iter().zip(&run.q) {
            for (&xi, &q) in xs.iter().zip(qs) {
                prop_assert!((-1.0..=1.0).contains(&xi));
                prop_assert!((-1.0..=1.0).contains(&q));
            }
        }
    }

    #[test]
    fn oracles_are_pure_functions(seed in 0u64..1000, kind_ix in 0usize..3) {
        let task = build_task(kind_of(kind_ix), 8, 4, seed).unwrap();
        let s = random_weights(&task, 1.0, seed).softmax();
        let mc = ExpectationEngine::monte_carlo(500, seed);
        prop_assert_eq!(policy_gradient(&task, &s, &mc).unwrap(), policy_gradient(&task, &s, &mc).unwrap());
        let exact = ExpectationEngine::exact();
        prop_assert_eq!(sft_gradient(&task, &s, &exact).unwrap(), sft_gradient(&task, &s, &exact).unwrap());
    }
}
