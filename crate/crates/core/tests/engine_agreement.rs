//! Monte Carlo estimates at 50,000 samples land within five standard errors of the
//! exact enumeration.

use cotlab::attention_model::Field;
use cotlab::boolean_task::{build_task, FunctionKind};
use cotlab::checks::random_weights;
use cotlab::oracle::{Estimate, ExpectationEngine, FieldEstimate};
use cotlab::rl_finetune::{expected_reward, policy_gradient};
use cotlab::sft_finetune::{population_loss, sft_gradient};

const SAMPLES: usize = 50_000;

fn within(exact: f64, mc: Estimate) -> bool {
    (exact - mc.mean).abs() <= 5.0 * mc.std_error + 1e-12
}

fn field_within(exact: &Field, mc: &FieldEstimate) -> usize {
    exact
        .entries()
        .filter(|&(e, v)| !within(v, Estimate { mean: mc.mean.get(e), std_error: mc.std_error.get(e) }))
        .count()
}

#[test]
fn policy_quantities_agree() {
    for (i, kind) in FunctionKind::ALL.into_iter().enumerate() {
        let task = build_task(kind, 8, 8, i as u64).unwrap();
        let scores = random_weights(&task, 1.0, 40 + i as u64).softmax();
        let mc = ExpectationEngine::monte_carlo(SAMPLES, 9);
        let exact = ExpectationEngine::exact();
        let r = expected_reward(&task, &scores, &exact).unwrap();
        assert!(within(r.mean, expected_reward(&task, &scores, &mc).unwrap()), "{kind}");
        let g = policy_gradient(&task, &scores, &exact).unwrap();
        assert_eq!(field_within(&g.mean, &policy_gradient(&task, &scores, &mc).unwrap()), 0, "{kind}");
    }
}

#[test]
fn supervised_quantities_agree() {
    for (i, kind) in FunctionKind::ALL.into_iter().enumerate() {
        let task = build_task(kind, 8, 8, i as u64).unwrap();
        let scores = random_weights(&task, 1.0, 50 + i as u64).softmax();
        let mc = ExpectationEngine::monte_carlo(SAMPLES, 3);
        let exact = ExpectationEngine::exact();
        let l = population_loss(&task, &scores, &exact).unwrap();
        assert!(within(l.total.mean, population_loss(&task, &scores, &mc).unwrap().total), "{kind}");
        let g = sft_gradient(&task, &scores, &exact).unwrap();
        assert_eq!(field_within(&g.mean, &sft_gradient(&task, &scores, &mc).unwrap()), 0, "{kind}");
    }
}

#[test]
fn exact_estimates_carry_no_error() {
    let task = build_task(FunctionKind::Or, 6, 4, 0).unwrap();
    let scores = random_weights(&task, 1.0, 1).softmax();
    let g = policy_gradient(&task, &scores, &ExpectationEngine::exact()).unwrap();
    assert_eq!(g.std_error.max_abs(), 0.0);
}
