use confit::theory::{
    bound_problem, fine_tune, loss_gradients, loss_lower_bound, procrustes_eps, task_loss, worst_case_loss, Dims,
    FineTuneConfig,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_rotation(d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    g.qr().q()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bound_terms_are_invariant_under_input_rotation(seed in 0u64..10_000) {
        let p = bound_problem(Dims { k: 2, n: 5, d: 12 }, seed, 0.05).unwrap();
        let q = random_rotation(12, seed ^ 0xabc);
        let rot = |m: &DMatrix<f64>| m * &q;
        let base = loss_lower_bound(&p.task.x, &p.b_prev, &p.v_prev, &p.b_star, &p.v_star).unwrap();
        let turned = loss_lower_bound(&rot(&p.task.x), &rot(&p.b_prev), &p.v_prev, &rot(&p.b_star), &p.v_star).unwrap();
        prop_assert!(base.basis_error < 1e-12 && turned.basis_error < 1e-12);
        prop_assert!((base.bound - turned.bound).abs() < 1e-9);
        prop_assert!((base.sigma_k - turned.sigma_k).abs() < 1e-9);
        let eps = procrustes_eps(&p.b_prev, &p.b_star);
        prop_assert!((eps - procrustes_eps(&rot(&p.b_prev), &rot(&p.b_star))).abs() < 1e-9);
        let wc = worst_case_loss(&p.b_prev, &p.v_prev, &p.b_star, &p.v_star);
        prop_assert!((wc - worst_case_loss(&rot(&p.b_prev), &p.v_prev, &rot(&p.b_star), &p.v_star)).abs() < 1e-9);
    }

    #[test]
    fn loss_gradients_match_finite_differences(seed in 0u64..10_000) {
        let p = bound_problem(Dims { k: 2, n: 4, d: 6 }, seed, 0.05).unwrap();
        let (gb, gv) = loss_gradients(&p.task, &p.b_prev, &p.v_prev);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..6 {
                let (mut up, mut down) = (p.b_prev.clone(), p.b_prev.clone());
                up[(i, j)] += h;
                down[(i, j)] -= h;
                let fd = (task_loss(&p.task, &up, &p.v_prev) - task_loss(&p.task, &down, &p.v_prev)) / (2.0 * h);
                prop_assert!((fd - gb[(i, j)]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
            let (mut up, mut down) = (p.v_prev.clone(), p.v_prev.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (task_loss(&p.task, &p.b_prev, &up) - task_loss(&p.task, &p.b_prev, &down)) / (2.0 * h);
            prop_assert!((fd - gv[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }
}

#[test]
fn gradient_descent_trace_is_monotone() {
    let p = bound_problem(Dims::default(), 3, 0.05).unwrap();
    let result = fine_tune(&p.task, &p.b_prev, &p.v_prev, FineTuneConfig::default());
    assert!(result.converged);
    assert!(result.losses.windows(2).all(|w| w[1] <= w[0]));
    assert!(result.loss < 1e-10);
}

#[test]
fn procrustes_eps_vanishes_for_rotated_copies() {
    let p = bound_problem(Dims::default(), 1, 0.05).unwrap();
    let q = random_rotation(3, 9);
    assert!(procrustes_eps(&(&q * &p.b_star), &p.b_star) < 1e-20);
}

#[test]
fn invalid_dimensions_are_rejected() {
    assert!(Dims { k: 3, n: 3, d: 50 }.validate().is_err());
    assert!(Dims { k: 0, n: 3, d: 50 }.validate().is_err());
    assert!(Dims { k: 3, n: 60, d: 50 }.validate().is_err());
}
