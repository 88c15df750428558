use macrl::adapt::{most_likely_embedding, ObservationWindow};
use macrl::enn::{EmbeddingTable, EnnModel, NormStats, TaskEmbedding, Transition};
use macrl::metatrain::reptile_outer_update;
use macrl::ndmath::{Gradients, MlpParams};
use macrl::planner::{cosine_similarity, select_elites, update_distribution, ActionDistribution};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ulps(a: f64, b: f64) -> u64 {
    if a == b {
        return 0;
    }
    let (ia, ib) = (a.to_bits() as i64, b.to_bits() as i64);
    if (ia < 0) != (ib < 0) {
        return u64::MAX;
    }
    ia.abs_diff(ib)
}

fn random_model(rng: &mut ChaCha8Rng, sd: usize, ad: usize, ed: usize) -> EnnModel {
    let hidden = vec![rng.random_range(2..7)];
    EnnModel::init(sd, ad, ed, &hidden, NormStats::identity(sd, ad), rng).unwrap()
}

fn random_transitions(rng: &mut ChaCha8Rng, n: usize, sd: usize, ad: usize) -> Vec<Transition> {
    (0..n)
        .map(|_| {
            let mut v = |k: usize| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            Transition::new(v(sd), v(ad), v(sd))
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn task_loss_gradient_matches_central_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (sd, ad, ed) = (rng.random_range(1..4), rng.random_range(1..3), rng.random_range(0..3));
        let model = random_model(&mut rng, sd, ad, ed);
        let h: Vec<f64> = (0..ed).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = rng.random_range(1..5);
        let batch = random_transitions(&mut rng, n, sd, ad);
        let (g, gh) = model.task_loss_grads(&h, &batch).unwrap();
        let analytic = g.params_flat();
        let eps = 1e-6;
        for i in 0..model.params().param_count() {
            let mut p = model.params().clone();
            *p.param_mut(i).unwrap() += eps;
            let up = model.with_params(p.clone()).unwrap().task_loss(&h, &batch).unwrap();
            *p.param_mut(i).unwrap() -= 2.0 * eps;
            let down = model.with_params(p).unwrap().task_loss(&h, &batch).unwrap();
            let numeric = (up - down) / (2.0 * eps);
            let scale = analytic[i].abs().max(numeric.abs()).max(1e-4);
            prop_assert!((analytic[i] - numeric).abs() / scale < 1e-5, "param {i}: {} vs {numeric}", analytic[i]);
        }
        for k in 0..ed {
            let mut hp = h.clone();
            hp[k] += eps;
            let mut hm = h.clone();
            hm[k] -= eps;
            let numeric = (model.task_loss(&hp, &batch).unwrap() - model.task_loss(&hm, &batch).unwrap()) / (2.0 * eps);
            let scale = gh[k].abs().max(numeric.abs()).max(1e-4);
            prop_assert!((gh[k] - numeric).abs() / scale < 1e-5);
        }
    }

    #[test]
    fn sgd_step_forward_then_back_restores_parameters(seed in any::<u64>(), lr in 1e-4f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = MlpParams::init(&[3, 5, 2], &mut rng).unwrap();
        let mut g = Gradients::zeros_like(&p);
        for w in &mut g.weights {
            for v in w.as_mut_slice() {
                *v = rng.random_range(-2.0..2.0);
            }
        }
        let mut neg = g.clone();
        neg.scale(-1.0);
        let back = p.sgd_step(&g, lr).unwrap().sgd_step(&neg, lr).unwrap();
        for (a, b) in p.params_flat().iter().zip(back.params_flat()) {
            prop_assert!((a - b).abs() <= 1e-14 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn reptile_update_is_exact_interpolation(seed in any::<u64>(), alpha in prop_oneof![Just(0.0), Just(1.0), 0.0f64..=1.0]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = MlpParams::init(&[2, 4, 3], &mut rng).unwrap();
        let phi = MlpParams::init(&[2, 4, 3], &mut rng).unwrap();
        let h = TaskEmbedding::new(0, (0..3).map(|_| rng.random_range(-1.0..1.0)).collect());
        let h2 = TaskEmbedding::new(0, (0..3).map(|_| rng.random_range(-1.0..1.0)).collect());
        let (t, hn) = reptile_outer_update(&theta, &phi, &h, &h2, alpha).unwrap();
        let (a, b, got) = (theta.params_flat(), phi.params_flat(), t.params_flat());
        for i in 0..a.len() {
            // a + (b - a) can round away from b, so the endpoint is exact by definition.
            let expected = if alpha == 1.0 { b[i] } else { a[i] + alpha * (b[i] - a[i]) };
            prop_assert!(ulps(got[i], expected) <= 1);
        }
        for i in 0..3 {
            let (x, y) = (h.values[i], h2.values[i]);
            let expected = if alpha == 1.0 { y } else { x + alpha * (y - x) };
            prop_assert!(ulps(hn.values[i], expected) <= 1);
        }
        if alpha == 1.0 {
            prop_assert_eq!(&got, &b);
        }
        if alpha == 0.0 {
            prop_assert_eq!(&got, &a);
        }
    }

    #[test]
    fn cosine_similarity_symmetric_and_scale_invariant(
        x in proptest::collection::vec(-5.0f64..5.0, 1..6),
        c in 0.01f64..100.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = x.iter().map(|_| rng.random_range(-5.0..5.0)).collect();
        prop_assume!(x.iter().any(|v| *v != 0.0) && y.iter().any(|v| *v != 0.0));
        let s = cosine_similarity(&x, &y).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert_eq!(s, cosine_similarity(&y, &x).unwrap());
        let cx: Vec<f64> = x.iter().map(|v| v * c).collect();
        prop_assert!((cosine_similarity(&cx, &y).unwrap() - s).abs() < 1e-12);
    }

    #[test]
    fn window_never_exceeds_capacity(cap in 1usize..10, extra in 0usize..15) {
        let mut w = ObservationWindow::new(cap).unwrap();
        for i in 0..cap + extra {
            w.push(Transition::new(vec![i as f64], vec![0.0], vec![0.0]));
            prop_assert!(w.len() <= cap);
        }
        let first = w.iter().next().unwrap().state[0] as usize;
        prop_assert_eq!(first, extra);
    }

    #[test]
    fn elite_filter_matches_counting_oracle(
        sims in proptest::collection::vec(prop_oneof![Just(0.5), -1.0f64..1.0], 1..40),
        seed in any::<u64>(),
        keep in 1usize..12,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rewards: Vec<f64> = sims.iter().map(|_| if rng.random_bool(0.2) { 1.0 } else { rng.random_range(-3.0..3.0) }).collect();
        let n = sims.len();
        let beats = |vals: &[f64], j: usize, i: usize| vals[j] > vals[i] || (vals[j] == vals[i] && j < i);
        let tier: Vec<usize> = (0..n)
            .filter(|&i| (0..n).filter(|&j| beats(&sims, j, i)).count() < 2 * keep)
            .collect();
        let expected: Vec<usize> = tier
            .iter()
            .copied()
            .filter(|&i| tier.iter().filter(|&&j| beats(&rewards, j, i)).count() < keep)
            .collect();
        let got = select_elites(&sims, &rewards, keep);
        prop_assert_eq!(&got, &expected);
        prop_assert_eq!(got.len(), keep.min(n));
    }

    #[test]
    fn distribution_update_respects_floor_and_formula(
        seed in any::<u64>(),
        lambda in prop_oneof![Just(0.0), Just(1.0), 0.0f64..=1.0],
        n_elites in 1usize..6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (horizon, ad, floor) = (4, 2, 1e-4);
        let mut d = ActionDistribution::new(horizon, ad, 0.5, floor);
        for t in 0..horizon {
            for k in 0..ad {
                d.mean[t][k] = rng.random_range(-1.0..1.0);
                d.var[t][k] = rng.random_range(floor..1.0);
            }
        }
        let elites: Vec<Vec<Vec<f64>>> = (0..n_elites)
            .map(|_| (0..horizon).map(|_| (0..ad).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
            .collect();
        let u = update_distribution(&d, &elites, lambda).unwrap();
        for t in 0..horizon {
            for k in 0..ad {
                let m: f64 = elites.iter().map(|e| e[t][k]).sum::<f64>() / n_elites as f64;
                let v: f64 = elites.iter().map(|e| (e[t][k] - m).powi(2)).sum::<f64>() / n_elites as f64;
                let em = (1.0 - lambda) * d.mean[t][k] + lambda * m;
                let ev = ((1.0 - lambda) * d.var[t][k] + lambda * v).max(floor);
                prop_assert!((u.mean[t][k] - em).abs() <= 4.0 * f64::EPSILON * (1.0 + em.abs()));
                prop_assert!((u.var[t][k] - ev).abs() <= 4.0 * f64::EPSILON * (1.0 + ev.abs()));
                prop_assert!(u.var[t][k] >= floor);
                if lambda == 0.0 {
                    prop_assert_eq!(u.mean[t][k], d.mean[t][k]);
                    prop_assert_eq!(u.var[t][k], d.var[t][k]);
                }
                if lambda == 1.0 {
                    prop_assert!(ulps(u.mean[t][k], m) <= 1);
                }
            }
        }
    }

    #[test]
    fn most_likely_embedding_minimizes_window_error(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_model(&mut rng, 2, 1, 2);
        let table = EmbeddingTable::init(5, 2, 1.0, &mut rng);
        let mut window = ObservationWindow::new(8).unwrap();
        for t in random_transitions(&mut rng, 11, 2, 1) {
            window.push(t);
        }
        let best = most_likely_embedding(&model, &table, &window).unwrap();
        let mse = |h: &[f64]| -> f64 {
            window.iter().map(|t| {
                let p = model.predict_next_state(&t.state, &t.action, h).unwrap();
                0.5 * p.iter().zip(&t.next_state).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            }).sum::<f64>() / window.len() as f64
        };
        let best_mse = mse(&best.values);
        for e in table.entries() {
            prop_assert!(best_mse <= mse(&e.values) + 1e-12);
        }
    }
}
