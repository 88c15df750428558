use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::enn::{EnnModel, NormStats, Transition};
use crate::error::Result;

/// Central-difference step.
const FD_STEP: f64 = 1e-6;
/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-4;
const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub cases: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn summary(&self) -> String {
        format!(
            "gradcheck: {} cases, {} partial derivatives, max relative error {:.3e} (tolerance {:.0e}): {}",
            self.cases,
            self.checked,
            self.max_rel_error,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn random_case(rng: &mut ChaCha8Rng) -> Result<(EnnModel, Vec<f64>, Vec<Transition>)> {
    let sd = rng.random_range(1..=4);
    let ad = rng.random_range(1..=2);
    let ed = rng.random_range(0..=3);
    let hidden: Vec<usize> = (0..rng.random_range(1..=2))
        .map(|_| rng.random_range(2..=8))
        .collect();
    let model = EnnModel::init(sd, ad, ed, &hidden, NormStats::identity(sd, ad), rng)?;
    let h: Vec<f64> = (0..ed).map(|_| rng.random_range(-1.0..1.0)).collect();
    let batch = (0..rng.random_range(1..=6))
        .map(|_| {
            let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<f64>>();
            Transition::new(v(sd), v(ad), v(sd))
        })
        .collect();
    Ok((model, h, batch))
}

/// Compares analytic task-loss gradients with central finite differences
/// over `cases` random networks, embeddings and batches.
pub fn cmd_gradcheck(cases: usize, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..cases {
        let (model, h, batch) = random_case(&mut rng)?;
        let (grads, h_grad) = model.task_loss_grads(&h, &batch)?;
        let analytic = grads.params_flat();
        let n_params = model.params().param_count();
        for i in 0..n_params {
            let mut plus = model.params().clone();
            *plus.param_mut(i).expect("index in range") += FD_STEP;
            let mut minus = model.params().clone();
            *minus.param_mut(i).expect("index in range") -= FD_STEP;
            let lp = model.with_params(plus)?.task_loss(&h, &batch)?;
            let lm = model.with_params(minus)?.task_loss(&h, &batch)?;
            worst = worst.max(rel_error(analytic[i], (lp - lm) / (2.0 * FD_STEP)));
            checked += 1;
        }
        for (k, g) in h_grad.iter().enumerate() {
            let mut hp = h.clone();
            hp[k] += FD_STEP;
            let mut hm = h.clone();
            hm[k] -= FD_STEP;
            let numeric = (model.task_loss(&hp, &batch)? - model.task_loss(&hm, &batch)?) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(*g, numeric));
            checked += 1;
        }
    }
    Ok(GradcheckReport {
        cases,
        checked,
        max_rel_error: worst,
        tolerance: TOLERANCE,
        passed: worst < TOLERANCE,
    })
}
