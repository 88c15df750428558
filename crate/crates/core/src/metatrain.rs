//! Random-action data collection and REPTILE meta-training of the network
//! parameters jointly with one embedding per training task.

use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::enn::{EmbeddingTable, EnnModel, NormStats, TaskEmbedding, Transition, TransitionDataset};
use crate::envworld::{EnvConfig, TaskSpec};
use crate::error::{Error, Result};
use crate::ndmath::MlpParams;

/// Network shape shared by every model in an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    /// Embeddings start uniform in `[-scale, scale]`.
    pub embedding_init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![64, 64],
            embedding_dim: 5,
            embedding_init_scale: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::config(format!("{path}.hidden"), "layer widths must be >= 1"));
        }
        if !(self.embedding_init_scale.is_finite() && self.embedding_init_scale >= 0.0) {
            return Err(Error::config(
                format!("{path}.embedding_init_scale"),
                "must be finite and >= 0",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaTrainConfig {
    pub n_tasks: usize,
    pub samples_per_task: usize,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub outer_iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        MetaTrainConfig {
            n_tasks: 8,
            samples_per_task: 2000,
            inner_steps: 20,
            inner_lr: 1e-3,
            outer_lr: 0.2,
            outer_iterations: 3000,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        let at_least_one = [
            ("n_tasks", self.n_tasks),
            ("samples_per_task", self.samples_per_task),
            ("inner_steps", self.inner_steps),
            ("batch_size", self.batch_size),
        ];
        for (key, v) in at_least_one {
            if v == 0 {
                return Err(Error::config(format!("{path}.{key}"), "must be >= 1"));
            }
        }
        if !(self.inner_lr.is_finite() && self.inner_lr > 0.0) {
            return Err(Error::config(
                format!("{path}.inner_lr"),
                format!("must be > 0, got {}", self.inner_lr),
            ));
        }
        if !(self.outer_lr > 0.0 && self.outer_lr <= 1.0) {
            return Err(Error::config(
                format!("{path}.outer_lr"),
                format!("must lie in (0, 1], got {}", self.outer_lr),
            ));
        }
        Ok(())
    }
}

/// Gathers `n` transitions under uniformly random actions, resetting whenever
/// an episode ends.
pub fn collect_task_data(
    env: &EnvConfig,
    task: &TaskSpec,
    task_id: Option<usize>,
    n: usize,
    seed: u64,
) -> Result<TransitionDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one transition".into()));
    }
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = task.action_bound();
    let mut ds = TransitionDataset::new(task.state_dim(), task.action_dim(), task_id);
    let mut state = env.family.collection_reset(&mut rng);
    let mut t = 0;
    while ds.len() < n {
        let action: Vec<f64> = (0..task.action_dim())
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let res = task.step(&state, &action, env.dt)?;
        ds.push(Transition::new(state, action, res.next_state.clone()))?;
        t += 1;
        if res.done || t >= env.collect_episode {
            state = env.family.collection_reset(&mut rng);
            t = 0;
        } else {
            state = res.next_state;
        }
    }
    Ok(ds)
}

/// Moves `(theta, h)` a fraction `alpha` of the way towards `(phi, h_adapted)`.
pub fn reptile_outer_update(
    theta: &MlpParams,
    phi: &MlpParams,
    h: &TaskEmbedding,
    h_adapted: &TaskEmbedding,
    alpha: f64,
) -> Result<(MlpParams, TaskEmbedding)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "outer learning rate must lie in [0, 1], got {alpha}"
        )));
    }
    if h.dim() != h_adapted.dim() {
        return Err(Error::dim("reptile embedding", h.dim(), h_adapted.dim()));
    }
    let params = theta.interpolate(phi, alpha)?;
    let mut values = h.values.clone();
    crate::ndmath::lerp_into(&mut values, &h_adapted.values, alpha);
    Ok((params, TaskEmbedding::new(h.id, values)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub task_id: usize,
    pub pre_loss: f64,
    pub post_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetaTrainReport {
    pub records: Vec<IterationRecord>,
}

impl MetaTrainReport {
    pub fn mean_pre_loss(&self) -> f64 {
        mean(self.records.iter().map(|r| r.pre_loss))
    }

    pub fn mean_post_loss(&self) -> f64 {
        mean(self.records.iter().map(|r| r.post_loss))
    }

    /// `iteration,task_id,pre_loss,post_loss`
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Parse {
            what: "training curve CSV".into(),
            reason: e.to_string(),
        };
        w.write_record(["iteration", "task_id", "pre_loss", "post_loss"])
            .map_err(err)?;
        for r in &self.records {
            w.write_record([
                r.iteration.to_string(),
                r.task_id.to_string(),
                r.pre_loss.to_string(),
                r.post_loss.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io("training curve CSV", e))?;
        Ok(())
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

pub struct MetaTrainOutput {
    pub model: EnnModel,
    pub table: EmbeddingTable,
    pub report: MetaTrainReport,
}

/// Initial model and embeddings before any outer iteration.
pub fn initial_model(
    datasets: &[TransitionDataset],
    model_cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(EnnModel, EmbeddingTable)> {
    let norm = NormStats::fit(datasets)?;
    let first = &datasets[0];
    let model = EnnModel::init(
        first.state_dim(),
        first.action_dim(),
        model_cfg.embedding_dim,
        &model_cfg.hidden,
        norm,
        rng,
    )?;
    let table = EmbeddingTable::init(
        datasets.len(),
        model_cfg.embedding_dim,
        model_cfg.embedding_init_scale,
        rng,
    );
    Ok((model, table))
}

/// REPTILE over `(theta, H)`: each outer iteration adapts one task's copy of
/// the parameters and its embedding with `inner_steps` minibatch SGD steps,
/// then interpolates both towards the adapted values.
///
/// Tasks are visited round-robin in a fresh random order each epoch.
pub fn meta_train(
    datasets: &[TransitionDataset],
    model_cfg: &ModelConfig,
    cfg: &MetaTrainConfig,
) -> Result<MetaTrainOutput> {
    if datasets.is_empty() {
        return Err(Error::Empty("meta-training dataset list"));
    }
    if let Some(i) = datasets.iter().position(TransitionDataset::is_empty) {
        return Err(Error::InvalidArgument(format!("dataset of task {i} is empty")));
    }
    model_cfg.validate("model")?;
    cfg.validate("meta_train")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut model, mut table) = initial_model(datasets, model_cfg, &mut rng)?;
    let prepared = datasets
        .iter()
        .map(|d| model.prepare(d.transitions()))
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..datasets.len()).collect();
    let mut cursor = order.len();
    let mut report = MetaTrainReport::default();
    for iteration in 0..cfg.outer_iterations {
        if cursor == order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let task = order[cursor];
        cursor += 1;

        let data = &prepared[task];
        let h = table.get(task).expect("one embedding per dataset").clone();
        let eval_idx = index::sample(&mut rng, data.len(), cfg.batch_size.min(data.len())).into_vec();
        let eval = data.gather(&eval_idx);

        let pre_loss = model.task_loss_prepared(&h.values, &eval)?;
        let (phi, h_adapted) =
            model.inner_adapt_minibatch(&h, data, cfg.inner_steps, cfg.inner_lr, cfg.batch_size, &mut rng)
                .map_err(|e| Error::NonFinite(format!("outer iteration {iteration}: {e}")))?;
        let adapted = model.with_params(phi)?;
        let post_loss = adapted.task_loss_prepared(&h_adapted.values, &eval)?;
        if !(pre_loss.is_finite() && post_loss.is_finite()) {
            return Err(Error::NonFinite(format!(
                "task loss at outer iteration {iteration} (task {task})"
            )));
        }

        let (theta, h_new) =
            reptile_outer_update(model.params(), adapted.params(), &h, &h_adapted, cfg.outer_lr)?;
        model = model.with_params(theta)?;
        table.set(task, h_new.values)?;
        report.records.push(IterationRecord {
            iteration,
            task_id: task,
            pre_loss,
            post_loss,
        });
    }
    Ok(MetaTrainOutput {
        model,
        table,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envworld::FamilyConfig;

    /// Scalar "shift" tasks `s' = s + c`, action ignored.
    fn shift_dataset(c: f64, n: usize, id: usize, seed: u64) -> TransitionDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ts = (0..n)
            .map(|_| {
                let s = rng.random_range(-1.0..1.0);
                let a = rng.random_range(-1.0..1.0);
                Transition::new(vec![s], vec![a], vec![s + c])
            })
            .collect();
        TransitionDataset::from_transitions(1, 1, Some(id), ts).unwrap()
    }

    fn small_model() -> ModelConfig {
        ModelConfig {
            hidden: vec![8],
            embedding_dim: 2,
            embedding_init_scale: 0.1,
        }
    }

    #[test]
    fn reptile_update_arithmetic_and_endpoints() {
        let mut theta = MlpParams::zeros(&[1, 1]).unwrap();
        let mut phi = theta.clone();
        *phi.param_mut(0).unwrap() = 1.0;
        *phi.param_mut(1).unwrap() = 1.0;
        let h = TaskEmbedding::new(0, vec![0.0]);
        let h2 = TaskEmbedding::new(0, vec![1.0]);
        let (p, e) = reptile_outer_update(&theta, &phi, &h, &h2, 0.1).unwrap();
        assert_eq!(p.params_flat(), vec![0.1, 0.1]);
        assert_eq!(e.values, vec![0.1]);
        assert_eq!(reptile_outer_update(&theta, &phi, &h, &h2, 1.0).unwrap(), (phi.clone(), h2.clone()));
        assert_eq!(reptile_outer_update(&theta, &phi, &h, &h2, 0.0).unwrap(), (theta.clone(), h.clone()));
        *theta.param_mut(0).unwrap() = 3.0;
        assert!(reptile_outer_update(&theta, &phi, &h, &h2, 1.5).is_err());
        assert!(reptile_outer_update(&theta, &MlpParams::zeros(&[2, 1]).unwrap(), &h, &h2, 0.5).is_err());
    }

    #[test]
    fn zero_iterations_return_the_initial_model() {
        let data = vec![shift_dataset(0.1, 20, 0, 1), shift_dataset(-0.1, 20, 1, 2)];
        let cfg = MetaTrainConfig {
            n_tasks: 2,
            outer_iterations: 0,
            ..MetaTrainConfig::default()
        };
        let out = meta_train(&data, &small_model(), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (m0, t0) = initial_model(&data, &small_model(), &mut rng).unwrap();
        assert_eq!(out.model, m0);
        assert_eq!(out.table, t0);
        assert!(out.report.records.is_empty());
    }

    #[test]
    fn single_task_reptile_with_unit_step_is_sgd() {
        let data = vec![shift_dataset(0.3, 16, 0, 3)];
        let cfg = MetaTrainConfig {
            n_tasks: 1,
            inner_steps: 1,
            outer_lr: 1.0,
            outer_iterations: 1,
            batch_size: 16,
            inner_lr: 0.05,
            ..MetaTrainConfig::default()
        };
        let out = meta_train(&data, &small_model(), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (m0, t0) = initial_model(&data, &small_model(), &mut rng).unwrap();
        let (phi, h1) = m0
            .inner_adapt(t0.get(0).unwrap(), data[0].transitions(), 1, 0.05)
            .unwrap();
        // full-batch minibatch is a permutation, so only summation order differs
        for (a, b) in out.model.params().params_flat().iter().zip(phi.params_flat()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in out.table.get(0).unwrap().values.iter().zip(&h1.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn only_the_sampled_embedding_moves() {
        let data: Vec<_> = (0..3)
            .map(|i| shift_dataset(0.1 * i as f64, 30, i, 10 + i as u64))
            .collect();
        let cfg = MetaTrainConfig {
            n_tasks: 3,
            inner_steps: 3,
            outer_iterations: 1,
            batch_size: 8,
            inner_lr: 0.01,
            ..MetaTrainConfig::default()
        };
        let out = meta_train(&data, &small_model(), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (_, t0) = initial_model(&data, &small_model(), &mut rng).unwrap();
        let moved = out.report.records[0].task_id;
        for id in 0..3 {
            let same = out.table.get(id) == t0.get(id);
            assert_eq!(same, id != moved, "embedding {id}");
        }
    }

    #[test]
    fn meta_training_is_deterministic_and_adaptation_helps() {
        let data: Vec<_> = [-0.1, 0.0, 0.1]
            .iter()
            .enumerate()
            .map(|(i, c)| shift_dataset(*c, 200, i, 20 + i as u64))
            .collect();
        let cfg = MetaTrainConfig {
            n_tasks: 3,
            inner_steps: 5,
            inner_lr: 0.05,
            outer_lr: 0.3,
            outer_iterations: 300,
            batch_size: 16,
            seed: 4,
            ..MetaTrainConfig::default()
        };
        let a = meta_train(&data, &small_model(), &cfg).unwrap();
        let b = meta_train(&data, &small_model(), &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.table, b.table);
        assert_eq!(a.report, b.report);
        assert_eq!(a.report.records.len(), 300);
        assert!(a.report.mean_post_loss() < a.report.mean_pre_loss());
    }

    #[test]
    fn collection_is_seeded_and_matches_dynamics() {
        let env = EnvConfig::new(FamilyConfig::pendulum_default());
        let task = env.family.nominal_task();
        let a = collect_task_data(&env, &task, Some(0), 120, 9).unwrap();
        let b = collect_task_data(&env, &task, Some(0), 120, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 120);
        for t in a.transitions() {
            let r = task.step(&t.state, &t.action, env.dt).unwrap();
            assert_eq!(r.next_state, t.next_state);
            assert!(t.action[0].abs() <= task.action_bound());
        }
        assert_eq!(collect_task_data(&env, &task, None, 1, 1).unwrap().len(), 1);
        assert!(collect_task_data(&env, &task, None, 0, 1).is_err());
    }

    #[test]
    fn curve_csv_layout() {
        let report = MetaTrainReport {
            records: vec![IterationRecord {
                iteration: 0,
                task_id: 2,
                pre_loss: 0.5,
                post_loss: 0.25,
            }],
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "iteration,task_id,pre_loss,post_loss\n0,2,0.5,0.25\n"
        );
    }
}
