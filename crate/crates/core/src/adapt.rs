//! Online adaptation during meta-testing: a sliding window of recent
//! transitions selects the most likely task embedding, a few SGD steps adapt
//! the meta-trained model to it, and a planner acts on the result.

use std::collections::VecDeque;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::enn::{EmbeddingTable, EnnModel, TaskEmbedding, Transition};
use crate::envworld::{EnvConfig, TaskSpec};
use crate::error::{Error, Result};
use crate::ndmath::MlpParams;
use crate::planner::{Planner, Reference};

/// FIFO of the `capacity` most recent transitions.
#[derive(Clone, Debug)]
pub struct ObservationWindow {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ObservationWindow {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("window capacity must be >= 1".into()));
        }
        Ok(ObservationWindow {
            capacity,
            items: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends `t`, evicting the oldest entry when full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Oldest first.
    pub fn to_vec(&self) -> Vec<Transition> {
        self.items.iter().cloned().collect()
    }
}

/// Window loss of every table entry, in id order.
pub fn window_losses(
    model: &EnnModel,
    table: &EmbeddingTable,
    window: &ObservationWindow,
) -> Result<Vec<f64>> {
    if window.is_empty() {
        return Err(Error::Empty("observation window"));
    }
    if table.is_empty() {
        return Err(Error::Empty("embedding table"));
    }
    let prepared = model.prepare(&window.to_vec())?;
    table
        .entries()
        .iter()
        .map(|e| model.task_loss_prepared(&e.values, &prepared))
        .collect()
}

/// Table entry with the lowest window loss; ties go to the lowest id.
pub fn most_likely_embedding(
    model: &EnnModel,
    table: &EmbeddingTable,
    window: &ObservationWindow,
) -> Result<TaskEmbedding> {
    let losses = window_losses(model, table, window)?;
    let mut best = 0;
    for (i, l) in losses.iter().enumerate() {
        if l.is_nan() {
            return Err(Error::NonFinite(format!("window loss of embedding {i}")));
        }
        if *l < losses[best] {
            best = i;
        }
    }
    Ok(table.entries()[best].clone())
}

/// Parameters adapted online from the meta-trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedModel {
    pub params: MlpParams,
    pub embedding: TaskEmbedding,
    pub source_id: usize,
    pub steps: usize,
}

impl AdaptedModel {
    pub fn model(&self, base: &EnnModel) -> Result<EnnModel> {
        base.with_params(self.params.clone())
    }
}

/// `steps` full-batch SGD steps on the window from `(model, h_likely)`.
pub fn online_adapt(
    model: &EnnModel,
    h_likely: &TaskEmbedding,
    window: &ObservationWindow,
    steps: usize,
    lr: f64,
) -> Result<AdaptedModel> {
    if steps == 0 {
        return Ok(AdaptedModel {
            params: model.params().clone(),
            embedding: h_likely.clone(),
            source_id: h_likely.id,
            steps,
        });
    }
    if window.is_empty() {
        return Err(Error::Empty("observation window"));
    }
    let (params, embedding) = model.inner_adapt(h_likely, &window.to_vec(), steps, lr)?;
    Ok(AdaptedModel {
        params,
        embedding,
        source_id: h_likely.id,
        steps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Window capacity `o`.
    pub window: usize,
    /// SGD steps `g` per control step.
    pub adapt_steps: usize,
    pub adapt_lr: f64,
    /// Re-selection period; `None` means every `window` steps.
    pub reselect_every: Option<usize>,
    /// Control steps planned with the unadapted model before adaptation starts.
    pub bootstrap_steps: usize,
    /// Wall-clock planning time in traces (makes traces run-dependent).
    pub record_plan_time: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            window: 32,
            adapt_steps: 5,
            adapt_lr: 1e-3,
            reselect_every: None,
            bootstrap_steps: 5,
            record_plan_time: false,
        }
    }
}

impl AdaptConfig {
    pub fn reselect_period(&self) -> usize {
        self.reselect_every.unwrap_or(self.window)
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if self.window == 0 {
            return Err(Error::config(format!("{path}.window"), "must be >= 1"));
        }
        if !(self.adapt_lr.is_finite() && self.adapt_lr > 0.0) {
            return Err(Error::config(
                format!("{path}.adapt_lr"),
                format!("must be > 0, got {}", self.adapt_lr),
            ));
        }
        if self.reselect_every == Some(0) {
            return Err(Error::config(format!("{path}.reselect_every"), "must be >= 1"));
        }
        if self.bootstrap_steps == 0 || self.bootstrap_steps > self.window {
            return Err(Error::config(
                format!("{path}.bootstrap_steps"),
                format!("must lie in [1, window = {}]", self.window),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlannerKind {
    Mpc,
    AnchorMpc,
    Mac,
}

impl PlannerKind {
    pub fn name(self) -> &'static str {
        match self {
            PlannerKind::Mpc => "mpc",
            PlannerKind::AnchorMpc => "anchor-mpc",
            PlannerKind::Mac => "mac",
        }
    }
}

/// Everything a meta-test episode reads but never modifies.
#[derive(Clone, Copy, Debug)]
pub struct MetaTest<'a> {
    pub env: &'a EnvConfig,
    pub task: &'a TaskSpec,
    pub model: &'a EnnModel,
    pub table: &'a EmbeddingTable,
    pub reference: &'a Reference,
    pub kind: PlannerKind,
    pub adapt: &'a AdaptConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub embedding_id: usize,
    pub mean_similarity: Option<f64>,
    pub max_similarity: Option<f64>,
    pub elite_reward: f64,
    /// Cosine similarity of the visited next state to the reference-predicted one.
    pub ref_similarity: f64,
    pub rejected: usize,
    pub plan_time_ms: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeTrace {
    pub rows: Vec<TraceRow>,
    /// Why the episode stopped early, if it did.
    pub aborted: Option<String>,
}

impl EpisodeTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn cumulative_reward(&self) -> f64 {
        self.rows.iter().map(|r| r.reward).sum()
    }

    /// Mean reference similarity; 0 for an empty trace.
    pub fn mean_ref_similarity(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.ref_similarity).sum::<f64>() / self.rows.len() as f64
    }

    pub fn write_csv<W: Write>(&self, out: W, state_dim: usize, action_dim: usize) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string()];
        header.extend((0..state_dim).map(|i| format!("s{i}")));
        header.extend((0..action_dim).map(|i| format!("a{i}")));
        header.extend(
            [
                "reward",
                "embedding_id",
                "mean_similarity",
                "max_similarity",
                "elite_reward",
                "ref_similarity",
                "rejected",
                "plan_time_ms",
            ]
            .map(String::from),
        );
        w.write_record(&header).map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let mut rec = vec![r.step.to_string()];
            rec.extend(r.state.iter().map(f64::to_string));
            rec.extend(r.action.iter().map(f64::to_string));
            rec.push(r.reward.to_string());
            rec.push(r.embedding_id.to_string());
            rec.push(opt(r.mean_similarity));
            rec.push(opt(r.max_similarity));
            rec.push(r.elite_reward.to_string());
            rec.push(r.ref_similarity.to_string());
            rec.push(r.rejected.to_string());
            rec.push(opt(r.plan_time_ms));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Parse {
            what: "trace csv".into(),
            reason: e.to_string(),
        })?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse {
        what: "trace csv".into(),
        reason: e.to_string(),
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::Diverged(_))
}

/// Runs one meta-test episode of `steps` control steps from `start`.
///
/// The first `bootstrap_steps` steps plan with the unadapted model and
/// embedding 0. Afterwards the most likely embedding is re-selected every
/// `reselect_period` steps and the model is adapted from the meta-trained
/// parameters at every step.
pub fn run_meta_test(
    setup: &MetaTest<'_>,
    planner: &mut Planner,
    start: Vec<f64>,
    steps: usize,
) -> Result<EpisodeTrace> {
    let MetaTest {
        env,
        task,
        model,
        table,
        reference,
        kind,
        adapt,
    } = *setup;
    adapt.validate("adapt")?;
    if table.is_empty() {
        return Err(Error::Empty("embedding table"));
    }
    if start.len() != task.state_dim() {
        return Err(Error::dim("episode start state", task.state_dim(), start.len()));
    }
    if model.state_dim() != task.state_dim() || model.action_dim() != task.action_dim() {
        return Err(Error::dim(
            "meta-test model",
            format!("{}/{}", task.state_dim(), task.action_dim()),
            format!("{}/{}", model.state_dim(), model.action_dim()),
        ));
    }
    let dims = planner.config().similarity_dims.clone();
    let horizon = planner.config().horizon;
    let mut window = ObservationWindow::new(adapt.window)?;
    let mut trace = EpisodeTrace::default();
    let mut state = start;
    let mut likely = table.entries()[0].clone();
    let reward_fn = |s: &[f64], a: &[f64]| task.reward(s, a);

    for t in 0..steps {
        let clock = Instant::now();
        let bootstrap = t < adapt.bootstrap_steps;
        let planned: Result<(Vec<f64>, usize)> = (|| {
            if bootstrap {
                let a = planner.mpc_plan(model, &likely.values, &state, reward_fn)?;
                return Ok((a, likely.id));
            }
            if (t - adapt.bootstrap_steps) % adapt.reselect_period() == 0 {
                likely = most_likely_embedding(model, table, &window)?;
            }
            let adapted = online_adapt(model, &likely, &window, adapt.adapt_steps, adapt.adapt_lr)?;
            let phi = adapted.model(model)?;
            let h = &adapted.embedding.values;
            let a = match kind {
                PlannerKind::Mpc => planner.mpc_plan(&phi, h, &state, reward_fn)?,
                PlannerKind::AnchorMpc => {
                    let anchors = reference.anchor_trajectory(&state, horizon)?;
                    planner.anchor_mpc_plan(&phi, h, &state, reward_fn, &anchors)?
                }
                PlannerKind::Mac => planner.mac_plan(&phi, h, reference, &state, reward_fn)?,
            };
            Ok((a, adapted.source_id))
        })();
        let (action, embedding_id) = match planned {
            Ok(v) => v,
            Err(e) if is_divergence(&e) => {
                trace.aborted = Some(format!("planning failed at step {t}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let plan_time_ms = clock.elapsed().as_secs_f64() * 1e3;
        let action = task.clip_action(&action);
        let diag = planner.diagnostics().clone();

        let s_ref = reference.next_states(&[&state])?.remove(0);
        let res = task.step(&state, &action, env.dt)?;
        let ref_similarity = reference.similarity(&res.next_state, &s_ref, dims.as_deref());
        let mac_diag = !bootstrap && kind == PlannerKind::Mac;
        trace.rows.push(TraceRow {
            step: t,
            state: state.clone(),
            action: action.clone(),
            reward: res.reward,
            embedding_id,
            mean_similarity: diag.mean_elite_similarity.filter(|_| mac_diag),
            max_similarity: diag.max_elite_similarity.filter(|_| mac_diag),
            elite_reward: diag.elite_reward,
            ref_similarity,
            rejected: diag.rejected,
            plan_time_ms: adapt.record_plan_time.then_some(plan_time_ms),
        });
        window.push(Transition::new(state, action, res.next_state.clone()));
        state = res.next_state;
        if res.done || state.iter().any(|v| !v.is_finite()) {
            trace.aborted = Some(format!("environment diverged at step {t}"));
            break;
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enn::NormStats;
    use crate::envworld::{FamilyConfig, ReferencePolicy};
    use crate::planner::PlannerConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(i: usize) -> Transition {
        Transition::new(vec![i as f64], vec![0.0], vec![i as f64 + 1.0])
    }

    #[test]
    fn window_evicts_oldest_first() {
        let mut w = ObservationWindow::new(3).unwrap();
        for i in 0..5 {
            w.push(tr(i));
            assert!(w.len() <= 3);
        }
        let kept: Vec<f64> = w.iter().map(|t| t.state[0]).collect();
        assert_eq!(kept, vec![2.0, 3.0, 4.0]);
        assert!(ObservationWindow::new(0).is_err());
    }

    fn pendulum_parts(seed: u64) -> (EnvConfig, EnnModel, EmbeddingTable, Reference) {
        let env = EnvConfig::new(FamilyConfig::pendulum_default());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = EnnModel::init(3, 1, 2, &[16], NormStats::identity(3, 1), &mut rng).unwrap();
        let table = EmbeddingTable::init(3, 2, 0.5, &mut rng);
        let reference = Reference {
            model: model.clone(),
            embedding: table.entries()[0].values.clone(),
            policy: ReferencePolicy::for_task(&env.family.nominal_task()),
        };
        (env, model, table, reference)
    }

    fn filled_window(env: &EnvConfig, n: usize) -> ObservationWindow {
        let task = env.family.nominal_task();
        let mut w = ObservationWindow::new(32).unwrap();
        let mut s = crate::envworld::pendulum_state(2.0, 0.0);
        for i in 0..n {
            let a = vec![(i as f64 * 0.7).sin()];
            let n = task.step(&s, &a, env.dt).unwrap().next_state;
            w.push(Transition::new(s, a, n.clone()));
            s = n;
        }
        w
    }

    #[test]
    fn most_likely_has_minimal_window_loss() {
        let (env, model, table, _) = pendulum_parts(1);
        let w = filled_window(&env, 20);
        let best = most_likely_embedding(&model, &table, &w).unwrap();
        let losses = window_losses(&model, &table, &w).unwrap();
        assert!(losses.iter().all(|l| losses[best.id] <= *l));
        assert!(most_likely_embedding(&model, &table, &ObservationWindow::new(4).unwrap()).is_err());
    }

    #[test]
    fn tie_goes_to_lowest_id() {
        let (env, model, _, _) = pendulum_parts(2);
        let table = EmbeddingTable::new(2, vec![vec![0.3, 0.1]; 3]).unwrap();
        let w = filled_window(&env, 8);
        assert_eq!(most_likely_embedding(&model, &table, &w).unwrap().id, 0);
    }

    #[test]
    fn zero_steps_returns_copies() {
        let (env, model, table, _) = pendulum_parts(3);
        let w = filled_window(&env, 8);
        let h = table.entries()[1].clone();
        let a = online_adapt(&model, &h, &w, 0, 1e-3).unwrap();
        assert_eq!(&a.params, model.params());
        assert_eq!(a.embedding, h);
        assert_eq!(a.source_id, 1);
    }

    #[test]
    fn adaptation_lowers_window_loss() {
        let (env, model, table, _) = pendulum_parts(4);
        let w = filled_window(&env, 32);
        let h = table.entries()[0].clone();
        let before = model.task_loss(&h.values, &w.to_vec()).unwrap();
        let a = online_adapt(&model, &h, &w, 5, 1e-2).unwrap();
        let after = a
            .model(&model)
            .unwrap()
            .task_loss(&a.embedding.values, &w.to_vec())
            .unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    fn small_planner(seed: u64) -> Planner {
        Planner::new(
            PlannerConfig {
                horizon: 4,
                elites: 4,
                branches: 4,
                seed,
                ..PlannerConfig::default()
            },
            1,
            5.0,
        )
        .unwrap()
    }

    #[test]
    fn episode_bookkeeping_and_immutability() {
        let (env, model, table, reference) = pendulum_parts(5);
        let task = env.family.nominal_task();
        let adapt = AdaptConfig {
            window: 8,
            ..AdaptConfig::default()
        };
        let model_before = model.clone();
        let table_before = table.clone();
        for kind in [PlannerKind::Mpc, PlannerKind::AnchorMpc, PlannerKind::Mac] {
            let setup = MetaTest {
                env: &env,
                task: &task,
                model: &model,
                table: &table,
                reference: &reference,
                kind,
                adapt: &adapt,
            };
            let start = crate::envworld::pendulum_state(3.0, 0.0);
            let empty = run_meta_test(&setup, &mut small_planner(0), start.clone(), 0).unwrap();
            assert!(empty.is_empty());
            let trace = run_meta_test(&setup, &mut small_planner(0), start.clone(), 20).unwrap();
            assert_eq!(trace.len(), 20);
            assert!(trace.aborted.is_none());
            let sum: f64 = trace.rows.iter().map(|r| r.reward).sum();
            assert_eq!(trace.cumulative_reward(), sum);
            assert!(trace.rows[..5].iter().all(|r| r.embedding_id == 0));
            assert_eq!(
                trace.rows.iter().any(|r| r.mean_similarity.is_some()),
                kind == PlannerKind::Mac
            );
            let again = run_meta_test(&setup, &mut small_planner(0), start, 20).unwrap();
            assert_eq!(trace, again);
        }
        assert_eq!(model, model_before);
        assert_eq!(table, table_before);
    }

    #[test]
    fn trace_csv_layout() {
        let (env, model, table, reference) = pendulum_parts(6);
        let task = env.family.nominal_task();
        let adapt = AdaptConfig::default();
        let setup = MetaTest {
            env: &env,
            task: &task,
            model: &model,
            table: &table,
            reference: &reference,
            kind: PlannerKind::Mac,
            adapt: &adapt,
        };
        let trace = run_meta_test(&setup, &mut small_planner(1), vec![-1.0, 0.0, 0.0], 3).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf, 3, 1).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,s0,s1,s2,a0,reward,embedding_id,mean_similarity,max_similarity,elite_reward,ref_similarity,rejected,plan_time_ms"
        );
        assert_eq!(lines.count(), 3);
    }
}
