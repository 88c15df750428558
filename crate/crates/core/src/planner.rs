//! Sampling-based planners over a learned dynamics model.
//!
//! * [`Planner::mpc_plan`]: random shooting with CEM refinement.
//! * [`Planner::anchor_mpc_plan`]: the same search, rejecting candidates whose
//!   predicted states leave an elementwise band of width `delta` around a
//!   given anchor trajectory.
//! * [`Planner::mac_plan`]: the meta adaptation controller. A frontier of
//!   `elites` partial plans is grown one depth at a time; at every depth the
//!   children most cosine-similar to what the reference policy would reach in
//!   the reference task form a tier, and the highest-reward members of that
//!   tier survive.
//!
//! All three draw actions step-major (every candidate's action for depth `t`
//! before any action for depth `t + 1`), so with `elites == candidates` MAC and
//! MPC consume the RNG stream identically.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::enn::EnnModel;
use crate::envworld::ReferencePolicy;
use crate::error::{Error, Result};
use crate::ndmath::{dot, norm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    /// Planning horizon.
    pub horizon: usize,
    /// Candidates kept after each filtering step.
    pub elites: usize,
    /// Children sampled per frontier state; `elites * branches` candidates per depth.
    pub branches: usize,
    /// Anchor band half-width; `None` disables the constraint.
    pub anchor_delta: Option<f64>,
    /// Distribution smoothing towards the elite statistics.
    pub smoothing: f64,
    pub cem_iterations: usize,
    pub seed: u64,
    pub min_variance: f64,
    pub init_variance: f64,
    /// Blend of the shifted variance back towards `init_variance` between calls.
    pub variance_reset: f64,
    /// Std of Gaussian jitter on reference actions (0 = deterministic).
    pub reference_jitter: f64,
    /// State dimensions compared by the similarity measure (`None` = all).
    pub similarity_dims: Option<Vec<usize>>,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            horizon: 15,
            elites: 32,
            branches: 16,
            anchor_delta: None,
            smoothing: 0.7,
            cem_iterations: 1,
            seed: 0,
            min_variance: 1e-4,
            init_variance: 1.0,
            variance_reset: 0.5,
            reference_jitter: 0.0,
            similarity_dims: None,
        }
    }
}

impl PlannerConfig {
    pub fn candidates(&self) -> usize {
        self.elites * self.branches
    }

    fn delta(&self) -> f64 {
        self.anchor_delta.unwrap_or(f64::INFINITY)
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let counts = [
            ("horizon", self.horizon),
            ("elites", self.elites),
            ("branches", self.branches),
            ("cem_iterations", self.cem_iterations),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{path}.{key}"), "must be >= 1"));
            }
        }
        if !(self.smoothing > 0.0 && self.smoothing <= 1.0) {
            return Err(Error::config(
                format!("{path}.smoothing"),
                format!("must lie in (0, 1], got {}", self.smoothing),
            ));
        }
        if !(self.min_variance.is_finite() && self.min_variance > 0.0) {
            return Err(Error::config(format!("{path}.min_variance"), "must be > 0"));
        }
        if !(self.init_variance.is_finite() && self.init_variance >= self.min_variance) {
            return Err(Error::config(
                format!("{path}.init_variance"),
                "must be finite and >= min_variance",
            ));
        }
        if !(0.0..=1.0).contains(&self.variance_reset) {
            return Err(Error::config(format!("{path}.variance_reset"), "must lie in [0, 1]"));
        }
        if !(self.reference_jitter.is_finite() && self.reference_jitter >= 0.0) {
            return Err(Error::config(format!("{path}.reference_jitter"), "must be >= 0"));
        }
        if let Some(d) = self.anchor_delta {
            if d.is_nan() || d <= 0.0 {
                return Err(Error::config(
                    format!("{path}.anchor_delta"),
                    format!("must be > 0, got {d}"),
                ));
            }
        }
        if matches!(&self.similarity_dims, Some(d) if d.is_empty()) {
            return Err(Error::config(
                format!("{path}.similarity_dims"),
                "must name at least one dimension",
            ));
        }
        Ok(())
    }
}

/// `x . y / (|x| |y|)`. Zero vectors are an error.
pub fn cosine_similarity(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("cosine similarity", x.len(), y.len()));
    }
    let (nx, ny) = (norm(x), norm(y));
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::InvalidArgument(
            "cosine similarity of a zero vector".into(),
        ));
    }
    Ok((dot(x, y) / (nx * ny)).clamp(-1.0, 1.0))
}

/// Cosine similarity that maps a zero operand to 0 instead of failing.
fn guarded_cosine(x: &[f64], y: &[f64], zero_hits: &mut usize) -> f64 {
    match cosine_similarity(x, y) {
        Ok(v) => v,
        Err(_) => {
            *zero_hits += 1;
            0.0
        }
    }
}

/// Per-depth diagonal Gaussian over action sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
    pub min_variance: f64,
}

impl ActionDistribution {
    pub fn new(horizon: usize, action_dim: usize, init_variance: f64, min_variance: f64) -> Self {
        ActionDistribution {
            mean: vec![vec![0.0; action_dim]; horizon],
            var: vec![vec![init_variance.max(min_variance); action_dim]; horizon],
            min_variance,
        }
    }

    pub fn horizon(&self) -> usize {
        self.mean.len()
    }

    fn sample(&self, t: usize, bound: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.mean[t]
            .iter()
            .zip(&self.var[t])
            .map(|(m, v)| {
                let z: f64 = StandardNormal.sample(rng);
                (m + v.sqrt() * z).clamp(-bound, bound)
            })
            .collect()
    }

    /// Moves one step forward in time: drops depth 0, repeats the last mean,
    /// and pulls variances back towards `init_variance`.
    fn shift(&mut self, init_variance: f64, reset: f64) {
        if self.mean.is_empty() {
            return;
        }
        self.mean.rotate_left(1);
        let n = self.mean.len();
        if n > 1 {
            self.mean[n - 1] = self.mean[n - 2].clone();
        }
        self.var.rotate_left(1);
        if n > 1 {
            self.var[n - 1] = self.var[n - 2].clone();
        }
        for row in &mut self.var {
            for v in row.iter_mut() {
                *v = (*v + reset * (init_variance - *v)).max(self.min_variance);
            }
        }
    }

    pub fn min_var(&self) -> f64 {
        self.var
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, v| m.min(*v))
    }
}

/// `mu' = (1 - l) mu + l * elite_mean`, `var' = max((1 - l) var + l * elite_var, floor)`.
pub fn update_distribution(
    dist: &ActionDistribution,
    elites: &[Vec<Vec<f64>>],
    smoothing: f64,
) -> Result<ActionDistribution> {
    if elites.is_empty() {
        return Err(Error::Empty("elite set"));
    }
    if !(0.0..=1.0).contains(&smoothing) {
        return Err(Error::InvalidArgument(format!(
            "smoothing must lie in [0, 1], got {smoothing}"
        )));
    }
    let horizon = dist.horizon();
    if let Some(bad) = elites
        .iter()
        .find(|e| e.len() != horizon || e.iter().zip(&dist.mean).any(|(a, m)| a.len() != m.len()))
    {
        return Err(Error::dim(
            "elite sequence",
            format!("{horizon} steps"),
            format!("{} steps", bad.len()),
        ));
    }
    let n = elites.len() as f64;
    let mut out = dist.clone();
    for t in 0..horizon {
        for d in 0..dist.mean[t].len() {
            let mean = elites.iter().map(|e| e[t][d]).sum::<f64>() / n;
            let var = elites.iter().map(|e| (e[t][d] - mean).powi(2)).sum::<f64>() / n;
            let (m, v) = (dist.mean[t][d], dist.var[t][d]);
            out.mean[t][d] = if smoothing == 1.0 {
                mean
            } else {
                m + smoothing * (mean - m)
            };
            let blended = if smoothing == 1.0 {
                var
            } else {
                v + smoothing * (var - v)
            };
            out.var[t][d] = blended.max(dist.min_variance);
        }
    }
    Ok(out)
}

/// The reference task's model, embedding and controller.
#[derive(Clone, Debug)]
pub struct Reference {
    pub model: EnnModel,
    pub embedding: Vec<f64>,
    pub policy: ReferencePolicy,
}

impl Reference {
    /// Model-predicted outcome of the reference action from each state.
    pub fn next_states<S: AsRef<[f64]>>(&self, states: &[S]) -> Result<Vec<Vec<f64>>> {
        reference_next_states(&self.model, &self.embedding, states, &self.policy)
    }

    /// States visited by rolling the reference policy through the reference
    /// model for `horizon` steps from `s`; element `t` is the state after `t + 1` steps.
    pub fn anchor_trajectory(&self, s: &[f64], horizon: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(horizon);
        let mut state = s.to_vec();
        for _ in 0..horizon {
            let a = self.policy.action(&state)?;
            state = self.model.predict_next_state(&state, &a, &self.embedding)?;
            out.push(state.clone());
        }
        Ok(out)
    }

    /// Normalized (and masked) state used by the similarity measure.
    pub fn similarity_view(&self, state: &[f64], dims: Option<&[usize]>) -> Vec<f64> {
        let z = self.model.norm().state.normalize(state);
        match dims {
            Some(d) => d.iter().map(|&i| z[i]).collect(),
            None => z,
        }
    }

    /// Guarded cosine similarity of two raw states in normalized space.
    pub fn similarity(&self, a: &[f64], b: &[f64], dims: Option<&[usize]>) -> f64 {
        let mut zero = 0;
        guarded_cosine(
            &self.similarity_view(a, dims),
            &self.similarity_view(b, dims),
            &mut zero,
        )
    }
}

/// `f_theta*(s, pi_ref(s), h_ref)` for every state.
pub fn reference_next_states<S: AsRef<[f64]>>(
    model: &EnnModel,
    h_ref: &[f64],
    states: &[S],
    policy: &ReferencePolicy,
) -> Result<Vec<Vec<f64>>> {
    if states.is_empty() {
        return Ok(Vec::new());
    }
    let actions = states
        .iter()
        .map(|s| policy.action(s.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    model.predict_batch(states, &actions, h_ref)
}

/// What the last planning call saw.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlanDiagnostics {
    /// Mean over final elites of their average per-depth similarity (MAC only).
    pub mean_elite_similarity: Option<f64>,
    pub max_elite_similarity: Option<f64>,
    /// Predicted return of the chosen sequence.
    pub elite_reward: f64,
    /// Candidates rejected by the anchor band (anchor mode).
    pub rejected: usize,
    /// Every candidate violated the anchors; the least violating one was used.
    pub fallback: bool,
    /// Similarity evaluations that hit a zero vector.
    pub zero_similarity: usize,
    /// Frontier size after each depth (MAC only).
    pub frontier_sizes: Vec<usize>,
}

/// Indices of the `keep` best candidates: the `2 * keep` most similar form a
/// tier, and the highest-reward members of the tier survive. Ties go to the
/// lower index. Returned in ascending index order.
pub fn select_elites(similarity: &[f64], reward: &[f64], keep: usize) -> Vec<usize> {
    let n = similarity.len().min(reward.len());
    let mut idx: Vec<usize> = (0..n).collect();
    let tier = (2 * keep).min(n);
    idx.sort_by(|&a, &b| similarity[b].total_cmp(&similarity[a]).then(a.cmp(&b)));
    idx.truncate(tier);
    idx.sort_by(|&a, &b| reward[b].total_cmp(&reward[a]).then(a.cmp(&b)));
    idx.truncate(keep.min(tier));
    idx.sort_unstable();
    idx
}

/// Indices of the `keep` highest rewards, ties to the lower index, ascending.
fn top_by_reward(reward: &[f64], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..reward.len()).collect();
    idx.sort_by(|&a, &b| reward[b].total_cmp(&reward[a]).then(a.cmp(&b)));
    idx.truncate(keep);
    idx.sort_unstable();
    idx
}

fn argmax(values: &[f64]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_nan())
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

struct Node {
    state: Vec<f64>,
    actions: Vec<Vec<f64>>,
    reward: f64,
    similarity: f64,
}

/// Stateful planner: owns the warm-started action distribution and the RNG.
#[derive(Clone, Debug)]
pub struct Planner {
    config: PlannerConfig,
    action_dim: usize,
    action_bound: f64,
    dist: ActionDistribution,
    rng: ChaCha8Rng,
    diagnostics: PlanDiagnostics,
}

impl Planner {
    pub fn new(config: PlannerConfig, action_dim: usize, action_bound: f64) -> Result<Self> {
        config.validate("planner")?;
        if action_dim == 0 {
            return Err(Error::InvalidArgument("action dimension must be >= 1".into()));
        }
        if !(action_bound.is_finite() && action_bound > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "action bound must be positive, got {action_bound}"
            )));
        }
        let dist = ActionDistribution::new(
            config.horizon,
            action_dim,
            config.init_variance,
            config.min_variance,
        );
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Planner {
            config,
            action_dim,
            action_bound,
            dist,
            rng,
            diagnostics: PlanDiagnostics::default(),
        })
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.config
    }

    pub fn distribution(&self) -> &ActionDistribution {
        &self.dist
    }

    pub fn diagnostics(&self) -> &PlanDiagnostics {
        &self.diagnostics
    }

    fn check_inputs(&self, model: &EnnModel, s: &[f64]) -> Result<()> {
        if model.action_dim() != self.action_dim {
            return Err(Error::dim("planner action", self.action_dim, model.action_dim()));
        }
        if s.len() != model.state_dim() {
            return Err(Error::dim("planner state", model.state_dim(), s.len()));
        }
        Ok(())
    }

    fn refine(&mut self, elites: &[Vec<Vec<f64>>]) -> Result<()> {
        self.dist = update_distribution(&self.dist, elites, self.config.smoothing)?;
        Ok(())
    }

    fn warm_start(&mut self) {
        self.dist
            .shift(self.config.init_variance, self.config.variance_reset);
    }

    /// Random shooting + CEM over the model `(model, h)` maximizing summed reward.
    pub fn mpc_plan<R>(&mut self, model: &EnnModel, h: &[f64], s: &[f64], reward: R) -> Result<Vec<f64>>
    where
        R: Fn(&[f64], &[f64]) -> f64,
    {
        self.shooting(model, h, s, &reward, None)
    }

    /// [`mpc_plan`](Self::mpc_plan) with the constraint `|s_{t+1} - anchors[t]| <= delta`
    /// elementwise at every depth.
    pub fn anchor_mpc_plan<R>(
        &mut self,
        model: &EnnModel,
        h: &[f64],
        s: &[f64],
        reward: R,
        anchors: &[Vec<f64>],
    ) -> Result<Vec<f64>>
    where
        R: Fn(&[f64], &[f64]) -> f64,
    {
        if anchors.len() < self.config.horizon {
            return Err(Error::dim(
                "anchor trajectory",
                format!(">= {} states", self.config.horizon),
                anchors.len(),
            ));
        }
        if let Some(a) = anchors.iter().find(|a| a.len() != s.len()) {
            return Err(Error::dim("anchor state", s.len(), a.len()));
        }
        self.shooting(model, h, s, &reward, Some(anchors))
    }

    fn shooting(
        &mut self,
        model: &EnnModel,
        h: &[f64],
        s: &[f64],
        reward: &dyn Fn(&[f64], &[f64]) -> f64,
        anchors: Option<&[Vec<f64>]>,
    ) -> Result<Vec<f64>> {
        self.check_inputs(model, s)?;
        let (horizon, p) = (self.config.horizon, self.config.candidates());
        let delta = self.config.delta();
        let mut diag = PlanDiagnostics::default();
        let mut chosen = None;
        for _ in 0..self.config.cem_iterations {
            let mut seqs = vec![Vec::with_capacity(horizon); p];
            for t in 0..horizon {
                for seq in seqs.iter_mut() {
                    seq.push(self.dist.sample(t, self.action_bound, &mut self.rng));
                }
            }
            let mut states = vec![s.to_vec(); p];
            let mut returns = vec![0.0; p];
            let mut violation = vec![0.0; p];
            for t in 0..horizon {
                let actions: Vec<&Vec<f64>> = seqs.iter().map(|q| &q[t]).collect();
                for ((ret, st), a) in returns.iter_mut().zip(&states).zip(&actions) {
                    *ret += reward(st, a);
                }
                let next = model.predict_batch(&states, &actions, h)?;
                if let Some(anchors) = anchors {
                    if delta.is_finite() {
                        for (v, n) in violation.iter_mut().zip(&next) {
                            *v += n
                                .iter()
                                .zip(&anchors[t])
                                .map(|(x, a)| ((x - a).abs() - delta).max(0.0))
                                .sum::<f64>();
                        }
                    }
                }
                states = next;
            }
            for (ret, st) in returns.iter_mut().zip(&states) {
                if !ret.is_finite() || st.iter().any(|v| !v.is_finite()) {
                    *ret = f64::NAN;
                }
            }
            let valid: Vec<usize> = (0..p).filter(|&i| !returns[i].is_nan()).collect();
            if valid.is_empty() {
                return Err(Error::NonFinite("every planning rollout".into()));
            }
            let feasible: Vec<usize> = valid.iter().copied().filter(|&i| violation[i] == 0.0).collect();
            diag.rejected = valid.len() - feasible.len();
            diag.fallback = feasible.is_empty();
            let key: Vec<f64> = (0..p)
                .map(|i| {
                    if returns[i].is_nan() {
                        f64::NEG_INFINITY
                    } else if diag.fallback {
                        -violation[i]
                    } else if violation[i] > 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        returns[i]
                    }
                })
                .collect();
            let pool = if diag.fallback { valid.len() } else { feasible.len() };
            let elites = top_by_reward(&key, self.config.elites.min(pool));
            let best = argmax(&key).expect("at least one valid candidate");
            diag.elite_reward = returns[best];
            let elite_seqs: Vec<Vec<Vec<f64>>> = elites.iter().map(|&i| seqs[i].clone()).collect();
            self.refine(&elite_seqs)?;
            chosen = Some(seqs[best][0].clone());
        }
        self.diagnostics = diag;
        self.warm_start();
        Ok(chosen.expect("cem_iterations >= 1"))
    }

    /// Meta adaptation controller.
    ///
    /// `(model, h)` is the adapted test-task model; `reference` supplies the
    /// meta model, the reference embedding and the reference policy.
    pub fn mac_plan<R>(
        &mut self,
        model: &EnnModel,
        h: &[f64],
        reference: &Reference,
        s: &[f64],
        reward: R,
    ) -> Result<Vec<f64>>
    where
        R: Fn(&[f64], &[f64]) -> f64,
    {
        self.check_inputs(model, s)?;
        if reference.model.state_dim() != model.state_dim() {
            return Err(Error::dim(
                "reference model state",
                model.state_dim(),
                reference.model.state_dim(),
            ));
        }
        let (horizon, p, keep) = (
            self.config.horizon,
            self.config.candidates(),
            self.config.elites,
        );
        let dims = self.config.similarity_dims.clone();
        if let Some(bad) = dims.iter().flatten().find(|&&d| d >= model.state_dim()) {
            return Err(Error::dim("similarity dimension", model.state_dim(), bad));
        }
        let mut diag = PlanDiagnostics::default();
        let mut chosen = None;
        for _ in 0..self.config.cem_iterations {
            let mut frontier = vec![Node {
                state: s.to_vec(),
                actions: Vec::with_capacity(horizon),
                reward: 0.0,
                similarity: 0.0,
            }];
            for t in 0..horizon {
                let parent_states: Vec<&Vec<f64>> = frontier.iter().map(|n| &n.state).collect();
                let ref_actions = parent_states
                    .iter()
                    .map(|st| {
                        let mut a = reference.policy.action(st)?;
                        if self.config.reference_jitter > 0.0 {
                            for v in a.iter_mut() {
                                let z: f64 = StandardNormal.sample(&mut self.rng);
                                *v = (*v + self.config.reference_jitter * z)
                                    .clamp(-self.action_bound, self.action_bound);
                            }
                        }
                        Ok(a)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let ref_next =
                    reference
                        .model
                        .predict_batch(&parent_states, &ref_actions, &reference.embedding)?;
                let ref_views: Vec<Vec<f64>> = ref_next
                    .iter()
                    .map(|r| reference.similarity_view(r, dims.as_deref()))
                    .collect();

                let per_parent = (p / frontier.len()).max(1);
                let mut parent_of = Vec::with_capacity(per_parent * frontier.len());
                let mut actions = Vec::with_capacity(per_parent * frontier.len());
                for (pi, _) in frontier.iter().enumerate() {
                    for _ in 0..per_parent {
                        parent_of.push(pi);
                        actions.push(self.dist.sample(t, self.action_bound, &mut self.rng));
                    }
                }
                let child_states: Vec<&Vec<f64>> = parent_of.iter().map(|&pi| &frontier[pi].state).collect();
                let next = model.predict_batch(&child_states, &actions, h)?;

                let mut step_sim = Vec::with_capacity(next.len());
                let mut cum_reward = Vec::with_capacity(next.len());
                for (c, n) in next.iter().enumerate() {
                    let parent = &frontier[parent_of[c]];
                    let r = parent.reward + reward(&parent.state, &actions[c]);
                    let finite = r.is_finite() && n.iter().all(|v| v.is_finite());
                    cum_reward.push(if finite { r } else { f64::NEG_INFINITY });
                    let sim = if finite {
                        guarded_cosine(
                            &reference.similarity_view(n, dims.as_deref()),
                            &ref_views[parent_of[c]],
                            &mut diag.zero_similarity,
                        )
                    } else {
                        f64::NEG_INFINITY
                    };
                    step_sim.push(sim);
                }
                if cum_reward.iter().all(|r| *r == f64::NEG_INFINITY) {
                    return Err(Error::NonFinite("every planning rollout".into()));
                }
                let kept = select_elites(&step_sim, &cum_reward, keep);
                let mut next_iter = next.into_iter().map(Some).collect::<Vec<_>>();
                frontier = kept
                    .iter()
                    .map(|&c| {
                        let parent = &frontier[parent_of[c]];
                        let mut seq = parent.actions.clone();
                        seq.push(actions[c].clone());
                        Node {
                            state: next_iter[c].take().expect("each child kept once"),
                            actions: seq,
                            reward: cum_reward[c],
                            similarity: parent.similarity + step_sim[c],
                        }
                    })
                    .collect();
                diag.frontier_sizes.push(frontier.len());
            }
            let sims: Vec<f64> = frontier.iter().map(|n| n.similarity).collect();
            let rewards: Vec<f64> = frontier.iter().map(|n| n.reward).collect();
            let best = select_elites(&sims, &rewards, keep)
                .into_iter()
                .max_by(|&a, &b| rewards[a].total_cmp(&rewards[b]).then(b.cmp(&a)))
                .expect("frontier is nonempty");
            let per_step: Vec<f64> = sims.iter().map(|v| v / horizon as f64).collect();
            diag.mean_elite_similarity = Some(per_step.iter().sum::<f64>() / per_step.len() as f64);
            diag.max_elite_similarity = per_step.iter().copied().reduce(f64::max);
            diag.elite_reward = rewards[best];
            let elites: Vec<Vec<Vec<f64>>> = frontier.iter().map(|n| n.actions.clone()).collect();
            self.refine(&elites)?;
            chosen = Some(frontier[best].actions[0].clone());
        }
        self.diagnostics = diag;
        self.warm_start();
        Ok(chosen.expect("cem_iterations >= 1"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enn::{NormStats, Transition, TransitionDataset};
    use crate::envworld::{FamilyConfig, TaskSpec};
    use crate::ndmath::MlpParams;

    fn cfg(elites: usize, branches: usize, horizon: usize) -> PlannerConfig {
        PlannerConfig {
            horizon,
            elites,
            branches,
            seed: 11,
            ..PlannerConfig::default()
        }
    }

    fn random_model(seed: u64) -> EnnModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EnnModel::init(3, 1, 2, &[8], NormStats::identity(3, 1), &mut rng).unwrap()
    }

    fn pendulum_reference() -> Reference {
        let fam = FamilyConfig::pendulum_default();
        Reference {
            model: random_model(5),
            embedding: vec![0.2, -0.1],
            policy: ReferencePolicy::for_task(&fam.nominal_task()),
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
        let mut hits = 0;
        assert_eq!(guarded_cosine(&[0.0, 0.0], &[1.0, 0.0], &mut hits), 0.0);
        assert_eq!(hits, 1);
    }

    #[test]
    fn update_distribution_endpoints() {
        let d = ActionDistribution::new(2, 1, 1.0, 1e-4);
        let elite = vec![vec![vec![0.5], vec![-0.25]]];
        let full = update_distribution(&d, &elite, 1.0).unwrap();
        assert_eq!(full.mean, elite[0]);
        assert_eq!(full.var, vec![vec![1e-4], vec![1e-4]]);
        assert_eq!(update_distribution(&d, &elite, 0.0).unwrap(), d);
        assert!(update_distribution(&d, &[], 0.5).is_err());
    }

    #[test]
    fn update_moves_mean_towards_elites() {
        let mut d = ActionDistribution::new(1, 2, 1.0, 1e-4);
        d.mean = vec![vec![1.0, -1.0]];
        let elites = vec![vec![vec![0.0, 0.0]], vec![vec![0.2, 0.4]]];
        let target = [0.1, 0.2];
        let dist = |m: &[f64]| ((m[0] - target[0]).powi(2) + (m[1] - target[1]).powi(2)).sqrt();
        for lam in [0.1, 0.5, 1.0] {
            let u = update_distribution(&d, &elites, lam).unwrap();
            assert!(dist(&u.mean[0]) < dist(&d.mean[0]));
            assert!(u.min_var() >= 1e-4);
        }
    }

    #[test]
    fn elite_selection_is_similarity_tier_then_reward() {
        let sim = [0.9, 0.1, 0.8, 0.95, 0.2, 0.7];
        let rew = [1.0, 100.0, 5.0, -1.0, 50.0, 3.0];
        // tier of 4: indices 3, 0, 2, 5; best two rewards there: 2 (5.0), 5 (3.0)
        assert_eq!(select_elites(&sim, &rew, 2), vec![2, 5]);
        // keep >= n keeps everything
        assert_eq!(select_elites(&sim, &rew, 6), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn mpc_with_effort_reward_picks_smallest_action() {
        let model = random_model(1);
        let mut planner = Planner::new(cfg(4, 8, 1), 1, 2.0).unwrap();
        let mut probe = planner.clone();
        let a = planner
            .mpc_plan(&model, &[0.0, 0.0], &[1.0, 0.0, 0.0], |_, a| -a[0] * a[0])
            .unwrap();
        // replay the same draws
        let samples: Vec<f64> = (0..32)
            .map(|_| probe.dist.sample(0, 2.0, &mut probe.rng)[0])
            .collect();
        let smallest = samples
            .iter()
            .copied()
            .fold(f64::INFINITY, |m: f64, v| if v.abs() < m.abs() { v } else { m });
        assert_eq!(a[0], smallest);
    }

    #[test]
    fn mpc_is_deterministic() {
        let model = random_model(2);
        let s = [0.5, 0.5, 0.1];
        let reward = |s: &[f64], a: &[f64]| -s[2] * s[2] - 0.1 * a[0] * a[0];
        let mut p1 = Planner::new(cfg(4, 4, 5), 1, 2.0).unwrap();
        let mut p2 = Planner::new(cfg(4, 4, 5), 1, 2.0).unwrap();
        for _ in 0..3 {
            assert_eq!(
                p1.mpc_plan(&model, &[0.1, 0.1], &s, reward).unwrap(),
                p2.mpc_plan(&model, &[0.1, 0.1], &s, reward).unwrap()
            );
        }
    }

    #[test]
    fn anchor_with_infinite_delta_equals_mpc() {
        let model = random_model(3);
        let s = [0.2, 0.9, -0.3];
        let reward = |s: &[f64], _: &[f64]| s[0];
        let mut mpc = Planner::new(cfg(4, 8, 4), 1, 2.0).unwrap();
        let mut anc = Planner::new(cfg(4, 8, 4), 1, 2.0).unwrap();
        let anchors = vec![vec![100.0, 100.0, 100.0]; 4];
        for _ in 0..3 {
            let a = mpc.mpc_plan(&model, &[0.0, 0.0], &s, reward).unwrap();
            let b = anc.anchor_mpc_plan(&model, &[0.0, 0.0], &s, reward, &anchors).unwrap();
            assert_eq!(a, b);
            assert_eq!(anc.diagnostics().rejected, 0);
        }
    }

    #[test]
    fn anchor_band_excludes_violating_candidates() {
        // zero network: prediction = s + mean delta = s, independent of the action
        let model = random_model(4)
            .with_params(MlpParams::zeros(&[6, 8, 3]).unwrap())
            .unwrap();
        let s = [1.0, 0.0, 0.0];
        let mut c = cfg(2, 2, 2);
        c.anchor_delta = Some(0.5);
        let mut planner = Planner::new(c.clone(), 1, 2.0).unwrap();
        let inside = vec![vec![1.2, 0.0, 0.0]; 2];
        planner
            .anchor_mpc_plan(&model, &[0.0, 0.0], &s, |_, _| 0.0, &inside)
            .unwrap();
        assert_eq!(planner.diagnostics().rejected, 0);
        // one coordinate off by 0.6 > delta
        let outside = vec![vec![1.0, 0.6, 0.0]; 2];
        planner
            .anchor_mpc_plan(&model, &[0.0, 0.0], &s, |_, _| 0.0, &outside)
            .unwrap();
        assert_eq!(planner.diagnostics().rejected, 4);
        assert!(planner.diagnostics().fallback);
        assert!(planner
            .anchor_mpc_plan(&model, &[0.0, 0.0], &s, |_, _| 0.0, &outside[..1])
            .is_err());
    }

    #[test]
    fn mac_frontier_has_elites_entries_every_depth() {
        let model = random_model(6);
        let reference = pendulum_reference();
        let mut planner = Planner::new(cfg(4, 3, 6), 1, 2.0).unwrap();
        let task = FamilyConfig::pendulum_default().nominal_task();
        let s = [-1.0, 0.0, 0.0];
        for _ in 0..3 {
            planner
                .mac_plan(&model, &[0.0, 0.0], &reference, &s, |s, a| task.reward(s, a))
                .unwrap();
            assert_eq!(planner.diagnostics().frontier_sizes, vec![4; 6]);
            assert!(planner.distribution().min_var() >= 1e-4);
        }
    }

    #[test]
    fn mac_without_filtering_matches_mpc() {
        let model = random_model(7);
        let reference = pendulum_reference();
        let task = FamilyConfig::pendulum_default().nominal_task();
        let reward = |s: &[f64], a: &[f64]| task.reward(s, a);
        let mut mpc = Planner::new(cfg(24, 1, 5), 1, 2.0).unwrap();
        let mut mac = Planner::new(cfg(24, 1, 5), 1, 2.0).unwrap();
        let s = [0.3, 0.95, 0.4];
        for _ in 0..4 {
            let a = mpc.mpc_plan(&model, &[0.1, 0.0], &s, reward).unwrap();
            let b = mac.mac_plan(&model, &[0.1, 0.0], &reference, &s, reward).unwrap();
            assert_eq!(a, b);
            assert_eq!(mpc.distribution(), mac.distribution());
        }
    }

    #[test]
    fn reference_next_states_match_pointwise_predictions() {
        let reference = pendulum_reference();
        let states: Vec<Vec<f64>> = (0..10)
            .map(|i| crate::envworld::pendulum_state(i as f64 * 0.6, 0.1 * i as f64))
            .collect();
        let batch = reference.next_states(&states).unwrap();
        for (s, b) in states.iter().zip(&batch) {
            let a = reference.policy.action(s).unwrap();
            let single = reference
                .model
                .predict_next_state(s, &a, &reference.embedding)
                .unwrap();
            assert_eq!(&single, b);
        }
        let empty: Vec<Vec<f64>> = Vec::new();
        assert!(reference.next_states(&empty).unwrap().is_empty());
    }

    #[test]
    fn mpc_pushes_point_mass_forward_with_true_dynamics() {
        // fit a linear model of the point mass exactly: delta depends on (v, a)
        let fam = FamilyConfig::PointmassDisabled {
            axes: 1,
            gain_range: [1.0, 1.0],
            friction: 0.5,
            max_thrust: 1.0,
            held_out_separation: 0.0,
            reset_position: 0.0,
        };
        let task = fam.nominal_task();
        let TaskSpec::PointMass(_) = &task else { panic!() };
        let mut ds = TransitionDataset::new(2, 1, None);
        for i in 0..5 {
            let s = vec![0.0, 0.2 * i as f64];
            let a = vec![0.5];
            let n = task.step(&s, &a, 0.05).unwrap().next_state;
            ds.push(Transition::new(s, a, n)).unwrap();
        }
        // hand-build a linear network reproducing dx = (v + a*dt - f*v*dt)*dt, dv = (a - f v) dt
        let dt = 0.05;
        let mut params = MlpParams::zeros(&[2 + 1, 2]).unwrap();
        {
            let w = &mut params.layers_mut()[0].weight;
            w.set(0, 1, dt * (1.0 - 0.5 * dt));
            w.set(0, 2, dt * dt);
            w.set(1, 1, -0.5 * dt);
            w.set(1, 2, dt);
        }
        let model = EnnModel::new(params, 2, 1, 0, NormStats::identity(2, 1)).unwrap();
        for t in ds.transitions() {
            let p = model.predict_next_state(&t.state, &t.action, &[]).unwrap();
            for (x, y) in p.iter().zip(&t.next_state) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let mut planner = Planner::new(cfg(8, 8, 10), 1, 1.0).unwrap();
        let a = planner
            .mpc_plan(&model, &[], &[0.0, 0.0], |s, a| task.reward(s, a))
            .unwrap();
        assert!(a[0] > 0.0, "thrust {a:?}");
    }
}
