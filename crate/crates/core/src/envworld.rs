//! Analytic task families: a torque-limited pendulum whose gravity varies
//! between tasks, and a multi-axis point mass whose actuators are partially
//! disabled. Both integrate with semi-implicit Euler and are deterministic.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pendulum angle measured from upright; `theta = 0` is the inverted pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumTask {
    pub gravity: f64,
    pub length: f64,
    pub mass: f64,
    pub damping: f64,
    pub max_torque: f64,
}

/// Point mass moving along `gains.len()` independent axes; axis 0 is "forward".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMassTask {
    pub gains: Vec<f64>,
    pub friction: f64,
    pub max_thrust: f64,
}

/// One MDP drawn from a task family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum TaskSpec {
    Pendulum(PendulumTask),
    PointMass(PointMassTask),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    PendulumGravity,
    PointmassDisabled,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::PendulumGravity => "pendulum-gravity",
            Family::PointmassDisabled => "pointmass-disabled",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Angular speed beyond which a pendulum episode is declared diverged.
const PENDULUM_OMEGA_LIMIT: f64 = 100.0;
const POINTMASS_SPEED_LIMIT: f64 = 1e3;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t - 2.0 * PI
    } else {
        t
    }
}

pub fn pendulum_state(theta: f64, omega: f64) -> Vec<f64> {
    vec![theta.cos(), theta.sin(), omega]
}

/// Angle from upright encoded by a `[cos, sin, omega]` state.
pub fn pendulum_angle(state: &[f64]) -> f64 {
    state[1].atan2(state[0])
}

fn clip(v: f64, bound: f64) -> f64 {
    v.clamp(-bound, bound)
}

impl TaskSpec {
    pub fn family(&self) -> Family {
        match self {
            TaskSpec::Pendulum(_) => Family::PendulumGravity,
            TaskSpec::PointMass(_) => Family::PointmassDisabled,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            TaskSpec::Pendulum(_) => 3,
            TaskSpec::PointMass(p) => 2 * p.gains.len(),
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            TaskSpec::Pendulum(_) => 1,
            TaskSpec::PointMass(p) => p.gains.len(),
        }
    }

    /// Symmetric per-channel action bound.
    pub fn action_bound(&self) -> f64 {
        match self {
            TaskSpec::Pendulum(p) => p.max_torque,
            TaskSpec::PointMass(p) => p.max_thrust,
        }
    }

    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        let b = self.action_bound();
        action.iter().map(|a| clip(*a, b)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")))
            }
        };
        match self {
            TaskSpec::Pendulum(p) => {
                positive("gravity", p.gravity)?;
                positive("length", p.length)?;
                positive("mass", p.mass)?;
                positive("max_torque", p.max_torque)?;
                if !(p.damping.is_finite() && p.damping >= 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "damping must be >= 0, got {}",
                        p.damping
                    )));
                }
            }
            TaskSpec::PointMass(p) => {
                if p.gains.is_empty() {
                    return Err(Error::Empty("actuator gain list"));
                }
                if let Some(g) = p.gains.iter().find(|g| !(0.0..=1.0).contains(*g)) {
                    return Err(Error::InvalidArgument(format!(
                        "actuator gains must lie in [0, 1], got {g}"
                    )));
                }
                positive("max_thrust", p.max_thrust)?;
                if !(p.friction.is_finite() && p.friction >= 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "friction must be >= 0, got {}",
                        p.friction
                    )));
                }
            }
        }
        Ok(())
    }

    /// Per-step reward `r(s, a)`; also used by the planners on model predictions.
    pub fn reward(&self, state: &[f64], action: &[f64]) -> f64 {
        reward(self.family(), state, action)
    }

    /// One semi-implicit Euler step. The action is clipped to the bounds first.
    pub fn step(&self, state: &[f64], action: &[f64], dt: f64) -> Result<StepResult> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        if state.len() != self.state_dim() {
            return Err(Error::dim("env state", self.state_dim(), state.len()));
        }
        if action.len() != self.action_dim() {
            return Err(Error::dim("env action", self.action_dim(), action.len()));
        }
        if state.iter().chain(action).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("environment state or action".into()));
        }
        let action = self.clip_action(action);
        let (next_state, done) = match self {
            TaskSpec::Pendulum(p) => {
                let theta = pendulum_angle(state);
                let omega = state[2];
                let inertia = p.mass * p.length * p.length;
                let accel =
                    (p.gravity / p.length) * theta.sin() + (action[0] - p.damping * omega) / inertia;
                let omega_next = omega + accel * dt;
                let theta_next = theta + omega_next * dt;
                (
                    pendulum_state(theta_next, omega_next),
                    omega_next.abs() > PENDULUM_OMEGA_LIMIT,
                )
            }
            TaskSpec::PointMass(p) => {
                let mut next = state.to_vec();
                let mut fast = false;
                for (axis, gain) in p.gains.iter().enumerate() {
                    let (x, v) = (state[2 * axis], state[2 * axis + 1]);
                    let v_next = v + (action[axis] * gain - p.friction * v) * dt;
                    next[2 * axis] = x + v_next * dt;
                    next[2 * axis + 1] = v_next;
                    fast |= v_next.abs() > POINTMASS_SPEED_LIMIT;
                }
                (next, fast)
            }
        };
        if next_state.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged("non-finite state after step".into()));
        }
        Ok(StepResult {
            reward: self.reward(state, &action),
            next_state,
            done,
        })
    }
}

/// Swing-up cost on the pendulum, forward speed on the point mass.
pub fn reward(family: Family, state: &[f64], action: &[f64]) -> f64 {
    let effort: f64 = action.iter().map(|a| a * a).sum();
    match family {
        Family::PendulumGravity => {
            let theta = pendulum_angle(state);
            let omega = state[2];
            -(theta * theta + 0.1 * omega * omega + 0.001 * effort)
        }
        Family::PointmassDisabled => state[1] - 0.01 * effort,
    }
}

/// Declared parameter ranges of a family plus the fixed physical constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FamilyConfig {
    PendulumGravity {
        gravity_range: [f64; 2],
        nominal_gravity: f64,
        length: f64,
        mass: f64,
        damping: f64,
        max_torque: f64,
        /// Minimum gravity gap between a held-out task and every training task.
        held_out_separation: f64,
    },
    PointmassDisabled {
        axes: usize,
        gain_range: [f64; 2],
        friction: f64,
        max_thrust: f64,
        /// Minimum L-infinity gain gap between a held-out task and every training task.
        held_out_separation: f64,
        /// Half-width of the position range used for data-collection resets.
        reset_position: f64,
    },
}

impl FamilyConfig {
    pub fn pendulum_default() -> Self {
        FamilyConfig::PendulumGravity {
            gravity_range: [2.0, 16.0],
            nominal_gravity: 9.81,
            length: 1.0,
            mass: 1.0,
            damping: 0.05,
            max_torque: 5.0,
            held_out_separation: 0.5,
        }
    }

    pub fn pointmass_default() -> Self {
        FamilyConfig::PointmassDisabled {
            axes: 2,
            gain_range: [0.2, 1.0],
            friction: 0.5,
            max_thrust: 1.0,
            held_out_separation: 0.05,
            reset_position: 20.0,
        }
    }

    pub fn family(&self) -> Family {
        match self {
            FamilyConfig::PendulumGravity { .. } => Family::PendulumGravity,
            FamilyConfig::PointmassDisabled { .. } => Family::PointmassDisabled,
        }
    }

    /// Checks ranges and constants; errors name the offending key relative to `path`.
    pub fn validate(&self, path: &str) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("{path}.{key}"), format!("must be > 0, got {v}")))
            }
        };
        let nonneg = |key: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("{path}.{key}"), format!("must be >= 0, got {v}")))
            }
        };
        match self {
            FamilyConfig::PendulumGravity {
                gravity_range,
                nominal_gravity,
                length,
                mass,
                damping,
                max_torque,
                held_out_separation,
            } => {
                positive("gravity_range[0]", gravity_range[0])?;
                if !(gravity_range[1].is_finite() && gravity_range[1] >= gravity_range[0]) {
                    return Err(Error::config(
                        format!("{path}.gravity_range"),
                        format!("upper bound must be >= lower bound, got {gravity_range:?}"),
                    ));
                }
                positive("nominal_gravity", *nominal_gravity)?;
                positive("length", *length)?;
                positive("mass", *mass)?;
                positive("max_torque", *max_torque)?;
                nonneg("damping", *damping)?;
                nonneg("held_out_separation", *held_out_separation)?;
            }
            FamilyConfig::PointmassDisabled {
                axes,
                gain_range,
                friction,
                max_thrust,
                held_out_separation,
                reset_position,
            } => {
                if *axes == 0 {
                    return Err(Error::config(format!("{path}.axes"), "must be >= 1"));
                }
                if !(0.0..=1.0).contains(&gain_range[0])
                    || !(0.0..=1.0).contains(&gain_range[1])
                    || gain_range[1] < gain_range[0]
                {
                    return Err(Error::config(
                        format!("{path}.gain_range"),
                        format!("must be an ordered sub-range of [0, 1], got {gain_range:?}"),
                    ));
                }
                nonneg("friction", *friction)?;
                positive("max_thrust", *max_thrust)?;
                nonneg("held_out_separation", *held_out_separation)?;
                nonneg("reset_position", *reset_position)?;
            }
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.nominal_task().state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.nominal_task().action_dim()
    }

    /// The family's unmodified base task (standard gravity, all actuators intact).
    pub fn nominal_task(&self) -> TaskSpec {
        match self {
            FamilyConfig::PendulumGravity {
                nominal_gravity,
                length,
                mass,
                damping,
                max_torque,
                ..
            } => TaskSpec::Pendulum(PendulumTask {
                gravity: *nominal_gravity,
                length: *length,
                mass: *mass,
                damping: *damping,
                max_torque: *max_torque,
            }),
            FamilyConfig::PointmassDisabled {
                axes,
                friction,
                max_thrust,
                ..
            } => TaskSpec::PointMass(PointMassTask {
                gains: vec![1.0; *axes],
                friction: *friction,
                max_thrust: *max_thrust,
            }),
        }
    }

    fn draw_task<R: Rng + ?Sized>(&self, rng: &mut R) -> TaskSpec {
        let draw = |rng: &mut R, r: [f64; 2]| {
            if r[1] > r[0] {
                rng.random_range(r[0]..=r[1])
            } else {
                r[0]
            }
        };
        match (self, self.nominal_task()) {
            (FamilyConfig::PendulumGravity { gravity_range, .. }, TaskSpec::Pendulum(mut p)) => {
                p.gravity = draw(rng, *gravity_range);
                TaskSpec::Pendulum(p)
            }
            (FamilyConfig::PointmassDisabled { gain_range, .. }, TaskSpec::PointMass(mut p)) => {
                for g in &mut p.gains {
                    *g = draw(rng, *gain_range);
                }
                TaskSpec::PointMass(p)
            }
            _ => unreachable!("nominal task matches its family"),
        }
    }

    /// `n` tasks drawn uniformly from the family's parameter ranges.
    pub fn sample_tasks<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<TaskSpec> {
        (0..n).map(|_| self.draw_task(rng)).collect()
    }

    fn task_gap(a: &TaskSpec, b: &TaskSpec) -> f64 {
        match (a, b) {
            (TaskSpec::Pendulum(x), TaskSpec::Pendulum(y)) => (x.gravity - y.gravity).abs(),
            (TaskSpec::PointMass(x), TaskSpec::PointMass(y)) => x
                .gains
                .iter()
                .zip(&y.gains)
                .fold(0.0, |m, (p, q)| m.max((p - q).abs())),
            _ => f64::INFINITY,
        }
    }

    fn separation(&self) -> f64 {
        match self {
            FamilyConfig::PendulumGravity {
                held_out_separation,
                ..
            }
            | FamilyConfig::PointmassDisabled {
                held_out_separation,
                ..
            } => *held_out_separation,
        }
    }

    /// Whether `task` keeps the configured distance from every task in `training`.
    pub fn is_held_out(&self, task: &TaskSpec, training: &[TaskSpec]) -> bool {
        let sep = self.separation();
        training
            .iter()
            .all(|t| Self::task_gap(task, t) > sep || (sep == 0.0 && task != t))
    }

    /// `n` test tasks from the same ranges, each away from every training task.
    pub fn sample_held_out<R: Rng + ?Sized>(
        &self,
        n: usize,
        training: &[TaskSpec],
        rng: &mut R,
    ) -> Result<Vec<TaskSpec>> {
        const MAX_TRIES: usize = 10_000;
        let mut out = Vec::with_capacity(n);
        let mut tries = 0;
        while out.len() < n {
            tries += 1;
            if tries > MAX_TRIES {
                return Err(Error::InvalidArgument(format!(
                    "could not draw {n} held-out tasks separated from the training set"
                )));
            }
            let t = self.draw_task(rng);
            if self.is_held_out(&t, training) {
                out.push(t);
            }
        }
        Ok(out)
    }

    /// Reset distribution used while collecting random-action data.
    pub fn collection_reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            FamilyConfig::PendulumGravity { .. } => {
                pendulum_state(rng.random_range(-PI..PI), rng.random_range(-1.0..=1.0))
            }
            FamilyConfig::PointmassDisabled {
                axes,
                reset_position,
                ..
            } => (0..*axes)
                .flat_map(|_| {
                    let x = if *reset_position > 0.0 {
                        rng.random_range(-reset_position..=*reset_position)
                    } else {
                        0.0
                    };
                    [x, rng.random_range(-1.0..=1.0)]
                })
                .collect(),
        }
    }

    /// Start state of a test episode: hanging pendulum or resting point mass,
    /// perturbed by `jitter`-scaled noise.
    pub fn test_start<R: Rng + ?Sized>(&self, jitter: f64, rng: &mut R) -> Vec<f64> {
        let mut noise = || {
            if jitter > 0.0 {
                rng.random_range(-jitter..=jitter)
            } else {
                0.0
            }
        };
        match self {
            FamilyConfig::PendulumGravity { .. } => pendulum_state(PI + noise(), noise()),
            FamilyConfig::PointmassDisabled { axes, .. } => {
                (0..2 * axes).map(|_| noise()).collect()
            }
        }
    }
}

/// A task family together with its integration step and episode lengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub family: FamilyConfig,
    pub dt: f64,
    /// Steps per episode.
    pub horizon: usize,
    /// Episode length while collecting random-action data.
    pub collect_episode: usize,
    /// Half-width of the uniform noise added to test start states.
    pub start_jitter: f64,
}

impl EnvConfig {
    pub fn new(family: FamilyConfig) -> Self {
        let collect_episode = match family {
            FamilyConfig::PendulumGravity { .. } => 50,
            FamilyConfig::PointmassDisabled { .. } => 100,
        };
        EnvConfig {
            family,
            dt: 0.05,
            horizon: 200,
            collect_episode,
            start_jitter: 0.05,
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        self.family.validate(&format!("{path}.family"))?;
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::config(format!("{path}.dt"), format!("must be > 0, got {}", self.dt)));
        }
        if self.horizon == 0 {
            return Err(Error::config(format!("{path}.horizon"), "must be >= 1"));
        }
        if self.collect_episode == 0 {
            return Err(Error::config(format!("{path}.collect_episode"), "must be >= 1"));
        }
        if !(self.start_jitter.is_finite() && self.start_jitter >= 0.0) {
            return Err(Error::config(format!("{path}.start_jitter"), "must be >= 0"));
        }
        Ok(())
    }
}

/// Scripted controllers acting in the nominal task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ReferencePolicy {
    /// Energy-shaping swing-up, switching to PD near upright.
    PendulumSwingUp {
        task: PendulumTask,
        energy_gain: f64,
        kp: f64,
        kd: f64,
        /// |theta| below which the PD stabilizer takes over.
        switch_angle: f64,
    },
    /// Per-axis proportional control to a cruise velocity (forward axis) and rest (others).
    PointMassCruise {
        task: PointMassTask,
        cruise_velocity: f64,
        kp: f64,
    },
}

impl ReferencePolicy {
    pub fn for_task(nominal: &TaskSpec) -> Self {
        match nominal {
            TaskSpec::Pendulum(p) => ReferencePolicy::PendulumSwingUp {
                task: p.clone(),
                energy_gain: 1.0,
                kp: 40.0,
                kd: 10.0,
                switch_angle: 0.6,
            },
            TaskSpec::PointMass(p) => ReferencePolicy::PointMassCruise {
                task: p.clone(),
                cruise_velocity: 2.5,
                kp: 4.0,
            },
        }
    }

    pub fn family(&self) -> Family {
        match self {
            ReferencePolicy::PendulumSwingUp { .. } => Family::PendulumGravity,
            ReferencePolicy::PointMassCruise { .. } => Family::PointmassDisabled,
        }
    }

    pub fn task(&self) -> TaskSpec {
        match self {
            ReferencePolicy::PendulumSwingUp { task, .. } => TaskSpec::Pendulum(task.clone()),
            ReferencePolicy::PointMassCruise { task, .. } => TaskSpec::PointMass(task.clone()),
        }
    }

    /// Deterministic control law, clipped to the action bounds.
    pub fn action(&self, state: &[f64]) -> Result<Vec<f64>> {
        let expected = self.task().state_dim();
        if state.len() != expected {
            return Err(Error::dim(
                "reference policy state (family mismatch?)",
                format!("{} state of length {expected}", self.family().name()),
                state.len(),
            ));
        }
        match self {
            ReferencePolicy::PendulumSwingUp {
                task,
                energy_gain,
                kp,
                kd,
                switch_angle,
            } => {
                let theta = pendulum_angle(state);
                let omega = state[2];
                let u = if theta.abs() < *switch_angle {
                    -kp * theta - kd * omega
                } else {
                    let inertia = task.mass * task.length * task.length;
                    let energy = 0.5 * inertia * omega * omega
                        + task.mass * task.gravity * task.length * (theta.cos() - 1.0);
                    let direction = if omega >= 0.0 { 1.0 } else { -1.0 };
                    -energy_gain * energy * direction + task.damping * omega
                };
                Ok(vec![clip(u, task.max_torque)])
            }
            ReferencePolicy::PointMassCruise {
                task,
                cruise_velocity,
                kp,
            } => Ok((0..task.gains.len())
                .map(|axis| {
                    let target = if axis == 0 { *cruise_velocity } else { 0.0 };
                    clip(kp * (target - state[2 * axis + 1]), task.max_thrust)
                })
                .collect()),
        }
    }
}

/// One recorded environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutStep {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
}

/// Runs `controller` for `steps` steps (or until `done`) from `start`.
pub fn rollout<F>(
    task: &TaskSpec,
    start: Vec<f64>,
    steps: usize,
    dt: f64,
    mut controller: F,
) -> Result<(Vec<RolloutStep>, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut state = start;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let action = task.clip_action(&controller(&state)?);
        let res = task.step(&state, &action, dt)?;
        out.push(RolloutStep {
            state: std::mem::replace(&mut state, res.next_state),
            action,
            reward: res.reward,
        });
        if res.done {
            break;
        }
    }
    Ok((out, state))
}

/// CSV with columns `t, s0.., a0.., reward`.
pub fn write_rollout_csv<W: Write>(out: W, steps: &[RolloutStep]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let (sd, ad) = steps
        .first()
        .map_or((0, 0), |s| (s.state.len(), s.action.len()));
    let mut header = vec!["t".to_string()];
    header.extend((0..sd).map(|i| format!("s{i}")));
    header.extend((0..ad).map(|i| format!("a{i}")));
    header.push("reward".into());
    let csv_err = |e: csv::Error| Error::Parse {
        what: "rollout CSV".into(),
        reason: e.to_string(),
    };
    w.write_record(&header).map_err(csv_err)?;
    for (t, s) in steps.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(s.state.iter().map(f64::to_string));
        rec.extend(s.action.iter().map(f64::to_string));
        rec.push(s.reward.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("rollout CSV", e))?;
    Ok(())
}
