//! Trajectories, planning contexts and the distances/returns defined over them.
//!
//! A [`Trajectory`] stores `H` states (and optionally `H` actions) flat in
//! time-major order, so entry `(t, d)` of the states lives at `t * state_dim + d`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    horizon: usize,
    state_dim: usize,
    action_dim: usize,
    states: Vec<f64>,
    actions: Option<Vec<f64>>,
    dt: f64,
}

impl Trajectory {
    pub fn new(
        states: Vec<f64>,
        state_dim: usize,
        actions: Option<(Vec<f64>, usize)>,
        dt: f64,
    ) -> Result<Self> {
        if state_dim == 0 || states.len() % state_dim != 0 {
            return Err(Error::dim(format!(
                "{} state entries do not split into rows of {state_dim}",
                states.len()
            )));
        }
        let horizon = states.len() / state_dim;
        if horizon < 2 {
            return Err(Error::dim(format!("horizon {horizon} < 2")));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {dt}")));
        }
        let (actions, action_dim) = match actions {
            Some((a, da)) => {
                if da == 0 || a.len() != horizon * da {
                    return Err(Error::dim(format!(
                        "{} action entries for horizon {horizon} and action dim {da}",
                        a.len()
                    )));
                }
                (Some(a), da)
            }
            None => (None, 0),
        };
        let traj = Trajectory {
            horizon,
            state_dim,
            action_dim,
            states,
            actions,
            dt,
        };
        if !traj.is_finite() {
            return Err(Error::Numeric("trajectory contains non-finite entries".into()));
        }
        Ok(traj)
    }

    /// Position-only trajectory (`D_s = 2`).
    pub fn from_positions(points: &[[f64; 2]], dt: f64) -> Result<Self> {
        Self::new(points.iter().flatten().copied().collect(), 2, None, dt)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// States plus actions per time step.
    pub fn channels(&self) -> usize {
        self.state_dim + self.action_dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn actions(&self) -> Option<&[f64]> {
        self.actions.as_deref()
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn action(&self, t: usize) -> Option<&[f64]> {
        self.actions
            .as_ref()
            .map(|a| &a[t * self.action_dim..(t + 1) * self.action_dim])
    }

    /// First two state channels at step `t`.
    pub fn position(&self, t: usize) -> [f64; 2] {
        let s = self.state(t);
        [s[0], s.get(1).copied().unwrap_or(0.0)]
    }

    pub fn positions(&self) -> Vec<[f64; 2]> {
        (0..self.horizon).map(|t| self.position(t)).collect()
    }

    /// All channels, time-major: `s_0, a_0, s_1, a_1, ...`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.horizon * self.channels());
        for t in 0..self.horizon {
            out.extend_from_slice(self.state(t));
            if let Some(a) = self.action(t) {
                out.extend_from_slice(a);
            }
        }
        out
    }

    /// Inverse of [`Trajectory::to_flat`].
    pub fn from_flat(
        flat: &[f64],
        state_dim: usize,
        action_dim: usize,
        dt: f64,
    ) -> Result<Self> {
        let ch = state_dim + action_dim;
        if ch == 0 || flat.len() % ch != 0 {
            return Err(Error::dim(format!(
                "{} entries do not split into rows of {ch}",
                flat.len()
            )));
        }
        let h = flat.len() / ch;
        let mut states = Vec::with_capacity(h * state_dim);
        let mut actions = Vec::with_capacity(h * action_dim);
        for row in flat.chunks(ch) {
            states.extend_from_slice(&row[..state_dim]);
            actions.extend_from_slice(&row[state_dim..]);
        }
        let actions = (action_dim > 0).then_some((actions, action_dim));
        Self::new(states, state_dim, actions, dt)
    }

    pub(crate) fn states_mut(&mut self) -> &mut [f64] {
        &mut self.states
    }

    fn is_finite(&self) -> bool {
        self.states.iter().all(|v| v.is_finite())
            && self
                .actions
                .as_ref()
                .is_none_or(|a| a.iter().all(|v| v.is_finite()))
    }

    fn same_shape(&self, other: &Trajectory) -> bool {
        self.horizon == other.horizon
            && self.state_dim == other.state_dim
            && self.action_dim == other.action_dim
    }
}

/// Conditioning variables for the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub current_state: Vec<f64>,
    pub goal: Vec<f64>,
    /// `O` obstacles, each with the same number `P` of past positions, oldest first.
    pub obstacle_history: Vec<Vec<[f64; 2]>>,
}

impl Context {
    pub fn new(
        current_state: Vec<f64>,
        goal: Vec<f64>,
        obstacle_history: Vec<Vec<[f64; 2]>>,
    ) -> Result<Self> {
        let ctx = Context {
            current_state,
            goal,
            obstacle_history,
        };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.current_state.iter().all(|v| v.is_finite())
            && self.goal.iter().all(|v| v.is_finite())
            && self
                .obstacle_history
                .iter()
                .flatten()
                .all(|p| p[0].is_finite() && p[1].is_finite());
        if !finite {
            return Err(Error::Numeric("context contains non-finite entries".into()));
        }
        let p = self.history_len();
        if self.obstacle_history.iter().any(|h| h.len() != p) {
            return Err(Error::dim("obstacle histories differ in length"));
        }
        Ok(())
    }

    pub fn history_len(&self) -> usize {
        self.obstacle_history.first().map_or(0, Vec::len)
    }

    /// Position part of the current state.
    pub fn position(&self) -> [f64; 2] {
        [
            self.current_state[0],
            self.current_state.get(1).copied().unwrap_or(0.0),
        ]
    }

    pub fn goal_position(&self) -> [f64; 2] {
        [self.goal[0], self.goal.get(1).copied().unwrap_or(0.0)]
    }

    /// Self-describing flat layout: `Dg, O, P, state.., goal.., history..`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = vec![
            self.goal.len() as f64,
            self.obstacle_history.len() as f64,
            self.history_len() as f64,
        ];
        out.extend_from_slice(&self.current_state);
        out.extend_from_slice(&self.goal);
        for p in self.obstacle_history.iter().flatten() {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn from_flat(flat: &[f64], state_dim: usize) -> Result<Self> {
        let count = |v: f64, what: &str| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
                Ok(v as usize)
            } else {
                Err(Error::dim(format!("context {what} count {v} is not a count")))
            }
        };
        if flat.len() < 3 {
            return Err(Error::dim("context record shorter than its 3-entry prefix"));
        }
        let dg = count(flat[0], "goal")?;
        let o = count(flat[1], "obstacle")?;
        let p = count(flat[2], "history")?;
        let expected = 3 + state_dim + dg + o * p * 2;
        if flat.len() != expected {
            return Err(Error::dim(format!(
                "context has {} entries, layout needs {expected}",
                flat.len()
            )));
        }
        let state = flat[3..3 + state_dim].to_vec();
        let goal = flat[3 + state_dim..3 + state_dim + dg].to_vec();
        let hist = &flat[3 + state_dim + dg..];
        let history = (0..o)
            .map(|i| {
                (0..p)
                    .map(|j| {
                        let k = (i * p + j) * 2;
                        [hist[k], hist[k + 1]]
                    })
                    .collect()
            })
            .collect();
        Self::new(state, goal, history)
    }
}

/// Dataset record: a trajectory, its context, its return and its training weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    pub trajectory: Trajectory,
    pub context: Context,
    pub return_value: f64,
    pub weight: f64,
}

impl WeightedSample {
    pub fn new(trajectory: Trajectory, context: Context, return_value: f64) -> Self {
        WeightedSample {
            trajectory,
            context,
            return_value,
            weight: 1.0,
        }
    }
}

/// ℓ2 norm of the element-wise difference over every state and action entry.
pub fn trajectory_distance(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    squared_distance(a, b).map(f64::sqrt)
}

pub fn squared_distance(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::dim(format!(
            "trajectories {}x({}+{}) and {}x({}+{})",
            a.horizon, a.state_dim, a.action_dim, b.horizon, b.state_dim, b.action_dim
        )));
    }
    let mut acc: f64 = a
        .states
        .iter()
        .zip(&b.states)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    if let (Some(xa), Some(ya)) = (&a.actions, &b.actions) {
        acc += xa.iter().zip(ya).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    Ok(acc)
}

/// Undiscounted sum of per-step rewards `r(s_t, a_t)`.
pub fn compute_return<F>(traj: &Trajectory, reward: F) -> Result<f64>
where
    F: Fn(&[f64], Option<&[f64]>) -> f64,
{
    let mut total = 0.0;
    for t in 0..traj.horizon() {
        let r = reward(traj.state(t), traj.action(t));
        if !r.is_finite() {
            return Err(Error::Numeric(format!("reward at step {t} is {r}")));
        }
        total += r;
    }
    Ok(total)
}
