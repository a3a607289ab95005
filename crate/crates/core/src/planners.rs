//! Sampling-based MPC on top of any proposal source.
//!
//! A planning step draws a batch of candidate paths, then either executes the
//! best-scoring one or refines it with one MPPI iteration. Plans are position
//! paths whose first state is the robot's current position; the robot tracks
//! the plan perfectly and moves to the plan's state at `t = 1`.

use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costs::{CostBreakdown, CostConfig, CostContext};
use crate::error::{Error, Result};
use crate::generator::{self, GeneratorParams, LatentCode};
use crate::sim::{step_scene, Scene};
use crate::trajectory::{Context, Trajectory};

/// Where candidate plans come from.
#[derive(Debug, Clone)]
pub enum ProposalSource {
    /// Fresh latent codes through a trained generator. With `canonicalize`
    /// the context is rotated so the goal lies on `+x` before generation and
    /// the result is rotated back.
    Imle {
        params: GeneratorParams<f32>,
        canonicalize: bool,
    },
    /// One path straight at the goal at `speed` m/s, stopping on it.
    StraightLine { speed: f64 },
    /// The previous plan shifted by one step plus random-walk noise of
    /// `sigma` m per step. Falls back to a straight line at `speed` without
    /// a previous plan.
    GaussianAroundPrevious { sigma: f64, speed: f64 },
}

/// Horizon and time step shared by every candidate of a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanShape {
    pub horizon: usize,
    pub dt: f64,
}

fn straight_line(c: &Context, goal: [f64; 2], speed: f64, shape: PlanShape) -> Result<Trajectory> {
    let p = c.position();
    let (dx, dy) = (goal[0] - p[0], goal[1] - p[1]);
    let dist = dx.hypot(dy);
    let (ux, uy) = if dist > 0.0 { (dx / dist, dy / dist) } else { (0.0, 0.0) };
    let points: Vec<[f64; 2]> = (0..shape.horizon)
        .map(|t| {
            let s = (t as f64 * speed * shape.dt).min(dist);
            if t == 0 {
                p
            } else {
                [p[0] + s * ux, p[1] + s * uy]
            }
        })
        .collect();
    Trajectory::from_positions(&points, shape.dt)
}

fn rotate(v: [f64; 2], cos: f64, sin: f64) -> [f64; 2] {
    [cos * v[0] - sin * v[1], sin * v[0] + cos * v[1]]
}

/// Rotates every position in `c` about the current position.
fn rotate_context(c: &Context, cos: f64, sin: f64) -> Context {
    let p = c.position();
    let turn = |q: [f64; 2]| {
        let r = rotate([q[0] - p[0], q[1] - p[1]], cos, sin);
        [p[0] + r[0], p[1] + r[1]]
    };
    let g = turn(c.goal_position());
    let mut goal = c.goal.clone();
    goal[0] = g[0];
    if goal.len() > 1 {
        goal[1] = g[1];
    }
    Context {
        current_state: c.current_state.clone(),
        goal,
        obstacle_history: c
            .obstacle_history
            .iter()
            .map(|h| h.iter().map(|&q| turn(q)).collect())
            .collect(),
    }
}

fn rotate_plan(traj: &mut Trajectory, cos: f64, sin: f64) {
    let d = traj.state_dim();
    let origin = [traj.states()[0], traj.states()[1]];
    let states = traj.states_mut();
    for row in states.chunks_mut(d).skip(1) {
        let r = rotate([row[0] - origin[0], row[1] - origin[1]], cos, sin);
        row[0] = origin[0] + r[0];
        row[1] = origin[1] + r[1];
    }
}

fn imle_batch<R: Rng + ?Sized>(
    params: &GeneratorParams<f32>,
    canonicalize: bool,
    c: &Context,
    count: usize,
    shape: PlanShape,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    if params.dims.horizon != shape.horizon {
        return Err(Error::dim(format!(
            "generator horizon {} differs from planning horizon {}",
            params.dims.horizon, shape.horizon
        )));
    }
    let codes: Vec<LatentCode> = (0..count)
        .map(|_| LatentCode::sample(params.dims.latent_dim, rng))
        .collect();
    let (p, g) = (c.position(), c.goal_position());
    let heading = (g[1] - p[1]).atan2(g[0] - p[0]);
    let turned;
    let ctx = if canonicalize {
        turned = rotate_context(c, heading.cos(), -heading.sin());
        &turned
    } else {
        c
    };
    codes
        .par_iter()
        .map(|z| {
            let mut traj = generator::forward(params, z, ctx, shape.dt)?;
            if canonicalize {
                rotate_plan(&mut traj, heading.cos(), heading.sin());
            }
            Ok(traj)
        })
        .collect()
}

/// Draws `count` candidate plans for context `c`. Randomness is consumed in
/// a fixed order, so the batch depends only on the arguments and `rng`.
pub fn sample_candidates<R: Rng + ?Sized>(
    src: &ProposalSource,
    c: &Context,
    previous: Option<&Trajectory>,
    count: usize,
    shape: PlanShape,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    if count == 0 {
        return Err(Error::Config("candidate count must be at least 1".into()));
    }
    if shape.horizon < 2 {
        return Err(Error::Config(format!("horizon {} is below 2", shape.horizon)));
    }
    match src {
        ProposalSource::Imle { params, canonicalize } => imle_batch(params, *canonicalize, c, count, shape, rng),
        ProposalSource::StraightLine { speed } => {
            let line = straight_line(c, c.goal_position(), *speed, shape)?;
            Ok(vec![line; count])
        }
        ProposalSource::GaussianAroundPrevious { sigma, speed } => {
            let base = match previous {
                Some(prev) if prev.horizon() == shape.horizon => shift_plan(prev, c)?,
                _ => straight_line(c, c.goal_position(), *speed, shape)?,
            };
            Ok((0..count).map(|_| random_walk(&base, *sigma, rng)).collect())
        }
    }
}

/// `prev` advanced by one step: drops its first state, repeats the last and
/// pins the new first state to the current position.
fn shift_plan(prev: &Trajectory, c: &Context) -> Result<Trajectory> {
    let h = prev.horizon();
    let mut points: Vec<[f64; 2]> = (1..h).map(|t| prev.position(t)).collect();
    points.push(prev.position(h - 1));
    points[0] = c.position();
    Trajectory::from_positions(&points, prev.dt())
}

/// `base` plus a 2-D Gaussian random walk of `sigma` per step from `t = 1`.
/// Noise is drawn in `(t, d)` order.
fn random_walk<R: Rng + ?Sized>(base: &Trajectory, sigma: f64, rng: &mut R) -> Trajectory {
    let mut out = base.clone();
    let d = out.state_dim();
    let mut walk = [0.0; 2];
    for row in out.states_mut().chunks_mut(d).skip(1) {
        for k in 0..2 {
            let e: f64 = StandardNormal.sample(rng);
            walk[k] += sigma * e;
            row[k] += walk[k];
        }
    }
    out
}

/// Index and value of the highest reward; the lowest index wins ties and
/// NaN rewards never win.
pub fn score_rank_select<F>(candidates: &[Trajectory], reward: F) -> Result<(usize, Trajectory)>
where
    F: Fn(&Trajectory) -> f64,
{
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let r = reward(c);
        if r.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| r > b) {
            best = Some((i, r));
        }
    }
    let (i, _) = match (best, candidates.is_empty()) {
        (Some(b), _) => b,
        (None, false) => (0, f64::NAN),
        (None, true) => return Err(Error::Empty("no candidates to rank".into())),
    };
    Ok((i, candidates[i].clone()))
}

/// Index of the smallest value, lowest index on ties.
fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// `w_k ∝ exp(-(c_k - min c) / λ)`. `λ = 0` is the zero-temperature limit:
/// all weight on the first minimum.
pub fn mppi_weights(costs: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if costs.is_empty() {
        return Err(Error::Empty("no costs to weight".into()));
    }
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature {temperature} must be finite and >= 0")));
    }
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numeric("MPPI costs must be finite".into()));
    }
    let lo = argmin(costs);
    if temperature == 0.0 {
        let mut w = vec![0.0; costs.len()];
        w[lo] = 1.0;
        return Ok(w);
    }
    let min = costs[lo];
    let raw: Vec<f64> = costs.iter().map(|c| (-(c - min) / temperature).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MppiConfig {
    pub temperature: f64,
    pub perturbations: usize,
    /// Random-walk step deviation, meters.
    pub sigma: f64,
    pub candidates: usize,
}

impl Default for MppiConfig {
    fn default() -> Self {
        MppiConfig {
            temperature: 0.5,
            perturbations: 32,
            sigma: 0.4,
            candidates: 64,
        }
    }
}

impl MppiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("MPPI temperature {} must be > 0", self.temperature)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("MPPI sigma {} must be >= 0", self.sigma)));
        }
        if self.candidates == 0 {
            return Err(Error::Config("candidate count must be at least 1".into()));
        }
        Ok(())
    }
}

fn evaluate_all(trajs: &[Trajectory], costs: &CostContext) -> Result<Vec<f64>> {
    trajs
        .par_iter()
        .map(|t| costs.evaluate(t).map(|b| b.total))
        .collect()
}

/// Result of one MPPI refinement.
#[derive(Debug, Clone)]
pub struct MppiOutcome {
    pub plan: Trajectory,
    /// Proposal used as the nominal.
    pub nominal: usize,
    /// Weights over the nominal (index 0) and the perturbations.
    pub weights: Vec<f64>,
}

/// One MPPI iteration around the cheapest proposal. Perturbations are 2-D
/// random walks drawn in `(k, t, d)` order with the first state fixed. The
/// plan is `nominal + sum_k w_k (x_k - nominal)`, so zero noise reproduces
/// the nominal exactly.
pub fn mppi_refine<R: Rng + ?Sized>(
    proposals: &[Trajectory],
    costs: &CostContext,
    cfg: &MppiConfig,
    rng: &mut R,
) -> Result<MppiOutcome> {
    if proposals.is_empty() {
        return Err(Error::Empty("no proposals for MPPI".into()));
    }
    let nominal_costs = evaluate_all(proposals, costs)?;
    let best = argmin(&nominal_costs);
    let nominal = &proposals[best];
    let mut rollouts = Vec::with_capacity(cfg.perturbations + 1);
    rollouts.push(nominal.clone());
    for _ in 0..cfg.perturbations {
        rollouts.push(random_walk(nominal, cfg.sigma, rng));
    }
    let mut rollout_costs = vec![nominal_costs[best]];
    rollout_costs.extend(evaluate_all(&rollouts[1..], costs)?);
    let weights = mppi_weights(&rollout_costs, cfg.temperature)?;

    let mut plan = nominal.clone();
    let base = nominal.states();
    let mut delta = vec![0.0; base.len()];
    for (w, x) in weights.iter().zip(&rollouts).skip(1) {
        for ((d, v), b) in delta.iter_mut().zip(x.states()).zip(base) {
            *d += w * (v - b);
        }
    }
    let d = plan.state_dim();
    for (i, (v, dv)) in plan.states_mut().iter_mut().zip(&delta).enumerate() {
        if i >= d {
            *v += dv;
        }
    }
    Ok(MppiOutcome {
        plan,
        nominal: best,
        weights,
    })
}

/// [`mppi_refine`] against costs built from `scene`.
pub fn mppi_step<R: Rng + ?Sized>(
    proposals: &[Trajectory],
    scene: &Scene,
    previous: Option<&Trajectory>,
    cfg: &MppiConfig,
    cost_cfg: &CostConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    let horizon = proposals.first().map_or(0, Trajectory::horizon);
    let costs = CostContext::from_scene(scene, horizon, previous, cost_cfg);
    Ok(mppi_refine(proposals, &costs, cfg, rng)?.plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    ScoreRank,
    Mppi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub goal_tolerance: f64,
    /// Past obstacle positions placed in the context.
    pub history_len: usize,
    pub mppi: MppiConfig,
    pub cost: CostConfig,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            horizon: 20,
            goal_tolerance: 0.2,
            history_len: 2,
            mppi: MppiConfig::default(),
            cost: CostConfig::default(),
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(Error::Config(format!("horizon {} is below 2", self.horizon)));
        }
        if !(self.goal_tolerance >= 0.0) {
            return Err(Error::Config(format!("goal tolerance {}", self.goal_tolerance)));
        }
        if self.history_len == 0 {
            return Err(Error::Config("history length must be at least 1".into()));
        }
        self.mppi.validate()?;
        self.cost.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    /// Robot position after executing the step.
    pub position: [f64; 2],
    pub cost: CostBreakdown,
    pub plan_ms: f64,
    pub plan: Trajectory,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        format!(
            "t={} x={:.6} y={:.6} cost={:.6} {} plan_ms={:.3}",
            self.t,
            self.position[0],
            self.position[1],
            self.cost.total,
            self.cost.log_fields(),
            self.plan_ms
        )
    }
}

/// Executed path and per-step planning records of one closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub dt: f64,
    /// Robot positions at `t = 0, dt, 2 dt, ...`, starting position included.
    pub positions: Vec<[f64; 2]>,
    pub steps: Vec<StepRecord>,
    pub reached: bool,
    /// Set when planning failed and the episode stopped early.
    pub error: Option<String>,
}

impl EpisodeLog {
    /// A log holding only an executed path, for metric computations.
    pub fn from_path(positions: Vec<[f64; 2]>, dt: f64) -> Self {
        EpisodeLog {
            dt,
            positions,
            steps: Vec::new(),
            reached: false,
            error: None,
        }
    }

    /// One line per step, newline terminated.
    pub fn log_text(&self) -> String {
        self.steps.iter().map(|s| s.log_line() + "\n").collect()
    }

    pub fn final_position(&self) -> [f64; 2] {
        *self.positions.last().expect("episode has a start position")
    }
}

fn observe(scene: &Scene, robot: [f64; 2], history: &[Vec<[f64; 2]>]) -> Result<Context> {
    Context::new(robot.to_vec(), scene.goal.to_vec(), history.to_vec())
}

/// Past positions under constant velocity, oldest first, ending at the
/// current one.
fn initial_history(scene: &Scene, len: usize) -> Vec<Vec<[f64; 2]>> {
    scene
        .obstacles
        .iter()
        .map(|ob| {
            (0..len)
                .map(|k| {
                    let back = (len - 1 - k) as f64 * scene.dt;
                    [ob.position[0] - back * ob.velocity[0], ob.position[1] - back * ob.velocity[1]]
                })
                .collect()
        })
        .collect()
}

fn plan_once<R: Rng + ?Sized>(
    scene: &Scene,
    ctx: &Context,
    src: &ProposalSource,
    mode: PlanMode,
    cfg: &PlannerConfig,
    previous: Option<&Trajectory>,
    rng: &mut R,
) -> Result<(Trajectory, CostBreakdown)> {
    let shape = PlanShape {
        horizon: cfg.horizon,
        dt: scene.dt,
    };
    let candidates = sample_candidates(src, ctx, previous, cfg.mppi.candidates, shape, rng)?;
    let costs = CostContext::from_scene(scene, cfg.horizon, previous, &cfg.cost);
    let plan = match mode {
        PlanMode::ScoreRank => {
            let totals = evaluate_all(&candidates, &costs)?;
            candidates[argmin(&totals)].clone()
        }
        PlanMode::Mppi => mppi_refine(&candidates, &costs, &cfg.mppi, rng)?.plan,
    };
    let breakdown = costs.evaluate(&plan)?;
    Ok((plan, breakdown))
}

/// Closed-loop episode: observe, plan, move to the plan's `t = 1` state,
/// advance the obstacles, and carry the plan forward. Stops within
/// `goal_tolerance` of the goal or after `scene.duration` steps. A planning
/// failure ends the episode and is recorded in the log.
pub fn receding_horizon_run<R: Rng + ?Sized>(
    scene: &Scene,
    src: &ProposalSource,
    mode: PlanMode,
    cfg: &PlannerConfig,
    rng: &mut R,
) -> Result<EpisodeLog> {
    cfg.validate()?;
    if scene.duration == 0 {
        return Err(Error::Config("scene duration must be at least 1".into()));
    }
    if !(scene.dt > 0.0) {
        return Err(Error::Config(format!("scene dt {} must be positive", scene.dt)));
    }
    let mut world = scene.clone();
    let mut robot = scene.robot_start;
    let mut history = initial_history(scene, cfg.history_len);
    let mut previous: Option<Trajectory> = None;
    let mut log = EpisodeLog::from_path(vec![robot], scene.dt);
    let near_goal = |p: [f64; 2]| (p[0] - scene.goal[0]).hypot(p[1] - scene.goal[1]) <= cfg.goal_tolerance;

    for t in 0..scene.duration {
        if near_goal(robot) {
            break;
        }
        let start = Instant::now();
        let planned = observe(&world, robot, &history)
            .and_then(|ctx| plan_once(&world, &ctx, src, mode, cfg, previous.as_ref(), rng));
        let plan_ms = start.elapsed().as_secs_f64() * 1e3;
        let (plan, cost) = match planned {
            Ok(v) => v,
            Err(e) => {
                log.error = Some(format!("step {t}: {e}"));
                break;
            }
        };
        robot = plan.position(1);
        world = step_scene(&world);
        for (h, ob) in history.iter_mut().zip(&world.obstacles) {
            h.remove(0);
            h.push(ob.position);
        }
        log.positions.push(robot);
        log.steps.push(StepRecord {
            t,
            position: robot,
            cost,
            plan_ms,
            plan: plan.clone(),
        });
        previous = Some(plan);
    }
    log.reached = near_goal(robot);
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::total_cost;
    use crate::sim::Obstacle;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ctx_at(p: [f64; 2], goal: [f64; 2]) -> Context {
        Context::new(p.to_vec(), goal.to_vec(), Vec::new()).unwrap()
    }

    fn open_scene(goal: [f64; 2]) -> Scene {
        Scene {
            robot_start: [0.0, 0.0],
            goal,
            obstacles: Vec::new(),
            duration: 40,
            dt: 0.4,
        }
    }

    const SHAPE: PlanShape = PlanShape { horizon: 20, dt: 0.4 };

    #[test]
    fn straight_line_steps_evenly_and_stops_at_goal() {
        let src = ProposalSource::StraightLine { speed: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = ctx_at([1.0, 1.0], [4.0, 5.0]);
        let batch = sample_candidates(&src, &c, None, 3, SHAPE, &mut rng).unwrap();
        assert_eq!(batch.len(), 3);
        let path = batch[0].positions();
        assert_eq!(path[0], [1.0, 1.0]);
        for t in 1..13 {
            let step = (path[t][0] - path[t - 1][0]).hypot(path[t][1] - path[t - 1][1]);
            assert!((step - 0.4).abs() < 1e-12, "t={t} step={step}");
        }
        assert_eq!(path[19], [4.0, 5.0]);
    }

    fn small_generator(seed: u64) -> GeneratorParams<f32> {
        let mut dims = generator::GeneratorDims::navigation(20);
        dims.hidden = vec![16, 16];
        generator::init_params(dims, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn imle_batches_repeat_with_the_rng_and_pin_the_start() {
        let src = ProposalSource::Imle {
            params: small_generator(1),
            canonicalize: true,
        };
        let c = ctx_at([2.0, -1.0], [5.0, 3.0]);
        let a = sample_candidates(&src, &c, None, 8, SHAPE, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_candidates(&src, &c, None, 8, SHAPE, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        for t in &a {
            assert_eq!(t.position(0), [2.0, -1.0]);
            assert_eq!(t.horizon(), 20);
        }
    }

    #[test]
    fn canonicalization_is_rotation_equivariant() {
        let params = small_generator(2);
        let src = ProposalSource::Imle {
            params,
            canonicalize: true,
        };
        let c0 = ctx_at([0.0, 0.0], [8.0, 0.0]);
        let c1 = ctx_at([0.0, 0.0], [0.0, 8.0]);
        let a = sample_candidates(&src, &c0, None, 4, SHAPE, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_candidates(&src, &c1, None, 4, SHAPE, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for t in 0..20 {
                let (p, q) = (x.position(t), y.position(t));
                assert!((q[0] + p[1]).abs() < 1e-9 && (q[1] - p[0]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn imle_rejects_a_horizon_mismatch() {
        let src = ProposalSource::Imle {
            params: small_generator(0),
            canonicalize: false,
        };
        let shape = PlanShape { horizon: 10, dt: 0.4 };
        let err = sample_candidates(&src, &ctx_at([0.0, 0.0], [1.0, 0.0]), None, 2, shape, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn gaussian_source_follows_the_shifted_previous_plan() {
        let src = ProposalSource::GaussianAroundPrevious { sigma: 0.0, speed: 1.0 };
        let prev = straight_line(&ctx_at([0.0, 0.0], [8.0, 0.0]), [8.0, 0.0], 1.0, SHAPE).unwrap();
        let c = ctx_at([0.4, 0.0], [8.0, 0.0]);
        let batch = sample_candidates(&src, &c, Some(&prev), 2, SHAPE, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(batch[0].position(0), [0.4, 0.0]);
        assert_eq!(batch[0].position(5), prev.position(6));
        assert_eq!(batch[0].position(19), prev.position(19));

        let noisy = ProposalSource::GaussianAroundPrevious { sigma: 0.1, speed: 1.0 };
        let batch = sample_candidates(&noisy, &c, Some(&prev), 2, SHAPE, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(batch[0].position(0), [0.4, 0.0]);
        assert_ne!(batch[0], batch[1]);
    }

    #[test]
    fn zero_candidates_is_an_error() {
        let src = ProposalSource::StraightLine { speed: 1.0 };
        assert!(sample_candidates(&src, &ctx_at([0.0, 0.0], [1.0, 0.0]), None, 0, SHAPE, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    fn line_traj(y: f64) -> Trajectory {
        let pts: Vec<[f64; 2]> = (0..5).map(|t| [t as f64, y]).collect();
        Trajectory::from_positions(&pts, 0.4).unwrap()
    }

    #[test]
    fn score_rank_basics() {
        let one = [line_traj(0.0)];
        assert_eq!(score_rank_select(&one, |_| 1.0).unwrap().0, 0);
        assert!(matches!(score_rank_select(&[], |_| 1.0), Err(Error::Empty(_))));

        let tied = [line_traj(0.0), line_traj(1.0), line_traj(2.0)];
        assert_eq!(score_rank_select(&tied, |_| 3.0).unwrap().0, 0);
        let (i, t) = score_rank_select(&tied, |t| -(t.position(0)[1] - 1.0).abs()).unwrap();
        assert_eq!((i, t), (1, tied[1].clone()));
    }

    #[test]
    fn score_rank_prefers_the_feasible_candidate() {
        let scene = Scene {
            robot_start: [0.0, 0.0],
            goal: [4.0, 0.0],
            obstacles: vec![Obstacle {
                position: [2.0, 0.0],
                velocity: [0.0, 0.0],
            }],
            duration: 10,
            dt: 0.4,
        };
        let colliding = line_traj(0.0);
        let pts: Vec<[f64; 2]> = (0..5).map(|t| [t as f64, [0.0, 1.0, 1.5, 1.0, 0.0][t]]).collect();
        let feasible = Trajectory::from_positions(&pts, 0.4).unwrap();
        let cfg = CostConfig::default();
        let cands = [colliding, feasible];
        let (i, _) = score_rank_select(&cands, |t| -total_cost(t, &scene, None, &cfg).unwrap().total).unwrap();
        assert_eq!(i, 1);
    }

    proptest! {
        #[test]
        fn score_rank_matches_a_linear_scan(scores in prop::collection::vec(-5i32..5, 1..30)) {
            let cands: Vec<Trajectory> = (0..scores.len()).map(|i| line_traj(i as f64)).collect();
            let reward = |t: &Trajectory| scores[t.position(0)[1] as usize] as f64;
            let mut oracle = 0;
            for i in 1..scores.len() {
                if scores[i] > scores[oracle] {
                    oracle = i;
                }
            }
            prop_assert_eq!(score_rank_select(&cands, reward).unwrap().0, oracle);
            // strictly increasing transform keeps the argmax
            let warped = |t: &Trajectory| (reward(t) * 0.3).exp() + 7.0;
            prop_assert_eq!(score_rank_select(&cands, warped).unwrap().0, oracle);
        }

        #[test]
        fn mppi_weights_are_a_translation_invariant_monotone_distribution(
            costs in prop::collection::vec(-50.0f64..50.0, 1..40),
            shift in -1e3f64..1e3,
            lambda in 0.05f64..5.0,
        ) {
            let w = mppi_weights(&costs, lambda).unwrap();
            let sum: f64 = w.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(w.iter().all(|&v| v >= 0.0));
            let moved: Vec<f64> = costs.iter().map(|c| c + shift).collect();
            let w2 = mppi_weights(&moved, lambda).unwrap();
            for (a, b) in w.iter().zip(&w2) {
                prop_assert!((a - b).abs() <= 1e-9 * a.max(1e-300).max(*b) + 1e-15);
            }
            for i in 0..costs.len() {
                for j in 0..costs.len() {
                    if costs[i] < costs[j] {
                        prop_assert!(w[i] >= w[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn mppi_weight_examples() {
        let w = mppi_weights(&[0.0, 0.0, 0.0], 0.5).unwrap();
        assert!(w.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let w = mppi_weights(&[1.0, 2.0], 1.0).unwrap();
        assert!((w[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((w[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert_eq!(mppi_weights(&[3.0, 1.0, 1.0, 2.0], 0.0).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(mppi_weights(&[3.0, 1.0, 2.0], 1e-6).unwrap(), vec![0.0, 1.0, 0.0]);
        assert!(mppi_weights(&[1.0, f64::NAN], 1.0).is_err());
        assert!(mppi_weights(&[], 1.0).is_err());
    }

    fn crossing_scene() -> Scene {
        Scene {
            robot_start: [0.0, 0.0],
            goal: [8.0, 0.0],
            obstacles: vec![Obstacle {
                position: [4.0, -3.0],
                velocity: [0.0, 0.8],
            }],
            duration: 30,
            dt: 0.4,
        }
    }

    fn proposals(n: usize, seed: u64) -> Vec<Trajectory> {
        let src = ProposalSource::GaussianAroundPrevious { sigma: 0.2, speed: 1.0 };
        sample_candidates(&src, &ctx_at([0.0, 0.0], [8.0, 0.0]), None, n, SHAPE, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn mppi_without_perturbations_or_noise_returns_the_nominal() {
        let scene = crossing_scene();
        let props = proposals(5, 1);
        let cost_cfg = CostConfig::default();
        let costs: Vec<f64> = props.iter().map(|p| total_cost(p, &scene, None, &cost_cfg).unwrap().total).collect();
        let best = props[argmin(&costs)].clone();

        let none = MppiConfig { perturbations: 0, ..MppiConfig::default() };
        let out = mppi_step(&props, &scene, None, &none, &cost_cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, best);

        let still = MppiConfig { sigma: 0.0, ..MppiConfig::default() };
        let out = mppi_step(&props, &scene, None, &still, &cost_cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, best);
        assert!(mppi_step(&[], &scene, None, &still, &cost_cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn mppi_matches_a_scripted_recomputation() {
        let scene = crossing_scene();
        let props = proposals(3, 5);
        let cost_cfg = CostConfig::default();
        let cfg = MppiConfig {
            perturbations: 2,
            sigma: 0.3,
            temperature: 0.5,
            candidates: 3,
        };
        let out = mppi_step(&props, &scene, None, &cfg, &cost_cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();

        // independent replay: nominal, two random walks, softmax, average
        let cost = |t: &Trajectory| total_cost(t, &scene, None, &cost_cfg).unwrap().total;
        let c: Vec<f64> = props.iter().map(cost).collect();
        let mut k = 0;
        for i in 1..3 {
            if c[i] < c[k] {
                k = i;
            }
        }
        let nominal = props[k].positions();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rollouts = vec![nominal.clone()];
        for _ in 0..2 {
            let mut path = nominal.clone();
            let (mut wx, mut wy) = (0.0, 0.0);
            for p in path.iter_mut().skip(1) {
                let ex: f64 = StandardNormal.sample(&mut rng);
                wx += 0.3 * ex;
                p[0] += wx;
                let ey: f64 = StandardNormal.sample(&mut rng);
                wy += 0.3 * ey;
                p[1] += wy;
            }
            rollouts.push(path);
        }
        let rc: Vec<f64> = rollouts
            .iter()
            .map(|p| cost(&Trajectory::from_positions(p, 0.4).unwrap()))
            .collect();
        let m = rc.iter().cloned().fold(f64::INFINITY, f64::min);
        let e: Vec<f64> = rc.iter().map(|v| (-(v - m) / 0.5).exp()).collect();
        let z: f64 = e.iter().sum();
        for t in 0..20 {
            for d in 0..2 {
                let avg: f64 = (0..3).map(|j| e[j] / z * rollouts[j][t][d]).sum();
                assert!((out.position(t)[d] - avg).abs() < 1e-9, "t={t} d={d}");
            }
        }
        assert_eq!(out.position(0), [0.0, 0.0]);
    }

    #[test]
    fn unobstructed_line_reaches_the_goal() {
        let scene = open_scene([5.0, 3.0]);
        let src = ProposalSource::StraightLine { speed: 1.0 };
        let cfg = PlannerConfig::default();
        for mode in [PlanMode::ScoreRank, PlanMode::Mppi] {
            let log = receding_horizon_run(&scene, &src, mode, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let end = log.final_position();
            let err = (end[0] - 5.0).hypot(end[1] - 3.0);
            assert!(err <= 0.4 + 1e-9, "{mode:?} err={err}");
            assert!(log.error.is_none());
        }
        let log = receding_horizon_run(&scene, &src, PlanMode::ScoreRank, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(log.reached);
        assert_eq!(log.positions.len(), log.steps.len() + 1);
    }

    #[test]
    fn episodes_replay_identically() {
        let scene = crossing_scene();
        let src = ProposalSource::GaussianAroundPrevious { sigma: 0.1, speed: 1.0 };
        let cfg = PlannerConfig::default();
        let run = |seed| {
            let mut log = receding_horizon_run(&scene, &src, PlanMode::Mppi, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            log.steps.iter_mut().for_each(|s| s.plan_ms = 0.0);
            log
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4).positions, run(5).positions);
    }

    #[test]
    fn planning_errors_end_the_episode_with_a_partial_log() {
        let src = ProposalSource::Imle {
            params: small_generator(0),
            canonicalize: false,
        };
        let cfg = PlannerConfig {
            horizon: 12,
            ..PlannerConfig::default()
        };
        let log = receding_horizon_run(&open_scene([3.0, 0.0]), &src, PlanMode::Mppi, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(log.steps.is_empty());
        assert_eq!(log.positions, vec![[0.0, 0.0]]);
        assert!(log.error.unwrap().contains("horizon"));
    }

    #[test]
    fn step_lines_have_the_logged_fields() {
        let scene = open_scene([2.0, 0.0]);
        let src = ProposalSource::StraightLine { speed: 1.0 };
        let log = receding_horizon_run(&scene, &src, PlanMode::ScoreRank, &PlannerConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let text = log.log_text();
        let first = text.lines().next().unwrap();
        let keys: Vec<&str> = first.split(' ').map(|f| f.split('=').next().unwrap()).collect();
        assert_eq!(keys, ["t", "x", "y", "cost", "cbf", "clf", "dev", "plan_ms"]);
        assert!(first.starts_with("t=0 x=0.400000 y=0.000000"));
    }
}
