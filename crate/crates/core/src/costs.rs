//! Analytic planning costs: a discrete exponential CBF safety penalty, a CLF
//! goal-progress term and a discounted deviation from the previous plan.
//!
//! With `h_t = ||p_t - q_t||^2 - r^2` per obstacle, the safety penalty is
//! `sum max(0, -(h_{t+1} - (1 - alpha) h_t)) + sum max(0, -h_t)`.
//! With `V_t = ||p_t - g||^2`, the goal term is
//! `V_{H-1} + sum max(0, V_{t+1} - V_t)`.
//! The deviation term is `sum gamma^t ||p_t - prev_{t+1}||^2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{constant_velocity_forecast, ObstacleForecast, Scene};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    pub safety_radius: f64,
    pub cbf_rate: f64,
    pub cbf_weight: f64,
    pub clf_weight: f64,
    pub deviation_weight: f64,
    pub deviation_discount: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            safety_radius: 0.5,
            cbf_rate: 0.2,
            cbf_weight: 10.0,
            clf_weight: 1.0,
            deviation_weight: 2.0,
            deviation_discount: 0.9,
        }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.safety_radius > 0.0 && self.safety_radius.is_finite()) {
            return Err(Error::Config(format!("safety radius {}", self.safety_radius)));
        }
        if !(self.cbf_rate > 0.0 && self.cbf_rate <= 1.0) {
            return Err(Error::Config(format!("cbf rate {} outside (0, 1]", self.cbf_rate)));
        }
        if !(self.deviation_discount > 0.0 && self.deviation_discount <= 1.0) {
            return Err(Error::Config(format!(
                "deviation discount {} outside (0, 1]",
                self.deviation_discount
            )));
        }
        for (name, w) in [
            ("cbf_weight", self.cbf_weight),
            ("clf_weight", self.clf_weight),
            ("deviation_weight", self.deviation_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} = {w}")));
            }
        }
        Ok(())
    }

    /// Same weights with another safety radius.
    pub fn with_radius(mut self, r: f64) -> Self {
        self.safety_radius = r;
        self
    }
}

fn sq(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    dx * dx + dy * dy
}

fn check_forecast(traj: &Trajectory, forecast: &ObstacleForecast) -> Result<()> {
    if forecast.obstacles() > 0 && forecast.steps() < traj.horizon() {
        return Err(Error::dim(format!(
            "forecast covers {} steps, trajectory has {}",
            forecast.steps(),
            traj.horizon()
        )));
    }
    Ok(())
}

/// CBF safety penalty; zero iff every hinge is inactive.
pub fn cbf_penalty(traj: &Trajectory, forecast: &ObstacleForecast, cfg: &CostConfig) -> Result<f64> {
    check_forecast(traj, forecast)?;
    let h_len = traj.horizon();
    let r2 = cfg.safety_radius * cfg.safety_radius;
    let keep = 1.0 - cfg.cbf_rate;
    let mut total = 0.0;
    for o in 0..forecast.obstacles() {
        let mut prev = sq(traj.position(0), forecast.get(o, 0)) - r2;
        total += (-prev).max(0.0);
        for t in 1..h_len {
            let h = sq(traj.position(t), forecast.get(o, t)) - r2;
            total += (-(h - keep * prev)).max(0.0);
            total += (-h).max(0.0);
            prev = h;
        }
    }
    Ok(total)
}

pub fn clf_cost(traj: &Trajectory, goal: [f64; 2]) -> f64 {
    let v: Vec<f64> = (0..traj.horizon()).map(|t| sq(traj.position(t), goal)).collect();
    let increases: f64 = v.windows(2).map(|w| (w[1] - w[0]).max(0.0)).sum();
    v[v.len() - 1] + increases
}

/// Distance to the previous plan shifted one step forward in time.
pub fn deviation_penalty(traj: &Trajectory, previous: &Trajectory, cfg: &CostConfig) -> f64 {
    let overlap = traj.horizon().min(previous.horizon().saturating_sub(1));
    let mut weight = 1.0;
    let mut total = 0.0;
    for t in 0..overlap {
        total += weight * sq(traj.position(t), previous.position(t + 1));
        weight *= cfg.deviation_discount;
    }
    total
}

/// Unweighted cost terms and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub cbf: f64,
    pub clf: f64,
    pub dev: f64,
    pub total: f64,
}

impl CostBreakdown {
    pub fn log_fields(&self) -> String {
        format!("cbf={:.6} clf={:.6} dev={:.6}", self.cbf, self.clf, self.dev)
    }
}

/// Everything a cost evaluation needs besides the trajectory. Build once per
/// planning step and share across candidates.
#[derive(Debug, Clone)]
pub struct CostContext<'a> {
    pub forecast: ObstacleForecast,
    pub goal: [f64; 2],
    pub previous: Option<&'a Trajectory>,
    pub cfg: CostConfig,
}

impl<'a> CostContext<'a> {
    pub fn from_scene(scene: &Scene, horizon: usize, previous: Option<&'a Trajectory>, cfg: &CostConfig) -> Self {
        CostContext {
            forecast: constant_velocity_forecast(scene, horizon),
            goal: scene.goal,
            previous,
            cfg: *cfg,
        }
    }

    pub fn evaluate(&self, traj: &Trajectory) -> Result<CostBreakdown> {
        let cbf = cbf_penalty(traj, &self.forecast, &self.cfg)?;
        let clf = clf_cost(traj, self.goal);
        let dev = self
            .previous
            .map_or(0.0, |p| deviation_penalty(traj, p, &self.cfg));
        let c = &self.cfg;
        let mut total = c.cbf_weight * cbf + c.clf_weight * clf;
        if self.previous.is_some() {
            total += c.deviation_weight * dev;
        }
        Ok(CostBreakdown { cbf, clf, dev, total })
    }

    /// Subgradient of the weighted total with respect to each position.
    /// Hinges contribute only when strictly active.
    pub fn gradient(&self, traj: &Trajectory) -> Result<Vec<[f64; 2]>> {
        check_forecast(traj, &self.forecast)?;
        let c = &self.cfg;
        let n = traj.horizon();
        let p: Vec<[f64; 2]> = traj.positions();
        let mut g = vec![[0.0; 2]; n];
        let mut add = |t: usize, s: f64, d: [f64; 2]| {
            g[t][0] += s * d[0];
            g[t][1] += s * d[1];
        };

        if c.cbf_weight != 0.0 {
            let r2 = c.safety_radius * c.safety_radius;
            let keep = 1.0 - c.cbf_rate;
            for o in 0..self.forecast.obstacles() {
                let h: Vec<f64> = (0..n).map(|t| sq(p[t], self.forecast.get(o, t)) - r2).collect();
                let dh = |t: usize| {
                    let q = self.forecast.get(o, t);
                    [2.0 * (p[t][0] - q[0]), 2.0 * (p[t][1] - q[1])]
                };
                for t in 0..n {
                    if h[t] < 0.0 {
                        add(t, -c.cbf_weight, dh(t));
                    }
                    if t + 1 < n && h[t + 1] - keep * h[t] < 0.0 {
                        add(t + 1, -c.cbf_weight, dh(t + 1));
                        add(t, c.cbf_weight * keep, dh(t));
                    }
                }
            }
        }

        if c.clf_weight != 0.0 {
            let goal = self.goal;
            let v: Vec<f64> = p.iter().map(|&q| sq(q, goal)).collect();
            let dv = |t: usize| [2.0 * (p[t][0] - goal[0]), 2.0 * (p[t][1] - goal[1])];
            add(n - 1, c.clf_weight, dv(n - 1));
            for t in 0..n - 1 {
                if v[t + 1] - v[t] > 0.0 {
                    add(t + 1, c.clf_weight, dv(t + 1));
                    add(t, -c.clf_weight, dv(t));
                }
            }
        }

        if let Some(prev) = self.previous {
            if c.deviation_weight != 0.0 {
                let overlap = n.min(prev.horizon().saturating_sub(1));
                let mut weight = c.deviation_weight;
                for t in 0..overlap {
                    let q = prev.position(t + 1);
                    add(t, 2.0 * weight, [p[t][0] - q[0], p[t][1] - q[1]]);
                    weight *= c.deviation_discount;
                }
            }
        }
        Ok(g)
    }
}

/// Weighted total cost with its breakdown; the deviation term is dropped
/// without a previous plan.
pub fn total_cost(
    traj: &Trajectory,
    scene: &Scene,
    previous: Option<&Trajectory>,
    cfg: &CostConfig,
) -> Result<CostBreakdown> {
    CostContext::from_scene(scene, traj.horizon(), previous, cfg).evaluate(traj)
}

pub fn cost_gradient(
    traj: &Trajectory,
    scene: &Scene,
    previous: Option<&Trajectory>,
    cfg: &CostConfig,
) -> Result<Vec<[f64; 2]>> {
    CostContext::from_scene(scene, traj.horizon(), previous, cfg).gradient(traj)
}

/// Conservative radius used to score recorded trajectories.
pub const REWARD_RADIUS: f64 = 1.0;

/// Dataset reward: the negated CBF penalty at [`REWARD_RADIUS`].
pub fn safety_reward(traj: &Trajectory, forecast: &ObstacleForecast) -> Result<f64> {
    let cfg = CostConfig::default().with_radius(REWARD_RADIUS);
    Ok(-cbf_penalty(traj, forecast, &cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Obstacle;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(n: usize, step: f64, y: f64) -> Trajectory {
        let pts: Vec<[f64; 2]> = (0..n).map(|t| [t as f64 * step, y]).collect();
        Trajectory::from_positions(&pts, 0.4).unwrap()
    }

    fn scene_with(obstacles: Vec<Obstacle>) -> Scene {
        Scene {
            robot_start: [0.0, 0.0],
            goal: [8.0, 0.0],
            obstacles,
            duration: 40,
            dt: 0.4,
        }
    }

    fn still(x: f64, y: f64) -> Obstacle {
        Obstacle {
            position: [x, y],
            velocity: [0.0, 0.0],
        }
    }

    fn cfg() -> CostConfig {
        CostConfig::default()
    }

    #[test]
    fn cbf_zero_when_clear_and_receding() {
        // moving away from an obstacle behind the start: h grows every step
        let traj = line(6, 0.4, 0.0);
        let f = constant_velocity_forecast(&scene_with(vec![still(-2.0, 0.0)]), 6);
        assert_eq!(cbf_penalty(&traj, &f, &cfg()).unwrap(), 0.0);
    }

    #[test]
    fn cbf_positive_through_obstacle() {
        let traj = line(11, 0.4, 0.0);
        let f = constant_velocity_forecast(&scene_with(vec![still(2.0, 0.0)]), 11);
        assert!(cbf_penalty(&traj, &f, &cfg()).unwrap() > 0.0);
    }

    #[test]
    fn cbf_short_forecast_rejected() {
        let traj = line(6, 0.4, 0.0);
        let f = constant_velocity_forecast(&scene_with(vec![still(2.0, 0.0)]), 3);
        assert!(matches!(cbf_penalty(&traj, &f, &cfg()), Err(Error::Dimension(_))));
        assert_eq!(cbf_penalty(&traj, &ObstacleForecast::empty(0), &cfg()).unwrap(), 0.0);
    }

    #[test]
    fn cbf_single_step_hand_value() {
        // h_0 = 1 - 0.25 = 0.75, h_1 = 0.25 - 0.25 = 0: rate hinge 0.8*0.75 = 0.6
        let traj = Trajectory::from_positions(&[[0.0, 0.0], [0.5, 0.0]], 0.4).unwrap();
        let f = constant_velocity_forecast(&scene_with(vec![still(1.0, 0.0)]), 2);
        let v = cbf_penalty(&traj, &f, &cfg()).unwrap();
        assert!((v - 0.6).abs() < 1e-12);
    }

    #[test]
    fn clf_examples() {
        let at_goal = Trajectory::from_positions(&[[8.0, 0.0]; 5], 0.4).unwrap();
        assert_eq!(clf_cost(&at_goal, [8.0, 0.0]), 0.0);
        let approach = line(5, 1.0, 0.0);
        assert_eq!(clf_cost(&approach, [8.0, 0.0]), 16.0);
        // 0 -> 2 -> 1 towards goal at 3: V = 9, 1, 4; increase 3, terminal 4
        let back = Trajectory::from_positions(&[[0.0, 0.0], [2.0, 0.0], [1.0, 0.0]], 0.4).unwrap();
        assert_eq!(clf_cost(&back, [3.0, 0.0]), 7.0);
    }

    #[test]
    fn deviation_examples() {
        let prev = line(6, 0.4, 0.0);
        let pts: Vec<[f64; 2]> = (1..6).map(|t| [t as f64 * 0.4, 0.0]).chain([[2.4, 0.0]]).collect();
        let shifted = Trajectory::from_positions(&pts, 0.4).unwrap();
        assert_eq!(deviation_penalty(&shifted, &prev, &cfg()), 0.0);

        let prev = Trajectory::from_positions(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], 0.4).unwrap();
        let traj = Trajectory::from_positions(&[[1.0, 1.0], [2.0, 2.0], [9.0, 9.0]], 0.4).unwrap();
        let undiscounted = CostConfig {
            deviation_discount: 1.0,
            ..cfg()
        };
        assert_eq!(deviation_penalty(&traj, &prev, &undiscounted), 1.0 + 4.0);
        // 1 + 0.9 * 4
        assert!((deviation_penalty(&traj, &prev, &cfg()) - 4.6).abs() < 1e-12);
    }

    #[test]
    fn total_cost_weights() {
        let traj = line(8, 0.5, 0.2);
        let prev = line(8, 0.45, 0.0);
        let s = scene_with(vec![still(2.0, 0.0)]);
        let zero = CostConfig {
            cbf_weight: 0.0,
            clf_weight: 0.0,
            deviation_weight: 0.0,
            ..cfg()
        };
        assert_eq!(total_cost(&traj, &s, Some(&prev), &zero).unwrap().total, 0.0);
        let only_clf = CostConfig { clf_weight: 2.5, ..zero };
        let b = total_cost(&traj, &s, Some(&prev), &only_clf).unwrap();
        assert_eq!(b.total, 2.5 * clf_cost(&traj, s.goal));

        let c = cfg();
        let b = total_cost(&traj, &s, Some(&prev), &c).unwrap();
        let f = constant_velocity_forecast(&s, 8);
        let oracle = c.cbf_weight * cbf_penalty(&traj, &f, &c).unwrap()
            + c.clf_weight * clf_cost(&traj, s.goal)
            + c.deviation_weight * deviation_penalty(&traj, &prev, &c);
        assert!((b.total - oracle).abs() < 1e-12 * oracle.max(1.0));
        let without = total_cost(&traj, &s, None, &c).unwrap();
        assert_eq!(without.dev, 0.0);
        assert!(without.total < b.total);
        assert!(b.log_fields().starts_with("cbf="));
    }

    #[test]
    fn feasible_plan_has_no_hinge_gradient() {
        // goal-seated, far from obstacles, following the previous plan
        let at_goal = Trajectory::from_positions(&[[8.0, 0.0]; 6], 0.4).unwrap();
        let s = scene_with(vec![still(0.0, 5.0)]);
        let g = cost_gradient(&at_goal, &s, Some(&at_goal), &cfg()).unwrap();
        assert!(g.iter().all(|v| v[0] == 0.0 && v[1] == 0.0));
    }

    #[test]
    fn doubling_cbf_weight_doubles_its_gradient() {
        let traj = line(8, 0.5, 0.1);
        let s = scene_with(vec![still(2.0, 0.0)]);
        let only = |w: f64| CostConfig {
            cbf_weight: w,
            clf_weight: 0.0,
            deviation_weight: 0.0,
            ..cfg()
        };
        let a = cost_gradient(&traj, &s, None, &only(1.0)).unwrap();
        let b = cost_gradient(&traj, &s, None, &only(2.0)).unwrap();
        assert!(a.iter().any(|v| v[0] != 0.0));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(2.0 * x[0], y[0]);
            assert_eq!(2.0 * x[1], y[1]);
        }
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (Trajectory, Trajectory, Scene) {
        let n = rng.random_range(3..10);
        let mut pts = vec![[0.0, 0.0]; n];
        let mut prev = vec![[0.0, 0.0]; n];
        for t in 0..n {
            pts[t] = [rng.random_range(-1.0..5.0), rng.random_range(-2.0..2.0)];
            prev[t] = [rng.random_range(-1.0..5.0), rng.random_range(-2.0..2.0)];
        }
        let obstacles = (0..rng.random_range(0..4))
            .map(|_| Obstacle {
                position: [rng.random_range(0.0..4.0), rng.random_range(-2.0..2.0)],
                velocity: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            })
            .collect();
        let mut s = scene_with(obstacles);
        s.goal = [rng.random_range(2.0..8.0), rng.random_range(-1.0..1.0)];
        (
            Trajectory::from_positions(&pts, 0.4).unwrap(),
            Trajectory::from_positions(&prev, 0.4).unwrap(),
            s,
        )
    }

    /// Brute-force value and active-hinge count over every (t, o).
    fn cbf_oracle(traj: &Trajectory, s: &Scene, c: &CostConfig) -> (f64, usize) {
        let n = traj.horizon();
        let (mut value, mut active) = (0.0, 0);
        for ob in &s.obstacles {
            let q = |t: usize| {
                [
                    ob.position[0] + t as f64 * s.dt * ob.velocity[0],
                    ob.position[1] + t as f64 * s.dt * ob.velocity[1],
                ]
            };
            let h = |t: usize| {
                let p = traj.position(t);
                let d = q(t);
                (p[0] - d[0]).powi(2) + (p[1] - d[1]).powi(2) - c.safety_radius.powi(2)
            };
            for t in 0..n {
                if h(t) < 0.0 {
                    value -= h(t);
                    active += 1;
                }
                if t + 1 < n {
                    let x = h(t + 1) - (1.0 - c.cbf_rate) * h(t);
                    if x < 0.0 {
                        value -= x;
                        active += 1;
                    }
                }
            }
        }
        (value, active)
    }

    #[test]
    fn cbf_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = cfg();
        let mut zeros = 0;
        for _ in 0..1000 {
            let (traj, _, s) = random_case(&mut rng);
            let f = constant_velocity_forecast(&s, traj.horizon());
            let v = cbf_penalty(&traj, &f, &c).unwrap();
            let (oracle, active) = cbf_oracle(&traj, &s, &c);
            assert_eq!(v == 0.0, active == 0);
            assert!((v - oracle).abs() <= 1e-9 * oracle.max(1.0));
            zeros += usize::from(v == 0.0);
        }
        assert!(zeros > 0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = cfg();
        let h = 1e-6;
        let mut checked = 0;
        for _ in 0..200 {
            let (traj, prev, s) = random_case(&mut rng);
            let ctx = CostContext::from_scene(&s, traj.horizon(), Some(&prev), &c);
            let g = ctx.gradient(&traj).unwrap();
            let base = traj.states().to_vec();
            for i in 0..base.len() {
                let eval = |delta: f64| {
                    let mut st = base.clone();
                    st[i] += delta;
                    let t = Trajectory::new(st, 2, None, 0.4).unwrap();
                    ctx.evaluate(&t).unwrap().total
                };
                let (fp, f0, fm) = (eval(h), eval(0.0), eval(-h));
                // skip coordinates sitting near a kink: one-sided slopes disagree
                let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
                if (right - left).abs() > 1e-4 * right.abs().max(left.abs()).max(1.0) {
                    continue;
                }
                let fd = (fp - fm) / (2.0 * h);
                let an = g[i / 2][i % 2];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "coord {i}: analytic {an} vs fd {fd}");
                checked += 1;
            }
        }
        assert!(checked > 1000);
    }

    proptest! {
        #[test]
        fn cbf_nonnegative_and_radius_monotone(seed in 0u64..5000, r in 0.1f64..1.5, shrink in 0.1f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (traj, _, s) = random_case(&mut rng);
            let f = constant_velocity_forecast(&s, traj.horizon());
            let big = cfg().with_radius(r);
            let v = cbf_penalty(&traj, &f, &big).unwrap();
            prop_assert!(v >= 0.0);
            if v == 0.0 {
                // the rate hinge is affine in r^2 with coefficient -alpha, so shrinking r keeps it inactive
                let small = cfg().with_radius(r * shrink);
                prop_assert_eq!(cbf_penalty(&traj, &f, &small).unwrap(), 0.0);
            }
        }

        #[test]
        fn total_cost_homogeneous_in_weights(seed in 0u64..5000, k in 0.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (traj, prev, s) = random_case(&mut rng);
            let c = cfg();
            let scaled = CostConfig {
                cbf_weight: k * c.cbf_weight,
                clf_weight: k * c.clf_weight,
                deviation_weight: k * c.deviation_weight,
                ..c
            };
            let a = total_cost(&traj, &s, Some(&prev), &c).unwrap().total;
            let b = total_cost(&traj, &s, Some(&prev), &scaled).unwrap().total;
            prop_assert!((b - k * a).abs() <= 1e-9 * (k * a).abs().max(1.0));
        }
    }

    #[test]
    fn reward_uses_conservative_radius() {
        let traj = line(6, 0.4, 0.8);
        let f = constant_velocity_forecast(&scene_with(vec![still(1.0, 0.0)]), 6);
        let r = safety_reward(&traj, &f).unwrap();
        assert!(r < 0.0);
        assert_eq!(r, -cbf_penalty(&traj, &f, &cfg().with_radius(1.0)).unwrap());
        assert!(cbf_penalty(&traj, &f, &cfg()).unwrap() < -r);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(cfg().with_radius(0.0).validate().is_err());
        assert!(CostConfig { cbf_rate: 0.0, ..cfg() }.validate().is_err());
        assert!(CostConfig { clf_weight: -1.0, ..cfg() }.validate().is_err());
        assert!(CostConfig { deviation_discount: 1.5, ..cfg() }.validate().is_err());
    }
}
