//! Synthetic navigation data, dataset augmentation, raw pedestrian-file
//! ingestion and the constant-velocity obstacle simulator.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::trajectory::{Context, Trajectory, WeightedSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub robot_start: [f64; 2],
    pub goal: [f64; 2],
    pub obstacles: Vec<Obstacle>,
    /// Episode length in steps.
    pub duration: usize,
    pub dt: f64,
}

/// Obstacle positions over a horizon, indexed `(obstacle, step)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleForecast {
    obstacles: usize,
    steps: usize,
    data: Vec<[f64; 2]>,
}

impl ObstacleForecast {
    pub fn new(obstacles: usize, steps: usize, data: Vec<[f64; 2]>) -> Result<Self> {
        if data.len() != obstacles * steps {
            return Err(Error::dim(format!(
                "{} forecast points for {obstacles}x{steps}",
                data.len()
            )));
        }
        Ok(ObstacleForecast {
            obstacles,
            steps,
            data,
        })
    }

    pub fn empty(steps: usize) -> Self {
        ObstacleForecast {
            obstacles: 0,
            steps,
            data: Vec::new(),
        }
    }

    pub fn obstacles(&self) -> usize {
        self.obstacles
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn get(&self, obstacle: usize, step: usize) -> [f64; 2] {
        self.data[obstacle * self.steps + step]
    }
}

/// Obstacle `o` at step `t` sits at `position_o + t * dt * velocity_o`, `t = 0..steps`.
pub fn constant_velocity_forecast(scene: &Scene, steps: usize) -> ObstacleForecast {
    let mut data = Vec::with_capacity(scene.obstacles.len() * steps);
    for ob in &scene.obstacles {
        for t in 0..steps {
            let k = t as f64 * scene.dt;
            data.push([
                ob.position[0] + k * ob.velocity[0],
                ob.position[1] + k * ob.velocity[1],
            ]);
        }
    }
    ObstacleForecast {
        obstacles: scene.obstacles.len(),
        steps,
        data,
    }
}

/// Constant-velocity forecast from a context's obstacle histories. The
/// velocity comes from the two newest entries spaced `dt` apart; a single
/// entry means a static obstacle.
pub fn forecast_from_context(ctx: &Context, steps: usize, dt: f64) -> ObstacleForecast {
    let mut data = Vec::with_capacity(ctx.obstacle_history.len() * steps);
    let mut count = 0;
    for h in &ctx.obstacle_history {
        let Some(&last) = h.last() else { continue };
        let vel = match h.len() {
            0 | 1 => [0.0, 0.0],
            n => [(last[0] - h[n - 2][0]) / dt, (last[1] - h[n - 2][1]) / dt],
        };
        count += 1;
        for t in 0..steps {
            let k = t as f64 * dt;
            data.push([last[0] + k * vel[0], last[1] + k * vel[1]]);
        }
    }
    ObstacleForecast {
        obstacles: count,
        steps,
        data,
    }
}

/// Advances every obstacle by one `dt`. The robot is moved by the planner.
pub fn step_scene(scene: &Scene) -> Scene {
    let mut next = scene.clone();
    for ob in &mut next.obstacles {
        ob.position[0] += scene.dt * ob.velocity[0];
        ob.position[1] += scene.dt * ob.velocity[1];
    }
    next
}

#[derive(Debug, Clone, PartialEq)]
pub struct BimodalConfig {
    pub goal_distance: f64,
    /// When set, each sample draws its goal distance uniformly from this range
    /// and scales the detour amplitude proportionally.
    pub goal_range: Option<(f64, f64)>,
    /// Lateral detour at the obstacle, meters.
    pub amplitude: f64,
    /// Forward speed along x, m/s.
    pub speed: f64,
    pub noise_sigma: f64,
    /// Past positions stored per obstacle in the context.
    pub history_len: usize,
    /// Put the central obstacle in the context.
    pub include_obstacle: bool,
    /// Start each sample at a uniformly drawn step of the full demonstration
    /// instead of at its beginning. The context then holds the noisy
    /// position at that step.
    pub random_phase: bool,
}

impl Default for BimodalConfig {
    fn default() -> Self {
        BimodalConfig {
            goal_distance: 8.0,
            goal_range: None,
            amplitude: 1.5,
            speed: 1.0,
            noise_sigma: 0.05,
            history_len: 1,
            include_obstacle: true,
            random_phase: false,
        }
    }
}

/// Lateral offset of the nominal detour at step `t` (`+` is the left mode).
pub fn nominal_detour(cfg: &BimodalConfig, goal: f64, t: usize, dt: f64) -> [f64; 2] {
    let u = (t as f64 * cfg.speed * dt / goal).min(1.0);
    let amp = cfg.amplitude * goal / cfg.goal_distance;
    [goal * u, amp * (PI * u).sin()]
}

/// Two-mode detours from `(0,0)` to `(G,0)` around an obstacle at `(G/2, 0)`.
/// Even-indexed samples pass left (`y > 0`), odd-indexed pass right.
pub fn generate_bimodal_dataset(n: usize, horizon: usize, dt: f64, seed: u64) -> Result<Dataset> {
    generate_bimodal_with(&BimodalConfig::default(), n, horizon, dt, seed)
}

pub fn generate_bimodal_with(
    cfg: &BimodalConfig,
    n: usize,
    horizon: usize,
    dt: f64,
    seed: u64,
) -> Result<Dataset> {
    if n < 2 || horizon < 2 {
        return Err(Error::Config(format!("need n >= 2 and H >= 2, got n={n} H={horizon}")));
    }
    if !(cfg.noise_sigma >= 0.0) {
        return Err(Error::Config("noise sigma must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let goal = match cfg.goal_range {
            Some((lo, hi)) => rng.random_range(lo..=hi),
            None => cfg.goal_distance,
        };
        let side = if i % 2 == 0 { 1.0 } else { -1.0 };
        let offset = if cfg.random_phase {
            let arrival = (goal / (cfg.speed * dt)).ceil() as usize;
            rng.random_range(0..=arrival)
        } else {
            0
        };
        let mut points = Vec::with_capacity(horizon);
        for t in offset..offset + horizon {
            let [x, y] = nominal_detour(cfg, goal, t, dt);
            if t == 0 {
                points.push([x, y]);
            } else {
                points.push([x + noise.sample(&mut rng), side * y + noise.sample(&mut rng)]);
            }
        }
        let history = if cfg.include_obstacle {
            vec![vec![[goal / 2.0, 0.0]; cfg.history_len]]
        } else {
            Vec::new()
        };
        let ctx = Context::new(points[0].to_vec(), vec![goal, 0.0], history)?;
        let traj = Trajectory::from_positions(&points, dt)?;
        samples.push(WeightedSample::new(traj, ctx, 0.0));
    }
    let mut ds = Dataset::new(samples, horizon, dt)?;
    ds.metadata.insert("source".into(), "bimodal".into());
    ds.metadata.insert("seed".into(), seed.to_string());
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationSpec {
    pub translations: Vec<[f64; 2]>,
    pub rotations: Vec<f64>,
    pub smoothing_window: usize,
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        AugmentationSpec {
            translations: vec![[0.0, 0.0]],
            rotations: vec![0.0],
            smoothing_window: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.smoothing_window == 0 || self.smoothing_window % 2 == 0 {
            return Err(Error::Config(format!(
                "smoothing window {} must be odd",
                self.smoothing_window
            )));
        }
        if let Some(a) = self.rotations.iter().find(|a| !(**a > -PI && **a <= PI)) {
            return Err(Error::Config(format!("rotation {a} outside (-pi, pi]")));
        }
        if self.translations.is_empty() || self.rotations.is_empty() {
            return Err(Error::Config("augmentation needs at least one translation and rotation".into()));
        }
        Ok(())
    }
}

/// Returns a dataset with `|translations| * |rotations|` transformed copies of
/// every sample: rotation about the trajectory's first position, then
/// translation (context positions move with it), then centered moving-average
/// smoothing with edge replication. The first state stays pinned to the
/// transformed start so trajectories keep agreeing with their contexts.
pub fn augment(
    ds: &Dataset,
    spec: &AugmentationSpec,
    reward: Option<&dyn Fn(&WeightedSample) -> f64>,
) -> Result<Dataset> {
    spec.validate()?;
    if spec.smoothing_window > ds.horizon {
        return Err(Error::Config(format!(
            "smoothing window {} exceeds horizon {}",
            spec.smoothing_window, ds.horizon
        )));
    }
    let mut samples = Vec::with_capacity(ds.len() * spec.translations.len() * spec.rotations.len());
    for s in &ds.samples {
        let pivot = s.trajectory.position(0);
        for tr in &spec.translations {
            for &angle in &spec.rotations {
                let map = |p: [f64; 2]| -> [f64; 2] {
                    let q = rotate_about(p, pivot, angle);
                    [q[0] + tr[0], q[1] + tr[1]]
                };
                let mut out = transform_sample(s, &map)?;
                if spec.smoothing_window > 1 {
                    out.trajectory = smooth(&out.trajectory, spec.smoothing_window)?;
                }
                if let Some(r) = reward {
                    out.return_value = r(&out);
                }
                samples.push(out);
            }
        }
    }
    let mut out = Dataset::new(samples, ds.horizon, ds.dt)?;
    out.metadata = ds.metadata.clone();
    out.metadata.insert(
        "augmentation".into(),
        format!(
            "translations={} rotations={} window={}",
            spec.translations.len(),
            spec.rotations.len(),
            spec.smoothing_window
        ),
    );
    Ok(out)
}

fn rotate_about(p: [f64; 2], pivot: [f64; 2], angle: f64) -> [f64; 2] {
    if angle == 0.0 {
        return p;
    }
    let (s, c) = angle.sin_cos();
    let (dx, dy) = (p[0] - pivot[0], p[1] - pivot[1]);
    [pivot[0] + c * dx - s * dy, pivot[1] + s * dx + c * dy]
}

fn transform_sample(s: &WeightedSample, map: &dyn Fn([f64; 2]) -> [f64; 2]) -> Result<WeightedSample> {
    let traj = &s.trajectory;
    let mut states = traj.states().to_vec();
    let d = traj.state_dim();
    if d >= 2 {
        for row in states.chunks_mut(d) {
            let q = map([row[0], row[1]]);
            row[0] = q[0];
            row[1] = q[1];
        }
    }
    let actions = traj.actions().map(|a| (a.to_vec(), traj.action_dim()));
    let trajectory = Trajectory::new(states, d, actions, traj.dt())?;

    let mut ctx = s.context.clone();
    if ctx.current_state.len() >= 2 {
        let q = map([ctx.current_state[0], ctx.current_state[1]]);
        ctx.current_state[..2].copy_from_slice(&q);
    }
    if ctx.goal.len() >= 2 {
        let q = map([ctx.goal[0], ctx.goal[1]]);
        ctx.goal[..2].copy_from_slice(&q);
    }
    for p in ctx.obstacle_history.iter_mut().flatten() {
        *p = map(*p);
    }
    Ok(WeightedSample {
        trajectory,
        context: ctx,
        return_value: s.return_value,
        weight: s.weight,
    })
}

/// Centered moving average along time with edge replication.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let n = values.len() as isize;
    let half = (window / 2) as isize;
    (0..n)
        .map(|t| {
            let sum: f64 = (t - half..=t + half)
                .map(|k| values[k.clamp(0, n - 1) as usize])
                .sum();
            sum / window as f64
        })
        .collect()
}

fn smooth(traj: &Trajectory, window: usize) -> Result<Trajectory> {
    let h = traj.horizon();
    let d = traj.state_dim();
    let mut states = traj.states().to_vec();
    for ch in 0..d {
        let column: Vec<f64> = (0..h).map(|t| traj.state(t)[ch]).collect();
        let smoothed = moving_average(&column, window);
        for t in 1..h {
            states[t * d + ch] = smoothed[t];
        }
    }
    let actions = traj.actions().map(|a| (a.to_vec(), traj.action_dim()));
    Trajectory::new(states, d, actions, traj.dt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawLoadOptions {
    pub horizon: usize,
    pub dt: f64,
    /// Seconds per frame-id unit. `None` assumes the most common frame gap is `dt`.
    pub frame_period: Option<f64>,
}

/// Window stride used when slicing long tracks.
pub fn window_stride(horizon: usize) -> usize {
    (horizon / 2).max(1)
}

/// Loads whitespace-separated `frame_id agent_id x y` rows into a dataset of
/// fixed-horizon windows: tracks are grouped by agent, sorted by frame,
/// linearly resampled to `dt` and sliced with stride `H/2`. Tracks shorter
/// than `H` are skipped and counted in the `skipped_agents` metadata entry.
/// Each window's context holds its first position, its last position as the
/// goal, and the positions of the other agents observed at the window start.
pub fn load_raw_trajectories(path: impl AsRef<Path>, opts: &RawLoadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_raw_trajectories(&text, opts)
}

pub fn parse_raw_trajectories(text: &str, opts: &RawLoadOptions) -> Result<Dataset> {
    if opts.horizon < 2 || !(opts.dt > 0.0) {
        return Err(Error::Config("raw loading needs H >= 2 and dt > 0".into()));
    }
    // agent id (bit pattern) -> (frame, x, y) rows
    let mut tracks: BTreeMap<u64, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let mut nums = [0.0; 4];
        for (k, f) in fields.iter().enumerate() {
            nums[k] = f
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line: i + 1,
                    msg: format!("`{f}` is not a number"),
                })?;
        }
        tracks
            .entry(nums[1].to_bits())
            .or_default()
            .push((nums[0], nums[2], nums[3]));
    }
    for rows in tracks.values_mut() {
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        rows.dedup_by(|a, b| a.0 == b.0);
    }

    let period = match opts.frame_period {
        Some(p) => p,
        None => opts.dt / modal_frame_gap(&tracks).unwrap_or(1.0),
    };

    // Resampled tracks: (start time, positions every dt)
    let resampled: Vec<(f64, Vec<[f64; 2]>)> = tracks
        .values()
        .map(|rows| resample(rows, period, opts.dt))
        .collect();

    let h = opts.horizon;
    let stride = window_stride(h);
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    for (a, (t0, pts)) in resampled.iter().enumerate() {
        if pts.len() < h {
            skipped += 1;
            continue;
        }
        let mut start = 0;
        while start + h <= pts.len() {
            let window = &pts[start..start + h];
            let t_start = t0 + start as f64 * opts.dt;
            let neighbours: Vec<Vec<[f64; 2]>> = resampled
                .iter()
                .enumerate()
                .filter(|(b, _)| *b != a)
                .filter_map(|(_, other)| position_at(other, t_start, opts.dt).map(|p| vec![p]))
                .collect();
            let ctx = Context::new(window[0].to_vec(), window[h - 1].to_vec(), neighbours)?;
            let traj = Trajectory::from_positions(window, opts.dt)?;
            samples.push(WeightedSample::new(traj, ctx, 0.0));
            start += stride;
        }
    }
    let mut ds = Dataset::new(samples, h, opts.dt)?;
    ds.metadata.insert("source".into(), "raw".into());
    ds.metadata.insert("agents".into(), tracks.len().to_string());
    ds.metadata.insert("skipped_agents".into(), skipped.to_string());
    Ok(ds)
}

fn modal_frame_gap(tracks: &BTreeMap<u64, Vec<(f64, f64, f64)>>) -> Option<f64> {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for rows in tracks.values() {
        for w in rows.windows(2) {
            let gap = w[1].0 - w[0].0;
            if gap > 0.0 {
                *counts.entry(gap.to_bits()).or_default() += 1;
            }
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(bits, _)| f64::from_bits(bits))
}

fn resample(rows: &[(f64, f64, f64)], period: f64, dt: f64) -> (f64, Vec<[f64; 2]>) {
    let t0 = rows[0].0 * period;
    let t_end = rows[rows.len() - 1].0 * period;
    let mut out = Vec::new();
    let mut seg = 0;
    let mut k = 0usize;
    loop {
        let t = t0 + k as f64 * dt;
        if t > t_end + 1e-9 * dt.max(1.0) {
            break;
        }
        while seg + 1 < rows.len() - 1 && rows[seg + 1].0 * period < t {
            seg += 1;
        }
        let p = if rows.len() == 1 {
            [rows[0].1, rows[0].2]
        } else {
            let (a, b) = (rows[seg], rows[seg + 1]);
            let (ta, tb) = (a.0 * period, b.0 * period);
            let w = (t - ta) / (tb - ta);
            if w <= 1e-9 {
                [a.1, a.2]
            } else if w >= 1.0 - 1e-9 {
                [b.1, b.2]
            } else {
                [a.1 + w * (b.1 - a.1), a.2 + w * (b.2 - a.2)]
            }
        };
        out.push(p);
        k += 1;
    }
    (t0, out)
}

fn position_at(track: &(f64, Vec<[f64; 2]>), t: f64, dt: f64) -> Option<[f64; 2]> {
    let k = (t - track.0) / dt;
    let idx = k.round();
    if (k - idx).abs() > 1e-6 || idx < 0.0 || idx as usize >= track.1.len() {
        return None;
    }
    Some(track.1[idx as usize])
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossingConfig {
    pub goal_distance: f64,
    pub min_pedestrians: usize,
    pub max_pedestrians: usize,
    pub pedestrian_speed: (f64, f64),
    /// Robot speed used to time the crossings.
    pub robot_speed: f64,
    pub duration: usize,
    pub dt: f64,
}

impl Default for CrossingConfig {
    fn default() -> Self {
        CrossingConfig {
            goal_distance: 8.0,
            min_pedestrians: 1,
            max_pedestrians: 3,
            pedestrian_speed: (0.6, 1.2),
            robot_speed: 1.0,
            duration: 40,
            dt: 0.4,
        }
    }
}

/// Scenes where constant-velocity pedestrians cross the straight robot path
/// from `(0,0)` to `(G,0)` roughly when the robot gets there.
pub fn generate_crossing_scenes(count: usize, seed: u64, cfg: &CrossingConfig) -> Vec<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 1.0).expect("unit normal");
    (0..count)
        .map(|_| {
            let n = rng.random_range(cfg.min_pedestrians..=cfg.max_pedestrians);
            let obstacles = (0..n)
                .map(|_| {
                    let xc = rng.random_range(0.25 * cfg.goal_distance..=0.75 * cfg.goal_distance);
                    let t_cross = (xc / cfg.robot_speed + jitter.sample(&mut rng)).max(0.5);
                    let speed = rng.random_range(cfg.pedestrian_speed.0..=cfg.pedestrian_speed.1);
                    let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let vx = 0.2 * jitter.sample(&mut rng);
                    Obstacle {
                        position: [xc - vx * t_cross, -dir * speed * t_cross],
                        velocity: [vx, dir * speed],
                    }
                })
                .collect();
            Scene {
                robot_start: [0.0, 0.0],
                goal: [cfg.goal_distance, 0.0],
                obstacles,
                duration: cfg.duration,
                dt: cfg.dt,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::trajectory_distance;

    #[test]
    fn bimodal_split_is_exact() {
        let ds = generate_bimodal_dataset(100, 20, 0.4, 3).unwrap();
        let left = ds
            .samples
            .iter()
            .filter(|s| s.trajectory.position(10)[1] > 0.0)
            .count();
        assert_eq!(left, 50);
        assert_eq!(ds.len(), 100);
    }

    #[test]
    fn bimodal_is_deterministic() {
        let a = generate_bimodal_dataset(30, 20, 0.4, 11).unwrap();
        let b = generate_bimodal_dataset(30, 20, 0.4, 11).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        let c = generate_bimodal_dataset(30, 20, 0.4, 12).unwrap();
        assert_ne!(a.to_text(), c.to_text());
    }

    #[test]
    fn bimodal_midpoint_amplitude() {
        let cfg = BimodalConfig::default();
        let ds = generate_bimodal_dataset(100, 20, 0.4, 5).unwrap();
        let mean_abs: f64 = ds
            .samples
            .iter()
            .map(|s| s.trajectory.position(10)[1].abs())
            .sum::<f64>()
            / 100.0;
        // Nominal curve evaluated independently: u = 10 * 1.0 * 0.4 / 8 = 0.5.
        let nominal = cfg.amplitude * (std::f64::consts::PI * 0.5).sin();
        assert!((mean_abs - nominal).abs() < 3.0 * cfg.noise_sigma / 50f64.sqrt());
    }

    #[test]
    fn random_phase_windows_continue_the_detour() {
        let cfg = BimodalConfig {
            random_phase: true,
            noise_sigma: 0.0,
            include_obstacle: false,
            ..BimodalConfig::default()
        };
        let ds = generate_bimodal_with(&cfg, 60, 20, 0.4, 5).unwrap();
        let mut offsets = std::collections::BTreeSet::new();
        for (i, s) in ds.samples.iter().enumerate() {
            assert_eq!(s.trajectory.state(0), &s.context.current_state[..]);
            // recover the offset from the first x and check every later state
            let k = (s.trajectory.position(0)[0] / 0.4).round() as usize;
            offsets.insert(k);
            let side = if i % 2 == 0 { 1.0 } else { -1.0 };
            for t in 0..20 {
                let [x, y] = nominal_detour(&cfg, 8.0, k + t, 0.4);
                let p = s.trajectory.position(t);
                assert!((p[0] - x).abs() < 1e-12 && (p[1] - side * y).abs() < 1e-12);
            }
        }
        assert!(offsets.len() > 10 && offsets.iter().all(|&k| k <= 20));
    }

    #[test]
    fn bimodal_rejects_tiny_inputs() {
        assert!(generate_bimodal_dataset(1, 20, 0.4, 0).is_err());
        assert!(generate_bimodal_dataset(4, 1, 0.4, 0).is_err());
    }

    #[test]
    fn augment_identity_is_identity() {
        let ds = generate_bimodal_dataset(6, 10, 0.4, 1).unwrap();
        let out = augment(&ds, &AugmentationSpec::identity(), None).unwrap();
        assert_eq!(out.samples, ds.samples);
    }

    #[test]
    fn rotation_by_pi_flips_straight_line() {
        let traj = Trajectory::from_positions(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], 0.4).unwrap();
        let ctx = Context::new(vec![0.0, 0.0], vec![2.0, 0.0], vec![]).unwrap();
        let ds = Dataset::new(vec![WeightedSample::new(traj, ctx, 0.0)], 3, 0.4).unwrap();
        let spec = AugmentationSpec {
            translations: vec![[0.0, 0.0]],
            rotations: vec![PI],
            smoothing_window: 1,
        };
        let out = augment(&ds, &spec, None).unwrap();
        let p = out.samples[0].trajectory.positions();
        for (t, q) in p.iter().enumerate() {
            assert!((q[0] + t as f64).abs() < 1e-12 && q[1].abs() < 1e-12);
        }
        assert!((out.samples[0].context.goal[0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn moving_average_interior_values() {
        let out = moving_average(&[0.0, 1.0, 0.0, 1.0, 0.0], 3);
        let expect = [1.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0];
        for (a, b) in out[1..4].iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let out2 = moving_average(&[1.0, 0.0, 1.0, 0.0, 1.0], 3);
        let expect = [2.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0];
        for (a, b) in out2[1..4].iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        // edge replication: (0 + 0 + 1) / 3
        assert!((out[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn augment_counts_and_rewards() {
        let ds = generate_bimodal_dataset(4, 10, 0.4, 1).unwrap();
        let spec = AugmentationSpec {
            translations: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
            rotations: vec![0.0, 0.5],
            smoothing_window: 3,
        };
        let reward = |s: &WeightedSample| s.context.current_state[0];
        let out = augment(&ds, &spec, Some(&reward)).unwrap();
        assert_eq!(out.len(), 32);
        assert_eq!(out.samples[2].return_value, 1.0);
        for s in &out.samples {
            assert_eq!(s.trajectory.state(0), &s.context.current_state[..]);
        }
    }

    #[test]
    fn augment_rejects_bad_window() {
        let ds = generate_bimodal_dataset(2, 4, 0.4, 1).unwrap();
        let mut spec = AugmentationSpec::identity();
        spec.smoothing_window = 5;
        assert!(matches!(augment(&ds, &spec, None), Err(Error::Config(_))));
        spec.smoothing_window = 2;
        assert!(augment(&ds, &spec, None).is_err());
    }

    #[test]
    fn rotation_preserves_pairwise_distance() {
        let ds = generate_bimodal_dataset(2, 8, 0.4, 9).unwrap();
        let spec = AugmentationSpec {
            translations: vec![[0.3, -2.0]],
            rotations: vec![1.1],
            smoothing_window: 1,
        };
        let out = augment(&ds, &spec, None).unwrap();
        let before = trajectory_distance(&ds.samples[0].trajectory, &ds.samples[1].trajectory).unwrap();
        let after = trajectory_distance(&out.samples[0].trajectory, &out.samples[1].trajectory).unwrap();
        assert!((before - after).abs() < 1e-9);
    }

    fn raw_opts(h: usize) -> RawLoadOptions {
        RawLoadOptions {
            horizon: h,
            dt: 0.4,
            frame_period: None,
        }
    }

    #[test]
    fn raw_single_agent_exact_horizon() {
        let text = "0 1 0.0 0.0\n10 1 0.5 0.1\n20 1 1.0 0.3\n30 1 1.4 0.6\n";
        let ds = parse_raw_trajectories(text, &raw_opts(4)).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(
            ds.samples[0].trajectory.positions(),
            vec![[0.0, 0.0], [0.5, 0.1], [1.0, 0.3], [1.4, 0.6]]
        );
        assert_eq!(ds.metadata["skipped_agents"], "0");
    }

    #[test]
    fn raw_empty_file() {
        let ds = parse_raw_trajectories("", &raw_opts(4)).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.metadata["skipped_agents"], "0");
    }

    fn track(frames: usize) -> String {
        (0..frames)
            .map(|f| format!("{} 7 {} 0.0\n", f, f as f64 * 0.4))
            .collect()
    }

    #[test]
    fn raw_window_enumeration() {
        // H = 5, 2H-1 = 9 frames, stride 2: windows start at 0, 2, 4.
        assert_eq!(parse_raw_trajectories(&track(9), &raw_opts(5)).unwrap().len(), 3);
        // H = 4, 7 frames, stride 2: windows start at 0, 2.
        assert_eq!(parse_raw_trajectories(&track(7), &raw_opts(4)).unwrap().len(), 2);
        let ds = parse_raw_trajectories(&track(9), &raw_opts(5)).unwrap();
        assert_eq!(ds.samples[1].trajectory.position(0)[0], 0.8);
    }

    #[test]
    fn raw_short_agents_are_counted() {
        let text = format!("{}0 2 1.0 1.0\n1 2 1.0 1.0\n", track(5));
        let ds = parse_raw_trajectories(&text, &raw_opts(5)).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.metadata["skipped_agents"], "1");
        // agent 2 is present at the window start, agent 7 itself is not a neighbour
        assert_eq!(ds.samples[0].context.obstacle_history, vec![vec![[1.0, 1.0]]]);
    }

    #[test]
    fn raw_resamples_linearly() {
        // native rate twice as fast as dt
        let text: String = (0..9).map(|f| format!("{f} 1 {} 0\n", f as f64 * 0.1)).collect();
        let opts = RawLoadOptions {
            horizon: 3,
            dt: 0.4,
            frame_period: Some(0.2),
        };
        let ds = parse_raw_trajectories(&text, &opts).unwrap();
        let xs: Vec<f64> = ds.samples[0].trajectory.positions().iter().map(|p| p[0]).collect();
        for (a, b) in xs.iter().zip([0.0, 0.2, 0.4]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn raw_malformed_line_is_located() {
        let text = "0 1 0.0 0.0\n1 1 abc 0.0\n";
        match parse_raw_trajectories(text, &raw_opts(2)) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn raw_missing_file_is_io_error() {
        let err = load_raw_trajectories("/nonexistent/raw.txt", &raw_opts(4)).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn raw_reload_is_idempotent() {
        let text = format!("{}{}", track(12), "0 3 5 5\n1 3 5 4.6\n2 3 5 4.2\n3 3 5 3.8\n");
        let ds = parse_raw_trajectories(&text, &raw_opts(4)).unwrap();
        let once = Dataset::from_text(&ds.to_text()).unwrap();
        let twice = Dataset::from_text(&once.to_text()).unwrap();
        assert_eq!(once, ds);
        assert_eq!(twice, once);
    }

    fn scene() -> Scene {
        Scene {
            robot_start: [0.0, 0.0],
            goal: [8.0, 0.0],
            obstacles: vec![
                Obstacle { position: [1.0, 2.0], velocity: [1.0, 0.0] },
                Obstacle { position: [-3.0, 0.5], velocity: [0.3, -0.7] },
                Obstacle { position: [4.0, 4.0], velocity: [0.0, 0.0] },
            ],
            duration: 30,
            dt: 0.4,
        }
    }

    #[test]
    fn forecast_arithmetic() {
        let f = constant_velocity_forecast(&scene(), 6);
        assert!((f.get(0, 5)[0] - 3.0).abs() < 1e-12);
        for t in 0..6 {
            assert_eq!(f.get(2, t), [4.0, 4.0]);
        }
    }

    #[test]
    fn forecast_matches_euler_oracle() {
        let s = scene();
        let f = constant_velocity_forecast(&s, 10);
        for (o, ob) in s.obstacles.iter().enumerate() {
            let mut p = ob.position;
            for t in 0..10 {
                let q = f.get(o, t);
                assert!((q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12);
                p[0] += s.dt * ob.velocity[0];
                p[1] += s.dt * ob.velocity[1];
            }
        }
    }

    #[test]
    fn context_forecast_extrapolates_history() {
        let ctx = Context::new(
            vec![0.0, 0.0],
            vec![8.0, 0.0],
            vec![vec![[1.0, 1.0], [1.4, 0.8]], vec![[5.0, 5.0], [5.0, 5.0]]],
        )
        .unwrap();
        let f = forecast_from_context(&ctx, 4, 0.4);
        assert_eq!(f.obstacles(), 2);
        assert_eq!(f.get(0, 0), [1.4, 0.8]);
        let p = f.get(0, 3);
        assert!((p[0] - 2.6).abs() < 1e-12 && (p[1] - 0.2).abs() < 1e-12);
        assert_eq!(f.get(1, 3), [5.0, 5.0]);
        let empty = Context::new(vec![0.0, 0.0], vec![1.0, 0.0], vec![]).unwrap();
        assert_eq!(forecast_from_context(&empty, 4, 0.4).obstacles(), 0);
    }

    #[test]
    fn stepping_agrees_with_forecast() {
        let s = scene();
        let f = constant_velocity_forecast(&s, 8);
        let mut cur = s.clone();
        for k in 0..8 {
            for o in 0..3 {
                let a = cur.obstacles[o].position;
                let b = f.get(o, k);
                assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
            }
            cur = step_scene(&cur);
        }
        assert_eq!(step_scene(&s).obstacles[2].position, [4.0, 4.0]);
    }

    #[test]
    fn crossing_scenes_are_deterministic() {
        let cfg = CrossingConfig::default();
        assert_eq!(generate_crossing_scenes(5, 2, &cfg), generate_crossing_scenes(5, 2, &cfg));
    }
}
