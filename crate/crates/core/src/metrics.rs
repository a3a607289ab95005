//! Episode metrics on executed robot paths and the planning-latency harness.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::imle::median;
use crate::planners::EpisodeLog;
use crate::sim::Scene;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// True when the path comes strictly within `r` of any obstacle at the same
/// step, with obstacles moving at constant velocity from the scene start.
pub fn episode_collides(episode: &EpisodeLog, scene: &Scene, r: f64) -> Result<bool> {
    if episode.positions.len() > scene.duration + 1 {
        return Err(Error::dim(format!(
            "episode has {} positions, scene lasts {} steps",
            episode.positions.len(),
            scene.duration
        )));
    }
    if (episode.dt - scene.dt).abs() > 1e-12 {
        return Err(Error::dim(format!("episode dt {} differs from scene dt {}", episode.dt, scene.dt)));
    }
    Ok(episode.positions.iter().enumerate().any(|(t, &p)| {
        let k = t as f64 * scene.dt;
        scene.obstacles.iter().any(|ob| {
            let q = [ob.position[0] + k * ob.velocity[0], ob.position[1] + k * ob.velocity[1]];
            dist(p, q) < r
        })
    }))
}

/// Fraction of episodes with at least one collision at radius `r`.
pub fn collision_rate(episodes: &[EpisodeLog], scenes: &[Scene], r: f64) -> Result<f64> {
    if episodes.len() != scenes.len() {
        return Err(Error::dim(format!("{} episodes for {} scenes", episodes.len(), scenes.len())));
    }
    if episodes.is_empty() {
        return Err(Error::Empty("no episodes".into()));
    }
    let mut hits = 0usize;
    for (e, s) in episodes.iter().zip(scenes) {
        hits += usize::from(episode_collides(e, s, r)?);
    }
    Ok(hits as f64 / episodes.len() as f64)
}

/// Distance from the final position to `goal`.
pub fn goal_error(episode: &EpisodeLog, goal: [f64; 2]) -> f64 {
    dist(episode.final_position(), goal)
}

fn velocities(episode: &EpisodeLog) -> Vec<[f64; 2]> {
    let dt = episode.dt;
    episode
        .positions
        .windows(2)
        .map(|w| [(w[1][0] - w[0][0]) / dt, (w[1][1] - w[0][1]) / dt])
        .collect()
}

/// Largest per-step change in velocity, m/s. Zero for paths too short to
/// change velocity.
pub fn smoothness(episode: &EpisodeLog) -> f64 {
    velocities(episode)
        .windows(2)
        .map(|w| dist(w[1], w[0]))
        .fold(0.0, f64::max)
}

/// Mean of `||v_{t+2} - 2 v_{t+1} + v_t|| / dt^2`, m/s^3. Needs four positions.
pub fn jerk(episode: &EpisodeLog) -> Result<f64> {
    if episode.positions.len() < 4 {
        return Err(Error::Config(format!(
            "jerk needs at least 4 positions, got {}",
            episode.positions.len()
        )));
    }
    let v = velocities(episode);
    let dt2 = episode.dt * episode.dt;
    let terms: Vec<f64> = v
        .windows(3)
        .map(|w| (w[2][0] - 2.0 * w[1][0] + w[0][0]).hypot(w[2][1] - 2.0 * w[1][1] + w[0][1]) / dt2)
        .collect();
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeMetrics {
    pub collision: bool,
    pub goal_error: f64,
    pub smoothness: f64,
    /// NaN for paths shorter than four positions.
    pub jerk: f64,
}

pub fn episode_metrics(episode: &EpisodeLog, scene: &Scene, r: f64) -> Result<EpisodeMetrics> {
    Ok(EpisodeMetrics {
        collision: episode_collides(episode, scene, r)?,
        goal_error: goal_error(episode, scene.goal),
        smoothness: smoothness(episode),
        jerk: jerk(episode).unwrap_or(f64::NAN),
    })
}

pub const METRICS_HEADER: &str = "scene_id,collision,goal_error,smoothness,jerk";

pub fn metrics_row(scene_id: usize, m: &EpisodeMetrics) -> String {
    format!(
        "{scene_id},{},{:.6},{:.6},{:.6}",
        u8::from(m.collision),
        m.goal_error,
        m.smoothness,
        m.jerk
    )
}

/// Accumulates time spent in cost evaluations during one timed call. Safe
/// to share with the parallel parts of a planner.
#[derive(Debug, Default)]
pub struct GuidanceTimer {
    nanos: AtomicU64,
}

impl GuidanceTimer {
    pub fn time<T>(&self, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.nanos.fetch_add(start.elapsed().as_nanos() as u64, Ordering::Relaxed);
        out
    }

    pub fn elapsed(&self) -> Duration {
        Duration::from_nanos(self.nanos.load(Ordering::Relaxed))
    }

    fn reset(&self) {
        self.nanos.store(0, Ordering::Relaxed);
    }
}

pub const WARMUP_CALLS: usize = 5;
pub const MIN_TRIALS: usize = 10;

/// Medians over timed plan calls. `gen_ms` is each call's total minus its
/// guidance time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyReport {
    pub batch: usize,
    pub trials: usize,
    pub median_ms: f64,
    pub gen_ms: f64,
    pub guidance_ms: f64,
    pub hz: f64,
}

pub const BENCH_HEADER: &str = "planner,batch,median_ms,gen_ms,guidance_ms,hz";

impl LatencyReport {
    pub fn csv_row(&self, planner: &str) -> String {
        format!(
            "{planner},{},{:.4},{:.4},{:.4},{:.3}",
            self.batch, self.median_ms, self.gen_ms, self.guidance_ms, self.hz
        )
    }
}

/// Times `trials` calls of `plan` after [`WARMUP_CALLS`] untimed ones. The
/// closure receives a timer for its cost evaluations. Run it on one thread
/// with nothing else competing for the CPU.
pub fn sampling_frequency<F>(mut plan: F, batch: usize, trials: usize) -> Result<LatencyReport>
where
    F: FnMut(&GuidanceTimer) -> Result<()>,
{
    if trials < MIN_TRIALS {
        return Err(Error::Config(format!("need at least {MIN_TRIALS} trials, got {trials}")));
    }
    let timer = GuidanceTimer::default();
    for _ in 0..WARMUP_CALLS {
        plan(&timer)?;
    }
    let mut total = Vec::with_capacity(trials);
    let mut guidance = Vec::with_capacity(trials);
    let mut generation = Vec::with_capacity(trials);
    for _ in 0..trials {
        timer.reset();
        let start = Instant::now();
        plan(&timer)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let g = timer.elapsed().as_secs_f64() * 1e3;
        total.push(ms);
        guidance.push(g);
        generation.push((ms - g).max(0.0));
    }
    let median_ms = median(&total);
    if !(median_ms > 0.0) {
        return Err(Error::Timer(format!(
            "median latency {median_ms} ms is below timer resolution; raise the batch size"
        )));
    }
    Ok(LatencyReport {
        batch,
        trials,
        median_ms,
        gen_ms: median(&generation),
        guidance_ms: median(&guidance),
        hz: 1000.0 / median_ms,
    })
}
