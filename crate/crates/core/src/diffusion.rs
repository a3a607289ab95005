//! Minimal DDPM trajectory diffuser used as a latency and coverage baseline.
//!
//! Trajectories are diffused in a normalized space: states relative to the
//! context's current state and divided by the encoding scale. The reverse
//! chain uses the posterior mean with `sigma_t^2 = beta_t`, optionally shifted
//! by an analytic cost gradient, and re-pins the first state after each step.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::generator::{join_widths, read_blob, write_blob, ContextEncoding, Header};
use crate::imle::Optimizer;
use crate::nn::{Adam, FilmMlp, MlpDims, Real};
use crate::trajectory::{Context, Trajectory};

/// Variance schedule `beta_1..beta_T` with cached cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    linear: Option<(f64, f64)>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("noise schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut acc = 1.0;
        let alpha_bars = alphas
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
            linear: None,
        })
    }

    /// `T` betas evenly spaced from `start` to `end`.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        let betas = match steps {
            0 => Vec::new(),
            1 => vec![start],
            n => (0..n)
                .map(|i| start + (end - start) * i as f64 / (n - 1) as f64)
                .collect(),
        };
        let mut s = Self::from_betas(betas)?;
        s.linear = Some((start, end));
        Ok(s)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t` for `t` in `0..=T`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn linear_range(&self) -> Option<(f64, f64)> {
        self.linear
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::Config(format!(
                "diffusion step {t} outside 0..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    /// Linear from 1e-4 to 2e-2 over 50 steps.
    fn default() -> Self {
        Self::linear(50, 1e-4, 2e-2).expect("valid default schedule")
    }
}

/// `sqrt(alpha_bar_t) * tau0 + sqrt(1 - alpha_bar_t) * eps`, element-wise over
/// the flat trajectory layout.
pub fn forward_noise(tau0: &Trajectory, t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Trajectory> {
    sched.check_step(t)?;
    let flat = tau0.to_flat();
    if eps.len() != flat.len() {
        return Err(Error::dim(format!(
            "noise has {} entries, trajectory has {}",
            eps.len(),
            flat.len()
        )));
    }
    let out = noised(&flat, t, eps, sched);
    Trajectory::from_flat(&out, tau0.state_dim(), tau0.action_dim(), tau0.dt())
}

fn noised(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Vec<f64> {
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

/// Anything that predicts the noise in a normalized noisy trajectory.
pub trait NoisePredictor: Sync {
    fn predict(&self, x_t: &[f64], t: usize, c: &Context) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserDims {
    pub encoding: ContextEncoding,
    pub hidden: Vec<usize>,
    pub film_hidden: usize,
    /// Width of the sinusoidal time embedding; even.
    pub time_embedding: usize,
    pub horizon: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl DenoiserDims {
    pub fn navigation(horizon: usize) -> Self {
        DenoiserDims {
            encoding: ContextEncoding {
                goal_dim: 2,
                obstacle_slots: 0,
                history_len: 1,
                scale: 4.0,
            },
            hidden: vec![64, 64],
            film_hidden: 16,
            time_embedding: 16,
            horizon,
            state_dim: 2,
            action_dim: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.state_dim + self.action_dim
    }

    pub fn output_len(&self) -> usize {
        self.horizon * self.channels()
    }

    pub fn mlp(&self) -> MlpDims {
        let cdim = self.encoding.dim();
        MlpDims {
            input: self.output_len() + self.time_embedding + cdim,
            cond: cdim + self.time_embedding,
            hidden: self.hidden.clone(),
            film_hidden: self.film_hidden,
            output: self.output_len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 || self.state_dim == 0 || self.encoding.goal_dim > self.state_dim {
            return Err(Error::Config(format!("invalid denoiser dims {self:?}")));
        }
        if self.time_embedding == 0 || !self.time_embedding.is_multiple_of(2) {
            return Err(Error::Config("time embedding width must be even and positive".into()));
        }
        if !(self.encoding.scale > 0.0 && self.encoding.scale.is_finite()) {
            return Err(Error::Config("context scale must be positive".into()));
        }
        self.mlp().validate()
    }

    /// Normalized coordinates of `tau` under context `c`.
    pub fn normalize(&self, tau: &Trajectory, c: &Context) -> Vec<f64> {
        let (ch, ds) = (self.channels(), self.state_dim);
        let inv = 1.0 / self.encoding.scale;
        tau.to_flat()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let d = i % ch;
                if d < ds {
                    (v - c.current_state[d]) * inv
                } else {
                    v * inv
                }
            })
            .collect()
    }

    pub fn denormalize(&self, x: &[f64], c: &Context, dt: f64) -> Result<Trajectory> {
        let (ch, ds) = (self.channels(), self.state_dim);
        let s = self.encoding.scale;
        let flat: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let d = i % ch;
                if d < ds {
                    c.current_state[d] + s * v
                } else {
                    s * v
                }
            })
            .collect();
        Trajectory::from_flat(&flat, ds, self.action_dim, dt)
    }

    fn pin_first_state(&self, x: &mut [f64]) {
        x[..self.state_dim].iter_mut().for_each(|v| *v = 0.0);
    }
}

/// `[sin(t w_0), cos(t w_0), sin(t w_1), ...]` with `w_i = 10000^(-2i/E)`.
pub fn time_embedding(t: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = Vec::with_capacity(width);
    for i in 0..half {
        let w = 10000f64.powf(-(2.0 * i as f64) / width as f64);
        let a = t as f64 * w;
        out.push(a.sin());
        out.push(a.cos());
    }
    out
}

/// Weights of the noise network `eps_theta(tau_t, t, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<T = f32> {
    pub dims: DenoiserDims,
    pub net: FilmMlp<T>,
}

pub fn init_denoiser<T: Real, R: Rng + ?Sized>(dims: DenoiserDims, rng: &mut R) -> Result<DenoiserParams<T>> {
    dims.validate()?;
    let net = FilmMlp::init(dims.mlp(), None, rng)?;
    Ok(DenoiserParams { dims, net })
}

impl<T: Real> DenoiserParams<T> {
    pub fn cast<U: Real>(&self) -> DenoiserParams<U> {
        DenoiserParams {
            dims: self.dims.clone(),
            net: self.net.cast(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.net.len()
    }

    fn inputs(&self, x_t: &[f64], t: usize, c: &Context) -> Result<(Vec<T>, Vec<T>)> {
        if x_t.len() != self.dims.output_len() {
            return Err(Error::dim(format!(
                "noisy trajectory has {} entries, denoiser expects {}",
                x_t.len(),
                self.dims.output_len()
            )));
        }
        if c.current_state.len() != self.dims.state_dim {
            return Err(Error::dim(format!(
                "context state has {} dims, denoiser expects {}",
                c.current_state.len(),
                self.dims.state_dim
            )));
        }
        let feat = self.dims.encoding.encode(c)?;
        let temb = time_embedding(t, self.dims.time_embedding);
        let input = x_t
            .iter()
            .chain(&temb)
            .chain(&feat)
            .map(|&v| T::of(v))
            .collect();
        let cond = feat.iter().chain(&temb).map(|&v| T::of(v)).collect();
        Ok((input, cond))
    }
}

impl<T: Real> NoisePredictor for DenoiserParams<T> {
    fn predict(&self, x_t: &[f64], t: usize, c: &Context) -> Result<Vec<f64>> {
        let (input, cond) = self.inputs(x_t, t, c)?;
        Ok(self.net.forward(&input, &cond)?.iter().map(|v| v.get()).collect())
    }
}

/// `||eps - eps_theta(forward_noise(x0, t, eps), t, c)||^2` with `x0` the
/// normalized form of `tau0`.
pub fn ddpm_loss<P: NoisePredictor>(
    model: &P,
    dims: &DenoiserDims,
    tau0: &Trajectory,
    c: &Context,
    t: usize,
    eps: &[f64],
    sched: &NoiseSchedule,
) -> Result<f64> {
    sched.check_step(t)?;
    let x0 = dims.normalize(tau0, c);
    if eps.len() != x0.len() {
        return Err(Error::dim("noise and trajectory shapes differ"));
    }
    let xt = noised(&x0, t, eps, sched);
    let pred = model.predict(&xt, t, c)?;
    Ok(eps.iter().zip(&pred).map(|(e, p)| (e - p) * (e - p)).sum())
}

/// Cost gradient applied to the reverse-chain mean.
pub struct Guidance<'a> {
    pub scale: f64,
    /// Gradient of the cost with respect to each position of a trajectory.
    pub gradient: &'a (dyn Fn(&Trajectory) -> Result<Vec<[f64; 2]>> + Sync),
}

fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`. No noise is added
/// at `t = 1`.
pub fn reverse_sample<P: NoisePredictor, R: Rng + ?Sized>(
    model: &P,
    dims: &DenoiserDims,
    c: &Context,
    sched: &NoiseSchedule,
    dt: f64,
    rng: &mut R,
    guidance: Option<&Guidance>,
) -> Result<Trajectory> {
    let n = dims.output_len();
    let mut x = standard_normal(n, rng);
    dims.pin_first_state(&mut x);
    for t in (1..=sched.steps()).rev() {
        let z = if t > 1 { standard_normal(n, rng) } else { Vec::new() };
        x = reverse_step(model, dims, c, sched, dt, t, &x, &z, guidance)?;
    }
    dims.denormalize(&x, c, dt)
}

/// `count` independent chains advanced in lockstep. Noise is drawn chain by
/// chain at each step, so the result depends only on `rng`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_sample_batch<P: NoisePredictor, R: Rng + ?Sized>(
    model: &P,
    dims: &DenoiserDims,
    c: &Context,
    sched: &NoiseSchedule,
    dt: f64,
    count: usize,
    rng: &mut R,
    guidance: Option<&Guidance>,
) -> Result<Vec<Trajectory>> {
    let n = dims.output_len();
    let mut xs: Vec<Vec<f64>> = (0..count)
        .map(|_| {
            let mut x = standard_normal(n, rng);
            dims.pin_first_state(&mut x);
            x
        })
        .collect();
    for t in (1..=sched.steps()).rev() {
        for x in &mut xs {
            let z = if t > 1 { standard_normal(n, rng) } else { Vec::new() };
            *x = reverse_step(model, dims, c, sched, dt, t, x, &z, guidance)?;
        }
    }
    xs.iter().map(|x| dims.denormalize(x, c, dt)).collect()
}

#[allow(clippy::too_many_arguments)]
fn reverse_step<P: NoisePredictor>(
    model: &P,
    dims: &DenoiserDims,
    c: &Context,
    sched: &NoiseSchedule,
    dt: f64,
    t: usize,
    x: &[f64],
    z: &[f64],
    guidance: Option<&Guidance>,
) -> Result<Vec<f64>> {
    let eps = model.predict(x, t, c)?;
    let beta = sched.beta(t);
    let k = beta / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / sched.alpha(t).sqrt();
    let mut mean: Vec<f64> = x.iter().zip(&eps).map(|(x, e)| inv * (x - k * e)).collect();
    if let Some(g) = guidance {
        let traj = dims.denormalize(x, c, dt)?;
        let grad = (g.gradient)(&traj)?;
        let ch = dims.channels();
        // chain rule through the normalization: d tau / d x = scale
        let step = g.scale * beta * dims.encoding.scale;
        for (tt, gp) in grad.iter().enumerate().take(dims.horizon) {
            for d in 0..dims.state_dim.min(2) {
                mean[tt * ch + d] -= step * gp[d];
            }
        }
    }
    if !z.is_empty() {
        let sigma = beta.sqrt();
        for (m, e) in mean.iter_mut().zip(z) {
            *m += sigma * e;
        }
    }
    dims.pin_first_state(&mut mean);
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("reverse chain became non-finite at t={t}")));
    }
    Ok(mean)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdpmTrainConfig {
    pub steps: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for DdpmTrainConfig {
    fn default() -> Self {
        DdpmTrainConfig {
            steps: 1000,
            step_size: 1e-3,
            batch_size: 32,
            optimizer: Optimizer::Sgd,
            seed: 0,
        }
    }
}

/// Progress record of DDPM training.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

impl StepReport {
    pub fn log_line(&self) -> String {
        format!("step={} loss={:.9e} wall_ms={:.3}", self.step, self.loss, self.wall_ms)
    }
}

/// Mean noise-prediction loss of one minibatch and its gradient.
fn batch_gradient<T: Real>(
    params: &DenoiserParams<T>,
    items: &[(usize, usize, Vec<f64>)],
    ds: &Dataset,
    sched: &NoiseSchedule,
) -> Result<(f64, FilmMlp<T>)> {
    let inv = 1.0 / items.len() as f64;
    let parts: Vec<Result<(f64, FilmMlp<T>)>> = items
        .par_iter()
        .map(|(i, t, eps)| {
            let s = &ds.samples[*i];
            let x0 = params.dims.normalize(&s.trajectory, &s.context);
            let xt = noised(&x0, *t, eps, sched);
            let (input, cond) = params.inputs(&xt, *t, &s.context)?;
            let (out, tape) = params.net.forward_tape(&input, &cond)?;
            let diff: Vec<f64> = out.iter().zip(eps).map(|(p, e)| p.get() - e).collect();
            let loss = diff.iter().map(|d| d * d).sum::<f64>();
            let up: Vec<T> = diff.iter().map(|d| T::of(2.0 * inv * d)).collect();
            let grad = params.net.backward(&tape, &up)?;
            Ok((loss, grad))
        })
        .collect();
    let mut total = FilmMlp::zeros(params.net.dims().clone())?;
    let mut loss = 0.0;
    for p in parts {
        let (l, g) = p?;
        loss += l;
        total.axpy(T::one(), &g);
    }
    Ok((loss * inv, total))
}

/// Minibatch training on `E ||eps - eps_theta||^2`. Each minibatch entry
/// draws a sample with replacement, a uniform `t` and fresh noise.
pub fn train_ddpm<T: Real>(
    ds: &Dataset,
    sched: &NoiseSchedule,
    mut params: DenoiserParams<T>,
    cfg: &DdpmTrainConfig,
    reporter: &mut dyn FnMut(&StepReport),
) -> Result<DenoiserParams<T>> {
    if ds.is_empty() {
        return Err(Error::Empty("training dataset".into()));
    }
    if !(cfg.step_size > 0.0) || cfg.batch_size == 0 {
        return Err(Error::Config("step size and batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = ds.len();
    let len = params.dims.output_len();
    let mut adam = (cfg.optimizer == Optimizer::Adam).then(|| Adam::new(params.param_count()));
    for step in 0..cfg.steps {
        let started = Instant::now();
        let items: Vec<(usize, usize, Vec<f64>)> = (0..cfg.batch_size)
            .map(|_| {
                let i = rng.random_range(0..n);
                let t = rng.random_range(1..=sched.steps());
                (i, t, standard_normal(len, &mut rng))
            })
            .collect();
        let (loss, grad) = batch_gradient(&params, &items, ds, sched)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::Divergence(format!("step {step}: loss {loss}")));
        }
        match adam.as_mut() {
            Some(opt) => opt.step(params.net.as_mut_slice(), grad.as_slice(), cfg.step_size),
            None => params.net.axpy(T::of(-cfg.step_size), &grad),
        }
        if !params.net.is_finite() {
            return Err(Error::Divergence(format!("step {step}: parameters became non-finite")));
        }
        reporter(&StepReport {
            step,
            loss,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(params)
}

const DDPM_MAGIC: &str = "DDPM-CKPT";

fn header(d: &DenoiserDims, sched: &NoiseSchedule) -> Result<String> {
    let (start, end) = sched
        .linear_range()
        .ok_or_else(|| Error::Config("only linear schedules can be saved".into()))?;
    Ok(format!(
        "goal={} slots={} history={} scale={:?} hidden={} film={} temb={} horizon={} ds={} da={} T={} beta_start={:?} beta_end={:?}",
        d.encoding.goal_dim,
        d.encoding.obstacle_slots,
        d.encoding.history_len,
        d.encoding.scale,
        join_widths(&d.hidden),
        d.film_hidden,
        d.time_embedding,
        d.horizon,
        d.state_dim,
        d.action_dim,
        sched.steps(),
        start,
        end
    ))
}

pub fn ddpm_checkpoint_bytes(params: &DenoiserParams<f32>, sched: &NoiseSchedule) -> Result<Vec<u8>> {
    Ok(write_blob(DDPM_MAGIC, &header(&params.dims, sched)?, params.net.as_slice()))
}

pub fn ddpm_from_bytes(bytes: &[u8]) -> Result<(DenoiserParams<f32>, NoiseSchedule)> {
    let (fields, data) = read_blob(bytes, DDPM_MAGIC)?;
    let h = Header::parse(&fields)?;
    let dims = DenoiserDims {
        encoding: ContextEncoding {
            goal_dim: h.int("goal")?,
            obstacle_slots: h.int("slots")?,
            history_len: h.int("history")?,
            scale: h.float("scale")?,
        },
        hidden: h.list("hidden")?,
        film_hidden: h.int("film")?,
        time_embedding: h.int("temb")?,
        horizon: h.int("horizon")?,
        state_dim: h.int("ds")?,
        action_dim: h.int("da")?,
    };
    dims.validate().map_err(|e| Error::Version(e.to_string()))?;
    let sched = NoiseSchedule::linear(h.int("T")?, h.float("beta_start")?, h.float("beta_end")?)
        .map_err(|e| Error::Version(e.to_string()))?;
    let expected = dims.mlp().param_count();
    if data.len() != expected {
        return Err(Error::dim(format!(
            "checkpoint holds {} parameters, dims need {expected}",
            data.len()
        )));
    }
    let net = FilmMlp::from_flat(dims.mlp(), data)?;
    Ok((DenoiserParams { dims, net }, sched))
}

pub fn save_ddpm(params: &DenoiserParams<f32>, sched: &NoiseSchedule, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ddpm_checkpoint_bytes(params, sched)?).map_err(|e| Error::io(path, e))
}

pub fn load_ddpm(path: impl AsRef<Path>) -> Result<(DenoiserParams<f32>, NoiseSchedule)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ddpm_from_bytes(&bytes)
}
