//! Conditional IMLE training with reward-weighted samples.
//!
//! Every epoch draws a batch `S` of dataset indices, a fresh pool of `m`
//! latent codes per sample, and fixes the nearest code `z*` of each sample.
//! The inner loop then takes `L` gradient steps on minibatches of `S` with
//! the loss `(N / |S~|) * sum_i w_i * ||f(z*_i, c_i) - tau_i||^2`.

use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::generator::{backward_into, forward, forward_cached, GeneratorParams, LatentCode};
use crate::nn::{Adam, FilmMlp, Real};
use crate::trajectory::{squared_distance, Context, Trajectory, WeightedSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    None,
    Linear,
    #[serde(alias = "exponential")]
    Exp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Latent codes drawn per context and epoch.
    pub sample_factor: usize,
    pub epochs: usize,
    pub inner_steps: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub minibatch_size: usize,
    /// Temperature of the exponential weights.
    pub beta_w: f64,
    pub weighting: Weighting,
    pub optimizer: Optimizer,
    /// Anneal the step size to zero over the epochs along a half cosine.
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sample_factor: 10,
            epochs: 100,
            inner_steps: 4,
            step_size: 1e-4,
            batch_size: 64,
            minibatch_size: 32,
            beta_w: 1.0,
            weighting: Weighting::None,
            optimizer: Optimizer::Sgd,
            cosine_decay: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Step size used during `epoch`.
    pub fn step_size_at(&self, epoch: usize) -> f64 {
        if !self.cosine_decay {
            return self.step_size;
        }
        let progress = epoch as f64 / self.epochs as f64;
        0.5 * self.step_size * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.sample_factor < 1 {
            return bad("sample factor m must be >= 1");
        }
        if self.epochs < 1 || self.inner_steps < 1 {
            return bad("epochs K and inner steps L must be >= 1");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step size must be positive");
        }
        if !(self.beta_w > 0.0 && self.beta_w.is_finite()) {
            return bad("beta_w must be positive");
        }
        if self.batch_size < 1 || self.minibatch_size < 1 {
            return bad("batch sizes must be >= 1");
        }
        Ok(())
    }
}

/// `m` latent codes for one context.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPool {
    pub codes: Vec<LatentCode>,
}

impl LatentPool {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

pub fn sample_latent_pool<R: Rng + ?Sized>(m: usize, latent_dim: usize, rng: &mut R) -> LatentPool {
    LatentPool {
        codes: (0..m).map(|_| LatentCode::sample(latent_dim, rng)).collect(),
    }
}

/// Result of a nearest-neighbour search over a latent pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub code: LatentCode,
    /// Squared ℓ2 distance between the generation and the target.
    pub loss: f64,
}

/// Pool code whose generation is closest to `tau`; ties go to the lowest index.
pub fn nearest_latent<T: Real>(
    params: &GeneratorParams<T>,
    pool: &LatentPool,
    c: &Context,
    tau: &Trajectory,
) -> Result<Selection> {
    let mut best: Option<(usize, f64)> = None;
    for (j, z) in pool.codes.iter().enumerate() {
        let gen = forward(params, z, c, tau.dt())?;
        let d = squared_distance(&gen, tau)?;
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((j, d));
        }
    }
    let (index, loss) = best.ok_or_else(|| Error::Empty("latent pool".into()))?;
    Ok(Selection {
        index,
        code: pool.codes[index].clone(),
        loss,
    })
}

fn check_returns(returns: &[f64]) -> Result<()> {
    if returns.is_empty() {
        return Err(Error::Empty("returns".into()));
    }
    if let Some(r) = returns.iter().find(|r| !r.is_finite()) {
        return Err(Error::Numeric(format!("return {r}")));
    }
    Ok(())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `w_i = exp((r_i - median(r)) / (beta_w * MAD(r)))` with `MAD >= 1e-8`.
/// Equal returns give unit weights.
pub fn exponential_weights(returns: &[f64], beta_w: f64) -> Result<Vec<f64>> {
    check_returns(returns)?;
    if !(beta_w > 0.0) {
        return Err(Error::Config(format!("beta_w must be positive, got {beta_w}")));
    }
    if returns.iter().all(|&r| r == returns[0]) {
        return Ok(vec![1.0; returns.len()]);
    }
    let med = median(returns);
    let dev: Vec<f64> = returns.iter().map(|r| (r - med).abs()).collect();
    let mad = median(&dev).max(1e-8);
    let w: Vec<f64> = returns
        .iter()
        .map(|r| ((r - med) / (beta_w * mad)).exp())
        .collect();
    if let Some(bad) = w.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "exponential weight overflowed ({bad}); MAD is {mad}"
        )));
    }
    Ok(w)
}

/// `w_i = (r_i - r_min) / (r_max - r_min)`; equal returns give unit weights.
pub fn linear_weights(returns: &[f64]) -> Result<Vec<f64>> {
    check_returns(returns)?;
    let lo = returns.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![1.0; returns.len()]);
    }
    Ok(returns.iter().map(|r| (r - lo) / (hi - lo)).collect())
}

/// Writes weights derived from the stored returns into the dataset.
pub fn assign_weights(ds: &mut Dataset, weighting: Weighting, beta_w: f64) -> Result<()> {
    let w = match weighting {
        Weighting::None => vec![1.0; ds.len()],
        Weighting::Linear => linear_weights(&ds.returns())?,
        Weighting::Exp => exponential_weights(&ds.returns(), beta_w)?,
    };
    ds.set_weights(&w)
}

/// `(N / |batch|) * sum_i w_i * ||f(z*_i, c_i) - tau_i||^2`.
pub fn weighted_imle_loss<T: Real>(
    params: &GeneratorParams<T>,
    batch: &[(&WeightedSample, &LatentCode)],
    dataset_size: usize,
) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (s, z) in batch {
        let gen = forward(params, z, &s.context, s.trajectory.dt())?;
        acc += s.weight * squared_distance(&gen, &s.trajectory)?;
    }
    Ok(dataset_size as f64 / batch.len() as f64 * acc)
}

/// Gradient of [`weighted_imle_loss`] and the loss itself.
pub fn weighted_imle_gradient<T: Real>(
    params: &GeneratorParams<T>,
    batch: &[(&WeightedSample, &LatentCode)],
    dataset_size: usize,
) -> Result<(f64, FilmMlp<T>)> {
    let scale = dataset_size as f64 / batch.len().max(1) as f64;
    let parts: Vec<Result<(f64, FilmMlp<T>)>> = batch
        .par_iter()
        .map(|(s, z)| {
            let mut grad = FilmMlp::zeros(params.net.dims().clone())?;
            if s.weight == 0.0 {
                return Ok((0.0, grad));
            }
            let (gen, cache) = forward_cached(params, z, &s.context, s.trajectory.dt())?;
            let diff: Vec<f64> = gen
                .to_flat()
                .iter()
                .zip(s.trajectory.to_flat())
                .map(|(g, t)| g - t)
                .collect();
            let loss = s.weight * diff.iter().map(|d| d * d).sum::<f64>();
            let k = 2.0 * scale * s.weight;
            let upstream: Vec<f64> = diff.iter().map(|d| k * d).collect();
            backward_into(params, &cache, &upstream, &mut grad)?;
            Ok((loss, grad))
        })
        .collect();
    let mut total = FilmMlp::zeros(params.net.dims().clone())?;
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        total.axpy(T::one(), &g);
    }
    Ok((scale * loss, total))
}

/// Per-epoch training progress.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_selected_loss: f64,
    pub wall_ms: f64,
}

impl EpochReport {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} mean_selected_loss={:.9e} wall_ms={:.3}",
            self.epoch, self.mean_selected_loss, self.wall_ms
        )
    }
}

/// Runs the reward-weighted cIMLE loop starting from `params`. Sample
/// weights are taken from the dataset as-is; use [`assign_weights`] first.
pub fn train<T: Real>(
    ds: &Dataset,
    mut params: GeneratorParams<T>,
    cfg: &TrainConfig,
    reporter: &mut dyn FnMut(&EpochReport),
) -> Result<GeneratorParams<T>> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Empty("training dataset".into()));
    }
    ds.validate()?;
    let n = ds.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let latent_dim = params.dims.latent_dim;
    let mut adam = match cfg.optimizer {
        Optimizer::Adam => Some(Adam::new(params.param_count())),
        Optimizer::Sgd => None,
    };

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let batch_len = cfg.batch_size.min(n);
        let batch: Vec<usize> = if batch_len == n {
            (0..n).collect()
        } else {
            sample_indices(&mut rng, n, batch_len).into_vec()
        };
        let pools: Vec<LatentPool> = batch
            .iter()
            .map(|_| sample_latent_pool(cfg.sample_factor, latent_dim, &mut rng))
            .collect();
        let selections: Vec<Selection> = batch
            .par_iter()
            .zip(&pools)
            .map(|(&i, pool)| {
                let s = &ds.samples[i];
                nearest_latent(&params, pool, &s.context, &s.trajectory)
            })
            .collect::<Result<_>>()
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Divergence(format!("epoch {epoch}: {msg}")),
                e => e,
            })?;
        let mean_loss = selections.iter().map(|s| s.loss).sum::<f64>() / selections.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Divergence(format!(
                "epoch {epoch}: mean selected loss is {mean_loss}"
            )));
        }

        let eta = cfg.step_size_at(epoch);
        let mini_len = cfg.minibatch_size.min(batch.len());
        for _ in 0..cfg.inner_steps {
            let picks: Vec<usize> = if mini_len == batch.len() {
                (0..batch.len()).collect()
            } else {
                sample_indices(&mut rng, batch.len(), mini_len).into_vec()
            };
            let mb: Vec<(&WeightedSample, &LatentCode)> = picks
                .iter()
                .map(|&k| (&ds.samples[batch[k]], &selections[k].code))
                .collect();
            let (loss, grad) = weighted_imle_gradient(&params, &mb, n)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::Divergence(format!(
                    "epoch {epoch}: minibatch loss {loss}"
                )));
            }
            match adam.as_mut() {
                Some(opt) => opt.step(params.net.as_mut_slice(), grad.as_slice(), eta),
                None => params.net.axpy(T::of(-eta), &grad),
            }
            if !params.net.is_finite() {
                return Err(Error::Divergence(format!("epoch {epoch}: parameters became non-finite")));
            }
        }
        reporter(&EpochReport {
            epoch,
            mean_selected_loss: mean_loss,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(params)
}
