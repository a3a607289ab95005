//! FiLM-modulated multilayer perceptron with hand-written reverse mode.
//!
//! Each hidden block computes `h = film(tanh(W x + b), gamma(c), beta(c))`
//! where `gamma` and `beta` are two-layer perceptrons of the conditioning
//! vector `c`. A final affine head maps the last block to the output.
//!
//! All parameters live in one flat vector. The order is, per block:
//! `W, b, gamma.A, gamma.a, gamma.B, gamma.b, beta.A, beta.a, beta.B, beta.b`,
//! followed by the head `W, b`. Matrices are row-major `(out, in)`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Floating-point element type of network parameters.
pub trait Real: Float + Sum + Debug + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn get(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn get(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn get(self) -> f64 {
        self
    }
}

/// Feature-wise linear modulation: `gamma ⊙ x + beta`.
pub fn film<T: Real>(x: &[T], gamma: &[T], beta: &[T]) -> Result<Vec<T>> {
    if x.len() != gamma.len() || x.len() != beta.len() {
        return Err(Error::dim(format!(
            "film lengths x={} gamma={} beta={}",
            x.len(),
            gamma.len(),
            beta.len()
        )));
    }
    Ok(x.iter()
        .zip(gamma)
        .zip(beta)
        .map(|((&x, &g), &b)| g * x + b)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpDims {
    pub input: usize,
    pub cond: usize,
    pub hidden: Vec<usize>,
    /// Width of the hidden layer inside each FiLM head.
    pub film_hidden: usize,
    pub output: usize,
}

impl MlpDims {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.output == 0 || self.film_hidden == 0 {
            return Err(Error::Config(format!("degenerate network dims {self:?}")));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(format!("hidden widths {:?}", self.hidden)));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut fan_in = self.input;
        for &w in &self.hidden {
            n += w * fan_in + w;
            n += 2 * (self.film_hidden * self.cond + self.film_hidden + w * self.film_hidden + w);
            fan_in = w;
        }
        n + self.output * fan_in + self.output
    }
}

#[derive(Debug, Clone, Copy)]
struct Span {
    start: usize,
    rows: usize,
    cols: usize,
}

impl Span {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
    fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct HeadLayout {
    a: Span,
    a_bias: Span,
    b: Span,
    b_bias: Span,
}

#[derive(Debug, Clone, Copy)]
struct BlockLayout {
    w: Span,
    bias: Span,
    gamma: HeadLayout,
    beta: HeadLayout,
}

#[derive(Debug, Clone)]
struct Layout {
    blocks: Vec<BlockLayout>,
    head_w: Span,
    head_b: Span,
    total: usize,
}

impl Layout {
    fn new(dims: &MlpDims) -> Self {
        let mut cursor = 0;
        let mut span = |rows: usize, cols: usize| {
            let s = Span {
                start: cursor,
                rows,
                cols,
            };
            cursor += rows * cols;
            s
        };
        let mut blocks = Vec::with_capacity(dims.hidden.len());
        let mut fan_in = dims.input;
        for &w in &dims.hidden {
            let wspan = span(w, fan_in);
            let bias = span(w, 1);
            let mut head = || HeadLayout {
                a: span(dims.film_hidden, dims.cond),
                a_bias: span(dims.film_hidden, 1),
                b: span(w, dims.film_hidden),
                b_bias: span(w, 1),
            };
            let gamma = head();
            let beta = head();
            blocks.push(BlockLayout {
                w: wspan,
                bias,
                gamma,
                beta,
            });
            fan_in = w;
        }
        let head_w = span(dims.output, fan_in);
        let head_b = span(dims.output, 1);
        Layout {
            blocks,
            head_w,
            head_b,
            total: cursor,
        }
    }
}

/// Parameters of a FiLM-conditioned MLP. Also used as the gradient container.
#[derive(Debug, Clone)]
pub struct FilmMlp<T> {
    dims: MlpDims,
    layout: Layout,
    data: Vec<T>,
}

impl<T: PartialEq> PartialEq for FilmMlp<T> {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.data == other.data
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    inputs: Vec<Vec<T>>,
    activations: Vec<Vec<T>>,
    gammas: Vec<Vec<T>>,
    gamma_hidden: Vec<Vec<T>>,
    beta_hidden: Vec<Vec<T>>,
    cond: Vec<T>,
}

fn affine<T: Real>(data: &[T], w: Span, b: Span, x: &[T], out: &mut Vec<T>) {
    out.clear();
    let wm = &data[w.range()];
    let bv = &data[b.range()];
    for r in 0..w.rows {
        let row = &wm[r * w.cols..(r + 1) * w.cols];
        let mut acc = bv[r];
        for (&wi, &xi) in row.iter().zip(x) {
            acc = acc + wi * xi;
        }
        out.push(acc);
    }
}

/// Accumulates `dW += dy ⊗ x`, `db += dy` and returns `W^T dy` when asked.
fn affine_backward<T: Real>(
    data: &[T],
    grad: &mut [T],
    w: Span,
    b: Span,
    x: &[T],
    dy: &[T],
    want_dx: bool,
) -> Vec<T> {
    {
        let gw = &mut grad[w.range()];
        for r in 0..w.rows {
            let g = dy[r];
            if g == T::zero() {
                continue;
            }
            let row = &mut gw[r * w.cols..(r + 1) * w.cols];
            for (gi, &xi) in row.iter_mut().zip(x) {
                *gi = *gi + g * xi;
            }
        }
    }
    {
        let gb = &mut grad[b.range()];
        for (gi, &d) in gb.iter_mut().zip(dy) {
            *gi = *gi + d;
        }
    }
    if !want_dx {
        return Vec::new();
    }
    let wm = &data[w.range()];
    let mut dx = vec![T::zero(); w.cols];
    for r in 0..w.rows {
        let g = dy[r];
        if g == T::zero() {
            continue;
        }
        let row = &wm[r * w.cols..(r + 1) * w.cols];
        for (d, &wi) in dx.iter_mut().zip(row) {
            *d = *d + g * wi;
        }
    }
    dx
}

impl<T: Real> FilmMlp<T> {
    pub fn zeros(dims: MlpDims) -> Result<Self> {
        dims.validate()?;
        let layout = Layout::new(&dims);
        let data = vec![T::zero(); layout.total];
        Ok(FilmMlp { dims, layout, data })
    }

    pub fn from_flat(dims: MlpDims, data: Vec<T>) -> Result<Self> {
        dims.validate()?;
        let layout = Layout::new(&dims);
        if data.len() != layout.total {
            return Err(Error::dim(format!(
                "{} parameters for a network of {}",
                data.len(),
                layout.total
            )));
        }
        Ok(FilmMlp { dims, layout, data })
    }

    /// Weights ~ N(0, 1/fan_in), biases 0; FiLM heads start at gamma = 1,
    /// beta = 0 (zero output layer, unit gamma bias). Input columns at index
    /// `>= zero_inputs_from` of the first layer start at zero.
    pub fn init<R: Rng + ?Sized>(
        dims: MlpDims,
        zero_inputs_from: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        let fill = |data: &mut [T], s: Span, rng: &mut R| {
            let std = 1.0 / (s.cols as f64).sqrt();
            for v in &mut data[s.range()] {
                let z: f64 = StandardNormal.sample(rng);
                *v = T::of(std * z);
            }
        };
        let layout = net.layout.clone();
        for (k, b) in layout.blocks.iter().enumerate() {
            fill(&mut net.data, b.w, rng);
            if k == 0 {
                if let Some(from) = zero_inputs_from {
                    for r in 0..b.w.rows {
                        for c in from..b.w.cols {
                            net.data[b.w.start + r * b.w.cols + c] = T::zero();
                        }
                    }
                }
            }
            fill(&mut net.data, b.gamma.a, rng);
            fill(&mut net.data, b.beta.a, rng);
            for v in &mut net.data[b.gamma.b_bias.range()] {
                *v = T::one();
            }
        }
        fill(&mut net.data, layout.head_w, rng);
        Ok(net)
    }

    pub fn dims(&self) -> &MlpDims {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn cast<U: Real>(&self) -> FilmMlp<U> {
        FilmMlp {
            dims: self.dims.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|v| U::of(v.get())).collect(),
        }
    }

    /// Slice of the head bias (one entry per output).
    pub fn head_bias(&self) -> &[T] {
        &self.data[self.layout.head_b.range()]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn film_head(&self, h: &HeadLayout, cond: &[T], hidden: &mut Vec<T>, out: &mut Vec<T>) {
        affine(&self.data, h.a, h.a_bias, cond, hidden);
        for v in hidden.iter_mut() {
            *v = v.tanh();
        }
        affine(&self.data, h.b, h.b_bias, hidden, out);
    }

    pub fn forward(&self, input: &[T], cond: &[T]) -> Result<Vec<T>> {
        self.check(input, cond)?;
        let mut x = input.to_vec();
        let mut pre = Vec::new();
        let (mut gh, mut g, mut bh, mut b) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for blk in &self.layout.blocks {
            affine(&self.data, blk.w, blk.bias, &x, &mut pre);
            self.film_head(&blk.gamma, cond, &mut gh, &mut g);
            self.film_head(&blk.beta, cond, &mut bh, &mut b);
            x.clear();
            x.extend(pre.iter().zip(&g).zip(&b).map(|((p, &g), &b)| g * p.tanh() + b));
        }
        let mut out = Vec::new();
        affine(&self.data, self.layout.head_w, self.layout.head_b, &x, &mut out);
        Ok(out)
    }

    pub fn forward_tape(&self, input: &[T], cond: &[T]) -> Result<(Vec<T>, Tape<T>)> {
        self.check(input, cond)?;
        let nb = self.layout.blocks.len();
        let mut tape = Tape {
            inputs: Vec::with_capacity(nb + 1),
            activations: Vec::with_capacity(nb),
            gammas: Vec::with_capacity(nb),
            gamma_hidden: Vec::with_capacity(nb),
            beta_hidden: Vec::with_capacity(nb),
            cond: cond.to_vec(),
        };
        let mut x = input.to_vec();
        for blk in &self.layout.blocks {
            let mut pre = Vec::new();
            let (mut gh, mut g, mut bh, mut b) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            affine(&self.data, blk.w, blk.bias, &x, &mut pre);
            self.film_head(&blk.gamma, cond, &mut gh, &mut g);
            self.film_head(&blk.beta, cond, &mut bh, &mut b);
            let act: Vec<T> = pre.iter().map(|p| p.tanh()).collect();
            let next = film(&act, &g, &b)?;
            tape.inputs.push(std::mem::replace(&mut x, next));
            tape.activations.push(act);
            tape.gammas.push(g);
            tape.gamma_hidden.push(gh);
            tape.beta_hidden.push(bh);
        }
        let mut out = Vec::new();
        affine(&self.data, self.layout.head_w, self.layout.head_b, &x, &mut out);
        tape.inputs.push(x);
        Ok((out, tape))
    }

    /// Adds the gradient of `<upstream, forward(input, cond)>` into `grad`.
    pub fn backward_into(&self, tape: &Tape<T>, upstream: &[T], grad: &mut FilmMlp<T>) -> Result<()> {
        if upstream.len() != self.dims.output {
            return Err(Error::dim(format!(
                "upstream gradient has {} entries, output has {}",
                upstream.len(),
                self.dims.output
            )));
        }
        if grad.dims != self.dims {
            return Err(Error::dim("gradient container has different dims"));
        }
        let nb = self.layout.blocks.len();
        let g = &mut grad.data;
        let mut dx = affine_backward(
            &self.data,
            g,
            self.layout.head_w,
            self.layout.head_b,
            &tape.inputs[nb],
            upstream,
            true,
        );
        for k in (0..nb).rev() {
            let blk = &self.layout.blocks[k];
            let act = &tape.activations[k];
            let gamma = &tape.gammas[k];
            // d gamma = dx ⊙ act, d beta = dx, d act = dx ⊙ gamma
            let dgamma: Vec<T> = dx.iter().zip(act).map(|(&d, &a)| d * a).collect();
            self.head_backward(&blk.gamma, &tape.cond, &tape.gamma_hidden[k], &dgamma, g);
            self.head_backward(&blk.beta, &tape.cond, &tape.beta_hidden[k], &dx, g);
            let dpre: Vec<T> = dx
                .iter()
                .zip(gamma)
                .zip(act)
                .map(|((&d, &gm), &a)| d * gm * (T::one() - a * a))
                .collect();
            dx = affine_backward(&self.data, g, blk.w, blk.bias, &tape.inputs[k], &dpre, k > 0);
        }
        Ok(())
    }

    fn head_backward(&self, h: &HeadLayout, cond: &[T], hidden: &[T], dout: &[T], grad: &mut [T]) {
        let dhidden = affine_backward(&self.data, grad, h.b, h.b_bias, hidden, dout, true);
        let dpre: Vec<T> = dhidden
            .iter()
            .zip(hidden)
            .map(|(&d, &a)| d * (T::one() - a * a))
            .collect();
        affine_backward(&self.data, grad, h.a, h.a_bias, cond, &dpre, false);
    }

    pub fn backward(&self, tape: &Tape<T>, upstream: &[T]) -> Result<FilmMlp<T>> {
        let mut grad = FilmMlp::zeros(self.dims.clone())?;
        self.backward_into(tape, upstream, &mut grad)?;
        Ok(grad)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &FilmMlp<T>) {
        for (p, &g) in self.data.iter_mut().zip(&other.data) {
            *p = *p + alpha * g;
        }
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    fn check(&self, input: &[T], cond: &[T]) -> Result<()> {
        if input.len() != self.dims.input || cond.len() != self.dims.cond {
            return Err(Error::dim(format!(
                "network expects input {} / cond {}, got {} / {}",
                self.dims.input,
                self.dims.cond,
                input.len(),
                cond.len()
            )));
        }
        Ok(())
    }
}

/// Adam with the usual defaults (0.9, 0.999, 1e-8).
pub struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T], lr: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i].get();
            let m = b1 * self.m[i].get() + (1.0 - b1) * g;
            let v = b2 * self.v[i].get() + (1.0 - b2) * g * g;
            self.m[i] = T::of(m);
            self.v[i] = T::of(v);
            let update = lr * (m / c1) / ((v / c2).sqrt() + eps);
            params[i] = T::of(params[i].get() - update);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> MlpDims {
        MlpDims {
            input: 3,
            cond: 2,
            hidden: vec![5, 4],
            film_hidden: 3,
            output: 6,
        }
    }

    #[test]
    fn film_identity_and_arithmetic() {
        let x = [1.5f64, -2.0, 0.25];
        assert_eq!(film(&x, &[1.0; 3], &[0.0; 3]).unwrap(), x.to_vec());
        assert_eq!(
            film(&[1.0f64, 2.0], &[2.0, 0.5], &[0.0, 1.0]).unwrap(),
            vec![2.0, 2.0]
        );
        assert!(film(&[1.0f64], &[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn film_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..16).map(|_| rng.random_range(-3.0..3.0)).collect()
        };
        let (x, g, b) = (v(&mut rng), v(&mut rng), v(&mut rng));
        let out = film(&x, &g, &b).unwrap();
        for i in 0..16 {
            assert_eq!(out[i], g[i] * x[i] + b[i]);
        }
    }

    #[test]
    fn param_count_matches_layout() {
        let d = dims();
        let net = FilmMlp::<f64>::zeros(d.clone()).unwrap();
        // block 1: 5*3+5 + 2*(3*2+3+5*3+5); block 2: 4*5+4 + 2*(3*2+3+4*3+4); head 6*4+6
        assert_eq!(net.len(), 20 + 58 + 24 + 50 + 30);
        assert_eq!(net.len(), d.param_count());
    }

    #[test]
    fn init_is_deterministic_and_film_identity() {
        let a = FilmMlp::<f32>::init(dims(), None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = FilmMlp::<f32>::init(dims(), None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let x = [0.3f32, -0.2, 0.9];
        let y1 = a.forward(&x, &[0.0, 0.0]).unwrap();
        let y2 = a.forward(&x, &[5.0, -3.0]).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn init_variance_follows_fan_in() {
        let d = MlpDims {
            input: 256,
            cond: 1,
            hidden: vec![64],
            film_hidden: 1,
            output: 1,
        };
        let net = FilmMlp::<f64>::init(d, None, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let w = &net.as_slice()[..64 * 256];
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        assert!((var * 256.0 - 1.0).abs() < 0.2, "variance {var}");
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let net = FilmMlp::<f64>::init(dims(), None, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (_, tape) = net.forward_tape(&[0.1, 0.2, 0.3], &[1.0, -1.0]).unwrap();
        let g = net.backward(&tape, &[0.0; 6]).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let net = FilmMlp::<f64>::init(dims(), None, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let x = [0.1, 0.2, 0.3];
        let (y, _) = net.forward_tape(&x, &[1.0, -1.0]).unwrap();
        assert_eq!(y, net.forward(&x, &[1.0, -1.0]).unwrap());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = FilmMlp::<f64>::init(dims(), None, &mut rng).unwrap();
        // activate the FiLM output layers
        for v in net.as_mut_slice() {
            *v += 0.3 * rng.random_range(-1.0..1.0);
        }
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, tape) = net.forward_tape(&x, &c).unwrap();
        let grad = net.backward(&tape, &up).unwrap();
        let objective = |n: &FilmMlp<f64>| -> f64 {
            n.forward(&x, &c).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let h = 1e-4;
        for i in 0..net.len() {
            let mut p = net.clone();
            p.as_mut_slice()[i] += h;
            let fp = objective(&p);
            p.as_mut_slice()[i] -= 2.0 * h;
            let fm = objective(&p);
            let fd = (fp - fm) / (2.0 * h);
            let an = grad.as_slice()[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "param {i}: analytic {an} vs fd {fd}");
        }
    }
}
