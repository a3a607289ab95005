//! The conditional trajectory generator `f(z, c)`.
//!
//! Contexts are encoded relative to the current state and divided by a
//! length scale; the network output is scaled back, offset by the current
//! state, and its first state is overwritten with the current state.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{FilmMlp, MlpDims, Real, Tape};
use crate::trajectory::{Context, Trajectory};

/// How a [`Context`] becomes a fixed-size feature vector.
///
/// Features are `(goal - position) / scale` followed, for each of
/// `obstacle_slots` slots, by `history_len` relative positions divided by
/// `scale` and a presence flag. Obstacles fill slots nearest first; histories
/// are aligned on their most recent entry and padded with the oldest one.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEncoding {
    pub goal_dim: usize,
    pub obstacle_slots: usize,
    pub history_len: usize,
    pub scale: f64,
}

impl ContextEncoding {
    pub fn dim(&self) -> usize {
        self.goal_dim + self.obstacle_slots * (2 * self.history_len + 1)
    }

    pub fn encode(&self, c: &Context) -> Result<Vec<f64>> {
        if c.goal.len() != self.goal_dim || c.current_state.len() < self.goal_dim {
            return Err(Error::dim(format!(
                "context goal has {} dims (state {}), encoding expects {}",
                c.goal.len(),
                c.current_state.len(),
                self.goal_dim
            )));
        }
        let inv = 1.0 / self.scale;
        let mut out = Vec::with_capacity(self.dim());
        out.extend(
            c.goal
                .iter()
                .zip(&c.current_state)
                .map(|(g, s)| (g - s) * inv),
        );
        if self.obstacle_slots == 0 {
            return Ok(out);
        }
        let here = c.position();
        let mut order: Vec<(f64, usize)> = c
            .obstacle_history
            .iter()
            .enumerate()
            .filter(|(_, h)| !h.is_empty())
            .map(|(i, h)| {
                let p = h[h.len() - 1];
                ((p[0] - here[0]).hypot(p[1] - here[1]), i)
            })
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for slot in 0..self.obstacle_slots {
            match order.get(slot) {
                Some(&(_, i)) => {
                    let h = &c.obstacle_history[i];
                    for k in 0..self.history_len {
                        // align newest entries, pad with the oldest
                        let back = self.history_len - 1 - k;
                        let p = h[h.len().saturating_sub(1 + back)];
                        out.push((p[0] - here[0]) * inv);
                        out.push((p[1] - here[1]) * inv);
                    }
                    out.push(1.0);
                }
                None => out.extend(std::iter::repeat_n(0.0, 2 * self.history_len + 1)),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorDims {
    pub latent_dim: usize,
    pub encoding: ContextEncoding,
    pub hidden: Vec<usize>,
    pub film_hidden: usize,
    pub horizon: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl GeneratorDims {
    /// Navigation defaults: 2-D positions, relative goal only, horizon 20.
    pub fn navigation(horizon: usize) -> Self {
        GeneratorDims {
            latent_dim: 16,
            encoding: ContextEncoding {
                goal_dim: 2,
                obstacle_slots: 0,
                history_len: 1,
                scale: 4.0,
            },
            hidden: vec![64, 64],
            film_hidden: 16,
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
            input: self.latent_dim + cdim,
            cond: cdim.max(1),
            hidden: self.hidden.clone(),
            film_hidden: self.film_hidden,
            output: self.output_len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.horizon < 2 || self.state_dim == 0 {
            return Err(Error::Config(format!("invalid generator dims {self:?}")));
        }
        if !(self.encoding.scale > 0.0 && self.encoding.scale.is_finite()) {
            return Err(Error::Config("context scale must be positive".into()));
        }
        if self.encoding.goal_dim > self.state_dim {
            return Err(Error::Config("goal dimension exceeds state dimension".into()));
        }
        self.mlp().validate()
    }
}

/// All learnable weights of the generator plus the dims that shape them.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams<T = f32> {
    pub dims: GeneratorDims,
    pub net: FilmMlp<T>,
}

/// Standard-normal latent code.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn sample<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        LatentCode((0..dim).map(|_| StandardNormal.sample(rng)).collect())
    }

    pub fn zeros(dim: usize) -> Self {
        LatentCode(vec![0.0; dim])
    }
}

/// Fan-in scaled initialisation with identity FiLM heads. The context columns
/// of the first layer start at zero so the untrained output ignores `c`.
pub fn init_params<T: Real, R: Rng + ?Sized>(dims: GeneratorDims, rng: &mut R) -> Result<GeneratorParams<T>> {
    dims.validate()?;
    let net = FilmMlp::init(dims.mlp(), Some(dims.latent_dim), rng)?;
    Ok(GeneratorParams { dims, net })
}

/// Per-call state needed by [`backward`].
pub struct ForwardCache<T> {
    tape: Tape<T>,
}

impl<T: Real> GeneratorParams<T> {
    pub fn cast<U: Real>(&self) -> GeneratorParams<U> {
        GeneratorParams {
            dims: self.dims.clone(),
            net: self.net.cast(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.net.len()
    }

    fn inputs(&self, z: &LatentCode, c: &Context) -> Result<(Vec<T>, Vec<T>)> {
        if z.0.len() != self.dims.latent_dim {
            return Err(Error::dim(format!(
                "latent code has {} dims, generator expects {}",
                z.0.len(),
                self.dims.latent_dim
            )));
        }
        if c.current_state.len() != self.dims.state_dim {
            return Err(Error::dim(format!(
                "context state has {} dims, generator expects {}",
                c.current_state.len(),
                self.dims.state_dim
            )));
        }
        let feat = self.dims.encoding.encode(c)?;
        let mut input: Vec<T> = z.0.iter().map(|&v| T::of(v)).collect();
        input.extend(feat.iter().map(|&v| T::of(v)));
        let cond = if feat.is_empty() {
            vec![T::zero()]
        } else {
            feat.iter().map(|&v| T::of(v)).collect()
        };
        Ok((input, cond))
    }

    fn decode(&self, raw: &[T], c: &Context, dt: f64) -> Result<Trajectory> {
        let ch = self.dims.channels();
        let ds = self.dims.state_dim;
        let scale = self.dims.encoding.scale;
        let mut flat = Vec::with_capacity(raw.len());
        for (t, row) in raw.chunks(ch).enumerate() {
            for (d, &v) in row.iter().enumerate() {
                flat.push(if d < ds {
                    if t == 0 {
                        c.current_state[d]
                    } else {
                        c.current_state[d] + scale * v.get()
                    }
                } else {
                    v.get()
                });
            }
        }
        Trajectory::from_flat(&flat, ds, self.dims.action_dim, dt)
    }
}

/// One trajectory `f(z, c)`; pure in its arguments.
pub fn forward<T: Real>(params: &GeneratorParams<T>, z: &LatentCode, c: &Context, dt: f64) -> Result<Trajectory> {
    let (input, cond) = params.inputs(z, c)?;
    let raw = params.net.forward(&input, &cond)?;
    params.decode(&raw, c, dt)
}

pub fn forward_cached<T: Real>(
    params: &GeneratorParams<T>,
    z: &LatentCode,
    c: &Context,
    dt: f64,
) -> Result<(Trajectory, ForwardCache<T>)> {
    let (input, cond) = params.inputs(z, c)?;
    let (raw, tape) = params.net.forward_tape(&input, &cond)?;
    Ok((params.decode(&raw, c, dt)?, ForwardCache { tape }))
}

/// Gradient of `<upstream, forward(params, z, c)>` with respect to every
/// parameter, accumulated into `grad`. `upstream` is `H x (D_s + D_a)`,
/// time-major; entries of the pinned first state are ignored.
pub fn backward_into<T: Real>(
    params: &GeneratorParams<T>,
    cache: &ForwardCache<T>,
    upstream: &[f64],
    grad: &mut FilmMlp<T>,
) -> Result<()> {
    let ch = params.dims.channels();
    if upstream.len() != params.dims.output_len() {
        return Err(Error::dim(format!(
            "upstream gradient has {} entries, output has {}",
            upstream.len(),
            params.dims.output_len()
        )));
    }
    let scale = params.dims.encoding.scale;
    let ds = params.dims.state_dim;
    let dout: Vec<T> = upstream
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let (t, d) = (i / ch, i % ch);
            T::of(if d >= ds {
                g
            } else if t == 0 {
                0.0
            } else {
                scale * g
            })
        })
        .collect();
    params.net.backward_into(&cache.tape, &dout, grad)
}

pub fn backward<T: Real>(
    params: &GeneratorParams<T>,
    z: &LatentCode,
    c: &Context,
    upstream: &[f64],
) -> Result<FilmMlp<T>> {
    let (_, cache) = forward_cached(params, z, c, 1.0)?;
    let mut grad = FilmMlp::zeros(params.net.dims().clone())?;
    backward_into(params, &cache, upstream, &mut grad)?;
    Ok(grad)
}

const CKPT_MAGIC: &str = "IMLE-CKPT";
pub(crate) const CKPT_VERSION: &str = "v1";

fn dims_header(d: &GeneratorDims) -> String {
    let hidden = join_widths(&d.hidden);
    format!(
        "latent={} goal={} slots={} history={} scale={:?} hidden={} film={} horizon={} ds={} da={}",
        d.latent_dim,
        d.encoding.goal_dim,
        d.encoding.obstacle_slots,
        d.encoding.history_len,
        d.encoding.scale,
        hidden,
        d.film_hidden,
        d.horizon,
        d.state_dim,
        d.action_dim
    )
}

/// `key=value` fields of a checkpoint header.
pub(crate) struct Header<'a>(std::collections::BTreeMap<&'a str, &'a str>);

impl<'a> Header<'a> {
    pub(crate) fn parse(fields: &[&'a str]) -> Result<Self> {
        let mut map = std::collections::BTreeMap::new();
        for f in fields {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| Error::Version(format!("bad header field `{f}`")))?;
            map.insert(k, v);
        }
        Ok(Header(map))
    }

    pub(crate) fn get(&self, k: &str) -> Result<&'a str> {
        self.0
            .get(k)
            .copied()
            .ok_or_else(|| Error::Version(format!("header lacks `{k}`")))
    }

    pub(crate) fn int(&self, k: &str) -> Result<usize> {
        self.get(k)?
            .parse()
            .map_err(|_| Error::Version(format!("header `{k}` is not an integer")))
    }

    pub(crate) fn float(&self, k: &str) -> Result<f64> {
        self.get(k)?
            .parse()
            .map_err(|_| Error::Version(format!("header `{k}` is not a number")))
    }

    pub(crate) fn list(&self, k: &str) -> Result<Vec<usize>> {
        self.get(k)?
            .split(',')
            .map(|w| w.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Version(format!("header `{k}` is malformed")))
    }
}

pub(crate) fn join_widths(widths: &[usize]) -> String {
    widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_dims(fields: &[&str]) -> Result<GeneratorDims> {
    let h = Header::parse(fields)?;
    let dims = GeneratorDims {
        latent_dim: h.int("latent")?,
        encoding: ContextEncoding {
            goal_dim: h.int("goal")?,
            obstacle_slots: h.int("slots")?,
            history_len: h.int("history")?,
            scale: h.float("scale")?,
        },
        hidden: h.list("hidden")?,
        film_hidden: h.int("film")?,
        horizon: h.int("horizon")?,
        state_dim: h.int("ds")?,
        action_dim: h.int("da")?,
    };
    dims.validate().map_err(|e| Error::Version(e.to_string()))?;
    Ok(dims)
}

/// Header line, then little-endian `f32` parameters in layout order.
pub(crate) fn write_blob(magic: &str, dims: &str, params: &[f32]) -> Vec<u8> {
    let mut bytes = format!("{magic} {CKPT_VERSION} {dims}\n").into_bytes();
    for v in params {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

/// Splits a checkpoint into its header fields and `f32` payload.
pub(crate) fn read_blob<'a>(bytes: &'a [u8], magic: &str) -> Result<(Vec<&'a str>, Vec<f32>)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Version("checkpoint has no header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::Version("checkpoint header is not text".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() < 2 || fields[0] != magic {
        return Err(Error::Version(format!("expected `{magic}` checkpoint")));
    }
    if fields[1] != CKPT_VERSION {
        return Err(Error::Version(format!("checkpoint version `{}`", fields[1])));
    }
    let body = &bytes[nl + 1..];
    if !body.len().is_multiple_of(4) {
        return Err(Error::dim("checkpoint payload is not a whole number of f32"));
    }
    let params = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((fields[2..].to_vec(), params))
}

pub fn checkpoint_bytes(params: &GeneratorParams<f32>) -> Vec<u8> {
    write_blob(CKPT_MAGIC, &dims_header(&params.dims), params.net.as_slice())
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<GeneratorParams<f32>> {
    let (fields, data) = read_blob(bytes, CKPT_MAGIC)?;
    let dims = parse_dims(&fields)?;
    let expected = dims.mlp().param_count();
    if data.len() != expected {
        return Err(Error::dim(format!(
            "checkpoint holds {} parameters, dims need {expected}",
            data.len()
        )));
    }
    let net = FilmMlp::from_flat(dims.mlp(), data)?;
    Ok(GeneratorParams { dims, net })
}

pub fn save_checkpoint(params: &GeneratorParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<GeneratorParams<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    params_from_bytes(&bytes)
}
