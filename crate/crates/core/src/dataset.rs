//! Datasets of weighted trajectory samples and the `IMLE-DS v1` text format.
//!
//! ```text
//! IMLE-DS v1 H=20 dt=4.0000000000000002e-1 Ds=2 Da=0 N=2
//! # source=bimodal
//! R=<return> W=<weight> C=<context floats> T=<trajectory floats>
//! ```
//!
//! Lines starting with `#` after the header carry `key=value` metadata.
//! Context floats use the layout of [`Context::to_flat`]; trajectory floats
//! the layout of [`Trajectory::to_flat`]. Floats are written with 17
//! significant digits so a load/save cycle is bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::trajectory::{Context, Trajectory, WeightedSample};

const MAGIC: &str = "IMLE-DS";
const VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<WeightedSample>,
    pub horizon: usize,
    pub dt: f64,
    pub metadata: BTreeMap<String, String>,
}

impl Dataset {
    pub fn new(samples: Vec<WeightedSample>, horizon: usize, dt: f64) -> Result<Self> {
        let ds = Dataset {
            samples,
            horizon,
            dt,
            metadata: BTreeMap::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn empty(horizon: usize, dt: f64) -> Self {
        Dataset {
            samples: Vec::new(),
            horizon,
            dt,
            metadata: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.trajectory.horizon() != self.horizon || s.trajectory.dt() != self.dt {
                return Err(Error::dim(format!(
                    "sample {i} has H={} dt={}, dataset has H={} dt={}",
                    s.trajectory.horizon(),
                    s.trajectory.dt(),
                    self.horizon,
                    self.dt
                )));
            }
            if !(s.weight >= 0.0 && s.weight.is_finite()) {
                return Err(Error::Numeric(format!("sample {i} weight {}", s.weight)));
            }
        }
        Ok(())
    }

    pub fn returns(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.return_value).collect()
    }

    /// Overwrites every sample's weight; `weights` must align with `samples`.
    pub fn set_weights(&mut self, weights: &[f64]) -> Result<()> {
        if weights.len() != self.samples.len() {
            return Err(Error::dim(format!(
                "{} weights for {} samples",
                weights.len(),
                self.samples.len()
            )));
        }
        for (s, &w) in self.samples.iter_mut().zip(weights) {
            s.weight = w;
        }
        self.validate()
    }

    fn dims(&self) -> (usize, usize) {
        self.samples
            .first()
            .map_or((2, 0), |s| (s.trajectory.state_dim(), s.trajectory.action_dim()))
    }

    pub fn to_text(&self) -> String {
        let (ds, da) = self.dims();
        let mut out = format!(
            "{MAGIC} {VERSION} H={} dt={} Ds={ds} Da={da} N={}\n",
            self.horizon,
            fmt_float(self.dt),
            self.samples.len()
        );
        for (k, v) in &self.metadata {
            let _ = writeln!(out, "# {k}={v}");
        }
        for s in &self.samples {
            let _ = writeln!(
                out,
                "R={} W={} C={} T={}",
                fmt_float(s.return_value),
                fmt_float(s.weight),
                join(&s.context.to_flat()),
                join(&s.trajectory.to_flat())
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Version("missing dataset header".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 7 || fields[0] != MAGIC {
            return Err(Error::Version(format!("bad dataset header `{header}`")));
        }
        if fields[1] != VERSION {
            return Err(Error::Version(format!("dataset version {}", fields[1])));
        }
        let key = |i: usize, k: &str| -> Result<&str> {
            fields[i]
                .strip_prefix(k)
                .and_then(|r| r.strip_prefix('='))
                .ok_or_else(|| Error::Parse {
                    line: 1,
                    msg: format!("expected {k}=..., got `{}`", fields[i]),
                })
        };
        let int = |i: usize, k: &str| -> Result<usize> {
            key(i, k)?.parse().map_err(|_| Error::Parse {
                line: 1,
                msg: format!("{k} is not an integer"),
            })
        };
        let horizon = int(2, "H")?;
        let dt = parse_float(key(3, "dt")?, 1)?;
        let state_dim = int(4, "Ds")?;
        let action_dim = int(5, "Da")?;
        let n = int(6, "N")?;

        let mut ds = Dataset::empty(horizon, dt);
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((k, v)) = meta.trim().split_once('=') {
                    ds.metadata.insert(k.to_string(), v.to_string());
                }
                continue;
            }
            ds.samples
                .push(parse_record(line, lineno, state_dim, action_dim, dt)?);
        }
        if ds.samples.len() != n {
            return Err(Error::Parse {
                line: 1,
                msg: format!("header declares N={n}, found {} records", ds.samples.len()),
            });
        }
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn parse_record(
    line: &str,
    lineno: usize,
    state_dim: usize,
    action_dim: usize,
    dt: f64,
) -> Result<WeightedSample> {
    let err = |msg: String| Error::Parse { line: lineno, msg };
    let mut parts = line.split_whitespace();
    let mut field = |k: &str| -> Result<&str> {
        parts
            .next()
            .and_then(|p| p.strip_prefix(k))
            .and_then(|p| p.strip_prefix('='))
            .ok_or_else(|| err(format!("expected field {k}=")))
    };
    let return_value = parse_float(field("R")?, lineno)?;
    let weight = parse_float(field("W")?, lineno)?;
    let context = parse_list(field("C")?, lineno)?;
    let traj = parse_list(field("T")?, lineno)?;
    let context = Context::from_flat(&context, state_dim)
        .map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
    let trajectory = Trajectory::from_flat(&traj, state_dim, action_dim, dt)
        .map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
    Ok(WeightedSample {
        trajectory,
        context,
        return_value,
        weight,
    })
}

pub(crate) fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|&v| fmt_float(v))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_float(s: &str, line: usize) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::Parse {
        line,
        msg: format!("`{s}` is not a number"),
    })
}

fn parse_list(s: &str, line: usize) -> Result<Vec<f64>> {
    s.split(',').map(|v| parse_float(v, line)).collect()
}
