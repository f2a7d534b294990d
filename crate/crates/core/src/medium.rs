//! Drop probability of a shared broadcast medium as a function of load, and
//! realizability sweeps over load parameters.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::bounds::{solve_opt, OptError};
use crate::protocol::ProtocolSpec;

pub const DEFAULT_A: f64 = 4.0;
pub const DEFAULT_B: f64 = 0.002;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MediumParams {
    pub n_cars: u32,
    pub d_max: f64,
    pub tau_min: f64,
    pub a: f64,
    pub b: f64,
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum MediumError {
    #[error("invalid medium parameters: {0}")]
    InvalidParams(String),
    #[error("empty grid axis `{0}`")]
    EmptyGrid(&'static str),
    #[error("specification is not well-posed:\n{0}")]
    NotWellPosed(crate::protocol::WellPosednessReport),
}

impl MediumParams {
    pub fn new(n_cars: u32, d_max: f64, tau_min: f64) -> Self {
        MediumParams {
            n_cars,
            d_max,
            tau_min,
            a: DEFAULT_A,
            b: DEFAULT_B,
        }
    }

    pub fn validate(&self) -> Result<(), MediumError> {
        let bad = |msg: String| Err(MediumError::InvalidParams(msg));
        if self.n_cars < 2 {
            return bad(format!("N = {} < 2", self.n_cars));
        }
        if !(self.d_max >= 0.0 && self.d_max.is_finite()) {
            return bad(format!("d_max = {} must be a nonnegative number", self.d_max));
        }
        if !(self.tau_min > 0.0 && self.tau_min.is_finite()) {
            return bad(format!("tau_min = {} must be positive", self.tau_min));
        }
        if !(self.a > 0.0 && self.a.is_finite()) {
            return bad(format!("a = {} must be positive", self.a));
        }
        if !(self.b >= 0.0 && self.b.is_finite()) {
            return bad(format!("b = {} must be nonnegative", self.b));
        }
        Ok(())
    }

    /// Load `r = (N-2)·d_max/τ_min`; two cars are taken not to interfere.
    pub fn load(&self) -> f64 {
        (self.n_cars - 2) as f64 * self.d_max / self.tau_min
    }
}

/// `δ = 1/(1 + a·e^{-b·r})`, which lies in `(0, 1)` and grows with load.
pub fn drop_prob(params: &MediumParams) -> Result<f64, MediumError> {
    params.validate()?;
    Ok(1.0 / (1.0 + params.a * (-params.b * params.load()).exp()))
}

/// An inclusive arithmetic range `start:end:step`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Axis {
    pub start: f64,
    pub end: f64,
    pub step: f64,
}

impl Axis {
    pub fn new(start: f64, end: f64, step: f64) -> Self {
        Axis { start, end, step }
    }

    /// Grid values; the end point is included when it lies on the grid up to
    /// rounding.
    pub fn values(&self) -> Vec<f64> {
        let valid = self.step > 0.0 && self.start.is_finite() && self.end.is_finite() && self.end >= self.start;
        if !valid {
            return Vec::new();
        }
        let count = ((self.end - self.start) / self.step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| self.start + i as f64 * self.step).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub n_cars: Axis,
    pub d_max: Axis,
    pub tau_min: Axis,
    pub a: f64,
    pub b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    #[serde(rename = "N")]
    pub n_cars: u32,
    pub d_max: f64,
    pub tau_min: f64,
    pub r: f64,
    pub delta: f64,
    pub realizable: bool,
    pub sum_bounds: Option<u64>,
}

/// Realizability of `spec` at every grid point, ordered by `N`, then
/// `d_max`, then `τ_min`.
pub fn feasibility_sweep(spec: &ProtocolSpec, grid: &Grid, cap: u32) -> Result<Vec<SweepPoint>, MediumError> {
    let report = spec.well_posed();
    if !report.is_ok() {
        return Err(MediumError::NotWellPosed(report));
    }
    let ns = grid.n_cars.values();
    let ds = grid.d_max.values();
    let ts = grid.tau_min.values();
    for (axis, values) in [("N", &ns), ("d_max", &ds), ("tau_min", &ts)] {
        if values.is_empty() {
            return Err(MediumError::EmptyGrid(axis));
        }
    }
    let mut params = Vec::with_capacity(ns.len() * ds.len() * ts.len());
    for &n in &ns {
        if n.fract() != 0.0 {
            return Err(MediumError::InvalidParams(format!("N = {n} is not an integer")));
        }
        for &d in &ds {
            for &t in &ts {
                let p = MediumParams {
                    n_cars: n as u32,
                    d_max: d,
                    tau_min: t,
                    a: grid.a,
                    b: grid.b,
                };
                p.validate()?;
                params.push(p);
            }
        }
    }
    Ok(params
        .par_iter()
        .map(|p| {
            let delta = drop_prob(p).expect("validated above");
            let solved = solve_opt(spec, delta, cap);
            debug_assert!(!matches!(solved, Err(OptError::NotWellPosed(_))));
            SweepPoint {
                n_cars: p.n_cars,
                d_max: p.d_max,
                tau_min: p.tau_min,
                r: p.load(),
                delta,
                realizable: solved.is_ok(),
                sum_bounds: solved.ok().map(|b| b.sum()),
            }
        })
        .collect())
}

pub fn write_csv(points: &[SweepPoint], out: impl Write) -> Result<(), csv::Error> {
    let mut writer = csv::Writer::from_writer(out);
    for p in points {
        writer.serialize(p)?;
    }
    writer.flush()?;
    Ok(())
}
