//! Central finite-difference check of tape gradients.
//!
//! The numeric side only evaluates the forward pass, so it shares nothing
//! with the backward code it verifies.

use rand::seq::index::sample;
use rand::Rng;

use super::params::ParamSet;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Floor on the relative-error denominator, so coordinates whose true
/// gradient is ~0 are judged by absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, serde::Serialize)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
    pub max_rel_err: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares tape gradients of `loss_fn` against central differences with
/// step `h` on `n_coords` coordinates (at least one per tensor, the rest
/// drawn uniformly over all values).
pub fn check_gradients<R: Rng>(
    params: &ParamSet<f64>,
    loss_fn: impl Fn(&mut Tape<f64>, &ParamSet<f64>) -> Result<Var>,
    n_coords: usize,
    h: f64,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, params)?;
    let grads = tape.grad_all(loss)?;

    let names: Vec<String> = params.names().map(str::to_string).collect();
    let sizes: Vec<usize> = names.iter().map(|n| params.get(n).unwrap().numel()).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::Empty("no parameters to check".into()));
    }
    let mut picks: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 0)
        .map(|(i, &s)| (i, rng.random_range(0..s)))
        .collect();
    let extra = n_coords.saturating_sub(picks.len()).min(total);
    for flat in sample(rng, total, extra) {
        let mut rem = flat;
        for (i, &s) in sizes.iter().enumerate() {
            if rem < s {
                picks.push((i, rem));
                break;
            }
            rem -= s;
        }
    }

    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let l = loss_fn(&mut t, p)?;
        Ok(t.value(l).data()[0])
    };

    let mut coords = Vec::with_capacity(picks.len());
    let mut work = params.clone();
    for (pi, idx) in picks {
        let name = &names[pi];
        let orig = params.get(name).unwrap().data()[idx];
        work.get_mut(name).unwrap().data_mut()[idx] = orig + h;
        let up = eval(&work)?;
        work.get_mut(name).unwrap().data_mut()[idx] = orig - h;
        let down = eval(&work)?;
        work.get_mut(name).unwrap().data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(name).unwrap().data()[idx];
        coords.push(CoordCheck {
            param: name.clone(),
            index: idx,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    let max_rel_err = coords.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        coords,
        max_rel_err,
        step: h,
    })
}
