//! Central finite-difference gradient checking.

use super::{Gradients, Kind, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps entries whose true
/// gradient is zero from dividing noise by noise.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Every `(parameter, flat index)` pair of the trainable tensors, in name order.
pub fn all_coordinates(params: &ParamStore) -> Vec<(String, usize)> {
    params
        .params()
        .flat_map(|(n, t)| (0..t.len()).map(move |i| (n.clone(), i)))
        .collect()
}

/// Compares `grads` against `(f(p + h) - f(p - h)) / 2h` at each coordinate.
pub fn check_gradients(
    params: &ParamStore,
    grads: &Gradients,
    coords: &[(String, usize)],
    h: f64,
    floor: f64,
    mut f: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    for (name, index) in coords {
        if work.kind(name) != Some(Kind::Param) {
            return Err(Error::invalid(format!("`{name}` is not a trainable parameter")));
        }
        let index = *index;
        let orig = params.get(name)?.data()[index];
        let set = |work: &mut ParamStore, v: f64| {
            work.get_mut(name).expect("present").data_mut()[index] = v;
        };
        set(&mut work, orig + h);
        let up = f(&work)?;
        set(&mut work, orig - h);
        let down = f(&work)?;
        set(&mut work, orig);
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(name).map_or(0.0, |g| g.data()[index]);
        report.entries.push(GradCheckEntry {
            name: name.clone(),
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric, floor),
        });
    }
    Ok(report)
}
