use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Gradients, ParamId, ParamSet};
use crate::error::{Error, Result};

/// Smallest denominator of a probe's relative error.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

/// Outcome of a finite-difference gradient comparison.
#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub max_relative_error: f64,
    pub probes: usize,
    /// `(array, index, analytic, numeric)` of the worst probe.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares tape gradients against fourth-order central differences on
/// randomly chosen coordinates.
///
/// `value` evaluates the scalar objective; `gradient` evaluates it together
/// with its tape gradient. Three quarters of the probes are drawn from the
/// coordinates with a nonzero analytic gradient, the rest uniformly from all
/// coordinates. The relative error of one probe uses the denominator
/// `max(|analytic|, |numeric|, DENOMINATOR_FLOOR)`.
pub fn finite_diff_check<P, V, G>(
    params: &P,
    value: V,
    gradient: G,
    probes: usize,
    eps: f64,
    seed: u64,
) -> Result<FdReport>
where
    P: ParamSet + Clone,
    V: Fn(&P) -> Result<f64>,
    G: Fn(&P) -> Result<(f64, Gradients)>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step must be positive, got {eps}")));
    }
    if probes == 0 {
        log::warn!("finite_diff_check called with zero probes; nothing compared");
        return Ok(FdReport::default());
    }
    let (f0, grads) = gradient(params)?;
    if !f0.is_finite() {
        return Err(Error::Numerical("objective returned a non-finite value".into()));
    }

    let mut all: Vec<(ParamId, usize)> = Vec::new();
    let mut touched: Vec<(ParamId, usize)> = Vec::new();
    let total: usize = (0..params.num_leaves()).map(|i| params.leaf(ParamId(i)).len()).sum();
    for i in 0..params.num_leaves() {
        let id = ParamId(i);
        if let Some(g) = grads.get(id) {
            touched.extend(g.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(j, _)| (id, j)));
        }
    }
    if total == 0 {
        return Ok(FdReport::default());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut report = FdReport {
        probes,
        ..FdReport::default()
    };
    for _ in 0..probes {
        let (id, j) = if !touched.is_empty() && rng.gen::<f64>() < 0.75 {
            touched[rng.gen_range(0..touched.len())]
        } else {
            if all.is_empty() {
                all = (0..params.num_leaves())
                    .flat_map(|i| (0..params.leaf(ParamId(i)).len()).map(move |j| (ParamId(i), j)))
                    .collect();
            }
            all[rng.gen_range(0..all.len())]
        };
        let original = work.leaf(id)[j];
        let mut at = |k: f64| -> Result<f64> {
            work.leaf_mut(id)[j] = original + k * eps;
            let v = value(&work)?;
            if !v.is_finite() {
                return Err(Error::Numerical(format!(
                    "objective returned a non-finite value while probing {}[{j}]",
                    params.leaf_name(id)
                )));
            }
            Ok(v)
        };
        let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
        work.leaf_mut(id)[j] = original;
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
        let analytic = grads.value(id, j);
        let denom = analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR);
        let err = (analytic - numeric).abs() / denom;
        if report.worst.is_none() || err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = Some((params.leaf_name(id).to_string(), j, analytic, numeric));
        }
    }
    Ok(report)
}
