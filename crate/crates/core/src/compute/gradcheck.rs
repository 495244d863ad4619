//! Finite-difference verification of reverse-mode gradients.

use std::collections::HashSet;

use crate::compute::{backward, ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compare analytic gradients of `loss_fn` against central differences on
/// `samples` randomly chosen trainable scalars (all of them when `samples`
/// covers the store). The loss builder must be deterministic in the
/// parameter values; fix any stochastic inputs before calling.
///
/// Relative error per scalar is |a - n| / max(1, |a|, |n|).
pub fn finite_diff_check(
    store: &ParameterStore,
    loss_fn: &mut dyn FnMut() -> Result<Tensor>,
    samples: usize,
    h: f64,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    if samples == 0 {
        return Err(Error::contract("finite_diff_check: zero samples"));
    }
    if !(h > 0.0) {
        return Err(Error::contract("finite_diff_check: step must be positive"));
    }
    store.zero_grads();
    let loss = loss_fn()?;
    backward(&loss)?;

    let mut layout: Vec<(String, usize)> = Vec::new();
    for (name, t) in store.iter() {
        if t.requires_grad() {
            layout.push((name.clone(), t.len()));
        }
    }
    let total: usize = layout.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::contract(
            "finite_diff_check: store has no trainable parameters",
        ));
    }

    let flat_indices: Vec<usize> = if samples >= total {
        (0..total).collect()
    } else {
        let mut seen = HashSet::new();
        let mut picked = Vec::with_capacity(samples);
        while picked.len() < samples {
            let i = rng.below(total);
            if seen.insert(i) {
                picked.push(i);
            }
        }
        picked
    };

    let locate = |flat: usize| -> (String, usize) {
        let mut rest = flat;
        for (name, n) in &layout {
            if rest < *n {
                return (name.clone(), rest);
            }
            rest -= n;
        }
        unreachable!("flat index within total")
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };

    for flat in flat_indices {
        let (name, idx) = locate(flat);
        let tensor = store.get(&name)?;
        let analytic = tensor.grad().map(|g| g[idx]).unwrap_or(0.0);
        let original = tensor.value_at(idx);

        tensor.set_value_at(idx, original + h)?;
        let plus = loss_fn()?.item()?;
        tensor.set_value_at(idx, original - h)?;
        let minus = loss_fn()?.item()?;
        tensor.set_value_at(idx, original)?;

        let numeric = (plus - minus) / (2.0 * h);
        let rel = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_param = name;
            report.worst_index = idx;
            report.worst_analytic = analytic;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}
