//! Finite-difference check of the full model's parameter gradients.

use super::{ContextInput, Fwd, Model};
use crate::audio::FeatureMatrix;
use crate::error::Result;

/// Loss used for the check: label-smoothed cross entropy plus a gate term,
/// so every parameter (gates included) receives gradient.
pub struct Probe<'a> {
    pub features: &'a FeatureMatrix,
    pub context: ContextInput<'a>,
    pub dec_in: &'a [usize],
    pub targets: &'a [usize],
    pub gate_weight: f64,
}

fn loss(model: &Model, probe: &Probe, fwd: &mut Fwd) -> Result<crate::tensor::Var> {
    let out = model.forward(fwd, probe.features, probe.context, probe.dec_in)?;
    let mut l = fwd.g.smoothed_cross_entropy(out.logits, probe.targets, 0.1)?;
    for lam in out.lambdas {
        let m = fwd.g.mean(lam)?;
        let m = fwd.g.scale(m, probe.gate_weight)?;
        l = fwd.g.add(l, m)?;
    }
    Ok(l)
}

pub fn probe_value(model: &Model, probe: &Probe) -> Result<f64> {
    let mut fwd = Fwd::eval(&model.params);
    let l = loss(model, probe, &mut fwd)?;
    Ok(fwd.g.value(l).item())
}

/// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)` over every
/// `stride`-th coordinate of every trainable parameter (central differences).
pub fn max_gradient_error(model: &Model, probe: &Probe, h: f64, stride: usize) -> Result<f64> {
    let mut fwd = Fwd::eval(&model.params).with_finite_checks(true);
    let l = loss(model, probe, &mut fwd)?;
    let grads = fwd.g.backward(l)?;
    let mut analytic = vec![None; model.params.len()];
    for (id, g) in grads.params() {
        let slot: &mut Option<Vec<f64>> = &mut analytic[id.index()];
        match slot {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }
    let mut work = model.clone();
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = model.params.iter().map(|(id, p)| (id, p.trainable, p.value.len())).collect();
    let mut k = 0usize;
    for (id, trainable, n) in ids {
        if !trainable {
            continue;
        }
        for j in 0..n {
            k += 1;
            if k % stride.max(1) != 0 {
                continue;
            }
            let orig = work.params.get(id).value.data()[j];
            work.params.get_mut(id).value.data_mut()[j] = orig + h;
            let up = probe_value(&work, probe)?;
            work.params.get_mut(id).value.data_mut()[j] = orig - h;
            let down = probe_value(&work, probe)?;
            work.params.get_mut(id).value.data_mut()[j] = orig;
            let num = (up - down) / (2.0 * h);
            let ana = analytic[id.index()].as_ref().map_or(0.0, |g| g[j]);
            let err = (ana - num).abs() / 1f64.max(ana.abs()).max(num.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
