//! Central finite-difference gradient checking.
//!
//! The builder closure constructs the scalar loss on a fresh tape from a map
//! of bound parameter vars. The analytic pass binds the parameters as
//! trainable leaves and runs backward once; the numeric pass re-evaluates the
//! loss value 2 times per coordinate with the parameters bound as constants.
//! Run it with `E = f64` so the stated tolerance is meaningful; the builder
//! being generic over the element type guarantees the f32 training path uses
//! the same backward rules that are validated here.

use std::collections::BTreeMap;

use crate::par;
use crate::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::{Elem, Tensor};

/// Relative error uses `|a - n| / max(|a|, |n|, REL_FLOOR)`; the floor keeps
/// finite-difference noise on near-zero gradients from dominating.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub pass: bool,
    pub coords_checked: usize,
}

/// Checks analytic gradients of `build` against central finite differences
/// with the given absolute `step`, passing when every coordinate's relative
/// error is at most `tol`. `build` must be pure and deterministic.
pub fn grad_check<E, F>(
    build: F,
    params: &BTreeMap<String, Tensor<E>>,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    E: Elem,
    F: Fn(&mut Tape<E>, &BTreeMap<String, Var>) -> Result<Var> + Sync,
{
    if !(step > 0.0) || !(tol > 0.0) {
        return Err(Error::Config(format!("grad_check requires positive step and tol, got {step}, {tol}")));
    }

    // Analytic pass.
    let analytic = {
        let mut tape = Tape::<E>::new();
        let mut vars = BTreeMap::new();
        for (name, t) in params {
            vars.insert(name.clone(), tape.leaf(name, &t.clone().with_grad(true)));
        }
        let loss = build(&mut tape, &vars)?;
        if !tape.value(loss).item()?.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        tape.backward(loss)?
    };

    let eval = |p: &BTreeMap<String, Tensor<E>>| -> Result<f64> {
        let mut tape = Tape::<E>::new();
        let mut vars = BTreeMap::new();
        for (name, t) in p {
            vars.insert(name.clone(), tape.leaf(name, &t.clone().with_grad(false)));
        }
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item()?.to_f64())
    };

    // One flat job per coordinate so the finite differences can run data
    // parallel; each job perturbs its own copy of the parameter map.
    let coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, t)| (0..t.numel()).map(move |i| (name.clone(), i)))
        .collect();

    let errs: Vec<Result<(f64, f64)>> = par::map_slice(&coords, |(name, i)| {
        let mut p = params.clone();
        let base = p[name].data()[*i].to_f64();
        p.get_mut(name).unwrap().data_mut()[*i] = E::from_f64(base + step);
        let up = eval(&p)?;
        p.get_mut(name).unwrap().data_mut()[*i] = E::from_f64(base - step);
        let down = eval(&p)?;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[name].data()[*i].to_f64();
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
        Ok((abs, rel))
    });

    let mut per_param: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for ((name, _), res) in coords.iter().zip(errs) {
        let (abs, rel) = res?;
        let e = per_param.entry(name.as_str()).or_insert((0.0, 0.0));
        e.0 = e.0.max(rel);
        e.1 = e.1.max(abs);
    }

    let entries: Vec<GradCheckEntry> = per_param
        .into_iter()
        .map(|(name, (rel, abs))| GradCheckEntry { name: name.to_string(), max_rel_err: rel, max_abs_err: abs })
        .collect();
    let max_rel_err = entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { pass: max_rel_err <= tol, entries, max_rel_err, coords_checked: coords.len() })
}
