//! Central finite-difference checking of analytic gradients.
//!
//! Full Jacobians are probed only at tiny shapes; larger parameters are
//! probed on a random coordinate subset. Relative error is
//! |a - n| / max(|a|, |n|, 1e-8).

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

use super::{Graph, Var};

#[derive(Debug, Clone)]
pub struct CheckOpts {
    /// Central-difference step.
    pub step: f64,
    /// Per-parameter probe budget; all coordinates when the parameter is
    /// at most this large.
    pub max_probes: usize,
    pub seed: u64,
}

impl Default for CheckOpts {
    fn default() -> Self {
        CheckOpts {
            step: 1e-5,
            max_probes: 64,
            seed: 0,
        }
    }
}

/// Per-parameter comparison outcome.
#[derive(Debug, Clone)]
pub struct GradRow {
    pub name: String,
    pub max_abs: f64,
    pub max_rel: f64,
    pub probes: usize,
}

/// Comparison outcomes for every checked parameter.
#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub rows: Vec<GradRow>,
}

impl GradReport {
    pub fn max_rel(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.rows.iter().map(|r| r.max_abs).fold(0.0, f64::max)
    }

    pub fn passes(&self, rel_tol: f64) -> bool {
        self.rows.iter().all(|r| r.max_rel < rel_tol)
    }

    /// CSV rows: param name, max_abs, max_rel.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("param,max_abs,max_rel\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.3e},{:.3e}\n", r.name, r.max_abs, r.max_rel));
        }
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare an analytic gradient against central differences of `f` at `x`.
pub fn finite_diff_check(
    name: &str,
    f: &dyn Fn(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    opts: &CheckOpts,
) -> Result<GradRow> {
    if analytic.shape() != x.shape() {
        return Err(Error::Contract(format!(
            "analytic gradient shape {:?} != input shape {:?}",
            analytic.shape(),
            x.shape()
        )));
    }
    let coords = probe_coords(x.len(), opts.max_probes, opts.seed);
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut probe = x.clone();
    for &i in &coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + opts.step;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - opts.step;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::numeric(
                "finite_diff_check",
                format!("non-finite probe at coordinate {i}"),
            ));
        }
        let numeric = (hi - lo) / (2.0 * opts.step);
        let a = analytic.data()[i];
        max_abs = max_abs.max((a - numeric).abs());
        max_rel = max_rel.max(relative_error(a, numeric));
    }
    Ok(GradRow {
        name: name.to_string(),
        max_abs,
        max_rel,
        probes: coords.len(),
    })
}

/// Record `build` on a fresh graph, backprop from its scalar output, and
/// check the gradient with respect to the input leaf by finite differences.
pub fn check_op_gradient(
    name: &str,
    x: &Tensor<f64>,
    opts: &CheckOpts,
    build: impl Fn(&mut Graph<f64>, Var) -> Result<Var>,
) -> Result<GradRow> {
    let mut g = Graph::new();
    let input = g.leaf(x.clone());
    let out = build(&mut g, input)?;
    let grads = g.backward(out)?;
    let analytic = grads.wrt(input).clone();
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t.clone());
        let out = build(&mut g, v)?;
        Ok(g.value(out).data()[0])
    };
    finite_diff_check(name, &eval, x, &analytic, opts)
}

/// Check every parameter of a recorded forward pass against central
/// differences. `forward` must build a scalar output from bound parameters;
/// the store is restored to its original values before returning.
pub fn check_param_gradients(
    store: &mut crate::params::ParamStore<f64>,
    opts: &CheckOpts,
    forward: &dyn Fn(&mut Graph<f64>, &crate::params::ParamVars) -> Result<Var>,
) -> Result<GradReport> {
    let (analytic, _) = analytic_param_grads(store, forward)?;
    let ids: Vec<_> = store.ids().collect();
    let mut rows = Vec::with_capacity(ids.len());
    for (slot, id) in ids.iter().enumerate() {
        let coords = probe_coords(
            store.get(*id).len(),
            opts.max_probes,
            opts.seed ^ slot as u64,
        );
        let mut max_abs = 0.0f64;
        let mut max_rel = 0.0f64;
        for &coord in &coords {
            let numeric = central_difference(store, forward, *id, coord, opts.step)?;
            let a = analytic[slot].data()[coord];
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(relative_error(a, numeric));
        }
        rows.push(GradRow {
            name: store.name(*id).to_string(),
            max_abs,
            max_rel,
            probes: coords.len(),
        });
    }
    Ok(GradReport { rows })
}

/// Sampled variant for large models: probes `probes` random coordinates of
/// the flattened global parameter vector instead of every parameter.
pub fn check_sampled_param_gradients(
    store: &mut crate::params::ParamStore<f64>,
    probes: usize,
    opts: &CheckOpts,
    forward: &dyn Fn(&mut Graph<f64>, &crate::params::ParamVars) -> Result<Var>,
) -> Result<GradRow> {
    let (analytic, _) = analytic_param_grads(store, forward)?;
    let ids: Vec<_> = store.ids().collect();
    let sizes: Vec<usize> = ids.iter().map(|id| store.get(*id).len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = SplitMix64::new(opts.seed);
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < probes.min(total) {
        picked.insert((rng.next_u64() % total as u64) as usize);
    }
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    for flat in picked.iter().copied() {
        let mut rest = flat;
        let mut slot = 0;
        while rest >= sizes[slot] {
            rest -= sizes[slot];
            slot += 1;
        }
        let numeric = central_difference(store, forward, ids[slot], rest, opts.step)?;
        let a = analytic[slot].data()[rest];
        max_abs = max_abs.max((a - numeric).abs());
        max_rel = max_rel.max(relative_error(a, numeric));
    }
    Ok(GradRow {
        name: "sampled".to_string(),
        max_abs,
        max_rel,
        probes: picked.len(),
    })
}

fn analytic_param_grads(
    store: &crate::params::ParamStore<f64>,
    forward: &dyn Fn(&mut Graph<f64>, &crate::params::ParamVars) -> Result<Var>,
) -> Result<(Vec<Tensor<f64>>, f64)> {
    let mut g = Graph::new();
    let pv = crate::params::ParamVars::bind_all(&mut g, store);
    let out = forward(&mut g, &pv)?;
    if g.value(out).len() != 1 {
        return Err(Error::Contract(
            "parameter gradient check needs a scalar output".into(),
        ));
    }
    let value = g.value(out).data()[0];
    let grads = g.backward(out)?;
    let per_param = store
        .ids()
        .map(|id| grads.wrt(pv.var(id)).clone())
        .collect();
    Ok((per_param, value))
}

fn central_difference(
    store: &mut crate::params::ParamStore<f64>,
    forward: &dyn Fn(&mut Graph<f64>, &crate::params::ParamVars) -> Result<Var>,
    id: crate::params::ParamId,
    coord: usize,
    step: f64,
) -> Result<f64> {
    let eval = |store: &crate::params::ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let pv = crate::params::ParamVars::bind_all(&mut g, store);
        let out = forward(&mut g, &pv)?;
        Ok(g.value(out).data()[0])
    };
    let orig = store.get(id).data()[coord];
    store.get_mut(id).data_mut()[coord] = orig + step;
    let hi = eval(store)?;
    store.get_mut(id).data_mut()[coord] = orig - step;
    let lo = eval(store)?;
    store.get_mut(id).data_mut()[coord] = orig;
    if !hi.is_finite() || !lo.is_finite() {
        return Err(Error::numeric(
            "finite_diff_check",
            format!("non-finite probe at {} coordinate {coord}", store.name(id)),
        ));
    }
    Ok((hi - lo) / (2.0 * step))
}

fn probe_coords(len: usize, max_probes: usize, seed: u64) -> Vec<usize> {
    if len <= max_probes {
        return (0..len).collect();
    }
    let mut rng = SplitMix64::new(seed);
    let mut seen = std::collections::BTreeSet::new();
    while seen.len() < max_probes {
        seen.insert((rng.next_u64() % len as u64) as usize);
    }
    seen.into_iter().collect()
}
