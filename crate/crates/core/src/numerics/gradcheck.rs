use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{Graph, Var};
use super::params::ParamSet;
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Floor in the relative-error denominator. Gradients smaller than this are
/// compared in absolute terms, where finite-difference round-off lives.
pub const REL_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub probes_per_tensor: usize,
    pub h: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { probes_per_tensor: 6, h: 1e-3, tol: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradEntry {
    pub name: String,
    pub probes: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub tol: f64,
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn max_abs_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_abs_err).fold(0.0, f64::max)
    }
}

/// `|a − n| / max(|a|, |n|, ε)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_EPS)
}

fn eval<T: Scalar, F>(loss_fn: &F, params: &ParamSet<T>) -> Result<T>
where
    F: Fn(&mut Graph<T>, &ParamSet<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    Ok(g.value(loss).item())
}

/// Compares tape gradients against central finite differences
/// `(f(θ+h) − f(θ−h)) / 2h` at randomly chosen coordinates of every
/// parameter tensor.
///
/// The closure builds the scalar loss on a fresh tape, registering the
/// parameters it uses through [`Graph::param`].
pub fn grad_check<T: Scalar, F>(loss_fn: F, params: &ParamSet<T>, cfg: &GradCheckConfig) -> Result<GradReport>
where
    F: Fn(&mut Graph<T>, &ParamSet<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    let base = g.value(loss).item();
    let again = eval(&loss_fn, params)?;
    if base.as_f64().to_bits() != again.as_f64().to_bits() {
        return Err(Error::Determinism(format!("two forward passes gave {base} and {again}")));
    }
    if !base.is_finite() {
        return Err(Error::Numeric(format!("loss is {base}")));
    }
    let analytic = g.backward(loss)?.params();
    let h = T::lit(cfg.h);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::with_capacity(params.len());
    let mut probe = params.clone();
    for (name, t) in params.iter() {
        let count = cfg.probes_per_tensor.min(t.numel());
        let coords = sample(&mut rng, t.numel(), count).into_vec();
        let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
        for c in coords {
            let orig = t.data()[c];
            probe.get_mut(name).unwrap().data_mut()[c] = orig + h;
            let plus = eval(&loss_fn, &probe)?;
            probe.get_mut(name).unwrap().data_mut()[c] = orig - h;
            let minus = eval(&loss_fn, &probe)?;
            probe.get_mut(name).unwrap().data_mut()[c] = orig;
            let numeric = (plus.as_f64() - minus.as_f64()) / (2.0 * cfg.h);
            let a = analytic.get(name).map_or(0.0, |g| g.data()[c].as_f64());
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(relative_error(a, numeric));
        }
        entries.push(GradEntry {
            name: name.to_string(),
            probes: count,
            max_abs_err: max_abs,
            max_rel_err: max_rel,
            pass: max_rel < cfg.tol,
        });
    }
    Ok(GradReport { tol: cfg.tol, entries })
}
