//! Central-difference verification of analytic gradients (64-bit only).

use rand::seq::index::sample;

use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use super::{rng, NumericsError, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Check at most this many randomly chosen elements per parameter.
    pub max_per_param: Option<usize>,
    /// Restrict the check to these parameters (all when `None`).
    pub params: Option<Vec<ParamId>>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_per_param: None,
            params: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<GradCheckEntry>,
    pub checked: usize,
}

fn eval<F, E>(f: &F, store: &ParamStore<f64>) -> Result<f64, E>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let v = g.scalar(out);
    if !v.is_finite() {
        return Err(NumericsError::NonFinite("grad_check objective".into()).into());
    }
    Ok(v)
}

/// Max over checked elements of
/// `|analytic − central| / max(|analytic|, |central|, 1e-8)`.
pub fn grad_check<F, E>(
    store: &mut ParamStore<f64>,
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.backward(out)?;
    let grads = g.param_grads(store.len());

    let ids: Vec<ParamId> = opts.params.clone().unwrap_or_else(|| store.ids().collect());
    let mut rng = rng::stream(opts.seed, 0x6772_6164);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for id in ids {
        let numel = store.get(id).value.numel();
        let indices: Vec<usize> = match opts.max_per_param {
            Some(k) if k < numel => sample(&mut rng, numel, k).into_vec(),
            _ => (0..numel).collect(),
        };
        for idx in indices {
            let analytic = grads[id.0].as_ref().map_or(0.0, |t| t.data()[idx]);
            let orig = store.get(id).value.data()[idx];
            store.get_mut(id).value.data_mut()[idx] = orig + opts.h;
            let plus = eval(&f, store);
            store.get_mut(id).value.data_mut()[idx] = orig - opts.h;
            let minus = eval(&f, store);
            store.get_mut(id).value.data_mut()[idx] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel_err = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if rel_err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel_err);
                if rel_err >= report.max_rel_err {
                    report.worst = Some(GradCheckEntry {
                        param: store.get(id).name.clone(),
                        index: idx,
                        analytic,
                        numeric,
                        rel_err,
                    });
                }
            }
        }
    }
    Ok(report)
}
