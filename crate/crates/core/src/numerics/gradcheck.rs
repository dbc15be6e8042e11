//! Central finite-difference checks of tape gradients, run in `f64`.

use crate::error::Result;
use crate::model::params::{ParamId, ParamStore};
use crate::numerics::{Graph, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-3;

/// Denominator floor for [`relative_error`]; below this magnitude both
/// gradients are treated as zero.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub label: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passes(&self, tol: f64) -> bool {
        !self.entries.is_empty() && self.max_rel_error() < tol
    }

    fn push(&mut self, label: String, analytic: f64, numeric: f64) {
        let rel_error = relative_error(analytic, numeric);
        self.entries.push(GradCheckEntry { label, analytic, numeric, rel_error });
    }
}

fn eval_scalar(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).item()
}

/// Checks d loss / d input for every element of every input tensor.
pub fn check_inputs<L>(inputs: &[Tensor<f64>], h: f64, loss: L) -> Result<GradCheckReport>
where
    L: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let run = |ts: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.variable(t.clone())).collect();
        let out = loss(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let (g, vars, out) = run(inputs)?;
    let grads = g.backward(out)?;
    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        for e in 0..t.numel() {
            let x0 = t.data()[e];
            probe[i].data_mut()[e] = x0 + h;
            let (gp, _, lp) = run(&probe)?;
            probe[i].data_mut()[e] = x0 - h;
            let (gm, _, lm) = run(&probe)?;
            probe[i].data_mut()[e] = x0;
            let numeric = (eval_scalar(&gp, lp) - eval_scalar(&gm, lm)) / (2.0 * h);
            report.push(format!("input{i}[{e}]"), analytic[e], numeric);
        }
    }
    Ok(report)
}

/// Checks d loss / d parameter at the sampled `(param, element)` picks.
/// The store is perturbed in place and restored exactly.
pub fn check_params<L>(
    store: &mut ParamStore<f64>,
    picks: &[(ParamId, usize)],
    h: f64,
    loss: L,
) -> Result<GradCheckReport>
where
    L: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, store)?;
        Ok(eval_scalar(&g, out))
    };
    store.clear_grads();
    {
        let mut g = Graph::new();
        let out = loss(&mut g, store)?;
        g.backward(out)?.write_params(store);
    }
    let mut report = GradCheckReport::default();
    for &(id, e) in picks {
        let analytic = store.get(id).grad().map_or(0.0, |g| g[e]);
        let x0 = store.get(id).data()[e];
        store.get_mut(id).data_mut()[e] = x0 + h;
        let lp = eval(store)?;
        store.get_mut(id).data_mut()[e] = x0 - h;
        let lm = eval(store)?;
        store.get_mut(id).data_mut()[e] = x0;
        let numeric = (lp - lm) / (2.0 * h);
        report.push(format!("{}[{e}]", store.name(id)), analytic, numeric);
    }
    store.clear_grads();
    Ok(report)
}
