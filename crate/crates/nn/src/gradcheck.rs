//! Central finite-difference oracle for checking reverse-mode gradients.
//!
//! The oracle only evaluates forward passes, so it shares no code path with
//! [`Graph::backward`](crate::Graph::backward).

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Mat, ParamId, ParamStore};

/// Gradients smaller than this are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            checked: 0,
            max_rel_error: 0.0,
            worst: String::new(),
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, label: impl FnOnce() -> String) {
        let err = rel_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", label());
        }
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Checks d(loss)/d(input) for every entry of every input matrix. `build`
/// receives the graph and the input leaves and returns the scalar loss.
pub fn check_inputs<F>(
    store: &ParamStore,
    inputs: &[Mat],
    step: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Mat]| -> Result<f64> {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.scalar(loss))
    };

    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport::new();
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for ((r, c), &x) in input.indexed_iter() {
            work[k][[r, c]] = x + step;
            let plus = eval(&work)?;
            work[k][[r, c]] = x - step;
            let minus = eval(&work)?;
            work[k][[r, c]] = x;
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grads.wrt(vars[k]).map(|m| m[[r, c]]).unwrap_or(0.0);
            report.record(analytic, numeric, || format!("input {k}[{r},{c}]"));
        }
    }
    Ok(report)
}

/// Checks d(loss)/d(parameter) at the given coordinates (all coordinates
/// when `coords` is `None`).
pub fn check_params<F>(
    store: &ParamStore,
    coords: Option<&[(ParamId, usize, usize)]>,
    step: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = build(&mut g)?;
    let grads = g.backward(loss)?;

    let all: Vec<(ParamId, usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = store
                .iter()
                .flat_map(|(id, _, v)| v.indexed_iter().map(move |((r, c), _)| (id, r, c)))
                .collect();
            &all
        }
    };

    let mut work = store.clone();
    let eval = |work: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(work);
        let loss = build(&mut g)?;
        Ok(g.scalar(loss))
    };

    let mut report = GradCheckReport::new();
    for &(id, r, c) in coords {
        let x = store.get(id)[[r, c]];
        work.get_mut(id)[[r, c]] = x + step;
        let plus = eval(&work)?;
        work.get_mut(id)[[r, c]] = x - step;
        let minus = eval(&work)?;
        work.get_mut(id)[[r, c]] = x;
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = grads.param(id).map(|m| m[[r, c]]).unwrap_or(0.0);
        report.record(analytic, numeric, || format!("{}[{r},{c}]", store.name(id)));
    }
    Ok(report)
}
