//! Central finite-difference checks of tape gradients.

use super::{Bindings, Graph, ParamStore, Result, Var};

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst: Option<GradEntry>,
    pub failures: Vec<GradEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failures.is_empty()
    }
}

/// Compares the backward-pass gradient of `loss` with respect to every
/// element of every trainable parameter against `(f(θ+h) − f(θ−h)) / 2h`.
/// Entries with relative error above `tol` are reported as failures.
pub fn check_gradients<F>(store: &ParamStore<f64>, h: f64, tol: f64, floor: f64, loss: F) -> Result<GradCheckReport>
where
    F: for<'g, 's> Fn(&Bindings<'g, 's, f64>) -> Result<Var<'g, f64>>,
{
    let analytic = {
        let g = Graph::new();
        let p = Bindings::new(&g, store);
        let l = loss(&p)?;
        g.backward(l)?;
        p.grads()
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let g = Graph::inference();
        let p = Bindings::new(&g, s);
        Ok(loss(&p)?.item())
    };
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let n = store.get(id).numel();
        for i in 0..n {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[id.index()].as_ref().map_or(0.0, |t| t.data()[i]);
            let rel_err = relative_error(a, numeric, floor);
            let entry = GradEntry { param: store.name(id).to_string(), index: i, analytic: a, numeric, rel_err };
            report.checked += 1;
            if report.worst.as_ref().is_none_or(|w| rel_err > w.rel_err) {
                report.worst = Some(entry.clone());
            }
            if rel_err > tol {
                report.failures.push(entry);
            }
        }
    }
    Ok(report)
}
