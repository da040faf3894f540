use super::{Graph, NnError, ParamStore, Var};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub n_checked: usize,
}

/// Compares the analytic gradient of every entry of every parameter in
/// `store` with the central difference `(f(w+h) - f(w-h)) / 2h`.
///
/// The error for one entry is `|a - n| / max(1, |a|, |n|)`: relative for
/// gradients above one in magnitude, absolute below. `loss_fn` must be
/// deterministic.
pub fn grad_check<F>(store: &mut ParamStore, h: f64, loss_fn: F) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Graph) -> Result<Var, NnError>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?
    };
    let eval = |s: &ParamStore| -> Result<f64, NnError> {
        let mut g = Graph::new(s);
        let loss = loss_fn(&mut g)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        n_checked: 0,
    };
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let n = store.get(&name)?.len();
        for i in 0..n {
            let orig = store.get(&name)?.data()[i];
            store.get_mut(&name)?.data_mut()[i] = orig + h;
            let plus = eval(store)?;
            store.get_mut(&name)?.data_mut()[i] = orig - h;
            let minus = eval(store)?;
            store.get_mut(&name)?.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(&name).map_or(0.0, |t| t.data()[i]);
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.n_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
