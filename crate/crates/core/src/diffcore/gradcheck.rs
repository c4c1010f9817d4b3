use super::{Graph, ParamStore, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|numeric - analytic| / max(1, |analytic|)` over all coordinates.
    pub max_rel_error: f64,
    /// Parameter name and flat index where the largest error occurred.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares [`Graph::backward`] against central differences
/// `(f(p + h e) - f(p - h e)) / 2h` for every coordinate of every parameter.
///
/// `build` records the scalar loss on a fresh graph from the given
/// parameters. A loss that touches no parameter is treated as having an
/// all-zero analytic gradient.
pub fn finite_diff_check<E, F>(params: &ParamStore<f64>, h: f64, build: F) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, E>,
{
    let eval = |p: &ParamStore<f64>| -> Result<f64, E> {
        let mut g = Graph::new();
        let loss = build(&mut g, p)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let first = g.value(loss).item();
    let analytic = match g.backward(loss, params) {
        Ok(grads) => grads.into_vec(),
        Err(TensorError::Disconnected) => params
            .iter()
            .map(|p| super::Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect(),
        Err(e) => return Err(e.into()),
    };
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second }.into());
    }

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for id in params.ids() {
        let n = params.get(id).value.len();
        for j in 0..n {
            let orig = params.get(id).value.data()[j];
            work.value_mut(id).data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work.value_mut(id).data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work.value_mut(id).data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let exact = analytic[id.index()].data()[j];
            let rel = (numeric - exact).abs() / exact.abs().max(1.0);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((params.get(id).name.clone(), j));
            }
        }
    }
    Ok(report)
}
