use super::{ParamId, ParamStore, Result, Tape, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares tape gradients against central finite differences over every
/// coordinate of every parameter in `params`.
///
/// The relative error of one coordinate is
/// `|g_auto - g_fd| / max(1e-8, |g_auto| + |g_fd|)`.
pub fn grad_check<F>(build_loss: F, params: &mut ParamStore, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    if !(step > 0.0 && step <= 1e-3) {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("step {step} outside (0, 1e-3]"),
        });
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_params(store);
        let loss = build_loss(&mut tape)?;
        Ok(tape.scalar(loss))
    };

    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    let grads = {
        let mut tape = Tape::with_params(params);
        let loss = build_loss(&mut tape)?;
        tape.backward(loss)?
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let n = params.get(id).len();
        let auto = grads.dense(id, n).unwrap_or_else(|| vec![0.0; n]);
        for (i, &ga) in auto.iter().enumerate() {
            let orig = params.get(id).values[i];
            params.get_mut(id).values[i] = orig + step;
            let plus = eval(params);
            params.get_mut(id).values[i] = orig - step;
            let minus = eval(params);
            params.get_mut(id).values[i] = orig;
            let fd = (plus? - minus?) / (2.0 * step);
            let rel = (ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-8);
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((params.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}
