use super::{ParamSet, Tape, TensorError, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so that gradients which
    /// are zero up to rounding compare absolutely.
    pub floor: f64,
    /// Check only the first `n` entries of each parameter when set.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_entries: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst entry with its analytic and numeric values.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn param(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of a scalar program against central differences
/// for every trainable parameter in `params`.
pub fn grad_check<F, E>(
    params: &mut ParamSet,
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Tape, &ParamSet) -> Result<Var, E>,
    E: From<TensorError>,
{
    fn eval<F, E>(f: &mut F, params: &ParamSet) -> Result<f64, E>
    where
        F: FnMut(&mut Tape, &ParamSet) -> Result<Var, E>,
    {
        let mut tape = Tape::new();
        let loss = f(&mut tape, params)?;
        Ok(tape.scalar(loss))
    }
    let first = eval(&mut f, params)?;
    let second = eval(&mut f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second }.into());
    }

    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let grads = tape.backward(loss)?;

    let ids: Vec<_> = params.trainable().collect();
    let mut report = GradCheckReport {
        params: Vec::with_capacity(ids.len()),
        max_rel_error: 0.0,
        tolerance: opts.tolerance,
    };
    for id in ids {
        let n = params.get(id).len();
        let analytic = grads
            .get(id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let limit = opts.max_entries.map_or(n, |m| m.min(n));
        let mut check = ParamCheck {
            name: params.name(id).to_string(),
            entries: limit,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst: None,
        };
        for k in 0..limit {
            let orig = params.get(id).data()[k];
            params.get_mut(id).data_mut()[k] = orig + opts.step;
            let plus = eval(&mut f, params);
            params.get_mut(id).data_mut()[k] = orig - opts.step;
            let minus = eval(&mut f, params);
            params.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.step);
            let rel = relative_error(analytic[k], numeric, opts.floor);
            check.max_abs_error = check.max_abs_error.max((analytic[k] - numeric).abs());
            if rel > check.max_rel_error || check.worst.is_none() {
                check.max_rel_error = check.max_rel_error.max(rel);
                check.worst = Some((k, analytic[k], numeric));
            }
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.params.push(check);
    }
    Ok(report)
}
