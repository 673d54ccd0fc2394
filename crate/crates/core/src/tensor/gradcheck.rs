use super::{Tape, Tensor, TensorError, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares tape gradients of the scalar `f(leaves)` against central
/// differences `(f(x+h) - f(x-h)) / 2h`, entry by entry.
///
/// Returns the maximum over all entries of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F, E>(f: F, leaves: &[Tensor], h: f64) -> std::result::Result<f64, E>
where
    F: Fn(&Tape<'_>, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |inputs: &[Tensor]| -> std::result::Result<f64, E> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = tape.scalar(out);
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" }.into());
        }
        Ok(v)
    };

    let tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(vars[li]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; leaf.len()]);
        for (e, &a) in analytic.iter().enumerate() {
            let x0 = leaf.values()[e];
            probe[li].values_mut()[e] = x0 + h;
            let up = eval(&probe)?;
            probe[li].values_mut()[e] = x0 - h;
            let down = eval(&probe)?;
            probe[li].values_mut()[e] = x0;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

pub fn grad_check_default<F, E>(f: F, leaves: &[Tensor]) -> std::result::Result<f64, E>
where
    F: Fn(&Tape<'_>, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    grad_check(f, leaves, DEFAULT_STEP)
}

/// Like [`grad_check`] but differentiates with respect to the parameter slice
/// the tape is built over. At most `max_entries` evenly spaced entries of each
/// parameter are probed (all of them when the tensor is smaller).
pub fn grad_check_params<F, E>(f: F, params: &[Tensor], h: f64, max_entries: usize) -> std::result::Result<f64, E>
where
    F: Fn(&Tape<'_>) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let tape = Tape::with_params(params);
    let out = f(&tape)?;
    let grads = tape.backward(out)?;

    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let n = p.len();
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        for e in (0..n).step_by(stride) {
            let a = grads.param(pi).map_or(0.0, |g| g[e]);
            let x0 = p.values()[e];
            probe[pi].values_mut()[e] = x0 + h;
            let up = {
                let t = Tape::with_params(&probe);
                let o = f(&t)?;
                t.scalar(o)
            };
            probe[pi].values_mut()[e] = x0 - h;
            let down = {
                let t = Tape::with_params(&probe);
                let o = f(&t)?;
                t.scalar(o)
            };
            probe[pi].values_mut()[e] = x0;
            worst = worst.max(relative_error(a, (up - down) / (2.0 * h)));
        }
    }
    Ok(worst)
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}
