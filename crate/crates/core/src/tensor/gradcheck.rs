use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_GRAD_CHECK_STEP: f64 = 1e-3;

/// Outcome of [`grad_check`]. `worst` is `(input index, component)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub components: usize,
}

/// Compares tape gradients of `f` with central differences
/// `(f(x + h) - f(x - h)) / 2h` over every component of every input.
///
/// The error per component is `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::Contract("grad_check needs a scalar function".into()));
        }
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec))
        .collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, components: 0 };
    let mut xs = inputs.to_vec();
    for (a, x) in inputs.iter().enumerate() {
        for c in 0..x.numel() {
            let orig = x.data()[c];
            xs[a].data_mut()[c] = orig + h;
            let fp = eval(&xs)?;
            xs[a].data_mut()[c] = orig - h;
            let fm = eval(&xs)?;
            xs[a].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let an = analytic[a][c];
            let rel = (an - numeric).abs() / numeric.abs().max(1e-8);
            report.components += 1;
            if rel > report.max_rel_error {
                report = GradCheckReport { max_rel_error: rel, worst: (a, c), analytic: an, numeric, ..report };
            }
        }
    }
    Ok(report)
}
