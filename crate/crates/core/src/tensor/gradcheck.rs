//! Central finite-difference check of reverse-mode gradients (f64 only).

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` per input.
    pub relative_errors: Vec<f64>,
    /// Number of coordinates probed per input.
    pub probed: Vec<usize>,
    /// The same ratio over every probed coordinate of every input.
    pub overall_relative_error: f64,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compare gradients of the scalar built by `f` against central differences
/// with step `h`. At most `max_probes` coordinates per input are perturbed
/// (evenly strided), which keeps whole-network checks tractable.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, max_probes: usize, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values.iter().map(|v| tape.param(v.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars = inputs.iter().map(|v| tape.param(v.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut probed = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    let (mut all_diff2, mut all_a2, mut all_n2) = (0.0, 0.0, 0.0);
    for (k, var) in vars.iter().enumerate() {
        let n = inputs[k].len();
        let analytic = grads.get(*var).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let stride = n.div_ceil(max_probes.max(1)).max(1);
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        let mut count = 0;
        for i in (0..n).step_by(stride) {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            diff2 += (analytic[i] - numeric).powi(2);
            a2 += analytic[i].powi(2);
            n2 += numeric.powi(2);
            count += 1;
        }
        relative_errors.push(ratio(diff2, a2, n2));
        probed.push(count);
        all_diff2 += diff2;
        all_a2 += a2;
        all_n2 += n2;
    }
    Ok(GradCheckReport {
        relative_errors,
        probed,
        overall_relative_error: ratio(all_diff2, all_a2, all_n2),
    })
}

fn ratio(diff2: f64, a2: f64, n2: f64) -> f64 {
    let denom = a2.sqrt().max(n2.sqrt());
    if denom < 1e-12 {
        diff2.sqrt()
    } else {
        diff2.sqrt() / denom
    }
}
