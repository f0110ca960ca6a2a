use crate::error::{Error, Result};
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::Tensor;

/// Worst component-wise relative error between the tape gradient of a
/// scalar function and central finite differences `(f(x+h) - f(x-h)) / 2h`.
///
/// The relative error of a component uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}

/// [`grad_check`] over several inputs at once; every component of every
/// input is perturbed.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_against(f, xs, step, |d| d(step))
}

/// [`grad_check_many`] with the numeric derivative Richardson-extrapolated
/// from central differences at `step`, `step / 2` and `step / 4`, which
/// cancels the `h^2` and `h^4` error terms.
///
/// Plain central differences cannot resolve small gradient components of a
/// curved function: a step small enough to make the `O(h^2)` term
/// negligible lets rounding dominate instead.
pub fn grad_check_extrapolated<F>(f: F, xs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_against(f, xs, step, |d| {
        let (d1, d2, d4) = (d(step)?, d(step / 2.0)?, d(step / 4.0)?);
        let r1 = (4.0 * d2 - d1) / 3.0;
        let r2 = (4.0 * d4 - d2) / 3.0;
        Ok((16.0 * r2 - r1) / 15.0)
    })
}

fn check_against<F, N>(f: F, xs: &[Tensor], step: f64, numeric: N) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    N: Fn(&mut dyn FnMut(f64) -> Result<f64>) -> Result<f64>,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::Contract(format!("finite-difference step {step} outside (0, 1e-2]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf gradient populated"))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item())
    };

    let mut inputs = xs.to_vec();
    let mut worst = 0.0f64;
    for (which, grad) in analytic.iter().enumerate() {
        for j in 0..inputs[which].numel() {
            let orig = inputs[which].data()[j];
            let mut central = |h: f64| -> Result<f64> {
                inputs[which].data_mut()[j] = orig + h;
                let plus = eval(&inputs)?;
                inputs[which].data_mut()[j] = orig - h;
                let minus = eval(&inputs)?;
                inputs[which].data_mut()[j] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let num = numeric(&mut central)?;
            let a = grad.data()[j];
            let denom = a.abs().max(num.abs()).max(1e-8);
            worst = worst.max((a - num).abs() / denom);
        }
    }
    Ok(worst)
}
