use super::{Tape, Tensor, TensorError, Var};
use alloc::vec::Vec;

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let numel = tape.data(out).len();
    if numel != 1 {
        return Err(TensorError::NotScalar { numel });
    }
    Ok(tape.data(out)[0])
}

/// Largest relative error between tape gradients and central differences
/// `(f(x+h) − f(x−h)) / 2h`, over every element of every input. The relative
/// error denominator is `max(|g|, |ĝ|, 1e-8)`.
pub fn gradient_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let inputs: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor {
            requires_grad: true,
            grad: None,
            ..t.clone()
        })
        .collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let mut worst = 0.0f64;
    let mut probe = inputs.clone();
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).ok_or(TensorError::MissingGrad { index: i })?;
        for (k, &g) in analytic.iter().enumerate() {
            let x = inputs[i].data[k];
            probe[i].data[k] = x + h;
            let up = eval(&f, &probe)?;
            probe[i].data[k] = x - h;
            let down = eval(&f, &probe)?;
            probe[i].data[k] = x;
            let numeric = (up - down) / (2.0 * h);
            let denom = g.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((g - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_is_exact() {
        let a = Tensor::vector(&[1.0, -2.0, 0.5]);
        let err = gradient_check(
            |t, v| {
                let s = t.scale(v[0], 3.0);
                Ok(t.sum_all(s))
            },
            &[a],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }
}
