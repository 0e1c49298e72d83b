use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest relative disagreement between reverse-mode gradients and central
/// differences of `f` at `point`.
///
/// The error at each coordinate is `|a - c| / max(1, |a|, |c|)`.
pub fn grad_check<F>(f: F, point: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::Config(format!("finite-difference step {step} outside (0, 1e-2]")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.variable(t)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().zip(point).map(|(&v, t)| grads.get_or_zeros(v, t.len())).collect();

    let eval = |p: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = p.iter().map(|t| tape.constant(t)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.scalar(out);
        if !v.is_finite() {
            return Err(Error::Degenerate { op: "grad_check", detail: "non-finite value at a perturbed point".into() });
        }
        Ok(v)
    };

    let mut work: Vec<Tensor<f64>> = point.to_vec();
    let mut worst = 0.0f64;
    for (ti, t) in point.iter().enumerate() {
        for j in 0..t.len() {
            let x = t.data()[j];
            work[ti].data_mut()[j] = x + step;
            let up = eval(&work)?;
            work[ti].data_mut()[j] = x - step;
            let down = eval(&work)?;
            work[ti].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[ti][j];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::vector(vec![3.0]);
        let err = grad_check(|t, v| t.mul(v[0], v[0]).and_then(|y| t.pick(y, 0)), &[x], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::vector(vec![3.0]);
        assert!(grad_check(|t, v| t.pick(v[0], 0), &[x.clone()], 0.0).is_err());
        assert!(grad_check(|t, v| t.pick(v[0], 0), &[x], 0.1).is_err());
    }

    #[test]
    fn non_finite_perturbation_is_degenerate() {
        let x = Tensor::vector(vec![0.0]);
        let err = grad_check(|t, v| Ok(t.ln(v[0])).and_then(|y| t.pick(y, 0)), &[x], 1e-5).unwrap_err();
        assert_eq!(err.category(), "degenerate");
    }
}
