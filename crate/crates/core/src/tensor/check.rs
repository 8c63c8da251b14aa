use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function with central
/// differences. Returns the largest
/// `|analytic - numeric| / max(1e-3, |analytic| + |numeric|)` over all
/// coordinates of all parameters.
pub fn grad_check<F>(mut f: F, params: &mut [Tensor], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut eval = |params: &[Tensor], with_grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss).item();
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .map(|&v| tape.grad(v).ok_or_else(|| Error::Autodiff("missing gradient".into())))
            .collect::<Result<_>>()?;
        Ok((value, grads))
    };
    let (_, analytic) = eval(params, true)?;
    let mut worst = 0.0f64;
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            params[p].data_mut()[i] = orig + eps;
            let (up, _) = eval(params, false)?;
            params[p].data_mut()[i] = orig - eps;
            let (down, _) = eval(params, false)?;
            params[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[p].data()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let mut ps = vec![Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap()];
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                let s = t.scale(sq, 3.0);
                Ok(t.sum(s))
            },
            &mut ps,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
        assert_eq!(ps[0].data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu evaluated exactly at its kink has a one-sided analytic
        // gradient that central differences split in half
        let mut ps = vec![Tensor::new(&[1], vec![0.0]).unwrap()];
        let err = grad_check(
            |t, v| {
                let r = t.relu(v[0]);
                Ok(t.sum(r))
            },
            &mut ps,
            1e-6,
        )
        .unwrap();
        assert!(err > 0.1);
    }
}
