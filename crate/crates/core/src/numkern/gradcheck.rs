use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central
/// differences, one coordinate at a time.
///
/// Returns `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
/// `f` receives a fresh graph and the input registered as a parameter.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Contract(format!("grad_check step {h} outside [1e-7, 1e-3]")));
    }
    let eval = |input: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.param(input);
        let out = f(&mut g, xv)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    let analytic = grads.get_or_zeros(xv, x.shape());

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fp = eval(plus)?;
        let fm = eval(minus)?;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if !err.is_finite() {
            return Err(Error::NonFinite {
                context: format!("grad_check coordinate {i}"),
            });
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

fn scalar_of(g: &Graph, out: Var) -> Result<f64> {
    let value = g.value(out);
    if value.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap().reshape(vec![1, 2]).unwrap();
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_bad_step_and_vector_output() {
        let x = Tensor::zeros(vec![1, 2]);
        assert!(grad_check(|g, x| Ok(g.sum(x)), &x, 1.0).is_err());
        assert!(grad_check(|g, x| Ok(g.relu(x)), &x, 1e-5).is_err());
    }
}
