use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{ensure, Error, Result};

/// Compares the reverse-mode gradient of a scalar function with central
/// finite differences.
///
/// `forward` records the function of its input variable on the given tape
/// and returns the scalar output. The result is the largest
/// `|analytic - numeric| / max(1, |analytic| + |numeric|)` over components.
pub fn gradcheck<F>(forward: F, x: &Tensor<f64>, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    ensure!(epsilon > 0.0, "gradcheck: epsilon must be positive");
    let eval = |input: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(input);
        let out = forward(&mut tape, v)?;
        let y = tape.value(out).item()?;
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("gradcheck: forward produced {y}")));
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let v = tape.variable(x.clone());
    let out = forward(&mut tape, v)?;
    let y = tape.value(out).item()?;
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("gradcheck: forward produced {y}")));
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = orig - epsilon;
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes() {
        let x = Tensor::from_fn(&[8], |i| (i as f64 * 1.3).sin() * 2.0);
        let err = gradcheck(
            |t, v| {
                let sq = t.mul(v, v)?;
                t.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_fn(&[4], |i| i as f64);
        let err = gradcheck(|t, _| Ok(t.constant(Tensor::scalar(5.0))), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let x = Tensor::from_fn(&[2], |_| 1.0);
        let r = gradcheck(
            |t, v| {
                let s = t.sum(v)?;
                t.scale(s, f64::INFINITY)
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
