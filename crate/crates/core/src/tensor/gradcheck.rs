//! Central-difference gradient verification.

use super::{Real, Result, Tape, Tensor, TensorError};

/// Compares the tape's analytic gradient of a scalar function with central
/// differences.
///
/// `f` builds the function on a fresh tape from the leaf standing for `x`.
/// Returns `max_i |analytic_i − numeric_i| / max(1, |numeric_i|)`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<T>
where
    T: Real,
    F: Fn(&mut Tape<T>, super::Var) -> Result<super::Var>,
{
    let eval = |x: Tensor<T>| -> Result<T> {
        let mut tape = Tape::new();
        let v = tape.leaf(x, false);
        let out = f(&mut tape, v)?;
        let val = tape.value(out);
        if val.len() != 1 {
            return Err(TensorError::NotScalar(val.shape().to_vec()));
        }
        Ok(val.item())
    };

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let out = f(&mut tape, leaf)?;
    tape.backward(out)?;
    let analytic = tape.grad(leaf).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); x.len()]);

    let two = T::of(2.0);
    let mut worst = T::zero();
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (two * h);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(T::one());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_gradient() {
        let x = Tensor::<f64>::from_f64(&[4], &[0.3, -1.2, 5.0, 2.2]).unwrap();
        let err = finite_diff_check(|t, v| t.sum(v), &x, 1e-4).unwrap();
        assert!(err < 1e-10);
    }

    #[test]
    fn sum_of_squares() {
        let x = Tensor::<f64>::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let err = finite_diff_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                t.sum(sq)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn relu_away_from_kink() {
        let x = Tensor::<f64>::from_f64(&[4], &[0.5, -0.7, 1.3, -2.0]).unwrap();
        let err = finite_diff_check(
            |t, v| {
                let r = t.relu(v)?;
                let sq = t.mul(r, v)?;
                t.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);
    }
}
