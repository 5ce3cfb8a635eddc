use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference estimate of `df/dp` for every component of `params`.
///
/// `f` receives the full (perturbed) parameter list and must be
/// deterministic. Each component costs two evaluations.
pub fn finite_diff_gradient<F>(mut f: F, params: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!(
            "finite-difference step {h} must be positive"
        )));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut g = vec![0.0; params[t].len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let original = params[t].data()[i];
            work[t].data_mut()[i] = original + h;
            let plus = f(&work)?;
            work[t].data_mut()[i] = original - h;
            let minus = f(&work)?;
            work[t].data_mut()[i] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("finite-difference evaluation of parameter {t}[{i}]"),
                });
            }
            *gi = (plus - minus) / (2.0 * h);
        }
        grads.push(Tensor::new(params[t].shape().to_vec(), g)?);
    }
    Ok(grads)
}

/// Component-wise relative error `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_two_p() {
        let p = [Tensor::scalar(2.0)];
        let g = finite_diff_gradient(|ps| Ok(ps[0].item().powi(2)), &p, 1e-5).unwrap();
        assert!((g[0].item() - 4.0).abs() < 1e-8);
    }

    #[test]
    fn sum_has_unit_gradient() {
        let p = [Tensor::from_vec(vec![0.3, -1.2, 7.0])];
        let g = finite_diff_gradient(|ps| Ok(ps[0].data().iter().sum()), &p, 1e-5).unwrap();
        for v in g[0].data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_step_and_non_finite_values() {
        let p = [Tensor::scalar(1.0)];
        assert!(finite_diff_gradient(|_| Ok(0.0), &p, 0.0).is_err());
        assert!(matches!(
            finite_diff_gradient(|_| Ok(f64::NAN), &p, 1e-5),
            Err(Error::NonFinite { .. })
        ));
    }
}
