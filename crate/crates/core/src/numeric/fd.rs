use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Central-difference gradient `(f(p + h·e) − f(p − h·e)) / 2h` for every
/// coordinate of every parameter tensor.
///
/// Used as an independent oracle for the tape's adjoints.
pub fn finite_diff_gradient<F>(f: F, params: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Argument(format!("step must be positive, got {step}")));
    }
    let mut probe = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut g = Tensor::zeros_like(&params[t]);
        for i in 0..params[t].len() {
            let orig = params[t].data()[i];
            probe[t].data_mut()[i] = orig + step;
            let up = eval_finite(&f, &probe, t, i)?;
            probe[t].data_mut()[i] = orig - step;
            let down = eval_finite(&f, &probe, t, i)?;
            probe[t].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

fn eval_finite<F>(f: &F, probe: &[Tensor], t: usize, i: usize) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let v = f(probe)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Evaluation(format!(
            "non-finite value {v} when probing parameter {t} coordinate {i}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::special::log_std_normal;

    #[test]
    fn square_at_three() {
        let g = finite_diff_gradient(|p| Ok(p[0].item().powi(2)), &[Tensor::scalar(3.0)], 1e-5)
            .unwrap();
        assert!((g[0].item() - 6.0).abs() < 1e-9);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_diff_gradient(|_| Ok(4.2), &[Tensor::row(vec![1.0, -3.0])], 1e-5).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn std_normal_gradient_is_minus_z() {
        let g = finite_diff_gradient(
            |p| Ok(log_std_normal(p[0].data())),
            &[Tensor::row(vec![1.0, -1.0])],
            1e-5,
        )
        .unwrap();
        assert!((g[0].data()[0] + 1.0).abs() < 1e-8);
        assert!((g[0].data()[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        let r = finite_diff_gradient(|p| Ok(p[0].item().ln()), &[Tensor::scalar(0.0)], 1e-5);
        assert!(matches!(r, Err(Error::Evaluation(_))));
        assert!(finite_diff_gradient(|_| Ok(0.0), &[], 0.0).is_err());
    }
}
