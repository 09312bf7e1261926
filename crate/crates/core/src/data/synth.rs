use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::dataset::{Covariate, CovariateValues, Dataset, Provenance};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Continuous covariate `x_B = a·y_0 + τ·ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousCovariateSpec {
    pub slope: f64,
    pub noise: f64,
}

/// Isotropic Gaussian mixture with a class label covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub means: Vec<Vec<f64>>,
    pub sigma: f64,
    pub probs: Vec<f64>,
    pub continuous: Option<ContinuousCovariateSpec>,
}

impl MixtureSpec {
    /// Two equiprobable classes at `±(distance/2, 0, …)`.
    pub fn two_class(dims: usize, half_distance: f64, sigma: f64) -> Self {
        let mut a = vec![0.0; dims];
        a[0] = half_distance;
        let b = a.iter().map(|v| -v).collect();
        Self {
            means: vec![a, b],
            sigma,
            probs: vec![0.5, 0.5],
            continuous: None,
        }
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn dims(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.len() < 2 || self.means.len() != self.probs.len() {
            return Err(Error::Config("mixture needs ≥ 2 classes with one probability each".into()));
        }
        let p = self.dims();
        if p == 0 || self.means.iter().any(|m| m.len() != p) {
            return Err(Error::Config("mixture means must share a positive dimension".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("mixture sigma must be positive, got {}", self.sigma)));
        }
        if self.probs.iter().any(|&q| !(q >= 0.0)) || (self.probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("mixture probabilities must be non-negative and sum to 1".into()));
        }
        if let Some(c) = &self.continuous {
            if !(c.noise > 0.0) {
                return Err(Error::Config("continuous covariate noise must be positive".into()));
            }
        }
        Ok(())
    }

    /// `Φ(−‖μ₁−μ₂‖/(2σ))` for two equiprobable classes; `None` otherwise.
    pub fn bayes_error(&self) -> Option<f64> {
        if self.classes() != 2 || (self.probs[0] - self.probs[1]).abs() > 1e-12 {
            return None;
        }
        let dist = self.means[0]
            .iter()
            .zip(&self.means[1])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let phi = Normal::standard();
        Some(phi.cdf(-dist / (2.0 * self.sigma)))
    }
}

/// Draws `n` labelled samples; the label column is `label`, the optional
/// continuous covariate `xb`.
pub fn synth_conditional_mixture(spec: &MixtureSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Argument("sample count must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = WeightedIndex::new(&spec.probs).map_err(|e| Error::Config(e.to_string()))?;
    let p = spec.dims();
    let mut y = Vec::with_capacity(n * p);
    let mut labels = Vec::with_capacity(n);
    let mut xb = Vec::new();
    for _ in 0..n {
        let k = pick.sample(&mut rng);
        labels.push(k);
        let start = y.len();
        for &m in &spec.means[k] {
            let e: f64 = rng.sample(StandardNormal);
            y.push(m + spec.sigma * e);
        }
        if let Some(c) = &spec.continuous {
            let e: f64 = rng.sample(StandardNormal);
            xb.push(c.slope * y[start] + c.noise * e);
        }
    }
    let mut covariates = vec![Covariate {
        name: "label".into(),
        values: CovariateValues::Categorical {
            classes: spec.classes(),
            labels,
        },
    }];
    if spec.continuous.is_some() {
        covariates.push(Covariate {
            name: "xb".into(),
            values: CovariateValues::Continuous(xb),
        });
    }
    Dataset::new(
        Tensor::matrix(n, p, y),
        covariates,
        Provenance {
            source: "synthetic mixture".into(),
            seed: Some(seed),
            generator: Some(serde_json::to_value(spec).expect("plain data")),
            bayes_error: spec.bayes_error(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bayes_error_of_unit_separation() {
        let spec = MixtureSpec::two_class(2, 2.0, 1.0);
        assert!((spec.bayes_error().unwrap() - 0.02275).abs() < 1e-5);
        let ds = synth_conditional_mixture(&spec, 10, 3).unwrap();
        assert_eq!(ds.provenance.seed, Some(3));
        assert_eq!(ds.provenance.bayes_error, spec.bayes_error());
    }

    #[test]
    fn tiny_sigma_collapses_to_means() {
        let spec = MixtureSpec::two_class(3, 1.5, 1e-300);
        let ds = synth_conditional_mixture(&spec, 50, 1).unwrap();
        let (_, labels) = ds.labels("label").unwrap();
        for (i, &k) in labels.iter().enumerate() {
            for (a, b) in ds.y.row_slice(i).iter().zip(&spec.means[k]) {
                assert!((a - b).abs() < 1e-290);
            }
        }
    }

    #[test]
    fn class_frequencies_within_binomial_bounds() {
        let mut spec = MixtureSpec::two_class(2, 1.0, 1.0);
        spec.means.push(vec![0.0, 3.0]);
        spec.probs = vec![0.2, 0.3, 0.5];
        let n = 10_000;
        let ds = synth_conditional_mixture(&spec, n, 42).unwrap();
        let (_, labels) = ds.labels("label").unwrap();
        for (k, &q) in spec.probs.iter().enumerate() {
            let count = labels.iter().filter(|&&l| l == k).count() as f64;
            let sd = (n as f64 * q * (1.0 - q)).sqrt();
            assert!((count - n as f64 * q).abs() < 3.0 * sd, "class {k}: {count}");
        }
    }

    #[test]
    fn same_seed_same_data() {
        let mut spec = MixtureSpec::two_class(4, 1.0, 0.5);
        spec.continuous = Some(ContinuousCovariateSpec { slope: 2.0, noise: 0.1 });
        let a = synth_conditional_mixture(&spec, 30, 9).unwrap();
        let b = synth_conditional_mixture(&spec, 30, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.covariates.len(), 2);
    }
}
