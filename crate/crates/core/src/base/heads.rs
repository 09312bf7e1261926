use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{GradTape, Tensor, Var, LN_2PI};

/// Multinomial-logistic likelihood over `classes` labels; the last class has
/// its logit pinned to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalHead {
    pub classes: usize,
    /// `1 × (K−1)`.
    pub intercept: Tensor,
    /// `(K−1) × d`.
    pub weight: Tensor,
    /// Intercepts are held at zero unless freed.
    pub free_intercepts: bool,
    pub lambda: f64,
}

impl CategoricalHead {
    pub fn new(classes: usize, width: usize, lambda: f64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("categorical head needs ≥ 2 classes, got {classes}")));
        }
        let head = Self {
            classes,
            intercept: Tensor::zeros(1, classes - 1),
            weight: Tensor::zeros(classes - 1, width.max(1)),
            free_intercepts: false,
            lambda,
        };
        if width == 0 {
            return Err(Error::Config("head width must be positive".into()));
        }
        head.validate()?;
        Ok(head)
    }

    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if self.classes < 2
            || self.intercept.dims() != (1, self.classes - 1)
            || self.weight.rows() != self.classes - 1
        {
            return Err(Error::Config("categorical head parameter shapes are inconsistent".into()));
        }
        Ok(())
    }

    /// Logits of all `K` classes for one latent vector.
    pub fn logits(&self, zp: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = (0..self.classes - 1)
            .map(|k| {
                self.intercept.data()[k]
                    + self.weight.row_slice(k).iter().zip(zp).map(|(w, z)| w * z).sum::<f64>()
            })
            .collect();
        out.push(0.0);
        out
    }
}

/// Linear-Gaussian likelihood `x = β₀ + β₁ zP + ε`, `ε ~ N(0, diag β₂)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianHead {
    /// `1 × m`.
    pub intercept: Tensor,
    /// `m × d`.
    pub loading: Tensor,
    /// `log β₂`, `1 × m`.
    pub log_var: Tensor,
    pub learn_variance: bool,
    pub lambda: f64,
}

impl LinearGaussianHead {
    pub fn new(outputs: usize, width: usize, lambda: f64) -> Result<Self> {
        if outputs == 0 || width == 0 {
            return Err(Error::Config("linear-gaussian head needs positive widths".into()));
        }
        let head = Self {
            intercept: Tensor::zeros(1, outputs),
            loading: Tensor::zeros(outputs, width),
            log_var: Tensor::zeros(1, outputs),
            learn_variance: true,
            lambda,
        };
        head.validate()?;
        Ok(head)
    }

    /// Pins every noise variance to `variance`.
    pub fn pin_variance(&mut self, variance: f64) -> Result<()> {
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(Error::Config(format!("noise variance must be positive, got {variance}")));
        }
        self.log_var = Tensor::full(1, self.outputs(), variance.ln());
        self.learn_variance = false;
        Ok(())
    }

    pub fn outputs(&self) -> usize {
        self.intercept.cols()
    }

    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        let m = self.outputs();
        if self.loading.rows() != m || self.log_var.dims() != (1, m) {
            return Err(Error::Config("linear-gaussian head parameter shapes are inconsistent".into()));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("tempering λ must be positive, got {lambda}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Categorical,
    LinearGaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PredictiveHead {
    Categorical(CategoricalHead),
    LinearGaussian(LinearGaussianHead),
}

/// Observed covariate for one sample and one head.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadObs {
    /// 0-based class index.
    Class(usize),
    Values(Vec<f64>),
}

/// Observed covariates of a batch for one head.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadTargets {
    Classes(Vec<usize>),
    /// `n × m`.
    Values(Tensor),
}

impl HeadTargets {
    pub fn len(&self) -> usize {
        match self {
            HeadTargets::Classes(c) => c.len(),
            HeadTargets::Values(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> HeadTargets {
        match self {
            HeadTargets::Classes(c) => HeadTargets::Classes(rows.iter().map(|&i| c[i]).collect()),
            HeadTargets::Values(t) => HeadTargets::Values(t.select_rows(rows)),
        }
    }

    pub fn range(&self, range: std::ops::Range<usize>) -> HeadTargets {
        match self {
            HeadTargets::Classes(c) => HeadTargets::Classes(c[range].to_vec()),
            HeadTargets::Values(t) => HeadTargets::Values(t.row_range(range.start, range.end)),
        }
    }

    pub fn obs(&self, i: usize) -> HeadObs {
        match self {
            HeadTargets::Classes(c) => HeadObs::Class(c[i]),
            HeadTargets::Values(t) => HeadObs::Values(t.row_slice(i).to_vec()),
        }
    }

    pub fn from_obs(obs: &[HeadObs]) -> Result<HeadTargets> {
        match obs.first() {
            None => Err(Error::Argument("no observations".into())),
            Some(HeadObs::Class(_)) => obs
                .iter()
                .map(|o| match o {
                    HeadObs::Class(k) => Ok(*k),
                    HeadObs::Values(_) => Err(Error::Argument("mixed observation kinds".into())),
                })
                .collect::<Result<Vec<_>>>()
                .map(HeadTargets::Classes),
            Some(HeadObs::Values(_)) => {
                let rows = obs
                    .iter()
                    .map(|o| match o {
                        HeadObs::Values(v) => Ok(v.clone()),
                        HeadObs::Class(_) => Err(Error::Argument("mixed observation kinds".into())),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(HeadTargets::Values(Tensor::from_rows(&rows)?))
            }
        }
    }
}

impl PredictiveHead {
    pub fn kind(&self) -> HeadKind {
        match self {
            PredictiveHead::Categorical(_) => HeadKind::Categorical,
            PredictiveHead::LinearGaussian(_) => HeadKind::LinearGaussian,
        }
    }

    /// Width `d` of the latent block the head reads.
    pub fn width(&self) -> usize {
        match self {
            PredictiveHead::Categorical(h) => h.weight.cols(),
            PredictiveHead::LinearGaussian(h) => h.loading.cols(),
        }
    }

    pub fn lambda(&self) -> f64 {
        match self {
            PredictiveHead::Categorical(h) => h.lambda,
            PredictiveHead::LinearGaussian(h) => h.lambda,
        }
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        check_lambda(lambda)?;
        match self {
            PredictiveHead::Categorical(h) => h.lambda = lambda,
            PredictiveHead::LinearGaussian(h) => h.lambda = lambda,
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PredictiveHead::Categorical(h) => h.validate(),
            PredictiveHead::LinearGaussian(h) => h.validate(),
        }
    }

    /// Whether the marginal of `x` needs Monte-Carlo draws.
    pub fn needs_mc(&self) -> bool {
        match self {
            PredictiveHead::Categorical(_) => true,
            PredictiveHead::LinearGaussian(h) => h.lambda != 1.0,
        }
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            PredictiveHead::Categorical(h) => vec![("intercept", &h.intercept), ("weight", &h.weight)],
            PredictiveHead::LinearGaussian(h) => vec![
                ("intercept", &h.intercept),
                ("loading", &h.loading),
                ("log_var", &h.log_var),
            ],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            PredictiveHead::Categorical(h) => vec![&mut h.intercept, &mut h.weight],
            PredictiveHead::LinearGaussian(h) => {
                vec![&mut h.intercept, &mut h.loading, &mut h.log_var]
            }
        }
    }

    /// Which of [`named_params`](Self::named_params) receive gradient updates.
    pub fn trainable(&self) -> Vec<bool> {
        match self {
            PredictiveHead::Categorical(h) => vec![h.free_intercepts, true],
            PredictiveHead::LinearGaussian(h) => vec![true, true, h.learn_variance],
        }
    }

    pub fn check_obs(&self, obs: &HeadObs) -> Result<()> {
        match (self, obs) {
            (PredictiveHead::Categorical(h), HeadObs::Class(k)) if *k < h.classes => Ok(()),
            (PredictiveHead::Categorical(h), HeadObs::Class(k)) => Err(Error::Argument(format!(
                "class label {k} out of range for {} classes",
                h.classes
            ))),
            (PredictiveHead::LinearGaussian(h), HeadObs::Values(v)) if v.len() == h.outputs() => {
                if v.iter().all(|x| x.is_finite()) {
                    Ok(())
                } else {
                    Err(Error::Argument("non-finite covariate value".into()))
                }
            }
            (PredictiveHead::LinearGaussian(h), HeadObs::Values(v)) => Err(Error::Argument(format!(
                "covariate of width {} for a head with {} outputs",
                v.len(),
                h.outputs()
            ))),
            _ => Err(Error::Argument("covariate kind does not match head".into())),
        }
    }

    pub fn check_targets(&self, targets: &HeadTargets) -> Result<()> {
        match (self, targets) {
            (PredictiveHead::Categorical(h), HeadTargets::Classes(c)) => {
                match c.iter().find(|&&k| k >= h.classes) {
                    Some(k) => Err(Error::Argument(format!(
                        "class label {k} out of range for {} classes",
                        h.classes
                    ))),
                    None => Ok(()),
                }
            }
            (PredictiveHead::LinearGaussian(h), HeadTargets::Values(t)) => {
                if t.cols() != h.outputs() {
                    Err(Error::Argument(format!(
                        "covariates of width {} for a head with {} outputs",
                        t.cols(),
                        h.outputs()
                    )))
                } else if !t.is_finite() {
                    Err(Error::Argument("non-finite covariate value".into()))
                } else {
                    Ok(())
                }
            }
            _ => Err(Error::Argument("covariate kind does not match head".into())),
        }
    }

    /// Per-row tempered log-likelihood `λ·log f(x | zP)`, `n × 1`. `vars` are
    /// the head parameters in [`named_params`](Self::named_params) order.
    pub(crate) fn loglik_tape(&self, tape: &mut GradTape, vars: &[Var], zp: Var, targets: &HeadTargets) -> Var {
        let n = tape.value(zp).rows();
        let ll = match (self, targets) {
            (PredictiveHead::Categorical(h), HeadTargets::Classes(labels)) => {
                let logits = full_logits(tape, vars, zp);
                let lse = tape.logsumexp_rows(logits);
                let mut onehot = Tensor::zeros(n, h.classes);
                for (i, &k) in labels.iter().enumerate() {
                    onehot.set(i, k, 1.0);
                }
                let mask = tape.constant(onehot);
                let picked = tape.mul(logits, mask);
                let picked = tape.sum_cols(picked);
                tape.sub(picked, lse)
            }
            (PredictiveHead::LinearGaussian(_), HeadTargets::Values(x)) => {
                let (b0, b1, log_var) = (vars[0], vars[1], vars[2]);
                let mean = tape.affine(zp, b1, Some(b0));
                let x = tape.constant(x.clone());
                let resid = tape.sub(x, mean);
                let sq = tape.square(resid);
                let neg = tape.scale(log_var, -1.0);
                let inv_var = tape.exp(neg);
                let quad = tape.mul(sq, inv_var);
                let quad = tape.sum_cols(quad);
                let norm = tape.sum(log_var);
                let m = tape.value(log_var).cols() as f64;
                // −½ Σ_j [ln 2π + log β₂ⱼ + r²/β₂ⱼ]
                let t = tape.add(quad, norm);
                let t = tape.add_const(t, m * LN_2PI);
                tape.scale(t, -0.5)
            }
            _ => panic!("targets checked before evaluation"),
        };
        tape.scale(ll, self.lambda())
    }

    /// Categorical head: MC estimate of `log m(k)` for every class, `K × 1`.
    pub(crate) fn class_log_marginals_tape(&self, tape: &mut GradTape, vars: &[Var], draws: &Tensor) -> Var {
        let t = tape.constant(draws.clone());
        let logits = full_logits(tape, vars, t);
        let lse = tape.logsumexp_rows(logits);
        let logp = tape.sub(logits, lse);
        let logp = tape.scale(logp, self.lambda());
        let by_class = tape.transpose(logp);
        tape.logmeanexp_rows(by_class)
    }

    /// Linear-Gaussian head: per-row `log ∫ N(t) f(x | t)^λ dt`, `n × 1`;
    /// closed form when `draws` is `None`.
    pub(crate) fn lg_log_marginal_tape(
        &self,
        tape: &mut GradTape,
        vars: &[Var],
        x: &Tensor,
        draws: Option<&Tensor>,
    ) -> Result<Var> {
        let (b0, b1, log_var) = (vars[0], vars[1], vars[2]);
        let m = x.cols() as f64;
        let xv = tape.constant(x.clone());
        match draws {
            None => {
                // N(x; β₀, β₁β₁ᵀ + diag β₂)
                let b1t = tape.transpose(b1);
                let cov = tape.matmul(b1, b1t);
                let var = tape.exp(log_var);
                let noise = tape.diag(var);
                let cov = tape.add(cov, noise);
                let logdet = tape.logdet(cov)?;
                let prec = tape.inverse(cov)?;
                let r = tape.sub(xv, b0);
                let rp = tape.matmul(r, prec);
                let quad = tape.mul(rp, r);
                let quad = tape.sum_cols(quad);
                let t = tape.add(quad, logdet);
                let t = tape.add_const(t, m * LN_2PI);
                Ok(tape.scale(t, -0.5))
            }
            Some(draws) => {
                let lambda = self.lambda();
                let t = tape.constant(draws.clone());
                let mu = tape.affine(t, b1, Some(b0));
                let neg = tape.scale(log_var, -1.0);
                let inv_var = tape.exp(neg);
                // Σ_j (x_j − μ_j)²/v_j expanded so the n × M matrix is one product
                let x2 = tape.square(xv);
                let a = tape.mul(x2, inv_var);
                let a = tape.sum_cols(a);
                let mu_scaled = tape.mul(mu, inv_var);
                let b = tape.affine(xv, mu_scaled, None);
                let b = tape.scale(b, -2.0);
                let mu2 = tape.square(mu);
                let c = tape.mul(mu2, inv_var);
                let c = tape.sum_cols(c);
                let c = tape.transpose(c);
                let quad = tape.add(b, a);
                let quad = tape.add(quad, c);
                let norm = tape.sum(log_var);
                let ll = tape.add(quad, norm);
                let ll = tape.add_const(ll, m * LN_2PI);
                let ll = tape.scale(ll, -0.5 * lambda);
                Ok(tape.logmeanexp_rows(ll))
            }
        }
    }
}

/// `n × K` logits with the pinned zero column last.
fn full_logits(tape: &mut GradTape, vars: &[Var], zp: Var) -> Var {
    let (b0, w) = (vars[0], vars[1]);
    let partial = tape.affine(zp, w, Some(b0));
    let n = tape.value(zp).rows();
    let zero = tape.constant(Tensor::zeros(n, 1));
    tape.concat_cols(&[partial, zero])
}

/// Class frequencies are balanced when the most common class is at most 1.5
/// times as frequent as the rarest.
pub fn classes_balanced(labels: &[usize], classes: usize) -> bool {
    let mut counts = vec![0usize; classes];
    for &k in labels {
        if k < classes {
            counts[k] += 1;
        }
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    let min = counts.iter().copied().min().unwrap_or(0);
    min > 0 && (max as f64) <= 1.5 * min as f64
}
