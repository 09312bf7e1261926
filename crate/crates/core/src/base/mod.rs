//! The augmented-posterior base distribution: Gaussian priors on the latent,
//! GLM likelihoods tying `zP` blocks to covariates, their marginals, and the
//! training loss.

mod heads;
mod loss;

pub use heads::{
    classes_balanced, CategoricalHead, HeadKind, HeadObs, HeadTargets, LinearGaussianHead,
    PredictiveHead,
};
pub use loss::{apcde_loss, evaluate_loss, LossEval, LOSS_CHUNK};

use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::{latent_partition, FlowModel, LatentLayout};
use crate::numeric::{log_std_normal, GradTape, Tensor, Var};

/// Default Monte-Carlo sample count for the marginal during training.
pub const DEFAULT_MC_SAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBase {
    pub heads: Vec<PredictiveHead>,
    pub mc_samples: usize,
}

impl AugmentedBase {
    pub fn new(heads: Vec<PredictiveHead>) -> Self {
        Self {
            heads,
            mc_samples: DEFAULT_MC_SAMPLES,
        }
    }

    /// No predictive heads: the plain-flow baseline.
    pub fn unsupervised() -> Self {
        Self::new(Vec::new())
    }

    pub fn validate(&self, layout: &LatentLayout) -> Result<()> {
        if self.mc_samples == 0 {
            return Err(Error::Config("Monte-Carlo sample count must be ≥ 1".into()));
        }
        if self.heads.len() != layout.blocks().len() {
            return Err(Error::Config(format!(
                "{} heads but the layout has {} zP blocks",
                self.heads.len(),
                layout.blocks().len()
            )));
        }
        for (h, head) in self.heads.iter().enumerate() {
            head.validate()?;
            if head.width() != layout.block_width(h) {
                return Err(Error::Config(format!(
                    "head {h} reads {} latent dims but its block has {}",
                    head.width(),
                    layout.block_width(h)
                )));
            }
        }
        Ok(())
    }

    pub fn check_targets(&self, targets: &[HeadTargets], n: usize) -> Result<()> {
        if targets.len() != self.heads.len() {
            return Err(Error::Argument(format!(
                "{} covariate columns for {} heads",
                targets.len(),
                self.heads.len()
            )));
        }
        for (head, t) in self.heads.iter().zip(targets) {
            if t.len() != n {
                return Err(Error::Argument(format!("{} covariate rows for {n} samples", t.len())));
            }
            head.check_targets(t)?;
        }
        Ok(())
    }
}

/// Standard-normal draws `t_l` shared by every sample of one loss evaluation;
/// one `M × d` matrix per head that needs them.
#[derive(Debug, Clone, PartialEq)]
pub struct McDraws {
    pub per_head: Vec<Option<Tensor>>,
}

impl McDraws {
    pub fn generate<R: Rng + ?Sized>(base: &AugmentedBase, samples: usize, rng: &mut R) -> Self {
        let per_head = base
            .heads
            .iter()
            .map(|h| h.needs_mc().then(|| Tensor::randn(samples, h.width(), rng)))
            .collect();
        Self { per_head }
    }
}

/// A flow together with its base distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ApcdeModel {
    pub flow: FlowModel,
    pub base: AugmentedBase,
}

impl ApcdeModel {
    pub fn new(flow: FlowModel, base: AugmentedBase) -> Result<Self> {
        base.validate(flow.layout())?;
        Ok(Self { flow, base })
    }

    pub fn layout(&self) -> &LatentLayout {
        self.flow.layout()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.flow.named_params();
        for (h, head) in self.base.heads.iter().enumerate() {
            for (name, t) in head.named_params() {
                out.push((format!("head{h}.{name}"), t));
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.flow.params_mut();
        for head in &mut self.base.heads {
            out.extend(head.params_mut());
        }
        out
    }

    pub fn trainable(&self) -> Vec<bool> {
        let mut out = vec![true; self.flow.param_count()];
        for head in &self.base.heads {
            out.extend(head.trainable());
        }
        out
    }

    /// Position of head `h`'s first parameter in [`params`](Self::params).
    pub fn head_param_offset(&self, h: usize) -> usize {
        self.flow.param_count()
            + self.base.heads[..h]
                .iter()
                .map(|head| head.named_params().len())
                .sum::<usize>()
    }

    pub(crate) fn bind(&self, tape: &mut GradTape, with_grad: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|t| {
                if with_grad {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}

fn constant_vars(tape: &mut GradTape, head: &PredictiveHead) -> Vec<Var> {
    head.named_params()
        .into_iter()
        .map(|(_, t)| tape.constant(t.clone()))
        .collect()
}

/// `λ·log f(x | zP)` for a single sample.
pub fn loglik_head(head: &PredictiveHead, x: &HeadObs, zp: &[f64]) -> Result<f64> {
    head.check_obs(x)?;
    if zp.len() != head.width() {
        return Err(Error::Argument(format!(
            "zP of width {} for a head of width {}",
            zp.len(),
            head.width()
        )));
    }
    let mut tape = GradTape::new();
    let vars = constant_vars(&mut tape, head);
    let z = tape.constant(Tensor::row(zp.to_vec()));
    let targets = HeadTargets::from_obs(std::slice::from_ref(x))?;
    let ll = head.loglik_tape(&mut tape, &vars, z, &targets);
    Ok(tape.value(ll).item())
}

/// Row-wise `λ·log f(x_i | zP_i)` for an `n × d` matrix of latents.
pub fn loglik_batch(head: &PredictiveHead, zp: &Tensor, targets: &HeadTargets) -> Result<Vec<f64>> {
    head.check_targets(targets)?;
    if zp.cols() != head.width() || zp.rows() != targets.len() {
        return Err(Error::Argument(format!(
            "zP of shape {:?} for a head of width {} and {} targets",
            zp.shape(),
            head.width(),
            targets.len()
        )));
    }
    let mut tape = GradTape::new();
    let vars = constant_vars(&mut tape, head);
    let z = tape.constant(zp.clone());
    let ll = head.loglik_tape(&mut tape, &vars, z, targets);
    Ok(tape.value(ll).data().to_vec())
}

/// MC estimate of `log m(k)` for each class of a categorical head from the
/// given `M × d` draws.
pub fn class_log_marginals(head: &CategoricalHead, draws: &Tensor) -> Result<Vec<f64>> {
    let head = PredictiveHead::Categorical(head.clone());
    if draws.cols() != head.width() {
        return Err(Error::Argument("draw width does not match head".into()));
    }
    let mut tape = GradTape::new();
    let vars = constant_vars(&mut tape, &head);
    let c = head.class_log_marginals_tape(&mut tape, &vars, draws);
    Ok(tape.value(c).data().to_vec())
}

/// Log marginal of `x` under many samples at once, sharing `draws` (`None`
/// selects the closed form, which requires a linear-Gaussian head with λ = 1).
pub fn log_marginal_batch(head: &PredictiveHead, targets: &HeadTargets, draws: Option<&Tensor>) -> Result<Vec<f64>> {
    head.check_targets(targets)?;
    match (head, targets) {
        (PredictiveHead::Categorical(h), HeadTargets::Classes(labels)) => {
            let draws = draws.ok_or_else(|| Error::Argument("categorical marginal needs draws".into()))?;
            let c = class_log_marginals(h, draws)?;
            Ok(labels.iter().map(|&k| c[k]).collect())
        }
        (PredictiveHead::LinearGaussian(h), HeadTargets::Values(x)) => {
            if draws.is_none() && h.lambda != 1.0 {
                return Err(Error::Argument("closed-form marginal requires λ = 1".into()));
            }
            let mut tape = GradTape::new();
            let vars = constant_vars(&mut tape, head);
            let v = head.lg_log_marginal_tape(&mut tape, &vars, x, draws)?;
            Ok(tape.value(v).data().to_vec())
        }
        _ => unreachable!("targets checked"),
    }
}

/// `log ∫ N(t; 0, I) f(x | t)^λ dt`: closed form for a linear-Gaussian head
/// with λ = 1, otherwise an `m`-draw Monte-Carlo estimate.
pub fn log_marginal<R: Rng + ?Sized>(head: &PredictiveHead, x: &HeadObs, m: usize, rng: &mut R) -> Result<f64> {
    head.check_obs(x)?;
    if m == 0 {
        return Err(Error::Argument("Monte-Carlo sample count must be ≥ 1".into()));
    }
    let targets = HeadTargets::from_obs(std::slice::from_ref(x))?;
    let draws = head.needs_mc().then(|| Tensor::randn(m, head.width(), rng));
    Ok(log_marginal_batch(head, &targets, draws.as_ref())?[0])
}

/// `log f(z | x)` under the augmented posterior.
pub fn log_aug_posterior<R: Rng + ?Sized>(
    base: &AugmentedBase,
    layout: &LatentLayout,
    z: &[f64],
    x: &[HeadObs],
    rng: &mut R,
) -> Result<f64> {
    if x.len() != base.heads.len() {
        return Err(Error::Argument(format!(
            "{} covariates for {} heads",
            x.len(),
            base.heads.len()
        )));
    }
    let targets = x
        .iter()
        .map(|o| HeadTargets::from_obs(std::slice::from_ref(o)))
        .collect::<Result<Vec<_>>>()?;
    Ok(log_aug_posterior_batch(base, layout, &Tensor::row(z.to_vec()), &targets, rng)?[0])
}

/// Row-wise [`log_aug_posterior`] with one set of MC draws shared by all rows.
pub fn log_aug_posterior_batch<R: Rng + ?Sized>(
    base: &AugmentedBase,
    layout: &LatentLayout,
    z: &Tensor,
    targets: &[HeadTargets],
    rng: &mut R,
) -> Result<Vec<f64>> {
    base.validate(layout)?;
    base.check_targets(targets, z.rows())?;
    let draws = McDraws::generate(base, base.mc_samples, rng);
    let mut out = Vec::with_capacity(z.rows());
    for i in 0..z.rows() {
        let (_, zn) = latent_partition(layout, z.row_slice(i))?;
        out.push(log_std_normal(&zn));
    }
    for (h, head) in base.heads.iter().enumerate() {
        let zp = z.select_cols(&layout.blocks()[h].indices);
        let marg = log_marginal_batch(head, &targets[h], draws.per_head[h].as_ref())?;
        let ll = loglik_batch(head, &zp, &targets[h])?;
        for (i, o) in out.iter_mut().enumerate() {
            *o += log_std_normal(zp.row_slice(i)) + ll[i] - marg[i];
        }
    }
    Ok(out)
}
