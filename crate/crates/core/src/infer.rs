//! Post-training estimators: embeddings, conditional and marginal densities,
//! bits per dimension, classification, sampling and conditional generation.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base::{
    class_log_marginals, log_marginal_batch, loglik_batch, ApcdeModel, CategoricalHead, HeadTargets,
    LinearGaussianHead, PredictiveHead,
};
use crate::error::{Error, Result};
use crate::flow::{latent_partition, latent_reassemble, FlowModel, LatentLayout};
use crate::numeric::{log_std_normal, logsumexp, Lu, Tensor};
use crate::par::Execution;

/// Monte-Carlo draws for marginals that have no closed form.
pub const INFERENCE_MC_SAMPLES: usize = 100_000;

/// Rows per parallel work item in batch evaluation.
const ROW_CHUNK: usize = 256;

/// Half-width and step of the trapezoid grid used for class marginals at
/// `d ≤ 2`.
const QUAD_HALF_WIDTH: f64 = 10.0;
const QUAD_STEP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginalOptions {
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for MarginalOptions {
    fn default() -> Self {
        Self {
            mc_samples: INFERENCE_MC_SAMPLES,
            seed: 0,
        }
    }
}

fn mc_rng(seed: u64, head: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(16 + head as u64);
    rng
}

/// Flow output and log-determinant for every row, in fixed row chunks.
pub fn forward_batch(flow: &FlowModel, y: &Tensor, exec: Execution) -> Result<(Tensor, Vec<f64>)> {
    if y.cols() != flow.dims() {
        return Err(Error::Argument(format!(
            "responses of width {} for a {}-dimensional flow",
            y.cols(),
            flow.dims()
        )));
    }
    let ranges = Execution::chunks(y.rows(), ROW_CHUNK);
    let parts = exec.map_indexed(ranges.len(), |c| flow.forward(&y.row_range(ranges[c].start, ranges[c].end)));
    let mut zs = Vec::with_capacity(parts.len());
    let mut logdet = Vec::with_capacity(y.rows());
    for part in parts {
        let (z, ld) = part?;
        zs.push(z);
        logdet.extend(ld);
    }
    Ok((Tensor::concat_rows(&zs), logdet))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    /// One block per head, in layout order.
    pub zp: Vec<Vec<f64>>,
    pub zn: Vec<f64>,
}

pub fn embed(flow: &FlowModel, y: &Tensor, exec: Execution) -> Result<Vec<Embedding>> {
    let (z, _) = forward_batch(flow, y, exec)?;
    (0..z.rows())
        .map(|i| {
            let (zp, zn) = latent_partition(flow.layout(), z.row_slice(i))?;
            Ok(Embedding { zp, zn })
        })
        .collect()
}

/// `log f_y(y)`: standard normal over the whole latent plus the log-determinant.
pub fn log_marg_density(flow: &FlowModel, y: &Tensor, exec: Execution) -> Result<Vec<f64>> {
    let (z, logdet) = forward_batch(flow, y, exec)?;
    Ok((0..z.rows()).map(|i| log_std_normal(z.row_slice(i)) + logdet[i]).collect())
}

/// `log m(k)` for every class: trapezoid quadrature over `[−10, 10]^d` for
/// `d ≤ 2`, Monte Carlo otherwise.
pub fn class_log_marginal_table(head: &CategoricalHead, opts: &MarginalOptions, stream: usize) -> Result<Vec<f64>> {
    let d = head.weight.cols();
    if d > 2 {
        if opts.mc_samples == 0 {
            return Err(Error::Argument("Monte-Carlo sample count must be ≥ 1".into()));
        }
        let draws = Tensor::randn(opts.mc_samples, d, &mut mc_rng(opts.seed, stream));
        return class_log_marginals(head, &draws);
    }
    let steps = (2.0 * QUAD_HALF_WIDTH / QUAD_STEP).round() as usize;
    let axis: Vec<f64> = (0..=steps).map(|i| -QUAD_HALF_WIDTH + i as f64 * QUAD_STEP).collect();
    let nodes: Vec<Vec<f64>> = if d == 1 {
        axis.iter().map(|&a| vec![a]).collect()
    } else {
        axis.iter().flat_map(|&a| axis.iter().map(move |&b| vec![a, b])).collect()
    };
    let log_w = |t: &[f64]| {
        t.iter()
            .map(|&v| {
                let end = (v.abs() - QUAD_HALF_WIDTH).abs() < 1e-9;
                QUAD_STEP.ln() + if end { 0.5f64.ln() } else { 0.0 }
            })
            .sum::<f64>()
            + log_std_normal(t)
    };
    let base: Vec<f64> = nodes.iter().map(|t| log_w(t)).collect();
    let grid = Tensor::from_rows(&nodes)?;
    let head = PredictiveHead::Categorical(head.clone());
    (0..head_classes(&head))
        .map(|k| {
            let ll = loglik_batch(&head, &grid, &HeadTargets::Classes(vec![k; nodes.len()]))?;
            let terms: Vec<f64> = base.iter().zip(&ll).map(|(b, l)| b + l).collect();
            logsumexp(&terms)
        })
        .collect()
}

fn head_classes(head: &PredictiveHead) -> usize {
    match head {
        PredictiveHead::Categorical(h) => h.classes,
        PredictiveHead::LinearGaussian(_) => 0,
    }
}

/// Per-row `log m(x)` for one head: class table for categorical heads, the
/// closed form for linear-Gaussian heads with λ = 1, Monte Carlo otherwise.
pub fn head_log_marginals(
    head: &PredictiveHead,
    targets: &HeadTargets,
    opts: &MarginalOptions,
    stream: usize,
) -> Result<Vec<f64>> {
    head.check_targets(targets)?;
    match (head, targets) {
        (PredictiveHead::Categorical(h), HeadTargets::Classes(labels)) => {
            let table = class_log_marginal_table(h, opts, stream)?;
            Ok(labels.iter().map(|&k| table[k]).collect())
        }
        (PredictiveHead::LinearGaussian(h), _) if h.lambda == 1.0 => log_marginal_batch(head, targets, None),
        _ => {
            let draws = Tensor::randn(opts.mc_samples.max(1), head.width(), &mut mc_rng(opts.seed, stream));
            log_marginal_batch(head, targets, Some(&draws))
        }
    }
}

/// `log f(y | x)`: the augmented posterior at `T(y)` plus the log-determinant.
pub fn log_cond_density(
    model: &ApcdeModel,
    y: &Tensor,
    targets: &[HeadTargets],
    opts: &MarginalOptions,
    exec: Execution,
) -> Result<Vec<f64>> {
    model.base.check_targets(targets, y.rows())?;
    let (z, logdet) = forward_batch(&model.flow, y, exec)?;
    let layout = model.layout();
    let mut out: Vec<f64> = (0..z.rows())
        .map(|i| {
            let zn: Vec<f64> = layout.zn().iter().map(|&j| z.get(i, j)).collect();
            log_std_normal(&zn) + logdet[i]
        })
        .collect();
    for (h, head) in model.base.heads.iter().enumerate() {
        let zp = z.select_cols(&layout.blocks()[h].indices);
        let ll = loglik_batch(head, &zp, &targets[h])?;
        let marg = head_log_marginals(head, &targets[h], opts, h)?;
        for (i, o) in out.iter_mut().enumerate() {
            *o += log_std_normal(zp.row_slice(i)) + ll[i] - marg[i];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    Two,
    E,
}

/// `−log f_y(y)/p + log(divisor)` in the chosen base; the offset accounts
/// for integer data scaled into `(0, 1)` by `divisor`.
pub fn bits_per_dim(log_density: f64, dims: usize, divisor: f64, base: LogBase) -> Result<f64> {
    if !(divisor > 0.0) || !divisor.is_finite() {
        return Err(Error::Argument(format!("scale divisor must be positive, got {divisor}")));
    }
    if dims == 0 {
        return Err(Error::Argument("dimension must be positive".into()));
    }
    let nats = -log_density / dims as f64 + divisor.ln();
    Ok(match base {
        LogBase::Two => nats / std::f64::consts::LN_2,
        LogBase::E => nats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Classification {
    pub label: usize,
    /// Another class reached the same maximal logit.
    pub tie: bool,
}

/// The single categorical head of `model` and its index.
pub fn categorical_head(model: &ApcdeModel) -> Result<(usize, &CategoricalHead)> {
    let mut found = model.base.heads.iter().enumerate().filter_map(|(h, head)| match head {
        PredictiveHead::Categorical(c) => Some((h, c)),
        PredictiveHead::LinearGaussian(_) => None,
    });
    match (found.next(), found.next()) {
        (Some(one), None) => Ok(one),
        (None, _) => Err(Error::Config("classification needs a categorical head".into())),
        (Some(_), Some(_)) => Err(Error::Config("classification needs exactly one categorical head".into())),
    }
}

/// Argmax of the logits, lowest index on ties.
pub fn argmax_logits(logits: &[f64]) -> Classification {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let label = logits.iter().position(|&l| l == max).unwrap_or(0);
    let tie = logits.iter().filter(|&&l| l == max).count() > 1;
    Classification { label, tie }
}

pub fn classify(model: &ApcdeModel, y: &Tensor, exec: Execution) -> Result<Vec<Classification>> {
    let (h, head) = categorical_head(model)?;
    let (z, _) = forward_batch(&model.flow, y, exec)?;
    let zp = z.select_cols(&model.layout().blocks()[h].indices);
    Ok((0..zp.rows()).map(|i| argmax_logits(&head.logits(zp.row_slice(i)))).collect())
}

/// `n` draws `T⁻¹(z)`, `z ~ N(0, I_p)`.
pub fn sample_uncond<R: Rng + ?Sized>(flow: &FlowModel, n: usize, rng: &mut R) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::Argument("sample count must be ≥ 1".into()));
    }
    flow.inverse(&Tensor::randn(n, flow.dims(), rng))
}

/// `j` responses sharing the given `zP` blocks, each with fresh `zN`.
pub fn generate_fixed_zp<R: Rng + ?Sized>(flow: &FlowModel, zp: &[Vec<f64>], j: usize, rng: &mut R) -> Result<Tensor> {
    if j == 0 {
        return Err(Error::Argument("regeneration count must be ≥ 1".into()));
    }
    let layout = flow.layout();
    let rows = latents_with_fixed_zp(layout, zp, j, rng)?;
    flow.inverse(&Tensor::from_rows(&rows)?)
}

fn latents_with_fixed_zp<R: Rng + ?Sized>(
    layout: &LatentLayout,
    zp: &[Vec<f64>],
    j: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let width = layout.zn().len();
    (0..j)
        .map(|_| {
            let zn: Vec<f64> = (0..width).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            latent_reassemble(layout, zp, &zn)
        })
        .collect()
}

/// Minimum-norm `zP` with `β₀ + β₁ zP = x`.
pub fn zp_for_target(head: &LinearGaussianHead, x: &[f64]) -> Result<Vec<f64>> {
    let m = head.outputs();
    if x.len() != m {
        return Err(Error::Argument(format!("{} target values for {m} outputs", x.len())));
    }
    let b1 = &head.loading;
    let gram = b1.matmul_t(b1);
    let rhs: Vec<f64> = x.iter().zip(head.intercept.data()).map(|(v, b)| v - b).collect();
    let a = Lu::factor(&gram)?.solve_vec(&rhs);
    Ok((0..b1.cols())
        .map(|c| (0..m).map(|r| b1.get(r, c) * a[r]).sum())
        .collect())
}

/// Row indices ordered from lowest to highest density.
pub fn density_order(log_density: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..log_density.len()).collect();
    idx.sort_by(|&a, &b| log_density[a].total_cmp(&log_density[b]).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityReport {
    pub log_cond: Vec<f64>,
    pub log_marg: Vec<f64>,
    pub bpd: Vec<f64>,
    pub fingerprint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BpdOptions {
    pub divisor: f64,
    pub base: LogBase,
}

impl Default for BpdOptions {
    fn default() -> Self {
        Self {
            divisor: 256.0,
            base: LogBase::Two,
        }
    }
}

impl DensityReport {
    /// Conditional densities use `targets` when given; without covariates
    /// they equal the marginal ones.
    pub fn compute(
        model: &ApcdeModel,
        fingerprint: String,
        y: &Tensor,
        targets: Option<&[HeadTargets]>,
        marginal: &MarginalOptions,
        bpd: &BpdOptions,
        exec: Execution,
    ) -> Result<Self> {
        let log_marg = log_marg_density(&model.flow, y, exec)?;
        let log_cond = match targets {
            Some(t) => log_cond_density(model, y, t, marginal, exec)?,
            None => log_marg.clone(),
        };
        let bpd = log_marg
            .iter()
            .map(|&l| bits_per_dim(l, y.cols(), bpd.divisor, bpd.base))
            .collect::<Result<Vec<_>>>()?;
        let report = Self {
            log_cond,
            log_marg,
            bpd,
            fingerprint,
        };
        if let Some(i) = (0..report.len()).find(|&i| {
            !(report.log_cond[i].is_finite() && report.log_marg[i].is_finite() && report.bpd[i].is_finite())
        }) {
            return Err(Error::Evaluation(format!("non-finite density for sample {i}")));
        }
        Ok(report)
    }

    pub fn len(&self) -> usize {
        self.log_marg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_marg.is_empty()
    }

    pub fn mean_bpd(&self) -> f64 {
        self.bpd.iter().sum::<f64>() / self.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,log_cond,log_marg,bpd\n");
        for i in 0..self.len() {
            writeln!(out, "{i},{:?},{:?},{:?}", self.log_cond[i], self.log_marg[i], self.bpd[i]).unwrap();
        }
        out
    }
}
