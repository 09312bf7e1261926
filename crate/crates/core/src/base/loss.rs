use rand::Rng;

use crate::base::{ApcdeModel, HeadTargets, McDraws, PredictiveHead};
use crate::error::{Error, Result};
use crate::flow::ParamCursor;
use crate::numeric::{GradTape, Tensor, Var, LN_2PI};
use crate::par::Execution;

/// Rows per tape. Fixed so the reduction order, and hence every bit of the
/// result, is independent of the execution mode.
pub const LOSS_CHUNK: usize = 16;

#[derive(Debug, Clone)]
pub struct LossEval {
    /// Batch mean of the per-sample terms.
    pub loss: f64,
    /// `−log f(y_i | x_i)` per sample.
    pub per_sample: Vec<f64>,
    /// Gradient of `loss` in [`ApcdeModel::params`] order; zero for pinned
    /// parameters.
    pub grads: Option<Vec<Tensor>>,
}

struct ChunkOut {
    per_sample: Vec<f64>,
    grads: Option<Vec<Tensor>>,
}

/// Evaluates the training loss on `(y, targets)` with fixed MC `draws`.
pub fn evaluate_loss(
    model: &ApcdeModel,
    y: &Tensor,
    targets: &[HeadTargets],
    draws: &McDraws,
    with_grad: bool,
    exec: Execution,
) -> Result<LossEval> {
    let n = y.rows();
    if n == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    if y.cols() != model.flow.dims() {
        return Err(Error::Argument(format!(
            "responses of width {} for a {}-dimensional flow",
            y.cols(),
            model.flow.dims()
        )));
    }
    model.base.check_targets(targets, n)?;
    if draws.per_head.len() != model.base.heads.len() {
        return Err(Error::Argument("MC draws do not match heads".into()));
    }
    for (head, d) in model.base.heads.iter().zip(&draws.per_head) {
        if head.needs_mc() && d.as_ref().is_none_or(|d| d.cols() != head.width()) {
            return Err(Error::Argument("missing or mis-shaped MC draws".into()));
        }
    }

    let ranges = Execution::chunks(n, LOSS_CHUNK);
    let chunks = exec.map_indexed(ranges.len(), |c| {
        let r = ranges[c].clone();
        let sub: Vec<HeadTargets> = targets.iter().map(|t| t.range(r.clone())).collect();
        eval_chunk(model, &y.row_range(r.start, r.end), &sub, draws, with_grad)
    });

    let mut per_sample = Vec::with_capacity(n);
    let mut grads: Option<Vec<Tensor>> = None;
    for chunk in chunks {
        let chunk = chunk?;
        per_sample.extend(chunk.per_sample);
        if let Some(g) = chunk.grads {
            accumulate(&mut grads, g);
        }
    }

    // Categorical marginals depend only on head parameters and the shared
    // draws, so they are computed once per class and weighted by counts.
    for (h, head) in model.base.heads.iter().enumerate() {
        let (PredictiveHead::Categorical(cat), HeadTargets::Classes(labels)) = (head, &targets[h]) else {
            continue;
        };
        let draws = draws.per_head[h].as_ref().expect("checked above");
        let mut tape = GradTape::new();
        let offset = model.head_param_offset(h);
        let vars: Vec<Var> = head
            .named_params()
            .into_iter()
            .map(|(_, t)| {
                if with_grad {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let c = head.class_log_marginals_tape(&mut tape, &vars, draws);
        let values = tape.value(c).data().to_vec();
        for (v, &k) in per_sample.iter_mut().zip(labels) {
            *v += values[k];
        }
        if with_grad {
            let mut counts = vec![0.0; cat.classes];
            for &k in labels {
                counts[k] += 1.0;
            }
            let w = tape.constant(Tensor::column(counts));
            let weighted = tape.mul(c, w);
            let total = tape.sum(weighted);
            let head_grads = tape.backward(total)?;
            let g = grads.get_or_insert_with(|| zero_grads(model));
            for (i, hg) in head_grads.into_iter().enumerate() {
                g[offset + i] = g[offset + i].add(&hg);
            }
        }
    }

    if let Some(i) = per_sample.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss { sample: i });
    }
    let loss = per_sample.iter().sum::<f64>() / n as f64;
    let grads = grads.map(|mut g| {
        for (t, trainable) in g.iter_mut().zip(model.trainable()) {
            *t = if trainable { t.scale(1.0 / n as f64) } else { Tensor::zeros_like(t) };
        }
        g
    });
    Ok(LossEval {
        loss,
        per_sample,
        grads,
    })
}

fn zero_grads(model: &ApcdeModel) -> Vec<Tensor> {
    model.params().into_iter().map(Tensor::zeros_like).collect()
}

fn accumulate(acc: &mut Option<Vec<Tensor>>, g: Vec<Tensor>) {
    match acc {
        None => *acc = Some(g),
        Some(a) => {
            for (x, y) in a.iter_mut().zip(&g) {
                for (p, q) in x.data_mut().iter_mut().zip(y.data()) {
                    *p += q;
                }
            }
        }
    }
}

/// Per-sample `−log N(z) − logdet − Σ loglik + Σ log m(x)` on one chunk,
/// excluding categorical marginals.
fn eval_chunk(
    model: &ApcdeModel,
    y: &Tensor,
    targets: &[HeadTargets],
    draws: &McDraws,
    with_grad: bool,
) -> Result<ChunkOut> {
    let mut tape = GradTape::new();
    let vars = model.bind(&mut tape, with_grad);
    let p = model.flow.dims() as f64;
    let yv = tape.constant(y.clone());
    let fwd = model
        .flow
        .forward_tape(&mut tape, &mut ParamCursor::new(&vars), yv)?;

    // −log N(z; 0, I) = ½‖z‖² + (p/2) ln 2π
    let sq = tape.square(fwd.z);
    let sq = tape.sum_cols(sq);
    let nll = tape.scale(sq, 0.5);
    let nll = tape.add_const(nll, 0.5 * p * LN_2PI);
    let mut term = tape.sub(nll, fwd.logdet);

    for (h, head) in model.base.heads.iter().enumerate() {
        let offset = model.head_param_offset(h);
        let hv = &vars[offset..offset + head.named_params().len()];
        let block = &model.layout().blocks()[h].indices;
        let zp = tape.gather_cols(fwd.z, block);
        let ll = head.loglik_tape(&mut tape, hv, zp, &targets[h]);
        term = tape.sub(term, ll);
        if let (PredictiveHead::LinearGaussian(_), HeadTargets::Values(x)) = (head, &targets[h]) {
            let d = if head.needs_mc() { draws.per_head[h].as_ref() } else { None };
            let lm = head.lg_log_marginal_tape(&mut tape, hv, x, d)?;
            term = tape.add(term, lm);
        }
    }
    let per_sample = tape.value(term).data().to_vec();
    let grads = if with_grad {
        let total = tape.sum(term);
        Some(tape.backward(total)?)
    } else {
        None
    };
    Ok(ChunkOut { per_sample, grads })
}

/// Loss on a batch with fresh MC draws from `rng`.
pub fn apcde_loss<R: Rng + ?Sized>(
    model: &ApcdeModel,
    y: &Tensor,
    targets: &[HeadTargets],
    rng: &mut R,
) -> Result<f64> {
    let draws = McDraws::generate(&model.base, model.base.mc_samples, rng);
    Ok(evaluate_loss(model, y, targets, &draws, false, Execution::Sequential)?.loss)
}
