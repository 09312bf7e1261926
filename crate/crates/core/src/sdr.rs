//! Sufficiency check for the learned reduction: regenerate each response
//! with its `zP` held fixed and fresh `zN`, and ask an independently trained
//! probe whether the class survives.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base::ApcdeModel;
use crate::error::{Error, Result};
use crate::infer::{argmax_logits, embed, generate_fixed_zp};
use crate::numeric::{GradTape, Tensor, Var};
use crate::par::Execution;
use crate::train::{adam_step, AdamState, TrainConfig};

/// Default regenerations per sample.
pub const DEFAULT_REGENERATIONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ProbeKind {
    /// Multinomial logistic regression on the flattened response.
    Logistic,
    /// One `tanh` hidden layer.
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of rows held out for the reported accuracy.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            kind: ProbeKind::Logistic,
            epochs: 100,
            batch_size: 64,
            lr: 1e-2,
            holdout: 0.2,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("probe epochs and batch size must be ≥ 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("probe learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::Config(format!("probe holdout must lie in [0, 1), got {}", self.holdout)));
        }
        if let ProbeKind::Mlp { hidden: 0 } = self.kind {
            return Err(Error::Config("probe hidden width must be positive".into()));
        }
        Ok(())
    }
}

/// A classifier of `x` from `y` alone.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeClassifier {
    pub kind: ProbeKind,
    pub classes: usize,
    /// Input standardization fitted on the training split.
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub params: Vec<Tensor>,
    pub seed: u64,
    pub epochs: usize,
    /// `None` when nothing was held out.
    pub heldout_accuracy: Option<f64>,
}

impl ProbeClassifier {
    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    fn standardize(&self, y: &Tensor) -> Tensor {
        let mut out = y.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_slice_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.scale[c];
            }
        }
        out
    }

    fn logits_tape(&self, tape: &mut GradTape, vars: &[Var], x: Var) -> Var {
        match self.kind {
            ProbeKind::Logistic => tape.affine(x, vars[0], Some(vars[1])),
            ProbeKind::Mlp { .. } => {
                let h = tape.affine(x, vars[0], Some(vars[1]));
                let h = tape.tanh(h);
                tape.affine(h, vars[2], Some(vars[3]))
            }
        }
    }

    pub fn logits(&self, y: &Tensor) -> Result<Tensor> {
        if y.cols() != self.dims() {
            return Err(Error::Argument(format!(
                "probe expects {} inputs, got {}",
                self.dims(),
                y.cols()
            )));
        }
        let mut tape = GradTape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let x = tape.constant(self.standardize(y));
        let l = self.logits_tape(&mut tape, &vars, x);
        Ok(tape.value(l).clone())
    }

    pub fn predict(&self, y: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(y)?;
        Ok((0..logits.rows()).map(|i| argmax_logits(logits.row_slice(i)).label).collect())
    }

    pub fn accuracy(&self, y: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(y)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    fn loss(&self, tape: &mut GradTape, vars: &[Var], x: &Tensor, labels: &[usize]) -> Var {
        let n = labels.len();
        let xv = tape.constant(x.clone());
        let logits = self.logits_tape(tape, vars, xv);
        let lse = tape.logsumexp_rows(logits);
        let mut onehot = Tensor::zeros(n, self.classes);
        for (i, &k) in labels.iter().enumerate() {
            onehot.set(i, k, 1.0);
        }
        let mask = tape.constant(onehot);
        let picked = tape.mul(logits, mask);
        let picked = tape.sum_cols(picked);
        let nll = tape.sub(lse, picked);
        let total = tape.sum(nll);
        tape.scale(total, 1.0 / n as f64)
    }
}

/// Fits a probe on `(y, labels)` with Adam; a seeded shuffle decides the
/// held-out rows.
pub fn train_probe(y: &Tensor, labels: &[usize], classes: usize, config: &ProbeConfig) -> Result<ProbeClassifier> {
    config.validate()?;
    let n = y.rows();
    if labels.len() != n {
        return Err(Error::Argument(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(k) = labels.iter().find(|&&k| k >= classes) {
        return Err(Error::Argument(format!("label {k} out of range for {classes} classes")));
    }
    if labels.iter().all(|&k| k == labels[0]) {
        return Err(Error::DegenerateLabels("probe training data has a single class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let held = ((n as f64 * config.holdout).round() as usize).min(n - 1);
    let (test_rows, train_rows) = order.split_at(held);
    let train_y = y.select_rows(train_rows);
    let train_labels: Vec<usize> = train_rows.iter().map(|&i| labels[i]).collect();

    let p = y.cols();
    let mut mean = vec![0.0; p];
    let mut scale = vec![0.0; p];
    for r in 0..train_y.rows() {
        for (c, v) in train_y.row_slice(r).iter().enumerate() {
            mean[c] += v / train_y.rows() as f64;
        }
    }
    for r in 0..train_y.rows() {
        for (c, v) in train_y.row_slice(r).iter().enumerate() {
            scale[c] += (v - mean[c]).powi(2) / train_y.rows() as f64;
        }
    }
    for s in &mut scale {
        *s = if *s > 1e-12 { s.sqrt() } else { 1.0 };
    }

    let init = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| Tensor::randn(rows, cols, rng).scale(1.0 / (cols as f64).sqrt());
    let params = match config.kind {
        ProbeKind::Logistic => vec![Tensor::zeros(classes, p), Tensor::zeros(1, classes)],
        ProbeKind::Mlp { hidden } => vec![
            init(hidden, p, &mut rng),
            Tensor::zeros(1, hidden),
            init(classes, hidden, &mut rng),
            Tensor::zeros(1, classes),
        ],
    };
    let mut probe = ProbeClassifier {
        kind: config.kind,
        classes,
        mean,
        scale,
        params,
        seed: config.seed,
        epochs: config.epochs,
        heldout_accuracy: None,
    };
    let x = probe.standardize(&train_y);
    let adam_config = TrainConfig::default();
    let mut state = AdamState::new(&probe.params.iter().collect::<Vec<_>>());
    let mut batch_order: Vec<usize> = (0..x.rows()).collect();
    for _ in 0..config.epochs {
        batch_order.shuffle(&mut rng);
        for batch in batch_order.chunks(config.batch_size) {
            let mut tape = GradTape::new();
            let vars: Vec<Var> = probe.params.iter().map(|t| tape.param(t.clone())).collect();
            let lb: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
            let loss = probe.loss(&mut tape, &vars, &x.select_rows(batch), &lb);
            let grads = tape.backward(loss)?;
            adam_step(&mut probe.params.iter_mut().collect::<Vec<_>>(), &grads, &mut state, config.lr, &adam_config)?;
        }
    }
    if held > 0 {
        let test_labels: Vec<usize> = test_rows.iter().map(|&i| labels[i]).collect();
        probe.heldout_accuracy = Some(probe.accuracy(&y.select_rows(test_rows), &test_labels)?);
    }
    Ok(probe)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SdrRow {
    pub observed: usize,
    pub predicted: Vec<usize>,
}

impl SdrRow {
    pub fn agreements(&self) -> usize {
        self.predicted.iter().filter(|&&p| p == self.observed).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdrResult {
    pub rows: Vec<SdrRow>,
    pub regenerations: usize,
}

impl SdrResult {
    /// Agreements over all `n·J` regenerated responses.
    pub fn rate(&self) -> f64 {
        let hits: usize = self.rows.iter().map(SdrRow::agreements).sum();
        hits as f64 / (self.rows.len() * self.regenerations) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,observed");
        for j in 0..self.regenerations {
            write!(out, ",pred_{j}").unwrap();
        }
        out.push_str(",agreement\n");
        for (i, row) in self.rows.iter().enumerate() {
            write!(out, "{i},{}", row.observed).unwrap();
            for p in &row.predicted {
                write!(out, ",{p}").unwrap();
            }
            writeln!(out, ",{}", row.agreements()).unwrap();
        }
        out
    }
}

/// Sample `i` draws its `zN` from stream `i` of a generator seeded with
/// `seed`, so results do not depend on evaluation order.
pub fn sdr_agreement(
    model: &ApcdeModel,
    probe: &ProbeClassifier,
    y: &Tensor,
    labels: &[usize],
    regenerations: usize,
    seed: u64,
    exec: Execution,
) -> Result<SdrResult> {
    if regenerations == 0 {
        return Err(Error::Argument("regeneration count must be ≥ 1".into()));
    }
    if labels.len() != y.rows() {
        return Err(Error::Argument(format!("{} labels for {} rows", labels.len(), y.rows())));
    }
    if probe.dims() != model.flow.dims() {
        return Err(Error::Argument("probe and model disagree on the response width".into()));
    }
    let emb = embed(&model.flow, y, exec)?;
    let rows = exec.map_indexed(y.rows(), |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let regenerated = generate_fixed_zp(&model.flow, &emb[i].zp, regenerations, &mut rng)?;
        Ok(SdrRow {
            observed: labels[i],
            predicted: probe.predict(&regenerated)?,
        })
    });
    Ok(SdrResult {
        rows: rows.into_iter().collect::<Result<_>>()?,
        regenerations,
    })
}
