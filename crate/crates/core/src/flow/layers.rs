use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::conditioner::Conditioner;
use crate::flow::ParamCursor;
use crate::numeric::{GradTape, Lu, Tensor, Var};

/// Bound on the affine-coupling log-scale: `log s = B·tanh(raw / B)`.
pub const LOG_SCALE_BOUND: f64 = 5.0;

/// Log-determinant contribution of one layer on the tape.
#[derive(Debug, Clone, Copy)]
pub enum LayerLogdet {
    /// Same value for every row, `1 × 1`.
    Shared(Var),
    /// One value per row, `n × 1`.
    PerSample(Var),
}

impl LayerLogdet {
    pub fn var(self) -> Var {
        match self {
            LayerLogdet::Shared(v) | LayerLogdet::PerSample(v) => v,
        }
    }
}

/// Per-dimension affine normalization `y = s ⊙ x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActNorm {
    pub scale: Tensor,
    pub bias: Tensor,
    pub initialized: bool,
}

impl ActNorm {
    pub fn identity(width: usize) -> Self {
        Self {
            scale: Tensor::full(1, width, 1.0),
            bias: Tensor::zeros(1, width),
            initialized: false,
        }
    }

    pub fn width(&self) -> usize {
        self.scale.cols()
    }

    /// Sets scale and bias so `batch` maps to zero mean and unit population
    /// variance in every dimension.
    pub fn initialize(&mut self, batch: &Tensor) -> Result<()> {
        let (scale, bias) = actnorm_init(batch)?;
        if scale.cols() != self.width() {
            return Err(Error::Config(format!(
                "actnorm of width {} initialized from width {}",
                self.width(),
                scale.cols()
            )));
        }
        self.scale = scale;
        self.bias = bias;
        self.initialized = true;
        Ok(())
    }

    fn forward_tape(&self, tape: &mut GradTape, cursor: &mut ParamCursor, x: Var) -> (Var, LayerLogdet) {
        let (s, b) = (cursor.next(), cursor.next());
        let y = tape.mul(x, s);
        let y = tape.add(y, b);
        let la = tape.log_abs(s);
        let ld = tape.sum(la);
        (y, LayerLogdet::Shared(ld))
    }

    fn inverse(&self, y: &Tensor) -> Tensor {
        let mut x = y.clone();
        let (s, b) = (self.scale.data(), self.bias.data());
        for r in 0..x.rows() {
            for ((v, s), b) in x.row_slice_mut(r).iter_mut().zip(s).zip(b) {
                *v = (*v - b) / s;
            }
        }
        x
    }
}

/// Data-dependent actnorm initialization: `scale = 1/std`, `bias = −mean/std`
/// with the population (`n`-denominator) standard deviation.
pub fn actnorm_init(batch: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, w) = batch.dims();
    if n < 2 {
        return Err(Error::DegenerateData(format!(
            "actnorm initialization needs at least 2 rows, got {n}"
        )));
    }
    let mut scale = vec![0.0; w];
    let mut bias = vec![0.0; w];
    for j in 0..w {
        let mean = (0..n).map(|i| batch.get(i, j)).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (batch.get(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::DegenerateData(format!(
                "dimension {j} has zero variance in the initialization batch"
            )));
        }
        scale[j] = 1.0 / std;
        bias[j] = -mean / std;
    }
    Ok((Tensor::row(scale), Tensor::row(bias)))
}

/// Full invertible linear map on the feature block, `y = W x`.
#[derive(Debug, Clone, PartialEq)]
pub struct InvLinear {
    pub weight: Tensor,
}

impl InvLinear {
    pub fn identity(width: usize) -> Self {
        Self {
            weight: Tensor::identity(width),
        }
    }

    pub fn random_permutation<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        let mut perm: Vec<usize> = (0..width).collect();
        perm.shuffle(rng);
        let mut weight = Tensor::zeros(width, width);
        for (row, &col) in perm.iter().enumerate() {
            weight.set(row, col, 1.0);
        }
        Self { weight }
    }

    pub fn width(&self) -> usize {
        self.weight.rows()
    }

    fn forward_tape(
        &self,
        tape: &mut GradTape,
        cursor: &mut ParamCursor,
        x: Var,
    ) -> Result<(Var, LayerLogdet)> {
        let w = cursor.next();
        let y = tape.affine(x, w, None);
        let ld = tape.logdet(w)?;
        Ok((y, LayerLogdet::Shared(ld)))
    }

    fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        let inv = Lu::factor(&self.weight)?.inverse();
        Ok(y.matmul_t(&inv))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingKind {
    /// Active half shifted only; unit Jacobian.
    Additive,
    /// Active half scaled by a bounded exp(log-scale) and shifted.
    Affine,
}

/// Which half of the input passes through unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    FirstPassive,
    SecondPassive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub kind: CouplingKind,
    pub parity: Parity,
    pub conditioner: Conditioner,
    width: usize,
}

impl Coupling {
    pub fn new(kind: CouplingKind, parity: Parity, width: usize, conditioner: Conditioner) -> Result<Self> {
        if width % 2 != 0 {
            return Err(Error::Config(format!("coupling width must be even, got {width}")));
        }
        let half = width / 2;
        let expected_out = match kind {
            CouplingKind::Additive => half,
            CouplingKind::Affine => width,
        };
        if conditioner.input() != half || conditioner.output() != expected_out {
            return Err(Error::Config(format!(
                "conditioner maps {} -> {}, coupling of width {width} needs {half} -> {expected_out}",
                conditioner.input(),
                conditioner.output()
            )));
        }
        Ok(Self {
            kind,
            parity,
            conditioner,
            width,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn halves(&self) -> ((usize, usize), (usize, usize)) {
        let h = self.width / 2;
        match self.parity {
            Parity::FirstPassive => ((0, h), (h, self.width)),
            Parity::SecondPassive => ((h, self.width), (0, h)),
        }
    }

    fn forward_tape(&self, tape: &mut GradTape, cursor: &mut ParamCursor, x: Var) -> (Var, LayerLogdet) {
        let half = self.width / 2;
        let ((ps, pe), (as_, ae)) = self.halves();
        let passive = tape.slice_cols(x, ps, pe);
        let active = tape.slice_cols(x, as_, ae);
        let h = self.conditioner.forward_tape(tape, cursor, passive);
        let (new_active, logdet) = match self.kind {
            CouplingKind::Additive => {
                let y = tape.add(active, h);
                let zero = tape.constant(Tensor::scalar(0.0));
                (y, LayerLogdet::Shared(zero))
            }
            CouplingKind::Affine => {
                let shift = tape.slice_cols(h, 0, half);
                let raw = tape.slice_cols(h, half, self.width);
                let log_s = bounded_log_scale(tape, raw);
                let s = tape.exp(log_s);
                let y = tape.mul(active, s);
                let y = tape.add(y, shift);
                (y, LayerLogdet::PerSample(tape.sum_cols(log_s)))
            }
        };
        let out = match self.parity {
            Parity::FirstPassive => tape.concat_cols(&[passive, new_active]),
            Parity::SecondPassive => tape.concat_cols(&[new_active, passive]),
        };
        (out, logdet)
    }

    fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        let half = self.width / 2;
        let ((ps, pe), (as_, ae)) = self.halves();
        let passive = y.select_cols(&(ps..pe).collect::<Vec<_>>());
        let active = y.select_cols(&(as_..ae).collect::<Vec<_>>());
        let h = self.conditioner.eval(&passive)?;
        let mut x = y.clone();
        for r in 0..y.rows() {
            let hr = h.row_slice(r);
            let ar = active.row_slice(r);
            let xr = x.row_slice_mut(r);
            for j in 0..half {
                xr[as_ + j] = match self.kind {
                    CouplingKind::Additive => ar[j] - hr[j],
                    CouplingKind::Affine => {
                        let log_s = LOG_SCALE_BOUND * (hr[half + j] / LOG_SCALE_BOUND).tanh();
                        (ar[j] - hr[j]) * (-log_s).exp()
                    }
                };
            }
        }
        Ok(x)
    }
}

fn bounded_log_scale(tape: &mut GradTape, raw: Var) -> Var {
    let t = tape.scale(raw, 1.0 / LOG_SCALE_BOUND);
    let t = tape.tanh(t);
    tape.scale(t, LOG_SCALE_BOUND)
}

/// One invertible layer of the flow.
#[derive(Debug, Clone, PartialEq)]
pub enum FlowLayer {
    ActNorm(ActNorm),
    InvLinear(InvLinear),
    Coupling(Coupling),
}

impl FlowLayer {
    pub fn width(&self) -> usize {
        match self {
            FlowLayer::ActNorm(l) => l.width(),
            FlowLayer::InvLinear(l) => l.width(),
            FlowLayer::Coupling(l) => l.width(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            FlowLayer::ActNorm(_) => "actnorm",
            FlowLayer::InvLinear(_) => "invlinear",
            FlowLayer::Coupling(_) => "coupling",
        }
    }

    /// Parameter tensors with their local names, in binding order.
    pub(crate) fn named_params(&self) -> Vec<(String, &Tensor)> {
        match self {
            FlowLayer::ActNorm(l) => vec![("scale".into(), &l.scale), ("bias".into(), &l.bias)],
            FlowLayer::InvLinear(l) => vec![("weight".into(), &l.weight)],
            FlowLayer::Coupling(l) => l
                .conditioner
                .params()
                .into_iter()
                .enumerate()
                .map(|(i, t)| {
                    let name = if i % 2 == 0 { "weight" } else { "bias" };
                    (format!("dense{}.{name}", i / 2), t)
                })
                .collect(),
        }
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            FlowLayer::ActNorm(l) => vec![&mut l.scale, &mut l.bias],
            FlowLayer::InvLinear(l) => vec![&mut l.weight],
            FlowLayer::Coupling(l) => l.conditioner.params_mut(),
        }
    }

    pub(crate) fn forward_tape(
        &self,
        tape: &mut GradTape,
        cursor: &mut ParamCursor,
        x: Var,
    ) -> Result<(Var, LayerLogdet)> {
        match self {
            FlowLayer::ActNorm(l) => Ok(l.forward_tape(tape, cursor, x)),
            FlowLayer::InvLinear(l) => l.forward_tape(tape, cursor, x),
            FlowLayer::Coupling(l) => Ok(l.forward_tape(tape, cursor, x)),
        }
    }

    /// Applies the layer to every row of `x`; returns outputs and the
    /// per-row log-determinant.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        if x.cols() != self.width() {
            return Err(Error::Config(format!(
                "{} layer of width {} applied to width {}",
                self.kind_name(),
                self.width(),
                x.cols()
            )));
        }
        let mut tape = GradTape::new();
        let vars: Vec<Var> = self
            .named_params()
            .into_iter()
            .map(|(_, t)| tape.constant(t.clone()))
            .collect();
        let xv = tape.constant(x.clone());
        let (y, ld) = self.forward_tape(&mut tape, &mut ParamCursor::new(&vars), xv)?;
        let logdet = match ld {
            LayerLogdet::Shared(v) => vec![tape.value(v).item(); x.rows()],
            LayerLogdet::PerSample(v) => tape.value(v).data().to_vec(),
        };
        Ok((tape.value(y).clone(), logdet))
    }

    pub fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        if y.cols() != self.width() {
            return Err(Error::Config(format!(
                "{} layer of width {} inverted on width {}",
                self.kind_name(),
                self.width(),
                y.cols()
            )));
        }
        match self {
            FlowLayer::ActNorm(l) => Ok(l.inverse(y)),
            FlowLayer::InvLinear(l) => l.inverse(y),
            FlowLayer::Coupling(l) => l.inverse(y),
        }
    }
}

fn single_row(layer: &FlowLayer, input: &[f64]) -> Result<(Vec<f64>, f64)> {
    let (y, ld) = layer.forward(&Tensor::row(input.to_vec()))?;
    Ok((y.into_data(), ld[0]))
}

pub fn actnorm_forward(layer: &ActNorm, input: &[f64]) -> Result<(Vec<f64>, f64)> {
    single_row(&FlowLayer::ActNorm(layer.clone()), input)
}

pub fn invlinear_forward(layer: &InvLinear, input: &[f64]) -> Result<(Vec<f64>, f64)> {
    single_row(&FlowLayer::InvLinear(layer.clone()), input)
}

pub fn coupling_forward(layer: &Coupling, input: &[f64]) -> Result<(Vec<f64>, f64)> {
    single_row(&FlowLayer::Coupling(layer.clone()), input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::conditioner::Dense;
    use crate::numeric::logdet_lu;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference Jacobian of a single-row map.
    fn numerical_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> Tensor {
        let n = x.len();
        let h = 1e-5;
        let mut jac = Tensor::zeros(n, n);
        let mut probe = x.to_vec();
        for j in 0..n {
            probe[j] = x[j] + h;
            let up = f(&probe);
            probe[j] = x[j] - h;
            let down = f(&probe);
            probe[j] = x[j];
            for i in 0..n {
                jac.set(i, j, (up[i] - down[i]) / (2.0 * h));
            }
        }
        jac
    }

    fn random_affine_coupling(width: usize, rng: &mut ChaCha8Rng) -> Coupling {
        let mut c = Conditioner::new(width / 2, &[8], width, rng);
        for p in c.params_mut() {
            *p = Tensor::randn(p.rows(), p.cols(), rng).scale(0.5);
        }
        Coupling::new(CouplingKind::Affine, Parity::SecondPassive, width, c).unwrap()
    }

    #[test]
    fn actnorm_init_examples() {
        let batch = Tensor::column(vec![2.0, 4.0]);
        let (s, b) = actnorm_init(&batch).unwrap();
        assert_eq!(s.data(), &[1.0]);
        assert_eq!(b.data(), &[-3.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = Tensor::randn(50, 3, &mut rng).scale(3.0).add(&Tensor::full(50, 3, 7.0));
        let mut layer = ActNorm::identity(3);
        layer.initialize(&batch).unwrap();
        let (y, _) = FlowLayer::ActNorm(layer).forward(&batch).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = (0..50).map(|i| y.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 50.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn actnorm_init_on_whitened_batch_is_identity() {
        let batch = Tensor::column(vec![-1.0, 1.0]);
        let (s, b) = actnorm_init(&batch).unwrap();
        assert!((s.item() - 1.0).abs() < 1e-15 && b.item().abs() < 1e-15);
    }

    #[test]
    fn actnorm_init_rejects_constant_dimension() {
        let batch = Tensor::matrix(3, 2, vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        assert!(matches!(actnorm_init(&batch), Err(Error::DegenerateData(_))));
        assert!(actnorm_init(&Tensor::row(vec![1.0])).is_err());
    }

    #[test]
    fn actnorm_forward_examples() {
        let (y, ld) = actnorm_forward(&ActNorm::identity(2), &[0.3, -0.7]).unwrap();
        assert_eq!((y, ld), (vec![0.3, -0.7], 0.0));

        let layer = ActNorm {
            scale: Tensor::row(vec![2.0, 2.0]),
            bias: Tensor::row(vec![0.0, 1.0]),
            initialized: true,
        };
        let (_, ld) = actnorm_forward(&layer, &[5.0, -1.0]).unwrap();
        assert!((ld - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn actnorm_logdet_matches_numerical_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let layer = ActNorm {
            scale: Tensor::randn(1, 3, &mut rng),
            bias: Tensor::randn(1, 3, &mut rng),
            initialized: true,
        };
        let x = [0.2, -1.1, 0.9];
        let (_, ld) = actnorm_forward(&layer, &x).unwrap();
        let jac = numerical_jacobian(|v| actnorm_forward(&layer, v).unwrap().0, &x);
        assert!((ld - logdet_lu(&jac).unwrap().0).abs() < 1e-8);
    }

    #[test]
    fn invlinear_examples() {
        let (y, ld) = invlinear_forward(&InvLinear::identity(3), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((y, ld), (vec![1.0, 2.0, 3.0], 0.0));

        let perm = InvLinear {
            weight: Tensor::matrix(3, 3, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
        };
        let (y, ld) = invlinear_forward(&perm, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(y, vec![3.0, 1.0, 2.0]);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn random_invlinear_roundtrip_and_logdet() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layer = InvLinear {
            weight: Tensor::randn(4, 4, &mut rng).add(&Tensor::identity(4).scale(2.0)),
        };
        let v = [0.5, -0.25, 1.5, 2.0];
        let (y, ld) = invlinear_forward(&layer, &v).unwrap();
        let back = FlowLayer::InvLinear(layer.clone()).inverse(&Tensor::row(y)).unwrap();
        for (a, b) in back.data().iter().zip(v) {
            assert!((a - b).abs() < 1e-9);
        }
        let jac = numerical_jacobian(|x| invlinear_forward(&layer, x).unwrap().0, &v);
        assert!((ld - logdet_lu(&jac).unwrap().0).abs() < 1e-8);
    }

    #[test]
    fn singular_invlinear_is_rejected() {
        let layer = InvLinear {
            weight: Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, 1.0]),
        };
        assert!(matches!(
            invlinear_forward(&layer, &[1.0, 2.0]),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn zero_additive_coupling_is_identity() {
        let c = Coupling::new(
            CouplingKind::Additive,
            Parity::FirstPassive,
            4,
            Conditioner::zeros(2, &[8], 2),
        )
        .unwrap();
        let (y, ld) = coupling_forward(&c, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((y, ld), (vec![1.0, 2.0, 3.0, 4.0], 0.0));
    }

    #[test]
    fn constant_log_scale_affine_coupling() {
        // single linear layer: zero weights, bias = (shift..., log-scale...)
        let c_val = 0.7;
        let raw = LOG_SCALE_BOUND * (c_val / LOG_SCALE_BOUND as f64).atanh();
        let layer = Dense {
            weight: Tensor::zeros(6, 3),
            bias: Tensor::row(vec![0.0, 0.0, 0.0, raw, raw, raw]),
        };
        let cond = Conditioner::from_layers(vec![layer]).unwrap();
        let c = Coupling::new(CouplingKind::Affine, Parity::FirstPassive, 6, cond).unwrap();
        let (_, ld) = coupling_forward(&c, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert!((ld - 3.0 * c_val).abs() < 1e-12);
    }

    #[test]
    fn additive_inverse_subtracts_shift() {
        let b = 1.25;
        let layer = Dense {
            weight: Tensor::zeros(2, 2),
            bias: Tensor::row(vec![b, b]),
        };
        let cond = Conditioner::from_layers(vec![layer]).unwrap();
        let c = Coupling::new(CouplingKind::Additive, Parity::FirstPassive, 4, cond).unwrap();
        let x = FlowLayer::Coupling(c)
            .inverse(&Tensor::row(vec![1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        assert_eq!(x.data(), &[1.0, 2.0, 3.0 - b, 4.0 - b]);
    }

    #[test]
    fn odd_width_coupling_is_a_config_error() {
        let r = Coupling::new(
            CouplingKind::Additive,
            Parity::FirstPassive,
            3,
            Conditioner::zeros(1, &[], 1),
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn random_affine_coupling_logdet_matches_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = random_affine_coupling(6, &mut rng);
        let x = [0.3, -0.4, 1.2, -2.0, 0.05, 0.8];
        let (_, ld) = coupling_forward(&c, &x).unwrap();
        let jac = numerical_jacobian(|v| coupling_forward(&c, v).unwrap().0, &x);
        assert!((ld - logdet_lu(&jac).unwrap().0).abs() < 1e-6);
    }

    #[test]
    fn affine_scales_stay_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut c = random_affine_coupling(4, &mut rng);
        for p in c.conditioner.params_mut() {
            *p = p.scale(50.0);
        }
        for _ in 0..200 {
            let x = Tensor::randn(1, 4, &mut rng).scale(10.0);
            let (_, ld) = coupling_forward(&c, x.data()).unwrap();
            assert!(ld.abs() <= 2.0 * LOG_SCALE_BOUND + 1e-12);
        }
    }
}
