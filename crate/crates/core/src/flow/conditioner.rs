use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::ParamCursor;
use crate::numeric::{GradTape, Tensor, Var};

/// One fully connected layer, `y = W x + b` with `W: out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(output, input),
            bias: Tensor::zeros(1, output),
        }
    }

    pub fn input(&self) -> usize {
        self.weight.cols()
    }

    pub fn output(&self) -> usize {
        self.weight.rows()
    }
}

/// Small MLP producing the shift (and log-scale) of a coupling layer.
///
/// Hidden layers use `tanh`, the last layer is linear. The last layer starts
/// at zero so a freshly built coupling is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioner {
    layers: Vec<Dense>,
}

impl Conditioner {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], output: usize, rng: &mut R) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let mut layer = Dense::zeros(w[0], w[1]);
                if i != last {
                    let scale = 1.0 / (w[0] as f64).sqrt();
                    layer.weight = Tensor::randn(w[1], w[0], rng).scale(scale);
                }
                layer
            })
            .collect();
        Self { layers }
    }

    /// All-zero conditioner of the given shape.
    pub fn zeros(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        Self {
            layers: widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("conditioner needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].output() != pair[1].input() {
                return Err(Error::Config(format!(
                    "conditioner layer widths do not chain: {} -> {}",
                    pair[0].output(),
                    pair[1].input()
                )));
            }
        }
        for l in &layers {
            if l.bias.dims() != (1, l.output()) {
                return Err(Error::Config("conditioner bias width mismatch".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input(&self) -> usize {
        self.layers[0].input()
    }

    pub fn output(&self) -> usize {
        self.layers[self.layers.len() - 1].output()
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(Dense::output)
            .collect()
    }

    pub(crate) fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Evaluates the network on each row of `input`.
    pub fn eval(&self, input: &Tensor) -> Result<Tensor> {
        if input.cols() != self.input() {
            return Err(Error::Config(format!(
                "conditioner expects width {}, got {}",
                self.input(),
                input.cols()
            )));
        }
        let mut h = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = h.matmul_t(&layer.weight);
            for r in 0..next.rows() {
                for (o, b) in next.row_slice_mut(r).iter_mut().zip(layer.bias.data()) {
                    *o += b;
                }
            }
            if i + 1 < self.layers.len() {
                next = next.map(f64::tanh);
            }
            h = next;
        }
        Ok(h)
    }

    pub(crate) fn forward_tape(&self, tape: &mut GradTape, cursor: &mut ParamCursor, x: Var) -> Var {
        let mut h = x;
        for i in 0..self.layers.len() {
            let (w, b) = (cursor.next(), cursor.next());
            h = tape.affine(h, w, Some(b));
            if i + 1 < self.layers.len() {
                h = tape.tanh(h);
            }
        }
        h
    }
}

/// Evaluates `conditioner` on `input`; see [`Conditioner::eval`].
pub fn conditioner_eval(conditioner: &Conditioner, input: &Tensor) -> Result<Tensor> {
    conditioner.eval(input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::finite_diff_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_conditioner_outputs_zero() {
        let c = Conditioner::zeros(3, &[8], 4);
        let out = c.eval(&Tensor::row(vec![1.0, -2.0, 0.5])).unwrap();
        assert_eq!(out.data(), &[0.0; 4]);
    }

    #[test]
    fn single_layer_is_affine() {
        let layer = Dense {
            weight: Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]),
            bias: Tensor::row(vec![0.5, -0.5]),
        };
        let c = Conditioner::from_layers(vec![layer]).unwrap();
        let out = c.eval(&Tensor::row(vec![1.0, 1.0])).unwrap();
        assert_eq!(out.data(), &[3.5, 6.5]);
    }

    #[test]
    fn width_mismatch_is_a_config_error() {
        let c = Conditioner::zeros(3, &[4], 2);
        assert!(matches!(c.eval(&Tensor::row(vec![1.0, 2.0])), Err(Error::Config(_))));
        let bad = vec![Dense::zeros(3, 4), Dense::zeros(5, 2)];
        assert!(Conditioner::from_layers(bad).is_err());
    }

    #[test]
    fn tape_matches_plain_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut c = Conditioner::new(3, &[5, 4], 2, &mut rng);
        c.layers[2].weight = Tensor::randn(2, 4, &mut rng);
        let x = Tensor::randn(6, 3, &mut rng);
        let mut tape = GradTape::new();
        let vars: Vec<Var> = c.params().into_iter().map(|p| tape.param(p.clone())).collect();
        let xv = tape.constant(x.clone());
        let out = c.forward_tape(&mut tape, &mut ParamCursor::new(&vars), xv);
        assert_eq!(tape.value(out), &c.eval(&x).unwrap());
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut c = Conditioner::new(2, &[6], 3, &mut rng);
        c.layers[1].weight = Tensor::randn(3, 6, &mut rng);
        let x = Tensor::randn(4, 2, &mut rng);
        let params: Vec<Tensor> = c.params().into_iter().cloned().collect();

        let loss = |p: &[Tensor]| -> (GradTape, Var) {
            let mut tape = GradTape::new();
            let vars: Vec<Var> = p.iter().map(|t| tape.param(t.clone())).collect();
            let xv = tape.constant(x.clone());
            let out = c.forward_tape(&mut tape, &mut ParamCursor::new(&vars), xv);
            let sq = tape.square(out);
            let l = tape.sum(sq);
            (tape, l)
        };
        let (tape, l) = loss(&params);
        let analytic = tape.backward(l).unwrap();
        let numeric = finite_diff_gradient(
            |p| {
                let (t, l) = loss(p);
                Ok(t.value(l).item())
            },
            &params,
            1e-5,
        )
        .unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            for (x, y) in a.data().iter().zip(n.data()) {
                assert!((x - y).abs() <= (1e-4 * x.abs().max(y.abs())).max(1e-8));
            }
        }
    }
}
