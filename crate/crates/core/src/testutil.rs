//! Independent oracles shared by unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::flow::{CouplingKind, FlowArch, FlowModel};
use crate::numeric::Tensor;

/// Composite Simpson rule on `[a, b]` with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    assert!(n % 2 == 0);
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Simpson weights for `n` intervals on `[a, b]`, paired with the nodes.
pub fn simpson_nodes(a: f64, b: f64, n: usize) -> Vec<(f64, f64)> {
    assert!(n % 2 == 0);
    let h = (b - a) / n as f64;
    (0..=n)
        .map(|i| {
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            (a + i as f64 * h, w * h / 3.0)
        })
        .collect()
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn assert_close(a: f64, b: f64, rel: f64, abs: f64) {
    assert!(
        (a - b).abs() <= (rel * a.abs().max(b.abs())).max(abs),
        "{a} vs {b} (rel {rel}, abs {abs})"
    );
}

/// Two-level flow with every parameter perturbed away from its initial value.
pub fn random_flow(dims: usize, coupling: CouplingKind, seed: u64) -> FlowModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = FlowArch {
        dims,
        levels: 2,
        depth: 2,
        hidden: vec![5],
        coupling,
    };
    let mut flow = FlowModel::new(arch, &mut rng).unwrap();
    for p in flow.params_mut() {
        let noise = Tensor::randn(p.rows(), p.cols(), &mut rng).scale(0.1);
        *p = p.add(&noise);
    }
    flow
}
