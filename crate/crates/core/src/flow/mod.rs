//! The invertible transform: Glow-style steps (actnorm, invertible linear,
//! coupling) stacked into levels with half of each non-final level's output
//! factored out to the latent.

mod conditioner;
mod layers;
mod layout;
mod model;

pub use conditioner::{conditioner_eval, Conditioner, Dense};
pub use layers::{
    actnorm_forward, actnorm_init, coupling_forward, invlinear_forward, ActNorm, Coupling,
    CouplingKind, FlowLayer, InvLinear, LayerLogdet, Parity, LOG_SCALE_BOUND,
};
pub use layout::{latent_partition, latent_reassemble, LatentBlock, LatentLayout};
pub use model::{flow_forward, flow_inverse, FlowArch, FlowModel, TapeForward};

use crate::numeric::Var;

/// Hands out tape variables in the order parameters were bound.
pub(crate) struct ParamCursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> ParamCursor<'a> {
    pub(crate) fn new(vars: &'a [Var]) -> Self {
        Self { vars, pos: 0 }
    }

    pub(crate) fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }
}
