use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::conditioner::Conditioner;
use crate::flow::layers::{ActNorm, Coupling, CouplingKind, FlowLayer, InvLinear, LayerLogdet, Parity};
use crate::flow::layout::{LatentBlock, LatentLayout};
use crate::flow::ParamCursor;
use crate::numeric::{GradTape, Tensor, Var};

/// Shape of a flow: `levels` levels of `depth` steps each over `dims` inputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowArch {
    pub dims: usize,
    pub levels: usize,
    pub depth: usize,
    pub hidden: Vec<usize>,
    pub coupling: CouplingKind,
}

impl FlowArch {
    pub fn new(dims: usize) -> Self {
        Self {
            dims,
            levels: 2,
            depth: 4,
            hidden: vec![64],
            coupling: CouplingKind::Additive,
        }
    }

    /// Width transformed by each level.
    pub fn level_widths(&self) -> Vec<usize> {
        let mut widths = Vec::with_capacity(self.levels);
        let mut w = self.dims;
        for _ in 0..self.levels {
            widths.push(w);
            w -= w / 2;
        }
        widths
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.depth == 0 {
            return Err(Error::Config("flow needs at least one level and one step".into()));
        }
        for (l, w) in self.level_widths().into_iter().enumerate() {
            if w < 2 || w % 2 != 0 {
                return Err(Error::Config(format!(
                    "level {l} has width {w}; coupling layers need an even width ≥ 2 \
                     ({} dims over {} levels)",
                    self.dims, self.levels
                )));
            }
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("conditioner hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Flat-latent positions holding level `level`'s output: the factored-out
    /// half for non-final levels, the whole output for the last.
    pub fn level_range(&self, level: usize) -> Range<usize> {
        let widths = self.level_widths();
        let start: usize = widths[..level].iter().map(|w| w / 2).sum();
        let len = if level + 1 == self.levels {
            widths[level]
        } else {
            widths[level] / 2
        };
        start..start + len
    }

    /// `zP` blocks taken consecutively from the start of the final level's
    /// output, one per head of the given widths.
    pub fn default_layout(&self, head_widths: &[usize]) -> Result<LatentLayout> {
        let last = self.levels - 1;
        let range = self.level_range(last);
        let total: usize = head_widths.iter().sum();
        if total > range.len() {
            return Err(Error::Config(format!(
                "heads need {total} latent dimensions but the final level outputs {}",
                range.len()
            )));
        }
        let mut start = range.start;
        let blocks = head_widths
            .iter()
            .enumerate()
            .map(|(head, &w)| {
                let b = LatentBlock {
                    head,
                    level: last,
                    indices: (start..start + w).collect(),
                };
                start += w;
                b
            })
            .collect();
        LatentLayout::new(self.dims, blocks)
    }
}

/// Tape handles produced by [`FlowModel::forward_tape`].
#[derive(Debug, Clone)]
pub struct TapeForward {
    /// Flat latent, `n × p`.
    pub z: Var,
    /// Total log-determinant per row, `n × 1`.
    pub logdet: Var,
    pub layer_logdets: Vec<LayerLogdet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    arch: FlowArch,
    levels: Vec<Vec<FlowLayer>>,
    layout: LatentLayout,
}

impl FlowModel {
    /// Random-permutation linear layers and freshly initialized conditioners
    /// whose output layers are zero.
    pub fn new<R: Rng + ?Sized>(arch: FlowArch, rng: &mut R) -> Result<Self> {
        Self::build(arch, |w, half, out, hidden| {
            (
                InvLinear::random_permutation(w, rng),
                Conditioner::new(half, hidden, out, rng),
            )
        })
    }

    /// Every layer is the identity map.
    pub fn identity(arch: FlowArch) -> Result<Self> {
        Self::build(arch, |w, half, out, hidden| {
            (InvLinear::identity(w), Conditioner::zeros(half, hidden, out))
        })
    }

    fn build(
        arch: FlowArch,
        mut make: impl FnMut(usize, usize, usize, &[usize]) -> (InvLinear, Conditioner),
    ) -> Result<Self> {
        arch.validate()?;
        let mut levels = Vec::with_capacity(arch.levels);
        for w in arch.level_widths() {
            let half = w / 2;
            let out = match arch.coupling {
                CouplingKind::Additive => half,
                CouplingKind::Affine => w,
            };
            let mut layers = Vec::with_capacity(3 * arch.depth);
            for k in 0..arch.depth {
                let (linear, cond) = make(w, half, out, &arch.hidden);
                let parity = if k % 2 == 0 {
                    Parity::FirstPassive
                } else {
                    Parity::SecondPassive
                };
                layers.push(FlowLayer::ActNorm(ActNorm::identity(w)));
                layers.push(FlowLayer::InvLinear(linear));
                layers.push(FlowLayer::Coupling(Coupling::new(arch.coupling, parity, w, cond)?));
            }
            levels.push(layers);
        }
        let layout = LatentLayout::unsupervised(arch.dims);
        Ok(Self { arch, levels, layout })
    }

    /// Assembles a model from explicit layers, checking their widths.
    pub fn from_levels(arch: FlowArch, levels: Vec<Vec<FlowLayer>>, layout: LatentLayout) -> Result<Self> {
        arch.validate()?;
        if levels.len() != arch.levels {
            return Err(Error::Config(format!(
                "expected {} levels, got {}",
                arch.levels,
                levels.len()
            )));
        }
        for (l, (layers, w)) in levels.iter().zip(arch.level_widths()).enumerate() {
            if let Some(bad) = layers.iter().find(|layer| layer.width() != w) {
                return Err(Error::Config(format!(
                    "{} layer of width {} in level {l} of width {w}",
                    bad.kind_name(),
                    bad.width()
                )));
            }
        }
        let mut model = Self {
            arch,
            levels,
            layout: LatentLayout::unsupervised(0),
        };
        model.set_layout(layout)?;
        Ok(model)
    }

    pub fn arch(&self) -> &FlowArch {
        &self.arch
    }

    pub fn dims(&self) -> usize {
        self.arch.dims
    }

    pub fn levels(&self) -> &[Vec<FlowLayer>] {
        &self.levels
    }

    pub fn layers(&self) -> impl Iterator<Item = &FlowLayer> {
        self.levels.iter().flatten()
    }

    pub fn layer_count(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn layout(&self) -> &LatentLayout {
        &self.layout
    }

    /// Installs a layout after checking it covers this model's latent and that
    /// each block sits inside one level's output.
    pub fn set_layout(&mut self, layout: LatentLayout) -> Result<()> {
        layout.validate()?;
        if layout.dims() != self.arch.dims {
            return Err(Error::Config(format!(
                "layout over {} dimensions for a {}-dimensional flow",
                layout.dims(),
                self.arch.dims
            )));
        }
        for b in layout.blocks() {
            if b.level >= self.arch.levels {
                return Err(Error::Config(format!("layout names missing level {}", b.level)));
            }
            let range = self.arch.level_range(b.level);
            if let Some(j) = b.indices.iter().find(|j| !range.contains(j)) {
                return Err(Error::Config(format!(
                    "latent index {j} is not part of level {}'s output {range:?}",
                    b.level
                )));
            }
        }
        self.layout = layout;
        Ok(())
    }

    pub fn is_initialized(&self) -> bool {
        self.layers().all(|l| match l {
            FlowLayer::ActNorm(a) => a.initialized,
            _ => true,
        })
    }

    /// Parameters with dotted names, in binding order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layers) in self.levels.iter().enumerate() {
            for (i, layer) in layers.iter().enumerate() {
                let prefix = format!("level{l}.step{}.{}", i / 3, layer.kind_name());
                for (name, t) in layer.named_params() {
                    out.push((format!("{prefix}.{name}"), t));
                }
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.levels
            .iter_mut()
            .flatten()
            .flat_map(FlowLayer::params_mut)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().len()
    }

    /// Initialization flag of every actnorm, in layer order.
    pub fn actnorm_flags(&self) -> Vec<bool> {
        self.layers()
            .filter_map(|l| match l {
                FlowLayer::ActNorm(a) => Some(a.initialized),
                _ => None,
            })
            .collect()
    }

    pub fn set_actnorm_flags(&mut self, flags: &[bool]) -> Result<()> {
        let mut it = flags.iter();
        for layer in self.levels.iter_mut().flatten() {
            if let FlowLayer::ActNorm(a) = layer {
                a.initialized = *it
                    .next()
                    .ok_or_else(|| Error::Config("too few actnorm flags".into()))?;
            }
        }
        if it.next().is_some() {
            return Err(Error::Config("too many actnorm flags".into()));
        }
        Ok(())
    }

    /// Data-dependent initialization of every actnorm from `batch`, each one
    /// seeing the batch as transformed by the layers before it.
    pub fn initialize_actnorm(&mut self, batch: &Tensor) -> Result<()> {
        self.check_width(batch)?;
        let last = self.levels.len() - 1;
        let mut h = batch.clone();
        for (l, layers) in self.levels.iter_mut().enumerate() {
            for layer in layers.iter_mut() {
                if let FlowLayer::ActNorm(a) = layer {
                    a.initialize(&h)?;
                }
                h = layer.forward(&h)?.0;
            }
            if l < last {
                let w = h.cols();
                h = h.select_cols(&(w / 2..w).collect::<Vec<_>>());
            }
        }
        Ok(())
    }

    fn check_width(&self, t: &Tensor) -> Result<()> {
        if t.cols() != self.arch.dims {
            return Err(Error::Config(format!(
                "input of width {} for a {}-dimensional flow",
                t.cols(),
                self.arch.dims
            )));
        }
        Ok(())
    }

    /// Records the forward pass of `y` (`n × p`) on `tape`, reading parameters
    /// from `cursor` in [`named_params`](Self::named_params) order.
    pub(crate) fn forward_tape(
        &self,
        tape: &mut GradTape,
        cursor: &mut ParamCursor,
        y: Var,
    ) -> Result<TapeForward> {
        let n = tape.value(y).rows();
        let last = self.levels.len() - 1;
        let mut h = y;
        let mut total = tape.constant(Tensor::zeros(n, 1));
        let mut pieces = Vec::with_capacity(self.levels.len());
        let mut layer_logdets = Vec::with_capacity(self.layer_count());
        let mut index = 0;
        for (l, layers) in self.levels.iter().enumerate() {
            for layer in layers {
                let (out, ld) = layer.forward_tape(tape, cursor, h)?;
                if !tape.value(out).is_finite() || !tape.value(ld.var()).is_finite() {
                    return Err(Error::NumericalOverflow { layer: index });
                }
                total = tape.add(total, ld.var());
                layer_logdets.push(ld);
                h = out;
                index += 1;
            }
            if l < last {
                let w = tape.value(h).cols();
                pieces.push(tape.slice_cols(h, 0, w / 2));
                h = tape.slice_cols(h, w / 2, w);
            }
        }
        pieces.push(h);
        let z = tape.concat_cols(&pieces);
        Ok(TapeForward {
            z,
            logdet: total,
            layer_logdets,
        })
    }

    /// Maps each row of `y` to the latent; returns `z` and per-row logdet.
    pub fn forward(&self, y: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        self.check_width(y)?;
        let mut tape = GradTape::new();
        let vars: Vec<Var> = self.params().into_iter().map(|t| tape.constant(t.clone())).collect();
        let yv = tape.constant(y.clone());
        let out = self.forward_tape(&mut tape, &mut ParamCursor::new(&vars), yv)?;
        Ok((tape.value(out.z).clone(), tape.value(out.logdet).data().to_vec()))
    }

    /// Maps each row of the flat latent `z` back to data space.
    pub fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        self.check_width(z)?;
        let last = self.levels.len() - 1;
        let cols = |r: Range<usize>| r.collect::<Vec<_>>();
        let mut h = z.select_cols(&cols(self.arch.level_range(last)));
        let mut index = self.layer_count();
        for l in (0..self.levels.len()).rev() {
            if l < last {
                let factored = z.select_cols(&cols(self.arch.level_range(l)));
                h = hcat(&factored, &h);
            }
            for layer in self.levels[l].iter().rev() {
                index -= 1;
                h = layer.inverse(&h)?;
                if !h.is_finite() {
                    return Err(Error::NumericalOverflow { layer: index });
                }
            }
        }
        Ok(h)
    }
}

fn hcat(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, ca) = a.dims();
    let cb = b.cols();
    let mut data = Vec::with_capacity(n * (ca + cb));
    for r in 0..n {
        data.extend_from_slice(a.row_slice(r));
        data.extend_from_slice(b.row_slice(r));
    }
    Tensor::matrix(n, ca + cb, data)
}

/// Single-vector forward pass: `(T(y), log|det ∇T(y)|)`.
pub fn flow_forward(model: &FlowModel, y: &[f64]) -> Result<(Vec<f64>, f64)> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("flow input contains non-finite values".into()));
    }
    let (z, ld) = model.forward(&Tensor::row(y.to_vec()))?;
    Ok((z.into_data(), ld[0]))
}

pub fn flow_inverse(model: &FlowModel, z: &[f64]) -> Result<Vec<f64>> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("latent contains non-finite values".into()));
    }
    Ok(model.inverse(&Tensor::row(z.to_vec()))?.into_data())
}
