use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Latent coordinates feeding one predictive head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentBlock {
    pub head: usize,
    /// Level whose output the block is drawn from.
    pub level: usize,
    /// Positions in the flat latent vector.
    pub indices: Vec<usize>,
}

/// Split of the `p` latent coordinates into one `zP` block per head and the
/// remaining `zN`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentLayout {
    dims: usize,
    blocks: Vec<LatentBlock>,
    zn: Vec<usize>,
}

impl LatentLayout {
    pub fn new(dims: usize, blocks: Vec<LatentBlock>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (i, b) in blocks.iter().enumerate() {
            if b.head != i {
                return Err(Error::Config(format!(
                    "latent block {i} belongs to head {}; blocks must be ordered by head",
                    b.head
                )));
            }
            if b.indices.is_empty() {
                return Err(Error::Config(format!("latent block for head {i} is empty")));
            }
            for &j in &b.indices {
                if j >= dims {
                    return Err(Error::Config(format!(
                        "latent index {j} out of range for {dims} dimensions"
                    )));
                }
                if !seen.insert(j) {
                    return Err(Error::Config(format!("latent index {j} used by two blocks")));
                }
            }
        }
        let zn = (0..dims).filter(|j| !seen.contains(j)).collect();
        Ok(Self { dims, blocks, zn })
    }

    /// Layout without predictive heads: every coordinate is in `zN`.
    pub fn unsupervised(dims: usize) -> Self {
        Self {
            dims,
            blocks: Vec::new(),
            zn: (0..dims).collect(),
        }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn blocks(&self) -> &[LatentBlock] {
        &self.blocks
    }

    pub fn zn(&self) -> &[usize] {
        &self.zn
    }

    pub fn block_width(&self, head: usize) -> usize {
        self.blocks[head].indices.len()
    }

    /// Checks the disjoint-cover property; holds by construction but is
    /// re-asserted after deserialization.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = Self::new(self.dims, self.blocks.clone())?;
        if rebuilt.zn != self.zn {
            return Err(Error::Config("zN is not the complement of the zP blocks".into()));
        }
        Ok(())
    }
}

/// Extracts each head's block and the complement from a flat latent.
pub fn latent_partition(layout: &LatentLayout, z: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if z.len() != layout.dims {
        return Err(Error::Config(format!(
            "latent of length {} does not match layout over {} dimensions",
            z.len(),
            layout.dims
        )));
    }
    let zp = layout
        .blocks
        .iter()
        .map(|b| b.indices.iter().map(|&j| z[j]).collect())
        .collect();
    let zn = layout.zn.iter().map(|&j| z[j]).collect();
    Ok((zp, zn))
}

/// Inverse of [`latent_partition`].
pub fn latent_reassemble(layout: &LatentLayout, zp: &[Vec<f64>], zn: &[f64]) -> Result<Vec<f64>> {
    if zp.len() != layout.blocks.len() || zn.len() != layout.zn.len() {
        return Err(Error::Config("partition does not match layout".into()));
    }
    let mut z = vec![0.0; layout.dims];
    for (b, vals) in layout.blocks.iter().zip(zp) {
        if vals.len() != b.indices.len() {
            return Err(Error::Config(format!(
                "block for head {} has width {}, expected {}",
                b.head,
                vals.len(),
                b.indices.len()
            )));
        }
        for (&j, &v) in b.indices.iter().zip(vals) {
            z[j] = v;
        }
    }
    for (&j, &v) in layout.zn.iter().zip(zn) {
        z[j] = v;
    }
    Ok(z)
}
