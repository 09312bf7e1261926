//! Binary checkpoint format.
//!
//! ```text
//! "APCDECKP"            8 bytes
//! version               u32 LE
//! header length         u64 LE
//! header                JSON (architecture, layout, heads, tensor names/shapes)
//! tensor count          u64 LE
//! index                 count × (byte offset u64 LE, element count u64 LE)
//! blob                  f64 LE values, offsets relative to the blob start
//! checksum              SHA-256 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::base::{ApcdeModel, AugmentedBase, CategoricalHead, LinearGaussianHead, PredictiveHead};
use crate::error::{Error, Result};
use crate::flow::{FlowArch, FlowModel, LatentLayout};
use crate::numeric::Tensor;
use crate::train::{EpochLog, TrainConfig};

pub const MAGIC: &[u8; 8] = b"APCDECKP";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;
const LOSS_TRACE: &str = "loss_trace";

/// A trained model plus the settings and loss trace that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ApcdeModel,
    pub train_config: Option<TrainConfig>,
    pub loss_trace: Vec<EpochLog>,
    /// Dataset columns read by each head; empty when unknown.
    pub head_columns: Vec<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum HeadSpec {
    Categorical {
        classes: usize,
        width: usize,
        lambda: f64,
        free_intercepts: bool,
    },
    LinearGaussian {
        outputs: usize,
        width: usize,
        lambda: f64,
        learn_variance: bool,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: FlowArch,
    layout: LatentLayout,
    heads: Vec<HeadSpec>,
    mc_samples: usize,
    actnorm_flags: Vec<bool>,
    train_config: Option<TrainConfig>,
    head_columns: Vec<Vec<String>>,
    tensors: Vec<TensorEntry>,
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(model: ApcdeModel) -> Self {
        Self {
            model,
            train_config: None,
            loss_trace: Vec::new(),
            head_columns: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let model = &self.model;
        let heads = model
            .base
            .heads
            .iter()
            .map(|h| match h {
                PredictiveHead::Categorical(c) => HeadSpec::Categorical {
                    classes: c.classes,
                    width: c.weight.cols(),
                    lambda: c.lambda,
                    free_intercepts: c.free_intercepts,
                },
                PredictiveHead::LinearGaussian(g) => HeadSpec::LinearGaussian {
                    outputs: g.outputs(),
                    width: g.loading.cols(),
                    lambda: g.lambda,
                    learn_variance: g.learn_variance,
                },
            })
            .collect();

        let mut tensors: Vec<(String, Tensor)> = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        if !self.loss_trace.is_empty() {
            let data = self
                .loss_trace
                .iter()
                .flat_map(|e| [e.epoch as f64, e.mean_loss, e.lr])
                .collect();
            tensors.push((LOSS_TRACE.into(), Tensor::matrix(self.loss_trace.len(), 3, data)));
        }

        let header = Header {
            arch: model.flow.arch().clone(),
            layout: model.layout().clone(),
            heads,
            mc_samples: model.base.mc_samples,
            actnorm_flags: model.flow.actnorm_flags(),
            train_config: self.train_config.clone(),
            head_columns: self.head_columns.clone(),
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header is plain data");

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        let mut offset = 0u64;
        for (_, t) in &tensors {
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            offset += 8 * t.len() as u64;
        }
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(integrity("not a checkpoint file (bad magic)"));
        }
        let mut r = Reader { bytes, pos: MAGIC.len() };
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::IncompatibleVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < r.pos + CHECKSUM_LEN {
            return Err(integrity("file truncated"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != sum {
            return Err(integrity("checksum mismatch"));
        }
        let mut r = Reader { bytes: body, pos: r.pos };

        let header_len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| integrity(format!("malformed header: {e}")))?;
        let count = r.u64()? as usize;
        if count != header.tensors.len() {
            return Err(integrity("tensor index does not match the header"));
        }
        let mut index = Vec::with_capacity(count);
        for _ in 0..count {
            index.push((r.u64()? as usize, r.u64()? as usize));
        }
        let blob = &body[r.pos..];
        let mut tensors = Vec::with_capacity(count);
        let mut expected_offset = 0;
        for (entry, &(offset, len)) in header.tensors.iter().zip(&index) {
            if offset != expected_offset || entry.shape.iter().product::<usize>() != len {
                return Err(integrity(format!("bad index entry for {}", entry.name)));
            }
            let end = offset
                .checked_add(8 * len)
                .filter(|&e| e <= blob.len())
                .ok_or_else(|| integrity("blob shorter than its index"))?;
            let data = blob[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(entry.shape.clone(), data).map_err(|e| integrity(e.to_string()))?;
            tensors.push((entry.name.as_str(), t));
            expected_offset = end;
        }
        if expected_offset != blob.len() {
            return Err(integrity("trailing bytes after the tensor blob"));
        }
        if !header.head_columns.is_empty() && header.head_columns.len() != header.heads.len() {
            return Err(integrity("head column list does not match the heads"));
        }
        rebuild(header.arch, header.layout, &header.heads, header.mc_samples, &header.actnorm_flags, tensors)
            .map(|(model, loss_trace)| Checkpoint {
                model,
                train_config: header.train_config,
                loss_trace,
                head_columns: header.head_columns,
            })
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn fingerprint(&self) -> String {
        let bytes = self.to_bytes();
        hex(&bytes[bytes.len() - CHECKSUM_LEN..])
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| integrity("file truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn rebuild(
    arch: FlowArch,
    layout: LatentLayout,
    specs: &[HeadSpec],
    mc_samples: usize,
    flags: &[bool],
    tensors: Vec<(&str, Tensor)>,
) -> Result<(ApcdeModel, Vec<EpochLog>)> {
    let bad = |e: Error| integrity(e.to_string());
    let mut flow = FlowModel::identity(arch).map_err(bad)?;
    flow.set_layout(layout).map_err(bad)?;
    flow.set_actnorm_flags(flags).map_err(bad)?;
    let heads = specs
        .iter()
        .map(|s| match *s {
            HeadSpec::Categorical {
                classes,
                width,
                lambda,
                free_intercepts,
            } => CategoricalHead::new(classes, width, lambda).map(|mut h| {
                h.free_intercepts = free_intercepts;
                PredictiveHead::Categorical(h)
            }),
            HeadSpec::LinearGaussian {
                outputs,
                width,
                lambda,
                learn_variance,
            } => LinearGaussianHead::new(outputs, width, lambda).map(|mut h| {
                h.learn_variance = learn_variance;
                PredictiveHead::LinearGaussian(h)
            }),
        })
        .collect::<Result<Vec<_>>>()
        .map_err(bad)?;
    let mut base = AugmentedBase::new(heads);
    base.mc_samples = mc_samples;
    let mut model = ApcdeModel::new(flow, base).map_err(bad)?;

    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut tensors = tensors.into_iter();
    for (name, slot) in names.iter().zip(model.params_mut()) {
        let (found, t) = tensors
            .next()
            .ok_or_else(|| integrity(format!("missing tensor {name}")))?;
        if found != name || t.shape() != slot.shape() {
            return Err(integrity(format!(
                "tensor {found} {:?} where {name} {:?} was expected",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    let mut trace = Vec::new();
    if let Some((name, t)) = tensors.next() {
        if name != LOSS_TRACE || t.cols() != 3 {
            return Err(integrity(format!("unexpected tensor {name}")));
        }
        for r in 0..t.rows() {
            let row = t.row_slice(r);
            trace.push(EpochLog {
                epoch: row[0] as usize,
                mean_loss: row[1],
                lr: row[2],
            });
        }
    }
    if let Some((name, _)) = tensors.next() {
        return Err(integrity(format!("unexpected tensor {name}")));
    }
    Ok((model, trace))
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::CouplingKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> ApcdeModel {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut arch = FlowArch::new(8);
        arch.depth = 2;
        arch.hidden = vec![6];
        arch.coupling = CouplingKind::Affine;
        let mut flow = FlowModel::new(arch.clone(), &mut rng).unwrap();
        flow.set_layout(arch.default_layout(&[2, 1]).unwrap()).unwrap();
        flow.initialize_actnorm(&Tensor::randn(20, 8, &mut rng)).unwrap();
        let mut cat = CategoricalHead::new(3, 2, 0.5).unwrap();
        cat.weight = Tensor::randn(2, 2, &mut rng);
        cat.free_intercepts = true;
        let mut lg = LinearGaussianHead::new(1, 1, 1.0).unwrap();
        lg.pin_variance(0.3).unwrap();
        lg.loading = Tensor::randn(1, 1, &mut rng);
        let base = AugmentedBase::new(vec![PredictiveHead::Categorical(cat), PredictiveHead::LinearGaussian(lg)]);
        ApcdeModel::new(flow, base).unwrap()
    }

    fn checkpoint() -> Checkpoint {
        Checkpoint {
            model: model(),
            train_config: Some(TrainConfig {
                peak_lr: 1.0 / 3.0,
                ..TrainConfig::default()
            }),
            loss_trace: vec![
                EpochLog {
                    epoch: 0,
                    mean_loss: 12.25,
                    lr: 1e-4,
                },
                EpochLog {
                    epoch: 1,
                    mean_loss: f64::NAN,
                    lr: 2e-4,
                },
            ],
            head_columns: vec![vec!["label".into()], vec!["xb".into()]],
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = checkpoint();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.model, ck.model);
        assert_eq!(back.train_config, ck.train_config);
        assert_eq!(back.head_columns, ck.head_columns);
        assert!(back.loss_trace[1].mean_loss.is_nan());
        assert_eq!(back.fingerprint(), ck.fingerprint());
        assert_eq!(ck.fingerprint().len(), 64);
    }

    #[test]
    fn reloaded_model_gives_identical_densities() {
        let ck = checkpoint();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let y = Tensor::randn(5, 8, &mut ChaCha8Rng::seed_from_u64(1));
        let (za, la) = ck.model.flow.forward(&y).unwrap();
        let (zb, lb) = back.model.flow.forward(&y).unwrap();
        assert_eq!(za, zb);
        assert_eq!(la, lb);
    }

    #[test]
    fn any_flipped_byte_is_detected() {
        let bytes = checkpoint().to_bytes();
        for pos in [12, 40, bytes.len() / 2, bytes.len() - 40, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x01;
            assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Integrity(_))), "byte {pos}");
        }
    }

    #[test]
    fn version_and_truncation() {
        let mut bytes = checkpoint().to_bytes();
        for cut in [3, 10, 30, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Integrity(_))));
        }
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::IncompatibleVersion { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join(format!("apcde-ck-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        let ck = Checkpoint::new(model());
        save_checkpoint(&ck, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
        fs::remove_dir_all(&dir).ok();
    }
}
