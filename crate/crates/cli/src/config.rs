//! Run configuration read from a TOML file. Dotted keys (`train.epochs = 50`)
//! and tables are interchangeable; `--set key=value` patches the same tree
//! before it is decoded, so command-line values always win.

use std::fs;
use std::path::{Path, PathBuf};

use apcde::base::{
    classes_balanced, ApcdeModel, AugmentedBase, CategoricalHead, LinearGaussianHead, PredictiveHead,
};
use apcde::data::{
    dequantize_dataset, load_dataset, ColumnKind, ColumnSpec, ContinuousCovariateSpec, Dataset, MixtureSpec,
    Schema,
};
use apcde::flow::{CouplingKind, FlowArch, FlowModel, LatentBlock, LatentLayout};
use apcde::infer::{BpdOptions, LogBase, MarginalOptions};
use apcde::sdr::{ProbeConfig, DEFAULT_REGENERATIONS};
use apcde::train::TrainConfig;
use apcde::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

/// Random stream used for flow initialization.
const INIT_STREAM: u64 = 0;
/// Random stream used to dequantize integer images.
const DEQUANT_STREAM: u64 = 3;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; overrides `train.seed` and `probe.seed` when set.
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub data: DataConfig,
    pub flow: FlowConfig,
    pub heads: Vec<HeadConfig>,
    pub train: TrainConfig,
    pub output: OutputConfig,
    pub synth: SynthConfig,
    pub probe: ProbeConfig,
    pub sdr: SdrConfig,
    pub inference: InferenceConfig,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    /// Declared covariate columns beyond those read by heads. Undeclared
    /// extra columns are read as continuous and ignored.
    pub categorical: Vec<String>,
    pub continuous: Vec<String>,
    /// Response cells are non-negative integers to rescale and dequantize.
    pub integer_images: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub levels: usize,
    pub depth: usize,
    pub hidden: Vec<usize>,
    pub coupling: CouplingKind,
}

impl Default for FlowConfig {
    fn default() -> Self {
        let arch = FlowArch::new(2);
        Self {
            levels: arch.levels,
            depth: arch.depth,
            hidden: arch.hidden,
            coupling: arch.coupling,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKindConfig {
    Categorical,
    LinearGaussian,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: HeadKindConfig,
    pub columns: Vec<String>,
    /// Latent width `d`.
    pub width: usize,
    #[serde(default = "one")]
    pub lambda: f64,
    /// Class count; inferred from the data when absent.
    pub classes: Option<usize>,
    /// Defaults to free intercepts only for unbalanced classes.
    pub free_intercepts: Option<bool>,
    /// Fixes the linear-Gaussian noise variance.
    pub pinned_variance: Option<f64>,
    /// Explicit latent placement; all heads or none must give it.
    pub level: Option<usize>,
    pub indices: Option<Vec<usize>>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub path: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
    pub pgm_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub dims: usize,
    pub half_distance: f64,
    pub sigma: f64,
    /// Explicit class means; replaces the two-class layout.
    pub means: Option<Vec<Vec<f64>>>,
    pub probs: Option<Vec<f64>>,
    pub slope: Option<f64>,
    pub noise: Option<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            dims: 2,
            half_distance: 2.0,
            sigma: 1.0,
            means: None,
            probs: None,
            slope: None,
            noise: None,
        }
    }
}

impl SynthConfig {
    pub fn spec(&self) -> Result<MixtureSpec> {
        let mut spec = match &self.means {
            Some(means) => {
                let k = means.len();
                MixtureSpec {
                    means: means.clone(),
                    sigma: self.sigma,
                    probs: vec![1.0 / k as f64; k],
                    continuous: None,
                }
            }
            None => {
                if self.dims == 0 {
                    return Err(Error::Config("synth.dims must be ≥ 1".into()));
                }
                MixtureSpec::two_class(self.dims, self.half_distance, self.sigma)
            }
        };
        if let Some(p) = &self.probs {
            spec.probs = p.clone();
        }
        spec.continuous = match (self.slope, self.noise) {
            (None, None) => None,
            (slope, noise) => Some(ContinuousCovariateSpec {
                slope: slope.unwrap_or(1.0),
                noise: noise.unwrap_or(0.1),
            }),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdrConfig {
    pub regenerations: usize,
    pub label_column: Option<String>,
    /// Data for fitting the probe; defaults to the evaluated data.
    pub probe_data: Option<PathBuf>,
}

impl Default for SdrConfig {
    fn default() -> Self {
        Self {
            regenerations: DEFAULT_REGENERATIONS,
            label_column: None,
            probe_data: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub mc_samples: usize,
    pub divisor: f64,
    pub log_base: LogBase,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        let m = MarginalOptions::default();
        let b = BpdOptions::default();
        Self {
            mc_samples: m.mc_samples,
            divisor: b.divisor,
            log_base: b.base,
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies the `key=value` overrides, then the
    /// typed flag values, and decodes.
    pub fn load(path: Option<&Path>, overrides: &[String], flags: Vec<(&str, toml::Value)>) -> Result<Self> {
        let mut tree = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        for (key, value) in flags {
            set_key(&mut tree, key, value)?;
        }
        toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed(),
            ..self.train.clone()
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            seed: self.seed.unwrap_or(self.probe.seed),
            ..self.probe.clone()
        }
    }

    pub fn marginal_options(&self) -> MarginalOptions {
        MarginalOptions {
            mc_samples: self.inference.mc_samples,
            seed: self.seed(),
        }
    }

    pub fn bpd_options(&self) -> BpdOptions {
        BpdOptions {
            divisor: self.inference.divisor,
            base: self.inference.log_base,
        }
    }

    pub fn data_path(&self) -> Result<&Path> {
        self.data
            .path
            .as_deref()
            .ok_or_else(|| Error::Argument("no dataset given (use --data or data.path)".into()))
    }

    pub fn output_path(&self) -> Result<&Path> {
        self.output
            .path
            .as_deref()
            .ok_or_else(|| Error::Argument("no output path given (use --out or output.path)".into()))
    }

    /// Head columns with their kinds, in head order.
    pub fn head_columns(&self) -> Vec<Vec<String>> {
        self.heads.iter().map(|h| h.columns.clone()).collect()
    }

    fn head_schema(&self) -> Vec<ColumnSpec> {
        let mut cols = Vec::new();
        for h in &self.heads {
            for c in &h.columns {
                cols.push(match h.kind {
                    HeadKindConfig::Categorical => Schema::categorical(c, h.classes),
                    HeadKindConfig::LinearGaussian => Schema::continuous(c),
                });
            }
        }
        cols
    }

    /// Loads `path` with the head columns plus declared extras, and
    /// dequantizes it when configured as integer images.
    pub fn load_data(&self, path: &Path, known: Vec<ColumnSpec>) -> Result<Dataset> {
        let mut known = known;
        known.extend(self.data.categorical.iter().map(|c| Schema::categorical(c, None)));
        known.extend(self.data.continuous.iter().map(|c| Schema::continuous(c)));
        let schema = schema_from_header(path, known)?;
        let ds = load_dataset(path, &schema)?;
        if self.data.integer_images {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed());
            rng.set_stream(DEQUANT_STREAM);
            Ok(dequantize_dataset(&ds, &mut rng)?.0)
        } else {
            Ok(ds)
        }
    }

    pub fn load_training_data(&self) -> Result<Dataset> {
        self.load_data(self.data_path()?, self.head_schema())
    }

    pub fn arch(&self, dims: usize) -> FlowArch {
        FlowArch {
            dims,
            levels: self.flow.levels,
            depth: self.flow.depth,
            hidden: self.flow.hidden.clone(),
            coupling: self.flow.coupling,
        }
    }

    fn layout(&self, arch: &FlowArch) -> Result<LatentLayout> {
        let explicit = self.heads.iter().filter(|h| h.indices.is_some()).count();
        if explicit == 0 {
            let widths: Vec<usize> = self.heads.iter().map(|h| h.width).collect();
            return arch.default_layout(&widths);
        }
        if explicit != self.heads.len() {
            return Err(Error::Config("give latent indices for every head or for none".into()));
        }
        let blocks = self
            .heads
            .iter()
            .enumerate()
            .map(|(head, h)| {
                let indices = h.indices.clone().expect("checked above");
                if indices.len() != h.width {
                    return Err(Error::Config(format!(
                        "head {head} has width {} but {} latent indices",
                        h.width,
                        indices.len()
                    )));
                }
                Ok(LatentBlock {
                    head,
                    level: h.level.unwrap_or(arch.levels - 1),
                    indices,
                })
            })
            .collect::<Result<_>>()?;
        LatentLayout::new(arch.dims, blocks)
    }

    /// Untrained model shaped for `data`.
    pub fn build_model(&self, data: &Dataset) -> Result<ApcdeModel> {
        let arch = self.arch(data.dims());
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed());
        rng.set_stream(INIT_STREAM);
        let mut flow = FlowModel::new(arch.clone(), &mut rng)?;
        flow.set_layout(self.layout(&arch)?)?;
        let heads = self
            .heads
            .iter()
            .map(|h| self.build_head(h, data))
            .collect::<Result<Vec<_>>>()?;
        ApcdeModel::new(flow, AugmentedBase::new(heads))
    }

    fn build_head(&self, h: &HeadConfig, data: &Dataset) -> Result<PredictiveHead> {
        match h.kind {
            HeadKindConfig::Categorical => {
                if h.pinned_variance.is_some() {
                    return Err(Error::Config("pinned_variance applies to linear-gaussian heads".into()));
                }
                let [column] = h.columns.as_slice() else {
                    return Err(Error::Config("a categorical head reads exactly one column".into()));
                };
                let (classes, labels) = data.labels(column)?;
                let classes = h.classes.unwrap_or(classes);
                let mut head = CategoricalHead::new(classes, h.width, h.lambda)?;
                head.free_intercepts = h.free_intercepts.unwrap_or_else(|| !classes_balanced(labels, classes));
                Ok(PredictiveHead::Categorical(head))
            }
            HeadKindConfig::LinearGaussian => {
                if h.classes.is_some() || h.free_intercepts.is_some() {
                    return Err(Error::Config("classes and free_intercepts apply to categorical heads".into()));
                }
                let mut head = LinearGaussianHead::new(h.columns.len(), h.width, h.lambda)?;
                if let Some(v) = h.pinned_variance {
                    head.pin_variance(v)?;
                }
                Ok(PredictiveHead::LinearGaussian(head))
            }
        }
    }
}

/// Schema for the file at `path`: `known` columns keep their kinds, other
/// non-response columns are read as continuous.
pub fn schema_from_header(path: &Path, known: Vec<ColumnSpec>) -> Result<Schema> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let header = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let mut columns = Vec::new();
    for name in header.split(',').map(str::trim) {
        if name.strip_prefix('y').is_some_and(|s| s.parse::<usize>().is_ok()) {
            continue;
        }
        let spec = known
            .iter()
            .find(|c| c.name == name)
            .cloned()
            .unwrap_or_else(|| Schema::continuous(name));
        if !columns.iter().any(|c: &ColumnSpec| c.name == spec.name) {
            columns.push(spec);
        }
    }
    Ok(Schema::new(columns))
}

/// Column specs matching a trained model's heads.
pub fn model_schema(model: &ApcdeModel, head_columns: &[Vec<String>]) -> Vec<ColumnSpec> {
    let mut cols = Vec::new();
    for (head, columns) in model.base.heads.iter().zip(head_columns) {
        for c in columns {
            cols.push(ColumnSpec {
                name: c.clone(),
                kind: match head {
                    PredictiveHead::Categorical(h) => ColumnKind::Categorical {
                        classes: Some(h.classes),
                    },
                    PredictiveHead::LinearGaussian(_) => ColumnKind::Continuous,
                },
            });
        }
    }
    cols
}

/// Sets `a.b.c = value`, parsing `value` as a TOML value and falling back to
/// a plain string.
fn apply_override(tree: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Argument(format!("override {assignment:?} is not key=value")))?;
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    set_key(tree, key.trim(), value)
}

fn set_key(tree: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Argument(format!("bad override key {key:?}")));
    }
    let mut table = tree;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Argument(format!("override key {key:?} crosses a non-table value")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys_and_tables_agree() {
        let a: RunConfig = toml::from_str("train.epochs = 7\nflow.levels = 1").unwrap();
        let b: RunConfig = toml::from_str("[train]\nepochs = 7\n[flow]\nlevels = 1").unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.train.epochs, 7);
        assert_eq!(b.flow.levels, 1);
    }

    #[test]
    fn overrides_win() {
        let mut t: toml::Table = "train.epochs = 7\nseed = 1".parse().unwrap();
        apply_override(&mut t, "train.epochs=9").unwrap();
        apply_override(&mut t, "output.path = out.ckpt").unwrap();
        apply_override(&mut t, "flow.coupling=affine").unwrap();
        let c: RunConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(c.train.epochs, 9);
        assert_eq!(c.output.path.as_deref(), Some(Path::new("out.ckpt")));
        assert_eq!(c.flow.coupling, CouplingKind::Affine);
        assert_eq!(c.seed(), 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("train.epoch = 7").is_err());
        let mut t = toml::Table::new();
        assert!(apply_override(&mut t, "novalue").is_err());
    }

    #[test]
    fn top_level_seed_overrides_section_seeds() {
        let c: RunConfig = toml::from_str("seed = 5\ntrain.seed = 1\nprobe.seed = 2").unwrap();
        assert_eq!(c.train_config().seed, 5);
        assert_eq!(c.probe_config().seed, 5);
        let c: RunConfig = toml::from_str("train.seed = 1").unwrap();
        assert_eq!(c.train_config().seed, 1);
    }

    #[test]
    fn synth_section_builds_specs() {
        let c: RunConfig = toml::from_str("synth.dims = 3\nsynth.slope = 2.0").unwrap();
        let spec = c.synth.spec().unwrap();
        assert_eq!(spec.dims(), 3);
        assert_eq!(spec.continuous.unwrap().slope, 2.0);
        let c: RunConfig = toml::from_str("synth.means = [[0.0], [1.0], [2.0]]").unwrap();
        assert_eq!(c.synth.spec().unwrap().classes(), 3);
    }
}
