use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use apcde::base::{ApcdeModel, HeadTargets, PredictiveHead};
use apcde::data::{
    load_checkpoint, save_checkpoint, save_dataset, square_side, synth_conditional_mixture, write_pgm, Checkpoint,
    Covariate, CovariateValues, Dataset, Provenance, Schema,
};
use apcde::infer::{
    categorical_head, classify, embed, generate_fixed_zp, sample_uncond, zp_for_target, DensityReport,
};
use apcde::numeric::Tensor;
use apcde::par::Execution;
use apcde::sdr::{sdr_agreement, train_probe};
use apcde::train::train;
use apcde::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{model_schema, RunConfig};
use crate::{Cli, Command};

const SAMPLE_STREAM: u64 = 4;
const GENERATE_STREAM: u64 = 5;

type Flags = Vec<(&'static str, toml::Value)>;

fn path_value(p: &Path) -> toml::Value {
    toml::Value::String(p.display().to_string())
}

fn push<T: Into<toml::Value>>(flags: &mut Flags, key: &'static str, v: Option<T>) {
    if let Some(v) = v {
        flags.push((key, v.into()));
    }
}

fn push_path(flags: &mut Flags, key: &'static str, p: &Option<PathBuf>) {
    if let Some(p) = p {
        flags.push((key, path_value(p)));
    }
}

fn int(v: Option<usize>) -> Option<i64> {
    v.map(|v| v as i64)
}

/// Flag values written into the configuration tree under their keys.
fn command_flags(command: &Command) -> Result<Flags> {
    let mut f = Flags::new();
    match command {
        Command::Train {
            data,
            out,
            loss_log,
            epochs,
            batch_size,
            lr,
        } => {
            push_path(&mut f, "data.path", data);
            push_path(&mut f, "output.path", out);
            push_path(&mut f, "output.loss_log", loss_log);
            push(&mut f, "train.epochs", int(*epochs));
            push(&mut f, "train.batch_size", int(*batch_size));
            push(&mut f, "train.peak_lr", *lr);
        }
        Command::Density {
            data,
            out,
            mc_samples,
            divisor,
            log_base,
            ..
        } => {
            push_path(&mut f, "data.path", data);
            push_path(&mut f, "output.path", out);
            push(&mut f, "inference.mc_samples", int(*mc_samples));
            push(&mut f, "inference.divisor", *divisor);
            push(&mut f, "inference.log_base", log_base.clone());
        }
        Command::Embed { data, out, .. } | Command::Classify { data, out, .. } => {
            push_path(&mut f, "data.path", data);
            push_path(&mut f, "output.path", out);
        }
        Command::Sample { out, pgm_dir, .. } => {
            push_path(&mut f, "output.path", out);
            push_path(&mut f, "output.pgm_dir", pgm_dir);
        }
        Command::Generate {
            data, out, pgm_dir, ..
        } => {
            push_path(&mut f, "data.path", data);
            push_path(&mut f, "output.path", out);
            push_path(&mut f, "output.pgm_dir", pgm_dir);
        }
        Command::ValidateSdr {
            data,
            probe_data,
            label_column,
            j,
            out,
            ..
        } => {
            push_path(&mut f, "data.path", data);
            push_path(&mut f, "sdr.probe_data", probe_data);
            push(&mut f, "sdr.label_column", label_column.clone());
            push(&mut f, "sdr.regenerations", int(*j));
            push_path(&mut f, "output.path", out);
        }
        Command::SynthData {
            n,
            dims,
            half_distance,
            sigma,
            out,
        } => {
            push(&mut f, "synth.n", int(*n));
            push(&mut f, "synth.dims", int(*dims));
            push(&mut f, "synth.half_distance", *half_distance);
            push(&mut f, "synth.sigma", *sigma);
            push_path(&mut f, "output.path", out);
        }
        Command::Report { out, .. } => push_path(&mut f, "output.path", out),
    }
    Ok(f)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut flags = command_flags(&cli.command)?;
    push(&mut flags, "seed", cli.common.seed.map(|s| s as i64));
    push(&mut flags, "threads", int(cli.common.threads));
    if cli.common.seed.is_some_and(|s| s > i64::MAX as u64) {
        return Err(Error::Argument("--seed must fit in 63 bits".into()));
    }
    let cfg = RunConfig::load(cli.common.config.as_deref(), &cli.common.set, flags)?;
    let exec = execution(cfg.threads.unwrap_or(1))?;
    match &cli.command {
        Command::Train { .. } => train_cmd(&cfg, exec),
        Command::Density { model, .. } => density_cmd(&cfg, model, exec),
        Command::Embed { model, .. } => embed_cmd(&cfg, model, exec),
        Command::Classify { model, .. } => classify_cmd(&cfg, model, exec),
        Command::Sample { model, n, .. } => sample_cmd(&cfg, model, *n),
        Command::Generate {
            model,
            fix_zp,
            row,
            j,
            grid,
            head,
            ..
        } => generate_cmd(&cfg, model, fix_zp.as_deref(), *row, *j, grid.as_deref(), *head, exec),
        Command::ValidateSdr { model, .. } => sdr_cmd(&cfg, model, exec),
        Command::SynthData { .. } => synth_cmd(&cfg),
        Command::Report { model, .. } => report_cmd(&cfg, model),
    }
}

fn execution(threads: usize) -> Result<Execution> {
    match threads {
        0 => Err(Error::Argument("--threads must be ≥ 1".into())),
        1 => Ok(Execution::Sequential),
        t => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build_global()
                .map_err(|e| Error::Config(format!("cannot start {t} threads: {e}")))?;
            Ok(Execution::Parallel)
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes `text` to the configured output path, or to stdout.
fn emit(cfg: &RunConfig, text: &str) -> Result<()> {
    match &cfg.output.path {
        Some(p) => write_file(p, text.as_bytes()),
        None => io::stdout().write_all(text.as_bytes()).map_err(|e| Error::Io {
            path: "<stdout>".into(),
            source: e,
        }),
    }
}

fn train_cmd(cfg: &RunConfig, exec: Execution) -> Result<()> {
    let out = cfg.output_path()?.to_path_buf();
    let data = cfg.load_training_data()?;
    let model = cfg.build_model(&data)?;
    let targets = cfg
        .head_columns()
        .iter()
        .map(|cols| data.head_targets(cols))
        .collect::<Result<Vec<_>>>()?;
    let log_path = cfg.output.loss_log.clone().unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".loss.log");
        p.into()
    });
    let mut log = fs::File::create(&log_path).map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?;
    eprintln!(
        "training on {} rows of width {} for {} epochs",
        data.len(),
        data.dims(),
        cfg.train.epochs
    );
    let mut checkpoint = train(model, &data.y, &targets, &cfg.train_config(), exec, Some(&mut log))?;
    checkpoint.head_columns = cfg.head_columns();
    save_checkpoint(&checkpoint, &out)?;
    if let Some(last) = checkpoint.loss_trace.last() {
        eprintln!("final {}", last.line());
    }
    eprintln!("wrote {} (fingerprint {})", out.display(), checkpoint.fingerprint());
    Ok(())
}

/// Evaluation data read with the model's covariate columns where present.
fn eval_data(cfg: &RunConfig, ck: &Checkpoint) -> Result<Dataset> {
    let ds = cfg.load_data(cfg.data_path()?, model_schema(&ck.model, &ck.head_columns))?;
    if ds.dims() != ck.model.flow.dims() {
        return Err(Error::Schema(format!(
            "data has {} response columns, the model expects {}",
            ds.dims(),
            ck.model.flow.dims()
        )));
    }
    Ok(ds)
}

/// Head targets when every head's columns are present, `None` when none are.
fn eval_targets(ds: &Dataset, ck: &Checkpoint) -> Result<Option<Vec<HeadTargets>>> {
    if ck.model.base.heads.is_empty() {
        return Ok(None);
    }
    if ck.head_columns.is_empty() {
        eprintln!("checkpoint records no covariate columns; reporting marginal densities only");
        return Ok(None);
    }
    let present: Vec<bool> = ck
        .head_columns
        .iter()
        .flatten()
        .map(|c| ds.covariate(c).is_ok())
        .collect();
    if present.iter().all(|&p| !p) {
        return Ok(None);
    }
    if !present.iter().all(|&p| p) {
        return Err(Error::Schema("data holds some but not all covariate columns of the model".into()));
    }
    ck.head_columns
        .iter()
        .map(|c| ds.head_targets(c))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn density_cmd(cfg: &RunConfig, model: &Path, exec: Execution) -> Result<()> {
    let ck = load_checkpoint(model)?;
    let ds = eval_data(cfg, &ck)?;
    let targets = eval_targets(&ds, &ck)?;
    let report = DensityReport::compute(
        &ck.model,
        ck.fingerprint(),
        &ds.y,
        targets.as_deref(),
        &cfg.marginal_options(),
        &cfg.bpd_options(),
        exec,
    )?;
    emit(cfg, &report.to_csv())?;
    eprintln!("model {}", report.fingerprint);
    eprintln!("{} samples, mean bpd {:.6}", report.len(), report.mean_bpd());
    Ok(())
}

fn embed_cmd(cfg: &RunConfig, model: &Path, exec: Execution) -> Result<()> {
    let ck = load_checkpoint(model)?;
    let ds = eval_data(cfg, &ck)?;
    let emb = embed(&ck.model.flow, &ds.y, exec)?;
    let mut out = String::from("sample_id");
    for (h, block) in ck.model.layout().blocks().iter().enumerate() {
        for k in 0..block.indices.len() {
            write!(out, ",zp{h}_{k}").unwrap();
        }
    }
    for k in 0..ck.model.layout().zn().len() {
        write!(out, ",zn{k}").unwrap();
    }
    out.push('\n');
    for (i, e) in emb.iter().enumerate() {
        write!(out, "{i}").unwrap();
        for v in e.zp.iter().flatten().chain(&e.zn) {
            write!(out, ",{v:?}").unwrap();
        }
        out.push('\n');
    }
    emit(cfg, &out)
}

fn classify_cmd(cfg: &RunConfig, model: &Path, exec: Execution) -> Result<()> {
    let ck = load_checkpoint(model)?;
    let (h, _) = categorical_head(&ck.model)?;
    let ds = eval_data(cfg, &ck)?;
    let pred = classify(&ck.model, &ds.y, exec)?;
    let mut out = String::from("sample_id,label,tie\n");
    for (i, c) in pred.iter().enumerate() {
        writeln!(out, "{i},{},{}", c.label, u8::from(c.tie)).unwrap();
    }
    emit(cfg, &out)?;
    if let Some(Ok((_, labels))) = ck.head_columns.get(h).map(|c| ds.labels(&c[0])) {
        let wrong = pred.iter().zip(labels).filter(|(p, l)| p.label != **l).count();
        eprintln!("error rate {:.4} on {} samples", wrong as f64 / labels.len() as f64, labels.len());
    }
    Ok(())
}

fn response_dataset(y: Tensor, covariates: Vec<Covariate>, source: &str, seed: u64) -> Result<Dataset> {
    Dataset::new(
        y,
        covariates,
        Provenance {
            source: source.into(),
            seed: Some(seed),
            ..Provenance::default()
        },
    )
}

fn write_pgms(dir: &Path, names: &[String], y: &Tensor) -> Result<()> {
    let side = square_side(y.cols())
        .ok_or_else(|| Error::Argument(format!("responses of width {} are not square images", y.cols())))?;
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    for (i, name) in names.iter().enumerate() {
        write_pgm(dir.join(name), side, side, y.row_slice(i))?;
    }
    Ok(())
}

fn sample_cmd(cfg: &RunConfig, model: &Path, n: usize) -> Result<()> {
    let ck = load_checkpoint(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed());
    rng.set_stream(SAMPLE_STREAM);
    let y = sample_uncond(&ck.model.flow, n, &mut rng)?;
    if let Some(dir) = &cfg.output.pgm_dir {
        let names: Vec<String> = (0..n).map(|i| format!("sample_{i:04}.pgm")).collect();
        write_pgms(dir, &names, &y)?;
    }
    emit(cfg, &response_dataset(y, Vec::new(), "sample", cfg.seed())?.to_csv())
}

fn parse_zp(text: &str, model: &ApcdeModel) -> Result<Vec<Vec<f64>>> {
    let blocks = model.layout().blocks();
    let parts: Vec<&str> = text.split(';').collect();
    if parts.len() != blocks.len() {
        return Err(Error::Argument(format!(
            "--fix-zp gives {} blocks, the model has {} heads",
            parts.len(),
            blocks.len()
        )));
    }
    parts
        .iter()
        .zip(blocks)
        .enumerate()
        .map(|(h, (part, block))| {
            let v = part
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Argument(format!("bad zP value {s:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if v.len() != block.indices.len() {
                return Err(Error::Argument(format!(
                    "head {h} needs {} zP values, got {}",
                    block.indices.len(),
                    v.len()
                )));
            }
            Ok(v)
        })
        .collect()
}

fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::Argument(format!("--grid {text:?} is not lo:hi:count"));
    let parts: Vec<&str> = text.split(':').collect();
    let [lo, hi, count] = parts.as_slice() else {
        return Err(bad());
    };
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    let count: usize = count.trim().parse().map_err(|_| bad())?;
    if count == 0 || !lo.is_finite() || !hi.is_finite() {
        return Err(bad());
    }
    Ok(match count {
        1 => vec![lo],
        _ => (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect(),
    })
}

#[allow(clippy::too_many_arguments)]
fn generate_cmd(
    cfg: &RunConfig,
    model: &Path,
    fix_zp: Option<&str>,
    row: Option<usize>,
    j: usize,
    grid: Option<&str>,
    head: Option<usize>,
    exec: Execution,
) -> Result<()> {
    let ck = load_checkpoint(model)?;
    let m = &ck.model;
    let mut zp: Vec<Vec<f64>> = match (fix_zp, row) {
        (Some(_), Some(_)) => return Err(Error::Argument("give --fix-zp or --row, not both".into())),
        (Some(text), None) => parse_zp(text, m)?,
        (None, Some(r)) => {
            let ds = eval_data(cfg, &ck)?;
            if r >= ds.len() {
                return Err(Error::Argument(format!("row {r} out of range for {} rows", ds.len())));
            }
            embed(&m.flow, &ds.y.select_rows(&[r]), exec)?.remove(0).zp
        }
        (None, None) => m.layout().blocks().iter().map(|b| vec![0.0; b.indices.len()]).collect(),
    };

    // Each cell: zP blocks, covariate targets, file stem.
    let mut cells: Vec<(Vec<Vec<f64>>, Vec<f64>, String)> = Vec::new();
    match grid {
        None => cells.push((zp, Vec::new(), "gen".into())),
        Some(spec) => {
            let values = parse_grid(spec)?;
            let h = match head {
                Some(h) => h,
                None => m
                    .base
                    .heads
                    .iter()
                    .position(|h| matches!(h, PredictiveHead::LinearGaussian(_)))
                    .ok_or_else(|| Error::Config("--grid needs a linear-gaussian head".into()))?,
            };
            let Some(PredictiveHead::LinearGaussian(lg)) = m.base.heads.get(h) else {
                return Err(Error::Config(format!("head {h} is not a linear-gaussian head")));
            };
            let targets: Vec<(Vec<f64>, String)> = match lg.outputs() {
                1 => values
                    .iter()
                    .enumerate()
                    .map(|(r, &v)| (vec![v], format!("grid_{r:02}")))
                    .collect(),
                2 => values
                    .iter()
                    .enumerate()
                    .flat_map(|(r, &a)| {
                        values
                            .iter()
                            .enumerate()
                            .map(move |(c, &b)| (vec![a, b], format!("grid_{r:02}_{c:02}")))
                    })
                    .collect(),
                k => {
                    return Err(Error::Config(format!(
                        "grids sweep heads with one or two outputs, head {h} has {k}"
                    )))
                }
            };
            for (x, name) in targets {
                zp[h] = zp_for_target(lg, &x)?;
                cells.push((zp.clone(), x, name));
            }
        }
    }

    // Every cell reuses the same zN draws, so only zP varies across a grid.
    let mut rows = Vec::new();
    let mut names = Vec::new();
    let mut targets = Vec::new();
    for (zp, x, stem) in &cells {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed());
        rng.set_stream(GENERATE_STREAM);
        let y = generate_fixed_zp(&m.flow, zp, j, &mut rng)?;
        for s in 0..j {
            rows.push(y.row_slice(s).to_vec());
            targets.push(x.clone());
            names.push(if j == 1 {
                format!("{stem}.pgm")
            } else {
                format!("{stem}_{s:03}.pgm")
            });
        }
    }
    let y = Tensor::from_rows(&rows)?;
    if let Some(dir) = &cfg.output.pgm_dir {
        write_pgms(dir, &names, &y)?;
    }
    let width = targets.first().map_or(0, Vec::len);
    let covariates = (0..width)
        .map(|k| Covariate {
            name: format!("target{k}"),
            values: CovariateValues::Continuous(targets.iter().map(|t| t[k]).collect()),
        })
        .collect();
    eprintln!("generated {} responses over {} cells", rows.len(), cells.len());
    emit(cfg, &response_dataset(y, covariates, "generate", cfg.seed())?.to_csv())
}

fn sdr_cmd(cfg: &RunConfig, model: &Path, exec: Execution) -> Result<()> {
    let ck = load_checkpoint(model)?;
    let column = match &cfg.sdr.label_column {
        Some(c) => c.clone(),
        None => {
            let (h, _) = categorical_head(&ck.model)?;
            ck.head_columns
                .get(h)
                .map(|c| c[0].clone())
                .ok_or_else(|| Error::Argument("no label column known; use --label-column".into()))?
        }
    };
    let mut known = model_schema(&ck.model, &ck.head_columns);
    known.retain(|c| c.name != column);
    known.push(Schema::categorical(&column, None));
    let ds = cfg.load_data(cfg.data_path()?, known.clone())?;
    let probe_ds = match &cfg.sdr.probe_data {
        Some(p) => cfg.load_data(p, known)?,
        None => ds.clone(),
    };
    let (classes, probe_labels) = probe_ds.labels(&column)?;
    let (eval_classes, labels) = ds.labels(&column)?;
    let probe = train_probe(&probe_ds.y, probe_labels, classes.max(eval_classes), &cfg.probe_config())?;
    if let Some(acc) = probe.heldout_accuracy {
        eprintln!("probe held-out accuracy {acc:.4}");
    }
    let result = sdr_agreement(&ck.model, &probe, &ds.y, labels, cfg.sdr.regenerations, cfg.seed(), exec)?;
    emit(cfg, &result.to_csv())?;
    eprintln!(
        "agreement {:.4} over {} samples × {} regenerations",
        result.rate(),
        result.rows.len(),
        result.regenerations
    );
    Ok(())
}

fn synth_cmd(cfg: &RunConfig) -> Result<()> {
    let out = cfg.output_path()?.to_path_buf();
    let spec = cfg.synth.spec()?;
    let ds = synth_conditional_mixture(&spec, cfg.synth.n, cfg.seed())?;
    save_dataset(&ds, &out)?;
    let mut side = out.into_os_string();
    side.push(".provenance.json");
    let json = serde_json::to_string_pretty(&ds.provenance).expect("provenance is plain data");
    write_file(Path::new(&side), json.as_bytes())?;
    eprintln!("wrote {} rows", ds.len());
    Ok(())
}

fn report_cmd(cfg: &RunConfig, model: &Path) -> Result<()> {
    let ck = load_checkpoint(model)?;
    let mut out = String::from("epoch,mean_loss,lr\n");
    for e in &ck.loss_trace {
        writeln!(out, "{},{:?},{:?}", e.epoch, e.mean_loss, e.lr).unwrap();
    }
    emit(cfg, &out)
}
