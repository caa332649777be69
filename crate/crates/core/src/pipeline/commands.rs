//! The five pipeline commands. Every command reads and writes plain files
//! under the run's output directory:
//!
//! ```text
//! prepared/   train.json test.json schema_spec.toml stats.json stats.md
//! train/      ae.bundle model.bundle ae_losses.csv gan_losses.csv
//! checkpoints/ checkpoint.bundle progress.json
//! synthetic/  synthetic.csv manifest.json
//! eval/       report.json report.md figures and their CSV tables
//! report.md
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::bundle::{file_sha256, AeBlock, ModelBundle, Provenance};
use super::config::{seed_offset, DataFormat, ResolvedModel, RunConfig};
use crate::autoencoder::Autoencoder;
use crate::benchmark::table_spec;
use crate::data::io::{read_numeric_table, read_observations, read_schema_spec, write_observations};
use crate::data::{fit_schema, window_records, Dataset, Mode, RawRecord, SchemaSpec, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::missing::MissingAutoencoder;
use crate::model::{stream_rng, SequenceModel};
use crate::train::{fit, FitState};
use crate::wgan::{generate_dataset, train_wgan, GanState, LatentGan};

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(format!("serialize {}: {e}", path.display())))?;
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.into(),
        line: e.line(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRate {
    pub feature: String,
    pub missing_rate: f64,
}

/// Per-split statistics in the layout of a dataset-statistics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub split: String,
    pub instances: usize,
    pub dynamic_features: usize,
    pub global_features: usize,
    pub average_length: f64,
    pub max_length: usize,
    pub missing_rate: f64,
    pub feature_rates: Vec<FeatureRate>,
}

impl SplitStats {
    pub fn of(ds: &Dataset, split: &str) -> Self {
        let names: Vec<String> = ds.schema.dynamic().map(|f| f.name.clone()).collect();
        Self {
            split: split.into(),
            instances: ds.len(),
            dynamic_features: names.len(),
            global_features: ds.schema.global().count(),
            average_length: ds.average_length(),
            max_length: ds.max_length(),
            missing_rate: ds.overall_missing_rate(),
            feature_rates: names
                .into_iter()
                .zip(ds.dynamic_missing_rates())
                .map(|(feature, missing_rate)| FeatureRate { feature, missing_rate })
                .collect(),
        }
    }
}

fn stats_table(stats: &[SplitStats]) -> String {
    let mut out = String::from("| Split | #Instances | #Dynamic | #Global | Avg.Len | Max.Len | Missing rate |\n|---|---|---|---|---|---|---|\n");
    for s in stats {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {:.2} | {} | {:.2}% |",
            s.split,
            s.instances,
            s.dynamic_features,
            s.global_features,
            s.average_length,
            s.max_length,
            100.0 * s.missing_rate
        );
    }
    if let Some(first) = stats.first() {
        let _ = write!(out, "\n| Feature |");
        for s in stats {
            let _ = write!(out, " {} |", s.split);
        }
        let _ = write!(out, "\n|---|{}\n", "---|".repeat(stats.len()));
        for (j, f) in first.feature_rates.iter().enumerate() {
            let _ = write!(out, "| {} |", f.feature);
            for s in stats {
                let _ = write!(out, " {:.4} |", s.feature_rates[j].missing_rate);
            }
            out.push('\n');
        }
    }
    out
}

/// Encoded train and test splits plus the spec they were read with.
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub spec: SchemaSpec,
}

impl Prepared {
    pub fn dir(out: &Path) -> PathBuf {
        out.join("prepared")
    }

    pub fn load(out: &Path) -> Result<Self> {
        let dir = Self::dir(out);
        let spec_path = dir.join("schema_spec.toml");
        if !spec_path.exists() {
            return Err(Error::Config(format!("{} not found; run prepare first", spec_path.display())));
        }
        Ok(Self {
            train: Dataset::load(&dir.join("train.json"))?,
            test: Dataset::load(&dir.join("test.json"))?,
            spec: read_schema_spec(&spec_path)?,
        })
    }
}

fn read_source(cfg: &RunConfig, path: &Path) -> Result<(Vec<RawRecord>, SchemaSpec)> {
    if !path.exists() {
        return Err(Error::Config(format!("data file {} does not exist", path.display())));
    }
    match cfg.data.format {
        DataFormat::Observations => {
            let spec = read_schema_spec(cfg.data.schema.as_deref().expect("validated"))?;
            Ok((read_observations(path, &spec)?, spec))
        }
        DataFormat::Table => {
            let (header, rows) = read_numeric_table(path)?;
            let spec = match &cfg.data.schema {
                Some(p) => read_schema_spec(p)?,
                None => table_spec(&header),
            };
            Ok((window_records(&rows, cfg.data.window_steps.expect("validated"))?, spec))
        }
    }
}

/// Reads the raw data, splits off a test set when none is given, fits the
/// schema on the training split and writes everything under `prepared/`.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<Vec<SplitStats>> {
    cfg.validate()?;
    let (mut records, spec) = read_source(cfg, &cfg.data.train)?;
    if records.is_empty() {
        return Err(Error::Data(format!("{} has no instances", cfg.data.train.display())));
    }
    let mut rng = stream_rng(cfg.seed.wrapping_add(seed_offset::SPLIT), 0);
    records.shuffle(&mut rng);
    let test_records = match &cfg.data.test {
        Some(p) => read_source(cfg, p)?.0,
        None if cfg.data.test_fraction > 0.0 => {
            let n_test = ((records.len() as f64 * cfg.data.test_fraction).round() as usize).min(records.len() - 1);
            records.split_off(records.len() - n_test)
        }
        None => records.clone(),
    };
    let schema = fit_schema(&records, &spec)?;
    let train = Dataset::from_records(&records, &schema, Split::Train)?;
    let test = Dataset::from_records(&test_records, &schema, Split::Test)?;
    let dir = Prepared::dir(&cfg.out_dir);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    train.save(&dir.join("train.json"))?;
    test.save(&dir.join("test.json"))?;
    write_text(&dir.join("schema_spec.toml"), &spec.to_toml())?;
    let stats = vec![SplitStats::of(&train, "train"), SplitStats::of(&test, "test")];
    write_json(&dir.join("stats.json"), &stats)?;
    write_text(&dir.join("stats.md"), &stats_table(&stats))?;
    log::info!("prepared {} train / {} test instances", train.len(), test.len());
    Ok(stats)
}

/// Saved alongside a checkpoint bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub config_hash: String,
    pub fit: FitState,
    pub gan: Option<GanState>,
}

struct Checkpoints {
    dir: PathBuf,
}

impl Checkpoints {
    fn save(&self, bundle: &ModelBundle, progress: &Progress) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        bundle.save(&self.dir.join("checkpoint.bundle"))?;
        write_json(&self.dir.join("progress.json"), progress)
    }

    fn load(&self) -> Result<Option<(ModelBundle, Progress)>> {
        let (b, p) = (self.dir.join("checkpoint.bundle"), self.dir.join("progress.json"));
        if !b.exists() || !p.exists() {
            return Ok(None);
        }
        Ok(Some((ModelBundle::load(&b)?, read_json(&p)?)))
    }
}

fn write_trace(path: &Path, header: &[&str], cols: &[&[f64]]) -> Result<()> {
    let mut out = header.join(",");
    out.push('\n');
    let n = cols.iter().map(|c| c.len()).min().unwrap_or(0);
    for i in 0..n {
        let _ = write!(out, "{}", i + 1);
        for c in cols {
            let _ = write!(out, ",{}", c[i]);
        }
        out.push('\n');
    }
    write_text(path, &out)
}

/// Stops training after a checkpoint when it returns true; tests use it to
/// simulate an interrupted run.
pub type Halt<'a> = &'a dyn Fn(&Progress) -> bool;

fn halted() -> Error {
    Error::Training("halted after checkpoint".into())
}

fn fit_block<M>(model: &mut M, train: &Dataset, cfg: &RunConfig, fit_cfg: &crate::train::FitConfig, progress: &mut Progress, ckpt: &Checkpoints, provenance: &Provenance, halt: Halt) -> Result<()>
where
    M: SequenceModel + Clone + Into<AeBlock>,
{
    let every = cfg.checkpoint.ae_every_epochs;
    let hash = progress.config_hash.clone();
    fit(model, train, fit_cfg, cfg.seed.wrapping_add(seed_offset::AE_TRAIN), &mut progress.fit, |m, st| {
        if st.epoch % every == 0 || st.epoch == fit_cfg.epochs {
            let snapshot = Progress {
                config_hash: hash.clone(),
                fit: st.clone(),
                gan: None,
            };
            let bundle = ModelBundle {
                provenance: provenance.clone(),
                ae: m.clone().into(),
                gan: None,
            };
            ckpt.save(&bundle, &snapshot)?;
            if halt(&snapshot) {
                return Err(halted());
            }
        }
        Ok(())
    })
}

/// Trains the autoencoder, calibrates thresholds (incomplete data), then
/// trains the latent GAN, checkpointing along the way. With `resume` the
/// latest checkpoint of a run with the same config is continued.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<ModelBundle> {
    train_with_halt(cfg, resume, &|_| false)
}

pub fn train_with_halt(cfg: &RunConfig, resume: bool, halt: Halt) -> Result<ModelBundle> {
    cfg.validate()?;
    let prepared = Prepared::load(&cfg.out_dir)?;
    let train = &prepared.train;
    let mode = train.schema.mode;
    let resolved = cfg.resolve(mode, train.schema.layout().d_x)?;
    let hash = cfg.hash();
    let provenance = Provenance::new(hash.clone(), cfg.seed);
    let ckpt = Checkpoints {
        dir: cfg.out_dir.join("checkpoints"),
    };
    let train_dir = cfg.out_dir.join("train");
    fs::create_dir_all(&train_dir).map_err(|e| Error::io(&train_dir, e))?;

    let restored = if resume { ckpt.load()? } else { None };
    let (mut bundle, mut progress) = match restored {
        Some((b, p)) => {
            if p.config_hash != hash {
                return Err(Error::Config("checkpoint was written by a different config".into()));
            }
            log::info!("resuming at epoch {} / iteration {}", p.fit.epoch, p.gan.as_ref().map_or(0, |g| g.iteration));
            (b, p)
        }
        None => {
            let mut rng = stream_rng(cfg.seed.wrapping_add(seed_offset::AE_INIT), 0);
            let ae: AeBlock = match &resolved.model {
                ResolvedModel::Complete(c) => Autoencoder::new(&train.schema, c.clone(), &mut rng)?.into(),
                ResolvedModel::Incomplete(c) => MissingAutoencoder::new(train, c.clone(), &mut rng)?.into(),
            };
            let fit_state = FitState::new(ae.model(), &resolved.fit);
            (
                ModelBundle {
                    provenance: provenance.clone(),
                    ae,
                    gan: None,
                },
                Progress {
                    config_hash: hash.clone(),
                    fit: fit_state,
                    gan: None,
                },
            )
        }
    };

    if progress.fit.epoch < resolved.fit.epochs {
        let result = match &mut bundle.ae {
            AeBlock::Complete(m) => fit_block(m, train, cfg, &resolved.fit, &mut progress, &ckpt, &provenance, halt),
            AeBlock::Incomplete(m) => fit_block(m, train, cfg, &resolved.fit, &mut progress, &ckpt, &provenance, halt),
        };
        write_trace(&train_dir.join("ae_losses.csv"), &["epoch", "loss"], &[&progress.fit.losses])?;
        result?;
    }
    if let AeBlock::Incomplete(m) = &mut bundle.ae {
        if m.thresholds.is_none() {
            m.calibrate_thresholds(train);
        }
    }
    ModelBundle {
        gan: None,
        ..bundle.clone()
    }
    .save(&train_dir.join("ae.bundle"))?;

    let ModelBundle { ae, gan, .. } = &mut bundle;
    let gan = match gan {
        Some(g) => g,
        None => gan.insert(LatentGan::for_model(
            ae.model(),
            &resolved.gan,
            &mut stream_rng(cfg.seed.wrapping_add(seed_offset::GAN_INIT), 0),
        )?),
    };
    let mut state = progress.gan.take().unwrap_or_else(|| GanState::new(gan, &resolved.gan));
    let every = cfg.checkpoint.gan_every_iterations;
    let fit_state = progress.fit.clone();
    let result = train_wgan(ae.model(), train, gan, &resolved.gan, cfg.seed.wrapping_add(seed_offset::GAN_TRAIN), &mut state, |g, st| {
        if st.iteration % every == 0 || st.iteration == resolved.gan.iterations {
            let snapshot = Progress {
                config_hash: hash.clone(),
                fit: fit_state.clone(),
                gan: Some(st.clone()),
            };
            let b = ModelBundle {
                provenance: provenance.clone(),
                ae: ae.clone(),
                gan: Some(g.clone()),
            };
            ckpt.save(&b, &snapshot)?;
            if halt(&snapshot) {
                return Err(halted());
            }
        }
        Ok(())
    });
    write_trace(
        &train_dir.join("gan_losses.csv"),
        &["iteration", "wasserstein", "generator_loss"],
        &[&state.wasserstein, &state.generator_loss],
    )?;
    result?;
    progress.gan = Some(state);
    ckpt.save(&bundle, &progress)?;
    bundle.save(&train_dir.join("model.bundle"))?;
    Ok(bundle)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub bundle_sha256: String,
    pub schema_digest: String,
    pub output: String,
}

/// Samples `count` instances from a trained bundle into an observation file
/// at `output`, with `manifest.json` beside it.
pub fn cmd_generate(bundle_path: &Path, count: usize, seed: u64, output: &Path) -> Result<Manifest> {
    let bundle = ModelBundle::load(bundle_path)?;
    let gan = bundle
        .gan
        .as_ref()
        .ok_or_else(|| Error::Bundle(format!("{} has no GAN block; train it first", bundle_path.display())))?;
    if let AeBlock::Incomplete(m) = &bundle.ae {
        if m.thresholds.is_none() {
            return Err(Error::Bundle("missing-aware block has no calibrated thresholds".into()));
        }
    }
    let schema = bundle.ae.schema();
    let ds = generate_dataset(gan, bundle.ae.model(), schema, count, seed)?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_observations(output, &ds.to_records()?, schema)?;
    let manifest = Manifest {
        seed,
        count,
        bundle_sha256: file_sha256(bundle_path)?,
        schema_digest: schema.digest(),
        output: output.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
    };
    write_json(&output.with_file_name("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Reads a synthetic dataset: an observation file under the prepared spec, or
/// an encoded `.json` dataset.
pub fn load_synthetic(prepared: &Prepared, path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::Config(format!("synthetic data {} does not exist", path.display())));
    }
    let ds = if path.extension().is_some_and(|e| e == "json") {
        Dataset::load(path)?
    } else {
        let records = read_observations(path, &prepared.spec)?;
        Dataset::from_records(&records, &prepared.train.schema, Split::Synthetic)?
    };
    if ds.schema.layout() != prepared.train.schema.layout() {
        return Err(Error::Config("synthetic data does not match the prepared schema".into()));
    }
    Ok(ds)
}

/// Runs the configured metric grid over every evaluation seed and writes the
/// report under `eval/`.
pub fn cmd_evaluate(cfg: &RunConfig, synthetic: &Path) -> Result<EvalReport> {
    let prepared = Prepared::load(&cfg.out_dir)?;
    let mode: Mode = prepared.train.schema.mode;
    let grid = cfg.eval.grid(mode)?;
    let syn = load_synthetic(&prepared, synthetic)?;
    let seeds: Vec<u64> = cfg
        .eval
        .seeds
        .iter()
        .map(|s| cfg.seed.wrapping_add(seed_offset::EVAL).wrapping_add(*s))
        .collect();
    let report = evaluate(&prepared.train, &prepared.test, &syn, &grid, &seeds)?;
    let names: Vec<String> = prepared.train.schema.dynamic().map(|f| f.name.clone()).collect();
    report.write(&cfg.out_dir.join("eval"), &names)?;
    Ok(report)
}

fn trace_tail(path: &Path, col: usize) -> Option<f64> {
    let text = fs::read_to_string(path).ok()?;
    text.lines().last()?.split(',').nth(col)?.parse().ok()
}

/// Collects whatever the earlier commands produced into `report.md`.
pub fn cmd_report(cfg: &RunConfig) -> Result<String> {
    let out = &cfg.out_dir;
    let mut text = String::from("# Run report\n\n");
    let _ = writeln!(text, "Config hash `{}`, master seed {}.\n", cfg.hash(), cfg.seed);
    let mut any = false;
    if let Ok(stats) = fs::read_to_string(Prepared::dir(out).join("stats.md")) {
        let _ = writeln!(text, "## Data\n\n{stats}");
        any = true;
    }
    let train = out.join("train");
    let ae = trace_tail(&train.join("ae_losses.csv"), 1);
    let gan = trace_tail(&train.join("gan_losses.csv"), 1);
    if ae.is_some() || gan.is_some() {
        text.push_str("## Training\n\n");
        if let Some(v) = ae {
            let _ = writeln!(text, "- final autoencoder loss: {v:.6}");
        }
        if let Some(v) = gan {
            let _ = writeln!(text, "- final Wasserstein estimate: {v:.6}");
        }
        text.push('\n');
        any = true;
    }
    if let Ok(table) = fs::read_to_string(out.join("eval").join("report.md")) {
        let _ = writeln!(text, "## Evaluation\n\n{table}");
        any = true;
    }
    if !any {
        return Err(Error::Config(format!("nothing to report under {}", out.display())));
    }
    write_text(&out.join("report.md"), &text)?;
    Ok(text)
}
