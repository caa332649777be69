//! Runs a metric grid over several seeds and collects the results.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::downstream::{run_downstream, DownstreamSpec};
use super::fidelity::{discriminative_score, predictive_score, DiscriminativeConfig, PredictiveConfig};
use super::figures::{heatmap_image, save_png, scatter_image, write_matrix_csv};
use super::patterns::{flatten_sequences, matrix_similarity, pearson_missing_heatmap, Pca};
use crate::autograd::Mat;
use crate::data::{Dataset, Mode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl Summary {
    /// Mean and population standard deviation; one value gives std 0.
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self { mean, std, values }
    }

    pub fn display(&self) -> String {
        format!("{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    #[serde(default)]
    pub discriminative: Option<DiscriminativeConfig>,
    #[serde(default)]
    pub predictive: Option<PredictiveConfig>,
    /// Also score the predictor trained on real data.
    #[serde(default)]
    pub predictive_oracle: bool,
    #[serde(default)]
    pub downstream: Vec<DownstreamSpec>,
    /// Also score every classifier trained on real data.
    #[serde(default)]
    pub downstream_oracle: bool,
    /// Instances per side in the projection and heatmap figures.
    pub projection_sample: usize,
}

impl EvalGrid {
    pub fn complete() -> Self {
        Self {
            discriminative: Some(DiscriminativeConfig::default()),
            predictive: Some(PredictiveConfig::default()),
            predictive_oracle: true,
            downstream: Vec::new(),
            downstream_oracle: false,
            projection_sample: 500,
        }
    }

    pub fn incomplete(downstream: Vec<DownstreamSpec>) -> Self {
        Self {
            discriminative: None,
            predictive: None,
            predictive_oracle: false,
            downstream,
            downstream_oracle: true,
            projection_sample: 500,
        }
    }

    /// Rejects metrics that do not apply to data of this mode.
    pub fn check_mode(&self, mode: Mode) -> Result<()> {
        if mode == Mode::Incomplete && self.predictive.is_some() {
            return Err(Error::Config("predictive score is defined for complete data only".into()));
        }
        if mode == Mode::Complete && !self.downstream.is_empty() {
            return Err(Error::Config("downstream classifiers need labelled incomplete data".into()));
        }
        for s in &self.downstream {
            s.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamResult {
    pub spec: String,
    pub tstr: Summary,
    pub trtr: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seeds: Vec<u64>,
    pub discriminative: Option<Summary>,
    pub predictive: Option<Summary>,
    pub predictive_oracle: Option<Summary>,
    pub downstream: Vec<DownstreamResult>,
    pub average_tstr: Option<f64>,
    pub average_trtr: Option<f64>,
    /// Missing-rate Pearson matrices of real and synthetic data.
    pub pearson_real: Option<Mat>,
    pub pearson_synthetic: Option<Mat>,
    /// Features whose missing rate never varies; their correlations are 0.
    pub constant_missing_features: Vec<String>,
    pub pearson_similarity: Option<f64>,
    /// PCA coordinates of flattened real and synthetic sequences.
    pub projection_real: Mat,
    pub projection_synthetic: Mat,
    pub grid: EvalGrid,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores `synthetic` against the real training and test splits. Every
/// seed-dependent metric runs once per seed.
pub fn evaluate(real_train: &Dataset, real_test: &Dataset, synthetic: &Dataset, grid: &EvalGrid, seeds: &[u64]) -> Result<EvalReport> {
    let mode = real_train.schema.mode;
    grid.check_mode(mode)?;
    if seeds.is_empty() {
        return Err(Error::Config("at least one evaluation seed is required".into()));
    }
    let per_seed = |f: &dyn Fn(u64) -> Result<f64>| -> Result<Summary> {
        Ok(Summary::of(seeds.iter().map(|&s| f(s)).collect::<Result<Vec<_>>>()?))
    };
    let discriminative = grid
        .discriminative
        .as_ref()
        .map(|c| per_seed(&|s| discriminative_score(real_train, synthetic, c, s)))
        .transpose()?;
    let predictive = grid
        .predictive
        .as_ref()
        .map(|c| per_seed(&|s| predictive_score(synthetic, real_test, c, s)))
        .transpose()?;
    let predictive_oracle = match (&grid.predictive, grid.predictive_oracle) {
        (Some(c), true) => Some(per_seed(&|s| predictive_score(real_train, real_test, c, s))?),
        _ => None,
    };
    let mut downstream = Vec::new();
    for spec in &grid.downstream {
        let tstr = per_seed(&|s| run_downstream(synthetic, real_test, spec, s))?;
        let trtr = grid
            .downstream_oracle
            .then(|| per_seed(&|s| run_downstream(real_train, real_test, spec, s)))
            .transpose()?;
        log::info!("{}: TSTR {}", spec.name(), tstr.display());
        downstream.push(DownstreamResult {
            spec: spec.name(),
            tstr,
            trtr,
        });
    }
    let average_tstr = mean(&downstream.iter().map(|d| d.tstr.mean).collect::<Vec<_>>());
    let average_trtr = mean(&downstream.iter().filter_map(|d| d.trtr.as_ref().map(|t| t.mean)).collect::<Vec<_>>());

    let (mut pearson_real, mut pearson_synthetic, mut pearson_similarity) = (None, None, None);
    let mut constant_missing_features = Vec::new();
    if mode == Mode::Incomplete && real_train.len() >= 2 && synthetic.len() >= 2 {
        let (pr, fr) = pearson_missing_heatmap(real_train)?;
        let (ps, fs) = pearson_missing_heatmap(synthetic)?;
        let layout = real_train.schema.layout();
        let mut flat: Vec<usize> = fr.into_iter().chain(fs).collect();
        flat.sort_unstable();
        flat.dedup();
        constant_missing_features = flat.into_iter().map(|j| layout.dynamic[j].name.clone()).collect();
        pearson_similarity = Some(matrix_similarity(&pr, &ps));
        pearson_real = Some(pr);
        pearson_synthetic = Some(ps);
    }

    let n = grid.projection_sample;
    let (fr, fs) = (flatten_sequences(real_train, n), flatten_sequences(synthetic, n));
    let width = fr.ncols().max(fs.ncols());
    let pad = |m: &Mat| {
        let mut out = Mat::zeros((m.nrows(), width));
        out.slice_mut(ndarray::s![.., ..m.ncols()]).assign(m);
        out
    };
    let (fr, fs) = (pad(&fr), pad(&fs));
    let (projection_real, projection_synthetic) = match Pca::fit(&fr, 2) {
        Ok(pca) if width > 0 => (pca.transform(&fr), pca.transform(&fs)),
        _ => (Mat::zeros((0, 2)), Mat::zeros((0, 2))),
    };

    Ok(EvalReport {
        seeds: seeds.to_vec(),
        discriminative,
        predictive,
        predictive_oracle,
        downstream,
        average_tstr,
        average_trtr,
        pearson_real,
        pearson_synthetic,
        constant_missing_features,
        pearson_similarity,
        projection_real,
        projection_synthetic,
        grid: grid.clone(),
    })
}

impl EvalReport {
    /// Plain-text tables: fidelity scores, then TSTR (and TRTR) AUCs with
    /// min-max and standard scaling side by side.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        if self.discriminative.is_some() || self.predictive.is_some() {
            let _ = writeln!(out, "| Data | Discriminative | Predictive |");
            let _ = writeln!(out, "|---|---|---|");
            let cell = |s: &Option<Summary>| s.as_ref().map_or("-".to_string(), Summary::display);
            let _ = writeln!(out, "| Synthetic | {} | {} |", cell(&self.discriminative), cell(&self.predictive));
            if self.predictive_oracle.is_some() {
                let _ = writeln!(out, "| Original | - | {} |", cell(&self.predictive_oracle));
            }
        }
        if !self.downstream.is_empty() {
            if !out.is_empty() {
                out.push('\n');
            }
            let specs: Vec<&str> = self.downstream.iter().map(|d| d.spec.as_str()).collect();
            let _ = writeln!(out, "| Data | {} | Average |", specs.join(" | "));
            let _ = writeln!(out, "|---|{}---|", "---|".repeat(specs.len()));
            let row = |pick: &dyn Fn(&DownstreamResult) -> Option<Summary>, avg: Option<f64>| {
                let cells: Vec<String> = self
                    .downstream
                    .iter()
                    .map(|d| pick(d).map_or("-".into(), |s| s.display()))
                    .collect();
                format!("{} | {}", cells.join(" | "), avg.map_or("-".into(), |a| format!("{a:.4}")))
            };
            if self.average_trtr.is_some() {
                let _ = writeln!(out, "| Original | {} |", row(&|d| d.trtr.clone(), self.average_trtr));
            }
            let _ = writeln!(out, "| Synthetic | {} |", row(&|d| Some(d.tstr.clone()), self.average_tstr));
        }
        if let Some(s) = self.pearson_similarity {
            let _ = writeln!(out, "\nMissing-rate correlation similarity: {s:.4}");
        }
        if !self.constant_missing_features.is_empty() {
            let _ = writeln!(
                out,
                "Constant missing rate (correlations set to 0): {}",
                self.constant_missing_features.join(", ")
            );
        }
        out
    }

    /// Writes `report.json`, `report.md`, figures and their CSV tables.
    pub fn write(&self, dir: &Path, feature_names: &[String]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Eval(e.to_string()))?;
        let path = dir.join("report.json");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("report.md");
        std::fs::write(&path, self.to_table()).map_err(|e| Error::io(&path, e))?;
        let xy = vec!["pc1".to_string(), "pc2".to_string()];
        write_matrix_csv(&self.projection_real, &xy, &dir.join("pca_real.csv"))?;
        write_matrix_csv(&self.projection_synthetic, &xy, &dir.join("pca_synthetic.csv"))?;
        let img = scatter_image(&[&self.projection_real, &self.projection_synthetic], &[[220, 30, 30], [30, 30, 220]]);
        save_png(&img, &dir.join("pca.png"))?;
        for (name, m) in [("real", &self.pearson_real), ("synthetic", &self.pearson_synthetic)] {
            if let Some(m) = m {
                write_matrix_csv(m, feature_names, &dir.join(format!("missing_pearson_{name}.csv")))?;
                save_png(&heatmap_image(m), &dir.join(format!("missing_pearson_{name}.png")))?;
            }
        }
        Ok(())
    }
}
