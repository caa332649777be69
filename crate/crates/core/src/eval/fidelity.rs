//! Discriminative and predictive scores.

use ndarray::{concatenate, s, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::seqnet::{Cell, NetConfig, SeqNet};
use crate::autograd::Mat;
use crate::data::{Dataset, Instance, Mode};
use crate::error::{Error, Result};
use crate::model::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminativeConfig {
    pub net: NetConfig,
    /// Share of the pooled sequences used to train the classifier.
    pub train_fraction: f64,
}

impl Default for DiscriminativeConfig {
    fn default() -> Self {
        Self {
            net: NetConfig {
                cell: Cell::Lstm,
                layers: 2,
                hidden: 16,
                epochs: 20,
                batch_size: 128,
                lr: 1e-3,
            },
            train_fraction: 0.8,
        }
    }
}

/// What the next-step predictor has to forecast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictTarget {
    /// The last dynamic column, from the other columns of earlier steps.
    #[default]
    LastFeature,
    /// Every dynamic column, from all columns of earlier steps.
    AllFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveConfig {
    pub net: NetConfig,
    #[serde(default)]
    pub target: PredictTarget,
}

impl Default for PredictiveConfig {
    fn default() -> Self {
        Self {
            net: NetConfig {
                cell: Cell::Lstm,
                layers: 2,
                hidden: 16,
                epochs: 20,
                batch_size: 128,
                lr: 1e-3,
            },
            target: PredictTarget::LastFeature,
        }
    }
}

/// Step features seen by the discriminator: dynamic values, plus masks,
/// timestamps and globals for incomplete data.
pub fn step_features(inst: &Instance, mode: Mode) -> Mat {
    match mode {
        Mode::Complete => inst.x.clone(),
        Mode::Incomplete => {
            let l = inst.len();
            let t = inst.t.view().insert_axis(Axis(1)).to_owned();
            let y = Mat::from_shape_fn((l, inst.y.len()), |(_, c)| inst.y[c]);
            concatenate![Axis(1), inst.x, inst.mask, t, y]
        }
    }
}

fn fingerprint(ds: &Dataset) -> Vec<u8> {
    let mut h = Sha256::new();
    for inst in &ds.instances {
        for v in inst.x.iter().chain(inst.mask.iter()).chain(inst.t.iter()).chain(inst.y.iter()) {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().to_vec()
}

/// `|0.5 - accuracy|` of a recurrent classifier telling the two sets apart
/// on held-out sequences. Both sides are subsampled to the same size. The
/// result does not depend on the argument order.
pub fn discriminative_score(real: &Dataset, synthetic: &Dataset, cfg: &DiscriminativeConfig, seed: u64) -> Result<f64> {
    if real.len() < 2 || synthetic.len() < 2 {
        return Err(Error::Eval("discriminative score needs at least 2 instances per side".into()));
    }
    if real.schema.layout() != synthetic.schema.layout() {
        return Err(Error::Eval("datasets have different layouts".into()));
    }
    let (a, b) = if fingerprint(real) <= fingerprint(synthetic) {
        (real, synthetic)
    } else {
        (synthetic, real)
    };
    let mode = real.schema.mode;
    let n = a.len().min(b.len());
    let mut rng = stream_rng(seed, 0);
    let mut pool: Vec<(Mat, f64)> = Vec::with_capacity(2 * n);
    for (ds, label) in [(a, 1.0), (b, 0.0)] {
        let mut idx: Vec<usize> = (0..ds.len()).collect();
        idx.shuffle(&mut rng);
        pool.extend(idx[..n].iter().map(|&i| (step_features(&ds.instances[i], mode), label)));
    }
    pool.shuffle(&mut rng);
    let cut = ((pool.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, pool.len() - 1);
    let (train, test) = pool.split_at(cut);
    let (xs, ys): (Vec<Mat>, Vec<f64>) = train.iter().cloned().unzip();
    let net = SeqNet::fit_classifier(&xs, &ys, &cfg.net, seed.wrapping_add(1));
    let test_x: Vec<Mat> = test.iter().map(|(x, _)| x.clone()).collect();
    let p = net.predict_proba(&test_x);
    let correct = p
        .iter()
        .zip(test)
        .filter(|(&p, (_, y))| (p > 0.5) == (*y > 0.5))
        .count();
    Ok((0.5 - correct as f64 / test.len() as f64).abs())
}

fn next_step_pairs(ds: &Dataset, target: PredictTarget) -> Result<(Vec<Mat>, Vec<Mat>)> {
    let mut xs = Vec::with_capacity(ds.len());
    let mut ys = Vec::with_capacity(ds.len());
    for inst in &ds.instances {
        let l = inst.len();
        if l < 2 {
            return Err(Error::Eval("next-step prediction needs sequences of length >= 2".into()));
        }
        let d = inst.x.ncols();
        let past = inst.x.slice(s![..l - 1, ..]);
        let next = inst.x.slice(s![1.., ..]);
        let (x, y) = match target {
            PredictTarget::AllFeatures => (past.to_owned(), next.to_owned()),
            PredictTarget::LastFeature if d == 1 => (past.to_owned(), next.to_owned()),
            PredictTarget::LastFeature => (past.slice(s![.., ..d - 1]).to_owned(), next.slice(s![.., d - 1..]).to_owned()),
        };
        xs.push(x);
        ys.push(y);
    }
    Ok((xs, ys))
}

/// Mean absolute next-step error on `test` of a recurrent predictor trained
/// on `train`. Train on synthetic and test on real for the usual score.
pub fn predictive_score(train: &Dataset, test: &Dataset, cfg: &PredictiveConfig, seed: u64) -> Result<f64> {
    for ds in [train, test] {
        if ds.schema.mode != Mode::Complete || ds.instances.iter().any(|i| i.mask.iter().any(|&m| m == 0.0)) {
            return Err(Error::Config("predictive score is defined for complete data only".into()));
        }
        if ds.is_empty() {
            return Err(Error::Eval("predictive score needs non-empty datasets".into()));
        }
    }
    let (xs, ys) = next_step_pairs(train, cfg.target)?;
    let net = SeqNet::fit_regressor(&xs, &ys, &cfg.net, seed);
    let (tx, ty) = next_step_pairs(test, cfg.target)?;
    let pred = net.predict_steps(&tx);
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, y) in pred.iter().zip(&ty) {
        total += (p - y).mapv(f64::abs).sum();
        count += y.len();
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::testutil::complete_sines;

    fn quick() -> DiscriminativeConfig {
        let mut c = DiscriminativeConfig::default();
        c.net.epochs = 40;
        c.net.lr = 5e-3;
        c
    }

    #[test]
    fn halves_of_one_set_are_indistinguishable() {
        let ds = complete_sines(400, 8, 2, 0);
        let a = ds.subset(&(0..200).collect::<Vec<_>>());
        let b = ds.subset(&(200..400).collect::<Vec<_>>());
        let score = discriminative_score(&a, &b, &quick(), 1).unwrap();
        assert!(score < 0.1, "{score}");
    }

    #[test]
    fn constant_fakes_are_spotted() {
        let ds = complete_sines(200, 8, 2, 0);
        let fake: Vec<Instance> = ds
            .instances
            .iter()
            .map(|i| Instance::new(Mat::from_elem(i.x.dim(), 0.5), i.mask.clone(), i.y.clone(), i.global_mask.clone(), i.t.clone()).unwrap())
            .collect();
        let fake = Dataset::new(ds.schema.clone(), Split::Synthetic, fake).unwrap();
        let score = discriminative_score(&ds, &fake, &quick(), 1).unwrap();
        assert!(score > 0.4, "{score}");
    }

    #[test]
    fn argument_order_does_not_matter() {
        let ds = complete_sines(60, 5, 2, 3);
        let other = complete_sines(60, 5, 2, 4);
        let mut cfg = quick();
        cfg.net.epochs = 2;
        assert_eq!(
            discriminative_score(&ds, &other, &cfg, 5).unwrap(),
            discriminative_score(&other, &ds, &cfg, 5).unwrap()
        );
    }

    #[test]
    fn too_few_instances_is_an_error() {
        let ds = complete_sines(1, 5, 2, 0);
        assert!(matches!(discriminative_score(&ds, &ds, &quick(), 0), Err(Error::Eval(_))));
    }

    #[test]
    fn constant_data_is_predicted_exactly() {
        let ds = complete_sines(50, 6, 3, 0);
        let flat: Vec<Instance> = ds
            .instances
            .iter()
            .map(|i| Instance::new(Mat::from_elem(i.x.dim(), 0.5), i.mask.clone(), i.y.clone(), i.global_mask.clone(), i.t.clone()).unwrap())
            .collect();
        let flat = Dataset::new(ds.schema.clone(), Split::Train, flat).unwrap();
        let mut cfg = PredictiveConfig::default();
        cfg.net.epochs = 40;
        cfg.net.lr = 1e-2;
        let mae = predictive_score(&flat, &flat, &cfg, 0).unwrap();
        assert!(mae < 0.01, "{mae}");
    }

    #[test]
    fn prediction_shapes_follow_the_target() {
        let ds = complete_sines(3, 6, 3, 0);
        let (x, y) = next_step_pairs(&ds, PredictTarget::LastFeature).unwrap();
        assert_eq!((x[0].dim(), y[0].dim()), ((5, 2), (5, 1)));
        let (x, y) = next_step_pairs(&ds, PredictTarget::AllFeatures).unwrap();
        assert_eq!((x[0].dim(), y[0].dim()), ((5, 3), (5, 3)));
        let short = complete_sines(3, 1, 3, 0);
        assert!(matches!(next_step_pairs(&short, PredictTarget::AllFeatures), Err(Error::Eval(_))));
    }
}
