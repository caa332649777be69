//! Downstream label classifiers for train-on-synthetic, test-on-real.

use nalgebra::{DMatrix, DVector};
use ndarray::{concatenate, s, Array1, Axis};
use serde::{Deserialize, Serialize};

use super::seqnet::{auc, Cell, NetConfig, SeqNet};
use crate::autograd::Mat;
use crate::data::{Dataset, Instance, Layout, Scaler, Schema};
use crate::error::{Error, Result};
use crate::model::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classifier {
    /// Zero-imputed values with masks.
    ZeroRnn,
    /// Last-value-imputed values with time lags.
    LastRnn,
    /// Logistic regression on per-window statistics.
    Lr,
    /// Recurrent classifier on regularly binned values.
    DiscreteLstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    MinMax,
    Standard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamSpec {
    pub classifier: Classifier,
    pub scaling: Scaling,
    /// Recurrent network of the RNN classifiers.
    pub net: NetConfig,
    /// Inverse L2 strength of logistic regression.
    pub lr_c: f64,
    /// Bin width of the discretized classifier, in raw time units.
    pub bin_width: f64,
}

impl DownstreamSpec {
    /// Recipe of `classifier` with the reference network sizes for larger
    /// (hidden 32, 40 epochs) or smaller (hidden 16, 30 epochs) benchmarks.
    pub fn new(classifier: Classifier, scaling: Scaling) -> Self {
        let net = match classifier {
            Classifier::DiscreteLstm => NetConfig {
                cell: Cell::Lstm,
                layers: 2,
                hidden: 16,
                epochs: 30,
                batch_size: 64,
                lr: 1e-3,
            },
            _ => NetConfig {
                cell: Cell::Gru,
                layers: 2,
                hidden: 32,
                epochs: 40,
                batch_size: 64,
                lr: 1e-3,
            },
        };
        Self {
            classifier,
            scaling,
            net,
            lr_c: 0.001,
            bin_width: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classifier == Classifier::DiscreteLstm && self.scaling != Scaling::Standard {
            return Err(Error::Config("the discretized LSTM uses standard scaling only".into()));
        }
        if !(self.lr_c > 0.0) || !(self.bin_width > 0.0) {
            return Err(Error::Config("lr_c and bin_width must be positive".into()));
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        let c = match self.classifier {
            Classifier::ZeroRnn => "zeroRNN",
            Classifier::LastRnn => "lastRNN",
            Classifier::Lr => "LR",
            Classifier::DiscreteLstm => "discreteLSTM",
        };
        let s = match self.scaling {
            Scaling::MinMax => "min-max",
            Scaling::Standard => "standard",
        };
        format!("{c}/{s}")
    }
}

/// The seven classifier/scaling pairs of the larger benchmark grid.
pub fn full_grid() -> Vec<DownstreamSpec> {
    let mut out = Vec::new();
    for scaling in [Scaling::MinMax, Scaling::Standard] {
        for c in [Classifier::Lr, Classifier::ZeroRnn, Classifier::LastRnn] {
            out.push(DownstreamSpec::new(c, scaling));
        }
    }
    out.push(DownstreamSpec::new(Classifier::DiscreteLstm, Scaling::Standard));
    out
}

/// The four recurrent pairs of the smaller benchmark grid.
pub fn rnn_grid() -> Vec<DownstreamSpec> {
    let mut out = Vec::new();
    for scaling in [Scaling::MinMax, Scaling::Standard] {
        for c in [Classifier::ZeroRnn, Classifier::LastRnn] {
            out.push(DownstreamSpec::new(c, scaling));
        }
    }
    out
}

/// Per-column affine scaling fitted on observed training values.
#[derive(Debug, Clone)]
pub struct ColumnScaler {
    offset: Vec<f64>,
    scale: Vec<f64>,
}

impl ColumnScaler {
    /// `values[c]` holds the observed values of column `c`.
    pub fn fit(values: &[Vec<f64>], scaling: Scaling) -> Self {
        let mut offset = Vec::with_capacity(values.len());
        let mut scale = Vec::with_capacity(values.len());
        for v in values {
            let (o, s) = if v.is_empty() {
                (0.0, 1.0)
            } else {
                match scaling {
                    Scaling::MinMax => {
                        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
                        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        (lo, hi - lo)
                    }
                    Scaling::Standard => {
                        let n = v.len() as f64;
                        let mean = v.iter().sum::<f64>() / n;
                        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                        (mean, var.sqrt())
                    }
                }
            };
            offset.push(o);
            scale.push(if s > 1e-12 { s } else { 1.0 });
        }
        Self { offset, scale }
    }

    pub fn apply(&self, c: usize, v: f64) -> f64 {
        (v - self.offset[c]) / self.scale[c]
    }
}

/// Global columns that may be fed to a classifier: everything but the label.
fn static_columns(schema: &Schema, layout: &Layout) -> Vec<(usize, usize)> {
    let label = schema.label_index();
    layout
        .global
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != label)
        .flat_map(|(j, slot)| (slot.start..slot.end()).map(move |c| (j, c)))
        .collect()
}

struct Scalers {
    dynamic: ColumnScaler,
    statics: ColumnScaler,
}

fn fit_scalers(train: &Dataset, scaling: Scaling) -> Scalers {
    let layout = train.schema.layout();
    let owner = layout.dynamic_column_owner();
    let mut dynamic = vec![Vec::new(); layout.d_x];
    let statics_cols = static_columns(&train.schema, &layout);
    let mut statics = vec![Vec::new(); statics_cols.len()];
    for inst in &train.instances {
        for (i, row) in inst.x.rows().into_iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if inst.mask[[i, owner[c]]] != 0.0 {
                    dynamic[c].push(v);
                }
            }
        }
        for (k, &(j, c)) in statics_cols.iter().enumerate() {
            if inst.global_mask[j] != 0.0 {
                statics[k].push(inst.y[c]);
            }
        }
    }
    Scalers {
        dynamic: ColumnScaler::fit(&dynamic, scaling),
        statics: ColumnScaler::fit(&statics, scaling),
    }
}

fn scaled_statics(inst: &Instance, cols: &[(usize, usize)], sc: &ColumnScaler) -> Array1<f64> {
    Array1::from_iter(cols.iter().enumerate().map(|(k, &(j, c))| {
        if inst.global_mask[j] != 0.0 {
            sc.apply(k, inst.y[c])
        } else {
            0.0
        }
    }))
}

fn repeat_rows(row: &Array1<f64>, l: usize) -> Mat {
    Mat::from_shape_fn((l, row.len()), |(_, c)| row[c])
}

/// `[statics, values, masks]` with missing values set to zero after scaling.
pub fn zero_rnn_input(inst: &Instance, schema: &Schema, sc: &ScalersRef) -> Mat {
    let layout = schema.layout();
    let owner = layout.dynamic_column_owner();
    let cols = static_columns(schema, &layout);
    let st = scaled_statics(inst, &cols, sc.statics);
    let x = Mat::from_shape_fn(inst.x.dim(), |(i, c)| {
        if inst.mask[[i, owner[c]]] != 0.0 {
            sc.dynamic.apply(c, inst.x[[i, c]])
        } else {
            0.0
        }
    });
    concatenate![Axis(1), repeat_rows(&st, inst.len()), x, inst.mask]
}

/// `[statics, values, time lags]` with the last observation carried forward
/// (zero before the first one) after scaling.
pub fn last_rnn_input(inst: &Instance, schema: &Schema, sc: &ScalersRef) -> Mat {
    let layout = schema.layout();
    let owner = layout.dynamic_column_owner();
    let cols = static_columns(schema, &layout);
    let st = scaled_statics(inst, &cols, sc.statics);
    let mut x = Mat::zeros(inst.x.dim());
    let mut last = vec![0.0; layout.d_x];
    for i in 0..inst.len() {
        for c in 0..layout.d_x {
            if inst.mask[[i, owner[c]]] != 0.0 {
                last[c] = sc.dynamic.apply(c, inst.x[[i, c]]);
            }
            x[[i, c]] = last[c];
        }
    }
    concatenate![Axis(1), repeat_rows(&st, inst.len()), x, inst.time_lags()]
}

/// Borrowed scalers, so callers outside this module can build inputs.
pub struct ScalersRef<'a> {
    pub dynamic: &'a ColumnScaler,
    pub statics: &'a ColumnScaler,
}

/// Scalar value of dynamic feature `j` at step `i`: the continuous value or
/// the category index.
fn feature_value(inst: &Instance, layout: &Layout, j: usize, i: usize) -> f64 {
    let slot = &layout.dynamic[j];
    if slot.categorical {
        argmax(inst.x.slice(s![i, slot.start..slot.end()]).iter().copied()) as f64
    } else {
        inst.x[[i, slot.start]]
    }
}

/// Fractions of the time span covered by the seven windows: the whole
/// sequence, the first 10/25/50% and the last 50/25/10%.
pub const WINDOWS: [(bool, f64); 7] = [
    (true, 1.0),
    (true, 0.1),
    (true, 0.25),
    (true, 0.5),
    (false, 0.5),
    (false, 0.25),
    (false, 0.1),
];

/// Statistics per window: min, max, mean, std, skew, count.
pub const STATS: usize = 6;

/// Adjusted Fisher-Pearson skewness; 0 below three values or at zero spread.
pub fn skewness(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 3 {
        return 0.0;
    }
    let nf = n as f64;
    let mean = v.iter().sum::<f64>() / nf;
    let m2 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
    if m2 <= 1e-24 {
        return 0.0;
    }
    let m3 = v.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / nf;
    let g1 = m3 / m2.powf(1.5);
    g1 * (nf * (nf - 1.0)).sqrt() / (nf - 2.0)
}

/// `6 x 7` statistics per dynamic feature, feature-major. Windows without
/// observations yield NaN for every statistic except the count.
pub fn lr_features(inst: &Instance, layout: &Layout) -> Vec<f64> {
    let l = inst.len();
    let (t0, tl) = (inst.t[0], inst.t[l - 1]);
    let span = tl - t0;
    let mut out = Vec::with_capacity(layout.k() * STATS * WINDOWS.len());
    for j in 0..layout.k() {
        for &(first, frac) in &WINDOWS {
            let vals: Vec<f64> = (0..l)
                .filter(|&i| {
                    let t = inst.t[i];
                    let inside = if first { t <= t0 + frac * span } else { t >= tl - frac * span };
                    inside && inst.mask[[i, j]] != 0.0
                })
                .map(|i| feature_value(inst, layout, j, i))
                .collect();
            if vals.is_empty() {
                out.extend([f64::NAN; STATS - 1]);
                out.push(0.0);
                continue;
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            out.push(vals.iter().copied().fold(f64::INFINITY, f64::min));
            out.push(vals.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            out.push(mean);
            out.push(std);
            out.push(skewness(&vals));
            out.push(n);
        }
    }
    out
}

/// L2-regularized logistic regression fitted by Newton's method. Minimizes
/// `0.5 |w|^2 + C * sum(logloss)`; the intercept is not penalized.
#[derive(Debug, Clone)]
pub struct LogisticRegression {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl LogisticRegression {
    pub fn fit(x: &Mat, y: &[f64], c: f64) -> Result<Self> {
        let (n, p) = x.dim();
        let mut design = Mat::ones((n, p + 1));
        design.slice_mut(s![.., ..p]).assign(x);
        let yv = Array1::from(y.to_vec());
        let mut w = Array1::<f64>::zeros(p + 1);
        for _ in 0..100 {
            let z = design.dot(&w);
            let prob = z.mapv(|v| 1.0 / (1.0 + (-v).exp()));
            let mut grad = design.t().dot(&(&prob - &yv)) * c;
            let mut reg = w.clone();
            reg[p] = 0.0;
            grad += &reg;
            let s_diag = prob.mapv(|q| (q * (1.0 - q)).max(1e-12) * c);
            let weighted = &design * &s_diag.view().insert_axis(Axis(1));
            let mut hess = design.t().dot(&weighted);
            for i in 0..p {
                hess[[i, i]] += 1.0;
            }
            hess[[p, p]] += 1e-10;
            let h = DMatrix::from_row_slice(p + 1, p + 1, hess.as_slice().expect("standard layout"));
            let gvec = DVector::from_column_slice(grad.as_slice().expect("contiguous"));
            let step = h
                .cholesky()
                .ok_or_else(|| Error::Eval("logistic regression Hessian is not positive definite".into()))?
                .solve(&gvec);
            let norm = step.norm();
            for i in 0..=p {
                w[i] -= step[i];
            }
            if norm < 1e-10 * (1.0 + w.dot(&w).sqrt()) {
                break;
            }
        }
        Ok(Self {
            weights: w.slice(s![..p]).to_vec(),
            intercept: w[p],
        })
    }

    pub fn decision(&self, x: &Mat) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|r| r.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.intercept)
            .collect()
    }
}

fn lr_matrix(ds: &Dataset) -> Mat {
    let layout = ds.schema.layout();
    let rows: Vec<Vec<f64>> = ds.instances.iter().map(|i| lr_features(i, &layout)).collect();
    let p = layout.k() * STATS * WINDOWS.len();
    Mat::from_shape_fn((rows.len(), p), |(r, c)| rows[r][c])
}

fn run_lr(train: &Dataset, test: &Dataset, spec: &DownstreamSpec, y: &[f64]) -> Result<Vec<f64>> {
    let (mut xtr, mut xte) = (lr_matrix(train), lr_matrix(test));
    let p = xtr.ncols();
    let means: Vec<f64> = (0..p)
        .map(|c| {
            let v: Vec<f64> = xtr.column(c).iter().copied().filter(|v| v.is_finite()).collect();
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        })
        .collect();
    for m in [&mut xtr, &mut xte] {
        for ((_, c), v) in m.indexed_iter_mut() {
            if !v.is_finite() {
                *v = means[c];
            }
        }
    }
    let cols: Vec<Vec<f64>> = (0..p).map(|c| xtr.column(c).to_vec()).collect();
    let sc = ColumnScaler::fit(&cols, spec.scaling);
    for m in [&mut xtr, &mut xte] {
        for ((_, c), v) in m.indexed_iter_mut() {
            *v = sc.apply(c, *v);
        }
    }
    let model = LogisticRegression::fit(&xtr, y, spec.lr_c)?;
    Ok(model.decision(&xte))
}

/// Values binned into intervals of `width` (encoded time units): the last
/// observation of each bin, else the feature's normal value; standardized,
/// followed by the bin masks.
fn discrete_input(inst: &Instance, layout: &Layout, width: f64, fill: &[f64], sc: &ColumnScaler) -> Mat {
    let owner = layout.dynamic_column_owner();
    let bins = (inst.t[inst.len() - 1] / width).floor() as usize + 1;
    let mut x = Mat::from_shape_fn((bins, layout.d_x), |(_, c)| fill[c]);
    let mut m = Mat::zeros((bins, layout.k()));
    for i in 0..inst.len() {
        let b = ((inst.t[i] / width).floor() as usize).min(bins - 1);
        for c in 0..layout.d_x {
            if inst.mask[[i, owner[c]]] != 0.0 {
                x[[b, c]] = inst.x[[i, c]];
                m[[b, owner[c]]] = 1.0;
            }
        }
    }
    x.indexed_iter_mut().for_each(|((_, c), v)| *v = sc.apply(c, *v));
    concatenate![Axis(1), x, m]
}

fn normal_values(schema: &Schema, layout: &Layout, train_means: &ColumnScaler) -> Vec<f64> {
    let mut out = vec![0.0; layout.d_x];
    for (feat, slot) in schema.dynamic().zip(&layout.dynamic) {
        match &feat.scaler {
            Scaler::Continuous { normal_value, .. } => {
                out[slot.start] = match normal_value {
                    Some(v) => feat.scaler.scale(*v),
                    None => train_means.offset[slot.start],
                };
            }
            Scaler::Categorical { vocab, normal_value } => {
                let hot = normal_value.as_ref().and_then(|v| vocab.iter().position(|c| c == v)).unwrap_or(0);
                out[slot.start + hot] = 1.0;
            }
        }
    }
    out
}

/// Labels of a dataset as 0/1.
fn binary_labels(ds: &Dataset) -> Result<Vec<f64>> {
    let y = ds.labels()?;
    Ok(y.into_iter().map(|v| f64::from(v > 0.5)).collect())
}

/// Trains the classifier of `spec` on `train` and returns its AUC on `test`.
pub fn run_downstream(train: &Dataset, test: &Dataset, spec: &DownstreamSpec, seed: u64) -> Result<f64> {
    spec.validate()?;
    if train.schema.layout() != test.schema.layout() {
        return Err(Error::Eval("train and test layouts differ".into()));
    }
    let ytr = binary_labels(train)?;
    let yte = binary_labels(test)?;
    let pos = ytr.iter().filter(|&&v| v == 1.0).count();
    if pos == 0 || pos == ytr.len() {
        return Err(Error::Eval("training labels contain a single class".into()));
    }
    let schema = &train.schema;
    let layout = schema.layout();
    let scores = match spec.classifier {
        Classifier::Lr => run_lr(train, test, spec, &ytr)?,
        Classifier::ZeroRnn | Classifier::LastRnn => {
            let sc = fit_scalers(train, spec.scaling);
            let r = ScalersRef {
                dynamic: &sc.dynamic,
                statics: &sc.statics,
            };
            let build = |ds: &Dataset| -> Vec<Mat> {
                ds.instances
                    .iter()
                    .map(|i| match spec.classifier {
                        Classifier::ZeroRnn => zero_rnn_input(i, schema, &r),
                        _ => last_rnn_input(i, schema, &r),
                    })
                    .collect()
            };
            let net = SeqNet::fit_classifier(&build(train), &ytr, &spec.net, seed);
            net.predict_proba(&build(test))
        }
        Classifier::DiscreteLstm => {
            let sc = fit_scalers(train, Scaling::Standard);
            let fill = normal_values(schema, &layout, &sc.dynamic);
            let width = spec.bin_width / schema.time_scale;
            let build = |ds: &Dataset| -> Vec<Mat> {
                ds.instances
                    .iter()
                    .map(|i| discrete_input(i, &layout, width, &fill, &sc.dynamic))
                    .collect()
            };
            let net = SeqNet::fit_classifier(&build(train), &ytr, &spec.net, seed);
            net.predict_proba(&build(test))
        }
    };
    auc(&scores, &yte).ok_or_else(|| Error::Eval("test labels contain a single class".into()))
}
