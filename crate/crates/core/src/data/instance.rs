//! Encoded instances and the per-instance mask machinery.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::data::raw::{RawRecord, RawValue};
use crate::data::schema::{Mode, Scaler, Schema, UnseenPolicy, OTHER_CATEGORY};
use crate::error::{Error, Result};

/// One encoded sequence.
///
/// `x` is `l x d_x` in `[0, 1]`, `mask` is `l x K` with 1 for observed,
/// `y` holds the encoded global features and `global_mask` one bit per
/// global feature. Masked-out entries of `x` and `y` are exactly 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub x: Mat,
    pub mask: Mat,
    pub y: Array1<f64>,
    pub global_mask: Array1<f64>,
    pub t: Array1<f64>,
}

impl Instance {
    /// Validates shapes and the timestamp ordering.
    pub fn new(x: Mat, mask: Mat, y: Array1<f64>, global_mask: Array1<f64>, t: Array1<f64>) -> Result<Self> {
        let l = t.len();
        if l == 0 {
            return Err(Error::Data("instance has no steps".into()));
        }
        if x.nrows() != l || mask.nrows() != l {
            return Err(Error::Data(format!(
                "row counts disagree: t {l}, x {}, mask {}",
                x.nrows(),
                mask.nrows()
            )));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite timestamp".into()));
        }
        if t.windows(2).into_iter().any(|w| w[1] <= w[0]) {
            return Err(Error::Data("timestamps must strictly increase".into()));
        }
        Ok(Self {
            x,
            mask,
            y,
            global_mask,
            t,
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Evenly spaced timestamps `i / (l - 1)` used in complete mode.
pub fn uniform_times(l: usize) -> Array1<f64> {
    if l <= 1 {
        Array1::zeros(l)
    } else {
        Array1::from_shape_fn(l, |i| i as f64 / (l - 1) as f64)
    }
}

fn encode_value(
    scaler: &Scaler,
    name: &str,
    value: &RawValue,
    policy: UnseenPolicy,
    out: &mut ndarray::ArrayViewMut1<f64>,
) -> Result<()> {
    match scaler {
        Scaler::Continuous { .. } => {
            let v = value
                .as_f64()
                .ok_or_else(|| Error::Data(format!("non-numeric value {value:?} in {name:?}")))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("non-finite value in {name:?}")));
            }
            out[0] = scaler.scale(v);
        }
        Scaler::Categorical { vocab, .. } => {
            let label = value.as_category();
            let idx = match vocab.iter().position(|c| *c == label) {
                Some(i) => i,
                None => match policy {
                    UnseenPolicy::Other => vocab
                        .iter()
                        .position(|c| c == OTHER_CATEGORY)
                        .expect("fitted with other bucket"),
                    UnseenPolicy::Error => {
                        return Err(Error::Vocab {
                            feature: name.into(),
                            value: label,
                        })
                    }
                },
            };
            out.fill(0.0);
            out[idx] = 1.0;
        }
    }
    Ok(())
}

fn decode_value(scaler: &Scaler, encoded: ndarray::ArrayView1<f64>) -> RawValue {
    match scaler {
        Scaler::Continuous { .. } => RawValue::Num(scaler.unscale(encoded[0])),
        Scaler::Categorical { vocab, .. } => {
            let mut best = 0;
            for (i, &v) in encoded.iter().enumerate() {
                if v > encoded[best] {
                    best = i;
                }
            }
            RawValue::Cat(vocab[best].clone())
        }
    }
}

/// Encodes a raw record: min-max for continuous, one-hot for categorical,
/// zero value and zero mask for missing entries, timestamps rescaled.
pub fn transform(raw: &RawRecord, schema: &Schema) -> Result<Instance> {
    let layout = schema.layout();
    let l = raw.len();
    if l == 0 {
        return Err(Error::Data(format!("instance {:?} has no steps", raw.id)));
    }
    let n_user_globals = schema.global().count();
    if raw.global.len() != n_user_globals {
        return Err(Error::Schema(format!(
            "instance {:?} has {} global values, schema declares {n_user_globals}",
            raw.id,
            raw.global.len()
        )));
    }
    let mut x = Array2::zeros((l, layout.d_x));
    let mut mask = Array2::zeros((l, layout.k()));
    for (i, row) in raw.dynamic.iter().enumerate() {
        if row.len() != layout.k() {
            return Err(Error::Schema(format!(
                "instance {:?} step {i} has {} dynamic values, schema declares {}",
                raw.id,
                row.len(),
                layout.k()
            )));
        }
        for (j, (f, slot)) in schema.dynamic().zip(&layout.dynamic).enumerate() {
            match &row[j] {
                Some(v) => {
                    let mut out = x.slice_mut(ndarray::s![i, slot.start..slot.end()]);
                    encode_value(&f.scaler, &f.name, v, schema.unseen_category, &mut out)?;
                    mask[[i, j]] = 1.0;
                }
                None if schema.mode == Mode::Complete => {
                    return Err(Error::Data(format!(
                        "instance {:?} has a missing {:?} in complete mode",
                        raw.id, f.name
                    )))
                }
                None => {}
            }
        }
    }
    let mut y = Array1::zeros(layout.d_y);
    let mut global_mask = Array1::zeros(layout.n_global());
    for (j, (f, slot)) in schema.global().zip(&layout.global).enumerate() {
        if let Some(v) = &raw.global[j] {
            let mut out = y.slice_mut(ndarray::s![slot.start..slot.end()]);
            encode_value(&f.scaler, &f.name, v, schema.unseen_category, &mut out)?;
            global_mask[j] = 1.0;
        }
    }
    if schema.length_feature {
        let j = layout.n_global() - 1;
        y[layout.global[j].start] = schema.encode_length(l)?;
        global_mask[j] = 1.0;
    }
    let t = match schema.mode {
        Mode::Complete => uniform_times(l),
        Mode::Incomplete => {
            if raw.times.len() != l {
                return Err(Error::Data(format!("instance {:?}: {} times for {l} steps", raw.id, raw.times.len())));
            }
            let t0 = raw.times[0];
            Array1::from_iter(raw.times.iter().map(|&v| (v - t0) / schema.time_scale))
        }
    };
    Instance::new(x, mask, y, global_mask, t).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("instance {:?}: {m}", raw.id)),
        other => other,
    })
}

/// Decodes an instance back to original units. Masked entries become `None`
/// whatever value is stored. Times are relative to the first step.
pub fn inverse_transform(inst: &Instance, schema: &Schema, id: impl Into<String>) -> Result<RawRecord> {
    let layout = schema.layout();
    if inst.x.ncols() != layout.d_x
        || inst.mask.ncols() != layout.k()
        || inst.y.len() != layout.d_y
        || inst.global_mask.len() != layout.n_global()
    {
        return Err(Error::Schema("instance dimensions do not match the schema".into()));
    }
    let l = inst.len();
    let mut dynamic = Vec::with_capacity(l);
    for i in 0..l {
        let row = schema
            .dynamic()
            .zip(&layout.dynamic)
            .enumerate()
            .map(|(j, (f, slot))| {
                (inst.mask[[i, j]] != 0.0)
                    .then(|| decode_value(&f.scaler, inst.x.slice(ndarray::s![i, slot.start..slot.end()])))
            })
            .collect();
        dynamic.push(row);
    }
    let global = schema
        .global()
        .zip(&layout.global)
        .enumerate()
        .map(|(j, (f, slot))| {
            (inst.global_mask[j] != 0.0)
                .then(|| decode_value(&f.scaler, inst.y.slice(ndarray::s![slot.start..slot.end()])))
        })
        .collect();
    let times = match schema.mode {
        Mode::Complete => (0..l).map(|i| i as f64).collect(),
        Mode::Incomplete => inst.t.iter().map(|&v| v * schema.time_scale).collect(),
    };
    Ok(RawRecord {
        id: id.into(),
        times,
        dynamic,
        global,
    })
}

/// Elapsed normalized time since each feature's last observation.
///
/// `delta[0, j] = 0`; afterwards the step interval is added to the running lag
/// unless the feature was observed at the previous step, which resets it.
pub fn compute_time_lags(mask: &Mat, t: &Array1<f64>) -> Mat {
    let (l, k) = mask.dim();
    let mut delta = Mat::zeros((l, k));
    for i in 1..l {
        let dt = t[i] - t[i - 1];
        for j in 0..k {
            delta[[i, j]] = if mask[[i - 1, j]] != 0.0 { dt } else { delta[[i - 1, j]] + dt };
        }
    }
    delta
}

/// For each step, the most recent observed (scaled) value of every dynamic
/// feature strictly before that step; zero when there is none.
///
/// `column_owner` maps encoded columns to dynamic features.
pub fn carry_last_observations(x: &Mat, mask: &Mat, column_owner: &[usize]) -> Mat {
    let (l, d) = x.dim();
    let mut pre = Mat::zeros((l, d));
    for i in 1..l {
        for c in 0..d {
            pre[[i, c]] = if mask[[i - 1, column_owner[c]]] != 0.0 {
                x[[i - 1, c]]
            } else {
                pre[[i - 1, c]]
            };
        }
    }
    pre
}

impl Instance {
    pub fn time_lags(&self) -> Mat {
        compute_time_lags(&self.mask, &self.t)
    }

    pub fn last_observations(&self, column_owner: &[usize]) -> Mat {
        carry_last_observations(&self.x, &self.mask, column_owner)
    }
}

/// Checks the encoded-space invariants of an instance against a schema.
pub fn check_instance(inst: &Instance, schema: &Schema) -> Result<()> {
    let layout = schema.layout();
    if inst.x.ncols() != layout.d_x || inst.mask.ncols() != layout.k() || inst.y.len() != layout.d_y {
        return Err(Error::Schema("instance dimensions do not match the schema".into()));
    }
    if inst.x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Data("encoded value outside [0, 1]".into()));
    }
    if inst.mask.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::Data("mask is not binary".into()));
    }
    for i in 0..inst.len() {
        for (j, slot) in layout.dynamic.iter().enumerate() {
            let cells = inst.x.slice(ndarray::s![i, slot.start..slot.end()]);
            if inst.mask[[i, j]] == 0.0 {
                if cells.iter().any(|&v| v != 0.0) {
                    return Err(Error::Data("masked entry is not zero".into()));
                }
            } else if slot.categorical && (cells.sum() - 1.0).abs() > 1e-9 {
                return Err(Error::Data("one-hot group does not sum to 1".into()));
            }
        }
    }
    if inst.t.windows(2).into_iter().any(|w| w[1] <= w[0]) {
        return Err(Error::Data("timestamps must strictly increase".into()));
    }
    if schema.length_feature {
        let pos = layout.global[layout.n_global() - 1].start;
        let l = inst.len();
        let agrees = if l > schema.max_len {
            inst.y[pos] == l as f64 / schema.max_len as f64
        } else {
            schema.decode_length(inst.y[pos]) == l
        };
        if !agrees {
            return Err(Error::Data("length feature disagrees with the row count".into()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::schema::{fit_schema, FeatureKind, FeatureSpec, Role, SchemaSpec};
    use ndarray::array;

    fn spec() -> SchemaSpec {
        SchemaSpec {
            id_column: "id".into(),
            time_column: "time".into(),
            time_unit: "hours".into(),
            mode: Mode::Incomplete,
            unseen_category: UnseenPolicy::Error,
            label: Some("label".into()),
            features: vec![
                FeatureSpec {
                    name: "v".into(),
                    kind: FeatureKind::Continuous,
                    role: Role::Dynamic,
                    clamp: None,
                    normal_value: None,
                    categories: None,
                },
                FeatureSpec {
                    name: "c".into(),
                    kind: FeatureKind::Categorical,
                    role: Role::Dynamic,
                    clamp: None,
                    normal_value: None,
                    categories: Some(vec!["a".into(), "b".into(), "c".into()]),
                },
                FeatureSpec {
                    name: "label".into(),
                    kind: FeatureKind::Categorical,
                    role: Role::Global,
                    clamp: None,
                    normal_value: None,
                    categories: Some(vec!["0".into(), "1".into()]),
                },
            ],
        }
    }

    fn rec(times: &[f64], v: &[Option<f64>], c: &[Option<&str>]) -> RawRecord {
        RawRecord {
            id: "r".into(),
            times: times.to_vec(),
            dynamic: v
                .iter()
                .zip(c)
                .map(|(v, c)| vec![v.map(RawValue::Num), c.map(|s| RawValue::Cat(s.into()))])
                .collect(),
            global: vec![Some(RawValue::Cat("1".into()))],
        }
    }

    #[test]
    fn encodes_midpoint_one_hot_and_missing() {
        let r = rec(
            &[0.0, 1.0, 4.0],
            &[Some(10.0), None, Some(30.0)],
            &[Some("b"), Some("a"), None],
        );
        let schema = fit_schema(std::slice::from_ref(&r), &spec()).unwrap();
        let mut r2 = r.clone();
        r2.dynamic[0][0] = Some(RawValue::Num(20.0));
        let inst = transform(&r2, &schema).unwrap();
        assert_eq!(inst.x[[0, 0]], 0.5);
        assert_eq!(inst.x.row(0).to_vec()[1..], [0.0, 1.0, 0.0]);
        assert_eq!(inst.mask, array![[1.0, 1.0], [0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(inst.x.row(1)[0], 0.0);
        assert_eq!(inst.x.row(2).to_vec()[1..], [0.0, 0.0, 0.0]);
        assert_eq!(inst.t, array![0.0, 0.25, 1.0]);
        // label one-hot then the length feature 3 / 3
        assert_eq!(inst.y, array![0.0, 1.0, 1.0]);
        check_instance(&inst, &schema).unwrap();
    }

    #[test]
    fn all_missing_feature_is_zero_column() {
        let r = rec(&[0.0, 1.0, 2.0], &[None, None, None], &[Some("a"); 3]);
        let mut fit_rec = r.clone();
        fit_rec.dynamic[0][0] = Some(RawValue::Num(1.0));
        let schema = fit_schema(&[fit_rec], &spec()).unwrap();
        let inst = transform(&r, &schema).unwrap();
        assert!(inst.x.column(0).iter().all(|&v| v == 0.0));
        assert!(inst.mask.column(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unseen_category_and_bad_times_are_errors() {
        let r = rec(&[0.0, 1.0], &[Some(1.0), Some(2.0)], &[Some("a"), Some("z")]);
        let schema = fit_schema(&[rec(&[0.0, 1.0], &[Some(1.0), Some(2.0)], &[Some("a"), Some("b")])], &spec()).unwrap();
        assert!(matches!(transform(&r, &schema), Err(Error::Vocab { .. })));
        let r = rec(&[0.0, 0.0], &[Some(1.0), Some(2.0)], &[Some("a"), Some("b")]);
        assert!(matches!(transform(&r, &schema), Err(Error::Data(_))));
    }

    #[test]
    fn other_bucket_absorbs_unseen_categories() {
        let mut s = spec();
        s.unseen_category = UnseenPolicy::Other;
        let schema = fit_schema(&[rec(&[0.0], &[Some(1.0)], &[Some("a")])], &s).unwrap();
        let inst = transform(&rec(&[0.0], &[Some(1.0)], &[Some("zzz")]), &schema).unwrap();
        assert_eq!(inst.x.row(0).to_vec()[1..], [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn inverse_restores_values_and_emits_missing_markers() {
        let r = rec(
            &[0.5, 1.5, 3.5],
            &[Some(10.0), None, Some(30.0)],
            &[Some("b"), Some("a"), None],
        );
        let schema = fit_schema(std::slice::from_ref(&r), &spec()).unwrap();
        let mut inst = transform(&r, &schema).unwrap();
        // stored value under a zero mask is ignored
        inst.x[[1, 0]] = 0.7;
        let back = inverse_transform(&inst, &schema, "r").unwrap();
        assert_eq!(back.dynamic[0][0], Some(RawValue::Num(10.0)));
        assert_eq!(back.dynamic[1][0], None);
        assert_eq!(back.dynamic[2][1], None);
        assert_eq!(back.dynamic[0][1], Some(RawValue::Cat("b".into())));
        assert_eq!(back.times, vec![0.0, 1.0, 3.0]);
        let wrong = Instance { y: Array1::zeros(1), ..inst };
        assert!(matches!(inverse_transform(&wrong, &schema, "r"), Err(Error::Schema(_))));
    }

    #[test]
    fn time_lags_follow_the_recurrence() {
        let t = array![0.0, 0.1, 0.3];
        let all = Mat::ones((3, 1));
        let d = compute_time_lags(&all, &t);
        assert!((d[[1, 0]] - 0.1).abs() < 1e-15 && (d[[2, 0]] - 0.2).abs() < 1e-15);
        let m = array![[1.0], [0.0], [0.0]];
        let d = compute_time_lags(&m, &t);
        assert_eq!(d[[0, 0]], 0.0);
        assert!((d[[1, 0]] - 0.1).abs() < 1e-15 && (d[[2, 0]] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn last_observations_carry_forward() {
        let x = array![[0.4], [0.0], [0.9]];
        let m = array![[1.0], [0.0], [1.0]];
        let pre = carry_last_observations(&x, &m, &[0]);
        assert_eq!(pre, array![[0.0], [0.4], [0.4]]);
        let full = array![[0.1], [0.2], [0.3]];
        let pre = carry_last_observations(&full, &Mat::ones((3, 1)), &[0]);
        assert_eq!(pre, array![[0.0], [0.1], [0.2]]);
    }

    #[test]
    fn uniform_times_span_unit_interval() {
        assert_eq!(uniform_times(1), array![0.0]);
        assert_eq!(uniform_times(3), array![0.0, 0.5, 1.0]);
    }
}
