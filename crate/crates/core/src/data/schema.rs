//! Feature declarations and the fitted scaling/vocabulary state.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{ColumnGroup, GroupKind};
use crate::data::raw::{RawRecord, RawValue};
use crate::error::{Error, Result};

/// Reserved vocabulary entry used when unseen categories are tolerated.
pub const OTHER_CATEGORY: &str = "__other__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Dynamic,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Every entry observed, timestamps implied by the step index.
    Complete,
    #[default]
    Incomplete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnseenPolicy {
    #[default]
    Error,
    Other,
}

/// One declared feature, as written in a schema spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    pub role: Role,
    /// Values are clamped into this range before the min/max fit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamp: Option<[f64; 2]>,
    /// Imputation default for regular-interval resampling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal_value: Option<String>,
    /// Preset vocabulary; fitted from data when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
}

/// Contents of a schema spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaSpec {
    #[serde(default = "default_id_column")]
    pub id_column: String,
    #[serde(default = "default_time_column")]
    pub time_column: String,
    /// Human-readable unit of the raw time column, e.g. "hours".
    #[serde(default = "default_time_unit")]
    pub time_unit: String,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub unseen_category: UnseenPolicy,
    /// Global feature used as the downstream classification target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub features: Vec<FeatureSpec>,
}

fn default_id_column() -> String {
    "id".into()
}
fn default_time_column() -> String {
    "time".into()
}
fn default_time_unit() -> String {
    "hours".into()
}

impl SchemaSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SchemaSpec = toml::from_str(text).map_err(|e| Error::Config(format!("schema spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schema spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for f in &self.features {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate feature {:?}", f.name)));
            }
            if let Some([lo, hi]) = f.clamp {
                if !(lo <= hi) {
                    return Err(Error::Schema(format!("clamp range of {:?} is empty", f.name)));
                }
            }
            if let Some(cats) = &f.categories {
                check_vocab(&f.name, cats)?;
            }
        }
        if let Some(label) = &self.label {
            let ok = self
                .features
                .iter()
                .any(|f| &f.name == label && f.role == Role::Global);
            if !ok {
                return Err(Error::Schema(format!("label {label:?} is not a global feature")));
            }
        }
        if self.mode == Mode::Complete && self.features.iter().any(|f| f.role == Role::Global) {
            return Err(Error::Schema("complete mode carries dynamic features only".into()));
        }
        Ok(())
    }

    pub fn dynamic(&self) -> impl Iterator<Item = &FeatureSpec> {
        self.features.iter().filter(|f| f.role == Role::Dynamic)
    }

    pub fn global(&self) -> impl Iterator<Item = &FeatureSpec> {
        self.features.iter().filter(|f| f.role == Role::Global)
    }
}

fn check_vocab(name: &str, vocab: &[String]) -> Result<()> {
    if vocab.is_empty() {
        return Err(Error::Schema(format!("categorical feature {name:?} has no categories")));
    }
    let unique: BTreeSet<&String> = vocab.iter().collect();
    if unique.len() != vocab.len() {
        return Err(Error::Schema(format!("categorical feature {name:?} has duplicate categories")));
    }
    Ok(())
}

/// Fitted scaling state of one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scaler {
    Continuous {
        min: f64,
        max: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        clamp: Option<[f64; 2]>,
        /// `max == min` on the training split; scales to 0.0.
        constant: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        normal_value: Option<f64>,
    },
    Categorical {
        vocab: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        normal_value: Option<String>,
    },
}

impl Scaler {
    /// Encoded width: 1 for continuous, vocabulary size for categorical.
    pub fn width(&self) -> usize {
        match self {
            Scaler::Continuous { .. } => 1,
            Scaler::Categorical { vocab, .. } => vocab.len(),
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self, Scaler::Categorical { .. })
    }

    /// Min-max scaling clipped to `[0, 1]`; constant features map to 0.
    pub fn scale(&self, v: f64) -> f64 {
        match self {
            Scaler::Continuous { min, max, clamp, constant, .. } => {
                if *constant {
                    return 0.0;
                }
                let v = match clamp {
                    Some([lo, hi]) => v.clamp(*lo, *hi),
                    None => v,
                };
                ((v - min) / (max - min)).clamp(0.0, 1.0)
            }
            Scaler::Categorical { .. } => panic!("scale() on a categorical feature"),
        }
    }

    pub fn unscale(&self, u: f64) -> f64 {
        match self {
            Scaler::Continuous { min, max, constant, .. } => {
                if *constant {
                    *min
                } else {
                    min + u * (max - min)
                }
            }
            Scaler::Categorical { .. } => panic!("unscale() on a categorical feature"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub name: String,
    pub role: Role,
    pub scaler: Scaler,
}

/// Where one original feature lives in the encoded vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSlot {
    pub name: String,
    pub start: usize,
    pub width: usize,
    pub categorical: bool,
}

impl FeatureSlot {
    pub fn end(&self) -> usize {
        self.start + self.width
    }
}

/// Encoded column layout derived from a [`Schema`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub dynamic: Vec<FeatureSlot>,
    pub global: Vec<FeatureSlot>,
    pub d_x: usize,
    pub d_y: usize,
}

impl Layout {
    /// Number of dynamic features `K` (mask width).
    pub fn k(&self) -> usize {
        self.dynamic.len()
    }

    /// Number of global features, including the length feature when present.
    pub fn n_global(&self) -> usize {
        self.global.len()
    }

    fn groups(slots: &[FeatureSlot]) -> Arc<Vec<ColumnGroup>> {
        Arc::new(
            slots
                .iter()
                .map(|s| ColumnGroup {
                    start: s.start,
                    len: s.width,
                    kind: if s.categorical { GroupKind::Softmax } else { GroupKind::Sigmoid },
                })
                .collect(),
        )
    }

    pub fn dynamic_groups(&self) -> Arc<Vec<ColumnGroup>> {
        Self::groups(&self.dynamic)
    }

    pub fn global_groups(&self) -> Arc<Vec<ColumnGroup>> {
        Self::groups(&self.global)
    }

    /// Encoded dynamic column -> owning dynamic feature index.
    pub fn dynamic_column_owner(&self) -> Vec<usize> {
        owners(&self.dynamic, self.d_x)
    }

    pub fn global_column_owner(&self) -> Vec<usize> {
        owners(&self.global, self.d_y)
    }
}

fn owners(slots: &[FeatureSlot], width: usize) -> Vec<usize> {
    let mut out = vec![0; width];
    for (j, s) in slots.iter().enumerate() {
        out[s.start..s.end()].iter_mut().for_each(|o| *o = j);
    }
    out
}

/// Name of the appended global feature that carries `l / L_max`.
pub const LENGTH_FEATURE: &str = "__length__";

/// Fitted schema: governs encoding and decoding of one dataset end to end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub mode: Mode,
    pub id_column: String,
    pub time_column: String,
    pub time_unit: String,
    /// Raw time span that maps to 1.0 (the longest training horizon).
    pub time_scale: f64,
    /// Longest training sequence, `L_max`.
    pub max_len: usize,
    /// Whether `l / L_max` is appended as the last global feature.
    pub length_feature: bool,
    pub unseen_category: UnseenPolicy,
    pub label: Option<String>,
    pub features: Vec<FeatureSchema>,
}

impl Schema {
    pub fn dynamic(&self) -> impl Iterator<Item = &FeatureSchema> {
        self.features.iter().filter(|f| f.role == Role::Dynamic)
    }

    pub fn global(&self) -> impl Iterator<Item = &FeatureSchema> {
        self.features.iter().filter(|f| f.role == Role::Global)
    }

    pub fn layout(&self) -> Layout {
        let mut dynamic = Vec::new();
        let mut off = 0;
        for f in self.dynamic() {
            let w = f.scaler.width();
            dynamic.push(FeatureSlot {
                name: f.name.clone(),
                start: off,
                width: w,
                categorical: f.scaler.is_categorical(),
            });
            off += w;
        }
        let d_x = off;
        let mut global = Vec::new();
        off = 0;
        for f in self.global() {
            let w = f.scaler.width();
            global.push(FeatureSlot {
                name: f.name.clone(),
                start: off,
                width: w,
                categorical: f.scaler.is_categorical(),
            });
            off += w;
        }
        if self.length_feature {
            global.push(FeatureSlot {
                name: LENGTH_FEATURE.into(),
                start: off,
                width: 1,
                categorical: false,
            });
            off += 1;
        }
        Layout {
            dynamic,
            global,
            d_x,
            d_y: off,
        }
    }

    /// Index of the label among global features, if one is declared.
    pub fn label_index(&self) -> Option<usize> {
        let label = self.label.as_ref()?;
        self.global().position(|f| &f.name == label)
    }

    /// Stable hash of the fitted schema, used to pair checkpoints with data.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("schema serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Length encoding `l / L_max`. Held-out sequences longer than any
    /// training sequence encode above 1.
    pub fn encode_length(&self, l: usize) -> Result<f64> {
        if l == 0 {
            return Err(Error::Data("empty sequence".into()));
        }
        Ok(l as f64 / self.max_len as f64)
    }

    /// Inverse of [`Schema::encode_length`]: round half-up, clamp to `[1, L_max]`.
    pub fn decode_length(&self, v: f64) -> usize {
        decode_length(v, self.max_len)
    }
}

pub fn decode_length(v: f64, max_len: usize) -> usize {
    let scaled = v * max_len as f64;
    let rounded = if scaled.is_finite() { (scaled + 0.5).floor() } else { 1.0 };
    (rounded.max(1.0) as usize).min(max_len)
}

/// Fits scaling and vocabularies on training records.
pub fn fit_schema(records: &[RawRecord], spec: &SchemaSpec) -> Result<Schema> {
    spec.validate()?;
    if records.is_empty() {
        return Err(Error::Fit("no training records".into()));
    }
    let n_dyn = spec.dynamic().count();
    let mut features = Vec::with_capacity(spec.features.len());
    let (mut di, mut gi) = (0usize, 0usize);
    for f in &spec.features {
        let values: Vec<&RawValue> = match f.role {
            Role::Dynamic => {
                let j = di;
                di += 1;
                records
                    .iter()
                    .flat_map(|r| r.dynamic.iter().filter_map(move |row| row[j].as_ref()))
                    .collect()
            }
            Role::Global => {
                let j = gi;
                gi += 1;
                records.iter().filter_map(|r| r.global[j].as_ref()).collect()
            }
        };
        let scaler = match f.kind {
            FeatureKind::Continuous => fit_continuous(f, &values)?,
            FeatureKind::Categorical => fit_categorical(f, &values, spec.unseen_category)?,
        };
        features.push(FeatureSchema {
            name: f.name.clone(),
            role: f.role,
            scaler,
        });
    }
    debug_assert_eq!(di, n_dyn);

    let max_len = records.iter().map(RawRecord::len).max().unwrap_or(0);
    if max_len == 0 {
        return Err(Error::Fit("all training records are empty".into()));
    }
    let time_scale = match spec.mode {
        Mode::Complete => 1.0,
        Mode::Incomplete => {
            let span = records
                .iter()
                .filter(|r| !r.times.is_empty())
                .map(|r| r.times[r.times.len() - 1] - r.times[0])
                .fold(0.0_f64, f64::max);
            if span > 0.0 {
                span
            } else {
                1.0
            }
        }
    };
    let fixed_length = records.iter().all(|r| r.len() == max_len);
    Ok(Schema {
        mode: spec.mode,
        id_column: spec.id_column.clone(),
        time_column: spec.time_column.clone(),
        time_unit: spec.time_unit.clone(),
        time_scale,
        max_len,
        length_feature: spec.mode == Mode::Incomplete || !fixed_length,
        unseen_category: spec.unseen_category,
        label: spec.label.clone(),
        features,
    })
}

fn fit_continuous(f: &FeatureSpec, values: &[&RawValue]) -> Result<Scaler> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        let x = v
            .as_f64()
            .ok_or_else(|| Error::Fit(format!("non-numeric value {v:?} in continuous feature {:?}", f.name)))?;
        let x = match f.clamp {
            Some([a, b]) => x.clamp(a, b),
            None => x,
        };
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if !lo.is_finite() {
        return Err(Error::Schema(format!("continuous feature {:?} is never observed", f.name)));
    }
    let normal_value = match &f.normal_value {
        Some(s) => Some(
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Schema(format!("normal value {s:?} of {:?} is not numeric", f.name)))?,
        ),
        None => None,
    };
    Ok(Scaler::Continuous {
        min: lo,
        max: hi,
        clamp: f.clamp,
        constant: hi <= lo,
        normal_value,
    })
}

fn fit_categorical(f: &FeatureSpec, values: &[&RawValue], unseen: UnseenPolicy) -> Result<Scaler> {
    let mut vocab: Vec<String> = match &f.categories {
        Some(c) => c.clone(),
        None => values
            .iter()
            .map(|v| v.as_category())
            .collect::<BTreeSet<String>>()
            .into_iter()
            .collect(),
    };
    if unseen == UnseenPolicy::Other && !vocab.iter().any(|v| v == OTHER_CATEGORY) {
        vocab.push(OTHER_CATEGORY.into());
    }
    check_vocab(&f.name, &vocab)?;
    Ok(Scaler::Categorical {
        vocab,
        normal_value: f.normal_value.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(features: Vec<FeatureSpec>) -> SchemaSpec {
        SchemaSpec {
            id_column: "id".into(),
            time_column: "time".into(),
            time_unit: "hours".into(),
            mode: Mode::Incomplete,
            unseen_category: UnseenPolicy::Error,
            label: None,
            features,
        }
    }

    fn cont(name: &str) -> FeatureSpec {
        FeatureSpec {
            name: name.into(),
            kind: FeatureKind::Continuous,
            role: Role::Dynamic,
            clamp: None,
            normal_value: None,
            categories: None,
        }
    }

    fn record(values: &[f64]) -> RawRecord {
        RawRecord {
            id: "a".into(),
            times: (0..values.len()).map(|i| i as f64).collect(),
            dynamic: values.iter().map(|&v| vec![Some(RawValue::Num(v))]).collect(),
            global: vec![],
        }
    }

    #[test]
    fn min_max_are_the_observed_extremes() {
        let schema = fit_schema(&[record(&[10.0, 20.0, 30.0])], &spec(vec![cont("v")])).unwrap();
        match &schema.features[0].scaler {
            Scaler::Continuous { min, max, constant, .. } => {
                assert_eq!((*min, *max, *constant), (10.0, 30.0, false));
            }
            _ => unreachable!(),
        }
        assert_eq!(schema.features[0].scaler.scale(20.0), 0.5);
        assert_eq!(schema.features[0].scaler.unscale(0.5), 20.0);
    }

    #[test]
    fn constant_feature_is_flagged_and_scales_to_zero() {
        let schema = fit_schema(&[record(&[5.0, 5.0, 5.0])], &spec(vec![cont("v")])).unwrap();
        let s = &schema.features[0].scaler;
        assert!(matches!(s, Scaler::Continuous { constant: true, .. }));
        assert_eq!(s.scale(5.0), 0.0);
        assert_eq!(s.unscale(0.0), 5.0);
    }

    #[test]
    fn clamp_range_limits_the_fit() {
        let mut f = cont("v");
        f.clamp = Some([0.0, 100.0]);
        let schema = fit_schema(&[record(&[-50.0, 50.0, 1e6])], &spec(vec![f])).unwrap();
        assert!(matches!(
            schema.features[0].scaler,
            Scaler::Continuous { min, max, .. } if min == 0.0 && max == 100.0
        ));
    }

    #[test]
    fn empty_input_and_empty_vocab_are_rejected() {
        assert!(matches!(fit_schema(&[], &spec(vec![cont("v")])), Err(Error::Fit(_))));
        let cat = FeatureSpec {
            name: "c".into(),
            kind: FeatureKind::Categorical,
            role: Role::Dynamic,
            clamp: None,
            normal_value: None,
            categories: None,
        };
        let rec = RawRecord {
            id: "a".into(),
            times: vec![0.0],
            dynamic: vec![vec![None]],
            global: vec![],
        };
        assert!(matches!(fit_schema(&[rec], &spec(vec![cat])), Err(Error::Schema(_))));
    }

    #[test]
    fn length_decoding_rounds_half_up_and_clamps() {
        assert_eq!(decode_length(0.52, 48), 25);
        assert_eq!(decode_length(0.5, 48), 24);
        assert_eq!(decode_length(-3.0, 48), 1);
        assert_eq!(decode_length(7.0, 48), 48);
        assert_eq!(decode_length(f64::NAN, 48), 1);
        for l in 1..=48 {
            assert_eq!(decode_length(l as f64 / 48.0, 48), l);
        }
    }

    #[test]
    fn longer_held_out_sequences_encode_above_one() {
        let rec = RawRecord::complete("a", &[vec![1.0], vec![2.0]]);
        let s = fit_schema(&[rec], &spec(vec![cont("hr")])).unwrap();
        assert_eq!(s.encode_length(2).unwrap(), 1.0);
        assert_eq!(s.encode_length(3).unwrap(), 1.5);
        assert!(matches!(s.encode_length(0), Err(Error::Data(_))));
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let s = spec(vec![cont("hr")]);
        let back = SchemaSpec::from_toml(&s.to_toml()).unwrap();
        assert_eq!(s, back);
    }
}
