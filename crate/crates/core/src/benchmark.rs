//! Built-in datasets: a stock-price window loader and a synthetic benchmark
//! with value-dependent missingness.
//!
//! MNAR generator, per instance:
//! - length uniform in `12..=24`, first time 0, gaps uniform in `[0.5, 1.5)`;
//! - trend slope `a ~ N(0, 1)`, label `"1"` when `a + 0.5 e > 0` with `e ~ N(0, 1)`;
//! - one static global `age ~ N(50, 10)`;
//! - feature `j` at time `t`: `offset_j + a * load_j * t / 10 + 0.5 sin(freq_j t + phase) + 0.3 noise`;
//! - feature 0 is observed with probability 0.9, feature `j > 0` with
//!   probability `sigmoid(bias_j + slope_j * x_0(t))`, using the true value
//!   of feature 0 whether or not it was observed. Steps may be fully missing.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::io::read_numeric_table;
use crate::data::{fit_schema, window_records, Dataset, FeatureKind, FeatureSpec, Mode, RawRecord, RawValue, Role, SchemaSpec, Split, UnseenPolicy};
use crate::error::{Error, Result};
use crate::model::stream_rng;

pub const MNAR_FEATURES: usize = 8;
pub const MNAR_MIN_LEN: usize = 12;
pub const MNAR_MAX_LEN: usize = 24;

const LOAD: [f64; MNAR_FEATURES] = [1.0, 0.8, -0.6, 0.4, -1.0, 0.5, -0.3, 0.9];
const OFFSET: [f64; MNAR_FEATURES] = [0.0, 1.0, -1.0, 0.5, 2.0, -0.5, 0.0, 1.5];
const FREQ: [f64; MNAR_FEATURES] = [0.3, 0.5, 0.7, 0.2, 0.9, 0.4, 0.6, 0.8];
const MISS_BIAS: [f64; MNAR_FEATURES] = [0.0, 0.0, -0.5, 0.5, 0.0, -1.0, 1.0, 0.3];
const MISS_SLOPE: [f64; MNAR_FEATURES] = [0.0, 1.5, -1.5, 2.0, -2.0, 1.0, -1.0, 2.5];

fn continuous(name: &str, role: Role) -> FeatureSpec {
    FeatureSpec {
        name: name.into(),
        kind: FeatureKind::Continuous,
        role,
        clamp: None,
        normal_value: None,
        categories: None,
    }
}

pub fn mnar_spec() -> SchemaSpec {
    let mut features: Vec<FeatureSpec> = (0..MNAR_FEATURES).map(|j| continuous(&format!("x{j}"), Role::Dynamic)).collect();
    features.push(continuous("age", Role::Global));
    features.push(FeatureSpec {
        name: "label".into(),
        kind: FeatureKind::Categorical,
        role: Role::Global,
        clamp: None,
        normal_value: None,
        categories: Some(vec!["0".into(), "1".into()]),
    });
    SchemaSpec {
        id_column: "id".into(),
        time_column: "time".into(),
        time_unit: "hours".into(),
        mode: Mode::Incomplete,
        unseen_category: UnseenPolicy::Error,
        label: Some("label".into()),
        features,
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `n` raw MNAR records with ids `prefix0`, `prefix1`, ...
pub fn mnar_records(n: usize, seed: u64, prefix: &str) -> Vec<RawRecord> {
    let mut rng = stream_rng(seed, 0);
    let age = Normal::new(50.0, 10.0).expect("valid normal");
    (0..n)
        .map(|k| {
            let l = rng.random_range(MNAR_MIN_LEN..=MNAR_MAX_LEN);
            let slope: f64 = StandardNormal.sample(&mut rng);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let label_noise: f64 = StandardNormal.sample(&mut rng);
            let mut times = Vec::with_capacity(l);
            let mut dynamic = Vec::with_capacity(l);
            let mut t = 0.0;
            for i in 0..l {
                if i > 0 {
                    t += rng.random_range(0.5..1.5);
                }
                times.push(t);
                let mut values = [0.0; MNAR_FEATURES];
                for j in 0..MNAR_FEATURES {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    values[j] = OFFSET[j] + slope * LOAD[j] * t / 10.0 + 0.5 * (FREQ[j] * t + phase).sin() + 0.3 * noise;
                }
                let row = (0..MNAR_FEATURES)
                    .map(|j| {
                        let p = if j == 0 { 0.9 } else { sigmoid(MISS_BIAS[j] + MISS_SLOPE[j] * values[0]) };
                        (rng.random::<f64>() < p).then_some(RawValue::Num(values[j]))
                    })
                    .collect();
                dynamic.push(row);
            }
            RawRecord {
                id: format!("{prefix}{k}"),
                times,
                dynamic,
                global: vec![
                    Some(RawValue::Num(age.sample(&mut rng))),
                    Some(RawValue::Cat(if slope + 0.5 * label_noise > 0.0 { "1" } else { "0" }.into())),
                ],
            }
        })
        .collect()
}

/// Train and test splits with the schema fitted on the training split.
pub fn mnar_benchmark(n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let train = mnar_records(n_train, seed, "train");
    let test = mnar_records(n_test, seed.wrapping_add(1), "test");
    let schema = fit_schema(&train, &mnar_spec())?;
    Ok((
        Dataset::from_records(&train, &schema, Split::Train)?,
        Dataset::from_records(&test, &schema, Split::Test)?,
    ))
}

/// Schema spec for a numeric table: every column a continuous dynamic feature.
pub fn table_spec(header: &[String]) -> SchemaSpec {
    SchemaSpec {
        id_column: "id".into(),
        time_column: "time".into(),
        time_unit: "steps".into(),
        mode: Mode::Complete,
        unseen_category: UnseenPolicy::Error,
        label: None,
        features: header.iter().map(|h| continuous(h, Role::Dynamic)).collect(),
    }
}

/// All stride-1 windows of a numeric table as a complete dataset, in
/// chronological order.
pub fn load_windows(path: &Path, window: usize) -> Result<Dataset> {
    let (header, rows) = read_numeric_table(path)?;
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }
    let records = window_records(&rows, window)?;
    let schema = fit_schema(&records, &table_spec(&header))?;
    Dataset::from_records(&records, &schema, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnar_records_follow_the_recipe() {
        let recs = mnar_records(300, 0, "r");
        for r in &recs {
            assert!((MNAR_MIN_LEN..=MNAR_MAX_LEN).contains(&r.len()));
            assert!(r.times.windows(2).all(|w| w[1] - w[0] >= 0.5 && w[1] - w[0] < 1.5));
            assert_eq!(r.dynamic[0].len(), MNAR_FEATURES);
        }
        assert_eq!(mnar_records(300, 0, "r"), recs);
        assert_ne!(mnar_records(300, 1, "r"), recs);
    }

    #[test]
    fn missingness_depends_on_the_first_feature() {
        let (train, _) = mnar_benchmark(2000, 10, 0).unwrap();
        let rates = train.dynamic_missing_rates();
        assert!((rates[0] - 0.1).abs() < 0.02, "{rates:?}");
        assert!(rates.iter().skip(1).all(|&r| r > 0.05 && r < 0.95), "{rates:?}");
        let (heat, flat) = crate::eval::pearson_missing_heatmap(&train).unwrap();
        assert!(flat.is_empty());
        // Positive and negative slopes on the same driver give opposite signs.
        assert!(heat[[1, 3]] > 0.3 && heat[[1, 2]] < -0.3, "{heat:?}");
    }

    #[test]
    fn labels_are_balanced_and_follow_the_trend() {
        let (train, test) = mnar_benchmark(2000, 500, 3).unwrap();
        let y = train.labels().unwrap();
        let pos = y.iter().sum::<f64>() / y.len() as f64;
        assert!((pos - 0.5).abs() < 0.05, "{pos}");
        assert_eq!(test.len(), 500);
        assert_eq!(test.schema, train.schema);
    }

    #[test]
    fn stock_windows_cover_the_table() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/stock_data.csv");
        let ds = load_windows(&path, 24).unwrap();
        let (_, rows) = read_numeric_table(&path).unwrap();
        assert_eq!(ds.len(), rows.len() - 23);
        assert_eq!(ds.schema.layout().d_x, 6);
        assert!(ds.instances.iter().all(|i| i.len() == 24 && i.x.iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(matches!(load_windows(&path, rows.len() + 1), Err(Error::Window { .. })));
    }
}
