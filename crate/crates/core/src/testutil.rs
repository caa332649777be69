//! Small fixtures shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mat, ParamId, ParamStore, Var};
use crate::data::{fit_schema, Dataset, FeatureKind, FeatureSpec, Mode, RawRecord, RawValue, Role, SchemaSpec, Split, UnseenPolicy};

pub fn continuous(name: &str, role: Role) -> FeatureSpec {
    FeatureSpec {
        name: name.into(),
        kind: FeatureKind::Continuous,
        role,
        clamp: None,
        normal_value: None,
        categories: None,
    }
}

pub fn categorical(name: &str, role: Role, cats: &[&str]) -> FeatureSpec {
    FeatureSpec {
        name: name.into(),
        kind: FeatureKind::Categorical,
        role,
        clamp: None,
        normal_value: None,
        categories: Some(cats.iter().map(|c| c.to_string()).collect()),
    }
}

pub fn spec(mode: Mode, features: Vec<FeatureSpec>, label: Option<&str>) -> SchemaSpec {
    SchemaSpec {
        id_column: "id".into(),
        time_column: "time".into(),
        time_unit: "hours".into(),
        mode,
        unseen_category: UnseenPolicy::Error,
        label: label.map(str::to_string),
        features,
    }
}

/// Two instances, two continuous dynamic features, some entries missing.
pub fn tiny_incomplete() -> Dataset {
    let spec = spec(
        Mode::Incomplete,
        vec![continuous("a", Role::Dynamic), continuous("b", Role::Dynamic)],
        None,
    );
    let records = vec![
        RawRecord {
            id: "0".into(),
            times: vec![0.0, 1.0, 2.5],
            dynamic: vec![
                vec![Some(RawValue::Num(0.1)), None],
                vec![None, None],
                vec![Some(RawValue::Num(0.3)), Some(RawValue::Num(7.0))],
            ],
            global: vec![],
        },
        RawRecord {
            id: "1".into(),
            times: vec![0.0],
            dynamic: vec![vec![Some(RawValue::Num(0.2)), Some(RawValue::Num(1.0 / 3.0))]],
            global: vec![],
        },
    ];
    let schema = fit_schema(&records, &spec).unwrap();
    Dataset::from_records(&records, &schema, Split::Train).unwrap()
}

/// Noisy sinusoids with a categorical regime, variable length, and a label.
pub fn mixed_incomplete(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = spec(
        Mode::Incomplete,
        vec![
            continuous("a", Role::Dynamic),
            categorical("c", Role::Dynamic, &["lo", "hi"]),
            continuous("age", Role::Global),
            categorical("label", Role::Global, &["0", "1"]),
        ],
        Some("label"),
    );
    let records: Vec<RawRecord> = (0..n)
        .map(|k| {
            let l = rng.random_range(2..6);
            let phase: f64 = rng.random_range(0.0..3.0);
            let mut t = 0.0;
            let mut times = Vec::new();
            let mut dynamic = Vec::new();
            for i in 0..l {
                if i > 0 {
                    t += rng.random_range(0.5..1.5);
                }
                times.push(t);
                let v = (t + phase).sin();
                let a = (rng.random::<f64>() < 0.7).then_some(RawValue::Num(v));
                let c = (rng.random::<f64>() < 0.5).then(|| RawValue::Cat(if v > 0.0 { "hi" } else { "lo" }.into()));
                dynamic.push(vec![a, c]);
            }
            RawRecord {
                id: format!("{k}"),
                times,
                dynamic,
                global: vec![
                    Some(RawValue::Num(phase * 10.0)),
                    Some(RawValue::Cat(if phase > 1.5 { "1" } else { "0" }.into())),
                ],
            }
        })
        .collect();
    let schema = fit_schema(&records, &spec).unwrap();
    Dataset::from_records(&records, &schema, Split::Train).unwrap()
}

/// Fixed-length, fully observed sinusoid windows.
pub fn complete_sines(n: usize, len: usize, dims: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = (0..dims).map(|d| continuous(&format!("f{d}"), Role::Dynamic)).collect();
    let spec = spec(Mode::Complete, features, None);
    let records: Vec<RawRecord> = (0..n)
        .map(|k| {
            let freq: f64 = rng.random_range(0.1..0.5);
            let phase: f64 = rng.random_range(0.0..6.28);
            let rows: Vec<Vec<f64>> = (0..len)
                .map(|i| (0..dims).map(|d| (freq * i as f64 + phase + d as f64).sin()).collect())
                .collect();
            RawRecord::complete(format!("{k}"), &rows)
        })
        .collect();
    let schema = fit_schema(&records, &spec).unwrap();
    Dataset::from_records(&records, &schema, Split::Train).unwrap()
}

/// Fixed-length fully observed sequences with a categorical dynamic feature
/// and global features.
pub fn mixed_complete(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = spec(
        Mode::Complete,
        vec![
            continuous("a", Role::Dynamic),
            categorical("c", Role::Dynamic, &["lo", "mid", "hi"]),
            continuous("b", Role::Dynamic),
        ],
        None,
    );
    let records: Vec<RawRecord> = (0..n)
        .map(|k| {
            let phase: f64 = rng.random_range(0.0..3.0);
            let dynamic = (0..4)
                .map(|i| {
                    let v = (i as f64 + phase).sin();
                    let c = if v < -0.3 { "lo" } else if v < 0.3 { "mid" } else { "hi" };
                    vec![
                        Some(RawValue::Num(v)),
                        Some(RawValue::Cat(c.into())),
                        Some(RawValue::Num(rng.random_range(0.0..1.0))),
                    ]
                })
                .collect();
            RawRecord {
                id: format!("{k}"),
                times: (0..4).map(f64::from).collect(),
                dynamic,
                global: vec![],
            }
        })
        .collect();
    let mut schema = fit_schema(&records, &spec).unwrap();
    schema.length_feature = true;
    Dataset::from_records(&records, &schema, Split::Train).unwrap()
}

/// Compares analytic gradients of the parameters whose names start with one
/// of `prefixes` against central differences.
pub fn check_param_grads<T, S, F>(owner: &mut T, store_of: S, f: F, prefixes: &[&str], tol: f64)
where
    S: Fn(&mut T) -> &mut ParamStore,
    F: Fn(&mut Graph, &T) -> Var,
{
    let mut g = Graph::new();
    let loss = f(&mut g, owner);
    let grads = g.backward(loss);
    let h = 1e-6;
    let ids: Vec<ParamId> = store_of(owner)
        .ids()
        .collect::<Vec<_>>()
        .into_iter()
        .filter(|&id| {
            let name = store_of(owner).name(id).to_string();
            prefixes.iter().any(|p| name.starts_with(p))
        })
        .collect();
    assert!(!ids.is_empty(), "no parameter matches {prefixes:?}");
    let mut checked = 0;
    for id in ids {
        let store = store_of(owner);
        let name = store.name(id).to_string();
        let analytic = grads.get(store, id).cloned().unwrap_or_else(|| Mat::zeros(store.get(id).dim()));
        let (rows, cols) = analytic.dim();
        for r in 0..rows {
            for c in 0..cols {
                let orig = store_of(owner).get(id)[[r, c]];
                let mut eval = |v: f64| {
                    store_of(owner).get_mut(id)[[r, c]] = v;
                    let mut g = Graph::new();
                    let l = f(&mut g, owner);
                    g.scalar(l)
                };
                let up = eval(orig + h);
                let dn = eval(orig - h);
                store_of(owner).get_mut(id)[[r, c]] = orig;
                let numeric = (up - dn) / (2.0 * h);
                let a = analytic[[r, c]];
                let denom = a.abs().max(numeric.abs()).max(1e-5);
                assert!(
                    (a - numeric).abs() / denom < tol,
                    "{name}[{r},{c}]: analytic {a} numeric {numeric}"
                );
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}
