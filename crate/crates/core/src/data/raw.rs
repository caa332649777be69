//! Records in original units, before encoding.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawValue {
    Num(f64),
    Cat(String),
}

impl RawValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            RawValue::Num(v) => Some(*v),
            RawValue::Cat(s) => s.trim().parse().ok(),
        }
    }

    /// Category label; numbers print with their shortest exact form.
    pub fn as_category(&self) -> String {
        match self {
            RawValue::Num(v) => format!("{v}"),
            RawValue::Cat(s) => s.clone(),
        }
    }

    pub fn to_cell(&self) -> String {
        self.as_category()
    }
}

/// One instance in original units. `None` marks a missing entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub times: Vec<f64>,
    /// `dynamic[i][j]`: step `i`, dynamic feature `j`.
    pub dynamic: Vec<Vec<Option<RawValue>>>,
    /// One entry per declared global feature (the length feature is implicit).
    pub global: Vec<Option<RawValue>>,
}

impl RawRecord {
    pub fn len(&self) -> usize {
        self.dynamic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dynamic.is_empty()
    }

    /// Builds a fully observed record from numeric rows; times are step indices.
    pub fn complete(id: impl Into<String>, rows: &[Vec<f64>]) -> Self {
        Self {
            id: id.into(),
            times: (0..rows.len()).map(|i| i as f64).collect(),
            dynamic: rows
                .iter()
                .map(|r| r.iter().map(|&v| Some(RawValue::Num(v))).collect())
                .collect(),
            global: Vec::new(),
        }
    }
}
