//! Collections of encoded instances and their on-disk columnar layout.
//!
//! A dataset file is a JSON document:
//!
//! ```text
//! {
//!   "format": "latentts-dataset", "version": 1,
//!   "split": "train" | "test" | "synthetic",
//!   "schema": { ...fitted schema... },
//!   "lengths": [l_0, l_1, ...],               // per instance
//!   "time":    [...],                          // all steps, instance-major
//!   "dynamic": [[...], ...],                   // one array per encoded dynamic column
//!   "mask":    [[0|1, ...], ...],              // one array per dynamic feature
//!   "global":  [[...], ...],                   // one array per encoded global column
//!   "global_mask": [[0|1, ...], ...]           // one array per global feature
//! }
//! ```
//!
//! Floats are written with shortest round-trip formatting, so a save/load
//! cycle reproduces every value bit for bit.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::instance::{check_instance, inverse_transform, transform, Instance};
use crate::data::raw::RawRecord;
use crate::data::schema::Schema;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: Schema,
    pub split: Split,
    pub instances: Vec<Instance>,
}

impl Dataset {
    /// Checks every instance against the schema.
    pub fn new(schema: Schema, split: Split, instances: Vec<Instance>) -> Result<Self> {
        for inst in &instances {
            check_instance(inst, &schema)?;
        }
        Ok(Self {
            schema,
            split,
            instances,
        })
    }

    /// Encodes raw records under a fitted schema.
    pub fn from_records(records: &[RawRecord], schema: &Schema, split: Split) -> Result<Self> {
        let instances = records
            .iter()
            .map(|r| transform(r, schema))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            schema: schema.clone(),
            split,
            instances,
        })
    }

    pub fn to_records(&self) -> Result<Vec<RawRecord>> {
        self.instances
            .iter()
            .enumerate()
            .map(|(i, inst)| inverse_transform(inst, &self.schema, format!("{i}")))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Overall missing rate `rho_j` of each dynamic feature, pooled over every
    /// step of every instance.
    pub fn dynamic_missing_rates(&self) -> Vec<f64> {
        let k = self.schema.layout().k();
        let mut missing = vec![0u64; k];
        let mut total = 0u64;
        for inst in &self.instances {
            total += inst.len() as u64;
            for row in inst.mask.rows() {
                for (j, &m) in row.iter().enumerate() {
                    if m == 0.0 {
                        missing[j] += 1;
                    }
                }
            }
        }
        missing
            .into_iter()
            .map(|m| if total == 0 { 0.0 } else { m as f64 / total as f64 })
            .collect()
    }

    /// Missing rate of each global feature over instances.
    pub fn global_missing_rates(&self) -> Vec<f64> {
        let n = self.schema.layout().n_global();
        let mut missing = vec![0u64; n];
        for inst in &self.instances {
            for (j, &m) in inst.global_mask.iter().enumerate() {
                if m == 0.0 {
                    missing[j] += 1;
                }
            }
        }
        let total = self.instances.len() as f64;
        missing
            .into_iter()
            .map(|m| if total == 0.0 { 0.0 } else { m as f64 / total })
            .collect()
    }

    /// Missing rate over all dynamic entries.
    pub fn overall_missing_rate(&self) -> f64 {
        let steps: usize = self.instances.iter().map(Instance::len).sum();
        let k = self.schema.layout().k();
        if steps == 0 || k == 0 {
            return 0.0;
        }
        let observed: f64 = self.instances.iter().map(|i| i.mask.sum()).sum();
        1.0 - observed / (steps * k) as f64
    }

    pub fn average_length(&self) -> f64 {
        if self.instances.is_empty() {
            return 0.0;
        }
        self.instances.iter().map(Instance::len).sum::<usize>() as f64 / self.instances.len() as f64
    }

    pub fn max_length(&self) -> usize {
        self.instances.iter().map(Instance::len).max().unwrap_or(0)
    }

    /// Value of the declared label (index of the hot category, or the raw
    /// scaled value for a continuous label) per instance.
    pub fn labels(&self) -> Result<Vec<f64>> {
        let idx = self
            .schema
            .label_index()
            .ok_or_else(|| Error::Config("dataset schema declares no label".into()))?;
        let slot = &self.schema.layout().global[idx];
        Ok(self
            .instances
            .iter()
            .map(|inst| {
                let cells = inst.y.slice(ndarray::s![slot.start..slot.end()]);
                if slot.categorical {
                    let mut best = 0;
                    for (i, &v) in cells.iter().enumerate() {
                        if v > cells[best] {
                            best = i;
                        }
                    }
                    best as f64
                } else {
                    cells[0]
                }
            })
            .collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            split: self.split,
            instances: indices.iter().map(|&i| self.instances[i].clone()).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = DatasetFile::from_dataset(self);
        let text = serde_json::to_string(&file).map_err(|e| Error::Data(format!("serialize dataset: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: DatasetFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.into(),
            line: e.line(),
            message: e.to_string(),
        })?;
        file.into_dataset()
    }
}

pub const DATASET_FORMAT: &str = "latentts-dataset";

#[derive(Debug, Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    version: u32,
    split: Split,
    schema: Schema,
    lengths: Vec<usize>,
    time: Vec<f64>,
    dynamic: Vec<Vec<f64>>,
    mask: Vec<Vec<u8>>,
    global: Vec<Vec<f64>>,
    global_mask: Vec<Vec<u8>>,
}

impl DatasetFile {
    fn from_dataset(ds: &Dataset) -> Self {
        let layout = ds.schema.layout();
        let mut dynamic = vec![Vec::new(); layout.d_x];
        let mut mask = vec![Vec::new(); layout.k()];
        let mut global = vec![Vec::new(); layout.d_y];
        let mut global_mask = vec![Vec::new(); layout.n_global()];
        let mut time = Vec::new();
        for inst in &ds.instances {
            time.extend(inst.t.iter());
            for (c, col) in dynamic.iter_mut().enumerate() {
                col.extend(inst.x.column(c).iter());
            }
            for (j, col) in mask.iter_mut().enumerate() {
                col.extend(inst.mask.column(j).iter().map(|&m| m as u8));
            }
            for (c, col) in global.iter_mut().enumerate() {
                col.push(inst.y[c]);
            }
            for (j, col) in global_mask.iter_mut().enumerate() {
                col.push(inst.global_mask[j] as u8);
            }
        }
        Self {
            format: DATASET_FORMAT.into(),
            version: 1,
            split: ds.split,
            schema: ds.schema.clone(),
            lengths: ds.instances.iter().map(Instance::len).collect(),
            time,
            dynamic,
            mask,
            global,
            global_mask,
        }
    }

    fn into_dataset(self) -> Result<Dataset> {
        if self.format != DATASET_FORMAT || self.version != 1 {
            return Err(Error::Data(format!("unsupported dataset format {} v{}", self.format, self.version)));
        }
        let layout = self.schema.layout();
        let rows: usize = self.lengths.iter().sum();
        let bad = self.time.len() != rows
            || self.dynamic.len() != layout.d_x
            || self.mask.len() != layout.k()
            || self.global.len() != layout.d_y
            || self.global_mask.len() != layout.n_global()
            || self.dynamic.iter().any(|c| c.len() != rows)
            || self.mask.iter().any(|c| c.len() != rows)
            || self.global.iter().any(|c| c.len() != self.lengths.len())
            || self.global_mask.iter().any(|c| c.len() != self.lengths.len());
        if bad {
            return Err(Error::Data("dataset columns have inconsistent lengths".into()));
        }
        let mut instances = Vec::with_capacity(self.lengths.len());
        let mut off = 0;
        for (n, &l) in self.lengths.iter().enumerate() {
            let x = Array2::from_shape_fn((l, layout.d_x), |(i, c)| self.dynamic[c][off + i]);
            let mask = Array2::from_shape_fn((l, layout.k()), |(i, j)| self.mask[j][off + i] as f64);
            let y = Array1::from_shape_fn(layout.d_y, |c| self.global[c][n]);
            let gm = Array1::from_shape_fn(layout.n_global(), |j| self.global_mask[j][n] as f64);
            let t = Array1::from(self.time[off..off + l].to_vec());
            instances.push(Instance::new(x, mask, y, gm, t)?);
            off += l;
        }
        Dataset::new(self.schema, self.split, instances)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        crate::testutil::tiny_incomplete()
    }

    #[test]
    fn missing_rates_are_pooled_over_entries() {
        let ds = small();
        let rho = ds.dynamic_missing_rates();
        assert_eq!(rho, vec![1.0 / 4.0, 2.0 / 4.0]);
        assert_eq!(ds.global_missing_rates(), vec![0.0]);
        assert!((ds.overall_missing_rate() - 3.0 / 8.0).abs() < 1e-15);
        assert_eq!(ds.average_length(), 2.0);
    }

    #[test]
    fn columnar_file_round_trips_bit_exactly() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, ds);
        let a: Vec<u64> = ds.dynamic_missing_rates().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.dynamic_missing_rates().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        small().save(&path).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        v["time"].as_array_mut().unwrap().pop();
        std::fs::write(&path, v.to_string()).unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Data(_))));
    }
}
