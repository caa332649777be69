//! Delimited observation files and schema spec files.
//!
//! An observation file has a header row naming the id column, the time column
//! and one column per declared feature. Each row is one observation of one
//! instance; rows of an instance are contiguous or not, the first appearance
//! fixes instance order. An empty cell is a missing value. Global features are
//! read from the first row of the instance that carries them and are written
//! on every row.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::data::raw::{RawRecord, RawValue};
use crate::data::schema::{FeatureKind, Mode, Role, Schema, SchemaSpec};
use crate::error::{Error, Result};

pub fn read_schema_spec(path: &Path) -> Result<SchemaSpec> {
    if !path.exists() {
        return Err(Error::Config(format!("schema spec {} does not exist", path.display())));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SchemaSpec::from_toml(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.into(),
        line,
        message: message.into(),
    }
}

/// Reads an observation file into raw records, grouped by instance id.
pub fn read_observations(path: &Path, spec: &SchemaSpec) -> Result<Vec<RawRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| parse_error(path, 1, e.to_string()))?;
    let headers = reader.headers().map_err(|e| parse_error(path, 1, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let id_col = col(&spec.id_column)
        .ok_or_else(|| parse_error(path, 1, format!("missing id column {:?}", spec.id_column)))?;
    let time_col = col(&spec.time_column);
    if spec.mode == Mode::Incomplete && time_col.is_none() {
        return Err(parse_error(path, 1, format!("missing time column {:?}", spec.time_column)));
    }
    let mut dyn_cols = Vec::new();
    let mut glob_cols = Vec::new();
    for f in &spec.features {
        let c = col(&f.name).ok_or_else(|| parse_error(path, 1, format!("missing feature column {:?}", f.name)))?;
        match f.role {
            Role::Dynamic => dyn_cols.push((c, f.kind)),
            Role::Global => glob_cols.push((c, f.kind)),
        }
    }

    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, RawRecord> = HashMap::new();
    for (n, row) in reader.records().enumerate() {
        let line = n + 2;
        let row = row.map_err(|e| parse_error(path, line, e.to_string()))?;
        let cell = |c: usize, kind: FeatureKind| -> Result<Option<RawValue>> {
            let s = row.get(c).unwrap_or("").trim();
            if s.is_empty() {
                return Ok(None);
            }
            match kind {
                FeatureKind::Continuous => s
                    .parse::<f64>()
                    .map(|v| Some(RawValue::Num(v)))
                    .map_err(|_| parse_error(path, line, format!("{s:?} is not a number"))),
                FeatureKind::Categorical => Ok(Some(RawValue::Cat(s.to_string()))),
            }
        };
        let id = row.get(id_col).unwrap_or("").trim().to_string();
        let rec = by_id.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            RawRecord {
                id,
                times: Vec::new(),
                dynamic: Vec::new(),
                global: vec![None; glob_cols.len()],
            }
        });
        let time = match time_col {
            Some(c) => {
                let s = row.get(c).unwrap_or("").trim();
                s.parse::<f64>()
                    .map_err(|_| parse_error(path, line, format!("bad timestamp {s:?}")))?
            }
            None => rec.times.len() as f64,
        };
        rec.times.push(time);
        let values = dyn_cols
            .iter()
            .map(|&(c, kind)| cell(c, kind))
            .collect::<Result<Vec<_>>>()?;
        rec.dynamic.push(values);
        for (j, &(c, kind)) in glob_cols.iter().enumerate() {
            if rec.global[j].is_none() {
                rec.global[j] = cell(c, kind)?;
            }
        }
    }
    Ok(order.into_iter().map(|id| by_id.remove(&id).expect("recorded")).collect())
}

/// Header of an observation file written under `schema`.
pub fn observation_header(schema: &Schema) -> Vec<String> {
    let mut h = vec![schema.id_column.clone(), schema.time_column.clone()];
    h.extend(schema.features.iter().map(|f| f.name.clone()));
    h
}

/// Writes raw records in the observation layout; `None` becomes an empty cell.
pub fn write_observations(path: &Path, records: &[RawRecord], schema: &Schema) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let to_io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(observation_header(schema)).map_err(to_io)?;
    for rec in records {
        for (i, row) in rec.dynamic.iter().enumerate() {
            let mut out = vec![rec.id.clone(), format!("{}", rec.times[i])];
            let (mut dj, mut gj) = (0, 0);
            for f in &schema.features {
                let v = match f.role {
                    Role::Dynamic => {
                        dj += 1;
                        &row[dj - 1]
                    }
                    Role::Global => {
                        gj += 1;
                        &rec.global[gj - 1]
                    }
                };
                out.push(v.as_ref().map(RawValue::to_cell).unwrap_or_default());
            }
            w.write_record(&out).map_err(to_io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Numeric table with a header row, e.g. a daily price history.
pub fn read_numeric_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| parse_error(path, 1, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| parse_error(path, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (n, row) in reader.records().enumerate() {
        let row = row.map_err(|e| parse_error(path, n + 2, e.to_string()))?;
        let values = row
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_error(path, n + 2, format!("{s:?} is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(values);
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::schema::fit_schema;

    const SPEC: &str = r#"
id_column = "id"
time_column = "time"
time_unit = "hours"
label = "died"

[[features]]
name = "hr"
kind = "continuous"
role = "dynamic"
clamp = [0.0, 300.0]
normal_value = "80"

[[features]]
name = "gcs"
kind = "categorical"
role = "dynamic"

[[features]]
name = "died"
kind = "categorical"
role = "global"
"#;

    #[test]
    fn reads_groups_and_writes_back() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SchemaSpec::from_toml(SPEC).unwrap();
        let path = dir.path().join("obs.csv");
        fs::write(
            &path,
            "id,time,hr,gcs,died\np1,0,80,15,0\np2,0.5,,3,\np1,1.5,,,\np2,2,120,,1\n",
        )
        .unwrap();
        let recs = read_observations(&path, &spec).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].id, "p1");
        assert_eq!(recs[0].times, vec![0.0, 1.5]);
        assert_eq!(recs[0].dynamic[1], vec![None, None]);
        assert_eq!(recs[1].global, vec![Some(RawValue::Cat("1".into()))]);
        let schema = fit_schema(&recs, &spec).unwrap();
        let out = dir.path().join("out.csv");
        write_observations(&out, &recs, &schema).unwrap();
        let again = read_observations(&out, &spec).unwrap();
        assert_eq!(again.len(), 2);
        assert_eq!(again[0].dynamic, recs[0].dynamic);
        assert_eq!(again[1].times, recs[1].times);
    }

    #[test]
    fn bad_cells_report_their_line() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SchemaSpec::from_toml(SPEC).unwrap();
        let path = dir.path().join("obs.csv");
        fs::write(&path, "id,time,hr,gcs,died\np1,0,80,15,0\np1,1,fast,15,0\n").unwrap();
        match read_observations(&path, &spec) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        fs::write(&path, "id,time,hr\np1,0,80\n").unwrap();
        assert!(matches!(read_observations(&path, &spec), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn missing_spec_file_names_the_path() {
        let err = read_schema_spec(Path::new("/no/such/spec.toml")).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("/no/such/spec.toml")));
    }

    #[test]
    fn empty_record_set_writes_only_the_header() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SchemaSpec::from_toml(SPEC).unwrap();
        let path = dir.path().join("obs.csv");
        fs::write(&path, "id,time,hr,gcs,died\np1,0,80,15,0\n").unwrap();
        let schema = fit_schema(&read_observations(&path, &spec).unwrap(), &spec).unwrap();
        let out = dir.path().join("empty.csv");
        write_observations(&out, &[], &schema).unwrap();
        assert_eq!(fs::read_to_string(&out).unwrap(), "id,time,hr,gcs,died\n");
    }
}
