//! File ingestion for the four fixture formats: JSON-lines EHR records,
//! demographics CSV, location CSV and the vocabulary CSV.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

use super::{
    tokenize, zip_bucket, Cohort, DataError, MedicalCodeSequence, TabularFeatures, Vocabulary,
};

/// One line of the EHR JSON-lines file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EhrRecord {
    pub patient_id: String,
    pub codes: Vec<String>,
    pub label: u8,
    pub zip: String,
}

/// One row of the demographics CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemographicsRow {
    pub patient_id: String,
    pub age: f64,
    pub gender: String,
    pub zip: String,
}

#[derive(Debug, Clone)]
pub struct LoadConfig {
    pub vocab_path: std::path::PathBuf,
    pub max_len: usize,
    pub zip_buckets: usize,
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path, source: csv::Error) -> DataError {
    DataError::Csv {
        file: path.display().to_string(),
        source,
    }
}

/// Read the `code,id` vocabulary CSV.
pub fn read_vocabulary(path: &Path) -> Result<Vocabulary, DataError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut pairs = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let code = record
            .get(0)
            .ok_or_else(|| DataError::ParseLine {
                file: path.display().to_string(),
                line: i + 2,
                msg: "missing code column".into(),
            })?
            .to_string();
        let id: u32 = record
            .get(1)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| DataError::ParseLine {
                file: path.display().to_string(),
                line: i + 2,
                msg: "missing or non-integer id column".into(),
            })?;
        pairs.push((code, id));
    }
    Vocabulary::from_pairs(pairs)
}

/// Load and join the three modality files into a [`Cohort`].
///
/// Every patient must appear in the demographics file; patients whose zip
/// has no location row receive the column-mean location vector, which is
/// reported in the returned warnings.
pub fn load_cohort<S: Scalar>(
    ehr_path: &Path,
    demo_path: &Path,
    loc_path: &Path,
    config: &LoadConfig,
) -> Result<(Cohort<S>, Vec<String>), DataError> {
    let vocab = read_vocabulary(&config.vocab_path)?;
    let ehr = read_ehr(ehr_path)?;
    if ehr.is_empty() {
        return Err(DataError::EmptyFile {
            path: ehr_path.display().to_string(),
        });
    }
    let demographics = read_demographics(demo_path)?;
    let (locations, loc_dim) = read_locations(loc_path)?;
    let mut warnings = Vec::new();

    // Column means for zip imputation.
    let mean_location: Vec<f64> = if locations.is_empty() {
        vec![0.0; loc_dim]
    } else {
        let mut sums = vec![0.0f64; loc_dim];
        for row in locations.values() {
            for (s, &v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums.iter().map(|s| s / locations.len() as f64).collect()
    };

    let mut sequences = Vec::with_capacity(ehr.len());
    let mut features = Vec::with_capacity(ehr.len());
    let mut seen = HashSet::new();
    for record in &ehr {
        if !seen.insert(record.patient_id.clone()) {
            return Err(DataError::DuplicatePatient {
                id: record.patient_id.clone(),
            });
        }
        if record.label > 1 {
            return Err(DataError::ParseLine {
                file: ehr_path.display().to_string(),
                line: 0,
                msg: format!(
                    "patient `{}` has label {}, expected 0 or 1",
                    record.patient_id, record.label
                ),
            });
        }
        let demo = demographics
            .get(&record.patient_id)
            .ok_or_else(|| DataError::MissingDemographics {
                id: record.patient_id.clone(),
            })?;
        if demo.zip != record.zip {
            warnings.push(format!(
                "patient `{}`: demographics zip `{}` differs from EHR zip `{}`; using EHR zip",
                record.patient_id, demo.zip, record.zip
            ));
        }
        let (codes, content_len) = tokenize(&record.codes, &vocab, config.max_len)?;
        sequences.push(MedicalCodeSequence {
            patient_id: record.patient_id.clone(),
            codes,
            content_len,
            label: record.label,
        });

        let location = match locations.get(&record.zip) {
            Some(row) => row.clone(),
            None => {
                let msg = format!(
                    "patient `{}`: zip `{}` has no location row, imputed column means",
                    record.patient_id, record.zip
                );
                warn!("{msg}");
                warnings.push(msg);
                mean_location.clone()
            }
        };
        features.push(TabularFeatures {
            patient_id: record.patient_id.clone(),
            demographics: demographics_vector(demo, config.zip_buckets, &record.zip),
            location: location.iter().map(|&v| S::of(v)).collect(),
        });
    }

    Ok((
        Cohort {
            sequences,
            features,
            splits: None,
            vocab_size: vocab.size(),
            max_len: config.max_len,
        },
        warnings,
    ))
}

/// Demographics vector layout: `[age, female, male, zip one-hot...]`.
pub fn demographics_vector<S: Scalar>(
    row: &DemographicsRow,
    zip_buckets: usize,
    zip: &str,
) -> Vec<S> {
    let mut out = vec![S::zero(); 3 + zip_buckets];
    out[0] = S::of(row.age);
    match row.gender.as_str() {
        "F" | "f" => out[1] = S::one(),
        _ => out[2] = S::one(),
    }
    out[3 + zip_bucket(zip, zip_buckets)] = S::one();
    out
}

pub fn read_ehr(path: &Path) -> Result<Vec<EhrRecord>, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EhrRecord =
            serde_json::from_str(&line).map_err(|e| DataError::ParseLine {
                file: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        records.push(record);
    }
    Ok(records)
}

pub fn read_demographics(path: &Path) -> Result<HashMap<String, DemographicsRow>, DataError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut rows = HashMap::new();
    for (i, result) in reader.deserialize::<DemographicsRow>().enumerate() {
        let row = result.map_err(|e| DataError::ParseLine {
            file: path.display().to_string(),
            line: i + 2,
            msg: e.to_string(),
        })?;
        if rows.insert(row.patient_id.clone(), row).is_some() {
            return Err(DataError::DuplicatePatient {
                id: format!("{} (demographics)", i + 2),
            });
        }
    }
    Ok(rows)
}

/// Location CSV: `zip,<feature_1>,...,<feature_M>`. Returns per-zip rows and
/// the feature count from the header.
pub fn read_locations(path: &Path) -> Result<(HashMap<String, Vec<f64>>, usize), DataError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.len() < 2 {
        return Err(DataError::ParseLine {
            file: path.display().to_string(),
            line: 1,
            msg: "location file needs a zip column and at least one feature".into(),
        });
    }
    let dim = headers.len() - 1;
    let mut rows = HashMap::new();
    for (i, result) in reader.records().enumerate() {
        let record = result.map_err(|e| csv_err(path, e))?;
        let zip = record.get(0).unwrap_or_default().to_string();
        let mut values = Vec::with_capacity(dim);
        for j in 1..record.len() {
            let v: f64 = record
                .get(j)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| DataError::ParseLine {
                    file: path.display().to_string(),
                    line: i + 2,
                    msg: format!("column {} is not a number", j + 1),
                })?;
            values.push(v);
        }
        if values.len() != dim {
            return Err(DataError::ParseLine {
                file: path.display().to_string(),
                line: i + 2,
                msg: format!("expected {} feature columns, found {}", dim, values.len()),
            });
        }
        rows.insert(zip, values);
    }
    Ok((rows, dim))
}
