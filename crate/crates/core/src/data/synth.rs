//! Labeled synthetic cohorts with a documented planted rule, standing in for
//! the private claims data the real pipeline would ingest.
//!
//! Labels are drawn as
//! `y ~ Bernoulli(sigmoid(a * risk_count + b * g0 + c * age_norm + eps + t))`
//! where `risk_count` counts designated risk tokens in the patient's
//! sequence, `g0` is the first location feature of the patient's zip,
//! `age_norm = (age - 55) / 35`, `eps` is Gaussian noise and the intercept
//! `t` is calibrated by bisection so the cohort hits the requested positive
//! rate.
//!
//! A `label_noise_rate` fraction of patients is planted as genuinely
//! ambiguous: their sequence is rebuilt so the systematic score sits at the
//! decision boundary and their label is a fair coin flip. The generator
//! records who they are so uncertainty-based filtering can be scored
//! against ground truth.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

use super::load::{demographics_vector, DemographicsRow, EhrRecord};
use super::{
    tokenize, Cohort, DataError, MedicalCodeSequence, TabularFeatures, Vocabulary, FIRST_CODE_ID,
};

/// Coefficients of the planted label rule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignalSpec {
    /// Weight `a` on the risk-token count.
    pub risk_token_weight: f64,
    /// Weight `b` on the designated location feature.
    pub location_weight: f64,
    /// Weight `c` on normalized age.
    pub age_weight: f64,
    /// Standard deviation of the additive logit noise.
    pub noise_std: f64,
    /// Fraction of patients planted as boundary-ambiguous coin flips.
    pub label_noise_rate: f64,
    /// How many vocabulary codes count as risk tokens.
    pub n_risk_tokens: usize,
    /// Per-position probability scale of drawing a risk token.
    pub risk_token_rate: f64,
}

impl Default for SignalSpec {
    fn default() -> Self {
        Self {
            risk_token_weight: 0.5,
            location_weight: 1.5,
            age_weight: 0.8,
            noise_std: 0.3,
            label_noise_rate: 0.0,
            n_risk_tokens: 25,
            risk_token_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Total token-id space including the two reserved ids.
    pub vocab_size: usize,
    pub n_locations: usize,
    pub n_location_features: usize,
    pub positive_rate: f64,
    pub min_codes: usize,
    pub max_codes: usize,
    pub max_len: usize,
    pub zip_buckets: usize,
    pub signal: SignalSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 2000,
            vocab_size: 500,
            n_locations: 50,
            n_location_features: 34,
            positive_rate: 0.3,
            min_codes: 8,
            max_codes: 40,
            max_len: 200,
            zip_buckets: 64,
            signal: SignalSpec::default(),
        }
    }
}

/// Ground truth the generator knows about its own cohort.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub noise_patient_ids: BTreeSet<String>,
    pub intercept: f64,
    pub n_risk_tokens: usize,
}

/// A generated cohort plus the raw records its fixture files serialize.
#[derive(Debug, Clone)]
pub struct Synthetic<S> {
    pub cohort: Cohort<S>,
    pub truth: PlantedTruth,
    pub ehr: Vec<EhrRecord>,
    pub demographics: Vec<DemographicsRow>,
    pub locations: Vec<(String, Vec<f64>)>,
    pub vocab: Vocabulary,
}

#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub ehr: PathBuf,
    pub demographics: PathBuf,
    pub locations: PathBuf,
    pub vocab: PathBuf,
    pub truth: PathBuf,
}

pub fn generate_synthetic<S: Scalar>(
    config: &SynthConfig,
    seed: u64,
) -> Result<Synthetic<S>, DataError> {
    validate(config)?;
    let s = &config.signal;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let n_codes = config.vocab_size - FIRST_CODE_ID as usize;
    let code_strings: Vec<String> = (0..n_codes).map(|i| format!("C{i:05}")).collect();
    let vocab = Vocabulary::from_codes(code_strings.iter().cloned());
    let n_risk = s.n_risk_tokens.min(n_codes.saturating_sub(1));

    let locations: Vec<(String, Vec<f64>)> = (0..config.n_locations)
        .map(|k| {
            let zip = format!("Z{k:04}");
            let feats = (0..config.n_location_features)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            (zip, feats)
        })
        .collect();

    struct Draft {
        zip_idx: usize,
        age: f64,
        gender: &'static str,
        codes: Vec<String>,
        risk_count: usize,
        noise_eps: f64,
    }

    let draw_code = |rng: &mut ChaCha20Rng, risk: bool| -> (String, bool) {
        if risk {
            (code_strings[rng.random_range(0..n_risk)].clone(), true)
        } else {
            (
                code_strings[rng.random_range(n_risk..n_codes)].clone(),
                false,
            )
        }
    };

    let mut drafts = Vec::with_capacity(config.n_patients);
    for _ in 0..config.n_patients {
        let zip_idx = rng.random_range(0..config.n_locations);
        let age = rng.random_range(20..90) as f64;
        let gender = if rng.random_range(0.0..1.0) < 0.5 {
            "F"
        } else {
            "M"
        };
        let t_len = rng.random_range(config.min_codes..=config.max_codes);
        let propensity: f64 = rng.random_range(0.0..1.0);
        let mut codes = Vec::with_capacity(t_len);
        let mut risk_count = 0;
        for _ in 0..t_len {
            let is_risk = rng.random_range(0.0..1.0) < s.risk_token_rate * propensity;
            let (code, risk) = draw_code(&mut rng, is_risk);
            if risk {
                risk_count += 1;
            }
            codes.push(code);
        }
        let noise_eps: f64 = {
            let e: f64 = StandardNormal.sample(&mut rng);
            s.noise_std * e
        };
        drafts.push(Draft {
            zip_idx,
            age,
            gender,
            codes,
            risk_count,
            noise_eps,
        });
    }

    let age_norm = |age: f64| (age - 55.0) / 35.0;
    let raw_score = |d: &Draft| {
        s.risk_token_weight * d.risk_count as f64
            + s.location_weight * locations[d.zip_idx].1[0]
            + s.age_weight * age_norm(d.age)
            + d.noise_eps
    };
    let scores: Vec<f64> = drafts.iter().map(raw_score).collect();
    let intercept = calibrate_intercept(&scores, config.positive_rate);

    let mut labels: Vec<u8> = scores
        .iter()
        .map(|&sc| u8::from(rng.random_range(0.0..1.0) < sigmoid(sc + intercept)))
        .collect();

    // Plant boundary-ambiguous patients whose label is a fair coin flip.
    let n_noise = (s.label_noise_rate * config.n_patients as f64).round() as usize;
    let mut order: Vec<usize> = (0..config.n_patients).collect();
    order.shuffle(&mut rng);
    let mut noise_indices: Vec<usize> = order.into_iter().take(n_noise).collect();
    noise_indices.sort_unstable();
    for &i in &noise_indices {
        let d = &mut drafts[i];
        if s.risk_token_weight != 0.0 {
            let systematic = s.location_weight * locations[d.zip_idx].1[0]
                + s.age_weight * age_norm(d.age);
            let target = ((-intercept - systematic) / s.risk_token_weight).round();
            let target = target.clamp(0.0, d.codes.len() as f64) as usize;
            let t_len = d.codes.len();
            let mut positions: Vec<usize> = (0..t_len).collect();
            positions.shuffle(&mut rng);
            let risk_positions: BTreeSet<usize> =
                positions.into_iter().take(target).collect();
            let mut codes = Vec::with_capacity(t_len);
            for pos in 0..t_len {
                let (code, _) = draw_code(&mut rng, risk_positions.contains(&pos));
                codes.push(code);
            }
            d.codes = codes;
            d.risk_count = target;
            d.noise_eps = 0.0;
        }
        labels[i] = u8::from(rng.random_range(0.0..1.0) < 0.5);
    }

    // Assemble records and the in-memory cohort through the same conversion
    // path the file loader uses.
    let mut ehr = Vec::with_capacity(config.n_patients);
    let mut demographics = Vec::with_capacity(config.n_patients);
    let mut sequences = Vec::with_capacity(config.n_patients);
    let mut features = Vec::with_capacity(config.n_patients);
    for (i, d) in drafts.iter().enumerate() {
        let patient_id = format!("P{i:06}");
        let zip = locations[d.zip_idx].0.clone();
        let record = EhrRecord {
            patient_id: patient_id.clone(),
            codes: d.codes.clone(),
            label: labels[i],
            zip: zip.clone(),
        };
        let demo_row = DemographicsRow {
            patient_id: patient_id.clone(),
            age: d.age,
            gender: d.gender.to_string(),
            zip: zip.clone(),
        };
        let (ids, content_len) = tokenize(&record.codes, &vocab, config.max_len)?;
        sequences.push(MedicalCodeSequence {
            patient_id: patient_id.clone(),
            codes: ids,
            content_len,
            label: labels[i],
        });
        features.push(TabularFeatures {
            patient_id: patient_id.clone(),
            demographics: demographics_vector(&demo_row, config.zip_buckets, &zip),
            location: locations[d.zip_idx].1.iter().map(|&v| S::of(v)).collect(),
        });
        ehr.push(record);
        demographics.push(demo_row);
    }

    let noise_patient_ids: BTreeSet<String> = noise_indices
        .iter()
        .map(|&i| format!("P{i:06}"))
        .collect();

    Ok(Synthetic {
        cohort: Cohort {
            sequences,
            features,
            splits: None,
            vocab_size: vocab.size(),
            max_len: config.max_len,
        },
        truth: PlantedTruth {
            noise_patient_ids,
            intercept,
            n_risk_tokens: n_risk,
        },
        ehr,
        demographics,
        locations,
        vocab,
    })
}

impl<S: Scalar> Synthetic<S> {
    /// Write the four loader-facing fixture files plus a ground-truth
    /// sidecar (which the loader ignores).
    pub fn write_fixtures(&self, dir: &Path) -> Result<FixturePaths, DataError> {
        std::fs::create_dir_all(dir).map_err(|e| DataError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        let paths = FixturePaths {
            ehr: dir.join("ehr.jsonl"),
            demographics: dir.join("demographics.csv"),
            locations: dir.join("locations.csv"),
            vocab: dir.join("vocab.csv"),
            truth: dir.join("truth.json"),
        };
        let io = |path: &Path, e: std::io::Error| DataError::Io {
            path: path.display().to_string(),
            source: e,
        };

        let mut ehr = BufWriter::new(File::create(&paths.ehr).map_err(|e| io(&paths.ehr, e))?);
        for record in &self.ehr {
            let line = serde_json::to_string(record).expect("serializable record");
            writeln!(ehr, "{line}").map_err(|e| io(&paths.ehr, e))?;
        }
        ehr.flush().map_err(|e| io(&paths.ehr, e))?;

        let mut demo = csv::Writer::from_path(&paths.demographics)
            .map_err(|e| csv_io(&paths.demographics, e))?;
        for row in &self.demographics {
            demo.serialize(row)
                .map_err(|e| csv_io(&paths.demographics, e))?;
        }
        demo.flush().map_err(|e| io(&paths.demographics, e))?;

        let mut loc =
            csv::Writer::from_path(&paths.locations).map_err(|e| csv_io(&paths.locations, e))?;
        let n_feats = self.locations.first().map_or(0, |(_, f)| f.len());
        let mut header = vec!["zip".to_string()];
        header.extend((1..=n_feats).map(|i| format!("f{i}")));
        loc.write_record(&header)
            .map_err(|e| csv_io(&paths.locations, e))?;
        for (zip, feats) in &self.locations {
            let mut record = vec![zip.clone()];
            record.extend(feats.iter().map(|v| v.to_string()));
            loc.write_record(&record)
                .map_err(|e| csv_io(&paths.locations, e))?;
        }
        loc.flush().map_err(|e| io(&paths.locations, e))?;

        let mut vocab =
            csv::Writer::from_path(&paths.vocab).map_err(|e| csv_io(&paths.vocab, e))?;
        vocab
            .write_record(["code", "id"])
            .map_err(|e| csv_io(&paths.vocab, e))?;
        for (code, id) in self.vocab.sorted_pairs() {
            vocab
                .write_record([code.as_str(), &id.to_string()])
                .map_err(|e| csv_io(&paths.vocab, e))?;
        }
        vocab.flush().map_err(|e| io(&paths.vocab, e))?;

        let truth = serde_json::to_string_pretty(&self.truth).expect("serializable truth");
        std::fs::write(&paths.truth, truth).map_err(|e| io(&paths.truth, e))?;
        Ok(paths)
    }
}

fn csv_io(path: &Path, e: csv::Error) -> DataError {
    DataError::Csv {
        file: path.display().to_string(),
        source: e,
    }
}

fn validate(config: &SynthConfig) -> Result<(), DataError> {
    let bad = |msg: String| Err(DataError::BadConfig { msg });
    if config.vocab_size <= 10 {
        return bad(format!("vocab_size {} must exceed 10", config.vocab_size));
    }
    if !(0.0..1.0).contains(&config.positive_rate) || config.positive_rate == 0.0 {
        return bad(format!(
            "positive_rate {} must lie strictly between 0 and 1",
            config.positive_rate
        ));
    }
    if config.n_patients == 0 || config.n_locations == 0 || config.n_location_features == 0 {
        return bad("patients, locations and location features must be positive".into());
    }
    if config.min_codes == 0 || config.max_codes < config.min_codes {
        return bad(format!(
            "code-count range [{}, {}] is invalid",
            config.min_codes, config.max_codes
        ));
    }
    if config.signal.n_risk_tokens + FIRST_CODE_ID as usize >= config.vocab_size {
        return bad(format!(
            "{} risk tokens leave no regular codes in a vocabulary of {}",
            config.signal.n_risk_tokens, config.vocab_size
        ));
    }
    if !(0.0..=1.0).contains(&config.signal.label_noise_rate) {
        return bad("label_noise_rate must lie in [0, 1]".into());
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bisection for the intercept `t` with `mean(sigmoid(score + t)) = rate`.
fn calibrate_intercept(scores: &[f64], rate: f64) -> f64 {
    let mean_prob = |t: f64| {
        scores.iter().map(|&s| sigmoid(s + t)).sum::<f64>() / scores.len() as f64
    };
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_prob(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
