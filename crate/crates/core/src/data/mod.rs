//! EHR-style data ingestion: code tokenization, per-patient modality joins,
//! synthetic cohort generation and stratified splits.

mod load;
mod synth;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

pub use load::{load_cohort, DemographicsRow, EhrRecord, LoadConfig};
pub use synth::{
    generate_synthetic, FixturePaths, PlantedTruth, SignalSpec, Synthetic, SynthConfig,
};

use crate::scalar::Scalar;

/// Reserved token id for right-padding.
pub const PAD_ID: u32 = 0;
/// Reserved token id for out-of-vocabulary codes.
pub const UNK_ID: u32 = 1;
/// First id handed to a real code.
pub const FIRST_CODE_ID: u32 = 2;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    ParseLine {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("csv error in {file}: {source}")]
    Csv {
        file: String,
        #[source]
        source: csv::Error,
    },
    #[error("duplicate patient id `{id}`")]
    DuplicatePatient { id: String },
    #[error("empty file: {path}")]
    EmptyFile { path: String },
    #[error("empty code sequence")]
    EmptyCodes,
    #[error("patient `{id}` has no demographics row")]
    MissingDemographics { id: String },
    #[error("invalid vocabulary: {msg}")]
    VocabInvalid { msg: String },
    #[error("split ratios must sum to 1")]
    BadRatios,
    #[error("split `{which}` received 0 patients")]
    EmptySplit { which: &'static str },
    #[error("invalid configuration: {msg}")]
    BadConfig { msg: String },
}

/// Code-string to token-id map. Ids 0 and 1 are reserved for padding and
/// unknown codes; real codes are contiguous from 2.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    map: HashMap<String, u32>,
}

impl Vocabulary {
    /// Assign ids in iteration order, starting at [`FIRST_CODE_ID`].
    /// Duplicate codes keep their first id.
    pub fn from_codes<I, T>(codes: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        let mut map = HashMap::new();
        let mut next = FIRST_CODE_ID;
        for code in codes {
            let code = code.into();
            map.entry(code).or_insert_with(|| {
                let id = next;
                next += 1;
                id
            });
        }
        Self { map }
    }

    /// Reconstruct from explicit pairs, validating bijectivity and
    /// contiguity from [`FIRST_CODE_ID`].
    pub fn from_pairs(pairs: Vec<(String, u32)>) -> Result<Self, DataError> {
        let mut map = HashMap::new();
        let mut seen_ids = vec![false; pairs.len()];
        for (code, id) in pairs {
            if id < FIRST_CODE_ID {
                return Err(DataError::VocabInvalid {
                    msg: format!("code `{code}` uses reserved id {id}"),
                });
            }
            let slot = (id - FIRST_CODE_ID) as usize;
            if slot >= seen_ids.len() || seen_ids[slot] {
                return Err(DataError::VocabInvalid {
                    msg: format!("ids are not contiguous from {FIRST_CODE_ID} (id {id})"),
                });
            }
            seen_ids[slot] = true;
            if map.insert(code.clone(), id).is_some() {
                return Err(DataError::VocabInvalid {
                    msg: format!("duplicate code `{code}`"),
                });
            }
        }
        Ok(Self { map })
    }

    /// Token id for a code; unknown codes map to [`UNK_ID`].
    pub fn id_of(&self, code: &str) -> u32 {
        self.map.get(code).copied().unwrap_or(UNK_ID)
    }

    /// Total id space including the two reserved ids.
    pub fn size(&self) -> usize {
        self.map.len() + FIRST_CODE_ID as usize
    }

    /// `(code, id)` pairs sorted by id, for deterministic serialization.
    pub fn sorted_pairs(&self) -> Vec<(String, u32)> {
        let mut pairs: Vec<(String, u32)> =
            self.map.iter().map(|(c, &i)| (c.clone(), i)).collect();
        pairs.sort_by_key(|(_, id)| *id);
        pairs
    }
}

/// One patient's ordered token ids, padded to the configured length.
#[derive(Debug, Clone, PartialEq)]
pub struct MedicalCodeSequence {
    pub patient_id: String,
    /// Exactly `max_len` ids; positions `>= content_len` are [`PAD_ID`].
    pub codes: Vec<u32>,
    pub content_len: usize,
    pub label: u8,
}

/// Joined numeric features for one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularFeatures<S> {
    pub patient_id: String,
    /// Age in years, gender one-hot, hashed zip-bucket one-hot.
    pub demographics: Vec<S>,
    /// Location-based statistics shared by every patient in the zip.
    pub location: Vec<S>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Aligned per-patient sequences and tabular features, with an optional
/// train/val/test assignment.
#[derive(Debug, Clone)]
pub struct Cohort<S> {
    pub sequences: Vec<MedicalCodeSequence>,
    pub features: Vec<TabularFeatures<S>>,
    pub splits: Option<Vec<Split>>,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl<S: Scalar> Cohort<S> {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn demo_dim(&self) -> usize {
        self.features.first().map_or(0, |f| f.demographics.len())
    }

    pub fn loc_dim(&self) -> usize {
        self.features.first().map_or(0, |f| f.location.len())
    }

    /// Indices assigned to a split; empty when no assignment exists.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        match &self.splits {
            Some(splits) => splits
                .iter()
                .enumerate()
                .filter(|(_, &s)| s == split)
                .map(|(i, _)| i)
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn positive_rate(&self) -> f64 {
        if self.sequences.is_empty() {
            return 0.0;
        }
        let pos = self.sequences.iter().filter(|s| s.label == 1).count();
        pos as f64 / self.sequences.len() as f64
    }

    /// One-to-one patient alignment between modalities, by position.
    pub fn validate_alignment(&self) -> bool {
        self.sequences.len() == self.features.len()
            && self
                .sequences
                .iter()
                .zip(&self.features)
                .all(|(s, f)| s.patient_id == f.patient_id)
    }
}

/// Map code strings to token ids, truncate to the most recent `max_len`
/// codes and right-pad with [`PAD_ID`]. Returns the padded ids and the
/// content length.
pub fn tokenize(
    raw_codes: &[String],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<(Vec<u32>, usize), DataError> {
    assert!(max_len >= 1, "max_len must be at least 1");
    if raw_codes.is_empty() {
        return Err(DataError::EmptyCodes);
    }
    let ids: Vec<u32> = raw_codes.iter().map(|c| vocab.id_of(c)).collect();
    Ok(fit_to_len(ids, max_len))
}

/// Length normalization used by [`tokenize`]: keep the most recent
/// `max_len` ids, right-pad shorter sequences. Idempotent on its own output.
pub fn fit_to_len(ids: Vec<u32>, max_len: usize) -> (Vec<u32>, usize) {
    let content: Vec<u32> = if ids.len() > max_len {
        ids[ids.len() - max_len..].to_vec()
    } else {
        ids
    };
    let content_len = content.len();
    let mut out = content;
    out.resize(max_len, PAD_ID);
    (out, content_len)
}

/// Hash a zip string into one of `buckets` one-hot positions (FNV-1a).
pub fn zip_bucket(zip: &str, buckets: usize) -> usize {
    (fnv1a(zip.as_bytes()) % buckets as u64) as usize
}

/// Stable 64-bit FNV-1a; also used to derive per-patient RNG streams.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Assign every patient to train/val/test, stratified by label so each
/// split's positive rate tracks the cohort's. Deterministic under `seed`.
pub fn split<S: Scalar>(
    cohort: &Cohort<S>,
    ratios: [f64; 3],
    seed: u64,
) -> Result<Cohort<S>, DataError> {
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| r < 0.0) {
        return Err(DataError::BadRatios);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut assignment = vec![Split::Train; cohort.len()];
    for class in [0u8, 1u8] {
        let mut members: Vec<usize> = (0..cohort.len())
            .filter(|&i| cohort.sequences[i].label == class)
            .collect();
        members.shuffle(&mut rng);
        let counts = largest_remainder(members.len(), ratios);
        let mut cursor = 0;
        for (split_idx, &count) in counts.iter().enumerate() {
            let split = [Split::Train, Split::Val, Split::Test][split_idx];
            for &patient in &members[cursor..cursor + count] {
                assignment[patient] = split;
            }
            cursor += count;
        }
    }
    for (split, name) in [
        (Split::Train, "train"),
        (Split::Val, "val"),
        (Split::Test, "test"),
    ] {
        if !assignment.iter().any(|&s| s == split) {
            return Err(DataError::EmptySplit { which: name });
        }
    }
    let mut out = cohort.clone();
    out.splits = Some(assignment);
    Ok(out)
}

/// Integer apportionment of `n` by `ratios`: floors plus largest-remainder
/// distribution, ties resolved by split order.
fn largest_remainder(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    let mut assigned = 0;
    for (i, &e) in exact.iter().enumerate() {
        counts[i] = e.floor() as usize;
        assigned += counts[i];
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

#[cfg(test)]
mod tests;
