//! Command implementations behind the `riskgp` binary: synthetic-cohort
//! generation, training, evaluation with uncertainty filtering, prediction
//! export and covariance biclustering. Every command writes its resolved
//! configuration next to its outputs and is byte-reproducible under a fixed
//! seed (wall-clock time appears only in the training log's `seconds`
//! field).

pub mod config;
pub mod error;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use riskgp::checkpoint::Checkpoint;
use riskgp::data::{
    self, generate_synthetic, load_cohort, LoadConfig, SignalSpec, Split, SynthConfig,
};
use riskgp::metrics;
use riskgp::model::{ModelConfig, RiskModel};
use riskgp::predict::{self, PatientPrediction};
use riskgp::rng::{stream_rng, Stream};
use riskgp::train::{self, TrainConfig, TrainReport};
use riskgp::Cohort64;

pub use config::RunConfig;
pub use error::CliError;

use error::io_error;

/// File names within a data directory / output directory.
pub mod files {
    pub const EHR: &str = "ehr.jsonl";
    pub const DEMOGRAPHICS: &str = "demographics.csv";
    pub const LOCATIONS: &str = "locations.csv";
    pub const VOCAB: &str = "vocab.csv";
    pub const CHECKPOINT: &str = "checkpoint.json";
    pub const TRAIN_LOG: &str = "train_log.jsonl";
    pub const RESOLVED_CONFIG: &str = "config.resolved";
    pub const METRICS: &str = "metrics.csv";
    pub const PREDICTIONS: &str = "predictions.csv";
    pub const COVARIANCE: &str = "covariance.csv";
    pub const COVARIANCE_META: &str = "covariance_meta.json";
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn write_resolved(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let path = out.join(files::RESOLVED_CONFIG);
    std::fs::write(&path, config.resolved_text()).map_err(|e| io_error(&path, e))
}

fn synth_config(config: &RunConfig) -> SynthConfig {
    SynthConfig {
        n_patients: config.n_patients,
        vocab_size: config.vocab_size,
        n_locations: config.n_locations,
        n_location_features: config.location_features,
        positive_rate: config.positive_rate,
        min_codes: config.gen_min_codes,
        max_codes: config.gen_max_codes,
        max_len: config.max_len,
        zip_buckets: config.zip_buckets,
        signal: SignalSpec {
            risk_token_weight: config.signal_risk_weight,
            location_weight: config.signal_location_weight,
            age_weight: config.signal_age_weight,
            noise_std: config.signal_noise_std,
            label_noise_rate: config.label_noise_rate,
            n_risk_tokens: config.n_risk_tokens,
            risk_token_rate: config.risk_token_rate,
        },
    }
}

/// Load the three fixture files and assign the train/val/test split.
pub fn load_split_cohort(config: &RunConfig) -> Result<Cohort64, CliError> {
    let dir = &config.data_dir;
    let load = LoadConfig {
        vocab_path: dir.join(files::VOCAB),
        max_len: config.max_len,
        zip_buckets: config.zip_buckets,
    };
    let (cohort, warnings) = load_cohort::<f64>(
        &dir.join(files::EHR),
        &dir.join(files::DEMOGRAPHICS),
        &dir.join(files::LOCATIONS),
        &load,
    )?;
    for warning in &warnings {
        eprintln!("warning: {warning}");
    }
    let cohort = data::split(
        &cohort,
        [config.split_train, config.split_val, config.split_test],
        config.seed,
    )?;
    Ok(cohort)
}

fn model_config(config: &RunConfig, cohort: &Cohort64) -> ModelConfig {
    ModelConfig {
        vocab_size: cohort.vocab_size,
        max_len: config.max_len,
        n_blocks: config.n_blocks,
        n_heads: config.n_heads,
        model_dim: config.code_embed_dim,
        feedforward_dim: config.feedforward_dim,
        ehr_dim: config.ehr_embed_dim,
        demo_input_dim: cohort.demo_dim(),
        loc_input_dim: cohort.loc_dim(),
        tabular_hidden_dim: config.tabular_hidden_dim,
        tabular_embed_dim: config.tabular_embed_dim,
        fused_dim: config.fused_dim,
        inducing_count: config.inducing_points,
        use_demographics: config.use_demographics,
        use_location: config.use_location,
        free_mean: config.variational_mean == "free",
    }
}

fn train_config(config: &RunConfig) -> TrainConfig {
    TrainConfig {
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        beta1: config.adam_beta1,
        beta2: config.adam_beta2,
        epsilon: config.adam_epsilon,
        max_epochs: config.max_epochs,
        patience: config.patience,
        b_train: config.b_train,
        b_eval: config.b_eval,
        pretrain_epochs: config.pretrain_epochs,
        grad_clip: config.grad_clip,
        min_rel_improvement: 1e-4,
        seed: config.seed,
    }
}

/// `generate`: write the four fixture files (plus the ground-truth sidecar)
/// into the output directory.
pub fn cmd_generate(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    ensure_dir(out)?;
    let synth = generate_synthetic::<f64>(&synth_config(config), config.seed)?;
    synth.write_fixtures(out)?;
    write_resolved(config, out)?;
    Ok(())
}

/// `train`: pre-train, fit with SVI, and write checkpoint, training log and
/// resolved configuration.
pub fn cmd_train(config: &RunConfig, out: &Path) -> Result<TrainReport, CliError> {
    ensure_dir(out)?;
    let cohort = load_split_cohort(config)?;
    let mut model = RiskModel::<f64>::init(model_config(config, &cohort), config.seed)?;
    let report = train::fit(&mut model, &cohort, &train_config(config))?;

    Checkpoint::from_model(&model, None).save(&out.join(files::CHECKPOINT))?;
    let log_path = out.join(files::TRAIN_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_error(&log_path, e))?);
    for record in &report.epochs {
        let line = serde_json::to_string(record)
            .map_err(|e| CliError::Data(format!("cannot serialize log record: {e}")))?;
        writeln!(log, "{line}").map_err(|e| io_error(&log_path, e))?;
    }
    log.flush().map_err(|e| io_error(&log_path, e))?;
    write_resolved(config, out)?;
    Ok(report)
}

fn load_model(path: &Path) -> Result<RiskModel<f64>, CliError> {
    Ok(Checkpoint::load(path)?.to_model::<f64>()?)
}

fn split_from_name(name: &str) -> Result<Option<Split>, CliError> {
    match name {
        "train" => Ok(Some(Split::Train)),
        "val" => Ok(Some(Split::Val)),
        "test" => Ok(Some(Split::Test)),
        "all" => Ok(None),
        other => Err(CliError::Config(format!(
            "unknown split `{other}` (expected train|val|test|all)"
        ))),
    }
}

fn format_float(v: f64) -> String {
    // shortest round-trip representation keeps outputs byte-reproducible
    format!("{v}")
}

/// `evaluate`: metrics on the test split at each uncertainty-removal level,
/// without retraining.
pub fn cmd_evaluate(config: &RunConfig, checkpoint: &Path, out: &Path) -> Result<(), CliError> {
    ensure_dir(out)?;
    let model = load_model(checkpoint)?;
    let cohort = load_split_cohort(config)?;
    let test_idx = cohort.split_indices(Split::Test);
    if test_idx.is_empty() {
        return Err(CliError::Data("cohort has no test split".into()));
    }
    let preds = predict::predict(&model, &cohort, &test_idx, config.b_eval, config.seed)?;
    let labels: Vec<u8> = test_idx.iter().map(|&i| cohort.sequences[i].label).collect();

    let path = out.join(files::METRICS);
    let mut rows = Vec::new();
    for &q in &config.filter_fractions {
        let retained = predict::uncertainty_filter(&preds, q)?;
        let r_labels: Vec<u8> = retained.iter().map(|&i| labels[i]).collect();
        let r_hard: Vec<u8> = retained.iter().map(|&i| preds[i].label_pred).collect();
        let r_scores: Vec<f64> = retained.iter().map(|&i| preds[i].dist.mean).collect();
        let eval = metrics::evaluate_all(&r_labels, &r_hard, &r_scores)?;
        rows.push(format!(
            "{},{},{},{},{}",
            format_float(q),
            retained.len(),
            format_float(eval.f1),
            format_float(eval.kappa),
            format_float(eval.pr_auc)
        ));
    }
    let mut text = String::from("q,retained,f1,kappa,pr_auc\n");
    for row in rows {
        text.push_str(&row);
        text.push('\n');
    }
    std::fs::write(&path, text).map_err(|e| io_error(&path, e))?;
    write_resolved(config, out)?;
    Ok(())
}

/// `predict`: per-patient risk means and uncertainty scores as CSV.
pub fn cmd_predict(
    config: &RunConfig,
    checkpoint: &Path,
    out: &Path,
    split: &str,
) -> Result<(), CliError> {
    ensure_dir(out)?;
    let model = load_model(checkpoint)?;
    let cohort = load_split_cohort(config)?;
    let indices: Vec<usize> = match split_from_name(split)? {
        Some(split) => cohort.split_indices(split),
        None => (0..cohort.len()).collect(),
    };
    if indices.is_empty() {
        return Err(CliError::Data(format!("split `{split}` is empty")));
    }
    let preds = predict::predict(&model, &cohort, &indices, config.b_eval, config.seed)?;
    write_predictions(&preds, &out.join(files::PREDICTIONS))?;
    write_resolved(config, out)?;
    Ok(())
}

pub fn write_predictions(
    preds: &[PatientPrediction<f64>],
    path: &Path,
) -> Result<(), CliError> {
    let mut text = String::from("patient_id,risk_mean,uncertainty,label_pred\n");
    for p in preds {
        text.push_str(&format!(
            "{},{},{},{}\n",
            p.patient_id,
            format_float(p.dist.mean),
            format_float(p.dist.epistemic_variance),
            p.label_pred
        ));
    }
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

/// `export-covariance`: class-balanced test sample, kernel matrix and
/// two-way spectral partition, exported as CSV plus a JSON sidecar.
pub fn cmd_export_covariance(
    config: &RunConfig,
    checkpoint: &Path,
    out: &Path,
    n_sample: usize,
) -> Result<(), CliError> {
    ensure_dir(out)?;
    let model = load_model(checkpoint)?;
    let cohort = load_split_cohort(config)?;
    let test_idx = cohort.split_indices(Split::Test);
    let per_class = n_sample / 2;
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for &i in &test_idx {
        by_class[cohort.sequences[i].label as usize].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < per_class {
            return Err(CliError::Data(format!(
                "test split has {} patients of class {class}, need {per_class}",
                members.len()
            )));
        }
    }
    let mut rng = stream_rng(config.seed, Stream::Prediction, 0xC0);
    let mut sample = Vec::with_capacity(per_class * 2);
    for members in &mut by_class {
        members.shuffle(&mut rng);
        sample.extend_from_slice(&members[..per_class]);
    }
    sample.sort_unstable();

    let export = predict::covariance_bicluster(&model, &cohort, &sample)?;
    let matrix = export.reordered_matrix();
    let path = out.join(files::COVARIANCE);
    let mut text = String::from("patient_id");
    for &i in &export.ordering {
        text.push(',');
        text.push_str(&export.patient_ids[i]);
    }
    text.push('\n');
    for (row, &i) in export.ordering.iter().enumerate() {
        text.push_str(&export.patient_ids[i]);
        for col in 0..matrix.cols() {
            text.push(',');
            text.push_str(&format_float(matrix.at(row, col)));
        }
        text.push('\n');
    }
    std::fs::write(&path, text).map_err(|e| io_error(&path, e))?;

    #[derive(serde::Serialize)]
    struct Sidecar<'a> {
        patient_ids: &'a [String],
        assignment: &'a [u8],
        ordering: &'a [usize],
        degenerate: bool,
    }
    let meta = serde_json::to_string_pretty(&Sidecar {
        patient_ids: &export.patient_ids,
        assignment: &export.assignment,
        ordering: &export.ordering,
        degenerate: export.degenerate,
    })
    .map_err(|e| CliError::Data(format!("cannot serialize sidecar: {e}")))?;
    let meta_path = out.join(files::COVARIANCE_META);
    std::fs::write(&meta_path, meta).map_err(|e| io_error(&meta_path, e))?;
    write_resolved(config, out)?;
    Ok(())
}

/// Resolve the effective configuration from an optional file plus command
/// line overrides.
pub fn resolve_config(
    config_path: Option<&Path>,
    seed: Option<u64>,
    ablate: Option<&str>,
    data_dir: Option<&Path>,
) -> Result<RunConfig, CliError> {
    let mut config = match config_path {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(dir) = data_dir {
        config.data_dir = PathBuf::from(dir);
    }
    match ablate {
        Some("location") => config.use_location = false,
        Some("demographics") => config.use_demographics = false,
        Some("both") => {
            config.use_location = false;
            config.use_demographics = false;
        }
        Some(other) => {
            return Err(CliError::Config(format!(
                "unknown ablation `{other}` (expected location|demographics|both)"
            )))
        }
        None => {}
    }
    config.validate()?;
    Ok(config)
}
