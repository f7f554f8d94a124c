//! Plain-text key-value run configuration. Every knob has a default;
//! unknown keys are rejected; the fully resolved set is emitted next to
//! every command's outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // paths
    pub data_dir: PathBuf,
    // model
    pub code_embed_dim: usize,
    pub max_len: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub feedforward_dim: usize,
    pub ehr_embed_dim: usize,
    pub tabular_hidden_dim: usize,
    pub tabular_embed_dim: usize,
    pub fused_dim: usize,
    pub inducing_points: usize,
    pub variational_mean: String,
    // training
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub b_train: usize,
    pub b_eval: usize,
    pub pretrain_epochs: usize,
    pub grad_clip: f64,
    // data generation
    pub seed: u64,
    pub n_patients: usize,
    pub vocab_size: usize,
    pub n_locations: usize,
    pub location_features: usize,
    pub positive_rate: f64,
    pub zip_buckets: usize,
    pub gen_min_codes: usize,
    pub gen_max_codes: usize,
    pub signal_risk_weight: f64,
    pub signal_location_weight: f64,
    pub signal_age_weight: f64,
    pub signal_noise_std: f64,
    pub label_noise_rate: f64,
    pub n_risk_tokens: usize,
    pub risk_token_rate: f64,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    // ablation
    pub use_demographics: bool,
    pub use_location: bool,
    // evaluation
    pub filter_fractions: Vec<f64>,
    pub export_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            code_embed_dim: 128,
            max_len: 200,
            n_blocks: 2,
            n_heads: 8,
            feedforward_dim: 512,
            ehr_embed_dim: 128,
            tabular_hidden_dim: 16,
            tabular_embed_dim: 2,
            fused_dim: 16,
            inducing_points: 200,
            variational_mean: "z_alpha".into(),
            batch_size: 256,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            max_epochs: 50,
            patience: 5,
            b_train: 8,
            b_eval: 512,
            pretrain_epochs: 10,
            grad_clip: 10.0,
            seed: 7,
            n_patients: 2000,
            vocab_size: 500,
            n_locations: 50,
            location_features: 34,
            positive_rate: 0.3,
            zip_buckets: 64,
            gen_min_codes: 8,
            gen_max_codes: 40,
            signal_risk_weight: 0.5,
            signal_location_weight: 1.5,
            signal_age_weight: 0.8,
            signal_noise_std: 0.3,
            label_noise_rate: 0.0,
            n_risk_tokens: 25,
            risk_token_rate: 0.5,
            split_train: 0.64,
            split_val: 0.16,
            split_test: 0.20,
            use_demographics: true,
            use_location: true,
            filter_fractions: vec![0.0, 0.2, 0.5, 0.8],
            export_samples: 200,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let raw = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut config = Self::default();
        for (lineno, line) in raw.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!(
                    "{}:{}: expected `key = value`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            config
                .apply(key.trim(), value.trim())
                .map_err(|msg| {
                    CliError::Config(format!("{}:{}: {msg}", path.display(), lineno + 1))
                })?;
        }
        config.validate()?;
        Ok(config)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("invalid value `{value}` for key `{key}`"))
        }
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value),
            "code_embed_dim" => self.code_embed_dim = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "n_blocks" => self.n_blocks = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "feedforward_dim" => self.feedforward_dim = parse(key, value)?,
            "ehr_embed_dim" => self.ehr_embed_dim = parse(key, value)?,
            "tabular_hidden_dim" => self.tabular_hidden_dim = parse(key, value)?,
            "tabular_embed_dim" => self.tabular_embed_dim = parse(key, value)?,
            "fused_dim" => self.fused_dim = parse(key, value)?,
            "inducing_points" => self.inducing_points = parse(key, value)?,
            "variational_mean" => match value {
                "z_alpha" | "free" => self.variational_mean = value.to_string(),
                other => {
                    return Err(format!(
                        "variational_mean must be `z_alpha` or `free`, got `{other}`"
                    ))
                }
            },
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_epsilon" => self.adam_epsilon = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "b_train" => self.b_train = parse(key, value)?,
            "b_eval" => self.b_eval = parse(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "n_patients" => self.n_patients = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "n_locations" => self.n_locations = parse(key, value)?,
            "location_features" => self.location_features = parse(key, value)?,
            "positive_rate" => self.positive_rate = parse(key, value)?,
            "zip_buckets" => self.zip_buckets = parse(key, value)?,
            "gen_min_codes" => self.gen_min_codes = parse(key, value)?,
            "gen_max_codes" => self.gen_max_codes = parse(key, value)?,
            "signal_risk_weight" => self.signal_risk_weight = parse(key, value)?,
            "signal_location_weight" => self.signal_location_weight = parse(key, value)?,
            "signal_age_weight" => self.signal_age_weight = parse(key, value)?,
            "signal_noise_std" => self.signal_noise_std = parse(key, value)?,
            "label_noise_rate" => self.label_noise_rate = parse(key, value)?,
            "n_risk_tokens" => self.n_risk_tokens = parse(key, value)?,
            "risk_token_rate" => self.risk_token_rate = parse(key, value)?,
            "split_train" => self.split_train = parse(key, value)?,
            "split_val" => self.split_val = parse(key, value)?,
            "split_test" => self.split_test = parse(key, value)?,
            "use_demographics" => self.use_demographics = parse(key, value)?,
            "use_location" => self.use_location = parse(key, value)?,
            "filter_fractions" => {
                self.filter_fractions = value
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| format!("invalid fraction list `{value}`"))?;
            }
            "export_samples" => self.export_samples = parse(key, value)?,
            unknown => return Err(format!("unknown configuration key `{unknown}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.code_embed_dim == 0 || self.code_embed_dim % self.n_heads != 0 {
            return bad(format!(
                "code_embed_dim {} must be a positive multiple of n_heads {}",
                self.code_embed_dim, self.n_heads
            ));
        }
        if self.batch_size == 0 || self.patience == 0 || self.b_train == 0 || self.b_eval < 2 {
            return bad("batch_size, patience, b_train must be >= 1 and b_eval >= 2".into());
        }
        if self.learning_rate <= 0.0 {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if (self.split_train + self.split_val + self.split_test - 1.0).abs() > 1e-9 {
            return bad("split ratios must sum to 1".into());
        }
        if self
            .filter_fractions
            .iter()
            .any(|&q| !(0.0..1.0).contains(&q))
        {
            return bad("filter_fractions must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// The full key-value set in deterministic order.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("adam_beta1", self.adam_beta1.to_string());
        kv("adam_beta2", self.adam_beta2.to_string());
        kv("adam_epsilon", self.adam_epsilon.to_string());
        kv("b_eval", self.b_eval.to_string());
        kv("b_train", self.b_train.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("code_embed_dim", self.code_embed_dim.to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv("ehr_embed_dim", self.ehr_embed_dim.to_string());
        kv("export_samples", self.export_samples.to_string());
        kv("feedforward_dim", self.feedforward_dim.to_string());
        kv(
            "filter_fractions",
            self.filter_fractions
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("fused_dim", self.fused_dim.to_string());
        kv("gen_max_codes", self.gen_max_codes.to_string());
        kv("gen_min_codes", self.gen_min_codes.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("inducing_points", self.inducing_points.to_string());
        kv("label_noise_rate", self.label_noise_rate.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("location_features", self.location_features.to_string());
        kv("max_epochs", self.max_epochs.to_string());
        kv("max_len", self.max_len.to_string());
        kv("n_blocks", self.n_blocks.to_string());
        kv("n_heads", self.n_heads.to_string());
        kv("n_locations", self.n_locations.to_string());
        kv("n_patients", self.n_patients.to_string());
        kv("n_risk_tokens", self.n_risk_tokens.to_string());
        kv("patience", self.patience.to_string());
        kv("positive_rate", self.positive_rate.to_string());
        kv("pretrain_epochs", self.pretrain_epochs.to_string());
        kv("risk_token_rate", self.risk_token_rate.to_string());
        kv("seed", self.seed.to_string());
        kv("signal_age_weight", self.signal_age_weight.to_string());
        kv(
            "signal_location_weight",
            self.signal_location_weight.to_string(),
        );
        kv("signal_noise_std", self.signal_noise_std.to_string());
        kv("signal_risk_weight", self.signal_risk_weight.to_string());
        kv("split_test", self.split_test.to_string());
        kv("split_train", self.split_train.to_string());
        kv("split_val", self.split_val.to_string());
        kv("tabular_embed_dim", self.tabular_embed_dim.to_string());
        kv("tabular_hidden_dim", self.tabular_hidden_dim.to_string());
        kv("use_demographics", self.use_demographics.to_string());
        kv("use_location", self.use_location.to_string());
        kv("variational_mean", self.variational_mean.clone());
        kv("vocab_size", self.vocab_size.to_string());
        kv("zip_buckets", self.zip_buckets.to_string());
        out
    }
}
