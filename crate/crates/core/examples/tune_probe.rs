use riskgp::data::{self, SignalSpec, Split, SynthConfig};
use riskgp::embeddings::{pretrain, PretrainConfig};
use riskgp::metrics;
use riskgp::model::{ModelConfig, RiskModel};
use riskgp::train::{fit, TrainConfig};

fn main() {
    let seed = 1u64;
    let config = SynthConfig {
        n_patients: 1562,
        vocab_size: 500,
        n_locations: 40,
        n_location_features: 34,
        positive_rate: 0.3,
        min_codes: 6,
        max_codes: 24,
        max_len: 24,
        zip_buckets: 64,
        signal: SignalSpec {
            risk_token_weight: 0.6,
            location_weight: 1.5,
            age_weight: 0.8,
            noise_std: 0.3,
            label_noise_rate: 0.0,
            n_risk_tokens: 25,
            risk_token_rate: 0.5,
        },
    };
    let synth = data::generate_synthetic::<f64>(&config, seed).unwrap();
    let cohort = data::split(&synth.cohort, [0.64, 0.16, 0.20], seed).unwrap();
    let mc = ModelConfig {
        vocab_size: cohort.vocab_size,
        max_len: 24,
        n_blocks: 2,
        n_heads: 4,
        model_dim: 32,
        feedforward_dim: 64,
        ehr_dim: 32,
        demo_input_dim: cohort.demo_dim(),
        loc_input_dim: cohort.loc_dim(),
        tabular_hidden_dim: 16,
        tabular_embed_dim: 2,
        fused_dim: 16,
        inducing_count: 32,
        use_demographics: true,
        use_location: true,
        free_mean: false,
    };
    let mut model = RiskModel::<f64>::init(mc, seed).unwrap();
    let train_idx = cohort.split_indices(Split::Train);
    let val_idx = cohort.split_indices(Split::Val);
    let t0 = std::time::Instant::now();
    let outcome = pretrain(
        &mut model,
        &cohort,
        &train_idx,
        &PretrainConfig {
            epochs: 15,
            batch_size: 64,
            learning_rate: 2e-3,
            seed,
            ..PretrainConfig::default()
        },
    )
    .unwrap();
    println!("pretrain losses: {:?}", outcome.epoch_losses.iter().map(|l| (l * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    println!("pretrain took {:.1}s", t0.elapsed().as_secs_f64());
    // head metrics on val
    let probs = model.head_probabilities(&cohort, &val_idx).unwrap();
    let labels: Vec<u8> = val_idx.iter().map(|&i| cohort.sequences[i].label).collect();
    let hard: Vec<u8> = probs.iter().map(|&p| u8::from(p >= 0.5)).collect();
    let eval = metrics::evaluate_all(&labels, &hard, &probs).unwrap();
    println!("head on val: f1={:.3} kappa={:.3} prauc={:.3}", eval.f1, eval.kappa, eval.pr_auc);

    // SVI stage
    let t1 = std::time::Instant::now();
    let cfg = TrainConfig {
        batch_size: 64,
        learning_rate: 2e-3,
        max_epochs: 20,
        patience: 100,
        b_train: 8,
        b_eval: 128,
        pretrain_epochs: 0, // already pre-trained above
        seed,
        ..TrainConfig::default()
    };
    let report = fit(&mut model, &cohort, &cfg).unwrap();
    for e in report.epochs.iter() {
        println!("epoch {}: elbo={:.1} f1={:.3} kappa={:.3} prauc={:.3}", e.epoch, e.elbo, e.val_f1, e.val_kappa, e.val_prauc);
    }
    println!("svi took {:.1}s", t1.elapsed().as_secs_f64());
    let state = model.variational_state().unwrap();
    println!("sigma2={:.4} |alpha|={:?}", state.sigma2(), match &state.mean { riskgp::svgp::VariationalMean::ZAlpha(a) => a.data().iter().map(|v| (v*100.0).round()/100.0).collect::<Vec<_>>(), _ => vec![] });
    let ls = model.lengthscales().unwrap();
    println!("lengthscales: {:?}", ls.values().iter().map(|v| (v*100.0).round()/100.0).collect::<Vec<_>>());
}
