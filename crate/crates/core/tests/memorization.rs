//! Smoke test: a tiny model memorises a small corpus.

use mbt_core::model::loss_and_grad;
use mbt_core::training::encode_pair;
use mbt_core::{
    adam_step, bpe_train, generate_cipher_task, AdamState, CipherTaskConfig, LanguageId, ModelConfig, ModelParams,
    TrainConfig,
};

#[test]
fn tiny_model_memorises_fifty_sentences() {
    let a = LanguageId::new("xa").unwrap();
    let b = LanguageId::new("xb").unwrap();
    let mut cfg = CipherTaskConfig::minimal(a.clone(), b.clone());
    cfg.parallel_sizes.insert((a, b), 50);
    cfg.dev_size = 1;
    cfg.devtest_size = 1;
    cfg.seed = 11;
    let task = generate_cipher_task(&cfg).unwrap();
    let pairs = task.parallel[0].pairs();
    let lines: Vec<String> = pairs.iter().flat_map(|p| [p.src.clone(), p.tgt.clone()]).collect();
    let vocab = bpe_train([lines.iter()], 120, task.languages()).unwrap();
    let config = ModelConfig {
        dropout_rate: 0.0,
        layer_drop_rate: 0.0,
        ..ModelConfig::preset("tiny", vocab.len()).unwrap()
    };
    let batch: Vec<_> = pairs.iter().map(|p| encode_pair(&vocab, p, 64).unwrap().unwrap()).collect();
    let train = TrainConfig {
        peak_lr: 3e-3,
        warmup_steps: 30,
        label_smoothing: 0.0,
        ..TrainConfig::default()
    };
    let mut params = ModelParams::<f32>::init(&config, 4).unwrap();
    let mut opt = AdamState::new(&params);
    let (initial, _) = loss_and_grad(&params, &config, &batch, 0.0, 0).unwrap();
    let mut loss = initial;
    for step in 0..300 {
        let (l, grads) = loss_and_grad(&params, &config, &batch, 0.0, step).unwrap();
        adam_step(&mut params, &grads, &mut opt, &train).unwrap();
        loss = l;
    }
    assert!(loss < 0.2 * initial, "loss {loss} vs initial {initial}");
}
