use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use mbt_core::model::loss_and_grad;
use mbt_core::training::toy_examples;
use mbt_core::{
    adam_step, bpe_encode, bpe_train, generate_cipher_task, spbleu, AdamState, CipherTaskConfig, LanguageId,
    ModelConfig, ModelParams, NmtSystem, StopRule, TrainConfig,
};

fn task() -> mbt_core::CipherTask {
    let a = LanguageId::new("xa").unwrap();
    let b = LanguageId::new("xb").unwrap();
    let mut cfg = CipherTaskConfig::minimal(a.clone(), b.clone());
    cfg.parallel_sizes.insert((a, b), 500);
    cfg.dev_size = 50;
    cfg.devtest_size = 1;
    cfg.seed = 3;
    generate_cipher_task(&cfg).unwrap()
}

fn bench_tokenizer(c: &mut Criterion) {
    let t = task();
    let lines: Vec<String> = t.parallel[0].pairs().iter().flat_map(|p| [p.src.clone(), p.tgt.clone()]).collect();
    c.bench_function("bpe_train 300", |b| {
        b.iter(|| bpe_train([lines.iter()], black_box(300), t.languages()).unwrap())
    });
    let vocab = bpe_train([lines.iter()], 300, t.languages()).unwrap();
    c.bench_function("bpe_encode 1000 sentences", |b| {
        b.iter(|| lines.iter().map(|l| bpe_encode(&vocab, black_box(l)).len()).sum::<usize>())
    });
}

fn bench_training(c: &mut Criterion) {
    let config = ModelConfig::preset("tiny", 300).unwrap();
    let mut params = ModelParams::<f32>::init(&config, 1).unwrap();
    let batch = toy_examples(60, 300, 2);
    let cfg = TrainConfig::default();
    let mut opt = AdamState::new(&params);
    c.bench_function("train step tiny (60 examples)", |b| {
        b.iter(|| {
            let (_, grads) = loss_and_grad(&params, &config, black_box(&batch), 0.1, 7).unwrap();
            adam_step(&mut params, &grads, &mut opt, &cfg).unwrap();
        })
    });
}

fn bench_decoding(c: &mut Criterion) {
    let t = task();
    let lines: Vec<String> = t.parallel[0].pairs().iter().flat_map(|p| [p.src.clone(), p.tgt.clone()]).collect();
    let vocab = bpe_train([lines.iter()], 300, t.languages()).unwrap();
    let config = ModelConfig::preset("tiny", vocab.len()).unwrap();
    let params = ModelParams::<f32>::init(&config, 1).unwrap();
    let system = NmtSystem::new(&config, &params, &vocab, StopRule::default()).unwrap();
    let src = system.encode_source(&t.parallel[0].pairs()[0].src);
    let tgt = &t.languages()[1];
    c.bench_function("beam search width 5", |b| b.iter(|| system.beam_search(black_box(&src), 5, tgt).unwrap()));
}

fn bench_bleu(c: &mut Criterion) {
    let t = task();
    let lines: Vec<String> = t.parallel[0].pairs().iter().flat_map(|p| [p.src.clone(), p.tgt.clone()]).collect();
    let vocab = bpe_train([lines.iter()], 300, t.languages()).unwrap();
    let refs: Vec<String> = t.parallel[0].pairs().iter().map(|p| p.tgt.clone()).collect();
    let hyps: Vec<String> = refs.iter().rev().cloned().collect();
    c.bench_function("spbleu 500 sentences", |b| b.iter(|| spbleu(black_box(&hyps), &refs, &vocab).unwrap()));
}

criterion_group!(benches, bench_tokenizer, bench_training, bench_decoding, bench_bleu);
criterion_main!(benches);
