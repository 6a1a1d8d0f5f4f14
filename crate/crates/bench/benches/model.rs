use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use faegen_core::corpus::encode_dataset;
use faegen_core::decoder::{beam_generate, greedy_generate};
use faegen_core::model::{init_params, sample_loss_and_grads, FaeGenConfig, FaeGenParams, Variant};
use faegen_core::synth::{synth_generate, SynthConfig};
use faegen_core::vocab::Vocabulary;

fn setup(variant: Variant) -> (FaeGenConfig, FaeGenParams, Vec<faegen_core::corpus::TrainingExample>) {
    let (train, _) = synth_generate(&SynthConfig { num_train: 8, num_test: 1, seed: 1, ..SynthConfig::default() }).unwrap();
    let vocab = Vocabulary::build(train.report_texts(), 1);
    let topics = train.topics();
    let mut config = FaeGenConfig::new(train.feature_dim().unwrap(), topics.len(), vocab.len()).with_variant(variant);
    config.hidden_dim = 64;
    let params = init_params(&config, 0).unwrap();
    let examples = encode_dataset(&train, &vocab, &topics).unwrap();
    (config, params, examples)
}

fn training_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("loss_and_grads");
    for v in Variant::ALL {
        let (config, params, examples) = setup(v);
        let mut grads = FaeGenParams::zeros(&config);
        group.bench_function(v.name(), |b| {
            b.iter(|| {
                grads.fill(0.0);
                black_box(sample_loss_and_grads(&params, &config, &examples[0], &mut grads).unwrap())
            })
        });
    }
    group.finish();
}

fn decoding(c: &mut Criterion) {
    let (config, params, examples) = setup(Variant::Fae);
    let obs = &examples[0].observations;
    c.bench_function("greedy", |b| b.iter(|| black_box(greedy_generate(&params, &config, obs, 0, 30).unwrap())));
    c.bench_function("beam3", |b| b.iter(|| black_box(beam_generate(&params, &config, obs, 0, 3, 30, true).unwrap())));
}

criterion_group!(benches, training_step, decoding);
criterion_main!(benches);
