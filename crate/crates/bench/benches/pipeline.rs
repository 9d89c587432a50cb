use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use tiedrank::embedding::{batch_iter, generate_synthetic, logmel_spectrogram, LogMelConfig, SynthConfig};
use tiedrank::eval::evaluate;
use tiedrank::loss::{combined_loss, LossConfig, Negatives};
use tiedrank::model::{ModelConfig, Pass, TiedRetrievalModel};
use tiedrank::Tape;

fn forward_backward(c: &mut Criterion) {
    let ds = generate_synthetic(&SynthConfig::default()).unwrap();
    let batch = batch_iter(&ds, 32, 0, 0).unwrap().next().unwrap();
    let audio: Vec<_> = batch.audio.iter().map(|&i| &ds.audio()[i]).collect();
    let caps: Vec<_> = batch.captions.iter().map(|&i| &ds.captions()[i]).collect();
    for preset in ["2L32T", "2L192T", "2L192L"] {
        let cfg = ModelConfig::preset(preset, ds.d_audio(), ds.d_text()).unwrap();
        let model = TiedRetrievalModel::<f32>::init(cfg, 0).unwrap();
        c.bench_function(&format!("forward_backward_b32_{preset}"), |b| {
            b.iter(|| {
                let mut m = model.clone();
                let mut tape = Tape::new();
                let out = m.forward_batch(&mut tape, &audio, &caps, &mut Pass::default()).unwrap();
                let l = combined_loss(&mut tape, &out, &LossConfig::default(), &Negatives::All).unwrap();
                tape.backward_into(l.total, m.params_mut()).unwrap();
                black_box(m)
            })
        });
    }
}

fn logmel(c: &mut Criterion) {
    let cfg = LogMelConfig::default();
    let pcm: Vec<f64> = (0..10 * 44_100).map(|i| (i as f64 * 0.0713).sin()).collect();
    c.bench_function("logmel_10s", |b| b.iter(|| black_box(logmel_spectrogram(&pcm, &cfg).unwrap())));
}

fn retrieval(c: &mut Criterion) {
    let ds = generate_synthetic(&SynthConfig {
        n_audio: 200,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = ModelConfig::preset("2L32T", ds.d_audio(), ds.d_text()).unwrap();
    let model = TiedRetrievalModel::<f32>::init(cfg, 0).unwrap();
    c.bench_function("evaluate_200_audio_1000_queries", |b| b.iter(|| black_box(evaluate(&model, &ds).unwrap())));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = forward_backward, logmel, retrieval
}
criterion_main!(benches);
