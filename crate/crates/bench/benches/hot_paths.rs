//! Criterion benchmarks for the compute-heavy inner loops: MoE dispatch,
//! attention forward/backward, mel extraction, pitch tracking, and one
//! teacher-forced decoder pass.

use criterion::{criterion_group, criterion_main, Criterion};

use g2sk_core::dataio::{gen_synthetic_corpus, mel_spectrogram, MelConfig};
use g2sk_core::decoder::{Decoder, DecoderConfig, DecoderTargets};
use g2sk_core::moe::{MoEConfig, MoELayer};
use g2sk_core::{AttentionBlock, DTensor, ParamStore, Rng, Tape};

fn bench_moe_forward(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let mut ps = ParamStore::new();
    let cfg = MoEConfig {
        num_experts: 8,
        top_k: 2,
        expert_layers: 2,
        hidden_dim: 64,
        capacity_factor: 2.0,
        fallback_prob: 0.0,
        lb_weight: 0.01,
    };
    let moe = MoELayer::new("moe", 32, cfg, &mut ps, &mut rng).unwrap();
    let x = DTensor::randn(&[64, 32], 1.0, &mut rng);
    let r = Rng::new(2);
    c.bench_function("moe_forward_64x32", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let (y, _, aux) = moe
                .forward(&tape, &ps, tape.leaf(x.clone()), &r, false)
                .unwrap();
            std::hint::black_box((y.value(), aux.item()));
        })
    });
}

fn bench_attention_backward(c: &mut Criterion) {
    let mut rng = Rng::new(3);
    let mut ps = ParamStore::new();
    let block = AttentionBlock::new("attn", 32, 4, &mut ps, &mut rng).unwrap();
    let x = DTensor::randn(&[64, 32], 1.0, &mut rng);
    c.bench_function("attention_fwd_bwd_64x32", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let y = block.forward(&tape, &ps, xv, xv, None).unwrap().sum();
            let grads = tape.backward(y).unwrap();
            std::hint::black_box(grads.wrt(&tape, xv));
        })
    });
}

fn bench_mel_spectrogram(c: &mut Criterion) {
    let corpus = gen_synthetic_corpus(1, 0.0, &Rng::new(4));
    let clip = &corpus[0].audio;
    let cfg = MelConfig::default();
    c.bench_function("mel_spectrogram_clip", |b| {
        b.iter(|| std::hint::black_box(mel_spectrogram(clip, &cfg).unwrap()))
    });
}

fn bench_pitch(c: &mut Criterion) {
    let corpus = gen_synthetic_corpus(1, 0.0, &Rng::new(5));
    let clip = &corpus[0].audio;
    c.bench_function("pitch_extract_clip", |b| {
        b.iter(|| {
            std::hint::black_box(
                g2sk_core::alignment::extract_pitch(clip, 0.04, 256.0 / 22050.0).unwrap(),
            )
        })
    });
}

fn bench_decoder_teacher_forced(c: &mut Criterion) {
    let mut rng = Rng::new(6);
    let mut ps = ParamStore::new();
    let cfg = DecoderConfig {
        layers: 2,
        width: 32,
        heads: 4,
        max_steps: 32,
        mel_dim: 80,
        vocab_size: 95,
        stop_threshold: 0.5,
        temperature: 0.7,
        cond_drop_prob: 0.0,
        frame_hop: 8.0 * 256.0 / 22050.0,
    };
    let dec = Decoder::new("dec", cfg, &mut ps, &mut rng).unwrap();
    let s = 24;
    let targets = DecoderTargets {
        tokens: (0..s).map(|i| i % 95).collect(),
        mel: DTensor::randn(&[s, 80], 1.0, &mut rng),
        t_target: 2.0,
    };
    let e_text = DTensor::randn(&[s, 32], 0.5, &mut rng);
    let g = DTensor::randn(&[40, 32], 1.0, &mut rng);
    let z = DTensor::randn(&[9, 32], 1.0, &mut rng);
    c.bench_function("decoder_teacher_forced_24", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let losses = dec
                .teacher_forced_masked(
                    &tape,
                    &ps,
                    tape.leaf(e_text.clone()),
                    tape.leaf(g.clone()),
                    tape.leaf(z.clone()),
                    &targets,
                    false,
                )
                .unwrap();
            let total = losses.l_text.add(losses.l_mel).unwrap();
            std::hint::black_box(tape.backward(total).unwrap());
        })
    });
}

criterion_group!(
    hot_paths,
    bench_moe_forward,
    bench_attention_backward,
    bench_mel_spectrogram,
    bench_pitch,
    bench_decoder_teacher_forced
);
criterion_main!(hot_paths);
