use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;
use std::hint::black_box;
use visionaid::autograd::kernels::{col2im, im2col, Window};
use visionaid::config::ExperimentConfig;
use visionaid::data::synthetic_two_mode;
use visionaid::heads::HeadParams;
use visionaid::metrics::{fid, fit_gaussian};
use visionaid::model_bank::surrogates;
use visionaid::nn::Adam;
use visionaid::selection::ProbeResult;
use visionaid::training::{train_step, EnsembleState, StepSettings, VisionDisc};

fn conv(c: &mut Criterion) {
    // first discriminator block at 32x32, batch 8
    let g = Window { batch: 8, channels: 8, height: 32, width: 32, kernel: 3, stride: 1, pad: 1 };
    let img: Vec<f64> = (0..8 * 8 * 32 * 32).map(|i| (i as f64 * 0.37).sin()).collect();
    let cols = im2col(&img, &g);
    c.bench_function("im2col 8x8x32x32 k3", |b| b.iter(|| im2col(black_box(&img), &g)));
    c.bench_function("col2im 8x8x32x32 k3", |b| b.iter(|| col2im(black_box(&cols), &g)));
}

fn features(n: usize, d: usize, phase: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |(i, j)| ((i * d + j) as f64 * 0.61 + phase).sin() + 0.1 * j as f64)
}

fn metrics(c: &mut Criterion) {
    let a = fit_gaussian(&features(2000, 64, 0.0)).unwrap();
    let b = fit_gaussian(&features(2000, 64, 1.3)).unwrap();
    c.bench_function("fid d=64", |bch| bch.iter(|| fid(black_box(&a), black_box(&b)).unwrap()));
    let x = features(2000, 64, 0.0);
    c.bench_function("fit_gaussian 2000x64", |bch| bch.iter(|| fit_gaussian(black_box(&x)).unwrap()));
}

fn step(c: &mut Criterion) {
    let mut cfg = ExperimentConfig::with_data("unused");
    cfg.generator.latent_dim = 32;
    cfg.generator.base_channels = 32;
    cfg.discriminator.base_channels = 8;
    cfg.bank.head_width = Some(32);
    cfg.optimizer.batch_size = 8;
    let bank = surrogates::desk_bank(cfg.bank.desk_seed).unwrap();
    let data = synthetic_two_mode(256, 32, 7);
    let settings = StepSettings::from_config(&cfg);

    for heads in [&[][..], &["pix_pool", "edges16"][..]] {
        let mut state = EnsembleState::new(&cfg, cfg.schedule(data.len()), Vec::new()).unwrap();
        for id in heads {
            let head = HeadParams::build(&bank.get(id).unwrap().spec, &cfg.bank.head_config(), cfg.run.seed).unwrap();
            state.vision.push(VisionDisc {
                adam: Adam::new(cfg.optimizer.adam(), &head.params),
                aug: cfg.augmentation.heads.policy(id),
                model_id: id.to_string(),
                head,
                smoothing: 0.0,
                added_at: 0,
                probe_at_selection: ProbeResult {
                    model_id: id.to_string(),
                    train_accuracy: 1.0,
                    val_accuracy: 1.0,
                    val_objective: 0.0,
                    runs: 1,
                    val_accuracy_std: 0.0,
                },
            });
        }
        let mut group = c.benchmark_group("train_step");
        group.sample_size(20);
        group.bench_function(format!("K={}", heads.len()), |b| {
            b.iter(|| train_step(&mut state, &bank, &data, &settings).unwrap())
        });
        group.finish();
    }
}

criterion_group!(benches, conv, metrics, step);
criterion_main!(benches);
