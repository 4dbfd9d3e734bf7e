//! Acceptance checks. Each test prints one `criterion N: PASS|FAIL` line to
//! stderr (bypassing the test harness capture) and then asserts.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use visionaid::augmentation::{augment, AugMode, AugOp, AugPolicy};
use visionaid::autograd::{gradcheck, Tape, Tensor, Var};
use visionaid::backbone::{Discriminator, Generator};
use visionaid::config::{parse_config, ExperimentConfig};
use visionaid::data::{synthetic_two_mode, Dataset};
use visionaid::heads::HeadParams;
use visionaid::metrics::{fid, kid_subsets, mmd2_unbiased, precision_recall, GaussianStats};
use visionaid::model_bank::{surrogates, ExtractorArch, FeatureExtractorSpec, HeadKind, ModelBank, Normalization};
use visionaid::nn::Adam;
use visionaid::rng;
use visionaid::selection::{k_fixed_select, linear_probe, rank_models, ProbeConfig, ProbeResult};
use visionaid::training::run::{self, read_jsonl, Event, RunOptions};
use visionaid::training::{
    aug_rng, gan_loss, head_term, latent, r1_gradient, train_step, vision_aided_loss, EnsembleState, Side,
    StepSettings, VisionDisc, ORIGINAL,
};

fn report(id: &str, pass: bool, detail: impl AsRef<str>) {
    let line = format!("criterion {id}: {} | {}\n", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {id} failed: {}", detail.as_ref());
}

fn normal(r: &mut impl Rng, shape: &[usize], sd: f64) -> Tensor {
    Tensor::from_shape_simple_fn(IxDyn(shape), || sd * r.sample::<f64, _>(StandardNormal))
}

fn uniform(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_shape_simple_fn(IxDyn(shape), || r.random_range(-1.0..1.0))
}

/// Desk-scale config at 32x32 with small networks.
fn desk_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::with_data("unused");
    cfg.generator.latent_dim = 32;
    cfg.generator.base_channels = 32;
    cfg.discriminator.base_channels = 8;
    cfg.bank.head_width = Some(32);
    cfg.optimizer.batch_size = 8;
    cfg
}

fn stub_probe(id: &str) -> ProbeResult {
    ProbeResult {
        model_id: id.into(),
        train_accuracy: 1.0,
        val_accuracy: 1.0,
        val_objective: 0.0,
        runs: 1,
        val_accuracy_std: 0.0,
    }
}

/// Attach heads for `ids` directly, bypassing selection.
fn attach(state: &mut EnsembleState, cfg: &ExperimentConfig, bank: &ModelBank, ids: &[&str]) {
    for id in ids {
        let head = HeadParams::build(&bank.get(id).unwrap().spec, &cfg.bank.head_config(), cfg.run.seed).unwrap();
        state.vision.push(VisionDisc {
            adam: Adam::new(cfg.optimizer.adam(), &head.params),
            aug: cfg.augmentation.heads.policy(id),
            model_id: id.to_string(),
            head,
            smoothing: 0.0,
            added_at: state.step,
            probe_at_selection: stub_probe(id),
        });
    }
}

#[test]
fn criterion_01_frozen_backbone() {
    let start = Instant::now();
    let cfg = desk_config();
    let bank = surrogates::desk_bank(cfg.bank.desk_seed).unwrap();
    let data = synthetic_two_mode(256, 32, 7);
    let heads = ["pix_pool", "edges16", "color_stats"];
    let mut state = EnsembleState::new(&cfg, cfg.schedule(data.len()), Vec::new()).unwrap();
    attach(&mut state, &cfg, &bank, &heads);
    let before_bank = bank.checksums();
    let before_heads: Vec<Vec<Tensor>> =
        state.vision.iter().map(|v| v.head.params.iter().map(|(_, t)| t.clone()).collect()).collect();
    let calls_before: Vec<u64> = heads.iter().map(|h| bank.get(h).unwrap().extraction_count()).collect();
    let settings = StepSettings::from_config(&cfg);
    for _ in 0..1000 {
        train_step(&mut state, &bank, &data, &settings).unwrap();
    }
    let frozen = bank.checksums() == before_bank;
    let used = heads.iter().zip(&calls_before).all(|(h, &c)| bank.get(h).unwrap().extraction_count() > c);
    let (mut blocks, mut changed_blocks, mut scalars, mut unchanged_scalars) = (0, 0, 0, 0);
    for (v, before) in state.vision.iter().zip(&before_heads) {
        for ((_, now), was) in v.head.params.iter().zip(before) {
            blocks += 1;
            changed_blocks += usize::from(now != was);
            scalars += now.len();
            unchanged_scalars += now.iter().zip(was.iter()).filter(|(a, b)| a == b).count();
        }
    }
    let elapsed = start.elapsed();
    report(
        "1",
        frozen && used && changed_blocks == blocks && unchanged_scalars == 0 && elapsed < Duration::from_secs(120),
        format!(
            "extractor checksums unchanged={frozen}, extractors used={used}, head blocks changed {changed_blocks}/{blocks}, \
             unchanged head scalars {unchanged_scalars}/{scalars}, {:.1}s (limit 120s)",
            elapsed.as_secs_f64()
        ),
    );
}

/// One step of a plain GAN loop with no vision-aided heads, written out
/// directly from the primitives and the documented stream names.
#[allow(clippy::too_many_arguments)]
fn plain_gan_step(
    g: &mut Generator,
    g_adam: &mut Adam,
    d: &mut Discriminator,
    d_adam: &mut Adam,
    aug: &mut AugPolicy,
    signs: &mut Vec<f64>,
    data: &Dataset,
    step: u64,
    s: &StepSettings,
) {
    let seed = s.seed;
    let dim = g.config.latent_dim;
    let real = data.sample_batch(s.batch_size, &mut rng::stream(seed, &format!("data@{step}")));
    let fake = g.sample(&latent(seed, &format!("z:d@{step}"), s.batch_size, dim));
    let mut d_grads = {
        let tape = Tape::new();
        let p = d.params.bind(&tape, true);
        let fa =
            augment(tape.constant(fake), aug, &mut aug_rng(seed, step, ORIGINAL, Side::Discriminator, "fake")).unwrap();
        let fl = d.forward(&p, fa);
        let ra =
            augment(tape.constant(real.clone()), aug, &mut aug_rng(seed, step, ORIGINAL, Side::Discriminator, "real"))
                .unwrap();
        let rl = d.forward(&p, ra);
        signs.extend(rl.value().iter().copied());
        let loss = gan_loss(Some(rl), fl, Side::Discriminator, 0.0).unwrap();
        p.grads(&tape.backward(loss))
    };
    if step.is_multiple_of(s.r1_interval) {
        let x = {
            let tape = Tape::new();
            let v = augment(tape.constant(real), aug, &mut aug_rng(seed, step, ORIGINAL, Side::Discriminator, "real"))
                .unwrap()
                .value()
                .clone();
            v
        };
        let dd = &*d;
        let (_, r1) = r1_gradient(&x, s.r1_gamma, s.r1_interval as f64, |tape, xv, trainable| {
            let p = dd.params.bind(tape, trainable);
            Ok((dd.forward(&p, xv).sum(), p))
        })
        .unwrap();
        for (a, b) in d_grads.iter_mut().zip(r1) {
            *a += &b;
        }
    }
    d_adam.update(&mut d.params, &d_grads);
    if (step + 1).is_multiple_of(s.adapt_interval) {
        aug.adapt(&std::mem::take(signs)).unwrap();
    }
    let tape = Tape::new();
    let gp = g.params.bind(&tape, true);
    let x = g.forward(&gp, tape.constant(latent(seed, &format!("z:g@{step}"), s.batch_size, dim)));
    let p = d.params.bind(&tape, false);
    let fa = augment(x, aug, &mut aug_rng(seed, step, ORIGINAL, Side::Generator, "fake")).unwrap();
    let loss = gan_loss(None, d.forward(&p, fa), Side::Generator, 0.0).unwrap();
    let grads = gp.grads(&tape.backward(loss));
    g_adam.update(&mut g.params, &grads);
}

fn same_bits(a: &visionaid::nn::ParamStore, b: &visionaid::nn::ParamStore) -> bool {
    a.iter().zip(b.iter()).all(|((_, x), (_, y))| x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()))
}

#[test]
fn criterion_02_zero_heads_is_plain_gan() {
    let start = Instant::now();
    let mut cfg = desk_config();
    cfg.selection.k_max = 0;
    cfg.run.seed = 11;
    let bank = surrogates::desk_bank(0).unwrap();
    let data = synthetic_two_mode(128, 32, 3);
    let settings = StepSettings::from_config(&cfg);
    let mut state = EnsembleState::new(&cfg, cfg.schedule(data.len()), Vec::new()).unwrap();
    let mut g = Generator::new(cfg.generator, 32, 3, cfg.run.seed).unwrap();
    let mut d = Discriminator::new(cfg.discriminator, 32, 3, cfg.run.seed).unwrap();
    let mut g_adam = Adam::new(cfg.optimizer.adam(), &g.params);
    let mut d_adam = Adam::new(cfg.optimizer.adam(), &d.params);
    let mut aug = cfg.augmentation.original.policy(ORIGINAL);
    let mut signs = Vec::new();
    let mut first_mismatch = None;
    let mut max_p: f64 = 0.0;
    for step in 0..200 {
        train_step(&mut state, &bank, &data, &settings).unwrap();
        plain_gan_step(&mut g, &mut g_adam, &mut d, &mut d_adam, &mut aug, &mut signs, &data, step, &settings);
        max_p = max_p.max(aug.current_p);
        if first_mismatch.is_none()
            && !(same_bits(&state.generator.params, &g.params)
                && same_bits(&state.discriminator.params, &d.params)
                && state.d_aug.current_p.to_bits() == aug.current_p.to_bits())
        {
            first_mismatch = Some(step);
        }
    }
    let elapsed = start.elapsed();
    report(
        "2",
        first_mismatch.is_none() && elapsed < Duration::from_secs(60),
        format!(
            "200 steps, first differing step {:?}, R1 applied every {} steps, max augmentation p {max_p:.2}, {:.1}s (limit 60s)",
            first_mismatch,
            settings.r1_interval,
            elapsed.as_secs_f64()
        ),
    );
}

fn real_in<'t>(tape: &'t Tape, side: Side, real: &Tensor) -> Option<Var<'t>> {
    (side == Side::Discriminator).then(|| tape.constant(real.clone()))
}

#[test]
fn criterion_03_loss_additivity() {
    let cfg = desk_config();
    let bank = surrogates::desk_bank(0).unwrap();
    let mut full = EnsembleState::new(&cfg, cfg.schedule(100), Vec::new()).unwrap();
    attach(&mut full, &cfg, &bank, &["pix_pool", "multi_conv", "edges16"]);
    full.vision[2].smoothing = 0.1;
    let mut fewer = full.clone();
    fewer.vision.pop();
    let k = full.vision.len() - 1;
    let mut r = rng::stream(5, "additivity");
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        full.step = i;
        fewer.step = i;
        let real = uniform(&mut r, &[4, 3, 32, 32]);
        let fake = uniform(&mut r, &[4, 3, 32, 32]);
        let side = if i % 2 == 0 { Side::Discriminator } else { Side::Generator };
        let with_k = {
            let tape = Tape::new();
            let b = full.bind_discriminators(&tape, false);
            vision_aided_loss(&full, &bank, &b, real_in(&tape, side, &real), tape.constant(fake.clone()), side, 9)
                .unwrap()
                .0
                .item()
        };
        let without = {
            let tape = Tape::new();
            let b = fewer.bind_discriminators(&tape, false);
            vision_aided_loss(&fewer, &bank, &b, real_in(&tape, side, &real), tape.constant(fake.clone()), side, 9)
                .unwrap()
                .0
                .item()
        };
        let alone = {
            let tape = Tape::new();
            let b = full.bind_discriminators(&tape, false);
            head_term(&full, &bank, k, &b, real_in(&tape, side, &real), tape.constant(fake.clone()), side, 9)
                .unwrap()
                .loss
                .item()
        };
        worst = worst.max((with_k - without - alone).abs());
    }
    report("3", worst < 1e-6, format!("max |L_K - L_(K-1) - L_head| over 100 batches = {worst:.3e} (limit 1e-6)"));
}

fn crop_spec(id: &str, top: usize, left: usize) -> FeatureExtractorSpec {
    FeatureExtractorSpec {
        model_id: id.into(),
        input_resolution: 8,
        input_channels: 3,
        normalization: Normalization::symmetric(3),
        output_shapes: vec![vec![3, 2, 2]],
        tap_points: vec!["crop".into()],
        head_kind: HeadKind::SingleScale,
        arch: ExtractorArch::Crop { top, left },
    }
}

/// Real images shift the strong window by `strong` and the medium window by
/// `medium`; generated images are pure noise. The third window never differs.
fn separability_samples(seed: u64, n: usize, strong: f64, medium: f64, sd: f64) -> (Tensor, Tensor) {
    let mut r = rng::stream(seed, "separability");
    let noise = Normal::new(0.0, sd).unwrap();
    let mut make = |shifted: bool| {
        Tensor::from_shape_fn(IxDyn(&[n, 3, 8, 8]), |i| {
            let v = noise.sample(&mut r);
            let shift = match (shifted, i[2], i[3]) {
                (true, 0..=1, 0..=1) => strong,
                (true, 4..=5, 4..=5) => medium,
                _ => 0.0,
            };
            v + shift
        })
    };
    let real = make(true);
    let fake = make(false);
    (fake, real)
}

fn std_normal_cdf(x: f64) -> f64 {
    // Abramowitz-Stegun 7.1.26 on erf, accurate to 1.5e-7
    let t = 1.0 / (1.0 + 0.3275911 * x.abs() / 2f64.sqrt());
    let poly = t * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf = 1.0 - poly * (-(x * x) / 2.0).exp();
    0.5 * (1.0 + erf.copysign(x))
}

#[test]
fn criterion_04_selection_oracle() {
    let mut bank = ModelBank::new();
    for (id, top, left) in [("none", 2, 6), ("medium", 4, 4), ("strong", 0, 0)] {
        bank.register_model(crop_spec(id, top, left), vec![]).unwrap();
    }
    let (strong, medium, sd) = (0.15, 0.05, 0.2);
    // features are 12 iid Gaussian coordinates; the Bayes rule thresholds the
    // projection on the mean shift, so accuracy is Phi(|delta| / 2 sd)
    let bayes = |shift: f64| std_normal_cdf((12.0 * shift * shift).sqrt() / (2.0 * sd));
    let truth = ["strong", "medium", "none"];
    let mut correct = 0;
    let mut fixed_ok = true;
    for seed in 0..10 {
        let (fake, real) = separability_samples(seed, 500, strong, medium, sd);
        let cfg = ProbeConfig { seed, ..ProbeConfig::default() };
        let ranking = rank_models(&bank, &fake, &real, &BTreeSet::new(), &cfg).unwrap();
        let order: Vec<&str> = ranking.iter().map(|r| r.model_id.as_str()).collect();
        correct += usize::from(order == truth);
        let picked = k_fixed_select(&bank, &fake, &real, 2, &BTreeSet::new(), &cfg).unwrap();
        fixed_ok &= picked == ["strong", "medium"];
    }
    report(
        "4",
        correct >= 9 && fixed_ok,
        format!(
            "true order recovered in {correct}/10 seeds (need 9), Bayes accuracies strong {:.3} medium {:.3} none 0.500, \
             k_fixed_select(2) = [strong, medium] in every seed: {fixed_ok}",
            bayes(strong),
            bayes(medium)
        ),
    );
}

#[test]
fn criterion_05_probe_calibration() {
    let mut accs = Vec::new();
    for seed in 0..20u64 {
        let mut r = rng::stream(seed, "calibration");
        let mut draw = || Array2::from_shape_simple_fn((1000, 8), || r.sample::<f64, _>(StandardNormal));
        let (real, fake) = (draw(), draw());
        accs.push(
            linear_probe("same", &real, &fake, &ProbeConfig { seed, ..Default::default() }).unwrap().val_accuracy,
        );
    }
    let (lo, hi) = accs.iter().fold((1.0f64, 0.0f64), |(lo, hi), &a| (lo.min(a), hi.max(a)));
    let real = Array2::from_elem((200, 8), 1.0);
    let fake = Array2::from_elem((200, 8), -1.0);
    let separated = linear_probe("apart", &real, &fake, &ProbeConfig::default()).unwrap().val_accuracy;
    report(
        "5",
        lo >= 0.43 && hi <= 0.57 && separated >= 0.99,
        format!("identical distributions: val accuracy in [{lo:.3}, {hi:.3}] over 20 seeds (band [0.43, 0.57]); point masses: {separated:.3} (need >= 0.99)"),
    );
}

fn stats(mean: Vec<f64>, cov: Array2<f64>) -> GaussianStats {
    GaussianStats { mean: Array1::from(mean), covariance: cov, n: 1000 }
}

fn random_rotation(r: &mut impl Rng, d: usize) -> Array2<f64> {
    // Gram-Schmidt on a Gaussian matrix
    let mut q = Array2::<f64>::zeros((d, d));
    for j in 0..d {
        let mut v: Array1<f64> = Array1::from_shape_simple_fn(d, || r.sample(StandardNormal));
        for k in 0..j {
            let proj = v.dot(&q.column(k));
            v = &v - &(&q.column(k) * proj);
        }
        let norm = v.dot(&v).sqrt();
        q.column_mut(j).assign(&(v / norm));
    }
    q
}

#[test]
fn criterion_06_fid_oracle() {
    let eye = |d: usize, s: f64| Array2::from_diag(&Array1::from_elem(d, s));
    let mut worst_case: f64 = 0.0;
    // unit mean shift, equal covariances
    worst_case = worst_case.max(
        (fid(&stats(vec![0.0, 0.0, 0.0], eye(3, 1.0)), &stats(vec![1.0, 0.0, 0.0], eye(3, 1.0))).unwrap() - 1.0).abs(),
    );
    // 4I against I in two dimensions
    worst_case = worst_case
        .max((fid(&stats(vec![0.0; 2], eye(2, 4.0)), &stats(vec![0.0; 2], eye(2, 1.0))).unwrap() - 2.0).abs());
    // commuting covariances Q diag(a) Q^T and Q diag(b) Q^T: sum (sqrt a - sqrt b)^2
    let mut r = rng::stream(0, "fid-oracle");
    let (mut worst_self, mut worst_sym): (f64, f64) = (0.0, 0.0);
    for _ in 0..10 {
        let d = 6;
        let q = random_rotation(&mut r, d);
        let a: Vec<f64> = (0..d).map(|_| r.random_range(0.1..3.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| r.random_range(0.1..3.0)).collect();
        let ma: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let mb: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let sa = q.dot(&Array2::from_diag(&Array1::from(a.clone()))).dot(&q.t());
        let sb = q.dot(&Array2::from_diag(&Array1::from(b.clone()))).dot(&q.t());
        let closed: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
            + a.iter().zip(&b).map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2)).sum::<f64>();
        let (ga, gb) = (stats(ma, sa), stats(mb, sb));
        worst_case = worst_case.max((fid(&ga, &gb).unwrap() - closed).abs());
        worst_self = worst_self.max(fid(&ga, &ga).unwrap().abs());
        // non-commuting pair for the symmetry check
        let m = Array2::from_shape_simple_fn((d, d), || r.sample::<f64, _>(StandardNormal));
        let gc = stats(vec![0.0; d], m.dot(&m.t()) + eye(d, 0.1));
        worst_sym = worst_sym.max((fid(&ga, &gc).unwrap() - fid(&gc, &ga).unwrap()).abs());
    }
    report(
        "6",
        worst_case < 1e-6 && worst_self < 1e-8 && worst_sym < 1e-8,
        format!("max |fid - closed form| {worst_case:.2e} (limit 1e-6), max fid(a,a) {worst_self:.2e} (limit 1e-8), max asymmetry {worst_sym:.2e} (limit 1e-8)"),
    );
}

/// Direct O(n^2) U-statistic MMD^2 with the cubic polynomial kernel: pairs
/// with equal indices are skipped in all three sums.
fn mmd2_double_loop(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let d = x.ncols() as f64;
    let k = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| (a.dot(&b) / d + 1.0).powi(3);
    let (n, m) = (x.nrows(), y.nrows());
    let mut kxx = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kxx += k(x.row(i), x.row(j));
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kyy += k(y.row(i), y.row(j));
            }
        }
    }
    let mut kxy = 0.0;
    for i in 0..n {
        for j in 0..m {
            if i != j {
                kxy += k(x.row(i), y.row(j));
            }
        }
    }
    (kxx + kyy - 2.0 * kxy) / (n * (n - 1)) as f64
}

#[test]
fn criterion_07_kid_oracle() {
    let mut r = rng::stream(1, "kid-oracle");
    let mut worst: f64 = 0.0;
    for n in 2..=16 {
        let d = 1 + n % 5;
        let x = Array2::from_shape_simple_fn((n, d), || r.sample::<f64, _>(StandardNormal));
        let y = Array2::from_shape_simple_fn((n, d), || 0.5 + r.sample::<f64, _>(StandardNormal));
        worst = worst.max((mmd2_unbiased(&x, &y) - mmd2_double_loop(&x, &y)).abs());
    }
    let x = Array2::from_shape_simple_fn((50, 4), || r.sample::<f64, _>(StandardNormal));
    let identical = kid_subsets(&x, &x, 50, 1, 0).unwrap()[0];
    let a = Array2::from_shape_simple_fn((2000, 16), || r.sample::<f64, _>(StandardNormal));
    let b = Array2::from_shape_simple_fn((2000, 16), || r.sample::<f64, _>(StandardNormal));
    let est = kid_subsets(&a, &b, 100, 200, 3).unwrap();
    let mean = est.iter().sum::<f64>() / est.len() as f64;
    let sd = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (est.len() - 1) as f64).sqrt();
    let se = sd / (est.len() as f64).sqrt();
    report(
        "7",
        worst < 1e-9 && identical.abs() < 1e-9 && mean.abs() <= 3.0 * se,
        format!("max |estimator - double loop| for n=m in 2..=16: {worst:.2e} (limit 1e-9); identical sets {identical:.1e}; same-distribution mean over 200 subsets {mean:.3e}, 3 SE = {:.3e}", 3.0 * se),
    );
}

/// Manifold membership by brute force: a point is covered when it lies
/// within some reference point's distance to its k-th nearest other
/// reference point.
fn covered_fraction(reference: &Array2<f64>, queries: &Array2<f64>, k: usize) -> f64 {
    let dist = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
    };
    let radii: Vec<f64> = reference
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut ds: Vec<f64> =
                reference.rows().into_iter().enumerate().filter(|(j, _)| *j != i).map(|(_, q)| dist(p, q)).collect();
            ds.sort_by(f64::total_cmp);
            ds[k - 1]
        })
        .collect();
    let inside = queries
        .rows()
        .into_iter()
        .filter(|q| reference.rows().into_iter().zip(&radii).any(|(p, &rad)| dist(p, *q) <= rad))
        .count();
    inside as f64 / queries.nrows() as f64
}

#[test]
fn criterion_08_precision_recall_limits() {
    let mut r = rng::stream(2, "pr");
    let real = Array2::from_shape_simple_fn((100, 4), || r.sample::<f64, _>(StandardNormal));
    let same = precision_recall(&real, &real, 3).unwrap();
    let far = real.mapv(|v| v + 1e6);
    let apart = precision_recall(&real, &far, 3).unwrap();
    let mut with_outlier = real.clone();
    with_outlier.push_row(Array1::from_elem(4, 1e3).view()).unwrap();
    let outlier = precision_recall(&real, &with_outlier, 3).unwrap();
    let oracle = (covered_fraction(&real, &with_outlier, 3), covered_fraction(&with_outlier, &real, 3));
    let fake = Array2::from_shape_simple_fn((80, 4), || 0.7 + r.sample::<f64, _>(StandardNormal));
    let random = precision_recall(&real, &fake, 3).unwrap();
    let random_oracle = (covered_fraction(&real, &fake, 3), covered_fraction(&fake, &real, 3));
    report(
        "8",
        same == (1.0, 1.0) && apart == (0.0, 0.0) && outlier == oracle && outlier.0 == 100.0 / 101.0 && random == random_oracle,
        format!(
            "identical {same:?}, separated {apart:?}, outlier {outlier:?} vs oracle {oracle:?} (precision 100/101), shifted set {random:?} vs oracle {random_oracle:?}"
        ),
    );
}

#[test]
fn criterion_10_augmentation_contract() {
    let mut r = rng::stream(4, "aug-contract");
    let x = uniform(&mut r, &[3, 3, 8, 8]);
    let all = vec![AugOp::Hflip, AugOp::Translation, AugOp::Color, AugOp::Cutout];
    let run = |policy: &AugPolicy, x: &Tensor, seed: u64| {
        let tape = Tape::new();
        let v = augment(tape.constant(x.clone()), policy, &mut rng::stream(seed, "aug")).unwrap().value().clone();
        v
    };
    let mut zero = AugPolicy::adaptive("p0", 0.6, all.clone());
    zero.current_p = 0.0;
    let identity = (0..10).all(|s| run(&zero, &x, s) == x);
    let mut flip = AugPolicy::adaptive("flip", 0.6, vec![AugOp::Hflip]);
    flip.current_p = 1.0;
    let double_flip = (0..10).all(|s| run(&flip, &run(&flip, &x, s), s + 100) == x);

    let mut pol = AugPolicy::adaptive("adapt", 0.6, all.clone());
    pol.current_p = 0.5;
    let mut adapt_ok = true;
    pol.adapt(&[1.0, 1.0, -1.0, 1.0]).unwrap(); // r_t = 0.5 < 0.6
    adapt_ok &= (pol.current_p - 0.49).abs() < 1e-12;
    pol.adapt(&[1.0, 1.0, 1.0, 1.0]).unwrap(); // r_t = 1 > 0.6
    pol.adapt(&[1.0, 1.0, 1.0, 1.0]).unwrap();
    adapt_ok &= (pol.current_p - 0.51).abs() < 1e-12;
    pol.current_p = 1.0;
    pol.adapt(&[1.0]).unwrap();
    adapt_ok &= pol.current_p == 1.0;
    pol.current_p = 0.0;
    pol.adapt(&[-1.0]).unwrap();
    adapt_ok &= pol.current_p == 0.0;
    adapt_ok &= pol.mode == AugMode::Adaptive;

    let mut worst: f64 = 0.0;
    let singles = all.iter().map(|op| vec![*op]).chain(std::iter::once(all.clone()));
    for (i, ops) in singles.enumerate() {
        let mut p = AugPolicy::adaptive("grad", 0.6, ops);
        p.current_p = 1.0;
        let w = uniform(&mut r, &[2, 3, 8, 8]);
        let x = uniform(&mut r, &[2, 3, 8, 8]).mapv(|v| 0.8 * v);
        let err = gradcheck::max_rel_error(&x, 1e-5, |v: Var| {
            let y = augment(v, &p, &mut rng::stream(i as u64, "grad")).unwrap();
            y.mul(v.tape().constant(w.clone())).sum()
        });
        worst = worst.max(err);
    }
    report(
        "10",
        identity && double_flip && adapt_ok && worst < 1e-3,
        format!("p=0 identity {identity}, double flip identity {double_flip}, adapt rule and clamping {adapt_ok}, max gradient rel. error {worst:.2e} (limit 1e-3)"),
    );
}

#[test]
fn criterion_11_gradient_correctness() {
    let bank = surrogates::desk_bank(0).unwrap();
    let mut r = rng::stream(6, "grad-check");
    let mut worst_head: f64 = 0.0;
    let mut worst_pre: f64 = 0.0;
    let mut checked = (0, 0);
    for i in 0..10u64 {
        let id = ["edges16", "multi_conv", "pix_pool", "color_stats"][i as usize % 4];
        let entry = bank.get(id).unwrap();
        let head =
            HeadParams::build(&entry.spec, &visionaid::heads::HeadConfig { width: Some(8), grid: 3 }, i).unwrap();
        let shapes = entry.spec.output_shapes.clone();
        let feats: Vec<Tensor> = shapes.iter().map(|s| normal(&mut r, &[[2].as_slice(), s].concat(), 0.5)).collect();
        for (j, _) in shapes.iter().enumerate() {
            let w = normal(&mut r, &[2], 1.0);
            let err = gradcheck::max_rel_error(&feats[j], 1e-5, |v: Var| {
                let tape = v.tape();
                let p = head.bind(tape, false);
                let inputs: Vec<Var> =
                    feats.iter().enumerate().map(|(k, f)| if k == j { v } else { tape.constant(f.clone()) }).collect();
                head.forward(&p, &inputs).unwrap().reduced.mul(tape.constant(w.clone())).sum()
            });
            worst_head = worst_head.max(err);
            checked.0 += 1;
        }
        let x = uniform(&mut r, &[2, 3, 32, 32]).mapv(|v| 0.9 * v);
        let out_shape = {
            let tape = Tape::new();
            let s = entry.preprocess(tape.constant(x.clone())).unwrap().shape();
            s
        };
        let w = normal(&mut r, &out_shape, 1.0);
        worst_pre = worst_pre.max(gradcheck::max_rel_error(&x, 1e-5, |v: Var| {
            entry.preprocess(v).unwrap().mul(v.tape().constant(w.clone())).sum()
        }));
        checked.1 += 1;
    }
    report(
        "11",
        worst_head < 1e-3 && worst_pre < 1e-3,
        format!(
            "head_forward max rel. error {worst_head:.2e} over {} inputs, preprocess {worst_pre:.2e} over {} instances (limit 1e-3)",
            checked.0, checked.1
        ),
    );
}

// ----- full runs -----

/// Tiny bank for schedule tests: one extractor that sees the whole image,
/// one that sees a corner, one that sees nothing, plus a metric network.
fn stub_bank() -> ModelBank {
    let mut bank = ModelBank::new();
    let pool = |id: &str, shape: Vec<usize>, tap: &str| FeatureExtractorSpec {
        model_id: id.into(),
        input_resolution: 8,
        input_channels: 3,
        normalization: Normalization::symmetric(3),
        output_shapes: vec![shape],
        tap_points: vec![tap.into()],
        head_kind: HeadKind::SingleScale,
        arch: ExtractorArch::Pool,
    };
    let mut blind = pool("blind", vec![3, 4, 4], "zero");
    blind.arch = ExtractorArch::Zero;
    for spec in
        [pool("whole", vec![3, 4, 4], "area"), crop_spec("corner", 0, 0), blind, pool("metric", vec![3, 2, 2], "area")]
    {
        let id = spec.model_id.clone();
        bank.register_model(spec, vec![]).unwrap_or_else(|e| panic!("{id}: {e}"));
    }
    bank
}

fn stub_config(out_dir: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
[data]
path = "unused"
resolution = 8
[generator]
latent_dim = 8
base_channels = 8
[discriminator]
base_channels = 4
[bank]
metric_model = "metric"
head_width = 8
[selection]
k_max = 3
max_samples = 64
epochs = 50
[schedule]
warmup_steps = 20
intervals = [15, 10, 10]
[optimizer]
batch_size = 8
[metrics]
every = 5
n_gen = 64
kid = {{ subset_size = 32, n_subsets = 5 }}
divergence_factor = 1e9
[run]
seed = 3
log_every = 10
out_dir = {:?}
"#,
        out_dir.display().to_string()
    );
    visionaid::config::parse_config_str(&text, None).unwrap()
}

fn events_of(dir: &Path) -> Vec<Event> {
    read_jsonl(&dir.join(run::EVENTS_FILE)).unwrap()
}

#[test]
fn criterion_09_schedule_conformance() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = stub_config(&tmp.path().join("run"));
    let bank = stub_bank();
    let data = synthetic_two_mode(64, 8, 1);
    let out = run::run(&cfg, &bank, &data, &RunOptions::default()).unwrap();
    let events = events_of(&out.run_dir);
    let expected: Vec<u64> = vec![20, 35, 45];
    let added: Vec<u64> = events.iter().filter(|e| e.kind == "add_model").map(|e| e.step).collect();
    let mut restore_ok = true;
    let mut smoothing_ok = true;
    let (mut smoothed, mut plain) = (0, 0);
    for (i, e) in events.iter().enumerate() {
        if e.kind != "add_model" {
            continue;
        }
        // the restore must come first at the same step and name the best snapshot so far
        let restore = events[..i].iter().rev().find(|p| p.kind == "snapshot_restore");
        let best = events[..i]
            .iter()
            .filter(|p| p.kind == "snapshot")
            .fold(None::<(u64, f64)>, |b, p| {
                let fid = p.payload["fid"].as_f64().unwrap();
                match b {
                    Some((_, bf)) if bf <= fid => b,
                    _ => Some((p.step, fid)),
                }
            })
            .unwrap();
        restore_ok &= restore.is_some_and(|r| r.step == e.step && r.payload["from_step"].as_u64() == Some(best.0));
        let acc = e.payload["val_accuracy"].as_f64().unwrap();
        let eps = e.payload["smoothing"].as_f64().unwrap();
        smoothing_ok &= if acc > 0.9 { eps == cfg.selection.smoothing_epsilon } else { eps == 0.0 };
        if eps > 0.0 {
            smoothed += 1;
        } else {
            plain += 1;
        }
    }
    let elapsed = start.elapsed();
    report(
        "9",
        added == expected
            && restore_ok
            && smoothing_ok
            && smoothed > 0
            && plain > 0
            && elapsed < Duration::from_secs(30),
        format!(
            "additions at {added:?} (expected {expected:?}), best-snapshot restore before each {restore_ok}, \
             smoothing iff accuracy > 0.90 {smoothing_ok} ({smoothed} smoothed, {plain} not), {:.1}s (limit 30s)",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_13_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let bank = stub_bank();
    let data = synthetic_two_mode(64, 8, 1);
    let logs: Vec<(Vec<u8>, Vec<u8>)> = ["a", "b"]
        .iter()
        .map(|name| {
            let cfg = stub_config(&tmp.path().join(name));
            let out = run::run(&cfg, &bank, &data, &RunOptions::default()).unwrap();
            (
                std::fs::read(out.run_dir.join(run::EVENTS_FILE)).unwrap(),
                std::fs::read(out.run_dir.join(run::METRICS_FILE)).unwrap(),
            )
        })
        .collect();
    let same_events = logs[0].0 == logs[1].0;
    let same_metrics = logs[0].1 == logs[1].1;
    report(
        "13",
        same_events && same_metrics && !logs[0].0.is_empty(),
        format!(
            "event logs byte-identical {same_events} ({} bytes), metrics logs byte-identical {same_metrics}",
            logs[0].0.len()
        ),
    );
}

// ----- end-to-end smoke -----

const SMOKE_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const SMOKE_DATA_SEED: u64 = 1234;

fn smoke_config(k: usize, seed: u64, out: PathBuf) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/smoke.toml");
    let mut cfg = parse_config(&path).unwrap();
    cfg.selection.k_max = k;
    cfg.run.seed = seed;
    cfg.run.out_dir = out;
    cfg
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct SmokeRun {
    k: usize,
    seed: u64,
    fid: f64,
    diverged: bool,
    /// (accuracy at selection, accuracy at the next probe) of the first model.
    decay: Option<(f64, f64)>,
}

fn smoke_run(k: usize, seed: u64, root: &Path, data: &Dataset) -> SmokeRun {
    let cfg = smoke_config(k, seed, root.join(format!("k{k}-seed{seed}")));
    let bank = run::load_bank(&cfg).unwrap();
    let out = run::run(&cfg, &bank, data, &RunOptions::default()).unwrap();
    let events = events_of(&out.run_dir);
    let first = events.iter().find(|e| e.kind == "add_model");
    let decay = first.and_then(|a| {
        let id = a.payload["model_id"].as_str().unwrap();
        let later = events.iter().find(|e| e.kind == "probe" && e.step > a.step)?;
        let acc =
            later.payload["results"].as_array()?.iter().find(|r| r["model_id"] == id)?["val_accuracy"].as_f64()?;
        Some((a.payload["val_accuracy"].as_f64().unwrap(), acc))
    });
    SmokeRun { k, seed, fid: out.report.fid, diverged: out.diverged, decay }
}

#[test]
fn criterion_12_end_to_end_smoke() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let data = synthetic_two_mode(1000, 32, SMOKE_DATA_SEED);
    let jobs: Vec<(usize, u64)> = SMOKE_SEEDS.iter().flat_map(|&s| [(2, s), (0, s)]).collect();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results = std::sync::Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some(&(k, seed)) = jobs.get(i) else { break };
                let r = smoke_run(k, seed, tmp.path(), &data);
                results.lock().unwrap().push(r);
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|r| (r.k, r.seed));
    let elapsed = start.elapsed();
    let per_run: Vec<String> = results
        .iter()
        .map(|r| {
            format!(
                "K={} seed={} fid={:.4}{}",
                r.k,
                r.seed,
                r.fid,
                if r.diverged { " (stopped by divergence guard)" } else { "" }
            )
        })
        .collect();
    let mut vision: Vec<f64> = results.iter().filter(|r| r.k == 2).map(|r| r.fid).collect();
    let mut base: Vec<f64> = results.iter().filter(|r| r.k == 0).map(|r| r.fid).collect();
    let (mv, mb) = (median(&mut vision), median(&mut base));

    let mut drops: Vec<f64> = results.iter().filter_map(|r| r.decay).map(|(at, later)| later - at).collect();
    let decay_line = if drops.is_empty() {
        "probe decay: FAIL | no run reached a second probe\n".to_string()
    } else {
        let n = drops.len();
        let m = median(&mut drops);
        format!(
            "probe decay: {} | median change in the first selected model's probe accuracy at the next probe {m:+.4} over {n} runs (need <= 0)\n",
            if m <= 0.0 { "PASS" } else { "FAIL" }
        )
    };
    let _ = std::io::stderr().write_all(decay_line.as_bytes());
    report(
        "12",
        mv <= mb && elapsed < Duration::from_secs(2 * 3600),
        format!(
            "median desk-FID K=2 {mv:.4} vs K=0 {mb:.4} over seeds {SMOKE_SEEDS:?}; {:.0}s on {threads} thread(s) (limit 7200s); {}",
            elapsed.as_secs_f64(),
            per_run.join(", ")
        ),
    );
}
