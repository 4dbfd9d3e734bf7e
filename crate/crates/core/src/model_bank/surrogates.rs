//! Small seeded extractors standing in for large pretrained networks at desk
//! scale. Weights are a pure function of the seed, so every bank built with
//! the same seed hashes identically.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Activation, ConvLayer, ExtractorArch, FeatureExtractorSpec, HeadKind, ModelBank, Normalization};
use crate::error::Result;
use crate::rng;

/// Id of the extractor used for FID/KID/precision-recall in the desk bank.
pub const METRIC_MODEL: &str = "fid_metric";

fn conv(out_channels: usize, stride: usize, activation: Activation) -> ConvLayer {
    ConvLayer { out_channels, kernel: 3, stride, activation }
}

/// Fan-in scaled Gaussian weights, zero biases.
pub fn conv_net_weights(layers: &[ConvLayer], in_channels: usize, seed: u64, name: &str) -> Vec<f64> {
    let mut r = rng::stream(seed, name);
    let mut c = in_channels;
    let mut out = Vec::new();
    for l in layers {
        let fan_in = (c * l.kernel * l.kernel) as f64;
        let gain = 1.0 / fan_in.sqrt();
        for _ in 0..l.out_channels * c * l.kernel * l.kernel {
            out.push(r.sample::<f64, _>(StandardNormal) * gain);
        }
        out.extend(std::iter::repeat_n(0.0, l.out_channels));
        c = l.out_channels;
    }
    out
}

fn conv_net_spec(
    id: &str,
    res: usize,
    layers: Vec<ConvLayer>,
    shapes: Vec<Vec<usize>>,
    taps: &[&str],
    kind: HeadKind,
) -> FeatureExtractorSpec {
    FeatureExtractorSpec {
        model_id: id.into(),
        input_resolution: res,
        input_channels: 3,
        normalization: Normalization::symmetric(3),
        output_shapes: shapes,
        tap_points: taps.iter().map(|t| t.to_string()).collect(),
        head_kind: kind,
        arch: ExtractorArch::ConvNet { layers },
    }
}

/// The default desk bank: four candidate extractors plus the metric network.
pub fn desk_bank_entries(seed: u64) -> Vec<(FeatureExtractorSpec, Vec<f64>)> {
    let mut out = Vec::new();
    out.push((
        FeatureExtractorSpec {
            model_id: "pix_pool".into(),
            input_resolution: 32,
            input_channels: 3,
            normalization: Normalization::symmetric(3),
            output_shapes: vec![vec![3, 8, 8]],
            tap_points: vec!["area".into()],
            head_kind: HeadKind::SingleScale,
            arch: ExtractorArch::Pool,
        },
        vec![],
    ));
    let layers = vec![conv(8, 2, Activation::Tanh), conv(16, 2, Activation::Tanh)];
    let w = conv_net_weights(&layers, 3, seed, "edges16");
    out.push((conv_net_spec("edges16", 32, layers, vec![vec![16, 8, 8]], &["layer1"], HeadKind::SingleScale), w));
    let layers =
        vec![conv(16, 2, Activation::LeakyRelu), conv(16, 2, Activation::LeakyRelu), conv(32, 2, Activation::Tanh)];
    let w = conv_net_weights(&layers, 3, seed, "multi_conv");
    out.push((
        conv_net_spec(
            "multi_conv",
            32,
            layers,
            vec![vec![16, 8, 8], vec![32, 4, 4], vec![32]],
            &["layer1", "layer2", "pool2"],
            HeadKind::MultiScale,
        ),
        w,
    ));
    out.push((
        FeatureExtractorSpec {
            model_id: "color_stats".into(),
            input_resolution: 16,
            input_channels: 3,
            normalization: Normalization::symmetric(3),
            output_shapes: vec![vec![3, 4, 4]],
            tap_points: vec!["area".into()],
            head_kind: HeadKind::SingleScale,
            arch: ExtractorArch::Pool,
        },
        vec![],
    ));
    let layers = vec![
        conv(16, 2, Activation::LeakyRelu),
        conv(32, 2, Activation::LeakyRelu),
        conv(16, 2, Activation::LeakyRelu),
        conv(16, 2, Activation::Tanh),
    ];
    let w = conv_net_weights(&layers, 3, seed, METRIC_MODEL);
    out.push((conv_net_spec(METRIC_MODEL, 32, layers, vec![vec![16, 2, 2]], &["layer3"], HeadKind::SingleScale), w));
    out
}

pub fn desk_bank(seed: u64) -> Result<ModelBank> {
    let mut bank = ModelBank::new();
    for (spec, w) in desk_bank_entries(seed) {
        bank.register_model(spec, w)?;
    }
    Ok(bank)
}
