//! One-dimensional interpolation matrices. Applied along both image axes via
//! [`Var::spatial_map`](crate::autograd::Var::spatial_map) they give
//! differentiable resizing and pooling.

use ndarray::Array2;

/// `(out, in)` resampling matrix: area averaging when shrinking, bilinear
/// (half-pixel centers, edge clamped) when enlarging, identity otherwise.
pub fn resize_matrix(input: usize, output: usize) -> Array2<f64> {
    let mut m = Array2::zeros((output, input));
    if input == output {
        for i in 0..input {
            m[[i, i]] = 1.0;
        }
    } else if output < input {
        let scale = input as f64 / output as f64;
        for i in 0..output {
            let (lo, hi) = (i as f64 * scale, (i + 1) as f64 * scale);
            for p in lo.floor() as usize..(hi.ceil() as usize).min(input) {
                let overlap = (hi.min(p as f64 + 1.0) - lo.max(p as f64)).max(0.0);
                m[[i, p]] = overlap / scale;
            }
        }
    } else {
        let scale = input as f64 / output as f64;
        for i in 0..output {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let p0 = src.floor() as usize;
            let p1 = (p0 + 1).min(input - 1);
            let frac = src - p0 as f64;
            m[[i, p0]] += 1.0 - frac;
            m[[i, p1]] += frac;
        }
    }
    m
}

/// `(out, in)` adaptive average pooling matrix: output cell `i` averages
/// inputs `floor(i*in/out) .. ceil((i+1)*in/out)`. Windows may overlap when
/// `out` does not divide `in`.
pub fn adaptive_pool_matrix(input: usize, output: usize) -> Array2<f64> {
    let mut m = Array2::zeros((output, input));
    for i in 0..output {
        let start = (i * input) / output;
        let end = ((i + 1) * input).div_ceil(output);
        let w = 1.0 / (end - start) as f64;
        for p in start..end {
            m[[i, p]] = w;
        }
    }
    m
}
