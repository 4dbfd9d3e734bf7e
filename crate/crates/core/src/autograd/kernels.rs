//! Raw loops behind the convolution and pooling ops. All buffers are
//! row-major NCHW.

/// Geometry of a sliding-window operation over an image batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Rows of the column matrix: one per (batch, out_y, out_x).
    pub fn rows(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }

    /// Columns of the column matrix: one per (channel, ky, kx).
    pub fn cols(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// In-bounds tap range `[lo, hi)` of a window starting at `start` along an
/// axis of length `len`.
fn taps(start: isize, kernel: usize, len: usize) -> (usize, usize) {
    let lo = (-start).max(0) as usize;
    let hi = (len as isize - start).clamp(0, kernel as isize) as usize;
    (lo.min(hi), hi)
}

/// Unfold `img` into a `(rows, cols)` patch matrix. Out-of-bounds taps read zero.
pub fn im2col(img: &[f64], g: &Window) -> Vec<f64> {
    let (oh, ow, k) = (g.out_height(), g.out_width(), g.kernel);
    let ncols = g.cols();
    let mut out = vec![0.0; g.rows() * ncols];
    let plane = g.height * g.width;
    for b in 0..g.batch {
        let img_b = &img[b * g.channels * plane..(b + 1) * g.channels * plane];
        for oy in 0..oh {
            let y0 = (oy * g.stride) as isize - g.pad as isize;
            let (ylo, yhi) = taps(y0, k, g.height);
            for ox in 0..ow {
                let x0 = (ox * g.stride) as isize - g.pad as isize;
                let (xlo, xhi) = taps(x0, k, g.width);
                let row = (b * oh + oy) * ow + ox;
                let dst = &mut out[row * ncols..(row + 1) * ncols];
                for c in 0..g.channels {
                    let src = &img_b[c * plane..(c + 1) * plane];
                    for ky in ylo..yhi {
                        let s0 = (y0 + ky as isize) as usize * g.width;
                        let sx = (x0 + xlo as isize) as usize;
                        let d0 = (c * k + ky) * k;
                        dst[d0 + xlo..d0 + xhi].copy_from_slice(&src[s0 + sx..s0 + sx + xhi - xlo]);
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back into an image.
pub fn col2im(cols: &[f64], g: &Window) -> Vec<f64> {
    let (oh, ow, k) = (g.out_height(), g.out_width(), g.kernel);
    let ncols = g.cols();
    let plane = g.height * g.width;
    let mut img = vec![0.0; g.batch * g.channels * plane];
    for b in 0..g.batch {
        let img_b = &mut img[b * g.channels * plane..(b + 1) * g.channels * plane];
        for oy in 0..oh {
            let y0 = (oy * g.stride) as isize - g.pad as isize;
            let (ylo, yhi) = taps(y0, k, g.height);
            for ox in 0..ow {
                let x0 = (ox * g.stride) as isize - g.pad as isize;
                let (xlo, xhi) = taps(x0, k, g.width);
                let row = (b * oh + oy) * ow + ox;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for c in 0..g.channels {
                    let dst = &mut img_b[c * plane..(c + 1) * plane];
                    for ky in ylo..yhi {
                        let d0 = (y0 + ky as isize) as usize * g.width + (x0 + xlo as isize) as usize;
                        let s0 = (c * k + ky) * k;
                        for (d, s) in dst[d0..d0 + xhi - xlo].iter_mut().zip(&src[s0 + xlo..s0 + xhi]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    img
}

/// Non-overlapping `k x k` average pooling. Trailing rows/columns that do
/// not fill a full window are dropped.
pub fn avg_pool(img: &[f64], planes: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &img[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..k {
                    let row = &src[(oy * k + ky) * w + ox * k..(oy * k + ky) * w + ox * k + k];
                    acc += row.iter().sum::<f64>();
                }
                dst[oy * ow + ox] = acc * norm;
            }
        }
    }
    out
}

pub fn avg_pool_backward(grad: &[f64], planes: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &grad[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = src[oy * ow + ox] * norm;
                for ky in 0..k {
                    for kx in 0..k {
                        dst[(oy * k + ky) * w + ox * k + kx] = g;
                    }
                }
            }
        }
    }
    out
}
