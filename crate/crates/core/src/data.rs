//! Image datasets and the `VAFD` dense array file format.
//!
//! Images are held as `(n, channels, height, width)` arrays in `[-1, 1]`.
//! A dataset is a directory of PNG files (read in file-name order) or a
//! single `.vafd` file holding a rank-4 array.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array4, ArrayD, Axis, IxDyn};
use rand::Rng;

use crate::autograd::Tensor;
use crate::error::{Error, IoContext, Result};
use crate::rng;

pub const VAFD_MAGIC: &[u8; 4] = b"VAFD";
pub const VAFD_VERSION: u16 = 1;
pub const DTYPE_F32: u16 = 1;

/// Write `array` as little-endian `VAFD`: magic, version u16, dtype u16,
/// rank u16, shape as u64s, then row-major f32 data.
pub fn write_vafd(path: &Path, array: &ArrayD<f64>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).at(path)?);
    let mut write = || -> std::io::Result<()> {
        f.write_all(VAFD_MAGIC)?;
        f.write_all(&VAFD_VERSION.to_le_bytes())?;
        f.write_all(&DTYPE_F32.to_le_bytes())?;
        f.write_all(&(array.ndim() as u16).to_le_bytes())?;
        for &d in array.shape() {
            f.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in array.as_standard_layout().iter() {
            f.write_all(&(*v as f32).to_le_bytes())?;
        }
        f.flush()
    };
    write().at(path)
}

pub fn read_vafd(path: &Path) -> Result<ArrayD<f64>> {
    let bad = |reason: &str| Error::Data(format!("{}: {reason}", path.display()));
    let mut bytes = Vec::new();
    std::fs::File::open(path).at(path)?.read_to_end(&mut bytes).at(path)?;
    if bytes.len() < 10 || &bytes[..4] != VAFD_MAGIC {
        return Err(bad("not a VAFD file"));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    if u16_at(4) != VAFD_VERSION {
        return Err(bad(&format!("unsupported version {}", u16_at(4))));
    }
    if u16_at(6) != DTYPE_F32 {
        return Err(bad(&format!("unsupported dtype code {}", u16_at(6))));
    }
    let rank = u16_at(8) as usize;
    let header = 10 + 8 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> =
        (0..rank).map(|i| u64::from_le_bytes(bytes[10 + 8 * i..18 + 8 * i].try_into().unwrap()) as usize).collect();
    let n: usize = shape.iter().product();
    if bytes.len() != header + 4 * n {
        return Err(bad(&format!("expected {} data bytes, found {}", 4 * n, bytes.len() - header)));
    }
    let data = bytes[header..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap())
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Array4<f64>,
}

impl Dataset {
    pub fn new(images: Array4<f64>) -> Result<Self> {
        if images.shape()[0] == 0 {
            return Err(Error::Data("dataset is empty".into()));
        }
        if images.iter().any(|v| !v.is_finite() || v.abs() > 1.0 + 1e-6) {
            return Err(Error::Data("images must be finite and within [-1, 1]".into()));
        }
        Ok(Self { images })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn resolution(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn load(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Self::new(load_png_dir(path)?)
        } else if path.extension().is_some_and(|e| e == "vafd") {
            let a = read_vafd(path)?;
            let a = a
                .into_dimensionality()
                .map_err(|_| Error::Data(format!("{}: expected a rank-4 image array", path.display())))?;
            Self::new(a)
        } else {
            Err(Error::Data(format!("{}: expected a PNG directory or a .vafd file", path.display())))
        }
    }

    /// `n` images drawn uniformly with replacement, each mirrored
    /// horizontally with probability one half.
    pub fn sample_batch(&self, n: usize, rng: &mut impl Rng) -> Tensor {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.len())).collect();
        let mut batch = self.images.select(Axis(0), &idx);
        for mut img in batch.outer_iter_mut() {
            if rng.random::<bool>() {
                img.invert_axis(Axis(2));
                let flipped = img.to_owned();
                img.invert_axis(Axis(2));
                img.assign(&flipped);
            }
        }
        batch.into_dyn()
    }

    /// The first `n` images, or all of them.
    pub fn head(&self, n: Option<usize>) -> Tensor {
        let n = n.unwrap_or(self.len()).min(self.len());
        self.images.slice(ndarray::s![..n, .., .., ..]).to_owned().into_dyn()
    }

    /// Save as 8-bit PNGs named `00000.png`, `00001.png`, ...
    pub fn save_png_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).at(dir)?;
        for (i, img) in self.images.outer_iter().enumerate() {
            let (c, h, w) = img.dim();
            let px = |y: usize, x: usize, ch: usize| ((img[[ch, y, x]] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
            let path = dir.join(format!("{i:05}.png"));
            let res = if c == 1 {
                image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([px(y as usize, x as usize, 0)]))
                    .save(&path)
            } else {
                image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                    let (x, y) = (x as usize, y as usize);
                    image::Rgb([px(y, x, 0), px(y, x, 1.min(c - 1)), px(y, x, 2.min(c - 1))])
                })
                .save(&path)
            };
            res.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }
}

fn load_png_dir(dir: &Path) -> Result<Array4<f64>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("{}: no PNG files", dir.display())));
    }
    let mut out: Option<Array4<f64>> = None;
    for (i, f) in files.iter().enumerate() {
        let img = image::open(f).map_err(|e| Error::Data(format!("{}: {e}", f.display())))?;
        let gray = matches!(img.color(), image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8);
        let (w, h) = (img.width() as usize, img.height() as usize);
        let c = if gray { 1 } else { 3 };
        let arr = out.get_or_insert_with(|| Array4::zeros((files.len(), c, h, w)));
        if arr.shape()[1..] != [c, h, w] {
            return Err(Error::Data(format!("{}: size or channel count differs from the first image", f.display())));
        }
        if gray {
            let g = img.to_luma8();
            for (x, y, p) in g.enumerate_pixels() {
                arr[[i, 0, y as usize, x as usize]] = p[0] as f64 / 127.5 - 1.0;
            }
        } else {
            let rgb = img.to_rgb8();
            for (x, y, p) in rgb.enumerate_pixels() {
                for ch in 0..3 {
                    arr[[i, ch, y as usize, x as usize]] = p[ch] as f64 / 127.5 - 1.0;
                }
            }
        }
    }
    Ok(out.unwrap())
}

/// Two-mode synthetic RGB dataset. Half the images are a warm Gaussian blob
/// at a jittered position on a dark background; the other half are cool
/// diagonal stripes with random phase and period.
pub fn synthetic_two_mode(n: usize, resolution: usize, seed: u64) -> Dataset {
    let mut r = rng::stream(seed, "synthetic-data");
    let res = resolution as f64;
    let mut images = Array4::zeros((n, 3, resolution, resolution));
    for (i, mut img) in images.outer_iter_mut().enumerate() {
        if i % 2 == 0 {
            let cy = res * r.random_range(0.3..0.7);
            let cx = res * r.random_range(0.3..0.7);
            let sigma = res * r.random_range(0.12..0.2);
            let tint = [r.random_range(0.8..1.0), r.random_range(0.3..0.6), r.random_range(0.0..0.2)];
            for y in 0..resolution {
                for x in 0..resolution {
                    let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                    let v = (-d2 / (2.0 * sigma * sigma)).exp();
                    for c in 0..3 {
                        img[[c, y, x]] = 1.8 * v * tint[c] - 0.9;
                    }
                }
            }
        } else {
            let period = res * r.random_range(0.2..0.35);
            let phase = r.random_range(0.0..std::f64::consts::TAU);
            let tint = [r.random_range(0.0..0.2), r.random_range(0.3..0.6), r.random_range(0.7..1.0)];
            for y in 0..resolution {
                for x in 0..resolution {
                    let s = 0.5 + 0.5 * ((x + y) as f64 * std::f64::consts::TAU / period + phase).sin();
                    for c in 0..3 {
                        img[[c, y, x]] = 1.8 * s * tint[c] - 0.9;
                    }
                }
            }
        }
    }
    Dataset::new(images).expect("synthetic images are in range")
}
