//! Image loading, random-crop training streams, padded evaluation images and
//! a procedural image generator for self-contained experiments.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{arg_err, Error, Result};
use crate::tensor::Tensor;
use crate::train::BatchSource;

/// Images of equal size in `[0, 1]` plus where they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub pixels: Tensor,
    pub sources: Vec<String>,
}

impl ImageBatch {
    /// Checks the pixel range and divisibility by `factor`.
    pub fn validate(&self, factor: usize) -> Result<()> {
        if self.pixels.height() % factor != 0 || self.pixels.width() % factor != 0 {
            return Err(Error::Shape(format!(
                "{}x{} is not divisible by {}",
                self.pixels.height(),
                self.pixels.width(),
                factor
            )));
        }
        if self.pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return arg_err("pixel values outside [0, 1]");
        }
        Ok(())
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Sorted list of PNG/JPEG files in `dir` (non-recursive).
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return arg_err(format!("no PNG or JPEG images in {}", dir.display()));
    }
    Ok(files)
}

/// Decodes an image into a `(1, 3, H, W)` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros([1, 3, h, w]);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            let i = t.idx(0, c, y as usize, x as usize);
            t.data_mut()[i] = px[c] as f64 / 255.0;
        }
    }
    Ok(t)
}

/// Writes the first image of `t` as an 8-bit PNG.
pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    if t.channels() != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {}", t.channels())));
    }
    let (h, w) = (t.height(), t.width());
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (t.get(0, c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path)?;
    Ok(())
}

/// Loads every decodable image in `dir`, skipping (with a warning) files
/// that fail to decode or are smaller than `min_size` on either side.
pub fn load_dir(dir: &Path, min_size: usize) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    for p in list_images(dir)? {
        match load_image(&p) {
            Ok(t) if t.height() >= min_size && t.width() >= min_size => out.push((p.display().to_string(), t)),
            Ok(t) => log::warn!("skipping {}: {}x{} is smaller than {}", p.display(), t.height(), t.width(), min_size),
            Err(e) => log::warn!("skipping {}: {}", p.display(), e),
        }
    }
    if out.is_empty() {
        return arg_err(format!("no usable images in {}", dir.display()));
    }
    Ok(out)
}

/// Copies the `h × w` window at `(top, left)` out of every image in `t`.
pub fn crop(t: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
    if top + h > t.height() || left + w > t.width() {
        return Err(Error::Shape(format!(
            "window {}x{} at ({}, {}) exceeds {}x{}",
            h,
            w,
            top,
            left,
            t.height(),
            t.width()
        )));
    }
    let [n, c, _, _] = t.shape();
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                let src = t.idx(b, ch, top + y, left);
                let dst = out.idx(b, ch, y, 0);
                let row = t.data()[src..src + w].to_vec();
                out.data_mut()[dst..dst + w].copy_from_slice(&row);
            }
        }
    }
    Ok(out)
}

/// Endless, seed-determined stream of random crops.
pub struct CropStream {
    images: Vec<Tensor>,
    crop: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl CropStream {
    pub fn new(images: Vec<Tensor>, crop: usize, batch: usize, seed: u64) -> Result<Self> {
        if images.is_empty() || batch == 0 || crop == 0 {
            return arg_err("crop stream needs images, a positive crop and a positive batch size");
        }
        if let Some(t) = images.iter().find(|t| t.height() < crop || t.width() < crop) {
            return arg_err(format!("image {}x{} is smaller than the crop {}", t.height(), t.width(), crop));
        }
        Ok(CropStream { images, crop, batch, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn image_count(&self) -> usize {
        self.images.len()
    }
}

impl BatchSource for CropStream {
    fn next_batch(&mut self) -> Result<Tensor> {
        let mut parts = Vec::with_capacity(self.batch);
        for _ in 0..self.batch {
            let img = &self.images[self.rng.random_range(0..self.images.len())];
            let top = self.rng.random_range(0..=img.height() - self.crop);
            let left = self.rng.random_range(0..=img.width() - self.crop);
            let mut c = crop(img, top, left, self.crop, self.crop)?;
            if self.rng.random_bool(0.5) {
                flip_horizontal(&mut c);
            }
            parts.push(c);
        }
        Tensor::stack(&parts)
    }
}

fn flip_horizontal(t: &mut Tensor) {
    let w = t.width();
    for row in t.data_mut().chunks_mut(w) {
        row.reverse();
    }
}

/// Random crops from every usable image in `dir`.
pub fn ingest_dataset(dir: &Path, crop_size: usize, batch: usize, seed: u64) -> Result<CropStream> {
    let images = load_dir(dir, crop_size)?.into_iter().map(|(_, t)| t).collect();
    CropStream::new(images, crop_size, batch, seed)
}

/// A full image padded (edge-replicated, centred) to the codec's divisibility
/// constraint, remembering where the original sits.
#[derive(Clone, Debug)]
pub struct EvalImage {
    pub source: String,
    pub pixels: Tensor,
    pub height: usize,
    pub width: usize,
    pub top: usize,
    pub left: usize,
}

impl EvalImage {
    pub fn new(source: impl Into<String>, image: &Tensor, factor: usize) -> Result<Self> {
        let (pixels, top, left) = pad_to_multiple(image, factor)?;
        Ok(EvalImage { source: source.into(), pixels, height: image.height(), width: image.width(), top, left })
    }

    /// The unpadded region of a tensor aligned with `pixels`.
    pub fn unpad(&self, t: &Tensor) -> Tensor {
        crop(t, self.top, self.left, self.height, self.width).expect("padded tensor contains the original")
    }

    pub fn original(&self) -> Tensor {
        self.unpad(&self.pixels)
    }
}

/// Pads `t` to the next multiple of `factor` on both axes by replicating the
/// border, splitting the padding evenly (extra pixel at the bottom/right).
pub fn pad_to_multiple(t: &Tensor, factor: usize) -> Result<(Tensor, usize, usize)> {
    if factor == 0 {
        return arg_err("padding factor must be positive");
    }
    let (h, w) = (t.height(), t.width());
    let (ph, pw) = (h.div_ceil(factor) * factor, w.div_ceil(factor) * factor);
    let (top, left) = ((ph - h) / 2, (pw - w) / 2);
    let [n, c, _, _] = t.shape();
    let mut out = Tensor::zeros([n, c, ph, pw]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..ph {
                let sy = y.saturating_sub(top).min(h - 1);
                for x in 0..pw {
                    let sx = x.saturating_sub(left).min(w - 1);
                    let i = out.idx(b, ch, y, x);
                    out.data_mut()[i] = t.get(b, ch, sy, sx);
                }
            }
        }
    }
    Ok((out, top, left))
}

/// Loads an evaluation set, padding each image for `factor`.
pub fn load_eval_set(dir: &Path, factor: usize) -> Result<Vec<EvalImage>> {
    load_dir(dir, 1)?.into_iter().map(|(s, t)| EvalImage::new(s, &t, factor)).collect()
}

/// Procedural RGB image: a colour gradient overlaid with soft-edged shapes,
/// striped textures and mild sensor-like noise. Deterministic in `seed`.
pub fn synthetic_image(height: usize, width: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
    let (ca, cb) = (color(&mut rng), color(&mut rng));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let diag = ((height * height + width * width) as f64).sqrt();
    let mut img = vec![[0.0f64; 3]; height * width];
    for y in 0..height {
        for x in 0..width {
            let t = (((x as f64 - width as f64 / 2.0) * dx + (y as f64 - height as f64 / 2.0) * dy) / diag + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                img[y * width + x][c] = ca[c] * (1.0 - t) + cb[c] * t;
            }
        }
    }
    let shapes = rng.random_range(4..10);
    for _ in 0..shapes {
        let col = color(&mut rng);
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let ry = rng.random_range(0.05..0.35) * height as f64;
        let rx = rng.random_range(0.05..0.35) * width as f64;
        let round = rng.random_bool(0.5);
        let soft = rng.random_range(0.5..4.0);
        let stripes = rng.random_bool(0.4).then(|| (rng.random_range(0.1..0.8), rng.random_range(0.0..std::f64::consts::PI)));
        let alpha_max = rng.random_range(0.6..1.0);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                let d = if round { (u * u + v * v).sqrt() } else { u.abs().max(v.abs()) };
                let edge = (1.0 - d) * rx.min(ry) / soft;
                let alpha = alpha_max * (1.0 / (1.0 + (-edge).exp()));
                if alpha < 1e-3 {
                    continue;
                }
                let shade = match stripes {
                    Some((f, a)) => 0.75 + 0.25 * ((x as f64 * a.cos() + y as f64 * a.sin()) * f).sin(),
                    None => 1.0,
                };
                let px = &mut img[y * width + x];
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - alpha) + col[c] * shade * alpha;
                }
            }
        }
    }
    let noise = Normal::new(0.0, 0.01).expect("valid normal");
    let mut t = Tensor::zeros([1, 3, height, width]);
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let i = t.idx(0, c, y, x);
                t.data_mut()[i] = (img[y * width + x][c] + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }
    t
}

/// Writes `count` synthetic PNGs named `synth_0000.png`, … into `dir`.
pub fn write_synthetic_corpus(dir: &Path, count: usize, height: usize, width: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    (0..count)
        .map(|i| {
            let p = dir.join(format!("synth_{:04}.png", i));
            save_png(&synthetic_image(height, width, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)), &p)?;
            Ok(p)
        })
        .collect()
}
