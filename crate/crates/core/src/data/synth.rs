use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::io::{save_mask, save_rgb};
use super::BatchSource;
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

pub const SYNTH_CLASS: &str = "synthetic";

/// Rotated ellipse in pixel coordinates; pixel `(x, y)` is sampled at its centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }

    fn half_extent(&self) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (
            (self.a * self.a * c * c + self.b * self.b * s * s).sqrt(),
            (self.a * self.a * s * s + self.b * self.b * c * c).sqrt(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthItem {
    pub name: String,
    /// Interleaved RGB bytes, row-major.
    pub image: Vec<u8>,
    /// 0 or 255 per pixel.
    pub mask: Vec<u8>,
    pub ellipse: Ellipse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSet {
    pub size: usize,
    pub items: Vec<SynthItem>,
}

const MIN_FRACTION: f64 = 0.05;
const MAX_FRACTION: f64 = 0.5;

fn draw_ellipse(rng: &mut ChaCha8Rng, size: usize) -> (Ellipse, Vec<u8>) {
    let s = size as f64;
    loop {
        let a = rng.random_range(0.12 * s..0.4 * s);
        let b = rng.random_range(0.12 * s..0.4 * s);
        let theta = rng.random_range(0.0..PI);
        let mut e = Ellipse { cx: 0.0, cy: 0.0, a, b, theta };
        let (ex, ey) = e.half_extent();
        e.cx = rng.random_range(ex..=s - ex);
        e.cy = rng.random_range(ey..=s - ey);
        let mask: Vec<u8> = (0..size * size)
            .map(|i| if e.contains(i % size, i / size) { 255 } else { 0 })
            .collect();
        let fg = mask.iter().filter(|&&m| m > 0).count() as f64 / (s * s);
        if (MIN_FRACTION..=MAX_FRACTION).contains(&fg) {
            return (e, mask);
        }
    }
}

/// `n` images of one ellipse (reddish) on a striped, noisy blue-grey background,
/// with exact masks. Foreground covers between 5% and 50% of every image.
pub fn synth_dataset(n: usize, size: usize, seed: u64) -> Result<SynthSet> {
    if size < 16 {
        return Err(Error::arg("synth_dataset", format!("size {size} must be >= 16")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let (ellipse, mask) = draw_ellipse(&mut rng, size);
        let freq = rng.random_range(0.1..0.6);
        let phase = rng.random_range(0.0..2.0 * PI);
        let mut image = Vec::with_capacity(3 * size * size);
        for (p, &m) in mask.iter().enumerate() {
            let (x, y) = ((p % size) as f64, (p / size) as f64);
            let texture = 25.0 * (freq * (x + 0.7 * y) + phase).sin();
            let base: [f64; 3] = if m > 0 {
                [200.0 + 0.4 * texture, 80.0, 90.0]
            } else {
                [70.0 + texture, 120.0 + texture, 150.0]
            };
            for b in base {
                let noise = rng.random_range(-20.0..=20.0);
                image.push((b + noise).round().clamp(0.0, 255.0) as u8);
            }
        }
        items.push(SynthItem {
            name: format!("synth_{i:04}.png"),
            image,
            mask,
            ellipse,
        });
    }
    Ok(SynthSet { size, items })
}

/// Writes `root/synthetic/{image,label}/<name>`.
pub fn write_dataset(root: &Path, set: &SynthSet) -> Result<()> {
    let class = root.join(SYNTH_CLASS);
    let (image_dir, label_dir) = (class.join("image"), class.join("label"));
    for d in [&image_dir, &label_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let s = set.size as u32;
    for item in &set.items {
        save_rgb(&image_dir.join(&item.name), s, s, item.image.clone())?;
        save_mask(&label_dir.join(&item.name), s, s, item.mask.clone())?;
    }
    Ok(())
}

/// In-memory batches, already scaled to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct MemorySource {
    pub size: usize,
    images: Vec<Vec<f32>>,
    masks: Vec<Vec<f32>>,
    classes: Vec<String>,
}

impl MemorySource {
    pub fn from_synth(set: &SynthSet) -> Self {
        let plane = set.size * set.size;
        let images = set
            .items
            .iter()
            .map(|it| {
                let mut planar = vec![0.0f32; 3 * plane];
                for (i, px) in it.image.chunks(3).enumerate() {
                    for c in 0..3 {
                        planar[c * plane + i] = px[c] as f32 / 255.0;
                    }
                }
                planar
            })
            .collect();
        let masks = set
            .items
            .iter()
            .map(|it| it.mask.iter().map(|&m| if m > 0 { 1.0 } else { 0.0 }).collect())
            .collect();
        MemorySource {
            size: set.size,
            images,
            masks,
            classes: vec![SYNTH_CLASS.to_string(); set.items.len()],
        }
    }
}

impl BatchSource for MemorySource {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn class_of(&self, i: usize) -> &str {
        &self.classes[i]
    }

    fn batch(&self, start: usize, size: usize) -> Result<(Tensor4<f32>, Tensor4<f32>)> {
        if start >= self.len() || size == 0 {
            return Err(Error::arg("MemorySource::batch", format!("start {start} out of range")));
        }
        let end = (start + size).min(self.len());
        let n = end - start;
        let s = self.size;
        let x = self.images[start..end].concat();
        let y = self.masks[start..end].concat();
        Ok((
            Tensor4::from_vec(Shape4::new(n, 3, s, s), x)?,
            Tensor4::from_vec(Shape4::new(n, 1, s, s), y)?,
        ))
    }
}
