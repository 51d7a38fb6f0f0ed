use std::path::Path;

use image::{GrayImage, RgbImage};

use super::{BatchSource, Sample};
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// Decodes any supported image as RGB; returns `(width, height, planar R,G,B in [0, 1])`.
pub fn load_rgb(path: &Path) -> Result<(u32, u32, Vec<f32>)> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut out = vec![0.0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Ok((w, h, out))
}

/// Decodes a mask as grayscale and binarizes it: `> 0` becomes 1.
pub fn load_mask(path: &Path) -> Result<(u32, u32, Vec<f32>)> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((w, h, img.pixels().map(|p| if p[0] > 0 { 1.0 } else { 0.0 }).collect()))
}

/// Writes interleaved RGB bytes; the format follows the file extension.
pub fn save_rgb(path: &Path, width: u32, height: u32, rgb: Vec<u8>) -> Result<()> {
    let img = RgbImage::from_raw(width, height, rgb)
        .ok_or_else(|| Error::arg("save_rgb", "buffer length does not match dimensions"))?;
    img.save(path).map_err(|e| Error::image(path, e))
}

pub fn save_mask(path: &Path, width: u32, height: u32, gray: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(width, height, gray)
        .ok_or_else(|| Error::arg("save_mask", "buffer length does not match dimensions"))?;
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Loads samples `start..start + batch_size` (clipped to the list).
pub fn load_batch(samples: &[Sample], start: usize, batch_size: usize) -> Result<(Tensor4<f32>, Tensor4<f32>)> {
    if start >= samples.len() || batch_size == 0 {
        return Err(Error::arg(
            "load_batch",
            format!("start {start} / size {batch_size} out of range for {} samples", samples.len()),
        ));
    }
    let chunk = &samples[start..(start + batch_size).min(samples.len())];
    let mut size = None;
    let (mut images, mut masks) = (Vec::new(), Vec::new());
    for s in chunk {
        let (w, h, rgb) = load_rgb(&s.image_path)?;
        let (mw, mh, m) = load_mask(&s.mask_path)?;
        if (mw, mh) != (w, h) {
            return Err(Error::Dataset(format!(
                "{} is {w}x{h} but its mask is {mw}x{mh}",
                s.image_path.display()
            )));
        }
        match size {
            None => size = Some((w, h)),
            Some(first) if first != (w, h) => {
                return Err(Error::Dataset(format!(
                    "{} is {w}x{h}, expected {}x{} like the rest of the batch",
                    s.image_path.display(),
                    first.0,
                    first.1
                )))
            }
            _ => {}
        }
        images.extend(rgb);
        masks.extend(m);
    }
    let (w, h) = size.expect("non-empty batch");
    let n = chunk.len();
    Ok((
        Tensor4::from_vec(Shape4::new(n, 3, h as usize, w as usize), images)?,
        Tensor4::from_vec(Shape4::new(n, 1, h as usize, w as usize), masks)?,
    ))
}

/// Batches decoded from disk on demand.
#[derive(Clone, Debug)]
pub struct DiskSource {
    pub samples: Vec<Sample>,
    /// Expected square side; batches of any other size are rejected.
    pub size: usize,
}

impl BatchSource for DiskSource {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn class_of(&self, i: usize) -> &str {
        &self.samples[i].class_name
    }

    fn batch(&self, start: usize, size: usize) -> Result<(Tensor4<f32>, Tensor4<f32>)> {
        let (x, y) = load_batch(&self.samples, start, size)?;
        let s = x.shape();
        if s.h != self.size || s.w != self.size {
            return Err(Error::Dataset(format!(
                "{} is {}x{}, but the model expects {}x{}",
                self.samples[start].image_path.display(),
                s.w,
                s.h,
                self.size,
                self.size
            )));
        }
        Ok((x, y))
    }
}
