//! Training images and the noise → downsample → crop preprocessing.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::ppm::{crop, list_ppm, read_ppm, resize_area, RgbImage};
use crate::tensor::Tensor;

/// Amplitude of the uniform dequantization noise added to 8-bit pixels.
pub const PIXEL_NOISE: f64 = 0.5 / 255.0;

/// Size after shrinking so the longer side is at most `side`.
pub fn resized_dims(height: usize, width: usize, side: usize) -> (usize, usize) {
    let longer = height.max(width);
    if longer <= side {
        return (height, width);
    }
    let scale = |d: usize| ((d * side) as f64 / longer as f64).round().max(1.0) as usize;
    if height >= width {
        (side, scale(width))
    } else {
        (scale(height), side)
    }
}

/// Adds ±0.5/255 uniform noise, area-downsamples the longer side to
/// `resize_side`, then takes a random `crop_size²` window clamped to [0, 1].
pub fn preprocess<R: Rng + ?Sized>(image: &RgbImage, resize_side: usize, crop_size: usize, rng: &mut R) -> Result<Tensor> {
    let (h, w) = resized_dims(image.height, image.width, resize_side);
    if h < crop_size || w < crop_size {
        return Err(contract(format!(
            "{}x{} image is too small for {crop_size}x{crop_size} crops after resizing",
            image.width, image.height
        )));
    }
    let mut t = image.to_tensor();
    for v in t.data_mut() {
        *v += rng.random_range(-PIXEL_NOISE..PIXEL_NOISE);
    }
    let t = resize_area(&t, h, w);
    let top = rng.random_range(0..=h - crop_size);
    let left = rng.random_range(0..=w - crop_size);
    let mut out = crop(&t, top, left, crop_size, crop_size)?;
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Decoded training images held in memory, in file-name order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub images: Vec<RgbImage>,
    pub paths: Vec<PathBuf>,
    /// Images too small for the crop, left out with a warning.
    pub skipped: Vec<PathBuf>,
}

impl Dataset {
    pub fn load(dir: &Path, resize_side: usize, crop_size: usize) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::File {
                path: dir.to_path_buf(),
                detail: "dataset directory does not exist".into(),
            });
        }
        let mut ds = Dataset {
            dir: dir.to_path_buf(),
            images: Vec::new(),
            paths: Vec::new(),
            skipped: Vec::new(),
        };
        for path in list_ppm(dir)? {
            let img = read_ppm(&path)?;
            let (h, w) = resized_dims(img.height, img.width, resize_side);
            if h < crop_size || w < crop_size {
                log::warn!("skipping {}: {}x{} is smaller than the crop", path.display(), img.width, img.height);
                ds.skipped.push(path);
                continue;
            }
            ds.images.push(img);
            ds.paths.push(path);
        }
        if !ds.skipped.is_empty() {
            log::warn!("{} of {} images skipped as too small", ds.skipped.len(), ds.skipped.len() + ds.images.len());
        }
        if ds.images.is_empty() {
            return Err(Error::EmptyDataset(dir.to_path_buf()));
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Loads every PPM in `dir` resized (area filter) to exactly `height × width`,
/// as 1×3×H×W tensors.
pub fn load_eval_frames(dir: &Path, height: usize, width: usize) -> Result<Vec<Tensor>> {
    let paths = list_ppm(dir)?;
    if paths.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    paths
        .iter()
        .map(|p| Ok(resize_area(&read_ppm(p)?.to_tensor(), height, width)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(w: usize, h: usize) -> RgbImage {
        RgbImage::new(w, h, (0..w * h * 3).map(|i| (i * 37 % 256) as u8).collect()).unwrap()
    }

    #[test]
    fn resize_keeps_aspect() {
        assert_eq!(resized_dims(96, 96, 64), (64, 64));
        assert_eq!(resized_dims(300, 150, 64), (64, 32));
        assert_eq!(resized_dims(40, 50, 64), (40, 50));
    }

    #[test]
    fn preprocess_shape_range_determinism() {
        let img = image(96, 80);
        let run = |seed| preprocess(&img, 64, 48, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let a = run(3);
        assert_eq!(a.shape().0, [1, 3, 48, 48]);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, run(3));
        assert_ne!(a, run(4));
        assert!(preprocess(&image(60, 30), 64, 48, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
