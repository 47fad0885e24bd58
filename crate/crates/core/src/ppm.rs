//! Binary PPM (P6) images and simple resampling.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// 8-bit interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(crate::error::contract(format!(
                "{} bytes for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    /// 1×3×H×W tensor with values in [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
        for c in 0..3 {
            let plane = t.plane_mut(0, c);
            for i in 0..w * h {
                plane[i] = self.data[3 * i + c] as f64 / 255.0;
            }
        }
        t
    }

    /// Rounds and clamps batch item `item` of a 3-channel tensor to 8 bits.
    pub fn from_tensor(t: &Tensor, item: usize) -> Result<Self> {
        let [_, c, h, w] = t.shape().0;
        if c != 3 {
            return Err(Error::Shape {
                op: "RgbImage::from_tensor",
                detail: format!("expected 3 channels, got {c}"),
            });
        }
        let mut data = vec![0u8; w * h * 3];
        for ch in 0..3 {
            let plane = t.plane(item, ch);
            for i in 0..w * h {
                data[3 * i + ch] = (plane[i].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        Ok(RgbImage { width: w, height: h, data })
    }
}

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format(format!("byte offset {offset}: {}", detail.into()))
}

/// Parses a P6 image from memory.
pub fn parse_ppm(bytes: &[u8]) -> Result<RgbImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(format_err(0, "missing P6 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(format_err(pos, "header ends early")),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(pos, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(start, "header field out of range"))?;
    }
    let [width, height, maxval] = fields;
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(format_err(pos, "expected whitespace after maxval")),
    }
    if width == 0 || height == 0 {
        return Err(format_err(2, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(pos - 1, format!("unsupported maxval {maxval}")));
    }
    let wide = maxval > 255;
    let (samples, need) = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .and_then(|s| s.checked_mul(if wide { 2 } else { 1 }).map(|need| (s, need)))
        .ok_or_else(|| format_err(2, format!("image {width}x{height} is too large")))?;
    if bytes.len() - pos < need {
        return Err(format_err(
            bytes.len(),
            format!("pixel data truncated: {} of {need} bytes", bytes.len() - pos),
        ));
    }
    let raw = &bytes[pos..pos + need];
    let data = if !wide && maxval == 255 {
        raw.to_vec()
    } else {
        (0..samples)
            .map(|i| {
                let v = if wide {
                    u16::from_be_bytes([raw[2 * i], raw[2 * i + 1]]) as u32
                } else {
                    raw[i] as u32
                };
                ((v.min(maxval as u32) * 255 + maxval as u32 / 2) / maxval as u32) as u8
            })
            .collect()
    };
    Ok(RgbImage { width, height, data })
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    parse_ppm(&bytes).map_err(|e| Error::File {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::File {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// `*.ppm` files in `dir`, sorted lexicographically by file name.
pub fn list_ppm(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::File {
        path: dir.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Box-filter weights mapping `src` samples onto `dst` samples (dst ≤ src).
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * ratio;
            let hi = lo + ratio;
            let mut taps = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < src {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((i, overlap / ratio));
                }
                i += 1;
            }
            taps
        })
        .collect()
}

/// Area (box) resampling of every plane to `height × width`. Only shrinks;
/// enlarging falls back to nearest neighbour.
pub fn resize_area(t: &Tensor, height: usize, width: usize) -> Tensor {
    let [n, c, h, w] = t.shape().0;
    if (h, w) == (height, width) {
        return t.clone();
    }
    let rows = if height <= h { area_weights(h, height) } else { nearest_weights(h, height) };
    let cols = if width <= w { area_weights(w, width) } else { nearest_weights(w, width) };
    let mut out = Tensor::zeros(Shape::new(n, c, height, width));
    let mut tmp = vec![0.0; h * width];
    for item in 0..n {
        for ch in 0..c {
            let src = t.plane(item, ch);
            for y in 0..h {
                for (x, taps) in cols.iter().enumerate() {
                    tmp[y * width + x] = taps.iter().map(|&(i, wt)| wt * src[y * w + i]).sum();
                }
            }
            let dst = out.plane_mut(item, ch);
            for (y, taps) in rows.iter().enumerate() {
                for x in 0..width {
                    dst[y * width + x] = taps.iter().map(|&(i, wt)| wt * tmp[i * width + x]).sum();
                }
            }
        }
    }
    out
}

fn nearest_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    (0..dst).map(|o| vec![((o * src) / dst, 1.0)]).collect()
}

/// Copies the `height × width` window starting at (`top`, `left`).
pub fn crop(t: &Tensor, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor> {
    let [n, c, h, w] = t.shape().0;
    if top + height > h || left + width > w {
        return Err(crate::error::contract(format!(
            "crop {height}x{width}+{top}+{left} outside {h}x{w}"
        )));
    }
    let mut out = Tensor::zeros(Shape::new(n, c, height, width));
    for item in 0..n {
        for ch in 0..c {
            let src = t.plane(item, ch);
            let dst = out.plane_mut(item, ch);
            for y in 0..height {
                dst[y * width..(y + 1) * width].copy_from_slice(&src[(top + y) * w + left..(top + y) * w + left + width]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_comments() {
        let img = RgbImage::new(2, 1, vec![1, 2, 3, 250, 251, 252]).unwrap();
        assert_eq!(parse_ppm(&encode_ppm(&img)).unwrap(), img);
        let mut commented = b"P6 # made by hand\n2 # width\n1\n255\n".to_vec();
        commented.extend_from_slice(&img.data);
        assert_eq!(parse_ppm(&commented).unwrap(), img);
    }

    #[test]
    fn malformed_headers_report_offsets() {
        let err = parse_ppm(b"P5\n1 1\n255\n\0").unwrap_err().to_string();
        assert!(err.contains("byte offset 0"), "{err}");
        let err = parse_ppm(b"P6\n2 2\n255\n\0\0\0").unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        let err = parse_ppm(b"P6\nx 2\n255\n").unwrap_err().to_string();
        assert!(err.contains("byte offset 3"), "{err}");
    }

    #[test]
    fn area_resize_preserves_mean_and_constants() {
        let t = Tensor::new(Shape::new(1, 1, 4, 6), (0..24).map(|v| v as f64).collect()).unwrap();
        let r = resize_area(&t, 2, 4);
        let mean = |x: &Tensor| x.data().iter().sum::<f64>() / x.numel() as f64;
        assert!((mean(&t) - mean(&r)).abs() < 1e-12);
        let half = resize_area(&t, 2, 3);
        assert!((half.data()[0] - (0.0 + 1.0 + 6.0 + 7.0) / 4.0).abs() < 1e-12);
        let flat = resize_area(&Tensor::full(Shape::new(1, 3, 96, 80), 0.3), 64, 53);
        assert!(flat.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn tensor_round_trip() {
        let img = RgbImage::new(3, 2, (0..18).map(|v| (v * 14) as u8).collect()).unwrap();
        assert_eq!(RgbImage::from_tensor(&img.to_tensor(), 0).unwrap(), img);
    }
}
