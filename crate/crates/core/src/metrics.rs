//! Distortion and rate measures: PSNR, MS-SSIM, bits per pixel, and the
//! Bjøntegaard delta rate between two rate-distortion curves.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// PSNR reported for identical images instead of infinity.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Peak signal-to-noise ratio of unit-range images, in dB.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "psnr",
            detail: format!("{} vs {}", a.shape(), b.shape()),
        });
    }
    if a.numel() == 0 {
        return Err(contract("psnr of empty images"));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Evaluation MS-SSIM; the scale count adapts to the image size.
pub fn ms_ssim_eval(a: &Tensor, b: &Tensor) -> Result<f64> {
    crate::msssim::ms_ssim_auto(a, b)
}

pub fn bpp(byte_count: usize, width: usize, height: usize) -> f64 {
    8.0 * byte_count as f64 / (width * height) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "ms-ssim")]
    MsSsim,
    #[serde(rename = "psnr")]
    Psnr,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    /// Distortion value: MS-SSIM in [0, 1] or PSNR in dB.
    pub d: f64,
}

/// Rate-distortion curve, serialized as
/// `{"metric": "ms-ssim"|"psnr", "points": [{"bpp": r, "d": v}, ...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdCurve {
    pub metric: Metric,
    pub points: Vec<RdPoint>,
}

impl RdCurve {
    pub fn new(metric: Metric, points: Vec<RdPoint>) -> Result<Self> {
        let curve = RdCurve { metric, points };
        curve.validate()?;
        Ok(curve)
    }

    /// At least 4 finite points with positive, strictly increasing rate.
    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 4 {
            return Err(Error::InsufficientPoints(self.points.len()));
        }
        for (i, p) in self.points.iter().enumerate() {
            if !(p.bpp.is_finite() && p.bpp > 0.0 && p.d.is_finite()) {
                return Err(contract(format!("point {i} has bpp {} and distortion {}", p.bpp, p.d)));
            }
            if i > 0 && p.bpp <= self.points[i - 1].bpp {
                return Err(contract(format!("bpp not strictly increasing at point {i}")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let curve: RdCurve = serde_json::from_str(text)?;
        curve.validate()?;
        Ok(curve)
    }
}

/// Least-squares polynomial of degree `deg` through `(x, y)`, returned as
/// coefficients in the normalised variable `(x − center) / spread`.
struct PolyFit {
    coef: Vec<f64>,
    center: f64,
    spread: f64,
}

impl PolyFit {
    fn fit(x: &[f64], y: &[f64], deg: usize) -> Result<Self> {
        let n = x.len() as f64;
        let center = x.iter().sum::<f64>() / n;
        let spread = (x.iter().map(|v| (v - center) * (v - center)).sum::<f64>() / n).sqrt();
        if spread == 0.0 {
            return Err(contract("all distortion values are equal"));
        }
        let m = deg + 1;
        let mut ata = vec![vec![0.0; m + 1]; m];
        for (&xi, &yi) in x.iter().zip(y) {
            let t = (xi - center) / spread;
            let pows: Vec<f64> = (0..m).map(|k| t.powi(k as i32)).collect();
            for r in 0..m {
                for c in 0..m {
                    ata[r][c] += pows[r] * pows[c];
                }
                ata[r][m] += pows[r] * yi;
            }
        }
        for col in 0..m {
            let pivot = (col..m)
                .max_by(|&a, &b| ata[a][col].abs().total_cmp(&ata[b][col].abs()))
                .expect("nonempty range");
            if ata[pivot][col].abs() < 1e-12 {
                return Err(contract("rate-distortion fit is singular (repeated distortion values?)"));
            }
            ata.swap(col, pivot);
            for r in 0..m {
                if r != col {
                    let f = ata[r][col] / ata[col][col];
                    for c in col..=m {
                        ata[r][c] -= f * ata[col][c];
                    }
                }
            }
        }
        let coef = (0..m).map(|r| ata[r][m] / ata[r][r]).collect();
        Ok(PolyFit { coef, center, spread })
    }

    /// ∫ p(x) dx over [lo, hi] in the original variable.
    fn integral(&self, lo: f64, hi: f64) -> f64 {
        let anti = |x: f64| {
            let t = (x - self.center) / self.spread;
            self.coef
                .iter()
                .enumerate()
                .map(|(k, c)| c * t.powi(k as i32 + 1) / (k as f64 + 1.0))
                .sum::<f64>()
                * self.spread
        };
        anti(hi) - anti(lo)
    }
}

/// Bjøntegaard delta rate of `test` against `anchor`, in percent. Negative
/// means `test` needs fewer bits for the same quality.
///
/// Each curve's log-rate is fitted by a cubic in distortion and the fits are
/// integrated over the full common distortion interval.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    anchor.validate()?;
    test.validate()?;
    if anchor.metric != test.metric {
        return Err(contract(format!("curves use different metrics: {:?} vs {:?}", anchor.metric, test.metric)));
    }
    let split = |c: &RdCurve| -> (Vec<f64>, Vec<f64>) { c.points.iter().map(|p| (p.d, p.bpp.log10())).unzip() };
    let (da, ra) = split(anchor);
    let (dt, rt) = split(test);
    let range = |d: &[f64]| (d.iter().copied().fold(f64::INFINITY, f64::min), d.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let (amin, amax) = range(&da);
    let (tmin, tmax) = range(&dt);
    let lo = amin.max(tmin);
    let hi = amax.min(tmax);
    if hi <= lo {
        return Err(Error::NoOverlap);
    }
    let pa = PolyFit::fit(&da, &ra, 3)?;
    let pt = PolyFit::fit(&dt, &rt, 3)?;
    let avg = (pt.integral(lo, hi) - pa.integral(lo, hi)) / (hi - lo);
    Ok((10f64.powf(avg) - 1.0) * 100.0)
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(contract(format!("spearman needs two equal-length series, got {} and {}", x.len(), y.len())));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mean) * (b - mean)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mean) * (a - mean)).sum();
    let vy: f64 = ry.iter().map(|b| (b - mean) * (b - mean)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(contract("spearman of a constant series"));
    }
    Ok(cov / (vx * vy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}
