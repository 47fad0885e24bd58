#![allow(dead_code)]

use progcodec::{Shape, Tensor};

/// splitmix64, shared with tools/oracles/msssim_reference.py.
pub struct SplitMix64(u64);

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// The reference image pair for `seed`: blocky structure plus seeded noise.
pub fn reference_pair(seed: u64, channels: usize, size: usize) -> (Tensor, Tensor) {
    let mut rng = SplitMix64::new(seed);
    let coarse_dim = size.div_ceil(8);
    let mut coarse = vec![0u64; channels * coarse_dim * coarse_dim];
    for v in coarse.iter_mut() {
        *v = rng.next_u64() % 256;
    }
    let amp = 5 + (seed * 7) % 120;
    let mut a = vec![0.0; channels * size * size];
    let mut b = vec![0.0; channels * size * size];
    for c in 0..channels {
        for y in 0..size {
            for x in 0..size {
                let fine = rng.next_u64() % 256;
                let v = (coarse[(c * coarse_dim + y / 8) * coarse_dim + x / 8] * 7 + fine * 3) / 10;
                let noise = (rng.next_u64() % (2 * amp + 1)) as i64 - amp as i64;
                let i = (c * size + y) * size + x;
                a[i] = v as f64 / 255.0;
                b[i] = (v as i64 + noise).clamp(0, 255) as f64 / 255.0;
            }
        }
    }
    let shape = Shape::new(1, channels, size, size);
    (Tensor::new(shape, a).unwrap(), Tensor::new(shape, b).unwrap())
}

/// Central finite differences of `f` at `x`, step `1e-4 · max(1, |x_i|)`.
pub fn numeric_grad(x: &[f64], f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    numeric_grad_step(x, 1e-4, f)
}

/// Central finite differences with step `rel_step · max(1, |x_i|)`.
pub fn numeric_grad_step(x: &[f64], rel_step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = rel_step * x[i].abs().max(1.0);
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise relative error. Entries far below the gradient's
/// overall magnitude are compared against `1e-3 · max|numeric|` instead of
/// their own size, so round-off on near-zero entries does not dominate.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
