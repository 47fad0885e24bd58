//! Latent container and the tail-dropout / zero-fill operations.

use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::tensor::{Shape, Tensor};

/// Encoder output for one frame: (1, channels, H/8, W/8), channel 0 first in
/// significance order.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    tensor: Tensor,
}

impl Latent {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.shape().batch() != 1 {
            return Err(contract(format!("latent must hold one frame, got {}", tensor.shape())));
        }
        Ok(Latent { tensor })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Latent {
            tensor: Tensor::zeros(Shape::new(1, channels, height, width)),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape().channels()
    }

    pub fn height(&self) -> usize {
        self.tensor.shape().height()
    }

    pub fn width(&self) -> usize {
        self.tensor.shape().width()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        self.tensor.plane(0, c)
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        self.tensor.plane_mut(0, c)
    }

    /// The first `c` channels as their own latent.
    pub fn prefix(&self, c: usize) -> Result<Latent> {
        if c == 0 || c > self.channels() {
            return Err(contract(format!("prefix of {c} channels from {}", self.channels())));
        }
        let p = self.height() * self.width();
        Ok(Latent {
            tensor: Tensor::new(
                Shape::new(1, c, self.height(), self.width()),
                self.tensor.data()[..c * p].to_vec(),
            )?,
        })
    }
}

/// Draws the drop fraction `k ~ U[0, 1)`.
pub fn sample_drop_fraction<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}

/// Channels that survive dropping the last `⌊k·n⌋`: `n − ⌊k·n⌋`, always ≥ 1.
pub fn keep_count(n: usize, k: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&k) {
        return Err(contract(format!("drop fraction {k} outside [0, 1)")));
    }
    let dropped = (k * n as f64).floor() as usize;
    Ok(n - dropped.min(n.saturating_sub(1)))
}

/// Zeroes the last `⌊k·N⌋` channels.
pub fn tail_drop(z: &Latent, k: f64) -> Result<Latent> {
    let keep = keep_count(z.channels(), k)?;
    let mut out = z.clone();
    for c in keep..z.channels() {
        out.channel_mut(c).fill(0.0);
    }
    Ok(out)
}

/// Pads a `c`-channel prefix with zero channels up to `n`.
pub fn zero_fill(prefix: &Latent, n: usize) -> Result<Latent> {
    let c = prefix.channels();
    if c == 0 {
        return Err(Error::EmptyPrefix);
    }
    if c > n {
        return Err(contract(format!("prefix has {c} channels, target only {n}")));
    }
    let (h, w) = (prefix.height(), prefix.width());
    let mut data = prefix.tensor.data().to_vec();
    data.resize(n * h * w, 0.0);
    Ok(Latent {
        tensor: Tensor::new(Shape::new(1, n, h, w), data)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_latent(n: usize, seed: u64) -> Latent {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Latent::new(Tensor::uniform(Shape::new(1, n, 3, 4), -2.0, 2.0, &mut rng)).unwrap()
    }

    fn zeroed(z: &Latent) -> Vec<bool> {
        (0..z.channels()).map(|c| z.channel(c).iter().all(|v| *v == 0.0)).collect()
    }

    #[test]
    fn half_drop_zeroes_upper_six() {
        let z = random_latent(12, 1);
        let d = tail_drop(&z, 0.5).unwrap();
        let zs = zeroed(&d);
        assert!(zs[..6].iter().all(|b| !b));
        assert!(zs[6..].iter().all(|b| *b));
        for c in 0..6 {
            assert_eq!(d.channel(c), z.channel(c));
        }
    }

    #[test]
    fn zero_fraction_is_identity() {
        let z = random_latent(12, 2);
        assert_eq!(tail_drop(&z, 0.0).unwrap(), z);
    }

    #[test]
    fn near_one_keeps_only_first_channel() {
        let z = random_latent(12, 3);
        let zs = zeroed(&tail_drop(&z, 0.99).unwrap());
        assert!(!zs[0]);
        assert!(zs[1..].iter().all(|b| *b));
        assert_eq!(keep_count(12, 0.99).unwrap(), 1);
    }

    #[test]
    fn out_of_range_fraction_rejected() {
        let z = random_latent(4, 4);
        assert!(tail_drop(&z, 1.0).is_err());
        assert!(tail_drop(&z, -0.1).is_err());
    }

    #[test]
    fn zero_fill_cases() {
        let z = random_latent(12, 5);
        assert_eq!(zero_fill(&z, 12).unwrap(), z);
        let one = zero_fill(&z.prefix(1).unwrap(), 12).unwrap();
        let zs = zeroed(&one);
        assert!(!zs[0] && zs[1..].iter().all(|b| *b));
        let empty = Latent {
            tensor: Tensor::zeros(Shape::new(1, 0, 3, 4)),
        };
        assert!(matches!(zero_fill(&empty, 12), Err(Error::EmptyPrefix)));
    }

    #[test]
    fn zero_fill_of_prefix_equals_tail_drop() {
        let n = 12;
        let z = random_latent(n, 6);
        for c in 1..=n {
            // Any k with n − ⌊k·n⌋ = c.
            let k = (n - c) as f64 / n as f64;
            assert_eq!(keep_count(n, k).unwrap(), c);
            let dropped = tail_drop(&z, k).unwrap();
            assert_eq!(zero_fill(&dropped.prefix(c).unwrap(), n).unwrap(), dropped);
        }
    }

    #[test]
    fn drop_fraction_sampling() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..100).map(|_| sample_drop_fraction(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let k = sample_drop_fraction(&mut rng);
            assert!((0.0..1.0).contains(&k));
            sum += k;
        }
        assert!((sum / n as f64 - 0.5).abs() < 0.01);
    }
}
