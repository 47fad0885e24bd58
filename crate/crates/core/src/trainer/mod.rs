//! Stochastic tail-dropout training.
//!
//! Each step draws a batch of preprocessed crops, encodes them, adds uniform
//! noise one quantization step wide per latent channel, zeroes a random
//! number of trailing channels per item, decodes, and takes an Adam step on
//! `1 − MS-SSIM`. The quantization step per channel is a running
//! (exponential moving average) estimate of the 5-bit step over recent
//! latents.

pub mod checkpoint;
pub mod data;
pub mod eval;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph};
use crate::error::{contract, Error, Result};
use crate::model::blocks::Bound;
use crate::model::{keep_count, keep_mask, latent_noise, sample_drop_fraction, Codec, ModelConfig, DOWNSAMPLE};
use crate::msssim::feasible_scales;
use crate::ppm::{write_ppm, RgbImage};
use crate::quant::LATENT_BITS;
use crate::tensor::Tensor;

pub use checkpoint::{Checkpoint, RngState};
pub use data::{load_eval_frames, preprocess, Dataset};
pub use eval::{channel_importance, eval_progressive, ChannelImportance, ProgressiveRow};

/// Decay of the running latent range.
pub const RANGE_DECAY: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_final: f64,
    /// First iteration trained at `lr_final`.
    pub lr_drop_at: u64,
    pub crop_size: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub desk_scale: bool,
}

impl TrainConfig {
    pub fn full_scale() -> Self {
        TrainConfig {
            iterations: 1_000_000,
            batch_size: 16,
            lr: 1e-4,
            lr_final: 1e-5,
            lr_drop_at: 950_000,
            crop_size: 224,
            seed: 0,
            checkpoint_every: 10_000,
            desk_scale: false,
        }
    }

    pub fn desk_scale() -> Self {
        TrainConfig {
            iterations: 20_000,
            batch_size: 8,
            lr: 1e-3,
            lr_final: 1e-4,
            lr_drop_at: 19_000,
            crop_size: 48,
            seed: 0,
            checkpoint_every: 2_000,
            desk_scale: true,
        }
    }

    /// Longer image side after the preprocessing downsample.
    pub fn resize_side(&self) -> usize {
        if self.desk_scale {
            64
        } else {
            256
        }
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        if iteration >= self.lr_drop_at {
            self.lr_final
        } else {
            self.lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr_final > 0.0 && self.lr_final <= self.lr) {
            return Err(contract(format!("need 0 < lr_final <= lr, got {} and {}", self.lr_final, self.lr)));
        }
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(DOWNSAMPLE) {
            return Err(contract(format!("crop size {} must be a positive multiple of 8", self.crop_size)));
        }
        if self.crop_size > self.resize_side() {
            return Err(contract(format!(
                "crop size {} exceeds the resized side {}",
                self.crop_size,
                self.resize_side()
            )));
        }
        if feasible_scales(self.crop_size, self.crop_size).is_none() {
            return Err(contract(format!("crop size {} is too small for MS-SSIM", self.crop_size)));
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(contract("batch size and checkpoint interval must be positive"));
        }
        Ok(())
    }
}

/// Summary handed to the interval callback of [`Trainer::run`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalStats {
    pub iteration: u64,
    pub mean_loss: f64,
    pub lr: f64,
}

pub struct Trainer {
    codec: Codec,
    config: TrainConfig,
    adam: AdamState,
    iteration: u64,
    rng: ChaCha8Rng,
    latent_ranges: Option<Vec<f64>>,
    dataset: Dataset,
    scales: usize,
    dump_dir: Option<PathBuf>,
}

impl Trainer {
    /// Starts from a model initialised with the config's seed.
    pub fn new(config: TrainConfig, model: ModelConfig, dataset: Dataset) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let codec = Codec::new(model, &mut rng)?;
        let adam = AdamState::new(&codec.params);
        Self::assemble(codec, config, adam, 0, rng, None, dataset)
    }

    /// Continues from a checkpoint. `config` replaces the stored training
    /// config when given (for example to extend the iteration count).
    pub fn resume(ck: Checkpoint, config: Option<TrainConfig>, dataset: Dataset) -> Result<Self> {
        let codec = ck.codec()?;
        let config = config
            .or(ck.train)
            .ok_or_else(|| contract("checkpoint has no training config; pass one explicitly"))?;
        config.validate()?;
        Self::assemble(codec, config, ck.adam, ck.iteration, ck.rng.restore(), ck.latent_ranges, dataset)
    }

    fn assemble(
        codec: Codec,
        config: TrainConfig,
        adam: AdamState,
        iteration: u64,
        rng: ChaCha8Rng,
        latent_ranges: Option<Vec<f64>>,
        dataset: Dataset,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset(dataset.dir.clone()));
        }
        let scales = feasible_scales(config.crop_size, config.crop_size).expect("validated crop size");
        Ok(Trainer {
            codec,
            config,
            adam,
            iteration,
            rng,
            latent_ranges,
            dataset,
            scales,
            dump_dir: None,
        })
    }

    /// Where the batch is written as PPMs if a step produces a non-finite loss.
    pub fn set_dump_dir(&mut self, dir: impl Into<PathBuf>) {
        self.dump_dir = Some(dir.into());
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn latent_ranges(&self) -> Option<&[f64]> {
        self.latent_ranges.as_deref()
    }

    /// Per-channel noise width: running range over the number of 5-bit steps.
    pub fn quant_steps(&self) -> Vec<f64> {
        let levels = ((1u32 << LATENT_BITS) - 1) as f64;
        match &self.latent_ranges {
            Some(r) => r.iter().map(|v| v / levels).collect(),
            None => vec![0.0; self.codec.num_channels()],
        }
    }

    fn observe_ranges(&mut self, z: &Tensor) {
        let [n, c, _, _] = z.shape().0;
        let batch: Vec<f64> = (0..c)
            .map(|ch| {
                (0..n)
                    .map(|item| {
                        let plane = z.plane(item, ch);
                        let lo = plane.iter().copied().fold(0.0f64, f64::min);
                        let hi = plane.iter().copied().fold(0.0f64, f64::max);
                        hi - lo
                    })
                    .sum::<f64>()
                    / n as f64
            })
            .collect();
        self.latent_ranges = Some(match self.latent_ranges.take() {
            None => batch,
            Some(r) => r
                .iter()
                .zip(&batch)
                .map(|(old, new)| RANGE_DECAY * old + (1.0 - RANGE_DECAY) * new)
                .collect(),
        });
    }

    /// Runs one optimisation step and returns its loss.
    pub fn step(&mut self) -> Result<f64> {
        let lr = self.config.lr_at(self.iteration);
        let b = self.config.batch_size;
        let n = self.codec.num_channels();
        let mut picked = Vec::with_capacity(b);
        let mut items = Vec::with_capacity(b);
        for _ in 0..b {
            let idx = self.rng.random_range(0..self.dataset.len());
            items.push(preprocess(
                &self.dataset.images[idx],
                self.config.resize_side(),
                self.config.crop_size,
                &mut self.rng,
            )?);
            picked.push(idx);
        }
        let keep = (0..b)
            .map(|_| keep_count(n, sample_drop_fraction(&mut self.rng)))
            .collect::<Result<Vec<_>>>()?;

        let mut g = Graph::new();
        let p = Bound::all(&mut g, &self.codec.params);
        let x = g.constant(Tensor::stack(&items)?);
        let z = self.codec.encode_graph(&mut g, &p, x)?;
        let z_value = g.value(z).clone();
        self.observe_ranges(&z_value);
        let noise = latent_noise(z_value.shape(), &self.quant_steps(), &mut self.rng)?;
        let noise = g.constant(noise);
        let noisy = g.add(z, noise)?;
        let mask = g.constant(keep_mask(z_value.shape(), &keep));
        let dropped = g.mul(noisy, mask)?;
        let y = self.codec.decode_graph(&mut g, &p, dropped)?;
        let s = g.ms_ssim(x, y, self.scales)?;
        let loss = g.affine(s, -1.0, 1.0);
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(self.non_finite(value, &picked, g.value(x)));
        }
        self.codec.params.zero_grads();
        g.backward(loss, &mut self.codec.params)?;
        adam_step(&mut self.codec.params, &mut self.adam, lr, AdamConfig::default())?;
        self.iteration += 1;
        Ok(value)
    }

    fn non_finite(&self, value: f64, picked: &[usize], batch: &Tensor) -> Error {
        let names: Vec<String> = picked.iter().map(|&i| self.dataset.paths[i].display().to_string()).collect();
        let mut detail = format!("loss {value}; batch drawn from {}", names.join(", "));
        if let Some(dir) = &self.dump_dir {
            let written = std::fs::create_dir_all(dir).map_err(Error::from).and_then(|_| {
                for i in 0..picked.len() {
                    let path = dir.join(format!("nonfinite-{}-{i}.ppm", self.iteration));
                    write_ppm(&path, &RgbImage::from_tensor(batch, i)?)?;
                }
                Ok(())
            });
            match written {
                Ok(()) => detail.push_str(&format!("; crops written to {}", dir.display())),
                Err(e) => detail.push_str(&format!("; dumping crops failed: {e}")),
            }
        }
        Error::NonFiniteLoss {
            iteration: self.iteration,
            detail,
        }
    }

    /// Trains until `config.iterations`, calling `on_interval` every
    /// `checkpoint_every` steps and after the last one.
    pub fn run(&mut self, mut on_interval: impl FnMut(&Trainer, IntervalStats) -> Result<()>) -> Result<()> {
        let mut sum = 0.0;
        let mut count = 0u64;
        while self.iteration < self.config.iterations {
            let lr = self.config.lr_at(self.iteration);
            sum += self.step()?;
            count += 1;
            if self.iteration.is_multiple_of(100) {
                log::info!("iteration {} mean loss {:.5}", self.iteration, sum / count as f64);
            }
            if self.iteration.is_multiple_of(self.config.checkpoint_every) || self.iteration == self.config.iterations {
                let stats = IntervalStats {
                    iteration: self.iteration,
                    mean_loss: sum / count as f64,
                    lr,
                };
                on_interval(self, stats)?;
                sum = 0.0;
                count = 0;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.codec.config.clone(),
            train: Some(self.config.clone()),
            iteration: self.iteration,
            params: self.codec.params.clone(),
            adam: self.adam.clone(),
            rng: RngState::capture(&self.rng),
            latent_ranges: self.latent_ranges.clone(),
        }
    }
}

/// Loads `dataset_dir`, trains from scratch and returns the final checkpoint.
pub fn train(config: &TrainConfig, model: &ModelConfig, dataset_dir: &Path) -> Result<Checkpoint> {
    config.validate()?;
    let dataset = Dataset::load(dataset_dir, config.resize_side(), config.crop_size)?;
    let mut trainer = Trainer::new(config.clone(), model.clone(), dataset)?;
    trainer.run(|_, _| Ok(()))?;
    Ok(trainer.checkpoint())
}
