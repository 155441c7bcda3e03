//! Procedural four-class image set and a plain SGD loop for the toy backbone.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, Module, ParamKind};
use crate::tensor::Tensor;

pub const CLASSES: [&str; 4] = ["stripes", "checker", "blob", "gradient"];

/// Seeded images [N,3,S,S] with labels cycling through the four classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub size: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl ToyDataset {
    pub fn generate(n: usize, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).expect("valid std");
        let plane = size * size;
        let mut images = Vec::with_capacity(n * 3 * plane);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % CLASSES.len();
            let pattern = pattern(label, size, &mut rng);
            let colors: [(f64, f64); 3] = std::array::from_fn(|_| (rng.gen_range(-1.0..0.0), rng.gen_range(0.0..1.0)));
            for (lo, hi) in colors {
                images.extend(pattern.iter().map(|&p| lo + (hi - lo) * p + noise.sample(&mut rng)));
            }
            labels.push(label);
        }
        ToyDataset { size, images, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = 3 * self.size * self.size;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images[i * per..(i + 1) * per]);
        }
        let x = Tensor::from_vec(data, &[indices.len(), 3, self.size, self.size])?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Intensity pattern in [0,1] for one class.
fn pattern(label: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = size as f64;
    let coords = (0..size * size).map(|i| ((i / size) as f64, (i % size) as f64));
    match label {
        0 => {
            let period = rng.gen_range(3.0..8.0);
            let phase = rng.gen_range(0.0..period);
            let vertical = rng.gen_bool(0.5);
            coords
                .map(|(y, x)| {
                    let t = if vertical { x } else { y };
                    if (t + phase) % period < period / 2.0 { 1.0 } else { 0.0 }
                })
                .collect()
        }
        1 => {
            let cell = rng.gen_range(2..6) as f64;
            let (oy, ox) = (rng.gen_range(0.0..cell), rng.gen_range(0.0..cell));
            coords
                .map(|(y, x)| (((y + oy) / cell).floor() + ((x + ox) / cell).floor()) as i64 % 2)
                .map(|v| v as f64)
                .collect()
        }
        2 => {
            let (cy, cx) = (rng.gen_range(0.25 * s..0.75 * s), rng.gen_range(0.25 * s..0.75 * s));
            let r = rng.gen_range(0.1 * s..0.25 * s);
            coords
                .map(|(y, x)| (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * r * r)).exp())
                .collect()
        }
        _ => {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let (dy, dx) = (angle.sin(), angle.cos());
            let half = s / 2.0;
            coords
                .map(|(y, x)| 0.5 + ((y - half) * dy + (x - half) * dx) / s)
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub dataset_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            lr: 0.05,
            batch_size: 16,
            dataset_size: 256,
            seed: 0,
        }
    }
}

/// One SGD step on every learnable tensor: θ ← θ − lr·∇θ.
pub fn sgd_step(model: &mut dyn Module, lr: f64) -> Result<()> {
    let mut failure = None;
    model.visit_mut("", &mut |name, t, kind| {
        if kind != ParamKind::Learnable || failure.is_some() {
            return;
        }
        let Some(g) = t.grad() else { return };
        let data: Vec<f64> = t.data().iter().zip(g.data().iter()).map(|(w, g)| w - lr * g).collect();
        match Tensor::param(data, t.shape()) {
            Ok(p) => *t = p,
            Err(e) => failure = Some(Error::config(format!("{name}: {e}"))),
        }
    });
    failure.map_or(Ok(()), Err)
}

/// Trains a freshly built model; returns it with the per-step losses.
pub fn train_toy(config: &BackboneConfig, tc: &TrainConfig) -> Result<(Backbone, Vec<f64>)> {
    if tc.steps == 0 || tc.batch_size == 0 {
        return Err(Error::config("steps and batch size must be at least 1"));
    }
    let data = ToyDataset::generate(tc.dataset_size.max(tc.batch_size), config.resolution, tc.seed);
    let mut model = Backbone::build(config, tc.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        if cursor + tc.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let (x, y) = data.batch(&order[cursor..cursor + tc.batch_size])?;
        cursor += tc.batch_size;
        let ctx = ForwardCtx::train(tc.seed.wrapping_mul(1_000_003).wrapping_add(step as u64));
        let loss = model.classify(&x, &ctx)?.cross_entropy(&y)?;
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        loss.backward()?;
        sgd_step(&mut model, tc.lr)?;
        log::debug!("step {step} loss {value:.6}");
        losses.push(value);
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_seeded_and_balanced() {
        let a = ToyDataset::generate(64, 32, 3);
        assert_eq!(a, ToyDataset::generate(64, 32, 3));
        assert_ne!(a.images, ToyDataset::generate(64, 32, 4).images);
        assert_eq!(a.class_counts(), [16; 4]);
        assert_eq!(a.images.len(), 64 * 3 * 32 * 32);
        let (x, y) = a.batch(&[0, 5]).unwrap();
        assert_eq!(x.shape(), &[2, 3, 32, 32]);
        assert_eq!(y, vec![0, 1]);
    }

    #[test]
    fn sgd_moves_against_the_gradient() {
        let mut lin = crate::nn::Linear::new(2, 1, &mut crate::nn::Initializer::new(0));
        let before = lin.weight.to_vec();
        let x = Tensor::from_vec(vec![1.0, 2.0], &[1, 2]).unwrap();
        lin.forward(&x).unwrap().sum().unwrap().backward().unwrap();
        sgd_step(&mut lin, 0.5).unwrap();
        assert_eq!(lin.weight.to_vec(), vec![before[0] - 0.5, before[1] - 1.0]);
        assert!(lin.weight.requires_grad_flag());
    }

    #[test]
    fn zero_steps_rejected() {
        let tc = TrainConfig { steps: 0, ..Default::default() };
        assert!(matches!(train_toy(&BackboneConfig::toy(), &tc), Err(Error::Config(_))));
    }
}
