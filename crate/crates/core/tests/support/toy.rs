use rand::Rng;
use sslab::data::Standardizer;
use sslab::model::{build_encoder, EncoderConfig, ModelParams};
use sslab::rng::rng_from;
use sslab::ssl::{LabeledBatch, Method, MethodConfig, StepInputs, UnlabeledBatch};
use sslab::tensor::Tensor;

pub const SIZE: usize = 8;

pub fn encoder(residual: bool) -> EncoderConfig {
    EncoderConfig { input_channels: 1, input_size: SIZE, channel_widths: vec![3, 4], use_residual: residual, num_classes: 3 }
}

pub fn images(n: usize, seed: u64) -> Vec<Tensor<f32>> {
    let mut rng = rng_from(seed);
    (0..n)
        .map(|_| Tensor::new(vec![1, SIZE, SIZE], (0..SIZE * SIZE).map(|_| rng.random::<f32>()).collect()).unwrap())
        .collect()
}

/// Encoder with its head scaled by `head_scale` to push predictions towards confidence.
pub fn params(cfg: &EncoderConfig, seed: u64, head_scale: f64) -> ModelParams<f64> {
    let mut p = build_encoder::<f64>(cfg, seed).unwrap();
    let mut rng = rng_from(seed ^ 0xB1A5);
    let names: Vec<String> = p.tensors().iter().map(|t| t.name.clone()).collect();
    for (name, t) in names.iter().zip(p.tensors_mut()) {
        if name == "head.weight" {
            t.data_mut().iter_mut().for_each(|v| *v *= head_scale);
        } else if name.ends_with("bias") {
            // Nonzero biases so their gradients are exercised.
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
    p
}

pub struct Batch {
    pub labeled: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub unlabeled: Vec<Tensor<f32>>,
}

impl Batch {
    pub fn new(n_labeled: usize, n_unlabeled: usize, seed: u64) -> Self {
        Self {
            labeled: images(n_labeled, seed),
            labels: (0..n_labeled).map(|i| (i + seed as usize) % 3).collect(),
            unlabeled: images(n_unlabeled, seed.wrapping_add(7_777)),
        }
    }

    pub fn inputs<'a>(&'a self, student: &'a ModelParams<f64>, method: Method, seed: u64) -> StepInputs<'a, f64> {
        let labeled = LabeledBatch { images: self.labeled.iter().collect(), labels: self.labels.clone() };
        let unlabeled = UnlabeledBatch { images: self.unlabeled.iter().collect() };
        let mut inputs = StepInputs::new(student, labeled, unlabeled, MethodConfig::defaults(method), seed);
        inputs.standardizer = Standardizer { mean: 0.45, std: 0.3 };
        inputs
    }
}
