#![allow(dead_code)]

use hpk_core::geometry::{prepare, KnnGraph, PointCloud};
use hpk_core::model::{Batch, ModelConfig, ModelState};
use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(num_latent: usize, num_top: usize) -> ModelConfig {
    ModelConfig {
        num_top_classes: num_top,
        num_latent_classes: num_latent,
        encoder_widths: vec![5, 6],
        decoder_width: 4,
        decoder_head_widths: vec![5],
        k_nn: 3,
        ..ModelConfig::default()
    }
}

pub fn random_cloud(rng: &mut ChaCha8Rng, m: usize) -> PointCloud {
    let u = Uniform::new(-1.0, 1.0);
    PointCloud::new((0..m).map(|_| [u.sample(rng), u.sample(rng), u.sample(rng)]).collect()).unwrap()
}

/// A small random model with a prepared random cloud and random labels.
/// Parameters are perturbed away from the initializer so no block starts
/// at exactly zero.
pub fn tiny_instance(seed: u64, m: usize, num_latent: usize, num_top: usize) -> (ModelState, Batch, Vec<usize>) {
    let (state, cloud, graph, labels) = tiny_parts(seed, m, num_latent, num_top);
    (state, Batch::single(&cloud, &graph).unwrap(), labels)
}

pub fn tiny_parts(
    seed: u64,
    m: usize,
    num_latent: usize,
    num_top: usize,
) -> (ModelState, PointCloud, KnnGraph, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ModelState::init(tiny_config(num_latent, num_top), seed).unwrap();
    let jitter = Uniform::new(-0.5, 0.5);
    for p in state.store.params_mut() {
        for v in p.value.data_mut() {
            *v += jitter.sample(&mut rng);
        }
    }
    let cloud = random_cloud(&mut rng, m);
    let (cloud, _, graph) = prepare(&cloud, 3.min(m - 1)).unwrap();
    let labels = (0..m).map(|_| rng.gen_range(0..num_top)).collect();
    (state, cloud, graph, labels)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}
