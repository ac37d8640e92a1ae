//! Fixtures shared by the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segadapt_core::data::{generate_scene, images_to_tensor, ClassSpec, ImageSample};
use segadapt_core::pipeline::RunConfig;
use segadapt_core::segmenter::{Segmenter, SegmenterConfig};
use segadapt_core::tensor::Tensor4;

/// Model used by the synthetic benchmark preset.
pub fn benchmark_model() -> Segmenter {
    Segmenter::new(RunConfig::synthetic_benchmark().model, 0).unwrap()
}

pub fn tiny_model() -> Segmenter {
    Segmenter::new(SegmenterConfig::tiny(3), 0).unwrap()
}

pub fn scenes(n: usize, side: usize) -> Vec<ImageSample> {
    let classes = ClassSpec::default_classes();
    (0..n as u64).map(|s| generate_scene(s, (side, side), &classes).unwrap()).collect()
}

pub fn batch(n: usize, side: usize) -> (Tensor4, Vec<u8>) {
    let samples = scenes(n, side);
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let masks = samples.iter().flat_map(|s| s.mask.as_ref().unwrap().data.clone()).collect();
    (images_to_tensor(&images), masks)
}

/// Random prediction/ground-truth pair with about 5% ignore pixels.
pub fn mask_pair(len: usize, k: u8, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = (0..len).map(|_| rng.random_range(0..k)).collect();
    let gt = (0..len)
        .map(|_| if rng.random_bool(0.05) { 255 } else { rng.random_range(0..k) })
        .collect();
    (pred, gt)
}
