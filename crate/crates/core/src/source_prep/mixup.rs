use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixupMode {
    /// Train on the mixed batch only.
    Replace,
    /// Add the mixed-batch loss to the clean-batch loss.
    Regularize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixupConfig {
    pub alpha: f64,
    pub mode: MixupMode,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            mode: MixupMode::Regularize,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha > 0.0 {
            Ok(())
        } else {
            Err(Error::Config("mixup alpha must be positive".into()))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixupBatch {
    pub images: Tensor4,
    pub soft_labels: Tensor4,
    pub lam: f64,
    pub partner: Vec<usize>,
}

/// One-hot `B × C × H × W` labels; ignored pixels get an all-zero row.
pub fn one_hot(masks: &[u8], n: usize, num_classes: usize, h: usize, w: usize, ignore_index: u8) -> Tensor4 {
    assert_eq!(masks.len(), n * h * w);
    let mut t = Tensor4::zeros(n, num_classes, h, w);
    let hw = h * w;
    for b in 0..n {
        for px in 0..hw {
            let m = masks[b * hw + px];
            if m != ignore_index {
                t.data[(b * num_classes + m as usize) * hw + px] = 1.0;
            }
        }
    }
    t
}

/// Mixes each sample with `partner[b]` using a fixed weight.
///
/// A pixel ignored (all-zero label row) in either contributing partner is
/// ignored in the mix.
pub fn mixup_with(images: &Tensor4, onehot: &Tensor4, lam: f64, partner: &[usize]) -> MixupBatch {
    assert_eq!(images.n, onehot.n);
    assert_eq!(partner.len(), images.n);
    let mut mixed_images = Tensor4::zeros(images.n, images.c, images.h, images.w);
    let mut mixed_labels = Tensor4::zeros(onehot.n, onehot.c, onehot.h, onehot.w);
    let hw = onehot.plane_len();
    for b in 0..images.n {
        let p = partner[b];
        for ((o, x), y) in mixed_images
            .sample_mut(b)
            .iter_mut()
            .zip(images.sample(b))
            .zip(images.sample(p))
        {
            *o = lam * x + (1.0 - lam) * y;
        }
        for px in 0..hw {
            let mass = |s: usize| (0..onehot.c).map(|c| onehot.data[(s * onehot.c + c) * hw + px]).sum::<f64>();
            // a partner with zero weight cannot make the pixel ignored
            if (lam > 0.0 && mass(b) == 0.0) || (lam < 1.0 && mass(p) == 0.0) {
                continue;
            }
            for c in 0..onehot.c {
                let i = (b * onehot.c + c) * hw + px;
                let j = (p * onehot.c + c) * hw + px;
                mixed_labels.data[i] = lam * onehot.data[i] + (1.0 - lam) * onehot.data[j];
            }
        }
    }
    MixupBatch {
        images: mixed_images,
        soft_labels: mixed_labels,
        lam,
        partner: partner.to_vec(),
    }
}

/// Draws `λ ~ Beta(α, α)` and a random partner permutation. A batch of one
/// sample is returned unchanged with `λ = 1`.
pub fn mixup_batch(images: &Tensor4, onehot: &Tensor4, cfg: &MixupConfig, rng: &mut impl Rng) -> MixupBatch {
    if images.n < 2 {
        return MixupBatch {
            images: images.clone(),
            soft_labels: onehot.clone(),
            lam: 1.0,
            partner: (0..images.n).collect(),
        };
    }
    let lam = Beta::new(cfg.alpha, cfg.alpha).expect("alpha validated positive").sample(rng);
    let mut partner: Vec<usize> = (0..images.n).collect();
    partner.shuffle(rng);
    mixup_with(images, onehot, lam, &partner)
}
