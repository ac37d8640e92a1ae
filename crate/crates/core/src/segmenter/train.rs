use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentConfig};
use super::checkpoint::{Provenance, SegmenterCheckpoint, StageKind};
use super::loss::{ce_loss, soft_ce_loss};
use super::model::{BackwardScope, Segmenter};
use super::optim::{AdamW, AdamWConfig};
use super::schedule::PolySchedule;
use super::{Mode, SegmenterConfig, StageHook};
use crate::data::{images_to_tensor, DomainDataset, ImageSample, Mask, RgbImage, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::source_prep::{apply_sp_to_batch, mixup_batch, one_hot, random_blur, MixStyleHook, MixupMode, SpPlan, SpScheme};
use crate::tensor::Tensor4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Random `[height, width]` crop taken from each sample; full frames when unset.
    pub crop: Option<[usize; 2]>,
    pub augment: AugmentConfig,
    pub schedule: PolySchedule,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 8,
            crop: None,
            augment: AugmentConfig::default(),
            schedule: PolySchedule::default(),
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.iterations > 0 && self.schedule.warmup_iters >= self.iterations {
            return Err(Error::Config(format!(
                "warmup_iters {} must be below iterations {}",
                self.schedule.warmup_iters, self.iterations
            )));
        }
        if self.schedule.base_lr < 0.0 {
            return Err(Error::Config("base_lr must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: SegmenterCheckpoint,
    /// Total loss at every iteration.
    pub losses: Vec<f64>,
}

/// Stacks labeled samples into an image tensor and a flat `B·H·W` mask.
pub fn images_to_batch(samples: &[&ImageSample]) -> Result<(Tensor4, Vec<u8>)> {
    let mut masks = Vec::new();
    for s in samples {
        let mask = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("sample `{}` has no label", s.id)))?;
        masks.extend_from_slice(&mask.data);
    }
    let images: Vec<&RgbImage> = samples.iter().map(|s| &s.image).collect();
    Ok((images_to_tensor(&images), masks))
}

/// Endless reshuffled pass over `0..len`.
pub(crate) struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub(crate) fn new(len: usize, seed: u64) -> Self {
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..len).collect(),
            pos: len,
        };
        s.pos = s.order.len();
        s
    }

    pub(crate) fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

pub(crate) fn random_crop(image: &RgbImage, mask: Option<&Mask>, size: [usize; 2], rng: &mut impl Rng) -> Result<(RgbImage, Option<Mask>)> {
    let [ch, cw] = size;
    if ch > image.height || cw > image.width {
        return Err(Error::Contract(format!(
            "crop {ch}x{cw} exceeds image {}x{}",
            image.height, image.width
        )));
    }
    let y0 = rng.random_range(0..=image.height - ch);
    let x0 = rng.random_range(0..=image.width - cw);
    let mut out = RgbImage::filled(ch, cw, 0.0);
    for y in 0..ch {
        let src = ((y0 + y) * image.width + x0) * 3;
        out.data[y * cw * 3..(y + 1) * cw * 3].copy_from_slice(&image.data[src..src + cw * 3]);
    }
    let mask = mask.map(|m| {
        let mut data = Vec::with_capacity(ch * cw);
        for y in 0..ch {
            let src = (y0 + y) * m.width + x0;
            data.extend_from_slice(&m.data[src..src + cw]);
        }
        Mask::from_vec(ch, cw, data)
    });
    Ok((out, mask))
}

/// Updates `model` in place on labeled samples of `ds` and returns the
/// per-iteration losses. Used for source training and for alignment.
pub fn fit(
    model: &mut Segmenter,
    ds: &DomainDataset,
    cfg: &TrainConfig,
    plan: &SpPlan,
    scope: BackwardScope,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if let Some(s) = ds.samples().iter().find(|s| s.mask.is_none()) {
        return Err(Error::Contract(format!("sample `{}` has no label", s.id)));
    }
    if let Some(ms) = &plan.mixstyle {
        ms.validate(Some(model.config().num_stages))?;
    }
    let mut sampler = BatchSampler::new(ds.len(), seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_0001);
    let mut crop_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_0002);
    let mut geo_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_0004);
    let mut hook = plan.mixstyle.clone().map(|c| MixStyleHook::new(c, seed ^ 0xA5A5_0003));
    let mut optim = AdamW::new(cfg.optimizer.clone(), model.num_parameters());
    if scope == BackwardScope::HeadOnly {
        optim = optim.with_trainable(model.params().ranges_with_prefix(super::HEAD_PREFIX));
    }
    let num_classes = model.num_classes();
    let mut losses = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let idx = sampler.next_batch(cfg.batch_size);
        let mut images = Vec::with_capacity(idx.len());
        let mut masks = Vec::new();
        for &i in &idx {
            let s = &ds.samples()[i];
            let (mut img, mask) = match cfg.crop {
                Some(size) => random_crop(&s.image, s.mask.as_ref(), size, &mut crop_rng)?,
                None => (s.image.clone(), s.mask.clone()),
            };
            let mut mask = mask.expect("checked labeled");
            augment(&mut img, &mut mask, &cfg.augment, &mut geo_rng);
            if let Some(b) = plan.blur() {
                img = random_blur(&img, b, &mut aug_rng);
            }
            masks.extend_from_slice(&mask.data);
            images.push(img);
        }
        let refs: Vec<&RgbImage> = images.iter().collect();
        let batch = images_to_tensor(&refs);

        let mut total = 0.0;
        let mut grads = vec![0.0; model.num_parameters()];
        let mixup = plan.mixup();
        let clean_pass = !matches!(mixup, Some(m) if m.mode == MixupMode::Replace);
        if clean_pass {
            let (logits, cache) = model.forward_cached(&batch, Mode::Train, hook.as_mut().map(|h| h as &mut dyn StageHook))?;
            let lg = ce_loss(&logits, &masks, IGNORE_INDEX);
            total += lg.value;
            add_into(&mut grads, &model.backward(&cache, &lg.grad, scope));
        }
        if let Some(m) = mixup {
            let onehot = one_hot(&masks, batch.n, num_classes, batch.h, batch.w, IGNORE_INDEX);
            let mixed = mixup_batch(&batch, &onehot, m, &mut aug_rng);
            let (logits, cache) = model.forward_cached(&mixed.images, Mode::Train, hook.as_mut().map(|h| h as &mut dyn StageHook))?;
            let lg = soft_ce_loss(&logits, &mixed.soft_labels);
            total += lg.value;
            add_into(&mut grads, &model.backward(&cache, &lg.grad, scope));
        }
        let lr = cfg.schedule.lr(iter, cfg.iterations);
        optim.step(model.params_mut().data_mut(), &grads, lr);
        losses.push(total);
    }
    Ok(losses)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Trains a freshly initialized segmenter on a fully labeled source set with
/// the given preparation scheme; `SpScheme::None` gives the plain baseline.
pub fn train_supervised(
    ds: &DomainDataset,
    model_cfg: &SegmenterConfig,
    cfg: &TrainConfig,
    scheme: &SpScheme,
    seed: u64,
) -> Result<TrainOutcome> {
    if ds.num_classes() != model_cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model {}",
            ds.num_classes(),
            model_cfg.num_classes
        )));
    }
    scheme.validate(Some(model_cfg.num_stages))?;
    let plan = apply_sp_to_batch(scheme)?;
    let mut model = Segmenter::new(model_cfg.clone(), seed)?;
    let losses = fit(&mut model, ds, cfg, &plan, BackwardScope::Full, seed)?;
    let record = Provenance {
        stage: StageKind::Sp,
        label: scheme.name(),
        config: serde_json::json!({ "scheme": scheme, "train": cfg }),
        seed,
        note: None,
    };
    Ok(TrainOutcome {
        checkpoint: SegmenterCheckpoint::from_model(&model, vec![record]),
        losses,
    })
}
