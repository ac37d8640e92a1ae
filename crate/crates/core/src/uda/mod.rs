//! Unsupervised adaptation by mean-teacher self-training: an EMA teacher
//! produces confidence-thresholded pseudo-labels on unlabeled target images
//! and the student minimizes source cross-entropy plus the weighted
//! pseudo-label loss.

use serde::{Deserialize, Serialize};

use crate::data::{images_to_tensor, DomainDataset, Mask, RgbImage, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::segmenter::{
    augment, ce_loss, ce_loss_weighted, photometric, AdamW, AdamWConfig, AugmentConfig, BackwardScope, BatchSampler,
    Mode, ParamSet, PhotometricConfig, PolySchedule, Provenance, Segmenter, SegmenterCheckpoint, StageHook, StageKind,
};
use crate::source_prep::{apply_sp_to_batch, random_blur, MixStyleHook, SpConfig, SpPlan};
use crate::tensor::Tensor4;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SELF_TRAINING: &str = "self_training";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UdaConfig {
    /// Registered adapter name.
    pub method: String,
    pub ema_momentum: f64,
    pub pseudo_threshold: f64,
    pub target_loss_weight: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub crop: Option<[usize; 2]>,
    pub schedule: PolySchedule,
    pub optimizer: AdamWConfig,
    /// Source preparation kept active on the student's source pass.
    pub sp_during_uda: SpConfig,
    /// Augmentation of the labeled source batch.
    pub source_augment: AugmentConfig,
    /// Photometric perturbation of the student's target view. The teacher
    /// labels the unperturbed image.
    pub target_photometric: Option<PhotometricConfig>,
}

impl Default for UdaConfig {
    fn default() -> Self {
        Self {
            method: SELF_TRAINING.into(),
            ema_momentum: 0.999,
            pseudo_threshold: 0.968,
            target_loss_weight: 1.0,
            iterations: 3000,
            batch_size: 8,
            crop: None,
            schedule: PolySchedule::default(),
            optimizer: AdamWConfig::default(),
            sp_during_uda: SpConfig::default(),
            source_augment: AugmentConfig::none(),
            target_photometric: None,
        }
    }
}

impl UdaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!("ema_momentum {} outside [0, 1)", self.ema_momentum)));
        }
        if !(self.pseudo_threshold > 0.0 && self.pseudo_threshold < 1.0) {
            return Err(Error::Config(format!(
                "pseudo_threshold {} outside (0, 1)",
                self.pseudo_threshold
            )));
        }
        if self.target_loss_weight < 0.0 {
            return Err(Error::Config("target_loss_weight must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.iterations > 0 && self.schedule.warmup_iters >= self.iterations {
            return Err(Error::Config(format!(
                "warmup_iters {} must be below iterations {}",
                self.schedule.warmup_iters, self.iterations
            )));
        }
        self.sp_during_uda.to_scheme()?;
        Ok(())
    }
}

/// `t ← m·t + (1−m)·s` for every coordinate.
pub fn ema_update_in_place(teacher: &mut [f64], student: &[f64], m: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::Contract(format!(
            "teacher has {} parameters, student {}",
            teacher.len(),
            student.len()
        )));
    }
    for (t, s) in teacher.iter_mut().zip(student) {
        *t = m * *t + (1.0 - m) * s;
    }
    Ok(())
}

pub fn ema_update(teacher: &ParamSet, student: &ParamSet, m: f64) -> Result<ParamSet> {
    if !teacher.same_layout(student) {
        return Err(Error::Contract("teacher and student weight shapes differ".into()));
    }
    let mut out = teacher.clone();
    ema_update_in_place(out.data_mut(), student.data(), m)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelBatch {
    /// `B·H·W` class indices, `IGNORE_INDEX` where the teacher is unsure.
    pub labels: Vec<u8>,
    pub confidence_fraction: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

/// Per pixel: argmax class if its softmax probability is at least `tau`,
/// otherwise ignore. Ties go to the lowest class index.
pub fn make_pseudo_labels(teacher_logits: &Tensor4, tau: f64) -> PseudoLabelBatch {
    let hw = teacher_logits.plane_len();
    let c = teacher_logits.c;
    let mut labels = vec![IGNORE_INDEX; teacher_logits.n * hw];
    let mut confidence_fraction = Vec::with_capacity(teacher_logits.n);
    for n in 0..teacher_logits.n {
        let sample = teacher_logits.sample(n);
        let mut kept = 0usize;
        for px in 0..hw {
            let mut best = 0;
            let mut max = sample[px];
            for k in 1..c {
                if sample[k * hw + px] > max {
                    max = sample[k * hw + px];
                    best = k;
                }
            }
            let denom: f64 = (0..c).map(|k| (sample[k * hw + px] - max).exp()).sum();
            if 1.0 / denom >= tau {
                labels[n * hw + px] = best as u8;
                kept += 1;
            }
        }
        confidence_fraction.push(kept as f64 / hw as f64);
    }
    PseudoLabelBatch {
        labels,
        confidence_fraction,
        height: teacher_logits.h,
        width: teacher_logits.w,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UdaLosses {
    pub source: f64,
    pub target: f64,
    pub total: f64,
}

/// Loss components and the student gradient of one adaptation step.
pub struct UdaGradient {
    pub losses: UdaLosses,
    pub grads: Vec<f64>,
    pub pseudo: PseudoLabelBatch,
}

/// Computes the joint objective without updating anything.
pub fn uda_gradient(
    student: &Segmenter,
    teacher: &Segmenter,
    source_images: &Tensor4,
    source_mask: &[u8],
    target_images: &Tensor4,
    cfg: &UdaConfig,
    hook: Option<&mut dyn StageHook>,
) -> Result<UdaGradient> {
    uda_gradient_views(student, teacher, source_images, source_mask, target_images, target_images, cfg, hook)
}

/// As [`uda_gradient`], with the teacher labeling `teacher_view` and the
/// student fitting those labels on `student_view`.
#[allow(clippy::too_many_arguments)]
pub fn uda_gradient_views(
    student: &Segmenter,
    teacher: &Segmenter,
    source_images: &Tensor4,
    source_mask: &[u8],
    teacher_view: &Tensor4,
    student_view: &Tensor4,
    cfg: &UdaConfig,
    hook: Option<&mut dyn StageHook>,
) -> Result<UdaGradient> {
    if teacher_view.shape() != student_view.shape() {
        return Err(Error::Contract("teacher and student target views differ in shape".into()));
    }
    let (logits, cache) = student.forward_cached(source_images, Mode::Train, hook)?;
    let src = ce_loss(&logits, source_mask, IGNORE_INDEX);
    let mut grads = student.backward(&cache, &src.grad, BackwardScope::Full);

    let teacher_logits = teacher.forward(teacher_view, Mode::Eval, None)?;
    let pseudo = make_pseudo_labels(&teacher_logits, cfg.pseudo_threshold);
    let mut target = 0.0;
    if cfg.target_loss_weight > 0.0 {
        let (logits, cache) = student.forward_cached(student_view, Mode::Train, None)?;
        let mut tgt = ce_loss_weighted(&logits, &pseudo.labels, IGNORE_INDEX, &pseudo.confidence_fraction);
        target = tgt.value;
        tgt.grad.data.iter_mut().for_each(|g| *g *= cfg.target_loss_weight);
        let tg = student.backward(&cache, &tgt.grad, BackwardScope::Full);
        for (g, t) in grads.iter_mut().zip(&tg) {
            *g += t;
        }
    }
    Ok(UdaGradient {
        losses: UdaLosses {
            source: src.value,
            target,
            total: src.value + cfg.target_loss_weight * target,
        },
        grads,
        pseudo,
    })
}

/// One student update on a labeled source batch and an unlabeled target batch.
#[allow(clippy::too_many_arguments)]
pub fn uda_step(
    student: &mut Segmenter,
    teacher: &Segmenter,
    optim: &mut AdamW,
    source_images: &Tensor4,
    source_mask: &[u8],
    target_images: &Tensor4,
    cfg: &UdaConfig,
    lr: f64,
    hook: Option<&mut dyn StageHook>,
) -> Result<UdaLosses> {
    let step = uda_gradient(student, teacher, source_images, source_mask, target_images, cfg, hook)?;
    optim.step(student.params_mut().data_mut(), &step.grads, lr);
    Ok(step.losses)
}

#[derive(Clone, Debug)]
pub struct UdaOutcome {
    pub checkpoint: SegmenterCheckpoint,
    pub losses: Vec<UdaLosses>,
    /// Times a style-mixing hook actually fired.
    pub hook_invocations: usize,
}

fn gather_batch(
    ds: &DomainDataset,
    idx: &[usize],
    crop: Option<[usize; 2]>,
    rng: &mut ChaCha8Rng,
    with_masks: bool,
) -> Result<(Vec<RgbImage>, Vec<Mask>)> {
    let mut images = Vec::with_capacity(idx.len());
    let mut masks = Vec::new();
    for &i in idx {
        let s = &ds.samples()[i];
        let mask = if with_masks { s.mask.as_ref() } else { None };
        let (img, mask) = match crop {
            Some(size) => crate::segmenter::random_crop(&s.image, mask, size, rng)?,
            None => (s.image.clone(), mask.cloned()),
        };
        masks.extend(mask);
        images.push(img);
    }
    Ok((images, masks))
}

/// Adapts `start` to the target domain. Target masks are stripped before use.
pub fn run_self_training(
    source: &DomainDataset,
    target: &DomainDataset,
    start: &SegmenterCheckpoint,
    cfg: &UdaConfig,
    seed: u64,
) -> Result<UdaOutcome> {
    cfg.validate()?;
    let scheme = cfg.sp_during_uda.to_scheme()?;
    let record = |note: Option<String>| Provenance {
        stage: StageKind::Uda,
        label: cfg.method.clone(),
        config: serde_json::json!(cfg),
        seed,
        note,
    };
    let mut student = start.to_model()?;
    if cfg.iterations == 0 {
        return Ok(UdaOutcome {
            checkpoint: start.extended(&student, record(Some("no-op: zero iterations".into()))),
            losses: Vec::new(),
            hook_invocations: 0,
        });
    }
    if source.is_empty() || target.is_empty() {
        return Err(Error::Contract("adaptation needs non-empty source and target sets".into()));
    }
    if let Some(s) = source.samples().iter().find(|s| s.mask.is_none()) {
        return Err(Error::Contract(format!("source sample `{}` has no label", s.id)));
    }
    scheme.validate(Some(student.config().num_stages))?;
    let plan: SpPlan = apply_sp_to_batch(&scheme)?;
    let target = target.without_labels();

    let mut teacher = student.clone();
    let mut optim = AdamW::new(cfg.optimizer.clone(), student.num_parameters());
    let mut src_sampler = BatchSampler::new(source.len(), seed);
    let mut tgt_sampler = BatchSampler::new(target.len(), seed ^ 0x7A46_0001);
    let mut crop_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7A46_0002);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7A46_0003);
    let mut hook = plan.mixstyle.clone().map(|c| MixStyleHook::new(c, seed ^ 0x7A46_0004));
    let mut src_aug_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7A46_0005);
    let mut tgt_aug_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7A46_0006);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let idx = src_sampler.next_batch(cfg.batch_size);
        let (mut src_images, mut src_masks) = gather_batch(source, &idx, cfg.crop, &mut crop_rng, true)?;
        if !cfg.source_augment.is_identity() {
            for (img, m) in src_images.iter_mut().zip(&mut src_masks) {
                augment(img, m, &cfg.source_augment, &mut src_aug_rng);
            }
        }
        let src_mask: Vec<u8> = src_masks.iter().flat_map(|m| m.data.iter().copied()).collect();
        if let Some(b) = plan.blur() {
            for img in &mut src_images {
                *img = random_blur(img, b, &mut aug_rng);
            }
        }
        let idx = tgt_sampler.next_batch(cfg.batch_size);
        let (tgt_images, _) = gather_batch(&target, &idx, cfg.crop, &mut crop_rng, false)?;
        let src = images_to_tensor(&src_images.iter().collect::<Vec<_>>());
        let tgt = images_to_tensor(&tgt_images.iter().collect::<Vec<_>>());
        let student_tgt = match &cfg.target_photometric {
            Some(p) => {
                let mut views = tgt_images.clone();
                for img in &mut views {
                    photometric(img, p, &mut tgt_aug_rng);
                }
                images_to_tensor(&views.iter().collect::<Vec<_>>())
            }
            None => tgt.clone(),
        };
        let lr = cfg.schedule.lr(iter, cfg.iterations);
        let step = uda_gradient_views(
            &student,
            &teacher,
            &src,
            &src_mask,
            &tgt,
            &student_tgt,
            cfg,
            hook.as_mut().map(|h| h as &mut dyn StageHook),
        )?;
        optim.step(student.params_mut().data_mut(), &step.grads, lr);
        let step = step.losses;
        ema_update_in_place(teacher.params_mut().data_mut(), student.params().data(), cfg.ema_momentum)?;
        losses.push(step);
    }
    Ok(UdaOutcome {
        checkpoint: start.extended(&student, record(None)),
        losses,
        hook_invocations: hook.map(|h| h.invocations()).unwrap_or(0),
    })
}

/// A named unsupervised adaptation method.
pub trait UdaAdapter {
    fn name(&self) -> &'static str;
    fn adapt(
        &self,
        source: &DomainDataset,
        target: &DomainDataset,
        start: &SegmenterCheckpoint,
        cfg: &UdaConfig,
        seed: u64,
    ) -> Result<UdaOutcome>;
}

pub struct SelfTraining;

impl UdaAdapter for SelfTraining {
    fn name(&self) -> &'static str {
        SELF_TRAINING
    }

    fn adapt(
        &self,
        source: &DomainDataset,
        target: &DomainDataset,
        start: &SegmenterCheckpoint,
        cfg: &UdaConfig,
        seed: u64,
    ) -> Result<UdaOutcome> {
        run_self_training(source, target, start, cfg, seed)
    }
}

pub fn registered_adapters() -> Vec<&'static str> {
    vec![SELF_TRAINING]
}

pub fn adapter(name: &str) -> Result<Box<dyn UdaAdapter>> {
    match name {
        SELF_TRAINING => Ok(Box::new(SelfTraining)),
        other => Err(Error::Config(format!(
            "unknown uda method `{other}`; registered: {}",
            registered_adapters().join(", ")
        ))),
    }
}

/// Runs the adapter named by `cfg.method`.
pub fn run_uda(
    source: &DomainDataset,
    target: &DomainDataset,
    start: &SegmenterCheckpoint,
    cfg: &UdaConfig,
    seed: u64,
) -> Result<UdaOutcome> {
    adapter(&cfg.method)?.adapt(source, target, start, cfg, seed)
}
