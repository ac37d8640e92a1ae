use serde::{Deserialize, Serialize};

use super::corrupt::{corrupt, CorruptionSpec};
use super::mapping::{remap_mask, ClassMapping};
use super::metrics::{accumulate_confusion, miou, AbsentClassPolicy, ClassIou, ConfusionMatrix};
use crate::data::{images_to_tensor, DomainDataset, RgbImage};
use crate::error::{Error, Result};
use crate::imageops::reflect_index;
use crate::segmenter::{Mode, Provenance, Segmenter, SegmenterCheckpoint};
use crate::tensor::Tensor4;

/// Anything that labels every pixel of an image in its own class space.
pub trait Predictor {
    fn num_classes(&self) -> usize;

    fn label(&self) -> String;

    fn provenance(&self) -> &[Provenance] {
        &[]
    }

    fn predict(&self, image: &RgbImage) -> Result<Vec<u8>>;

    fn predict_batch(&self, images: &[&RgbImage]) -> Result<Vec<Vec<u8>>> {
        images.iter().map(|im| self.predict(im)).collect()
    }
}

const EVAL_BATCH: usize = 8;

/// Eval-mode argmax of a segmenter. Inputs whose sides are not multiples of
/// the model stride are padded reflectively and predictions cropped back.
pub struct SegmenterPredictor {
    model: Segmenter,
    provenance: Vec<Provenance>,
}

impl SegmenterPredictor {
    pub fn new(model: Segmenter, provenance: Vec<Provenance>) -> Self {
        Self { model, provenance }
    }

    pub fn from_checkpoint(ckpt: &SegmenterCheckpoint) -> Result<Self> {
        Ok(Self::new(ckpt.to_model()?, ckpt.provenance().to_vec()))
    }

    pub fn model(&self) -> &Segmenter {
        &self.model
    }

    fn padded(&self, image: &RgbImage) -> RgbImage {
        let s = self.model.config().total_stride();
        let (h, w) = (image.height, image.width);
        let (ph, pw) = (h.div_ceil(s) * s, w.div_ceil(s) * s);
        if (ph, pw) == (h, w) {
            return image.clone();
        }
        let mut out = RgbImage::filled(ph, pw, 0.0);
        for y in 0..ph {
            let sy = reflect_index(y as isize, h);
            for x in 0..pw {
                let sx = reflect_index(x as isize, w);
                for c in 0..3 {
                    out.set(y, x, c, image.get(sy, sx, c));
                }
            }
        }
        out
    }
}

/// Per-pixel argmax over channels; ties resolve to the lowest index.
pub(crate) fn argmax_planes(logits: &Tensor4, n: usize, h: usize, w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..logits.c {
                let v = logits.at(n, c, y, x);
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

impl Predictor for SegmenterPredictor {
    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn label(&self) -> String {
        self.provenance
            .iter()
            .map(|p| p.label.as_str())
            .collect::<Vec<_>>()
            .join("+")
    }

    fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    fn predict(&self, image: &RgbImage) -> Result<Vec<u8>> {
        Ok(self.predict_batch(&[image])?.remove(0))
    }

    fn predict_batch(&self, images: &[&RgbImage]) -> Result<Vec<Vec<u8>>> {
        let mut out = Vec::with_capacity(images.len());
        let mut i = 0;
        while i < images.len() {
            let shape = (images[i].height, images[i].width);
            let mut j = i + 1;
            while j < images.len() && j - i < EVAL_BATCH && (images[j].height, images[j].width) == shape {
                j += 1;
            }
            let padded: Vec<RgbImage> = images[i..j].iter().map(|im| self.padded(im)).collect();
            let refs: Vec<&RgbImage> = padded.iter().collect();
            let logits = self.model.forward(&images_to_tensor(&refs), Mode::Eval, None)?;
            for n in 0..refs.len() {
                out.push(argmax_planes(&logits, n, shape.0, shape.1));
            }
            i = j;
        }
        Ok(out)
    }
}

/// Per-stage evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub label: String,
    pub provenance: Vec<Provenance>,
    pub eval_class_names: Vec<String>,
    pub selected_classes: Vec<usize>,
    pub per_class: Vec<ClassIou>,
    /// Mean IoU in `[0, 1]`.
    pub miou: f64,
    pub absent_classes: Vec<usize>,
    pub confusion: ConfusionMatrix,
    pub num_images: usize,
    /// Valid ground-truth pixels whose prediction mapped to ignore.
    pub ignored_predictions: u64,
}

impl StageReport {
    pub fn miou_points(&self) -> f64 {
        100.0 * self.miou
    }
}

pub fn evaluate_predictor(
    predictor: &dyn Predictor,
    ds: &DomainDataset,
    mapping: &ClassMapping,
    selected_classes: &[usize],
    policy: AbsentClassPolicy,
) -> Result<StageReport> {
    if mapping.num_source_classes() != predictor.num_classes() {
        return Err(Error::Config(format!(
            "mapping covers {} source classes but the model predicts {}",
            mapping.num_source_classes(),
            predictor.num_classes()
        )));
    }
    if ds.is_empty() {
        return Err(Error::Contract("evaluation dataset is empty".into()));
    }
    let k = mapping.num_eval_classes();
    let mut cm = ConfusionMatrix::new(k);
    for chunk in ds.samples().chunks(EVAL_BATCH) {
        let images: Vec<&RgbImage> = chunk.iter().map(|s| &s.image).collect();
        let preds = predictor.predict_batch(&images)?;
        for (sample, pred) in chunk.iter().zip(preds) {
            let gt = sample
                .mask
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("evaluation sample `{}` has no mask", sample.id)))?;
            accumulate_confusion(&remap_mask(&pred, mapping), &gt.data, mapping.ignore_index, &mut cm)?;
        }
    }
    let result = miou(&cm, selected_classes, policy)?;
    Ok(StageReport {
        label: predictor.label(),
        provenance: predictor.provenance().to_vec(),
        eval_class_names: mapping.eval_class_names.clone(),
        selected_classes: selected_classes.to_vec(),
        per_class: result.per_class,
        miou: result.mean,
        absent_classes: result.absent,
        ignored_predictions: cm.num_ignored_predictions(),
        confusion: cm,
        num_images: ds.len(),
    })
}

pub fn evaluate_model(
    checkpoint: &SegmenterCheckpoint,
    ds: &DomainDataset,
    mapping: &ClassMapping,
    selected_classes: &[usize],
) -> Result<StageReport> {
    let predictor = SegmenterPredictor::from_checkpoint(checkpoint)?;
    evaluate_predictor(&predictor, ds, mapping, selected_classes, AbsentClassPolicy::Exclude)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub spec: CorruptionSpec,
    pub report: StageReport,
}

fn image_seed(spec_seed: u64, index: usize) -> u64 {
    spec_seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One evaluation per spec on corrupted copies of `ds`; every image gets
/// its own seed derived from the corruption's seed and its position.
pub fn robustness_eval(
    predictor: &dyn Predictor,
    ds: &DomainDataset,
    mapping: &ClassMapping,
    selected_classes: &[usize],
    battery: &[CorruptionSpec],
) -> Result<Vec<RobustnessRow>> {
    if battery.is_empty() {
        return Err(Error::Config("robustness battery is empty".into()));
    }
    battery.iter().try_for_each(|s| s.validate())?;
    battery
        .iter()
        .map(|spec| {
            let mut index = 0;
            let mut failure = None;
            let corrupted = ds.map_samples(|s| {
                let mut out = s.clone();
                let per_image = CorruptionSpec {
                    seed: image_seed(spec.seed, index),
                    ..*spec
                };
                index += 1;
                match corrupt(&s.image, &per_image) {
                    Ok(img) => out.image = img,
                    Err(e) => failure = Some(e),
                }
                out
            });
            if let Some(e) = failure {
                return Err(e);
            }
            let report = evaluate_predictor(predictor, &corrupted, mapping, selected_classes, AbsentClassPolicy::Exclude)?;
            Ok(RobustnessRow { spec: *spec, report })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, ClassSpec, DomainTag, ImageSample, Mask, Split};
    use crate::eval::{default_battery, CorruptionKind};
    use crate::segmenter::{SegmenterConfig, StageKind};

    /// Looks up the ground truth by image content.
    struct Oracle {
        pairs: Vec<(RgbImage, Vec<u8>)>,
        k: usize,
    }

    impl Predictor for Oracle {
        fn num_classes(&self) -> usize {
            self.k
        }
        fn label(&self) -> String {
            "oracle".into()
        }
        fn predict(&self, image: &RgbImage) -> Result<Vec<u8>> {
            Ok(self
                .pairs
                .iter()
                .find(|(im, _)| im == image)
                .map(|(_, m)| m.clone())
                .unwrap_or_else(|| vec![0; image.height * image.width]))
        }
    }

    struct Constant(u8, usize);

    impl Predictor for Constant {
        fn num_classes(&self) -> usize {
            self.1
        }
        fn label(&self) -> String {
            format!("constant{}", self.0)
        }
        fn predict(&self, image: &RgbImage) -> Result<Vec<u8>> {
            Ok(vec![self.0; image.height * image.width])
        }
    }

    fn synth_val(n: usize) -> DomainDataset {
        let samples = (0..n)
            .map(|i| generate_scene(100 + i as u64, (32, 32), &ClassSpec::default_classes()).unwrap())
            .collect();
        DomainDataset::new(samples, 3, Split::Val).unwrap()
    }

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|c| format!("c{c}")).collect()
    }

    #[test]
    fn ground_truth_double_scores_one() {
        let ds = synth_val(6);
        let oracle = Oracle {
            pairs: ds
                .samples()
                .iter()
                .map(|s| (s.image.clone(), s.mask.as_ref().unwrap().data.clone()))
                .collect(),
            k: 3,
        };
        let r = evaluate_predictor(&oracle, &ds, &ClassMapping::identity(&names(3)), &[0, 1, 2], AbsentClassPolicy::Exclude)
            .unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.num_images, 6);
    }

    #[test]
    fn all_background_matches_frequency_closed_form() {
        let ds = synth_val(10);
        let (mut bg, mut valid) = (0u64, 0u64);
        let mut present = [false; 3];
        for s in ds.samples() {
            for &v in &s.mask.as_ref().unwrap().data {
                if v != 255 {
                    valid += 1;
                    present[v as usize] = true;
                    if v == 0 {
                        bg += 1;
                    }
                }
            }
        }
        // background IoU = f_bg, other present classes score 0
        let classes = present.iter().filter(|&&p| p).count() as f64;
        let expected = (bg as f64 / valid as f64) / classes;
        let r = evaluate_predictor(&Constant(0, 3), &ds, &ClassMapping::identity(&names(3)), &[0, 1, 2], AbsentClassPolicy::Exclude)
            .unwrap();
        assert!((r.miou - expected).abs() < 1e-12);
    }

    #[test]
    fn report_carries_checkpoint_provenance() {
        let cfg = SegmenterConfig::tiny(3);
        let model = Segmenter::new(cfg, 0).unwrap();
        let prov = vec![Provenance {
            stage: StageKind::Sp,
            label: "none".into(),
            config: serde_json::json!({}),
            seed: 0,
            note: None,
        }];
        let ckpt = SegmenterCheckpoint::from_model(&model, prov.clone());
        let r = evaluate_model(&ckpt, &synth_val(2), &ClassMapping::identity(&names(3)), &[0, 1, 2]).unwrap();
        assert_eq!(r.provenance, prov);
        assert_eq!(r.label, "none");
    }

    #[test]
    fn odd_sizes_are_padded_and_cropped_back() {
        let model = Segmenter::new(SegmenterConfig::tiny(3), 1).unwrap();
        let stride = model.config().total_stride();
        let p = SegmenterPredictor::new(model, vec![]);
        let img = generate_scene(3, (32, 32), &ClassSpec::default_classes()).unwrap().image;
        let mut odd = RgbImage::filled(32 - 3, 32 - 1, 0.0);
        for y in 0..odd.height {
            for x in 0..odd.width {
                for c in 0..3 {
                    odd.set(y, x, c, img.get(y, x, c));
                }
            }
        }
        assert_ne!(odd.height % stride, 0);
        let pred = p.predict(&odd).unwrap();
        assert_eq!(pred.len(), odd.height * odd.width);
        assert!(pred.iter().all(|&c| c < 3));
    }

    #[test]
    fn batched_and_single_predictions_agree() {
        let p = SegmenterPredictor::new(Segmenter::new(SegmenterConfig::tiny(3), 2).unwrap(), vec![]);
        let ds = synth_val(5);
        let imgs: Vec<&RgbImage> = ds.samples().iter().map(|s| &s.image).collect();
        let batched = p.predict_batch(&imgs).unwrap();
        for (im, b) in imgs.iter().zip(batched) {
            assert_eq!(p.predict(im).unwrap(), b);
        }
    }

    #[test]
    fn unlabeled_samples_and_class_mismatch_are_errors() {
        let ds = synth_val(2).without_labels();
        let id = ClassMapping::identity(&names(3));
        assert!(matches!(
            evaluate_predictor(&Constant(0, 3), &ds, &id, &[0], AbsentClassPolicy::Exclude),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            evaluate_predictor(&Constant(0, 4), &synth_val(2), &id, &[0], AbsentClassPolicy::Exclude),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_severity_battery_reproduces_clean_score() {
        let p = SegmenterPredictor::new(Segmenter::new(SegmenterConfig::tiny(3), 4).unwrap(), vec![]);
        let ds = synth_val(4);
        let id = ClassMapping::identity(&names(3));
        let clean = evaluate_predictor(&p, &ds, &id, &[0, 1, 2], AbsentClassPolicy::Exclude).unwrap();
        let battery: Vec<_> = default_battery(3)
            .into_iter()
            .map(|s| CorruptionSpec { severity: 0.0, ..s })
            .collect();
        for row in robustness_eval(&p, &ds, &id, &[0, 1, 2], &battery).unwrap() {
            assert_eq!(row.report.miou, clean.miou);
        }
    }

    #[test]
    fn robustness_is_deterministic() {
        let p = SegmenterPredictor::new(Segmenter::new(SegmenterConfig::tiny(3), 5).unwrap(), vec![]);
        let ds = synth_val(3);
        let id = ClassMapping::identity(&names(3));
        let a = robustness_eval(&p, &ds, &id, &[0, 1, 2], &default_battery(7)).unwrap();
        let b = robustness_eval(&p, &ds, &id, &[0, 1, 2], &default_battery(7)).unwrap();
        assert_eq!(a, b);
        let kinds: Vec<_> = a.iter().map(|r| r.spec.kind).collect();
        assert_eq!(kinds, CorruptionKind::ALL);
        assert!(robustness_eval(&p, &ds, &id, &[0], &[]).is_err());
    }

    #[test]
    fn mapped_away_predictions_count_as_misses() {
        let img = RgbImage::filled(8, 8, 0.5);
        let sample = ImageSample::new("a", img, Some(Mask::filled(8, 8, 1)), DomainTag::Target).unwrap();
        let ds = DomainDataset::new(vec![sample], 3, Split::Val).unwrap();
        let mapping = ClassMapping::new(vec![Some(0), Some(1), None], names(3)).unwrap();
        let r = evaluate_predictor(&Constant(2, 3), &ds, &mapping, &[1], AbsentClassPolicy::Exclude).unwrap();
        assert_eq!(r.miou, 0.0);
        assert_eq!(r.ignored_predictions, 64);
    }
}
