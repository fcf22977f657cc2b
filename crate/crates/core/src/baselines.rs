//! Entry points for the comparison pipelines and the two prompter
//! variants. Each wrapper checks that it is handed the model kind it
//! serves and that the model has actually been trained, then tags its
//! output with a provenance label so downstream reporting can tell the
//! pipelines apart.

use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedSample, ImageData, InstancePrediction};
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    SamSeg,
    SamCls,
    SamDet,
    SamDetOracle,
    RsprompterAnchor,
    RsprompterQuery,
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub provenance: Provenance,
    pub predictions: Vec<InstancePrediction>,
}

impl PipelineResult {
    fn new(provenance: Provenance, mut predictions: Vec<InstancePrediction>) -> Self {
        predictions.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
        predictions.truncate(100);
        PipelineResult { provenance, predictions }
    }

    /// Oracle runs copy ground-truth boxes, so box AP is meaningless and
    /// reports must omit it.
    pub fn include_box_ap(&self) -> bool {
        self.provenance != Provenance::SamDetOracle
    }
}

/// Source of the boxes fed to the box-prompt pipeline.
pub enum BoxSource<'a> {
    /// The pipeline's own trained detector.
    Detector,
    /// Ground-truth boxes and categories (bounds the decode stage).
    OracleGt(&'a AnnotatedSample),
}

fn require(model: &Model, kind: ModelKind, what: &str) -> Result<()> {
    if model.kind() != kind {
        return Err(Error::config(format!(
            "{what} needs a `{}` model, got `{}`",
            kind.as_str(),
            model.kind().as_str()
        )));
    }
    if !model.trained {
        return Err(Error::runtime(format!(
            "{what} refused: the model has not been trained"
        )));
    }
    Ok(())
}

/// Frozen encoder + enhancer + external instance head; the promptable
/// mask decoder is never involved (the model kind does not even hold one).
pub fn run_sam_seg(model: &Model, image: &ImageData) -> Result<PipelineResult> {
    require(model, ModelKind::SamSeg, "the external-head pipeline")?;
    Ok(PipelineResult::new(Provenance::SamSeg, model.predict(image)?))
}

/// Uniform point grid → per-point decode → mask dedup → crop classifier.
pub fn run_sam_cls(model: &Model, image: &ImageData) -> Result<PipelineResult> {
    require(model, ModelKind::SamCls, "the point-grid pipeline")?;
    Ok(PipelineResult::new(Provenance::SamCls, model.predict(image)?))
}

/// Detector (or ground-truth) boxes as prompts, one decode per box.
pub fn run_sam_det(
    model: &Model,
    image: &ImageData,
    boxes_source: BoxSource,
) -> Result<PipelineResult> {
    match boxes_source {
        BoxSource::Detector => {
            require(model, ModelKind::SamDet, "the box-prompt pipeline")?;
            Ok(PipelineResult::new(Provenance::SamDet, model.predict(image)?))
        }
        BoxSource::OracleGt(sample) => {
            require(model, ModelKind::SamDet, "the box-prompt pipeline (oracle)")?;
            if sample.boxes.is_empty() {
                return Err(Error::domain(
                    "oracle mode needs annotated boxes, but the sample has none",
                ));
            }
            let enc = model.embed(image)?;
            let preds = model.predict_from_boxes(
                &enc,
                &sample.boxes,
                &sample.categories,
                (image.h, image.w),
            )?;
            Ok(PipelineResult::new(Provenance::SamDetOracle, preds))
        }
    }
}

/// Either prompter variant end to end.
pub fn run_prompter(model: &Model, image: &ImageData) -> Result<PipelineResult> {
    let provenance = match model.kind() {
        ModelKind::RsprompterAnchor => Provenance::RsprompterAnchor,
        ModelKind::RsprompterQuery => Provenance::RsprompterQuery,
        other => {
            return Err(Error::config(format!(
                "run_prompter expects a prompter variant, got `{}`",
                other.as_str()
            )))
        }
    };
    if !model.trained {
        return Err(Error::runtime("prompter refused: the model has not been trained"));
    }
    Ok(PipelineResult::new(provenance, model.predict(image)?))
}

/// Route an image through whichever pipeline matches the model kind
/// (detector boxes for the box-prompt pipeline).
pub fn run_any(model: &Model, image: &ImageData) -> Result<PipelineResult> {
    match model.kind() {
        ModelKind::RsprompterAnchor | ModelKind::RsprompterQuery => run_prompter(model, image),
        ModelKind::SamSeg => run_sam_seg(model, image),
        ModelKind::SamCls => run_sam_cls(model, image),
        ModelKind::SamDet => run_sam_det(model, image, BoxSource::Detector),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{make_synthetic, SceneSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> AnnotatedSample {
        let spec = SceneSpec { n_images: 1, ..Default::default() };
        make_synthetic(&spec, 3).pop().unwrap()
    }

    fn model(kind: ModelKind, trained: bool) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = Model::new(ModelConfig::with_kind(kind), 3, &mut rng).unwrap();
        m.trained = trained;
        m
    }

    #[test]
    fn untrained_models_are_refused() {
        let s = sample();
        assert!(run_sam_seg(&model(ModelKind::SamSeg, false), &s.image).is_err());
        assert!(run_sam_cls(&model(ModelKind::SamCls, false), &s.image).is_err());
        assert!(run_sam_det(&model(ModelKind::SamDet, false), &s.image, BoxSource::Detector)
            .is_err());
        assert!(run_prompter(&model(ModelKind::RsprompterQuery, false), &s.image).is_err());
    }

    #[test]
    fn kind_mismatch_is_refused() {
        let s = sample();
        assert!(run_sam_seg(&model(ModelKind::SamCls, true), &s.image).is_err());
        assert!(run_sam_cls(&model(ModelKind::SamSeg, true), &s.image).is_err());
        assert!(run_prompter(&model(ModelKind::SamDet, true), &s.image).is_err());
    }

    #[test]
    fn oracle_copies_categories_and_omits_box_ap() {
        let s = sample();
        let m = model(ModelKind::SamDet, true);
        let r = run_sam_det(&m, &s.image, BoxSource::OracleGt(&s)).unwrap();
        assert_eq!(r.provenance, Provenance::SamDetOracle);
        assert!(!r.include_box_ap());
        assert!(!r.predictions.is_empty());
        for p in &r.predictions {
            assert_eq!(p.score, 1.0);
            assert!(s.categories.contains(&p.category_id));
        }
        // detector-driven runs keep box AP
        let d = run_sam_det(&m, &s.image, BoxSource::Detector).unwrap();
        assert!(d.include_box_ap());
    }

    #[test]
    fn oracle_without_annotations_errors() {
        let mut s = sample();
        s.boxes.clear();
        s.categories.clear();
        s.masks.clear();
        let m = model(ModelKind::SamDet, true);
        assert!(run_sam_det(&m, &s.image, BoxSource::OracleGt(&s)).is_err());
    }

    #[test]
    fn results_are_capped_and_sorted() {
        let s = sample();
        for kind in [ModelKind::SamSeg, ModelKind::RsprompterAnchor] {
            let m = model(kind, true);
            let r = run_any(&m, &s.image).unwrap();
            assert!(r.predictions.len() <= 100);
            for w in r.predictions.windows(2) {
                assert!(w[0].score >= w[1].score);
            }
        }
    }
}
