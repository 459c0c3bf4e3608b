//! Model assembly, inference, checkpoints and training.
//!
//! A [`Model`] owns the trainable remapper and refiner weights plus the frozen
//! backbone. [`Model::infer`] runs detection (when no mask is given), the
//! coarse remapping and the refinement on an image of any size.

mod checkpoint;
mod train;

pub use checkpoint::{read_tensor_file, Checkpoint, OptimizerState, FORMAT_VERSION, MAGIC};
pub use train::{LossRecord, TrainConfig, TrainOutcome, Trainer, Freeze, train, write_loss_log};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, ImageTensor};
use crate::detection::{otsu_detect, ShadowMask};
use crate::error::{Error, Result};
use crate::jobs::map_jobs;
use crate::metrics::{MetricsReport, MetricsRow, ReportMeta};
use crate::numerics::{Bindings, Element, ParamSet, Tape, Tensor, Var};
use crate::refiner::{self, planes_to_pixels, pixels_to_planes, Backbone, BackboneSpec, RefinerConfig};
use crate::remapper::{self, RemapOutput, RemapperConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub remapper: RemapperConfig,
    pub refiner: RefinerConfig,
    pub backbone: BackboneSpec,
    /// Seed for the trainable weights.
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.remapper.validate()?;
        self.refiner.validate()?;
        if self.backbone.channels.is_empty() || self.backbone.channels.contains(&0) {
            return Err(Error::Config("backbone needs at least one positive stage".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub backbone: Backbone<T>,
}

/// Tape handles of one forward pass.
pub struct Stages {
    /// Coarse output, `[H·W, 3]`.
    pub i1: Var,
    /// Refined output, `[3, H, W]`.
    pub i2: Var,
    pub remap: RemapOutput,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    /// Supplied by the caller, e.g. read from a mask file.
    File,
    Detector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub i1: ImageTensor,
    pub i2: ImageTensor,
    pub mask_used: ShadowMask,
    pub mask_source: MaskSource,
}

impl PipelineOutput {
    pub fn stages(&self) -> [&ImageTensor; 2] {
        [&self.i1, &self.i2]
    }
}

impl<T: Element> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamSet::new();
        remapper::init_params(&config.remapper, &mut rng, &mut params);
        refiner::init_params(&config.refiner, &config.backbone, &mut rng, &mut params);
        let backbone = Backbone::new(config.backbone.clone());
        Ok(Self {
            config,
            params,
            backbone,
        })
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            backbone: self.backbone.cast(),
        }
    }

    /// Both stages on an image whose sides are multiples of the patch size.
    pub fn forward(&self, tape: &mut Tape<T>, binds: &Bindings, img: &ImageTensor, mask: &ShadowMask) -> Result<Stages> {
        let (h, w) = img.size();
        let remap = remapper::forward(tape, binds, img, mask, &self.config.remapper)?;
        let i1_planes = pixels_to_planes(tape, remap.i1, h, w)?;
        let img_planes = tape.constant(img.to_planes());
        let m = tape.constant(Tensor::from_f64([1, h, w], mask.data())?);
        let i2 = refiner::refine(tape, binds, &self.backbone, img_planes, i1_planes, m, &self.config.refiner)?;
        Ok(Stages {
            i1: remap.i1,
            i2,
            remap,
        })
    }

    /// Remove shadows from `img`. Without a mask the Otsu detector is used.
    /// Any size is accepted: the image is reflect-padded to a patch multiple
    /// and the outputs are cropped back.
    pub fn infer(&self, img: &ImageTensor, mask: Option<&ShadowMask>) -> Result<PipelineOutput> {
        let (h, w) = img.size();
        if h == 0 || w == 0 {
            return Err(Error::shape("cannot run on an empty image"));
        }
        let (mask_used, mask_source) = match mask {
            Some(m) if m.size() != img.size() => {
                return Err(Error::shape(format!(
                    "mask {:?} does not match image {:?}",
                    m.size(),
                    img.size()
                )))
            }
            Some(m) => (m.clone(), MaskSource::File),
            None => (otsu_detect(img), MaskSource::Detector),
        };
        let p = self.config.remapper.patch_size;
        let (ph, pw) = (h.div_ceil(p) * p, w.div_ceil(p) * p);
        let padded = img.pad_reflect(ph, pw);
        let padded_mask = mask_used.pad_reflect(ph, pw);

        let mut tape = Tape::new();
        let binds = self.params.bind(&mut tape, |_| false);
        let stages = self.forward(&mut tape, &binds, &padded, &padded_mask)?;
        let i2 = planes_to_pixels(&mut tape, stages.i2)?;
        let i1 = ImageTensor::from_pixels(tape.value(stages.i1), ph, pw)?.crop(h, w);
        let i2 = ImageTensor::from_pixels(tape.value(i2), ph, pw)?.crop(h, w);
        Ok(PipelineOutput {
            i1,
            i2,
            mask_used,
            mask_source,
        })
    }
}

/// Metrics of the model's final stage against each sample's target. Dataset
/// masks are used when present, otherwise the detector.
pub fn evaluate_model(model: &Model<f32>, dataset: &Dataset, meta: ReportMeta, jobs: usize) -> Result<MetricsReport> {
    let rows = map_jobs(&dataset.samples, jobs, |s| {
        let out = model.infer(&s.input, s.mask.as_ref())?;
        MetricsRow::compute(s.stem.clone(), &out.i2, &s.target)
    })?;
    Ok(MetricsReport::from_rows(meta, rows, Vec::new()))
}

/// Metrics of the untouched inputs against their targets.
pub fn evaluate_inputs(dataset: &Dataset, meta: ReportMeta) -> Result<MetricsReport> {
    let rows = dataset
        .samples
        .iter()
        .map(|s| MetricsRow::compute(s.stem.clone(), &s.input, &s.target))
        .collect::<Result<_>>()?;
    Ok(MetricsReport::from_rows(meta, rows, Vec::new()))
}
