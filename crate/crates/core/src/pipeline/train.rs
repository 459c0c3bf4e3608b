use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{read_tensor_file, Checkpoint, Model, ModelConfig};
use crate::dataio::{load_dataset, synth_batch, Dataset, ImageTensor, SynthConfig};
use crate::detection::{otsu_detect, ShadowMask};
use crate::error::{Error, Result};
use crate::jobs::map_jobs;
use crate::numerics::{AdamConfig, AdamState, Element, Tape, Tensor};
use crate::objective::{perception, perception_cached, relative_l1, target_features, total, LossConfig};
use crate::refiner::{planes_to_pixels, Backbone};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Freeze {
    pub remapper: bool,
    pub refiner: bool,
}

impl Freeze {
    pub fn trainable(&self, name: &str) -> bool {
        !(self.remapper && name.starts_with("remap.") || self.refiner && name.starts_with("refine."))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Dataset directory; when absent, `synth_count` samples are generated
    /// from `synth`.
    pub data_root: Option<PathBuf>,
    pub synth: SynthConfig,
    pub synth_count: usize,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub steps: usize,
    /// Seed of the batch order.
    pub seed: u64,
    /// Write a snapshot every this many steps; 0 disables snapshots.
    pub checkpoint_every: usize,
    pub output_dir: PathBuf,
    /// Worker threads for the per-sample passes of a batch. Results do not
    /// depend on this value.
    pub jobs: usize,
    pub freeze: Freeze,
    /// Container file with `backbone.*` tensors replacing the seeded weights.
    pub backbone_weights: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data_root: None,
            synth: SynthConfig::default(),
            synth_count: 64,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            batch_size: 4,
            steps: 2000,
            seed: 0,
            checkpoint_every: 0,
            output_dir: PathBuf::from("run"),
            jobs: 1,
            freeze: Freeze::default(),
            backbone_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be at least 1".into()));
        }
        if self.data_root.is_none() && self.synth_count == 0 {
            return Err(Error::Config("synth_count must be at least 1 without a data_root".into()));
        }
        let a = &self.adam;
        if !(a.lr >= 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config(format!("invalid adam settings {a:?}")));
        }
        self.synth.validate()?;
        self.loss.validate()?;
        self.model.validate()
    }

    /// The dataset this config points at.
    pub fn dataset(&self) -> Result<Dataset> {
        match &self.data_root {
            Some(root) => load_dataset(root),
            None => Ok(Dataset::from_synthesized(synth_batch(&self.synth, self.synth_count)?)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss_pixel: f64,
    pub loss_phi: f64,
    pub loss_total: f64,
}

/// Loss values and parameter gradients of one sample.
pub struct SampleLoss<T> {
    pub pixel: f64,
    pub phi: f64,
    pub total: f64,
    /// Aligned with the model's parameter order; frozen entries are zero.
    pub grads: Vec<Tensor<T>>,
}

/// Forward both stages, evaluate the weighted objective, and backpropagate.
/// `target_levels` are the backbone features of `target` when already known.
pub fn sample_loss<T: Element>(
    model: &Model<T>,
    loss: &LossConfig,
    freeze: Freeze,
    input: &ImageTensor,
    target: &ImageTensor,
    mask: &ShadowMask,
    target_levels: Option<&[Tensor<T>]>,
) -> Result<SampleLoss<T>> {
    let mut tape = Tape::new();
    let binds = model.params.bind(&mut tape, |n| freeze.trainable(n));
    let stages = model.forward(&mut tape, &binds, input, mask)?;
    let i2 = planes_to_pixels(&mut tape, stages.i2)?;
    let l_pixel = relative_l1(&mut tape, &[stages.i1, i2], target, mask)?;
    let l_phi = match target_levels {
        Some(levels) => perception_cached(&mut tape, stages.i2, levels, &model.backbone, &loss.lambda_levels)?,
        None => {
            let gt = tape.constant(target.to_planes());
            perception(&mut tape, stages.i2, gt, &model.backbone, &loss.lambda_levels)?
        }
    };
    let l_total = total(&mut tape, l_pixel, l_phi, loss)?;
    let mut grads = tape.backward(l_total)?;
    Ok(SampleLoss {
        pixel: tape.value(l_pixel).item().as_f64(),
        phi: tape.value(l_phi).item().as_f64(),
        total: tape.value(l_total).item().as_f64(),
        grads: model.params.collect_grads(&binds, &mut grads),
    })
}

struct Prepared {
    input: ImageTensor,
    target: ImageTensor,
    mask: ShadowMask,
    target_levels: Vec<Tensor<f32>>,
}

/// Owns the model and optimizer for one training run.
pub struct Trainer {
    cfg: TrainConfig,
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    samples: Vec<Prepared>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    log: Vec<LossRecord>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, dataset: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let mut model = Model::<f32>::new(cfg.model.clone())?;
        if let Some(path) = &cfg.backbone_weights {
            let weights = read_tensor_file(path)?;
            model.backbone = Backbone::with_weights(cfg.model.backbone.clone(), weights)?;
        }
        Self::with_model(cfg, model, dataset)
    }

    /// Start from an existing model, e.g. one restored from a checkpoint.
    pub fn with_model(cfg: TrainConfig, model: Model<f32>, dataset: &Dataset) -> Result<Self> {
        cfg.validate()?;
        if dataset.is_empty() {
            return Err(Error::Validation(format!(
                "training dataset {} is empty",
                dataset.root.display()
            )));
        }
        let p = model.config.remapper.patch_size;
        let samples = dataset
            .samples
            .iter()
            .map(|s| {
                let mask = s.mask.clone().unwrap_or_else(|| otsu_detect(&s.input));
                let (h, w) = s.input.size();
                let (ph, pw) = (h.div_ceil(p) * p, w.div_ceil(p) * p);
                let target = s.target.pad_reflect(ph, pw);
                Ok(Prepared {
                    input: s.input.pad_reflect(ph, pw),
                    target_levels: target_features(&model.backbone, &target)?,
                    target,
                    mask: mask.pad_reflect(ph, pw),
                })
            })
            .collect::<Result<_>>()?;
        let adam = AdamState::new(cfg.adam, model.params.iter().map(|(_, t)| t));
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            cfg,
            model,
            adam,
            samples,
            order: Vec::new(),
            cursor: 0,
            rng,
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn log(&self) -> &[LossRecord] {
        &self.log
    }

    pub fn steps_done(&self) -> usize {
        self.log.len()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, Some(&self.adam))
    }

    fn next_batch(&mut self) -> Vec<usize> {
        (0..self.cfg.batch_size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order = (0..self.samples.len()).collect();
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }

    fn diverged(&self, step: usize) -> Error {
        let path = self.cfg.output_dir.join("last_good.sdcn");
        let snapshot = match self.checkpoint().save(&path) {
            Ok(()) => path.display().to_string(),
            Err(e) => format!("not written ({e})"),
        };
        Error::Diverged { step, snapshot }
    }

    /// One optimizer update on a fresh batch.
    pub fn step(&mut self) -> Result<LossRecord> {
        let step = self.log.len() + 1;
        let batch = self.next_batch();
        let items: Vec<&Prepared> = batch.iter().map(|&i| &self.samples[i]).collect();
        let (model, loss, freeze) = (&self.model, &self.cfg.loss, self.cfg.freeze);
        let results = map_jobs(&items, self.cfg.jobs, |s| {
            sample_loss(model, loss, freeze, &s.input, &s.target, &s.mask, Some(&s.target_levels))
        });
        let results = match results {
            Ok(r) => r,
            Err(Error::NonFinite { .. }) => return Err(self.diverged(step)),
            Err(e) => return Err(e),
        };

        let inv = 1.0 / batch.len() as f64;
        let mut grads: Vec<Tensor<f32>> = self.model.params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let (mut pixel, mut phi, mut tot) = (0.0, 0.0, 0.0);
        for r in &results {
            pixel += r.pixel;
            phi += r.phi;
            tot += r.total;
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *v;
                }
            }
        }
        let record = LossRecord {
            step,
            loss_pixel: pixel * inv,
            loss_phi: phi * inv,
            loss_total: tot * inv,
        };
        if !record.loss_total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(self.diverged(step));
        }
        let scale = inv as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        let mut params: Vec<&mut Tensor<f32>> = self.model.params.tensors_mut().collect();
        self.adam.step(&mut params, &grads)?;
        self.log.push(record);
        Ok(record)
    }

    /// Run the remaining steps, writing snapshots at the configured cadence.
    pub fn run(&mut self) -> Result<()> {
        while self.steps_done() < self.cfg.steps {
            let r = self.step()?;
            if r.step == 1 || r.step % 50 == 0 {
                log::info!(
                    "step {:>5}  pixel {:.5}  phi {:.5}  total {:.5}",
                    r.step,
                    r.loss_pixel,
                    r.loss_phi,
                    r.loss_total
                );
            }
            if self.cfg.checkpoint_every > 0 && r.step % self.cfg.checkpoint_every == 0 {
                let path = self.cfg.output_dir.join(format!("snapshot_{:06}.sdcn", r.step));
                self.checkpoint().save(path)?;
            }
        }
        Ok(())
    }
}

pub fn write_loss_log(path: impl AsRef<Path>, records: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let wrap = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    for r in records {
        w.serialize(r).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: Vec<LossRecord>,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

/// Train from `cfg`, writing `checkpoint.sdcn` and `loss_log.csv` into the
/// output directory.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = cfg.dataset()?;
    let mut trainer = Trainer::new(cfg.clone(), &dataset)?;
    let result = trainer.run();
    let log_path = cfg.output_dir.join("loss_log.csv");
    write_loss_log(&log_path, trainer.log())?;
    result?;
    let checkpoint_path = cfg.output_dir.join("checkpoint.sdcn");
    trainer.checkpoint().save(&checkpoint_path)?;
    Ok(TrainOutcome {
        log: trainer.log,
        model: trainer.model,
        checkpoint_path,
        log_path,
    })
}
