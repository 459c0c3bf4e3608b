//! Training losses: region-normalized L1 over both stages, a feature-space
//! perception term on the final stage, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::dataio::ImageTensor;
use crate::detection::ShadowMask;
use crate::error::{Error, Result};
use crate::numerics::{Element, Tape, Tensor, Var};
use crate::refiner::Backbone;

/// Number of supervised stages (`I₁`, `I₂`).
pub const STAGES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_pixel: f64,
    pub lambda_phi: f64,
    /// One weight per feature level, level 0 being the image itself.
    pub lambda_levels: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_pixel: 1.0,
            lambda_phi: 0.1,
            lambda_levels: vec![1.0; 6],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_pixel, self.lambda_phi]
            .into_iter()
            .chain(self.lambda_levels.iter().copied());
        for v in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Per-pixel weights `M/sum(M) + M'/sum(M')` replicated over channels as
/// `[H·W, 3]`; a region with zero area contributes nothing.
fn region_weights(mask: &ShadowMask) -> Vec<f64> {
    let fg = mask.total();
    let bg = mask.data().iter().map(|m| 1.0 - m).sum::<f64>();
    mask.data()
        .iter()
        .flat_map(|&m| {
            let mut w = 0.0;
            if fg > 0.0 {
                w += m / fg;
            }
            if bg > 0.0 {
                w += (1.0 - m) / bg;
            }
            [w; 3]
        })
        .collect()
}

/// `Σₙ ‖M⊙(Iₙ − I_gt)‖₁ / sum(M) + Σₙ ‖M'⊙(Iₙ − I_gt)‖₁ / sum(M')` for stage
/// outputs laid out as `[H·W, 3]`.
pub fn relative_l1<T: Element>(
    tape: &mut Tape<T>,
    outputs: &[Var],
    target: &ImageTensor,
    mask: &ShadowMask,
) -> Result<Var> {
    if outputs.len() != STAGES {
        return Err(Error::shape(format!("expected {STAGES} stage outputs, got {}", outputs.len())));
    }
    if target.size() != mask.size() {
        return Err(Error::shape(format!(
            "target {:?} and mask {:?} differ",
            target.size(),
            mask.size()
        )));
    }
    let hw = mask.height() * mask.width();
    let gt = tape.constant(target.to_pixels());
    let weights = tape.constant(Tensor::from_f64([hw, 3], &region_weights(mask))?);
    let mut terms = Vec::with_capacity(STAGES);
    for &out in outputs {
        if tape.shape(out) != [hw, 3] {
            return Err(Error::shape(format!(
                "stage output {:?} does not match target [{hw}, 3]",
                tape.shape(out)
            )));
        }
        let d = tape.sub(out, gt)?;
        let d = tape.abs(d)?;
        let d = tape.mul(d, weights)?;
        terms.push(tape.sum(d)?);
    }
    tape.add(terms[0], terms[1])
}

/// `Σₖ λₖ · mean|Φₖ(pred) − Φₖ(target)|` over the backbone levels of
/// `[3, H, W]` images, each compared at its own resolution.
pub fn perception<T: Element>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    backbone: &Backbone<T>,
    lambda_levels: &[f64],
) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::shape(format!(
            "perception: {:?} vs {:?}",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    let ft = backbone.levels(tape, target)?;
    compare_levels(tape, pred, &ft, backbone, lambda_levels)
}

/// Backbone levels of a fixed target, for reuse across many
/// [`perception_cached`] calls.
pub fn target_features<T: Element>(backbone: &Backbone<T>, target: &ImageTensor) -> Result<Vec<Tensor<T>>> {
    let mut tape = Tape::new();
    let x = tape.constant(target.to_planes());
    let levels = backbone.levels(&mut tape, x)?;
    Ok(levels.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// [`perception`] against precomputed target levels.
pub fn perception_cached<T: Element>(
    tape: &mut Tape<T>,
    pred: Var,
    target_levels: &[Tensor<T>],
    backbone: &Backbone<T>,
    lambda_levels: &[f64],
) -> Result<Var> {
    let ft: Vec<Var> = target_levels.iter().map(|t| tape.constant(t.clone())).collect();
    compare_levels(tape, pred, &ft, backbone, lambda_levels)
}

fn compare_levels<T: Element>(
    tape: &mut Tape<T>,
    pred: Var,
    target_levels: &[Var],
    backbone: &Backbone<T>,
    lambda_levels: &[f64],
) -> Result<Var> {
    let levels = backbone.spec().channels.len() + 1;
    if lambda_levels.len() != levels || target_levels.len() != levels {
        return Err(Error::Config(format!(
            "{} level weights and {} target levels for {levels} feature levels",
            lambda_levels.len(),
            target_levels.len()
        )));
    }
    let fp = backbone.levels(tape, pred)?;
    let mut acc: Option<Var> = None;
    for ((&a, &b), &lambda) in fp.iter().zip(target_levels).zip(lambda_levels) {
        if lambda == 0.0 {
            continue;
        }
        if tape.shape(a) != tape.shape(b) {
            return Err(Error::shape(format!(
                "perception: level {:?} vs target {:?}",
                tape.shape(a),
                tape.shape(b)
            )));
        }
        let d = tape.sub(a, b)?;
        let d = tape.abs(d)?;
        let d = tape.mean(d)?;
        let d = tape.scale(d, T::of(lambda))?;
        acc = Some(match acc {
            Some(s) => tape.add(s, d)?,
            None => d,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Tensor::scalar(T::zero()))))
}

/// `λ_pixel·l_pixel + λ_Φ·l_phi`.
pub fn total<T: Element>(tape: &mut Tape<T>, l_pixel: Var, l_phi: Var, cfg: &LossConfig) -> Result<Var> {
    let a = tape.scale(l_pixel, T::of(cfg.lambda_pixel))?;
    let b = tape.scale(l_phi, T::of(cfg.lambda_phi))?;
    tape.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_drop_empty_regions() {
        let w = region_weights(&ShadowMask::zeros(2, 2));
        assert_eq!(w, vec![0.25; 12]);
        let w = region_weights(&ShadowMask::filled(1, 2, 1.0));
        assert_eq!(w, vec![0.5; 6]);
    }

    #[test]
    fn total_is_weighted_sum() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = tape.constant(Tensor::scalar(5.0));
        let t = total(&mut tape, a, b, &LossConfig::default()).unwrap();
        assert!((tape.value(t).item() - 2.5).abs() < 1e-12);
    }
}
