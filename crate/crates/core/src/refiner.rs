//! Pixel-level refinement: the fine stage.
//!
//! A frozen, seeded convolutional backbone supplies hyper-column features of
//! the coarse image. They are fused with the shadow input, the coarse image
//! and the mask, passed through SE-gated aggregation stages and a pooling
//! pyramid, and projected to a residual that is added back onto `I₁`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{glorot, he, Bindings, Element, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSpec {
    pub seed: u64,
    /// Output channels of each 3×3 stage; resolution halves between stages.
    pub channels: Vec<usize>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            seed: 0x5348_4144,
            channels: vec![16, 32, 64, 64, 64],
        }
    }
}

impl BackboneSpec {
    /// Channels of the full hyper-column, the raw image included.
    pub fn hypercolumn_channels(&self) -> usize {
        3 + self.channels.iter().sum::<usize>()
    }

    fn stage_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = 3;
        for (i, &c) in self.channels.iter().enumerate() {
            out.push((format!("backbone.stage{i}.w"), vec![c, cin, 3, 3]));
            out.push((format!("backbone.stage{i}.b"), vec![c]));
            cin = c;
        }
        out
    }
}

/// Frozen feature extractor. Its weights are bound as tape constants, so no
/// gradient can reach them.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    spec: BackboneSpec,
    weights: ParamSet<T>,
}

impl<T: Element> Backbone<T> {
    /// He-normal weights drawn from `spec.seed`.
    pub fn new(spec: BackboneSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut weights = ParamSet::new();
        for (name, shape) in spec.stage_shapes() {
            let t = if shape.len() == 4 {
                he::<f64>(&shape, shape[1] * 9, &mut rng).cast()
            } else {
                Tensor::zeros(shape)
            };
            weights.insert(name, t);
        }
        Self { spec, weights }
    }

    /// Use externally supplied weights; every `backbone.*` tensor must be
    /// present with the shape the spec implies.
    pub fn with_weights(spec: BackboneSpec, weights: ParamSet<T>) -> Result<Self> {
        let mut picked = ParamSet::new();
        for (name, shape) in spec.stage_shapes() {
            let t = weights
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("backbone tensor `{name}` missing")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "backbone tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            picked.insert(name, t.clone());
        }
        Ok(Self {
            spec,
            weights: picked,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn weights(&self) -> &ParamSet<T> {
        &self.weights
    }

    pub fn cast<U: Element>(&self) -> Backbone<U> {
        Backbone {
            spec: self.spec.clone(),
            weights: self.weights.cast(),
        }
    }

    /// Native-resolution feature maps; level 0 is `img` itself.
    pub fn levels(&self, tape: &mut Tape<T>, img: Var) -> Result<Vec<Var>> {
        let mut levels = vec![img];
        let mut x = img;
        for i in 0..self.spec.channels.len() {
            if i > 0 {
                let (h, w) = (tape.shape(x)[1], tape.shape(x)[2]);
                x = tape.adaptive_avg_pool(x, h.div_ceil(2), w.div_ceil(2))?;
            }
            let w = tape.constant(self.weights.get(&format!("backbone.stage{i}.w")).expect("stage").clone());
            let b = tape.constant(self.weights.get(&format!("backbone.stage{i}.b")).expect("stage").clone());
            x = tape.conv2d(x, w, Some(b), 1, 1)?;
            x = tape.relu(x)?;
            levels.push(x);
        }
        Ok(levels)
    }
}

pub struct FeatureStack {
    /// Every level resized to the input resolution.
    pub levels: Vec<Var>,
    /// Channel concatenation of `levels`.
    pub hypercolumn: Var,
}

/// Backbone features of `img: [3, H, W]`, upsampled and stacked.
pub fn hypercolumn<T: Element>(tape: &mut Tape<T>, img: Var, backbone: &Backbone<T>) -> Result<FeatureStack> {
    let (h, w) = match *tape.shape(img) {
        [3, h, w] => (h, w),
        ref s => return Err(Error::shape(format!("hypercolumn: expected [3, H, W], got {s:?}"))),
    };
    let mut levels = backbone.levels(tape, img)?;
    for level in levels.iter_mut() {
        if tape.shape(*level)[1..] != [h, w] {
            *level = tape.resize_bilinear(*level, h, w)?;
        }
    }
    let hypercolumn = tape.concat(&levels)?;
    Ok(FeatureStack {
        levels,
        hypercolumn,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinerConfig {
    /// Feature width of the aggregation stages.
    pub width: usize,
    pub stages: usize,
    pub se_reduction: usize,
    pub spp_scales: Vec<usize>,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            width: 16,
            stages: 2,
            se_reduction: 4,
            spp_scales: vec![1, 2, 4],
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.se_reduction == 0 || !self.width.is_multiple_of(self.se_reduction) {
            return Err(Error::Config(format!(
                "refiner width {} must be a positive multiple of se_reduction {}",
                self.width, self.se_reduction
            )));
        }
        if self.spp_scales.contains(&0) {
            return Err(Error::Config("spp scales must be positive".into()));
        }
        Ok(())
    }
}

/// Input channels of the fuse convolution: shadow image, `I₁`, mask and the
/// hyper-column of `I₁`.
fn fuse_channels(backbone: &BackboneSpec) -> usize {
    3 + 3 + 1 + backbone.hypercolumn_channels()
}

pub fn init_params<T: Element>(
    cfg: &RefinerConfig,
    backbone: &BackboneSpec,
    rng: &mut impl rand::Rng,
    params: &mut ParamSet<T>,
) {
    let c = cfg.width;
    let cin = fuse_channels(backbone);
    params.insert("refine.fuse.w", he(&[c, cin, 1, 1], cin, rng));
    params.insert("refine.fuse.b", Tensor::zeros([c]));
    let r = c / cfg.se_reduction;
    for s in 0..cfg.stages {
        let p = |n: &str| format!("refine.stage{s}.{n}");
        params.insert(p("conv.w"), he(&[c, c, 3, 3], c * 9, rng));
        params.insert(p("conv.b"), Tensor::zeros([c]));
        params.insert(p("se.w1"), glorot(&[c, r], c, r, rng));
        params.insert(p("se.b1"), Tensor::zeros([r]));
        params.insert(p("se.w2"), glorot(&[r, c], r, c, rng));
        params.insert(p("se.b2"), Tensor::zeros([c]));
    }
    let spp_in = c * (1 + cfg.spp_scales.len());
    params.insert("refine.spp.w", he(&[c, spp_in, 1, 1], spp_in, rng));
    params.insert("refine.spp.b", Tensor::zeros([c]));
    params.insert("refine.out.w", Tensor::zeros([3, c, 1, 1]));
    params.insert("refine.out.b", Tensor::zeros([3]));
}

/// `s = sigmoid(W₂·relu(W₁·gap(x) + b₁) + b₂)`, channel `c` scaled by `s_c`.
/// Weights are read from `{prefix}.w1`, `.b1`, `.w2`, `.b2`.
pub fn se_reweight<T: Element>(tape: &mut Tape<T>, binds: &Bindings, x: Var, prefix: &str) -> Result<Var> {
    let c = tape.shape(x)[0];
    let pooled = tape.gap(x)?;
    let pooled = tape.reshape(pooled, [1, c])?;
    let z = tape.matmul(pooled, binds.get(&format!("{prefix}.w1"))?)?;
    let z = tape.add_row(z, binds.get(&format!("{prefix}.b1"))?)?;
    let z = tape.relu(z)?;
    let z = tape.matmul(z, binds.get(&format!("{prefix}.w2"))?)?;
    let z = tape.add_row(z, binds.get(&format!("{prefix}.b2"))?)?;
    let s = tape.sigmoid(z)?;
    tape.scale_channels(x, s)
}

/// Pool `x` onto each `scale × scale` grid, resize back, stack with `x`, and
/// fuse with `{prefix}.w` / `{prefix}.b` (a 1×1 convolution).
pub fn spp<T: Element>(tape: &mut Tape<T>, binds: &Bindings, x: Var, scales: &[usize], prefix: &str) -> Result<Var> {
    let (h, w) = (tape.shape(x)[1], tape.shape(x)[2]);
    let mut parts = vec![x];
    for &s in scales {
        let pooled = tape.adaptive_avg_pool(x, s.min(h), s.min(w))?;
        parts.push(tape.resize_bilinear(pooled, h, w)?);
    }
    let stacked = tape.concat(&parts)?;
    let wv = binds.get(&format!("{prefix}.w"))?;
    let bv = binds.get(&format!("{prefix}.b"))?;
    tape.conv2d(stacked, wv, Some(bv), 1, 0)
}

/// `relu(W·concat(inputs, hypercolumn(src)) + b)` for the 1×1 fuse weights.
///
/// A pointwise convolution commutes with bilinear resizing, so each backbone
/// level is projected at its own resolution and only the projection is
/// upsampled. The result equals fusing the materialized hyper-column.
fn fuse<T: Element>(
    tape: &mut Tape<T>,
    binds: &Bindings,
    backbone: &Backbone<T>,
    inputs: &[Var],
    src: Var,
) -> Result<Var> {
    let (h, w) = (tape.shape(src)[1], tape.shape(src)[2]);
    let weight = binds.get("refine.fuse.w")?;
    let (c, cin) = (tape.shape(weight)[0], tape.shape(weight)[1]);
    let weight = tape.reshape(weight, [c, cin])?;
    let mut parts = inputs.to_vec();
    parts.extend(backbone.levels(tape, src)?);
    let total: usize = parts.iter().map(|&p| tape.shape(p)[0]).sum();
    if total != cin {
        return Err(Error::shape(format!("fuse: {total} input channels, weights expect {cin}")));
    }
    let mut acc: Option<Var> = None;
    let mut offset = 0;
    for part in parts {
        let ck = tape.shape(part)[0];
        let wk = tape.slice_cols(weight, offset, offset + ck)?;
        let wk = tape.reshape(wk, [c, ck, 1, 1])?;
        offset += ck;
        let bias = match acc {
            None => Some(binds.get("refine.fuse.b")?),
            Some(_) => None,
        };
        let mut y = tape.conv2d(part, wk, bias, 1, 0)?;
        if tape.shape(y)[1..] != [h, w] {
            y = tape.resize_bilinear(y, h, w)?;
        }
        acc = Some(match acc {
            Some(a) => tape.add(a, y)?,
            None => y,
        });
    }
    tape.relu(acc.expect("at least one input"))
}

/// `I₂ = clamp(I₁ + Δ, 0, 1)` with all images as `[3, H, W]` and the mask as
/// `[1, H, W]`.
pub fn refine<T: Element>(
    tape: &mut Tape<T>,
    binds: &Bindings,
    backbone: &Backbone<T>,
    img_in: Var,
    i1: Var,
    mask: Var,
    cfg: &RefinerConfig,
) -> Result<Var> {
    let size = &tape.shape(i1)[1..];
    if tape.shape(img_in)[1..] != *size || tape.shape(mask)[1..] != *size {
        return Err(Error::shape(format!(
            "refine: inputs {:?}, {:?} and mask {:?} disagree",
            tape.shape(img_in),
            tape.shape(i1),
            tape.shape(mask)
        )));
    }
    let mut x = fuse(tape, binds, backbone, &[img_in, i1, mask], i1)?;
    for s in 0..cfg.stages {
        let p = format!("refine.stage{s}");
        x = tape.conv2d(
            x,
            binds.get(&format!("{p}.conv.w"))?,
            Some(binds.get(&format!("{p}.conv.b"))?),
            1,
            1,
        )?;
        x = tape.relu(x)?;
        x = se_reweight(tape, binds, x, &format!("{p}.se"))?;
    }
    let x = spp(tape, binds, x, &cfg.spp_scales, "refine.spp")?;
    let x = tape.relu(x)?;
    let delta = tape.conv2d(x, binds.get("refine.out.w")?, Some(binds.get("refine.out.b")?), 1, 0)?;
    let sum = tape.add(i1, delta)?;
    tape.clamp(sum, T::zero(), T::one())
}

/// `[H·W, C]` → `[C, H, W]`.
pub fn pixels_to_planes<T: Element>(tape: &mut Tape<T>, x: Var, height: usize, width: usize) -> Result<Var> {
    let c = tape.shape(x)[1];
    let t = tape.transpose(x)?;
    tape.reshape(t, [c, height, width])
}

/// `[C, H, W]` → `[H·W, C]`.
pub fn planes_to_pixels<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (c, h, w) = match *tape.shape(x) {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::shape(format!("expected [C, H, W], got {s:?}"))),
    };
    let flat = tape.reshape(x, [c, h * w])?;
    tape.transpose(flat)
}
