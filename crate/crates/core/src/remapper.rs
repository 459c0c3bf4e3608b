//! Global shadow remapping: the coarse stage.
//!
//! The image is cut into patch tokens, each token is tagged shadow or
//! shadow-free from the mask, a transformer encodes all tokens jointly, and the
//! two groups are average-pooled into region embeddings. A per-pixel MLP
//! conditioned on both embeddings recolors the shadow pixels; everything
//! outside the mask passes through untouched.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::ImageTensor;
use crate::detection::ShadowMask;
use crate::error::{Error, Result};
use crate::numerics::{glorot, he, normal, Bindings, Element, ParamSet, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemapperConfig {
    pub patch_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `dim`.
    pub ffn_mult: usize,
    /// Side of the learned positional grid; other token grids resample it.
    pub pos_grid: usize,
    pub mlp_hidden: Vec<usize>,
    /// Patch coverage at or above which a token counts as shadow.
    pub tau: f64,
}

impl Default for RemapperConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            dim: 64,
            layers: 4,
            heads: 4,
            ffn_mult: 4,
            pos_grid: 16,
            mlp_hidden: vec![64, 64],
            tau: 0.5,
        }
    }
}

impl RemapperConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.dim == 0 || self.heads == 0 || self.pos_grid == 0 {
            return bad("remapper extents must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.mlp_hidden.is_empty() || self.mlp_hidden.contains(&0) {
            return bad("mlp_hidden needs at least one positive width".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        Ok(())
    }

    fn token_len(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// Add freshly initialized remapper weights to `params`.
pub fn init_params<T: Element>(cfg: &RemapperConfig, rng: &mut impl Rng, params: &mut ParamSet<T>) {
    let (d, f) = (cfg.dim, cfg.dim * cfg.ffn_mult);
    let tl = cfg.token_len();
    params.insert("remap.patch.w", glorot(&[tl, d], tl, d, rng));
    params.insert("remap.patch.b", Tensor::zeros([d]));
    params.insert("remap.pos", normal(&[d, cfg.pos_grid, cfg.pos_grid], 0.02, rng));
    params.insert("remap.domain", normal(&[2, d], 0.02, rng));
    for l in 0..cfg.layers {
        let p = |s: &str| format!("remap.layer{l}.{s}");
        params.insert(p("ln1.gain"), Tensor::full([d], T::one()));
        params.insert(p("ln1.bias"), Tensor::zeros([d]));
        for proj in ["q", "k", "v", "o"] {
            params.insert(p(&format!("attn.{proj}.w")), glorot(&[d, d], d, d, rng));
            params.insert(p(&format!("attn.{proj}.b")), Tensor::zeros([d]));
        }
        params.insert(p("ln2.gain"), Tensor::full([d], T::one()));
        params.insert(p("ln2.bias"), Tensor::zeros([d]));
        params.insert(p("ffn.w1"), glorot(&[d, f], d, f, rng));
        params.insert(p("ffn.b1"), Tensor::zeros([f]));
        params.insert(p("ffn.w2"), glorot(&[f, d], f, d, rng));
        params.insert(p("ffn.b2"), Tensor::zeros([d]));
    }
    params.insert("remap.ln_out.gain", Tensor::full([d], T::one()));
    params.insert("remap.ln_out.bias", Tensor::zeros([d]));

    let h0 = cfg.mlp_hidden[0];
    // The colour input is only three wide; at a shared fan-in it would be
    // drowned out by the region embeddings and the MLP would start out
    // constant per image.
    params.insert("remap.mlp.in_rgb", he(&[3, h0], 3, rng));
    let cond_std = 0.25 / ((2 * d) as f64).sqrt();
    params.insert("remap.mlp.in_shadow", normal(&[d, h0], cond_std, rng));
    params.insert("remap.mlp.in_free", normal(&[d, h0], cond_std, rng));
    params.insert("remap.mlp.in_bias", Tensor::zeros([h0]));
    for (i, pair) in cfg.mlp_hidden.windows(2).enumerate() {
        let (a, b) = (pair[0], pair[1]);
        params.insert(format!("remap.mlp.hidden{}.w", i + 1), glorot(&[a, b], a, b, rng));
        params.insert(format!("remap.mlp.hidden{}.b", i + 1), Tensor::zeros([b]));
    }
    let last = *cfg.mlp_hidden.last().expect("validated");
    params.insert("remap.mlp.out.w", glorot(&[last, 3], last, 3, rng));
    params.insert("remap.mlp.out.b", Tensor::zeros([3]));
}

/// Non-overlapping `P×P` patches in row-major order, each flattened as
/// `P×P×3` (channels last).
pub fn patchify(img: &ImageTensor, patch: usize) -> Result<(Tensor<f64>, (usize, usize))> {
    let (h, w) = img.size();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "image {h}x{w} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut raw = Vec::with_capacity(h * w * 3);
    for r in 0..gh {
        for c in 0..gw {
            for y in r * patch..(r + 1) * patch {
                let start = (y * w + c * patch) * 3;
                raw.extend_from_slice(&img.data()[start..start + patch * 3]);
            }
        }
    }
    Ok((Tensor::new([gh * gw, 3 * patch * patch], raw)?, (gh, gw)))
}

/// Inverse of [`patchify`].
pub fn fold(raw: &Tensor<f64>, grid: (usize, usize), patch: usize) -> Result<ImageTensor> {
    let (gh, gw) = grid;
    if raw.shape() != [gh * gw, 3 * patch * patch] {
        return Err(Error::shape(format!(
            "fold: {:?} does not match grid {gh}x{gw} with patch {patch}",
            raw.shape()
        )));
    }
    let (h, w) = (gh * patch, gw * patch);
    let mut data = vec![0.0; h * w * 3];
    let row_len = patch * 3;
    for (t, token) in raw.data().chunks(3 * patch * patch).enumerate() {
        let (r, c) = (t / gw, t % gw);
        for (dy, src) in token.chunks(row_len).enumerate() {
            let start = ((r * patch + dy) * w + c * patch) * 3;
            data[start..start + row_len].copy_from_slice(src);
        }
    }
    ImageTensor::new(h, w, data)
}

pub struct PatchTokens {
    pub raw: Tensor<f64>,
    pub grid: (usize, usize),
    pub patch: usize,
    /// `(row, col)` of every token on the patch grid.
    pub positions: Vec<(usize, usize)>,
    /// `[n, D]` projected tokens plus positional embedding.
    pub embeddings: Var,
}

impl PatchTokens {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Positional table for a `gh × gw` token grid as `[n, D]`.
fn positional<T: Element>(tape: &mut Tape<T>, table: Var, grid: (usize, usize)) -> Result<Var> {
    let (d, th, tw) = match *tape.shape(table) {
        [d, th, tw] => (d, th, tw),
        ref s => return Err(Error::shape(format!("positional table shape {s:?}"))),
    };
    let resized = if (th, tw) == grid {
        table
    } else {
        tape.resize_bilinear(table, grid.0, grid.1)?
    };
    let flat = tape.reshape(resized, [d, grid.0 * grid.1])?;
    tape.transpose(flat)
}

pub fn tokenize<T: Element>(
    tape: &mut Tape<T>,
    binds: &Bindings,
    img: &ImageTensor,
    cfg: &RemapperConfig,
) -> Result<PatchTokens> {
    let (raw, grid) = patchify(img, cfg.patch_size)?;
    let x = tape.constant(raw.cast());
    let proj = tape.matmul(x, binds.get("remap.patch.w")?)?;
    let proj = tape.add_row(proj, binds.get("remap.patch.b")?)?;
    let pos = positional(tape, binds.get("remap.pos")?, grid)?;
    let embeddings = tape.add(proj, pos)?;
    let positions = (0..grid.0)
        .flat_map(|r| (0..grid.1).map(move |c| (r, c)))
        .collect();
    Ok(PatchTokens {
        raw,
        grid,
        patch: cfg.patch_size,
        positions,
        embeddings,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Free,
    Shadow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainLabels {
    pub labels: Vec<Domain>,
    /// Mean mask value over each patch.
    pub coverage: Vec<f64>,
}

impl DomainLabels {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count(&self, domain: Domain) -> usize {
        self.labels.iter().filter(|&&l| l == domain).count()
    }
}

/// Label each `patch×patch` cell of the mask: shadow iff coverage `>= tau`.
pub fn partition_mask(mask: &ShadowMask, patch: usize, tau: f64) -> Result<DomainLabels> {
    let (h, w) = mask.size();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "mask {h}x{w} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let area = (patch * patch) as f64;
    let mut coverage = Vec::with_capacity(gh * gw);
    for r in 0..gh {
        for c in 0..gw {
            let mut acc = 0.0;
            for y in r * patch..(r + 1) * patch {
                acc += mask.data()[y * w + c * patch..y * w + (c + 1) * patch].iter().sum::<f64>();
            }
            coverage.push(acc / area);
        }
    }
    let labels = coverage
        .iter()
        .map(|&c| if c >= tau { Domain::Shadow } else { Domain::Free })
        .collect();
    Ok(DomainLabels { labels, coverage })
}

pub fn partition(tokens: &PatchTokens, mask: &ShadowMask, tau: f64) -> Result<DomainLabels> {
    let expected = (tokens.grid.0 * tokens.patch, tokens.grid.1 * tokens.patch);
    if mask.size() != expected {
        return Err(Error::shape(format!(
            "mask {:?} does not match tokenized image {expected:?}",
            mask.size()
        )));
    }
    partition_mask(mask, tokens.patch, tau)
}

pub struct Encoded {
    /// `[n, D]`
    pub tokens: Var,
    /// Attention matrices `[n, n]`, layer-major then head.
    pub attention: Vec<Var>,
}

fn linear<T: Element>(tape: &mut Tape<T>, binds: &Bindings, x: Var, prefix: &str) -> Result<Var> {
    let y = tape.matmul(x, binds.get(&format!("{prefix}.w"))?)?;
    tape.add_row(y, binds.get(&format!("{prefix}.b"))?)
}

fn layer_norm<T: Element>(tape: &mut Tape<T>, binds: &Bindings, x: Var, prefix: &str) -> Result<Var> {
    let g = binds.get(&format!("{prefix}.gain"))?;
    let b = binds.get(&format!("{prefix}.bias"))?;
    tape.layernorm(x, g, b, LN_EPS)
}

/// Add the per-label domain embedding and run the pre-norm transformer over
/// all tokens jointly.
pub fn encode<T: Element>(
    tape: &mut Tape<T>,
    binds: &Bindings,
    embeddings: Var,
    labels: &DomainLabels,
    cfg: &RemapperConfig,
) -> Result<Encoded> {
    let n = tape.shape(embeddings)[0];
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} tokens", labels.len())));
    }
    let mut onehot = vec![T::zero(); n * 2];
    for (i, l) in labels.labels.iter().enumerate() {
        onehot[i * 2 + usize::from(*l == Domain::Shadow)] = T::one();
    }
    let onehot = tape.constant(Tensor::new([n, 2], onehot)?);
    let dom = tape.matmul(onehot, binds.get("remap.domain")?)?;
    let mut x = tape.add(embeddings, dom)?;

    let dh = cfg.dim / cfg.heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut attention = Vec::with_capacity(cfg.layers * cfg.heads);
    for l in 0..cfg.layers {
        let p = |s: &str| format!("remap.layer{l}.{s}");
        let h = layer_norm(tape, binds, x, &p("ln1"))?;
        let q = linear(tape, binds, h, &p("attn.q"))?;
        let k = linear(tape, binds, h, &p("attn.k"))?;
        let v = linear(tape, binds, h, &p("attn.v"))?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let (lo, hi) = (hd * dh, (hd + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax(scores, 1)?;
            attention.push(attn);
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let o = linear(tape, binds, merged, &p("attn.o"))?;
        x = tape.add(x, o)?;

        let h = layer_norm(tape, binds, x, &p("ln2"))?;
        let f = tape.matmul(h, binds.get(&p("ffn.w1"))?)?;
        let f = tape.add_row(f, binds.get(&p("ffn.b1"))?)?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, binds.get(&p("ffn.w2"))?)?;
        let f = tape.add_row(f, binds.get(&p("ffn.b2"))?)?;
        x = tape.add(x, f)?;
    }
    let tokens = layer_norm(tape, binds, x, "remap.ln_out")?;
    Ok(Encoded { tokens, attention })
}

pub struct RegionEmbeddings {
    /// `[1, D]` mean of shadow tokens (zero if none).
    pub shadow: Var,
    /// `[1, D]` mean of shadow-free tokens (zero if none).
    pub free: Var,
    pub shadow_empty: bool,
    pub free_empty: bool,
}

fn group_mean<T: Element>(tape: &mut Tape<T>, encoded: Var, labels: &DomainLabels, which: Domain) -> Result<(Var, bool)> {
    let (n, d) = (tape.shape(encoded)[0], tape.shape(encoded)[1]);
    let count = labels.count(which);
    if count == 0 {
        return Ok((tape.constant(Tensor::zeros([1, d])), true));
    }
    let w = T::of(1.0 / count as f64);
    let sel = labels
        .labels
        .iter()
        .map(|&l| if l == which { w } else { T::zero() })
        .collect();
    let sel = tape.constant(Tensor::new([1, n], sel)?);
    Ok((tape.matmul(sel, encoded)?, false))
}

/// Average-pool the encoded tokens of each domain.
pub fn region_embed<T: Element>(tape: &mut Tape<T>, encoded: Var, labels: &DomainLabels) -> Result<RegionEmbeddings> {
    if tape.shape(encoded).len() != 2 || tape.shape(encoded)[0] != labels.len() {
        return Err(Error::shape(format!(
            "{} labels for encoded tokens {:?}",
            labels.len(),
            tape.shape(encoded)
        )));
    }
    let (shadow, shadow_empty) = group_mean(tape, encoded, labels, Domain::Shadow)?;
    let (free, free_empty) = group_mean(tape, encoded, labels, Domain::Free)?;
    Ok(RegionEmbeddings {
        shadow,
        free,
        shadow_empty,
        free_empty,
    })
}

/// Coarse output `I₁ = M⊙MLP(rgb, e_shadow, e_free) + (1−M)⊙img` as `[H·W, 3]`.
///
/// The MLP is only evaluated where `M > 0`; with an empty shadow region the
/// input passes through unchanged.
pub fn remap<T: Element>(
    tape: &mut Tape<T>,
    binds: &Bindings,
    img: &ImageTensor,
    mask: &ShadowMask,
    regions: &RegionEmbeddings,
    cfg: &RemapperConfig,
) -> Result<Var> {
    if img.size() != mask.size() {
        return Err(Error::shape(format!(
            "image {:?} and mask {:?} differ",
            img.size(),
            mask.size()
        )));
    }
    let hw = img.height() * img.width();
    let active: Vec<usize> = (0..hw).filter(|&p| mask.data()[p] > 0.0).collect();
    if regions.shadow_empty || active.is_empty() {
        return Ok(tape.constant(img.to_pixels()));
    }

    let pix: Vec<f64> = active
        .iter()
        .flat_map(|&p| img.data()[p * 3..p * 3 + 3].iter().copied())
        .collect();
    let pix = tape.constant(Tensor::from_f64([active.len(), 3], &pix)?);

    let cs = tape.matmul(regions.shadow, binds.get("remap.mlp.in_shadow")?)?;
    let cf = tape.matmul(regions.free, binds.get("remap.mlp.in_free")?)?;
    let cond = tape.add(cs, cf)?;
    let cond = tape.add_row(cond, binds.get("remap.mlp.in_bias")?)?;
    let h = tape.matmul(pix, binds.get("remap.mlp.in_rgb")?)?;
    let h = tape.add_row(h, cond)?;
    let mut h = tape.relu(h)?;
    for i in 1..cfg.mlp_hidden.len() {
        h = linear(tape, binds, h, &format!("remap.mlp.hidden{i}"))?;
        h = tape.relu(h)?;
    }
    let out = linear(tape, binds, h, "remap.mlp.out")?;
    let out = tape.sigmoid(out)?;
    let placed = tape.scatter_rows(out, active, hw)?;

    let mut m3 = Vec::with_capacity(hw * 3);
    let mut keep = Vec::with_capacity(hw * 3);
    for (p, &m) in mask.data().iter().enumerate() {
        for c in 0..3 {
            m3.push(m);
            keep.push((1.0 - m) * img.data()[p * 3 + c]);
        }
    }
    let m3 = tape.constant(Tensor::from_f64([hw, 3], &m3)?);
    let keep = tape.constant(Tensor::from_f64([hw, 3], &keep)?);
    let shadow_part = tape.mul(placed, m3)?;
    tape.add(shadow_part, keep)
}

pub struct RemapOutput {
    /// `[H·W, 3]`
    pub i1: Var,
    pub labels: DomainLabels,
    pub regions: RegionEmbeddings,
    pub attention: Vec<Var>,
}

/// Full coarse stage on an image whose size is a multiple of the patch size.
pub fn forward<T: Element>(
    tape: &mut Tape<T>,
    binds: &Bindings,
    img: &ImageTensor,
    mask: &ShadowMask,
    cfg: &RemapperConfig,
) -> Result<RemapOutput> {
    let tokens = tokenize(tape, binds, img, cfg)?;
    let labels = partition(&tokens, mask, cfg.tau)?;
    let encoded = encode(tape, binds, tokens.embeddings, &labels, cfg)?;
    let regions = region_embed(tape, encoded.tokens, &labels)?;
    let i1 = remap(tape, binds, img, mask, &regions, cfg)?;
    Ok(RemapOutput {
        i1,
        labels,
        regions,
        attention: encoded.attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> RemapperConfig {
        RemapperConfig {
            patch_size: 4,
            dim: 8,
            layers: 2,
            heads: 2,
            pos_grid: 2,
            mlp_hidden: vec![6, 5],
            ..Default::default()
        }
    }

    fn ramp(h: usize, w: usize) -> ImageTensor {
        let data = (0..h * w * 3).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        ImageTensor::new(h, w, data).unwrap()
    }

    fn params(cfg: &RemapperConfig) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        init_params(cfg, &mut ChaCha8Rng::seed_from_u64(3), &mut p);
        p
    }

    #[test]
    fn tokenize_counts_and_folds_back() {
        let img = ramp(8, 8);
        let cfg = small_cfg();
        let p = params(&cfg);
        let mut tape = Tape::new();
        let binds = p.bind(&mut tape, |_| true);
        let tokens = tokenize(&mut tape, &binds, &img, &cfg).unwrap();
        assert_eq!(tokens.len(), 4);
        assert_eq!(tape.shape(tokens.embeddings), &[4, 8]);
        assert_eq!(tokens.positions, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(fold(&tokens.raw, tokens.grid, 4).unwrap(), img);
        assert!(patchify(&ramp(8, 6), 4).is_err());
    }

    #[test]
    fn zero_projection_and_positions_give_zero_embeddings() {
        let cfg = small_cfg();
        let mut p = params(&cfg);
        for name in ["remap.patch.w", "remap.pos"] {
            p.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let binds = p.bind(&mut tape, |_| true);
        let tokens = tokenize(&mut tape, &binds, &ramp(8, 8), &cfg).unwrap();
        assert!(tape.value(tokens.embeddings).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn partition_examples() {
        let ones = ShadowMask::filled(8, 8, 1.0);
        let labels = partition_mask(&ones, 4, 0.5).unwrap();
        assert_eq!(labels.count(Domain::Shadow), 4);
        let labels = partition_mask(&ShadowMask::zeros(8, 8), 4, 0.5).unwrap();
        assert_eq!(labels.count(Domain::Free), 4);

        let top: Vec<f64> = (0..64).map(|i| if i < 32 { 1.0 } else { 0.0 }).collect();
        let labels = partition_mask(&ShadowMask::new(8, 8, top).unwrap(), 4, 0.5).unwrap();
        assert_eq!(labels.labels, vec![Domain::Shadow, Domain::Shadow, Domain::Free, Domain::Free]);
        assert_eq!(labels.coverage, vec![1.0, 1.0, 0.0, 0.0]);

        // coverage exactly at tau goes to shadow
        let half: Vec<f64> = (0..16).map(|i| if i < 8 { 1.0 } else { 0.0 }).collect();
        let labels = partition_mask(&ShadowMask::new(4, 4, half).unwrap(), 4, 0.5).unwrap();
        assert_eq!(labels.labels, vec![Domain::Shadow]);
    }

    #[test]
    fn region_embeddings_are_group_means() {
        let mut tape = Tape::<f64>::new();
        let enc = tape.constant(
            Tensor::new([3, 2], vec![1.0, 2.0, 3.0, 6.0, -1.0, 0.5]).unwrap(),
        );
        let labels = DomainLabels {
            labels: vec![Domain::Shadow, Domain::Shadow, Domain::Free],
            coverage: vec![1.0, 1.0, 0.0],
        };
        let r = region_embed(&mut tape, enc, &labels).unwrap();
        assert_eq!(tape.value(r.shadow).data(), &[2.0, 4.0]);
        assert_eq!(tape.value(r.free).data(), &[-1.0, 0.5]);
        assert!(!r.shadow_empty && !r.free_empty);

        let all_free = DomainLabels {
            labels: vec![Domain::Free; 3],
            coverage: vec![0.0; 3],
        };
        let r = region_embed(&mut tape, enc, &all_free).unwrap();
        assert!(r.shadow_empty);
        assert_eq!(tape.value(r.shadow).data(), &[0.0, 0.0]);
    }

    #[test]
    fn empty_mask_passes_image_through() {
        let cfg = small_cfg();
        let p = params(&cfg);
        let img = ramp(8, 8);
        let mut tape = Tape::new();
        let binds = p.bind(&mut tape, |_| true);
        let out = forward(&mut tape, &binds, &img, &ShadowMask::zeros(8, 8), &cfg).unwrap();
        assert_eq!(tape.value(out.i1).data(), img.data());
    }

    #[test]
    fn full_mask_output_is_mlp_everywhere_and_in_range() {
        let cfg = small_cfg();
        let p = params(&cfg);
        let img = ramp(8, 8);
        let mut tape = Tape::new();
        let binds = p.bind(&mut tape, |_| true);
        let out = forward(&mut tape, &binds, &img, &ShadowMask::filled(8, 8, 1.0), &cfg).unwrap();
        let v = tape.value(out.i1).data();
        assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
        assert!(v.iter().zip(img.data()).any(|(a, b)| a != b));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = small_cfg();
        let p = params(&cfg);
        let img = ramp(8, 12);
        let mask = ShadowMask::new(8, 12, (0..96).map(|i| if i % 12 < 5 { 1.0 } else { 0.0 }).collect()).unwrap();
        let mut tape = Tape::new();
        let binds = p.bind(&mut tape, |_| true);
        let out = forward(&mut tape, &binds, &img, &mask, &cfg).unwrap();
        assert_eq!(out.attention.len(), cfg.layers * cfg.heads);
        for a in out.attention {
            assert_eq!(tape.shape(a), &[6, 6]);
            for row in tape.value(a).data().chunks(6) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
