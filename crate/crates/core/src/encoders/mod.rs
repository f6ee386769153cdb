//! Toy vision encoders differing only in pretraining objective.
//!
//! Both variants share an identical trunk: a linear patch embedder
//! followed by transformer blocks with 1D rotary encoding over the
//! flattened patch order. The contrastive variant aligns a mean-pooled
//! image embedding with a bag-of-tokens caption embedding (InfoNCE);
//! the generative variant regresses the raw pixels of the next patch in
//! raster order under a causal mask. Only the objective head differs,
//! so any downstream difference is attributable to the objective.

mod pretrain;

pub use pretrain::{
    contrastive_loss,
    mean_patch_baseline, pretrain_contrastive, pretrain_generative, retrieval_at_1,
    PretrainConfig, PretrainReport,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{ops, NumericsError, RngStream, Scalar, Tensor};
use crate::params::Parameters;
use crate::rope::{assign_positions, PeScheme, PosIndex, RotaryEncoder};
use crate::transformer::{causal_mask, open_mask, TransformerBlock};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Scene(#[from] crate::scenegen::SceneError),
    #[error(transparent)]
    Vocab(#[from] crate::scenegen::VocabError),
    #[error("encoder config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

/// Which pretraining objective produced an encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EncoderVariant {
    #[serde(rename = "contrastive")]
    ContrastiveGlobal,
    #[serde(rename = "generative")]
    GenerativePatch,
}

impl EncoderVariant {
    pub const ALL: [EncoderVariant; 2] =
        [EncoderVariant::ContrastiveGlobal, EncoderVariant::GenerativePatch];

    pub fn label(&self) -> &'static str {
        match self {
            EncoderVariant::ContrastiveGlobal => "contrastive",
            EncoderVariant::GenerativePatch => "generative",
        }
    }
}

impl std::str::FromStr for EncoderVariant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "contrastive" => Ok(EncoderVariant::ContrastiveGlobal),
            "generative" => Ok(EncoderVariant::GenerativePatch),
            other => Err(format!("unknown encoder variant '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_v: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub rope_base: f64,
    /// MLP hidden width inside each block.
    pub mlp_hidden: usize,
    /// Shared image/text embedding width for the contrastive head.
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            d_v: 64,
            n_layers: 2,
            n_heads: 4,
            rope_base: 10000.0,
            mlp_hidden: 128,
            embed_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn patch_grid(&self) -> (usize, usize) {
        let side = self.image_size / self.patch_size;
        (side, side)
    }

    pub fn patch_count(&self) -> usize {
        let (r, c) = self.patch_grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(EncoderError::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.d_v % self.n_heads != 0 {
            return Err(EncoderError::Config(format!(
                "d_v {} not divisible by {} heads",
                self.d_v, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Element permutation mapping [3, S, S] to patch-major order: patch
/// vectors are channel-major within the patch ([ch][py][px]).
fn patchify_perm(image_size: usize, patch_size: usize) -> Vec<usize> {
    let s = image_size;
    let ps = patch_size;
    let side = s / ps;
    let mut perm = Vec::with_capacity(3 * s * s);
    for pr in 0..side {
        for pc in 0..side {
            for ch in 0..3 {
                for py in 0..ps {
                    for px in 0..ps {
                        let y = pr * ps + py;
                        let x = pc * ps + px;
                        perm.push(ch * s * s + y * s + x);
                    }
                }
            }
        }
    }
    perm
}

/// Splits an image into non-overlapping square patches in row-major
/// order. Lossless and differentiable; `unpatchify` is its inverse.
pub fn patchify<T: Scalar>(
    image: &Tensor<T>,
    patch_size: usize,
) -> Result<(Tensor<T>, (usize, usize))> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
        return Err(EncoderError::Config(format!(
            "expected [3, S, S] image, got {shape:?}"
        )));
    }
    let s = shape[1];
    if patch_size == 0 || s % patch_size != 0 {
        return Err(EncoderError::Config(format!(
            "image size {s} not divisible by patch size {patch_size}"
        )));
    }
    let side = s / patch_size;
    let perm = patchify_perm(s, patch_size);
    let tokens = ops::permute_elements(
        image,
        &perm,
        vec![side * side, 3 * patch_size * patch_size],
    )?;
    Ok((tokens, (side, side)))
}

/// Reassembles patch tokens into a [3, S, S] image.
pub fn unpatchify<T: Scalar>(
    tokens: &Tensor<T>,
    grid: (usize, usize),
    patch_size: usize,
) -> Result<Tensor<T>> {
    let (rows, cols) = grid;
    if rows != cols {
        return Err(EncoderError::Config(format!(
            "expected square patch grid, got {rows}x{cols}"
        )));
    }
    let s = rows * patch_size;
    let forward = patchify_perm(s, patch_size);
    let mut inverse = vec![0usize; forward.len()];
    for (dst, &src) in forward.iter().enumerate() {
        inverse[src] = dst;
    }
    Ok(ops::permute_elements(tokens, &inverse, vec![3, s, s])?)
}

/// The shared encoder trunk: patch embedder, transformer blocks, final
/// layer norm. This is the part handed to the fusion pipeline.
#[derive(Clone)]
pub struct EncoderTrunk<T: Scalar> {
    pub cfg: EncoderConfig,
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub blocks: Vec<TransformerBlock<T>>,
    pub ln_f_g: Tensor<T>,
    pub ln_f_b: Tensor<T>,
}

impl<T: Scalar> EncoderTrunk<T> {
    pub fn init(cfg: EncoderConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            patch_w: Tensor::randn(vec![cfg.patch_dim(), cfg.d_v], 0.02, rng),
            patch_b: Tensor::zeros(vec![cfg.d_v]),
            blocks: (0..cfg.n_layers)
                .map(|_| TransformerBlock::init(cfg.d_v, cfg.mlp_hidden, rng))
                .collect(),
            ln_f_g: Tensor::filled(vec![cfg.d_v], T::ONE),
            ln_f_b: Tensor::zeros(vec![cfg.d_v]),
            cfg,
        })
    }

    /// Embeds raw patch vectors; row p corresponds to patch p.
    pub fn embed_patches(&self, patch_tokens: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::add_bias(
            &ops::matmul(patch_tokens, &self.patch_w)?,
            &self.patch_b,
        )?)
    }

    /// Runs the trunk over embedded patches. `causal` raster-order
    /// masking is used only during generative pretraining; fusion and
    /// contrastive pretraining run bidirectionally.
    pub fn forward_tokens(&self, patch_tokens: &Tensor<T>, causal: bool) -> Result<Tensor<T>> {
        let p = self.cfg.patch_count();
        let (m, _) = patch_tokens.dims2("encoder")?;
        if m != p {
            return Err(EncoderError::Config(format!(
                "expected {p} patch tokens, got {m}"
            )));
        }
        let head_dim = self.cfg.d_v / self.cfg.n_heads;
        let rope = RotaryEncoder::new(PeScheme::Rope1D, head_dim, self.cfg.rope_base)
            .map_err(|e| EncoderError::Config(e.to_string()))?;
        let positions: Vec<PosIndex> = assign_positions(p, (1, 1), PeScheme::Rope1D)[..p].to_vec();
        let plan = rope.plan(&positions);
        let mask = if causal { causal_mask(p) } else { open_mask(p) };

        let mut h = self.embed_patches(patch_tokens)?;
        for block in &self.blocks {
            h = block.forward(&h, &plan, self.cfg.n_heads, &mask, None)?;
        }
        Ok(ops::layer_norm(&h, &self.ln_f_g, &self.ln_f_b, 1e-5)?)
    }

    /// Per-patch features for an image; no pooling, the fusion stage
    /// consumes all patch tokens.
    pub fn encode_image(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let (tokens, _) = patchify(image, self.cfg.patch_size)?;
        self.forward_tokens(&tokens, false)
    }
}

impl<T: Scalar> Parameters<T> for EncoderTrunk<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("patch.w", &self.patch_w);
        f("patch.b", &self.patch_b);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_prefixed(&format!("l{i}"), f);
        }
        f("ln_f.g", &self.ln_f_g);
        f("ln_f.b", &self.ln_f_b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("patch.w", &mut self.patch_w);
        f("patch.b", &mut self.patch_b);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_prefixed_mut(&format!("l{i}"), f);
        }
        f("ln_f.g", &mut self.ln_f_g);
        f("ln_f.b", &mut self.ln_f_b);
    }
}

/// Contrastive head: image projection, bag-of-tokens caption tower,
/// learnable temperature (stored as log temperature).
#[derive(Clone)]
pub struct ContrastiveHead<T: Scalar> {
    pub img_proj: Tensor<T>,
    pub text_embed: Tensor<T>,
    pub log_temp: Tensor<T>,
}

/// Generative head: linear regression from patch features to the raw
/// pixel vector of the next patch.
#[derive(Clone)]
pub struct GenerativeHead<T: Scalar> {
    pub pred_w: Tensor<T>,
    pub pred_b: Tensor<T>,
}

#[derive(Clone)]
pub enum ObjectiveHead<T: Scalar> {
    Contrastive(ContrastiveHead<T>),
    Generative(GenerativeHead<T>),
}

impl<T: Scalar> ObjectiveHead<T> {
    pub fn variant(&self) -> EncoderVariant {
        match self {
            ObjectiveHead::Contrastive(_) => EncoderVariant::ContrastiveGlobal,
            ObjectiveHead::Generative(_) => EncoderVariant::GenerativePatch,
        }
    }
}

/// Encoder plus its objective head, as trained in the pretraining phase.
#[derive(Clone)]
pub struct PretrainEncoder<T: Scalar> {
    pub trunk: EncoderTrunk<T>,
    pub head: ObjectiveHead<T>,
}

impl<T: Scalar> PretrainEncoder<T> {
    pub fn init(
        cfg: EncoderConfig,
        variant: EncoderVariant,
        vocab_size: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let trunk = EncoderTrunk::init(cfg, rng)?;
        let head = match variant {
            EncoderVariant::ContrastiveGlobal => ObjectiveHead::Contrastive(ContrastiveHead {
                img_proj: Tensor::randn(vec![cfg.d_v, cfg.embed_dim], 0.02, rng),
                text_embed: Tensor::randn(vec![vocab_size, cfg.embed_dim], 0.02, rng),
                // CLIP-style init: temperature 0.07 -> logit scale e^2.659.
                log_temp: Tensor::from_op(vec![1], vec![T::from_f64((1.0f64 / 0.07).ln())]),
            }),
            EncoderVariant::GenerativePatch => ObjectiveHead::Generative(GenerativeHead {
                pred_w: Tensor::randn(vec![cfg.d_v, cfg.patch_dim()], 0.02, rng),
                pred_b: Tensor::zeros(vec![cfg.patch_dim()]),
            }),
        };
        Ok(Self { trunk, head })
    }

    pub fn variant(&self) -> EncoderVariant {
        self.head.variant()
    }
}

impl<T: Scalar> Parameters<T> for PretrainEncoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.trunk.visit(f);
        match &self.head {
            ObjectiveHead::Contrastive(h) => {
                f("head.img_proj", &h.img_proj);
                f("head.text_embed", &h.text_embed);
                f("head.log_temp", &h.log_temp);
            }
            ObjectiveHead::Generative(h) => {
                f("head.pred_w", &h.pred_w);
                f("head.pred_b", &h.pred_b);
            }
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.trunk.visit_mut(f);
        match &mut self.head {
            ObjectiveHead::Contrastive(h) => {
                f("head.img_proj", &mut h.img_proj);
                f("head.text_embed", &mut h.text_embed);
                f("head.log_temp", &mut h.log_temp);
            }
            ObjectiveHead::Generative(h) => {
                f("head.pred_w", &mut h.pred_w);
                f("head.pred_b", &mut h.pred_b);
            }
        }
    }
}

/// True for trunk parameters, false for objective-head parameters.
pub fn is_trunk_param(name: &str) -> bool {
    !name.starts_with("head.")
}

#[cfg(test)]
mod tests;
