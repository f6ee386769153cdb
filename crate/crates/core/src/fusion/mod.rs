//! Multimodal fusion pipeline: a projection maps encoder features into
//! the language model's embedding space, and a small decoder LM
//! consumes [image tokens; question; answer] under a configurable
//! positional scheme. The attention mask is strictly causal over the
//! flattened order in both schemes; position encoding, not masking, is
//! the experimental variable.

mod train;

pub use train::{
    lm_warmup, tokenize_qa, train_stage1, train_stage2, train_variant, write_train_log,
    Stage1Report, Stage2Report, StepLog, TokenizedQa, TrainConfig, TrainedCell,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{EncoderConfig, EncoderError, EncoderTrunk, EncoderVariant};
use crate::numerics::{ops, NumericsError, RngStream, Scalar, Tensor};
use crate::params::Parameters;
use crate::rope::{
    assign_positions, text_continuation_start, PeScheme, PosIndex, RotaryEncoder,
};
use crate::scenegen::{SceneError, VocabError, EOS, IMG};
use crate::transformer::{causal_mask, TransformerBlock};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("fusion config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds the configured maximum {max}")]
    Overlong { len: usize, max: usize },
    #[error("stage-1 freezing contract broken: non-projection parameters changed")]
    FreezeViolation,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
}

pub type Result<T> = std::result::Result<T, FusionError>;

/// Decoder LM dimensions and sequence budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub d_lm: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// MLP hidden width inside each decoder block.
    pub d_ff: usize,
    pub max_seq: usize,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            d_lm: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq: 96,
            rope_base: 10000.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.d_lm % self.n_heads != 0 {
            return Err(FusionError::Config(format!(
                "d_lm {} not divisible by {} heads",
                self.d_lm, self.n_heads
            )));
        }
        let head_dim = self.d_lm / self.n_heads;
        if head_dim % 4 != 0 {
            return Err(FusionError::Config(format!(
                "head dim {head_dim} must be divisible by 4 for the 2D scheme"
            )));
        }
        Ok(())
    }
}

/// One cell of the experiment matrix: encoder objective x positional
/// scheme x seed, with all other hyperparameters shared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub encoder: EncoderVariant,
    pub pe: PeScheme,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl VariantConfig {
    /// Human-readable variant id, e.g. "generative-rope2d".
    pub fn variant_id(&self) -> String {
        format!("{}-{}", self.encoder.label(), self.pe.label())
    }

    pub fn cell_id(&self) -> String {
        format!("{}-seed{}", self.variant_id(), self.seed)
    }
}

/// Decoder language model with tied input/output embeddings.
#[derive(Clone)]
pub struct DecoderLm<T: Scalar> {
    pub cfg: ModelConfig,
    pub pe_scheme: PeScheme,
    pub token_embed: Tensor<T>,
    pub blocks: Vec<TransformerBlock<T>>,
    pub ln_f_g: Tensor<T>,
    pub ln_f_b: Tensor<T>,
}

impl<T: Scalar> DecoderLm<T> {
    pub fn init(
        cfg: ModelConfig,
        pe_scheme: PeScheme,
        vocab_size: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            token_embed: Tensor::randn(vec![vocab_size, cfg.d_lm], 0.02, rng),
            blocks: (0..cfg.n_layers)
                .map(|_| TransformerBlock::init(cfg.d_lm, cfg.d_ff, rng))
                .collect(),
            ln_f_g: Tensor::filled(vec![cfg.d_lm], T::ONE),
            ln_f_b: Tensor::zeros(vec![cfg.d_lm]),
            cfg,
            pe_scheme,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embed.shape()[0]
    }

    fn rope(&self) -> Result<RotaryEncoder> {
        RotaryEncoder::new(
            self.pe_scheme,
            self.cfg.d_lm / self.cfg.n_heads,
            self.cfg.rope_base,
        )
        .map_err(|e| FusionError::Config(e.to_string()))
    }
}

impl<T: Scalar> Parameters<T> for DecoderLm<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("embed", &self.token_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_prefixed(&format!("l{i}"), f);
        }
        f("ln_f.g", &self.ln_f_g);
        f("ln_f.b", &self.ln_f_b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("embed", &mut self.token_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_prefixed_mut(&format!("l{i}"), f);
        }
        f("ln_f.g", &mut self.ln_f_g);
        f("ln_f.b", &mut self.ln_f_b);
    }
}

/// Full fusion bundle: encoder trunk, projection, decoder LM.
#[derive(Clone)]
pub struct FusionModel<T: Scalar> {
    pub encoder: EncoderTrunk<T>,
    /// Projection from encoder feature space to LM embedding space; the
    /// only parameter updated in stage 1.
    pub proj: Tensor<T>,
    pub lm: DecoderLm<T>,
}

impl<T: Scalar> FusionModel<T> {
    pub fn init(
        cfg: ModelConfig,
        pe_scheme: PeScheme,
        vocab_size: usize,
        encoder: EncoderTrunk<T>,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if encoder.cfg != cfg.encoder {
            return Err(FusionError::Config(
                "encoder trunk config disagrees with the model config".into(),
            ));
        }
        Ok(Self {
            encoder,
            proj: Tensor::randn(vec![cfg.encoder.d_v, cfg.d_lm], 0.02, rng),
            lm: DecoderLm::init(cfg, pe_scheme, vocab_size, rng)?,
        })
    }

    pub fn pe_scheme(&self) -> PeScheme {
        self.lm.pe_scheme
    }
}

impl<T: Scalar> Parameters<T> for FusionModel<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        let mut wrap = |name: &str, t: &Tensor<T>| f(&format!("enc.{name}"), t);
        self.encoder.visit(&mut wrap);
        f("proj.w", &self.proj);
        let mut wrap = |name: &str, t: &Tensor<T>| f(&format!("lm.{name}"), t);
        self.lm.visit(&mut wrap);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        let mut wrap = |name: &str, t: &mut Tensor<T>| f(&format!("enc.{name}"), t);
        self.encoder.visit_mut(&mut wrap);
        f("proj.w", &mut self.proj);
        let mut wrap = |name: &str, t: &mut Tensor<T>| f(&format!("lm.{name}"), t);
        self.lm.visit_mut(&mut wrap);
    }
}

pub fn is_projection_param(name: &str) -> bool {
    name == "proj.w"
}

/// Projects encoder features into LM space: H_v = features * W.
pub fn project<T: Scalar>(features: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(ops::matmul(features, w)?)
}

/// A built multimodal sequence: embeddings in [image; question; answer]
/// order, token ids (image slots carry the IMG marker), and positions.
pub struct MultimodalSequence<T: Scalar> {
    pub embeddings: Tensor<T>,
    pub token_ids: Vec<u32>,
    pub positions: Vec<PosIndex>,
    pub img_len: usize,
    pub question_len: usize,
    /// Answer length including EOS; zero at inference.
    pub answer_len: usize,
}

impl<T: Scalar> MultimodalSequence<T> {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Positions for a multimodal sequence laid out [image; question;
/// trailing text]. Question tokens take the text positions of
/// `assign_positions`; answer tokens continue on the diagonal after the
/// image block, so training and decoding see identical geometry.
pub fn sequence_positions(
    question_len: usize,
    trailing_len: usize,
    grid: (usize, usize),
    scheme: PeScheme,
) -> Vec<PosIndex> {
    let assigned = assign_positions(question_len, grid, scheme);
    let (text, image) = assigned.split_at(question_len);
    let mut positions = Vec::with_capacity(image.len() + question_len + trailing_len);
    positions.extend_from_slice(image);
    positions.extend_from_slice(text);
    let start = text_continuation_start(question_len, grid, scheme);
    for j in 0..trailing_len {
        positions.push(PosIndex::text(start + j));
    }
    positions
}

/// Builds the training/inference sequence. With `answer` present, an
/// EOS token is appended and included in `answer_len`.
pub fn build_sequence<T: Scalar>(
    h_v: &Tensor<T>,
    lm: &DecoderLm<T>,
    question: &[u32],
    answer: Option<&[u32]>,
    grid: (usize, usize),
) -> Result<MultimodalSequence<T>> {
    if question.is_empty() {
        return Err(FusionError::Config("question must be nonempty".into()));
    }
    let (img_len, d) = h_v.dims2("build_sequence")?;
    if img_len != grid.0 * grid.1 {
        return Err(FusionError::Config(format!(
            "{img_len} image tokens for a {}x{} grid",
            grid.0, grid.1
        )));
    }
    if d != lm.cfg.d_lm {
        return Err(NumericsError::ShapeMismatch {
            op: "build_sequence",
            lhs: h_v.shape().to_vec(),
            rhs: vec![lm.cfg.d_lm],
        }
        .into());
    }

    let mut text_ids: Vec<u32> = question.to_vec();
    let answer_len = match answer {
        Some(a) => {
            text_ids.extend_from_slice(a);
            text_ids.push(EOS);
            a.len() + 1
        }
        None => 0,
    };
    let len = img_len + text_ids.len();
    if len > lm.cfg.max_seq {
        return Err(FusionError::Overlong {
            len,
            max: lm.cfg.max_seq,
        });
    }

    let ids_usize: Vec<usize> = text_ids.iter().map(|&t| t as usize).collect();
    let text_embed = ops::embedding(&lm.token_embed, &ids_usize)?;
    let embeddings = ops::concat_rows(&[h_v, &text_embed])?;

    let mut token_ids = vec![IMG; img_len];
    token_ids.extend_from_slice(&text_ids);
    let positions = sequence_positions(question.len(), answer_len, grid, lm.pe_scheme);
    debug_assert_eq!(positions.len(), len);

    Ok(MultimodalSequence {
        embeddings,
        token_ids,
        positions,
        img_len,
        question_len: question.len(),
        answer_len,
    })
}

/// Attention probabilities recorded during a forward pass:
/// `per_layer[layer][head]` is the [L, L] row-stochastic matrix.
pub struct AttentionRecord<T: Scalar> {
    pub per_layer: Vec<Vec<Tensor<T>>>,
}

/// Runs the decoder over a built sequence, returning final hidden
/// states [L, d_lm].
pub fn forward_hidden<T: Scalar>(
    lm: &DecoderLm<T>,
    seq: &MultimodalSequence<T>,
    mut record: Option<&mut AttentionRecord<T>>,
) -> Result<Tensor<T>> {
    let rope = lm.rope()?;
    let plan = rope.plan(&seq.positions);
    let mask = causal_mask(seq.len());
    let mut h = seq.embeddings.clone();
    for block in &lm.blocks {
        let mut sink = record.as_deref_mut().map(|_| Vec::new());
        h = block.forward(&h, &plan, lm.cfg.n_heads, &mask, sink.as_mut())?;
        if let (Some(rec), Some(sink)) = (record.as_deref_mut(), sink) {
            rec.per_layer.push(sink);
        }
    }
    Ok(ops::layer_norm(&h, &lm.ln_f_g, &lm.ln_f_b, 1e-5)?)
}

/// Logits against the tied embedding table: [L, vocab].
pub fn logits<T: Scalar>(lm: &DecoderLm<T>, hidden: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(ops::matmul_nt(hidden, &lm.token_embed)?)
}

/// Next-token targets masked to answer positions only: position i
/// predicts token i+1, and only answer tokens (and the final EOS) are
/// scored. Image and question predictions receive exactly zero
/// gradient through the masked cross entropy.
pub fn answer_targets<T: Scalar>(seq: &MultimodalSequence<T>) -> Result<Vec<Option<usize>>> {
    if seq.answer_len == 0 {
        return Err(FusionError::Config(
            "training sequence has no answer tokens".into(),
        ));
    }
    let len = seq.len();
    let answer_start = seq.img_len + seq.question_len;
    let mut targets = vec![None; len];
    for predictor in answer_start - 1..len - 1 {
        targets[predictor] = Some(seq.token_ids[predictor + 1] as usize);
    }
    Ok(targets)
}

/// Cross entropy of the answer tokens given image and question.
pub fn forward_loss<T: Scalar>(
    model: &FusionModel<T>,
    seq: &MultimodalSequence<T>,
) -> Result<Tensor<T>> {
    let targets = answer_targets(seq)?;
    let hidden = forward_hidden(&model.lm, seq, None)?;
    let lg = logits(&model.lm, &hidden)?;
    Ok(ops::cross_entropy_masked(&lg, &targets)?)
}

/// Encodes an image and projects it into LM space.
pub fn image_tokens<T: Scalar>(model: &FusionModel<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let features = model.encoder.encode_image(image)?;
    project(&features, &model.proj)
}

pub const MAX_ANSWER_TOKENS: usize = 4;

/// Greedy decoding from the answer position until EOS or the token cap.
/// Ties break toward the lowest token id. Returns answer tokens without
/// the EOS.
pub fn generate_answer<T: Scalar>(
    model: &FusionModel<T>,
    image: &Tensor<T>,
    question: &[u32],
) -> Result<Vec<u32>> {
    let h_v = image_tokens(model, image)?;
    generate_with_image_tokens(model, &h_v, question, None)
}

/// Decoding core shared with the position-shuffle probe: optionally
/// overrides the image-token positions (features untouched).
pub fn generate_with_image_tokens<T: Scalar>(
    model: &FusionModel<T>,
    h_v: &Tensor<T>,
    question: &[u32],
    image_position_override: Option<&[PosIndex]>,
) -> Result<Vec<u32>> {
    let grid = model.encoder.cfg.patch_grid();
    let mut generated: Vec<u32> = Vec::new();
    loop {
        let mut seq = build_sequence(h_v, &model.lm, question, None, grid)?;
        // Generated tokens continue the trailing-text diagonal.
        if !generated.is_empty() {
            let ids: Vec<usize> = generated.iter().map(|&t| t as usize).collect();
            let gen_embed = ops::embedding(&model.lm.token_embed, &ids)?;
            seq.embeddings = ops::concat_rows(&[&seq.embeddings, &gen_embed])?;
            seq.token_ids.extend_from_slice(&generated);
            seq.positions = sequence_positions(
                question.len(),
                generated.len(),
                grid,
                model.lm.pe_scheme,
            );
            if seq.len() > model.lm.cfg.max_seq {
                return Err(FusionError::Overlong {
                    len: seq.len(),
                    max: model.lm.cfg.max_seq,
                });
            }
        }
        if let Some(ps) = image_position_override {
            debug_assert_eq!(ps.len(), seq.img_len);
            seq.positions[..seq.img_len].copy_from_slice(ps);
        }

        let hidden = forward_hidden(&model.lm, &seq, None)?;
        let lg = logits(&model.lm, &hidden)?;
        let vocab = model.lm.vocab_size();
        let last = &lg.data()[(seq.len() - 1) * vocab..seq.len() * vocab];
        let mut best = 0usize;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        if best as u32 == EOS {
            return Ok(generated);
        }
        generated.push(best as u32);
        if generated.len() >= MAX_ANSWER_TOKENS {
            return Ok(generated);
        }
    }
}

#[cfg(test)]
mod tests;
