//! Encoder pretraining loops.

use super::{
    patchify, ContrastiveHead, EncoderError, EncoderVariant, ObjectiveHead, PretrainEncoder,
    Result,
};
use crate::numerics::{ops, Adam, AdamConfig, RngStream, Scalar, Tape, Tensor};
use crate::params::{apply_updates, bind, extract_grads};
use crate::scenegen::{render, CaptionRecord, SceneSpec, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 16,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
}

impl PretrainReport {
    pub fn first(&self) -> f64 {
        *self.losses.first().unwrap_or(&f64::NAN)
    }

    /// Mean of the final 10% of steps, a stabler "final loss" than the
    /// last step alone.
    pub fn tail_mean(&self) -> f64 {
        let n = (self.losses.len() / 10).max(1);
        let tail = &self.losses[self.losses.len() - n..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

fn l2_normalized_row<T: Scalar>(x: &Tensor<T>) -> crate::numerics::Result<Tensor<T>> {
    ops::normalize_rows(x, 1e-8)
}

/// Mean-pooled, projected, unit-norm image embedding: [1, embed_dim].
pub(crate) fn image_embedding<T: Scalar>(
    model: &PretrainEncoder<T>,
    head: &ContrastiveHead<T>,
    image: &Tensor<T>,
) -> Result<Tensor<T>> {
    let features = model.trunk.encode_image(image)?;
    let pooled = ops::mean_rows(&features)?;
    let projected = ops::matmul(&pooled, &head.img_proj)?;
    Ok(l2_normalized_row(&projected)?)
}

/// Bag-of-tokens caption embedding: mean of token embeddings, unit
/// norm. The weakest text tower sufficient for global alignment.
pub(crate) fn text_embedding<T: Scalar>(
    head: &ContrastiveHead<T>,
    token_ids: &[usize],
) -> Result<Tensor<T>> {
    let embedded = ops::embedding(&head.text_embed, token_ids)?;
    let pooled = ops::mean_rows(&embedded)?;
    Ok(l2_normalized_row(&pooled)?)
}

/// Symmetric InfoNCE over in-batch pairs. Exposed for tests; the loss
/// at uniform similarity is exactly ln(batch).
pub fn contrastive_loss<T: Scalar>(
    model: &PretrainEncoder<T>,
    batch: &[(Tensor<T>, Vec<usize>)],
) -> Result<Tensor<T>> {
    let ObjectiveHead::Contrastive(head) = &model.head else {
        return Err(EncoderError::Config(
            "contrastive loss requires a contrastive head".into(),
        ));
    };
    if batch.len() < 2 {
        return Err(EncoderError::Config(format!(
            "contrastive loss needs a batch of at least 2 pairs, got {}",
            batch.len()
        )));
    }
    let mut img_rows = Vec::with_capacity(batch.len());
    let mut txt_rows = Vec::with_capacity(batch.len());
    for (image, ids) in batch {
        img_rows.push(image_embedding(model, head, image)?);
        txt_rows.push(text_embedding(head, ids)?);
    }
    let img_refs: Vec<&Tensor<T>> = img_rows.iter().collect();
    let txt_refs: Vec<&Tensor<T>> = txt_rows.iter().collect();
    let img_mat = ops::concat_rows(&img_refs)?;
    let txt_mat = ops::concat_rows(&txt_refs)?;

    let sims = ops::matmul_nt(&img_mat, &txt_mat)?;
    let logits = ops::mul_scalar_t(&sims, &ops::exp(&head.log_temp))?;
    let targets: Vec<usize> = (0..batch.len()).collect();
    let img_to_txt = ops::cross_entropy(&logits, &targets)?;
    let txt_to_img = ops::cross_entropy(&ops::transpose(&logits)?, &targets)?;
    Ok(ops::scale(&ops::add(&img_to_txt, &txt_to_img)?, 0.5))
}

/// Pretrains a contrastive-head encoder on (image, caption) pairs.
pub fn pretrain_contrastive<T: Scalar>(
    model: &mut PretrainEncoder<T>,
    data: &[CaptionRecord],
    vocab: &Vocab,
    cfg: &PretrainConfig,
    rng: &mut RngStream,
) -> Result<PretrainReport> {
    if model.variant() != EncoderVariant::ContrastiveGlobal {
        return Err(EncoderError::Config(
            "pretrain_contrastive requires the contrastive variant".into(),
        ));
    }
    if cfg.batch_size < 2 {
        return Err(EncoderError::Config(
            "contrastive pretraining is undefined for batch size < 2".into(),
        ));
    }
    if data.is_empty() {
        return Err(EncoderError::Config("empty caption dataset".into()));
    }

    let image_size = model.trunk.cfg.image_size;
    let mut opt = Adam::new(AdamConfig::default());
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let record = &data[rng.below(data.len())];
            let image = render::<T>(&record.scene, image_size)?;
            let ids: Vec<usize> = vocab
                .encode(&record.caption)?
                .into_iter()
                .map(|t| t as usize)
                .collect();
            batch.push((image, ids));
        }

        let tape = Tape::new();
        let bound = bind(model, &tape, &|_| true);
        let loss = contrastive_loss(&bound, &batch)?;
        losses.push(loss.item()?.to_f64());
        let grads = tape.backward(&loss)?;
        let gmap = extract_grads(&bound, &grads);
        drop(bound);
        apply_updates(model, &gmap, &mut opt, cfg.lr);
    }
    Ok(PretrainReport { losses })
}

/// Per-item generative loss: predict the raw pixels of patch t+1 from
/// features of patches <= t (causal trunk), mean squared error.
fn generative_loss_one<T: Scalar>(
    model: &PretrainEncoder<T>,
    image: &Tensor<T>,
) -> Result<Tensor<T>> {
    let ObjectiveHead::Generative(head) = &model.head else {
        return Err(EncoderError::Config(
            "generative loss requires a generative head".into(),
        ));
    };
    let (tokens, _) = patchify(image, model.trunk.cfg.patch_size)?;
    let p = model.trunk.cfg.patch_count();
    let features = model.trunk.forward_tokens(&tokens, true)?;
    let preds = ops::add_bias(&ops::matmul(&features, &head.pred_w)?, &head.pred_b)?;
    let preds_head = ops::slice_rows(&preds, 0, p - 1)?;
    let dim = model.trunk.cfg.patch_dim();
    // Targets are constants: gradient flows only through the features.
    let target = tokens.data()[dim..p * dim].to_vec();
    Ok(ops::mse_to(&preds_head, &target)?)
}

/// Pretrains a generative-head encoder by autoregressive raster-order
/// patch regression.
pub fn pretrain_generative<T: Scalar>(
    model: &mut PretrainEncoder<T>,
    scenes: &[SceneSpec],
    cfg: &PretrainConfig,
    rng: &mut RngStream,
) -> Result<PretrainReport> {
    if model.variant() != EncoderVariant::GenerativePatch {
        return Err(EncoderError::Config(
            "pretrain_generative requires the generative variant".into(),
        ));
    }
    if scenes.is_empty() {
        return Err(EncoderError::Config("empty scene dataset".into()));
    }

    let image_size = model.trunk.cfg.image_size;
    let mut opt = Adam::new(AdamConfig::default());
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let tape = Tape::new();
        let bound = bind(model, &tape, &|_| true);
        let mut batch_losses = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let scene = &scenes[rng.below(scenes.len())];
            let image = render::<T>(scene, image_size)?;
            batch_losses.push(generative_loss_one(&bound, &image)?);
        }
        let refs: Vec<&Tensor<T>> = batch_losses.iter().collect();
        let stacked = ops::concat_rows(&refs)?;
        let loss = ops::scale(&ops::sum_all(&stacked), 1.0 / cfg.batch_size as f64);
        losses.push(loss.item()?.to_f64());
        let grads = tape.backward(&loss)?;
        let gmap = extract_grads(&bound, &grads);
        drop(bound);
        apply_updates(model, &gmap, &mut opt, cfg.lr);
    }
    Ok(PretrainReport { losses })
}

/// Loss of the constant mean-patch predictor on next-patch regression:
/// the per-pixel variance of target patches. Any model must beat this
/// to demonstrate it learned anything.
pub fn mean_patch_baseline(scenes: &[SceneSpec], image_size: usize, patch_size: usize) -> f64 {
    let dim = 3 * patch_size * patch_size;
    let mut count = 0usize;
    let mut mean = vec![0.0f64; dim];
    let mut m2 = vec![0.0f64; dim];
    for scene in scenes {
        let image = render::<f64>(scene, image_size).expect("renderable scene");
        let (tokens, _) = patchify(&image, patch_size).expect("patchify");
        let p = tokens.shape()[0];
        // Welford over target patches (positions 1..P).
        for row in tokens.data()[dim..p * dim].chunks_exact(dim) {
            count += 1;
            for (j, &v) in row.iter().enumerate() {
                let delta = v - mean[j];
                mean[j] += delta / count as f64;
                m2[j] += delta * (v - mean[j]);
            }
        }
    }
    m2.iter().map(|v| v / count as f64).sum::<f64>() / dim as f64
}

/// Image-to-text retrieval accuracy at rank 1 over held-out pairs.
/// Retrieving any caption with identical text counts as correct.
pub fn retrieval_at_1<T: Scalar>(
    model: &PretrainEncoder<T>,
    data: &[CaptionRecord],
    vocab: &Vocab,
) -> Result<f64> {
    let ObjectiveHead::Contrastive(head) = &model.head else {
        return Err(EncoderError::Config(
            "retrieval eval requires a contrastive head".into(),
        ));
    };
    let image_size = model.trunk.cfg.image_size;
    let mut txt_rows = Vec::with_capacity(data.len());
    for r in data {
        let ids: Vec<usize> = vocab
            .encode(&r.caption)?
            .into_iter()
            .map(|t| t as usize)
            .collect();
        txt_rows.push(text_embedding(head, &ids)?);
    }
    let mut correct = 0usize;
    for (i, r) in data.iter().enumerate() {
        let image = render::<T>(&r.scene, image_size)?;
        let img = image_embedding(model, head, &image)?;
        let mut best = 0usize;
        let mut best_sim = f64::NEG_INFINITY;
        for (j, txt) in txt_rows.iter().enumerate() {
            let sim: f64 = img
                .data()
                .iter()
                .zip(txt.data())
                .map(|(&a, &b)| (a * b).to_f64())
                .sum();
            if sim > best_sim {
                best_sim = sim;
                best = j;
            }
        }
        if best == i || data[best].caption == r.caption {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
