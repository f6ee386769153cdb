//! LM warm-up plus the two-stage training recipe.
//!
//! Stage 1 updates only the projection; a digest of every other
//! parameter is taken before and after and must match bit-exactly.
//! Stage 2 (instruction tuning) updates all parameters. Because the
//! backbone is trained from scratch rather than loaded, a short
//! text-only warm-up precedes stage 1 so that freezing everything but
//! the projection is meaningful.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    build_sequence, forward_loss, image_tokens, is_projection_param, FusionError, FusionModel,
    Result,
};
use crate::encoders::{EncoderTrunk, PretrainConfig};
use crate::numerics::{ops, Adam, AdamConfig, RngStream, Scalar, Tape, Tensor};
use crate::params::{apply_updates, bind, digest, digest_hex, extract_grads};
use crate::rope::PosIndex;
use crate::scenegen::{render, CaptionRecord, QARecord, Vocab, BOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub warmup_lm_steps: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub lr_warmup_lm: f64,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    /// Linear LR ramp length at the start of each stage.
    pub lr_ramp_steps: usize,
    pub encoder_pretrain: PretrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_lm_steps: 300,
            stage1_steps: 400,
            stage2_steps: 1400,
            batch_size: 8,
            lr_warmup_lm: 1e-3,
            lr_stage1: 1e-3,
            lr_stage2: 4e-4,
            lr_ramp_steps: 30,
            encoder_pretrain: PretrainConfig::default(),
        }
    }
}

fn ramped(lr: f64, step: usize, ramp: usize) -> f64 {
    if ramp == 0 {
        lr
    } else {
        lr * ((step + 1) as f64 / ramp as f64).min(1.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

/// Writes a per-run training log: step,loss,lr,wall_ms.
pub fn write_train_log(logs: &[StepLog], path: &Path) -> std::io::Result<()> {
    let mut out = String::from("step,loss,lr,wall_ms\n");
    for l in logs {
        out.push_str(&format!("{},{},{},{:.3}\n", l.step, l.loss, l.lr, l.wall_ms));
    }
    std::fs::write(path, out)
}

/// Batches drawn uniformly over records by grouping equal-shape items,
/// so no padding is ever needed.
struct GroupedSampler {
    groups: Vec<Vec<usize>>,
    total: usize,
}

impl GroupedSampler {
    fn new<K: std::hash::Hash + Eq + Ord>(keys: Vec<K>) -> Self {
        let mut map: std::collections::BTreeMap<K, Vec<usize>> = Default::default();
        for (i, k) in keys.into_iter().enumerate() {
            map.entry(k).or_default().push(i);
        }
        let groups: Vec<Vec<usize>> = map.into_values().collect();
        let total = groups.iter().map(|g| g.len()).sum();
        Self { groups, total }
    }

    /// Picks a group with probability proportional to its size, then
    /// draws `n` members with replacement.
    fn sample(&self, n: usize, rng: &mut RngStream) -> Vec<usize> {
        let mut r = rng.below(self.total);
        let mut group = &self.groups[0];
        for g in &self.groups {
            if r < g.len() {
                group = g;
                break;
            }
            r -= g.len();
        }
        (0..n).map(|_| group[rng.below(group.len())]).collect()
    }
}

/// QA record tokenized against a vocabulary.
#[derive(Debug, Clone)]
pub struct TokenizedQa {
    pub record: QARecord,
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
}

pub fn tokenize_qa(records: &[QARecord], vocab: &Vocab) -> Result<Vec<TokenizedQa>> {
    records
        .iter()
        .map(|r| {
            Ok(TokenizedQa {
                question: vocab.encode(&r.question)?,
                answer: vocab.encode(&r.answer)?,
                record: r.clone(),
            })
        })
        .collect()
}

/// Text-only next-token loss over [BOS, caption..., EOS].
fn caption_text_loss<T: Scalar>(
    model: &FusionModel<T>,
    caption_ids: &[u32],
) -> Result<Tensor<T>> {
    let lm = &model.lm;
    let mut ids: Vec<u32> = Vec::with_capacity(caption_ids.len() + 2);
    ids.push(BOS);
    ids.extend_from_slice(caption_ids);
    ids.push(crate::scenegen::EOS);
    let ids_usize: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
    let embeddings = ops::embedding(&lm.token_embed, &ids_usize)?;
    let positions: Vec<PosIndex> = (0..ids.len()).map(PosIndex::text).collect();
    let seq = super::MultimodalSequence {
        embeddings,
        token_ids: ids,
        positions,
        img_len: 0,
        question_len: 1,
        answer_len: ids_usize.len() - 1,
    };
    let hidden = super::forward_hidden(lm, &seq, None)?;
    let lg = super::logits(lm, &hidden)?;
    let targets = super::answer_targets(&seq)?;
    Ok(ops::cross_entropy_masked(&lg, &targets)?)
}

fn batch_mean<T: Scalar>(losses: Vec<Tensor<T>>) -> Result<Tensor<T>> {
    let refs: Vec<&Tensor<T>> = losses.iter().collect();
    let stacked = ops::concat_rows(&refs)?;
    Ok(ops::scale(&ops::sum_all(&stacked), 1.0 / refs.len() as f64))
}

fn check_finite(loss: f64, step: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(FusionError::NonFiniteLoss { step })
    }
}

/// Pre-trains the language model alone on caption text.
pub fn lm_warmup<T: Scalar>(
    model: &mut FusionModel<T>,
    captions: &[CaptionRecord],
    vocab: &Vocab,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Vec<StepLog>> {
    if captions.is_empty() {
        return Err(FusionError::Config("empty caption dataset".into()));
    }
    let tokenized: Vec<Vec<u32>> = captions
        .iter()
        .map(|c| vocab.encode(&c.caption).map_err(Into::into))
        .collect::<Result<_>>()?;
    let sampler = GroupedSampler::new(tokenized.iter().map(|t| t.len()).collect());
    let mut opt = Adam::new(AdamConfig::default());
    let mut logs = Vec::with_capacity(cfg.warmup_lm_steps);
    for step in 0..cfg.warmup_lm_steps {
        let t0 = Instant::now();
        let tape = Tape::new();
        let bound = bind(model, &tape, &|name| name.starts_with("lm."));
        let idx = sampler.sample(cfg.batch_size, rng);
        let mut losses = Vec::with_capacity(idx.len());
        for i in idx {
            losses.push(caption_text_loss(&bound, &tokenized[i])?);
        }
        let loss = batch_mean(losses)?;
        let loss_v = check_finite(loss.item()?.to_f64(), step)?;
        let grads = tape.backward(&loss)?;
        let gmap = extract_grads(&bound, &grads);
        drop(bound);
        let lr = ramped(cfg.lr_warmup_lm, step, cfg.lr_ramp_steps);
        apply_updates(model, &gmap, &mut opt, lr);
        logs.push(StepLog {
            step,
            loss: loss_v,
            lr,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(logs)
}

#[derive(Debug, Clone)]
pub struct Stage1Report {
    pub logs: Vec<StepLog>,
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
}

impl Stage1Report {
    pub fn freezing_held(&self) -> bool {
        self.frozen_digest_before == self.frozen_digest_after
    }
}

/// Stage 1: next-token prediction of the caption given the image, with
/// optimizer updates restricted to the projection. The digest of every
/// non-projection parameter must be bit-identical before and after;
/// any drift is a hard failure.
pub fn train_stage1<T: Scalar>(
    model: &mut FusionModel<T>,
    captions: &[CaptionRecord],
    vocab: &Vocab,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Stage1Report> {
    if captions.is_empty() {
        return Err(FusionError::Config("empty caption dataset".into()));
    }
    let frozen = |name: &str| !is_projection_param(name);
    let digest_before = digest_hex(&digest(model, &frozen));

    let tokenized: Vec<(usize, Vec<u32>)> = captions
        .iter()
        .enumerate()
        .map(|(i, c)| vocab.encode(&c.caption).map(|t| (i, t)).map_err(Into::into))
        .collect::<Result<_>>()?;
    let sampler = GroupedSampler::new(tokenized.iter().map(|(_, t)| t.len()).collect());
    let image_size = model.encoder.cfg.image_size;
    let grid = model.encoder.cfg.patch_grid();

    let mut opt = Adam::new(AdamConfig::default());
    let mut logs = Vec::with_capacity(cfg.stage1_steps);
    for step in 0..cfg.stage1_steps {
        let t0 = Instant::now();
        let tape = Tape::new();
        let bound = bind(model, &tape, &|name| is_projection_param(name));
        let idx = sampler.sample(cfg.batch_size, rng);
        let mut losses = Vec::with_capacity(idx.len());
        for i in idx {
            let (rec_i, caption_ids) = &tokenized[i];
            let record = &captions[*rec_i];
            let image = render::<T>(&record.scene, image_size)?;
            let h_v = image_tokens(&bound, &image)?;
            let seq = build_sequence(&h_v, &bound.lm, &[BOS], Some(caption_ids), grid)?;
            losses.push(forward_loss(&bound, &seq)?);
        }
        let loss = batch_mean(losses)?;
        let loss_v = check_finite(loss.item()?.to_f64(), step)?;
        let grads = tape.backward(&loss)?;
        let gmap = extract_grads(&bound, &grads);
        drop(bound);
        let lr = ramped(cfg.lr_stage1, step, cfg.lr_ramp_steps);
        apply_updates(model, &gmap, &mut opt, lr);
        logs.push(StepLog {
            step,
            loss: loss_v,
            lr,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }

    let digest_after = digest_hex(&digest(model, &frozen));
    let report = Stage1Report {
        logs,
        frozen_digest_before: digest_before,
        frozen_digest_after: digest_after,
    };
    if !report.freezing_held() {
        return Err(FusionError::FreezeViolation);
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct Stage2Report {
    pub logs: Vec<StepLog>,
    pub epochs_completed: usize,
}

/// Stage 2: instruction tuning on QA records; every parameter updates.
/// Aborts with the step number if the loss goes non-finite. When
/// `ckpt_dir` is given, a checkpoint is written at each epoch boundary
/// (one epoch = one full pass worth of samples).
pub fn train_stage2<T: Scalar>(
    model: &mut FusionModel<T>,
    data: &[TokenizedQa],
    cfg: &TrainConfig,
    rng: &mut RngStream,
    ckpt_dir: Option<&Path>,
) -> Result<Stage2Report> {
    if data.is_empty() {
        return Err(FusionError::Config("empty QA dataset".into()));
    }
    let sampler =
        GroupedSampler::new(data.iter().map(|d| (d.question.len(), d.answer.len())).collect());
    let image_size = model.encoder.cfg.image_size;
    let grid = model.encoder.cfg.patch_grid();
    let steps_per_epoch = (data.len() + cfg.batch_size - 1) / cfg.batch_size;

    let mut opt = Adam::new(AdamConfig::default());
    let mut logs = Vec::with_capacity(cfg.stage2_steps);
    let mut epochs = 0usize;
    for step in 0..cfg.stage2_steps {
        let t0 = Instant::now();
        let tape = Tape::new();
        let bound = bind(model, &tape, &|_| true);
        let idx = sampler.sample(cfg.batch_size, rng);
        let mut losses = Vec::with_capacity(idx.len());
        for i in idx {
            let item = &data[i];
            let image = render::<T>(&item.record.scene, image_size)?;
            let h_v = image_tokens(&bound, &image)?;
            let seq = build_sequence(&h_v, &bound.lm, &item.question, Some(&item.answer), grid)?;
            losses.push(forward_loss(&bound, &seq)?);
        }
        let loss = batch_mean(losses)?;
        let loss_v = check_finite(loss.item()?.to_f64(), step)?;
        let grads = tape.backward(&loss)?;
        let gmap = extract_grads(&bound, &grads);
        drop(bound);
        let lr = ramped(cfg.lr_stage2, step, cfg.lr_ramp_steps);
        apply_updates(model, &gmap, &mut opt, lr);
        logs.push(StepLog {
            step,
            loss: loss_v,
            lr,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });

        if (step + 1) % steps_per_epoch == 0 {
            epochs += 1;
            if let Some(dir) = ckpt_dir {
                let path = dir.join(format!("checkpoint-epoch{epochs}.bin"));
                crate::checkpoint::save(model, &path)
                    .map_err(|e| FusionError::Config(e.to_string()))?;
            }
        }
    }
    Ok(Stage2Report {
        logs,
        epochs_completed: epochs,
    })
}

/// A fully trained experiment cell.
pub struct TrainedCell<T: Scalar> {
    pub model: FusionModel<T>,
    pub warmup_logs: Vec<StepLog>,
    pub stage1: Stage1Report,
    pub stage2: Stage2Report,
}

/// Runs the full per-cell recipe (LM warm-up, stage 1, stage 2) on top
/// of a pretrained encoder trunk. RNG streams depend only on the seed,
/// so cells sharing a seed also share initialization and batch order —
/// the controlled-comparison setup.
pub fn train_variant<T: Scalar>(
    variant: &crate::fusion::VariantConfig,
    trunk: EncoderTrunk<T>,
    captions: &[CaptionRecord],
    qa_train: &[TokenizedQa],
    vocab: &Vocab,
    ckpt_dir: Option<&Path>,
) -> Result<TrainedCell<T>> {
    let root = RngStream::new(variant.seed, 0x5EED_CE11);
    let mut init_rng = root.substream(1);
    let mut model = FusionModel::init(
        variant.model,
        variant.pe,
        vocab.len(),
        trunk,
        &mut init_rng,
    )?;
    let warmup_logs = lm_warmup(
        &mut model,
        captions,
        vocab,
        &variant.train,
        &mut root.substream(2),
    )?;
    let stage1 = train_stage1(
        &mut model,
        captions,
        vocab,
        &variant.train,
        &mut root.substream(3),
    )?;
    let stage2 = train_stage2(
        &mut model,
        qa_train,
        &variant.train,
        &mut root.substream(4),
        ckpt_dir,
    )?;
    Ok(TrainedCell {
        model,
        warmup_logs,
        stage1,
        stage2,
    })
}

