//! Attention-trace diagnostics and the patch-shuffle probe.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{evaluate_with, HarnessError, Result};
use crate::fusion::{
    build_sequence, forward_hidden, generate_answer, generate_with_image_tokens, image_tokens,
    AttentionRecord, FusionError, FusionModel, TokenizedQa, VariantConfig,
};
use crate::numerics::RngStream;
use crate::rope::PosIndex;
use crate::scenegen::{render, Task};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadMass {
    pub layer: usize,
    pub head: usize,
    /// Fraction of the answer position's attention row on patches
    /// overlapping the queried object's cell.
    pub target_mass: f64,
    /// Fraction on all image-token positions.
    pub image_mass: f64,
}

/// Attention mass statistics over Locate items for one trained cell.
/// `target_share_of_image` (total target mass / total image mass) is
/// the quantity compared against `uniform_null`, the share a uniform
/// attention over image tokens would place on the target patches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub variant: String,
    pub encoder: String,
    pub pe: String,
    pub seed: u64,
    pub n_items: usize,
    pub uniform_null: f64,
    pub target_mass_mean: f64,
    pub image_mass_mean: f64,
    pub target_share_of_image: f64,
    pub row_sum_max_err: f64,
    pub per_head: Vec<HeadMass>,
}

/// Patch ids whose pixel rectangles intersect the scene cell.
pub(crate) fn patches_overlapping_cell(
    cell: (usize, usize),
    scene_grid: (usize, usize),
    image_size: usize,
    patch_size: usize,
) -> Vec<usize> {
    let cell_h = image_size / scene_grid.0;
    let cell_w = image_size / scene_grid.1;
    let (r, c) = cell;
    let (y0, y1) = (r * cell_h, (r + 1) * cell_h);
    let (x0, x1) = (c * cell_w, (c + 1) * cell_w);
    let side = image_size / patch_size;
    let mut out = Vec::new();
    for pr in 0..side {
        for pc in 0..side {
            let (py0, py1) = (pr * patch_size, (pr + 1) * patch_size);
            let (px0, px1) = (pc * patch_size, (pc + 1) * patch_size);
            if py0 < y1 && y0 < py1 && px0 < x1 && x0 < px1 {
                out.push(pr * side + pc);
            }
        }
    }
    out
}

/// Records attention from the position generating the first answer
/// token on Locate items and aggregates target-cell mass per
/// (layer, head) and overall.
pub fn diagnose_attention(
    model: &FusionModel<f32>,
    items: &[TokenizedQa],
    cell_cfg: &VariantConfig,
) -> Result<AttentionSummary> {
    let image_size = model.encoder.cfg.image_size;
    let patch_size = model.encoder.cfg.patch_size;
    let grid = model.encoder.cfg.patch_grid();
    let p = grid.0 * grid.1;

    let n_layers = model.lm.cfg.n_layers;
    let n_heads = model.lm.cfg.n_heads;
    let mut target_tot = vec![0.0f64; n_layers * n_heads];
    let mut image_tot = vec![0.0f64; n_layers * n_heads];
    let mut row_sum_max_err = 0.0f64;
    let mut null_sum = 0.0f64;
    let mut n_used = 0usize;

    for item in items {
        let Some(target_cell) = item.record.meta.target_cell else {
            continue;
        };
        let targets = patches_overlapping_cell(
            target_cell,
            item.record.scene.grid,
            image_size,
            patch_size,
        );
        let image = render::<f32>(&item.record.scene, image_size)
            .map_err(FusionError::Scene)
            .map_err(HarnessError::Fusion)?;
        let h_v = image_tokens(model, &image).map_err(HarnessError::Fusion)?;
        let seq = build_sequence(&h_v, &model.lm, &item.question, None, grid)
            .map_err(HarnessError::Fusion)?;
        let mut record = AttentionRecord {
            per_layer: Vec::new(),
        };
        forward_hidden(&model.lm, &seq, Some(&mut record)).map_err(HarnessError::Fusion)?;

        let len = seq.len();
        let query = len - 1; // the position whose logits emit the first answer token
        for (layer, heads) in record.per_layer.iter().enumerate() {
            for (head, probs) in heads.iter().enumerate() {
                let data = probs.data();
                for row in data.chunks_exact(len) {
                    let sum: f32 = row.iter().sum();
                    row_sum_max_err = row_sum_max_err.max((sum as f64 - 1.0).abs());
                }
                let row = &data[query * len..(query + 1) * len];
                let image_mass: f64 = row[..p].iter().map(|&v| v as f64).sum();
                let target_mass: f64 = targets.iter().map(|&t| row[t] as f64).sum();
                target_tot[layer * n_heads + head] += target_mass;
                image_tot[layer * n_heads + head] += image_mass;
            }
        }
        null_sum += targets.len() as f64 / p as f64;
        n_used += 1;
    }

    let denom = n_used.max(1) as f64;
    let per_head: Vec<HeadMass> = (0..n_layers)
        .flat_map(|layer| {
            let target_tot = &target_tot;
            let image_tot = &image_tot;
            (0..n_heads).map(move |head| HeadMass {
                layer,
                head,
                target_mass: target_tot[layer * n_heads + head] / denom,
                image_mass: image_tot[layer * n_heads + head] / denom,
            })
        })
        .collect();
    let target_sum: f64 = target_tot.iter().sum();
    let image_sum: f64 = image_tot.iter().sum();
    Ok(AttentionSummary {
        variant: cell_cfg.variant_id(),
        encoder: cell_cfg.encoder.label().to_string(),
        pe: cell_cfg.pe.label().to_string(),
        seed: cell_cfg.seed,
        n_items: n_used,
        uniform_null: null_sum / denom,
        target_mass_mean: target_sum / (denom * (n_layers * n_heads) as f64),
        image_mass_mean: image_sum / (denom * (n_layers * n_heads) as f64),
        target_share_of_image: if image_sum > 0.0 {
            target_sum / image_sum
        } else {
            0.0
        },
        row_sum_max_err,
        per_head,
    })
}

pub fn write_attention_csv(summaries: &[AttentionSummary], path: &Path) -> std::io::Result<()> {
    let mut out = String::from(
        "variant,encoder,pe,seed,layer,head,target_mass,image_mass,target_share,uniform_null,n_items\n",
    );
    for s in summaries {
        for h in &s.per_head {
            let share = if h.image_mass > 0.0 {
                h.target_mass / h.image_mass
            } else {
                0.0
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{}\n",
                s.variant,
                s.encoder,
                s.pe,
                s.seed,
                h.layer,
                h.head,
                h.target_mass,
                h.image_mass,
                share,
                s.uniform_null,
                s.n_items
            ));
        }
        out.push_str(&format!(
            "{},{},{},{},all,all,{:.6},{:.6},{:.6},{:.6},{}\n",
            s.variant,
            s.encoder,
            s.pe,
            s.seed,
            s.target_mass_mean,
            s.image_mass_mean,
            s.target_share_of_image,
            s.uniform_null,
            s.n_items
        ));
    }
    std::fs::write(path, out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskProbe {
    pub task: Task,
    pub accuracy_normal: f64,
    pub accuracy_shuffled: f64,
    /// normal - shuffled: positive when the model relies on image-token
    /// positions.
    pub drop: f64,
    pub n_items: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub variant: String,
    pub seed: u64,
    pub probe_seed: u64,
    pub tasks: Vec<TaskProbe>,
}

impl ProbeReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("variant,seed,probe_seed,task,accuracy_normal,accuracy_shuffled,drop,n_items\n");
        for t in &self.tasks {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:+.6},{}\n",
                self.variant,
                self.seed,
                self.probe_seed,
                t.task.label(),
                t.accuracy_normal,
                t.accuracy_shuffled,
                t.drop,
                t.n_items
            ));
        }
        out
    }

    pub fn task(&self, task: Task) -> Option<&TaskProbe> {
        self.tasks.iter().find(|t| t.task == task)
    }
}

/// Core of the probe with an injectable permuter (identity for the
/// zero-delta oracle test).
pub fn probe_with<F>(
    model: &FusionModel<f32>,
    eval: &BTreeMap<Task, Vec<TokenizedQa>>,
    cell_cfg: &VariantConfig,
    probe_seed: u64,
    mut permute: F,
) -> Result<ProbeReport>
where
    F: FnMut(&mut [PosIndex]),
{
    let image_size = model.encoder.cfg.image_size;
    let grid = model.encoder.cfg.patch_grid();
    let mut tasks = Vec::new();
    for (&task, items) in eval {
        let (correct_normal, n) = evaluate_with(items, |item| {
            let image = render::<f32>(&item.record.scene, image_size)
                .map_err(FusionError::Scene)
                .map_err(HarnessError::Fusion)?;
            generate_answer(model, &image, &item.question).map_err(HarnessError::Fusion)
        })?;
        let (correct_shuffled, _) = evaluate_with(items, |item| {
            let image = render::<f32>(&item.record.scene, image_size)
                .map_err(FusionError::Scene)
                .map_err(HarnessError::Fusion)?;
            let h_v = image_tokens(model, &image).map_err(HarnessError::Fusion)?;
            let mut positions = crate::fusion::sequence_positions(
                item.question.len(),
                0,
                grid,
                model.lm.pe_scheme,
            )[..grid.0 * grid.1]
                .to_vec();
            permute(&mut positions);
            generate_with_image_tokens(model, &h_v, &item.question, Some(&positions))
                .map_err(HarnessError::Fusion)
        })?;
        let accuracy_normal = correct_normal as f64 / n.max(1) as f64;
        let accuracy_shuffled = correct_shuffled as f64 / n.max(1) as f64;
        tasks.push(TaskProbe {
            task,
            accuracy_normal,
            accuracy_shuffled,
            drop: accuracy_normal - accuracy_shuffled,
            n_items: n,
        });
    }
    Ok(ProbeReport {
        variant: cell_cfg.variant_id(),
        seed: cell_cfg.seed,
        probe_seed,
        tasks,
    })
}

/// Evaluates each task twice — normally and with image-token positions
/// randomly permuted at inference (features unchanged) — and reports
/// the accuracy drop. A fresh permutation is drawn per item from the
/// probe seed, so the probe is deterministic.
pub fn patch_shuffle_probe(
    model: &FusionModel<f32>,
    eval: &BTreeMap<Task, Vec<TokenizedQa>>,
    cell_cfg: &VariantConfig,
    probe_seed: u64,
) -> Result<ProbeReport> {
    let mut rng = RngStream::new(probe_seed, 0x5823_FFE1);
    probe_with(model, eval, cell_cfg, probe_seed, move |positions| {
        rng.shuffle(positions);
    })
}
