//! Shared test support: an independent QA re-scorer and tiny
//! experiment configurations.
//!
//! The re-scorer deliberately avoids every code path of the generator:
//! it parses the question string from scratch and recomputes the answer
//! with direct loops over the scene.

#![allow(dead_code)]

use gridvlm_core::encoders::EncoderConfig;
use gridvlm_core::fusion::{ModelConfig, TrainConfig};
use gridvlm_core::harness::ExperimentConfig;
use gridvlm_core::scenegen::{DataGenConfig, QARecord, SceneSpec, Task};

/// Recomputes the expected answer for a QA record from its scene alone.
/// Panics on malformed questions; tests treat that as a failure.
pub fn rescore(record: &QARecord) -> String {
    let toks: Vec<&str> = record.question.split_whitespace().collect();
    match record.task {
        Task::Relation => {
            assert_eq!(toks.len(), 9, "relation template: {}", record.question);
            assert_eq!(&toks[..2], &["is", "the"]);
            let (c1, s1, rel, c2, s2) = (toks[2], toks[3], toks[4], toks[6], toks[7]);
            assert_eq!(toks[5], "the");
            assert_eq!(toks[8], "?");
            let a = find_unique(&record.scene, c1, s1);
            let b = find_unique(&record.scene, c2, s2);
            let holds = match rel {
                "left-of" => a.1 < b.1,
                "right-of" => a.1 > b.1,
                "above" => a.0 < b.0,
                "below" => a.0 > b.0,
                other => panic!("unknown relation {other}"),
            };
            if holds { "yes".into() } else { "no".into() }
        }
        Task::Count => {
            assert_eq!(&toks[..2], &["how", "many"]);
            assert_eq!(*toks.last().unwrap(), "?");
            let cat = &toks[2..toks.len() - 1];
            let n = match cat {
                [shape] => record
                    .scene
                    .objects
                    .iter()
                    .filter(|o| o.shape.word() == *shape)
                    .count(),
                [color, shape] => record
                    .scene
                    .objects
                    .iter()
                    .filter(|o| o.color.word() == *color && o.shape.word() == *shape)
                    .count(),
                other => panic!("unknown count category {other:?}"),
            };
            n.to_string()
        }
        Task::Locate => {
            assert_eq!(toks.len(), 6, "locate template: {}", record.question);
            assert_eq!(&toks[..3], &["where", "is", "the"]);
            assert_eq!(toks[5], "?");
            let (r, c) = find_unique(&record.scene, toks[3], toks[4]);
            format!("r{r} c{c}")
        }
    }
}

fn find_unique(scene: &SceneSpec, color: &str, shape: &str) -> (usize, usize) {
    let matches: Vec<_> = scene
        .objects
        .iter()
        .filter(|o| o.color.word() == color && o.shape.word() == shape)
        .collect();
    assert_eq!(
        matches.len(),
        1,
        "queried object '{color} {shape}' must be unique"
    );
    matches[0].cell
}

/// Answer-set closure check per task.
pub fn in_answer_set(record: &QARecord) -> bool {
    match record.task {
        Task::Relation => matches!(record.answer.as_str(), "yes" | "no"),
        Task::Count => {
            record.answer.len() == 1 && record.answer.chars().all(|c| c.is_ascii_digit())
        }
        Task::Locate => {
            let parts: Vec<&str> = record.answer.split_whitespace().collect();
            parts.len() == 2
                && parts[0].starts_with('r')
                && parts[1].starts_with('c')
                && parts[0][1..].parse::<usize>().map(|r| r < record.scene.grid.0) == Ok(true)
                && parts[1][1..].parse::<usize>().map(|c| c < record.scene.grid.1) == Ok(true)
        }
    }
}

/// Miniature model dimensions that train in seconds.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_size: 16,
            patch_size: 8,
            d_v: 16,
            n_layers: 1,
            n_heads: 2,
            rope_base: 10000.0,
            mlp_hidden: 32,
            embed_dim: 16,
        },
        d_lm: 32,
        n_layers: 2,
        n_heads: 2,
        d_ff: 64,
        max_seq: 64,
        rope_base: 10000.0,
    }
}

pub fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        warmup_lm_steps: 10,
        stage1_steps: 10,
        stage2_steps: 30,
        batch_size: 4,
        lr_ramp_steps: 5,
        encoder_pretrain: gridvlm_core::encoders::PretrainConfig {
            steps: 10,
            batch_size: 4,
            lr: 1e-3,
        },
        ..Default::default()
    }
}

pub fn tiny_datagen_config() -> DataGenConfig {
    DataGenConfig {
        seed: 7,
        train_per_task: 64,
        eval_per_task: 16,
        caption_train: 48,
        caption_eval: 16,
        ..Default::default()
    }
}

/// A matrix configuration that runs in well under a minute.
pub fn tiny_experiment(data_dir: &std::path::Path, out_dir: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        data_dir: data_dir.to_path_buf(),
        out_dir: out_dir.to_path_buf(),
        seeds: vec![0],
        model: tiny_model_config(),
        train: tiny_train_config(),
        jobs: 2,
        diagnose_items: 8,
        ..Default::default()
    }
}
