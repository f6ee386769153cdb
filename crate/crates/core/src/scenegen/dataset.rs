//! JSONL dataset files and deterministic split generation.
//!
//! Records store scenes symbolically; images are re-rendered at load
//! time, never serialized. Generation is a pure function of
//! (seed, config): every split draws from its own fixed RNG stream, so
//! regeneration is byte-identical.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::qa::{make_caption, make_count_q, make_locate_q, make_relation_q, QARecord, Task};
use super::{sample_scene, SceneConstraints, SceneSpec};
use crate::numerics::RngStream;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("dataset config: {0}")]
    Config(String),
    #[error(transparent)]
    Scene(#[from] super::SceneError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Image-caption pair for encoder pretraining and projection pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub scene: SceneSpec,
    pub caption: String,
}

fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("record serialization cannot fail");
        w.write_all(line.as_bytes()).map_err(io_err(path))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_dataset(records: &[QARecord], path: &Path) -> Result<(), DatasetError> {
    write_jsonl(records, path)
}

pub fn read_dataset(path: &Path) -> Result<Vec<QARecord>, DatasetError> {
    read_jsonl(path)
}

pub fn write_caption_dataset(records: &[CaptionRecord], path: &Path) -> Result<(), DatasetError> {
    write_jsonl(records, path)
}

pub fn read_caption_dataset(path: &Path) -> Result<Vec<CaptionRecord>, DatasetError> {
    read_jsonl(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn label(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

/// Everything dataset generation depends on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataGenConfig {
    pub seed: u64,
    /// (rows, cols) of the scene grid.
    pub grid: (usize, usize),
    pub train_per_task: usize,
    pub eval_per_task: usize,
    pub tasks: Vec<Task>,
    pub caption_train: usize,
    pub caption_eval: usize,
    pub qa_scenes: SceneConstraints,
    /// Caption scenes are capped at fewer objects so caption sequences
    /// fit the fusion sequence budget.
    pub caption_scenes: SceneConstraints,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: (8, 8),
            train_per_task: 5000,
            eval_per_task: 1000,
            tasks: Task::ALL.to_vec(),
            caption_train: 4000,
            caption_eval: 256,
            qa_scenes: SceneConstraints::default(),
            caption_scenes: SceneConstraints {
                max_objects: 3,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub dir: PathBuf,
}

impl DatasetPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn qa(&self, task: Task, split: Split) -> PathBuf {
        self.dir
            .join(format!("{}_{}.jsonl", task.label(), split.label()))
    }

    pub fn captions(&self, split: Split) -> PathBuf {
        self.dir.join(format!("captions_{}.jsonl", split.label()))
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("datagen.toml")
    }
}

/// Fixed per-file RNG stream ids. Task splits sit at
/// `task_base + split`, captions at 400 + split.
fn stream_for(task: Task, split: Split) -> u64 {
    let base = match task {
        Task::Relation => 100,
        Task::Count => 200,
        Task::Locate => 300,
    };
    base + matches!(split, Split::Eval) as u64
}

const CAPTION_STREAM_BASE: u64 = 400;

fn generate_qa_split(
    cfg: &DataGenConfig,
    task: Task,
    split: Split,
    count: usize,
) -> Result<Vec<QARecord>, DatasetError> {
    let mut rng = RngStream::new(cfg.seed, stream_for(task, split));
    let mut records = Vec::with_capacity(count);
    let mut consecutive_skips = 0usize;
    while records.len() < count {
        let scene = sample_scene(&mut rng, cfg.grid, &cfg.qa_scenes)?;
        let record = match task {
            Task::Relation => make_relation_q(&scene, &mut rng),
            Task::Count => make_count_q(&scene, &mut rng),
            Task::Locate => make_locate_q(&scene, &mut rng),
        };
        match record {
            Some(r) => {
                consecutive_skips = 0;
                records.push(r);
            }
            None => {
                consecutive_skips += 1;
                if consecutive_skips > 1000 {
                    return Err(DatasetError::Config(format!(
                        "constraints cannot produce {} questions",
                        task.label()
                    )));
                }
            }
        }
    }
    Ok(records)
}

fn generate_caption_split(
    cfg: &DataGenConfig,
    split: Split,
    count: usize,
) -> Result<Vec<CaptionRecord>, DatasetError> {
    let mut rng = RngStream::new(
        cfg.seed,
        CAPTION_STREAM_BASE + matches!(split, Split::Eval) as u64,
    );
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let scene = sample_scene(&mut rng, cfg.grid, &cfg.caption_scenes)?;
        let caption = make_caption(&scene);
        records.push(CaptionRecord { scene, caption });
    }
    Ok(records)
}

/// Generates every requested split into `dir` and records the config
/// alongside. Byte-identical for identical configs.
pub fn generate_datasets(cfg: &DataGenConfig, dir: &Path) -> Result<DatasetPaths, DatasetError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let paths = DatasetPaths::new(dir);
    for &task in &cfg.tasks {
        for (split, count) in [
            (Split::Train, cfg.train_per_task),
            (Split::Eval, cfg.eval_per_task),
        ] {
            let records = generate_qa_split(cfg, task, split, count)?;
            write_dataset(&records, &paths.qa(task, split))?;
        }
    }
    for (split, count) in [
        (Split::Train, cfg.caption_train),
        (Split::Eval, cfg.caption_eval),
    ] {
        let records = generate_caption_split(cfg, split, count)?;
        write_caption_dataset(&records, &paths.captions(split))?;
    }
    let config_text =
        toml::to_string_pretty(cfg).map_err(|e| DatasetError::Config(e.to_string()))?;
    std::fs::write(paths.config(), config_text).map_err(io_err(&paths.config()))?;
    Ok(paths)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{QaMeta, SceneColor, SceneObject, SceneShape};
    use tempfile::tempdir;

    fn small_config() -> DataGenConfig {
        DataGenConfig {
            train_per_task: 40,
            eval_per_task: 10,
            caption_train: 20,
            caption_eval: 8,
            ..Default::default()
        }
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempdir().unwrap();
        let cfg = small_config();
        let records = generate_qa_split(&cfg, Task::Relation, Split::Train, 100).unwrap();
        let path = dir.path().join("r.jsonl");
        write_dataset(&records, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(records, back);
    }

    #[test]
    fn empty_file_reads_empty() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&QARecord {
            scene: SceneSpec {
                grid: (8, 8),
                objects: vec![SceneObject {
                    shape: SceneShape::Square,
                    color: SceneColor::Red,
                    cell: (0, 0),
                }],
            },
            task: Task::Count,
            question: "how many square ?".into(),
            answer: "1".into(),
            meta: QaMeta {
                template: "count-shape-v1".into(),
                ..Default::default()
            },
        })
        .unwrap();
        std::fs::write(&path, format!("{good}\n{{not json\n")).unwrap();
        match read_dataset(&path) {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn handwritten_fixture_parses_to_documented_record() {
        let line = r#"{"scene":{"grid":[8,8],"objects":[{"shape":"circle","color":"blue","cell":[2,5]}]},"task":"locate","question":"where is the blue circle ?","answer":"r2 c5","meta":{"template":"locate-v1","subject":"blue circle","target_cell":[2,5]}}"#;
        let dir = tempdir().unwrap();
        let path = dir.path().join("fixture.jsonl");
        std::fs::write(&path, format!("{line}\n")).unwrap();
        let records = read_dataset(&path).unwrap();
        assert_eq!(records.len(), 1);
        let r = &records[0];
        assert_eq!(r.task, Task::Locate);
        assert_eq!(r.scene.objects[0].cell, (2, 5));
        assert_eq!(r.answer, "r2 c5");
        assert_eq!(r.meta.target_cell, Some((2, 5)));
    }

    #[test]
    fn generation_is_byte_identical() {
        let cfg = small_config();
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        let p1 = generate_datasets(&cfg, d1.path()).unwrap();
        let p2 = generate_datasets(&cfg, d2.path()).unwrap();
        for task in Task::ALL {
            for split in [Split::Train, Split::Eval] {
                let a = std::fs::read(p1.qa(task, split)).unwrap();
                let b = std::fs::read(p2.qa(task, split)).unwrap();
                assert_eq!(a, b, "{} {} differs", task.label(), split.label());
                assert!(!a.is_empty());
            }
        }
        let a = std::fs::read(p1.captions(Split::Train)).unwrap();
        let b = std::fs::read(p2.captions(Split::Train)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn splits_are_distinct() {
        let cfg = small_config();
        let d = tempdir().unwrap();
        let p = generate_datasets(&cfg, d.path()).unwrap();
        let train = read_dataset(&p.qa(Task::Count, Split::Train)).unwrap();
        let eval = read_dataset(&p.qa(Task::Count, Split::Eval)).unwrap();
        assert_eq!(train.len(), 40);
        assert_eq!(eval.len(), 10);
        assert_ne!(train[0], eval[0]);
    }

    #[test]
    fn caption_records_match_their_scenes() {
        let cfg = small_config();
        let recs = generate_caption_split(&cfg, Split::Train, 30).unwrap();
        for r in recs {
            assert_eq!(r.caption, make_caption(&r.scene));
            assert!(r.scene.objects.len() <= cfg.caption_scenes.max_objects);
        }
    }
}
