//! Experiment matrix runner and evaluator: trains every (encoder,
//! positional scheme, seed) cell, evaluates the three tasks, and
//! aggregates a comparison report. Encoder pretraining is cached by a
//! content hash of its producing config, so positional-scheme variants
//! share encoders — changing the scheme never retrains the encoder.

mod diagnostics;
mod report;

pub use diagnostics::{
    diagnose_attention, patch_shuffle_probe, write_attention_csv, AttentionSummary, HeadMass,
    ProbeReport, TaskProbe,
};
pub use report::{
    paired_deltas, parse_results_csv, render_report, results_csv, write_report, DeltaRow,
    ObjectiveSummary, PairedDeltas,
};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::encoders::{
    pretrain_contrastive, pretrain_generative, EncoderError, EncoderVariant, PretrainEncoder,
};
use crate::fusion::{
    generate_answer, tokenize_qa, train_variant, FusionError, FusionModel, ModelConfig,
    TokenizedQa, TrainConfig, VariantConfig,
};
use crate::numerics::RngStream;
use crate::rope::PeScheme;
use crate::scenegen::{
    read_caption_dataset, read_dataset, render, CaptionRecord, DataGenConfig, DatasetError,
    DatasetPaths, Task, Vocab,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// The full experiment matrix definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub encoders: Vec<EncoderVariant>,
    pub pe_schemes: Vec<PeScheme>,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Worker threads for independent cells.
    pub jobs: usize,
    /// Locate items used for attention diagnostics per cell.
    pub diagnose_items: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/matrix"),
            encoders: EncoderVariant::ALL.to_vec(),
            pe_schemes: vec![PeScheme::Rope1D, PeScheme::Rope2D],
            seeds: vec![0, 1, 2, 3, 4],
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            jobs: 2,
            diagnose_items: 200,
        }
    }
}

impl ExperimentConfig {
    pub fn cells(&self) -> Vec<VariantConfig> {
        let mut out = Vec::new();
        for &encoder in &self.encoders {
            for &pe in &self.pe_schemes {
                for &seed in &self.seeds {
                    out.push(VariantConfig {
                        encoder,
                        pe,
                        seed,
                        model: self.model,
                        train: self.train.clone(),
                    });
                }
            }
        }
        out
    }
}

/// Per-task accuracy row, one per (cell, task).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub variant: String,
    pub encoder: String,
    pub pe: String,
    pub seed: u64,
    pub task: Task,
    pub accuracy: f64,
    pub n_items: usize,
    pub wall_ms: f64,
}

/// Loaded datasets for one matrix run.
pub struct MatrixData {
    pub vocab: Vocab,
    pub grid: (usize, usize),
    pub captions_train: Vec<CaptionRecord>,
    pub captions_eval: Vec<CaptionRecord>,
    pub qa_train: Vec<TokenizedQa>,
    pub qa_eval: BTreeMap<Task, Vec<TokenizedQa>>,
}

pub fn load_matrix_data(data_dir: &Path) -> Result<MatrixData> {
    let paths = DatasetPaths::new(data_dir);
    let grid = read_datagen_grid(&paths)?;
    let vocab = Vocab::for_grid(grid.0, grid.1);
    let captions_train = read_caption_dataset(&paths.captions(crate::scenegen::Split::Train))?;
    let captions_eval = read_caption_dataset(&paths.captions(crate::scenegen::Split::Eval))?;
    let mut qa_train_records = Vec::new();
    let mut qa_eval = BTreeMap::new();
    for task in Task::ALL {
        let train_path = paths.qa(task, crate::scenegen::Split::Train);
        if train_path.exists() {
            qa_train_records.extend(read_dataset(&train_path)?);
        }
        let eval_path = paths.qa(task, crate::scenegen::Split::Eval);
        if eval_path.exists() {
            let records = read_dataset(&eval_path)?;
            qa_eval.insert(
                task,
                tokenize_qa(&records, &vocab).map_err(HarnessError::Fusion)?,
            );
        }
    }
    if qa_train_records.is_empty() {
        return Err(HarnessError::Config(format!(
            "no QA training data under {}",
            data_dir.display()
        )));
    }
    let qa_train = tokenize_qa(&qa_train_records, &vocab).map_err(HarnessError::Fusion)?;
    Ok(MatrixData {
        vocab,
        grid,
        captions_train,
        captions_eval,
        qa_train,
        qa_eval,
    })
}

fn read_datagen_grid(paths: &DatasetPaths) -> Result<(usize, usize)> {
    let config_path = paths.config();
    if config_path.exists() {
        let text = std::fs::read_to_string(&config_path).map_err(io_err(&config_path))?;
        let cfg: DataGenConfig = toml::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("bad datagen.toml: {e}")))?;
        return Ok(cfg.grid);
    }
    // Fall back to the first record of any present file.
    for task in Task::ALL {
        let p = paths.qa(task, crate::scenegen::Split::Eval);
        if p.exists() {
            let records = read_dataset(&p)?;
            if let Some(r) = records.first() {
                return Ok(r.scene.grid);
            }
        }
    }
    Err(HarnessError::Config(
        "cannot determine scene grid: no datagen.toml and no records".into(),
    ))
}

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

/// Exact-match accuracy with an arbitrary decoder, for oracle tests.
pub fn evaluate_with<F>(items: &[TokenizedQa], mut decode: F) -> Result<(usize, usize)>
where
    F: FnMut(&TokenizedQa) -> Result<Vec<u32>>,
{
    let mut correct = 0;
    for item in items {
        if decode(item)? == item.answer {
            correct += 1;
        }
    }
    Ok((correct, items.len()))
}

/// Greedy-decodes every item of every task and scores exact match over
/// the full answer token sequence.
pub fn evaluate(
    model: &FusionModel<f32>,
    eval: &BTreeMap<Task, Vec<TokenizedQa>>,
    vocab: &Vocab,
    cell: &VariantConfig,
) -> Result<Vec<EvalRecord>> {
    if model.lm.vocab_size() != vocab.len() {
        return Err(HarnessError::Config(format!(
            "vocab mismatch: checkpoint has {}, dataset implies {}",
            model.lm.vocab_size(),
            vocab.len()
        )));
    }
    let image_size = model.encoder.cfg.image_size;
    let mut records = Vec::new();
    for (&task, items) in eval {
        let t0 = Instant::now();
        let (correct, n) = evaluate_with(items, |item| {
            let image = render::<f32>(&item.record.scene, image_size)
                .map_err(FusionError::Scene)
                .map_err(HarnessError::Fusion)?;
            generate_answer(model, &image, &item.question).map_err(HarnessError::Fusion)
        })?;
        records.push(EvalRecord {
            variant: cell.variant_id(),
            encoder: cell.encoder.label().to_string(),
            pe: cell.pe.label().to_string(),
            seed: cell.seed,
            task,
            accuracy: correct as f64 / n.max(1) as f64,
            n_items: n,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Encoder pretraining cache.
// ---------------------------------------------------------------------------

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex(&hasher.finalize()))
}

/// Hash of the caption training file, part of the encoder cache key.
pub fn caption_file_hash(data_dir: &Path) -> Result<String> {
    file_sha256(&DatasetPaths::new(data_dir).captions(crate::scenegen::Split::Train))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash of everything that determines a pretrained encoder:
/// variant, seed, encoder config, pretraining config, caption data.
pub fn encoder_cache_key(
    variant: EncoderVariant,
    seed: u64,
    cfg: &ExperimentConfig,
    caption_hash: &str,
) -> String {
    let mut hasher = Sha256::new();
    hasher.update(variant.label());
    hasher.update(seed.to_le_bytes());
    hasher.update(toml::to_string(&cfg.model.encoder).unwrap());
    hasher.update(toml::to_string(&cfg.train.encoder_pretrain).unwrap());
    hasher.update(caption_hash);
    hex(&hasher.finalize())[..16].to_string()
}

fn pretrain_one(
    variant: EncoderVariant,
    seed: u64,
    cfg: &ExperimentConfig,
    data: &MatrixData,
    ckpt_path: &Path,
    curve_path: &Path,
) -> Result<()> {
    let root = RngStream::new(seed, 0x0E6C_0DE5);
    // The trunk draws its init first from the shared stream, so both
    // variants start from the identical trunk.
    let mut init_rng = root.substream(10);
    let mut model: PretrainEncoder<f32> = PretrainEncoder::init(
        cfg.model.encoder,
        variant,
        data.vocab.len(),
        &mut init_rng,
    )?;
    let report = match variant {
        EncoderVariant::ContrastiveGlobal => pretrain_contrastive(
            &mut model,
            &data.captions_train,
            &data.vocab,
            &cfg.train.encoder_pretrain,
            &mut root.substream(11),
        )?,
        EncoderVariant::GenerativePatch => {
            let scenes: Vec<_> = data.captions_train.iter().map(|c| c.scene.clone()).collect();
            pretrain_generative(
                &mut model,
                &scenes,
                &cfg.train.encoder_pretrain,
                &mut root.substream(12),
            )?
        }
    };
    let mut curve = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        curve.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(curve_path, curve).map_err(io_err(curve_path))?;
    checkpoint::save(&model, ckpt_path)?;
    Ok(())
}

/// Pretrains (or reuses) the encoder for (variant, seed), returning the
/// checkpoint path.
pub fn ensure_encoder(
    variant: EncoderVariant,
    seed: u64,
    cfg: &ExperimentConfig,
    data: &MatrixData,
    caption_hash: &str,
) -> Result<PathBuf> {
    let dir = cfg.out_dir.join("encoders");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let key = encoder_cache_key(variant, seed, cfg, caption_hash);
    let ckpt = dir.join(format!("{}-seed{}-{}.ckpt", variant.label(), seed, key));
    if ckpt.exists() {
        return Ok(ckpt);
    }
    let curve = dir.join(format!("{}-seed{}-{}.loss.csv", variant.label(), seed, key));
    let tmp = ckpt.with_extension("ckpt.tmp");
    pretrain_one(variant, seed, cfg, data, &tmp, &curve)?;
    std::fs::rename(&tmp, &ckpt).map_err(io_err(&ckpt))?;
    Ok(ckpt)
}

pub fn load_encoder_trunk(
    path: &Path,
    cfg: &ExperimentConfig,
    variant: EncoderVariant,
    vocab_size: usize,
) -> Result<crate::encoders::EncoderTrunk<f32>> {
    let mut rng = RngStream::new(0, 0);
    let mut model: PretrainEncoder<f32> =
        PretrainEncoder::init(cfg.model.encoder, variant, vocab_size, &mut rng)?;
    checkpoint::load(&mut model, path)?;
    Ok(model.trunk)
}

// ---------------------------------------------------------------------------
// Cells.
// ---------------------------------------------------------------------------

pub fn cell_dir(out_dir: &Path, cell: &VariantConfig) -> PathBuf {
    out_dir.join("cells").join(cell.cell_id())
}

/// Completion marker: eval records of a finished cell.
fn records_path(dir: &Path) -> PathBuf {
    dir.join("records.json")
}

fn write_json_atomic<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    std::fs::write(&tmp, text).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

/// Output of one completed cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellOutput {
    pub records: Vec<EvalRecord>,
    pub attention: AttentionSummary,
    pub stage1_digest: String,
    pub epochs: usize,
}

/// Trains and evaluates one cell, writing its artifacts under `dir`.
/// Skips all work when the completion marker already exists.
pub fn run_cell(
    cell: &VariantConfig,
    cfg: &ExperimentConfig,
    data: &MatrixData,
    encoder_ckpt: &Path,
) -> Result<CellOutput> {
    let dir = cell_dir(&cfg.out_dir, cell);
    let marker = records_path(&dir);
    if marker.exists() {
        let text = std::fs::read_to_string(&marker).map_err(io_err(&marker))?;
        let output: CellOutput = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("corrupt {}: {e}", marker.display())))?;
        return Ok(output);
    }
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;

    let config_text =
        toml::to_string_pretty(cell).map_err(|e| HarnessError::Config(e.to_string()))?;
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, config_text).map_err(io_err(&config_path))?;

    let trunk = load_encoder_trunk(encoder_ckpt, cfg, cell.encoder, data.vocab.len())?;
    let trained = train_variant(
        cell,
        trunk,
        &data.captions_train,
        &data.qa_train,
        &data.vocab,
        None,
    )?;

    let mut logs = trained.warmup_logs.clone();
    let offset = logs.len();
    logs.extend(trained.stage1.logs.iter().cloned().map(|mut l| {
        l.step += offset;
        l
    }));
    let offset = logs.len();
    logs.extend(trained.stage2.logs.iter().cloned().map(|mut l| {
        l.step += offset;
        l
    }));
    crate::fusion::write_train_log(&logs, &dir.join("train_log.csv"))
        .map_err(|e| io_err(&dir.join("train_log.csv"))(e))?;
    checkpoint::save(&trained.model, &dir.join("checkpoint.bin"))?;

    let records = evaluate(&trained.model, &data.qa_eval, &data.vocab, cell)?;
    let locate_items = data
        .qa_eval
        .get(&Task::Locate)
        .map(|v| &v[..v.len().min(cfg.diagnose_items)])
        .unwrap_or(&[]);
    let attention = diagnose_attention(&trained.model, locate_items, cell)?;

    let output = CellOutput {
        records,
        attention,
        stage1_digest: trained.stage1.frozen_digest_after.clone(),
        epochs: trained.stage2.epochs_completed,
    };
    write_json_atomic(&output, &marker)?;
    Ok(output)
}

/// Reconstructs a trained cell model from its directory.
pub fn load_cell_model(dir: &Path, data: &MatrixData) -> Result<(VariantConfig, FusionModel<f32>)> {
    let config_path = dir.join("config.toml");
    let text = std::fs::read_to_string(&config_path).map_err(io_err(&config_path))?;
    let cell: VariantConfig = toml::from_str(&text)
        .map_err(|e| HarnessError::Config(format!("bad cell config: {e}")))?;
    let mut rng = RngStream::new(0, 0);
    let trunk = crate::encoders::EncoderTrunk::init(cell.model.encoder, &mut rng)?;
    let mut model = FusionModel::init(cell.model, cell.pe, data.vocab.len(), trunk, &mut rng)?;
    checkpoint::load(&mut model, &dir.join("checkpoint.bin"))?;
    Ok((cell, model))
}

// ---------------------------------------------------------------------------
// The matrix runner.
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct MatrixOutcome {
    pub records: Vec<EvalRecord>,
    pub attention: Vec<AttentionSummary>,
    pub failures: Vec<(String, String)>,
    pub report_path: PathBuf,
    pub results_path: PathBuf,
}

impl MatrixOutcome {
    pub fn all_ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Runs every cell of the matrix (resuming completed ones), then writes
/// results.csv, report.md, and attention.csv. Cell failures are
/// recorded and do not stop the rest of the matrix.
pub fn run_matrix(cfg: &ExperimentConfig) -> Result<MatrixOutcome> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let config_echo = cfg.out_dir.join("config.toml");
    let text = toml::to_string_pretty(cfg).map_err(|e| HarnessError::Config(e.to_string()))?;
    std::fs::write(&config_echo, text).map_err(io_err(&config_echo))?;

    let data = load_matrix_data(&cfg.data_dir)?;
    let caption_hash = file_sha256(
        &DatasetPaths::new(&cfg.data_dir).captions(crate::scenegen::Split::Train),
    )?;

    // Phase 1: pretrained encoders, one per (variant, seed), in parallel.
    let mut pretrain_jobs: Vec<(EncoderVariant, u64)> = Vec::new();
    for &encoder in &cfg.encoders {
        for &seed in &cfg.seeds {
            pretrain_jobs.push((encoder, seed));
        }
    }
    let encoder_paths: Mutex<BTreeMap<(String, u64), PathBuf>> = Mutex::new(BTreeMap::new());
    let failures: Mutex<Vec<(String, String)>> = Mutex::new(Vec::new());
    let jobs = cfg.jobs.max(1);
    run_pool(jobs, pretrain_jobs, |(variant, seed)| {
        match ensure_encoder(variant, seed, cfg, &data, &caption_hash) {
            Ok(path) => {
                encoder_paths
                    .lock()
                    .unwrap()
                    .insert((variant.label().to_string(), seed), path);
            }
            Err(e) => failures
                .lock()
                .unwrap()
                .push((format!("pretrain-{}-seed{}", variant.label(), seed), e.to_string())),
        }
    });

    // Phase 2: cells.
    let cells = cfg.cells();
    let outputs: Mutex<Vec<CellOutput>> = Mutex::new(Vec::new());
    run_pool(jobs, cells, |cell| {
        let key = (cell.encoder.label().to_string(), cell.seed);
        let Some(encoder_ckpt) = encoder_paths.lock().unwrap().get(&key).cloned() else {
            failures.lock().unwrap().push((
                cell.cell_id(),
                "encoder pretraining failed; cell skipped".to_string(),
            ));
            return;
        };
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            run_cell(&cell, cfg, &data, &encoder_ckpt)
        }));
        match result {
            Ok(Ok(output)) => outputs.lock().unwrap().push(output),
            Ok(Err(e)) => {
                let dir = cell_dir(&cfg.out_dir, &cell);
                let _ = std::fs::create_dir_all(&dir);
                let _ = std::fs::write(dir.join("error.txt"), e.to_string());
                failures.lock().unwrap().push((cell.cell_id(), e.to_string()));
            }
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "panic".to_string());
                let dir = cell_dir(&cfg.out_dir, &cell);
                let _ = std::fs::create_dir_all(&dir);
                let _ = std::fs::write(dir.join("error.txt"), &msg);
                failures.lock().unwrap().push((cell.cell_id(), msg));
            }
        }
    });

    let outputs = outputs.into_inner().unwrap();
    let mut records: Vec<EvalRecord> = outputs.iter().flat_map(|o| o.records.clone()).collect();
    sort_records(&mut records);
    let mut attention: Vec<AttentionSummary> =
        outputs.iter().map(|o| o.attention.clone()).collect();
    attention.sort_by(|a, b| (&a.variant, a.seed).cmp(&(&b.variant, b.seed)));

    let (results_path, report_path) = write_report(&records, &cfg.out_dir)?;
    write_attention_csv(&attention, &cfg.out_dir.join("attention.csv"))
        .map_err(|e| io_err(&cfg.out_dir.join("attention.csv"))(e))?;

    let mut fails = failures.into_inner().unwrap();
    fails.sort();
    Ok(MatrixOutcome {
        records,
        attention,
        failures: fails,
        report_path,
        results_path,
    })
}

pub fn sort_records(records: &mut [EvalRecord]) {
    records.sort_by(|a, b| {
        (&a.encoder, &a.pe, a.seed, task_order(a.task)).cmp(&(
            &b.encoder,
            &b.pe,
            b.seed,
            task_order(b.task),
        ))
    });
}

fn task_order(t: Task) -> usize {
    match t {
        Task::Relation => 0,
        Task::Count => 1,
        Task::Locate => 2,
    }
}

/// Fixed-size worker pool over a queue of independent jobs.
fn run_pool<J: Send, F: Fn(J) + Sync>(workers: usize, jobs: Vec<J>, f: F) {
    if workers <= 1 || jobs.len() <= 1 {
        for j in jobs {
            f(j);
        }
        return;
    }
    let queue = Mutex::new(std::collections::VecDeque::from(jobs));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = queue.lock().unwrap().pop_front();
                match job {
                    Some(j) => f(j),
                    None => break,
                }
            });
        }
    });
}

#[cfg(test)]
mod tests;
