//! results.csv and report.md generation.
//!
//! The markdown report is computed from the parsed CSV rows, never from
//! in-memory floats, so re-ingesting results.csv reproduces the report
//! byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{sort_records, EvalRecord, HarnessError, Result};

pub fn results_csv(records: &[EvalRecord]) -> String {
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let mut out = String::from("variant,encoder,pe,seed,task,accuracy,n_items,wall_ms\n");
    for r in &sorted {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{},{:.3}\n",
            r.variant,
            r.encoder,
            r.pe,
            r.seed,
            r.task.label(),
            r.accuracy,
            r.n_items,
            r.wall_ms
        ));
    }
    out
}

pub fn parse_results_csv(text: &str) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(HarnessError::Config(format!(
                "results.csv line {}: expected 8 fields, got {}",
                i + 1,
                fields.len()
            )));
        }
        let parse_err = |what: &str| {
            HarnessError::Config(format!("results.csv line {}: bad {what}", i + 1))
        };
        out.push(EvalRecord {
            variant: fields[0].to_string(),
            encoder: fields[1].to_string(),
            pe: fields[2].to_string(),
            seed: fields[3].parse().map_err(|_| parse_err("seed"))?,
            task: fields[4].parse().map_err(|_| parse_err("task"))?,
            accuracy: fields[5].parse().map_err(|_| parse_err("accuracy"))?,
            n_items: fields[6].parse().map_err(|_| parse_err("n_items"))?,
            wall_ms: fields[7].parse().map_err(|_| parse_err("wall_ms"))?,
        });
    }
    Ok(out)
}

/// Sample standard deviation (n-1 denominator), None for fewer than two
/// values.
fn sample_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some(var.sqrt())
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

type AccIndex = BTreeMap<(String, String, u64, String), f64>;

fn index(records: &[EvalRecord]) -> AccIndex {
    records
        .iter()
        .map(|r| {
            (
                (
                    r.encoder.clone(),
                    r.pe.clone(),
                    r.seed,
                    r.task.label().to_string(),
                ),
                r.accuracy,
            )
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DeltaRow {
    pub label: String,
    pub task: String,
    /// (seed, delta) pairs.
    pub deltas: Vec<(u64, f64)>,
    pub mean: f64,
    pub plus: usize,
    pub zero: usize,
    pub minus: usize,
}

impl DeltaRow {
    fn new(label: String, task: String, deltas: Vec<(u64, f64)>) -> Self {
        let values: Vec<f64> = deltas.iter().map(|&(_, d)| d).collect();
        let plus = values.iter().filter(|&&d| d > 0.0).count();
        let zero = values.iter().filter(|&&d| d == 0.0).count();
        let minus = values.iter().filter(|&&d| d < 0.0).count();
        Self {
            mean: mean(&values),
            label,
            task,
            deltas,
            plus,
            zero,
            minus,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ObjectiveSummary {
    /// (seed, generative mean, contrastive mean) over relation+locate,
    /// averaged across positional schemes.
    pub per_seed: Vec<(u64, f64, f64)>,
    pub wins_ge: usize,
    pub n_seeds: usize,
    pub direction_holds: bool,
}

#[derive(Debug, Clone)]
pub struct PairedDeltas {
    /// rope2d - rope1d per (encoder, task).
    pub pe_deltas: Vec<DeltaRow>,
    /// generative - contrastive per (pe, task).
    pub encoder_deltas: Vec<DeltaRow>,
    pub objective_summary: Option<ObjectiveSummary>,
}

pub fn paired_deltas(records: &[EvalRecord]) -> PairedDeltas {
    let idx = index(records);
    let encoders: Vec<String> = uniq(records.iter().map(|r| r.encoder.clone()));
    let pes: Vec<String> = uniq(records.iter().map(|r| r.pe.clone()));
    let seeds: Vec<u64> = uniq(records.iter().map(|r| r.seed));
    let tasks: Vec<String> = uniq(records.iter().map(|r| r.task.label().to_string()));

    let mut pe_deltas = Vec::new();
    if pes.contains(&"rope1d".to_string()) && pes.contains(&"rope2d".to_string()) {
        for enc in &encoders {
            for task in &tasks {
                let mut deltas = Vec::new();
                for &seed in &seeds {
                    let a = idx.get(&(enc.clone(), "rope2d".into(), seed, task.clone()));
                    let b = idx.get(&(enc.clone(), "rope1d".into(), seed, task.clone()));
                    if let (Some(a), Some(b)) = (a, b) {
                        deltas.push((seed, a - b));
                    }
                }
                if !deltas.is_empty() {
                    pe_deltas.push(DeltaRow::new(enc.clone(), task.clone(), deltas));
                }
            }
        }
    }

    let mut encoder_deltas = Vec::new();
    let have_both_encoders = encoders.contains(&"generative".to_string())
        && encoders.contains(&"contrastive".to_string());
    if have_both_encoders {
        for pe in &pes {
            for task in &tasks {
                let mut deltas = Vec::new();
                for &seed in &seeds {
                    let a = idx.get(&("generative".into(), pe.clone(), seed, task.clone()));
                    let b = idx.get(&("contrastive".into(), pe.clone(), seed, task.clone()));
                    if let (Some(a), Some(b)) = (a, b) {
                        deltas.push((seed, a - b));
                    }
                }
                if !deltas.is_empty() {
                    encoder_deltas.push(DeltaRow::new(pe.clone(), task.clone(), deltas));
                }
            }
        }
    }

    // Spatial summary: relation + locate, averaged over schemes.
    let objective_summary = if have_both_encoders {
        let spatial = ["relation", "locate"];
        let mut per_seed = Vec::new();
        for &seed in &seeds {
            let collect = |enc: &str| -> Vec<f64> {
                let mut v = Vec::new();
                for pe in &pes {
                    for task in spatial {
                        if let Some(a) = idx.get(&(enc.into(), pe.clone(), seed, task.into())) {
                            v.push(*a);
                        }
                    }
                }
                v
            };
            let gen = collect("generative");
            let con = collect("contrastive");
            if !gen.is_empty() && gen.len() == con.len() {
                per_seed.push((seed, mean(&gen), mean(&con)));
            }
        }
        if per_seed.is_empty() {
            None
        } else {
            let wins_ge = per_seed.iter().filter(|(_, g, c)| g >= c).count();
            let n_seeds = per_seed.len();
            let threshold = ((0.8 * n_seeds as f64).ceil() as usize).max(1);
            Some(ObjectiveSummary {
                per_seed,
                wins_ge,
                n_seeds,
                direction_holds: wins_ge >= threshold,
            })
        }
    } else {
        None
    };

    PairedDeltas {
        pe_deltas,
        encoder_deltas,
        objective_summary,
    }
}

fn uniq<T: Ord + Clone>(items: impl Iterator<Item = T>) -> Vec<T> {
    let set: std::collections::BTreeSet<T> = items.collect();
    set.into_iter().collect()
}

fn delta_table(title: &str, rows: &[DeltaRow], first_col: &str) -> String {
    if rows.is_empty() {
        return String::new();
    }
    let mut out = format!("\n## {title}\n\n");
    let seeds: Vec<u64> = uniq(rows.iter().flat_map(|r| r.deltas.iter().map(|&(s, _)| s)));
    out.push_str(&format!("| {first_col} | task |"));
    for s in &seeds {
        out.push_str(&format!(" seed {s} |"));
    }
    out.push_str(" mean | sign (+/0/-) |\n");
    out.push_str("|---|---|");
    for _ in &seeds {
        out.push_str("---|");
    }
    out.push_str("---|---|\n");
    for row in rows {
        out.push_str(&format!("| {} | {} |", row.label, row.task));
        for s in &seeds {
            match row.deltas.iter().find(|&&(rs, _)| rs == *s) {
                Some(&(_, d)) => out.push_str(&format!(" {d:+.4} |")),
                None => out.push_str(" — |"),
            }
        }
        out.push_str(&format!(
            " {:+.4} | {}/{}/{} |\n",
            row.mean, row.plus, row.zero, row.minus
        ));
    }
    out
}

/// Renders report.md from eval records (usually the parsed CSV rows).
pub fn render_report(records: &[EvalRecord]) -> String {
    let mut out = String::from("# Spatial reasoning comparison\n");

    if records.is_empty() {
        out.push_str("\nNo records.\n");
        return out;
    }

    let variants: Vec<(String, String)> = uniq(
        records
            .iter()
            .map(|r| (r.encoder.clone(), r.pe.clone())),
    );
    let tasks: Vec<String> = uniq(records.iter().map(|r| r.task.label().to_string()));
    let n_seeds = uniq(records.iter().map(|r| r.seed)).len();
    let n_items: Vec<usize> = uniq(records.iter().map(|r| r.n_items));
    out.push_str(&format!(
        "\nMean accuracy ± sample std over {n_seeds} seed(s); eval split sizes {n_items:?}. \
         Best per column in **bold**.\n\n"
    ));

    // Per-variant accuracy collection.
    let mut table: BTreeMap<(String, String), BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in records {
        table
            .entry((r.encoder.clone(), r.pe.clone()))
            .or_default()
            .entry(r.task.label().to_string())
            .or_default()
            .push(r.accuracy);
    }
    let cell_mean = |v: &(String, String), t: &String| -> Option<f64> {
        table.get(v).and_then(|m| m.get(t)).map(|vals| mean(vals))
    };
    let mut best: BTreeMap<String, f64> = BTreeMap::new();
    for t in &tasks {
        let m = variants
            .iter()
            .filter_map(|v| cell_mean(v, t))
            .fold(f64::NEG_INFINITY, f64::max);
        best.insert(t.clone(), m);
    }

    out.push_str("| variant |");
    for t in &tasks {
        out.push_str(&format!(" {t} |"));
    }
    out.push_str("\n|---|");
    for _ in &tasks {
        out.push_str("---|");
    }
    out.push('\n');
    for v in &variants {
        out.push_str(&format!("| {}-{} |", v.0, v.1));
        for t in &tasks {
            match table.get(v).and_then(|m| m.get(t)) {
                Some(vals) => {
                    let m = mean(vals);
                    let body = match sample_std(vals) {
                        Some(s) => format!("{m:.4} ± {s:.4}"),
                        None => format!("{m:.4}"),
                    };
                    if m == best[t] {
                        out.push_str(&format!(" **{body}** |"));
                    } else {
                        out.push_str(&format!(" {body} |"));
                    }
                }
                None => out.push_str(" — |"),
            }
        }
        out.push('\n');
    }

    let deltas = paired_deltas(records);
    out.push_str(&delta_table(
        "Positional structure: rope2d − rope1d, paired per seed",
        &deltas.pe_deltas,
        "encoder",
    ));
    out.push_str(&delta_table(
        "Encoder objective: generative − contrastive, paired per seed",
        &deltas.encoder_deltas,
        "pe",
    ));

    if let Some(summary) = &deltas.objective_summary {
        out.push_str("\n## Encoder objective on spatial tasks (relation + locate)\n\n");
        out.push_str("| seed | generative | contrastive | delta |\n|---|---|---|---|\n");
        for (seed, g, c) in &summary.per_seed {
            out.push_str(&format!(
                "| {seed} | {g:.4} | {c:.4} | {:+.4} |\n",
                g - c
            ));
        }
        out.push_str(&format!(
            "\nGenerative ≥ contrastive on mean relation+locate accuracy in {} of {} seeds.\n",
            summary.wins_ge, summary.n_seeds
        ));
        if !summary.direction_holds {
            out.push_str(
                "\n**DIRECTIONAL MISMATCH:** the generative-objective advantage on spatial \
                 tasks did not replicate at this scale; the comparison above reports the \
                 observed direction.\n",
            );
        }
    }

    out
}

/// Writes results.csv and report.md; the report is rendered from the
/// re-parsed CSV. Returns (results_path, report_path).
pub fn write_report(records: &[EvalRecord], out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let csv = results_csv(records);
    let results_path = out_dir.join("results.csv");
    std::fs::write(&results_path, &csv).map_err(|e| HarnessError::Io {
        path: results_path.clone(),
        source: e,
    })?;
    let parsed = parse_results_csv(&csv)?;
    let md = render_report(&parsed);
    let report_path = out_dir.join("report.md");
    std::fs::write(&report_path, md).map_err(|e| HarnessError::Io {
        path: report_path.clone(),
        source: e,
    })?;
    Ok((results_path, report_path))
}

