//! Deterministic synthetic 2D scenes and question/answer datasets.
//!
//! Scenes are symbolic (a grid of colored shapes); images are rendered
//! from the symbol level on demand, so datasets stay byte-exact text
//! files. The three task families probe spatial relations, counting,
//! and localization.

mod dataset;
mod qa;
mod render;
mod vocab;

pub use dataset::{
    Split,
    generate_datasets, read_caption_dataset, read_dataset, write_caption_dataset, write_dataset,
    CaptionRecord, DataGenConfig, DatasetError, DatasetPaths,
};
pub use qa::{make_caption, make_count_q, make_locate_q, make_relation_q, QaMeta, QARecord, Task};
pub use render::render;
pub use vocab::{Vocab, VocabError, BOS, EOS, IMG, PAD};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::RngStream;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scenegen config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneShape {
    Square,
    Circle,
    Triangle,
}

impl SceneShape {
    pub const ALL: [SceneShape; 3] = [SceneShape::Square, SceneShape::Circle, SceneShape::Triangle];

    pub fn word(&self) -> &'static str {
        match self {
            SceneShape::Square => "square",
            SceneShape::Circle => "circle",
            SceneShape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneColor {
    Red,
    Green,
    Blue,
    Yellow,
}

impl SceneColor {
    pub const ALL: [SceneColor; 4] = [
        SceneColor::Red,
        SceneColor::Green,
        SceneColor::Blue,
        SceneColor::Yellow,
    ];

    pub fn word(&self) -> &'static str {
        match self {
            SceneColor::Red => "red",
            SceneColor::Green => "green",
            SceneColor::Blue => "blue",
            SceneColor::Yellow => "yellow",
        }
    }

    pub fn rgb(&self) -> [f64; 3] {
        match self {
            SceneColor::Red => [1.0, 0.0, 0.0],
            SceneColor::Green => [0.0, 1.0, 0.0],
            SceneColor::Blue => [0.0, 0.0, 1.0],
            SceneColor::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: SceneShape,
    pub color: SceneColor,
    /// (row, col), zero-based.
    pub cell: (usize, usize),
}

/// Symbolic scene: ground truth for rendering and all QA labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// (rows, cols).
    pub grid: (usize, usize),
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    /// Checks the type invariants: nonempty, in bounds, one object per cell.
    pub fn validate(&self) -> Result<(), SceneError> {
        let (rows, cols) = self.grid;
        if self.objects.is_empty() {
            return Err(SceneError::Config("scene has no objects".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for o in &self.objects {
            if o.cell.0 >= rows || o.cell.1 >= cols {
                return Err(SceneError::Config(format!(
                    "cell {:?} outside {rows}x{cols} grid",
                    o.cell
                )));
            }
            if !seen.insert(o.cell) {
                return Err(SceneError::Config(format!("duplicate cell {:?}", o.cell)));
            }
        }
        Ok(())
    }

    /// Objects sorted in row-major cell order.
    pub fn objects_row_major(&self) -> Vec<&SceneObject> {
        let mut v: Vec<&SceneObject> = self.objects.iter().collect();
        v.sort_by_key(|o| o.cell);
        v
    }

    /// Objects whose (color, shape) pair is unique within the scene.
    pub fn unambiguous_objects(&self) -> Vec<&SceneObject> {
        let mut counts = std::collections::HashMap::new();
        for o in &self.objects {
            *counts.entry((o.color, o.shape)).or_insert(0usize) += 1;
        }
        self.objects
            .iter()
            .filter(|o| counts[&(o.color, o.shape)] == 1)
            .collect()
    }
}

/// Bounds on scene sampling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConstraints {
    pub min_objects: usize,
    pub max_objects: usize,
    pub shapes: Vec<SceneShape>,
    pub colors: Vec<SceneColor>,
}

impl Default for SceneConstraints {
    fn default() -> Self {
        Self {
            min_objects: 2,
            max_objects: 5,
            shapes: SceneShape::ALL.to_vec(),
            colors: SceneColor::ALL.to_vec(),
        }
    }
}

/// Uniformly samples an object count, then rejection-samples distinct
/// cells. Deterministic given the RNG state.
pub fn sample_scene(
    rng: &mut RngStream,
    grid: (usize, usize),
    constraints: &SceneConstraints,
) -> Result<SceneSpec, SceneError> {
    let (rows, cols) = grid;
    if rows == 0 || cols == 0 {
        return Err(SceneError::Config("grid must be nonempty".into()));
    }
    if constraints.min_objects == 0 || constraints.min_objects > constraints.max_objects {
        return Err(SceneError::Config(format!(
            "object count range [{}, {}] is invalid",
            constraints.min_objects, constraints.max_objects
        )));
    }
    if constraints.max_objects > rows * cols {
        return Err(SceneError::Config(format!(
            "max_objects {} exceeds {}x{} grid capacity",
            constraints.max_objects, rows, cols
        )));
    }
    if constraints.shapes.is_empty() || constraints.colors.is_empty() {
        return Err(SceneError::Config("empty shape or color pool".into()));
    }

    let n = rng.range_inclusive(constraints.min_objects, constraints.max_objects);
    let mut used = std::collections::HashSet::new();
    let mut objects = Vec::with_capacity(n);
    for _ in 0..n {
        let cell = loop {
            let cell = (rng.below(rows), rng.below(cols));
            if used.insert(cell) {
                break cell;
            }
        };
        objects.push(SceneObject {
            shape: *rng.choose(&constraints.shapes),
            color: *rng.choose(&constraints.colors),
            cell,
        });
    }
    Ok(SceneSpec { grid, objects })
}
