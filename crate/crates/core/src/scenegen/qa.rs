//! Question/answer generators over symbolic scenes.
//!
//! Questions are token strings from the fixed vocabulary; answers come
//! from closed per-task answer sets (yes/no, digits, cell tokens), so
//! exact-match scoring is unambiguous.

use serde::{Deserialize, Serialize};

use super::{SceneColor, SceneObject, SceneShape, SceneSpec};
use crate::numerics::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Relation,
    Count,
    Locate,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Relation, Task::Count, Task::Locate];

    pub fn label(&self) -> &'static str {
        match self {
            Task::Relation => "relation",
            Task::Count => "count",
            Task::Locate => "locate",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relation" => Ok(Task::Relation),
            "count" => Ok(Task::Count),
            "locate" => Ok(Task::Locate),
            other => Err(format!("unknown task '{other}'")),
        }
    }
}

/// Provenance carried by each record: template id plus the queried
/// objects, enough for diagnostics to find the target cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct QaMeta {
    pub template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_cell: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QARecord {
    pub scene: SceneSpec,
    pub task: Task,
    pub question: String,
    pub answer: String,
    pub meta: QaMeta,
}

fn describe(o: &SceneObject) -> String {
    format!("{} {}", o.color.word(), o.shape.word())
}

/// Spatial relation question with a balanced yes/no answer: the asked
/// relation is the true one or its opposite with probability 1/2.
/// Returns None when the scene has no unambiguous pair (the caller
/// resamples the scene).
pub fn make_relation_q(scene: &SceneSpec, rng: &mut RngStream) -> Option<QARecord> {
    let candidates = scene.unambiguous_objects();
    if candidates.len() < 2 {
        return None;
    }
    let i = rng.below(candidates.len());
    let j = {
        let mut j = rng.below(candidates.len() - 1);
        if j >= i {
            j += 1;
        }
        j
    };
    let (subject, object) = (candidates[i], candidates[j]);
    let (sr, sc) = subject.cell;
    let (or, oc) = object.cell;

    // Horizontal questions need distinct columns, vertical distinct rows.
    let mut axes = Vec::with_capacity(2);
    if sc != oc {
        axes.push(0);
    }
    if sr != or {
        axes.push(1);
    }
    debug_assert!(!axes.is_empty(), "distinct cells differ in row or col");
    let axis = *rng.choose(&axes);
    let (true_rel, false_rel) = if axis == 0 {
        if sc < oc {
            ("left-of", "right-of")
        } else {
            ("right-of", "left-of")
        }
    } else if sr < or {
        ("above", "below")
    } else {
        ("below", "above")
    };
    let ask_true = rng.bernoulli(0.5);
    let (relation, answer) = if ask_true {
        (true_rel, "yes")
    } else {
        (false_rel, "no")
    };

    Some(QARecord {
        scene: scene.clone(),
        task: Task::Relation,
        question: format!(
            "is the {} {} the {} ?",
            describe(subject),
            relation,
            describe(object)
        ),
        answer: answer.to_string(),
        meta: QaMeta {
            template: "relation-v1".into(),
            subject: Some(describe(subject)),
            object: Some(describe(object)),
            relation: Some(relation.to_string()),
            target_cell: Some(subject.cell),
        },
    })
}

/// Counting question over a color+shape or shape-only category. Absent
/// categories are asked 20% of the time so zero answers stay common.
/// Returns None when the true count exceeds a single digit.
pub fn make_count_q(scene: &SceneSpec, rng: &mut RngStream) -> Option<QARecord> {
    // Category pools, deterministically ordered.
    let mut present: Vec<(Option<SceneColor>, SceneShape)> = Vec::new();
    let mut absent: Vec<(Option<SceneColor>, SceneShape)> = Vec::new();
    for shape in SceneShape::ALL {
        for color in SceneColor::ALL {
            let cat = (Some(color), shape);
            if scene
                .objects
                .iter()
                .any(|o| o.shape == shape && o.color == color)
            {
                present.push(cat);
            } else {
                absent.push(cat);
            }
        }
        let cat = (None, shape);
        if scene.objects.iter().any(|o| o.shape == shape) {
            present.push(cat);
        } else {
            absent.push(cat);
        }
    }

    let pick_absent = !absent.is_empty() && (present.is_empty() || rng.bernoulli(0.2));
    let (color, shape) = if pick_absent {
        *rng.choose(&absent)
    } else {
        *rng.choose(&present)
    };

    let count = scene
        .objects
        .iter()
        .filter(|o| o.shape == shape && color.map_or(true, |c| o.color == c))
        .count();
    if count > 9 {
        return None;
    }

    let category = match color {
        Some(c) => format!("{} {}", c.word(), shape.word()),
        None => shape.word().to_string(),
    };
    Some(QARecord {
        scene: scene.clone(),
        task: Task::Count,
        question: format!("how many {category} ?"),
        answer: count.to_string(),
        meta: QaMeta {
            template: if color.is_some() {
                "count-color-shape-v1".into()
            } else {
                "count-shape-v1".into()
            },
            subject: Some(category),
            ..Default::default()
        },
    })
}

/// Localization question for a uniquely describable object; the answer
/// is the row token then the column token of its cell.
pub fn make_locate_q(scene: &SceneSpec, rng: &mut RngStream) -> Option<QARecord> {
    let candidates = scene.unambiguous_objects();
    if candidates.is_empty() {
        return None;
    }
    let target = candidates[rng.below(candidates.len())];
    let (row, col) = target.cell;
    Some(QARecord {
        scene: scene.clone(),
        task: Task::Locate,
        question: format!("where is the {} ?", describe(target)),
        answer: format!("r{row} c{col}"),
        meta: QaMeta {
            template: "locate-v1".into(),
            subject: Some(describe(target)),
            target_cell: Some(target.cell),
            ..Default::default()
        },
    })
}

/// Deterministic scene description in row-major object order, used for
/// projection pretraining and contrastive encoder pretraining.
pub fn make_caption(scene: &SceneSpec) -> String {
    let mut parts = Vec::with_capacity(scene.objects.len());
    for o in scene.objects_row_major() {
        parts.push(format!(
            "a {} at row {} column {} .",
            describe(o),
            o.cell.0,
            o.cell.1
        ));
    }
    parts.join(" ")
}
