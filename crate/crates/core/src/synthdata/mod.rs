//! Synthetic long-tailed video scene graphs and their on-disk format.

mod format;
mod generate;

pub use format::{read_dataset, write_dataset, BLOB_MAGIC, DTYPE_F32, FORMAT_VERSION};
pub use generate::{generate_dataset, zipf_probabilities, GeneratedData, GenerationTrace, GeneratorConfig, VideoTrace};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One annotated object in one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    /// `[x1, y1, x2, y2]` in normalised image coordinates.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    /// Detector class distribution used for cross-frame matching.
    pub class_scores: Vec<f64>,
    pub label: usize,
    /// Persistent identity within the video (not used by the model).
    pub identity: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameSample {
    pub objects: Vec<ObjectAnnotation>,
    /// `objects x feature_dim` appearance features, row-major.
    pub appearance: Vec<f32>,
    /// Precomputed union features of every ordered pair (see [`ordered_pairs`]),
    /// `pairs x union_dim`, row-major.
    pub union: Option<Vec<f32>>,
    /// `(subject, predicate, object)` triplets.
    pub relations: Vec<(usize, usize, usize)>,
}

impl FrameSample {
    pub fn appearance_row(&self, i: usize, dim: usize) -> &[f32] {
        &self.appearance[i * dim..(i + 1) * dim]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub frames: Vec<FrameSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub num_predicates: usize,
    pub feature_dim: usize,
    /// Width of precomputed union features; `None` when they are absent.
    pub union_dim: Option<usize>,
    /// Optional group id per predicate, used only by the grouped evaluation protocol.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predicate_groups: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub videos: Vec<VideoSample>,
}

/// All ordered `(subject, object)` pairs of `n` objects, subject-major.
pub fn ordered_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|s| (0..n).filter(move |&o| o != s).map(move |o| (s, o))).collect()
}

impl Dataset {
    /// Structural checks shared by the generator and the reader.
    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        if m.num_classes == 0 || m.num_predicates == 0 || m.feature_dim == 0 {
            return Err(Error::contract("dataset dimensions must be positive"));
        }
        if !m.predicate_groups.is_empty() && m.predicate_groups.len() != m.num_predicates {
            return Err(Error::contract("predicate_groups must list every predicate"));
        }
        for v in &self.videos {
            for (fi, f) in v.frames.iter().enumerate() {
                let ctx = || format!("video {} frame {fi}", v.id);
                let n = f.objects.len();
                if f.appearance.len() != n * m.feature_dim {
                    return Err(Error::contract(format!("{}: appearance has wrong size", ctx())));
                }
                for o in &f.objects {
                    if o.label >= m.num_classes || o.class_scores.len() != m.num_classes {
                        return Err(Error::contract(format!("{}: object class out of range", ctx())));
                    }
                    let [x1, y1, x2, y2] = o.bbox;
                    if !(x1 <= x2 && y1 <= y2) {
                        return Err(Error::contract(format!("{}: box corners out of order", ctx())));
                    }
                }
                match (&f.union, m.union_dim) {
                    (Some(u), Some(d)) if u.len() == n * n.saturating_sub(1) * d => {}
                    (None, _) => {}
                    _ => return Err(Error::contract(format!("{}: union features have wrong size", ctx()))),
                }
                for (i, &(s, p, o)) in f.relations.iter().enumerate() {
                    if s >= n || o >= n || s == o || p >= m.num_predicates {
                        return Err(Error::contract(format!("{}: invalid relation ({s}, {p}, {o})", ctx())));
                    }
                    if f.relations[..i].contains(&(s, p, o)) {
                        return Err(Error::contract(format!("{}: duplicate relation ({s}, {p}, {o})", ctx())));
                    }
                }
            }
        }
        Ok(())
    }

    /// Positive annotations per predicate class.
    pub fn predicate_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.meta.num_predicates];
        for f in self.videos.iter().flat_map(|v| &v.frames) {
            for &(_, p, _) in &f.relations {
                counts[p] += 1;
            }
        }
        counts
    }
}
