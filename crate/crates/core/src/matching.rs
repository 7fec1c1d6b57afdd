//! Cross-frame object linking and neighborhood assembly.
//!
//! Objects in adjacent frames are linked by greedily maximising
//! `cosine(p_i, p_j) + IoU(b_i, b_j)` over a one-to-one assignment, and
//! each object's neighborhood is the rest of its tracklet.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_LINK_THRESHOLD: f64 = 0.5;

/// Axis-aligned box in normalised image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self> {
        if !(x1 <= x2 && y1 <= y2) {
            return Err(Error::contract(format!(
                "box corners out of order: ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> (T, T) {
        let half = T::lit(0.5);
        ((self.x1 + self.x2) * half, (self.y1 + self.y2) * half)
    }
}

/// One detected object in one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectProposal<T> {
    pub frame: usize,
    pub appearance: Vec<T>,
    pub bbox: BBox<T>,
    pub class_scores: Vec<T>,
    pub label: Option<usize>,
}

/// Position of a proposal: index into the frame list, then into that frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProposalRef {
    pub frame: usize,
    pub index: usize,
}

/// Proposals of one object linked across frames, ordered by frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tracklet {
    pub members: Vec<ProposalRef>,
}

impl Tracklet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, r: ProposalRef) -> bool {
        self.members.contains(&r)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhood<T> {
    pub target: ProposalRef,
    pub aligned: Vec<ProposalRef>,
    /// Appearance rows of `aligned`, in the same order.
    pub z: Vec<Vec<T>>,
    /// Frame index of each aligned member minus the target's frame index.
    pub offsets: Vec<i64>,
}

impl<T> Neighborhood<T> {
    pub fn len(&self) -> usize {
        self.aligned.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aligned.is_empty()
    }
}

/// Intersection over union; zero when the union has zero area.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(T::zero());
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(T::zero());
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        T::zero()
    } else {
        inter / union
    }
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine_similarity<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::shape("cosine_similarity", &[p.len()], &[q.len()]));
    }
    let dot: T = p.iter().zip(q).map(|(&a, &b)| a * b).sum();
    let np = p.iter().map(|&a| a * a).sum::<T>().sqrt();
    let nq = q.iter().map(|&a| a * a).sum::<T>().sqrt();
    if np == T::zero() || nq == T::zero() {
        return Ok(T::zero());
    }
    Ok(dot / (np * nq))
}

/// Matching score between proposals of two different frames.
pub fn match_score<T: Scalar>(i: &ObjectProposal<T>, j: &ObjectProposal<T>) -> Result<T> {
    if i.frame == j.frame {
        return Err(Error::contract(format!(
            "match_score needs proposals from different frames (both in frame {})",
            i.frame
        )));
    }
    Ok(cosine_similarity(&i.class_scores, &j.class_scores)? + iou(&i.bbox, &j.bbox))
}

fn frame_index<T>(frame: &[ObjectProposal<T>]) -> Result<Option<usize>> {
    let Some(first) = frame.first() else {
        return Ok(None);
    };
    if frame.iter().any(|p| p.frame != first.frame) {
        return Err(Error::contract("proposals of one frame carry different frame indices"));
    }
    Ok(Some(first.frame))
}

/// Links proposals of consecutive frames into tracklets.
///
/// For each adjacent frame pair the highest-scoring unmatched cross-frame pair
/// is linked first (ties go to the lexicographically smaller
/// `(prev index, next index)`), until the best remaining score falls below
/// `threshold`. Unlinked proposals start new tracklets. Tracklets are returned
/// in order of their first member.
pub fn link_objects<T: Scalar>(frames: &[Vec<ObjectProposal<T>>], threshold: T) -> Result<Vec<Tracklet>> {
    if frames.is_empty() {
        return Err(Error::contract("link_objects needs at least one frame"));
    }
    let mut last_index = None;
    for f in frames {
        if let Some(idx) = frame_index(f)? {
            if last_index.is_some_and(|prev| idx <= prev) {
                return Err(Error::contract("frame indices must strictly increase"));
            }
            last_index = Some(idx);
        }
    }

    let mut tracklets: Vec<Tracklet> = Vec::new();
    // Tracklet id of every proposal in the previous frame.
    let mut prev_owner: Vec<usize> = Vec::new();
    for (t, frame) in frames.iter().enumerate() {
        let mut owner = vec![usize::MAX; frame.len()];
        if t > 0 && !frame.is_empty() && !frames[t - 1].is_empty() {
            let prev = &frames[t - 1];
            let mut candidates = Vec::with_capacity(prev.len() * frame.len());
            for (a, pa) in prev.iter().enumerate() {
                for (b, pb) in frame.iter().enumerate() {
                    candidates.push((match_score(pa, pb)?, a, b));
                }
            }
            candidates.sort_by(|x, y| {
                y.0.partial_cmp(&x.0)
                    .unwrap_or(Ordering::Equal)
                    .then(x.1.cmp(&y.1))
                    .then(x.2.cmp(&y.2))
            });
            let mut prev_used = vec![false; prev.len()];
            for (score, a, b) in candidates {
                if score < threshold {
                    break;
                }
                if prev_used[a] || owner[b] != usize::MAX {
                    continue;
                }
                prev_used[a] = true;
                owner[b] = prev_owner[a];
            }
        }
        for (b, slot) in owner.iter_mut().enumerate() {
            let r = ProposalRef { frame: t, index: b };
            if *slot == usize::MAX {
                *slot = tracklets.len();
                tracklets.push(Tracklet { members: vec![r] });
            } else {
                tracklets[*slot].members.push(r);
            }
        }
        prev_owner = owner;
    }
    Ok(tracklets)
}

/// Gathers the other members of `target`'s tracklet in frame order.
pub fn build_neighborhood<T: Scalar>(
    tracklets: &[Tracklet],
    frames: &[Vec<ObjectProposal<T>>],
    target: ProposalRef,
) -> Result<Neighborhood<T>> {
    let tracklet = tracklets
        .iter()
        .find(|t| t.contains(target))
        .ok_or_else(|| Error::contract(format!("{target:?} does not belong to any tracklet")))?;
    let proposal = |r: ProposalRef| -> Result<&ObjectProposal<T>> {
        frames
            .get(r.frame)
            .and_then(|f| f.get(r.index))
            .ok_or_else(|| Error::contract(format!("{r:?} is out of range")))
    };
    let target_frame = proposal(target)?.frame as i64;

    let mut aligned: Vec<ProposalRef> = tracklet.members.iter().copied().filter(|&r| r != target).collect();
    aligned.sort_by_key(|&r| (proposal(r).map(|p| p.frame).unwrap_or(usize::MAX), r.index));
    let mut z = Vec::with_capacity(aligned.len());
    let mut offsets = Vec::with_capacity(aligned.len());
    for &r in &aligned {
        let p = proposal(r)?;
        z.push(p.appearance.clone());
        offsets.push(p.frame as i64 - target_frame);
    }
    Ok(Neighborhood {
        target,
        aligned,
        z,
        offsets,
    })
}
