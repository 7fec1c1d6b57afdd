//! Triplet ranking and Recall@K / mean-Recall@K.
//!
//! Metrics are computed in `f64` regardless of the model scalar. Recall is
//! averaged per frame; mean recall averages per-predicate recall over the
//! predicate classes that occur in the ground truth.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Candidates kept per frame in the no-constraint protocol.
pub const NO_CONSTRAINT_TOP: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Ground-truth boxes and classes given; predict predicates.
    PredCls,
    /// Ground-truth boxes given; predict classes and predicates.
    SgCls,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "predcls" => Ok(Task::PredCls),
            "sgcls" => Ok(Task::SgCls),
            other => Err(Error::contract(format!("unknown task `{other}` (expected predcls or sgcls)"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Task::PredCls => "predcls",
            Task::SgCls => "sgcls",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One predicate per ordered pair.
    With,
    /// Every (pair, predicate) candidate, top 100 per frame.
    No,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "with" => Ok(Mode::With),
            "no" => Ok(Mode::No),
            other => Err(Error::contract(format!("unknown mode `{other}` (expected with or no)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Mode::With => "with",
            Mode::No => "no",
        })
    }
}

/// `(subject, predicate, object)` with subject/object indexing the frame's objects.
pub type Triplet = (usize, usize, usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFrame {
    pub labels: Vec<usize>,
    pub relations: Vec<Triplet>,
}

impl GroundTruthFrame {
    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        for (i, &(s, _, o)) in self.relations.iter().enumerate() {
            if s >= n || o >= n {
                return Err(Error::contract(format!("relation ({s}, _, {o}) references a missing object")));
            }
            if self.relations[..i].contains(&self.relations[i]) {
                return Err(Error::contract(format!("duplicate relation {:?}", self.relations[i])));
            }
        }
        Ok(())
    }
}

/// Model output for one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    /// Predicted class per object (the ground-truth class in PredCLS).
    pub labels: Vec<usize>,
    /// Confidence of each predicted class (1 in PredCLS).
    pub label_scores: Vec<f64>,
    /// Ordered `(subject, object)` pairs scored by the model.
    pub pairs: Vec<(usize, usize)>,
    /// `pairs x P` predicate scores.
    pub predicate_scores: Vec<Vec<f64>>,
}

/// One frame of a prediction dump: what the model said and what was true.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalFrame {
    pub prediction: FramePrediction,
    pub truth: GroundTruthFrame,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalVideo {
    pub frames: Vec<EvalFrame>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictedTriplet {
    pub frame: usize,
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
    pub score: f64,
}

/// `s_sub * s_p * s_obj`; every factor must lie in `(0, 1]`.
pub fn triplet_score(s_sub: f64, s_p: f64, s_obj: f64) -> Result<f64> {
    for v in [s_sub, s_p, s_obj] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::contract(format!("triplet factor {v} outside (0, 1]")));
        }
    }
    Ok(s_sub * s_p * s_obj)
}

/// Evaluation switches that do not change the model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// With-constraint keeps one predicate per group instead of one per pair.
    pub group_constraint: bool,
    /// Group id of each predicate class; required when `group_constraint` is set.
    pub predicate_groups: Vec<usize>,
}

fn rank_order(a: &PredictedTriplet, b: &PredictedTriplet) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.subject.cmp(&b.subject))
        .then(a.object.cmp(&b.object))
        .then(a.predicate.cmp(&b.predicate))
}

/// Ranked candidate triplets of one frame under `mode`.
pub fn enumerate_predictions(
    frame_index: usize,
    pred: &FramePrediction,
    mode: Mode,
    options: &EvalOptions,
) -> Result<Vec<PredictedTriplet>> {
    if pred.pairs.len() != pred.predicate_scores.len() {
        return Err(Error::shape("enumerate_predictions", &[pred.pairs.len()], &[pred.predicate_scores.len()]));
    }
    if pred.labels.len() != pred.label_scores.len() {
        return Err(Error::shape("enumerate_predictions", &[pred.labels.len()], &[pred.label_scores.len()]));
    }
    let mut out = Vec::new();
    for (&(s, o), scores) in pred.pairs.iter().zip(&pred.predicate_scores) {
        if s >= pred.labels.len() || o >= pred.labels.len() {
            return Err(Error::contract(format!("pair ({s}, {o}) references a missing object")));
        }
        let (ss, so) = (pred.label_scores[s], pred.label_scores[o]);
        let candidate = |p: usize| -> Result<PredictedTriplet> {
            Ok(PredictedTriplet {
                frame: frame_index,
                subject: s,
                object: o,
                predicate: p,
                score: triplet_score(ss, scores[p], so)?,
            })
        };
        match mode {
            Mode::No => {
                for p in 0..scores.len() {
                    out.push(candidate(p)?);
                }
            }
            Mode::With if options.group_constraint => {
                if options.predicate_groups.len() != scores.len() {
                    return Err(Error::contract("predicate_groups must name a group for every predicate"));
                }
                let mut best: Vec<(usize, usize)> = Vec::new();
                for (p, &grp) in options.predicate_groups.iter().enumerate() {
                    match best.iter_mut().find(|(g, _)| *g == grp) {
                        Some(slot) if scores[p] > scores[slot.1] => slot.1 = p,
                        Some(_) => {}
                        None => best.push((grp, p)),
                    }
                }
                for (_, p) in best {
                    out.push(candidate(p)?);
                }
            }
            Mode::With => {
                let p = (0..scores.len()).fold(0, |b, p| if scores[p] > scores[b] { p } else { b });
                out.push(candidate(p)?);
            }
        }
    }
    out.sort_by(rank_order);
    if mode == Mode::No {
        out.truncate(NO_CONSTRAINT_TOP);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRecall {
    pub predicate: usize,
    pub ground_truth: usize,
    pub hits: usize,
    /// Percentage; `None` when the class never occurs.
    pub recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub mode: Mode,
    pub k: usize,
    /// Percentage; `None` when no frame has ground-truth relations.
    pub recall: Option<f64>,
    pub mean_recall: Option<f64>,
    pub per_class: Vec<ClassRecall>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    pub entries: Vec<RecallEntry>,
    /// Fraction of objects whose predicted class is correct, in percent.
    pub object_accuracy: Option<f64>,
    pub frames: usize,
}

impl MetricReport {
    pub fn get(&self, mode: Mode, k: usize) -> Option<&RecallEntry> {
        self.entries.iter().find(|e| e.mode == mode && e.k == k)
    }

    pub fn recall(&self, mode: Mode, k: usize) -> f64 {
        self.get(mode, k).and_then(|e| e.recall).unwrap_or(0.0)
    }

    pub fn mean_recall(&self, mode: Mode, k: usize) -> f64 {
        self.get(mode, k).and_then(|e| e.mean_recall).unwrap_or(0.0)
    }
}

/// Per-frame hit bookkeeping for one `(mode, k)`.
#[derive(Clone, Debug, Default)]
struct Tally {
    recall_sum: f64,
    frames_with_gt: usize,
    class_gt: Vec<usize>,
    class_hits: Vec<usize>,
}

impl Tally {
    fn new(num_predicates: usize) -> Self {
        Self {
            class_gt: vec![0; num_predicates],
            class_hits: vec![0; num_predicates],
            ..Self::default()
        }
    }

    fn absorb(&mut self, other: &Tally) {
        self.recall_sum += other.recall_sum;
        self.frames_with_gt += other.frames_with_gt;
        for (a, b) in self.class_gt.iter_mut().zip(&other.class_gt) {
            *a += b;
        }
        for (a, b) in self.class_hits.iter_mut().zip(&other.class_hits) {
            *a += b;
        }
    }

    fn entry(&self, mode: Mode, k: usize) -> RecallEntry {
        let per_class: Vec<ClassRecall> = self
            .class_gt
            .iter()
            .zip(&self.class_hits)
            .enumerate()
            .map(|(p, (&gt, &hits))| ClassRecall {
                predicate: p,
                ground_truth: gt,
                hits,
                recall: (gt > 0).then(|| 100.0 * hits as f64 / gt as f64),
            })
            .collect();
        let present: Vec<f64> = per_class.iter().filter_map(|c| c.recall).collect();
        RecallEntry {
            mode,
            k,
            recall: (self.frames_with_gt > 0).then(|| 100.0 * self.recall_sum / self.frames_with_gt as f64),
            mean_recall: (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64),
            per_class,
        }
    }
}

fn tally_frame(tally: &mut Tally, ranked: &[PredictedTriplet], pred: &FramePrediction, truth: &GroundTruthFrame, k: usize) -> Result<()> {
    if truth.relations.is_empty() {
        return Ok(());
    }
    let top = &ranked[..k.min(ranked.len())];
    let mut hits = 0;
    for &(s, p, o) in &truth.relations {
        if p >= tally.class_gt.len() {
            return Err(Error::contract(format!("predicate {p} out of range")));
        }
        tally.class_gt[p] += 1;
        let labels_ok = pred.labels.get(s) == truth.labels.get(s) && pred.labels.get(o) == truth.labels.get(o);
        if labels_ok && top.iter().any(|t| t.subject == s && t.predicate == p && t.object == o) {
            hits += 1;
            tally.class_hits[p] += 1;
        }
    }
    tally.recall_sum += hits as f64 / truth.relations.len() as f64;
    tally.frames_with_gt += 1;
    Ok(())
}

/// Recall@K (percent) of `frames` under `mode`; `None` without any ground truth.
pub fn recall_at_k(frames: &[EvalFrame], num_predicates: usize, mode: Mode, k: usize, options: &EvalOptions) -> Result<Option<f64>> {
    Ok(evaluate_frames(frames, num_predicates, mode, k, options)?.recall)
}

/// Mean-Recall@K (percent) over predicate classes present in the ground truth.
pub fn mean_recall_at_k(frames: &[EvalFrame], num_predicates: usize, mode: Mode, k: usize, options: &EvalOptions) -> Result<Option<f64>> {
    Ok(evaluate_frames(frames, num_predicates, mode, k, options)?.mean_recall)
}

fn evaluate_frames(frames: &[EvalFrame], num_predicates: usize, mode: Mode, k: usize, options: &EvalOptions) -> Result<RecallEntry> {
    let mut tally = Tally::new(num_predicates);
    for (i, f) in frames.iter().enumerate() {
        let ranked = enumerate_predictions(i, &f.prediction, mode, options)?;
        tally_frame(&mut tally, &ranked, &f.prediction, &f.truth, k)?;
    }
    Ok(tally.entry(mode, k))
}

/// Full report over videos for every requested mode and K. Videos are
/// processed in parallel and reduced in index order.
pub fn evaluate_task(
    videos: &[EvalVideo],
    task: Task,
    num_predicates: usize,
    modes: &[Mode],
    ks: &[usize],
    options: &EvalOptions,
) -> Result<MetricReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::contract("K list must be non-empty and positive"));
    }
    if modes.is_empty() {
        return Err(Error::contract("at least one evaluation mode is required"));
    }
    let combos: Vec<(Mode, usize)> = modes.iter().flat_map(|&m| ks.iter().map(move |&k| (m, k))).collect();

    type VideoTally = (Vec<Tally>, usize, usize);
    let per_video: Vec<Result<VideoTally>> = videos
        .par_iter()
        .map(|video| {
            let mut tallies = vec![Tally::new(num_predicates); combos.len()];
            let (mut correct, mut objects) = (0, 0);
            for (fi, frame) in video.frames.iter().enumerate() {
                frame.truth.validate()?;
                for (a, b) in frame.prediction.labels.iter().zip(&frame.truth.labels) {
                    correct += usize::from(a == b);
                    objects += 1;
                }
                for &mode in modes {
                    let ranked = enumerate_predictions(fi, &frame.prediction, mode, options)?;
                    for (c, &(m, k)) in combos.iter().enumerate() {
                        if m == mode {
                            tally_frame(&mut tallies[c], &ranked, &frame.prediction, &frame.truth, k)?;
                        }
                    }
                }
            }
            Ok((tallies, correct, objects))
        })
        .collect();

    let mut totals = vec![Tally::new(num_predicates); combos.len()];
    let (mut correct, mut objects) = (0, 0);
    for v in per_video {
        let (tallies, c, o) = v?;
        for (t, x) in totals.iter_mut().zip(&tallies) {
            t.absorb(x);
        }
        correct += c;
        objects += o;
    }
    Ok(MetricReport {
        task,
        entries: combos.iter().zip(&totals).map(|(&(m, k), t)| t.entry(m, k)).collect(),
        object_accuracy: (task == Task::SgCls && objects > 0).then(|| 100.0 * correct as f64 / objects as f64),
        frames: videos.iter().map(|v| v.frames.len()).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(scores: Vec<Vec<f64>>, pairs: Vec<(usize, usize)>, relations: Vec<Triplet>) -> EvalFrame {
        let n = pairs.iter().map(|&(a, b)| a.max(b) + 1).max().unwrap_or(1);
        EvalFrame {
            prediction: FramePrediction {
                labels: vec![0; n],
                label_scores: vec![1.0; n],
                pairs,
                predicate_scores: scores,
            },
            truth: GroundTruthFrame {
                labels: vec![0; n],
                relations,
            },
        }
    }

    #[test]
    fn triplet_score_examples() {
        assert_eq!(triplet_score(1.0, 1.0, 1.0).unwrap(), 1.0);
        assert!((triplet_score(0.9, 0.8, 0.7).unwrap() - 0.504).abs() < 1e-15);
        assert!(triplet_score(1e-300, 1.0, 1.0).unwrap() < 1e-299);
        assert!(triplet_score(0.0, 0.5, 0.5).is_err());
        assert!(triplet_score(1.5, 0.5, 0.5).is_err());
    }

    #[test]
    fn candidate_counts_per_mode() {
        let scores: Vec<f64> = (0..26).map(|p| (p as f64 + 1.0) / 30.0).collect();
        let f = frame(vec![scores.clone()], vec![(0, 1)], vec![]);
        let opts = EvalOptions::default();
        assert_eq!(enumerate_predictions(0, &f.prediction, Mode::With, &opts).unwrap().len(), 1);
        assert_eq!(enumerate_predictions(0, &f.prediction, Mode::No, &opts).unwrap().len(), 26);

        let pairs = vec![(0, 1), (1, 0), (0, 2), (2, 0), (1, 2)];
        let all: Vec<Vec<f64>> = (0..5).map(|i| scores.iter().map(|s| s * (1.0 - 0.1 * i as f64)).collect()).collect();
        let f = frame(all, pairs, vec![]);
        let ranked = enumerate_predictions(0, &f.prediction, Mode::No, &opts).unwrap();
        assert_eq!(ranked.len(), 100);
        assert!(ranked.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn ties_break_by_index() {
        let f = frame(vec![vec![0.5, 0.5], vec![0.5, 0.5]], vec![(1, 0), (0, 1)], vec![]);
        let ranked = enumerate_predictions(0, &f.prediction, Mode::No, &EvalOptions::default()).unwrap();
        let order: Vec<_> = ranked.iter().map(|t| (t.subject, t.object, t.predicate)).collect();
        assert_eq!(order, vec![(0, 1, 0), (0, 1, 1), (1, 0, 0), (1, 0, 1)]);
    }

    #[test]
    fn recall_and_mean_recall_separate() {
        // Predicate 0 always hit, predicate 1 always missed.
        let hit = frame(vec![vec![0.9, 0.1]], vec![(0, 1)], vec![(0, 0, 1)]);
        let miss = frame(vec![vec![0.9, 0.1]], vec![(0, 1)], vec![(0, 1, 1)]);
        let opts = EvalOptions::default();
        let equal = vec![hit.clone(), miss.clone()];
        assert_eq!(recall_at_k(&equal, 2, Mode::With, 10, &opts).unwrap(), Some(50.0));
        assert_eq!(mean_recall_at_k(&equal, 2, Mode::With, 10, &opts).unwrap(), Some(50.0));

        let mut skewed = vec![hit; 9];
        skewed.push(miss);
        let r = recall_at_k(&skewed, 2, Mode::With, 10, &opts).unwrap().unwrap();
        assert!((r - 90.0).abs() < 1e-12);
        assert_eq!(mean_recall_at_k(&skewed, 2, Mode::With, 10, &opts).unwrap(), Some(50.0));
    }

    #[test]
    fn oracle_scores_give_full_recall() {
        let f = frame(vec![vec![1.0, 1e-6, 1.0], vec![1e-6, 1.0, 1e-6]], vec![(0, 1), (1, 0)], vec![(0, 0, 1), (0, 2, 1), (1, 1, 0)]);
        let report = evaluate_task(
            &[EvalVideo { frames: vec![f] }],
            Task::PredCls,
            3,
            &[Mode::With, Mode::No],
            &[10, 50],
            &EvalOptions::default(),
        )
        .unwrap();
        assert_eq!(report.recall(Mode::No, 10), 100.0);
        assert_eq!(report.mean_recall(Mode::No, 50), 100.0);
        assert!(report.recall(Mode::With, 10) < 100.0);
    }

    #[test]
    fn frames_without_truth_are_skipped() {
        let f = frame(vec![vec![0.5]], vec![(0, 1)], vec![]);
        assert_eq!(recall_at_k(&[f], 1, Mode::With, 10, &EvalOptions::default()).unwrap(), None);
    }

    #[test]
    fn sgcls_requires_matching_labels() {
        let mut f = frame(vec![vec![0.9]], vec![(0, 1)], vec![(0, 0, 1)]);
        f.prediction.labels[1] = 3;
        assert_eq!(recall_at_k(&[f], 1, Mode::With, 10, &EvalOptions::default()).unwrap(), Some(0.0));
    }

    #[test]
    fn group_constraint_keeps_one_per_group() {
        let f = frame(vec![vec![0.9, 0.8, 0.3, 0.7]], vec![(0, 1)], vec![]);
        let opts = EvalOptions {
            group_constraint: true,
            predicate_groups: vec![0, 0, 1, 1],
        };
        let ranked = enumerate_predictions(0, &f.prediction, Mode::With, &opts).unwrap();
        let preds: Vec<_> = ranked.iter().map(|t| t.predicate).collect();
        assert_eq!(preds, vec![0, 3]);
    }

    #[test]
    fn unknown_task_is_a_contract_error() {
        assert!(matches!("sgdet".parse::<Task>(), Err(Error::Contract(_))));
        assert_eq!("PredCLS".parse::<Task>().unwrap(), Task::PredCls);
    }
}
