//! Independent reference implementations shared by the oracle suites.
#![allow(dead_code)]

use rand::Rng;
use td2net::eval::{EvalFrame, FramePrediction, GroundTruthFrame, Mode, Task};
use td2net::matching::{match_score, BBox, ObjectProposal, Tracklet};

pub struct Instance {
    pub frames: Vec<EvalFrame>,
    pub predicates: usize,
}

pub fn random_instance(rng: &mut impl Rng, task: Task) -> Instance {
    let predicates = rng.random_range(2..=10);
    let classes = 3;
    let frames = (0..rng.random_range(1..=3))
        .map(|_| {
            let n = rng.random_range(1..=6);
            let truth_labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let labels: Vec<usize> = match task {
                Task::PredCls => truth_labels.clone(),
                Task::SgCls => truth_labels.iter().map(|&l| if rng.random_bool(0.2) { (l + 1) % classes } else { l }).collect(),
            };
            let label_scores = match task {
                Task::PredCls => vec![1.0; n],
                Task::SgCls => (0..n).map(|_| rng.random_range(1..=4) as f64 / 4.0).collect(),
            };
            let mut pairs = Vec::new();
            for s in 0..n {
                for o in 0..n {
                    if s != o && rng.random_bool(0.8) {
                        pairs.push((s, o));
                    }
                }
            }
            // Scores on a coarse grid so ties are common.
            let predicate_scores = pairs
                .iter()
                .map(|_| (0..predicates).map(|_| rng.random_range(1..=5) as f64 / 5.0).collect())
                .collect();
            let mut relations = Vec::new();
            for s in 0..n {
                for o in 0..n {
                    for p in 0..predicates {
                        if s != o && rng.random_bool(0.05) {
                            relations.push((s, p, o));
                        }
                    }
                }
            }
            EvalFrame {
                prediction: FramePrediction {
                    labels,
                    label_scores,
                    pairs,
                    predicate_scores,
                },
                truth: GroundTruthFrame {
                    labels: truth_labels,
                    relations,
                },
            }
        })
        .collect();
    Instance { frames, predicates }
}

/// `(score, subject, object, predicate)` candidates of one frame.
pub fn candidates(pred: &FramePrediction, mode: Mode) -> Vec<(f64, usize, usize, usize)> {
    let mut out = Vec::new();
    for (&(s, o), scores) in pred.pairs.iter().zip(&pred.predicate_scores) {
        let keep: Vec<usize> = match mode {
            Mode::No => (0..scores.len()).collect(),
            Mode::With => {
                let top = scores.iter().cloned().fold(f64::MIN, f64::max);
                vec![scores.iter().position(|&v| v == top).unwrap()]
            }
        };
        for p in keep {
            out.push((pred.label_scores[s] * scores[p] * pred.label_scores[o], s, o, p));
        }
    }
    out
}

/// Position of a candidate under score-descending, then index-ascending order.
pub fn rank(all: &[(f64, usize, usize, usize)], c: (f64, usize, usize, usize)) -> usize {
    all.iter()
        .filter(|d| d.0 > c.0 || (d.0 == c.0 && (d.1, d.2, d.3) < (c.1, c.2, c.3)))
        .count()
}

pub fn reference(frames: &[EvalFrame], predicates: usize, mode: Mode, k: usize) -> (Option<f64>, Option<f64>) {
    let cap = if mode == Mode::No { 100 } else { usize::MAX };
    let (mut recall_sum, mut counted) = (0.0, 0);
    let mut gt = vec![0usize; predicates];
    let mut hit = vec![0usize; predicates];
    for f in frames {
        if f.truth.relations.is_empty() {
            continue;
        }
        let all = candidates(&f.prediction, mode);
        let mut hits = 0;
        for &(s, p, o) in &f.truth.relations {
            gt[p] += 1;
            let labels_match = f.prediction.labels[s] == f.truth.labels[s] && f.prediction.labels[o] == f.truth.labels[o];
            let found = all
                .iter()
                .find(|c| (c.1, c.2, c.3) == (s, o, p))
                .is_some_and(|&c| rank(&all, c) < k.min(cap));
            if labels_match && found {
                hits += 1;
                hit[p] += 1;
            }
        }
        recall_sum += hits as f64 / f.truth.relations.len() as f64;
        counted += 1;
    }
    let recall = (counted > 0).then(|| 100.0 * recall_sum / counted as f64);
    let per_class: Vec<f64> = (0..predicates).filter(|&p| gt[p] > 0).map(|p| 100.0 * hit[p] as f64 / gt[p] as f64).collect();
    let mean = (!per_class.is_empty()).then(|| per_class.iter().sum::<f64>() / per_class.len() as f64);
    (recall, mean)
}

pub fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-9,
        (None, None) => true,
        _ => false,
    }
}

pub fn random_box(rng: &mut impl Rng) -> BBox<f64> {
    let (x, y) = (rng.random_range(0.0..0.7), rng.random_range(0.0..0.7));
    BBox::new(x, y, x + rng.random_range(0.05..0.3), y + rng.random_range(0.05..0.3)).unwrap()
}

pub fn random_frames(rng: &mut impl Rng) -> Vec<Vec<ObjectProposal<f64>>> {
    let frames = rng.random_range(1..=4);
    let classes = 3;
    (0..frames)
        .map(|t| {
            (0..rng.random_range(0..=5))
                .map(|_| {
                    // Coarse scores make exact score ties between pairs likely.
                    let scores: Vec<f64> = (0..classes).map(|_| rng.random_range(0..3) as f64 / 2.0).collect();
                    let bbox = if rng.random_bool(0.3) {
                        BBox::new(0.0, 0.0, 0.5, 0.5).unwrap()
                    } else {
                        random_box(rng)
                    };
                    ObjectProposal {
                        frame: t,
                        appearance: vec![t as f64],
                        bbox,
                        class_scores: scores,
                        label: None,
                    }
                })
                .collect()
        })
        .collect()
}

/// Greedy matching by repeated exhaustive search for the best remaining pair.
pub fn reference_links(frames: &[Vec<ObjectProposal<f64>>], threshold: f64) -> Vec<Vec<(usize, usize)>> {
    let mut links = Vec::new();
    for t in 1..frames.len() {
        let (prev, next) = (&frames[t - 1], &frames[t]);
        let mut used_a = vec![false; prev.len()];
        let mut used_b = vec![false; next.len()];
        let mut chosen = Vec::new();
        loop {
            let mut best: Option<(f64, usize, usize)> = None;
            for a in 0..prev.len() {
                for b in 0..next.len() {
                    if used_a[a] || used_b[b] {
                        continue;
                    }
                    let s = match_score(&prev[a], &next[b]).unwrap();
                    // Strictly greater keeps the first (smallest a, then b) among ties.
                    if best.is_none_or(|(bs, _, _)| s > bs) {
                        best = Some((s, a, b));
                    }
                }
            }
            match best {
                Some((s, a, b)) if s >= threshold => {
                    used_a[a] = true;
                    used_b[b] = true;
                    chosen.push((a, b));
                }
                _ => break,
            }
        }
        chosen.sort();
        links.push(chosen);
    }
    links
}

pub fn links_of(tracklets: &[Tracklet], frames: usize) -> Vec<Vec<(usize, usize)>> {
    let mut out = vec![Vec::new(); frames.saturating_sub(1)];
    for tr in tracklets {
        for w in tr.members.windows(2) {
            assert_eq!(w[1].frame, w[0].frame + 1, "tracklets only link adjacent frames");
            out[w[0].frame].push((w[0].index, w[1].index));
        }
    }
    for l in &mut out {
        l.sort();
    }
    out
}

/// Fraction of uniform points of a bounding region inside both boxes, over
/// the fraction inside either.
pub fn monte_carlo_iou(a: &BBox<f64>, b: &BBox<f64>, samples: usize, rng: &mut impl Rng) -> f64 {
    let (x1, y1) = (a.x1.min(b.x1), a.y1.min(b.y1));
    let (x2, y2) = (a.x2.max(b.x2), a.y2.max(b.y2));
    let inside = |bx: &BBox<f64>, x: f64, y: f64| x >= bx.x1 && x <= bx.x2 && y >= bx.y1 && y <= bx.y2;
    let (mut both, mut either) = (0usize, 0usize);
    for _ in 0..samples {
        let (x, y) = (rng.random_range(x1..x2), rng.random_range(y1..y2));
        let (ia, ib) = (inside(a, x, y), inside(b, x, y));
        both += usize::from(ia && ib);
        either += usize::from(ia || ib);
    }
    both as f64 / either.max(1) as f64
}

