use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use td2net::eval::{
    enumerate_predictions, evaluate_task, mean_recall_at_k, recall_at_k, EvalFrame, EvalOptions, EvalVideo, FramePrediction,
    GroundTruthFrame, Mode, Task,
};

mod common;
use common::{close, random_instance, reference};

const KS: [usize; 5] = [1, 5, 10, 20, 50];

#[test]
fn metrics_equal_brute_force_reference() {
    let opts = EvalOptions::default();
    for seed in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let task = if seed % 2 == 0 { Task::PredCls } else { Task::SgCls };
        let inst = random_instance(&mut rng, task);
        for mode in [Mode::With, Mode::No] {
            for k in KS {
                let (r, m) = reference(&inst.frames, inst.predicates, mode, k);
                let got_r = recall_at_k(&inst.frames, inst.predicates, mode, k, &opts).unwrap();
                let got_m = mean_recall_at_k(&inst.frames, inst.predicates, mode, k, &opts).unwrap();
                assert!(close(got_r, r), "seed {seed} {mode} k={k}: recall {got_r:?} vs {r:?}");
                assert!(close(got_m, m), "seed {seed} {mode} k={k}: mean recall {got_m:?} vs {m:?}");
            }
        }
    }
}

#[test]
fn recall_grows_with_k() {
    let opts = EvalOptions::default();
    for seed in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let inst = random_instance(&mut rng, Task::SgCls);
        let video = vec![EvalVideo { frames: inst.frames }];
        let report = evaluate_task(&video, Task::SgCls, inst.predicates, &[Mode::With, Mode::No], &KS, &opts).unwrap();
        for w in KS.windows(2) {
            for mode in [Mode::With, Mode::No] {
                assert!(report.recall(mode, w[0]) <= report.recall(mode, w[1]));
                assert!(report.mean_recall(mode, w[0]) <= report.mean_recall(mode, w[1]));
            }
        }
    }
}

#[test]
fn no_constraint_dominates_once_every_candidate_fits() {
    let opts = EvalOptions::default();
    for seed in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let inst = random_instance(&mut rng, Task::SgCls);
        let widest = inst
            .frames
            .iter()
            .map(|f| f.prediction.pairs.len() * inst.predicates)
            .max()
            .unwrap_or(0);
        if widest > 100 {
            continue;
        }
        let k = widest.max(1);
        let with = recall_at_k(&inst.frames, inst.predicates, Mode::With, k, &opts).unwrap();
        let no = recall_at_k(&inst.frames, inst.predicates, Mode::No, k, &opts).unwrap();
        assert!(no.unwrap_or(0.0) >= with.unwrap_or(0.0), "seed {seed}");
    }
}

/// At a fixed K the extra predicates of a strong pair can displace a
/// with-constraint hit, so dominance is not a per-instance law.
#[test]
fn no_constraint_can_lose_at_small_k() {
    let frame = EvalFrame {
        prediction: FramePrediction {
            labels: vec![0, 0, 0],
            label_scores: vec![1.0; 3],
            pairs: vec![(0, 1), (1, 2)],
            predicate_scores: vec![vec![0.9, 0.88], vec![0.85, 0.1]],
        },
        truth: GroundTruthFrame {
            labels: vec![0, 0, 0],
            relations: vec![(1, 0, 2)],
        },
    };
    let opts = EvalOptions::default();
    let frames = [frame];
    assert_eq!(recall_at_k(&frames, 2, Mode::With, 2, &opts).unwrap(), Some(100.0));
    assert_eq!(recall_at_k(&frames, 2, Mode::No, 2, &opts).unwrap(), Some(0.0));
}

#[test]
fn mean_recall_is_unchanged_by_duplicating_videos() {
    let opts = EvalOptions::default();
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let videos: Vec<EvalVideo> = (0..3)
            .map(|_| EvalVideo {
                frames: random_instance(&mut rng, Task::PredCls).frames,
            })
            .collect();
        // All instances share the widest predicate range.
        let p = 10;
        let doubled: Vec<EvalVideo> = videos.iter().chain(videos.iter()).cloned().collect();
        let a = evaluate_task(&videos, Task::PredCls, p, &[Mode::With, Mode::No], &KS, &opts).unwrap();
        let b = evaluate_task(&doubled, Task::PredCls, p, &[Mode::With, Mode::No], &KS, &opts).unwrap();
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert!(close(x.mean_recall, y.mean_recall));
            assert!(close(x.recall, y.recall));
        }
    }
}

#[test]
fn predcls_ranks_by_predicate_score_alone() {
    let opts = EvalOptions::default();
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + seed);
        let inst = random_instance(&mut rng, Task::PredCls);
        for f in &inst.frames {
            let ranked = enumerate_predictions(0, &f.prediction, Mode::No, &opts).unwrap();
            for t in &ranked {
                let k = f.prediction.pairs.iter().position(|&p| p == (t.subject, t.object)).unwrap();
                assert_eq!(t.score, f.prediction.predicate_scores[k][t.predicate]);
            }
            assert!(ranked.windows(2).all(|w| w[0].score >= w[1].score));
        }
    }
}

#[test]
fn oracle_scores_reach_full_recall() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut inst = random_instance(&mut rng, Task::PredCls);
    for f in &mut inst.frames {
        // One relation per pair, scored 1; everything else near zero.
        let mut seen = Vec::new();
        f.truth.relations.retain(|&(s, _, o)| {
            let fresh = !seen.contains(&(s, o));
            seen.push((s, o));
            fresh
        });
        let n = f.truth.labels.len();
        f.prediction.pairs = (0..n).flat_map(|s| (0..n).filter(move |&o| o != s).map(move |o| (s, o))).collect();
        f.prediction.predicate_scores = f
            .prediction
            .pairs
            .iter()
            .map(|&(s, o)| {
                (0..inst.predicates)
                    .map(|p| if f.truth.relations.contains(&(s, p, o)) { 1.0 } else { 0.01 })
                    .collect()
            })
            .collect();
    }
    let opts = EvalOptions::default();
    for mode in [Mode::With, Mode::No] {
        let r = recall_at_k(&inst.frames, inst.predicates, mode, 50, &opts).unwrap();
        assert!(r.is_none() || r == Some(100.0), "{mode}: {r:?}");
    }
}
