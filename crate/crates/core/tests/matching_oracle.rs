use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use td2net::matching::{build_neighborhood, iou, link_objects, match_score, BBox, ProposalRef};

mod common;
use common::{links_of, monte_carlo_iou, random_box, random_frames, reference_links};

#[test]
fn linking_matches_exhaustive_greedy_reference() {
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = random_frames(&mut rng);
        let threshold = rng.random_range(0.3..1.5);
        let tracklets = link_objects(&frames, threshold).unwrap();
        assert_eq!(links_of(&tracklets, frames.len()), reference_links(&frames, threshold), "seed {seed}");

        let mut seen: Vec<ProposalRef> = tracklets.iter().flat_map(|t| t.members.iter().copied()).collect();
        let total: usize = frames.iter().map(Vec::len).sum();
        assert_eq!(seen.len(), total, "seed {seed}: every proposal exactly once");
        seen.sort_by_key(|r| (r.frame, r.index));
        seen.dedup();
        assert_eq!(seen.len(), total);
    }
}

#[test]
fn iou_agrees_with_point_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..100 {
        let a = random_box(&mut rng);
        // Every third pair is forced to overlap so the estimate is not trivially zero.
        let b = if case % 3 == 0 {
            BBox::new(a.x1 + 0.02, a.y1 - 0.03, a.x2 + 0.1, a.y2 + 0.05).unwrap()
        } else {
            random_box(&mut rng)
        };
        let estimate = monte_carlo_iou(&a, &b, 200_000, &mut rng);
        let exact = iou(&a, &b);
        assert!((estimate - exact).abs() < 0.005, "case {case}: {exact} vs {estimate}");
    }
}

proptest! {
    #[test]
    fn match_score_is_bounded_for_class_scores(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = random_frames(&mut rng);
        for w in frames.windows(2) {
            for a in &w[0] {
                for b in &w[1] {
                    let g = match_score(a, b).unwrap();
                    prop_assert!((0.0..=2.0 + 1e-12).contains(&g));
                }
            }
        }
    }

    #[test]
    fn each_proposal_links_at_most_once_per_frame_pair(seed in any::<u64>(), threshold in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = random_frames(&mut rng);
        let tracklets = link_objects(&frames, threshold).unwrap();
        for pair in links_of(&tracklets, frames.len()) {
            let mut prev: Vec<usize> = pair.iter().map(|p| p.0).collect();
            let mut next: Vec<usize> = pair.iter().map(|p| p.1).collect();
            prev.dedup();
            next.sort();
            next.dedup();
            prop_assert_eq!(prev.len(), pair.len());
            prop_assert_eq!(next.len(), pair.len());
        }
        for t in &tracklets {
            for &m in &t.members {
                let nb = build_neighborhood(&tracklets, &frames, m).unwrap();
                prop_assert_eq!(nb.len(), t.len() - 1);
                prop_assert!(nb.offsets.iter().all(|&o| o != 0));
            }
        }
    }
}
