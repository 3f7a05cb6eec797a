mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use socialcircle::circle::{attention_scores, compute_meta, PartitionConfig};
use socialcircle::data::{build_windows, normalize_case, select_neighbors, AgentTrack, Unit};
use socialcircle::metrics::{ade, fde, min_over_k};
use socialcircle::Point;

fn tracks_from_masks(masks: &[Vec<bool>]) -> Vec<AgentTrack> {
    masks
        .iter()
        .enumerate()
        .map(|(a, mask)| AgentTrack {
            agent_id: format!("a{a}"),
            samples: mask
                .iter()
                .enumerate()
                .filter(|(_, &present)| present)
                .map(|(f, _)| (f as i64 * 10, [f as f64, a as f64]))
                .collect(),
            unit: Unit::Meters,
        })
        .filter(|t| !t.samples.is_empty())
        .collect()
}

// Counts every start frame whose whole window is present, frame by frame.
fn brute_force_windows(masks: &[Vec<bool>], span: usize) -> usize {
    masks
        .iter()
        .map(|mask| {
            (0..mask.len())
                .filter(|&s| s + span <= mask.len() && mask[s..s + span].iter().all(|&p| p))
                .count()
        })
        .sum()
}

proptest! {
    #[test]
    fn window_count_matches_brute_force(
        masks in prop::collection::vec(prop::collection::vec(prop::bool::weighted(0.85), 40), 1..5),
        t_h in 1usize..6,
        t_f in 1usize..6,
    ) {
        // An always-present anchor agent keeps every frame on the scene's step axis.
        let mut all = vec![vec![true; 40]];
        all.extend(masks);
        let tracks = tracks_from_masks(&all);
        let cases = build_windows(&tracks, "s", t_h, t_f, 1);
        prop_assert_eq!(cases.len(), brute_force_windows(&all, t_h + t_f));
        for c in &cases {
            prop_assert_eq!(c.observed.len(), t_h);
            prop_assert!(c.neighbors.iter().all(|n| n.window.len() == t_h));
        }
    }

    #[test]
    fn normalization_commutes_with_translation(seed in any::<u64>(), dx in -1e3f64..1e3, dy in -1e3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = common::random_case(&mut rng, 0, 4, 8, 12);
        let moved = case.map_points(|p| [p[0] + dx, p[1] + dy]);
        let (a, _) = normalize_case(&case);
        let (b, tb) = normalize_case(&moved);
        let close = |p: &Point, q: &Point| (p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9;
        prop_assert!(a.observed.iter().zip(&b.observed).all(|(p, q)| close(p, q)));
        for (na, nb) in a.neighbors.iter().zip(&b.neighbors) {
            prop_assert!(na.window.iter().zip(&nb.window).all(|(p, q)| close(p, q)));
        }
        let restored = tb.invert_all(b.future.as_ref().unwrap());
        prop_assert!(restored.iter().zip(moved.future.as_ref().unwrap()).all(|(p, q)| close(p, q)));
    }

    #[test]
    fn neighbor_selection_idempotent_and_order_free(seed in any::<u64>(), cap in 0usize..12, n in 0usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = common::random_case(&mut rng, 0, n, 8, 12);
        let once = select_neighbors(&case, cap);
        prop_assert_eq!(once.neighbors.len(), n.min(cap));
        prop_assert_eq!(&select_neighbors(&once, cap), &once);
        let mut shuffled = case.clone();
        shuffled.neighbors.reverse();
        shuffled.neighbors.rotate_left(n / 3);
        prop_assert_eq!(select_neighbors(&shuffled, cap), once);
    }

    #[test]
    fn meta_structure(seed in any::<u64>(), n in 0usize..30, parts in 1usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = common::random_case(&mut rng, 0, n, 8, 12);
        let config = PartitionConfig { n_partitions: parts, ..Default::default() };
        let meta = compute_meta(&normalize_case(&case).0, &config).unwrap();
        prop_assert_eq!(meta.counts.iter().sum::<usize>(), n + 1);
        prop_assert!(meta.counts[0] >= 1);
        for (row, &count) in meta.values.iter().zip(&meta.counts) {
            if count == 0 {
                prop_assert!(row.iter().all(|&v| v == 0.0));
            }
            prop_assert!(row.iter().all(|v| v.is_finite()));
            prop_assert!(row[0] >= 0.0 && row[1] >= 0.0);
            prop_assert!((0.0..std::f64::consts::TAU).contains(&row[2]));
        }
        if parts == 1 {
            prop_assert_eq!(meta.counts[0], n + 1);
        }
    }

    #[test]
    fn attention_sign_and_scale_invariance(
        rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 1..9),
        flip_row in 0usize..9,
        flip_col in 0usize..6,
        scale in prop::sample::select(vec![-3.0, -0.5, 0.25, 2.0, 7.5]),
    ) {
        let base = attention_scores(&rows);
        let mut flipped = rows.clone();
        let r = flip_row % rows.len();
        flipped[r][flip_col] = -flipped[r][flip_col];
        prop_assert_eq!(&attention_scores(&flipped).raw, &base.raw);

        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
        let s = attention_scores(&scaled);
        for (a, b) in s.normalized.iter().zip(&base.normalized) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn metric_invariants(seed in any::<u64>(), k in 1usize..21, dx in -100.0f64..100.0, dy in -100.0f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = common::random_walk(&mut rng, [0.0, 0.0], 12);
        let samples: Vec<Vec<Point>> = (0..k).map(|_| common::random_walk(&mut rng, [0.1, -0.2], 12)).collect();
        let (min_ade, min_fde) = min_over_k(&samples, &gt).unwrap();
        for s in &samples {
            prop_assert!(min_ade <= ade(s, &gt).unwrap());
            prop_assert!(min_fde <= fde(s, &gt).unwrap());
        }
        let shift = |pts: &Vec<Point>| pts.iter().map(|p| [p[0] + dx, p[1] + dy]).collect::<Vec<Point>>();
        let moved: Vec<Vec<Point>> = samples.iter().map(shift).collect();
        let (a2, f2) = min_over_k(&moved, &shift(&gt)).unwrap();
        prop_assert!((a2 - min_ade).abs() < 1e-9 && (f2 - min_fde).abs() < 1e-9);
    }
}
