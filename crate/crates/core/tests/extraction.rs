mod common;

use proptest::prelude::*;
use xtalk::layout::{extract_coupling_pairs, Point};

use common::{brute_force_pairs, random_design, rng, same_pairs};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn sweep_matches_brute_force(seed in any::<u64>(), n in 1usize..=200, w_max in 0.02f64..0.4) {
        let d = random_design(&mut rng(seed), n);
        let fast = extract_coupling_pairs(&d, w_max);
        let slow = brute_force_pairs(&d, w_max);
        prop_assert!(same_pairs(&fast, &slow, 0.0).is_ok(), "{:?}", same_pairs(&fast, &slow, 0.0));
    }

    #[test]
    fn pairs_survive_translation(seed in any::<u64>(), dx in -500i32..500, dy in -500i32..500) {
        let d = random_design(&mut rng(seed), 120);
        let (dx, dy) = (dx as f64 * 0.25, dy as f64 * 0.25);
        let moved = d.map_points(|p| Point::new(p.x + dx, p.y + dy));
        let w = d.default_w_max();
        let a = extract_coupling_pairs(&d, w);
        let b = extract_coupling_pairs(&moved, w);
        prop_assert!(same_pairs(&a, &b, 1e-9).is_ok(), "{:?}", same_pairs(&a, &b, 1e-9));
    }
}

#[test]
fn exact_threshold_spacing_is_included() {
    let d = random_design(&mut rng(7), 200);
    for p in extract_coupling_pairs(&d, 1.0) {
        let at = extract_coupling_pairs(&d, p.w_si);
        assert!(at.iter().any(|q| (q.victim_segment_id, q.aggressor_segment_id)
            == (p.victim_segment_id, p.aggressor_segment_id)));
    }
}

#[test]
fn every_pair_is_reported_once() {
    let d = random_design(&mut rng(11), 200);
    let pairs = extract_coupling_pairs(&d, 0.3);
    for w in pairs.windows(2) {
        assert!((w[0].victim_segment_id, w[0].aggressor_segment_id) < (w[1].victim_segment_id, w[1].aggressor_segment_id));
    }
    assert!(pairs.iter().all(|p| p.victim_segment_id < p.aggressor_segment_id));
}
