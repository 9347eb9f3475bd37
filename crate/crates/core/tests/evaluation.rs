use hpk_core::evaluation::{hungarian_match, matched_accuracy, ContingencyTable};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out.sort();
    out
}

/// Best total agreement and the lexicographically smallest permutation
/// attaining it, over the zero-padded square table.
fn brute_force(counts: &[Vec<u64>]) -> (u64, Vec<usize>) {
    let (r, c) = (counts.len(), counts[0].len());
    let n = r.max(c);
    let at = |a: usize, b: usize| if a < r && b < c { counts[a][b] } else { 0 };
    let mut best = (0, Vec::new());
    for p in permutations(n) {
        let score: u64 = p.iter().enumerate().map(|(a, &b)| at(a, b)).sum();
        if best.1.is_empty() || score > best.0 {
            best = (score, p);
        }
    }
    best
}

fn random_table(rng: &mut ChaCha8Rng, r: usize, c: usize, max: u64) -> Vec<Vec<u64>> {
    (0..r).map(|_| (0..c).map(|_| rng.gen_range(0..=max)).collect()).collect()
}

#[test]
fn square_tables_match_permutation_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for trial in 0..1000 {
        let counts = random_table(&mut rng, 6, 6, if trial % 2 == 0 { 20 } else { 2 });
        let a = hungarian_match(&ContingencyTable::new(counts.clone()).unwrap());
        let (best, perm) = brute_force(&counts);
        assert_eq!(a.agreement, best);
        let chosen: Vec<usize> = a.mapping.iter().map(|m| m.unwrap()).collect();
        assert_eq!(chosen, perm, "lexicographic tie-break");
    }
}

#[test]
fn matched_accuracy_equals_best_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let pred: Vec<usize> = (0..64).map(|_| rng.gen_range(0..4)).collect();
        let truth: Vec<usize> = (0..64).map(|_| rng.gen_range(0..4)).collect();
        let best = permutations(4)
            .into_iter()
            .map(|p| pred.iter().zip(&truth).filter(|(a, b)| p[**a] == **b).count())
            .max()
            .unwrap();
        assert_eq!(matched_accuracy(&pred, &truth).unwrap(), best as f64 / 64.0);
    }
}

#[test]
fn classwise_permutation_of_truth_is_perfect() {
    let truth: Vec<usize> = (0..50).map(|i| (i * 7) % 5).collect();
    let sigma = [3, 0, 4, 1, 2];
    let pred: Vec<usize> = truth.iter().map(|&t| sigma[t]).collect();
    assert_eq!(matched_accuracy(&pred, &truth).unwrap(), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn rectangular_tables_match_enumeration(seed in 0u64..1_000_000, r in 1usize..=7, c in 1usize..=7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let counts = random_table(&mut rng, r, c, 9);
        let a = hungarian_match(&ContingencyTable::new(counts.clone()).unwrap());
        prop_assert_eq!(a.agreement, brute_force(&counts).0);
        let mut seen: Vec<usize> = a.mapping.iter().flatten().copied().collect();
        let matched = seen.len();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), matched);
        prop_assert_eq!(matched, r.min(c));
    }

    #[test]
    fn relabelling_predictions_leaves_accuracy_unchanged(
        seed in 0u64..1_000_000,
        perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred: Vec<usize> = (0..40).map(|_| rng.gen_range(0..6)).collect();
        let truth: Vec<usize> = (0..40).map(|_| rng.gen_range(0..4)).collect();
        let relabelled: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
        prop_assert_eq!(matched_accuracy(&pred, &truth).unwrap(), matched_accuracy(&relabelled, &truth).unwrap());
    }

    #[test]
    fn matched_accuracy_beats_any_fixed_one_to_one_mapping(
        seed in 0u64..1_000_000,
        mapping in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred: Vec<usize> = (0..30).map(|_| rng.gen_range(0..5)).collect();
        let truth: Vec<usize> = (0..30).map(|_| rng.gen_range(0..5)).collect();
        let fixed = pred.iter().zip(&truth).filter(|(p, t)| mapping[**p] == **t).count() as f64 / 30.0;
        prop_assert!(matched_accuracy(&pred, &truth).unwrap() >= fixed);
    }
}
