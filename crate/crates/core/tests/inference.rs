mod common;

use common::tiny_parts;
use hpk_core::inference::{
    exact_marginals, infer_middle, infer_top_mc, infer_top_mpl, read_labels, write_labels,
};
use hpk_core::model::LatentSample;
use hpk_core::sampling::{argmax, argmax_onehot};
use hpk_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn middle_labels_are_encoder_argmax() {
    for seed in 0..5 {
        let (state, cloud, graph, _) = tiny_parts(seed, 9, 4, 2);
        let (_, pi) = state.encode_cloud(&cloud, &graph).unwrap();
        assert_eq!(infer_middle(&state, &cloud, &graph).unwrap(), argmax_onehot(&pi).classes());
    }
}

#[test]
fn uniform_encoder_labels_everything_class_zero() {
    let (mut state, cloud, graph, _) = tiny_parts(1, 9, 4, 2);
    for name in ["enc.head.weight", "enc.head.bias"] {
        let id = state.store.find(name).unwrap();
        state.store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    assert_eq!(infer_middle(&state, &cloud, &graph).unwrap(), vec![0; 9]);
}

#[test]
fn mpl_labels_follow_decoder_at_most_probable_latent() {
    for seed in 0..10 {
        let (state, cloud, graph, _) = tiny_parts(seed, 8, 3, 3);
        let pred = infer_top_mpl(&state, &cloud, &graph).unwrap();
        let (f, pi) = state.encode_cloud(&cloud, &graph).unwrap();
        let z = argmax_onehot(&pi);
        let y = state.decode_sample(&f, &z).unwrap();
        for i in 0..8 {
            assert_eq!(pred.labels[i], argmax(y.row(i)));
            let w = pi.probs.at(i, z.classes()[i]);
            for k in 0..3 {
                assert!((pred.scores.at(i, k) - w * y.at(i, k)).abs() < 1e-15);
            }
        }
        assert_eq!(pred, infer_top_mpl(&state, &cloud, &graph).unwrap());
    }
}

#[test]
fn single_latent_class_mpl_is_plain_decoder() {
    let (state, cloud, graph, _) = tiny_parts(2, 7, 1, 3);
    let pred = infer_top_mpl(&state, &cloud, &graph).unwrap();
    let (f, _) = state.encode_cloud(&cloud, &graph).unwrap();
    let y = state.decode_sample(&f, &LatentSample::one_hot(&[0; 7], 1)).unwrap();
    assert_eq!(pred.scores, y);
}

#[test]
fn mpl_score_never_exceeds_exact_marginal() {
    for seed in 0..100 {
        let (state, cloud, graph, _) = tiny_parts(seed, 4, 3, 2);
        let mpl = infer_top_mpl(&state, &cloud, &graph).unwrap();
        let exact = exact_marginals(&state, &cloud, &graph).unwrap();
        for (a, b) in mpl.scores.data().iter().zip(exact.data()) {
            assert!(a <= b, "seed {seed}: {a} > {b}");
        }
    }
}

#[test]
fn monte_carlo_matches_exact_marginal_at_large_sample_count() {
    for seed in 0..10 {
        let (state, cloud, graph, _) = tiny_parts(seed, 4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mc = infer_top_mc(&state, &cloud, &graph, 200_000, &mut rng).unwrap();
        let exact = exact_marginals(&state, &cloud, &graph).unwrap();
        assert!(mc.scores.max_abs_diff(&exact) <= 0.005, "seed {seed}");
    }
}

#[test]
fn single_sample_estimates_are_unbiased() {
    let (state, cloud, graph, _) = tiny_parts(5, 4, 3, 2);
    let exact = exact_marginals(&state, &cloud, &graph).unwrap();
    let runs = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut sum = vec![0.0; exact.numel()];
    let mut sum_sq = vec![0.0; exact.numel()];
    for _ in 0..runs {
        let est = infer_top_mc(&state, &cloud, &graph, 1, &mut rng).unwrap();
        for (k, v) in est.scores.data().iter().enumerate() {
            sum[k] += v;
            sum_sq[k] += v * v;
        }
    }
    for k in 0..exact.numel() {
        let mean = sum[k] / runs as f64;
        let var = (sum_sq[k] / runs as f64 - mean * mean) * runs as f64 / (runs - 1) as f64;
        let se = (var / runs as f64).sqrt();
        assert!((mean - exact.data()[k]).abs() <= 3.0 * se.max(1e-15), "entry {k}: {mean} vs {}", exact.data()[k]);
    }
}

#[test]
fn degenerate_encoder_makes_monte_carlo_equal_mpl() {
    let (mut state, cloud, graph, _) = tiny_parts(6, 6, 3, 2);
    let bias = state.store.find("enc.head.bias").unwrap();
    state.store.get_mut(bias).value.data_mut()[2] = 200.0;
    let mpl = infer_top_mpl(&state, &cloud, &graph).unwrap();
    for l in [1, 5, 50] {
        let mc = infer_top_mc(&state, &cloud, &graph, l, &mut ChaCha8Rng::seed_from_u64(l as u64)).unwrap();
        assert_eq!(mc.labels, mpl.labels);
        assert!(mc.scores.max_abs_diff(&mpl.scores) == 0.0, "{}", mc.scores.max_abs_diff(&mpl.scores));
    }
}

#[test]
fn fewer_samples_give_more_spread() {
    let (state, cloud, graph, _) = tiny_parts(3, 16, 3, 2);
    let std_of = |l: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + l as u64);
        let vals: Vec<f64> = (0..10)
            .map(|_| infer_top_mc(&state, &cloud, &graph, l, &mut rng).unwrap().scores.at(0, 0))
            .collect();
        let mean = vals.iter().sum::<f64>() / 10.0;
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0).sqrt()
    };
    assert!(std_of(5) > std_of(100));
}

#[test]
fn monte_carlo_is_reproducible_and_validates_sample_count() {
    let (state, cloud, graph, _) = tiny_parts(4, 6, 3, 2);
    let a = infer_top_mc(&state, &cloud, &graph, 7, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = infer_top_mc(&state, &cloud, &graph, 7, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, b);
    assert!(matches!(
        infer_top_mc(&state, &cloud, &graph, 0, &mut ChaCha8Rng::seed_from_u64(1)),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn label_file_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.lbl");
    write_labels(&path, &[0, 3, 1], &[7, 0, 2]).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "lbl v1 3\n1 8\n4 1\n2 3\n");
    assert_eq!(read_labels(&path).unwrap(), (vec![0, 3, 1], vec![7, 0, 2]));

    std::fs::write(&path, "lbl v1 3\n1 8\n4 1\n").unwrap();
    match read_labels(&path) {
        Err(Error::Parse { line, msg, .. }) => {
            assert_eq!(line, 4);
            assert!(msg.contains("row 3"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
    std::fs::write(&path, "lbl v1 1\n0 1\n").unwrap();
    assert!(matches!(read_labels(&path), Err(Error::Parse { line: 2, .. })));
    assert!(write_labels(&path, &[0], &[]).is_err());
}
