//! Calibration runs on generated chairs: trains the chosen estimators and
//! prints one metrics line per epoch, the untrained floor, latent class
//! usage and the Monte Carlo spread at L = 5 and L = 100.
//!
//! Options are `key=value`: epochs, seed, train, test, estimators
//! (comma-separated), lr, batch, samples, tau, baseline (number or none),
//! dw (decoder width), head (comma-separated widths or none), enc, classes.

use std::collections::HashMap;

use hpk_core::data::{generate_object, object_seed, Family, DEFAULT_POINTS};
use hpk_core::inference::{infer_middle, InferenceMode};
use hpk_core::model::{EstimatorKind, ModelConfig, ModelState};
use hpk_core::train::{evaluate, prepare_all, score_predictions, train_from, Prepared, TrainConfig};

fn widths(s: &str) -> Vec<usize> {
    if s == "none" {
        Vec::new()
    } else {
        s.split(',').map(|w| w.parse().expect("width")).collect()
    }
}

fn usage(state: &ModelState, data: &[Prepared]) -> Vec<usize> {
    let mut counts = vec![0; state.config.num_latent_classes];
    for d in data {
        for z in infer_middle(state, &d.cloud, &d.graph).expect("inference") {
            counts[z] += 1;
        }
    }
    counts
}

fn main() -> hpk_core::error::Result<()> {
    let opts: HashMap<String, String> = std::env::args()
        .skip(1)
        .map(|a| {
            let (k, v) = a.split_once('=').expect("key=value");
            (k.to_string(), v.to_string())
        })
        .collect();
    let get = |k: &str, d: &str| opts.get(k).cloned().unwrap_or_else(|| d.to_string());
    let num = |k: &str, d: &str| get(k, d).parse::<f64>().expect("number");
    let seed = num("seed", "0") as u64;
    let n_train = num("train", "200") as u64;
    let n_test = num("test", "50") as u64;

    let objects = (0..n_train + n_test)
        .map(|i| generate_object(Family::Chairs, object_seed(seed, i), DEFAULT_POINTS))
        .collect::<Result<Vec<_>, _>>()?;
    let base = ModelConfig {
        decoder_width: num("dw", "64") as usize,
        decoder_head_widths: widths(&get("head", "64")),
        encoder_widths: widths(&get("enc", "64,128,128")),
        num_latent_classes: num("classes", "8") as usize,
        samples: num("samples", "5") as usize,
        temperature: num("tau", "1"),
        baseline: match get("baseline", "1").as_str() {
            "none" => None,
            b => Some(b.parse().expect("baseline")),
        },
        ..ModelConfig::default()
    };
    let train = prepare_all(&objects[..n_train as usize], base.k_nn)?;
    let test = prepare_all(&objects[n_train as usize..], base.k_nn)?;
    let part_aligned: Vec<_> = test.iter().map(|d| (d.top.clone(), d.top.clone())).collect();
    println!(
        "latent equal to top part would score mid {:.4}",
        score_predictions(&test, &part_aligned)?.1
    );

    for kind in get("estimators", "mpl-ste,mc-reinforce,mc-pathwise").split(',') {
        let kind: EstimatorKind = kind.parse()?;
        let config = TrainConfig {
            model: ModelConfig {
                estimator: kind,
                ..base.clone()
            },
            learning_rate: num("lr", "1e-3"),
            batch_size: num("batch", "8") as usize,
            epochs: num("epochs", "50") as usize,
            seed,
            ..TrainConfig::default()
        };
        let init = ModelState::init(config.model.clone(), seed)?;
        let floor = evaluate(&init, &test, config.inference_mode(), 1, seed)?;
        println!("{kind} untrained top {:.4} mid {:.4}", floor.top_oa, floor.mid_oa);
        let out = train_from(&config, init, &train, &test, None, |r| {
            println!(
                "{kind} epoch {:>3} loss {:.4} top {:.4} mid {:.4} z {:.4} clamped {} {:.1}s",
                r.epoch, r.loss, r.top_oa, r.mid_oa, r.mean_z_hat, r.clamped, r.wall_seconds
            );
        })?;
        println!("{kind} latent usage {:?}", usage(&out.best, &test));
        let mc5 = evaluate(&out.best, &test, InferenceMode::MonteCarlo(5), 10, seed)?;
        let mc100 = evaluate(&out.best, &test, InferenceMode::MonteCarlo(100), 10, seed)?;
        println!(
            "{kind} best epoch {} std(L=5) {:.5} std(L=100) {:.5}",
            out.best_epoch, mc5.top_oa_std, mc100.top_oa_std
        );
    }
    Ok(())
}
