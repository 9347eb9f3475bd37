//! Self-checks runnable from the command line: finite-difference gradient
//! checks and the estimator oracle suite on small random instances.

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::estimators::{
    exact_marginal_loss, loss_mc_pathwise, loss_mc_pathwise_with_noise, loss_mc_reinforce, loss_mpl_ste,
    score_gradient,
};
use crate::geometry::{prepare, KnnGraph, PointCloud};
use crate::inference::{exact_marginals, infer_top_mc, infer_top_mpl};
use crate::model::{Batch, Mode, ModelConfig, ModelState};
use crate::sampling::{gumbel_noise, sample_classes};
use crate::tensor::{finite_difference_check, GradMap, ParamId, FD_STEP};

/// Rectifier inputs closer than this to zero make central differences
/// straddle the kink; such instances are skipped.
pub const KINK_MARGIN: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        CheckOutcome { name, passed, detail }
    }
}

/// A small jittered model with one prepared random cloud and labels.
pub struct TinyProblem {
    pub state: ModelState,
    pub cloud: PointCloud,
    pub graph: KnnGraph,
    pub batch: Batch,
    pub labels: Vec<usize>,
}

pub fn tiny_problem(seed: u64, m: usize, num_latent: usize, num_top: usize) -> Result<TinyProblem> {
    let config = ModelConfig {
        num_top_classes: num_top,
        num_latent_classes: num_latent,
        encoder_widths: vec![5, 6],
        decoder_width: 4,
        decoder_head_widths: vec![5],
        k_nn: 3,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ModelState::init(config, seed)?;
    let jitter = Uniform::new(-0.5, 0.5);
    for p in state.store.params_mut() {
        for v in p.value.data_mut() {
            *v += jitter.sample(&mut rng);
        }
    }
    let u = Uniform::new(-1.0, 1.0);
    let raw = PointCloud::new((0..m).map(|_| [u.sample(&mut rng), u.sample(&mut rng), u.sample(&mut rng)]).collect())?;
    let (cloud, _, graph) = prepare(&raw, 3.min(m.saturating_sub(1)))?;
    let labels = (0..m).map(|_| rng.gen_range(0..num_top)).collect();
    let batch = Batch::single(&cloud, &graph)?;
    Ok(TinyProblem {
        state,
        cloud,
        graph,
        batch,
        labels,
    })
}

fn all_ids(state: &ModelState) -> Vec<ParamId> {
    state.store.ids().collect()
}

/// Finite-difference checks of the full most-probable, pathwise (frozen
/// noise) and exact-marginal losses on `seeds` accepted instances, in both
/// standardization modes.
pub fn grad_check(seeds: usize, first_seed: u64) -> Result<Vec<CheckOutcome>> {
    let names = ["mpl-ste decoder gradient", "mc-pathwise gradient (frozen noise)", "exact marginal gradient"];
    let mut worst = [0.0f64; 3];
    let mut reliable = [true; 3];
    let mut accepted = 0;
    let mut seed = first_seed;
    while accepted < seeds {
        let t = tiny_problem(seed, 4, 3, 2)?;
        let noise = gumbel_noise(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37), 2 * 4, 3);
        seed += 1;
        let losses = |s: &ModelState, mode: Mode| -> Result<[crate::estimators::LossReport; 3]> {
            Ok([
                loss_mpl_ste(s, &t.batch, &t.labels, mode)?,
                loss_mc_pathwise_with_noise(s, &t.batch, &t.labels, &noise, 0.7, mode)?,
                exact_marginal_loss(s, &t.batch, &t.labels, Mode::Eval)?,
            ])
        };
        let by_mode = [losses(&t.state, Mode::Eval)?, losses(&t.state, Mode::Train)?];
        if by_mode.iter().flatten().any(|r| r.relu_margin < KINK_MARGIN) {
            continue;
        }
        accepted += 1;
        for (mode, reports) in [Mode::Eval, Mode::Train].into_iter().zip(&by_mode) {
            for (k, report) in reports.iter().enumerate() {
                // The straight-through encoder gradient is a surrogate, so the
                // most-probable loss is checked on the decoder only.
                let ids = if k == 0 { t.state.decoder_params() } else { all_ids(&t.state) };
                let fd = finite_difference_check(&t.state.store, &report.grads, &ids, FD_STEP, |s| {
                    Ok(losses(&t.state.with_store(s.clone()), mode)?[k].loss)
                })?;
                worst[k] = worst[k].max(fd.max_rel_err);
                reliable[k] &= fd.reliable;
            }
        }
    }
    Ok((0..3)
        .map(|k| {
            CheckOutcome::new(
                names[k],
                reliable[k] && worst[k] <= FD_TOLERANCE,
                format!("max relative error {:.3e} over {seeds} instances", worst[k]),
            )
        })
        .collect())
}

fn flatten(g: &GradMap) -> Vec<f64> {
    g.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Estimator invariants on small instances derived from `seed`.
pub fn oracle_check(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Monte Carlo inference converges to the exact marginal, and the
    // most-probable score never exceeds it.
    let mut mc_err: f64 = 0.0;
    let mut bound_ok = true;
    for i in 0..10 {
        let t = tiny_problem(seed.wrapping_add(i), 4, 3, 2)?;
        let exact = exact_marginals(&t.state, &t.cloud, &t.graph)?;
        let mc = infer_top_mc(&t.state, &t.cloud, &t.graph, 20_000, &mut rng)?;
        mc_err = mc_err.max(mc.scores.max_abs_diff(&exact));
        let mpl = infer_top_mpl(&t.state, &t.cloud, &t.graph)?;
        bound_ok &= mpl.scores.data().iter().zip(exact.data()).all(|(a, b)| a <= b);
    }
    out.push(CheckOutcome::new(
        "monte carlo inference matches exact marginal",
        mc_err <= 0.02,
        format!("max abs error {mc_err:.4} at L = 20000"),
    ));
    out.push(CheckOutcome::new(
        "most-probable score is a lower bound",
        bound_ok,
        "10 instances".into(),
    ));

    // Score-function gradient points along the exact gradient.
    let t = tiny_problem(seed, 4, 3, 2)?;
    let exact = exact_marginal_loss(&t.state, &t.batch, &t.labels, Mode::Eval)?;
    for (name, baseline) in [
        ("mc-reinforce gradient (B = 1) aligns with exact", Some(1.0)),
        ("mc-reinforce gradient (no baseline) aligns with exact", None),
    ] {
        let est = loss_mc_reinforce(&t.state, &t.batch, &t.labels, 20_000, baseline, Mode::Eval, &mut rng)?;
        let cos = cosine(&flatten(&est.grads), &flatten(&exact.grads));
        out.push(CheckOutcome::new(name, cos >= 0.95, format!("cosine {cos:.4} at L = 20000")));
    }

    // The score has zero mean.
    let dist = t.state.encode_cloud(&t.cloud, &t.graph)?.1;
    let draws = 2000;
    let ids = all_ids(&t.state);
    let mut sum: Vec<Vec<f64>> = ids.iter().map(|&id| vec![0.0; t.state.store.value(id).numel()]).collect();
    let mut sq = sum.clone();
    for _ in 0..draws {
        let g = score_gradient(&t.state, &t.batch, &sample_classes(&dist, &mut rng), Mode::Eval)?;
        for (k, &id) in ids.iter().enumerate() {
            for (j, v) in g.get(id).data().iter().enumerate() {
                sum[k][j] += v;
                sq[k][j] += v * v;
            }
        }
    }
    let n = draws as f64;
    let mut worst_z: f64 = 0.0;
    for (s, q) in sum.iter().flatten().zip(sq.iter().flatten()) {
        let mean = s / n;
        let se = ((q / n - mean * mean).max(0.0) / (n - 1.0)).sqrt();
        if se > 0.0 {
            worst_z = worst_z.max(mean.abs() / se);
        }
    }
    out.push(CheckOutcome::new(
        "score function has zero mean",
        worst_z <= 5.0,
        format!("largest |mean| / SE {worst_z:.2} over {draws} draws"),
    ));

    // One latent class makes every objective the plain likelihood.
    let t1 = tiny_problem(seed, 5, 1, 3)?;
    let exact1 = exact_marginal_loss(&t1.state, &t1.batch, &t1.labels, Mode::Eval)?.loss;
    let values = [
        loss_mpl_ste(&t1.state, &t1.batch, &t1.labels, Mode::Eval)?.loss,
        loss_mc_reinforce(&t1.state, &t1.batch, &t1.labels, 3, Some(1.0), Mode::Eval, &mut rng)?.loss,
        loss_mc_pathwise(&t1.state, &t1.batch, &t1.labels, 3, 0.5, Mode::Eval, &mut rng)?.loss,
    ];
    let spread = values.iter().map(|v| (v - exact1).abs()).fold(0.0, f64::max);
    out.push(CheckOutcome::new(
        "single latent class collapses all estimators",
        spread <= 1e-12,
        format!("max deviation {spread:.2e}"),
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_on_default_seeds() {
        assert!(grad_check(3, 0).unwrap().iter().all(|c| c.passed));
        let oracle = oracle_check(7).unwrap();
        assert!(oracle.iter().all(|c| c.passed), "{oracle:?}");
    }
}
