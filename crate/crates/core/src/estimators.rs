//! Training objectives and their gradients.
//!
//! Every loss is a weighted sum of per-point terms with weights from
//! [`Batch::point_weights`], so a batch of clouds yields the mean over clouds
//! of each cloud's mean point loss.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Batch, EstimatorKind, Forward, Mode, ModelConfig, ModelState, StatUpdate};
use crate::sampling::{argmax, draw_class, gumbel_noise, relax_on_tape};
use crate::tensor::{GradMap, Tape, Tensor, Var, LOG_FLOOR};

/// Largest latent class count accepted by [`exact_marginal_loss`].
pub const EXACT_MAX_CLASSES: usize = 8;
/// Largest cloud size accepted by [`exact_marginal_loss`].
pub const EXACT_MAX_POINTS: usize = 16;

#[derive(Clone, Debug)]
pub struct LossReport {
    pub loss: f64,
    pub grads: GradMap,
    /// Running-statistic updates from a training-mode pass.
    pub updates: Vec<StatUpdate>,
    /// Per-point likelihood estimate whose negative log is the point loss
    /// (before the latent prior term for the most-probable pipeline).
    pub likelihood: Vec<f64>,
    /// Points whose likelihood estimate fell below the log floor.
    pub clamped: usize,
    /// Score-function rewards `p(y_i | z_i^(l)) / Ẑ_i`, row `l·N + i`; empty
    /// for the other estimators.
    pub rewards: Vec<f64>,
    /// See [`Tape::relu_margin`].
    pub relu_margin: f64,
}

/// Knobs shared by the estimators.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatorSettings {
    pub kind: EstimatorKind,
    pub samples: usize,
    pub temperature: f64,
    pub baseline: Option<f64>,
}

impl From<&ModelConfig> for EstimatorSettings {
    fn from(c: &ModelConfig) -> Self {
        EstimatorSettings {
            kind: c.estimator,
            samples: c.samples,
            temperature: c.temperature,
            baseline: c.baseline,
        }
    }
}

/// Coefficient multiplying `∂ log π_i[z]/∂φ` in the score-function
/// surrogate for one sample, before point weighting.
pub fn score_coefficient(likelihood: f64, z_hat: f64, samples: usize, baseline: f64) -> f64 {
    -(likelihood - baseline) / (z_hat.max(LOG_FLOOR) * samples as f64)
}

fn check_labels(state: &ModelState, batch: &Batch, labels: &[usize]) -> Result<()> {
    if labels.len() != batch.num_points() {
        return Err(Error::Contract(format!(
            "{} labels for {} points",
            labels.len(),
            batch.num_points()
        )));
    }
    let k = state.config.num_top_classes;
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Contract(format!("label {bad} outside [0, {k})")));
    }
    Ok(())
}

fn check_samples(samples: usize) -> Result<()> {
    if samples == 0 {
        Err(Error::Parameter("at least one Monte Carlo sample is required".into()))
    } else {
        Ok(())
    }
}

fn weighted_sum(tape: &mut Tape, x: Var, weights: &[f64]) -> Result<Var> {
    let w = tape.constant(Tensor::vector(weights.to_vec()))?;
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod))
}

fn finish(
    state: &ModelState,
    tape: &Tape,
    objective: Var,
    loss: f64,
    fwd: Forward,
    likelihood: Vec<f64>,
) -> Result<LossReport> {
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let grads = tape.backward(objective)?.param_grads(&state.store);
    let clamped = likelihood.iter().filter(|&&p| p < LOG_FLOOR).count();
    Ok(LossReport {
        loss,
        grads,
        updates: fwd.updates,
        likelihood,
        clamped,
        rewards: Vec::new(),
        relu_margin: tape.relu_margin(),
    })
}

/// Most-probable-latent objective
/// `-Σ_i w_i [log p(y_i | z*_i) + log π_i[z*_i]]` with `z*` the encoder
/// argmax. The decoder sees a straight-through one-hot sample.
pub fn loss_mpl_ste(state: &ModelState, batch: &Batch, labels: &[usize], mode: Mode) -> Result<LossReport> {
    check_labels(state, batch, labels)?;
    let mut tape = Tape::new();
    let mut fwd = Forward::new(mode);
    let (features, probs) = state.encode(&mut tape, batch, &mut fwd)?;
    let pv = tape.value(probs);
    let selected: Vec<usize> = (0..pv.rows()).map(|i| argmax(pv.row(i))).collect();
    let z = tape.straight_through(probs, &selected)?;
    let cols = state.decoder_columns(&mut tape, features)?;
    let y = state.decode_head(&mut tape, cols, z, None, &mut fwd)?;
    let py = tape.pick(y, labels)?;
    let pz = tape.pick(probs, &selected)?;
    let lpy = tape.ln(py)?;
    let lpz = tape.ln(pz)?;
    let joint = tape.add(lpy, lpz)?;
    let neg: Vec<f64> = batch.point_weights().iter().map(|w| -w).collect();
    let objective = weighted_sum(&mut tape, joint, &neg)?;
    let loss = tape.value(objective).item();
    let likelihood = tape.value(py).data().to_vec();
    finish(state, &tape, objective, loss, fwd, likelihood)
}

/// Monte Carlo objective `-Σ_i w_i log Ẑ_i`, `Ẑ_i = (1/L) Σ_l p(y_i | z_i^(l))`,
/// with hard samples drawn from the encoder and a score-function gradient
/// for the encoder.
pub fn loss_mc_reinforce<R: Rng + ?Sized>(
    state: &ModelState,
    batch: &Batch,
    labels: &[usize],
    samples: usize,
    baseline: Option<f64>,
    mode: Mode,
    rng: &mut R,
) -> Result<LossReport> {
    check_samples(samples)?;
    check_labels(state, batch, labels)?;
    let mut tape = Tape::new();
    let mut fwd = Forward::new(mode);
    let (features, probs) = state.encode(&mut tape, batch, &mut fwd)?;
    let pv = tape.value(probs).clone();
    let n = batch.num_points();
    let drawn: Vec<Vec<usize>> = (0..samples)
        .map(|_| (0..n).map(|i| draw_class(pv.row(i), rng)).collect())
        .collect();
    reinforce_tail(state, batch, labels, &drawn, baseline, tape, fwd, features, probs)
}

/// [`loss_mc_reinforce`] with the latent classes supplied: `drawn[l][i]` is
/// the class of point `i` in sample `l`.
pub fn loss_mc_reinforce_with_samples(
    state: &ModelState,
    batch: &Batch,
    labels: &[usize],
    drawn: &[Vec<usize>],
    baseline: Option<f64>,
    mode: Mode,
) -> Result<LossReport> {
    check_samples(drawn.len())?;
    check_labels(state, batch, labels)?;
    let c = state.config.num_latent_classes;
    if drawn.iter().any(|s| s.len() != batch.num_points() || s.iter().any(|&z| z >= c)) {
        return Err(Error::Contract("latent samples do not match the batch".into()));
    }
    let mut tape = Tape::new();
    let mut fwd = Forward::new(mode);
    let (features, probs) = state.encode(&mut tape, batch, &mut fwd)?;
    reinforce_tail(state, batch, labels, drawn, baseline, tape, fwd, features, probs)
}

#[allow(clippy::too_many_arguments)]
fn reinforce_tail(
    state: &ModelState,
    batch: &Batch,
    labels: &[usize],
    drawn: &[Vec<usize>],
    baseline: Option<f64>,
    mut tape: Tape,
    mut fwd: Forward,
    features: Var,
    probs: Var,
) -> Result<LossReport> {
    let n = batch.num_points();
    let l = drawn.len();
    let c = state.config.num_latent_classes;
    let rows: Vec<usize> = (0..l).flat_map(|_| 0..n).collect();
    let flat: Vec<usize> = drawn.iter().flatten().copied().collect();
    let mut onehot = Tensor::zeros(&[l * n, c]);
    for (r, &z) in flat.iter().enumerate() {
        onehot.data_mut()[r * c + z] = 1.0;
    }

    let cols = state.decoder_columns(&mut tape, features)?;
    let z = tape.constant(onehot)?;
    let y = state.decode_head(&mut tape, cols, z, Some(rows.clone()), &mut fwd)?;
    let rep_labels: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
    let py = tape.pick(y, &rep_labels)?;
    let py_grid = tape.reshape(py, vec![l, n])?;
    let z_hat = tape.mean_axis0(py_grid)?;
    let log_z = tape.ln(z_hat)?;
    let weights = batch.point_weights();
    let neg: Vec<f64> = weights.iter().map(|w| -w).collect();
    let decoder_term = weighted_sum(&mut tape, log_z, &neg)?;
    let loss = tape.value(decoder_term).item();

    let b = baseline.unwrap_or(0.0);
    let pyv = tape.value(py).data().to_vec();
    let zv = tape.value(z_hat).data().to_vec();
    let coeff: Vec<f64> = (0..l * n)
        .map(|r| {
            let i = r % n;
            weights[i] * score_coefficient(pyv[r], zv[i], l, b)
        })
        .collect();
    let pr = tape.gather_rows(probs, &rows)?;
    let pz = tape.pick(pr, &flat)?;
    let log_pi = tape.ln(pz)?;
    let surrogate = weighted_sum(&mut tape, log_pi, &coeff)?;
    let objective = tape.add(decoder_term, surrogate)?;
    let rewards = (0..l * n).map(|r| pyv[r] / zv[r % n].max(LOG_FLOOR)).collect();
    let mut report = finish(state, &tape, objective, loss, fwd, zv)?;
    report.rewards = rewards;
    Ok(report)
}

/// Monte Carlo objective as in [`loss_mc_reinforce`] but decoded through
/// Gumbel-softmax relaxed samples and differentiated pathwise.
pub fn loss_mc_pathwise<R: Rng + ?Sized>(
    state: &ModelState,
    batch: &Batch,
    labels: &[usize],
    samples: usize,
    temperature: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<LossReport> {
    check_samples(samples)?;
    let noise = gumbel_noise(rng, samples * batch.num_points(), state.config.num_latent_classes);
    loss_mc_pathwise_with_noise(state, batch, labels, &noise, temperature, mode)
}

/// [`loss_mc_pathwise`] with fixed Gumbel noise; row `l·N + i` perturbs
/// point `i` in sample `l`.
pub fn loss_mc_pathwise_with_noise(
    state: &ModelState,
    batch: &Batch,
    labels: &[usize],
    noise: &Tensor,
    temperature: f64,
    mode: Mode,
) -> Result<LossReport> {
    check_labels(state, batch, labels)?;
    let n = batch.num_points();
    if noise.ndim() != 2 || noise.rows() == 0 || noise.rows() % n != 0 {
        return Err(Error::shape("gumbel noise", noise.shape(), &[n, state.config.num_latent_classes]));
    }
    let l = noise.rows() / n;
    let mut tape = Tape::new();
    let mut fwd = Forward::new(mode);
    let (features, probs) = state.encode(&mut tape, batch, &mut fwd)?;
    let rows: Vec<usize> = (0..l).flat_map(|_| 0..n).collect();
    let z = relax_on_tape(&mut tape, probs, &rows, noise, temperature)?;
    let cols = state.decoder_columns(&mut tape, features)?;
    let y = state.decode_head(&mut tape, cols, z, Some(rows.clone()), &mut fwd)?;
    let rep_labels: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
    let py = tape.pick(y, &rep_labels)?;
    let py_grid = tape.reshape(py, vec![l, n])?;
    let z_hat = tape.mean_axis0(py_grid)?;
    let log_z = tape.ln(z_hat)?;
    let neg: Vec<f64> = batch.point_weights().iter().map(|w| -w).collect();
    let objective = weighted_sum(&mut tape, log_z, &neg)?;
    let loss = tape.value(objective).item();
    let likelihood = tape.value(z_hat).data().to_vec();
    finish(state, &tape, objective, loss, fwd, likelihood)
}

/// Exact objective `-Σ_i w_i log Σ_c p(y_i | e_c) π_i[c]`, enumerating every
/// latent class. Limited to small instances.
pub fn exact_marginal_loss(state: &ModelState, batch: &Batch, labels: &[usize], mode: Mode) -> Result<LossReport> {
    check_labels(state, batch, labels)?;
    let c = state.config.num_latent_classes;
    let largest = batch.offsets.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0);
    if c > EXACT_MAX_CLASSES || largest > EXACT_MAX_POINTS {
        return Err(Error::GuardExceeded(format!(
            "exact marginal needs C <= {EXACT_MAX_CLASSES} and at most {EXACT_MAX_POINTS} points per cloud, \
             got C = {c} and {largest} points"
        )));
    }
    let n = batch.num_points();
    let mut tape = Tape::new();
    let mut fwd = Forward::new(mode);
    let (features, probs) = state.encode(&mut tape, batch, &mut fwd)?;
    // Row i·C + k pairs point i with class k.
    let rows: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(c)).collect();
    let mut onehot = Tensor::zeros(&[n * c, c]);
    for r in 0..n * c {
        onehot.data_mut()[r * c + r % c] = 1.0;
    }
    let cols = state.decoder_columns(&mut tape, features)?;
    let z = tape.constant(onehot)?;
    let y = state.decode_head(&mut tape, cols, z, Some(rows.clone()), &mut fwd)?;
    let rep_labels: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
    let py = tape.pick(y, &rep_labels)?;
    let py_grid = tape.reshape(py, vec![n, c])?;
    let joint = tape.mul(py_grid, probs)?;
    let ones = tape.constant(Tensor::full(&[c, 1], 1.0))?;
    let marginal = tape.matmul(joint, ones)?;
    let marginal = tape.reshape(marginal, vec![n])?;
    let log_m = tape.ln(marginal)?;
    let neg: Vec<f64> = batch.point_weights().iter().map(|w| -w).collect();
    let objective = weighted_sum(&mut tape, log_m, &neg)?;
    let loss = tape.value(objective).item();
    let likelihood = tape.value(marginal).data().to_vec();
    finish(state, &tape, objective, loss, fwd, likelihood)
}

/// Gradient of `Σ_i w_i log π_i[classes_i]` with respect to every
/// parameter, for one latent draw. Its expectation under π is zero.
pub fn score_gradient(state: &ModelState, batch: &Batch, classes: &[usize], mode: Mode) -> Result<GradMap> {
    if classes.len() != batch.num_points() {
        return Err(Error::Contract(format!(
            "{} latent classes for {} points",
            classes.len(),
            batch.num_points()
        )));
    }
    let mut tape = Tape::new();
    let mut fwd = Forward::new(mode);
    let (_, probs) = state.encode(&mut tape, batch, &mut fwd)?;
    let picked = tape.pick(probs, classes)?;
    let logp = tape.ln(picked)?;
    let objective = weighted_sum(&mut tape, logp, &batch.point_weights())?;
    Ok(tape.backward(objective)?.param_grads(&state.store))
}

/// Dispatches to the estimator named in `settings`.
pub fn compute_loss<R: Rng + ?Sized>(
    state: &ModelState,
    batch: &Batch,
    labels: &[usize],
    settings: &EstimatorSettings,
    mode: Mode,
    rng: &mut R,
) -> Result<LossReport> {
    match settings.kind {
        EstimatorKind::MplSte => loss_mpl_ste(state, batch, labels, mode),
        EstimatorKind::McReinforce => {
            loss_mc_reinforce(state, batch, labels, settings.samples, settings.baseline, mode, rng)
        }
        EstimatorKind::McPathwise => {
            loss_mc_pathwise(state, batch, labels, settings.samples, settings.temperature, mode, rng)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_coefficient_with_unit_baseline() {
        assert!((score_coefficient(0.8, 0.8, 1, 1.0) - 0.25).abs() < 1e-15);
        assert_eq!(score_coefficient(0.5, 0.25, 2, 0.0), -1.0);
    }

    #[test]
    fn tiny_likelihood_is_floored() {
        assert!(score_coefficient(1e-300, 0.0, 1, 0.0).is_finite());
    }
}
