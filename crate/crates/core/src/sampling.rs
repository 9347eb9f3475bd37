//! Draws from per-point latent distributions: argmax, ancestral, Gumbel-max
//! and Gumbel-softmax.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{LatentDistribution, LatentSample};
use crate::tensor::{Tape, Tensor, Var};

/// Uniform draws are clamped to `[U_CLAMP, 1 - U_CLAMP]` before the double
/// logarithm.
pub const U_CLAMP: f64 = 1e-12;

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Most probable class per point, one-hot encoded.
pub fn argmax_onehot(dist: &LatentDistribution) -> LatentSample {
    let classes = argmax_classes(dist);
    LatentSample::one_hot(&classes, dist.num_classes())
}

pub fn argmax_classes(dist: &LatentDistribution) -> Vec<usize> {
    (0..dist.num_points()).map(|i| argmax(dist.probs.row(i))).collect()
}

/// Inverse-CDF draw from one categorical row.
pub fn draw_class<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen::<f64>() * row.iter().sum::<f64>();
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    // u landed in the rounding gap above the last cumulative sum.
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

pub fn sample_classes<R: Rng + ?Sized>(dist: &LatentDistribution, rng: &mut R) -> Vec<usize> {
    (0..dist.num_points())
        .map(|i| draw_class(dist.probs.row(i), rng))
        .collect()
}

/// `count` independent hard samples, each drawing every point independently.
pub fn sample_categorical<R: Rng + ?Sized>(
    dist: &LatentDistribution,
    count: usize,
    rng: &mut R,
) -> Result<Vec<LatentSample>> {
    if count == 0 {
        return Err(Error::Parameter("sample count must be >= 1".into()));
    }
    Ok((0..count)
        .map(|_| LatentSample::one_hot(&sample_classes(dist, rng), dist.num_classes()))
        .collect())
}

/// Standard Gumbel noise `-ln(-ln u)`, row-major `rows × cols`.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let u = rng.gen::<f64>().clamp(U_CLAMP, 1.0 - U_CLAMP);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}

fn check_noise(dist: &LatentDistribution, noise: &Tensor) -> Result<()> {
    if noise.shape() != dist.probs.shape() {
        return Err(Error::shape("gumbel noise", noise.shape(), dist.probs.shape()));
    }
    Ok(())
}

/// `argmax_c (log π_c + ε_c)` per point for given noise.
pub fn gumbel_max_from_noise(dist: &LatentDistribution, noise: &Tensor) -> Result<Vec<usize>> {
    check_noise(dist, noise)?;
    Ok((0..dist.num_points())
        .map(|i| {
            let scores: Vec<f64> = dist
                .probs
                .row(i)
                .iter()
                .zip(noise.row(i))
                .map(|(&p, &e)| p.max(crate::tensor::LOG_FLOOR).ln() + e)
                .collect();
            argmax(&scores)
        })
        .collect())
}

pub fn gumbel_max_sample<R: Rng + ?Sized>(dist: &LatentDistribution, rng: &mut R) -> LatentSample {
    let noise = gumbel_noise(rng, dist.num_points(), dist.num_classes());
    let classes = gumbel_max_from_noise(dist, &noise).expect("noise matches");
    LatentSample::one_hot(&classes, dist.num_classes())
}

pub fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("temperature must be positive and finite, got {tau}")))
    }
}

/// Relaxed sample `softmax((log π[rows] + noise) / τ)` recorded on the tape.
/// Row `r` of the result uses point `rows[r]` of `probs` and noise row `r`.
pub fn relax_on_tape(tape: &mut Tape, probs: Var, rows: &[usize], noise: &Tensor, tau: f64) -> Result<Var> {
    check_temperature(tau)?;
    let c = tape.shape(probs)[1];
    if noise.shape() != [rows.len(), c] {
        return Err(Error::shape("gumbel noise", noise.shape(), &[rows.len(), c]));
    }
    let logp = tape.ln(probs)?;
    let picked = tape.gather_rows(logp, rows)?;
    let eps = tape.constant(noise.clone())?;
    let perturbed = tape.add(picked, eps)?;
    let scaled = tape.scale(perturbed, 1.0 / tau);
    tape.softmax(scaled)
}

pub fn gumbel_softmax_from_noise(dist: &LatentDistribution, noise: &Tensor, tau: f64) -> Result<LatentSample> {
    check_noise(dist, noise)?;
    let mut tape = Tape::new();
    let p = tape.constant(dist.probs.clone())?;
    let rows: Vec<usize> = (0..dist.num_points()).collect();
    let y = relax_on_tape(&mut tape, p, &rows, noise, tau)?;
    Ok(LatentSample::relaxed(tape.value(y).clone()))
}

pub fn gumbel_softmax_sample<R: Rng + ?Sized>(
    dist: &LatentDistribution,
    tau: f64,
    rng: &mut R,
) -> Result<LatentSample> {
    check_temperature(tau)?;
    let noise = gumbel_noise(rng, dist.num_points(), dist.num_classes());
    gumbel_softmax_from_noise(dist, &noise, tau)
}
