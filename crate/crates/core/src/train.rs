//! Minibatch optimization, evaluation, checkpoints and the metrics stream.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledCloud, Manifest, Split};
use crate::error::{Error, Result};
use crate::estimators::{compute_loss, EstimatorSettings};
use crate::evaluation::{direct_counts, matched_counts, overall_accuracy};
use crate::geometry::{prepare, KnnGraph, PointCloud};
use crate::inference::{predict, InferenceMode};
use crate::model::{Batch, Mode, ModelConfig, ModelState};
use crate::tensor::{GradMap, ParamStore};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "HPK_OUT_DIR";

/// Adaptive-moment optimizer. Moments live in each [`crate::tensor::Parameter`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub step: u64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam { learning_rate, step: 0 }
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &GradMap) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powf(self.step as f64);
        let c2 = 1.0 - BETA2.powf(self.step as f64);
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            let m = p.first_moment.data_mut();
            for (m, g) in m.iter_mut().zip(g.data()) {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
            }
            let v = p.second_moment.data_mut();
            for (v, g) in v.iter_mut().zip(g.data()) {
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            }
            let lr = self.learning_rate;
            let (value, m, v) = (&mut p.value, &p.first_moment, &p.second_moment);
            for ((w, m), v) in value.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *w -= lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    /// Clouds per minibatch.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Monte Carlo repeats per evaluation (MPL inference ignores this).
    pub eval_repeats: usize,
    /// Samples per Monte Carlo inference.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 50,
            seed: 0,
            eval_repeats: 1,
            eval_samples: crate::inference::DEFAULT_MC_SAMPLES,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        for (name, v) in [
            ("batch size", self.batch_size),
            ("eval repeats", self.eval_repeats),
            ("eval samples", self.eval_samples),
        ] {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn inference_mode(&self) -> InferenceMode {
        match InferenceMode::for_estimator(self.model.estimator) {
            InferenceMode::Mpl => InferenceMode::Mpl,
            InferenceMode::MonteCarlo(_) => InferenceMode::MonteCarlo(self.eval_samples),
        }
    }
}

/// A normalized cloud with its weighted neighbourhood graph and 0-based labels.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub cloud: PointCloud,
    pub graph: KnnGraph,
    pub top: Vec<usize>,
    pub mid: Vec<usize>,
}

pub fn prepare_all(clouds: &[LabeledCloud], k_nn: usize) -> Result<Vec<Prepared>> {
    clouds
        .iter()
        .map(|c| {
            let (cloud, _, graph) = prepare(&c.cloud, k_nn)?;
            Ok(Prepared {
                cloud,
                graph,
                top: c.top.clone(),
                mid: c.mid.clone(),
            })
        })
        .collect()
}

/// Train and test splits of a manifest, prepared for `config`.
pub fn load_dataset(manifest: &Path, config: &ModelConfig) -> Result<(Vec<Prepared>, Vec<Prepared>)> {
    let m = Manifest::load(manifest)?;
    check_schema(config, m.header.family.num_top(), m.header.family.num_mid())?;
    let train = prepare_all(&m.load_split(Split::Train)?, config.k_nn)?;
    let test = prepare_all(&m.load_split(Split::Test)?, config.k_nn)?;
    Ok((train, test))
}

/// Rejects a model whose class counts differ from the data's.
pub fn check_schema(config: &ModelConfig, num_top: usize, num_mid: usize) -> Result<()> {
    if config.num_top_classes != num_top || config.num_latent_classes != num_mid {
        return Err(Error::Incompatible(format!(
            "model has K_top = {}, C = {}; data has K_top = {num_top}, C_true = {num_mid}",
            config.num_top_classes, config.num_latent_classes
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss: f64,
    pub top_oa: f64,
    pub mid_oa: f64,
    pub top_oa_std: f64,
    pub mid_oa_std: f64,
    pub wall_seconds: f64,
    /// Mean per-point likelihood estimate over the epoch.
    pub mean_z_hat: f64,
    pub clamped: usize,
}

impl MetricsRecord {
    /// Copy with the wall-clock field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        MetricsRecord {
            wall_seconds: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub top_oa: f64,
    pub top_oa_std: f64,
    pub mid_oa: f64,
    pub mid_oa_std: f64,
    /// One `(top, mid)` pair per repeat.
    pub repeats: Vec<(f64, f64)>,
}

/// Pooled top OA (direct) and middle OA (instance-wise matching) for
/// predictions aligned with `data`.
pub fn score_predictions(data: &[Prepared], preds: &[(Vec<usize>, Vec<usize>)]) -> Result<(f64, f64)> {
    if data.len() != preds.len() {
        return Err(Error::Contract(format!("{} predictions for {} instances", preds.len(), data.len())));
    }
    let mut top = Vec::with_capacity(data.len());
    let mut mid = Vec::with_capacity(data.len());
    for (d, (pt, pm)) in data.iter().zip(preds) {
        top.push(direct_counts(pt, &d.top)?);
        mid.push(matched_counts(pm, &d.mid)?);
    }
    Ok((overall_accuracy(&top)?.oa, overall_accuracy(&mid)?.oa))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Evaluates `state` on `data`. Monte Carlo inference runs `repeats` times
/// with independent streams derived from `seed`; MPL runs once.
pub fn evaluate(state: &ModelState, data: &[Prepared], mode: InferenceMode, repeats: usize, seed: u64) -> Result<EvalReport> {
    if repeats == 0 {
        return Err(Error::Parameter("repeat count must be >= 1".into()));
    }
    let repeats = if mode == InferenceMode::Mpl { 1 } else { repeats };
    let mut results = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let mut rng = stream_rng(seed, EVAL_STREAM, r as u64);
        let preds = data
            .iter()
            .map(|d| {
                let (top, mid) = predict(state, &d.cloud, &d.graph, mode, &mut rng)?;
                Ok((top.labels, mid))
            })
            .collect::<Result<Vec<_>>>()?;
        results.push(score_predictions(data, &preds)?);
    }
    let (top_oa, top_oa_std) = mean_std(&results.iter().map(|r| r.0).collect::<Vec<_>>());
    let (mid_oa, mid_oa_std) = mean_std(&results.iter().map(|r| r.1).collect::<Vec<_>>());
    Ok(EvalReport {
        top_oa,
        top_oa_std,
        mid_oa,
        mid_oa_std,
        repeats: results,
    })
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const STEP_STREAM: u64 = 0x5354_4550;
const EVAL_STREAM: u64 = 0x4556_414c;

/// Independent generator for `(seed, purpose, index)`.
pub fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.rotate_left(32));
    rng.set_stream(index);
    rng
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub best: ModelState,
    pub best_epoch: usize,
    pub metrics: Vec<MetricsRecord>,
}

/// Trains from a fresh initialization. With `out_dir`, writes
/// [`LAST_CHECKPOINT`] after every epoch, [`BEST_CHECKPOINT`] whenever the
/// mean of top and middle OA improves, and appends to [`METRICS_FILE`].
pub fn train(config: &TrainConfig, train_set: &[Prepared], test_set: &[Prepared], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let state = ModelState::init(config.model.clone(), config.seed)?;
    train_from(config, state, train_set, test_set, out_dir, |_| {})
}

/// [`train`] from a given state, calling `on_epoch` after each record.
pub fn train_from(
    config: &TrainConfig,
    mut state: ModelState,
    train_set: &[Prepared],
    test_set: &[Prepared],
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Parameter("training and test sets must be non-empty".into()));
    }
    let metrics_path = out_dir.map(|d| d.join(METRICS_FILE));
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let settings = EstimatorSettings::from(&config.model);
    let mode = config.inference_mode();
    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, usize, ModelState)> = None;
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut step = 0u64;

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut stream_rng(config.seed, SHUFFLE_STREAM, epoch as u64));
        let (mut loss_sum, mut z_sum, mut z_count, mut clamped, mut batches) = (0.0, 0.0, 0usize, 0usize, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let items: Vec<(&PointCloud, &KnnGraph)> =
                chunk.iter().map(|&i| (&train_set[i].cloud, &train_set[i].graph)).collect();
            let labels: Vec<usize> = chunk.iter().flat_map(|&i| train_set[i].top.iter().copied()).collect();
            let batch = Batch::new(&items)?;
            let mut rng = stream_rng(config.seed, STEP_STREAM, step);
            let report = match compute_loss(&state, &batch, &labels, &settings, Mode::Train, &mut rng) {
                Err(Error::NonFinite { .. }) => return Err(Error::NonFiniteLoss { epoch, step: b }),
                other => other?,
            };
            if !report.loss.is_finite() || !report.grads.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step: b });
            }
            adam.apply(&mut state.store, &report.grads);
            state.apply_stat_updates(&report.updates);
            loss_sum += report.loss;
            z_sum += report.likelihood.iter().sum::<f64>();
            z_count += report.likelihood.len();
            clamped += report.clamped;
            batches += 1;
            step += 1;
        }
        let eval = evaluate(&state, test_set, mode, config.eval_repeats, config.seed ^ epoch as u64)?;
        let record = MetricsRecord {
            epoch,
            loss: loss_sum / batches as f64,
            top_oa: eval.top_oa,
            mid_oa: eval.mid_oa,
            top_oa_std: eval.top_oa_std,
            mid_oa_std: eval.mid_oa_std,
            wall_seconds: start.elapsed().as_secs_f64(),
            mean_z_hat: z_sum / z_count.max(1) as f64,
            clamped,
        };
        let score = (record.top_oa + record.mid_oa) / 2.0;
        let improved = best.as_ref().map_or(true, |(s, _, _)| score > *s);
        if improved {
            best = Some((score, epoch, state.clone()));
        }
        if let Some(dir) = out_dir {
            state.save(&dir.join(LAST_CHECKPOINT))?;
            if improved {
                state.save(&dir.join(BEST_CHECKPOINT))?;
            }
            append_record(metrics_path.as_deref().expect("set with out_dir"), &record)?;
        }
        on_epoch(&record);
        metrics.push(record);
    }
    let (best_state, best_epoch) = match best {
        Some((_, e, s)) => (s, e),
        None => (state.clone(), 0),
    };
    Ok(TrainOutcome {
        state,
        best: best_state,
        best_epoch,
        metrics,
    })
}

/// Appends one JSON line.
pub fn append_record(path: &Path, record: &MetricsRecord) -> Result<()> {
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// `$HPK_OUT_DIR`, or `./runs` when unset.
pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}
