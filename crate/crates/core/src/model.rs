//! Encoder `p(z|x)` and decoder `p(y|z,x)`.
//!
//! The encoder is a per-point MLP (linear, standardize, rectify) followed by
//! normal-weighted neighbourhood smoothing and a linear+softmax head. The
//! decoder maps encoder features through `C` parallel linear layers into a
//! per-point `F_d × C` matrix, combines its columns with the latent sample,
//! and classifies the result with a small MLP head.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{KnnGraph, PointCloud, DEFAULT_K_NN};
use crate::tensor::param::{load_checkpoint, save_checkpoint};
use crate::tensor::tape::BatchStats;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Momentum of the running feature statistics.
pub const RUNNING_MOMENTUM: f64 = 0.9;
/// Added to the variance before taking the inverse square root.
pub const VARIANCE_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "mpl-ste")]
    MplSte,
    #[serde(rename = "mc-reinforce")]
    McReinforce,
    #[serde(rename = "mc-pathwise")]
    McPathwise,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [
        EstimatorKind::MplSte,
        EstimatorKind::McReinforce,
        EstimatorKind::McPathwise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::MplSte => "mpl-ste",
            EstimatorKind::McReinforce => "mc-reinforce",
            EstimatorKind::McPathwise => "mc-pathwise",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Parameter(format!(
                    "unknown estimator {s:?}; expected one of mpl-ste, mc-reinforce, mc-pathwise"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_top_classes: usize,
    pub num_latent_classes: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_width: usize,
    pub decoder_head_widths: Vec<usize>,
    pub smoothing_layers: usize,
    pub k_nn: usize,
    pub temperature: f64,
    pub samples: usize,
    pub estimator: EstimatorKind,
    /// Control variate subtracted from the score-function reward; `None`
    /// disables it.
    pub baseline: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_top_classes: 4,
            num_latent_classes: 8,
            encoder_widths: vec![64, 128, 128],
            decoder_width: 64,
            decoder_head_widths: vec![64],
            smoothing_layers: 1,
            k_nn: DEFAULT_K_NN,
            temperature: 1.0,
            samples: 5,
            estimator: EstimatorKind::McReinforce,
            baseline: Some(1.0),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Parameter(msg.to_string()));
        if self.num_latent_classes < 1 {
            return bad("num_latent_classes must be >= 1");
        }
        if self.num_top_classes < 2 {
            return bad("num_top_classes must be >= 2");
        }
        if self.samples < 1 {
            return bad("samples must be >= 1");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return bad("encoder widths must be non-empty and positive");
        }
        if self.decoder_width == 0 || self.decoder_head_widths.contains(&0) {
            return bad("decoder widths must be positive");
        }
        if self.k_nn == 0 {
            return bad("k_nn must be >= 1");
        }
        Ok(())
    }

    pub fn feature_width(&self) -> usize {
        *self.encoder_widths.last().expect("validated")
    }
}

/// Whether feature standardization uses batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    weight: ParamId,
    bias: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Vec<(Dense, Norm)>,
    smoothing: Vec<ParamId>,
    latent_head: Dense,
    parallel: Dense,
    head: Vec<(Dense, Norm)>,
    output: Dense,
    norms: Vec<Norm>,
}

/// Parameters (encoder φ and decoder θ), running statistics and the
/// configuration they were built for.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub store: ParamStore,
    layout: Layout,
}

/// Running-statistic update recorded by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    norm: usize,
    stats: BatchStats,
}

/// Forward-pass context: standardization mode plus the statistic updates
/// a training pass produces.
#[derive(Debug)]
pub struct Forward {
    pub mode: Mode,
    pub updates: Vec<StatUpdate>,
}

impl Forward {
    pub fn new(mode: Mode) -> Self {
        Forward {
            mode,
            updates: Vec::new(),
        }
    }
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

impl ModelState {
    /// Deterministic initialization: Xavier-uniform weights, zero biases,
    /// unit scales.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let fe = config.feature_width();
        let c = config.num_latent_classes;
        let fd = config.decoder_width;

        let dense = |rng: &mut ChaCha8Rng, store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool| {
            let weight = store.add(format!("{name}.weight"), xavier(rng, fan_in, fan_out, &[fan_in, fan_out]));
            let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
            Dense { weight, bias }
        };
        let norm = |store: &mut ParamStore, name: &str, width: usize| Norm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[width], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width])),
            mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[width])),
            var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[width], 1.0)),
        };

        let mut encoder = Vec::new();
        let mut width = 3;
        for (k, &w) in config.encoder_widths.iter().enumerate() {
            let d = dense(&mut rng, &mut store, &format!("enc.mlp{k}"), width, w, true);
            let n = norm(&mut store, &format!("enc.bn{k}"), w);
            encoder.push((d, n));
            width = w;
        }
        let smoothing = (0..config.smoothing_layers)
            .map(|k| dense(&mut rng, &mut store, &format!("enc.smooth{k}"), fe, fe, false).weight)
            .collect();
        let latent_head = dense(&mut rng, &mut store, "enc.head", fe, c, true);

        // C parallel F_e -> F_d layers stored side by side, each initialized
        // with its own fan-in/fan-out.
        let mut blocks = vec![0.0; fe * c * fd];
        for k in 0..c {
            let block = xavier(&mut rng, fe, fd, &[fe, fd]);
            for i in 0..fe {
                blocks[i * c * fd + k * fd..i * c * fd + (k + 1) * fd].copy_from_slice(block.row(i));
            }
        }
        let parallel = Dense {
            weight: store.add("dec.parallel.weight", Tensor::new(vec![fe, c * fd], blocks)?),
            bias: Some(store.add("dec.parallel.bias", Tensor::zeros(&[c * fd]))),
        };
        let mut head = Vec::new();
        let mut width = fd;
        for (k, &w) in config.decoder_head_widths.iter().enumerate() {
            let d = dense(&mut rng, &mut store, &format!("dec.mlp{k}"), width, w, true);
            let n = norm(&mut store, &format!("dec.bn{k}"), w);
            head.push((d, n));
            width = w;
        }
        let output = dense(&mut rng, &mut store, "dec.out", width, config.num_top_classes, true);

        let norms = encoder.iter().chain(&head).map(|(_, n)| *n).collect();
        Ok(ModelState {
            config,
            store,
            layout: Layout {
                encoder,
                smoothing,
                latent_head,
                parallel,
                head,
                output,
                norms,
            },
        })
    }

    /// Rebuilds a state around a loaded parameter store, checking that every
    /// parameter the configuration needs is present with the right shape.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let template = ModelState::init(config, 0)?;
        if template.store.params().len() != store.params().len()
            || template.store.buffers().len() != store.buffers().len()
        {
            return Err(Error::Incompatible(format!(
                "checkpoint holds {} parameters, configuration expects {}",
                store.params().len(),
                template.store.params().len()
            )));
        }
        for (a, b) in template.store.params().iter().zip(store.params()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        for (a, b) in template.store.buffers().iter().zip(store.buffers()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Incompatible(format!("buffer {} does not match {}", b.name, a.name)));
            }
        }
        Ok(ModelState {
            config: template.config,
            store,
            layout: template.layout,
        })
    }

    /// Same architecture and configuration around a different store.
    pub fn with_store(&self, store: ParamStore) -> ModelState {
        ModelState {
            config: self.config.clone(),
            store,
            layout: self.layout.clone(),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_checkpoint(path, &self.store, serde_json::to_value(&self.config)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (store, meta) = load_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_value(meta)?;
        ModelState::from_store(config, store)
    }

    /// Parameters belonging to the encoder (φ).
    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| self.store.get(id).name.starts_with("enc."))
            .collect()
    }

    /// Parameters belonging to the decoder (θ).
    pub fn decoder_params(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| self.store.get(id).name.starts_with("dec."))
            .collect()
    }

    /// Folds batch statistics from a training pass into the running ones.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) {
        for u in updates {
            let norm = self.layout.norms[u.norm];
            for (buf, fresh) in [(norm.mean, &u.stats.mean), (norm.var, &u.stats.var)] {
                for (r, b) in self.store.buffer_mut(buf).data_mut().iter_mut().zip(fresh) {
                    *r = RUNNING_MOMENTUM * *r + (1.0 - RUNNING_MOMENTUM) * b;
                }
            }
        }
    }

    fn linear(&self, tape: &mut Tape, x: Var, d: Dense) -> Result<Var> {
        let w = tape.param(&self.store, d.weight)?;
        let y = tape.matmul(x, w)?;
        match d.bias {
            Some(b) => {
                let b = tape.param(&self.store, b)?;
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    fn standardize(&self, tape: &mut Tape, x: Var, norm: Norm, fwd: &mut Forward) -> Result<Var> {
        let gamma = tape.param(&self.store, norm.gamma)?;
        let beta = tape.param(&self.store, norm.beta)?;
        match fwd.mode {
            Mode::Train => {
                let (y, stats) = tape.standardize_batch(x, gamma, beta, VARIANCE_FLOOR)?;
                let idx = self
                    .layout
                    .norms
                    .iter()
                    .position(|n| n.gamma == norm.gamma)
                    .expect("norm registered");
                fwd.updates.push(StatUpdate { norm: idx, stats });
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.store.buffer(norm.mean).data().to_vec();
                let var = self.store.buffer(norm.var).data().to_vec();
                tape.standardize_fixed(x, gamma, beta, &mean, &var, VARIANCE_FLOOR)
            }
        }
    }

    fn mlp_block(&self, tape: &mut Tape, x: Var, layers: &[(Dense, Norm)], fwd: &mut Forward) -> Result<Var> {
        let mut h = x;
        for &(d, n) in layers {
            let y = self.linear(tape, h, d)?;
            let y = self.standardize(tape, y, n, fwd)?;
            h = tape.relu(y);
        }
        Ok(h)
    }

    /// Per-point features `h_e` before smoothing.
    pub fn point_features(&self, tape: &mut Tape, batch: &Batch, fwd: &mut Forward) -> Result<Var> {
        let x = tape.constant(batch.points.clone())?;
        self.mlp_block(tape, x, &self.layout.encoder, fwd)
    }

    /// Normal-weighted neighbourhood smoothing `h'_i = (Σ_j ã_ij h_j) W`,
    /// repeated once per smoothing layer.
    pub fn smooth(&self, tape: &mut Tape, features: Var, batch: &Batch) -> Result<Var> {
        if tape.shape(features).first() != Some(&batch.num_points()) {
            return Err(Error::Contract(format!(
                "features for {:?} rows, batch has {} points",
                tape.shape(features),
                batch.num_points()
            )));
        }
        let mut h = features;
        for &w in &self.layout.smoothing {
            let agg = tape.aggregate(h, &batch.neighbors, &batch.weights, batch.row_len)?;
            let w = tape.param(&self.store, w)?;
            h = tape.matmul(agg, w)?;
        }
        Ok(h)
    }

    /// Encoder pass: returns `(h_e, π)`.
    pub fn encode(&self, tape: &mut Tape, batch: &Batch, fwd: &mut Forward) -> Result<(Var, Var)> {
        let features = self.point_features(tape, batch, fwd)?;
        let smoothed = self.smooth(tape, features, batch)?;
        let logits = self.linear(tape, smoothed, self.layout.latent_head)?;
        let probs = tape.softmax(logits)?;
        Ok((features, probs))
    }

    /// The per-point `F_d × C` matrices `H_i`, one row per point with the
    /// column for class `c` stored at `[c·F_d, (c+1)·F_d)`.
    pub fn decoder_columns(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let fe = self.config.feature_width();
        if tape.shape(features).get(1) != Some(&fe) {
            return Err(Error::shape("decoder input", tape.shape(features), &[0, fe]));
        }
        self.linear(tape, features, self.layout.parallel)
    }

    /// Class distribution `p(y | z, x)` for each row of `sample`. Row `r`
    /// of `sample` is paired with point `rows[r]` (identity when `None`).
    pub fn decode_head(
        &self,
        tape: &mut Tape,
        columns: Var,
        sample: Var,
        rows: Option<Vec<usize>>,
        fwd: &mut Forward,
    ) -> Result<Var> {
        let c = self.config.num_latent_classes;
        if tape.shape(sample).get(1) != Some(&c) {
            return Err(Error::Contract(format!(
                "latent sample has shape {:?}, model has C = {c}",
                tape.shape(sample)
            )));
        }
        let hd = tape.mix_columns(columns, sample, rows)?;
        let h = self.mlp_block(tape, hd, &self.layout.head, fwd)?;
        let logits = self.linear(tape, h, self.layout.output)?;
        tape.softmax(logits)
    }

    /// Value-level encoder for a single prepared cloud.
    pub fn encode_cloud(&self, cloud: &PointCloud, graph: &KnnGraph) -> Result<(Tensor, LatentDistribution)> {
        let batch = Batch::single(cloud, graph)?;
        let mut tape = Tape::new();
        let mut fwd = Forward::new(Mode::Eval);
        let (f, p) = self.encode(&mut tape, &batch, &mut fwd)?;
        Ok((tape.value(f).clone(), LatentDistribution::new(tape.value(p).clone())?))
    }

    /// Value-level decoder in evaluation mode.
    pub fn decode_sample(&self, features: &Tensor, sample: &LatentSample) -> Result<Tensor> {
        if features.rows() != sample.values.rows() {
            return Err(Error::shape("decode", features.shape(), sample.values.shape()));
        }
        let mut tape = Tape::new();
        let mut fwd = Forward::new(Mode::Eval);
        let f = tape.constant(features.clone())?;
        let cols = self.decoder_columns(&mut tape, f)?;
        let z = tape.constant(sample.values.clone())?;
        let y = self.decode_head(&mut tape, cols, z, None, &mut fwd)?;
        Ok(tape.value(y).clone())
    }

    /// Names of all parameters, in store order.
    pub fn param_names(&self) -> Vec<&str> {
        self.store.params().iter().map(|p| p.name.as_str()).collect()
    }
}

/// Per-point categorical distributions over the latent classes.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution {
    pub probs: Tensor,
}

impl LatentDistribution {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.ndim() != 2 || probs.cols() == 0 {
            return Err(Error::shape("latent distribution", probs.shape(), &[0, 0]));
        }
        for r in 0..probs.rows() {
            let row = probs.row(r);
            if row.iter().any(|&v| !(v >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!("row {r} is not a distribution: {row:?}")));
            }
        }
        Ok(LatentDistribution { probs })
    }

    pub fn num_points(&self) -> usize {
        self.probs.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleKind {
    Hard,
    Relaxed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub values: Tensor,
    pub kind: SampleKind,
}

impl LatentSample {
    pub fn one_hot(classes: &[usize], num_classes: usize) -> Self {
        let mut values = Tensor::zeros(&[classes.len(), num_classes]);
        for (i, &c) in classes.iter().enumerate() {
            values.data_mut()[i * num_classes + c] = 1.0;
        }
        LatentSample {
            values,
            kind: SampleKind::Hard,
        }
    }

    pub fn relaxed(values: Tensor) -> Self {
        LatentSample {
            values,
            kind: SampleKind::Relaxed,
        }
    }

    /// Class index of each row of a hard sample (argmax for relaxed ones).
    pub fn classes(&self) -> Vec<usize> {
        (0..self.values.rows())
            .map(|r| crate::sampling::argmax(self.values.row(r)))
            .collect()
    }
}

/// One or more prepared clouds stacked into a single forward pass.
#[derive(Clone, Debug)]
pub struct Batch {
    pub points: Tensor,
    /// Global neighbour indices, `row_len` per point.
    pub neighbors: Vec<usize>,
    pub weights: Vec<f64>,
    pub row_len: usize,
    /// Start offset of each cloud plus the total as the last entry.
    pub offsets: Vec<usize>,
}

impl Batch {
    pub fn single(cloud: &PointCloud, graph: &KnnGraph) -> Result<Self> {
        Batch::new(&[(cloud, graph)])
    }

    pub fn new(items: &[(&PointCloud, &KnnGraph)]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        let row_len = first.1.row_len();
        let mut pts = Vec::new();
        let mut neighbors = Vec::new();
        let mut weights = Vec::new();
        let mut offsets = vec![0];
        for (cloud, graph) in items {
            if graph.len() != cloud.len() {
                return Err(Error::Contract(format!(
                    "graph over {} points paired with a cloud of {}",
                    graph.len(),
                    cloud.len()
                )));
            }
            if !graph.has_weights() {
                return Err(Error::Contract("graph edge weights are not populated".into()));
            }
            if graph.row_len() != row_len {
                return Err(Error::Contract(format!(
                    "mixed neighbourhood sizes in one batch: {} vs {row_len}",
                    graph.row_len()
                )));
            }
            let base = *offsets.last().unwrap();
            for p in cloud.points() {
                pts.extend_from_slice(p);
            }
            neighbors.extend(graph.flat_indices().iter().map(|j| j + base));
            weights.extend_from_slice(graph.flat_weights());
            offsets.push(base + cloud.len());
        }
        let n = *offsets.last().unwrap();
        Ok(Batch {
            points: Tensor::new(vec![n, 3], pts)?,
            neighbors,
            weights,
            row_len,
            offsets,
        })
    }

    pub fn num_points(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn num_clouds(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Per-point weights making `Σ w_i ℓ_i` the mean over clouds of the
    /// per-cloud mean point loss.
    pub fn point_weights(&self) -> Vec<f64> {
        let clouds = self.num_clouds() as f64;
        let mut w = Vec::with_capacity(self.num_points());
        for win in self.offsets.windows(2) {
            let m = (win[1] - win[0]) as f64;
            w.extend(std::iter::repeat(1.0 / (clouds * m)).take(win[1] - win[0]));
        }
        w
    }
}
