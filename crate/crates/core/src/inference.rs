//! Label prediction at both hierarchy levels.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{KnnGraph, PointCloud};
use crate::model::{Batch, EstimatorKind, Forward, Mode, ModelState};
use crate::sampling::{argmax, draw_class};
use crate::tensor::{Tape, Tensor};

/// Inference-time sample count used for Monte Carlo prediction by default.
pub const DEFAULT_MC_SAMPLES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferenceMode {
    /// Most probable latent assignment.
    Mpl,
    /// Monte Carlo average over this many latent samples.
    MonteCarlo(usize),
}

impl InferenceMode {
    /// The inference rule matching a training estimator.
    pub fn for_estimator(kind: EstimatorKind) -> Self {
        match kind {
            EstimatorKind::MplSte => InferenceMode::Mpl,
            EstimatorKind::McReinforce | EstimatorKind::McPathwise => InferenceMode::MonteCarlo(DEFAULT_MC_SAMPLES),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopPrediction {
    /// m × K_top. For MPL this is the unnormalized lower-bound score
    /// `p(y | z*) π[z*]`; for Monte Carlo it is the sample average.
    pub scores: Tensor,
    pub labels: Vec<usize>,
}

impl TopPrediction {
    fn from_scores(scores: Tensor) -> Self {
        let labels = (0..scores.rows()).map(|i| argmax(scores.row(i))).collect();
        TopPrediction { scores, labels }
    }
}

/// Encoder probabilities plus decoder outputs for every latent class:
/// row `i·C + c` of the table is `p(y | e_c, x_i)`.
struct ClassTable {
    probs: Tensor,
    table: Tensor,
}

fn class_table(state: &ModelState, cloud: &PointCloud, graph: &KnnGraph) -> Result<ClassTable> {
    let batch = Batch::single(cloud, graph)?;
    let n = batch.num_points();
    let c = state.config.num_latent_classes;
    let mut tape = Tape::new();
    let mut fwd = Forward::new(Mode::Eval);
    let (features, probs) = state.encode(&mut tape, &batch, &mut fwd)?;
    let cols = state.decoder_columns(&mut tape, features)?;
    let rows: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(c)).collect();
    let mut onehot = Tensor::zeros(&[n * c, c]);
    for r in 0..n * c {
        onehot.data_mut()[r * c + r % c] = 1.0;
    }
    let z = tape.constant(onehot)?;
    let y = state.decode_head(&mut tape, cols, z, Some(rows), &mut fwd)?;
    Ok(ClassTable {
        probs: tape.value(probs).clone(),
        table: tape.value(y).clone(),
    })
}

fn encoder_probs(state: &ModelState, cloud: &PointCloud, graph: &KnnGraph) -> Result<Tensor> {
    Ok(state.encode_cloud(cloud, graph)?.1.probs)
}

/// Middle-level labels: row-wise argmax of π (0-based).
pub fn infer_middle(state: &ModelState, cloud: &PointCloud, graph: &KnnGraph) -> Result<Vec<usize>> {
    let probs = encoder_probs(state, cloud, graph)?;
    Ok((0..probs.rows()).map(|i| argmax(probs.row(i))).collect())
}

/// Top-level prediction from the most probable latent assignment.
pub fn infer_top_mpl(state: &ModelState, cloud: &PointCloud, graph: &KnnGraph) -> Result<TopPrediction> {
    // Reading z* off the full class table keeps MPL scores bit-identical to
    // the corresponding terms of the Monte Carlo and exact estimates.
    let ct = class_table(state, cloud, graph)?;
    let n = ct.probs.rows();
    let c = ct.probs.cols();
    let k = ct.table.cols();
    let mut scores = Tensor::zeros(&[n, k]);
    for i in 0..n {
        let z = argmax(ct.probs.row(i));
        let w = ct.probs.at(i, z);
        for (o, p) in scores.data_mut()[i * k..(i + 1) * k].iter_mut().zip(ct.table.row(i * c + z)) {
            *o = w * p;
        }
    }
    Ok(TopPrediction::from_scores(scores))
}

/// Top-level prediction averaging decoder outputs over `samples` latent
/// draws per point.
pub fn infer_top_mc<R: Rng + ?Sized>(
    state: &ModelState,
    cloud: &PointCloud,
    graph: &KnnGraph,
    samples: usize,
    rng: &mut R,
) -> Result<TopPrediction> {
    if samples == 0 {
        return Err(Error::Parameter("sample count must be >= 1".into()));
    }
    let ct = class_table(state, cloud, graph)?;
    let n = ct.probs.rows();
    let c = ct.probs.cols();
    let k = ct.table.cols();
    // Draw order matches one full-cloud sample after another.
    let mut counts = vec![0usize; n * c];
    for _ in 0..samples {
        for i in 0..n {
            counts[i * c + draw_class(ct.probs.row(i), rng)] += 1;
        }
    }
    let mut scores = Tensor::zeros(&[n, k]);
    for i in 0..n {
        let out = &mut scores.data_mut()[i * k..(i + 1) * k];
        for cls in 0..c {
            let hits = counts[i * c + cls];
            if hits == 0 {
                continue;
            }
            let w = hits as f64 / samples as f64;
            for (o, p) in out.iter_mut().zip(ct.table.row(i * c + cls)) {
                *o += w * p;
            }
        }
    }
    Ok(TopPrediction::from_scores(scores))
}

/// Exact marginal `p(y | x_i) = Σ_c p(y | e_c, x_i) π_i[c]` for every class.
pub fn exact_marginals(state: &ModelState, cloud: &PointCloud, graph: &KnnGraph) -> Result<Tensor> {
    let ct = class_table(state, cloud, graph)?;
    let n = ct.probs.rows();
    let c = ct.probs.cols();
    let k = ct.table.cols();
    let mut out = Tensor::zeros(&[n, k]);
    for i in 0..n {
        for cls in 0..c {
            let w = ct.probs.at(i, cls);
            for (o, p) in out.data_mut()[i * k..(i + 1) * k].iter_mut().zip(ct.table.row(i * c + cls)) {
                *o += w * p;
            }
        }
    }
    Ok(out)
}

/// Both levels under one inference mode.
pub fn predict<R: Rng + ?Sized>(
    state: &ModelState,
    cloud: &PointCloud,
    graph: &KnnGraph,
    mode: InferenceMode,
    rng: &mut R,
) -> Result<(TopPrediction, Vec<usize>)> {
    let top = match mode {
        InferenceMode::Mpl => infer_top_mpl(state, cloud, graph)?,
        InferenceMode::MonteCarlo(l) => infer_top_mc(state, cloud, graph, l, rng)?,
    };
    let mid = infer_middle(state, cloud, graph)?;
    Ok((top, mid))
}

/// Writes an `lbl v1` file. Labels are 0-based in memory and 1-based on
/// disk.
pub fn write_labels(path: &Path, top: &[usize], mid: &[usize]) -> Result<()> {
    if top.len() != mid.len() {
        return Err(Error::Contract(format!("{} top labels, {} middle labels", top.len(), mid.len())));
    }
    let mut text = format!("lbl v1 {}\n", top.len());
    for (t, m) in top.iter().zip(mid) {
        writeln!(text, "{} {}", t + 1, m + 1).expect("string write");
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads an `lbl v1` file back into 0-based `(top, mid)` labels.
pub fn read_labels(path: &Path) -> Result<(Vec<usize>, Vec<usize>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))?;
    let m: usize = match header.split_whitespace().collect::<Vec<_>>().as_slice() {
        ["lbl", "v1", m] => m.parse().map_err(|_| parse_err(1, format!("bad count {m:?}")))?,
        _ => return Err(parse_err(1, format!("expected `lbl v1 <m>`, got {header:?}"))),
    };
    let mut top = Vec::with_capacity(m);
    let mut mid = Vec::with_capacity(m);
    for row in 0..m {
        let line_no = row + 2;
        let line = lines
            .next()
            .ok_or_else(|| parse_err(line_no, format!("missing label row {} of {m}", row + 1)))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parse = |s: &str| -> Result<usize> {
            match s.parse::<usize>() {
                Ok(v) if v >= 1 => Ok(v - 1),
                _ => Err(parse_err(line_no, format!("invalid label {s:?}"))),
            }
        };
        match fields.as_slice() {
            [t, md] => {
                top.push(parse(t)?);
                mid.push(parse(md)?);
            }
            _ => return Err(parse_err(line_no, format!("expected 2 fields, got {}", fields.len()))),
        }
    }
    if let Some((extra, _)) = lines.enumerate().find(|(_, l)| !l.trim().is_empty()) {
        return Err(parse_err(m + 2 + extra, format!("more rows than the declared {m}")));
    }
    Ok((top, mid))
}
