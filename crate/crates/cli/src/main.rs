//! Command-line front end: data generation, training, evaluation,
//! inference, export and self-checks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hpk_core::checks::{grad_check, oracle_check, CheckOutcome};
use hpk_core::data::{
    export_colored, generate_dataset, read_cloud, Family, Manifest, Split, DEFAULT_POINTS, MANIFEST_NAME,
};
use hpk_core::evaluation::{middle_level_metrics, MatchingScope};
use hpk_core::geometry::prepare;
use hpk_core::inference::{infer_middle, predict, read_labels, write_labels, InferenceMode, DEFAULT_MC_SAMPLES};
use hpk_core::model::{EstimatorKind, ModelConfig, ModelState};
use hpk_core::train::{
    check_schema, default_out_dir, evaluate, load_dataset, prepare_all, stream_rng, train_from, TrainConfig,
};

#[derive(Parser, Debug)]
#[command(name = "hpk", version, about = "Hierarchical point-cloud part segmentation with discrete latent sub-parts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    GenData(GenData),
    /// Train a model on a dataset manifest.
    Train(Train),
    /// Evaluate a checkpoint on the test split of a dataset.
    Eval(Eval),
    /// Predict labels for one cloud file.
    Infer(Infer),
    /// Write a cloud as a colored ASCII PLY file.
    ExportColored(ExportColored),
    /// Finite-difference checks of the training gradients.
    GradCheck(GradCheck),
    /// Run the estimator oracle suite.
    OracleCheck(OracleCheck),
}

#[derive(Args, Debug)]
struct GenData {
    /// Object family.
    #[arg(long, default_value = "chairs", value_parser = parse_family)]
    family: Family,
    /// Dataset seed; object i uses a seed derived from (seed, i).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of training objects.
    #[arg(long, default_value_t = 200)]
    train: usize,
    /// Number of test objects.
    #[arg(long, default_value_t = 50)]
    test: usize,
    /// Points per object.
    #[arg(long, default_value_t = DEFAULT_POINTS)]
    points: usize,
    /// Output directory [default: $HPK_OUT_DIR/data]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Train {
    /// Dataset manifest, or a directory containing one.
    #[arg(long)]
    data: PathBuf,
    /// Training estimator: mpl-ste, mc-reinforce or mc-pathwise.
    #[arg(long, default_value = "mc-reinforce", value_parser = parse_estimator)]
    estimator: EstimatorKind,
    /// Monte Carlo samples per point during training (L).
    #[arg(long, default_value_t = 5)]
    samples: usize,
    /// Gumbel-softmax temperature (mc-pathwise).
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Score-function baseline B (mc-reinforce).
    #[arg(long, default_value_t = 1.0)]
    baseline: f64,
    /// Disable the score-function baseline.
    #[arg(long)]
    no_baseline: bool,
    /// Latent (middle-level) class count C [default: the dataset's]
    #[arg(long)]
    classes: Option<usize>,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Clouds per minibatch.
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Neighbours per point.
    #[arg(long, default_value_t = 16)]
    k_nn: usize,
    /// Samples for Monte Carlo inference during evaluation.
    #[arg(long, default_value_t = DEFAULT_MC_SAMPLES)]
    eval_samples: usize,
    /// Evaluation repeats for Monte Carlo inference.
    #[arg(long, default_value_t = 1)]
    eval_repeats: usize,
    /// Output directory for checkpoints and metrics [default: $HPK_OUT_DIR]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    /// Most probable latent assignment.
    Mpl,
    /// Monte Carlo average over latent samples.
    Mc,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScopeArg {
    Instance,
    Dataset,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest, or a directory containing one.
    #[arg(long)]
    data: PathBuf,
    /// Inference mode [default: the one matching the training estimator]
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Samples for Monte Carlo inference (L).
    #[arg(long, default_value_t = DEFAULT_MC_SAMPLES)]
    samples: usize,
    /// Monte Carlo repeats; mean and standard deviation are reported.
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Middle-level matching scope (dataset scope is for analysis only).
    #[arg(long, value_enum, default_value = "instance")]
    scope: ScopeArg,
}

#[derive(Args, Debug)]
struct Infer {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input `ptc v1` cloud.
    #[arg(long)]
    input: PathBuf,
    /// Output `lbl v1` label file.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, default_value_t = DEFAULT_MC_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Level {
    Top,
    Mid,
}

#[derive(Args, Debug)]
struct ExportColored {
    /// Input `ptc v1` cloud.
    #[arg(long)]
    input: PathBuf,
    /// Optional `lbl v1` predictions; the cloud's own labels otherwise.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Hierarchy level to color by.
    #[arg(long, value_enum, default_value = "top")]
    level: Level,
    /// Output PLY path.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct GradCheck {
    /// Number of accepted random instances.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct OracleCheck {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_estimator(s: &str) -> Result<EstimatorKind, String> {
    s.parse::<EstimatorKind>().map_err(|e| e.to_string())
}

fn parse_family(s: &str) -> Result<Family, String> {
    s.parse::<Family>().map_err(|e| e.to_string())
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_NAME)
    } else {
        p.to_path_buf()
    }
}

fn inference_mode(mode: Option<ModeArg>, samples: usize, estimator: EstimatorKind) -> InferenceMode {
    match mode {
        Some(ModeArg::Mpl) => InferenceMode::Mpl,
        Some(ModeArg::Mc) => InferenceMode::MonteCarlo(samples),
        None => match InferenceMode::for_estimator(estimator) {
            InferenceMode::Mpl => InferenceMode::Mpl,
            InferenceMode::MonteCarlo(_) => InferenceMode::MonteCarlo(samples),
        },
    }
}

fn report_checks(outcomes: &[CheckOutcome]) -> Result<()> {
    for c in outcomes {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = outcomes.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        bail!("{failed} check(s) failed");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let out = a.out.unwrap_or_else(|| default_out_dir().join("data"));
            let m = generate_dataset(&out, a.family, a.seed, a.train, a.test, a.points)?;
            println!(
                "wrote {} objects ({} train, {} test) to {}",
                m.entries.len(),
                a.train,
                a.test,
                out.join(MANIFEST_NAME).display()
            );
        }
        Command::Train(a) => {
            let manifest = Manifest::load(&manifest_path(&a.data))?;
            let family = manifest.header.family;
            let model = ModelConfig {
                num_top_classes: family.num_top(),
                num_latent_classes: a.classes.unwrap_or(family.num_mid()),
                k_nn: a.k_nn,
                temperature: a.tau,
                samples: a.samples,
                estimator: a.estimator,
                baseline: (!a.no_baseline).then_some(a.baseline),
                ..ModelConfig::default()
            };
            let config = TrainConfig {
                model,
                learning_rate: a.lr,
                batch_size: a.batch_size,
                epochs: a.epochs,
                seed: a.seed,
                eval_repeats: a.eval_repeats,
                eval_samples: a.eval_samples,
            };
            config.validate()?;
            let train_set = prepare_all(&manifest.load_split(Split::Train)?, a.k_nn)?;
            let test_set = prepare_all(&manifest.load_split(Split::Test)?, a.k_nn)?;
            let out = a.out.unwrap_or_else(default_out_dir);
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&config)?)
                .with_context(|| format!("writing config to {}", out.display()))?;
            let state = ModelState::init(config.model.clone(), config.seed)?;
            let outcome = train_from(&config, state, &train_set, &test_set, Some(&out), |r| {
                println!(
                    "epoch {:>3}  loss {:.5}  top OA {:.4}  mid OA {:.4}  mean Z {:.4}  clamped {}  {:.1}s",
                    r.epoch, r.loss, r.top_oa, r.mid_oa, r.mean_z_hat, r.clamped, r.wall_seconds
                );
            })?;
            println!("best epoch {} (checkpoints in {})", outcome.best_epoch, out.display());
        }
        Command::Eval(a) => {
            let state = ModelState::load(&a.checkpoint)?;
            let path = manifest_path(&a.data);
            let (_, test) = load_dataset(&path, &state.config)?;
            let mode = inference_mode(a.mode, a.samples, state.config.estimator);
            let report = evaluate(&state, &test, mode, a.repeats, a.seed)?;
            let mut record = serde_json::json!({
                "checkpoint": a.checkpoint.display().to_string(),
                "mode": match mode { InferenceMode::Mpl => "mpl".to_string(), InferenceMode::MonteCarlo(l) => format!("mc-{l}") },
                "top_oa": report.top_oa,
                "top_oa_std": report.top_oa_std,
                "mid_oa": report.mid_oa,
                "mid_oa_std": report.mid_oa_std,
            });
            if let ScopeArg::Dataset = a.scope {
                let pairs = test
                    .iter()
                    .map(|d| Ok((infer_middle(&state, &d.cloud, &d.graph)?, d.mid.clone())))
                    .collect::<hpk_core::error::Result<Vec<_>>>()?;
                let m = middle_level_metrics(
                    &pairs,
                    state.config.num_latent_classes,
                    state.config.num_latent_classes,
                    MatchingScope::Dataset,
                )?;
                record["mid_oa_dataset_scope"] = serde_json::json!(m.oa);
            }
            println!("{record}");
        }
        Command::Infer(a) => {
            let state = ModelState::load(&a.checkpoint)?;
            let labeled = read_cloud(&a.input)?;
            check_schema(&state.config, labeled.family.num_top(), labeled.family.num_mid())?;
            let (cloud, _, graph) = prepare(&labeled.cloud, state.config.k_nn)?;
            let mode = inference_mode(a.mode, a.samples, state.config.estimator);
            let mut rng = stream_rng(a.seed, 0, 0);
            let (top, mid) = predict(&state, &cloud, &graph, mode, &mut rng)?;
            write_labels(&a.output, &top.labels, &mid)?;
            println!("wrote {} labels to {}", mid.len(), a.output.display());
        }
        Command::ExportColored(a) => {
            let labeled = read_cloud(&a.input)?;
            let (top, mid) = match &a.labels {
                Some(p) => read_labels(p)?,
                None => (labeled.top.clone(), labeled.mid.clone()),
            };
            let labels = match a.level {
                Level::Top => top,
                Level::Mid => mid,
            };
            export_colored(&a.output, &labeled.cloud, &labels)?;
            println!("wrote {}", a.output.display());
        }
        Command::GradCheck(a) => report_checks(&grad_check(a.seeds, a.seed)?)?,
        Command::OracleCheck(a) => report_checks(&oracle_check(a.seed)?)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}
