use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use srcnet_core::io::{load_dataset, write_csv, write_dataset, write_mask_pgm, Checkpoint, DatasetSpec};
use srcnet_core::metrics::{box_stats, SceneMetrics, SummaryRow};
use srcnet_core::sarmodel::SceneConfig;
use srcnet_core::theorylab::{optimal_discriminator, run_checks, DiscreteDist, DiscriminatorTable, TheoryCheckConfig};
use srcnet_core::training::{binarize, evaluate, prepare, train, RunRecord, TrainConfig, TrainOptions};
use srcnet_core::Tensor;

const CONFIG_SNAPSHOT: &str = "config.txt";
const METRICS_HEADER: [&str; 7] = ["scene_id", "accuracy", "jci", "tp", "fp", "fn", "tn"];
const SUMMARY_HEADER: [&str; 7] = ["method_label", "min", "q1", "median", "q3", "max", "n_outliers"];
const THEORY_HEADER: [&str; 3] = ["trial", "c_of_g", "gap_to_minus_log4"];

/// Adversarial oil-spill segmentation of SAR intensity images.
#[derive(Parser)]
#[command(name = "srcnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic speckled dataset with ground-truth masks.
    Synth(SynthArgs),
    /// Train the generator and discriminator on a dataset.
    Train(TrainArgs),
    /// Score a checkpoint (or a baseline) on a dataset split.
    Eval(EvalArgs),
    /// Verify the closed-form minimax facts on random distributions.
    Theory(TheoryArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    test: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, env = "SRCNET_SEED", default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 5.0)]
    contrast: f64,
    #[arg(long = "spill-fraction", default_value_t = 0.2)]
    spill_fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    ks: f64,
    #[arg(long = "sea-sigma", default_value_t = 1.0)]
    sea_sigma: f64,
    #[arg(long = "blur-radius", default_value_t = 4)]
    blur_radius: usize,
}

/// One optional override per configuration key; values are parsed and
/// validated by the core configuration.
#[derive(Args, Default)]
struct TrainOverrides {
    #[arg(long = "gamma-seg", alias = "gamma_seg")]
    gamma_seg: Option<String>,
    #[arg(long = "gamma-sreg", alias = "gamma_sreg")]
    gamma_sreg: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    m: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long, env = "SRCNET_SEED")]
    seed: Option<String>,
    #[arg(long = "eval-every", alias = "eval_every")]
    eval_every: Option<String>,
    #[arg(long = "l2-mode", alias = "l2_mode")]
    l2_mode: Option<String>,
    #[arg(long = "fresh-batch-per-phase", alias = "fresh_batch_per_phase")]
    fresh_batch_per_phase: Option<String>,
    #[arg(long = "non-saturating", alias = "non_saturating")]
    non_saturating: Option<String>,
    #[arg(long = "record-wall-time", alias = "record_wall_time")]
    record_wall_time: Option<String>,
    #[arg(long)]
    threshold: Option<String>,
    #[arg(long = "sigma-window", alias = "sigma_window")]
    sigma_window: Option<String>,
    #[arg(long)]
    size: Option<String>,
    #[arg(long = "input-channels", alias = "input_channels")]
    input_channels: Option<String>,
    #[arg(long = "gen-base-channels", alias = "gen_base_channels")]
    gen_base_channels: Option<String>,
    #[arg(long = "gen-depth", alias = "gen_depth")]
    gen_depth: Option<String>,
    #[arg(long = "disc-base-channels", alias = "disc_base_channels")]
    disc_base_channels: Option<String>,
    #[arg(long = "disc-depth", alias = "disc_depth")]
    disc_depth: Option<String>,
    #[arg(long = "disc-conditional", alias = "disc_conditional")]
    disc_conditional: Option<String>,
}

impl TrainOverrides {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("gamma_seg", &self.gamma_seg),
            ("gamma_sreg", &self.gamma_sreg),
            ("lr", &self.lr),
            ("m", &self.m),
            ("epochs", &self.epochs),
            ("seed", &self.seed),
            ("eval_every", &self.eval_every),
            ("l2_mode", &self.l2_mode),
            ("fresh_batch_per_phase", &self.fresh_batch_per_phase),
            ("non_saturating", &self.non_saturating),
            ("record_wall_time", &self.record_wall_time),
            ("threshold", &self.threshold),
            ("sigma_window", &self.sigma_window),
            ("size", &self.size),
            ("input_channels", &self.input_channels),
            ("gen_base_channels", &self.gen_base_channels),
            ("gen_depth", &self.gen_depth),
            ("disc_base_channels", &self.disc_base_channels),
            ("disc_depth", &self.disc_depth),
            ("disc_conditional", &self.disc_conditional),
        ]
    }
}

/// Defaults, then the config file, then command-line flags.
fn merged_config(file: Option<&Path>, overrides: &TrainOverrides) -> Result<TrainConfig> {
    let mut tc = TrainConfig::default();
    if let Some(path) = file {
        tc.apply_file(path)?;
    }
    for (key, value) in overrides.pairs() {
        if let Some(v) = value {
            tc.set(key, v)?;
        }
    }
    tc.validate()?;
    Ok(tc)
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `key = value` file applied before command-line overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Suppress the per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    /// Ground-truth masks as predictions.
    Truth,
    /// All-sea predictions.
    Sea,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    #[arg(long)]
    out: PathBuf,
    /// Training config snapshot; its architecture must match the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Row label prefix in the summary table.
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    threshold: Option<String>,
    #[arg(long = "sigma-window", alias = "sigma_window")]
    sigma_window: Option<String>,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, env = "SRCNET_SEED", default_value_t = 0)]
    seed: u64,
    /// Per-trial CSV of the criterion and its gap to -log 4.
    #[arg(long, default_value = "theory_trials.csv")]
    out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    perturbations: usize,
    /// Replace the closed-form discriminator with 1 - d* (self-test that
    /// the checks can fail).
    #[arg(long, hide = true)]
    inject_negated_optimum: bool,
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = DatasetSpec {
        train: a.train,
        test: a.test,
        seed: a.seed,
        scene: SceneConfig {
            height: a.size,
            width: a.size,
            sea_sigma: a.sea_sigma,
            contrast_ratio: a.contrast,
            spill_fraction: a.spill_fraction,
            blur_radius: a.blur_radius,
            k_s: a.ks,
            seed: 0,
        },
    };
    spec.validate()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let rows = write_dataset(&a.out, &spec)?;
    println!("wrote {} scenes to {}", rows.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let tc = merged_config(a.config.as_deref(), &a.overrides)?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let dataset = load_dataset(&a.data)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join(CONFIG_SNAPSHOT), tc.snapshot())?;

    let quiet = a.quiet;
    let mut progress = |r: &RunRecord| {
        if quiet {
            return;
        }
        let eval = match (r.eval_accuracy, r.eval_jci) {
            (Some(acc), Some(jci)) => format!(" accuracy {acc:.4} jci {jci:.4}"),
            _ => String::new(),
        };
        eprintln!(
            "epoch {:>4} disc {:.4} gen {:.4} l2 {:.5}{eval}",
            r.epoch, r.disc_objective, r.gen_loss, r.l2_term
        );
    };
    let outcome = train(
        &dataset,
        &tc,
        TrainOptions {
            out_dir: Some(&a.out),
            resume,
            on_epoch: Some(&mut progress),
        },
    )?;
    match outcome.best_jci {
        Some(j) => println!("trained {} epochs; best held-out jci {j:.4}", outcome.records.len()),
        None => println!("trained {} epochs", outcome.records.len()),
    }
    Ok(())
}

fn scene_file_name(scene_id: &str) -> String {
    scene_id.rsplit('/').next().unwrap_or(scene_id).to_string()
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let dataset = load_dataset(&a.data)?;
    let samples = match a.split {
        Split::Train => &dataset.train,
        Split::Test => &dataset.test,
    };
    if samples.is_empty() {
        bail!("the selected split of {} has no scenes", a.data.display());
    }
    let overrides = TrainOverrides {
        threshold: a.threshold.clone(),
        sigma_window: a.sigma_window.clone(),
        ..TrainOverrides::default()
    };
    let mut tc = merged_config(a.config.as_deref(), &overrides)?;

    let (label, scenes, predictions): (String, Vec<SceneMetrics>, Vec<Tensor<f32>>) = match (&a.checkpoint, a.baseline) {
        (Some(path), _) => {
            let ck = Checkpoint::load(path)?;
            if a.config.is_some() {
                ck.verify(&tc.gen, &tc.disc)?;
            }
            tc.gen = ck.gen_config;
            tc.disc = ck.disc_config;
            let prepared = prepare(samples, &tc)?;
            let ev = evaluate(&tc.gen, &ck.gen, &prepared, tc.threshold)?;
            (a.label.clone().unwrap_or_else(|| "srcnet".into()), ev.scenes, ev.predictions)
        }
        (None, Some(baseline)) => {
            let mut scenes = Vec::with_capacity(samples.len());
            let mut preds = Vec::with_capacity(samples.len());
            for s in samples {
                let pred = match baseline {
                    Baseline::Truth => s.mask.clone(),
                    Baseline::Sea => binarize(&Tensor::zeros(s.mask.dims().to_vec()), tc.threshold),
                };
                scenes.push(SceneMetrics::from_masks(s.scene_id.clone(), &pred, &s.mask)?);
                preds.push(pred);
            }
            let name = match baseline {
                Baseline::Truth => "truth",
                Baseline::Sea => "sea",
            };
            (a.label.clone().unwrap_or_else(|| name.into()), scenes, preds)
        }
        (None, None) => bail!("either --checkpoint or --baseline is required"),
    };

    let masks_dir = a.out.join("masks");
    fs::create_dir_all(&masks_dir).with_context(|| format!("creating {}", masks_dir.display()))?;
    for (m, pred) in scenes.iter().zip(&predictions) {
        write_mask_pgm(&masks_dir.join(format!("{}.pgm", scene_file_name(&m.scene_id))), pred)?;
    }
    write_csv(&a.out.join("metrics.csv"), &METRICS_HEADER, &scenes)?;
    let acc: Vec<f64> = scenes.iter().map(|m| m.accuracy).collect();
    let jci: Vec<f64> = scenes.iter().map(|m| m.jci).collect();
    let summary = vec![
        SummaryRow::new(format!("{label}/accuracy"), &box_stats(&acc)?),
        SummaryRow::new(format!("{label}/jci"), &box_stats(&jci)?),
    ];
    write_csv(&a.out.join("summary.csv"), &SUMMARY_HEADER, &summary)?;
    let n = scenes.len() as f64;
    println!(
        "{} scenes: mean accuracy {:.4}, mean jci {:.4}",
        scenes.len(),
        acc.iter().sum::<f64>() / n,
        jci.iter().sum::<f64>() / n
    );
    Ok(())
}

/// Returns whether every check passed.
fn cmd_theory(a: &TheoryArgs) -> Result<bool> {
    let cfg = TheoryCheckConfig {
        trials: a.trials,
        seed: a.seed,
        perturbations: a.perturbations,
        ..TheoryCheckConfig::default()
    };
    let negated = |p: &DiscreteDist, q: &DiscreteDist| {
        let d = optimal_discriminator(p, q)?;
        DiscriminatorTable::new(d.values().iter().map(|v| 1.0 - v).collect())
    };
    let report = if a.inject_negated_optimum {
        run_checks(&cfg, &negated)?
    } else {
        run_checks(&cfg, &optimal_discriminator)?
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_csv(&a.out, &THEORY_HEADER, &report.rows)?;
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Theory(a) => cmd_theory(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
