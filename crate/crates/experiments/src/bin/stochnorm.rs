use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stochnorm::noise::measure_bn_noise;
use stochnorm::NormKind;
use stochnorm_experiments::checkpoint;
use stochnorm_experiments::config::ExperimentConfig;
use stochnorm_experiments::data::SyntheticDataset;
use stochnorm_experiments::diagnostics::{batch_size_scaling, chi2_check, spatial_size_scaling};
use stochnorm_experiments::eval::{
    coverage_csv, error_coverage, perturbation_sweep, seed_stability_report, stability_csv, sweep_csv, PerturbationKind,
};
use stochnorm_experiments::output::{ensure_dir, write_run, write_text};
use stochnorm_experiments::rng::{stream, Stream};
use stochnorm_experiments::train::{metrics_csv, normalization_batch_experiment, run_training};
use stochnorm_experiments::{ExpError, ExpResult};

#[derive(Parser)]
#[command(
    name = "stochnorm",
    version,
    about = "Normalization and stochastic-scale experiments on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed for data, initialization and training streams.
    #[arg(long)]
    seed: u64,
    /// Directory receiving all output files.
    #[arg(long)]
    out_dir: PathBuf,
    /// TOML configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics, summary and checkpoint.
    Train(Common),
    /// Train a batch-normalized model, then measure the variances of its
    /// batch-statistics noise per layer.
    MeasureNoise {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 200)]
        draws: usize,
    },
    /// χ² goodness of fit and variance-scaling fits on synthetic inputs.
    NoiseModel {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 400)]
        draws: usize,
    },
    /// Batch-normalized runs with larger normalization batches.
    NormBatch {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "32,256")]
        norm_batch: Vec<usize>,
    },
    /// Error-coverage and perturbation curves of a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.2,0.4,0.8")]
        magnitudes: Vec<f64>,
    },
    /// Train over consecutive seeds and summarize their spread.
    SeedStability {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 5)]
        window: usize,
    },
}

fn load_config(c: &Common) -> ExpResult<ExperimentConfig> {
    let text = match &c.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| ExpError::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    ExperimentConfig::from_toml_with_overrides(&text, &c.overrides)
}

fn train(c: &Common) -> ExpResult<()> {
    let cfg = load_config(c)?;
    let data = SyntheticDataset::generate(&cfg.dataset, cfg.val_samples(), c.seed)?;
    let run = run_training(&cfg, c.seed)?;
    write_run(&c.out_dir, &cfg, &data, &run)?;
    match run.diverged {
        Some(d) => Err(ExpError::Diverged {
            epoch: d.epoch,
            step: d.step,
            reason: d.reason,
        }),
        None => Ok(()),
    }
}

fn measure_noise(c: &Common, batch_size: usize, draws: usize) -> ExpResult<()> {
    let cfg = load_config(c)?;
    if cfg.model.norm != NormKind::Batch {
        return Err(ExpError::Config("measure-noise needs model.norm = \"batch\"".into()));
    }
    let data = SyntheticDataset::generate(&cfg.dataset, cfg.val_samples(), c.seed)?;
    let run = run_training(&cfg, c.seed)?;
    let stats = measure_bn_noise(
        &run.network,
        &data.train.x,
        batch_size,
        draws,
        &mut stream(c.seed, Stream::Eval),
    )?;
    ensure_dir(&c.out_dir)?;
    write_text(&c.out_dir.join("noise.csv"), &stats.to_csv())
}

fn noise_model(c: &Common, samples: usize, draws: usize) -> ExpResult<()> {
    let mut rng = stream(c.seed, Stream::Eval);
    ensure_dir(&c.out_dir)?;
    let mut csv = String::from("n,samples,ks_statistic,p_value\n");
    for (k, side) in [(4, 2), (8, 4)] {
        let r = chi2_check(k, side, samples, &mut rng)?;
        csv.push_str(&format!("{},{},{},{}\n", r.n, r.samples, r.statistic, r.p_value));
    }
    write_text(&c.out_dir.join("chi2.csv"), &csv)?;
    let by_k = batch_size_scaling(&[8, 16, 32, 64, 128], draws, &mut rng)?;
    write_text(&c.out_dir.join("scaling_batch.csv"), &by_k.to_csv("k"))?;
    let by_z = spatial_size_scaling(&[2, 4, 8, 16], 16, draws, &mut rng)?;
    write_text(&c.out_dir.join("scaling_spatial.csv"), &by_z.to_csv("z"))?;
    write_text(
        &c.out_dir.join("slopes.csv"),
        &format!("fit,slope\nbatch_size,{}\nspatial_size,{}\n", by_k.slope, by_z.slope),
    )
}

fn norm_batch(c: &Common, sizes: &[usize]) -> ExpResult<()> {
    let cfg = load_config(c)?;
    let runs = normalization_batch_experiment(&cfg, c.seed, sizes)?;
    ensure_dir(&c.out_dir)?;
    let mut summary = String::from("norm_batch,train_loss,train_loss_eval_mode,val_loss,val_acc\n");
    for (nb, run) in &runs {
        write_text(
            &c.out_dir.join(format!("metrics_nb{nb}.csv")),
            &metrics_csv(&run.metrics),
        )?;
        if let Some(m) = run.metrics.last() {
            summary.push_str(&format!(
                "{nb},{},{},{},{}\n",
                m.train_loss, m.train_loss_eval_mode, m.val_loss, m.val_acc
            ));
        }
    }
    write_text(&c.out_dir.join("norm_batch.csv"), &summary)?;
    match runs.iter().find_map(|(_, r)| r.diverged.clone()) {
        Some(d) => Err(ExpError::Diverged {
            epoch: d.epoch,
            step: d.step,
            reason: d.reason,
        }),
        None => Ok(()),
    }
}

fn evaluate(c: &Common, path: &Path, magnitudes: &[f64]) -> ExpResult<()> {
    let cfg = load_config(c)?;
    let arch = cfg.architecture();
    let ck = checkpoint::load(path, Some((&arch, cfg.model.norm, &cfg.noise_mode()?)))?;
    let data = SyntheticDataset::generate(&cfg.dataset, cfg.val_samples(), c.seed)?;
    let net = &ck.network;
    let mut rng = stream(c.seed, Stream::Eval);
    let probs = if net.noise.is_variational() && cfg.train.mc_eval_samples > 0 {
        stochnorm::variational::mc_predict(net, &data.val.x, cfg.train.mc_eval_samples, &mut rng)?
    } else {
        net.predict(&data.val.x)?.map(f64::exp)
    };
    ensure_dir(&c.out_dir)?;
    let curve = error_coverage(probs.data(), &data.val.y, net.classes());
    write_text(&c.out_dir.join("coverage.csv"), &coverage_csv(&curve))?;
    for (kind, name) in [
        (PerturbationKind::Gaussian, "gaussian"),
        (PerturbationKind::GradSign, "grad_sign"),
    ] {
        let sweep = perturbation_sweep(net, &data.val, kind, magnitudes, &mut rng)?;
        write_text(&c.out_dir.join(format!("perturbation_{name}.csv")), &sweep_csv(&sweep))?;
    }
    Ok(())
}

fn seed_stability(c: &Common, seeds: u64, window: usize) -> ExpResult<()> {
    let cfg = load_config(c)?;
    let mut all = Vec::new();
    for seed in c.seed..c.seed + seeds {
        let run = run_training(&cfg, seed)?;
        let dir = c.out_dir.join(format!("seed_{seed}"));
        let data = SyntheticDataset::generate(&cfg.dataset, cfg.val_samples(), seed)?;
        write_run(&dir, &cfg, &data, &run)?;
        all.push(run.metrics);
    }
    let rows = seed_stability_report(&all, window)?;
    write_text(&c.out_dir.join("seed_stability.csv"), &stability_csv(&rows))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => train(c),
        Command::MeasureNoise {
            common,
            batch_size,
            draws,
        } => measure_noise(common, *batch_size, *draws),
        Command::NoiseModel { common, samples, draws } => noise_model(common, *samples, *draws),
        Command::NormBatch { common, norm_batch: nb } => norm_batch(common, nb),
        Command::Evaluate {
            common,
            checkpoint,
            magnitudes,
        } => evaluate(common, checkpoint, magnitudes),
        Command::SeedStability { common, seeds, window } => seed_stability(common, *seeds, *window),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
