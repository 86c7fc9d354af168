//! Files emitted by a run. Every file except `timing.csv` is a pure function
//! of the configuration and the seed.

use std::path::Path;

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::data::SyntheticDataset;
use crate::error::{ExpError, ExpResult};
use crate::train::{elbo_csv, metrics_csv, summarize, RunOutput, Summary};

pub const METRICS_FILE: &str = "metrics.csv";
pub const ELBO_FILE: &str = "elbo.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.toml";
pub const LR_SEARCH_FILE: &str = "lr_search.csv";

pub fn write_text(path: &Path, text: &str) -> ExpResult<()> {
    std::fs::write(path, text).map_err(|e| ExpError::io(path, e))
}

pub fn ensure_dir(dir: &Path) -> ExpResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| ExpError::io(dir, e))
}

/// Writes metrics, ELBO trace, timings, summary, the resolved configuration
/// and the final checkpoint of `run` into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, data: &SyntheticDataset, run: &RunOutput) -> ExpResult<Summary> {
    ensure_dir(dir)?;
    write_text(&dir.join(CONFIG_FILE), &cfg.to_toml())?;
    write_text(&dir.join(METRICS_FILE), &metrics_csv(&run.metrics))?;
    write_text(&dir.join(ELBO_FILE), &elbo_csv(&run.elbo))?;
    let mut timing = String::from("epoch,wall_time\n");
    for (i, s) in run.epoch_seconds.iter().enumerate() {
        timing.push_str(&format!("{},{s:.6}\n", i + 1));
    }
    write_text(&dir.join(TIMING_FILE), &timing)?;
    if let Some(search) = &run.lr_search {
        let mut csv = String::from("lr,train_loss\n");
        for (lr, loss) in &search.trials {
            csv.push_str(&format!("{lr},{loss}\n"));
        }
        write_text(&dir.join(LR_SEARCH_FILE), &csv)?;
    }
    let summary = summarize(cfg, data, run)?;
    write_text(&dir.join(SUMMARY_FILE), &serde_json::to_string_pretty(&summary)?)?;
    checkpoint::save(
        &dir.join(CHECKPOINT_FILE),
        &run.network,
        run.metrics.len(),
        Some(&run.rng),
    )?;
    Ok(summary)
}
