//! The `ssfl` subcommands as library calls.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use ssfl_core::data::{export_dataset, generate_dataset, partition_and_split};
use ssfl_core::federation::{run_training, Ablation, Method, RunArtifact, RunConfig};
use ssfl_core::seeds::{self, Purpose};

use crate::config::HarnessConfig;
use crate::error::{HarnessError, Result};
use crate::payload::{self, PayloadRow};
use crate::stats::{summarize, Summary};
use crate::verify::{run_checklist, Checklist, VerifySettings};

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| HarnessError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// The config with `offset` added to every seed.
pub fn with_seed_offset(cfg: &HarnessConfig, offset: u64) -> HarnessConfig {
    HarnessConfig {
        seeds: cfg.seeds.iter().map(|s| s + offset).collect(),
        ..cfg.clone()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    pub client_accuracy: Vec<f64>,
    pub uplink_bytes: usize,
    pub model_bytes: usize,
    pub wall_clock_ms: f64,
}

impl From<&RunArtifact> for SeedResult {
    fn from(a: &RunArtifact) -> Self {
        Self {
            seed: a.seed,
            accuracy: a.accuracy(),
            client_accuracy: a.evaluations.iter().map(|e| e.accuracy()).collect(),
            uplink_bytes: a.uplink_bytes,
            model_bytes: a.model_bytes,
            wall_clock_ms: a.wall_clock_ms,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub method: String,
    pub accuracy: Summary,
    pub runs: Vec<SeedResult>,
}

impl TrainSummary {
    pub fn new(method: Method, runs: Vec<SeedResult>) -> Self {
        let acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
        Self {
            method: method.name().to_string(),
            accuracy: summarize(&acc),
            runs,
        }
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.accuracy).collect()
    }
}

/// Writes metrics, timings, parameter and prototype snapshots and a JSON
/// summary of one run into `dir`.
pub fn write_run(dir: &Path, art: &RunArtifact) -> Result<()> {
    write(&dir.join("metrics.csv"), art.metrics_csv())?;
    write(&dir.join("timings.csv"), art.timings_csv())?;
    for (k, p) in art.params.iter().enumerate() {
        write(&dir.join("params").join(format!("client-{k}.bin")), p.to_bytes())?;
    }
    write(&dir.join("prototypes.bin"), art.global_bank.to_snapshot().to_bytes())?;
    write(&dir.join("summary.json"), serde_json::to_string_pretty(&SeedResult::from(art))?)?;
    Ok(())
}

/// Trains once per seed, writing `seed-<s>/` run directories under `out`
/// when given.
pub fn train_runs(run: &RunConfig, seeds: &[u64], out: Option<&Path>) -> Result<TrainSummary> {
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let art = run_training(run, seed)?;
        log::info!("{} seed {seed}: accuracy {:.4}", run.method.name(), art.accuracy());
        if let Some(out) = out {
            write_run(&out.join(format!("seed-{seed}")), &art)?;
        }
        results.push(SeedResult::from(&art));
    }
    Ok(TrainSummary::new(run.method, results))
}

pub fn train(cfg: &HarnessConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    write(&out.join("config.txt"), cfg.to_text())?;
    let summary = train_runs(&cfg.run, &cfg.seeds, Some(out))?;
    write(&out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantSummary {
    pub variant: String,
    pub accuracy: Summary,
    pub accuracies: Vec<f64>,
}

pub const ABLATION_HEADER: &str = "variant,mean,std,median,accuracies";

pub fn ablation_csv(rows: &[VariantSummary]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let accs: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.6}")).collect();
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{}",
            r.variant,
            r.accuracy.mean,
            r.accuracy.std,
            r.accuracy.median,
            accs.join(";")
        );
    }
    out
}

/// Runs the component ladder of the main method on the configured seeds.
/// Dataset, partition and initialization depend only on the seed, so the
/// variants are paired.
pub fn ablate_variants(run: &RunConfig, seeds: &[u64], variants: &[(&str, Ablation)]) -> Result<Vec<VariantSummary>> {
    variants
        .iter()
        .map(|(name, ablation)| {
            let cfg = RunConfig {
                method: Method::Ssfl,
                ablation: *ablation,
                ..run.clone()
            };
            let accuracies = train_runs(&cfg, seeds, None)?.accuracies();
            Ok(VariantSummary {
                variant: name.to_string(),
                accuracy: summarize(&accuracies),
                accuracies,
            })
        })
        .collect()
}

pub fn ablate(cfg: &HarnessConfig, out: &Path) -> Result<Vec<VariantSummary>> {
    cfg.validate()?;
    write(&out.join("config.txt"), cfg.to_text())?;
    let rows = ablate_variants(&cfg.run, &cfg.seeds, &Ablation::ladder())?;
    write(&out.join("ablation.csv"), ablation_csv(&rows))?;
    Ok(rows)
}

/// Checks with the configured class count and weight ceiling.
pub fn verify(cfg: &HarnessConfig) -> Result<Checklist> {
    cfg.validate()?;
    run_checklist(&VerifySettings {
        num_classes: cfg.run.data.classes,
        lambda_max: cfg.run.lambda_max,
        ..VerifySettings::default()
    })
}

pub fn payload_report(cfg: &HarnessConfig) -> Result<Vec<PayloadRow>> {
    cfg.validate()?;
    payload::report(&cfg.run)
}

/// Exports the dataset and client splits of each seed into `seed-<s>/`.
/// Returns the number of windows written.
pub fn gen_data(cfg: &HarnessConfig, out: &Path) -> Result<usize> {
    cfg.validate()?;
    write(&out.join("config.txt"), cfg.to_text())?;
    let run = &cfg.run;
    let mut written = 0;
    for &seed in &cfg.seeds {
        let data = generate_dataset(&run.data.spec(), seeds::derive_seed(seed, &[Purpose::Dataset as u64]))?;
        let splits = partition_and_split(
            &data.labels(),
            run.clients,
            run.concentration,
            run.label_rate,
            run.min_per_client,
            seeds::derive_seed(seed, &[Purpose::Partition as u64]),
        )?;
        written += export_dataset(&out.join(format!("seed-{seed}")), &data, &splits)?.len();
    }
    Ok(written)
}
