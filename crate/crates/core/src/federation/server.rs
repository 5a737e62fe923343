//! The round loop: local training, straggler exclusion, aggregation,
//! fine-tuning and testing.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;

use super::client::{evaluate, fine_tune, local_train_round, ClientState, Evaluation, RoundContext, RoundOutput};
use super::prototypes::{aggregate_prototypes, momentum_update, PrototypeBank, RoundMessage};
use super::{Method, RunConfig};
use crate::data::{generate_dataset, partition_and_split, ClientSplit, Dataset};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::seeds::{self, Purpose};
use crate::snapshot::Snapshot;

/// Column order of the metrics file.
pub const METRICS_HEADER: &str =
    "round,client,l_s,l_u,l_lc,l_gc,total,accuracy,f,g,ema_mean,ema_var,mean_lambda,uplink_bytes";

/// One participating client in one round.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub client: usize,
    pub output: RoundOutput,
    /// Test accuracy of the client's model after its local epoch.
    pub accuracy: f64,
    pub ema_mean: f64,
    pub ema_var: f64,
    pub uplink_bytes: usize,
}

impl RoundRecord {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let l = &self.output.losses;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.round,
            self.client,
            l.supervised,
            l.unsupervised,
            l.local_contrastive,
            l.global_contrastive,
            l.total,
            self.accuracy,
            opt(self.output.quantity),
            opt(self.output.quality),
            self.ema_mean,
            self.ema_var,
            opt(self.output.mean_lambda),
            self.uplink_bytes
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Timing {
    pub round: usize,
    pub client: usize,
    pub millis: f64,
}

#[derive(Debug, Clone)]
pub struct RunArtifact {
    pub method: Method,
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    pub timings: Vec<Timing>,
    /// Final test evaluation per client.
    pub evaluations: Vec<Evaluation>,
    pub params: Vec<Snapshot>,
    pub global_bank: PrototypeBank,
    pub uplink_bytes: usize,
    /// Serialized size of one full parameter snapshot.
    pub model_bytes: usize,
    pub wall_clock_ms: f64,
}

impl RunArtifact {
    /// Sample-weighted test accuracy over all clients.
    pub fn accuracy(&self) -> f64 {
        let correct: usize = self.evaluations.iter().map(|e| e.correct).sum();
        let total: usize = self.evaluations.iter().map(|e| e.total).sum();
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(METRICS_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.csv_line());
            out.push('\n');
        }
        out
    }

    pub fn timings_csv(&self) -> String {
        let mut out = String::from("round,client,millis\n");
        for t in &self.timings {
            let _ = writeln!(out, "{},{},{:.3}", t.round, t.client, t.millis);
        }
        out
    }
}

/// Generates the dataset and client splits for `seed`, then trains.
pub fn run_training(cfg: &RunConfig, seed: u64) -> Result<RunArtifact> {
    cfg.validate()?;
    let data = generate_dataset(&cfg.data.spec(), seeds::derive_seed(seed, &[Purpose::Dataset as u64]))?;
    let splits = partition_and_split(
        &data.labels(),
        cfg.clients,
        cfg.concentration,
        cfg.label_rate,
        cfg.min_per_client,
        seeds::derive_seed(seed, &[Purpose::Partition as u64]),
    )?;
    run_with_data(cfg, seed, &data, splits)
}

fn average_params(clients: &[&ClientState], method: Method) -> Snapshot {
    let total: usize = clients.iter().map(|c| c.train_size(method)).sum();
    let mut out = clients[0].params.clone();
    for (i, (_, a)) in out.entries.iter_mut().enumerate() {
        let mut acc = vec![0.0; a.len()];
        for c in clients {
            let w = if total == 0 {
                1.0 / clients.len() as f64
            } else {
                c.train_size(method) as f64 / total as f64
            };
            for (o, v) in acc.iter_mut().zip(c.params.entries[i].1.data()) {
                *o += w * v;
            }
        }
        a.data_mut().copy_from_slice(&acc);
    }
    out
}

/// Trains on a given dataset and split; clients are numbered by split order.
pub fn run_with_data(cfg: &RunConfig, seed: u64, data: &Dataset, splits: Vec<ClientSplit>) -> Result<RunArtifact> {
    cfg.validate()?;
    let started = Instant::now();
    let model_cfg: ModelConfig = cfg.model_config();
    let k = splits.len();
    if cfg.stragglers >= k {
        return Err(Error::Config(format!("{} stragglers leave no client out of {k}", cfg.stragglers)));
    }
    let init = model::init_params(&model_cfg, &mut seeds::stream(seed, Purpose::Init, &[]));
    let model_bytes = init.to_bytes().len();
    let mut clients: Vec<ClientState> = splits
        .into_iter()
        .enumerate()
        .map(|(id, split)| ClientState::new(id, split, init.clone(), cfg))
        .collect();
    let mut global = PrototypeBank::empty(model_cfg.embed);
    let mut records = Vec::new();
    let mut timings = Vec::new();
    let mut uplink_total = 0;

    for round in 1..=cfg.rounds {
        let mut srng = seeds::stream(seed, Purpose::Stragglers, &[round as u64]);
        let mut dropped = index::sample(&mut srng, k, cfg.stragglers).into_vec();
        dropped.sort_unstable();
        let ctx = RoundContext {
            cfg,
            model: &model_cfg,
            data,
            global: &global,
            round,
            seed,
        };
        let work = |c: &mut ClientState| -> Result<(RoundOutput, f64, f64)> {
            let t0 = Instant::now();
            let out = local_train_round(c, &ctx)?;
            let acc = evaluate(&model_cfg, &c.params, data, &c.split.test)?.accuracy();
            Ok((out, acc, t0.elapsed().as_secs_f64() * 1e3))
        };
        let active: Vec<&mut ClientState> = clients.iter_mut().filter(|c| dropped.binary_search(&c.id).is_err()).collect();
        if active.is_empty() {
            log::warn!("round {round}: no participating clients");
            continue;
        }
        let results: Vec<Result<(RoundOutput, f64, f64)>> = if cfg.parallel {
            active.into_par_iter().map(work).collect()
        } else {
            active.into_iter().map(work).collect()
        };
        let active_ids: Vec<usize> = (0..k).filter(|id| dropped.binary_search(id).is_err()).collect();
        let mut banks = Vec::new();
        for (id, res) in active_ids.iter().copied().zip(results) {
            let (output, accuracy, millis) = res?;
            let uplink_bytes = match (&output.bank, cfg.method.shares_model()) {
                (_, true) => model_bytes,
                (Some(bank), false) => RoundMessage {
                    client: id,
                    round,
                    bank: bank.clone(),
                }
                .to_bytes()
                .len(),
                (None, false) => 0,
            };
            uplink_total += uplink_bytes;
            if let Some(b) = &output.bank {
                banks.push(b.clone());
            }
            let c = &clients[id];
            records.push(RoundRecord {
                round,
                client: id,
                accuracy,
                ema_mean: c.ema.mean(),
                ema_var: c.ema.var(),
                uplink_bytes,
                output,
            });
            timings.push(Timing { round, client: id, millis });
        }

        if cfg.method.shares_model() {
            let active: Vec<&ClientState> = active_ids.iter().map(|&i| &clients[i]).collect();
            let avg = average_params(&active, cfg.method);
            for c in clients.iter_mut() {
                c.params = avg.clone();
            }
        } else if !banks.is_empty() {
            let refs: Vec<&PrototypeBank> = banks.iter().collect();
            let mut fresh = aggregate_prototypes(&refs, cfg.ablation.literal_aggregation)?;
            fresh.round = round;
            global = momentum_update(&global, &fresh, cfg.kappa)?;
        }
    }

    if cfg.method == Method::Ssfl {
        for c in clients.iter_mut() {
            fine_tune(c, cfg, data, cfg.fine_tune_epochs, seed)?;
        }
    }
    let evaluations = clients
        .iter()
        .map(|c| evaluate(&model_cfg, &c.params, data, &c.split.test))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunArtifact {
        method: cfg.method,
        seed,
        records,
        timings,
        evaluations,
        params: clients.into_iter().map(|c| c.params).collect(),
        global_bank: global,
        uplink_bytes: uplink_total,
        model_bytes,
        wall_clock_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}
