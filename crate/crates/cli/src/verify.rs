//! The verification checklist: weighting bounds with a fault-injection
//! control, finite-difference checks of every loss head through a small
//! encoder, and the prototype aggregation oracle.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use ssfl_core::federation::{aggregate_prototypes, momentum_update, PrototypeBank};
use ssfl_core::gradcheck::gradient_check;
use ssfl_core::losses::{
    global_contrastive_loss, local_contrastive_loss, supervised_loss, total_loss, unsupervised_loss,
    ContrastiveConfig, LossHeads,
};
use ssfl_core::model::{self, ModelConfig};
use ssfl_core::seeds::{self, Purpose};
use ssfl_core::weighting::{
    iota, pseudo_labels, verify_weighting_bounds, ConfidenceEma, VerifyOptions, WeightingConfig,
};
use ssfl_core::{DenseArray, NodeId, Tape};

use crate::error::Result;

pub const GRADIENT_STEP: f64 = 1e-5;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const AGGREGATION_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct VerifySettings {
    pub bound_trials: usize,
    pub pool_size: usize,
    pub num_classes: usize,
    pub lambda_max: f64,
    pub gradient_seeds: u64,
    pub aggregation_instances: usize,
    pub seed: u64,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            bound_trials: 1000,
            pool_size: 256,
            num_classes: 3,
            lambda_max: 1.0,
            gradient_seeds: 20,
            aggregation_instances: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckItem {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct Checklist {
    pub items: Vec<CheckItem>,
}

impl Checklist {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.items.push(CheckItem {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for i in &self.items {
            let mark = if i.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "[{mark}] {}: {}", i.name, i.detail);
        }
        out
    }
}

pub fn run_checklist(s: &VerifySettings) -> Result<Checklist> {
    let mut list = Checklist::default();
    let opts = VerifyOptions {
        trials: s.bound_trials,
        pool_size: s.pool_size,
        num_classes: s.num_classes,
        lambda_max: s.lambda_max,
        seed: s.seed,
        biased_variance: false,
    };
    let report = verify_weighting_bounds(&opts)?;
    list.push(
        "weighting bounds",
        report.passed(),
        format!(
            "{} pools ({} degenerate), {} violations",
            report.trials,
            report.degenerate,
            report.violations.len()
        ),
    );
    let faulty = verify_weighting_bounds(&VerifyOptions {
        biased_variance: true,
        ..opts
    })?;
    let caught = faulty.count("variance_estimator");
    list.push(
        "biased-variance fault is detected",
        caught > 0,
        format!("{caught} of {} pools flagged", faulty.trials),
    );

    for (head, worst, failures) in gradient_suite(s.gradient_seeds)? {
        list.push(
            format!("gradient check {head}"),
            failures.is_empty(),
            format!(
                "{} seeds, max relative error {worst:.2e}, failing seeds {failures:?}",
                s.gradient_seeds
            ),
        );
    }

    let (worst, instances) = aggregation_oracle(s.aggregation_instances, s.seed)?;
    list.push(
        "aggregation oracle",
        worst <= AGGREGATION_TOLERANCE,
        format!("{instances} instances, max abs difference {worst:.2e}"),
    );
    let mismatches = momentum_identities(s.seed)?;
    list.push(
        "momentum identities for kappa 0, 0.5, 1",
        mismatches == 0,
        format!("{mismatches} mismatched entries"),
    );
    Ok(list)
}

/// Heads checked by [`gradient_suite`], in report order.
pub const GRADIENT_HEADS: [&str; 5] = ["supervised", "unsupervised", "local-contrastive", "global-contrastive", "total"];

fn tiny_model() -> ModelConfig {
    ModelConfig {
        in_channels: 1,
        length: 16,
        conv1: 3,
        conv2: 4,
        kernel: 4,
        hidden: 5,
        embed: 4,
        classes: 3,
    }
}

fn random_array(rng: &mut impl Rng, shape: &[usize], scale: f64) -> DenseArray {
    let n = shape.iter().product();
    DenseArray::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape")
}

/// Builds one head on a fresh tape through the small encoder. The batch
/// stacks 3 labeled rows, 4 weak and 4 strong unlabeled rows.
fn build_head(head: &str, seed: u64) -> Result<(Tape, NodeId)> {
    const E: usize = 3;
    const U: usize = 4;
    let cfg = tiny_model();
    let mut rng = seeds::stream(seed, Purpose::Verify, &[u64::from(u32::MAX), 1]);
    let params = model::init_params(&cfg, &mut rng);
    let x = random_array(&mut rng, &[E + 2 * U, 1, cfg.length], 1.0);
    let global = random_array(&mut rng, &[cfg.classes, cfg.embed], 1.0);
    let labels: Vec<usize> = (0..E).map(|i| i % cfg.classes).collect();
    let ema = ConfidenceEma::from_parts(0.55, 0.02, 0.999);
    let contrastive = ContrastiveConfig::default();

    let mut tape = Tape::new();
    let p = model::bind(&mut tape, &params);
    let xin = tape.input("x", x);
    let out = model::forward(&mut tape, &cfg, &p, xin)?;

    let weak = tape.rows(out.logits, E, U)?;
    let probs = DenseArray::from_rows(
        &(0..U).map(|r| model::softmax(tape.value(weak).row(r))).collect::<Vec<_>>(),
    )?;
    let (_, weights) = pseudo_labels(&probs, &ema, &WeightingConfig::default());
    // Two classes at least, so the pair selection has both kinds of rows.
    let pseudo: Vec<usize> = (0..U).map(|i| (i + seed as usize) % 2).collect();
    let temperature = contrastive.temperature(ema.std());

    let mut heads = LossHeads::default();
    let want = |h: &str| head == h || head == "total";
    if want("supervised") {
        let l = tape.rows(out.logits, 0, E)?;
        heads.supervised = Some(supervised_loss(&mut tape, l, &labels)?);
    }
    if want("unsupervised") {
        let l = tape.rows(out.logits, E + U, U)?;
        heads.unsupervised = Some(unsupervised_loss(&mut tape, l, &pseudo, &weights, U)?);
    }
    if want("local-contrastive") {
        let cw = tape.rows(out.embedding, E, U)?;
        let cs = tape.rows(out.embedding, E + U, U)?;
        heads.local_contrastive = Some(local_contrastive_loss(&mut tape, cw, cs, &pseudo, temperature, true)?);
    }
    if want("global-contrastive") {
        let mut avg = DenseArray::zeros(&[cfg.classes, E]);
        for (i, &y) in labels.iter().enumerate() {
            avg.data_mut()[y * E + i] = 1.0;
        }
        let avg = tape.constant(avg);
        let z = tape.rows(out.embedding, 0, E)?;
        let local = tape.affine(avg, z, None)?;
        let g = tape.constant(global);
        heads.global_contrastive = global_contrastive_loss(&mut tape, local, g, &[0, 1, 2], temperature)?;
    }
    let total = total_loss(&mut tape, &heads, 1.5, iota(E, E + U))?.expect("at least one head");
    Ok((tape, total))
}

/// Per head: the worst relative error over all seeds and the failing seeds.
pub fn gradient_suite(num_seeds: u64) -> Result<Vec<(&'static str, f64, Vec<u64>)>> {
    let mut out = Vec::new();
    for head in GRADIENT_HEADS {
        let mut worst = 0.0f64;
        let mut failures = Vec::new();
        for seed in 0..num_seeds {
            let (mut tape, terminal) = build_head(head, seed)?;
            let report = gradient_check(&mut tape, terminal, &[], GRADIENT_STEP, GRADIENT_TOLERANCE)?;
            worst = worst.max(report.max_rel_error());
            if !report.passed() {
                failures.push(seed);
            }
        }
        out.push((head, worst, failures));
    }
    Ok(out)
}

type ClientProtos = BTreeMap<usize, (Vec<f64>, usize)>;

fn random_clients(rng: &mut impl Rng) -> (usize, Vec<ClientProtos>) {
    let k = rng.random_range(1..=4);
    let c = rng.random_range(1..=4);
    let d = rng.random_range(1..=8);
    let clients = (0..k)
        .map(|_| {
            let mut m = ClientProtos::new();
            for class in 0..c {
                if rng.random_bool(0.7) {
                    let v = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
                    m.insert(class, (v, rng.random_range(1..=50)));
                }
            }
            if m.is_empty() {
                m.insert(0, ((0..d).map(|_| rng.random_range(-5.0..5.0)).collect(), 1));
            }
            m
        })
        .collect();
    (d, clients)
}

/// Sum of count-scaled vectors divided once by the total count.
fn brute_force_mean(clients: &[ClientProtos], class: usize, d: usize) -> Option<Vec<f64>> {
    let mut sum = vec![0.0; d];
    let mut total = 0usize;
    for c in clients {
        if let Some((v, n)) = c.get(&class) {
            for (s, x) in sum.iter_mut().zip(v) {
                *s += *n as f64 * x;
            }
            total += n;
        }
    }
    (total > 0).then(|| sum.into_iter().map(|s| s / total as f64).collect())
}

fn to_bank(d: usize, protos: &ClientProtos) -> Result<PrototypeBank> {
    let mut b = PrototypeBank::empty(d);
    for (&c, (v, n)) in protos {
        b.insert(c, v.clone(), *n)?;
    }
    Ok(b)
}

/// Worst absolute difference between aggregation and the brute-force mean
/// over random instances with at most 4 clients, 4 classes and 8 dims.
pub fn aggregation_oracle(instances: usize, seed: u64) -> Result<(f64, usize)> {
    let mut rng = seeds::stream(seed, Purpose::Verify, &[u64::from(u32::MAX), 2]);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (d, clients) = random_clients(&mut rng);
        let banks = clients.iter().map(|c| to_bank(d, c)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&PrototypeBank> = banks.iter().collect();
        let agg = aggregate_prototypes(&refs, false)?;
        for class in 0..4 {
            match (brute_force_mean(&clients, class, d), agg.get(class)) {
                (Some(want), Some(got)) => {
                    for (a, b) in want.iter().zip(&got.vector) {
                        worst = worst.max((a - b).abs());
                    }
                }
                (None, None) => {}
                _ => worst = f64::INFINITY,
            }
        }
    }
    Ok((worst, instances))
}

/// Counts entries where `momentum_update` departs from `fresh` at κ=0, from
/// `prev` at κ=1 or from the midpoint at κ=0.5, on shared classes.
pub fn momentum_identities(seed: u64) -> Result<usize> {
    let mut rng = seeds::stream(seed, Purpose::Verify, &[u64::from(u32::MAX), 3]);
    let mut mismatches = 0;
    for _ in 0..50 {
        let (d, clients) = random_clients(&mut rng);
        let prev = to_bank(d, &clients[0])?;
        let mut fresh = PrototypeBank::empty(d);
        for &c in prev.entries.keys() {
            fresh.insert(c, (0..d).map(|_| rng.random_range(-5.0..5.0)).collect(), 3)?;
        }
        for (kappa, expect) in [
            (0.0, (|_: f64, f: f64| f) as fn(f64, f64) -> f64),
            (0.5, |p, f| (p + f) / 2.0),
            (1.0, |p, _| p),
        ] {
            let out = momentum_update(&prev, &fresh, kappa)?;
            for (c, p) in &prev.entries {
                let f = fresh.get(*c).expect("shared class");
                let got = &out.get(*c).expect("class kept").vector;
                for j in 0..d {
                    if got[j] != expect(p.vector[j], f.vector[j]) {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    Ok(mismatches)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_checklist_passes() {
        let s = VerifySettings {
            bound_trials: 40,
            gradient_seeds: 2,
            aggregation_instances: 10,
            ..VerifySettings::default()
        };
        let list = run_checklist(&s).unwrap();
        assert!(list.passed(), "{}", list.render());
        assert_eq!(list.items.len(), 2 + GRADIENT_HEADS.len() + 2);
    }

    #[test]
    fn brute_force_mean_by_hand() {
        let mut a = ClientProtos::new();
        a.insert(1, (vec![1.0, 0.0], 1));
        let mut b = ClientProtos::new();
        b.insert(1, (vec![4.0, 3.0], 2));
        assert_eq!(brute_force_mean(&[a.clone(), b], 1, 2).unwrap(), vec![3.0, 2.0]);
        assert!(brute_force_mean(&[a], 0, 2).is_none());
    }

    #[test]
    fn every_head_is_nonzero() {
        for head in GRADIENT_HEADS {
            let (tape, t) = build_head(head, 0).unwrap();
            assert!(tape.value(t).item().abs() > 1e-9, "{head}");
        }
    }
}
