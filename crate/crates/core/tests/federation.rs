//! Short end-to-end runs on a small configuration.

use ssfl_core::federation::{run_training, Method, RoundMessage, RunConfig, METRICS_HEADER};
use ssfl_core::model::ModelConfig;

fn small(method: Method) -> RunConfig {
    let mut cfg = RunConfig {
        method,
        clients: 3,
        rounds: 4,
        fine_tune_epochs: 1,
        min_per_client: 10,
        model: ModelConfig {
            conv1: 4,
            conv2: 8,
            hidden: 16,
            embed: 8,
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    };
    cfg.data.samples_per_class = 40;
    cfg.data.length = 64;
    cfg
}

#[test]
fn ssfl_run_records_every_client_and_round() {
    let cfg = small(Method::Ssfl);
    let art = run_training(&cfg, 3).unwrap();
    assert_eq!(art.records.len(), cfg.rounds * cfg.clients);
    assert_eq!(art.evaluations.len(), cfg.clients);
    let max_msg = 16 + cfg.data.classes * (cfg.model.embed + 2) * 8;
    for r in &art.records {
        assert!(r.uplink_bytes >= 16 && r.uplink_bytes <= max_msg, "{}", r.uplink_bytes);
        assert_eq!((r.uplink_bytes - 16) % ((cfg.model.embed + 2) * 8), 0);
        assert!(r.output.losses.total.is_finite());
    }
    assert!(art.uplink_bytes < art.model_bytes * art.records.len());
    assert!(!art.global_bank.is_empty());
    for p in art.global_bank.entries.values() {
        assert!(p.vector.iter().all(|v| v.is_finite()));
    }
    let csv = art.metrics_csv();
    assert_eq!(csv.lines().next().unwrap(), METRICS_HEADER);
    assert_eq!(csv.lines().count(), art.records.len() + 1);
}

#[test]
fn baselines_send_full_models() {
    for m in [Method::FedAvgSupervised, Method::FixMatch] {
        let art = run_training(&small(m), 1).unwrap();
        assert!(art.records.iter().all(|r| r.uplink_bytes == art.model_bytes));
        // Every client ends on the broadcast average.
        assert!(art.params.windows(2).all(|w| w[0] == w[1]));
        assert!(art.global_bank.is_empty());
    }
}

#[test]
fn stragglers_skip_whole_rounds() {
    let cfg = RunConfig {
        stragglers: 1,
        ..small(Method::Ssfl)
    };
    let art = run_training(&cfg, 5).unwrap();
    for round in 1..=cfg.rounds {
        let mut ids: Vec<usize> = art.records.iter().filter(|r| r.round == round).map(|r| r.client).collect();
        ids.dedup();
        assert_eq!(ids.len(), cfg.clients - 1);
    }
    let too_many = RunConfig {
        stragglers: 3,
        ..small(Method::Ssfl)
    };
    assert!(run_training(&too_many, 5).is_err());
}

#[test]
fn runs_are_reproducible() {
    let cfg = small(Method::Ssfl);
    let a = run_training(&cfg, 11).unwrap();
    let b = run_training(&RunConfig { parallel: true, ..cfg.clone() }, 11).unwrap();
    let c = run_training(&cfg, 12).unwrap();
    assert_eq!(a.metrics_csv(), b.metrics_csv());
    assert_eq!(a.params, b.params);
    assert_ne!(a.metrics_csv(), c.metrics_csv());
}

#[test]
fn message_matches_bank_layout() {
    let art = run_training(&small(Method::Ssfl), 2).unwrap();
    let msg = RoundMessage {
        client: 0,
        round: art.global_bank.round,
        bank: art.global_bank.clone(),
    };
    assert_eq!(RoundMessage::from_bytes(&msg.to_bytes()).unwrap(), msg);
}
