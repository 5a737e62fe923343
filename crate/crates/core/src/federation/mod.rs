//! Clients, server and the round loop of the semi-supervised federation,
//! together with the two baselines and straggler simulation.

mod client;
mod prototypes;
mod server;

pub use client::{evaluate, fine_tune, local_train_round, ClientState, Evaluation, RoundContext, RoundOutput};
pub use prototypes::{
    aggregate_prototypes, compute_local_prototypes, momentum_update, norm, Prototype, PrototypeBank, RoundMessage,
    MIN_NORM,
};
pub use server::{run_training, run_with_data, RoundRecord, RunArtifact, Timing, METRICS_HEADER};

use crate::data::{ClassRecipe, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::ContrastiveConfig;
use crate::model::{AdamConfig, ModelConfig};
use crate::weighting::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Weighted pseudo-labels, dual contrastive losses, prototype exchange.
    Ssfl,
    /// Labeled data only, full-model averaging.
    FedAvgSupervised,
    /// Thresholded pseudo-labels, full-model averaging.
    FixMatch,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ssfl => "ssfl-dcsl",
            Method::FedAvgSupervised => "fedavg-supervised",
            Method::FixMatch => "fixmatch-threshold",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ssfl-dcsl" => Ok(Method::Ssfl),
            "fedavg-supervised" => Ok(Method::FedAvgSupervised),
            "fixmatch-threshold" => Ok(Method::FixMatch),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (expected ssfl-dcsl, fedavg-supervised or fixmatch-threshold)"
            ))),
        }
    }

    /// Whether the server averages full models instead of prototypes.
    pub fn shares_model(self) -> bool {
        !matches!(self, Method::Ssfl)
    }
}

/// Component switches of the main method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    /// Truncated-Laplace weights; off means every pseudo-label has weight 1.
    pub tlaw: bool,
    pub lcl: bool,
    pub gcl: bool,
    /// Pseudo-label pair selection; off means only `j = i` is positive.
    pub spnp: bool,
    /// Confidence-dependent temperature; off means `τ`.
    pub dt: bool,
    /// Divide aggregated prototypes by the number of contributing clients.
    pub literal_aggregation: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        tlaw: true,
        lcl: true,
        gcl: true,
        spnp: true,
        dt: true,
        literal_aggregation: false,
    };

    /// Components added one at a time, from pseudo-label training with
    /// prototype exchange only up to the full method.
    pub fn ladder() -> [(&'static str, Ablation); 6] {
        let pta = Ablation {
            tlaw: false,
            lcl: false,
            gcl: false,
            spnp: false,
            dt: false,
            literal_aggregation: false,
        };
        let lcl = Ablation { lcl: true, ..pta };
        let gcl = Ablation { gcl: true, ..lcl };
        let tlaw = Ablation { tlaw: true, ..gcl };
        let spnp = Ablation { spnp: true, ..tlaw };
        let dt = Ablation { dt: true, ..spnp };
        [
            ("PTA", pta),
            ("PTA+LCL", lcl),
            ("PTA+GCL+LCL", gcl),
            ("PTA+GCL+TLAW+LCL", tlaw),
            ("PTA+GCL+TLAW+LCL+SPNP", spnp),
            ("PTA+GCL+TLAW+LCL+SPNP+DT", dt),
        ]
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub length: usize,
    pub channels: usize,
    pub noise_std: f64,
    pub freq_jitter: f64,
    /// Base frequency of class 0 in cycles per window.
    pub base_freq: f64,
    /// Base frequency step between consecutive classes.
    pub freq_spacing: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            samples_per_class: 300,
            length: 256,
            channels: 1,
            noise_std: 1.0,
            freq_jitter: 2.0,
            base_freq: 10.0,
            freq_spacing: 3.0,
        }
    }
}

impl DataConfig {
    pub fn spec(&self) -> SyntheticSpec {
        let classes: Vec<ClassRecipe> = SyntheticSpec::harmonic_families(self.classes, self.base_freq, self.freq_spacing);
        SyntheticSpec {
            classes,
            noise_std: self.noise_std,
            freq_jitter: self.freq_jitter,
            samples_per_class: self.samples_per_class,
            length: self.length,
            channels: self.channels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub weak_jitter: f64,
    pub weak_scale: (f64, f64),
    pub strong_segments: usize,
    pub strong_jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            weak_jitter: 0.05,
            weak_scale: (0.9, 1.1),
            strong_segments: 8,
            strong_jitter: 0.05,
        }
    }
}

/// Everything one training run needs besides its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub clients: usize,
    pub concentration: f64,
    pub label_rate: f64,
    pub rounds: usize,
    pub stragglers: usize,
    pub min_per_client: usize,
    pub eta_final: f64,
    pub t1_frac: f64,
    pub t2_frac: f64,
    pub kappa: f64,
    pub ema_momentum: f64,
    pub lambda_max: f64,
    pub contrastive: ContrastiveConfig,
    pub threshold: f64,
    pub augment: AugmentConfig,
    /// Architecture; input channels, length and classes follow `data`.
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub fine_tune_epochs: usize,
    pub method: Method,
    pub ablation: Ablation,
    /// Train the clients of a round on the rayon pool.
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            clients: 5,
            concentration: 0.5,
            label_rate: 0.1,
            rounds: 60,
            stragglers: 0,
            min_per_client: 10,
            eta_final: 3.0,
            t1_frac: 0.3,
            t2_frac: 0.7,
            kappa: 0.9,
            ema_momentum: 0.999,
            lambda_max: 1.0,
            contrastive: ContrastiveConfig::default(),
            threshold: 0.95,
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            batch_size: 16,
            fine_tune_epochs: 5,
            method: Method::Ssfl,
            ablation: Ablation::FULL,
            parallel: false,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl RunConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            total_rounds: self.rounds,
            eta_final: self.eta_final,
            t1_frac: self.t1_frac,
            t2_frac: self.t2_frac,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            in_channels: self.data.channels,
            length: self.data.length,
            classes: self.data.classes,
            ..self.model
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        check(d.classes >= 2, || format!("classes must be >= 2, got {}", d.classes))?;
        check(d.samples_per_class >= 1, || "samples_per_class must be >= 1".into())?;
        check(d.noise_std >= 0.0, || format!("noise_std must be >= 0, got {}", d.noise_std))?;
        check(d.freq_jitter >= 0.0, || format!("freq_jitter must be >= 0, got {}", d.freq_jitter))?;
        check(d.freq_spacing > 0.0 && d.base_freq > 0.0, || "base_freq and freq_spacing must be > 0".into())?;
        check(self.clients >= 1, || "clients must be >= 1".into())?;
        check(self.concentration > 0.0, || format!("concentration must be > 0, got {}", self.concentration))?;
        check(self.label_rate > 0.0 && self.label_rate <= 1.0, || {
            format!("label_rate must be in (0, 1], got {}", self.label_rate)
        })?;
        check(self.rounds >= 1, || "rounds must be >= 1".into())?;
        check(self.stragglers < self.clients, || {
            format!("stragglers must be < clients ({}), got {}", self.clients, self.stragglers)
        })?;
        check(self.eta_final >= 0.0, || "eta_final must be >= 0".into())?;
        check(0.0 <= self.t1_frac && self.t1_frac < self.t2_frac && self.t2_frac <= 1.0, || {
            format!("need 0 <= t1 < t2 <= 1, got t1={} t2={}", self.t1_frac, self.t2_frac)
        })?;
        check((0.0..1.0).contains(&self.kappa), || format!("kappa must be in [0, 1), got {}", self.kappa))?;
        check((0.0..1.0).contains(&self.ema_momentum), || {
            format!("ema_momentum must be in [0, 1), got {}", self.ema_momentum)
        })?;
        check(self.lambda_max > 0.0, || "lambda_max must be > 0".into())?;
        check(self.contrastive.tau > 0.0, || "tau must be > 0".into())?;
        check(self.contrastive.alpha >= 0.0, || "alpha must be >= 0".into())?;
        check(self.threshold >= 0.0, || "threshold must be >= 0".into())?;
        let a = &self.augment;
        check(a.weak_jitter >= 0.0 && a.strong_jitter >= 0.0, || "jitter must be >= 0".into())?;
        check(0.0 < a.weak_scale.0 && a.weak_scale.0 <= a.weak_scale.1, || {
            format!("weak scale range must satisfy 0 < lo <= hi, got {:?}", a.weak_scale)
        })?;
        check(a.strong_segments >= 1 && a.strong_segments <= d.length, || {
            format!("strong_segments must be in [1, length], got {}", a.strong_segments)
        })?;
        check(self.adam.lr > 0.0, || "learning rate must be > 0".into())?;
        check((0.0..1.0).contains(&self.adam.beta1) && (0.0..1.0).contains(&self.adam.beta2), || {
            "betas must be in [0, 1)".into()
        })?;
        check(self.batch_size >= 2, || "batch_size must be >= 2".into())?;
        self.model_config().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
        let bad = RunConfig {
            kappa: 1.5,
            ..RunConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("kappa"));
    }

    #[test]
    fn ladder_adds_one_component_per_step() {
        let l = Ablation::ladder();
        assert_eq!(l.len(), 6);
        assert_eq!(l[5].1, Ablation::FULL);
        let flags = |a: &Ablation| [a.tlaw, a.lcl, a.gcl, a.spnp, a.dt].iter().filter(|&&f| f).count();
        for w in l.windows(2) {
            assert_eq!(flags(&w[1].1), flags(&w[0].1) + 1);
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Ssfl, Method::FedAvgSupervised, Method::FixMatch] {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(Method::parse("fedprox").is_err());
    }
}
