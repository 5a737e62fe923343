//! Plain-text run configuration.
//!
//! ```text
//! # comment
//! [federation]
//! clients = 5
//! chi = 0.10
//! ```
//!
//! Every key belongs to exactly one section. Unknown keys, keys outside
//! their section and out-of-range values are rejected. Omitted keys keep
//! their defaults, so an empty file yields the default setup.

use std::fmt::Write as _;
use std::path::Path;

use ssfl_core::federation::{Method, RunConfig};

use crate::error::{HarnessError, Result};

/// A run configuration plus the trial seeds it is repeated over.
#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    pub run: RunConfig,
    pub seeds: Vec<u64>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            run: RunConfig {
                parallel: true,
                ..RunConfig::default()
            },
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

type Getter = fn(&HarnessConfig) -> String;
type Setter = fn(&mut HarnessConfig, &str) -> std::result::Result<(), String>;

struct Field {
    section: &'static str,
    key: &'static str,
    get: Getter,
    set: Setter,
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(format!("expected true/false, got `{v}`")),
    }
}

macro_rules! field {
    ($section:literal, $key:literal, |$c:ident| $path:expr, $parse:expr) => {
        Field {
            section: $section,
            key: $key,
            get: |$c| $path.to_string(),
            set: |$c, v| {
                $path = $parse(v)?;
                Ok(())
            },
        }
    };
}

fn fields() -> Vec<Field> {
    vec![
        field!("data", "classes", |c| c.run.data.classes, num),
        field!("data", "samples_per_class", |c| c.run.data.samples_per_class, num),
        field!("data", "length", |c| c.run.data.length, num),
        field!("data", "channels", |c| c.run.data.channels, num),
        field!("data", "noise_std", |c| c.run.data.noise_std, num),
        field!("data", "freq_jitter", |c| c.run.data.freq_jitter, num),
        field!("data", "base_freq", |c| c.run.data.base_freq, num),
        field!("data", "freq_spacing", |c| c.run.data.freq_spacing, num),
        field!("federation", "clients", |c| c.run.clients, num),
        field!("federation", "nu", |c| c.run.concentration, num),
        field!("federation", "chi", |c| c.run.label_rate, num),
        field!("federation", "rounds", |c| c.run.rounds, num),
        field!("federation", "stragglers", |c| c.run.stragglers, num),
        field!("federation", "min_per_client", |c| c.run.min_per_client, num),
        field!("federation", "kappa", |c| c.run.kappa, num),
        field!("schedule", "eta_final", |c| c.run.eta_final, num),
        field!("schedule", "t1", |c| c.run.t1_frac, num),
        field!("schedule", "t2", |c| c.run.t2_frac, num),
        field!("weighting", "ema_momentum", |c| c.run.ema_momentum, num),
        field!("weighting", "lambda_max", |c| c.run.lambda_max, num),
        field!("weighting", "threshold", |c| c.run.threshold, num),
        field!("contrastive", "tau", |c| c.run.contrastive.tau, num),
        field!("contrastive", "alpha", |c| c.run.contrastive.alpha, num),
        field!("augment", "weak_jitter", |c| c.run.augment.weak_jitter, num),
        field!("augment", "weak_scale_lo", |c| c.run.augment.weak_scale.0, num),
        field!("augment", "weak_scale_hi", |c| c.run.augment.weak_scale.1, num),
        field!("augment", "strong_segments", |c| c.run.augment.strong_segments, num),
        field!("augment", "strong_jitter", |c| c.run.augment.strong_jitter, num),
        field!("model", "conv1", |c| c.run.model.conv1, num),
        field!("model", "conv2", |c| c.run.model.conv2, num),
        field!("model", "kernel", |c| c.run.model.kernel, num),
        field!("model", "hidden", |c| c.run.model.hidden, num),
        field!("model", "embed", |c| c.run.model.embed, num),
        field!("optimizer", "lr", |c| c.run.adam.lr, num),
        field!("optimizer", "beta1", |c| c.run.adam.beta1, num),
        field!("optimizer", "beta2", |c| c.run.adam.beta2, num),
        field!("optimizer", "batch_size", |c| c.run.batch_size, num),
        field!("optimizer", "fine_tune_epochs", |c| c.run.fine_tune_epochs, num),
        Field {
            section: "run",
            key: "method",
            get: |c| c.run.method.name().to_string(),
            set: |c, v| {
                c.run.method = Method::parse(v).map_err(|e| e.to_string())?;
                Ok(())
            },
        },
        Field {
            section: "run",
            key: "seeds",
            get: |c| c.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            set: |c, v| {
                c.seeds = v.split(',').map(|s| num(s.trim())).collect::<std::result::Result<_, _>>()?;
                Ok(())
            },
        },
        field!("run", "parallel", |c| c.run.parallel, flag),
        field!("ablation", "tlaw", |c| c.run.ablation.tlaw, flag),
        field!("ablation", "lcl", |c| c.run.ablation.lcl, flag),
        field!("ablation", "gcl", |c| c.run.ablation.gcl, flag),
        field!("ablation", "spnp", |c| c.run.ablation.spnp, flag),
        field!("ablation", "dt", |c| c.run.ablation.dt, flag),
        field!("ablation", "literal_aggregation", |c| c.run.ablation.literal_aggregation, flag),
    ]
}

impl HarnessConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let fields = fields();
        let mut cfg = HarnessConfig::default();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let err = |msg: String| HarnessError::Config { line: line_no, msg };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !fields.iter().any(|f| f.section == name) {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected key = value, got `{line}`")))?;
            let field = fields
                .iter()
                .find(|f| f.key == key)
                .ok_or_else(|| err(format!("unknown key `{key}`")))?;
            match section.as_deref() {
                Some(s) if s == field.section => {}
                _ => return Err(err(format!("key `{key}` belongs in section [{}]", field.section))),
            }
            (field.set)(&mut cfg, value).map_err(|m| err(format!("{key}: {m}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Invalid("at least one seed is required".into()));
        }
        self.run.validate()?;
        Ok(())
    }

    /// Every key with its effective value; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for f in fields() {
            if f.section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{}]", f.section);
                current = f.section;
            }
            let _ = writeln!(out, "{} = {}", f.key, (f.get)(self));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(HarnessConfig::parse("").unwrap(), HarnessConfig::default());
        assert_eq!(HarnessConfig::parse("# nothing\n\n").unwrap(), HarnessConfig::default());
    }

    #[test]
    fn label_rate_parses() {
        let c = HarnessConfig::parse("[federation]\nchi=0.10\n").unwrap();
        assert_eq!(c.run.label_rate, 0.10);
    }

    #[test]
    fn out_of_range_kappa_is_rejected() {
        let e = HarnessConfig::parse("[federation]\nkappa=1.5").unwrap_err().to_string();
        assert!(e.contains("kappa"), "{e}");
    }

    #[test]
    fn unknown_or_misplaced_keys_are_rejected() {
        assert!(HarnessConfig::parse("[federation]\nclientz = 3").is_err());
        assert!(HarnessConfig::parse("clients = 3").is_err());
        assert!(HarnessConfig::parse("[data]\nclients = 3").is_err());
        assert!(HarnessConfig::parse("[nope]").is_err());
        assert!(HarnessConfig::parse("[federation]\nclients = three").is_err());
        let e = HarnessConfig::parse("[run]\nseeds = 1\nmethod = fedprox").unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");
    }

    #[test]
    fn echo_round_trips() {
        let text = "[data]\nnoise_std = 0.25\n[run]\nmethod = fixmatch-threshold\nseeds = 7, 9\n[ablation]\ndt = off\n";
        let c = HarnessConfig::parse(text).unwrap();
        assert_eq!(c.seeds, vec![7, 9]);
        assert!(!c.run.ablation.dt);
        assert_eq!(HarnessConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(HarnessConfig::parse(&HarnessConfig::default().to_text()).unwrap(), HarnessConfig::default());
    }
}
