//! Uplink size of one prototype message against one full parameter snapshot.

use std::fmt::Write as _;

use serde::Serialize;
use ssfl_core::federation::{PrototypeBank, RoundMessage, RunConfig};
use ssfl_core::model::{self, ModelConfig};
use ssfl_core::seeds::{self, Purpose};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PayloadRow {
    pub label: String,
    pub classes: usize,
    pub embed: usize,
    pub param_count: usize,
    pub prototype_bytes: usize,
    pub model_bytes: usize,
    pub ratio: f64,
}

/// The large-model preset: 8-wide kernels, 64 and 256 conv channels, a
/// 128-wide projection into 64 dimensions, 10 classes over 1024 samples.
pub fn large_scale_model() -> ModelConfig {
    ModelConfig {
        in_channels: 1,
        length: 1024,
        conv1: 64,
        conv2: 256,
        kernel: 8,
        hidden: 128,
        embed: 64,
        classes: 10,
    }
}

/// Serializes a message carrying every class and an initialized snapshot.
pub fn measure(label: &str, model_cfg: &ModelConfig) -> Result<PayloadRow> {
    model_cfg.validate()?;
    let mut bank = PrototypeBank::empty(model_cfg.embed);
    for c in 0..model_cfg.classes {
        bank.insert(c, vec![1.0; model_cfg.embed], 1)?;
    }
    let prototype_bytes = RoundMessage { client: 0, round: 1, bank }.to_bytes().len();
    let params = model::init_params(model_cfg, &mut seeds::stream(0, Purpose::Init, &[]));
    let model_bytes = params.to_bytes().len();
    Ok(PayloadRow {
        label: label.to_string(),
        classes: model_cfg.classes,
        embed: model_cfg.embed,
        param_count: model_cfg.param_count(),
        prototype_bytes,
        model_bytes,
        ratio: prototype_bytes as f64 / model_bytes as f64,
    })
}

/// The configured model followed by the large preset.
pub fn report(run: &RunConfig) -> Result<Vec<PayloadRow>> {
    Ok(vec![measure("configured", &run.model_config())?, measure("large-scale", &large_scale_model())?])
}

pub fn render(rows: &[PayloadRow]) -> String {
    let mut out = String::from("model,classes,embed,params,prototype_bytes,model_bytes,ratio\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.6}",
            r.label, r.classes, r.embed, r.param_count, r.prototype_bytes, r.model_bytes, r.ratio
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn message_size_ignores_encoder_width() {
        let small = ModelConfig {
            length: 128,
            conv1: 8,
            conv2: 16,
            ..ModelConfig::default()
        };
        let wide = ModelConfig {
            conv1: 64,
            conv2: 128,
            ..small
        };
        let a = measure("a", &small).unwrap();
        let b = measure("b", &wide).unwrap();
        assert_eq!(a.prototype_bytes, b.prototype_bytes);
        assert_eq!(a.prototype_bytes, 16 + small.classes * (small.embed + 2) * 8);
        assert!(b.model_bytes > a.model_bytes);
    }

    #[test]
    fn large_preset_is_under_one_percent() {
        let r = measure("large", &large_scale_model()).unwrap();
        assert!(r.ratio < 0.01, "{r:?}");
    }
}
