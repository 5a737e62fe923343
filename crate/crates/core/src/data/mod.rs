//! Synthetic multichannel signal windows, non-IID partitioning and the
//! weak/strong augmentations applied to unlabeled samples.

mod augment;
mod export;
mod partition;

pub use augment::{strong_augment, strong_augment_traced, weak_augment, StrongTrace};
pub use export::{export_dataset, import_dataset, ManifestEntry, SplitKind};
pub use partition::{dirichlet_partition, label_split, partition_and_split, ClientSplit};

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seeds::{self, Purpose};
use crate::tensor::DenseArray;

/// One window of `channels × length` samples and, for labeled data, a class.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSample {
    pub window: DenseArray,
    pub label: Option<usize>,
}

/// Spectral recipe of one class: a base tone plus amplitude-modulated
/// harmonics. Frequencies are in cycles per window.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRecipe {
    pub base_freq: f64,
    /// Amplitudes of harmonics 2, 3, ... relative to the unit base tone.
    pub harmonics: Vec<f64>,
    pub modulation_depth: f64,
    pub modulation_freq: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: Vec<ClassRecipe>,
    pub noise_std: f64,
    /// Per-window uniform jitter of the base frequency, in cycles per window.
    pub freq_jitter: f64,
    pub samples_per_class: usize,
    pub length: usize,
    pub channels: usize,
}

impl SyntheticSpec {
    /// Class 0 is a pure tone ("healthy"); every other class adds modulated
    /// harmonics on its own base frequency.
    pub fn harmonic_families(num_classes: usize, base_freq: f64, spacing: f64) -> Vec<ClassRecipe> {
        (0..num_classes)
            .map(|j| {
                let fault = j > 0;
                ClassRecipe {
                    base_freq: base_freq + spacing * j as f64,
                    harmonics: if fault { vec![0.45, 0.25] } else { Vec::new() },
                    modulation_depth: if fault { 0.5 } else { 0.0 },
                    modulation_freq: 2.0 + j as f64,
                }
            })
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::InvalidArgument("at least two classes are required".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::InvalidArgument("samples per class must be positive".into()));
        }
        if !(self.noise_std >= 0.0) || !(self.freq_jitter >= 0.0) {
            return Err(Error::InvalidArgument("noise and jitter must be non-negative".into()));
        }
        if self.length < 2 || self.channels == 0 {
            return Err(Error::InvalidArgument("window must have length >= 2 and >= 1 channel".into()));
        }
        for (i, a) in self.classes.iter().enumerate() {
            if self.classes[..i].iter().any(|b| b.base_freq == a.base_freq) {
                return Err(Error::InvalidArgument(format!(
                    "classes share base frequency {}",
                    a.base_freq
                )));
            }
        }
        Ok(())
    }
}

/// All samples of a run. Labels of every sample are stored; which of them
/// training may read is decided by the [`ClientSplit`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SignalSample>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn window(&self, idx: usize) -> &DenseArray {
        &self.samples[idx].window
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label.expect("generated samples are labeled")).collect()
    }

    pub fn label(&self, idx: usize) -> usize {
        self.samples[idx].label.expect("generated samples are labeled")
    }

    pub fn window_shape(&self) -> &[usize] {
        self.samples[0].window.shape()
    }
}

fn synthesize(recipe: &ClassRecipe, spec: &SyntheticSpec, rng: &mut impl Rng) -> DenseArray {
    let (f_ch, len) = (spec.channels, spec.length);
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite std");
    let freq = recipe.base_freq + spec.freq_jitter * rng.random_range(-1.0..=1.0);
    let amp = rng.random_range(0.8..=1.2);
    let mut data = Vec::with_capacity(f_ch * len);
    for _ in 0..f_ch {
        let phase = rng.random_range(0.0..2.0 * PI);
        let harm_phase: Vec<f64> = recipe.harmonics.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let mod_phase = rng.random_range(0.0..2.0 * PI);
        for t in 0..len {
            let x = t as f64 / len as f64;
            let envelope = 1.0 + recipe.modulation_depth * (2.0 * PI * recipe.modulation_freq * x + mod_phase).sin();
            let mut v = (2.0 * PI * freq * x + phase).sin();
            for (h, (&a, &ph)) in recipe.harmonics.iter().zip(&harm_phase).enumerate() {
                v += a * envelope * (2.0 * PI * (h + 2) as f64 * freq * x + ph).sin();
            }
            let n = if spec.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            data.push(amp * v + n);
        }
    }
    DenseArray::new(vec![f_ch, len], data).expect("window shape")
}

/// Generates `samples_per_class` windows for every class, class-major.
pub fn generate_dataset(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(spec.num_classes() * spec.samples_per_class);
    for (j, recipe) in spec.classes.iter().enumerate() {
        let mut rng = seeds::stream(seed, Purpose::Dataset, &[j as u64]);
        for _ in 0..spec.samples_per_class {
            samples.push(SignalSample {
                window: synthesize(recipe, spec, &mut rng),
                label: Some(j),
            });
        }
    }
    Ok(Dataset {
        samples,
        num_classes: spec.num_classes(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            classes: SyntheticSpec::harmonic_families(3, 12.0, 5.0),
            noise_std: noise,
            freq_jitter: 0.0,
            samples_per_class: 100,
            length: 256,
            channels: 1,
        }
    }

    /// Plain O(n²) DFT magnitude, independent of the generator.
    fn dft_peak(x: &[f64]) -> usize {
        let n = x.len();
        (1..n / 2)
            .max_by(|&a, &b| {
                let mag = |k: usize| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (t, v) in x.iter().enumerate() {
                        let ang = -2.0 * PI * (k * t) as f64 / n as f64;
                        re += v * ang.cos();
                        im += v * ang.sin();
                    }
                    re * re + im * im
                };
                mag(a).total_cmp(&mag(b))
            })
            .unwrap()
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = generate_dataset(&spec(0.0), 5).unwrap();
        let b = generate_dataset(&spec(0.0), 5).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&spec(0.3), 5).unwrap();
        let d = generate_dataset(&spec(0.3), 5).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn class_balanced_counts() {
        let d = generate_dataset(&spec(0.1), 1).unwrap();
        assert_eq!(d.len(), 300);
        for j in 0..3 {
            assert_eq!(d.labels().iter().filter(|&&l| l == j).count(), 100);
        }
    }

    #[test]
    fn noiseless_spectral_peak_at_base_frequency() {
        let s = spec(0.0);
        let d = generate_dataset(&s, 9).unwrap();
        for (i, sample) in d.samples.iter().enumerate().step_by(17) {
            let j = sample.label.unwrap();
            assert_eq!(dft_peak(sample.window.data()) as f64, s.classes[j].base_freq, "sample {i}");
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = spec(0.0);
        s.samples_per_class = 0;
        assert!(generate_dataset(&s, 0).is_err());
        let mut s = spec(0.0);
        s.classes.truncate(1);
        assert!(generate_dataset(&s, 0).is_err());
        let mut s = spec(0.0);
        s.classes[1].base_freq = s.classes[0].base_freq;
        assert!(generate_dataset(&s, 0).is_err());
    }
}
