//! 1-D convolutional encoder with projection head and linear classifier,
//! plus the Adam optimizer.
//!
//! ```text
//! x [n, F, L] → conv(k) → relu → maxpool(2) → conv(k) → relu → maxpool(2)
//!   → global mean pool → h [n, c2] → affine → relu → affine → embedding [n, d]
//!   → classifier → logits [n, C]
//! ```

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::snapshot::Snapshot;
use crate::tape::{NodeId, Tape};
use crate::tensor::DenseArray;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub length: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub embed: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            length: 256,
            conv1: 16,
            conv2: 32,
            kernel: 8,
            hidden: 64,
            embed: 32,
            classes: 3,
        }
    }
}

const POOL: usize = 2;

impl ModelConfig {
    /// Zero padding on each side; keeps the conv output one shorter than its
    /// input for the default even kernel.
    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    fn conv_len(&self, len: usize) -> Option<usize> {
        (len + 2 * self.padding()).checked_sub(self.kernel).map(|v| v + 1)
    }

    /// Time steps left after both conv/pool stages.
    pub fn feature_len(&self) -> Option<usize> {
        let l1 = self.conv_len(self.length)? / POOL;
        if l1 == 0 {
            return None;
        }
        let l2 = self.conv_len(l1)? / POOL;
        (l2 > 0).then_some(l2)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.in_channels,
            self.length,
            self.conv1,
            self.conv2,
            self.kernel,
            self.hidden,
            self.embed,
        ];
        if dims.contains(&0) || self.classes < 2 {
            return Err(Error::Config("model dimensions must be positive and classes >= 2".into()));
        }
        if self.feature_len().is_none() {
            return Err(Error::Config(format!(
                "window length {} too short for kernel {} and two pooling stages",
                self.length, self.kernel
            )));
        }
        Ok(())
    }

    /// Parameter names, shapes and fan-in, in binding order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>, usize)> {
        let k = self.kernel;
        vec![
            ("conv1.w", vec![self.conv1, self.in_channels, k], self.in_channels * k),
            ("conv1.b", vec![self.conv1], 0),
            ("conv2.w", vec![self.conv2, self.conv1, k], self.conv1 * k),
            ("conv2.b", vec![self.conv2], 0),
            ("proj1.w", vec![self.conv2, self.hidden], self.conv2),
            ("proj1.b", vec![self.hidden], 0),
            ("proj2.w", vec![self.hidden, self.embed], self.hidden),
            ("proj2.b", vec![self.embed], 0),
            ("cls.w", vec![self.embed, self.classes], self.embed),
            ("cls.b", vec![self.classes], 0),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }
}

/// He-normal weights, zero biases.
pub fn init_params(cfg: &ModelConfig, rng: &mut impl Rng) -> Snapshot {
    let entries = cfg
        .param_shapes()
        .into_iter()
        .map(|(name, shape, fan_in)| {
            let n = shape.iter().product();
            let data = if fan_in == 0 {
                vec![0.0; n]
            } else {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                (0..n).map(|_| normal.sample(rng)).collect()
            };
            (name.to_string(), DenseArray::new(shape, data).expect("shape from config"))
        })
        .collect();
    Snapshot::new(entries)
}

/// Records every parameter of `params` on `tape`, in snapshot order.
pub fn bind(tape: &mut Tape, params: &Snapshot) -> Vec<NodeId> {
    params.entries.iter().map(|(n, a)| tape.param(n, a.clone())).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    pub embedding: NodeId,
    pub logits: NodeId,
}

pub fn forward(tape: &mut Tape, cfg: &ModelConfig, p: &[NodeId], x: NodeId) -> Result<Outputs> {
    let pad = cfg.padding();
    let h = tape.conv1d(x, p[0], p[1], 1, pad)?;
    let h = tape.relu(h)?;
    let h = tape.max_pool1d(h, POOL)?;
    let h = tape.conv1d(h, p[2], p[3], 1, pad)?;
    let h = tape.relu(h)?;
    let h = tape.max_pool1d(h, POOL)?;
    let h = tape.global_mean_pool(h)?;
    let z = tape.affine(h, p[4], Some(p[5]))?;
    let z = tape.relu(z)?;
    let embedding = tape.affine(z, p[6], Some(p[7]))?;
    let logits = tape.affine(embedding, p[8], Some(p[9]))?;
    Ok(Outputs { embedding, logits })
}

/// Stacks windows into one `[n, F, L]` batch.
pub fn stack_windows(windows: &[&DenseArray]) -> Result<DenseArray> {
    DenseArray::stack(windows)
}

/// Value-only forward pass: embeddings `[n, d]` and softmax probabilities
/// `[n, C]`, computed in chunks.
pub fn predict(cfg: &ModelConfig, params: &Snapshot, windows: &[&DenseArray]) -> Result<(DenseArray, DenseArray)> {
    const CHUNK: usize = 64;
    let mut emb = Vec::with_capacity(windows.len() * cfg.embed);
    let mut probs = Vec::with_capacity(windows.len() * cfg.classes);
    for chunk in windows.chunks(CHUNK) {
        let mut tape = Tape::new();
        let p = bind(&mut tape, params);
        let x = tape.constant(stack_windows(chunk)?);
        let out = forward(&mut tape, cfg, &p, x)?;
        emb.extend_from_slice(tape.value(out.embedding).data());
        for row in tape.value(out.logits).data().chunks(cfg.classes) {
            probs.extend(softmax(row));
        }
    }
    let n = windows.len();
    Ok((
        DenseArray::new(vec![n, cfg.embed], emb)?,
        DenseArray::new(vec![n, cfg.classes], probs)?,
    ))
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment buffers for one parameter snapshot.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &Snapshot) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries.iter().map(|(_, a)| vec![0.0; a.len()]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of `params` with `grads` given in the same order.
    pub fn step(&mut self, params: &mut Snapshot, grads: &[&DenseArray]) {
        assert_eq!(grads.len(), params.entries.len(), "one gradient per parameter");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (k, ((_, p), g)) in params.entries.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gv;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gv * gv;
                *pv -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradient_check;
    use crate::losses::supervised_loss;
    use crate::seeds::{stream, Purpose};

    fn tiny() -> ModelConfig {
        ModelConfig {
            in_channels: 2,
            length: 24,
            conv1: 3,
            conv2: 4,
            kernel: 4,
            hidden: 5,
            embed: 3,
            classes: 3,
        }
    }

    #[test]
    fn shapes_and_counts() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.feature_len(), Some(63));
        let expected = 16 * 8 + 16 + 32 * 16 * 8 + 32 + 32 * 64 + 64 + 64 * 32 + 32 + 32 * 3 + 3;
        assert_eq!(cfg.param_count(), expected);
        let p = init_params(&cfg, &mut stream(0, Purpose::Init, &[]));
        assert_eq!(p.scalar_count(), expected);

        let mut rng = stream(1, Purpose::Init, &[]);
        let w: Vec<DenseArray> = (0..5)
            .map(|_| DenseArray::new(vec![1, 256], (0..256).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let refs: Vec<&DenseArray> = w.iter().collect();
        let (e, pr) = predict(&cfg, &p, &refs).unwrap();
        assert_eq!(e.shape(), &[5, 32]);
        assert_eq!(pr.shape(), &[5, 3]);
        for i in 0..5 {
            assert!((pr.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_short_windows() {
        let cfg = ModelConfig {
            length: 5,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn he_init_scale() {
        let cfg = ModelConfig {
            conv2: 64,
            hidden: 256,
            ..ModelConfig::default()
        };
        let p = init_params(&cfg, &mut stream(2, Purpose::Init, &[]));
        let w = p.get("proj1.w").unwrap().data();
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var - 2.0 / 64.0).abs() < 0.1 * 2.0 / 64.0, "{var}");
        assert!(p.get("proj1.b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        let cfg = tiny();
        let params = init_params(&cfg, &mut stream(3, Purpose::Init, &[]));
        let mut rng = stream(3, Purpose::Dataset, &[]);
        let x = DenseArray::new(vec![3, 2, 24], (0..144).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut t = Tape::new();
        let p = bind(&mut t, &params);
        let xi = t.input("x", x);
        let out = forward(&mut t, &cfg, &p, xi).unwrap();
        let l = supervised_loss(&mut t, out.logits, &[0, 2, 1]).unwrap();
        let e = t.sum(out.embedding).unwrap();
        let e = t.scale(e, 0.1).unwrap();
        let total = t.add(l, e).unwrap();
        let r = gradient_check(&mut t, total, &[], 1e-6, 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.params.iter().all(|c| c.checked > 0));
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut p = Snapshot::new(vec![("w".into(), DenseArray::vector(vec![1.0, -2.0, 0.5]).unwrap())]);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let g = DenseArray::vector(vec![0.3, -4.0, 0.0]).unwrap();
        opt.step(&mut p, &[&g]);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-2.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(w[2], 0.5);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = Snapshot::new(vec![("w".into(), DenseArray::vector(vec![3.0, -1.0]).unwrap())]);
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, &p);
        for _ in 0..2000 {
            let g: Vec<f64> = p.get("w").unwrap().data().iter().map(|v| 2.0 * v).collect();
            let g = DenseArray::vector(g).unwrap();
            opt.step(&mut p, &[&g]);
        }
        assert!(p.get("w").unwrap().data().iter().all(|v| v.abs() < 1e-3));
    }
}
