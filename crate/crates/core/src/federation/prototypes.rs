//! Class prototypes: per-client means, server aggregation and the momentum
//! update of the global bank.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::snapshot::Snapshot;
use crate::tensor::DenseArray;

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub vector: Vec<f64>,
    /// Samples behind the vector; always positive.
    pub count: usize,
}

/// Class id → prototype, for one dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub dim: usize,
    pub round: usize,
    pub entries: BTreeMap<usize, Prototype>,
}

impl PrototypeBank {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            round: 0,
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<&Prototype> {
        self.entries.get(&class)
    }

    pub fn insert(&mut self, class: usize, vector: Vec<f64>, count: usize) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "prototype of class {class} has dimension {}, bank has {}",
                vector.len(),
                self.dim
            )));
        }
        if count == 0 || vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("class {class} needs a positive count and a finite vector")));
        }
        self.entries.insert(class, Prototype { vector, count });
        Ok(())
    }

    /// Classes whose vectors are all rows of the returned `[n, dim]` matrix,
    /// skipping vectors too short to normalize.
    pub fn matrix(&self) -> Option<(Vec<usize>, DenseArray)> {
        let (classes, rows): (Vec<usize>, Vec<Vec<f64>>) = self
            .entries
            .iter()
            .filter(|(_, p)| norm(&p.vector) > MIN_NORM)
            .map(|(&c, p)| (c, p.vector.clone()))
            .unzip();
        if classes.is_empty() {
            return None;
        }
        Some((classes, DenseArray::from_rows(&rows).expect("uniform dimension")))
    }

    /// Stored as `class/<id>` vectors and `count/<id>` scalars.
    pub fn to_snapshot(&self) -> Snapshot {
        let mut entries = Vec::with_capacity(2 * self.len());
        for (c, p) in &self.entries {
            entries.push((format!("class/{c}"), DenseArray::vector(p.vector.clone()).expect("dim > 0")));
            entries.push((format!("count/{c}"), DenseArray::scalar(p.count as f64)));
        }
        Snapshot::new(entries)
    }
}

/// Vectors with a smaller norm are treated as degenerate.
pub const MIN_NORM: f64 = 1e-12;

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-class mean of the rows of `embeddings` grouped by `labels`.
pub fn compute_local_prototypes(embeddings: &DenseArray, labels: &[usize]) -> Result<PrototypeBank> {
    if embeddings.shape().len() != 2 || embeddings.rows() != labels.len() {
        return Err(Error::InvalidArgument("one label per embedding row".into()));
    }
    let dim = embeddings.row_len();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        let e = sums.entry(y).or_insert_with(|| (vec![0.0; dim], 0));
        for (s, v) in e.0.iter_mut().zip(embeddings.row(i)) {
            *s += v;
        }
        e.1 += 1;
    }
    let mut bank = PrototypeBank::empty(dim);
    for (c, (sum, n)) in sums {
        let mean: Vec<f64> = sum.into_iter().map(|s| s / n as f64).collect();
        if norm(&mean) <= MIN_NORM {
            log::debug!("class {c} prototype has zero norm; it is kept but skipped by the contrastive loss");
        }
        bank.insert(c, mean, n)?;
    }
    Ok(bank)
}

/// Count-weighted mean over the banks holding each class. With `literal`
/// the mean is further divided by the number of contributing banks.
pub fn aggregate_prototypes(banks: &[&PrototypeBank], literal: bool) -> Result<PrototypeBank> {
    let dim = banks
        .first()
        .map(|b| b.dim)
        .ok_or_else(|| Error::InvalidArgument("nothing to aggregate".into()))?;
    if banks.iter().any(|b| b.dim != dim) {
        return Err(Error::InvalidArgument("banks differ in dimension".into()));
    }
    let mut classes: Vec<usize> = banks.iter().flat_map(|b| b.entries.keys().copied()).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = PrototypeBank::empty(dim);
    out.round = banks.iter().map(|b| b.round).max().unwrap_or(0);
    for c in classes {
        let holders: Vec<&Prototype> = banks.iter().filter_map(|b| b.get(c)).collect();
        let total: usize = holders.iter().map(|p| p.count).sum();
        let mut v = vec![0.0; dim];
        for p in &holders {
            let w = p.count as f64 / total as f64;
            for (o, x) in v.iter_mut().zip(&p.vector) {
                *o += w * x;
            }
        }
        if literal {
            let k = holders.len() as f64;
            v.iter_mut().for_each(|x| *x /= k);
        }
        out.insert(c, v, total)?;
    }
    Ok(out)
}

/// `κ · prev + (1 - κ) · fresh` per class. Classes only in `prev` carry
/// over; classes only in `fresh` enter at full value.
pub fn momentum_update(prev: &PrototypeBank, fresh: &PrototypeBank, kappa: f64) -> Result<PrototypeBank> {
    if !(0.0..=1.0).contains(&kappa) {
        return Err(Error::InvalidArgument(format!("momentum {kappa} outside [0, 1]")));
    }
    if !prev.is_empty() && prev.dim != fresh.dim {
        return Err(Error::InvalidArgument("banks differ in dimension".into()));
    }
    let mut out = PrototypeBank::empty(fresh.dim);
    out.round = fresh.round.max(prev.round);
    for (&c, p) in &prev.entries {
        if !fresh.entries.contains_key(&c) {
            out.entries.insert(c, p.clone());
        }
    }
    for (&c, f) in &fresh.entries {
        let entry = match prev.get(c) {
            Some(p) => Prototype {
                vector: p.vector.iter().zip(&f.vector).map(|(a, b)| kappa * a + (1.0 - kappa) * b).collect(),
                count: f.count,
            },
            None => f.clone(),
        };
        out.entries.insert(c, entry);
    }
    Ok(out)
}

/// Prototype uplink of one client for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMessage {
    pub client: usize,
    pub round: usize,
    pub bank: PrototypeBank,
}

impl RoundMessage {
    /// `client, round, n, dim` as u32, then per class `class u64, count u64,
    /// vector f64 × dim`; every entry is `dim + 2` eight-byte numbers.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.bank.len() * (self.bank.dim + 2) * 8);
        for h in [self.client, self.round, self.bank.len(), self.bank.dim] {
            out.extend_from_slice(&(h as u32).to_le_bytes());
        }
        for (&c, p) in &self.bank.entries {
            out.extend_from_slice(&(c as u64).to_le_bytes());
            out.extend_from_slice(&(p.count as u64).to_le_bytes());
            for v in &p.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Format("truncated round message".into());
        let word = |i: usize| -> Result<usize> {
            let b = bytes.get(4 * i..4 * i + 4).ok_or_else(bad)?;
            Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
        };
        let (client, round, n, dim) = (word(0)?, word(1)?, word(2)?, word(3)?);
        if bytes.len() != 16 + n * (dim + 2) * 8 {
            return Err(Error::Format(format!("round message of {} bytes for {n} classes of dim {dim}", bytes.len())));
        }
        let num = |k: usize| -> [u8; 8] { bytes[16 + 8 * k..24 + 8 * k].try_into().unwrap() };
        let mut bank = PrototypeBank::empty(dim);
        bank.round = round;
        for e in 0..n {
            let base = e * (dim + 2);
            let class = u64::from_le_bytes(num(base)) as usize;
            let count = u64::from_le_bytes(num(base + 1)) as usize;
            let vector = (0..dim).map(|j| f64::from_le_bytes(num(base + 2 + j))).collect();
            bank.insert(class, vector, count).map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(Self { client, round, bank })
    }
}
