//! Training objective: supervised and weighted pseudo-label cross-entropy,
//! the weak/strong local contrastive loss and the prototype contrastive loss.
//!
//! Every head is recorded on a [`Tape`] so gradients come from the same
//! graph that produced the value.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::DenseArray;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveConfig {
    /// Base temperature.
    pub tau: f64,
    /// Sensitivity of the temperature to the confidence spread.
    pub alpha: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { tau: 0.5, alpha: 1.0 }
    }
}

impl ContrastiveConfig {
    /// `τ · (1 + α · σ_t)`.
    pub fn temperature(&self, sigma: f64) -> f64 {
        self.tau * (1.0 + self.alpha * sigma)
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize, what: &str) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::InvalidArgument(format!("{what}: {} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!("{what}: label {bad} outside [0, {classes})")));
    }
    Ok(())
}

/// Mean cross-entropy of `logits: [E, C]` against `labels`.
pub fn supervised_loss(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || labels.is_empty() {
        return Err(Error::InvalidArgument("supervised loss needs [E, C] logits with E >= 1".into()));
    }
    check_labels(labels, shape[0], shape[1], "supervised loss")?;
    let n = labels.len();
    tape.softmax_cross_entropy(logits, labels.to_vec(), vec![1.0; n], 1.0 / n as f64)
}

/// `(1/O) · Σ λ_i · CE(ŷ_i, softmax(strong_i))`. Pseudo-labels and weights
/// enter as constants, so no gradient reaches the weak view through them.
pub fn unsupervised_loss(
    tape: &mut Tape,
    strong_logits: NodeId,
    pseudo: &[usize],
    weights: &[f64],
    o: usize,
) -> Result<NodeId> {
    let shape = tape.value(strong_logits).shape().to_vec();
    if shape.len() != 2 || o == 0 || weights.len() != pseudo.len() {
        return Err(Error::InvalidArgument("unsupervised loss needs [B, C] logits, O >= 1 and one weight per row".into()));
    }
    check_labels(pseudo, shape[0], shape[1], "unsupervised loss")?;
    tape.softmax_cross_entropy(strong_logits, pseudo.to_vec(), weights.to_vec(), 1.0 / o as f64)
}

/// Local contrastive loss between weak embeddings `c_w: [B, d]` and strong
/// embeddings `c_s: [B, d]`:
///
/// `-(1/B) Σ_i log( Σ_{j∈P_i} e_ij / Σ_j e_ij )`, `e_ij = exp(cos(c_w_i, c_s_j) / τ)`.
///
/// With `select_pairs` the positives `P_i` are all strong rows sharing row
/// `i`'s pseudo-label; without it only `j = i`.
pub fn local_contrastive_loss(
    tape: &mut Tape,
    c_w: NodeId,
    c_s: NodeId,
    pseudo: &[usize],
    temperature: f64,
    select_pairs: bool,
) -> Result<NodeId> {
    let b = tape.value(c_w).rows();
    if pseudo.len() != b || tape.value(c_s).rows() != b {
        return Err(Error::InvalidArgument("contrastive views and pseudo-labels must be row-aligned".into()));
    }
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let mut mask = DenseArray::zeros(&[b, b]);
    for i in 0..b {
        for j in 0..b {
            if i == j || (select_pairs && pseudo[i] == pseudo[j]) {
                mask.data_mut()[i * b + j] = 1.0;
            }
        }
    }
    if select_pairs && pseudo.iter().all(|&y| y == pseudo[0]) {
        log::debug!("all {b} rows share pseudo-label {}; local contrastive loss is 0", pseudo[0]);
    }
    let sim = tape.cosine_similarity(c_w, c_s)?;
    let logits = tape.scale(sim, 1.0 / temperature)?;
    let e = tape.exp(logits)?;
    let mask = tape.constant(mask);
    let pos = tape.mul(e, mask)?;
    let num = tape.sum_last_axis(pos)?;
    let den = tape.sum_last_axis(e)?;
    let log_num = tape.log(num)?;
    let log_den = tape.log(den)?;
    let neg_log_den = tape.scale(log_den, -1.0)?;
    let ratio = tape.add(log_num, neg_log_den)?;
    let mean = tape.mean(ratio)?;
    tape.scale(mean, -1.0)
}

/// Prototype contrastive loss of local prototypes `local: [n, d]` against
/// the global bank `global: [m, d]`. `matches[i]` is the row of `global`
/// holding the same class as local row `i`.
///
/// `Σ_i [ -cos(P_i, G_{m(i)})/τ + log Σ_{j≠m(i)} exp(cos(P_i, G_j)/τ) ]`.
///
/// The positive is left out of the denominator, so the value can be
/// negative. Returns `None` when the global bank has fewer than two classes.
pub fn global_contrastive_loss(
    tape: &mut Tape,
    local: NodeId,
    global: NodeId,
    matches: &[usize],
    temperature: f64,
) -> Result<Option<NodeId>> {
    let n = tape.value(local).rows();
    let m = tape.value(global).rows();
    if matches.len() != n || matches.iter().any(|&g| g >= m) {
        return Err(Error::InvalidArgument("every local prototype needs a matching global row".into()));
    }
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    if m < 2 || n == 0 {
        log::debug!("global contrastive loss skipped: {m} global and {n} local classes");
        return Ok(None);
    }
    let mut pos_mask = DenseArray::zeros(&[n, m]);
    let mut neg_mask = DenseArray::filled(&[n, m], 1.0);
    for (i, &g) in matches.iter().enumerate() {
        pos_mask.data_mut()[i * m + g] = 1.0;
        neg_mask.data_mut()[i * m + g] = 0.0;
    }
    let sim = tape.cosine_similarity(local, global)?;
    let logits = tape.scale(sim, 1.0 / temperature)?;
    let pos_mask = tape.constant(pos_mask);
    let neg_mask = tape.constant(neg_mask);
    let pos = tape.mul(logits, pos_mask)?;
    let pos = tape.sum(pos)?;
    let e = tape.exp(logits)?;
    let neg = tape.mul(e, neg_mask)?;
    let neg = tape.sum_last_axis(neg)?;
    let neg = tape.log(neg)?;
    let neg = tape.sum(neg)?;
    let pos = tape.scale(pos, -1.0)?;
    Ok(Some(tape.add(neg, pos)?))
}

/// Loss heads of one batch; absent heads contribute nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossHeads {
    pub supervised: Option<NodeId>,
    pub unsupervised: Option<NodeId>,
    pub local_contrastive: Option<NodeId>,
    pub global_contrastive: Option<NodeId>,
}

/// Scalar values of the heads, zero where absent.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub supervised: f64,
    pub unsupervised: f64,
    pub local_contrastive: f64,
    pub global_contrastive: f64,
    pub total: f64,
}

impl LossHeads {
    pub fn values(&self, tape: &Tape, total: Option<NodeId>) -> LossValues {
        let v = |n: Option<NodeId>| n.map_or(0.0, |n| tape.value(n).item());
        LossValues {
            supervised: v(self.supervised),
            unsupervised: v(self.unsupervised),
            local_contrastive: v(self.local_contrastive),
            global_contrastive: v(self.global_contrastive),
            total: v(total),
        }
    }

    /// Fails with the first non-finite head, tagged with `round` and `client`.
    pub fn ensure_finite(&self, tape: &Tape, round: usize, client: usize) -> Result<()> {
        let heads = [
            ("supervised", self.supervised),
            ("unsupervised", self.unsupervised),
            ("local_contrastive", self.local_contrastive),
            ("global_contrastive", self.global_contrastive),
        ];
        for (component, node) in heads {
            if let Some(n) = node {
                if !tape.value(n).item().is_finite() {
                    return Err(Error::NonFiniteLoss { component, round, client });
                }
            }
        }
        Ok(())
    }
}

/// `L_s + η · L_u + L_LC + ι · L_GC` over the heads that are present.
/// Returns `None` when no head is.
pub fn total_loss(tape: &mut Tape, heads: &LossHeads, eta: f64, iota: f64) -> Result<Option<NodeId>> {
    let mut terms = Vec::with_capacity(4);
    terms.extend(heads.supervised);
    if let Some(u) = heads.unsupervised {
        terms.push(tape.scale(u, eta)?);
    }
    terms.extend(heads.local_contrastive);
    if let Some(g) = heads.global_contrastive {
        terms.push(tape.scale(g, iota)?);
    }
    let mut iter = terms.into_iter();
    let Some(mut acc) = iter.next() else { return Ok(None) };
    for t in iter {
        acc = tape.add(acc, t)?;
    }
    Ok(Some(acc))
}
