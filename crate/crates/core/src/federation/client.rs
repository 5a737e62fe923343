//! One client: local training round, fine-tuning and evaluation.

use rand::seq::SliceRandom;

use super::prototypes::{compute_local_prototypes, norm, PrototypeBank, MIN_NORM};
use super::{Method, RunConfig};
use crate::data::{strong_augment, weak_augment, ClientSplit, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    global_contrastive_loss, local_contrastive_loss, supervised_loss, total_loss, unsupervised_loss, LossHeads,
    LossValues,
};
use crate::model::{self, Adam, ModelConfig};
use crate::seeds::{self, Purpose, SimRng};
use crate::snapshot::Snapshot;
use crate::tape::Tape;
use crate::tensor::DenseArray;
use crate::weighting::{self, argmax, batch_confidence_stats, max_prob, ConfidenceEma, WeightingConfig};

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub split: ClientSplit,
    pub params: Snapshot,
    pub optimizer: Adam,
    pub ema: ConfidenceEma,
}

impl ClientState {
    pub fn new(id: usize, split: ClientSplit, params: Snapshot, cfg: &RunConfig) -> Self {
        let optimizer = Adam::new(cfg.adam, &params);
        Self {
            id,
            split,
            params,
            optimizer,
            ema: ConfidenceEma::new(cfg.data.classes, cfg.ema_momentum),
        }
    }

    /// Samples the client trains on under `method`.
    pub fn train_size(&self, method: Method) -> usize {
        match method {
            Method::FedAvgSupervised => self.split.labeled.len(),
            _ => self.split.train_len(),
        }
    }
}

/// Read-only inputs shared by every client of a round.
pub struct RoundContext<'a> {
    pub cfg: &'a RunConfig,
    pub model: &'a ModelConfig,
    pub data: &'a Dataset,
    pub global: &'a PrototypeBank,
    pub round: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RoundOutput {
    /// Mean of each loss head over the round's batches.
    pub losses: LossValues,
    pub batches: usize,
    /// Mean pseudo-label weight used in training; `None` without unlabeled rows.
    pub mean_lambda: Option<f64>,
    /// Quantity and quality of the pseudo-labels over the whole unlabeled pool.
    pub quantity: Option<f64>,
    pub quality: Option<f64>,
    pub bank: Option<PrototypeBank>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    /// Accuracy per true class; `None` for classes absent from the split.
    pub fn per_class(&self) -> Vec<Option<f64>> {
        self.confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect()
    }
}

/// How pseudo-labels are weighted.
#[derive(Debug, Clone, Copy)]
enum WeightRule {
    Laplace(WeightingConfig),
    Uniform,
    Threshold(f64),
}

impl WeightRule {
    fn for_run(cfg: &RunConfig) -> Self {
        match cfg.method {
            Method::FixMatch => WeightRule::Threshold(cfg.threshold),
            _ if cfg.ablation.tlaw => WeightRule::Laplace(WeightingConfig {
                lambda_max: cfg.lambda_max,
            }),
            _ => WeightRule::Uniform,
        }
    }

    fn weight(self, p: &[f64], ema: &ConfidenceEma) -> f64 {
        match self {
            WeightRule::Laplace(w) => weighting::sample_weight(p, ema, &w),
            WeightRule::Uniform => 1.0,
            WeightRule::Threshold(t) => f64::from(u8::from(max_prob(p) >= t)),
        }
    }
}

/// Splits `labeled` and `unlabeled` over the fewest batches of at most
/// `batch` rows, spreading each list evenly. Returns `(E, U)` per batch.
fn batch_plan(labeled: usize, unlabeled: usize, batch: usize) -> Vec<(usize, usize)> {
    let total = labeled + unlabeled;
    if total == 0 {
        return Vec::new();
    }
    let share = |n: usize, nb: usize, b: usize| (b + 1) * n / nb - b * n / nb;
    let mut nb = total.div_ceil(batch);
    while labeled.div_ceil(nb) + unlabeled.div_ceil(nb) > batch {
        nb += 1;
    }
    (0..nb).map(|b| (share(labeled, nb, b), share(unlabeled, nb, b))).collect()
}

fn client_error(round: usize, client: usize) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        e @ Error::NonFiniteLoss { .. } => e,
        e => Error::Client {
            round,
            client,
            source: Box::new(e),
        },
    }
}

fn stack(data: &Dataset, idx: &[usize], f: impl FnMut(&DenseArray) -> DenseArray) -> Vec<DenseArray> {
    idx.iter().map(|&i| data.window(i)).map(f).collect()
}

/// One local epoch: mixed labeled/unlabeled batches with every loss head
/// enabled by the run configuration, then local prototypes and pseudo-label
/// statistics on the training pool.
pub fn local_train_round(client: &mut ClientState, ctx: &RoundContext) -> Result<RoundOutput> {
    let (round, id) = (ctx.round, client.id);
    train_epoch(client, ctx).map_err(client_error(round, id))
}

fn train_epoch(client: &mut ClientState, ctx: &RoundContext) -> Result<RoundOutput> {
    let cfg = ctx.cfg;
    let method = cfg.method;
    let abl = cfg.ablation;
    let ssfl = method == Method::Ssfl;
    let rule = WeightRule::for_run(cfg);
    let k = client.id as u64;
    let t = ctx.round as u64;
    let mut order_rng = seeds::stream(ctx.seed, Purpose::Batches, &[k, t]);
    let mut aug_rng = seeds::stream(ctx.seed, Purpose::Augment, &[k, t, 0]);

    let mut labeled = client.split.labeled.clone();
    let mut unlabeled = if method == Method::FedAvgSupervised {
        Vec::new()
    } else {
        client.split.unlabeled.clone()
    };
    labeled.shuffle(&mut order_rng);
    unlabeled.shuffle(&mut order_rng);

    let eta = cfg.schedule().eta(ctx.round as f64);
    let global = if ssfl && abl.gcl { ctx.global.matrix() } else { None };
    let mut sums = LossValues::default();
    let mut lambda_sum = 0.0;
    let mut lambda_n = 0usize;
    let plan = batch_plan(labeled.len(), unlabeled.len(), cfg.batch_size);
    let (mut li, mut ui) = (0, 0);
    for &(e, u) in &plan {
        let lab = &labeled[li..li + e];
        let unl = &unlabeled[ui..ui + u];
        li += e;
        ui += u;
        let aug = &cfg.augment;
        let mut views = stack(ctx.data, lab, |w| weak_augment(w, aug.weak_jitter, aug.weak_scale, &mut aug_rng));
        views.extend(stack(ctx.data, unl, |w| weak_augment(w, aug.weak_jitter, aug.weak_scale, &mut aug_rng)));
        views.extend(stack(ctx.data, unl, |w| strong_augment(w, aug.strong_segments, aug.strong_jitter, &mut aug_rng)));
        let refs: Vec<&DenseArray> = views.iter().collect();

        let mut tape = Tape::new();
        let params = model::bind(&mut tape, &client.params);
        let x = tape.constant(model::stack_windows(&refs)?);
        let out = model::forward(&mut tape, ctx.model, &params, x)?;
        let mut heads = LossHeads::default();

        if e > 0 {
            let logits = tape.rows(out.logits, 0, e)?;
            let labels: Vec<usize> = lab.iter().map(|&i| ctx.data.label(i)).collect();
            heads.supervised = Some(supervised_loss(&mut tape, logits, &labels)?);
        }
        let mut pseudo = Vec::new();
        if u > 0 {
            let weak_logits = tape.rows(out.logits, e, u)?;
            let probs = softmax_rows(tape.value(weak_logits));
            let (bm, bv) = batch_confidence_stats(&probs).expect("non-empty batch");
            client.ema.update(bm, bv, u);
            let mut weights = Vec::with_capacity(u);
            for i in 0..u {
                pseudo.push(argmax(probs.row(i)));
                weights.push(rule.weight(probs.row(i), &client.ema));
            }
            lambda_sum += weights.iter().sum::<f64>();
            lambda_n += u;
            let strong_logits = tape.rows(out.logits, e + u, u)?;
            heads.unsupervised = Some(unsupervised_loss(&mut tape, strong_logits, &pseudo, &weights, u)?);
        }
        let temperature = if abl.dt {
            cfg.contrastive.temperature(client.ema.std())
        } else {
            cfg.contrastive.tau
        };
        if ssfl && abl.lcl && u >= 2 {
            let cw = tape.rows(out.embedding, e, u)?;
            let cs = tape.rows(out.embedding, e + u, u)?;
            heads.local_contrastive = Some(local_contrastive_loss(&mut tape, cw, cs, &pseudo, temperature, abl.spnp)?);
        }
        let mut iota = 0.0;
        if let (Some((classes, gmat)), true) = (&global, e > 0) {
            // batch prototypes: class means of labeled and weak rows
            let mut row_labels: Vec<usize> = lab.iter().map(|&i| ctx.data.label(i)).collect();
            row_labels.extend_from_slice(&pseudo);
            let emb = tape.value(out.embedding);
            let mut members: Vec<(usize, usize, Vec<usize>)> = Vec::new();
            for (g_row, &c) in classes.iter().enumerate() {
                let rows: Vec<usize> = (0..e + u).filter(|&r| row_labels[r] == c).collect();
                if rows.is_empty() {
                    continue;
                }
                let d = emb.row_len();
                let mut mean = vec![0.0; d];
                for &r in &rows {
                    mean.iter_mut().zip(emb.row(r)).for_each(|(m, v)| *m += v / rows.len() as f64);
                }
                if norm(&mean) > MIN_NORM {
                    members.push((c, g_row, rows));
                }
            }
            if !members.is_empty() {
                let n = e + u;
                let mut avg = DenseArray::zeros(&[members.len(), n]);
                for (m, (_, _, rows)) in members.iter().enumerate() {
                    for &r in rows {
                        avg.data_mut()[m * n + r] = 1.0 / rows.len() as f64;
                    }
                }
                let avg = tape.constant(avg);
                let z = tape.rows(out.embedding, 0, n)?;
                let local = tape.affine(avg, z, None)?;
                let g = tape.constant(gmat.clone());
                let matches: Vec<usize> = members.iter().map(|(_, g_row, _)| *g_row).collect();
                heads.global_contrastive = global_contrastive_loss(&mut tape, local, g, &matches, temperature)?;
                iota = weighting::iota(e, e + u);
            }
        }

        heads.ensure_finite(&tape, ctx.round, client.id)?;
        let Some(total) = total_loss(&mut tape, &heads, eta, iota)? else { continue };
        let v = heads.values(&tape, Some(total));
        sums.supervised += v.supervised;
        sums.unsupervised += v.unsupervised;
        sums.local_contrastive += v.local_contrastive;
        sums.global_contrastive += v.global_contrastive;
        sums.total += v.total;
        let grads = tape.backpropagate(total)?;
        let g: Vec<&DenseArray> = params.iter().map(|&p| grads.get(p).expect("bound parameter")).collect();
        client.optimizer.step(&mut client.params, &g);
    }
    let nb = plan.len().max(1) as f64;
    let losses = LossValues {
        supervised: sums.supervised / nb,
        unsupervised: sums.unsupervised / nb,
        local_contrastive: sums.local_contrastive / nb,
        global_contrastive: sums.global_contrastive / nb,
        total: sums.total / nb,
    };

    let mut output = RoundOutput {
        losses,
        batches: plan.len(),
        mean_lambda: (lambda_n > 0).then(|| lambda_sum / lambda_n as f64),
        quantity: None,
        quality: None,
        bank: None,
    };
    if method != Method::FedAvgSupervised {
        pool_statistics(client, ctx, rule, &mut output)?;
    }
    Ok(output)
}

fn softmax_rows(logits: &DenseArray) -> DenseArray {
    let c = logits.row_len();
    let data = logits.data().chunks(c).flat_map(model::softmax).collect();
    DenseArray::new(logits.shape().to_vec(), data).expect("same shape")
}

/// Evaluation-mode pass over the training pool: clean labeled windows and
/// weak views of unlabeled ones. Yields the local prototype bank and the
/// quantity/quality of the unlabeled pseudo-labels.
fn pool_statistics(client: &ClientState, ctx: &RoundContext, rule: WeightRule, out: &mut RoundOutput) -> Result<()> {
    let split = &client.split;
    let aug = &ctx.cfg.augment;
    let mut rng: SimRng = seeds::stream(ctx.seed, Purpose::Augment, &[client.id as u64, ctx.round as u64, 1]);
    let mut views: Vec<DenseArray> = split.labeled.iter().map(|&i| ctx.data.window(i).clone()).collect();
    views.extend(stack(ctx.data, &split.unlabeled, |w| weak_augment(w, aug.weak_jitter, aug.weak_scale, &mut rng)));
    if views.is_empty() {
        return Ok(());
    }
    let refs: Vec<&DenseArray> = views.iter().collect();
    let (emb, probs) = model::predict(ctx.model, &client.params, &refs)?;
    let e = split.labeled.len();
    let mut labels: Vec<usize> = split.labeled.iter().map(|&i| ctx.data.label(i)).collect();
    let mut pseudo = Vec::with_capacity(split.unlabeled.len());
    let mut weights = Vec::with_capacity(split.unlabeled.len());
    for r in e..probs.rows() {
        pseudo.push(argmax(probs.row(r)));
        weights.push(rule.weight(probs.row(r), &client.ema));
    }
    if !pseudo.is_empty() {
        let truth: Vec<usize> = split.unlabeled.iter().map(|&i| ctx.data.label(i)).collect();
        out.quantity = weighting::quantity(&weights).ok();
        out.quality = weighting::quality(&pseudo, &truth, &weights).ok();
    }
    if ctx.cfg.method == Method::Ssfl {
        labels.extend_from_slice(&pseudo);
        let mut bank = compute_local_prototypes(&emb, &labels)?;
        bank.round = ctx.round;
        out.bank = Some(bank);
    }
    Ok(())
}

/// Supervised epochs on the client's labeled split. Returns the mean loss of
/// each epoch.
pub fn fine_tune(client: &mut ClientState, cfg: &RunConfig, data: &Dataset, epochs: usize, seed: u64) -> Result<Vec<f64>> {
    if client.split.labeled.is_empty() {
        log::warn!("client {} has no labeled samples; fine-tuning skipped", client.id);
        return Ok(Vec::new());
    }
    let model_cfg = cfg.model_config();
    let aug = &cfg.augment;
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut rng = seeds::stream(seed, Purpose::FineTune, &[client.id as u64, epoch as u64]);
        let mut order = client.split.labeled.clone();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let chunks: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for chunk in &chunks {
            let views = stack(data, chunk, |w| weak_augment(w, aug.weak_jitter, aug.weak_scale, &mut rng));
            let refs: Vec<&DenseArray> = views.iter().collect();
            let mut tape = Tape::new();
            let params = model::bind(&mut tape, &client.params);
            let x = tape.constant(model::stack_windows(&refs)?);
            let out = model::forward(&mut tape, &model_cfg, &params, x)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.label(i)).collect();
            let loss = supervised_loss(&mut tape, out.logits, &labels)?;
            sum += tape.value(loss).item();
            let grads = tape.backpropagate(loss)?;
            let g: Vec<&DenseArray> = params.iter().map(|&p| grads.get(p).expect("bound parameter")).collect();
            client.optimizer.step(&mut client.params, &g);
        }
        history.push(sum / chunks.len() as f64);
    }
    Ok(history)
}

/// Accuracy and confusion counts of `params` on the windows `indices`.
pub fn evaluate(model_cfg: &ModelConfig, params: &Snapshot, data: &Dataset, indices: &[usize]) -> Result<Evaluation> {
    let c = model_cfg.classes;
    let mut eval = Evaluation {
        correct: 0,
        total: indices.len(),
        confusion: vec![vec![0; c]; c],
    };
    if indices.is_empty() {
        return Ok(eval);
    }
    let refs: Vec<&DenseArray> = indices.iter().map(|&i| data.window(i)).collect();
    let (_, probs) = model::predict(model_cfg, params, &refs)?;
    for (r, &i) in indices.iter().enumerate() {
        let (y, p) = (data.label(i), argmax(probs.row(r)));
        eval.confusion[y][p] += 1;
        eval.correct += usize::from(y == p);
    }
    Ok(eval)
}
