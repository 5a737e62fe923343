use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::seeds::{self, Purpose, SimRng};

/// One client's view of the dataset, as sample indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClientSplit {
    /// Labeled training samples (S^k).
    pub labeled: Vec<usize>,
    /// Unlabeled training samples (U^k). Their labels are never given to training.
    pub unlabeled: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClientSplit {
    pub fn train_len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn len(&self) -> usize {
        self.train_len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Largest-remainder apportionment of `total` units proportionally to
/// `weights`. Ties go to the lowest index.
pub(crate) fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut rest = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    for i in order {
        if rest == 0 {
            break;
        }
        if weights[i] > 0.0 {
            out[i] += 1;
            rest -= 1;
        }
    }
    out
}

fn dirichlet(rng: &mut SimRng, k: usize, concentration: f64) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let s: f64 = draws.iter().sum();
        if s > 0.0 && s.is_finite() {
            return draws.into_iter().map(|d| d / s).collect();
        }
    }
}

const MAX_PARTITION_ATTEMPTS: usize = 10_000;

/// Splits sample indices across `num_clients` so that, per class, the client
/// shares follow a symmetric Dirichlet(`concentration`) draw. Draws are
/// repeated until every client holds at least `min_per_client` samples.
pub fn dirichlet_partition(
    labels: &[usize],
    num_clients: usize,
    concentration: f64,
    min_per_client: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if num_clients == 0 {
        return Err(Error::InvalidArgument("client count must be at least 1".into()));
    }
    if !(concentration > 0.0) {
        return Err(Error::InvalidArgument(format!("concentration must be positive, got {concentration}")));
    }
    if num_clients * min_per_client.max(1) > labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{num_clients} clients need at least {} samples, dataset has {}",
            num_clients * min_per_client.max(1),
            labels.len()
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if num_clients == 1 {
        return Ok(vec![(0..labels.len()).collect()]);
    }
    let mut rng = seeds::stream(seed, Purpose::Partition, &[]);
    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let mut clients = vec![Vec::new(); num_clients];
        for idx in by_class.values() {
            let mut idx = idx.clone();
            idx.shuffle(&mut rng);
            let shares = dirichlet(&mut rng, num_clients, concentration);
            let mut start = 0;
            let mut acc = 0.0;
            for (k, share) in shares.iter().enumerate() {
                acc += share;
                let end = if k + 1 == num_clients {
                    idx.len()
                } else {
                    ((acc * idx.len() as f64).round() as usize).clamp(start, idx.len())
                };
                clients[k].extend_from_slice(&idx[start..end]);
                start = end;
            }
        }
        if clients.iter().all(|c| c.len() >= min_per_client.max(1)) {
            for c in &mut clients {
                c.sort_unstable();
            }
            return Ok(clients);
        }
    }
    Err(Error::InvalidArgument(format!(
        "no Dirichlet({concentration}) draw gave every client {min_per_client} samples"
    )))
}

/// Splits one client's samples into labeled, unlabeled and test sets.
///
/// The 4:1 train/test split is stratified per class. The labeled count is
/// `round(label_rate · |train|)`; when it allows, every class present in the
/// training set receives at least one label and the rest is apportioned by
/// class size.
pub fn label_split(indices: &[usize], labels: &[usize], label_rate: f64, seed: u64) -> Result<ClientSplit> {
    if !(label_rate > 0.0 && label_rate <= 1.0) {
        return Err(Error::InvalidArgument(format!("label rate must lie in (0, 1], got {label_rate}")));
    }
    if indices.len() < 5 {
        return Err(Error::InvalidArgument(format!(
            "client has {} samples, at least 5 are needed for a 4:1 split",
            indices.len()
        )));
    }
    let mut rng = seeds::stream(seed, Purpose::Split, &[]);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        by_class.entry(labels[i]).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = by_class.into_values().collect();
    for g in &mut groups {
        g.shuffle(&mut rng);
    }
    let n = indices.len();
    let n_test = (n as f64 / 5.0).round() as usize;
    let sizes: Vec<f64> = groups.iter().map(|g| g.len() as f64).collect();
    let test_counts = apportion(n_test, &sizes);

    let train: Vec<&[usize]> = groups.iter().zip(&test_counts).map(|(g, &t)| &g[t..]).collect();
    let n_train: usize = train.iter().map(|g| g.len()).sum();
    let n_labeled = ((label_rate * n_train as f64).round() as usize).clamp(1, n_train);
    let present = train.iter().filter(|g| !g.is_empty()).count();
    let labeled_counts = if n_labeled >= present {
        let rest: Vec<f64> = train.iter().map(|g| g.len().saturating_sub(1) as f64).collect();
        let extra = apportion(n_labeled - present, &rest);
        train.iter().zip(extra).map(|(g, e)| usize::from(!g.is_empty()) + e).collect()
    } else {
        apportion(n_labeled, &train.iter().map(|g| g.len() as f64).collect::<Vec<_>>())
    };

    let mut split = ClientSplit::default();
    for ((g, &t), (tr, &l)) in groups.iter().zip(&test_counts).zip(train.iter().zip(&labeled_counts)) {
        split.test.extend_from_slice(&g[..t]);
        split.labeled.extend_from_slice(&tr[..l]);
        split.unlabeled.extend_from_slice(&tr[l..]);
    }
    for list in [&mut split.labeled, &mut split.unlabeled, &mut split.test] {
        list.shuffle(&mut rng);
    }
    Ok(split)
}

/// Dirichlet partition followed by a per-client [`label_split`].
pub fn partition_and_split(
    labels: &[usize],
    num_clients: usize,
    concentration: f64,
    label_rate: f64,
    min_per_client: usize,
    seed: u64,
) -> Result<Vec<ClientSplit>> {
    let parts = dirichlet_partition(labels, num_clients, concentration, min_per_client.max(5), seed)?;
    parts
        .iter()
        .enumerate()
        .map(|(k, p)| label_split(p, labels, label_rate, seeds::derive_seed(seed, &[k as u64])))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn balanced(c: usize, per: usize) -> Vec<usize> {
        (0..c).flat_map(|j| std::iter::repeat_n(j, per)).collect()
    }

    #[test]
    fn single_client_gets_everything() {
        let labels = balanced(3, 10);
        let p = dirichlet_partition(&labels, 1, 0.5, 1, 3).unwrap();
        assert_eq!(p, vec![(0..30).collect::<Vec<_>>()]);
    }

    #[test]
    fn rejects_too_many_clients() {
        assert!(dirichlet_partition(&balanced(2, 2), 5, 0.5, 1, 0).is_err());
        assert!(dirichlet_partition(&balanced(2, 2), 2, 0.0, 1, 0).is_err());
    }

    #[test]
    fn large_concentration_is_near_uniform() {
        let labels = balanced(3, 300);
        for seed in 0..20 {
            let p = dirichlet_partition(&labels, 5, 1000.0, 1, seed).unwrap();
            for client in &p {
                for j in 0..3 {
                    let share = client.iter().filter(|&&i| labels[i] == j).count() as f64 / 300.0;
                    assert!((share - 0.2).abs() <= 0.1 * 0.2 + 1e-9, "seed {seed}: share {share}");
                }
            }
        }
    }

    #[test]
    fn full_label_rate_leaves_unlabeled_empty() {
        let labels = balanced(3, 20);
        let idx: Vec<usize> = (0..60).collect();
        let s = label_split(&idx, &labels, 1.0, 4).unwrap();
        assert!(s.unlabeled.is_empty());
        assert_eq!(s.labeled.len(), 48);
        assert_eq!(s.test.len(), 12);
    }

    #[test]
    fn counting_example() {
        // 125 samples -> 100 train / 25 test; chi = 0.2 -> 20 labeled
        let labels = balanced(5, 25);
        let idx: Vec<usize> = (0..125).collect();
        let s = label_split(&idx, &labels, 0.2, 1).unwrap();
        assert_eq!(s.test.len(), 25);
        assert_eq!(s.labeled.len(), 20);
        assert_eq!(s.unlabeled.len(), 80);
    }

    #[test]
    fn rejects_tiny_clients_and_bad_rates() {
        let labels = balanced(2, 2);
        assert!(label_split(&[0, 1, 2, 3], &labels, 0.5, 0).is_err());
        let labels = balanced(2, 5);
        let idx: Vec<usize> = (0..10).collect();
        assert!(label_split(&idx, &labels, 0.0, 0).is_err());
        assert!(label_split(&idx, &labels, 1.5, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn bookkeeping_is_a_bijection(
            seed in any::<u64>(),
            k in 1usize..6,
            chi in prop::sample::select(vec![0.1, 0.2, 0.4, 1.0]),
            nu in prop::sample::select(vec![0.3, 0.5, 1.0, 10.0]),
        ) {
            let labels = balanced(3, 60);
            let splits = partition_and_split(&labels, k, nu, chi, 10, seed).unwrap();
            let mut seen = vec![0u8; labels.len()];
            for s in &splits {
                for &i in s.labeled.iter().chain(&s.unlabeled).chain(&s.test) {
                    seen[i] += 1;
                }
                let (train, test) = (s.train_len() as f64, s.test.len() as f64);
                prop_assert!((train - 4.0 * test).abs() <= 5.0, "train {} test {}", train, test);
                prop_assert!((s.len() as f64 / 5.0 - test).abs() <= 1.0);
                let target = chi * train;
                prop_assert!((s.labeled.len() as f64 - target).abs() <= 1.0, "labeled {} target {}", s.labeled.len(), target);
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }
}
