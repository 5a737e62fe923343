use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::DenseArray;

fn jitter(len: usize, std: f64, rng: &mut impl Rng) -> Vec<f64> {
    if std <= 0.0 {
        return vec![0.0; len];
    }
    let n = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| n.sample(rng)).collect()
}

/// Weak view: `(window + N(0, jitter_std²)) · s` with one scale
/// `s ~ U[scale.0, scale.1]` per window.
pub fn weak_augment(window: &DenseArray, jitter_std: f64, scale: (f64, f64), rng: &mut impl Rng) -> DenseArray {
    let s = if scale.0 < scale.1 {
        rng.random_range(scale.0..=scale.1)
    } else {
        scale.0
    };
    let noise = jitter(window.len(), jitter_std, rng);
    let mut out = window.clone();
    for (v, n) in out.data_mut().iter_mut().zip(noise) {
        *v = (*v + n) * s;
    }
    out
}

/// What [`strong_augment_traced`] did to a window.
#[derive(Debug, Clone, PartialEq)]
pub struct StrongTrace {
    /// Segment boundaries `[start, end)` in the original window, in output order.
    pub segments: Vec<(usize, usize)>,
    pub jitter: Vec<f64>,
}

/// Strong view: cut the time axis at `n - 1` distinct interior points with
/// `n ~ U{1..=max_segments}`, shuffle the segments, then add
/// `N(0, jitter_std²)` noise. Every channel uses the same permutation.
pub fn strong_augment(window: &DenseArray, max_segments: usize, jitter_std: f64, rng: &mut impl Rng) -> DenseArray {
    strong_augment_traced(window, max_segments, jitter_std, rng).0
}

pub fn strong_augment_traced(
    window: &DenseArray,
    max_segments: usize,
    jitter_std: f64,
    rng: &mut impl Rng,
) -> (DenseArray, StrongTrace) {
    let shape = window.shape();
    let len = *shape.last().expect("window rank >= 1");
    let channels = window.len() / len;
    let max_segments = max_segments.clamp(1, len);
    let n_seg = rng.random_range(1..=max_segments);
    let mut cuts: Vec<usize> = index::sample(rng, len - 1, n_seg - 1).into_iter().map(|c| c + 1).collect();
    cuts.sort_unstable();
    let mut segments: Vec<(usize, usize)> = std::iter::once(0)
        .chain(cuts.iter().copied())
        .zip(cuts.iter().copied().chain(std::iter::once(len)))
        .collect();
    segments.shuffle(rng);

    let noise = jitter(window.len(), jitter_std, rng);
    let mut out = Vec::with_capacity(window.len());
    for c in 0..channels {
        let row = &window.data()[c * len..(c + 1) * len];
        for &(a, b) in &segments {
            out.extend_from_slice(&row[a..b]);
        }
    }
    for (v, n) in out.iter_mut().zip(&noise) {
        *v += n;
    }
    let out = DenseArray::new(shape.to_vec(), out).expect("same shape");
    (out, StrongTrace { segments, jitter: noise })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::{stream, Purpose};
    use proptest::prelude::*;

    fn ramp(len: usize) -> DenseArray {
        DenseArray::new(vec![1, len], (0..len).map(|i| i as f64 * 0.5 - 3.0).collect()).unwrap()
    }

    #[test]
    fn weak_identity_and_doubling() {
        let w = ramp(32);
        let mut rng = stream(1, Purpose::Augment, &[]);
        assert_eq!(weak_augment(&w, 0.0, (1.0, 1.0), &mut rng), w);
        let doubled = weak_augment(&w, 0.0, (2.0, 2.0), &mut rng);
        for (a, b) in doubled.data().iter().zip(w.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn weak_jitter_std_matches() {
        // (out / s) - x is the jitter; s is recoverable from a zero window
        // only through the noise itself, so test on x = 0 where out = s·n.
        let mut rng = stream(2, Purpose::Augment, &[]);
        let zero = DenseArray::zeros(&[1, 256]);
        let mut sq = 0.0;
        let mut n = 0usize;
        for _ in 0..1000 {
            let out = weak_augment(&zero, 0.05, (0.9, 1.1), &mut rng);
            sq += out.data().iter().map(|v| v * v).sum::<f64>();
            n += out.len();
        }
        // E[s²] = 1 + 0.2²/12 for s ~ U[0.9, 1.1]
        let std = (sq / n as f64 / (1.0 + 0.04 / 12.0)).sqrt();
        assert!((std - 0.05).abs() < 0.005, "std {std}");
    }

    #[test]
    fn single_segment_no_jitter_is_identity() {
        let w = ramp(40);
        let mut rng = stream(3, Purpose::Augment, &[]);
        for _ in 0..10 {
            assert_eq!(strong_augment(&w, 1, 0.0, &mut rng), w);
        }
    }

    proptest! {
        #[test]
        fn strong_preserves_multiset(seed in any::<u64>(), m in 1usize..40, jit in prop::sample::select(vec![0.0, 0.05])) {
            let w = DenseArray::new(vec![2, 33], (0..66).map(|i| (i * 37 % 66) as f64).collect()).unwrap();
            let mut rng = stream(seed, Purpose::Augment, &[]);
            let (out, trace) = strong_augment_traced(&w, m, jit, &mut rng);
            prop_assert!(trace.segments.len() <= m.min(33));
            let mut got: Vec<f64> = out.data().iter().zip(&trace.jitter).map(|(v, n)| v - n).collect();
            let mut want = w.data().to_vec();
            got.iter_mut().for_each(|v| *v = v.round());
            got.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            prop_assert_eq!(got, want);
        }
    }
}
