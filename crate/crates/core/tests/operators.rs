//! Finite-difference agreement of every differentiable tape operator on
//! random inputs.

use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use ssfl_core::gradcheck::gradient_check;
use ssfl_core::{DenseArray, NodeId, Tape};

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-5;

fn arr(rng: &mut StdRng, shape: &[usize], lo: f64, hi: f64) -> DenseArray {
    let n = shape.iter().product();
    DenseArray::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduces `out` to a scalar through fixed random weights, so every output
/// entry contributes a distinct amount.
fn weighted_sum(t: &mut Tape, rng: &mut StdRng, out: NodeId) -> NodeId {
    if t.value(out).is_scalar() {
        return out;
    }
    let shape = t.value(out).shape().to_vec();
    let w = t.constant(arr(rng, &shape, -1.0, 1.0));
    let m = t.mul(out, w).unwrap();
    t.sum(m).unwrap()
}

fn check(seed: u64, build: impl FnOnce(&mut Tape, &mut StdRng) -> NodeId) -> Result<(), TestCaseError> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut t = Tape::new();
    let out = build(&mut t, &mut rng);
    let terminal = weighted_sum(&mut t, &mut rng, out);
    let report = gradient_check(&mut t, terminal, &[], STEP, TOL).unwrap();
    prop_assert!(report.passed(), "{report:?}");
    Ok(())
}

fn dims(rng: &mut StdRng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..6))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn affine(seed in any::<u64>()) {
        check(seed, |t, r| {
            let (n, i) = dims(r);
            let o = r.random_range(1..5);
            let x = t.param("x", arr(r, &[n, i], -1.0, 1.0));
            let w = t.param("w", arr(r, &[i, o], -1.0, 1.0));
            let b = t.param("b", arr(r, &[o], -1.0, 1.0));
            t.affine(x, w, Some(b)).unwrap()
        })?;
    }

    #[test]
    fn conv1d(seed in any::<u64>()) {
        check(seed, |t, r| {
            let (ci, co, k) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..5));
            let len = r.random_range(k..k + 6);
            let x = t.param("x", arr(r, &[2, ci, len], -1.0, 1.0));
            let w = t.param("w", arr(r, &[co, ci, k], -1.0, 1.0));
            let b = t.param("b", arr(r, &[co], -1.0, 1.0));
            t.conv1d(x, w, b, 1, (k - 1) / 2).unwrap()
        })?;
    }

    #[test]
    fn relu(seed in any::<u64>()) {
        check(seed, |t, r| {
            let (n, d) = dims(r);
            let x = t.param("x", arr(r, &[n, d], -1.0, 1.0));
            t.relu(x).unwrap()
        })?;
    }

    #[test]
    fn max_pool(seed in any::<u64>()) {
        check(seed, |t, r| {
            let len = 2 * r.random_range(1..5);
            let x = t.param("x", arr(r, &[2, 2, len], -1.0, 1.0));
            t.max_pool1d(x, 2).unwrap()
        })?;
    }

    #[test]
    fn global_mean_pool(seed in any::<u64>()) {
        check(seed, |t, r| {
            let (c, l) = dims(r);
            let x = t.param("x", arr(r, &[2, c, l], -1.0, 1.0));
            t.global_mean_pool(x).unwrap()
        })?;
    }

    #[test]
    fn softmax_cross_entropy(seed in any::<u64>()) {
        check(seed, |t, r| {
            let n = r.random_range(1..5);
            let c = r.random_range(2..5);
            let x = t.param("x", arr(r, &[n, c], -3.0, 3.0));
            let labels = (0..n).map(|_| r.random_range(0..c)).collect();
            let weights = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
            t.softmax_cross_entropy(x, labels, weights, 0.7).unwrap()
        })?;
    }

    #[test]
    fn l2_normalize(seed in any::<u64>()) {
        check(seed, |t, r| {
            let (n, d) = dims(r);
            let x = t.param("x", arr(r, &[n, d], 0.2, 1.0));
            t.l2_normalize(x).unwrap()
        })?;
    }

    #[test]
    fn cosine_similarity(seed in any::<u64>()) {
        check(seed, |t, r| {
            let (n, d) = dims(r);
            let m = r.random_range(1..5);
            let a = t.param("a", arr(r, &[n, d], -1.0, 1.0));
            let b = t.param("b", arr(r, &[m, d], -1.0, 1.0));
            t.cosine_similarity(a, b).unwrap()
        })?;
    }

    #[test]
    fn elementwise(seed in any::<u64>()) {
        check(seed, |t, r| {
            let (n, d) = dims(r);
            let a = t.param("a", arr(r, &[n, d], 0.5, 2.0));
            let b = t.param("b", arr(r, &[n, d], -1.0, 1.0));
            let s = t.add(a, b).unwrap();
            let p = t.mul(s, a).unwrap();
            let e = t.exp(b).unwrap();
            let l = t.log(a).unwrap();
            let q = t.scale(l, -1.3).unwrap();
            let u = t.add(p, e).unwrap();
            t.add(u, q).unwrap()
        })?;
    }

    #[test]
    fn reductions(seed in any::<u64>()) {
        check(seed, |t, r| {
            let (n, d) = dims(r);
            let x = t.param("x", arr(r, &[n, d], -1.0, 1.0));
            let rows = t.sum_last_axis(x).unwrap();
            let m = t.mean(x).unwrap();
            let s = t.sum(rows).unwrap();
            let sq = t.mul(s, m).unwrap();
            t.add(sq, s).unwrap()
        })?;
    }

    #[test]
    fn concat_rows_reshape(seed in any::<u64>()) {
        check(seed, |t, r| {
            let (n, d) = dims(r);
            let m = r.random_range(1..4);
            let a = t.param("a", arr(r, &[n, d], -1.0, 1.0));
            let b = t.param("b", arr(r, &[m, d], -1.0, 1.0));
            let c = t.concat(&[a, b]).unwrap();
            let start = r.random_range(0..n + m);
            let len = r.random_range(1..=n + m - start);
            let s = t.rows(c, start, len).unwrap();
            t.reshape(s, vec![len * d]).unwrap()
        })?;
    }
}
