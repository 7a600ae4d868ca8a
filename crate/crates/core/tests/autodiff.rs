//! Finite-difference checks of every differentiable op.

use icll::numeric::{finite_diff_check, rng, Graph, Tensor, Var};
use icll::Result;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &[]);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.sample(StandardNormal)).collect()).unwrap()
}

/// Contracts `y` with fixed random weights so every coordinate of the
/// gradient is generically nonzero.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(randn(g.shape(y), seed ^ 0xBEEF));
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

fn check(shape: &[usize], seed: u64, f: impl Fn(&mut Graph, Var) -> Result<Var>) -> f64 {
    let x = randn(shape, seed);
    finite_diff_check(
        |g, v| {
            let y = f(g, v)?;
            weighted_sum(g, y, seed)
        },
        &x,
        EPS,
    )
    .unwrap()
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=8, 1..=3).prop_map(|mut s| {
        if s.len() == 3 {
            s[0] = s[0].min(4);
        }
        s
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn unary_ops_pass_gradcheck(shape in shape_strategy(), seed in 0u64..1000) {
        let e = check(&shape, seed, |g, x| Ok(g.tanh(x)));
        prop_assert!(e <= TOL, "relative error {}", e);
        let e = check(&shape, seed, |g, x| Ok(g.gelu(x)));
        prop_assert!(e <= TOL, "relative error {}", e);
        let e = check(&shape, seed, |g, x| Ok(g.exp(x)));
        prop_assert!(e <= TOL, "relative error {}", e);
        let e = check(&shape, seed, |g, x| { let e = g.exp(x); Ok(g.log(e)) });
        prop_assert!(e <= TOL, "relative error {}", e);
        let e = check(&shape, seed, |g, x| Ok(g.softmax(x)));
        prop_assert!(e <= TOL, "relative error {}", e);
        let e = check(&shape, seed, |g, x| Ok(g.scale(x, -1.7)));
        prop_assert!(e <= TOL, "relative error {}", e);
        let e = check(&shape, seed, |g, x| Ok(g.relu(x)));
        prop_assert!(e <= TOL, "relative error {}", e);
    }

    #[test]
    fn layer_norm_passes_gradcheck(shape in shape_strategy(), seed in 0u64..1000) {
        prop_assume!(*shape.last().unwrap() >= 2);
        let e = check(&shape, seed, |g, x| Ok(g.layer_norm(x)));
        prop_assert!(e <= TOL, "relative error {}", e);
    }

    #[test]
    fn binary_ops_pass_gradcheck(shape in shape_strategy(), seed in 0u64..1000) {
        let other = randn(&shape, seed + 1);
        let suffix = randn(&shape[shape.len() - 1..], seed + 2);
        for bcast in [false, true] {
            let o = if bcast { suffix.clone() } else { other.clone() };
            let e = check(&shape, seed, |g, x| { let c = g.constant(o.clone()); g.add(x, c) });
            prop_assert!(e <= TOL, "relative error {}", e);
            let e = check(&shape, seed, |g, x| { let c = g.constant(o.clone()); g.sub(c, x) });
            prop_assert!(e <= TOL, "relative error {}", e);
            let e = check(&shape, seed, |g, x| { let c = g.constant(o.clone()); g.mul(x, c) });
            prop_assert!(e <= TOL, "relative error {}", e);
        }
        // gradient into the broadcast operand
        let big = randn(&shape, seed + 3);
        let last = *shape.last().unwrap();
        let e = check(&[last], seed, |g, b| { let c = g.constant(big.clone()); g.mul(c, b) });
        prop_assert!(e <= TOL, "relative error {}", e);
        let e = check(&[last], seed, |g, b| { let c = g.constant(big.clone()); g.add(c, b) });
        prop_assert!(e <= TOL, "relative error {}", e);
    }

    #[test]
    fn structural_ops_pass_gradcheck(shape in shape_strategy(), seed in 0u64..1000) {
        let nd = shape.len();
        let e = check(&shape, seed, |g, x| g.transpose(x, 0, nd - 1));
        prop_assert!(e <= TOL, "relative error {}", e);
        let flat: usize = shape.iter().product();
        let e = check(&shape, seed, |g, x| g.reshape(x, &[flat]));
        prop_assert!(e <= TOL, "relative error {}", e);
        let axis = nd - 1;
        let e = check(&shape, seed, |g, x| g.concat(&[x, x], axis));
        prop_assert!(e <= TOL, "relative error {}", e);
        let e = check(&shape, seed, |g, x| g.slice(x, 0, 0, 1));
        prop_assert!(e <= TOL, "relative error {}", e);
        let e = check(&shape, seed, |g, x| g.sum(x, 0));
        prop_assert!(e <= TOL, "relative error {}", e);
        let e = check(&shape, seed, |g, x| g.mean(x, axis));
        prop_assert!(e <= TOL, "relative error {}", e);
        let e = check(&shape, seed, |g, x| { let s = g.sum_all(x); Ok(g.scale(s, 0.3)) });
        prop_assert!(e <= TOL, "relative error {}", e);
        let e = check(&shape, seed, |g, x| Ok(g.mean_all(x)));
        prop_assert!(e <= TOL, "relative error {}", e);
    }

    #[test]
    fn matmul_passes_gradcheck(b in 1usize..=4, m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in 0u64..1000) {
        let w = randn(&[k, n], seed + 1);
        let batched = randn(&[b, k, n], seed + 2);
        let lhs = randn(&[b, m, k], seed + 3);
        let e = check(&[b, m, k], seed, |g, x| { let c = g.constant(w.clone()); g.matmul(x, c) });
        prop_assert!(e <= TOL, "relative error {}", e);
        let e = check(&[b, m, k], seed, |g, x| { let c = g.constant(batched.clone()); g.matmul(x, c) });
        prop_assert!(e <= TOL, "relative error {}", e);
        let e = check(&[k, n], seed, |g, x| { let c = g.constant(lhs.clone()); g.matmul(c, x) });
        prop_assert!(e <= TOL, "relative error {}", e);
        let e = check(&[b, k, n], seed, |g, x| { let c = g.constant(lhs.clone()); g.matmul(c, x) });
        prop_assert!(e <= TOL, "relative error {}", e);
    }
}

#[test]
fn sum_is_linear_to_machine_precision() {
    let x = randn(&[4, 8, 8], 3);
    let err = finite_diff_check(|g, v| Ok(g.sum_all(v)), &x, EPS).unwrap();
    assert!(err <= 1e-8, "{err}");
}

#[test]
fn cross_entropy_gradcheck() {
    let x = randn(&[6, 5], 11);
    let targets = [0, 4, 2, 2, 1, 3];
    let err = finite_diff_check(|g, v| g.cross_entropy(v, &targets), &x, EPS).unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn mse_of_linear_map_gradcheck() {
    let xs = randn(&[10, 4], 5);
    let ys = randn(&[10, 3], 6);
    let w = randn(&[4, 3], 7);
    let err = finite_diff_check(
        |g, wv| {
            let x = g.constant(xs.clone());
            let y = g.constant(ys.clone());
            let p = g.matmul(x, wv)?;
            g.mse(p, y)
        },
        &w,
        EPS,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn attention_shaped_composite_gradcheck() {
    // scores = softmax(Q Kᵀ / √d) V over a [2, 5, 4] batch
    let q = randn(&[2, 5, 4], 21);
    let err = finite_diff_check(
        |g, x| {
            let kt = g.transpose(x, 1, 2)?;
            let s = g.matmul(x, kt)?;
            let s = g.scale(s, 0.5);
            let p = g.softmax(s);
            let o = g.matmul(p, x)?;
            let n = g.layer_norm(o);
            weighted_sum(g, n, 4)
        },
        &q,
        EPS,
    )
    .unwrap();
    assert!(err <= TOL, "{err}");
}
