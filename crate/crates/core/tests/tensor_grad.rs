use std::rc::Rc;

use bertswin::rng::{keyed, uniform, ChaCha8Rng};
use bertswin::tensor::{finite_diff_check, finite_diff_check_many, Graph, Tensor, Var};
use bertswin::Result;
use proptest::prelude::*;

const TRIALS: u64 = 20;
// Primitive sweeps use a small step so truncation error stays below TOL.
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| uniform(rng, -1.0, 1.0))
}

/// Random fixed weights so the scalar output depends on every coordinate.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = keyed(seed, 99, 0);
    let w = rand_tensor(&mut rng, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn sweep(name: &str, mut check: impl FnMut(u64, &mut ChaCha8Rng) -> f64) {
    for trial in 0..TRIALS {
        let mut rng = keyed(trial, 42, name.len() as u64);
        let err = check(trial, &mut rng);
        assert!(err <= TOL, "{name} trial {trial}: relative error {err:e}");
    }
}

#[test]
fn elementwise_primitives() {
    sweep("elementwise", |s, rng| {
        let a = rand_tensor(rng, &[3, 4]);
        let b = rand_tensor(rng, &[3, 4]);
        finite_diff_check_many(
            |g, v| {
                let m = g.mul(v[0], v[1])?;
                let d = g.sub(m, v[0])?;
                let e = g.add(d, v[1])?;
                let f = g.scale(e, 1.7);
                let r = g.gelu(f);
                let w = weighted_sum(g, r, s)?;
                let m2 = g.mean(v[1]);
                g.add(w, m2)
            },
            &[a, b],
            H,
            usize::MAX,
        )
        .unwrap()
    });
}

#[test]
fn linear_primitive() {
    sweep("linear", |s, rng| {
        let x = rand_tensor(rng, &[4, 3]);
        let w = rand_tensor(rng, &[3, 5]);
        let b = rand_tensor(rng, &[5]);
        finite_diff_check_many(
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                weighted_sum(g, y, s)
            },
            &[x, w, b],
            H,
            usize::MAX,
        )
        .unwrap()
    });
}

#[test]
fn layernorm_primitive() {
    sweep("layernorm", |s, rng| {
        let x = rand_tensor(rng, &[3, 8]);
        let gm = rand_tensor(rng, &[8]);
        let bt = rand_tensor(rng, &[8]);
        finite_diff_check_many(
            |g, v| {
                let y = g.layernorm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(g, y, s)
            },
            &[x, gm, bt],
            H,
            usize::MAX,
        )
        .unwrap()
    });
}

#[test]
fn layernorm_then_sum_on_eight_vector() {
    sweep("ln-sum", |_, rng| {
        let x = rand_tensor(rng, &[8]);
        finite_diff_check(
            |g, x| {
                let one = g.constant(Tensor::ones(&[8]));
                let zero = g.constant(Tensor::zeros(&[8]));
                let y = g.layernorm(x, one, zero, 1e-5)?;
                let sq = g.mul(y, x)?;
                Ok(g.sum(sq))
            },
            &x,
            H,
        )
        .unwrap()
    });
}

#[test]
fn softmax_primitive() {
    sweep("softmax", |s, rng| {
        let x = rand_tensor(rng, &[3, 5]);
        finite_diff_check(
            |g, x| {
                let y = g.softmax(x)?;
                weighted_sum(g, y, s)
            },
            &x,
            H,
        )
        .unwrap()
    });
}

#[test]
fn shape_primitives() {
    sweep("shape", |s, rng| {
        let x = rand_tensor(rng, &[2, 3, 4]);
        let tok = rand_tensor(rng, &[4]);
        finite_diff_check_many(
            |g, v| {
                let p = g.permute(v[0], &[2, 0, 1])?;
                let r = g.reshape(p, &[4, 6])?;
                let rows = g.gather_rows(r, Rc::new(vec![3, 1, 1]))?;
                let rt = g.permute(rows, &[1, 0])?;
                let rt = g.reshape(rt, &[6, 3])?;
                let tok = mask_token_from(g, v[1])?;
                let sc = g.scatter_tokens(rt, tok, Rc::new(vec![4, 0, 2, 7, 5, 1]), 9)?;
                weighted_sum(g, sc, s)
            },
            &[x, tok],
            H,
            usize::MAX,
        )
        .unwrap()
    });
}

// mask token of width 3 derived from the 4-vector input so its gradient is exercised
fn mask_token_from(g: &mut Graph, tok: Var) -> Result<Var> {
    let r = g.reshape(tok, &[4, 1])?;
    let rows = g.gather_rows(r, Rc::new(vec![0, 2, 3]))?;
    g.reshape(rows, &[3])
}

#[test]
fn conv3d_primitive() {
    sweep("conv3d", |s, rng| {
        let x = rand_tensor(rng, &[2, 2, 5, 4, 3]);
        let k = rand_tensor(rng, &[3, 2, 3, 2, 3]);
        let b = rand_tensor(rng, &[3]);
        finite_diff_check_many(
            |g, v| {
                let y = g.conv3d(v[0], v[1], [2, 1, 2], [1, 0, 1])?;
                let y = g.channel_bias(y, v[2], true)?;
                weighted_sum(g, y, s)
            },
            &[x, k, b],
            H,
            usize::MAX,
        )
        .unwrap()
    });
}

#[test]
fn conv_transpose3d_primitive() {
    sweep("convT", |s, rng| {
        let x = rand_tensor(rng, &[2, 3, 3, 2]);
        let k = rand_tensor(rng, &[2, 3, 2, 3, 2]);
        let b = rand_tensor(rng, &[3]);
        finite_diff_check_many(
            |g, v| {
                let y = g.conv_transpose3d(v[0], v[1], [2, 2, 1], [0, 1, 0])?;
                let y = g.channel_bias(y, v[2], false)?;
                weighted_sum(g, y, s)
            },
            &[x, k, b],
            H,
            usize::MAX,
        )
        .unwrap()
    });
}

#[test]
fn attention_primitive() {
    sweep("attention", |s, rng| {
        let q = rand_tensor(rng, &[4, 3, 2]);
        let k = rand_tensor(rng, &[4, 3, 2]);
        let v = rand_tensor(rng, &[4, 3, 2]);
        let ninf = f64::NEG_INFINITY;
        #[rustfmt::skip]
        let mask = Tensor::new(vec![2, 3, 3], vec![
            0.0, ninf, 0.0,  ninf, 0.0, ninf,  0.0, 0.0, 0.0,
            0.0, 0.0, 0.0,   0.0, 0.0, 0.0,    ninf, 0.0, 0.0,
        ])
        .unwrap();
        finite_diff_check_many(
            |g, vars| {
                let y = g.attention(vars[0], vars[1], vars[2], Some(&mask))?;
                weighted_sum(g, y, s)
            },
            &[q, k, v],
            H,
            usize::MAX,
        )
        .unwrap()
    });
}

#[test]
fn scalar_fn_primitive() {
    sweep("scalar_fn", |_, rng| {
        let x = rand_tensor(rng, &[6]);
        finite_diff_check(
            |g, x| {
                let y = g.gelu(x);
                let vals = g.value(y).data().to_vec();
                let value = vals.iter().map(|v| v.powi(3)).sum();
                let grad = vals.iter().map(|v| 3.0 * v * v).collect();
                g.scalar_fn(y, value, grad)
            },
            &x,
            H,
        )
        .unwrap()
    });
}

#[test]
fn stem_like_composite_matches_finite_differences() {
    let mut rng = keyed(7, 42, 1000);
    let x = rand_tensor(&mut rng, &[1, 8, 8, 8]);
    // fan-in scaled so activations stay O(1) and no GELU saturates
    let scaled = |rng: &mut ChaCha8Rng, shape: &[usize], fan_in: f64| {
        let t = rand_tensor(rng, shape);
        Tensor::new(shape.to_vec(), t.data().iter().map(|v| v / fan_in.sqrt()).collect()).unwrap()
    };
    let k1 = scaled(&mut rng, &[4, 1, 3, 3, 3], 27.0);
    let k2 = scaled(&mut rng, &[6, 4, 3, 3, 3], 108.0);
    let w = scaled(&mut rng, &[48, 5], 48.0);
    let err = finite_diff_check_many(
        |g, v| {
            let h = g.conv3d(v[0], v[1], [2; 3], [1; 3])?;
            let h = g.gelu(h);
            let h = g.conv3d(h, v[2], [2; 3], [1; 3])?;
            let h = g.gelu(h);
            let h = g.reshape(h, &[1, 48])?;
            let y = g.linear(h, v[3], None)?;
            let y = g.mul(y, y)?;
            Ok(g.mean(y))
        },
        &[x, k1, k2, w],
        1e-3,
        64,
    )
    .unwrap();
    assert!(err <= TOL, "composite relative error {err:e}");
}

#[test]
fn sum_has_zero_check_error() {
    let x = Tensor::from_vec(vec![0.3, -2.0, 5.0]);
    let err = finite_diff_check(|g, x| Ok(g.sum(x)), &x, H).unwrap();
    assert!(err < 1e-9);
}

fn conv_adjoint_gap(seed: u64, stride: usize, pad: usize, k: usize) -> f64 {
    let mut rng = keyed(seed, 43, 0);
    let a = rand_tensor(&mut rng, &[2, 4, 4, 4]);
    let kern = rand_tensor(&mut rng, &[3, 2, k, k, k]);
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let kv = g.constant(kern);
    let ca = g.conv3d(av, kv, [stride; 3], [pad; 3]).unwrap();
    let b = rand_tensor(&mut rng, g.shape(ca));
    let bv = g.constant(b.clone());
    let tb = g.conv_transpose3d(bv, kv, [stride; 3], [pad; 3]).unwrap();
    assert_eq!(g.shape(tb), a.shape());
    let lhs = g.value(ca).dot(&b);
    let rhs = a.dot(g.value(tb));
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12)
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(32) })]

    #[test]
    fn conv_adjoint_identity(seed in 0u64..10_000, stride in 1usize..3, pad in 0usize..2, k in 1usize..4) {
        prop_assume!(k <= 4 + 2 * pad);
        prop_assume!((4 + 2 * pad - k) % stride == 0);
        prop_assert!(conv_adjoint_gap(seed, stride, pad, k) <= 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..10_000, scale in 0.1f64..500.0) {
        let mut rng = keyed(seed, 44, 0);
        let x = Tensor::from_fn(&[5, 7], |_| uniform(&mut rng, -scale, scale));
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = g.softmax(xv).unwrap();
        for row in g.value(y).data().chunks(7) {
            prop_assert!(row.iter().all(|p| *p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn layernorm_rows_have_unit_variance(seed in 0u64..10_000, scale in 0.5f64..100.0) {
        let mut rng = keyed(seed, 45, 0);
        let x = Tensor::from_fn(&[4, 16], |_| uniform(&mut rng, -scale, scale));
        let mut g = Graph::new();
        let xv = g.constant(x);
        let one = g.constant(Tensor::ones(&[16]));
        let zero = g.constant(Tensor::zeros(&[16]));
        let y = g.layernorm(xv, one, zero, 0.0).unwrap();
        for row in g.value(y).data().chunks(16) {
            let m = row.iter().sum::<f64>() / 16.0;
            let v = row.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / 16.0;
            prop_assert!(m.abs() <= 1e-12);
            prop_assert!((v - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn forward_is_bit_identical(seed in 0u64..10_000) {
        let run = || {
            let mut rng = keyed(seed, 46, 0);
            let x = rand_tensor(&mut rng, &[2, 6, 6, 6]);
            let k = rand_tensor(&mut rng, &[3, 2, 3, 3, 3]);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let kv = g.constant(k);
            let y = g.conv3d(xv, kv, [2; 3], [1; 3]).unwrap();
            let y = g.reshape(y, &[3, 27]).unwrap();
            let y = g.softmax(y).unwrap();
            g.value(y).clone()
        };
        let a = run();
        let b = run();
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
