use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

const TOL: f64 = 1e-6;

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Reduce any output to a scalar with fixed random weights, so every output
/// entry contributes a distinct gradient.
fn weighted_sum(g: &mut Graph, y: Var) -> Result<Var> {
    let w = g.constant(rand_t(g.shape(y), 999));
    let p = g.mul(y, w)?;
    g.sum(p)
}

use crate::Result;

fn check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let err = check_gradients(
        |g, v| {
            let y = f(g, v)?;
            weighted_sum(g, y)
        },
        inputs,
        GRADCHECK_STEP,
    )
    .unwrap();
    assert!(err < TOL, "relative gradient error {err}");
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[test]
fn grad_add_sub_mul_broadcast() {
    let a = rand_t(&[2, 3, 4], 1);
    let b = rand_t(&[3, 1], 2);
    check(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check(&[a, b], |g, v| g.mul(v[0], v[1]));
    let c = rand_t(&[2, 1, 4], 3);
    let d = rand_t(&[4], 4);
    check(&[c, d], |g, v| g.mul(v[1], v[0]));
}

#[test]
fn broadcast_forward_matches_manual() {
    let mut g = Graph::no_grad();
    let a = g.constant(Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::new(&[3], vec![10.0, 20.0, 30.0]).unwrap());
    let c = g.add(a, b).unwrap();
    assert_eq!(g.shape(c), &[2, 3]);
    assert_eq!(g.value(c).data(), &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
    let bad = g.constant(Tensor::zeros(&[4]));
    assert!(g.add(b, bad).is_err());
}

#[test]
fn grad_elementwise_unary() {
    let a = rand_t(&[3, 5], 5);
    check(std::slice::from_ref(&a), |g, v| g.silu(v[0]));
    check(std::slice::from_ref(&a), |g, v| g.scale(v[0], -2.5));
    check(std::slice::from_ref(&a), |g, v| g.add_scalar(v[0], 0.7));
    check(std::slice::from_ref(&a), |g, v| g.mean(v[0]));
    check(&[a], |g, v| g.sum(v[0]));
}

#[test]
fn matmul_forward_and_grad() {
    let a = rand_t(&[2, 3, 4], 6);
    let w = rand_t(&[4, 5], 7);
    let mut g = Graph::no_grad();
    let (va, vw) = (g.constant(a.clone()), g.constant(w.clone()));
    let y = g.matmul(va, vw).unwrap();
    assert_eq!(g.shape(y), &[2, 3, 5]);
    let oracle = naive_matmul(a.data(), w.data(), 6, 4, 5);
    for (x, o) in g.value(y).data().iter().zip(&oracle) {
        assert!((x - o).abs() < 1e-12);
    }
    check(&[a.clone(), w], |g, v| g.matmul(v[0], v[1]));

    let b = rand_t(&[2, 4, 3], 8);
    let mut g = Graph::no_grad();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let y = g.matmul(va, vb).unwrap();
    for i in 0..2 {
        let oracle = naive_matmul(&a.data()[i * 12..], &b.data()[i * 12..], 3, 4, 3);
        for (x, o) in g.value(y).data()[i * 9..(i + 1) * 9].iter().zip(&oracle) {
            assert!((x - o).abs() < 1e-12);
        }
    }
    check(&[a, b], |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn matmul_rejects_bad_shapes() {
    let mut g = Graph::no_grad();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    assert!(g.matmul(a, b).is_err());
    let v = g.constant(Tensor::zeros(&[3]));
    assert!(g.matmul(a, v).is_err());
}

#[test]
fn shape_ops_grad() {
    let a = rand_t(&[2, 3, 4], 9);
    check(std::slice::from_ref(&a), |g, v| g.reshape(v[0], &[6, 4]));
    check(std::slice::from_ref(&a), |g, v| g.permute(v[0], &[2, 0, 1]));
    check(std::slice::from_ref(&a), |g, v| g.transpose(v[0]));
    check(std::slice::from_ref(&a), |g, v| g.narrow(v[0], 1, 1, 2));
    let b = rand_t(&[2, 5, 4], 10);
    check(&[a.clone(), b], |g, v| g.concat(&[v[0], v[1]], 1));
    let c = rand_t(&[2, 3, 1], 11);
    check(&[a, c], |g, v| g.concat(&[v[1], v[0]], 2));
}

#[test]
fn permute_forward() {
    let t = Tensor::from_fn(&[2, 3], |i| i as f64);
    let mut g = Graph::no_grad();
    let v = g.constant(t);
    let p = g.permute(v, &[1, 0]).unwrap();
    assert_eq!(g.value(p).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    assert!(g.permute(v, &[0, 0]).is_err());
}

#[test]
fn concat_then_narrow_round_trips() {
    let a = rand_t(&[2, 3, 4], 12);
    let b = rand_t(&[2, 2, 4], 13);
    let mut g = Graph::no_grad();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.concat(&[va, vb], 1).unwrap();
    let na = g.narrow(c, 1, 0, 3).unwrap();
    let nb = g.narrow(c, 1, 3, 2).unwrap();
    assert_eq!(g.value(na), &a);
    assert_eq!(g.value(nb), &b);
    assert!(g.narrow(c, 1, 4, 2).is_err());
}

#[test]
fn normalisation_grads() {
    let a = rand_t(&[3, 6], 14);
    check(std::slice::from_ref(&a), |g, v| g.softmax(v[0]));
    check(&[a], |g, v| g.layer_norm(v[0], 1e-5));
}

#[test]
fn softmax_rows_sum_to_one_and_survive_large_inputs() {
    let mut g = Graph::no_grad();
    let v = g.constant(Tensor::new(&[2, 3], vec![1000.0, 1001.0, 999.0, -5.0, 0.0, 5.0]).unwrap());
    let s = g.softmax(v).unwrap();
    for row in g.value(s).data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_output_is_standardised() {
    let mut g = Graph::no_grad();
    let v = g.constant(rand_t(&[4, 16], 15));
    let y = g.layer_norm(v, 0.0).unwrap();
    for row in g.value(y).data().chunks(16) {
        let m = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 16.0;
        assert!(m.abs() < 1e-12 && (var - 1.0).abs() < 1e-10);
    }
}

#[test]
fn embedding_grad_accumulates_repeats() {
    let table = rand_t(&[5, 3], 16);
    check(std::slice::from_ref(&table), |g, v| g.embedding(v[0], &[4, 1, 4, 0]));
    let mut g = Graph::new();
    let t = g.leaf(table);
    let e = g.embedding(t, &[2, 2]).unwrap();
    let s = g.sum(e).unwrap();
    let grads = g.backward(s).unwrap();
    let gt = grads.get(t).unwrap();
    assert_eq!(&gt.data()[6..9], &[2.0, 2.0, 2.0]);
    assert_eq!(gt.data()[0], 0.0);
    assert!(g.embedding(t, &[5]).is_err());
}

fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Vec<f64> {
    let (bs, cin, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, _, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let tout = (t + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; bs * cout * tout];
    for bi in 0..bs {
        for o in 0..cout {
            for to in 0..tout {
                let mut acc = b.map_or(0.0, |b| b.data()[o]);
                for c in 0..cin {
                    for kk in 0..k {
                        let p = (to * stride + kk) as isize - pad as isize;
                        if p >= 0 && (p as usize) < t {
                            acc += w.data()[(o * cin + c) * k + kk] * x.data()[(bi * cin + c) * t + p as usize];
                        }
                    }
                }
                out[(bi * cout + o) * tout + to] = acc;
            }
        }
    }
    out
}

#[test]
fn conv1d_matches_direct_sum() {
    for &(k, stride, pad, t) in &[(3, 1, 1, 7), (1, 1, 0, 5), (4, 2, 1, 8), (5, 1, 0, 9)] {
        let x = rand_t(&[2, 3, t], 17);
        let w = rand_t(&[4, 3, k], 18);
        let b = rand_t(&[4], 19);
        let mut g = Graph::no_grad();
        let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv1d(vx, vw, Some(vb), stride, pad).unwrap();
        let oracle = naive_conv(&x, &w, Some(&b), stride, pad);
        assert_eq!(g.value(y).numel(), oracle.len());
        for (a, o) in g.value(y).data().iter().zip(&oracle) {
            assert!((a - o).abs() < 1e-12);
        }
        check(&[x.clone(), w.clone(), b], |g, v| g.conv1d(v[0], v[1], Some(v[2]), stride, pad));
        check(&[x, w], |g, v| g.conv1d(v[0], v[1], None, stride, pad));
    }
}

#[test]
fn conv1d_rejects_fractional_output() {
    let mut g = Graph::no_grad();
    let x = g.constant(Tensor::zeros(&[1, 1, 8]));
    let w = g.constant(Tensor::zeros(&[1, 1, 3]));
    assert!(g.conv1d(x, w, None, 2, 0).is_err());
    let w2 = g.constant(Tensor::zeros(&[1, 2, 3]));
    assert!(g.conv1d(x, w2, None, 1, 1).is_err());
}

fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Vec<f64> {
    let (b, tq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let tk = k.shape()[1];
    let dh = d / heads;
    let mut out = vec![0.0; b * tq * d];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..tq {
                let scores: Vec<f64> = (0..tk)
                    .map(|j| {
                        (0..dh)
                            .map(|c| q.data()[(bi * tq + i) * d + h * dh + c] * k.data()[(bi * tk + j) * d + h * dh + c])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().copied().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    out[(bi * tq + i) * d + h * dh + c] =
                        (0..tk).map(|j| e[j] / z * v.data()[(bi * tk + j) * d + h * dh + c]).sum();
                }
            }
        }
    }
    out
}

#[test]
fn attention_matches_reference_and_grads() {
    let q = rand_t(&[2, 3, 8], 20);
    let k = rand_t(&[2, 5, 8], 21);
    let v = rand_t(&[2, 5, 8], 22);
    let mut g = Graph::no_grad();
    let (vq, vk, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let y = g.attention(vq, vk, vv, 2).unwrap();
    let oracle = naive_attention(&q, &k, &v, 2);
    for (a, o) in g.value(y).data().iter().zip(&oracle) {
        assert!((a - o).abs() < 1e-12);
    }
    check(&[q, k, v], |g, x| g.attention(x[0], x[1], x[2], 2));
    // self-attention with one shared input accumulates three contributions
    let x = rand_t(&[1, 4, 4], 23);
    check(&[x], |g, v| g.attention(v[0], v[0], v[0], 2));
}

#[test]
fn rope_is_a_rotation() {
    let x = rand_t(&[2, 5, 8], 24);
    let pos = [0.0, 1.0, 2.0, 3.0, 4.0];
    check(std::slice::from_ref(&x), |g, v| g.rope(v[0], &pos, 2, 100.0));
    let mut g = Graph::no_grad();
    let v = g.constant(x.clone());
    let y = g.rope(v, &pos, 2, 100.0).unwrap();
    // norms per (row, pair) are preserved; position 0 is the identity
    for (a, b) in x.data().chunks(2).zip(g.value(y).data().chunks(2)) {
        assert!(((a[0] * a[0] + a[1] * a[1]) - (b[0] * b[0] + b[1] * b[1])).abs() < 1e-12);
    }
    assert!(x.data()[..8].iter().zip(&g.value(y).data()[..8]).all(|(a, b)| (a - b).abs() < 1e-15));
}

#[test]
fn rope_dot_products_depend_on_offset_only() {
    let mut g = Graph::no_grad();
    let q = g.constant(rand_t(&[1, 1, 4], 25));
    let k = g.constant(rand_t(&[1, 1, 4], 26));
    let dot = |g: &mut Graph, pq: f64, pk: f64| {
        let a = g.rope(q, &[pq], 1, 10.0).unwrap();
        let b = g.rope(k, &[pk], 1, 10.0).unwrap();
        g.value(a).data().iter().zip(g.value(b).data()).map(|(x, y)| x * y).sum::<f64>()
    };
    let d1 = dot(&mut g, 3.0, 1.0);
    let d2 = dot(&mut g, 10.0, 8.0);
    assert!((d1 - d2).abs() < 1e-12);
}

#[test]
fn composite_chain_grad() {
    // a transformer-ish block: LN → linear → SiLU → linear, residual, mean
    let x = rand_t(&[2, 4, 6], 27);
    let w1 = rand_t(&[6, 8], 28).map(|v| v * 0.3);
    let w2 = rand_t(&[8, 6], 29).map(|v| v * 0.3);
    let err = check_gradients(
        |g, v| {
            let h = g.layer_norm(v[0], 1e-6)?;
            let h = g.matmul(h, v[1])?;
            let h = g.silu(h)?;
            let h = g.matmul(h, v[2])?;
            let y = g.add(v[0], h)?;
            let y = g.mul(y, y)?;
            g.mean(y)
        },
        &[x, w1, w2],
        GRADCHECK_STEP,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::zeros(&[2]));
    assert!(g.backward(a).is_err());
}

#[test]
fn non_finite_values_are_reported() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::new(&[1], vec![f64::MAX]).unwrap());
    assert!(matches!(g.scale(a, 10.0), Err(crate::Error::NonFinite(_))));
    g.set_check_finite(false);
    assert!(g.scale(a, 10.0).is_ok());
}

#[test]
fn no_grad_graph_matches_grad_graph() {
    let x = rand_t(&[2, 3, 4], 30);
    let run = |g: &mut Graph| {
        let v = g.leaf(x.clone());
        let s = g.softmax(v).unwrap();
        let t = g.silu(s).unwrap();
        g.value(t).clone()
    };
    assert_eq!(run(&mut Graph::new()), run(&mut Graph::no_grad()));
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::full(&[2], 1.0)).unwrap();
    let b = store.add("b", Tensor::full(&[2], 2.0)).unwrap();
    let mut g = Graph::with_trainable([b]);
    let (va, vb) = (g.param(&store, a), g.param(&store, b));
    assert_eq!(g.param(&store, a), va);
    let p = g.mul(va, vb).unwrap();
    let s = g.sum(p).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.param(a).is_none());
    assert_eq!(grads.param(b).unwrap().data(), &[1.0, 1.0]);
    assert_eq!(grads.params().len(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn broadcast_add_grad_sums_over_broadcast_axes(
        rows in 1usize..5, cols in 1usize..5, seed in 0u64..1000,
    ) {
        let a = rand_t(&[rows, cols], seed);
        let b = rand_t(&[cols], seed + 1);
        let mut g = Graph::new();
        let (va, vb) = (g.leaf(a), g.leaf(b));
        let c = g.add(va, vb).unwrap();
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        prop_assert!(grads.get(vb).unwrap().data().iter().all(|&v| (v - rows as f64).abs() < 1e-12));
        prop_assert!(grads.get(va).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn matmul_grad_random_shapes(
        m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000,
    ) {
        let a = rand_t(&[m, k], seed);
        let b = rand_t(&[k, n], seed + 7);
        let err = check_gradients(
            |g, v| { let y = g.matmul(v[0], v[1])?; let y = g.mul(y, y)?; g.sum(y) },
            &[a, b],
            GRADCHECK_STEP,
        ).unwrap();
        prop_assert!(err < TOL);
    }

    #[test]
    fn softmax_is_shift_invariant(
        x in prop::collection::vec(-20.0f64..20.0, 1..10), c in -50.0f64..50.0,
    ) {
        let n = x.len();
        let mut g = Graph::no_grad();
        let a = g.constant(Tensor::new(&[n], x.clone()).unwrap());
        let b = g.constant(Tensor::new(&[n], x.iter().map(|v| v + c).collect()).unwrap());
        let sa = g.softmax(a).unwrap();
        let sb = g.softmax(b).unwrap();
        prop_assert!(g.value(sa).max_abs_diff(g.value(sb)) < 1e-12);
    }
}
