use super::nn::{uniform_tensor, Ctx, MultiHeadAttention};
use super::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FD_EPS: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform_tensor(rng, shape, 1.0)
}

/// Central finite differences of `f` with respect to every entry of
/// `inputs[which]`.
fn fd_grad(inputs: &[Tensor], which: usize, f: &dyn Fn(&[Tensor]) -> f64) -> Vec<f64> {
    let mut work = inputs.to_vec();
    (0..inputs[which].numel())
        .map(|j| {
            let orig = work[which].data()[j];
            work[which].data_mut()[j] = orig + FD_EPS;
            let up = f(&work);
            work[which].data_mut()[j] = orig - FD_EPS;
            let down = f(&work);
            work[which].data_mut()[j] = orig;
            (up - down) / (2.0 * FD_EPS)
        })
        .collect()
}

/// Build `loss = Σ w ⊙ op(inputs)` on a fresh graph; returns the loss and
/// analytic gradients for each input.
fn weighted_loss(
    inputs: &[Tensor],
    weights: &Tensor,
    op: &dyn Fn(&mut Graph, &[Var]) -> Var,
) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = op(&mut g, &vars);
    let w = g.constant(weights.clone());
    let wy = g.mul(y, w).unwrap();
    let loss = g.sum(wy).unwrap();
    let lv = g.value(loss).item();
    let grads = g.backward(loss).unwrap();
    let gs = vars.iter().map(|v| grads.wrt(*v).unwrap().clone()).collect();
    (lv, gs)
}

fn check_op(inputs: Vec<Tensor>, out_shape: &[usize], tol: f64, op: &dyn Fn(&mut Graph, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let weights = rand_tensor(&mut rng, out_shape);
    let (_, analytic) = weighted_loss(&inputs, &weights, op);
    let f = |xs: &[Tensor]| weighted_loss(xs, &weights, op).0;
    for (i, a) in analytic.iter().enumerate() {
        let numeric = fd_grad(&inputs, i, &f);
        for (x, y) in a.data().iter().zip(&numeric) {
            assert!(rel_err(*x, *y) < tol, "input {i}: analytic {x} vs numeric {y}");
        }
    }
}

#[test]
fn matmul_hand_cases() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0]);
    let a = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn matmul_gradient_of_sum_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let f = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let (a, b) = (g.constant(xs[0].clone()), g.constant(xs[1].clone()));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c).unwrap();
        g.value(s).item()
    };
    let mut g = Graph::new();
    let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    let s = g.sum(c).unwrap();
    let grads = g.backward(s).unwrap();
    let numeric = fd_grad(&[a.clone(), b.clone()], 0, &f);
    for (x, y) in grads.wrt(va).unwrap().data().iter().zip(&numeric) {
        assert!(rel_err(*x, *y) < 1e-6);
    }
    check_op(vec![a, b], &[3, 2], 1e-6, &|g, v| g.matmul(v[0], v[1]).unwrap());
}

fn ln_plain(x: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let d = x.len();
    let vx = g.constant(Tensor::row(x.to_vec()));
    let gain = g.constant(Tensor::full(&[1, d], 1.0));
    let bias = g.constant(Tensor::zeros(&[1, d]));
    let y = g.layer_norm(vx, gain, bias).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn layer_norm_hand_cases() {
    assert_eq!(ln_plain(&[1.0, 1.0, 1.0, 1.0]), vec![0.0; 4]);
    let y = ln_plain(&[1.0, 3.0]);
    assert!((y[0] + 1.0).abs() < 1e-5 && (y[1] - 1.0).abs() < 1e-5);
    // Degenerate width-1 case normalises to zero.
    assert_eq!(ln_plain(&[7.5]), vec![0.0]);
}

#[test]
fn layer_norm_statistics_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // Scale chosen so the 1e-5 stabiliser is negligible against the variance.
    let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0) * 1e3).collect();
    let y = ln_plain(&x);
    let mean = y.iter().sum::<f64>() / 8.0;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-10);

    let x = rand_tensor(&mut rng, &[3, 8]);
    let gain = rand_tensor(&mut rng, &[1, 8]);
    let bias = rand_tensor(&mut rng, &[1, 8]);
    check_op(vec![x, gain, bias], &[3, 8], 1e-5, &|g, v| g.layer_norm(v[0], v[1], v[2]).unwrap());
}

#[test]
fn softmax_cases_and_jacobian() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(vec![0.0, 0.0]));
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    let x = g.constant(Tensor::row(vec![1000.0, 0.0]));
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data()[0], 1.0);
    assert!(g.value(y).data()[1] >= 0.0 && g.value(y).data()[1] < 1e-300);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[1, 5]);
    let vx = g.constant(x.clone());
    let y = g.softmax(vx).unwrap();
    assert!((g.value(y).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    check_op(vec![x], &[1, 5], 1e-5, &|g, v| g.softmax(v[0]).unwrap());
}

#[test]
fn gelu_cases_and_derivative() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(vec![0.0, 10.0]));
    let y = g.gelu(x).unwrap();
    assert_eq!(g.value(y).data()[0], 0.0);
    assert!((g.value(y).data()[1] - 10.0).abs() < 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = uniform_tensor(&mut rng, &[2, 6], 3.0);
    check_op(vec![x], &[2, 6], 1e-5, &|g, v| g.gelu(v[0]).unwrap());
}

#[test]
fn sigmoid_cases_and_derivative() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(vec![0.0, -40.0, 40.0, 800.0, -800.0]));
    let y = g.sigmoid(x).unwrap();
    let v = g.value(y).data();
    assert_eq!(v[0], 0.5);
    assert!(v[1] > 0.0 && v[1] < 1e-15);
    assert!(v.iter().all(|&s| s > 0.0 && s < 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = uniform_tensor(&mut rng, &[1, 7], 4.0);
    check_op(vec![x], &[1, 7], 1e-6, &|g, v| g.sigmoid(v[0]).unwrap());
}

#[test]
fn tanh_mean_outer_slice_concat_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[3, 4]);
    check_op(vec![x.clone()], &[3, 4], 1e-6, &|g, v| g.tanh(v[0]).unwrap());
    check_op(vec![x.clone()], &[1, 4], 1e-6, &|g, v| g.mean_rows(v[0]).unwrap());
    check_op(vec![x.clone()], &[2, 4], 1e-6, &|g, v| g.slice_rows(v[0], 1, 3).unwrap());
    check_op(vec![x.clone()], &[3, 2], 1e-6, &|g, v| g.slice_cols(v[0], 1, 3).unwrap());
    let a = rand_tensor(&mut rng, &[1, 3]);
    let b = rand_tensor(&mut rng, &[1, 4]);
    check_op(vec![a.clone(), b.clone()], &[1, 12], 1e-6, &|g, v| g.outer(v[0], v[1]).unwrap());
    check_op(vec![a.clone(), b], &[1, 7], 1e-6, &|g, v| g.concat_cols(&[v[0], v[1]]).unwrap());
    let c = rand_tensor(&mut rng, &[2, 4]);
    check_op(vec![x.clone(), c], &[5, 4], 1e-6, &|g, v| g.concat_rows(&[v[0], v[1]]).unwrap());
    let s = rand_tensor(&mut rng, &[1, 1]);
    check_op(vec![x.clone(), s], &[3, 4], 1e-6, &|g, v| g.mul_scalar(v[0], v[1]).unwrap());
    let r = rand_tensor(&mut rng, &[1, 4]);
    check_op(vec![x, r], &[3, 4], 1e-6, &|g, v| g.add_row(v[0], v[1]).unwrap());
}

#[test]
fn attention_single_key_and_uniform_weights() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mha = MultiHeadAttention::new(&mut store, "mha", 4, 2, &mut rng).unwrap();
    let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
    let mut cx = Ctx::new(&store, false, 0.0, &mut drop_rng);
    let q = cx.graph.constant(rand_tensor(&mut rng, &[1, 4]));
    let kv = cx.graph.constant(rand_tensor(&mut rng, &[1, 4]));
    let out = mha.forward(&mut cx, q, kv, kv).unwrap();
    let (_, w) = cx.graph.attention_weights(out.attn).unwrap();
    assert!(w.iter().all(|&x| x == 1.0));
    // Output equals v·W_V·W_O when the single key takes all the weight.
    let v = cx.graph.value(kv).clone();
    let wv = store.get(mha.wv);
    let wo = store.get(mha.wo);
    let mut vw = [0.0; 4];
    for j in 0..4 {
        vw[j] = (0..4).map(|i| v.data()[i] * wv.get(i, j)).sum();
    }
    for j in 0..4 {
        let want: f64 = (0..4).map(|i| vw[i] * wo.get(i, j)).sum();
        assert!((cx.graph.value(out.out).data()[j] - want).abs() < 1e-12);
    }

    let row = rand_tensor(&mut rng, &[1, 4]);
    let keys = Tensor::matrix(3, 4, row.data().repeat(3)).unwrap();
    let k = cx.graph.constant(keys);
    let out = mha.forward(&mut cx, q, k, k).unwrap();
    let (_, w) = cx.graph.attention_weights(out.attn).unwrap();
    assert!(w.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));
}

#[test]
fn attention_matches_hand_roll_and_fd() {
    // heads = 1, one query, three keys, d = 4, hand-set projections.
    let d = 4;
    let wq: Vec<f64> = (0..16).map(|i| ((i as f64) * 0.3).sin() * 0.5).collect();
    let wk: Vec<f64> = (0..16).map(|i| ((i as f64) * 0.7).cos() * 0.5).collect();
    let wv: Vec<f64> = (0..16).map(|i| ((i as f64) * 1.1).sin()).collect();
    let wo: Vec<f64> = (0..16).map(|i| ((i as f64) * 0.9).cos()).collect();
    let q = vec![0.2, -0.4, 0.6, 0.1];
    let keys = vec![0.5, 0.1, -0.3, 0.8, -0.2, 0.4, 0.9, -0.6, 0.3, 0.3, 0.3, 0.3];

    // Straight-line scalar computation.
    let proj = |x: &[f64], w: &[f64]| -> Vec<f64> {
        (0..d).map(|j| (0..d).map(|i| x[i] * w[i * d + j]).sum()).collect()
    };
    let qp = proj(&q, &wq);
    let kp: Vec<Vec<f64>> = (0..3).map(|r| proj(&keys[r * d..(r + 1) * d], &wk)).collect();
    let vp: Vec<Vec<f64>> = (0..3).map(|r| proj(&keys[r * d..(r + 1) * d], &wv)).collect();
    let scores: Vec<f64> = kp
        .iter()
        .map(|k| k.iter().zip(&qp).map(|(a, b)| a * b).sum::<f64>() / 2.0)
        .collect();
    let m = scores.iter().cloned().fold(f64::MIN, f64::max);
    let ex: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = ex.iter().sum();
    let ctx: Vec<f64> = (0..d).map(|j| (0..3).map(|r| ex[r] / z * vp[r][j]).sum()).collect();
    let want = proj(&ctx, &wo);

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mha = MultiHeadAttention::new(&mut store, "mha", d, 1, &mut rng).unwrap();
    for (id, w) in [(mha.wq, &wq), (mha.wk, &wk), (mha.wv, &wv), (mha.wo, &wo)] {
        store.get_mut(id).data_mut().copy_from_slice(w);
    }
    let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
    let mut cx = Ctx::new(&store, false, 0.0, &mut drop_rng);
    let vq = cx.graph.constant(Tensor::matrix(1, d, q.clone()).unwrap());
    let vk = cx.graph.constant(Tensor::matrix(3, d, keys.clone()).unwrap());
    let out = mha.forward(&mut cx, vq, vk, vk).unwrap();
    for (a, b) in cx.graph.value(out.out).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-10);
    }

    // Fused attention gradients w.r.t. q, k, v (multi-head, multi-query).
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = rand_tensor(&mut rng, &[2, 8]);
    let k = rand_tensor(&mut rng, &[5, 8]);
    let v = rand_tensor(&mut rng, &[5, 8]);
    check_op(vec![q, k, v], &[2, 8], 1e-5, &|g, x| g.attention(x[0], x[1], x[2], 2).unwrap());

    // Projection gradients through the full module.
    mha.heads = 2;
    let xq = rand_tensor(&mut rng, &[1, d]);
    let xk = rand_tensor(&mut rng, &[3, d]);
    let loss_of = |store: &ParamStore| {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut cx = Ctx::new(store, false, 0.0, &mut r);
        let q = cx.graph.constant(xq.clone());
        let k = cx.graph.constant(xk.clone());
        let o = mha.forward(&mut cx, q, k, k).unwrap().out;
        let t = cx.graph.tanh(o).unwrap();
        let s = cx.graph.sum(t).unwrap();
        (cx.graph.value(s).item(), cx.graph, s)
    };
    let (_, graph, s) = loss_of(&store);
    let grads = graph.backward(s).unwrap();
    for id in [mha.wq, mha.wk, mha.wv, mha.wo] {
        let analytic = grads.param(id).unwrap().clone();
        for j in 0..analytic.numel() {
            let mut st = store.clone();
            let orig = st.get(id).data()[j];
            st.get_mut(id).data_mut()[j] = orig + FD_EPS;
            let up = loss_of(&st).0;
            st.get_mut(id).data_mut()[j] = orig - FD_EPS;
            let down = loss_of(&st).0;
            let n = (up - down) / (2.0 * FD_EPS);
            assert!(rel_err(analytic.data()[j], n) < 1e-5);
        }
    }
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::zeros(&[1, 6]));
    assert!(matches!(g.attention(q, q, q, 4), Err(TensorError::Config(_))));
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(MultiHeadAttention::new(&mut store, "m", 6, 4, &mut rng).is_err());
}

#[test]
fn dropout_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 100_000], 1.0));
    assert_eq!(g.dropout(x, 0.3, false, &mut rng).unwrap(), x);
    assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    let y = g.dropout(x, 0.3, true, &mut rng).unwrap();
    let mean = g.value(y).data().iter().sum::<f64>() / 1e5;
    assert!((mean - 1.0).abs() < 0.02, "{mean}");
    assert!(matches!(g.dropout(x, 1.0, true, &mut rng), Err(TensorError::Config(_))));
}

#[test]
fn backward_sum_fanout_and_nonscalar_error() {
    let mut g = Graph::new();
    let x = g.input(Tensor::row(vec![1.0, 2.0, 3.0]));
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.input(Tensor::row(vec![1.5, -2.0, 0.5]));
    let xx = g.mul(x, x).unwrap();
    let s = g.sum(xx).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[3.0, -4.0, 1.0]);

    let mut g = Graph::new();
    let x = g.input(Tensor::row(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn bce_gradient_matches_fd() {
    for &(z, y) in &[(0.3, 1.0), (-2.0, 0.0), (4.0, 0.0), (-30.0, 1.0)] {
        let mut g = Graph::new();
        let vz = g.input(Tensor::scalar(z));
        let l = g.bce_with_logits(vz, y).unwrap();
        let grads = g.backward(l).unwrap();
        let f = |z: f64| {
            let mut g = Graph::new();
            let vz = g.constant(Tensor::scalar(z));
            let l = g.bce_with_logits(vz, y).unwrap();
            g.value(l).item()
        };
        let n = (f(z + FD_EPS) - f(z - FD_EPS)) / (2.0 * FD_EPS);
        assert!(rel_err(grads.wrt(vz).unwrap().item(), n) < 1e-6);
    }
}

#[test]
fn param_nodes_are_shared_and_accumulate() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::row(vec![2.0, -1.0]));
    let mut g = Graph::new();
    let a = g.param(&store, w);
    let b = g.param(&store, w);
    assert_eq!(a, b);
    let p = g.mul(a, b).unwrap();
    let s = g.sum(p).unwrap();
    let grads = g.backward(s).unwrap();
    let mut buf = ParamGrads::zeros_like(&store);
    grads.accumulate_into(&mut buf);
    grads.accumulate_into(&mut buf);
    assert_eq!(buf.get(w).data(), &[8.0, -4.0]);
}

fn scalar_store(v: f64) -> (ParamStore, ParamId) {
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::scalar(v));
    (store, id)
}

#[test]
fn adamw_zero_gradient_cases() {
    let (mut store, id) = scalar_store(0.5);
    let grads = ParamGrads::zeros_like(&store);
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, &store);
    opt.step(&mut store, &grads).unwrap();
    assert_eq!(store.get(id).item(), 0.5);

    let mut opt = AdamW::new(AdamWConfig::default(), &store);
    opt.step(&mut store, &grads).unwrap();
    assert_eq!(store.get(id).item(), 0.5 * (1.0 - 1e-3 * 1e-3));
    assert_eq!(opt.steps(), 1);
}

#[test]
fn adamw_three_step_trace() {
    // Hand-stepped with constant gradient 1, lr = wd = 1e-3.
    let trace = [0.49899950001, 0.4979990010205, 0.49699850303149895];
    let (mut store, id) = scalar_store(0.5);
    let mut grads = ParamGrads::zeros_like(&store);
    grads.get_mut(id).data_mut()[0] = 1.0;
    let mut opt = AdamW::new(AdamWConfig::default(), &store);
    for want in trace {
        opt.step(&mut store, &grads).unwrap();
        assert!((store.get(id).item() - want).abs() < 1e-12);
    }
}

#[test]
fn adamw_aborts_on_nan_gradient() {
    let (mut store, id) = scalar_store(0.5);
    let mut grads = ParamGrads::zeros_like(&store);
    grads.get_mut(id).data_mut()[0] = f64::NAN;
    let mut opt = AdamW::new(AdamWConfig::default(), &store);
    let err = opt.step(&mut store, &grads).unwrap_err();
    assert!(matches!(err, TensorError::NonFiniteGradient(ref n) if n == "p"));
    assert_eq!(store.get(id).item(), 0.5);
    assert_eq!(opt.steps(), 0);
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(vec![1e300, 1e300]));
    let y = g.constant(Tensor::row(vec![1e300, 1e300]));
    assert!(matches!(g.mul(x, y), Err(TensorError::NonFinite { op: "mul" })));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(xs in proptest::collection::vec(-500.0f64..500.0, 1..20)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(xs));
        let y = g.softmax(x).unwrap();
        let s: f64 = g.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(g.value(y).data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn sigmoid_strictly_inside_unit_interval(xs in proptest::collection::vec(-1e6f64..1e6, 1..20)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(xs));
        let y = g.sigmoid(x).unwrap();
        prop_assert!(g.value(y).data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn layer_norm_finite_for_finite_input(xs in proptest::collection::vec(-1e6f64..1e6, 2..16)) {
        let y = ln_plain(&xs);
        prop_assert!(y.iter().all(|v| v.is_finite()));
    }
}

use rand::Rng;
