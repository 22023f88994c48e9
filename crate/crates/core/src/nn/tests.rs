use super::*;
use crate::rng;
use rand::Rng as _;

fn rand_tensor(r: &mut rng::Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect())
}

/// Scalar loss `Σ y ⊙ R` with a fixed random projection `R`.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let t = tape.value(y);
    let mut r = rng::stream(seed, &[77]);
    let proj = rand_tensor(&mut r, t.rows, t.cols);
    let p = tape.constant(proj);
    let m = tape.mul(y, p);
    tape.sum(m)
}

fn store_with(shapes: &[(usize, usize)], seed: u64) -> (ParamStore, Vec<ParamId>) {
    let mut s = ParamStore::new(seed);
    let ids = shapes.iter().enumerate().map(|(i, &(r, c))| s.add(&format!("p{i}"), r, c, Init::Glorot)).collect();
    (s, ids)
}

fn check(shapes: &[(usize, usize)], seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let (mut store, ids) = store_with(shapes, seed);
    max_relative_error(&mut store, 1e-5, |tape| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
        let y = f(tape, &vars);
        Ok(project(tape, y, seed))
    })
    .unwrap()
}

#[test]
fn per_op_finite_differences() {
    for seed in 0..5 {
        let tol = 1e-4;
        assert!(check(&[(3, 4), (4, 2)], seed, |t, v| t.matmul(v[0], v[1])) < tol);
        assert!(check(&[(3, 4), (1, 4)], seed, |t, v| t.add_bias(v[0], v[1])) < tol);
        assert!(check(&[(3, 4), (3, 4)], seed, |t, v| t.add(v[0], v[1])) < tol);
        assert!(check(&[(3, 4), (3, 4)], seed, |t, v| t.sub(v[0], v[1])) < tol);
        assert!(check(&[(3, 4), (3, 4)], seed, |t, v| t.mul(v[0], v[1])) < tol);
        assert!(check(&[(3, 4), (3, 4)], seed, |t, v| t.min(v[0], v[1])) < tol);
        assert!(check(&[(3, 4)], seed, |t, v| t.affine(v[0], -1.7, 0.3)) < tol);
        assert!(check(&[(3, 4)], seed, |t, v| t.relu(v[0])) < tol);
        assert!(check(&[(3, 4)], seed, |t, v| t.exp(v[0])) < tol);
        assert!(check(&[(3, 4)], seed, |t, v| {
            let e = t.exp(v[0]);
            t.ln(e)
        }) < tol);
        assert!(check(&[(3, 4)], seed, |t, v| t.clamp(v[0], -0.5, 0.5)) < tol);
        assert!(check(&[(3, 5), (1, 5), (1, 5)], seed, |t, v| t.layer_norm_rows(v[0], v[1], v[2])) < tol);
        assert!(check(&[(4, 3)], seed, |t, v| t.gather_rows(v[0], vec![2, 0, 2, 3, 1])) < tol);
        assert!(check(&[(5, 3)], seed, |t, v| t.scatter_add_rows(v[0], vec![1, 0, 1, 3, 1], 4)) < tol);
        assert!(check(&[(3, 2), (3, 4)], seed, |t, v| t.concat_cols(&[v[0], v[1], v[0]])) < tol);
        assert!(check(&[(3, 4)], seed, |t, v| t.reshape(v[0], 2, 6)) < tol);
        assert!(check(&[(3, 4)], seed, |t, v| t.sum_rows(v[0])) < tol);
        assert!(check(&[(3, 4)], seed, |t, v| t.log_softmax_rows(v[0])) < tol);
        assert!(check(&[(3, 4)], seed, |t, v| t.pick_cols(v[0], vec![3, 0, 2])) < tol);
        assert!(check(&[(3, 4)], seed, |t, v| t.mean(v[0])) < tol);
    }
}

#[test]
fn mlp_identity_and_zero() {
    let mut store = ParamStore::new(1);
    let mlp = Mlp::new(&mut store, "m", 3, &[3], OutAct::Linear);
    *store.value_mut(mlp.output_layer().w) = Tensor::identity(3);
    let x = Tensor::from_vec(2, 3, vec![0.5, -1.0, 2.0, 3.0, 0.0, -0.25]);
    let mut tape = Tape::new(&store);
    let xv = tape.constant(x.clone());
    let y = mlp.forward(&mut tape, xv).unwrap();
    assert_eq!(tape.value(y), &x);

    let mut store = ParamStore::new(1);
    let mlp = Mlp::new(&mut store, "m", 3, &[4, 2], OutAct::Relu);
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with(".w") || store.name(id).ends_with(".b") {
            store.value_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut tape = Tape::new(&store);
    let xv = tape.constant(x);
    let y = mlp.forward(&mut tape, xv).unwrap();
    assert!(tape.value(y).data.iter().all(|&v| v == 0.0));
    let bad = tape.constant(Tensor::zeros(1, 5));
    assert!(mlp.forward(&mut tape, bad).is_err());
}

#[test]
fn mlp_finite_differences() {
    for seed in 0..4 {
        let mut store = ParamStore::new(seed);
        let mlp = Mlp::new(&mut store, "m", 4, &[6, 5, 3], OutAct::Linear);
        let x = rand_tensor(&mut rng::stream(seed, &[1]), 5, 4);
        let err = max_relative_error(&mut store, 1e-5, |t| {
            let xv = t.constant(x.clone());
            let y = mlp.forward(t, xv)?;
            Ok(project(t, y, seed))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

fn ring(n: usize, r: &mut rng::Rng) -> MessageGraph {
    let mut g = MessageGraph::new(n);
    for i in 0..n {
        g.add_edge(i, (i + 1) % n, r.gen_range(-1.0..1.0));
    }
    g.add_edge(0, n / 2, 0.3);
    g
}

#[test]
fn mpnn_edgeless_graph_uses_own_features_only() {
    let mut store = ParamStore::new(3);
    let layer = MpnnLayer::new(&mut store, "l", 4, &[5, 5], &[6, 4], false);
    let x = rand_tensor(&mut rng::stream(3, &[]), 3, 4);
    let g = MessageGraph::new(3);
    let mut tape = Tape::new(&store);
    let xv = tape.constant(x.clone());
    let full = layer.forward(&mut tape, xv, &g).unwrap();
    // each node alone gives the same embedding
    for i in 0..3 {
        let xi = tape.constant(Tensor::row(x.row_slice(i).to_vec()));
        let yi = layer.forward(&mut tape, xi, &MessageGraph::new(1)).unwrap();
        let a = tape.value(full).row_slice(i).to_vec();
        assert_eq!(a, tape.value(yi).data);
    }
}

#[test]
fn mpnn_permutation_equivariance() {
    let mut r = rng::stream(4, &[]);
    let mut store = ParamStore::new(4);
    let l1 = MpnnLayer::new(&mut store, "a", 3, &[8, 8], &[8, 6], false);
    let l2 = MpnnLayer::new(&mut store, "b", 6, &[8, 8], &[8, 6], true);
    let n = 7;
    let g = ring(n, &mut r);
    let x = rand_tensor(&mut r, n, 3);
    let perm: Vec<usize> = vec![3, 6, 0, 2, 5, 1, 4]; // new id of old node i
    let mut gp = MessageGraph::new(n);
    for e in 0..g.num_directed() / 2 {
        gp.add_edge(perm[g.src[2 * e]], perm[g.dst[2 * e]], g.edge_feats[2 * e]);
    }
    let mut xp = Tensor::zeros(n, 3);
    for i in 0..n {
        xp.data[perm[i] * 3..perm[i] * 3 + 3].copy_from_slice(x.row_slice(i));
    }
    let run = |x: &Tensor, g: &MessageGraph| {
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x.clone());
        let h = l1.forward(&mut tape, xv, g).unwrap();
        let h = l2.forward(&mut tape, h, g).unwrap();
        tape.value(h).clone()
    };
    let (a, b) = (run(&x, &g), run(&xp, &gp));
    for i in 0..n {
        for (u, v) in a.row_slice(i).iter().zip(b.row_slice(perm[i])) {
            assert!((u - v).abs() < 1e-9);
        }
    }
}

#[test]
fn mpnn_finite_differences() {
    for seed in 0..3 {
        let mut r = rng::stream(seed, &[5]);
        let mut store = ParamStore::new(seed);
        let l1 = MpnnLayer::new(&mut store, "a", 3, &[4, 4], &[4, 3], false);
        let l2 = MpnnLayer::new(&mut store, "b", 3, &[4, 4], &[4, 3], true);
        let g = ring(5, &mut r);
        let x = rand_tensor(&mut r, 5, 3);
        let err = max_relative_error(&mut store, 1e-5, |t| {
            let xv = t.constant(x.clone());
            let h = l1.forward(t, xv, &g)?;
            let h = l2.forward(t, h, &g)?;
            let s = t.sum_rows(h);
            Ok(project(t, s, seed))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn softmax_and_layer_norm() {
    let p = softmax(&[0.3, 0.3, 0.3, 0.3]);
    assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let a = softmax(&[1.0, -2.0, 0.5]);
    let b = softmax(&[101.0, 98.0, 100.5]);
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(layer_norm(&[2.0; 5]).iter().all(|&v| v == 0.0));
    let y = layer_norm(&[1.0, 4.0, -2.0, 7.0]);
    let mean = y.iter().sum::<f64>() / 4.0;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-6);
}

#[test]
fn backward_basics() {
    let (store, ids) = store_with(&[(1, 3)], 9);
    let x = Tensor::from_vec(3, 1, vec![0.5, -2.0, 4.0]);
    let mut tape = Tape::new(&store);
    let w = tape.param(ids[0]);
    let xv = tape.constant(x.clone());
    let y = tape.matmul(w, xv);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(ids[0]).unwrap().data, x.data);
    // non-scalar loss
    let v = tape.param(ids[0]);
    assert!(tape.backward(v).is_err());
    // detached branch contributes nothing
    let d = tape.detach(w);
    let s = tape.sum(d);
    let g = tape.backward(s).unwrap();
    assert!(g.get(ids[0]).is_none());
}

#[test]
fn gradients_accumulate_until_zeroed() {
    let (mut store, ids) = store_with(&[(2, 2)], 10);
    let grads = {
        let mut tape = Tape::new(&store);
        let w = tape.param(ids[0]);
        let s = tape.sum(w);
        tape.backward(s).unwrap()
    };
    store.accumulate(&grads);
    store.accumulate(&grads);
    assert_eq!(store.grad(ids[0]).data, vec![2.0; 4]);
    store.zero_grad();
    assert_eq!(store.grad(ids[0]).data, vec![0.0; 4]);
}

#[test]
fn forward_backward_is_deterministic() {
    let run = || {
        let mut store = ParamStore::new(12);
        let mlp = Mlp::new(&mut store, "m", 3, &[7, 2], OutAct::Linear);
        let mut tape = Tape::new(&store);
        let x = tape.constant(rand_tensor(&mut rng::stream(12, &[]), 4, 3));
        let y = mlp.forward(&mut tape, x).unwrap();
        let l = project(&mut tape, y, 12);
        let g = tape.backward(l).unwrap();
        (tape.scalar(l), store.ids().map(|id| g.get(id).unwrap().data.clone()).collect::<Vec<_>>())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
}

#[test]
fn checkpoint_round_trip_and_validation() {
    let mut store = ParamStore::new(13);
    let _ = Mlp::new(&mut store, "m", 3, &[4, 2], OutAct::Linear);
    let ck = store.to_checkpoint(serde_json::json!({"k": 1}));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    let back = Checkpoint::read(&path).unwrap();
    assert_eq!(back, ck);
    let mut other = ParamStore::new(99);
    let _ = Mlp::new(&mut other, "m", 3, &[4, 2], OutAct::Linear);
    other.load(&back).unwrap();
    for id in store.ids() {
        assert_eq!(store.value(id), other.value(id));
    }
    let mut wrong = ParamStore::new(1);
    let _ = Mlp::new(&mut wrong, "m", 3, &[5, 2], OutAct::Linear);
    assert!(wrong.load(&back).is_err());
}

#[test]
fn optimizers_descend_on_quadratic() {
    for kind in [OptimizerKind::default(), OptimizerKind::adam()] {
        let (mut store, ids) = store_with(&[(1, 4)], 14);
        let mut opt = Optimizer::new(kind, 0.05, Some(1.0));
        let loss = |store: &ParamStore| store.value(ids[0]).norm_sq();
        let start = loss(&store);
        for _ in 0..200 {
            store.zero_grad();
            let g = {
                let mut tape = Tape::new(&store);
                let w = tape.param(ids[0]);
                let sq = tape.mul(w, w);
                let s = tape.sum(sq);
                tape.backward(s).unwrap()
            };
            store.accumulate(&g);
            opt.step(&mut store);
        }
        assert!(loss(&store) < 1e-3 * start);
    }
}
