use super::*;
use crate::error::Error;
use crate::rng::SeedKey;
use proptest::prelude::*;
use rand::Rng;

fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
    Tensor::matrix(rows, cols, data.to_vec()).unwrap()
}

fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = SeedKey::new(seed).stream();
    t(rows, cols, &(0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
}

/// Central-difference gradient of `f` with respect to each input, computed
/// only from forward values.
fn numeric_grads(
    inputs: &[Tensor<f64>],
    f: &dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Var,
) -> Vec<Vec<f64>> {
    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::detached();
        let vs: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vs);
        g.value(out).item()
    };
    let eps = 1e-5;
    let mut out = Vec::new();
    for k in 0..inputs.len() {
        let mut gk = Vec::new();
        for i in 0..inputs[k].len() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += eps;
            let p = eval(&xs);
            xs[k].data_mut()[i] -= 2.0 * eps;
            let m = eval(&xs);
            gk.push((p - m) / (2.0 * eps));
        }
        out.push(gk);
    }
    out
}

fn assert_grads_match(inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Var) {
    let numeric = numeric_grads(&inputs, f);
    let mut g = Graph::detached();
    let vs: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = f(&mut g, &vs);
    let grads = g.backward(out).unwrap();
    for (k, v) in vs.iter().enumerate() {
        let a = grads.wrt(*v).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; inputs[k].len()]);
        for (i, (x, y)) in a.iter().zip(&numeric[k]).enumerate() {
            let rel = (x - y).abs() / (x.abs() + y.abs()).max(1e-8);
            assert!(rel < 1e-4, "input {k}[{i}]: analytic {x} numeric {y}");
        }
    }
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::<f64>::detached();
    let x = g.constant(t(1, 2, &[0.0, 0.0]));
    let y = g.softmax(x, Axis::Cols);
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn matmul_identity() {
    let mut g = Graph::<f64>::detached();
    let a = g.constant(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    let i = g.constant(Tensor::identity(2));
    let y = g.matmul(a, i).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn cross_entropy_uniform_is_ln3() {
    let mut g = Graph::<f64>::detached();
    let x = g.constant(t(1, 3, &[0.0, 0.0, 0.0]));
    let l = g.cross_entropy(x, &[1]).unwrap();
    assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-15);
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::<f64>::detached();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { op, detail }) => {
            assert_eq!(op, "matmul");
            assert!(detail.contains("2×3"));
        }
        other => panic!("{:?}", other.map(|_| ())),
    }
    let c = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.add(a, c), Err(Error::Shape { op: "add", .. })));
    assert!(g.cross_entropy(a, &[0]).is_err());
    assert!(g.cross_entropy(a, &[0, 3]).is_err());
}

#[test]
fn backward_of_sum_and_square() {
    let mut g = Graph::<f64>::detached();
    let w = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let s = g.sum(w);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(w).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::<f64>::detached();
    let w = g.leaf(Tensor::vector(vec![2.0, -1.0]));
    let sq = g.mul(w, w).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(w).unwrap().data(), &[4.0, -2.0]);
}

#[test]
fn backward_rejects_non_scalar_and_untracked() {
    let mut g = Graph::<f64>::detached();
    let w = g.leaf(Tensor::vector(vec![1.0, 2.0]));
    let y = g.tanh(w);
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    let mut g = Graph::<f64>::detached();
    let c = g.constant(Tensor::scalar(1.0));
    assert!(matches!(g.backward(c), Err(Error::Contract(_))));
}

#[test]
fn param_gradients_reach_the_store() {
    let mut store = ParameterStore::<f64>::new();
    let w = store.add("w", Tensor::vector(vec![2.0, -1.0])).unwrap();
    let e = store.add("e", t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
    let grads = {
        let mut g = Graph::new(&store);
        let wv = g.param(w);
        let rows = g.embedding(e, &[2, 0, 2]).unwrap();
        let y = g.mul(rows, wv).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap()
    };
    assert_eq!(grads.param(w).unwrap().data(), &[5.0 + 1.0 + 5.0, 6.0 + 2.0 + 6.0]);
    assert_eq!(grads.param(e).unwrap().data(), &[2.0, -1.0, 0.0, 0.0, 4.0, -2.0]);
    store.accumulate(&grads, 0.5);
    assert_eq!(store.grad(w), &[5.5, 7.0]);
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut store = ParameterStore::<f64>::new();
    let a = store.add("a", Tensor::vector(vec![1.0])).unwrap();
    let b = store.add("b", Tensor::vector(vec![2.0])).unwrap();
    store.set_trainable(a, false);
    let mut g = Graph::new(&store);
    let (av, bv) = (g.param(a), g.param(b));
    let y = g.mul(av, bv).unwrap();
    let grads = g.backward(y).unwrap();
    assert!(grads.param(a).is_none());
    assert_eq!(grads.param(b).unwrap().data(), &[1.0]);
}

#[test]
fn dropout_inverted_scaling_and_eval_identity() {
    let mut g = Graph::<f64>::detached();
    let x = g.constant(Tensor::full(&[10, 10], 1.0));
    let mut rng = SeedKey::new(1).stream();
    let same = g.dropout(x, 0.5, false, &mut rng).unwrap();
    assert_eq!(same, x);
    let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
}

#[test]
fn max_ties_pick_lowest_index() {
    let mut g = Graph::<f64>::detached();
    let x = g.leaf(t(3, 2, &[1.0, 5.0, 3.0, 5.0, 3.0, 0.0]));
    let m = g.max_over(x, Axis::Rows);
    assert_eq!(g.value(m).data(), &[3.0, 5.0]);
    let s = g.sum(m);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn masked_log_softmax_stays_finite_in_gradients() {
    let mut g = Graph::<f64>::detached();
    let x = g.leaf(t(1, 3, &[0.3, 1.0, -0.2]));
    let mask = g.constant(t(1, 3, &[f64::NEG_INFINITY, 0.0, 0.0]));
    let y = g.add(x, mask).unwrap();
    let l = g.cross_entropy(y, &[2]).unwrap();
    let grads = g.backward(l).unwrap();
    let d = grads.wrt(x).unwrap().data();
    assert_eq!(d[0], 0.0);
    assert!(d.iter().all(|v| v.is_finite()));
}

#[test]
fn finite_differences_elementwise_and_reductions() {
    let a = random(3, 4, 1);
    let b = random(3, 4, 2);
    assert_grads_match(vec![a.clone(), b.clone()], &|g, v| {
        let x = g.mul(v[0], v[1]).unwrap();
        let y = g.sub(x, v[1]).unwrap();
        let z = g.tanh(y);
        let w = g.sigmoid(z);
        let r = g.affine_const(w, 1.5, -0.25);
        let q = g.relu(r);
        g.sum(q)
    });
    assert_grads_match(vec![a.clone(), random(1, 4, 3), random(3, 1, 4)], &|g, v| {
        let x = g.add(v[0], v[1]).unwrap();
        let y = g.mul(x, v[2]).unwrap();
        let s = g.softmax(y, Axis::Rows);
        let q = g.mul(s, s).unwrap();
        g.sum(q)
    });
    assert_grads_match(vec![a.clone()], &|g, v| {
        let s = g.log_softmax(v[0], Axis::Cols);
        let c = g.slice_cols(s, 1, 3).unwrap();
        let m = g.max_over(c, Axis::Cols);
        let sq = g.mul(m, m).unwrap();
        g.mean(sq)
    });
}

#[test]
fn finite_differences_structural() {
    let a = random(4, 3, 5);
    let b = random(3, 2, 6);
    assert_grads_match(vec![a.clone(), b.clone()], &|g, v| {
        let p = g.matmul(v[0], v[1]).unwrap();
        let tp = g.transpose(p);
        let c = g.concat_cols(&[p, p]).unwrap();
        let r = g.concat_rows(&[c, c]).unwrap();
        let s = g.slice_rows(r, 1, 6).unwrap();
        let sel = g.select_rows(s, &[4, 0, 0, 2]).unwrap();
        let grp = g.sum_col_groups(sel, 2).unwrap();
        let h = g.tanh(grp);
        let l = g.cross_entropy(h, &[0, 1, 1, 0]).unwrap();
        let tsum = g.sum(tp);
        let tsq = g.mul(tsum, tsum).unwrap();
        let both = g.add(l, tsq).unwrap();
        g.affine_const(both, 0.5, 0.0)
    });
    assert_grads_match(vec![random(5, 2, 7), random(6, 3, 8)], &|g, v| {
        let u = g.unfold_rows(v[0], 3).unwrap();
        let p = g.matmul(u, v[1]).unwrap();
        let m = g.max_over(p, Axis::Rows);
        let sq = g.mul(m, m).unwrap();
        g.sum(sq)
    });
}

/// The same recurrence written with primitive ops, one step at a time.
fn lstm_reference(g: &mut Graph<'_, f64>, xw: Var, w: Var, reverse: bool) -> Var {
    let (n, four_h) = g.value(xw).dims();
    let h = four_h / 4;
    let mut hp = g.constant(Tensor::zeros(&[1, h]));
    let mut cp = g.constant(Tensor::zeros(&[1, h]));
    let mut outs = vec![hp; n];
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for t in order {
        let x = g.slice_rows(xw, t, t + 1).unwrap();
        let r = g.matmul(hp, w).unwrap();
        let pre = g.add(x, r).unwrap();
        let i = g.slice_cols(pre, 0, h).unwrap();
        let i = g.sigmoid(i);
        let f = g.slice_cols(pre, h, 2 * h).unwrap();
        let f = g.sigmoid(f);
        let c = g.slice_cols(pre, 2 * h, 3 * h).unwrap();
        let c = g.tanh(c);
        let o = g.slice_cols(pre, 3 * h, 4 * h).unwrap();
        let o = g.sigmoid(o);
        let fc = g.mul(f, cp).unwrap();
        let ic = g.mul(i, c).unwrap();
        cp = g.add(fc, ic).unwrap();
        let tc = g.tanh(cp);
        hp = g.mul(o, tc).unwrap();
        outs[t] = hp;
    }
    g.concat_rows(&outs).unwrap()
}

#[test]
fn fused_lstm_matches_step_by_step() {
    for reverse in [false, true] {
        let xw = random(5, 12, 31);
        let w = random(3, 12, 32);
        let mut g = Graph::<f64>::detached();
        let (a, b) = (g.constant(xw.clone()), g.constant(w.clone()));
        let fused = g.lstm(a, b, reverse).unwrap();
        let reference = lstm_reference(&mut g, a, b, reverse);
        assert!(g.value(fused).max_abs_diff(g.value(reference)) < 1e-12);
    }
}

#[test]
fn finite_differences_lstm() {
    for reverse in [false, true] {
        assert_grads_match(vec![random(4, 8, 33), random(2, 8, 34), random(4, 2, 35)], &|g, v| {
            let h = g.lstm(v[0], v[1], reverse).unwrap();
            let y = g.mul(h, v[2]).unwrap();
            let sq = g.mul(y, y).unwrap();
            g.sum(sq)
        });
    }
    let mut g = Graph::<f64>::detached();
    let a = g.constant(Tensor::zeros(&[3, 8]));
    let b = g.constant(Tensor::zeros(&[3, 8]));
    assert!(matches!(g.lstm(a, b, false), Err(Error::Shape { op: "lstm", .. })));
}

#[test]
fn finite_differences_reshape_and_segments() {
    assert_grads_match(vec![random(6, 2, 41)], &|g, v| {
        let r = g.reshape(v[0], 3, 4).unwrap();
        let m = g.max_over_segments(r, &[1, 2]).unwrap();
        let sq = g.mul(m, m).unwrap();
        g.sum(sq)
    });
    let mut g = Graph::<f64>::detached();
    let x = g.constant(t(3, 1, &[1.0, 4.0, 2.0]));
    let m = g.max_over_segments(x, &[1, 2]).unwrap();
    assert_eq!(g.value(m).data(), &[1.0, 4.0]);
    assert!(g.max_over_segments(x, &[1, 1]).is_err());
    assert!(g.reshape(x, 2, 2).is_err());
}

#[test]
fn unfold_layout() {
    let mut g = Graph::<f64>::detached();
    let x = g.constant(t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let u = g.unfold_rows(x, 2).unwrap();
    assert_eq!(g.value(u).shape(), &[2, 4]);
    assert_eq!(g.value(u).data(), &[1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn grad_check_quadratic_is_tight() {
    let mut store = ParameterStore::<f64>::new();
    let w = store.add("w", Tensor::scalar(0.7)).unwrap();
    let report = grad_check(
        &mut store,
        |g| {
            let x = g.param(w);
            let sq = g.mul(x, x).unwrap();
            let c = g.affine_const(sq, 3.0, 1.0);
            Ok(g.sum(c))
        },
        1e-5,
        10,
        0,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn grad_check_two_layer_tanh_mlp() {
    let mut store = ParameterStore::<f64>::new();
    let w1 = store.add("w1", random(3, 4, 11)).unwrap();
    let b1 = store.add("b1", random(1, 4, 12)).unwrap();
    let w2 = store.add("w2", random(4, 2, 13)).unwrap();
    let x = random(5, 3, 14);
    let report = grad_check(
        &mut store,
        |g| {
            let xv = g.constant(x.clone());
            let (w1, b1, w2) = (g.param(w1), g.param(b1), g.param(w2));
            let h = g.matmul(xv, w1)?;
            let h = g.add(h, b1)?;
            let h = g.tanh(h);
            let o = g.matmul(h, w2)?;
            g.cross_entropy(o, &[0, 1, 1, 0, 1])
        },
        1e-5,
        10,
        3,
    )
    .unwrap();
    assert_eq!(report.coords_checked, 10);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn grad_check_reports_non_finite_loss() {
    let mut store = ParameterStore::<f64>::new();
    let w = store.add("w", Tensor::scalar(0.0)).unwrap();
    let r = grad_check(
        &mut store,
        |g| {
            let x = g.param(w);
            Ok(g.affine_const(x, 1.0, f64::INFINITY))
        },
        1e-5,
        1,
        0,
    );
    assert!(matches!(r, Err(Error::Numeric(_))));
}

#[test]
fn generic_over_f32() {
    let mut g = Graph::<f32>::detached();
    let w = g.leaf(Tensor::vector(vec![2.0f32, -1.0]));
    let sq = g.mul(w, w).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(w).unwrap().data(), &[4.0f32, -2.0]);
}

#[test]
fn adam_runs_are_bit_identical() {
    let run = || {
        let mut store = ParameterStore::<f64>::new();
        let w = store.add("w", random(3, 3, 21)).unwrap();
        let x = random(4, 3, 22);
        for _ in 0..5 {
            let grads = {
                let mut g = Graph::new(&store);
                let xv = g.constant(x.clone());
                let wv = g.param(w);
                let h = g.matmul(xv, wv).unwrap();
                let l = g.cross_entropy(h, &[0, 1, 2, 0]).unwrap();
                g.backward(l).unwrap()
            };
            store.accumulate(&grads, 1.0);
            store.adam_step(&AdamConfig::default());
        }
        store.value(w).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(v in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
        let mut g = Graph::<f64>::detached();
        let x = g.constant(Tensor::vector(v.clone()));
        let y = g.softmax(x, Axis::Cols);
        let d = g.value(y).data();
        let total: f64 = d.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(d.iter().all(|&p| p > 0.0));
    }
}
