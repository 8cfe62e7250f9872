//! Minimal dense-tensor math with reverse-mode differentiation.
//!
//! Big enough for two-layer MLP heads, the rasterizer payload path, and
//! memory-bank attention; small enough that every adjoint is hand-written
//! and finite-difference checked.

mod fd;
mod param;
mod tape;
mod tensor;

pub use fd::{finite_diff_check, finite_diff_check_sampled};
pub use param::{Param, ParamGroup, ParamId, ParamStore};
pub use tape::{BinaryKind, CustomOp, NodeId, Tape, UnaryKind};
pub use tensor::{matmul_acc, matmul_t_acc, tmatmul_acc, Tensor};

use crate::error::Result;
use crate::real::Real;

/// Two-layer MLP (hidden ReLU) stored as `[out×in]` weight matrices.
#[derive(Debug, Clone, Copy)]
pub struct MlpWeights {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// out = W₂·relu(W₁·x + b₁) + b₂ for a batch of row vectors. Any head
/// activation is applied by the caller.
pub fn mlp_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    weights: &MlpWeights,
    x: NodeId,
) -> Result<NodeId> {
    let w1 = tape.param(store, weights.w1);
    let b1 = tape.param(store, weights.b1);
    let w2 = tape.param(store, weights.w2);
    let b2 = tape.param(store, weights.b2);
    let h = tape.matmul_t(x, w1)?;
    let h = tape.bias_add(h, b1)?;
    let h = tape.relu(h);
    let out = tape.matmul_t(h, w2)?;
    tape.bias_add(out, b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::real::rl;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Builds a scalar loss from params on a fresh tape. Deterministic.
    type GraphFn = dyn Fn(&mut Tape<f64>, &ParamStore<f64>, &[ParamId]) -> Result<NodeId>;

    fn fd_check_graph(
        store: &mut ParamStore<f64>,
        ids: &[ParamId],
        build: &GraphFn,
        tol: f64,
    ) -> f64 {
        store.zero_grad();
        let mut tape = Tape::new();
        let loss = build(&mut tape, store, ids).unwrap();
        tape.backward_into(loss, store).unwrap();
        let f = |s: &ParamStore<f64>| -> Result<f64> {
            let mut t = Tape::new();
            let l = build(&mut t, s, ids)?;
            Ok(t.value(l).scalar_value())
        };
        let err = finite_diff_check(f, store, 1e-5).unwrap();
        assert!(err < tol, "fd mismatch: {err} >= {tol}");
        err
    }

    /// Reduce any node to a scalar with fixed pseudo-random weights so each
    /// output coordinate carries a distinct adjoint.
    fn weighted_sum(
        tape: &mut Tape<f64>,
        x: NodeId,
        seed: u64,
    ) -> Result<NodeId> {
        let n = tape.value(x).numel();
        let shape = tape.value(x).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wc = tape.constant(Tensor::new(shape, w)?);
        let prod = tape.mul(x, wc)?;
        Ok(tape.sum_all(prod))
    }

    // Spec examples, asserted directly.

    #[test]
    fn matmul_identity_and_selector() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let sel = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]));
        let col = tape.constant(Tensor::from_rows(&[vec![5.0], vec![7.0]]));
        let out = tape.matmul(sel, col).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(crate::error::Error::Dimension(_))
        ));
    }

    #[test]
    fn matmul_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let a = store.add(
            "a",
            ParamGroup::Mlp,
            rand_tensor(&mut rng, vec![3, 4], -1.0, 1.0),
        );
        let b = store.add(
            "b",
            ParamGroup::Mlp,
            rand_tensor(&mut rng, vec![4, 2], -1.0, 1.0),
        );
        let err = fd_check_graph(
            &mut store,
            &[a, b],
            &|tape, store, ids| {
                let an = tape.param(store, ids[0]);
                let bn = tape.param(store, ids[1]);
                let out = tape.matmul(an, bn)?;
                weighted_sum(tape, out, 7)
            },
            1e-6,
        );
        assert!(err < 1e-6);
    }

    #[test]
    fn elementwise_trivial_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::scalar(-1.0));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).scalar_value(), 0.0);
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).scalar_value(), 0.5);
    }

    #[test]
    fn softplus_gradient_at_spec_points() {
        for &x0 in &[-2.0f64, 0.0, 3.0] {
            let mut store = ParamStore::<f64>::new();
            let id = store.add("x", ParamGroup::Mlp, Tensor::scalar(x0));
            fd_check_graph(
                &mut store,
                &[id],
                &|tape, store, ids| {
                    let x = tape.param(store, ids[0]);
                    let y = tape.softplus(x);
                    Ok(tape.sum_all(y))
                },
                1e-6,
            );
        }
    }

    #[test]
    fn mlp_zero_weights_give_zero_output() {
        let mut store = ParamStore::new();
        let w = MlpWeights {
            w1: store.add("w1", ParamGroup::Mlp, Tensor::zeros(vec![4, 3])),
            b1: store.add("b1", ParamGroup::Mlp, Tensor::zeros(vec![4])),
            w2: store.add("w2", ParamGroup::Mlp, Tensor::zeros(vec![2, 4])),
            b2: store.add("b2", ParamGroup::Mlp, Tensor::zeros(vec![2])),
        };
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]));
        let y = mlp_forward(&mut tape, &store, &w, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn mlp_identity_composition_fixes_positive_vectors() {
        let mut store = ParamStore::new();
        let eye = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let w = MlpWeights {
            w1: store.add("w1", ParamGroup::Mlp, eye.clone()),
            b1: store.add("b1", ParamGroup::Mlp, Tensor::zeros(vec![3])),
            w2: store.add("w2", ParamGroup::Mlp, eye),
            b2: store.add("b2", ParamGroup::Mlp, Tensor::zeros(vec![3])),
        };
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.5, 1.5, 2.0]]));
        let y = mlp_forward(&mut tape, &store, &w, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 1.5, 2.0]);
    }

    #[test]
    fn mlp_gradient_wrt_all_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let w = MlpWeights {
            w1: store.add(
                "w1",
                ParamGroup::Mlp,
                rand_tensor(&mut rng, vec![5, 3], -0.8, 0.8),
            ),
            b1: store.add(
                "b1",
                ParamGroup::Mlp,
                rand_tensor(&mut rng, vec![5], -0.5, 0.5),
            ),
            w2: store.add(
                "w2",
                ParamGroup::Mlp,
                rand_tensor(&mut rng, vec![2, 5], -0.8, 0.8),
            ),
            b2: store.add(
                "b2",
                ParamGroup::Mlp,
                rand_tensor(&mut rng, vec![2], -0.5, 0.5),
            ),
        };
        let ids = [w.w1, w.b1, w.w2, w.b2];
        let x = Tensor::from_rows(&[vec![0.3, -0.7, 1.1], vec![0.9, 0.2, -0.4]]);
        let xc = x.clone();
        let err = fd_check_graph(
            &mut store,
            &ids,
            &move |tape, store, ids| {
                let w = MlpWeights {
                    w1: ids[0],
                    b1: ids[1],
                    w2: ids[2],
                    b2: ids[3],
                };
                let xn = tape.constant(xc.clone());
                let y = mlp_forward(tape, store, &w, xn)?;
                Ok(tape.sum_all(y))
            },
            1e-5,
        );
        assert!(err < 1e-5);
    }

    #[test]
    fn backward_square_and_sigmoid_sums() {
        // loss = x² at x = 3 → grad 6
        let mut store = ParamStore::new();
        let id = store.add("x", ParamGroup::Mlp, Tensor::scalar(3.0f64));
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward_into(loss, &mut store).unwrap();
        assert!((store.grad(id).data()[0] - 6.0).abs() < 1e-12);

        // loss = Σ sigmoid(x), x = 0⁴ → grad 0.25 each
        let mut store = ParamStore::new();
        let id = store.add("x", ParamGroup::Mlp, Tensor::<f64>::zeros(vec![4]));
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let s = tape.sigmoid(x);
        let loss = tape.sum_all(s);
        tape.backward_into(loss, &mut store).unwrap();
        for &g in store.grad(id).data() {
            assert!((g - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut store = ParamStore::new();
        let id = store.add("x", ParamGroup::Mlp, Tensor::<f64>::zeros(vec![3]));
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let y = tape.relu(x);
        assert!(tape.backward_into(y, &mut store).is_err());
    }

    #[test]
    fn backward_accumulates_until_zero_grad() {
        let mut store = ParamStore::new();
        let id = store.add("x", ParamGroup::Mlp, Tensor::scalar(2.0f64));
        for _ in 0..2 {
            let mut tape = Tape::new();
            let x = tape.param(&store, id);
            let sq = tape.mul(x, x).unwrap();
            let loss = tape.sum_all(sq);
            tape.backward_into(loss, &mut store).unwrap();
        }
        assert!((store.grad(id).data()[0] - 8.0).abs() < 1e-12);
        store.zero_grad();
        assert_eq!(store.grad(id).data()[0], 0.0);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut store = ParamStore::new();
        let id = store.add(
            "x",
            ParamGroup::Mlp,
            rand_tensor(&mut rng, vec![4], -1.0, 1.0),
        );
        let (a, b) = (0.7, -1.3);

        let build_l1 = |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
            let x = tape.param(store, id);
            let y = tape.sigmoid(x);
            tape.sum_all(y)
        };
        let build_l2 = |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
            let x = tape.param(store, id);
            let y = tape.mul(x, x).unwrap();
            tape.sum_all(y)
        };

        store.zero_grad();
        let mut tape = Tape::new();
        let l1 = build_l1(&mut tape, &store);
        let l2 = build_l2(&mut tape, &store);
        let al1 = tape.mul_scalar(l1, a);
        let bl2 = tape.mul_scalar(l2, b);
        let loss = tape.add(al1, bl2).unwrap();
        tape.backward_into(loss, &mut store).unwrap();
        let combined = store.grad(id).data().to_vec();

        store.zero_grad();
        let mut t1 = Tape::new();
        let l1 = build_l1(&mut t1, &store);
        t1.backward_into(l1, &mut store).unwrap();
        let g1 = store.grad(id).data().to_vec();
        store.zero_grad();
        let mut t2 = Tape::new();
        let l2 = build_l2(&mut t2, &store);
        t2.backward_into(l2, &mut store).unwrap();
        let g2 = store.grad(id).data().to_vec();

        for i in 0..4 {
            assert!((combined[i] - (a * g1[i] + b * g2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn fresh_graph_reproduces_grads_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut store = ParamStore::new();
        let id = store.add(
            "x",
            ParamGroup::Mlp,
            rand_tensor(&mut rng, vec![3, 3], -1.0, 1.0),
        );
        let run = |store: &mut ParamStore<f64>| {
            store.zero_grad();
            let mut tape = Tape::new();
            let x = tape.param(store, id);
            let s = tape.softplus(x);
            let m = tape.matmul(s, x).unwrap();
            let loss = tape.mean_all(m);
            tape.backward_into(loss, store).unwrap();
            store.grad(id).data().to_vec()
        };
        let g1 = run(&mut store);
        let g2 = run(&mut store);
        assert_eq!(g1, g2);
    }

    #[test]
    fn finite_diff_check_contract() {
        // Linear function: error ~ machine eps.
        let mut store = ParamStore::new();
        let id = store.add("x", ParamGroup::Mlp, Tensor::scalar(1.5));
        store.zero_grad();
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let loss = tape.mul_scalar(x, 3.0);
        tape.backward_into(loss, &mut store).unwrap();
        let f = |s: &ParamStore<f64>| -> Result<f64> {
            Ok(3.0 * s.value(id).scalar_value())
        };
        let err = finite_diff_check(f, &mut store, 1e-5).unwrap();
        assert!(err < 1e-9, "linear fd err {err}");

        // Cubic at p = 1, eps = 1e-4: Taylor remainder keeps error ≤ 1e-6.
        let mut store = ParamStore::new();
        let id = store.add("x", ParamGroup::Mlp, Tensor::scalar(1.0));
        store.zero_grad();
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let x2 = tape.mul(x, x).unwrap();
        let x3 = tape.mul(x2, x).unwrap();
        let loss = tape.sum_all(x3);
        tape.backward_into(loss, &mut store).unwrap();
        let f = |s: &ParamStore<f64>| -> Result<f64> {
            let v = s.value(id).scalar_value();
            Ok(v * v * v)
        };
        let err = finite_diff_check(f, &mut store, 1e-4).unwrap();
        assert!(err <= 1e-6, "cubic fd err {err}");

        // A gradient scaled ×2 is flagged with error ≈ 0.5.
        let g = store.grad(id).data()[0];
        store.get_mut(id).grad.data_mut()[0] = 2.0 * g;
        let err = finite_diff_check(f, &mut store, 1e-4).unwrap();
        assert!((err - 0.5).abs() < 1e-3, "wrong-grad err {err}");
    }

    #[test]
    fn forward_ops_stay_finite_on_finite_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(rand_tensor(&mut rng, vec![4, 6], -10.0, 10.0));
            for kind in [
                UnaryKind::Relu,
                UnaryKind::Sigmoid,
                UnaryKind::Softplus,
                UnaryKind::Tanh,
                UnaryKind::Neg,
                UnaryKind::Abs,
            ] {
                let y = tape.unary(kind, x);
                assert!(tape.value(y).all_finite());
            }
            let sm = tape.softmax_rows(x);
            assert!(tape.value(sm).all_finite());
        }
    }

    // Every registered op against central differences, ≥100 randomized seeds
    // spread across op builders.
    #[test]
    fn every_op_matches_finite_differences() {
        let builders: Vec<(&str, Box<GraphFn>, Vec<Vec<usize>>, f64, f64)> = vec![
            (
                "unary_chain",
                Box::new(|tape, store, ids| {
                    let x = tape.param(store, ids[0]);
                    let a = tape.sigmoid(x);
                    let b = tape.softplus(a);
                    let c = tape.tanh(b);
                    let d = tape.exp(c);
                    let e = tape.neg(d);
                    let f = tape.abs(e);
                    let g = tape.sqrt(f);
                    let h = tape.relu(g);
                    weighted_sum(tape, h, 1)
                }),
                vec![vec![3, 4]],
                0.4,
                2.0,
            ),
            (
                "binary_ops",
                Box::new(|tape, store, ids| {
                    let a = tape.param(store, ids[0]);
                    let b = tape.param(store, ids[1]);
                    let s = tape.add(a, b)?;
                    let d = tape.sub(s, a)?;
                    let m = tape.mul(d, s)?;
                    let bpos = tape.softplus(b);
                    let bpos = tape.add_scalar(bpos, 0.5);
                    let q = tape.div(m, bpos)?;
                    weighted_sum(tape, q, 2)
                }),
                vec![vec![4, 3], vec![4, 3]],
                -1.0,
                1.0,
            ),
            (
                "matmul_pair",
                Box::new(|tape, store, ids| {
                    let a = tape.param(store, ids[0]);
                    let b = tape.param(store, ids[1]);
                    let ab = tape.matmul(a, b)?;
                    let abt = tape.matmul_t(ab, ab)?;
                    weighted_sum(tape, abt, 3)
                }),
                vec![vec![3, 5], vec![5, 4]],
                -1.0,
                1.0,
            ),
            (
                "bias_broadcast_repeat",
                Box::new(|tape, store, ids| {
                    let x = tape.param(store, ids[0]);
                    let b = tape.param(store, ids[1]);
                    let xb = tape.bias_add(x, b)?;
                    let br = tape.broadcast_rows(b, 4);
                    let sum = tape.add(xb, br)?;
                    let rep = tape.repeat_rows(sum, 2);
                    weighted_sum(tape, rep, 4)
                }),
                vec![vec![4, 3], vec![3]],
                -1.0,
                1.0,
            ),
            (
                "reductions_and_slices",
                Box::new(|tape, store, ids| {
                    let x = tape.param(store, ids[0]);
                    let sc = tape.sum_cols(x);
                    let m = tape.mean_all(x);
                    let lo = tape.slice_cols(x, 1, 4)?;
                    let rows = tape.slice_rows(x, 0, 2)?;
                    let cat = tape.concat_cols(&[lo, lo])?;
                    let r = tape.reshape(cat, vec![2, 12])?;
                    let w1 = weighted_sum(tape, sc, 5)?;
                    let w2 = weighted_sum(tape, r, 6)?;
                    let w3 = weighted_sum(tape, rows, 7)?;
                    let t = tape.add(w1, w2)?;
                    let t = tape.add(t, w3)?;
                    let t = tape.add(t, m)?;
                    Ok(t)
                }),
                vec![vec![4, 5]],
                -1.0,
                1.0,
            ),
            (
                "softmax_normalize",
                Box::new(|tape, store, ids| {
                    let x = tape.param(store, ids[0]);
                    let sm = tape.softmax_rows(x);
                    let (nr, _) =
                        tape.normalize_rows_guarded(x, 1e-8, &[1.0, 0.0, 0.0, 0.0])?;
                    let w1 = weighted_sum(tape, sm, 8)?;
                    let w2 = weighted_sum(tape, nr, 9)?;
                    tape.add(w1, w2)
                }),
                vec![vec![5, 4]],
                0.2,
                2.0,
            ),
            (
                "conv2d_same",
                Box::new(|tape, store, ids| {
                    let x = tape.param(store, ids[0]);
                    let kernel = vec![
                        0.05, 0.1, 0.05, //
                        0.1, 0.4, 0.1, //
                        0.05, 0.1, 0.05,
                    ];
                    let y = tape.conv2d_same(x, 4, 5, 3, 3, kernel)?;
                    weighted_sum(tape, y, 10)
                }),
                vec![vec![20, 2]],
                -1.0,
                1.0,
            ),
        ];

        let mut seed = 0u64;
        let mut cases = 0usize;
        while cases < 105 {
            for (name, build, shapes, lo, hi) in &builders {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut store = ParamStore::new();
                let ids: Vec<ParamId> = shapes
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        store.add(
                            format!("p{i}"),
                            ParamGroup::Mlp,
                            rand_tensor(&mut rng, s.clone(), *lo, *hi),
                        )
                    })
                    .collect();
                let err = fd_check_graph(&mut store, &ids, build.as_ref(), 1e-5);
                assert!(err < 1e-5, "{name} seed {seed}: err {err}");
                cases += 1;
                seed += 1;
            }
        }
    }

    #[test]
    fn normalize_rows_fallback_emits_identity_and_zero_grad() {
        let mut store = ParamStore::new();
        let id = store.add(
            "q",
            ParamGroup::Mlp,
            Tensor::from_rows(&[vec![0.0, 0.0, 0.0, 0.0], vec![0.0, 2.0, 0.0, 0.0]]),
        );
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let (y, fallbacks) = tape
            .normalize_rows_guarded(x, 1e-8, &[1.0, 0.0, 0.0, 0.0])
            .unwrap();
        assert_eq!(fallbacks, 1);
        assert_eq!(tape.value(y).row(0), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(tape.value(y).row(1), &[0.0, 1.0, 0.0, 0.0]);
        let loss = tape.sum_all(y);
        tape.backward_into(loss, &mut store).unwrap();
        assert_eq!(&store.grad(id).data()[0..4], &[0.0; 4]);
    }

    #[test]
    fn mean_all_uses_element_count() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]));
        let m = tape.mean_all(x);
        assert!((tape.value(m).scalar_value() - 3.0).abs() < 1e-15);
        let _ = rl::<f64>(0.0);
    }
}
