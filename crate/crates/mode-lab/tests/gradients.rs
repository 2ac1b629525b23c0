//! Finite-difference verification of every differentiable operation, from
//! individual tape primitives to the full mixed-adapter training graph.
//! Each check compares reverse-mode gradients against central differences
//! at relative tolerance 1e-5 on randomized instances.

mod common;

use common::check_grad;
use mode_lab::model::{Model, RoutePlan};
use mode_lab::tape::{GradBuf, Tape, Val};
use mode_lab::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-5;
const INSTANCES: usize = 20;

fn rng(salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x9e3779b9 ^ salt)
}

fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

/// Values bounded away from zero (for denominators and norms).
fn rand_vec_nonzero(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Reduce any tensor node to a scalar as rowweights^T * V * colweights with
/// fixed nonzero weights, so every coordinate's gradient is exercised with a
/// distinct coefficient.
fn reduce_to_scalar(tape: &mut Tape, v: Val) -> Val {
    let rows = tape.value(v).rows();
    let cols = tape.value(v).cols();
    let rw: Vec<f64> = (0..rows).map(|i| 0.71 + 0.37 * i as f64).collect();
    let cw: Vec<f64> = (0..cols).map(|j| 1.13 + 0.29 * j as f64).collect();
    let rwv = tape.constant(Tensor { shape: vec![1, rows], data: rw });
    let partial = tape.matmul(rwv, v).unwrap();
    let cwv = tape.constant(Tensor { shape: vec![cols, 1], data: cw });
    tape.matmul(partial, cwv).unwrap()
}

/// Check d(scalar)/d(leaf) for a program `build(tape, leaf) -> scalar node`
/// against central finite differences over the leaf's coordinates.
fn check_scalar_fn(
    what: &str,
    shape: &[usize],
    data: &[f64],
    build: impl Fn(&mut Tape, Val) -> Val,
) {
    let mut tape = Tape::new();
    let leaf = tape.leaf(Tensor { shape: shape.to_vec(), data: data.to_vec() }, 0);
    let out = build(&mut tape, leaf);
    assert_eq!(tape.value(out).len(), 1, "{}: output must be scalar", what);
    let mut grads = GradBuf::new(1);
    tape.backward(out, 1.0, &mut grads).unwrap();
    let analytic = grads.get(0).expect("leaf gradient").to_vec();

    let f = |x: &[f64]| {
        let mut tape = Tape::new();
        let leaf = tape.leaf(Tensor { shape: shape.to_vec(), data: x.to_vec() }, 0);
        let out = build(&mut tape, leaf);
        tape.value(out).data[0]
    };
    check_grad(f, data, &analytic, EPS, TOL, what);
}

#[test]
fn matmul_gradients_match_finite_differences() {
    for i in 0..INSTANCES {
        let mut r = rng(i as u64);
        let (m, k, n) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4));
        let a = rand_vec(&mut r, m * k);
        let b = rand_vec(&mut r, k * n);
        let b_t = Tensor { shape: vec![k, n], data: b.clone() };
        check_scalar_fn("matmul/dA", &[m, k], &a, |tape, leaf| {
            let bv = tape.constant(b_t.clone());
            let prod = tape.matmul(leaf, bv).unwrap();
            reduce_to_scalar(tape, prod)
        });
        let a_t = Tensor { shape: vec![m, k], data: a.clone() };
        check_scalar_fn("matmul/dB", &[k, n], &b, |tape, leaf| {
            let av = tape.constant(a_t.clone());
            let prod = tape.matmul(av, leaf).unwrap();
            reduce_to_scalar(tape, prod)
        });
    }
}

#[test]
fn matmul_nt_gradients_match_finite_differences() {
    for i in 0..INSTANCES {
        let mut r = rng(100 + i as u64);
        let (m, k, n) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4));
        let a = rand_vec(&mut r, m * k);
        let b = rand_vec(&mut r, n * k);
        let b_t = Tensor { shape: vec![n, k], data: b.clone() };
        check_scalar_fn("matmul_nt/dA", &[m, k], &a, |tape, leaf| {
            let bv = tape.constant(b_t.clone());
            let prod = tape.matmul_nt(leaf, bv).unwrap();
            reduce_to_scalar(tape, prod)
        });
        let a_t = Tensor { shape: vec![m, k], data: a.clone() };
        check_scalar_fn("matmul_nt/dB", &[n, k], &b, |tape, leaf| {
            let av = tape.constant(a_t.clone());
            let prod = tape.matmul_nt(av, leaf).unwrap();
            reduce_to_scalar(tape, prod)
        });
    }
}

#[test]
fn elementwise_op_gradients_match_finite_differences() {
    for i in 0..INSTANCES {
        let mut r = rng(200 + i as u64);
        let rows = r.gen_range(1..4);
        let cols = r.gen_range(1..5);
        let n = rows * cols;
        let x = rand_vec(&mut r, n);
        let y = rand_vec(&mut r, n);
        let c = r.gen_range(-2.0..2.0);

        let y_t = Tensor { shape: vec![rows, cols], data: y };
        check_scalar_fn("add", &[rows, cols], &x, |tape, leaf| {
            let yv = tape.constant(y_t.clone());
            let s = tape.add(leaf, yv).unwrap();
            reduce_to_scalar(tape, s)
        });

        check_scalar_fn("scale", &[rows, cols], &x, |tape, leaf| {
            let s = tape.scale(leaf, c).unwrap();
            reduce_to_scalar(tape, s)
        });

        // relu: keep inputs away from the kink where the derivative jumps.
        let x_relu: Vec<f64> =
            x.iter().map(|&v| if v.abs() < 0.1 { v + 0.2 } else { v }).collect();
        check_scalar_fn("relu", &[rows, cols], &x_relu, |tape, leaf| {
            let s = tape.relu(leaf).unwrap();
            reduce_to_scalar(tape, s)
        });

        // div on row vectors, denominators bounded away from zero.
        let num = rand_vec(&mut r, cols);
        let denom = rand_vec_nonzero(&mut r, cols, 0.5, 2.0);
        let denom_t = Tensor { shape: vec![1, cols], data: denom.clone() };
        check_scalar_fn("div/dnum", &[1, cols], &num, |tape, leaf| {
            let d = tape.constant(denom_t.clone());
            let q = tape.div(leaf, d).unwrap();
            reduce_to_scalar(tape, q)
        });
        let num_t = Tensor { shape: vec![1, cols], data: num };
        check_scalar_fn("div/ddenom", &[1, cols], &denom, |tape, leaf| {
            let nv = tape.constant(num_t.clone());
            let q = tape.div(nv, leaf).unwrap();
            reduce_to_scalar(tape, q)
        });
    }
}

#[test]
fn normalization_and_pooling_gradients_match_finite_differences() {
    for i in 0..INSTANCES {
        let mut r = rng(300 + i as u64);
        let rows = r.gen_range(2..5);
        let cols = r.gen_range(2..5);
        let x = rand_vec(&mut r, rows * cols);
        let gamma = rand_vec_nonzero(&mut r, cols, 0.5, 1.5);
        let beta = rand_vec(&mut r, cols);

        let g_t = Tensor { shape: vec![1, cols], data: gamma.clone() };
        let b_t = Tensor { shape: vec![1, cols], data: beta.clone() };
        check_scalar_fn("layer_norm/dx", &[rows, cols], &x, |tape, leaf| {
            let g = tape.constant(g_t.clone());
            let b = tape.constant(b_t.clone());
            let y = tape.layer_norm(leaf, g, b, 1e-5).unwrap();
            reduce_to_scalar(tape, y)
        });

        let x_t = Tensor { shape: vec![rows, cols], data: x.clone() };
        let b_t2 = Tensor { shape: vec![1, cols], data: beta.clone() };
        check_scalar_fn("layer_norm/dgamma", &[1, cols], &gamma, |tape, leaf| {
            let xv = tape.constant(x_t.clone());
            let b = tape.constant(b_t2.clone());
            let y = tape.layer_norm(xv, leaf, b, 1e-5).unwrap();
            reduce_to_scalar(tape, y)
        });

        let x_t2 = Tensor { shape: vec![rows, cols], data: x.clone() };
        let g_t2 = Tensor { shape: vec![1, cols], data: gamma.clone() };
        check_scalar_fn("layer_norm/dbeta", &[1, cols], &beta, |tape, leaf| {
            let xv = tape.constant(x_t2.clone());
            let g = tape.constant(g_t2.clone());
            let y = tape.layer_norm(xv, g, leaf, 1e-5).unwrap();
            reduce_to_scalar(tape, y)
        });

        check_scalar_fn("mean_rows", &[rows, cols], &x, |tape, leaf| {
            let pooled = tape.mean_rows(leaf).unwrap();
            reduce_to_scalar(tape, pooled)
        });
    }
}

#[test]
fn softmax_kl_and_cross_entropy_gradients_match_finite_differences() {
    for i in 0..INSTANCES {
        let mut r = rng(400 + i as u64);
        let e = r.gen_range(2..6);
        let logits = rand_vec(&mut r, e);
        let temperature = r.gen_range(0.3..3.0);

        // Routing softmax with temperature scaling.
        check_scalar_fn("softmax(T)", &[1, e], &logits, |tape, leaf| {
            let p = tape.softmax(leaf, temperature).unwrap();
            reduce_to_scalar(tape, p)
        });

        // Load-balancing KL penalty through the softmax.
        check_scalar_fn("kl_uniform(softmax)", &[1, e], &logits, |tape, leaf| {
            let p = tape.softmax(leaf, temperature).unwrap();
            tape.kl_uniform(p).unwrap()
        });

        // Cross-entropy through logits.
        let label = r.gen_range(0..2);
        let logits2 = rand_vec(&mut r, 2);
        check_scalar_fn("cross_entropy", &[1, 2], &logits2, |tape, leaf| {
            tape.cross_entropy(leaf, &[label]).unwrap()
        });
    }
}

#[test]
fn structural_op_gradients_match_finite_differences() {
    for i in 0..INSTANCES {
        let mut r = rng(500 + i as u64);
        let rows = r.gen_range(2..5);
        let cols = r.gen_range(2..5);

        let v = rand_vec_nonzero(&mut r, rows * cols, 0.2, 1.5);
        check_scalar_fn("column_norm", &[rows, cols], &v, |tape, leaf| {
            let n = tape.column_norm(leaf).unwrap();
            reduce_to_scalar(tape, n)
        });

        let s = rand_vec(&mut r, cols);
        let s_t = Tensor { shape: vec![1, cols], data: s.clone() };
        check_scalar_fn("scale_cols/dx", &[rows, cols], &v, |tape, leaf| {
            let sv = tape.constant(s_t.clone());
            let y = tape.scale_cols(leaf, sv).unwrap();
            reduce_to_scalar(tape, y)
        });
        let v_t = Tensor { shape: vec![rows, cols], data: v.clone() };
        check_scalar_fn("scale_cols/dscale", &[1, cols], &s, |tape, leaf| {
            let xv = tape.constant(v_t.clone());
            let y = tape.scale_cols(xv, leaf).unwrap();
            reduce_to_scalar(tape, y)
        });

        let m0 = [r.gen_range(0.5..2.0)];
        check_scalar_fn("broadcast_scalar", &[1, 1], &m0, |tape, leaf| {
            let row = tape.broadcast_scalar(leaf, cols).unwrap();
            reduce_to_scalar(tape, row)
        });

        let wide = rand_vec(&mut r, rows * 2 * cols);
        check_scalar_fn("slice_cols", &[rows, 2 * cols], &wide, |tape, leaf| {
            let part = tape.slice_cols(leaf, cols / 2, cols).unwrap();
            reduce_to_scalar(tape, part)
        });

        let other = Tensor { shape: vec![rows, cols], data: rand_vec(&mut r, rows * cols) };
        check_scalar_fn("concat_cols", &[rows, cols], &v, |tape, leaf| {
            let o = tape.constant(other.clone());
            let cat = tape.concat_cols(&[leaf, o]).unwrap();
            reduce_to_scalar(tape, cat)
        });

        // mix: gradients into the weight row and into one expert matrix.
        let e = r.gen_range(2..4);
        let mats: Vec<Tensor> = (0..e)
            .map(|_| Tensor { shape: vec![rows, cols], data: rand_vec(&mut r, rows * cols) })
            .collect();
        let weights: Vec<f64> = {
            let raw: Vec<f64> = (0..e).map(|_| r.gen_range(0.1..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / sum).collect()
        };
        let mats1 = mats.clone();
        check_scalar_fn("mix/dw", &[1, e], &weights, |tape, leaf| {
            let mvs: Vec<Val> = mats1.iter().map(|m| tape.constant(m.clone())).collect();
            let mixed = tape.mix(leaf, &mvs).unwrap();
            reduce_to_scalar(tape, mixed)
        });
        let weights_t = Tensor { shape: vec![1, e], data: weights };
        let mats2 = mats.clone();
        check_scalar_fn("mix/dP0", &[rows, cols], &mats[0].data, |tape, leaf| {
            let wv = tape.constant(weights_t.clone());
            let mut mvs = vec![leaf];
            for m in mats2.iter().skip(1) {
                mvs.push(tape.constant(m.clone()));
            }
            let mixed = tape.mix(wv, &mvs).unwrap();
            reduce_to_scalar(tape, mixed)
        });
    }
}

#[test]
fn adapter_recomposition_gradients_match_finite_differences() {
    // W_eff = m * (W0 + (alpha/r) * sum_i w_i P_i) / column_norms(...),
    // differentiated through the magnitude, the routing weights, an expert
    // product, and the scalar-magnitude broadcast variant.
    for i in 0..INSTANCES {
        let mut r = rng(600 + i as u64);
        let rows = r.gen_range(2..5);
        let cols = r.gen_range(2..5);
        let e = r.gen_range(1..4);
        let rank = 1;
        let alpha = r.gen_range(1.0..4.0);
        let w0 = Tensor {
            shape: vec![rows, cols],
            data: rand_vec_nonzero(&mut r, rows * cols, 0.3, 1.2),
        };
        let products: Vec<Tensor> = (0..e)
            .map(|_| Tensor {
                shape: vec![rows, cols],
                data: (0..rows * cols).map(|_| r.gen_range(-0.3..0.3)).collect(),
            })
            .collect();
        let weights: Vec<f64> = {
            let raw: Vec<f64> = (0..e).map(|_| r.gen_range(0.1..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / sum).collect()
        };
        let m: Vec<f64> = (0..cols).map(|_| r.gen_range(0.5..2.0)).collect();

        let w0c = w0.clone();
        let prods = products.clone();
        let wts = Tensor { shape: vec![1, e], data: weights.clone() };
        check_scalar_fn("recomposition/dm", &[1, cols], &m, |tape, leaf| {
            let w0v = tape.constant(w0c.clone());
            let pvs: Vec<Val> = prods.iter().map(|p| tape.constant(p.clone())).collect();
            let wv = tape.constant(wts.clone());
            let eff = mode_lab::adapters::tape_mode_weight(tape, w0v, &pvs, wv, leaf, rank, alpha)
                .unwrap();
            reduce_to_scalar(tape, eff)
        });

        let w0c2 = w0.clone();
        let prods2 = products.clone();
        let m_t = Tensor { shape: vec![1, cols], data: m.clone() };
        check_scalar_fn("recomposition/dw", &[1, e], &weights, |tape, leaf| {
            let w0v = tape.constant(w0c2.clone());
            let pvs: Vec<Val> = prods2.iter().map(|p| tape.constant(p.clone())).collect();
            let mv = tape.constant(m_t.clone());
            let eff = mode_lab::adapters::tape_mode_weight(tape, w0v, &pvs, leaf, mv, rank, alpha)
                .unwrap();
            reduce_to_scalar(tape, eff)
        });

        let w0c3 = w0.clone();
        let prods3 = products.clone();
        let m_t2 = Tensor { shape: vec![1, cols], data: m.clone() };
        let wts2 = Tensor { shape: vec![1, e], data: weights.clone() };
        check_scalar_fn("recomposition/dP", &[rows, cols], &products[0].data, |tape, leaf| {
            let w0v = tape.constant(w0c3.clone());
            let mut pvs = vec![leaf];
            for p in prods3.iter().skip(1) {
                pvs.push(tape.constant(p.clone()));
            }
            let wv = tape.constant(wts2.clone());
            let mv = tape.constant(m_t2.clone());
            let eff = mode_lab::adapters::tape_mode_weight(tape, w0v, &pvs, wv, mv, rank, alpha)
                .unwrap();
            reduce_to_scalar(tape, eff)
        });

        let w0c4 = w0.clone();
        let prods4 = products.clone();
        let wts3 = Tensor { shape: vec![1, e], data: weights.clone() };
        let m_scalar = [r.gen_range(0.5..2.0)];
        check_scalar_fn("recomposition/dm_scalar", &[1, 1], &m_scalar, |tape, leaf| {
            let w0v = tape.constant(w0c4.clone());
            let pvs: Vec<Val> = prods4.iter().map(|p| tape.constant(p.clone())).collect();
            let wv = tape.constant(wts3.clone());
            let eff = mode_lab::adapters::tape_mode_weight(tape, w0v, &pvs, wv, leaf, rank, alpha)
                .unwrap();
            reduce_to_scalar(tape, eff)
        });
    }
}

/// End-to-end: the training loss (cross-entropy through the mixed update
/// plus the load-balancing penalty) against finite differences with respect
/// to every trainable parameter, including the expert factors whose
/// gradients arrive through the deferred product leaves and the router
/// parameters fed by both loss terms.
#[test]
fn full_training_graph_gradient_matches_finite_differences() {
    let mcfg = common::tiny_model_config(2, true);
    let seq_len = 3;
    let lambda = 0.05;

    for i in 0..INSTANCES {
        let mut r = rng(700 + i as u64);
        let (model, mut store) = Model::build(&mcfg, 11, 1000 + i as u64).unwrap();

        // Give the zero-initialized B factors random values so their
        // gradient path is exercised away from the origin.
        let trainable: Vec<usize> = (0..store.len()).filter(|&s| store.is_trainable(s)).collect();
        for &slot in &trainable {
            if store.name(slot).ends_with(".b") {
                let shape = store.get(slot).shape.clone();
                let n = store.get(slot).len();
                let data = (0..n).map(|_| r.gen_range(-0.2..0.2)).collect();
                store.set_value(slot, Tensor { shape, data }).unwrap();
            }
        }

        let feats = Tensor {
            shape: vec![seq_len, mcfg.backbone.d_in],
            data: rand_vec(&mut r, seq_len * mcfg.backbone.d_in),
        };
        let task = r.gen_range(0..mcfg.n_tasks);
        let label = r.gen_range(0..2);

        let loss_of = |store: &mode_lab::params::ParamStore| -> f64 {
            let products = model.compute_products(store);
            let aux_base = model.aux_base(store);
            let pooled = model.pooled_off(store, &feats, task).unwrap();
            let g = model
                .build_example_graph(
                    store,
                    &products,
                    aux_base,
                    &feats,
                    task,
                    label,
                    Some(&pooled),
                    RoutePlan::Learned,
                    lambda,
                    false,
                )
                .unwrap();
            g.tape.value(g.total).data[0]
        };

        let products = model.compute_products(&store);
        let aux_base = model.aux_base(&store);
        let pooled = model.pooled_off(&store, &feats, task).unwrap();
        let graph = model
            .build_example_graph(
                &store,
                &products,
                aux_base,
                &feats,
                task,
                label,
                Some(&pooled),
                RoutePlan::Learned,
                lambda,
                false,
            )
            .unwrap();
        let mut grads = GradBuf::new(model.grad_slots(&store));
        graph.tape.backward(graph.total, 1.0, &mut grads).unwrap();
        model.map_product_grads(&store, &mut grads, aux_base);

        // Rotate through the parameter list across instances: every slot is
        // covered several times over the 20 instances while each instance
        // stays fast.
        for (j, &slot) in trainable.iter().enumerate() {
            if (i + j) % 4 != 0 {
                continue;
            }
            let x0 = store.get(slot).data.clone();
            let shape = store.get(slot).shape.clone();
            let analytic =
                grads.get(slot).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x0.len()]);
            let name = store.name(slot).to_string();
            let mut fd_store = store.clone();
            let f = |x: &[f64]| {
                fd_store.set_value(slot, Tensor { shape: shape.clone(), data: x.to_vec() }).unwrap();
                loss_of(&fd_store)
            };
            check_grad(f, &x0, &analytic, EPS, TOL, &format!("graph/{}", name));
        }
    }
}

/// The decoupled pass-1 hidden state is treated as a constant for the
/// router: perturbing adapter parameters must not change it.
#[test]
fn router_input_is_adapter_free() {
    let mcfg = common::tiny_model_config(2, true);
    let (model, mut store) = Model::build(&mcfg, 3, 4).unwrap();
    let mut r = rng(900);
    let feats =
        Tensor { shape: vec![3, mcfg.backbone.d_in], data: rand_vec(&mut r, 3 * mcfg.backbone.d_in) };
    let before = model.pooled_off(&store, &feats, 1).unwrap();
    for slot in 0..store.len() {
        if store.is_trainable(slot) && store.name(slot).starts_with("adapter.") {
            let shape = store.get(slot).shape.clone();
            let n = store.get(slot).len();
            store
                .set_value(
                    slot,
                    Tensor { shape, data: (0..n).map(|_| r.gen_range(-1.0..1.0)).collect() },
                )
                .unwrap();
        }
    }
    let after = model.pooled_off(&store, &feats, 1).unwrap();
    for (a, b) in before.data.iter().zip(&after.data) {
        assert_eq!(a, b, "pass-1 pooled state must not depend on adapter parameters");
    }
}
