use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn identity_linear_node() {
    let mut g = Graph::new();
    let x = g.input(Tensor::matrix(1, 2, vec![1.0, 2.0]), false);
    let w = g.param("w", &Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
    let y = g.matmul(x, w).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0]);
}

#[test]
fn relu_node() {
    let mut g = Graph::new();
    let x = g.input(Tensor::matrix(1, 3, vec![-1.0, 0.0, 2.0]), false);
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
}

/// Straight-line version of `tanh(tanh(x W1 + b1) W2 + b2)`.
fn two_layer_reference(x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Vec<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let h = w1.shape()[1];
    let o = w2.shape()[1];
    let mut out = Vec::new();
    for i in 0..n {
        let mut hid = vec![0.0; h];
        for j in 0..h {
            let mut s = 0.0;
            for k in 0..d {
                s += x.data()[i * d + k] * w1.data()[k * h + j];
            }
            hid[j] = (s + b1.data()[j]).tanh();
        }
        for j in 0..o {
            let mut s = 0.0;
            for k in 0..h {
                s += hid[k] * w2.data()[k * o + j];
            }
            out.push((s + b2.data()[j]).tanh());
        }
    }
    out
}

fn two_layer(g: &mut Graph, x: Var, p: &std::collections::BTreeMap<String, Var>) -> Var {
    let h = g.matmul(x, p["w1"]).unwrap();
    let h = g.add_bias(h, p["b1"]).unwrap();
    let h = g.tanh(h).unwrap();
    let o = g.matmul(h, p["w2"]).unwrap();
    let o = g.add_bias(o, p["b2"]).unwrap();
    g.tanh(o).unwrap()
}

fn two_layer_params(seed: u64) -> (Tensor, ParamSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&mut rng, vec![4, 3]);
    let mut p = ParamSet::new();
    p.insert("w1", random(&mut rng, vec![3, 5]));
    p.insert("b1", random(&mut rng, vec![5]));
    p.insert("w2", random(&mut rng, vec![5, 2]));
    p.insert("b2", random(&mut rng, vec![2]));
    (x, p)
}

#[test]
fn two_layer_tanh_matches_straight_line_reference() {
    let (x, p) = two_layer_params(7);
    let mut g = Graph::new();
    let xv = g.input(x.clone(), false);
    let vars = g.params_from(&p);
    let y = two_layer(&mut g, xv, &vars);
    let reference = two_layer_reference(
        &x,
        p.get("w1").unwrap(),
        p.get("b1").unwrap(),
        p.get("w2").unwrap(),
        p.get("b2").unwrap(),
    );
    for (a, b) in g.value(y).data().iter().zip(&reference) {
        assert!((a - b).abs() < 1e-14, "{a} vs {b}");
    }
}

#[test]
fn linear_derivative() {
    let x = Tensor::vector(vec![0.5, -2.0, 3.0]);
    let mut g = Graph::new();
    let w = g.param("w", &Tensor::vector(vec![1.0, 1.0, 1.0]));
    let xv = g.constant(x.clone());
    let prod = g.mul(w, xv).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.param("w").unwrap(), &x);
}

#[test]
fn half_squared_norm_derivative() {
    let w0 = Tensor::vector(vec![0.3, -1.5, 2.0, 0.0]);
    let mut g = Graph::new();
    let w = g.param("w", &w0);
    let sq = g.mul(w, w).unwrap();
    let s = g.sum(sq).unwrap();
    let loss = g.scale(s, 0.5).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.param("w").unwrap(), &w0);
}

#[test]
fn random_two_layer_net_matches_finite_differences() {
    let (x, p) = two_layer_params(11);
    let err = grad_check(
        |g, vars| {
            let xv = g.constant(x.clone());
            let y = two_layer(g, xv, vars);
            g.sum(y)
        },
        &p,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn quadratic_bowl_is_exact() {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::vector(vec![0.7, -0.2, 1.3]));
    let err = grad_check(
        |g, v| {
            let sq = g.mul(v["w"], v["w"])?;
            let s = g.sum(sq)?;
            g.scale(s, 3.0)
        },
        &p,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn softmax_cross_entropy_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, vec![6, 4]);
    let mut p = ParamSet::new();
    p.insert("w", random(&mut rng, vec![4, 3]));
    p.insert("b", random(&mut rng, vec![3]));
    let targets = vec![0, 1, 2, 2, 1, 0];
    let err = grad_check(
        |g, v| {
            let xv = g.constant(x.clone());
            let z = g.matmul(xv, v["w"])?;
            let z = g.add_bias(z, v["b"])?;
            g.cross_entropy(z, &targets)
        },
        &p,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let w = g.param("w", &Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(w), Err(GraphError::NotScalar(_))));
}

#[test]
fn backward_on_unrecorded_node_fails() {
    let mut other = Graph::new();
    for _ in 0..5 {
        other.constant(Tensor::scalar(1.0));
    }
    let foreign = other.constant(Tensor::scalar(1.0));
    let g = Graph::new();
    assert!(matches!(g.backward(foreign), Err(GraphError::UnknownVar(_))));
}

#[test]
fn shape_mismatch_and_non_finite_are_errors() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert!(matches!(g.add(a, b), Err(GraphError::ShapeMismatch { .. })));
    let z = g.constant(Tensor::vector(vec![0.0, 1.0]));
    assert!(matches!(g.log(z), Err(GraphError::NonFinite { .. })));
    let big = g.constant(Tensor::vector(vec![1000.0]));
    assert!(matches!(g.exp(big), Err(GraphError::NonFinite { .. })));
}

#[test]
fn watched_input_receives_gradient() {
    let mut g = Graph::new();
    let x = g.input(Tensor::matrix(1, 2, vec![3.0, 4.0]), true);
    let w = g.param("w", &Tensor::matrix(2, 1, vec![2.0, -1.0]));
    let y = g.matmul(x, w).unwrap();
    let loss = g.sum(y).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.input(x).unwrap().data(), &[2.0, -1.0]);
    assert_eq!(grads.param("w").unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn seeded_backward_equals_dot_with_seed() {
    let (x, p) = two_layer_params(5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let seed = random(&mut rng, vec![4, 2]);

    let mut g1 = Graph::new();
    let xv = g1.constant(x.clone());
    let vars = g1.params_from(&p);
    let y = two_layer(&mut g1, xv, &vars);
    let seeded = g1.backward_seeded(y, &seed).unwrap();

    let mut g2 = Graph::new();
    let xv = g2.constant(x);
    let vars = g2.params_from(&p);
    let y = two_layer(&mut g2, xv, &vars);
    let s = g2.constant(seed);
    let prod = g2.mul(y, s).unwrap();
    let loss = g2.sum(prod).unwrap();
    let direct = g2.backward(loss).unwrap();

    for (name, g) in seeded.params() {
        assert_eq!(g, direct.param(name).unwrap(), "{name}");
    }
}

#[test]
fn weighted_sum_one_hot_selects_input_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, vec![2, 3]);
    let b = random(&mut rng, vec![2, 3]);
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let bv = g.constant(b);
    let w = g.constant(Tensor::vector(vec![0.0, 1.0]));
    let w2 = g.constant(Tensor::vector(vec![1.0, 0.0]));
    let s = g.weighted_sum(w2, &[av, bv]).unwrap();
    let _ = g.weighted_sum(w, &[av, bv]).unwrap();
    assert!(g.value(s).data().iter().zip(a.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn identical_inputs_give_bitwise_identical_results() {
    let run = || {
        let (x, p) = two_layer_params(21);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let vars = g.params_from(&p);
        let y = two_layer(&mut g, xv, &vars);
        let loss = g.mean(y).unwrap();
        let grads = g.backward(loss).unwrap();
        (g.value(y).clone(), grads.into_params())
    };
    let (y1, g1) = run();
    let (y2, g2) = run();
    assert!(y1.data().iter().zip(y2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    for (k, v) in &g1 {
        assert!(v.data().iter().zip(g2[k].data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

/// Builds a loss that exercises one op kind, using `p["a"]` (and `p["b"]`
/// where the op is binary).
fn op_loss(kind: usize, g: &mut Graph, v: &std::collections::BTreeMap<String, Var>) -> Result<Var, GraphError> {
    let a = v["a"];
    let b = v["b"];
    // A fixed, non-uniform weighting so that sum-preserving ops still have
    // informative gradients.
    let weights = |g: &mut Graph, shape: &[usize]| {
        let n: usize = shape.iter().product();
        g.constant(Tensor::new(shape.to_vec(), (0..n).map(|i| 0.3 + 0.17 * i as f64).collect()).unwrap())
    };
    let y = match kind {
        0 => {
            let bt = g.slice_rows(b, 0, 3)?; // [3,3]
            g.matmul(a, bt)?
        }
        1 => g.add(a, b)?,
        2 => g.sub(a, b)?,
        3 => g.mul(a, b)?,
        4 => {
            let bias = g.row(b, 0)?;
            g.add_bias(a, bias)?
        }
        5 => g.relu(a)?,
        6 => g.tanh(a)?,
        7 => g.exp(a)?,
        8 => {
            let e = g.exp(a)?;
            g.log(e)?
        }
        9 => g.softmax(a)?,
        10 => g.scale(a, -1.7)?,
        11 => {
            let n = g.l2_norm(a)?;
            return Ok(n);
        }
        12 => g.normalize_rows(a)?,
        13 => g.concat_cols(&[a, b])?,
        14 => g.row_dot(a, b)?,
        15 => {
            let sm = g.softmax(b)?;
            let w = g.row(sm, 0)?;
            let c = g.tanh(a)?;
            let r = g.relu(b)?;
            g.weighted_sum(w, &[a, c, r])?
        }
        16 => g.resize_cols(a, 5)?,
        17 => g.resize_cols(a, 2)?,
        18 => return g.cross_entropy(a, &[2, 0, 1, 1]),
        19 => return g.mean(a),
        _ => unreachable!(),
    };
    let shape = g.value(y).shape().to_vec();
    let w = weights(g, &shape);
    let p = g.mul(y, w)?;
    g.sum(p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_op_matches_central_differences(
        kind in 0usize..20,
        a in prop::collection::vec(-1.5f64..1.5, 12),
        b in prop::collection::vec(-1.5f64..1.5, 12),
    ) {
        // Keep relu away from its kink where central differences are invalid.
        let nudge = |v: Vec<f64>| v.into_iter().map(|x| if x.abs() < 0.05 { x + 0.1 } else { x }).collect::<Vec<_>>();
        let mut p = ParamSet::new();
        p.insert("a", Tensor::matrix(4, 3, nudge(a)));
        p.insert("b", Tensor::matrix(4, 3, nudge(b)));
        let err = grad_check(|g, v| op_loss(kind, g, v), &p, 1e-5).unwrap();
        prop_assert!(err < 1e-4, "op {} rel err {}", kind, err);
    }

    #[test]
    fn backward_is_linear(
        a in prop::collection::vec(-1.0f64..1.0, 6),
        ca in -2.0f64..2.0,
        cb in -2.0f64..2.0,
    ) {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::matrix(2, 3, a));
        let f = |g: &mut Graph, w: Var| -> Var {
            let t = g.tanh(w).unwrap();
            g.sum(t).unwrap()
        };
        let h = |g: &mut Graph, w: Var| -> Var {
            let s = g.softmax(w).unwrap();
            let sq = g.mul(s, w).unwrap();
            g.sum(sq).unwrap()
        };
        let single = |which: u8| {
            let mut g = Graph::new();
            let w = g.param("w", p.get("w").unwrap());
            let l = if which == 0 { f(&mut g, w) } else { h(&mut g, w) };
            g.backward(l).unwrap().param("w").unwrap().clone()
        };
        let mut g = Graph::new();
        let w = g.param("w", p.get("w").unwrap());
        let lf = f(&mut g, w);
        let lh = h(&mut g, w);
        let sf = g.scale(lf, ca).unwrap();
        let sh = g.scale(lh, cb).unwrap();
        let l = g.add(sf, sh).unwrap();
        let combined = g.backward(l).unwrap().param("w").unwrap().clone();
        let (gf, gh) = (single(0), single(1));
        for i in 0..6 {
            let expect = ca * gf.data()[i] + cb * gh.data()[i];
            prop_assert!((combined.data()[i] - expect).abs() < 1e-10);
        }
    }
}
