use proptest::prelude::*;

use super::*;
use crate::error::Error;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
// Relative error is taken against max(|analytic|, |numeric|, FLOOR) so that
// gradients that are zero up to rounding do not divide by ~0.
const FLOOR: f64 = 1e-6;

fn bind(pairs: &[(&str, DenseTensor)]) -> Bindings {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn mat(rows: usize, cols: usize, data: &[f64]) -> DenseTensor {
    DenseTensor::new(vec![rows, cols], data.to_vec()).unwrap()
}

/// Max relative error between backprop and central differences over every
/// parameter entry.
fn fd_max_rel_error(graph: &CompGraph, loss: NodeId, params: &ParamStore) -> f64 {
    let none = Bindings::new();
    let opts = ForwardOptions::inference();
    let analytic = forward_eval(graph, &none, params, opts)
        .unwrap()
        .backward(loss)
        .unwrap();
    let mut worst: f64 = 0.0;
    for name in params.names().map(str::to_string).collect::<Vec<_>>() {
        let n = params.get(&name).unwrap().len();
        for i in 0..n {
            let mut plus = params.clone();
            plus.get_mut(&name).unwrap().data_mut()[i] += STEP;
            let mut minus = params.clone();
            minus.get_mut(&name).unwrap().data_mut()[i] -= STEP;
            let lp = forward_eval(graph, &none, &plus, opts).unwrap().value(loss).item();
            let lm = forward_eval(graph, &none, &minus, opts).unwrap().value(loss).item();
            let numeric = (lp - lm) / (2.0 * STEP);
            let a = analytic.param(&name).unwrap().data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn identity_graph() {
    let mut g = CompGraph::new();
    let x = g.input("x");
    let eval = forward_eval(
        &g,
        &bind(&[("x", DenseTensor::row(&[1.0, 2.0, 3.0]))]),
        &ParamStore::new(),
        ForwardOptions::inference(),
    )
    .unwrap();
    assert_eq!(eval.value(x).data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn sigmoid_at_zero() {
    let mut g = CompGraph::new();
    let x = g.param("x");
    let s = g.sigmoid(x);
    let mut p = ParamStore::new();
    p.insert("x", DenseTensor::scalar(0.0));
    let eval = forward_eval(&g, &Bindings::new(), &p, ForwardOptions::inference()).unwrap();
    assert_eq!(eval.value(s).item(), 0.5);
    let grads = eval.backward(s).unwrap();
    assert_eq!(grads.param("x").unwrap().item(), 0.25);
}

#[test]
fn identity_matmul_node() {
    let mut g = CompGraph::new();
    let a = g.input("a");
    let b = g.input("b");
    let c = g.matmul(a, b);
    let inputs = bind(&[("a", mat(2, 2, &[1.0, 0.0, 0.0, 1.0])), ("b", mat(2, 1, &[3.0, 4.0]))]);
    let eval = forward_eval(&g, &inputs, &ParamStore::new(), ForwardOptions::inference()).unwrap();
    assert_eq!(eval.value(c), &mat(2, 1, &[3.0, 4.0]));
}

#[test]
fn square_derivative() {
    let mut g = CompGraph::new();
    let x = g.input("x");
    let sq = g.mul(x, x);
    let loss = g.reduce_sum(sq);
    let eval = forward_eval(
        &g,
        &bind(&[("x", DenseTensor::scalar(3.0))]),
        &ParamStore::new(),
        ForwardOptions::inference(),
    )
    .unwrap();
    assert_eq!(eval.value(loss).item(), 9.0);
    assert_eq!(eval.backward(loss).unwrap().input("x").unwrap().item(), 6.0);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = CompGraph::new();
    let x = g.input("x");
    let eval = forward_eval(
        &g,
        &bind(&[("x", DenseTensor::row(&[1.0, 2.0]))]),
        &ParamStore::new(),
        ForwardOptions::inference(),
    )
    .unwrap();
    assert!(matches!(eval.backward(x), Err(Error::Config(_))));
}

#[test]
fn shape_mismatch_is_a_config_error() {
    let mut g = CompGraph::new();
    let a = g.input("a");
    let b = g.input("b");
    g.add(a, b);
    let inputs = bind(&[("a", DenseTensor::row(&[1.0, 2.0])), ("b", DenseTensor::row(&[1.0]))]);
    let err = forward_eval(&g, &inputs, &ParamStore::new(), ForwardOptions::inference()).unwrap_err();
    assert!(matches!(err, Error::Config(ref m) if m.contains("add")), "{err}");
}

#[test]
fn unbound_input_is_a_config_error() {
    let mut g = CompGraph::new();
    g.input("missing");
    let err = forward_eval(&g, &Bindings::new(), &ParamStore::new(), ForwardOptions::inference()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn non_finite_values_name_the_node() {
    let mut g = CompGraph::new();
    let x = g.input("x");
    let l = g.log(x);
    g.set_label(l, "log-prob");
    let err = forward_eval(
        &g,
        &bind(&[("x", DenseTensor::scalar(0.0))]),
        &ParamStore::new(),
        ForwardOptions::inference(),
    )
    .unwrap_err();
    match err {
        Error::Numeric { node } => assert!(node.contains("log-prob"), "{node}"),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn sigmoid_saturates_without_nan() {
    let mut g = CompGraph::new();
    let x = g.input("x");
    let s = g.sigmoid(x);
    let eval = forward_eval(
        &g,
        &bind(&[("x", DenseTensor::row(&[-100.0, 100.0, -800.0]))]),
        &ParamStore::new(),
        ForwardOptions::inference(),
    )
    .unwrap();
    let v = eval.value(s).data();
    assert!(v[0] >= 0.0 && v[0] < 1e-40);
    assert_eq!(v[1], 1.0);
    assert_eq!(v[2], 0.0);
}

#[test]
fn dropout_is_seeded_and_train_only() {
    let mut g = CompGraph::new();
    let x = g.input("x");
    let d1 = g.dropout(x, 0.5, 7);
    let d2 = g.dropout(x, 0.5, 7);
    let d3 = g.dropout(x, 0.5, 8);
    let inputs = bind(&[("x", DenseTensor::full(&[4, 16], 1.0))]);
    let p = ParamStore::new();
    let a = forward_eval(&g, &inputs, &p, ForwardOptions::training(3)).unwrap();
    let b = forward_eval(&g, &inputs, &p, ForwardOptions::training(3)).unwrap();
    assert_eq!(a.value(d1), b.value(d1));
    assert_eq!(a.value(d1), a.value(d2));
    assert_ne!(a.value(d1), a.value(d3));
    assert!(a.value(d1).data().iter().all(|&v| v == 0.0 || v == 2.0));
    let inf = forward_eval(&g, &inputs, &p, ForwardOptions::inference()).unwrap();
    assert_eq!(inf.value(d1), inputs.get("x").unwrap());
}

#[test]
fn repeated_leaf_names_share_a_node() {
    let mut g = CompGraph::new();
    let a = g.param("w");
    let b = g.param("w");
    assert_eq!(a, b);
    assert_eq!(g.param_names(), vec!["w"]);
}

/// A graph with two independent branches joined at the end.
fn branchy() -> (CompGraph, NodeId, ParamStore) {
    let mut g = CompGraph::new();
    let a = g.param("a");
    let b = g.param("b");
    let sa = g.sigmoid(a);
    let eb = g.exp(b);
    let ma = g.scale(sa, 1.7);
    let mb = g.add_scalar(eb, -0.3);
    let prod = g.matmul(ma, mb);
    let loss = g.reduce_mean(prod);
    let mut p = ParamStore::new();
    p.insert("a", mat(2, 3, &[0.1, -0.4, 1.2, 0.7, -1.1, 0.05]));
    p.insert("b", mat(3, 2, &[0.3, 0.2, -0.6, 1.5, -0.2, 0.9]));
    (g, loss, p)
}

#[test]
fn alternative_schedule_gives_identical_results() {
    let (g, loss, p) = branchy();
    // Insertion order: a b sa eb ma mb prod loss. Alternative: b-branch first.
    let alt: Vec<NodeId> = [1, 3, 5, 0, 2, 4, 6, 7].into_iter().map(NodeId).collect();
    let x = forward_eval(&g, &Bindings::new(), &p, ForwardOptions::inference()).unwrap();
    let y = forward_eval_ordered(&g, &Bindings::new(), &p, ForwardOptions::inference(), &alt).unwrap();
    for i in 0..g.len() {
        assert_eq!(x.value(NodeId(i)), y.value(NodeId(i)));
    }
    assert_eq!(x.value(loss).item().to_bits(), y.value(loss).item().to_bits());
}

#[test]
fn invalid_schedule_is_rejected() {
    let (g, _, p) = branchy();
    let bad: Vec<NodeId> = [2, 0, 1, 3, 4, 5, 6, 7].into_iter().map(NodeId).collect();
    assert!(forward_eval_ordered(&g, &Bindings::new(), &p, ForwardOptions::inference(), &bad).is_err());
}

#[test]
fn branchy_graph_gradient_check() {
    let (g, loss, p) = branchy();
    assert!(fd_max_rel_error(&g, loss, &p) < TOL);
}

#[derive(Debug, Clone, Copy)]
enum Prim {
    MatMul,
    Add,
    Sub,
    Mul,
    AddBias,
    Scale,
    AddScalar,
    Sigmoid,
    Exp,
    Log,
    Relu,
    Concat,
    Reshape,
    ReduceSum,
    ReduceMean,
    RowSum,
    LogSoftmax,
    EmbeddingBag,
    RepeatRows,
    TileRows,
    Gather,
}

const PRIMS: [Prim; 21] = [
    Prim::MatMul,
    Prim::Add,
    Prim::Sub,
    Prim::Mul,
    Prim::AddBias,
    Prim::Scale,
    Prim::AddScalar,
    Prim::Sigmoid,
    Prim::Exp,
    Prim::Log,
    Prim::Relu,
    Prim::Concat,
    Prim::Reshape,
    Prim::ReduceSum,
    Prim::ReduceMean,
    Prim::RowSum,
    Prim::LogSoftmax,
    Prim::EmbeddingBag,
    Prim::RepeatRows,
    Prim::TileRows,
    Prim::Gather,
];

/// Builds `loss = sum(weights ⊙ prim(x, y))` with fixed random weights so
/// each output entry gets a distinct upstream gradient.
fn prim_graph(prim: Prim, x: &[f64], y: &[f64], w: &[f64]) -> (CompGraph, NodeId, ParamStore) {
    let mut g = CompGraph::new();
    let mut p = ParamStore::new();
    let xs = g.param("x");
    let ys = g.param("y");
    p.insert("x", mat(2, 3, x));
    let out = match prim {
        Prim::MatMul => {
            p.insert("y", mat(3, 2, y));
            g.matmul(xs, ys)
        }
        Prim::Add | Prim::Sub | Prim::Mul | Prim::Concat => {
            p.insert("y", mat(2, 3, y));
            match prim {
                Prim::Add => g.add(xs, ys),
                Prim::Sub => g.sub(xs, ys),
                Prim::Mul => g.mul(xs, ys),
                _ => g.concat_cols(xs, ys),
            }
        }
        Prim::AddBias => {
            p.insert("y", mat(1, 3, &y[..3]));
            g.add_bias(xs, ys)
        }
        Prim::EmbeddingBag => {
            p.insert("y", mat(1, 3, &y[..3]));
            let bag = g.embedding_bag(xs, vec![vec![0, 1, 1], vec![1]]);
            g.add_bias(bag, ys)
        }
        _ => {
            p.insert("y", mat(1, 3, &y[..3]));
            let base = g.add_bias(xs, ys);
            match prim {
                Prim::Scale => g.scale(base, -1.3),
                Prim::AddScalar => g.add_scalar(base, 0.4),
                Prim::Sigmoid => g.sigmoid(base),
                Prim::Exp => g.exp(base),
                Prim::Log => {
                    let sq = g.mul(base, base);
                    let pos = g.add_scalar(sq, 0.1);
                    g.log(pos)
                }
                Prim::Relu => g.relu(base),
                Prim::Reshape => g.reshape(base, vec![3, 2]),
                Prim::ReduceSum => g.reduce_sum(base),
                Prim::ReduceMean => g.reduce_mean(base),
                Prim::RowSum => g.row_sum(base),
                Prim::LogSoftmax => g.log_softmax(base),
                Prim::RepeatRows => g.repeat_rows(base, 3),
                Prim::TileRows => g.tile_rows(base, 2),
                Prim::Gather => g.gather(base, vec![5, 0, 5, 2]),
                _ => unreachable!(),
            }
        }
    };
    let n = forward_eval(&g, &Bindings::new(), &p, ForwardOptions::inference())
        .unwrap()
        .value(out)
        .len();
    let weights = g.constant(
        DenseTensor::new(
            forward_eval(&g, &Bindings::new(), &p, ForwardOptions::inference())
                .unwrap()
                .value(out)
                .shape()
                .to_vec(),
            (0..n).map(|i| w[i % w.len()]).collect(),
        )
        .unwrap(),
    );
    let weighted = g.mul(out, weights);
    let loss = g.reduce_sum(weighted);
    (g, loss, p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_primitive_matches_finite_differences(
        x in proptest::collection::vec(-2.0f64..2.0, 6),
        y in proptest::collection::vec(-2.0f64..2.0, 6),
        w in proptest::collection::vec(-2.0f64..2.0, 7),
    ) {
        for prim in PRIMS {
            let (g, loss, p) = prim_graph(prim, &x, &y, &w);
            let eval = forward_eval(&g, &Bindings::new(), &p, ForwardOptions::inference()).unwrap();
            // Skip draws that put a ReLU input within probing distance of its kink.
            if eval.kink_margin() < 1e-3 {
                continue;
            }
            let err = fd_max_rel_error(&g, loss, &p);
            prop_assert!(err < TOL, "{:?}: relative error {}", prim, err);
        }
    }

    #[test]
    fn forward_is_pure(seed in any::<u64>()) {
        let (g, loss, p) = branchy();
        let a = forward_eval(&g, &Bindings::new(), &p, ForwardOptions::training(seed)).unwrap();
        let b = forward_eval(&g, &Bindings::new(), &p, ForwardOptions::training(seed)).unwrap();
        prop_assert_eq!(a.value(loss).item().to_bits(), b.value(loss).item().to_bits());
    }
}
