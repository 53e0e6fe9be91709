//! Shared finite-difference harness: one check function per differentiable
//! graph operation plus the composite connector -> frozen-tail path. The
//! gradient suite exposes them as individual tests; the acceptance suite
//! runs them all in one timed pass. All checks run in f64 with relative
//! tolerance 1e-4.

#![allow(dead_code)] // each test binary uses a subset of the harness

use ratekd_core::exec::{connector_graph, forward_graph, ActPlan, BnPlan};
use ratekd_core::graph::{Graph, NodeId, ParamId, ParamStore};
use ratekd_core::loss::{ce_from_logits, KD_EPS};
use ratekd_core::models::{
    build_connector, build_network, freeze_network, ArchSpec, BlockKind, StageSpec,
};
use ratekd_core::rng;
use ratekd_core::tensor::Tensor;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Scalar loss evaluated on the store's current parameter values.
pub fn eval_loss(store: &ParamStore<f64>, build: &dyn Fn(&mut Graph<'_, f64>) -> NodeId) -> f64 {
    let mut g = Graph::new(store);
    let node = build(&mut g);
    g.value(node).item().expect("loss must be scalar")
}

/// Error metric per element: |a - n| / max(1, |a|, |n|) — relative for
/// large values, absolute near zero.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs())
}

/// Central differences for every element of every listed parameter,
/// compared against the analytic backward pass.
pub fn fd_check(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    build: &dyn Fn(&mut Graph<'_, f64>) -> NodeId,
    label: &str,
) {
    let grads = {
        let mut g = Graph::new(store);
        let node = build(&mut g);
        g.backward(node, &[]).expect("backward")
    };
    for &id in ids {
        let analytic = grads
            .by_param
            .get(&id)
            .unwrap_or_else(|| panic!("{label}: no gradient for {}", store.name(id)))
            .clone();
        let n = store.value(id).data().len();
        assert_eq!(analytic.data().len(), n, "{label}: gradient length");
        for j in 0..n {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + EPS;
            let up = eval_loss(store, build);
            store.value_mut(id).data_mut()[j] = orig - EPS;
            let down = eval_loss(store, build);
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let a = analytic.data()[j];
            assert!(
                rel_err(a, numeric) < TOL,
                "{label}: {}[{}] analytic {} vs numeric {}",
                store.name(id),
                j,
                a,
                numeric
            );
        }
    }
}

pub fn param(
    store: &mut ParamStore<f64>,
    name: &str,
    shape: &[usize],
    lo: f64,
    hi: f64,
    seed: u64,
) -> ParamId {
    let mut r = rng::stream(seed, name);
    let data = rng::uniform_vec::<f64>(&mut r, shape.iter().product(), lo, hi);
    store
        .add(name, Tensor::from_vec(shape.to_vec(), data).unwrap(), true)
        .unwrap()
}

/// Values bounded away from zero so kinked ops (relu, spike threshold
/// windows) see no sign change within the probe radius.
pub fn param_off_kink(
    store: &mut ParamStore<f64>,
    name: &str,
    shape: &[usize],
    seed: u64,
) -> ParamId {
    let mut r = rng::stream(seed, name);
    let data: Vec<f64> = rng::uniform_vec::<f64>(&mut r, shape.iter().product(), 0.1, 2.0)
        .into_iter()
        .zip(rng::uniform_vec::<f64>(&mut r, shape.iter().product(), 0.0, 1.0))
        .map(|(m, s)| if s < 0.5 { -m } else { m })
        .collect();
    store
        .add(name, Tensor::from_vec(shape.to_vec(), data).unwrap(), true)
        .unwrap()
}

/// Fixed random projection making any output a scalar: mean(y * proj).
pub fn projector(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, "proj");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = rng::uniform_vec::<f64>(&mut r, n, 0.5, 1.5)
        .into_iter()
        .zip(rng::uniform_vec::<f64>(&mut r, n, 0.0, 1.0))
        .map(|(m, s)| if s < 0.5 { -m } else { m })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

pub fn project(g: &mut Graph<'_, f64>, y: NodeId, proj: &Tensor<f64>) -> NodeId {
    let p = g.constant(proj.clone());
    let prod = g.mul(y, p).expect("projection shape");
    g.mean_all(prod)
}

pub fn fd_elementwise() {
    let mut store = ParamStore::new();
    let a = param(&mut store, "a", &[2, 3], -1.0, 1.0, 1);
    let b = param(&mut store, "b", &[2, 3], -1.0, 1.0, 2);
    let proj = projector(&[2, 3], 3);
    fd_check(&mut store, &[a, b], &|g| {
        let an = g.param(a);
        let bn = g.param(b);
        let sum = g.add(an, bn).unwrap();
        let diff = g.sub(sum, bn).unwrap();
        let prod = g.mul(diff, an).unwrap();
        let scaled = g.scale(prod, 1.7);
        project(g, scaled, &proj)
    }, "add/sub/mul/scale");
}

pub fn fd_relu() {
    let mut store = ParamStore::new();
    let x = param_off_kink(&mut store, "x", &[3, 4], 4);
    let proj = projector(&[3, 4], 5);
    fd_check(&mut store, &[x], &|g| {
        let xn = g.param(x);
        let y = g.relu(xn);
        project(g, y, &proj)
    }, "relu");
}

pub fn fd_matmul() {
    let mut store = ParamStore::new();
    let a = param(&mut store, "a", &[3, 4], -1.0, 1.0, 6);
    let b = param(&mut store, "b", &[4, 2], -1.0, 1.0, 7);
    let proj = projector(&[3, 2], 8);
    fd_check(&mut store, &[a, b], &|g| {
        let an = g.param(a);
        let bn = g.param(b);
        let y = g.matmul(an, bn).unwrap();
        project(g, y, &proj)
    }, "matmul");
}

pub fn fd_conv() {
    // Same-padding stride-1 case.
    let mut store = ParamStore::new();
    let x = param(&mut store, "x", &[2, 3, 5, 5], -1.0, 1.0, 9);
    let w = param(&mut store, "w", &[4, 3, 3, 3], -0.5, 0.5, 10);
    let proj = projector(&[2, 4, 5, 5], 11);
    fd_check(&mut store, &[x, w], &|g| {
        let xn = g.param(x);
        let wn = g.param(w);
        let y = g.conv2d(xn, wn, 1, 1).unwrap();
        project(g, y, &proj)
    }, "conv stride 1 pad 1");

    // Strided unpadded case (also covers the 1x1 pointwise shape).
    let mut store = ParamStore::new();
    let x = param(&mut store, "x", &[2, 2, 6, 6], -1.0, 1.0, 12);
    let w = param(&mut store, "w", &[3, 2, 2, 2], -0.5, 0.5, 13);
    let proj = projector(&[2, 3, 3, 3], 14);
    fd_check(&mut store, &[x, w], &|g| {
        let xn = g.param(x);
        let wn = g.param(w);
        let y = g.conv2d(xn, wn, 2, 0).unwrap();
        project(g, y, &proj)
    }, "conv stride 2 pad 0");
}

pub fn fd_chan_bias() {
    let mut store = ParamStore::new();
    let x = param(&mut store, "x", &[2, 3, 4, 4], -1.0, 1.0, 15);
    let b = param(&mut store, "b", &[3], -0.5, 0.5, 16);
    let proj = projector(&[2, 3, 4, 4], 17);
    fd_check(&mut store, &[x, b], &|g| {
        let xn = g.param(x);
        let bn = g.param(b);
        let y = g.add_chan_bias(xn, bn).unwrap();
        project(g, y, &proj)
    }, "channel bias");
}

pub fn fd_batch_norm() {
    // The op's statistics are node constants by definition (the executors
    // compute them outside the graph), so they stay fixed under probing.
    let mut r = rng::stream(18, "stats");
    for (shape, tag) in [(vec![2usize, 3, 4, 4], "rank4"), (vec![5, 3], "rank2")] {
        let c = shape[1];
        let mean = rng::uniform_vec::<f64>(&mut r, c, -0.5, 0.5);
        let var = rng::uniform_vec::<f64>(&mut r, c, 0.2, 1.5);
        let mut store = ParamStore::new();
        let x = param(&mut store, "x", &shape, -1.0, 1.0, 19);
        let gamma = param(&mut store, "gamma", &[c], 0.5, 1.5, 20);
        let beta = param(&mut store, "beta", &[c], -0.5, 0.5, 21);
        let proj = projector(&shape, 22);
        let (m, v) = (mean.clone(), var.clone());
        fd_check(&mut store, &[x, gamma, beta], &|g| {
            let xn = g.param(x);
            let gn = g.param(gamma);
            let bn = g.param(beta);
            let y = g.batch_norm(xn, gn, bn, &m, &v, 1e-5).unwrap();
            project(g, y, &proj)
        }, &format!("normalization {tag}"));
    }
}

pub fn fd_pooling() {
    let mut store = ParamStore::new();
    let x = param(&mut store, "x", &[2, 3, 6, 6], -1.0, 1.0, 23);
    let proj = projector(&[2, 3, 3, 3], 24);
    fd_check(&mut store, &[x], &|g| {
        let xn = g.param(x);
        let y = g.avg_pool(xn, 2, 2, 2).unwrap();
        project(g, y, &proj)
    }, "avg pool 2x2/2");

    let mut store = ParamStore::new();
    let x = param(&mut store, "x", &[2, 3, 4, 4], -1.0, 1.0, 25);
    let proj = projector(&[2, 3], 26);
    fd_check(&mut store, &[x], &|g| {
        let xn = g.param(x);
        let y = g.global_avg_pool(xn).unwrap();
        project(g, y, &proj)
    }, "global avg pool");
}

pub fn fd_reshape() {
    let mut store = ParamStore::new();
    let x = param(&mut store, "x", &[2, 6], -1.0, 1.0, 27);
    let proj = projector(&[4, 3], 28);
    fd_check(&mut store, &[x], &|g| {
        let xn = g.param(x);
        let y = g.reshape(xn, &[4, 3]).unwrap();
        project(g, y, &proj)
    }, "reshape");
}

pub fn fd_softmaxes() {
    let mut store = ParamStore::new();
    let x = param(&mut store, "x", &[3, 5], -2.0, 2.0, 29);
    let proj = projector(&[3, 5], 30);
    fd_check(&mut store, &[x], &|g| {
        let xn = g.param(x);
        let y = g.softmax(xn).unwrap();
        project(g, y, &proj)
    }, "softmax");
    fd_check(&mut store, &[x], &|g| {
        let xn = g.param(x);
        let y = g.log_softmax(xn).unwrap();
        project(g, y, &proj)
    }, "log softmax");
}

pub fn fd_class_losses() {
    let labels = vec![0usize, 3, 1, 2];
    let mut store = ParamStore::new();
    let x = param(&mut store, "x", &[4, 5], -2.0, 2.0, 31);
    let lab = labels.clone();
    fd_check(&mut store, &[x], &|g| {
        let xn = g.param(x);
        ce_from_logits(g, xn, &lab).unwrap()
    }, "cross-entropy");

    // Teacher-anchored KL through the student's softmax.
    let mut tr = rng::stream(32, "teacher");
    let raw = rng::uniform_vec::<f64>(&mut tr, 4 * 5, 0.05, 1.0);
    let teacher: Vec<f64> = raw
        .chunks(5)
        .flat_map(|row| {
            let s: f64 = row.iter().sum();
            row.iter().map(|v| v / s).collect::<Vec<_>>()
        })
        .collect();
    let teacher = Tensor::from_vec(vec![4, 5], teacher).unwrap();
    fd_check(&mut store, &[x], &|g| {
        let xn = g.param(x);
        let probs = g.softmax(xn).unwrap();
        g.kl_teacher_mean(probs, &teacher, KD_EPS).unwrap()
    }, "teacher kl");
}

/// The spike step and the rate substitution define their own backward
/// instead of differentiating the forward, so the check is the contract
/// itself, not a finite difference.
pub fn surrogate_contracts() {
    let mut store = ParamStore::new();
    let x = param(&mut store, "x", &[2, 3], -1.0, 1.0, 33);
    let n = 6.0;
    let proj = projector(&[2, 3], 34);

    // Straight-through: forward emits `value`, backward scales by the
    // multiplier elementwise.
    let value = Tensor::from_vec(vec![2, 3], vec![0.9, 0.1, 0.4, 0.2, 0.8, 0.3]).unwrap();
    let mult = Tensor::from_vec(vec![2, 3], vec![1.5, 0.0, -0.5, 2.0, 0.25, 1.0]).unwrap();
    let grads = {
        let mut g = Graph::new(&store);
        let xn = g.param(x);
        let st = g.straight_through(xn, value.clone(), &mult).unwrap();
        assert_eq!(g.value(st).data(), value.data(), "forward is the recorded value");
        let loss = project(&mut g, st, &proj);
        g.backward(loss, &[]).unwrap()
    };
    let got = &grads.by_param[&x];
    for j in 0..6 {
        let want = proj.data()[j] / n * mult.data()[j];
        assert!((got.data()[j] - want).abs() < 1e-12, "straight-through [{j}]");
    }

    // Threshold: forward is the Heaviside step at v_th, backward multiplies
    // by the caller-evaluated surrogate derivative.
    let sg = Tensor::from_vec(vec![2, 3], vec![0.7, 0.0, 1.0, 0.2, 0.5, 0.9]).unwrap();
    let grads = {
        let mut g = Graph::new(&store);
        let xn = g.param(x);
        let s = g.threshold(xn, 0.5, &sg).unwrap();
        for (&spike, &u) in g.value(s).data().iter().zip(store.value(x).data()) {
            assert_eq!(spike, if u >= 0.5 { 1.0 } else { 0.0 }, "forward is the step");
        }
        let loss = project(&mut g, s, &proj);
        g.backward(loss, &[]).unwrap()
    };
    let got = &grads.by_param[&x];
    for j in 0..6 {
        let want = proj.data()[j] / n * sg.data()[j];
        assert!((got.data()[j] - want).abs() < 1e-12, "threshold [{j}]");
    }
}

/// The composite the distillation loss differentiates: rate features ->
/// connector (pointwise conv, normalization, relu, pointwise conv, bias) ->
/// frozen classifier tail -> mixed CE + teacher-KL objective. Also asserts
/// no gradient reaches the frozen tail's parameters.
pub fn fd_connector_tail() {
    let arch = ArchSpec {
        name: "fd-tiny".into(),
        in_channels: 1,
        image_hw: (8, 8),
        num_classes: 3,
        stem_channels: 4,
        stem_stride: 1,
        stages: vec![
            StageSpec { channels: 4, blocks: 1, stride: 1 },
            StageSpec { channels: 6, blocks: 1, stride: 2 },
        ],
        block_kind: BlockKind::Residual,
    };
    let mut store = ParamStore::<f64>::new();
    let snn = build_network(&mut store, &arch, "snn", &mut rng::stream(40, "snn")).unwrap();
    let teacher = build_network(&mut store, &arch, "ann", &mut rng::stream(40, "ann")).unwrap();
    freeze_network(&mut store, &teacher);

    let tap = 1;
    let (c_s, h, w) = snn.tap_shape(tap).unwrap();
    let (c_a, _, _) = teacher.tap_shape(tap).unwrap();
    let conn =
        build_connector(&mut store, "conn", tap, c_s, c_a, &mut rng::stream(40, "conn")).unwrap();

    // Rate-like trainable input in (0,1), bounded away from the relu kink.
    let rates = param(&mut store, "rates", &[2, c_s, h, w], 0.1, 0.9, 41);
    let labels = vec![0usize, 2];
    let mut tr = rng::stream(42, "teacher-probs");
    let raw = rng::uniform_vec::<f64>(&mut tr, 2 * 3, 0.05, 1.0);
    let tprobs: Vec<f64> = raw
        .chunks(3)
        .flat_map(|row| {
            let s: f64 = row.iter().sum();
            row.iter().map(|v| v / s).collect::<Vec<_>>()
        })
        .collect();
    let tprobs = Tensor::from_vec(vec![2, 3], tprobs).unwrap();

    let mut ids = vec![rates, conn.conv1, conn.bn.gamma, conn.bn.beta, conn.conv2, conn.bias2];
    ids.retain(|&id| store.is_trainable(id));
    assert_eq!(ids.len(), 6, "connector and input must all be trainable");

    let blocks = teacher.blocks.len();
    let labels2 = labels.clone();
    fd_check(&mut store, &ids, &|g| {
        let x = g.param(rates);
        let mapped = connector_graph(g, &conn, x, &mut BnPlan::Running).unwrap();
        let (logits, _) = forward_graph(
            g,
            &teacher,
            (tap + 1)..blocks,
            mapped,
            &mut ActPlan::Relu,
            &mut BnPlan::Running,
        )
        .unwrap();
        let ce = ce_from_logits(g, logits, &labels2).unwrap();
        let probs = g.softmax(logits).unwrap();
        let kl = g.kl_teacher_mean(probs, &tprobs, KD_EPS).unwrap();
        let ce_part = g.scale(ce, 0.5);
        let kl_part = g.scale(kl, 0.5);
        g.add(ce_part, kl_part).unwrap()
    }, "connector -> frozen tail");

    // The tail must not leak gradients into frozen teacher parameters.
    let grads = {
        let mut g = Graph::new(&store);
        let x = g.param(rates);
        let mapped = connector_graph(&mut g, &conn, x, &mut BnPlan::Running).unwrap();
        let (logits, _) = forward_graph(
            &mut g,
            &teacher,
            (tap + 1)..blocks,
            mapped,
            &mut ActPlan::Relu,
            &mut BnPlan::Running,
        )
        .unwrap();
        let ce = ce_from_logits(&mut g, logits, &labels).unwrap();
        g.backward(ce, &[]).unwrap()
    };
    for id in teacher.param_ids() {
        assert!(
            !grads.by_param.contains_key(&id),
            "frozen parameter {} received a gradient",
            store.name(id)
        );
    }
}

/// Every per-operation check plus the composite, in one pass.
pub fn fd_full_suite() {
    fd_elementwise();
    fd_relu();
    fd_matmul();
    fd_conv();
    fd_chan_bias();
    fd_batch_norm();
    fd_pooling();
    fd_reshape();
    fd_softmaxes();
    fd_class_losses();
    surrogate_contracts();
    fd_connector_tail();
}
