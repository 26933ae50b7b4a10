//! Finite-difference gradient checks shared by the gradient tests and the
//! acceptance run. Each group checks one family of ops on one random
//! instance and records the worst relative error per op name.

use std::collections::BTreeMap;

use gpcount::gp::{self, LatentBank};
use gpcount::gradcheck::{numerical_gradient, relative_error, DEFAULT_STEP};
use gpcount::losses;
use gpcount::model::{self, init_params, ModelConfig};
use gpcount::tensor::{Array, Graph, NodeId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Default)]
pub struct Recorder {
    /// op name → (worst relative error, number of checks)
    pub ops: BTreeMap<String, (f64, usize)>,
}

impl Recorder {
    /// Compare the tape gradient of `build(x)` against central differences.
    pub fn check(&mut self, name: &str, x: &Array, build: &dyn Fn(&mut Graph, NodeId) -> NodeId) {
        let mut g = Graph::new();
        let xn = g.param(x.clone());
        let root = build(&mut g, xn);
        g.backward(root).unwrap();
        let analytic = g
            .grad(xn)
            .cloned()
            .unwrap_or_else(|| Array::zeros(x.shape()));
        let numeric = numerical_gradient(
            |v| {
                let mut g = Graph::new();
                let xn = g.param(v.clone());
                let r = build(&mut g, xn);
                g.value(r).item()
            },
            x,
            DEFAULT_STEP,
        );
        let err = relative_error(&analytic, &numeric);
        let e = self.ops.entry(name.to_string()).or_insert((0.0, 0));
        e.0 = e.0.max(err);
        e.1 += 1;
    }
}

pub type Group = fn(&mut Recorder, &mut ChaCha8Rng);

/// Run `group` on instances seeded 0..instances.
pub fn run(group: Group, instances: u64) -> Recorder {
    let mut rec = Recorder::default();
    for seed in 0..instances {
        group(&mut rec, &mut ChaCha8Rng::seed_from_u64(seed));
    }
    rec
}

#[allow(dead_code)]
pub const GROUPS: &[(&str, Group)] = &[
    ("matmul", matmul_both_operands),
    ("conv2d", conv2d_input_kernel_bias),
    ("binary", elementwise_binary_ops),
    ("unary", unary_and_reduction_ops),
    ("upsample", bilinear_upsample),
    ("gp_nodes", variance_and_mean_nodes),
    ("model_l_un", full_unlabeled_loss_through_model),
];

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero so kinks are never straddled by the
/// finite-difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let a = random_array(rng, shape, 0.1, 1.0);
    let signs: Vec<f64> = (0..a.len())
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    Array::new(
        shape.to_vec(),
        a.data().iter().zip(&signs).map(|(v, s)| v * s).collect(),
    )
    .unwrap()
}

/// Reduce an arbitrary output to a scalar with fixed random weights so every
/// output element contributes a distinct sensitivity.
fn weighted_sum(g: &mut Graph, y: NodeId, weights: &Array) -> NodeId {
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(weights.clone().reshape(&shape).unwrap());
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

pub fn matmul_both_operands(rec: &mut Recorder, rng: &mut ChaCha8Rng) {
    let (m, k, n) = (
        rng.random_range(1..5),
        rng.random_range(1..5),
        rng.random_range(1..5),
    );
    let a = random_array(rng, &[m, k], -1.0, 1.0);
    let b = random_array(rng, &[k, n], -1.0, 1.0);
    let w = random_array(rng, &[m * n], -1.0, 1.0);
    let (b2, w2) = (b.clone(), w.clone());
    rec.check("matmul lhs", &a, &move |g, x| {
        let bn = g.constant(b2.clone());
        let y = g.matmul(x, bn).unwrap();
        weighted_sum(g, y, &w2)
    });
    rec.check("matmul rhs", &b, &move |g, x| {
        let an = g.constant(a.clone());
        let y = g.matmul(an, x).unwrap();
        weighted_sum(g, y, &w)
    });
}

pub fn conv2d_input_kernel_bias(rec: &mut Recorder, rng: &mut ChaCha8Rng) {
    let stride = rng.random_range(1..3);
    let padding = rng.random_range(0..2);
    let (ci, co) = (rng.random_range(1..3), rng.random_range(1..3));
    let (h, w) = (rng.random_range(4..8), rng.random_range(4..8));
    let x = random_array(rng, &[ci, h, w], -1.0, 1.0);
    let k = random_array(rng, &[co, ci, 3, 3], -1.0, 1.0);
    let b = random_array(rng, &[co], -1.0, 1.0);
    let mut probe = Graph::new();
    let (xp, kp, bp) = (
        probe.constant(x.clone()),
        probe.constant(k.clone()),
        probe.constant(b.clone()),
    );
    let out = probe.conv2d(xp, kp, bp, stride, padding).unwrap();
    let wts = random_array(rng, &[probe.value(out).len()], -1.0, 1.0);

    let (k1, b1, wt) = (k.clone(), b.clone(), wts.clone());
    rec.check("conv2d input", &x, &move |g, xn| {
        let (kn, bn) = (g.constant(k1.clone()), g.constant(b1.clone()));
        let y = g.conv2d(xn, kn, bn, stride, padding).unwrap();
        weighted_sum(g, y, &wt)
    });
    let (x1, b1, wt) = (x.clone(), b.clone(), wts.clone());
    rec.check("conv2d kernel", &k, &move |g, kn| {
        let (xn, bn) = (g.constant(x1.clone()), g.constant(b1.clone()));
        let y = g.conv2d(xn, kn, bn, stride, padding).unwrap();
        weighted_sum(g, y, &wt)
    });
    rec.check("conv2d bias", &b, &move |g, bn| {
        let (xn, kn) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d(xn, kn, bn, stride, padding).unwrap();
        weighted_sum(g, y, &wts)
    });
}

pub fn elementwise_binary_ops(rec: &mut Recorder, rng: &mut ChaCha8Rng) {
    type Bin = fn(&mut Graph, NodeId, NodeId) -> NodeId;
    let ops: [(&str, Bin); 4] = [
        ("add", |g, a, b| g.add(a, b).unwrap()),
        ("sub", |g, a, b| g.sub(a, b).unwrap()),
        ("mul", |g, a, b| g.mul(a, b).unwrap()),
        ("div", |g, a, b| g.div(a, b).unwrap()),
    ];
    let n = rng.random_range(1..6);
    let a = away_from_zero(rng, &[n]);
    let b = away_from_zero(rng, &[n]);
    let s = Array::scalar(away_from_zero(rng, &[1]).data()[0]);
    let w = random_array(rng, &[n], -1.0, 1.0);
    for (name, op) in ops {
        let (b1, w1) = (b.clone(), w.clone());
        rec.check(name, &a, &move |g, x| {
            let bn = g.constant(b1.clone());
            let y = op(g, x, bn);
            weighted_sum(g, y, &w1)
        });
        let (a1, w1) = (a.clone(), w.clone());
        rec.check(name, &b, &move |g, x| {
            let an = g.constant(a1.clone());
            let y = op(g, an, x);
            weighted_sum(g, y, &w1)
        });
        // scalar broadcast on either side
        let (a1, w1) = (a.clone(), w.clone());
        rec.check(name, &s, &move |g, x| {
            let an = g.constant(a1.clone());
            let y = op(g, an, x);
            weighted_sum(g, y, &w1)
        });
        let (a1, w1) = (a.clone(), w.clone());
        rec.check(name, &s, &move |g, x| {
            let an = g.constant(a1.clone());
            let y = op(g, x, an);
            weighted_sum(g, y, &w1)
        });
    }
}

pub fn unary_and_reduction_ops(rec: &mut Recorder, rng: &mut ChaCha8Rng) {
    let n = rng.random_range(1..7);
    let mixed = away_from_zero(rng, &[n]);
    let positive = random_array(rng, &[n], 0.2, 2.0);
    let w = random_array(rng, &[n], -1.0, 1.0);
    let c: f64 = rng.random_range(-2.0..2.0);

    let w1 = w.clone();
    rec.check("relu", &mixed, &move |g, x| {
        let y = g.relu(x);
        weighted_sum(g, y, &w1)
    });
    let w1 = w.clone();
    rec.check("scalar_mul", &mixed, &move |g, x| {
        let y = g.scalar_mul(x, c);
        weighted_sum(g, y, &w1)
    });
    let w1 = w.clone();
    rec.check("log", &positive, &move |g, x| {
        let y = g.log(x).unwrap();
        weighted_sum(g, y, &w1)
    });
    let w1 = w.clone();
    rec.check("sqrt", &positive, &move |g, x| {
        let y = g.sqrt(x).unwrap();
        weighted_sum(g, y, &w1)
    });
    let w1 = w.clone();
    rec.check("sum", &mixed, &move |g, x| {
        let y = g.mul(x, x).unwrap();
        let y = weighted_sum(g, y, &w1);
        g.sum(y)
    });
    rec.check("mean", &mixed, &move |g, x| {
        let y = g.mul(x, x).unwrap();
        g.mean(y)
    });
    let w1 = w.clone();
    rec.check("reshape", &mixed, &move |g, x| {
        let y = g.reshape(x, &[1, n]).unwrap();
        let y = g.mul(y, y).unwrap();
        weighted_sum(g, y, &w1)
    });
}

pub fn bilinear_upsample(rec: &mut Recorder, rng: &mut ChaCha8Rng) {
    let (c, h, w) = (
        rng.random_range(1..3),
        rng.random_range(1..5),
        rng.random_range(1..5),
    );
    let (oh, ow) = (rng.random_range(h..12), rng.random_range(w..12));
    let x = random_array(rng, &[c, h, w], -1.0, 1.0);
    let wts = random_array(rng, &[c * oh * ow], -1.0, 1.0);
    rec.check("upsample", &x, &move |g, xn| {
        let y = g.bilinear_upsample(xn, oh, ow).unwrap();
        weighted_sum(g, y, &wts)
    });
}

fn random_bank(rng: &mut ChaCha8Rng, rows: usize, m: usize, d: usize) -> LatentBank {
    let mut bank = LatentBank::new();
    for i in 0..rows {
        let f: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        bank.push(format!("l{i}"), f, t).unwrap();
    }
    bank
}

pub fn variance_and_mean_nodes(rec: &mut Recorder, rng: &mut ChaCha8Rng) {
    let m = rng.random_range(2..10);
    let d = rng.random_range(1..5);
    let rows = rng.random_range(1..8);
    let bank = random_bank(rng, rows, m, d);
    let z = random_array(rng, &[m], -1.0, 1.0);
    let nb = gp::nearest(z.data(), &bank, 8, gp::NeighborMetric::Cosine).unwrap();
    let noise: f64 = rng.random_range(0.2..1.5);
    let feats = nb.features.clone();
    rec.check("variance_node", &z, &move |g, x| {
        gp::variance_node(g, x, &feats, noise).unwrap()
    });
    let wts = random_array(rng, &[d], -1.0, 1.0);
    rec.check("mean_node", &z, &move |g, x| {
        let mu = gp::mean_node(g, x, &nb, noise).unwrap();
        weighted_sum(g, mu, &wts)
    });
}

/// L_un through the whole network: image → encoder → z → (variance node,
/// decoder) → loss, differentiated w.r.t. each parameter tensor. Neighbors
/// and the pseudo mean are frozen, as in training.
pub fn full_unlabeled_loss_through_model(rec: &mut Recorder, rng: &mut ChaCha8Rng) {
    let cfg = ModelConfig {
        height: 16,
        width: 16,
        encoder_channels: [2, 3, 3],
        latent_channels: 3,
    };
    let mut params = init_params(&cfg, rng.random()).unwrap();
    for p in &mut params.tensors {
        if p.value.shape().len() == 1 {
            p.value = random_array(rng, p.value.shape(), 0.05, 0.3);
        }
    }
    let pixels: Vec<f64> = (0..256).map(|_| rng.random_range(0.0..1.0)).collect();
    let m = cfg.latent_dim();
    let bank = random_bank(rng, 4, m, 256);
    let z0 = model::latent(&params, &pixels).unwrap();
    let nb = gp::nearest(z0.as_slice(), &bank, 8, gp::NeighborMetric::Cosine).unwrap();
    let post = gp::posterior_with(z0.as_slice(), &nb, &bank, 1.0).unwrap();
    for (which, param) in params.tensors.iter().enumerate() {
        let build = |g: &mut Graph, p: NodeId| -> NodeId {
            let mut bound = params.bind(g, false);
            bound.nodes[which] = p;
            let enc = model::encode(g, &bound, &cfg, &pixels).unwrap();
            let var = gp::variance_node(g, enc.node, &nb.features, 1.0).unwrap();
            let pred = model::decode(g, &bound, &cfg, enc.node).unwrap();
            losses::unsupervised_loss(g, pred, &post, var).unwrap().node
        };
        rec.check(&format!("l_un/{}", param.name), &param.value, &build);
    }
}
