//! Central finite-difference checks of every differentiable operator, in f64.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{BatchNormState, BnMode, Graph, NodeId, Padding, ParamStore, Tensor};
use crate::rng;

pub const H: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so gradients that are zero up to round-off compare absolutely.
const FLOOR: f64 = 1e-6;

/// Loss value and analytic gradient for each input.
pub type Eval<'a> = dyn Fn(&[Tensor<f64>]) -> (f64, Vec<Tensor<f64>>) + 'a;

/// Worst relative error between analytic and central-difference gradients.
pub fn max_rel_error(inputs: &[Tensor<f64>], f: &Eval) -> f64 {
    let (_, analytic) = f(inputs);
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (f(&plus).0 - f(&minus).0) / (2.0 * H);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Magnitudes in `[0.1, 1]` with random sign, so ±H never crosses zero.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(0.1..1.0);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Like [`max_rel_error`], but a coordinate that fails the tolerance is
/// excused when its one-sided differences disagree: a ReLU or max-pool kink
/// lies within ±H there, so no derivative exists to compare.
/// `h` is the step. Returns `(worst error, excused, checked)`.
pub fn max_rel_error_smooth(inputs: &[Tensor<f64>], h: f64, f: &Eval) -> (f64, usize, usize) {
    let (f0, analytic) = f(inputs);
    let mut worst: f64 = 0.0;
    let (mut excused, mut total) = (0, 0);
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            total += 1;
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let (fp, fm) = (f(&plus).0, f(&minus).0);
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            if err >= TOLERANCE {
                let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
                if (fwd - bwd).abs() > 0.1 * fwd.abs().max(bwd.abs()) {
                    excused += 1;
                    continue;
                }
            }
            worst = worst.max(err);
        }
    }
    (worst, excused, total)
}

/// Values on a 0.05-spaced lattice plus jitter, shuffled: every pooling window
/// has a unique maximum by a margin far above H.
fn distinct(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n)
        .map(|i| i as f64 * 0.05 + r.random_range(0.0..0.01))
        .collect();
    for i in (1..n).rev() {
        v.swap(i, r.random_range(0..=i));
    }
    Tensor::new(shape, v).unwrap()
}

fn grads_of(g: &Graph<f64>, loss: NodeId, leaves: &[NodeId]) -> Vec<Tensor<f64>> {
    let grads = g.backward(loss).unwrap();
    leaves
        .iter()
        .map(|&n| {
            grads
                .wrt(n)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(n).shape()))
        })
        .collect()
}

/// `Σ c ⊙ y`, a scalar whose gradient wrt `y` is a random dense tensor.
fn project(g: &mut Graph<f64>, y: NodeId, c: &Tensor<f64>) -> NodeId {
    let p = g.mul_const(y, c).unwrap();
    g.sum(p).unwrap()
}

/// Runs `op` on graph inputs built from `inputs`, projects the output with a
/// fixed random tensor and differentiates.
fn projected(
    inputs: Vec<Tensor<f64>>,
    seed: u64,
    op: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
) -> f64 {
    let probe = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone()).unwrap()).collect();
        let y = op(&mut g, &ids);
        g.value(y).shape().to_vec()
    };
    let c = uniform(&mut rng::stream(seed, "project", 0), &probe, -1.0, 1.0);
    let f = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| g.input(t.clone()).unwrap()).collect();
        let y = op(&mut g, &ids);
        let loss = project(&mut g, y, &c);
        (g.value(loss).item().unwrap(), grads_of(&g, loss, &ids))
    };
    max_rel_error(&inputs, &f)
}

fn batch_norm(seed: u64, mode: BnMode) -> f64 {
    let r = &mut rng::stream(seed, "gradcheck", 7);
    let shape = [3, 2, 2, 2];
    let x = uniform(r, &shape, -2.0, 2.0);
    let gamma = uniform(r, &[2], 0.5, 1.5);
    let beta = uniform(r, &[2], -0.5, 0.5);
    let running_mean = uniform(r, &[2], -0.5, 0.5);
    let running_var = uniform(r, &[2], 0.5, 2.0);
    let c = uniform(r, &shape, -1.0, 1.0);
    let f = |xs: &[Tensor<f64>]| {
        let mut store = ParamStore::new();
        let mut state = BatchNormState::new(&mut store, "bn", 2);
        store.get_mut(state.gamma).value = xs[1].clone();
        store.get_mut(state.beta).value = xs[2].clone();
        state.running_mean = running_mean.clone();
        state.running_var = running_var.clone();
        let mut g = Graph::new();
        let xid = g.input(xs[0].clone()).unwrap();
        let y = g.batch_norm(&store, xid, &mut state, mode).unwrap();
        let loss = project(&mut g, y, &c);
        let dx = grads_of(&g, loss, &[xid]).remove(0);
        let grads = g.backward(loss).unwrap();
        store.zero_grad();
        grads.accumulate_into(&mut store);
        let dgamma = store.get(state.gamma).grad.clone();
        let dbeta = store.get(state.beta).grad.clone();
        (g.value(loss).item().unwrap(), vec![dx, dgamma, dbeta])
    };
    max_rel_error(&[x, gamma, beta], &f)
}

fn conv_case(seed: u64, stride: usize, padding: Padding, bias: bool) -> f64 {
    let r = &mut rng::stream(seed, "gradcheck", 1 + stride as u64);
    let mut inputs = vec![
        uniform(r, &[2, 5, 5, 2], -1.0, 1.0),
        uniform(r, &[3, 3, 2, 3], -1.0, 1.0),
    ];
    if bias {
        inputs.push(uniform(r, &[3], -1.0, 1.0));
    }
    projected(inputs, seed, |g, ids| {
        g.conv2d(ids[0], ids[1], ids.get(2).copied(), stride, padding)
            .unwrap()
    })
}

/// Every operator at one seed: `(name, worst relative error)`.
pub fn check_ops(seed: u64) -> Vec<(&'static str, f64)> {
    let r = &mut rng::stream(seed, "gradcheck", 0);
    let mut out = vec![
        ("conv2d_same_bias", conv_case(seed, 1, Padding::Same, true)),
        (
            "conv2d_valid_stride2",
            conv_case(seed, 2, Padding::Valid, false),
        ),
    ];
    out.push((
        "relu",
        projected(vec![away_from_zero(r, &[2, 3, 3, 2])], seed, |g, ids| {
            g.relu(ids[0]).unwrap()
        }),
    ));
    out.push((
        "sigmoid",
        projected(
            vec![uniform(r, &[2, 3, 3, 1], -3.0, 3.0)],
            seed,
            |g, ids| g.sigmoid(ids[0]).unwrap(),
        ),
    ));
    out.push((
        "softmax",
        projected(vec![uniform(r, &[4, 3], -3.0, 3.0)], seed, |g, ids| {
            g.softmax(ids[0]).unwrap()
        }),
    ));
    out.push((
        "max_pool2",
        projected(vec![distinct(r, &[2, 4, 4, 2])], seed, |g, ids| {
            g.max_pool2(ids[0]).unwrap()
        }),
    ));
    out.push(("batch_norm_train", batch_norm(seed, BnMode::Train)));
    out.push(("batch_norm_eval", batch_norm(seed, BnMode::Eval)));
    out.push((
        "upsample2_concat",
        projected(
            vec![
                uniform(r, &[2, 2, 2, 2], -1.0, 1.0),
                uniform(r, &[2, 4, 4, 1], -1.0, 1.0),
            ],
            seed,
            |g, ids| g.upsample2_concat(ids[0], ids[1]).unwrap(),
        ),
    ));
    out.push((
        "global_avg_pool",
        projected(
            vec![uniform(r, &[2, 3, 3, 2], -1.0, 1.0)],
            seed,
            |g, ids| g.global_avg_pool(ids[0]).unwrap(),
        ),
    ));
    out.push((
        "linear",
        projected(
            vec![
                uniform(r, &[3, 4], -1.0, 1.0),
                uniform(r, &[4, 2], -1.0, 1.0),
                uniform(r, &[2], -1.0, 1.0),
            ],
            seed,
            |g, ids| g.linear(ids[0], ids[1], ids[2]).unwrap(),
        ),
    ));
    out.push((
        "sum",
        projected(vec![uniform(r, &[2, 3], -1.0, 1.0)], seed, |g, ids| {
            g.sum(ids[0]).unwrap()
        }),
    ));
    let scale = uniform(r, &[2, 3], -2.0, 2.0);
    out.push((
        "mul_const",
        projected(vec![uniform(r, &[2, 3], -1.0, 1.0)], seed, |g, ids| {
            g.mul_const(ids[0], &scale).unwrap()
        }),
    ));
    let target = uniform(r, &[2, 3, 3, 1], 0.0, 1.0);
    let p = uniform(r, &[2, 3, 3, 1], 0.05, 0.95);
    let bce = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let id = g.input(xs[0].clone()).unwrap();
        let loss = g.pixelwise_bce(id, &target).unwrap();
        (g.value(loss).item().unwrap(), grads_of(&g, loss, &[id]))
    };
    out.push(("pixelwise_bce", max_rel_error(&[p], &bce)));
    let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..3)).collect();
    let probs = uniform(r, &[4, 3], 0.05, 0.95);
    let ce = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let id = g.input(xs[0].clone()).unwrap();
        let loss = g.categorical_ce(id, &labels).unwrap();
        (g.value(loss).item().unwrap(), grads_of(&g, loss, &[id]))
    };
    out.push(("categorical_ce", max_rel_error(&[probs], &ce)));
    let logits = uniform(r, &[4, 3], -2.0, 2.0);
    let softmax_ce = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let id = g.input(xs[0].clone()).unwrap();
        let p = g.softmax(id).unwrap();
        let loss = g.categorical_ce(p, &labels).unwrap();
        (g.value(loss).item().unwrap(), grads_of(&g, loss, &[id]))
    };
    out.push((
        "softmax_categorical_ce",
        max_rel_error(&[logits], &softmax_ce),
    ));
    out
}

/// Worst error per operator over seeds `0..seeds`.
pub fn check_all(seeds: u64) -> Vec<(&'static str, f64)> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in 0..seeds {
        for (name, err) in check_ops(seed) {
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some(w) => w.1 = w.1.max(err),
                None => worst.push((name, err)),
            }
        }
    }
    worst
}
