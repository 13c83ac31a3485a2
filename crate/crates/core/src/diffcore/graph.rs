//! Reverse-mode tape.
//!
//! Each forward call appends a node holding its value and whatever it needs
//! for the backward pass. [`Graph::backward`] walks the tape in reverse.

use super::ops::{self, BnMode, ConvGeom, Padding};
use super::{BatchNormState, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    Conv {
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax {
        x: NodeId,
        width: usize,
    },
    MaxPool {
        x: NodeId,
        arg: Vec<u32>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    UpsampleConcat {
        x: NodeId,
        skip: NodeId,
        xs: [usize; 4],
        ss: [usize; 4],
    },
    GlobalAvgPool {
        x: NodeId,
        spatial: usize,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Bce {
        p: NodeId,
        target: Vec<T>,
    },
    CategoricalCe {
        p: NodeId,
        k: usize,
        labels: Vec<usize>,
    },
    Sum(NodeId),
    MulConst {
        x: NodeId,
        c: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients of a scalar loss with respect to every leaf of a graph.
pub struct Gradients<T> {
    leaves: Vec<(NodeId, Option<ParamId>, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient reaching leaf `node`, if any flowed there.
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.leaves
            .iter()
            .find(|(n, _, _)| *n == node)
            .map(|(_, _, g)| g)
    }

    /// Adds parameter-leaf gradients into `Param::grad`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (_, pid, g) in &self.leaves {
            if let Some(pid) = pid {
                let p = store.get_mut(*pid);
                for (acc, &v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += v;
                }
            }
        }
    }
}

#[derive(Default)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn into_value(mut self, id: NodeId) -> Tensor<T> {
        self.nodes.swap_remove(id.0).value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, what: &str) -> Result<NodeId> {
        if !value.is_finite() {
            bail!(Numeric, "{what} produced a non-finite value");
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn input(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(value, Op::Input, "input")
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<NodeId> {
        let value = store.get(id).value.clone();
        self.push(value, Op::Param(id), "parameter")
    }

    /// Batched cross-correlation of `x: [B,H,W,C]` with `k: [kh,kw,C,O]`, plus optional bias `[O]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let &[bn, h, w, c] = self.shape(x) else {
            bail!(
                Dimension,
                "conv2d: graph inputs must be [B,H,W,C], got {:?}",
                self.shape(x)
            );
        };
        let geom = ConvGeom::new([bn, h, w, c], self.shape(k), stride, padding)?;
        let bias = match b {
            Some(b) => {
                if self.shape(b) != [geom.o] {
                    bail!(
                        Dimension,
                        "conv2d: bias {:?} for {} outputs",
                        self.shape(b),
                        geom.o
                    );
                }
                Some(self.value(b).data())
            }
            None => None,
        };
        let (out, cols) =
            ops::conv_forward(self.value(x).data(), self.value(k).data(), bias, &geom);
        let value = Tensor::new(&geom.out_shape(), out)?;
        self.push(
            value,
            Op::Conv {
                x,
                k,
                b,
                geom,
                cols,
            },
            "conv2d",
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|v| v.max(T::zero()));
        self.push(v, Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(ops::sigmoid_scalar);
        self.push(v, Op::Sigmoid(x), "sigmoid")
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let width = *self.shape(x).last().unwrap_or(&1);
        let data = ops::softmax_rows(self.value(x).data(), width);
        let v = Tensor::new(self.shape(x), data)?;
        self.push(v, Op::Softmax { x, width }, "softmax")
    }

    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        if self.shape(x).len() != 4 {
            bail!(Dimension, "max_pool2: graph inputs must be [B,H,W,C]");
        }
        let s = ops::pool_geom(self.shape(x))?;
        let (out, arg) = ops::max_pool2_forward(self.value(x).data(), s);
        let v = Tensor::new(&[s[0], s[1] / 2, s[2] / 2, s[3]], out)?;
        self.push(v, Op::MaxPool { x, arg }, "max_pool2")
    }

    /// Batch normalization; train mode also updates `state`'s running statistics.
    pub fn batch_norm(
        &mut self,
        store: &ParamStore<T>,
        x: NodeId,
        state: &mut BatchNormState<T>,
        mode: BnMode,
    ) -> Result<NodeId> {
        let c = ops::bn_check(self.shape(x), state, mode)?;
        let gamma = self.param(store, state.gamma)?;
        let beta = self.param(store, state.beta)?;
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let xv = self.value(x).data();
        let (y, xhat, inv_std) = match mode {
            BnMode::Train => {
                let out = ops::bn_train_forward(xv, c, gv, bv, state.epsilon);
                state.update_running(&out.mean, &out.var, xv.len() / c);
                (out.y, out.xhat, out.inv_std)
            }
            BnMode::Eval => ops::bn_eval_forward(xv, state, gv, bv),
        };
        let v = Tensor::new(self.shape(x), y)?;
        let train = mode == BnMode::Train;
        self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            "batch_norm",
        )
    }

    pub fn upsample2_concat(&mut self, x: NodeId, skip: NodeId) -> Result<NodeId> {
        if self.shape(x).len() != 4 {
            bail!(
                Dimension,
                "upsample2_concat: graph inputs must be [B,H,W,C]"
            );
        }
        let (xs, ss) = ops::upsample_geom(self.shape(x), self.shape(skip))?;
        let out =
            ops::upsample_concat_forward(self.value(x).data(), self.value(skip).data(), xs, ss);
        let v = Tensor::new(&[ss[0], ss[1], ss[2], xs[3] + ss[3]], out)?;
        self.push(
            v,
            Op::UpsampleConcat { x, skip, xs, ss },
            "upsample2_concat",
        )
    }

    /// `[B,H,W,C] → [B,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let &[b, h, w, c] = self.shape(x) else {
            bail!(
                Dimension,
                "global_avg_pool: expected [B,H,W,C], got {:?}",
                self.shape(x)
            );
        };
        let spatial = h * w;
        let inv = T::one() / T::from_f64(spatial as f64);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * c];
        for (bi, img) in xv.chunks_exact(spatial * c).enumerate() {
            let dst = &mut out[bi * c..(bi + 1) * c];
            for px in img.chunks_exact(c) {
                for (d, &v) in dst.iter_mut().zip(px) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let v = Tensor::new(&[b, c], out)?;
        self.push(v, Op::GlobalAvgPool { x, spatial }, "global_avg_pool")
    }

    /// Affine map `[B,F] · [F,O] + [O]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (&[bn, f], &[wf, o]) = (self.shape(x), self.shape(w)) else {
            bail!(Dimension, "linear: expected [B,F] and [F,O]");
        };
        if wf != f || self.shape(b) != [o] {
            bail!(
                Dimension,
                "linear: input {f} features, weight {:?}, bias {:?}",
                self.shape(w),
                self.shape(b)
            );
        }
        let mut out = Vec::with_capacity(bn * o);
        for _ in 0..bn {
            out.extend_from_slice(self.value(b).data());
        }
        T::gemm(
            bn,
            f,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            T::one(),
            &mut out,
        );
        let v = Tensor::new(&[bn, o], out)?;
        self.push(v, Op::Linear { x, w, b }, "linear")
    }

    /// Mean pixel-wise binary cross-entropy against a constant target.
    pub fn pixelwise_bce(&mut self, p: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        let loss = ops::pixelwise_bce(self.value(p), target)?;
        let target = target.data().to_vec();
        self.push(Tensor::scalar(loss), Op::Bce { p, target }, "pixelwise_bce")
    }

    /// Mean categorical cross-entropy of `[B,K]` probabilities against class indices.
    pub fn categorical_ce(&mut self, p: NodeId, labels: &[usize]) -> Result<NodeId> {
        let &[_, k] = self.shape(p) else {
            bail!(
                Dimension,
                "categorical_ce: expected [B,K] probabilities, got {:?}",
                self.shape(p)
            );
        };
        let loss = ops::categorical_ce_rows(self.value(p).data(), k, labels)?;
        let labels = labels.to_vec();
        self.push(
            Tensor::scalar(loss),
            Op::CategoricalCe { p, k, labels },
            "categorical_ce",
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// Element-wise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: NodeId, c: &Tensor<T>) -> Result<NodeId> {
        if self.shape(x) != c.shape() {
            bail!(
                Dimension,
                "mul_const: {:?} vs {:?}",
                self.shape(x),
                c.shape()
            );
        }
        let data: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let v = Tensor::new(c.shape(), data)?;
        self.push(
            v,
            Op::MulConst {
                x,
                c: c.data().to_vec(),
            },
            "mul_const",
        )
    }

    /// Reverse pass from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            bail!(
                State,
                "backward called before any forward computation was recorded"
            );
        }
        if self.value(loss).len() != 1 {
            bail!(
                State,
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            );
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let mut send = |to: NodeId, g: Vec<T>| accumulate(&mut grads, to, g);
            match &node.op {
                Op::Input => {
                    leaves.push((NodeId(idx), None, Tensor::new(node.value.shape(), dout)?))
                }
                Op::Param(pid) => leaves.push((
                    NodeId(idx),
                    Some(*pid),
                    Tensor::new(node.value.shape(), dout)?,
                )),
                Op::Conv {
                    x,
                    k,
                    b,
                    geom,
                    cols,
                } => {
                    let (dx, dk, db) = ops::conv_backward(&dout, cols, self.value(*k).data(), geom);
                    send(*x, dx);
                    send(*k, dk);
                    if let Some(b) = b {
                        send(*b, db);
                    }
                }
                Op::Relu(x) => {
                    let g = dout
                        .iter()
                        .zip(node.value.data())
                        .map(|(&d, &y)| if y > T::zero() { d } else { T::zero() })
                        .collect();
                    send(*x, g);
                }
                Op::Sigmoid(x) => {
                    let g = dout
                        .iter()
                        .zip(node.value.data())
                        .map(|(&d, &y)| d * y * (T::one() - y))
                        .collect();
                    send(*x, g);
                }
                Op::Softmax { x, width } => {
                    let mut g = Vec::with_capacity(dout.len());
                    for (d, y) in dout
                        .chunks_exact(*width)
                        .zip(node.value.data().chunks_exact(*width))
                    {
                        let dot: T = d.iter().zip(y).map(|(&a, &b)| a * b).sum();
                        g.extend(d.iter().zip(y).map(|(&a, &b)| b * (a - dot)));
                    }
                    send(*x, g);
                }
                Op::MaxPool { x, arg } => {
                    let mut g = vec![T::zero(); self.value(*x).len()];
                    for (&i, &d) in arg.iter().zip(&dout) {
                        g[i as usize] += d;
                    }
                    send(*x, g);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let gv = self.value(*gamma).data();
                    if *train {
                        let (dx, dg, db) = ops::bn_train_backward(&dout, xhat, inv_std, gv);
                        send(*x, dx);
                        send(*gamma, dg);
                        send(*beta, db);
                    } else {
                        let c = gv.len();
                        let mut dg = vec![T::zero(); c];
                        let mut db = vec![T::zero(); c];
                        let mut dx = Vec::with_capacity(dout.len());
                        for (d, h) in dout.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            for ch in 0..c {
                                dg[ch] += d[ch] * h[ch];
                                db[ch] += d[ch];
                                dx.push(d[ch] * gv[ch] * inv_std[ch]);
                            }
                        }
                        send(*x, dx);
                        send(*gamma, dg);
                        send(*beta, db);
                    }
                }
                Op::UpsampleConcat { x, skip, xs, ss } => {
                    let (dx, ds) = ops::upsample_concat_backward(&dout, *xs, *ss);
                    send(*x, dx);
                    send(*skip, ds);
                }
                Op::GlobalAvgPool { x, spatial } => {
                    let c = node.value.shape()[1];
                    let inv = T::one() / T::from_f64(*spatial as f64);
                    let mut g = Vec::with_capacity(self.value(*x).len());
                    for row in dout.chunks_exact(c) {
                        for _ in 0..*spatial {
                            g.extend(row.iter().map(|&d| d * inv));
                        }
                    }
                    send(*x, g);
                }
                Op::Linear { x, w, b } => {
                    let (bn, f) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let o = self.shape(*w)[1];
                    let mut dx = vec![T::zero(); bn * f];
                    T::gemm(
                        bn,
                        o,
                        f,
                        &dout,
                        false,
                        self.value(*w).data(),
                        true,
                        T::zero(),
                        &mut dx,
                    );
                    let mut dw = vec![T::zero(); f * o];
                    T::gemm(
                        f,
                        bn,
                        o,
                        self.value(*x).data(),
                        true,
                        &dout,
                        false,
                        T::zero(),
                        &mut dw,
                    );
                    let mut db = vec![T::zero(); o];
                    for row in dout.chunks_exact(o) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    send(*x, dx);
                    send(*w, dw);
                    send(*b, db);
                }
                Op::Bce { p, target } => {
                    send(*p, ops::bce_grad(self.value(*p).data(), target, dout[0]));
                }
                Op::CategoricalCe { p, k, labels } => {
                    let pv = self.value(*p).data();
                    let scale = dout[0] / T::from_f64(labels.len() as f64);
                    let mut g = vec![T::zero(); pv.len()];
                    for (r, &l) in labels.iter().enumerate() {
                        let pc = ops::clip_prob(pv[r * k + l]);
                        g[r * k + l] = -scale / pc;
                    }
                    send(*p, g);
                }
                Op::Sum(x) => {
                    send(*x, vec![dout[0]; self.value(*x).len()]);
                }
                Op::MulConst { x, c } => {
                    send(*x, dout.iter().zip(c).map(|(&d, &cv)| d * cv).collect());
                }
            }
        }
        leaves.reverse();
        Ok(Gradients { leaves })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], to: NodeId, g: Vec<T>) {
    match &mut grads[to.0] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let g = Graph::<f32>::new();
        assert!(matches!(g.backward(NodeId(0)), Err(crate::Error::State(_))));
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn(&[2, 3], |i| i as f64)).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));
        // Non-scalar roots are rejected.
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn sigmoid_bce_at_zero_logit() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::scalar(0.0).reshape(&[1]).unwrap());
        let mut g = Graph::new();
        let wn = g.param(&store, w).unwrap();
        let p = g.sigmoid(wn).unwrap();
        let loss = g.pixelwise_bce(p, &Tensor::full(&[1], 1.0)).unwrap();
        g.backward(loss).unwrap().accumulate_into(&mut store);
        assert!((store.get(w).grad.data()[0] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::<f32>::new();
        let bad = Tensor::new(&[1], vec![f32::NAN]).unwrap();
        assert!(matches!(g.input(bad), Err(crate::Error::Numeric(_))));
    }
}
