//! Reverse-mode automatic differentiation over [`Tensor`].
//!
//! A [`Graph`] records every op as it executes (define-by-run). Node indices
//! double as the topological order, so backward is a single reverse sweep.
//! Graphs are single-threaded; build one per forward pass.

pub mod gradcheck;
pub mod kernels;

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use kernels::BnStats;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Identifier tying a leaf node to a model parameter.
pub type ParamId = usize;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AutodiffError {
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward was already called on this graph")]
    RepeatedBackward,
}

enum Op<T: Scalar> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        /// True when the forward normalized by batch statistics, which makes
        /// mean and inv_std functions of x in the backward pass.
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Bilinear2x {
        x: Var,
    },
    UnpoolZero2x {
        x: Var,
    },
    L1Masked {
        pred: Var,
        /// d(loss)/d(pred), fully determined at forward time.
        grad_dir: Tensor<T>,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Sum {
        x: Var,
    },
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    param: Option<ParamId>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { op, value, param });
        Var(self.nodes.len() - 1)
    }

    /// Non-learnable input node. Gradients still flow through it so callers
    /// can differentiate w.r.t. inputs when they want to.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, None)
    }

    /// Learnable leaf; `id` keys the gradient in [`Graph::param_grads`].
    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        self.push(Op::Conv { x, w, b, stride, pad }, out, None)
    }

    /// Train-mode batch norm. Returns the output node plus the batch
    /// statistics so the caller can fold them into its running buffers; the
    /// graph itself never mutates model state.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, BnStats) {
        let (out, stats) =
            kernels::bn_forward_train(self.value(x), self.value(gamma), self.value(beta), eps);
        let v = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: stats.mean.clone(),
                inv_std: stats.inv_std.clone(),
                batch_stats: true,
            },
            out,
            None,
        );
        (v, stats)
    }

    /// Eval-mode batch norm normalizing by the supplied running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Var {
        let (out, mean, inv_std) = kernels::bn_forward_eval(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        );
        self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats: false,
            },
            out,
            None,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(Op::Relu { x }, out, None)
    }

    pub fn maxpool(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let (out, argmax) = kernels::maxpool_forward(self.value(x), k, stride, pad);
        self.push(Op::MaxPool { x, argmax }, out, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "add with mismatched shapes {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let out = Tensor::from_vec(
            ta.shape(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect(),
        );
        self.push(Op::Add { a, b }, out, None)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, ca, h, w) = ta.dims4();
        let (nb, cb, hb, wb) = tb.dims4();
        assert!(
            n == nb && h == hb && w == wb,
            "concat with mismatched shapes {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let mut out = Vec::with_capacity(ta.len() + tb.len());
        for ni in 0..n {
            out.extend_from_slice(&ta.data()[ni * ca * h * w..][..ca * h * w]);
            out.extend_from_slice(&tb.data()[ni * cb * h * w..][..cb * h * w]);
        }
        let out = Tensor::from_vec(&[n, ca + cb, h, w], out);
        self.push(Op::Concat { a, b }, out, None)
    }

    pub fn upsample_bilinear_x2(&mut self, x: Var) -> Var {
        let out = kernels::bilinear2x_forward(self.value(x));
        self.push(Op::Bilinear2x { x }, out, None)
    }

    pub fn unpool_zero_x2(&mut self, x: Var) -> Var {
        let out = kernels::unpool_zero2x_forward(self.value(x));
        self.push(Op::UnpoolZero2x { x }, out, None)
    }

    /// Mean absolute error over the pixels selected by `mask` (entries must
    /// be exactly 0 or 1, at least one of them 1). Target and mask are
    /// constants, not graph nodes.
    pub fn l1_masked(&mut self, pred: Var, target: &Tensor<T>, mask: &Tensor<T>) -> Var {
        let p = self.value(pred);
        assert_eq!(
            p.shape(),
            target.shape(),
            "l1_masked target shape {:?} does not match pred {:?}",
            target.shape(),
            p.shape()
        );
        assert_eq!(
            p.shape(),
            mask.shape(),
            "l1_masked mask shape {:?} does not match pred {:?}",
            mask.shape(),
            p.shape()
        );
        let mut mask_sum = 0.0f64;
        for &m in mask.data() {
            assert!(
                m == T::zero() || m == T::one(),
                "l1_masked mask entries must be 0 or 1, got {m}"
            );
            mask_sum += m.f64();
        }
        assert!(mask_sum > 0.0, "l1_masked mask selects no pixels");
        let inv = 1.0 / mask_sum;
        let mut loss = 0.0f64;
        let mut grad_dir = vec![T::zero(); p.len()];
        for i in 0..p.len() {
            if mask.data()[i] == T::zero() {
                continue;
            }
            let diff = target.data()[i].f64() - p.data()[i].f64();
            loss += diff.abs() * inv;
            // d|t−p|/dp = −sign(t−p), with sign(0) = 0.
            if diff > 0.0 {
                grad_dir[i] = T::of(-inv);
            } else if diff < 0.0 {
                grad_dir[i] = T::of(inv);
            }
        }
        let grad_dir = Tensor::from_vec(p.shape(), grad_dir);
        self.push(Op::L1Masked { pred, grad_dir }, Tensor::scalar(T::of(loss)), None)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * T::of(c));
        self.push(Op::Scale { x, c }, out, None)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = 0.0f64;
        for &v in self.value(x).data() {
            s += v.f64();
        }
        self.push(Op::Sum { x }, Tensor::scalar(T::of(s)), None)
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        match &mut grads[v.0] {
            Some(g) => {
                debug_assert_eq!(g.shape(), delta.shape());
                for (a, &b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    /// Reverse sweep from `root`, filling gradients for every node that
    /// influences it. Consumes the graph's single backward budget.
    pub fn backward(&mut self, root: Var) -> Result<(), AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::RepeatedBackward);
        }
        let root_shape = self.value(root).shape();
        if !root_shape.is_empty() {
            return Err(AutodiffError::NonScalarRoot {
                shape: root_shape.to_vec(),
            });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=root.0).rev() {
            // Inputs of node i were created before it, so their gradient
            // slots all live in the left half of this split.
            let (lo, hi) = grads.split_at_mut(i);
            let Some(dy) = hi[0].as_ref() else { continue };
            let grads = lo;
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv { x, w, b, stride, pad } => {
                    let dx = kernels::conv2d_backward_input(
                        dy,
                        &self.nodes[w.0].value,
                        self.nodes[x.0].value.shape(),
                        *stride,
                        *pad,
                    );
                    let dw = kernels::conv2d_backward_weight(
                        dy,
                        &self.nodes[x.0].value,
                        self.nodes[w.0].value.shape(),
                        *stride,
                        *pad,
                    );
                    Self::accumulate(grads, *x, dx);
                    Self::accumulate(grads, *w, dw);
                    if let Some(b) = b {
                        Self::accumulate(grads, *b, kernels::conv2d_backward_bias(dy));
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    batch_stats,
                } => {
                    let (dx, dgamma, dbeta) = kernels::bn_backward(
                        dy,
                        &self.nodes[x.0].value,
                        &self.nodes[gamma.0].value,
                        mean,
                        inv_std,
                        *batch_stats,
                    );
                    Self::accumulate(grads, *x, dx);
                    Self::accumulate(grads, *gamma, dgamma);
                    Self::accumulate(grads, *beta, dbeta);
                }
                Op::Relu { x } => {
                    let xv = &self.nodes[x.0].value;
                    let dx = Tensor::from_vec(
                        xv.shape(),
                        xv.data()
                            .iter()
                            .zip(dy.data())
                            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                            .collect(),
                    );
                    Self::accumulate(grads, *x, dx);
                }
                Op::MaxPool { x, argmax } => {
                    let dx =
                        kernels::maxpool_backward(dy, argmax, self.nodes[x.0].value.shape());
                    Self::accumulate(grads, *x, dx);
                }
                Op::Add { a, b } => {
                    Self::accumulate(grads, *b, dy.clone());
                    Self::accumulate(grads, *a, dy.clone());
                }
                Op::Concat { a, b } => {
                    let (n, ca, h, w) = self.nodes[a.0].value.dims4();
                    let cb = self.nodes[b.0].value.dims4().1;
                    let mut da = Vec::with_capacity(n * ca * h * w);
                    let mut db = Vec::with_capacity(n * cb * h * w);
                    for ni in 0..n {
                        let base = ni * (ca + cb) * h * w;
                        da.extend_from_slice(&dy.data()[base..][..ca * h * w]);
                        db.extend_from_slice(&dy.data()[base + ca * h * w..][..cb * h * w]);
                    }
                    Self::accumulate(grads, *a, Tensor::from_vec(&[n, ca, h, w], da));
                    Self::accumulate(grads, *b, Tensor::from_vec(&[n, cb, h, w], db));
                }
                Op::Bilinear2x { x } => {
                    let dx = kernels::bilinear2x_backward(dy, self.nodes[x.0].value.shape());
                    Self::accumulate(grads, *x, dx);
                }
                Op::UnpoolZero2x { x } => {
                    let dx =
                        kernels::unpool_zero2x_backward(dy, self.nodes[x.0].value.shape());
                    Self::accumulate(grads, *x, dx);
                }
                Op::L1Masked { pred, grad_dir } => {
                    let g = dy.item();
                    let dx = grad_dir.map(|v| v * g);
                    Self::accumulate(grads, *pred, dx);
                }
                Op::Scale { x, c } => {
                    let c = T::of(*c);
                    Self::accumulate(grads, *x, dy.map(|v| v * c));
                }
                Op::Sum { x } => {
                    let g = dy.item();
                    let dx = Tensor::full(self.nodes[x.0].value.shape(), g);
                    Self::accumulate(grads, *x, dx);
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward root w.r.t. `v`, if it received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of all parameter leaves that took part in the backward pass.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| {
            let id = n.param?;
            Some((id, self.grads.get(i)?.as_ref()?))
        })
    }
}
