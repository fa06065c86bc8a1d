//! Reverse-mode automatic differentiation.
//!
//! A `Var` wraps a value tensor plus the recording needed to backpropagate:
//! parent links and a closure mapping the upstream gradient to per-parent
//! contributions. The graph is built per forward call and consumed by one
//! `backward` call. Nodes whose inputs all have `requires_grad == false`
//! drop their parent links immediately, so no-grad evaluation costs nothing
//! beyond the forward kernels.
//!
//! Graphs are confined to the thread that built them (`Rc` inside); tensors
//! themselves move freely between workers.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{
    col2im, conv3d, im2col, upsample_linear_hw, upsample_linear_hw_back, upsample_nearest_hw,
    upsample_nearest_hw_back, upsample_time_causal, upsample_time_causal_back, Conv3dSpec, Scalar,
    Tensor,
};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type BackwardFn<E> = Box<dyn Fn(&Tensor<E>) -> Vec<Option<Tensor<E>>>>;

struct Node<E: Scalar> {
    id: u64,
    value: Tensor<E>,
    grad: RefCell<Option<Tensor<E>>>,
    requires_grad: bool,
    parents: Vec<Var<E>>,
    backward: Option<BackwardFn<E>>,
}

impl<E: Scalar> Drop for Node<E> {
    // Unlink parent chains iteratively so deep graphs cannot overflow the
    // stack during drop.
    fn drop(&mut self) {
        let mut stack: Vec<Var<E>> = std::mem::take(&mut self.parents);
        while let Some(v) = stack.pop() {
            if let Ok(mut inner) = Rc::try_unwrap(v.0) {
                stack.append(&mut inner.parents);
            }
        }
    }
}

#[derive(Clone)]
pub struct Var<E: Scalar>(Rc<Node<E>>);

impl<E: Scalar> std::fmt::Debug for Var<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({:?}, grad={})", self.0.value, self.0.requires_grad)
    }
}

impl<E: Scalar> Var<E> {
    fn new(
        value: Tensor<E>,
        parents: Vec<Var<E>>,
        backward: Option<BackwardFn<E>>,
        requires_grad: bool,
    ) -> Self {
        let (parents, backward) = if requires_grad {
            (parents, backward)
        } else {
            (Vec::new(), None)
        };
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            grad: RefCell::new(None),
            requires_grad,
            parents,
            backward,
        }))
    }

    /// Leaf that participates in gradients (a parameter).
    pub fn param(value: Tensor<E>) -> Self {
        Var::new(value, Vec::new(), None, true)
    }

    /// Leaf treated as data: no gradient is ever accumulated into it.
    pub fn constant(value: Tensor<E>) -> Self {
        Var::new(value, Vec::new(), None, false)
    }

    pub fn value(&self) -> &Tensor<E> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Gradient accumulated by the last `backward` pass, if any.
    pub fn grad(&self) -> Option<Tensor<E>> {
        self.0.grad.borrow().clone()
    }

    fn accumulate(&self, g: Tensor<E>) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.add_into(&g),
            None => *slot = Some(g),
        }
    }

    /// Backpropagate from a scalar root, filling `grad()` on every
    /// grad-requiring node of this graph.
    pub fn backward(&self) -> Result<()> {
        if self.value().numel() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.value().all_finite() {
            return Err(Error::NonFinite("backward root"));
        }
        // Iterative post-order topological sort over grad-requiring nodes.
        let mut order: Vec<Var<E>> = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Var<E>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.0.id);
        while let Some((node, child)) = stack.pop() {
            if child < node.0.parents.len() {
                let next = node.0.parents[child].clone();
                stack.push((node, child + 1));
                if next.0.requires_grad && visited.insert(next.0.id) {
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }
        // Seed and propagate in reverse topological order.
        self.accumulate(Tensor::full(self.value().shape(), E::ONE));
        for node in order.iter().rev() {
            let Some(back) = node.0.backward.as_ref() else {
                continue;
            };
            let upstream = node
                .0
                .grad
                .borrow()
                .clone()
                .unwrap_or_else(|| Tensor::zeros(node.value().shape()));
            let contribs = back(&upstream);
            debug_assert_eq!(contribs.len(), node.0.parents.len());
            for (parent, contrib) in node.0.parents.iter().zip(contribs) {
                if let (true, Some(g)) = (parent.0.requires_grad, contrib) {
                    parent.accumulate(g);
                }
            }
        }
        Ok(())
    }

    // -- elementwise ------------------------------------------------------

    pub fn add(&self, other: &Var<E>) -> Result<Var<E>> {
        let value = self.value().add(other.value())?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Var::new(
            value,
            vec![self.clone(), other.clone()],
            Some(Box::new(move |up| {
                vec![Some(up.clone()), Some(up.clone())]
            })),
            rg,
        ))
    }

    pub fn sub(&self, other: &Var<E>) -> Result<Var<E>> {
        let value = self.value().sub(other.value())?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Var::new(
            value,
            vec![self.clone(), other.clone()],
            Some(Box::new(move |up| {
                vec![Some(up.clone()), Some(up.scale(-E::ONE))]
            })),
            rg,
        ))
    }

    pub fn mul(&self, other: &Var<E>) -> Result<Var<E>> {
        let value = self.value().mul(other.value())?;
        let rg = self.requires_grad() || other.requires_grad();
        let (a, b) = (self.value().clone(), other.value().clone());
        Ok(Var::new(
            value,
            vec![self.clone(), other.clone()],
            Some(Box::new(move |up| {
                vec![
                    Some(up.mul(&b).expect("mul backward")),
                    Some(up.mul(&a).expect("mul backward")),
                ]
            })),
            rg,
        ))
    }

    pub fn scale(&self, k: E) -> Var<E> {
        let value = self.value().scale(k);
        self.unary(value, move |up, _| up.scale(k))
    }

    pub fn add_scalar(&self, k: E) -> Var<E> {
        let value = self.value().add_scalar(k);
        self.unary(value, |up, _| up.clone())
    }

    /// Multiply by a single-element Var (learned scalar).
    pub fn scale_by(&self, s: &Var<E>) -> Result<Var<E>> {
        if s.value().numel() != 1 {
            return Err(Error::invalid(format!(
                "scale_by expects a scalar, got {:?}",
                s.shape()
            )));
        }
        let sv = s.value().item();
        let value = self.value().scale(sv);
        let rg = self.requires_grad() || s.requires_grad();
        let x = self.value().clone();
        let s_shape = s.shape().to_vec();
        Ok(Var::new(
            value,
            vec![self.clone(), s.clone()],
            Some(Box::new(move |up| {
                let dx = up.scale(sv);
                let mut ds = E::ZERO;
                for (u, xi) in up.data().iter().zip(x.data()) {
                    ds += *u * *xi;
                }
                vec![
                    Some(dx),
                    Some(Tensor::from_vec(&s_shape, vec![ds]).unwrap()),
                ]
            })),
            rg,
        ))
    }

    pub fn neg(&self) -> Var<E> {
        self.scale(-E::ONE)
    }

    fn unary(
        &self,
        value: Tensor<E>,
        back: impl Fn(&Tensor<E>, &Tensor<E>) -> Tensor<E> + 'static,
    ) -> Var<E> {
        let rg = self.requires_grad();
        let x = self.value().clone();
        Var::new(
            value,
            vec![self.clone()],
            Some(Box::new(move |up| vec![Some(back(up, &x))])),
            rg,
        )
    }

    pub fn exp(&self) -> Var<E> {
        let value = self.value().map(|x| x.exp());
        let y = value.clone();
        let rg = self.requires_grad();
        Var::new(
            value,
            vec![self.clone()],
            Some(Box::new(move |up| {
                vec![Some(up.mul(&y).expect("exp backward"))]
            })),
            rg,
        )
    }

    pub fn ln(&self) -> Var<E> {
        let value = self.value().map(|x| x.ln());
        self.unary(value, |up, x| {
            up.zip(x, "ln backward", |g, xi| g / xi).unwrap()
        })
    }

    pub fn sigmoid(&self) -> Var<E> {
        let value = self.value().map(|x| E::ONE / (E::ONE + (-x).exp()));
        let y = value.clone();
        let rg = self.requires_grad();
        Var::new(
            value,
            vec![self.clone()],
            Some(Box::new(move |up| {
                vec![Some(
                    up.zip(&y, "sigmoid backward", |g, s| g * s * (E::ONE - s))
                        .unwrap(),
                )]
            })),
            rg,
        )
    }

    pub fn silu(&self) -> Var<E> {
        let value = self.value().map(|x| x / (E::ONE + (-x).exp()));
        self.unary(value, |up, x| {
            up.zip(x, "silu backward", |g, xi| {
                let s = E::ONE / (E::ONE + (-xi).exp());
                g * (s + xi * s * (E::ONE - s))
            })
            .unwrap()
        })
    }

    pub fn gelu(&self) -> Var<E> {
        // tanh approximation
        let c = E::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let a = E::from_f64(0.044715);
        let half = E::from_f64(0.5);
        let value = self.value().map(|x| {
            let inner = c * (x + a * x * x * x);
            half * x * (E::ONE + inner.tanh())
        });
        self.unary(value, move |up, x| {
            up.zip(x, "gelu backward", |g, xi| {
                let inner = c * (xi + a * xi * xi * xi);
                let t = inner.tanh();
                let sech2 = E::ONE - t * t;
                let dinner = c * (E::ONE + E::from_f64(3.0) * a * xi * xi);
                g * (half * (E::ONE + t) + half * xi * sech2 * dinner)
            })
            .unwrap()
        })
    }

    pub fn relu(&self) -> Var<E> {
        let value = self.value().map(|x| x.maxv(E::ZERO));
        self.unary(value, |up, x| {
            up.zip(x, "relu backward", |g, xi| {
                if xi > E::ZERO {
                    g
                } else {
                    E::ZERO
                }
            })
            .unwrap()
        })
    }

    pub fn abs(&self) -> Var<E> {
        let value = self.value().map(|x| x.abs());
        self.unary(value, |up, x| {
            up.zip(x, "abs backward", |g, xi| {
                if xi >= E::ZERO {
                    g
                } else {
                    -g
                }
            })
            .unwrap()
        })
    }

    pub fn sqr(&self) -> Var<E> {
        let value = self.value().map(|x| x * x);
        self.unary(value, |up, x| {
            up.zip(x, "sqr backward", |g, xi| g * (xi + xi)).unwrap()
        })
    }

    pub fn sqrt(&self) -> Var<E> {
        let value = self.value().map(|x| x.sqrt());
        let y = value.clone();
        let rg = self.requires_grad();
        Var::new(
            value,
            vec![self.clone()],
            Some(Box::new(move |up| {
                vec![Some(
                    up.zip(&y, "sqrt backward", |g, s| g / (s + s)).unwrap(),
                )]
            })),
            rg,
        )
    }

    pub fn tanh(&self) -> Var<E> {
        let value = self.value().map(|x| x.tanh());
        let y = value.clone();
        let rg = self.requires_grad();
        Var::new(
            value,
            vec![self.clone()],
            Some(Box::new(move |up| {
                vec![Some(
                    up.zip(&y, "tanh backward", |g, t| g * (E::ONE - t * t))
                        .unwrap(),
                )]
            })),
            rg,
        )
    }

    // -- reductions --------------------------------------------------------

    pub fn sum(&self) -> Var<E> {
        let value = Tensor::scalar(self.value().sum());
        let shape = self.shape().to_vec();
        self.unary(value, move |up, _| Tensor::full(&shape, up.item()))
    }

    pub fn mean(&self) -> Var<E> {
        let n = self.value().numel();
        self.sum().scale(E::from_f64(1.0 / n as f64))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var<E>> {
        let value = self.value().sum_axis(axis)?;
        let in_shape = self.shape().to_vec();
        Ok(self.unary(value, move |up, _| {
            // broadcast upstream back along the collapsed axis
            let outer: usize = in_shape[..axis].iter().product();
            let mid = in_shape[axis];
            let inner: usize = in_shape[axis + 1..].iter().product();
            let mut out = vec![E::ZERO; outer * mid * inner];
            for o in 0..outer {
                for m in 0..mid {
                    for i in 0..inner {
                        out[(o * mid + m) * inner + i] = up.data()[o * inner + i];
                    }
                }
            }
            Tensor::from_vec(&in_shape, out).unwrap()
        }))
    }

    // -- shape ops ---------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<E>> {
        let value = self.value().reshape(shape)?;
        let in_shape = self.shape().to_vec();
        Ok(self.unary(value, move |up, _| up.reshape(&in_shape).unwrap()))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<E>> {
        let value = self.value().permute(axes)?;
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.unary(value, move |up, _| up.permute(&inverse).unwrap()))
    }

    pub fn transpose2d(&self) -> Result<Var<E>> {
        self.permute(&[1, 0])
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<E>> {
        let value = self.value().slice(axis, start, len)?;
        let in_shape = self.shape().to_vec();
        Ok(self.unary(value, move |up, _| {
            let outer: usize = in_shape[..axis].iter().product();
            let mid = in_shape[axis];
            let inner: usize = in_shape[axis + 1..].iter().product();
            let mut out = vec![E::ZERO; outer * mid * inner];
            for o in 0..outer {
                let dst = (o * mid + start) * inner;
                let src = o * len * inner;
                out[dst..dst + len * inner].copy_from_slice(&up.data()[src..src + len * inner]);
            }
            Tensor::from_vec(&in_shape, out).unwrap()
        }))
    }

    pub fn concat(parts: &[Var<E>], axis: usize) -> Result<Var<E>> {
        let tensors: Vec<&Tensor<E>> = parts.iter().map(|p| p.value()).collect();
        let value = Tensor::concat(&tensors, axis)?;
        let rg = parts.iter().any(|p| p.requires_grad());
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Ok(Var::new(
            value,
            parts.to_vec(),
            Some(Box::new(move |up| {
                let mut offset = 0;
                extents
                    .iter()
                    .map(|&len| {
                        let g = up.slice(axis, offset, len).unwrap();
                        offset += len;
                        Some(g)
                    })
                    .collect()
            })),
            rg,
        ))
    }

    pub fn index_select_rows(&self, indices: &[usize]) -> Result<Var<E>> {
        let value = self.value().index_select_rows(indices)?;
        let idx = indices.to_vec();
        let in_shape = self.shape().to_vec();
        Ok(self.unary(value, move |up, _| {
            let d = in_shape[1];
            let mut out = vec![E::ZERO; in_shape[0] * d];
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..d {
                    out[i * d + j] += up.data()[r * d + j];
                }
            }
            Tensor::from_vec(&in_shape, out).unwrap()
        }))
    }

    /// Tile a (1, d) row to (n, d); gradient sums back over rows.
    pub fn broadcast_rows(&self, n: usize) -> Result<Var<E>> {
        if self.shape().len() != 2 || self.shape()[0] != 1 {
            return Err(Error::invalid(format!(
                "broadcast_rows expects (1, d), got {:?}",
                self.shape()
            )));
        }
        let d = self.shape()[1];
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(self.value().data());
        }
        let value = Tensor::from_vec(&[n, d], data)?;
        Ok(self.unary(value, move |up, _| {
            let mut out = vec![E::ZERO; d];
            for r in 0..n {
                for j in 0..d {
                    out[j] += up.data()[r * d + j];
                }
            }
            Tensor::from_vec(&[1, d], out).unwrap()
        }))
    }

    // -- linear algebra ------------------------------------------------------

    pub fn matmul(&self, other: &Var<E>) -> Result<Var<E>> {
        let value = self.value().matmul(other.value())?;
        let rg = self.requires_grad() || other.requires_grad();
        let (a, b) = (self.value().clone(), other.value().clone());
        Ok(Var::new(
            value,
            vec![self.clone(), other.clone()],
            Some(Box::new(move |up| {
                let da = up.matmul(&b.transpose2d().unwrap()).unwrap();
                let db = a.transpose2d().unwrap().matmul(up).unwrap();
                vec![Some(da), Some(db)]
            })),
            rg,
        ))
    }

    // -- normalizations ------------------------------------------------------

    pub fn softmax_last(&self) -> Var<E> {
        let value = self.value().softmax_last();
        let y = value.clone();
        let rg = self.requires_grad();
        Var::new(
            value,
            vec![self.clone()],
            Some(Box::new(move |up| {
                let cols = *y.shape().last().unwrap_or(&1);
                let rows = y.numel() / cols.max(1);
                let mut out = vec![E::ZERO; y.numel()];
                for r in 0..rows {
                    let ys = &y.data()[r * cols..(r + 1) * cols];
                    let gs = &up.data()[r * cols..(r + 1) * cols];
                    let mut dot = E::ZERO;
                    for j in 0..cols {
                        dot += ys[j] * gs[j];
                    }
                    for j in 0..cols {
                        out[r * cols + j] = ys[j] * (gs[j] - dot);
                    }
                }
                vec![Some(Tensor::from_vec(y.shape(), out).unwrap())]
            })),
            rg,
        )
    }

    pub fn layer_norm(&self, eps: f64) -> Var<E> {
        let value = self.value().layer_norm(eps);
        let y = value.clone();
        let x = self.value().clone();
        let rg = self.requires_grad();
        Var::new(
            value,
            vec![self.clone()],
            Some(Box::new(move |up| {
                let cols = *y.shape().last().unwrap_or(&1);
                let rows = y.numel() / cols.max(1);
                let nf = E::from_f64(cols as f64);
                let mut out = vec![E::ZERO; y.numel()];
                for r in 0..rows {
                    let xs = &x.data()[r * cols..(r + 1) * cols];
                    let ys = &y.data()[r * cols..(r + 1) * cols];
                    let gs = &up.data()[r * cols..(r + 1) * cols];
                    let mut mean_x = E::ZERO;
                    for &v in xs {
                        mean_x += v;
                    }
                    mean_x = mean_x / nf;
                    let mut var = E::ZERO;
                    for &v in xs {
                        let d = v - mean_x;
                        var += d * d;
                    }
                    var = var / nf;
                    let inv = E::ONE / (var + E::from_f64(eps)).sqrt();
                    let mut mean_g = E::ZERO;
                    let mut mean_gy = E::ZERO;
                    for j in 0..cols {
                        mean_g += gs[j];
                        mean_gy += gs[j] * ys[j];
                    }
                    mean_g = mean_g / nf;
                    mean_gy = mean_gy / nf;
                    for j in 0..cols {
                        out[r * cols + j] = inv * (gs[j] - mean_g - ys[j] * mean_gy);
                    }
                }
                vec![Some(Tensor::from_vec(y.shape(), out).unwrap())]
            })),
            rg,
        )
    }

    pub fn rms_norm(&self, eps: f64) -> Var<E> {
        let value = self.value().rms_norm(eps);
        let y = value.clone();
        let x = self.value().clone();
        let rg = self.requires_grad();
        Var::new(
            value,
            vec![self.clone()],
            Some(Box::new(move |up| {
                let cols = *y.shape().last().unwrap_or(&1);
                let rows = y.numel() / cols.max(1);
                let nf = E::from_f64(cols as f64);
                let mut out = vec![E::ZERO; y.numel()];
                for r in 0..rows {
                    let xs = &x.data()[r * cols..(r + 1) * cols];
                    let ys = &y.data()[r * cols..(r + 1) * cols];
                    let gs = &up.data()[r * cols..(r + 1) * cols];
                    let mut ms = E::ZERO;
                    for &v in xs {
                        ms += v * v;
                    }
                    ms = ms / nf;
                    let inv = E::ONE / (ms + E::from_f64(eps)).sqrt();
                    let mut mean_gy = E::ZERO;
                    for j in 0..cols {
                        mean_gy += gs[j] * ys[j];
                    }
                    mean_gy = mean_gy / nf;
                    for j in 0..cols {
                        out[r * cols + j] = inv * (gs[j] - ys[j] * mean_gy);
                    }
                }
                vec![Some(Tensor::from_vec(y.shape(), out).unwrap())]
            })),
            rg,
        )
    }

    // -- rotary ---------------------------------------------------------------

    /// Rotate adjacent pairs of the last axis by per-position angles given as
    /// (cos, sin) tensors of shape (rows, d/2). The map is an isometry; its
    /// gradient is the inverse rotation.
    pub fn rope_rotate(&self, cos: &Tensor<E>, sin: &Tensor<E>) -> Result<Var<E>> {
        let shape = self.shape().to_vec();
        let d = *shape.last().ok_or_else(|| Error::invalid("rope on scalar"))?;
        let rows = self.value().numel() / d;
        if d % 2 != 0 || cos.shape() != [rows, d / 2] || sin.shape() != [rows, d / 2] {
            return Err(Error::ShapeMismatch {
                op: "rope_rotate",
                lhs: shape,
                rhs: cos.shape().to_vec(),
            });
        }
        let apply = move |src: &Tensor<E>, c: &Tensor<E>, s: &Tensor<E>, conj: bool| {
            let mut out = vec![E::ZERO; src.numel()];
            for r in 0..rows {
                for i in 0..d / 2 {
                    let (cv, mut sv) = (c.data()[r * d / 2 + i], s.data()[r * d / 2 + i]);
                    if conj {
                        sv = -sv;
                    }
                    let x0 = src.data()[r * d + 2 * i];
                    let x1 = src.data()[r * d + 2 * i + 1];
                    out[r * d + 2 * i] = x0 * cv - x1 * sv;
                    out[r * d + 2 * i + 1] = x0 * sv + x1 * cv;
                }
            }
            Tensor::from_vec(src.shape(), out).unwrap()
        };
        let value = apply(self.value(), cos, sin, false);
        let (c, s) = (cos.clone(), sin.clone());
        Ok(self.unary(value, move |up, _| apply(up, &c, &s, true)))
    }

    // -- convolution / upsampling ----------------------------------------------

    pub fn conv3d(&self, weight: &Var<E>, bias: Option<&Var<E>>, spec: Conv3dSpec) -> Result<Var<E>> {
        let value = conv3d(
            self.value(),
            weight.value(),
            bias.map(|b| b.value()),
            spec,
        )?;
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let rg = parents.iter().any(|p| p.requires_grad());
        let input = self.value().clone();
        let w = weight.value().clone();
        let has_bias = bias.is_some();
        Ok(Var::new(
            value,
            parents,
            Some(Box::new(move |up| {
                let cout = *w.shape().last().unwrap();
                let k: usize = w.shape()[..4].iter().product();
                let positions = up.numel() / cout;
                let up2 = up.reshape(&[positions, cout]).unwrap();
                let w2 = w.reshape(&[k, cout]).unwrap();
                // d_input = col2im(up . W^T)
                let spec_l = spec;
                let dcol = up2.matmul(&w2.transpose2d().unwrap()).unwrap();
                let dinput = col2im(&dcol, input.shape(), w.shape(), spec_l);
                // d_weight = col^T . up
                let col = im2col(&input, w.shape(), spec_l);
                let dw = col
                    .transpose2d()
                    .unwrap()
                    .matmul(&up2)
                    .unwrap()
                    .reshape(w.shape())
                    .unwrap();
                let mut grads = vec![Some(dinput), Some(dw)];
                if has_bias {
                    grads.push(Some(up2.sum_axis(0).unwrap()));
                }
                grads
            })),
            rg,
        ))
    }

    pub fn upsample_time_causal(&self, r: usize) -> Result<Var<E>> {
        let value = upsample_time_causal(self.value(), r)?;
        let t_in = self.shape()[0];
        Ok(self.unary(value, move |up, _| upsample_time_causal_back(up, t_in, r)))
    }

    pub fn upsample_nearest_hw(&self, fh: usize, fw: usize) -> Result<Var<E>> {
        let value = upsample_nearest_hw(self.value(), fh, fw)?;
        Ok(self.unary(value, move |up, _| upsample_nearest_hw_back(up, fh, fw)))
    }

    pub fn upsample_linear_hw(&self, fh: usize, fw: usize) -> Result<Var<E>> {
        let value = upsample_linear_hw(self.value(), fh, fw)?;
        Ok(self.unary(value, move |up, _| upsample_linear_hw_back(up, fh, fw)))
    }
}

/// Mean squared error between two vars.
pub fn mse<E: Scalar>(a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
    Ok(a.sub(b)?.sqr().mean())
}

/// Mean absolute error between two vars.
pub fn l1<E: Scalar>(a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
    Ok(a.sub(b)?.abs().mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn backward_through_matmul_chain() {
        let a = Var::param(Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = Var::param(Tensor::<f64>::from_vec(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        let loss = a.matmul(&b).unwrap().sum();
        loss.backward().unwrap();
        // d/dA (sum(A.B)) = ones . B^T = rowsums of B broadcast
        let ga = a.grad().unwrap();
        assert_eq!(ga.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn concat_backward_splits_exactly() {
        let mut rng = Rng::seed_from(8);
        let a = Var::param(Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng));
        let b = Var::param(Tensor::<f64>::randn(&[2, 5], 1.0, &mut rng));
        let cat = Var::concat(&[a.clone(), b.clone()], 1).unwrap();
        let weights = Var::constant(Tensor::<f64>::rand_uniform(&[2, 8], -1.0, 1.0, &mut rng));
        let loss = cat.mul(&weights).unwrap().sum();
        loss.backward().unwrap();
        let ga = a.grad().unwrap();
        let gb = b.grad().unwrap();
        let w = weights.value();
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(ga.data()[r * 3 + c], w.data()[r * 8 + c]);
            }
            for c in 0..5 {
                assert_eq!(gb.data()[r * 5 + c], w.data()[r * 8 + 3 + c]);
            }
        }
    }

    #[test]
    fn no_grad_inputs_build_no_graph() {
        let x = Var::constant(Tensor::<f64>::full(&[4], 2.0));
        let y = x.sqr().sum();
        assert!(!y.requires_grad());
        assert_eq!(y.value().item(), 16.0);
    }

    #[test]
    fn constant_velocity_identity() {
        // x - t*v with v = eps - x0 recovers x0 from x_t exactly
        let mut rng = Rng::seed_from(9);
        let x0 = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
        let t = 0.37;
        let xt = x0.scale(1.0 - t).add(&eps.scale(t)).unwrap();
        let v = eps.sub(&x0).unwrap();
        let rec = xt.sub(&v.scale(t)).unwrap();
        for (a, b) in rec.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
