//! Named parameters, leaf binding for forward passes, and the layers shared
//! by the codec and transformer models.

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Conv3dSpec, Scalar, Tensor};

/// A named parameter. Names are unique within a model and double as
/// checkpoint keys.
#[derive(Debug, Clone)]
pub struct P<E: Scalar> {
    pub name: String,
    pub value: Tensor<E>,
}

impl<E: Scalar> P<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>) -> Self {
        P {
            name: name.into(),
            value,
        }
    }
}

/// Per-forward leaf cache. Binding the same parameter twice returns the same
/// graph leaf so its gradient accumulates once. A non-trainable binder
/// produces constant leaves, which keeps inference graphs empty.
pub struct Binder<E: Scalar> {
    leaves: RefCell<BTreeMap<String, Var<E>>>,
    trainable: bool,
}

impl<E: Scalar> Binder<E> {
    pub fn trainable() -> Self {
        Binder {
            leaves: RefCell::new(BTreeMap::new()),
            trainable: true,
        }
    }

    pub fn frozen() -> Self {
        Binder {
            leaves: RefCell::new(BTreeMap::new()),
            trainable: false,
        }
    }

    pub fn bind(&self, p: &P<E>) -> Var<E> {
        if !self.trainable {
            return Var::constant(p.value.clone());
        }
        let mut leaves = self.leaves.borrow_mut();
        leaves
            .entry(p.name.clone())
            .or_insert_with(|| Var::param(p.value.clone()))
            .clone()
    }

    /// Gradients accumulated by a backward pass, keyed by parameter name,
    /// in name order.
    pub fn grads(&self) -> Vec<(String, Tensor<E>)> {
        self.leaves
            .borrow()
            .iter()
            .filter_map(|(name, var)| var.grad().map(|g| (name.clone(), g)))
            .collect()
    }
}

/// Dense layer; weight is (d_in, d_out) so activations multiply from the left.
#[derive(Debug, Clone)]
pub struct Linear<E: Scalar> {
    pub w: P<E>,
    pub b: Option<P<E>>,
}

impl<E: Scalar> Linear<E> {
    pub fn init(name: &str, d_in: usize, d_out: usize, std: f64, rng: &mut Rng) -> Self {
        Linear {
            w: P::new(format!("{name}.w"), Tensor::randn(&[d_in, d_out], std, rng)),
            b: Some(P::new(format!("{name}.b"), Tensor::zeros(&[1, d_out]))),
        }
    }

    pub fn init_zero(name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: P::new(format!("{name}.w"), Tensor::zeros(&[d_in, d_out])),
            b: Some(P::new(format!("{name}.b"), Tensor::zeros(&[1, d_out]))),
        }
    }

    pub fn forward(&self, bind: &Binder<E>, x: &Var<E>) -> Result<Var<E>> {
        let y = x.matmul(&bind.bind(&self.w))?;
        match &self.b {
            Some(b) => {
                let rows = y.shape()[0];
                y.add(&bind.bind(b).broadcast_rows(rows)?)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<&P<E>> {
        match &self.b {
            Some(b) => vec![&self.w, b],
            None => vec![&self.w],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut P<E>> {
        match &mut self.b {
            Some(b) => vec![&mut self.w, b],
            None => vec![&mut self.w],
        }
    }
}

/// Causal 3D convolution layer.
#[derive(Debug, Clone)]
pub struct Conv3d<E: Scalar> {
    pub w: P<E>,
    pub b: P<E>,
    pub spec: Conv3dSpec,
}

impl<E: Scalar> Conv3d<E> {
    pub fn init(
        name: &str,
        kernel: (usize, usize, usize),
        cin: usize,
        cout: usize,
        stride: (usize, usize, usize),
        rng: &mut Rng,
    ) -> Self {
        let (kt, kh, kw) = kernel;
        let fan_in = (kt * kh * kw * cin) as f64;
        let std = (1.0 / fan_in).sqrt();
        Conv3d {
            w: P::new(
                format!("{name}.w"),
                Tensor::randn(&[kt, kh, kw, cin, cout], std, rng),
            ),
            b: P::new(format!("{name}.b"), Tensor::zeros(&[cout])),
            spec: Conv3dSpec::new(stride, ((kh - 1) / 2, (kw - 1) / 2)),
        }
    }

    pub fn forward(&self, bind: &Binder<E>, x: &Var<E>) -> Result<Var<E>> {
        x.conv3d(&bind.bind(&self.w), Some(&bind.bind(&self.b)), self.spec)
    }

    /// Multiply-add count for one forward pass over the given input shape.
    pub fn flops(&self, input_shape: &[usize]) -> Result<u64> {
        let (ot, oh, ow) = self.spec.out_shape(input_shape, self.w.value.shape())?;
        let k: usize = self.w.value.shape()[..4].iter().product();
        let cout = self.w.value.shape()[4];
        Ok((ot * oh * ow) as u64 * k as u64 * cout as u64)
    }

    pub fn params(&self) -> Vec<&P<E>> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut P<E>> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Adam with optional global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub step: u64,
    state_m: BTreeMap<String, Vec<f64>>,
    state_v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            step: 0,
            state_m: BTreeMap::new(),
            state_v: BTreeMap::new(),
        }
    }

    /// Apply one update. `grads` is keyed by parameter name; parameters
    /// without a gradient are left untouched.
    pub fn apply<E: Scalar>(
        &mut self,
        params: Vec<&mut P<E>>,
        grads: &BTreeMap<String, Tensor<E>>,
    ) -> Result<()> {
        self.step += 1;
        let mut scale = 1.0f64;
        if let Some(max_norm) = self.clip_norm {
            let mut total = 0.0f64;
            for g in grads.values() {
                for x in g.data() {
                    let v = x.to_f64();
                    total += v * v;
                }
            }
            let norm = total.sqrt();
            if norm > max_norm {
                scale = max_norm / norm;
            }
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for p in params {
            let Some(g) = grads.get(&p.name) else {
                continue;
            };
            if g.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: p.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite("gradient"));
            }
            let n = g.numel();
            let m = self
                .state_m
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; n]);
            let v = self
                .state_v
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; n]);
            let data = p.value.data_mut();
            for i in 0..n {
                let gi = g.data()[i].to_f64() * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                let upd = self.lr * mh / (vh.sqrt() + self.eps);
                data[i] = E::from_f64(data[i].to_f64() - upd);
            }
        }
        Ok(())
    }

    /// Serialize optimizer state as (name, values) pairs for checkpointing.
    pub fn export_state(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (k, v) in &self.state_m {
            out.push((format!("opt.m.{k}"), v.clone()));
        }
        for (k, v) in &self.state_v {
            out.push((format!("opt.v.{k}"), v.clone()));
        }
        out
    }

    pub fn import_state(&mut self, entries: &[(String, Vec<f64>)], step: u64) {
        self.step = step;
        self.state_m.clear();
        self.state_v.clear();
        for (k, v) in entries {
            if let Some(name) = k.strip_prefix("opt.m.") {
                self.state_m.insert(name.to_string(), v.clone());
            } else if let Some(name) = k.strip_prefix("opt.v.") {
                self.state_v.insert(name.to_string(), v.clone());
            }
        }
    }
}

/// Sum per-worker gradient maps in a fixed order, so data-parallel training
/// is deterministic regardless of scheduling.
pub fn reduce_grads<E: Scalar>(
    per_worker: Vec<Vec<(String, Tensor<E>)>>,
) -> BTreeMap<String, Tensor<E>> {
    let mut out: BTreeMap<String, Tensor<E>> = BTreeMap::new();
    for worker in per_worker {
        for (name, g) in worker {
            match out.get_mut(&name) {
                Some(acc) => acc.add_into(&g),
                None => {
                    out.insert(name, g);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binder_reuses_leaves() {
        let p = P::new("w", Tensor::<f64>::full(&[2, 2], 1.5));
        let bind = Binder::trainable();
        let a = bind.bind(&p);
        let b = bind.bind(&p);
        let loss = a.mul(&b).unwrap().sum();
        loss.backward().unwrap();
        // d/dw sum(w*w) = 2w
        let grads = bind.grads();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].1.data(), &[3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn frozen_binder_builds_constants() {
        let p = P::new("w", Tensor::<f64>::full(&[2], 1.0));
        let bind = Binder::<f64>::frozen();
        let v = bind.bind(&p);
        assert!(!v.requires_grad());
        assert!(bind.grads().is_empty());
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut rng = Rng::seed_from(3);
        let mut p = P::new("x", Tensor::<f64>::randn(&[4], 2.0, &mut rng));
        let mut opt = Adam::new(0.1);
        for _ in 0..300 {
            let bind = Binder::trainable();
            let x = bind.bind(&p);
            let loss = x.sqr().sum();
            loss.backward().unwrap();
            let grads: BTreeMap<String, Tensor<f64>> = bind.grads().into_iter().collect();
            opt.apply(vec![&mut p], &grads).unwrap();
        }
        assert!(p.value.max_abs() < 1e-3, "{:?}", p.value);
    }
}
