//! Minimal dense-layer toolkit with explicit backward passes.
//!
//! Parameters live in a [`ParamStore`] as named 2-D tensors (biases are
//! 1×n). Layers hold [`ParamId`]s into the store, so optimizers, gradient
//! checks and checkpoints all walk one flat list.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.tensors.iter_mut()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            tensors: self.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
        }
    }

    /// Rounds every parameter to the nearest `f32`, the on-disk precision.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v as f32 as f64);
        }
    }

    /// Replaces all tensors with `other`'s after checking names and shapes agree.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                self.len(),
                other.len()
            )));
        }
        for (i, (name, t)) in other.iter().enumerate() {
            if name != self.names[i] || t.dim() != self.tensors[i].dim() {
                return Err(Error::shape(format!(
                    "parameter {i}: expected {} {:?}, got {name} {:?}",
                    self.names[i],
                    self.tensors[i].dim(),
                    t.dim()
                )));
            }
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    tensors: Vec<Array2<f64>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * c);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Sums per-sample gradients in order (fixed reduction order keeps parallel
/// runs bit-identical to sequential ones) and divides by the count.
pub fn mean_grads(mut parts: Vec<Grads>) -> Grads {
    let n = parts.len() as f64;
    let mut iter = parts.drain(..);
    let mut acc = iter.next().expect("at least one gradient");
    for g in iter {
        acc.add_assign(&g);
    }
    acc.scale(1.0 / n);
    acc
}

/// Affine layer `y = x W + b` over row-major batches.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform init in `±1/sqrt(in_dim)` for weights and biases.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let w = Array2::from_shape_simple_fn((in_dim, out_dim), || rng.random_range(-bound..bound));
        let b = Array2::from_shape_simple_fn((1, out_dim), || rng.random_range(-bound..bound));
        Linear {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
            in_dim,
            out_dim,
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn forward(&self, p: &ParamStore, x: ArrayView2<'_, f64>) -> Array2<f64> {
        debug_assert_eq!(x.ncols(), self.in_dim);
        let mut y = x.dot(p.get(self.weight));
        y += &p.get(self.bias).row(0);
        y
    }

    pub fn forward_row(&self, p: &ParamStore, x: ArrayView1<'_, f64>) -> Array1<f64> {
        x.dot(p.get(self.weight)) + p.get(self.bias).row(0)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&self, p: &ParamStore, x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>, g: &mut Grads) -> Array2<f64> {
        self.accumulate(x, dy, g);
        dy.dot(&p.get(self.weight).t())
    }

    /// Like [`Linear::backward`] but skips the input gradient.
    pub fn accumulate(&self, x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>, g: &mut Grads) {
        let dw = x.t().dot(&dy);
        *g.get_mut(self.weight) += &dw;
        let db = dy.sum_axis(Axis(0));
        let b = g.get_mut(self.bias);
        b.row_mut(0).zip_mut_with(&db, |a, d| *a += d);
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: ArrayView2<'_, f64>) -> Array2<f64> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_vec(x: ArrayView1<'_, f64>) -> Array1<f64> {
    x.mapv(|v| v * sigmoid(v))
}

#[inline]
fn silu_grad(v: f64) -> f64 {
    let s = sigmoid(v);
    s * (1.0 + v * (1.0 - s))
}

/// Gradient through SiLU given the pre-activation.
pub fn silu_backward(pre: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>) -> Array2<f64> {
    Zip::from(&pre).and(&dy).map_collect(|&v, &d| d * silu_grad(v))
}

pub fn silu_backward_vec(pre: ArrayView1<'_, f64>, dy: ArrayView1<'_, f64>) -> Array1<f64> {
    Zip::from(&pre).and(&dy).map_collect(|&v, &d| d * silu_grad(v))
}

/// Column-wise max over rows, with the winning row per column (lowest on ties).
pub fn column_max(x: ArrayView2<'_, f64>) -> (Array1<f64>, Vec<usize>) {
    let mut vals = Array1::from_elem(x.ncols(), f64::NEG_INFINITY);
    let mut arg = vec![0usize; x.ncols()];
    for (i, row) in x.rows().into_iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v > vals[j] {
                vals[j] = v;
                arg[j] = i;
            }
        }
    }
    (vals, arg)
}

/// Scatters a pooled gradient back onto the argmax rows.
pub fn column_max_backward(dy: ArrayView1<'_, f64>, arg: &[usize], dx: &mut Array2<f64>) {
    for (j, &i) in arg.iter().enumerate() {
        dx[[i, j]] += dy[j];
    }
}

/// Repeats a row vector `n` times.
pub fn broadcast_rows(v: ArrayView1<'_, f64>, n: usize) -> Array2<f64> {
    v.broadcast((n, v.len())).expect("broadcastable").to_owned()
}

/// Horizontal concatenation of equally tall blocks.
pub fn hcat(blocks: &[ArrayView2<'_, f64>]) -> Array2<f64> {
    ndarray::concatenate(Axis(1), blocks).expect("blocks share row count")
}

/// Adam. `step_size` may be changed between steps for scheduling.
#[derive(Clone, Debug)]
pub struct Adam {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, step_size: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Array2<f64>> = store.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect();
        Adam {
            step_size,
            beta1,
            beta2,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, eps) = (self.step_size, self.eps);
        for (((p, g), m), v) in store
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *p -= lr * update;
            });
        }
    }
}
