//! Small dense networks with hand-written backward passes.
//!
//! Layers keep their parameters in `ndarray` matrices; gradients are stored
//! in a value of the same type, so `Params` can flatten both sides in the
//! same order for the optimiser and for checkpoints.

mod attention;
mod checkpoint;

pub use attention::{AttentionCache, AttentionLayer, LogitScale, VisibilityMask};
pub use checkpoint::{load_tensors, read_checkpoint, save_tensors, write_checkpoint, Tensor};

use ndarray::{Array1, Array2, ArrayViewMutD, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// Named parameter tensors in a fixed order.
pub trait Params {
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)>;

    fn n_params(&mut self) -> usize {
        self.tensors_mut().iter().map(|(_, t)| t.len()).sum()
    }

    fn flatten(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, t) in self.tensors_mut() {
            out.extend(t.iter());
        }
        out
    }

    fn unflatten(&mut self, flat: &[f64]) {
        let mut k = 0;
        for (_, mut t) in self.tensors_mut() {
            for x in t.iter_mut() {
                *x = flat[k];
                k += 1;
            }
        }
        assert_eq!(k, flat.len(), "flat parameter length mismatch");
    }

    fn fill(&mut self, v: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.fill(v);
        }
    }

    fn all_finite(&mut self) -> bool {
        self.tensors_mut().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    fn export(&mut self) -> Vec<Tensor> {
        self.tensors_mut()
            .into_iter()
            .map(|(name, t)| Tensor {
                name,
                shape: t.shape().to_vec(),
                data: t.iter().cloned().collect(),
            })
            .collect()
    }

    /// Copies `tensors` in by name and shape; every parameter must be present.
    fn import(&mut self, tensors: &[Tensor]) -> Result<()> {
        let mine = self.tensors_mut();
        if mine.len() != tensors.len() {
            return Err(Error::contract(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                mine.len()
            )));
        }
        for ((name, mut t), src) in mine.into_iter().zip(tensors) {
            if name != src.name || t.shape() != src.shape.as_slice() {
                return Err(Error::contract(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {name} {:?}",
                    src.name,
                    src.shape,
                    t.shape()
                )));
            }
            for (d, s) in t.iter_mut().zip(&src.data) {
                *d = *s;
            }
        }
        Ok(())
    }
}

/// Uniform `±√(6/(fan_in+fan_out))`.
pub fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-a..a))
}

/// `y = x W + b`, `W` of shape `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: xavier(rng, fan_in, fan_out),
            b: Array1::zeros(fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.fan_in() {
            return Err(Error::contract(format!(
                "linear layer expects {} inputs, got {}",
                self.fan_in(),
                x.ncols()
            )));
        }
        Ok(x.dot(&self.w) + &self.b)
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }

    pub(crate) fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![
            (format!("{prefix}.w"), self.w.view_mut().into_dyn()),
            (format!("{prefix}.b"), self.b.view_mut().into_dyn()),
        ]
    }
}

pub fn tanh(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(f64::tanh)
}

/// Backward of `y = tanh(x)` given `y`.
pub fn tanh_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    dy * &y.mapv(|v| 1.0 - v * v)
}

/// Mean squared error over every element and its gradient.
pub fn mse(pred: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if pred.shape() != target.shape() {
        return Err(Error::contract(format!(
            "mse shapes differ: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len().max(1) as f64;
    let d = pred - target;
    let loss = d.iter().map(|x| x * x).sum::<f64>() / n;
    Ok((loss, d * (2.0 / n)))
}

/// Fully connected network with tanh hidden units and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Activations of every layer, input first.
pub struct MlpCache {
    acts: Vec<Array2<f64>>,
}

impl Mlp {
    /// `sizes` lists every width, input first and output last.
    pub fn new(rng: &mut impl Rng, sizes: &[usize]) -> Self {
        Mlp {
            layers: sizes.windows(2).map(|w| Linear::new(rng, w[0], w[1])).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.fan_in(), l.fan_out()))
                .collect(),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        let mut acts = vec![x.clone()];
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let z = l.forward(acts.last().unwrap())?;
            acts.push(if i < last { tanh(&z) } else { z });
        }
        Ok((acts.last().unwrap().clone(), MlpCache { acts }))
    }

    pub fn backward(&self, cache: &MlpCache, dy: &Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut d = dy.clone();
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            if i < last {
                d = tanh_backward(&cache.acts[i + 1], &d);
            }
            d = self.layers[i].backward(&cache.acts[i], &d, &mut grad.layers[i]);
        }
        d
    }
}

impl Params for Mlp {
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.tensors_mut(&format!("mlp.{i}")))
            .collect()
    }
}

/// Adam over any parameter set, working on flattened copies.
pub struct ParamAdam {
    inner: crate::optim::Adam,
}

impl ParamAdam {
    pub fn new<P: Params>(model: &mut P, lr: f64) -> Self {
        ParamAdam {
            inner: crate::optim::Adam::new(model.n_params(), lr),
        }
    }

    pub fn step<P: Params>(&mut self, model: &mut P, grad: &mut P) {
        let mut p = model.flatten();
        let g = grad.flatten();
        self.inner.step(&mut p, &g);
        model.unflatten(&p);
    }
}
