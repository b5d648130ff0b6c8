//! Masked multi-head self-attention.

use ndarray::{s, Array2, Array3, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::xavier;
use crate::error::{Error, Result};

/// Which width scales the attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitScale {
    /// `1/√d_in`, the layer's input width.
    #[default]
    InputWidth,
    /// `1/√d_k`.
    KeyWidth,
}

/// `allowed(i, j)`: token `i` may attend to token `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibilityMask {
    n: usize,
    allowed: Vec<bool>,
}

impl VisibilityMask {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                allowed.push(f(i, j));
            }
        }
        VisibilityMask { n, allowed }
    }

    pub fn full(n: usize) -> Self {
        Self::from_fn(n, |_, _| true)
    }

    /// Independent masks side by side; tokens of different blocks never see each other.
    pub fn block_diag(blocks: &[VisibilityMask]) -> Self {
        let n = blocks.iter().map(|b| b.n).sum();
        let mut allowed = vec![false; n * n];
        let mut o = 0;
        for b in blocks {
            for i in 0..b.n {
                for j in 0..b.n {
                    allowed[(o + i) * n + o + j] = b.allowed(i, j);
                }
            }
            o += b.n;
        }
        VisibilityMask { n, allowed }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    /// Conjugates the mask by a permutation: `new(i, j) = old(p[i], p[j])`.
    pub fn permuted(&self, p: &[usize]) -> Self {
        Self::from_fn(self.n, |i, j| self.allowed(p[i], p[j]))
    }

    pub fn check(&self) -> Result<()> {
        for i in 0..self.n {
            if !(0..self.n).any(|j| self.allowed(i, j)) {
                return Err(Error::contract(format!("attention mask row {i} hides every token")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    /// Per head, `d_in × d_k`.
    pub wq: Vec<Array2<f64>>,
    pub wk: Vec<Array2<f64>>,
    /// Per head, `d_in × d_v`.
    pub wv: Vec<Array2<f64>>,
    pub scale: LogitScale,
}

pub struct AttentionCache {
    q: Vec<Array2<f64>>,
    k: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    /// `m × N × N`.
    pub attn: Array3<f64>,
}

impl AttentionLayer {
    pub fn new(rng: &mut impl Rng, d_in: usize, heads: usize, d_k: usize, d_v: usize, scale: LogitScale) -> Self {
        let mut mk = |d| (0..heads).map(|_| xavier(rng, d_in, d)).collect::<Vec<_>>();
        let wq = mk(d_k);
        let wk = mk(d_k);
        let wv = mk(d_v);
        AttentionLayer { wq, wk, wv, scale }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |v: &Vec<Array2<f64>>| v.iter().map(|a| Array2::zeros(a.raw_dim())).collect();
        AttentionLayer {
            wq: z(&self.wq),
            wk: z(&self.wk),
            wv: z(&self.wv),
            scale: self.scale,
        }
    }

    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    pub fn d_in(&self) -> usize {
        self.wq[0].nrows()
    }

    pub fn d_v(&self) -> usize {
        self.wv[0].ncols()
    }

    pub fn out_width(&self) -> usize {
        self.heads() * self.d_v()
    }

    fn logit_scale(&self) -> f64 {
        let d = match self.scale {
            LogitScale::InputWidth => self.d_in(),
            LogitScale::KeyWidth => self.wq[0].ncols(),
        };
        1.0 / (d as f64).sqrt()
    }

    /// `Y = [softmax(c·Q_h K_hᵀ + mask) V_h]_h`, heads concatenated along columns.
    pub fn forward(&self, x: &Array2<f64>, mask: &VisibilityMask) -> Result<(Array2<f64>, AttentionCache)> {
        let n = x.nrows();
        if x.ncols() != self.d_in() {
            return Err(Error::contract(format!(
                "attention expects width {}, got {}",
                self.d_in(),
                x.ncols()
            )));
        }
        if mask.len() != n {
            return Err(Error::contract(format!(
                "mask is {}×{0}, input has {n} rows",
                mask.len()
            )));
        }
        mask.check()?;
        let c = self.logit_scale();
        let m = self.heads();
        let dv = self.d_v();
        let mut y = Array2::zeros((n, m * dv));
        let mut attn = Array3::zeros((m, n, n));
        let (mut qs, mut ks, mut vs) = (Vec::new(), Vec::new(), Vec::new());
        for h in 0..m {
            let q = x.dot(&self.wq[h]);
            let k = x.dot(&self.wk[h]);
            let v = x.dot(&self.wv[h]);
            let logits = q.dot(&k.t()) * c;
            let mut a = attn.index_axis_mut(Axis(0), h);
            for i in 0..n {
                let max = (0..n)
                    .filter(|&j| mask.allowed(i, j))
                    .map(|j| logits[[i, j]])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = if mask.allowed(i, j) {
                        (logits[[i, j]] - max).exp()
                    } else {
                        0.0
                    };
                    a[[i, j]] = e;
                    z += e;
                }
                for j in 0..n {
                    a[[i, j]] /= z;
                }
            }
            y.slice_mut(s![.., h * dv..(h + 1) * dv]).assign(&a.dot(&v));
            qs.push(q);
            ks.push(k);
            vs.push(v);
        }
        Ok((
            y,
            AttentionCache {
                q: qs,
                k: ks,
                v: vs,
                attn,
            },
        ))
    }

    /// Accumulates weight gradients into `grad`; returns `∂L/∂x`.
    pub fn backward(
        &self,
        x: &Array2<f64>,
        cache: &AttentionCache,
        dy: &Array2<f64>,
        grad: &mut AttentionLayer,
    ) -> Array2<f64> {
        let c = self.logit_scale();
        let dv = self.d_v();
        let mut dx = Array2::zeros(x.raw_dim());
        for h in 0..self.heads() {
            let a = cache.attn.index_axis(Axis(0), h);
            let dyh = dy.slice(s![.., h * dv..(h + 1) * dv]);
            let da = dyh.dot(&cache.v[h].t());
            let dvh = a.t().dot(&dyh);
            let row = (&da * &a).sum_axis(Axis(1));
            let mut ds = &a * &(&da - &row.insert_axis(Axis(1)));
            ds *= c;
            let dq = ds.dot(&cache.k[h]);
            let dk = ds.t().dot(&cache.q[h]);
            grad.wq[h] += &x.t().dot(&dq);
            grad.wk[h] += &x.t().dot(&dk);
            grad.wv[h] += &x.t().dot(&dvh);
            dx += &dq.dot(&self.wq[h].t());
            dx += &dk.dot(&self.wk[h].t());
            dx += &dvh.dot(&self.wv[h].t());
        }
        dx
    }

    pub(crate) fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        for (tag, ws) in [("wq", &mut self.wq), ("wk", &mut self.wk), ("wv", &mut self.wv)] {
            for (h, w) in ws.iter_mut().enumerate() {
                out.push((format!("{prefix}.{tag}.{h}"), w.view_mut().into_dyn()));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_token_identity_weights_return_input() {
        let i = Array2::eye(3);
        let layer = AttentionLayer {
            wq: vec![i.clone()],
            wk: vec![i.clone()],
            wv: vec![i],
            scale: LogitScale::InputWidth,
        };
        let x = ndarray::array![[0.3, -2.0, 5.0]];
        let (y, _) = layer.forward(&x, &VisibilityMask::full(1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn self_only_mask_gives_own_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = AttentionLayer::new(&mut rng, 4, 1, 3, 3, LogitScale::InputWidth);
        let x = rand_mat(&mut rng, 5, 4);
        let (y, c) = layer.forward(&x, &VisibilityMask::from_fn(5, |i, j| i == j)).unwrap();
        let want = x.dot(&layer.wv[0]);
        assert!((&y - &want).iter().all(|d| d.abs() < 1e-14));
        assert!(c.attn.iter().all(|&a| a == 0.0 || a == 1.0));
    }

    #[test]
    fn matches_dense_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = AttentionLayer::new(&mut rng, 8, 2, 4, 4, LogitScale::InputWidth);
        let x = rand_mat(&mut rng, 3, 8);
        let (y, c) = layer.forward(&x, &VisibilityMask::full(3)).unwrap();
        for h in 0..2 {
            let q = x.dot(&layer.wq[h]);
            let k = x.dot(&layer.wk[h]);
            let v = x.dot(&layer.wv[h]);
            for i in 0..3 {
                let l: Vec<f64> = (0..3).map(|j| q.row(i).dot(&k.row(j)) / 8f64.sqrt()).collect();
                let z: f64 = l.iter().map(|v| v.exp()).sum();
                let a: Vec<f64> = l.iter().map(|v| v.exp() / z).collect();
                for j in 0..3 {
                    assert!((c.attn[[h, i, j]] - a[j]).abs() < 1e-12);
                }
                for col in 0..4 {
                    let want: f64 = (0..3).map(|j| a[j] * v[[j, col]]).sum();
                    assert!((y[[i, h * 4 + col]] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn all_hidden_row_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = AttentionLayer::new(&mut rng, 2, 1, 2, 2, LogitScale::KeyWidth);
        let x = rand_mat(&mut rng, 2, 2);
        assert!(layer.forward(&x, &VisibilityMask::from_fn(2, |i, _| i == 0)).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layer = AttentionLayer::new(&mut rng, 5, 2, 3, 2, LogitScale::KeyWidth);
        let x = rand_mat(&mut rng, 4, 5);
        let mask = VisibilityMask::from_fn(4, |i, j| i == j || (i + 1) % 4 == j);
        let wsum = rand_mat(&mut rng, 4, 4);
        let loss = |l: &AttentionLayer, x: &Array2<f64>| (&l.forward(x, &mask).unwrap().0 * &wsum).sum();
        let (_, cache) = layer.forward(&x, &mask).unwrap();
        let mut g = layer.zeros_like();
        let dx = layer.backward(&x, &cache, &wsum, &mut g);
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..5 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
        for hd in 0..2 {
            for (r, c) in [(0, 0), (4, 1), (2, 2)] {
                let orig = layer.wq[hd][[r, c]];
                layer.wq[hd][[r, c]] = orig + h;
                let lp = loss(&layer, &x);
                layer.wq[hd][[r, c]] = orig - h;
                let lm = loss(&layer, &x);
                layer.wq[hd][[r, c]] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - g.wq[hd][[r, c]]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }
}
