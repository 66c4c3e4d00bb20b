//! Residual-MLP noise predictor `ε(x_t, c, t)`.
//!
//! The condition enters through its own input projection, added to the
//! image and timestep projections before the first activation. A learned
//! per-timestep, per-pixel gain multiplies `x_t` and is added to the MLP
//! output; the hidden layer is narrower than the image, so the full-rank
//! noise component of `x_t` cannot pass through it. Inference
//! runs through [`Backend`] so the same code serves sampling and the
//! δ-gradient tape. Training uses the batched hand-written backward in
//! [`DenoiserModel::loss_and_grads`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::image::IMAGE_LEN;
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tensor::matrix::{gelu, gelu_grad};
use crate::tensor::{Backend, Eager, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_len: usize,
    /// Number of diffusion timesteps `T`.
    pub timesteps: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
}

impl DenoiserConfig {
    pub fn toy(cond_dim: usize) -> Self {
        Self { image_len: IMAGE_LEN, timesteps: 50, time_dim: 16, cond_dim, hidden: 128, blocks: 2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub w_a: T,
    pub b_a: T,
    pub w_b: T,
    pub b_b: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserWeights<T> {
    pub w_x: T,
    pub w_t: T,
    pub w_c: T,
    pub b_in: T,
    pub blocks: Vec<BlockWeights<T>>,
    pub w_o: T,
    pub b_o: T,
    /// `T × image_len`; row `t − 1` is the skip gain at timestep `t`.
    pub skip: T,
}

impl<T> DenoiserWeights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> DenoiserWeights<U> {
        DenoiserWeights {
            w_x: f(&self.w_x),
            w_t: f(&self.w_t),
            w_c: f(&self.w_c),
            b_in: f(&self.b_in),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights { w_a: f(&b.w_a), b_a: f(&b.b_a), w_b: f(&b.w_b), b_b: f(&b.b_b) })
                .collect(),
            w_o: f(&self.w_o),
            b_o: f(&self.b_o),
            skip: f(&self.skip),
        }
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("denoiser.w_x".to_string(), &self.w_x),
            ("denoiser.w_t".to_string(), &self.w_t),
            ("denoiser.w_c".to_string(), &self.w_c),
            ("denoiser.b_in".to_string(), &self.b_in),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("denoiser.block{i}.w_a"), &b.w_a));
            out.push((format!("denoiser.block{i}.b_a"), &b.b_a));
            out.push((format!("denoiser.block{i}.w_b"), &b.w_b));
            out.push((format!("denoiser.block{i}.b_b"), &b.b_b));
        }
        out.push(("denoiser.w_o".to_string(), &self.w_o));
        out.push(("denoiser.b_o".to_string(), &self.b_o));
        out.push(("denoiser.skip".to_string(), &self.skip));
        out
    }

    fn named_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.w_x, &mut self.w_t, &mut self.w_c, &mut self.b_in];
        for b in &mut self.blocks {
            out.push(&mut b.w_a);
            out.push(&mut b.b_a);
            out.push(&mut b.w_b);
            out.push(&mut b.b_b);
        }
        out.push(&mut self.w_o);
        out.push(&mut self.b_o);
        out.push(&mut self.skip);
        out
    }
}

/// Sinusoidal embedding of an integer timestep.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(1000.0_f64).ln() * i as f64 / half as f64).exp();
        out.push((t as f64 * freq).sin());
    }
    for i in 0..half {
        let freq = (-(1000.0_f64).ln() * i as f64 / half as f64).exp();
        out.push((t as f64 * freq).cos());
    }
    out
}

/// Stacked time embeddings for a batch of timesteps.
pub fn time_embeddings(ts: &[usize], dim: usize) -> Matrix {
    Matrix::from_rows(&ts.iter().map(|&t| time_embedding(t, dim)).collect::<Vec<_>>())
        .expect("uniform embedding width")
}

/// One-hot timestep rows, `B × T`.
pub fn timestep_selector(ts: &[usize], steps: usize) -> Matrix {
    Matrix::from_fn(ts.len(), steps, |i, j| if ts[i] == j + 1 { 1.0 } else { 0.0 })
}

/// Forward pass for a batch: `x` is `B × image_len`, `temb` is `B × time_dim`,
/// `tsel` is the `B × T` one-hot selector and `c` is `B × cond_dim`.
pub fn forward<B: Backend>(
    b: &mut B,
    w: &DenoiserWeights<B::T>,
    x: &B::T,
    temb: &B::T,
    tsel: &B::T,
    c: &B::T,
) -> B::T {
    let hx = b.matmul(x, &w.w_x);
    let ht = b.matmul(temb, &w.w_t);
    let h = b.add(&hx, &ht);
    let hc = b.matmul(c, &w.w_c);
    let h = b.add(&h, &hc);
    let h = b.add_row_broadcast(&h, &w.b_in);
    let mut h = b.gelu(&h);
    for blk in &w.blocks {
        let u = b.matmul(&h, &blk.w_a);
        let u = b.add_row_broadcast(&u, &blk.b_a);
        let u = b.gelu(&u);
        let r = b.matmul(&u, &blk.w_b);
        let r = b.add_row_broadcast(&r, &blk.b_b);
        h = b.add(&h, &r);
    }
    let o = b.matmul(&h, &w.w_o);
    let o = b.add_row_broadcast(&o, &w.b_o);
    let gain = b.matmul(tsel, &w.skip);
    let sk = b.mul(&gain, x);
    b.add(&o, &sk)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    weights: DenoiserWeights<Arc<Matrix>>,
}

/// One training batch.
#[derive(Debug, Clone)]
pub struct DenoiserBatch {
    pub x_t: Matrix,
    pub timesteps: Vec<usize>,
    pub cond: Matrix,
    pub noise: Matrix,
}

impl DenoiserModel {
    /// Random MLP weights; the skip gain starts at `√(1−ᾱ_t)`, the best
    /// linear noise predictor for unit-variance data.
    pub fn init(config: DenoiserConfig, schedule: &NoiseSchedule, rng: &mut Rng) -> Result<Self> {
        if schedule.steps() != config.timesteps {
            return Err(Error::InvalidConfig(format!(
                "denoiser expects {} timesteps, schedule has {}",
                config.timesteps,
                schedule.steps()
            )));
        }
        let h = config.hidden;
        let std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let zeros = |n| Arc::new(Matrix::zeros(1, n));
        let blocks = (0..config.blocks)
            .map(|_| BlockWeights {
                w_a: Arc::new(rng.normal_matrix(h, h, std(h))),
                b_a: zeros(h),
                w_b: Arc::new(rng.normal_matrix(h, h, 0.5 * std(h))),
                b_b: zeros(h),
            })
            .collect();
        let weights = DenoiserWeights {
            w_x: Arc::new(rng.normal_matrix(config.image_len, h, std(config.image_len))),
            w_t: Arc::new(rng.normal_matrix(config.time_dim, h, std(config.time_dim))),
            w_c: Arc::new(rng.normal_matrix(config.cond_dim, h, std(config.cond_dim))),
            b_in: zeros(h),
            blocks,
            w_o: Arc::new(rng.normal_matrix(h, config.image_len, 0.5 * std(h))),
            b_o: zeros(config.image_len),
            skip: Arc::new(Matrix::from_fn(config.timesteps, config.image_len, |t, _| {
                (1.0 - schedule.alpha_bar(t + 1)).sqrt()
            })),
        };
        Ok(Self { config, weights })
    }

    pub fn from_weights(config: DenoiserConfig, weights: DenoiserWeights<Arc<Matrix>>) -> Result<Self> {
        let h = config.hidden;
        let mut expected = vec![(config.image_len, h), (config.time_dim, h), (config.cond_dim, h), (1, h)];
        for _ in 0..config.blocks {
            expected.extend([(h, h), (1, h), (h, h), (1, h)]);
        }
        expected.extend([(h, config.image_len), (1, config.image_len), (config.timesteps, config.image_len)]);
        let named = weights.named();
        if named.len() != expected.len() {
            return Err(Error::DimensionMismatch("denoiser block count".into()));
        }
        for ((name, m), shape) in named.iter().zip(expected) {
            if m.shape() != shape {
                return Err(Error::DimensionMismatch(format!("{name}: expected {shape:?}, got {:?}", m.shape())));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite(name.clone()));
            }
        }
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn weights(&self) -> &DenoiserWeights<Arc<Matrix>> {
        &self.weights
    }

    pub fn weights_on<B: Backend>(&self, b: &mut B) -> DenoiserWeights<B::T> {
        self.weights.map(|m| b.input(m))
    }

    /// Batched eager prediction. Row `i` of the result is bit-identical to a
    /// single-row call on row `i` of the inputs.
    pub fn predict_batch(&self, x_t: &Matrix, timesteps: &[usize], cond: &Matrix) -> Result<Matrix> {
        let n = x_t.rows();
        if x_t.cols() != self.config.image_len || cond.cols() != self.config.cond_dim {
            return Err(Error::DimensionMismatch(format!(
                "denoiser inputs {:?}, {:?}",
                x_t.shape(),
                cond.shape()
            )));
        }
        if timesteps.len() != n || cond.rows() != n {
            return Err(Error::DimensionMismatch("denoiser batch sizes differ".into()));
        }
        let b = &mut Eager;
        let w = self.weights_on(b);
        let x = Arc::new(x_t.clone());
        if timesteps.iter().any(|&t| t == 0 || t > self.config.timesteps) {
            return Err(Error::TimestepOutOfRange {
                t: timesteps.iter().copied().find(|&t| t == 0 || t > self.config.timesteps).unwrap_or(0),
                max: self.config.timesteps,
            });
        }
        let t = Arc::new(time_embeddings(timesteps, self.config.time_dim));
        let sel = Arc::new(timestep_selector(timesteps, self.config.timesteps));
        let c = Arc::new(cond.clone());
        Ok((*forward(b, &w, &x, &t, &sel, &c)).clone())
    }

    /// `ε(x_t, c, t)` for a single image.
    pub fn predict_noise(&self, schedule: &NoiseSchedule, x_t: &[f64], cond: &[f64], t: usize) -> Result<Vec<f64>> {
        schedule.check_t(t)?;
        if cond.len() != self.config.cond_dim {
            return Err(Error::DimensionMismatch(format!(
                "condition has dimension {}, expected {}",
                cond.len(),
                self.config.cond_dim
            )));
        }
        if x_t.len() != self.config.image_len {
            return Err(Error::DimensionMismatch(format!("image has {} values", x_t.len())));
        }
        let out = self.predict_batch(&Matrix::row_vector(x_t), &[t], &Matrix::row_vector(cond))?;
        Ok(out.into_data())
    }

    /// Mean squared error per element and its gradient for every weight, in
    /// [`DenoiserWeights::named`] order.
    pub fn loss_and_grads(&self, batch: &DenoiserBatch) -> (f64, Vec<Matrix>) {
        let w = &self.weights;
        let temb = time_embeddings(&batch.timesteps, self.config.time_dim);
        let pre0 = batch
            .x_t
            .matmul_unchecked(&w.w_x)
            .zip_map(&temb.matmul_unchecked(&w.w_t), |a, b| a + b)
            .zip_map(&batch.cond.matmul_unchecked(&w.w_c), |a, b| a + b)
            .add_row_broadcast(w.b_in.data());
        let h0 = pre0.map(gelu);
        let mut hs = vec![h0];
        let mut pre_us = Vec::new();
        let mut us = Vec::new();
        for blk in &w.blocks {
            let h = hs.last().unwrap();
            let pre_u = h.matmul_unchecked(&blk.w_a).add_row_broadcast(blk.b_a.data());
            let u = pre_u.map(gelu);
            let r = u.matmul_unchecked(&blk.w_b).add_row_broadcast(blk.b_b.data());
            hs.push(h.zip_map(&r, |a, b| a + b));
            pre_us.push(pre_u);
            us.push(u);
        }
        let h_last = hs.last().unwrap();
        let sel = timestep_selector(&batch.timesteps, self.config.timesteps);
        let gain = sel.matmul_unchecked(&w.skip);
        let out = h_last
            .matmul_unchecked(&w.w_o)
            .add_row_broadcast(w.b_o.data())
            .zip_map(&gain.zip_map(&batch.x_t, |g, x| g * x), |a, b| a + b);
        let n = (out.rows() * out.cols()) as f64;
        let diff = out.zip_map(&batch.noise, |a, b| a - b);
        let loss = diff.squared_norm() / n;

        let col_sum = |m: &Matrix| {
            let mut s = vec![0.0; m.cols()];
            for i in 0..m.rows() {
                for (a, v) in s.iter_mut().zip(m.row(i)) {
                    *a += v;
                }
            }
            Matrix::from_vec(1, s.len(), s)
        };
        let d_out = diff.scale(2.0 / n);
        let g_wo = h_last.t_matmul_unchecked(&d_out);
        let g_bo = col_sum(&d_out);
        let g_skip = sel.t_matmul_unchecked(&d_out.zip_map(&batch.x_t, |g, x| g * x));
        let mut d_h = d_out.matmul_t_unchecked(&w.w_o);
        let mut block_grads = Vec::with_capacity(w.blocks.len());
        for (k, blk) in w.blocks.iter().enumerate().rev() {
            let g_wb = us[k].t_matmul_unchecked(&d_h);
            let g_bb = col_sum(&d_h);
            let d_u = d_h.matmul_t_unchecked(&blk.w_b);
            let d_pre_u = d_u.zip_map(&pre_us[k], |g, x| g * gelu_grad(x));
            let g_wa = hs[k].t_matmul_unchecked(&d_pre_u);
            let g_ba = col_sum(&d_pre_u);
            let d_h_prev = d_h.zip_map(&d_pre_u.matmul_t_unchecked(&blk.w_a), |a, b| a + b);
            block_grads.push([g_wa, g_ba, g_wb, g_bb]);
            d_h = d_h_prev;
        }
        block_grads.reverse();
        let d_pre0 = d_h.zip_map(&pre0, |g, x| g * gelu_grad(x));
        let g_wx = batch.x_t.t_matmul_unchecked(&d_pre0);
        let g_wt = temb.t_matmul_unchecked(&d_pre0);
        let g_wc = batch.cond.t_matmul_unchecked(&d_pre0);
        let g_bin = col_sum(&d_pre0);
        let mut grads = vec![g_wx, g_wt, g_wc, g_bin];
        for bg in block_grads {
            grads.extend(bg);
        }
        grads.push(g_wo);
        grads.push(g_bo);
        grads.push(g_skip);
        (loss, grads)
    }

    /// Copies the weights out as owned matrices in named order.
    pub(crate) fn params(&self) -> Vec<Matrix> {
        self.weights.named().into_iter().map(|(_, m)| (**m).clone()).collect()
    }

    pub(crate) fn with_params(&self, params: &[Matrix]) -> Self {
        let mut out = self.clone();
        for (slot, p) in out.weights.named_mut().into_iter().zip(params) {
            *slot = Arc::new(p.clone());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, relative_error, GradTape};

    fn small() -> (DenoiserModel, NoiseSchedule) {
        let cfg = DenoiserConfig { image_len: 12, timesteps: 50, time_dim: 4, cond_dim: 5, hidden: 8, blocks: 2 };
        let s = NoiseSchedule::toy();
        (DenoiserModel::init(cfg, &s, &mut Rng::new(2)).unwrap(), s)
    }

    #[test]
    fn deterministic_and_shape_preserving() {
        let (m, s) = small();
        let mut rng = Rng::new(4);
        let x = rng.normal_vec(12);
        let c = rng.normal_vec(5);
        let a = m.predict_noise(&s, &x, &c, 7).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a, m.predict_noise(&s, &x, &c, 7).unwrap());
        assert!(matches!(m.predict_noise(&s, &x, &c[..3], 7), Err(Error::DimensionMismatch(_))));
        assert!(matches!(m.predict_noise(&s, &x, &c, 0), Err(Error::TimestepOutOfRange { .. })));
    }

    #[test]
    fn batch_rows_match_single_calls() {
        let (m, s) = small();
        let mut rng = Rng::new(5);
        let xs = rng.normal_matrix(3, 12, 1.0);
        let cs = rng.normal_matrix(3, 5, 1.0);
        let ts = [1, 20, 50];
        let batch = m.predict_batch(&xs, &ts, &cs).unwrap();
        for i in 0..3 {
            let single = m.predict_noise(&s, xs.row(i), cs.row(i), ts[i]).unwrap();
            assert_eq!(batch.row(i), &single[..]);
        }
    }

    #[test]
    fn condition_gradient_matches_finite_differences() {
        let (m, _) = small();
        let mut rng = Rng::new(6);
        let x = Arc::new(rng.normal_matrix(1, 12, 1.0));
        let target = rng.normal_vec(12);
        let c0 = rng.normal_vec(5);
        let temb = Arc::new(time_embeddings(&[13], 4));
        let sel = Arc::new(timestep_selector(&[13], 50));
        let loss_at = |c: &[f64]| {
            let out = m.predict_batch(&x, &[13], &Matrix::row_vector(c)).unwrap();
            out.data().iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        let mut tape = GradTape::new();
        let w = m.weights_on(&mut tape);
        let cn = tape.leaf(Matrix::row_vector(&c0));
        let xn = tape.constant_shared(Arc::clone(&x));
        let tn = tape.constant_shared(Arc::clone(&temb));
        let sn = tape.constant_shared(Arc::clone(&sel));
        let out = forward(&mut tape, &w, &xn, &tn, &sn, &cn);
        let tgt = tape.constant(Matrix::row_vector(&target));
        let d = tape.sub(out, tgt);
        let l = tape.squared_norm(d);
        assert_eq!(tape.scalar(l), loss_at(&c0));
        let g = tape.backward(l).get(cn);
        let fd = finite_diff_grad(loss_at, &c0, 1e-5).unwrap();
        assert!(relative_error(g.data(), &fd, 1e-8) <= 1e-4);
    }

    #[test]
    fn training_gradients_match_finite_differences() {
        let (m, _) = small();
        let mut rng = Rng::new(8);
        let batch = DenoiserBatch {
            x_t: rng.normal_matrix(3, 12, 1.0),
            timesteps: vec![3, 17, 40],
            cond: rng.normal_matrix(3, 5, 1.0),
            noise: rng.normal_matrix(3, 12, 1.0),
        };
        let (_, grads) = m.loss_and_grads(&batch);
        let params = m.params();
        for (k, p) in params.iter().enumerate() {
            let f = |v: &[f64]| {
                let mut ps = params.clone();
                ps[k] = Matrix::from_vec(p.rows(), p.cols(), v.to_vec());
                m.with_params(&ps).loss_and_grads(&batch).0
            };
            let fd = finite_diff_grad(f, p.data(), 1e-5).unwrap();
            let err = relative_error(grads[k].data(), &fd, 1e-8);
            assert!(err <= 1e-4, "param {k}: relative error {err}");
        }
    }
}
