// SPDX-License-Identifier: MIT OR Apache-2.0

//! ReLU sparse autoencoder over residual-stream activations.
//!
//! ```text
//! z     = ReLU(W_enc (h - b_dec) + b_enc)
//! h_hat = W_dec z + b_dec
//! loss  = mean over batch of |h - h_hat|^2 + l1 * |z|_1
//! ```
//!
//! Decoder columns are renormalized to unit length after every step, so
//! they are the feature directions used downstream.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::rng_for;
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, gemm, AdamConfig, AdamState, Matrix, Real};

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeConfig {
    /// Feature count as a multiple of the residual width.
    pub expansion: usize,
    /// L1 coefficient, relative to the layer's activation RMS (see
    /// [`effective_l1`]).
    pub l1: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self {
            expansion: 8,
            l1: 0.3,
            epochs: 1,
            batch_size: 256,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Quality of a trained autoencoder on held-out activations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeStats {
    pub explained_variance: f64,
    pub mean_l0: f64,
    /// Features that never fire on the held-out set.
    pub dead_features: usize,
    /// Absolute L1 coefficient used in training.
    pub l1: f64,
}

/// One layer's sparse autoencoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Sae<T> {
    pub layer: usize,
    /// `m x d`.
    pub w_enc: Matrix<T>,
    /// `1 x m`.
    pub b_enc: Matrix<T>,
    /// `d x m`; column `j` is feature `j`'s direction.
    pub w_dec: Matrix<T>,
    /// `1 x d`.
    pub b_dec: Matrix<T>,
}

/// Nonnegative feature activations of one vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCode<T> {
    pub z: Vec<T>,
}

impl<T: Real> SparseCode<T> {
    /// Indices with `z_j > 0`.
    pub fn active(&self) -> Vec<usize> {
        self.z
            .iter()
            .enumerate()
            .filter_map(|(j, &v)| (v > T::zero()).then_some(j))
            .collect()
    }

    pub fn l0(&self) -> usize {
        self.z.iter().filter(|&&v| v > T::zero()).count()
    }
}

/// Absolute L1 coefficient: `relative * rms(h - mean)`, which makes the
/// optimum invariant to rescaling the activations.
pub fn effective_l1(relative: f64, data: &Matrix<f32>) -> f64 {
    let (n, d) = data.shape();
    if n == 0 {
        return relative;
    }
    let mean = column_mean(data);
    let mut ss = 0.0f64;
    for i in 0..n {
        for (x, mu) in data.row(i).iter().zip(&mean) {
            let v = f64::from(*x) - mu;
            ss += v * v;
        }
    }
    relative * (ss / (n * d) as f64).sqrt()
}

fn column_mean(data: &Matrix<f32>) -> Vec<f64> {
    let (n, d) = data.shape();
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, &x) in mean.iter_mut().zip(data.row(i)) {
            *m += f64::from(x);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    mean
}

struct BatchCache<T> {
    xt: Matrix<T>,
    z: Matrix<T>,
    err: Matrix<T>,
}

impl<T: Real> Sae<T> {
    /// Random unit decoder columns, encoder = decoder transpose, zero biases.
    pub fn init(layer: usize, d: usize, m: usize, seed: u64) -> Result<Self> {
        if d == 0 || m == 0 {
            return Err(Error::InvalidArgument("sae needs d >= 1 and m >= 1".into()));
        }
        let mut rng = rng_for(seed, &format!("sae/init/{layer}"));
        let mut w_dec = Matrix::from_fn(d, m, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            T::of(v)
        });
        normalize_columns(&mut w_dec);
        let w_enc = w_dec.transpose();
        Ok(Self {
            layer,
            w_enc,
            b_enc: Matrix::zeros(1, m),
            w_dec,
            b_dec: Matrix::zeros(1, d),
        })
    }

    pub fn d(&self) -> usize {
        self.w_dec.rows()
    }

    pub fn m(&self) -> usize {
        self.w_dec.cols()
    }

    pub fn tensor_names() -> [&'static str; 4] {
        ["w_enc", "b_enc", "w_dec", "b_dec"]
    }

    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        vec![&self.w_enc, &self.b_enc, &self.w_dec, &self.b_dec]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        vec![&mut self.w_enc, &mut self.b_enc, &mut self.w_dec, &mut self.b_dec]
    }

    /// Rebuilds an autoencoder from tensors in [`Self::tensor_names`] order.
    pub fn from_tensors(layer: usize, mut t: Vec<Matrix<T>>) -> Result<Self> {
        if t.len() != 4 {
            return Err(Error::Format(format!("sae checkpoint has {} tensors, expected 4", t.len())));
        }
        let b_dec = t.pop().unwrap();
        let w_dec = t.pop().unwrap();
        let b_enc = t.pop().unwrap();
        let w_enc = t.pop().unwrap();
        let (d, m) = w_dec.shape();
        if w_enc.shape() != (m, d) || b_enc.shape() != (1, m) || b_dec.shape() != (1, d) {
            return Err(Error::Format("inconsistent sae tensor shapes".into()));
        }
        Ok(Self {
            layer,
            w_enc,
            b_enc,
            w_dec,
            b_dec,
        })
    }

    pub fn cast<U: Real>(&self) -> Sae<U> {
        Sae {
            layer: self.layer,
            w_enc: self.w_enc.cast(),
            b_enc: self.b_enc.cast(),
            w_dec: self.w_dec.cast(),
            b_dec: self.b_dec.cast(),
        }
    }

    fn check_len(&self, what: &str, got: usize, want: usize) -> Result<()> {
        if got != want {
            return Err(Error::Dimension(format!("{what} has length {got}, expected {want}")));
        }
        Ok(())
    }

    /// `z = ReLU(W_enc (h - b_dec) + b_enc)`.
    pub fn encode(&self, h: &[T]) -> Result<SparseCode<T>> {
        self.check_len("activation", h.len(), self.d())?;
        let xt: Vec<T> = h.iter().zip(self.b_dec.data()).map(|(&x, &b)| x - b).collect();
        let z = (0..self.m())
            .map(|j| {
                let mut s = T::zero();
                for (&w, &x) in self.w_enc.row(j).iter().zip(&xt) {
                    s += x * w;
                }
                (s + self.b_enc.data()[j]).max(T::zero())
            })
            .collect();
        Ok(SparseCode { z })
    }

    /// Row-wise [`Self::encode`]; bitwise equal to encoding rows one by one.
    pub fn encode_batch(&self, h: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_len("activation row", h.cols(), self.d())?;
        Ok(self.encode_rows(h).1)
    }

    fn encode_rows(&self, h: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
        let (b, d) = h.shape();
        let m = self.m();
        let mut xt = h.clone();
        for i in 0..b {
            for (x, &c) in xt.row_mut(i).iter_mut().zip(self.b_dec.data()) {
                *x -= c;
            }
        }
        let enc_t = self.w_enc.transpose();
        let mut z = Matrix::zeros(b, m);
        gemm(xt.data(), enc_t.data(), z.data_mut(), b, d, m);
        for i in 0..b {
            for (v, &c) in z.row_mut(i).iter_mut().zip(self.b_enc.data()) {
                *v = (*v + c).max(T::zero());
            }
        }
        (xt, z)
    }

    /// `W_dec z + b_dec`.
    pub fn decode(&self, code: &SparseCode<T>) -> Result<Vec<T>> {
        self.check_len("code", code.z.len(), self.m())?;
        let mut out = self.decoder_delta(&code.z);
        for (o, &b) in out.iter_mut().zip(self.b_dec.data()) {
            *o += b;
        }
        Ok(out)
    }

    /// `W_dec v` without the bias, skipping zero entries of `v`.
    pub fn decoder_delta(&self, v: &[T]) -> Vec<T> {
        let d = self.d();
        let m = self.m();
        let mut out = vec![T::zero(); d];
        for (j, &vj) in v.iter().enumerate() {
            if vj != T::zero() {
                for (p, o) in out.iter_mut().enumerate() {
                    *o += vj * self.w_dec.data()[p * m + j];
                }
            }
        }
        out
    }

    /// Reconstructions of every row.
    pub fn reconstruct(&self, h: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        let z = self.encode_batch(h)?;
        let dec_t = self.w_dec.transpose();
        let (b, d) = h.shape();
        let mut out = Matrix::zeros(b, d);
        for i in 0..b {
            let row = out.row_mut(i);
            row.copy_from_slice(self.b_dec.data());
            for (j, &zj) in z.row(i).iter().enumerate() {
                if zj != T::zero() {
                    axpy(zj, dec_t.row(j), row);
                }
            }
        }
        Ok((out, z))
    }

    /// Unit-norm decoder column `j`.
    pub fn feature_direction(&self, j: usize) -> Result<Vec<T>> {
        if j >= self.m() {
            return Err(Error::OutOfRange {
                what: "feature",
                index: j,
                limit: self.m(),
            });
        }
        let col: Vec<T> = (0..self.d()).map(|p| self.w_dec.get(p, j)).collect();
        let n = dot(&col, &col).sqrt();
        if n == T::zero() {
            return Err(Error::Precondition(format!("decoder column {j} is zero")));
        }
        Ok(col.into_iter().map(|x| x / n).collect())
    }

    fn forward_batch(&self, x: &Matrix<T>) -> BatchCache<T> {
        let (xt, z) = self.encode_rows(x);
        let dec_t = self.w_dec.transpose();
        let mut err = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let row = err.row_mut(i);
            row.copy_from_slice(self.b_dec.data());
            for (j, &zj) in z.row(i).iter().enumerate() {
                if zj != T::zero() {
                    axpy(zj, dec_t.row(j), row);
                }
            }
            for (e, &v) in row.iter_mut().zip(x.row(i)) {
                *e -= v;
            }
        }
        BatchCache { xt, z, err }
    }

    /// Mean per-row `|h - h_hat|^2 + l1 |z|_1`.
    pub fn loss(&self, x: &Matrix<T>, l1: f64) -> Result<f64> {
        self.check_len("activation row", x.cols(), self.d())?;
        let c = self.forward_batch(x);
        Ok(batch_loss(&c, l1))
    }

    /// Loss and gradients in [`Self::tensors`] order.
    pub fn loss_and_grad(&self, x: &Matrix<T>, l1: f64) -> Result<(f64, Vec<Matrix<T>>)> {
        self.check_len("activation row", x.cols(), self.d())?;
        if x.rows() == 0 {
            return Err(Error::InvalidArgument("empty activation batch".into()));
        }
        let c = self.forward_batch(x);
        let loss = batch_loss(&c, l1);
        let (b, d) = x.shape();
        let m = self.m();
        let inv_b = T::of(1.0 / b as f64);
        let two_b = T::of(2.0 / b as f64);
        let lam = T::of(l1) * inv_b;
        let dec_t = self.w_dec.transpose();

        let mut g_enc = Matrix::zeros(m, d);
        let mut g_benc = Matrix::zeros(1, m);
        let mut g_dec_t = Matrix::<T>::zeros(m, d);
        let mut g_bdec = Matrix::zeros(1, d);
        let mut dxh = vec![T::zero(); d];
        for i in 0..b {
            for (o, &e) in dxh.iter_mut().zip(c.err.row(i)) {
                *o = two_b * e;
            }
            axpy(T::one(), &dxh, g_bdec.data_mut());
            for (j, &zj) in c.z.row(i).iter().enumerate() {
                if zj <= T::zero() {
                    continue;
                }
                axpy(zj, &dxh, g_dec_t.row_mut(j));
                let dz = dot(&dxh, dec_t.row(j)) + lam;
                g_benc.data_mut()[j] += dz;
                axpy(dz, c.xt.row(i), g_enc.row_mut(j));
                axpy(-dz, self.w_enc.row(j), g_bdec.data_mut());
            }
        }
        Ok((loss, vec![g_enc, g_benc, g_dec_t.transpose(), g_bdec]))
    }

    /// Renormalizes decoder columns to unit length.
    pub fn normalize_decoder(&mut self) {
        normalize_columns(&mut self.w_dec);
    }

    /// Explained variance, mean L0 and dead-feature count on `data`.
    pub fn evaluate(&self, data: &Matrix<f32>, l1: f64) -> Result<SaeStats> {
        let (n, d) = data.shape();
        if n == 0 {
            return Err(Error::InvalidArgument("empty evaluation set".into()));
        }
        let mean = column_mean(data);
        let mut ss_res = 0.0f64;
        let mut ss_tot = 0.0f64;
        let mut l0 = 0usize;
        let mut fired = vec![false; self.m()];
        for start in (0..n).step_by(1024) {
            let end = (start + 1024).min(n);
            let x: Matrix<T> = data.row_slice(start, end).cast();
            let (rec, z) = self.reconstruct(&x)?;
            for i in 0..x.rows() {
                for p in 0..d {
                    let v = x.get(i, p).f64();
                    ss_res += (v - rec.get(i, p).f64()).powi(2);
                    ss_tot += (v - mean[p]).powi(2);
                }
                for (j, &zj) in z.row(i).iter().enumerate() {
                    if zj > T::zero() {
                        l0 += 1;
                        fired[j] = true;
                    }
                }
            }
        }
        Ok(SaeStats {
            explained_variance: if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 },
            mean_l0: l0 as f64 / n as f64,
            dead_features: fired.iter().filter(|f| !**f).count(),
            l1,
        })
    }
}

fn batch_loss<T: Real>(c: &BatchCache<T>, l1: f64) -> f64 {
    let b = c.err.rows().max(1) as f64;
    let rec: f64 = c.err.data().iter().map(|e| e.f64() * e.f64()).sum();
    let sparse: f64 = c.z.data().iter().map(|z| z.f64()).sum();
    (rec + l1 * sparse) / b
}

fn normalize_columns<T: Real>(w: &mut Matrix<T>) {
    let (d, m) = w.shape();
    for j in 0..m {
        let mut ss = T::zero();
        for p in 0..d {
            ss += w.get(p, j) * w.get(p, j);
        }
        let n = ss.sqrt();
        if n > T::zero() {
            for p in 0..d {
                w.set(p, j, w.get(p, j) / n);
            }
        }
    }
}

/// Trains one layer's autoencoder on `data` (rows are activations).
///
/// `b_dec` starts at the data mean; the L1 coefficient is
/// [`effective_l1`]`(config.l1, data)`. Returns the model and its held-out
/// statistics.
pub fn train_sae(layer: usize, data: &Matrix<f32>, held_out: &Matrix<f32>, config: &SaeConfig) -> Result<(Sae<f32>, SaeStats)> {
    let (n, d) = data.shape();
    if n == 0 {
        return Err(Error::InvalidArgument(format!("no activations for layer {layer}")));
    }
    if config.batch_size == 0 || config.expansion == 0 {
        return Err(Error::InvalidArgument("batch_size and expansion must be positive".into()));
    }
    data.ensure_finite("activations")?;
    let m = config.expansion * d;
    let mut sae = Sae::<f32>::init(layer, d, m, config.seed)?;
    for (b, mu) in sae.b_dec.data_mut().iter_mut().zip(column_mean(data)) {
        *b = mu as f32;
    }
    let l1 = effective_l1(config.l1, data);
    let mut opt = AdamState::<f32>::new(
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
        &sae.tensors().iter().map(|t| t.data().len()).collect::<Vec<_>>(),
    );
    let mut rng = rng_for(config.seed, &format!("sae/order/{layer}"));
    let mut order: Vec<usize> = (0..n).collect();
    let total_steps = config.epochs * n.div_ceil(config.batch_size);
    let mut step = 0usize;
    let mut batch = Matrix::<f32>::zeros(config.batch_size, d);
    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() != batch.rows() {
                batch = Matrix::zeros(chunk.len(), d);
            }
            for (r, &i) in chunk.iter().enumerate() {
                batch.row_mut(r).copy_from_slice(data.row(i));
            }
            let (loss, grads) = sae.loss_and_grad(&batch, l1)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            // Linear decay over the final fifth of training.
            let frac = step as f64 / total_steps.max(1) as f64;
            let lr = if frac < 0.8 { config.lr } else { config.lr * (1.0 - frac) / 0.2 };
            let gs: Vec<&[f32]> = grads.iter().map(|g| g.data()).collect();
            let mut ps: Vec<&mut [f32]> = sae.tensors_mut().into_iter().map(|t| t.data_mut()).collect();
            opt.update(&mut ps, &gs, lr)?;
            sae.normalize_decoder();
            step += 1;
        }
    }
    let stats = sae.evaluate(held_out, l1)?;
    log::info!(
        "sae layer {layer}: ev {:.4}, l0 {:.2}, dead {}/{m}",
        stats.explained_variance,
        stats.mean_l0,
        stats.dead_features
    );
    Ok((sae, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_code_decodes_to_bias() {
        let mut sae = Sae::<f64>::init(1, 4, 8, 0).unwrap();
        sae.b_dec = Matrix::row_vector(vec![0.5, -1.0, 2.0, 0.0]);
        let z = SparseCode { z: vec![0.0; 8] };
        assert_eq!(sae.decode(&z).unwrap(), vec![0.5, -1.0, 2.0, 0.0]);
        let mut one_hot = vec![0.0; 8];
        one_hot[3] = 1.0;
        let out = sae.decode(&SparseCode { z: one_hot }).unwrap();
        for p in 0..4 {
            assert!((out[p] - sae.b_dec.data()[p] - sae.w_dec.get(p, 3)).abs() < 1e-15);
        }
    }

    #[test]
    fn bias_preimage_encodes_to_zero() {
        let mut sae = Sae::<f64>::init(1, 4, 8, 1).unwrap();
        sae.b_dec = Matrix::row_vector(vec![0.3, 0.1, -0.2, 0.9]);
        sae.b_enc = Matrix::row_vector(vec![-0.1, 0.0, -2.0, 0.0, -0.5, 0.0, 0.0, -1.0]);
        let z = sae.encode(&[0.3, 0.1, -0.2, 0.9]).unwrap();
        assert!(z.z.iter().all(|&v| v == 0.0));
        assert_eq!(z.l0(), 0);
    }

    #[test]
    fn batch_encode_is_bitwise_rowwise() {
        let mut sae = Sae::<f32>::init(2, 6, 12, 2).unwrap();
        sae.b_enc = Matrix::filled(1, 12, 0.05);
        let x = Matrix::from_fn(5, 6, |i, j| ((i * 7 + j * 3) % 11) as f32 * 0.1 - 0.5);
        let batch = sae.encode_batch(&x).unwrap();
        for i in 0..5 {
            assert_eq!(batch.row(i), sae.encode(x.row(i)).unwrap().z.as_slice());
        }
    }

    #[test]
    fn shape_and_index_errors() {
        let sae = Sae::<f32>::init(1, 4, 8, 0).unwrap();
        assert!(matches!(sae.encode(&[0.0; 3]), Err(Error::Dimension(_))));
        assert!(matches!(sae.decode(&SparseCode { z: vec![0.0; 7] }), Err(Error::Dimension(_))));
        assert!(matches!(
            sae.feature_direction(8),
            Err(Error::OutOfRange { what: "feature", index: 8, limit: 8 })
        ));
    }

    #[test]
    fn feature_direction_is_unit_and_parallel_to_decode() {
        let sae = Sae::<f64>::init(1, 5, 10, 4).unwrap();
        for j in 0..10 {
            let f = sae.feature_direction(j).unwrap();
            assert!((dot(&f, &f) - 1.0).abs() < 1e-12);
            let mut e = vec![0.0; 10];
            e[j] = 1.0;
            let delta = sae.decoder_delta(&e);
            let cos = dot(&delta, &f) / dot(&delta, &delta).sqrt();
            assert!((cos - 1.0).abs() < 1e-12);
        }
    }
}
