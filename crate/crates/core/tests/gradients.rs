// SPDX-License-Identifier: MIT OR Apache-2.0

//! Analytic gradients against central finite differences, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steerlab::numerics::{
    cross_entropy, gelu, gelu_grad, gemm, gemm_tn_acc, rms_norm, rms_norm_backward, softmax_rows,
    Matrix,
};

mod common;

use common::{rel_err, H};

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Central difference of `f` with respect to every entry of `x`.
fn numeric_grad(x: &mut [f64], f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + H;
            let up = f(x);
            x[i] = orig - H;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn small_shape(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..6), rng.random_range(2..9))
}

#[test]
fn rms_norm_gradient() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = small_shape(&mut rng);
        let x = random(r, c, &mut rng);
        let gain: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
        let w = random(r, c, &mut rng);
        let loss = |x: &Matrix<f64>, g: &[f64]| -> f64 {
            let (y, _, _) = rms_norm(x, g);
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let (_, xhat, inv) = rms_norm(&x, &gain);
        let mut dgain = vec![0.0; c];
        let dx = rms_norm_backward(&w, &xhat, &inv, &gain, &mut dgain);
        let mut xd = x.data().to_vec();
        let nx = numeric_grad(&mut xd, &mut |v| loss(&Matrix::new(r, c, v.to_vec()).unwrap(), &gain));
        let mut gd = gain.clone();
        let ng = numeric_grad(&mut gd, &mut |g| loss(&x, g));
        assert!(rel_err(dx.data(), &nx) <= 1e-5, "seed {seed} dx");
        assert!(rel_err(&dgain, &ng) <= 1e-5, "seed {seed} dgain");
    }
}

#[test]
fn softmax_gradient() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (r, c) = small_shape(&mut rng);
        let x = random(r, c, &mut rng);
        let w = random(r, c, &mut rng);
        let scale = rng.random_range(0.2..2.0);
        let loss = |v: &[f64]| -> f64 {
            let y = softmax_rows(&Matrix::new(r, c, v.to_vec()).unwrap(), scale);
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        // dL/dx = scale * p * (w - <p, w>) row by row
        let p = softmax_rows(&x, scale);
        let mut analytic = vec![0.0; r * c];
        for i in 0..r {
            let s: f64 = p.row(i).iter().zip(w.row(i)).map(|(a, b)| a * b).sum();
            for j in 0..c {
                analytic[i * c + j] = scale * p.get(i, j) * (w.get(i, j) - s);
            }
        }
        let mut xd = x.data().to_vec();
        let num = numeric_grad(&mut xd, &mut |v| loss(v));
        assert!(rel_err(&analytic, &num) <= 1e-5, "seed {seed}");
    }
}

#[test]
fn cross_entropy_gradient() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (r, c) = small_shape(&mut rng);
        let x = random(r, c, &mut rng);
        let targets: Vec<Option<usize>> = (0..r)
            .map(|i| (i % 3 != 2).then(|| rng.random_range(0..c)))
            .collect();
        let (_, grad, n) = cross_entropy(&x, &targets).unwrap();
        let mut xd = x.data().to_vec();
        let num = numeric_grad(&mut xd, &mut |v| {
            let (l, _, n) = cross_entropy(&Matrix::new(r, c, v.to_vec()).unwrap(), &targets).unwrap();
            l * n as f64
        });
        if n > 0 {
            assert!(rel_err(grad.data(), &num) <= 1e-5, "seed {seed}");
        }
    }
}

/// Three dense layers with GELU between them; loss = <w, out>.
fn mlp3(ws: &[Matrix<f64>], x: &Matrix<f64>) -> Vec<Matrix<f64>> {
    let mut acts = vec![x.clone()];
    for (i, w) in ws.iter().enumerate() {
        let a = acts.last().unwrap();
        let mut out = Matrix::zeros(a.rows(), w.cols());
        gemm(a.data(), w.data(), out.data_mut(), a.rows(), a.cols(), w.cols());
        if i + 1 < ws.len() {
            acts.push(out.clone());
            acts.push(out.map(gelu));
        } else {
            acts.push(out);
        }
    }
    acts
}

#[test]
fn three_layer_mlp_gradient() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let b = rng.random_range(1..5);
        let dims: Vec<usize> = (0..4).map(|_| rng.random_range(2..7)).collect();
        let x = random(b, dims[0], &mut rng);
        let mut ws: Vec<Matrix<f64>> = (0..3).map(|i| random(dims[i], dims[i + 1], &mut rng)).collect();
        let probe = random(b, dims[3], &mut rng);
        let loss = |ws: &[Matrix<f64>]| -> f64 {
            let acts = mlp3(ws, &x);
            acts.last().unwrap().data().iter().zip(probe.data()).map(|(a, p)| a * p).sum()
        };
        // backward: acts = [x, pre1, act1, pre2, act2, out]
        let acts = mlp3(&ws, &x);
        let mut grads: Vec<Vec<f64>> = ws.iter().map(|w| vec![0.0; w.data().len()]).collect();
        let mut up = probe.clone();
        for layer in (0..3).rev() {
            let input = &acts[2 * layer];
            let (k, n) = ws[layer].shape();
            gemm_tn_acc(input.data(), up.data(), &mut grads[layer], b, k, n);
            if layer == 0 {
                break;
            }
            let wt = ws[layer].transpose();
            let mut down = Matrix::zeros(b, k);
            gemm(up.data(), wt.data(), down.data_mut(), b, n, k);
            let pre = &acts[2 * layer - 1];
            for (d, &p) in down.data_mut().iter_mut().zip(pre.data()) {
                *d *= gelu_grad(p);
            }
            up = down;
        }
        for layer in 0..3 {
            let mut wd = ws[layer].data().to_vec();
            let shape = ws[layer].shape();
            let num = numeric_grad(&mut wd, &mut |v| {
                let saved = std::mem::replace(&mut ws[layer], Matrix::new(shape.0, shape.1, v.to_vec()).unwrap());
                let l = loss(&ws);
                ws[layer] = saved;
                l
            });
            assert!(rel_err(&grads[layer], &num) <= 1e-5, "seed {seed} layer {layer}");
        }
    }
}

#[test]
fn gelu_layer_at_zero_passes_half_the_upstream() {
    let upstream = [0.3, -1.2, 2.0];
    for u in upstream {
        assert_eq!(gelu_grad(0.0f64) * u, 0.5 * u);
    }
}

#[test]
fn transformer_loss_gradient() {
    for seed in 0..20 {
        let err = common::transformer_grad_error(seed);
        assert!(err <= 1e-4, "seed {seed}: rel err {err:e}");
    }
}

#[test]
fn sae_loss_gradient() {
    for seed in 0..20 {
        let err = common::sae_grad_error(seed);
        assert!(err <= 1e-4, "seed {seed}: rel err {err:e}");
    }
}
