//! Independent reference implementations shared by the oracle and
//! acceptance tests.
#![allow(dead_code)]

use cafusion::fusion::FusionParams;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn randomise(p: &mut FusionParams<f64>, rng: &mut ChaCha8Rng) {
    for v in p.ln.gamma.iter_mut().chain(p.ln.beta.iter_mut()) {
        *v = rng.random_range(-1.5..1.5);
    }
    for v in p.mlp1.b.iter_mut().chain(p.mlp2.b.iter_mut()) {
        *v = rng.random_range(-0.5..0.5);
    }
}

/// Cross-attentive fusion written as plain loops over indices.
pub fn fuse_oracle(zl: &Array3<f64>, zg: &Array3<f64>, p: &FusionParams<f64>) -> (Vec<f64>, Vec<f64>) {
    let (n_img, n, d) = zl.dim();
    let h_count = p.heads;
    let dk = d / h_count;
    let mut out = vec![0.0; n_img * n * d];
    let mut weights = vec![0.0; n_img * h_count * n];
    for i in 0..n_img {
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        for c in 0..d {
            for r in 0..d {
                k[c] += zg[[i, 0, r]] * p.w_k[[r, c]];
                v[c] += zg[[i, 0, r]] * p.w_v[[r, c]];
            }
        }
        let mut q = vec![vec![0.0; d]; n];
        for j in 0..n {
            for c in 0..d {
                for r in 0..d {
                    q[j][c] += zl[[i, j, r]] * p.w_q[[r, c]];
                }
            }
        }
        let mut heads_out = vec![vec![0.0; d]; n];
        for h in 0..h_count {
            let mut logit = vec![0.0; n];
            for j in 0..n {
                for e in 0..dk {
                    logit[j] += q[j][h * dk + e] * k[h * dk + e];
                }
                logit[j] /= (n as f64).sqrt();
            }
            let m = logit.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logit.iter().map(|l| (l - m).exp()).sum();
            for j in 0..n {
                let w = (logit[j] - m).exp() / z;
                weights[(i * h_count + h) * n + j] = w;
                for e in 0..dk {
                    heads_out[j][h * dk + e] = w * v[h * dk + e];
                }
            }
        }
        for j in 0..n {
            let mut inter = vec![0.0; d];
            for c in 0..d {
                inter[c] = zg[[i, 0, c]];
                for r in 0..d {
                    inter[c] += heads_out[j][r] * p.w_proj[[r, c]];
                }
            }
            let mean = inter.iter().sum::<f64>() / d as f64;
            let var = inter.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let normed: Vec<f64> = (0..d)
                .map(|c| (inter[c] - mean) / (var + 1e-5).sqrt() * p.ln.gamma[c] + p.ln.beta[c])
                .collect();
            let hidden_w = p.mlp1.w.ncols();
            let mut hidden = vec![0.0; hidden_w];
            for (u, hv) in hidden.iter_mut().enumerate() {
                *hv = p.mlp1.b[u];
                for c in 0..d {
                    *hv += normed[c] * p.mlp1.w[[c, u]];
                }
                *hv = gelu(*hv);
            }
            for c in 0..d {
                let mut y = p.mlp2.b[c];
                for (u, hv) in hidden.iter().enumerate() {
                    y += hv * p.mlp2.w[[u, c]];
                }
                out[(i * n + j) * d + c] = inter[c] + y;
            }
        }
    }
    (out, weights)
}

/// Sorts each class column descending (ties by index) and averages the top k.
pub fn topk_oracle(cam: &Array3<f64>, k: usize) -> Array2<f64> {
    let (n_img, n, c) = cam.dim();
    Array2::from_shape_fn((n_img, c), |(i, cls)| {
        let mut col: Vec<(f64, usize)> = (0..n).map(|j| (cam[[i, j, cls]], j)).collect();
        col.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        col[..k].iter().map(|x| x.0).sum::<f64>() / k as f64
    })
}
