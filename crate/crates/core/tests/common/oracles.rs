//! Loop-based reference implementations, independent of the tape.

use calonet::encoder::{sparse_allowed, BlockParams, CbamParams, ProjParams};
use calonet::tensor::{ParamId, ParamStore};

/// Row-major matrix as nested vectors.
pub type Mat = Vec<Vec<f64>>;

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i][t] * b[t][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

pub fn to_mat(data: &[f64], rows: usize, cols: usize) -> Mat {
    (0..rows).map(|r| data[r * cols..(r + 1) * cols].to_vec()).collect()
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

fn param_mat(store: &ParamStore, id: ParamId) -> Mat {
    let t = store.value(id);
    let s = t.shape();
    to_mat(t.data(), s[0], s[1])
}

fn param_vec(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.value(id).data().to_vec()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Channel gate from the shared two-layer relu MLP on average and max
/// pooled columns.
pub fn channel_gate(e: &Mat, w0: &Mat, w1: &Mat) -> Vec<f64> {
    let (p, c) = (e.len(), e[0].len());
    let avg: Vec<f64> = (0..c).map(|j| e.iter().map(|r| r[j]).sum::<f64>() / p as f64).collect();
    let max: Vec<f64> = (0..c)
        .map(|j| e.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mlp = |v: &Vec<f64>| {
        let h: Vec<f64> = (0..w0[0].len())
            .map(|k| (0..c).map(|j| v[j] * w0[j][k]).sum::<f64>().max(0.0))
            .collect();
        (0..c)
            .map(|j| (0..h.len()).map(|k| h[k] * w1[k][j]).sum::<f64>())
            .collect::<Vec<f64>>()
    };
    let (a, m) = (mlp(&avg), mlp(&max));
    (0..c).map(|j| sigmoid(a[j] + m[j])).collect()
}

pub fn channel_attention(e: &Mat, w0: &Mat, w1: &Mat) -> Mat {
    let g = channel_gate(e, w0, w1);
    e.iter().map(|r| r.iter().zip(&g).map(|(v, g)| v * g).collect()).collect()
}

/// Position gate: zero-padded cross-correlation of the per-position
/// channel mean and max with `w[0][ch][t]`, plus bias, then sigmoid.
pub fn spatial_gate(e: &Mat, w: &[f64], k: usize, b: f64) -> Vec<f64> {
    let p = e.len();
    let avg: Vec<f64> = e.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    let max: Vec<f64> = e.iter().map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect();
    let pad = (k - 1) / 2;
    (0..p)
        .map(|pos| {
            let mut s = b;
            for (ch, series) in [&avg, &max].into_iter().enumerate() {
                for t in 0..k {
                    let src = pos as isize + t as isize - pad as isize;
                    if src >= 0 && (src as usize) < p {
                        s += w[ch * k + t] * series[src as usize];
                    }
                }
            }
            sigmoid(s)
        })
        .collect()
}

pub fn spatial_attention(e: &Mat, w: &[f64], k: usize, b: f64) -> Mat {
    let g = spatial_gate(e, w, k, b);
    e.iter().zip(&g).map(|(r, g)| r.iter().map(|v| v * g).collect()).collect()
}

pub fn cbam(store: &ParamStore, e: &Mat, p: &CbamParams) -> Mat {
    let e1 = channel_attention(e, &param_mat(store, p.mlp_w0), &param_mat(store, p.mlp_w1));
    let k = store.value(p.conv_w).shape()[2];
    spatial_attention(&e1, &param_vec(store, p.conv_w), k, store.value(p.conv_b).data()[0])
}

fn project(store: &ParamStore, e: &Mat, p: &ProjParams) -> Mat {
    let g = cbam(store, e, &p.cbam);
    let b = param_vec(store, p.b);
    matmul(&g, &param_mat(store, p.w))
        .into_iter()
        .map(|r| r.iter().zip(&b).map(|(v, b)| v + b).collect())
        .collect()
}

/// Dense attention over the whole sequence where position `i` may see
/// `j` only inside its own window of size `w` and under the log-sparse
/// rule; everything else gets weight exactly zero.
pub fn dense_windowed_attention(q: &Mat, k: &Mat, v: &Mat, w: usize, heads: usize) -> Mat {
    let (p, c) = (q.len(), q[0].len());
    let dk = c / heads;
    let mut out = vec![vec![0.0; c]; p];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        for i in 0..p {
            let allowed: Vec<usize> = (0..p)
                .filter(|&j| i / w == j / w && sparse_allowed(i % w, j % w))
                .collect();
            let scores: Vec<f64> = allowed
                .iter()
                .map(|&j| cols.clone().map(|t| q[i][t] * k[j][t]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (&j, e) in allowed.iter().zip(&exps) {
                for t in cols.clone() {
                    out[i][t] += e / z * v[j][t];
                }
            }
        }
    }
    out
}

/// Sparse self-attention of one block.
pub fn ssa(store: &ParamStore, e: &Mat, block: &BlockParams, window: usize, heads: usize) -> Mat {
    let q = project(store, e, &block.q);
    let k = project(store, e, &block.k);
    let v = project(store, e, &block.v);
    dense_windowed_attention(&q, &k, &v, window, heads)
}
