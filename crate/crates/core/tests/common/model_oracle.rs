//! Loop-based forward pass of the whole classifier in double-double
//! arithmetic. Central differences of this loss carry roundoff near
//! 1e-27, so they resolve gradients far below what an f64 forward allows.

use calonet::causal::CausalMatrix;
use calonet::encoder::{BlockParams, CbamParams, ProjParams};
use calonet::model::CaLoNetModel;
use calonet::tensor::{ParamId, ParamStore, Tensor};
use qd::Quad as T;

type Mat = Vec<Vec<T>>;

fn t(v: f64) -> T {
    T::from_f64(v)
}

/// Parameter values in double-double, with one entry optionally shifted.
struct Values<'a> {
    store: &'a ParamStore,
    shift: Option<(ParamId, usize, f64)>,
}

impl Values<'_> {
    fn vec(&self, id: ParamId) -> Vec<T> {
        let mut out: Vec<T> = self.store.value(id).data().iter().map(|&v| t(v)).collect();
        if let Some((sid, k, h)) = self.shift {
            if sid == id {
                out[k] += t(h);
            }
        }
        out
    }

    fn mat(&self, id: ParamId) -> Mat {
        let cols = *self.store.value(id).shape().last().unwrap();
        self.vec(id).chunks(cols).map(<[T]>::to_vec).collect()
    }
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).fold(t(0.0), |acc, (x, br)| acc + *x * br[j]))
                .collect()
        })
        .collect()
}

fn linear(x: &Mat, w: &Mat, b: &[T]) -> Mat {
    matmul(x, w)
        .into_iter()
        .map(|r| r.into_iter().zip(b).map(|(v, b)| v + *b).collect())
        .collect()
}

fn relu(v: T) -> T {
    if v > t(0.0) {
        v
    } else {
        t(0.0)
    }
}

fn sigmoid(v: T) -> T {
    t(1.0) / (t(1.0) + (-v).exp())
}

fn max_of(mut it: impl Iterator<Item = T>) -> T {
    let first = it.next().expect("non-empty");
    it.fold(first, |a, b| if b > a { b } else { a })
}

fn mean_of(v: &[T]) -> T {
    v.iter().fold(t(0.0), |a, b| a + *b) / t(v.len() as f64)
}

fn layer_norm(x: &Mat, g: &[T], b: &[T]) -> Mat {
    x.iter()
        .map(|row| {
            let mean = mean_of(row);
            let var = row.iter().fold(t(0.0), |a, v| a + (*v - mean) * (*v - mean)) / t(row.len() as f64);
            let inv = t(1.0) / (var + t(1e-5)).sqrt();
            row.iter().enumerate().map(|(j, v)| (*v - mean) * inv * g[j] + b[j]).collect()
        })
        .collect()
}

fn cbam(vals: &Values, e: &Mat, p: &CbamParams) -> Mat {
    let (rows, cols) = (e.len(), e[0].len());
    let (w0, w1) = (vals.mat(p.mlp_w0), vals.mat(p.mlp_w1));
    let mlp = |v: Vec<T>| {
        let h: Vec<T> = matmul(&vec![v], &w0)[0].iter().map(|&x| relu(x)).collect();
        matmul(&vec![h], &w1).remove(0)
    };
    let avg: Vec<T> = (0..cols).map(|j| mean_of(&e.iter().map(|r| r[j]).collect::<Vec<_>>())).collect();
    let max: Vec<T> = (0..cols).map(|j| max_of(e.iter().map(|r| r[j]))).collect();
    let gate: Vec<T> = mlp(avg).into_iter().zip(mlp(max)).map(|(a, m)| sigmoid(a + m)).collect();
    let e1: Mat = e.iter().map(|r| r.iter().zip(&gate).map(|(v, g)| *v * *g).collect()).collect();

    let w = vals.vec(p.conv_w);
    let b = vals.vec(p.conv_b)[0];
    let k = w.len() / 2;
    let pad = (k - 1) / 2;
    let avg: Vec<T> = e1.iter().map(|r| mean_of(r)).collect();
    let max: Vec<T> = e1.iter().map(|r| max_of(r.iter().copied())).collect();
    (0..rows)
        .map(|pos| {
            let mut s = b;
            for (ch, series) in [&avg, &max].into_iter().enumerate() {
                for tap in 0..k {
                    let src = pos as isize + tap as isize - pad as isize;
                    if (0..rows as isize).contains(&src) {
                        s += w[ch * k + tap] * series[src as usize];
                    }
                }
            }
            let g = sigmoid(s);
            e1[pos].iter().map(|v| *v * g).collect()
        })
        .collect()
}

fn project(vals: &Values, e: &Mat, p: &ProjParams) -> Mat {
    linear(&cbam(vals, e, &p.cbam), &vals.mat(p.w), &vals.vec(p.b))
}

fn visible(i: usize, j: usize) -> bool {
    j <= i && (i == j || (i - j).is_power_of_two())
}

fn attention(q: &Mat, k: &Mat, v: &Mat, window: usize, heads: usize) -> Mat {
    let (p, c) = (q.len(), q[0].len());
    let dk = c / heads;
    let scale = t(1.0) / t(dk as f64).sqrt();
    let mut out = vec![vec![t(0.0); c]; p];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        for i in 0..p {
            let keys: Vec<usize> = (0..p).filter(|&j| i / window == j / window && visible(i % window, j % window)).collect();
            let scores: Vec<T> = keys
                .iter()
                .map(|&j| cols.clone().fold(t(0.0), |a, x| a + q[i][x] * k[j][x]) * scale)
                .collect();
            let top = max_of(scores.iter().copied());
            let exps: Vec<T> = scores.iter().map(|s| (*s - top).exp()).collect();
            let z = exps.iter().fold(t(0.0), |a, b| a + *b);
            for (&j, e) in keys.iter().zip(&exps) {
                for x in cols.clone() {
                    out[i][x] += *e / z * v[j][x];
                }
            }
        }
    }
    out
}

fn block(vals: &Values, e: &Mat, bp: &BlockParams, window: usize, heads: usize, shifted: bool) -> Mat {
    let p = e.len();
    let shift = if shifted { (window / 2) % p } else { 0 };
    let x: Mat = (0..p).map(|i| e[(i + shift) % p].clone()).collect();
    let n1 = layer_norm(&x, &vals.vec(bp.ln1_g), &vals.vec(bp.ln1_b));
    let gated = cbam(vals, &n1, &bp.cbam);
    let a = attention(
        &project(vals, &gated, &bp.q),
        &project(vals, &gated, &bp.k),
        &project(vals, &gated, &bp.v),
        window,
        heads,
    );
    let x1: Mat = x.iter().zip(&a).map(|(r, s)| r.iter().zip(s).map(|(u, v)| *u + *v).collect()).collect();
    let n2 = layer_norm(&x1, &vals.vec(bp.ln2_g), &vals.vec(bp.ln2_b));
    let h: Mat = linear(&n2, &vals.mat(bp.mlp_w0), &vals.vec(bp.mlp_b0))
        .into_iter()
        .map(|r| r.into_iter().map(relu).collect())
        .collect();
    let h = linear(&h, &vals.mat(bp.mlp_w1), &vals.vec(bp.mlp_b1));
    let out: Mat = x1.iter().zip(&h).map(|(r, s)| r.iter().zip(s).map(|(u, v)| *u + *v).collect()).collect();
    let mut back = vec![Vec::new(); p];
    for (i, row) in out.into_iter().enumerate() {
        back[(i + shift) % p] = row;
    }
    back
}

fn logits_dd(model: &CaLoNetModel, vals: &Values, x: &Tensor, matrix: &CausalMatrix) -> Vec<T> {
    let enc = model.encoder();
    let cfg = &enc.cfg;
    let (d, l) = (x.shape()[0], x.shape()[1]);
    let ps = cfg.patch_size;
    let patches: Mat = (0..l.div_ceil(ps))
        .map(|p| {
            (0..ps)
                .flat_map(|s| {
                    let time = (p * ps + s).min(l - 1);
                    (0..d).map(move |dim| t(x.at(dim, time)))
                })
                .collect()
        })
        .collect();
    let mut e = linear(&patches, &vals.mat(enc.embed_w), &vals.vec(enc.embed_b));
    for (b, bp) in enc.blocks.iter().enumerate() {
        e = block(vals, &e, bp, cfg.window, cfg.heads, b % 2 == 1);
    }
    let c = e[0].len();
    let pooled: Vec<T> = (0..c).map(|j| mean_of(&e.iter().map(|r| r[j]).collect::<Vec<_>>())).collect();
    let flat = linear(&vec![pooled], &vals.mat(enc.node_w), &vals.vec(enc.node_b)).remove(0);
    let mut h: Mat = flat.chunks(cfg.node_dim).map(<[T]>::to_vec).collect();

    let n = h.len();
    // Incoming, unweighted edges: node v sums every u with u -> v.
    let agg: Mat = (0..n)
        .map(|v| (0..n).map(|u| t(if matrix.get(u, v) > 0.0 { 1.0 } else { 0.0 })).collect())
        .collect();
    for layer in model.gin_layers() {
        let eps = layer.eps.map_or(t(0.0), |id| vals.vec(id)[0]);
        let nb = matmul(&agg, &h);
        let z: Mat = h
            .iter()
            .zip(&nb)
            .map(|(r, s)| r.iter().zip(s).map(|(a, b)| (t(1.0) + eps) * *a + *b).collect())
            .collect();
        let z: Mat = linear(&z, &vals.mat(layer.w0), &vals.vec(layer.b0))
            .into_iter()
            .map(|r| r.into_iter().map(relu).collect())
            .collect();
        h = linear(&z, &vals.mat(layer.w1), &vals.vec(layer.b1));
    }
    let g: Vec<T> = (0..h[0].len()).map(|j| mean_of(&h.iter().map(|r| r[j]).collect::<Vec<_>>())).collect();
    let [w0, b0, w1, b1] = model.head_params();
    let z: Vec<T> = linear(&vec![g], &vals.mat(w0), &vals.vec(b0)).remove(0).into_iter().map(relu).collect();
    linear(&vec![z], &vals.mat(w1), &vals.vec(b1)).remove(0)
}

fn loss_dd(model: &CaLoNetModel, vals: &Values, x: &Tensor, matrix: &CausalMatrix, label: usize) -> T {
    let z = logits_dd(model, vals, x, matrix);
    let top = max_of(z.iter().copied());
    let sum = z.iter().fold(t(0.0), |a, v| a + (*v - top).exp());
    top + sum.ln() - z[label]
}

/// Logits from the double-double forward, rounded to f64.
pub fn logits(model: &CaLoNetModel, x: &Tensor, matrix: &CausalMatrix) -> Vec<f64> {
    let vals = Values {
        store: model.params(),
        shift: None,
    };
    logits_dd(model, &vals, x, matrix).into_iter().map(|v| v.0 + v.1).collect()
}

/// Derivative of the cross-entropy loss with respect to entry `k` of
/// parameter `id`: central differences at `h` and `h / 2` combined by one
/// Richardson step, so truncation is O(h^4).
pub fn loss_derivative(
    model: &CaLoNetModel,
    x: &Tensor,
    matrix: &CausalMatrix,
    label: usize,
    id: ParamId,
    k: usize,
    h: f64,
) -> f64 {
    richardson(h, |s| {
        let vals = Values {
            store: model.params(),
            shift: Some((id, k, s)),
        };
        loss_dd(model, &vals, x, matrix, label)
    })
}

/// One Richardson step over central differences of `f` at `h` and `h / 2`.
fn richardson(h: f64, f: impl Fn(f64) -> T) -> f64 {
    let central = |s: f64| (f(s) - f(-s)) / t(2.0 * s);
    let (wide, narrow) = (central(h), central(h / 2.0));
    let d = (t(4.0) * narrow - wide) / t(3.0);
    d.0 + d.1
}

/// Derivative of `sum(blocks(e) * probe)` through every encoder block of
/// `enc`, with respect to entry `k` of parameter `id`.
pub fn blocks_derivative(
    store: &ParamStore,
    enc: &calonet::encoder::Encoder,
    e: &Tensor,
    probe: &Tensor,
    id: ParamId,
    k: usize,
    h: f64,
) -> f64 {
    let cols = e.shape()[1];
    richardson(h, |s| {
        let vals = Values {
            store,
            shift: Some((id, k, s)),
        };
        let mut x: Mat = e.data().chunks(cols).map(|r| r.iter().map(|&v| t(v)).collect()).collect();
        for (b, bp) in enc.blocks.iter().enumerate() {
            x = block(&vals, &x, bp, enc.cfg.window, enc.cfg.heads, b % 2 == 1);
        }
        x.iter().flatten().zip(probe.data()).fold(t(0.0), |a, (v, p)| a + *v * t(*p))
    })
}

/// Seeded tiny classifier (D=2, L=8, M=2) with the edge 0 -> 1, its input
/// and a label.
pub struct TinyCase {
    pub model: CaLoNetModel,
    pub x: Tensor,
    pub matrix: CausalMatrix,
    pub label: usize,
}

pub fn tiny_case(seed: u64) -> TinyCase {
    use calonet::causal::CausalConfig;
    use calonet::encoder::EncoderConfig;
    use calonet::gnn::GinConfig;
    use calonet::model::ModelConfig;
    use rand::Rng;

    let mut r = super::rng(3000 + seed);
    let config = ModelConfig {
        n_dims: 2,
        length: 8,
        n_classes: 2,
        class_names: Vec::new(),
        // One timestamp per patch so the window holds all eight patches.
        encoder: EncoderConfig {
            patch_size: 1,
            node_dim: 4,
            ..EncoderConfig::default()
        },
        gin: GinConfig::default(),
        causal: CausalConfig::default(),
        normalization: None,
    };
    TinyCase {
        model: CaLoNetModel::new(config, seed).unwrap(),
        x: super::normal(&mut r, &[2, 8]),
        matrix: CausalMatrix::from_scores(2, &[0.0, 0.4, -0.4, 0.0], 0.0).unwrap(),
        label: r.random_range(0..2),
    }
}

/// Tape gradient of the tiny case's loss against double-double central
/// differences, every parameter entry. Also returns the largest gap
/// between the tape logits and the oracle logits.
pub fn check_tiny(case: &TinyCase) -> (super::GradReport, f64) {
    use calonet::tensor::Tape;

    let mut store = case.model.params().clone();
    store.zero_grad();
    let mut tape = Tape::new();
    let xv = tape.constant(case.x.clone());
    let z = case.model.forward_with(&mut tape, &store, xv, &case.matrix).unwrap();
    let forward_gap = super::max_abs_diff(tape.value(z).data(), &logits(&case.model, &case.x, &case.matrix));
    let z = tape.reshape(z, &[1, 2]).unwrap();
    let loss = tape.cross_entropy(z, &[case.label]).unwrap();
    tape.backward(loss, &mut store).unwrap();

    let mut report = super::GradReport {
        worst: 0.0,
        at: String::new(),
        checked: 0,
    };
    for id in store.ids() {
        let grad = store.grad(id).map(<[f64]>::to_vec).unwrap_or_default();
        for k in 0..store.value(id).numel() {
            let a = grad.get(k).copied().unwrap_or(0.0);
            let numeric = loss_derivative(&case.model, &case.x, &case.matrix, case.label, id, k, super::FD_STEP);
            let e = super::rel_err(a, numeric);
            report.checked += 1;
            if e > report.worst {
                report.worst = e;
                report.at = format!("{}[{k}]: tape {a:e} vs fd {numeric:e}", store.name(id));
            }
        }
    }
    (report, forward_gap)
}
