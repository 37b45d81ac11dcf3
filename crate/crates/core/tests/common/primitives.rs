//! Seeded finite-difference cases for every tape primitive.

use calonet::tensor::{ParamStore, Tape, Tensor, Var};
use calonet::Result;
use rand::seq::SliceRandom;
use rand::Rng;

use super::{grad_check, normal, rng, weighted_sum, GradReport};

pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "slice",
    "mean_axis",
    "max_axis",
    "sum",
    "relu",
    "gelu",
    "sigmoid",
    "softmax",
    "layer_norm",
    "conv1d",
    "cross_entropy",
];

fn dim(r: &mut impl Rng) -> usize {
    r.random_range(1..=5)
}

/// Values bounded away from zero, for kinks at the origin.
fn off_zero(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.random_range(0.05..2.0);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values spaced far beyond the finite-difference step.
fn distinct(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.37 - n as f64 * 0.18).collect();
    data.shuffle(r);
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// One gradient-check case of `name` from `seed`.
pub fn check(name: &str, seed: u64) -> GradReport {
    let mut r = rng(seed ^ 0x5EED_0000);
    let mut store = ParamStore::new();
    let (rows, cols) = (dim(&mut r), dim(&mut r));
    type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
    let (inputs, build): (Vec<Tensor>, Build) = match name {
        "add" | "sub" | "mul" => {
            let full = [rows, cols];
            let b_shape: Vec<usize> = if r.random_bool(0.5) { vec![cols] } else { vec![rows, cols] };
            let swap = r.random_bool(0.5);
            let (a, b) = (normal(&mut r, &full), normal(&mut r, &b_shape));
            let op = name.to_string();
            (
                if swap { vec![b, a] } else { vec![a, b] },
                Box::new(move |t, v| match op.as_str() {
                    "add" => t.add(v[0], v[1]),
                    "sub" => t.sub(v[0], v[1]),
                    _ => t.mul(v[0], v[1]),
                }),
            )
        }
        "scale" => {
            let f = r.random_range(-3.0..3.0);
            (vec![normal(&mut r, &[rows, cols])], Box::new(move |t, v| t.scale(v[0], f)))
        }
        "add_scalar" => {
            let f = r.random_range(-3.0..3.0);
            (vec![normal(&mut r, &[rows, cols])], Box::new(move |t, v| t.add_scalar(v[0], f)))
        }
        "matmul" => {
            let k = dim(&mut r);
            (
                vec![normal(&mut r, &[rows, k]), normal(&mut r, &[k, cols])],
                Box::new(|t, v| t.matmul(v[0], v[1])),
            )
        }
        "transpose" => (vec![normal(&mut r, &[rows, cols])], Box::new(|t, v| t.transpose(v[0]))),
        "reshape" => {
            let flat = r.random_bool(0.5);
            (
                vec![normal(&mut r, &[rows, cols])],
                Box::new(move |t, v| {
                    if flat {
                        t.reshape(v[0], &[rows * cols])
                    } else {
                        t.reshape(v[0], &[cols, rows])
                    }
                }),
            )
        }
        "concat" => {
            let axis = r.random_range(0..2);
            let parts = r.random_range(1..=3);
            let inputs = (0..parts)
                .map(|_| {
                    let extent = dim(&mut r);
                    if axis == 0 {
                        normal(&mut r, &[extent, cols])
                    } else {
                        normal(&mut r, &[rows, extent])
                    }
                })
                .collect();
            (inputs, Box::new(move |t, v| t.concat(v, axis)))
        }
        "slice" => {
            let axis = r.random_range(0..2);
            let extent = if axis == 0 { rows } else { cols };
            let start = r.random_range(0..extent);
            let len = r.random_range(1..=extent - start);
            (
                vec![normal(&mut r, &[rows, cols])],
                Box::new(move |t, v| t.slice(v[0], axis, start, len)),
            )
        }
        "mean_axis" | "max_axis" => {
            let depth = dim(&mut r);
            let shape = [rows, cols, depth];
            let axis = r.random_range(0..3);
            let x = if name == "max_axis" { distinct(&mut r, &shape) } else { normal(&mut r, &shape) };
            let is_max = name == "max_axis";
            (
                vec![x],
                Box::new(move |t, v| if is_max { t.max_axis(v[0], axis) } else { t.mean_axis(v[0], axis) }),
            )
        }
        "sum" => (vec![normal(&mut r, &[rows, cols])], Box::new(|t, v| t.sum(v[0]))),
        "relu" => (vec![off_zero(&mut r, &[rows, cols])], Box::new(|t, v| t.relu(v[0]))),
        "gelu" => (vec![normal(&mut r, &[rows, cols])], Box::new(|t, v| t.gelu(v[0]))),
        "sigmoid" => (vec![normal(&mut r, &[rows, cols])], Box::new(|t, v| t.sigmoid(v[0]))),
        "softmax" => {
            let mut mask = Tensor::zeros(&[rows, cols]);
            for i in 0..rows {
                for j in 0..cols {
                    if j != i % cols && r.random_bool(0.3) {
                        mask.data_mut()[i * cols + j] = f64::NEG_INFINITY;
                    }
                }
            }
            let use_mask = r.random_bool(0.7);
            (
                vec![normal(&mut r, &[rows, cols])],
                Box::new(move |t, v| t.softmax(v[0], if use_mask { Some(&mask) } else { None })),
            )
        }
        "layer_norm" => {
            // Two columns make the output almost constant in x.
            let cols = r.random_range(3..=6);
            (
                vec![normal(&mut r, &[rows, cols]), normal(&mut r, &[cols]), normal(&mut r, &[cols])],
                Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])),
            )
        }
        "conv1d" => {
            let (cin, cout) = (dim(&mut r), dim(&mut r));
            let k = 2 * r.random_range(0..=3) + 1;
            let len = r.random_range(1..=9);
            (
                vec![normal(&mut r, &[cin, len]), normal(&mut r, &[cout, cin, k]), normal(&mut r, &[cout])],
                Box::new(|t, v| t.conv1d(v[0], v[1], v[2])),
            )
        }
        "cross_entropy" => {
            let labels: Vec<usize> = (0..rows).map(|_| r.random_range(0..cols)).collect();
            (
                vec![normal(&mut r, &[rows, cols])],
                Box::new(move |t, v| t.cross_entropy(v[0], &labels)),
            )
        }
        other => panic!("unknown primitive {other}"),
    };
    let ids: Vec<_> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, x)| store.add(format!("{name}.in{i}"), x).unwrap())
        .collect();
    // Output shape, for the random weighting.
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(&store, id)).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.shape(out).to_vec()
    };
    let weights = normal(&mut r, &out_shape);
    let ids_for_f = ids.clone();
    let f = move |tape: &mut Tape, store: &ParamStore| -> Result<Var> {
        let vars: Vec<Var> = ids_for_f.iter().map(|&id| tape.param(store, id)).collect();
        let out = build(tape, &vars)?;
        weighted_sum(tape, out, &weights)
    };
    grad_check(&mut store, Some(&ids), &f)
}
