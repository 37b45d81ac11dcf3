#![allow(dead_code)]

use calonet::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use calonet::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), normal_vec(rng, shape.iter().product())).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let e = (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
    if e.is_nan() {
        f64::INFINITY
    } else {
        e
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    // NaN anywhere must surface as a failure.
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, nan_max)
}

/// `max` that keeps NaN.
pub fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

/// Worst mismatch found by [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradReport {
    pub worst: f64,
    pub at: String,
    pub checked: usize,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.worst <= FD_TOL
    }
}

fn loss_value(store: &ParamStore, f: &dyn Fn(&mut Tape, &ParamStore) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let loss = f(&mut tape, store).unwrap();
    tape.value(loss).data()[0]
}

/// Compares tape gradients of `f` with central differences for every
/// element of the listed parameters (all parameters when `only` is None).
pub fn grad_check(
    store: &mut ParamStore,
    only: Option<&[ParamId]>,
    f: &dyn Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> GradReport {
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store).unwrap();
    tape.backward(loss, store).unwrap();
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut report = GradReport {
        worst: 0.0,
        at: String::new(),
        checked: 0,
    };
    for id in ids {
        let analytic = store.grad(id).map(<[f64]>::to_vec).unwrap_or_default();
        for k in 0..store.value(id).numel() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + FD_STEP;
            let up = loss_value(store, f);
            store.value_mut(id).data_mut()[k] = orig - FD_STEP;
            let down = loss_value(store, f);
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.get(k).copied().unwrap_or(0.0);
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.worst {
                report.worst = e;
                report.at = format!("{}[{k}]: tape {a:e} vs fd {numeric:e}", store.name(id));
            }
        }
    }
    report
}

/// `sum(out * r)` with a fixed random `r`, the usual scalarization for
/// gradient checks.
pub fn weighted_sum(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let m = tape.mul(out, rv)?;
    tape.sum(m)
}
pub mod model_oracle;
pub mod oracles;
pub mod primitives;
