//! Graph-isomorphism-network layers over the causal graph.
//!
//! `h'_v = MLP((1 + eps) * h_v + sum_{u in N(v)} h_u)`, with `N(v)` the
//! causes of `v` by default.

use serde::{Deserialize, Serialize};

use crate::causal::CausalMatrix;
use crate::encoder::Init;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Which edges of `i -> j` feed a node's neighbourhood.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Causes aggregate into their effects.
    #[default]
    In,
    Out,
    Sym,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GinConfig {
    pub n_layers: usize,
    /// Hidden width of each layer's MLP; `None` means `node_dim`.
    pub mlp_hidden: Option<usize>,
    pub eps_learnable: bool,
    pub direction: Direction,
    /// Scale neighbour features by edge weight instead of summing them.
    pub weighted: bool,
}

impl Default for GinConfig {
    fn default() -> Self {
        GinConfig {
            n_layers: 2,
            mlp_hidden: None,
            eps_learnable: true,
            direction: Direction::In,
            weighted: false,
        }
    }
}

impl GinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("gin: n_layers must be >= 1".into()));
        }
        if self.mlp_hidden == Some(0) {
            return Err(Error::Config("gin: mlp_hidden must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GinLayer {
    /// `None` when eps is fixed at 0.
    pub eps: Option<ParamId>,
    pub w0: ParamId,
    pub b0: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
}

impl GinLayer {
    pub(crate) fn new(init: &mut Init, prefix: &str, d: usize, hidden: usize, learn_eps: bool) -> Result<Self> {
        Ok(GinLayer {
            eps: if learn_eps {
                Some(init.constant(&format!("{prefix}.eps"), &[], 0.0)?)
            } else {
                None
            },
            w0: init.uniform(&format!("{prefix}.w0"), &[d, hidden], d)?,
            b0: init.uniform(&format!("{prefix}.b0"), &[hidden], d)?,
            w1: init.uniform(&format!("{prefix}.w1"), &[hidden, d], hidden)?,
            b1: init.uniform(&format!("{prefix}.b1"), &[d], hidden)?,
        })
    }
}

/// `cfg.n_layers` freshly initialized layers of width `d`.
pub fn seeded_layers(store: &mut ParamStore, cfg: &GinConfig, d: usize, seed: u64) -> Result<Vec<GinLayer>> {
    use rand::SeedableRng;
    cfg.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init { store, rng: &mut rng };
    let hidden = cfg.mlp_hidden.unwrap_or(d);
    (0..cfg.n_layers)
        .map(|k| GinLayer::new(&mut init, &format!("gin.layer{k}"), d, hidden, cfg.eps_learnable))
        .collect()
}

/// Row `v` holds the coefficient of each `h_u` in node `v`'s neighbour sum.
pub fn aggregation_matrix(adj: &CausalMatrix, direction: Direction, weighted: bool) -> Tensor {
    let n = adj.n();
    let coef = |u: usize, v: usize| {
        let w = adj.get(u, v);
        match (w > 0.0, weighted) {
            (false, _) => 0.0,
            (true, false) => 1.0,
            (true, true) => w,
        }
    };
    let mut data = vec![0.0; n * n];
    for v in 0..n {
        for u in 0..n {
            data[v * n + u] = match direction {
                Direction::In => coef(u, v),
                Direction::Out => coef(v, u),
                Direction::Sym => coef(u, v) + coef(v, u),
            };
        }
    }
    Tensor::new(vec![n, n], data).expect("square")
}

/// One GIN update of `h: [n, d]` given a precomputed aggregation matrix.
pub fn gin_layer(tape: &mut Tape, store: &ParamStore, h: Var, agg: Var, layer: &GinLayer) -> Result<Var> {
    let (hs, as_) = (tape.shape(h).to_vec(), tape.shape(agg).to_vec());
    if hs.len() != 2 || as_ != [hs[0], hs[0]] {
        return Err(Error::shape("gin_layer", &hs, &as_));
    }
    let neighbours = tape.matmul(agg, h)?;
    let own = match layer.eps {
        Some(eps) => {
            let e = tape.param(store, eps);
            let scaled = tape.mul(h, e)?;
            tape.add(h, scaled)?
        }
        None => h,
    };
    let z = tape.add(own, neighbours)?;
    let (w0, b0) = (tape.param(store, layer.w0), tape.param(store, layer.b0));
    let (w1, b1) = (tape.param(store, layer.w1), tape.param(store, layer.b1));
    let z = tape.matmul(z, w0)?;
    let z = tape.add(z, b0)?;
    let z = tape.relu(z)?;
    let z = tape.matmul(z, w1)?;
    tape.add(z, b1)
}

/// Applies every layer in order.
pub fn gin_stack(
    tape: &mut Tape,
    store: &ParamStore,
    h: Var,
    adj: &CausalMatrix,
    layers: &[GinLayer],
    cfg: &GinConfig,
) -> Result<Var> {
    let n = tape.shape(h).first().copied().unwrap_or(0);
    if adj.n() != n {
        return Err(Error::shape("gin", &[n], &[adj.n(), adj.n()]));
    }
    let agg = tape.constant(aggregation_matrix(adj, cfg.direction, cfg.weighted));
    layers
        .iter()
        .try_fold(h, |h, layer| gin_layer(tape, store, h, agg, layer))
}

/// Mean over nodes.
pub fn readout(tape: &mut Tape, h: Var) -> Result<Var> {
    if tape.shape(h).first().copied().unwrap_or(0) == 0 {
        return Err(Error::InvalidArgument("readout of an empty graph".into()));
    }
    tape.mean_axis(h, 0)
}
