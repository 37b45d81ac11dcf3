//! Local-correlation encoder: patch embedding, CBAM gating, log-sparse
//! windowed self-attention and (shifted) pre-norm residual blocks,
//! followed by a pool-and-project step that yields one feature row per
//! input dimension.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    /// Embedding width; `None` means `4 * n_dims`.
    pub embed_dim: Option<usize>,
    /// Attention window, in patches.
    pub window: usize,
    pub conv_kernel: usize,
    pub n_blocks: usize,
    pub mlp_ratio: f64,
    pub heads: usize,
    pub node_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_size: 4,
            embed_dim: None,
            window: 8,
            conv_kernel: 7,
            n_blocks: 2,
            mlp_ratio: 2.0,
            heads: 1,
            node_dim: 32,
        }
    }
}

impl EncoderConfig {
    /// Fills in data-dependent defaults.
    pub fn resolved(&self, n_dims: usize) -> EncoderConfig {
        EncoderConfig {
            embed_dim: Some(self.embed_dim.unwrap_or(4 * n_dims)),
            ..*self
        }
    }

    pub fn embed_width(&self, n_dims: usize) -> usize {
        self.embed_dim.unwrap_or(4 * n_dims)
    }

    pub fn mlp_hidden(&self, n_dims: usize) -> usize {
        ((self.mlp_ratio * self.embed_width(n_dims) as f64).round() as usize).max(1)
    }

    pub fn n_patches(&self, length: usize) -> usize {
        length.div_ceil(self.patch_size)
    }

    pub fn validate(&self, n_dims: usize) -> Result<()> {
        let c = self.embed_width(n_dims);
        let err = |m: &str| Err(Error::Config(format!("encoder: {m}")));
        if self.patch_size == 0 {
            return err("patch_size must be >= 1");
        }
        if self.window < 2 {
            return err("window must be >= 2");
        }
        if self.conv_kernel % 2 == 0 {
            return err("conv_kernel must be odd");
        }
        if self.n_blocks == 0 {
            return err("n_blocks must be >= 1");
        }
        if c == 0 || self.node_dim == 0 {
            return err("embed_dim and node_dim must be positive");
        }
        if self.heads == 0 || c % self.heads != 0 {
            return err("heads must divide embed_dim");
        }
        if !(self.mlp_ratio > 0.0) {
            return err("mlp_ratio must be positive");
        }
        Ok(())
    }
}

/// Additive attention bias for one window: 0 where row `i` may attend
/// to column `j` (`j <= i` and `i - j` is 0 or a power of two), `-inf`
/// elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMask {
    size: usize,
    bias: Tensor,
}

pub fn sparse_allowed(i: usize, j: usize) -> bool {
    j <= i && (i == j || (i - j).is_power_of_two())
}

pub fn log_sparse_mask(size: usize) -> SparseMask {
    let mut data = vec![f64::NEG_INFINITY; size * size];
    for i in 0..size {
        for j in 0..size {
            if sparse_allowed(i, j) {
                data[i * size + j] = 0.0;
            }
        }
    }
    SparseMask {
        size,
        bias: Tensor::new(vec![size, size], data).expect("square"),
    }
}

impl SparseMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn is_open(&self, i: usize, j: usize) -> bool {
        self.bias.at(i, j) == 0.0
    }

    pub fn open_in_row(&self, i: usize) -> usize {
        (0..self.size).filter(|&j| self.is_open(i, j)).count()
    }

    /// Top-left `len x len` block, for a short trailing window.
    pub fn truncated(&self, len: usize) -> SparseMask {
        let len = len.min(self.size);
        let mut data = Vec::with_capacity(len * len);
        for i in 0..len {
            data.extend_from_slice(&self.bias.row(i)[..len]);
        }
        SparseMask {
            size: len,
            bias: Tensor::new(vec![len, len], data).expect("square"),
        }
    }
}

/// Shared channel MLP and spatial convolution of one CBAM gate stack.
#[derive(Clone, Debug)]
pub struct CbamParams {
    pub mlp_w0: ParamId,
    pub mlp_w1: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
}

/// CBAM gates followed by a linear map (one of Q, K, V).
#[derive(Clone, Debug)]
pub struct ProjParams {
    pub cbam: CbamParams,
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub cbam: CbamParams,
    pub q: ProjParams,
    pub k: ProjParams,
    pub v: ProjParams,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub mlp_w0: ParamId,
    pub mlp_b0: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
}

/// Seeded parameter factory: weights uniform in `±1/sqrt(fan_in)`.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        use rand::Rng;
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, value))
    }
}

impl CbamParams {
    fn new(init: &mut Init, prefix: &str, c: usize, kernel: usize) -> Result<Self> {
        let h = (c / 4).max(1);
        Ok(CbamParams {
            mlp_w0: init.uniform(&format!("{prefix}.channel.w0"), &[c, h], c)?,
            mlp_w1: init.uniform(&format!("{prefix}.channel.w1"), &[h, c], h)?,
            conv_w: init.uniform(&format!("{prefix}.spatial.w"), &[1, 2, kernel], 2 * kernel)?,
            conv_b: init.uniform(&format!("{prefix}.spatial.b"), &[1], 2 * kernel)?,
        })
    }
}

impl ProjParams {
    fn new(init: &mut Init, prefix: &str, c: usize, kernel: usize) -> Result<Self> {
        Ok(ProjParams {
            cbam: CbamParams::new(init, &format!("{prefix}.cbam"), c, kernel)?,
            w: init.uniform(&format!("{prefix}.w"), &[c, c], c)?,
            b: init.uniform(&format!("{prefix}.b"), &[c], c)?,
        })
    }
}

impl BlockParams {
    fn new(init: &mut Init, prefix: &str, c: usize, hidden: usize, kernel: usize) -> Result<Self> {
        Ok(BlockParams {
            ln1_g: init.constant(&format!("{prefix}.ln1.gamma"), &[c], 1.0)?,
            ln1_b: init.constant(&format!("{prefix}.ln1.beta"), &[c], 0.0)?,
            cbam: CbamParams::new(init, &format!("{prefix}.cbam"), c, kernel)?,
            q: ProjParams::new(init, &format!("{prefix}.q"), c, kernel)?,
            k: ProjParams::new(init, &format!("{prefix}.k"), c, kernel)?,
            v: ProjParams::new(init, &format!("{prefix}.v"), c, kernel)?,
            ln2_g: init.constant(&format!("{prefix}.ln2.gamma"), &[c], 1.0)?,
            ln2_b: init.constant(&format!("{prefix}.ln2.beta"), &[c], 0.0)?,
            mlp_w0: init.uniform(&format!("{prefix}.mlp.w0"), &[c, hidden], c)?,
            mlp_b0: init.uniform(&format!("{prefix}.mlp.b0"), &[hidden], c)?,
            mlp_w1: init.uniform(&format!("{prefix}.mlp.w1"), &[hidden, c], hidden)?,
            mlp_b1: init.uniform(&format!("{prefix}.mlp.b1"), &[c], hidden)?,
        })
    }
}

/// Parameter handles of the whole encoder.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub n_dims: usize,
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub blocks: Vec<BlockParams>,
    pub node_w: ParamId,
    pub node_b: ParamId,
}

impl Encoder {
    pub(crate) fn new(init: &mut Init, cfg: &EncoderConfig, n_dims: usize) -> Result<Self> {
        cfg.validate(n_dims)?;
        let cfg = cfg.resolved(n_dims);
        let c = cfg.embed_width(n_dims);
        let patch_in = cfg.patch_size * n_dims;
        let hidden = cfg.mlp_hidden(n_dims);
        let embed_w = init.uniform("encoder.embed.w", &[patch_in, c], patch_in)?;
        let embed_b = init.uniform("encoder.embed.b", &[c], patch_in)?;
        let blocks = (0..cfg.n_blocks)
            .map(|b| BlockParams::new(init, &format!("encoder.block{b}"), c, hidden, cfg.conv_kernel))
            .collect::<Result<_>>()?;
        let out = n_dims * cfg.node_dim;
        Ok(Encoder {
            cfg,
            n_dims,
            embed_w,
            embed_b,
            blocks,
            node_w: init.uniform("encoder.node.w", &[c, out], c)?,
            node_b: init.uniform("encoder.node.b", &[out], c)?,
        })
    }

    /// Registers freshly initialized encoder parameters in `store`.
    pub fn seeded(store: &mut ParamStore, cfg: &EncoderConfig, n_dims: usize, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Encoder::new(&mut Init { store, rng: &mut rng }, cfg, n_dims)
    }

    /// Sample `[D, L]` to node features `[D, node_dim]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut e = patch_embed(tape, store, x, self)?;
        let mask = log_sparse_mask(self.cfg.window);
        for (b, block) in self.blocks.iter().enumerate() {
            e = encoder_block(tape, store, e, block, &self.cfg, &mask, b % 2 == 1)?;
        }
        node_features(tape, store, e, self)
    }
}

fn linear(tape: &mut Tape, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let (wv, bv) = (tape.param(store, w), tape.param(store, b));
    let y = tape.matmul(x, wv)?;
    tape.add(y, bv)
}

/// `[D, L]` to `[ceil(L / patch), patch * D]`: each row is one chunk of
/// timestamps flattened time-major. A short last chunk repeats the final
/// timestamp.
pub fn patchify(tape: &mut Tape, x: Var, patch_size: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 || patch_size == 0 {
        return Err(Error::shape("patchify", &shape, &[patch_size]));
    }
    let (d, l) = (shape[0], shape[1]);
    let p = l.div_ceil(patch_size);
    let mut time_major = tape.transpose(x)?;
    let pad = p * patch_size - l;
    if pad > 0 {
        let last = tape.slice(time_major, 0, l - 1, 1)?;
        let mut parts = vec![time_major];
        parts.extend(std::iter::repeat_n(last, pad));
        time_major = tape.concat(&parts, 0)?;
    }
    tape.reshape(time_major, &[p, patch_size * d])
}

/// Patch embedding `E = patchify(x) W + b`, shape `[P, C]`.
pub fn patch_embed(tape: &mut Tape, store: &ParamStore, x: Var, enc: &Encoder) -> Result<Var> {
    let d = tape.shape(x).first().copied().unwrap_or(0);
    if d != enc.n_dims {
        return Err(Error::shape("patch_embed", tape.shape(x), &[enc.n_dims]));
    }
    let patches = patchify(tape, x, enc.cfg.patch_size)?;
    linear(tape, store, patches, enc.embed_w, enc.embed_b)
}

fn channel_mlp(tape: &mut Tape, store: &ParamStore, v: Var, p: &CbamParams) -> Result<Var> {
    let c = tape.shape(v)[0];
    let row = tape.reshape(v, &[1, c])?;
    let w0 = tape.param(store, p.mlp_w0);
    let w1 = tape.param(store, p.mlp_w1);
    let h = tape.matmul(row, w0)?;
    let h = tape.relu(h)?;
    let out = tape.matmul(h, w1)?;
    tape.reshape(out, &[c])
}

/// Per-channel gate `sigmoid(MLP(avg_P E) + MLP(max_P E))` applied to `E`.
pub fn channel_gate(tape: &mut Tape, store: &ParamStore, e: Var, p: &CbamParams) -> Result<Var> {
    let avg = tape.mean_axis(e, 0)?;
    let max = tape.max_axis(e, 0)?;
    let a = channel_mlp(tape, store, avg, p)?;
    let m = channel_mlp(tape, store, max, p)?;
    let s = tape.add(a, m)?;
    tape.sigmoid(s)
}

pub fn channel_attention(tape: &mut Tape, store: &ParamStore, e: Var, p: &CbamParams) -> Result<Var> {
    let g = channel_gate(tape, store, e, p)?;
    tape.mul(e, g)
}

/// Per-position gate `sigmoid(conv([avg_C E; max_C E]))`, shape `[P]`.
pub fn spatial_gate(tape: &mut Tape, store: &ParamStore, e: Var, p: &CbamParams) -> Result<Var> {
    let positions = tape.shape(e)[0];
    let avg = tape.mean_axis(e, 1)?;
    let max = tape.max_axis(e, 1)?;
    let avg = tape.reshape(avg, &[1, positions])?;
    let max = tape.reshape(max, &[1, positions])?;
    let stacked = tape.concat(&[avg, max], 0)?;
    let w = tape.param(store, p.conv_w);
    let b = tape.param(store, p.conv_b);
    let conv = tape.conv1d(stacked, w, b)?;
    let gate = tape.sigmoid(conv)?;
    tape.reshape(gate, &[positions])
}

pub fn spatial_attention(tape: &mut Tape, store: &ParamStore, e: Var, p: &CbamParams) -> Result<Var> {
    let g = spatial_gate(tape, store, e, p)?;
    let et = tape.transpose(e)?;
    let scaled = tape.mul(et, g)?;
    tape.transpose(scaled)
}

/// Channel gating then spatial gating.
pub fn cbam(tape: &mut Tape, store: &ParamStore, e: Var, p: &CbamParams) -> Result<Var> {
    let e1 = channel_attention(tape, store, e, p)?;
    spatial_attention(tape, store, e1, p)
}

/// `softmax(Q K^T / sqrt(d_k) + B) V` for one window.
pub fn masked_attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: &SparseMask) -> Result<Var> {
    let d_k = tape.shape(q)[1];
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d_k as f64).sqrt())?;
    let weights = tape.softmax(scores, Some(mask.bias()))?;
    tape.matmul(weights, v)
}

/// Windowed multi-head attention over already projected `q`, `k`, `v`
/// (`[P, C]` each). The last window may be short.
pub fn windowed_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: &SparseMask,
    heads: usize,
) -> Result<Var> {
    let (p, c) = (tape.shape(q)[0], tape.shape(q)[1]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide width {c}")));
    }
    let d_k = c / heads;
    let w = mask.size();
    let mut windows = Vec::with_capacity(p.div_ceil(w));
    for start in (0..p).step_by(w) {
        let len = w.min(p - start);
        let m = if len == w { mask.clone() } else { mask.truncated(len) };
        let (qw, kw, vw) = (
            tape.slice(q, 0, start, len)?,
            tape.slice(k, 0, start, len)?,
            tape.slice(v, 0, start, len)?,
        );
        let out = if heads == 1 {
            masked_attention(tape, qw, kw, vw, &m)?
        } else {
            let mut per_head = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.slice(qw, 1, h * d_k, d_k)?;
                let kh = tape.slice(kw, 1, h * d_k, d_k)?;
                let vh = tape.slice(vw, 1, h * d_k, d_k)?;
                per_head.push(masked_attention(tape, qh, kh, vh, &m)?);
            }
            tape.concat(&per_head, 1)?
        };
        windows.push(out);
    }
    tape.concat(&windows, 0)
}

/// Sparse self-attention: Q, K and V each pass through their own CBAM
/// stack and linear map, then attend within windows under `mask`.
pub fn ssa(
    tape: &mut Tape,
    store: &ParamStore,
    e: Var,
    block: &BlockParams,
    mask: &SparseMask,
    heads: usize,
) -> Result<Var> {
    let proj = |p: &ProjParams, tape: &mut Tape| -> Result<Var> {
        let g = cbam(tape, store, e, &p.cbam)?;
        linear(tape, store, g, p.w, p.b)
    };
    let q = proj(&block.q, tape)?;
    let k = proj(&block.k, tape)?;
    let v = proj(&block.v, tape)?;
    windowed_attention(tape, q, k, v, mask, heads)
}

/// Cyclically moves row `i + shift` to row `i`.
pub fn roll_rows(tape: &mut Tape, e: Var, shift: usize) -> Result<Var> {
    let p = tape.shape(e)[0];
    let s = if p == 0 { 0 } else { shift % p };
    if s == 0 {
        return Ok(e);
    }
    let head = tape.slice(e, 0, s, p - s)?;
    let tail = tape.slice(e, 0, 0, s)?;
    tape.concat(&[head, tail], 0)
}

/// Pre-norm residual block:
/// `E1 = E + ssa(cbam(LN(E)))`, `out = E1 + MLP(LN(E1))`.
/// A shifted block rotates the patch rows by half a window first and
/// rotates them back afterwards.
pub fn encoder_block(
    tape: &mut Tape,
    store: &ParamStore,
    e: Var,
    block: &BlockParams,
    cfg: &EncoderConfig,
    mask: &SparseMask,
    shifted: bool,
) -> Result<Var> {
    let p = tape.shape(e)[0];
    let shift = if shifted { (cfg.window / 2) % p.max(1) } else { 0 };
    let x = roll_rows(tape, e, shift)?;

    let (g1, b1) = (tape.param(store, block.ln1_g), tape.param(store, block.ln1_b));
    let n1 = tape.layer_norm(x, g1, b1)?;
    let gated = cbam(tape, store, n1, &block.cbam)?;
    let attn = ssa(tape, store, gated, block, mask, cfg.heads)?;
    let x1 = tape.add(x, attn)?;

    let (g2, b2) = (tape.param(store, block.ln2_g), tape.param(store, block.ln2_b));
    let n2 = tape.layer_norm(x1, g2, b2)?;
    let h = linear(tape, store, n2, block.mlp_w0, block.mlp_b0)?;
    let h = tape.relu(h)?;
    let h = linear(tape, store, h, block.mlp_w1, block.mlp_b1)?;
    let out = tape.add(x1, h)?;

    roll_rows(tape, out, if shift == 0 { 0 } else { p - shift })
}

/// Temporal mean pool, projection to `n_dims * node_dim`, reshape to
/// `[n_dims, node_dim]`.
pub fn node_features(tape: &mut Tape, store: &ParamStore, e: Var, enc: &Encoder) -> Result<Var> {
    let pooled = tape.mean_axis(e, 0)?;
    let c = tape.shape(pooled)[0];
    let row = tape.reshape(pooled, &[1, c])?;
    let out = linear(tape, store, row, enc.node_w, enc.node_b)?;
    tape.reshape(out, &[enc.n_dims, enc.cfg.node_dim])
}
