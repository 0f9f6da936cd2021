//! Reusable model layers: linear/embedding layers, sinusoidal positional
//! encoding, multi-head attention, and the post-norm encoder block.
//!
//! Learnable tensors live in a flat [`ParamSet`] under dotted names
//! (`enc.l0.attn.h2.wq`, ...). The typed structs here create and register
//! those tensors; the `apply_*` functions read them back out of a bound graph
//! by the same names. Attention layers operate on row *blocks* so a whole
//! minibatch can share one graph: with one block they reduce to the plain
//! single-sequence layers.

use crate::error::{Result, SmtaError};
use crate::tensor::{BoundParams, Graph, ParamSet, Tensor, TensorId};
use rand::Rng;

/// Fully-connected layer; `weight` is [out x in], applied to row vectors as
/// x . weightT + bias.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data: Vec<f64> = (0..out_dim * in_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Ok(LinearLayer {
            weight: Tensor::matrix(out_dim, in_dim, data)?,
            bias: Tensor::zeros(vec![1, out_dim])?,
        })
    }

    pub fn register(self, params: &mut ParamSet, prefix: &str) -> Result<()> {
        params.insert(&format!("{prefix}.weight"), self.weight)?;
        params.insert(&format!("{prefix}.bias"), self.bias)
    }
}

/// x . WT + b for the layer registered under `prefix`.
pub fn apply_linear(
    g: &mut Graph,
    bp: &BoundParams,
    prefix: &str,
    x: TensorId,
) -> Result<TensorId> {
    let lin = g.matmul_nt(x, bp.id(&format!("{prefix}.weight")))?;
    g.add_bias(lin, bp.id(&format!("{prefix}.bias")))
}

/// Per-channel temporal embedding: ReLU(x . WT + b) applied to every time
/// step row, parameters shared across steps.
pub fn embed_channel(
    g: &mut Graph,
    bp: &BoundParams,
    prefix: &str,
    x: TensorId,
) -> Result<TensorId> {
    let lin = apply_linear(g, bp, prefix, x)?;
    g.relu(lin)
}

/// Fixed sinusoidal positional encoding:
/// P[pos, 2k] = sin(pos / 10000^(2k/d)), P[pos, 2k+1] = cos(pos / 10000^(2k/d)).
#[derive(Clone, Debug)]
pub struct PositionalEncoding {
    pub table: Tensor,
}

impl PositionalEncoding {
    pub fn new(steps: usize, width: usize) -> Result<Self> {
        Ok(PositionalEncoding { table: positional_encoding(steps, width)? })
    }

    /// The table tiled `copies` times along the rows, for batched sequences.
    pub fn tiled(&self, copies: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.table.data().len() * copies);
        for _ in 0..copies {
            data.extend_from_slice(self.table.data());
        }
        Tensor::matrix(self.table.rows() * copies, self.table.cols(), data)
    }
}

/// The raw [t x d] positional encoding matrix. Width must be even so
/// sin/cos pairs tile it exactly.
pub fn positional_encoding(steps: usize, width: usize) -> Result<Tensor> {
    if width == 0 || !width.is_multiple_of(2) {
        return Err(SmtaError::Config(format!(
            "positional encoding width must be even, got {width}"
        )));
    }
    let mut data = Vec::with_capacity(steps * width);
    for pos in 0..steps {
        for k in 0..width / 2 {
            let rate = 10000f64.powf(2.0 * k as f64 / width as f64);
            let angle = pos as f64 / rate;
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Tensor::matrix(steps, width, data)
}

/// Per-head d x d query/key/value projections plus the [h*d x d] output
/// projection that folds the concatenated heads back to width d.
#[derive(Clone, Debug)]
pub struct MultiHeadAttentionParams {
    pub query: Vec<Tensor>,
    pub key: Vec<Tensor>,
    pub value: Vec<Tensor>,
    pub output: Tensor,
}

impl MultiHeadAttentionParams {
    pub fn init(heads: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 {
            return Err(SmtaError::Config("attention needs at least one head".into()));
        }
        let square = |rng: &mut dyn rand::RngCore| -> Result<Tensor> {
            let bound = (6.0 / (2 * width) as f64).sqrt();
            let data: Vec<f64> = (0..width * width)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Tensor::matrix(width, width, data)
        };
        let mut query = Vec::new();
        let mut key = Vec::new();
        let mut value = Vec::new();
        for _ in 0..heads {
            query.push(square(rng)?);
            key.push(square(rng)?);
            value.push(square(rng)?);
        }
        let bound = (6.0 / (heads * width + width) as f64).sqrt();
        let out_data: Vec<f64> = (0..heads * width * width)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let output = Tensor::matrix(heads * width, width, out_data)?;
        Ok(MultiHeadAttentionParams { query, key, value, output })
    }

    pub fn register(self, params: &mut ParamSet, prefix: &str) -> Result<()> {
        for (l, ((q, k), v)) in self
            .query
            .into_iter()
            .zip(self.key)
            .zip(self.value)
            .enumerate()
        {
            params.insert(&format!("{prefix}.h{l}.wq"), q)?;
            params.insert(&format!("{prefix}.h{l}.wk"), k)?;
            params.insert(&format!("{prefix}.h{l}.wv"), v)?;
        }
        params.insert(&format!("{prefix}.wo"), self.output)
    }
}

/// Scaled dot-product attention over a single sequence:
/// softmax_rows(Q . KT / sqrt(d)) . V. The row-stochastic weight matrix is
/// retrievable from the returned node via [`Graph::attention_weights`].
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: TensorId,
    k: TensorId,
    v: TensorId,
) -> Result<TensorId> {
    let q_rows = g.shape(q)[0];
    let kv_rows = g.shape(k)[0];
    g.block_attention(q, k, v, q_rows, kv_rows)
}

/// Output of a multi-head attention application: the projected result and one
/// attention node per head (for weight inspection).
pub struct MhaOutput {
    pub out: TensorId,
    pub heads: Vec<TensorId>,
}

/// Multi-head attention with separate query and key/value sources, blocked:
/// row group i of `query_src` (of `q_block` rows) attends to row group i of
/// `kv_src` (of `kv_block` rows). For self-attention over one sequence pass
/// the same id and q_block == kv_block == its row count.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    bp: &BoundParams,
    prefix: &str,
    heads: usize,
    query_src: TensorId,
    kv_src: TensorId,
    q_block: usize,
    kv_block: usize,
) -> Result<MhaOutput> {
    if heads == 0 {
        return Err(SmtaError::Config("attention needs at least one head".into()));
    }
    let mut head_outs = Vec::with_capacity(heads);
    let mut attn_nodes = Vec::with_capacity(heads);
    for l in 0..heads {
        let q = g.matmul(query_src, bp.id(&format!("{prefix}.h{l}.wq")))?;
        let k = g.matmul(kv_src, bp.id(&format!("{prefix}.h{l}.wk")))?;
        let v = g.matmul(kv_src, bp.id(&format!("{prefix}.h{l}.wv")))?;
        let attn = g.block_attention(q, k, v, q_block, kv_block)?;
        attn_nodes.push(attn);
        head_outs.push(attn);
    }
    let concat = g.concat_cols(&head_outs)?;
    let out = g.matmul(concat, bp.id(&format!("{prefix}.wo")))?;
    Ok(MhaOutput { out, heads: attn_nodes })
}

/// Self-attention encoder block parameters: attention, a d -> d_ff -> d
/// feed-forward pair, and two layer-norm gain/bias pairs.
#[derive(Clone, Debug)]
pub struct EncoderBlockParams {
    pub attention: MultiHeadAttentionParams,
    pub ff_inner: LinearLayer,
    pub ff_outer: LinearLayer,
    pub norm1_gain: Tensor,
    pub norm1_bias: Tensor,
    pub norm2_gain: Tensor,
    pub norm2_bias: Tensor,
}

impl EncoderBlockParams {
    pub fn init(heads: usize, width: usize, ff_width: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(EncoderBlockParams {
            attention: MultiHeadAttentionParams::init(heads, width, rng)?,
            ff_inner: LinearLayer::init(ff_width, width, rng)?,
            ff_outer: LinearLayer::init(width, ff_width, rng)?,
            norm1_gain: Tensor::new(vec![1, width], vec![1.0; width])?,
            norm1_bias: Tensor::zeros(vec![1, width])?,
            norm2_gain: Tensor::new(vec![1, width], vec![1.0; width])?,
            norm2_bias: Tensor::zeros(vec![1, width])?,
        })
    }

    pub fn register(self, params: &mut ParamSet, prefix: &str) -> Result<()> {
        self.attention.register(params, &format!("{prefix}.attn"))?;
        self.ff_inner.register(params, &format!("{prefix}.ff1"))?;
        self.ff_outer.register(params, &format!("{prefix}.ff2"))?;
        params.insert(&format!("{prefix}.ln1.gain"), self.norm1_gain)?;
        params.insert(&format!("{prefix}.ln1.bias"), self.norm1_bias)?;
        params.insert(&format!("{prefix}.ln2.gain"), self.norm2_gain)?;
        params.insert(&format!("{prefix}.ln2.bias"), self.norm2_bias)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Post-norm encoder block, blocked over row groups of `t_block`:
/// self-attention, residual add, layer norm, feed-forward, residual add,
/// layer norm. Output shape equals input shape.
pub fn encoder_block(
    g: &mut Graph,
    bp: &BoundParams,
    prefix: &str,
    heads: usize,
    x: TensorId,
    t_block: usize,
) -> Result<TensorId> {
    let mha = multi_head_attention(
        g,
        bp,
        &format!("{prefix}.attn"),
        heads,
        x,
        x,
        t_block,
        t_block,
    )?;
    let res1 = g.add(mha.out, x)?;
    let normed1 = g.layer_norm(
        res1,
        bp.id(&format!("{prefix}.ln1.gain")),
        bp.id(&format!("{prefix}.ln1.bias")),
        LAYER_NORM_EPS,
    )?;
    let inner = apply_linear(g, bp, &format!("{prefix}.ff1"), normed1)?;
    let act = g.relu(inner)?;
    let outer = apply_linear(g, bp, &format!("{prefix}.ff2"), act)?;
    let res2 = g.add(normed1, outer)?;
    g.layer_norm(
        res2,
        bp.id(&format!("{prefix}.ln2.gain")),
        bp.id(&format!("{prefix}.ln2.bias")),
        LAYER_NORM_EPS,
    )
}
