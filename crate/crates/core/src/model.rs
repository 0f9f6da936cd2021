//! The full fusion model: static MLP encoder, per-channel temporal
//! transformer encoders, intra-temporal fusion attention over channel
//! summaries, inter static-temporal fusion attention with the static vector
//! as query, and a two-layer prediction head.
//!
//! Three fusion strategies share the encoders:
//! - `DoubleAttention`: intra-channel self-attention, then static-queried
//!   attention over [static; fused channels] (the full model);
//! - `SingleAttention`: static-queried attention directly over
//!   [static; channel summaries];
//! - `Concat`: the stacked rows flattened into one vector for the head.
//!
//! A whole minibatch runs through one graph; per-sequence attention is
//! blocked so record boundaries never leak into each other.

use crate::blocks::{
    self, EncoderBlockParams, LinearLayer, MultiHeadAttentionParams, PositionalEncoding,
};
use crate::error::{Result, SmtaError};
use crate::pipeline::PatientRecord;
use crate::tensor::{BoundParams, Graph, ParamSet, Tensor, TensorId};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Which fusion stage combines static and temporal representations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    /// Flatten [static; channel summaries] straight into the head.
    Concat,
    /// One attention pass: static queries [static; channel summaries].
    #[serde(rename = "saf")]
    SingleAttention,
    /// Intra-channel self-attention, then the static-queried pass.
    #[serde(rename = "dsaf")]
    DoubleAttention,
}

impl std::str::FromStr for FusionStrategy {
    type Err = SmtaError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "concat" => Ok(FusionStrategy::Concat),
            "saf" => Ok(FusionStrategy::SingleAttention),
            "dsaf" => Ok(FusionStrategy::DoubleAttention),
            other => Err(SmtaError::Config(format!(
                "unknown fusion strategy {other:?}; expected concat, saf, or dsaf"
            ))),
        }
    }
}

impl std::fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FusionStrategy::Concat => "concat",
            FusionStrategy::SingleAttention => "saf",
            FusionStrategy::DoubleAttention => "dsaf",
        };
        write!(f, "{s}")
    }
}

/// Model hyperparameters plus the input shapes it was built for.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Time steps per channel.
    pub steps: usize,
    /// Input width of each temporal channel (1 for continuous, vocabulary
    /// size for one-hot discrete).
    pub channel_widths: Vec<usize>,
    /// Width of the static feature vector.
    pub static_width: usize,
    /// Shared model width d.
    pub width: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub ff_width: usize,
    /// Hidden width of the prediction head.
    pub head_hidden: usize,
    pub fusion: FusionStrategy,
    /// One encoder stack shared by all channels, or one per channel.
    pub share_channel_encoders: bool,
    /// Disable to study permutation behavior; on by default.
    pub use_positional_encoding: bool,
}

impl ModelConfig {
    /// Defaults for everything but the input shapes.
    pub fn new(steps: usize, channel_widths: Vec<usize>, static_width: usize) -> Self {
        ModelConfig {
            steps,
            channel_widths,
            static_width,
            width: 64,
            heads: 4,
            encoder_layers: 2,
            ff_width: 128,
            head_hidden: 32,
            fusion: FusionStrategy::DoubleAttention,
            share_channel_encoders: true,
            use_positional_encoding: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.channel_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels() == 0 || self.steps == 0 {
            return Err(SmtaError::Config("need at least one channel and one step".into()));
        }
        if self.width == 0 || !self.width.is_multiple_of(2) {
            return Err(SmtaError::Config(format!(
                "model width must be positive and even, got {}",
                self.width
            )));
        }
        if self.heads == 0 {
            return Err(SmtaError::Config("need at least one attention head".into()));
        }
        if !(1..=3).contains(&self.encoder_layers) {
            return Err(SmtaError::Config(format!(
                "encoder layers must be 1, 2, or 3, got {}",
                self.encoder_layers
            )));
        }
        if self.head_hidden == 0 {
            return Err(SmtaError::Config("head hidden width must be positive".into()));
        }
        Ok(())
    }

    /// Input width of the prediction head; only the concat strategy deviates
    /// from the model width.
    pub fn head_input_width(&self) -> usize {
        match self.fusion {
            FusionStrategy::Concat => (self.channels() + 1) * self.width,
            _ => self.width,
        }
    }
}

/// Everything the model owns: config, the flat named parameter set, and the
/// fixed positional table.
#[derive(Clone, Debug)]
pub struct SmtaFormer {
    pub config: ModelConfig,
    pub params: ParamSet,
    positional: PositionalEncoding,
}

/// Prediction plus the attention weights a forward pass exposes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub prediction: f64,
    /// Per head, an n x n row-stochastic matrix (double-attention only).
    pub intra_weights: Vec<Vec<Vec<f64>>>,
    /// Per head, one row of n+1 weights; index 0 is the static key
    /// (attention strategies only).
    pub inter_weights: Vec<Vec<f64>>,
}

/// Node handles for one batched forward pass.
pub struct BatchForward {
    /// [batch, 1] probabilities.
    pub predictions: TensorId,
    /// Per head: attention node whose cached weights are [batch*n x n].
    pub intra_heads: Vec<TensorId>,
    /// Per head: attention node whose cached weights are [batch x n+1].
    pub inter_heads: Vec<TensorId>,
}

impl SmtaFormer {
    /// Deterministic Glorot initialization from a seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::derive_rng(seed, "model-init", 0);
        let mut params = ParamSet::new();
        let d = config.width;

        LinearLayer::init(d, config.static_width, &mut rng)?.register(&mut params, "static")?;
        for (i, &w) in config.channel_widths.iter().enumerate() {
            LinearLayer::init(d, w, &mut rng)?.register(&mut params, &format!("embed.ch{i}"))?;
        }
        if config.share_channel_encoders {
            for l in 0..config.encoder_layers {
                EncoderBlockParams::init(config.heads, d, config.ff_width, &mut rng)?
                    .register(&mut params, &format!("enc.l{l}"))?;
            }
        } else {
            for i in 0..config.channels() {
                for l in 0..config.encoder_layers {
                    EncoderBlockParams::init(config.heads, d, config.ff_width, &mut rng)?
                        .register(&mut params, &format!("enc.ch{i}.l{l}"))?;
                }
            }
        }
        if config.fusion == FusionStrategy::DoubleAttention {
            MultiHeadAttentionParams::init(config.heads, d, &mut rng)?
                .register(&mut params, "intra")?;
        }
        if config.fusion != FusionStrategy::Concat {
            MultiHeadAttentionParams::init(config.heads, d, &mut rng)?
                .register(&mut params, "inter")?;
        }
        LinearLayer::init(config.head_hidden, config.head_input_width(), &mut rng)?
            .register(&mut params, "head.fc1")?;
        LinearLayer::init(1, config.head_hidden, &mut rng)?.register(&mut params, "head.fc2")?;

        let positional = PositionalEncoding::new(config.steps, d)?;
        Ok(SmtaFormer { config, params, positional })
    }

    pub fn from_parts(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let positional = PositionalEncoding::new(config.steps, config.width)?;
        Ok(SmtaFormer { config, params, positional })
    }

    fn check_record(&self, record: &PatientRecord) -> Result<()> {
        let cfg = &self.config;
        if record.static_features.len() != cfg.static_width {
            return Err(SmtaError::Dimension {
                op: "forward: static width",
                lhs: vec![record.static_features.len()],
                rhs: vec![cfg.static_width],
            });
        }
        if record.channels.len() != cfg.channels() {
            return Err(SmtaError::Dimension {
                op: "forward: channel count",
                lhs: vec![record.channels.len()],
                rhs: vec![cfg.channels()],
            });
        }
        for (i, ch) in record.channels.iter().enumerate() {
            if ch.len() != cfg.steps * cfg.channel_widths[i] {
                return Err(SmtaError::Dimension {
                    op: "forward: channel matrix",
                    lhs: vec![ch.len()],
                    rhs: vec![cfg.steps, cfg.channel_widths[i]],
                });
            }
            if !ch.iter().all(|v| v.is_finite()) {
                return Err(SmtaError::PipelineOrder(format!(
                    "record {} channel {i} contains missing values; imputation must run before the model",
                    record.id
                )));
            }
        }
        Ok(())
    }

    /// Static encoder alone: ReLU(s . WT + b), as a [batch x d] node.
    fn encode_static_batch(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        batch: &[&PatientRecord],
    ) -> Result<TensorId> {
        let m = self.config.static_width;
        let mut data = Vec::with_capacity(batch.len() * m);
        for r in batch {
            data.extend_from_slice(&r.static_features);
        }
        let s = g.constant(vec![batch.len(), m], data);
        blocks::embed_channel(g, bp, "static", s)
    }

    fn encoder_prefix(&self, channel: usize, layer: usize) -> String {
        if self.config.share_channel_encoders {
            format!("enc.l{layer}")
        } else {
            format!("enc.ch{channel}.l{layer}")
        }
    }

    /// One channel through embedding, positional encoding, the encoder stack
    /// and time pooling, for the whole batch at once: [batch*t x d_i] in,
    /// [batch x d] out.
    fn encode_channel_batch(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        channel: usize,
        batch: &[&PatientRecord],
    ) -> Result<TensorId> {
        let cfg = &self.config;
        let t = cfg.steps;
        let w = cfg.channel_widths[channel];
        let mut data = Vec::with_capacity(batch.len() * t * w);
        for r in batch {
            data.extend_from_slice(&r.channels[channel]);
        }
        let x = g.constant(vec![batch.len() * t, w], data);
        let mut h = blocks::embed_channel(g, bp, &format!("embed.ch{channel}"), x)?;
        if cfg.use_positional_encoding {
            let tiled = self.positional.tiled(batch.len())?;
            let pos = g.leaf(&tiled);
            h = g.add(h, pos)?;
        }
        for l in 0..cfg.encoder_layers {
            h = blocks::encoder_block(g, bp, &self.encoder_prefix(channel, l), cfg.heads, h, t)?;
        }
        g.block_mean_rows(h, t)
    }

    /// All channels through the shared encoder stack at once:
    /// [n*batch*t x d] internally, [n*batch x d] channel-major summaries out.
    fn encode_channels_fused(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        batch: &[&PatientRecord],
    ) -> Result<TensorId> {
        let cfg = &self.config;
        let t = cfg.steps;
        let n = cfg.channels();
        let mut embedded = Vec::with_capacity(n);
        for channel in 0..n {
            let w = cfg.channel_widths[channel];
            let mut data = Vec::with_capacity(batch.len() * t * w);
            for r in batch {
                data.extend_from_slice(&r.channels[channel]);
            }
            let x = g.constant(vec![batch.len() * t, w], data);
            embedded.push(blocks::embed_channel(g, bp, &format!("embed.ch{channel}"), x)?);
        }
        let mut h = g.concat_rows(&embedded)?;
        if cfg.use_positional_encoding {
            let tiled = self.positional.tiled(n * batch.len())?;
            let pos = g.leaf(&tiled);
            h = g.add(h, pos)?;
        }
        for l in 0..cfg.encoder_layers {
            h = blocks::encoder_block(g, bp, &format!("enc.l{l}"), cfg.heads, h, t)?;
        }
        g.block_mean_rows(h, t)
    }

    /// Run a batch through the full model. Predictions come out as a
    /// [batch x 1] node of probabilities in (0, 1).
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        batch: &[&PatientRecord],
    ) -> Result<BatchForward> {
        if batch.is_empty() {
            return Err(SmtaError::EmptySequence("forward_batch"));
        }
        for r in batch {
            self.check_record(r)?;
        }
        let cfg = &self.config;
        let n = cfg.channels();
        let b = batch.len();

        let static_rows = self.encode_static_batch(g, bp, batch)?; // [b x d]
        // channel-major [n*b x d] summaries
        let stacked = if cfg.share_channel_encoders {
            // all channels share the encoder stack, so the embedded sequences
            // can run through it as one tensor of n*b t-row blocks
            self.encode_channels_fused(g, bp, batch)?
        } else {
            let mut channel_rows = Vec::with_capacity(n);
            for i in 0..n {
                channel_rows.push(self.encode_channel_batch(g, bp, i, batch)?); // [b x d]
            }
            g.concat_rows(&channel_rows)?
        };

        // channel-major [n*b x d] -> record-major [b*n x d]
        let mut order = Vec::with_capacity(b * n);
        for r in 0..b {
            for i in 0..n {
                order.push(i * b + r);
            }
        }
        let summaries = g.gather_rows(stacked, order)?; // rows r*n+i = record r, channel i

        let mut intra_heads = Vec::new();
        let fused = match cfg.fusion {
            FusionStrategy::DoubleAttention => {
                let mha = blocks::multi_head_attention(
                    g, bp, "intra", cfg.heads, summaries, summaries, n, n,
                )?;
                intra_heads = mha.heads;
                mha.out
            }
            _ => summaries,
        };

        // [static row; n channel rows] per record
        let all = g.concat_rows(&[static_rows, fused])?; // [b + b*n x d]
        let mut order = Vec::with_capacity(b * (n + 1));
        for r in 0..b {
            order.push(r);
            for i in 0..n {
                order.push(b + r * n + i);
            }
        }
        let keyed = g.gather_rows(all, order)?; // [b*(n+1) x d]

        let mut inter_heads = Vec::new();
        let head_input = match cfg.fusion {
            FusionStrategy::Concat => g.reshape(keyed, vec![b, (n + 1) * cfg.width])?,
            _ => {
                let mha = blocks::multi_head_attention(
                    g, bp, "inter", cfg.heads, static_rows, keyed, 1, n + 1,
                )?;
                inter_heads = mha.heads;
                mha.out // [b x d]
            }
        };

        let hidden = blocks::apply_linear(g, bp, "head.fc1", head_input)?;
        let act = g.relu(hidden)?;
        let logits = blocks::apply_linear(g, bp, "head.fc2", act)?;
        let predictions = g.sigmoid(logits)?; // [b x 1]
        Ok(BatchForward { predictions, intra_heads, inter_heads })
    }

    /// Forward one record and collect its trace.
    pub fn forward(&self, record: &PatientRecord) -> Result<ForwardTrace> {
        let mut g = Graph::new();
        let bp = self.params.bind(&mut g);
        let out = self.forward_batch(&mut g, &bp, &[record])?;
        let n = self.config.channels();
        let prediction = g.value(out.predictions)[0];

        let mut intra_weights = Vec::new();
        for &head in &out.intra_heads {
            let (w, cols) = g.attention_weights(head).expect("attention node");
            let matrix: Vec<Vec<f64>> = w.chunks_exact(cols).map(|r| r.to_vec()).collect();
            debug_assert_eq!(matrix.len(), n);
            intra_weights.push(matrix);
        }
        let mut inter_weights = Vec::new();
        for &head in &out.inter_heads {
            let (w, cols) = g.attention_weights(head).expect("attention node");
            debug_assert_eq!(cols, n + 1);
            inter_weights.push(w.to_vec());
        }
        Ok(ForwardTrace { prediction, intra_weights, inter_weights })
    }

    /// Probabilities for a batch, no gradient bookkeeping.
    pub fn predict(&self, records: &[&PatientRecord]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(records.len());
        // chunked so graph memory stays bounded on large evaluation sets
        for chunk in records.chunks(64) {
            let mut g = Graph::new();
            let bp = self.params.bind(&mut g);
            let fwd = self.forward_batch(&mut g, &bp, chunk)?;
            out.extend_from_slice(g.value(fwd.predictions));
        }
        Ok(out)
    }
}

/// Logistic regression over static features spliced into every time step,
/// the single-modality reference arm.
#[derive(Clone, Debug)]
pub struct LogisticReference {
    pub steps: usize,
    pub channel_widths: Vec<usize>,
    pub static_width: usize,
    pub params: ParamSet,
}

impl LogisticReference {
    pub fn feature_width(&self) -> usize {
        let per_step: usize = self.channel_widths.iter().sum::<usize>() + self.static_width;
        self.steps * per_step
    }

    pub fn init(
        steps: usize,
        channel_widths: Vec<usize>,
        static_width: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut lr = LogisticReference { steps, channel_widths, static_width, params: ParamSet::new() };
        let mut rng = crate::rng::derive_rng(seed, "logistic-init", 0);
        LinearLayer::init(1, lr.feature_width(), &mut rng)?.register(&mut lr.params, "lr")?;
        Ok(lr)
    }

    /// Splice static features onto each time step's channel values, then
    /// flatten over steps.
    pub fn feature_vector(&self, record: &PatientRecord) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.feature_width());
        for step in 0..self.steps {
            for (ch, &w) in record.channels.iter().zip(&self.channel_widths) {
                out.extend_from_slice(&ch[step * w..(step + 1) * w]);
            }
            out.extend_from_slice(&record.static_features);
        }
        out
    }

    pub fn forward_batch(
        &self,
        g: &mut Graph,
        bp: &BoundParams,
        batch: &[&PatientRecord],
    ) -> Result<TensorId> {
        let f = self.feature_width();
        let mut data = Vec::with_capacity(batch.len() * f);
        for r in batch {
            data.extend(self.feature_vector(r));
        }
        let x = g.constant(vec![batch.len(), f], data);
        let logits = blocks::apply_linear(g, bp, "lr", x)?;
        g.sigmoid(logits)
    }

    pub fn predict(&self, records: &[&PatientRecord]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bp = self.params.bind(&mut g);
        let p = self.forward_batch(&mut g, &bp, records)?;
        Ok(g.value(p).to_vec())
    }
}

// ── Checkpoint format ────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    shape: Vec<usize>,
    /// Little-endian f64 bytes, base64; bit-exact round trip.
    data: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: ModelConfig,
    params: Vec<CheckpointParam>,
}

const CHECKPOINT_FORMAT: &str = "smta-checkpoint-v1";

/// Write config + parameters; values are base64 little-endian f64 so a load
/// reproduces predictions bit-identically.
pub fn save_checkpoint(path: &Path, model: &SmtaFormer) -> Result<()> {
    use base64::Engine;
    let engine = base64::engine::general_purpose::STANDARD;
    let params = model
        .params
        .iter()
        .map(|(name, t)| {
            let mut bytes = Vec::with_capacity(t.data().len() * 8);
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            CheckpointParam {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: engine.encode(bytes),
            }
        })
        .collect();
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        config: model.config.clone(),
        params,
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<SmtaFormer> {
    use base64::Engine;
    let engine = base64::engine::general_purpose::STANDARD;
    let file: CheckpointFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(SmtaError::Config(format!(
            "unsupported checkpoint format {:?}",
            file.format
        )));
    }
    let mut params = ParamSet::new();
    for p in file.params {
        let bytes = engine
            .decode(&p.data)
            .map_err(|e| SmtaError::Data(format!("checkpoint param {}: {e}", p.name)))?;
        if !bytes.len().is_multiple_of(8) {
            return Err(SmtaError::Data(format!("checkpoint param {}: ragged bytes", p.name)));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(&p.name, Tensor::new(p.shape, data)?)?;
    }
    SmtaFormer::from_parts(file.config, params)
}
