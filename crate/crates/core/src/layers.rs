//! Parameterized building blocks: reversible instance normalization,
//! cross-variable multi-head attention, FFN, encoder blocks (with the mixer
//! substitutions studied in the ablations), projection head, linear trend,
//! and the optional token embedding.
//!
//! Convention: persistent parameters live in `*Params` structs as [`Tensor`]s
//! with `requires_grad` set. Each forward pass binds them onto a fresh
//! [`Tape`] (producing a `*Bound` struct of node ids) and the layer functions
//! operate on ids. Vector biases and per-channel affine terms are applied in
//! whichever orientation makes them a per-row broadcast, since per-column
//! broadcasting is deliberately unsupported by the tape.

use rand::distributions::Uniform;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, TensorId};

/// Variance padding for instance statistics and layer normalization; keeps
/// denominators positive on constant rows (night-time PV is exactly zero).
pub const NORM_EPS: f64 = 1e-5;

/// Alpha entries smaller than this cannot be inverted by denormalization.
pub const MIN_ALPHA: f64 = 1e-12;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LayerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("denormalize called before normalize primed the instance statistics")]
    NotNormalized,
    #[error("alpha[{channel}] = {value:e} is too close to zero to invert")]
    DegenerateAlpha { channel: usize, value: f64 },
    #[error("channel map has {map_len} entries but the series has {series_cols} column(s)")]
    ChannelMapMismatch { map_len: usize, series_cols: usize },
    #[error("channel map entry {channel} exceeds channel count {channels}")]
    ChannelOutOfRange { channel: usize, channels: usize },
}

pub type Result<T> = std::result::Result<T, LayerError>;

// ── Initialization helpers ───────────────────────────────────────────

/// Weight matrix filled from uniform(−1/√fan_in, +1/√fan_in).
pub fn uniform_weight<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.sample(dist)).collect();
    Tensor::matrix(rows, cols, data)
        .expect("uniform_weight: positive extents")
        .with_grad()
}

fn zeros_param(len: usize) -> Tensor {
    Tensor::vector(vec![0.0; len]).with_grad()
}

fn ones_param(len: usize) -> Tensor {
    Tensor::vector(vec![1.0; len]).with_grad()
}

// ── Reversible instance normalization ────────────────────────────────

/// Learnable per-channel affine for instance normalization.
#[derive(Debug, Clone)]
pub struct RevInParams {
    /// Per-channel scale, initialized to 1.
    pub alpha: Tensor,
    /// Per-channel shift, initialized to 0.
    pub beta: Tensor,
    pub eps: f64,
}

impl RevInParams {
    pub fn new(channels: usize) -> Self {
        RevInParams {
            alpha: ones_param(channels),
            beta: zeros_param(channels),
            eps: NORM_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.alpha.numel()
    }

    pub fn bind(&self, tape: &mut Tape) -> RevInBound {
        RevInBound {
            alpha: tape.leaf(&self.alpha),
            beta: tape.leaf(&self.beta),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RevInBound {
    pub alpha: TensorId,
    pub beta: TensorId,
}

/// Instance statistics captured by `revin_normalize`; consumed by
/// `revin_denormalize` on the same tape.
#[derive(Debug, Clone, Copy)]
pub struct RevInStats {
    pub mu: TensorId,
    pub sigma: TensorId,
    pub channels: usize,
}

/// Per-call statistics carrier. Starts unprimed; normalize fills it.
#[derive(Debug, Clone, Copy, Default)]
pub struct RevInState {
    stats: Option<RevInStats>,
}

impl RevInState {
    pub fn new() -> Self {
        RevInState { stats: None }
    }

    pub fn stats(&self) -> Option<&RevInStats> {
        self.stats.as_ref()
    }
}

/// `O[:,c] = alpha[c]·(H[:,c] − μ[c])/σ[c] + beta[c]` with μ, σ computed over
/// the L rows of this instance and cached into `state`.
pub fn revin_normalize(
    tape: &mut Tape,
    h: TensorId,
    bound: &RevInBound,
    eps: f64,
    state: &mut RevInState,
) -> Result<TensorId> {
    let ht = tape.permute10(h)?; // C×L: one row per channel
    let (mu, sigma) = tape.rowwise_mean_std(ht, eps)?;
    let centered = tape.sub(ht, mu)?;
    let scaled = tape.div(centered, sigma)?;
    let gained = tape.mul(scaled, bound.alpha)?;
    let shifted = tape.add(gained, bound.beta)?;
    let o = tape.permute10(shifted)?;
    state.stats = Some(RevInStats {
        mu,
        sigma,
        channels: tape.shape(ht)[0],
    });
    Ok(o)
}

/// Inverse map `F′ = (F − beta)/alpha · σ + μ` applied per mapped channel.
///
/// `f` is either a T×k series (k columns, `channel_map` length k assigning
/// each column its source-channel statistics) or a length-T vector with a
/// single-entry map.
pub fn revin_denormalize(
    tape: &mut Tape,
    f: TensorId,
    bound: &RevInBound,
    state: &RevInState,
    channel_map: &[usize],
) -> Result<TensorId> {
    let stats = state.stats.as_ref().ok_or(LayerError::NotNormalized)?;
    let cols = match tape.shape(f) {
        [_] => 1,
        [_, c] => *c,
        _ => unreachable!("tape tensors are rank 1 or 2 here"),
    };
    if channel_map.len() != cols {
        return Err(LayerError::ChannelMapMismatch {
            map_len: channel_map.len(),
            series_cols: cols,
        });
    }
    let alpha_vals = tape.value(bound.alpha);
    for &c in channel_map {
        if c >= stats.channels {
            return Err(LayerError::ChannelOutOfRange {
                channel: c,
                channels: stats.channels,
            });
        }
        if alpha_vals[c].abs() < MIN_ALPHA {
            return Err(LayerError::DegenerateAlpha {
                channel: c,
                value: alpha_vals[c],
            });
        }
    }

    let alpha = tape.gather(bound.alpha, channel_map)?;
    let beta = tape.gather(bound.beta, channel_map)?;
    let mu = tape.gather(stats.mu, channel_map)?;
    let sigma = tape.gather(stats.sigma, channel_map)?;

    if tape.shape(f).len() == 1 {
        // Scalar statistics broadcast over the length-T series.
        let unshifted = tape.sub(f, beta)?;
        let ungained = tape.div(unshifted, alpha)?;
        let rescaled = tape.mul(ungained, sigma)?;
        Ok(tape.add(rescaled, mu)?)
    } else {
        let ft = tape.permute10(f)?; // k×T: one row per mapped channel
        let unshifted = tape.sub(ft, beta)?;
        let ungained = tape.div(unshifted, alpha)?;
        let rescaled = tape.mul(ungained, sigma)?;
        let restored = tape.add(rescaled, mu)?;
        Ok(tape.permute10(restored)?)
    }
}

// ── Layer normalization (per token) ──────────────────────────────────

/// `gain·(x_row − μ_row)/σ_row + bias` for each row of a C×D token matrix;
/// gain and bias are length-D vectors.
pub fn layer_norm(
    tape: &mut Tape,
    x: TensorId,
    gain: TensorId,
    bias: TensorId,
) -> Result<TensorId> {
    let (mu, sigma) = tape.rowwise_mean_std(x, NORM_EPS)?;
    let centered = tape.sub(x, mu)?;
    let normed = tape.div(centered, sigma)?;
    // gain/bias index the feature axis, so apply them transposed (per-row).
    let nt = tape.permute10(normed)?;
    let gained = tape.mul(nt, gain)?;
    let shifted = tape.add(gained, bias)?;
    Ok(tape.permute10(shifted)?)
}

// ── Multi-head cross-variable attention ──────────────────────────────

/// Per-head Q/K/V projections, softmax attention over the C variable tokens,
/// concatenation, and output projection. No biases.
#[derive(Debug, Clone)]
pub struct MhaParams {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    /// (heads·d_head) × token_dim.
    pub wo: Tensor,
    pub heads: usize,
    pub d_head: usize,
}

impl MhaParams {
    /// `d_model` must divide evenly into `heads` key/value widths.
    pub fn new<R: Rng>(token_dim: usize, d_model: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && d_model % heads == 0, "d_model must split across heads");
        let d_head = d_model / heads;
        let mut wq = Vec::with_capacity(heads);
        let mut wk = Vec::with_capacity(heads);
        let mut wv = Vec::with_capacity(heads);
        for _ in 0..heads {
            wq.push(uniform_weight(token_dim, d_head, token_dim, rng));
            wk.push(uniform_weight(token_dim, d_head, token_dim, rng));
            wv.push(uniform_weight(token_dim, d_head, token_dim, rng));
        }
        let wo = uniform_weight(heads * d_head, token_dim, heads * d_head, rng);
        MhaParams {
            wq,
            wk,
            wv,
            wo,
            heads,
            d_head,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> MhaBound {
        MhaBound {
            wq: self.wq.iter().map(|t| tape.leaf(t)).collect(),
            wk: self.wk.iter().map(|t| tape.leaf(t)).collect(),
            wv: self.wv.iter().map(|t| tape.leaf(t)).collect(),
            wo: tape.leaf(&self.wo),
            d_head: self.d_head,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MhaBound {
    pub wq: Vec<TensorId>,
    pub wk: Vec<TensorId>,
    pub wv: Vec<TensorId>,
    pub wo: TensorId,
    pub d_head: usize,
}

/// Returns the mixed tokens and one C×C attention matrix id per head.
pub fn cross_variable_attention(
    tape: &mut Tape,
    tokens: TensorId,
    bound: &MhaBound,
) -> Result<(TensorId, Vec<TensorId>)> {
    let temperature = 1.0 / (bound.d_head as f64).sqrt();
    let mut head_outs = Vec::with_capacity(bound.wq.len());
    let mut attn = Vec::with_capacity(bound.wq.len());
    for ((&wq, &wk), &wv) in bound.wq.iter().zip(&bound.wk).zip(&bound.wv) {
        let q = tape.matmul(tokens, wq)?;
        let k = tape.matmul(tokens, wk)?;
        let v = tape.matmul(tokens, wv)?;
        let kt = tape.permute10(k)?;
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.scale(scores, temperature);
        let a = tape.softmax_rows(scaled)?;
        attn.push(a);
        head_outs.push(tape.matmul(a, v)?);
    }
    let concat = tape.concat_cols(&head_outs)?;
    let out = tape.matmul(concat, bound.wo)?;
    Ok((out, attn))
}

// ── Feed-forward network ─────────────────────────────────────────────

/// dense → relu → dense over the token feature axis.
#[derive(Debug, Clone)]
pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FfnParams {
    pub fn new<R: Rng>(token_dim: usize, hidden: usize, rng: &mut R) -> Self {
        FfnParams {
            w1: uniform_weight(token_dim, hidden, token_dim, rng),
            b1: zeros_param(hidden),
            w2: uniform_weight(hidden, token_dim, hidden, rng),
            b2: zeros_param(token_dim),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> FfnBound {
        FfnBound {
            w1: tape.leaf(&self.w1),
            b1: tape.leaf(&self.b1),
            w2: tape.leaf(&self.w2),
            b2: tape.leaf(&self.b2),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FfnBound {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

pub fn ffn(tape: &mut Tape, x: TensorId, bound: &FfnBound) -> Result<TensorId> {
    let add_bias = |tape: &mut Tape, y: TensorId, b: TensorId| -> Result<TensorId> {
        let yt = tape.permute10(y)?;
        let shifted = tape.add(yt, b)?;
        Ok(tape.permute10(shifted)?)
    };
    let h = tape.matmul(x, bound.w1)?;
    let h = add_bias(tape, h, bound.b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, bound.w2)?;
    add_bias(tape, o, bound.b2)
}

// ── Encoder block with mixer variants ────────────────────────────────

/// Which token-mixing component sits in the first half of each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum AttentionKind {
    #[default]
    Attention,
    /// One shared affine map over the stacked token matrix (mixes channels).
    LinearMixer,
    /// affine → relu → affine over the channel axis.
    MlpMixer,
    /// Mixing removed entirely: block reduces to layernorm(x + FFN(x)).
    NoAttention,
}

#[derive(Debug, Clone)]
pub enum MixerParams {
    Attention(MhaParams),
    Linear {
        /// C×C channel-mixing matrix.
        w: Tensor,
        /// Per-channel bias (length C).
        b: Tensor,
    },
    Mlp {
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    },
    None,
}

#[derive(Debug, Clone)]
pub enum MixerBound {
    Attention(MhaBound),
    Linear { w: TensorId, b: TensorId },
    Mlp {
        w1: TensorId,
        b1: TensorId,
        w2: TensorId,
        b2: TensorId,
    },
    None,
}

impl MixerParams {
    pub fn new<R: Rng>(
        kind: AttentionKind,
        channels: usize,
        token_dim: usize,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        match kind {
            AttentionKind::Attention => {
                MixerParams::Attention(MhaParams::new(token_dim, d_model, heads, rng))
            }
            AttentionKind::LinearMixer => MixerParams::Linear {
                w: uniform_weight(channels, channels, channels, rng),
                b: zeros_param(channels),
            },
            // Hidden width follows the FFN convention (d_model) so the
            // substitution has comparable capacity.
            AttentionKind::MlpMixer => MixerParams::Mlp {
                w1: uniform_weight(d_model, channels, channels, rng),
                b1: zeros_param(d_model),
                w2: uniform_weight(channels, d_model, d_model, rng),
                b2: zeros_param(channels),
            },
            AttentionKind::NoAttention => MixerParams::None,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> MixerBound {
        match self {
            MixerParams::Attention(m) => MixerBound::Attention(m.bind(tape)),
            MixerParams::Linear { w, b } => MixerBound::Linear {
                w: tape.leaf(w),
                b: tape.leaf(b),
            },
            MixerParams::Mlp { w1, b1, w2, b2 } => MixerBound::Mlp {
                w1: tape.leaf(w1),
                b1: tape.leaf(b1),
                w2: tape.leaf(w2),
                b2: tape.leaf(b2),
            },
            MixerParams::None => MixerBound::None,
        }
    }
}

/// One encoder block: mixer + FFN in post-norm residual layout. `ln1` is
/// absent exactly when the mixer is absent.
#[derive(Debug, Clone)]
pub struct EncoderBlockParams {
    pub mixer: MixerParams,
    pub ln1: Option<(Tensor, Tensor)>,
    pub ffn: FfnParams,
    pub ln2: (Tensor, Tensor),
}

impl EncoderBlockParams {
    pub fn new<R: Rng>(
        kind: AttentionKind,
        channels: usize,
        token_dim: usize,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let mixer = MixerParams::new(kind, channels, token_dim, d_model, heads, rng);
        let ln1 = match mixer {
            MixerParams::None => None,
            _ => Some((ones_param(token_dim), zeros_param(token_dim))),
        };
        EncoderBlockParams {
            mixer,
            ln1,
            ffn: FfnParams::new(token_dim, d_model, rng),
            ln2: (ones_param(token_dim), zeros_param(token_dim)),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> EncoderBlockBound {
        EncoderBlockBound {
            mixer: self.mixer.bind(tape),
            ln1: self
                .ln1
                .as_ref()
                .map(|(g, b)| (tape.leaf(g), tape.leaf(b))),
            ffn: self.ffn.bind(tape),
            ln2: (tape.leaf(&self.ln2.0), tape.leaf(&self.ln2.1)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderBlockBound {
    pub mixer: MixerBound,
    pub ln1: Option<(TensorId, TensorId)>,
    pub ffn: FfnBound,
    pub ln2: (TensorId, TensorId),
}

/// `x1 = layernorm(x + Mixer(x)); out = layernorm(x1 + FFN(x1))`. When the
/// mixer is absent the first half is skipped entirely (x1 = x); only the FFN
/// half remains and nothing mixes information across channels.
pub fn encoder_block(
    tape: &mut Tape,
    tokens: TensorId,
    bound: &EncoderBlockBound,
) -> Result<(TensorId, Vec<TensorId>)> {
    let mut attn = Vec::new();
    let x1 = match &bound.mixer {
        MixerBound::None => tokens,
        mixer => {
            let mixed = match mixer {
                MixerBound::Attention(m) => {
                    let (out, a) = cross_variable_attention(tape, tokens, m)?;
                    attn = a;
                    out
                }
                MixerBound::Linear { w, b } => {
                    let y = tape.matmul(*w, tokens)?;
                    tape.add(y, *b)?
                }
                MixerBound::Mlp { w1, b1, w2, b2 } => {
                    let h = tape.matmul(*w1, tokens)?;
                    let h = tape.add(h, *b1)?;
                    let h = tape.relu(h);
                    let y = tape.matmul(*w2, h)?;
                    tape.add(y, *b2)?
                }
                MixerBound::None => unreachable!(),
            };
            let res = tape.add(tokens, mixed)?;
            let (g, b) = bound.ln1.expect("mixer present implies ln1 present");
            layer_norm(tape, res, g, b)?
        }
    };
    let f = ffn(tape, x1, &bound.ffn)?;
    let res = tape.add(x1, f)?;
    let out = layer_norm(tape, res, bound.ln2.0, bound.ln2.1)?;
    Ok((out, attn))
}

// ── Projection head and linear trend ─────────────────────────────────

/// Per-token affine map from encoder width to horizon width, then permute.
#[derive(Debug, Clone)]
pub struct ProjectionParams {
    /// token_width × T.
    pub weight: Tensor,
    /// Length T.
    pub bias: Tensor,
}

impl ProjectionParams {
    pub fn new<R: Rng>(token_width: usize, horizon: usize, rng: &mut R) -> Self {
        ProjectionParams {
            weight: uniform_weight(token_width, horizon, token_width, rng),
            bias: zeros_param(horizon),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> AffineBound {
        AffineBound {
            weight: tape.leaf(&self.weight),
            bias: tape.leaf(&self.bias),
        }
    }
}

/// Shared-across-channels affine map L → T applied channel-independently.
#[derive(Debug, Clone)]
pub struct LinearTrendParams {
    /// L × T, one copy regardless of channel count.
    pub weight: Tensor,
    /// Length T.
    pub bias: Tensor,
}

impl LinearTrendParams {
    pub fn new<R: Rng>(lookback: usize, horizon: usize, rng: &mut R) -> Self {
        LinearTrendParams {
            weight: uniform_weight(lookback, horizon, lookback, rng),
            bias: zeros_param(horizon),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> AffineBound {
        AffineBound {
            weight: tape.leaf(&self.weight),
            bias: tape.leaf(&self.bias),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AffineBound {
    pub weight: TensorId,
    pub bias: TensorId,
}

/// `F_trans`: tokens C×W → W-to-T affine per token → permute to T×C. The
/// permuted orientation makes the length-T bias a per-row vector.
pub fn projection_head(tape: &mut Tape, x_enc: TensorId, bound: &AffineBound) -> Result<TensorId> {
    let y = tape.matmul(x_enc, bound.weight)?;
    let yt = tape.permute10(y)?;
    Ok(tape.add(yt, bound.bias)?)
}

/// `F_lin`: O is L×C; flip to channel rows, apply the shared map, flip back.
pub fn linear_trend(tape: &mut Tape, o: TensorId, bound: &AffineBound) -> Result<TensorId> {
    let ot = tape.permute10(o)?;
    let y = tape.matmul(ot, bound.weight)?;
    let yt = tape.permute10(y)?;
    Ok(tape.add(yt, bound.bias)?)
}

// ── Optional embedding ───────────────────────────────────────────────

/// Affine token embedding L → D_e applied before the encoder stack.
#[derive(Debug, Clone)]
pub struct EmbedParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl EmbedParams {
    pub fn new<R: Rng>(lookback: usize, embed_dim: usize, rng: &mut R) -> Self {
        EmbedParams {
            weight: uniform_weight(lookback, embed_dim, lookback, rng),
            bias: zeros_param(embed_dim),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> AffineBound {
        AffineBound {
            weight: tape.leaf(&self.weight),
            bias: tape.leaf(&self.bias),
        }
    }
}

/// tokens C×L → C×D_e.
pub fn embed_tokens(tape: &mut Tape, tokens: TensorId, bound: &AffineBound) -> Result<TensorId> {
    let y = tape.matmul(tokens, bound.weight)?;
    let yt = tape.permute10(y)?;
    let shifted = tape.add(yt, bound.bias)?;
    Ok(tape.permute10(shifted)?)
}
