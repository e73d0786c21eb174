//! The assembled forecaster: RevIN → variate tokens → encoder stack →
//! projection head, combined with the channel-independent linear trend, then
//! output selection and denormalization.
//!
//! Every studied variant is a [`VariantFlags`] value: the linear module and
//! RevIN can be removed, an embedding inserted, the attention mixer swapped
//! for linear/MLP mixers or removed, and the output read from the PV column,
//! the radiation column, or a (fixed or learnable) weighted sum of both.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::{
    self, AffineBound, AttentionKind, EmbedParams, EncoderBlockBound, EncoderBlockParams,
    LayerError, LinearTrendParams, MixerBound, MixerParams, ProjectionParams, RevInBound,
    RevInParams, RevInState,
};
use crate::tensor::{Tape, Tensor, TensorError, TensorId};

/// Weight used by both terms of the fixed-sum output mode.
pub const SUM_FIXED_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error("invalid configuration: {reason}")]
    Config { reason: String },
    #[error("input shape {got:?} does not match configured {expected:?} (L×C)")]
    InputShape { expected: (usize, usize), got: Vec<usize> },
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Layer(LayerError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Which series the model emits as its forecast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum OutputMode {
    /// The PV-power column of the combined forecast.
    #[default]
    PvDim,
    /// The radiation column (the strongest exogenous driver).
    RadiationDim,
    /// 0.5·PV + 0.5·radiation, weights constant.
    SumFixed,
    /// Weighted sum with both weights learnable, initialized at 0.5.
    SumLearnable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Lookback length L (time steps).
    pub l: usize,
    /// Forecast horizon T (time steps).
    pub t: usize,
    /// Channel count C.
    pub c: usize,
    pub num_blocks: usize,
    /// Attention inner width and FFN hidden width.
    pub d_model: usize,
    pub heads: usize,
    /// Token width after the optional embedding (only used with +Embed).
    pub embed_dim: usize,
    /// Column of the PV power channel.
    pub target_channel: usize,
    /// Column of the radiation forecast channel.
    pub radiation_channel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            l: 192,
            t: 96,
            c: 6,
            num_blocks: 2,
            d_model: 128,
            heads: 8,
            embed_dim: 128,
            target_channel: 0,
            radiation_channel: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("l", self.l),
            ("t", self.t),
            ("c", self.c),
            ("num_blocks", self.num_blocks),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("embed_dim", self.embed_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config {
                    reason: format!("{name} must be positive"),
                });
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(ModelError::Config {
                reason: format!("heads ({}) must divide d_model ({})", self.heads, self.d_model),
            });
        }
        if self.target_channel >= self.c || self.radiation_channel >= self.c {
            return Err(ModelError::Config {
                reason: format!(
                    "channel indices (target {}, radiation {}) must be < C ({})",
                    self.target_channel, self.radiation_channel, self.c
                ),
            });
        }
        if self.target_channel == self.radiation_channel {
            return Err(ModelError::Config {
                reason: "target and radiation channels must differ".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantFlags {
    /// Keep the linear trend path (off = "−Linear").
    pub use_linear: bool,
    /// Keep reversible instance normalization (off = "−RevIN").
    pub use_revin: bool,
    /// Insert a token embedding before the encoder ("+Embed").
    pub add_embedding: bool,
    pub attention_kind: AttentionKind,
    pub output_mode: OutputMode,
}

impl Default for VariantFlags {
    fn default() -> Self {
        VariantFlags {
            use_linear: true,
            use_revin: true,
            add_embedding: false,
            attention_kind: AttentionKind::Attention,
            output_mode: OutputMode::PvDim,
        }
    }
}

/// Scalar weights of the trend/detail combination, both initialized to 1.
/// `w_lin` is absent entirely when the linear path is ablated.
#[derive(Debug, Clone)]
pub struct CombineWeights {
    pub w_trans: Tensor,
    pub w_lin: Option<Tensor>,
}

/// Learnable output-sum weights (SumLearnable mode only), initialized at 0.5.
#[derive(Debug, Clone)]
pub struct SumWeights {
    pub w_pv: Tensor,
    pub w_rad: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub revin: Option<RevInParams>,
    pub embed: Option<EmbedParams>,
    pub blocks: Vec<EncoderBlockParams>,
    pub proj: ProjectionParams,
    pub linear: Option<LinearTrendParams>,
    pub combine: CombineWeights,
    pub sum: Option<SumWeights>,
}

#[derive(Debug, Clone)]
pub struct PvClient {
    pub config: ModelConfig,
    pub flags: VariantFlags,
    pub params: ModelParams,
}

/// Tape-level result of one forward pass. Values can be read (or used to
/// build a loss) through the ids; `named` lists every bound parameter leaf in
/// canonical order for gradient readback.
pub struct ForwardPass {
    /// Denormalized forecast for the selected output series, length T.
    pub output: TensorId,
    /// Combined normalized-space forecast, T×C.
    pub combined: TensorId,
    /// Encoder-path forecast, T×C.
    pub f_trans: TensorId,
    /// Trend-path forecast, T×C; absent under "−Linear".
    pub f_lin: Option<TensorId>,
    /// Per block, per head attention matrices (empty for non-attention mixers).
    pub attention: Vec<Vec<TensorId>>,
    pub named: Vec<(String, TensorId)>,
    w_trans: TensorId,
    w_lin: Option<TensorId>,
    revin: Option<(RevInBound, RevInState)>,
    sum: Option<(TensorId, TensorId)>,
}

/// Value-level snapshot of a forward pass.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Encoder-path forecast, T×C.
    pub f_trans: Tensor,
    /// Trend-path forecast, T×C (zeros when the linear path is ablated).
    pub f_lin: Tensor,
    /// w_trans·f_trans + w_lin·f_lin, T×C.
    pub combined: Tensor,
    /// Denormalized forecast of the selected output series, length T.
    pub final_forecast: Tensor,
}

struct BoundParams {
    revin: Option<RevInBound>,
    embed: Option<AffineBound>,
    blocks: Vec<EncoderBlockBound>,
    proj: AffineBound,
    linear: Option<AffineBound>,
    w_trans: TensorId,
    w_lin: Option<TensorId>,
    sum: Option<(TensorId, TensorId)>,
}

impl PvClient {
    /// Builds a model with freshly initialized parameters. Identical
    /// seed/config/flags always produce identical parameters.
    pub fn new(config: ModelConfig, flags: VariantFlags, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let token_width = if flags.add_embedding { config.embed_dim } else { config.l };

        let revin = flags.use_revin.then(|| RevInParams::new(config.c));
        let embed = flags
            .add_embedding
            .then(|| EmbedParams::new(config.l, config.embed_dim, &mut rng));
        let blocks = (0..config.num_blocks)
            .map(|_| {
                EncoderBlockParams::new(
                    flags.attention_kind,
                    config.c,
                    token_width,
                    config.d_model,
                    config.heads,
                    &mut rng,
                )
            })
            .collect();
        let proj = ProjectionParams::new(token_width, config.t, &mut rng);
        let linear = flags
            .use_linear
            .then(|| LinearTrendParams::new(config.l, config.t, &mut rng));
        let combine = CombineWeights {
            w_trans: Tensor::scalar(1.0).with_grad(),
            w_lin: flags.use_linear.then(|| Tensor::scalar(1.0).with_grad()),
        };
        let sum = (flags.output_mode == OutputMode::SumLearnable).then(|| SumWeights {
            w_pv: Tensor::scalar(SUM_FIXED_WEIGHT).with_grad(),
            w_rad: Tensor::scalar(SUM_FIXED_WEIGHT).with_grad(),
        });

        Ok(PvClient {
            config,
            flags,
            params: ModelParams {
                revin,
                embed,
                blocks,
                proj,
                linear,
                combine,
                sum,
            },
        })
    }

    /// Token width seen by the encoder stack and projection head.
    pub fn token_width(&self) -> usize {
        if self.flags.add_embedding {
            self.config.embed_dim
        } else {
            self.config.l
        }
    }

    /// Every learnable tensor with its canonical name, in a fixed order that
    /// construction, binding, optimization, and checkpointing all share.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(r) = &self.params.revin {
            out.push(("revin.alpha".to_string(), &r.alpha));
            out.push(("revin.beta".to_string(), &r.beta));
        }
        if let Some(e) = &self.params.embed {
            out.push(("embed.weight".to_string(), &e.weight));
            out.push(("embed.bias".to_string(), &e.bias));
        }
        for (i, b) in self.params.blocks.iter().enumerate() {
            let p = format!("block{i}");
            match &b.mixer {
                MixerParams::Attention(m) => {
                    for h in 0..m.heads {
                        out.push((format!("{p}.attn.wq{h}"), &m.wq[h]));
                        out.push((format!("{p}.attn.wk{h}"), &m.wk[h]));
                        out.push((format!("{p}.attn.wv{h}"), &m.wv[h]));
                    }
                    out.push((format!("{p}.attn.wo"), &m.wo));
                }
                MixerParams::Linear { w, b } => {
                    out.push((format!("{p}.mixer.weight"), w));
                    out.push((format!("{p}.mixer.bias"), b));
                }
                MixerParams::Mlp { w1, b1, w2, b2 } => {
                    out.push((format!("{p}.mixer.w1"), w1));
                    out.push((format!("{p}.mixer.b1"), b1));
                    out.push((format!("{p}.mixer.w2"), w2));
                    out.push((format!("{p}.mixer.b2"), b2));
                }
                MixerParams::None => {}
            }
            if let Some((g, bias)) = &b.ln1 {
                out.push((format!("{p}.ln1.gain"), g));
                out.push((format!("{p}.ln1.bias"), bias));
            }
            out.push((format!("{p}.ffn.w1"), &b.ffn.w1));
            out.push((format!("{p}.ffn.b1"), &b.ffn.b1));
            out.push((format!("{p}.ffn.w2"), &b.ffn.w2));
            out.push((format!("{p}.ffn.b2"), &b.ffn.b2));
            out.push((format!("{p}.ln2.gain"), &b.ln2.0));
            out.push((format!("{p}.ln2.bias"), &b.ln2.1));
        }
        out.push(("proj.weight".to_string(), &self.params.proj.weight));
        out.push(("proj.bias".to_string(), &self.params.proj.bias));
        if let Some(l) = &self.params.linear {
            out.push(("linear.weight".to_string(), &l.weight));
            out.push(("linear.bias".to_string(), &l.bias));
        }
        out.push(("combine.w_trans".to_string(), &self.params.combine.w_trans));
        if let Some(w) = &self.params.combine.w_lin {
            out.push(("combine.w_lin".to_string(), w));
        }
        if let Some(s) = &self.params.sum {
            out.push(("sum.w_pv".to_string(), &s.w_pv));
            out.push(("sum.w_rad".to_string(), &s.w_rad));
        }
        out
    }

    /// Mutable variant of [`named_params`](Self::named_params), same order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        if let Some(r) = &mut self.params.revin {
            out.push(("revin.alpha".to_string(), &mut r.alpha));
            out.push(("revin.beta".to_string(), &mut r.beta));
        }
        if let Some(e) = &mut self.params.embed {
            out.push(("embed.weight".to_string(), &mut e.weight));
            out.push(("embed.bias".to_string(), &mut e.bias));
        }
        for (i, b) in self.params.blocks.iter_mut().enumerate() {
            let p = format!("block{i}");
            match &mut b.mixer {
                MixerParams::Attention(m) => {
                    for (h, ((wq, wk), wv)) in
                        m.wq.iter_mut().zip(&mut m.wk).zip(&mut m.wv).enumerate()
                    {
                        out.push((format!("{p}.attn.wq{h}"), wq));
                        out.push((format!("{p}.attn.wk{h}"), wk));
                        out.push((format!("{p}.attn.wv{h}"), wv));
                    }
                    out.push((format!("{p}.attn.wo"), &mut m.wo));
                }
                MixerParams::Linear { w, b } => {
                    out.push((format!("{p}.mixer.weight"), w));
                    out.push((format!("{p}.mixer.bias"), b));
                }
                MixerParams::Mlp { w1, b1, w2, b2 } => {
                    out.push((format!("{p}.mixer.w1"), w1));
                    out.push((format!("{p}.mixer.b1"), b1));
                    out.push((format!("{p}.mixer.w2"), w2));
                    out.push((format!("{p}.mixer.b2"), b2));
                }
                MixerParams::None => {}
            }
            if let Some((g, bias)) = &mut b.ln1 {
                out.push((format!("{p}.ln1.gain"), g));
                out.push((format!("{p}.ln1.bias"), bias));
            }
            out.push((format!("{p}.ffn.w1"), &mut b.ffn.w1));
            out.push((format!("{p}.ffn.b1"), &mut b.ffn.b1));
            out.push((format!("{p}.ffn.w2"), &mut b.ffn.w2));
            out.push((format!("{p}.ffn.b2"), &mut b.ffn.b2));
            out.push((format!("{p}.ln2.gain"), &mut b.ln2.0));
            out.push((format!("{p}.ln2.bias"), &mut b.ln2.1));
        }
        out.push(("proj.weight".to_string(), &mut self.params.proj.weight));
        out.push(("proj.bias".to_string(), &mut self.params.proj.bias));
        if let Some(l) = &mut self.params.linear {
            out.push(("linear.weight".to_string(), &mut l.weight));
            out.push(("linear.bias".to_string(), &mut l.bias));
        }
        out.push((
            "combine.w_trans".to_string(),
            &mut self.params.combine.w_trans,
        ));
        if let Some(w) = &mut self.params.combine.w_lin {
            out.push(("combine.w_lin".to_string(), w));
        }
        if let Some(s) = &mut self.params.sum {
            out.push(("sum.w_pv".to_string(), &mut s.w_pv));
            out.push(("sum.w_rad".to_string(), &mut s.w_rad));
        }
        out
    }

    /// Total learnable scalar count.
    pub fn count_parameters(&self) -> usize {
        self.parameter_counts().iter().map(|(_, n)| n).sum()
    }

    /// Learnable scalar count itemized per submodule, computed in closed form
    /// from the configuration (not by walking the parameter records).
    pub fn parameter_counts(&self) -> Vec<(String, usize)> {
        let cfg = &self.config;
        let flags = &self.flags;
        let w = self.token_width();
        let mut items = Vec::new();
        if flags.use_revin {
            items.push(("revin".to_string(), 2 * cfg.c));
        }
        if flags.add_embedding {
            items.push(("embed".to_string(), cfg.l * cfg.embed_dim + cfg.embed_dim));
        }
        let mixer = match flags.attention_kind {
            // 3 heads·(W·d_head) projections plus the output projection is
            // 4·W·d_model once summed over heads.
            AttentionKind::Attention => 4 * w * cfg.d_model,
            AttentionKind::LinearMixer => cfg.c * cfg.c + cfg.c,
            AttentionKind::MlpMixer => 2 * cfg.d_model * cfg.c + cfg.d_model + cfg.c,
            AttentionKind::NoAttention => 0,
        };
        let ln1 = if flags.attention_kind == AttentionKind::NoAttention {
            0
        } else {
            2 * w
        };
        let ffn = 2 * w * cfg.d_model + cfg.d_model + w;
        let per_block = mixer + ln1 + ffn + 2 * w;
        items.push(("encoder".to_string(), cfg.num_blocks * per_block));
        items.push(("proj".to_string(), w * cfg.t + cfg.t));
        if flags.use_linear {
            items.push(("linear".to_string(), cfg.l * cfg.t + cfg.t));
        }
        items.push((
            "combine".to_string(),
            if flags.use_linear { 2 } else { 1 },
        ));
        if flags.output_mode == OutputMode::SumLearnable {
            items.push(("sum".to_string(), 2));
        }
        items
    }

    fn bind(&self, tape: &mut Tape) -> (BoundParams, Vec<(String, TensorId)>) {
        let mut named = Vec::new();
        let revin = self.params.revin.as_ref().map(|r| {
            let b = r.bind(tape);
            named.push(("revin.alpha".to_string(), b.alpha));
            named.push(("revin.beta".to_string(), b.beta));
            b
        });
        let embed = self.params.embed.as_ref().map(|e| {
            let b = e.bind(tape);
            named.push(("embed.weight".to_string(), b.weight));
            named.push(("embed.bias".to_string(), b.bias));
            b
        });
        let blocks: Vec<EncoderBlockBound> = self
            .params
            .blocks
            .iter()
            .enumerate()
            .map(|(i, blk)| {
                let p = format!("block{i}");
                let bb = blk.bind(tape);
                match &bb.mixer {
                    MixerBound::Attention(m) => {
                        for h in 0..m.wq.len() {
                            named.push((format!("{p}.attn.wq{h}"), m.wq[h]));
                            named.push((format!("{p}.attn.wk{h}"), m.wk[h]));
                            named.push((format!("{p}.attn.wv{h}"), m.wv[h]));
                        }
                        named.push((format!("{p}.attn.wo"), m.wo));
                    }
                    MixerBound::Linear { w, b } => {
                        named.push((format!("{p}.mixer.weight"), *w));
                        named.push((format!("{p}.mixer.bias"), *b));
                    }
                    MixerBound::Mlp { w1, b1, w2, b2 } => {
                        named.push((format!("{p}.mixer.w1"), *w1));
                        named.push((format!("{p}.mixer.b1"), *b1));
                        named.push((format!("{p}.mixer.w2"), *w2));
                        named.push((format!("{p}.mixer.b2"), *b2));
                    }
                    MixerBound::None => {}
                }
                if let Some((g, b)) = &bb.ln1 {
                    named.push((format!("{p}.ln1.gain"), *g));
                    named.push((format!("{p}.ln1.bias"), *b));
                }
                named.push((format!("{p}.ffn.w1"), bb.ffn.w1));
                named.push((format!("{p}.ffn.b1"), bb.ffn.b1));
                named.push((format!("{p}.ffn.w2"), bb.ffn.w2));
                named.push((format!("{p}.ffn.b2"), bb.ffn.b2));
                named.push((format!("{p}.ln2.gain"), bb.ln2.0));
                named.push((format!("{p}.ln2.bias"), bb.ln2.1));
                bb
            })
            .collect();
        let proj = self.params.proj.bind(tape);
        named.push(("proj.weight".to_string(), proj.weight));
        named.push(("proj.bias".to_string(), proj.bias));
        let linear = self.params.linear.as_ref().map(|l| {
            let b = l.bind(tape);
            named.push(("linear.weight".to_string(), b.weight));
            named.push(("linear.bias".to_string(), b.bias));
            b
        });
        let w_trans = tape.leaf(&self.params.combine.w_trans);
        named.push(("combine.w_trans".to_string(), w_trans));
        let w_lin = self.params.combine.w_lin.as_ref().map(|w| {
            let id = tape.leaf(w);
            named.push(("combine.w_lin".to_string(), id));
            id
        });
        let sum = self.params.sum.as_ref().map(|s| {
            let pv = tape.leaf(&s.w_pv);
            let rad = tape.leaf(&s.w_rad);
            named.push(("sum.w_pv".to_string(), pv));
            named.push(("sum.w_rad".to_string(), rad));
            (pv, rad)
        });
        (
            BoundParams {
                revin,
                embed,
                blocks,
                proj,
                linear,
                w_trans,
                w_lin,
                sum,
            },
            named,
        )
    }

    /// Runs the forward pipeline on `tape`. `h` is the raw L×C input window.
    pub fn forward_on_tape(&self, tape: &mut Tape, h: &Tensor) -> Result<ForwardPass> {
        if h.shape() != [self.config.l, self.config.c] {
            return Err(ModelError::InputShape {
                expected: (self.config.l, self.config.c),
                got: h.shape().to_vec(),
            });
        }
        let (bound, named) = self.bind(tape);
        self.forward_with(tape, &bound, named, h)
    }

    /// Binds the parameters once and runs every window in `hs` against the
    /// same leaves, so batch gradients accumulate into one set of nodes.
    /// Returns the per-window passes plus the shared parameter-leaf table.
    #[allow(clippy::type_complexity)]
    pub fn forward_batch_on_tape(
        &self,
        tape: &mut Tape,
        hs: &[Tensor],
    ) -> Result<(Vec<ForwardPass>, Vec<(String, TensorId)>)> {
        let (bound, named) = self.bind(tape);
        let passes = hs
            .iter()
            .map(|h| self.forward_with(tape, &bound, Vec::new(), h))
            .collect::<Result<Vec<_>>>()?;
        Ok((passes, named))
    }

    fn forward_with(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        named: Vec<(String, TensorId)>,
        h: &Tensor,
    ) -> Result<ForwardPass> {
        if h.shape() != [self.config.l, self.config.c] {
            return Err(ModelError::InputShape {
                expected: (self.config.l, self.config.c),
                got: h.shape().to_vec(),
            });
        }
        let h_id = tape.constant(h);

        // (a) Instance-normalize; statistics are cached for the inverse.
        let mut state = RevInState::new();
        let o = match (&bound.revin, &self.params.revin) {
            (Some(rb), Some(rp)) => {
                layers::revin_normalize(tape, h_id, rb, rp.eps, &mut state)?
            }
            _ => h_id,
        };

        // (b) One token per variable; optionally embedded to embed_dim.
        let mut tokens = tape.permute10(o)?;
        if let Some(eb) = &bound.embed {
            tokens = layers::embed_tokens(tape, tokens, eb)?;
        }

        // (c) Encoder stack.
        let mut attention = Vec::with_capacity(bound.blocks.len());
        for bb in &bound.blocks {
            let (next, attn) = layers::encoder_block(tape, tokens, bb)?;
            tokens = next;
            attention.push(attn);
        }

        // (d)(e) Both forecast paths, T×C in normalized space.
        let f_trans = layers::projection_head(tape, tokens, &bound.proj)?;
        let f_lin = match &bound.linear {
            Some(lb) => Some(layers::linear_trend(tape, o, lb)?),
            None => None,
        };

        // (f) Learnable combination.
        let trans_scaled = tape.mul(f_trans, bound.w_trans)?;
        let combined = match (f_lin, bound.w_lin) {
            (Some(fl), Some(wl)) => {
                let lin_scaled = tape.mul(fl, wl)?;
                tape.add(trans_scaled, lin_scaled)?
            }
            _ => trans_scaled,
        };

        // (g)(h) Output selection and per-channel denormalization.
        let cfg = &self.config;
        let revin_ctx = bound.revin.map(|rb| (rb, state));
        let denorm_col = |tape: &mut Tape, series: TensorId, ch: usize| -> Result<TensorId> {
            match &revin_ctx {
                Some((rb, st)) => Ok(layers::revin_denormalize(tape, series, rb, st, &[ch])?),
                None => Ok(series),
            }
        };
        let output = match self.flags.output_mode {
            OutputMode::PvDim => {
                let sel = tape.col(combined, cfg.target_channel)?;
                denorm_col(tape, sel, cfg.target_channel)?
            }
            OutputMode::RadiationDim => {
                let sel = tape.col(combined, cfg.radiation_channel)?;
                denorm_col(tape, sel, cfg.radiation_channel)?
            }
            OutputMode::SumFixed => {
                let pv = tape.col(combined, cfg.target_channel)?;
                let rad = tape.col(combined, cfg.radiation_channel)?;
                let pv_d = denorm_col(tape, pv, cfg.target_channel)?;
                let rad_d = denorm_col(tape, rad, cfg.radiation_channel)?;
                let pv_w = tape.scale(pv_d, SUM_FIXED_WEIGHT);
                let rad_w = tape.scale(rad_d, SUM_FIXED_WEIGHT);
                tape.add(pv_w, rad_w)?
            }
            OutputMode::SumLearnable => {
                let (w_pv, w_rad) = bound.sum.expect("SumLearnable binds sum weights");
                let pv = tape.col(combined, cfg.target_channel)?;
                let rad = tape.col(combined, cfg.radiation_channel)?;
                let pv_d = denorm_col(tape, pv, cfg.target_channel)?;
                let rad_d = denorm_col(tape, rad, cfg.radiation_channel)?;
                let pv_w = tape.mul(pv_d, w_pv)?;
                let rad_w = tape.mul(rad_d, w_rad)?;
                tape.add(pv_w, rad_w)?
            }
        };

        Ok(ForwardPass {
            output,
            combined,
            f_trans,
            f_lin,
            attention,
            named,
            w_trans: bound.w_trans,
            w_lin: bound.w_lin,
            revin: revin_ctx,
            sum: bound.sum,
        })
    }

    /// Convenience inference entry point: fresh tape, value snapshots.
    pub fn predict(&self, h: &Tensor) -> Result<Prediction> {
        let mut tape = Tape::new();
        let fp = self.forward_on_tape(&mut tape, h)?;
        let f_lin = match fp.f_lin {
            Some(id) => tape.tensor(id),
            None => Tensor::zeros(vec![self.config.t, self.config.c]),
        };
        Ok(Prediction {
            f_trans: tape.tensor(fp.f_trans),
            f_lin,
            combined: tape.tensor(fp.combined),
            final_forecast: tape.tensor(fp.output),
        })
    }

    /// Splits the forecast into the linear-trend contribution and the
    /// encoder ("detail") contribution, both in original units, such that
    /// trend + detail reproduces the final forecast. The denormalization
    /// constant (channel mean and shift terms) is carried by the trend.
    pub fn decompose(&self, h: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let fp = self.forward_on_tape(&mut tape, h)?;
        let (trend, detail) = self.decompose_on_tape(&mut tape, &fp)?;
        Ok((tape.tensor(trend), tape.tensor(detail)))
    }

    /// Tape-level decomposition; see [`decompose`](Self::decompose).
    pub fn decompose_on_tape(
        &self,
        tape: &mut Tape,
        fp: &ForwardPass,
    ) -> Result<(TensorId, TensorId)> {
        let cfg = &self.config;
        // Per output term: channel index and its weight in the final sum.
        enum Wgt {
            One,
            Const(f64),
            Param(TensorId),
        }
        let terms: Vec<(usize, Wgt)> = match self.flags.output_mode {
            OutputMode::PvDim => vec![(cfg.target_channel, Wgt::One)],
            OutputMode::RadiationDim => vec![(cfg.radiation_channel, Wgt::One)],
            OutputMode::SumFixed => vec![
                (cfg.target_channel, Wgt::Const(SUM_FIXED_WEIGHT)),
                (cfg.radiation_channel, Wgt::Const(SUM_FIXED_WEIGHT)),
            ],
            OutputMode::SumLearnable => {
                let (w_pv, w_rad) = fp.sum.expect("SumLearnable binds sum weights");
                vec![
                    (cfg.target_channel, Wgt::Param(w_pv)),
                    (cfg.radiation_channel, Wgt::Param(w_rad)),
                ]
            }
        };

        let ones_t = tape.constant(&Tensor::vector(vec![1.0; cfg.t]));
        let mut trend_total: Option<TensorId> = None;
        let mut detail_total: Option<TensorId> = None;
        for (ch, wgt) in terms {
            // Affine form of per-channel denormalization: x ↦ s·x + c with
            // s = σ/α and c = μ − β·σ/α; identity when RevIN is off.
            let scale_const = match &fp.revin {
                Some((rb, st)) => {
                    let stats = st.stats().expect("forward primed the statistics");
                    let sigma = tape.gather(stats.sigma, &[ch])?;
                    let alpha = tape.gather(rb.alpha, &[ch])?;
                    let mu = tape.gather(stats.mu, &[ch])?;
                    let beta = tape.gather(rb.beta, &[ch])?;
                    let s = tape.div(sigma, alpha)?;
                    let bs = tape.mul(beta, s)?;
                    let c = tape.sub(mu, bs)?;
                    Some((s, c))
                }
                None => None,
            };

            let mut trend = match (fp.f_lin, fp.w_lin) {
                (Some(fl), Some(wl)) => {
                    let col = tape.col(fl, ch)?;
                    let scaled = tape.mul(col, wl)?;
                    match scale_const {
                        Some((s, c)) => {
                            let st = tape.mul(scaled, s)?;
                            let ct = tape.mul(ones_t, c)?;
                            tape.add(st, ct)?
                        }
                        None => scaled,
                    }
                }
                // No linear path: the trend carries only the constant term.
                _ => match scale_const {
                    Some((_, c)) => tape.mul(ones_t, c)?,
                    None => tape.scale(ones_t, 0.0),
                },
            };
            let col = tape.col(fp.f_trans, ch)?;
            let mut detail = tape.mul(col, fp.w_trans)?;
            if let Some((s, _)) = scale_const {
                detail = tape.mul(detail, s)?;
            }
            match wgt {
                Wgt::One => {}
                Wgt::Const(k) => {
                    trend = tape.scale(trend, k);
                    detail = tape.scale(detail, k);
                }
                Wgt::Param(p) => {
                    trend = tape.mul(trend, p)?;
                    detail = tape.mul(detail, p)?;
                }
            }
            trend_total = Some(match trend_total {
                Some(acc) => tape.add(acc, trend)?,
                None => trend,
            });
            detail_total = Some(match detail_total {
                Some(acc) => tape.add(acc, detail)?,
                None => detail,
            });
        }
        Ok((
            trend_total.expect("at least one output term"),
            detail_total.expect("at least one output term"),
        ))
    }
}
