use candle_core::{DType, Device, Module, Result, Tensor};
use candle_nn::{Init, VarBuilder};

use super::config::{DecoderKind, ModelConfig};
use super::layers::{causal_mask, linear, sinusoidal, BiLstm, Block, ConvHead, Dnn, KvCache, LayerNorm, Linear, LstmStack};
use crate::pipeline::BASAL_HISTORY_SLOTS;

enum Decoder {
    Transformer(Vec<Block>),
    Lstm(LstmStack),
}

/// Profile DNN, basal and temporal BiLSTMs, fusion transformer, decoder and
/// convolutional head.
///
/// Variable prefixes: `profile.`, `basal.`, `temporal.`, `fusion.`,
/// `decoder.`, `head.conv.`, `head.dense.`.
pub struct GlycemicNet {
    config: ModelConfig,
    profile: Option<Dnn>,
    basal: Option<(BiLstm, Linear)>,
    temporal: BiLstm,
    temporal_proj: Linear,
    type_emb: Tensor,
    fusion: Vec<Block>,
    fusion_ln: LayerNorm,
    dec_in: Linear,
    decoder: Decoder,
    dec_ln: LayerNorm,
    head: ConvHead,
    positions: Tensor,
    dtype: DType,
    device: Device,
}

impl GlycemicNet {
    pub fn new(config: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        let d = config.d_model;
        let c = config.temporal_channels().len();
        let profile = if config.feature_group.has_profile_branch() {
            Some(Dnn::new(config.profile_width(), config.profile_hidden, d, vb.pp("profile"))?)
        } else {
            None
        };
        let basal = if config.uses_basal() {
            let vbb = vb.pp("basal");
            Some((
                BiLstm::new(1, config.basal_hidden, vbb.pp("lstm"))?,
                linear(2 * config.basal_hidden, d, vbb.pp("proj"))?,
            ))
        } else {
            None
        };
        let vbt = vb.pp("temporal");
        let temporal = BiLstm::new(c, config.temporal_hidden, vbt.pp("lstm"))?;
        let temporal_proj = linear(2 * config.temporal_hidden, d, vbt.pp("proj"))?;
        let vbf = vb.pp("fusion");
        let type_emb = vbf.get_with_hints((3, d), "type_emb", Init::Randn { mean: 0.0, stdev: 0.02 })?;
        let fusion = (0..config.fusion_layers)
            .map(|i| Block::new(d, config.heads, config.ffn_dim, vbf.pp(i)))
            .collect::<Result<_>>()?;
        let fusion_ln = LayerNorm::new(d, vbf.pp("ln"))?;
        let vbd = vb.pp("decoder");
        let dec_in = linear(d + 1, d, vbd.pp("input"))?;
        let decoder = match config.decoder_kind {
            DecoderKind::Transformer => Decoder::Transformer(
                (0..config.decoder_layers)
                    .map(|i| Block::new(d, config.heads, config.ffn_dim, vbd.pp(i)))
                    .collect::<Result<_>>()?,
            ),
            DecoderKind::Lstm => Decoder::Lstm(LstmStack::new(d, config.decoder_layers, vbd.pp("lstm"))?),
        };
        let dec_ln = LayerNorm::new(d, vbd.pp("ln"))?;
        let head = ConvHead::new(d, config.head_channels, config.head_kernel, vb.pp("head"))?;
        let positions = sinusoidal(config.window(), d, vb.dtype(), vb.device())?;
        Ok(GlycemicNet {
            config: config.clone(),
            profile,
            basal,
            temporal,
            temporal_proj,
            type_emb,
            fusion,
            fusion_ln,
            dec_in,
            decoder,
            dec_ln,
            head,
            positions,
            dtype: vb.dtype(),
            device: vb.device().clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `(B, m, C)` to `(B, m, 2 * temporal_hidden)`.
    pub fn encode_temporal(&self, temporal: &Tensor) -> Result<Tensor> {
        let (_, m, c) = temporal.dims3()?;
        let want = self.config.temporal_channels().len();
        if m != self.config.window() || c != want {
            candle_core::bail!("temporal bundle ({m}, {c}) does not match ({}, {want})", self.config.window());
        }
        self.temporal.forward(temporal)
    }

    /// `(B, P)` to `(B, d)`; `None` when the feature group has no profile.
    pub fn encode_profile(&self, profile: &Tensor) -> Result<Option<Tensor>> {
        match &self.profile {
            Some(dnn) => {
                let (_, p) = profile.dims2()?;
                if p != self.config.profile_width() {
                    candle_core::bail!("profile width {p} does not match {}", self.config.profile_width());
                }
                Ok(Some(dnn.forward(profile)?))
            }
            None => Ok(None),
        }
    }

    /// `(B, 96, 1)` to `(B, 96, 2 * basal_hidden)`.
    pub fn encode_basal(&self, basal: &Tensor) -> Result<Option<Tensor>> {
        match &self.basal {
            Some((lstm, _)) => {
                let (_, t, f) = basal.dims3()?;
                if t != BASAL_HISTORY_SLOTS || f != 1 {
                    candle_core::bail!("basal history ({t}, {f}) does not match ({BASAL_HISTORY_SLOTS}, 1)");
                }
                Ok(Some(lstm.forward(basal)?))
            }
            None => Ok(None),
        }
    }

    /// Transformer fusion over `[profile, basal x 96, temporal x m]` tokens.
    /// Returns the per-slot context `(B, m, d)` at the temporal positions.
    pub fn fuse(&self, profile_latent: Option<&Tensor>, basal_features: Option<&Tensor>, temporal_features: &Tensor) -> Result<Tensor> {
        if profile_latent.is_some() != self.profile.is_some() || basal_features.is_some() != self.basal.is_some() {
            candle_core::bail!("branch inputs do not match the feature group");
        }
        let m = temporal_features.dim(1)?;
        let b = temporal_features.dim(0)?;
        let mut tokens = Vec::new();
        if let Some(p) = profile_latent {
            tokens.push(p.unsqueeze(1)?.broadcast_add(&self.type_emb.get(0)?)?);
        }
        if let (Some(bf), Some((_, proj))) = (basal_features, &self.basal) {
            if bf.dim(0)? != b {
                candle_core::bail!("basal batch {} does not match temporal batch {b}", bf.dim(0)?);
            }
            tokens.push(proj.forward(bf)?.broadcast_add(&self.type_emb.get(1)?)?);
        }
        tokens.push(
            self.temporal_proj
                .forward(temporal_features)?
                .broadcast_add(&self.type_emb.get(2)?)?,
        );
        let mut x = Tensor::cat(&tokens, 1)?;
        for block in &self.fusion {
            x = block.forward(&x, None)?;
        }
        let total = x.dim(1)?;
        self.fusion_ln.forward(&x)?.narrow(1, total - m, m)
    }

    /// Context for a full input bundle.
    pub fn context(&self, temporal: &Tensor, basal: Option<&Tensor>, profile: Option<&Tensor>) -> Result<Tensor> {
        let tf = self.encode_temporal(temporal)?;
        let bf = match basal {
            Some(b) => self.encode_basal(b)?,
            None => None,
        };
        let pl = match profile {
            Some(p) => self.encode_profile(p)?,
            None => None,
        };
        self.fuse(pl.as_ref(), bf.as_ref(), &tf)
    }

    /// One-step-ahead predictions for a series prefix `y` of length `T < m`.
    ///
    /// Position `j` sees context slot `j + 1` and `y[..=j]` and predicts
    /// `y[j + 1]`. Output is `(B, T)`.
    pub fn decode_step_outputs(&self, context: &Tensor, y: &Tensor) -> Result<Tensor> {
        let t = y.dim(1)?;
        let ctx = context.narrow(1, 1, t)?;
        let inp = Tensor::cat(&[ctx, y.unsqueeze(2)?], 2)?;
        let mut h = self.dec_in.forward(&inp)?;
        h = match &self.decoder {
            Decoder::Transformer(blocks) => {
                let mut h = h.broadcast_add(&self.positions.narrow(0, 0, t)?)?;
                let mask = causal_mask(t, self.dtype, &self.device)?;
                for block in blocks {
                    h = block.forward(&h, Some(&mask))?;
                }
                h
            }
            Decoder::Lstm(stack) => {
                h = stack.forward(&h)?;
                h
            }
        };
        self.head.forward(&self.dec_ln.forward(&h)?)
    }

    /// Teacher-forced predictions for the future slots: `(B, n)` history and
    /// `(B, m - n)` known future give `(B, m - n)` predictions.
    pub fn teacher_forced(&self, context: &Tensor, history: &Tensor, future: &Tensor) -> Result<Tensor> {
        let n = self.config.history_len;
        let f = self.config.future_len;
        let full = Tensor::cat(&[history, future], 1)?;
        let y = full.narrow(1, 0, n + f - 1)?;
        self.decode_step_outputs(context, &y)?.narrow(1, n - 1, f)
    }

    /// Autoregressive decoding of `m - n` values. Each generated value is
    /// clamped to `bounds` (normalized units) and appended to the history.
    pub fn generate(&self, context: &Tensor, history: &Tensor, bounds: (Option<f64>, Option<f64>)) -> Result<Tensor> {
        let n = history.dim(1)?;
        if n != self.config.history_len {
            candle_core::bail!("history of {n} slots, expected {}", self.config.history_len);
        }
        if let Decoder::Transformer(blocks) = &self.decoder {
            return self.generate_cached(blocks, context, history, bounds);
        }
        let mut y = history.clone();
        let mut outs = Vec::with_capacity(self.config.future_len);
        for step in 0..self.config.future_len {
            let t = n + step;
            let pred = self.decode_step_outputs(context, &y)?.narrow(1, t - 1, 1)?;
            let pred = match bounds {
                (Some(lo), Some(hi)) => pred.clamp(lo, hi)?,
                (Some(lo), None) => pred.maximum(lo)?,
                (None, Some(hi)) => pred.minimum(hi)?,
                (None, None) => pred,
            };
            y = Tensor::cat(&[&y, &pred], 1)?;
            outs.push(pred);
        }
        Tensor::cat(&outs, 1)
    }

    /// [`Self::generate`] for the transformer decoder with cached keys and
    /// values: each step runs the decoder on the newest position only.
    fn generate_cached(
        &self,
        blocks: &[Block],
        context: &Tensor,
        history: &Tensor,
        bounds: (Option<f64>, Option<f64>),
    ) -> Result<Tensor> {
        let n = history.dim(1)?;
        let k = self.head.kernel();
        let mut caches: Vec<KvCache> = vec![None; blocks.len()];
        let mut normed: Option<Tensor> = None;
        let mut token = history.clone();
        let mut pos = 0;
        let mut outs = Vec::with_capacity(self.config.future_len);
        for step in 0..self.config.future_len {
            let t = token.dim(1)?;
            let ctx = context.narrow(1, pos + 1, t)?;
            let inp = Tensor::cat(&[ctx, token.unsqueeze(2)?], 2)?;
            let mut h = self
                .dec_in
                .forward(&inp)?
                .broadcast_add(&self.positions.narrow(0, pos, t)?)?;
            for (block, cache) in blocks.iter().zip(caches.iter_mut()) {
                h = block.forward_cached(&h, cache)?;
            }
            let h = self.dec_ln.forward(&h)?;
            let all = match normed.take() {
                Some(prev) => Tensor::cat(&[&prev, &h], 1)?,
                None => h,
            };
            let len = all.dim(1)?;
            // the causal head only needs the last `k` rows for its last output
            let tail = all.narrow(1, len.saturating_sub(k), len.min(k))?;
            normed = Some(tail.clone());
            let width = tail.dim(1)?;
            let pred = self.head.forward(&tail)?.narrow(1, width - 1, 1)?;
            let pred = match bounds {
                (Some(lo), Some(hi)) => pred.clamp(lo, hi)?,
                (Some(lo), None) => pred.maximum(lo)?,
                (None, Some(hi)) => pred.minimum(hi)?,
                (None, None) => pred,
            };
            pos += t;
            debug_assert_eq!(pos, n + step);
            token = pred.clone();
            outs.push(pred);
        }
        Tensor::cat(&outs, 1)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }
}
