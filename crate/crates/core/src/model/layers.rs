//! Building blocks composed from differentiable tensor ops.

use candle_core::{DType, Device, Module, Result, Tensor, D};
use candle_nn::rnn::{LSTMConfig, LSTM, RNN};
use candle_nn::{Init, VarBuilder};

/// Affine layer over the last dimension, computed as one 2-D matmul on a
/// contiguous copy of the input. The batched-matmul path candle takes for
/// strided 3-D inputs yields wrong weight gradients, and is slower.
pub struct Linear(candle_nn::Linear);

pub fn linear(input: usize, output: usize, vb: VarBuilder) -> Result<Linear> {
    Ok(Linear(candle_nn::linear(input, output, vb)?))
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let Some((&input, lead)) = dims.split_last() else {
            candle_core::bail!("linear layer on a scalar");
        };
        let rows = lead.iter().product::<usize>();
        let y = x.contiguous()?.reshape((rows, input))?.matmul(&self.0.weight().t()?)?;
        let y = match self.0.bias() {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out = lead.to_vec();
        out.push(y.dim(1)?);
        y.reshape(out)
    }
}

pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(LayerNorm {
            gamma: vb.get_with_hints(dim, "gamma", Init::Const(1.0))?,
            beta: vb.get_with_hints(dim, "beta", Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centred = x.broadcast_sub(&mean)?;
        let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centred.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)
    }
}

/// Two independent LSTMs over the sequence and its reverse, concatenated.
pub struct BiLstm {
    fw: LSTM,
    bw: LSTM,
}

impl BiLstm {
    pub fn new(input: usize, hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(BiLstm {
            fw: candle_nn::lstm(input, hidden, LSTMConfig::default(), vb.pp("fw"))?,
            bw: candle_nn::lstm(input, hidden, LSTMConfig::default(), vb.pp("bw"))?,
        })
    }

    /// `(B, T, F)` to `(B, T, 2H)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let t = x.dim(1)?;
        let fw = self.fw.states_to_tensor(&self.fw.seq(x)?)?;
        let rev = Tensor::from_vec((0..t as u32).rev().collect::<Vec<_>>(), t, x.device())?;
        let xr = x.index_select(&rev, 1)?;
        let bw = self.bw.states_to_tensor(&self.bw.seq(&xr)?)?.index_select(&rev, 1)?;
        Tensor::cat(&[fw, bw], 2)
    }
}

pub struct SelfAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(d: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(SelfAttention {
            qkv: linear(d, 3 * d, vb.pp("qkv"))?,
            out: linear(d, d, vb.pp("out"))?,
            heads,
        })
    }

    /// `mask` is added to the `(T, T)` attention scores.
    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let dh = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, t, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        let scores = match mask {
            Some(m) => scores.broadcast_add(m)?,
            None => scores,
        };
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let o = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, t, d))?;
        self.out.forward(&o)
    }

    /// Causal attention for `x` appended after the positions already in
    /// `cache`; the new keys and values are added to the cache.
    pub fn forward_cached(&self, x: &Tensor, cache: &mut KvCache) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let dh = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, t, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let (k, v) = match cache.take() {
            Some((k0, v0)) => (
                Tensor::cat(&[&k0, &qkv.get(1)?.contiguous()?], 2)?,
                Tensor::cat(&[&v0, &qkv.get(2)?.contiguous()?], 2)?,
            ),
            None => (qkv.get(1)?.contiguous()?, qkv.get(2)?.contiguous()?),
        };
        let total = k.dim(2)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        let scores = if t > 1 {
            let past = total - t;
            let v: Vec<f64> = (0..t)
                .flat_map(|i| (0..total).map(move |j| if j > past + i { -1e9 } else { 0.0 }))
                .collect();
            let mask = Tensor::from_vec(v, (t, total), x.device())?.to_dtype(x.dtype())?;
            scores.broadcast_add(&mask)?
        } else {
            scores
        };
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let o = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, t, d))?;
        *cache = Some((k, v));
        self.out.forward(&o)
    }
}

/// Keys and values `(B, heads, T, d / heads)` of the positions seen so far.
pub type KvCache = Option<(Tensor, Tensor)>;

/// Pre-norm transformer block.
pub struct Block {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl Block {
    pub fn new(d: usize, heads: usize, ffn: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::new(d, vb.pp("ln1"))?,
            attn: SelfAttention::new(d, heads, vb.pp("attn"))?,
            ln2: LayerNorm::new(d, vb.pp("ln2"))?,
            ff1: linear(d, ffn, vb.pp("ff1"))?,
            ff2: linear(ffn, d, vb.pp("ff2"))?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let h = (x + self.attn.forward(&self.ln1.forward(x)?, mask)?)?;
        let f = self.ff2.forward(&self.ff1.forward(&self.ln2.forward(&h)?)?.gelu_erf()?)?;
        h + f
    }

    /// Causal forward pass for positions following those in `cache`.
    pub fn forward_cached(&self, x: &Tensor, cache: &mut KvCache) -> Result<Tensor> {
        let h = (x + self.attn.forward_cached(&self.ln1.forward(x)?, cache)?)?;
        let f = self.ff2.forward(&self.ff1.forward(&self.ln2.forward(&h)?)?.gelu_erf()?)?;
        h + f
    }
}

/// Two-layer perceptron for the profile vector.
pub struct Dnn {
    l1: Linear,
    l2: Linear,
}

impl Dnn {
    pub fn new(input: usize, hidden: usize, out: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Dnn {
            l1: linear(input, hidden, vb.pp("l1"))?,
            l2: linear(hidden, out, vb.pp("l2"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.l2.forward(&self.l1.forward(x)?.gelu_erf()?)
    }
}

/// Stacked unidirectional LSTMs.
pub struct LstmStack {
    layers: Vec<LSTM>,
}

impl LstmStack {
    pub fn new(d: usize, layers: usize, vb: VarBuilder) -> Result<Self> {
        let layers = (0..layers)
            .map(|i| candle_nn::lstm(d, d, LSTMConfig::default(), vb.pp(i)))
            .collect::<Result<_>>()?;
        Ok(LstmStack { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.states_to_tensor(&l.seq(&h)?)?;
        }
        Ok(h)
    }
}

/// Causal 1-D convolution over time followed by a per-slot dense layer.
///
/// The convolution is an unfold plus matmul; candle's conv1d backward pass
/// returns wrong gradients here.
pub struct ConvHead {
    weight: Tensor,
    bias: Tensor,
    dense: Linear,
    kernel: usize,
}

impl ConvHead {
    pub fn new(d: usize, channels: usize, kernel: usize, vb: VarBuilder) -> Result<Self> {
        let vbc = vb.pp("conv");
        let bound = 1.0 / ((d * kernel) as f64).sqrt();
        Ok(ConvHead {
            weight: vbc.get_with_hints((channels, d, kernel), "weight", Init::Uniform { lo: -bound, up: bound })?,
            bias: vbc.get_with_hints(channels, "bias", Init::Const(0.0))?,
            dense: linear(channels, 1, vb.pp("dense"))?,
            kernel,
        })
    }

    /// `(B, T, d)` to `(B, T)`; output `t` depends only on inputs `<= t`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let k = self.kernel;
        let xp = x.pad_with_zeros(1, k - 1, 0)?;
        let taps = (0..k).map(|j| xp.narrow(1, j, t)).collect::<Result<Vec<_>>>()?;
        // (B, T, d, k) flattened so column c * k + j matches weight[o, c, j]
        let cols = Tensor::stack(&taps, 3)?.reshape((b * t, d * k))?;
        let out = self.weight.dims3()?.0;
        let w = self.weight.reshape((out, d * k))?.t()?.contiguous()?;
        let h = cols.matmul(&w)?.broadcast_add(&self.bias)?.gelu_erf()?.reshape((b, t, out))?;
        self.dense.forward(&h)?.squeeze(2)
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }
}

/// `(T, T)` additive mask hiding later positions.
pub fn causal_mask(t: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let v: Vec<f64> = (0..t)
        .flat_map(|i| (0..t).map(move |j| if j > i { -1e9 } else { 0.0 }))
        .collect();
    Tensor::from_vec(v, (t, t), device)?.to_dtype(dtype)
}

/// Fixed sinusoidal position table `(len, d)`.
pub fn sinusoidal(len: usize, d: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let v: Vec<f64> = (0..len)
        .flat_map(|p| {
            (0..d).map(move |i| {
                let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                let a = p as f64 * rate;
                if i % 2 == 0 {
                    a.sin()
                } else {
                    a.cos()
                }
            })
        })
        .collect();
    Tensor::from_vec(v, (len, d), device)?.to_dtype(dtype)
}
