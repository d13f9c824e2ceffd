//! Token embeddings and the stack of skippable pre-norm transformer layers.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::params::{fan_in_param, const_param, normal_param, param_tree, zero_param};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Shape of the layer stack and its token streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    /// Number of layers, K.
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub n_img: usize,
    pub n_text: usize,
    pub vocab: usize,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig { layers: 8, width: 64, heads: 4, n_img: 16, n_text: 8, vocab: 32 }
    }
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::Config(format!("need at least 2 layers, got {}", self.layers)));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide width {}",
                self.heads, self.width
            )));
        }
        if self.n_img == 0 || self.n_text == 0 || self.vocab == 0 {
            return Err(Error::Config("token counts and vocabulary must be positive".into()));
        }
        Ok(())
    }

    /// Sequence length including the trailing cognition token.
    pub fn seq_len(&self) -> usize {
        self.n_img + self.n_text + 1
    }
}

/// One transformer block: attention projections, a 4x feedforward and two
/// layer norms.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

param_tree!(LayerParams { wq, wk, wv, wo, w_up, w_down, ln1_gain, ln1_bias, ln2_gain, ln2_bias });

impl LayerParams {
    /// Output projections start at zero, so a fresh block is the identity map.
    pub fn init(width: usize, rng: &mut Rng) -> LayerParams {
        LayerParams {
            wq: fan_in_param(rng, &[width, width]),
            wk: fan_in_param(rng, &[width, width]),
            wv: fan_in_param(rng, &[width, width]),
            wo: zero_param(&[width, width]),
            w_up: fan_in_param(rng, &[width, 4 * width]),
            w_down: zero_param(&[4 * width, width]),
            ln1_gain: const_param(&[width], 1.0),
            ln1_bias: zero_param(&[width]),
            ln2_gain: const_param(&[width], 1.0),
            ln2_bias: zero_param(&[width]),
        }
    }

    pub fn width(&self) -> usize {
        self.wq.shape()[0]
    }
}

/// Multi-head self-attention over `x: [b, n, d]`.
pub fn self_attention(x: &Tensor, layer: &LayerParams, heads: usize) -> Result<Tensor> {
    contract!(x.rank() == 3, "attention input must be [b, n, d], got {:?}", x.shape());
    let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    contract!(d % heads == 0, "{heads} heads do not divide width {d}");
    let dh = d / heads;
    let split = |t: Tensor| -> Result<Tensor> { t.reshape(&[b, n, heads, dh])?.permute(&[0, 2, 1, 3]) };
    let q = split(x.matmul(&layer.wq)?)?;
    let k = split(x.matmul(&layer.wk)?)?;
    let v = split(x.matmul(&layer.wv)?)?;
    let scores = q.matmul(&k.transpose_last2()?)?.scale(1.0 / (dh as f64).sqrt());
    let attn = scores.softmax(3)?;
    let ctx = attn.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, n, d])?;
    ctx.matmul(&layer.wo)
}

/// Pre-norm residual block: `h + Attn(LN(h))`, then `+ FFN(LN(·))`.
pub fn layer_forward(h: &Tensor, layer: &LayerParams, heads: usize) -> Result<Tensor> {
    contract!(
        h.rank() == 3 && h.shape()[2] == layer.width(),
        "layer input {:?} does not match layer width {}",
        h.shape(),
        layer.width()
    );
    let a = self_attention(&h.layer_norm(&layer.ln1_gain, &layer.ln1_bias)?, layer, heads)?;
    let h = h.add(&a)?;
    let f = h
        .layer_norm(&layer.ln2_gain, &layer.ln2_bias)?
        .matmul(&layer.w_up)?
        .gelu()
        .matmul(&layer.w_down)?;
    h.add(&f)
}

/// The K layers plus the shared final layer norm.
#[derive(Debug, Clone)]
pub struct LayerStack {
    pub layers: Vec<LayerParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
}

param_tree!(LayerStack { layers, final_gain, final_bias });

impl LayerStack {
    pub fn init(config: &StackConfig, rng: &mut Rng) -> LayerStack {
        LayerStack {
            layers: (0..config.layers).map(|_| LayerParams::init(config.width, rng)).collect(),
            final_gain: const_param(&[config.width], 1.0),
            final_bias: zero_param(&[config.width]),
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn final_norm(&self, h: &Tensor) -> Result<Tensor> {
        h.layer_norm(&self.final_gain, &self.final_bias)
    }

    /// Every layer in order, then the final norm, on the whole batch at once.
    pub fn forward(&self, h0: &Tensor, heads: usize) -> Result<Tensor> {
        let mut h = h0.clone();
        for layer in &self.layers {
            h = layer_forward(&h, layer, heads)?;
        }
        self.final_norm(&h)
    }
}

/// Token and position tables.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub tokens: Tensor,
    pub positions: Tensor,
}

param_tree!(Embeddings { tokens, positions });

impl Embeddings {
    pub fn init(config: &StackConfig, rng: &mut Rng) -> Embeddings {
        Embeddings {
            tokens: normal_param(rng, &[config.vocab, config.width]),
            positions: normal_param(rng, &[config.n_img + config.n_text, config.width]),
        }
    }

    /// Embeds observation and instruction tokens and appends the cognition
    /// vector as the last position, giving `[b, n_img + n_text + 1, d]`.
    pub fn embed(&self, image: &[Vec<usize>], text: &[Vec<usize>], cognition: &Tensor) -> Result<Tensor> {
        let d = self.tokens.shape()[1];
        let n = self.positions.shape()[0];
        contract!(image.len() == text.len() && !image.is_empty(), "image/text batch sizes differ or are empty");
        contract!(cognition.numel() == d, "cognition vector has {} values, width is {d}", cognition.numel());
        let b = image.len();
        let mut ids = Vec::with_capacity(b * n);
        for (img, txt) in image.iter().zip(text) {
            if img.len() + txt.len() != n {
                return Err(Error::Input(format!(
                    "sample has {} image + {} text tokens, expected {n} in total",
                    img.len(),
                    txt.len()
                )));
            }
            ids.extend_from_slice(img);
            ids.extend_from_slice(txt);
        }
        let tok = Tensor::gather_rows(&self.tokens, &ids)?.reshape(&[b, n, d])?;
        let pos = self.positions.unsqueeze(0)?.expand(0, b)?;
        let cog = cognition.reshape(&[1, 1, d])?.expand(0, b)?;
        Tensor::concat(&[tok.add(&pos)?, cog], 1)
    }
}
