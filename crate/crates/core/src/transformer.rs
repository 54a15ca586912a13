//! Self-attention encoder: stacked blocks of multi-head attention and a
//! position-wise feed-forward network, each followed by a residual add and
//! layer normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Init, Linear};
use crate::tensor::{Graph, ParamId, Tensor, Var};

/// Tag applied to every attention weight matrix during a forward.
pub const ATTENTION_TAG: &str = "attention";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionalMode {
    None,
    #[default]
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    /// Inner width of the feed-forward network.
    pub ffn_dim: usize,
    pub dropout: f64,
    pub positional: PositionalMode,
    /// Restrict each window to attend to itself and earlier windows.
    pub causal: bool,
}

impl TransformerConfig {
    pub fn new(d_model: usize) -> Self {
        TransformerConfig {
            d_model,
            n_heads: 8,
            n_blocks: 6,
            ffn_dim: 4 * d_model,
            dropout: 0.1,
            positional: PositionalMode::Sinusoidal,
            causal: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model width {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.positional == PositionalMode::Sinusoidal && self.d_model % 2 != 0 {
            return Err(Error::Config(format!(
                "sinusoidal positions need an even width, got {}",
                self.d_model
            )));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub heads: Vec<HeadParams>,
    pub wo: ParamId,
    pub norm1: (ParamId, ParamId),
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: TransformerConfig,
    pub blocks: Vec<BlockParams>,
}

/// Sinusoid table: `PE[t, 2i] = sin(t / 10000^(2i/d))`, `PE[t, 2i+1] = cos(...)`.
pub fn positional_encoding(n: usize, d_model: usize) -> Result<Tensor> {
    if d_model % 2 != 0 {
        return Err(Error::Config(format!("positional encoding needs an even width, got {d_model}")));
    }
    let mut data = vec![0.0; n * d_model];
    for t in 0..n {
        for i in 0..d_model / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[t * d_model + 2 * i] = angle.sin();
            data[t * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![n, d_model], data)
}

/// `Softmax(Q Kᵀ / sqrt(d_k)) V` with `Q = X W_Q`, `K = X W_K`, `V = X W_V`.
///
/// Returns the head output and the row-stochastic attention matrix.
pub fn attention_single_head(
    g: &mut Graph<'_>,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    causal: bool,
) -> Result<(Var, Var)> {
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let d_k = g.shape(q)[1];
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    if causal {
        let n = g.shape(scores)[0];
        let mut mask = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in i + 1..n {
                mask.data_mut()[i * n + j] = -1e9;
            }
        }
        let m = g.constant(mask);
        scores = g.add(scores, m)?;
    }
    let weights = g.softmax_last(scores)?;
    g.tag(ATTENTION_TAG, weights);
    Ok((g.matmul(weights, v)?, weights))
}

impl Encoder {
    pub fn new(init: &mut Init<'_>, name: &str, config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        let (d, dk) = (config.d_model, config.d_k());
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for b in 0..config.n_blocks {
            let p = format!("{name}.block{b}");
            let heads = (0..config.n_heads)
                .map(|h| {
                    Ok(HeadParams {
                        wq: init.weight(&format!("{p}.head{h}.wq"), &[d, dk], d)?,
                        wk: init.weight(&format!("{p}.head{h}.wk"), &[d, dk], d)?,
                        wv: init.weight(&format!("{p}.head{h}.wv"), &[d, dk], d)?,
                    })
                })
                .collect::<Result<_>>()?;
            blocks.push(BlockParams {
                heads,
                wo: init.weight(&format!("{p}.wo"), &[d, d], d)?,
                norm1: (init.ones(&format!("{p}.norm1.gain"), &[d])?, init.zeros(&format!("{p}.norm1.bias"), &[d])?),
                ffn_in: init.linear(&format!("{p}.ffn.0"), d, config.ffn_dim)?,
                ffn_out: init.linear(&format!("{p}.ffn.1"), config.ffn_dim, d)?,
                norm2: (init.ones(&format!("{p}.norm2.gain"), &[d])?, init.zeros(&format!("{p}.norm2.bias"), &[d])?),
            });
        }
        Ok(Encoder { config, blocks })
    }

    /// Concatenated head outputs multiplied by `W_O`.
    pub fn multi_head(&self, g: &mut Graph<'_>, block: usize, x: Var) -> Result<Var> {
        let bp = &self.blocks[block];
        let mut outs = Vec::with_capacity(bp.heads.len());
        for h in &bp.heads {
            let (wq, wk, wv) = (g.param(h.wq), g.param(h.wk), g.param(h.wv));
            outs.push(attention_single_head(g, x, wq, wk, wv, self.config.causal)?.0);
        }
        let cat = g.concat(&outs, 1)?;
        let wo = g.param(bp.wo);
        g.matmul(cat, wo)
    }

    /// Two linear maps with a ReLU between them.
    pub fn feed_forward(&self, g: &mut Graph<'_>, block: usize, x: Var) -> Result<Var> {
        let bp = &self.blocks[block];
        let h = bp.ffn_in.forward(g, x)?;
        let h = g.relu(h);
        bp.ffn_out.forward(g, h)
    }

    /// Encodes an `n × d_model` sequence.
    pub fn encode(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.config.d_model {
            return Err(Error::shape("encode", &shape, &[self.config.d_model]));
        }
        let p = self.config.dropout;
        let mut x = x;
        if self.config.positional == PositionalMode::Sinusoidal {
            let pe = g.constant(positional_encoding(shape[0], self.config.d_model)?);
            x = g.add(x, pe)?;
        }
        for b in 0..self.blocks.len() {
            let bp = &self.blocks[b];
            let att = self.multi_head(g, b, x)?;
            let res = g.add(x, att)?;
            let (g1, b1) = (g.param(bp.norm1.0), g.param(bp.norm1.1));
            let h = g.layer_norm(res, g1, b1)?;

            let ffn_in = g.dropout(h, p);
            let f = self.feed_forward(g, b, ffn_in)?;
            let f = g.dropout(f, p);
            let res = g.add(h, f)?;
            let (g2, b2) = (g.param(bp.norm2.0), g.param(bp.norm2.1));
            x = g.layer_norm(res, g2, b2)?;
            if b + 1 < self.blocks.len() {
                x = g.dropout(x, p);
            }
        }
        Ok(x)
    }
}
