//! Window embedding: temporal convolution, max-pool over time, and a gated
//! highway mixing a projection with its skip path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Init, Linear};
use crate::tensor::{Graph, ParamId, Var};
use crate::Modality;

/// Nonlinearity producing the highway gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    /// Softmax across the feature dimension.
    #[default]
    Softmax,
    /// Componentwise logistic gate.
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderConfig {
    pub modality: Modality,
    /// Length of one raw feature vector.
    pub input_dim: usize,
    /// Columns per stacked window.
    pub n_max: usize,
    /// Embedding size `d_m`.
    pub d_out: usize,
    pub kernel: usize,
    pub dropout: f64,
    pub gate: GateKind,
}

#[derive(Debug, Clone)]
pub struct Embedder {
    pub config: EmbedderConfig,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub proj: Linear,
    pub gate: Linear,
}

impl Embedder {
    pub fn new(init: &mut Init<'_>, name: &str, config: EmbedderConfig) -> Result<Self> {
        if config.n_max < config.kernel {
            return Err(Error::WindowTooShort {
                len: config.n_max,
                kernel: config.kernel,
            });
        }
        let (d, c, k) = (config.d_out, config.input_dim, config.kernel);
        Ok(Embedder {
            conv_w: init.weight(&format!("{name}.conv.weight"), &[d, c, k], c * k)?,
            conv_b: init.zeros(&format!("{name}.conv.bias"), &[d])?,
            proj: init.linear(&format!("{name}.highway.proj"), d, d)?,
            gate: init.linear(&format!("{name}.highway.gate"), d, d)?,
            config,
        })
    }

    /// `g ⊙ (x W_proj + b_proj) + (1 - g) ⊙ x` for each row of `x_conv`.
    pub fn highway(&self, g: &mut Graph<'_>, x_conv: Var) -> Result<Var> {
        let proj = self.proj.forward(g, x_conv)?;
        let pre = self.gate.forward(g, x_conv)?;
        let gate = match self.config.gate {
            GateKind::Softmax => g.softmax_last(pre)?,
            GateKind::Sigmoid => g.sigmoid(pre),
        };
        let carry = g.one_minus(gate);
        let a = g.mul(gate, proj)?;
        let b = g.mul(carry, x_conv)?;
        g.add(a, b)
    }

    /// Embeds a batch of stacked windows `n × input_dim × n_max` into `n × d_out`.
    pub fn embed_windows(&self, g: &mut Graph<'_>, windows: Var) -> Result<Var> {
        let w = g.param(self.conv_w);
        let b = g.param(self.conv_b);
        let conv = g.conv1d(windows, w, b)?;
        let pooled = g.maxpool_time(conv)?;
        let pooled = g.dropout(pooled, self.config.dropout);
        self.highway(g, pooled)
    }

    /// Embeds one `input_dim × n_max` window into a length-`d_out` vector.
    pub fn embed_window(&self, g: &mut Graph<'_>, window: Var) -> Result<Var> {
        let shape = g.shape(window).to_vec();
        let batched = g.reshape(window, &[1, shape[0], shape.get(1).copied().unwrap_or(1)])?;
        let out = self.embed_windows(g, batched)?;
        g.reshape(out, &[self.config.d_out])
    }
}
