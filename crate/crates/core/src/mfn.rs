//! Memory fusion: one LSTM per modality, attention over the concatenated
//! current and previous cell states, and a gated multi-view memory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Init, Linear, TwoLayer};
use crate::recurrent::{Lstm, LstmState};
use crate::tensor::{Graph, Tensor, Var};
use crate::Modality;

/// Tag applied to each step's attention vector over cell states.
pub const DMAN_TAG: &str = "dman";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfnConfig {
    /// `(modality, input width, LSTM hidden width)` in fusion order.
    pub streams: Vec<(Modality, usize, usize)>,
    pub d_mem: usize,
    /// Hidden width of the attention, gate and proposal networks.
    pub net_hidden: usize,
    pub dman_dropout: f64,
    pub output_dropout: f64,
}

#[derive(Debug, Clone)]
pub struct Mfn {
    pub config: MfnConfig,
    pub lstms: Vec<Lstm>,
    pub f_attn: TwoLayer,
    pub f_retain: TwoLayer,
    pub f_update: TwoLayer,
    pub f_propose: TwoLayer,
    pub out: Linear,
}

impl Mfn {
    pub fn new(init: &mut Init<'_>, name: &str, config: MfnConfig) -> Result<Self> {
        if config.streams.len() < 2 {
            return Err(Error::Config(format!(
                "memory fusion needs at least two modalities, got {}",
                config.streams.len()
            )));
        }
        let lstms = config
            .streams
            .iter()
            .map(|&(m, d_in, d_h)| Lstm::new(init, &format!("{name}.lstm.{}", m.letter()), d_in, d_h))
            .collect::<Result<Vec<_>>>()?;
        let cells = config.cell_width();
        let (hid, mem) = (config.net_hidden, config.d_mem);
        Ok(Mfn {
            f_attn: TwoLayer::new(init, &format!("{name}.dman"), 2 * cells, hid, 2 * cells, config.dman_dropout)?,
            f_retain: TwoLayer::new(init, &format!("{name}.retain"), 2 * cells, hid, mem, 0.0)?,
            f_update: TwoLayer::new(init, &format!("{name}.update"), 2 * cells, hid, mem, 0.0)?,
            f_propose: TwoLayer::new(init, &format!("{name}.propose"), 2 * cells, hid, mem, 0.0)?,
            out: init.linear(&format!("{name}.out"), mem + cells, 1)?,
            lstms,
            config,
        })
    }

    /// Attention-weighted `[c_t ; c_prev]` for `1 × cells` inputs.
    pub fn dman_step(&self, g: &mut Graph<'_>, current: &[Var], previous: &[Var]) -> Result<Var> {
        let mut parts = current.to_vec();
        parts.extend_from_slice(previous);
        let c = g.concat(&parts, 1)?;
        let scores = self.f_attn.forward(g, c)?;
        let a = g.softmax_last(scores)?;
        g.tag(DMAN_TAG, a);
        g.mul(a, c)
    }

    /// `u_t = γ1 ⊙ u_prev + γ2 ⊙ tanh(û)`.
    pub fn mgm_update(&self, g: &mut Graph<'_>, u_prev: Var, d: Var) -> Result<Var> {
        let r = self.f_retain.forward(g, d)?;
        let g1 = g.sigmoid(r);
        let z = self.f_update.forward(g, d)?;
        let g2 = g.sigmoid(z);
        let p = self.f_propose.forward(g, d)?;
        let proposal = g.tanh(p);
        let keep = g.mul(g1, u_prev)?;
        let write = g.mul(g2, proposal)?;
        g.add(keep, write)
    }

    /// Runs the fusion over per-modality `n × width` sequences (fusion order)
    /// and returns `n × 1` predictions.
    pub fn forward(&self, g: &mut Graph<'_>, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != self.lstms.len() {
            return Err(Error::Config(format!(
                "memory fusion built for {} modalities, got {}",
                self.lstms.len(),
                inputs.len()
            )));
        }
        let n = g.shape(inputs[0])[0];
        for &x in inputs {
            if g.shape(x)[0] != n {
                let (a, b) = (g.shape(inputs[0]).to_vec(), g.shape(x).to_vec());
                return Err(Error::shape("memory fusion lengths", &a, &b));
            }
        }
        if n == 0 {
            return Ok(g.constant(Tensor::zeros(&[0, 1])));
        }
        let mut projected = Vec::with_capacity(inputs.len());
        let mut states: Vec<LstmState> = Vec::with_capacity(inputs.len());
        for (lstm, &x) in self.lstms.iter().zip(inputs) {
            projected.push(lstm.project_inputs(g, x)?);
            states.push(lstm.zero_state(g));
        }
        let mut u = g.constant(Tensor::zeros(&[1, self.config.d_mem]));
        let mut outputs = Vec::with_capacity(n);
        for t in 0..n {
            let previous: Vec<Var> = states.iter().map(|s| s.c).collect();
            for (k, lstm) in self.lstms.iter().enumerate() {
                let x = g.row(projected[k], t)?;
                states[k] = lstm.step_projected(g, states[k], x)?;
            }
            let current: Vec<Var> = states.iter().map(|s| s.c).collect();
            let d = self.dman_step(g, &current, &previous)?;
            u = self.mgm_update(g, u, d)?;
            let mut parts = vec![u];
            parts.extend(states.iter().map(|s| s.h));
            let big_u = g.concat(&parts, 1)?;
            let big_u = g.dropout(big_u, self.config.output_dropout);
            outputs.push(self.out.forward(g, big_u)?);
        }
        g.concat(&outputs, 0)
    }
}

impl MfnConfig {
    /// Total cell width `Σ d_m`.
    pub fn cell_width(&self) -> usize {
        self.streams.iter().map(|s| s.2).sum()
    }
}
