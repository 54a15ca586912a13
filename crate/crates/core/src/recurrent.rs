//! LSTM cell and the recurrent decode head.

use crate::error::Result;
use crate::nn::{Init, Linear};
use crate::tensor::{Graph, ParamId, Tensor, Var};

/// Fused LSTM parameters. Gate blocks along the last axis are ordered
/// input, forget, candidate, output.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub input_dim: usize,
    pub hidden: usize,
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
}

/// Hidden and cell state, each `1 × hidden`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl Lstm {
    pub fn new(init: &mut Init<'_>, name: &str, input_dim: usize, hidden: usize) -> Result<Self> {
        Ok(Lstm {
            input_dim,
            hidden,
            w_input: init.weight(&format!("{name}.w_input"), &[input_dim, 4 * hidden], input_dim)?,
            w_hidden: init.weight(&format!("{name}.w_hidden"), &[hidden, 4 * hidden], hidden)?,
            bias: init.zeros(&format!("{name}.bias"), &[4 * hidden])?,
        })
    }

    pub fn zero_state(&self, g: &mut Graph<'_>) -> LstmState {
        LstmState {
            h: g.constant(Tensor::zeros(&[1, self.hidden])),
            c: g.constant(Tensor::zeros(&[1, self.hidden])),
        }
    }

    /// Input contribution `X W_x + b` for a whole `n × input_dim` sequence.
    pub fn project_inputs(&self, g: &mut Graph<'_>, xs: Var) -> Result<Var> {
        let w = g.param(self.w_input);
        let b = g.param(self.bias);
        let p = g.matmul(xs, w)?;
        g.add_row(p, b)
    }

    /// One step from a precomputed `1 × 4·hidden` input projection.
    pub fn step_projected(&self, g: &mut Graph<'_>, state: LstmState, x_proj: Var) -> Result<LstmState> {
        let hd = self.hidden;
        let wh = g.param(self.w_hidden);
        let rec = g.matmul(state.h, wh)?;
        let z = g.add(x_proj, rec)?;
        let zi = g.slice_last(z, 0, hd)?;
        let zf = g.slice_last(z, hd, hd)?;
        let zg = g.slice_last(z, 2 * hd, hd)?;
        let zo = g.slice_last(z, 3 * hd, hd)?;
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let cand = g.tanh(zg);
        let o = g.sigmoid(zo);
        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    /// `c' = f ⊙ c + i ⊙ g`, `h' = o ⊙ tanh(c')` for a `1 × input_dim` input.
    pub fn step(&self, g: &mut Graph<'_>, state: LstmState, x: Var) -> Result<LstmState> {
        let p = self.project_inputs(g, x)?;
        self.step_projected(g, state, p)
    }

    /// Runs the cell over an `n × input_dim` sequence from a zero state.
    pub fn run(&self, g: &mut Graph<'_>, xs: Var) -> Result<Vec<LstmState>> {
        let n = g.shape(xs)[0];
        let proj = self.project_inputs(g, xs)?;
        let mut state = self.zero_state(g);
        let mut out = Vec::with_capacity(n);
        for t in 0..n {
            let row = g.row(proj, t)?;
            state = self.step_projected(g, state, row)?;
            out.push(state);
        }
        Ok(out)
    }
}

/// LSTM over the sequence followed by a shared affine map to one value per step.
#[derive(Debug, Clone)]
pub struct RecurrentDecoder {
    pub lstm: Lstm,
    pub out: Linear,
}

impl RecurrentDecoder {
    pub fn new(init: &mut Init<'_>, name: &str, input_dim: usize, hidden: usize) -> Result<Self> {
        Ok(RecurrentDecoder {
            lstm: Lstm::new(init, &format!("{name}.lstm"), input_dim, hidden)?,
            out: init.linear(&format!("{name}.out"), hidden, 1)?,
        })
    }

    /// `n × input_dim → n × 1`; an empty sequence gives an empty column.
    pub fn decode_sequence(&self, g: &mut Graph<'_>, xs: Var) -> Result<Var> {
        if g.shape(xs)[0] == 0 {
            return Ok(g.constant(Tensor::zeros(&[0, 1])));
        }
        let states = self.lstm.run(g, xs)?;
        let hs: Vec<Var> = states.iter().map(|s| s.h).collect();
        let h = g.concat(&hs, 0)?;
        self.out.forward(g, h)
    }
}
