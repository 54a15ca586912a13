//! Parameter initialization helpers and the affine layer shared by all blocks.

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, RngState, Var};

/// Creates named parameters in a store with fan-in initialization.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut RngState,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut RngState) -> Self {
        Init { store, rng }
    }

    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        self.store.fan_in(name, shape, fan_in, self.rng)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.zeros(name, shape)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.ones(name, shape)
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.weight(&format!("{name}.weight"), &[d_in, d_out], d_in)?,
            b: self.zeros(&format!("{name}.bias"), &[d_out])?,
            d_in,
            d_out,
        })
    }
}

/// `y = x W + b` applied to each row of `x`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Linear, ReLU, optional dropout, linear.
#[derive(Debug, Clone)]
pub struct TwoLayer {
    pub hidden: Linear,
    pub out: Linear,
    pub dropout: f64,
}

impl TwoLayer {
    pub fn new(init: &mut Init<'_>, name: &str, d_in: usize, d_hidden: usize, d_out: usize, dropout: f64) -> Result<Self> {
        Ok(TwoLayer {
            hidden: init.linear(&format!("{name}.0"), d_in, d_hidden)?,
            out: init.linear(&format!("{name}.1"), d_hidden, d_out)?,
            dropout,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout);
        self.out.forward(g, h)
    }
}
