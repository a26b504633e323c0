//! Recurrent soft attention over the embedded global feature slices.
//!
//! For each proposal the module keeps an LSTM state `(h, c)` initialised from
//! the mean global slice. At every step a weight map over the `K²` slices is
//! predicted from the previous hidden state, the weighted slice average `x_t`
//! is fed to the LSTM together with the proposal's local embedding `z`, and
//! the last `x_T` becomes the global context feature.
//!
//! All proposals of one image are processed together as rows of `R×·`
//! matrices.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::instrument;
use crate::nn::{FcStack, Init, Linear, Mlp};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GlobalContextDims {
    /// Global grid side `K`.
    pub grid: usize,
    /// Embedded channel count `D`.
    pub embed: usize,
    /// LSTM width `d`.
    pub hidden: usize,
    /// Output width of the projection.
    pub fc: usize,
}

/// LSTM cell with the stacked input `[h; x; z]` and gate order `(i, f, o, g)`.
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub affine: Linear,
    pub hidden: usize,
}

impl LstmCell {
    /// One step: `c = f⊙c_prev + i⊙g`, `h = o⊙tanh(c)`.
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h_prev: Var,
        c_prev: Var,
        x: Var,
        z: Var,
    ) -> Result<(Var, Var)> {
        let d = self.hidden;
        let stacked = g.concat(&[h_prev, x, z], 1)?;
        let pre = self.affine.forward(g, store, stacked)?;
        let i = g.narrow(pre, 1, 0, d)?;
        let f = g.narrow(pre, 1, d, d)?;
        let o = g.narrow(pre, 1, 2 * d, d)?;
        let gg = g.narrow(pre, 1, 3 * d, d)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let o = g.sigmoid(o);
        let gg = g.tanh(gg);
        let keep = g.mul(f, c_prev)?;
        let write = g.mul(i, gg)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok((h, c))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GlobalContext {
    pub dims: GlobalContextDims,
    pub lstm: LstmCell,
    pub phi: Mlp,
    pub init_c: Mlp,
    pub init_h: Mlp,
    pub projection: FcStack,
}

/// Graph handles produced by one unrolled run.
#[derive(Clone, Debug)]
pub struct GlobalContextRun {
    /// `R×D`, the context `x_T` of the final step.
    pub raw: Var,
    /// One `R×K²` weight map per step.
    pub alphas: Vec<Var>,
    /// One `R×D` context per step.
    pub contexts: Vec<Var>,
}

/// Attention history for a single proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub alphas: Vec<Vec<f64>>,
    pub contexts: Vec<Vec<f64>>,
    pub final_context: Vec<f64>,
}

impl GlobalContextRun {
    /// Per-proposal traces read back from the graph.
    pub fn traces(&self, g: &Graph) -> Vec<AttentionTrace> {
        let rows = g.shape(self.raw)[0];
        let row = |v: Var, r: usize| {
            let t = g.value(v);
            let n = t.shape()[1];
            t.data()[r * n..(r + 1) * n].to_vec()
        };
        (0..rows)
            .map(|r| AttentionTrace {
                alphas: self.alphas.iter().map(|&a| row(a, r)).collect(),
                contexts: self.contexts.iter().map(|&x| row(x, r)).collect(),
                final_context: row(self.raw, r),
            })
            .collect()
    }
}

impl GlobalContext {
    /// LSTM weights use the xavier scheme; the MLPs and projection use
    /// `fc_init`.
    pub fn new<R: Rng>(store: &mut ParamStore, dims: GlobalContextDims, fc_init: Init, rng: &mut R) -> Self {
        let GlobalContextDims { grid, embed, hidden, fc } = dims;
        let cells = grid * grid;
        GlobalContext {
            dims,
            lstm: LstmCell {
                affine: Linear::new(store, "lstm", "affine", 2 * embed + hidden, 4 * hidden, Init::Xavier, rng),
                hidden,
            },
            phi: Mlp::new(store, "phi", "phi", hidden, hidden, cells, fc_init, rng),
            init_c: Mlp::new(store, "f_init", "c", embed, hidden, hidden, fc_init, rng),
            init_h: Mlp::new(store, "f_init", "h", embed, hidden, hidden, fc_init, rng),
            projection: FcStack::new(store, "global-proj", "proj", embed, fc, fc_init, rng),
        }
    }

    /// `(c0, h0)` from the mean slice, each `1×d`.
    pub fn init_state(&self, g: &mut Graph, store: &ParamStore, slices: Var) -> Result<(Var, Var)> {
        let cells = g.shape(slices)[0];
        if cells == 0 {
            return Err(Error::dim("init_state needs at least one slice".to_string()));
        }
        let avg = g.input(Tensor::full(&[1, cells], 1.0 / cells as f64));
        let mean = g.matmul(avg, slices)?;
        let c0 = self.init_c.forward(g, store, mean)?;
        let h0 = self.init_h.forward(g, store, mean)?;
        Ok((c0, h0))
    }

    /// `softmax(φ(h_prev))` row-wise: `R×d → R×K²`.
    pub fn attention_map(&self, g: &mut Graph, store: &ParamStore, h_prev: Var) -> Result<Var> {
        let logits = self.phi.forward(g, store, h_prev)?;
        g.softmax(logits)
    }

    /// `x = Σ_i α_i · slice_i` for each row of `alpha`.
    pub fn context_vector(&self, g: &mut Graph, alpha: Var, slices: Var) -> Result<Var> {
        g.matmul(alpha, slices)
    }

    /// Unrolls `steps` shared-parameter LSTM steps for `R` proposals with
    /// local embeddings `z` (`R×D`) over one image's `K²×D` slices.
    pub fn run(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        slices: Var,
        z: Var,
        steps: usize,
    ) -> Result<GlobalContextRun> {
        if steps == 0 {
            return Err(Error::Contract("global context needs at least one step".to_string()));
        }
        let expected = [self.dims.grid * self.dims.grid, self.dims.embed];
        if g.shape(slices) != expected {
            return Err(Error::dim(format!(
                "slices {:?}, expected {:?}",
                g.shape(slices),
                expected
            )));
        }
        instrument::record_global_context();
        let rows = g.shape(z)[0];
        let (c0, h0) = self.init_state(g, store, slices)?;
        let ones = g.input(Tensor::full(&[rows, 1], 1.0));
        let mut c = g.matmul(ones, c0)?;
        let mut h = g.matmul(ones, h0)?;
        let mut alphas = Vec::with_capacity(steps);
        let mut contexts = Vec::with_capacity(steps);
        for _ in 0..steps {
            let alpha = self.attention_map(g, store, h)?;
            let x = self.context_vector(g, alpha, slices)?;
            let (nh, nc) = self.lstm.step(g, store, h, c, x, z)?;
            h = nh;
            c = nc;
            alphas.push(alpha);
            contexts.push(x);
        }
        Ok(GlobalContextRun {
            raw: *contexts.last().unwrap(),
            alphas,
            contexts,
        })
    }

    /// Two relu affine layers: `R×D → R×d_fc`.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, raw: Var) -> Result<Var> {
        self.projection.forward(g, store, raw)
    }
}
