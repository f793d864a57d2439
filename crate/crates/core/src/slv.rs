//! Shared latent variables: the per-sequence table, the inference vector,
//! the projection stacks into the LSTM layers and LM blocks, and the
//! trainable/frozen split for each phase.

use std::str::FromStr;

use rand::Rng;

use crate::config::{LmConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{Graph, ParamGroup, ParamId, ParamStore, Real, Tensor, Var};

pub const TABLE: &str = "slv.table";
pub const INFERENCE: &str = "slv.inference";

pub struct Slv {
    pub table: ParamId,
    pub inference: ParamId,
    pub dim: usize,
    pub sequences: usize,
    to_lstm: Vec<[Linear; 2]>,
    to_lm: Vec<Vec<Linear>>,
}

/// Per-LSTM-layer (`[B, hidden]`) and per-LM-block (`[B, H]`) injections.
pub struct Projected {
    pub lstm: Vec<Var>,
    pub lm: Vec<Var>,
}

impl Slv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        model: &ModelConfig,
        lm: &LmConfig,
        sequences: usize,
    ) -> Result<Self> {
        let dim = model.slv_dim;
        if lm.slv_layers == 0 {
            return Err(Error::Config("lm.slv_layers must be at least 1".into()));
        }
        let table = store.add(TABLE, ParamGroup::Slv, Tensor::zeros(&[sequences, dim]))?;
        let inference = store.add(INFERENCE, ParamGroup::Slv, Tensor::zeros(&[1, dim]))?;
        let p = ParamGroup::Projection;
        let hid = model.slv_lstm_hidden;
        let mut to_lstm = Vec::new();
        for l in 0..model.lstm_layers {
            to_lstm.push([
                Linear::new(store, rng, &format!("slv.lstm.{l}.0"), p, dim, hid)?,
                Linear::new(store, rng, &format!("slv.lstm.{l}.1"), p, hid, model.lstm_hidden)?,
            ]);
        }
        let h = lm.hidden;
        let mut to_lm = Vec::new();
        for b in 0..lm.blocks {
            let mut stack = Vec::new();
            for i in 0..lm.slv_layers {
                let name = format!("slv.lm.{b}.{i}");
                let inputs = if i == 0 { dim } else { h };
                stack.push(if i + 1 == lm.slv_layers {
                    Linear::zeroed(store, &name, p, inputs, h)?
                } else {
                    Linear::new(store, rng, &name, p, inputs, h)?
                });
            }
            to_lm.push(stack);
        }
        Ok(Self { table, inference, dim, sequences, to_lstm, to_lm })
    }

    /// Rows of the training table for `sequence_ids`, as `[B, dim]`.
    pub fn lookup<T: Real>(&self, g: &mut Graph<'_, T>, sequence_ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = sequence_ids.iter().find(|&&i| i >= self.sequences) {
            return Err(Error::Training(format!("no SLV for sequence {bad}")));
        }
        let t = g.param(self.table);
        g.index_select(t, sequence_ids)
    }

    /// The inference vector, `[1, dim]`.
    pub fn inference<T: Real>(&self, g: &mut Graph<'_, T>) -> Var {
        g.param(self.inference)
    }

    pub fn project<T: Real>(&self, g: &mut Graph<'_, T>, slv: Var) -> Result<Projected> {
        let mut lstm = Vec::with_capacity(self.to_lstm.len());
        for [a, b] in &self.to_lstm {
            let x = a.forward(g, slv)?;
            let x = g.tanh(x);
            lstm.push(b.forward(g, x)?);
        }
        let mut lm = Vec::with_capacity(self.to_lm.len());
        for stack in &self.to_lm {
            let mut x = slv;
            for (i, layer) in stack.iter().enumerate() {
                if i > 0 {
                    x = g.tanh(x);
                }
                x = layer.forward(g, x)?;
            }
            lm.push(x);
        }
        Ok(Projected { lstm, lm })
    }

    /// LM-side injections of a single SLV as plain vectors, for recurrent decoding.
    pub fn lm_injection(&self, store: &ParamStore, slv: &[f32]) -> Result<Vec<Vec<f32>>> {
        let mut g: Graph<f32> = Graph::frozen(store);
        let s = g.constant(Tensor::new(&[1, self.dim], slv.to_vec())?);
        let p = self.project(&mut g, s)?;
        Ok(p.lm.iter().map(|&v| g.value(v).data().to_vec()).collect())
    }

    pub fn table_row(&self, store: &ParamStore, id: usize) -> Vec<f32> {
        store.value(self.table).data()[id * self.dim..(id + 1) * self.dim].to_vec()
    }

    pub fn set_inference(&self, store: &mut ParamStore, value: &[f32]) -> Result<()> {
        store.set(self.inference, Tensor::new(&[1, self.dim], value.to_vec())?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Training,
    Regression,
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "training" => Ok(Self::Training),
            "regression" => Ok(Self::Regression),
            other => Err(Error::Phase(other.to_string())),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Partition {
    pub trainable: Vec<ParamId>,
    pub frozen: Vec<ParamId>,
}

/// Training updates everything except the language model and the inference
/// vector; regression updates the inference vector alone.
pub fn trainable_partition(store: &ParamStore, phase: Phase) -> Result<Partition> {
    let inference = store.id(INFERENCE).ok_or_else(|| Error::Config(format!("store has no `{INFERENCE}`")))?;
    let (trainable, frozen) = store.ids().partition(|&id| match phase {
        Phase::Training => store.param(id).group != ParamGroup::Language && id != inference,
        Phase::Regression => id == inference,
    });
    Ok(Partition { trainable, frozen })
}
