//! The recurrent unit: tokenisation of joints and attention points, a
//! pre-norm transformer encoder over the seven tokens, a layer-normalised
//! LSTM stack that receives the SLV, and the output heads.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::tensor::{init, Graph, ParamGroup, ParamId, ParamStore, Real, Tensor, Var};
use crate::vision::POINTS;

/// One joint token followed by six point tokens.
pub const TOKENS: usize = 1 + POINTS;
pub const TOKEN_LABELS: [&str; TOKENS] = ["ja", "pt1", "pt2", "pt3", "pt4", "pt5", "pt6"];

const G: ParamGroup = ParamGroup::Sequence;

#[derive(Clone, Debug)]
struct Block {
    norm_attn: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Clone, Debug)]
struct LstmLayer {
    input: Linear,
    recurrent: Linear,
    norm: LayerNorm,
}

/// Per-layer hidden and cell states, each `[B, H]`.
#[derive(Clone, Debug)]
pub struct LstmState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct SequenceCore {
    joint_token: Linear,
    point_token: Linear,
    slots: ParamId,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    lstm: Vec<LstmLayer>,
    point_head: Linear,
    joint_head: Linear,
    pub joints: usize,
    pub width: usize,
    pub heads: usize,
    pub hidden: usize,
    slope: f32,
}

impl SequenceCore {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.token_width;
        let eps = cfg.norm_eps;
        let joint_token = Linear::new(store, rng, "seq.token.joints", G, cfg.joints, d)?;
        let point_token = Linear::new(store, rng, "seq.token.points", G, 2, d)?;
        let slots = store.add("seq.token.slots", G, init::normal(rng, &[TOKENS * d], 0.1))?;
        let mut blocks = Vec::new();
        for l in 0..cfg.attn_layers {
            let n = |s: &str| format!("seq.attn.{l}.{s}");
            blocks.push(Block {
                norm_attn: LayerNorm::new(store, &n("norm_attn"), G, d, eps)?,
                q: Linear::new(store, rng, &n("q"), G, d, d)?,
                k: Linear::new(store, rng, &n("k"), G, d, d)?,
                v: Linear::new(store, rng, &n("v"), G, d, d)?,
                out: Linear::new(store, rng, &n("out"), G, d, d)?,
                norm_ff: LayerNorm::new(store, &n("norm_ff"), G, d, eps)?,
                ff_in: Linear::new(store, rng, &n("ff_in"), G, d, cfg.ff_width)?,
                ff_out: Linear::new(store, rng, &n("ff_out"), G, cfg.ff_width, d)?,
            });
        }
        let final_norm = LayerNorm::new(store, "seq.attn.final_norm", G, d, eps)?;
        let hidden = cfg.lstm_hidden;
        let mut lstm = Vec::new();
        for l in 0..cfg.lstm_layers {
            let inputs = if l == 0 { TOKENS * d } else { hidden };
            lstm.push(LstmLayer {
                input: Linear::new(store, rng, &format!("seq.lstm.{l}.input"), G, inputs, 4 * hidden)?,
                recurrent: Linear::without_bias(store, rng, &format!("seq.lstm.{l}.recurrent"), G, hidden, 4 * hidden)?,
                norm: LayerNorm::new(store, &format!("seq.lstm.{l}.norm"), G, 4 * hidden, eps)?,
            });
        }
        Ok(Self {
            joint_token,
            point_token,
            slots,
            blocks,
            final_norm,
            lstm,
            point_head: Linear::new(store, rng, "seq.head.points", G, hidden, 2 * POINTS)?,
            joint_head: Linear::new(store, rng, "seq.head.joints", G, hidden, cfg.joints)?,
            joints: cfg.joints,
            width: d,
            heads: cfg.attn_heads,
            hidden,
            slope: cfg.leaky_slope,
        })
    }

    pub fn lstm_layers(&self) -> usize {
        self.lstm.len()
    }

    /// `[N, J]` joints and `[N, 12]` points to `[N, 7, D]` tokens.
    pub fn tokenize<T: Real>(&self, g: &mut Graph<'_, T>, joints: Var, points: Var) -> Result<Var> {
        let (js, ps) = (g.shape(joints).to_vec(), g.shape(points).to_vec());
        if js.len() != 2 || js[1] != self.joints || ps.len() != 2 || ps[1] != 2 * POINTS || ps[0] != js[0] {
            return Err(Error::shape("tokenize", format!("joints {js:?} / points {ps:?}, expected [N, {}] / [N, {}]", self.joints, 2 * POINTS)));
        }
        let n = js[0];
        let d = self.width;
        let jt = self.joint_token.forward(g, joints)?;
        let jt = g.reshape(jt, &[n, 1, d])?;
        let pairs = g.reshape(points, &[n * POINTS, 2])?;
        let pt = self.point_token.forward(g, pairs)?;
        let pt = g.reshape(pt, &[n, POINTS, d])?;
        let tokens = g.concat(&[jt, pt], 1)?;
        let flat = g.reshape(tokens, &[n, TOKENS * d])?;
        let slots = g.param(self.slots);
        let with_slots = g.add_row(flat, slots)?;
        g.reshape(with_slots, &[n, TOKENS, d])
    }

    /// Pre-norm transformer encoder over `[N, 7, D]` tokens. When `capture`
    /// is given, each layer's attention probabilities `[N, heads, 7, 7]` are
    /// appended to it.
    pub fn relate<T: Real>(&self, g: &mut Graph<'_, T>, tokens: Var, mut capture: Option<&mut Vec<Tensor<T>>>) -> Result<Var> {
        let s = g.shape(tokens).to_vec();
        if s.len() != 3 || s[1] != TOKENS || s[2] != self.width {
            return Err(Error::shape("relate", format!("{s:?}")));
        }
        let (n, d, nh) = (s[0], self.width, self.heads);
        let hd = d / nh;
        let slope = T::from_f64_lossy(self.slope as f64);
        let mut x = g.reshape(tokens, &[n * TOKENS, d])?;
        let split = |g: &mut Graph<'_, T>, v: Var| -> Result<Var> {
            let v = g.reshape(v, &[n, TOKENS, nh, hd])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            g.reshape(v, &[n * nh, TOKENS, hd])
        };
        for b in &self.blocks {
            let h = b.norm_attn.forward(g, x)?;
            let q = b.q.forward(g, h)?;
            let k = b.k.forward(g, h)?;
            let v = b.v.forward(g, h)?;
            let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
            let scores = g.bmm(q, k, true)?;
            let scores = g.scale(scores, T::from_f64_lossy(1.0 / (hd as f64).sqrt()));
            let probs = g.softmax(scores);
            if let Some(c) = capture.as_deref_mut() {
                c.push(g.value(probs).reshape(&[n, nh, TOKENS, TOKENS])?);
            }
            let mixed = g.bmm(probs, v, false)?;
            let mixed = g.reshape(mixed, &[n, nh, TOKENS, hd])?;
            let mixed = g.permute(mixed, &[0, 2, 1, 3])?;
            let mixed = g.reshape(mixed, &[n * TOKENS, d])?;
            let attn = b.out.forward(g, mixed)?;
            x = g.add(x, attn)?;
            let h = b.norm_ff.forward(g, x)?;
            let f = b.ff_in.forward(g, h)?;
            let f = g.leaky_relu(f, slope);
            let f = b.ff_out.forward(g, f)?;
            x = g.add(x, f)?;
        }
        let x = self.final_norm.forward(g, x)?;
        g.reshape(x, &[n, TOKENS, d])
    }

    pub fn zero_state<T: Real>(&self, g: &mut Graph<'_, T>, batch: usize) -> LstmState {
        let zeros: Vec<Var> = (0..self.lstm.len()).map(|_| g.constant(Tensor::zeros(&[batch, self.hidden]))).collect();
        LstmState { h: zeros.clone(), c: zeros }
    }

    /// One LSTM step on flattened related tokens `[B, 7*D]`. `slv_in[l]`
    /// (`[B, H]`) is added to layer `l`'s recurrent input. Returns the top
    /// layer's new hidden state and the updated state.
    pub fn step<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, state: &LstmState, slv_in: Option<&[Var]>) -> Result<(Var, LstmState)> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 2 || xs[1] != TOKENS * self.width {
            return Err(Error::shape("lstm_step", format!("input {xs:?}, expected [B, {}]", TOKENS * self.width)));
        }
        if state.h.len() != self.lstm.len() || g.shape(state.h[0]) != [xs[0], self.hidden] {
            return Err(Error::shape("lstm_step", format!("state for {} layers of {:?}", state.h.len(), g.shape(state.h[0]))));
        }
        if let Some(s) = slv_in {
            if s.len() != self.lstm.len() || s.iter().any(|&v| g.shape(v) != [xs[0], self.hidden]) {
                return Err(Error::shape("lstm_step", "SLV injection must be one [B, H] input per layer"));
            }
        }
        let h_dim = self.hidden;
        let mut input = x;
        let mut next = LstmState { h: Vec::new(), c: Vec::new() };
        for (l, layer) in self.lstm.iter().enumerate() {
            let h_prev = match slv_in {
                Some(s) => g.add(state.h[l], s[l])?,
                None => state.h[l],
            };
            let a = layer.input.forward(g, input)?;
            let r = layer.recurrent.forward(g, h_prev)?;
            let pre = g.add(a, r)?;
            let gates = layer.norm.forward(g, pre)?;
            let i = g.narrow(gates, 1, 0, h_dim)?;
            let f = g.narrow(gates, 1, h_dim, h_dim)?;
            let c_hat = g.narrow(gates, 1, 2 * h_dim, h_dim)?;
            let o = g.narrow(gates, 1, 3 * h_dim, h_dim)?;
            let (i, f, o) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o));
            let c_hat = g.tanh(c_hat);
            let keep = g.mul(f, state.c[l])?;
            let write = g.mul(i, c_hat)?;
            let c = g.add(keep, write)?;
            let tc = g.tanh(c);
            let h = g.mul(o, tc)?;
            next.h.push(h);
            next.c.push(c);
            input = h;
        }
        Ok((input, next))
    }

    /// Predicted points `[B, 12]` in `[0, 1]` and joints `[B, J]`.
    pub fn heads<T: Real>(&self, g: &mut Graph<'_, T>, h: Var) -> Result<(Var, Var)> {
        let p = self.point_head.forward(g, h)?;
        let p = g.sigmoid(p);
        let j = self.joint_head.forward(g, h)?;
        Ok((p, j))
    }
}
