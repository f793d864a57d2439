//! RWKV-style language model: token embedding, a stack of blocks each made
//! of a time-mixing (WKV linear attention) and a channel-mixing sublayer,
//! and a projection back onto the vocabulary.

use rand::Rng;

use super::vocab::PAD;
use crate::config::LmConfig;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::tensor::{init, Graph, ParamGroup, ParamId, ParamStore, Real, Tensor, Var};

const G: ParamGroup = ParamGroup::Language;
const EPS: f32 = 1e-5;

#[derive(Clone, Debug)]
struct Block {
    norm_time: LayerNorm,
    mix_k: ParamId,
    mix_v: ParamId,
    mix_r: ParamId,
    decay: ParamId,
    first: ParamId,
    key: Linear,
    value: Linear,
    receptance: Linear,
    output: Linear,
    norm_channel: LayerNorm,
    cmix_k: ParamId,
    cmix_r: ParamId,
    ckey: Linear,
    cvalue: Linear,
    creceptance: Linear,
}

#[derive(Clone, Debug)]
pub struct Rwkv {
    embed: ParamId,
    norm_in: LayerNorm,
    blocks: Vec<Block>,
    norm_out: LayerNorm,
    head: Linear,
    pub hidden: usize,
    pub vocab: usize,
    pub max_len: usize,
}

fn ramp(n: usize, lo: f32, hi: f32) -> Tensor {
    let d = (n.max(2) - 1) as f32;
    Tensor::new(&[n], (0..n).map(|i| lo + (hi - lo) * i as f32 / d).collect()).expect("ramp")
}

impl Rwkv {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &LmConfig, vocab: usize) -> Result<Self> {
        let h = cfg.hidden;
        let f = cfg.ffn_mult * h;
        let embed = store.add("lm.embed", G, init::normal(rng, &[vocab, h], 0.5))?;
        let norm_in = LayerNorm::new(store, "lm.norm_in", G, h, EPS)?;
        let mut blocks = Vec::new();
        for b in 0..cfg.blocks {
            let n = |s: &str| format!("lm.block.{b}.{s}");
            let frac = b as f32 / cfg.blocks.max(1) as f32;
            blocks.push(Block {
                norm_time: LayerNorm::new(store, &n("norm_time"), G, h, EPS)?,
                mix_k: store.add(n("mix_k"), G, ramp(h, 0.2, 1.0 - 0.3 * frac))?,
                mix_v: store.add(n("mix_v"), G, ramp(h, 0.3, 1.0 - 0.2 * frac))?,
                mix_r: store.add(n("mix_r"), G, ramp(h, 0.1, 0.6))?,
                decay: store.add(n("decay"), G, ramp(h, -3.0, 1.0))?,
                first: store.add(n("first"), G, Tensor::full(&[h], 0.5))?,
                key: Linear::without_bias(store, rng, &n("key"), G, h, h)?,
                value: Linear::without_bias(store, rng, &n("value"), G, h, h)?,
                receptance: Linear::without_bias(store, rng, &n("receptance"), G, h, h)?,
                output: Linear::without_bias(store, rng, &n("output"), G, h, h)?,
                norm_channel: LayerNorm::new(store, &n("norm_channel"), G, h, EPS)?,
                cmix_k: store.add(n("cmix_k"), G, ramp(h, 0.2, 1.0 - 0.3 * frac))?,
                cmix_r: store.add(n("cmix_r"), G, ramp(h, 0.2, 1.0 - 0.3 * frac))?,
                ckey: Linear::without_bias(store, rng, &n("ckey"), G, h, f)?,
                cvalue: Linear::without_bias(store, rng, &n("cvalue"), G, f, h)?,
                creceptance: Linear::without_bias(store, rng, &n("creceptance"), G, h, h)?,
            });
        }
        let norm_out = LayerNorm::new(store, "lm.norm_out", G, h, EPS)?;
        let head = Linear::without_bias(store, rng, "lm.head", G, h, vocab)?;
        Ok(Self { embed, norm_in, blocks, norm_out, head, hidden: h, vocab, max_len: cfg.max_len })
    }

    pub fn blocks(&self) -> usize {
        self.blocks.len()
    }

    /// `x + (shifted - x) * (1 - mix)` written as `shifted + (x - shifted) * mix`.
    fn mix<T: Real>(g: &mut Graph<'_, T>, x: Var, shifted: Var, mix: ParamId) -> Result<Var> {
        let m = g.param(mix);
        let d = g.sub(x, shifted)?;
        let d = g.mul_row(d, m)?;
        g.add(d, shifted)
    }

    /// Next-token logits `[B*T, W]` for a batch of equal-length id rows.
    /// `inject[b]` (`[B, H]`) is added to the residual stream at the input
    /// of block `b` at every position.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, ids: &[Vec<usize>], inject: Option<&[Var]>) -> Result<Var> {
        let batch = ids.len();
        let t = ids.first().map_or(0, Vec::len);
        if batch == 0 || t == 0 || ids.iter().any(|r| r.len() != t) {
            return Err(Error::shape("lm_forward", "need a non-empty batch of equal-length rows"));
        }
        if let Some(&bad) = ids.iter().flatten().find(|&&i| i >= self.vocab) {
            return Err(Error::TokenOutOfRange { id: bad, size: self.vocab });
        }
        let h = self.hidden;
        if let Some(s) = inject {
            if s.len() != self.blocks.len() || s.iter().any(|&v| g.shape(v) != [batch, h]) {
                return Err(Error::shape("lm_forward", format!("injection must be {} inputs of [{batch}, {h}]", self.blocks.len())));
            }
        }
        let flat: Vec<usize> = ids.iter().flatten().copied().collect();
        let rows: Vec<usize> = (0..batch).flat_map(|b| std::iter::repeat_n(b, t)).collect();
        let emb = g.param(self.embed);
        let e = g.index_select(emb, &flat)?;
        let mut x = self.norm_in.forward(g, e)?;
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(s) = inject {
                let rep = g.index_select(s[i], &rows)?;
                x = g.add(x, rep)?;
            }
            let n = b.norm_time.forward(g, x)?;
            let n = g.reshape(n, &[batch, t, h])?;
            let sh = g.time_shift(n)?;
            let xk = Self::mix(g, n, sh, b.mix_k)?;
            let xv = Self::mix(g, n, sh, b.mix_v)?;
            let xr = Self::mix(g, n, sh, b.mix_r)?;
            let k = b.key.forward(g, xk)?;
            let v = b.value.forward(g, xv)?;
            let r = b.receptance.forward(g, xr)?;
            let r = g.sigmoid(r);
            let (decay, first) = (g.param(b.decay), g.param(b.first));
            let wkv = g.wkv(k, v, decay, first)?;
            let rw = g.mul(r, wkv)?;
            let out = b.output.forward(g, rw)?;
            let out = g.reshape(out, &[batch * t, h])?;
            x = g.add(x, out)?;

            let n = b.norm_channel.forward(g, x)?;
            let n = g.reshape(n, &[batch, t, h])?;
            let sh = g.time_shift(n)?;
            let xk = Self::mix(g, n, sh, b.cmix_k)?;
            let xr = Self::mix(g, n, sh, b.cmix_r)?;
            let k = b.ckey.forward(g, xk)?;
            let k = g.relu(k);
            let k = g.square(k);
            let kv = b.cvalue.forward(g, k)?;
            let r = b.creceptance.forward(g, xr)?;
            let r = g.sigmoid(r);
            let out = g.mul(r, kv)?;
            let out = g.reshape(out, &[batch * t, h])?;
            x = g.add(x, out)?;
        }
        let x = self.norm_out.forward(g, x)?;
        self.head.forward(g, x)
    }

    /// Mean next-token cross-entropy per sentence, summed over the batch and
    /// divided by `denom`. Rows are `[BOS, words.., EOS]` of any length >= 2.
    pub fn sentence_loss<T: Real>(&self, g: &mut Graph<'_, T>, ids: &[Vec<usize>], inject: Option<&[Var]>, denom: f64) -> Result<Var> {
        if let Some(r) = ids.iter().find(|r| r.len() < 2) {
            return Err(Error::shape("sentence_loss", format!("sentence of {} tokens; need at least 2", r.len())));
        }
        let t = ids.iter().map(Vec::len).max().unwrap_or(0);
        let padded: Vec<Vec<usize>> =
            ids.iter().map(|r| r.iter().copied().chain(std::iter::repeat(PAD)).take(t).collect()).collect();
        let logits = self.forward(g, &padded, inject)?;
        let mut targets = Vec::with_capacity(ids.len() * t);
        let mut weights = Vec::with_capacity(ids.len() * t);
        for (r, orig) in padded.iter().zip(ids) {
            let len = orig.len();
            for p in 0..t {
                let valid = p + 1 < len;
                targets.push(if valid { r[p + 1] } else { PAD });
                weights.push(if valid { T::from_f64_lossy(1.0 / ((len - 1) as f64 * denom)) } else { T::zero() });
            }
        }
        g.cross_entropy_weighted(logits, &targets, weights)
    }
}

/// Per-block recurrent state for token-by-token decoding.
#[derive(Clone, Debug)]
pub struct RecurrentState {
    prev_time: Vec<Vec<f32>>,
    prev_channel: Vec<Vec<f32>>,
    num: Vec<Vec<f32>>,
    den: Vec<Vec<f32>>,
    max: Vec<Vec<f32>>,
}

fn layer_norm(x: &[f32], ln: &LayerNorm, store: &ParamStore) -> Vec<f32> {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let rs = 1.0 / (var + ln.eps).sqrt();
    let (gain, bias) = (store.value(ln.gain).data(), store.value(ln.bias).data());
    x.iter().enumerate().map(|(i, v)| (v - mean) * rs * gain[i] + bias[i]).collect()
}

fn matvec(l: &Linear, x: &[f32], store: &ParamStore) -> Vec<f32> {
    let w = store.value(l.w).data();
    let n = x.len();
    let mut out: Vec<f32> = (0..l.outputs).map(|o| w[o * n..(o + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum()).collect();
    if let Some(b) = l.b {
        for (o, bv) in out.iter_mut().zip(store.value(b).data()) {
            *o += bv;
        }
    }
    out
}

fn mixed(x: &[f32], prev: &[f32], mix: &[f32]) -> Vec<f32> {
    x.iter().zip(prev).zip(mix).map(|((a, p), m)| p + (a - p) * m).collect()
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

impl Rwkv {
    pub fn initial_state(&self) -> RecurrentState {
        let (b, h) = (self.blocks.len(), self.hidden);
        RecurrentState {
            prev_time: vec![vec![0.0; h]; b],
            prev_channel: vec![vec![0.0; h]; b],
            num: vec![vec![0.0; h]; b],
            den: vec![vec![0.0; h]; b],
            max: vec![vec![f32::NEG_INFINITY; h]; b],
        }
    }

    /// Consumes one token and returns next-token logits, at constant cost in
    /// the length of the prefix.
    pub fn step(&self, store: &ParamStore, state: &mut RecurrentState, token: usize, inject: Option<&[Vec<f32>]>) -> Result<Vec<f32>> {
        if token >= self.vocab {
            return Err(Error::TokenOutOfRange { id: token, size: self.vocab });
        }
        let h = self.hidden;
        let emb = &store.value(self.embed).data()[token * h..(token + 1) * h];
        let mut x = layer_norm(emb, &self.norm_in, store);
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(s) = inject {
                for (xv, sv) in x.iter_mut().zip(&s[i]) {
                    *xv += sv;
                }
            }
            let n = layer_norm(&x, &b.norm_time, store);
            let prev = std::mem::replace(&mut state.prev_time[i], n.clone());
            let k = matvec(&b.key, &mixed(&n, &prev, store.value(b.mix_k).data()), store);
            let v = matvec(&b.value, &mixed(&n, &prev, store.value(b.mix_v).data()), store);
            let r = matvec(&b.receptance, &mixed(&n, &prev, store.value(b.mix_r).data()), store);
            let (decay, first) = (store.value(b.decay).data(), store.value(b.first).data());
            let mut rw = vec![0.0; h];
            for c in 0..h {
                let (num, den, max) = (state.num[i][c], state.den[i][c], state.max[i][c]);
                let ww = first[c] + k[c];
                let p = max.max(ww);
                let (e1, e2) = ((max - p).exp(), (ww - p).exp());
                rw[c] = sigmoid(r[c]) * (e1 * num + e2 * v[c]) / (e1 * den + e2);
                let ww = max - decay[c].exp();
                let p = ww.max(k[c]);
                let (e1, e2) = ((ww - p).exp(), (k[c] - p).exp());
                state.num[i][c] = e1 * num + e2 * v[c];
                state.den[i][c] = e1 * den + e2;
                state.max[i][c] = p;
            }
            for (xv, o) in x.iter_mut().zip(matvec(&b.output, &rw, store)) {
                *xv += o;
            }
            let n = layer_norm(&x, &b.norm_channel, store);
            let prev = std::mem::replace(&mut state.prev_channel[i], n.clone());
            let k: Vec<f32> =
                matvec(&b.ckey, &mixed(&n, &prev, store.value(b.cmix_k).data()), store).into_iter().map(|v| v.max(0.0).powi(2)).collect();
            let kv = matvec(&b.cvalue, &k, store);
            let r = matvec(&b.creceptance, &mixed(&n, &prev, store.value(b.cmix_r).data()), store);
            for c in 0..h {
                x[c] += sigmoid(r[c]) * kv[c];
            }
        }
        let x = layer_norm(&x, &self.norm_out, store);
        Ok(matvec(&self.head, &x, store))
    }

    /// Feeds `prompt` and then extends it greedily until EOS or `max_len`.
    pub fn greedy(&self, store: &ParamStore, prompt: &[usize], eos: usize, inject: Option<&[Vec<f32>]>) -> Result<Vec<usize>> {
        let mut state = self.initial_state();
        let mut out = prompt.to_vec();
        let mut logits = Vec::new();
        for &t in prompt {
            logits = self.step(store, &mut state, t, inject)?;
        }
        while out.len() < self.max_len {
            let next = (0..logits.len()).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap_or(eos);
            out.push(next);
            if next == eos {
                break;
            }
            logits = self.step(store, &mut state, next, inject)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build() -> (ParamStore, Rwkv) {
        let mut store = ParamStore::new();
        let lm = Rwkv::new(&mut store, &mut ChaCha8Rng::seed_from_u64(2), &Config::tiny().lm, 11).unwrap();
        (store, lm)
    }

    #[test]
    fn logits_shape_and_token_range() {
        let (store, lm) = build();
        let mut g: Graph = Graph::frozen(&store);
        let l = lm.forward(&mut g, &[vec![1, 4, 5, 2], vec![1, 3, 3, 2]], None).unwrap();
        assert_eq!(g.shape(l), [8, 11]);
        assert!(matches!(lm.forward(&mut g, &[vec![1, 11]], None), Err(Error::TokenOutOfRange { id: 11, size: 11 })));
    }

    #[test]
    fn recurrent_decoding_matches_parallel_forward() {
        let (store, lm) = build();
        let ids = vec![1, 7, 4, 9, 3, 2];
        let mut g: Graph = Graph::frozen(&store);
        let l = lm.forward(&mut g, std::slice::from_ref(&ids), None).unwrap();
        let par = g.value(l).data().to_vec();
        let mut state = lm.initial_state();
        for (t, &id) in ids.iter().enumerate() {
            let rec = lm.step(&store, &mut state, id, None).unwrap();
            for c in 0..11 {
                assert!((rec[c] - par[t * 11 + c]).abs() < 1e-4, "t={t} c={c}");
            }
        }
    }

    #[test]
    fn causal_in_later_tokens() {
        let (store, lm) = build();
        let mut g: Graph = Graph::frozen(&store);
        let a = lm.forward(&mut g, &[vec![1, 5, 6, 7, 2]], None).unwrap();
        let b = lm.forward(&mut g, &[vec![1, 5, 6, 9, 4]], None).unwrap();
        let (a, b) = (g.value(a).data(), g.value(b).data());
        assert_eq!(&a[..3 * 11], &b[..3 * 11]);
        assert_ne!(&a[3 * 11..], &b[3 * 11..]);
    }

    #[test]
    fn sentence_loss_limits() {
        let (store, lm) = build();
        let mut g: Graph<f64> = Graph::frozen(&store);
        assert!(lm.sentence_loss(&mut g, &[vec![1]], None, 1.0).is_err());
        // uniform logits give ln W regardless of targets
        let logits = g.constant(Tensor::zeros(&[3, 11]));
        let ce = g.cross_entropy(logits, &[4, 2, 7]).unwrap();
        assert!((g.value(ce).item() - (11f64).ln()).abs() < 1e-12);
        let mut peaked = vec![0.0; 33];
        for (r, t) in [4usize, 2, 7].into_iter().enumerate() {
            peaked[r * 11 + t] = 1e3;
        }
        let logits = g.constant(Tensor::new(&[3, 11], peaked).unwrap());
        let ce = g.cross_entropy(logits, &[4, 2, 7]).unwrap();
        assert!(g.value(ce).item().abs() < 1e-12);
    }

    #[test]
    fn padding_does_not_change_sentence_loss() {
        let (store, lm) = build();
        let mut g: Graph<f64> = Graph::frozen(&store);
        let a = vec![1, 5, 6, 2];
        let b = vec![1, 4, 4, 8, 9, 2];
        let pair = lm.sentence_loss(&mut g, &[a.clone(), b.clone()], None, 2.0).unwrap();
        let la = lm.sentence_loss(&mut g, &[a], None, 1.0).unwrap();
        let lb = lm.sentence_loss(&mut g, &[b], None, 1.0).unwrap();
        let expect = 0.5 * (g.value(la).item() + g.value(lb).item());
        assert!((g.value(pair).item() - expect).abs() < 1e-10);
    }
}
