//! In-repo pretraining of the language model on the instruction corpus.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rwkv::Rwkv;
use crate::config::PretrainConfig;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, RAdam, RAdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    /// Per-epoch mean next-token cross-entropy (nats per token).
    pub losses: Vec<f64>,
    pub final_loss: f64,
    /// Conditional entropy of the corpus itself: the lowest loss any model
    /// can reach on it.
    pub entropy_floor: f64,
    pub excess: f64,
    pub converged: bool,
}

/// Mean over all predicted tokens of `-ln p(token | prefix)` under the
/// corpus's own empirical prefix statistics.
pub fn entropy_floor(corpus: &[Vec<usize>]) -> f64 {
    let mut prefix: HashMap<&[usize], usize> = HashMap::new();
    for s in corpus {
        for t in 1..s.len() {
            *prefix.entry(&s[..t]).or_default() += 1;
        }
    }
    let mut extended: HashMap<&[usize], usize> = HashMap::new();
    for s in corpus {
        for t in 2..=s.len() {
            *extended.entry(&s[..t]).or_default() += 1;
        }
    }
    let (mut total, mut count) = (0.0, 0usize);
    for s in corpus {
        for t in 1..s.len() {
            let p = extended[&s[..=t]] as f64 / prefix[&s[..t]] as f64;
            total -= p.ln();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Token-weighted mean next-token cross-entropy of `corpus`.
pub fn corpus_loss(lm: &Rwkv, store: &ParamStore, corpus: &[Vec<usize>]) -> Result<f64> {
    let tokens: usize = corpus.iter().map(|s| s.len() - 1).sum();
    let mut g: Graph<f32> = Graph::frozen(store);
    let loss = token_loss(lm, &mut g, corpus, tokens as f64)?;
    Ok(g.value(loss).item() as f64)
}

fn token_loss(lm: &Rwkv, g: &mut Graph<'_, f32>, batch: &[Vec<usize>], tokens: f64) -> Result<crate::tensor::Var> {
    // weighting each sentence by its length turns the per-sentence means into a per-token mean
    let mut total = None;
    let mut by_len: HashMap<usize, Vec<Vec<usize>>> = HashMap::new();
    for s in batch {
        by_len.entry(s.len()).or_default().push(s.clone());
    }
    let mut lens: Vec<usize> = by_len.keys().copied().collect();
    lens.sort_unstable();
    for len in lens {
        let rows = &by_len[&len];
        let l = lm.sentence_loss(g, rows, None, tokens / (len - 1) as f64)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::Training("empty pretraining batch".into()))
}

/// Trains every language-model parameter of `store` on `corpus` and reports
/// whether the loss came within `cfg.max_excess_nats` of the entropy floor.
pub fn pretrain(lm: &Rwkv, store: &mut ParamStore, corpus: &[Vec<usize>], cfg: &PretrainConfig) -> Result<PretrainReport> {
    if corpus.is_empty() || corpus.iter().any(|s| s.len() < 2) {
        return Err(Error::Training("pretraining corpus needs sentences of at least 2 tokens".into()));
    }
    let ids = store.ids_in(&[crate::tensor::ParamGroup::Language]);
    let mut opt = RAdam::new(RAdamConfig::with_lr(cfg.lr), store, &ids);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let batch = cfg.batch.max(1);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let all_tokens: usize = corpus.iter().map(|s| s.len() - 1).sum();
        for chunk in order.chunks(batch) {
            let rows: Vec<Vec<usize>> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let tokens: usize = rows.iter().map(|s| s.len() - 1).sum();
            let mut g: Graph = Graph::new(store, &ids);
            let loss = token_loss(lm, &mut g, &rows, tokens as f64)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Training(format!("non-finite pretraining loss at epoch {epoch}")));
            }
            epoch_loss += value * tokens as f64 / all_tokens as f64;
            let grads = g.backward(loss)?;
            let mut pg = g.param_grads(&grads);
            drop(g);
            opt.step(store, &mut pg)?;
        }
        losses.push(epoch_loss);
        if epoch % 50 == 0 {
            log::info!("pretrain epoch {epoch}: {epoch_loss:.4} nats/token");
        }
    }
    let final_loss = corpus_loss(lm, store, corpus)?;
    let floor = entropy_floor(corpus);
    let excess = final_loss - floor;
    Ok(PretrainReport {
        epochs: cfg.epochs,
        losses,
        final_loss,
        entropy_floor: floor,
        excess,
        converged: excess < cfg.max_excess_nats,
    })
}
