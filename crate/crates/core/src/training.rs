//! The composite imitation loss and the joint training loop.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{LossWeights, TrainConfig};
use crate::data::{augment, Normalization, TrainEpisode};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::sim::InstructionBank;
use crate::slv::{trainable_partition, Phase};
use crate::tensor::{Graph, ParamGrads, RAdam, RAdamConfig, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ja: f64,
    pub l_img: f64,
    pub l_pt: f64,
    pub l_dsc: f64,
    pub l_train: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_ja, self.l_img, self.l_pt, self.l_dsc, self.l_train].iter().all(|v| v.is_finite())
    }

    fn add_scaled(&mut self, other: &Self, c: f64) {
        self.l_ja += c * other.l_ja;
        self.l_img += c * other.l_img;
        self.l_pt += c * other.l_pt;
        self.l_dsc += c * other.l_dsc;
        self.l_train += c * other.l_train;
    }
}

/// Tape handles of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub ja: Var,
    pub img: Var,
    pub pt: Var,
    pub dsc: Var,
    pub total: Var,
}

impl LossVars {
    pub fn read<T: Real>(&self, g: &Graph<'_, T>) -> LossBreakdown {
        let v = |x: Var| g.value(x).item().to_f64().unwrap_or(f64::NAN);
        LossBreakdown { l_ja: v(self.ja), l_img: v(self.img), l_pt: v(self.pt), l_dsc: v(self.dsc), l_train: v(self.total) }
    }
}

fn lift<T: Real>(shape: &[usize], data: Vec<f32>) -> Result<Tensor<T>> {
    Ok(T::lift(&Tensor::new(shape, data)?))
}

/// Builds every loss term for `batch` on `g`. Each term is a per-sequence
/// mean over prediction steps (and elements), summed over the batch and
/// divided by `denom`.
pub fn build_loss<T: Real>(
    model: &Model,
    g: &mut Graph<'_, T>,
    batch: &[&TrainEpisode],
    weights: LossWeights,
    detach_targets: bool,
    denom: f64,
) -> Result<LossVars> {
    if batch.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    if let Some(ep) = batch.iter().find(|e| e.len < 2) {
        return Err(Error::Training(format!("sequence {} has {} frames; need at least 2", ep.sequence_id, ep.len)));
    }
    let n = model.cfg.model.image_size;
    let frame = 3 * n * n;
    let jd = model.core.joints;
    let offsets: Vec<usize> = batch.iter().scan(0, |acc, e| {
        let o = *acc;
        *acc += e.len;
        Some(o)
    })
    .collect();
    let frames: usize = batch.iter().map(|e| e.len).sum();
    let cat = |f: fn(&TrainEpisode) -> &Vec<f32>| batch.iter().flat_map(|e| f(e).iter().copied()).collect::<Vec<f32>>();
    let images = g.constant(lift(&[frames, 3, n, n], cat(|e| &e.images))?);
    let mask_a = g.constant(lift(&[frames, 3, n, n], cat(|e| &e.mask_a))?);
    let mask_b = g.constant(lift(&[frames, 3, n, n], cat(|e| &e.mask_b))?);
    let joints = g.constant(lift(&[frames, jd], cat(|e| &e.joints))?);
    let obs = model.observe(g, images, mask_a, mask_b, joints, None)?;

    let ids: Vec<usize> = batch.iter().map(|e| e.sequence_id).collect();
    let slv = model.slv.lookup(g, &ids)?;
    let proj = model.slv.project(g, slv)?;

    let steps = batch.iter().map(|e| e.len - 1).max().unwrap_or(0);
    let mut state = model.core.zero_state(g, batch.len());
    let (mut hs, mut cur, mut next, mut row_scale) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in 0..steps {
        let rows: Vec<usize> = batch.iter().zip(&offsets).map(|(e, &o)| o + s.min(e.len - 1)).collect();
        let x = g.index_select(obs.tokens, &rows)?;
        let (h, st) = model.core.step(g, x, &state, Some(&proj.lstm))?;
        state = st;
        let valid: Vec<usize> = (0..batch.len()).filter(|&b| s + 1 < batch[b].len).collect();
        hs.push(g.index_select(h, &valid)?);
        for &b in &valid {
            cur.push(offsets[b] + s);
            next.push(offsets[b] + s + 1);
            row_scale.push(1.0 / ((batch[b].len - 1) as f64 * denom));
        }
    }
    let h = g.concat(&hs, 0)?;
    let (p_dec, j_hat) = model.core.heads(g, h)?;
    let w = |dim: usize| row_scale.iter().map(|&r| T::from_f64_lossy(r / dim as f64)).collect::<Vec<T>>();

    let targets = g.constant(lift(&[frames, jd], cat(|e| &e.target_joints))?);
    let j_next = g.index_select(targets, &next)?;
    let ja = g.weighted_sq_err(j_hat, j_next, w(jd))?;

    let p_next = g.index_select(obs.points, &next)?;
    let p_next = if detach_targets { g.detach(p_next) } else { p_next };
    let pdim = g.shape(p_next)[1];
    let pt = g.weighted_sq_err(p_dec, p_next, w(pdim))?;

    let features = g.index_select(obs.features, &cur)?;
    let heat = model.vision.heatmaps(g, p_dec)?;
    let decoded = model.vision.decode(g, features, heat)?;
    let clean = g.constant(lift(&[frames, 3, n, n], cat(|e| &e.target_images))?);
    let i_next = g.index_select(clean, &next)?;
    let img = g.weighted_sq_err(decoded, i_next, w(frame))?;

    let sentences: Vec<Vec<usize>> = batch.iter().map(|e| e.tokens.clone()).collect();
    let dsc = model.lm.sentence_loss(g, &sentences, Some(&proj.lm), denom)?;

    let a = g.scale(ja, T::from_f64_lossy(weights.alpha as f64));
    let vis = g.add(img, pt)?;
    let b = g.scale(vis, T::from_f64_lossy(weights.beta as f64));
    let c = g.scale(dsc, T::from_f64_lossy(weights.gamma as f64));
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(LossVars { ja, img, pt, dsc, total })
}

/// Loss of `batch` under the current parameters, averaged per sequence.
pub fn compute_loss(model: &Model, batch: &[&TrainEpisode], weights: LossWeights, detach_targets: bool) -> Result<LossBreakdown> {
    let mut g: Graph<f32> = Graph::frozen(&model.store);
    let vars = build_loss(model, &mut g, batch, weights, detach_targets, batch.len() as f64)?;
    Ok(vars.read(&g))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    LossThreshold,
    EarlyStop,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub history: Vec<LossBreakdown>,
    pub stop: StopReason,
    pub lm_digest_before: String,
    pub lm_digest_after: String,
    pub seconds: f64,
}

pub struct TrainOptions<'a> {
    pub config: &'a TrainConfig,
    pub noise_sigma: f32,
    /// Instruction swap probability per episode and step.
    pub paraphrase: f64,
    /// Run directory for the CSV log and checkpoints.
    pub out: Option<&'a Path>,
    pub norm: &'a Normalization,
}

const CSV_HEADER: &str = "epoch,l_ja,l_img,l_pt,l_dsc,l_train";

/// Jointly optimizes every non-LM parameter and the SLV table.
pub fn train(model: &mut Model, episodes: &[TrainEpisode], opts: &TrainOptions<'_>) -> Result<TrainReport> {
    let cfg = opts.config;
    if episodes.is_empty() {
        return Err(Error::Training("no training episodes".into()));
    }
    let start = std::time::Instant::now();
    let lm_before = model.lm_digest();
    let part = trainable_partition(&model.store, Phase::Training)?;
    let table = model.slv.table;
    let (shared, own): (Vec<_>, Vec<_>) = part.trainable.iter().partition(|&&id| id != table || cfg.slv_lr.is_none());
    let mut opt = RAdam::new(RAdamConfig::with_lr(cfg.lr), &model.store, &shared);
    let mut slv_opt = RAdam::new(RAdamConfig::with_lr(cfg.slv_lr.unwrap_or(cfg.lr)), &model.store, &own);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bank = InstructionBank::new();
    let batch_size = if cfg.batch_size == 0 { episodes.len() } else { cfg.batch_size.min(episodes.len()) };
    let mut log = match opts.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut f = fs::File::create(dir.join("train_log.csv"))?;
            writeln!(f, "{CSV_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let dim = model.slv.dim;
    let mut history = Vec::new();
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut stop = StopReason::MaxEpochs;
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    for epoch in 0..cfg.epochs {
        if cfg.cosine_decay {
            let decay = 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos());
            opt.config.lr = decay * cfg.lr;
            slv_opt.config.lr = decay * cfg.slv_lr.unwrap_or(cfg.lr);
        }
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        for chunk in order.chunks(batch_size) {
            let mut augmented = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let para = (opts.paraphrase > 0.0 && rng.random::<f64>() < opts.paraphrase).then_some((&bank, &model.vocab));
                augmented.push(augment(&episodes[i], opts.noise_sigma, para, &mut rng)?);
            }
            let batch: Vec<&TrainEpisode> = augmented.iter().collect();
            let (breakdown, mut grads) = {
                let mut g: Graph = Graph::new(&model.store, &part.trainable);
                let vars = build_loss(model, &mut g, &batch, cfg.weights, cfg.detach_point_targets, chunk.len() as f64)?;
                let breakdown = vars.read(&g);
                if !breakdown.is_finite() {
                    drop(g);
                    return Err(abort(model, opts, epoch, &breakdown));
                }
                let mut loss = vars.total;
                if cfg.slv_l2 > 0.0 {
                    let ids: Vec<usize> = batch.iter().map(|e| e.sequence_id).collect();
                    let s = model.slv.lookup(&mut g, &ids)?;
                    let sq = g.square(s);
                    let sq = g.sum(sq);
                    let reg = g.scale(sq, cfg.slv_l2 / chunk.len() as f32);
                    loss = g.add(loss, reg)?;
                }
                let grads = g.backward(loss)?;
                (breakdown, g.param_grads(&grads))
            };
            clip(&mut grads, cfg.grad_clip);
            let before = model.store.value(table).clone();
            if !slv_opt.managed().is_empty() {
                let mut own = ParamGrads::new(&model.store);
                if let Some(g) = grads.get(table) {
                    own.accumulate(table, g);
                }
                slv_opt.step(&mut model.store, &mut own)?;
            }
            opt.step(&mut model.store, &mut grads)?;
            // sequences outside the batch keep their SLVs despite optimizer momentum
            let mut in_batch = vec![false; model.slv.sequences];
            for e in &batch {
                in_batch[e.sequence_id] = true;
            }
            let updated = model.store.value_mut(table).data_mut();
            for (s, keep) in in_batch.iter().enumerate() {
                if !keep {
                    updated[s * dim..(s + 1) * dim].copy_from_slice(&before.data()[s * dim..(s + 1) * dim]);
                }
            }
            epoch_loss.add_scaled(&breakdown, chunk.len() as f64 / episodes.len() as f64);
        }
        if let Some(f) = log.as_mut() {
            let e = &epoch_loss;
            writeln!(f, "{epoch},{},{},{},{},{}", e.l_ja, e.l_img, e.l_pt, e.l_dsc, e.l_train)?;
        }
        if epoch % 25 == 0 {
            log::info!("epoch {epoch}: l_train {:.5} (ja {:.5}, dsc {:.4})", epoch_loss.l_train, epoch_loss.l_ja, epoch_loss.l_dsc);
        }
        history.push(epoch_loss);
        if let (Some(dir), true) = (opts.out, cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
            model.save(&dir.join("checkpoints").join(format!("epoch_{:05}", epoch + 1)), opts.norm)?;
        }
        if epoch_loss.l_train < cfg.loss_threshold as f64 {
            stop = StopReason::LossThreshold;
            break;
        }
        if epoch_loss.l_train < best - cfg.early_stop_delta as f64 {
            best = epoch_loss.l_train;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                stop = StopReason::EarlyStop;
                break;
            }
        }
    }
    if let Some(dir) = opts.out {
        model.save(dir, opts.norm)?;
    }
    let lm_after = model.lm_digest();
    if lm_after != lm_before {
        return Err(Error::Training("language model parameters changed during training".into()));
    }
    Ok(TrainReport {
        epochs: history.len(),
        history,
        stop,
        lm_digest_before: lm_before,
        lm_digest_after: lm_after,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn clip(grads: &mut ParamGrads, max: Option<f32>) {
    if let Some(max) = max {
        let norm = grads.l2_norm();
        if norm > max {
            grads.scale(max / norm);
        }
    }
}

/// The parameters have not been touched by the failing step; keep them.
fn abort(model: &Model, opts: &TrainOptions<'_>, epoch: usize, b: &LossBreakdown) -> Error {
    if let Some(dir) = opts.out {
        if let Err(e) = model.save(&dir.join("last_good"), opts.norm) {
            log::error!("could not save the last good checkpoint: {e}");
        }
    }
    Error::Training(format!("non-finite loss at epoch {epoch}: {b:?}"))
}

/// Trailing moving average of `xs` over `window` entries.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..xs.len()).map(|i| {
        let lo = (i + 1).saturating_sub(w);
        xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
    })
    .collect()
}
