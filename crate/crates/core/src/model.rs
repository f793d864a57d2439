//! The assembled network: vision, sequence core, frozen language model and
//! SLV machinery over one parameter store, plus a step-wise policy for
//! closed-loop control.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::language::{Rwkv, Vocabulary};
use crate::sequence::{LstmState, SequenceCore, TOKENS};
use crate::slv::Slv;
use crate::tensor::checkpoint::{self, Manifest};
use crate::tensor::{Graph, ParamGroup, ParamStore, Real, Tensor, Var};
use crate::vision::Vision;

pub struct Model {
    pub cfg: Config,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub vision: Vision,
    pub core: SequenceCore,
    pub lm: Rwkv,
    pub slv: Slv,
}

/// Per-frame outputs of the perception stage.
pub struct Observed {
    /// `[N, 6, F, F]`
    pub features: Var,
    /// Encoded attention points `[N, 12]`.
    pub points: Var,
    /// Related tokens flattened to `[N, 7*D]`.
    pub tokens: Var,
}

impl Model {
    /// Fresh parameters for `sequences` training sequences. The language
    /// model is drawn from its own seed so that it is identical for any
    /// sequence count.
    pub fn new(cfg: &Config, vocab: Vocabulary, sequences: usize) -> Result<Self> {
        let mut store = ParamStore::new();
        let w = cfg.lm.vocab_size.unwrap_or(vocab.len());
        if w < vocab.len() {
            return Err(Error::Config(format!("lm.vocab_size {w} is smaller than the vocabulary ({})", vocab.len())));
        }
        let lm = Rwkv::new(&mut store, &mut ChaCha8Rng::seed_from_u64(cfg.pretrain.seed), &cfg.lm, w)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.model.init_seed);
        let vision = Vision::new(&mut store, &mut rng, &cfg.model)?;
        let core = SequenceCore::new(&mut store, &mut rng, &cfg.model)?;
        let slv = Slv::new(&mut store, &mut rng, &cfg.model, &cfg.lm, sequences)?;
        Ok(Self { cfg: cfg.clone(), vocab, store, vision, core, lm, slv })
    }

    /// Overwrites the language model from a frozen LM checkpoint.
    pub fn load_lm(&mut self, path: &Path) -> Result<Manifest> {
        let loaded = checkpoint::load(path)?;
        if !loaded.manifest.frozen {
            return Err(Error::Checkpoint(format!("{} is not marked frozen", path.display())));
        }
        if let Some((name, _, _)) = loaded.tensors.iter().find(|(_, g, _)| *g != ParamGroup::Language) {
            return Err(Error::Checkpoint(format!("LM checkpoint holds non-LM tensor `{name}`")));
        }
        loaded.apply(&mut self.store)?;
        Ok(loaded.manifest)
    }

    pub fn save_lm(&self, path: &Path) -> Result<Manifest> {
        checkpoint::save(path, &self.store, |g| g == ParamGroup::Language, true, serde_json::to_value(&self.cfg.lm)?)
    }

    /// Saves the whole model with its vocabulary and normalization next to it.
    pub fn save(&self, dir: &Path, norm: &Normalization) -> Result<Manifest> {
        std::fs::create_dir_all(dir)?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        std::fs::write(dir.join("normalization.json"), serde_json::to_string_pretty(norm)?)?;
        checkpoint::save(&dir.join("model.ckpt"), &self.store, |_| true, false, serde_json::to_value(&self.cfg)?)
    }

    /// Loads a directory written by [`Model::save`].
    pub fn load(dir: &Path) -> Result<(Self, Normalization)> {
        let loaded = checkpoint::load(&dir.join("model.ckpt"))?;
        let cfg: Config = serde_json::from_value(loaded.manifest.config.clone())?;
        let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
        let norm: Normalization = serde_json::from_str(&std::fs::read_to_string(dir.join("normalization.json"))?)?;
        let sequences = loaded
            .tensors
            .iter()
            .find(|(n, _, _)| n == crate::slv::TABLE)
            .map(|(_, _, t)| t.shape()[0])
            .ok_or_else(|| Error::Checkpoint("checkpoint has no SLV table".into()))?;
        let mut model = Self::new(&cfg, vocab, sequences)?;
        loaded.apply(&mut model.store)?;
        Ok((model, norm))
    }

    pub fn lm_digest(&self) -> String {
        self.store.digest(|p| p.group == ParamGroup::Language)
    }

    /// Digest of everything except the inference SLV.
    pub fn fixed_digest(&self) -> String {
        self.store.digest(|p| p.name != crate::slv::INFERENCE)
    }

    /// Perception for `[N, 3, n, n]` images and masks and `[N, J]` joints.
    pub fn observe<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        images: Var,
        mask_a: Var,
        mask_b: Var,
        joints: Var,
        capture: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Observed> {
        let features = self.vision.encode_image(g, images)?;
        let points = self.vision.extract_points(g, mask_a, mask_b)?;
        let tokens = self.core.tokenize(g, joints, points)?;
        let related = self.core.relate(g, tokens, capture)?;
        let n = g.shape(joints)[0];
        let tokens = g.reshape(related, &[n, TOKENS * self.core.width])?;
        Ok(Observed { features, points, tokens })
    }

    /// Output shape of every stage for one frame and a three-token sentence,
    /// read off an actual forward pass.
    pub fn structural_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut out = self.vision.stage_shapes(&self.store);
        let mut g: Graph<f32> = Graph::frozen(&self.store);
        let n = self.cfg.model.image_size;
        let img = g.constant(Tensor::full(&[1, 3, n, n], 0.5));
        let joints = g.constant(Tensor::full(&[1, self.core.joints], 0.5));
        let points = self.vision.extract_points(&mut g, img, img)?;
        let tokens = self.core.tokenize(&mut g, joints, points)?;
        out.push(("joint token".into(), vec![g.shape(tokens)[2]]));
        out.push(("point tokens".into(), vec![g.shape(tokens)[2]]));
        let related = self.core.relate(&mut g, tokens, None)?;
        let s = g.shape(related);
        out.push(("transformer encoder".into(), vec![s[2], s[1]]));
        let x = g.reshape(related, &[1, TOKENS * self.core.width])?;
        let state = self.core.zero_state(&mut g, 1);
        let slv = self.slv.inference(&mut g);
        let proj = self.slv.project(&mut g, slv)?;
        let (h, _) = self.core.step(&mut g, x, &state, Some(&proj.lstm))?;
        out.push(("lstm".into(), vec![g.shape(h)[1]]));
        let (p, j) = self.core.heads(&mut g, h)?;
        out.push(("point head".into(), vec![g.shape(p)[1]]));
        out.push(("joint head".into(), vec![g.shape(j)[1]]));
        let logits = self.lm.forward(&mut g, &[vec![1, 0, 2]], Some(&proj.lm))?;
        out.push(("rwkv block".into(), vec![self.lm.hidden]));
        out.push(("rwkv head".into(), vec![g.shape(logits)[1]]));
        out.push(("shared latent".into(), vec![g.shape(slv)[1]]));
        out.push(("slv to lstm".into(), vec![g.shape(proj.lstm[0])[1]]));
        out.push(("slv to rwkv".into(), vec![g.shape(proj.lm[0])[1]]));
        Ok(out)
    }
}

/// Outputs of one closed-loop step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Predicted next joints in simulator units.
    pub joints: Vec<f32>,
    /// Predicted next joints in model units.
    pub joints_normalized: Vec<f32>,
    pub encoded_points: Vec<f32>,
    pub predicted_points: Vec<f32>,
    /// Hidden state of every LSTM layer after the step.
    pub hidden: Vec<Vec<f32>>,
    /// Attention probabilities per transformer layer, `[heads, 7, 7]`.
    pub attention: Vec<Tensor<f32>>,
}

/// Step-wise closed-loop driver holding the LSTM state and a fixed SLV.
pub struct Policy<'m> {
    model: &'m Model,
    norm: &'m Normalization,
    h: Vec<Tensor<f32>>,
    c: Vec<Tensor<f32>>,
    inject: Vec<Tensor<f32>>,
}

impl<'m> Policy<'m> {
    pub fn new(model: &'m Model, norm: &'m Normalization, slv: &[f32]) -> Result<Self> {
        let mut g: Graph<f32> = Graph::frozen(&model.store);
        let s = g.constant(Tensor::new(&[1, model.slv.dim], slv.to_vec())?);
        let proj = model.slv.project(&mut g, s)?;
        let inject = proj.lstm.iter().map(|&v| g.value(v).clone()).collect();
        let zero = Tensor::zeros(&[1, model.core.hidden]);
        let layers = model.core.lstm_layers();
        Ok(Self { model, norm, h: vec![zero.clone(); layers], c: vec![zero; layers], inject })
    }

    /// Feeds one observation (raw image and joints, raw masks) and predicts
    /// the next joints.
    pub fn step(&mut self, image: &[f32], mask_a: &[f32], mask_b: &[f32], joints: &[f32]) -> Result<StepOutput> {
        let m = self.model;
        let n = m.cfg.model.image_size;
        let jd = m.core.joints;
        let raw: Vec<f32> = joints.iter().copied().chain(std::iter::repeat(0.0)).take(jd).collect();
        let mut g: Graph<f32> = Graph::frozen(&m.store);
        let img = g.constant(Tensor::new(&[1, 3, n, n], self.norm.pixels(image))?);
        let ma = g.constant(Tensor::new(&[1, 3, n, n], mask_a.to_vec())?);
        let mb = g.constant(Tensor::new(&[1, 3, n, n], mask_b.to_vec())?);
        let jv = g.constant(Tensor::new(&[1, jd], self.norm.joints(&raw))?);
        let mut attention = Vec::new();
        let obs = m.observe(&mut g, img, ma, mb, jv, Some(&mut attention))?;
        let state = LstmState {
            h: self.h.iter().map(|t| g.constant(t.clone())).collect(),
            c: self.c.iter().map(|t| g.constant(t.clone())).collect(),
        };
        let inject: Vec<Var> = self.inject.iter().map(|t| g.constant(t.clone())).collect();
        let (top, next) = m.core.step(&mut g, obs.tokens, &state, Some(&inject))?;
        let (p, j) = m.core.heads(&mut g, top)?;
        self.h = next.h.iter().map(|&v| g.value(v).clone()).collect();
        self.c = next.c.iter().map(|&v| g.value(v).clone()).collect();
        let joints_normalized = g.value(j).data().to_vec();
        Ok(StepOutput {
            joints: self.norm.denormalize_joints(&joints_normalized),
            joints_normalized,
            encoded_points: g.value(obs.points).data().to_vec(),
            predicted_points: g.value(p).data().to_vec(),
            hidden: self.h.iter().map(|t| t.data().to_vec()).collect(),
            attention: attention.into_iter().map(|t| t.reshape(&t.shape()[1..]).expect("drop batch axis")).collect(),
        })
    }
}
