//! Demonstration datasets: generation, on-disk layout, normalization and
//! augmentation.
//!
//! A dataset directory holds `dataset.json` plus one `episode_NNNN.json`
//! manifest and one `episode_NNNN.bin` payload per episode. The payload is
//! little-endian `f32`: images, mask A, mask B (each `[T, 3, n, n]`), then
//! joints `[T, J]`.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::language::Vocabulary;
use crate::sim::{demonstrate, sample_scene, GroundTruth, InstructionBank, PositionMode, Scene, Split, Task};

const LO: f64 = 0.1;
const HI: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub sequence_id: usize,
    pub task: Task,
    pub instruction: String,
    pub truth: GroundTruth,
    pub initial: Scene,
    pub len: usize,
    pub image_size: usize,
    pub joint_dim: usize,
    pub images: Vec<f32>,
    pub mask_a: Vec<f32>,
    pub mask_b: Vec<f32>,
    pub joints: Vec<f32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EpisodeManifest {
    sequence_id: usize,
    task: Task,
    instruction: String,
    truth: GroundTruth,
    initial: Scene,
    len: usize,
    image_size: usize,
    joint_dim: usize,
    seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub episodes: usize,
    pub tasks: Vec<Task>,
    pub config: Config,
}

impl Episode {
    pub fn frame_len(&self) -> usize {
        3 * self.image_size * self.image_size
    }

    pub fn image(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.images[t * n..(t + 1) * n]
    }

    pub fn joint(&self, t: usize) -> &[f32] {
        &self.joints[t * self.joint_dim..(t + 1) * self.joint_dim]
    }
}

/// Seed of the `index`-th demonstration scene.
pub fn episode_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// Scripted demonstrations at training positions for each task in `tasks`,
/// numbered densely in task order.
pub fn generate(cfg: &Config, tasks: &[Task]) -> Result<Vec<Episode>> {
    if cfg.model.joints < 5 {
        return Err(Error::Config(format!("model.joints = {} but the arm has 5", cfg.model.joints)));
    }
    let counts = &cfg.data.episodes;
    let mut out = Vec::new();
    let mut index = 0;
    for task in Task::ALL {
        let n = match task {
            Task::Lift => counts.lift,
            Task::Roll => counts.roll,
            Task::Stack => counts.stack,
        };
        if !tasks.contains(&task) {
            continue;
        }
        for _ in 0..n {
            let seed = episode_seed(cfg.data.seed, index);
            let sample = sample_scene(task, PositionMode::Training, Split::Train, seed, &cfg.sim)?;
            let demo = demonstrate(&sample, cfg.model.image_size, &cfg.sim)?;
            if !demo.success {
                return Err(Error::Sim(format!("scripted {task} demonstration {index} failed")));
            }
            let j = cfg.model.joints;
            let mut ep = Episode {
                sequence_id: out.len(),
                task,
                instruction: demo.instruction,
                truth: demo.truth,
                initial: demo.initial,
                len: demo.frames.len(),
                image_size: cfg.model.image_size,
                joint_dim: j,
                images: Vec::new(),
                mask_a: Vec::new(),
                mask_b: Vec::new(),
                joints: Vec::new(),
            };
            for f in demo.frames {
                ep.images.extend(f.image);
                ep.mask_a.extend(f.masks.a);
                ep.mask_b.extend(f.masks.b);
                // joints beyond the arm's five are fixed at zero
                ep.joints.extend(f.joints.iter().copied().chain(std::iter::repeat(0.0)).take(j));
            }
            out.push(ep);
            index += 1;
        }
    }
    Ok(out)
}

fn write_f32s(buf: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn save(dir: &Path, episodes: &[Episode], cfg: &Config, tasks: &[Task]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, ep) in episodes.iter().enumerate() {
        let manifest = EpisodeManifest {
            sequence_id: ep.sequence_id,
            task: ep.task,
            instruction: ep.instruction.clone(),
            truth: ep.truth,
            initial: ep.initial.clone(),
            len: ep.len,
            image_size: ep.image_size,
            joint_dim: ep.joint_dim,
            seed: episode_seed(cfg.data.seed, i),
        };
        fs::write(dir.join(format!("episode_{i:04}.json")), serde_json::to_string_pretty(&manifest)?)?;
        let mut buf = Vec::with_capacity(4 * (3 * ep.images.len() + ep.joints.len()));
        for xs in [&ep.images, &ep.mask_a, &ep.mask_b, &ep.joints] {
            write_f32s(&mut buf, xs);
        }
        fs::write(dir.join(format!("episode_{i:04}.bin")), buf)?;
    }
    let manifest = DatasetManifest { episodes: episodes.len(), tasks: tasks.to_vec(), config: cfg.clone() };
    fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(DatasetManifest, Vec<Episode>)> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("dataset.json"))?)?;
    let mut episodes = Vec::with_capacity(manifest.episodes);
    for i in 0..manifest.episodes {
        let m: EpisodeManifest = serde_json::from_str(&fs::read_to_string(dir.join(format!("episode_{i:04}.json")))?)?;
        let bytes = fs::read(dir.join(format!("episode_{i:04}.bin")))?;
        let frame = 3 * m.image_size * m.image_size * m.len;
        let expected = 4 * (3 * frame + m.len * m.joint_dim);
        if bytes.len() != expected {
            return Err(Error::Checkpoint(format!("episode {i}: {} bytes, expected {expected}", bytes.len())));
        }
        let all: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        episodes.push(Episode {
            sequence_id: m.sequence_id,
            task: m.task,
            instruction: m.instruction,
            truth: m.truth,
            initial: m.initial,
            len: m.len,
            image_size: m.image_size,
            joint_dim: m.joint_dim,
            images: all[..frame].to_vec(),
            mask_a: all[frame..2 * frame].to_vec(),
            mask_b: all[2 * frame..3 * frame].to_vec(),
            joints: all[3 * frame..].to_vec(),
        });
    }
    Ok((manifest, episodes))
}

/// Affine maps onto `[0.1, 0.9]`: per joint dimension, and one global map
/// for pixel values. Fitted on the training set and reused unchanged later.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub joint_min: Vec<f32>,
    pub joint_max: Vec<f32>,
    pub pixel_min: f32,
    pub pixel_max: f32,
}

fn forward(x: f32, min: f32, max: f32) -> f32 {
    if max <= min {
        return 0.5;
    }
    (LO + (x as f64 - min as f64) / (max as f64 - min as f64) * (HI - LO)) as f32
}

fn inverse(y: f32, min: f32, max: f32) -> f32 {
    if max <= min {
        return min;
    }
    (min as f64 + (y as f64 - LO) / (HI - LO) * (max as f64 - min as f64)) as f32
}

impl Normalization {
    pub fn fit(episodes: &[Episode]) -> Result<Self> {
        let first = episodes.first().ok_or_else(|| Error::Training("cannot normalize an empty dataset".into()))?;
        let j = first.joint_dim;
        let mut joint_min = vec![f32::INFINITY; j];
        let mut joint_max = vec![f32::NEG_INFINITY; j];
        let (mut pixel_min, mut pixel_max) = (f32::INFINITY, f32::NEG_INFINITY);
        for ep in episodes {
            if ep.joint_dim != j {
                return Err(Error::Training("episodes disagree on joint count".into()));
            }
            for row in ep.joints.chunks(j) {
                for (d, &v) in row.iter().enumerate() {
                    joint_min[d] = joint_min[d].min(v);
                    joint_max[d] = joint_max[d].max(v);
                }
            }
            for &p in &ep.images {
                pixel_min = pixel_min.min(p);
                pixel_max = pixel_max.max(p);
            }
        }
        for d in 0..j {
            if joint_max[d] <= joint_min[d] {
                log::warn!("joint {d} is constant over the training set; it normalizes to 0.5");
            }
        }
        Ok(Self { joint_min, joint_max, pixel_min, pixel_max })
    }

    /// Normalizes a flattened `[T, J]` joint array.
    pub fn joints(&self, raw: &[f32]) -> Vec<f32> {
        let j = self.joint_min.len();
        raw.iter().enumerate().map(|(i, &x)| forward(x, self.joint_min[i % j], self.joint_max[i % j])).collect()
    }

    pub fn denormalize_joints(&self, y: &[f32]) -> Vec<f32> {
        let j = self.joint_min.len();
        y.iter().enumerate().map(|(i, &v)| inverse(v, self.joint_min[i % j], self.joint_max[i % j])).collect()
    }

    pub fn pixels(&self, raw: &[f32]) -> Vec<f32> {
        raw.iter().map(|&x| forward(x, self.pixel_min, self.pixel_max)).collect()
    }
}

/// An episode in model units: normalized images and joints, raw masks and
/// the tokenized instruction.
#[derive(Clone, Debug)]
pub struct TrainEpisode {
    pub sequence_id: usize,
    pub task: Task,
    pub truth: GroundTruth,
    pub len: usize,
    pub images: Vec<f32>,
    pub mask_a: Vec<f32>,
    pub mask_b: Vec<f32>,
    pub joints: Vec<f32>,
    /// Noise-free images and joints the predictions are scored against.
    pub target_images: Vec<f32>,
    pub target_joints: Vec<f32>,
    pub tokens: Vec<usize>,
}

pub fn prepare(episodes: &[Episode], norm: &Normalization, vocab: &Vocabulary) -> Result<Vec<TrainEpisode>> {
    episodes
        .iter()
        .map(|ep| {
            let images = norm.pixels(&ep.images);
            let joints = norm.joints(&ep.joints);
            Ok(TrainEpisode {
                sequence_id: ep.sequence_id,
                task: ep.task,
                truth: ep.truth,
                len: ep.len,
                target_images: images.clone(),
                target_joints: joints.clone(),
                images,
                mask_a: ep.mask_a.clone(),
                mask_b: ep.mask_b.clone(),
                joints,
                tokens: vocab.encode(&ep.instruction)?,
            })
        })
        .collect()
}

/// Adds fresh zero-mean Gaussian noise to the input images and joints (targets stay clean) and, when
/// `bank` is given, swaps the instruction for a random training paraphrase
/// of the same task and colours.
pub fn augment<R: Rng + ?Sized>(
    ep: &TrainEpisode,
    sigma: f32,
    paraphrase: Option<(&InstructionBank, &Vocabulary)>,
    rng: &mut R,
) -> Result<TrainEpisode> {
    let mut out = ep.clone();
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        for x in out.images.iter_mut().chain(out.joints.iter_mut()) {
            *x += noise.sample(rng);
        }
    }
    if let Some((bank, vocab)) = paraphrase {
        let t = ep.truth;
        out.tokens = vocab.encode(&bank.sample(rng, t.task, Split::Train, t.target, t.destination))?;
    }
    Ok(out)
}
