use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Arm, Color, Cube, GroundTruth, InstructionBank, Scene, Split, Task};
use crate::config::SimConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    Training,
    Test,
}

impl std::str::FromStr for PositionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "training" | "train" => Ok(Self::Training),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown position mode `{other}` (expected training or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub scene: Scene,
    pub instruction: String,
    pub truth: GroundTruth,
}

/// Cell centres of a grid mode.
pub fn cells(cfg: &SimConfig, mode: PositionMode) -> Vec<[f32; 2]> {
    let axis = match mode {
        PositionMode::Training => &cfg.train_grid,
        PositionMode::Test => &cfg.test_grid,
    };
    axis.iter().flat_map(|&z| axis.iter().map(move |&x| [x, z])).collect()
}

/// Whether `(x, z)` lies in a jittered cell of the grid.
pub fn in_cell(cfg: &SimConfig, mode: PositionMode, x: f32, z: f32) -> bool {
    cells(cfg, mode).iter().any(|c| (c[0] - x).abs() <= cfg.jitter && (c[1] - z).abs() <= cfg.jitter)
}

/// A cube lies in the path of pushing `target` along `-z`.
pub(crate) fn push_lane_blocked(cubes: &[Cube], target: usize, cfg: &SimConfig) -> bool {
    let s = cfg.cube_size;
    let t = cubes[target];
    let end = t.z - cfg.push_distance;
    end < -1.0 + 0.5 * s
        || cubes.iter().enumerate().any(|(i, c)| i != target && (c.x - t.x).abs() < s + 0.02 && c.z < t.z && c.z > end - s - 0.02)
}

const MAX_ATTEMPTS: usize = 10_000;

/// A random three-cube scene, the instruction for `task` and its ground truth.
/// Cubes occupy distinct jittered cells of the chosen grid; deterministic in `seed`.
pub fn sample_scene(task: Task, mode: PositionMode, split: Split, seed: u64, cfg: &SimConfig) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arm = Arm::new(cfg);
    let grid = cells(cfg, mode);
    if grid.len() < 3 {
        return Err(Error::Sim(format!("{mode:?} grid has fewer than 3 cells")));
    }
    for _ in 0..MAX_ATTEMPTS {
        let mut colors = Color::ALL;
        colors.shuffle(&mut rng);
        let mut picked = grid.clone();
        picked.shuffle(&mut rng);
        let cubes: Vec<Cube> = colors
            .iter()
            .zip(&picked)
            .map(|(&color, c)| Cube {
                color,
                x: c[0] + rng.random_range(-cfg.jitter..=cfg.jitter),
                z: c[1] + rng.random_range(-cfg.jitter..=cfg.jitter),
                y: 0.0,
            })
            .collect();
        let separated = (0..3).all(|i| {
            (i + 1..3).all(|j| (cubes[i].x - cubes[j].x).abs().max((cubes[i].z - cubes[j].z).abs()) >= cfg.min_separation)
        });
        if !separated || !cubes.iter().all(|c| arm.reachable(c.x, c.z)) {
            continue;
        }
        // cubes[0] is the target, cubes[1] the destination for stacking
        if task == Task::Roll && (push_lane_blocked(&cubes, 0, cfg) || !arm.reachable(cubes[0].x, cubes[0].z + 0.1)) {
            continue;
        }
        let target = cubes[0].color;
        let destination = (task == Task::Stack).then_some(cubes[1].color);
        let instruction = InstructionBank::new().sample(&mut rng, task, split, target, destination);
        let truth = GroundTruth { task, target, destination, start: [cubes[0].x, cubes[0].z] };
        let mut cubes = cubes;
        cubes.sort_by_key(|c| c.color);
        let scene = Scene::new(cubes, &arm, arm.home(), cfg.cube_size);
        return Ok(Sample { scene, instruction, truth });
    }
    Err(Error::Sim(format!("no valid {task} scene found in {MAX_ATTEMPTS} attempts")))
}
