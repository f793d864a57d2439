//! Kinematic top-down tabletop with three coloured cubes and a planar arm.
//!
//! The table spans `x, z in [-1, 1]`; `x` maps to image columns and `z` to
//! image rows (downwards). Heights are measured upwards from the table.
//! Grasping attaches the cube to the effector, release settles it
//! instantly onto whatever lies beneath, and a low open effector inside a
//! cube's footprint drags it along.

mod arm;
mod demo;
mod instructions;
mod render;
mod sample;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::error::{Error, Result};

pub use arm::Arm;
pub use demo::{demo_length, demonstrate, plan, record, trapezoid, Demonstration, Frame};
pub use instructions::{words, InstructionBank, Split};
pub use render::{mask_of, masks_for, render, MaskPair, TABLE_RGB};
pub use sample::{cells, in_cell, sample_scene, PositionMode, Sample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Lift,
    Roll,
    Stack,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Lift, Task::Roll, Task::Stack];

    pub fn name(self) -> &'static str {
        match self {
            Task::Lift => "lift",
            Task::Roll => "roll",
            Task::Stack => "stack",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lift" => Ok(Task::Lift),
            "roll" => Ok(Task::Roll),
            "stack" => Ok(Task::Stack),
            other => Err(Error::Sim(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.15, 0.1],
            Color::Green => [0.1, 0.75, 0.2],
            Color::Blue => [0.15, 0.3, 0.95],
        }
    }

    pub fn from_word(w: &str) -> Option<Color> {
        Color::ALL.into_iter().find(|c| c.name() == w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cube {
    pub color: Color,
    pub x: f32,
    pub z: f32,
    /// Height of the cube's bottom face.
    pub y: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Effector {
    pub x: f32,
    pub z: f32,
    pub height: f32,
    /// 0 is fully open, 1 fully closed.
    pub gripper: f32,
    pub held: Option<usize>,
}

/// Which cubes an instruction refers to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub task: Task,
    pub target: Color,
    pub destination: Option<Color>,
    /// Target position when the episode started.
    pub start: [f32; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub cubes: Vec<Cube>,
    pub effector: Option<Effector>,
    pub cube_size: f32,
    /// Joint vector last commanded, `[shoulder, elbow, wrist, height, gripper]`.
    pub joints: [f32; 5],
    /// Cubes that have been attached to the effector at some point.
    pub ever_grasped: Vec<bool>,
}

impl Scene {
    /// A table with no cubes and no arm.
    pub fn empty(cube_size: f32) -> Self {
        Self { cubes: Vec::new(), effector: None, cube_size, joints: [0.0; 5], ever_grasped: Vec::new() }
    }

    pub fn new(cubes: Vec<Cube>, arm: &Arm, joints: [f32; 5], cube_size: f32) -> Self {
        let n = cubes.len();
        let mut s = Self { cubes, effector: None, cube_size, joints, ever_grasped: vec![false; n] };
        let (x, z) = arm.forward(&joints);
        s.effector = Some(Effector { x, z, height: joints[3].clamp(0.0, 1.0), gripper: joints[4].clamp(0.0, 1.0), held: None });
        s
    }

    pub fn cube(&self, color: Color) -> Option<(usize, &Cube)> {
        self.cubes.iter().enumerate().find(|(_, c)| c.color == color)
    }

    fn overlaps(&self, a: usize, x: f32, z: f32) -> Option<usize> {
        let s = self.cube_size;
        (0..self.cubes.len()).find(|&b| b != a && (self.cubes[b].x - x).abs() < s && (self.cubes[b].z - z).abs() < s)
    }

    /// Height of the highest surface under a cube footprint centred at `(x, z)`.
    fn support(&self, skip: usize, x: f32, z: f32) -> f32 {
        let s = self.cube_size;
        self.cubes
            .iter()
            .enumerate()
            .filter(|&(i, c)| i != skip && (c.x - x).abs() < s && (c.z - z).abs() < s)
            .map(|(_, c)| c.y + s)
            .fold(0.0, f32::max)
    }

    fn has_cube_on_top(&self, i: usize) -> bool {
        let s = self.cube_size;
        let c = self.cubes[i];
        self.cubes.iter().enumerate().any(|(j, d)| j != i && d.y > c.y + 0.5 * s && (d.x - c.x).abs() < s && (d.z - c.z).abs() < s)
    }

    /// Commands the arm to `joints` for one tick.
    pub fn step(&mut self, arm: &Arm, cfg: &SimConfig, joints: &[f32]) -> Result<()> {
        if joints.len() < 5 || joints.iter().any(|v| !v.is_finite()) {
            return Err(Error::Sim(format!("bad joint command {joints:?}")));
        }
        let mut eff = self.effector.ok_or_else(|| Error::Sim("scene has no arm".into()))?;
        let q = [joints[0], joints[1], joints[2], joints[3].clamp(0.0, 1.0), joints[4].clamp(0.0, 1.0)];
        let (x, z) = arm.forward(&q);
        let (px, pz) = (eff.x, eff.z);
        let (dx, dz) = (x - px, z - pz);
        let was_closed = eff.gripper >= 0.5;
        eff.x = x;
        eff.z = z;
        eff.height = q[3];
        eff.gripper = q[4];
        self.joints = q;
        let s = self.cube_size;

        match eff.held {
            Some(i) if eff.gripper < 0.5 => {
                eff.held = None;
                let y = self.support(i, self.cubes[i].x, self.cubes[i].z);
                self.cubes[i].y = y;
            }
            Some(i) => {
                let (cx, cz) = (eff.x, eff.z);
                let floor = self.support(i, cx, cz);
                self.cubes[i].x = cx;
                self.cubes[i].z = cz;
                self.cubes[i].y = (eff.height - 0.5 * s).max(floor);
            }
            None if eff.gripper >= 0.5 && !was_closed => {
                let grasp = (0..self.cubes.len())
                    .filter(|&i| {
                        let c = self.cubes[i];
                        (c.x - eff.x).abs() <= cfg.grasp_tolerance
                            && (c.z - eff.z).abs() <= cfg.grasp_tolerance
                            && (eff.height - (c.y + 0.5 * s)).abs() <= 0.5 * s
                            && !self.has_cube_on_top(i)
                    })
                    .max_by(|&a, &b| self.cubes[a].y.total_cmp(&self.cubes[b].y));
                if let Some(i) = grasp {
                    eff.held = Some(i);
                    self.ever_grasped[i] = true;
                }
            }
            None if eff.gripper < 0.5 && (dx != 0.0 || dz != 0.0) => {
                let half = 0.5 * s;
                let pushed = (0..self.cubes.len()).find(|&i| {
                    let c = self.cubes[i];
                    (c.x - px).abs() < half && (c.z - pz).abs() < half && eff.height >= c.y && eff.height < c.y + s
                });
                if let Some(i) = pushed {
                    let (nx, nz) = (self.cubes[i].x + dx, self.cubes[i].z + dz);
                    let inside = nx.abs() <= 1.0 - half && nz.abs() <= 1.0 - half;
                    if inside && self.overlaps(i, nx, nz).is_none() {
                        self.cubes[i].x = nx;
                        self.cubes[i].z = nz;
                    }
                }
            }
            None => {}
        }
        self.effector = Some(eff);
        Ok(())
    }

    pub fn check_success(&self, truth: &GroundTruth, cfg: &SimConfig) -> bool {
        let Some((ti, target)) = self.cube(truth.target) else { return false };
        let held = self.effector.and_then(|e| e.held);
        match truth.task {
            Task::Lift => held == Some(ti) && target.y > cfg.lift_height,
            Task::Roll => {
                !self.ever_grasped[ti] && held.is_none() && truth.start[1] - target.z > cfg.roll_distance
            }
            Task::Stack => {
                let Some((_, dest)) = truth.destination.and_then(|d| self.cube(d)) else { return false };
                held != Some(ti)
                    && (target.x - dest.x).abs() <= cfg.stack_tolerance
                    && (target.z - dest.z).abs() <= cfg.stack_tolerance
                    && (target.y - (dest.y + self.cube_size)).abs() < 1e-4
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    fn setup() -> (Scene, Arm, SimConfig) {
        let cfg = Config::desk().sim;
        let arm = Arm::new(&cfg);
        let cubes = vec![
            Cube { color: Color::Red, x: 0.0, z: 0.0, y: 0.0 },
            Cube { color: Color::Green, x: 0.45, z: 0.0, y: 0.0 },
            Cube { color: Color::Blue, x: -0.45, z: -0.45, y: 0.0 },
        ];
        let scene = Scene::new(cubes, &arm, arm.home(), cfg.cube_size);
        (scene, arm, cfg)
    }

    fn go(scene: &mut Scene, arm: &Arm, cfg: &SimConfig, x: f32, z: f32, h: f32, g: f32) {
        let mut q = arm.inverse(x, z).unwrap().to_vec();
        q.extend([h, g]);
        scene.step(arm, cfg, &q).unwrap();
    }

    #[test]
    fn untouched_scene_fails_every_task() {
        let (scene, _, cfg) = setup();
        for task in Task::ALL {
            let truth = GroundTruth { task, target: Color::Red, destination: Some(Color::Green), start: [0.0, 0.0] };
            assert!(!scene.check_success(&truth, &cfg));
        }
    }

    #[test]
    fn stack_on_wrong_cube_fails() {
        let (mut scene, arm, cfg) = setup();
        let s = cfg.cube_size;
        go(&mut scene, &arm, &cfg, 0.0, 0.0, 0.5 * s, 0.0);
        go(&mut scene, &arm, &cfg, 0.0, 0.0, 0.5 * s, 1.0);
        go(&mut scene, &arm, &cfg, 0.0, 0.0, 0.7, 1.0);
        go(&mut scene, &arm, &cfg, -0.45, -0.45, 0.7, 1.0);
        go(&mut scene, &arm, &cfg, -0.45, -0.45, 1.5 * s + 0.02, 1.0);
        go(&mut scene, &arm, &cfg, -0.45, -0.45, 1.5 * s + 0.02, 0.0);
        let red = scene.cube(Color::Red).unwrap().1;
        assert!((red.y - s).abs() < 1e-6, "red rests on blue: {red:?}");
        let onto_green = GroundTruth { task: Task::Stack, target: Color::Red, destination: Some(Color::Green), start: [0.0, 0.0] };
        let onto_blue = GroundTruth { destination: Some(Color::Blue), ..onto_green };
        assert!(!scene.check_success(&onto_green, &cfg));
        assert!(scene.check_success(&onto_blue, &cfg));
    }

    #[test]
    fn released_cube_settles_and_never_interpenetrates() {
        let (mut scene, arm, cfg) = setup();
        let s = cfg.cube_size;
        go(&mut scene, &arm, &cfg, 0.0, 0.0, 0.5 * s, 0.0);
        go(&mut scene, &arm, &cfg, 0.0, 0.0, 0.5 * s, 1.0);
        // drag the held cube low across the green one: it must ride over it
        go(&mut scene, &arm, &cfg, 0.45, 0.0, 0.5 * s, 1.0);
        let red = scene.cube(Color::Red).unwrap().1;
        assert!(red.y >= s - 1e-6);
        go(&mut scene, &arm, &cfg, 0.45, 0.0, 0.9, 0.0);
        let red = scene.cube(Color::Red).unwrap().1;
        assert!((red.y - s).abs() < 1e-6);
    }

    #[test]
    fn pushing_is_blocked_by_other_cubes() {
        let (mut scene, arm, cfg) = setup();
        let s = cfg.cube_size;
        go(&mut scene, &arm, &cfg, 0.0, 0.0, 0.6, 0.0);
        go(&mut scene, &arm, &cfg, 0.0, 0.0, 0.1, 0.0);
        go(&mut scene, &arm, &cfg, 0.1, 0.0, 0.1, 0.0);
        let red = scene.cube(Color::Red).unwrap().1;
        assert!((red.x - 0.1).abs() < 1e-4, "dragged along: {red:?}");
        // a further push would overlap the green cube
        go(&mut scene, &arm, &cfg, 0.2, 0.0, 0.1, 0.0);
        let (red, green) = (scene.cube(Color::Red).unwrap().1, scene.cube(Color::Green).unwrap().1);
        assert!((red.x - 0.1).abs() < 1e-4, "blocked: {red:?}");
        assert!((green.x - red.x).abs() >= s - 1e-6);
    }
}
