//! Scripted demonstrator: joint-space waypoints joined by trapezoidal
//! velocity profiles, recorded once per control tick.

use serde::{Deserialize, Serialize};

use super::render::{masks_for, render, MaskPair};
use super::{Arm, GroundTruth, Sample, Scene, Task};
use crate::config::SimConfig;
use crate::error::{Error, Result};

/// One recorded tick: what the camera saw and the joint command in force.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub image: Vec<f32>,
    pub masks: MaskPair,
    pub joints: [f32; 5],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub instruction: String,
    pub truth: GroundTruth,
    pub initial: Scene,
    pub frames: Vec<Frame>,
    pub success: bool,
}

/// Fraction of each segment spent accelerating (and decelerating).
const RAMP: f32 = 0.25;

/// Normalised position along a trapezoidal velocity profile at `tau` in `[0, 1]`.
pub fn trapezoid(tau: f32) -> f32 {
    let tau = tau.clamp(0.0, 1.0);
    let v = 1.0 / (1.0 - RAMP);
    if tau < RAMP {
        0.5 * v * tau * tau / RAMP
    } else if tau <= 1.0 - RAMP {
        0.5 * v * RAMP + v * (tau - RAMP)
    } else {
        let r = 1.0 - tau;
        1.0 - 0.5 * v * r * r / RAMP
    }
}

struct Segment {
    to: [f32; 5],
    ticks: usize,
}

fn pose(arm: &Arm, x: f32, z: f32, height: f32, gripper: f32) -> Result<[f32; 5]> {
    let [a, b, c] = arm.inverse(x, z)?;
    Ok([a, b, c, height, gripper])
}

fn hold(to: [f32; 5], ticks: usize) -> Segment {
    Segment { to, ticks }
}

fn waypoints(scene: &Scene, truth: &GroundTruth, arm: &Arm, cfg: &SimConfig) -> Result<Vec<Segment>> {
    let s = cfg.cube_size;
    let target = scene.cube(truth.target).ok_or_else(|| Error::Sim(format!("no {} cube", truth.target.name())))?.1;
    let (x, z) = (target.x, target.z);
    let cruise = 0.6;
    let carry = 0.7;
    let grasp = target.y + 0.5 * s;
    let lift_plan = |segs: &mut Vec<Segment>| -> Result<()> {
        segs.push(hold(pose(arm, x, z, cruise, 0.0)?, 12));
        segs.push(hold(pose(arm, x, z, grasp, 0.0)?, 6));
        segs.push(hold(pose(arm, x, z, grasp, 1.0)?, 4));
        segs.push(hold(pose(arm, x, z, carry, 1.0)?, 8));
        Ok(())
    };
    let mut segs = Vec::new();
    match truth.task {
        Task::Lift => {
            lift_plan(&mut segs)?;
            segs.push(hold(pose(arm, x, z, carry, 1.0)?, 1));
        }
        Task::Roll => {
            let (bz, low) = (z + 0.1, 0.08);
            segs.push(hold(pose(arm, x, bz, cruise, 0.0)?, 12));
            segs.push(hold(pose(arm, x, bz, low, 0.0)?, 6));
            segs.push(hold(pose(arm, x, bz - cfg.push_distance, low, 0.0)?, 15));
            segs.push(hold(pose(arm, x, bz - cfg.push_distance, cruise, 0.0)?, 5));
        }
        Task::Stack => {
            let dest_color = truth.destination.ok_or_else(|| Error::Sim("stacking needs a destination".into()))?;
            let dest = scene.cube(dest_color).ok_or_else(|| Error::Sim(format!("no {} cube", dest_color.name())))?.1;
            let (dx, dz) = (dest.x, dest.z);
            let place = dest.y + 1.5 * s + 0.02;
            lift_plan(&mut segs)?;
            segs.push(hold(pose(arm, dx, dz, carry, 1.0)?, 14));
            segs.push(hold(pose(arm, dx, dz, place, 1.0)?, 8));
            segs.push(hold(pose(arm, dx, dz, place, 0.0)?, 4));
            segs.push(hold(pose(arm, dx, dz, carry, 0.0)?, 6));
            segs.push(hold(pose(arm, dx, dz, carry, 0.0)?, 7));
        }
    }
    Ok(segs)
}

/// Joint commands for every tick of the scripted demonstration.
pub fn plan(scene: &Scene, truth: &GroundTruth, cfg: &SimConfig) -> Result<Vec<[f32; 5]>> {
    let arm = Arm::new(cfg);
    let mut from = scene.joints;
    let mut out = Vec::new();
    for seg in waypoints(scene, truth, &arm, cfg)? {
        for k in 1..=seg.ticks {
            let a = trapezoid(k as f32 / seg.ticks as f32);
            out.push(std::array::from_fn(|j| from[j] + a * (seg.to[j] - from[j])));
        }
        from = seg.to;
    }
    Ok(out)
}

/// Recorded frames per demonstration of `task`, including the initial frame.
pub fn demo_length(task: Task) -> usize {
    match task {
        Task::Lift => 32,
        Task::Roll => 39,
        Task::Stack => 70,
    }
}

pub fn record(scene: &Scene, truth: &GroundTruth, image_size: usize, cfg: &SimConfig) -> Result<Frame> {
    Ok(Frame {
        image: render(scene, image_size, cfg.supersample),
        masks: masks_for(scene, truth, image_size, cfg.supersample)?,
        joints: scene.joints,
    })
}

/// Runs the scripted policy on a sampled scene and records every tick.
pub fn demonstrate(sample: &Sample, image_size: usize, cfg: &SimConfig) -> Result<Demonstration> {
    let arm = Arm::new(cfg);
    let mut scene = sample.scene.clone();
    let commands = plan(&scene, &sample.truth, cfg)?;
    let mut frames = vec![record(&scene, &sample.truth, image_size, cfg)?];
    for q in &commands {
        scene.step(&arm, cfg, q)?;
        frames.push(record(&scene, &sample.truth, image_size, cfg)?);
    }
    let success = scene.check_success(&sample.truth, cfg);
    Ok(Demonstration { instruction: sample.instruction.clone(), truth: sample.truth, initial: sample.scene.clone(), frames, success })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::sim::{sample_scene, PositionMode, Split};

    #[test]
    fn trapezoid_is_monotone_from_zero_to_one() {
        assert_eq!(trapezoid(0.0), 0.0);
        assert!((trapezoid(1.0) - 1.0).abs() < 1e-6);
        assert!((trapezoid(0.5) - 0.5).abs() < 1e-6);
        let mut prev = 0.0;
        for i in 1..=100 {
            let v = trapezoid(i as f32 / 100.0);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn replayed_demonstrations_succeed() {
        let c = Config::desk();
        let mut n = 0;
        for (task, count) in [(Task::Lift, 10), (Task::Roll, 10), (Task::Stack, 20)] {
            for seed in 0..count {
                let s = sample_scene(task, PositionMode::Training, Split::Train, 1000 + seed, &c.sim).unwrap();
                let commands = plan(&s.scene, &s.truth, &c.sim).unwrap();
                assert_eq!(commands.len() + 1, demo_length(task));
                let arm = Arm::new(&c.sim);
                let mut scene = s.scene.clone();
                for q in &commands {
                    scene.step(&arm, &c.sim, q).unwrap();
                }
                assert!(scene.check_success(&s.truth, &c.sim), "{task} seed {seed}: {:?}", scene.cubes);
                n += 1;
            }
        }
        assert_eq!(n, 40);
    }

    #[test]
    fn test_position_demonstrations_succeed() {
        let c = Config::desk();
        for task in Task::ALL {
            for seed in 0..20 {
                let s = sample_scene(task, PositionMode::Test, Split::Train, seed, &c.sim).unwrap();
                let d = demonstrate(&s, 16, &c.sim).unwrap();
                assert!(d.success, "{task} seed {seed}");
            }
        }
    }

    #[test]
    fn lift_ends_raised_and_closed_stack_takes_longer() {
        let c = Config::desk();
        let s = sample_scene(Task::Lift, PositionMode::Training, Split::Train, 5, &c.sim).unwrap();
        let d = demonstrate(&s, 16, &c.sim).unwrap();
        let last = d.frames.last().unwrap();
        assert_eq!(last.joints[4], 1.0);
        assert!(d.success);
        let mut stack = s.clone();
        stack.truth.task = Task::Stack;
        stack.truth.destination = Some(stack.scene.cubes.iter().find(|c| c.color != s.truth.target).unwrap().color);
        let ds = demonstrate(&stack, 16, &c.sim).unwrap();
        assert!(ds.frames.len() > d.frames.len());
    }
}
