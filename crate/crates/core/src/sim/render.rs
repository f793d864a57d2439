//! Top-down renderer and the ground-truth mask oracle.
//!
//! Images are `[3, n, n]` row-major in `[0, 1]`. Every pixel averages
//! `ss x ss` sub-samples; a cube's mask is its colour times the fraction
//! of sub-samples where it is the top-most cube, so mask pixels coincide
//! with the rendered cube pixels wherever the effector does not cover them.

use serde::{Deserialize, Serialize};

use super::{Color, GroundTruth, Scene};
use crate::error::{Error, Result};

pub const TABLE_RGB: [f32; 3] = [0.5, 0.5, 0.5];
const RING_RGB: [f32; 3] = [0.05, 0.05, 0.05];
const GRIP_RGB: [f32; 3] = [1.0, 0.9, 0.2];
const RING_WIDTH: f32 = 0.035;

/// Two masked images for the attention-point encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPair {
    pub a: Vec<f32>,
    pub b: Vec<f32>,
}

/// Colour of a cube at height `y`: lifted cubes are drawn lighter.
fn shade(color: Color, y: f32) -> [f32; 3] {
    let lift = (y / 0.6).clamp(0.0, 1.0) * 0.5;
    color.rgb().map(|c| c + (1.0 - c) * lift)
}

fn ring_radius(height: f32) -> f32 {
    0.06 + 0.12 * height
}

/// Index of the top-most cube covering world point `(x, z)`.
fn top_cube(scene: &Scene, order: &[usize], x: f32, z: f32) -> Option<usize> {
    let half = 0.5 * scene.cube_size;
    order.iter().rev().copied().find(|&i| {
        let c = scene.cubes[i];
        (x - c.x).abs() <= half && (z - c.z).abs() <= half
    })
}

fn sample_points(n: usize, ss: usize) -> impl Iterator<Item = (usize, usize, f32, f32)> {
    let step = 2.0 / n as f32;
    (0..n).flat_map(move |r| {
        (0..n).flat_map(move |c| {
            (0..ss * ss).map(move |k| {
                let (sr, sc) = (k / ss, k % ss);
                let x = -1.0 + step * (c as f32 + (sc as f32 + 0.5) / ss as f32);
                let z = -1.0 + step * (r as f32 + (sr as f32 + 0.5) / ss as f32);
                (r, c, x, z)
            })
        })
    })
}

fn height_order(scene: &Scene) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scene.cubes.len()).collect();
    order.sort_by(|&a, &b| scene.cubes[a].y.total_cmp(&scene.cubes[b].y));
    order
}

pub fn render(scene: &Scene, n: usize, ss: usize) -> Vec<f32> {
    let ss = ss.max(1);
    let order = height_order(scene);
    let mut img = vec![0.0f32; 3 * n * n];
    let w = 1.0 / (ss * ss) as f32;
    for (r, c, x, z) in sample_points(n, ss) {
        let mut rgb = match top_cube(scene, &order, x, z) {
            Some(i) => shade(scene.cubes[i].color, scene.cubes[i].y),
            None => TABLE_RGB,
        };
        if let Some(e) = scene.effector {
            let d = ((x - e.x).powi(2) + (z - e.z).powi(2)).sqrt();
            let radius = ring_radius(e.height);
            if (d - radius).abs() <= 0.5 * RING_WIDTH {
                rgb = RING_RGB;
            } else if d <= 0.03 && e.gripper > 0.0 {
                for (v, g) in rgb.iter_mut().zip(GRIP_RGB) {
                    *v = *v * (1.0 - e.gripper) + g * e.gripper;
                }
            }
        }
        for ch in 0..3 {
            img[(ch * n + r) * n + c] += w * rgb[ch];
        }
    }
    img
}

/// The masked image showing only cube `index`.
pub fn mask_of(scene: &Scene, index: usize, n: usize, ss: usize) -> Vec<f32> {
    let ss = ss.max(1);
    let order = height_order(scene);
    let rgb = shade(scene.cubes[index].color, scene.cubes[index].y);
    let mut img = vec![0.0f32; 3 * n * n];
    let w = 1.0 / (ss * ss) as f32;
    for (r, c, x, z) in sample_points(n, ss) {
        if top_cube(scene, &order, x, z) == Some(index) {
            for ch in 0..3 {
                img[(ch * n + r) * n + c] += w * rgb[ch];
            }
        }
    }
    img
}

/// Masks for the cubes an instruction refers to: target then destination
/// for stacking, the single target duplicated otherwise.
pub fn masks_for(scene: &Scene, truth: &GroundTruth, n: usize, ss: usize) -> Result<MaskPair> {
    let find = |c: Color| {
        scene.cube(c).map(|(i, _)| i).ok_or_else(|| Error::Sim(format!("instruction refers to a {} cube that is not on the table", c.name())))
    };
    let a = mask_of(scene, find(truth.target)?, n, ss);
    let b = match truth.destination {
        Some(d) => mask_of(scene, find(d)?, n, ss),
        None => a.clone(),
    };
    Ok(MaskPair { a, b })
}
