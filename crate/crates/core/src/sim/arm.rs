use std::f32::consts::FRAC_PI_2;

use crate::config::SimConfig;
use crate::error::{Error, Result};

/// Three-link planar arm over the table. The last link keeps a fixed
/// absolute orientation pointing along `-z`, so the wrist angle is a
/// function of the other two; the height and gripper joints are prismatic.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub base: [f32; 2],
    pub links: [f32; 3],
}

/// Absolute orientation of the last link.
const TOOL_ANGLE: f32 = -FRAC_PI_2;

impl Arm {
    pub fn new(cfg: &SimConfig) -> Self {
        Self { base: cfg.arm_base, links: cfg.links }
    }

    /// Effector `(x, z)` for joints `[shoulder, elbow, wrist, ..]`.
    pub fn forward(&self, q: &[f32]) -> (f32, f32) {
        let [l1, l2, l3] = self.links;
        let a1 = q[0];
        let a2 = a1 + q[1];
        let a3 = a2 + q[2];
        let x = self.base[0] + l1 * a1.cos() + l2 * a2.cos() + l3 * a3.cos();
        let z = self.base[1] + l1 * a1.sin() + l2 * a2.sin() + l3 * a3.sin();
        (x, z)
    }

    /// The three arm joints placing the effector at `(x, z)`, elbow bent
    /// consistently to one side.
    pub fn inverse(&self, x: f32, z: f32) -> Result<[f32; 3]> {
        let [l1, l2, l3] = self.links;
        let wx = x - l3 * TOOL_ANGLE.cos() - self.base[0];
        let wz = z - l3 * TOOL_ANGLE.sin() - self.base[1];
        let d2 = wx * wx + wz * wz;
        let c2 = (d2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
        if !(-1.0..=1.0).contains(&c2) {
            return Err(Error::Sim(format!("({x:.3}, {z:.3}) is out of reach")));
        }
        let q2 = c2.acos();
        let q1 = wz.atan2(wx) - (l2 * q2.sin()).atan2(l1 + l2 * q2.cos());
        let q3 = TOOL_ANGLE - q1 - q2;
        Ok([q1, q2, q3])
    }

    /// Joints of the starting pose: effector near the lower edge of the
    /// table, raised, gripper open.
    pub fn home(&self) -> [f32; 5] {
        let [a, b, c] = self.inverse(0.0, 0.75).expect("home pose reachable");
        [a, b, c, 0.6, 0.0]
    }

    pub fn reachable(&self, x: f32, z: f32) -> bool {
        self.inverse(x, z).is_ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn inverse_then_forward_recovers_target(x in -0.9f32..0.9, z in -0.9f32..0.9) {
            let arm = Arm::new(&Config::desk().sim);
            let q = arm.inverse(x, z).unwrap();
            let (fx, fz) = arm.forward(&q);
            prop_assert!((fx - x).abs() < 1e-4 && (fz - z).abs() < 1e-4);
        }
    }

    #[test]
    fn whole_table_interior_is_reachable() {
        let arm = Arm::new(&Config::desk().sim);
        for i in 0..=20 {
            for j in 0..=20 {
                let (x, z) = (-0.9 + 0.09 * i as f32, -0.9 + 0.09 * j as f32);
                assert!(arm.reachable(x, z), "({x}, {z})");
            }
        }
    }
}
