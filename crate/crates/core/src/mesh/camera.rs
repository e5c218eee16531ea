use serde::{Deserialize, Serialize};

use super::geometry::Vec3;
use super::joints::JointSet;
use crate::error::{invalid, Result};

/// Weak-perspective camera `π = [s, t]`: drop z, scale by `s`, shift by `t`.
/// Image coordinates are normalized to `[-1, 1]` per axis, y up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub s: f64,
    pub t: [f64; 2],
}

impl CameraParams {
    pub fn new(s: f64, t: [f64; 2]) -> Result<Self> {
        if !(s > 0.0 && s.is_finite()) || t.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("camera needs finite t and positive scale, got s={s}"));
        }
        Ok(CameraParams { s, t })
    }

    pub fn project_point(&self, p: &Vec3) -> [f64; 2] {
        [self.s * p.x + self.t[0], self.s * p.y + self.t[1]]
    }

    pub fn project(&self, joints: &JointSet) -> Vec<[f64; 2]> {
        joints.joints().iter().map(|p| self.project_point(p)).collect()
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.s, self.t[0], self.t[1]]
    }
}
