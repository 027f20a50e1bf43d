use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer than this (meters, along the optical axis) are not projected.
pub const NEAR_PLANE: f64 = 0.5;

/// Pinhole camera mounted on the ego vehicle, looking along its heading.
///
/// Camera axes: x right, y down, z forward. The world is X forward,
/// Y left, Z up; the camera sits `height` meters above the ground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub mount_height: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel {
            fx: 110.0,
            fy: 110.0,
            cx: 96.0,
            cy: 26.0,
            width: 192,
            height: 64,
            mount_height: 1.65,
        }
    }
}

/// Ego pose, velocity and time for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    /// World-frame velocity (m/s): pose difference to the previous frame over dt.
    pub vx: f64,
    pub vy: f64,
    pub timestamp: f64,
}

impl EgoState {
    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && (0.0..=self.width as f64).contains(&self.cx)
            && (0.0..=self.height as f64).contains(&self.cy)
            && self.mount_height > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid camera {self:?}")))
        }
    }

    /// World point to camera coordinates.
    pub fn world_to_camera(&self, ego: &EgoState, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = ego.yaw.sin_cos();
        let (dx, dy, dz) = (p[0] - ego.x, p[1] - ego.y, p[2] - self.mount_height);
        let forward = c * dx + s * dy;
        let left = -s * dx + c * dy;
        [-left, -dz, forward]
    }

    pub fn camera_to_world(&self, ego: &EgoState, q: [f64; 3]) -> [f64; 3] {
        let (s, c) = ego.yaw.sin_cos();
        let (forward, left, up) = (q[2], -q[0], -q[1]);
        [
            ego.x + c * forward - s * left,
            ego.y + s * forward + c * left,
            self.mount_height + up,
        ]
    }

    /// Rotates a world direction into camera axes.
    pub fn direction_to_camera(&self, ego: &EgoState, d: [f64; 3]) -> [f64; 3] {
        let (s, c) = ego.yaw.sin_cos();
        let forward = c * d[0] + s * d[1];
        let left = -s * d[0] + c * d[1];
        [-left, -d[2], forward]
    }

    pub fn direction_to_world(&self, ego: &EgoState, q: [f64; 3]) -> [f64; 3] {
        let (s, c) = ego.yaw.sin_cos();
        let (forward, left, up) = (q[2], -q[0], -q[1]);
        [c * forward - s * left, s * forward + c * left, up]
    }

    /// Pinhole projection of a world point: `(u, v, depth)`.
    pub fn project(&self, ego: &EgoState, p: [f64; 3]) -> Result<(f64, f64, f64)> {
        let q = self.world_to_camera(ego, p);
        if q[2] <= NEAR_PLANE {
            return Err(Error::geometry(
                "project",
                format!("point at depth {:.3} m is behind the near plane", q[2]),
            ));
        }
        Ok((self.fx * q[0] / q[2] + self.cx, self.fy * q[1] / q[2] + self.cy, q[2]))
    }

    /// Projects a direction at infinity; `None` when it points backwards.
    pub fn project_direction(&self, ego: &EgoState, d: [f64; 3]) -> Option<(f64, f64)> {
        let q = self.direction_to_camera(ego, d);
        (q[2] > 1e-9).then(|| (self.fx * q[0] / q[2] + self.cx, self.fy * q[1] / q[2] + self.cy))
    }

    /// World-frame direction of the ray through image point `(u, v)`.
    pub fn ray(&self, ego: &EgoState, u: f64, v: f64) -> [f64; 3] {
        self.direction_to_world(ego, [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])
    }
}
