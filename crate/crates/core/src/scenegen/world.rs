use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camera::{CameraModel, EgoState};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// A box-shaped vehicle translating at constant velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    /// Box center at t = 0 (world, meters).
    pub center: [f64; 3],
    /// Length, width, height (meters).
    pub dims: [f64; 3],
    pub yaw: f64,
    /// World-frame velocity (m/s); exactly zero for parked vehicles.
    pub velocity: [f64; 3],
    pub albedo: [f64; 3],
}

impl SceneObject {
    pub fn is_moving(&self) -> bool {
        self.velocity.iter().any(|&v| v != 0.0)
    }

    pub fn center_at(&self, time: f64) -> [f64; 3] {
        [
            self.center[0] + self.velocity[0] * time,
            self.center[1] + self.velocity[1] * time,
            self.center[2] + self.velocity[2] * time,
        ]
    }

    pub fn corners_at(&self, time: f64) -> [[f64; 3]; 8] {
        let c = self.center_at(time);
        let (s, co) = self.yaw.sin_cos();
        let [l, w, h] = self.dims;
        let mut out = [[0.0; 3]; 8];
        for (i, o) in out.iter_mut().enumerate() {
            let a = if i & 1 == 0 { -0.5 } else { 0.5 } * l;
            let b = if i & 2 == 0 { -0.5 } else { 0.5 } * w;
            let z = if i & 4 == 0 { -0.5 } else { 0.5 } * h;
            *o = [c[0] + co * a - s * b, c[1] + s * a + co * b, c[2] + z];
        }
        out
    }
}

/// Ego trajectory: constant speed along a constant-curvature arc from the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoMotion {
    pub speed: f64,
    pub yaw_rate: f64,
}

impl EgoMotion {
    pub fn pose(&self, time: f64) -> (f64, f64, f64) {
        let th = self.yaw_rate * time;
        if self.yaw_rate.abs() < 1e-12 {
            (self.speed * time, 0.0, 0.0)
        } else {
            let r = self.speed / self.yaw_rate;
            (r * th.sin(), r * (1.0 - th.cos()), th)
        }
    }
}

/// Generation knobs shared by every sequence of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub camera: CameraModel,
    pub dt: f64,
    pub moving_ratio: f64,
    pub ego_speed: (f64, f64),
    pub max_yaw_rate: f64,
    /// World speed range of moving vehicles (m/s).
    pub mover_speed: (f64, f64),
    /// Longitudinal placement range ahead of the ego start (m).
    pub spawn_range: (f64, f64),
    /// Lateral offset range from the ego path (m), either side.
    pub lane_offset: (f64, f64),
    pub min_box_height: f64,
    pub min_depth: f64,
    pub min_track_iou: f64,
    pub max_overlap: f64,
    pub max_attempts: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            camera: CameraModel::default(),
            dt: 0.1,
            moving_ratio: 0.3,
            ego_speed: (5.0, 9.0),
            max_yaw_rate: 0.05,
            mover_speed: (3.0, 10.0),
            spawn_range: (8.0, 34.0),
            lane_offset: (2.5, 9.0),
            min_box_height: 6.0,
            min_depth: 3.0,
            min_track_iou: 0.6,
            max_overlap: 0.4,
            max_attempts: 200,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let ordered = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if self.dt.is_nan()
            || self.dt <= 0.0
            || !(0.0..=1.0).contains(&self.moving_ratio)
            || !ordered(self.ego_speed)
            || !ordered(self.mover_speed)
            || !ordered(self.spawn_range)
            || !ordered(self.lane_offset)
            || self.mover_speed.0 <= 0.0
        {
            return Err(Error::Config(format!("invalid world config {self:?}")));
        }
        Ok(())
    }
}

/// A fully specified synthetic sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub frames: usize,
    pub dt: f64,
    pub camera: CameraModel,
    pub ego: EgoMotion,
    pub objects: Vec<SceneObject>,
    /// Phases of the ground texture.
    pub texture: [f64; 4],
}

impl Scenario {
    /// Ego state at frame `k`; `k = -1` is the virtual frame before the first.
    pub fn ego_state(&self, k: i64) -> EgoState {
        let t = k as f64 * self.dt;
        let (x, y, yaw) = self.ego.pose(t);
        let (px, py, _) = self.ego.pose(t - self.dt);
        EgoState {
            x,
            y,
            yaw,
            vx: (x - px) / self.dt,
            vy: (y - py) / self.dt,
            timestamp: t,
        }
    }

    /// Unclipped image box of an object's projected corners, `None` if any
    /// corner lies behind the near plane.
    pub fn amodal_box(&self, obj: &SceneObject, k: i64) -> Option<BBox> {
        let ego = self.ego_state(k);
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for c in obj.corners_at(k as f64 * self.dt) {
            let (u, v, _) = self.camera.project(&ego, c).ok()?;
            x0 = x0.min(u);
            y0 = y0.min(v);
            x1 = x1.max(u);
            y1 = y1.max(v);
        }
        Some(BBox::from_corners(x0, y0, x1, y1))
    }

    fn min_corner_depth(&self, obj: &SceneObject, k: i64) -> f64 {
        let ego = self.ego_state(k);
        obj.corners_at(k as f64 * self.dt)
            .iter()
            .map(|&c| self.camera.world_to_camera(&ego, c)[2])
            .fold(f64::MAX, f64::min)
    }
}

fn overlap_over_min(a: &BBox, b: &BBox) -> f64 {
    let m = a.area().min(b.area());
    if m <= 0.0 {
        0.0
    } else {
        a.intersection(b) / m
    }
}

/// Per-frame clipped boxes if the object stays trackable for the whole
/// sequence, else `None`.
fn trackable_boxes(sc: &Scenario, obj: &SceneObject, cfg: &WorldConfig) -> Option<Vec<BBox>> {
    let (w, h) = (sc.camera.width as f64, sc.camera.height as f64);
    let mut boxes = Vec::with_capacity(sc.frames);
    for k in 0..sc.frames as i64 {
        if sc.min_corner_depth(obj, k) < cfg.min_depth {
            return None;
        }
        let full = sc.amodal_box(obj, k)?;
        let clipped = full.clip(w, h);
        if clipped.area() < 0.6 * full.area() || clipped.h < cfg.min_box_height {
            return None;
        }
        if let Some(prev) = boxes.last() {
            if clipped.iou(prev) < cfg.min_track_iou {
                return None;
            }
        }
        boxes.push(clipped);
    }
    Some(boxes)
}

const PALETTE: [[f64; 3]; 8] = [
    [0.75, 0.12, 0.10],
    [0.10, 0.25, 0.70],
    [0.85, 0.85, 0.82],
    [0.12, 0.12, 0.14],
    [0.80, 0.65, 0.10],
    [0.15, 0.50, 0.25],
    [0.55, 0.55, 0.58],
    [0.45, 0.20, 0.55],
];

fn sample_object(rng: &mut ChaCha8Rng, id: u32, moving: bool, cfg: &WorldConfig) -> SceneObject {
    let dims = [
        rng.random_range(3.8..4.8),
        rng.random_range(1.6..1.9),
        rng.random_range(1.35..1.7),
    ];
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let lateral = side * rng.random_range(cfg.lane_offset.0..=cfg.lane_offset.1);
    let ahead = rng.random_range(cfg.spawn_range.0..=cfg.spawn_range.1);
    let backwards = rng.random_bool(0.5);
    let (yaw, velocity) = if moving {
        let heading = if backwards { std::f64::consts::PI } else { 0.0 } + rng.random_range(-0.05..0.05);
        let speed = rng.random_range(cfg.mover_speed.0..=cfg.mover_speed.1);
        (heading, [speed * heading.cos(), speed * heading.sin(), 0.0])
    } else {
        let yaw = if backwards { std::f64::consts::PI } else { 0.0 } + rng.random_range(-0.2..0.2);
        (yaw, [0.0; 3])
    };
    let base = PALETTE[rng.random_range(0..PALETTE.len())];
    let albedo = base.map(|c: f64| (c + rng.random_range(-0.05..0.05)).clamp(0.02, 0.98));
    SceneObject {
        id,
        center: [ahead, lateral, 0.5 * dims[2]],
        dims,
        yaw,
        velocity,
        albedo,
    }
}

/// Samples a scenario with the default world configuration.
pub fn make_world(seed: u64, n_objects: usize, frames: usize) -> Scenario {
    make_world_with(seed, n_objects, frames, &WorldConfig::default()).expect("default world config is valid")
}

/// Samples a scenario. Each object slot draws its motion class first, then
/// retries its placement until it is trackable in every frame and does not
/// overlap earlier objects; slots that never fit are left empty.
pub fn make_world_with(seed: u64, n_objects: usize, frames: usize, cfg: &WorldConfig) -> Result<Scenario> {
    cfg.validate()?;
    if frames == 0 {
        return Err(Error::Config("a scenario needs at least one frame".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ego = EgoMotion {
        speed: rng.random_range(cfg.ego_speed.0..=cfg.ego_speed.1),
        yaw_rate: rng.random_range(-cfg.max_yaw_rate..=cfg.max_yaw_rate),
    };
    let texture = [
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
    ];
    let mut sc = Scenario {
        seed,
        frames,
        dt: cfg.dt,
        camera: cfg.camera,
        ego,
        objects: Vec::new(),
        texture,
    };
    let mut accepted: Vec<Vec<BBox>> = Vec::new();
    for slot in 0..n_objects {
        let moving = rng.random_bool(cfg.moving_ratio);
        for _ in 0..cfg.max_attempts {
            let obj = sample_object(&mut rng, slot as u32 + 1, moving, cfg);
            let Some(boxes) = trackable_boxes(&sc, &obj, cfg) else {
                continue;
            };
            let clear = accepted.iter().all(|other| {
                other
                    .iter()
                    .zip(&boxes)
                    .all(|(a, b)| overlap_over_min(a, b) <= cfg.max_overlap)
            });
            if clear {
                sc.objects.push(obj);
                accepted.push(boxes);
                break;
            }
        }
    }
    Ok(sc)
}
