use serde::{Deserialize, Serialize};

use super::camera::EgoState;
use super::world::{Scenario, SceneObject};
use crate::error::{Error, Result};
use crate::flowio::{FlowField, Mask, RgbImage};
use crate::geometry::{GtBox, MotionClass};

/// Camera-frame 3D centroid of a visible object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectCentroid {
    pub id: u32,
    pub centroid: [f64; 3],
}

/// Everything rendered for one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub frame: usize,
    pub rgb: RgbImage,
    /// Displacement from frame t-1 to frame t, sampled on frame t's grid.
    pub flow: FlowField,
    pub motion_mask: Mask,
    pub boxes: Vec<GtBox>,
    pub centroids: Vec<ObjectCentroid>,
    pub ego: EgoState,
}

/// What each pixel ray hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Sky,
    Ground,
    /// Object index into `Scenario::objects` and face `0..6`.
    Object(usize, u8),
}

/// Per-pixel hit buffers of a rendered frame.
#[derive(Debug, Clone)]
pub struct HitBuffers {
    pub surface: Vec<Surface>,
    pub depth: Vec<f64>,
    /// Pixels whose ray meets each object, ignoring other objects.
    pub silhouette: Vec<usize>,
    /// Pixels where each object is the nearest surface.
    pub visible: Vec<usize>,
}

const FOG_DISTANCE: f64 = 45.0;
const HORIZON: [f64; 3] = [0.72, 0.76, 0.80];
const ZENITH: [f64; 3] = [0.42, 0.56, 0.82];
const ROAD: [f64; 3] = [0.40, 0.40, 0.43];
const GRASS: [f64; 3] = [0.28, 0.44, 0.20];
const GLASS: [f64; 3] = [0.12, 0.14, 0.18];

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn fog(c: [f64; 3], dist: f64) -> [f64; 3] {
    mix(HORIZON, c, (-dist / FOG_DISTANCE).exp())
}

fn sky_color(d: [f64; 3]) -> [f64; 3] {
    let elev = d[2].atan2(d[0].hypot(d[1]));
    mix(HORIZON, ZENITH, smoothstep(0.0, 0.5, elev))
}

fn ground_color(p: [f64; 3], phase: &[f64; 4]) -> [f64; 3] {
    let road = smoothstep(5.5, 4.5, p[1].abs());
    let base = mix(GRASS, ROAD, road);
    let tex = 1.0
        + 0.12 * (0.9 * p[0] + phase[0]).sin() * (1.1 * p[1] + phase[1]).sin()
        + 0.06 * (0.37 * p[0] + 0.5 * p[1] + phase[2]).sin()
        + 0.05 * (0.23 * p[0] - 0.41 * p[1] + phase[3]).sin();
    base.map(|c| c * tex)
}

/// Face shading and a window band, as a function of the box-local hit point.
fn object_color(obj: &SceneObject, face: u8, q: [f64; 3]) -> [f64; 3] {
    let [l, w, h] = obj.dims;
    let shade = [0.92, 0.88, 0.78, 0.70, 1.05, 0.5][face as usize];
    let along = match face {
        0 | 1 => q[1] / w,
        _ => q[0] / l,
    };
    let pattern = 1.0 + 0.08 * (6.0 * along + 1.7 * obj.id as f64).sin();
    let body = obj.albedo.map(|c| c * shade * pattern);
    if face >= 4 {
        return body;
    }
    let z = q[2] / h + 0.5;
    let glass = smoothstep(0.55, 0.63, z) * (1.0 - smoothstep(0.88, 0.95, z));
    mix(body, GLASS, 0.75 * glass)
}

/// Ray vs. oriented box in box-local coordinates. Returns the entry distance,
/// face index (`0/1` = -x/+x, `2/3` = -y/+y, `4/5` = +z/-z) and local hit point.
fn intersect_box(obj: &SceneObject, center: [f64; 3], origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, u8, [f64; 3])> {
    let (s, c) = obj.yaw.sin_cos();
    let rel = [origin[0] - center[0], origin[1] - center[1], origin[2] - center[2]];
    let o = [c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]];
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let half = [0.5 * obj.dims[0], 0.5 * obj.dims[1], 0.5 * obj.dims[2]];
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    let mut face = 0u8;
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let (mut ta, mut tb) = ((-half[a] - o[a]) * inv, (half[a] - o[a]) * inv);
        // entry face is on the side the ray comes from
        let mut entry = if a == 2 { 5 } else { 2 * a as u8 };
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
            entry = if a == 2 { 4 } else { 2 * a as u8 + 1 };
        }
        if ta > t0 {
            t0 = ta;
            face = entry;
        }
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    if t0 <= 0.0 {
        return None;
    }
    Some((t0, face, [o[0] + t0 * d[0], o[1] + t0 * d[1], o[2] + t0 * d[2]]))
}

fn to_byte(c: f64) -> u8 {
    (c * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Casts one ray per pixel center and returns colors plus hit buffers.
pub fn raycast(sc: &Scenario, k: i64) -> (Vec<[f64; 3]>, Vec<[f64; 3]>, HitBuffers) {
    let cam = &sc.camera;
    let ego = sc.ego_state(k);
    let time = k as f64 * sc.dt;
    let centers: Vec<[f64; 3]> = sc.objects.iter().map(|o| o.center_at(time)).collect();
    let origin = [ego.x, ego.y, cam.mount_height];
    let n = cam.width * cam.height;
    let mut colors = Vec::with_capacity(n);
    let mut points = Vec::with_capacity(n);
    let mut hits = HitBuffers {
        surface: Vec::with_capacity(n),
        depth: Vec::with_capacity(n),
        silhouette: vec![0; sc.objects.len()],
        visible: vec![0; sc.objects.len()],
    };
    for v in 0..cam.height {
        for u in 0..cam.width {
            let dir = cam.ray(&ego, u as f64 + 0.5, v as f64 + 0.5);
            let mut best: Option<(f64, Surface, [f64; 3])> = None;
            if dir[2] < 0.0 {
                let t = -cam.mount_height / dir[2];
                best = Some((t, Surface::Ground, [0.0; 3]));
            }
            for (i, obj) in sc.objects.iter().enumerate() {
                if let Some((t, face, q)) = intersect_box(obj, centers[i], origin, dir) {
                    hits.silhouette[i] += 1;
                    if best.is_none_or(|b| t < b.0) {
                        best = Some((t, Surface::Object(i, face), q));
                    }
                }
            }
            let (color, surface, depth, point) = match best {
                None => (sky_color(dir), Surface::Sky, f64::INFINITY, dir),
                Some((t, surface, q)) => {
                    let p = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
                    let c = match surface {
                        Surface::Object(i, face) => {
                            hits.visible[i] += 1;
                            object_color(&sc.objects[i], face, q)
                        }
                        _ => ground_color(p, &sc.texture),
                    };
                    (fog(c, t), surface, cam.world_to_camera(&ego, p)[2], p)
                }
            };
            colors.push(color);
            points.push(point);
            hits.surface.push(surface);
            hits.depth.push(depth);
        }
    }
    (colors, points, hits)
}

/// Renders frame `t` of a scenario.
pub fn render(sc: &Scenario, t: usize) -> Result<FrameSample> {
    if t >= sc.frames {
        return Err(Error::Invalid(format!("frame {t} out of range 0..{}", sc.frames)));
    }
    let cam = &sc.camera;
    let k = t as i64;
    let ego = sc.ego_state(k);
    let prev = sc.ego_state(k - 1);
    let (colors, points, hits) = raycast(sc, k);
    let (w, h) = (cam.width, cam.height);

    let rgb = RgbImage::new(w, h, colors.iter().flat_map(|c| c.map(to_byte)).collect())?;
    let mut flow = FlowField::zeros(w, h);
    let mut mask = Mask::zeros(w, h);
    let proj = |e: &EgoState, p: [f64; 3]| cam.project(e, p).ok().map(|(a, b, _)| (a, b));
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let p = points[i];
            // both ends are projected so that identical poses cancel exactly
            let ends = match hits.surface[i] {
                Surface::Sky => cam.project_direction(&ego, p).zip(cam.project_direction(&prev, p)),
                Surface::Ground => proj(&ego, p).zip(proj(&prev, p)),
                Surface::Object(o, _) => {
                    let vel = sc.objects[o].velocity;
                    if sc.objects[o].is_moving() {
                        mask.data[i] = 1;
                    }
                    let q = [p[0] - vel[0] * sc.dt, p[1] - vel[1] * sc.dt, p[2] - vel[2] * sc.dt];
                    proj(&ego, p).zip(proj(&prev, q))
                }
            };
            // points behind the previous camera have no defined flow
            if let Some(((a1, b1), (a0, b0))) = ends {
                flow.set(u, v, (a1 - a0) as f32, (b1 - b0) as f32);
            }
        }
    }

    let mut boxes = Vec::new();
    let mut centroids = Vec::new();
    for (i, obj) in sc.objects.iter().enumerate() {
        if hits.visible[i] == 0 {
            continue;
        }
        let Some(full) = sc.amodal_box(obj, k) else {
            continue;
        };
        let bbox = full.clip(w as f64, h as f64);
        if bbox.area() <= 0.0 {
            continue;
        }
        let occlusion = 1.0 - hits.visible[i] as f64 / hits.silhouette[i] as f64;
        boxes.push(GtBox {
            id: obj.id,
            bbox,
            motion: if obj.is_moving() {
                MotionClass::Moving
            } else {
                MotionClass::Static
            },
            occlusion,
        });
        centroids.push(ObjectCentroid {
            id: obj.id,
            centroid: cam.world_to_camera(&ego, obj.center_at(k as f64 * sc.dt)),
        });
    }

    Ok(FrameSample {
        frame: t,
        rgb,
        flow,
        motion_mask: mask,
        boxes,
        centroids,
        ego,
    })
}

/// Renders every frame, in parallel.
pub fn render_all(sc: &Scenario) -> Result<Vec<FrameSample>> {
    use rayon::prelude::*;
    (0..sc.frames).into_par_iter().map(|t| render(sc, t)).collect()
}
