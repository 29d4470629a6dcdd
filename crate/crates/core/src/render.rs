//! Software renderer: per-pixel ray casting against axis-aligned boxes and
//! the table plane, producing metric depth and palette segmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::CameraConfig;
use crate::world::{Aabb, Orientation, WorldState, UNIT_CM};

/// Depth assigned to rays that hit nothing, in meters.
pub const FAR_DEPTH_M: f32 = 10.0;
/// Held primitives hover with their bottom face this high above the table.
pub const HOVER_Z: f64 = 3.0;
pub const HOVER_XY: [f64; 2] = [8.0, 8.0];

const METERS_PER_UNIT: f64 = UNIT_CM / 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("held primitive {0} is not in the state")]
    HeldNotInState(u32),
    #[error("the place phase needs a held primitive")]
    MissingHeld,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pick,
    Place,
}

/// Pinhole camera with a look-at pose; coordinates in U.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub eye: [f64; 3],
    pub forward: [f64; 3],
    pub right: [f64; 3],
    pub up: [f64; 3],
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl Camera {
    pub fn from_config(c: &CameraConfig) -> Self {
        let forward = normalize(sub(c.target, c.eye));
        let right = normalize(cross(forward, [0.0, 0.0, 1.0]));
        let up = cross(right, forward);
        let f = (c.height as f64 / 2.0) / (c.fov_deg.to_radians() / 2.0).tan();
        Camera {
            width: c.width,
            height: c.height,
            fx: f,
            fy: f,
            cx: c.width as f64 / 2.0,
            cy: c.height as f64 / 2.0,
            eye: c.eye,
            forward,
            right,
            up,
        }
    }

    /// Unit ray direction through the center of pixel `(col, row)`.
    pub fn ray(&self, col: usize, row: usize) -> [f64; 3] {
        let a = (col as f64 + 0.5 - self.cx) / self.fx;
        let b = (row as f64 + 0.5 - self.cy) / self.fy;
        normalize([
            self.forward[0] + a * self.right[0] - b * self.up[0],
            self.forward[1] + a * self.right[1] - b * self.up[1],
            self.forward[2] + a * self.right[2] - b * self.up[2],
        ])
    }

    /// Continuous pixel coordinates `(col, row)` of a point, if in front.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        let d = sub(p, self.eye);
        let z = dot(d, self.forward);
        if z <= 0.0 {
            return None;
        }
        Some((self.cx + self.fx * dot(d, self.right) / z, self.cy - self.fy * dot(d, self.up) / z))
    }
}

/// Ray parameter of the first hit with a box, by the slab method.
pub fn ray_box(origin: [f64; 3], dir: [f64; 3], b: &Aabb) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        if dir[k].abs() < 1e-15 {
            if origin[k] < b.min[k] || origin[k] > b.max[k] {
                return None;
            }
        } else {
            let ta = (b.min[k] - origin[k]) / dir[k];
            let tb = (b.max[k] - origin[k]) / dir[k];
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    if t0 <= t1 && t1 > 0.0 {
        Some(if t0 > 0.0 { t0 } else { t1 })
    } else {
        None
    }
}

/// A box in the scene with its segmentation index.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneBox {
    pub bounds: Aabb,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldDescriptor {
    pub id: u32,
    pub length: u8,
    pub color: u8,
    pub orientation: Orientation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub width: usize,
    pub height: usize,
    /// Row-major depth in meters.
    pub depth: Vec<f32>,
    /// Row-major palette index; 0 is the table or background.
    pub segmentation: Vec<u8>,
    pub phase: Phase,
    pub held: Option<HeldDescriptor>,
    pub boxes: Vec<SceneBox>,
}

pub fn render_boxes(boxes: &[SceneBox], camera: &Camera) -> (Vec<f32>, Vec<u8>) {
    let n = camera.width * camera.height;
    let mut depth = vec![FAR_DEPTH_M; n];
    let mut seg = vec![0u8; n];
    for row in 0..camera.height {
        for col in 0..camera.width {
            let d = camera.ray(col, row);
            let mut best = f64::INFINITY;
            let mut label = 0u8;
            if d[2] < 0.0 {
                best = -camera.eye[2] / d[2];
            }
            for b in boxes {
                if let Some(t) = ray_box(camera.eye, d, &b.bounds) {
                    if t < best {
                        best = t;
                        label = b.label;
                    }
                }
            }
            let i = row * camera.width + col;
            if best.is_finite() {
                depth[i] = (best * METERS_PER_UNIT) as f32;
                seg[i] = label;
            }
        }
    }
    (depth, seg)
}

/// Scene boxes for a phase: in the place phase the held primitive is lifted
/// out of the scene and drawn at the hover pose.
pub fn scene_boxes(state: &WorldState, phase: Phase, held: Option<u32>) -> Result<(Vec<SceneBox>, Option<HeldDescriptor>), RenderError> {
    let held = match (phase, held) {
        (Phase::Place, None) => return Err(RenderError::MissingHeld),
        (Phase::Pick, _) => None,
        (Phase::Place, Some(id)) => Some(state.get(id).ok_or(RenderError::HeldNotInState(id))?),
    };
    let mut boxes: Vec<SceneBox> = state
        .primitives()
        .iter()
        .filter(|p| held.is_none_or(|h| h.id != p.id))
        .map(|p| SceneBox { bounds: p.bounds(), label: p.color.index() })
        .collect();
    let desc = held.map(|h| {
        let e = h.extents();
        let center = [HOVER_XY[0], HOVER_XY[1], HOVER_Z + e[2] / 2.0];
        boxes.push(SceneBox { bounds: Aabb::from_center(center, e), label: h.color.index() });
        HeldDescriptor { id: h.id, length: h.length, color: h.color.index(), orientation: h.orientation }
    });
    Ok((boxes, desc))
}

pub fn render(state: &WorldState, phase: Phase, held: Option<u32>, camera: &Camera) -> Result<Observation, RenderError> {
    let (boxes, desc) = scene_boxes(state, phase, held)?;
    let (depth, segmentation) = render_boxes(&boxes, camera);
    Ok(Observation { width: camera.width, height: camera.height, depth, segmentation, phase, held: desc, boxes })
}

/// Noise models: optional box-extent jitter (re-rendered) and Bernoulli
/// dropout of segmentation pixels to index 0.
pub fn augment(obs: &Observation, bernoulli_p: f64, extent_noise: f64, seed: u64, camera: &Camera) -> Observation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = obs.clone();
    if extent_noise > 0.0 {
        let boxes: Vec<SceneBox> = obs
            .boxes
            .iter()
            .map(|b| {
                let mut c = [0.0; 3];
                let mut e = [0.0; 3];
                for k in 0..3 {
                    c[k] = (b.bounds.min[k] + b.bounds.max[k]) / 2.0;
                    e[k] = (b.bounds.max[k] - b.bounds.min[k]) * (1.0 + rng.random_range(-extent_noise..=extent_noise));
                }
                SceneBox { bounds: Aabb::from_center(c, e), label: b.label }
            })
            .collect();
        let (d, s) = render_boxes(&boxes, camera);
        out.depth = d;
        out.segmentation = s;
        out.boxes = boxes;
    }
    if bernoulli_p > 0.0 {
        for v in out.segmentation.iter_mut() {
            if rng.random_bool(bernoulli_p) {
                *v = 0;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Color, Primitive, Workspace};
    use std::sync::Arc;

    fn cam() -> Camera {
        Camera::from_config(&CameraConfig::default())
    }

    #[test]
    fn workspace_projects_inside_the_image() {
        let c = cam();
        for x in [0.0, 16.0] {
            for y in [0.0, 16.0] {
                for z in [0.0, 8.0] {
                    let (u, v) = c.project([x, y, z]).unwrap();
                    assert!(u >= 0.0 && u < c.width as f64 && v >= 0.0 && v < c.height as f64, "{x} {y} {z}: {u} {v}");
                }
            }
        }
    }

    #[test]
    fn empty_table_depth_is_the_plane_distance() {
        let c = cam();
        let s = WorldState::empty(Arc::new(Workspace::arch()));
        let o = render(&s, Phase::Pick, None, &c).unwrap();
        assert!(o.segmentation.iter().all(|&v| v == 0));
        assert!(o.depth.iter().all(|&d| d > 0.0));
        let (col, row) = (128, 200);
        let d = c.ray(col, row);
        let t = -c.eye[2] / d[2];
        assert!((o.depth[row * c.width + col] as f64 - t * 0.045).abs() < 1e-4);
    }

    #[test]
    fn held_cube_renders_at_hover() {
        let c = cam();
        let s = WorldState::new(
            vec![Primitive::new(4, 1, Color::Yellow, [3.5, 3.5, 0.5], Orientation::AlongX)],
            Arc::new(Workspace::tower()),
        )
        .unwrap();
        let o = render(&s, Phase::Place, Some(4), &c).unwrap();
        let (u, v) = c.project([8.0, 8.0, 4.0]).unwrap();
        assert_eq!(o.segmentation[v as usize * c.width + u as usize], Color::Yellow.index());
        assert_eq!(render(&s, Phase::Place, Some(9), &c), Err(RenderError::HeldNotInState(9)));
    }

    #[test]
    fn zero_noise_is_identity() {
        let c = cam();
        let s = WorldState::new(
            vec![Primitive::new(0, 2, Color::Blue, [5.0, 5.5, 0.5], Orientation::AlongX)],
            Arc::new(Workspace::arch()),
        )
        .unwrap();
        let o = render(&s, Phase::Pick, None, &c).unwrap();
        assert_eq!(augment(&o, 0.0, 0.0, 3, &c), o);
    }
}
