//! Fixed-length state encoding for the value network.
//!
//! Loose primitives enter only as counts by length and by color, so states
//! that differ in loose positions encode bit-identically. Structure is a
//! voxel grid in a window centered on the workspace anchors: one channel of
//! occupied volume per unit voxel and one of the occupying color. Only the
//! part grounded on the structure sites is voxelized; other stacked pieces
//! and anything outside the window are counted by length. The built shape
//! is described independently of how it is split into primitives.

use crate::world::{Color, Primitive, WorldState, EPS, M_MAX, WORKSPACE_HEIGHT};

pub const VOXELS_X: usize = 9;
pub const VOXELS_Y: usize = 5;
pub const VOXELS_Z: usize = WORKSPACE_HEIGHT as usize;
pub const VOXELS: usize = VOXELS_X * VOXELS_Y * VOXELS_Z;

pub const LOOSE_LENGTHS: usize = 0;
pub const LOOSE_COLORS: usize = LOOSE_LENGTHS + 3;
pub const OUTSIDE_LENGTHS: usize = LOOSE_COLORS + Color::ALL.len();
pub const OCCUPANCY: usize = OUTSIDE_LENGTHS + 3;
pub const VOXEL_COLOR: usize = OCCUPANCY + VOXELS;
pub const OFFSITE_LENGTHS: usize = VOXEL_COLOR + VOXELS;
pub const ENCODING_DIM: usize = OFFSITE_LENGTHS + 3;

pub type Encoding = [f64; ENCODING_DIM];

/// Window origin (min corner) in U.
fn window(state: &WorldState) -> [f64; 2] {
    let anchors = &state.workspace().anchors;
    let n = anchors.len().max(1) as f64;
    let cx = anchors.iter().map(|c| c.x as f64 + 0.5).sum::<f64>() / n;
    let cy = anchors.iter().map(|c| c.y as f64 + 0.5).sum::<f64>() / n;
    [cx - VOXELS_X as f64 / 2.0, cy - VOXELS_Y as f64 / 2.0]
}

/// Primitives resting on the structure sites, directly or through a chain
/// of supports.
fn grounded(state: &WorldState) -> Vec<bool> {
    let prims = state.primitives();
    let ws = state.workspace();
    let mut g: Vec<bool> =
        prims.iter().map(|p| p.z_bottom().abs() < EPS && ws.touches_reserved(&p.bounds().footprint())).collect();
    loop {
        let mut changed = false;
        for (i, q) in prims.iter().enumerate() {
            if g[i] {
                continue;
            }
            let fq = q.bounds().footprint();
            let rests = prims.iter().enumerate().any(|(j, p)| {
                g[j] && (p.top() - q.z_bottom()).abs() < EPS && p.bounds().footprint().overlap_area(&fq) > EPS
            });
            if rests {
                g[i] = true;
                changed = true;
            }
        }
        if !changed {
            return g;
        }
    }
}

fn overlap(a0: f64, a1: f64, b0: f64) -> f64 {
    (a1.min(b0 + 1.0) - a0.max(b0)).max(0.0)
}

/// Adds the primitive's volume to the grid; false if none of it is inside.
fn rasterize(p: &Primitive, origin: [f64; 2], out: &mut [f64]) -> bool {
    let b = p.bounds();
    let color = p.color.index() as f64 / Color::ALL.len() as f64;
    let mut inside = false;
    for i in 0..VOXELS_X {
        let ox = overlap(b.min[0], b.max[0], origin[0] + i as f64);
        if ox <= 0.0 {
            continue;
        }
        for j in 0..VOXELS_Y {
            let oy = overlap(b.min[1], b.max[1], origin[1] + j as f64);
            if oy <= 0.0 {
                continue;
            }
            for k in 0..VOXELS_Z {
                let oz = overlap(b.min[2], b.max[2], k as f64);
                if oz <= 0.0 {
                    continue;
                }
                inside = true;
                let v = (k * VOXELS_Y + j) * VOXELS_X + i;
                out[OCCUPANCY + v] = (out[OCCUPANCY + v] + ox * oy * oz).min(1.0);
                out[VOXEL_COLOR + v] = color;
            }
        }
    }
    inside
}

pub fn encode(state: &WorldState) -> Encoding {
    let loose = state.loose_mask();
    let site = grounded(state);
    let origin = window(state);
    let per = 1.0 / M_MAX as f64;
    let mut out = [0.0; ENCODING_DIM];
    let mut structure: Vec<&Primitive> = Vec::new();
    for ((p, l), g) in state.primitives().iter().zip(&loose).zip(&site) {
        if *l {
            out[LOOSE_LENGTHS + p.length as usize - 1] += per;
            out[LOOSE_COLORS + p.color.index() as usize - 1] += per;
        } else if !g {
            out[OFFSITE_LENGTHS + p.length as usize - 1] += per;
        } else {
            structure.push(p);
        }
    }
    // Lower primitives first so the color channel shows the topmost piece.
    structure.sort_by(|a, b| a.z_bottom().total_cmp(&b.z_bottom()).then(a.id.cmp(&b.id)));
    for p in structure {
        if !rasterize(p, origin, &mut out) {
            out[OUTSIDE_LENGTHS + p.length as usize - 1] += per;
        }
    }
    out
}
