//! Four-channel pick/place heatmaps: Gaussian encoding of action sets,
//! local-maximum decoding, snapping decoded cells to simulator actions, and
//! the policy dataset `D_π`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{AugmentConfig, HeatmapConfig};
use crate::io::{f32_le_bytes, write_tensor, Meta, TensorSidecar, TENSOR_SCHEMA_VERSION};
use crate::render::{augment, render, Camera, Observation, Phase, RenderError};
use crate::unmake::Dmu;
use crate::value::dataset::random_move;
use crate::world::{AssemblyAction, Orientation, WorldError, WorldState, GRID_CELLS};

pub const GRID: usize = 64;
pub const CHANNELS: usize = 4;
/// Workspace units per heatmap cell.
pub const CELL_U: f64 = GRID_CELLS as f64 / GRID as f64;
/// Snapping radius in U.
pub const SNAP_RADIUS: f64 = 1.5;
pub const DPI_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HeatmapError {
    #[error("position ({0}, {1}) lies outside the heatmap grid")]
    PositionOutsideGrid(f64, f64),
    #[error("no non-blocked primitive within {SNAP_RADIUS}U of ({0}, {1})")]
    NoNearbyPrimitive(f64, f64),
    #[error("no valid placement within {SNAP_RADIUS}U of ({0}, {1})")]
    NoNearbyPlacement(f64, f64),
    #[error("empty action set")]
    EmptyActions,
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapKind {
    Pick,
    Place,
}

/// Channel-major `4 × 64 × 64`; row index is `v` (y), column is `u` (x).
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub data: Vec<f32>,
}

impl Default for Heatmap {
    fn default() -> Self {
        Heatmap { data: vec![0.0; CHANNELS * GRID * GRID] }
    }
}

impl Heatmap {
    pub fn at(&self, c: usize, u: usize, v: usize) -> f32 {
        self.data[c * GRID * GRID + v * GRID + u]
    }

    fn at_mut(&mut self, c: usize, u: usize, v: usize) -> &mut f32 {
        &mut self.data[c * GRID * GRID + v * GRID + u]
    }

    pub fn channel_sum(&self, c: usize) -> f64 {
        self.data[c * GRID * GRID..(c + 1) * GRID * GRID].iter().map(|&v| v as f64).sum()
    }
}

/// Workspace `(x, y)` to continuous grid `(u, v)`.
pub fn to_grid(xy: [f64; 2]) -> [f64; 2] {
    [xy[0] / CELL_U, xy[1] / CELL_U]
}

pub fn from_grid(u: f64, v: f64) -> [f64; 2] {
    [u * CELL_U, v * CELL_U]
}

/// Max-combined Gaussian blobs at grid points, each also written to the
/// channel of its orientation class.
pub fn encode_points(points: &[([f64; 2], Orientation)], sigma: f64) -> Result<Heatmap, HeatmapError> {
    let mut hm = Heatmap::default();
    let reach = (4.0 * sigma).ceil() as i64;
    for (xy, o) in points {
        let [gu, gv] = to_grid(*xy);
        if !(0.0..=(GRID - 1) as f64).contains(&gu) || !(0.0..=(GRID - 1) as f64).contains(&gv) {
            return Err(HeatmapError::PositionOutsideGrid(xy[0], xy[1]));
        }
        let (cu, cv) = (gu.round() as i64, gv.round() as i64);
        for v in (cv - reach).max(0)..=(cv + reach).min(GRID as i64 - 1) {
            for u in (cu - reach).max(0)..=(cu + reach).min(GRID as i64 - 1) {
                let d2 = (u as f64 - gu).powi(2) + (v as f64 - gv).powi(2);
                if d2 > (4.0 * sigma).powi(2) {
                    continue;
                }
                let val = (-d2 / (2.0 * sigma * sigma)).exp() as f32;
                for c in [0, 1 + o.index()] {
                    let cell = hm.at_mut(c, u as usize, v as usize);
                    *cell = cell.max(val);
                }
            }
        }
    }
    Ok(hm)
}

/// Pick heatmaps mark the current position of each picked primitive; place
/// heatmaps mark each target position.
pub fn encode_heatmap(
    actions: &[AssemblyAction],
    kind: HeatmapKind,
    state: &WorldState,
    sigma: f64,
) -> Result<Heatmap, HeatmapError> {
    if actions.is_empty() {
        return Err(HeatmapError::EmptyActions);
    }
    let mut pts = Vec::with_capacity(actions.len());
    for a in actions {
        let xy = match kind {
            HeatmapKind::Pick => {
                let p = state.get(a.pick_id).ok_or(WorldError::UnknownPrimitive(a.pick_id))?;
                [p.position[0], p.position[1]]
            }
            HeatmapKind::Place => [a.place_position[0], a.place_position[1]],
        };
        pts.push((xy, a.orientation));
    }
    encode_points(&pts, sigma)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub u: usize,
    pub v: usize,
    pub orientation: Orientation,
    pub score: f32,
}

impl Decoded {
    pub fn xy(&self) -> [f64; 2] {
        from_grid(self.u as f64, self.v as f64)
    }
}

/// Top-`k` local maxima of channel 0 after non-maximum suppression; the
/// orientation at each is the argmax over channels 1–3.
pub fn decode_heatmap(hm: &Heatmap, top_k: usize, cfg: &HeatmapConfig) -> Vec<Decoded> {
    let mut cands: Vec<(f32, usize, usize)> = Vec::new();
    for v in 0..GRID {
        for u in 0..GRID {
            let s = hm.at(0, u, v);
            if (s as f64) <= cfg.threshold {
                continue;
            }
            let mut is_max = true;
            'n: for dv in -1i64..=1 {
                for du in -1i64..=1 {
                    let (nu, nv) = (u as i64 + du, v as i64 + dv);
                    if (du, dv) == (0, 0) || nu < 0 || nv < 0 || nu >= GRID as i64 || nv >= GRID as i64 {
                        continue;
                    }
                    if hm.at(0, nu as usize, nv as usize) > s {
                        is_max = false;
                        break 'n;
                    }
                }
            }
            if is_max {
                cands.push((s, u, v));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
    let r = cfg.nms_radius as i64;
    let mut out: Vec<Decoded> = Vec::new();
    for (s, u, v) in cands {
        if out.len() >= top_k {
            break;
        }
        if out.iter().any(|d| (d.u as i64 - u as i64).abs() <= r && (d.v as i64 - v as i64).abs() <= r) {
            continue;
        }
        let mut best = 0;
        for k in 1..3 {
            if hm.at(1 + k, u, v) > hm.at(1 + best, u, v) {
                best = k;
            }
        }
        out.push(Decoded { u, v, orientation: Orientation::from_index(best).unwrap(), score: s });
    }
    out
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Nearest non-blocked primitive to the decoded cell.
pub fn snap_pick(state: &WorldState, d: &Decoded) -> Result<u32, HeatmapError> {
    let xy = d.xy();
    let mut best: Option<(f64, u32)> = None;
    for id in state.non_blocked() {
        let p = state.get(id).unwrap();
        let d2 = dist2(xy, [p.position[0], p.position[1]]);
        if d2 <= SNAP_RADIUS * SNAP_RADIUS && best.is_none_or(|(b, _)| d2 < b) {
            best = Some((d2, id));
        }
    }
    best.map(|(_, id)| id).ok_or(HeatmapError::NoNearbyPrimitive(xy[0], xy[1]))
}

/// Nearest valid placement of `pick_id`: structure spots from the action
/// enumeration plus free table poses. Candidates with the decoded
/// orientation are preferred.
pub fn snap_place(state: &WorldState, pick_id: u32, d: &Decoded) -> Result<AssemblyAction, HeatmapError> {
    let xy = d.xy();
    let p = state.get(pick_id).ok_or(WorldError::UnknownPrimitive(pick_id))?;
    let mut cands: Vec<AssemblyAction> = state.enumerate_actions().into_iter().filter(|a| a.pick_id == pick_id).collect();
    for &o in crate::world::orientations_for(p.length) {
        for pos in state.free_table_positions(pick_id, o) {
            if dist2(xy, [pos[0], pos[1]]) <= SNAP_RADIUS * SNAP_RADIUS {
                cands.push(AssemblyAction::new(pick_id, pos, o));
            }
        }
    }
    let want = crate::world::canonical_orientation(p.length, d.orientation);
    let mut best: Option<((bool, f64), AssemblyAction)> = None;
    for a in cands {
        let d2 = dist2(xy, [a.place_position[0], a.place_position[1]]);
        if d2 > SNAP_RADIUS * SNAP_RADIUS || !state.is_valid_action(&a) {
            continue;
        }
        let key = (a.orientation != want, d2);
        if best.as_ref().is_none_or(|(b, _)| key.0 < b.0 || (key.0 == b.0 && key.1 < b.1)) {
            best = Some((key, a));
        }
    }
    best.map(|(_, a)| a).ok_or(HeatmapError::NoNearbyPlacement(xy[0], xy[1]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Demo,
    Perturbation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub state_key: String,
    pub action_count: usize,
    pub kind: SampleKind,
    pub held: Option<u32>,
}

#[derive(Clone, Debug)]
pub struct PolicySample {
    pub observation: Observation,
    pub heatmap: Heatmap,
    pub meta: SampleMeta,
}

/// Pick sample plus one place sample per distinct picked primitive.
fn samples_for(
    state: &WorldState,
    actions: &[AssemblyAction],
    kind: SampleKind,
    camera: &Camera,
    hcfg: &HeatmapConfig,
    aug: &AugmentConfig,
    rng_seed: &mut u64,
    sink: &mut dyn FnMut(PolicySample) -> Result<(), HeatmapError>,
) -> Result<(), HeatmapError> {
    let key = state.canonical_key().digest();
    let mut noisy = |o: Observation| {
        *rng_seed = rng_seed.wrapping_add(1);
        if aug.bernoulli_p > 0.0 || aug.extent_noise > 0.0 {
            augment(&o, aug.bernoulli_p, aug.extent_noise, *rng_seed, camera)
        } else {
            o
        }
    };
    let pick_obs = noisy(render(state, Phase::Pick, None, camera)?);
    sink(PolicySample {
        observation: pick_obs,
        heatmap: encode_heatmap(actions, HeatmapKind::Pick, state, hcfg.sigma)?,
        meta: SampleMeta { state_key: key.clone(), action_count: actions.len(), kind, held: None },
    })?;
    let mut by_pick: BTreeMap<u32, Vec<AssemblyAction>> = BTreeMap::new();
    for a in actions {
        by_pick.entry(a.pick_id).or_default().push(a.clone());
    }
    for (id, acts) in by_pick {
        let obs = noisy(render(state, Phase::Place, Some(id), camera)?);
        sink(PolicySample {
            observation: obs,
            heatmap: encode_heatmap(&acts, HeatmapKind::Place, state, hcfg.sigma)?,
            meta: SampleMeta { state_key: key.clone(), action_count: acts.len(), kind, held: Some(id) },
        })?;
    }
    Ok(())
}

/// Build `D_π` from `D_μ`, streaming samples to `sink` in a deterministic
/// order. `goals` are assembled states; together with every `D_μ` state they
/// receive `perturbations_per_state` random one-step perturbations labelled
/// with the corrective inverse action.
#[allow(clippy::too_many_arguments)]
pub fn build_dpi(
    dmu: &Dmu,
    goals: &[WorldState],
    camera: &Camera,
    hcfg: &HeatmapConfig,
    aug: &AugmentConfig,
    perturbations_per_state: usize,
    seed: u64,
    sink: &mut dyn FnMut(PolicySample) -> Result<(), HeatmapError>,
) -> Result<(), HeatmapError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut aug_seed = seed;
    for e in &dmu.entries {
        if e.actions.is_empty() {
            continue;
        }
        samples_for(&e.state, &e.actions, SampleKind::Demo, camera, hcfg, aug, &mut aug_seed, sink)?;
    }
    if perturbations_per_state == 0 {
        return Ok(());
    }
    let bases: Vec<&WorldState> = goals.iter().chain(dmu.entries.iter().map(|e| &e.state)).collect();
    for s in bases {
        for _ in 0..perturbations_per_state {
            let Some(mv) = random_move(s, &mut rng) else { continue };
            let moved = s.apply_action(&mv)?;
            let fix = s.invert_action(&mv)?;
            samples_for(&moved, &[fix], SampleKind::Perturbation, camera, hcfg, aug, &mut aug_seed, sink)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct IndexRecord<'a> {
    schema_version: u32,
    index: usize,
    phase: Phase,
    depth_path: String,
    seg_path: String,
    heatmap_path: String,
    #[serde(flatten)]
    sample: &'a SampleMeta,
    meta: &'a Meta,
}

/// Writes samples as raw tensors plus `index.jsonl` under a directory.
pub struct DpiWriter {
    dir: PathBuf,
    index: fs::File,
    count: usize,
    meta: Meta,
    camera: serde_json::Value,
}

impl DpiWriter {
    pub fn create(dir: &Path, meta: Meta, camera: &Camera) -> Result<Self, HeatmapError> {
        fs::create_dir_all(dir.join("tensors"))?;
        let index = fs::File::create(dir.join("index.jsonl"))?;
        Ok(DpiWriter {
            dir: dir.to_path_buf(),
            index,
            count: 0,
            meta,
            camera: serde_json::to_value(camera).expect("camera serializes"),
        })
    }

    pub fn write(&mut self, s: PolicySample) -> Result<(), HeatmapError> {
        let i = self.count;
        let o = &s.observation;
        let side = |shape: Vec<usize>, dtype: &str, camera: bool| TensorSidecar {
            schema_version: TENSOR_SCHEMA_VERSION,
            shape,
            dtype: dtype.into(),
            camera: camera.then(|| self.camera.clone()),
            meta: self.meta.clone(),
        };
        let depth_path = format!("tensors/{i:06}_depth.f32");
        let seg_path = format!("tensors/{i:06}_seg.u8");
        let hm_path = format!("tensors/{i:06}_heatmap.f32");
        write_tensor(&self.dir.join(&depth_path), &f32_le_bytes(&o.depth), &side(vec![o.height, o.width], "float32", true))?;
        write_tensor(&self.dir.join(&seg_path), &o.segmentation, &side(vec![o.height, o.width], "uint8", true))?;
        write_tensor(
            &self.dir.join(&hm_path),
            &f32_le_bytes(&s.heatmap.data),
            &side(vec![CHANNELS, GRID, GRID], "float32", false),
        )?;
        let rec = IndexRecord {
            schema_version: DPI_SCHEMA_VERSION,
            index: i,
            phase: o.phase,
            depth_path,
            seg_path,
            heatmap_path: hm_path,
            sample: &s.meta,
            meta: &self.meta,
        };
        writeln!(self.index, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }
}
