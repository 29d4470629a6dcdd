//! Block world: primitives, world states, pick-and-place actions and the
//! deterministic transition function.
//!
//! Coordinates are expressed in units `U` (one unit is 4.5 cm). The table is a
//! 16×16 grid of 1U cells spanning `[0, 16]²`, with `z = 0` at the table
//! surface. Primitive positions are box centers.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::json::fixed6;

/// Cells per table side.
pub const GRID_CELLS: i32 = 16;
/// Maximum height of any box top, in U.
pub const WORKSPACE_HEIGHT: f64 = 8.0;
/// Physical size of one unit.
pub const UNIT_CM: f64 = 4.5;
/// Maximum number of primitives in a state.
pub const M_MAX: usize = 10;

pub(crate) const EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("unknown primitive id {0}")]
    UnknownPrimitive(u32),
    #[error("primitive {0} is blocked: another primitive overlaps the column above it")]
    PickBlocked(u32),
    #[error("placing primitive {id} at {position:?} collides with primitive {other}")]
    PlacementCollision { id: u32, position: [f64; 3], other: u32 },
    #[error("placing primitive {id} at {position:?} leaves it unsupported")]
    PlacementUnsupported { id: u32, position: [f64; 3] },
    #[error("primitive {id} at {position:?} leaves the workspace")]
    OutOfWorkspace { id: u32, position: [f64; 3] },
    #[error("invalid state: {0}")]
    InvalidState(String),
}

/// Long-axis direction of a primitive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Orientation {
    AlongX,
    AlongY,
    AlongZ,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::AlongX, Orientation::AlongY, Orientation::AlongZ];

    pub fn index(self) -> usize {
        match self {
            Orientation::AlongX => 0,
            Orientation::AlongY => 1,
            Orientation::AlongZ => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Named color palette. Index 0 is reserved for the table/background in
/// segmentation images, so palette indices start at 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Green,
    Yellow,
    Red,
    Blue,
    Grey,
    Orange,
    Purple,
    Cyan,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Green,
        Color::Yellow,
        Color::Red,
        Color::Blue,
        Color::Grey,
        Color::Orange,
        Color::Purple,
        Color::Cyan,
    ];

    /// Palette index, `1..=8`.
    pub fn index(self) -> u8 {
        Self::ALL.iter().position(|&c| c == self).unwrap() as u8 + 1
    }

    pub fn from_index(i: u8) -> Option<Self> {
        if i == 0 {
            None
        } else {
            Self::ALL.get(i as usize - 1).copied()
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Green => [0.0, 0.8, 0.0],
            Color::Yellow => [1.0, 0.9, 0.0],
            Color::Red => [0.9, 0.1, 0.1],
            Color::Blue => [0.1, 0.2, 0.9],
            Color::Grey => [0.5, 0.5, 0.5],
            Color::Orange => [1.0, 0.5, 0.0],
            Color::Purple => [0.5, 0.1, 0.6],
            Color::Cyan => [0.0, 0.8, 0.8],
        }
    }

    pub fn from_rgb(rgb: [f64; 3]) -> Option<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.rgb().iter().zip(rgb.iter()).all(|(a, b)| (a - b).abs() < 1e-6))
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Green => "green",
            Color::Yellow => "yellow",
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Grey => "grey",
            Color::Orange => "orange",
            Color::Purple => "purple",
            Color::Cyan => "cyan",
        }
    }
}

/// A table cell, addressed by its integer grid coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Cell { x, y }
    }

    pub fn center(self) -> [f64; 2] {
        [self.x as f64 + 0.5, self.y as f64 + 0.5]
    }

    fn rect(self) -> Rect {
        Rect { min: [self.x as f64, self.y as f64], max: [self.x as f64 + 1.0, self.y as f64 + 1.0] }
    }
}

/// Axis-aligned rectangle on the table plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn area(&self) -> f64 {
        (self.max[0] - self.min[0]) * (self.max[1] - self.min[1])
    }

    pub fn overlap_area(&self, o: &Rect) -> f64 {
        let w = self.max[0].min(o.max[0]) - self.min[0].max(o.min[0]);
        let h = self.max[1].min(o.max[1]) - self.min[1].max(o.min[1]);
        if w <= EPS || h <= EPS {
            0.0
        } else {
            w * h
        }
    }

    pub fn approx_eq(&self, o: &Rect) -> bool {
        (0..2).all(|k| (self.min[k] - o.min[k]).abs() < 1e-6 && (self.max[k] - o.max[k]).abs() < 1e-6)
    }
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn from_center(center: [f64; 3], extents: [f64; 3]) -> Self {
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for k in 0..3 {
            min[k] = center[k] - extents[k] / 2.0;
            max[k] = center[k] + extents[k] / 2.0;
        }
        Aabb { min, max }
    }

    /// True if the interiors intersect (touching faces do not count).
    pub fn overlaps(&self, o: &Aabb) -> bool {
        (0..3).all(|k| self.max[k] > o.min[k] + EPS && o.max[k] > self.min[k] + EPS)
    }

    pub fn footprint(&self) -> Rect {
        Rect { min: [self.min[0], self.min[1]], max: [self.max[0], self.max[1]] }
    }
}

/// Configuration of the table: its size and the structure sites (anchor
/// cells and bridges between pairs of anchors).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub cells: [i32; 2],
    #[serde(with = "fixed6")]
    pub unit_cm: f64,
    pub anchors: Vec<Cell>,
    pub bridges: Vec<[usize; 2]>,
}

impl Workspace {
    pub fn new(anchors: Vec<Cell>, bridges: Vec<[usize; 2]>) -> Self {
        Workspace { cells: [GRID_CELLS, GRID_CELLS], unit_cm: UNIT_CM, anchors, bridges }
    }

    /// Default arch sites: two anchors 2U apart along x, bridged.
    pub fn arch() -> Self {
        Workspace::new(vec![Cell::new(6, 11), Cell::new(8, 11)], vec![[0, 1]])
    }

    /// Default tower site: a single anchor.
    pub fn tower() -> Self {
        Workspace::new(vec![Cell::new(7, 11)], vec![])
    }

    /// Cells belonging to a structure: anchors and the cells spanned by
    /// bridges between them.
    pub fn reserved_cells(&self) -> Vec<Cell> {
        let mut out: Vec<Cell> = self.anchors.clone();
        for [a, b] in &self.bridges {
            let (ca, cb) = (self.anchors[*a], self.anchors[*b]);
            if ca.y == cb.y {
                for x in ca.x.min(cb.x) + 1..ca.x.max(cb.x) {
                    out.push(Cell::new(x, ca.y));
                }
            } else if ca.x == cb.x {
                for y in ca.y.min(cb.y) + 1..ca.y.max(cb.y) {
                    out.push(Cell::new(ca.x, y));
                }
            }
        }
        out.sort();
        out.dedup();
        out
    }

    pub fn extent(&self) -> [f64; 3] {
        [self.cells[0] as f64, self.cells[1] as f64, WORKSPACE_HEIGHT]
    }

    fn contains(&self, b: &Aabb) -> bool {
        let e = self.extent();
        (0..3).all(|k| b.min[k] >= -EPS && b.max[k] <= e[k] + EPS)
    }

    pub fn touches_reserved(&self, r: &Rect) -> bool {
        self.reserved_cells().iter().any(|c| c.rect().overlap_area(r) > EPS)
    }
}

/// One building block.
#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub id: u32,
    /// Long-axis length in U: 1 (cube), 2 or 3 (beams).
    pub length: u8,
    pub color: Color,
    pub position: [f64; 3],
    pub orientation: Orientation,
}

impl Primitive {
    pub fn new(id: u32, length: u8, color: Color, position: [f64; 3], orientation: Orientation) -> Self {
        let orientation = canonical_orientation(length, orientation);
        Primitive { id, length, color, position, orientation }
    }

    /// World-aligned box dimensions `(w, d, h)`.
    pub fn extents(&self) -> [f64; 3] {
        extents_for(self.length, self.orientation)
    }

    pub fn bounds(&self) -> Aabb {
        Aabb::from_center(self.position, self.extents())
    }

    pub fn z_bottom(&self) -> f64 {
        self.position[2] - self.extents()[2] / 2.0
    }

    pub fn top(&self) -> f64 {
        self.position[2] + self.extents()[2] / 2.0
    }

    /// The 12 scalar features: position, orientation one-hot, color, extents.
    pub fn features(&self) -> [f64; 12] {
        let mut f = [0.0; 12];
        f[..3].copy_from_slice(&self.position);
        f[3 + self.orientation.index()] = 1.0;
        f[6..9].copy_from_slice(&self.color.rgb());
        f[9..12].copy_from_slice(&self.extents());
        f
    }
}

/// Cubes have a single canonical orientation.
pub fn canonical_orientation(length: u8, o: Orientation) -> Orientation {
    if length == 1 {
        Orientation::AlongX
    } else {
        o
    }
}

pub fn extents_for(length: u8, o: Orientation) -> [f64; 3] {
    let l = length as f64;
    match o {
        Orientation::AlongX => [l, 1.0, 1.0],
        Orientation::AlongY => [1.0, l, 1.0],
        Orientation::AlongZ => [1.0, 1.0, l],
    }
}

pub fn orientations_for(length: u8) -> &'static [Orientation] {
    if length == 1 {
        &Orientation::ALL[..1]
    } else {
        &Orientation::ALL
    }
}

/// Pick a primitive and place it at a target center with an orientation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssemblyAction {
    pub pick_id: u32,
    #[serde(with = "fixed6::array3")]
    pub place_position: [f64; 3],
    pub orientation: Orientation,
}

impl AssemblyAction {
    pub fn new(pick_id: u32, place_position: [f64; 3], orientation: Orientation) -> Self {
        AssemblyAction { pick_id, place_position, orientation }
    }

    /// Quantized identity used for ordering and deduplication.
    pub fn sort_key(&self) -> (u32, [i64; 3], usize) {
        (self.pick_id, quantize3(self.place_position), self.orientation.index())
    }
}

impl Eq for AssemblyAction {}

impl PartialOrd for AssemblyAction {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for AssemblyAction {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl std::hash::Hash for AssemblyAction {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.sort_key().hash(state)
    }
}

/// Quantize a coordinate to 0.01U.
pub fn quantize(v: f64) -> i64 {
    (v * 100.0).round() as i64
}

pub fn quantize3(v: [f64; 3]) -> [i64; 3] {
    [quantize(v[0]), quantize(v[1]), quantize(v[2])]
}

/// Position-erasing equivalence key: two states have equal keys iff they
/// differ only in the poses of loose primitives on the table surface.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CanonicalKey {
    /// `(length, color, orientation, x, y, z)` of every non-loose primitive,
    /// positions in hundredths of a unit.
    pub structure: Vec<(u8, u8, u8, i64, i64, i64)>,
    /// `(length, color)` multiset of loose primitives.
    pub loose: Vec<(u8, u8)>,
}

impl fmt::Display for CanonicalKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S")?;
        for (l, c, o, x, y, z) in &self.structure {
            write!(f, "[{l},{c},{o},{x},{y},{z}]")?;
        }
        write!(f, "L")?;
        for (l, c) in &self.loose {
            write!(f, "[{l},{c}]")?;
        }
        Ok(())
    }
}

impl CanonicalKey {
    /// Short stable digest of the key.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let h = Sha256::digest(self.to_string().as_bytes());
        hex::encode(&h[..8])
    }
}

/// Configuration of primitives on the table.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    primitives: Vec<Primitive>,
    workspace: Arc<Workspace>,
}

impl WorldState {
    /// Build and validate a state.
    pub fn new(primitives: Vec<Primitive>, workspace: Arc<Workspace>) -> Result<Self, WorldError> {
        let s = WorldState { primitives, workspace };
        s.validate()?;
        Ok(s)
    }

    pub fn empty(workspace: Arc<Workspace>) -> Self {
        WorldState { primitives: Vec::new(), workspace }
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    pub fn workspace(&self) -> &Arc<Workspace> {
        &self.workspace
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&Primitive> {
        self.primitives.iter().find(|p| p.id == id)
    }

    fn index_of(&self, id: u32) -> Option<usize> {
        self.primitives.iter().position(|p| p.id == id)
    }

    /// Check every world invariant.
    pub fn validate(&self) -> Result<(), WorldError> {
        if self.primitives.len() > M_MAX {
            return Err(WorldError::InvalidState(format!(
                "{} primitives exceeds the maximum of {M_MAX}",
                self.primitives.len()
            )));
        }
        let mut ids: Vec<u32> = self.primitives.iter().map(|p| p.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(WorldError::InvalidState("duplicate primitive id".into()));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if !(1..=3).contains(&p.length) {
                return Err(WorldError::InvalidState(format!("primitive {} has length {}", p.id, p.length)));
            }
            if p.length == 1 && p.orientation != Orientation::AlongX {
                return Err(WorldError::InvalidState(format!("cube {} is not canonically oriented", p.id)));
            }
            let b = p.bounds();
            if !self.workspace.contains(&b) {
                return Err(WorldError::OutOfWorkspace { id: p.id, position: p.position });
            }
            if let Some(j) = self.first_collision(&b, Some(i)) {
                return Err(WorldError::PlacementCollision {
                    id: p.id,
                    position: p.position,
                    other: self.primitives[j].id,
                });
            }
            if !self.is_supported(&b, p.length, p.orientation, Some(i)) {
                return Err(WorldError::PlacementUnsupported { id: p.id, position: p.position });
            }
        }
        Ok(())
    }

    fn first_collision(&self, b: &Aabb, skip: Option<usize>) -> Option<usize> {
        self.primitives
            .iter()
            .enumerate()
            .find(|(j, q)| Some(*j) != skip && q.bounds().overlaps(b))
            .map(|(j, _)| j)
    }

    /// A box is supported if it rests on the table, if its footprint is fully
    /// covered by tops at its bottom height, or (horizontal beams) if both of
    /// its end unit squares are covered.
    fn is_supported(&self, b: &Aabb, length: u8, o: Orientation, skip: Option<usize>) -> bool {
        let z = b.min[2];
        if z.abs() < EPS {
            return true;
        }
        let tops: Vec<Rect> = self
            .primitives
            .iter()
            .enumerate()
            .filter(|(j, q)| Some(*j) != skip && (q.top() - z).abs() < EPS)
            .map(|(_, q)| q.bounds().footprint())
            .collect();
        let covered = |r: &Rect| -> bool {
            let area: f64 = tops.iter().map(|t| t.overlap_area(r)).sum();
            area >= r.area() - 1e-6
        };
        let fp = b.footprint();
        if covered(&fp) {
            return true;
        }
        if length > 1 && o != Orientation::AlongZ {
            let k = if o == Orientation::AlongX { 0 } else { 1 };
            let mut first = fp;
            first.max[k] = fp.min[k] + 1.0;
            let mut last = fp;
            last.min[k] = fp.max[k] - 1.0;
            return covered(&first) && covered(&last);
        }
        false
    }

    fn is_blocked_index(&self, i: usize) -> bool {
        let p = &self.primitives[i];
        let fp = p.bounds().footprint();
        let top = p.top();
        self.primitives
            .iter()
            .enumerate()
            .any(|(j, q)| j != i && q.z_bottom() >= top - EPS && q.bounds().footprint().overlap_area(&fp) > EPS)
    }

    /// Ids of primitives with nothing above them, in state order.
    pub fn non_blocked(&self) -> Vec<u32> {
        (0..self.primitives.len())
            .filter(|&i| !self.is_blocked_index(i))
            .map(|i| self.primitives[i].id)
            .collect()
    }

    /// Whether a primitive lies loose on the table: on the surface, outside
    /// the structure sites, and with nothing above it.
    pub fn is_loose(&self, id: u32) -> bool {
        self.index_of(id).map(|i| self.is_loose_index(i)).unwrap_or(false)
    }

    fn is_loose_index(&self, i: usize) -> bool {
        let p = &self.primitives[i];
        p.z_bottom().abs() < EPS
            && !self.workspace.touches_reserved(&p.bounds().footprint())
            && !self.is_blocked_index(i)
    }

    pub fn loose_mask(&self) -> Vec<bool> {
        (0..self.primitives.len()).map(|i| self.is_loose_index(i)).collect()
    }

    /// Ids of primitives that are part of some structure (not loose).
    pub fn structural_ids(&self) -> Vec<u32> {
        (0..self.primitives.len())
            .filter(|&i| !self.is_loose_index(i))
            .map(|i| self.primitives[i].id)
            .collect()
    }

    pub fn canonical_key(&self) -> CanonicalKey {
        let mut structure = Vec::new();
        let mut loose = Vec::new();
        for (i, p) in self.primitives.iter().enumerate() {
            if self.is_loose_index(i) {
                loose.push((p.length, p.color.index()));
            } else {
                let q = quantize3(p.position);
                structure.push((p.length, p.color.index(), p.orientation.index() as u8, q[0], q[1], q[2]));
            }
        }
        structure.sort_unstable();
        loose.sort_unstable();
        CanonicalKey { structure, loose }
    }

    /// Validate a move of primitive `i` and return the re-posed primitive.
    fn check_move(&self, i: usize, position: [f64; 3], orientation: Orientation) -> Result<Primitive, WorldError> {
        let p = &self.primitives[i];
        if self.is_blocked_index(i) {
            return Err(WorldError::PickBlocked(p.id));
        }
        let moved = Primitive::new(p.id, p.length, p.color, position, orientation);
        let b = moved.bounds();
        if !self.workspace.contains(&b) {
            return Err(WorldError::OutOfWorkspace { id: p.id, position });
        }
        if let Some(j) = self.first_collision(&b, Some(i)) {
            return Err(WorldError::PlacementCollision { id: p.id, position, other: self.primitives[j].id });
        }
        if !self.is_supported(&b, moved.length, moved.orientation, Some(i)) {
            return Err(WorldError::PlacementUnsupported { id: p.id, position });
        }
        Ok(moved)
    }

    /// The transition function: move one non-blocked primitive to a new pose.
    pub fn apply_action(&self, action: &AssemblyAction) -> Result<WorldState, WorldError> {
        let i = self.index_of(action.pick_id).ok_or(WorldError::UnknownPrimitive(action.pick_id))?;
        let moved = self.check_move(i, action.place_position, action.orientation)?;
        let mut next = self.clone();
        next.primitives[i] = moved;
        Ok(next)
    }

    /// Whether `action` would succeed.
    pub fn is_valid_action(&self, action: &AssemblyAction) -> bool {
        match self.index_of(action.pick_id) {
            Some(i) => self.check_move(i, action.place_position, action.orientation).is_ok(),
            None => false,
        }
    }

    /// Candidate placement spots `(x, y, z_bottom)`: free anchors, the top of
    /// every non-blocked primitive, and bridge slots over level anchor
    /// columns. Sorted by `(z, x, y)`.
    pub fn placement_spots(&self) -> Vec<[f64; 3]> {
        let ws = &self.workspace;
        let mut spots: Vec<[f64; 3]> = Vec::new();
        for a in &ws.anchors {
            let c = a.center();
            spots.push([c[0], c[1], 0.0]);
        }
        for id in self.non_blocked() {
            let p = self.get(id).unwrap();
            spots.push([p.position[0], p.position[1], p.top()]);
        }
        for [a, b] in &ws.bridges {
            let (ta, tb) = (self.column_top(ws.anchors[*a]), self.column_top(ws.anchors[*b]));
            if ta > EPS && (ta - tb).abs() < EPS {
                let (ca, cb) = (ws.anchors[*a].center(), ws.anchors[*b].center());
                spots.push([(ca[0] + cb[0]) / 2.0, (ca[1] + cb[1]) / 2.0, ta]);
            }
        }
        spots.sort_by(|p, q| {
            quantize(p[2])
                .cmp(&quantize(q[2]))
                .then(quantize(p[0]).cmp(&quantize(q[0])))
                .then(quantize(p[1]).cmp(&quantize(q[1])))
        });
        spots.dedup_by(|p, q| quantize3(*p) == quantize3(*q));
        spots
    }

    /// Height of the highest box covering a cell (0 for an empty cell).
    pub fn column_top(&self, cell: Cell) -> f64 {
        let r = cell.rect();
        self.primitives
            .iter()
            .filter(|p| p.bounds().footprint().overlap_area(&r) > EPS)
            .map(|p| p.top())
            .fold(0.0, f64::max)
    }

    /// Every valid pick-and-place action onto a structure spot, ordered by
    /// pick id, then spot, then orientation. No-op moves are excluded.
    pub fn enumerate_actions(&self) -> Vec<AssemblyAction> {
        let spots = self.placement_spots();
        let mut picks: Vec<usize> = (0..self.primitives.len()).filter(|&i| !self.is_blocked_index(i)).collect();
        picks.sort_by_key(|&i| self.primitives[i].id);
        let mut out = Vec::new();
        for i in picks {
            let p = &self.primitives[i];
            for spot in &spots {
                for &o in orientations_for(p.length) {
                    let h = extents_for(p.length, o)[2];
                    let pos = [spot[0], spot[1], spot[2] + h / 2.0];
                    if o == p.orientation && quantize3(pos) == quantize3(p.position) {
                        continue;
                    }
                    if self.check_move(i, pos, o).is_ok() {
                        out.push(AssemblyAction::new(p.id, pos, o));
                    }
                }
            }
        }
        out
    }

    /// Free table poses (box centers) for primitive `id` in orientation `o`:
    /// grid-aligned footprints outside the structure sites that do not
    /// collide with any other primitive.
    pub fn free_table_positions(&self, id: u32, o: Orientation) -> Vec<[f64; 3]> {
        let Some(i) = self.index_of(id) else { return Vec::new() };
        let p = &self.primitives[i];
        let o = canonical_orientation(p.length, o);
        let e = extents_for(p.length, o);
        let reserved = self.workspace.reserved_cells();
        let mut out = Vec::new();
        let (w, d) = (e[0] as i32, e[1] as i32);
        for cy in 0..=self.workspace.cells[1] - d {
            for cx in 0..=self.workspace.cells[0] - w {
                let fp = Rect { min: [cx as f64, cy as f64], max: [(cx + w) as f64, (cy + d) as f64] };
                if reserved.iter().any(|c| c.rect().overlap_area(&fp) > EPS) {
                    continue;
                }
                let pos = [cx as f64 + e[0] / 2.0, cy as f64 + e[1] / 2.0, e[2] / 2.0];
                let b = Aabb::from_center(pos, e);
                if self.first_collision(&b, Some(i)).is_none() {
                    out.push(pos);
                }
            }
        }
        out
    }

    /// Move to a uniformly random free table pose. `None` if the primitive is
    /// blocked or no pose is free.
    pub fn random_table_move<R: Rng + ?Sized>(&self, id: u32, o: Orientation, rng: &mut R) -> Option<AssemblyAction> {
        let i = self.index_of(id)?;
        if self.is_blocked_index(i) {
            return None;
        }
        let spots = self.free_table_positions(id, o);
        let pos = spots.choose(rng)?;
        let o = canonical_orientation(self.primitives[i].length, o);
        Some(AssemblyAction::new(id, *pos, o))
    }

    /// The action that moves the primitive moved by `action` back to its
    /// current pose.
    pub fn invert_action(&self, action: &AssemblyAction) -> Result<AssemblyAction, WorldError> {
        let i = self.index_of(action.pick_id).ok_or(WorldError::UnknownPrimitive(action.pick_id))?;
        self.check_move(i, action.place_position, action.orientation)?;
        let p = &self.primitives[i];
        Ok(AssemblyAction::new(p.id, p.position, p.orientation))
    }

    /// Map an action valid in `self` onto an equivalent state `other`
    /// (equal canonical keys). Loose picks expand to every loose primitive of
    /// the same kind in `other`; structural picks map to the primitive with the
    /// same quantized pose. Only actions valid in `other` are returned.
    pub fn transfer_action(&self, action: &AssemblyAction, other: &WorldState) -> Vec<AssemblyAction> {
        let Some(i) = self.index_of(action.pick_id) else { return Vec::new() };
        let p = &self.primitives[i];
        let mut out = Vec::new();
        if self.is_loose_index(i) {
            for (j, q) in other.primitives.iter().enumerate() {
                if q.length == p.length && q.color == p.color && other.is_loose_index(j) {
                    out.push(AssemblyAction::new(q.id, action.place_position, action.orientation));
                }
            }
        } else {
            let key = (p.length, p.color, p.orientation, quantize3(p.position));
            for (j, q) in other.primitives.iter().enumerate() {
                if (q.length, q.color, q.orientation, quantize3(q.position)) == key && !other.is_loose_index(j) {
                    out.push(AssemblyAction::new(q.id, action.place_position, action.orientation));
                }
            }
        }
        out.retain(|a| other.is_valid_action(a));
        out
    }

    /// Multiset of primitive lengths.
    pub fn length_multiset(&self) -> BTreeMap<u8, usize> {
        let mut m = BTreeMap::new();
        for p in &self.primitives {
            *m.entry(p.length).or_insert(0) += 1;
        }
        m
    }

    /// Same primitives sorted by id; useful for order-independent comparisons.
    pub fn sorted_by_id(&self) -> WorldState {
        let mut prims = self.primitives.clone();
        prims.sort_by_key(|p| p.id);
        WorldState { primitives: prims, workspace: self.workspace.clone() }
    }

    /// Same state with the primitive list permuted.
    pub fn permuted(&self, order: &[usize]) -> WorldState {
        let prims = order.iter().map(|&i| self.primitives[i].clone()).collect();
        WorldState { primitives: prims, workspace: self.workspace.clone() }
    }

    /// Place a set of `(length, color)` primitives loose on the table at random
    /// free poses with random orientations. Ids start at `first_id`.
    pub fn scatter<R: Rng + ?Sized>(
        workspace: Arc<Workspace>,
        pieces: &[(u8, Color)],
        first_id: u32,
        rng: &mut R,
    ) -> Result<WorldState, WorldError> {
        let mut s = WorldState::empty(workspace);
        for (k, &(length, color)) in pieces.iter().enumerate() {
            let id = first_id + k as u32;
            let o = *orientations_for(length).choose(rng).unwrap();
            s.primitives.push(Primitive::new(id, length, color, [0.0, 0.0, -100.0], o));
            let spots = s.free_table_positions(id, o);
            let pos = *spots
                .choose(rng)
                .ok_or_else(|| WorldError::InvalidState("no free table space to scatter primitives".into()))?;
            s.primitives.last_mut().unwrap().position = pos;
        }
        s.validate()?;
        Ok(s)
    }

    /// Add primitives (ids must be fresh); validates the result.
    pub fn with_added(&self, extra: &[Primitive]) -> Result<WorldState, WorldError> {
        let mut prims = self.primitives.clone();
        prims.extend_from_slice(extra);
        WorldState::new(prims, self.workspace.clone())
    }

    pub fn next_id(&self) -> u32 {
        self.primitives.iter().map(|p| p.id + 1).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch_ws() -> Arc<Workspace> {
        Arc::new(Workspace::arch())
    }

    fn cube(id: u32, x: f64, y: f64, z: f64) -> Primitive {
        Primitive::new(id, 1, Color::Red, [x, y, z], Orientation::AlongX)
    }

    #[test]
    fn table_move_to_free_cell() {
        let s = WorldState::new(vec![cube(0, 3.5, 3.5, 0.5)], arch_ws()).unwrap();
        let next = s.apply_action(&AssemblyAction::new(0, [5.5, 5.5, 0.5], Orientation::AlongX)).unwrap();
        let p = next.get(0).unwrap();
        assert_eq!(p.position, [5.5, 5.5, 0.5]);
        assert_eq!(p.z_bottom(), 0.0);
    }

    #[test]
    fn stacked_pick_is_blocked() {
        let s = WorldState::new(vec![cube(0, 3.5, 3.5, 0.5), cube(1, 3.5, 3.5, 1.5)], arch_ws()).unwrap();
        let err = s.apply_action(&AssemblyAction::new(0, [5.5, 5.5, 0.5], Orientation::AlongX)).unwrap_err();
        assert_eq!(err, WorldError::PickBlocked(0));
        assert_eq!(s.non_blocked(), vec![1]);
    }

    #[test]
    fn error_paths_name_the_violation() {
        let s = WorldState::new(vec![cube(0, 3.5, 3.5, 0.5), cube(1, 1.5, 1.5, 0.5)], arch_ws()).unwrap();
        assert_eq!(
            s.apply_action(&AssemblyAction::new(7, [5.5, 5.5, 0.5], Orientation::AlongX)),
            Err(WorldError::UnknownPrimitive(7))
        );
        assert!(matches!(
            s.apply_action(&AssemblyAction::new(0, [1.5, 1.5, 0.5], Orientation::AlongX)),
            Err(WorldError::PlacementCollision { other: 1, .. })
        ));
        assert!(matches!(
            s.apply_action(&AssemblyAction::new(0, [9.5, 9.5, 2.5], Orientation::AlongX)),
            Err(WorldError::PlacementUnsupported { .. })
        ));
        assert!(matches!(
            s.apply_action(&AssemblyAction::new(0, [15.9, 9.5, 0.5], Orientation::AlongX)),
            Err(WorldError::OutOfWorkspace { .. })
        ));
    }

    #[test]
    fn one_cube_enumerates_both_anchors() {
        let s = WorldState::new(vec![cube(0, 3.5, 3.5, 0.5)], arch_ws()).unwrap();
        let actions = s.enumerate_actions();
        assert_eq!(actions.len(), 2);
        assert_eq!(actions[0].place_position, [6.5, 11.5, 0.5]);
        assert_eq!(actions[1].place_position, [8.5, 11.5, 0.5]);
        assert!(WorldState::empty(arch_ws()).enumerate_actions().is_empty());
    }

    #[test]
    fn bar_bridges_level_pillars() {
        let ws = arch_ws();
        let s = WorldState::new(
            vec![
                Primitive::new(0, 2, Color::Blue, [6.5, 11.5, 1.0], Orientation::AlongZ),
                Primitive::new(1, 2, Color::Blue, [8.5, 11.5, 1.0], Orientation::AlongZ),
                Primitive::new(2, 3, Color::Green, [2.5, 3.5, 0.5], Orientation::AlongY),
            ],
            ws,
        )
        .unwrap();
        let bar: Vec<_> = s.enumerate_actions().into_iter().filter(|a| a.pick_id == 2).collect();
        assert!(bar.contains(&AssemblyAction::new(2, [7.5, 11.5, 2.5], Orientation::AlongX)));
        // The bar cannot rest across the gap in any other orientation.
        assert!(!bar.iter().any(|a| a.place_position[0] == 7.5 && a.orientation != Orientation::AlongX));
        let built = s.apply_action(&AssemblyAction::new(2, [7.5, 11.5, 2.5], Orientation::AlongX)).unwrap();
        assert_eq!(built.non_blocked(), vec![2]);
    }

    #[test]
    fn loose_moves_keep_key_and_stacked_moves_change_it() {
        let ws = arch_ws();
        let s = WorldState::new(
            vec![cube(0, 3.5, 3.5, 0.5), cube(1, 6.5, 11.5, 0.5), cube(2, 6.5, 11.5, 1.5)],
            ws,
        )
        .unwrap();
        let moved = s.apply_action(&AssemblyAction::new(0, [12.5, 2.5, 0.5], Orientation::AlongX)).unwrap();
        assert_eq!(s.canonical_key(), moved.canonical_key());
        let shifted = s.apply_action(&AssemblyAction::new(2, [3.5, 3.5, 1.5], Orientation::AlongX)).unwrap();
        assert_ne!(s.canonical_key(), shifted.canonical_key());
    }

    #[test]
    fn scatter_is_valid_and_loose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pieces = [(1, Color::Red), (2, Color::Blue), (3, Color::Green), (2, Color::Blue)];
        let s = WorldState::scatter(arch_ws(), &pieces, 0, &mut rng).unwrap();
        assert!(s.loose_mask().iter().all(|&l| l));
        assert_eq!(s.structural_ids(), Vec::<u32>::new());
    }

    #[test]
    fn transfer_expands_interchangeable_loose_picks() {
        let ws = arch_ws();
        let a = WorldState::new(vec![cube(0, 1.5, 1.5, 0.5), cube(1, 3.5, 1.5, 0.5)], ws.clone()).unwrap();
        let b = WorldState::new(vec![cube(0, 10.5, 1.5, 0.5), cube(1, 13.5, 4.5, 0.5)], ws).unwrap();
        let act = AssemblyAction::new(0, [6.5, 11.5, 0.5], Orientation::AlongX);
        let mapped = a.transfer_action(&act, &b);
        assert_eq!(mapped.len(), 2);
    }
}
