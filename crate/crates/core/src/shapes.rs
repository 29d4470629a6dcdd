//! Shape classifiers, category enumeration and the completion score.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::json::fixed6;
use crate::world::{
    quantize3, AssemblyAction, Cell, Color, Orientation, Primitive, Rect, WorldError, WorldState, Workspace, EPS,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("unsupported arch height {0}U (supported: 3, 4, 5)")]
    UnsupportedHeight(u8),
    #[error("anchors {0:?} and {1:?} must share a row and be 2U apart")]
    BadAnchors(Cell, Cell),
    #[error("tower needs at least one cube")]
    EmptyTower,
    #[error(transparent)]
    World(#[from] WorldError),
}

/// Which classifier variant to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// The shape is present; loose primitives elsewhere are ignored.
    Progress,
    /// The shape is present and every primitive is part of it.
    Success,
}

/// An arch: two pillars of height `H-1` on fixed anchors, bridged by a 3U bar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub height: u8,
    pub anchor_left: Cell,
    pub anchor_right: Cell,
}

impl ArchSpec {
    /// Arch on the default sites of [`Workspace::arch`].
    pub fn new(height: u8) -> Result<Self, ShapeError> {
        let ws = Workspace::arch();
        Self::with_anchors(height, ws.anchors[0], ws.anchors[1])
    }

    pub fn with_anchors(height: u8, anchor_left: Cell, anchor_right: Cell) -> Result<Self, ShapeError> {
        if !(3..=5).contains(&height) {
            return Err(ShapeError::UnsupportedHeight(height));
        }
        if anchor_left.y != anchor_right.y || anchor_right.x - anchor_left.x != 2 {
            return Err(ShapeError::BadAnchors(anchor_left, anchor_right));
        }
        Ok(ArchSpec { height, anchor_left, anchor_right })
    }

    pub fn bar_center(&self) -> [f64; 3] {
        let (l, r) = (self.anchor_left.center(), self.anchor_right.center());
        [(l[0] + r[0]) / 2.0, l[1], self.height as f64 - 0.5]
    }

    fn region(&self) -> Rect {
        Rect {
            min: [self.anchor_left.x as f64, self.anchor_left.y as f64],
            max: [self.anchor_right.x as f64 + 1.0, self.anchor_left.y as f64 + 1.0],
        }
    }

    fn in_region(&self, state: &WorldState) -> Vec<usize> {
        let r = self.region();
        state
            .primitives()
            .iter()
            .enumerate()
            .filter(|(_, p)| p.bounds().footprint().overlap_area(&r) > EPS)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn workspace(&self) -> Workspace {
        Workspace::new(vec![self.anchor_left, self.anchor_right], vec![[0, 1]])
    }
}

/// A tower of cubes: green at the bottom, then alternating yellow and red.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TowerSpec {
    pub n_cubes: usize,
    pub anchor: Cell,
}

impl TowerSpec {
    pub fn new(n_cubes: usize) -> Result<Self, ShapeError> {
        if n_cubes == 0 {
            return Err(ShapeError::EmptyTower);
        }
        Ok(TowerSpec { n_cubes, anchor: Workspace::tower().anchors[0] })
    }

    pub fn color_at(level: usize) -> Color {
        match level {
            0 => Color::Green,
            l if l % 2 == 1 => Color::Yellow,
            _ => Color::Red,
        }
    }

    pub fn workspace(&self) -> Workspace {
        Workspace::new(vec![self.anchor], vec![])
    }
}

/// Target pose of one piece of a category instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetPiece {
    pub length: u8,
    pub orientation: Orientation,
    #[serde(with = "fixed6::array3")]
    pub position: [f64; 3],
    /// Required color, if the category constrains it.
    pub color: Option<Color>,
}

impl TargetPiece {
    fn matches(&self, p: &Primitive) -> bool {
        p.length == self.length
            && p.orientation == self.orientation
            && quantize3(p.position) == quantize3(self.position)
            && self.color.is_none_or(|c| c == p.color)
    }
}

/// A buildable goal layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryInstance {
    pub id: String,
    /// Pieces in a valid build order.
    pub pieces: Vec<TargetPiece>,
}

/// Default arch coloring: color identifies the piece length.
pub fn arch_color(length: u8) -> Color {
    match length {
        1 => Color::Red,
        2 => Color::Blue,
        _ => Color::Green,
    }
}

impl CategoryInstance {
    /// `(length, color)` of every piece, using [`arch_color`] where the
    /// category leaves color free.
    pub fn piece_set(&self) -> Vec<(u8, Color)> {
        self.pieces.iter().map(|p| (p.length, p.color.unwrap_or_else(|| arch_color(p.length)))).collect()
    }

    /// The assembled state: only the instance pieces, ids in build order.
    pub fn instantiate(&self, workspace: Arc<Workspace>) -> Result<WorldState, WorldError> {
        let prims = self
            .pieces
            .iter()
            .zip(self.piece_set())
            .enumerate()
            .map(|(i, (t, (l, c)))| Primitive::new(i as u32, l, c, t.position, t.orientation))
            .collect();
        WorldState::new(prims, workspace)
    }

    pub fn length_multiset(&self) -> BTreeMap<u8, usize> {
        let mut m = BTreeMap::new();
        for p in &self.pieces {
            *m.entry(p.length).or_insert(0) += 1;
        }
        m
    }
}

/// Ordered compositions of `total` into parts from `{1, 2, 3}`.
pub fn compositions(total: u8) -> Vec<Vec<u8>> {
    if total == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for first in 1..=3u8.min(total) {
        for mut rest in compositions(total - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

fn pillar_pieces(anchor: Cell, parts: &[u8]) -> Vec<TargetPiece> {
    let c = anchor.center();
    let mut z = 0.0;
    parts
        .iter()
        .map(|&l| {
            let o = if l == 1 { Orientation::AlongX } else { Orientation::AlongZ };
            let piece = TargetPiece { length: l, orientation: o, position: [c[0], c[1], z + l as f64 / 2.0], color: None };
            z += l as f64;
            piece
        })
        .collect()
}

fn composition_label(parts: &[u8]) -> String {
    parts.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("-")
}

/// All instances of an arch category: independent compositions of `H-1` per
/// pillar plus the bar.
pub fn enumerate_category(spec: &ArchSpec) -> Result<Vec<CategoryInstance>, ShapeError> {
    if !(3..=5).contains(&spec.height) {
        return Err(ShapeError::UnsupportedHeight(spec.height));
    }
    let comps = compositions(spec.height - 1);
    let mut out = Vec::with_capacity(comps.len() * comps.len());
    for left in &comps {
        for right in &comps {
            let mut pieces = pillar_pieces(spec.anchor_left, left);
            pieces.extend(pillar_pieces(spec.anchor_right, right));
            pieces.push(TargetPiece { length: 3, orientation: Orientation::AlongX, position: spec.bar_center(), color: None });
            out.push(CategoryInstance {
                id: format!("arch{}:{}|{}", spec.height, composition_label(left), composition_label(right)),
                pieces,
            });
        }
    }
    Ok(out)
}

pub fn tower_instance(spec: &TowerSpec) -> CategoryInstance {
    let c = spec.anchor.center();
    CategoryInstance {
        id: format!("tower{}", spec.n_cubes),
        pieces: (0..spec.n_cubes)
            .map(|k| TargetPiece {
                length: 1,
                orientation: Orientation::AlongX,
                position: [c[0], c[1], k as f64 + 0.5],
                color: Some(TowerSpec::color_at(k)),
            })
            .collect(),
    }
}

struct ArchParse {
    left: Vec<usize>,
    right: Vec<usize>,
    bar: usize,
}

fn parse_pillar(state: &WorldState, candidates: &[usize], cell: Cell, height: f64) -> Option<Vec<usize>> {
    let cell_rect = Rect { min: [cell.x as f64, cell.y as f64], max: [cell.x as f64 + 1.0, cell.y as f64 + 1.0] };
    let prims = state.primitives();
    let mut col: Vec<usize> =
        candidates.iter().copied().filter(|&i| prims[i].bounds().footprint().approx_eq(&cell_rect)).collect();
    col.sort_by(|&a, &b| prims[a].z_bottom().total_cmp(&prims[b].z_bottom()));
    let mut z = 0.0;
    for &i in &col {
        if (prims[i].z_bottom() - z).abs() > EPS {
            return None;
        }
        z = prims[i].top();
    }
    if col.is_empty() || (z - height).abs() > EPS {
        return None;
    }
    Some(col)
}

fn parse_arch(state: &WorldState, spec: &ArchSpec) -> Option<ArchParse> {
    let region = spec.in_region(state);
    let h = spec.height as f64 - 1.0;
    let left = parse_pillar(state, &region, spec.anchor_left, h)?;
    let right = parse_pillar(state, &region, spec.anchor_right, h)?;
    let rest: Vec<usize> = region.iter().copied().filter(|i| !left.contains(i) && !right.contains(i)).collect();
    if rest.len() != 1 {
        return None;
    }
    let bar = &state.primitives()[rest[0]];
    let bar_ok = bar.length == 3
        && bar.orientation == Orientation::AlongX
        && quantize3(bar.position) == quantize3(spec.bar_center());
    bar_ok.then_some(ArchParse { left, right, bar: rest[0] })
}

/// Arch classifier. Colors are ignored.
pub fn classify_arch(state: &WorldState, spec: &ArchSpec, variant: Variant) -> bool {
    match parse_arch(state, spec) {
        None => false,
        Some(p) => match variant {
            Variant::Progress => true,
            Variant::Success => p.left.len() + p.right.len() + 1 == state.len(),
        },
    }
}

/// Tower classifier: exactly `n_cubes` cubes stacked on the anchor in the
/// color order, nothing else in the column.
pub fn classify_tower(state: &WorldState, spec: &TowerSpec) -> bool {
    let cell = Rect {
        min: [spec.anchor.x as f64, spec.anchor.y as f64],
        max: [spec.anchor.x as f64 + 1.0, spec.anchor.y as f64 + 1.0],
    };
    let mut col: Vec<&Primitive> =
        state.primitives().iter().filter(|p| p.bounds().footprint().overlap_area(&cell) > EPS).collect();
    if col.len() != spec.n_cubes {
        return false;
    }
    col.sort_by(|a, b| a.z_bottom().total_cmp(&b.z_bottom()));
    let c = spec.anchor.center();
    col.iter().enumerate().all(|(k, p)| {
        p.length == 1
            && p.color == TowerSpec::color_at(k)
            && quantize3(p.position) == quantize3([c[0], c[1], k as f64 + 0.5])
    })
}

/// Fraction of the best-matching instance already correctly placed, among
/// instances buildable from the state's primitives (all instances if none is
/// buildable). Primitives in the structure region that do not belong to the
/// instance count against it.
pub fn completion_score(state: &WorldState, spec: &ArchSpec, instances: &[CategoryInstance]) -> f64 {
    let have = state.length_multiset();
    let buildable: Vec<&CategoryInstance> = instances
        .iter()
        .filter(|inst| inst.length_multiset().iter().all(|(l, n)| have.get(l).copied().unwrap_or(0) >= *n))
        .collect();
    let pool: Vec<&CategoryInstance> = if buildable.is_empty() { instances.iter().collect() } else { buildable };
    let region = spec.in_region(state);
    let prims = state.primitives();
    pool.iter()
        .map(|inst| {
            let mut matched = 0usize;
            for t in &inst.pieces {
                if prims.iter().any(|p| t.matches(p)) {
                    matched += 1;
                }
            }
            let extraneous = region.iter().filter(|&&i| !inst.pieces.iter().any(|t| t.matches(&prims[i]))).count();
            matched as f64 / (inst.pieces.len() + extraneous) as f64
        })
        .fold(0.0, f64::max)
}

/// A shape category with its classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Category {
    /// Arches of one or several heights sharing the same anchors.
    Arch(Vec<ArchSpec>),
    Tower(TowerSpec),
}

impl Category {
    pub fn arch(height: u8) -> Result<Self, ShapeError> {
        Ok(Category::Arch(vec![ArchSpec::new(height)?]))
    }

    pub fn arches(heights: &[u8]) -> Result<Self, ShapeError> {
        Ok(Category::Arch(heights.iter().map(|&h| ArchSpec::new(h)).collect::<Result<_, _>>()?))
    }

    pub fn tower(n: usize) -> Result<Self, ShapeError> {
        Ok(Category::Tower(TowerSpec::new(n)?))
    }

    pub fn workspace(&self) -> Workspace {
        match self {
            Category::Arch(specs) => specs[0].workspace(),
            Category::Tower(t) => t.workspace(),
        }
    }

    pub fn classify(&self, state: &WorldState, variant: Variant) -> bool {
        match self {
            Category::Arch(specs) => specs.iter().any(|s| classify_arch(state, s, variant)),
            Category::Tower(t) => classify_tower(state, t),
        }
    }

    pub fn instances(&self) -> Vec<CategoryInstance> {
        match self {
            Category::Arch(specs) => specs.iter().flat_map(|s| enumerate_category(s).expect("validated spec")).collect(),
            Category::Tower(t) => vec![tower_instance(t)],
        }
    }

    pub fn label(&self) -> String {
        match self {
            Category::Arch(specs) => {
                format!("arch{}", specs.iter().map(|s| s.height.to_string()).collect::<Vec<_>>().join("+"))
            }
            Category::Tower(t) => format!("tower{}", t.n_cubes),
        }
    }

    /// Recover the instance an accepted state realizes (structure only).
    pub fn identify(&self, state: &WorldState) -> Option<CategoryInstance> {
        match self {
            Category::Arch(specs) => specs.iter().find_map(|spec| {
                let parse = parse_arch(state, spec)?;
                let prims = state.primitives();
                let parts = |col: &[usize]| col.iter().map(|&i| prims[i].length).collect::<Vec<u8>>();
                let (l, r) = (parts(&parse.left), parts(&parse.right));
                let id = format!("arch{}:{}|{}", spec.height, composition_label(&l), composition_label(&r));
                let _ = parse.bar;
                enumerate_category(spec).ok()?.into_iter().find(|inst| inst.id == id)
            }),
            Category::Tower(t) => classify_tower(state, t).then(|| tower_instance(t)),
        }
    }

    /// Ground-truth next assembly actions: every action that extends the
    /// current partial structure toward some instance that uses all available
    /// primitives.
    pub fn goal_actions(&self, state: &WorldState) -> Vec<AssemblyAction> {
        let have = state.length_multiset();
        let prims = state.primitives();
        let mut out = Vec::new();
        for (inst, region) in self.instances_with_regions(state) {
            if inst.length_multiset() != have {
                continue;
            }
            if let Category::Tower(_) = self {
                let mut need: BTreeMap<Color, usize> = BTreeMap::new();
                for p in &inst.pieces {
                    *need.entry(p.color.unwrap()).or_insert(0) += 1;
                }
                let mut got: BTreeMap<Color, usize> = BTreeMap::new();
                for p in prims {
                    *got.entry(p.color).or_insert(0) += 1;
                }
                if need != got {
                    continue;
                }
            }
            // Every region primitive must match a distinct target piece.
            let mut filled = vec![false; inst.pieces.len()];
            let mut consistent = true;
            for &i in &region {
                match inst.pieces.iter().enumerate().position(|(k, t)| !filled[k] && t.matches(&prims[i])) {
                    Some(k) => filled[k] = true,
                    None => {
                        consistent = false;
                        break;
                    }
                }
            }
            if !consistent {
                continue;
            }
            let nexts = next_targets(&inst, &filled);
            if nexts.is_none() {
                continue;
            }
            let free: Vec<u32> = state.non_blocked().into_iter().filter(|id| {
                let i = prims.iter().position(|p| p.id == *id).unwrap();
                !region.contains(&i)
            }).collect();
            for k in nexts.unwrap() {
                let t = &inst.pieces[k];
                for &id in &free {
                    let p = state.get(id).unwrap();
                    if p.length == t.length && t.color.is_none_or(|c| c == p.color) {
                        let a = AssemblyAction::new(id, t.position, t.orientation);
                        if state.is_valid_action(&a) {
                            out.push(a);
                        }
                    }
                }
            }
        }
        out.sort();
        out.dedup();
        out
    }

    fn instances_with_regions(&self, state: &WorldState) -> Vec<(CategoryInstance, Vec<usize>)> {
        match self {
            Category::Arch(specs) => specs
                .iter()
                .flat_map(|s| {
                    let region = s.in_region(state);
                    enumerate_category(s).unwrap().into_iter().map(move |i| (i, region.clone()))
                })
                .collect(),
            Category::Tower(t) => {
                let cell = Rect {
                    min: [t.anchor.x as f64, t.anchor.y as f64],
                    max: [t.anchor.x as f64 + 1.0, t.anchor.y as f64 + 1.0],
                };
                let region = state
                    .primitives()
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| p.bounds().footprint().overlap_area(&cell) > EPS)
                    .map(|(i, _)| i)
                    .collect();
                vec![(tower_instance(t), region)]
            }
        }
    }
}

/// Indices of target pieces that can be placed next, given which are filled.
/// Pieces resting on others (same column, higher) need their supports first;
/// the bar needs both pillars. Returns `None` if the filled set is not a
/// buildable prefix.
fn next_targets(inst: &CategoryInstance, filled: &[bool]) -> Option<Vec<usize>> {
    let pieces = &inst.pieces;
    let supports = |k: usize| -> Vec<usize> {
        let t = &pieces[k];
        let zb = t.position[2] - crate::world::extents_for(t.length, t.orientation)[2] / 2.0;
        if zb.abs() < EPS {
            return vec![];
        }
        let r = crate::world::Aabb::from_center(t.position, crate::world::extents_for(t.length, t.orientation)).footprint();
        (0..pieces.len())
            .filter(|&j| {
                let q = &pieces[j];
                let b = crate::world::Aabb::from_center(q.position, crate::world::extents_for(q.length, q.orientation));
                (b.max[2] - zb).abs() < EPS && b.footprint().overlap_area(&r) > EPS
            })
            .collect()
    };
    // Pillars must be complete before the bar: everything at the bar's level
    // needs all lower pieces of the instance.
    let mut next = Vec::new();
    for k in 0..pieces.len() {
        let sup = supports(k);
        let ready = sup.iter().all(|&j| filled[j]);
        if filled[k] && !ready {
            return None;
        }
        if !filled[k] && ready {
            let lower_done = pieces[k].orientation != Orientation::AlongX
                || pieces[k].length < 3
                || (0..pieces.len()).filter(|&j| j != k).all(|j| filled[j]);
            if lower_done {
                next.push(k);
            }
        }
    }
    Some(next)
}
