//! Disassembly of assembled instances into merged assembly demonstrations.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::shapes::{Category, CategoryInstance, Variant};
use crate::world::{AssemblyAction, CanonicalKey, WorldError, WorldState, Workspace};

pub const DMU_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UnmakeError {
    #[error("input state is not an instance of {0}")]
    NotAnInstance(String),
    #[error(transparent)]
    World(#[from] WorldError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnmakeMode {
    /// Breadth-first over every disassembly order, up to the node budget.
    Exhaustive,
    /// Breadth-first, stopping at the first fully disassembled node.
    EarlyReturn,
    /// One random disassembly path.
    SinglePath,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnmakeConfig {
    pub mode: UnmakeMode,
    pub node_budget: usize,
    /// Free table destinations sampled per (node, primitive).
    pub table_samples: usize,
    /// Set from the experiment-wide discount.
    #[serde(skip)]
    pub gamma: f64,
}

impl Default for UnmakeConfig {
    fn default() -> Self {
        UnmakeConfig { mode: UnmakeMode::Exhaustive, node_budget: 10_000, table_samples: 3, gamma: 0.95 }
    }
}

#[derive(Clone, Debug)]
pub struct GraphNode {
    pub key: CanonicalKey,
    pub state: WorldState,
    pub depth: usize,
    pub value: f64,
    /// Assembly actions valid from `state` that lead one layer closer to the root.
    pub actions: BTreeSet<AssemblyAction>,
}

#[derive(Clone, Debug)]
pub struct DisassemblyGraph {
    pub nodes: Vec<GraphNode>,
    index: HashMap<CanonicalKey, usize>,
    /// Raw unmake transitions `(parent, child)` by node index.
    pub edges: Vec<(usize, usize)>,
}

impl DisassemblyGraph {
    pub fn get(&self, key: &CanonicalKey) -> Option<&GraphNode> {
        self.index.get(key).map(|&i| &self.nodes[i])
    }

    pub fn root(&self) -> &GraphNode {
        &self.nodes[0]
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.max_depth() + 1];
        for n in &self.nodes {
            out[n.depth] += 1;
        }
        out
    }
}

/// Fully disassembled: at most one primitive still belongs to a structure,
/// so the path from an `m`-primitive instance has `m - 1` steps.
pub fn is_initial(state: &WorldState) -> bool {
    state.structural_ids().len() <= 1
}

/// Unmake moves from `state`: every non-blocked structural primitive to
/// `k` sampled free table cells, keeping its orientation.
pub fn unmake_moves<R: Rng + ?Sized>(state: &WorldState, k: usize, rng: &mut R) -> Vec<AssemblyAction> {
    let structural = state.structural_ids();
    let mut out = Vec::new();
    for id in state.non_blocked() {
        if !structural.contains(&id) {
            continue;
        }
        let p = state.get(id).unwrap();
        let free = state.free_table_positions(id, p.orientation);
        for pos in free.choose_multiple(rng, k) {
            out.push(AssemblyAction::new(id, *pos, p.orientation));
        }
    }
    out
}

/// Disassemble an assembled instance state.
pub fn unmake<R: Rng + ?Sized>(
    instance_state: &WorldState,
    category: &Category,
    cfg: &UnmakeConfig,
    rng: &mut R,
) -> Result<DisassemblyGraph, UnmakeError> {
    if !category.classify(instance_state, Variant::Progress) {
        return Err(UnmakeError::NotAnInstance(category.label()));
    }
    let root_key = instance_state.canonical_key();
    let mut g = DisassemblyGraph {
        nodes: vec![GraphNode {
            key: root_key.clone(),
            state: instance_state.clone(),
            depth: 0,
            value: 1.0,
            actions: BTreeSet::new(),
        }],
        index: HashMap::from([(root_key, 0)]),
        edges: Vec::new(),
    };
    let mut queue = VecDeque::from([0usize]);
    while let Some(ni) = queue.pop_front() {
        let parent = g.nodes[ni].state.clone();
        if is_initial(&parent) {
            if cfg.mode == UnmakeMode::EarlyReturn && ni != 0 {
                break;
            }
            continue;
        }
        let mut moves = unmake_moves(&parent, cfg.table_samples, rng);
        if cfg.mode == UnmakeMode::SinglePath {
            moves = moves.choose(rng).cloned().into_iter().collect();
        }
        let depth = g.nodes[ni].depth + 1;
        for mv in moves {
            let child = parent.apply_action(&mv)?;
            let inverse = parent.invert_action(&mv)?;
            let key = child.canonical_key();
            let ci = match g.index.get(&key) {
                Some(&ci) => ci,
                None => {
                    if g.nodes.len() >= cfg.node_budget {
                        continue;
                    }
                    let ci = g.nodes.len();
                    g.nodes.push(GraphNode {
                        key: key.clone(),
                        state: child.clone(),
                        depth,
                        value: g.nodes[ni].value * cfg.gamma,
                        actions: BTreeSet::new(),
                    });
                    g.index.insert(key, ci);
                    queue.push_back(ci);
                    ci
                }
            };
            let rep = &g.nodes[ci].state;
            let mapped = child.transfer_action(&inverse, rep);
            g.nodes[ci].actions.extend(mapped);
            g.edges.push((ni, ci));
        }
    }
    g.edges.sort_unstable();
    g.edges.dedup();
    Ok(g)
}

/// One random disassembly path: the states before each step and the unmake
/// actions taken. The last state is fully disassembled.
pub fn unmake_path<R: Rng + ?Sized>(
    instance_state: &WorldState,
    rng: &mut R,
) -> Result<(Vec<WorldState>, Vec<AssemblyAction>), UnmakeError> {
    let mut states = vec![instance_state.clone()];
    let mut actions = Vec::new();
    loop {
        let s = states.last().unwrap();
        if is_initial(s) {
            break;
        }
        let moves = unmake_moves(s, 1, rng);
        let Some(mv) = moves.choose(rng).cloned() else { break };
        let next = s.apply_action(&mv)?;
        actions.push(mv);
        states.push(next);
    }
    Ok((states, actions))
}

/// Assembly demonstration from an unmake path: inverse actions in reverse
/// order, starting from the last state of the path.
pub fn assembly_from_path(states: &[WorldState], actions: &[AssemblyAction]) -> Result<Vec<AssemblyAction>, WorldError> {
    let mut out = Vec::with_capacity(actions.len());
    for (s, a) in states.iter().zip(actions).rev() {
        out.push(s.invert_action(a)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub instance: String,
    pub path: usize,
    pub depth: usize,
}

/// One `D_μ` entry: a state and every assembly action demonstrated from any
/// equivalent state.
#[derive(Clone, Debug)]
pub struct DmuEntry {
    pub key: CanonicalKey,
    pub state: WorldState,
    pub actions: Vec<AssemblyAction>,
    pub value: f64,
    pub provenance: Vec<Provenance>,
}

#[derive(Clone, Debug, Default)]
pub struct Dmu {
    pub entries: Vec<DmuEntry>,
}

/// Run unmake `paths_per_instance` times per instance and merge all non-root
/// nodes under canonical equivalence. Entries are sorted by key.
pub fn build_dmu(
    instances: &[CategoryInstance],
    category: &Category,
    paths_per_instance: usize,
    cfg: &UnmakeConfig,
    seed: u64,
) -> Result<Dmu, UnmakeError> {
    let ws = Arc::new(category.workspace());
    let mut merged: HashMap<CanonicalKey, DmuEntry> = HashMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for inst in instances {
        let state = inst.instantiate(ws.clone())?;
        for path in 0..paths_per_instance {
            let g = unmake(&state, category, cfg, &mut rng)?;
            for node in g.nodes.iter().skip(1) {
                let prov = Provenance { instance: inst.id.clone(), path, depth: node.depth };
                match merged.get_mut(&node.key) {
                    Some(e) => {
                        let mut set: BTreeSet<AssemblyAction> = e.actions.iter().cloned().collect();
                        for a in &node.actions {
                            set.extend(node.state.transfer_action(a, &e.state));
                        }
                        e.actions = set.into_iter().collect();
                        e.value = e.value.max(node.value);
                        e.provenance.push(prov);
                    }
                    None => {
                        merged.insert(
                            node.key.clone(),
                            DmuEntry {
                                key: node.key.clone(),
                                state: node.state.clone(),
                                actions: node.actions.iter().cloned().collect(),
                                value: node.value,
                                provenance: vec![prov],
                            },
                        );
                    }
                }
            }
        }
    }
    let mut entries: Vec<DmuEntry> = merged.into_values().collect();
    entries.sort_by(|a, b| a.key.cmp(&b.key));
    Ok(Dmu { entries })
}

#[derive(Serialize)]
struct DmuRecord<'a> {
    schema_version: u32,
    key: String,
    state: &'a WorldState,
    actions: &'a [AssemblyAction],
    #[serde(with = "crate::json::fixed6")]
    value: f64,
    provenance: &'a [Provenance],
    meta: &'a crate::io::Meta,
}

#[derive(Deserialize)]
struct DmuRecordOwned {
    schema_version: u32,
    state: WorldState,
    actions: Vec<AssemblyAction>,
    value: f64,
    provenance: Vec<Provenance>,
}

impl Dmu {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_jsonl(&self, meta: &crate::io::Meta) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let rec = DmuRecord {
                schema_version: DMU_SCHEMA_VERSION,
                key: e.key.digest(),
                state: &e.state,
                actions: &e.actions,
                value: e.value,
                provenance: &e.provenance,
                meta,
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Dmu, WorldError> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: DmuRecordOwned =
                serde_json::from_str(line).map_err(|e| WorldError::InvalidState(format!("line {}: {e}", n + 1)))?;
            if r.schema_version != DMU_SCHEMA_VERSION {
                return Err(WorldError::InvalidState(format!("unsupported schema version {}", r.schema_version)));
            }
            entries.push(DmuEntry {
                key: r.state.canonical_key(),
                state: r.state,
                actions: r.actions,
                value: r.value,
                provenance: r.provenance,
            });
        }
        Ok(Dmu { entries })
    }
}

/// Workspace shared by all states of a category.
pub fn category_workspace(category: &Category) -> Arc<Workspace> {
    Arc::new(category.workspace())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::{enumerate_category, tower_instance, ArchSpec, TowerSpec};
    use crate::world::{Color, Orientation, Primitive};

    fn tiny_arch() -> (WorldState, Category) {
        let ws = Arc::new(Workspace::arch());
        let s = WorldState::new(
            vec![
                Primitive::new(0, 2, Color::Blue, [6.5, 11.5, 1.0], Orientation::AlongZ),
                Primitive::new(1, 2, Color::Blue, [8.5, 11.5, 1.0], Orientation::AlongZ),
                Primitive::new(2, 3, Color::Green, [7.5, 11.5, 2.5], Orientation::AlongX),
            ],
            ws,
        )
        .unwrap();
        (s, Category::arch(3).unwrap())
    }

    #[test]
    fn tiny_arch_graph_layers() {
        let (s, cat) = tiny_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = unmake(&s, &cat, &UnmakeConfig::default(), &mut rng).unwrap();
        assert_eq!(g.layer_sizes(), vec![1, 1, 2]);
        assert_eq!(g.max_depth(), 2);
        let bar_off = &g.nodes[1];
        assert_eq!(bar_off.actions.len(), 1);
        let a = bar_off.actions.iter().next().unwrap();
        assert_eq!((a.pick_id, a.place_position, a.orientation), (2, [7.5, 11.5, 2.5], Orientation::AlongX));
        assert!((g.nodes[2].value - 0.9025).abs() < 1e-12);
    }

    #[test]
    fn two_cube_tower_single_path() {
        let spec = TowerSpec::new(2).unwrap();
        let cat = Category::Tower(spec);
        let s = tower_instance(&spec).instantiate(Arc::new(spec.workspace())).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = unmake(&s, &cat, &UnmakeConfig::default(), &mut rng).unwrap();
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.nodes[1].actions.len(), 1);
    }

    #[test]
    fn rejects_non_instances() {
        let (s, cat) = tiny_arch();
        let broken = s.apply_action(&AssemblyAction::new(2, [2.5, 2.5, 0.5], Orientation::AlongX)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            unmake(&broken, &cat, &UnmakeConfig::default(), &mut rng),
            Err(UnmakeError::NotAnInstance(_))
        ));
    }

    #[test]
    fn recorded_actions_step_one_layer_up() {
        let spec = ArchSpec::new(4).unwrap();
        let cat = Category::arch(4).unwrap();
        let ws = Arc::new(spec.workspace());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for inst in enumerate_category(&spec).unwrap() {
            let g = unmake(&inst.instantiate(ws.clone()).unwrap(), &cat, &UnmakeConfig::default(), &mut rng).unwrap();
            for node in g.nodes.iter().skip(1) {
                assert!(!node.actions.is_empty());
                for a in &node.actions {
                    let next = node.state.apply_action(a).unwrap();
                    let up = g.get(&next.canonical_key()).expect("lands on a graph node");
                    assert_eq!(up.depth + 1, node.depth);
                }
            }
            for (p, c) in &g.edges {
                assert_eq!(g.nodes[*p].depth + 1, g.nodes[*c].depth);
                assert!((g.nodes[*c].value - g.nodes[*p].value * 0.95).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_path_dmu_has_two_pairs() {
        let (s, cat) = tiny_arch();
        let inst = cat.identify(&s).unwrap();
        let cfg = UnmakeConfig { mode: UnmakeMode::SinglePath, ..Default::default() };
        let d = build_dmu(&[inst], &cat, 1, &cfg, 4).unwrap();
        assert_eq!(d.len(), 2);
    }

    #[test]
    fn five_unit_dmu_has_symmetric_choices() {
        let spec = ArchSpec::new(5).unwrap();
        let cat = Category::arch(5).unwrap();
        let insts = enumerate_category(&spec).unwrap();
        let d = build_dmu(&insts[..6], &cat, 2, &UnmakeConfig::default(), 1).unwrap();
        assert!(d.entries.iter().any(|e| {
            let spots: BTreeSet<[i64; 3]> =
                e.actions.iter().map(|a| crate::world::quantize3(a.place_position)).collect();
            spots.len() >= 2
        }));
    }

    #[test]
    fn path_inversion_rebuilds() {
        let spec = ArchSpec::new(5).unwrap();
        let ws = Arc::new(spec.workspace());
        let cat = Category::arch(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for inst in enumerate_category(&spec).unwrap() {
            let s = inst.instantiate(ws.clone()).unwrap();
            let (states, actions) = unmake_path(&s, &mut rng).unwrap();
            assert_eq!(actions.len(), inst.pieces.len() - 1);
            let mut cur = states.last().unwrap().clone();
            for a in assembly_from_path(&states, &actions).unwrap() {
                cur = cur.apply_action(&a).unwrap();
            }
            assert!(cat.classify(&cur, Variant::Success));
            assert_eq!(cur.canonical_key(), s.canonical_key());
            assert_eq!(cur, s);
        }
    }
}
