//! State-value dataset `D_V`: discounted labels along disassembly graphs plus
//! short random-move walks from every graph state.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoding::{encode, Encoding, ENCODING_DIM};
use crate::shapes::{Category, CategoryInstance};
use crate::unmake::{unmake, UnmakeConfig, UnmakeError};
use crate::world::{orientations_for, AssemblyAction, CanonicalKey, WorldState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueDataConfig {
    pub gamma: f64,
    /// Minimum number of raw pairs to generate.
    pub target_pairs: usize,
    pub min_expansions_per_state: usize,
    pub paths_per_instance: usize,
    /// Random moves per expansion walk; every state on the walk is labelled.
    pub walk_length: usize,
    pub unmake: UnmakeConfig,
}

impl Default for ValueDataConfig {
    fn default() -> Self {
        ValueDataConfig {
            gamma: 0.95,
            target_pairs: 20_000,
            min_expansions_per_state: 4,
            paths_per_instance: 1,
            walk_length: 3,
            unmake: UnmakeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LabelKind {
    /// A disassembly-graph node `depth` steps from the assembled instance.
    Trajectory { depth: usize },
    /// A random move from a state labelled `parent` (a graph state or the
    /// previous state on the walk). `reused` is set when the result matched
    /// a graph state.
    Expansion { parent: f64, reused: bool },
}

#[derive(Clone, Debug)]
pub struct LabelRecord {
    pub state: WorldState,
    pub target: f64,
    pub kind: LabelKind,
    pub instance: String,
}

/// Deduplicated training pairs.
#[derive(Clone, Debug, Default)]
pub struct ValueDataset {
    pub encodings: Vec<Encoding>,
    pub targets: Vec<f64>,
    /// Pairs generated before deduplication.
    pub raw_pairs: usize,
}

impl ValueDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn matrix(&self) -> Array2<f64> {
        let mut x = Array2::zeros((self.len(), ENCODING_DIM));
        for (i, e) in self.encodings.iter().enumerate() {
            x.row_mut(i).assign(&ndarray::ArrayView1::from(&e[..]));
        }
        x
    }
}

/// A random one-step move: any non-blocked primitive onto a structure spot or
/// to a free table pose, chosen with equal odds.
pub fn random_move<R: Rng + ?Sized>(state: &WorldState, rng: &mut R) -> Option<AssemblyAction> {
    if rng.random_bool(0.5) {
        if let Some(a) = state.enumerate_actions().choose(rng) {
            return Some(a.clone());
        }
    }
    let ids = state.non_blocked();
    let id = *ids.choose(rng)?;
    let p = state.get(id)?;
    let o = *orientations_for(p.length).choose(rng)?;
    state.random_table_move(id, o, rng)
}

/// Every raw label, before deduplication.
pub fn generate_labels(
    instances: &[CategoryInstance],
    category: &Category,
    cfg: &ValueDataConfig,
    seed: u64,
) -> Result<Vec<LabelRecord>, UnmakeError> {
    let ws = Arc::new(category.workspace());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ucfg = UnmakeConfig { gamma: cfg.gamma, ..cfg.unmake.clone() };
    let mut records = Vec::new();
    let mut known: HashMap<CanonicalKey, f64> = HashMap::new();
    for inst in instances {
        let s = inst.instantiate(ws.clone())?;
        for _ in 0..cfg.paths_per_instance.max(1) {
            let g = unmake(&s, category, &ucfg, &mut rng)?;
            for node in &g.nodes {
                known.entry(node.key.clone()).or_insert(node.value);
                records.push(LabelRecord {
                    state: node.state.clone(),
                    target: node.value,
                    kind: LabelKind::Trajectory { depth: node.depth },
                    instance: inst.id.clone(),
                });
            }
        }
    }
    let n_traj = records.len();
    if n_traj == 0 {
        return Ok(records);
    }
    let walk = cfg.walk_length.max(1);
    let per_state = cfg.min_expansions_per_state.max(cfg.target_pairs.saturating_sub(n_traj).div_ceil(n_traj * walk));
    for i in 0..n_traj {
        let (start, start_value, instance) = {
            let r = &records[i];
            (r.state.clone(), r.target, r.instance.clone())
        };
        for _ in 0..per_state {
            let mut state = start.clone();
            let mut parent = start_value;
            for _ in 0..walk {
                let Some(mv) = random_move(&state, &mut rng) else { break };
                let next = state.apply_action(&mv)?;
                let (target, reused) = match known.get(&next.canonical_key()) {
                    Some(&v) => (v, true),
                    None => (parent * cfg.gamma, false),
                };
                records.push(LabelRecord {
                    state: next.clone(),
                    target,
                    kind: LabelKind::Expansion { parent, reused },
                    instance: instance.clone(),
                });
                state = next;
                parent = target;
            }
        }
    }
    Ok(records)
}

/// Deduplicate by encoding, keeping the largest target. Output order follows
/// first occurrence.
pub fn dedup(records: &[LabelRecord]) -> ValueDataset {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut ds = ValueDataset { raw_pairs: records.len(), ..Default::default() };
    for r in records {
        let e = encode(&r.state);
        let bits: Vec<u64> = e.iter().map(|v| v.to_bits()).collect();
        match index.get(&bits) {
            Some(&i) => ds.targets[i] = ds.targets[i].max(r.target),
            None => {
                index.insert(bits, ds.targets.len());
                ds.encodings.push(e);
                ds.targets.push(r.target);
            }
        }
    }
    ds
}

pub fn build_value_dataset(
    instances: &[CategoryInstance],
    category: &Category,
    cfg: &ValueDataConfig,
    seed: u64,
) -> Result<(ValueDataset, Vec<LabelRecord>), UnmakeError> {
    let records = generate_labels(instances, category, cfg, seed)?;
    Ok((dedup(&records), records))
}
