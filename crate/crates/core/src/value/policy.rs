//! Greedy value policy, instance discovery and the iterative training loop.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::dataset::{build_value_dataset, ValueDataConfig};
use super::encoding::{encode, ENCODING_DIM};
use super::net::{NetError, TrainConfig, ValueNet};
use crate::config::{ArchColors, ExperimentConfig};
use crate::shapes::{arch_color, completion_score, Category, CategoryInstance, TowerSpec, Variant};
use crate::unmake::UnmakeError;
use crate::world::{AssemblyAction, Color, WorldState};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("no assembly actions available")]
    NoActionsAvailable,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Unmake(#[from] UnmakeError),
    #[error("training failed after {retries} retries: {source}")]
    RetriesExhausted { retries: usize, source: NetError },
}

/// Anything that scores states.
pub trait StateValue {
    fn values(&self, states: &[WorldState]) -> Vec<f64>;
}

impl StateValue for ValueNet {
    fn values(&self, states: &[WorldState]) -> Vec<f64> {
        if states.is_empty() {
            return Vec::new();
        }
        let mut x = Array2::zeros((states.len(), ENCODING_DIM));
        for (i, s) in states.iter().enumerate() {
            x.row_mut(i).assign(&ndarray::ArrayView1::from(&encode(s)[..]));
        }
        self.predict(x.view()).expect("encoding width matches the network")
    }
}

/// Completion score of the best-matching instance; a stand-in for a learned
/// value in tests and baselines.
pub struct CompletionOracle {
    category: Category,
    instances: Vec<CategoryInstance>,
}

impl CompletionOracle {
    pub fn new(category: &Category) -> Self {
        CompletionOracle { category: category.clone(), instances: category.instances() }
    }

    pub fn score(&self, s: &WorldState) -> f64 {
        match &self.category {
            Category::Arch(specs) => {
                specs.iter().map(|spec| completion_score(s, spec, &self.instances)).fold(0.0, f64::max)
            }
            Category::Tower(t) => tower_completion(s, t),
        }
    }
}

/// Fraction of tower levels correctly stacked from the bottom.
pub fn tower_completion(s: &WorldState, t: &TowerSpec) -> f64 {
    let c = t.anchor.center();
    let mut k = 0;
    while k < t.n_cubes {
        let want = [c[0], c[1], k as f64 + 0.5];
        let ok = s.primitives().iter().any(|p| {
            p.length == 1 && p.color == TowerSpec::color_at(k) && crate::world::quantize3(p.position) == crate::world::quantize3(want)
        });
        if !ok {
            break;
        }
        k += 1;
    }
    let extra = s.column_top(t.anchor) > k as f64 + 1e-9;
    if extra {
        k as f64 / (t.n_cubes + 1) as f64
    } else {
        k as f64 / t.n_cubes as f64
    }
}

impl StateValue for CompletionOracle {
    fn values(&self, states: &[WorldState]) -> Vec<f64> {
        states.iter().map(|s| self.score(s)).collect()
    }
}

pub struct ConstantValue(pub f64);

impl StateValue for ConstantValue {
    fn values(&self, states: &[WorldState]) -> Vec<f64> {
        vec![self.0; states.len()]
    }
}

/// `argmax_a V(T(s, a))` over the enumerated actions; the first maximum in
/// enumeration order wins.
pub fn greedy_policy_step<V: StateValue + ?Sized>(
    v: &V,
    state: &WorldState,
) -> Result<(AssemblyAction, WorldState), PolicyError> {
    let actions = state.enumerate_actions();
    if actions.is_empty() {
        return Err(PolicyError::NoActionsAvailable);
    }
    let next: Vec<WorldState> =
        actions.iter().map(|a| state.apply_action(a).expect("enumerated actions are valid")).collect();
    let vals = v.values(&next);
    let mut best = 0;
    for (i, val) in vals.iter().enumerate() {
        if *val > vals[best] {
            best = i;
        }
    }
    Ok((actions[best].clone(), next[best].clone()))
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub actions: Vec<AssemblyAction>,
    pub final_state: WorldState,
    pub success: bool,
}

/// Follow the greedy policy until the classifier fires or `max_steps` actions.
pub fn greedy_rollout<V: StateValue + ?Sized>(v: &V, start: &WorldState, category: &Category, max_steps: usize) -> Rollout {
    let mut s = start.clone();
    let mut actions = Vec::new();
    let mut success = category.classify(&s, Variant::Progress);
    while !success && actions.len() < max_steps {
        match greedy_policy_step(v, &s) {
            Ok((a, next)) => {
                actions.push(a);
                s = next;
                success = category.classify(&s, Variant::Progress);
            }
            Err(_) => break,
        }
    }
    Rollout { actions, final_state: s, success }
}

/// Greedy rollout that takes a uniformly random enumerated action with
/// probability `epsilon` at each step.
pub fn explore_rollout<V: StateValue + ?Sized, R: Rng + ?Sized>(
    v: &V,
    start: &WorldState,
    category: &Category,
    max_steps: usize,
    epsilon: f64,
    rng: &mut R,
) -> Rollout {
    let mut s = start.clone();
    let mut actions = Vec::new();
    let mut success = category.classify(&s, Variant::Progress);
    while !success && actions.len() < max_steps {
        let step = if epsilon > 0.0 && rng.random_bool(epsilon) {
            s.enumerate_actions().choose(rng).map(|a| (a.clone(), s.apply_action(a).expect("enumerated actions are valid")))
        } else {
            greedy_policy_step(v, &s).ok()
        };
        let Some((a, next)) = step else { break };
        actions.push(a);
        s = next;
        success = category.classify(&s, Variant::Progress);
    }
    Rollout { actions, final_state: s, success }
}

/// A random primitive set for discovery. Arches: for each pillar, pieces of
/// random lengths summing to `H-1`, plus one 3U bar. Towers: the category's
/// cubes.
pub fn sample_primitive_set<R: Rng + ?Sized>(category: &Category, colors: ArchColors, rng: &mut R) -> Vec<(u8, Color)> {
    match category {
        Category::Arch(specs) => {
            let spec = specs.choose(rng).expect("non-empty category");
            let mut lengths = Vec::new();
            for _ in 0..2 {
                let mut left = spec.height as i32 - 1;
                while left > 0 {
                    let l = rng.random_range(1..=left.min(3)) as u8;
                    lengths.push(l);
                    left -= l as i32;
                }
            }
            lengths.push(3);
            let color = |l: u8, rng: &mut R| match colors {
                ArchColors::ByLength => arch_color(l),
                ArchColors::Random => *Color::ALL.choose(rng).unwrap(),
            };
            lengths.into_iter().map(|l| (l, color(l, rng))).collect()
        }
        Category::Tower(t) => (0..t.n_cubes).map(|k| (1, TowerSpec::color_at(k))).collect(),
    }
}

/// Roll out the policy from random primitive sets and collect the instances
/// it builds, deduplicated by instance id. `epsilon` is the per-step chance
/// of a random action.
pub fn discover_instances<V: StateValue + ?Sized>(
    v: &V,
    category: &Category,
    attempts: usize,
    max_steps: usize,
    colors: ArchColors,
    epsilon: f64,
    seed: u64,
) -> Vec<CategoryInstance> {
    let ws = Arc::new(category.workspace());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut found: BTreeMap<String, CategoryInstance> = BTreeMap::new();
    for _ in 0..attempts {
        let set = sample_primitive_set(category, colors, &mut rng);
        let Ok(start) = WorldState::scatter(ws.clone(), &set, 0, &mut rng) else { continue };
        let r = explore_rollout(v, &start, category, max_steps, epsilon, &mut rng);
        if r.success {
            if let Some(inst) = category.identify(&r.final_state) {
                found.entry(inst.id.clone()).or_insert(inst);
            }
        }
    }
    found.into_values().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub instances: usize,
    pub raw_pairs: usize,
    pub dataset_size: usize,
    pub final_epoch_loss: f64,
    pub final_mse: f64,
    pub discovered: usize,
    pub new_instances: usize,
    pub retries: usize,
}

pub struct TrainingOutcome {
    pub net: ValueNet,
    pub instances: Vec<CategoryInstance>,
    pub metrics: Vec<RoundMetrics>,
}

/// Iterate unmake, value labelling, training and discovery for `rounds`
/// rounds, starting from the given instances. The network is warm-started
/// across rounds; a diverged round is retried with a fresh seed.
pub fn run_training_loop(
    input: &[CategoryInstance],
    category: &Category,
    cfg: &ExperimentConfig,
    seed: u64,
    mut on_round: impl FnMut(&RoundMetrics),
) -> Result<TrainingOutcome, PolicyError> {
    let vc = &cfg.value;
    let mut instances: BTreeMap<String, CategoryInstance> = input.iter().map(|i| (i.id.clone(), i.clone())).collect();
    let mut net = ValueNet::new(ENCODING_DIM, cfg.gamma, seed);
    let mut metrics = Vec::new();
    let dcfg = ValueDataConfig {
        gamma: cfg.gamma,
        target_pairs: vc.dv_target_pairs,
        min_expansions_per_state: vc.min_expansions_per_state,
        paths_per_instance: vc.paths_per_instance,
        walk_length: vc.walk_length,
        unmake: cfg.unmake_config(),
    };
    for round in 0..vc.rounds {
        let round_seed = seed.wrapping_add(1000 * (round as u64 + 1));
        let current: Vec<CategoryInstance> = instances.values().cloned().collect();
        let (ds, _) = build_value_dataset(&current, category, &dcfg, round_seed)?;
        let x = ds.matrix();
        let mut retries = 0;
        let report = loop {
            let mut candidate = net.clone();
            let tc = TrainConfig {
                epochs: vc.epochs,
                lr: vc.lr,
                batch_size: vc.batch_size,
                seed: round_seed.wrapping_add(retries as u64),
            };
            match candidate.train(x.view(), &ds.targets, &tc) {
                Ok(r) => {
                    net = candidate;
                    break r;
                }
                Err(e @ NetError::Divergence { .. }) => {
                    log::warn!("round {round}: {e}; retrying with a new seed");
                    if retries == vc.max_retries {
                        return Err(PolicyError::RetriesExhausted { retries, source: e });
                    }
                    retries += 1;
                }
                Err(e) => return Err(e.into()),
            }
        };
        let found = discover_instances(
            &net,
            category,
            vc.discovery_attempts,
            vc.rollout_steps(),
            vc.arch_colors,
            vc.discovery_epsilon,
            round_seed.wrapping_add(7),
        );
        let before = instances.len();
        for inst in &found {
            instances.entry(inst.id.clone()).or_insert_with(|| inst.clone());
        }
        let m = RoundMetrics {
            round,
            instances: before,
            raw_pairs: ds.raw_pairs,
            dataset_size: ds.len(),
            final_epoch_loss: report.epoch_losses.last().copied().unwrap_or(0.0),
            final_mse: report.final_mse,
            discovered: found.len(),
            new_instances: instances.len() - before,
            retries,
        };
        on_round(&m);
        metrics.push(m);
    }
    Ok(TrainingOutcome { net, instances: instances.into_values().collect(), metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Workspace;

    #[test]
    fn constant_value_picks_the_first_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = WorldState::scatter(Arc::new(Workspace::arch()), &[(2, Color::Blue), (1, Color::Red)], 0, &mut rng)
            .unwrap();
        let (a, _) = greedy_policy_step(&ConstantValue(0.3), &s).unwrap();
        assert_eq!(a, s.enumerate_actions()[0]);
        let empty = WorldState::empty(Arc::new(Workspace::arch()));
        assert!(matches!(greedy_policy_step(&ConstantValue(0.0), &empty), Err(PolicyError::NoActionsAvailable)));
    }

    #[test]
    fn oracle_builds_the_minimal_arch_in_three_steps() {
        let cat = Category::arch(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ws = Arc::new(cat.workspace());
        let s = WorldState::scatter(ws, &[(2, Color::Blue), (2, Color::Blue), (3, Color::Green)], 0, &mut rng).unwrap();
        let r = greedy_rollout(&CompletionOracle::new(&cat), &s, &cat, 20);
        assert!(r.success);
        assert_eq!(r.actions.len(), 3);
        assert!(discover_instances(&CompletionOracle::new(&cat), &cat, 0, 20, ArchColors::ByLength, 0.0, 0).is_empty());
    }

    #[test]
    fn sampled_sets_fill_both_pillars() {
        let cat = Category::arches(&[3, 4, 5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let set = sample_primitive_set(&cat, ArchColors::ByLength, &mut rng);
            let total: u32 = set.iter().map(|(l, _)| *l as u32).sum();
            assert!([2 * 2 + 3, 2 * 3 + 3, 2 * 4 + 3].contains(&total));
            assert!(set.iter().all(|(l, c)| *c == arch_color(*l)));
        }
    }
}
