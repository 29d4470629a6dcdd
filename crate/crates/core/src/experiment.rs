//! Experiment orchestration shared by the CLI and the acceptance suite.

use crate::config::ExperimentConfig;
use crate::search::{steps_table, Method, SearchBudget, StepsCell, StepsTable};
use crate::shapes::{Category, CategoryInstance, ShapeError};
use crate::value::{run_training_loop, PolicyError, RoundMetrics, StateValue, TrainingOutcome};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("unknown instance {0}")]
    UnknownInstance(String),
}

/// The single seed instance per arch height: the bar is the only 3U piece,
/// then most distinct lengths, then fewest pieces, then enumeration order.
/// Towers have one instance.
pub fn default_input_instances(category: &Category) -> Vec<CategoryInstance> {
    match category {
        Category::Arch(specs) => specs
            .iter()
            .filter_map(|s| {
                let one = Category::Arch(vec![*s]);
                one.instances().into_iter().min_by_key(|i| {
                    let lengths = i.length_multiset();
                    (lengths.get(&3).copied().unwrap_or(0), usize::MAX - lengths.len(), i.pieces.len())
                })
            })
            .collect(),
        Category::Tower(_) => category.instances(),
    }
}

pub fn find_instance(category: &Category, id: &str) -> Result<CategoryInstance, ExperimentError> {
    category.instances().into_iter().find(|i| i.id == id).ok_or_else(|| ExperimentError::UnknownInstance(id.into()))
}

pub fn search_budget(cfg: &ExperimentConfig) -> SearchBudget {
    SearchBudget {
        max_env_steps: cfg.search.max_env_steps,
        simulations_per_move: cfg.search.simulations_per_move,
        uct_c: cfg.search.uct_c,
        rollout_depth: cfg.search.rollout_depth,
    }
}

pub fn train_value(
    category: &Category,
    input: Option<&[CategoryInstance]>,
    cfg: &ExperimentConfig,
    seed: u64,
    on_round: impl FnMut(&RoundMetrics),
) -> Result<TrainingOutcome, ExperimentError> {
    let defaults;
    let input = match input {
        Some(i) => i,
        None => {
            defaults = default_input_instances(category);
            &defaults
        }
    };
    Ok(run_training_loop(input, category, cfg, seed, on_round)?)
}

/// Steps table over arch heights. When the greedy method is requested and no
/// value function is supplied, a network is trained per height from that
/// height's default input instance.
pub fn run_steps_table(
    cfg: &ExperimentConfig,
    heights: &[u8],
    methods: &[Method],
    episodes: usize,
    ours: Option<&dyn StateValue>,
    seed: u64,
    mut progress: impl FnMut(&StepsCell),
) -> Result<StepsTable, ExperimentError> {
    let budget = search_budget(cfg);
    let max_steps = cfg.value.rollout_steps();
    let mut cells = Vec::new();
    for &h in heights {
        let trained;
        let v: Option<&dyn StateValue> = match ours {
            Some(v) => Some(v),
            None if methods.contains(&Method::Ours) => {
                let cat = Category::arch(h)?;
                trained = train_value(&cat, None, cfg, seed.wrapping_add(h as u64), |m| {
                    log::info!("height {h} round {}: {} instances, mse {:.2e}", m.round, m.instances, m.final_mse)
                })?
                .net;
                Some(&trained)
            }
            None => None,
        };
        let t = steps_table(&[h], methods, episodes, &budget, v, max_steps, seed, &mut progress)?;
        cells.extend(t.cells);
    }
    Ok(StepsTable { cells })
}
