//! Search baselines (uniform random exploration, UCT tree search) and the
//! steps-to-build comparison table.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::shapes::{Category, Variant};
use crate::value::{greedy_rollout, CompletionOracle, StateValue};
use crate::world::{AssemblyAction, WorldState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchBudget {
    pub max_env_steps: u64,
    pub simulations_per_move: usize,
    pub uct_c: f64,
    pub rollout_depth: usize,
}

impl Default for SearchBudget {
    fn default() -> Self {
        SearchBudget { max_env_steps: 200_000, simulations_per_move: 50, uct_c: 1.4, rollout_depth: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub success: bool,
    pub env_steps: u64,
    #[serde(skip)]
    pub wall_time_s: f64,
    pub seed: u64,
    pub method: String,
}

/// The simulator as seen by a search method. Every call is one environment
/// transition.
pub trait Simulator {
    fn step(&mut self, state: &WorldState, action: &AssemblyAction) -> WorldState;
    fn steps(&self) -> u64;
}

#[derive(Default)]
pub struct CountingSim {
    steps: u64,
}

impl Simulator for CountingSim {
    fn step(&mut self, state: &WorldState, action: &AssemblyAction) -> WorldState {
        self.steps += 1;
        state.apply_action(action).expect("search only applies enumerated actions")
    }

    fn steps(&self) -> u64 {
        self.steps
    }
}

/// Sample uniformly from the enumerated actions until the classifier fires
/// or the budget runs out. The walk restarts from `state` after
/// `rollout_depth` actions or at a dead end.
pub fn random_explore(state: &WorldState, category: &Category, budget: &SearchBudget, seed: u64) -> EpisodeReport {
    random_explore_with(&mut CountingSim::default(), state, category, budget, seed)
}

pub fn random_explore_with(
    sim: &mut dyn Simulator,
    state: &WorldState,
    category: &Category,
    budget: &SearchBudget,
    seed: u64,
) -> EpisodeReport {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = state.clone();
    let start = sim.steps();
    let mut success = category.classify(&s, Variant::Progress);
    let mut depth = 0;
    while !success && sim.steps() - start < budget.max_env_steps {
        let actions = s.enumerate_actions();
        let Some(a) = actions.choose(&mut rng) else {
            if depth == 0 {
                break;
            }
            s = state.clone();
            depth = 0;
            continue;
        };
        s = sim.step(&s, a);
        depth += 1;
        success = category.classify(&s, Variant::Progress);
        // Pieces never return to the table, so a long walk gets trapped.
        if !success && depth >= budget.rollout_depth.max(1) {
            s = state.clone();
            depth = 0;
        }
    }
    EpisodeReport {
        success,
        env_steps: sim.steps() - start,
        wall_time_s: t0.elapsed().as_secs_f64(),
        seed,
        method: "random".into(),
    }
}

#[derive(Clone, Debug)]
pub struct TreeNode {
    pub action: Option<AssemblyAction>,
    pub children: Vec<usize>,
    pub expanded: bool,
    pub visits: u64,
    pub value_sum: f64,
}

/// One search tree, rooted at the state the move is chosen for.
#[derive(Clone, Debug)]
pub struct SearchTree {
    pub nodes: Vec<TreeNode>,
    /// Actions of the first simulation that reached the goal.
    pub solution: Option<Vec<AssemblyAction>>,
}

impl SearchTree {
    fn new() -> Self {
        SearchTree {
            nodes: vec![TreeNode { action: None, children: Vec::new(), expanded: false, visits: 0, value_sum: 0.0 }],
            solution: None,
        }
    }

    fn select(&self, node: usize, c: f64) -> usize {
        let parent = &self.nodes[node];
        let ln_n = (parent.visits.max(1) as f64).ln();
        let mut best = parent.children[0];
        let mut best_score = f64::NEG_INFINITY;
        for &ch in &parent.children {
            let n = &self.nodes[ch];
            let score = if n.visits == 0 {
                f64::INFINITY
            } else {
                n.value_sum / n.visits as f64 + c * (ln_n / n.visits as f64).sqrt()
            };
            if score > best_score {
                best_score = score;
                best = ch;
            }
        }
        best
    }

    /// Most-visited root child; ties go to the first.
    pub fn best_root_child(&self) -> Option<usize> {
        let root = &self.nodes[0];
        let mut best: Option<usize> = None;
        for &ch in &root.children {
            if best.is_none_or(|b| self.nodes[ch].visits > self.nodes[b].visits) {
                best = Some(ch);
            }
        }
        best
    }
}

/// Run `simulations_per_move` simulations from `root` and return the tree.
/// Nodes are expanded on their second visit. Stops early once a simulation
/// reaches the goal.
pub fn build_tree<R: Rng + ?Sized>(
    sim: &mut dyn Simulator,
    root: &WorldState,
    category: &Category,
    scorer: &CompletionOracle,
    budget: &SearchBudget,
    step_limit: u64,
    rng: &mut R,
) -> SearchTree {
    let mut tree = SearchTree::new();
    for _ in 0..budget.simulations_per_move {
        if sim.steps() >= step_limit {
            break;
        }
        let mut s = root.clone();
        let mut path = vec![0usize];
        let mut taken = Vec::new();
        let mut node = 0usize;
        let mut terminal = category.classify(&s, Variant::Progress);
        while !terminal && sim.steps() < step_limit {
            if !tree.nodes[node].expanded {
                if tree.nodes[node].visits == 0 && node != 0 {
                    break;
                }
                let actions = s.enumerate_actions();
                tree.nodes[node].expanded = true;
                for a in actions {
                    let id = tree.nodes.len();
                    tree.nodes.push(TreeNode {
                        action: Some(a),
                        children: Vec::new(),
                        expanded: false,
                        visits: 0,
                        value_sum: 0.0,
                    });
                    tree.nodes[node].children.push(id);
                }
            }
            if tree.nodes[node].children.is_empty() {
                break;
            }
            let ch = tree.select(node, budget.uct_c);
            let a = tree.nodes[ch].action.clone().unwrap();
            s = sim.step(&s, &a);
            taken.push(a);
            node = ch;
            path.push(node);
            terminal = category.classify(&s, Variant::Progress);
        }
        // Random rollout from the leaf.
        let mut depth = 0;
        while !terminal && depth < budget.rollout_depth && sim.steps() < step_limit {
            let actions = s.enumerate_actions();
            let Some(a) = actions.choose(rng) else { break };
            s = sim.step(&s, a);
            taken.push(a.clone());
            terminal = category.classify(&s, Variant::Progress);
            depth += 1;
        }
        let value = if terminal { 1.0 } else { scorer.score(&s) };
        for &n in &path {
            tree.nodes[n].visits += 1;
            tree.nodes[n].value_sum += value;
        }
        if terminal && !taken.is_empty() {
            tree.solution = Some(taken);
            break;
        }
    }
    tree
}

/// UCT search with completion-score leaf values; commits the most-visited
/// action after each batch of simulations, or the whole path once a
/// simulation reaches the goal. Committed moves are irreversible, so the
/// episode restarts from `state` after `rollout_depth` of them.
pub fn mcts_search(state: &WorldState, category: &Category, budget: &SearchBudget, seed: u64) -> EpisodeReport {
    mcts_search_with(&mut CountingSim::default(), state, category, budget, seed)
}

pub fn mcts_search_with(
    sim: &mut dyn Simulator,
    state: &WorldState,
    category: &Category,
    budget: &SearchBudget,
    seed: u64,
) -> EpisodeReport {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scorer = CompletionOracle::new(category);
    let start = sim.steps();
    let limit = start + budget.max_env_steps;
    let mut s = state.clone();
    let mut success = category.classify(&s, Variant::Progress);
    let mut committed = 0;
    while !success && sim.steps() < limit {
        let tree = build_tree(sim, &s, category, &scorer, budget, limit, &mut rng);
        if let Some(path) = tree.solution {
            for a in &path {
                s = sim.step(&s, a);
            }
            success = category.classify(&s, Variant::Progress);
            continue;
        }
        let Some(best) = tree.best_root_child() else {
            if committed == 0 {
                break;
            }
            s = state.clone();
            committed = 0;
            continue;
        };
        if sim.steps() >= limit {
            break;
        }
        let a = tree.nodes[best].action.clone().unwrap();
        s = sim.step(&s, &a);
        committed += 1;
        success = category.classify(&s, Variant::Progress);
        if !success && committed >= budget.rollout_depth.max(1) {
            s = state.clone();
            committed = 0;
        }
    }
    EpisodeReport {
        success,
        env_steps: sim.steps() - start,
        wall_time_s: t0.elapsed().as_secs_f64(),
        seed,
        method: "mcts".into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Random,
    Mcts,
    Ours,
    Oracle,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::Mcts => "mcts",
            Method::Ours => "ours",
            Method::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "random" => Some(Method::Random),
            "mcts" => Some(Method::Mcts),
            "ours" => Some(Method::Ours),
            "oracle" => Some(Method::Oracle),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepsCell {
    pub height: u8,
    pub method: Method,
    pub episodes: usize,
    pub successes: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepsTable {
    pub cells: Vec<StepsCell>,
}

impl StepsTable {
    pub fn get(&self, height: u8, method: Method) -> Option<&StepsCell> {
        self.cells.iter().find(|c| c.height == height && c.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["height", "method", "episodes", "successes", "mean", "std"]).unwrap();
        for c in &self.cells {
            w.write_record([
                c.height.to_string(),
                c.method.name().to_string(),
                c.episodes.to_string(),
                c.successes.to_string(),
                format!("{:.6e}", c.mean),
                format!("{:.6e}", c.std),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Episode start for `(height, episode)`: the primitive set of a uniformly
/// drawn instance, scattered loose on the table.
pub fn sample_episode(category: &Category, seed: u64) -> WorldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances = category.instances();
    let inst = instances.choose(&mut rng).expect("categories are non-empty");
    WorldState::scatter(Arc::new(category.workspace()), &inst.piece_set(), 0, &mut rng)
        .expect("an empty table fits every instance")
}

pub fn episode_seed(seed: u64, height: u8, episode: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(height as u64 * 100_000 + episode as u64)
}

/// Mean and spread of steps-to-build per (height, method).
pub fn steps_table(
    heights: &[u8],
    methods: &[Method],
    episodes: usize,
    budget: &SearchBudget,
    ours: Option<&dyn StateValue>,
    ours_max_steps: usize,
    seed: u64,
    mut progress: impl FnMut(&StepsCell),
) -> Result<StepsTable, crate::shapes::ShapeError> {
    let mut cells = Vec::new();
    for &h in heights {
        let category = Category::arch(h)?;
        for &m in methods {
            let mut steps = Vec::with_capacity(episodes);
            let mut successes = 0;
            for e in 0..episodes {
                let es = episode_seed(seed, h, e);
                let start = sample_episode(&category, es);
                let (ok, n) = match m {
                    Method::Random => {
                        let r = random_explore(&start, &category, budget, es);
                        (r.success, r.env_steps as f64)
                    }
                    Method::Mcts => {
                        let r = mcts_search(&start, &category, budget, es);
                        (r.success, r.env_steps as f64)
                    }
                    Method::Ours => {
                        let v = ours.expect("a value function is required for the greedy policy");
                        let r = greedy_rollout(v, &start, &category, ours_max_steps);
                        (r.success, r.actions.len() as f64)
                    }
                    Method::Oracle => (true, start.len() as f64),
                };
                successes += ok as usize;
                steps.push(n);
            }
            let (mean, std) = mean_std(&steps);
            let cell = StepsCell { height: h, method: m, episodes, successes, mean, std };
            progress(&cell);
            cells.push(cell);
        }
    }
    Ok(StepsTable { cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::ArchSpec;
    use crate::world::{Color, Orientation, Primitive, Workspace};

    fn one_step_from_goal() -> (WorldState, Category) {
        let ws = Arc::new(Workspace::arch());
        let s = WorldState::new(
            vec![
                Primitive::new(0, 2, Color::Blue, [6.5, 11.5, 1.0], Orientation::AlongZ),
                Primitive::new(1, 2, Color::Blue, [8.5, 11.5, 1.0], Orientation::AlongZ),
                Primitive::new(2, 3, Color::Green, [2.5, 2.5, 0.5], Orientation::AlongX),
            ],
            ws,
        )
        .unwrap();
        (s, Category::arch(3).unwrap())
    }

    struct Tally {
        inner: CountingSim,
        seen: u64,
    }

    impl Simulator for Tally {
        fn step(&mut self, s: &WorldState, a: &AssemblyAction) -> WorldState {
            self.seen += 1;
            self.inner.step(s, a)
        }
        fn steps(&self) -> u64 {
            self.inner.steps()
        }
    }

    #[test]
    fn zero_budget_fails_without_steps() {
        let (s, cat) = one_step_from_goal();
        let b = SearchBudget { max_env_steps: 0, ..Default::default() };
        let r = random_explore(&s, &cat, &b, 0);
        assert!(!r.success);
        assert_eq!(r.env_steps, 0);
    }

    #[test]
    fn finished_state_needs_no_search() {
        let spec = ArchSpec::new(3).unwrap();
        let cat = Category::arch(3).unwrap();
        let done = crate::shapes::enumerate_category(&spec).unwrap()[0].instantiate(Arc::new(spec.workspace())).unwrap();
        let r = mcts_search(&done, &cat, &SearchBudget::default(), 0);
        assert!(r.success);
        assert_eq!(r.env_steps, 0);
    }

    #[test]
    fn step_accounting_matches_an_instrumented_simulator() {
        let (s, cat) = one_step_from_goal();
        let mut t = Tally { inner: CountingSim::default(), seen: 0 };
        let r = mcts_search_with(&mut t, &s, &cat, &SearchBudget::default(), 3);
        assert!(r.success);
        assert_eq!(r.env_steps, t.seen);
        let mut t = Tally { inner: CountingSim::default(), seen: 0 };
        let r = random_explore_with(&mut t, &s, &cat, &SearchBudget::default(), 3);
        assert_eq!(r.env_steps, t.seen);
    }

    #[test]
    fn visit_counts_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cat = Category::arch(4).unwrap();
        let s = sample_episode(&cat, 11);
        let scorer = CompletionOracle::new(&cat);
        let tree = build_tree(&mut CountingSim::default(), &s, &cat, &scorer, &SearchBudget::default(), u64::MAX, &mut rng);
        assert_eq!(tree.nodes[0].visits, 50);
        let root_sum: u64 = tree.nodes[0].children.iter().map(|&c| tree.nodes[c].visits).sum();
        assert_eq!(root_sum, 50);
        // Below the root, the first visit is the one that rolled out.
        for n in &tree.nodes[1..] {
            if n.expanded && !n.children.is_empty() {
                let sum: u64 = n.children.iter().map(|&c| tree.nodes[c].visits).sum();
                assert_eq!(sum + 1, n.visits);
            }
        }
    }

    #[test]
    fn oracle_steps_for_the_minimal_set() {
        let (s, _) = one_step_from_goal();
        let _ = s;
        let cat = Category::arch(3).unwrap();
        let t = steps_table(&[3], &[Method::Oracle], 200, &SearchBudget::default(), None, 20, 0, |_| {}).unwrap();
        let c = t.get(3, Method::Oracle).unwrap();
        // Instances have 3, 4, 4 or 5 pieces.
        assert!((c.mean - 4.0).abs() < 0.2, "{}", c.mean);
        assert_eq!(cat.instances().iter().map(|i| i.pieces.len()).min(), Some(3));
    }
}
