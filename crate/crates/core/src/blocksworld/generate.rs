use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::state::{apply_action, is_legal, Action, BlockId, GoalAtom, Instance, WorldState};
use super::{solve_bfs, DomainError};

/// Block names, PlanBench style.
pub const COLOR_PALETTE: [&str; 8] = ["red", "blue", "orange", "yellow", "white", "magenta", "black", "cyan"];

pub const MAX_GENERATED_BLOCKS: usize = COLOR_PALETTE.len();

const MAX_ATTEMPTS: usize = 200;
const SEARCH_DEPTH: usize = 64;

fn random_tower_state(rng: &mut ChaCha8Rng, blocks: &[BlockId]) -> WorldState {
    let mut order = blocks.to_vec();
    order.shuffle(rng);
    let mut state = WorldState::default();
    let mut top: Option<BlockId> = None;
    for block in order {
        match top.take() {
            Some(below) if rng.random_bool(0.6) => {
                state.on.insert(block.clone(), below);
            }
            _ => {
                state.on_table.insert(block.clone());
            }
        }
        top = Some(block);
    }
    state
}

fn legal_actions(state: &WorldState, blocks: &[BlockId]) -> Vec<Action> {
    let mut out = Vec::new();
    for x in blocks {
        out.push(Action::PickUp(x.clone()));
        out.push(Action::PutDown(x.clone()));
        for y in blocks {
            if x != y {
                out.push(Action::Stack(x.clone(), y.clone()));
                out.push(Action::Unstack(x.clone(), y.clone()));
            }
        }
    }
    out.retain(|a| is_legal(state, a).is_ok());
    out
}

/// Generates a solvable instance whose optimal plan has at least
/// `min_optimal` steps.
///
/// A random goal configuration is scrambled by a random walk of legal
/// actions; every action is reversible, so the goal stays reachable. The
/// solver then certifies the optimal length.
pub fn generate_instance(n_blocks: usize, seed: u64, min_optimal: usize) -> Result<Instance, DomainError> {
    if !(2..=MAX_GENERATED_BLOCKS).contains(&n_blocks) {
        return Err(DomainError::InvalidArguments(format!(
            "n_blocks must be in 2..={MAX_GENERATED_BLOCKS}, got {n_blocks}"
        )));
    }
    if min_optimal < 1 {
        return Err(DomainError::InvalidArguments("min_optimal must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names: Vec<&str> = COLOR_PALETTE.choose_multiple(&mut rng, n_blocks).copied().collect();
    names.sort_unstable();
    let blocks: Vec<BlockId> = names.into_iter().map(|n| BlockId::new(n).unwrap()).collect();

    for _ in 0..MAX_ATTEMPTS {
        let goal_state = random_tower_state(&mut rng, &blocks);
        let mut goal: BTreeSet<GoalAtom> =
            goal_state.on.iter().map(|(a, b)| GoalAtom::On { a: a.clone(), b: b.clone() }).collect();
        if goal.is_empty() {
            goal = goal_state.on_table.iter().map(|a| GoalAtom::OnTable { a: a.clone() }).collect();
        }

        let walk = rng.random_range(2 * n_blocks..=6 * n_blocks);
        let mut state = goal_state;
        for _ in 0..walk {
            let options = legal_actions(&state, &blocks);
            let action = options.choose(&mut rng).expect("some action is always legal");
            state = apply_action(&state, action)?;
        }
        if let Some(held) = state.holding.clone() {
            state = apply_action(&state, &Action::PutDown(held))?;
        }

        let instance = Instance::new(format!("bw{n_blocks}-{seed}"), state, goal)?;
        if instance.goal_satisfied(&instance.initial) {
            continue;
        }
        match solve_bfs(&instance, SEARCH_DEPTH) {
            Some(plan) if plan.len() >= min_optimal => return Ok(instance),
            _ => continue,
        }
    }
    Err(DomainError::GenerationExhausted { attempts: MAX_ATTEMPTS })
}

/// `count` instances with block counts drawn uniformly from
/// `min_blocks..=max_blocks`; ids are `<prefix>-<index>`.
pub fn generate_dataset(
    count: usize,
    min_blocks: usize,
    max_blocks: usize,
    seed: u64,
    min_optimal: usize,
) -> Result<Vec<Instance>, DomainError> {
    if min_blocks > max_blocks {
        return Err(DomainError::InvalidArguments(format!("min_blocks {min_blocks} exceeds max_blocks {max_blocks}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let n = rng.random_range(min_blocks..=max_blocks);
            let sub_seed: u64 = rng.random();
            let mut inst = generate_instance(n, sub_seed, min_optimal)?;
            inst.id = format!("bw-{seed}-{i:04}");
            Ok(inst)
        })
        .collect()
}
