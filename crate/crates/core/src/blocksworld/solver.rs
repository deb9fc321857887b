use std::collections::{HashMap, VecDeque};

use super::state::{Action, BlockId, GoalAtom, Instance, Plan, WorldState};

/// Largest instance the packed search state can represent.
pub const MAX_SOLVER_BLOCKS: usize = 12;

const BITS: u32 = 5;
const MASK: u64 = (1 << BITS) - 1;
const TABLE: u64 = 30;
const HELD: u64 = 31;

/// Search state: 5 bits per block holding the index of its support,
/// `TABLE` or `HELD`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct Packed(u64);

impl Packed {
    fn get(self, i: usize) -> u64 {
        (self.0 >> (i as u32 * BITS)) & MASK
    }

    fn set(self, i: usize, v: u64) -> Self {
        let shift = i as u32 * BITS;
        Packed((self.0 & !(MASK << shift)) | (v << shift))
    }
}

struct Encoding<'a> {
    names: Vec<&'a BlockId>,
}

impl<'a> Encoding<'a> {
    fn index(&self, b: &BlockId) -> usize {
        self.names.binary_search(&b).expect("block belongs to the instance")
    }

    fn pack(&self, s: &WorldState) -> Packed {
        let mut p = Packed(0);
        for (i, b) in self.names.iter().enumerate() {
            let v = if s.holding.as_ref() == Some(*b) {
                HELD
            } else if let Some(below) = s.on.get(*b) {
                self.index(below) as u64
            } else {
                TABLE
            };
            p = p.set(i, v);
        }
        p
    }
}

fn clear(p: Packed, n: usize, i: usize) -> bool {
    p.get(i) != HELD && (0..n).all(|j| p.get(j) != i as u64)
}

fn holding(p: Packed, n: usize) -> Option<usize> {
    (0..n).find(|&i| p.get(i) == HELD)
}

/// Successors in tie-break order: PickUp < PutDown < Stack < Unstack, blocks
/// lexical within each kind.
fn successors(p: Packed, n: usize, out: &mut Vec<(Packed, (u8, u8, u8))>) {
    out.clear();
    let held = holding(p, n);
    match held {
        None => {
            for i in 0..n {
                if p.get(i) == TABLE && clear(p, n, i) {
                    out.push((p.set(i, HELD), (0, i as u8, 0)));
                }
            }
            for a in 0..n {
                let below = p.get(a);
                if below < TABLE && clear(p, n, a) {
                    out.push((p.set(a, HELD), (3, a as u8, below as u8)));
                }
            }
        }
        Some(a) => {
            out.push((p.set(a, TABLE), (1, a as u8, 0)));
            for b in 0..n {
                if b != a && clear(p, n, b) {
                    out.push((p.set(a, b as u64), (2, a as u8, b as u8)));
                }
            }
        }
    }
}

fn decode(enc: &Encoding<'_>, (kind, a, b): (u8, u8, u8)) -> Action {
    let a = enc.names[a as usize].clone();
    let b = enc.names[b as usize].clone();
    match kind {
        0 => Action::PickUp(a),
        1 => Action::PutDown(a),
        2 => Action::Stack(a, b),
        _ => Action::Unstack(a, b),
    }
}

/// Breadth-first search for a shortest plan of at most `max_depth` steps.
///
/// Returns `None` when the goal is unreachable within the bound, or when the
/// instance has more than [`MAX_SOLVER_BLOCKS`] blocks.
pub fn solve_bfs(instance: &Instance, max_depth: usize) -> Option<Plan> {
    let names: Vec<&BlockId> = instance.blocks.iter().collect();
    let n = names.len();
    if n > MAX_SOLVER_BLOCKS {
        tracing::warn!(blocks = n, "instance too large for the packed solver");
        return None;
    }
    let enc = Encoding { names };
    let goal: Vec<(usize, u64)> = instance
        .goal
        .iter()
        .map(|atom| match atom {
            GoalAtom::On { a, b } => (enc.index(a), enc.index(b) as u64),
            GoalAtom::OnTable { a } => (enc.index(a), TABLE),
        })
        .collect();
    let is_goal = |p: Packed| goal.iter().all(|&(i, v)| p.get(i) == v);

    let start = enc.pack(&instance.initial);
    if is_goal(start) {
        return Some(Plan::default());
    }

    let mut parent: HashMap<Packed, (Packed, (u8, u8, u8))> = HashMap::new();
    let mut depth: HashMap<Packed, usize> = HashMap::new();
    depth.insert(start, 0);
    let mut queue = VecDeque::from([start]);
    let mut buf = Vec::new();

    while let Some(cur) = queue.pop_front() {
        let d = depth[&cur];
        if d >= max_depth {
            continue;
        }
        successors(cur, n, &mut buf);
        for &(next, step) in &buf {
            if depth.contains_key(&next) {
                continue;
            }
            depth.insert(next, d + 1);
            parent.insert(next, (cur, step));
            if is_goal(next) {
                let mut steps = Vec::with_capacity(d + 1);
                let mut at = next;
                while at != start {
                    let (prev, step) = parent[&at];
                    steps.push(decode(&enc, step));
                    at = prev;
                }
                steps.reverse();
                return Some(Plan::new(steps));
            }
            queue.push_back(next);
        }
    }
    None
}
