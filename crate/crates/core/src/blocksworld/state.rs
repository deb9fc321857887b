use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::DomainError;

/// Symbolic block label, e.g. a color word.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BlockId(String);

impl BlockId {
    /// Names are lowercase ASCII words so that plan text can be parsed back
    /// without ambiguity.
    pub fn new(name: impl Into<String>) -> Result<Self, DomainError> {
        let name = name.into();
        let mut chars = name.chars();
        let ok = matches!(chars.next(), Some(c) if c.is_ascii_lowercase())
            && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_');
        if ok {
            Ok(Self(name))
        } else {
            Err(DomainError::InvalidBlockName(name))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for BlockId {
    type Error = DomainError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<BlockId> for String {
    fn from(value: BlockId) -> Self {
        value.0
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Where a block currently is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position<'a> {
    OnTable,
    On(&'a BlockId),
    Held,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorldState {
    /// block -> block it sits directly on
    #[serde(default)]
    pub on: BTreeMap<BlockId, BlockId>,
    #[serde(default)]
    pub on_table: BTreeSet<BlockId>,
    #[serde(default)]
    pub holding: Option<BlockId>,
}

impl WorldState {
    /// All blocks placed somewhere in this state, in lexical order.
    pub fn blocks(&self) -> BTreeSet<&BlockId> {
        self.on.keys().chain(self.on_table.iter()).chain(self.holding.iter()).collect()
    }

    pub fn contains(&self, block: &BlockId) -> bool {
        self.on.contains_key(block) || self.on_table.contains(block) || self.holding.as_ref() == Some(block)
    }

    pub fn position(&self, block: &BlockId) -> Option<Position<'_>> {
        if self.holding.as_ref() == Some(block) {
            Some(Position::Held)
        } else if self.on_table.contains(block) {
            Some(Position::OnTable)
        } else {
            self.on.get(block).map(Position::On)
        }
    }

    /// A block is clear if nothing sits on it and it is not being held.
    pub fn is_clear(&self, block: &BlockId) -> bool {
        self.holding.as_ref() != Some(block) && !self.on.values().any(|below| below == block)
    }

    pub fn hand_empty(&self) -> bool {
        self.holding.is_none()
    }

    /// Checks the structural invariants: each block in exactly one place,
    /// supports exist, at most one block per support, no cycles.
    pub fn check(&self) -> Result<(), DomainError> {
        let mut seen = BTreeSet::new();
        for b in self.on.keys().chain(self.on_table.iter()).chain(self.holding.iter()) {
            if !seen.insert(b) {
                return Err(DomainError::InvalidState(format!("block {b} placed twice")));
            }
        }
        let mut supports = BTreeSet::new();
        for (top, below) in &self.on {
            if !seen.contains(below) {
                return Err(DomainError::InvalidState(format!("block {top} sits on unknown block {below}")));
            }
            if self.holding.as_ref() == Some(below) {
                return Err(DomainError::InvalidState(format!("block {top} sits on held block {below}")));
            }
            if !supports.insert(below) {
                return Err(DomainError::InvalidState(format!("two blocks sit on {below}")));
            }
        }
        for start in self.on.keys() {
            let mut cur = start;
            let mut steps = 0;
            while let Some(next) = self.on.get(cur) {
                steps += 1;
                if next == start || steps > self.on.len() {
                    return Err(DomainError::InvalidState(format!("support cycle through {start}")));
                }
                cur = next;
            }
        }
        Ok(())
    }

    fn holds(&self, atom: &GoalAtom) -> bool {
        match atom {
            GoalAtom::On { a, b } => self.on.get(a) == Some(b),
            GoalAtom::OnTable { a } => self.on_table.contains(a),
        }
    }
}

/// Tie-break order for the solver is the declaration order of this enum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    PickUp,
    PutDown,
    Stack,
    Unstack,
}

impl ActionKind {
    pub fn label(self) -> &'static str {
        match self {
            ActionKind::PickUp => "pick up",
            ActionKind::PutDown => "put down",
            ActionKind::Stack => "stack",
            ActionKind::Unstack => "unstack",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    PickUp(BlockId),
    PutDown(BlockId),
    Stack(BlockId, BlockId),
    Unstack(BlockId, BlockId),
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::PickUp(_) => ActionKind::PickUp,
            Action::PutDown(_) => ActionKind::PutDown,
            Action::Stack(..) => ActionKind::Stack,
            Action::Unstack(..) => ActionKind::Unstack,
        }
    }

    pub fn blocks(&self) -> Vec<&BlockId> {
        match self {
            Action::PickUp(b) | Action::PutDown(b) => vec![b],
            Action::Stack(a, b) | Action::Unstack(a, b) => vec![a, b],
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&super::render_action(self))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Plan {
    pub steps: Vec<Action>,
}

impl Plan {
    pub fn new(steps: Vec<Action>) -> Self {
        Self { steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GoalAtom {
    On { a: BlockId, b: BlockId },
    OnTable { a: BlockId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub blocks: BTreeSet<BlockId>,
    pub initial: WorldState,
    pub goal: BTreeSet<GoalAtom>,
}

impl Instance {
    /// Builds an instance and checks that the initial state and goal only
    /// mention the declared blocks.
    pub fn new(id: impl Into<String>, initial: WorldState, goal: BTreeSet<GoalAtom>) -> Result<Self, DomainError> {
        let blocks = initial.blocks().into_iter().cloned().collect();
        let instance = Self { id: id.into(), blocks, initial, goal };
        instance.check()?;
        Ok(instance)
    }

    pub fn check(&self) -> Result<(), DomainError> {
        self.initial.check()?;
        let placed: BTreeSet<&BlockId> = self.initial.blocks();
        if placed.len() != self.blocks.len() || placed.iter().any(|b| !self.blocks.contains(*b)) {
            return Err(DomainError::InvalidInstance(format!(
                "instance {}: initial state does not place exactly the declared blocks",
                self.id
            )));
        }
        for atom in &self.goal {
            let refs: Vec<&BlockId> = match atom {
                GoalAtom::On { a, b } => vec![a, b],
                GoalAtom::OnTable { a } => vec![a],
            };
            if let Some(unknown) = refs.into_iter().find(|b| !self.blocks.contains(*b)) {
                return Err(DomainError::InvalidInstance(format!(
                    "instance {}: goal mentions unknown block {unknown}",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn goal_satisfied(&self, state: &WorldState) -> bool {
        self.goal.iter().all(|atom| state.holds(atom))
    }

    pub fn from_json(text: &str) -> Result<Self, DomainError> {
        let instance: Instance = serde_json::from_str(text).map_err(|e| DomainError::InvalidInstance(e.to_string()))?;
        instance.check()?;
        Ok(instance)
    }

    /// Single-line JSON, the unit of a newline-delimited dataset file.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("instance serialization cannot fail")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Violation {
    HandNotEmpty,
    NotClear,
    NotOnTable,
    NotOnTop,
    NotHolding,
    TargetNotClear,
    UnknownBlock,
}

impl Violation {
    pub const ALL: [Violation; 7] = [
        Violation::HandNotEmpty,
        Violation::NotClear,
        Violation::NotOnTable,
        Violation::NotOnTop,
        Violation::NotHolding,
        Violation::TargetNotClear,
        Violation::UnknownBlock,
    ];

    pub fn describe(self) -> &'static str {
        match self {
            Violation::HandNotEmpty => "the hand is not empty",
            Violation::NotClear => "the block is not clear",
            Violation::NotOnTable => "the block is not on the table",
            Violation::NotOnTop => "the block is not on top of the named block",
            Violation::NotHolding => "the block is not being held",
            Violation::TargetNotClear => "the target block is not clear",
            Violation::UnknownBlock => "the block does not exist",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Checks the preconditions of `action` in `state`.
pub fn is_legal(state: &WorldState, action: &Action) -> Result<(), Violation> {
    if action.blocks().into_iter().any(|b| !state.contains(b)) {
        return Err(Violation::UnknownBlock);
    }
    match action {
        Action::PickUp(b) => {
            if !state.hand_empty() {
                Err(Violation::HandNotEmpty)
            } else if !state.is_clear(b) {
                Err(Violation::NotClear)
            } else if !state.on_table.contains(b) {
                Err(Violation::NotOnTable)
            } else {
                Ok(())
            }
        }
        Action::PutDown(b) => {
            if state.holding.as_ref() != Some(b) {
                Err(Violation::NotHolding)
            } else {
                Ok(())
            }
        }
        Action::Stack(a, b) => {
            if state.holding.as_ref() != Some(a) {
                Err(Violation::NotHolding)
            } else if !state.is_clear(b) {
                Err(Violation::TargetNotClear)
            } else {
                Ok(())
            }
        }
        Action::Unstack(a, b) => {
            if !state.hand_empty() {
                Err(Violation::HandNotEmpty)
            } else if state.on.get(a) != Some(b) {
                Err(Violation::NotOnTop)
            } else if !state.is_clear(a) {
                Err(Violation::NotClear)
            } else {
                Ok(())
            }
        }
    }
}

/// Returns the successor state; the input is left untouched.
pub fn apply_action(state: &WorldState, action: &Action) -> Result<WorldState, DomainError> {
    is_legal(state, action).map_err(DomainError::IllegalAction)?;
    let mut next = state.clone();
    match action {
        Action::PickUp(b) => {
            next.on_table.remove(b);
            next.holding = Some(b.clone());
        }
        Action::PutDown(b) => {
            next.holding = None;
            next.on_table.insert(b.clone());
        }
        Action::Stack(a, b) => {
            next.holding = None;
            next.on.insert(a.clone(), b.clone());
        }
        Action::Unstack(a, _) => {
            next.on.remove(a);
            next.holding = Some(a.clone());
        }
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    /// 1-based index of the first illegal step.
    pub failure_index: Option<usize>,
    pub violation: Option<Violation>,
    pub goal_satisfied: bool,
}

impl ValidationReport {
    /// One-line explanation, used as evaluator feedback.
    pub fn summary(&self, plan: &Plan) -> String {
        match (self.failure_index, self.violation) {
            (Some(idx), Some(v)) => format!("Step {idx} ({}) is illegal: {}.", plan.steps[idx - 1], v.describe()),
            _ if self.goal_satisfied => "The plan is valid and reaches the goal.".to_string(),
            _ => "Every step is legal, but the final state does not satisfy the goal.".to_string(),
        }
    }
}

/// Executes `plan` from the initial state, stopping at the first illegal step.
pub fn validate_plan(instance: &Instance, plan: &Plan) -> ValidationReport {
    let mut state = instance.initial.clone();
    for (i, action) in plan.steps.iter().enumerate() {
        let unknown = action.blocks().into_iter().any(|b| !instance.blocks.contains(b));
        let step = if unknown { Err(Violation::UnknownBlock) } else { is_legal(&state, action) };
        match step {
            Ok(()) => {
                state = apply_action(&state, action).expect("legality checked above");
            }
            Err(violation) => {
                return ValidationReport {
                    ok: false,
                    failure_index: Some(i + 1),
                    violation: Some(violation),
                    goal_satisfied: false,
                };
            }
        }
    }
    let goal_satisfied = instance.goal_satisfied(&state);
    ValidationReport { ok: goal_satisfied, failure_index: None, violation: None, goal_satisfied }
}
