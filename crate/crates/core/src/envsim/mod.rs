//! Seeded gridworld manipulation environments.
//!
//! A single gripper moves on a square grid holding at most one object. Objects
//! can be grasped, carried and released, or pushed one cell at a time. Tasks
//! ask for an object to end up Manhattan-adjacent to another (optionally as a
//! sequence of such subgoals). Every token of the action vocabulary is legal;
//! primitives that cannot apply are no-ops that still consume a step.

mod demo_file;
mod expert;
mod scenario;

pub use demo_file::{read_demos, write_demos, DEMO_MAGIC, DEMO_VERSION};
pub use expert::{classify_strategy, expert_demo, expert_plan, Demo, Strategy};
pub use scenario::{make_scenario, Scenario, MIN_SUBGOAL_SEPARATION};

use crate::error::{Error, Result};
use crate::policy::Observation;

/// Index into the action vocabulary.
pub type Token = u16;

/// MOVE N/E/S/W, GRASP, RELEASE, PUSH N/E/S/W, NOOP.
pub const VOCAB_SIZE: usize = 11;
/// Every scenario carries this many objects; tasks reference a subset.
pub const NUM_OBJECTS: usize = 3;

pub const NOOP: Token = 10;
pub const GRASP: Token = 4;
pub const RELEASE: Token = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dir {
    N,
    E,
    S,
    W,
}

impl Dir {
    /// BFS tie-break order.
    pub const ALL: [Dir; 4] = [Dir::N, Dir::E, Dir::S, Dir::W];

    pub fn delta(self) -> (i32, i32) {
        match self {
            Dir::N => (0, 1),
            Dir::E => (1, 0),
            Dir::S => (0, -1),
            Dir::W => (-1, 0),
        }
    }

    fn index(self) -> Token {
        match self {
            Dir::N => 0,
            Dir::E => 1,
            Dir::S => 2,
            Dir::W => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Move(Dir),
    Grasp,
    Release,
    Push(Dir),
    Noop,
}

impl Primitive {
    pub fn from_token(token: Token) -> Option<Self> {
        Some(match token {
            0..=3 => Primitive::Move(Dir::ALL[token as usize]),
            4 => Primitive::Grasp,
            5 => Primitive::Release,
            6..=9 => Primitive::Push(Dir::ALL[token as usize - 6]),
            10 => Primitive::Noop,
            _ => return None,
        })
    }

    pub fn token(self) -> Token {
        match self {
            Primitive::Move(d) => d.index(),
            Primitive::Grasp => GRASP,
            Primitive::Release => RELEASE,
            Primitive::Push(d) => 6 + d.index(),
            Primitive::Noop => NOOP,
        }
    }

    pub fn is_push(token: Token) -> bool {
        (6..=9).contains(&token)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Cell { x, y }
    }

    pub fn offset(self, dir: Dir, times: i32) -> Cell {
        let (dx, dy) = dir.delta();
        Cell::new(self.x + dx * times, self.y + dy * times)
    }

    pub fn manhattan(self, other: Cell) -> i32 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }

    pub fn in_bounds(self, grid_size: usize) -> bool {
        let n = grid_size as i32;
        (0..n).contains(&self.x) && (0..n).contains(&self.y)
    }
}

/// Grid dimensions and episode budget.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub grid_size: usize,
    /// Maximum primitives per episode.
    pub step_budget: usize,
    /// Tokens per action chunk (k).
    pub chunk_size: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            grid_size: 8,
            step_budget: 64,
            chunk_size: 8,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 4 {
            return Err(Error::Config(format!(
                "grid_size must be >= 4, got {}",
                self.grid_size
            )));
        }
        if self.grid_size > 255 {
            return Err(Error::Config("grid_size must be <= 255".into()));
        }
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be >= 1".into()));
        }
        if self.step_budget == 0 {
            return Err(Error::Config("step_budget must be >= 1".into()));
        }
        Ok(())
    }

    /// Length of the observation feature vector.
    pub fn observation_dim(&self) -> usize {
        2 + 2 * NUM_OBJECTS + 1 + NUM_TASKS
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskKind {
    /// `mover` must end Manhattan-adjacent to `target` and not be held.
    MoveAdjacent { mover: usize, target: usize },
    /// Ordered list of (mover, target) subgoals, each latched once reached.
    StackSequence(Vec<(usize, usize)>),
}

/// Initial-layout distribution of a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Gripper and objects at uniformly random distinct cells.
    Uniform,
    /// Gripper, mover and target on one line with the mover two cells from the
    /// target, so a single push can finish the task.
    PushAligned,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub id: u32,
    pub name: &'static str,
    pub kind: TaskKind,
    pub layout: Layout,
}

pub const NUM_TASKS: usize = 4;

impl TaskSpec {
    pub fn all() -> Vec<TaskSpec> {
        vec![
            TaskSpec {
                id: 0,
                name: "move-adjacent",
                kind: TaskKind::MoveAdjacent { mover: 0, target: 1 },
                layout: Layout::Uniform,
            },
            TaskSpec {
                id: 1,
                name: "move-adjacent-alt",
                kind: TaskKind::MoveAdjacent { mover: 2, target: 1 },
                layout: Layout::Uniform,
            },
            TaskSpec {
                id: 2,
                name: "stack-sequence",
                kind: TaskKind::StackSequence(vec![(0, 1), (2, 0)]),
                layout: Layout::Uniform,
            },
            TaskSpec {
                id: 3,
                name: "move-adjacent-aligned",
                kind: TaskKind::MoveAdjacent { mover: 0, target: 1 },
                layout: Layout::PushAligned,
            },
        ]
    }

    pub fn by_name(name: &str) -> Result<TaskSpec> {
        Self::all()
            .into_iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Config(format!("unknown task `{name}`")))
    }

    pub fn by_id(id: u32) -> Result<TaskSpec> {
        Self::all()
            .into_iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::Data(format!("unknown task id {id}")))
    }

    pub fn subgoals(&self) -> Vec<(usize, usize)> {
        match &self.kind {
            TaskKind::MoveAdjacent { mover, target } => vec![(*mover, *target)],
            TaskKind::StackSequence(pairs) => pairs.clone(),
        }
    }

    /// Objects whose grasping marks a success as grasp-based.
    pub fn task_objects(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .subgoals()
            .into_iter()
            .flat_map(|(a, b)| [a, b])
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GridState {
    pub grid_size: usize,
    pub gripper: Cell,
    pub holding: Option<usize>,
    pub objects: Vec<Cell>,
    pub step_count: usize,
    pub budget: usize,
    /// Number of subgoals latched so far.
    pub progress: usize,
    pub done: bool,
    pub success: bool,
}

impl GridState {
    pub fn object_at(&self, cell: Cell) -> Option<usize> {
        self.objects.iter().position(|&c| c == cell)
    }

    /// Returns a description of the first violated invariant, if any.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        if !self.gripper.in_bounds(self.grid_size) {
            return Err(format!("gripper out of bounds: {:?}", self.gripper));
        }
        for (i, &c) in self.objects.iter().enumerate() {
            if !c.in_bounds(self.grid_size) {
                return Err(format!("object {i} out of bounds: {c:?}"));
            }
            if self.objects[..i].contains(&c) {
                return Err(format!("two objects share cell {c:?}"));
            }
        }
        if let Some(h) = self.holding {
            if h >= self.objects.len() {
                return Err(format!("holding unknown object {h}"));
            }
            if self.objects[h] != self.gripper {
                return Err(format!("held object {h} not at gripper"));
            }
        }
        if self.success && !self.done {
            return Err("success without done".into());
        }
        if self.step_count > self.budget {
            return Err("step budget exceeded".into());
        }
        Ok(())
    }
}

fn subgoal_met(state: &GridState, (mover, target): (usize, usize)) -> bool {
    state.objects[mover].manhattan(state.objects[target]) == 1 && state.holding != Some(mover)
}

/// Subgoal count after latching every consecutive subgoal that holds now.
pub fn latch_progress(state: &GridState, task: &TaskSpec) -> usize {
    let goals = task.subgoals();
    let mut progress = state.progress;
    while progress < goals.len() && subgoal_met(state, goals[progress]) {
        progress += 1;
    }
    progress
}

/// True when every subgoal of `task` is (or becomes) latched in `state`.
pub fn check_success(state: &GridState, task: &TaskSpec) -> bool {
    latch_progress(state, task) == task.subgoals().len()
}

/// Applies one primitive. Stepping a finished episode is a usage error.
pub fn step(state: &GridState, token: Token, task: &TaskSpec) -> Result<GridState> {
    if state.done {
        return Err(Error::Usage("step called on a finished episode".into()));
    }
    let prim = Primitive::from_token(token)
        .ok_or_else(|| Error::Usage(format!("token {token} outside vocabulary")))?;
    let mut next = state.clone();
    let n = next.grid_size;
    match prim {
        Primitive::Move(d) => {
            let to = next.gripper.offset(d, 1);
            let blocked = match next.holding {
                Some(h) => next.object_at(to).is_some_and(|o| o != h),
                None => false,
            };
            if to.in_bounds(n) && !blocked {
                next.gripper = to;
                if let Some(h) = next.holding {
                    next.objects[h] = to;
                }
            }
        }
        Primitive::Grasp => {
            if next.holding.is_none() {
                next.holding = next.object_at(next.gripper);
            }
        }
        Primitive::Release => {
            if let Some(h) = next.holding {
                let other = next
                    .objects
                    .iter()
                    .enumerate()
                    .any(|(i, &c)| i != h && c == next.gripper);
                if !other {
                    next.holding = None;
                }
            }
        }
        Primitive::Push(d) => {
            let front = next.gripper.offset(d, 1);
            let beyond = next.gripper.offset(d, 2);
            if let Some(o) = next.object_at(front) {
                if Some(o) != next.holding
                    && beyond.in_bounds(n)
                    && next.object_at(beyond).is_none()
                {
                    next.objects[o] = beyond;
                    next.gripper = front;
                    if let Some(h) = next.holding {
                        next.objects[h] = front;
                    }
                }
            }
        }
        Primitive::Noop => {}
    }
    next.step_count += 1;
    next.progress = latch_progress(&next, task);
    next.success = next.progress == task.subgoals().len();
    next.done = next.success || next.step_count >= next.budget;
    Ok(next)
}

/// Feature vector: gripper, objects, holding flag, one-hot task id.
pub fn observe(state: &GridState, task: &TaskSpec) -> Observation {
    let scale = (state.grid_size - 1) as f32;
    let mut f = Vec::with_capacity(2 + 2 * NUM_OBJECTS + 1 + NUM_TASKS);
    f.push(state.gripper.x as f32 / scale);
    f.push(state.gripper.y as f32 / scale);
    for c in &state.objects {
        f.push(c.x as f32 / scale);
        f.push(c.y as f32 / scale);
    }
    f.push(if state.holding.is_some() { 1.0 } else { 0.0 });
    for t in 0..NUM_TASKS {
        f.push(if t as u32 == task.id { 1.0 } else { 0.0 });
    }
    Observation::new(f)
}

/// Replays `tokens` from the scenario's initial state, stopping at `done`.
/// Returns the final state and the number of tokens actually executed.
pub fn replay(scenario: &Scenario, tokens: &[Token]) -> Result<(GridState, usize)> {
    let mut state = scenario.initial.clone();
    let mut executed = 0;
    for &t in tokens {
        if state.done {
            break;
        }
        state = step(&state, t, &scenario.task)?;
        executed += 1;
    }
    Ok((state, executed))
}
