use rand::Rng;

use super::{latch_progress, Cell, Dir, EnvConfig, GridState, Layout, TaskSpec, NUM_OBJECTS};
use crate::error::{Error, Result};
use crate::rng::{stream, tag, Stream};

const MAX_LAYOUT_ATTEMPTS: usize = 10_000;

/// Minimum initial Manhattan distance between the two objects of every
/// subgoal in uniform layouts. Closer starts are solvable by a couple of
/// random pushes.
pub const MIN_SUBGOAL_SEPARATION: i32 = 4;

/// A seeded initial configuration of one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub seed: u64,
    pub task: TaskSpec,
    pub initial: GridState,
}

/// Builds the initial layout for `(task, seed)`. Deterministic; the layout
/// never has two entities on one cell and is never already successful.
/// Uniform layouts are rejection-sampled until every subgoal pair starts at
/// least [`MIN_SUBGOAL_SEPARATION`] apart.
pub fn make_scenario(task: &TaskSpec, seed: u64, config: &EnvConfig) -> Result<Scenario> {
    config.validate()?;
    let n = config.grid_size;
    if n * n < NUM_OBJECTS + 1 {
        return Err(Error::Config(format!(
            "grid {n}x{n} cannot hold {} entities",
            NUM_OBJECTS + 1
        )));
    }
    let mut rng = stream(&[tag::SCENARIO, u64::from(task.id), seed]);
    for _ in 0..MAX_LAYOUT_ATTEMPTS {
        let placed = match task.layout {
            Layout::Uniform => uniform_layout(&mut rng, n),
            Layout::PushAligned => aligned_layout(&mut rng, n),
        };
        let Some((gripper, objects)) = placed else {
            continue;
        };
        let state = GridState {
            grid_size: n,
            gripper,
            holding: None,
            objects,
            step_count: 0,
            budget: config.step_budget,
            progress: 0,
            done: false,
            success: false,
        };
        let separated = task.layout != Layout::Uniform
            || task.subgoals().iter().all(|&(a, b)| {
                state.objects[a].manhattan(state.objects[b]) >= MIN_SUBGOAL_SEPARATION
            });
        if separated && latch_progress(&state, task) == 0 {
            return Ok(Scenario {
                seed,
                task: task.clone(),
                initial: state,
            });
        }
    }
    Err(Error::Config(format!(
        "no valid `{}` layout found on a {n}x{n} grid",
        task.name
    )))
}

fn random_cell(rng: &mut Stream, n: usize) -> Cell {
    Cell::new(rng.gen_range(0..n as i32), rng.gen_range(0..n as i32))
}

fn uniform_layout(rng: &mut Stream, n: usize) -> Option<(Cell, Vec<Cell>)> {
    let mut cells: Vec<Cell> = Vec::with_capacity(NUM_OBJECTS + 1);
    while cells.len() < NUM_OBJECTS + 1 {
        let c = random_cell(rng, n);
        if !cells.contains(&c) {
            cells.push(c);
        }
    }
    let gripper = cells.remove(0);
    Some((gripper, cells))
}

/// Gripper `m` cells behind object 0, which sits two cells before object 1,
/// all on one line. Object 2 avoids the line segment.
fn aligned_layout(rng: &mut Stream, n: usize) -> Option<(Cell, Vec<Cell>)> {
    let dir = Dir::ALL[rng.gen_range(0..4)];
    let behind: i32 = rng.gen_range(1..=3);
    let target = random_cell(rng, n);
    let mover = target.offset(dir, -2);
    let gripper = mover.offset(dir, -behind);
    if !mover.in_bounds(n) || !gripper.in_bounds(n) {
        return None;
    }
    let lane: Vec<Cell> = (0..=behind + 2).map(|i| gripper.offset(dir, i)).collect();
    let distractor = random_cell(rng, n);
    if lane.contains(&distractor) {
        return None;
    }
    Some((gripper, vec![mover, target, distractor]))
}
