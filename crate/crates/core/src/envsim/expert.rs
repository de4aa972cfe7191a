//! Scripted grasp–carry–release demonstrator and the strategy classifier.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{
    replay, step, Cell, Dir, GridState, Primitive, Scenario, TaskSpec, Token, GRASP, RELEASE,
};
use crate::error::{Error, Result};

/// One demonstration: the executed primitive tokens of a successful episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demo {
    pub seed: u64,
    pub task_id: u32,
    pub tokens: Vec<Token>,
    pub success: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Grasp,
    Push,
    Other,
}

/// Breadth-first shortest path from `start` to the first cell accepted by
/// `goal`, expanding neighbours in N, E, S, W order.
fn bfs(
    grid_size: usize,
    start: Cell,
    passable: impl Fn(Cell) -> bool,
    goal: impl Fn(Cell) -> bool,
) -> Option<Vec<Dir>> {
    let n = grid_size;
    let idx = |c: Cell| c.y as usize * n + c.x as usize;
    let mut parent: Vec<Option<(Cell, Dir)>> = vec![None; n * n];
    let mut seen = vec![false; n * n];
    let mut queue = VecDeque::from([start]);
    seen[idx(start)] = true;
    while let Some(cur) = queue.pop_front() {
        if goal(cur) {
            let mut path = Vec::new();
            let mut c = cur;
            while let Some((prev, d)) = parent[idx(c)] {
                path.push(d);
                c = prev;
            }
            path.reverse();
            return Some(path);
        }
        for d in Dir::ALL {
            let next = cur.offset(d, 1);
            if next.in_bounds(n) && !seen[idx(next)] && passable(next) {
                seen[idx(next)] = true;
                parent[idx(next)] = Some((cur, d));
                queue.push_back(next);
            }
        }
    }
    None
}

fn plan_subgoal(state: &GridState, mover: usize, target: usize) -> Option<Vec<Token>> {
    let n = state.grid_size;
    let mut tokens = Vec::new();
    if state.holding != Some(mover) {
        if state.holding.is_some() {
            tokens.push(RELEASE);
        }
        let dest = state.objects[mover];
        let path = bfs(n, state.gripper, |_| true, |c| c == dest)?;
        tokens.extend(path.into_iter().map(|d| Primitive::Move(d).token()));
        tokens.push(GRASP);
    }
    let target_cell = state.objects[target];
    let blocked = |c: Cell| {
        state
            .objects
            .iter()
            .enumerate()
            .any(|(i, &o)| i != mover && o == c)
    };
    let path = bfs(
        n,
        state.objects[mover],
        |c| !blocked(c),
        |c| c.manhattan(target_cell) == 1 && !blocked(c),
    )?;
    tokens.extend(path.into_iter().map(|d| Primitive::Move(d).token()));
    tokens.push(RELEASE);
    Some(tokens)
}

/// Grasp–carry–release tokens that finish every remaining subgoal from
/// `state`, or `None` when some subgoal is unreachable. Never pushes.
pub fn expert_plan(state: &GridState, task: &TaskSpec) -> Option<Vec<Token>> {
    let mut state = state.clone();
    let mut tokens = Vec::new();
    for (i, (mover, target)) in task.subgoals().into_iter().enumerate() {
        if state.progress > i {
            continue;
        }
        for t in plan_subgoal(&state, mover, target)? {
            if state.done {
                break;
            }
            state = step(&state, t, task).ok()?;
            tokens.push(t);
        }
    }
    Some(tokens)
}

/// Shortest grasp–carry–release solution of the scenario, verified by replay.
pub fn expert_demo(scenario: &Scenario) -> Result<Demo> {
    let task = &scenario.task;
    let tokens = expert_plan(&scenario.initial, task).ok_or_else(|| {
        Error::Generation(format!(
            "seed {}: `{}` has an unreachable subgoal",
            scenario.seed, task.name
        ))
    })?;
    let (end, _) = replay(scenario, &tokens)?;
    if !end.success {
        return Err(Error::Generation(format!(
            "seed {}: expert needs more than {} steps for `{}`",
            scenario.seed, end.budget, task.name
        )));
    }
    Ok(Demo {
        seed: scenario.seed,
        task_id: task.id,
        tokens,
        success: true,
    })
}

/// Replays the executed tokens: Grasp if any task object was ever picked up
/// on the way to success, Push if success came without picking any up,
/// Other when the episode failed.
pub fn classify_strategy(scenario: &Scenario, tokens: &[Token]) -> Result<Strategy> {
    let task = &scenario.task;
    let task_objects = task.task_objects();
    let mut state = scenario.initial.clone();
    let mut grasped = false;
    for &t in tokens {
        if state.done {
            break;
        }
        state = step(&state, t, task)?;
        if t == GRASP && state.holding.is_some_and(|h| task_objects.contains(&h)) {
            grasped = true;
        }
    }
    Ok(match (state.success, grasped) {
        (false, _) => Strategy::Other,
        (true, true) => Strategy::Grasp,
        (true, false) => Strategy::Push,
    })
}

impl Demo {
    /// Replays the demo; errors when it does not end in success.
    pub fn verify(&self, scenario: &Scenario) -> Result<()> {
        if let Some(&bad) = self
            .tokens
            .iter()
            .find(|&&t| Primitive::from_token(t).is_none())
        {
            return Err(Error::Data(format!("token {bad} outside vocabulary")));
        }
        let (state, executed) = replay(scenario, &self.tokens)?;
        if !state.success || executed != self.tokens.len() {
            return Err(Error::Data(format!(
                "demo for seed {} does not replay to success",
                self.seed
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{make_scenario, EnvConfig, TaskSpec};

    #[test]
    fn demos_succeed_without_pushing() {
        let cfg = EnvConfig::default();
        for task in TaskSpec::all() {
            for seed in 0..300 {
                let sc = make_scenario(&task, seed, &cfg).unwrap();
                let demo = expert_demo(&sc).unwrap();
                assert!(demo.tokens.iter().all(|&t| !Primitive::is_push(t)));
                demo.verify(&sc).unwrap();
                assert_eq!(classify_strategy(&sc, &demo.tokens).unwrap(), Strategy::Grasp);
            }
        }
    }

    #[test]
    fn demo_length_respects_manhattan_lower_bound() {
        let cfg = EnvConfig::default();
        let task = TaskSpec::by_name("move-adjacent").unwrap();
        for seed in 0..300 {
            let sc = make_scenario(&task, seed, &cfg).unwrap();
            let s = &sc.initial;
            let a = s.objects[0];
            let b = s.objects[1];
            // nearest in-bounds cell adjacent to B, ignoring obstacles
            let to_adjacent = Dir::ALL
                .iter()
                .map(|&d| b.offset(d, 1))
                .filter(|c| c.in_bounds(cfg.grid_size))
                .map(|c| a.manhattan(c))
                .min()
                .unwrap();
            let bound = s.gripper.manhattan(a) + to_adjacent + 2;
            let demo = expert_demo(&sc).unwrap();
            assert!(demo.tokens.len() as i32 >= bound, "seed {seed}");
        }
    }

    #[test]
    fn push_only_success_is_push() {
        let cfg = EnvConfig::default();
        let task = TaskSpec::by_name("move-adjacent-aligned").unwrap();
        let sc = make_scenario(&task, 5, &cfg).unwrap();
        let s = &sc.initial;
        let dir = Dir::ALL
            .into_iter()
            .find(|&d| s.objects[0].offset(d, 2) == s.objects[1])
            .unwrap();
        let behind = s.gripper.manhattan(s.objects[0]);
        let mut tokens: Vec<Token> = (1..behind).map(|_| Primitive::Move(dir).token()).collect();
        tokens.push(Primitive::Push(dir).token());
        let (end, _) = replay(&sc, &tokens).unwrap();
        assert!(end.success);
        assert_eq!(classify_strategy(&sc, &tokens).unwrap(), Strategy::Push);
    }

    #[test]
    fn truncated_failure_is_other() {
        let cfg = EnvConfig::default();
        let task = TaskSpec::by_name("move-adjacent").unwrap();
        let sc = make_scenario(&task, 3, &cfg).unwrap();
        let demo = expert_demo(&sc).unwrap();
        let cut = &demo.tokens[..demo.tokens.len() - 1];
        assert_eq!(classify_strategy(&sc, cut).unwrap(), Strategy::Other);
    }
}
