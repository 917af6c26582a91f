use std::collections::VecDeque;

use super::{crop, EnvStep, Environment, Observation, StepInfo, DOWN, EMPTY, GOAL, LEFT, RIGHT, UP, WALL};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const MAZE_MIN_SIZE: usize = 5;
pub const MAZE_MAX_SIZE: usize = 25;
pub const MAZE_VIEW: usize = 9;

const STEP_REWARD: f64 = -0.01;
const BUMP_REWARD: f64 = -1.0;
const GOAL_REWARD: f64 = 1.0;

/// A generated maze layout with spawn and goal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MazeSpec {
    pub size: usize,
    /// Row-major `size x size`, `true` for wall.
    pub walls: Vec<bool>,
    pub agent: (usize, usize),
    pub goal: (usize, usize),
    pub seed: u64,
}

impl MazeSpec {
    /// Square maze whose side is uniform in `5..=25`.
    ///
    /// Corridors are carved by a recursive backtracker on the odd-coordinate
    /// lattice of the smallest odd grid covering the size, which is then
    /// cropped. Removing wall rows cannot disconnect the tree of carved
    /// cells, so every free cell reaches every other. The goal is the free
    /// cell furthest to the lower right; the agent spawns on a uniformly
    /// random other free cell.
    pub fn generate(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let size = MAZE_MIN_SIZE + rng.below(MAZE_MAX_SIZE - MAZE_MIN_SIZE + 1);
        let g = size | 1;
        let mut full = vec![true; g * g];
        let cells_per_side = (g - 1) / 2;
        let mut visited = vec![false; cells_per_side * cells_per_side];
        let start = (rng.below(cells_per_side), rng.below(cells_per_side));
        let mut stack = vec![start];
        visited[start.0 * cells_per_side + start.1] = true;
        full[(2 * start.0 + 1) * g + 2 * start.1 + 1] = false;
        while let Some(&(r, c)) = stack.last() {
            let mut options = Vec::with_capacity(4);
            if r > 0 && !visited[(r - 1) * cells_per_side + c] {
                options.push((r - 1, c));
            }
            if r + 1 < cells_per_side && !visited[(r + 1) * cells_per_side + c] {
                options.push((r + 1, c));
            }
            if c > 0 && !visited[r * cells_per_side + c - 1] {
                options.push((r, c - 1));
            }
            if c + 1 < cells_per_side && !visited[r * cells_per_side + c + 1] {
                options.push((r, c + 1));
            }
            if options.is_empty() {
                stack.pop();
                continue;
            }
            let (nr, nc) = options[rng.below(options.len())];
            visited[nr * cells_per_side + nc] = true;
            // open the wall between the two cells and the new cell itself
            full[(r + nr + 1) * g + (c + nc + 1)] = false;
            full[(2 * nr + 1) * g + 2 * nc + 1] = false;
            stack.push((nr, nc));
        }
        let mut walls = vec![true; size * size];
        for r in 0..size {
            for c in 0..size {
                walls[r * size + c] = full[r * g + c];
            }
        }
        let free: Vec<(usize, usize)> = (0..size * size)
            .filter(|&i| !walls[i])
            .map(|i| (i / size, i % size))
            .collect();
        let goal = *free
            .iter()
            .max_by_key(|&&(r, c)| (r + c, r))
            .expect("maze has free cells");
        let mut agent = free[rng.below(free.len())];
        while agent == goal {
            agent = free[rng.below(free.len())];
        }
        Self {
            size,
            walls,
            agent,
            goal,
            seed,
        }
    }

    pub fn is_wall(&self, r: usize, c: usize) -> bool {
        self.walls[r * self.size + c]
    }

    /// Breadth-first search distance from `from` to the goal, if reachable.
    pub fn bfs_distance(&self, from: (usize, usize)) -> Option<usize> {
        let n = self.size;
        let mut dist = vec![usize::MAX; n * n];
        let mut queue = VecDeque::new();
        dist[from.0 * n + from.1] = 0;
        queue.push_back(from);
        while let Some((r, c)) = queue.pop_front() {
            if (r, c) == self.goal {
                return Some(dist[r * n + c]);
            }
            let d = dist[r * n + c];
            let neighbours = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
            for (nr, nc) in neighbours {
                if nr < n && nc < n && !self.is_wall(nr, nc) && dist[nr * n + nc] == usize::MAX {
                    dist[nr * n + nc] = d + 1;
                    queue.push_back((nr, nc));
                }
            }
        }
        None
    }
}

/// Maze navigation with a 9x9 agent-centred view.
///
/// Bumping into a wall gives -1 and ends the episode, reaching the goal gives
/// +1 and ends it, any other move costs -0.01. Episodes are cut after
/// `4 * size^2` steps.
#[derive(Clone, Debug, Default)]
pub struct RandomMaze {
    spec: Option<MazeSpec>,
    agent: (usize, usize),
    steps: usize,
    done: bool,
}

impl RandomMaze {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts an episode on an explicit layout.
    pub fn reset_with(&mut self, spec: MazeSpec) -> Observation {
        self.agent = spec.agent;
        self.spec = Some(spec);
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    pub fn spec(&self) -> Option<&MazeSpec> {
        self.spec.as_ref()
    }

    pub fn agent(&self) -> (usize, usize) {
        self.agent
    }

    pub fn max_steps(&self) -> usize {
        self.spec.as_ref().map_or(0, |s| 4 * s.size * s.size)
    }

    fn observe(&self) -> Observation {
        let spec = self.spec.as_ref().expect("reset before observe");
        crop(MAZE_VIEW, spec.size, spec.size, self.agent.0, self.agent.1, |r, c| {
            if spec.is_wall(r, c) {
                WALL
            } else if (r, c) == spec.goal {
                GOAL
            } else {
                EMPTY
            }
        })
    }
}

impl Environment for RandomMaze {
    fn reset(&mut self, seed: u64) -> Observation {
        self.reset_with(MazeSpec::generate(seed))
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        if self.done {
            return Err(Error::Env("step after episode end; reset first".into()));
        }
        let spec = self
            .spec
            .as_ref()
            .ok_or_else(|| Error::Env("step before reset".into()))?;
        let (r, c) = (self.agent.0 as isize, self.agent.1 as isize);
        let (nr, nc) = match action {
            UP => (r - 1, c),
            DOWN => (r + 1, c),
            LEFT => (r, c - 1),
            RIGHT => (r, c + 1),
            _ => return Err(Error::Env(format!("invalid maze action {action}"))),
        };
        self.steps += 1;
        let n = spec.size as isize;
        let blocked = nr < 0 || nc < 0 || nr >= n || nc >= n || spec.is_wall(nr as usize, nc as usize);
        let (reward, done, success) = if blocked {
            (BUMP_REWARD, true, false)
        } else {
            self.agent = (nr as usize, nc as usize);
            if self.agent == spec.goal {
                (GOAL_REWARD, true, true)
            } else {
                (STEP_REWARD, false, false)
            }
        };
        let truncated = !done && self.steps >= self.max_steps();
        self.done = done || truncated;
        Ok(EnvStep {
            observation: self.observe(),
            reward,
            done: self.done,
            info: StepInfo {
                episode_length: self.steps,
                success,
                truncated,
            },
        })
    }

    fn num_actions(&self) -> usize {
        4
    }

    fn obs_shape(&self) -> (usize, usize) {
        (MAZE_VIEW, MAZE_VIEW)
    }

    fn render(&self) -> String {
        let Some(spec) = &self.spec else {
            return String::new();
        };
        let mut out = String::new();
        for r in 0..spec.size {
            for c in 0..spec.size {
                out.push(if (r, c) == self.agent {
                    '@'
                } else if (r, c) == spec.goal {
                    'G'
                } else if spec.is_wall(r, c) {
                    '#'
                } else {
                    '.'
                });
            }
            out.push('\n');
        }
        out
    }
}
