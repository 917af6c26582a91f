use std::collections::{HashSet, VecDeque};

use super::{
    crop, EnvStep, Environment, Observation, StepInfo, DOOR_LOCKED, DOOR_OPEN, DOWN, EMPTY, KEY, LEFT, OBJECT, PICKUP,
    RIGHT, TOGGLE, UP, WALL,
};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const KEY_VIEW: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct KeyCorridorConfig {
    /// Interior width of the main room.
    pub width: usize,
    /// Interior height of both rooms.
    pub height: usize,
    pub max_steps: usize,
}

impl KeyCorridorConfig {
    pub fn new(width: usize, height: usize) -> Self {
        let width = width.max(2);
        let height = height.max(1);
        Self {
            width,
            height,
            max_steps: 10 * (width + 3) * (height + 2),
        }
    }
}

impl Default for KeyCorridorConfig {
    fn default() -> Self {
        Self::new(8, 3)
    }
}

/// Full dynamic state; also the search state of the planner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct KeyCorridorState {
    pub agent: (usize, usize),
    pub has_key: bool,
    pub door_open: bool,
}

/// Key/door memory task.
///
/// Layout (walls `#`, interior `height` rows):
///
/// ```text
/// ##########
/// #k.....#.#
/// #...@..D.#
/// #......#o#
/// ##########
/// ```
///
/// The key lies in the leftmost column of the main room, the locked door in
/// the dividing wall on the right, the object in the small room behind it.
/// `pickup` takes the key from an adjacent cell, `toggle` opens an adjacent
/// door when the key is carried. Reaching the object yields
/// `1 - 0.9 * steps / max_steps`; running out of steps yields 0.
#[derive(Clone, Debug)]
pub struct KeyCorridor {
    cfg: KeyCorridorConfig,
    key: (usize, usize),
    door: (usize, usize),
    object: (usize, usize),
    state: KeyCorridorState,
    steps: usize,
    done: bool,
}

impl KeyCorridor {
    pub fn new(cfg: KeyCorridorConfig) -> Self {
        Self {
            cfg,
            key: (1, 1),
            door: (1, 1),
            object: (1, 1),
            state: KeyCorridorState {
                agent: (1, 1),
                has_key: false,
                door_open: false,
            },
            steps: 0,
            done: true,
        }
    }

    pub fn config(&self) -> &KeyCorridorConfig {
        &self.cfg
    }

    pub fn state(&self) -> KeyCorridorState {
        self.state
    }

    fn grid_height(&self) -> usize {
        self.cfg.height + 2
    }

    fn grid_width(&self) -> usize {
        self.cfg.width + 4
    }

    fn divider_col(&self) -> usize {
        self.cfg.width + 1
    }

    /// Cell code at `(r, c)` for a given dynamic state.
    pub fn cell(&self, state: &KeyCorridorState, r: usize, c: usize) -> u8 {
        let (h, w) = (self.grid_height(), self.grid_width());
        if r == 0 || c == 0 || r == h - 1 || c == w - 1 {
            return WALL;
        }
        if (r, c) == self.door {
            return if state.door_open { DOOR_OPEN } else { DOOR_LOCKED };
        }
        if c == self.divider_col() {
            return WALL;
        }
        if (r, c) == self.key && !state.has_key {
            return KEY;
        }
        if (r, c) == self.object {
            return OBJECT;
        }
        EMPTY
    }

    fn passable(&self, state: &KeyCorridorState, r: usize, c: usize) -> bool {
        matches!(self.cell(state, r, c), EMPTY | DOOR_OPEN | OBJECT)
    }

    fn adjacent(a: (usize, usize), b: (usize, usize)) -> bool {
        a.0.abs_diff(b.0) + a.1.abs_diff(b.1) == 1
    }

    /// Deterministic transition; returns the next state and whether the
    /// object was reached.
    pub fn transition(&self, state: &KeyCorridorState, action: usize) -> Result<(KeyCorridorState, bool)> {
        let mut next = *state;
        let (r, c) = state.agent;
        match action {
            UP | DOWN | LEFT | RIGHT => {
                let (nr, nc) = match action {
                    UP => (r - 1, c),
                    DOWN => (r + 1, c),
                    LEFT => (r, c - 1),
                    _ => (r, c + 1),
                };
                if self.passable(state, nr, nc) {
                    next.agent = (nr, nc);
                }
            }
            PICKUP => {
                if !state.has_key && Self::adjacent(state.agent, self.key) {
                    next.has_key = true;
                }
            }
            TOGGLE => {
                if state.has_key && Self::adjacent(state.agent, self.door) {
                    next.door_open = true;
                }
            }
            _ => return Err(Error::Env(format!("invalid key-corridor action {action}"))),
        }
        Ok((next, next.agent == self.object))
    }

    /// Shortest action sequence to the object by breadth-first search over
    /// (position, key, door) states.
    pub fn plan(&self) -> Option<Vec<usize>> {
        let start = self.state;
        let mut seen = HashSet::new();
        let mut queue = VecDeque::new();
        seen.insert(start);
        queue.push_back((start, Vec::new()));
        while let Some((s, path)) = queue.pop_front() {
            for a in 0..6 {
                let (n, reached) = self.transition(&s, a).ok()?;
                let mut p = path.clone();
                p.push(a);
                if reached {
                    return Some(p);
                }
                if seen.insert(n) {
                    queue.push_back((n, p));
                }
            }
        }
        None
    }

    fn observe(&self) -> Observation {
        let (r, c) = self.state.agent;
        let mut obs = crop(KEY_VIEW, self.grid_height(), self.grid_width(), r, c, |rr, cc| {
            self.cell(&self.state, rr, cc)
        });
        // the agent's own cell shows whether the key is carried
        let centre = (KEY_VIEW / 2) * KEY_VIEW + KEY_VIEW / 2;
        obs.cells[centre] = if self.state.has_key { KEY } else { EMPTY };
        obs
    }
}

impl Environment for KeyCorridor {
    fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = Rng::new(seed);
        let h = self.cfg.height;
        let w = self.cfg.width;
        self.key = (1 + rng.below(h), 1);
        self.door = (1 + rng.below(h), self.divider_col());
        self.object = (1 + rng.below(h), self.divider_col() + 1);
        let agent = (1 + rng.below(h), 2 + rng.below(w - 1));
        self.state = KeyCorridorState {
            agent,
            has_key: false,
            door_open: false,
        };
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        if self.done {
            return Err(Error::Env("step after episode end; reset first".into()));
        }
        let (next, reached) = self.transition(&self.state, action)?;
        self.state = next;
        self.steps += 1;
        let (reward, success) = if reached {
            (1.0 - 0.9 * self.steps as f64 / self.cfg.max_steps as f64, true)
        } else {
            (0.0, false)
        };
        let truncated = !reached && self.steps >= self.cfg.max_steps;
        self.done = reached || truncated;
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
        6
    }

    fn obs_shape(&self) -> (usize, usize) {
        (KEY_VIEW, KEY_VIEW)
    }

    fn render(&self) -> String {
        let mut out = String::new();
        for r in 0..self.grid_height() {
            for c in 0..self.grid_width() {
                if (r, c) == self.state.agent {
                    out.push('@');
                } else {
                    out.push(super::glyph(self.cell(&self.state, r, c)));
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(seed: u64, width: usize, height: usize) -> KeyCorridor {
        let mut e = KeyCorridor::new(KeyCorridorConfig::new(width, height));
        e.reset(seed);
        e
    }

    #[test]
    fn toggle_without_key_keeps_door_locked() {
        let mut e = env(1, 4, 3);
        // walk next to the door
        let door = e.door;
        e.state.agent = (door.0, door.1 - 1);
        let s = e.step(TOGGLE).unwrap();
        assert_eq!((s.reward, s.done), (0.0, false));
        assert!(!e.state().door_open);
        assert_eq!(e.cell(&e.state(), door.0, door.1), DOOR_LOCKED);
    }

    #[test]
    fn planner_trajectory_scores_close_to_one() {
        for seed in 0..20 {
            let mut e = env(seed, 5, 3);
            let plan = e.plan().expect("solvable");
            let mut last = None;
            for a in plan {
                last = Some(e.step(a).unwrap());
            }
            let s = last.unwrap();
            assert!(s.done && s.info.success);
            assert!(s.reward > 0.9 && s.reward < 1.0, "reward {}", s.reward);
        }
    }

    #[test]
    fn pickup_and_toggle_sequence() {
        let mut e = env(3, 4, 1);
        // height 1: everything on row 1
        e.state.agent = (1, 2);
        e.step(PICKUP).unwrap();
        assert!(e.state().has_key);
        let obs = e.observe();
        assert_eq!(obs.at(3, 3), KEY);
        for _ in 0..3 {
            e.step(RIGHT).unwrap();
        }
        assert_eq!(e.state().agent, (1, 4));
        e.step(TOGGLE).unwrap();
        assert!(e.state().door_open);
        e.step(RIGHT).unwrap();
        let s = e.step(RIGHT).unwrap();
        assert!(s.info.success);
    }

    #[test]
    fn timeout_gives_zero() {
        let mut e = KeyCorridor::new(KeyCorridorConfig {
            max_steps: 5,
            ..KeyCorridorConfig::new(6, 2)
        });
        e.reset(0);
        let mut last = None;
        for _ in 0..5 {
            last = Some(e.step(PICKUP).unwrap());
        }
        let s = last.unwrap();
        assert!(s.done && s.info.truncated && s.reward == 0.0);
        assert!(e.step(UP).is_err());
    }

    #[test]
    fn crop_is_exact() {
        let mut checked = 0;
        for seed in 0..50 {
            let e = env(seed, 12, 3);
            let base = e.observe();
            assert_eq!(base.cells.len(), KEY_VIEW * KEY_VIEW);
            let (ar, ac) = e.state().agent;
            let hidden = |p: (usize, usize)| p.0.abs_diff(ar) > 3 || p.1.abs_diff(ac) > 3;
            let mut moved = e.clone();
            moved.object = (if e.object.0 == 1 { 2 } else { 1 }, e.object.1);
            if hidden(e.object) && hidden(moved.object) {
                assert_eq!(moved.observe(), base);
                checked += 1;
            }
        }
        assert!(checked > 10);
    }
}
