use super::{crop, EnvStep, Environment, Observation, StepInfo, CUE_LEFT, CUE_RIGHT, DOWN, EMPTY, UP, WALL};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const TMAZE_VIEW: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TMazeConfig {
    pub corridor: usize,
    /// Extra steps allowed at the junction before the episode times out.
    pub patience: usize,
}

impl TMazeConfig {
    pub fn new(corridor: usize) -> Self {
        Self { corridor, patience: 20 }
    }

    pub fn max_steps(&self) -> usize {
        self.corridor + 1 + self.patience
    }
}

impl Default for TMazeConfig {
    fn default() -> Self {
        Self::new(8)
    }
}

/// Memory diagnostic.
///
/// The world is a 3-row strip: the corridor runs along the middle row from
/// column 0 to the junction at column `C`, with the two arms directly above
/// (left) and below (right) the junction. The cue is drawn in the agent's
/// own cell of the first observation only. In the corridor every action
/// advances one cell; at the junction `up` commits to the left arm and
/// `down` to the right arm, scoring +1 if it matches the cue and −1
/// otherwise. Any other action waits; exhausting the patience scores −1.
#[derive(Clone, Debug)]
pub struct TMaze {
    cfg: TMazeConfig,
    cue_left: bool,
    pos: usize,
    steps: usize,
    done: bool,
}

impl TMaze {
    pub fn new(cfg: TMazeConfig) -> Self {
        Self {
            cfg,
            cue_left: true,
            pos: 0,
            steps: 0,
            done: true,
        }
    }

    pub fn config(&self) -> &TMazeConfig {
        &self.cfg
    }

    pub fn cue_left(&self) -> bool {
        self.cue_left
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Reset with an explicit cue instead of a sampled one.
    pub fn reset_with_cue(&mut self, cue_left: bool) -> Observation {
        self.cue_left = cue_left;
        self.pos = 0;
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    fn cell(&self, r: usize, c: usize) -> u8 {
        let junction = self.cfg.corridor;
        match r {
            1 if c <= junction => EMPTY,
            0 | 2 if c == junction => EMPTY,
            _ => WALL,
        }
    }

    fn observe(&self) -> Observation {
        let mut obs = crop(TMAZE_VIEW, 3, self.cfg.corridor + 1, 1, self.pos, |r, c| {
            self.cell(r, c)
        });
        if self.steps == 0 {
            obs.cells[TMAZE_VIEW * TMAZE_VIEW / 2] = if self.cue_left { CUE_LEFT } else { CUE_RIGHT };
        }
        obs
    }
}

impl Environment for TMaze {
    fn reset(&mut self, seed: u64) -> Observation {
        let cue_left = Rng::new(seed).below(2) == 0;
        self.reset_with_cue(cue_left)
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        if self.done {
            return Err(Error::Env("step after episode end; reset first".into()));
        }
        if action >= self.num_actions() {
            return Err(Error::Env(format!("invalid t-maze action {action}")));
        }
        self.steps += 1;
        let mut reward = 0.0;
        let mut success = false;
        if self.pos < self.cfg.corridor {
            self.pos += 1;
        } else if action == UP || action == DOWN {
            success = (action == UP) == self.cue_left;
            reward = if success { 1.0 } else { -1.0 };
            self.done = true;
        }
        let truncated = !self.done && self.steps >= self.cfg.max_steps();
        if truncated {
            reward = -1.0;
            self.done = true;
        }
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
        (TMAZE_VIEW, TMAZE_VIEW)
    }

    fn render(&self) -> String {
        let mut out = String::new();
        for r in 0..3 {
            for c in 0..=self.cfg.corridor {
                let ch = if r == 1 && c == self.pos {
                    '@'
                } else if r == 1 && c == 0 && self.steps == 0 {
                    super::glyph(if self.cue_left { CUE_LEFT } else { CUE_RIGHT })
                } else {
                    super::glyph(self.cell(r, c))
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }
}
