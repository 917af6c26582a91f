//! Seeded, procedurally generated gridworlds with egocentric partial views.
//!
//! Observations are small integer grids of cell codes centred on the agent;
//! cells outside the world read as walls. [`Observation::flatten`] scales the
//! codes to [0, 1] for the networks.

mod key_corridor;
mod maze;
mod tmaze;

pub use key_corridor::{KeyCorridor, KeyCorridorConfig, KeyCorridorState};
pub use maze::{MazeSpec, RandomMaze, MAZE_MAX_SIZE, MAZE_MIN_SIZE, MAZE_VIEW};
pub use tmaze::{TMaze, TMazeConfig};

use std::fmt;

use crate::error::{Error, Result};

pub const EMPTY: u8 = 0;
pub const WALL: u8 = 1;
pub const GOAL: u8 = 2;
pub const KEY: u8 = 3;
pub const DOOR_LOCKED: u8 = 4;
pub const DOOR_OPEN: u8 = 5;
pub const CUE_LEFT: u8 = 6;
pub const CUE_RIGHT: u8 = 7;
pub const OBJECT: u8 = 8;
const MAX_CODE: f64 = 8.0;

pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;
pub const PICKUP: usize = 4;
pub const TOGGLE: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<u8>,
}

impl Observation {
    pub fn flatten(&self) -> Vec<f64> {
        self.cells.iter().map(|&c| c as f64 / MAX_CODE).collect()
    }

    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.width + col]
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.height {
            let line: String = (0..self.width).map(|c| glyph(self.at(r, c))).collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

pub fn glyph(code: u8) -> char {
    match code {
        EMPTY => '.',
        WALL => '#',
        GOAL => 'G',
        KEY => 'k',
        DOOR_LOCKED => 'D',
        DOOR_OPEN => 'd',
        CUE_LEFT => '<',
        CUE_RIGHT => '>',
        OBJECT => 'o',
        _ => '?',
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepInfo {
    pub episode_length: usize,
    pub success: bool,
    /// Episode ended by the step limit rather than a terminal event.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvStep {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// A resettable episodic environment with a discrete action set.
pub trait Environment: Send {
    fn reset(&mut self, seed: u64) -> Observation;
    fn step(&mut self, action: usize) -> Result<EnvStep>;
    fn num_actions(&self) -> usize;
    /// (height, width) of every observation.
    fn obs_shape(&self) -> (usize, usize);
    /// ASCII view of the full world, agent marked `@`.
    fn render(&self) -> String;
}

/// Environment selection as it appears in run configs.
#[derive(Clone, Debug, PartialEq)]
pub enum EnvSpec {
    RandomMaze,
    KeyCorridor(KeyCorridorConfig),
    TMaze(TMazeConfig),
    /// One cell; every action yields reward 1 and ends the episode.
    Unit,
}

impl EnvSpec {
    pub fn parse(name: &str, corridor: usize, key_width: usize, key_height: usize) -> Result<Self> {
        match name {
            "random-maze" => Ok(Self::RandomMaze),
            "key-corridor" => Ok(Self::KeyCorridor(KeyCorridorConfig::new(key_width, key_height))),
            "tmaze" => Ok(Self::TMaze(TMazeConfig::new(corridor))),
            "unit" => Ok(Self::Unit),
            other => Err(Error::Config(format!(
                "unknown env `{other}` (expected random-maze, key-corridor, tmaze or unit)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::RandomMaze => "random-maze",
            Self::KeyCorridor(_) => "key-corridor",
            Self::TMaze(_) => "tmaze",
            Self::Unit => "unit",
        }
    }

    pub fn build(&self) -> Box<dyn Environment> {
        match self {
            Self::RandomMaze => Box::new(RandomMaze::new()),
            Self::KeyCorridor(cfg) => Box::new(KeyCorridor::new(cfg.clone())),
            Self::TMaze(cfg) => Box::new(TMaze::new(cfg.clone())),
            Self::Unit => Box::new(UnitEnv::default()),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct UnitEnv {
    done: bool,
    steps: usize,
}

impl Environment for UnitEnv {
    fn reset(&mut self, _seed: u64) -> Observation {
        self.done = false;
        self.steps = 0;
        Observation {
            height: 1,
            width: 1,
            cells: vec![EMPTY],
        }
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        if self.done {
            return Err(Error::Env("step after episode end".into()));
        }
        if action >= self.num_actions() {
            return Err(Error::Env(format!("invalid action {action}")));
        }
        self.done = true;
        self.steps += 1;
        Ok(EnvStep {
            observation: Observation {
                height: 1,
                width: 1,
                cells: vec![GOAL],
            },
            reward: 1.0,
            done: true,
            info: StepInfo {
                episode_length: self.steps,
                success: true,
                truncated: false,
            },
        })
    }

    fn num_actions(&self) -> usize {
        2
    }

    fn obs_shape(&self) -> (usize, usize) {
        (1, 1)
    }

    fn render(&self) -> String {
        "@\n".into()
    }
}

/// Crops a `view x view` window centred on `(row, col)` from a world given by
/// `cell(r, c)`; coordinates outside `height x width` read as walls.
pub(crate) fn crop(
    view: usize,
    height: usize,
    width: usize,
    row: usize,
    col: usize,
    cell: impl Fn(usize, usize) -> u8,
) -> Observation {
    let half = (view / 2) as isize;
    let mut cells = Vec::with_capacity(view * view);
    for dr in -half..=half {
        for dc in -half..=half {
            let r = row as isize + dr;
            let c = col as isize + dc;
            let code = if r < 0 || c < 0 || r >= height as isize || c >= width as isize {
                WALL
            } else {
                cell(r as usize, c as usize)
            };
            cells.push(code);
        }
    }
    Observation {
        height: view,
        width: view,
        cells,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_env_rewards_once() {
        let mut env = UnitEnv::default();
        env.reset(0);
        let s = env.step(0).unwrap();
        assert!(s.done && s.reward == 1.0);
        assert!(env.step(0).is_err());
    }

    #[test]
    fn crop_pads_with_walls() {
        let obs = crop(3, 2, 2, 0, 0, |_, _| EMPTY);
        assert_eq!(
            obs.cells,
            vec![WALL, WALL, WALL, WALL, EMPTY, EMPTY, WALL, EMPTY, EMPTY]
        );
    }

    #[test]
    fn flatten_scales_codes() {
        let obs = Observation {
            height: 1,
            width: 3,
            cells: vec![EMPTY, WALL, OBJECT],
        };
        assert_eq!(obs.flatten(), vec![0.0, 0.125, 1.0]);
    }

    #[test]
    fn unknown_env_is_a_config_error() {
        assert!(matches!(EnvSpec::parse("procgen", 8, 8, 3), Err(Error::Config(_))));
    }
}
