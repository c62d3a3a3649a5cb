//! The 5×5 collection game: typed objects, an agent, reward scenarios and
//! color settings, rendered to a 50×50 RGB image.

pub mod bitmaps;

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use bitmaps::{Mask, AGENT_MASK, SPRITE};

pub const GRID: usize = 5;
pub const CELL: usize = SPRITE;
pub const IMAGE: usize = GRID * CELL;
pub const MAX_STEPS: u32 = 50;
/// Per-type object count is drawn uniformly from `1..=MAX_PER_TYPE`.
pub const MAX_PER_TYPE: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("episode already finished")]
    EpisodeFinished,
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid setting: {0}")]
    InvalidSetting(String),
    #[error("cannot parse grid: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectType {
    Circle,
    Square,
    Cross,
}

impl ObjectType {
    pub const ALL: [ObjectType; 3] = [ObjectType::Circle, ObjectType::Square, ObjectType::Cross];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectType::Circle => "circle",
            ObjectType::Square => "square",
            ObjectType::Cross => "cross",
        }
    }

    pub fn symbol(self) -> char {
        match self {
            ObjectType::Circle => 'o',
            ObjectType::Square => 's',
            ObjectType::Cross => 'x',
        }
    }
}

/// Small set of object types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TypeSet(u8);

impl TypeSet {
    pub fn of(types: &[ObjectType]) -> Self {
        Self(types.iter().fold(0, |m, t| m | 1 << t.index()))
    }

    pub fn contains(self, t: ObjectType) -> bool {
        self.0 & (1 << t.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn intersects(self, other: TypeSet) -> bool {
        self.0 & other.0 != 0
    }

    pub fn iter(self) -> impl Iterator<Item = ObjectType> {
        ObjectType::ALL.into_iter().filter(move |t| self.contains(*t))
    }
}

/// Which types are collected for +1 and which cost −1. Unlisted types give 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scenario {
    target: TypeSet,
    avoid: TypeSet,
}

impl Scenario {
    pub fn new(target: TypeSet, avoid: TypeSet) -> Result<Self, GridError> {
        if target.is_empty() {
            return Err(GridError::InvalidScenario("no target type".into()));
        }
        if target.intersects(avoid) {
            return Err(GridError::InvalidScenario(
                "a type cannot be both target and avoid".into(),
            ));
        }
        Ok(Self { target, avoid })
    }

    /// Scenarios 1–4 of the fact-derivation experiment.
    pub fn preset(n: u8) -> Option<Self> {
        use ObjectType::*;
        let (t, a): (&[ObjectType], &[ObjectType]) = match n {
            1 => (&[Circle], &[Cross]),
            2 => (&[Cross], &[Circle]),
            3 => (&[Square], &[Cross]),
            4 => (&[Cross], &[Square, Circle]),
            _ => return None,
        };
        Some(Self {
            target: TypeSet::of(t),
            avoid: TypeSet::of(a),
        })
    }

    pub fn target(&self) -> TypeSet {
        self.target
    }

    pub fn avoid(&self) -> TypeSet {
        self.avoid
    }

    pub fn reward_for(&self, t: ObjectType) -> i32 {
        if self.target.contains(t) {
            1
        } else if self.avoid.contains(t) {
            -1
        } else {
            0
        }
    }
}

pub type Rgb = [f64; 3];

/// Object and background colors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    object: Rgb,
    background: Rgb,
}

impl Setting {
    pub fn new(object: Rgb, background: Rgb) -> Result<Self, GridError> {
        let in_range = |c: &Rgb| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !in_range(&object) || !in_range(&background) {
            return Err(GridError::InvalidSetting("color outside [0,1]".into()));
        }
        if object == background {
            return Err(GridError::InvalidSetting(
                "object and background colors coincide".into(),
            ));
        }
        Ok(Self { object, background })
    }

    /// Settings 1–4 of the symbolic-abstraction experiment.
    pub fn preset(n: u8) -> Option<Self> {
        const BLACK: Rgb = [0.0, 0.0, 0.0];
        const WHITE: Rgb = [1.0, 1.0, 1.0];
        const RED: Rgb = [1.0, 0.0, 0.0];
        const BLUE: Rgb = [0.0, 0.0, 1.0];
        let (object, background) = match n {
            1 => (BLACK, WHITE),
            2 => (WHITE, BLACK),
            3 => (RED, BLUE),
            4 => (BLUE, RED),
            _ => return None,
        };
        Some(Self { object, background })
    }

    pub fn object(&self) -> Rgb {
        self.object
    }

    pub fn background(&self) -> Rgb {
        self.background
    }

    pub fn inverted(&self) -> Self {
        Self {
            object: self.background,
            background: self.object,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Row and column offset of the move.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
        }
    }
}

pub type Cell = (usize, usize);

/// Full game state. A plain value: stepping returns a new state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridState {
    agent: Cell,
    cells: [[Option<ObjectType>; GRID]; GRID],
    steps: u32,
    initial_targets: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepResult {
    pub reward: i32,
    pub done: bool,
    pub state: GridState,
}

impl GridState {
    /// Fresh random episode: 1–4 objects of every type in distinct cells,
    /// then the agent in a remaining empty cell.
    pub fn reset<R: Rng + ?Sized>(rng: &mut R, scenario: &Scenario) -> Self {
        let mut order: Vec<usize> = (0..GRID * GRID).collect();
        order.shuffle(rng);
        let mut cells = [[None; GRID]; GRID];
        let mut next = order.into_iter();
        for t in ObjectType::ALL {
            let count = rng.gen_range(1..=MAX_PER_TYPE);
            for _ in 0..count {
                let i = next.next().expect("25 cells hold at most 13 entities");
                cells[i / GRID][i % GRID] = Some(t);
            }
        }
        let a = next.next().expect("25 cells hold at most 13 entities");
        let mut s = Self {
            agent: (a / GRID, a % GRID),
            cells,
            steps: 0,
            initial_targets: 0,
        };
        s.initial_targets = s.remaining_targets(scenario);
        s
    }

    /// Builds a state directly. The agent cell must be empty and at least
    /// one target must be present.
    pub fn from_parts(
        agent: Cell,
        cells: [[Option<ObjectType>; GRID]; GRID],
        scenario: &Scenario,
    ) -> Result<Self, GridError> {
        if agent.0 >= GRID || agent.1 >= GRID {
            return Err(GridError::Parse(format!("agent cell {agent:?} off the grid")));
        }
        if cells[agent.0][agent.1].is_some() {
            return Err(GridError::Parse("agent cell holds an object".into()));
        }
        let mut s = Self {
            agent,
            cells,
            steps: 0,
            initial_targets: 0,
        };
        s.initial_targets = s.remaining_targets(scenario);
        if s.initial_targets == 0 {
            return Err(GridError::Parse("no target objects present".into()));
        }
        Ok(s)
    }

    pub fn agent(&self) -> Cell {
        self.agent
    }

    pub fn cells(&self) -> &[[Option<ObjectType>; GRID]; GRID] {
        &self.cells
    }

    pub fn object_at(&self, cell: Cell) -> Option<ObjectType> {
        self.cells[cell.0][cell.1]
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn initial_targets(&self) -> u32 {
        self.initial_targets
    }

    pub fn count(&self, t: ObjectType) -> usize {
        self.objects().filter(|(_, o)| *o == t).count()
    }

    pub fn object_count(&self) -> usize {
        self.objects().count()
    }

    pub fn objects(&self) -> impl Iterator<Item = (Cell, ObjectType)> + '_ {
        (0..GRID).flat_map(move |r| (0..GRID).filter_map(move |c| self.cells[r][c].map(|t| ((r, c), t))))
    }

    pub fn remaining_targets(&self, scenario: &Scenario) -> u32 {
        self.objects().filter(|(_, t)| scenario.target.contains(*t)).count() as u32
    }

    pub fn is_done(&self, scenario: &Scenario) -> bool {
        self.steps >= MAX_STEPS || self.remaining_targets(scenario) == 0
    }

    pub fn step(&self, action: Action, scenario: &Scenario) -> Result<StepResult, GridError> {
        if self.is_done(scenario) {
            return Err(GridError::EpisodeFinished);
        }
        let (dr, dc) = action.delta();
        let clamp = |v: usize, d: isize| (v as isize + d).clamp(0, GRID as isize - 1) as usize;
        let mut next = self.clone();
        next.agent = (clamp(self.agent.0, dr), clamp(self.agent.1, dc));
        next.steps += 1;
        let reward = match next.cells[next.agent.0][next.agent.1].take() {
            Some(t) => scenario.reward_for(t),
            None => 0,
        };
        let done = next.is_done(scenario);
        Ok(StepResult {
            reward,
            done,
            state: next,
        })
    }

    /// Plain-text view: one line per row, `.` empty, `o`/`s`/`x` objects,
    /// `+` agent.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(GRID * (GRID + 1));
        for r in 0..GRID {
            for c in 0..GRID {
                let ch = if self.agent == (r, c) {
                    '+'
                } else {
                    self.cells[r][c].map_or('.', ObjectType::symbol)
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, scenario: &Scenario) -> Result<Self, GridError> {
        let rows: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        if rows.len() != GRID {
            return Err(GridError::Parse(format!("expected {GRID} rows, got {}", rows.len())));
        }
        let mut cells = [[None; GRID]; GRID];
        let mut agent = None;
        for (r, row) in rows.iter().enumerate() {
            let chars: Vec<char> = row.chars().collect();
            if chars.len() != GRID {
                return Err(GridError::Parse(format!("row {r} has {} cells", chars.len())));
            }
            for (c, ch) in chars.into_iter().enumerate() {
                cells[r][c] = match ch {
                    '.' => None,
                    'o' => Some(ObjectType::Circle),
                    's' => Some(ObjectType::Square),
                    'x' => Some(ObjectType::Cross),
                    '+' => {
                        if agent.replace((r, c)).is_some() {
                            return Err(GridError::Parse("more than one agent".into()));
                        }
                        None
                    }
                    other => return Err(GridError::Parse(format!("unknown symbol {other:?}"))),
                };
            }
        }
        let agent = agent.ok_or_else(|| GridError::Parse("no agent".into()))?;
        Self::from_parts(agent, cells, scenario)
    }
}

impl fmt::Display for GridState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Normalization denominator for an episode: targets present at reset.
pub fn max_potential_reward(state: &GridState) -> u32 {
    state.initial_targets
}

/// 50×50 RGB image, channels-last, values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    data: Vec<f64>,
}

impl Observation {
    pub const CHANNELS: usize = 3;
    pub const LEN: usize = IMAGE * IMAGE * Self::CHANNELS;

    pub fn from_data(data: Vec<f64>) -> Result<Self, GridError> {
        if data.len() != Self::LEN {
            return Err(GridError::Parse(format!(
                "observation needs {} values, got {}",
                Self::LEN,
                data.len()
            )));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> Rgb {
        let i = (row * IMAGE + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

fn paint(data: &mut [f64], cell: Cell, mask: &Mask, color: Rgb) {
    for r in 0..CELL {
        for c in 0..CELL {
            if mask[r * CELL + c] == 1 {
                let i = ((cell.0 * CELL + r) * IMAGE + cell.1 * CELL + c) * 3;
                data[i..i + 3].copy_from_slice(&color);
            }
        }
    }
}

/// Paints every object sprite and the agent sprite over the background.
pub fn render(state: &GridState, setting: &Setting) -> Observation {
    let mut data = Vec::with_capacity(Observation::LEN);
    for _ in 0..IMAGE * IMAGE {
        data.extend_from_slice(&setting.background);
    }
    for (cell, t) in state.objects() {
        paint(&mut data, cell, bitmaps::object_mask(t), setting.object);
    }
    paint(&mut data, state.agent, &AGENT_MASK, setting.object);
    Observation { data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s1() -> Scenario {
        Scenario::preset(1).unwrap()
    }

    #[test]
    fn reset_is_deterministic_per_seed() {
        let a = GridState::reset(&mut ChaCha8Rng::seed_from_u64(5), &s1());
        let b = GridState::reset(&mut ChaCha8Rng::seed_from_u64(5), &s1());
        assert_eq!(a, b);
    }

    #[test]
    fn reset_counts_and_agent_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let s = GridState::reset(&mut rng, &s1());
            for t in ObjectType::ALL {
                assert!((1..=4).contains(&s.count(t)));
            }
            assert!(s.object_at(s.agent()).is_none());
            assert_eq!(s.initial_targets() as usize, s.count(ObjectType::Circle));
        }
    }

    #[test]
    fn collecting_target_and_empty_moves() {
        let s = GridState::from_text(".....\n..+o.\n.....\n..x..\n.....", &s1()).unwrap();
        let r = s.step(Action::Right, &s1()).unwrap();
        assert_eq!(r.reward, 1);
        assert!(r.done, "last target collected");
        assert_eq!(r.state.object_at((1, 3)), None);

        let r = s.step(Action::Up, &s1()).unwrap();
        assert_eq!(r.reward, 0);
        assert!(!r.done);
    }

    #[test]
    fn wall_move_costs_a_step() {
        let s = GridState::from_text("+....\n.o...\n.....\n.....\n.....", &s1()).unwrap();
        let r = s.step(Action::Up, &s1()).unwrap();
        assert_eq!(r.state.agent(), (0, 0));
        assert_eq!(r.state.steps(), 1);
        assert_eq!(r.reward, 0);
    }

    #[test]
    fn avoid_object_does_not_end_episode() {
        let s = GridState::from_text("+x...\n.o...\n.....\n.....\n.....", &s1()).unwrap();
        let r = s.step(Action::Right, &s1()).unwrap();
        assert_eq!(r.reward, -1);
        assert!(!r.done);
    }

    #[test]
    fn finished_episode_rejects_steps() {
        let mut s = GridState::from_text("+....\n.o...\n.....\n.....\n.....", &s1()).unwrap();
        for _ in 0..MAX_STEPS {
            s = s.step(Action::Up, &s1()).unwrap().state;
        }
        assert!(s.is_done(&s1()));
        assert_eq!(s.step(Action::Up, &s1()), Err(GridError::EpisodeFinished));
    }

    #[test]
    fn scenario_three_ignores_circles() {
        let sc = Scenario::preset(3).unwrap();
        assert_eq!(sc.reward_for(ObjectType::Circle), 0);
        let s = GridState::from_text("+o...\n.s...\n.....\n.....\n.....", &sc).unwrap();
        let r = s.step(Action::Right, &sc).unwrap();
        assert_eq!(r.reward, 0);
        assert!(!r.done);
    }

    #[test]
    fn max_potential_reward_uses_initial_targets() {
        let sc4 = Scenario::preset(4).unwrap();
        let s = GridState::from_text("+xx..\nss...\noo...\n.....\n.....", &sc4).unwrap();
        assert_eq!(max_potential_reward(&s), 2);
        let after = s.step(Action::Right, &sc4).unwrap().state;
        assert_eq!(max_potential_reward(&after), 2);
        let s1 = GridState::from_text("+ooo.\n.x...\n.....\n.....\n.....", &s1()).unwrap();
        assert_eq!(max_potential_reward(&s1), 3);
    }

    #[test]
    fn invalid_scenarios_and_settings() {
        use ObjectType::*;
        assert!(Scenario::new(TypeSet::of(&[]), TypeSet::of(&[Circle])).is_err());
        assert!(Scenario::new(TypeSet::of(&[Circle]), TypeSet::of(&[Circle])).is_err());
        assert!(Setting::new([0.0; 3], [0.0; 3]).is_err());
        assert!(Setting::new([2.0, 0.0, 0.0], [0.0; 3]).is_err());
    }

    #[test]
    fn agent_only_render_pixel_count() {
        let cells = [[None; GRID]; GRID];
        // from_parts insists on a target, so build the value directly.
        let s = GridState {
            agent: (2, 2),
            cells,
            steps: 0,
            initial_targets: 0,
        };
        let set = Setting::preset(1).unwrap();
        let obs = render(&s, &set);
        let n = (0..IMAGE)
            .flat_map(|r| (0..IMAGE).map(move |c| (r, c)))
            .filter(|&(r, c)| obs.pixel(r, c) == set.object())
            .count();
        assert_eq!(n, bitmaps::pixel_count(&AGENT_MASK));
    }

    #[test]
    fn inverted_settings_invert_images() {
        let s = GridState::reset(&mut ChaCha8Rng::seed_from_u64(3), &s1());
        let a = render(&s, &Setting::preset(1).unwrap());
        let b = render(&s, &Setting::preset(2).unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, 1.0 - y);
        }
    }

    #[test]
    fn text_roundtrip() {
        let s = GridState::reset(&mut ChaCha8Rng::seed_from_u64(9), &s1());
        let back = GridState::from_text(&s.to_text(), &s1()).unwrap();
        assert_eq!(back, s);
    }
}
