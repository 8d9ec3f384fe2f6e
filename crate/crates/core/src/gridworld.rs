//! Slippery two-goal gridworld compiled to a [`TabularMdp`].
//!
//! Cells are addressed `(x, y)` with `x` growing to the right and `y`
//! growing downwards. Each open cell is a state (row-major order), followed
//! by one absorbing zero-reward sink when the grid has goals. A goal state
//! pays its reward on every action and then moves to the sink, so the goal
//! reward is collected exactly once and rewards stay a deterministic
//! function of `(s, a)`.
//!
//! Movement: the intended direction with probability `1 - slip`, each of the
//! two perpendicular directions with `slip / 2`. Bumping into the border or
//! a blocked cell leaves the agent in place.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{Policy, TabularMdp, ValidationReport};

pub type Cell = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    /// The two slip directions, counter-clockwise first.
    pub fn perpendicular(self) -> [Action; 2] {
        match self {
            Action::Up => [Action::Left, Action::Right],
            Action::Down => [Action::Right, Action::Left],
            Action::Left => [Action::Down, Action::Up],
            Action::Right => [Action::Up, Action::Down],
        }
    }

    pub fn mirrored(self) -> Action {
        match self {
            Action::Left => Action::Right,
            Action::Right => Action::Left,
            other => other,
        }
    }

    pub fn arrow(self) -> char {
        match self {
            Action::Up => '^',
            Action::Down => 'v',
            Action::Left => '<',
            Action::Right => '>',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub cell: Cell,
    pub reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StartCell {
    pub cell: Cell,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub goal_cells: Vec<Goal>,
    #[serde(default)]
    pub blocked_cells: Vec<Cell>,
    pub slip: f64,
    pub start_dist: Vec<StartCell>,
    pub gamma: f64,
}

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid must be at least 1x1")]
    Empty,
    #[error("cell {0:?} is outside the {1}x{2} grid")]
    OutOfBounds(Cell, usize, usize),
    #[error("cell {0:?} is blocked")]
    Blocked(Cell),
    #[error("cell {0:?} is listed as a goal twice")]
    DuplicateGoal(Cell),
    #[error("slip {0} not in [0, 1)")]
    Slip(f64),
    #[error("goal reward {0} must be finite and nonnegative")]
    GoalReward(f64),
    #[error("start distribution must have nonnegative weights with a positive sum")]
    StartDist,
    #[error(transparent)]
    Mdp(#[from] ValidationReport),
    #[error("malformed grid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Two unit-reward goals at the ends of the middle row of a 5x3 grid, with
/// the cells beside the centre blocked so each goal can be reached over the
/// top or the bottom. All start mass is on the centre cell.
///
/// ```text
/// . . . . .
/// G # S # G
/// . . . . .
/// ```
pub fn default_paper_grid() -> GridSpec {
    GridSpec {
        width: 5,
        height: 3,
        goal_cells: vec![
            Goal {
                cell: (0, 1),
                reward: 1.0,
            },
            Goal {
                cell: (4, 1),
                reward: 1.0,
            },
        ],
        blocked_cells: vec![(1, 1), (3, 1)],
        slip: 0.3,
        start_dist: vec![StartCell {
            cell: (2, 1),
            weight: 1.0,
        }],
        gamma: 0.95,
    }
}

impl GridSpec {
    pub fn from_json(text: &str) -> Result<Self, GridError> {
        let spec: GridSpec = serde_json::from_str(text)?;
        spec.check()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grid serialization cannot fail")
    }

    fn in_bounds(&self, cell: Cell) -> bool {
        cell.0 < self.width && cell.1 < self.height
    }

    fn is_blocked(&self, cell: Cell) -> bool {
        self.blocked_cells.contains(&cell)
    }

    pub fn check(&self) -> Result<(), GridError> {
        if self.width == 0 || self.height == 0 {
            return Err(GridError::Empty);
        }
        if !(0.0..1.0).contains(&self.slip) {
            return Err(GridError::Slip(self.slip));
        }
        for &b in &self.blocked_cells {
            if !self.in_bounds(b) {
                return Err(GridError::OutOfBounds(b, self.width, self.height));
            }
        }
        let mut seen = Vec::new();
        for g in &self.goal_cells {
            if !self.in_bounds(g.cell) {
                return Err(GridError::OutOfBounds(g.cell, self.width, self.height));
            }
            if self.is_blocked(g.cell) {
                return Err(GridError::Blocked(g.cell));
            }
            if seen.contains(&g.cell) {
                return Err(GridError::DuplicateGoal(g.cell));
            }
            if !(g.reward >= 0.0 && g.reward.is_finite()) {
                return Err(GridError::GoalReward(g.reward));
            }
            seen.push(g.cell);
        }
        let mut total = 0.0;
        for st in &self.start_dist {
            if !self.in_bounds(st.cell) {
                return Err(GridError::OutOfBounds(st.cell, self.width, self.height));
            }
            if self.is_blocked(st.cell) {
                return Err(GridError::Blocked(st.cell));
            }
            if !(st.weight >= 0.0 && st.weight.is_finite()) {
                return Err(GridError::StartDist);
            }
            total += st.weight;
        }
        if total <= 0.0 {
            return Err(GridError::StartDist);
        }
        Ok(())
    }

    /// Left-right reflection of the whole layout.
    pub fn mirrored(&self) -> GridSpec {
        let flip = |(x, y): Cell| (self.width - 1 - x, y);
        GridSpec {
            width: self.width,
            height: self.height,
            goal_cells: self
                .goal_cells
                .iter()
                .map(|g| Goal {
                    cell: flip(g.cell),
                    reward: g.reward,
                })
                .collect(),
            blocked_cells: self.blocked_cells.iter().copied().map(flip).collect(),
            slip: self.slip,
            start_dist: self
                .start_dist
                .iter()
                .map(|s| StartCell {
                    cell: flip(s.cell),
                    weight: s.weight,
                })
                .collect(),
            gamma: self.gamma,
        }
    }
}

/// State numbering of a compiled grid.
#[derive(Debug, Clone)]
pub struct GridIndex {
    cells: Vec<Cell>,
    by_cell: HashMap<Cell, usize>,
    sink: Option<usize>,
}

impl GridIndex {
    pub fn new(spec: &GridSpec) -> Self {
        let mut cells = Vec::new();
        for y in 0..spec.height {
            for x in 0..spec.width {
                if !spec.is_blocked((x, y)) {
                    cells.push((x, y));
                }
            }
        }
        let by_cell = cells.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let sink = (!spec.goal_cells.is_empty()).then_some(cells.len());
        GridIndex {
            cells,
            by_cell,
            sink,
        }
    }

    pub fn num_states(&self) -> usize {
        self.cells.len() + self.sink.is_some() as usize
    }

    pub fn state_of(&self, cell: Cell) -> Option<usize> {
        self.by_cell.get(&cell).copied()
    }

    /// `None` for the sink.
    pub fn cell_of(&self, state: usize) -> Option<Cell> {
        self.cells.get(state).copied()
    }

    pub fn sink(&self) -> Option<usize> {
        self.sink
    }
}

fn step(spec: &GridSpec, (x, y): Cell, action: Action) -> Cell {
    let target = match action {
        Action::Up => y.checked_sub(1).map(|y| (x, y)),
        Action::Down => (y + 1 < spec.height).then_some((x, y + 1)),
        Action::Left => x.checked_sub(1).map(|x| (x, y)),
        Action::Right => (x + 1 < spec.width).then_some((x + 1, y)),
    };
    match target {
        Some(c) if !spec.is_blocked(c) => c,
        _ => (x, y),
    }
}

pub fn compile(spec: &GridSpec) -> Result<TabularMdp, GridError> {
    spec.check()?;
    let index = GridIndex::new(spec);
    let ns = index.num_states();
    let na = Action::ALL.len();
    let goal_reward: HashMap<Cell, f64> = spec.goal_cells.iter().map(|g| (g.cell, g.reward)).collect();
    let r_max = spec
        .goal_cells
        .iter()
        .map(|g| g.reward)
        .fold(0.0, f64::max)
        .max(1.0);

    let mut rewards = vec![vec![0.0; na]; ns];
    let mut transitions = vec![vec![vec![0.0; ns]; na]; ns];
    let side = spec.slip / 2.0;
    let intended = 1.0 - side - side;
    for (s, &cell) in index.cells.iter().enumerate() {
        if let Some(&reward) = goal_reward.get(&cell) {
            let sink = index.sink.expect("grids with goals have a sink");
            for a in 0..na {
                rewards[s][a] = reward;
                transitions[s][a][sink] = 1.0;
            }
            continue;
        }
        for action in Action::ALL {
            let row = &mut transitions[s][action.index()];
            let [left, right] = action.perpendicular();
            for (dir, mass) in [(action, intended), (left, side), (right, side)] {
                if mass > 0.0 {
                    let target = index.by_cell[&step(spec, cell, dir)];
                    row[target] += mass;
                }
            }
        }
    }
    if let Some(sink) = index.sink {
        for a in 0..na {
            transitions[sink][a][sink] = 1.0;
        }
    }

    let total: f64 = spec.start_dist.iter().map(|s| s.weight).sum();
    let mut initial_dist = vec![0.0; ns];
    for st in &spec.start_dist {
        initial_dist[index.by_cell[&st.cell]] += st.weight / total;
    }
    Ok(TabularMdp::new(spec.gamma, r_max, rewards, transitions, initial_dist)?)
}

/// ASCII map: `G` goal, `#` blocked, `S` start, `.` open.
pub fn render_grid(spec: &GridSpec) -> String {
    render_with(spec, |_, _| '.')
}

/// ASCII map with an arrow per open cell for the action the policy takes.
pub fn render_policy(spec: &GridSpec, policy: &Policy) -> String {
    let index = GridIndex::new(spec);
    render_with(spec, |cell, _| {
        let s = index.state_of(cell).expect("open cell");
        Action::ALL[policy.action[s]].arrow()
    })
}

fn render_with(spec: &GridSpec, open: impl Fn(Cell, bool) -> char) -> String {
    let mut out = String::new();
    for y in 0..spec.height {
        let row: Vec<String> = (0..spec.width)
            .map(|x| {
                let cell = (x, y);
                let start = spec.start_dist.iter().any(|s| s.cell == cell && s.weight > 0.0);
                let c = if spec.is_blocked(cell) {
                    '#'
                } else if spec.goal_cells.iter().any(|g| g.cell == cell) {
                    'G'
                } else {
                    let glyph = open(cell, start);
                    if glyph == '.' && start {
                        'S'
                    } else {
                        glyph
                    }
                };
                c.to_string()
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{exact_value_iteration, greedy_policy};

    fn open_grid(w: usize, h: usize, slip: f64) -> GridSpec {
        GridSpec {
            width: w,
            height: h,
            goal_cells: vec![],
            blocked_cells: vec![],
            slip,
            start_dist: vec![StartCell {
                cell: (0, 0),
                weight: 1.0,
            }],
            gamma: 0.9,
        }
    }

    #[test]
    fn one_by_one_without_goals() {
        let mdp = compile(&open_grid(1, 1, 0.3)).unwrap();
        assert_eq!(mdp.num_states, 1);
        assert!(mdp.rewards[0].iter().all(|&r| r == 0.0));
        assert!(mdp.transitions[0].iter().all(|row| row == &vec![1.0]));
    }

    #[test]
    fn no_slip_moves_deterministically() {
        let spec = open_grid(3, 3, 0.0);
        let mdp = compile(&spec).unwrap();
        let index = GridIndex::new(&spec);
        let centre = index.state_of((1, 1)).unwrap();
        let right = index.state_of((2, 1)).unwrap();
        let row = mdp.transition(centre, Action::Right.index());
        assert_eq!(row[right], 1.0);
        assert_eq!(row.iter().filter(|&&p| p > 0.0).count(), 1);
    }

    #[test]
    fn slip_row_at_the_centre() {
        let spec = open_grid(3, 3, 0.3);
        let mdp = compile(&spec).unwrap();
        let ix = GridIndex::new(&spec);
        let c = ix.state_of((1, 1)).unwrap();
        let row = mdp.transition(c, Action::Up.index());
        assert!((row[ix.state_of((1, 0)).unwrap()] - 0.7).abs() < 1e-15);
        assert_eq!(row[ix.state_of((0, 1)).unwrap()], 0.15);
        assert_eq!(row[ix.state_of((2, 1)).unwrap()], 0.15);
    }

    #[test]
    fn walls_and_blocks_keep_agent_in_place() {
        let spec = default_paper_grid();
        let mdp = compile(&spec).unwrap();
        let ix = GridIndex::new(&spec);
        let start = ix.state_of((2, 1)).unwrap();
        // Left from the start hits the block: stays with 0.7, slips up/down.
        let row = mdp.transition(start, Action::Left.index());
        assert!((row[start] - 0.7).abs() < 1e-15);
        assert_eq!(row[ix.state_of((2, 0)).unwrap()], 0.15);
        assert_eq!(row[ix.state_of((2, 2)).unwrap()], 0.15);
        // Up from the top-left corner: stays (0.7 + 0.15 from the left slip).
        let corner = ix.state_of((0, 0)).unwrap();
        let row = mdp.transition(corner, Action::Up.index());
        assert!((row[corner] - 0.85).abs() < 1e-15);
    }

    #[test]
    fn goals_pay_once_then_sink() {
        let spec = default_paper_grid();
        let mdp = compile(&spec).unwrap();
        let ix = GridIndex::new(&spec);
        let sink = ix.sink().unwrap();
        assert_eq!(mdp.num_states, 14);
        for g in &spec.goal_cells {
            let s = ix.state_of(g.cell).unwrap();
            for a in 0..4 {
                assert_eq!(mdp.reward(s, a), 1.0);
                assert_eq!(mdp.transition(s, a)[sink], 1.0);
            }
        }
        for a in 0..4 {
            assert_eq!(mdp.reward(sink, a), 0.0);
            assert_eq!(mdp.transition(sink, a)[sink], 1.0);
        }
        let q = exact_value_iteration(&mdp, 1e-12);
        assert!((q.get(ix.state_of((0, 1)).unwrap(), 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn default_grid_compiles_and_rows_are_exact() {
        let mdp = compile(&default_paper_grid()).unwrap();
        for row in mdp.transitions.iter().flatten() {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= f64::EPSILON, "{sum}");
        }
        assert_eq!(mdp.initial_dist.iter().filter(|&&p| p > 0.0).count(), 1);
    }

    #[test]
    fn mirror_symmetry_of_optimal_values() {
        let spec = GridSpec {
            goal_cells: vec![
                Goal {
                    cell: (0, 1),
                    reward: 1.0,
                },
                Goal {
                    cell: (4, 2),
                    reward: 0.6,
                },
            ],
            blocked_cells: vec![(1, 1), (3, 0)],
            ..default_paper_grid()
        };
        let mirror = spec.mirrored();
        let (m1, m2) = (compile(&spec).unwrap(), compile(&mirror).unwrap());
        let (q1, q2) = (exact_value_iteration(&m1, 1e-12), exact_value_iteration(&m2, 1e-12));
        let (i1, i2) = (GridIndex::new(&spec), GridIndex::new(&mirror));
        for s in 0..i1.num_states() {
            let s2 = match i1.cell_of(s) {
                Some((x, y)) => i2.state_of((spec.width - 1 - x, y)).unwrap(),
                None => i2.sink().unwrap(),
            };
            for a in Action::ALL {
                let diff = (q1.get(s, a.index()) - q2.get(s2, a.mirrored().index())).abs();
                assert!(diff < 1e-9, "state {s} action {a:?}: {diff}");
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = default_paper_grid();
        spec.goal_cells[0].cell = (1, 1);
        assert!(matches!(compile(&spec), Err(GridError::Blocked(_))));
        let mut spec = default_paper_grid();
        spec.slip = 1.0;
        assert!(matches!(compile(&spec), Err(GridError::Slip(_))));
        let mut spec = default_paper_grid();
        spec.start_dist[0].cell = (9, 9);
        assert!(matches!(compile(&spec), Err(GridError::OutOfBounds(..))));
        let mut spec = default_paper_grid();
        spec.gamma = 1.0;
        assert!(matches!(compile(&spec), Err(GridError::Mdp(_))));
    }

    #[test]
    fn json_roundtrip() {
        let spec = default_paper_grid();
        assert_eq!(GridSpec::from_json(&spec.to_json()).unwrap(), spec);
    }

    #[test]
    fn ascii_rendering() {
        let spec = default_paper_grid();
        assert_eq!(render_grid(&spec), ". . . . .\nG # S # G\n. . . . .\n");
        let mdp = compile(&spec).unwrap();
        let policy = greedy_policy(&exact_value_iteration(&mdp, 1e-10));
        let art = render_policy(&spec, &policy);
        assert_eq!(art.lines().count(), 3);
        assert!(art.lines().nth(1).unwrap().starts_with("G # "));
    }
}
