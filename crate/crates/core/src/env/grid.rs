use serde::{Deserialize, Serialize};

pub const NUM_ACTIONS: usize = 5;

/// Grid move. Index order is the action index used by every network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] =
        [Action::Up, Action::Down, Action::Left, Action::Right, Action::Stay];

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn delta(self) -> (i32, i32) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Stay => (0, 0),
        }
    }
}

/// Cell coordinate; `x` grows to the right, `y` grows downward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub x: i32,
    pub y: i32,
}

impl Pos {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn step(self, action: Action) -> Pos {
        let (dx, dy) = action.delta();
        Pos::new(self.x + dx, self.y + dy)
    }

    pub fn offset(self, dx: i32, dy: i32) -> Pos {
        Pos::new(self.x + dx, self.y + dy)
    }

    pub fn manhattan(self, other: Pos) -> i32 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }

    pub fn neighbours(self) -> [Pos; 4] {
        [self.offset(0, -1), self.offset(0, 1), self.offset(-1, 0), self.offset(1, 0)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bounds {
    pub width: i32,
    pub height: i32,
}

impl Bounds {
    pub fn contains(&self, p: Pos) -> bool {
        p.x >= 0 && p.y >= 0 && p.x < self.width && p.y < self.height
    }

    /// Position scaled to `[0, 1]` on each axis.
    pub fn normalized(&self, p: Pos) -> [f64; 2] {
        [
            p.x as f64 / (self.width - 1).max(1) as f64,
            p.y as f64 / (self.height - 1).max(1) as f64,
        ]
    }

    /// Displacement `to - from` scaled like [`Bounds::normalized`].
    pub fn vector(&self, from: Pos, to: Pos) -> [f64; 2] {
        [
            (to.x - from.x) as f64 / (self.width - 1).max(1) as f64,
            (to.y - from.y) as f64 / (self.height - 1).max(1) as f64,
        ]
    }

    pub fn cells(&self) -> impl Iterator<Item = Pos> + '_ {
        (0..self.height).flat_map(move |y| (0..self.width).map(move |x| Pos::new(x, y)))
    }
}

/// Offsets of a `(2r+1) x (2r+1)` window in row-major order, optionally
/// without the centre cell.
pub fn window(radius: i32, skip_centre: bool) -> Vec<(i32, i32)> {
    let mut out = Vec::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if skip_centre && dx == 0 && dy == 0 {
                continue;
            }
            out.push((dx, dy));
        }
    }
    out
}
