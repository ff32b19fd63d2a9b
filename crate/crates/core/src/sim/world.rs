use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimError;

pub const UNREACHABLE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::N, Heading::E, Heading::S, Heading::W];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i % 4]
    }

    pub fn left(self) -> Self {
        Self::from_index(self.index() + 3)
    }

    pub fn right(self) -> Self {
        Self::from_index(self.index() + 1)
    }

    /// (row, col) offset of one step.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Heading::N => (-1, 0),
            Heading::E => (0, 1),
            Heading::S => (1, 0),
            Heading::W => (0, -1),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Heading::N => "N",
            Heading::E => "E",
            Heading::S => "S",
            Heading::W => "W",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "N" => Some(Heading::N),
            "E" => Some(Heading::E),
            "S" => Some(Heading::S),
            "W" => Some(Heading::W),
            _ => None,
        }
    }
}

/// Square grid with walls, one sound source and its geodesic field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridWorld {
    size: usize,
    walls: Vec<bool>,
    source: Cell,
    pub sound_id: usize,
    geodesic: Vec<u32>,
}

impl GridWorld {
    /// Builds a world from an explicit wall bitmap (row-major).
    pub fn from_walls(size: usize, walls: Vec<bool>, source: Cell) -> Result<Self, SimError> {
        if size == 0 || walls.len() != size * size {
            return Err(SimError::Config(format!("wall bitmap of {} cells for size {size}", walls.len())));
        }
        if source.row >= size || source.col >= size || walls[source.row * size + source.col] {
            return Err(SimError::Config(format!("source {source:?} is not a free cell")));
        }
        let mut w = Self { size, walls, source, sound_id: 0, geodesic: Vec::new() };
        w.geodesic = w.bfs_from(source);
        Ok(w)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn source(&self) -> Cell {
        self.source
    }

    pub fn walls(&self) -> &[bool] {
        &self.walls
    }

    pub fn in_bounds(&self, row: isize, col: isize) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.size && (col as usize) < self.size
    }

    /// Out-of-bounds cells count as walls.
    pub fn is_wall(&self, row: isize, col: isize) -> bool {
        !self.in_bounds(row, col) || self.walls[row as usize * self.size + col as usize]
    }

    pub fn is_free(&self, c: Cell) -> bool {
        !self.is_wall(c.row as isize, c.col as isize)
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        (0..self.size * self.size)
            .filter(|&i| !self.walls[i])
            .map(|i| Cell::new(i / self.size, i % self.size))
            .collect()
    }

    /// Neighbor of `c` one step along `h`, if free.
    pub fn step_from(&self, c: Cell, h: Heading) -> Option<Cell> {
        let (dr, dc) = h.delta();
        let (r, k) = (c.row as isize + dr, c.col as isize + dc);
        (!self.is_wall(r, k)).then(|| Cell::new(r as usize, k as usize))
    }

    pub fn geodesic(&self, c: Cell) -> u32 {
        self.geodesic[c.row * self.size + c.col]
    }

    pub fn geodesic_field(&self) -> &[u32] {
        &self.geodesic
    }

    /// First move along a shortest path to the source (ties: N, E, S, W order).
    pub fn first_step_direction(&self, c: Cell) -> Option<Heading> {
        let d = self.geodesic(c);
        if d == 0 || d == UNREACHABLE {
            return None;
        }
        Heading::ALL.into_iter().find(|&h| self.step_from(c, h).is_some_and(|n| self.geodesic(n) == d - 1))
    }

    fn bfs_from(&self, start: Cell) -> Vec<u32> {
        let mut dist = vec![UNREACHABLE; self.size * self.size];
        let mut queue = VecDeque::new();
        dist[start.row * self.size + start.col] = 0;
        queue.push_back(start);
        while let Some(c) = queue.pop_front() {
            let d = dist[c.row * self.size + c.col];
            for h in Heading::ALL {
                if let Some(n) = self.step_from(c, h) {
                    let slot = &mut dist[n.row * self.size + n.col];
                    if *slot == UNREACHABLE {
                        *slot = d + 1;
                        queue.push_back(n);
                    }
                }
            }
        }
        dist
    }

    /// Plain-text snapshot: `#` wall, `.` free, `S` source; one row per line.
    pub fn to_snapshot(&self) -> String {
        let mut out = String::new();
        for r in 0..self.size {
            for c in 0..self.size {
                let ch = if Cell::new(r, c) == self.source {
                    'S'
                } else if self.walls[r * self.size + c] {
                    '#'
                } else {
                    '.'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        let _ = writeln!(out, "sound {}", self.sound_id);
        out
    }

    pub fn from_snapshot(text: &str) -> Result<Self, SimError> {
        let mut rows: Vec<&str> = Vec::new();
        let mut sound_id = 0;
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("sound ") {
                sound_id = rest.trim().parse().map_err(|_| SimError::Parse(format!("bad sound id `{rest}`")))?;
            } else if !line.is_empty() {
                rows.push(line);
            }
        }
        let size = rows.len();
        if size == 0 {
            return Err(SimError::Parse("empty snapshot".into()));
        }
        let mut walls = Vec::with_capacity(size * size);
        let mut source = None;
        for (r, line) in rows.iter().enumerate() {
            if line.chars().count() != size {
                return Err(SimError::Parse(format!("row {r} has {} cells, expected {size}", line.chars().count())));
            }
            for (c, ch) in line.chars().enumerate() {
                match ch {
                    '#' => walls.push(true),
                    '.' => walls.push(false),
                    'S' => {
                        if source.replace(Cell::new(r, c)).is_some() {
                            return Err(SimError::Parse("more than one source".into()));
                        }
                        walls.push(false);
                    }
                    other => return Err(SimError::Parse(format!("unexpected `{other}` at row {r}"))),
                }
            }
        }
        let source = source.ok_or_else(|| SimError::Parse("no source cell".into()))?;
        let mut w = Self::from_walls(size, walls, source)?;
        w.sound_id = sound_id;
        Ok(w)
    }
}

/// Random walls at `wall_density`, pruned until every free cell is reachable;
/// the source is placed uniformly among free cells. Pure in `seed`.
pub fn world_generate(seed: u64, size: usize, wall_density: f32) -> Result<GridWorld, SimError> {
    if size < 4 {
        return Err(SimError::Config(format!("world size {size} is below 4")));
    }
    if !(0.0..=0.4).contains(&wall_density) {
        return Err(SimError::Config(format!("wall density {wall_density} outside [0, 0.4]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size * size;
    let n_walls = (wall_density * n as f32).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut walls = vec![false; n];
    for &i in &order[..n_walls] {
        walls[i] = true;
    }

    let neighbors = |i: usize| {
        let (r, c) = ((i / size) as isize, (i % size) as isize);
        [(r - 1, c), (r, c + 1), (r + 1, c), (r, c - 1)]
            .into_iter()
            .filter(move |&(a, b)| a >= 0 && b >= 0 && (a as usize) < size && (b as usize) < size)
            .map(move |(a, b)| a as usize * size + b as usize)
    };
    loop {
        let start = walls.iter().position(|w| !w).expect("density <= 0.4 leaves free cells");
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            for j in neighbors(i) {
                if !walls[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        let free = walls.iter().filter(|w| !**w).count();
        if seen.iter().filter(|s| **s).count() == free {
            break;
        }
        // open one wall on the frontier of the reached region
        let frontier: Vec<usize> = (0..n).filter(|&i| walls[i] && neighbors(i).any(|j| seen[j])).collect();
        let pick = frontier[rng.random_range(0..frontier.len())];
        walls[pick] = false;
    }

    let free: Vec<usize> = (0..n).filter(|&i| !walls[i]).collect();
    let s = free[rng.random_range(0..free.len())];
    GridWorld::from_walls(size, walls, Cell::new(s / size, s % size))
}
