//! Tile levels: the 2D grid the generator edits.
//!
//! Storage is row-major with the origin at the top-left, matching the text
//! rendering order. The text format uses one character per tile (`.` empty,
//! `#` wall, `b` bat) and newline-separated rows.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_WIDTH: usize = 16;
pub const DEFAULT_HEIGHT: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TileKind {
    Empty,
    Wall,
    Bat,
}

impl TileKind {
    pub const ALL: [TileKind; 3] = [TileKind::Empty, TileKind::Wall, TileKind::Bat];

    pub fn code(self) -> char {
        match self {
            TileKind::Empty => '.',
            TileKind::Wall => '#',
            TileKind::Bat => 'b',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        match c {
            '.' => Some(TileKind::Empty),
            '#' => Some(TileKind::Wall),
            'b' => Some(TileKind::Bat),
            _ => None,
        }
    }

    /// Channel index in the one-hot state encoding.
    pub fn index(self) -> usize {
        self as usize
    }

    /// Bats sit on walkable floor, so only walls block movement.
    pub fn is_passable(self) -> bool {
        !matches!(self, TileKind::Wall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Position {
    pub row: usize,
    pub col: usize,
}

impl Position {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// Probability of drawing each tile kind when sampling a random level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileProbs {
    pub empty: f64,
    pub wall: f64,
    pub bat: f64,
}

impl Default for TileProbs {
    fn default() -> Self {
        Self {
            empty: 0.6,
            wall: 0.3,
            bat: 0.1,
        }
    }
}

impl TileProbs {
    pub fn new(empty: f64, wall: f64, bat: f64) -> Result<Self> {
        let probs = Self { empty, wall, bat };
        probs.validate()?;
        Ok(probs)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.empty, self.wall, self.bat];
        if all.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::config(format!("tile probabilities must be non-negative, got {all:?}")));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("tile probabilities sum to {sum}, expected 1")));
        }
        Ok(())
    }

    pub fn get(&self, kind: TileKind) -> f64 {
        match kind {
            TileKind::Empty => self.empty,
            TileKind::Wall => self.wall,
            TileKind::Bat => self.bat,
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> TileKind {
        let u: f64 = rng.random();
        if u < self.empty {
            TileKind::Empty
        } else if u < self.empty + self.wall {
            TileKind::Wall
        } else if self.bat > 0.0 {
            TileKind::Bat
        } else {
            // rounding slack when bat probability is zero
            TileKind::Wall
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Level {
    width: usize,
    height: usize,
    tiles: Vec<TileKind>,
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width < 2 || height < 2 {
        return Err(Error::config(format!("level must be at least 2x2, got {width}x{height}")));
    }
    Ok(())
}

impl Level {
    pub fn filled(width: usize, height: usize, kind: TileKind) -> Result<Self> {
        check_dims(width, height)?;
        Ok(Self {
            width,
            height,
            tiles: vec![kind; width * height],
        })
    }

    pub fn from_tiles(width: usize, height: usize, tiles: Vec<TileKind>) -> Result<Self> {
        check_dims(width, height)?;
        if tiles.len() != width * height {
            return Err(Error::Shape {
                context: "level tiles",
                expected: width * height,
                got: tiles.len(),
            });
        }
        Ok(Self { width, height, tiles })
    }

    /// Samples every cell independently from `probs`. Pure in its arguments.
    pub fn random(width: usize, height: usize, seed: u64, probs: &TileProbs) -> Result<Self> {
        check_dims(width, height)?;
        probs.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tiles = (0..width * height).map(|_| probs.sample(&mut rng)).collect();
        Ok(Self { width, height, tiles })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn tiles(&self) -> &[TileKind] {
        &self.tiles
    }

    pub fn contains(&self, pos: Position) -> bool {
        pos.row < self.height && pos.col < self.width
    }

    fn check(&self, pos: Position) -> Result<usize> {
        if self.contains(pos) {
            Ok(pos.row * self.width + pos.col)
        } else {
            Err(Error::OutOfBounds {
                row: pos.row,
                col: pos.col,
                width: self.width,
                height: self.height,
            })
        }
    }

    pub fn get(&self, pos: Position) -> Result<TileKind> {
        self.check(pos).map(|i| self.tiles[i])
    }

    /// Returns a copy of this level with one cell replaced.
    pub fn with_tile(&self, pos: Position, kind: TileKind) -> Result<Level> {
        let mut next = self.clone();
        next.set(pos, kind)?;
        Ok(next)
    }

    /// In-place write; returns the previous tile.
    pub fn set(&mut self, pos: Position, kind: TileKind) -> Result<TileKind> {
        let i = self.check(pos)?;
        Ok(std::mem::replace(&mut self.tiles[i], kind))
    }

    pub fn count(&self, kind: TileKind) -> usize {
        self.tiles.iter().filter(|&&t| t == kind).count()
    }

    /// Flattened one-hot encoding, three channels per cell in row-major order.
    pub fn one_hot(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.tiles.len() * 3];
        self.write_one_hot(&mut out);
        out
    }

    pub fn write_one_hot(&self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.tiles.len() * 3);
        out.fill(0.0);
        for (i, t) in self.tiles.iter().enumerate() {
            out[i * 3 + t.index()] = 1.0;
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::with_capacity((self.width + 1) * self.height);
        for (r, row) in self.tiles.chunks(self.width).enumerate() {
            if r > 0 {
                s.push('\n');
            }
            s.extend(row.iter().map(|t| t.code()));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Level> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        let mut width = None;
        let mut tiles = Vec::new();
        let mut height = 0;
        for (row, line) in body.split('\n').enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            let mut cols = 0;
            for (col, c) in line.chars().enumerate() {
                let kind = TileKind::from_code(c).ok_or_else(|| Error::Parse {
                    row,
                    col,
                    msg: format!("unknown tile code {c:?}"),
                })?;
                tiles.push(kind);
                cols += 1;
            }
            match width {
                None => width = Some(cols),
                Some(w) if w != cols => {
                    return Err(Error::Parse {
                        row,
                        col: cols.min(w),
                        msg: format!("ragged row: expected {w} tiles, found {cols}"),
                    })
                }
                _ => {}
            }
            height += 1;
        }
        let width = width.unwrap_or(0);
        if width < 2 || height < 2 {
            return Err(Error::Parse {
                row: 0,
                col: 0,
                msg: format!("level must be at least 2x2, got {width}x{height}"),
            });
        }
        Ok(Level { width, height, tiles })
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Level::parse(s)
    }
}
