//! Tile grids, domain definitions and the observation crop.
//!
//! A [`TileGrid`] is a plain row-major array of [`TileType`]s. It does not know
//! which domain it belongs to; the [`DomainSpec`] that created it is passed
//! alongside wherever the alphabet matters (editing, one-hot encoding, text I/O).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TileType {
    Floor,
    Wall,
    Empty,
    Player,
    Key,
    Door,
    Enemy,
    Crate,
    Target,
}

impl TileType {
    pub fn name(self) -> &'static str {
        match self {
            TileType::Floor => "floor",
            TileType::Wall => "wall",
            TileType::Empty => "empty",
            TileType::Player => "player",
            TileType::Key => "key",
            TileType::Door => "door",
            TileType::Enemy => "enemy",
            TileType::Crate => "crate",
            TileType::Target => "target",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Binary,
    Zelda,
    Sokoban,
}

const BINARY_TILES: &[TileType] = &[TileType::Floor, TileType::Wall];
const ZELDA_TILES: &[TileType] = &[
    TileType::Empty,
    TileType::Wall,
    TileType::Player,
    TileType::Key,
    TileType::Door,
    TileType::Enemy,
];
const SOKOBAN_TILES: &[TileType] = &[
    TileType::Empty,
    TileType::Wall,
    TileType::Player,
    TileType::Crate,
    TileType::Target,
];

pub const BINARY_METRICS: &[&str] = &["regions", "path_length"];
pub const ZELDA_METRICS: &[&str] = &[
    "player_count",
    "key_count",
    "door_count",
    "enemy_count",
    "nearest_enemy",
    "path_length",
];
pub const SOKOBAN_METRICS: &[&str] = &[
    "player_count",
    "crate_count",
    "target_count",
    "solution_length",
];

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Binary, Domain::Zelda, Domain::Sokoban];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Binary => "binary",
            Domain::Zelda => "zelda",
            Domain::Sokoban => "sokoban",
        }
    }

    pub fn alphabet(self) -> &'static [TileType] {
        match self {
            Domain::Binary => BINARY_TILES,
            Domain::Zelda => ZELDA_TILES,
            Domain::Sokoban => SOKOBAN_TILES,
        }
    }

    /// ASCII glyphs, index-aligned with [`Domain::alphabet`].
    pub fn glyphs(self) -> &'static [char] {
        match self {
            Domain::Binary => &['.', '#'],
            Domain::Zelda => &['.', '#', 'P', 'K', 'D', 'E'],
            Domain::Sokoban => &['.', '#', 'P', 'C', 'T'],
        }
    }

    /// Tile used for cells outside the grid when cropping.
    pub fn pad_tile(self) -> TileType {
        TileType::Wall
    }

    /// (height, width)
    pub fn default_size(self) -> (usize, usize) {
        match self {
            Domain::Binary => (14, 14),
            Domain::Zelda => (7, 11),
            Domain::Sokoban => (5, 5),
        }
    }

    pub fn metric_names(self) -> &'static [&'static str] {
        match self {
            Domain::Binary => BINARY_METRICS,
            Domain::Zelda => ZELDA_METRICS,
            Domain::Sokoban => SOKOBAN_METRICS,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Domain::Binary),
            "zelda" => Ok(Domain::Zelda),
            "sokoban" => Ok(Domain::Sokoban),
            other => Err(Error::Config(format!("unknown domain `{other}`"))),
        }
    }
}

/// A domain at a concrete map size, with the per-metric target ranges that size implies.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain: Domain,
    pub height: usize,
    pub width: usize,
    pub metric_bounds: Vec<(i64, i64)>,
}

impl DomainSpec {
    pub fn new(domain: Domain) -> Self {
        let (h, w) = domain.default_size();
        Self::with_size(domain, h, w).expect("default sizes are valid")
    }

    pub fn with_size(domain: Domain, height: usize, width: usize) -> Result<Self> {
        if height < 3 || width < 3 {
            return Err(Error::Config(format!(
                "map must be at least 3x3, got {height}x{width}"
            )));
        }
        let cells = (height * width) as i64;
        // Longest corridor estimate: a zig-zag that uses every other column plus turns.
        // ceil(W/2 + 1) * H
        let zigzag = ((width as i64 + 1) / 2 + 1) * height as i64;
        let metric_bounds = match domain {
            Domain::Binary => vec![(0, (cells + 1) / 2), (0, zigzag)],
            Domain::Zelda => vec![
                (0, cells),
                (0, cells),
                (0, cells),
                (0, cells),
                (0, zigzag),
                (0, 2 * zigzag),
            ],
            Domain::Sokoban => vec![(0, cells), (0, cells), (0, cells), (0, 2 * cells)],
        };
        Ok(Self {
            domain,
            height,
            width,
            metric_bounds,
        })
    }

    pub fn alphabet(&self) -> &'static [TileType] {
        self.domain.alphabet()
    }

    pub fn metric_names(&self) -> &'static [&'static str] {
        self.domain.metric_names()
    }

    pub fn metric_index(&self, name: &str) -> Option<usize> {
        self.metric_names().iter().position(|m| *m == name)
    }

    pub fn bounds_of(&self, name: &str) -> Option<(i64, i64)> {
        self.metric_index(name).map(|i| self.metric_bounds[i])
    }

    pub fn tile_index(&self, tile: TileType) -> Option<usize> {
        self.alphabet().iter().position(|t| *t == tile)
    }

    pub fn cell_count(&self) -> usize {
        self.height * self.width
    }

    /// Every cell of `grid` is in the alphabet and the shape matches.
    pub fn admits(&self, grid: &TileGrid) -> bool {
        grid.height == self.height
            && grid.width == self.width
            && grid.cells.iter().all(|t| self.tile_index(*t).is_some())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileGrid {
    height: usize,
    width: usize,
    cells: Vec<TileType>,
}

impl TileGrid {
    pub fn filled(height: usize, width: usize, tile: TileType) -> Result<Self> {
        Self::from_cells(height, width, vec![tile; height * width])
    }

    pub fn from_cells(height: usize, width: usize, cells: Vec<TileType>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "grid must be non-empty, got {height}x{width}"
            )));
        }
        if cells.len() != height * width {
            return Err(Error::Config(format!(
                "{} cells do not fill a {height}x{width} grid",
                cells.len()
            )));
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[TileType] {
        &self.cells
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx / self.width, idx % self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> Option<TileType> {
        (row < self.height && col < self.width).then(|| self.cells[self.index(row, col)])
    }

    pub fn at(&self, idx: usize) -> TileType {
        self.cells[idx]
    }

    /// In-place write; returns whether the cell value changed.
    pub fn set(&mut self, row: usize, col: usize, tile: TileType) -> Result<bool> {
        if row >= self.height || col >= self.width {
            return Err(Error::OutOfBounds {
                row,
                col,
                height: self.height,
                width: self.width,
            });
        }
        let idx = self.index(row, col);
        let changed = self.cells[idx] != tile;
        self.cells[idx] = tile;
        Ok(changed)
    }

    /// 4-neighbourhood of a cell index.
    pub fn neighbors(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let (r, c) = self.coords(idx);
        let w = self.width;
        let up = (r > 0).then(|| idx - w);
        let down = (r + 1 < self.height).then(|| idx + w);
        let left = (c > 0).then(|| idx - 1);
        let right = (c + 1 < w).then(|| idx + 1);
        [up, down, left, right].into_iter().flatten()
    }

    pub fn count(&self, tile: TileType) -> usize {
        self.cells.iter().filter(|t| **t == tile).count()
    }

    pub fn positions(&self, tile: TileType) -> Vec<usize> {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, t)| (*t == tile).then_some(i))
            .collect()
    }

    pub fn transpose(&self) -> TileGrid {
        let mut cells = Vec::with_capacity(self.cells.len());
        for c in 0..self.width {
            for r in 0..self.height {
                cells.push(self.cells[self.index(r, c)]);
            }
        }
        TileGrid {
            height: self.width,
            width: self.height,
            cells,
        }
    }

    pub fn rotate_180(&self) -> TileGrid {
        let mut cells = self.cells.clone();
        cells.reverse();
        TileGrid {
            height: self.height,
            width: self.width,
            cells,
        }
    }
}

/// Draws every cell independently and uniformly from the domain alphabet.
pub fn random_map(domain: &DomainSpec, seed: u64) -> TileGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_map_with(domain, &mut rng)
}

pub fn random_map_with<R: Rng + ?Sized>(domain: &DomainSpec, rng: &mut R) -> TileGrid {
    let alphabet = domain.alphabet();
    let cells = (0..domain.cell_count())
        .map(|_| alphabet[rng.random_range(0..alphabet.len())])
        .collect();
    TileGrid {
        height: domain.height,
        width: domain.width,
        cells,
    }
}

/// Returns a copy of `grid` with `tile` written at `pos`, and whether that changed anything.
pub fn apply_edit(
    domain: &DomainSpec,
    grid: &TileGrid,
    pos: (usize, usize),
    tile: TileType,
) -> Result<(TileGrid, bool)> {
    if domain.tile_index(tile).is_none() {
        return Err(Error::ForeignTile {
            tile,
            domain: domain.domain,
        });
    }
    let mut next = grid.clone();
    let changed = next.set(pos.0, pos.1, tile)?;
    Ok((next, changed))
}

/// Channel-last one-hot tensor, `height x width x channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotView {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl OneHotView {
    pub fn at(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// Index of the hot channel at a location.
    pub fn hot(&self, row: usize, col: usize) -> usize {
        let base = (row * self.width + col) * self.channels;
        self.data[base..base + self.channels]
            .iter()
            .position(|v| *v == 1.0)
            .expect("one channel is hot everywhere")
    }
}

/// Translates the grid so `center` sits in the middle of a `(2H-1) x (2W-1)` window.
/// Cells beyond the grid read as the domain's pad tile.
pub fn crop_view(domain: &DomainSpec, grid: &TileGrid, center: (usize, usize)) -> OneHotView {
    let (h, w) = (grid.height, grid.width);
    assert!(center.0 < h && center.1 < w, "crop center out of bounds");
    let (vh, vw) = (2 * h - 1, 2 * w - 1);
    let channels = domain.alphabet().len();
    let pad = domain
        .tile_index(domain.domain.pad_tile())
        .expect("pad tile is in the alphabet");
    let mut data = vec![0.0f32; vh * vw * channels];
    for vr in 0..vh {
        // grid row = vr - (h - 1) + center.row
        let gr = (vr + center.0).checked_sub(h - 1).filter(|r| *r < h);
        for vc in 0..vw {
            let gc = (vc + center.1).checked_sub(w - 1).filter(|c| *c < w);
            let ch = match (gr, gc) {
                (Some(r), Some(c)) => domain
                    .tile_index(grid.cells[r * w + c])
                    .expect("grid tile outside domain alphabet"),
                _ => pad,
            };
            data[(vr * vw + vc) * channels + ch] = 1.0;
        }
    }
    OneHotView {
        height: vh,
        width: vw,
        channels,
        data,
    }
}

/// Parses the ASCII level format: one line per row, one glyph per cell.
pub fn parse_level(domain: Domain, text: &str) -> Result<TileGrid> {
    let glyphs = domain.glyphs();
    let alphabet = domain.alphabet();
    let mut rows: Vec<&str> = text.lines().map(|l| l.trim_end_matches('\r')).collect();
    while rows.last().is_some_and(|l| l.is_empty()) {
        rows.pop();
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 1,
            reason: "empty level".into(),
        });
    }
    let width = rows[0].chars().count();
    let mut cells = Vec::with_capacity(width * rows.len());
    for (i, row) in rows.iter().enumerate() {
        let n = row.chars().count();
        if n != width {
            return Err(Error::Parse {
                line: i + 1,
                reason: format!("row has {n} cells, expected {width}"),
            });
        }
        for ch in row.chars() {
            let k = glyphs
                .iter()
                .position(|g| *g == ch)
                .ok_or_else(|| Error::Parse {
                    line: i + 1,
                    reason: format!("unknown {domain} glyph `{ch}`"),
                })?;
            cells.push(alphabet[k]);
        }
    }
    TileGrid::from_cells(rows.len(), width, cells).map_err(|e| Error::Parse {
        line: 1,
        reason: e.to_string(),
    })
}

pub fn format_level(domain: Domain, grid: &TileGrid) -> String {
    let glyphs = domain.glyphs();
    let alphabet = domain.alphabet();
    let mut out = String::with_capacity((grid.width + 1) * grid.height);
    for r in 0..grid.height {
        for c in 0..grid.width {
            let t = grid.cells[grid.index(r, c)];
            let k = alphabet
                .iter()
                .position(|a| *a == t)
                .expect("grid tile outside domain alphabet");
            out.push(glyphs[k]);
        }
        out.push('\n');
    }
    out
}
