//! Randomized-DFS maze generation with optional loops, and conversion of the
//! wall mask into axis-aligned rectangles on the unit square.
//!
//! Cells at even coordinates are anchors; the DFS carves connector cells
//! between anchors so that, with no loop pass, the open cells form a spanning
//! tree over the anchor grid (anchors + anchors - 1 open cells).

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{RectWall, DEFAULT_WALL_SHARPNESS};
use crate::error::{Error, Result};
use crate::rng;

/// A binary maze grid: 1 = open, 0 = wall. Row-major, row y is the vertical
/// coordinate (row 0 at the bottom once scaled onto the unit square).
#[derive(Debug, Clone, PartialEq)]
pub struct MazeGrid {
    pub width: usize,
    pub height: usize,
    /// Row-major cells, `cells[y * width + x]`.
    pub cells: Vec<u8>,
    pub start: (usize, usize),
    pub end: (usize, usize),
    pub p_loop: f64,
    pub seed: u64,
}

impl MazeGrid {
    pub fn is_open(&self, x: usize, y: usize) -> bool {
        self.cells[y * self.width + x] == 1
    }

    pub fn open_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c == 1).count()
    }

    /// Number of anchor cells (even coordinates in both axes).
    pub fn anchor_count(&self) -> usize {
        self.width.div_ceil(2) * self.height.div_ceil(2)
    }

    /// Flood fill over open cells starting at `from`; returns the visited mask.
    pub fn flood_fill(&self, from: (usize, usize)) -> Vec<bool> {
        let mut seen = vec![false; self.cells.len()];
        if !self.is_open(from.0, from.1) {
            return seen;
        }
        let mut stack = vec![from];
        seen[from.1 * self.width + from.0] = true;
        while let Some((x, y)) = stack.pop() {
            let mut push = |nx: usize, ny: usize, stack: &mut Vec<(usize, usize)>| {
                let idx = ny * self.width + nx;
                if self.cells[idx] == 1 && !seen[idx] {
                    seen[idx] = true;
                    stack.push((nx, ny));
                }
            };
            if x + 1 < self.width {
                push(x + 1, y, &mut stack);
            }
            if x > 0 {
                push(x - 1, y, &mut stack);
            }
            if y + 1 < self.height {
                push(x, y + 1, &mut stack);
            }
            if y > 0 {
                push(x, y - 1, &mut stack);
            }
        }
        seen
    }

    pub fn connected(&self) -> bool {
        let seen = self.flood_fill(self.start);
        seen[self.end.1 * self.width + self.end.0]
    }
}

/// Serialized form: cells as a row-major 0/1 string.
#[derive(Serialize, Deserialize)]
struct MazeGridWire {
    w: usize,
    h: usize,
    cells: String,
    p_loop: f64,
    seed: u64,
    start: (usize, usize),
    end: (usize, usize),
}

impl Serialize for MazeGrid {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let cells: String = self
            .cells
            .iter()
            .map(|&c| if c == 1 { '1' } else { '0' })
            .collect();
        MazeGridWire {
            w: self.width,
            h: self.height,
            cells,
            p_loop: self.p_loop,
            seed: self.seed,
            start: self.start,
            end: self.end,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for MazeGrid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let wire = MazeGridWire::deserialize(d)?;
        if wire.cells.len() != wire.w * wire.h {
            return Err(serde::de::Error::custom("maze cell string length mismatch"));
        }
        let cells = wire
            .cells
            .chars()
            .map(|c| if c == '1' { 1 } else { 0 })
            .collect();
        Ok(MazeGrid {
            width: wire.w,
            height: wire.h,
            cells,
            start: wire.start,
            end: wire.end,
            p_loop: wire.p_loop,
            seed: wire.seed,
        })
    }
}

fn snap_even(v: usize) -> usize {
    v - v % 2
}

/// Generates a maze by recursive randomized DFS over the anchor grid, then
/// removes `floor(p_loop * floor(w/2) * floor(h/2))` extra walls at sites
/// whose vertical or horizontal neighbors are both open.
pub fn generate_maze(
    width: usize,
    height: usize,
    start: (usize, usize),
    end: (usize, usize),
    p_loop: f64,
    seed: u64,
) -> Result<MazeGrid> {
    if width < 3 || height < 3 {
        return Err(Error::invalid("maze dimensions must be at least 3"));
    }
    if !(0.0..=1.0).contains(&p_loop) {
        return Err(Error::invalid("loop factor must lie in [0, 1]"));
    }
    // odd dimensions; even inputs are incremented
    let w = if width % 2 == 0 { width + 1 } else { width };
    let h = if height % 2 == 0 { height + 1 } else { height };
    let start = (snap_even(start.0.min(w - 1)), snap_even(start.1.min(h - 1)));
    let end = (snap_even(end.0.min(w - 1)), snap_even(end.1.min(h - 1)));

    let mut rng = rng::stream(seed, "maze");
    let mut cells = vec![0u8; w * h];
    let mut visited = vec![false; w * h];

    fn visit(
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        cells: &mut [u8],
        visited: &mut [bool],
        rng: &mut impl Rng,
    ) {
        visited[y * w + x] = true;
        cells[y * w + x] = 1;
        let mut dirs: [(i64, i64); 4] = [(2, 0), (-2, 0), (0, 2), (0, -2)];
        dirs.shuffle(rng);
        for (dx, dy) in dirs {
            let nx = x as i64 + dx;
            let ny = y as i64 + dy;
            if nx >= 0 && (nx as usize) < w && ny >= 0 && (ny as usize) < h {
                let (nx, ny) = (nx as usize, ny as usize);
                if !visited[ny * w + nx] {
                    // carve the wall between the two anchors
                    let mx = (x as i64 + dx / 2) as usize;
                    let my = (y as i64 + dy / 2) as usize;
                    cells[my * w + mx] = 1;
                    visit(nx, ny, w, h, cells, visited, rng);
                }
            }
        }
    }
    visit(start.0, start.1, w, h, &mut cells, &mut visited, &mut rng);

    let n_anchor_loops = (w / 2) * (h / 2);
    let removals = (p_loop * n_anchor_loops as f64).floor() as usize;
    for _ in 0..removals {
        // rejection-sample an interior wall site whose vertical or horizontal
        // neighbors are both open; bounded attempts keep termination certain
        let mut placed = false;
        for _ in 0..10_000 {
            let x = rng.gen_range(1..w - 1);
            let y = rng.gen_range(1..h - 1);
            if cells[y * w + x] != 0 {
                continue;
            }
            let vert = cells[(y - 1) * w + x] == 1 && cells[(y + 1) * w + x] == 1;
            let horz = cells[y * w + x - 1] == 1 && cells[y * w + x + 1] == 1;
            if vert || horz {
                cells[y * w + x] = 1;
                placed = true;
                break;
            }
        }
        if !placed {
            break;
        }
    }

    cells[start.1 * w + start.0] = 1;
    cells[end.1 * w + end.0] = 1;

    Ok(MazeGrid {
        width: w,
        height: h,
        cells,
        start,
        end,
        p_loop,
        seed,
    })
}

/// Converts wall cells into rectangles covering exactly the wall mask scaled
/// onto the unit square; adjacent wall cells in a row merge into maximal
/// horizontal runs.
pub fn maze_to_rects(grid: &MazeGrid) -> Vec<RectWall> {
    let (w, h) = (grid.width, grid.height);
    let mut rects = Vec::new();
    for y in 0..h {
        let mut x = 0;
        while x < w {
            if grid.is_open(x, y) {
                x += 1;
                continue;
            }
            let run_start = x;
            while x < w && !grid.is_open(x, y) {
                x += 1;
            }
            rects.push(RectWall {
                a: run_start as f64 / w as f64,
                b: x as f64 / w as f64,
                c: y as f64 / h as f64,
                d: (y + 1) as f64 / h as f64,
                lambda_sharp: DEFAULT_WALL_SHARPNESS,
            });
        }
    }
    rects
}
