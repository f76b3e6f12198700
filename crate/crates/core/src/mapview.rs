//! Grid maps: 3x3 smoothing, most-responsive-region search, and bit-exact
//! PPM/PGM/CSV rendering.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// One scalar per grid cell, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub label: String,
}

impl GridMap {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("map {rows}x{cols} has no cells")));
        }
        if values.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}x{cols} map", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid map".into()));
        }
        Ok(Self {
            rows,
            cols,
            values,
            label: label.into(),
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Stride-1 3x3 mean pooling; windows are truncated at the border and average
/// only the cells they contain.
pub fn smooth(map: &GridMap) -> GridMap {
    let mut out = Vec::with_capacity(map.values.len());
    for r in 0..map.rows {
        for c in 0..map.cols {
            let mut sum = 0.0;
            let mut n = 0usize;
            for rr in r.saturating_sub(1)..=(r + 1).min(map.rows - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(map.cols - 1) {
                    sum += map.get(rr, cc);
                    n += 1;
                }
            }
            out.push(sum / n as f64);
        }
    }
    GridMap {
        rows: map.rows,
        cols: map.cols,
        values: out,
        label: map.label.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub center: (usize, usize),
    /// Row-major cells of the block.
    pub cells: Vec<(usize, usize)>,
}

impl Region {
    /// Flat (row-major) indices of the region cells on a grid with `cols` columns.
    pub fn indices(&self, cols: usize) -> Vec<usize> {
        self.cells.iter().map(|&(r, c)| r * cols + c).collect()
    }
}

/// Maximum cell (first in row-major order on ties) and the 3x3 block around
/// it, shifted inward so it stays on the grid. Along an axis shorter than 3
/// the block spans the whole axis.
pub fn argmax_region(map: &GridMap) -> Region {
    let mut best = 0;
    for (i, &v) in map.values.iter().enumerate() {
        if v > map.values[best] {
            best = i;
        }
    }
    let center = (best / map.cols, best % map.cols);
    let span = |pos: usize, len: usize| {
        let width = len.min(3);
        let start = pos.saturating_sub(1).min(len - width);
        start..start + width
    };
    let mut cells = Vec::with_capacity(9);
    for r in span(center.0, map.rows) {
        for c in span(center.1, map.cols) {
            cells.push((r, c));
        }
    }
    Region { center, cells }
}

/// Blue-white-red color of `v` on a scale symmetric about zero with extent
/// `m`. `m == 0` renders white.
pub fn diverging_color(v: f64, m: f64) -> [u8; 3] {
    if m == 0.0 {
        return [255, 255, 255];
    }
    let s = (v / m).clamp(-1.0, 1.0);
    let fade = |x: f64| (255.0 * x).round() as u8;
    if s >= 0.0 {
        [255, fade(1.0 - s), fade(1.0 - s)]
    } else {
        [fade(1.0 + s), fade(1.0 + s), 255]
    }
}

/// Binary PPM (P6), each cell a `cell_px x cell_px` square, row 0 at the top.
/// The color scale is symmetric about zero with extent `max |value|`.
pub fn render_ppm(map: &GridMap, cell_px: usize) -> Vec<u8> {
    assert!(cell_px >= 1, "cell_px must be at least 1");
    let (w, h) = (map.cols * cell_px, map.rows * cell_px);
    let m = map.max_abs();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * w * h);
    for r in 0..map.rows {
        let line: Vec<u8> = (0..map.cols)
            .flat_map(|c| {
                let px = diverging_color(map.get(r, c), m);
                std::iter::repeat_n(px, cell_px).flatten()
            })
            .collect();
        for _ in 0..cell_px {
            out.extend_from_slice(&line);
        }
    }
    out
}

/// Binary 8-bit PGM (P5), min-max normalized; a constant map renders black.
pub fn render_pgm(map: &GridMap) -> Vec<u8> {
    let lo = map.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{} {}\n255\n", map.cols, map.rows).into_bytes();
    out.extend(map.values.iter().map(|&v| {
        if hi > lo {
            (255.0 * (v - lo) / (hi - lo)).round() as u8
        } else {
            0
        }
    }));
    out
}

/// `row,col,value` lines in row-major order. Values use the shortest decimal
/// form that parses back to the same `f64`.
pub fn export_csv(map: &GridMap) -> String {
    let mut out = String::from("row,col,value\n");
    for r in 0..map.rows {
        for c in 0..map.cols {
            writeln!(out, "{r},{c},{}", map.get(r, c)).unwrap();
        }
    }
    out
}

pub fn parse_csv(text: &str, label: impl Into<String>) -> Result<GridMap> {
    let mut lines = text.lines();
    let mut offset = 0;
    match lines.next() {
        Some("row,col,value") => offset += "row,col,value\n".len(),
        _ => {
            return Err(Error::Parse {
                offset: 0,
                msg: "expected header `row,col,value`".into(),
            })
        }
    }
    let mut cells = Vec::new();
    for line in lines {
        let bad = |msg: &str| Error::Parse {
            offset,
            msg: format!("{msg}: `{line}`"),
        };
        let mut parts = line.split(',');
        let (Some(r), Some(c), Some(v), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad("expected three fields"));
        };
        let r: usize = r.parse().map_err(|_| bad("bad row"))?;
        let c: usize = c.parse().map_err(|_| bad("bad col"))?;
        let v: f64 = v.parse().map_err(|_| bad("bad value"))?;
        cells.push((r, c, v));
        offset += line.len() + 1;
    }
    let rows = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
    let cols = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
    if cells.len() != rows * cols
        || cells
            .iter()
            .enumerate()
            .any(|(i, &(r, c, _))| (r, c) != (i / cols, i % cols))
    {
        return Err(Error::Parse {
            offset,
            msg: "cells are not a complete row-major grid".into(),
        });
    }
    GridMap::new(rows, cols, cells.into_iter().map(|c| c.2).collect(), label)
}
