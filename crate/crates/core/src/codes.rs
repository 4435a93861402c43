//! Grids of codebook indices and their column-major sequence form.

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{invalid, shape_err, Result};

/// An `F' × T'` grid of indices into a codebook of size `K`, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CodeGrid {
    pub rows: usize,
    pub cols: usize,
    pub k: usize,
    pub indices: Vec<u32>,
}

impl CodeGrid {
    pub fn new(rows: usize, cols: usize, k: usize, indices: Vec<u32>) -> Result<Self> {
        if indices.len() != rows * cols {
            return Err(shape_err!("{} indices for a {rows}x{cols} grid", indices.len()));
        }
        if k < 2 {
            return Err(invalid!("codebook size must be at least 2, got {k}"));
        }
        if let Some(i) = indices.iter().position(|&v| v as usize >= k) {
            return Err(invalid!("index {} at cell {i} is out of range for K={k}", indices[i]));
        }
        Ok(Self { rows, cols, k, indices })
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.indices[row * self.cols + col]
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Time-major traversal: every row of column `t` precedes column `t + 1`.
pub fn flatten_column_major(grid: &CodeGrid) -> Vec<u32> {
    let mut seq = Vec::with_capacity(grid.len());
    for c in 0..grid.cols {
        for r in 0..grid.rows {
            seq.push(grid.get(r, c));
        }
    }
    seq
}

pub fn unflatten_column_major(seq: &[u32], rows: usize, cols: usize, k: usize) -> Result<CodeGrid> {
    if seq.len() != rows * cols {
        return Err(shape_err!("sequence of {} does not fill a {rows}x{cols} grid", seq.len()));
    }
    let mut indices = vec![0; seq.len()];
    for (j, &s) in seq.iter().enumerate() {
        indices[(j % rows) * cols + j / rows] = s;
    }
    CodeGrid::new(rows, cols, k, indices)
}

const MAGIC: &[u8; 4] = b"CGRD";

/// `{"CGRD", F' u32, T' u32, K u32}` then row-major `u32` indices.
pub fn write_code_grid(grid: &CodeGrid) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC).u32(grid.rows as u32).u32(grid.cols as u32).u32(grid.k as u32);
    for &i in &grid.indices {
        w.u32(i);
    }
    w.finish()
}

pub fn read_code_grid(bytes: &[u8]) -> Result<CodeGrid> {
    let mut r = Reader::new("code grid file", bytes);
    r.magic(MAGIC)?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let k = r.u32()? as usize;
    let n = rows.checked_mul(cols).ok_or_else(|| r.err("size overflow"))?;
    if r.remaining() != n * 4 {
        return Err(r.err(format!("expected {} payload bytes, found {}", n * 4, r.remaining())));
    }
    let indices = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    CodeGrid::new(rows, cols, k, indices).map_err(|e| r.err(e.to_string()))
}

pub fn write_code_grid_file(path: impl AsRef<Path>, grid: &CodeGrid) -> Result<()> {
    std::fs::write(path, write_code_grid(grid))?;
    Ok(())
}

pub fn read_code_grid_file(path: impl AsRef<Path>) -> Result<CodeGrid> {
    read_code_grid(&std::fs::read(path)?)
}
