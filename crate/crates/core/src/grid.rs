//! Cartesian cell-centred grids over a bounding box, and masked sub-grids.

use crate::error::{Error, Result};
use crate::types::Vector;
use serde::{Deserialize, Serialize};

/// Uniform cell-centred grid with spacing `h` in every axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CartesianGrid {
    pub dim: usize,
    pub n: [usize; 2],
    pub lo: [f64; 2],
    pub h: f64,
}

impl CartesianGrid {
    /// Covers the box `[lo, hi]`; every side length must be an integer multiple of `h`.
    pub fn covering(dim: usize, lo: &Vector, hi: &Vector, h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidInput(format!("grid spacing must be positive, got {h}")));
        }
        if dim == 0 || dim > 2 {
            return Err(Error::InvalidInput(format!("dimension {dim} not supported")));
        }
        let mut n = [1usize; 2];
        for k in 0..dim {
            let len = hi[k] - lo[k];
            let cells = (len / h).round();
            if cells < 1.0 || (cells * h - len).abs() > 1e-9 * len.max(1.0) {
                return Err(Error::InvalidInput(format!(
                    "side length {len} along axis {k} is not a multiple of h = {h}"
                )));
            }
            n[k] = cells as usize;
        }
        Ok(Self { dim, n, lo: [lo[0], lo[1]], h })
    }

    pub fn len(&self) -> usize {
        self.n[0] * self.n[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    pub fn linear(&self, i: usize, j: usize) -> usize {
        i + self.n[0] * j
    }

    pub fn multi(&self, idx: usize) -> [usize; 2] {
        [idx % self.n[0], idx / self.n[0]]
    }

    pub fn center(&self, idx: usize) -> Vector {
        let [i, j] = self.multi(idx);
        let x = self.lo[0] + (i as f64 + 0.5) * self.h;
        let y = if self.dim > 1 { self.lo[1] + (j as f64 + 0.5) * self.h } else { 0.0 };
        Vector::new(x, y)
    }

    /// Cell containing `x`, if `x` lies inside the covered box.
    pub fn locate(&self, x: &Vector) -> Option<usize> {
        let mut ij = [0usize; 2];
        for k in 0..self.dim {
            let s = (x[k] - self.lo[k]) / self.h;
            if !(s >= 0.0) || s >= self.n[k] as f64 {
                return None;
            }
            ij[k] = s as usize;
        }
        Some(self.linear(ij[0], ij[1]))
    }

    /// Neighbour of `idx` one step along `axis` (`plus` selects the direction).
    pub fn neighbor(&self, idx: usize, axis: usize, plus: bool) -> Option<usize> {
        if axis >= self.dim {
            return None;
        }
        let mut m = self.multi(idx);
        if plus {
            if m[axis] + 1 >= self.n[axis] {
                return None;
            }
            m[axis] += 1;
        } else {
            if m[axis] == 0 {
                return None;
            }
            m[axis] -= 1;
        }
        Some(self.linear(m[0], m[1]))
    }
}

/// Face between two active cells; `minus` precedes `plus` along `axis`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Face {
    pub axis: usize,
    pub minus: usize,
    pub plus: usize,
    pub midpoint: Vector,
}

/// Active cells of a [`CartesianGrid`] together with their connectivity.
///
/// Active cells are numbered in increasing linear order, so the bandwidth of
/// any nearest-neighbour operator is at most `n[0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedGrid {
    pub cart: CartesianGrid,
    pub mask: Vec<bool>,
    pub active: Vec<usize>,
    index_of: Vec<usize>,
    /// `neighbors[c][axis][0|1]`: active index of the minus/plus neighbour.
    pub neighbors: Vec<[[Option<usize>; 2]; 2]>,
    pub faces: Vec<Face>,
}

impl MaskedGrid {
    pub fn new(cart: CartesianGrid, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != cart.len() {
            return Err(Error::GridMismatch(format!(
                "mask has {} entries for {} cells",
                mask.len(),
                cart.len()
            )));
        }
        let mut index_of = vec![usize::MAX; cart.len()];
        let mut active = Vec::new();
        for (idx, &on) in mask.iter().enumerate() {
            if on {
                index_of[idx] = active.len();
                active.push(idx);
            }
        }
        let mut neighbors = vec![[[None; 2]; 2]; active.len()];
        let mut faces = Vec::new();
        for (c, &idx) in active.iter().enumerate() {
            for axis in 0..cart.dim {
                for (slot, plus) in [(0, false), (1, true)] {
                    if let Some(nb) = cart.neighbor(idx, axis, plus) {
                        if mask[nb] {
                            neighbors[c][axis][slot] = Some(index_of[nb]);
                        }
                    }
                }
                if let Some(p) = neighbors[c][axis][1] {
                    let mut mid = cart.center(idx);
                    mid[axis] += 0.5 * cart.h;
                    faces.push(Face { axis, minus: c, plus: p, midpoint: mid });
                }
            }
        }
        Ok(Self { cart, mask, active, index_of, neighbors, faces })
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.cart.dim
    }

    pub fn h(&self) -> f64 {
        self.cart.h
    }

    pub fn center(&self, c: usize) -> Vector {
        self.cart.center(self.active[c])
    }

    /// Active index of grid cell `idx`, if it is active.
    pub fn active_index(&self, idx: usize) -> Option<usize> {
        match self.index_of.get(idx) {
            Some(&i) if i != usize::MAX => Some(i),
            _ => None,
        }
    }

    /// Largest distance (in active numbering) between coupled cells.
    pub fn bandwidth(&self) -> usize {
        self.faces.iter().map(|f| f.plus - f.minus).max().unwrap_or(0)
    }

    /// Centred gradient of `u` at cell `c`, one-sided at mask edges.
    pub fn centered_gradient(&self, u: &[f64], c: usize) -> Vector {
        let mut g = Vector::zeros();
        let h = self.h();
        for k in 0..self.dim() {
            let nb = &self.neighbors[c][k];
            g[k] = match (nb[0], nb[1]) {
                (Some(m), Some(p)) => (u[p] - u[m]) / (2.0 * h),
                (Some(m), None) => (u[c] - u[m]) / h,
                (None, Some(p)) => (u[p] - u[c]) / h,
                (None, None) => 0.0,
            };
        }
        g
    }

    /// Mask-compatible grids share geometry and active set.
    pub fn same_layout(&self, other: &MaskedGrid) -> bool {
        self.cart == other.cart && self.mask == other.mask
    }
}
