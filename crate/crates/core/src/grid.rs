//! Periodic grids on the flat torus `[0,1)^dim` and functions sampled on them.
//!
//! Node `i` of a one-dimensional grid sits at `i / N`; in two dimensions the
//! flat index is `ix + N * iy`. Every length is measured on a torus of
//! circumference one.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible number of points per axis.
pub const MIN_RESOLUTION: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TorusGrid {
    dim: usize,
    n: usize,
}

impl TorusGrid {
    pub fn new(dim: usize, n: usize) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidGrid(format!("dim must be 1 or 2, got {dim}")));
        }
        if n < MIN_RESOLUTION {
            return Err(Error::InvalidGrid(format!(
                "N must be at least {MIN_RESOLUTION}, got {n}"
            )));
        }
        Ok(Self { dim, n })
    }

    pub fn line(n: usize) -> Result<Self> {
        Self::new(1, n)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Points per axis.
    pub fn resolution(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// Total number of nodes, `N^dim`.
    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Per-axis indices of a flat node index (unused axes are zero).
    pub fn axes(&self, idx: usize) -> [usize; 2] {
        match self.dim {
            1 => [idx, 0],
            _ => [idx % self.n, idx / self.n],
        }
    }

    pub fn flat(&self, axes: [usize; 2]) -> usize {
        match self.dim {
            1 => axes[0] % self.n,
            _ => axes[0] % self.n + self.n * (axes[1] % self.n),
        }
    }

    /// Wraps a signed per-axis index onto `0..N`.
    pub fn wrap(&self, i: isize) -> usize {
        i.rem_euclid(self.n as isize) as usize
    }

    /// Coordinate of a node; only the first `dim` entries are meaningful.
    pub fn coord(&self, idx: usize) -> [f64; 2] {
        let a = self.axes(idx);
        let h = self.spacing();
        [a[0] as f64 * h, a[1] as f64 * h]
    }

    /// Coordinate of node `i` on a one-dimensional grid.
    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.spacing()
    }

    /// Nearest node to a coordinate (wrapping).
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut axes = [0usize; 2];
        for (k, a) in axes.iter_mut().enumerate().take(self.dim) {
            *a = self.wrap((x[k] * self.n as f64).round() as isize);
        }
        self.flat(axes)
    }

    /// Periodic index distance between two nodes of a 1D grid.
    pub fn index_distance(&self, i: usize, j: usize) -> usize {
        let d = i.abs_diff(j) % self.n;
        d.min(self.n - d)
    }

    pub fn ensure_same(&self, other: &TorusGrid) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch {
                left: self.len(),
                left_dim: self.dim,
                right: other.len(),
                right_dim: other.dim,
            });
        }
        Ok(())
    }
}

/// Wraps a coordinate onto `[0, 1)`.
pub fn wrap_unit(x: f64) -> f64 {
    let w = x.rem_euclid(1.0);
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// Signed shortest displacement from `a` to `b` on the circle, in `[-1/2, 1/2)`.
pub fn periodic_delta(a: f64, b: f64) -> f64 {
    let d = (b - a).rem_euclid(1.0);
    if d >= 0.5 {
        d - 1.0
    } else {
        d
    }
}

/// Flat-torus distance between two points of `[0,1)^dim`.
pub fn periodic_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (y - x).abs().rem_euclid(1.0);
            d.min(1.0 - d).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

/// Periodic linear interpolation of equally spaced samples of a 1-periodic
/// function; works for any number of samples.
pub fn interpolate_periodic(values: &[f64], x: f64) -> f64 {
    let n = values.len();
    let s = wrap_unit(x) * n as f64;
    let i = (s.floor() as usize).min(n - 1);
    let w = s - i as f64;
    let j = (i + 1) % n;
    if w == 0.0 {
        values[i]
    } else {
        (1.0 - w) * values[i] + w * values[j]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    grid: TorusGrid,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: TorusGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid(format!("non-finite value at node {i}")));
        }
        Ok(Self { grid, values })
    }

    /// Samples `f` at every node. `f` receives the node coordinate.
    pub fn from_fn(grid: TorusGrid, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.len())
            .map(|i| {
                let c = grid.coord(i);
                f(&c[..grid.dim()])
            })
            .collect();
        Self { grid, values }
    }

    pub fn constant(grid: TorusGrid, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.len()],
        }
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_constant(&self, c: f64) -> Self {
        self.map(|v| v + c)
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.grid.ensure_same(&other.grid)?;
        Ok(Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `max_i |f_i - g_i|`.
    pub fn sup_diff(&self, other: &Self) -> Result<f64> {
        self.grid.ensure_same(&other.grid)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Periodic linear (1D) or bilinear (2D) interpolation.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        let n = self.grid.resolution();
        match self.grid.dim() {
            1 => interpolate_periodic(&self.values, x[0]),
            _ => {
                let sx = wrap_unit(x[0]) * n as f64;
                let sy = wrap_unit(x[1]) * n as f64;
                let ix = (sx.floor() as usize).min(n - 1);
                let iy = (sy.floor() as usize).min(n - 1);
                let wx = sx - ix as f64;
                let wy = sy - iy as f64;
                let at = |a: usize, b: usize| self.values[self.grid.flat([a % n, b % n])];
                (1.0 - wx) * (1.0 - wy) * at(ix, iy)
                    + wx * (1.0 - wy) * at(ix + 1, iy)
                    + (1.0 - wx) * wy * at(ix, iy + 1)
                    + wx * wy * at(ix + 1, iy + 1)
            }
        }
    }

    /// Largest neighbour difference quotient along any axis.
    pub fn lipschitz_constant(&self) -> f64 {
        let h = self.grid.spacing();
        let n = self.grid.resolution();
        let mut lip: f64 = 0.0;
        for i in 0..self.len() {
            let a = self.grid.axes(i);
            for axis in 0..self.grid.dim() {
                let mut b = a;
                b[axis] = (b[axis] + 1) % n;
                let j = self.grid.flat(b);
                lip = lip.max((self.values[j] - self.values[i]).abs() / h);
            }
        }
        lip
    }

    /// CSV with columns `index, x[, y], value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if self.grid.dim() == 1 {
            out.push_str("index,x,value\n");
        } else {
            out.push_str("index,x,y,value\n");
        }
        for (i, v) in self.values.iter().enumerate() {
            let c = self.grid.coord(i);
            if self.grid.dim() == 1 {
                let _ = writeln!(out, "{i},{:.17e},{:.17e}", c[0], v);
            } else {
                let _ = writeln!(out, "{i},{:.17e},{:.17e},{:.17e}", c[0], c[1], v);
            }
        }
        out
    }

    pub fn from_csv(grid: TorusGrid, text: &str) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.len());
        for (line_no, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let last = line
                .rsplit(',')
                .next()
                .ok_or_else(|| Error::Parse(format!("line {}: empty", line_no + 1)))?;
            let v: f64 = last
                .trim()
                .parse()
                .map_err(|e| Error::Parse(format!("line {}: {e}", line_no + 1)))?;
            values.push(v);
        }
        Self::new(grid, values)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::json!({
            "dim": self.grid.dim(),
            "N": self.grid.resolution(),
            "values": self.values,
        }))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Wire {
            dim: usize,
            #[serde(rename = "N")]
            n: usize,
            values: Vec<f64>,
        }
        let w: Wire = serde_json::from_str(text)?;
        Self::new(TorusGrid::new(w.dim, w.n)?, w.values)
    }
}
