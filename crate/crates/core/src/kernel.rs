//! Discrete action kernels `K_t[i][j] ~ A_t(x_i, x_j)` and their min-plus
//! algebra.
//!
//! Unreachable transitions are stored as `f64::INFINITY`. The kernel ladder
//! holds `K_{delta 2^k}`; every level keeps the cheaper of the straight
//! segment travelled in one go and the relay through the previous level, so
//! discrete minimizers are dyadic polylines that refine where it pays.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{wrap_unit, TorusGrid};
use crate::hamiltonian::HamiltonianSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Finest time step `delta`.
    pub base_step: f64,
    /// Candidate wraps per axis for a straight segment.
    pub winding: u32,
    /// Per-axis velocity cap for straight segments.
    pub v_max: f64,
    /// Entries above this are treated as unreachable.
    pub cost_ceiling: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            base_step: 1.0 / 1024.0,
            winding: 1,
            v_max: 8.0,
            cost_ceiling: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionKernel {
    grid: TorusGrid,
    t: f64,
    base_step: f64,
    winding: u32,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelMeta {
    #[serde(rename = "N")]
    pub n: usize,
    pub dim: usize,
    pub t: f64,
    pub delta: f64,
    #[serde(rename = "W")]
    pub winding: u32,
}

impl ActionKernel {
    pub fn from_parts(
        grid: TorusGrid,
        t: f64,
        base_step: f64,
        winding: u32,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != grid.len() * grid.len() {
            return Err(Error::Kernel(format!(
                "expected {} entries, got {}",
                grid.len() * grid.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::Kernel("NaN entry".into()));
        }
        Ok(Self {
            grid,
            t,
            base_step,
            winding,
            data,
        })
    }

    /// Min-plus identity: zero on the diagonal, unreachable elsewhere, `t = 0`.
    pub fn identity(grid: TorusGrid) -> Self {
        let n = grid.len();
        let mut data = vec![f64::INFINITY; n * n];
        for i in 0..n {
            data[i * n + i] = 0.0;
        }
        Self {
            grid,
            t: 0.0,
            base_step: 0.0,
            winding: 0,
            data,
        }
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn base_step(&self) -> f64 {
        self.base_step
    }

    pub fn winding(&self) -> u32 {
        self.winding
    }

    pub fn size(&self) -> usize {
        self.grid.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.size() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.size();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn meta(&self) -> KernelMeta {
        KernelMeta {
            n: self.grid.resolution(),
            dim: self.grid.dim(),
            t: self.t,
            delta: self.base_step,
            winding: self.winding,
        }
    }

    /// Smallest finite entry.
    pub fn min_entry(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Largest entrywise difference; unreachable entries must match.
    pub fn sup_diff(&self, other: &ActionKernel) -> Result<f64> {
        self.grid.ensure_same(&other.grid)?;
        let mut worst: f64 = 0.0;
        for (a, b) in self.data.iter().zip(&other.data) {
            if a.is_infinite() || b.is_infinite() {
                if a != b {
                    return Ok(f64::INFINITY);
                }
                continue;
            }
            worst = worst.max((a - b).abs());
        }
        Ok(worst)
    }

    /// Interpolated action `A_t(x, y)`: bilinear in 1D, multilinear in 2D.
    pub fn action_value(&self, x: &[f64], y: &[f64]) -> f64 {
        let cx = cell_weights(&self.grid, x);
        let cy = cell_weights(&self.grid, y);
        let mut acc = 0.0;
        for &(a, wa) in &cx {
            for &(b, wb) in &cy {
                acc += wa * wb * self.get(a, b);
            }
        }
        acc
    }

    /// Row-major little-endian `f64` matrix.
    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_binary(meta: &KernelMeta, mut r: impl Read) -> Result<Self> {
        let grid = TorusGrid::new(meta.dim, meta.n)?;
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() != grid.len() * grid.len() * 8 {
            return Err(Error::Parse(format!(
                "kernel payload has {} bytes, expected {}",
                buf.len(),
                grid.len() * grid.len() * 8
            )));
        }
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::from_parts(grid, meta.t, meta.delta, meta.winding, data)
    }

    pub fn sidecar_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.meta())?)
    }

    /// Human-readable matrix, one row per line.
    pub fn to_csv(&self) -> String {
        let n = self.size();
        let mut out = String::new();
        for i in 0..n {
            for j in 0..n {
                if j > 0 {
                    out.push(',');
                }
                let v = self.get(i, j);
                if v.is_infinite() {
                    out.push_str("inf");
                } else {
                    let _ = write!(out, "{v:.17e}");
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Nodes and weights of the (multi)linear interpolation stencil at `x`;
/// zero weights are dropped.
pub(crate) fn cell_weights(grid: &TorusGrid, x: &[f64]) -> Vec<(usize, f64)> {
    let n = grid.resolution();
    let mut per_axis = [[(0usize, 1.0f64); 2]; 2];
    for axis in 0..grid.dim() {
        let s = wrap_unit(x[axis]) * n as f64;
        let i = (s.floor() as usize).min(n - 1);
        let w = s - i as f64;
        per_axis[axis] = [(i, 1.0 - w), ((i + 1) % n, w)];
    }
    let mut out = Vec::with_capacity(4);
    if grid.dim() == 1 {
        for &(i, w) in &per_axis[0] {
            if w != 0.0 {
                out.push((i, w));
            }
        }
    } else {
        for &(i, wi) in &per_axis[0] {
            for &(j, wj) in &per_axis[1] {
                if wi * wj != 0.0 {
                    out.push((grid.flat([i, j]), wi * wj));
                }
            }
        }
    }
    out
}

/// Min-plus product `C[i][j] = min_m A[i][m] + B[m][j]`, `t = A.t + B.t`.
/// Rows are computed in parallel; the smallest relay index wins ties.
pub fn compose(a: &ActionKernel, b: &ActionKernel) -> Result<ActionKernel> {
    a.grid.ensure_same(&b.grid)?;
    let n = a.size();
    let mut data = vec![f64::INFINITY; n * n];
    data.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
        let row = a.row(i);
        for (m, &aim) in row.iter().enumerate() {
            if aim.is_infinite() {
                continue;
            }
            let brow = b.row(m);
            for (o, &bmj) in out.iter_mut().zip(brow) {
                let v = aim + bmj;
                if v < *o {
                    *o = v;
                }
            }
        }
    });
    let base_step = match (a.base_step, b.base_step) {
        (x, 0.0) | (0.0, x) => x,
        (x, y) => x.min(y),
    };
    Ok(ActionKernel {
        grid: a.grid,
        t: a.t + b.t,
        base_step,
        winding: a.winding.max(b.winding),
        data,
    })
}

/// Entrywise minimum of two kernels at the same time.
fn entrywise_min(a: &ActionKernel, b: &ActionKernel) -> ActionKernel {
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| x.min(y))
        .collect();
    ActionKernel { data, ..a.clone() }
}

/// Per-axis straight-segment cost over time `t`, minimized over wraps.
/// Returns the cost and the chosen wrap (first strict minimum, wraps ascending).
fn axis_segment(
    spec: &HamiltonianSpec,
    xi: f64,
    xj: f64,
    t: f64,
    params: &KernelParams,
) -> Result<(f64, i32)> {
    let w = params.winding as i32;
    let mut best = (f64::INFINITY, 0);
    for k in -w..=w {
        let target = xj + k as f64;
        if (target - xi).abs() / t > params.v_max * (1.0 + 1e-12) {
            continue;
        }
        let c = spec.segment_action(&[xi], &[target], t)?;
        if c < best.0 {
            best = (c, k);
        }
    }
    Ok(best)
}

fn axis_direct_matrix(
    spec: &HamiltonianSpec,
    n: usize,
    t: f64,
    params: &KernelParams,
) -> Result<Vec<f64>> {
    let h = 1.0 / n as f64;
    let rows: Result<Vec<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| axis_segment(spec, i as f64 * h, j as f64 * h, t, params).map(|c| c.0))
                .collect()
        })
        .collect();
    Ok(rows?.concat())
}

fn apply_ceiling(data: &mut [f64], ceiling: f64) {
    for v in data.iter_mut() {
        if *v > ceiling {
            *v = f64::INFINITY;
        }
    }
}

/// Straight-segment kernel over time `t` with no step-size restriction.
fn direct_kernel(
    spec: &HamiltonianSpec,
    grid: TorusGrid,
    t: f64,
    params: &KernelParams,
) -> Result<ActionKernel> {
    let n1 = grid.resolution();
    let axis = axis_direct_matrix(spec, n1, t, params)?;
    let n = grid.len();
    let mut data = if grid.dim() == 1 {
        axis
    } else {
        let mut d = vec![0.0; n * n];
        d.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            let [ix, iy] = grid.axes(i);
            for (j, out) in row.iter_mut().enumerate() {
                let [jx, jy] = grid.axes(j);
                *out = axis[ix * n1 + jx] + axis[iy * n1 + jy];
            }
        });
        d
    };
    apply_ceiling(&mut data, params.cost_ceiling);
    Ok(ActionKernel {
        grid,
        t,
        base_step: params.base_step,
        winding: params.winding,
        data,
    })
}

fn ensure_normalized(spec: &HamiltonianSpec) -> Result<()> {
    if !spec.normalized {
        return Err(Error::Precondition {
            what: "Hamiltonian must be normalized to critical value zero".into(),
            residual: spec.critical_value.unwrap_or(f64::NAN),
            tolerance: 0.0,
        });
    }
    Ok(())
}

fn validate_params(grid: &TorusGrid, params: &KernelParams) -> Result<()> {
    let delta = params.base_step;
    if !(delta > 0.0 && delta <= 0.1) {
        return Err(Error::Config {
            field: "kernel.delta".into(),
            message: format!("must lie in (0, 0.1], got {delta}"),
        });
    }
    if params.winding < 1 {
        return Err(Error::Config {
            field: "kernel.W".into(),
            message: "must be at least 1".into(),
        });
    }
    if grid.spacing() / delta > params.v_max {
        return Err(Error::Kernel(format!(
            "no neighbouring node is reachable in one step: dx/delta = {:.3} exceeds v_max = {}; \
             use a smaller delta or a larger v_max",
            grid.spacing() / delta,
            params.v_max
        )));
    }
    Ok(())
}

/// One-step kernel: cheapest straight segment over `params.base_step`,
/// minimized over wraps in `[-W, W]^dim`. Segment actions integrate the
/// potential exactly along the segment.
pub fn small_time_kernel(
    spec: &HamiltonianSpec,
    grid: TorusGrid,
    params: &KernelParams,
) -> Result<ActionKernel> {
    ensure_normalized(spec)?;
    validate_params(&grid, params)?;
    direct_kernel(spec, grid, params.base_step, params)
}

/// Literal `2^m`-th min-plus power by `m` squarings.
pub fn kernel_power(k: &ActionKernel, m: u32, t_max: f64) -> Result<ActionKernel> {
    let t = k.t * 2f64.powi(m as i32);
    if t > t_max * (1.0 + 1e-12) {
        return Err(Error::Horizon { t, t_max });
    }
    let mut out = k.clone();
    for _ in 0..m {
        out = compose(&out, &out)?;
    }
    Ok(out)
}

/// A discrete minimizer: straight pieces between relay nodes, with positions
/// lifted to the universal cover.
#[derive(Debug, Clone, PartialEq)]
pub struct RelayPath {
    pub grid: TorusGrid,
    pub times: Vec<f64>,
    pub nodes: Vec<usize>,
    pub lifts: Vec<[f64; 2]>,
}

impl RelayPath {
    pub fn start(&self) -> [f64; 2] {
        self.lifts[0]
    }

    pub fn end(&self) -> [f64; 2] {
        *self.lifts.last().expect("non-empty path")
    }

    pub fn duration(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0) - self.times[0]
    }

    pub fn segments(&self) -> usize {
        self.times.len() - 1
    }

    /// Velocity of segment `k`.
    pub fn velocity(&self, k: usize) -> [f64; 2] {
        let dt = self.times[k + 1] - self.times[k];
        let a = self.lifts[k];
        let b = self.lifts[k + 1];
        [(b[0] - a[0]) / dt, (b[1] - a[1]) / dt]
    }

    /// Action of the polyline.
    pub fn action(&self, spec: &HamiltonianSpec) -> Result<f64> {
        let d = self.grid.dim();
        let mut total = 0.0;
        for k in 0..self.segments() {
            let dt = self.times[k + 1] - self.times[k];
            total += spec.segment_action(&self.lifts[k][..d], &self.lifts[k + 1][..d], dt)?;
        }
        Ok(total)
    }

    fn push_segment(&mut self, j: usize, dt: f64, lift: [f64; 2]) {
        let t = self.times.last().copied().unwrap_or(0.0) + dt;
        self.times.push(t);
        self.nodes.push(j);
        self.lifts.push(lift);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DerivativeReport {
    pub x: f64,
    pub y: f64,
    pub t: f64,
    pub margin: f64,
    pub margin_tolerance: f64,
    /// Set when the best relay is not separated from competitors: likely a
    /// conjugate or cut configuration, where derivatives are not compared.
    pub ambiguous: bool,
    pub dy_numeric: f64,
    pub dy_minimizer: f64,
    pub dx_numeric: f64,
    pub dx_minimizer: f64,
    pub dt_numeric: f64,
    pub dt_minimizer: f64,
    pub error_dy: f64,
    pub error_dx: f64,
    pub error_dt: f64,
}

/// Dyadic kernel levels `K_{delta 2^k}` up to a horizon, shared by every
/// operator evaluation.
#[derive(Debug)]
pub struct KernelLadder {
    spec: HamiltonianSpec,
    grid: TorusGrid,
    params: KernelParams,
    t_max: f64,
    levels: Vec<Arc<ActionKernel>>,
    cache: Mutex<HashMap<u64, Arc<ActionKernel>>>,
}

impl KernelLadder {
    pub fn build(
        spec: &HamiltonianSpec,
        grid: TorusGrid,
        params: KernelParams,
        t_max: f64,
    ) -> Result<Self> {
        ensure_normalized(spec)?;
        validate_params(&grid, &params)?;
        if !(t_max >= params.base_step) {
            return Err(Error::Config {
                field: "kernel.T_max".into(),
                message: format!("must be at least delta = {}, got {t_max}", params.base_step),
            });
        }
        let mut levels = vec![Arc::new(direct_kernel(spec, grid, params.base_step, &params)?)];
        loop {
            let prev = levels.last().expect("non-empty");
            let t = 2.0 * prev.t;
            if t > t_max * (1.0 + 1e-12) {
                break;
            }
            let mut relay = compose(prev, prev)?;
            apply_ceiling(&mut relay.data, params.cost_ceiling);
            let direct = direct_kernel(spec, grid, t, &params)?;
            levels.push(Arc::new(entrywise_min(&direct, &relay)));
        }
        Ok(Self {
            spec: spec.clone(),
            grid,
            params,
            t_max,
            levels,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn spec(&self) -> &HamiltonianSpec {
        &self.spec
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn base_step(&self) -> f64 {
        self.params.base_step
    }

    pub fn levels(&self) -> &[Arc<ActionKernel>] {
        &self.levels
    }

    /// Level times `delta, 2 delta, 4 delta, ...`.
    pub fn level_times(&self) -> Vec<f64> {
        self.levels.iter().map(|k| k.t).collect()
    }

    /// Number of base steps in `t`, if `t` is a positive multiple of `delta`
    /// within the horizon.
    pub fn steps(&self, t: f64) -> Result<u64> {
        if t > self.t_max * (1.0 + 1e-12) {
            return Err(Error::Horizon {
                t,
                t_max: self.t_max,
            });
        }
        let r = t / self.params.base_step;
        let m = r.round();
        if m < 1.0 || (r - m).abs() > 1e-9 * r.max(1.0) {
            return Err(Error::OffLadder(t));
        }
        Ok(m as u64)
    }

    fn decomposition(&self, m: u64) -> Vec<usize> {
        (0..64).rev().filter(|&b| m >> b & 1 == 1).map(|b| b as usize).collect()
    }

    /// Level indices whose product, in order, is `kernel_at(t)`.
    /// Empty at `t = 0`, where every operator is the identity.
    pub fn level_indices(&self, t: f64) -> Result<Vec<usize>> {
        if t == 0.0 {
            return Ok(Vec::new());
        }
        Ok(self.decomposition(self.steps(t)?))
    }

    /// `K_t` for any multiple of `delta` within the horizon: a ladder level
    /// when `t` is dyadic, otherwise the product of levels along the binary
    /// expansion of `t / delta`, largest first. Results are cached.
    pub fn kernel_at(&self, t: f64) -> Result<Arc<ActionKernel>> {
        let m = self.steps(t)?;
        let parts = self.decomposition(m);
        if parts.len() == 1 {
            return Ok(self.levels[parts[0]].clone());
        }
        if let Some(k) = self.cache.lock().expect("cache lock").get(&m) {
            return Ok(k.clone());
        }
        let mut acc = (*self.levels[parts[0]]).clone();
        for &p in &parts[1..] {
            acc = compose(&acc, &self.levels[p])?;
        }
        let acc = Arc::new(acc);
        self.cache
            .lock()
            .expect("cache lock")
            .insert(m, acc.clone());
        Ok(acc)
    }

    /// `K_{t + s}` built as `compose(K_s, K_t)`: longer kernels obtained this
    /// way make `t -> T^-_t T^+_t phi` exactly monotone.
    pub fn extend(&self, k: &ActionKernel, s: f64) -> Result<ActionKernel> {
        compose(&*self.kernel_at(s)?, k)
    }

    fn direct_entry(&self, i: usize, j: usize, t: f64) -> Result<(f64, [i32; 2])> {
        let n1 = self.grid.resolution();
        let h = self.grid.spacing();
        let ai = self.grid.axes(i);
        let aj = self.grid.axes(j);
        let mut total = 0.0;
        let mut wraps = [0i32; 2];
        for axis in 0..self.grid.dim() {
            let (c, k) = axis_segment(
                &self.spec,
                (ai[axis] % n1) as f64 * h,
                (aj[axis] % n1) as f64 * h,
                t,
                &self.params,
            )?;
            total += c;
            wraps[axis] = k;
        }
        if total > self.params.cost_ceiling {
            total = f64::INFINITY;
        }
        Ok((total, wraps))
    }

    fn expand_level(&self, level: usize, i: usize, j: usize, path: &mut RelayPath) -> Result<()> {
        let k = &self.levels[level];
        let stored = k.get(i, j);
        if stored.is_infinite() {
            return Err(Error::Kernel(format!(
                "no admissible path from node {i} to node {j} in time {}",
                k.t
            )));
        }
        let (direct, wraps) = self.direct_entry(i, j, k.t)?;
        if level == 0 || direct == stored {
            let start = *path.lifts.last().expect("non-empty");
            let ci = self.grid.coord(i);
            let cj = self.grid.coord(j);
            let mut end = [0.0; 2];
            for axis in 0..self.grid.dim() {
                let d = cj[axis] + wraps[axis] as f64 - ci[axis];
                end[axis] = start[axis] + d;
            }
            path.push_segment(j, k.t, end);
            return Ok(());
        }
        let half = &self.levels[level - 1];
        let mut best = (f64::INFINITY, 0);
        for m in 0..k.size() {
            let v = half.get(i, m) + half.get(m, j);
            if v < best.0 {
                best = (v, m);
            }
        }
        self.expand_level(level - 1, i, best.1, path)?;
        self.expand_level(level - 1, best.1, j, path)
    }

    /// Discrete minimizer realizing `K_t[i][j]`, recovered by backtracking
    /// through relay argmins (smallest index on ties).
    pub fn relay_path(&self, i: usize, j: usize, t: f64) -> Result<RelayPath> {
        let m = self.steps(t)?;
        let parts = self.decomposition(m);
        let n = self.grid.len();
        // forward min-plus sweep over the chain of levels
        let mut rows: Vec<Vec<f64>> = vec![self.levels[parts[0]].row(i).to_vec()];
        for &p in &parts[1..] {
            let prev = rows.last().expect("non-empty");
            let lvl = &self.levels[p];
            let mut next = vec![f64::INFINITY; n];
            for (m, &a) in prev.iter().enumerate() {
                if a.is_infinite() {
                    continue;
                }
                for (o, &b) in next.iter_mut().zip(lvl.row(m)) {
                    if a + b < *o {
                        *o = a + b;
                    }
                }
            }
            rows.push(next);
        }
        let mut relays = vec![j];
        let mut target = j;
        for q in (1..parts.len()).rev() {
            let lvl = &self.levels[parts[q]];
            let mut best = (f64::INFINITY, 0);
            for (m, &a) in rows[q - 1].iter().enumerate() {
                let v = a + lvl.get(m, target);
                if v < best.0 {
                    best = (v, m);
                }
            }
            if best.0.is_infinite() {
                return Err(Error::Kernel(format!(
                    "no admissible path from node {i} to node {j} in time {t}"
                )));
            }
            target = best.1;
            relays.push(target);
        }
        relays.push(i);
        relays.reverse();
        let c = self.grid.coord(i);
        let mut path = RelayPath {
            grid: self.grid,
            times: vec![0.0],
            nodes: vec![i],
            lifts: vec![c],
        };
        for (q, &p) in parts.iter().enumerate() {
            self.expand_level(p, relays[q], relays[q + 1], &mut path)?;
        }
        Ok(path)
    }

    /// Gap between the best relay through the half-time split and the best
    /// relay whose midpoint lies more than two cells away from it.
    pub fn minimizer_margin(&self, i: usize, j: usize, t: f64) -> Result<f64> {
        let m = self.steps(t)?;
        if m < 2 {
            return Ok(f64::INFINITY);
        }
        let a = self.kernel_at((m / 2) as f64 * self.params.base_step)?;
        let b = self.kernel_at((m - m / 2) as f64 * self.params.base_step)?;
        let n = self.grid.len();
        let vals: Vec<f64> = (0..n).map(|r| a.get(i, r) + b.get(r, j)).collect();
        let (best_m, best) = vals
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (r, &v)| if v < acc.1 { (r, v) } else { acc });
        let grid = self.grid;
        let far = |r: usize| {
            let ar = grid.axes(r);
            let ab = grid.axes(best_m);
            (0..grid.dim()).any(|axis| {
                let d = ar[axis].abs_diff(ab[axis]);
                d.min(grid.resolution() - d) > 2
            })
        };
        let second = vals
            .iter()
            .enumerate()
            .filter(|&(r, _)| far(r))
            .map(|(_, &v)| v)
            .fold(f64::INFINITY, f64::min);
        Ok(second - best)
    }

    /// Compares finite differences of the interpolated action with the
    /// derivative formulas evaluated on the recovered discrete minimizer:
    /// `D_y A = L_v` at the end, `D_x A = -L_v` at the start, `D_t A = -E`.
    /// One-dimensional grids only.
    pub fn derivative_check(&self, x: f64, y: f64, t: f64) -> Result<DerivativeReport> {
        if self.grid.dim() != 1 {
            return Err(Error::Unsupported("derivative check in dimension 2".into()));
        }
        let dx = self.grid.spacing();
        let delta = self.params.base_step;
        let k = self.kernel_at(t)?;
        let dy_numeric = (k.action_value(&[x], &[y + dx]) - k.action_value(&[x], &[y - dx])) / (2.0 * dx);
        let dx_numeric = (k.action_value(&[x + dx], &[y]) - k.action_value(&[x - dx], &[y])) / (2.0 * dx);
        let m = self.steps(t)?;
        let hs = ((m as f64 / 32.0).floor() as u64).max(1);
        let h = hs as f64 * delta;
        let dt_numeric = if m > hs && t + h <= self.t_max {
            let kp = self.kernel_at(t + h)?;
            let km = self.kernel_at(t - h)?;
            (kp.action_value(&[x], &[y]) - km.action_value(&[x], &[y])) / (2.0 * h)
        } else {
            let kp = self.kernel_at(t + h)?;
            (kp.action_value(&[x], &[y]) - k.action_value(&[x], &[y])) / h
        };
        let i = self.grid.nearest(&[x]);
        let j = self.grid.nearest(&[y]);
        let margin = self.minimizer_margin(i, j, t)?;
        let margin_tolerance = dx * dx;
        let path = self.relay_path(i, j, t)?;
        let last = path.segments() - 1;
        let v_end = path.velocity(last)[0];
        let v_start = path.velocity(0)[0];
        let x_end = wrap_unit(path.end()[0]);
        let dy_minimizer = self.spec.lagrangian_velocity_derivative(x_end, v_end)?;
        let dx_minimizer = -self.spec.lagrangian_velocity_derivative(path.start()[0], v_start)?;
        let dt_minimizer = -self.spec.energy(x_end, v_end)?;
        Ok(DerivativeReport {
            x,
            y,
            t,
            margin,
            margin_tolerance,
            ambiguous: margin < margin_tolerance,
            dy_numeric,
            dy_minimizer,
            dx_numeric,
            dx_minimizer,
            dt_numeric,
            dt_minimizer,
            error_dy: (dy_numeric - dy_minimizer).abs(),
            error_dx: (dx_numeric - dx_minimizer).abs(),
            error_dt: (dt_numeric - dt_minimizer).abs(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LadderManifest {
    schema: u32,
    spec: HamiltonianSpec,
    #[serde(rename = "N")]
    n: usize,
    dim: usize,
    params: KernelParams,
    t_max: f64,
    levels: Vec<String>,
}

impl KernelLadder {
    /// Writes `ladder.json` and one binary file with a JSON sidecar per level.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut names = Vec::with_capacity(self.levels.len());
        for (k, level) in self.levels.iter().enumerate() {
            let name = format!("level_{k:02}");
            level.write_binary(std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{name}.bin")))?))?;
            std::fs::write(dir.join(format!("{name}.json")), level.sidecar_json()?)?;
            names.push(name);
        }
        let manifest = LadderManifest {
            schema: 1,
            spec: self.spec.clone(),
            n: self.grid.resolution(),
            dim: self.grid.dim(),
            params: self.params,
            t_max: self.t_max,
            levels: names,
        };
        std::fs::write(dir.join("ladder.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads a ladder saved by [`KernelLadder::save`] for exactly this
    /// configuration. Absent files or a different configuration are reported
    /// as a missing artifact.
    pub fn load(dir: &Path, spec: &HamiltonianSpec, grid: TorusGrid, params: KernelParams, t_max: f64) -> Result<Self> {
        let path = dir.join("ladder.json");
        let text = std::fs::read_to_string(&path)
            .map_err(|_| Error::MissingArtifact(format!("{} not found", path.display())))?;
        let manifest: LadderManifest = serde_json::from_str(&text)?;
        if manifest.spec != *spec
            || manifest.n != grid.resolution()
            || manifest.dim != grid.dim()
            || manifest.params != params
            || manifest.t_max != t_max
        {
            return Err(Error::MissingArtifact(format!("{} was built for a different configuration", path.display())));
        }
        let mut levels = Vec::with_capacity(manifest.levels.len());
        for (k, name) in manifest.levels.iter().enumerate() {
            let meta: KernelMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{name}.json")))?)?;
            let expected = params.base_step * (1u64 << k) as f64;
            if meta.t != expected || meta.n != grid.resolution() || meta.dim != grid.dim() {
                return Err(Error::Parse(format!("level {name} has t = {}, expected {expected}", meta.t)));
            }
            let file = std::fs::File::open(dir.join(format!("{name}.bin")))
                .map_err(|_| Error::MissingArtifact(format!("{name}.bin not found")))?;
            levels.push(Arc::new(ActionKernel::read_binary(&meta, std::io::BufReader::new(file))?));
        }
        if levels.is_empty() {
            return Err(Error::Parse("ladder manifest lists no levels".into()));
        }
        Ok(Self {
            spec: spec.clone(),
            grid,
            params,
            t_max,
            levels,
            cache: Mutex::new(HashMap::new()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(n: usize) -> TorusGrid {
        TorusGrid::line(n).unwrap()
    }

    fn random_kernel(grid: TorusGrid, seed: u64, t: f64) -> ActionKernel {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = grid.len();
        let data = (0..n * n)
            .map(|_| if rng.gen_bool(0.1) { f64::INFINITY } else { rng.gen_range(-1.0..3.0) })
            .collect();
        ActionKernel::from_parts(grid, t, 0.1, 1, data).unwrap()
    }

    #[test]
    fn free_particle_one_step_examples() {
        let free = HamiltonianSpec::free_particle();
        let grid = line(16);
        let params = KernelParams { base_step: 0.1, ..Default::default() };
        let k = small_time_kernel(&free, grid, &params).unwrap();
        assert_eq!(k.get(3, 3), 0.0);
        assert!((k.get(0, 4) - 0.3125).abs() < 1e-14);
        assert!((k.get(0, 12) - 0.3125).abs() < 1e-14);
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(k.get(i, j), k.get(j, i));
            }
        }
    }

    #[test]
    fn pendulum_rest_step_is_zero_at_maximum() {
        let pend = HamiltonianSpec::pendulum();
        let params = KernelParams { base_step: 0.1, ..Default::default() };
        let k = small_time_kernel(&pend, line(32), &params).unwrap();
        assert_eq!(k.get(0, 0), 0.0);
        assert!(k.get(16, 16) > 0.0);
    }

    #[test]
    fn small_time_kernel_rejects_bad_input() {
        let free = HamiltonianSpec::free_particle();
        let coarse = KernelParams { base_step: 1e-4, ..Default::default() };
        assert!(matches!(small_time_kernel(&free, line(16), &coarse), Err(Error::Kernel(_))));
        let big = KernelParams { base_step: 0.5, ..Default::default() };
        assert!(matches!(small_time_kernel(&free, line(16), &big), Err(Error::Config { .. })));
        let raw = HamiltonianSpec::cosine(1.0, 1);
        assert!(matches!(
            small_time_kernel(&raw, line(16), &KernelParams::default()),
            Err(Error::Precondition { .. })
        ));
    }

    #[test]
    fn identity_is_neutral() {
        let grid = line(12);
        let k = random_kernel(grid, 3, 0.5);
        let id = ActionKernel::identity(grid);
        assert_eq!(compose(&k, &id).unwrap().data, k.data);
        assert_eq!(compose(&id, &k).unwrap().data, k.data);
        assert_eq!(compose(&k, &id).unwrap().t, 0.5);
    }

    #[test]
    fn compose_rejects_grid_mismatch() {
        let a = ActionKernel::identity(line(8));
        let b = ActionKernel::identity(line(16));
        assert!(matches!(compose(&a, &b), Err(Error::GridMismatch { .. })));
    }

    #[test]
    fn compose_is_associative() {
        let grid = line(16);
        let (a, b, c) = (random_kernel(grid, 1, 0.1), random_kernel(grid, 2, 0.2), random_kernel(grid, 3, 0.3));
        let left = compose(&compose(&a, &b).unwrap(), &c).unwrap();
        let right = compose(&a, &compose(&b, &c).unwrap()).unwrap();
        assert!(left.sup_diff(&right).unwrap() <= 1e-12);
        assert!((left.t - 0.6).abs() < 1e-15);
    }

    #[test]
    fn kernel_power_is_repeated_squaring() {
        let free = HamiltonianSpec::free_particle();
        let grid = line(64);
        let params = KernelParams { base_step: 1.0 / 16.0, ..Default::default() };
        let k = small_time_kernel(&free, grid, &params).unwrap();
        assert_eq!(kernel_power(&k, 0, 64.0).unwrap(), k);
        let k8 = kernel_power(&k, 3, 64.0).unwrap();
        assert_eq!(k8.t, 0.5);
        // 16 cells is reachable by 8 equal steps of 2 cells
        assert!((k8.get(0, 16) - 0.0625).abs() < 1e-12);
        assert!(matches!(kernel_power(&k, 12, 64.0), Err(Error::Horizon { .. })));
    }

    #[test]
    fn ladder_free_particle_action() {
        let free = HamiltonianSpec::free_particle();
        let ladder = KernelLadder::build(&free, line(128), KernelParams::default(), 1.0).unwrap();
        let k = ladder.kernel_at(0.5).unwrap();
        let a = k.action_value(&[0.0], &[0.25]);
        assert!((a - 0.0625).abs() <= 0.02 * 0.0625);
        assert!(k.action_value(&[0.25], &[0.25]).abs() < 1e-15);
        let dx = 1.0 / 128.0;
        assert!(k.action_value(&[0.3], &[0.3]).abs() <= dx * dx / 0.5);
        let (x, y) = (0.1, 0.37);
        assert!((k.action_value(&[x], &[y]) - k.action_value(&[y], &[x])).abs() <= 1e-10);
        let k25 = ladder.kernel_at(0.25).unwrap();
        let c = compose(&k25, &k25).unwrap();
        assert!((c.get(0, 32) - 0.0625).abs() <= 0.02 * 0.0625);
    }

    #[test]
    fn off_ladder_and_horizon_errors() {
        let free = HamiltonianSpec::free_particle();
        let ladder = KernelLadder::build(&free, line(32), KernelParams { base_step: 1.0 / 64.0, ..Default::default() }, 1.0).unwrap();
        assert!(matches!(ladder.kernel_at(0.01), Err(Error::OffLadder(_))));
        assert!(matches!(ladder.kernel_at(4.0), Err(Error::Horizon { .. })));
        assert!((ladder.kernel_at(3.0 / 64.0).unwrap().t() - 3.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn relay_path_reproduces_entry() {
        let pend = HamiltonianSpec::pendulum();
        let grid = line(64);
        let params = KernelParams { base_step: 1.0 / 128.0, ..Default::default() };
        let ladder = KernelLadder::build(&pend, grid, params, 4.0).unwrap();
        for &(i, j, t) in &[(16usize, 48usize, 1.0), (5, 60, 0.5 + 3.0 / 128.0), (0, 0, 2.0), (10, 11, 1.0 / 128.0)] {
            let k = ladder.kernel_at(t).unwrap();
            let path = ladder.relay_path(i, j, t).unwrap();
            assert!((path.duration() - t).abs() < 1e-12);
            assert_eq!(*path.nodes.last().unwrap(), j);
            let cost = path.action(&pend).unwrap();
            assert!((cost - k.get(i, j)).abs() < 1e-9, "{cost} vs {}", k.get(i, j));
        }
    }

    #[test]
    fn free_particle_derivatives() {
        let free = HamiltonianSpec::free_particle();
        let ladder = KernelLadder::build(&free, line(256), KernelParams { base_step: 1.0 / 512.0, ..Default::default() }, 1.0).unwrap();
        let r = ladder.derivative_check(0.0, 0.25, 0.5).unwrap();
        assert!(!r.ambiguous);
        assert!((r.dy_minimizer - 0.5).abs() < 1e-9);
        assert!(r.error_dy <= 5e-2 && r.error_dx <= 5e-2 && r.error_dt <= 5e-2, "{r:?}");
        assert!((r.dt_numeric + 0.125).abs() <= 5e-2);
        let z = ladder.derivative_check(0.5, 0.5, 1.0 / 64.0).unwrap();
        assert_eq!(z.dy_minimizer, 0.0);
        assert_eq!(z.dt_minimizer, 0.0);
        assert!(z.dy_numeric.abs() < 1e-12 && z.dt_numeric.abs() < 1e-12);
    }

    #[test]
    fn binary_round_trip() {
        let grid = line(8);
        let k = random_kernel(grid, 9, 0.25);
        let mut buf = Vec::new();
        k.write_binary(&mut buf).unwrap();
        let back = ActionKernel::read_binary(&k.meta(), &buf[..]).unwrap();
        assert_eq!(back, k);
        let meta: KernelMeta = serde_json::from_str(&k.sidecar_json().unwrap()).unwrap();
        assert_eq!(meta, k.meta());
        assert_eq!(k.to_csv().lines().count(), 8);
    }

    #[test]
    fn two_dimensional_kernel_is_separable_sum() {
        let pend = HamiltonianSpec::pendulum();
        let params = KernelParams { base_step: 1.0 / 32.0, ..Default::default() };
        let k1 = small_time_kernel(&pend, line(8), &params).unwrap();
        let grid2 = TorusGrid::new(2, 8).unwrap();
        let k2 = small_time_kernel(&pend, grid2, &params).unwrap();
        let (i, j) = (grid2.flat([1, 7]), grid2.flat([2, 6]));
        assert!((k2.get(i, j) - (k1.get(1, 2) + k1.get(7, 6))).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn composed_kernels_satisfy_triangle_inequality(seed in 0u64..500) {
            let grid = line(10);
            let a = random_kernel(grid, seed, 0.1);
            let b = random_kernel(grid, seed + 1000, 0.1);
            let c = compose(&a, &b).unwrap();
            for i in 0..10 {
                for j in 0..10 {
                    for m in 0..10 {
                        prop_assert!(c.get(i, j) <= a.get(i, m) + b.get(m, j));
                    }
                }
            }
        }
    }

    #[test]
    fn ladder_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = HamiltonianSpec::pendulum();
        let grid = TorusGrid::line(32).unwrap();
        let params = KernelParams { base_step: 1.0 / 64.0, ..Default::default() };
        let ladder = KernelLadder::build(&spec, grid, params, 0.5).unwrap();
        ladder.save(dir.path()).unwrap();
        let back = KernelLadder::load(dir.path(), &spec, grid, params, 0.5).unwrap();
        assert_eq!(back.levels().len(), ladder.levels().len());
        for (a, b) in back.levels().iter().zip(ladder.levels()) {
            assert_eq!(a.data(), b.data());
        }
        let other = KernelLadder::load(dir.path(), &HamiltonianSpec::free_particle(), grid, params, 0.5);
        assert!(matches!(other, Err(Error::MissingArtifact(_))));
    }
}
