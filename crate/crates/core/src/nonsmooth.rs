//! Discrete semiconcavity, superdifferentials and reachable gradients of grid
//! functions on the circle.
//!
//! Corners are located by clustering nodes whose slope jump exceeds a
//! curvature-scaled threshold; the one-sided limits at a corner come from
//! quadratic extrapolation of each smooth side up to the intersection point.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridFunction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    ConcaveSide,
    ConvexSide,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemiconcavityReport {
    pub constant: f64,
    pub side: Side,
}

impl SemiconcavityReport {
    pub fn passes(&self, bound: f64) -> bool {
        self.constant <= bound
    }
}

/// Largest signed second difference quotient over every node and axis.
fn max_second_difference(phi: &GridFunction, sign: f64) -> f64 {
    let grid = phi.grid();
    let n = grid.resolution();
    let h = grid.spacing();
    let v = phi.values();
    let mut best: f64 = 0.0;
    for i in 0..phi.len() {
        let a = grid.axes(i);
        for axis in 0..grid.dim() {
            let mut lo = a;
            let mut hi = a;
            lo[axis] = (a[axis] + n - 1) % n;
            hi[axis] = (a[axis] + 1) % n;
            let d2 = (v[grid.flat(lo)] - 2.0 * v[i] + v[grid.flat(hi)]) / (h * h);
            best = best.max(sign * d2);
        }
    }
    best
}

/// Smallest `C` with `phi[i-1] - 2 phi[i] + phi[i+1] <= C dx^2` everywhere.
/// In two dimensions the bound is taken axis by axis.
pub fn semiconcavity_constant(phi: &GridFunction) -> SemiconcavityReport {
    SemiconcavityReport {
        constant: max_second_difference(phi, 1.0),
        side: Side::ConcaveSide,
    }
}

/// Smallest `C` with `phi[i-1] - 2 phi[i] + phi[i+1] >= -C dx^2` everywhere.
pub fn semiconvexity_constant(phi: &GridFunction) -> SemiconcavityReport {
    SemiconcavityReport {
        constant: max_second_difference(phi, -1.0),
        side: Side::ConvexSide,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDifferential {
    /// Left derivative (second-order one-sided stencil away from corners,
    /// extrapolated limit at a corner).
    pub left: f64,
    pub right: f64,
    pub singular: bool,
    /// `D^+` as `[lo, hi]`; `None` at a convex corner.
    pub superdifferential: Option<(f64, f64)>,
    /// `D^*`: one gradient at smooth nodes, the two one-sided limits at a corner.
    pub reachable: Vec<f64>,
    /// Estimated corner location for singular nodes.
    pub corner: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifferentialData {
    pub nodes: Vec<NodeDifferential>,
    pub gap_tol: f64,
    pub spacing: f64,
}

impl DifferentialData {
    pub fn singular_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].singular).collect()
    }

    /// Every `(node, p)` with `p` in `D^*`.
    pub fn reachable_samples(&self) -> Vec<(usize, f64)> {
        self.nodes
            .iter()
            .enumerate()
            .flat_map(|(i, d)| d.reachable.iter().map(move |&p| (i, p)))
            .collect()
    }

    /// CSV `node,left,right,singular`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("node,left,right,singular\n");
        for (i, d) in self.nodes.iter().enumerate() {
            let _ = writeln!(out, "{i},{:.17e},{:.17e},{}", d.left, d.right, d.singular as u8);
        }
        out
    }
}

/// Quadratic through three equally spaced samples, as `(a, b, c)` in
/// `a + b (x - x0) + c (x - x0)^2`.
fn quadratic(x0: f64, h: f64, f0: f64, f1: f64, f2: f64) -> (f64, f64, f64, f64) {
    let c = (f0 - 2.0 * f1 + f2) / (2.0 * h * h);
    let b = (f1 - f0) / h - c * h;
    (x0, f0, b, c)
}

fn eval(q: (f64, f64, f64, f64), x: f64) -> f64 {
    let d = x - q.0;
    q.1 + q.2 * d + q.3 * d * d
}

fn slope(q: (f64, f64, f64, f64), x: f64) -> f64 {
    q.2 + 2.0 * q.3 * (x - q.0)
}

/// Root of `p(x) - q(x)` in `[lo, hi]` nearest the middle, if any.
fn crossing(p: (f64, f64, f64, f64), q: (f64, f64, f64, f64), lo: f64, hi: f64) -> Option<f64> {
    let f = |x: f64| eval(p, x) - eval(q, x);
    let m = 64;
    let mut best: Option<f64> = None;
    let mid = 0.5 * (lo + hi);
    for k in 0..m {
        let (mut a, mut b) = (lo + (hi - lo) * k as f64 / m as f64, lo + (hi - lo) * (k + 1) as f64 / m as f64);
        let (mut fa, fb) = (f(a), f(b));
        if fa == 0.0 {
            b = a;
        } else if fa * fb > 0.0 {
            continue;
        }
        for _ in 0..60 {
            if b - a < 1e-15 {
                break;
            }
            let c = 0.5 * (a + b);
            let fc = f(c);
            if fa * fc <= 0.0 {
                b = c;
            } else {
                a = c;
                fa = fc;
            }
        }
        let r = 0.5 * (a + b);
        if best.map_or(true, |x| (r - mid).abs() < (x - mid).abs()) {
            best = Some(r);
        }
    }
    best
}

/// Default corner threshold `10 dx max(C, 1)` with `C` the semiconcavity constant.
pub fn default_gap_tol(phi: &GridFunction) -> f64 {
    10.0 * phi.grid().spacing() * semiconcavity_constant(phi).constant.max(1.0)
}

pub fn differential_data(phi: &GridFunction) -> Result<DifferentialData> {
    differential_data_with(phi, default_gap_tol(phi))
}

pub fn differential_data_with(phi: &GridFunction, gap_tol: f64) -> Result<DifferentialData> {
    if phi.grid().dim() != 1 {
        return Err(Error::Unsupported("superdifferentials in dimension 2".into()));
    }
    let n = phi.len();
    let h = phi.grid().spacing();
    let v = phi.values();
    let at = |i: isize| v[i.rem_euclid(n as isize) as usize];
    let jump = |i: usize| {
        let i = i as isize;
        ((at(i) - at(i - 1)) - (at(i + 1) - at(i))) / h
    };
    let flagged: Vec<bool> = (0..n).map(|i| jump(i).abs() > gap_tol).collect();

    let mut nodes: Vec<NodeDifferential> = (0..n)
        .map(|i| {
            let ii = i as isize;
            let centered = (at(ii + 1) - at(ii - 1)) / (2.0 * h);
            let near = |k: isize| flagged[k.rem_euclid(n as isize) as usize];
            let left = if near(ii - 1) || near(ii - 2) {
                centered
            } else {
                (3.0 * at(ii) - 4.0 * at(ii - 1) + at(ii - 2)) / (2.0 * h)
            };
            let right = if near(ii + 1) || near(ii + 2) {
                centered
            } else {
                (-3.0 * at(ii) + 4.0 * at(ii + 1) - at(ii + 2)) / (2.0 * h)
            };
            NodeDifferential {
                left,
                right,
                singular: false,
                superdifferential: Some((centered, centered)),
                reachable: vec![centered],
                corner: None,
            }
        })
        .collect();

    if flagged.iter().all(|&f| f) {
        // no smooth side to extrapolate from: report raw one-sided quotients
        for (i, d) in nodes.iter_mut().enumerate() {
            let ii = i as isize;
            let l = (at(ii) - at(ii - 1)) / h;
            let r = (at(ii + 1) - at(ii)) / h;
            d.left = l;
            d.right = r;
            d.singular = true;
            d.superdifferential = (r <= l).then_some((r, l));
            d.reachable = vec![r, l];
        }
        return Ok(DifferentialData { nodes, gap_tol, spacing: h });
    }

    // clusters of consecutive flagged nodes, walking from a smooth node
    let start = flagged.iter().position(|&f| !f).expect("some smooth node");
    let mut clusters: Vec<(isize, isize)> = Vec::new();
    let mut k = 0;
    while k < n {
        let i = (start + k) % n;
        if flagged[i] {
            let a = (start + k) as isize;
            let mut b = a;
            while flagged[((b + 1) as usize) % n] {
                b += 1;
            }
            clusters.push((a, b));
            k += (b - a + 1) as usize;
        } else {
            k += 1;
        }
    }

    for (a, b) in clusters {
        let xl = (a - 3) as f64 * h;
        let pl = quadratic(xl, h, at(a - 3), at(a - 2), at(a - 1));
        let xr = (b + 1) as f64 * h;
        let pr = quadratic(xr, h, at(b + 1), at(b + 2), at(b + 3));
        let lo = (a - 1) as f64 * h;
        let hi = (b + 1) as f64 * h;
        let corner = crossing(pl, pr, lo, hi).unwrap_or(0.5 * (lo + hi));
        let g_left = slope(pl, corner);
        let g_right = slope(pr, corner);
        let rep = (corner / h).round() as isize;
        for m in a..=b {
            let idx = m.rem_euclid(n as isize) as usize;
            let x = m as f64 * h;
            let d = &mut nodes[idx];
            if m == rep {
                d.left = g_left;
                d.right = g_right;
                d.singular = true;
                d.superdifferential = (g_right <= g_left).then_some((g_right, g_left));
                d.reachable = vec![g_right, g_left];
                d.corner = Some(corner.rem_euclid(1.0));
            } else {
                let g = if x < corner { slope(pl, x) } else { slope(pr, x) };
                d.left = g;
                d.right = g;
                d.superdifferential = Some((g, g));
                d.reachable = vec![g];
            }
        }
        if rep < a || rep > b {
            // the corner sits just outside the flagged block
            let idx = rep.rem_euclid(n as isize) as usize;
            let d = &mut nodes[idx];
            d.left = g_left;
            d.right = g_right;
            d.singular = true;
            d.superdifferential = (g_right <= g_left).then_some((g_right, g_left));
            d.reachable = vec![g_right, g_left];
            d.corner = Some(corner.rem_euclid(1.0));
        }
    }
    Ok(DifferentialData { nodes, gap_tol, spacing: h })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContactReport {
    pub contact_nodes: usize,
    pub interior_nodes: usize,
    /// Largest `|Du - Dv|` on the contact set.
    pub derivative_gap: f64,
    pub derivative_tolerance: f64,
    /// Largest difference quotient of the shared gradient over interior
    /// contact pairs at distance at most a quarter turn.
    pub lipschitz: f64,
    pub lipschitz_bound: f64,
    pub worst_pair: Option<(usize, usize)>,
    pub pass: bool,
}

/// Checks that a semiconcave `u` and a semiconvex `v <= u` share a gradient
/// on their contact set, and that this gradient is `4C`-Lipschitz there.
pub fn contact_set_lipschitz_check(
    u: &GridFunction,
    v: &GridFunction,
    c: f64,
    contact_tol: f64,
    derivative_tol: f64,
) -> Result<ContactReport> {
    u.grid().ensure_same(v.grid())?;
    if u.grid().dim() != 1 {
        return Err(Error::Unsupported("contact sets in dimension 2".into()));
    }
    let n = u.len();
    let h = u.grid().spacing();
    let worst_order = u
        .values()
        .iter()
        .zip(v.values())
        .map(|(a, b)| b - a)
        .fold(f64::NEG_INFINITY, f64::max);
    if worst_order > contact_tol {
        return Err(Error::Precondition {
            what: "semiconcave function must lie above the semiconvex one".into(),
            residual: worst_order,
            tolerance: contact_tol,
        });
    }
    let in_a: Vec<bool> = (0..n).map(|i| u.get(i) - v.get(i) <= contact_tol).collect();
    let grad = |f: &GridFunction, i: usize| (f.get((i + 1) % n) - f.get((i + n - 1) % n)) / (2.0 * h);
    let contact: Vec<usize> = (0..n).filter(|&i| in_a[i]).collect();
    let derivative_gap = contact
        .iter()
        .map(|&i| (grad(u, i) - grad(v, i)).abs())
        .fold(0.0, f64::max);
    let interior: Vec<usize> = contact
        .iter()
        .copied()
        .filter(|&i| in_a[(i + 1) % n] && in_a[(i + n - 1) % n])
        .collect();
    let du: Vec<f64> = interior.iter().map(|&i| grad(u, i)).collect();
    let reach = n / 4;
    let mut lipschitz: f64 = 0.0;
    let mut worst_pair = None;
    for (a, &i) in interior.iter().enumerate() {
        for (b, &j) in interior.iter().enumerate().skip(a + 1) {
            let d = u.grid().index_distance(i, j);
            if d == 0 || d > reach {
                continue;
            }
            let q = (du[a] - du[b]).abs() / (d as f64 * h);
            if q > lipschitz {
                lipschitz = q;
                worst_pair = Some((i, j));
            }
        }
    }
    let lipschitz_bound = 4.0 * c * 1.1;
    Ok(ContactReport {
        contact_nodes: contact.len(),
        interior_nodes: interior.len(),
        derivative_gap,
        derivative_tolerance: derivative_tol,
        lipschitz,
        lipschitz_bound,
        worst_pair,
        pass: derivative_gap <= derivative_tol && lipschitz <= lipschitz_bound,
    })
}
