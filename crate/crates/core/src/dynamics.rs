//! Hamiltonian flow on the circle, characteristic arcs, calibration defects
//! and refinement of discrete minimizers by multiple shooting.
//!
//! Arc positions live in the universal cover; the torus point is
//! `wrap_unit(x)`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{periodic_delta, wrap_unit, GridFunction};
use crate::hamiltonian::{HamiltonianSpec, Kinetic};
use crate::kernel::{KernelLadder, RelayPath};
use crate::lax_oleinik::t_plus_at;
use crate::nonsmooth::differential_data;

const MAX_STEPS: f64 = 1e7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArcSample {
    pub s: f64,
    pub x: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacteristicArc {
    pub samples: Vec<ArcSample>,
    pub step: f64,
    /// `max |H(x(s), p(s)) - H(x(0), p(0))|`.
    pub energy_drift: f64,
    /// False for a relay polyline that shooting could not improve.
    pub refined: bool,
}

impl CharacteristicArc {
    pub fn first(&self) -> ArcSample {
        self.samples[0]
    }

    pub fn last(&self) -> ArcSample {
        *self.samples.last().expect("non-empty arc")
    }

    /// Samples ordered by increasing time.
    fn chronological(&self) -> Vec<ArcSample> {
        let mut s = self.samples.clone();
        if s.len() > 1 && s[0].s > s[s.len() - 1].s {
            s.reverse();
        }
        s
    }

    fn lagrangian_samples(&self, spec: &HamiltonianSpec) -> Result<(Vec<f64>, Vec<f64>)> {
        let s = self.chronological();
        let times = s.iter().map(|a| a.s).collect();
        let l = s
            .iter()
            .map(|a| spec.lagrangian_value(wrap_unit(a.x), spec.velocity(a.p)))
            .collect::<Result<_>>()?;
        Ok((times, l))
    }

    /// `int L(gamma, gamma') ds` by the composite trapezoid rule.
    pub fn action_trapezoid(&self, spec: &HamiltonianSpec) -> Result<f64> {
        let (t, l) = self.lagrangian_samples(spec)?;
        Ok(t.windows(2)
            .zip(l.windows(2))
            .map(|(t, l)| 0.5 * (t[1] - t[0]) * (l[0] + l[1]))
            .sum())
    }

    /// `int L ds` by composite Simpson on equally spaced pairs of steps,
    /// trapezoid on a leftover step.
    pub fn action(&self, spec: &HamiltonianSpec) -> Result<f64> {
        let (t, l) = self.lagrangian_samples(spec)?;
        let mut total = 0.0;
        let mut k = 0;
        while k + 2 < t.len() {
            let h0 = t[k + 1] - t[k];
            let h1 = t[k + 2] - t[k + 1];
            if (h0 - h1).abs() <= 1e-9 * h0.abs().max(1e-300) {
                total += (h0 + h1) / 6.0 * (l[k] + 4.0 * l[k + 1] + l[k + 2]);
                k += 2;
            } else {
                total += 0.5 * h0 * (l[k] + l[k + 1]);
                k += 1;
            }
        }
        if k + 1 < t.len() {
            total += 0.5 * (t[k + 1] - t[k]) * (l[k] + l[k + 1]);
        }
        Ok(total)
    }

    pub fn max_abs_energy(&self, spec: &HamiltonianSpec) -> f64 {
        self.samples
            .iter()
            .map(|a| spec.hamiltonian(wrap_unit(a.x), a.p).abs())
            .fold(0.0, f64::max)
    }

    /// CSV `s,x,p,H` with `x` wrapped onto the circle.
    pub fn to_csv(&self, spec: &HamiltonianSpec) -> String {
        let mut out = String::from("s,x,p,H\n");
        for a in &self.samples {
            let x = wrap_unit(a.x);
            let _ = writeln!(out, "{:.17e},{:.17e},{:.17e},{:.17e}", a.s, x, a.p, spec.hamiltonian(x, a.p));
        }
        out
    }
}

fn verlet_step(spec: &HamiltonianSpec, x: f64, p: f64, h: f64) -> (f64, f64) {
    let ph = p - 0.5 * h * spec.potential_derivative(x);
    let x1 = x + h * spec.velocity(ph);
    let p1 = ph - 0.5 * h * spec.potential_derivative(x1);
    (x1, p1)
}

fn midpoint_step(spec: &HamiltonianSpec, x: f64, p: f64, h: f64) -> Result<(f64, f64)> {
    let (mut x1, mut p1) = verlet_step(spec, x, p, h);
    for _ in 0..50 {
        let (xm, pm) = (0.5 * (x + x1), 0.5 * (p + p1));
        let f = [x1 - x - h * spec.velocity(pm), p1 - p + h * spec.potential_derivative(xm)];
        if f[0].abs().max(f[1].abs()) <= 1e-14 * (1.0 + x1.abs() + p1.abs()) {
            return Ok((x1, p1));
        }
        let a = [
            [1.0, -0.5 * h * spec.velocity_derivative(pm)],
            [0.5 * h * spec.potential_second_derivative(xm), 1.0],
        ];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        x1 -= (a[1][1] * f[0] - a[0][1] * f[1]) / det;
        p1 -= (a[0][0] * f[1] - a[1][0] * f[0]) / det;
    }
    Err(Error::NewtonDivergence {
        iterations: 50,
        residual: f64::NAN,
    })
}

/// Integrates the Hamiltonian flow from `(x0, p0)` over signed time `t` with
/// step at most `h`: Stormer-Verlet for mechanical Hamiltonians, implicit
/// midpoint otherwise.
pub fn flow(spec: &HamiltonianSpec, x0: f64, p0: f64, t: f64, h: f64) -> Result<CharacteristicArc> {
    if !(h > 0.0) {
        return Err(Error::Config {
            field: "dynamics.h".into(),
            message: format!("step must be positive, got {h}"),
        });
    }
    let steps = (t.abs() / h).ceil();
    if steps > MAX_STEPS {
        return Err(Error::Precondition {
            what: "flow step count".into(),
            residual: steps,
            tolerance: MAX_STEPS,
        });
    }
    let steps = steps.max(1.0) as usize;
    let dt = t / steps as f64;
    let h0 = spec.hamiltonian(wrap_unit(x0), p0);
    let mut samples = Vec::with_capacity(steps + 1);
    samples.push(ArcSample { s: 0.0, x: x0, p: p0 });
    let (mut x, mut p) = (x0, p0);
    let mut drift: f64 = 0.0;
    for k in 1..=steps {
        (x, p) = match spec.kinetic {
            Kinetic::Mechanical => verlet_step(spec, x, p, dt),
            Kinetic::QuadraticGeneric { .. } => midpoint_step(spec, x, p, dt)?,
        };
        drift = drift.max((spec.hamiltonian(wrap_unit(x), p) - h0).abs());
        samples.push(ArcSample { s: k as f64 * dt, x, p });
    }
    Ok(CharacteristicArc {
        samples,
        step: dt.abs(),
        energy_drift: drift,
        refined: true,
    })
}

fn flow_end(spec: &HamiltonianSpec, x: f64, p: f64, t: f64, steps: usize) -> Result<(f64, f64)> {
    let dt = t / steps as f64;
    let (mut x, mut p) = (x, p);
    for _ in 0..steps {
        (x, p) = match spec.kinetic {
            Kinetic::Mechanical => verlet_step(spec, x, p, dt),
            Kinetic::QuadraticGeneric { .. } => midpoint_step(spec, x, p, dt)?,
        };
    }
    Ok((x, p))
}

/// `u(gamma(b)) - u(gamma(a)) - int_a^b L ds` over the arc's time span, the
/// integral by the composite trapezoid rule on the samples.
pub fn calibration_defect(u: &GridFunction, arc: &CharacteristicArc, spec: &HamiltonianSpec) -> Result<f64> {
    let s = arc.chronological();
    let a = s[0];
    let b = s[s.len() - 1];
    let du = u.interpolate(&[wrap_unit(b.x)]) - u.interpolate(&[wrap_unit(a.x)]);
    let c = spec.critical_value.unwrap_or(0.0);
    Ok(du - arc.action_trapezoid(spec)? - c * (b.s - a.s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineOptions {
    /// Longest shooting segment.
    pub segment: f64,
    /// Integration step.
    pub step: f64,
    pub max_iterations: usize,
    /// Endpoint tolerance.
    pub tolerance: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            segment: 0.25,
            step: 1e-3,
            max_iterations: 50,
            tolerance: 1e-10,
        }
    }
}

/// Position and velocity of the relay polyline at time `s`.
fn polyline_at(path: &RelayPath, s: f64) -> (f64, f64) {
    let k = match path.times.iter().rposition(|&t| t <= s) {
        Some(k) => k.min(path.segments() - 1),
        None => 0,
    };
    let v = path.velocity(k)[0];
    (path.lifts[k][0] + v * (s - path.times[k]), v)
}

/// Turns a relay polyline into an arc without refinement.
pub fn polyline_arc(path: &RelayPath, spec: &HamiltonianSpec) -> Result<CharacteristicArc> {
    let mut samples = Vec::with_capacity(path.times.len() * 2);
    for k in 0..path.segments() {
        let v = path.velocity(k)[0];
        let p = spec.momentum(v)?;
        samples.push(ArcSample { s: path.times[k], x: path.lifts[k][0], p });
        samples.push(ArcSample { s: path.times[k + 1], x: path.lifts[k + 1][0], p });
    }
    samples.dedup_by(|b, a| a.s == b.s && a.x == b.x && a.p == b.p);
    let h0 = spec.hamiltonian(wrap_unit(samples[0].x), samples[0].p);
    let drift = samples
        .iter()
        .map(|a| (spec.hamiltonian(wrap_unit(a.x), a.p) - h0).abs())
        .fold(0.0, f64::max);
    Ok(CharacteristicArc {
        samples,
        step: path.duration() / path.segments() as f64,
        energy_drift: drift,
        refined: false,
    })
}

/// Refines a discrete minimizer into a flow arc with the same endpoints by
/// multiple shooting: unknowns are the initial momentum and the state at each
/// interior shooting node, seeded from the relay polyline. Returns the
/// unrefined polyline, flagged, when Newton fails.
pub fn minimizer_refine(path: &RelayPath, spec: &HamiltonianSpec, opts: &RefineOptions) -> Result<CharacteristicArc> {
    if path.grid.dim() != 1 {
        return Err(Error::Unsupported("minimizer refinement in dimension 2".into()));
    }
    let total = path.duration();
    let xa = path.start()[0];
    let xb = path.end()[0];
    let m = ((total / opts.segment).ceil() as usize).max(1);
    let dt = total / m as f64;
    let steps = (((dt / opts.step).ceil() as usize).max(2) + 1) / 2 * 2;
    // unknowns: p0, then (x_k, p_k) for k = 1..m-1
    let dim = 2 * m - 1;
    let mut z = DVector::zeros(dim);
    z[0] = spec.momentum(polyline_at(path, 0.0).1)?;
    for k in 1..m {
        let (x, v) = polyline_at(path, k as f64 * dt);
        z[2 * k - 1] = x;
        z[2 * k] = spec.momentum(v)?;
    }
    let state = |z: &DVector<f64>, k: usize| -> (f64, f64) {
        if k == 0 {
            (xa, z[0])
        } else {
            (z[2 * k - 1], z[2 * k])
        }
    };
    let residual = |z: &DVector<f64>| -> Result<DVector<f64>> {
        let ends: Vec<(f64, f64)> = (0..m)
            .into_par_iter()
            .map(|k| {
                let (x, p) = state(z, k);
                flow_end(spec, x, p, dt, steps)
            })
            .collect::<Result<_>>()?;
        let mut r = DVector::zeros(dim);
        for k in 0..m {
            let (xe, pe) = ends[k];
            if k + 1 < m {
                let (xn, pn) = state(z, k + 1);
                r[2 * k] = xe - xn;
                r[2 * k + 1] = pe - pn;
            } else {
                r[2 * k] = xe - xb;
            }
        }
        Ok(r)
    };
    let mut r = residual(&z)?;
    let mut converged = r.amax() <= opts.tolerance;
    for _ in 0..opts.max_iterations {
        if converged {
            break;
        }
        let mut jac = DMatrix::zeros(dim, dim);
        let eps = 1e-7;
        for c in 0..dim {
            let mut zp = z.clone();
            let scale = eps * (1.0 + z[c].abs());
            zp[c] += scale;
            let rp = residual(&zp)?;
            jac.set_column(c, &((rp - &r) / scale));
        }
        let Some(step) = jac.lu().solve(&(-&r)) else {
            break;
        };
        let mut lambda = 1.0;
        let norm = r.norm();
        let mut accepted = false;
        for _ in 0..20 {
            let trial = &z + &step * lambda;
            if let Ok(rt) = residual(&trial) {
                if rt.norm() < norm || rt.amax() <= opts.tolerance {
                    z = trial;
                    r = rt;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            break;
        }
        converged = r.amax() <= opts.tolerance;
    }
    if !converged {
        return polyline_arc(path, spec);
    }
    let mut samples = Vec::with_capacity(m * steps + 1);
    for k in 0..m {
        let (x, p) = state(&z, k);
        let piece = flow(spec, x, p, dt, dt / steps as f64 * (1.0 + 1e-12))?;
        let offset = k as f64 * dt;
        let skip = usize::from(k > 0);
        samples.extend(piece.samples.iter().skip(skip).map(|a| ArcSample {
            s: offset + a.s,
            x: a.x,
            p: a.p,
        }));
    }
    let h0 = spec.hamiltonian(wrap_unit(samples[0].x), samples[0].p);
    let drift = samples
        .iter()
        .map(|a| (spec.hamiltonian(wrap_unit(a.x), a.p) - h0).abs())
        .fold(0.0, f64::max);
    Ok(CharacteristicArc {
        samples,
        step: dt / steps as f64,
        energy_drift: drift,
        refined: true,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphEvolutionReport {
    pub t: f64,
    /// One-sided Hausdorff distance from the flowed superdifferential graph
    /// to the gradient graph of `T^+_t phi`.
    pub distance: f64,
    pub tolerance: f64,
    pub samples: usize,
    /// Set when `t` exceeds the supplied regularity time; the gradient graph
    /// then need not be a graph of a function.
    pub beyond_regular_time: bool,
    pub pass: bool,
}

/// Samples `graph(D^+ phi)` (interior corner directions included), flows it
/// by `Phi^{-t}` and measures the distance to the polyline through the
/// centered gradients of `T^+_t phi`. Distances are Euclidean in `(x, p)`
/// with `x` periodic.
pub fn graph_evolution_check(
    phi: &GridFunction,
    ladder: &KernelLadder,
    t: f64,
    corner_samples: usize,
    regular_time: Option<f64>,
) -> Result<GraphEvolutionReport> {
    if phi.grid().dim() != 1 {
        return Err(Error::Unsupported("graph evolution in dimension 2".into()));
    }
    let spec = ladder.spec();
    let tp = t_plus_at(phi, ladder, t)?;
    let n = phi.len();
    let dx = phi.grid().spacing();
    let graph: Vec<(f64, f64)> = (0..n)
        .map(|i| (i as f64 * dx, (tp.get((i + 1) % n) - tp.get((i + n - 1) % n)) / (2.0 * dx)))
        .collect();
    let dd = differential_data(phi)?;
    let mut points = Vec::new();
    for (i, d) in dd.nodes.iter().enumerate() {
        let x = i as f64 * dx;
        match (d.singular, d.superdifferential) {
            (true, Some((lo, hi))) => {
                let m = corner_samples.max(1) + 1;
                for q in 0..=m {
                    points.push((d.corner.unwrap_or(x), lo + (hi - lo) * q as f64 / m as f64));
                }
            }
            _ => points.extend(d.reachable.iter().map(|&p| (x, p))),
        }
    }
    let h = (t / 16.0).min(1e-3);
    let flowed: Vec<(f64, f64)> = points
        .par_iter()
        .map(|&(x, p)| {
            let arc = flow(spec, x, p, -t, h)?;
            let e = arc.last();
            Ok((wrap_unit(e.x), e.p))
        })
        .collect::<Result<_>>()?;
    let distance = flowed
        .par_iter()
        .map(|&(x, p)| distance_to_periodic_polyline(&graph, x, p))
        .reduce(|| 0.0, f64::max);
    let tolerance = 2.0 * dx;
    let beyond = regular_time.is_some_and(|tau| t > tau);
    Ok(GraphEvolutionReport {
        t,
        distance,
        tolerance,
        samples: flowed.len(),
        beyond_regular_time: beyond,
        pass: distance <= tolerance,
    })
}

/// First time at which backward characteristics launched from the centered
/// gradient graph of `phi` change their circular order, i.e. the first shock
/// of `T^+_t phi`. `None` if no crossing happens before `t_max`.
pub fn characteristic_crossing_time(phi: &GridFunction, spec: &HamiltonianSpec, t_max: f64, h: f64) -> Result<Option<f64>> {
    if phi.grid().dim() != 1 {
        return Err(Error::Unsupported("characteristics in dimension 2".into()));
    }
    let n = phi.len();
    let dx = phi.grid().spacing();
    let arcs: Vec<CharacteristicArc> = (0..n)
        .into_par_iter()
        .map(|i| {
            let p = (phi.get((i + 1) % n) - phi.get((i + n - 1) % n)) / (2.0 * dx);
            flow(spec, i as f64 * dx, p, -t_max, h)
        })
        .collect::<Result<_>>()?;
    let steps = arcs[0].samples.len();
    for k in 1..steps {
        let crossed = (0..n).any(|i| {
            let (a, b) = (arcs[i].samples[k].x, arcs[(i + 1) % n].samples[k].x);
            // unwrapped coordinates: the neighbour starts dx ahead (one period at the seam)
            let offset = if i + 1 == n { 1.0 } else { 0.0 };
            b + offset - a <= 0.0
        });
        if crossed {
            return Ok(Some(arcs[0].samples[k].s.abs()));
        }
    }
    Ok(None)
}

/// Euclidean distance from `(x, p)` to the closed polyline through `graph`
/// (nodes in increasing `x` on the circle).
pub fn distance_to_periodic_polyline(graph: &[(f64, f64)], x: f64, p: f64) -> f64 {
    let n = graph.len();
    let mut best = f64::INFINITY;
    for i in 0..n {
        let (x0, p0) = graph[i];
        let (x1r, p1) = graph[(i + 1) % n];
        let dx0 = periodic_delta(x0, x);
        let seg = periodic_delta(x0, x1r);
        if dx0.abs() > 0.25 {
            continue;
        }
        // segment from (0, p0) to (seg, p1), point at (dx0, p)
        let (ux, up) = (seg, p1 - p0);
        let (wx, wp) = (dx0, p - p0);
        let len2 = ux * ux + up * up;
        let s = if len2 > 0.0 { ((wx * ux + wp * up) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let d = ((wx - s * ux).powi(2) + (wp - s * up).powi(2)).sqrt();
        best = best.min(d);
    }
    best
}
