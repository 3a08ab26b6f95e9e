//! Barrier `B(t,x) = u(x) - T^+_t u(x)`, cut time, cut locus, Aubry set and
//! the partition of `graph(D^+ u)` into reachable and interior directions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::flow;
use crate::error::{Error, Result};
use crate::grid::{periodic_delta, wrap_unit, GridFunction};
use crate::kernel::KernelLadder;
use crate::lax_oleinik::{grid_noise, t_minus, t_minus_at, t_plus, t_plus_at, weak_kam_limit, Direction, OperatorTag, SemigroupEvolution};
use crate::nonsmooth::differential_data;

/// Barrier snapshots at the ladder level times plus the checks run on them.
#[derive(Debug, Clone)]
pub struct Barrier {
    pub evolution: SemigroupEvolution,
    /// `max_k |T^-_{t_k} u - u|_inf` over the levels.
    pub solution_residual: f64,
    /// `max_k |B(t_k) - (T^-T^+ - T^+T^-) u|_inf`.
    pub commutator_residual: f64,
    /// Smallest barrier value seen.
    pub min_value: f64,
    /// Largest decrease of `B(., x)` between consecutive times.
    pub monotonicity_defect: f64,
    pub tolerance: f64,
}

impl Barrier {
    /// Nonnegativity and monotonicity within `2 tol`, commutator identity within `2 tol`.
    pub fn passes(&self) -> bool {
        let slack = 2.0 * self.tolerance;
        self.min_value >= -slack && self.monotonicity_defect <= slack && self.commutator_residual <= slack
    }
}

/// Computes `B(t,.)` at every ladder level time after checking that `u` is a
/// fixed point of `T^-` within `tol`.
pub fn barrier(u: &GridFunction, ladder: &KernelLadder, tol: f64) -> Result<Barrier> {
    u.grid().ensure_same(ladder.grid())?;
    let levels = ladder.levels();
    let rows: Vec<(f64, f64, GridFunction)> = levels
        .par_iter()
        .map(|k| {
            let tm = t_minus(u, k)?;
            let tp = t_plus(u, k)?;
            let b = u.zip_with(&tp, |a, c| a - c)?;
            let comm = t_minus(&tp, k)?.zip_with(&t_plus(&tm, k)?, |a, c| a - c)?;
            Ok((tm.sup_diff(u)?, b.sup_diff(&comm)?, b))
        })
        .collect::<Result<_>>()?;
    let solution_residual = rows.iter().map(|r| r.0).fold(0.0, f64::max);
    if solution_residual > tol {
        return Err(Error::Precondition {
            what: "barrier: sup |T^-_t u - u| over the ladder".into(),
            residual: solution_residual,
            tolerance: tol,
        });
    }
    let commutator_residual = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    let snapshots: Vec<GridFunction> = rows.into_iter().map(|r| r.2).collect();
    let min_value = snapshots.iter().map(|s| s.min()).fold(f64::INFINITY, f64::min);
    let monotonicity_defect = snapshots
        .windows(2)
        .flat_map(|w| w[0].values().iter().zip(w[1].values()).map(|(a, b)| a - b).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    let evolution = SemigroupEvolution::new(OperatorTag::Barrier, ladder.level_times(), snapshots)?;
    Ok(Barrier {
        evolution,
        solution_residual,
        commutator_residual,
        min_value,
        monotonicity_defect,
        tolerance: tol,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CutTolerances {
    /// Scale of the barrier threshold, normally `Lip(u)`.
    pub scale: f64,
    /// Barrier level at the horizon below which a node joins the Aubry set.
    pub aubry: f64,
    /// Bisection steps between consecutive ladder levels. Each step halves
    /// the smallest dyadic component of the probed time, and with it raises
    /// the threshold, so this stays small.
    pub bisection_depth: u32,
}

impl CutTolerances {
    /// `aubry = dx^2 Lip(u)`: `B` grows quadratically off the Aubry set, so
    /// one cell away it already exceeds this.
    pub fn for_function(u: &GridFunction) -> Self {
        let dx = u.grid().spacing();
        let scale = u.lipschitz_constant().max(1e-12);
        Self {
            scale,
            aubry: dx * dx * scale,
            bisection_depth: 4,
        }
    }

    /// Barrier level below which a node counts as calibrated up to `t`: the
    /// grid noise of `T^+_t` scaled by `Lip(u)`.
    pub fn threshold(&self, ladder: &KernelLadder, t: f64) -> Result<f64> {
        grid_noise(ladder, t, self.scale)
    }
}

#[derive(Debug, Clone)]
pub struct CutProfile {
    pub u: GridFunction,
    pub barrier: SemigroupEvolution,
    /// Per-node cut time, `f64::INFINITY` on the Aubry set.
    pub tau: Vec<f64>,
    pub cut_set: Vec<usize>,
    pub aubry_set: Vec<usize>,
    pub gstar: Vec<(f64, f64)>,
    pub gsharp: Vec<(f64, f64)>,
    /// Per-node cap on the threshold: half the final barrier height, or the
    /// Aubry tolerance on the Aubry set.
    pub node_cap: Vec<f64>,
    pub tolerances: CutTolerances,
}

#[derive(Debug, Clone, Serialize)]
pub struct CutSummary {
    pub schema: u32,
    pub cut_nodes: Vec<usize>,
    pub aubry_nodes: Vec<usize>,
    pub tolerances: CutTolerances,
    pub t_max: f64,
}

impl CutProfile {
    /// Threshold applied to `B(t, node)`.
    pub fn node_threshold(&self, ladder: &KernelLadder, node: usize, t: f64) -> Result<f64> {
        Ok(self.tolerances.threshold(ladder, t)?.min(self.node_cap[node]))
    }

    /// Nodes with `tau >= t`.
    pub fn super_level(&self, t: f64) -> Vec<bool> {
        self.tau.iter().map(|&s| s >= t).collect()
    }

    /// Cut time at `x` by nearest node.
    pub fn tau_at(&self, x: f64) -> f64 {
        self.tau[self.u.grid().nearest(&[x])]
    }

    /// Consistency of the sets with `tau`.
    pub fn partition_consistent(&self) -> bool {
        let cut_ok = (0..self.tau.len()).all(|i| (self.tau[i] == 0.0) == self.cut_set.contains(&i));
        let aubry_ok = (0..self.tau.len()).all(|i| self.tau[i].is_infinite() == self.aubry_set.contains(&i));
        cut_ok && aubry_ok && self.cut_set.iter().all(|i| !self.aubry_set.contains(i))
    }

    /// Nodes whose finite `tau` exceeds both neighbors by more than `step`.
    /// Upper semicontinuity is only heuristic on a grid, so this is a report.
    pub fn isolated_peaks(&self, step: f64) -> Vec<usize> {
        let n = self.tau.len();
        (0..n)
            .filter(|&i| {
                let (l, r) = (self.tau[(i + n - 1) % n], self.tau[(i + 1) % n]);
                self.tau[i].is_finite() && self.tau[i] > l + step && self.tau[i] > r + step
            })
            .collect()
    }

    /// CSV `node,x,tau,B_t=<t_k>...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("node,x,tau");
        for t in &self.barrier.times {
            let _ = write!(out, ",B_t={t:.17e}");
        }
        out.push('\n');
        let g = self.u.grid();
        for i in 0..self.tau.len() {
            let tau = if self.tau[i].is_infinite() { "inf".to_string() } else { format!("{:.17e}", self.tau[i]) };
            let _ = write!(out, "{i},{:.17e},{tau}", g.x(i));
            for s in &self.barrier.snapshots {
                let _ = write!(out, ",{:.17e}", s.get(i));
            }
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> CutSummary {
        CutSummary {
            schema: 1,
            cut_nodes: self.cut_set.clone(),
            aubry_nodes: self.aubry_set.clone(),
            tolerances: self.tolerances,
            t_max: *self.barrier.times.last().unwrap_or(&0.0),
        }
    }
}

/// `tau(x) = sup{t : B(t,x) <= tol}` scanned over the ladder levels, then
/// bisected on multiples of the base step inside the first failing level.
/// Nodes whose barrier stays below `tol.aubry` up to the horizon form the
/// Aubry set. Elsewhere the threshold is `min(tol.threshold, B(T)/2)` so
/// that nodes next to the Aubry set, whose final barrier is itself small,
/// still get a finite cut time.
pub fn cut_time_map(u: &GridFunction, ladder: &KernelLadder, tol: CutTolerances) -> Result<CutProfile> {
    if u.grid().dim() != 1 {
        return Err(Error::Unsupported("cut time in dimension 2".into()));
    }
    u.grid().ensure_same(ladder.grid())?;
    let levels = ladder.levels();
    let times = ladder.level_times();
    let snapshots: Vec<GridFunction> = levels
        .par_iter()
        .map(|k| u.zip_with(&t_plus(u, k)?, |a, b| a - b))
        .collect::<Result<_>>()?;
    let barrier = SemigroupEvolution::new(OperatorTag::Barrier, times.clone(), snapshots)?;
    let n = u.len();
    let last = barrier.snapshots.last().expect("ladder has a level");
    let level_thr = times.iter().map(|&t| tol.threshold(ladder, t)).collect::<Result<Vec<_>>>()?;
    let mut tau = vec![0.0; n];
    let mut node_cap = vec![f64::INFINITY; n];
    // (node, passing step count, failing step count)
    let mut brackets: Vec<(usize, u64, u64)> = Vec::new();
    for i in 0..n {
        let history: Vec<f64> = barrier.snapshots.iter().map(|s| s.get(i)).collect();
        if history.iter().all(|&b| b <= tol.aubry) {
            tau[i] = f64::INFINITY;
            node_cap[i] = tol.aubry;
            continue;
        }
        node_cap[i] = 0.5 * last.get(i);
        match (0..history.len()).position(|k| history[k] > level_thr[k].min(node_cap[i])) {
            Some(0) => tau[i] = 0.0,
            Some(k) => brackets.push((i, 1 << (k - 1), 1 << k)),
            None => tau[i] = times[times.len() - 1],
        }
    }
    let delta = ladder.base_step();
    let mut memo: BTreeMap<u64, (f64, GridFunction)> = BTreeMap::new();
    for _ in 0..tol.bisection_depth {
        let mids: Vec<u64> = brackets
            .iter()
            .filter(|b| b.2 - b.1 > 1)
            .map(|b| (b.1 + b.2) / 2)
            .filter(|m| !memo.contains_key(m))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        if mids.is_empty() && brackets.iter().all(|b| b.2 - b.1 <= 1) {
            break;
        }
        let evaluated: Vec<(u64, (f64, GridFunction))> = mids
            .par_iter()
            .map(|&m| {
                let t = m as f64 * delta;
                let b = u.zip_with(&t_plus_at(u, ladder, t)?, |a, b| a - b)?;
                Ok((m, (tol.threshold(ladder, t)?, b)))
            })
            .collect::<Result<_>>()?;
        memo.extend(evaluated);
        for b in brackets.iter_mut() {
            if b.2 - b.1 <= 1 {
                continue;
            }
            let m = (b.1 + b.2) / 2;
            let (thr, ref bm) = memo[&m];
            if bm.get(b.0) <= thr.min(node_cap[b.0]) {
                b.1 = m;
            } else {
                b.2 = m;
            }
        }
    }
    for &(i, lo, _) in &brackets {
        tau[i] = lo as f64 * delta;
    }
    let cut_set = (0..n).filter(|&i| tau[i] == 0.0).collect();
    let aubry_set = (0..n).filter(|&i| tau[i].is_infinite()).collect();
    let (gstar, gsharp) = graph_partition(u, 16)?;
    Ok(CutProfile {
        u: u.clone(),
        barrier,
        tau,
        cut_set,
        aubry_set,
        gstar,
        gsharp,
        node_cap,
        tolerances: tol,
    })
}

/// `G*`: every reachable gradient `(x, p)`, placed at the estimated corner
/// location for singular nodes. `G#`: `samples` interior points of each
/// corner interval `D^+ \ D^*`.
pub fn graph_partition(u: &GridFunction, samples: usize) -> Result<(Vec<(f64, f64)>, Vec<(f64, f64)>)> {
    let dd = differential_data(u)?;
    let g = u.grid();
    let mut gstar = Vec::new();
    let mut gsharp = Vec::new();
    for (i, d) in dd.nodes.iter().enumerate() {
        let x = if d.singular { d.corner.unwrap_or(g.x(i)) } else { g.x(i) };
        gstar.extend(d.reachable.iter().map(|&p| (x, p)));
        if let (true, Some((lo, hi))) = (d.singular, d.superdifferential) {
            for q in 1..=samples {
                gsharp.push((x, lo + (hi - lo) * q as f64 / (samples + 1) as f64));
            }
        }
    }
    Ok((gstar, gsharp))
}

/// Launch points of `G*` in circle order, split into pieces at singular nodes:
/// a piece starts at a corner with the right limit and ends at the next
/// corner with the left limit.
fn gstar_pieces(u: &GridFunction) -> Result<Vec<Vec<(f64, f64)>>> {
    let dd = differential_data(u)?;
    let g = u.grid();
    let n = u.len();
    let singular: Vec<usize> = dd.singular_nodes();
    let smooth_p = |i: usize| dd.nodes[i].reachable.first().copied().unwrap_or(0.0);
    if singular.is_empty() {
        let mut piece: Vec<(f64, f64)> = (0..n).map(|i| (g.x(i), smooth_p(i))).collect();
        piece.push(piece[0]);
        return Ok(vec![piece]);
    }
    let mut pieces = Vec::new();
    for (k, &s) in singular.iter().enumerate() {
        let next = singular[(k + 1) % singular.len()];
        let d = &dd.nodes[s];
        let x0 = d.corner.unwrap_or(g.x(s));
        let mut piece = vec![(x0, d.right)];
        let mut i = (s + 1) % n;
        while i != next {
            piece.push((g.x(i), smooth_p(i)));
            i = (i + 1) % n;
        }
        let e = &dd.nodes[next];
        piece.push((e.corner.unwrap_or(g.x(next)), e.left));
        pieces.push(piece);
    }
    Ok(pieces)
}

/// Nodes covered by `pi Phi^{-t}(G*)`: consecutive launch points of a piece
/// are flowed back and the short arc between their images is filled in.
pub fn backward_footprint(u: &GridFunction, ladder: &KernelLadder, t: f64) -> Result<Vec<bool>> {
    if t == 0.0 {
        return Ok(vec![true; u.len()]);
    }
    let spec = ladder.spec();
    let h = (t / 16.0).min(1e-3);
    let g = *u.grid();
    let n = u.len();
    let mut covered = vec![false; n];
    for piece in gstar_pieces(u)? {
        let images: Vec<f64> = piece
            .par_iter()
            .map(|&(x, p)| Ok(wrap_unit(flow(spec, x, p, -t, h)?.last().x)))
            .collect::<Result<_>>()?;
        for w in images.windows(2) {
            let d = periodic_delta(w[0], w[1]);
            let (a, len) = if d >= 0.0 { (w[0], d) } else { (w[1], -d) };
            let start = (a * n as f64).ceil() as i64;
            let mut j = start;
            while (j as f64) / (n as f64) <= a + len + 1e-12 {
                covered[g.wrap(j as isize)] = true;
                j += 1;
            }
        }
        for &y in &images {
            let j = (y * n as f64).round() as isize;
            if (y * n as f64 - j as f64).abs() < 1e-9 {
                covered[g.wrap(j)] = true;
            }
        }
    }
    Ok(covered)
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelSetReport {
    pub t: f64,
    pub barrier_set: usize,
    pub super_level_set: usize,
    pub footprint_set: usize,
    pub diff_barrier_tau: usize,
    pub diff_barrier_footprint: usize,
    pub diff_tau_footprint: usize,
    /// Two cells per boundary point of `{tau >= t}`.
    pub allowed: usize,
    /// Complement nodes where `u^+ < T^+_t u` fails.
    pub lower_violations: usize,
    /// Complement nodes where `T^+_t u < u` fails.
    pub upper_violations: usize,
    pub sets_agree: bool,
}

fn symmetric_difference(a: &[bool], b: &[bool]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn boundary_points(s: &[bool]) -> usize {
    let n = s.len();
    (0..n).filter(|&i| s[i] != s[(i + 1) % n]).count()
}

/// Compares `{B(t) <= tol}`, `{tau >= t}` and the backward footprint of `G*`,
/// and checks `u^+ < T^+_t u < u` off `{tau >= t}`, where `u^+ = S^+ u` is
/// shifted to agree with `u` at the first Aubry node.
pub fn level_set_identity_check(profile: &CutProfile, ladder: &KernelLadder, t: f64, limit_tol: f64) -> Result<LevelSetReport> {
    let u = &profile.u;
    let tp = t_plus_at(u, ladder, t)?;
    let b = u.zip_with(&tp, |a, c| a - c)?;
    let by_barrier: Vec<bool> = (0..u.len())
        .map(|i| Ok(b.get(i) <= profile.node_threshold(ladder, i, t)?))
        .collect::<Result<_>>()?;
    let by_tau = profile.super_level(t);
    let footprint = backward_footprint(u, ladder, t)?;
    let (mut lower, mut upper) = (0, 0);
    if let Some(&a) = profile.aubry_set.first() {
        let plus = weak_kam_limit(u, ladder, Direction::Plus, limit_tol)?.value;
        let plus = plus.add_constant(u.get(a) - plus.get(a));
        for i in (0..u.len()).filter(|&i| !by_tau[i]) {
            lower += usize::from(plus.get(i) >= tp.get(i));
            upper += usize::from(tp.get(i) >= u.get(i));
        }
    }
    let allowed = 2 * boundary_points(&by_tau).max(1);
    let d = [
        symmetric_difference(&by_barrier, &by_tau),
        symmetric_difference(&by_barrier, &footprint),
        symmetric_difference(&by_tau, &footprint),
    ];
    let count = |s: &[bool]| s.iter().filter(|&&v| v).count();
    Ok(LevelSetReport {
        t,
        barrier_set: count(&by_barrier),
        super_level_set: count(&by_tau),
        footprint_set: count(&footprint),
        diff_barrier_tau: d[0],
        diff_barrier_footprint: d[1],
        diff_tau_footprint: d[2],
        allowed,
        lower_violations: lower,
        upper_violations: upper,
        sets_agree: d.iter().all(|&v| v <= allowed),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelSide {
    /// `{tau >= t}` against `G*`.
    Super,
    /// `{tau < t}` against `G#`.
    Sub,
}

#[derive(Debug, Clone, Serialize)]
pub struct BilipReport {
    pub t: f64,
    pub side: LevelSide,
    pub nodes: usize,
    /// `max |F(x) - F(y)| / |x - y|`.
    pub forward: f64,
    /// `max |x - y| / |F(x) - F(y)|`.
    pub inverse: f64,
}

impl BilipReport {
    pub fn finite(&self) -> bool {
        self.forward.is_finite() && self.inverse.is_finite()
    }
}

/// Empirical Lipschitz constants of `F(x) = Phi^t(x, D T^+_t u(x))` and its
/// inverse on one side of the level set. On `{tau >= t}` the gradient is
/// `Du` and `F` lands on `G*`; on `{tau < t}` it lands on `G#`.
pub fn bilip_diagnostic(profile: &CutProfile, ladder: &KernelLadder, t: f64, side: LevelSide) -> Result<BilipReport> {
    let u = &profile.u;
    let g = *u.grid();
    let n = u.len();
    let dx = g.spacing();
    let tp = t_plus_at(u, ladder, t)?;
    let sup = profile.super_level(t);
    let nodes: Vec<usize> = (0..n).filter(|&i| sup[i] == (side == LevelSide::Super)).collect();
    let h = (t / 16.0).min(1e-3);
    let images: Vec<(f64, f64)> = nodes
        .par_iter()
        .map(|&i| {
            let p = (tp.get((i + 1) % n) - tp.get((i + n - 1) % n)) / (2.0 * dx);
            let e = flow(ladder.spec(), g.x(i), p, t, h)?.last();
            Ok((wrap_unit(e.x), e.p))
        })
        .collect::<Result<_>>()?;
    let (forward, inverse) = (0..nodes.len())
        .into_par_iter()
        .map(|a| {
            let mut f: f64 = 0.0;
            let mut r: f64 = 0.0;
            for b in a + 1..nodes.len() {
                let d = periodic_delta(g.x(nodes[a]), g.x(nodes[b])).abs();
                let (ya, yb) = (images[a], images[b]);
                let e = periodic_delta(ya.0, yb.0).hypot(ya.1 - yb.1);
                f = f.max(e / d);
                r = r.max(if e > 0.0 { d / e } else { f64::INFINITY });
            }
            (f, r)
        })
        .reduce(|| (0.0, 0.0), |x, y| (x.0.max(y.0), x.1.max(y.1)));
    Ok(BilipReport {
        t,
        side,
        nodes: nodes.len(),
        forward,
        inverse,
    })
}

/// `sup |(T^-_t T^+_t - T^+_t T^-_t) u - B(t)|` at a non-dyadic time.
pub fn commutator_identity_at(u: &GridFunction, ladder: &KernelLadder, t: f64) -> Result<f64> {
    let tp = t_plus_at(u, ladder, t)?;
    let b = u.zip_with(&tp, |a, c| a - c)?;
    let comm = t_minus_at(&tp, ladder, t)?.zip_with(&t_plus_at(&t_minus_at(u, ladder, t)?, ladder, t)?, |a, c| a - c)?;
    b.sup_diff(&comm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TorusGrid;
    use crate::hamiltonian::HamiltonianSpec;
    use crate::kernel::KernelParams;
    use std::f64::consts::PI;

    fn pendulum_u(x: f64) -> f64 {
        let d = x.min(1.0 - x);
        2.0 / PI * (1.0 - (PI * d).cos())
    }

    fn ladder(spec: &HamiltonianSpec, n: usize, t_max: f64) -> KernelLadder {
        let params = KernelParams { base_step: 1.0 / (2 * n) as f64, ..Default::default() };
        KernelLadder::build(spec, TorusGrid::line(n).unwrap(), params, t_max).unwrap()
    }

    #[test]
    fn free_particle_constant_is_all_aubry() {
        let l = ladder(&HamiltonianSpec::free_particle(), 64, 4.0);
        let u = GridFunction::constant(*l.grid(), 0.7);
        let b = barrier(&u, &l, 1e-9).unwrap();
        assert!(b.evolution.snapshots.iter().all(|s| s.values().iter().all(|&v| v.abs() < 1e-15)));
        let p = cut_time_map(&u, &l, CutTolerances::for_function(&u)).unwrap();
        assert_eq!(p.aubry_set.len(), 64);
        assert!(p.cut_set.is_empty() && p.gsharp.is_empty() && p.partition_consistent());
    }

    #[test]
    fn non_solution_is_rejected() {
        let l = ladder(&HamiltonianSpec::pendulum(), 64, 1.0);
        let phi = GridFunction::from_fn(*l.grid(), |x| (2.0 * PI * x[0]).cos());
        assert!(matches!(barrier(&phi, &l, 5e-3), Err(Error::Precondition { .. })));
    }

    #[test]
    fn pendulum_structure_at_coarse_resolution() {
        let l = ladder(&HamiltonianSpec::pendulum(), 128, 16.0);
        let u = GridFunction::from_fn(*l.grid(), |x| pendulum_u(x[0]));
        let b = barrier(&u, &l, 5e-3).unwrap();
        assert!(b.passes(), "{b:?}");
        assert!(b.evolution.snapshots.iter().all(|s| s.get(0) == 0.0 && s.get(64) > 0.0));
        let p = cut_time_map(&u, &l, CutTolerances::for_function(&u)).unwrap();
        assert_eq!(p.cut_set, vec![64]);
        assert_eq!(p.aubry_set, vec![0]);
        assert!(p.partition_consistent());
        let (gstar, gsharp) = (&p.gstar, &p.gsharp);
        assert_eq!(gsharp.len(), 16);
        assert!(gsharp.iter().all(|&(x, q)| (x - 0.5).abs() < 1e-3 && q.abs() < 2.0));
        assert!(gstar.iter().any(|&(x, q)| (x - 0.5).abs() < 1e-3 && (q - 2.0).abs() < 0.05));
        assert!(gstar.iter().any(|&(x, q)| (x - 0.5).abs() < 1e-3 && (q + 2.0).abs() < 0.05));
    }

    #[test]
    fn smooth_function_has_empty_gsharp() {
        let g = TorusGrid::line(128).unwrap();
        let u = GridFunction::from_fn(g, |x| (2.0 * PI * x[0]).sin());
        let (gstar, gsharp) = graph_partition(&u, 16).unwrap();
        assert!(gsharp.is_empty());
        assert_eq!(gstar.len(), 128);
    }

    #[test]
    fn corner_interval_of_truncated_cosine() {
        let g = TorusGrid::line(512).unwrap();
        let u = GridFunction::from_fn(g, |x| (2.0 * PI * x[0]).cos().min(0.5));
        let (_, gsharp) = graph_partition(&u, 16).unwrap();
        let near: Vec<f64> = gsharp.iter().filter(|s| (s.0 - 1.0 / 6.0).abs() < 0.01).map(|s| s.1).collect();
        assert_eq!(near.len(), 16);
        let lo = -PI * 3f64.sqrt();
        assert!(near.iter().all(|&q| q > lo - 0.05 && q < 0.0));
    }

    #[test]
    fn free_particle_bilip_is_identity() {
        let l = ladder(&HamiltonianSpec::free_particle(), 64, 1.0);
        let u = GridFunction::constant(*l.grid(), 0.0);
        let p = cut_time_map(&u, &l, CutTolerances::for_function(&u)).unwrap();
        let r = bilip_diagnostic(&p, &l, 0.25, LevelSide::Super).unwrap();
        assert_eq!(r.nodes, 64);
        assert!((r.forward - 1.0).abs() < 1e-12 && (r.inverse - 1.0).abs() < 1e-12);
    }

    #[test]
    fn commutator_identity_off_ladder() {
        let l = ladder(&HamiltonianSpec::pendulum(), 128, 4.0);
        let u = GridFunction::from_fn(*l.grid(), |x| pendulum_u(x[0]));
        assert!(commutator_identity_at(&u, &l, 39.0 / 128.0).unwrap() <= 1e-2);
    }
}
