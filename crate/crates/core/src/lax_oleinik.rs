//! Lax-Oleinik operators `T^-_t`, `T^+_t`, their commutators and long-time
//! limits, evaluated against discrete action kernels.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridFunction;
use crate::kernel::{compose, ActionKernel, KernelLadder};
use crate::nonsmooth::{semiconcavity_constant, semiconvexity_constant};

/// `T^-_t phi(x) = min_y phi(y) + K[y][x]`.
pub fn t_minus(phi: &GridFunction, k: &ActionKernel) -> Result<GridFunction> {
    phi.grid().ensure_same(k.grid())?;
    let n = phi.len();
    let mut out = vec![f64::INFINITY; n];
    for (y, &py) in phi.values().iter().enumerate() {
        for (o, &kyx) in out.iter_mut().zip(k.row(y)) {
            let v = py + kyx;
            if v < *o {
                *o = v;
            }
        }
    }
    finish(phi, out)
}

/// `T^+_t phi(x) = max_y phi(y) - K[x][y]`.
pub fn t_plus(phi: &GridFunction, k: &ActionKernel) -> Result<GridFunction> {
    phi.grid().ensure_same(k.grid())?;
    let out: Vec<f64> = (0..phi.len())
        .into_par_iter()
        .map(|x| {
            phi.values()
                .iter()
                .zip(k.row(x))
                .map(|(&py, &kxy)| py - kxy)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    finish(phi, out)
}

/// `T^-_t phi` for `K_t = kernel_at(t)`, applied level by level
/// (`T^-_{A B} = T^-_B T^-_A`) without forming the product kernel.
pub fn t_minus_at(phi: &GridFunction, ladder: &KernelLadder, t: f64) -> Result<GridFunction> {
    let mut out = phi.clone();
    for i in ladder.level_indices(t)? {
        out = t_minus(&out, &ladder.levels()[i])?;
    }
    Ok(out)
}

/// `T^+_t phi` for `K_t = kernel_at(t)`, applied level by level
/// (`T^+_{A B} = T^+_A T^+_B`).
pub fn t_plus_at(phi: &GridFunction, ladder: &KernelLadder, t: f64) -> Result<GridFunction> {
    let mut out = phi.clone();
    for i in ladder.level_indices(t)?.into_iter().rev() {
        out = t_plus(&out, &ladder.levels()[i])?;
    }
    Ok(out)
}

fn finish(phi: &GridFunction, out: Vec<f64>) -> Result<GridFunction> {
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::Kernel(format!("node {i} is unreachable in the kernel")));
    }
    GridFunction::new(*phi.grid(), out)
}

/// `(T^-_t T^+_t phi - phi, phi - T^+_t T^-_t phi)`; both are nonnegative.
pub fn commutator_gap(phi: &GridFunction, k: &ActionKernel) -> Result<(GridFunction, GridFunction)> {
    let upper = t_minus(&t_plus(phi, k)?, k)?;
    let lower = t_plus(&t_minus(phi, k)?, k)?;
    Ok((
        upper.zip_with(phi, |a, b| a - b)?,
        phi.zip_with(&lower, |a, b| a - b)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripleIdentity {
    /// `|T^+ T^- T^+ phi - T^+ phi|_inf`
    pub plus: f64,
    /// `|T^- T^+ T^- phi - T^- phi|_inf`
    pub minus: f64,
}

impl TripleIdentity {
    pub fn worst(&self) -> f64 {
        self.plus.max(self.minus)
    }
}

pub fn triple_identity_check(phi: &GridFunction, k: &ActionKernel) -> Result<TripleIdentity> {
    let tp = t_plus(phi, k)?;
    let tpmp = t_plus(&t_minus(&tp, k)?, k)?;
    let tm = t_minus(phi, k)?;
    let tmpm = t_minus(&t_plus(&tm, k)?, k)?;
    Ok(TripleIdentity {
        plus: tpmp.sup_diff(&tp)?,
        minus: tmpm.sup_diff(&tm)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorTag {
    TMinus,
    TPlus,
    TMinusTPlus,
    TPlusTMinus,
    Barrier,
}

impl OperatorTag {
    pub fn apply(self, phi: &GridFunction, k: &ActionKernel) -> Result<GridFunction> {
        match self {
            OperatorTag::TMinus => t_minus(phi, k),
            OperatorTag::TPlus => t_plus(phi, k),
            OperatorTag::TMinusTPlus => t_minus(&t_plus(phi, k)?, k),
            OperatorTag::TPlusTMinus => t_plus(&t_minus(phi, k)?, k),
            OperatorTag::Barrier => {
                let tp = t_plus(phi, k)?;
                phi.zip_with(&tp, |a, b| a - b)
            }
        }
    }

    /// Same as [`OperatorTag::apply`] with `kernel_at(t)`, applied level by level.
    pub fn apply_at(self, phi: &GridFunction, ladder: &KernelLadder, t: f64) -> Result<GridFunction> {
        match self {
            OperatorTag::TMinus => t_minus_at(phi, ladder, t),
            OperatorTag::TPlus => t_plus_at(phi, ladder, t),
            OperatorTag::TMinusTPlus => t_minus_at(&t_plus_at(phi, ladder, t)?, ladder, t),
            OperatorTag::TPlusTMinus => t_plus_at(&t_minus_at(phi, ladder, t)?, ladder, t),
            OperatorTag::Barrier => {
                let tp = t_plus_at(phi, ladder, t)?;
                phi.zip_with(&tp, |a, b| a - b)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemigroupEvolution {
    pub operator: OperatorTag,
    pub times: Vec<f64>,
    pub snapshots: Vec<GridFunction>,
}

impl SemigroupEvolution {
    pub fn new(operator: OperatorTag, times: Vec<f64>, snapshots: Vec<GridFunction>) -> Result<Self> {
        if times.len() != snapshots.len() {
            return Err(Error::Kernel("one snapshot per time is required".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Kernel("evolution times must be strictly increasing".into()));
        }
        if let Some(first) = snapshots.first() {
            for s in &snapshots[1..] {
                first.grid().ensure_same(s.grid())?;
            }
        }
        Ok(Self {
            operator,
            times,
            snapshots,
        })
    }

    /// Applies `operator` to `phi` at each time through the ladder levels.
    pub fn run(operator: OperatorTag, phi: &GridFunction, ladder: &KernelLadder, times: &[f64]) -> Result<Self> {
        let snapshots = times
            .par_iter()
            .map(|&t| operator.apply_at(phi, ladder, t))
            .collect::<Result<Vec<_>>>()?;
        Self::new(operator, times.to_vec(), snapshots)
    }

    /// Long-format CSV `t,node,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,node,value\n");
        for (t, s) in self.times.iter().zip(&self.snapshots) {
            for (i, v) in s.values().iter().enumerate() {
                let _ = writeln!(out, "{t:.17e},{i},{v:.17e}");
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KantorovichPair {
    pub phi: GridFunction,
    pub psi: GridFunction,
    pub t: f64,
    /// `|T^-_t psi - phi|_inf`
    pub residual_phi: f64,
    /// `|T^+_t phi - psi|_inf`
    pub residual_psi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Minus,
    Plus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Limit {
    pub value: GridFunction,
    /// Time of the snapshot returned.
    pub t: f64,
    /// Sup-norm change between consecutive doubling snapshots.
    pub history: Vec<f64>,
}

/// `S^- phi` or `S^+ phi`: applies the ladder levels `K_{delta 2^k}` to `phi`
/// until two consecutive snapshots differ by at most `tol`.
pub fn weak_kam_limit(phi: &GridFunction, ladder: &KernelLadder, direction: Direction, tol: f64) -> Result<Limit> {
    let op = match direction {
        Direction::Minus => OperatorTag::TMinus,
        Direction::Plus => OperatorTag::TPlus,
    };
    limit_over_levels(phi, ladder, op, tol)
}

fn limit_over_levels(phi: &GridFunction, ladder: &KernelLadder, op: OperatorTag, tol: f64) -> Result<Limit> {
    let mut history = Vec::new();
    let mut prev: Option<GridFunction> = None;
    for k in ladder.levels() {
        let cur = op.apply(phi, k)?;
        if let Some(p) = &prev {
            let d = cur.sup_diff(p)?;
            history.push(d);
            if d <= tol {
                return Ok(Limit {
                    value: cur,
                    t: k.t(),
                    history,
                });
            }
        }
        prev = Some(cur);
    }
    Err(Error::NonConvergence {
        t_max: ladder.t_max(),
        history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeierlsBarrier {
    pub kernel: ActionKernel,
    /// Ladder time at which consecutive levels agreed within tolerance.
    pub t: f64,
    pub history: Vec<f64>,
}

/// `h = lim A_t`: the first ladder level whose entries agree with the previous
/// level within `tol`.
pub fn peierls_barrier(ladder: &KernelLadder, tol: f64) -> Result<PeierlsBarrier> {
    let mut history = Vec::new();
    for w in ladder.levels().windows(2) {
        let d = w[1].sup_diff(&w[0])?;
        history.push(d);
        if d <= tol {
            return Ok(PeierlsBarrier {
                kernel: (*w[1]).clone(),
                t: w[1].t(),
                history,
            });
        }
    }
    Err(Error::NonConvergence {
        t_max: ladder.t_max(),
        history,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimitExchangeReport {
    /// `|S^- phi - min_y {phi(y) + h(y, .)}|_inf`
    pub barrier_formula_residual: f64,
    /// `|lim T^-_t T^+_t phi - S^- S^+ phi|_inf`
    pub exchange_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn limit_exchange_check(
    phi: &GridFunction,
    ladder: &KernelLadder,
    h: &ActionKernel,
    tol: f64,
) -> Result<LimitExchangeReport> {
    let s_minus = weak_kam_limit(phi, ladder, Direction::Minus, tol)?.value;
    let via_h = t_minus(phi, h)?;
    let barrier_formula_residual = s_minus.sup_diff(&via_h)?;
    let s_plus = weak_kam_limit(phi, ladder, Direction::Plus, tol)?.value;
    let s_minus_s_plus = weak_kam_limit(&s_plus, ladder, Direction::Minus, tol)?.value;
    let exchanged = limit_over_levels(phi, ladder, OperatorTag::TMinusTPlus, tol)?.value;
    let exchange_residual = exchanged.sup_diff(&s_minus_s_plus)?;
    let tolerance = 2.0 * tol;
    Ok(LimitExchangeReport {
        barrier_formula_residual,
        exchange_residual,
        tolerance,
        pass: barrier_formula_residual <= tolerance && exchange_residual <= tolerance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub t: f64,
    pub residual: f64,
    pub tolerance: f64,
    pub verdict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauEstimate {
    /// Last passing time; the horizon when every tested time passed.
    pub tau: f64,
    /// No tested time failed up to the horizon.
    pub infinite: bool,
    pub scan: Vec<ScanPoint>,
}

/// Default commutator tolerance `10 dx Lip(phi)`.
pub fn default_gap_tolerance(phi: &GridFunction) -> f64 {
    10.0 * phi.grid().spacing() * phi.lipschitz_constant()
}

fn gap_point(phi: &GridFunction, ladder: &KernelLadder, t: f64, tol: f64) -> Result<ScanPoint> {
    let up = t_minus_at(&t_plus_at(phi, ladder, t)?, ladder, t)?;
    let residual = up
        .values()
        .iter()
        .zip(phi.values())
        .map(|(a, b)| a - b)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(ScanPoint {
        t,
        residual,
        tolerance: tol,
        verdict: residual <= tol,
    })
}

/// `tau_2(phi)`: largest time with `T^-_t T^+_t phi = phi` within `tol`.
/// Coarse pass over the ladder levels, then bisection on multiples of the
/// base step until the bracket is at most `resolution` wide.
pub fn tau2_estimate(phi: &GridFunction, ladder: &KernelLadder, tol: f64, resolution: f64) -> Result<TauEstimate> {
    let mut scan = Vec::new();
    let mut last_pass: Option<f64> = None;
    let mut first_fail: Option<f64> = None;
    for t in ladder.level_times() {
        let p = gap_point(phi, ladder, t, tol)?;
        scan.push(p);
        if p.verdict {
            last_pass = Some(t);
        } else {
            first_fail = Some(t);
            break;
        }
    }
    let Some(fail) = first_fail else {
        return Ok(TauEstimate {
            tau: ladder.t_max(),
            infinite: true,
            scan,
        });
    };
    let delta = ladder.base_step();
    let mut lo = last_pass.map_or(0u64, |t| (t / delta).round() as u64);
    let mut hi = (fail / delta).round() as u64;
    while hi - lo > 1 && (hi - lo) as f64 * delta > resolution {
        let mid = (lo + hi) / 2;
        let p = gap_point(phi, ladder, mid as f64 * delta, tol)?;
        scan.push(p);
        if p.verdict {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(TauEstimate {
        tau: lo as f64 * delta,
        infinite: false,
        scan,
    })
}

/// Commutator gap residuals at each time, kernels taken from the ladder.
pub fn gap_scan(phi: &GridFunction, ladder: &KernelLadder, times: &[f64], tol: f64) -> Result<Vec<ScanPoint>> {
    times.iter().map(|&t| gap_point(phi, ladder, t, tol)).collect()
}

/// Expected size of spurious gaps produced by the grid in `T^+_t` or `T^-_t`,
/// `scale (sum_c dx^2 / 8 t_c + dx min(t, 1) / 4)` over the dyadic
/// components `t_c` of `t`. Every component forces paths through a grid
/// node, which costs about `dx^2 / 8 t_c` against a kernel of curvature
/// `1 / t_c`; the second term is the first-order kernel error at moderate
/// times. Zero at `t = 0`.
pub fn grid_noise(ladder: &KernelLadder, t: f64, scale: f64) -> Result<f64> {
    if t == 0.0 {
        return Ok(0.0);
    }
    let dx = ladder.grid().spacing();
    let times = ladder.level_times();
    let hops: f64 = ladder.level_indices(t)?.iter().map(|&k| dx * dx / (8.0 * times[k])).sum();
    Ok(scale * (hops + 0.25 * dx * t.min(1.0)))
}

/// Default curvature bound for the `tau_1` scan, `1.5 / delta`. A concave
/// corner opens into a fan of curvature `1 / t_c` for the smallest dyadic
/// component `t_c >= delta` of `t`, while a shock shows up as a gradient
/// jump over one cell, i.e. a second difference of order `jump / dx`.
pub fn default_curvature_bound(ladder: &KernelLadder) -> f64 {
    1.5 / ladder.base_step()
}

/// `tau_1(phi)`: largest time on `times` (multiples of the base step,
/// increasing) at which `T^+_t phi` has both discrete one-sided curvature
/// bounds at most `c_bound`. The residual of each scan point is the larger
/// of the two constants.
pub fn tau1_estimate(phi: &GridFunction, ladder: &KernelLadder, c_bound: f64, times: &[f64]) -> Result<TauEstimate> {
    if phi.grid().dim() != 1 {
        return Err(Error::Unsupported("curvature scans in dimension 2".into()));
    }
    let c0 = semiconcavity_constant(phi).constant;
    if c0 > c_bound {
        return Err(Error::Precondition {
            what: "initial datum is not semiconcave within the curvature bound".into(),
            residual: c0,
            tolerance: c_bound,
        });
    }
    let scan: Vec<ScanPoint> = times
        .par_iter()
        .map(|&t| {
            let tp = t_plus_at(phi, ladder, t)?;
            let c = semiconcavity_constant(&tp)
                .constant
                .max(semiconvexity_constant(&tp).constant);
            Ok(ScanPoint {
                t,
                residual: c,
                tolerance: c_bound,
                verdict: c <= c_bound,
            })
        })
        .collect::<Result<_>>()?;
    let infinite = scan.iter().all(|p| p.verdict);
    let tau = if infinite {
        ladder.t_max()
    } else {
        scan.iter().filter(|p| p.verdict).map(|p| p.t).fold(0.0, f64::max)
    };
    Ok(TauEstimate { tau, infinite, scan })
}

/// `(phi, T^+_t phi)` with both residuals recorded; fails when `phi` is not
/// recovered by `T^-_t` within `tol`.
pub fn kantorovich_pair(phi: &GridFunction, k: &ActionKernel, tol: f64) -> Result<KantorovichPair> {
    let psi = t_plus(phi, k)?;
    let back = t_minus(&psi, k)?;
    let residual_phi = back.sup_diff(phi)?;
    if residual_phi > tol {
        return Err(Error::Precondition {
            what: format!("phi is not attainable at t = {}", k.t()),
            residual: residual_phi,
            tolerance: tol,
        });
    }
    let residual_psi = t_plus(phi, k)?.sup_diff(&psi)?;
    Ok(KantorovichPair {
        phi: phi.clone(),
        psi,
        t: k.t(),
        residual_phi,
        residual_psi,
    })
}

/// Reverses a kernel in time: `R[i][j] = K[j][i]`.
pub fn reversed(k: &ActionKernel) -> ActionKernel {
    let n = k.size();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            data[j * n + i] = k.get(i, j);
        }
    }
    ActionKernel::from_parts(*k.grid(), k.t(), k.base_step(), k.winding(), data).expect("same shape")
}

/// Kernels `K_{t_1} , K_{t_1 + s}, K_{t_1 + 2s}, ...` where every step
/// prepends `K_s`; along this chain `t -> T^-_t T^+_t phi` is exactly
/// non-decreasing.
pub fn extended_chain(ladder: &KernelLadder, t1: f64, s: f64, steps: usize) -> Result<Vec<ActionKernel>> {
    let ks = ladder.kernel_at(s)?;
    let mut out = vec![(*ladder.kernel_at(t1)?).clone()];
    for _ in 0..steps {
        let next = compose(&ks, out.last().expect("non-empty"))?;
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TorusGrid;
    use crate::hamiltonian::HamiltonianSpec;
    use crate::kernel::KernelParams;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn random_function(grid: TorusGrid, seed: u64) -> GridFunction {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        GridFunction::new(grid, (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn pendulum_ladder(n: usize, t_max: f64) -> KernelLadder {
        let params = KernelParams { base_step: 1.0 / (2 * n) as f64, ..Default::default() };
        KernelLadder::build(&HamiltonianSpec::pendulum(), TorusGrid::line(n).unwrap(), params, t_max).unwrap()
    }

    fn free_ladder(n: usize, t_max: f64) -> KernelLadder {
        let params = KernelParams { base_step: 1.0 / (2 * n) as f64, ..Default::default() };
        KernelLadder::build(&HamiltonianSpec::free_particle(), TorusGrid::line(n).unwrap(), params, t_max).unwrap()
    }

    fn pendulum_u(x: f64) -> f64 {
        let d = x.min(1.0 - x);
        2.0 / PI * (1.0 - (PI * d).cos())
    }

    #[test]
    fn levelwise_application_matches_product_kernel() {
        let ladder = pendulum_ladder(32, 1.0);
        let phi = random_function(*ladder.grid(), 12);
        let t = 11.0 / 64.0;
        let k = ladder.kernel_at(t).unwrap();
        assert!(t_minus_at(&phi, &ladder, t).unwrap().sup_diff(&t_minus(&phi, &k).unwrap()).unwrap() <= 1e-12);
        assert!(t_plus_at(&phi, &ladder, t).unwrap().sup_diff(&t_plus(&phi, &k).unwrap()).unwrap() <= 1e-12);
    }

    #[test]
    fn constants_are_fixed_by_free_particle() {
        let ladder = free_ladder(32, 4.0);
        let c = GridFunction::constant(*ladder.grid(), 2.5);
        for t in [1.0 / 64.0, 0.5, 4.0] {
            let k = ladder.kernel_at(t).unwrap();
            assert_eq!(t_minus(&c, &k).unwrap(), c);
            assert_eq!(t_plus(&c, &k).unwrap(), c);
        }
    }

    #[test]
    fn duality_with_reversed_kernel() {
        let ladder = pendulum_ladder(32, 1.0);
        let k = ladder.kernel_at(0.5).unwrap();
        let phi = random_function(*ladder.grid(), 4);
        let lhs = t_plus(&phi.map(|v| -v), &k).unwrap().map(|v| -v);
        let rhs = t_minus(&phi, &reversed(&k)).unwrap();
        assert!(lhs.sup_diff(&rhs).unwrap() <= 1e-12);
        let same = t_minus(&phi, &k).unwrap();
        assert!(lhs.sup_diff(&same).unwrap() <= 1e-12);
    }

    #[test]
    fn large_time_limits_of_free_particle() {
        let ladder = free_ladder(64, 512.0);
        let phi = GridFunction::from_fn(*ladder.grid(), |x| (2.0 * PI * x[0]).cos());
        let k = ladder.kernel_at(512.0).unwrap();
        let m = t_minus(&phi, &k).unwrap();
        let p = t_plus(&phi, &k).unwrap();
        assert!(m.values().iter().all(|v| (v + 1.0).abs() <= 1e-3));
        assert!(p.values().iter().all(|v| (v - 1.0).abs() <= 1e-3));
        let s = weak_kam_limit(&phi, &ladder, Direction::Minus, 1e-3).unwrap();
        assert!(s.value.values().iter().all(|v| (v + 1.0).abs() <= 2e-3));
    }

    #[test]
    fn pendulum_solution_is_fixed_and_reversible() {
        let ladder = pendulum_ladder(128, 8.0);
        let u = GridFunction::from_fn(*ladder.grid(), |x| pendulum_u(x[0]));
        for t in [0.5, 1.0, 4.0] {
            let k = ladder.kernel_at(t).unwrap();
            assert!(t_minus(&u, &k).unwrap().sup_diff(&u).unwrap() <= 5e-3);
            let (up, _) = commutator_gap(&u, &k).unwrap();
            assert!(up.max() <= 5e-3);
        }
        let phi = GridFunction::from_fn(*ladder.grid(), |x| (2.0 * PI * x[0]).cos());
        let (gap, _) = commutator_gap(&phi, &ladder.kernel_at(4.0).unwrap()).unwrap();
        assert!(gap.max() > 0.01);
    }

    #[test]
    fn triple_identity_with_extreme_values() {
        let ladder = pendulum_ladder(32, 1.0);
        let mut v = random_function(*ladder.grid(), 8).into_values();
        v[3] = 1e6;
        v[17] = -1e6;
        let phi = GridFunction::new(*ladder.grid(), v).unwrap();
        let r = triple_identity_check(&phi, &ladder.kernel_at(0.25).unwrap()).unwrap();
        assert!(r.worst() <= 1e-12 * 1e6);
        // brute-force triple application agrees with the operator composition
        let k = ladder.kernel_at(0.25).unwrap();
        let n = phi.len();
        let tp: Vec<f64> = (0..n)
            .map(|x| (0..n).map(|y| phi.get(y) - k.get(x, y)).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        assert_eq!(tp, t_plus(&phi, &k).unwrap().into_values());
    }

    #[test]
    fn weak_kam_limit_is_a_fixed_point() {
        let ladder = pendulum_ladder(64, 64.0);
        let zero = GridFunction::constant(*ladder.grid(), 0.0);
        let s = weak_kam_limit(&zero, &ladder, Direction::Minus, 1e-4).unwrap();
        for t in [1.0, 8.0] {
            let k = ladder.kernel_at(t).unwrap();
            assert!(t_minus(&s.value, &k).unwrap().sup_diff(&s.value).unwrap() <= 1e-3);
        }
    }

    #[test]
    fn non_convergence_reports_history() {
        let ladder = free_ladder(32, 2.0);
        let phi = GridFunction::from_fn(*ladder.grid(), |x| (2.0 * PI * x[0]).cos());
        match weak_kam_limit(&phi, &ladder, Direction::Minus, 1e-9) {
            Err(Error::NonConvergence { history, .. }) => assert!(!history.is_empty()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn peierls_barrier_of_pendulum() {
        let ladder = pendulum_ladder(128, 64.0);
        let h = peierls_barrier(&ladder, 1e-4).unwrap();
        for x in 0..128 {
            let xx = x as f64 / 128.0;
            assert!((h.kernel.get(0, x) - pendulum_u(xx)).abs() <= 1e-2);
            assert!(h.kernel.get(x, x) >= -1e-12);
        }
        assert!(h.kernel.get(0, 0).abs() < 1e-12);
        assert!(h.kernel.get(64, 64) > 0.1);
        let hh = compose(&h.kernel, &h.kernel).unwrap();
        assert!(hh.sup_diff(&h.kernel).unwrap() <= 2e-2);
    }

    #[test]
    fn limit_exchange_for_constants_and_free_particle() {
        let ladder = free_ladder(32, 1024.0);
        let h = peierls_barrier(&ladder, 1e-3).unwrap();
        let phi = GridFunction::from_fn(*ladder.grid(), |x| (2.0 * PI * x[0]).cos());
        let r = limit_exchange_check(&phi, &ladder, &h.kernel, 1e-3).unwrap();
        assert!(r.pass, "{r:?}");
        let c = GridFunction::constant(*ladder.grid(), 0.7);
        assert!(limit_exchange_check(&c, &ladder, &h.kernel, 1e-3).unwrap().pass);
    }

    #[test]
    fn tau2_of_solution_is_infinite_and_of_cosine_finite() {
        let ladder = pendulum_ladder(128, 64.0);
        let u = GridFunction::from_fn(*ladder.grid(), |x| pendulum_u(x[0]));
        let r = tau2_estimate(&u, &ladder, 5e-3, 1.0 / 64.0).unwrap();
        assert!(r.infinite);
        let phi = GridFunction::from_fn(*ladder.grid(), |x| (2.0 * PI * x[0]).cos());
        let r = tau2_estimate(&phi, &ladder, 1e-2, 1.0 / 64.0).unwrap();
        assert!(!r.infinite && r.tau < 8.0);
        let first_fail = r.scan.iter().filter(|p| !p.verdict).map(|p| p.t).fold(f64::INFINITY, f64::min);
        assert!(first_fail - r.tau <= 1.0 / 64.0 + 1e-12);
    }

    #[test]
    fn attained_functions_have_zero_gap_at_their_time() {
        let ladder = pendulum_ladder(64, 2.0);
        let psi = random_function(*ladder.grid(), 21);
        let k = ladder.kernel_at(0.5).unwrap();
        let phi = t_minus(&psi, &k).unwrap();
        let (gap, _) = commutator_gap(&phi, &k).unwrap();
        assert!(gap.max() <= 1e-12);
        let pair = kantorovich_pair(&phi, &k, 1e-12).unwrap();
        assert_eq!(pair.residual_psi, 0.0);
    }

    #[test]
    fn gap_is_monotone_along_extended_chain() {
        let ladder = pendulum_ladder(32, 1.0);
        let phi = random_function(*ladder.grid(), 5);
        let chain = extended_chain(&ladder, 1.0 / 64.0, 1.0 / 64.0, 6).unwrap();
        let mut prev: Option<GridFunction> = None;
        for k in &chain {
            let cur = t_minus(&t_plus(&phi, k).unwrap(), k).unwrap();
            if let Some(p) = &prev {
                assert!(cur.values().iter().zip(p.values()).all(|(a, b)| a - b >= -1e-12));
            }
            prev = Some(cur);
        }
    }

    #[test]
    fn tau1_of_constant_is_infinite() {
        let ladder = free_ladder(64, 1.0);
        let c = GridFunction::constant(*ladder.grid(), 1.0);
        let times: Vec<f64> = (1..=8).map(|k| k as f64 / 8.0).collect();
        let r = tau1_estimate(&c, &ladder, 100.0, &times).unwrap();
        assert!(r.infinite);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn exact_tropical_identities(seed in 0u64..10_000, level in 0usize..5, shift in -3.0f64..3.0) {
            let ladder = pendulum_ladder(16, 0.5);
            let k = &ladder.levels()[level];
            let f = random_function(*ladder.grid(), seed);
            let g = random_function(*ladder.grid(), seed + 1);
            let (up, down) = commutator_gap(&f, k).unwrap();
            prop_assert!(up.min() >= -1e-12 && down.min() >= -1e-12);
            prop_assert!(triple_identity_check(&f, k).unwrap().worst() <= 1e-12);
            let fc = f.add_constant(shift);
            let lhs = t_minus(&fc, k).unwrap();
            let rhs = t_minus(&f, k).unwrap().add_constant(shift);
            prop_assert!(lhs.sup_diff(&rhs).unwrap() <= 1e-12);
            let d = f.sup_diff(&g).unwrap();
            prop_assert!(t_minus(&f, k).unwrap().sup_diff(&t_minus(&g, k).unwrap()).unwrap() <= d + 1e-12);
            prop_assert!(t_plus(&f, k).unwrap().sup_diff(&t_plus(&g, k).unwrap()).unwrap() <= d + 1e-12);
            let hi = f.zip_with(&g, f64::max).unwrap();
            let a = t_minus(&f, k).unwrap();
            let b = t_minus(&hi, k).unwrap();
            prop_assert!(a.values().iter().zip(b.values()).all(|(x, y)| x <= y));
            let a = t_plus(&f, k).unwrap();
            let b = t_plus(&hi, k).unwrap();
            prop_assert!(a.values().iter().zip(b.values()).all(|(x, y)| x <= y));
        }

        #[test]
        fn subsolutions_increase_along_the_chain(scale in 0.0f64..0.5) {
            // a small multiple of the pendulum solution is a discrete subsolution
            let ladder = pendulum_ladder(32, 1.0);
            let phi = GridFunction::from_fn(*ladder.grid(), |x| scale * pendulum_u(x[0]));
            let chain = extended_chain(&ladder, 1.0 / 64.0, 1.0 / 64.0, 4).unwrap();
            let k0 = &chain[0];
            let sub = (0..32).all(|x| (0..32).all(|y| phi.get(y) - phi.get(x) <= k0.get(x, y) + 1e-12));
            prop_assume!(sub);
            let mut prev = phi.clone();
            for k in &chain {
                let cur = t_minus(&phi, k).unwrap();
                prop_assert!(cur.values().iter().zip(prev.values()).all(|(a, b)| a - b >= -1e-12));
                prev = cur;
            }
        }
    }
}
