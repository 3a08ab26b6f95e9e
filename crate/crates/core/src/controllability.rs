//! Attainability of a terminal datum by `T^-_t`, admissible Kantorovich
//! pairs, the contact regions between forward and backward evolutions, and
//! the characterization of initial data that reach a weak KAM solution.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::cut_locus::{backward_footprint, CutProfile};
use crate::dynamics::flow;
use crate::error::{Error, Result};
use crate::grid::{wrap_unit, GridFunction};
use crate::kernel::KernelLadder;
use crate::lax_oleinik::{grid_noise, t_minus_at, t_plus_at, KantorovichPair, OperatorTag, SemigroupEvolution};
use crate::nonsmooth::{contact_set_lipschitz_check, differential_data, semiconcavity_constant, semiconvexity_constant, ContactReport};

#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    pub condition: String,
    pub residual: f64,
    pub tolerance: f64,
    pub verdict: bool,
}

impl ConditionReport {
    fn new(condition: &str, residual: f64, tolerance: f64) -> Self {
        Self {
            condition: condition.into(),
            residual,
            tolerance,
            verdict: residual <= tolerance,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AttainabilityReport {
    pub t0: f64,
    /// `T^-T^+ phi = phi`, `phi = T^-_{t0} psi` and the characteristic test.
    pub conditions: Vec<ConditionReport>,
    pub semiconcavity: f64,
    /// Reachable-gradient samples used by the characteristic test.
    pub samples: usize,
}

impl AttainabilityReport {
    pub fn attainable(&self) -> bool {
        self.conditions.iter().all(|c| c.verdict)
    }

    /// All three verdicts agree.
    pub fn consistent(&self) -> bool {
        self.conditions.iter().all(|c| c.verdict == self.conditions[0].verdict)
    }
}

/// Default attainability tolerance `10 dx Lip(phi)`.
pub fn default_attainability_tolerance(phi: &GridFunction) -> f64 {
    10.0 * phi.grid().spacing() * phi.lipschitz_constant()
}

/// Evaluates the three equivalent attainability conditions independently.
/// The first applies the ladder levels one at a time; the second forms
/// `psi = T^+_{t0} phi` and `T^-_{t0} psi` with the composed kernel; the
/// third flows every reachable gradient back over `t0` and compares
/// `T^+_{t0} phi(gamma(-t0))` with `phi(x) - int L`.
pub fn attainability_check(phi: &GridFunction, ladder: &KernelLadder, t0: f64, tol: f64) -> Result<AttainabilityReport> {
    if phi.grid().dim() != 1 {
        return Err(Error::Unsupported("attainability in dimension 2".into()));
    }
    phi.grid().ensure_same(ladder.grid())?;
    let tp = t_plus_at(phi, ladder, t0)?;
    let first = t_minus_at(&tp, ladder, t0)?.sup_diff(phi)?;

    let k = ladder.kernel_at(t0)?;
    let psi = OperatorTag::TPlus.apply(phi, &k)?;
    let second = OperatorTag::TMinus.apply(&psi, &k)?.sup_diff(phi)?;

    let spec = ladder.spec();
    let c = spec.critical_value.unwrap_or(0.0);
    let dd = differential_data(phi)?;
    let g = phi.grid();
    let launches: Vec<(f64, f64, f64)> = dd
        .nodes
        .iter()
        .enumerate()
        .flat_map(|(i, d)| {
            let x = if d.singular { d.corner.unwrap_or(g.x(i)) } else { g.x(i) };
            let value = if d.singular { phi.interpolate(&[x]) } else { phi.get(i) };
            d.reachable.iter().map(move |&p| (x, p, value))
        })
        .collect();
    let h = (t0 / 64.0).min(1e-3);
    let third = launches
        .par_iter()
        .map(|&(x, p, value)| {
            let arc = flow(spec, x, p, -t0, h)?;
            let y = wrap_unit(arc.last().x);
            let action = arc.action(spec)? + c * t0;
            Ok((tp.interpolate(&[y]) - (value - action)).abs())
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(AttainabilityReport {
        t0,
        conditions: vec![
            ConditionReport::new("commutator", first, tol),
            ConditionReport::new("source", second, tol),
            ConditionReport::new("characteristics", third, tol),
        ],
        semiconcavity: semiconcavity_constant(phi).constant,
        samples: launches.len(),
    })
}

/// `(phi, T^+_{t0} phi)` when `phi` passes the commutator condition at `t0`.
pub fn kantorovich_pair(phi: &GridFunction, ladder: &KernelLadder, t0: f64, tol: f64) -> Result<KantorovichPair> {
    let psi = t_plus_at(phi, ladder, t0)?;
    let residual_phi = t_minus_at(&psi, ladder, t0)?.sup_diff(phi)?;
    if residual_phi > tol {
        return Err(Error::Precondition {
            what: format!("phi is not attainable at t = {t0}"),
            residual: residual_phi,
            tolerance: tol,
        });
    }
    let residual_psi = t_plus_at(phi, ladder, t0)?.sup_diff(&psi)?;
    Ok(KantorovichPair {
        phi: phi.clone(),
        psi,
        t: t0,
        residual_phi,
        residual_psi,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Variant {
    A,
    AStar,
    APsi,
}

/// Nodes of `[-t0, 0] x M` per time slice.
#[derive(Debug, Clone)]
pub struct ContactRegion {
    pub t0: f64,
    pub variant: Variant,
    /// `times[j]` is the slice time in `[-t0, 0]`.
    pub times: Vec<f64>,
    pub slices: Vec<Vec<bool>>,
}

impl ContactRegion {
    pub fn count(&self) -> usize {
        self.slices.iter().map(|s| s.iter().filter(|&&v| v).count()).sum()
    }

    /// Members not within `slack` cells of `other` on the same slice.
    pub fn outside(&self, other: &ContactRegion, slack: usize) -> usize {
        self.slices
            .iter()
            .zip(&other.slices)
            .map(|(a, b)| {
                let n = a.len();
                (0..n)
                    .filter(|&i| a[i] && !(0..=2 * slack).any(|k| b[(i + n + k - slack) % n]))
                    .count()
            })
            .sum()
    }
}

/// `u_breve(t) = T^+_{-t} phi`, `u(t) = T^-_{t0+t} T^+_{t0} phi` and
/// `u_psi(t) = T^-_{t0+t} psi` on the slice times.
#[derive(Debug, Clone)]
pub struct EvolutionTriple {
    pub u_breve: SemigroupEvolution,
    pub u: SemigroupEvolution,
    pub u_psi: SemigroupEvolution,
}

#[derive(Debug, Clone, Serialize)]
pub struct SliceCheck {
    pub time: f64,
    /// `max (u_breve - u)` and `max (u - u_psi)`; both should be `<= 0`.
    pub order_breve_u: f64,
    pub order_u_psi: f64,
    pub tolerance: f64,
    pub contact: Option<ContactReport>,
}

#[derive(Debug, Clone)]
pub struct ContactAnalysis {
    pub t0: f64,
    pub triple: EvolutionTriple,
    pub a: ContactRegion,
    pub a_psi: ContactRegion,
    pub a_star: ContactRegion,
    pub slices: Vec<SliceCheck>,
    /// `A* \ A_psi` and `A_psi \ A`, each outside a two-cell slack.
    pub star_outside_psi: usize,
    pub psi_outside_a: usize,
    /// Derivative tolerance for the contact gradient check.
    pub derivative_tolerance: f64,
}

impl ContactAnalysis {
    pub fn ordering_holds(&self) -> bool {
        self.slices
            .iter()
            .all(|s| s.order_breve_u <= s.tolerance && s.order_u_psi <= s.tolerance)
    }

    pub fn inclusions_hold(&self) -> bool {
        self.star_outside_psi == 0 && self.psi_outside_a == 0
    }

    pub fn contact_checks_pass(&self) -> bool {
        self.slices.iter().filter_map(|s| s.contact.as_ref()).all(|c| c.pass)
    }

    /// CSV `time_index,node,in_A,in_Apsi,in_Astar`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_index,node,in_A,in_Apsi,in_Astar\n");
        for j in 0..self.a.slices.len() {
            for i in 0..self.a.slices[j].len() {
                let _ = writeln!(
                    out,
                    "{j},{i},{},{},{}",
                    self.a.slices[j][i] as u8, self.a_psi.slices[j][i] as u8, self.a_star.slices[j][i] as u8
                );
            }
        }
        out
    }
}

/// Builds the evolution triple on `slices + 1` equally spaced times of
/// `[-t0, 0]`, the three contact regions and the checks between them.
/// Contact means a gap within the grid noise of the two operators involved,
/// scaled by `Lip(phi)`. Interior slices also run the shared-gradient check.
pub fn contact_sets(
    phi: &GridFunction,
    psi: Option<&GridFunction>,
    ladder: &KernelLadder,
    t0: f64,
    slices: usize,
    derivative_tol: f64,
) -> Result<ContactAnalysis> {
    if phi.grid().dim() != 1 {
        return Err(Error::Unsupported("contact sets in dimension 2".into()));
    }
    let slices = slices.max(1);
    let delta = ladder.base_step();
    let steps = ladder.steps(t0)?;
    if steps % slices as u64 != 0 {
        return Err(Error::Config {
            field: "controllability.slices".into(),
            message: format!("t0 / delta = {steps} is not divisible by {slices}"),
        });
    }
    let elapsed: Vec<f64> = (0..=slices).map(|j| (j as u64 * steps / slices as u64) as f64 * delta).collect();
    let times: Vec<f64> = elapsed.iter().map(|s| s - t0).collect();
    let top = t_plus_at(phi, ladder, t0)?;
    let psi = psi.cloned().unwrap_or_else(|| top.clone());
    let scale = phi.lipschitz_constant().max(1e-12);
    let rows: Vec<(GridFunction, GridFunction, GridFunction, Vec<bool>, f64)> = elapsed
        .par_iter()
        .map(|&s| {
            let breve = t_plus_at(phi, ladder, t0 - s)?;
            let u = t_minus_at(&top, ladder, s)?;
            let up = t_minus_at(&psi, ladder, s)?;
            let star = backward_footprint(phi, ladder, t0 - s)?;
            let tol = grid_noise(ladder, s, scale)? + grid_noise(ladder, t0 - s, scale)? + grid_noise(ladder, t0, scale)?;
            Ok((breve, u, up, star, tol))
        })
        .collect::<Result<_>>()?;
    let n = phi.len();
    let mut a = Vec::new();
    let mut a_psi = Vec::new();
    let mut a_star = Vec::new();
    let mut checks = Vec::new();
    for (j, (breve, u, up, star, tol)) in rows.iter().enumerate() {
        let in_a: Vec<bool> = (0..n).map(|i| u.get(i) - breve.get(i) <= *tol).collect();
        let in_psi: Vec<bool> = (0..n).map(|i| in_a[i] && up.get(i) - breve.get(i) <= *tol).collect();
        let order_breve_u = breve.values().iter().zip(u.values()).map(|(b, v)| b - v).fold(f64::NEG_INFINITY, f64::max);
        let order_u_psi = u.values().iter().zip(up.values()).map(|(v, w)| v - w).fold(f64::NEG_INFINITY, f64::max);
        let interior = j > 0 && j < slices;
        let contact = if interior {
            let c = semiconcavity_constant(u).constant.max(semiconvexity_constant(breve).constant);
            Some(contact_set_lipschitz_check(u, breve, c, *tol, derivative_tol)?)
        } else {
            None
        };
        checks.push(SliceCheck {
            time: times[j],
            order_breve_u,
            order_u_psi,
            tolerance: *tol,
            contact,
        });
        a.push(in_a);
        a_psi.push(in_psi);
        a_star.push(star.clone());
    }
    let region = |variant, slices| ContactRegion {
        t0,
        variant,
        times: times.clone(),
        slices,
    };
    let a = region(Variant::A, a);
    let a_psi = region(Variant::APsi, a_psi);
    let a_star = region(Variant::AStar, a_star);
    let star_outside_psi = a_star.outside(&a_psi, 2);
    let psi_outside_a = a_psi.outside(&a, 2);
    let (breve, u, up): (Vec<_>, Vec<_>, Vec<_>) = rows.into_iter().map(|r| (r.0, r.1, r.2)).fold(
        (Vec::new(), Vec::new(), Vec::new()),
        |mut acc, r| {
            acc.0.push(r.0);
            acc.1.push(r.1);
            acc.2.push(r.2);
            acc
        },
    );
    let triple = EvolutionTriple {
        u_breve: SemigroupEvolution::new(OperatorTag::TPlus, times.clone(), breve)?,
        u: SemigroupEvolution::new(OperatorTag::TMinusTPlus, times.clone(), u)?,
        u_psi: SemigroupEvolution::new(OperatorTag::TMinus, times.clone(), up)?,
    };
    Ok(ContactAnalysis {
        t0,
        triple,
        a,
        a_psi,
        a_star,
        slices: checks,
        star_outside_psi,
        psi_outside_a,
        derivative_tolerance: derivative_tol,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct InitialDataReport {
    pub t0: f64,
    /// `|T^-_{t0} psi - u|_inf`.
    pub reach_residual: f64,
    /// `max |psi - u|` on `{tau >= t0}`.
    pub equality_residual: f64,
    /// `max (T^+_{t0} u - psi)` off `{tau >= t0}`.
    pub inequality_violation: f64,
    pub tolerance: f64,
    pub reaches: bool,
    pub pointwise: bool,
}

impl InitialDataReport {
    pub fn agree(&self) -> bool {
        self.reaches == self.pointwise
    }
}

/// Tests both ways whether `psi` is sent to the weak KAM solution of the
/// profile by `T^-_{t0}`: directly, and through the pointwise conditions
/// `psi = u` on `{tau >= t0}`, `psi >= T^+_{t0} u` elsewhere.
pub fn initial_data_characterization(
    profile: &CutProfile,
    psi: &GridFunction,
    ladder: &KernelLadder,
    t0: f64,
    tol: f64,
) -> Result<InitialDataReport> {
    let u = &profile.u;
    u.grid().ensure_same(psi.grid())?;
    let reach_residual = t_minus_at(psi, ladder, t0)?.sup_diff(u)?;
    let tp = t_plus_at(u, ladder, t0)?;
    let sup = profile.super_level(t0);
    let mut equality_residual: f64 = 0.0;
    let mut inequality_violation: f64 = 0.0;
    for i in 0..u.len() {
        if sup[i] {
            equality_residual = equality_residual.max((psi.get(i) - u.get(i)).abs());
        } else {
            inequality_violation = inequality_violation.max(tp.get(i) - psi.get(i));
        }
    }
    Ok(InitialDataReport {
        t0,
        reach_residual,
        equality_residual,
        inequality_violation,
        tolerance: tol,
        reaches: reach_residual <= tol,
        pointwise: equality_residual <= tol && inequality_violation <= tol,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseKind {
    /// `phi = T^-_t rho` checked at `t0 = t`.
    Attainable,
    /// A cosine checked well past its first shock.
    Control,
}

#[derive(Debug, Clone)]
pub struct RandomCase {
    pub seed: u64,
    pub kind: CaseKind,
    pub phi: GridFunction,
    pub t0: f64,
}

/// One case per seed: even positions are attainable, odd ones controls.
/// Attainable cases take `rho` equal to 10 except at 3 to 8 random anchors
/// with values in `[0, 0.5]`, and `t` a random multiple of `16 delta` in
/// `[1/16, 1/2]`. Controls are `a cos(2 pi k x + theta)` with `a` in
/// `[0.5, 1.5]`, `k` in `{1, 2, 3}`, checked at `t0` in `[1/4, 1]`.
pub fn randomized_family(ladder: &KernelLadder, seeds: &[u64]) -> Result<Vec<RandomCase>> {
    let g = *ladder.grid();
    let delta = ladder.base_step();
    let quantum = 16.0 * delta;
    seeds
        .iter()
        .enumerate()
        .map(|(pos, &seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if pos % 2 == 0 {
                let anchors = rng.gen_range(3..=8);
                let mut rho = vec![10.0; g.len()];
                for _ in 0..anchors {
                    rho[rng.gen_range(0..g.len())] = rng.gen_range(0.0..0.5);
                }
                let lo = (0.0625 / quantum).ceil() as u64;
                let hi = (0.5 / quantum).floor() as u64;
                let t = rng.gen_range(lo..=hi) as f64 * quantum;
                let phi = t_minus_at(&GridFunction::new(g, rho)?, ladder, t)?;
                Ok(RandomCase { seed, kind: CaseKind::Attainable, phi, t0: t })
            } else {
                let a = rng.gen_range(0.5..1.5);
                let k = rng.gen_range(1..=3) as f64;
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let lo = (0.25 / quantum).ceil() as u64;
                let hi = (1.0 / quantum).floor() as u64;
                let t0 = rng.gen_range(lo..=hi) as f64 * quantum;
                let phi = GridFunction::from_fn(g, |x| a * (std::f64::consts::TAU * k * x[0] + theta).cos());
                Ok(RandomCase { seed, kind: CaseKind::Control, phi, t0 })
            }
        })
        .collect()
}
