//! Tonelli Hamiltonians `H(x,p) = K(p) + V(x)` on the torus, their Lagrangians
//! and the critical-value normalization.
//!
//! In two dimensions both the kinetic term and the potential act axis by
//! axis: `H(x,p) = sum_a K(p_a) + V(x_a)`. All one-dimensional evaluation
//! entry points take scalars.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{interpolate_periodic, wrap_unit};

const NEWTON_MAX_ITER: usize = 50;
const NEWTON_TOL: f64 = 1e-10;

/// `amplitude * cos(2 pi mode x + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub amplitude: f64,
    pub mode: u32,
    #[serde(default)]
    pub phase: f64,
}

/// One-periodic potential profile along a single axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Potential {
    Free,
    Trig { terms: Vec<TrigTerm> },
    /// Equally spaced samples, linearly interpolated.
    Sampled { values: Vec<f64> },
}

fn sinc(z: f64) -> f64 {
    if z.abs() < 1e-4 {
        1.0 - z * z / 6.0
    } else {
        z.sin() / z
    }
}

impl Potential {
    pub fn value(&self, x: f64) -> f64 {
        match self {
            Potential::Free => 0.0,
            Potential::Trig { terms } => terms
                .iter()
                .map(|t| t.amplitude * (2.0 * PI * t.mode as f64 * x + t.phase).cos())
                .sum(),
            Potential::Sampled { values } => interpolate_periodic(values, x),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Potential::Free => 0.0,
            Potential::Trig { terms } => terms
                .iter()
                .map(|t| {
                    let w = 2.0 * PI * t.mode as f64;
                    -t.amplitude * w * (w * x + t.phase).sin()
                })
                .sum(),
            Potential::Sampled { values } => {
                let n = values.len();
                let s = wrap_unit(x) * n as f64;
                let i = (s.floor() as usize).min(n - 1);
                (values[(i + 1) % n] - values[i]) * n as f64
            }
        }
    }

    pub fn second_derivative(&self, x: f64) -> f64 {
        match self {
            Potential::Free | Potential::Sampled { .. } => 0.0,
            Potential::Trig { terms } => terms
                .iter()
                .map(|t| {
                    let w = 2.0 * PI * t.mode as f64;
                    -t.amplitude * w * w * (w * x + t.phase).cos()
                })
                .sum(),
        }
    }

    /// Mean of the potential along the straight segment from `a` to `b`
    /// (coordinates in the universal cover).
    pub fn segment_mean(&self, a: f64, b: f64) -> f64 {
        match self {
            Potential::Free => 0.0,
            Potential::Trig { terms } => {
                let mid = 0.5 * (a + b);
                let half = 0.5 * (b - a);
                terms
                    .iter()
                    .map(|t| {
                        let w = 2.0 * PI * t.mode as f64;
                        t.amplitude * (w * mid + t.phase).cos() * sinc(w * half)
                    })
                    .sum()
            }
            Potential::Sampled { values } => {
                if (b - a).abs() < 1e-12 {
                    return self.value(0.5 * (a + b));
                }
                (sampled_primitive(values, b) - sampled_primitive(values, a)) / (b - a)
            }
        }
    }

    /// Maximum over the circle.
    pub fn max_value(&self) -> f64 {
        match self {
            Potential::Free => 0.0,
            Potential::Sampled { values } => {
                values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }
            Potential::Trig { terms } => {
                let top_mode = terms.iter().map(|t| t.mode).max().unwrap_or(1).max(1);
                let samples = 2048 * top_mode as usize;
                let h = 1.0 / samples as f64;
                let (mut best_x, mut best) = (0.0, f64::NEG_INFINITY);
                for i in 0..samples {
                    let x = i as f64 * h;
                    let v = self.value(x);
                    if v > best {
                        best = v;
                        best_x = x;
                    }
                }
                // Newton polish on V' = 0 from the best sample.
                let mut x = best_x;
                for _ in 0..20 {
                    let d2 = self.second_derivative(x);
                    if d2 >= 0.0 {
                        break;
                    }
                    let step = self.derivative(x) / d2;
                    if step.abs() > h {
                        break;
                    }
                    x -= step;
                    if step.abs() < 1e-15 {
                        break;
                    }
                }
                best.max(self.value(x))
            }
        }
    }
}

/// Primitive of the piecewise-linear interpolant, extended to the real line.
fn sampled_primitive(values: &[f64], x: f64) -> f64 {
    let n = values.len();
    let h = 1.0 / n as f64;
    let total: f64 = values.iter().sum::<f64>() * h;
    let turns = x.floor();
    let s = (x - turns) * n as f64;
    let i = (s.floor() as usize).min(n - 1);
    let w = s - i as f64;
    let mut acc = 0.0;
    for k in 0..i {
        acc += 0.5 * (values[k] + values[(k + 1) % n]) * h;
    }
    let (a, b) = (values[i], values[(i + 1) % n]);
    acc += h * (a * w + 0.5 * (b - a) * w * w);
    turns * total + acc
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kinetic {
    /// `K(p) = p^2 / 2`.
    Mechanical,
    /// `K(p) = p^2 / 2 + quartic * p^4 / 4`; Legendre transform by Newton.
    QuadraticGeneric { quartic: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianSpec {
    pub kinetic: Kinetic,
    pub potential: Potential,
    /// Per-axis constant added to the potential profile.
    pub offset: f64,
    /// Critical value of the current Hamiltonian when known.
    pub critical_value: Option<f64>,
    pub normalized: bool,
}

impl HamiltonianSpec {
    pub fn mechanical(potential: Potential) -> Self {
        let c = potential.max_value();
        Self {
            kinetic: Kinetic::Mechanical,
            potential,
            offset: 0.0,
            critical_value: Some(c),
            normalized: false,
        }
    }

    pub fn generic(quartic: f64, potential: Potential) -> Result<Self> {
        if !(quartic >= 0.0) {
            return Err(Error::Config {
                field: "hamiltonian.quartic".into(),
                message: format!("must be non-negative for a Tonelli Hamiltonian, got {quartic}"),
            });
        }
        Ok(Self {
            kinetic: Kinetic::QuadraticGeneric { quartic },
            potential,
            offset: 0.0,
            critical_value: None,
            normalized: false,
        })
    }

    /// `H = p^2/2`, already normalized.
    pub fn free_particle() -> Self {
        Self::mechanical(Potential::Free)
            .normalize_critical_value()
            .expect("mechanical")
    }

    /// `V(x) = amplitude * cos(2 pi mode x)`, not yet normalized.
    pub fn cosine(amplitude: f64, mode: u32) -> Self {
        Self::mechanical(Potential::Trig {
            terms: vec![TrigTerm {
                amplitude,
                mode,
                phase: 0.0,
            }],
        })
    }

    /// `V(x) = depth cos(4 pi x) + tilt cos(2 pi x)`: two wells, two maxima.
    pub fn double_well(depth: f64, tilt: f64) -> Self {
        Self::mechanical(Potential::Trig {
            terms: vec![
                TrigTerm {
                    amplitude: depth,
                    mode: 2,
                    phase: 0.0,
                },
                TrigTerm {
                    amplitude: tilt,
                    mode: 1,
                    phase: 0.0,
                },
            ],
        })
    }

    /// Normalized pendulum: `V(x) = cos(2 pi x) - 1`, Aubry set `{0}`.
    pub fn pendulum() -> Self {
        Self::cosine(1.0, 1)
            .normalize_critical_value()
            .expect("mechanical")
    }

    /// Shifts `V` so that `max V = 0`, which makes the critical value zero.
    pub fn normalize_critical_value(&self) -> Result<Self> {
        match self.kinetic {
            Kinetic::Mechanical => {
                if self.normalized {
                    return Ok(self.clone());
                }
                let mut out = self.clone();
                out.offset = -self.potential.max_value();
                out.critical_value = Some(0.0);
                out.normalized = true;
                Ok(out)
            }
            Kinetic::QuadraticGeneric { .. } => Err(Error::Unsupported(
                "critical value estimation for non-mechanical Hamiltonians; \
                 use assume_critical_value if it is known"
                    .into(),
            )),
        }
    }

    /// Declares the (per-axis) critical value of a Hamiltonian whose value is
    /// known by other means and shifts it to zero.
    pub fn assume_critical_value(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.offset -= c;
        out.critical_value = Some(0.0);
        out.normalized = true;
        out
    }

    pub fn potential(&self, x: f64) -> f64 {
        self.potential.value(x) + self.offset
    }

    pub fn potential_derivative(&self, x: f64) -> f64 {
        self.potential.derivative(x)
    }

    pub fn potential_second_derivative(&self, x: f64) -> f64 {
        self.potential.second_derivative(x)
    }

    pub fn kinetic_energy(&self, p: f64) -> f64 {
        match self.kinetic {
            Kinetic::Mechanical => 0.5 * p * p,
            Kinetic::QuadraticGeneric { quartic } => 0.5 * p * p + 0.25 * quartic * p.powi(4),
        }
    }

    /// `dH/dp`, the velocity of the Hamiltonian flow.
    pub fn velocity(&self, p: f64) -> f64 {
        match self.kinetic {
            Kinetic::Mechanical => p,
            Kinetic::QuadraticGeneric { quartic } => p + quartic * p.powi(3),
        }
    }

    pub fn velocity_derivative(&self, p: f64) -> f64 {
        match self.kinetic {
            Kinetic::Mechanical => 1.0,
            Kinetic::QuadraticGeneric { quartic } => 1.0 + 3.0 * quartic * p * p,
        }
    }

    pub fn hamiltonian(&self, x: f64, p: f64) -> f64 {
        self.kinetic_energy(p) + self.potential(x)
    }

    /// Momentum `p = L_v(x, v)`, solving `dH/dp = v`.
    pub fn momentum(&self, v: f64) -> Result<f64> {
        match self.kinetic {
            Kinetic::Mechanical => Ok(v),
            Kinetic::QuadraticGeneric { quartic } => {
                if quartic == 0.0 {
                    return Ok(v);
                }
                // Start from the cheaper of the two asymptotic inverses.
                let mut p = if v.abs() < 1.0 { v } else { (v / quartic).cbrt() };
                let mut residual = f64::INFINITY;
                for _ in 0..NEWTON_MAX_ITER {
                    residual = self.velocity(p) - v;
                    if residual.abs() <= NEWTON_TOL * (1.0 + v.abs()) {
                        return Ok(p);
                    }
                    p -= residual / self.velocity_derivative(p);
                }
                Err(Error::NewtonDivergence {
                    iterations: NEWTON_MAX_ITER,
                    residual: residual.abs(),
                })
            }
        }
    }

    /// Kinetic part of the Lagrangian, `sup_p { p v - K(p) }`.
    pub fn kinetic_lagrangian(&self, v: f64) -> Result<f64> {
        match self.kinetic {
            Kinetic::Mechanical => Ok(0.5 * v * v),
            Kinetic::QuadraticGeneric { .. } => {
                let p = self.momentum(v)?;
                Ok(p * v - self.kinetic_energy(p))
            }
        }
    }

    pub fn lagrangian_value(&self, x: f64, v: f64) -> Result<f64> {
        Ok(self.kinetic_lagrangian(v)? - self.potential(x))
    }

    /// `L_v(x, v)`.
    pub fn lagrangian_velocity_derivative(&self, _x: f64, v: f64) -> Result<f64> {
        self.momentum(v)
    }

    /// `E(x,v) = L_v(x,v) v - L(x,v)`.
    pub fn energy(&self, x: f64, v: f64) -> Result<f64> {
        let p = self.momentum(v)?;
        Ok(p * v - self.lagrangian_value(x, v)?)
    }

    /// Action of the straight segment `from -> to` (universal-cover
    /// coordinates, one entry per axis) traversed at constant speed in time `t`.
    pub fn segment_action(&self, from: &[f64], to: &[f64], t: f64) -> Result<f64> {
        let mut total = 0.0;
        for (&a, &b) in from.iter().zip(to) {
            let v = (b - a) / t;
            total += t * (self.kinetic_lagrangian(v)? - self.potential.segment_mean(a, b) - self.offset);
        }
        Ok(total)
    }

    /// Every node where the potential is within `tol` of its maximum; for a
    /// normalized mechanical Hamiltonian this is the projected Aubry set.
    pub fn potential_maximizers(&self, n: usize, tol: f64) -> Vec<usize> {
        let top = self.potential.max_value() + self.offset;
        (0..n)
            .filter(|&i| self.potential(i as f64 / n as f64) >= top - tol)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lagrangian_examples() {
        let free = HamiltonianSpec::free_particle();
        assert_eq!(free.lagrangian_value(0.3, 1.0).unwrap(), 0.5);
        let pend = HamiltonianSpec::pendulum();
        assert!((pend.lagrangian_value(0.5, 0.0).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn normalization_examples() {
        let p = HamiltonianSpec::cosine(1.0, 1).normalize_critical_value().unwrap();
        assert!(p.normalized);
        assert_eq!(p.critical_value, Some(0.0));
        for x in [0.0, 0.1, 0.37, 0.5] {
            assert!((p.potential(x) - ((2.0 * PI * x).cos() - 1.0)).abs() < 1e-12);
        }
        let flat = HamiltonianSpec::mechanical(Potential::Sampled { values: vec![5.0; 16] })
            .normalize_critical_value()
            .unwrap();
        assert_eq!(flat.potential(0.3), 0.0);
        let again = p.normalize_critical_value().unwrap();
        assert_eq!(again, p);
        let generic = HamiltonianSpec::generic(0.1, Potential::Free).unwrap();
        assert!(matches!(generic.normalize_critical_value(), Err(Error::Unsupported(_))));
    }

    #[test]
    fn normalized_maximizer_is_a_rest_point_at_critical_level() {
        for spec in [
            HamiltonianSpec::pendulum(),
            HamiltonianSpec::double_well(1.0, 0.3).normalize_critical_value().unwrap(),
        ] {
            let x_star = spec.potential_maximizers(4096, 1e-6)[0] as f64 / 4096.0;
            assert!(spec.hamiltonian(x_star, 0.0).abs() < 1e-6);
            assert!(spec.potential.max_value() + spec.offset == 0.0);
        }
        let p = HamiltonianSpec::pendulum();
        assert!(p.hamiltonian(0.0, 0.0).abs() < 1e-12);
    }

    #[test]
    fn energy_examples() {
        let free = HamiltonianSpec::free_particle();
        assert_eq!(free.energy(0.1, 2.0).unwrap(), 2.0);
        let pend = HamiltonianSpec::pendulum();
        assert!(pend.energy(0.0, 0.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn fenchel_young_equality_and_energy_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let specs = [
            HamiltonianSpec::pendulum(),
            HamiltonianSpec::generic(0.3, Potential::Trig {
                terms: vec![TrigTerm { amplitude: 0.7, mode: 2, phase: 0.4 }],
            })
            .unwrap(),
        ];
        for spec in &specs {
            for _ in 0..1000 {
                let x: f64 = rng.gen();
                let v: f64 = rng.gen_range(-6.0..6.0);
                let l = spec.lagrangian_value(x, v).unwrap();
                let p = spec.lagrangian_velocity_derivative(x, v).unwrap();
                let fy = l + spec.hamiltonian(x, p) - p * v;
                assert!(fy.abs() < 1e-9, "Fenchel residual {fy}");
                let e = spec.energy(x, v).unwrap() - spec.hamiltonian(x, p);
                assert!(e.abs() < 1e-9);
                // Young inequality for an arbitrary momentum
                let q: f64 = rng.gen_range(-6.0..6.0);
                assert!(l + spec.hamiltonian(x, q) >= q * v - 1e-9);
            }
        }
    }

    #[test]
    fn lagrangian_is_convex_in_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = HamiltonianSpec::generic(1.5, Potential::Free).unwrap();
        for _ in 0..500 {
            let x: f64 = rng.gen();
            let a: f64 = rng.gen_range(-10.0..10.0);
            let b: f64 = rng.gen_range(-10.0..10.0);
            let mid = spec.lagrangian_value(x, 0.5 * (a + b)).unwrap();
            let avg = 0.5 * (spec.lagrangian_value(x, a).unwrap() + spec.lagrangian_value(x, b).unwrap());
            assert!(mid <= avg + 1e-9);
        }
    }

    #[test]
    fn segment_mean_matches_quadrature() {
        let pots = [
            Potential::Trig {
                terms: vec![
                    TrigTerm { amplitude: 1.0, mode: 1, phase: 0.0 },
                    TrigTerm { amplitude: -0.4, mode: 3, phase: 1.1 },
                ],
            },
            Potential::Sampled {
                values: (0..16).map(|i| ((i * 7) % 5) as f64 - 2.0).collect(),
            },
        ];
        for pot in &pots {
            for (a, b) in [(0.1, 0.35), (0.9, 1.4), (-0.2, 0.05), (0.3, 0.3 + 1e-9), (0.7, 0.2)] {
                let m = 20000;
                let quad: f64 = (0..m)
                    .map(|k| pot.value(a + (b - a) * (k as f64 + 0.5) / m as f64))
                    .sum::<f64>()
                    / m as f64;
                assert!((pot.segment_mean(a, b) - quad).abs() < 1e-6, "{a} {b}");
            }
        }
    }

    #[test]
    fn free_segment_action_closed_form() {
        let free = HamiltonianSpec::free_particle();
        let a = free.segment_action(&[0.0], &[0.25], 0.1).unwrap();
        assert!((a - 0.3125).abs() < 1e-15);
    }
}
