//! Experiment configuration, read from TOML.
//!
//! Every parameter is validated up front and errors name the offending key,
//! e.g. `grid.N`. A configuration serializes back to TOML without loss.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{TorusGrid, MIN_RESOLUTION};
use crate::hamiltonian::{HamiltonianSpec, Potential, TrigTerm};
use crate::kernel::KernelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamiltonianConfig {
    pub potential: Potential,
    /// `K(p) = p^2/2 + quartic p^4/4` when positive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quartic: Option<f64>,
    /// Required with a quartic term, where it cannot be computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critical_value: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "one")]
    pub dim: usize,
    #[serde(rename = "N")]
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub delta: f64,
    #[serde(rename = "W", default = "one_u32")]
    pub winding: u32,
    #[serde(rename = "T_max")]
    pub t_max: f64,
    #[serde(default = "default_ceiling")]
    pub cost_ceiling: f64,
    #[serde(default = "default_v_max")]
    pub v_max: f64,
}

/// Initial datum used by `evolve`, `export function` and the dynamics suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionConfig {
    /// `amplitude cos(2 pi mode x)`.
    Cosine { amplitude: f64, mode: u32 },
    /// `min(cos 2 pi x, cap)`.
    Corner { cap: f64 },
    Constant { value: f64 },
    /// `S^- 0`, the weak KAM solution reached from zero.
    WeakKam,
    /// Node values uniform in `[-1, 1]`.
    Random { seed: u64 },
    /// CSV `index,x,value` as written by `export function`.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimesConfig {
    /// Times for the adjunction suite, `evolve` and `export arcs`.
    pub ladder: Vec<f64>,
    /// Horizons `t0` of the controllability suite.
    #[serde(default)]
    pub contact: Vec<f64>,
    #[serde(default = "default_slices")]
    pub slices: usize,
    /// Times of the level-set identity in the cut-locus suite.
    #[serde(default)]
    pub level_set: Vec<f64>,
    /// Graph-evolution time of the dynamics suite.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<f64>,
    /// Long-minimizer duration and endpoints of the dynamics suite.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arc: Option<f64>,
    #[serde(default = "quarter")]
    pub arc_from: f64,
    #[serde(default = "three_quarters")]
    pub arc_to: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Identities that hold exactly in min-plus arithmetic.
    #[serde(default = "default_exact")]
    pub exact: f64,
    /// Convergence of `S^- 0`.
    #[serde(default = "default_limit")]
    pub limit: f64,
    /// Gradient agreement on contact slices.
    #[serde(default = "default_derivative")]
    pub derivative: f64,
    /// `max |H|` along a refined long minimizer.
    #[serde(default = "default_energy")]
    pub energy: f64,
    /// Initial-data characterization.
    #[serde(default = "default_characterization")]
    pub characterization: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            exact: default_exact(),
            limit: default_limit(),
            derivative: default_derivative(),
            energy: default_energy(),
            characterization: default_characterization(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Rayon workers; the number of available cores when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub hamiltonian: HamiltonianConfig,
    pub grid: GridConfig,
    pub kernel: KernelConfig,
    pub function: FunctionConfig,
    pub times: TimesConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    pub output: OutputConfig,
}

fn one() -> usize {
    1
}
fn one_u32() -> u32 {
    1
}
fn default_ceiling() -> f64 {
    1e6
}
fn default_v_max() -> f64 {
    8.0
}
fn default_slices() -> usize {
    4
}
fn quarter() -> f64 {
    0.25
}
fn three_quarters() -> f64 {
    0.75
}
fn default_exact() -> f64 {
    1e-12
}
fn default_limit() -> f64 {
    1e-9
}
fn default_derivative() -> f64 {
    5e-2
}
fn default_energy() -> f64 {
    5e-2
}
fn default_characterization() -> f64 {
    5e-3
}

fn invalid(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Normalized pendulum on `n` nodes with `delta = 1/(2n)`.
    pub fn pendulum(n: usize) -> Self {
        Self {
            workers: None,
            seeds: (1..=20).collect(),
            hamiltonian: HamiltonianConfig {
                potential: Potential::Trig {
                    terms: vec![TrigTerm { amplitude: 1.0, mode: 1, phase: 0.0 }],
                },
                quartic: None,
                critical_value: None,
            },
            grid: GridConfig { dim: 1, n },
            kernel: KernelConfig {
                delta: 1.0 / (2 * n) as f64,
                winding: 1,
                t_max: 16.0,
                cost_ceiling: default_ceiling(),
                v_max: default_v_max(),
            },
            function: FunctionConfig::Corner { cap: 0.5 },
            times: TimesConfig {
                ladder: vec![0.5, 1.0, 2.0, 4.0],
                contact: vec![0.25],
                slices: 4,
                level_set: vec![0.0625],
                graph: Some(5.0 / n as f64),
                arc: Some(8.0),
                arc_from: 0.25,
                arc_to: 0.75,
            },
            tolerances: Tolerances::default(),
            output: OutputConfig { dir: PathBuf::from("out") },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e.message().split('`').nth(1).unwrap_or("config").to_string();
            Error::Config {
                field,
                message: e.to_string().trim().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.dim != 1 && self.grid.dim != 2 {
            return Err(invalid("grid.dim", format!("must be 1 or 2, got {}", self.grid.dim)));
        }
        if self.grid.n < MIN_RESOLUTION {
            return Err(invalid("grid.N", format!("must be at least {MIN_RESOLUTION}, got {}", self.grid.n)));
        }
        let k = &self.kernel;
        if !(k.delta > 0.0 && k.delta <= 0.1) {
            return Err(invalid("kernel.delta", format!("must lie in (0, 0.1], got {}", k.delta)));
        }
        if k.winding < 1 {
            return Err(invalid("kernel.W", "must be at least 1"));
        }
        if !(k.v_max > 0.0) {
            return Err(invalid("kernel.v_max", format!("must be positive, got {}", k.v_max)));
        }
        if 1.0 / (self.grid.n as f64 * k.delta) > k.v_max {
            return Err(invalid(
                "kernel.delta",
                format!("dx/delta = {:.3} exceeds v_max = {}", 1.0 / (self.grid.n as f64 * k.delta), k.v_max),
            ));
        }
        if !(k.cost_ceiling > 0.0) {
            return Err(invalid("kernel.cost_ceiling", format!("must be positive, got {}", k.cost_ceiling)));
        }
        if !(k.t_max >= k.delta && k.t_max.is_finite()) {
            return Err(invalid("kernel.T_max", format!("must be finite and at least delta, got {}", k.t_max)));
        }
        match self.hamiltonian.quartic {
            Some(q) if !(q >= 0.0) => {
                return Err(invalid("hamiltonian.quartic", format!("must be non-negative, got {q}")));
            }
            Some(q) if q > 0.0 && self.hamiltonian.critical_value.is_none() => {
                return Err(invalid("hamiltonian.critical_value", "required when hamiltonian.quartic is positive"));
            }
            _ => {}
        }
        if let Potential::Sampled { values } = &self.hamiltonian.potential {
            if values.len() < 2 || values.iter().any(|v| !v.is_finite()) {
                return Err(invalid("hamiltonian.potential.values", "needs at least two finite samples"));
            }
        }
        if self.workers == Some(0) {
            return Err(invalid("workers", "must be at least 1"));
        }
        if let FunctionConfig::Corner { cap } = self.function {
            if !cap.is_finite() {
                return Err(invalid("function.cap", "must be finite"));
            }
        }
        self.check_times("times.ladder", &self.times.ladder)?;
        self.check_times("times.contact", &self.times.contact)?;
        self.check_times("times.level_set", &self.times.level_set)?;
        if let Some(t) = self.times.graph {
            self.check_times("times.graph", &[t])?;
        }
        if let Some(t) = self.times.arc {
            self.check_times("times.arc", &[t])?;
        }
        if self.times.slices == 0 {
            return Err(invalid("times.slices", "must be at least 1"));
        }
        for &t0 in &self.times.contact {
            let steps = (t0 / k.delta).round() as u64;
            if steps % self.times.slices as u64 != 0 {
                return Err(invalid(
                    "times.slices",
                    format!("t0 = {t0} is {steps} steps, not divisible into {} slices", self.times.slices),
                ));
            }
        }
        let tol = &self.tolerances;
        for (name, v) in [
            ("tolerances.exact", tol.exact),
            ("tolerances.limit", tol.limit),
            ("tolerances.derivative", tol.derivative),
            ("tolerances.energy", tol.energy),
            ("tolerances.characterization", tol.characterization),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("must be positive, got {v}")));
            }
        }
        Ok(())
    }

    fn check_times(&self, field: &str, times: &[f64]) -> Result<()> {
        for &t in times {
            let r = t / self.kernel.delta;
            if !(t > 0.0) || (r - r.round()).abs() > 1e-9 * r.max(1.0) {
                return Err(invalid(field, format!("{t} is not a positive multiple of kernel.delta")));
            }
            if t > self.kernel.t_max * (1.0 + 1e-12) {
                return Err(invalid(field, format!("{t} exceeds kernel.T_max = {}", self.kernel.t_max)));
            }
        }
        Ok(())
    }

    /// Normalized Hamiltonian.
    pub fn spec(&self) -> Result<HamiltonianSpec> {
        let h = &self.hamiltonian;
        match h.quartic {
            Some(q) if q > 0.0 => {
                let c = h.critical_value.expect("validated");
                Ok(HamiltonianSpec::generic(q, h.potential.clone())?.assume_critical_value(c))
            }
            _ => match h.critical_value {
                Some(c) => Ok(HamiltonianSpec::mechanical(h.potential.clone()).assume_critical_value(c)),
                None => HamiltonianSpec::mechanical(h.potential.clone()).normalize_critical_value(),
            },
        }
    }

    pub fn grid(&self) -> Result<TorusGrid> {
        TorusGrid::new(self.grid.dim, self.grid.n).map_err(|e| invalid("grid.N", e.to_string()))
    }

    pub fn kernel_params(&self) -> KernelParams {
        KernelParams {
            base_step: self.kernel.delta,
            winding: self.kernel.winding,
            v_max: self.kernel.v_max,
            cost_ceiling: self.kernel.cost_ceiling,
        }
    }
}
