//! Reference data: PDE problem descriptors, periodic GP initial conditions,
//! spectral solvers and trajectory datasets.

pub mod dataset;
pub mod gp;
pub mod solvers;

pub use dataset::{generate_dataset, DatasetMeta, GpParams, TrajectoryDataset};
pub use gp::sample_gp_initial;
pub use solvers::{
    solve_allen_cahn, solve_cahn_hilliard, solve_heat, solve_navier_stokes, SpectralSolver,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

fn default_ch_stabilization() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PdeKind {
    /// `u_t = alpha Lap u + f`
    Heat { alpha: f64 },
    /// `u_t = d1 Lap u + d2 u (1 - u^2)`
    AllenCahn { d1: f64, d2: f64 },
    /// `u_t = Lap w`, `w = -d1 Lap u + d2 (u^3 - u)`.
    ///
    /// Each step adds `S Lap (u^{n+1} - u^n)` with
    /// `S = max(stabilization, d2 (3 max|u^n|^2 - 1) / 2)`, which keeps the
    /// explicit chemical potential stable. With `S = 0` this is the plain
    /// semi-implicit scheme.
    CahnHilliard {
        d1: f64,
        d2: f64,
        #[serde(default = "default_ch_stabilization")]
        stabilization: f64,
    },
    /// `w_t + u . grad w = nu Lap w + f` in vorticity form.
    NavierStokes { nu: f64 },
}

impl PdeKind {
    pub fn name(&self) -> &'static str {
        match self {
            PdeKind::Heat { .. } => "heat",
            PdeKind::AllenCahn { .. } => "allen_cahn",
            PdeKind::CahnHilliard { .. } => "cahn_hilliard",
            PdeKind::NavierStokes { .. } => "navier_stokes",
        }
    }

    pub fn heat() -> Self {
        PdeKind::Heat { alpha: 0.01 }
    }

    pub fn allen_cahn() -> Self {
        PdeKind::AllenCahn { d1: 1e-3, d2: 1.0 }
    }

    pub fn cahn_hilliard() -> Self {
        PdeKind::CahnHilliard {
            d1: 1e-4,
            d2: 1.0,
            stabilization: default_ch_stabilization(),
        }
    }

    pub fn navier_stokes() -> Self {
        PdeKind::NavierStokes { nu: 1e-3 }
    }

    /// Forcing used by default for this equation.
    pub fn default_forcing(&self) -> ForcingSpec {
        match self {
            PdeKind::Heat { .. } => ForcingSpec::GpDraw { scale: 0.1 },
            PdeKind::NavierStokes { .. } => ForcingSpec::Diagonal { amplitude: 0.1 },
            _ => ForcingSpec::None,
        }
    }
}

/// Time-constant source term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ForcingSpec {
    None,
    /// A fixed draw from the initial-condition GP, scaled.
    GpDraw { scale: f64 },
    /// `amplitude * (sin(2 pi (x + y)) + cos(2 pi (x + y)))`
    Diagonal { amplitude: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdeProblem {
    pub pde: PdeKind,
    pub forcing: ForcingSpec,
    /// Solver grid `[H, W]`.
    pub grid: [usize; 2],
    pub fine_dt: f64,
    pub horizon: f64,
}

impl PdeProblem {
    /// Problem with the equation's default forcing.
    pub fn new(pde: PdeKind, grid: [usize; 2], fine_dt: f64, horizon: f64) -> Self {
        let forcing = pde.default_forcing();
        PdeProblem {
            pde,
            forcing,
            grid,
            fine_dt,
            horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive, got {v}")))
            }
        };
        match self.pde {
            PdeKind::Heat { alpha } => positive("alpha", alpha)?,
            PdeKind::AllenCahn { d1, d2 } => {
                positive("d1", d1)?;
                positive("d2", d2)?;
            }
            PdeKind::CahnHilliard {
                d1,
                d2,
                stabilization,
            } => {
                positive("d1", d1)?;
                positive("d2", d2)?;
                if !(stabilization >= 0.0) {
                    return Err(Error::config("stabilization", "must be non-negative"));
                }
            }
            PdeKind::NavierStokes { nu } => positive("nu", nu)?,
        }
        positive("fine_dt", self.fine_dt)?;
        if !(self.horizon >= 0.0) {
            return Err(Error::config("horizon", "must be non-negative"));
        }
        let [h, w] = self.grid;
        if !h.is_power_of_two() || !w.is_power_of_two() {
            return Err(Error::config("grid", format!("{h}x{w} is not a power-of-two grid")));
        }
        Ok(())
    }

    pub fn has_forcing(&self) -> bool {
        !matches!(self.forcing, ForcingSpec::None)
    }

    /// Number of fine steps covering the horizon.
    pub fn fine_steps(&self) -> Result<usize> {
        let n = (self.horizon / self.fine_dt).round();
        if (n * self.fine_dt - self.horizon).abs() > 1e-9 * self.horizon.max(1.0) {
            return Err(Error::config(
                "horizon",
                format!("{} is not a multiple of fine_dt {}", self.horizon, self.fine_dt),
            ));
        }
        Ok(n as usize)
    }

    /// Materialises the forcing on the solver grid (`None` when absent).
    pub fn forcing_field(&self, seed: u64, gp: &GpParams) -> Result<Option<Tensor>> {
        let [h, w] = self.grid;
        match self.forcing {
            ForcingSpec::None => Ok(None),
            ForcingSpec::GpDraw { scale } => {
                let f = sample_gp_initial(h, w, gp.length_scale, gp.jitter, seed)?;
                Ok(Some(f.scale(scale)))
            }
            ForcingSpec::Diagonal { amplitude } => Ok(Some(Tensor::from_fn(&[1, h, w], |p| {
                let (x, y) = ((p / w) as f64 / h as f64, (p % w) as f64 / w as f64);
                let s = 2.0 * PI * (x + y);
                amplitude * (s.sin() + s.cos())
            }))),
        }
    }
}
