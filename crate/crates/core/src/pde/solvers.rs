//! Pseudo-spectral time steppers on the periodic unit square.
//!
//! Axis 0 (rows) is `x = i/H`, axis 1 (columns) is `y = j/W`. The symbol of
//! `-Laplacian` is `lambda = |2 pi k|^2`. Stiff linear terms are treated
//! implicitly (or exactly for heat), nonlinear terms explicitly.

use super::{PdeKind, PdeProblem};
use crate::error::{Error, Result};
use crate::spectral::{signed_freq, Fft2Plan};
use crate::tensor::Tensor;
use num_complex::Complex64;
use std::f64::consts::PI;
use std::rc::Rc;

/// States with `max |u|` above this abort integration.
pub const BLOW_UP_THRESHOLD: f64 = 10.0;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Precomputed symbols for one problem on one grid.
pub struct SpectralSolver {
    kind: PdeKind,
    h: usize,
    w: usize,
    dt: f64,
    plan: Rc<Fft2Plan>,
    /// `2 pi k_x`, `2 pi k_y` per mode.
    kx: Vec<f64>,
    ky: Vec<f64>,
    lam: Vec<f64>,
    /// Heat: exact propagator and forcing weight per mode.
    heat: Option<(Vec<f64>, Vec<f64>)>,
    dealias: Vec<bool>,
    forcing_hat: Option<Vec<Complex64>>,
}

impl SpectralSolver {
    pub fn new(problem: &PdeProblem, forcing: Option<&Tensor>) -> Result<Self> {
        problem.validate()?;
        let [h, w] = problem.grid;
        let plan = Fft2Plan::cached(h, w)?;
        let n = h * w;
        let mut kx = vec![0.0; n];
        let mut ky = vec![0.0; n];
        let mut lam = vec![0.0; n];
        let mut dealias = vec![true; n];
        for i in 0..h {
            let fx = signed_freq(i, h);
            for j in 0..w {
                let fy = signed_freq(j, w);
                let p = i * w + j;
                kx[p] = 2.0 * PI * fx as f64;
                ky[p] = 2.0 * PI * fy as f64;
                lam[p] = kx[p] * kx[p] + ky[p] * ky[p];
                dealias[p] = 3 * fx.unsigned_abs() < h as u64 && 3 * fy.unsigned_abs() < w as u64;
            }
        }
        let dt = problem.fine_dt;
        let heat = match problem.pde {
            PdeKind::Heat { alpha } => {
                let prop: Vec<f64> = lam.iter().map(|&l| (-alpha * l * dt).exp()).collect();
                let weight = lam
                    .iter()
                    .zip(&prop)
                    .map(|(&l, &e)| if l == 0.0 { dt } else { (1.0 - e) / (alpha * l) })
                    .collect();
                Some((prop, weight))
            }
            _ => None,
        };
        let forcing_hat = match forcing {
            Some(f) => {
                if f.shape() != [1, h, w] {
                    return Err(Error::shape(format!(
                        "forcing {:?} does not match the {h}x{w} grid",
                        f.shape()
                    )));
                }
                Some(plan.forward_real(f.data()))
            }
            None => None,
        };
        Ok(SpectralSolver {
            kind: problem.pde.clone(),
            h,
            w,
            dt,
            plan,
            kx,
            ky,
            lam,
            heat,
            dealias,
            forcing_hat,
        })
    }

    fn to_real(&self, mut buf: Vec<Complex64>) -> Vec<f64> {
        self.plan.inverse(&mut buf);
        buf.into_iter().map(|z| z.re).collect()
    }

    fn forcing(&self, p: usize) -> Complex64 {
        self.forcing_hat.as_ref().map_or(ZERO, |f| f[p])
    }

    /// Velocity `(dpsi/dy, -dpsi/dx)` from a vorticity spectrum, with
    /// `psi_hat = w_hat / lambda` away from the mean mode.
    fn velocity_hat(&self, w_hat: &[Complex64]) -> (Vec<Complex64>, Vec<Complex64>) {
        let i = Complex64::new(0.0, 1.0);
        let n = self.h * self.w;
        let mut u = vec![ZERO; n];
        let mut v = vec![ZERO; n];
        for p in 0..n {
            if self.lam[p] == 0.0 {
                continue;
            }
            let psi = w_hat[p] / self.lam[p];
            u[p] = i * self.ky[p] * psi;
            v[p] = -i * self.kx[p] * psi;
        }
        (u, v)
    }

    /// Advances one fine step in place.
    pub fn step(&self, u: &mut [f64]) {
        let n = self.h * self.w;
        let dt = self.dt;
        let u_hat = self.plan.forward_real(u);
        let next: Vec<Complex64> = match self.kind {
            PdeKind::Heat { .. } => {
                let (prop, weight) = self.heat.as_ref().expect("heat symbols");
                (0..n)
                    .map(|p| prop[p] * u_hat[p] + weight[p] * self.forcing(p))
                    .collect()
            }
            PdeKind::AllenCahn { d1, d2 } => {
                let react: Vec<f64> = u.iter().map(|&x| d2 * x * (1.0 - x * x)).collect();
                let r_hat = self.plan.forward_real(&react);
                (0..n)
                    .map(|p| {
                        (u_hat[p] + dt * (r_hat[p] + self.forcing(p))) / (1.0 + dt * d1 * self.lam[p])
                    })
                    .collect()
            }
            PdeKind::CahnHilliard {
                d1,
                d2,
                stabilization,
            } => {
                // The explicit potential has slope d2 (3u^2 - 1); S at least half
                // of its maximum keeps the linearised step non-expansive.
                let umax = u.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                let s = stabilization.max(0.5 * d2 * (3.0 * umax * umax - 1.0));
                let chem: Vec<f64> = u.iter().map(|&x| d2 * (x * x * x - x)).collect();
                let c_hat = self.plan.forward_real(&chem);
                (0..n)
                    .map(|p| {
                        let l = self.lam[p];
                        ((1.0 + dt * s * l) * u_hat[p] - dt * l * c_hat[p] + dt * self.forcing(p))
                            / (1.0 + dt * d1 * l * l + dt * s * l)
                    })
                    .collect()
            }
            PdeKind::NavierStokes { nu } => {
                let adv = self.advection_hat(&u_hat);
                (0..n)
                    .map(|p| (u_hat[p] + dt * (self.forcing(p) - adv[p])) / (1.0 + dt * nu * self.lam[p]))
                    .collect()
            }
        };
        u.copy_from_slice(&self.to_real(next));
    }

    /// Dealiased spectrum of `u . grad w`.
    fn advection_hat(&self, w_hat: &[Complex64]) -> Vec<Complex64> {
        let i = Complex64::new(0.0, 1.0);
        let n = self.h * self.w;
        let masked: Vec<Complex64> = (0..n)
            .map(|p| if self.dealias[p] { w_hat[p] } else { ZERO })
            .collect();
        let (u_hat, v_hat) = self.velocity_hat(&masked);
        let wx: Vec<Complex64> = (0..n).map(|p| i * self.kx[p] * masked[p]).collect();
        let wy: Vec<Complex64> = (0..n).map(|p| i * self.ky[p] * masked[p]).collect();
        let (u, v) = (self.to_real(u_hat), self.to_real(v_hat));
        let (wx, wy) = (self.to_real(wx), self.to_real(wy));
        let prod: Vec<f64> = (0..n).map(|p| u[p] * wx[p] + v[p] * wy[p]).collect();
        let mut out = self.plan.forward_real(&prod);
        for (z, &keep) in out.iter_mut().zip(&self.dealias) {
            if !keep {
                *z = ZERO;
            }
        }
        out
    }

    /// Physical velocity components of a vorticity field.
    pub fn velocity(&self, w: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (u, v) = self.velocity_hat(&self.plan.forward_real(w));
        (self.to_real(u), self.to_real(v))
    }

    /// Largest magnitude of the spectrally computed divergence of `(u, v)`.
    pub fn divergence(&self, u: &[f64], v: &[f64]) -> f64 {
        let i = Complex64::new(0.0, 1.0);
        let (uh, vh) = (self.plan.forward_real(u), self.plan.forward_real(v));
        let div: Vec<Complex64> = (0..self.h * self.w)
            .map(|p| i * self.kx[p] * uh[p] + i * self.ky[p] * vh[p])
            .collect();
        self.to_real(div).iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Integrates `n_steps` fine steps from `u0` and returns every
    /// `store_stride`-th state, starting with `u0`.
    pub fn run(&self, u0: &Tensor, n_steps: usize, store_stride: usize) -> Result<Vec<Tensor>> {
        if store_stride == 0 {
            return Err(Error::contract("store stride must be at least 1"));
        }
        if u0.shape() != [1, self.h, self.w] {
            return Err(Error::shape(format!(
                "initial state {:?} does not match the {}x{} grid",
                u0.shape(),
                self.h,
                self.w
            )));
        }
        let mut u = u0.data().to_vec();
        if matches!(self.kind, PdeKind::NavierStokes { .. }) {
            let mean = u.iter().sum::<f64>() / u.len() as f64;
            u.iter_mut().for_each(|x| *x -= mean);
        }
        let mut frames = vec![Tensor::from_vec(u0.shape(), u.clone())?];
        for s in 1..=n_steps {
            self.step(&mut u);
            let mag = u.iter().fold(0.0f64, |m, x| if x.is_finite() { m.max(x.abs()) } else { f64::INFINITY });
            if mag > BLOW_UP_THRESHOLD {
                return Err(Error::BlowUp {
                    step: s,
                    magnitude: mag,
                });
            }
            if s % store_stride == 0 {
                frames.push(Tensor::from_vec(u0.shape(), u.clone())?);
            }
        }
        Ok(frames)
    }
}

fn solve_kind(
    expect: &str,
    problem: &PdeProblem,
    u0: &Tensor,
    forcing: Option<&Tensor>,
    n_steps: usize,
) -> Result<Vec<Tensor>> {
    if problem.pde.name() != expect {
        return Err(Error::contract(format!(
            "expected a {expect} problem, got {}",
            problem.pde.name()
        )));
    }
    SpectralSolver::new(problem, forcing)?.run(u0, n_steps, 1)
}

/// Heat equation with the exact exponential integrator; returns every step.
pub fn solve_heat(problem: &PdeProblem, u0: &Tensor, forcing: Option<&Tensor>, n_steps: usize) -> Result<Vec<Tensor>> {
    solve_kind("heat", problem, u0, forcing, n_steps)
}

/// Allen–Cahn with implicit diffusion and explicit reaction.
pub fn solve_allen_cahn(problem: &PdeProblem, u0: &Tensor, forcing: Option<&Tensor>, n_steps: usize) -> Result<Vec<Tensor>> {
    solve_kind("allen_cahn", problem, u0, forcing, n_steps)
}

/// Cahn–Hilliard with the fourth-order term implicit.
pub fn solve_cahn_hilliard(problem: &PdeProblem, u0: &Tensor, forcing: Option<&Tensor>, n_steps: usize) -> Result<Vec<Tensor>> {
    solve_kind("cahn_hilliard", problem, u0, forcing, n_steps)
}

/// 2D vorticity Navier–Stokes; the initial mean is removed.
pub fn solve_navier_stokes(problem: &PdeProblem, w0: &Tensor, forcing: Option<&Tensor>, n_steps: usize) -> Result<Vec<Tensor>> {
    solve_kind("navier_stokes", problem, w0, forcing, n_steps)
}
