//! Fourier inversion of the one-step CF into a transition density, and the
//! approximated log-likelihood of an observed path built from it.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::charfun::{cf_jump_given, cf_nojump, CfError};
use crate::par::map_slice;
use crate::rngutil::{stream, StreamTag};
use crate::simulate::{sample_jump_config, JumpConfig, SdeModel};

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Inversion grid: u_m = m h + i a for m = -M..=M, plus the positivity
/// clamp applied before taking logs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FourierConfig {
    pub m: usize,
    pub h: f64,
    pub a: f64,
    pub floor: f64,
}

impl FourierConfig {
    /// Training-scale default (M = 200).
    pub fn training() -> Self {
        FourierConfig {
            m: 200,
            h: 0.05,
            a: 0.0,
            floor: 1e-12,
        }
    }

    /// Analysis-scale default (M = 2000).
    pub fn analysis() -> Self {
        FourierConfig {
            m: 2000,
            h: 0.05,
            a: 0.0,
            floor: 1e-12,
        }
    }

    pub fn u_points(&self) -> Vec<Complex64> {
        let m = self.m as i64;
        (-m..=m)
            .map(|k| Complex64::new(k as f64 * self.h, self.a))
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum DensityError {
    /// With a = 0 the inversion sum is real up to rounding; a visible
    /// imaginary residue means the CF lost its Hermitian symmetry.
    #[error("imaginary residue {residue} in Fourier inversion at x = {x}")]
    ImaginaryResidue { x: f64, residue: f64 },
    #[error(transparent)]
    Cf(#[from] CfError),
}

/// CF evaluated on a fixed inversion grid, reusable across evaluation
/// points of one density query.
#[derive(Debug, Clone)]
pub struct CfGrid {
    pub cfg: FourierConfig,
    pub phi: Vec<Complex64>,
}

impl CfGrid {
    pub fn from_fn(cfg: FourierConfig, cf: impl Fn(Complex64) -> Complex64) -> Self {
        let phi = cfg.u_points().into_iter().map(cf).collect();
        CfGrid { cfg, phi }
    }

    /// No-jump transitions: closed-form CF on the grid.
    pub fn nojump(cfg: FourierConfig, x: f64, model: &SdeModel, dt: f64) -> Result<Self, CfError> {
        let phi = cfg
            .u_points()
            .into_iter()
            .map(|u| cf_nojump(u, x, model, dt))
            .collect::<Result<_, _>>()?;
        Ok(CfGrid { cfg, phi })
    }

    /// Jump transitions: MC-averaged CF over one frozen set of jump
    /// configurations shared by all grid points.
    pub fn jump(
        cfg: FourierConfig,
        x: f64,
        model: &SdeModel,
        dt: f64,
        configs: &[JumpConfig],
    ) -> Self {
        let points = cfg.u_points();
        let phi = map_slice(&points, |&u| cf_jump_given(u, x, model, 0.0, dt, configs));
        CfGrid { cfg, phi }
    }

    /// Density at one point: Re[(1/2pi) sum_m e^{-i x u_m} phi(u_m) h],
    /// clamped below at the configured floor.
    pub fn density_at(&self, x: f64) -> Result<f64, DensityError> {
        let cfg = &self.cfg;
        let mut sum = Complex64::ZERO;
        let m = cfg.m as i64;
        for (idx, k) in (-m..=m).enumerate() {
            let u = Complex64::new(k as f64 * cfg.h, cfg.a);
            sum += (-I * x * u).exp() * self.phi[idx];
        }
        let value = sum * cfg.h / (2.0 * std::f64::consts::PI);
        if cfg.a == 0.0 && value.im.abs() > 1e-6 {
            return Err(DensityError::ImaginaryResidue {
                x,
                residue: value.im,
            });
        }
        Ok(value.re.max(cfg.floor))
    }
}

/// One-off density evaluation from an arbitrary CF.
pub fn fourier_density(
    x_eval: f64,
    cf: impl Fn(Complex64) -> Complex64,
    cfg: FourierConfig,
) -> Result<f64, DensityError> {
    CfGrid::from_fn(cfg, cf).density_at(x_eval)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LoglikReport {
    pub loglik: f64,
    pub transitions: usize,
    /// Transitions whose density hit the positivity floor.
    pub clamped: usize,
}

/// Approximated log-likelihood of a discretely observed path: the sum of
/// log transition densities along the chain. Each jump transition owns an
/// RNG substream, so results do not depend on evaluation order.
pub fn loglik_path(
    path: &[f64],
    times: &[f64],
    model: &SdeModel,
    cfg: FourierConfig,
    n_mc: usize,
    seed: u64,
) -> Result<LoglikReport, DensityError> {
    assert!(path.len() >= 2, "path needs at least one transition");
    assert_eq!(path.len(), times.len());
    let idx: Vec<usize> = (0..path.len() - 1).collect();
    let terms = map_slice(&idx, |&i| -> Result<f64, DensityError> {
        let (x, x_next) = (path[i], path[i + 1]);
        let dt = times[i + 1] - times[i];
        let grid = if model.jumps.active() {
            let mut rng = stream(seed, StreamTag::CfMc, i as u64);
            let configs: Vec<JumpConfig> = (0..n_mc)
                .map(|_| sample_jump_config(&mut rng, 0.0, dt, &model.jumps))
                .collect();
            CfGrid::jump(cfg, x, model, dt, &configs)
        } else {
            CfGrid::nojump(cfg, x, model, dt)?
        };
        grid.density_at(x_next)
    });
    let mut loglik = 0.0;
    let mut clamped = 0;
    for term in terms {
        let d = term?;
        if d <= cfg.floor {
            clamped += 1;
        }
        loglik += d.ln();
    }
    Ok(LoglikReport {
        loglik,
        transitions: path.len() - 1,
        clamped,
    })
}

/// Convenience for evenly spaced observations.
pub fn loglik_path_dt(
    path: &[f64],
    dt: f64,
    model: &SdeModel,
    cfg: FourierConfig,
    n_mc: usize,
    seed: u64,
) -> Result<LoglikReport, DensityError> {
    let times: Vec<f64> = (0..path.len()).map(|i| i as f64 * dt).collect();
    loglik_path(path, &times, model, cfg, n_mc, seed)
}
