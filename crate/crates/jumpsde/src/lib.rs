//! Numerical laboratory for scalar jump-diffusion SDEs driven by a Poisson
//! random measure with symmetric jump sizes.
//!
//! The crate simulates trajectories with a tamed-Milstein scheme, evaluates
//! the one-step conditional characteristic function and its Fourier-inversion
//! density, trains small MLPs to recover drift and diffusion coefficients
//! nonparametrically, and estimates the jump parameters (lambda, gamma) with
//! two Metropolis-Hastings samplers.

pub mod autodiff;
pub mod charfun;
pub mod cli;
pub mod density;
pub mod expr;
pub mod mcmc;
pub mod moments;
pub mod net;
pub mod par;
pub mod rngutil;
pub mod simulate;
pub mod trainer;

use std::sync::Arc;

/// A scalar coefficient x -> value with an available first derivative.
///
/// Implemented symbolically by [`expr::ExprAst`] pairs and by trained
/// networks through a central finite difference.
pub trait Coefficient: Send + Sync {
    fn value(&self, x: f64) -> f64;
    fn slope(&self, x: f64) -> f64;
}

pub type CoeffRef = Arc<dyn Coefficient>;

/// Coefficient backed by a closure pair; handy in tests.
pub struct FnCoefficient<F, G> {
    pub f: F,
    pub df: G,
}

impl<F, G> Coefficient for FnCoefficient<F, G>
where
    F: Fn(f64) -> f64 + Send + Sync,
    G: Fn(f64) -> f64 + Send + Sync,
{
    fn value(&self, x: f64) -> f64 {
        (self.f)(x)
    }
    fn slope(&self, x: f64) -> f64 {
        (self.df)(x)
    }
}

/// Build a coefficient from closures.
pub fn coeff_fn<F, G>(f: F, df: G) -> CoeffRef
where
    F: Fn(f64) -> f64 + Send + Sync + 'static,
    G: Fn(f64) -> f64 + Send + Sync + 'static,
{
    Arc::new(FnCoefficient { f, df })
}
