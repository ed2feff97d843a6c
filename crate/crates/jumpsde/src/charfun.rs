//! Conditional characteristic function of the one-step scheme.
//!
//! Without jumps the CF is closed-form. With jumps, conditioning on a jump
//! configuration leaves the increment a quadratic form in Gaussians whose
//! CF is known; a rank-one (Sherman-Morrison) reduction collapses the
//! matrix algebra to scalars, and the outer expectation over jump
//! configurations is taken by Monte Carlo. A dense complex-LU evaluation
//! of the same quadratic-form CF is kept as a cross-check oracle.

use num_complex::Complex64;
use rand::Rng;
use thiserror::Error;

use crate::simulate::{sample_jump_config, tamed_drift, JumpConfig, SdeModel};

pub type ComplexValue = Complex64;

const I: Complex64 = Complex64::new(0.0, 1.0);

#[derive(Debug, Error)]
pub enum CfError {
    /// The principal square root is ambiguous: Re(1 - iu g g' dt) <= 0.
    /// Cannot happen for real u; only large imaginary shifts trigger it.
    #[error("branch ambiguity in no-jump CF: Re(radicand) = {re}")]
    BranchAmbiguity { re: f64 },
    #[error("singular matrix in quadratic-form CF")]
    Singular,
}

/// CF of Q = d + a'X + c (1'X)^2 with X ~ N(0, diag(sigma_diag)),
/// evaluated by dense complex linear algebra. Test oracle only; the
/// production path is the O(n) closed form below.
pub fn cf_quadform_general(
    sigma_diag: &[f64],
    c: f64,
    a_vec: &[f64],
    d: f64,
    u: Complex64,
) -> Result<Complex64, CfError> {
    let n = sigma_diag.len();
    assert_eq!(a_vec.len(), n);
    assert!(n <= 12, "oracle is dimension-capped");
    if u == Complex64::ZERO {
        return Ok(Complex64::ONE);
    }
    let sqrt_sigma: Vec<f64> = sigma_diag.iter().map(|s| s.sqrt()).collect();
    // M = I - 2iu c S^{1/2} 11' S^{1/2}
    let alpha = 2.0 * I * u * c;
    let mut m = vec![vec![Complex64::ZERO; n]; n];
    for r in 0..n {
        for col in 0..n {
            m[r][col] = -alpha * sqrt_sigma[r] * sqrt_sigma[col];
            if r == col {
                m[r][col] += 1.0;
            }
        }
    }
    let rhs: Vec<Complex64> = (0..n)
        .map(|r| Complex64::from(sqrt_sigma[r] * a_vec[r]))
        .collect();
    let (det, y) = lu_det_solve(m, rhs)?;
    // quad = a' S^{1/2} M^{-1} S^{1/2} a
    let quad: Complex64 = (0..n).map(|r| sqrt_sigma[r] * a_vec[r] * y[r]).sum();
    let exponent = I * u * d - u * u / 2.0 * quad;
    Ok(exponent.exp() / det.sqrt())
}

/// Partial-pivot LU: returns (determinant, solution of M y = rhs).
fn lu_det_solve(
    mut m: Vec<Vec<Complex64>>,
    mut rhs: Vec<Complex64>,
) -> Result<(Complex64, Vec<Complex64>), CfError> {
    let n = m.len();
    let mut det = Complex64::ONE;
    for k in 0..n {
        let pivot = (k..n)
            .max_by(|&a, &b| m[a][k].norm_sqr().total_cmp(&m[b][k].norm_sqr()))
            .unwrap();
        if m[pivot][k].norm_sqr() == 0.0 {
            return Err(CfError::Singular);
        }
        if pivot != k {
            m.swap(k, pivot);
            rhs.swap(k, pivot);
            det = -det;
        }
        det *= m[k][k];
        for r in k + 1..n {
            let factor = m[r][k] / m[k][k];
            for col in k..n {
                let sub = factor * m[k][col];
                m[r][col] -= sub;
            }
            let sub = factor * rhs[k];
            rhs[r] -= sub;
        }
    }
    let mut y = vec![Complex64::ZERO; n];
    for k in (0..n).rev() {
        let mut s = rhs[k];
        for col in k + 1..n {
            s -= m[k][col] * y[col];
        }
        y[k] = s / m[k][k];
    }
    Ok((det, y))
}

/// Sherman-Morrison scalar form of the same CF: with dtau_j the segment
/// widths (summing to dt) and c_j the per-segment diffusion coefficients,
/// (1 - 2iuc dt)^{-1/2} exp(-(u^2/2)[sum c_j^2 dtau_j
///   + (2iuc/(1-2iuc dt)) (sum c_j dtau_j)^2] + iud).
pub fn cf_quadform_closed(
    dtaus: &[f64],
    coeffs: &[f64],
    c: f64,
    d: f64,
    u: Complex64,
) -> Complex64 {
    assert_eq!(dtaus.len(), coeffs.len());
    let dt: f64 = dtaus.iter().sum();
    let denom = Complex64::ONE - 2.0 * I * u * c * dt;
    let s2: f64 = dtaus.iter().zip(coeffs).map(|(&t, &cj)| cj * cj * t).sum();
    let s1: f64 = dtaus.iter().zip(coeffs).map(|(&t, &cj)| cj * t).sum();
    let quad = s2 + 2.0 * I * u * c / denom * (s1 * s1);
    (I * u * d - u * u / 2.0 * quad).exp() / denom.sqrt()
}

/// Closed-form CF of one step without jumps:
/// exp(iu(x + (f^dt - g g'/2) dt) - (u^2 g^2 dt / 2)/(1 - iu g g' dt))
///   / sqrt(1 - iu g g' dt).
pub fn cf_nojump(u: Complex64, x: f64, model: &SdeModel, dt: f64) -> Result<Complex64, CfError> {
    let f = tamed_drift(model.drift.value(x), dt);
    let g = model.diffusion.value(x);
    let gp = model.diffusion.slope(x);
    let ggp = g * gp;
    let radicand = Complex64::ONE - I * u * ggp * dt;
    if radicand.re <= 0.0 {
        return Err(CfError::BranchAmbiguity { re: radicand.re });
    }
    let mu = x + (f - 0.5 * ggp) * dt;
    let exponent = I * u * mu - u * u * g * g * dt / 2.0 / radicand;
    Ok(exponent.exp() / radicand.sqrt())
}

/// Per-segment diffusion coefficients for one jump configuration:
/// c_1 = g(x) and each jump before segment j contributes
/// g(x + gamma z_l) - g(x).
fn segment_coeffs(x: f64, model: &SdeModel, cfg: &JumpConfig) -> Vec<f64> {
    let g = model.diffusion.value(x);
    let gamma = model.jumps.gamma;
    let mut coeffs = Vec::with_capacity(cfg.count() + 1);
    let mut cur = g;
    coeffs.push(cur);
    for &z in &cfg.sizes {
        cur += model.diffusion.value(x + gamma * z) - g;
        coeffs.push(cur);
    }
    coeffs
}

/// Jump-case CF averaged over a frozen set of jump configurations (the
/// common-random-numbers path shared across a whole density grid).
pub fn cf_jump_given(
    u: Complex64,
    x: f64,
    model: &SdeModel,
    t: f64,
    dt: f64,
    configs: &[JumpConfig],
) -> Complex64 {
    let f = tamed_drift(model.drift.value(x), dt);
    let g = model.diffusion.value(x);
    let c = 0.5 * g * model.diffusion.slope(x);
    let gamma = model.jumps.gamma;
    let denom = Complex64::ONE - 2.0 * I * u * c * dt;
    let prefactor = (I * u * (x + (f - c) * dt)).exp() / denom.sqrt();
    let mean: Complex64 = configs
        .iter()
        .map(|cfg| {
            let dtaus = cfg.segment_widths(t, dt);
            let coeffs = segment_coeffs(x, model, cfg);
            let s2: f64 = dtaus.iter().zip(&coeffs).map(|(&t, &cj)| cj * cj * t).sum();
            let s1: f64 = dtaus.iter().zip(&coeffs).map(|(&t, &cj)| cj * t).sum();
            let jump_sum: f64 = cfg.sizes.iter().sum();
            let quad = s2 + 2.0 * I * u * c / denom * (s1 * s1);
            (-u * u / 2.0 * quad + I * u * gamma * jump_sum).exp()
        })
        .sum::<Complex64>()
        / configs.len() as f64;
    prefactor * mean
}

/// Jump-case CF with `n_mc` fresh jump configurations.
pub fn cf_jump_mc<R: Rng>(
    u: Complex64,
    x: f64,
    model: &SdeModel,
    dt: f64,
    n_mc: usize,
    rng: &mut R,
) -> Complex64 {
    assert!(n_mc >= 1);
    let configs: Vec<JumpConfig> = (0..n_mc)
        .map(|_| sample_jump_config(rng, 0.0, dt, &model.jumps))
        .collect();
    cf_jump_given(u, x, model, 0.0, dt, &configs)
}

/// CF of one transition under `model`, dispatching on whether jumps are
/// active; jump configurations are drawn from `rng` when they are.
pub fn cf_transition<R: Rng>(
    u: Complex64,
    x: f64,
    model: &SdeModel,
    dt: f64,
    n_mc: usize,
    rng: &mut R,
) -> Result<Complex64, CfError> {
    if model.jumps.active() {
        Ok(cf_jump_mc(u, x, model, dt, n_mc, rng))
    } else {
        cf_nojump(u, x, model, dt)
    }
}
