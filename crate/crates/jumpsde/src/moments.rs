//! Conditional first and second moments of the one-step scheme and the
//! standardized residuals built from them.
//!
//! The conditional mean is closed-form. Without jumps the conditional
//! variance is too; with jumps the cross terms between the diffusion and
//! the jump bridge are averaged over sampled jump configurations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::simulate::{sample_jump_config, tamed_drift, JumpConfig, SdeModel};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub mean: f64,
    pub variance: f64,
    /// Number of jump configurations averaged; 0 for the closed form.
    pub mc_samples: usize,
}

/// E[X_{t+dt} | X_t = x] = x + f^dt(x) dt.
pub fn cond_mean(x: f64, model: &SdeModel, dt: f64) -> f64 {
    x + tamed_drift(model.drift.value(x), dt) * dt
}

/// Var[X_{t+dt} | X_t = x] without jumps: g^2 dt + (g g' dt)^2 / 2.
pub fn cond_var_nojump(x: f64, model: &SdeModel, dt: f64) -> f64 {
    let g = model.diffusion.value(x);
    let gp = model.diffusion.slope(x);
    g * g * dt + 0.5 * (g * gp * dt).powi(2)
}

/// Jump-case conditional variance for one fixed jump configuration:
/// the no-jump part, the pure jump part gamma^2 mu2 lambda dt, and the two
/// cross terms 2 g sum_i dg_i (t+dt-tau_i) and the double sum over
/// dg_i dg_j (t+dt - max(tau_i, tau_j)), with dg_i = g(x + gamma z_i) - g(x).
fn cross_terms(x: f64, model: &SdeModel, t: f64, dt: f64, cfg: &JumpConfig) -> f64 {
    let g = model.diffusion.value(x);
    let gamma = model.jumps.gamma;
    let n = cfg.count();
    if n == 0 {
        return 0.0;
    }
    let dg: Vec<f64> = cfg
        .sizes
        .iter()
        .map(|&z| model.diffusion.value(x + gamma * z) - g)
        .collect();
    let end = t + dt;
    let mut total = 0.0;
    for i in 0..n {
        total += 2.0 * g * dg[i] * (end - cfg.times[i]);
        for j in 0..n {
            total += dg[i] * dg[j] * (end - cfg.times[i].max(cfg.times[j]));
        }
    }
    total
}

/// Conditional variance given a frozen set of jump configurations, all
/// sampled on the window [t, t+dt]. This is the common-random-numbers
/// variant the trainer uses so losses stay smooth across iterations.
pub fn cond_var_jump_given(
    x: f64,
    model: &SdeModel,
    t: f64,
    dt: f64,
    configs: &[JumpConfig],
) -> MomentEstimate {
    let spec = &model.jumps;
    let base = cond_var_nojump(x, model, dt)
        + spec.gamma * spec.gamma * spec.mu2() * spec.lambda * dt;
    let avg_cross = configs
        .iter()
        .map(|c| cross_terms(x, model, t, dt, c))
        .sum::<f64>()
        / configs.len() as f64;
    MomentEstimate {
        mean: cond_mean(x, model, dt),
        variance: base + avg_cross,
        mc_samples: configs.len(),
    }
}

/// Conditional variance with jumps, averaging over `n_mc` fresh jump
/// configurations drawn from `rng`. Without active jumps this returns the
/// closed form with `mc_samples = 0`.
pub fn cond_var_jump_mc<R: Rng>(
    x: f64,
    model: &SdeModel,
    dt: f64,
    n_mc: usize,
    rng: &mut R,
) -> MomentEstimate {
    if !model.jumps.active() {
        return MomentEstimate {
            mean: cond_mean(x, model, dt),
            variance: cond_var_nojump(x, model, dt),
            mc_samples: 0,
        };
    }
    assert!(n_mc >= 1, "n_mc must be positive when jumps are active");
    let configs: Vec<JumpConfig> = (0..n_mc)
        .map(|_| sample_jump_config(rng, 0.0, dt, &model.jumps))
        .collect();
    cond_var_jump_given(x, model, 0.0, dt, &configs)
}

/// Standardized one-step residual (x_next - mean)/sqrt(variance); falls
/// back to the raw residual when the variance is zero (g(x) = 0 with no
/// jumps), so degenerate states still contribute a signed error.
pub fn standardized_residual(
    x_next: f64,
    x: f64,
    model: &SdeModel,
    dt: f64,
    variance: f64,
) -> f64 {
    let resid = x_next - cond_mean(x, model, dt);
    if variance > 0.0 {
        resid / variance.sqrt()
    } else {
        resid
    }
}
