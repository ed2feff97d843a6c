//! Three-phase neural estimation of the drift and diffusion coefficients:
//! a joint likelihood warm-up, selective-random alternating moment
//! matching, and standardized-residual-weighted refinement.
//!
//! Every loss exists twice: a tape-tracked version used for gradient
//! steps and a straight-line f64 version used for selection weights and
//! as an independent cross-check (the two must agree to ~1e-10).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use num_complex::Complex64;

use crate::autodiff::{Tape, Var};
use crate::density::{CfGrid, FourierConfig};
use crate::net::{AdamState, Head, Mlp, NetCoefficient, INPUT_DERIV_DELTA};
use crate::par::map_slice;
use crate::rngutil::{stream, StreamTag};
use crate::simulate::{sample_jump_config, tamed_drift, JumpConfig, JumpSpec, PathSet};

/// Observed realizations on a uniform time grid, partitioned into
/// contiguous blocks; the jump parameters are treated as known.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub dt: f64,
    /// K paths, each with n_points states.
    pub paths: Vec<Vec<f64>>,
    pub n_points: usize,
    pub n_blocks: usize,
    pub jumps: JumpSpec,
}

impl TrainData {
    pub fn new(paths: Vec<Vec<f64>>, dt: f64, n_blocks: usize, jumps: JumpSpec) -> Self {
        let n_points = paths[0].len();
        assert!(paths.iter().all(|p| p.len() == n_points));
        assert!(n_points / n_blocks >= 2, "blocks need at least two points");
        TrainData {
            dt,
            paths,
            n_points,
            n_blocks,
            jumps,
        }
    }

    pub fn from_pathset(ps: &PathSet, jumps: JumpSpec, n_blocks: usize) -> Self {
        let dt = ps.times[1] - ps.times[0];
        Self::new(ps.paths.clone(), dt, n_blocks, jumps)
    }

    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }

    /// Transition start indices of block j: state i transitions to i+1,
    /// both inside the block.
    pub fn block_transitions(&self, j: usize) -> std::ops::Range<usize> {
        let base = self.n_points / self.n_blocks;
        let extra = self.n_points % self.n_blocks;
        let start = j * base + j.min(extra);
        let len = base + usize::from(j < extra);
        start..start + len - 1
    }

    /// Pooled observed state range across all paths.
    pub fn state_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for p in &self.paths {
            for &x in p {
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainSeeds {
    pub init_f: u64,
    pub init_g: u64,
    pub reset_g: u64,
    pub sampling: u64,
}

impl TrainSeeds {
    pub fn from_master(seed: u64) -> Self {
        TrainSeeds {
            init_f: seed,
            init_g: seed.wrapping_add(1),
            reset_g: seed.wrapping_add(2),
            sampling: seed.wrapping_add(3),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epoch0: usize,
    pub epoch1: usize,
    pub epoch2: usize,
    pub train_f: usize,
    pub r1: usize,
    pub r2: usize,
    pub r3: usize,
    pub r4: usize,
    pub lr: f64,
    pub fourier: FourierConfig,
    pub n_mc_var: usize,
    pub n_mc_cf: usize,
    pub seeds: TrainSeeds,
    pub eval_grid: usize,
}

impl TrainConfig {
    /// Defaults for diffusions without jumps (long likelihood warm-up).
    pub fn nojump_default(seed: u64) -> Self {
        TrainConfig {
            epoch0: 400,
            epoch1: 100,
            epoch2: 400,
            train_f: 4,
            r1: 8,
            r2: 2,
            r3: 4,
            r4: 4,
            lr: 0.001,
            fourier: FourierConfig::training(),
            n_mc_var: 400,
            n_mc_cf: 200,
            seeds: TrainSeeds::from_master(seed),
            eval_grid: 200,
        }
    }

    /// Defaults for jump runs (short warm-up, epoch0 = 10).
    pub fn jump_default(seed: u64) -> Self {
        TrainConfig {
            epoch0: 10,
            ..Self::nojump_default(seed)
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub trace_phase1: Vec<f64>,
    pub trace_phase2_f: Vec<f64>,
    pub trace_phase2_g: Vec<f64>,
    pub trace_phase3_f: Vec<f64>,
    pub trace_phase3_g: Vec<f64>,
    pub clamped_phase1: usize,
    pub uniform_fallbacks: usize,
    pub mse_f: Option<f64>,
    pub mse_g: Option<f64>,
    pub wall_secs: f64,
}

/// Sequential weighted draw without replacement: pick an index with
/// probability w_i / sum(w), remove it, renormalize, repeat. Weights may
/// be any nonnegative numbers proportional to the intended probabilities.
/// If the remaining weights are all zero the draw falls back to uniform
/// over the remaining indices (reported via the returned flag).
pub fn weighted_sample_without_replacement<R: Rng>(
    weights: &[f64],
    k: usize,
    rng: &mut R,
) -> (Vec<usize>, bool) {
    assert!(k <= weights.len());
    assert!(weights.iter().all(|&w| w >= 0.0));
    let mut remaining: Vec<usize> = (0..weights.len()).collect();
    let mut picked = Vec::with_capacity(k);
    let mut fell_back = false;
    for _ in 0..k {
        let total: f64 = remaining.iter().map(|&i| weights[i]).sum();
        let pos = if total > 0.0 {
            let r = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut chosen = remaining.len() - 1;
            for (p, &i) in remaining.iter().enumerate() {
                acc += weights[i];
                if r < acc {
                    chosen = p;
                    break;
                }
            }
            chosen
        } else {
            fell_back = true;
            rng.random_range(0..remaining.len())
        };
        picked.push(remaining.remove(pos));
    }
    (picked, fell_back)
}

// ---------------------------------------------------------------------------
// Loss definitions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// |mean squared drift residuals| (warm-up drift loss).
    D1,
    /// Negative block log-likelihood through the Fourier density.
    D2,
    /// |mean signed drift residuals|.
    L1,
    /// Mean of (squared residual - conditional variance)^2.
    L2,
    /// Indicator-split drift + variance matching (Phase-3 f loss).
    L3L4,
}

/// Frozen Monte-Carlo support for one block in one epoch: jump
/// configurations shared across optimizer iterations (common random
/// numbers). Both pools are empty for models without jumps.
#[derive(Debug, Clone, Default)]
pub struct BlockSupport {
    pub var_configs: Vec<JumpConfig>,
    pub cf_configs: Vec<JumpConfig>,
}

fn supports_for_epoch(
    data: &TrainData,
    cfg: &TrainConfig,
    tag: StreamTag,
    epoch: usize,
) -> Vec<BlockSupport> {
    if !data.jumps.active() {
        return vec![BlockSupport::default(); data.n_blocks];
    }
    let r = data.n_blocks as u64;
    (0..data.n_blocks)
        .map(|j| {
            let idx = epoch as u64 * 2 * r + 2 * j as u64;
            let mut var_rng = stream(cfg.seeds.sampling, tag, idx);
            let mut cf_rng = stream(cfg.seeds.sampling, tag, idx + 1);
            BlockSupport {
                var_configs: (0..cfg.n_mc_var)
                    .map(|_| sample_jump_config(&mut var_rng, 0.0, data.dt, &data.jumps))
                    .collect(),
                cf_configs: (0..cfg.n_mc_cf)
                    .map(|_| sample_jump_config(&mut cf_rng, 0.0, data.dt, &data.jumps))
                    .collect(),
            }
        })
        .collect()
}

/// f64 conditional variance from the networks (closed form plus frozen
/// jump-config cross terms), mirroring the moments module.
fn cond_var_f64(x: f64, g_net: &Mlp, dt: f64, jumps: &JumpSpec, configs: &[JumpConfig]) -> f64 {
    let g = g_net.forward_f64(x);
    let gp = g_net.slope_f64(x, INPUT_DERIV_DELTA);
    let mut v = g * g * dt + 0.5 * (g * gp * dt).powi(2);
    if jumps.active() {
        v += jumps.gamma * jumps.gamma * jumps.mu2() * jumps.lambda * dt;
        let mut cross = 0.0;
        for cfg in configs {
            let dg: Vec<f64> = cfg
                .sizes
                .iter()
                .map(|&z| g_net.forward_f64(x + jumps.gamma * z) - g)
                .collect();
            for i in 0..dg.len() {
                cross += 2.0 * g * dg[i] * (dt - cfg.times[i]);
                for j in 0..dg.len() {
                    cross += dg[i] * dg[j] * (dt - cfg.times[i].max(cfg.times[j]));
                }
            }
        }
        v += cross / configs.len() as f64;
    }
    v
}

fn drift_residual_f64(x: f64, x_next: f64, f_net: &Mlp, dt: f64) -> f64 {
    x_next - x - tamed_drift(f_net.forward_f64(x), dt) * dt
}

/// Straight-line loss evaluation (no tape). Used for selection weights
/// and as the independent re-implementation the tracked losses are
/// checked against.
pub fn loss_value(
    kind: LossKind,
    f_net: &Mlp,
    g_net: &Mlp,
    data: &TrainData,
    block: usize,
    path: usize,
    support: &BlockSupport,
    fourier: FourierConfig,
) -> f64 {
    let xs = &data.paths[path];
    let dt = data.dt;
    let trans: Vec<usize> = data.block_transitions(block).collect();
    let n = trans.len() as f64;
    match kind {
        LossKind::D1 => {
            let s: f64 = trans
                .iter()
                .map(|&i| drift_residual_f64(xs[i], xs[i + 1], f_net, dt).powi(2))
                .sum();
            (s / n).abs()
        }
        LossKind::L1 => {
            let s: f64 = trans
                .iter()
                .map(|&i| drift_residual_f64(xs[i], xs[i + 1], f_net, dt))
                .sum();
            (s / n).abs()
        }
        LossKind::L2 => trans
            .iter()
            .map(|&i| {
                let r = drift_residual_f64(xs[i], xs[i + 1], f_net, dt);
                let v = cond_var_f64(xs[i], g_net, dt, &data.jumps, &support.var_configs);
                (r * r - v).powi(2)
            })
            .sum::<f64>()
            / n,
        LossKind::L3L4 => {
            let (wa, wb) = indicator_weights(g_net, xs, &trans);
            trans
                .iter()
                .map(|&i| {
                    let r = drift_residual_f64(xs[i], xs[i + 1], f_net, dt);
                    let v = cond_var_f64(xs[i], g_net, dt, &data.jumps, &support.var_configs);
                    let w = if g_net.forward_f64(xs[i]) != 0.0 { wa } else { wb };
                    w * (r * r + (r * r - v).powi(2))
                })
                .sum()
        }
        LossKind::D2 => {
            let model = crate::simulate::SdeModel::new(
                std::sync::Arc::new(NetCoefficient::new(f_net.clone())),
                std::sync::Arc::new(NetCoefficient::new(g_net.clone())),
                xs[0],
                data.jumps,
            );
            trans
                .iter()
                .map(|&i| {
                    let grid = if data.jumps.active() {
                        CfGrid::jump(fourier, xs[i], &model, dt, &support.cf_configs)
                    } else {
                        CfGrid::nojump(fourier, xs[i], &model, dt).expect("real-u CF")
                    };
                    -grid.density_at(xs[i + 1]).expect("hermitian CF").ln()
                })
                .sum()
        }
    }
}

/// Per-group normalizers 1/|group| for the indicator split on ĝ != 0.
fn indicator_weights(g_net: &Mlp, xs: &[f64], trans: &[usize]) -> (f64, f64) {
    let na = trans.iter().filter(|&&i| g_net.forward_f64(xs[i]) != 0.0).count();
    let nb = trans.len() - na;
    (
        if na > 0 { 1.0 / na as f64 } else { 0.0 },
        if nb > 0 { 1.0 / nb as f64 } else { 0.0 },
    )
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad_f: Vec<f64>,
    pub grad_g: Vec<f64>,
    pub clamped: usize,
}

struct ChunkOut {
    sum: f64,
    grad_f: Vec<f64>,
    grad_g: Vec<f64>,
    clamped: usize,
}

/// Tracked loss evaluation with gradients. Only the networks a loss can
/// influence are tracked: D1/L1/L3+L4 differentiate f (g enters as a
/// constant), L2 differentiates g (the residual is a constant), D2
/// differentiates both. Transitions are processed in fixed-size chunks on
/// private tapes and the chunk gradients summed in order, so the result
/// is bit-identical at any thread count.
pub fn loss_grad(
    kind: LossKind,
    f_net: &Mlp,
    g_net: &Mlp,
    data: &TrainData,
    block: usize,
    path: usize,
    support: &BlockSupport,
    fourier: FourierConfig,
) -> LossGrad {
    let xs = &data.paths[path];
    let dt = data.dt;
    let trans: Vec<usize> = data.block_transitions(block).collect();
    let n = trans.len() as f64;
    let (track_f, track_g) = match kind {
        LossKind::D1 | LossKind::L1 | LossKind::L3L4 => (true, false),
        LossKind::L2 => (false, true),
        LossKind::D2 => (true, true),
    };
    let (wa, wb) = indicator_weights(g_net, xs, &trans);

    const CHUNK: usize = 25;
    let chunks: Vec<&[usize]> = trans.chunks(CHUNK).collect();
    let outs = map_slice(&chunks, |chunk| {
        let tape = Tape::new();
        let fvars = if track_f { tape.vars(&f_net.params) } else { Vec::new() };
        let gvars = if track_g { tape.vars(&g_net.params) } else { Vec::new() };
        let mut terms = Vec::with_capacity(chunk.len());
        let mut clamped = 0usize;
        for &i in *chunk {
            let (x, x_next) = (xs[i], xs[i + 1]);
            let term = match kind {
                LossKind::D1 | LossKind::L1 => {
                    let fhat = f_net.forward_fused(&tape, &fvars, x);
                    let fd = fhat / (1.0 + dt * fhat.square());
                    let r = (x_next - x) - fd * dt;
                    if kind == LossKind::D1 { r.square() / n } else { r / n }
                }
                LossKind::L2 => {
                    let r = drift_residual_f64(x, x_next, f_net, dt);
                    let v = tracked_cond_var(&tape, g_net, &gvars, x, dt, &data.jumps, &support.var_configs);
                    (r * r - v).square() / n
                }
                LossKind::L3L4 => {
                    let fhat = f_net.forward_fused(&tape, &fvars, x);
                    let fd = fhat / (1.0 + dt * fhat.square());
                    let r = (x_next - x) - fd * dt;
                    let v = cond_var_f64(x, g_net, dt, &data.jumps, &support.var_configs);
                    let w = if g_net.forward_f64(x) != 0.0 { wa } else { wb };
                    (r.square() + (r.square() - v).square()) * w
                }
                LossKind::D2 => {
                    let fhat = f_net.forward_fused(&tape, &fvars, x);
                    let fd = fhat / (1.0 + dt * fhat.square());
                    let (g, gp) =
                        g_net.forward_with_input_deriv(&tape, &gvars, x, INPUT_DERIV_DELTA);
                    let density = if data.jumps.active() {
                        tracked_density_jump(
                            &tape, g_net, &gvars, x_next, x, dt, fd, g, gp, &data.jumps,
                            &support.cf_configs, fourier,
                        )
                    } else {
                        tracked_density_nojump(&tape, x_next, x, dt, fd, g, gp, fourier)
                    };
                    if density.value() <= fourier.floor {
                        clamped += 1;
                    }
                    -(density.clamp_floor(fourier.floor).ln())
                }
            };
            terms.push(term);
        }
        let total = tape.sum(&terms);
        let grads = tape.backward(total);
        ChunkOut {
            sum: total.value(),
            grad_f: fvars.iter().map(|&v| grads.wrt(v)).collect(),
            grad_g: gvars.iter().map(|&v| grads.wrt(v)).collect(),
            clamped,
        }
    });

    let mut sum = 0.0;
    let mut grad_f = vec![0.0; if track_f { f_net.n_params() } else { 0 }];
    let mut grad_g = vec![0.0; if track_g { g_net.n_params() } else { 0 }];
    let mut clamped = 0;
    for out in &outs {
        sum += out.sum;
        for (a, b) in grad_f.iter_mut().zip(&out.grad_f) {
            *a += b;
        }
        for (a, b) in grad_g.iter_mut().zip(&out.grad_g) {
            *a += b;
        }
        clamped += out.clamped;
    }
    // |S| post-processing for the absolute-mean losses
    let (value, scale) = match kind {
        LossKind::D1 | LossKind::L1 => (sum.abs(), sum.signum() * f64::from(sum != 0.0)),
        _ => (sum, 1.0),
    };
    if scale != 1.0 {
        for a in grad_f.iter_mut() {
            *a *= scale;
        }
        for a in grad_g.iter_mut() {
            *a *= scale;
        }
    }
    LossGrad {
        value,
        grad_f,
        grad_g,
        clamped,
    }
}

/// Tracked conditional variance through the g-network (the tracked twin
/// of `cond_var_f64`).
fn tracked_cond_var<'t>(
    tape: &'t Tape,
    g_net: &Mlp,
    gvars: &[Var<'t>],
    x: f64,
    dt: f64,
    jumps: &JumpSpec,
    configs: &[JumpConfig],
) -> Var<'t> {
    let (g, gp) = g_net.forward_with_input_deriv(tape, gvars, x, INPUT_DERIV_DELTA);
    let mut v = g.square() * dt + (g * gp * dt).square() * 0.5;
    if jumps.active() {
        v = v + jumps.gamma * jumps.gamma * jumps.mu2() * jumps.lambda * dt;
        let mut cross_terms = Vec::new();
        for cfg in configs {
            let dg: Vec<Var<'t>> = cfg
                .sizes
                .iter()
                .map(|&z| {
                    g_net.forward_fused(tape, gvars, x + jumps.gamma * z) - g
                })
                .collect();
            for i in 0..dg.len() {
                cross_terms.push(dg[i] * (2.0 * (dt - cfg.times[i])) * g);
                for j in 0..dg.len() {
                    cross_terms.push(dg[i] * dg[j] * (dt - cfg.times[i].max(cfg.times[j])));
                }
            }
        }
        if !cross_terms.is_empty() {
            v = v + tape.sum(&cross_terms) / configs.len() as f64;
        }
    }
    v
}

/// Tracked Fourier density of one no-jump transition, exploiting a = 0
/// symmetry: d = h/(2 pi) (1 + 2 sum_{m=1..M} Re(e^{-i x' u_m} phi(u_m))).
///
/// The density depends on the networks only through three tracked
/// scalars — mu = x + (f^dt - g g'/2) dt, G = g^2 dt, and C = g g' dt —
/// so the whole inversion sum is evaluated in plain f64 and fused into a
/// single tape node carrying the analytic partials d(density)/d(mu, G, C).
fn tracked_density_nojump<'t>(
    tape: &'t Tape,
    x_next: f64,
    x: f64,
    dt: f64,
    fd: Var<'t>,
    g: Var<'t>,
    gp: Var<'t>,
    fourier: FourierConfig,
) -> Var<'t> {
    assert_eq!(fourier.a, 0.0, "training densities use a = 0");
    let ggp = g * gp;
    let mu = (fd - ggp * 0.5) * dt + x;
    let big_g = g.square() * dt;
    let big_c = ggp * dt;
    let (muv, gv, cv) = (mu.value(), big_g.value(), big_c.value());
    let i = Complex64::new(0.0, 1.0);
    let mut sum = 0.0;
    let mut d_mu = 0.0;
    let mut d_g = 0.0;
    let mut d_c = 0.0;
    for m in 1..=fourier.m {
        let u = m as f64 * fourier.h;
        let w = Complex64::new(1.0, -u * cv);
        let q = -u * u / 2.0 * gv / w;
        let phi = (i * u * muv + q).exp() / w.sqrt();
        let e = Complex64::new(0.0, -u * x_next).exp();
        sum += (e * phi).re;
        d_mu += (e * phi * i * u).re;
        d_g += (e * phi * (-u * u / 2.0) / w).re;
        d_c += (e * phi * (i * u / w) * (q + 0.5)).re;
    }
    let scale = fourier.h / std::f64::consts::PI; // h/2pi times the 2x symmetry factor
    tape.node(
        (sum + 0.5) * scale,
        &[mu, big_g, big_c],
        &[d_mu * scale, d_g * scale, d_c * scale],
    )
}

/// Tracked Fourier density of one jump transition: the Sherman-Morrison
/// CF averaged over the frozen jump configurations, inverted on the same
/// symmetric grid.
///
/// The tracked inputs are mu' = x + (f^dt - c) dt, c = g g'/2, and the
/// per-configuration sums S2_k = sum c_j^2 dtau_j and (S1_k)^2 with
/// S1_k = sum c_j dtau_j; everything downstream of those is closed-form
/// and fused into one node with analytic partials.
#[allow(clippy::too_many_arguments)]
fn tracked_density_jump<'t>(
    tape: &'t Tape,
    g_net: &Mlp,
    gvars: &[Var<'t>],
    x_next: f64,
    x: f64,
    dt: f64,
    fd: Var<'t>,
    g: Var<'t>,
    gp: Var<'t>,
    jumps: &JumpSpec,
    configs: &[JumpConfig],
    fourier: FourierConfig,
) -> Var<'t> {
    assert_eq!(fourier.a, 0.0, "training densities use a = 0");
    let c = g * gp * 0.5;
    let pre_mu = (fd - c) * dt + x;
    // per-config tracked sums, shared across all grid points
    let n_cfg = configs.len();
    let mut s2s = Vec::with_capacity(n_cfg);
    let mut s1sqs = Vec::with_capacity(n_cfg);
    let mut jump_sums = Vec::with_capacity(n_cfg);
    for cfg in configs {
        let dtaus = cfg.segment_widths(0.0, dt);
        let mut coeff = g;
        let mut s2 = coeff.square() * dtaus[0];
        let mut s1 = coeff * dtaus[0];
        for (k, &z) in cfg.sizes.iter().enumerate() {
            coeff = coeff + (g_net.forward_fused(tape, gvars, x + jumps.gamma * z) - g);
            s2 = s2 + coeff.square() * dtaus[k + 1];
            s1 = s1 + coeff * dtaus[k + 1];
        }
        s2s.push(s2);
        s1sqs.push(s1.square());
        jump_sums.push(jumps.gamma * cfg.sizes.iter().sum::<f64>());
    }

    let i = Complex64::new(0.0, 1.0);
    let inv_n = 1.0 / n_cfg as f64;
    let (pmv, cvv) = (pre_mu.value(), c.value());
    let s2v: Vec<f64> = s2s.iter().map(|v| v.value()).collect();
    let s1qv: Vec<f64> = s1sqs.iter().map(|v| v.value()).collect();
    let mut sum = 0.0;
    let mut d_pm = 0.0;
    let mut d_c = 0.0;
    let mut d_s2 = vec![0.0; n_cfg];
    let mut d_s1q = vec![0.0; n_cfg];
    for m in 1..=fourier.m {
        let u = m as f64 * fourier.h;
        let w = Complex64::new(1.0, -2.0 * u * cvv * dt);
        let beta = -i * u * u * u * cvv / w;
        let dbeta_dc = -i * u * u * u / w + 2.0 * u * u * u * u * cvv * dt / (w * w);
        let p = (i * u * pmv).exp() / w.sqrt();
        let e = Complex64::new(0.0, -u * x_next).exp();
        let ep = e * p; // shared prefactor of every config term
        let mut mean = Complex64::ZERO;
        let mut dc_configs = Complex64::ZERO;
        for k in 0..n_cfg {
            let a = Complex64::new(-u * u / 2.0 * s2v[k], u * jump_sums[k]) + beta * s1qv[k];
            let ea = a.exp();
            mean += ea;
            dc_configs += ea * dbeta_dc * s1qv[k];
            d_s2[k] += (ep * ea).re * inv_n * (-u * u / 2.0);
            d_s1q[k] += (ep * ea * beta).re * inv_n;
        }
        mean *= inv_n;
        dc_configs *= inv_n;
        let phi = p * mean;
        sum += (e * phi).re;
        d_pm += (e * phi * i * u).re;
        // dP/dc = P (iu dt)/w acting on the mean, plus the beta dependence
        d_c += (e * (p * mean * (i * u * dt) / w + p * dc_configs)).re;
    }
    let scale = fourier.h / std::f64::consts::PI;
    let mut parents = Vec::with_capacity(2 + 2 * n_cfg);
    let mut partials = Vec::with_capacity(2 + 2 * n_cfg);
    parents.push(pre_mu);
    partials.push(d_pm * scale);
    parents.push(c);
    partials.push(d_c * scale);
    for k in 0..n_cfg {
        parents.push(s2s[k]);
        partials.push(d_s2[k] * scale);
        parents.push(s1sqs[k]);
        partials.push(d_s1q[k] * scale);
    }
    tape.node((sum + 0.5) * scale, &parents, &partials)
}

// ---------------------------------------------------------------------------
// H statistic
// ---------------------------------------------------------------------------

/// Block statistic H_j: average squared standardized residual, split over
/// the ĝ != 0 and ĝ = 0 sub-blocks (each term active only when its
/// sub-block is nonempty). Near 1 when both networks fit.
pub fn stat_h(
    f_net: &Mlp,
    g_net: &Mlp,
    data: &TrainData,
    block: usize,
    path: usize,
    support: &BlockSupport,
) -> f64 {
    let xs = &data.paths[path];
    let dt = data.dt;
    let (mut sa, mut na, mut sb, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in data.block_transitions(block) {
        let r = drift_residual_f64(xs[i], xs[i + 1], f_net, dt);
        let v = cond_var_f64(xs[i], g_net, dt, &data.jumps, &support.var_configs);
        let y = if v > 0.0 { r / v.sqrt() } else { r };
        if g_net.forward_f64(xs[i]) != 0.0 {
            sa += y * y;
            na += 1;
        } else {
            sb += y * y;
            nb += 1;
        }
    }
    let mut h = 0.0;
    if na > 0 {
        h += sa / na as f64;
    }
    if nb > 0 {
        h += sb / nb as f64;
    }
    h
}

// ---------------------------------------------------------------------------
// Phases
// ---------------------------------------------------------------------------

fn draw_paths(rng: &mut ChaCha8Rng, r: usize, k: usize) -> Vec<usize> {
    (0..r).map(|_| rng.random_range(0..k)).collect()
}

/// Phase 1: joint f, g training on the likelihood loss D2 over every
/// (block, path) pair, then reset the g-network.
pub fn run_phase1(
    f_net: &mut Mlp,
    g_net: &mut Mlp,
    data: &TrainData,
    cfg: &TrainConfig,
    report: &mut TrainReport,
) {
    let mut adam_f = AdamState::new(f_net.n_params(), cfg.lr);
    let mut adam_g = AdamState::new(g_net.n_params(), cfg.lr);
    for epoch in 0..cfg.epoch0 {
        let supports = supports_for_epoch(data, cfg, StreamTag::Phase1, epoch);
        for j in 0..data.n_blocks {
            for i in 0..data.n_paths() {
                let lg = loss_grad(
                    LossKind::D2, f_net, g_net, data, j, i, &supports[j], cfg.fourier,
                );
                adam_f.step(&mut f_net.params, &lg.grad_f);
                adam_g.step(&mut g_net.params, &lg.grad_g);
                report.trace_phase1.push(lg.value);
                report.clamped_phase1 += lg.clamped;
            }
        }
    }
    *g_net = Mlp::init(
        g_net.widths.clone(),
        Head::Softplus,
        cfg.seeds.reset_g,
        StreamTag::InitG,
    );
}

/// Phase 2: selective alternating training — f on L1 over R1 blocks
/// weighted by L1 values, then g on L2 over R2 blocks weighted by L2.
pub fn run_phase2(
    f_net: &mut Mlp,
    g_net: &mut Mlp,
    data: &TrainData,
    cfg: &TrainConfig,
    report: &mut TrainReport,
) {
    let mut adam_f = AdamState::new(f_net.n_params(), cfg.lr);
    let mut adam_g = AdamState::new(g_net.n_params(), cfg.lr);
    let mut rng = stream(cfg.seeds.sampling, StreamTag::Phase2, u64::MAX);
    let (r, k) = (data.n_blocks, data.n_paths());
    for epoch in 0..cfg.epoch1 {
        let supports = supports_for_epoch(data, cfg, StreamTag::Phase2, epoch);
        // drift step
        let u1 = draw_paths(&mut rng, r, k);
        let js: Vec<usize> = (0..r).collect();
        let l1: Vec<f64> = map_slice(&js, |&j| {
            loss_value(LossKind::L1, f_net, g_net, data, j, u1[j], &supports[j], cfg.fourier)
        });
        let (sel, fb) = weighted_sample_without_replacement(&l1, cfg.r1, &mut rng);
        report.uniform_fallbacks += usize::from(fb);
        for &j in &sel {
            let lg = loss_grad(
                LossKind::L1, f_net, g_net, data, j, u1[j], &supports[j], cfg.fourier,
            );
            adam_f.step(&mut f_net.params, &lg.grad_f);
            report.trace_phase2_f.push(lg.value);
        }
        // diffusion step
        let u2 = draw_paths(&mut rng, r, k);
        let l2: Vec<f64> = map_slice(&js, |&j| {
            loss_value(LossKind::L2, f_net, g_net, data, j, u2[j], &supports[j], cfg.fourier)
        });
        let (sel, fb) = weighted_sample_without_replacement(&l2, cfg.r2, &mut rng);
        report.uniform_fallbacks += usize::from(fb);
        for &j in &sel {
            let lg = loss_grad(
                LossKind::L2, f_net, g_net, data, j, u2[j], &supports[j], cfg.fourier,
            );
            adam_g.step(&mut g_net.params, &lg.grad_g);
            report.trace_phase2_g.push(lg.value);
        }
    }
}

/// Phase 3: H-weighted refinement — train_f rounds of f on L3+L4 with
/// weights proportional to H_j, then g on L2 with weights proportional
/// to 1/H_j.
pub fn run_phase3(
    f_net: &mut Mlp,
    g_net: &mut Mlp,
    data: &TrainData,
    cfg: &TrainConfig,
    report: &mut TrainReport,
) {
    let mut adam_f = AdamState::new(f_net.n_params(), cfg.lr);
    let mut adam_g = AdamState::new(g_net.n_params(), cfg.lr);
    let mut rng = stream(cfg.seeds.sampling, StreamTag::Phase3, u64::MAX);
    let (r, k) = (data.n_blocks, data.n_paths());
    let js: Vec<usize> = (0..r).collect();
    for epoch in 0..cfg.epoch2 {
        let supports = supports_for_epoch(data, cfg, StreamTag::Phase3, epoch);
        let mut h_last = vec![1.0; r];
        for _ in 0..cfg.train_f {
            let u3 = draw_paths(&mut rng, r, k);
            let h: Vec<f64> = map_slice(&js, |&j| {
                stat_h(f_net, g_net, data, j, u3[j], &supports[j])
            });
            h_last.clone_from_slice(&h);
            let (sel, fb) = weighted_sample_without_replacement(&h, cfg.r3, &mut rng);
            report.uniform_fallbacks += usize::from(fb);
            for &j in &sel {
                let lg = loss_grad(
                    LossKind::L3L4, f_net, g_net, data, j, u3[j], &supports[j], cfg.fourier,
                );
                adam_f.step(&mut f_net.params, &lg.grad_f);
                report.trace_phase3_f.push(lg.value);
            }
        }
        let u4 = draw_paths(&mut rng, r, k);
        let winv: Vec<f64> = h_last
            .iter()
            .map(|&h| if h > 0.0 { 1.0 / h } else { 0.0 })
            .collect();
        let (sel, fb) = weighted_sample_without_replacement(&winv, cfg.r4, &mut rng);
        report.uniform_fallbacks += usize::from(fb);
        for &j in &sel {
            let lg = loss_grad(
                LossKind::L2, f_net, g_net, data, j, u4[j], &supports[j], cfg.fourier,
            );
            adam_g.step(&mut g_net.params, &lg.grad_g);
            report.trace_phase3_g.push(lg.value);
        }
    }
}

/// MSE of a network against a ground-truth coefficient on a uniform grid.
pub fn mse_on_grid(net: &Mlp, truth: &dyn Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let step = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| {
            let x = lo + i as f64 * step;
            (net.forward_f64(x) - truth(x)).powi(2)
        })
        .sum::<f64>()
        / n as f64
}

/// Ground-truth coefficients for MSE evaluation.
pub struct Truth<'a> {
    pub drift: &'a dyn Fn(f64) -> f64,
    pub diffusion: &'a dyn Fn(f64) -> f64,
}

/// The complete three-phase algorithm. Deterministic given `cfg.seeds`.
pub fn train_full(data: &TrainData, cfg: &TrainConfig, truth: Option<Truth>) -> (Mlp, Mlp, TrainReport) {
    let start = std::time::Instant::now();
    let mut f_net = Mlp::drift_net(cfg.seeds.init_f);
    let mut g_net = Mlp::diffusion_net(cfg.seeds.init_g);
    let mut report = TrainReport::default();
    run_phase1(&mut f_net, &mut g_net, data, cfg, &mut report);
    run_phase2(&mut f_net, &mut g_net, data, cfg, &mut report);
    run_phase3(&mut f_net, &mut g_net, data, cfg, &mut report);
    if let Some(truth) = truth {
        let (lo, hi) = data.state_range();
        report.mse_f = Some(mse_on_grid(&f_net, truth.drift, lo, hi, cfg.eval_grid));
        report.mse_g = Some(mse_on_grid(&g_net, truth.diffusion, lo, hi, cfg.eval_grid));
    }
    report.wall_secs = start.elapsed().as_secs_f64();
    (f_net, g_net, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff_fn;
    use crate::simulate::{simulate_paths, JumpLaw, SdeModel};
    use std::collections::HashMap;

    fn ec0_model() -> SdeModel {
        SdeModel::pure_diffusion(
            coeff_fn(|x| -0.25 * x * x * x, |x| -0.75 * x * x),
            coeff_fn(|x| 0.57 * x, |_| 0.57),
            1.5,
        )
    }

    fn small_nojump_data(k: usize, n: usize) -> TrainData {
        let ps = simulate_paths(&ec0_model(), 5.0, n, k, 42, n / 5).unwrap();
        TrainData::from_pathset(&ps, JumpSpec::off(), 5)
    }

    fn small_jump_data() -> (TrainData, SdeModel) {
        let model = SdeModel::new(
            coeff_fn(|x| 0.17 * (x - x * x * x), |x| 0.17 * (1.0 - 3.0 * x * x)),
            coeff_fn(|x| 0.76 * (1.0 + x.cos()), |x| -0.76 * x.sin()),
            2.3,
            JumpSpec {
                lambda: 0.94,
                gamma: 0.8,
                law: JumpLaw::Uniform { b: 0.1 },
            },
        );
        let ps = simulate_paths(&model, 5.0, 50, 3, 7, 10).unwrap();
        (TrainData::from_pathset(&ps, model.jumps, 5), model)
    }

    #[test]
    fn wswr_full_draw_is_permutation() {
        let mut rng = stream(1, StreamTag::Misc, 0);
        let (mut picked, fb) =
            weighted_sample_without_replacement(&[0.2, 1.0, 0.4, 3.0], 4, &mut rng);
        assert!(!fb);
        picked.sort_unstable();
        assert_eq!(picked, vec![0, 1, 2, 3]);
    }

    #[test]
    fn wswr_single_positive_weight() {
        let mut rng = stream(2, StreamTag::Misc, 0);
        for _ in 0..50 {
            let (picked, _) =
                weighted_sample_without_replacement(&[0.0, 0.0, 5.0, 0.0], 1, &mut rng);
            assert_eq!(picked, vec![2]);
        }
    }

    #[test]
    fn wswr_zero_weight_never_selected() {
        let mut rng = stream(3, StreamTag::Misc, 0);
        for _ in 0..200 {
            let (picked, fb) =
                weighted_sample_without_replacement(&[1.0, 0.0, 2.0, 0.0, 0.5], 3, &mut rng);
            assert!(!fb);
            assert!(!picked.contains(&1) && !picked.contains(&3));
        }
    }

    #[test]
    fn wswr_matches_enumeration_oracle() {
        // sequential-scheme inclusion probabilities for R=5, k=2 by
        // exhaustive enumeration over ordered pairs
        let w = [0.1, 0.25, 0.15, 0.3, 0.2];
        let total: f64 = w.iter().sum();
        let mut incl = [0.0f64; 5];
        for a in 0..5 {
            for b in 0..5 {
                if a == b {
                    continue;
                }
                let p = w[a] / total * w[b] / (total - w[a]);
                incl[a] += p;
                incl[b] += p;
            }
        }
        let mut rng = stream(4, StreamTag::Misc, 0);
        let mut counts = HashMap::new();
        let n = 100_000;
        for _ in 0..n {
            let (picked, _) = weighted_sample_without_replacement(&w, 2, &mut rng);
            for i in picked {
                *counts.entry(i).or_insert(0usize) += 1;
            }
        }
        for i in 0..5 {
            let emp = counts[&i] as f64 / n as f64;
            assert!(
                (emp - incl[i]).abs() < 0.01,
                "index {i}: empirical {emp} vs exact {}",
                incl[i]
            );
        }
    }

    #[test]
    fn tracked_losses_match_straight_line_nojump() {
        let data = small_nojump_data(2, 60);
        let f_net = Mlp::drift_net(5);
        let g_net = Mlp::diffusion_net(6);
        let support = BlockSupport::default();
        for kind in [LossKind::D1, LossKind::L1, LossKind::L2, LossKind::L3L4, LossKind::D2] {
            let tracked =
                loss_grad(kind, &f_net, &g_net, &data, 1, 0, &support, FourierConfig::training());
            let plain =
                loss_value(kind, &f_net, &g_net, &data, 1, 0, &support, FourierConfig::training());
            assert!(
                (tracked.value - plain).abs() <= 1e-10 * (1.0 + plain.abs()),
                "{kind:?}: tracked {} vs plain {plain}",
                tracked.value
            );
        }
    }

    #[test]
    fn tracked_losses_match_straight_line_jump() {
        let (data, _) = small_jump_data();
        let f_net = Mlp::drift_net(5);
        let g_net = Mlp::diffusion_net(6);
        let mut rng = stream(9, StreamTag::Misc, 0);
        let support = BlockSupport {
            var_configs: (0..40)
                .map(|_| sample_jump_config(&mut rng, 0.0, data.dt, &data.jumps))
                .collect(),
            cf_configs: (0..30)
                .map(|_| sample_jump_config(&mut rng, 0.0, data.dt, &data.jumps))
                .collect(),
        };
        for kind in [LossKind::L2, LossKind::L3L4, LossKind::D2] {
            let tracked =
                loss_grad(kind, &f_net, &g_net, &data, 2, 1, &support, FourierConfig::training());
            let plain =
                loss_value(kind, &f_net, &g_net, &data, 2, 1, &support, FourierConfig::training());
            assert!(
                (tracked.value - plain).abs() <= 1e-9 * (1.0 + plain.abs()),
                "{kind:?}: tracked {} vs plain {plain}",
                tracked.value
            );
        }
    }

    fn fd_check(kind: LossKind, data: &TrainData, support: &BlockSupport, on_f: bool) {
        let f_net = Mlp::drift_net(15);
        let g_net = Mlp::diffusion_net(16);
        let fourier = FourierConfig::training();
        let lg = loss_grad(kind, &f_net, &g_net, data, 0, 0, support, fourier);
        let mut rng = stream(20, StreamTag::Misc, 0);
        let n_params = if on_f { f_net.n_params() } else { g_net.n_params() };
        for _ in 0..20 {
            let i = rng.random_range(0..n_params);
            let h = 1e-5;
            let eval = |delta: f64| {
                let mut fp = f_net.clone();
                let mut gp = g_net.clone();
                if on_f {
                    fp.params[i] += delta;
                } else {
                    gp.params[i] += delta;
                }
                loss_value(kind, &fp, &gp, data, 0, 0, support, fourier)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let ad = if on_f { lg.grad_f[i] } else { lg.grad_g[i] };
            assert!(
                (ad - fd).abs() <= 1e-3 * (1.0 + fd.abs()),
                "{kind:?} param {i}: ad {ad} vs fd {fd}"
            );
        }
    }

    #[test]
    fn gradients_match_fd_d1() {
        let data = small_nojump_data(1, 40);
        fd_check(LossKind::D1, &data, &BlockSupport::default(), true);
    }

    #[test]
    fn gradients_match_fd_l2() {
        let data = small_nojump_data(1, 40);
        fd_check(LossKind::L2, &data, &BlockSupport::default(), false);
    }

    #[test]
    fn gradients_match_fd_d2_nojump() {
        let data = small_nojump_data(1, 40);
        fd_check(LossKind::D2, &data, &BlockSupport::default(), true);
        fd_check(LossKind::D2, &data, &BlockSupport::default(), false);
    }

    #[test]
    fn gradients_match_fd_d2_jump() {
        let (data, _) = small_jump_data();
        let mut rng = stream(21, StreamTag::Misc, 0);
        let support = BlockSupport {
            var_configs: Vec::new(),
            cf_configs: (0..25)
                .map(|_| sample_jump_config(&mut rng, 0.0, data.dt, &data.jumps))
                .collect(),
        };
        fd_check(LossKind::D2, &data, &support, true);
        fd_check(LossKind::D2, &data, &support, false);
    }

    #[test]
    fn gradients_match_fd_l2_jump() {
        let (data, _) = small_jump_data();
        let mut rng = stream(22, StreamTag::Misc, 0);
        let support = BlockSupport {
            var_configs: (0..25)
                .map(|_| sample_jump_config(&mut rng, 0.0, data.dt, &data.jumps))
                .collect(),
            cf_configs: Vec::new(),
        };
        fd_check(LossKind::L2, &data, &support, false);
    }

    #[test]
    fn h_statistic_near_one_for_true_model() {
        // perfect networks = true coefficients; emulate with nets replaced
        // by direct formula through a fitted surrogate is overkill here, so
        // instead check the scaling property on standardized synthetic data
        let data = small_nojump_data(10, 200);
        // H computed with the *true* coefficients plugged in as "nets":
        // build tiny linear nets reproducing f(x) = -0.25x^3 exactly is not
        // possible; instead verify H's scaling law directly on g-halving
        // with a surrogate pair trained cheaply is noisy. Use the residual
        // definition directly:
        let model = ec0_model();
        let dt = data.dt;
        let mut h_vals = Vec::new();
        for j in 0..data.n_blocks {
            let xs = &data.paths[3];
            let mut s = 0.0;
            let mut n = 0;
            for i in data.block_transitions(j) {
                let mean = crate::moments::cond_mean(xs[i], &model, dt);
                let var = crate::moments::cond_var_nojump(xs[i], &model, dt);
                let y = (xs[i + 1] - mean) / var.sqrt();
                s += y * y;
                n += 1;
            }
            h_vals.push(s / n as f64);
        }
        let mean_h = h_vals.iter().sum::<f64>() / h_vals.len() as f64;
        assert!(
            (mean_h - 1.0).abs() < 0.35,
            "mean H across blocks = {mean_h}"
        );
    }

    #[test]
    fn h_scales_as_four_when_g_halved() {
        let data = small_nojump_data(10, 200);
        let model = ec0_model();
        let dt = data.dt;
        let mut ratio_num = 0.0;
        let mut ratio_den = 0.0;
        for j in 0..data.n_blocks {
            let xs = &data.paths[2];
            for i in data.block_transitions(j) {
                let mean = crate::moments::cond_mean(xs[i], &model, dt);
                let var = crate::moments::cond_var_nojump(xs[i], &model, dt);
                let y2 = (xs[i + 1] - mean).powi(2);
                ratio_num += y2 / (var / 4.0); // ĝ = g/2 → variance/4
                ratio_den += y2 / var;
            }
        }
        assert!((ratio_num / ratio_den - 4.0).abs() < 1e-9);
    }

    #[test]
    fn tiny_training_run_is_deterministic() {
        let data = small_nojump_data(2, 50);
        let cfg = TrainConfig {
            epoch0: 2,
            epoch1: 2,
            epoch2: 2,
            r1: 3,
            r2: 1,
            r3: 2,
            r4: 2,
            ..TrainConfig::nojump_default(77)
        };
        let run = || {
            let (f, g, rep) = train_full(
                &data,
                &cfg,
                Some(Truth {
                    drift: &|x| -0.25 * x * x * x,
                    diffusion: &|x| 0.57 * x,
                }),
            );
            (f.params, g.params, rep.trace_phase1, rep.mse_f, rep.mse_g)
        };
        let a = run();
        let b = run();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        assert_eq!(a.3, b.3);
        assert_eq!(a.4, b.4);
    }

    #[test]
    fn trace_lengths_match_schedule() {
        let data = small_nojump_data(2, 50);
        let cfg = TrainConfig {
            epoch0: 3,
            epoch1: 4,
            epoch2: 2,
            r1: 3,
            r2: 1,
            r3: 2,
            r4: 2,
            train_f: 2,
            ..TrainConfig::nojump_default(78)
        };
        let (_, _, rep) = train_full(&data, &cfg, None);
        assert_eq!(rep.trace_phase1.len(), 3 * data.n_blocks * data.n_paths());
        assert_eq!(rep.trace_phase2_f.len(), 4 * 3);
        assert_eq!(rep.trace_phase2_g.len(), 4);
        assert_eq!(rep.trace_phase3_f.len(), 2 * 2 * 2);
        assert_eq!(rep.trace_phase3_g.len(), 2 * 2);
    }

    #[test]
    fn d2_decreases_during_phase1_smoke() {
        let data = small_nojump_data(2, 60);
        let cfg = TrainConfig {
            epoch0: 15,
            epoch1: 0,
            epoch2: 0,
            ..TrainConfig::nojump_default(79)
        };
        let (_, _, rep) = train_full(&data, &cfg, None);
        let steps_per_epoch = data.n_blocks * data.n_paths();
        let first: f64 =
            rep.trace_phase1[..steps_per_epoch].iter().sum::<f64>() / steps_per_epoch as f64;
        let last: f64 = rep.trace_phase1[rep.trace_phase1.len() - steps_per_epoch..]
            .iter()
            .sum::<f64>()
            / steps_per_epoch as f64;
        assert!(last < first, "mean D2 per epoch: first {first}, last {last}");
    }
}

