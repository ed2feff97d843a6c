//! Command-line front end: each numerical capability is a subcommand, and
//! `reproduce` bundles the paper-scale experiment settings into named
//! recipes. All file outputs are written atomically (temp file + rename)
//! and floats are emitted in shortest-round-trip form, so identical seeds
//! give byte-identical artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::charfun::cf_jump_given;
use crate::density::{CfGrid, FourierConfig};
use crate::expr::ExprCoefficient;
use crate::mcmc::{
    mh_discriminator, mh_likelihood, minimize_h, FrozenJumpPool, MhChain, MhConfig,
};
use crate::moments::cond_var_jump_mc;
use crate::net::Checkpoint;
use crate::par::configure_threads;
use crate::rngutil::{stream, StreamTag};
use crate::simulate::{
    convergence_slope, sample_jump_config, simulate_paths, simulate_transitions,
    JumpLaw, JumpSpec, PathSet, SdeModel,
};
use crate::trainer::{TrainConfig, TrainData, TrainReport, Truth};
use crate::{Coefficient, CoeffRef};

/// Numerical laboratory for scalar jump-diffusion SDEs.
#[derive(Parser)]
#[command(name = "jumpsde", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate tamed-Milstein paths and write them as CSV.
    Simulate(SimulateArgs),
    /// Print the one-step conditional mean and variance as JSON.
    Moments(MomentsArgs),
    /// Evaluate the one-step characteristic function on a real u-grid.
    Cf(CfArgs),
    /// Fourier-invert the transition density on a state grid.
    Density(DensityArgs),
    /// Run the three-phase drift/diffusion estimation on a path corpus.
    Train(TrainArgs),
    /// Sample jump parameters (lambda, gamma) with Metropolis-Hastings.
    Mh(MhArgs),
    /// Estimate the empirical strong convergence order of the scheme.
    Convergence(ConvergenceArgs),
    /// Run a named paper-scale experiment end to end.
    Reproduce(ReproduceArgs),
}

/// Drift/diffusion expressions and the jump specification.
#[derive(Args, Clone)]
struct ModelArgs {
    /// Drift expression f(x), e.g. "-0.25*x^3"
    #[arg(long, allow_hyphen_values = true)]
    drift: String,
    /// Diffusion expression g(x), e.g. "0.57*x"
    #[arg(long, allow_hyphen_values = true)]
    diffusion: String,
    /// Initial state
    #[arg(long, default_value_t = 1.5)]
    x0: f64,
    /// Jump intensity
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// Jump scale
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    /// Jump size law: uniform:b | normal:sigma | laplace:b
    #[arg(long, default_value = "uniform:1")]
    jump_law: String,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Final time of the simulation interval [0, T]
    #[arg(long = "T")]
    t_final: f64,
    /// Number of grid points (so N-1 steps)
    #[arg(long = "N")]
    n_points: usize,
    /// Number of independent paths
    #[arg(long = "K", default_value_t = 1)]
    k: usize,
    #[arg(long)]
    seed: u64,
    /// Contiguous block length used to partition each path
    #[arg(long, default_value_t = 100)]
    block_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MomentsArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Conditioning state X_t = x
    #[arg(long)]
    x: f64,
    #[arg(long)]
    dt: f64,
    /// Monte-Carlo jump configurations for the jump-case variance
    #[arg(long, default_value_t = 400)]
    n_mc: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CfArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    x: f64,
    #[arg(long)]
    dt: f64,
    /// Evaluate on u in [-umax, umax]
    #[arg(long)]
    umax: f64,
    #[arg(long, default_value_t = 201)]
    n_points: usize,
    #[arg(long, default_value_t = 200)]
    n_mc: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DensityArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Conditioning state X_t = x
    #[arg(long)]
    x0_state: f64,
    #[arg(long)]
    dt: f64,
    /// Fourier truncation M
    #[arg(long = "M", default_value_t = 2000)]
    m: usize,
    /// Fourier grid spacing
    #[arg(long, default_value_t = 0.05)]
    h: f64,
    /// Imaginary shift of the inversion grid
    #[arg(long, default_value_t = 0.0)]
    a: f64,
    #[arg(long, default_value_t = 200)]
    n_mc: usize,
    /// Evaluation grid lo:hi:n (points are the n bin centers)
    #[arg(long, allow_hyphen_values = true)]
    grid: String,
    /// Also simulate this many one-step draws and emit their histogram
    #[arg(long, default_value_t = 0)]
    hist_sim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Path corpus CSV with header path,t,x
    #[arg(long)]
    paths: PathBuf,
    /// Training configuration JSON
    #[arg(long)]
    config: PathBuf,
    /// True drift expression; enables MSE reporting
    #[arg(long, allow_hyphen_values = true)]
    truth_drift: Option<String>,
    /// True diffusion expression; enables MSE reporting
    #[arg(long, allow_hyphen_values = true)]
    truth_diffusion: Option<String>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum MhAlgorithm {
    Likelihood,
    Discriminator,
}

#[derive(Args)]
struct MhArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum)]
    algorithm: MhAlgorithm,
    /// Observations CSV: one column of x_{t+dt} values
    #[arg(long)]
    obs: PathBuf,
    /// Known conditioning state X_t = x
    #[arg(long)]
    x: f64,
    #[arg(long)]
    dt: f64,
    /// Chain length (default 1000 for likelihood, 10000 for discriminator)
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    sigma1: f64,
    #[arg(long, default_value_t = 0.01)]
    sigma2: f64,
    #[arg(long, default_value_t = 5.0)]
    theta: f64,
    /// Chain start for (lambda, gamma); defaults to the model values
    #[arg(long)]
    init_lambda: Option<f64>,
    #[arg(long)]
    init_gamma: Option<f64>,
    /// Monte-Carlo support size for the candidate scores
    #[arg(long)]
    n_mc: Option<usize>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ConvergenceArgs {
    /// Drift expression f(x)
    #[arg(long, allow_hyphen_values = true)]
    drift: String,
    /// Diffusion expression g(x)
    #[arg(long, allow_hyphen_values = true)]
    diffusion: String,
    #[arg(long, default_value_t = 1.5)]
    x0: f64,
    #[arg(long = "T", default_value_t = 1.0)]
    t_final: f64,
    /// Comma-separated step counts, coarsest first (each a power of two)
    #[arg(long, default_value = "64,128,256,512")]
    levels: String,
    #[arg(long, default_value_t = 2000)]
    k_mc: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReproduceArgs {
    /// Recipe name, e.g. fig1, table1-row3, appC-alg1, convergence
    recipe: String,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Failure category mapped to the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config, or input files (exit 1).
    Validation(String),
    /// The computation itself failed: divergence, CF branch trouble,
    /// broken Hermitian symmetry (exit 2).
    Numerical(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(msg) => write!(f, "invalid input: {msg}"),
            CliError::Numerical(msg) => write!(f, "numerical failure: {msg}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<crate::expr::ParseError> for CliError {
    fn from(e: crate::expr::ParseError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<crate::simulate::SimError> for CliError {
    fn from(e: crate::simulate::SimError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<crate::charfun::CfError> for CliError {
    fn from(e: crate::charfun::CfError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<crate::density::DensityError> for CliError {
    fn from(e: crate::density::DensityError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

/// Entry point: parses argv and the JUMPSDE_THREADS cap, returns the
/// process exit code.
pub fn run() -> i32 {
    if let Ok(threads) = std::env::var("JUMPSDE_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => configure_threads(n),
            _ => {
                eprintln!("invalid input: JUMPSDE_THREADS must be a positive integer");
                return 1;
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successful exits
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e @ CliError::Validation(_)) => {
            eprintln!("{e}");
            1
        }
        Err(e @ CliError::Numerical(_)) => {
            eprintln!("{e}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Simulate(a) => cmd_simulate(&a),
        Cmd::Moments(a) => cmd_moments(&a),
        Cmd::Cf(a) => cmd_cf(&a),
        Cmd::Density(a) => cmd_density(&a),
        Cmd::Train(a) => cmd_train(&a),
        Cmd::Mh(a) => cmd_mh(&a),
        Cmd::Convergence(a) => cmd_convergence(&a),
        Cmd::Reproduce(a) => cmd_reproduce(&a),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn parse_jump_law(s: &str) -> Result<JumpLaw, CliError> {
    let err = || {
        CliError::Validation(format!(
            "jump law `{s}` not recognized; expected uniform:b, normal:sigma, or laplace:b"
        ))
    };
    let (kind, param) = s.split_once(':').ok_or_else(err)?;
    let p: f64 = param.parse().map_err(|_| err())?;
    if p <= 0.0 {
        return Err(CliError::Validation(format!(
            "jump law parameter must be positive, got {p}"
        )));
    }
    match kind {
        "uniform" => Ok(JumpLaw::Uniform { b: p }),
        "normal" => Ok(JumpLaw::Normal { sigma: p }),
        "laplace" => Ok(JumpLaw::Laplace { b: p }),
        _ => Err(err()),
    }
}

impl ModelArgs {
    fn build(&self) -> Result<SdeModel, CliError> {
        let drift: CoeffRef = ExprCoefficient::shared(&self.drift)?;
        let diffusion: CoeffRef = ExprCoefficient::shared(&self.diffusion)?;
        if self.lambda < 0.0 || self.gamma < 0.0 {
            return Err(CliError::Validation(
                "lambda and gamma must be nonnegative".into(),
            ));
        }
        let jumps = JumpSpec {
            lambda: self.lambda,
            gamma: self.gamma,
            law: parse_jump_law(&self.jump_law)?,
        };
        Ok(SdeModel::new(drift, diffusion, self.x0, jumps))
    }
}

/// "lo:hi:n" evaluation grid of n bin centers over [lo, hi].
fn parse_grid(s: &str) -> Result<(f64, f64, usize), CliError> {
    let err = || CliError::Validation(format!("grid `{s}` not of the form lo:hi:n"));
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(err());
    }
    let lo: f64 = parts[0].parse().map_err(|_| err())?;
    let hi: f64 = parts[1].parse().map_err(|_| err())?;
    let n: usize = parts[2].parse().map_err(|_| err())?;
    if !(hi > lo) || n < 2 {
        return Err(CliError::Validation(format!(
            "grid `{s}` needs hi > lo and n >= 2"
        )));
    }
    Ok((lo, hi, n))
}

fn bin_centers(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let w = (hi - lo) / n as f64;
    (0..n).map(|i| lo + (i as f64 + 0.5) * w).collect()
}

/// Write to a sibling temp file, then rename into place, so failed runs
/// never leave partial output.
fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Validation(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp-{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, &text)
}

fn paths_to_csv(ps: &PathSet) -> String {
    let mut out = String::from("path,t,x\n");
    for (k, path) in ps.paths.iter().enumerate() {
        for (t, x) in ps.times.iter().zip(path) {
            let _ = writeln!(out, "{k},{t},{x}");
        }
    }
    out
}

/// Parse a path-corpus CSV with header `path,t,x` back into a PathSet.
fn paths_from_csv(text: &str) -> Result<(Vec<Vec<f64>>, Vec<f64>), CliError> {
    let mut paths: Vec<Vec<f64>> = Vec::new();
    let mut times: Vec<f64> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line.trim() != "path,t,x" {
                return Err(CliError::Validation(format!(
                    "expected header path,t,x, found `{line}`"
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let bad = || CliError::Validation(format!("bad corpus row {}: `{line}`", lineno + 1));
        let mut cells = line.split(',');
        let k: usize = cells.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
        let t: f64 = cells.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
        let x: f64 = cells.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
        if k == paths.len() {
            paths.push(Vec::new());
        } else if k > paths.len() {
            return Err(CliError::Validation(format!(
                "path indices must be contiguous; jumped to {k}"
            )));
        }
        if k == 0 {
            times.push(t);
        }
        paths[k].push(x);
    }
    if paths.is_empty() || times.len() < 2 {
        return Err(CliError::Validation("corpus has no usable rows".into()));
    }
    if paths.iter().any(|p| p.len() != times.len()) {
        return Err(CliError::Validation(
            "all paths must share the same time grid".into(),
        ));
    }
    Ok((paths, times))
}

/// One-column observation CSV, optional header line.
fn column_from_csv(text: &str) -> Result<Vec<f64>, CliError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let cell = line.trim();
        if cell.is_empty() {
            continue;
        }
        match cell.parse::<f64>() {
            Ok(v) => out.push(v),
            Err(_) if lineno == 0 => continue, // header
            Err(_) => {
                return Err(CliError::Validation(format!(
                    "bad observation on line {}: `{cell}`",
                    lineno + 1
                )))
            }
        }
    }
    if out.is_empty() {
        return Err(CliError::Validation("no observations found".into()));
    }
    Ok(out)
}

fn chain_to_csv(chain: &MhChain) -> String {
    let mut out = String::from("iter,lambda,gamma,accepted\n");
    for (i, ((l, g), acc)) in chain.samples.iter().zip(&chain.accepted).enumerate() {
        let _ = writeln!(out, "{i},{l},{g},{}", u8::from(*acc));
    }
    out
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let model = a.model.build()?;
    if a.n_points < 2 || a.block_size == 0 || a.n_points % a.block_size != 0 {
        return Err(CliError::Validation(format!(
            "need n_points >= 2 divisible by block_size, got N={} block={}",
            a.n_points, a.block_size
        )));
    }
    let ps = simulate_paths(&model, a.t_final, a.n_points, a.k, a.seed, a.block_size)?;
    write_atomic(&a.out, &paths_to_csv(&ps))
}

fn cmd_moments(a: &MomentsArgs) -> Result<(), CliError> {
    let model = a.model.build()?;
    let mut rng = stream(a.seed, StreamTag::MomentMc, 0);
    let est = cond_var_jump_mc(a.x, &model, a.dt, a.n_mc, &mut rng);
    println!("{}", serde_json::to_string_pretty(&est)?);
    Ok(())
}

fn cmd_cf(a: &CfArgs) -> Result<(), CliError> {
    let model = a.model.build()?;
    if a.n_points < 2 || a.umax <= 0.0 {
        return Err(CliError::Validation(
            "cf needs umax > 0 and n_points >= 2".into(),
        ));
    }
    let mut rng = stream(a.seed, StreamTag::CfMc, 0);
    let configs: Vec<_> = if model.jumps.active() {
        (0..a.n_mc)
            .map(|_| sample_jump_config(&mut rng, 0.0, a.dt, &model.jumps))
            .collect()
    } else {
        Vec::new()
    };
    let mut out = String::from("u_re,u_im,phi_re,phi_im\n");
    let step = 2.0 * a.umax / (a.n_points - 1) as f64;
    for i in 0..a.n_points {
        let ur = -a.umax + i as f64 * step;
        let u = num_complex::Complex64::new(ur, 0.0);
        let phi = if model.jumps.active() {
            cf_jump_given(u, a.x, &model, 0.0, a.dt, &configs)
        } else {
            crate::charfun::cf_nojump(u, a.x, &model, a.dt)?
        };
        let _ = writeln!(out, "{ur},0,{},{}", phi.re, phi.im);
    }
    write_atomic(&a.out, &out)
}

fn density_grid(
    model: &SdeModel,
    x: f64,
    dt: f64,
    cfg: FourierConfig,
    n_mc: usize,
    seed: u64,
) -> Result<CfGrid, CliError> {
    if model.jumps.active() {
        let mut rng = stream(seed, StreamTag::CfMc, 0);
        let configs: Vec<_> = (0..n_mc)
            .map(|_| sample_jump_config(&mut rng, 0.0, dt, &model.jumps))
            .collect();
        Ok(CfGrid::jump(cfg, x, model, dt, &configs))
    } else {
        Ok(CfGrid::nojump(cfg, x, model, dt)?)
    }
}

fn cmd_density(a: &DensityArgs) -> Result<(), CliError> {
    let model = a.model.build()?;
    let (lo, hi, n) = parse_grid(&a.grid)?;
    let cfg = FourierConfig {
        m: a.m,
        h: a.h,
        a: a.a,
        floor: 1e-12,
    };
    let grid = density_grid(&model, a.x0_state, a.dt, cfg, a.n_mc, a.seed)?;
    let centers = bin_centers(lo, hi, n);
    let width = (hi - lo) / n as f64;
    let hist = if a.hist_sim > 0 {
        let draws = simulate_transitions(a.x0_state, &model, 0.0, a.dt, a.hist_sim, a.seed);
        let mut counts = vec![0usize; n];
        for d in draws {
            if d >= lo && d < hi {
                counts[((d - lo) / width) as usize] += 1;
            }
        }
        Some(
            counts
                .iter()
                .map(|&c| c as f64 / (a.hist_sim as f64 * width))
                .collect::<Vec<f64>>(),
        )
    } else {
        None
    };
    let mut out = String::from(if hist.is_some() {
        "x,density,hist\n"
    } else {
        "x,density\n"
    });
    for (i, &c) in centers.iter().enumerate() {
        let d = grid.density_at(c)?;
        match &hist {
            Some(h) => {
                let _ = writeln!(out, "{c},{d},{}", h[i]);
            }
            None => {
                let _ = writeln!(out, "{c},{d}");
            }
        }
    }
    write_atomic(&a.out, &out)
}

/// Schema of the --config file for `train`; unknown keys are rejected.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFileConfig {
    seed: u64,
    n_blocks: usize,
    #[serde(default)]
    lambda: f64,
    #[serde(default)]
    gamma: f64,
    #[serde(default = "default_jump_law")]
    jump_law: String,
    #[serde(default)]
    epoch0: Option<usize>,
    #[serde(default)]
    epoch1: Option<usize>,
    #[serde(default)]
    epoch2: Option<usize>,
    #[serde(default)]
    train_f: Option<usize>,
    #[serde(default)]
    r1: Option<usize>,
    #[serde(default)]
    r2: Option<usize>,
    #[serde(default)]
    r3: Option<usize>,
    #[serde(default)]
    r4: Option<usize>,
    #[serde(default)]
    lr: Option<f64>,
    #[serde(default)]
    n_mc_var: Option<usize>,
    #[serde(default)]
    n_mc_cf: Option<usize>,
    #[serde(default)]
    eval_grid: Option<usize>,
}

fn default_jump_law() -> String {
    "uniform:1".into()
}

impl TrainFileConfig {
    fn to_train_config(&self, jumps: &JumpSpec) -> TrainConfig {
        let mut cfg = if jumps.active() {
            TrainConfig::jump_default(self.seed)
        } else {
            TrainConfig::nojump_default(self.seed)
        };
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        take!(epoch0, epoch1, epoch2, train_f, r1, r2, r3, r4, lr, n_mc_var, n_mc_cf, eval_grid);
        cfg
    }
}

fn loss_trace_csv(report: &TrainReport) -> String {
    let mut out = String::from("phase,net,step,loss\n");
    let sections: [(&str, &str, &[f64]); 5] = [
        ("1", "joint", &report.trace_phase1),
        ("2", "f", &report.trace_phase2_f),
        ("2", "g", &report.trace_phase2_g),
        ("3", "f", &report.trace_phase3_f),
        ("3", "g", &report.trace_phase3_g),
    ];
    for (phase, net, trace) in sections {
        for (i, v) in trace.iter().enumerate() {
            let _ = writeln!(out, "{phase},{net},{i},{v}");
        }
    }
    out
}

fn run_training(
    data: &TrainData,
    cfg: &TrainConfig,
    truth_drift: Option<&str>,
    truth_diffusion: Option<&str>,
    out_dir: &Path,
) -> Result<(), CliError> {
    let truth_f = truth_drift.map(ExprCoefficient::new).transpose()?;
    let truth_g = truth_diffusion.map(ExprCoefficient::new).transpose()?;
    let (f_fn, g_fn);
    let truth = match (&truth_f, &truth_g) {
        (Some(tf), Some(tg)) => {
            f_fn = move |x: f64| tf.value(x);
            g_fn = move |x: f64| tg.value(x);
            Some(Truth {
                drift: &f_fn,
                diffusion: &g_fn,
            })
        }
        (None, None) => None,
        _ => {
            return Err(CliError::Validation(
                "provide both truth expressions or neither".into(),
            ))
        }
    };
    let (f_net, g_net, mut report) = crate::trainer::train_full(data, cfg, truth);
    let meta = serde_json::json!({
        "config": cfg,
        "mse_f": report.mse_f,
        "mse_g": report.mse_g,
    });
    json_atomic(
        &out_dir.join("f_net.json"),
        &Checkpoint::from_net(&f_net, meta.clone()),
    )?;
    json_atomic(&out_dir.join("g_net.json"), &Checkpoint::from_net(&g_net, meta))?;
    write_atomic(&out_dir.join("loss_trace.csv"), &loss_trace_csv(&report))?;
    // wall time lives in its own file so report.json stays reproducible
    json_atomic(
        &out_dir.join("timing.json"),
        &serde_json::json!({ "wall_secs": report.wall_secs }),
    )?;
    report.wall_secs = 0.0;
    json_atomic(&out_dir.join("report.json"), &report)
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let file: TrainFileConfig = serde_json::from_str(&fs::read_to_string(&a.config)?)?;
    let jumps = JumpSpec {
        lambda: file.lambda,
        gamma: file.gamma,
        law: parse_jump_law(&file.jump_law)?,
    };
    let (paths, times) = paths_from_csv(&fs::read_to_string(&a.paths)?)?;
    if times.len() % file.n_blocks != 0 {
        return Err(CliError::Validation(format!(
            "n_blocks {} must divide the {} grid points",
            file.n_blocks,
            times.len()
        )));
    }
    let dt = times[1] - times[0];
    let data = TrainData::new(paths, dt, file.n_blocks, jumps);
    let cfg = file.to_train_config(&jumps);
    run_training(
        &data,
        &cfg,
        a.truth_drift.as_deref(),
        a.truth_diffusion.as_deref(),
        &a.out_dir,
    )
}

fn run_mh(
    model: &SdeModel,
    algorithm: MhAlgorithm,
    obs: &[f64],
    x: f64,
    dt: f64,
    mh: &MhConfig,
    n_mc: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<(), CliError> {
    let chain = match algorithm {
        MhAlgorithm::Likelihood => mh_likelihood(
            obs,
            x,
            dt,
            model,
            mh,
            FourierConfig::training(),
            n_mc,
            seed,
        )?,
        MhAlgorithm::Discriminator => mh_discriminator(obs, x, dt, model, mh, n_mc, seed),
    };
    write_atomic(&out_dir.join("chain.csv"), &chain_to_csv(&chain))?;
    json_atomic(
        &out_dir.join("summary.json"),
        &serde_json::json!({
            "summary": chain.summary,
            "clamped": chain.clamped,
            "m": mh.m,
            "burn_in": mh.burn_in,
            "seed": seed,
        }),
    )
}

fn cmd_mh(a: &MhArgs) -> Result<(), CliError> {
    let model = a.model.build()?;
    if !model.jumps.active() {
        return Err(CliError::Validation(
            "mh needs an active jump component (lambda, gamma > 0)".into(),
        ));
    }
    let obs = column_from_csv(&fs::read_to_string(&a.obs)?)?;
    let init = (
        a.init_lambda.unwrap_or(model.jumps.lambda),
        a.init_gamma.unwrap_or(model.jumps.gamma),
    );
    if init.0 <= 0.0 || init.1 <= 0.0 {
        return Err(CliError::Validation("chain init must be positive".into()));
    }
    let mut mh = match a.algorithm {
        MhAlgorithm::Likelihood => MhConfig::likelihood_default(init),
        MhAlgorithm::Discriminator => MhConfig::discriminator_default(init),
    };
    if let Some(m) = a.m {
        mh.m = m;
        mh.burn_in = m / 5;
    }
    mh.sigma1 = a.sigma1;
    mh.sigma2 = a.sigma2;
    mh.theta = a.theta;
    let n_mc = a.n_mc.unwrap_or(match a.algorithm {
        MhAlgorithm::Likelihood => 200,
        MhAlgorithm::Discriminator => 4000,
    });
    run_mh(
        &model, a.algorithm, &obs, a.x, a.dt, &mh, n_mc, a.seed, &a.out_dir,
    )
}

fn cmd_convergence(a: &ConvergenceArgs) -> Result<(), CliError> {
    let drift: CoeffRef = ExprCoefficient::shared(&a.drift)?;
    let diffusion: CoeffRef = ExprCoefficient::shared(&a.diffusion)?;
    let model = SdeModel::pure_diffusion(drift, diffusion, a.x0);
    let levels: Vec<usize> = a
        .levels
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::Validation(format!("bad level `{s}`")))
        })
        .collect::<Result<_, _>>()?;
    if levels.len() < 2 || levels.windows(2).any(|w| w[1] != 2 * w[0]) {
        return Err(CliError::Validation(
            "levels must be at least two step counts, each doubling the last".into(),
        ));
    }
    let slope = convergence_slope(&model, a.t_final, &levels, a.k_mc, a.seed);
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "slope": slope,
            "levels": levels,
            "k_mc": a.k_mc,
        }))?
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Recipes
// ---------------------------------------------------------------------------

/// Named drift/diffusion/jump settings used by the experiment tables.
struct Recipe {
    drift: &'static str,
    diffusion: &'static str,
    lambda: f64,
    gamma: f64,
    law: &'static str,
}

/// Paper experiment rows; jumps off for the first table.
fn table_recipe(name: &str) -> Option<Recipe> {
    let none = |drift, diffusion| Recipe {
        drift,
        diffusion,
        lambda: 0.0,
        gamma: 0.0,
        law: "uniform:1",
    };
    Some(match name {
        "table1-row1" => none("-0.25*x^3", "0.57*x"),
        "table1-row2" => none("0.15*(x - x^5)", "0.32*sin(x)"),
        "table1-row3" => none("1 - x", "1"),
        "table1-row4" => none("sin(x)", "1"),
        "table2-row1" => Recipe {
            drift: "1 - x",
            diffusion: "0.31*x",
            lambda: 1.2,
            gamma: 0.8,
            law: "uniform:0.1",
        },
        // jump sizes N(0, 0.12): the second parameter is read as the
        // variance, so sigma = sqrt(0.12)
        "table2-row2" => Recipe {
            drift: "0.28*(x - x^3)",
            diffusion: "1",
            lambda: 1.7,
            gamma: 0.31,
            law: "normal:0.34641016151377546",
        },
        "table2-row3" => Recipe {
            drift: "cos(x)",
            diffusion: "1",
            lambda: 0.5,
            gamma: 1.47,
            law: "laplace:0.1",
        },
        _ => return None,
    })
}

fn recipe_model(r: &Recipe, x0: f64) -> Result<SdeModel, CliError> {
    ModelArgs {
        drift: r.drift.into(),
        diffusion: r.diffusion.into(),
        x0,
        lambda: r.lambda,
        gamma: r.gamma,
        jump_law: r.law.into(),
    }
    .build()
}

/// The Appendix C data-generating model: f = sin x, g = 0.35x + 0.2,
/// lambda = 1.7, gamma = 2.4, jumps U(-0.5, 0.5).
fn appc_model() -> Result<SdeModel, CliError> {
    ModelArgs {
        drift: "sin(x)".into(),
        diffusion: "0.35*x + 0.2".into(),
        x0: 1.5,
        lambda: 1.7,
        gamma: 2.4,
        jump_law: "uniform:0.5".into(),
    }
    .build()
}

fn appc_observations(seed: u64) -> Result<Vec<f64>, CliError> {
    Ok(simulate_transitions(1.5, &appc_model()?, 0.0, 0.5, 250, seed))
}

fn write_observations(path: &Path, obs: &[f64]) -> Result<(), CliError> {
    let mut text = String::from("x\n");
    for o in obs {
        let _ = writeln!(text, "{o}");
    }
    write_atomic(path, &text)
}

fn reproduce_training(r: &Recipe, seed: u64, out_dir: &Path) -> Result<(), CliError> {
    let model = recipe_model(r, 1.5)?;
    let ps = simulate_paths(&model, 5.0, 1000, 10, seed, 100)?;
    write_atomic(&out_dir.join("paths.csv"), &paths_to_csv(&ps))?;
    let data = TrainData::from_pathset(&ps, model.jumps, 10);
    let cfg = if model.jumps.active() {
        TrainConfig::jump_default(seed)
    } else {
        TrainConfig::nojump_default(seed)
    };
    run_training(&data, &cfg, Some(r.drift), Some(r.diffusion), out_dir)
}

fn reproduce_appb_density(
    recipe: &Recipe,
    seed: u64,
    grid: (f64, f64, usize),
    out_dir: &Path,
) -> Result<(), CliError> {
    cmd_density(&DensityArgs {
        model: ModelArgs {
            drift: recipe.drift.into(),
            diffusion: recipe.diffusion.into(),
            x0: 2.3,
            lambda: recipe.lambda,
            gamma: recipe.gamma,
            jump_law: recipe.law.into(),
        },
        x0_state: 2.3,
        dt: 0.5,
        m: 2000,
        h: 0.05,
        a: 0.0,
        n_mc: 200,
        grid: format!("{}:{}:{}", grid.0, grid.1, grid.2),
        hist_sim: 100_000,
        seed,
        out: out_dir.join("density.csv"),
    })
}

fn cmd_reproduce(a: &ReproduceArgs) -> Result<(), CliError> {
    let out = &a.out_dir;
    fs::create_dir_all(out)?;
    match a.recipe.as_str() {
        "fig1" => {
            let r = table_recipe("table1-row1").unwrap();
            let model = recipe_model(&r, 1.5)?;
            let ps = simulate_paths(&model, 5.0, 1000, 10, a.seed, 100)?;
            write_atomic(&out.join("paths.csv"), &paths_to_csv(&ps))
        }
        "fig5" => reproduce_appb_density(
            &Recipe {
                drift: "0.17*(x - x^3)",
                diffusion: "0.76*(1 + cos(x))",
                lambda: 0.94,
                gamma: 0.8,
                law: "uniform:0.1",
            },
            a.seed,
            (-2.0, 6.0, 160),
            out,
        ),
        "fig6" => reproduce_appb_density(
            &Recipe {
                drift: "1 - x",
                diffusion: "0.84*(1 + sin(x))",
                lambda: 0.81,
                gamma: 0.25,
                law: "normal:1",
            },
            a.seed,
            (-2.0, 6.0, 160),
            out,
        ),
        name if table_recipe(name).is_some() => {
            reproduce_training(&table_recipe(name).unwrap(), a.seed, out)
        }
        "appC-alg1" | "appC-alg2" => {
            let model = appc_model()?;
            let obs = appc_observations(a.seed)?;
            write_observations(&out.join("obs.csv"), &obs)?;
            if a.recipe == "appC-alg1" {
                let mh = MhConfig::likelihood_default((model.jumps.lambda, model.jumps.gamma));
                run_mh(
                    &model,
                    MhAlgorithm::Likelihood,
                    &obs,
                    1.5,
                    0.5,
                    &mh,
                    200,
                    a.seed,
                    out,
                )
            } else {
                let mh = MhConfig::discriminator_default((model.jumps.lambda, model.jumps.gamma));
                run_mh(
                    &model,
                    MhAlgorithm::Discriminator,
                    &obs,
                    1.5,
                    0.5,
                    &mh,
                    4000,
                    a.seed,
                    out,
                )?;
                // point estimate from the same frozen support
                let mut pool_rng = stream(a.seed, StreamTag::JumpPool, 1);
                let pool = FrozenJumpPool::new(model.jumps.law, 4000, &mut pool_rng);
                let (l, g) = minimize_h(
                    &obs,
                    1.5,
                    0.5,
                    &model,
                    (model.jumps.lambda, model.jumps.gamma),
                    &pool,
                );
                json_atomic(
                    &out.join("point_estimate.json"),
                    &serde_json::json!({ "lambda": l, "gamma": g }),
                )
            }
        }
        "convergence" => {
            let drift: CoeffRef = ExprCoefficient::shared("-x")?;
            let diffusion: CoeffRef = ExprCoefficient::shared("0.2 + 0.5*x")?;
            let model = SdeModel::pure_diffusion(drift, diffusion, 1.5);
            let levels = [64, 128, 256, 512];
            let slope = convergence_slope(&model, 1.0, &levels, 2000, a.seed);
            json_atomic(
                &out.join("report.json"),
                &serde_json::json!({
                    "slope": slope,
                    "levels": levels,
                    "k_mc": 2000,
                }),
            )
        }
        other => Err(CliError::Validation(format!(
            "unknown recipe `{other}`; known: fig1, fig5, fig6, table1-row1..4, \
             table2-row1..3, appC-alg1, appC-alg2, convergence"
        ))),
    }
}
