//! Fixed-architecture MLPs for the drift and diffusion estimators, plus a
//! plain Adam optimizer.
//!
//! The f-network is 1 -> 32x4 (ELU) -> linear; the g-network is
//! 1 -> 32x3 (ELU) -> softplus, so its output is strictly positive.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::rngutil::{stream, StreamTag};
use crate::Coefficient;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Linear,
    Softplus,
}

/// A dense scalar-in/scalar-out MLP with ELU hidden activations.
///
/// Parameters are stored flat, layer by layer: the row-major weight matrix
/// `[out][in]` followed by the biases of that layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub head: Head,
    pub params: Vec<f64>,
    pub seed: u64,
}

/// Central-difference step used for the tracked input derivative of g.
pub const INPUT_DERIV_DELTA: f64 = 1e-3;

impl Mlp {
    /// Drift architecture: four hidden layers of 32, linear head.
    pub fn drift_net(seed: u64) -> Self {
        Self::init(vec![1, 32, 32, 32, 32, 1], Head::Linear, seed, StreamTag::InitF)
    }

    /// Diffusion architecture: three hidden layers of 32, softplus head.
    pub fn diffusion_net(seed: u64) -> Self {
        Self::init(vec![1, 32, 32, 32, 1], Head::Softplus, seed, StreamTag::InitG)
    }

    /// Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn init(widths: Vec<usize>, head: Head, seed: u64, tag: StreamTag) -> Self {
        let mut rng = stream(seed, tag, 0);
        let mut params = Vec::with_capacity(Self::param_count(&widths));
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let limit = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_out * fan_in + fan_out {
                params.push(rng.random_range(-limit..limit));
            }
        }
        Mlp {
            widths,
            head,
            params,
            seed,
        }
    }

    pub fn param_count(widths: &[usize]) -> usize {
        widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Plain evaluation without a tape.
    pub fn forward_f64(&self, x: f64) -> f64 {
        let mut act = vec![x];
        let mut offset = 0;
        let last = self.widths.len() - 2;
        for l in 0..self.widths.len() - 1 {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let mut next = Vec::with_capacity(n_out);
            for j in 0..n_out {
                let row = &self.params[offset + j * n_in..offset + (j + 1) * n_in];
                let b = self.params[offset + n_out * n_in + j];
                let mut s = b;
                for (w, a) in row.iter().zip(&act) {
                    s += w * a;
                }
                next.push(if l < last {
                    if s > 0.0 {
                        s
                    } else {
                        s.exp() - 1.0
                    }
                } else {
                    match self.head {
                        Head::Linear => s,
                        Head::Softplus => {
                            if s > 0.0 {
                                s + (-s).exp().ln_1p()
                            } else {
                                s.exp().ln_1p()
                            }
                        }
                    }
                });
            }
            act = next;
            offset += n_out * n_in + n_out;
        }
        act[0]
    }

    /// Tape-tracked forward pass. `pvars` must be `tape.vars(&self.params)`
    /// (or a shared copy); gradients then flow to every weight.
    pub fn forward_tape<'t>(&self, tape: &'t Tape, pvars: &[Var<'t>], x: Var<'t>) -> Var<'t> {
        let mut act = vec![x];
        let mut offset = 0;
        let last = self.widths.len() - 2;
        for l in 0..self.widths.len() - 1 {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let mut next = Vec::with_capacity(n_out);
            for j in 0..n_out {
                let ws = &pvars[offset + j * n_in..offset + (j + 1) * n_in];
                let b = pvars[offset + n_out * n_in + j];
                let s = tape.affine(ws, &act, b);
                next.push(if l < last {
                    s.elu()
                } else {
                    match self.head {
                        Head::Linear => s,
                        Head::Softplus => s.softplus(),
                    }
                });
            }
            act = next;
            offset += n_out * n_in + n_out;
        }
        act[0]
    }

    /// Forward value together with d(out)/d(param) for every parameter,
    /// via one hand-rolled backprop. The value is computed in the exact
    /// same operation order as `forward_f64`, so both are bit-identical.
    pub fn forward_backward(&self, x: f64) -> (f64, Vec<f64>) {
        let nl = self.widths.len() - 1;
        let last = nl - 1;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(nl + 1);
        acts.push(vec![x]);
        // derivative of each unit's activation at its pre-activation
        let mut dacts: Vec<Vec<f64>> = Vec::with_capacity(nl);
        let mut offset = 0;
        for l in 0..nl {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let mut a = Vec::with_capacity(n_out);
            let mut da = Vec::with_capacity(n_out);
            let prev = &acts[l];
            for j in 0..n_out {
                let row = &self.params[offset + j * n_in..offset + (j + 1) * n_in];
                let mut s = self.params[offset + n_out * n_in + j];
                for (w, av) in row.iter().zip(prev) {
                    s += w * av;
                }
                let (v, d) = if l < last {
                    if s > 0.0 {
                        (s, 1.0)
                    } else {
                        let e = s.exp();
                        (e - 1.0, e)
                    }
                } else {
                    match self.head {
                        Head::Linear => (s, 1.0),
                        Head::Softplus => {
                            if s > 0.0 {
                                (s + (-s).exp().ln_1p(), 1.0 / (1.0 + (-s).exp()))
                            } else {
                                let e = s.exp();
                                (e.ln_1p(), e / (1.0 + e))
                            }
                        }
                    }
                };
                a.push(v);
                da.push(d);
            }
            acts.push(a);
            dacts.push(da);
            offset += n_out * n_in + n_out;
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut dn = vec![1.0];
        for l in (0..nl).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            offset -= n_out * n_in + n_out;
            let mut dprev = vec![0.0; n_in];
            let prev = &acts[l];
            for j in 0..n_out {
                let ds = dn[j] * dacts[l][j];
                let wrow = &self.params[offset + j * n_in..offset + (j + 1) * n_in];
                let grow = &mut grads[offset + j * n_in..offset + (j + 1) * n_in];
                for i in 0..n_in {
                    grow[i] = ds * prev[i];
                    dprev[i] += ds * wrow[i];
                }
                grads[offset + n_out * n_in + j] = ds;
            }
            dn = dprev;
        }
        (acts[nl][0], grads)
    }

    /// Whole forward pass as a single fused tape node: value from the plain
    /// f64 forward, partials from `forward_backward`. The input is a data
    /// constant (no gradient flows to it), which is how every loss uses the
    /// networks. Two orders of magnitude cheaper than `forward_tape`.
    pub fn forward_fused<'t>(&self, tape: &'t Tape, pvars: &[Var<'t>], x: f64) -> Var<'t> {
        debug_assert_eq!(pvars.len(), self.params.len());
        let (value, grads) = self.forward_backward(x);
        tape.node(value, pvars, &grads)
    }

    /// Value and tracked central-difference input derivative
    /// (net(x+delta) - net(x-delta)) / (2 delta); weight gradients flow
    /// through both evaluations.
    pub fn forward_with_input_deriv<'t>(
        &self,
        tape: &'t Tape,
        pvars: &[Var<'t>],
        x: f64,
        delta: f64,
    ) -> (Var<'t>, Var<'t>) {
        let value = self.forward_fused(tape, pvars, x);
        let hi = self.forward_fused(tape, pvars, x + delta);
        let lo = self.forward_fused(tape, pvars, x - delta);
        let deriv = (hi - lo) / (2.0 * delta);
        (value, deriv)
    }

    /// Central-difference input derivative without a tape.
    pub fn slope_f64(&self, x: f64, delta: f64) -> f64 {
        (self.forward_f64(x + delta) - self.forward_f64(x - delta)) / (2.0 * delta)
    }
}

/// A trained network exposed as a model coefficient; the derivative uses
/// the same central-difference rule the losses were trained with.
pub struct NetCoefficient {
    pub net: Mlp,
    pub delta: f64,
}

impl NetCoefficient {
    pub fn new(net: Mlp) -> Self {
        NetCoefficient {
            net,
            delta: INPUT_DERIV_DELTA,
        }
    }
}

impl Coefficient for NetCoefficient {
    fn value(&self, x: f64) -> f64 {
        self.net.forward_f64(x)
    }
    fn slope(&self, x: f64) -> f64 {
        self.net.slope_f64(x, self.delta)
    }
}

/// Adam with bias correction; deterministic given the gradient sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// On-disk network checkpoint; weights/biases are split out per layer
/// concatenation order so the file is readable outside this crate.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub widths: Vec<usize>,
    pub head: Head,
    /// All layer weight matrices, row-major, concatenated.
    pub weights: Vec<f64>,
    /// All layer biases, concatenated.
    pub biases: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub train_meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_net(net: &Mlp, train_meta: serde_json::Value) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut offset = 0;
        for w in net.widths.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            weights.extend_from_slice(&net.params[offset..offset + n_out * n_in]);
            biases.extend_from_slice(&net.params[offset + n_out * n_in..offset + n_out * n_in + n_out]);
            offset += n_out * n_in + n_out;
        }
        Checkpoint {
            widths: net.widths.clone(),
            head: net.head,
            weights,
            biases,
            seed: net.seed,
            train_meta,
        }
    }

    pub fn to_net(&self) -> Mlp {
        let mut params = Vec::with_capacity(self.weights.len() + self.biases.len());
        let mut woff = 0;
        let mut boff = 0;
        for w in self.widths.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            params.extend_from_slice(&self.weights[woff..woff + n_out * n_in]);
            params.extend_from_slice(&self.biases[boff..boff + n_out]);
            woff += n_out * n_in;
            boff += n_out;
        }
        Mlp {
            widths: self.widths.clone(),
            head: self.head,
            params,
            seed: self.seed,
        }
    }
}
