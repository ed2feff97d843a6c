//! Scalar reverse-mode autodiff on an append-only tape.
//!
//! Nodes store their parents and local partials in CSR layout so wide
//! fan-in operations (affine layers) are a single node. One backward pass
//! over a scalar root yields exact gradients for every leaf. A tape is
//! single-threaded; parallelism lives above it (one tape per block loss).

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Default)]
struct TapeInner {
    values: Vec<f64>,
    /// starts[i]..starts[i+1] indexes parents/partials of node i.
    starts: Vec<u32>,
    parents: Vec<u32>,
    partials: Vec<f64>,
}

/// Append-only computation tape.
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// A tracked scalar: an index into its tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
}

impl Tape {
    pub fn new() -> Self {
        let mut inner = TapeInner::default();
        inner.starts.push(0);
        Tape {
            inner: RefCell::new(inner),
        }
    }

    /// Drop all nodes but keep allocations; invalidates outstanding `Var`s.
    pub fn clear(&self) {
        let mut t = self.inner.borrow_mut();
        t.values.clear();
        t.starts.clear();
        t.starts.push(0);
        t.parents.clear();
        t.partials.clear();
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert a leaf (input or parameter).
    pub fn var(&self, value: f64) -> Var<'_> {
        let mut t = self.inner.borrow_mut();
        t.values.push(value);
        let end = t.parents.len() as u32;
        t.starts.push(end);
        Var {
            tape: self,
            idx: (t.values.len() - 1) as u32,
        }
    }

    /// Insert many leaves at once.
    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        let mut t = self.inner.borrow_mut();
        let first = t.values.len() as u32;
        t.values.extend_from_slice(values);
        let end = t.parents.len() as u32;
        t.starts.extend(std::iter::repeat_n(end, values.len()));
        (first..first + values.len() as u32)
            .map(|idx| Var { tape: self, idx })
            .collect()
    }

    fn push1(&self, value: f64, p: u32, d: f64) -> Var<'_> {
        let mut t = self.inner.borrow_mut();
        t.values.push(value);
        t.parents.push(p);
        t.partials.push(d);
        let end = t.parents.len() as u32;
        t.starts.push(end);
        Var {
            tape: self,
            idx: (t.values.len() - 1) as u32,
        }
    }

    fn push2(&self, value: f64, p0: u32, d0: f64, p1: u32, d1: f64) -> Var<'_> {
        let mut t = self.inner.borrow_mut();
        t.values.push(value);
        t.parents.push(p0);
        t.parents.push(p1);
        t.partials.push(d0);
        t.partials.push(d1);
        let end = t.parents.len() as u32;
        t.starts.push(end);
        Var {
            tape: self,
            idx: (t.values.len() - 1) as u32,
        }
    }

    /// One node for `sum_i w_i x_i + b`: partials are the opposite factors.
    pub fn affine<'t>(&'t self, ws: &[Var<'t>], xs: &[Var<'t>], b: Var<'t>) -> Var<'t> {
        assert_eq!(ws.len(), xs.len());
        let t = &mut *self.inner.borrow_mut();
        let mut acc = t.values[b.idx as usize];
        t.parents.reserve(2 * ws.len() + 1);
        t.partials.reserve(2 * ws.len() + 1);
        for (w, x) in ws.iter().zip(xs) {
            let (wv, xv) = (t.values[w.idx as usize], t.values[x.idx as usize]);
            acc += wv * xv;
            t.parents.push(w.idx);
            t.partials.push(xv);
            t.parents.push(x.idx);
            t.partials.push(wv);
        }
        t.parents.push(b.idx);
        t.partials.push(1.0);
        t.values.push(acc);
        let end = t.parents.len() as u32;
        t.starts.push(end);
        Var {
            tape: self,
            idx: (t.values.len() - 1) as u32,
        }
    }

    /// One node with an arbitrary parent list and externally computed
    /// partials — the escape hatch for fusing a large closed-form
    /// computation (e.g. a whole Fourier inversion sum) into one node.
    pub fn node<'t>(&'t self, value: f64, parents: &[Var<'t>], partials: &[f64]) -> Var<'t> {
        assert_eq!(parents.len(), partials.len());
        let mut t = self.inner.borrow_mut();
        t.values.push(value);
        t.parents.extend(parents.iter().map(|v| v.idx));
        t.partials.extend_from_slice(partials);
        let end = t.parents.len() as u32;
        t.starts.push(end);
        Var {
            tape: self,
            idx: (t.values.len() - 1) as u32,
        }
    }

    /// Sum of many tracked values as a single node.
    pub fn sum<'t>(&'t self, items: &[Var<'t>]) -> Var<'t> {
        let mut t = self.inner.borrow_mut();
        let mut acc = 0.0;
        for v in items {
            acc += t.values[v.idx as usize];
        }
        t.values.push(acc);
        for v in items {
            t.parents.push(v.idx);
            t.partials.push(1.0);
        }
        let end = t.parents.len() as u32;
        t.starts.push(end);
        Var {
            tape: self,
            idx: (t.values.len() - 1) as u32,
        }
    }

    /// Reverse sweep from `root`; returns the adjoint of every node.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let t = self.inner.borrow();
        let n = t.values.len();
        let mut adj = vec![0.0; n];
        adj[root.idx as usize] = 1.0;
        for i in (0..n).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let s = t.starts[i] as usize;
            let e = t.starts[i + 1] as usize;
            for k in s..e {
                adj[t.parents[k] as usize] += a * t.partials[k];
            }
        }
        Gradients { adj }
    }
}

/// Adjoints of every tape node after a backward pass.
pub struct Gradients {
    adj: Vec<f64>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        self.adj[v.idx as usize]
    }
}

impl<'t> Var<'t> {
    pub fn value(self) -> f64 {
        self.tape.inner.borrow().values[self.idx as usize]
    }

    pub fn sin(self) -> Var<'t> {
        let v = self.value();
        self.tape.push1(v.sin(), self.idx, v.cos())
    }

    pub fn cos(self) -> Var<'t> {
        let v = self.value();
        self.tape.push1(v.cos(), self.idx, -v.sin())
    }

    pub fn exp(self) -> Var<'t> {
        let e = self.value().exp();
        self.tape.push1(e, self.idx, e)
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value();
        self.tape.push1(v.ln(), self.idx, 1.0 / v)
    }

    pub fn sqrt(self) -> Var<'t> {
        let r = self.value().sqrt();
        self.tape.push1(r, self.idx, 0.5 / r)
    }

    pub fn tanh(self) -> Var<'t> {
        let th = self.value().tanh();
        self.tape.push1(th, self.idx, 1.0 - th * th)
    }

    pub fn abs(self) -> Var<'t> {
        let v = self.value();
        let d = if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.tape.push1(v.abs(), self.idx, d)
    }

    pub fn square(self) -> Var<'t> {
        let v = self.value();
        self.tape.push1(v * v, self.idx, 2.0 * v)
    }

    pub fn powi(self, n: i32) -> Var<'t> {
        let v = self.value();
        self.tape
            .push1(v.powi(n), self.idx, n as f64 * v.powi(n - 1))
    }

    pub fn recip(self) -> Var<'t> {
        let v = self.value();
        self.tape.push1(1.0 / v, self.idx, -1.0 / (v * v))
    }

    /// ELU with alpha = 1; continuous at 0.
    pub fn elu(self) -> Var<'t> {
        let v = self.value();
        if v > 0.0 {
            self.tape.push1(v, self.idx, 1.0)
        } else {
            let e = v.exp();
            self.tape.push1(e - 1.0, self.idx, e)
        }
    }

    /// Overflow-safe softplus ln(1 + e^x); derivative is the sigmoid.
    pub fn softplus(self) -> Var<'t> {
        let v = self.value();
        let val = if v > 0.0 {
            v + (-v).exp().ln_1p()
        } else {
            v.exp().ln_1p()
        };
        let sig = if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        };
        self.tape.push1(val, self.idx, sig)
    }

    /// max(self, floor); zero gradient on the clamped branch.
    pub fn clamp_floor(self, floor: f64) -> Var<'t> {
        let v = self.value();
        if v > floor {
            self.tape.push1(v, self.idx, 1.0)
        } else {
            self.tape.push1(floor, self.idx, 0.0)
        }
    }

    /// Two-argument arctangent of `self` (y) and `x`.
    pub fn atan2(self, x: Var<'t>) -> Var<'t> {
        let yv = self.value();
        let xv = x.value();
        let r2 = xv * xv + yv * yv;
        self.tape
            .push2(yv.atan2(xv), self.idx, xv / r2, x.idx, -yv / r2)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .push2(self.value() + rhs.value(), self.idx, 1.0, rhs.idx, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .push2(self.value() - rhs.value(), self.idx, 1.0, rhs.idx, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        self.tape.push2(a * b, self.idx, b, rhs.idx, a)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        self.tape
            .push2(a / b, self.idx, 1.0 / b, rhs.idx, -a / (b * b))
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.push1(-self.value(), self.idx, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.tape.push1(self.value() + rhs, self.idx, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.tape.push1(self.value() - rhs, self.idx, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.tape.push1(self.value() * rhs, self.idx, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        self.tape.push1(self.value() / rhs, self.idx, 1.0 / rhs)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs + self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        rhs.tape.push1(self - rhs.value(), rhs.idx, -1.0)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}

impl<'t> Div<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let b = rhs.value();
        rhs.tape.push1(self / b, rhs.idx, -self / (b * b))
    }
}

/// Tracked complex value carried as a (re, im) pair of tape scalars.
/// All quantities stay real-differentiable; no Wirtinger calculus needed.
#[derive(Clone, Copy)]
pub struct CVar<'t> {
    pub re: Var<'t>,
    pub im: Var<'t>,
}

impl<'t> CVar<'t> {
    pub fn new(re: Var<'t>, im: Var<'t>) -> Self {
        CVar { re, im }
    }

    pub fn from_re(tape: &'t Tape, re: Var<'t>) -> Self {
        CVar {
            re,
            im: tape.var(0.0),
        }
    }

    pub fn value(self) -> (f64, f64) {
        (self.re.value(), self.im.value())
    }

    pub fn add(self, o: CVar<'t>) -> CVar<'t> {
        CVar {
            re: self.re + o.re,
            im: self.im + o.im,
        }
    }

    pub fn sub(self, o: CVar<'t>) -> CVar<'t> {
        CVar {
            re: self.re - o.re,
            im: self.im - o.im,
        }
    }

    pub fn mul(self, o: CVar<'t>) -> CVar<'t> {
        CVar {
            re: self.re * o.re - self.im * o.im,
            im: self.re * o.im + self.im * o.re,
        }
    }

    /// Multiply by the complex constant `a + ib`.
    pub fn mul_const(self, a: f64, b: f64) -> CVar<'t> {
        CVar {
            re: self.re * a - self.im * b,
            im: self.re * b + self.im * a,
        }
    }

    pub fn div(self, o: CVar<'t>) -> CVar<'t> {
        let denom = o.re.square() + o.im.square();
        CVar {
            re: (self.re * o.re + self.im * o.im) / denom,
            im: (self.im * o.re - self.re * o.im) / denom,
        }
    }

    pub fn scale(self, s: f64) -> CVar<'t> {
        CVar {
            re: self.re * s,
            im: self.im * s,
        }
    }

    pub fn exp(self) -> CVar<'t> {
        let m = self.re.exp();
        CVar {
            re: m * self.im.cos(),
            im: m * self.im.sin(),
        }
    }

    /// Principal-branch logarithm.
    pub fn ln(self) -> CVar<'t> {
        let r2 = self.re.square() + self.im.square();
        CVar {
            re: r2.ln() * 0.5,
            im: self.im.atan2(self.re),
        }
    }

    /// Principal-branch square root via exp(ln(z)/2).
    pub fn sqrt(self) -> CVar<'t> {
        self.ln().scale(0.5).exp()
    }
}
