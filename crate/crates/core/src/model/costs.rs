//! Cost building blocks: the radial pairwise profiles `ĥ_ij`, the aggregate
//! cost `f_0` and the terminal cost `g^N`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::numerics::{central_grad, central_hessian, fd_step, norm, operator_norm};

pub type RadialFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type GradFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Number of grid points used when a sup over an interval is searched
/// numerically.
const SUP_GRID: usize = 10_000;

/// A radial profile `ĥ: R_+ -> R_+`; the pairwise cost is `h(a) = ĥ(|a|)`.
#[derive(Clone)]
pub enum RadialProfile {
    Zero,
    /// `ĥ(r) = κ r² / 2`.
    Quadratic { kappa: f64 },
    Custom(CustomRadial),
}

/// A user-supplied profile. Derivatives come from finite differences; the
/// sup-norm of `D²h` must be declared.
#[derive(Clone)]
pub struct CustomRadial {
    pub name: String,
    pub value: RadialFn,
    pub hessian_sup: f64,
}

impl fmt::Debug for RadialProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RadialProfile::Zero => write!(f, "Zero"),
            RadialProfile::Quadratic { kappa } => write!(f, "Quadratic {{ kappa: {kappa} }}"),
            RadialProfile::Custom(c) => write!(f, "Custom({})", c.name),
        }
    }
}

impl PartialEq for RadialProfile {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (RadialProfile::Zero, RadialProfile::Zero) => true,
            (RadialProfile::Quadratic { kappa: a }, RadialProfile::Quadratic { kappa: b }) => a == b,
            (RadialProfile::Custom(a), RadialProfile::Custom(b)) => {
                Arc::ptr_eq(&a.value, &b.value) && a.hessian_sup == b.hessian_sup
            }
            _ => false,
        }
    }
}

impl RadialProfile {
    pub fn custom(
        name: impl Into<String>,
        value: impl Fn(f64) -> f64 + Send + Sync + 'static,
        hessian_sup: f64,
    ) -> Self {
        RadialProfile::Custom(CustomRadial {
            name: name.into(),
            value: Arc::new(value),
            hessian_sup,
        })
    }

    /// `κ` when the profile is quadratic (zero counts as `κ = 0`).
    pub fn quadratic_kappa(&self) -> Option<f64> {
        match self {
            RadialProfile::Zero => Some(0.0),
            RadialProfile::Quadratic { kappa } => Some(*kappa),
            RadialProfile::Custom(_) => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, RadialProfile::Zero) || self.quadratic_kappa() == Some(0.0)
    }

    pub fn value(&self, r: f64) -> f64 {
        match self {
            RadialProfile::Zero => 0.0,
            RadialProfile::Quadratic { kappa } => 0.5 * kappa * r * r,
            RadialProfile::Custom(c) => (c.value)(r),
        }
    }

    /// `ĥ'(r)`. Custom profiles use central differences, switching to a
    /// second-order forward stencil near the origin where `ĥ` is undefined
    /// for negative arguments.
    pub fn deriv(&self, r: f64) -> f64 {
        match self {
            RadialProfile::Zero => 0.0,
            RadialProfile::Quadratic { kappa } => kappa * r,
            RadialProfile::Custom(c) => {
                let h = fd_step(r);
                let f = &c.value;
                if r >= h {
                    (f(r + h) - f(r - h)) / (2.0 * h)
                } else {
                    (-3.0 * f(r) + 4.0 * f(r + h) - f(r + 2.0 * h)) / (2.0 * h)
                }
            }
        }
    }

    /// `ĥ''(r)`.
    pub fn second(&self, r: f64) -> f64 {
        match self {
            RadialProfile::Zero => 0.0,
            RadialProfile::Quadratic { kappa } => *kappa,
            RadialProfile::Custom(c) => {
                let h = 1e-4 * (1.0 + r.abs());
                let f = &c.value;
                if r >= h {
                    (f(r + h) - 2.0 * f(r) + f(r - h)) / (h * h)
                } else {
                    (2.0 * f(r) - 5.0 * f(r + h) + 4.0 * f(r + 2.0 * h) - f(r + 3.0 * h)) / (h * h)
                }
            }
        }
    }

    /// `h(a) = ĥ(|a|)`.
    pub fn eval(&self, a: &[f64]) -> f64 {
        match self {
            RadialProfile::Zero => 0.0,
            RadialProfile::Quadratic { kappa } => 0.5 * kappa * a.iter().map(|x| x * x).sum::<f64>(),
            RadialProfile::Custom(_) => self.value(norm(a)),
        }
    }

    /// `Dh(a) = ĥ'(|a|) a / |a|`, zero at the origin.
    pub fn grad(&self, a: &[f64], out: &mut [f64]) {
        match self {
            RadialProfile::Zero => out.fill(0.0),
            RadialProfile::Quadratic { kappa } => {
                for (o, x) in out.iter_mut().zip(a) {
                    *o = kappa * x;
                }
            }
            RadialProfile::Custom(_) => {
                let r = norm(a);
                if r == 0.0 {
                    out.fill(0.0);
                    return;
                }
                let scale = self.deriv(r) / r;
                for (o, x) in out.iter_mut().zip(a) {
                    *o = scale * x;
                }
            }
        }
    }

    /// Declared `‖D²h‖_∞`.
    pub fn hessian_sup(&self) -> f64 {
        match self {
            RadialProfile::Zero => 0.0,
            RadialProfile::Quadratic { kappa } => kappa.abs(),
            RadialProfile::Custom(c) => c.hessian_sup,
        }
    }

    /// `sup_{|x| <= radius} |Dh(x)|`.
    pub fn grad_sup_on_ball(&self, radius: f64) -> f64 {
        match self {
            RadialProfile::Zero => 0.0,
            RadialProfile::Quadratic { kappa } => kappa.abs() * radius,
            RadialProfile::Custom(_) => (0..=SUP_GRID)
                .map(|k| self.deriv(radius * k as f64 / SUP_GRID as f64).abs())
                .fold(0.0, f64::max),
        }
    }
}

/// The aggregate cost `f_0: R^d -> R`.
#[derive(Clone)]
pub enum ScalarCost {
    Zero,
    /// `L (sqrt(|x|² + δ²) - δ)`: convex, `L`-Lipschitz, `‖D²‖ = L/δ`.
    PseudoHuber { lipschitz: f64, delta: f64 },
    Custom(CustomScalar),
}

#[derive(Clone)]
pub struct CustomScalar {
    pub name: String,
    pub value: ScalarFn,
    pub grad: Option<GradFn>,
    pub grad_sup: f64,
    pub hessian_sup: f64,
}

impl fmt::Debug for ScalarCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarCost::Zero => write!(f, "Zero"),
            ScalarCost::PseudoHuber { lipschitz, delta } => {
                write!(f, "PseudoHuber {{ lipschitz: {lipschitz}, delta: {delta} }}")
            }
            ScalarCost::Custom(c) => write!(f, "Custom({})", c.name),
        }
    }
}

impl ScalarCost {
    pub fn is_zero(&self) -> bool {
        matches!(self, ScalarCost::Zero)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            ScalarCost::Zero => 0.0,
            ScalarCost::PseudoHuber { lipschitz, delta } => {
                lipschitz * ((norm(x).powi(2) + delta * delta).sqrt() - delta)
            }
            ScalarCost::Custom(c) => (c.value)(x),
        }
    }

    pub fn grad(&self, x: &[f64], out: &mut [f64]) {
        match self {
            ScalarCost::Zero => out.fill(0.0),
            ScalarCost::PseudoHuber { lipschitz, delta } => {
                let s = (norm(x).powi(2) + delta * delta).sqrt();
                for (o, v) in out.iter_mut().zip(x) {
                    *o = lipschitz * v / s;
                }
            }
            ScalarCost::Custom(c) => match &c.grad {
                Some(g) => g(x, out),
                None => central_grad(|y| (c.value)(y), x, out),
            },
        }
    }

    /// Row-major `d x d` Hessian.
    pub fn hessian(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        match self {
            ScalarCost::Zero => vec![0.0; d * d],
            ScalarCost::PseudoHuber { lipschitz, delta } => {
                let s = (norm(x).powi(2) + delta * delta).sqrt();
                let mut h = vec![0.0; d * d];
                for r in 0..d {
                    for c in 0..d {
                        let id = if r == c { 1.0 } else { 0.0 };
                        h[r * d + c] = lipschitz / s * (id - x[r] * x[c] / (s * s));
                    }
                }
                h
            }
            ScalarCost::Custom(_) => central_hessian(|y, o| self.grad(y, o), x),
        }
    }

    /// Declared `‖Df_0‖_∞`.
    pub fn grad_sup(&self) -> f64 {
        match self {
            ScalarCost::Zero => 0.0,
            ScalarCost::PseudoHuber { lipschitz, .. } => *lipschitz,
            ScalarCost::Custom(c) => c.grad_sup,
        }
    }

    /// Declared `‖D²f_0‖_∞`.
    pub fn hessian_sup(&self) -> f64 {
        match self {
            ScalarCost::Zero => 0.0,
            ScalarCost::PseudoHuber { lipschitz, delta } => lipschitz / delta,
            ScalarCost::Custom(c) => c.hessian_sup,
        }
    }

    /// Whether the derivative handles are analytic.
    pub fn has_analytic_grad(&self) -> bool {
        match self {
            ScalarCost::Custom(c) => c.grad.is_some(),
            _ => true,
        }
    }
}

/// `ψ(y) = c (sqrt(|y|² + δ²) - δ)`.
fn pseudo_huber(c: f64, delta: f64, y: &[f64]) -> f64 {
    c * ((norm(y).powi(2) + delta * delta).sqrt() - delta)
}

fn pseudo_huber_grad(c: f64, delta: f64, y: &[f64], out: &mut [f64]) {
    let s = (norm(y).powi(2) + delta * delta).sqrt();
    for (o, v) in out.iter_mut().zip(y) {
        *o = c * v / s;
    }
}

fn pseudo_huber_hess(c: f64, delta: f64, y: &[f64], out: &mut [f64], stride: usize, scale: f64) {
    // writes scale * D²ψ(y) into a d x d block of a row-major matrix with row stride `stride`
    let d = y.len();
    let s = (norm(y).powi(2) + delta * delta).sqrt();
    for r in 0..d {
        for k in 0..d {
            let id = if r == k { 1.0 } else { 0.0 };
            out[r * stride + k] += scale * c / s * (id - y[r] * y[k] / (s * s));
        }
    }
}

#[derive(Clone)]
pub enum TerminalKind {
    /// `½ xᵀ G x`.
    Quadratic { g: DMatrix<f64> },
    /// `(1/N) Σ_i ψ(x_i)` with `ψ` pseudo-Huber.
    SeparableHuber { c: f64, delta: f64 },
    /// `ψ(mean_i x_i)`.
    MeanHuber { c: f64, delta: f64 },
    Custom { name: String, value: ScalarFn },
}

impl fmt::Debug for TerminalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TerminalKind::Quadratic { g } => write!(f, "Quadratic({}x{})", g.nrows(), g.ncols()),
            TerminalKind::SeparableHuber { c, delta } => write!(f, "SeparableHuber({c}, {delta})"),
            TerminalKind::MeanHuber { c, delta } => write!(f, "MeanHuber({c}, {delta})"),
            TerminalKind::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

/// The terminal cost `g^N` on `R^{Nd}` together with its declared constants.
#[derive(Clone, Debug)]
pub struct TerminalCost {
    kind: TerminalKind,
    n_agents: usize,
    dim: usize,
    c_g: f64,
    k_g: Option<f64>,
    /// `‖D_{ij} g^N‖_∞`, row-major `N x N`.
    cross_norms: Vec<f64>,
}

impl TerminalCost {
    /// `½ xᵀ G x`; `C_G = N λ_max(G)` (Hessian bound only, the gradient is
    /// unbounded).
    pub fn quadratic(n_agents: usize, dim: usize, g: DMatrix<f64>) -> Self {
        let nd = n_agents * dim;
        assert_eq!((g.nrows(), g.ncols()), (nd, nd), "terminal matrix must be Nd x Nd");
        let lambda_max = g.clone().symmetric_eigenvalues().max();
        let mut cross = vec![0.0; n_agents * n_agents];
        for i in 0..n_agents {
            for j in 0..n_agents {
                let block: Vec<f64> = (0..dim)
                    .flat_map(|r| {
                        let g = &g;
                        (0..dim).map(move |c| g[(i * dim + r, j * dim + c)])
                    })
                    .collect();
                cross[i * n_agents + j] = operator_norm(&block, dim, dim);
            }
        }
        let c_g = (n_agents as f64 * lambda_max).max(0.0);
        let k_g = (n_agents * n_agents) as f64 * cross.iter().cloned().fold(0.0, f64::max);
        TerminalCost {
            kind: TerminalKind::Quadratic { g },
            n_agents,
            dim,
            c_g,
            k_g: Some(k_g),
            cross_norms: cross,
        }
    }

    /// `G = (c/N) I`.
    pub fn quadratic_scaled(n_agents: usize, dim: usize, c: f64) -> Self {
        let nd = n_agents * dim;
        Self::quadratic(n_agents, dim, DMatrix::identity(nd, nd) * (c / n_agents as f64))
    }

    pub fn separable_huber(n_agents: usize, dim: usize, c: f64, delta: f64) -> Self {
        let n = n_agents as f64;
        let mut cross = vec![0.0; n_agents * n_agents];
        for i in 0..n_agents {
            cross[i * n_agents + i] = c / (delta * n);
        }
        TerminalCost {
            kind: TerminalKind::SeparableHuber { c, delta },
            n_agents,
            dim,
            c_g: c * (1.0_f64).max(1.0 / delta),
            k_g: None,
            cross_norms: cross,
        }
    }

    pub fn mean_huber(n_agents: usize, dim: usize, c: f64, delta: f64) -> Self {
        let n = n_agents as f64;
        TerminalCost {
            kind: TerminalKind::MeanHuber { c, delta },
            n_agents,
            dim,
            c_g: c * (1.0_f64).max(1.0 / delta),
            k_g: Some(c / delta),
            cross_norms: vec![c / (delta * n * n); n_agents * n_agents],
        }
    }

    /// A user-supplied terminal cost with declared constants. Gradients and
    /// Hessians come from central differences.
    pub fn custom(
        n_agents: usize,
        dim: usize,
        name: impl Into<String>,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        c_g: f64,
        k_g: Option<f64>,
        cross_norms: Vec<f64>,
    ) -> Self {
        assert_eq!(cross_norms.len(), n_agents * n_agents);
        TerminalCost {
            kind: TerminalKind::Custom {
                name: name.into(),
                value: Arc::new(value),
            },
            n_agents,
            dim,
            c_g,
            k_g,
            cross_norms,
        }
    }

    pub fn kind(&self) -> &TerminalKind {
        &self.kind
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn c_g(&self) -> f64 {
        self.c_g
    }

    pub fn k_g(&self) -> Option<f64> {
        self.k_g
    }

    /// Overrides the declared `C_G`.
    pub fn with_c_g(mut self, c_g: f64) -> Self {
        self.c_g = c_g;
        self
    }

    pub fn with_k_g(mut self, k_g: Option<f64>) -> Self {
        self.k_g = k_g;
        self
    }

    pub fn cross_norms(&self) -> &[f64] {
        &self.cross_norms
    }

    pub fn as_quadratic(&self) -> Option<&DMatrix<f64>> {
        match &self.kind {
            TerminalKind::Quadratic { g } => Some(g),
            _ => None,
        }
    }

    /// Whether the gradient is bounded (false only for the quadratic case).
    pub fn has_bounded_gradient(&self) -> bool {
        !matches!(self.kind, TerminalKind::Quadratic { .. })
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let d = self.dim;
        match &self.kind {
            TerminalKind::Quadratic { g } => {
                let mut acc = 0.0;
                for r in 0..x.len() {
                    let mut row = 0.0;
                    for c in 0..x.len() {
                        row += g[(r, c)] * x[c];
                    }
                    acc += x[r] * row;
                }
                0.5 * acc
            }
            TerminalKind::SeparableHuber { c, delta } => {
                x.chunks(d).map(|xi| pseudo_huber(*c, *delta, xi)).sum::<f64>() / self.n_agents as f64
            }
            TerminalKind::MeanHuber { c, delta } => pseudo_huber(*c, *delta, &self.mean(x)),
            TerminalKind::Custom { value, .. } => value(x),
        }
    }

    fn mean(&self, x: &[f64]) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for xi in x.chunks(self.dim) {
            for (a, b) in m.iter_mut().zip(xi) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.n_agents as f64);
        m
    }

    /// Full gradient; block `i` is `D_{x_i} g^N`.
    pub fn grad(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let n = self.n_agents as f64;
        match &self.kind {
            TerminalKind::Quadratic { g } => {
                for r in 0..x.len() {
                    out[r] = (0..x.len()).map(|c| g[(r, c)] * x[c]).sum();
                }
            }
            TerminalKind::SeparableHuber { c, delta } => {
                for (xi, oi) in x.chunks(d).zip(out.chunks_mut(d)) {
                    pseudo_huber_grad(*c, *delta, xi, oi);
                    oi.iter_mut().for_each(|v| *v /= n);
                }
            }
            TerminalKind::MeanHuber { c, delta } => {
                let mut gm = vec![0.0; d];
                pseudo_huber_grad(*c, *delta, &self.mean(x), &mut gm);
                for oi in out.chunks_mut(d) {
                    for (o, v) in oi.iter_mut().zip(&gm) {
                        *o = v / n;
                    }
                }
            }
            TerminalKind::Custom { value, .. } => central_grad(|y| value(y), x, out),
        }
    }

    /// Row-major `Nd x Nd` Hessian.
    pub fn hessian(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let nd = x.len();
        let n = self.n_agents as f64;
        match &self.kind {
            TerminalKind::Quadratic { g } => (0..nd)
                .flat_map(|r| (0..nd).map(move |c| (r, c)))
                .map(|(r, c)| g[(r, c)])
                .collect(),
            TerminalKind::SeparableHuber { c, delta } => {
                let mut h = vec![0.0; nd * nd];
                for (i, xi) in x.chunks(d).enumerate() {
                    let off = i * d * nd + i * d;
                    pseudo_huber_hess(*c, *delta, xi, &mut h[off..], nd, 1.0 / n);
                }
                h
            }
            TerminalKind::MeanHuber { c, delta } => {
                let mut h = vec![0.0; nd * nd];
                let m = self.mean(x);
                for i in 0..self.n_agents {
                    for j in 0..self.n_agents {
                        let off = i * d * nd + j * d;
                        pseudo_huber_hess(*c, *delta, &m, &mut h[off..], nd, 1.0 / (n * n));
                    }
                }
                h
            }
            TerminalKind::Custom { .. } => central_hessian(|y, o| self.grad(y, o), x),
        }
    }
}
