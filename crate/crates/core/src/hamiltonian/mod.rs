//! The interaction cost `f^N`, the pointwise optimizer `â(p)` of the
//! full-information Hamiltonian, and the distributed optimizer `ǎ(q, m)` on
//! a particle ensemble.
//!
//! Both optimizers are computed by damped Picard iteration on their
//! first-order conditions
//!
//! ```text
//! â^i = -N p^i - N ∂_i f^N(â)
//! ǎ^i(x^i) = -N q^i(x^i) - N E_{-i}[ ∂_i f^N(ǎ^i(x^i), (ǎ^j(Y^j))_{j≠i}) ]
//! ```
//!
//! where `E_{-i}` averages over the other agents' particle columns.

mod distributed;

pub use distributed::{
    dist_objective, dist_objective_rows, extend_check_a, hamiltonian_dist, solve_check_a, ControlFieldDist, CovectorFieldDist,
    OthersAverager, SiteField,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ProblemSpec;
use crate::numerics::sup_norm;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedPointConfig {
    /// Damping `θ ∈ (0, 1]`; `None` picks `1 / (1 + N ‖D²f^N‖)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub damping: Option<f64>,
    /// Stop once the sup-norm residual drops below `N · tolerance`.
    pub tolerance: f64,
    pub max_iters: usize,
    /// Cap on the number of ensemble rows used for conditional averages
    /// that have no closed form (non-quadratic `ĥ`, nonzero `f_0`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inner_samples: Option<usize>,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        FixedPointConfig {
            damping: None,
            tolerance: 1e-10,
            max_iters: 10_000,
            inner_samples: None,
        }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::config("fixed-point tolerance must be positive"));
        }
        if let Some(t) = self.damping {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::config("damping must lie in (0, 1]"));
            }
        }
        if self.max_iters == 0 {
            return Err(Error::config("max_iters must be at least 1"));
        }
        Ok(())
    }

    pub(crate) fn damping_for(&self, spec: &ProblemSpec) -> f64 {
        self.damping
            .unwrap_or_else(|| 1.0 / (1.0 + spec.n_agents as f64 * spec.fn_hessian_bound()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub iterations: usize,
    pub residual: f64,
    /// False if the residual ever increased after the first iteration.
    pub monotone: bool,
}

/// Tracks the Picard residual sequence.
#[derive(Default)]
pub(crate) struct ResidualTrace {
    last: Option<f64>,
    monotone: bool,
    iterations: usize,
}

impl ResidualTrace {
    pub(crate) fn new() -> Self {
        ResidualTrace {
            last: None,
            monotone: true,
            iterations: 0,
        }
    }

    pub(crate) fn push(&mut self, r: f64) {
        if let Some(prev) = self.last {
            if self.iterations > 1 && r > prev * (1.0 + 1e-12) + 1e-300 {
                if self.monotone {
                    log::debug!("fixed-point residual increased: {prev:e} -> {r:e}");
                }
                self.monotone = false;
            }
        }
        self.last = Some(r);
        self.iterations += 1;
    }

    pub(crate) fn report(&self) -> FixedPointReport {
        FixedPointReport {
            iterations: self.iterations.saturating_sub(1),
            residual: self.last.unwrap_or(0.0),
            monotone: self.monotone,
        }
    }
}

/// `â(p)` with its solver report.
#[derive(Clone, Debug)]
pub struct ControlFull {
    pub controls: Vec<f64>,
    pub report: FixedPointReport,
}

/// `f^N(a) = f_0(mean a) + (1/N²) Σ_{i,j} ĥ_ij(|a_i - a_j|)`.
pub fn eval_fn(spec: &ProblemSpec, a: &[f64]) -> f64 {
    let (n, d) = (spec.n_agents, spec.dim);
    let nf = n as f64;
    let mut diff = vec![0.0; d];
    let mut pair = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let h = spec.pairwise.get(i, j);
            if h.is_zero() {
                continue;
            }
            for c in 0..d {
                diff[c] = a[i * d + c] - a[j * d + c];
            }
            pair += 2.0 * h.eval(&diff);
        }
    }
    let f0 = if spec.f0.is_zero() {
        0.0
    } else {
        spec.f0.value(&block_mean(a, n, d))
    };
    f0 + pair / (nf * nf)
}

pub(crate) fn block_mean(a: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    for ai in a.chunks(d).take(n) {
        for (mc, v) in m.iter_mut().zip(ai) {
            *mc += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= n as f64);
    m
}

/// Block `i`: `(2/N²) Σ_j Dh_ij(a_i - a_j) + (1/N) Df_0(mean a)`.
pub fn grad_fn(spec: &ProblemSpec, a: &[f64], out: &mut [f64]) {
    let (n, d) = (spec.n_agents, spec.dim);
    let nf = n as f64;
    out.fill(0.0);
    let mut diff = vec![0.0; d];
    let mut dh = vec![0.0; d];
    let scale = 2.0 / (nf * nf);
    for i in 0..n {
        for j in (i + 1)..n {
            let h = spec.pairwise.get(i, j);
            if h.is_zero() {
                continue;
            }
            for c in 0..d {
                diff[c] = a[i * d + c] - a[j * d + c];
            }
            h.grad(&diff, &mut dh);
            for c in 0..d {
                out[i * d + c] += scale * dh[c];
                out[j * d + c] -= scale * dh[c];
            }
        }
    }
    if !spec.f0.is_zero() {
        let mut g0 = vec![0.0; d];
        spec.f0.grad(&block_mean(a, n, d), &mut g0);
        for i in 0..n {
            for c in 0..d {
                out[i * d + c] += g0[c] / nf;
            }
        }
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::config(format!("{what} has non-finite entries")))
    }
}

/// Solves `â = -N p - N ∇f^N(â)` by damped Picard iteration from `-N p`.
pub fn solve_hat_a(spec: &ProblemSpec, p: &[f64], cfg: &FixedPointConfig) -> Result<ControlFull> {
    cfg.validate()?;
    let nd = spec.state_len();
    if p.len() != nd {
        return Err(Error::config(format!("covector has length {}, expected {nd}", p.len())));
    }
    check_finite(p, "covector")?;
    let nf = spec.n_agents as f64;
    let theta = cfg.damping_for(spec);
    let mut a: Vec<f64> = p.iter().map(|v| -nf * v).collect();
    let mut grad = vec![0.0; nd];
    let mut target = vec![0.0; nd];
    let mut trace = ResidualTrace::new();
    for _ in 0..=cfg.max_iters {
        grad_fn(spec, &a, &mut grad);
        for k in 0..nd {
            target[k] = -nf * p[k] - nf * grad[k];
        }
        let r = a.iter().zip(&target).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        trace.push(r);
        if r <= nf * cfg.tolerance {
            return Ok(ControlFull {
                controls: a,
                report: trace.report(),
            });
        }
        if !r.is_finite() {
            break;
        }
        for k in 0..nd {
            a[k] = (1.0 - theta) * a[k] + theta * target[k];
        }
    }
    let rep = trace.report();
    Err(Error::NonConvergence {
        iterations: rep.iterations,
        residual: rep.residual,
    })
}

/// Objective of the full Hamiltonian at a given control:
/// `-Σ_i (p_i·a_i + |a_i|²/2N) - f^N(a)`.
pub fn full_objective(spec: &ProblemSpec, p: &[f64], a: &[f64]) -> f64 {
    let nf = spec.n_agents as f64;
    let lin: f64 = p.iter().zip(a).map(|(x, y)| x * y + y * y / (2.0 * nf)).sum();
    -lin - eval_fn(spec, a)
}

/// `H^N(p) = sup_a -Σ_i (p_i·a_i + |a_i|²/2N) - f^N(a)`.
pub fn hamiltonian_full(spec: &ProblemSpec, p: &[f64], cfg: &FixedPointConfig) -> Result<f64> {
    let a = solve_hat_a(spec, p, cfg)?;
    Ok(full_objective(spec, p, &a.controls))
}

/// `∇H^N(p) = -â(p)` by the envelope theorem.
pub fn envelope_grad_h(spec: &ProblemSpec, p: &[f64], cfg: &FixedPointConfig) -> Result<Vec<f64>> {
    Ok(solve_hat_a(spec, p, cfg)?.controls.into_iter().map(|v| -v).collect())
}

/// `∇φ(y) = 2N y + â(y)` for the convex function `φ(y) = N|y|² - H^N(y)`.
pub fn phi_grad(spec: &ProblemSpec, y: &[f64], cfg: &FixedPointConfig) -> Result<Vec<f64>> {
    let nf = spec.n_agents as f64;
    let a = solve_hat_a(spec, y, cfg)?;
    Ok(y.iter().zip(&a.controls).map(|(v, h)| 2.0 * nf * v + h).collect())
}

/// Euclidean projection onto the closed ball of radius `radius`.
pub fn project_to_ball(a: &[f64], radius: f64) -> Vec<f64> {
    let r = crate::numerics::norm(a);
    if r <= radius {
        a.to_vec()
    } else {
        a.iter().map(|v| v * radius / r).collect()
    }
}

/// Sup-norm residual of the `â` fixed point, divided by `N`.
pub fn hat_a_residual(spec: &ProblemSpec, p: &[f64], a: &[f64]) -> f64 {
    let nf = spec.n_agents as f64;
    let mut g = vec![0.0; a.len()];
    grad_fn(spec, a, &mut g);
    let r: Vec<f64> = (0..a.len()).map(|k| a[k] + nf * p[k] + nf * g[k]).collect();
    sup_norm(&r) / nf
}
