//! Optimal affine distributed feedback `α^i = -K_i(t) x^i - b_i(t)` for the
//! LQ problem. Agents stay independent under such controls, so the expected
//! cost is an exact functional of per-agent means `m_i` and covariances
//! `S_i`:
//!
//! ```text
//! ṁ_i = -K_i m_i - b_i,   Ṡ_i = -K_i S_i - S_i K_iᵀ + I,
//! ℓ   = ½ μᵀ W μ + ½ Σ_i tr(W_ii K_i S_i K_iᵀ),   μ_i = -K_i m_i - b_i,
//! Φ   = ½ mᵀ G m + ½ Σ_i tr(G_ii S_i).
//! ```
//!
//! The gains are piecewise linear on uniform knots; the moment ODE is
//! integrated with RK4 and differentiated exactly by the discrete adjoint.

use serde::{Deserialize, Serialize};

use super::{ValueEstimate, ValueMethod};
use crate::dynamics::DistributedPolicy;
use crate::error::{Error, Result};
use crate::model::ProblemSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistLqConfig {
    /// Number of knot intervals for the gains and offsets.
    pub knots: usize,
    /// RK4 steps per knot interval.
    pub steps_per_knot: usize,
    pub max_iters: usize,
    /// Target sup-norm of the gradient.
    pub grad_tol: f64,
    /// L-BFGS memory.
    pub memory: usize,
}

impl Default for DistLqConfig {
    fn default() -> Self {
        DistLqConfig {
            knots: 20,
            steps_per_knot: 50,
            max_iters: 2000,
            grad_tol: 1e-8,
            memory: 12,
        }
    }
}

/// Knot values of the affine distributed feedback.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistPolicyParams {
    pub knot_times: Vec<f64>,
    pub n_agents: usize,
    pub dim: usize,
    /// `[knot][agent][d x d]`, row-major.
    pub gains: Vec<f64>,
    /// `[knot][agent][d]`.
    pub offsets: Vec<f64>,
}

impl DistPolicyParams {
    fn locate(&self, t: f64) -> (usize, f64) {
        let n = self.knot_times.len() - 1;
        let t0 = self.knot_times[0];
        let h = (self.knot_times[n] - t0) / n as f64;
        let u = ((t - t0) / h).clamp(0.0, n as f64);
        let j = (u.floor() as usize).min(n - 1);
        (j, u - j as f64)
    }

    pub fn gain(&self, i: usize, t: f64) -> Vec<f64> {
        let (j, w) = self.locate(t);
        let (n, dd) = (self.n_agents, self.dim * self.dim);
        let a = &self.gains[(j * n + i) * dd..(j * n + i + 1) * dd];
        let b = &self.gains[((j + 1) * n + i) * dd..((j + 1) * n + i + 1) * dd];
        a.iter().zip(b).map(|(x, y)| (1.0 - w) * x + w * y).collect()
    }

    pub fn offset(&self, i: usize, t: f64) -> Vec<f64> {
        let (j, w) = self.locate(t);
        let (n, d) = (self.n_agents, self.dim);
        let a = &self.offsets[(j * n + i) * d..(j * n + i + 1) * d];
        let b = &self.offsets[((j + 1) * n + i) * d..((j + 1) * n + i + 1) * d];
        a.iter().zip(b).map(|(x, y)| (1.0 - w) * x + w * y).collect()
    }
}

impl DistributedPolicy for DistPolicyParams {
    fn control(&self, agent: usize, t: f64, x_i: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.dim;
        let k = self.gain(agent, t);
        let b = self.offset(agent, t);
        for r in 0..d {
            out[r] = -b[r] - (0..d).map(|c| k[r * d + c] * x_i[c]).sum::<f64>();
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DistLqResult {
    pub params: DistPolicyParams,
    pub value: ValueEstimate,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// The moment-ODE objective and its discrete adjoint.
pub(crate) struct MomentProblem {
    n: usize,
    d: usize,
    w: Vec<f64>,
    g: Vec<f64>,
    m0: Vec<f64>,
    s0: Vec<f64>,
    knots: usize,
    steps_per_knot: usize,
    h: f64,
}

struct Cotangent {
    state: Vec<f64>,
    gain: Vec<f64>,
    offset: Vec<f64>,
}

impl MomentProblem {
    pub(crate) fn new(spec: &ProblemSpec, cfg: &DistLqConfig) -> Result<Self> {
        let lq = spec
            .lq_form()
            .ok_or_else(|| Error::Unsupported("distributed LQ optimizer needs an LQ instance".into()))?;
        if cfg.knots == 0 || cfg.steps_per_knot == 0 {
            return Err(Error::config("knots and steps_per_knot must be positive"));
        }
        let (n, d) = (spec.n_agents, spec.dim);
        let nd = n * d;
        let mut s0 = Vec::with_capacity(n * d * d);
        for a in spec.initial_law.agents() {
            s0.extend(a.covariance());
        }
        Ok(MomentProblem {
            n,
            d,
            w: (0..nd * nd).map(|k| lq.w[(k / nd, k % nd)]).collect(),
            g: (0..nd * nd).map(|k| lq.g[(k / nd, k % nd)]).collect(),
            m0: spec.initial_law.mean(),
            s0,
            knots: cfg.knots,
            steps_per_knot: cfg.steps_per_knot,
            h: spec.elapsed() / (cfg.knots * cfg.steps_per_knot) as f64,
        })
    }

    fn n_gain(&self) -> usize {
        (self.knots + 1) * self.n * self.d * self.d
    }

    pub(crate) fn n_params(&self) -> usize {
        self.n_gain() + (self.knots + 1) * self.n * self.d
    }

    fn state_len(&self) -> usize {
        self.n * self.d + self.n * self.d * self.d + 1
    }

    fn steps(&self) -> usize {
        self.knots * self.steps_per_knot
    }

    /// Knot interval and weight for stage time `step + frac` (in steps).
    fn knot_weight(&self, step: usize, frac: f64) -> (usize, f64) {
        let j = step / self.steps_per_knot;
        let w = ((step % self.steps_per_knot) as f64 + frac) / self.steps_per_knot as f64;
        (j, w)
    }

    fn params_at(&self, theta: &[f64], j: usize, w: f64) -> (Vec<f64>, Vec<f64>) {
        let (n, d) = (self.n, self.d);
        let kl = n * d * d;
        let bl = n * d;
        let ng = self.n_gain();
        let k = (0..kl)
            .map(|r| (1.0 - w) * theta[j * kl + r] + w * theta[(j + 1) * kl + r])
            .collect();
        let b = (0..bl)
            .map(|r| (1.0 - w) * theta[ng + j * bl + r] + w * theta[ng + (j + 1) * bl + r])
            .collect();
        (k, b)
    }

    /// Right-hand side; `μ` and `Wμ` are returned for reuse.
    fn rhs(&self, y: &[f64], k: &[f64], b: &[f64], out: &mut [f64]) -> (Vec<f64>, Vec<f64>) {
        let (n, d) = (self.n, self.d);
        let nd = n * d;
        let dd = d * d;
        let (m, rest) = y.split_at(nd);
        let s = &rest[..n * dd];
        let mut mu = vec![0.0; nd];
        for i in 0..n {
            let ki = &k[i * dd..(i + 1) * dd];
            for r in 0..d {
                mu[i * d + r] = -b[i * d + r] - (0..d).map(|c| ki[r * d + c] * m[i * d + c]).sum::<f64>();
            }
        }
        let wmu: Vec<f64> = (0..nd)
            .map(|r| (0..nd).map(|c| self.w[r * nd + c] * mu[c]).sum())
            .collect();
        let mut ell = 0.5 * mu.iter().zip(&wmu).map(|(a, b)| a * b).sum::<f64>();
        out[..nd].copy_from_slice(&mu);
        let mut ks = vec![0.0; dd];
        for i in 0..n {
            let ki = &k[i * dd..(i + 1) * dd];
            let si = &s[i * dd..(i + 1) * dd];
            matmul(ki, si, d, &mut ks);
            let os = &mut out[nd + i * dd..nd + (i + 1) * dd];
            for r in 0..d {
                for c in 0..d {
                    // -K S - S Kᵀ + I, and S Kᵀ = (K S)ᵀ for symmetric S
                    os[r * d + c] = -ks[r * d + c] - ks[c * d + r] + if r == c { 1.0 } else { 0.0 };
                }
            }
            // ½ tr(R K S Kᵀ)
            for r in 0..d {
                for c in 0..d {
                    let rkc: f64 = (0..d).map(|l| self.w_block(i, r, l) * ki[l * d + c]).sum();
                    let skt: f64 = (0..d).map(|l| si[c * d + l] * ki[r * d + l]).sum();
                    ell += 0.5 * rkc * skt;
                }
            }
        }
        out[nd + n * dd] = ell;
        (mu, wmu)
    }

    #[inline]
    fn w_block(&self, i: usize, r: usize, c: usize) -> f64 {
        let nd = self.n * self.d;
        self.w[(i * self.d + r) * nd + i * self.d + c]
    }

    /// Vector-Jacobian product of the right-hand side with cotangent `kap`.
    fn vjp(&self, y: &[f64], k: &[f64], b: &[f64], kap: &[f64]) -> Cotangent {
        let (n, d) = (self.n, self.d);
        let nd = n * d;
        let dd = d * d;
        let mut scratch = vec![0.0; self.state_len()];
        let (_, wmu) = self.rhs(y, k, b, &mut scratch);
        let m = &y[..nd];
        let s = &y[nd..nd + n * dd];
        let kc = kap[nd + n * dd];
        let mut state = vec![0.0; self.state_len()];
        let mut gain = vec![0.0; n * dd];
        let mut offset = vec![0.0; nd];
        for i in 0..n {
            let ki = &k[i * dd..(i + 1) * dd];
            let si = &s[i * dd..(i + 1) * dd];
            let ks_ = &kap[nd + i * dd..nd + (i + 1) * dd];
            let gk = &mut gain[i * dd..(i + 1) * dd];
            // ζ = ∂/∂μ_i
            let zeta: Vec<f64> = (0..d).map(|r| kap[i * d + r] + kc * wmu[i * d + r]).collect();
            for c in 0..d {
                state[i * d + c] = -(0..d).map(|r| ki[r * d + c] * zeta[r]).sum::<f64>();
            }
            for r in 0..d {
                offset[i * d + r] = -zeta[r];
                for c in 0..d {
                    gk[r * d + c] -= zeta[r] * m[i * d + c];
                }
            }
            // Ṡ = -K S - S Kᵀ + I
            let sn = &mut state[nd + i * dd..nd + (i + 1) * dd];
            for r in 0..d {
                for c in 0..d {
                    let mut v = 0.0;
                    let mut gkv = 0.0;
                    for l in 0..d {
                        v -= ki[l * d + r] * ks_[l * d + c] + ks_[r * d + l] * ki[l * d + c];
                        gkv -= ks_[r * d + l] * si[c * d + l] + ks_[l * d + r] * si[l * d + c];
                    }
                    sn[r * d + c] += v;
                    gk[r * d + c] += gkv;
                }
            }
            // ½ tr(R K S Kᵀ): ∂S = ½ KᵀRK, ∂K = ½(RKS + RᵀKSᵀ)
            if kc != 0.0 {
                let mut rk = vec![0.0; dd];
                let mut rtk = vec![0.0; dd];
                for r in 0..d {
                    for c in 0..d {
                        rk[r * d + c] = (0..d).map(|l| self.w_block(i, r, l) * ki[l * d + c]).sum();
                        rtk[r * d + c] = (0..d).map(|l| self.w_block(i, l, r) * ki[l * d + c]).sum();
                    }
                }
                for r in 0..d {
                    for c in 0..d {
                        let kt_rk: f64 = (0..d).map(|l| ki[l * d + r] * rk[l * d + c]).sum();
                        sn[r * d + c] += kc * 0.5 * kt_rk;
                        let a: f64 = (0..d).map(|l| rk[r * d + l] * si[l * d + c]).sum();
                        let bb: f64 = (0..d).map(|l| rtk[r * d + l] * si[c * d + l]).sum();
                        gk[r * d + c] += kc * 0.5 * (a + bb);
                    }
                }
            }
        }
        Cotangent { state, gain, offset }
    }

    fn initial_state(&self) -> Vec<f64> {
        let mut y = Vec::with_capacity(self.state_len());
        y.extend_from_slice(&self.m0);
        y.extend_from_slice(&self.s0);
        y.push(0.0);
        y
    }

    fn terminal(&self, y: &[f64]) -> f64 {
        let (n, d) = (self.n, self.d);
        let nd = n * d;
        let m = &y[..nd];
        let mut v = y[self.state_len() - 1];
        for r in 0..nd {
            for c in 0..nd {
                v += 0.5 * m[r] * self.g[r * nd + c] * m[c];
            }
        }
        for i in 0..n {
            for r in 0..d {
                for c in 0..d {
                    v += 0.5 * self.g[(i * d + r) * nd + i * d + c] * y[nd + i * d * d + c * d + r];
                }
            }
        }
        v
    }

    fn rk4_step(&self, theta: &[f64], step: usize, y: &[f64]) -> [Vec<f64>; 5] {
        let h = self.h;
        let len = self.state_len();
        let stage = |frac: f64, yy: &[f64]| {
            let (j, w) = self.knot_weight(step, frac);
            let (k, b) = self.params_at(theta, j, w);
            let mut out = vec![0.0; len];
            self.rhs(yy, &k, &b, &mut out);
            out
        };
        let axpy = |a: &[f64], s: f64, x: &[f64]| a.iter().zip(x).map(|(u, v)| u + s * v).collect::<Vec<f64>>();
        let k1 = stage(0.0, y);
        let y2 = axpy(y, h / 2.0, &k1);
        let k2 = stage(0.5, &y2);
        let y3 = axpy(y, h / 2.0, &k2);
        let k3 = stage(0.5, &y3);
        let y4 = axpy(y, h, &k3);
        let k4 = stage(1.0, &y4);
        let next = (0..len)
            .map(|r| y[r] + h / 6.0 * (k1[r] + 2.0 * k2[r] + 2.0 * k3[r] + k4[r]))
            .collect();
        [y.to_vec(), y2, y3, y4, next]
    }

    #[cfg(test)]
    pub(crate) fn value(&self, theta: &[f64]) -> f64 {
        let mut y = self.initial_state();
        for step in 0..self.steps() {
            let [.., next] = self.rk4_step(theta, step, &y);
            y = next;
        }
        self.terminal(&y)
    }

    pub(crate) fn value_and_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let (n, d) = (self.n, self.d);
        let nd = n * d;
        let dd = d * d;
        let mut ys = Vec::with_capacity(self.steps() + 1);
        ys.push(self.initial_state());
        for step in 0..self.steps() {
            let [.., next] = self.rk4_step(theta, step, &ys[step]);
            ys.push(next);
        }
        let y_t = ys.last().unwrap();
        let value = self.terminal(y_t);

        let len = self.state_len();
        let mut lam = vec![0.0; len];
        for r in 0..nd {
            lam[r] = (0..nd).map(|c| self.g[r * nd + c] * y_t[c]).sum();
        }
        for i in 0..n {
            for r in 0..d {
                for c in 0..d {
                    lam[nd + i * dd + r * d + c] = 0.5 * self.g[(i * d + r) * nd + i * d + c];
                }
            }
        }
        lam[len - 1] = 1.0;
        grad.fill(0.0);
        let ng = self.n_gain();
        let h = self.h;
        let bw = [1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0];
        let fracs = [0.0, 0.5, 0.5, 1.0];
        // coefficient of stage s-1's slope in stage s's input
        let a_prev = [0.0, 0.5, 0.5, 1.0];
        for step in (0..self.steps()).rev() {
            let stages = self.rk4_step(theta, step, &ys[step]);
            let mut nus: [Vec<f64>; 4] = Default::default();
            let mut nu_next: Option<Vec<f64>> = None;
            for s in (0..4).rev() {
                let mut kap: Vec<f64> = lam.iter().map(|l| h * bw[s] * l).collect();
                if let Some(nn) = &nu_next {
                    let a = a_prev[s + 1];
                    for (k, v) in kap.iter_mut().zip(nn) {
                        *k += h * a * v;
                    }
                }
                let (j, w) = self.knot_weight(step, fracs[s]);
                let (kk, bb) = self.params_at(theta, j, w);
                let ct = self.vjp(&stages[s], &kk, &bb, &kap);
                for r in 0..n * dd {
                    grad[j * n * dd + r] += (1.0 - w) * ct.gain[r];
                    grad[(j + 1) * n * dd + r] += w * ct.gain[r];
                }
                for r in 0..nd {
                    grad[ng + j * nd + r] += (1.0 - w) * ct.offset[r];
                    grad[ng + (j + 1) * nd + r] += w * ct.offset[r];
                }
                nu_next = Some(ct.state.clone());
                nus[s] = ct.state;
            }
            for nu in &nus {
                for (l, v) in lam.iter_mut().zip(nu) {
                    *l += v;
                }
            }
        }
        value
    }
}

fn matmul(a: &[f64], b: &[f64], d: usize, out: &mut [f64]) {
    for r in 0..d {
        for c in 0..d {
            out[r * d + c] = (0..d).map(|l| a[r * d + l] * b[l * d + c]).sum();
        }
    }
}

/// Limited-memory BFGS with Armijo backtracking.
pub(crate) struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub(crate) fn lbfgs(
    mut f: impl FnMut(&[f64], &mut [f64]) -> f64,
    x0: Vec<f64>,
    memory: usize,
    max_iters: usize,
    grad_tol: f64,
) -> LbfgsOutcome {
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut hist: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();
    let sup = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let mut iterations = 0;
    let mut xn = vec![0.0; n];
    let mut gn = vec![0.0; n];
    while iterations < max_iters && sup(&g) > grad_tol {
        iterations += 1;
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            for k in 0..n {
                q[k] -= a * y[k];
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for k in 0..n {
                q[k] += (a - b) * s[k];
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            hist.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            for k in 0..n {
                xn[k] = x[k] + step * dir[k];
            }
            let fnew = f(&xn, &mut gn);
            if fnew.is_finite() && fnew <= fx + 1e-4 * step * slope {
                let s: Vec<f64> = (0..n).map(|k| xn[k] - x[k]).collect();
                let y: Vec<f64> = (0..n).map(|k| gn[k] - g[k]).collect();
                let sy = dot(&s, &y);
                if sy > 1e-16 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
                    hist.push_back((s, y, 1.0 / sy));
                    if hist.len() > memory {
                        hist.pop_front();
                    }
                }
                std::mem::swap(&mut x, &mut xn);
                std::mem::swap(&mut g, &mut gn);
                fx = fnew;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let grad_norm = sup(&g);
    LbfgsOutcome {
        x,
        value: fx,
        grad_norm,
        iterations,
        converged: grad_norm <= grad_tol,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Optimizes the affine distributed feedback of an LQ instance. The
/// returned value is exact for the returned policy (up to RK4 error) and an
/// upper bound on the distributed value.
pub fn solve_dist_lq(spec: &ProblemSpec, cfg: &DistLqConfig) -> Result<DistLqResult> {
    let prob = MomentProblem::new(spec, cfg)?;
    let out = lbfgs(
        |x, g| prob.value_and_grad(x, g),
        vec![0.0; prob.n_params()],
        cfg.memory.max(1),
        cfg.max_iters,
        cfg.grad_tol,
    );
    if !out.converged {
        log::warn!(
            "affine distributed optimizer stalled after {} iterations: gradient {:e}, value {}",
            out.iterations,
            out.grad_norm,
            out.value
        );
    }
    let (n, d) = (spec.n_agents, spec.dim);
    let ng = prob.n_gain();
    let knot_times = (0..=cfg.knots)
        .map(|j| spec.start_time + j as f64 * spec.elapsed() / cfg.knots as f64)
        .collect();
    Ok(DistLqResult {
        params: DistPolicyParams {
            knot_times,
            n_agents: n,
            dim: d,
            gains: out.x[..ng].to_vec(),
            offsets: out.x[ng..].to_vec(),
        },
        value: ValueEstimate::exact(out.value, ValueMethod::PolicyOpt),
        grad_norm: out.grad_norm,
        iterations: out.iterations,
        converged: out.converged,
    })
}
