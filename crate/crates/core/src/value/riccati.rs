use nalgebra::DMatrix;

use crate::dynamics::{AgentCovectorFn, CovectorSource, Ensemble, FullInfoPolicy};
use crate::error::{Error, Result};
use crate::model::{InitialLaw, LqForm, ProblemSpec};

/// `V(t, x) = ½ xᵀP(t)x + s(t)` on a uniform grid of `[t_0, T]`.
#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    /// Ascending, from the start time to the horizon.
    pub times: Vec<f64>,
    pub p: Vec<DMatrix<f64>>,
    pub s: Vec<f64>,
    pub lq: LqForm,
    pub n_agents: usize,
    pub dim: usize,
}

/// Default number of RK4 steps.
pub const RICCATI_STEPS: usize = 1000;

/// Integrates `Ṗ = P W⁻¹ P`, `P(T) = G`, `ṡ = -½ tr P`, `s(T) = 0` backward
/// with RK4.
pub fn riccati_full(spec: &ProblemSpec, n_steps: usize) -> Result<RiccatiSolution> {
    let lq = spec
        .lq_form()
        .ok_or_else(|| Error::Unsupported("Riccati solution needs f_0 = 0, quadratic ĥ and quadratic g".into()))?;
    if n_steps == 0 {
        return Err(Error::config("Riccati solver needs at least one step"));
    }
    let h = spec.elapsed() / n_steps as f64;
    // in reversed time τ = T - t: dP/dτ = -P W⁻¹ P, ds/dτ = ½ tr P
    let rhs = |p: &DMatrix<f64>| -(p * &lq.w_inv * p);
    let mut p = lq.g.clone();
    let mut s = 0.0;
    let mut ps = vec![p.clone()];
    let mut ss = vec![s];
    for _ in 0..n_steps {
        let k1 = rhs(&p);
        let p2 = &p + &k1 * (h / 2.0);
        let k2 = rhs(&p2);
        let p3 = &p + &k2 * (h / 2.0);
        let k3 = rhs(&p3);
        let p4 = &p + &k3 * h;
        let k4 = rhs(&p4);
        s += h / 6.0 * 0.5 * (p.trace() + 2.0 * p2.trace() + 2.0 * p3.trace() + p4.trace());
        p = &p + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        p = (&p + p.transpose()) * 0.5;
        ps.push(p.clone());
        ss.push(s);
    }
    ps.reverse();
    ss.reverse();
    let times = (0..=n_steps).map(|k| spec.start_time + k as f64 * h).collect();
    Ok(RiccatiSolution {
        times,
        p: ps,
        s: ss,
        lq,
        n_agents: spec.n_agents,
        dim: spec.dim,
    })
}

impl RiccatiSolution {
    fn locate(&self, t: f64) -> (usize, f64) {
        let t0 = self.times[0];
        let n = self.times.len() - 1;
        let h = (self.times[n] - t0) / n as f64;
        let u = ((t - t0) / h).clamp(0.0, n as f64);
        let k = (u.floor() as usize).min(n - 1);
        (k, u - k as f64)
    }

    fn p_dot(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        p * &self.lq.w_inv * p
    }

    /// `P(t)` by cubic Hermite interpolation using `Ṗ = P W⁻¹ P`.
    pub fn p_at(&self, t: f64) -> DMatrix<f64> {
        let (k, u) = self.locate(t);
        if u == 0.0 {
            return self.p[k].clone();
        }
        let h = self.times[k + 1] - self.times[k];
        let (h00, h10, h01, h11) = hermite(u);
        let (a, b) = (&self.p[k], &self.p[k + 1]);
        a * h00 + self.p_dot(a) * (h10 * h) + b * h01 + self.p_dot(b) * (h11 * h)
    }

    pub fn s_at(&self, t: f64) -> f64 {
        let (k, u) = self.locate(t);
        let h = self.times[k + 1] - self.times[k];
        let (h00, h10, h01, h11) = hermite(u);
        let d = |p: &DMatrix<f64>| -0.5 * p.trace();
        self.s[k] * h00 + d(&self.p[k]) * h10 * h + self.s[k + 1] * h01 + d(&self.p[k + 1]) * h11 * h
    }

    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        let p = self.p_at(t);
        let v = nalgebra::DVector::from_column_slice(x);
        0.5 * v.dot(&(&p * &v)) + self.s_at(t)
    }

    /// `DV(t, x) = P(t) x`.
    pub fn gradient(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let v = nalgebra::DVector::from_column_slice(x);
        (self.p_at(t) * v).as_slice().to_vec()
    }

    /// Feedback gain `W⁻¹ P(t)` of the optimal control `α = -W⁻¹P(t) x`.
    pub fn gain_at(&self, t: f64) -> DMatrix<f64> {
        &self.lq.w_inv * self.p_at(t)
    }

    /// `∫ V(t, x) μ(dx) = ½ mᵀPm + ½ Σ_i tr(P_ii Σ_i) + s` for a product law
    /// with block means `m_i` and covariances `Σ_i`.
    pub fn lift(&self, t: f64, law: &InitialLaw) -> f64 {
        let p = self.p_at(t);
        let d = self.dim;
        let m = law.mean();
        let mut v = 0.0;
        for r in 0..m.len() {
            for c in 0..m.len() {
                v += 0.5 * m[r] * p[(r, c)] * m[c];
            }
        }
        for (i, agent) in law.agents().iter().enumerate() {
            let cov = agent.covariance();
            for r in 0..d {
                for c in 0..d {
                    v += 0.5 * p[(i * d + r, i * d + c)] * cov[c * d + r];
                }
            }
        }
        v + self.s_at(t)
    }

    /// Eigenvalue range of `P` over the stored grid.
    pub fn eigen_range(&self) -> (f64, f64) {
        self.p.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            let e = p.clone().symmetric_eigenvalues();
            (lo.min(e.min()), hi.max(e.max()))
        })
    }
}

fn hermite(u: f64) -> (f64, f64, f64, f64) {
    let u2 = u * u;
    let u3 = u2 * u;
    (2.0 * u3 - 3.0 * u2 + 1.0, u3 - 2.0 * u2 + u, -2.0 * u3 + 3.0 * u2, u3 - u2)
}

/// The optimal full-information feedback `α = -W⁻¹P(t)x`, with gains
/// precomputed on a uniform simulation grid.
pub struct RiccatiFeedback {
    t0: f64,
    dt: f64,
    gains: Vec<DMatrix<f64>>,
    sol: RiccatiSolution,
}

impl RiccatiFeedback {
    pub fn new(sol: &RiccatiSolution, t0: f64, horizon: f64, n_steps: usize) -> Self {
        let dt = (horizon - t0) / n_steps.max(1) as f64;
        let gains = (0..=n_steps).map(|k| sol.gain_at(t0 + k as f64 * dt)).collect();
        RiccatiFeedback {
            t0,
            dt,
            gains,
            sol: sol.clone(),
        }
    }
}

impl FullInfoPolicy for RiccatiFeedback {
    fn control(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let u = (t - self.t0) / self.dt;
        let k = u.round();
        let owned;
        let gain = if (u - k).abs() < 1e-9 && k >= 0.0 && (k as usize) < self.gains.len() {
            &self.gains[k as usize]
        } else {
            owned = self.sol.gain_at(t);
            &owned
        };
        for (r, o) in out.iter_mut().enumerate() {
            *o = -(0..x.len()).map(|c| gain[(r, c)] * x[c]).sum::<f64>();
        }
        Ok(())
    }
}

/// `q^i(x) = D_{m^i}𝒱(t, m)(x) = P_ii(t) x + Σ_{j≠i} P_ij(t) m̄_j`, the
/// derivative of the lifted quadratic value in agent `i`'s marginal.
impl CovectorSource for RiccatiSolution {
    fn at<'a>(&'a self, t: f64, law: &Ensemble) -> Result<AgentCovectorFn<'a>> {
        let p = self.p_at(t);
        let (n, d) = (self.n_agents, self.dim);
        let means = law.states.column_means();
        let mut blocks = vec![0.0; n * d * d];
        let mut offsets = vec![0.0; n * d];
        for i in 0..n {
            for r in 0..d {
                for c in 0..d {
                    blocks[(i * d + r) * d + c] = p[(i * d + r, i * d + c)];
                }
                for j in (0..n).filter(|j| *j != i) {
                    for c in 0..d {
                        offsets[i * d + r] += p[(i * d + r, j * d + c)] * means[j * d + c];
                    }
                }
            }
        }
        Ok(Box::new(move |i, x, out| {
            for r in 0..d {
                out[r] = offsets[i * d + r] + (0..d).map(|c| blocks[(i * d + r) * d + c] * x[c]).sum::<f64>();
            }
        }))
    }
}
