//! Problem instances: costs, horizon, initial law, and the assumption audit.

mod audit;
pub mod catalog;
mod costs;
mod law;

pub use audit::{audit_assumptions, AuditConfig, AuditItem, AuditReport, AuditStatus};
pub use costs::{CustomRadial, CustomScalar, RadialProfile, ScalarCost, TerminalCost, TerminalKind};
pub use law::{poincare_constant, AgentLaw, InitialLaw};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Symmetric `N x N` table of pairwise profiles with a zero diagonal.
#[derive(Clone, Debug)]
pub struct PairwiseTable {
    n: usize,
    entries: Vec<RadialProfile>,
}

impl PairwiseTable {
    pub fn uniform(n: usize, profile: RadialProfile) -> Self {
        Self::from_upper(n, |_, _| profile.clone())
    }

    /// Builds the table from its strict upper triangle (`i < j`) and mirrors it.
    pub fn from_upper(n: usize, mut profile: impl FnMut(usize, usize) -> RadialProfile) -> Self {
        let mut entries = vec![RadialProfile::Zero; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let p = profile(i, j);
                entries[i * n + j] = p.clone();
                entries[j * n + i] = p;
            }
        }
        PairwiseTable { n, entries }
    }

    /// Takes a full table. The diagonal is forced to zero; an asymmetric
    /// table is rejected.
    pub fn from_full(n: usize, mut entries: Vec<RadialProfile>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::config(format!("pairwise table must have {} entries", n * n)));
        }
        for i in 0..n {
            entries[i * n + i] = RadialProfile::Zero;
            for j in (i + 1)..n {
                if entries[i * n + j] != entries[j * n + i] {
                    return Err(Error::config(format!(
                        "pairwise table is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(PairwiseTable { n, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> &RadialProfile {
        &self.entries[i * self.n + j]
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(RadialProfile::is_zero)
    }

    /// `κ_ij` table when every entry is quadratic.
    pub fn quadratic_kappas(&self) -> Option<Vec<f64>> {
        self.entries.iter().map(RadialProfile::quadratic_kappa).collect()
    }

    /// `Σ_{ij} ‖D²h_ij‖²_∞`.
    pub fn hessian_sq_sum(&self) -> f64 {
        self.entries.iter().map(|p| p.hessian_sup().powi(2)).sum()
    }

    /// `Σ_j ‖D²h_ij‖²_∞` for a fixed row.
    pub fn row_hessian_sq_sum(&self, i: usize) -> f64 {
        (0..self.n).map(|j| self.get(i, j).hessian_sup().powi(2)).sum()
    }

    /// `max_ij sup_{|x| <= radius} |Dh_ij(x)|`.
    pub fn max_grad_on_ball(&self, radius: f64) -> f64 {
        let mut best = 0.0_f64;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                best = best.max(self.get(i, j).grad_sup_on_ball(radius));
            }
        }
        best
    }
}

/// The N-agent problem: dynamics `dX^i = α^i dt + dW^i` on `[t, T]`, running
/// cost `(1/2N) Σ|α^i|² + f^N(α)`, terminal cost `g^N`.
#[derive(Clone, Debug)]
pub struct ProblemSpec {
    pub n_agents: usize,
    pub dim: usize,
    pub horizon: f64,
    pub start_time: f64,
    pub f0: ScalarCost,
    pub pairwise: PairwiseTable,
    pub terminal: TerminalCost,
    pub initial_law: InitialLaw,
}

/// Matrices of the linear-quadratic specialization: `f^N(a) = ½ aᵀQa`,
/// `g^N(x) = ½ xᵀGx`, and `W = I/N + Q` so that `H^N(p) = ½ pᵀW⁻¹p`.
#[derive(Clone, Debug)]
pub struct LqForm {
    pub q: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub w_inv: DMatrix<f64>,
}

impl ProblemSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_agents: usize,
        dim: usize,
        horizon: f64,
        start_time: f64,
        f0: ScalarCost,
        pairwise: PairwiseTable,
        terminal: TerminalCost,
        initial_law: InitialLaw,
    ) -> Result<Self> {
        if n_agents == 0 || dim == 0 {
            return Err(Error::config("need at least one agent and one dimension"));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::config("horizon must be positive"));
        }
        if !(0.0..=horizon).contains(&start_time) {
            return Err(Error::config("start time must lie in [0, T]"));
        }
        if pairwise.n() != n_agents {
            return Err(Error::config("pairwise table size does not match N"));
        }
        if terminal.n_agents() != n_agents || terminal.dim() != dim {
            return Err(Error::config("terminal cost shape does not match (N, d)"));
        }
        if initial_law.n_agents() != n_agents || initial_law.dim() != dim {
            return Err(Error::config("initial law shape does not match (N, d)"));
        }
        Ok(ProblemSpec {
            n_agents,
            dim,
            horizon,
            start_time,
            f0,
            pairwise,
            terminal,
            initial_law,
        })
    }

    /// Same instance started at a different time.
    pub fn with_start_time(&self, start_time: f64) -> Result<Self> {
        let mut s = self.clone();
        if !(0.0..=self.horizon).contains(&start_time) {
            return Err(Error::config("start time must lie in [0, T]"));
        }
        s.start_time = start_time;
        Ok(s)
    }

    pub fn with_initial_law(&self, law: InitialLaw) -> Result<Self> {
        Self::new(
            self.n_agents,
            self.dim,
            self.horizon,
            self.start_time,
            self.f0.clone(),
            self.pairwise.clone(),
            self.terminal.clone(),
            law,
        )
    }

    /// `T - t`.
    pub fn elapsed(&self) -> f64 {
        self.horizon - self.start_time
    }

    pub fn state_len(&self) -> usize {
        self.n_agents * self.dim
    }

    /// `f^N ≡ 0`.
    pub fn interaction_free(&self) -> bool {
        self.f0.is_zero() && self.pairwise.is_zero()
    }

    /// Upper bound on the operator norm of `D²f^N`: Gershgorin on the
    /// weighted pairwise Laplacian plus the `f_0(mean)` part.
    pub fn fn_hessian_bound(&self) -> f64 {
        let n = self.n_agents as f64;
        let max_row = (0..self.n_agents)
            .map(|i| {
                (0..self.n_agents)
                    .map(|j| self.pairwise.get(i, j).hessian_sup())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max);
        4.0 * max_row / (n * n) + self.f0.hessian_sup() / n
    }

    /// The LQ matrices when `f_0 ≡ 0`, every `ĥ_ij` is quadratic and `g^N`
    /// is quadratic.
    pub fn lq_form(&self) -> Option<LqForm> {
        if !self.f0.is_zero() {
            return None;
        }
        let kappas = self.pairwise.quadratic_kappas()?;
        let g = self.terminal.as_quadratic()?.clone();
        let (n, d) = (self.n_agents, self.dim);
        let nf = n as f64;
        let mut q = DMatrix::zeros(n * d, n * d);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let k = kappas[i * n + j] * 2.0 / (nf * nf);
                for c in 0..d {
                    q[(i * d + c, i * d + c)] += k;
                    q[(i * d + c, j * d + c)] -= k;
                }
            }
        }
        let w = DMatrix::identity(n * d, n * d) / nf + &q;
        let w_inv = w.clone().try_inverse()?;
        Some(LqForm { q, g, w, w_inv })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn lq_spec(n: usize, kappa: f64) -> ProblemSpec {
        ProblemSpec::new(
            n,
            1,
            1.0,
            0.0,
            ScalarCost::Zero,
            PairwiseTable::uniform(n, RadialProfile::Quadratic { kappa }),
            TerminalCost::quadratic_scaled(n, 1, 1.0),
            InitialLaw::iid(n, AgentLaw::Dirac { point: vec![0.0] }).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn q_matrix_reproduces_pairwise_sum() {
        let spec = lq_spec(3, 0.7);
        let lq = spec.lq_form().unwrap();
        let a = nalgebra::DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let quad = 0.5 * a.dot(&(&lq.q * &a));
        let mut direct = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                direct += spec.pairwise.get(i, j).eval(&[a[i] - a[j]]);
            }
        }
        assert!((quad - direct / 9.0).abs() < 1e-12);
    }

    #[test]
    fn asymmetric_table_is_rejected() {
        let mut e = vec![RadialProfile::Zero; 4];
        e[1] = RadialProfile::Quadratic { kappa: 1.0 };
        assert!(PairwiseTable::from_full(2, e).is_err());
    }

    #[test]
    fn diagonal_is_forced_to_zero() {
        let e = vec![RadialProfile::Quadratic { kappa: 1.0 }; 4];
        let t = PairwiseTable::from_full(2, e).unwrap();
        assert!(t.get(0, 0).is_zero() && !t.get(0, 1).is_zero());
    }

    #[test]
    fn shape_mismatch_is_a_config_error() {
        let spec = lq_spec(2, 0.5);
        let r = ProblemSpec::new(
            3,
            1,
            1.0,
            0.0,
            ScalarCost::Zero,
            spec.pairwise.clone(),
            spec.terminal.clone(),
            spec.initial_law.clone(),
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
