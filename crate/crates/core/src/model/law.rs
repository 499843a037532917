//! Product initial laws and their Poincaré constants.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Law of one agent's initial state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AgentLaw {
    Dirac { point: Vec<f64> },
    /// Mean and row-major `d x d` covariance.
    Gaussian { mean: Vec<f64>, cov: Vec<f64> },
    /// Uniform on a box. Only usable in bound computations when a Poincaré
    /// constant is declared.
    Uniform {
        lower: Vec<f64>,
        upper: Vec<f64>,
        poincare: Option<f64>,
    },
}

impl AgentLaw {
    pub fn dim(&self) -> usize {
        match self {
            AgentLaw::Dirac { point } => point.len(),
            AgentLaw::Gaussian { mean, .. } => mean.len(),
            AgentLaw::Uniform { lower, .. } => lower.len(),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            AgentLaw::Dirac { point } => point.clone(),
            AgentLaw::Gaussian { mean, .. } => mean.clone(),
            AgentLaw::Uniform { lower, upper, .. } => {
                lower.iter().zip(upper).map(|(a, b)| 0.5 * (a + b)).collect()
            }
        }
    }

    /// Row-major covariance.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim();
        match self {
            AgentLaw::Dirac { .. } => vec![0.0; d * d],
            AgentLaw::Gaussian { cov, .. } => cov.clone(),
            AgentLaw::Uniform { lower, upper, .. } => {
                let mut c = vec![0.0; d * d];
                for k in 0..d {
                    c[k * d + k] = (upper[k] - lower[k]).powi(2) / 12.0;
                }
                c
            }
        }
    }

    /// Poincaré constant of this block: `0` for a point mass, the largest
    /// covariance eigenvalue for a Gaussian (the inverse of the convexity
    /// modulus of its potential), the declared value otherwise.
    pub fn poincare_constant(&self) -> Result<f64> {
        match self {
            AgentLaw::Dirac { .. } => Ok(0.0),
            AgentLaw::Gaussian { cov, .. } => {
                let d = self.dim();
                let eig = DMatrix::from_row_slice(d, d, cov).symmetric_eigenvalues();
                if eig.min() <= 0.0 {
                    return Err(Error::config(
                        "degenerate Gaussian covariance is not strongly log-concave",
                    ));
                }
                Ok(eig.max())
            }
            AgentLaw::Uniform { poincare, .. } => poincare.ok_or_else(|| {
                Error::Unsupported("uniform initial law without a declared Poincaré constant".into())
            }),
        }
    }

    /// Maps `d` standard normals to a draw from this law. Negating the
    /// normals yields the antithetic draw.
    pub fn transform(&self, z: &[f64], out: &mut [f64]) {
        let d = self.dim();
        match self {
            AgentLaw::Dirac { point } => out.copy_from_slice(point),
            AgentLaw::Gaussian { mean, cov } => {
                let chol = cholesky_lower(cov, d);
                for r in 0..d {
                    out[r] = mean[r] + (0..=r).map(|c| chol[r * d + c] * z[c]).sum::<f64>();
                }
            }
            AgentLaw::Uniform { lower, upper, .. } => {
                for k in 0..d {
                    out[k] = lower[k] + (upper[k] - lower[k]) * std_normal_cdf(z[k]);
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            AgentLaw::Dirac { point } if !finite(point) => Err(Error::config("non-finite Dirac point")),
            AgentLaw::Gaussian { mean, cov } => {
                if cov.len() != d * d || !finite(mean) || !finite(cov) {
                    return Err(Error::config("Gaussian covariance must be a finite d x d matrix"));
                }
                for r in 0..d {
                    for c in 0..d {
                        if (cov[r * d + c] - cov[c * d + r]).abs() > 1e-12 {
                            return Err(Error::config("Gaussian covariance must be symmetric"));
                        }
                    }
                }
                if DMatrix::from_row_slice(d, d, cov).symmetric_eigenvalues().min() < 0.0 {
                    return Err(Error::config("Gaussian covariance must be positive semidefinite"));
                }
                Ok(())
            }
            AgentLaw::Uniform { lower, upper, .. } => {
                if upper.len() != d || lower.iter().zip(upper).any(|(a, b)| !(a < b)) {
                    return Err(Error::config("uniform law needs lower < upper in every coordinate"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Lower Cholesky factor of a PSD matrix, tolerating zero pivots.
fn cholesky_lower(a: &[f64], d: usize) -> Vec<f64> {
    let mut l = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..=r {
            let s: f64 = (0..c).map(|k| l[r * d + k] * l[c * d + k]).sum();
            if r == c {
                l[r * d + r] = (a[r * d + r] - s).max(0.0).sqrt();
            } else if l[c * d + c] > 0.0 {
                l[r * d + c] = (a[r * d + c] - s) / l[c * d + c];
            }
        }
    }
    l
}

/// Standard normal CDF via the complementary error function.
fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Complementary error function (Chebyshev fit, relative error < 1.2e-7).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let r = t * (-z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98 + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77)))))))))
        .exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

/// Product law `μ^1 ⊗ … ⊗ μ^N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialLaw {
    agents: Vec<AgentLaw>,
}

impl InitialLaw {
    pub fn new(agents: Vec<AgentLaw>) -> Result<Self> {
        if agents.is_empty() {
            return Err(Error::config("initial law needs at least one agent"));
        }
        let d = agents[0].dim();
        if d == 0 || agents.iter().any(|a| a.dim() != d) {
            return Err(Error::config("all agent laws must share a positive dimension"));
        }
        for a in &agents {
            a.validate()?;
        }
        Ok(InitialLaw { agents })
    }

    pub fn iid(n: usize, law: AgentLaw) -> Result<Self> {
        Self::new(vec![law; n])
    }

    pub fn agents(&self) -> &[AgentLaw] {
        &self.agents
    }

    pub fn agent(&self, i: usize) -> &AgentLaw {
        &self.agents[i]
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn dim(&self) -> usize {
        self.agents[0].dim()
    }

    /// Stacked mean in `R^{Nd}`.
    pub fn mean(&self) -> Vec<f64> {
        self.agents.iter().flat_map(|a| a.mean()).collect()
    }

    pub fn is_dirac(&self) -> bool {
        self.agents.iter().all(|a| matches!(a, AgentLaw::Dirac { .. }))
    }

    /// Poincaré constant of the product law: the max over blocks.
    pub fn poincare_constant(&self) -> Result<f64> {
        self.agents
            .iter()
            .map(AgentLaw::poincare_constant)
            .try_fold(0.0_f64, |acc, c| c.map(|c| acc.max(c)))
    }
}

/// Free-function form of [`InitialLaw::poincare_constant`].
pub fn poincare_constant(law: &InitialLaw) -> Result<f64> {
    law.poincare_constant()
}
