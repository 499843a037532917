//! The three value objects: the full-information value `V^N` (Riccati in the
//! LQ case, a grid HJB solver in tiny dimension, Monte Carlo for any
//! policy), the lifted value `𝒱^N(t, μ) = ∫ V^N(t, x) μ(dx)`, and upper
//! bounds on the distributed value `𝒱^N_dist`.

mod check;
mod dist_lq;
mod grid;
mod riccati;

pub use check::{build_check_policy, CheckPolicyResult};
pub use dist_lq::{solve_dist_lq, DistLqConfig, DistLqResult, DistPolicyParams};
pub use grid::{grid_hjb_full, GridConfig, GridCovector, GridSolution, TimeStep};
pub use riccati::{riccati_full, RiccatiFeedback, RiccatiSolution, RICCATI_STEPS};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate, Ensemble, IntegratorConfig, PolicyHandle};
use crate::error::{Error, Result};
use crate::model::{AgentLaw, InitialLaw, ProblemSpec};
use crate::numerics::{Estimate, BATCHES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueMethod {
    Mc,
    Riccati,
    Grid,
    PolicyOpt,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub value: f64,
    pub std_err: f64,
    pub paths: usize,
    pub method: ValueMethod,
}

impl ValueEstimate {
    pub fn exact(value: f64, method: ValueMethod) -> Self {
        ValueEstimate {
            value,
            std_err: 0.0,
            paths: 0,
            method,
        }
    }

    pub fn from_estimate(e: Estimate, paths: usize, method: ValueMethod) -> Self {
        ValueEstimate {
            value: e.value,
            std_err: e.std_err,
            paths,
            method,
        }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate {
            value: self.value,
            std_err: self.std_err,
        }
    }
}

/// Monte Carlo estimate of the total cost of `policy` from `ens0`.
pub fn mc_cost(spec: &ProblemSpec, policy: &PolicyHandle<'_>, ens0: &Ensemble, cfg: &IntegratorConfig) -> Result<ValueEstimate> {
    let traj = simulate(spec, policy, ens0, cfg)?;
    let term = traj.terminal();
    let totals: Vec<f64> = (0..term.paths())
        .into_par_iter()
        .map(|k| traj.running_cost[k] + spec.terminal.value(term.row(k)))
        .collect();
    Ok(ValueEstimate::from_estimate(
        Estimate::batch_means(&totals, BATCHES),
        term.paths(),
        ValueMethod::Mc,
    ))
}

/// A tabulated or closed-form full-information value function.
#[derive(Clone, Copy)]
pub enum ValueFunction<'a> {
    Riccati(&'a RiccatiSolution),
    Grid(&'a GridSolution),
}

/// `∫ V(t, x) μ(dx)` for a product law: exact Gaussian moments against the
/// quadratic Riccati value, tensor quadrature against a grid value.
pub fn lift_value(v: ValueFunction<'_>, t: f64, law: &InitialLaw) -> Result<f64> {
    match v {
        ValueFunction::Riccati(sol) => Ok(sol.lift(t, law)),
        ValueFunction::Grid(grid) => {
            let dims = grid.dims();
            if law.n_agents() * law.dim() != dims {
                return Err(Error::config("law dimension does not match the grid"));
            }
            let rules: Vec<Vec<(Vec<f64>, f64)>> = law
                .agents()
                .iter()
                .map(|a| agent_rule(a, grid))
                .collect::<Result<_>>()?;
            let mut total = 0.0;
            let mut idx = vec![0usize; rules.len()];
            let mut x = Vec::with_capacity(dims);
            loop {
                x.clear();
                let mut w = 1.0;
                for (r, &i) in rules.iter().zip(&idx) {
                    x.extend_from_slice(&r[i].0);
                    w *= r[i].1;
                }
                total += w * grid.value(t, &x)?;
                let mut k = 0;
                loop {
                    if k == idx.len() {
                        return Ok(total);
                    }
                    idx[k] += 1;
                    if idx[k] < rules[k].len() {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                }
            }
        }
    }
}

/// Quadrature nodes and weights for one agent's law.
fn agent_rule(law: &AgentLaw, grid: &GridSolution) -> Result<Vec<(Vec<f64>, f64)>> {
    let d = law.dim();
    match law {
        AgentLaw::Dirac { point } => Ok(vec![(point.clone(), 1.0)]),
        AgentLaw::Gaussian { .. } if d == 1 => {
            let mean = law.mean()[0];
            let sd = law.covariance()[0].sqrt();
            // largest Gauss–Hermite rule whose nodes stay inside the box
            for n in (2..=16).rev() {
                let rule = gauss_hermite(n);
                let nodes: Vec<(Vec<f64>, f64)> = rule.iter().map(|(z, w)| (vec![mean + sd * z], *w)).collect();
                if nodes.iter().all(|(x, _)| x[0] >= grid.lower[0] - 1e-12 && x[0] <= grid.upper()[0] + 1e-12) {
                    return Ok(nodes);
                }
            }
            Err(Error::config("Gaussian law is too wide for the grid box"))
        }
        _ => Err(Error::Unsupported(
            "grid quadrature supports Dirac laws and one-dimensional Gaussians".into(),
        )),
    }
}

/// Probabilists' Gauss–Hermite rule (weights sum to one) by Golub–Welsch.
pub(crate) fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
    let mut j = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = j.symmetric_eigen();
    let mut rule: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    rule.sort_by(|a, b| a.0.total_cmp(&b.0));
    rule
}

#[cfg(test)]
pub(crate) mod test_support {
    use crate::model::{AgentLaw, InitialLaw, PairwiseTable, ProblemSpec, RadialProfile, ScalarCost, TerminalCost};

    /// LQ instance with uniform `κ`, `G = (c/N) I` and i.i.d. initial law.
    pub(crate) fn lq(n: usize, d: usize, kappa: f64, c: f64, law: AgentLaw) -> ProblemSpec {
        ProblemSpec::new(
            n,
            d,
            1.0,
            0.0,
            ScalarCost::Zero,
            PairwiseTable::uniform(n, RadialProfile::Quadratic { kappa }),
            TerminalCost::quadratic_scaled(n, d, c),
            InitialLaw::iid(n, law).unwrap(),
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::lq;
    use super::*;
    use crate::dynamics::{DistributedFn, NoiseSource, ZeroPolicy};
    use crate::hamiltonian::FixedPointConfig;
    use crate::dynamics::TimeConvention;

    fn dirac0() -> AgentLaw {
        AgentLaw::Dirac { point: vec![0.0] }
    }

    #[test]
    fn zero_policy_quadratic_terminal() {
        let s = lq(3, 1, 0.0, 1.0, dirac0());
        let ens = Ensemble::sample(&s.initial_law, 0.0, 20_000, &NoiseSource::new(1, false)).unwrap();
        let v = mc_cost(&s, &PolicyHandle::Distributed(&ZeroPolicy), &ens, &IntegratorConfig::new(10, 2)).unwrap();
        assert!((v.value - 0.5).abs() < 3.0 * v.std_err, "{v:?}");
        assert_eq!(v.paths, 20_000);
    }

    #[test]
    fn zero_cost_instance_costs_nothing() {
        let s = lq(2, 1, 0.0, 0.0, dirac0());
        let ens = Ensemble::sample(&s.initial_law, 0.0, 100, &NoiseSource::new(1, false)).unwrap();
        let v = mc_cost(&s, &PolicyHandle::Distributed(&ZeroPolicy), &ens, &IntegratorConfig::new(10, 2)).unwrap();
        assert_eq!((v.value, v.std_err), (0.0, 0.0));
    }

    #[test]
    fn riccati_feedback_attains_riccati_value() {
        let s = lq(2, 1, 0.5, 1.0, AgentLaw::Gaussian { mean: vec![0.0], cov: vec![1.0] });
        let ric = riccati_full(&s, RICCATI_STEPS).unwrap();
        let steps = 200;
        let fb = RiccatiFeedback::new(&ric, 0.0, 1.0, steps);
        let ens = Ensemble::sample(&s.initial_law, 0.0, 40_000, &NoiseSource::new(3, true)).unwrap();
        let v = mc_cost(&s, &PolicyHandle::FullInfo(&fb), &ens, &IntegratorConfig::new(steps, 4).antithetic(true)).unwrap();
        let exact = ric.lift(0.0, &s.initial_law);
        // Euler bias is O(dt); allow it on top of the statistical error
        assert!((v.value - exact).abs() < 3.0 * v.std_err + 5e-3, "{} vs {exact}", v.value);
    }

    #[test]
    fn affine_policy_cost_matches_moment_value() {
        let s = lq(2, 1, 0.5, 1.0, AgentLaw::Gaussian { mean: vec![0.5], cov: vec![1.0] });
        let res = solve_dist_lq(&s, &DistLqConfig::default()).unwrap();
        let ens = Ensemble::sample(&s.initial_law, 0.0, 40_000, &NoiseSource::new(5, false)).unwrap();
        let v = mc_cost(&s, &PolicyHandle::Distributed(&res.params), &ens, &IntegratorConfig::new(200, 6)).unwrap();
        assert!((v.value - res.value.value).abs() < 3.0 * v.std_err + 5e-3);
    }

    #[test]
    fn decoupled_check_policy_attains_riccati_value() {
        let s = lq(2, 1, 0.0, 1.0, AgentLaw::Gaussian { mean: vec![0.0], cov: vec![1.0] });
        let ric = riccati_full(&s, RICCATI_STEPS).unwrap();
        let ens = Ensemble::sample(&s.initial_law, 0.0, 2000, &NoiseSource::new(7, false)).unwrap();
        let res = build_check_policy(
            &s,
            &ric,
            &ens,
            20_000,
            &IntegratorConfig::new(100, 8),
            &FixedPointConfig::default(),
            TimeConvention::StepTime,
        )
        .unwrap();
        let exact = ric.lift(0.0, &s.initial_law);
        let v = res.estimate;
        assert!((v.value - exact).abs() < 3.0 * v.std_err + 5e-3, "{} vs {exact}", v.value);
        assert!(res.flow_iterations.iter().all(|k| *k == 0));
    }

    #[test]
    fn lift_of_grid_value() {
        let s = lq(1, 1, 0.0, 1.0, AgentLaw::Gaussian { mean: vec![0.0], cov: vec![1.0] });
        let grid = grid_hjb_full(
            &s,
            &GridConfig {
                points: 201,
                half_width: Some(6.0),
                ..Default::default()
            },
            &FixedPointConfig::default(),
        )
        .unwrap();
        let ric = riccati_full(&s, 400).unwrap();
        let a = lift_value(ValueFunction::Grid(&grid), 0.0, &s.initial_law).unwrap();
        let b = lift_value(ValueFunction::Riccati(&ric), 0.0, &s.initial_law).unwrap();
        assert!((a - b).abs() < 0.01 * b, "{a} vs {b}");
        let dirac = InitialLaw::iid(1, AgentLaw::Dirac { point: vec![0.5] }).unwrap();
        let c = lift_value(ValueFunction::Grid(&grid), 0.0, &dirac).unwrap();
        assert!((c - grid.value(0.0, &[0.5]).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn gauss_hermite_integrates_moments() {
        let rule = gauss_hermite(6);
        let m = |p: i32| rule.iter().map(|(x, w)| w * x.powi(p)).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-12);
        assert!(m(1).abs() < 1e-12);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-10);
    }

    #[test]
    fn lift_is_linear_in_constants() {
        let s = lq(2, 1, 0.5, 1.0, AgentLaw::Gaussian { mean: vec![0.0], cov: vec![1.0] });
        let mut ric = riccati_full(&s, 100).unwrap();
        let a = lift_value(ValueFunction::Riccati(&ric), 0.0, &s.initial_law).unwrap();
        ric.s.iter_mut().for_each(|v| *v += 2.5);
        let b = lift_value(ValueFunction::Riccati(&ric), 0.0, &s.initial_law).unwrap();
        assert!((b - a - 2.5).abs() < 1e-12);
        let _ = DistributedFn(|_: usize, _: f64, _: &[f64], _: &mut [f64]| {});
    }
}
